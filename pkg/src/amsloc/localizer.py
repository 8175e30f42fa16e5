"""Position fixes from anchor measurements and inertial track fusion."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InfeasibleMeasurementError, InvalidArgumentError, SolverFailureError
from .estimators import AnchorMeasurement
from .tdma import Slot, tdma_schedule


@dataclass
class PositionEstimate:
    p: np.ndarray
    residual_norm: float = 0.0
    iterations: int = 0
    per_anchor_residuals: list = field(default_factory=list)

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        if self.p.shape != (3,) or not np.all(np.isfinite(self.p)):
            raise InvalidArgumentError("position must be a finite 3-vector")

    def to_dict(self) -> dict:
        return {
            "p": self.p.tolist(),
            "residual_norm": self.residual_norm,
            "iterations": self.iterations,
            "per_anchor_residuals": [list(map(float, r)) for r in self.per_anchor_residuals],
        }


@dataclass(frozen=True)
class SolverWeights:
    w_ang: float = 1.0
    w_rng: float = 1.0
    w_dep: float = 4.0

    def __post_init__(self):
        w = (self.w_ang, self.w_rng, self.w_dep)
        if min(w) < 0 or max(w) <= 0:
            raise InvalidArgumentError("weights must be non-negative with at least one positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.w_ang, self.w_rng, self.w_dep])


def single_anchor_fix(m: AnchorMeasurement, anchor) -> PositionEstimate:
    """Closed-form position from one anchor's bearing, slant range and depth."""
    if not m.feasible:
        raise InfeasibleMeasurementError(
            f"range {m.range:.3f} m is shorter than depth offset {abs(m.depth_offset):.3f} m")
    a = np.asarray(anchor, dtype=float)
    h = m.horizontal_range
    p = a + np.array([h * np.cos(m.bearing), h * np.sin(m.bearing), m.depth - a[2]])
    return PositionEstimate(p, 0.0, 0, [(0.0, 0.0, 0.0)])


def residuals(p, m: AnchorMeasurement, anchor) -> np.ndarray:
    """(bearing, horizontal-range, depth) residuals of a candidate position."""
    p = np.asarray(p, dtype=float)
    a = np.asarray(anchor, dtype=float)
    d = p - a
    normal = np.array([-np.sin(m.bearing), np.cos(m.bearing), 0.0])
    return np.array([normal @ d, np.hypot(d[0], d[1]) - m.horizontal_range, p[2] - m.depth])


def _stack(p, measurements, anchors, scale):
    return np.concatenate([scale[i] * residuals(p, m, a)
                           for i, (m, a) in enumerate(zip(measurements, anchors))])


def _scales(measurements, weights: SolverWeights):
    glob = weights.as_array()
    return [np.sqrt(glob * np.asarray(m.weights, dtype=float)) for m in measurements]


def wnls_cost(p, measurements, anchors, weights: SolverWeights = SolverWeights()) -> float:
    r = _stack(p, measurements, anchors, _scales(measurements, weights))
    return float(r @ r)


def _jacobian(fun, p, step=1e-6):
    cols = []
    for k in range(3):
        e = np.zeros(3)
        e[k] = step
        cols.append((fun(p + e) - fun(p - e)) / (2 * step))
    return np.stack(cols, axis=1)


def default_init(measurements, anchors) -> np.ndarray:
    """Mean of feasible single-anchor fixes; otherwise the anchors' centroid at
    the mean reported depth."""
    fixes = [single_anchor_fix(m, a).p for m, a in zip(measurements, anchors) if m.feasible]
    if fixes:
        return np.mean(fixes, axis=0)
    c = np.mean(np.asarray(anchors, dtype=float), axis=0)
    c[2] = np.mean([m.depth for m in measurements])
    return c


def solve_wnls(measurements, anchors, weights: SolverWeights | None = None, init=None,
               tol: float = 1e-6, max_iter: int = 100) -> PositionEstimate:
    """Levenberg-Marquardt on the weighted bearing/range/depth residuals."""
    measurements = list(measurements)
    anchors = [np.asarray(a, dtype=float) for a in anchors]
    if not measurements:
        raise InvalidArgumentError("at least one measurement is required")
    if len(anchors) != len(measurements):
        raise InvalidArgumentError("one anchor position per measurement")
    weights = SolverWeights() if weights is None else weights
    scale = _scales(measurements, weights)

    def fun(q):
        return _stack(q, measurements, anchors, scale)

    p = default_init(measurements, anchors) if init is None else np.asarray(init, dtype=float)
    r = fun(p)
    cost = r @ r
    lam = 1e-3
    it = 0
    for it in range(1, max_iter + 1):
        J = _jacobian(fun, p)
        A = J.T @ J
        g = J.T @ r
        if np.linalg.matrix_rank(J) < 3:
            raise SolverFailureError(
                "rank-deficient problem: measurements do not constrain all coordinates",
                {"position": p.tolist(), "residuals": r.tolist(), "iteration": it})
        step = None
        for _ in range(30):
            try:
                cand = -np.linalg.solve(A + lam * np.diag(np.diag(A)), g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            r_new = fun(p + cand)
            c_new = r_new @ r_new
            if c_new <= cost:
                step = cand
                p, r, cost = p + cand, r_new, c_new
                lam = max(lam / 10, 1e-12)
                break
            lam *= 10
        if step is None or np.linalg.norm(step) < tol:
            break
    if not np.all(np.isfinite(p)):
        raise SolverFailureError("solver diverged", {"residuals": r.tolist()})
    per = [tuple(residuals(p, m, a)) for m, a in zip(measurements, anchors)]
    return PositionEstimate(p, float(np.sqrt(cost)), it, per)


# --- inertial fusion --------------------------------------------------------


@dataclass
class TrackState:
    t: float
    state: np.ndarray  # (x, y, z, vx, vy, vz)
    covariance: np.ndarray

    @property
    def position(self) -> np.ndarray:
        return self.state[:3]


@dataclass(frozen=True)
class KalmanParams:
    accel_noise: float = 0.02  # m/s^2/sqrt(Hz)
    bias_walk: float = 1e-4  # m/s^3/sqrt(Hz)
    fix_sigma: float = 0.3  # m, per axis
    init_pos_sigma: float = 1.0
    init_vel_sigma: float = 0.5


@dataclass
class ImuStream:
    t: np.ndarray
    accel: np.ndarray  # (K, 3)


def _transition(dt):
    F = np.eye(6)
    F[:3, 3:] = dt * np.eye(3)
    B = np.vstack([0.5 * dt * dt * np.eye(3), dt * np.eye(3)])
    return F, B


def _process_noise(dt, q_acc, q_bias):
    """White acceleration noise plus an integrated random-walk bias."""
    i3 = np.eye(3)
    pp = q_acc * dt ** 3 / 3 + q_bias * dt ** 5 / 20
    pv = q_acc * dt ** 2 / 2 + q_bias * dt ** 4 / 8
    vv = q_acc * dt + q_bias * dt ** 3 / 3
    return np.block([[pp * i3, pv * i3], [pv * i3, vv * i3]])


def _held_accel(imu, t):
    if imu is None:
        return np.zeros(3)
    j = np.searchsorted(imu.t, t, side="right") - 1
    return imu.accel[j] if j >= 0 else np.zeros(3)


def _sym(P):
    return 0.5 * (P + P.T)


def fuse_track(times, fixes, imu: ImuStream | None = None, params: KalmanParams | None = None,
               smooth: bool = True) -> list[TrackState]:
    """Constant-velocity Kalman filter driven by IMU acceleration, updated by fixes.

    Between fixes the state is propagated through every IMU sample. With
    ``smooth`` a Rauch-Tung-Striebel pass refines the whole track.
    """
    params = KalmanParams() if params is None else params
    times = np.asarray(times, dtype=float)
    z = np.asarray([getattr(f, "p", f) for f in fixes], dtype=float)
    if times.size == 0 or z.shape != (times.size, 3):
        raise InvalidArgumentError("need one 3D fix per timestamp")
    if np.any(np.diff(times) <= 0):
        raise InvalidArgumentError("fix timestamps must be strictly increasing")
    if imu is not None:
        it = np.asarray(imu.t, dtype=float)
        if np.any(np.diff(it) <= 0):
            raise InvalidArgumentError("IMU timestamps must be strictly increasing")
    q_acc = params.accel_noise ** 2
    q_bias = params.bias_walk ** 2
    H = np.hstack([np.eye(3), np.zeros((3, 3))])
    R = params.fix_sigma ** 2 * np.eye(3)

    x = np.concatenate([z[0], np.zeros(3)])
    P = np.diag([params.init_pos_sigma ** 2] * 3 + [params.init_vel_sigma ** 2] * 3)
    t = times[0]
    filt, preds = [], []

    def predict(x, P, dt, a):
        F, B = _transition(dt)
        return F @ x + B @ a, _sym(F @ P @ F.T + _process_noise(dt, q_acc, q_bias)), F

    for k, tk in enumerate(times):
        F_total = np.eye(6)
        if k > 0:
            # propagate through IMU samples in (t, tk), holding each reading
            edges = [t]
            if imu is not None:
                edges += list(imu.t[(imu.t > t) & (imu.t < tk)])
            edges.append(tk)
            for s in range(len(edges) - 1):
                x, P, F = predict(x, P, edges[s + 1] - edges[s], _held_accel(imu, edges[s]))
                F_total = F @ F_total
        x_pred, P_pred = x.copy(), P.copy()
        S = H @ P @ H.T + R
        try:
            S_inv = np.linalg.inv(S)
            if not np.all(np.isfinite(S_inv)):
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            S_inv = np.linalg.pinv(S)
        K = P @ H.T @ S_inv
        x = x + K @ (z[k] - H @ x)
        IKH = np.eye(6) - K @ H
        P = _sym(IKH @ P @ IKH.T + K @ R @ K.T)
        t = tk
        filt.append((tk, x.copy(), P.copy()))
        preds.append((x_pred, P_pred, F_total))

    if smooth and len(filt) > 1:
        xs = [f[1] for f in filt]
        Ps = [f[2] for f in filt]
        for k in range(len(filt) - 2, -1, -1):
            x_pred, P_pred, F = preds[k + 1]
            C = Ps[k] @ F.T @ np.linalg.pinv(P_pred)
            xs[k] = xs[k] + C @ (xs[k + 1] - x_pred)
            Ps[k] = _sym(Ps[k] + C @ (Ps[k + 1] - P_pred) @ C.T)
        filt = [(f[0], xs[k], Ps[k]) for k, f in enumerate(filt)]
    return [TrackState(tk, xk, Pk) for tk, xk, Pk in filt]


def synth_imu(times, accel_true, rng, accel_noise: float = 0.02, bias_walk: float = 1e-4,
              initial_bias: float = 0.0) -> ImuStream:
    """Accelerometer samples: truth plus a random-walk bias and white noise."""
    times = np.asarray(times, dtype=float)
    acc = np.asarray(accel_true, dtype=float)
    dt = np.diff(times, prepend=times[0] - (times[1] - times[0] if times.size > 1 else 1.0))
    bias = initial_bias * np.ones(3) + np.cumsum(
        rng.normal(0.0, 1.0, acc.shape) * bias_walk * np.sqrt(dt)[:, None], axis=0)
    noise = rng.normal(0.0, 1.0, acc.shape) * accel_noise / np.sqrt(dt)[:, None]
    return ImuStream(times, acc + bias + noise)


def circle_trajectory(times, center=(4.0, 4.0, 1.5), radius: float = 2.0, speed: float = 0.2):
    """Horizontal circle at constant speed: positions, velocities, accelerations."""
    t = np.asarray(times, dtype=float)
    w = speed / radius
    c = np.asarray(center, dtype=float)
    pos = np.stack([c[0] + radius * np.cos(w * t), c[1] + radius * np.sin(w * t),
                    np.full_like(t, c[2])], axis=1)
    vel = np.stack([-speed * np.sin(w * t), speed * np.cos(w * t), np.zeros_like(t)], axis=1)
    acc = np.stack([-speed * w * np.cos(w * t), -speed * w * np.sin(w * t), np.zeros_like(t)], axis=1)
    return pos, vel, acc


__all__ = [
    "PositionEstimate",
    "SolverWeights",
    "TrackState",
    "KalmanParams",
    "ImuStream",
    "Slot",
    "single_anchor_fix",
    "residuals",
    "solve_wnls",
    "wnls_cost",
    "default_init",
    "fuse_track",
    "synth_imu",
    "circle_trajectory",
    "tdma_schedule",
]
