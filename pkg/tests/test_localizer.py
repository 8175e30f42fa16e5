import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amsloc.errors import InfeasibleMeasurementError, InvalidArgumentError, SolverFailureError
from amsloc.estimators import AnchorMeasurement
from amsloc.localizer import (
    KalmanParams,
    PositionEstimate,
    SolverWeights,
    circle_trajectory,
    fuse_track,
    residuals,
    single_anchor_fix,
    solve_wnls,
    synth_imu,
    wnls_cost,
)

SQUARE = [np.array(a) for a in [(0.0, 0.0, 0.8), (8.0, 0.0, 0.8), (8.0, 8.0, 0.8), (0.0, 8.0, 0.8)]]


def forward(p, a, i=0, sigma=(0.0, 0.0, 0.0), rng=None, weights=(1.0, 1.0, 1.0)):
    """Exact (bearing, slant range, depth) of p seen from anchor a, optionally perturbed."""
    d = np.asarray(p, dtype=float) - a
    th, r, z = np.arctan2(d[1], d[0]), np.linalg.norm(d), p[2]
    if rng is not None:
        th += rng.normal(0, sigma[0])
        r += rng.normal(0, sigma[1])
        z += rng.normal(0, sigma[2])
    return AnchorMeasurement(i, float(th), float(r), float(z), float(a[2]), weights)


def residual_oracle(p, m, a):
    dx, dy = p[0] - a[0], p[1] - a[1]
    ang = -np.sin(m.bearing) * dx + np.cos(m.bearing) * dy
    rng = np.sqrt(dx * dx + dy * dy) - np.sqrt(m.range ** 2 - (m.depth - a[2]) ** 2)
    return np.array([ang, rng, p[2] - m.depth])


def test_single_anchor_examples():
    a = np.array([1.0, 2.0, 3.0])
    p = single_anchor_fix(AnchorMeasurement(0, 0.0, 5.0, 3.0, 3.0), a).p
    assert np.allclose(p, a + [5, 0, 0])
    p = single_anchor_fix(AnchorMeasurement(0, np.pi / 2, 5.0, 6.0, 3.0), a).p
    assert np.allclose(p, a + [0, 4, 3], atol=1e-12)
    with pytest.raises(InfeasibleMeasurementError):
        single_anchor_fix(AnchorMeasurement(0, 0.0, 1.0, 6.0, 3.0), a)


@given(st.tuples(st.floats(-50, 50), st.floats(-50, 50), st.floats(0, 20)))
def test_single_anchor_inverts_forward_model(p):
    a = np.array([1.0, -2.0, 4.0])
    p = np.asarray(p)
    if np.hypot(p[0] - a[0], p[1] - a[1]) < 1e-3:
        return
    m = forward(p, a)
    fix = single_anchor_fix(m, a)
    assert np.allclose(fix.p, p, atol=1e-9)


@given(st.floats(-np.pi, np.pi), st.floats(0.5, 30.0), st.floats(-0.4, 0.4))
def test_residuals_at_fix_vanish(th, r, frac):
    a = np.array([2.0, -1.0, 3.0])
    m = AnchorMeasurement(0, th, r, 3.0 + frac * r, 3.0)
    res = residuals(single_anchor_fix(m, a).p, m, a)
    assert res[2] == 0.0
    assert np.all(np.abs(res) <= 8 * np.finfo(float).eps * max(r, 1.0))


def test_residual_examples():
    a = np.array([0.0, 0.0, 1.0])
    m = AnchorMeasurement(0, 0.0, 5.0, 4.0, 1.0)
    assert np.allclose(residuals(a + [4, 0, 3], m, a), 0.0)
    assert residuals(a + [4, 1, 3], m, a)[0] == pytest.approx(1.0)
    assert residuals(a + [4, -1, 3], m, a)[0] == pytest.approx(-1.0)


@given(st.tuples(st.floats(-20, 20), st.floats(-20, 20), st.floats(0, 10)),
       st.floats(-np.pi, np.pi), st.floats(3.0, 20.0), st.floats(0.0, 3.0))
def test_residuals_match_oracle(p, th, r, z):
    a = np.array([1.0, 1.0, 1.5])
    m = AnchorMeasurement(0, th, r, z, 1.5)
    assert np.allclose(residuals(p, m, a), residual_oracle(np.asarray(p), m, a), atol=1e-12)


def test_noiseless_four_anchor_square():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = np.array([rng.uniform(0, 8), rng.uniform(0, 8), rng.uniform(0.5, 3.0)])
        ms = [forward(p, a, i) for i, a in enumerate(SQUARE)]
        est = solve_wnls(ms, SQUARE, init=p + rng.normal(0, 0.5, 3))
        assert np.linalg.norm(est.p - p) < 1e-4
        assert est.residual_norm >= 0


def test_single_measurement_matches_closed_form():
    p = np.array([3.0, 5.0, 2.0])
    m = forward(p, SQUARE[0])
    est = solve_wnls([m], SQUARE[:1])
    assert np.allclose(est.p, single_anchor_fix(m, SQUARE[0]).p, atol=1e-6)


def test_descent_from_init():
    rng = np.random.default_rng(2)
    p = np.array([2.0, 6.0, 1.5])
    ms = [forward(p, a, i, (0.1, 0.1, 0.05), rng) for i, a in enumerate(SQUARE)]
    init = np.array([4.0, 4.0, 1.0])
    est = solve_wnls(ms, SQUARE, init=init)
    assert wnls_cost(est.p, ms, SQUARE) <= wnls_cost(init, ms, SQUARE)


def test_solver_errors():
    with pytest.raises(InvalidArgumentError):
        solve_wnls([], [])
    m = forward(np.array([3.0, 5.0, 2.0]), SQUARE[0])
    with pytest.raises(InvalidArgumentError):
        solve_wnls([m], SQUARE[:2])
    with pytest.raises(SolverFailureError) as info:
        solve_wnls([m], SQUARE[:1], weights=SolverWeights(w_ang=0.0, w_rng=1.0, w_dep=1.0))
    assert "residuals" in info.value.diagnostics
    with pytest.raises(InvalidArgumentError):
        SolverWeights(0.0, 0.0, 0.0)
    with pytest.raises(InvalidArgumentError):
        SolverWeights(-1.0, 1.0, 1.0)
    with pytest.raises(InvalidArgumentError):
        PositionEstimate([0.0, np.nan, 0.0])


@settings(max_examples=20, deadline=None)
@given(st.floats(0.01, 100.0), st.integers(0, 10_000))
def test_weight_scaling_invariance(c, seed):
    rng = np.random.default_rng(seed)
    p = np.array([rng.uniform(0, 8), rng.uniform(0, 8), rng.uniform(0.5, 3.0)])
    ms = [forward(p, a, i, (0.1, 0.1, 0.05), rng) for i, a in enumerate(SQUARE)]
    w = SolverWeights(1.0, 2.0, 3.0)
    a = solve_wnls(ms, SQUARE, w, tol=1e-10)
    b = solve_wnls(ms, SQUARE, SolverWeights(c * 1.0, c * 2.0, c * 3.0), tol=1e-10)
    assert np.allclose(a.p, b.p, atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_more_anchors_no_worse_residual_per_anchor(seed):
    rng = np.random.default_rng(seed)
    p = np.array([rng.uniform(0, 8), rng.uniform(0, 8), rng.uniform(0.5, 3.0)])
    per = []
    for k in range(1, 5):
        ms = [forward(p, a, i) for i, a in enumerate(SQUARE[:k])]
        per.append(solve_wnls(ms, SQUARE[:k]).residual_norm / k)
    assert all(b <= a + 1e-9 for a, b in zip(per, per[1:]))


def test_median_error_four_vs_one_anchor():
    rng = np.random.default_rng(1)
    sig = (np.deg2rad(10.9), 0.144, 0.1)
    errs = {1: [], 4: []}
    for _ in range(60):
        p = np.array([rng.uniform(0, 8), rng.uniform(0, 8), rng.uniform(0.5, 3.0)])
        noisy = [forward(p, a, i, sig, rng) for i, a in enumerate(SQUARE)]
        for k in errs:
            errs[k].append(np.linalg.norm(solve_wnls(noisy[:k], SQUARE[:k]).p - p))
    assert np.median(errs[4]) <= np.median(errs[1])


# --- fusion -------------------------------------------------------------------


def test_exact_fixes_pass_through():
    ts = np.arange(0.0, 10.0, 0.5)
    pos = np.stack([0.2 * ts, 1.0 + 0.1 * ts, np.full_like(ts, 2.0)], axis=1)
    params = KalmanParams(accel_noise=0.0, bias_walk=0.0, fix_sigma=0.0)
    for smooth in (False, True):
        track = fuse_track(ts, pos, params=params, smooth=smooth)
        assert np.allclose([s.position for s in track], pos, atol=1e-9)


def circle_case(seed, sigma=0.25):
    rng = np.random.default_rng(seed)
    ts = np.arange(0.0, 60.0, 0.5)
    pos, _, _ = circle_trajectory(ts)
    ti = np.arange(0.0, 60.0, 0.01)
    _, _, acc = circle_trajectory(ti)
    imu = synth_imu(ti, acc, rng)
    fixes = pos + rng.normal(0, sigma, pos.shape)
    return ts, pos, fixes, imu


def rmse(a, b):
    return float(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=1))))


def test_fused_beats_raw_and_covariance_spd():
    ts, pos, fixes, imu = circle_case(0)
    for smooth in (False, True):
        track = fuse_track(ts, fixes, imu, KalmanParams(fix_sigma=0.25), smooth=smooth)
        est = np.array([s.position for s in track])
        assert rmse(est, pos) <= rmse(fixes, pos)
        for s in track:
            assert np.allclose(s.covariance, s.covariance.T)
            assert np.all(np.linalg.eigvalsh(s.covariance) > 0)


def test_circle_speed():
    ts = np.linspace(0, 30, 301)
    _, vel, _ = circle_trajectory(ts)
    assert np.allclose(np.linalg.norm(vel, axis=1), 0.2)


def test_fusion_errors():
    with pytest.raises(InvalidArgumentError):
        fuse_track([0.0, 1.0, 1.0], np.zeros((3, 3)))
    with pytest.raises(InvalidArgumentError):
        fuse_track([0.0, 1.0], np.zeros((3, 3)))
    with pytest.raises(InvalidArgumentError):
        fuse_track([], np.zeros((0, 3)))
