"""Receiver-side processing: chirp detection, EM/acoustic timing and the
multiply-and-low-pass multipath suppressor."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

from .errors import ConfigurationError, InvalidArgumentError, NotFoundError
from .waveform import ChirpSpec, chirp_phase, synth_chirp

DEFAULT_SCORE_FLOOR = 0.3
DEFAULT_TRIM = 0.05
DEFAULT_GRID_POINTS = 64


def _samples_of(capture):
    x = getattr(capture, "samples", capture)
    return np.asarray(x, dtype=float)


def analytic_xcorr(x, ref) -> np.ndarray:
    """Complex correlation of x with the analytic version of ref, lags 0..len(x)-len(ref).

    Its magnitude is the correlation envelope, free of carrier ripple.
    """
    ref_a = signal.hilbert(ref)
    return signal.correlate(x, ref_a, mode="valid", method="fft")


def normalized_xcorr(x, ref) -> np.ndarray:
    """Envelope correlation normalised to [0, 1] by the sliding window energy."""
    x = np.asarray(x, dtype=float)
    ref = np.asarray(ref, dtype=float)
    n = ref.size
    if x.size < n:
        raise InvalidArgumentError("capture shorter than the reference")
    c = np.abs(analytic_xcorr(x, ref))
    csum = np.concatenate([[0.0], np.cumsum(x * x)])
    energy = csum[n:] - csum[:-n]
    denom = np.linalg.norm(ref) * np.sqrt(np.maximum(energy, 0.0))
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(denom > 1e-12 * max(denom.max(), 1e-300), c / denom, 0.0)
    return np.clip(out, 0.0, 1.0)


def _parabolic(y, i) -> float:
    if 0 < i < y.size - 1:
        a, b, c = y[i - 1], y[i], y[i + 1]
        den = a - 2 * b + c
        if den < 0:
            return i + 0.5 * (a - c) / den
    return float(i)


@dataclass(frozen=True)
class Detection:
    index: int
    score: float
    refined: float  # sub-sample position of the envelope peak


def detect_chirp(capture, spec: ChirpSpec, floor: float = DEFAULT_SCORE_FLOOR,
                 start: int = 0, stop: int | None = None) -> Detection:
    """Strongest normalised correlation with the reference chirp in [start, stop)."""
    x = _samples_of(capture)
    ref = synth_chirp(spec)
    ncc = normalized_xcorr(x, ref)
    stop = ncc.size if stop is None else min(stop, ncc.size)
    if start >= stop:
        raise NotFoundError("empty search window")
    i = start + int(np.argmax(ncc[start:stop]))
    if ncc[i] < floor:
        raise NotFoundError(f"best correlation score {ncc[i]:.3f} below floor {floor}")
    env = np.abs(analytic_xcorr(x, ref))
    return Detection(i, float(ncc[i]), _parabolic(env, i))


def _local_maxima(y) -> np.ndarray:
    return signal.find_peaks(y)[0]


def _replica_residual(xc, auto, zero, p, w) -> float:
    """Relative misfit between the correlation around ``p`` and a scaled drive autocorrelation.

    Noise can move the envelope peak by a sample, so the model is tried at
    offsets -1, 0, +1 with a least-squares complex scale.
    """
    lo, hi = max(p - w, 0), min(p + w + 1, xc.size)
    seg = xc[lo:hi]
    best = np.inf
    for c in (p - 1, p, p + 1):
        a0, a1 = zero - (c - lo), zero + (hi - c)
        if a0 < 0 or a1 > auto.size:
            continue
        model = auto[a0:a1]
        a = np.vdot(model, seg) / max(np.vdot(model, model).real, 1e-300)
        best = min(best, np.linalg.norm(seg - a * model))
    return float(best / max(np.linalg.norm(seg), 1e-300))


def detect_em_marker(capture, drive: ChirpSpec, floor: float = DEFAULT_SCORE_FLOOR,
                     noise_factor: float = 16.0, fit_tol: float = 0.5,
                     rel_threshold: float = 0.5) -> Detection:
    """Earliest correlation peak that is an unshaped copy of the drive.

    The leakage copy precedes every acoustic path but can be much weaker
    than a nearby arrival, whose shaped waveform also leaves correlation
    lobes ahead of its onset. Candidates above ``noise_factor`` times the
    5th-percentile envelope are checked in time order against the drive
    autocorrelation; the first that fits within ``fit_tol`` and is not a
    sidelobe of a stronger peak wins. The 5th percentile is used because
    short captures are mostly signal. If none
    fits, the earliest peak above ``rel_threshold`` of the maximum is used.
    """
    x = _samples_of(capture)
    ref = synth_chirp(drive)
    ncc = normalized_xcorr(x, ref)
    if ncc.size == 0 or ncc.max() < floor:
        raise NotFoundError("no leakage marker above floor")
    xc = analytic_xcorr(x, ref)
    env = np.abs(xc)
    peaks = _local_maxima(np.concatenate([[0.0], env, [0.0]])) - 1
    auto = signal.correlate(ref, signal.hilbert(ref), mode="full", method="fft")
    zero = ref.size - 1
    w = max(int(np.ceil(drive.sample_rate / max(drive.bandwidth, 1.0))), 2)
    # relative floor keeps numerical residue out when there is no noise
    level = max(noise_factor * np.percentile(env, 5), 1e-3 * env.max())
    cand = peaks[env[peaks] >= level]
    strong = cand[np.argsort(env[cand])[::-1][:64]]
    mag = np.abs(auto) / np.abs(auto[zero])
    chosen = None
    for p in cand:
        # skip peaks explained by the autocorrelation sidelobes of a stronger one
        q = strong[(env[strong] > env[p]) & (np.abs(strong - p) <= zero)]
        side = (env[q] * mag[zero + p - q]).max() if q.size else 0.0
        if env[p] < 3.0 * side:
            continue
        if _replica_residual(xc, auto, zero, int(p), w) < fit_tol:
            chosen = int(p)
            break
    if chosen is None:
        chosen = int(peaks[env[peaks] >= rel_threshold * env.max()][0])
    return Detection(chosen, float(ncc[chosen]), _parabolic(env, chosen))


def acoustic_onset(capture, drive: ChirpSpec, em: Detection, rel_threshold: float = 0.5,
                   min_separation: int | None = None, cluster: float = 20e-6) -> float | None:
    """Sub-sample index of the first acoustic arrival after the leakage marker.

    The leakage contribution (a scaled drive copy) is removed from the
    correlation envelope before the search, so its sidelobes cannot be
    mistaken for an arrival. The first peak above ``rel_threshold`` of the
    strongest one opens a window of ``cluster`` seconds; a shaped arrival
    has several envelope lobes and the strongest one inside that window is
    returned. Returns None when nothing remains, which means the acoustic
    arrival coincides with the leakage marker.
    """
    x = _samples_of(capture)
    ref = synth_chirp(drive)
    ref_a = signal.hilbert(ref)
    xc = analytic_xcorr(x, ref)
    e = em.index
    auto = signal.correlate(ref, ref_a, mode="full", method="fft")
    zero = ref.size - 1
    a_em = xc[e].real / auto[zero].real
    lo, hi = max(e - zero, 0), min(e + zero + 1, xc.size)
    xc = xc.copy()
    xc[lo:hi] -= a_em * auto[zero - (e - lo): zero + (hi - e)]
    env = np.abs(xc)
    if min_separation is None:
        min_separation = max(int(np.ceil(3 * drive.sample_rate / max(drive.bandwidth, 1.0))), 4)
    tail = env[e + min_separation:]
    if tail.size == 0 or tail.max() <= 1e-6 * abs(xc[e] + a_em * auto[zero]):
        return None
    peaks = _local_maxima(tail)
    if peaks.size == 0:
        return None
    level = rel_threshold * tail[peaks].max()
    first = int(peaks[tail[peaks] >= level][0])
    width = int(round(cluster * drive.sample_rate))
    best = _strongest_in_cluster(tail, peaks, first, width) + e + min_separation
    return _parabolic(env, best)


def _strongest_in_cluster(env, peaks, first, width):
    near = peaks[(peaks >= first) & (peaks <= first + width)]
    return int(near[np.argmax(env[near])])


def _remove_marker(xc, auto, zero, rel_threshold, fit_tol, w):
    """Subtract the earliest strong peak if it is an exact drive replica."""
    env = np.abs(xc)
    peaks = _local_maxima(env)
    if peaks.size == 0:
        return xc
    p = int(peaks[env[peaks] >= rel_threshold * env[peaks].max()][0])
    lo, hi = max(p - w, 0), min(p + w + 1, xc.size)
    a = xc[p].real / auto[zero].real
    model = a * auto[zero - (p - lo): zero + (hi - p)]
    if np.linalg.norm(xc[lo:hi] - model) >= fit_tol * np.linalg.norm(xc[lo:hi]):
        return xc
    lo, hi = max(p - zero, 0), min(p + zero + 1, xc.size)
    out = xc.copy()
    out[lo:hi] -= a * auto[zero - (p - lo): zero + (hi - p)]
    if np.abs(out).max() <= 1e-6 * np.abs(xc).max():
        return xc  # nothing but the replica: it is the arrival itself
    return out


def first_arrival(capture, spec: ChirpSpec, expect_marker: bool = True,
                  rel_threshold: float = 0.5, smooth: float = 32e-6,
                  fit_tol: float = 0.3) -> float:
    """Sub-sample index of the first acoustic arrival, without needing the marker.

    A directional emitter spreads one arrival over several correlation
    lobes, so the envelope is smoothed over ``smooth`` seconds before the
    first peak above ``rel_threshold`` of the maximum is taken. When
    ``expect_marker`` is set, an earliest peak that is an exact drive
    replica (envelope fitted by the drive autocorrelation to within
    ``fit_tol``) is treated as the leakage copy and removed first.
    """
    x = _samples_of(capture)
    ref = synth_chirp(spec)
    xc = analytic_xcorr(x, ref)
    if expect_marker:
        auto = signal.correlate(ref, signal.hilbert(ref), mode="full", method="fft")
        w = max(int(np.ceil(4 * spec.sample_rate / max(spec.bandwidth, 1.0))), 4)
        xc = _remove_marker(xc, auto, ref.size - 1, rel_threshold, fit_tol, w)
    env = np.abs(xc)
    n_win = max(int(round(smooth * spec.sample_rate)), 1)
    if n_win > 1:
        k = np.hanning(n_win + 2)[1:-1]
        env = np.convolve(env, k / k.sum(), mode="same")
    peaks = _local_maxima(env)
    if peaks.size == 0:
        raise NotFoundError("no correlation peak in capture")
    first = int(peaks[env[peaks] >= rel_threshold * env[peaks].max()][0])
    return _parabolic(env, first)


@dataclass(frozen=True)
class SuppressionParams:
    f_cut: float = 35e3
    filter_order: int = 255
    t_min: float | None = None  # smallest LOS-NLOS delay expected, s

    def suppressible_delay(self, spec: ChirpSpec) -> float:
        """Delays longer than f_cut / k end up above the cutoff."""
        return self.f_cut / spec.slope

    def validate(self, spec: ChirpSpec):
        if not self.f_cut > 0:
            raise ConfigurationError("f_cut must be positive")
        if self.filter_order < 3 or self.filter_order % 2 == 0:
            raise ConfigurationError("filter_order must be an odd tap count >= 3")
        if not self.f_cut < spec.sample_rate / 2:
            raise ConfigurationError("f_cut must be below Nyquist")
        if self.t_min is not None:
            bound = spec.slope * self.t_min
            if not self.f_cut < bound:
                raise ConfigurationError(
                    f"f_cut = {self.f_cut:g} Hz must be below k*t_min = {bound:g} Hz "
                    f"(k = {spec.slope:g} Hz/s, t_min = {self.t_min:g} s)"
                )

    def taps(self, sample_rate: float) -> np.ndarray:
        return signal.firwin(self.filter_order, self.f_cut, fs=sample_rate)


@dataclass
class EnvelopeFeature:
    envelope: np.ndarray
    resampled_spectrum: np.ndarray
    freq_grid: np.ndarray

    def __post_init__(self):
        self.envelope = np.asarray(self.envelope)
        self.resampled_spectrum = np.asarray(self.resampled_spectrum, dtype=float)
        self.freq_grid = np.asarray(self.freq_grid, dtype=float)
        if self.resampled_spectrum.size == 0 or self.envelope.size == 0:
            raise InvalidArgumentError("empty feature")
        if not (np.all(np.isfinite(self.resampled_spectrum)) and np.all(np.isfinite(self.envelope))):
            raise InvalidArgumentError("feature contains non-finite values")

    def to_dict(self) -> dict:
        env = self.envelope
        doc = {
            "freq_grid": self.freq_grid.tolist(),
            "resampled_spectrum": self.resampled_spectrum.tolist(),
        }
        if np.iscomplexobj(env):
            doc["envelope_re"] = env.real.tolist()
            doc["envelope_im"] = env.imag.tolist()
        else:
            doc["envelope"] = env.tolist()
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "EnvelopeFeature":
        if "envelope" in doc:
            env = np.asarray(doc["envelope"])
        else:
            env = np.asarray(doc["envelope_re"]) + 1j * np.asarray(doc["envelope_im"])
        return cls(env, doc["resampled_spectrum"], doc["freq_grid"])


def feature_grid(spec: ChirpSpec, n_points: int = DEFAULT_GRID_POINTS,
                 trim: float = DEFAULT_TRIM) -> np.ndarray:
    """Frequencies f0 + k*t sampled away from the filter transients at both ends."""
    return np.linspace(spec.f0 + trim * spec.bandwidth, spec.f0 + (1 - trim) * spec.bandwidth,
                       n_points)


def _chirp_window(segment, spec: ChirpSpec) -> np.ndarray:
    n = spec.n_samples
    seg = np.asarray(segment, dtype=float)[:n]
    if seg.size < n:
        seg = np.concatenate([seg, np.zeros(n - seg.size)])
    return seg


def mix_down(segment, spec: ChirpSpec, quadrature: bool = True) -> np.ndarray:
    """Product of the received segment with the reference chirp."""
    seg = _chirp_window(segment, spec)
    t = np.arange(seg.size) / spec.sample_rate
    ref = np.exp(-1j * chirp_phase(spec, t)) if quadrature else np.cos(chirp_phase(spec, t))
    return seg * ref


def lowpass(x, params: SuppressionParams, sample_rate: float) -> np.ndarray:
    """Zero-phase FIR low-pass with zero padding on both sides."""
    h = params.taps(sample_rate)
    pad = np.zeros(h.size + 1, dtype=np.result_type(x, float))
    y = signal.filtfilt(h, [1.0], np.concatenate([pad, x, pad]), padlen=0)
    return y[pad.size: pad.size + len(x)]


def suppress_multipath(segment, spec: ChirpSpec, params: SuppressionParams | None = None,
                       quadrature: bool = True, trim: float = DEFAULT_TRIM,
                       grid=None) -> EnvelopeFeature:
    """Recover the LOS spectral envelope from a segment starting at the chirp onset.

    Mixing with the reference chirp turns each delayed path into a tone at
    k * delay; the low-pass keeps the LOS term near DC. With quadrature
    mixing the magnitude of the baseband output is used; the in-phase
    variant returns the real baseband signal instead.
    """
    params = SuppressionParams() if params is None else params
    params.validate(spec)
    m = mix_down(segment, spec, quadrature)
    n = lowpass(m, params, spec.sample_rate)
    env = np.abs(n) if quadrature else n
    grid = feature_grid(spec, trim=trim) if grid is None else np.asarray(grid, dtype=float)
    t = np.arange(env.size) / spec.sample_rate
    resampled = np.interp((grid - spec.f0) / spec.slope, t, env)
    return EnvelopeFeature(n if quadrature else env, resampled, grid)


def raw_spectrum_feature(segment, spec: ChirpSpec, grid=None, nfft: int = 4096) -> EnvelopeFeature:
    """Baseline: FFT magnitude of the unprocessed segment on the same grid."""
    seg = _chirp_window(segment, spec)
    nfft = max(nfft, seg.size)
    mag = np.abs(np.fft.rfft(seg, nfft))
    f = np.fft.rfftfreq(nfft, 1.0 / spec.sample_rate)
    grid = feature_grid(spec) if grid is None else np.asarray(grid, dtype=float)
    return EnvelopeFeature(seg, np.interp(grid, f, mag), grid)


__all__ = [
    "Detection",
    "SuppressionParams",
    "EnvelopeFeature",
    "normalized_xcorr",
    "detect_chirp",
    "detect_em_marker",
    "acoustic_onset",
    "first_arrival",
    "feature_grid",
    "mix_down",
    "lowpass",
    "suppress_multipath",
    "raw_spectrum_feature",
]
