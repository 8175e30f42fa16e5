"""Chirp synthesis, direction-dependent shaping and the anchor frame codec."""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import signal

from .ams import DirectionalGainTable, wrap_angle
from .errors import CorruptFrameError, InvalidArgumentError, InvalidSpecError, NotFoundError

DEFAULT_SAMPLE_RATE = 2e6


@dataclass(frozen=True)
class ChirpSpec:
    amplitude: float = 1.0
    f0: float = 125e3
    bandwidth: float = 125e3
    duration: float = 0.2e-3
    sample_rate: float = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        if not self.duration > 0:
            raise InvalidSpecError("chirp duration must be positive")
        if not self.f0 > 0:
            raise InvalidSpecError("start frequency must be positive")
        if self.bandwidth < 0:
            raise InvalidSpecError("bandwidth must be non-negative")
        if not self.f0 + self.bandwidth < self.sample_rate / 2:
            raise InvalidSpecError(
                f"f0 + bandwidth = {self.f0 + self.bandwidth:g} Hz violates Nyquist "
                f"for sample_rate {self.sample_rate:g} Hz"
            )

    @property
    def slope(self) -> float:
        return self.bandwidth / self.duration

    @property
    def n_samples(self) -> int:
        """Samples covering 0 <= t <= duration."""
        return int(np.floor(self.duration * self.sample_rate + 1e-9)) + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ChirpSpec":
        return cls(**doc)


def chirp_phase(spec: ChirpSpec, t):
    return 2 * np.pi * (spec.f0 + 0.5 * spec.slope * t) * t


def synth_chirp(spec: ChirpSpec, n: int | None = None) -> np.ndarray:
    """Linear up-chirp sampled at t = k / fs for k < n (default: through t = T)."""
    n = spec.n_samples if n is None else n
    t = np.arange(n) / spec.sample_rate
    return spec.amplitude * np.cos(chirp_phase(spec, t))


def interpolate_gain(table: DirectionalGainTable, theta, freqs) -> np.ndarray:
    """Complex gain of the nearest table row at arbitrary frequencies.

    Linear in frequency inside the grid, unity outside it.
    """
    row = table.gains[_row_for(table, theta)]
    freqs = np.asarray(freqs, dtype=float)
    g = np.ones(freqs.shape, dtype=complex)
    if table.freqs.size == 1:
        g[np.isclose(freqs, table.freqs[0])] = row[0]
        return g
    inside = (freqs >= table.freqs[0]) & (freqs <= table.freqs[-1])
    g[inside] = (np.interp(freqs[inside], table.freqs, row.real)
                 + 1j * np.interp(freqs[inside], table.freqs, row.imag))
    return g


def _row_for(table: DirectionalGainTable, theta) -> int:
    i = table.nearest_row(theta)
    m = table.angles.size
    if m > 1:
        step = np.max(np.diff(table.angles))
        full_circle = table.angles[-1] - table.angles[0] + step >= 2 * np.pi - 1e-9
        if not full_circle and abs(wrap_angle(table.angles[i] - theta)) > step / 2 + 1e-12:
            raise InvalidArgumentError(f"angle {theta:.4f} rad outside table coverage")
    return i


def shape_samples(samples, sample_rate: float, table: DirectionalGainTable, theta) -> np.ndarray:
    """Filter a real waveform by one direction of the gain table (circular, same length)."""
    x = np.asarray(samples, dtype=float)
    n = x.size
    spec = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    return np.fft.irfft(spec * interpolate_gain(table, theta, freqs), n)


def shape_by_direction(spec: ChirpSpec, table: DirectionalGainTable, theta,
                       samples=None) -> np.ndarray:
    """Chirp (or the given drive samples) as radiated toward ``theta``.

    The product with the gain is circular over the input length, so callers
    that need the dispersed tail should zero-pad first.
    """
    x = synth_chirp(spec) if samples is None else samples
    return shape_samples(x, spec.sample_rate, table, theta)


# --- anchor frame -----------------------------------------------------------

FRAME_BITS = 8
MAX_ANCHORS = 128


@dataclass(frozen=True)
class AnchorFrame:
    anchor_id: int = 0
    preamble: ChirpSpec = field(default_factory=lambda: ChirpSpec(duration=0.4e-3))
    bit_duration: float = 0.2e-3
    guard: float = 0.2e-3

    def __post_init__(self):
        if not 0 <= self.anchor_id < MAX_ANCHORS:
            raise InvalidSpecError(f"anchor id {self.anchor_id} does not fit in 7 bits")
        if self.bit_duration <= 0 or self.guard < 0:
            raise InvalidSpecError("bit duration must be positive and guard non-negative")

    @property
    def sample_rate(self) -> float:
        return self.preamble.sample_rate

    @property
    def preamble_samples(self) -> int:
        return int(round(self.preamble.duration * self.sample_rate))

    @property
    def half_bit_samples(self) -> int:
        return int(round(self.bit_duration * self.sample_rate / 2))

    @property
    def guard_samples(self) -> int:
        return int(round(self.guard * self.sample_rate))

    @property
    def n_samples(self) -> int:
        return self.preamble_samples + 2 * FRAME_BITS * self.half_bit_samples + self.guard_samples

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate

    def symbol_spec(self) -> ChirpSpec:
        """Chirp sent during a high FM0 half-bit."""
        return replace(self.preamble, duration=self.bit_duration / 2)

    def to_dict(self) -> dict:
        return {
            "anchor_id": self.anchor_id,
            "preamble": self.preamble.to_dict(),
            "bit_duration": self.bit_duration,
            "guard": self.guard,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "AnchorFrame":
        doc = dict(doc)
        if "preamble" in doc:
            doc["preamble"] = ChirpSpec.from_dict(doc["preamble"])
        return cls(**doc)


def frame_bits(anchor_id: int) -> list[int]:
    """Seven id bits, MSB first, followed by an even-parity bit."""
    if not 0 <= anchor_id < MAX_ANCHORS:
        raise InvalidSpecError(f"anchor id {anchor_id} does not fit in 7 bits")
    bits = [(anchor_id >> (6 - i)) & 1 for i in range(7)]
    return bits + [sum(bits) % 2]


def bits_to_id(bits) -> int:
    bits = list(bits)
    if len(bits) != FRAME_BITS:
        raise CorruptFrameError(f"expected {FRAME_BITS} bits, got {len(bits)}")
    if sum(bits) % 2:
        raise CorruptFrameError("parity check failed")
    return int("".join(str(b) for b in bits[:7]), 2)


def fm0_encode(bits, start_level: int = 0) -> np.ndarray:
    """FM0 half-bit levels: invert at every bit start, invert mid-bit for a 0."""
    level = start_level
    out = []
    for b in bits:
        level ^= 1
        out.append(level)
        if b == 0:
            level ^= 1
        out.append(level)
    return np.array(out, dtype=int)


def fm0_decode(levels, start_level: int = 0) -> list[int]:
    levels = np.asarray(levels, dtype=int)
    if levels.size % 2:
        raise CorruptFrameError("odd number of FM0 half-bits")
    prev = start_level
    bits = []
    for first, second in levels.reshape(-1, 2):
        if first == prev:
            raise CorruptFrameError("missing FM0 transition at bit boundary")
        bits.append(1 if first == second else 0)
        prev = second
    return bits


def encode_frame(frame: AnchorFrame) -> np.ndarray:
    """Preamble chirp, FM0 id field (chirp = high, silence = low), guard silence."""
    n_half = frame.half_bit_samples
    symbol = synth_chirp(frame.symbol_spec(), n_half)
    parts = [synth_chirp(frame.preamble, frame.preamble_samples)]
    for level in fm0_encode(frame_bits(frame.anchor_id)):
        parts.append(symbol if level else np.zeros(n_half))
    parts.append(np.zeros(frame.guard_samples))
    return np.concatenate(parts)


def decode_frame(samples, frame: AnchorFrame | None = None, threshold: float = 5.0,
                 return_offset: bool = False):
    """Recover the anchor id from a capture containing at least one frame.

    ``frame`` supplies the timing and chirp parameters; its id is ignored.
    The preamble must exceed ``threshold`` times the median absolute
    correlation, otherwise NotFoundError is raised.
    """
    frame = AnchorFrame() if frame is None else frame
    x = np.asarray(samples, dtype=float)
    pre = synth_chirp(frame.preamble, frame.preamble_samples)
    n_half = frame.half_bit_samples
    needed = frame.preamble_samples + 2 * FRAME_BITS * n_half
    if x.size < needed:
        raise NotFoundError("capture shorter than one frame")
    corr = signal.correlate(x[: x.size - needed + pre.size], pre, mode="valid", method="fft")
    mag = np.abs(corr)
    start = int(np.argmax(mag))
    floor = threshold * np.median(mag)
    if mag[start] == 0 or mag[start] < floor:
        raise NotFoundError("no preamble above detection threshold")
    amp = corr[start] / np.dot(pre, pre)
    symbol = synth_chirp(frame.symbol_spec(), n_half)
    sym_energy = np.dot(symbol, symbol)
    base = start + frame.preamble_samples
    levels = []
    for j in range(2 * FRAME_BITS):
        seg = x[base + j * n_half: base + (j + 1) * n_half]
        levels.append(int(np.dot(seg, symbol) / sym_energy / amp > 0.5))
    anchor_id = bits_to_id(fm0_decode(levels))
    return (anchor_id, start) if return_offset else anchor_id


# --- sample files -----------------------------------------------------------

_MBSG_MAGIC = b"MBSG"
_MBSG_VERSION = 1


def write_samples(path, samples, sample_rate: float):
    x = np.asarray(samples, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_MBSG_MAGIC)
        fh.write(struct.pack("<HdQ", _MBSG_VERSION, float(sample_rate), x.size))
        fh.write(x.tobytes())


def read_samples(path):
    """Returns (samples as float64, sample_rate)."""
    raw = Path(path).read_bytes()
    if raw[:4] != _MBSG_MAGIC:
        raise InvalidSpecError("not a sample file (bad magic)")
    version, fs, count = struct.unpack_from("<HdQ", raw, 4)
    if version != _MBSG_VERSION:
        raise InvalidSpecError(f"unsupported sample file version {version}")
    off = 4 + struct.calcsize("<HdQ")
    x = np.frombuffer(raw, "<f4", count, off).astype(float)
    return x, fs
