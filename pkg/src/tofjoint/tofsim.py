"""Dual-frequency, four-phase continuous-wave ToF: forward simulation and decoding.

Channel order is frequency-major: (f1: 0, 90, 180, 270 deg, f2: 0, 90, 180, 270 deg).
A pixel at depth z (mm) has round-trip phase ``phi = 4*pi*f*z / c`` and bucket
``theta`` samples ``offset + amplitude * cos(phi - theta)``, which the standard
decode ``atan2(C90 - C270, C0 - C180)`` inverts exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .geometry import DepthMap

SPEED_OF_LIGHT = 299_792_458.0  # m/s
PHASE_OFFSETS = np.array([0.0, 0.5 * np.pi, np.pi, 1.5 * np.pi])
TWO_PI = 2.0 * np.pi


@dataclass(frozen=True, eq=False)
class RawToFFrame:
    channels: np.ndarray  # (8, H, W)
    freqs: tuple[float, float]

    def __post_init__(self):
        ch = np.array(self.channels, dtype=np.float64)
        if ch.ndim != 3 or ch.shape[0] != 8:
            raise ContractViolation(f"a raw frame needs 8 equal-size channels, got shape {ch.shape}")
        f1, f2 = (float(f) for f in self.freqs)
        if not (f1 > 0 and f2 > 0 and f1 != f2):
            raise ContractViolation(f"frequencies must be positive and distinct, got {self.freqs}")
        ch.setflags(write=False)
        object.__setattr__(self, "channels", ch)
        object.__setattr__(self, "freqs", (f1, f2))

    @property
    def shape(self) -> tuple[int, int]:
        return self.channels.shape[1:]

    def buckets(self, freq_index: int) -> np.ndarray:
        """The four (0, 90, 180, 270 deg) samples of one frequency, shape (4, H, W)."""
        if freq_index not in (0, 1):
            raise ContractViolation("freq_index must be 0 or 1")
        return self.channels[4 * freq_index: 4 * freq_index + 4]


@dataclass(frozen=True)
class SimulationConfig:
    freqs: tuple[float, float] = (20e6, 100e6)
    amplitude: float = 1.0
    offset: float = 0.0
    shot_noise_sigma: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if not self.amplitude > 0:
            raise ContractViolation("amplitude must be > 0")
        if not self.shot_noise_sigma >= 0:
            raise ContractViolation("shot_noise_sigma must be >= 0")
        f1, f2 = self.freqs
        if not (f1 > 0 and f2 > 0 and f1 != f2):
            raise ContractViolation(f"frequencies must be positive and distinct, got {self.freqs}")


def phase_of_depth(z_mm, freq: float) -> np.ndarray:
    """Unwrapped round-trip phase for depth in mm."""
    return 4.0 * np.pi * freq * (np.asarray(z_mm, dtype=np.float64) * 1e-3) / SPEED_OF_LIGHT


def depth_of_phase(phase, freq: float) -> np.ndarray:
    """Inverse of :func:`phase_of_depth`, in mm."""
    return np.asarray(phase, dtype=np.float64) * SPEED_OF_LIGHT / (4.0 * np.pi * freq) * 1e3


def unambiguous_range_mm(f1: float, f2: float | None = None) -> float:
    """c / (2 f) for one frequency, c / (2 gcd(f1, f2)) for a pair (integer Hz)."""
    f = f1 if f2 is None else math.gcd(int(round(f1)), int(round(f2)))
    return SPEED_OF_LIGHT / (2.0 * f) * 1e3


def simulate_raw(gt_depth: DepthMap, cfg: SimulationConfig, rng: np.random.Generator | None = None) -> RawToFFrame:
    """Ideal four-bucket correlation samples for both frequencies.

    Noise is drawn channel by channel in row-major pixel order from ``rng``
    (default: a generator seeded with ``cfg.rng_seed``). Invalid pixels carry no
    signal, only offset and noise.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    z = gt_depth.filled(0.0)
    amp = np.where(gt_depth.mask, cfg.amplitude, 0.0)
    channels = np.empty((8,) + gt_depth.shape)
    for fi, freq in enumerate(cfg.freqs):
        phi = phase_of_depth(z, freq)
        for j, theta in enumerate(PHASE_OFFSETS):
            channels[4 * fi + j] = cfg.offset + amp * np.cos(phi - theta)
    if cfg.shot_noise_sigma > 0:
        channels += rng.normal(0.0, cfg.shot_noise_sigma, size=channels.shape)
    return RawToFFrame(channels, cfg.freqs)


def simulate_frames(gt_depth: DepthMap, cfg: SimulationConfig, n_frames: int) -> list[RawToFFrame]:
    """``n_frames`` shots of one scene sharing a single seeded noise stream."""
    if n_frames < 1:
        raise ContractViolation("n_frames must be >= 1")
    rng = np.random.default_rng(cfg.rng_seed)
    return [simulate_raw(gt_depth, cfg, rng) for _ in range(n_frames)]


def decode_phase(frame: RawToFFrame, freq_index: int) -> tuple[np.ndarray, np.ndarray]:
    """Wrapped phase in [0, 2*pi) and amplitude (confidence) for one frequency."""
    c0, c90, c180, c270 = frame.buckets(freq_index)
    i = c0 - c180
    q = c90 - c270
    phase = np.mod(np.arctan2(q, i), TWO_PI)
    # mod can round a tiny negative angle up to exactly 2*pi
    phase = np.where(phase >= TWO_PI, 0.0, phase)
    confidence = 0.5 * np.hypot(i, q)
    return phase, confidence


def _circular_distance(a, b):
    d = np.mod(a - b, TWO_PI)
    return np.minimum(d, TWO_PI - d)


def unwrap_dual_frequency(phase1, phase2, freqs, max_residual: float = 0.5,
                          valid=None) -> DepthMap:
    """Resolve the high-frequency wrap count with the low-frequency phase.

    Candidates are ``z = (phase2 + 2*pi*k) * c / (4*pi*f2)`` for
    ``k = 0 .. f2/gcd - 1``; the one whose predicted low-frequency phase is
    circularly closest to ``phase1`` wins. Pixels whose best residual exceeds
    ``max_residual`` radians (or that are False in ``valid``) come back invalid.
    """
    phase1 = np.asarray(phase1, dtype=np.float64)
    phase2 = np.asarray(phase2, dtype=np.float64)
    if phase1.shape != phase2.shape or phase1.ndim != 2:
        raise ContractViolation("phase rasters must be equal-size 2-D arrays")
    f1, f2 = (float(f) for f in freqs)
    g = math.gcd(int(round(f1)), int(round(f2)))
    n_wraps = int(round(f2)) // g

    best_res = np.full(phase1.shape, np.inf)
    best_z = np.full(phase1.shape, np.nan)
    for kw in range(n_wraps):
        z = depth_of_phase(phase2 + TWO_PI * kw, f2)
        res = _circular_distance(phase_of_depth(z, f1), phase1)
        better = res < best_res
        best_res = np.where(better, res, best_res)
        best_z = np.where(better, z, best_z)

    mask = (best_res <= max_residual) & (best_z > 0)
    if valid is not None:
        mask &= np.asarray(valid, dtype=bool)
    return DepthMap(np.where(mask, best_z, np.nan), mask)


def decode_depth(frame: RawToFFrame, min_confidence: float = 0.0,
                 max_residual: float = 0.5) -> tuple[DepthMap, np.ndarray]:
    """Full traditional pipeline: per-frequency phase, unwrap, confidence gate.

    Returns the decoded depth and the high-frequency confidence raster. Pixels
    with confidence <= ``min_confidence`` in either frequency are invalid.
    """
    p1, conf1 = decode_phase(frame, 0)
    p2, conf2 = decode_phase(frame, 1)
    ok = (conf1 > min_confidence) & (conf2 > min_confidence)
    return unwrap_dual_frequency(p1, p2, frame.freqs, max_residual, valid=ok), conf2


def average_frames(frames: list[DepthMap]) -> DepthMap:
    """Per-pixel mean over the frames where the pixel is valid.

    A pixel is valid in the result iff it is valid in at least half the frames.
    """
    if len(frames) == 0:
        raise ContractViolation("cannot average an empty list of frames")
    shape = frames[0].shape
    if any(f.shape != shape for f in frames):
        raise ContractViolation("frames must share one raster size")
    stack = np.stack([f.filled(0.0) for f in frames])
    masks = np.stack([f.mask for f in frames])
    count = masks.sum(axis=0)
    total = np.where(masks, stack, 0.0).sum(axis=0)
    mask = 2 * count >= len(frames)
    mask &= count > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = total / count
    return DepthMap(np.where(mask, mean, np.nan), mask)
