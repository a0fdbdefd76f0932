"""Synthetic EEG generation and the preprocessing chain.

Raw recordings (microvolts) run through: band-pass 0.1-30 Hz (4th-order
zero-phase Butterworth), a powerline notch (Q=30), polyphase resampling to
64 Hz, segmentation into non-overlapping 4 s windows of exactly 256 samples,
amplitude/flatline rejection, and A-law companding onto [-1, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import signal

from .geometry import ElectrodeLayout, LobePartition, default_lobes
from .numerics import RngStream

BANDS: dict[str, tuple[float, float]] = {
    "delta": (0.5, 4.0),
    "theta": (4.0, 8.0),
    "alpha": (8.0, 13.0),
    "beta": (13.0, 30.0),
}

AMPLITUDE_LIMIT_UV = 100.0
FLATLINE_LIMIT_UV = 3.0


@dataclass
class EEGSample:
    """A (T, D) signal grid; microvolts before companding, [-1,1] after."""

    values: np.ndarray
    rate: float
    layout_name: str = "ten_twenty_19"
    label: int | None = None
    provenance: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"values must be (T, D), got shape {self.values.shape}")

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.rate


@dataclass
class SynthSpec:
    """Recipe for band-limited synthetic EEG.

    ``class_signatures`` maps each class to per-band amplitude multipliers;
    classes then differ by band power, which is what the downstream
    classification tasks have to pick up.
    """

    band_amplitude: dict[str, tuple[float, float]] = field(
        default_factory=lambda: {
            "delta": (5.0, 10.0),
            "theta": (4.0, 8.0),
            "alpha": (10.0, 20.0),
            "beta": (3.0, 6.0),
        }
    )
    spike_rate: float = 0.0  # expected spikes per second (per sample, one channel each)
    spike_amplitude: float = 0.0
    lobe_gain: dict[str, float] = field(default_factory=dict)
    class_signatures: list[dict[str, float]] | None = None
    noise_std: float = 2.0
    # when positive, class-boosted bands (signature multiplier > 1) arrive in
    # bursts: their amplitude is modulated by a rectified sinusoid at this
    # rate, so the class signal also lives in the amplitude extremes
    burst_envelope_hz: float = 0.0

    def __post_init__(self):
        for band in self.band_amplitude:
            if band not in BANDS:
                raise ValueError(f"unknown band {band!r}; known: {sorted(BANDS)}")
            lo, hi = self.band_amplitude[band]
            if lo < 0 or hi < lo:
                raise ValueError(f"bad amplitude range for {band}: ({lo}, {hi})")
        if self.spike_rate < 0 or self.spike_amplitude < 0 or self.noise_std < 0:
            raise ValueError("rates, amplitudes and noise must be non-negative")

    @property
    def n_classes(self) -> int:
        return len(self.class_signatures) if self.class_signatures else 0


def synth_dataset(
    spec: SynthSpec,
    n: int,
    rng: RngStream,
    layout: ElectrodeLayout,
    partition: LobePartition | None = None,
    duration: float = 4.0,
    rate: float = 256.0,
) -> list[EEGSample]:
    """Generate ``n`` samples of band-limited sinusoids + spikes + noise.

    Labels cycle through the classes of ``spec.class_signatures`` (None when
    no signatures are given).  Per sample and band one frequency is drawn
    from the band's range; each channel gets its own phase and a gain from
    its lobe.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if partition is None:
        partition = default_lobes(layout)
    D = len(layout)
    T = int(round(duration * rate))
    t = np.arange(T) / rate
    chan_gain = np.array(
        [spec.lobe_gain.get(partition.lobe_names[partition.assignment[d]], 1.0) for d in range(D)]
    )
    samples = []
    for i in range(n):
        label = i % spec.n_classes if spec.n_classes else None
        mult = spec.class_signatures[label] if label is not None else {}
        values = np.zeros((T, D))
        for band, (lo, hi) in spec.band_amplitude.items():
            f_lo, f_hi = BANDS[band]
            band_mult = mult.get(band, 1.0)
            amp = rng.uniform(low=lo, high=hi) * band_mult
            freq = rng.uniform(low=f_lo, high=f_hi)
            phases = np.asarray(rng.uniform(size=D, high=2 * np.pi))
            wave = amp * chan_gain * np.sin(2 * np.pi * freq * t[:, None] + phases)
            if spec.burst_envelope_hz > 0 and band_mult > 1.0:
                env_phase = rng.uniform(high=2 * np.pi)
                envelope = np.abs(np.sin(np.pi * spec.burst_envelope_hz * t + env_phase))
                wave = wave * (np.sqrt(2.0) * envelope)[:, None]
            values += wave
        if spec.spike_rate > 0 and spec.spike_amplitude > 0:
            n_spikes = int(rng.poisson(spec.spike_rate * duration))
            for _ in range(n_spikes):
                centre = rng.uniform(high=duration)
                chan = int(rng.integers(0, D))
                sign = 1.0 if rng.uniform() < 0.5 else -1.0
                bump = spec.spike_amplitude * np.exp(-0.5 * ((t - centre) / 0.02) ** 2)
                values[:, chan] += sign * bump
        if spec.noise_std > 0:
            values += rng.normal(size=(T, D), scale=spec.noise_std)
        samples.append(
            EEGSample(values, rate, layout_name="", label=label, provenance=f"synth[{i}]")
        )
    return samples


@dataclass
class PreprocessConfig:
    band: tuple[float, float] = (0.1, 30.0)
    line_freq: float = 50.0
    notch_q: float = 30.0
    target_rate: float = 64.0
    window_seconds: float = 4.0
    trim_boundary_seconds: float = 0.0  # for real recordings; synthetic data keeps 0


def bandpass_filter(values: np.ndarray, rate: float, band: tuple[float, float]) -> np.ndarray:
    """Zero-phase 4th-order Butterworth band-pass along the time axis."""
    nyq = rate / 2.0
    sos = signal.butter(4, [band[0] / nyq, band[1] / nyq], btype="bandpass", output="sos")
    return signal.sosfiltfilt(sos, values, axis=0)


def notch_filter(values: np.ndarray, rate: float, freq: float, q: float = 30.0) -> np.ndarray:
    """Zero-phase second-order notch at the powerline frequency."""
    b, a = signal.iirnotch(freq, q, fs=rate)
    return signal.filtfilt(b, a, values, axis=0)


def resample_to(values: np.ndarray, rate: float, target: float) -> np.ndarray:
    """Polyphase rational resampling along time; identity when rates match."""
    ratio = Fraction(target / rate).limit_denominator(10000)
    if ratio == 1:
        return values
    return signal.resample_poly(values, ratio.numerator, ratio.denominator, axis=0)


def preprocess(raw: EEGSample, cfg: PreprocessConfig | None = None) -> list[EEGSample]:
    """Filter, resample and window one recording.

    Returns model-ready segments (still in microvolts); recordings shorter
    than one window yield an empty list.
    """
    cfg = cfg or PreprocessConfig()
    if raw.rate < cfg.target_rate:
        raise ValueError(f"recording rate {raw.rate} Hz is below the target {cfg.target_rate} Hz")
    values = raw.values
    if cfg.trim_boundary_seconds > 0:
        cut = int(round(cfg.trim_boundary_seconds * raw.rate))
        values = values[cut : len(values) - cut if cut else None]
    if len(values) < 16:
        return []
    values = bandpass_filter(values, raw.rate, cfg.band)
    if 0 < cfg.line_freq < raw.rate / 2:
        values = notch_filter(values, raw.rate, cfg.line_freq, cfg.notch_q)
    values = resample_to(values, raw.rate, cfg.target_rate)
    window = int(round(cfg.window_seconds * cfg.target_rate))
    n_windows = len(values) // window
    segments = []
    for w in range(n_windows):
        segments.append(
            EEGSample(
                values[w * window : (w + 1) * window],
                cfg.target_rate,
                layout_name=raw.layout_name,
                label=raw.label,
                provenance=f"{raw.provenance}/win{w}",
            )
        )
    return segments


@dataclass
class RejectReport:
    kept: int
    rejected: int
    reasons: dict[str, int]

    def __post_init__(self):
        for key in ("amplitude_exceed", "flatline", "nonfinite"):
            self.reasons.setdefault(key, 0)


def quality_filter(segments: list[EEGSample]) -> tuple[list[EEGSample], RejectReport]:
    """Drop artifact segments; one reason is recorded per rejected segment
    (nonfinite takes precedence over amplitude, amplitude over flatline)."""
    kept = []
    reasons = {"amplitude_exceed": 0, "flatline": 0, "nonfinite": 0}
    for seg in segments:
        v = seg.values
        if not np.isfinite(v).all():
            reasons["nonfinite"] += 1
        elif np.abs(v).max() > AMPLITUDE_LIMIT_UV:
            reasons["amplitude_exceed"] += 1
        elif (np.abs(v) < FLATLINE_LIMIT_UV).all(axis=0).any():
            reasons["flatline"] += 1
        else:
            kept.append(seg)
    return kept, RejectReport(kept=len(kept), rejected=len(segments) - len(kept), reasons=reasons)


DEFAULT_COMPANDING_A = 0.25


def _companding_gain(A: float) -> float:
    if A <= 0:
        raise ValueError("A must be positive")
    c = 1.0 + math.log(A)
    if abs(c) < 1e-9:
        raise ValueError(f"A={A} makes 1+ln(A) vanish; the map is degenerate")
    return c


def compand(x: np.ndarray, A: float = DEFAULT_COMPANDING_A) -> np.ndarray:
    """Textbook A-law compressor on [-1, 1].

    Note for A < 1/e the overall gain A/(1+ln A) is negative, so the map is
    linear and sign-flipping over the whole domain (the log knee |x| = 1/A
    lies outside it); it stays exactly invertible either way.
    """
    c = _companding_gain(A)
    x = np.asarray(x, dtype=np.float64)
    if np.abs(x).max(initial=0.0) > 1.0 + 1e-12:
        raise ValueError("compand input must lie in [-1, 1]")
    ax = A * np.abs(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_branch = np.sign(x) * (1.0 + np.log(np.where(ax > 0, ax, 1.0))) / c
    return np.where(ax <= 1.0, A * x / c, log_branch)


def decompand(y: np.ndarray, A: float = DEFAULT_COMPANDING_A) -> np.ndarray:
    """Exact inverse of :func:`compand`."""
    c = _companding_gain(A)
    y = np.asarray(y, dtype=np.float64)
    t = np.abs(y * c)
    sgn = np.sign(y * c)
    return sgn * np.where(t <= 1.0, t / A, np.exp(np.minimum(t, 700.0) - 1.0) / A)


def normalize_segment(seg: EEGSample, A: float = DEFAULT_COMPANDING_A) -> EEGSample:
    """Scale microvolts by the rejection full-scale (100 uV) and compand."""
    scaled = np.clip(seg.values / AMPLITUDE_LIMIT_UV, -1.0, 1.0)
    return EEGSample(
        compand(scaled, A),
        seg.rate,
        layout_name=seg.layout_name,
        label=seg.label,
        provenance=seg.provenance + "/companded",
    )
