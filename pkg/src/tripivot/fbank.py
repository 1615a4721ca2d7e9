"""Log mel filterbank frontend for audio clips.

Waveforms come in as float arrays in [-1, 1]; the frontend windows them
(Hanning, 25 ms window / 10 ms shift by default), takes the power
spectrum, applies an HTK-mel triangular filterbank and a floored log.
Corpus-level scalar statistics normalize every spectrogram the encoders
see; SpecAugment-style contiguous masking runs after normalization.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation

# Floor applied to mel energies before the log.  Signals are full-scale
# in [-1, 1], so this is 1e-10 relative to full scale; an all-zero clip
# maps to the constant log(1e-10) instead of -inf.
ENERGY_FLOOR = 1e-10

DEFAULT_SHIFT_MS = 10.0
DEFAULT_WINDOW_MS = 25.0


@dataclass
class WaveformClip:
    """A single audio clip; only channel 0 is consumed downstream."""

    samples: np.ndarray        # (n,) mono or (n, channels)
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.sample_rate <= 0:
            raise ContractViolation("sample_rate must be positive")
        if self.samples.ndim not in (1, 2) or self.samples.shape[0] == 0:
            raise ContractViolation("waveform must be a non-empty 1-D or 2-D array")

    @property
    def channel_count(self) -> int:
        return 1 if self.samples.ndim == 1 else self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.samples.shape[0] / self.sample_rate

    def mono(self) -> np.ndarray:
        if self.samples.ndim == 1:
            return self.samples
        return self.samples[:, 0]


@dataclass
class FbankSpectrogram:
    """Log mel energies, shape (frames, mel_bins), plus framing metadata."""

    values: np.ndarray
    sample_rate: int
    shift_ms: float
    window_ms: float

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    @property
    def num_bins(self) -> int:
        return self.values.shape[1]


@dataclass
class CorpusStats:
    """Scalar mean/std of log mel energies over a declared training corpus."""

    mean: float
    std: float

    def __post_init__(self):
        if not np.isfinite(self.mean) or not np.isfinite(self.std):
            raise ContractViolation("degenerate corpus statistics: non-finite")
        if self.std <= 0:
            raise ContractViolation("degenerate corpus statistics: std <= 0")


def num_frames(num_samples: int, window: int, shift: int) -> int:
    """Frame count for snip-edges framing: floor((N - window)/shift) + 1."""
    if num_samples < window:
        return 0
    return (num_samples - window) // shift + 1


def hz_to_mel(f):
    """HTK mel scale."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(num_bins: int, fft_size: int, sample_rate: int) -> np.ndarray:
    """Triangular HTK-mel filters, (num_bins, fft_size//2 + 1), peak 1."""
    nyquist = sample_rate / 2.0
    points = mel_to_hz(np.linspace(0.0, hz_to_mel(nyquist), num_bins + 2))
    freqs = np.arange(fft_size // 2 + 1) * (sample_rate / fft_size)
    bank = np.zeros((num_bins, freqs.size), dtype=np.float64)
    for j in range(num_bins):
        lo, mid, hi = points[j], points[j + 1], points[j + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        bank[j] = np.maximum(0.0, np.minimum(up, down))
    return bank


def compute_fbank(clip: WaveformClip, num_bins: int,
                  shift_ms: float = DEFAULT_SHIFT_MS,
                  window_ms: float = DEFAULT_WINDOW_MS) -> FbankSpectrogram:
    """Log mel filterbank of channel 0 of `clip`.

    The whole-clip mean is subtracted from the raw signal first (DC
    removal), then Hanning-windowed frames with no padding are run
    through an HTK-mel filterbank; energies are floored at ENERGY_FLOOR
    before the log, so output is always finite.
    """
    if num_bins < 1:
        raise ContractViolation("num_bins must be >= 1")
    sr = clip.sample_rate
    window = int(round(sr * window_ms / 1000.0))
    shift = int(round(sr * shift_ms / 1000.0))
    if window < 2 or shift < 1:
        raise ContractViolation("window/shift too small for this sample rate")
    x = clip.mono().astype(np.float64)
    t = num_frames(x.size, window, shift)
    if t < 1:
        raise ContractViolation(
            f"clip too short: {x.size} samples < one {window}-sample window")
    x = x - x.mean()
    idx = np.arange(window)[None, :] + shift * np.arange(t)[:, None]
    frames = x[idx] * np.hanning(window)[None, :]
    fft_size = 1
    while fft_size < window:
        fft_size *= 2
    power = np.abs(np.fft.rfft(frames, n=fft_size, axis=1)) ** 2
    bank = mel_filterbank(num_bins, fft_size, sr)
    energies = power @ bank.T
    values = np.log(np.maximum(energies, ENERGY_FLOOR)).astype(np.float32)
    return FbankSpectrogram(values, sr, shift_ms, window_ms)


def corpus_stats(spectrograms) -> CorpusStats:
    """Scalar mean/std over every cell of every spectrogram in the corpus."""
    flat = [np.asarray(s.values if isinstance(s, FbankSpectrogram) else s,
                       dtype=np.float64).ravel()
            for s in spectrograms]
    if not flat:
        raise ContractViolation("degenerate corpus statistics: empty corpus")
    data = np.concatenate(flat)
    mean = float(data.mean())
    std = float(data.std())
    if std == 0.0:
        raise ContractViolation("degenerate corpus statistics: zero variance")
    return CorpusStats(mean, std)


def normalize(spec: np.ndarray, stats: CorpusStats) -> np.ndarray:
    """(x - mean) / std with corpus-level scalars."""
    values = spec.values if isinstance(spec, FbankSpectrogram) else spec
    return ((np.asarray(values, dtype=np.float32) - stats.mean)
            / stats.std).astype(np.float32)


def denormalize(spec: np.ndarray, stats: CorpusStats) -> np.ndarray:
    values = spec.values if isinstance(spec, FbankSpectrogram) else spec
    return (np.asarray(values, dtype=np.float32) * stats.std
            + stats.mean).astype(np.float32)


def mask_augment(spec: np.ndarray, time_fraction: float, freq_fraction: float,
                 rng: np.random.Generator) -> np.ndarray:
    """Zero one contiguous time block and one contiguous frequency block.

    Block sizes are floor(T * time_fraction) frames and
    floor(F * freq_fraction) bins; start positions are uniform over the
    valid range.  Fraction 0 disables the corresponding mask.  Returns a
    new array; the input is untouched.
    """
    if not (0.0 <= time_fraction < 1.0 and 0.0 <= freq_fraction < 1.0):
        raise ContractViolation("mask fractions must lie in [0, 1)")
    values = spec.values if isinstance(spec, FbankSpectrogram) else spec
    out = np.array(values, dtype=np.float32, copy=True)
    t, f = out.shape
    t_block = int(t * time_fraction)
    f_block = int(f * freq_fraction)
    if t_block > 0:
        start = int(rng.integers(0, t - t_block + 1))
        out[start:start + t_block, :] = 0.0
    if f_block > 0:
        start = int(rng.integers(0, f - f_block + 1))
        out[:, start:start + f_block] = 0.0
    return out
