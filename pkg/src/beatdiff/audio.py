"""Waveform IO and the DSP stack used for music conditioning and beat tracking.

Spectrogram: centered STFT (reflect padded, Hann window) with a mel filterbank
on the power spectrum, in log scale.  The frame count is 1 + floor(n / hop), so
4 s at 16 kHz with hop 256 yields 251 frames.

Beat tracking is the classic dynamic-programming formulation: a spectral-flux
onset envelope, a global tempo estimate from its autocorrelation, then a DP
pass that rewards onset strength and penalizes the squared log-deviation of
inter-beat intervals from the tempo period.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass

import numpy as np

SAMPLE_RATE = 16000
LOG_FLOOR = 1e-10


@dataclass
class Waveform:
    """Mono float waveform in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def save_wav(path, w: Waveform) -> None:
    """Write 16-bit PCM mono little-endian."""
    pcm = np.clip(np.round(w.samples.astype(np.float64) * 32767.0), -32768, 32767)
    pcm = pcm.astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())


def load_wav(path) -> Waveform:
    """Read a 16-bit PCM mono WAV file; anything else is rejected."""
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono, got {f.getnchannels()} channels")
        if f.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, got {8 * f.getsampwidth()}-bit")
        rate = f.getframerate()
        raw = f.readframes(f.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float32) / 32767.0, rate)


def stft_power(samples: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """Power spectrogram of a centered STFT, shape (1 + n_fft//2, frames)."""
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    if len(x) < 1:
        raise ValueError("empty signal")
    pad = n_fft // 2
    if len(x) > 1:
        x = np.pad(x, pad, mode="reflect")
    else:
        x = np.pad(x, pad, mode="constant")
    n_frames = 1 + (len(x) - n_fft) // hop
    window = np.hanning(n_fft)
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * window[None, :]
    spec = np.fft.rfft(frames, axis=1)
    return (np.abs(spec) ** 2).T


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular mel filters (HTK scale), shape (n_mels, 1 + n_fft//2)."""

    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)

    fmax = sample_rate / 2.0
    mel_points = np.linspace(hz_to_mel(0.0), hz_to_mel(fmax), n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    bin_freqs = np.linspace(0.0, fmax, 1 + n_fft // 2)
    fb = np.zeros((n_mels, len(bin_freqs)))
    for m in range(n_mels):
        lo, mid, hi = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        rising = (bin_freqs - lo) / max(mid - lo, 1e-12)
        falling = (hi - bin_freqs) / max(hi - mid, 1e-12)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


def log_mel(w: Waveform, n_mels: int = 64, n_fft: int = 1024, hop: int = 256) -> np.ndarray:
    """Log-mel spectrogram, shape (n_mels, frames)."""
    power = stft_power(w.samples, n_fft, hop)
    fb = mel_filterbank(n_mels, n_fft, w.sample_rate)
    return np.log(fb @ power + LOG_FLOOR)


def onset_envelope(mel_db: np.ndarray) -> np.ndarray:
    """Positive spectral flux summed over mel bands, one value per frame.

    The frame before the signal is taken to be the log floor, so energy in the
    very first frame registers as an onset.
    """
    floor_col = np.full((mel_db.shape[0], 1), np.log(LOG_FLOOR))
    padded = np.concatenate([floor_col, mel_db], axis=1)
    flux = np.diff(padded, axis=1)
    return np.maximum(flux, 0.0).sum(axis=0)


def refine_to_energy_peaks(energy: np.ndarray, beats: np.ndarray,
                           radius: int) -> np.ndarray:
    """Snap beat indices to the strongest energy frame within +-radius.

    Positive log-domain flux marks the frame where a transient first enters
    the analysis window, up to n_fft / (2 * hop) frames before the window is
    centered on it; the energy maximum sits at the centered frame.
    """
    e = np.asarray(energy, dtype=np.float64)
    out = np.empty(len(beats), dtype=np.int64)
    for k, b in enumerate(np.asarray(beats, dtype=np.int64)):
        lo = max(0, b - radius)
        hi = min(len(e), b + radius + 1)
        out[k] = lo + int(np.argmax(e[lo:hi]))
    return out


def estimate_tempo(envelope: np.ndarray, frame_rate: float,
                   min_bpm: float = 60.0, max_bpm: float = 180.0) -> float:
    """Tempo from the autocorrelation peak of the onset envelope.

    Returns min_bpm for a degenerate (flat) envelope; the DP tracker bails out
    separately on silence.
    """
    env = np.asarray(envelope, dtype=np.float64)
    lag_lo = max(1, int(np.ceil(60.0 * frame_rate / max_bpm)))
    lag_hi = int(np.floor(60.0 * frame_rate / min_bpm))
    lag_hi = min(lag_hi, len(env) - 1)
    if lag_hi < lag_lo:
        return float(min_bpm)
    corr = np.correlate(env, env, mode="full")[len(env) - 1:]
    window = corr[lag_lo:lag_hi + 1]
    if window.max() <= 0.0:
        return float(min_bpm)
    lag = lag_lo + int(np.argmax(window))
    return 60.0 * frame_rate / lag


def track_beats(envelope: np.ndarray, frame_rate: float, bpm: float,
                tightness: float = 100.0) -> np.ndarray:
    """Dynamic-programming beat tracker; returns beat positions in frames.

    Each candidate frame chains to a predecessor roughly one tempo period
    back, paying tightness * log(interval / period)^2 for deviating.  The best
    chain ending at a strong local maximum is traced back to give the beats.
    """
    if frame_rate <= 0.0 or bpm <= 0.0:
        raise ValueError(f"frame_rate and bpm must be positive, got {frame_rate}, {bpm}")
    env = np.asarray(envelope, dtype=np.float64)
    n = len(env)
    if n == 0 or env.max() <= 0.0:
        return np.zeros(0, dtype=np.int64)
    period = 60.0 * frame_rate / bpm
    std = env.std()
    norm = env / std if std > 0 else env
    # Smooth the local score over roughly a thirty-second of a period.
    width = period / 32.0
    half = max(1, int(round(period)))
    taps = np.exp(-0.5 * (np.arange(-half, half + 1) / max(width, 1e-6)) ** 2)
    localscore = np.convolve(norm, taps, mode="same")

    lo = max(1, int(round(period / 2.0)))
    hi = max(lo + 1, int(round(period * 2.0)))
    offsets = np.arange(lo, hi + 1)
    txcost = -tightness * np.log(offsets / period) ** 2

    cumscore = np.zeros(n)
    backlink = np.full(n, -1, dtype=np.int64)
    score_thresh = 0.01 * localscore.max()
    started = False
    for i in range(n):
        best_val = 0.0
        best_prev = -1
        valid = offsets <= i
        if started and valid.any():
            prev = i - offsets[valid]
            vals = cumscore[prev] + txcost[valid]
            k = int(np.argmax(vals))
            best_val = float(vals[k])
            best_prev = int(prev[k])
        cumscore[i] = localscore[i] + max(best_val, 0.0)
        if best_val > 0.0:
            backlink[i] = best_prev
        if not started and localscore[i] >= score_thresh:
            started = True

    # Choose the final beat among strong local maxima of the cumulative score.
    interior = np.zeros(n, dtype=bool)
    if n >= 3:
        interior[1:-1] = (cumscore[1:-1] >= cumscore[:-2]) & (cumscore[1:-1] >= cumscore[2:])
    interior[0] = n == 1 or cumscore[0] >= cumscore[1]
    interior[-1] = cumscore[-1] >= cumscore[-2] if n >= 2 else True
    maxima = np.flatnonzero(interior & (localscore >= score_thresh))
    if len(maxima) == 0:
        return np.zeros(0, dtype=np.int64)
    threshold = 0.5 * np.median(cumscore[maxima])
    strong = maxima[cumscore[maxima] >= threshold]
    tail = int(strong[-1]) if len(strong) else int(maxima[-1])

    beats = [tail]
    while backlink[beats[-1]] >= 0:
        beats.append(int(backlink[beats[-1]]))
    return np.array(beats[::-1], dtype=np.int64)
