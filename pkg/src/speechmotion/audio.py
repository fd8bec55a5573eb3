"""Audio ingestion and the two per-frame speech feature streams.

Low level: log-compressed mel spectrogram. High level: either loaded from a
precomputed feature file (the stand-in for a frozen pretrained speech
encoder) or synthesized from envelope and beat-phase signals. Both streams
are linearly resampled onto the motion frame grid before conditioning.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile

from .errors import ConfigError, DataError

FEAT_MAGIC = b"SHEGFEAT"
FEAT_VERSION = 1

KIND_MEL = 0
KIND_HIGHLEVEL = 1
KIND_COND = 2
KIND_MOTION = 3

_KIND_NAMES = {KIND_MEL: "mel", KIND_HIGHLEVEL: "highlevel",
               KIND_COND: "cond", KIND_MOTION: "motion"}


@dataclass
class AudioBuffer:
    samples: np.ndarray  # float32 PCM in [-1, 1]
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("audio contains non-finite samples")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class FeatureTrack:
    frames: np.ndarray  # N x F
    fps: float
    kind: int

    def __post_init__(self):
        self.frames = np.atleast_2d(np.asarray(self.frames, dtype=np.float32))

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def width(self) -> int:
        return self.frames.shape[1]


@dataclass
class Spectrogram:
    values: np.ndarray  # frames x bins, complex
    sample_rate: int
    window: int
    hop: int

    @property
    def fps(self) -> float:
        return self.sample_rate / self.hop


def load_wav(path, target_rate: int = 16_000) -> AudioBuffer:
    """Read a PCM16 or float32 WAV, downmix to mono, resample linearly."""
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if data.dtype == np.int16:
        x = data.astype(np.float32) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float32)
    elif data.dtype == np.int32:
        x = data.astype(np.float32) / 2147483648.0
    else:
        raise DataError(f"{path}: unsupported WAV sample format {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    if rate != target_rate:
        n_out = int(round(x.size * target_rate / rate))
        src = np.arange(x.size) / rate
        dst = np.arange(n_out) / target_rate
        x = np.interp(dst, src, x).astype(np.float32)
        rate = target_rate
    return AudioBuffer(samples=x, sample_rate=rate)


def save_wav(path, audio: AudioBuffer):
    wavfile.write(path, audio.sample_rate, audio.samples.astype(np.float32))


def stft(audio: AudioBuffer, window: int, hop: int) -> Spectrogram:
    """Hann-windowed short-time Fourier transform without padding."""
    if not (window >= hop > 0):
        raise ConfigError(f"need window >= hop > 0, got {window}, {hop}")
    if window & (window - 1):
        raise ConfigError(f"window {window} is not a power of two")
    x = audio.samples
    if x.size < window:
        raise DataError(f"audio of {x.size} samples is shorter than one {window}-sample window")
    n_frames = 1 + (x.size - window) // hop
    idx = np.arange(window)[None, :] + hop * np.arange(n_frames)[:, None]
    w = (0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(window) / window)).astype(np.float32)
    frames = x[idx] * w
    return Spectrogram(values=np.fft.rfft(frames, axis=1),
                       sample_rate=audio.sample_rate, window=window, hop=hop)


def mel_filterbank(n_mels: int, n_bins: int, sample_rate: int,
                   fmin: float, fmax: float) -> np.ndarray:
    """Triangular filters over an HTK mel grid, rows (n_mels) by FFT bins."""
    nyquist = sample_rate / 2.0
    if not (0.0 <= fmin < fmax <= nyquist):
        raise ConfigError(f"band edges must satisfy 0 <= fmin < fmax <= {nyquist}")
    if n_mels < 1:
        raise ConfigError("n_mels must be at least 1")

    def to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)

    def from_mel(m):
        return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)

    edges = from_mel(np.linspace(to_mel(fmin), to_mel(fmax), n_mels + 2))
    bin_freqs = np.arange(n_bins) * nyquist / (n_bins - 1)
    fb = np.zeros((n_mels, n_bins), dtype=np.float64)
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (bin_freqs - lo) / max(mid - lo, 1e-12)
        down = (hi - bin_freqs) / max(hi - mid, 1e-12)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb.astype(np.float32)


def mel_spectrogram(spec: Spectrogram, n_mels: int, fmin: float, fmax: float) -> FeatureTrack:
    """Mel filterbank on the power spectrum with log(1 + x) compression."""
    power = np.abs(spec.values).astype(np.float32) ** 2
    fb = mel_filterbank(n_mels, power.shape[1], spec.sample_rate, fmin, fmax)
    return FeatureTrack(frames=np.log1p(power @ fb.T), fps=spec.fps, kind=KIND_MEL)


def align_to_motion_fps(track: FeatureTrack, motion_fps: float, n_frames: int) -> FeatureTrack:
    """Linear time resampling to exactly n_frames rows on the motion grid."""
    if track.n_frames == 0:
        raise DataError("cannot align an empty feature track")
    src = track.frames
    pos = np.arange(n_frames) * (track.fps / motion_fps)
    lo = np.clip(np.floor(pos).astype(np.int64), 0, src.shape[0] - 1)
    hi = np.minimum(lo + 1, src.shape[0] - 1)
    frac = (pos - lo).astype(np.float32)[:, None]
    frames = src[lo] * (1.0 - frac) + src[hi] * frac
    return FeatureTrack(frames=frames, fps=float(motion_fps), kind=track.kind)


# ---------------------------------------------------------------------------
# feature track file format


def write_feature_track(path, track: FeatureTrack):
    with open(path, "wb") as f:
        f.write(feature_track_bytes(track))


def feature_track_bytes(track: FeatureTrack) -> bytes:
    head = FEAT_MAGIC + struct.pack("<IfIIB", FEAT_VERSION, float(track.fps),
                                    track.n_frames, track.width, track.kind)
    return head + np.ascontiguousarray(track.frames, dtype="<f4").tobytes()


def read_feature_track(path) -> FeatureTrack:
    with open(path, "rb") as f:
        return feature_track_from_bytes(f.read(), str(path))


def feature_track_from_bytes(raw: bytes, origin: str = "<bytes>") -> FeatureTrack:
    if raw[:8] != FEAT_MAGIC:
        raise DataError(f"{origin}: not a feature track file")
    version, fps, n, width, kind = struct.unpack_from("<IfIIB", raw, 8)
    if version != FEAT_VERSION:
        raise DataError(f"{origin}: unsupported feature track version {version}")
    if kind not in _KIND_NAMES:
        raise DataError(f"{origin}: unknown feature kind {kind}")
    off = 8 + struct.calcsize("<IfIIB")
    expect = off + 4 * n * width
    if len(raw) != expect:
        raise DataError(f"{origin}: payload size {len(raw) - off} does not match header")
    frames = np.frombuffer(raw, dtype="<f4", count=n * width, offset=off)
    return FeatureTrack(frames=frames.reshape(n, width).astype(np.float32),
                        fps=fps, kind=kind)


def load_highlevel_features(path) -> FeatureTrack:
    """Ingest a precomputed high-level track; applied as-is downstream."""
    track = read_feature_track(path)
    if track.kind != KIND_HIGHLEVEL:
        raise DataError(f"{path}: expected a high-level track, got kind "
                        f"'{_KIND_NAMES[track.kind]}'")
    if not np.all(np.isfinite(track.frames)):
        raise DataError(f"{path}: non-finite values in feature payload")
    return track


# ---------------------------------------------------------------------------
# synthetic high-level features (stand-in for a frozen pretrained encoder)


def amplitude_envelope(audio: AudioBuffer, fps: float, n_frames: int,
                       smooth_s: float) -> np.ndarray:
    """Rectified, box-smoothed amplitude sampled on the motion frame grid."""
    x = np.abs(audio.samples)
    win = max(1, int(round(smooth_s * audio.sample_rate)))
    kernel = np.ones(win, dtype=np.float32) / win
    env = np.convolve(x, kernel, mode="same")
    centers = (np.arange(n_frames) / fps * audio.sample_rate).astype(np.int64)
    centers = np.clip(centers, 0, env.size - 1)
    return env[centers].astype(np.float32)


def beat_phase(beat_times: np.ndarray, fps: float, n_frames: int) -> np.ndarray:
    """Fraction of the current inter-beat interval elapsed, per motion frame."""
    t = np.arange(n_frames) / fps
    beats = np.asarray(beat_times, dtype=np.float64)
    if beats.size == 0:
        return np.zeros(n_frames, dtype=np.float32)
    idx = np.searchsorted(beats, t, side="right") - 1
    prev = np.where(idx >= 0, beats[np.clip(idx, 0, beats.size - 1)], 0.0)
    nxt_i = np.clip(idx + 1, 0, beats.size - 1)
    nxt = beats[nxt_i]
    gap = np.where(nxt > prev, nxt - prev, 1.0)
    phase = np.clip((t - prev) / gap, 0.0, 1.0)
    return phase.astype(np.float32)


def highlevel_standin(audio: AudioBuffer, beat_times, fps: float, n_frames: int,
                      n_channels: int) -> FeatureTrack:
    """Deterministic envelope + beat-phase features of a requested width."""
    env_f = amplitude_envelope(audio, fps, n_frames, 0.02)
    env_m = amplitude_envelope(audio, fps, n_frames, 0.08)
    env_s = amplitude_envelope(audio, fps, n_frames, 0.30)
    denv = np.diff(env_m, prepend=env_m[:1])
    phase = beat_phase(beat_times, fps, n_frames)
    cols = [env_f, env_m, env_s, denv]
    for h in (1, 2, 4):
        cols.append(np.sin(2.0 * np.pi * h * phase))
        cols.append(np.cos(2.0 * np.pi * h * phase))
    base = np.stack(cols, axis=1).astype(np.float32)
    reps = int(np.ceil(n_channels / base.shape[1]))
    tiled = np.concatenate([base / (1.0 + r) for r in range(reps)], axis=1)
    return FeatureTrack(frames=tiled[:, :n_channels], fps=float(fps), kind=KIND_HIGHLEVEL)
