"""Clip-wise outpainted sampling for arbitrary-length, streaming generation.

Each clip after the first keeps its first `overlap` frames pinned to the
tail of the previous clip: at every reverse step the known region is
re-noised to the matching level and composited over the working state, with
optional resampling iterations to harmonize the free region against it. On
the last couple of steps the overlap is linearly cross-faded instead of
hard-replaced, which removes residual seams. The first overlap frame keeps
weight zero, so anchoring to the previous clip is exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import NoiseSchedule, ddim_step, ddpm_step, subsample_schedule
from .errors import ConfigError, DataError, SessionError
from .model import GlobalCondition
from .tensor import make_rng


@dataclass(frozen=True)
class SamplerConfig:
    clip_len: int = 34
    overlap: int = 4
    resample_steps: int = 2
    n_ddim: int = 25
    blend_last_k: int = 2
    seed: int = 0
    transitions: str = "ddim"  # "ddpm" walks every training step (slow baseline)

    def __post_init__(self):
        if not (0 <= self.overlap < self.clip_len):
            raise ConfigError("need 0 <= overlap < clip_len")
        if self.resample_steps < 1 or self.n_ddim < 1:
            raise ConfigError("resample_steps and n_ddim must be at least 1")
        if self.transitions not in ("ddim", "ddpm"):
            raise ConfigError(f"unknown transition kind '{self.transitions}'")


def _inference_steps(config: SamplerConfig, schedule: NoiseSchedule):
    if config.transitions == "ddpm":
        return list(range(schedule.T, 0, -1))
    return list(subsample_schedule(schedule, config.n_ddim).steps)


def sample_clip(known_tail, cond: np.ndarray, style_id: int, config: SamplerConfig,
                model, schedule: NoiseSchedule, rng: np.random.Generator,
                n_frames=None) -> np.ndarray:
    """Sample one clip of len(cond) frames, outpainting over a known prefix.

    `cond` is the fused per-frame conditioning (mel columns then high-level
    columns) in motion-frame time; `known_tail` is the previous clip's tail
    in the model's normalized motion space, or None for a free first clip.
    """
    cond = np.asarray(cond, dtype=np.float32)
    n = cond.shape[0]
    if n_frames is not None and n_frames != n:
        raise DataError(f"conditioning has {n} frames, expected {n_frames}")
    if n > config.clip_len:
        raise ValueError(f"clip of {n} frames exceeds configured length "
                         f"{config.clip_len}")
    if cond.shape[1] != model.config.f_mel + model.config.f_high:
        raise DataError(f"conditioning width {cond.shape[1]} does not match "
                        f"model features {model.config.f_mel}+{model.config.f_high}")

    overlap = 0 if known_tail is None else int(np.asarray(known_tail).shape[0])
    if overlap >= n:
        raise ValueError(f"overlap {overlap} must be shorter than the clip ({n})")

    d = model.config.d_motion
    mid = model.encode_audio_np(cond[:, :model.config.f_mel],
                                cond[:, model.config.f_mel:])
    steps = _inference_steps(config, schedule)
    x = rng.standard_normal((n, d))

    if overlap:
        mask = np.zeros((n, 1))
        mask[:overlap] = 1.0
        w = np.zeros((n, 1))
        w[:overlap, 0] = np.linspace(0.0, 1.0, overlap)
        x0_known = np.zeros((n, d))
        x0_known[:overlap] = np.asarray(known_tail, dtype=np.float64)

    for i, t in enumerate(steps):
        t_prev = steps[i + 1] if i + 1 < len(steps) else 0
        for u in range(1, config.resample_steps + 1):
            if overlap:
                ab_prev = schedule.abar(t_prev)
                if ab_prev < 1.0:
                    x_known = (np.sqrt(ab_prev) * x0_known
                               + np.sqrt(1.0 - ab_prev) * rng.standard_normal((n, d)))
                else:
                    x_known = np.sqrt(ab_prev) * x0_known
            eps_hat = model.predict_noise_np(x.astype(np.float32), mid,
                                             GlobalCondition(style_id, t), schedule)
            if config.transitions == "ddpm":
                x_prev = ddpm_step(x, eps_hat, t, schedule, rng)
            else:
                x_prev = ddim_step(x, eps_hat, t, t_prev, schedule)
            if overlap:
                if len(steps) - i > config.blend_last_k:
                    x_prev = mask * x_known + (1.0 - mask) * x_prev
                else:
                    blend = mask * ((1.0 - w) * x_known + w * x_prev)
                    x_prev = mask * blend + (1.0 - mask) * x_prev
            if u < config.resample_steps and t_prev >= 1:
                beta_prev = schedule.beta_at(t_prev)
                x = (np.sqrt(1.0 - beta_prev) * x_prev
                     + np.sqrt(beta_prev) * rng.standard_normal((n, d)))
            else:
                x = x_prev
    return x


class StreamSession:
    """Incremental sampler state: buffered conditions, tails, RNG, counters.

    Single-threaded by design; clip k+1 depends on clip k's tail. The
    overlap may be changed between clips via set_overlap.
    """

    def __init__(self, model, schedule: NoiseSchedule, config: SamplerConfig,
                 style_id: int, stats=None):
        self.model = model
        self.schedule = schedule
        self.config = config
        self.style_id = style_id
        self.stats = stats
        self.overlap = config.overlap
        self.rng = make_rng(config.seed, stream=7)
        self.motion_tail = np.zeros((0, model.config.d_motion))
        self.cond_tail = np.zeros((0, model.config.f_mel + model.config.f_high),
                                  dtype=np.float32)
        self.pending = np.zeros((0, model.config.f_mel + model.config.f_high),
                                dtype=np.float32)
        self.emitted = 0
        self.closed = False

    @property
    def tail(self) -> np.ndarray:
        """Last `overlap` generated frames (normalized space)."""
        if self.overlap == 0 or self.motion_tail.shape[0] == 0:
            return self.motion_tail[:0]
        return self.motion_tail[-self.overlap:]

    def set_overlap(self, overlap: int):
        if not (0 <= overlap < self.config.clip_len):
            raise ConfigError("need 0 <= overlap < clip_len")
        self.overlap = overlap

    def _emit(self, frames_norm: np.ndarray) -> np.ndarray:
        self.emitted += frames_norm.shape[0]
        if self.stats is not None:
            return self.stats.denormalize(frames_norm)
        return frames_norm.astype(np.float32)

    def _sample_next(self, new_cond: np.ndarray) -> np.ndarray:
        started = self.motion_tail.shape[0] > 0
        overlap = min(self.overlap, self.motion_tail.shape[0]) if started else 0
        if overlap:
            known = self.motion_tail[-overlap:]
            cond = np.concatenate([self.cond_tail[-overlap:], new_cond], axis=0)
        else:
            known = None
            cond = new_cond
        clip = sample_clip(known, cond, self.style_id, self.config, self.model,
                           self.schedule, self.rng)
        keep = min(self.config.clip_len, clip.shape[0])
        self.motion_tail = clip[-keep:]
        self.cond_tail = cond[-keep:]
        return self._emit(clip[overlap:])

    def push(self, cond_chunk: np.ndarray) -> np.ndarray:
        """Buffer conditioning frames; emit whenever a full clip is ready."""
        if self.closed:
            raise SessionError("push on a closed session")
        chunk = np.atleast_2d(np.asarray(cond_chunk, dtype=np.float32))
        width = self.model.config.f_mel + self.model.config.f_high
        if chunk.shape[0] and chunk.shape[1] != width:
            raise DataError(f"conditioning width {chunk.shape[1]}, expected {width}")
        self.pending = np.concatenate([self.pending, chunk], axis=0)
        out = []
        while True:
            started = self.motion_tail.shape[0] > 0
            need = self.config.clip_len - (self.overlap if started else 0)
            if self.pending.shape[0] < need:
                break
            new_cond, self.pending = self.pending[:need], self.pending[need:]
            out.append(self._sample_next(new_cond))
        if not out:
            return np.zeros((0, self.model.config.d_motion), dtype=np.float32)
        return np.concatenate(out, axis=0)

    def close(self) -> np.ndarray:
        """Drain buffered frames as one shorter final clip."""
        if self.closed:
            raise SessionError("session already closed")
        self.closed = True
        if self.pending.shape[0] == 0:
            return np.zeros((0, self.model.config.d_motion), dtype=np.float32)
        new_cond, self.pending = self.pending, self.pending[:0]
        return self._sample_next(new_cond)


def open_session(model, schedule: NoiseSchedule, config: SamplerConfig,
                 style_id: int, stats=None) -> StreamSession:
    return StreamSession(model, schedule, config, style_id, stats=stats)


def push_features(session: StreamSession, cond_chunk) -> np.ndarray:
    return session.push(cond_chunk)


def close_session(session: StreamSession) -> np.ndarray:
    return session.close()


def sample_track(model, schedule: NoiseSchedule, config: SamplerConfig,
                 style_id: int, cond: np.ndarray, stats=None) -> np.ndarray:
    """Sample a full conditioning track in one go via a throwaway session."""
    session = open_session(model, schedule, config, style_id, stats=stats)
    head = session.push(cond)
    tail = session.close()
    return np.concatenate([head, tail], axis=0)
