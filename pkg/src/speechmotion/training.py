"""Loss suite and the training loop.

The objective mixes the noise-prediction error with velocity and Huber
penalties computed on the clean-signal estimate recovered from the
predicted noise. Motion channels are z-scored with corpus statistics that
travel with the checkpoint.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as tz
from .diffusion import NoiseSchedule, q_sample
from .errors import ConfigError, NumericalError
from .model import DenoiserConfig, MotionDenoiser
from .tensor import AdamState, Tensor, adam_step, make_rng, zero_grads


@dataclass(frozen=True)
class LossWeights:
    lambda_t: float = 10.0
    lambda_v: float = 1.0
    lambda_delta: float = 1.0
    huber_delta: float = 1.0

    def __post_init__(self):
        if min(self.lambda_t, self.lambda_v, self.lambda_delta) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.huber_delta <= 0:
            raise ConfigError("huber_delta must be positive")


@dataclass
class ChannelStats:
    """Per-channel mean/std of the training motion, used for z-scoring."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_motion(cls, frames: np.ndarray) -> "ChannelStats":
        mean = frames.mean(axis=0)
        std = np.maximum(frames.std(axis=0), 1e-6)
        return cls(mean=mean.astype(np.float32), std=std.astype(np.float32))

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.mean) / self.std).astype(np.float32)

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return (x * self.std + self.mean).astype(np.float32)


@dataclass
class SequenceData:
    """One corpus sequence with features already on the motion frame grid."""

    motion: np.ndarray  # N x D, gesture channels first
    mel: np.ndarray     # N x F_mel
    high: np.ndarray    # N x F_high
    style_id: int
    name: str = ""


@dataclass
class ClipDataset:
    sequences: list
    clip_len: int

    def windows(self, stride: int):
        out = []
        for si, seq in enumerate(self.sequences):
            for start in range(0, seq.motion.shape[0] - self.clip_len + 1, stride):
                out.append((si, start))
        return out

    def motion_matrix(self) -> np.ndarray:
        return np.concatenate([s.motion for s in self.sequences], axis=0)


@dataclass
class TrainBatch:
    x0: np.ndarray        # B x N x D, normalized
    mel: np.ndarray       # B x N x F_mel
    high: np.ndarray      # B x N x F_high
    style_ids: np.ndarray
    t: np.ndarray
    eps: np.ndarray


# ---------------------------------------------------------------------------
# losses


def loss_noise(eps: Tensor, eps_hat: Tensor) -> Tensor:
    return tz.mse(eps_hat, eps)


def _frame_velocity(x: Tensor) -> Tensor:
    n = x.shape[-2]
    return tz.sub(tz.slice_frames(x, 1, n), tz.slice_frames(x, 0, n - 1))


def loss_velocity(x0: Tensor, x0_hat: Tensor) -> Tensor:
    if x0.shape[-2] < 2:
        raise ValueError("velocity loss needs at least two frames")
    return tz.mse(_frame_velocity(x0_hat), _frame_velocity(x0))


def loss_huber(x0: Tensor, x0_hat: Tensor, delta: float) -> Tensor:
    return tz.huber(x0, x0_hat, delta)


def total_loss(batch: TrainBatch, model: MotionDenoiser, schedule: NoiseSchedule,
               weights: LossWeights):
    """Weighted sum of the three loss terms over the concatenated channels.

    Returns (loss tensor, per-term float report).
    """
    b = batch.x0.shape[0]
    x_t = np.stack([q_sample(batch.x0[i], int(batch.t[i]), batch.eps[i], schedule)
                    for i in range(b)]).astype(model.dtype)
    x_t_t = Tensor(x_t)
    cond = model.encode_audio(Tensor(batch.mel.astype(model.dtype)),
                              Tensor(batch.high.astype(model.dtype)))
    eps_e, eps_g = model.denoise(x_t_t, cond, batch.style_ids, batch.t, schedule)
    eps_hat = tz.concat_channels([eps_g, eps_e])

    ab = np.array([schedule.abar(int(ti)) for ti in batch.t], dtype=np.float64)
    c_keep = Tensor((1.0 / np.sqrt(ab)).reshape(b, 1, 1).astype(model.dtype))
    c_noise = Tensor((np.sqrt(1.0 - ab) / np.sqrt(ab)).reshape(b, 1, 1).astype(model.dtype))
    x0_hat = tz.sub(tz.mul(x_t_t, c_keep), tz.mul(eps_hat, c_noise))
    x0_true = Tensor(batch.x0.astype(model.dtype))

    l_t = loss_noise(Tensor(batch.eps.astype(model.dtype)), eps_hat)
    l_v = loss_velocity(x0_true, x0_hat)
    l_d = loss_huber(x0_true, x0_hat, weights.huber_delta)
    total = tz.add(tz.add(l_t * weights.lambda_t, l_v * weights.lambda_v),
                   l_d * weights.lambda_delta)

    report = {"total": float(total.data), "noise": float(l_t.data),
              "velocity": float(l_v.data), "huber": float(l_d.data)}
    for term, value in report.items():
        if not np.isfinite(value):
            raise NumericalError(f"loss term '{term}' is not finite")
    return total, report


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-4
    window_stride: int = 8
    divergence_limit: float = 1e4
    log_every: int = 0  # 0: one line per epoch


@dataclass
class TrainResult:
    model: MotionDenoiser
    stats: ChannelStats
    curve: list = field(default_factory=list)          # (step, total, t, v, huber)
    epoch_loss: list = field(default_factory=list)     # mean total per epoch


def assemble_batch(dataset: ClipDataset, windows, idx, stats: ChannelStats,
                   schedule: NoiseSchedule, rng) -> TrainBatch:
    xs, mels, highs, styles = [], [], [], []
    L = dataset.clip_len
    for wi in idx:
        si, start = windows[wi]
        seq = dataset.sequences[si]
        xs.append(stats.normalize(seq.motion[start:start + L]))
        mels.append(seq.mel[start:start + L])
        highs.append(seq.high[start:start + L])
        styles.append(seq.style_id)
    x0 = np.stack(xs)
    t = rng.integers(1, schedule.T + 1, size=len(idx))
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    return TrainBatch(x0=x0, mel=np.stack(mels), high=np.stack(highs),
                      style_ids=np.asarray(styles), t=t, eps=eps)


def train(dataset: ClipDataset, model: MotionDenoiser, schedule: NoiseSchedule,
          weights: LossWeights, settings: TrainSettings, seed: int,
          curve_path=None, verbose: bool = False) -> TrainResult:
    """Deterministic training of `model` in place; returns curve and stats."""
    stats = ChannelStats.from_motion(dataset.motion_matrix())
    windows = dataset.windows(settings.window_stride)
    if not windows:
        raise ConfigError("dataset has no full-length training windows")
    rng = make_rng(seed, stream=1)
    opt = AdamState(model.params)
    result = TrainResult(model=model, stats=stats)
    step = 0
    for epoch in range(settings.epochs):
        perm = rng.permutation(len(windows))
        n_batches = max(1, len(windows) // settings.batch_size)
        epoch_total = 0.0
        for bi in range(n_batches):
            idx = perm[bi * settings.batch_size:(bi + 1) * settings.batch_size]
            if idx.size == 0:
                continue
            batch = assemble_batch(dataset, windows, idx, stats, schedule, rng)
            loss, report = total_loss(batch, model, schedule, weights)
            if report["total"] > settings.divergence_limit:
                raise NumericalError(
                    f"training diverged at step {step}: total loss {report['total']:.3e} "
                    f"(noise {report['noise']:.3e}, velocity {report['velocity']:.3e}, "
                    f"huber {report['huber']:.3e})")
            zero_grads(model.params)
            tz.backward(loss)
            adam_step(model.params, {k: p.grad for k, p in model.params.items()},
                      opt, settings.lr)
            result.curve.append((step, report["total"], report["noise"],
                                 report["velocity"], report["huber"]))
            epoch_total += report["total"]
            step += 1
            if verbose and settings.log_every and step % settings.log_every == 0:
                print(f"step {step}: loss {report['total']:.4f}")
        result.epoch_loss.append(epoch_total / n_batches)
        if verbose and not settings.log_every:
            print(f"epoch {epoch + 1}/{settings.epochs}: "
                  f"mean loss {result.epoch_loss[-1]:.4f}")
    if curve_path is not None:
        write_loss_curve(curve_path, result.curve)
    return result


def write_loss_curve(path, curve):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss_total", "loss_t", "loss_v", "loss_huber"])
        w.writerows(curve)


def checkpoint_tensors(result: TrainResult) -> dict:
    out = result.model.state_tensors()
    out["norm.mean"] = result.stats.mean
    out["norm.std"] = result.stats.std
    return out


def stats_from_checkpoint(tensors: dict) -> ChannelStats:
    if "norm.mean" not in tensors or "norm.std" not in tensors:
        raise ConfigError("checkpoint is missing normalization statistics")
    return ChannelStats(mean=tensors["norm.mean"], std=tensors["norm.std"])


def convergence_comparison(dataset: ClipDataset, config: DenoiserConfig,
                           schedule: NoiseSchedule, weights: LossWeights,
                           settings: TrainSettings, seed: int):
    """Paired runs: residual fusion vs a plain linear projection, same seeds.

    Returns (epoch losses with residual blocks, epoch losses with plain
    projection) so callers can compare convergence speed.
    """
    runs = {}
    for mode in ("residual", "linear"):
        model = MotionDenoiser(replace(config, fusion=mode), make_rng(seed))
        runs[mode] = train(dataset, model, schedule, weights, settings, seed).epoch_loss
    return runs["residual"], runs["linear"]


def epochs_to_reach(epoch_loss, target: float):
    """First 1-based epoch whose mean loss is at or below target, else None."""
    for i, v in enumerate(epoch_loss):
        if v <= target:
            return i + 1
    return None
