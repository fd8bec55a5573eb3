"""The two-branch noise-prediction network.

A shared transformer encodes mel features into a mid-level speech
representation, which conditions an expression branch and a gesture branch.
Information flows one way between the branches: each repeat of the paired
blocks reads out the expression branch's current clean-signal estimate,
severs its gradient, and injects it into the gesture branch as an extra
per-frame condition. Gesture state never reaches the expression branch.

Global conditions (style id and diffusion step) enter through adaptive
instance normalization after every attention and MLP sublayer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .diffusion import NoiseSchedule
from .errors import ConfigError
from .tensor import Tensor

BRANCH_SHARED = "shared"
BRANCH_EXPR = "expr"
BRANCH_GEST = "gest"


@dataclass(frozen=True)
class DenoiserConfig:
    n_repeat: int = 2
    d_model: int = 64
    n_heads: int = 4
    clip_len: int = 34
    n_joints: int = 8
    c_expr: int = 8
    n_styles: int = 4
    f_mel: int = 64
    f_high: int = 64
    audio_layers: int = 1
    mlp_ratio: int = 4
    fusion: str = "residual"  # or "linear": plain projection baseline

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.clip_len < 2:
            raise ConfigError("clip_len must be at least 2")
        if self.n_repeat < 1:
            raise ConfigError("n_repeat must be at least 1")
        if self.fusion not in ("residual", "linear"):
            raise ConfigError(f"unknown fusion mode '{self.fusion}'")

    @property
    def d_gesture(self) -> int:
        return 3 * self.n_joints

    @property
    def d_motion(self) -> int:
        return self.d_gesture + self.c_expr

    def to_vector(self) -> np.ndarray:
        vals = [self.n_repeat, self.d_model, self.n_heads, self.clip_len,
                self.n_joints, self.c_expr, self.n_styles, self.f_mel,
                self.f_high, self.audio_layers, self.mlp_ratio,
                0 if self.fusion == "residual" else 1]
        return np.asarray(vals, dtype=np.float32)

    @classmethod
    def from_vector(cls, v) -> "DenoiserConfig":
        v = [int(round(float(x))) for x in np.asarray(v).ravel()]
        return cls(n_repeat=v[0], d_model=v[1], n_heads=v[2], clip_len=v[3],
                   n_joints=v[4], c_expr=v[5], n_styles=v[6], f_mel=v[7],
                   f_high=v[8], audio_layers=v[9], mlp_ratio=v[10],
                   fusion="residual" if v[11] == 0 else "linear")


@dataclass(frozen=True)
class GlobalCondition:
    """Per-clip conditioning: speaker style index and diffusion step."""

    style_id: int
    t: int


def sinusoidal_embedding(t, dim: int, dtype=np.float32) -> np.ndarray:
    """Classic log-spaced sin/cos embedding of (batched) step indices."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10_000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if emb.shape[1] < dim:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], dim - emb.shape[1]))], axis=1)
    return emb.astype(dtype)


def linear_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Efficient attention: softmax queries over features, keys over frames.

    Inputs are (B, H, N, d_head); the context (K^T V) is built first, so the
    cost is linear in sequence length. Rows of the implied attention matrix
    still sum to one, which keeps it a drop-in stand-in for softmax attention.
    """
    qn = tz.softmax(q, axis=-1)
    kn = tz.softmax(k, axis=-2)
    ctx = tz.matmul(tz.transpose_last2(kn), v)
    return tz.matmul(qn, ctx)


def softmax_attention_reference(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Brute-force scaled dot-product attention; oracle for tiny inputs."""
    scores = q @ np.swapaxes(k, -1, -2) / math.sqrt(q.shape[-1])
    scores = scores - scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=-1, keepdims=True)
    return w @ v


class MotionDenoiser:
    """All learnable parameters plus the forward passes that use them."""

    def __init__(self, config: DenoiserConfig, rng: np.random.Generator,
                 dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}
        self._build(rng)

    # -- parameter construction -------------------------------------------

    def _add(self, name: str, data: np.ndarray):
        self.params[name] = Tensor(np.asarray(data, dtype=self.dtype), requires_grad=True,
                                   dtype=self.dtype)

    def _linear(self, name: str, d_in: int, d_out: int, rng, scale=None, zero=False):
        if zero:
            w = np.zeros((d_in, d_out))
        else:
            w = rng.standard_normal((d_in, d_out)) * (scale or 1.0 / math.sqrt(d_in))
        self._add(f"{name}.w", w)
        self._add(f"{name}.b", np.zeros(d_out))

    def _norm(self, name: str, dim: int):
        self._add(f"{name}.g", np.ones(dim))
        self._add(f"{name}.b", np.zeros(dim))

    def _adain(self, name: str, d: int, rng):
        self._add(f"{name}.scale.w", rng.standard_normal((d, d)) * 0.02)
        self._add(f"{name}.scale.b", np.ones(d))
        self._add(f"{name}.shift.w", rng.standard_normal((d, d)) * 0.02)
        self._add(f"{name}.shift.b", np.zeros(d))

    def _attention(self, name: str, d: int, rng):
        for part in ("q", "k", "v", "o"):
            self._linear(f"{name}.{part}", d, d, rng)

    def _mlp(self, name: str, d: int, rng):
        hidden = self.config.mlp_ratio * d
        self._linear(f"{name}.fc1", d, hidden, rng)
        self._linear(f"{name}.fc2", hidden, d, rng)

    def _style_block(self, name: str, rng):
        d = self.config.d_model
        self._norm(f"{name}.ln1", d)
        self._attention(f"{name}.attn", d, rng)
        self._adain(f"{name}.ada1", d, rng)
        self._norm(f"{name}.ln2", d)
        self._mlp(f"{name}.mlp", d, rng)
        self._adain(f"{name}.ada2", d, rng)

    def _fusion_block(self, name: str, d_cond: int, rng):
        d = self.config.d_model
        if self.config.fusion == "residual":
            self._norm(f"{name}.ln", d + d_cond)
            self._linear(f"{name}.fc1", d + d_cond, d, rng)
            self._linear(f"{name}.fc2", d, d, rng, zero=True)
        else:
            self._linear(f"{name}.proj", d + d_cond, d, rng)

    def _build(self, rng):
        cfg = self.config
        d = cfg.d_model
        self._add("shared.pos", rng.standard_normal((cfg.clip_len, d)) * 0.02)
        self._add("shared.style_emb", rng.standard_normal((cfg.n_styles, d)) * 0.5)
        self._linear("shared.step.fc1", d, d, rng)
        self._linear("shared.step.fc2", d, d, rng)
        self._linear("shared.mel_proj", cfg.f_mel, d, rng)
        for i in range(cfg.audio_layers):
            name = f"shared.audio{i}"
            self._norm(f"{name}.ln1", d)
            self._attention(f"{name}.attn", d, rng)
            self._norm(f"{name}.ln2", d)
            self._mlp(f"{name}.mlp", d, rng)
        self._linear("shared.mid_proj", d + cfg.f_high, d, rng)

        self._linear("expr.in_proj", cfg.c_expr, d, rng)
        self._linear("gest.in_proj", cfg.d_gesture, d, rng)
        for r in range(cfg.n_repeat):
            self._fusion_block(f"expr.rep{r}.fuse", d, rng)
            self._style_block(f"expr.rep{r}.block", rng)
            self._fusion_block(f"gest.rep{r}.fuse", d + cfg.c_expr, rng)
            self._style_block(f"gest.rep{r}.block", rng)
        self._linear("expr.head", d, cfg.c_expr, rng, scale=0.02)
        self._linear("gest.head", d, cfg.d_gesture, rng, scale=0.02)

    # -- small forward helpers --------------------------------------------

    def _apply_linear(self, name: str, x: Tensor) -> Tensor:
        return tz.add(tz.matmul(x, self.params[f"{name}.w"]), self.params[f"{name}.b"])

    def _apply_norm(self, name: str, x: Tensor) -> Tensor:
        return tz.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"], 1e-5)

    def _apply_adain(self, name: str, x: Tensor, g_vec: Tensor) -> Tensor:
        b = g_vec.shape[0]
        scale = tz.reshape(self._apply_linear(f"{name}.scale", g_vec), (b, 1, -1))
        shift = tz.reshape(self._apply_linear(f"{name}.shift", g_vec), (b, 1, -1))
        return tz.adain(x, scale, shift, 1e-5)

    def _apply_attention(self, name: str, x: Tensor) -> Tensor:
        b, n, d = x.shape
        h = self.config.n_heads
        dk = d // h

        def split(t):
            return tz.swap_axes(tz.reshape(t, (b, n, h, dk)), 1, 2)

        q = split(self._apply_linear(f"{name}.q", x))
        k = split(self._apply_linear(f"{name}.k", x))
        v = split(self._apply_linear(f"{name}.v", x))
        out = tz.reshape(tz.swap_axes(linear_attention(q, k, v), 1, 2), (b, n, d))
        return self._apply_linear(f"{name}.o", out)

    def _apply_mlp(self, name: str, x: Tensor) -> Tensor:
        return self._apply_linear(f"{name}.fc2", tz.silu(self._apply_linear(f"{name}.fc1", x)))

    def _apply_style_block(self, name: str, x: Tensor, g_vec: Tensor) -> Tensor:
        a = self._apply_attention(f"{name}.attn", self._apply_norm(f"{name}.ln1", x))
        x = tz.add(x, self._apply_adain(f"{name}.ada1", a, g_vec))
        m = self._apply_mlp(f"{name}.mlp", self._apply_norm(f"{name}.ln2", x))
        return tz.add(x, self._apply_adain(f"{name}.ada2", m, g_vec))

    def _apply_plain_block(self, name: str, x: Tensor) -> Tensor:
        x = tz.add(x, self._apply_attention(f"{name}.attn", self._apply_norm(f"{name}.ln1", x)))
        return tz.add(x, self._apply_mlp(f"{name}.mlp", self._apply_norm(f"{name}.ln2", x)))

    def fusion_block(self, name: str, motion_feat: Tensor, cond: Tensor) -> Tensor:
        """Concatenate motion features with conditions; predict a residual."""
        if motion_feat.shape[-2] != cond.shape[-2]:
            raise ValueError(f"fusion frame counts differ: {motion_feat.shape[-2]} "
                             f"vs {cond.shape[-2]}")
        h = tz.concat_channels([motion_feat, cond])
        if self.config.fusion == "linear":
            return self._apply_linear(f"{name}.proj", h)
        h = self._apply_norm(f"{name}.ln", h)
        h = tz.silu(self._apply_linear(f"{name}.fc1", h))
        return tz.add(motion_feat, self._apply_linear(f"{name}.fc2", h))

    def _positions(self, n: int) -> Tensor:
        if n > self.config.clip_len:
            raise ValueError(f"{n} frames exceed positional capacity "
                             f"{self.config.clip_len}")
        return tz.slice_frames(self.params["shared.pos"], 0, n)

    def global_vector(self, style_ids, t) -> Tensor:
        """Summed style embedding and projected step embedding, (B, d)."""
        style_ids = np.atleast_1d(np.asarray(style_ids, dtype=np.int64))
        if np.any(style_ids < 0) or np.any(style_ids >= self.config.n_styles):
            raise ValueError(f"style id outside [0, {self.config.n_styles})")
        style = tz.embedding(self.params["shared.style_emb"], style_ids)
        emb = Tensor(sinusoidal_embedding(t, self.config.d_model, self.dtype))
        step = self._apply_linear("shared.step.fc2",
                                  tz.silu(self._apply_linear("shared.step.fc1", emb)))
        return tz.add(style, step)

    # -- public forward passes --------------------------------------------

    def encode_audio(self, mel: Tensor, high: Tensor) -> Tensor:
        """Mel through the shared transformer, concatenated with the
        high-level track, projected to the model width. (B, N, d)."""
        if mel.shape[-2] != high.shape[-2]:
            raise ValueError(f"mel has {mel.shape[-2]} frames but high-level "
                             f"track has {high.shape[-2]}")
        n = mel.shape[-2]
        h = tz.add(self._apply_linear("shared.mel_proj", mel), self._positions(n))
        for i in range(self.config.audio_layers):
            h = self._apply_plain_block(f"shared.audio{i}", h)
        return self._apply_linear("shared.mid_proj", tz.concat_channels([h, high]))

    def denoise(self, x_t: Tensor, cond: Tensor, style_ids, t,
                schedule: NoiseSchedule) -> tuple[Tensor, Tensor]:
        """Predict expression and gesture noise for a batch of noised clips.

        x_t is (B, N, 3J + C_exp) with gesture channels first; cond is the
        encoded speech representation (B, N, d). Returns (eps_expr, eps_gest).
        """
        cfg = self.config
        b, n, dm = x_t.shape
        if dm != cfg.d_motion:
            raise ValueError(f"expected {cfg.d_motion} motion channels, got {dm}")
        t_arr = np.atleast_1d(np.asarray(t, dtype=np.int64))
        if t_arr.size == 1 and b > 1:
            t_arr = np.full(b, t_arr[0])
        if np.any(t_arr < 1) or np.any(t_arr > schedule.T):
            raise ValueError(f"diffusion step outside [1, {schedule.T}]")
        ab = np.array([schedule.abar(int(ti)) for ti in t_arr], dtype=np.float64)
        c_keep = Tensor((1.0 / np.sqrt(ab)).reshape(b, 1, 1).astype(self.dtype))
        c_noise = Tensor((np.sqrt(1.0 - ab) / np.sqrt(ab)).reshape(b, 1, 1).astype(self.dtype))

        style_arr = np.atleast_1d(np.asarray(style_ids, dtype=np.int64))
        if style_arr.size == 1 and b > 1:
            style_arr = np.full(b, style_arr[0])
        x_gest = tz.slice_channels(x_t, 0, cfg.d_gesture)
        x_expr = tz.slice_channels(x_t, cfg.d_gesture, cfg.d_motion)
        pos = self._positions(n)
        g_vec = self.global_vector(style_arr, t_arr)

        e_feat = tz.add(self._apply_linear("expr.in_proj", x_expr), pos)
        g_feat = tz.add(self._apply_linear("gest.in_proj", x_gest), pos)
        eps_e = None
        for r in range(cfg.n_repeat):
            e_feat = self.fusion_block(f"expr.rep{r}.fuse", e_feat, cond)
            e_feat = self._apply_style_block(f"expr.rep{r}.block", e_feat, g_vec)
            eps_e = self._apply_linear("expr.head", e_feat)
            # clean-signal estimate of the expression, gradient severed
            x0_e = tz.detach(tz.sub(tz.mul(x_expr, c_keep), tz.mul(eps_e, c_noise)))
            g_feat = self.fusion_block(f"gest.rep{r}.fuse", g_feat,
                                       tz.concat_channels([cond, x0_e]))
            g_feat = self._apply_style_block(f"gest.rep{r}.block", g_feat, g_vec)
        eps_g = self._apply_linear("gest.head", g_feat)
        return eps_e, eps_g

    # -- numpy conveniences for sampling ----------------------------------

    def encode_audio_np(self, mel: np.ndarray, high: np.ndarray) -> np.ndarray:
        with tz.no_grad():
            out = self.encode_audio(Tensor(mel[None].astype(self.dtype)),
                                    Tensor(high[None].astype(self.dtype)))
        return out.data[0]

    def predict_noise_np(self, x_t: np.ndarray, cond: np.ndarray,
                         g: GlobalCondition, schedule: NoiseSchedule) -> np.ndarray:
        """Single-clip noise prediction, gesture channels first, (N, D)."""
        with tz.no_grad():
            eps_e, eps_g = self.denoise(Tensor(x_t[None].astype(self.dtype)),
                                        Tensor(cond[None].astype(self.dtype)),
                                        np.array([g.style_id]), np.array([g.t]),
                                        schedule)
        return np.concatenate([eps_g.data[0], eps_e.data[0]], axis=-1)

    # -- bookkeeping --------------------------------------------------------

    def branch(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    def grad_of(self, name: str) -> np.ndarray:
        p = self.params[name]
        return p.grad if p.grad is not None else np.zeros_like(p.data)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {"meta.config": self.config.to_vector()}
        out.update({k: v.data for k, v in self.params.items()})
        return out

    def load_state(self, tensors: dict[str, np.ndarray]):
        for k, p in self.params.items():
            if k not in tensors:
                raise ConfigError(f"checkpoint is missing parameter '{k}'")
            if tensors[k].shape != p.data.shape:
                raise ConfigError(f"checkpoint shape mismatch for '{k}'")
            p.data = tensors[k].astype(self.dtype)

    @classmethod
    def from_state(cls, tensors: dict[str, np.ndarray], dtype=np.float32) -> "MotionDenoiser":
        if "meta.config" not in tensors:
            raise ConfigError("checkpoint has no model config record")
        cfg = DenoiserConfig.from_vector(tensors["meta.config"])
        model = cls(cfg, tz.make_rng(0), dtype=dtype)
        model.load_state(tensors)
        return model
