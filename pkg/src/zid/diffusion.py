"""Training-only diffusion prior head and its supporting machinery.

The forward perturbation R_t = sqrt(a_t) R + sqrt(1 - a_t) eps operates on
the degradation residual R = I_h - I_c.  Per-sample timestep caps scale
with relative haze severity inside the batch, so lightly hazed samples see
small perturbations and dense ones a broad noise range.  The conditional
U-Net predicts the injected noise from R_t, the timestep embedding, and the
shared backbone bottleneck — gradients flow back into the backbone, which
is the entire point.  Nothing in this module is reachable at inference.

Alternative auxiliary heads (atmospheric light / transmission / direct
residual regression) share the bottleneck-supervision interface for the
ablation harness.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .backbone import Conv2d, ConvBlock, InstanceNorm2d, LEAKY_SLOPE
from .tensor import (
    Module, ShapeError, Tensor, abs_, bilinear_upsample, concat, gelu,
    global_avg_pool, instance_norm, leaky_relu, op_scope, relu, sigmoid,
)

__all__ = [
    "DiffusionSchedule", "SeverityConfig", "NoisyResidual", "ZiPphConfig",
    "build_schedule", "severity_scores", "severity_caps", "sample_timesteps",
    "forward_diffuse", "sinusoidal_embed", "NoisePredictor",
    "AUX_KINDS", "build_aux_head",
]

AUX_KINDS = ("A", "t", "A_plus_t", "residual")


@dataclasses.dataclass
class DiffusionSchedule:
    """Variance schedule beta_t and cumulative products alpha_bar_t, t in [1, T]."""

    T: int
    beta: np.ndarray       # index 0 holds t = 1
    alpha_bar: np.ndarray

    def alpha_bar_at(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [1, {self.T}]")
        return self.alpha_bar[t - 1]


@dataclasses.dataclass
class SeverityConfig:
    t_low: int = 200
    gamma: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.t_low < 1:
            raise ValueError("t_low must be >= 1")


@dataclasses.dataclass
class NoisyResidual:
    """One perturbation event: R_t = sqrt(a_t) R + sqrt(1 - a_t) eps."""

    r: np.ndarray
    t: np.ndarray
    eps: np.ndarray
    r_t: np.ndarray


def build_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    """Linear beta schedule with running-product alpha_bar."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if T == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        beta = beta_start + np.arange(T, dtype=np.float64) / (T - 1) * (beta_end - beta_start)
    alpha_bar = np.cumprod(1.0 - beta)
    return DiffusionSchedule(T=T, beta=beta, alpha_bar=alpha_bar)


def severity_scores(hazy: np.ndarray, clean: np.ndarray) -> np.ndarray:
    """Per-sample mean |I_h - I_c|, min-max normalized within the batch.

    A batch with uniform severity degenerates to all-zero scores (the
    conservative choice: smallest caps).
    """
    if hazy.shape != clean.shape:
        raise ShapeError(f"batch shapes differ: {hazy.shape} vs {clean.shape}")
    flat = np.abs(hazy - clean).reshape(hazy.shape[0], -1)
    s = flat.mean(axis=1)
    return (s - s.min()) / (s.max() - s.min() + 1e-12)


def severity_caps(s_norm: np.ndarray, cfg: SeverityConfig, T: int) -> np.ndarray:
    """T_i_cap = round(T_low + gamma * s_norm_i * (T - T_low)), round half up."""
    if cfg.t_low > T:
        raise ValueError(f"t_low {cfg.t_low} exceeds T {T}")
    raw = cfg.t_low + cfg.gamma * np.asarray(s_norm) * (T - cfg.t_low)
    caps = np.floor(raw + 0.5).astype(np.int64)
    return np.clip(caps, cfg.t_low, T)


def sample_timesteps(caps: np.ndarray, rng) -> np.ndarray:
    """Uniform integer draw from {1, ..., cap} per sample."""
    caps = np.asarray(caps, dtype=np.int64)
    if np.any(caps < 1):
        raise ValueError("caps must be >= 1")
    u = rng.uniform(0.0, 1.0, caps.shape)
    return 1 + np.floor(u * caps).astype(np.int64).clip(0, caps - 1)


def forward_diffuse(r: np.ndarray, t: np.ndarray, eps: np.ndarray,
                    schedule: DiffusionSchedule) -> np.ndarray:
    """Exact forward perturbation with per-sample alpha_bar[t]."""
    ab = schedule.alpha_bar_at(t).reshape((-1,) + (1,) * (r.ndim - 1))
    return np.sqrt(ab) * r + np.sqrt(1.0 - ab) * eps


def sinusoidal_embed(t: np.ndarray, dim: int) -> np.ndarray:
    """Interleaved (sin, cos) pairs at frequencies 10000^(-2k/dim)."""
    if dim % 2 != 0:
        raise ValueError(f"embedding dim must be even, got {dim}")
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    k = np.arange(dim // 2, dtype=np.float64)
    omega = 10000.0 ** (-2.0 * k / dim)
    out = np.empty((t.shape[0], dim), dtype=np.float64)
    out[:, 0::2] = np.sin(t * omega)
    out[:, 1::2] = np.cos(t * omega)
    return out


# ---------------------------------------------------------------------------
# Conditional U-Net noise predictor
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class ZiPphConfig:
    cond_channels: int = 8
    embed_dim: int = 128
    base_width: int = 16

    def __post_init__(self):
        if self.embed_dim % 2 != 0:
            raise ValueError("embed_dim must be even")


class NoisePredictor(Module):
    """Two-scale conditional U-Net predicting the injected perturbation.

    The bottleneck is injected twice: upsampled x16, 1x1-projected and
    concatenated with R_t at the input, and upsampled x8, 1x1-projected and
    added to the half-resolution encoder feature.  The timestep embedding
    passes through a 2-layer MLP and is added per stage after a per-stage
    linear map.
    """

    def __init__(self, bottleneck_channels: int, cfg: ZiPphConfig | None = None):
        super().__init__()
        self.cfg = cfg or ZiPphConfig()
        cb = bottleneck_channels
        w0 = self.cfg.base_width
        w1, w2 = 2 * w0, 4 * w0
        ed = self.cfg.embed_dim
        self.widths = (w0, w1, w2)

        self.cond_in = Conv2d(cb, self.cfg.cond_channels, 1)
        self.cond_mid = Conv2d(cb, w1, 1)
        self.stem = ConvBlock(3 + self.cfg.cond_channels, w0)
        self.enc1 = ConvBlock(w0, w1, stride=2)
        self.enc2 = ConvBlock(w1, w2, stride=2)
        self.mlp1 = Conv2d(ed, ed, 1)
        self.mlp2 = Conv2d(ed, ed, 1)
        self.t_stem = Conv2d(ed, w0, 1)
        self.t_enc1 = Conv2d(ed, w1, 1)
        self.t_enc2 = Conv2d(ed, w2, 1)
        self.t_dec1 = Conv2d(ed, w1, 1)
        self.t_dec0 = Conv2d(ed, w0, 1)
        self.dec1_up = ConvBlock(w2, w1)
        self.dec1_merge = ConvBlock(2 * w1, w1)
        self.dec0_up = ConvBlock(w1, w0)
        self.dec0_merge = ConvBlock(2 * w0, w0)
        self.out_head = Conv2d(w0, 3, 3, padding=1)

    def time_embedding(self, t: np.ndarray) -> Tensor:
        emb = sinusoidal_embed(t, self.cfg.embed_dim)
        v = Tensor(emb.reshape(emb.shape[0], self.cfg.embed_dim, 1, 1))
        return self.mlp2(gelu(self.mlp1(v)))

    def __call__(self, r_t: Tensor, t: np.ndarray, f_hat: Tensor) -> Tensor:
        b, ch, h, w = r_t.shape
        if ch != 3:
            raise ShapeError(f"noisy residual must have 3 channels, got {ch}")
        fb_h, fb_w = f_hat.shape[2], f_hat.shape[3]
        if (fb_h * 16, fb_w * 16) != (h, w):
            raise ShapeError(
                f"condition {fb_h}x{fb_w} does not align with input {h}x{w} (need x16)")
        with op_scope("zipph"):
            temb = self.time_embedding(np.asarray(t))
            # 1x1 projection and bilinear upsampling commute exactly; project
            # first so the interpolation runs on the narrow tensor
            cond0 = bilinear_upsample(self.cond_in(f_hat), 16)
            e0 = self.stem(concat([r_t, cond0], axis=1)) + self.t_stem(temb)
            e1 = self.enc1(e0) + bilinear_upsample(self.cond_mid(f_hat), 8) \
                + self.t_enc1(temb)
            e2 = self.enc2(e1) + self.t_enc2(temb)
            d1 = self.dec1_merge(concat([self.dec1_up(bilinear_upsample(e2, 2)), e1], 1)) \
                + self.t_dec1(temb)
            d0 = self.dec0_merge(concat([self.dec0_up(bilinear_upsample(d1, 2)), e0], 1)) \
                + self.t_dec0(temb)
            return self.out_head(d0)


# ---------------------------------------------------------------------------
# Alternative auxiliary supervision heads
# ---------------------------------------------------------------------------

class LightHead(Module):
    """Global atmospheric light as a 3-vector: GAP, two linears, sigmoid."""

    def __init__(self, cb: int):
        super().__init__()
        hidden = max(cb // 4, 4)
        self.fc1 = Conv2d(cb, hidden, 1)
        self.fc2 = Conv2d(hidden, 3, 1)

    def __call__(self, f_hat: Tensor) -> Tensor:
        with op_scope("aux"):
            v = sigmoid(self.fc2(relu(self.fc1(global_avg_pool(f_hat)))))
            return v.reshape(v.shape[0], 3)


class TransmissionHead(Module):
    """Single-channel transmission map: two 3x3 convs, x16 upsample, sigmoid."""

    def __init__(self, cb: int):
        super().__init__()
        hidden = max(cb // 4, 4)
        self.conv1 = Conv2d(cb, hidden, 3, padding=1)
        self.conv2 = Conv2d(hidden, 1, 3, padding=1)

    def __call__(self, f_hat: Tensor) -> Tensor:
        with op_scope("aux"):
            x = self.conv2(leaky_relu(self.conv1(f_hat), LEAKY_SLOPE))
            return sigmoid(bilinear_upsample(x, 16))


class ResidualHead(Module):
    """Direct 3-channel haze residual via a deeper normalized conv stack."""

    def __init__(self, cb: int, base_channels: int):
        super().__init__()
        c = base_channels
        self.conv1 = Conv2d(cb, 4 * c, 3, padding=1)
        self.norm1 = InstanceNorm2d(4 * c)
        self.conv2 = Conv2d(4 * c, 2 * c, 3, padding=1)
        self.norm2 = InstanceNorm2d(2 * c)
        self.conv3 = Conv2d(2 * c, c, 3, padding=1)
        self.norm3 = InstanceNorm2d(c)
        self.conv4 = Conv2d(c, 3, 3, padding=1)

    def __call__(self, f_hat: Tensor) -> Tensor:
        with op_scope("aux"):
            x = leaky_relu(self.norm1(self.conv1(f_hat)), LEAKY_SLOPE)
            x = leaky_relu(self.norm2(self.conv2(x)), LEAKY_SLOPE)
            x = bilinear_upsample(x, 16)
            x = leaky_relu(self.norm3(self.conv3(x)), LEAKY_SLOPE)
            return self.conv4(x)  # signed output, no squashing


class AuxHeadBundle(Module):
    """One of the ablation heads plus its supervision loss."""

    def __init__(self, kind: str, bottleneck_channels: int, base_channels: int):
        super().__init__()
        if kind not in AUX_KINDS:
            raise ValueError(f"unknown aux head kind {kind!r} (choose from {AUX_KINDS})")
        self.kind = kind
        if kind in ("A", "A_plus_t"):
            self.light = LightHead(bottleneck_channels)
        if kind in ("t", "A_plus_t"):
            self.transmission = TransmissionHead(bottleneck_channels)
        if kind == "residual":
            self.residual = ResidualHead(bottleneck_channels, base_channels)

    def loss(self, f_hat: Tensor, scene_a: np.ndarray, scene_t: np.ndarray,
             residual: np.ndarray) -> Tensor:
        """L1 supervision against ground-truth scene quantities.

        scene_a: (B, 3) atmospheric light; scene_t: (B, 1, H, W) transmission;
        residual: (B, 3, H, W) signed hazy-minus-clean.
        """
        parts = []
        if self.kind in ("A", "A_plus_t"):
            parts.append(abs_(self.light(f_hat) - Tensor(scene_a)).mean())
        if self.kind in ("t", "A_plus_t"):
            parts.append(abs_(self.transmission(f_hat) - Tensor(scene_t)).mean())
        if self.kind == "residual":
            parts.append(abs_(self.residual(f_hat) - Tensor(residual)).mean())
        total = parts[0]
        for p in parts[1:]:
            total = total + p
        return total


def build_aux_head(kind: str, bottleneck_channels: int, base_channels: int) -> AuxHeadBundle:
    return AuxHeadBundle(kind, bottleneck_channels, base_channels)
