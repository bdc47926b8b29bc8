"""Deterministic dehazing backbone.

Dual-stream design: a semantic context encoder compresses the hazy image to
a 1/16-resolution bottleneck refined by channel-transposed attention blocks
(LGCBs), while a structural encoder gates the signed color Laplacian
residual through channel/spatial descriptors (CSLM).  An SE-reweighted
fusion decoder (DFAB) arbitrates semantic skips, structural skips, and the
upsampled state at every scale before a final 3x3 prediction layer.

The diffusion prior head lives elsewhere and is never reachable from the
inference path here.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .image_ops import Image, hf_operator
from .tensor import (
    Module, ModuleList, Parameter, ShapeError, Tensor,
    bilinear_upsample, chunk, concat, conv2d, exp, gelu, global_avg_pool,
    instance_norm, l2_normalize_dim, leaky_relu, matmul, max_dim, mean_,
    no_grad, op_scope, relu, sigmoid, softmax_dim, clip as clip_op,
    default_dtype,
)

__all__ = [
    "BackboneConfig", "FeaturePyramid", "Conv2d", "InstanceNorm2d", "ConvBlock",
    "ResBlock", "SemanticEncoder", "ChannelAttention", "GatedFeedForward",
    "ContextBlock", "StructuralEncoder", "FusionBlock", "DehazeNet",
    "count_macs", "count_params",
]

LEAKY_SLOPE = 0.2


@dataclasses.dataclass
class FeaturePyramid:
    """Both encoder hierarchies plus the raw and refined bottleneck.

    semantic[i] and structural[i] shape-match pairwise; refined matches the
    bottleneck shape.
    """

    semantic: list
    structural: list
    bottleneck: "Tensor"
    refined: "Tensor"

    def __post_init__(self):
        for i, (s, c) in enumerate(zip(self.semantic, self.structural)):
            if s.shape != c.shape:
                raise ShapeError(
                    f"pyramid level {i}: semantic {s.shape} != structural {c.shape}")
        if self.refined.shape != self.bottleneck.shape:
            raise ShapeError(
                f"refined bottleneck {self.refined.shape} != raw {self.bottleneck.shape}")


@dataclasses.dataclass
class BackboneConfig:
    """Architecture hyperparameters; stage widths are base_channels * 2^i."""

    base_channels: int = 8
    num_lgcb: int = 4
    gdfn_expansion: float = 2.0
    se_reduction: int = 8
    cslm_mlp_reduction: int = 4

    def __post_init__(self):
        if self.base_channels < 1 or self.num_lgcb < 1:
            raise ValueError("base_channels and num_lgcb must be positive")
        if self.gdfn_expansion <= 0:
            raise ValueError("gdfn_expansion must be positive")

    @property
    def bottleneck_channels(self) -> int:
        return 16 * self.base_channels

    def width(self, i: int) -> int:
        return self.base_channels * (1 << i)

    def check_input_size(self, h: int, w: int) -> None:
        if h % 16 or w % 16:
            raise ShapeError(f"input size {h}x{w} must be divisible by 16")


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Conv2d(Module):
    def __init__(self, cin, cout, k, stride=1, padding=0, groups=1, bias=True,
                 init_gain=1.0):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.groups = groups
        self.weight = Parameter(np.zeros((cout, cin // groups, k, k), dtype=default_dtype()),
                                init_gain=init_gain)
        self.bias = Parameter(np.zeros(cout, dtype=default_dtype())) if bias else None

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias, stride=self.stride,
                      padding=self.padding, groups=self.groups)


class InstanceNorm2d(Module):
    def __init__(self, ch, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = Parameter(np.ones(ch, dtype=default_dtype()))
        self.beta = Parameter(np.zeros(ch, dtype=default_dtype()))

    def __call__(self, x):
        return instance_norm(x, self.gamma, self.beta, eps=self.eps)


class ConvBlock(Module):
    """Conv + InstanceNorm + LeakyReLU."""

    def __init__(self, cin, cout, k=3, stride=1):
        super().__init__()
        self.conv = Conv2d(cin, cout, k, stride=stride, padding=k // 2)
        self.norm = InstanceNorm2d(cout)

    def __call__(self, x):
        return leaky_relu(self.norm(self.conv(x)), LEAKY_SLOPE)


class ResBlock(Module):
    """Conv3x3 - InstanceNorm - LeakyReLU - Conv3x3 + identity."""

    def __init__(self, ch):
        super().__init__()
        self.conv1 = Conv2d(ch, ch, 3, padding=1)
        self.norm = InstanceNorm2d(ch)
        self.conv2 = Conv2d(ch, ch, 3, padding=1, init_gain=0.1)

    def __call__(self, x):
        return x + self.conv2(leaky_relu(self.norm(self.conv1(x)), LEAKY_SLOPE))


# ---------------------------------------------------------------------------
# Semantic context encoder (SCB hierarchy)
# ---------------------------------------------------------------------------

class SemanticEncoder(Module):
    """3x3 projection, then four stages of (ResBlock, stride-2 conv).

    Emits S_0 (projection output, full resolution, width C), S_1..S_3 at
    successively halved resolution and doubled width, and the bottleneck
    F_b at 1/16 resolution with width 16C.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        c = cfg.base_channels
        self.proj = ConvBlock(3, c)
        self.blocks = ModuleList([ResBlock(cfg.width(i)) for i in range(4)])
        self.downs = ModuleList(
            [ConvBlock(cfg.width(i), cfg.width(i + 1), stride=2) for i in range(4)])

    def __call__(self, x):
        s = self.proj(x)
        skips = [s]
        cur = s
        for i in range(4):
            cur = self.downs[i](self.blocks[i](cur))
            if i < 3:
                skips.append(cur)
        return skips, cur  # [S_0..S_3], F_b


# ---------------------------------------------------------------------------
# Lightweight global context block (channel-transposed attention + GDFN)
# ---------------------------------------------------------------------------

class ChannelAttention(Module):
    """Transposed attention over the channel dimension, linear in pixels.

    QKV come from a point-wise expansion to 3x width plus a depth-wise 3x3;
    attention is softmax(K_bar Q_bar^T / tau) with Q, K l2-normalized along
    the spatial axis, so an input rescaling leaves the attention map fixed.
    """

    def __init__(self, cb: int):
        super().__init__()
        self.cb = cb
        self.qkv_point = Conv2d(cb, 3 * cb, 1)
        self.qkv_depth = Conv2d(3 * cb, 3 * cb, 3, padding=1, groups=3 * cb)
        self.proj_out = Conv2d(cb, cb, 1, init_gain=0.1)
        # positivity via exp(log_tau), initialized to tau = 1
        self.log_tau = Parameter(np.zeros(1, dtype=default_dtype()))

    def qkv(self, x):
        if x.shape[1] != self.cb:
            raise ShapeError(f"attention width {x.shape[1]} != configured {self.cb}")
        return chunk(self.qkv_depth(self.qkv_point(x)), 3, axis=1)

    def attention_weights(self, q, k):
        b, cb, h, w = q.shape
        qf = l2_normalize_dim(q.reshape(b, cb, h * w), 2)
        kf = l2_normalize_dim(k.reshape(b, cb, h * w), 2)
        scores = matmul(kf, qf.transpose(0, 2, 1)) / exp(self.log_tau)
        return softmax_dim(scores, 2)  # rows sum to 1 over channels

    def attend(self, x, q, k, v):
        b, cb, h, w = x.shape
        attn = self.attention_weights(q, k)
        mixed = matmul(attn, v.reshape(b, cb, h * w)).reshape(b, cb, h, w)
        return x + self.proj_out(mixed)

    def __call__(self, x):
        q, k, v = self.qkv(x)
        return self.attend(x, q, k, v)


class GatedFeedForward(Module):
    """Point-wise expansion, depth-wise 3x3, gated halves: x + W2(GELU(U1) * U2)."""

    def __init__(self, cb: int, expansion: float):
        super().__init__()
        hidden = int(round(expansion * cb))
        self.expand = Conv2d(cb, 2 * hidden, 1)
        self.depth = Conv2d(2 * hidden, 2 * hidden, 3, padding=1, groups=2 * hidden)
        self.project = Conv2d(hidden, cb, 1, init_gain=0.1)

    def __call__(self, x):
        u1, u2 = chunk(self.depth(self.expand(x)), 2, axis=1)
        return x + self.project(gelu(u1) * u2)


class ContextBlock(Module):
    def __init__(self, cb: int, expansion: float):
        super().__init__()
        self.attn = ChannelAttention(cb)
        self.ffn = GatedFeedForward(cb, expansion)

    def __call__(self, x):
        return self.ffn(self.attn(x))


# ---------------------------------------------------------------------------
# Color-aware structural encoder (CSLM + stride-2 hierarchy)
# ---------------------------------------------------------------------------

class StructuralEncoder(Module):
    """Gates the signed Laplacian residual, then builds the C_i hierarchy.

    Channel descriptor: MLP over GAP (logits).  Spatial descriptor: 7x7 conv
    over [channel-mean, channel-max] (logits).  The gate is the sigmoid of
    their broadcast product, applied residually: X + X * gate.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        c = cfg.base_channels
        hidden = max(c // cfg.cslm_mlp_reduction, 1)
        self.proj = Conv2d(3, c, 3, padding=1)
        self.adapt = Conv2d(c, c, 1)
        self.mlp1 = Conv2d(c, hidden, 1)
        self.mlp2 = Conv2d(hidden, c, 1)
        self.spatial = Conv2d(2, 1, 7, padding=3)
        self.downs = ModuleList(
            [ConvBlock(cfg.width(i), cfg.width(i + 1), stride=2) for i in range(3)])

    def mask_logits(self, x):
        m_c = self.mlp2(relu(self.mlp1(global_avg_pool(x))))
        pooled = concat([mean_(x, axis=1, keepdims=True), max_dim(x, 1, keepdims=True)], 1)
        m_s = self.spatial(pooled)
        return m_c, m_s

    def __call__(self, residual):
        x = self.adapt(leaky_relu(self.proj(residual), LEAKY_SLOPE))
        m_c, m_s = self.mask_logits(x)
        gated = x + x * sigmoid(m_c * m_s)
        skips = [gated]
        cur = gated
        for down in self.downs:
            cur = down(cur)
            skips.append(cur)
        return gated, skips  # X_tilde, [C_0..C_3]


# ---------------------------------------------------------------------------
# Fusion decoder (DFAB)
# ---------------------------------------------------------------------------

class FusionBlock(Module):
    """One decoder stage: upsample+halve channels, 1x1-compress the three
    streams (3w -> w), SE channel reweighting, residual refinement."""

    def __init__(self, w: int, se_reduction: int):
        super().__init__()
        self.reduce = Conv2d(2 * w, w, 1)
        self.compress = Conv2d(3 * w, w, 1)
        hidden = max(w // se_reduction, 1)
        self.se1 = Conv2d(w, hidden, 1)
        self.se2 = Conv2d(hidden, w, 1)
        self.refine = ResBlock(w)
        self.se_bypass = False  # test hook: force SE scale to 1

    def __call__(self, d_next, s_i, c_i):
        # channel halving commutes with the upsample; halve first (cheaper)
        d_up = bilinear_upsample(self.reduce(d_next), 2)
        if d_up.shape[2:] != s_i.shape[2:] or s_i.shape != c_i.shape:
            raise ShapeError(
                f"fusion stream shapes differ: up {d_up.shape}, semantic {s_i.shape}, "
                f"structural {c_i.shape}")
        z = self.compress(concat([d_up, s_i, c_i], axis=1))
        if self.se_bypass:
            return self.refine(z)
        scale = sigmoid(self.se2(relu(self.se1(global_avg_pool(z)))))
        return self.refine(z * scale)


# ---------------------------------------------------------------------------
# Full model
# ---------------------------------------------------------------------------

class DehazeNet(Module):
    """Single-pass dehazer: hazy image + high-frequency residual -> clear image."""

    def __init__(self, cfg: BackboneConfig | None = None):
        super().__init__()
        self.cfg = cfg or BackboneConfig()
        cb = self.cfg.bottleneck_channels
        self.semantic = SemanticEncoder(self.cfg)
        self.context = ModuleList(
            [ContextBlock(cb, self.cfg.gdfn_expansion) for _ in range(self.cfg.num_lgcb)])
        self.structural = StructuralEncoder(self.cfg)
        self.fusion = ModuleList(
            [FusionBlock(self.cfg.width(i), self.cfg.se_reduction) for i in range(4)])
        self.head = Conv2d(self.cfg.base_channels, 3, 3, padding=1)

    def refine_bottleneck(self, f_b):
        cur = f_b
        for block in self.context:
            cur = block(cur)
        return cur

    def feature_pyramid(self, x, residual) -> FeaturePyramid:
        """Expose both hierarchies for inspection; inference uses __call__."""
        skips, f_b = self.semantic(x)
        _, struct_skips = self.structural(residual)
        return FeaturePyramid(semantic=skips, structural=struct_skips,
                              bottleneck=f_b, refined=self.refine_bottleneck(f_b))

    def __call__(self, x, residual, training: bool = True, want_bottleneck: bool = False):
        self.cfg.check_input_size(x.shape[2], x.shape[3])
        with op_scope("backbone"):
            skips, f_b = self.semantic(x)
            f_hat = self.refine_bottleneck(f_b)
            _, struct_skips = self.structural(residual)
            d = f_hat
            for i in (3, 2, 1, 0):
                d = self.fusion[i](d, skips[i], struct_skips[i])
            out = self.head(d)
            if not training:
                out = clip_op(out, 0.0, 1.0)
        return (out, f_hat) if want_bottleneck else out

    # -- convenience inference path ----------------------------------------
    def dehaze_array(self, pixels: np.ndarray, hf_kind: str = "color_laplacian") -> np.ndarray:
        """H,W,3 array in [0,1] -> restored H,W,3 array; inference mode."""
        residual = hf_operator(Image(pixels), hf_kind)
        x = Tensor(pixels.transpose(2, 0, 1)[None])
        r = Tensor(residual.transpose(2, 0, 1)[None])
        with no_grad():
            out = self(x, r, training=False)
        return out.data[0].transpose(1, 2, 0).astype(np.float64)

    def dehaze(self, img: Image, hf_kind: str = "color_laplacian") -> Image:
        return Image(self.dehaze_array(img.pixels, hf_kind))


def count_params(module: Module) -> int:
    return sum(p.size for p in module.parameters())


# ---------------------------------------------------------------------------
# Exact multiply-accumulate accounting
# ---------------------------------------------------------------------------

def _conv_macs(cin, cout, k, ho, wo, groups=1):
    return cout * (cin // groups) * k * k * ho * wo


def count_macs(cfg: BackboneConfig, h: int, w: int) -> dict:
    """Symbolic per-module MAC counts for one image at h x w.

    Counts multiplies of convolutions and attention matrix products only
    (normalizations/activations excluded, the usual GMac convention).  Also
    reports the dense spatial-attention oracle cost N^2 * C_b for the
    complexity comparison.
    """
    cfg.check_input_size(h, w)
    c = cfg.base_channels
    cb = cfg.bottleneck_channels
    n = (h // 16) * (w // 16)

    semantic = _conv_macs(3, c, 3, h, w)
    for i in range(4):
        wi, hi_, wi_ = cfg.width(i), h >> i, w >> i
        semantic += 2 * _conv_macs(wi, wi, 3, hi_, wi_)          # res block
        semantic += _conv_macs(wi, cfg.width(i + 1), 3, hi_ >> 1, wi_ >> 1)

    hidden = int(round(cfg.gdfn_expansion * cb))
    attn_per_block = 2 * cb * cb * n                              # K_bar Q_bar^T and A V_bar
    lgcb_block = (
        _conv_macs(cb, 3 * cb, 1, h // 16, w // 16)               # qkv point-wise
        + _conv_macs(3 * cb, 3 * cb, 3, h // 16, w // 16, groups=3 * cb)
        + attn_per_block
        + _conv_macs(cb, cb, 1, h // 16, w // 16)                 # output projection
        + _conv_macs(cb, 2 * hidden, 1, h // 16, w // 16)
        + _conv_macs(2 * hidden, 2 * hidden, 3, h // 16, w // 16, groups=2 * hidden)
        + _conv_macs(hidden, cb, 1, h // 16, w // 16)
    )
    context = cfg.num_lgcb * lgcb_block

    mlp_hidden = max(c // cfg.cslm_mlp_reduction, 1)
    structural = (
        _conv_macs(3, c, 3, h, w)
        + _conv_macs(c, c, 1, h, w)
        + c * mlp_hidden + mlp_hidden * c                         # channel MLP at 1x1
        + _conv_macs(2, 1, 7, h, w)
    )
    for i in range(3):
        structural += _conv_macs(cfg.width(i), cfg.width(i + 1), 3, h >> (i + 1), w >> (i + 1))

    fusion = 0
    for i in range(4):
        wi, hi_, wi_ = cfg.width(i), h >> i, w >> i
        se_hidden = max(wi // cfg.se_reduction, 1)
        fusion += (
            _conv_macs(2 * wi, wi, 1, hi_, wi_)                   # upsample channel halving
            + _conv_macs(3 * wi, wi, 1, hi_, wi_)                 # stream compression
            + wi * se_hidden + se_hidden * wi                     # SE at 1x1
            + 2 * _conv_macs(wi, wi, 3, hi_, wi_)                 # residual refinement
        )

    head = _conv_macs(c, 3, 3, h, w)
    total = semantic + context + structural + fusion + head
    return {
        "semantic": semantic,
        "context": context,
        "structural": structural,
        "fusion": fusion,
        "head": head,
        "total": total,
        "lgcb_attention_per_block": attn_per_block,
        "lgcb_block": lgcb_block,
        "spatial_attention_oracle": n * n * cb,
        "bottleneck_pixels": n,
    }
