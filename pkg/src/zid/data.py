"""Synthetic hazy/clean pair generation, augmentation, optimization, and
the training loop coupling the backbone, the diffusion head, and the
three-term objective.

Pairs follow the atmospheric scattering model I_h = I_c * t + A(1 - t)
with t = exp(-beta * depth), so ground-truth airlight and transmission are
available for the auxiliary-head ablations.  All randomness is keyed by
(seed, purpose, index) so training is a pure function of the config.
"""

from __future__ import annotations

import dataclasses
import math
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig, DehazeNet, count_params
from .diffusion import (
    AUX_KINDS, NoisePredictor, SeverityConfig, ZiPphConfig, build_aux_head,
    build_schedule, forward_diffuse, sample_timesteps, severity_caps,
    severity_scores,
)
from .image_ops import HF_KINDS, Image, hf_operator, psnr
from .losses import (
    LossLog, LossWeights, PerceptualStack, contrastive_loss, diffusion_loss,
    l1_loss, total_loss,
)
from .rng import Rng
from .tensor import Tensor, backward, find_first_nan, init_parameters
from .weights_io import load_weights, save_weights

__all__ = [
    "SceneParams", "HazyCleanPair", "TrainConfig", "ConfigError", "NumericError",
    "gen_clean_image", "gen_depth", "synth_haze", "make_pair", "augment",
    "Adam", "cosine_lr", "TrainState", "train_step", "train_loop",
    "parse_config", "config_text", "CONFIG_SCHEMA", "evaluate_train_psnr",
]

DEPTH_KINDS = ("ramp", "radial", "noisy_ramp")
AUX_CHOICES = ("zipph",) + AUX_KINDS + ("none",)


class ConfigError(ValueError):
    """Bad config file or override."""


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


# ---------------------------------------------------------------------------
# Scene synthesis
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class SceneParams:
    a: np.ndarray            # atmospheric light, 3-vector in [0.7, 1.0]
    depth: np.ndarray        # H x W in [0, 1]
    beta_scatter: float      # haze density > 0
    depth_kind: str = "ramp"
    seed: int = 0

    @property
    def t_map(self) -> np.ndarray:
        return np.exp(-self.beta_scatter * self.depth)


@dataclasses.dataclass
class HazyCleanPair:
    clean: Image
    hazy: Image
    scene: SceneParams


def _resize_bilinear(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resample of an H x W x C array (align-corners-false)."""

    def coords(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        i0 = np.floor(src)
        frac = src - i0
        lo = np.clip(i0, 0, n_in - 1).astype(np.intp)
        hi = np.clip(i0 + 1, 0, n_in - 1).astype(np.intp)
        return lo, hi, frac

    lo, hi, f = coords(h, arr.shape[0])
    f = f[:, None, None] if arr.ndim == 3 else f[:, None]
    out = arr[lo] * (1 - f) + arr[hi] * f
    lo, hi, f = coords(w, arr.shape[1])
    f = f[None, :, None] if arr.ndim == 3 else f[None, :]
    return out[:, lo] * (1 - f) + out[:, hi] * f


def gen_clean_image(rng: Rng, h: int, w: int) -> Image:
    """Procedural clean scene: layered value noise, random solid shapes,
    and one smooth gradient."""
    if h < 16 or w < 16:
        raise ValueError("clean images must be at least 16x16")
    base = np.zeros((h, w, 3))
    for octave, (cells, amp) in enumerate(((4, 0.5), (8, 0.25), (16, 0.06))):
        grid = rng.split("noise", octave).uniform(0.0, 1.0, (cells, cells, 3))
        base += amp * _resize_bilinear(grid, h, w)
    base = 0.2 + 0.6 * (base - base.min()) / (base.max() - base.min() + 1e-12)

    shape_rng = rng.split("shapes")
    yy, xx = np.mgrid[0:h, 0:w]
    for i in range(int(shape_rng.integers(3, 9))):
        r = shape_rng.split(i)
        color = r.uniform(0.0, 1.0, 3)
        cy, cx = r.uniform(0, h), r.uniform(0, w)
        size = r.uniform(0.08, 0.3) * min(h, w)
        if r.uniform() < 0.5:
            mask = (np.abs(yy - cy) < size) & (np.abs(xx - cx) < size * r.uniform(0.5, 1.5))
        else:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < size ** 2
        base[mask] = color

    grad_rng = rng.split("gradient")
    theta = grad_rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(theta) * xx / max(w - 1, 1) + np.sin(theta) * yy / max(h - 1, 1))
    ramp = (ramp - ramp.min()) / (ramp.max() - ramp.min() + 1e-12)
    base += grad_rng.uniform(-0.15, 0.15) * ramp[:, :, None]
    return Image(np.clip(base, 0.0, 1.0))


def gen_depth(rng: Rng, h: int, w: int, kind: str | None = None) -> tuple[np.ndarray, str]:
    """Depth map in [0, 1] (min exactly 0, max exactly 1)."""
    if kind is None:
        kind = DEPTH_KINDS[int(rng.split("kind").integers(0, len(DEPTH_KINDS)))]
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "ramp":
        depth = yy.astype(np.float64)
    elif kind == "radial":
        depth = np.sqrt((yy - (h - 1) / 2) ** 2 + (xx - (w - 1) / 2) ** 2)
    elif kind == "noisy_ramp":
        grid = rng.split("perturb").uniform(0.0, 1.0, (6, 6))
        depth = yy / max(h - 1, 1) + 0.25 * _resize_bilinear(grid[:, :, None], h, w)[:, :, 0]
    else:
        raise ValueError(f"unknown depth kind {kind!r}")
    lo, hi = depth.min(), depth.max()
    return (depth - lo) / (hi - lo), kind


def synth_haze(clean: Image, scene: SceneParams) -> Image:
    """Atmospheric scattering: I_h = clip(I_c * t + A * (1 - t), 0, 1)."""
    t = scene.t_map[:, :, None]
    return Image(np.clip(clean.pixels * t + scene.a[None, None, :] * (1.0 - t), 0.0, 1.0))


def make_pair(rng: Rng, h: int, w: int) -> HazyCleanPair:
    clean = gen_clean_image(rng.split("clean"), h, w)
    depth, kind = gen_depth(rng.split("depth"), h, w)
    scene = SceneParams(
        a=rng.split("airlight").uniform(0.7, 1.0, 3),
        depth=depth,
        beta_scatter=float(rng.split("beta").uniform(0.5, 3.0)),
        depth_kind=kind,
        seed=rng.seed,
    )
    return HazyCleanPair(clean=clean, hazy=synth_haze(clean, scene), scene=scene)


def augment(pair: HazyCleanPair, rng: Rng, crop_size: int) -> HazyCleanPair:
    """Joint crop / flip / 90-degree rotation / mild scale.

    The geometric transform is applied to the clean image and the depth
    map, then the hazy image is re-synthesized from the transformed scene,
    so the scattering identity holds exactly even under bilinear scaling.
    """
    clean = pair.clean.pixels
    depth = pair.scene.depth
    h, w = clean.shape[:2]
    if h < crop_size or w < crop_size:
        raise ValueError(f"source {h}x{w} smaller than crop {crop_size}")

    lo_scale = max(0.9, crop_size / min(h, w))
    scale = float(rng.split("scale").uniform(lo_scale, 1.1))
    if abs(scale - 1.0) > 1e-9:
        nh = max(crop_size, int(round(h * scale)))
        nw = max(crop_size, int(round(w * scale)))
        clean = np.clip(_resize_bilinear(clean, nh, nw), 0.0, 1.0)
        depth = np.clip(_resize_bilinear(depth[:, :, None], nh, nw)[:, :, 0], 0.0, 1.0)

    k = int(rng.split("rot").integers(0, 4))
    clean = np.rot90(clean, k, axes=(0, 1))
    depth = np.rot90(depth, k, axes=(0, 1))
    if rng.split("fliph").uniform() < 0.5:
        clean = clean[:, ::-1]
        depth = depth[:, ::-1]
    if rng.split("flipv").uniform() < 0.5:
        clean = clean[::-1]
        depth = depth[::-1]

    ch, cw = clean.shape[:2]
    oy = int(rng.split("cropy").integers(0, ch - crop_size + 1))
    ox = int(rng.split("cropx").integers(0, cw - crop_size + 1))
    clean = np.ascontiguousarray(clean[oy:oy + crop_size, ox:ox + crop_size])
    depth = np.ascontiguousarray(depth[oy:oy + crop_size, ox:ox + crop_size])

    scene = SceneParams(a=pair.scene.a, depth=depth,
                        beta_scatter=pair.scene.beta_scatter,
                        depth_kind=pair.scene.depth_kind, seed=pair.scene.seed)
    clean_img = Image(clean)
    return HazyCleanPair(clean=clean_img, hazy=synth_haze(clean_img, scene), scene=scene)


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------

class Adam:
    """Standard bias-corrected Adam over a model's named parameters."""

    def __init__(self, named_params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.named = dict(sorted(named_params.items()))
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.named.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.named.items()}

    def step(self, lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, p in self.named.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - np.asarray(lr, dtype=p.data.dtype) * update.astype(p.data.dtype)
            p.grad = None


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

# key -> (type, default); the single flat namespace shared by file and --set
CONFIG_SCHEMA = {
    "seed": (int, 0),
    "steps": (int, 3000),
    "batch_size": (int, 8),
    "lr": (float, 1e-4),
    "crop_size": (int, 64),
    "num_pairs": (int, 8),
    "source_size": (int, 0),       # 0 means "same as crop_size"
    "augment": (bool, True),
    "base_channels": (int, 8),
    "num_lgcb": (int, 4),
    "gdfn_expansion": (float, 2.0),
    "se_reduction": (int, 8),
    "cslm_mlp_reduction": (int, 4),
    "hf_kind": (str, "color_laplacian"),
    "aux_head": (str, "zipph"),
    "lambda1": (float, 1.0),
    "lambda2": (float, 0.1),
    "lambda3": (float, 0.35),
    "diffusion_steps": (int, 1000),
    "beta_start": (float, 1e-4),
    "beta_end": (float, 0.02),
    "t_low": (int, 200),
    "gamma": (float, 0.8),
    "cond_channels": (int, 8),
    "embed_dim": (int, 128),
    "unet_base_width": (int, 16),
    "perceptual_seed": (int, 0),
    "omega1": (float, 1.0),
    "omega2": (float, 0.5),
    "omega3": (float, 0.25),
    "ckpt_every": (int, 1000),
    "bench_runs": (int, 20),
    "bench_resolutions": (str, "256,512"),
    "figures": (bool, True),
}


def _parse_value(key: str, raw: str):
    typ, _ = CONFIG_SCHEMA[key]
    raw = raw.strip()
    if typ is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"key {key!r}: cannot parse {raw!r} as bool")
    try:
        return typ(raw)
    except ValueError as e:
        raise ConfigError(f"key {key!r}: cannot parse {raw!r} as {typ.__name__}") from e


def parse_config(text: str, overrides: dict | None = None) -> dict:
    """Flat `key = value` lines; comments with '#'; unknown keys rejected."""
    values = {k: default for k, (_, default) in CONFIG_SCHEMA.items()}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    for key, raw in (overrides or {}).items():
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"override: unknown key {key!r}")
        values[key] = _parse_value(key, raw) if isinstance(raw, str) else raw
    return values


def config_text(values: dict) -> str:
    """Canonical flat rendering (sorted keys) used in weight-file blobs."""
    return "\n".join(f"{k} = {values[k]}" for k in sorted(values)) + "\n"


@dataclasses.dataclass
class TrainConfig:
    values: dict

    def __post_init__(self):
        v = self.values
        if v["crop_size"] % 16:
            raise ConfigError(f"crop_size {v['crop_size']} must be divisible by 16")
        if v["hf_kind"] not in HF_KINDS:
            raise ConfigError(f"hf_kind must be one of {HF_KINDS}")
        if v["aux_head"] not in AUX_CHOICES:
            raise ConfigError(f"aux_head must be one of {AUX_CHOICES}")
        if v["source_size"] == 0:
            v["source_size"] = v["crop_size"]
        if v["source_size"] < v["crop_size"]:
            raise ConfigError("source_size must be >= crop_size")

    @classmethod
    def from_text(cls, text: str, overrides: dict | None = None) -> "TrainConfig":
        return cls(parse_config(text, overrides))

    def __getitem__(self, key):
        return self.values[key]

    def backbone(self) -> BackboneConfig:
        v = self.values
        return BackboneConfig(
            base_channels=v["base_channels"], num_lgcb=v["num_lgcb"],
            gdfn_expansion=v["gdfn_expansion"], se_reduction=v["se_reduction"],
            cslm_mlp_reduction=v["cslm_mlp_reduction"])

    def severity(self) -> SeverityConfig:
        return SeverityConfig(t_low=self.values["t_low"], gamma=self.values["gamma"])

    def loss_weights(self) -> LossWeights:
        v = self.values
        return LossWeights(v["lambda1"], v["lambda2"], v["lambda3"])

    def zipph(self) -> ZiPphConfig:
        v = self.values
        return ZiPphConfig(cond_channels=v["cond_channels"], embed_dim=v["embed_dim"],
                           base_width=v["unet_base_width"])

    def text(self) -> str:
        return config_text(self.values)


# ---------------------------------------------------------------------------
# Training state and step
# ---------------------------------------------------------------------------

class TrainState:
    """Model, auxiliary head, optimizer, and loss machinery for one run."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        rng = Rng(cfg["seed"])
        bcfg = cfg.backbone()
        self.model = DehazeNet(bcfg)
        init_parameters(self.model, rng.split("model"))
        self.kind = cfg["aux_head"]
        self.head = None
        if self.kind == "zipph":
            self.head = NoisePredictor(bcfg.bottleneck_channels, cfg.zipph())
            init_parameters(self.head, rng.split("zipph"))
        elif self.kind in AUX_KINDS:
            self.head = build_aux_head(self.kind, bcfg.bottleneck_channels,
                                       bcfg.base_channels)
            init_parameters(self.head, rng.split("aux"))
        self.schedule = build_schedule(cfg["diffusion_steps"], cfg["beta_start"],
                                       cfg["beta_end"])
        self.stack = PerceptualStack(seed=cfg["perceptual_seed"],
                                     level_weights=(cfg["omega1"], cfg["omega2"],
                                                    cfg["omega3"]))
        self.adam = Adam(self.named_parameters())
        self.step = 0

    def head_prefix(self) -> str:
        return "zipph." if self.kind == "zipph" else "aux."

    def named_parameters(self) -> dict:
        params = {f"backbone.{k}": p for k, p in self.model.named_parameters().items()}
        if self.head is not None:
            pre = self.head_prefix()
            params.update({f"{pre}{k}": p for k, p in self.head.named_parameters().items()})
        return dict(sorted(params.items()))

    # -- serialization -------------------------------------------------------
    def weight_entries(self) -> dict:
        return {k: p.data for k, p in self.named_parameters().items()}

    def save_weights(self, path) -> None:
        save_weights(path, self.weight_entries(), self.cfg.text())

    def save_checkpoint(self, path) -> None:
        entries = self.weight_entries()
        for name in self.adam.m:
            entries[f"opt.m.{name}"] = self.adam.m[name]
            entries[f"opt.v.{name}"] = self.adam.v[name]
        entries["opt.step"] = np.array([float(self.step)], dtype=np.float32)
        save_weights(path, entries, self.cfg.text())

    def load_checkpoint(self, path) -> None:
        _, entries = load_weights(path)
        params = self.named_parameters()
        for name, p in params.items():
            if name not in entries:
                raise ConfigError(f"checkpoint missing parameter {name!r}")
            p.data = entries[name].reshape(p.shape).astype(p.data.dtype)
            self.adam.m[name] = entries[f"opt.m.{name}"].reshape(p.shape).copy()
            self.adam.v[name] = entries[f"opt.v.{name}"].reshape(p.shape).copy()
        self.step = int(entries["opt.step"][0])
        self.adam.step_count = self.step


def _batch_arrays(pairs: list[HazyCleanPair], hf_kind: str):
    clean = np.stack([p.clean.pixels.transpose(2, 0, 1) for p in pairs]).astype(np.float32)
    hazy = np.stack([p.hazy.pixels.transpose(2, 0, 1) for p in pairs]).astype(np.float32)
    hf = np.stack([hf_operator(p.hazy, hf_kind).transpose(2, 0, 1)
                   for p in pairs]).astype(np.float32)
    a = np.stack([p.scene.a for p in pairs]).astype(np.float32)
    t_map = np.stack([p.scene.t_map[None] for p in pairs]).astype(np.float32)
    return clean, hazy, hf, a, t_map


def _batch_indices(rng: Rng, n_pairs: int, batch_size: int) -> np.ndarray:
    """Without replacement when the batch fits the dataset (epoch-style)."""
    if batch_size <= n_pairs:
        perm = np.arange(n_pairs)
        rng.shuffle(perm)
        return perm[:batch_size]
    return rng.integers(0, n_pairs, batch_size)


def train_step(state: TrainState, batch: list[HazyCleanPair], rng: Rng,
               lr: float) -> tuple[float, float, float, float]:
    """One optimization step; returns (l1, contrast, diff, total) values."""
    return train_step_arrays(state, _batch_arrays(batch, state.cfg["hf_kind"]), rng, lr)


def train_step_arrays(state: TrainState, arrays, rng: Rng,
                      lr: float) -> tuple[float, float, float, float]:
    cfg = state.cfg
    clean, hazy, hf, scene_a, scene_t = arrays
    x = Tensor(hazy)
    pred, f_hat = state.model(x, Tensor(hf), training=True, want_bottleneck=True)
    clean_t = Tensor(clean)
    l1 = l1_loss(pred, clean_t)

    residual = hazy - clean
    noisy_neg = None
    if state.kind == "zipph":
        s_norm = severity_scores(hazy, clean)
        caps = severity_caps(s_norm, cfg.severity(), state.schedule.T)
        t = sample_timesteps(caps, rng.split("t"))
        eps = rng.split("eps").normal(residual.shape, dtype=np.float32)
        r_t = forward_diffuse(residual, t, eps, state.schedule).astype(np.float32)
        eps_hat = state.head(Tensor(r_t), t, f_hat)
        third = diffusion_loss(eps_hat, Tensor(eps))
        noisy_neg = Tensor(np.clip(clean + r_t, 0.0, 1.0))
    elif state.kind in AUX_KINDS:
        third = state.head.loss(f_hat, scene_a, scene_t, residual)
    else:
        third = Tensor(0.0)

    contrast = contrastive_loss(pred, clean_t, x, noisy_neg, state.stack)
    total = total_loss(l1, contrast, third, cfg.loss_weights())
    if not np.isfinite(total.data):
        culprit = find_first_nan(total) or "unknown op"
        raise NumericError(f"non-finite loss at step {state.step + 1}: first at {culprit}")
    backward(total)
    state.adam.step(lr)
    state.step += 1
    return float(l1.data), float(contrast.data), float(third.data), float(total.data)


def build_dataset(cfg: TrainConfig) -> list[HazyCleanPair]:
    root = Rng(cfg["seed"])
    size = cfg["source_size"]
    return [make_pair(root.split("data", i), size, size) for i in range(cfg["num_pairs"])]


def evaluate_train_psnr(state: TrainState, pairs: list[HazyCleanPair]) -> float:
    """Mean PSNR of the restored training images against their clean targets."""
    vals = []
    for p in pairs:
        restored = state.model.dehaze(p.hazy, state.cfg["hf_kind"])
        vals.append(psnr(restored, p.clean))
    return float(np.mean(vals))


def train_loop(cfg: TrainConfig, out_dir, resume_from=None, stop_check=None,
               quiet: bool = True):
    """Run training; writes loss log, periodic checkpoints, final weights.

    stop_check(state, pairs) may return True to finish early (used by the
    overfit acceptance run).  Returns (weights_path, log_path, state).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = TrainState(cfg)
    if resume_from is not None:
        state.load_checkpoint(resume_from)
    pairs = build_dataset(cfg)
    root = Rng(cfg["seed"])
    total_steps = cfg["steps"]
    log_path = out / "loss_log.tsv"
    last_ckpt = -1
    cached = None
    if not cfg["augment"]:  # fixed pairs: build batch arrays once
        cached = _batch_arrays(pairs, cfg["hf_kind"])
    with LossLog(log_path) as log:
        while state.step < total_steps:
            step_index = state.step  # 0-based for rng keys, 1-based for the log
            srng = root.split("step", step_index)
            idx = _batch_indices(srng.split("batch"), len(pairs), cfg["batch_size"])
            lr = cosine_lr(step_index, total_steps, cfg["lr"])
            if cfg["augment"]:
                batch = [augment(pairs[int(i)], srng.split("aug", slot), cfg["crop_size"])
                         for slot, i in enumerate(idx)]
                parts = train_step(state, batch, srng.split("noise"), lr)
            else:
                arrays = tuple(a[idx] for a in cached)
                parts = train_step_arrays(state, arrays, srng.split("noise"), lr)
            log.log(state.step, *parts)
            if not quiet and state.step % 50 == 0:
                print(f"step {state.step}: total {parts[3]:.6f}")
            if cfg["ckpt_every"] > 0 and state.step % cfg["ckpt_every"] == 0:
                state.save_checkpoint(out / f"ckpt_{state.step}.zid")
                last_ckpt = state.step
            if stop_check is not None and stop_check(state, pairs):
                break
    if last_ckpt != state.step:  # a run always ends on a resumable checkpoint
        state.save_checkpoint(out / f"ckpt_{state.step}.zid")
    weights_path = out / "weights.zid"
    state.save_weights(weights_path)
    return weights_path, log_path, state
