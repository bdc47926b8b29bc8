"""The three-term training objective: pixel L1, feature-space contrastive
loss, and the diffusion noise loss, plus the frozen perceptual stack the
contrastive term is computed in.

The perceptual stack replaces a pretrained feature extractor with a seeded
frozen random conv pyramid: the contrastive ratio only needs a fixed
nonlinear embedding, and a seed makes it reproducible.  No gradient ever
flows into the stack's weights, only through them to the restored image.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .rng import Rng
from .tensor import (
    Tensor, ShapeError, abs_, avg_downsample, conv2d, default_dtype, no_grad,
    relu,
)

__all__ = [
    "LossWeights", "PerceptualStack", "LossLog",
    "l1_loss", "contrastive_loss", "diffusion_loss", "total_loss",
]

CONTRAST_EPS = 1e-7


@dataclasses.dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 0.35

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")


class PerceptualStack:
    """Three frozen Conv3x3-ReLU-AvgDown2 levels, widths 16/32/64.

    Weights come from a QR-orthogonalized Gaussian draw keyed by the seed;
    identical seeds give bitwise-identical features.
    """

    WIDTHS = (16, 32, 64)

    def __init__(self, seed: int = 0, level_weights=(1.0, 0.5, 0.25)):
        self.seed = seed
        self.level_weights = tuple(level_weights)
        rng = Rng(seed)
        self.weights = []
        cin = 3
        for lvl, cout in enumerate(self.WIDTHS):
            w = self._orthogonal_conv(rng.split("perceptual", lvl), cout, cin)
            self.weights.append(Tensor(w.astype(default_dtype())))
            cin = cout

    @staticmethod
    def _orthogonal_conv(rng: Rng, cout: int, cin: int) -> np.ndarray:
        fan = cin * 9
        g = rng.normal((fan, cout))
        q, r = np.linalg.qr(g)
        q = q * np.sign(np.diag(r))  # deterministic sign convention
        return np.sqrt(2.0) * q.T.reshape(cout, cin, 3, 3)

    def features(self, img: Tensor) -> list[Tensor]:
        if img.shape[2] < 2 ** len(self.WIDTHS) or img.shape[3] < 2 ** len(self.WIDTHS):
            raise ShapeError(
                f"image {img.shape[2]}x{img.shape[3]} too small for "
                f"{len(self.WIDTHS)} feature levels")
        feats = []
        cur = img
        for w in self.weights:
            cur = avg_downsample(relu(conv2d(cur, w, padding=1)), 2)
            feats.append(cur)
        return feats


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference over all elements."""
    if pred.shape != target.shape:
        raise ShapeError(f"l1 shapes differ: {pred.shape} vs {target.shape}")
    return abs_(pred - target).mean()


def contrastive_loss(pred: Tensor, clean: Tensor, hazy: Tensor,
                     noisy_neg: Tensor | None, stack: PerceptualStack) -> Tensor:
    """Pull pred toward the clean target, push from hazy (and, when the
    diffusion head is active, from the clipped noisy-residual negative).

    Negatives are detached: gradients flow only through pred.
    """
    for other in (clean, hazy) + ((noisy_neg,) if noisy_neg is not None else ()):
        if other.shape != pred.shape:
            raise ShapeError(f"contrastive shapes differ: {pred.shape} vs {other.shape}")
    f_pred = stack.features(pred)
    with no_grad():
        f_clean = stack.features(clean.detach())
        f_hazy = stack.features(hazy.detach())
        f_noisy = stack.features(noisy_neg.detach()) if noisy_neg is not None else None

    total = None
    for lvl, omega in enumerate(stack.level_weights):
        num = abs_(f_pred[lvl] - f_clean[lvl]).mean()
        den = abs_(f_pred[lvl] - f_hazy[lvl]).mean()
        if f_noisy is not None:
            den = den + abs_(f_pred[lvl] - f_noisy[lvl]).mean()
        term = omega * (num / (den + CONTRAST_EPS))
        total = term if total is None else total + term
    return total


def diffusion_loss(eps_hat: Tensor, eps: Tensor) -> Tensor:
    """Mean absolute error between predicted and injected noise."""
    if eps_hat.shape != eps.shape:
        raise ShapeError(f"noise shapes differ: {eps_hat.shape} vs {eps.shape}")
    return abs_(eps_hat - eps).mean()


def total_loss(l1: Tensor, contrast: Tensor, diff: Tensor,
               weights: LossWeights) -> Tensor:
    return weights.lambda1 * l1 + weights.lambda2 * contrast + weights.lambda3 * diff


class LossLog:
    """Append-only per-step loss record: step, l1, contrast, diff, total."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "a", encoding="utf-8")

    def log(self, step: int, l1: float, contrast: float, diff: float, total: float):
        self._fh.write(f"{step}\t{l1:.6f}\t{contrast:.6f}\t{diff:.6f}\t{total:.6f}\n")
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @staticmethod
    def read(path) -> np.ndarray:
        """Parse a loss log into an (n, 5) array of step and loss columns."""
        rows = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                parts = line.split("\t")
                if len(parts) == 5:
                    rows.append([float(p) for p in parts])
        return np.asarray(rows)
