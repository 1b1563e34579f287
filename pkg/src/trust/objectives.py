"""Content, style-statistics and behaviour-mirror losses over a fixed
random-feature conv pyramid and a frozen downstream classifier."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ContractError, DimensionError

STD_EPS = 1e-5


class FeatureExtractor:
    """Seeded stack of stride-2 3×3 conv + ReLU stages; never trained.

    Weights are read-only arrays, so accidental in-place updates raise.
    """

    def __init__(self, image_size: int, widths: Sequence[int] = (16, 32, 64), seed: int = 1234,
                 channels: int = 3, dtype=np.float32):
        self.image_size = image_size
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.kernels: list[Tensor] = []
        c = channels
        for w in widths:
            bound = math.sqrt(6.0 / (9 * c))
            arr = rng.uniform(-bound, bound, size=(3, 3, c, w)).astype(dtype)
            arr.setflags(write=False)
            self.kernels.append(Tensor(arr))
            c = w

    @property
    def num_stages(self) -> int:
        return len(self.kernels)

    def __call__(self, image: Tensor) -> list[Tensor]:
        if image.ndim not in (3, 4) or image.shape[-3] != self.image_size or image.shape[-2] != self.image_size:
            raise DimensionError(f"extractor expects {self.image_size}×{self.image_size} input, got {image.shape}")
        x = image - 0.5
        feats = []
        for k in self.kernels:
            x = ag.relu(ag.conv2d(x, k, stride=2))
            feats.append(x)
        return feats

    def fingerprint(self) -> bytes:
        return b"".join(k.data.tobytes() for k in self.kernels)


def _stats(feat: Tensor) -> tuple[Tensor, Tensor]:
    """Per-channel spatial mean and std of [..., h, w, c] features."""
    mu = ag.mean(feat, axis=(-3, -2), keepdims=True)
    centered = feat - mu
    var = ag.mean(centered * centered, axis=(-3, -2))
    return ag.reshape(mu, var.shape), ag.sqrt(var + STD_EPS)


@dataclass
class StyleStats:
    """Batch-averaged per-stage channel means and stds of a set of target images."""

    means: list[np.ndarray]
    stds: list[np.ndarray]

    @classmethod
    def from_images(cls, images: Tensor, extractor: FeatureExtractor) -> "StyleStats":
        if images.ndim == 3:
            images = ag.reshape(images, (1, *images.shape))
        if images.shape[0] == 0:
            raise ContractError("style statistics need at least one target image")
        means, stds = [], []
        with ag.no_grad():
            for feat in extractor(images):
                mu, sd = _stats(feat)
                means.append(mu.data.mean(axis=0))
                stds.append(sd.data.mean(axis=0))
        return cls(means, stds)


def content_features(image: Tensor, extractor: FeatureExtractor) -> Tensor:
    """Deepest-stage features of the mean-centred image, standardised per channel.

    The extractor is bias-free and ReLU is positively homogeneous, so this is
    invariant to a global brightness offset and a positive contrast gain.
    """
    centred = image - ag.mean(image, axis=(-3, -2, -1), keepdims=True) + 0.5
    feat = extractor(centred)[-1]
    mu, sd = _stats(feat)
    shape = (*mu.shape[:-1], 1, 1, mu.shape[-1])
    return (feat - ag.reshape(mu, shape)) / ag.reshape(sd, shape)


def content_loss(translated: Tensor, source: Tensor, extractor: FeatureExtractor) -> Tensor:
    """MSE between the normalised deepest-stage features of the two images.

    Raw deep features of a random extractor are dominated by global tone, which
    makes a flat, style-matched output score better than a faithful re-toning.
    """
    if translated.shape != source.shape:
        raise DimensionError(f"content_loss: {translated.shape} vs {source.shape}")
    diff = content_features(translated, extractor) - content_features(source, extractor)
    return ag.mean(diff * diff)


def style_loss(translated: Tensor, target, extractor: FeatureExtractor) -> Tensor:
    """Sum over stages of squared distances between channel means and stds.

    ``target`` is a non-empty image stack or precomputed :class:`StyleStats`.
    """
    stats = target if isinstance(target, StyleStats) else StyleStats.from_images(target, extractor)
    total = None
    for feat, mu_t, sd_t in zip(extractor(translated), stats.means, stats.stds):
        mu, sd = _stats(feat)
        dm = mu - Tensor(mu_t.astype(mu.dtype))
        ds = sd - Tensor(sd_t.astype(sd.dtype))
        term = ag.tsum(dm * dm) + ag.tsum(ds * ds)
        total = term if total is None else total + term
    return total


def style_distance(images: np.ndarray, stats: StyleStats, extractor: FeatureExtractor) -> float:
    """Non-differentiable mean per-stage style distance of each image to ``stats``,
    averaged over images."""
    with ag.no_grad():
        feats = extractor(Tensor(images.astype(np.float32)))
        per_image = np.zeros(images.shape[0])
        for feat, mu_t, sd_t in zip(feats, stats.means, stats.stds):
            mu, sd = _stats(feat)
            per_image += ((mu.data - mu_t) ** 2).sum(axis=-1) + ((sd.data - sd_t) ** 2).sum(axis=-1)
    return float((per_image / len(feats)).mean())


def behavior_mirror_loss(translated: Tensor, label: int, downstream) -> Tensor:
    """Cross-entropy of the frozen downstream prediction on the translated image."""
    if not getattr(downstream, "frozen", False):
        raise ContractError("behaviour mirror loss requires a frozen downstream model")
    if not 0 <= int(label) < downstream.num_classes:
        raise ContractError(f"label {label} outside [0, {downstream.num_classes})")
    logits = downstream.logits(translated)
    if logits.ndim == 1:
        logits = ag.reshape(logits, (1, logits.shape[0]))
    return ag.cross_entropy(logits, np.full(logits.shape[:-1], int(label)))


@dataclass(frozen=True)
class LossWeights:
    content: float = 1.0
    style: float = 1.0
    mirror: float = 1.0

    def __post_init__(self):
        if min(self.content, self.style, self.mirror) < 0:
            raise ConfigError(f"loss weights must be non-negative, got {self}")


def total_loss(
    translated: Tensor,
    source: Tensor,
    target,
    label: Optional[int],
    extractor: FeatureExtractor,
    downstream,
    weights: LossWeights = LossWeights(),
) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of the three terms plus a breakdown of the unweighted terms.

    The mirror term is skipped (reported as 0) when ``label`` is None. The
    breakdown's ``total`` is the weighted sum of its terms in double precision.
    """
    lc = content_loss(translated, source, extractor)
    ls = style_loss(translated, target, extractor)
    total = lc * weights.content + ls * weights.style
    terms = {"lc": lc.item(), "ls": ls.item(), "lbm": 0.0}
    if label is not None:
        lbm = behavior_mirror_loss(translated, label, downstream)
        total = total + lbm * weights.mirror
        terms["lbm"] = lbm.item()
    terms["total"] = weights.content * terms["lc"] + weights.style * terms["ls"] + weights.mirror * terms["lbm"]
    return total, terms
