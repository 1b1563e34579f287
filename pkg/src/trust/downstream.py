"""The frozen task network: a small patch-transformer classifier, its SGD
training routine, token-space Grad-CAM and a 2-D feature projection."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ContractError, DegenerateProjectionError, DimensionError
from .metrics import accuracy
from .nn import LayerNorm, Linear, Module, PatchEmbedder, TransformerLayer

logger = logging.getLogger(__name__)


class DownstreamModel(Module):
    def __init__(self, image_size: int = 64, patch_size: int = 8, d: int = 64, layers: int = 3,
                 heads: int = 4, expansion: int = 2, num_classes: int = 2, channels: int = 3,
                 seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.embed = PatchEmbedder(image_size, patch_size, channels, d, rng, dtype)
        self.layers = [TransformerLayer(d, heads, expansion, rng, dtype) for _ in range(layers)]
        self.norm = LayerNorm(d, dtype)
        self.head = Linear(d, num_classes, rng, dtype)
        self.image_size = image_size
        self.channels = channels
        self.num_classes = num_classes
        self.frozen = False
        self.domain: Optional[str] = None

    def freeze(self, domain: Optional[str] = None) -> "DownstreamModel":
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
            p.data = np.array(p.data)
            p.data.setflags(write=False)
        self.frozen = True
        if domain is not None:
            self.domain = domain
        return self

    def _check(self, image: Tensor) -> None:
        expected = (self.image_size, self.image_size, self.channels)
        if image.ndim not in (3, 4) or image.shape[-3:] != expected:
            raise DimensionError(f"downstream expects {expected} input, got {image.shape}")

    def tokens(self, image: Tensor) -> Tensor:
        self._check(image)
        x = self.embed(image)
        for layer in self.layers:
            x = layer(x)
        return x

    def pooled(self, tokens: Tensor) -> Tensor:
        return ag.mean(self.norm(tokens), axis=-2)

    def features(self, image: Tensor) -> Tensor:
        return self.pooled(self.tokens(image))

    def classify_features(self, features: Tensor) -> Tensor:
        """Linear head over pooled features; a single [d] vector gives [K] logits."""
        if features.ndim == 1:
            return ag.reshape(self.head(ag.reshape(features, (1, features.shape[0]))), (self.num_classes,))
        return self.head(features)

    def logits(self, image: Tensor) -> Tensor:
        return self.classify_features(self.features(image))

    def fingerprint(self) -> bytes:
        return b"".join(p.data.tobytes() for p in self.parameters())


def classify(model: DownstreamModel, images, batch_size: int = 64) -> np.ndarray:
    """Class probabilities for one [H, W, C] image or an [n, H, W, C] stack."""
    arr = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float32)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    out = []
    with ag.no_grad():
        for i in range(0, arr.shape[0], batch_size):
            out.append(ag.softmax_rows(model.logits(Tensor(arr[i : i + batch_size]))).data)
    probs = np.concatenate(out, axis=0)
    return probs[0] if single else probs


def extract_features(model: DownstreamModel, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    with ag.no_grad():
        return np.concatenate(
            [model.features(Tensor(images[i : i + batch_size])).data for i in range(0, len(images), batch_size)]
        )


@dataclass
class DownstreamConfig:
    """SGD settings; lr, momentum, weight decay and batch follow the published recipe."""

    iterations: int = 2500
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 16
    eval_every: int = 50
    patch_size: int = 8
    d: int = 64
    layers: int = 3
    heads: int = 4
    augment: bool = True
    seed: int = 0


def _dihedral(batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random flips and transposes per image; lesion class is invariant to them."""
    out = batch.copy()
    for i in range(len(out)):
        img = out[i]
        if rng.random() < 0.5:
            img = img[::-1]
        if rng.random() < 0.5:
            img = img[:, ::-1]
        if rng.random() < 0.5:
            img = img.transpose(1, 0, 2)
        out[i] = img
    return out


def train_downstream(train, test, cfg: DownstreamConfig = DownstreamConfig()) -> DownstreamModel:
    """Fit on labelled target-domain data, keep the weights with the best
    accuracy on ``test`` and return the model frozen."""
    if len(np.unique(train.labels)) < 2:
        raise ConfigError("downstream training needs at least two classes")
    model = DownstreamModel(train.resolution, cfg.patch_size, cfg.d, cfg.layers, cfg.heads,
                            num_classes=int(max(train.labels.max(), test.labels.max())) + 1, seed=cfg.seed)
    params = model.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    rng = np.random.default_rng(cfg.seed + 1)
    x_train = train.model_inputs()
    x_test = test.model_inputs()
    order = rng.permutation(len(train))
    cursor = 0
    best_acc, best_state = -1.0, None
    for it in range(1, cfg.iterations + 1):
        if cursor + cfg.batch_size > len(order):
            order, cursor = rng.permutation(len(train)), 0
        idx = order[cursor : cursor + cfg.batch_size]
        cursor += cfg.batch_size
        batch = _dihedral(x_train[idx], rng) if cfg.augment else x_train[idx]
        model.zero_grad()
        loss = ag.cross_entropy(model.logits(Tensor(batch)), train.labels[idx])
        ag.backward(loss)
        for p, v in zip(params, velocity):
            g = p.grad + cfg.weight_decay * p.data
            v *= cfg.momentum
            v += g
            p.data -= cfg.lr * v
        if it % cfg.eval_every == 0 or it == cfg.iterations:
            acc = accuracy(classify(model, x_test), test.labels)
            if acc > best_acc:
                best_acc = acc
                best_state = {k: v.copy() for k, v in model.state_dict().items()}
            logger.debug("downstream it=%d loss=%.4f test_acc=%.3f", it, loss.item(), acc)
    model.load_state_dict(best_state)
    logger.info("downstream best target-test accuracy %.3f", best_acc)
    return model.freeze(domain=train.domain)


def saliency_map(model: DownstreamModel, image, class_index: int) -> np.ndarray:
    """Token-space Grad-CAM: channel mean of gradient × activation of the class
    log-probability at the normalised output of the last transformer layer,
    rectified, nearest-upsampled to H×W and max-normalised."""
    if not model.frozen:
        raise ContractError("saliency maps are computed on a frozen model")
    if not 0 <= class_index < model.num_classes:
        raise ContractError(f"class index {class_index} outside [0, {model.num_classes})")
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float32)
    x = Tensor(arr.copy(), requires_grad=True)
    # Taken after the final layernorm: grad . act on the raw residual stream
    # is ~0 because layernorm is scale invariant. The target is the class
    # log-probability so the logit component shared by all classes cancels.
    normed = model.norm(model.tokens(x))
    logits = model.classify_features(ag.mean(normed, axis=-2))
    log_prob = ag.log_softmax(ag.reshape(logits, (1, model.num_classes)))
    ag.backward(ag.pick(log_prob, [class_index]))
    act, grad = normed.data, normed.grad
    if grad is None:
        grad = np.zeros_like(act)
    cam = np.maximum((grad * act).mean(axis=-1), 0.0)
    side = int(round(np.sqrt(cam.shape[0])))
    cam = cam.reshape(side, side)
    scale = model.image_size // side
    cam = cam.repeat(scale, axis=0).repeat(scale, axis=1)
    peak = cam.max()
    return (cam / peak if peak > 0 else cam).astype(np.float32)


def embed_2d(features) -> np.ndarray:
    """Project onto the top two principal axes of the centred features.

    Each axis is sign-fixed so that its largest-magnitude loading is positive.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ContractError("embed_2d needs at least three feature vectors")
    xc = x - x.mean(axis=0)
    if not np.any(np.abs(xc) > 1e-12):
        raise DegenerateProjectionError("embed_2d: features have zero variance")
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    axes = np.zeros((2, x.shape[1]))
    k = min(2, vt.shape[0])
    axes[:k] = vt[:k]
    for row in axes:
        j = np.argmax(np.abs(row))
        if row[j] < 0:
            row *= -1
    return xc @ axes.T
