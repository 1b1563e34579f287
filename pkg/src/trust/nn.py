"""Parameter containers and the transformer building blocks shared by the
generator and the downstream classifier."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import DimensionError


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class Module:
    """Walks instance attributes in definition order to name parameters."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            yield from _walk(val, f"{prefix}{key}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f"missing parameters: {', '.join(missing[:5])}")
        for name, p in own.items():
            shape = np.shape(state[name])
            if shape != p.shape:
                raise DimensionError(f"{name}: stored shape {shape} != model shape {p.shape}")
        for name, p in own.items():
            p.data = np.asarray(state[name]).astype(p.dtype, copy=True)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _walk(val, name: str):
    if isinstance(val, Tensor):
        yield name, val
    elif isinstance(val, Module):
        yield from val.named_parameters(name + ".")
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _walk(item, f"{name}.{i}")


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, dtype=np.float32, bias: bool = True):
        self.weight = xavier_uniform(rng, (fan_in, fan_out), fan_in, fan_out, dtype)
        self.bias = zeros((fan_out,), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ag.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32, eps: float = 1e-5):
        self.gain = ones((d,), dtype)
        self.bias = zeros((d,), dtype)
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layernorm(x, self.gain, self.bias, self._eps)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, t, d = x.shape
    x = ag.reshape(x, (*lead, t, heads, d // heads))
    n = len(lead)
    return ag.transpose(x, (*range(n), n + 1, n, n + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, t, dh = x.shape
    n = len(lead)
    x = ag.transpose(x, (*range(n), n + 1, n, n + 2))
    return ag.reshape(x, (*lead, t, h * dh))


class TransformerLayer(Module):
    """Pre-norm self-attention block followed by a GELU MLP."""

    def __init__(self, d: int, heads: int, expansion: int, rng: np.random.Generator, dtype=np.float32):
        if d % heads:
            raise DimensionError(f"width {d} is not divisible by {heads} heads")
        self.ln1 = LayerNorm(d, dtype)
        self.q = Linear(d, d, rng, dtype)
        self.k = Linear(d, d, rng, dtype)
        self.v = Linear(d, d, rng, dtype)
        self.o = Linear(d, d, rng, dtype)
        self.ln2 = LayerNorm(d, dtype)
        self.fc1 = Linear(d, d * expansion, rng, dtype)
        self.fc2 = Linear(d * expansion, d, rng, dtype)
        self._heads = heads

    def attention(self, x: Tensor) -> Tensor:
        h = self.ln1(x)
        q = _split_heads(self.q(h), self._heads)
        k = _split_heads(self.k(h), self._heads)
        v = _split_heads(self.v(h), self._heads)
        scale = 1.0 / math.sqrt(q.shape[-1])
        weights = ag.softmax_rows(ag.matmul(q, ag.swap_last(k)) * scale)
        return self.o(_merge_heads(ag.matmul(weights, v)))

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attention(x)
        return x + self.fc2(ag.gelu(self.fc1(self.ln2(x))))


def patchify(image: Tensor, p: int) -> Tensor:
    """[..., H, W, C] -> [..., N, P*P*C], patches in row-major order."""
    if image.ndim < 3:
        raise DimensionError(f"patchify: need [..., H, W, C], got {image.shape}")
    *lead, h, w, c = image.shape
    if p < 1 or h % p or w % p:
        raise DimensionError(f"patchify: patch size {p} does not divide {h}×{w}")
    n = len(lead)
    x = ag.reshape(image, (*lead, h // p, p, w // p, p, c))
    x = ag.transpose(x, (*range(n), n, n + 2, n + 1, n + 3, n + 4))
    return ag.reshape(x, (*lead, (h // p) * (w // p), p * p * c))


def unpatchify(tokens: Tensor, p: int, h: int, w: int) -> Tensor:
    *lead, count, width = tokens.shape
    if count != (h // p) * (w // p) or width % (p * p):
        raise DimensionError(f"unpatchify: {tokens.shape} is not a {h}×{w} grid of {p}×{p} patches")
    c = width // (p * p)
    n = len(lead)
    x = ag.reshape(tokens, (*lead, h // p, w // p, p, p, c))
    x = ag.transpose(x, (*range(n), n, n + 2, n + 1, n + 3, n + 4))
    return ag.reshape(x, (*lead, h, w, c))


class PatchEmbedder(Module):
    def __init__(self, image_size: int, patch_size: int, channels: int, d: int, rng: np.random.Generator, dtype=np.float32):
        if image_size % patch_size:
            raise DimensionError(f"patch size {patch_size} does not divide resolution {image_size}")
        self.patch_size = patch_size
        self.num_patches = (image_size // patch_size) ** 2
        self.proj = Linear(patch_size * patch_size * channels, d, rng, dtype)
        self.pos_embed = Tensor(
            rng.uniform(-0.01, 0.01, size=(self.num_patches, d)).astype(dtype), requires_grad=True
        )

    def __call__(self, image: Tensor) -> Tensor:
        tokens = self.proj(patchify(image, self.patch_size))
        if tokens.shape[-2] != self.num_patches:
            raise DimensionError(
                f"image yields {tokens.shape[-2]} patches, embedder expects {self.num_patches}"
            )
        return tokens + self.pos_embed
