"""The translation network: content and style encoders, token alignment and
the convolutional decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ContractError, DimensionError
from .nn import Linear, Module, PatchEmbedder, TransformerLayer, xavier_uniform, zeros

TR_MODES = ("literal", "scaled-softmax", "cross-attention-baseline", "identity")


@dataclass(frozen=True)
class Architecture:
    """Shape-determining hyperparameters of the generator."""

    image_size: int = 64
    patch_size: int = 8
    channels: int = 3
    d: int = 64
    layers: int = 2
    heads: int = 4
    expansion: int = 2
    prompt_len: int = 16
    tr_mode: str = "scaled-softmax"
    decoder_widths: tuple[int, ...] = (64, 32, 16)
    style_batch: int = 6

    def __post_init__(self):
        p = self.patch_size
        if p < 1 or p & (p - 1):
            raise ConfigError(f"patch size must be a power of two, got {p}")
        if self.image_size % p:
            raise ConfigError(f"resolution {self.image_size} is not divisible by patch size {p}")
        if len(self.decoder_widths) != int(math.log2(p)):
            raise ConfigError(
                f"decoder needs log2({p}) = {int(math.log2(p))} stage widths, got {len(self.decoder_widths)}"
            )
        if self.tr_mode not in TR_MODES:
            raise ConfigError(f"unknown tr_mode {self.tr_mode!r}; expected one of {', '.join(TR_MODES)}")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.prompt_len < 0 or self.layers < 1 or self.style_batch < 1:
            raise ConfigError("prompt_len >= 0, layers >= 1 and style_batch >= 1 are required")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


class Encoder(Module):
    """Patch embedding followed by a stack of transformer layers.

    When ``prompt_len`` is positive, each layer receives its own learnable
    prompt rows prepended to the token sequence; their outputs are dropped
    before the next layer so the result always has one row per patch.
    """

    def __init__(self, arch: Architecture, rng: np.random.Generator, dtype, prompt_len: int = 0):
        self.embed = PatchEmbedder(arch.image_size, arch.patch_size, arch.channels, arch.d, rng, dtype)
        self.layers = [TransformerLayer(arch.d, arch.heads, arch.expansion, rng, dtype) for _ in range(arch.layers)]
        self.prompts = [
            xavier_uniform(rng, (prompt_len, arch.d), prompt_len, arch.d, dtype) for _ in range(arch.layers)
        ] if prompt_len else []

    def __call__(self, image: Tensor, prompts: Optional[Sequence[Tensor]] = None) -> Tensor:
        prompts = self.prompts if prompts is None else prompts
        if prompts and len(prompts) != len(self.layers):
            raise ContractError(f"need one prompt set per layer ({len(self.layers)}), got {len(prompts)}")
        tokens = self.embed(image)
        n = tokens.shape[-2]
        d = tokens.shape[-1]
        for i, layer in enumerate(self.layers):
            if prompts and prompts[i].shape[0]:
                prompt = prompts[i]
                if prompt.ndim != 2 or prompt.shape[1] != d:
                    raise DimensionError(f"prompt set {i} has shape {prompt.shape}, token width is {d}")
                lp = prompt.shape[0]
                tokens = ag.rows(layer(ag.concat_tokens(prompt, tokens)), lp, lp + n)
            else:
                tokens = layer(tokens)
        return tokens


class CrossAttention(Module):
    """Learned-projection single-head cross attention, the ablation baseline."""

    def __init__(self, d: int, rng: np.random.Generator, dtype):
        self.q = Linear(d, d, rng, dtype)
        self.k = Linear(d, d, rng, dtype)
        self.v = Linear(d, d, rng, dtype)
        self.o = Linear(d, d, rng, dtype)

    def __call__(self, content: Tensor, style_flat: Tensor) -> Tensor:
        scale = 1.0 / math.sqrt(content.shape[-1])
        scores = ag.matmul(self.q(content), ag.swap_last(self.k(style_flat))) * scale
        return self.o(ag.matmul(ag.softmax_rows(scores), self.v(style_flat)))


def tr_align(content: Tensor, style: Tensor, mode: str, cross_attention: Optional[CrossAttention] = None) -> Tensor:
    """Fuse content tokens [.., N, d] with a style token pool [B, N, d].

    The pool is flattened batch-major to [B*N, d]; the correlation matrix is
    ``content @ pool.T``. ``literal`` aggregates with the raw correlations,
    ``scaled-softmax`` with row-softmax of correlations / sqrt(d). Both keep
    the residual path to ``content``.
    """
    if style.ndim != 3:
        raise DimensionError(f"style tokens must be [B, N, d], got {style.shape}")
    if content.shape[-1] != style.shape[-1]:
        raise DimensionError(f"token widths differ: content {content.shape}, style {style.shape}")
    if mode == "identity":
        return content
    b, n, d = style.shape
    flat = ag.reshape(style, (b * n, d))
    if mode == "cross-attention-baseline":
        if cross_attention is None:
            raise ContractError("cross-attention-baseline mode needs learned projections")
        return content + cross_attention(content, flat)
    corr = ag.matmul(content, ag.swap_last(flat))
    if mode == "literal":
        return content + ag.matmul(corr, flat)
    if mode == "scaled-softmax":
        weights = ag.softmax_rows(corr * (1.0 / math.sqrt(d)))
        return content + ag.matmul(weights, flat)
    raise ConfigError(f"unknown tr_mode {mode!r}")


class Decoder(Module):
    """Token grid -> image via (nearest x2, conv3x3, ReLU) stages and a sigmoid head."""

    def __init__(self, d: int, widths: Sequence[int], rng: np.random.Generator, dtype, out_channels: int = 3):
        self.stages = []
        c = d
        for w in widths:
            self.stages.append(
                [xavier_uniform(rng, (3, 3, c, w), 9 * c, 9 * w, dtype), zeros((w,), dtype)]
            )
            c = w
        self.head = [xavier_uniform(rng, (3, 3, c, out_channels), 9 * c, 9 * out_channels, dtype),
                     zeros((out_channels,), dtype)]

    def __call__(self, tokens: Tensor) -> Tensor:
        *lead, n, d = tokens.shape
        side = math.isqrt(n)
        if side * side != n:
            raise DimensionError(f"decoder needs a square token count, got {n}")
        x = ag.reshape(tokens, (*lead, side, side, d))
        for kernel, bias in self.stages:
            x = ag.relu(ag.conv2d(ag.upsample2x(x), kernel) + bias)
        kernel, bias = self.head
        return ag.sigmoid(ag.conv2d(x, kernel) + bias)


class TrustModel(Module):
    """Content branch with per-layer prompts, prompt-free style branch,
    token alignment and decoder. The two branches share no parameters."""

    def __init__(self, arch: Architecture, seed: int = 0, dtype=np.float32):
        self.arch = arch
        rng = np.random.default_rng(seed)
        self.content = Encoder(arch, rng, dtype, prompt_len=arch.prompt_len)
        self.style = Encoder(arch, rng, dtype)
        self.cross_attention = CrossAttention(arch.d, rng, dtype) if arch.tr_mode == "cross-attention-baseline" else None
        self.decoder = Decoder(arch.d, arch.decoder_widths, rng, dtype, out_channels=3)

    @property
    def prompts(self) -> list[Tensor]:
        return self.content.prompts

    def _check_image(self, image: Tensor) -> None:
        a = self.arch
        if image.ndim not in (3, 4) or image.shape[-3:] != (a.image_size, a.image_size, a.channels):
            raise DimensionError(
                f"expected {a.image_size}×{a.image_size}×{a.channels} input, got {image.shape}"
            )

    def encode_content(self, image: Tensor, prompts: Optional[Sequence[Tensor]] = None) -> Tensor:
        self._check_image(image)
        return self.content(image, prompts)

    def encode_style(self, batch: Tensor) -> Tensor:
        if batch.ndim != 4 or batch.shape[0] == 0:
            raise ContractError(f"style batch must be a non-empty [B, H, W, C] stack, got {batch.shape}")
        self._check_image(batch)
        return self.style(batch)

    def align(self, content: Tensor, style: Tensor) -> Tensor:
        return tr_align(content, style, self.arch.tr_mode, self.cross_attention)

    def decode(self, tokens: Tensor) -> Tensor:
        return self.decoder(tokens)

    def translate(self, source: Tensor, style_batch: Tensor) -> Tensor:
        """x_s (one image or a stack) and B style images -> translated image(s) in [0, 1]."""
        return self.decode(self.align(self.encode_content(source), self.encode_style(style_batch)))


def count_parameters(model: Module) -> int:
    return model.num_parameters()


def flops_estimate(arch: Architecture) -> dict[str, int]:
    """Closed-form multiply-accumulate count of one ``translate`` forward pass."""
    d, n, e = arch.d, arch.num_patches, arch.expansion
    b = arch.style_batch
    patch_in = arch.patch_size**2 * arch.channels

    def layer(t: int) -> int:
        return 4 * t * d * d + 2 * t * t * d + 2 * t * d * d * e

    counts = {
        "content_embed": n * patch_in * d,
        "content_layers": arch.layers * layer(n + arch.prompt_len),
        "style_embed": b * n * patch_in * d,
        "style_layers": b * arch.layers * layer(n),
    }
    bn = b * n
    if arch.tr_mode in ("literal", "scaled-softmax"):
        counts["tr"] = 2 * n * bn * d
    elif arch.tr_mode == "cross-attention-baseline":
        counts["tr"] = 2 * n * d * d + 2 * bn * d * d + 2 * n * bn * d
    else:
        counts["tr"] = 0
    side, c, dec = math.isqrt(n), d, 0
    for w in arch.decoder_widths:
        side *= 2
        dec += 9 * c * w * side * side
        c = w
    dec += 9 * c * 3 * side * side
    counts["decoder"] = dec
    counts["total"] = sum(counts.values())
    return counts
