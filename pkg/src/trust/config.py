"""Run configuration: one flat record of every hyperparameter, stored as
``key = value`` text with ``#`` comments."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Optional

from .data import DEFAULT_SPECS, DomainSpec
from .downstream import DownstreamConfig
from .errors import ConfigError
from .model import Architecture
from .objectives import LossWeights


@dataclass
class RunConfig:
    # generator
    resolution: int = 64
    patch_size: int = 8
    d: int = 64
    layers: int = 2
    heads: int = 4
    expansion: int = 2
    prompt_len: int = 16
    tr_mode: str = "scaled-softmax"
    style_batch: int = 6
    decoder_widths: tuple = (64, 32, 16)
    # objective
    w_content: float = 1.0
    w_style: float = 1.0
    w_mirror: float = 1.0
    extractor_widths: tuple = (16, 32, 64)
    # optimisation
    lr: float = 5e-4
    iterations: int = 2000
    warmup_steps: int = -1  # -1: 5% of iterations
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    labeled_per_class: int = 20
    labeled_prob: float = 0.25
    checkpoint_every: int = 0
    # downstream classifier
    ds_iterations: int = 2500
    ds_lr: float = 1e-3
    ds_momentum: float = 0.9
    ds_weight_decay: float = 5e-4
    ds_batch: int = 16
    ds_eval_every: int = 50
    ds_patch_size: int = 8
    ds_d: int = 64
    ds_layers: int = 3
    ds_heads: int = 4
    # data
    source_domain: str = "device-A"
    target_domain: str = "device-B"
    samples_per_domain: int = 1000
    split_ratio: float = 0.7
    # seeds
    model_seed: int = 0
    data_seed: int = 0
    extractor_seed: int = 1234
    eval_seed: int = 7
    downstream_seed: int = 0
    # paths
    data_dir: str = "data"
    out_dir: str = "runs/default"

    def __post_init__(self):
        self.decoder_widths = tuple(int(w) for w in self.decoder_widths)
        self.extractor_widths = tuple(int(w) for w in self.extractor_widths)
        self.validate()

    def validate(self) -> None:
        self.architecture()
        if self.iterations < 0 or self.warmup_steps < -1:
            raise ConfigError("iterations must be >= 0 and warmup_steps >= -1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.labeled_prob <= 1.0:
            raise ConfigError("labeled_prob must lie in [0, 1]")
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigError("split_ratio must lie in (0, 1)")
        self.loss_weights()
        for name in (self.source_domain, self.target_domain):
            if name not in DEFAULT_SPECS:
                raise ConfigError(f"unknown domain {name!r}; known: {', '.join(DEFAULT_SPECS)}")

    @property
    def warmup(self) -> int:
        return self.warmup_steps if self.warmup_steps >= 0 else int(round(0.05 * self.iterations))

    def architecture(self) -> Architecture:
        return Architecture(
            image_size=self.resolution, patch_size=self.patch_size, d=self.d, layers=self.layers,
            heads=self.heads, expansion=self.expansion, prompt_len=self.prompt_len,
            tr_mode=self.tr_mode, decoder_widths=self.decoder_widths, style_batch=self.style_batch,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.w_content, self.w_style, self.w_mirror)

    def downstream(self) -> DownstreamConfig:
        return DownstreamConfig(
            iterations=self.ds_iterations, lr=self.ds_lr, momentum=self.ds_momentum,
            weight_decay=self.ds_weight_decay, batch_size=self.ds_batch, eval_every=self.ds_eval_every,
            patch_size=self.ds_patch_size, d=self.ds_d, layers=self.ds_layers, heads=self.ds_heads,
            seed=self.downstream_seed,
        )

    def domain_specs(self) -> tuple[DomainSpec, DomainSpec]:
        return DEFAULT_SPECS[self.source_domain], DEFAULT_SPECS[self.target_domain]

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # -- text form ----------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, tuple):
                val = ",".join(str(v) for v in val)
            elif isinstance(val, float):
                val = repr(val)
            lines.append(f"{f.name} = {val}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: Optional["RunConfig"] = None) -> "RunConfig":
        pairs = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value, got {raw.strip()!r}")
            key, val = line.split("=", 1)
            pairs.append(f"{key.strip()}={val.strip()}")
        return (base or cls()).with_overrides(pairs)

    def with_overrides(self, assignments: Iterable[str]) -> "RunConfig":
        """Apply ``key=value`` strings, converting to each field's declared type."""
        types = {f.name: f.type for f in fields(self)}
        changes = {}
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, val = (s.strip() for s in item.split("=", 1))
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            changes[key] = _convert(key, val, types[key])
        return self.replace(**changes)

    @classmethod
    def load(cls, path, overrides: Iterable[str] = ()) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text).with_overrides(overrides)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def _convert(key: str, val: str, typ: str):
    try:
        if typ == "int":
            return int(val)
        if typ == "float":
            return float(val)
        if typ == "tuple":
            return tuple(int(v) for v in val.split(",") if v.strip())
        return val
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {val!r} as {typ}") from None


PRESETS = {
    "desk": RunConfig(),
    "full": RunConfig(
        resolution=256, patch_size=8, layers=3, prompt_len=1024, style_batch=6,
        iterations=20000, lr=5e-4, decoder_widths=(64, 32, 16),
    ),
    "tiny": RunConfig(
        resolution=16, patch_size=4, d=8, layers=2, heads=2, prompt_len=2, style_batch=2,
        decoder_widths=(8, 8), extractor_widths=(4, 8, 8), iterations=20, samples_per_domain=40,
        labeled_per_class=4, ds_iterations=20, ds_patch_size=4, ds_d=8, ds_layers=1, ds_heads=2,
        ds_eval_every=10,
    ),
}


def preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; known: {', '.join(PRESETS)}")
    return PRESETS[name].replace()
