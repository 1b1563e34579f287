"""Translator training: Adam with linear warm-up, one source image and a
fresh target style pool per iteration."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .checkpoint import Checkpoint, save_checkpoint
from .config import RunConfig
from .data import Dataset, select_labeled
from .errors import ConfigError, ContractError, FormatError
from .model import TrustModel
from .objectives import FeatureExtractor, StyleStats, total_loss

logger = logging.getLogger(__name__)


def warmup_lr(step: int, peak: float, warmup_steps: int) -> float:
    """Linear ramp reaching ``peak`` at ``warmup_steps``, constant afterwards."""
    if warmup_steps <= 0 or step >= warmup_steps:
        return peak
    return peak * (step + 1) / warmup_steps


class Adam:
    def __init__(self, named_params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= (lr / corr1) * m / (np.sqrt(v / corr2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, state: dict[str, np.ndarray], t: int) -> None:
        for name in self.m:
            self.m[name] = state[f"m.{name}"].astype(self.m[name].dtype)
            self.v[name] = state[f"v.{name}"].astype(self.v[name].dtype)
        self.t = t


def make_checkpoint(cfg: RunConfig, model: TrustModel, iteration: int, optimizer: Optional[Adam] = None) -> Checkpoint:
    params = {f"model.{k}": v.copy() for k, v in model.state_dict().items()}
    return Checkpoint(cfg, params, iteration, cfg.extractor_seed, optimizer.state() if optimizer else {})


def model_from_checkpoint(ckpt: Checkpoint) -> TrustModel:
    model = TrustModel(ckpt.config.architecture(), seed=ckpt.config.model_seed)
    try:
        model.load_state_dict(ckpt.model_state())
    except KeyError as exc:
        raise FormatError(f"checkpoint is missing entries: {exc}") from None
    return model


def train_trust(
    cfg: RunConfig,
    source: Dataset,
    target: Dataset,
    downstream,
    out_dir=None,
    on_step: Optional[Callable[[dict], None]] = None,
) -> tuple[TrustModel, Checkpoint, list[dict]]:
    """Optimise the translator on ``source`` (train split) toward the style of
    ``target`` (train split) under a frozen ``downstream`` model.

    Returns the trained model, its final checkpoint and the per-iteration log.
    When ``out_dir`` is given, the log is written there as JSON lines and
    checkpoints as ``checkpoint.trst`` (plus numbered ones at the cadence).
    """
    if not getattr(downstream, "frozen", False):
        raise ContractError("train_trust requires a frozen downstream model")
    if len(target) < cfg.style_batch:
        raise ConfigError(f"target train set has {len(target)} images, fewer than the style pool B={cfg.style_batch}")
    model = TrustModel(cfg.architecture(), seed=cfg.model_seed)
    extractor = FeatureExtractor(cfg.resolution, cfg.extractor_widths, seed=cfg.extractor_seed)
    weights = cfg.loss_weights()
    rng = np.random.default_rng(cfg.data_seed)
    labeled = select_labeled(source, cfg.labeled_per_class, seed=cfg.data_seed) if cfg.labeled_per_class else np.array([], dtype=np.int64)
    unlabeled = np.setdiff1d(np.arange(len(source)), labeled)
    if unlabeled.size == 0:
        unlabeled = labeled
    src = source.model_inputs()
    tgt = target.model_inputs()
    opt = Adam(model.named_parameters(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "w")
    log: list[dict] = []
    warm = cfg.warmup
    try:
        for it in range(cfg.iterations):
            lr = warmup_lr(it, cfg.lr, warm)
            use_label = labeled.size > 0 and rng.random() < cfg.labeled_prob
            i = int(rng.choice(labeled if use_label else unlabeled))
            label = int(source.labels[i]) if use_label else None
            pool = rng.choice(len(tgt), size=cfg.style_batch, replace=False)
            x = Tensor(src[i])
            style = Tensor(tgt[pool])
            translated = model.translate(x, style)
            loss, terms = total_loss(
                translated, x, StyleStats.from_images(style, extractor), label, extractor, downstream, weights
            )
            model.zero_grad()
            ag.backward(loss)
            opt.step(lr)
            record = {"iter": it, **terms, "lr": lr, "labeled": use_label}
            log.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
            if on_step is not None:
                on_step(record)
            if out is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(make_checkpoint(cfg, model, it + 1, opt), out / f"checkpoint_{it + 1:06d}.trst")
            if it % 100 == 0:
                logger.info("iter %d total=%.4f lc=%.4f ls=%.4f lbm=%.4f lr=%.2e",
                            it, terms["total"], terms["lc"], terms["ls"], terms["lbm"], lr)
    finally:
        if log_fh is not None:
            log_fh.close()
    ckpt = make_checkpoint(cfg, model, cfg.iterations, opt)
    if out is not None:
        save_checkpoint(ckpt, out / "checkpoint.trst")
    return model, ckpt, log
