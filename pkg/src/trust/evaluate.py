"""Three-arm evaluation (raw source, translated source, target ceiling) and
image/saliency/projection export."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from . import autograd as ag
from .autograd import Tensor
from .data import Dataset
from .downstream import classify, embed_2d, extract_features, saliency_map
from .metrics import MetricsReport, accuracy, auc
from .model import TrustModel
from .objectives import FeatureExtractor, StyleStats, style_distance

ARMS = ("raw-source", "translated", "target")


def translate_images(model: TrustModel, images: np.ndarray, style_source: np.ndarray, seed: int) -> np.ndarray:
    """Translate each [H, W, 3] image with its own seeded style pool drawn
    from ``style_source`` (an [m, H, W, 3] stack)."""
    rng = np.random.default_rng(seed)
    b = model.arch.style_batch
    out = np.empty(images.shape, dtype=np.float32)
    with ag.no_grad():
        for i in range(len(images)):
            pool = rng.choice(len(style_source), size=b, replace=False)
            out[i] = model.translate(Tensor(images[i]), Tensor(style_source[pool])).data
    return out


def _report(model_ds, images: np.ndarray, labels: np.ndarray, arm: str, domain: str, tr_mode=None) -> MetricsReport:
    probs = classify(model_ds, images)
    try:
        score = auc(probs[:, 1], labels)
    except ValueError:
        score = None
    return MetricsReport(accuracy(probs, labels), score, len(labels), arm, domain, tr_mode=tr_mode)


def evaluate(
    model: TrustModel,
    source_test: Dataset,
    target_test: Dataset,
    target_train: Dataset,
    downstream,
    eval_seed: int = 7,
    extractor: Optional[FeatureExtractor] = None,
    out_path=None,
) -> dict:
    """Downstream metrics on raw source test, translated source test and
    target test, plus the style-statistics distance of raw and translated
    source test to the target train set."""
    src = source_test.model_inputs()
    tgt_train = target_train.model_inputs()
    translated = translate_images(model, src, tgt_train, eval_seed)
    mode = model.arch.tr_mode
    reports = {
        "raw-source": _report(downstream, src, source_test.labels, "raw-source", source_test.domain),
        "translated": _report(downstream, translated, source_test.labels, "translated", source_test.domain, mode),
        "target": _report(downstream, target_test.model_inputs(), target_test.labels, "target", target_test.domain),
    }
    result = {"tr_mode": mode, "prompt_len": model.arch.prompt_len,
              "arms": {k: v.to_dict() for k, v in reports.items()}}
    if extractor is not None:
        stats = StyleStats.from_images(Tensor(tgt_train), extractor)
        result["style_distance"] = {
            "raw-source": style_distance(src, stats, extractor),
            "translated": style_distance(translated, stats, extractor),
        }
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(json.dumps(result, indent=2, sort_keys=True))
    return result


def _png(arr: np.ndarray, path: Path) -> None:
    img = np.round(np.clip(arr, 0.0, 1.0) * 255).astype(np.uint8)
    Image.fromarray(img, mode="RGB" if img.ndim == 3 else "L").save(path)


def _overlay(image: np.ndarray, heat: np.ndarray) -> np.ndarray:
    gray = image.mean(axis=-1) if image.ndim == 3 else image
    rgb = np.stack([gray, gray, gray], axis=-1) * 0.6
    rgb[..., 0] += 0.4 * heat
    return rgb


def translate_batch(
    model: TrustModel,
    source: Dataset,
    style_source: Dataset,
    seed: int,
    out_dir,
    downstream=None,
    saliency: bool = True,
) -> np.ndarray:
    """Write translated PNGs; with a downstream model also saliency overlays
    and a 2-D projection CSV of its features for raw and translated arms."""
    out = Path(out_dir)
    (out / "translated").mkdir(parents=True, exist_ok=True)
    src = source.model_inputs()
    translated = translate_images(model, src, style_source.model_inputs(), seed)
    for sid, img in zip(source.ids, translated):
        _png(img, out / "translated" / f"{int(sid):04d}.png")
    if downstream is None:
        return translated
    if saliency:
        (out / "saliency").mkdir(exist_ok=True)
        for sid, label, raw, tr in zip(source.ids, source.labels, src, translated):
            for arm, img in (("raw-source", raw), ("translated", tr)):
                heat = saliency_map(downstream, img, int(label))
                _png(_overlay(img, heat), out / "saliency" / f"{int(sid):04d}_{arm}.png")
    feats = np.concatenate([extract_features(downstream, src), extract_features(downstream, translated)])
    points = embed_2d(feats)
    n = len(source)
    with open(out / "projection.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "domain", "class", "arm", "x", "y"])
        for j, (px, py) in enumerate(points):
            i = j % n
            arm = "raw-source" if j < n else "translated"
            writer.writerow([int(source.ids[i]), source.domain, int(source.labels[i]), arm, f"{px:.6f}", f"{py:.6f}"])
    return translated
