"""Command-line entry point: ``trust <subcommand> [--config PATH] [--set k=v ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import PRESETS, RunConfig, preset
from .data import generate_domain, load_dataset, save_dataset, split, split_dir
from .downstream import DownstreamModel, train_downstream
from .errors import FormatError, TrustError
from .evaluate import evaluate, translate_batch
from .model import TrustModel, count_parameters, flops_estimate
from .objectives import FeatureExtractor
from .train import model_from_checkpoint, train_trust

logger = logging.getLogger("trust")


def _config(args) -> RunConfig:
    if args.config:
        cfg = RunConfig.load(args.config)
    else:
        cfg = preset(args.preset)
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides += [f"model_seed={args.seed}", f"data_seed={args.seed}"]
    if args.out:
        overrides.append(f"out_dir={args.out}")
    return cfg.with_overrides(overrides)


def _load_split(cfg: RunConfig, domain: str, name: str):
    return load_dataset(split_dir(cfg.data_dir, domain, name), domain=domain)


def save_downstream(model: DownstreamModel, cfg: RunConfig, path) -> Path:
    params = {f"downstream.{k}": v for k, v in model.state_dict().items()}
    return save_checkpoint(Checkpoint(cfg, params, 0, cfg.extractor_seed), path)


def load_downstream(path) -> DownstreamModel:
    ckpt = load_checkpoint(path)
    cfg = ckpt.config
    model = DownstreamModel(cfg.resolution, cfg.ds_patch_size, cfg.ds_d, cfg.ds_layers, cfg.ds_heads,
                            seed=cfg.downstream_seed)
    try:
        model.load_state_dict(ckpt.model_state("downstream."))
    except KeyError as exc:
        raise FormatError(f"{path}: not a downstream checkpoint ({exc})") from None
    return model.freeze(domain=cfg.target_domain)


def cmd_gen_data(cfg: RunConfig) -> None:
    for spec in cfg.domain_specs():
        train, test = split(generate_domain(spec, cfg.samples_per_domain, cfg.resolution), cfg.split_ratio, cfg.data_seed)
        for name, ds in (("train", train), ("test", test)):
            save_dataset(ds, split_dir(cfg.data_dir, spec.name, name))
        print(f"{spec.name}: {len(train)} train / {len(test)} test -> {Path(cfg.data_dir) / spec.name}")


def cmd_train_downstream(cfg: RunConfig) -> None:
    train = _load_split(cfg, cfg.target_domain, "train")
    test = _load_split(cfg, cfg.target_domain, "test")
    model = train_downstream(train, test, cfg.downstream())
    path = save_downstream(model, cfg, Path(cfg.out_dir) / "downstream.trst")
    print(f"downstream saved to {path}")


def cmd_train_trust(cfg: RunConfig, downstream_path) -> None:
    downstream = load_downstream(downstream_path or Path(cfg.out_dir) / "downstream.trst")
    source = _load_split(cfg, cfg.source_domain, "train")
    target = _load_split(cfg, cfg.target_domain, "train")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.txt")
    train_trust(cfg, source, target, downstream, out_dir=out)
    print(f"checkpoint and train_log.jsonl written to {out}")


def cmd_eval(cfg: RunConfig, checkpoint_path, downstream_path) -> None:
    out = Path(cfg.out_dir)
    ckpt = load_checkpoint(checkpoint_path or out / "checkpoint.trst")
    model = model_from_checkpoint(ckpt)
    run_cfg = ckpt.config
    downstream = load_downstream(downstream_path or out / "downstream.trst")
    result = evaluate(
        model,
        _load_split(cfg, run_cfg.source_domain, "test"),
        _load_split(cfg, run_cfg.target_domain, "test"),
        _load_split(cfg, run_cfg.target_domain, "train"),
        downstream,
        eval_seed=run_cfg.eval_seed,
        extractor=FeatureExtractor(run_cfg.resolution, run_cfg.extractor_widths, seed=ckpt.extractor_seed),
        out_path=out / "metrics.json",
    )
    print(json.dumps(result, indent=2, sort_keys=True))


def cmd_translate(cfg: RunConfig, checkpoint_path, downstream_path, images_dir) -> None:
    out = Path(cfg.out_dir)
    ckpt = load_checkpoint(checkpoint_path or out / "checkpoint.trst")
    model = model_from_checkpoint(ckpt)
    run_cfg = ckpt.config
    source = load_dataset(images_dir) if images_dir else _load_split(cfg, run_cfg.source_domain, "test")
    style = _load_split(cfg, run_cfg.target_domain, "train")
    downstream = None
    ds_path = Path(downstream_path) if downstream_path else out / "downstream.trst"
    if ds_path.exists():
        downstream = load_downstream(ds_path)
    translate_batch(model, source, style, run_cfg.eval_seed, out / "translate", downstream=downstream)
    print(f"{len(source)} images written to {out / 'translate'}")


def cmd_inspect(cfg: RunConfig) -> None:
    arch = cfg.architecture()
    flops = flops_estimate(arch)
    print(f"parameters: {count_parameters(TrustModel(arch, seed=cfg.model_seed))}")
    for key, val in flops.items():
        print(f"macs.{key}: {val}")
    print(f"gflops (2 x MACs): {2 * flops['total'] / 1e9:.3f}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trust", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--preset", default="desk", choices=sorted(PRESETS), help="base config when --config is absent")
    common.add_argument("--out", help="output directory (sets out_dir)")
    common.add_argument("--seed", type=int, help="sets model_seed and data_seed")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate the two-device synthetic corpus")
    sub.add_parser("train-downstream", parents=[common], help="train and freeze the target-domain classifier")
    p = sub.add_parser("train-trust", parents=[common], help="train the translator")
    p.add_argument("--downstream")
    p = sub.add_parser("eval", parents=[common], help="three-arm evaluation to metrics.json")
    p.add_argument("--checkpoint")
    p.add_argument("--downstream")
    p = sub.add_parser("translate", parents=[common], help="export translated images, saliency and projections")
    p.add_argument("--checkpoint")
    p.add_argument("--downstream")
    p.add_argument("--images", help="dataset directory (images/, masks/, labels.csv)")
    sub.add_parser("inspect", parents=[common], help="print parameter count and MAC estimate")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
        if args.command == "gen-data":
            cmd_gen_data(cfg)
        elif args.command == "train-downstream":
            cmd_train_downstream(cfg)
        elif args.command == "train-trust":
            cmd_train_trust(cfg, args.downstream)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint, args.downstream)
        elif args.command == "translate":
            cmd_translate(cfg, args.checkpoint, args.downstream, args.images)
        elif args.command == "inspect":
            cmd_inspect(cfg)
    except TrustError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
