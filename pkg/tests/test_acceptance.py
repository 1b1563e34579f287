"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 5, 6, 7 and 9 share a desk-scale experiment (64×64, d=64, L=2,
L_p=16, B=6, 2000 iterations, device-A to device-B) that takes several
minutes on one CPU core.
"""

import json
import struct
import time
import zlib
from dataclasses import dataclass

import numpy as np
import pytest

from trust import autograd as ag
from trust.autograd import Tensor, finite_diff_check
from trust.checkpoint import load_checkpoint, save_checkpoint, to_bytes
from trust.config import RunConfig, preset
from trust.data import build_corpus
from trust.downstream import DownstreamModel, train_downstream
from trust.errors import FormatError
from trust.evaluate import evaluate
from trust.metrics import auc, dice_iou
from trust.model import Architecture, TrustModel, flops_estimate, tr_align
from trust.objectives import FeatureExtractor, total_loss
from trust.train import make_checkpoint, model_from_checkpoint, train_trust


def report(capsys, number: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")


# -- shared desk experiment ---------------------------------------------------


@dataclass
class Desk:
    cfg: RunConfig
    source: dict
    target: dict
    downstream: DownstreamModel
    setup_seconds: float


@dataclass
class Run:
    ckpt: object
    log: list
    result: dict
    seconds: float
    fingerprint_before: bytes
    fingerprint_after: bytes


def run_experiment(desk: Desk, cfg: RunConfig) -> Run:
    before = desk.downstream.fingerprint()
    start = time.perf_counter()
    model, ckpt, log = train_trust(cfg, desk.source["train"], desk.target["train"], desk.downstream)
    extractor = FeatureExtractor(cfg.resolution, cfg.extractor_widths, seed=cfg.extractor_seed)
    result = evaluate(model, desk.source["test"], desk.target["test"], desk.target["train"], desk.downstream,
                      eval_seed=cfg.eval_seed, extractor=extractor)
    return Run(ckpt, log, result, time.perf_counter() - start, before, desk.downstream.fingerprint())


@pytest.fixture(scope="module")
def desk():
    cfg = preset("desk")
    start = time.perf_counter()
    src_spec, tgt_spec = cfg.domain_specs()
    corpus = build_corpus(src_spec, tgt_spec, n=cfg.samples_per_domain, resolution=cfg.resolution,
                          ratio=cfg.split_ratio, seed=cfg.data_seed)
    target = corpus[tgt_spec.name]
    downstream = train_downstream(target["train"], target["test"], cfg.downstream())
    return Desk(cfg, corpus[src_spec.name], target, downstream, time.perf_counter() - start)


@pytest.fixture(scope="module")
def desk_run(desk):
    return run_experiment(desk, desk.cfg)


# -- 1: gradient suite ---------------------------------------------------------


def _weighted(out: Tensor, seed: int = 5) -> Tensor:
    return ag.tsum(out * Tensor(np.random.default_rng(seed).normal(size=out.shape)))


def _op_cases(rng):
    def r(*shape):
        return Tensor(rng.uniform(-1, 1, size=shape))

    a34, b4, c34 = r(3, 4), r(4), r(3, 4)
    x = r(2, 3, 4)
    m1, m2 = r(2, 3, 4), r(4, 5)
    ln_x, ln_g, ln_b = r(3, 6), r(6), r(6)
    img, ker = r(2, 6, 6, 2), r(3, 3, 2, 3)
    tok_a, tok_b = r(2, 3), r(2, 4, 3)
    logits = r(4, 3)
    unary = {
        "neg": ag.neg, "power": lambda t: ag.power(t + 2.0, 3.0), "sqrt": lambda t: ag.sqrt(t + 2.0),
        "exp": ag.exp, "log": lambda t: ag.log(t + 2.0), "clip": lambda t: ag.clip(t, -0.55, 0.55),
        "relu": ag.relu, "gelu": ag.gelu, "sigmoid": ag.sigmoid,
        "tsum": lambda t: ag.tsum(t, axis=1, keepdims=True), "mean": lambda t: ag.mean(t, axis=0),
        "reshape": lambda t: ag.reshape(t, (2, 12)), "transpose": lambda t: ag.transpose(t, (2, 0, 1)),
        "swap_last": ag.swap_last, "rows": lambda t: ag.rows(t, 1, 3),
        "pick": lambda t: ag.pick(t, [[0, 1, 2], [3, 0, 1]]), "softmax": ag.softmax_rows,
        "log_softmax": ag.log_softmax, "upsample2x": ag.upsample2x,
    }
    cases = [(name, (lambda fn: lambda t: _weighted(fn(t)))(fn), x) for name, fn in unary.items()]
    cases += [
        ("add.a", lambda t: _weighted(t + b4), a34), ("add.b", lambda t: _weighted(a34 + t), b4),
        ("mul.a", lambda t: _weighted(t * c34), a34), ("mul.b", lambda t: _weighted(a34 * t), c34),
        ("div.a", lambda t: _weighted(ag.div(t, c34 + 3.0)), a34),
        ("div.b", lambda t: _weighted(ag.div(a34, t + 3.0)), c34),
        ("matmul.a", lambda t: _weighted(ag.matmul(t, m2)), m1), ("matmul.b", lambda t: _weighted(ag.matmul(m1, t)), m2),
        ("concat.a", lambda t: _weighted(ag.concat_tokens(t, tok_b)), tok_a),
        ("concat.b", lambda t: _weighted(ag.concat_tokens(tok_a, t)), tok_b),
        ("layernorm.x", lambda t: _weighted(ag.layernorm(t, ln_g, ln_b)), ln_x),
        ("layernorm.gain", lambda t: _weighted(ag.layernorm(ln_x, t, ln_b)), ln_g),
        ("layernorm.bias", lambda t: _weighted(ag.layernorm(ln_x, ln_g, t)), ln_b),
        ("cross_entropy", lambda t: ag.cross_entropy(t, [0, 2, 1, 1]), logits),
    ]
    for stride in (1, 2):
        cases.append((f"conv2d.s{stride}.x", (lambda s: lambda t: _weighted(ag.conv2d(t, ker, s)))(stride), img))
        cases.append((f"conv2d.s{stride}.k", (lambda s: lambda t: _weighted(ag.conv2d(img, t, s)))(stride), ker))
    return cases


def test_criterion_01_gradient_suite(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    errors = {name: finite_diff_check(f, point) for name, f, point in _op_cases(rng)}

    arch = dict(image_size=16, patch_size=4, d=8, layers=2, heads=2, prompt_len=2, decoder_widths=(8, 8), style_batch=2)
    extractor = FeatureExtractor(16, (4, 8, 8), seed=3, dtype=np.float64)
    downstream = DownstreamModel(16, 4, 8, 1, 2, seed=0, dtype=np.float64).freeze()
    source = Tensor(rng.uniform(size=(16, 16, 3)))
    style = Tensor(rng.uniform(size=(2, 16, 16, 3)))
    for mode in ("scaled-softmax", "literal", "cross-attention-baseline"):
        model = TrustModel(Architecture(**arch, tr_mode=mode), seed=1, dtype=np.float64)

        def pipeline(point, model=model):
            img = point if point.shape == source.shape else source
            return total_loss(model.translate(img, style), source, Tensor(style.data), 1, extractor, downstream)[0]

        coords = rng.choice(source.size, size=64, replace=False)
        errors[f"pipeline[{mode}].image"] = finite_diff_check(pipeline, Tensor(source.data.copy()), coords=coords)
        for name, p in model.named_parameters():
            coords = rng.choice(p.size, size=min(p.size, 4), replace=False)
            errors[f"pipeline[{mode}].{name}"] = finite_diff_check(pipeline, p, coords=coords)
    worst_name = max(errors, key=errors.get)
    seconds = time.perf_counter() - start
    ok = errors[worst_name] <= 1e-4 and seconds <= 120
    report(capsys, 1, ok, f"{len(errors)} checks, max rel err {errors[worst_name]:.2e} ({worst_name}), {seconds:.1f}s")
    assert ok


# -- 2, 3: token alignment -----------------------------------------------------


def _brute_force_literal(fs, ft):
    b, n, d = ft.shape
    flat = [ft[k, t] for k in range(b) for t in range(n)]
    out = fs.copy()
    for i in range(fs.shape[0]):
        for tok in flat:
            m_ij = sum(fs[i, c] * tok[c] for c in range(d))
            for c in range(d):
                out[i, c] += m_ij * tok[c]
    return out


def _instance(rng):
    n, b, d = (int(v) for v in rng.integers(1, [9, 5, 9]))
    return rng.normal(size=(n, d)), rng.normal(size=(b, n, d))


def test_criterion_02_tr_oracle(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        fs, ft = _instance(rng)
        got = tr_align(Tensor(fs), Tensor(ft), "literal").data
        worst = max(worst, float(np.abs(got - _brute_force_literal(fs, ft)).max()))
    seconds = time.perf_counter() - start
    ok = worst <= 1e-6 and seconds <= 30
    report(capsys, 2, ok, f"1000 instances, max abs diff {worst:.2e}, {seconds:.1f}s")
    assert ok


def test_criterion_03_tr_permutation_invariance(capsys):
    rng = np.random.default_rng(8)
    worst = {"literal": 0.0, "scaled-softmax": 0.0}
    for _ in range(200):
        fs, ft = _instance(rng)
        b, n, d = ft.shape
        shuffled = ft.reshape(b * n, d)[rng.permutation(b * n)].reshape(b, n, d)
        for mode in worst:
            a = tr_align(Tensor(fs), Tensor(ft), mode).data
            c = tr_align(Tensor(fs), Tensor(shuffled), mode).data
            worst[mode] = max(worst[mode], float(np.abs(a - c).max()))
    ok = max(worst.values()) <= 1e-6
    report(capsys, 3, ok, "200 instances, max L-inf change " + ", ".join(f"{k} {v:.2e}" for k, v in worst.items()))
    assert ok


# -- 4: prompt contract --------------------------------------------------------


def test_criterion_04_prompt_contract(capsys):
    rng = np.random.default_rng(9)
    details, ok = [], True
    for lp in (0, 1, 16):
        arch = Architecture(image_size=16, patch_size=4, d=8, layers=2, heads=2, prompt_len=lp,
                            decoder_widths=(8, 8), style_batch=2)
        model = TrustModel(arch, seed=0, dtype=np.float64)
        x = Tensor(rng.uniform(size=(16, 16, 3)))
        tokens = model.encode_content(x)
        rows_ok = tokens.shape == (arch.num_patches, arch.d)
        out = model.translate(x, Tensor(rng.uniform(size=(2, 16, 16, 3))))
        ag.backward(_weighted(out))
        grads_ok = all(p.grad is not None and np.abs(p.grad).sum() > 0 for p in model.prompts)
        grads_ok = grads_ok and len(model.prompts) == (arch.layers if lp else 0)
        ok = ok and rows_ok and grads_ok
        details.append(f"L_p={lp}: {tokens.shape[0]} tokens, {len(model.prompts)} prompt sets with grad={grads_ok}")
    report(capsys, 4, ok, "; ".join(details))
    assert ok


# -- 5, 6, 7, 9: desk experiment -----------------------------------------------


@pytest.mark.slow
def test_criterion_05_end_to_end(desk, desk_run, capsys):
    arms = desk_run.result["arms"]
    target = arms["target"]["accuracy"]
    raw = arms["raw-source"]["accuracy"]
    translated = arms["translated"]["accuracy"]
    dist = desk_run.result["style_distance"]
    ratio = dist["translated"] / dist["raw-source"]
    seconds = desk.setup_seconds + desk_run.seconds
    checks = {
        "a": target >= 0.90,
        "b": target - raw >= 0.20,
        "c": translated - raw >= 0.10,
        "d": ratio <= 0.60,
        "runtime": seconds <= 20 * 60,
    }
    ok = all(checks.values())
    report(capsys, 5, ok,
           f"B-test acc {target:.3f} (a {checks['a']}), raw A-test {raw:.3f} (b {checks['b']}), "
           f"translated A-test {translated:.3f} (c {checks['c']}), style distance ratio {ratio:.3f} "
           f"(d {checks['d']}), {seconds:.0f}s")
    assert ok


@pytest.mark.slow
def test_criterion_06_ablation_plumbing(desk, desk_run, capsys):
    variants = {"scaled-softmax L_p=16": desk_run.result}
    for label, changes in {
        "cross-attention-baseline": dict(tr_mode="cross-attention-baseline"),
        "literal": dict(tr_mode="literal"),
        "scaled-softmax L_p=0": dict(prompt_len=0),
    }.items():
        variants[label] = run_experiment(desk, desk.cfg.replace(**changes)).result
    ok = all(set(r["arms"]) == {"raw-source", "translated", "target"} for r in variants.values())
    ok = ok and {r["tr_mode"] for r in variants.values()} == {"cross-attention-baseline", "literal", "scaled-softmax"}
    ok = ok and {r["prompt_len"] for r in variants.values()} == {0, 16}
    summary = ", ".join(f"{k}: {v['arms']['translated']['accuracy']:.3f}" for k, v in variants.items())
    report(capsys, 6, ok, f"all four reports produced; translated accuracy {summary}")
    assert ok


@pytest.mark.slow
def test_criterion_07_frozen_downstream(desk_run, capsys):
    ok = desk_run.fingerprint_before == desk_run.fingerprint_after
    report(capsys, 7, ok, "downstream parameters bitwise identical after training" if ok else "downstream changed")
    assert ok


@pytest.mark.slow
def test_criterion_09_determinism(desk, desk_run, capsys):
    again = run_experiment(desk, desk.cfg)
    same_ckpt = to_bytes(again.ckpt) == to_bytes(desk_run.ckpt)
    same_json = json.dumps(again.result, sort_keys=True) == json.dumps(desk_run.result, sort_keys=True)
    ok = same_ckpt and same_json and again.log == desk_run.log
    report(capsys, 9, ok, f"checkpoint identical {same_ckpt}, metrics JSON identical {same_json}")
    assert ok


# -- 8: metric oracles ---------------------------------------------------------


def test_criterion_08_metric_oracles(capsys):
    rng = np.random.default_rng(10)
    auc_ok = True
    for _ in range(500):
        n = int(rng.integers(2, 30))
        labels = rng.integers(0, 2, size=n)
        labels[:2] = [0, 1]
        scores = rng.integers(0, 6, size=n) / 5.0
        pos, neg = scores[labels == 1], scores[labels == 0]
        wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
        auc_ok = auc_ok and auc(scores, labels) == wins / (len(pos) * len(neg))
    mask_ok = True
    for _ in range(500):
        a = rng.uniform(size=(8, 8)) < rng.uniform()
        b = rng.uniform(size=(8, 8)) < rng.uniform()
        sa, sb = {tuple(i) for i in np.argwhere(a)}, {tuple(i) for i in np.argwhere(b)}
        want = (1.0, 1.0) if not sa | sb else (2 * len(sa & sb) / (len(sa) + len(sb)), len(sa & sb) / len(sa | sb))
        mask_ok = mask_ok and dice_iou(a.astype(np.uint8), b.astype(np.uint8)) == want
    m1, m2 = np.zeros((4, 4), np.uint8), np.zeros((4, 4), np.uint8)
    m1[0, :4] = 1
    m2[0, 2:4] = 1
    m2[1, 0:2] = 1
    examples_ok = auc([0.9, 0.8, 0.3, 0.1], [1, 0, 1, 0]) == 0.75 and dice_iou(m1, m2) == (0.5, 1 / 3)
    ok = auc_ok and mask_ok and examples_ok
    report(capsys, 8, ok, f"auc exact on 500 sets {auc_ok}, dice/iou exact on 500 mask pairs {mask_ok}, "
                          f"worked examples {examples_ok}")
    assert ok


# -- 10: checkpoint robustness -------------------------------------------------


def _reseal(buf: bytes) -> bytes:
    body = buf[:-4]
    return body + struct.pack("<I", zlib.crc32(body))


def test_criterion_10_checkpoint_robustness(tmp_path, capsys):
    cfg = preset("tiny")
    ckpt = make_checkpoint(cfg, TrustModel(cfg.architecture(), seed=cfg.model_seed), iteration=5)
    back = load_checkpoint(save_checkpoint(ckpt, tmp_path / "c.trst"))
    round_trip = to_bytes(back) == to_bytes(ckpt) and all(
        back.params[k].tobytes() == v.tobytes() for k, v in ckpt.params.items())

    good = to_bytes(ckpt)
    count_at = 12 + len(cfg.to_text().encode()) + 16
    name_len = struct.unpack("<I", good[count_at + 4 : count_at + 8])[0]
    fields = [(8, "<I"), (count_at, "<I"), (count_at + 4, "<I"),
              (count_at + 8 + name_len, "<B"), (count_at + 9 + name_len, "<B")]
    rng = np.random.default_rng(11)
    rejected = built = 0
    for trial in range(100):
        kind = trial % 3
        if kind == 0:
            buf = good[: int(rng.integers(0, len(good)))]
        elif kind == 1:
            arr = bytearray(good)
            for pos in rng.integers(0, count_at + 16, size=int(rng.integers(1, 4))):
                arr[pos] = (arr[pos] + int(rng.integers(1, 256))) % 256
            buf = bytes(arr)
        else:
            off, fmt = fields[trial % len(fields)]
            size = struct.calcsize(fmt)
            (val,) = struct.unpack(fmt, good[off : off + size])
            new = (val + int(rng.integers(1, 2 ** (8 * size) - 1))) % 2 ** (8 * size)
            buf = _reseal(good[:off] + struct.pack(fmt, new) + good[off + size :])
        path = tmp_path / f"fuzz{trial}.trst"
        path.write_bytes(buf)
        try:
            model_from_checkpoint(load_checkpoint(path))
            built += 1
        except FormatError:
            rejected += 1
    ok = round_trip and rejected == 100 and built == 0
    report(capsys, 10, ok, f"round trip bitwise {round_trip}, {rejected}/100 damaged files rejected, {built} models built")
    assert ok


# -- 11: MAC estimator ---------------------------------------------------------


def test_criterion_11_flops_estimator(capsys):
    cfg = preset("desk")
    rng = np.random.default_rng(12)
    worst = 0.0
    for mode in ("scaled-softmax", "literal", "cross-attention-baseline", "identity"):
        arch = cfg.replace(tr_mode=mode).architecture()
        model = TrustModel(arch, seed=0)
        x = Tensor(rng.uniform(size=(64, 64, 3)).astype(np.float32))
        style = Tensor(rng.uniform(size=(arch.style_batch, 64, 64, 3)).astype(np.float32))
        with ag.count_macs() as counter, ag.no_grad():
            model.translate(x, style)
        estimate = flops_estimate(arch)["total"]
        worst = max(worst, abs(counter.total - estimate) / counter.total)
    full = flops_estimate(preset("full").architecture())["total"]
    ok = worst <= 0.01 and full > 0
    report(capsys, 11, ok, f"desk preset max relative deviation {worst:.2e} over 4 modes; "
                          f"full preset {full:,} MACs ({2 * full / 1e9:.2f} GFLOPs)")
    assert ok
