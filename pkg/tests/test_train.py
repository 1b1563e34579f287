"""Training loop and three-arm evaluation on the tiny preset."""

import json

import numpy as np
import pytest

from trust.autograd import Tensor
from trust.checkpoint import to_bytes
from trust.config import preset
from trust.data import build_corpus
from trust.downstream import DownstreamModel, classify, train_downstream
from trust.errors import ConfigError, ContractError
from trust.evaluate import ARMS, evaluate, translate_batch
from trust.metrics import accuracy
from trust.model import TrustModel
from trust.objectives import FeatureExtractor
from trust.train import Adam, model_from_checkpoint, train_trust, warmup_lr


@pytest.fixture(scope="module")
def cfg():
    return preset("tiny")


@pytest.fixture(scope="module")
def corpus(cfg):
    c = build_corpus(n=cfg.samples_per_domain, resolution=cfg.resolution)
    return c[cfg.source_domain], c[cfg.target_domain]


@pytest.fixture(scope="module")
def downstream(cfg, corpus):
    _, tgt = corpus
    return train_downstream(tgt["train"], tgt["test"], cfg.downstream())


@pytest.fixture(scope="module")
def run(cfg, corpus, downstream, tmp_path_factory):
    src, tgt = corpus
    out = tmp_path_factory.mktemp("run")
    before = downstream.fingerprint()
    model, ckpt, log = train_trust(cfg.replace(checkpoint_every=10), src["train"], tgt["train"], downstream, out_dir=out)
    return model, ckpt, log, out, before


class TestWarmup:
    def test_first_step_is_peak_over_steps(self):
        assert warmup_lr(0, 5e-4, 100) == 5e-4 / 100

    def test_linear_then_constant(self):
        assert warmup_lr(49, 1.0, 100) == 0.5
        assert warmup_lr(100, 1.0, 100) == 1.0
        assert warmup_lr(5000, 1.0, 100) == 1.0

    def test_no_warmup(self):
        assert warmup_lr(0, 0.3, 0) == 0.3


class TestAdam:
    def test_first_step_moves_by_lr_times_sign(self):
        p = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
        p.grad = np.array([0.3, -4.0, 1e-3])
        opt = Adam([("p", p)])
        opt.step(0.1)
        np.testing.assert_allclose(p.data, [0.9, -1.9, 0.4], atol=1e-6)

    def test_parameters_without_gradient_untouched(self):
        p = Tensor(np.ones(2), requires_grad=True)
        Adam([("p", p)]).step(1.0)
        np.testing.assert_array_equal(p.data, 1.0)

    def test_state_round_trip(self):
        p = Tensor(np.ones(3), requires_grad=True)
        p.grad = np.full(3, 0.5)
        opt = Adam([("p", p)])
        opt.step(0.1)
        other = Adam([("p", Tensor(np.ones(3), requires_grad=True))])
        other.load_state(opt.state(), opt.t)
        np.testing.assert_array_equal(other.m["p"], opt.m["p"])
        assert other.t == 1


class TestTrainTrust:
    def test_log_is_finite_and_additive(self, run, cfg):
        _, _, log, _, _ = run
        assert len(log) == cfg.iterations
        w = cfg.loss_weights()
        for rec in log:
            assert all(np.isfinite(rec[k]) for k in ("lc", "ls", "lbm", "total"))
            assert abs(rec["total"] - (w.content * rec["lc"] + w.style * rec["ls"] + w.mirror * rec["lbm"])) <= 1e-6
            assert rec["labeled"] or rec["lbm"] == 0.0

    def test_warmup_values_logged(self, run, cfg):
        log = run[2]
        assert log[0]["lr"] == cfg.lr / cfg.warmup
        assert log[-1]["lr"] == cfg.lr

    def test_files_written(self, run, cfg):
        _, ckpt, log, out, _ = run
        lines = (out / "train_log.jsonl").read_text().splitlines()
        assert [json.loads(l) for l in lines] == log
        assert set(json.loads(lines[0])) >= {"iter", "lc", "ls", "lbm", "total", "lr"}
        assert (out / "checkpoint.trst").read_bytes() == to_bytes(ckpt)
        assert (out / "checkpoint_000010.trst").is_file() and (out / "checkpoint_000020.trst").is_file()

    def test_downstream_bitwise_unchanged(self, run, downstream):
        assert downstream.fingerprint() == run[4]

    def test_checkpoint_restores_model(self, run):
        model, ckpt, _, _, _ = run
        restored = model_from_checkpoint(ckpt)
        for (name, p), (_, q) in zip(model.named_parameters(), restored.named_parameters()):
            assert p.data.tobytes() == q.data.tobytes(), name
        assert ckpt.iteration == len(run[2]) and ckpt.optimizer

    def test_deterministic(self, run, cfg, corpus, downstream):
        src, tgt = corpus
        _, ckpt, log = train_trust(cfg.replace(checkpoint_every=10), src["train"], tgt["train"], downstream)
        assert to_bytes(ckpt) == to_bytes(run[1])
        assert log == run[2]

    def test_mirror_only_total_equals_mirror_term(self, cfg, corpus, downstream):
        src, tgt = corpus
        c = cfg.replace(w_content=0.0, w_style=0.0, labeled_prob=1.0, iterations=3)
        _, _, log = train_trust(c, src["train"], tgt["train"], downstream)
        for rec in log:
            assert rec["labeled"] and rec["total"] == rec["lbm"]

    def test_small_target_is_config_error(self, cfg, corpus, downstream):
        src, tgt = corpus
        with pytest.raises(ConfigError):
            train_trust(cfg, src["train"], tgt["train"].subset([0]), downstream)

    def test_unfrozen_downstream_is_contract_error(self, cfg, corpus):
        src, tgt = corpus
        with pytest.raises(ContractError):
            train_trust(cfg, src["train"], tgt["train"], DownstreamModel(16, 4, 8, 1, 2))

    def test_extractor_unchanged(self, run, cfg):
        ext = FeatureExtractor(cfg.resolution, cfg.extractor_widths, seed=cfg.extractor_seed)
        again = FeatureExtractor(cfg.resolution, cfg.extractor_widths, seed=run[1].extractor_seed)
        assert ext.fingerprint() == again.fingerprint()


class TestEvaluate:
    def test_arms_and_pass_through(self, run, corpus, downstream, cfg):
        src, tgt = corpus
        ext = FeatureExtractor(cfg.resolution, cfg.extractor_widths, seed=cfg.extractor_seed)
        result = evaluate(run[0], src["test"], tgt["test"], tgt["train"], downstream, extractor=ext)
        assert set(result["arms"]) == set(ARMS)
        direct = accuracy(classify(downstream, tgt["test"].model_inputs()), tgt["test"].labels)
        assert result["arms"]["target"]["accuracy"] == direct
        assert result["arms"]["translated"]["tr_mode"] == cfg.tr_mode
        assert result["style_distance"]["translated"] >= 0

    def test_repeat_is_identical(self, run, corpus, downstream, tmp_path):
        src, tgt = corpus
        a = evaluate(run[0], src["test"], tgt["test"], tgt["train"], downstream, out_path=tmp_path / "a.json")
        b = evaluate(run[0], src["test"], tgt["test"], tgt["train"], downstream, out_path=tmp_path / "b.json")
        assert a == b and (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_identity_mode_untrained(self, cfg, corpus, downstream):
        src, tgt = corpus
        model = TrustModel(cfg.replace(tr_mode="identity").architecture())
        result = evaluate(model, src["test"], tgt["test"], tgt["train"], downstream)
        assert result["arms"]["translated"]["tr_mode"] == "identity"

    def test_translate_batch_exports(self, run, corpus, downstream, tmp_path):
        src, tgt = corpus
        images = translate_batch(run[0], src["test"], tgt["train"], 7, tmp_path, downstream=downstream)
        n = len(src["test"])
        assert images.shape[0] == n and images.min() >= 0 and images.max() <= 1
        assert len(list((tmp_path / "translated").glob("*.png"))) == n
        assert len(list((tmp_path / "saliency").glob("*.png"))) == 2 * n
        rows = (tmp_path / "projection.csv").read_text().splitlines()
        assert rows[0] == "id,domain,class,arm,x,y" and len(rows) - 1 == 2 * n
