"""Training engine: schedule, ablation weight redistribution, the Nesterov
update against hand arithmetic, checkpoint round trips, resume equivalence,
and run determinism."""

import json

import numpy as np
import pytest

from chexgraph import autodiff as ad
from chexgraph.checkpoint import (CheckpointError, load_checkpoint,
                                  save_checkpoint)
from chexgraph.model import ChexGraphModel, ModelConfig
from chexgraph.synthetic import generate_synthetic_dataset
from chexgraph.training import (ABLATION_MODES, NesterovSGD, NonFiniteLossError,
                                TrainConfig, effective_weights, learning_rate,
                                load_model, total_loss, train)

RNG = np.random.default_rng(2718)


class TestSchedule:
    def test_nine_epoch_sequence(self):
        cfg = TrainConfig()
        lrs = [learning_rate(e, cfg) for e in range(9)]
        want = [1e-3] * 4 + [1e-4] * 4 + [1e-5]
        np.testing.assert_allclose(lrs, want, rtol=1e-12)

    def test_closed_form(self):
        cfg = TrainConfig(lr0=0.02, lr_decay_every=3, lr_decay_factor=5.0)
        for e in range(12):
            assert learning_rate(e, cfg) == pytest.approx(0.02 * 5.0 ** -(e // 3))


class TestAblationWeights:
    def test_full_mode(self):
        w = effective_weights(TrainConfig(ablation="IR+IK+KR"))
        assert w == {"base": 0.25, "ir": 0.25, "ik": 0.25, "kr": 0.25}

    def test_baseline_gets_everything(self):
        w = effective_weights(TrainConfig(ablation="baseline"))
        assert w["base"] == pytest.approx(1.0)
        assert w["ir"] == w["ik"] == w["kr"] == 0.0

    def test_two_module_mode_thirds(self):
        w = effective_weights(TrainConfig(ablation="IR+IK"))
        assert w["base"] == pytest.approx(1 / 3)
        assert w["ir"] == pytest.approx(1 / 3)
        assert w["ik"] == pytest.approx(1 / 3)
        assert w["kr"] == 0.0

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(ablation="ALL")

    def test_weights_sum_to_one(self):
        for mode in ABLATION_MODES:
            w = effective_weights(TrainConfig(ablation=mode))
            assert sum(w.values()) == pytest.approx(1.0)


class TestTotalLoss:
    def _components(self, values):
        return {k: ad.tensor(np.asarray(v)) for k, v in values.items()}

    def test_all_ones_full_mode(self):
        comps = self._components({"base": 1.0, "ir": 1.0, "ik": 1.0, "kr": 1.0})
        out, report, _ = total_loss(comps, TrainConfig(ablation="IR+IK+KR"))
        assert out.item() == pytest.approx(1.0)
        assert report.l_all == pytest.approx(1.0)

    def test_baseline_single_weight(self):
        comps = self._components({"base": 2.0})
        out, report, _ = total_loss(comps, TrainConfig(ablation="baseline"))
        assert out.item() == pytest.approx(2.0)
        assert report.l_ir == 0.0 and report.l_kr == 0.0

    def test_ir_ik_mean(self):
        comps = self._components({"base": 1.0, "ir": 1.0, "ik": 1.0})
        out, _, _ = total_loss(comps, TrainConfig(ablation="IR+IK"))
        assert out.item() == pytest.approx(1.0)

    def test_non_finite_aborts(self):
        comps = self._components({"base": np.inf})
        with pytest.raises(NonFiniteLossError):
            total_loss(comps, TrainConfig(ablation="baseline"))


class TestNesterovSGD:
    def _param(self, value, decay=False):
        t = ad.parameter(np.array([value]))
        return [("p", t, decay)], t

    def test_hand_computed_two_steps(self):
        params, t = self._param(1.0)
        opt = NesterovSGD(params, momentum=0.9, weight_decay=0.0, nesterov=True)
        t.grad = np.array([0.5])
        opt.step(0.1)
        # v=0.5, update=0.5+0.9*0.5=0.95, p=1-0.095
        assert t.data[0] == pytest.approx(0.905)
        t.grad = np.array([0.2])
        opt.step(0.1)
        # v=0.9*0.5+0.2=0.65, update=0.2+0.585=0.785
        assert t.data[0] == pytest.approx(0.905 - 0.0785)

    def test_plain_momentum(self):
        params, t = self._param(1.0)
        opt = NesterovSGD(params, momentum=0.9, weight_decay=0.0, nesterov=False)
        t.grad = np.array([0.5])
        opt.step(0.1)
        assert t.data[0] == pytest.approx(1.0 - 0.05)

    def test_weight_decay_only_on_flagged(self):
        params, t = self._param(2.0, decay=True)
        opt = NesterovSGD(params, momentum=0.0, weight_decay=0.1, nesterov=True)
        t.grad = np.array([0.0])
        opt.step(1.0)
        # g = 0 + 0.1*2 = 0.2; v = 0.2; update = 0.2
        assert t.data[0] == pytest.approx(2.0 - 0.2)

        params2, t2 = self._param(2.0, decay=False)
        opt2 = NesterovSGD(params2, momentum=0.0, weight_decay=0.1, nesterov=True)
        t2.grad = np.array([0.0])
        opt2.step(1.0)
        assert t2.data[0] == pytest.approx(2.0)

    def test_clip_rescales_to_max_norm(self):
        params, t = self._param(0.0)
        opt = NesterovSGD(params, momentum=0.9, weight_decay=0.0)
        t.grad = np.array([30.0])
        norm = opt.clip_gradients(10.0)
        assert norm == pytest.approx(30.0)
        assert t.grad[0] == pytest.approx(10.0)

    def test_graph_params_not_decayed_in_model(self):
        model = ChexGraphModel(ModelConfig(), np.random.default_rng(0))
        decayed = {name for name, _, decay in model.named_parameters() if decay}
        assert all(".w" in name for name in decayed)
        for name in ("relation_graph", "affinity_weight",
                     "patch_aggregator.w", "enhanced_aggregator.w"):
            assert name not in decayed


class TestCheckpointFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        arrays = {
            "a.w": RNG.standard_normal((3, 4)).astype(np.float32),
            "b": RNG.standard_normal(7),
            "c": RNG.integers(0, 5, size=(2, 2)).astype(np.uint8),
        }
        path = save_checkpoint(tmp_path / "x.ckpt", arrays, {"k": 1}, epoch=3)
        back, header = load_checkpoint(path)
        assert header["epoch"] == 3 and header["config"] == {"k": 1}
        for name, arr in arrays.items():
            assert back[name].dtype == arr.dtype
            np.testing.assert_array_equal(back[name], arr)

    def test_same_state_same_bytes(self, tmp_path):
        arrays = {"w": RNG.standard_normal(5).astype(np.float32)}
        p1 = save_checkpoint(tmp_path / "1.ckpt", arrays, {}, epoch=0)
        p2 = save_checkpoint(tmp_path / "2.ckpt", arrays, {}, epoch=0)
        assert p1.read_bytes() == p2.read_bytes()

    def test_not_a_checkpoint(self, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"definitely not")
        with pytest.raises(CheckpointError, match="not a checkpoint"):
            load_checkpoint(bad)

    def test_version_mismatch_refused(self, tmp_path):
        path = save_checkpoint(tmp_path / "v.ckpt",
                               {"w": np.zeros(1, dtype=np.float32)}, {}, epoch=0)
        raw = bytearray(path.read_bytes())
        raw[15] = 99  # version byte after the magic
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_model_state_round_trip(self, tmp_path):
        model = ChexGraphModel(ModelConfig(), np.random.default_rng(4))
        arrays = model.state_arrays()
        path = save_checkpoint(tmp_path / "m.ckpt", arrays,
                               {"model": model.cfg.to_dict(), "train": {}}, epoch=0)
        clone = ChexGraphModel(ModelConfig(), np.random.default_rng(5))
        back, _ = load_checkpoint(path)
        clone.load_state_arrays(back)
        for (_, a, _), (_, b, _) in zip(model.named_parameters(),
                                        clone.named_parameters()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_load_into_mismatched_classes_fails(self, tmp_path):
        model = ChexGraphModel(ModelConfig(num_classes=2), np.random.default_rng(4))
        path = save_checkpoint(tmp_path / "m.ckpt", model.state_arrays(), {}, epoch=0)
        other = ChexGraphModel(ModelConfig(num_classes=3), np.random.default_rng(4))
        back, _ = load_checkpoint(path)
        with pytest.raises(ValueError, match="shape"):
            other.load_state_arrays(back)


def _tiny_dataset(n=8, seed=5):
    return generate_synthetic_dataset(seed=seed, n_images=n, fraction_annotated=0.5)


def _fast_cfg(**kw):
    kw.setdefault("epochs", 2)
    kw.setdefault("seed", 11)
    return TrainConfig(**kw)


class TestTrainRuns:
    def test_determinism_bytes(self, tmp_path):
        ds = _tiny_dataset()
        r1 = train(ds, _fast_cfg(), tmp_path / "a")
        r2 = train(ds, _fast_cfg(), tmp_path / "b")
        assert r1.log_path.read_bytes() == r2.log_path.read_bytes()
        assert r1.final_checkpoint.read_bytes() == r2.final_checkpoint.read_bytes()

    def test_different_seeds_differ(self, tmp_path):
        ds = _tiny_dataset()
        r1 = train(ds, _fast_cfg(seed=11), tmp_path / "a")
        r2 = train(ds, _fast_cfg(seed=12), tmp_path / "b")
        assert r1.log_path.read_bytes() != r2.log_path.read_bytes()

    def test_log_fields_and_ablation_contract(self, tmp_path):
        ds = _tiny_dataset()
        res = train(ds, _fast_cfg(ablation="baseline"), tmp_path / "run")
        lines = [json.loads(l) for l in res.log_path.read_text().splitlines()]
        assert all(l["beta_b"] == 4.0 for l in lines)
        assert all(l["w_base"] == 1.0 for l in lines)
        assert all(l["l_ir"] == 0.0 and l["l_ik"] == 0.0 and l["l_kr"] == 0.0
                   for l in lines)
        assert all(l["l_base"] > 0 for l in lines)
        assert lines[0]["lr"] == 1e-3

    def test_full_mode_logs_all_components(self, tmp_path):
        ds = _tiny_dataset()
        res = train(ds, _fast_cfg(), tmp_path / "run")
        lines = [json.loads(l) for l in res.log_path.read_text().splitlines()]
        assert all(l["w_ir"] == 0.25 for l in lines)
        assert any(l["l_ir"] > 0 for l in lines)
        assert any(l["l_kr"] > 0 for l in lines)

    def test_resume_matches_uninterrupted(self, tmp_path):
        ds = _tiny_dataset()
        full = train(ds, _fast_cfg(epochs=4), tmp_path / "full")
        resumed = train(ds, _fast_cfg(epochs=4), tmp_path / "resumed",
                        resume_from=tmp_path / "full" / "checkpoint_epoch_1.ckpt")
        full_lines = [json.loads(l) for l in full.log_path.read_text().splitlines()]
        res_lines = [json.loads(l) for l in resumed.log_path.read_text().splitlines()]
        tail = [l for l in full_lines if l["epoch"] >= 2]
        assert len(res_lines) == len(tail)
        assert abs(res_lines[0]["l_all"] - tail[0]["l_all"]) < 1e-9
        for a, b in zip(tail, res_lines):
            assert a == b
        assert full.final_checkpoint.read_bytes() == resumed.final_checkpoint.read_bytes()

    def test_abort_on_non_finite_preserves_checkpoints(self, tmp_path, monkeypatch):
        ds = _tiny_dataset()
        calls = {"n": 0}
        original = ChexGraphModel.compute_losses

        def sabotage(self, *args, **kw):
            losses, probs = original(self, *args, **kw)
            calls["n"] += 1
            if calls["n"] > 5:
                losses["base"] = ad.tensor(np.asarray(np.nan))
            return losses, probs

        monkeypatch.setattr(ChexGraphModel, "compute_losses", sabotage)
        with pytest.raises(NonFiniteLossError):
            train(ds, _fast_cfg(epochs=3), tmp_path / "run")
        assert (tmp_path / "run" / "checkpoint_epoch_0.ckpt").exists()

    def test_load_model_restores_config(self, tmp_path):
        ds = _tiny_dataset()
        res = train(ds, _fast_cfg(), tmp_path / "run")
        model, header = load_model(res.final_checkpoint)
        assert model.cfg.num_classes == ds.num_classes
        assert header["config"]["train"]["ablation"] == "IR+IK+KR"

    def test_dataset_smaller_than_batch_rejected(self, tmp_path):
        ds = _tiny_dataset(n=1)
        with pytest.raises(ValueError, match="at least"):
            train(ds, _fast_cfg(), tmp_path / "run")
