import json
from pathlib import Path

import numpy as np
import pytest

from subspace_lab.config import RunConfig, coerce_override
from subspace_lab.data import Dataset
from subspace_lab.errors import ConfigError, NumericError, StateError
from subspace_lab.optim import AdamState, adam_step
from subspace_lab.tensor import ParameterSet, Tensor, no_grad
from subspace_lab.trainer import (
    ablation_sweep,
    bdsc_step,
    build_model,
    equivalence_check,
    finetune,
    finetune_bdsc,
    full_pipeline,
    load_checkpoint,
    load_data,
    model_inputs,
    parameter_set,
    pretrain,
    replay_manifest,
    save_checkpoint,
    start_finetune,
    two_step_baseline,
)

def small_cfg(**kw):
    base = dict(
        synth_subspaces=3, synth_dim=3, synth_ambient=12, synth_per=20, widths=[10],
        batch_size=16, pretrain_epochs=5, finetune_epochs=5, lr=1e-3,
    )
    base.update(kw)
    return RunConfig(**base).validate()


def params_of(ae):
    return {k: v.copy() for k, v in ae.state_dict().items()}


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        state = AdamState(lr=0.1)
        p.grad = np.zeros(2)
        adam_step(ParameterSet({"p": p}), state)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])
        assert state.step == 1 and p.grad is None

    def test_first_step_closed_form(self):
        p = Tensor(np.array(1.0), requires_grad=True)
        p.grad = np.array(0.5)
        adam_step(ParameterSet({"p": p}), AdamState(lr=0.01))
        # bias-corrected moments are g and g^2, so the step is lr * g / (|g| + eps)
        assert p.item() == pytest.approx(1.0 - 0.01 * 0.5 / (0.5 + 1e-8), abs=1e-15)
        assert p.item() == pytest.approx(0.99, abs=1e-9)

    def test_bit_identical_runs(self):
        def run():
            rng = np.random.default_rng(0)
            p = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
            state = AdamState(lr=0.01)
            for _ in range(100):
                p.grad = np.sin(p.data) + rng.standard_normal((3, 3))
                adam_step(ParameterSet({"p": p}), state)
            return p.data.tobytes()

        assert run() == run()

    def test_missing_gradient(self):
        p = Tensor(np.ones(2), requires_grad=True)
        with pytest.raises(StateError):
            adam_step(ParameterSet({"p": p}), AdamState(lr=0.1))

    def test_group_learning_rate(self):
        state = AdamState(lr=1e-3, group_lr={"C": 1e-2, "encoder.": 1e-4})
        assert state.lr_for("C") == 1e-2
        assert state.lr_for("encoder.0.weight") == 1e-4
        assert state.lr_for("decoder.0.weight") == 1e-3
        with pytest.raises(ConfigError):
            AdamState(lr=0.0)


class TestPretrain:
    def test_linear_autoencoder_on_rank_deficient_data(self):
        cfg = RunConfig(
            synth_subspaces=1, synth_dim=4, synth_ambient=12, synth_per=40, widths=[6],
            init="identity", batch_size=10, lr=3e-3, pretrain_epochs=200,
        ).validate()
        ds = load_data(cfg)
        _, trace = pretrain(build_model(cfg, ds), ds, cfg)
        means = trace.epoch_means()
        assert len(means) == 200 and means[0] > 1.0
        assert means[-1] < 1e-6

    def test_epoch_means_trend_down(self):
        cfg = RunConfig(pretrain_epochs=60, batch_size=32).validate()
        ds = load_data(cfg)
        _, trace = pretrain(build_model(cfg, ds), ds, cfg)
        m = trace.epoch_means()
        violations = sum(m[i + 9] > m[i] for i in range(len(m) - 9))
        assert violations <= 2

    def test_zero_epochs(self):
        cfg = small_cfg()
        ds = load_data(cfg)
        ae = build_model(cfg, ds)
        before = params_of(ae)
        ae, trace = pretrain(ae, ds, cfg, epochs=0)
        assert not trace.steps
        for k, v in ae.state_dict().items():
            assert v.tobytes() == before[k].tobytes()

    def test_nan_reports_step(self):
        cfg = small_cfg(batch_size=20)
        ds = load_data(cfg)
        X = ds.X.copy()
        X[45, 0] = np.nan  # lands in the third batch
        bad = Dataset(X, ds.labels)
        with pytest.raises(NumericError, match="step 3"):
            pretrain(build_model(cfg, bad), bad, cfg)


class TestFinetuneBdsc:
    def test_diag_zero_every_step(self):
        cfg = small_cfg(batch_size=6)  # 10 batches per epoch
        ds = load_data(cfg)
        state = start_finetune(build_model(cfg, ds), ds, cfg)
        X = model_inputs(state.ae, ds)
        params = parameter_set(state.ae, state.se)
        state.ae.train()
        for s in range(50):
            state.step += 1
            bdsc_step(state, X, np.arange(6 * (s % 10), 6 * (s % 10) + 6), cfg, params)
            assert np.all(np.diag(state.se.C.data) == 0.0), s

    def test_loss_decomposition_to_1e12(self):
        cfg = small_cfg(alpha=50.0, beta=1.0)
        ds = load_data(cfg)
        state = finetune_bdsc(start_finetune(build_model(cfg, ds), ds, cfg), ds, cfg)
        assert len(state.trace.steps) == 5 * 4
        for s in state.trace.steps:
            assert abs(s["recon"] + 50.0 * s["se"] + 1.0 * s["reg"] - s["total"]) <= 1e-12

    def test_zero_weights_leave_reconstruction_only(self):
        cfg = small_cfg(alpha=0.0, beta=0.0)
        ds = load_data(cfg)
        state = finetune_bdsc(start_finetune(build_model(cfg, ds), ds, cfg), ds, cfg)
        for s in state.trace.steps:
            assert s["total"] == s["recon"]
            assert s["se"] >= 0 and s["reg"] >= 0

    def test_bank_size_mismatch(self):
        cfg = small_cfg()
        ds = load_data(cfg)
        state = start_finetune(build_model(cfg, ds), ds, cfg)
        smaller = Dataset(ds.X[:30], None)
        with pytest.raises(ConfigError):
            finetune_bdsc(state, smaller, cfg)

    def test_c_init_auto(self):
        assert small_cfg(method="bdsc").effective_c_init() == "zeros"
        assert small_cfg(method="clbdsc").effective_c_init() == "noise"
        assert small_cfg(method="clbdsc", c_init="zeros").effective_c_init() == "zeros"


class TestFinetuneClbdsc:
    def _cfg(self, **kw):
        return small_cfg(method="clbdsc", aug_noise=0.05, se_pretrain_epochs=3, finetune_epochs=0, shuffle=False, **kw)

    def test_phase_one_freezes_encoder(self):
        cfg = self._cfg()
        ds = load_data(cfg)
        ae = build_model(cfg, ds)
        before = params_of(ae)
        state = start_finetune(ae, ds, cfg)
        c0 = state.se.C.data.copy()
        state = finetune(state, ds, cfg)
        for k, v in state.ae.state_dict().items():
            assert v.tobytes() == before[k].tobytes(), k
        assert not np.array_equal(state.se.C.data, c0)
        assert {s["phase"] for s in state.trace.steps} == {"se_pretrain"}
        assert np.all(np.diag(state.se.C.data) == 0)

    def test_bank_holds_clean_encodings(self):
        cfg = self._cfg()
        ds = load_data(cfg)
        state = finetune(start_finetune(build_model(cfg, ds), ds, cfg), ds, cfg)
        state.ae.eval()
        with no_grad():
            clean = state.ae.encode(Tensor(model_inputs(state.ae, ds))).data
        np.testing.assert_allclose(state.bank.Z, clean, atol=1e-13)

    def test_phase_two_records_boundary_and_moves_encoder(self):
        cfg = self._cfg().replace(finetune_epochs=2)
        ds = load_data(cfg)
        ae = build_model(cfg, ds)
        before = params_of(ae)
        state = finetune(start_finetune(ae, ds, cfg), ds, cfg)
        phases = [s["phase"] for s in state.trace.steps]
        assert phases == ["se_pretrain"] * 12 + ["finetune"] * 8
        w = "encoder.0.weight"
        assert not np.array_equal(state.ae.state_dict()[w], before[w])
        # the decoder takes no part in the contrastive objective
        dec = [k for k in before if k.startswith("decoder.")]
        assert dec and all(np.array_equal(state.ae.state_dict()[k], before[k]) for k in dec)


class TestCheckpoint:
    @pytest.mark.parametrize("method", ["bdsc", "dsc", "clbdsc"])
    def test_resume_is_bit_exact(self, tmp_path, method):
        extra = dict(se_pretrain_epochs=1, aug_noise=0.05) if method == "clbdsc" else {}
        cfg = small_cfg(method=method, finetune_epochs=4, **extra)
        ds = load_data(cfg)

        straight = finetune(start_finetune(build_model(cfg, ds), ds, cfg), ds, cfg)

        head_cfg = cfg.replace(finetune_epochs=2)
        head = finetune(start_finetune(build_model(cfg, ds), ds, cfg), ds, head_cfg)
        save_checkpoint(tmp_path, head, cfg)
        resumed, loaded_cfg = load_checkpoint(tmp_path, ds)
        assert loaded_cfg == cfg
        resumed = finetune(resumed, ds, cfg)

        assert resumed.se.C.data.tobytes() == straight.se.C.data.tobytes()
        for k, v in straight.ae.state_dict().items():
            assert resumed.ae.state_dict()[k].tobytes() == v.tobytes(), k
        assert resumed.trace.totals() == straight.trace.totals()
        if straight.bank is not None:
            assert resumed.bank.Z.tobytes() == straight.bank.Z.tobytes()


class TestPipeline:
    def test_manifest_and_artifacts(self, tmp_path):
        cfg = small_cfg()
        res = full_pipeline(cfg, tmp_path, extra={"note": "x"})
        man = json.loads((tmp_path / "manifest.json").read_text())
        assert man["config"] == cfg.to_dict() and man["note"] == "x"
        assert man["metrics"] == {"acc": res.result.acc, "nmi": res.result.nmi}
        assert len(man["losses"]["pretrain"]) == 5 and len(man["losses"]["finetune"]) == 5
        for path in man["artifacts"].values():
            assert Path(path).exists()

    def test_replay_reproduces_metrics(self, tmp_path):
        res = full_pipeline(small_cfg(), tmp_path)
        man = json.loads((tmp_path / "manifest.json").read_text())
        again = replay_manifest(man)
        assert again.result.acc == res.result.acc and again.result.nmi == res.result.nmi
        np.testing.assert_array_equal(again.result.labels, res.result.labels)

    def test_dsc_equals_bdsc_at_full_batch(self):
        cfg = small_cfg(batch_size=60, shuffle=False, pretrain_epochs=3, finetune_epochs=5)
        a = full_pipeline(cfg.replace(method="dsc"))
        b = full_pipeline(cfg.replace(method="bdsc"))
        assert a.result.acc == b.result.acc and a.result.nmi == b.result.nmi
        np.testing.assert_array_equal(a.result.labels, b.result.labels)

    def test_bdsc_recovers_five_subspaces(self):
        # 250 points, n=32 (k=8), lr scaled from a full-batch reference
        cfg = RunConfig(pretrain_epochs=50, finetune_epochs=50, batch_size=32, consistency_reference_k=1).validate()
        res = full_pipeline(cfg)
        assert res.result.acc >= 0.98 and res.result.nmi >= 0.95

    def test_two_step_baseline_runs(self):
        res = two_step_baseline(small_cfg())
        assert 0.0 <= res.acc <= 1.0 and len(res.labels) == 60

    def test_pretrained_flag_skips_pretraining(self):
        res = full_pipeline(small_cfg(pretrained=True))
        assert res.manifest["losses"]["pretrain"] == []


class TestEquivalence:
    def test_full_batch_matches(self):
        out = equivalence_check(small_cfg(), steps=10)
        assert out["max_param_dev"] < 1e-10 and out["max_loss_dev"] < 1e-10

    def test_zero_steps_is_exact(self):
        out = equivalence_check(small_cfg(), steps=0)
        assert out["max_param_dev"] == 0.0 and out["max_loss_dev"] == 0.0

    def test_half_batch_differs(self):
        out = equivalence_check(small_cfg(), steps=10, batch_size=30)
        assert out["max_param_dev"] > 0


class TestSweep:
    def test_single_cell_equals_pipeline(self):
        cfg = small_cfg()
        rows = ablation_sweep(cfg, [{"lr": 1e-3}])
        res = full_pipeline(cfg.replace(lr=1e-3))
        assert rows == [{"lr": 1e-3, "acc": res.result.acc, "nmi": res.result.nmi, "error": ""}]

    def test_failing_cell_recorded(self):
        rows = ablation_sweep(small_cfg(), [{"batch_size": 0}, {"batch_size": 30}])
        assert rows[0]["error"].startswith("ConfigError") and np.isnan(rows[0]["acc"])
        assert rows[1]["error"] == "" and rows[1]["acc"] > 0

    def test_empty_grid(self):
        with pytest.raises(ConfigError):
            ablation_sweep(small_cfg(), [])


class TestConfig:
    def test_roundtrip(self, tmp_path):
        cfg = small_cfg(alpha=10.0)
        cfg.save(tmp_path / "c.json")
        assert RunConfig.load(tmp_path / "c.json") == cfg

    @pytest.mark.parametrize(
        "text", ['{"method": "xyz"}', '{"nope": 1}', "not json", '{"tau": 0}', '{"data_kind": "tensor"}', '{"nested": {"a": 1}}']
    )
    def test_rejected(self, tmp_path, text):
        p = tmp_path / "c.json"
        p.write_text(text)
        with pytest.raises(ConfigError):
            RunConfig.load(p).validate()

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            RunConfig.load(tmp_path / "absent.json")

    def test_override_coercion(self):
        cfg = RunConfig()
        assert coerce_override(cfg, "lr", "0.01") == 0.01
        assert coerce_override(cfg, "shuffle", "false") is False
        assert coerce_override(cfg, "widths", "[20, 10]") == [20, 10]
        assert coerce_override(cfg, "method", "dsc") == "dsc"
        with pytest.raises(ConfigError):
            coerce_override(cfg, "batch_size", "big")
        with pytest.raises(ConfigError):
            coerce_override(cfg, "unknown_key", "1")
