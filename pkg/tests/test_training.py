import json

import numpy as np
import pytest
import torch

from stimpute import training
from stimpute.contrastive import total_loss
from stimpute.data import DataError, apply_point_mask, split_chronological
from stimpute.diffusion import make_noise_schedule
from stimpute.model import ModelParameters, build_model, load_checkpoint, save_checkpoint
from stimpute.synth import synth_generate
from stimpute.training import TrainingError, impute, train

from conftest import tiny_config


def _splits(cfg):
    ds = synth_generate(cfg.synth, cfg.data.window_length).dataset
    return split_chronological(ds)


@pytest.fixture(scope="module")
def trained():
    cfg = tiny_config()
    tr, va, te = _splits(cfg)
    return train(tr, va, cfg), te


class TestTrain:
    def test_parameters_move_after_one_step(self):
        cfg = tiny_config(**{"optim.steps": 1, "optim.valid_every": 0})
        tr, _, _ = _splits(cfg)
        torch.manual_seed(cfg.seed)
        init = build_model(cfg, tr.graph, cfg.data.window_length)
        params = train(tr, None, cfg)
        moved = [n for (n, a), b in zip(init.state_dict().items(), params.model.state_dict().values())
                 if a.dtype.is_floating_point and not torch.equal(a, b)]
        assert moved

    def test_deterministic_loss_trajectory(self):
        cfg = tiny_config(**{"optim.steps": 100, "optim.valid_every": 50})
        tr, va, _ = _splits(cfg)
        a = train(tr, va, cfg).history
        b = train(tr, va, cfg).history
        assert len(a) == 100
        assert json.dumps(a) == json.dumps(b)

    def test_log_records(self, tmp_path):
        cfg = tiny_config(**{"optim.steps": 3, "optim.valid_every": 3})
        tr, va, _ = _splits(cfg)
        params = train(tr, va, cfg, log_path=tmp_path / "log.jsonl")
        lines = [json.loads(s) for s in (tmp_path / "log.jsonl").read_text().splitlines()]
        assert [r["step"] for r in lines] == [1, 2, 3]
        assert {"step", "loss_rl", "loss_cl", "lr"} <= set(lines[0])
        assert "valid_loss" in lines[-1] and params.best_step == 3

    def test_no_contrastive_means_zero_loss_cl(self):
        cfg = tiny_config(**{"ablation.use_cl": False})
        tr, va, _ = _splits(cfg)
        params = train(tr, va, cfg)
        assert params.model.ctr is None
        assert all(r["loss_cl"] == 0.0 for r in params.history)

    def test_use_cl_false_equals_alpha_zero(self):
        tr, va, _ = _splits(tiny_config())
        a = train(tr, va, tiny_config(**{"ablation.use_cl": False}))
        b = train(tr, va, tiny_config(**{"contrastive.alpha": 0.0}))
        assert json.dumps(a.history) == json.dumps(b.history)
        for (k, x), y in zip(a.model.state_dict().items(), b.model.state_dict().values()):
            assert torch.equal(x, y), k

    def test_alpha_zero_gradient_is_reconstruction_gradient(self):
        cfg = tiny_config()
        tr, _, _ = _splits(cfg)
        model = build_model(cfg, tr.graph, cfg.data.window_length)
        model.eval()
        sched = training.schedule_for(cfg)
        rng = np.random.default_rng(0)
        gen = torch.Generator().manual_seed(0)
        batch = training._draw_batch(tr.windows, 4, "point", cfg, tr.normalization, rng, gen, sched, torch.float32)

        def grads(use_total):
            model.zero_grad()
            _, rl, cl, _ = training._loss(model, *batch, sched, cfg.contrastive.alpha)
            (total_loss(rl, cl, 0.0) if use_total else rl).backward()
            return {n: p.grad.clone() for n, p in model.named_parameters() if p.grad is not None}

        g_total, g_rl = grads(True), grads(False)
        assert g_total.keys() == g_rl.keys()
        assert all(torch.equal(g_total[k], g_rl[k]) for k in g_rl)

    def test_empty_training_set(self):
        cfg = tiny_config()
        tr, _, _ = _splits(cfg)
        with pytest.raises(DataError):
            train(tr.subset([]), None, cfg)

    def test_missing_graph(self):
        cfg = tiny_config()
        tr, _, _ = _splits(cfg)
        from dataclasses import replace
        with pytest.raises(TrainingError):
            train(replace(tr, graph=None), None, cfg)

    def test_divergence_aborts(self, monkeypatch):
        cfg = tiny_config()
        tr, _, _ = _splits(cfg)
        monkeypatch.setattr(training, "masked_noise_loss", lambda *a: torch.tensor(float("nan"), requires_grad=True))
        with pytest.raises(TrainingError, match="diverged at step 1"):
            train(tr, None, cfg)

    @pytest.mark.parametrize("strategy", ["point", "block", "mixed"])
    def test_strategies_run(self, strategy):
        cfg = tiny_config(**{"mask.train_strategy": strategy, "optim.steps": 2, "optim.valid_every": 0})
        tr, _, _ = _splits(cfg)
        assert len(train(tr, None, cfg).history) == 2


class TestImpute:
    def test_observed_cells_copied_exactly(self, trained, rng):
        params, te = trained
        w = apply_point_mask(te.windows[0], 0.25, rng)
        res = impute(w, params, n_samples=5)
        obs = w.observed_mask.astype(bool)
        assert res.samples.shape == (5, *w.shape)
        for s in res.samples:
            assert np.array_equal(s[obs], w.values[obs])
        assert np.isfinite(res.samples[:, w.target_mask.astype(bool)]).all()
        np.testing.assert_array_equal(res.point_estimate, np.median(res.samples, axis=0))

    def test_default_ensemble_size(self):
        import inspect
        assert inspect.signature(impute).parameters["n_samples"].default == 100

    def test_missing_cells_become_targets(self, trained):
        params, te = trained
        w = te.windows[0]
        values = w.values.copy()
        values[0, 3:6] = np.nan
        from conftest import make_window
        res = impute(make_window(values), params, n_samples=3)
        assert res.target_mask.sum() == 3 and np.isfinite(res.samples[:, 0, 3:6]).all()

    def test_seeded_sampling_is_reproducible(self, trained, rng):
        params, te = trained
        w = apply_point_mask(te.windows[1], 0.25, rng)
        a, b = impute(w, params, 4, seed=3), impute(w, params, 4, seed=3)
        np.testing.assert_array_equal(a.samples, b.samples)

    def test_untrained(self, trained):
        params, te = trained
        from dataclasses import replace
        with pytest.raises(TrainingError):
            impute(te.windows[0], replace(params, trained=False))

    def test_schedule_mismatch(self, trained):
        params, te = trained
        with pytest.raises(ValueError):
            impute(te.windows[0], params, schedule=make_noise_schedule(99))


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, trained, tmp_path):
        params, _ = trained
        save_checkpoint(params, tmp_path / "ck.pt")
        again = load_checkpoint(tmp_path / "ck.pt")
        a, b = params.model.state_dict(), again.model.state_dict()
        assert a.keys() == b.keys()
        assert all(torch.equal(a[k], b[k]) and a[k].dtype == b[k].dtype for k in a)
        assert again.schedule.same_as(params.schedule) and again.trained
        assert again.config == params.config
        np.testing.assert_array_equal(again.normalization.mean, params.normalization.mean)
        np.testing.assert_array_equal(again.graph.adjacency, params.graph.adjacency)

    def test_namespaces(self, trained):
        params, _ = trained
        roots = {k.split(".")[0] for k in params.model.state_dict()}
        assert {"cond_enc", "noise_pred", "ctr"} <= roots
        assert any(k.startswith("ctr.query.") for k in params.model.state_dict())
        assert any(k.startswith("ctr.key.") for k in params.model.state_dict())

    def test_no_trend_parameters_without_trend(self, tmp_path):
        cfg = tiny_config(**{"ablation.use_trend": False, "optim.steps": 1, "optim.valid_every": 0})
        tr, _, _ = _splits(cfg)
        save_checkpoint(train(tr, None, cfg), tmp_path / "ck.pt")
        state = torch.load(tmp_path / "ck.pt", weights_only=True)["state_dict"]
        assert not any(k.startswith("cond_enc.trend") for k in state)
        assert any(k.startswith("cond_enc.season") for k in state)

    def test_rejects_foreign_file(self, tmp_path):
        torch.save({"format": "other"}, tmp_path / "x.pt")
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "x.pt")

    def test_rejects_tampered_config(self, trained, tmp_path):
        params, _ = trained
        save_checkpoint(params, tmp_path / "ck.pt")
        archive = torch.load(tmp_path / "ck.pt", weights_only=True)
        archive["config"]["model"]["d"] = 999
        torch.save(archive, tmp_path / "ck.pt")
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "ck.pt")

    def test_model_parameters_type(self, trained):
        assert isinstance(trained[0], ModelParameters)
