import math

import numpy as np
import pytest

from ditl import evaluation as ev, phantom, tensorcore as tc, training as tr
from ditl.training import FoldData, TrainConfig, TrainingError

from conftest import tiny_model, toy_split


def toy_data(n=12, seed=0):
    return FoldData(toy_split(n, seed=seed), toy_split(6, seed=seed + 1), toy_split(6, seed=seed + 2))


FAST = dict(warmup=1, max_epochs=3, patience=2, batch_size=4)


# --- optimiser ---------------------------------------------------------------------

def test_adam_first_step_by_hand():
    p = tc.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    g = np.array([0.5, -0.1])
    state = tr.AdamState.zeros([p])
    tr.adam_step([p], [g], state, lr=0.1, wd=0.01)
    # bias-corrected first step moves each coordinate by lr * sign(g), after decay
    want = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01) - 0.1 * g / (np.abs(g) + 1e-8)
    assert np.allclose(p.data, want, atol=1e-12)
    assert state.t == 1


def test_adam_minimises_quadratic():
    p = tc.Tensor(np.array([3.0, -4.0]), requires_grad=True)
    state = tr.AdamState.zeros([p])
    for _ in range(2000):
        tr.adam_step([p], [2 * p.data], state, lr=0.05, wd=0.0)
    assert np.allclose(p.data, 0, atol=1e-3)


def test_adam_rejects_non_finite_without_touching_params():
    p = tc.Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(TrainingError):
        tr.adam_step([p], [np.array([np.nan, 0.0])], tr.AdamState.zeros([p]))
    assert np.array_equal(p.data, np.ones(2))


# --- config ---------------------------------------------------------------------------

def test_default_protocol():
    cfg = TrainConfig()
    assert (cfg.warmup, cfg.max_epochs, cfg.patience, cfg.batch_size, cfg.lr, cfg.weight_decay) == \
        (50, 300, 50, 8, 1e-3, 1e-5)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("kwargs", [{"batch_size": 0}, {"patience": 0}, {"patience": 400},
                                    {"lam": -1.0}, {"normalization": "z"}, {"warmup": -1}])
def test_config_validation(kwargs):
    with pytest.raises(TrainingError):
        TrainConfig(**kwargs)


# --- phases ---------------------------------------------------------------------------------

def test_flat_loss_stops_after_warmup_plus_patience():
    cfg = TrainConfig(lr=0.0, warmup=3, max_epochs=50, patience=4, batch_size=6)
    res = tr.train_phase(tiny_model("unimodal-clinical"), toy_data(), cfg=cfg, name="flat")
    assert res.stop_reason == "patience"
    assert res.epochs_run == cfg.warmup + cfg.patience
    assert res.best_epoch == 1
    assert "stop=patience" in res.log_line()


def test_max_epoch_cap():
    cfg = TrainConfig(lr=0.0, warmup=5, max_epochs=5, patience=5)
    res = tr.train_phase(tiny_model("unimodal-clinical"), toy_data(), cfg=cfg)
    assert res.epochs_run == 5 and res.stop_reason == "max_epochs"


def test_model_ends_on_best_validation_state():
    m = tiny_model("unimodal-ct")
    data = toy_data()
    cfg = TrainConfig(lr=0.05, **FAST)
    res = tr.train_phase(m, data, cfg=cfg)
    now = m.state_dict()
    assert all(np.array_equal(now[k], res.best_state[k]) for k in now)
    assert min(res.val_loss) == res.best_val_loss
    assert tr.evaluate_loss(m, data.val, 0.0, None, cfg) == pytest.approx(res.best_val_loss)


def test_lambda_zero_never_runs_gradcam(monkeypatch):
    def boom(*a, **k):
        raise AssertionError("Grad-CAM called with lambda = 0")

    monkeypatch.setattr(tr, "gradcam_from_output", boom)
    tr.train_phase(tiny_model("unimodal-ct"), toy_data(), None, 0.0, TrainConfig(**FAST))
    with pytest.raises(AssertionError):
        tr.train_phase(tiny_model("unimodal-ct"), toy_data(), "m2", 1.0, TrainConfig(**FAST))


def test_mask_and_lambda_must_agree():
    m, data = tiny_model("unimodal-ct"), toy_data()
    with pytest.raises(TrainingError):
        tr.train_phase(m, data, "m2", 0.0, TrainConfig(**FAST))
    with pytest.raises(TrainingError):
        tr.train_phase(m, data, None, 1.0, TrainConfig(**FAST))
    with pytest.raises(TrainingError):
        tr.train_phase(m, data, "m3", 1.0, TrainConfig(**FAST))


def test_phase_is_deterministic():
    runs = []
    for _ in range(2):
        m = tiny_model("unimodal-ct")
        runs.append(tr.train_phase(m, toy_data(), "m1", 1.0, TrainConfig(**FAST), name="a"))
    assert runs[0].val_loss == runs[1].val_loss
    assert runs[0].train_loss == runs[1].train_loss


def test_toy_problem_learns_below_prior():
    cfg = TrainConfig(lr=0.01, warmup=5, max_epochs=40, patience=10, batch_size=8, augment=False)
    data = toy_data(n=24)
    res = tr.train_phase(tiny_model("unimodal-clinical"), data, cfg=cfg)
    assert res.best_val_loss < math.log(2)


def test_schedule_validation():
    with pytest.raises(TrainingError):
        tr.GLSchedule((("a", "m1", 1.0),))
    with pytest.raises(TrainingError):
        tr.GLSchedule((("a", None, 0.0), ("b", "m2", 1.0), ("c", "m1", 1.0)))


# --- pipelines -----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def chain():
    data = toy_data()
    cfg = TrainConfig(**FAST)
    import conftest
    mc = conftest.TINY
    ct = tr.run_doctor_in_the_loop_ct(data, cfg, mc)
    cl = tr.run_clinical(data, cfg, mc)
    return data, cfg, ct, cl


def test_gradual_learning_steps_and_warm_start(chain):
    data, cfg, ct, _ = chain
    assert [(p.name, p.mask, p.lam) for p in ct.phases] == [
        ("step0", None, 0.0), ("step1", "m1", 1.0), ("step2", "m2", 1.0)]
    for prev, nxt in zip(ct.phases, ct.phases[1:]):
        assert all(np.array_equal(prev.best_state[k], nxt.initial_state[k]) for k in prev.best_state)
    assert set(ct.diagnostics["val_xai_m2"]) == {"step0", "step1", "step2"}
    assert ct.phase_log.count("\n") == 3


def test_late_fusion_trains_nothing(chain):
    data, cfg, ct, cl = chain
    late = tr.run_multimodal(data, cfg, "late", ct, cl)
    assert late.phases == []
    p = tr.predict(late, data.test)
    assert np.allclose(p, (tr.predict(ct, data.test) + tr.predict(cl, data.test)) / 2)


def test_early_fusion_is_unguided_and_warm(chain, monkeypatch):
    data, cfg, ct, cl = chain
    seen = []
    real = tr.train_phase
    monkeypatch.setattr(tr, "train_phase", lambda *a, **k: seen.append(a[2:4]) or real(*a, **k))
    early = tr.run_multimodal(data, cfg, "early", ct, cl)
    assert seen == [(None, 0.0)]
    w0 = early.phases[0].initial_state["ct.conv0.weight"]
    assert np.array_equal(w0[:, :1], ct.model.modules["ct"].params["conv0.weight"].data)


def test_intermediate_guided_and_plain(chain, monkeypatch):
    data, cfg, ct, cl = chain
    seen = []
    real = tr.train_phase
    monkeypatch.setattr(tr, "train_phase", lambda *a, **k: seen.append(a[2:4]) or real(*a, **k))
    tr.run_multimodal(data, cfg, "intermediate", ct, cl)
    tr.run_multimodal(data, cfg, "intermediate", ct, cl, guided=False)
    assert seen == [("m2", 1.0), (None, 0.0)]
    with pytest.raises(TrainingError):
        tr.run_multimodal(data, cfg, "hybrid", ct, cl)


def test_segmentation_ablation_sees_only_the_lesion(chain):
    data, cfg, _, cl = chain
    seg = tr.run_ablation(data, cfg, "segmentation", chain[2].model.config)
    assert seg.lesion_input
    masked = data.test.lesion_only()
    assert np.array_equal(tr.predict(seg, data.test), tr.predict(tr.TrainedModel(seg.model), masked))
    guide = tr.run_ablation(data, cfg, "xai-guide", chain[2].model.config)
    assert [(p.mask, p.lam) for p in guide.phases] == [("m2", 1.0)]
    with pytest.raises(TrainingError):
        tr.run_ablation(data, cfg, "dropout")


def test_fold_data_fits_clinical_stats_on_train_only():
    spec = phantom.DatasetSpec(n_samples=30, seed=3)
    prep = phantom.preprocess(phantom.generate(spec))
    split = ev.stratified_folds(prep.labels, 5, 0)[0]
    data = tr.make_fold_data(prep, split, 0)
    age = phantom.encoded_names().index("age")
    assert abs(data.train.clinical[:, age].mean()) < 1e-12
    assert abs(data.test.clinical[:, age].mean()) > 1e-6
    assert data.extents == prep.extents
    assert set(data.test.index) == set(split.test)
