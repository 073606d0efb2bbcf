import math
from dataclasses import replace

import numpy as np
import pytest

from fata import data
from fata import tensor as T
from fata.adaptation import (
    AdaptConfig,
    CollapseMonitor,
    Episode,
    NumericalFailure,
    adapt_step,
    clone_stack,
    evaluate,
    histogram_from_steps,
    pretrain,
    read_steps,
    run_scenario,
    selection_histogram,
    write_report,
)
from fata.data import CorruptionSpec, StreamSpec, SyntheticTask
from fata.nn import LayerStack, StackConfig

TASK = SyntheticTask(kind="blobs", num_classes=5, seed=1)
CFG = StackConfig(input_shape=(16,), widths=(32, 32, 32, 32), num_classes=5, norm="batch")


@pytest.fixture(scope="module")
def trained():
    stack = LayerStack(CFG, rng=0)
    summary = pretrain(stack, data.generate_pool(TASK, 1000), epochs=8, lr=0.05, seed=0,
                       val=data.generate_pool(TASK, 500, "val"))
    return stack, summary


@pytest.fixture(scope="module")
def stream():
    pool = data.generate_pool(TASK, 640, "test")
    return data.make_stream(pool, StreamSpec("normal", 64, corruption=CorruptionSpec("gauss_noise", 5, 0)))


# ---------------------------------------------------------------- pretraining


def test_pretrain_separable_blobs():
    task = SyntheticTask(kind="blobs", num_classes=2, seed=0)
    stack = LayerStack(StackConfig(input_shape=(16,), widths=(16, 16), num_classes=2, norm="batch"), rng=0)
    summary = pretrain(stack, data.generate_pool(task, 400), epochs=20, seed=0,
                       val=data.generate_pool(task, 400, "val"))
    assert summary["clean_accuracy"] >= 0.95


def test_pretrain_zero_epochs_is_noop():
    stack = LayerStack(CFG, rng=0)
    before = stack.snapshot()
    pretrain(stack, data.generate_pool(TASK, 100), epochs=0)
    assert all(np.array_equal(before[k], v) for k, v in stack.snapshot().items())


def test_pretrain_deterministic():
    snaps = []
    for _ in range(2):
        stack = LayerStack(CFG, rng=3)
        pretrain(stack, data.generate_pool(TASK, 200), epochs=2, seed=3)
        snaps.append(stack.snapshot())
    assert all(np.array_equal(snaps[0][k], snaps[1][k]) for k in snaps[0])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_pretrain_divergence_aborts():
    stack = LayerStack(CFG, rng=0)
    with pytest.raises(NumericalFailure, match="diverged"):
        pretrain(stack, data.generate_pool(TASK, 200), epochs=3, lr=1e6, seed=0)


# ---------------------------------------------------------------- single steps


def test_lr_zero_is_no_adapt(trained, stream):
    stack, _ = trained
    cfg = AdaptConfig(method="ent_min+fata", lr=0.0, norm_mode="adapt")
    ep = Episode.start(clone_stack(stack), cfg)
    before = ep.model.stack.snapshot()
    rep = run_scenario(stack, stream, cfg)
    ref = run_scenario(stack, stream, replace(cfg, method="no_adapt"))
    assert rep.accuracy == ref.accuracy
    adapt_step(ep, *stream[0])
    assert all(np.array_equal(before[k], v) for k, v in ep.model.stack.snapshot().items())


def test_zero_noise_lockstep_matches_baseline(trained, stream):
    """sigma_n = 0: at every step the baseline losses, evaluated on the same weights, agree."""
    stack, _ = trained
    ep = Episode.start(clone_stack(stack), AdaptConfig(method="ent_min+fata", sigma_n=0.0, lr=5e-3))
    for xb, yb in stream:
        twin = Episode.start(clone_stack(ep.model.stack), AdaptConfig(method="ent_min", lr=0.0))
        base = adapt_step(twin, xb, yb)
        with T.no_grad():
            p = twin.model(xb).data.astype(np.float64)
        ent = -(p * np.log(np.maximum(p, 1e-12))).sum(-1)
        w = np.exp(twin.sel.ew - ent) * (ent < twin.sel.e0)
        fata_ref = float((w * -np.log(p.max(-1))).sum() / len(p))
        rec = adapt_step(ep, xb, yb)
        assert abs(rec["l_tta"] - base["l_tta"]) < 1e-5
        assert abs(rec["l_fata"] - fata_ref) < 1e-5


def test_hand_built_two_sample_step():
    with T.default_dtype(np.float64):
        cfg = StackConfig(input_shape=(3,), widths=(4, 4), num_classes=3, norm="layer")
        stack = LayerStack(cfg, rng=7)
        x = np.array([[0.2, 0.9, 0.4], [0.8, 0.1, 0.5]])
        acfg = AdaptConfig(method="ent_min+fata", aug_position=0, lr=0.0, e0_frac=1.0)
        snap = stack.snapshot()
        rec = adapt_step(Episode.start(stack, acfg, noise_seed=11), x)

    def layer(h, k):
        h = h @ snap[f"layers.{k}.weight"] + snap[f"layers.{k}.bias"]
        h = (h - h.mean(1, keepdims=True)) / np.sqrt(h.var(1, keepdims=True) + 1e-5)
        return np.maximum(h * snap[f"layers.{k}.norm.gamma"] + snap[f"layers.{k}.norm.beta"], 0)

    def head(h):
        logits = layer(h, 1) @ snap["classifier.weight"] + snap["classifier.bias"]
        e = np.exp(logits - logits.max(1, keepdims=True))
        return e / e.sum(1, keepdims=True)

    z = layer(x, 0)
    mu = z.copy()  # vector features: channel mean is the feature itself
    sd = mu.std(axis=0)
    d_sigma = sd / sd.max()
    rng = np.random.default_rng(11)
    alpha = rng.normal(1, 1, (2, 4))
    beta = rng.normal(1, 1, (2, 4))
    z_aug = alpha * z + d_sigma * (beta - alpha) * mu
    p, pa = head(z), head(z_aug)
    ent = -(p * np.log(p)).sum(1)
    C = 3
    mask = ent < math.log(C)
    w = np.exp(0.4 * math.log(C) - ent)
    l_tta = float((mask * w * ent).sum() / 2)
    l_fata = float((mask * w * -np.log(pa[[0, 1], p.argmax(1)])).sum() / 2)
    assert rec["mask"] == mask.tolist()
    assert rec["mean_weight_selected"] == pytest.approx(w[mask].mean(), rel=1e-9)
    assert rec["delta_bar_mean"] == pytest.approx(d_sigma.mean(), rel=1e-9)
    assert rec["l_tta"] == pytest.approx(l_tta, rel=1e-9)
    assert rec["l_fata"] == pytest.approx(l_fata, rel=1e-9)
    assert rec["total"] == pytest.approx(l_tta + l_fata, rel=1e-9)


def test_nonfinite_loss_skips_update(trained):
    stack, _ = trained
    ep = Episode.start(clone_stack(stack), AdaptConfig(method="ent_min", lr=0.1, e0_frac=1.0))
    x = np.full((4, 16), np.nan, dtype=np.float32)
    before = ep.model.stack.snapshot()
    rec = adapt_step(ep, x)
    assert not rec["finite"] and not rec["updated"]
    assert all(np.array_equal(before[k], v, equal_nan=True) for k, v in ep.model.stack.snapshot().items())


# ---------------------------------------------------------------- episodes


def test_empty_stream(trained):
    rep = run_scenario(trained[0], [], AdaptConfig())
    assert rep.steps == [] and rep.accuracy == 0.0 and rep.summary()["n_steps"] == 0


def test_report_byte_identical(trained, stream, tmp_path):
    cfg = AdaptConfig(method="ent_min+fata", lr=5e-3)
    outs = []
    for k in range(2):
        rep = run_scenario(trained[0], stream, cfg, noise_seed=4, seed=4)
        paths = write_report(rep, tmp_path / str(k), "r")
        outs.append({n: p.read_bytes() for n, p in paths.items()})
    assert outs[0] == outs[1]


def test_no_adapt_below_clean(trained, stream):
    stack, summary = trained
    rep = run_scenario(stack, stream, AdaptConfig(method="no_adapt"))
    assert rep.accuracy < summary["clean_accuracy"]


def test_only_affine_change_over_episode(trained, stream):
    stack, _ = trained
    ep = Episode.start(clone_stack(stack), AdaptConfig(method="ent_min+fata", lr=1e-2))
    before = ep.model.stack.snapshot()
    for xb, yb in stream:
        adapt_step(ep, xb, yb)
    after = ep.model.stack.snapshot()
    changed = {k for k in before if not np.array_equal(before[k], after[k])}
    assert changed and all(k.endswith((".gamma", ".beta")) for k in changed)


def test_pre_update_predictions(trained, stream):
    stack, _ = trained
    accs = [run_scenario(stack, stream[:1], AdaptConfig(method="ent_min+fata", lr=lr)).accuracy
            for lr in (0.0, 0.5)]
    assert accs[0] == accs[1]


def test_full_threshold_selects_everything(trained, stream):
    stack, _ = trained
    full = run_scenario(stack, stream, AdaptConfig(method="ent_min+fata", e0_frac=1.0 + 1e-9))
    half = run_scenario(stack, stream, AdaptConfig(method="ent_min+fata", e0_frac=0.5))
    for a, b in zip(full.steps, half.steps):
        assert a["n_selected"] == a["batch_size"] and b["n_selected"] <= b["batch_size"]
    assert full.class_selected == full.class_seen


def test_report_invariants(trained, stream):
    rep = run_scenario(trained[0], stream, AdaptConfig(method="ent_min+fata", lr=5e-3))
    assert all(s["n_selected"] <= s["batch_size"] for s in rep.steps)
    assert sum(rep.class_selected) == rep.n_selected
    assert histogram_from_steps(rep.steps, 5) == rep.class_selected


def test_histogram_extremes(trained, stream):
    stack, _ = trained
    none = run_scenario(stack, stream, AdaptConfig(method="ent_min", e0_frac=0.0))
    hist = selection_histogram(none)
    assert hist["buckets"][0]["classes"] == 5 and len(hist["buckets"]) == 1
    everything = run_scenario(stack, stream, AdaptConfig(method="ent_min", e0_frac=1.0 + 1e-9))
    freq = np.bincount(np.concatenate([y for _, y in stream]), minlength=5)
    assert everything.class_selected == freq.tolist()


def test_histogram_buckets_partition():
    hist = selection_histogram([0, 1, 5, 6, 12, 0])
    labels = {b["label"]: b["classes"] for b in hist["buckets"]}
    assert labels == {"0": 2, "1-5": 2, "6-10": 1, "11-15": 1}
    assert sum(labels.values()) == 6


def test_recomputed_from_step_log(trained, stream, tmp_path):
    rep = run_scenario(trained[0], stream, AdaptConfig(method="ent_min+fata", lr=5e-3))
    paths = write_report(rep, tmp_path, "r")
    assert histogram_from_steps(read_steps(paths["steps"]), 5) == rep.class_selected


def test_collapse_monitor():
    mon = CollapseMonitor(3, window=4, threshold=0.9)
    flags = [mon.push(k, [0, 0, 0, 0]) for k in range(4)]
    assert flags[:3] == [None] * 3 and flags[3]["class"] == 0
    mon = CollapseMonitor(3, window=2, threshold=0.9)
    assert [mon.push(k, [0, 1, 2]) for k in range(3)] == [None] * 3


def test_no_adapt_defaults_to_source_statistics():
    assert AdaptConfig(method="no_adapt").resolved_norm_mode == "eval"
    assert AdaptConfig(method="ent_min").resolved_norm_mode == "adapt"
    assert AdaptConfig(method="no_adapt", norm_mode="adapt").resolved_norm_mode == "adapt"


def test_adapt_config_validation():
    for bad in ({"method": "tent"}, {"lr": -1.0}, {"reduction": "sum"}, {"sigma_n": -0.1}):
        with pytest.raises(ValueError):
            AdaptConfig(**bad)


def test_evaluate_modes(trained):
    stack, _ = trained
    x, y = data.generate_pool(TASK, 200, "val")
    assert evaluate(stack, x, y) > 0.5
