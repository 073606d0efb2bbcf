import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fata import tensor as T
from fata.adaptation import AdaptConfig, Episode, adapt_step
from fata.nn import (
    SGD,
    CheckpointError,
    LayerStack,
    NormLayer,
    StackConfig,
    adaptable_parameters,
    checkpoint_bytes,
    load_checkpoint,
    save_checkpoint,
)

from conftest import numeric_grad, rel_err


# eval-mode BN uses running stats, so it never sees the batch and is excluded
@pytest.mark.parametrize("kind, mode", [("batch", "adapt"), ("batch", "train"), ("group", "adapt"),
                                        ("group", "eval"), ("layer", "adapt"), ("layer", "eval")])
def test_constant_input_maps_to_zero(kind, mode):
    layer = NormLayer(kind, 4, num_groups=2)
    out = layer(T.tensor(np.full((3, 4, 2, 2), 5.0)), mode)
    assert np.abs(out.data).max() < 1e-2


def test_group_one_equals_layer_norm(f64):
    x = T.tensor(np.random.default_rng(0).normal(size=(3, 8, 4, 4)))
    g1 = NormLayer("group", 8, num_groups=1).normalize(x)
    flat = x.data.reshape(3, -1)
    ref = (flat - flat.mean(1, keepdims=True)) / np.sqrt(flat.var(1, keepdims=True) + 1e-5)
    assert np.abs(g1.data - ref.reshape(x.shape)).max() < 1e-6
    assert np.abs(NormLayer("layer", 8).normalize(x).data - g1.data).max() < 1e-6


def test_group_c_equals_instance_norm(f64):
    x = np.random.default_rng(1).normal(size=(3, 8, 4, 4))
    out = NormLayer("group", 8, num_groups=8).normalize(T.tensor(x)).data
    mu = x.mean(axis=(2, 3), keepdims=True)
    ref = (x - mu) / np.sqrt(x.var(axis=(2, 3), keepdims=True) + 1e-5)
    assert np.abs(out - ref).max() < 1e-6


def test_batch_norm_adapt_uses_batch_stats(f64):
    x = np.random.default_rng(2).normal(3.0, 2.0, size=(16, 4, 3, 3))
    layer = NormLayer("batch", 4)
    out = layer.normalize(T.tensor(x), "adapt").data
    ref = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / np.sqrt(x.var(axis=(0, 2, 3), keepdims=True) + 1e-5)
    assert np.abs(out - ref).max() < 1e-6
    assert np.array_equal(layer.running_mean, np.zeros(4))  # adapt never touches running stats


def test_batch_norm_eval_uses_running_stats(f64):
    layer = NormLayer("batch", 2)
    layer.running_mean, layer.running_var = np.array([1.0, -1.0]), np.array([4.0, 9.0])
    out = layer.normalize(T.tensor(np.zeros((1, 2))), "eval").data
    assert np.allclose(out, [[-1 / np.sqrt(4 + 1e-5), 1 / np.sqrt(9 + 1e-5)]])


def test_batch_one_adapt_flagged():
    layer = NormLayer("batch", 2)
    layer(T.tensor(np.ones((1, 2, 2, 2))), "adapt")
    assert layer.last_degenerate
    layer(T.tensor(np.ones((2, 2, 2, 2))), "adapt")
    assert not layer.last_degenerate


def test_group_must_divide():
    with pytest.raises(ValueError):
        NormLayer("group", 6, num_groups=4)
    with pytest.raises(ValueError):
        StackConfig(widths=(6, 8), norm="group", num_groups=4)


@pytest.mark.parametrize("kind", ["batch", "group", "layer"])
@given(seed=st.integers(0, 2**16), shift=st.floats(-5, 5), scale=st.floats(0.5, 5))
@settings(max_examples=15, deadline=None)
def test_normalized_moments(kind, seed, shift, scale):
    x = np.random.default_rng(seed).normal(shift, scale, size=(8, 4, 3, 3))
    with T.default_dtype(np.float64):
        xhat = NormLayer(kind, 4, num_groups=2).normalize(T.tensor(x), "adapt").data
    if kind == "batch":
        groups = xhat.transpose(1, 0, 2, 3).reshape(4, -1)
    elif kind == "group":
        groups = xhat.reshape(8 * 2, -1)
    else:
        groups = xhat.reshape(8, -1)
    assert np.abs(groups.mean(axis=1)).max() < 1e-4
    assert np.abs(groups.var(axis=1) - 1).max() < 1e-3


def test_gamma_beta_length():
    layer = NormLayer("group", 8, num_groups=4)
    assert layer.gamma.shape == (8,) and layer.beta.shape == (8,)


@pytest.mark.parametrize("norm", ["batch", "group", "layer"])
def test_three_layer_model_gradients_fd(norm):
    """All parameter gradients of a random 3-layer conv model vs central differences."""
    with T.default_dtype(np.float64):
        cfg = StackConfig(input_shape=(2, 4, 4), widths=(4, 4, 4), num_classes=3, norm=norm,
                          num_groups=2, activation="gelu")
        stack = LayerStack(cfg, rng=0)
        rng = np.random.default_rng(1)
        for p in stack.parameters():
            p.data = p.data + rng.normal(0, 0.1, p.shape)
        x = rng.normal(size=(3, 2, 4, 4))
        y = np.array([0, 1, 2])
        from fata.model import FataModel

        model = FataModel(stack, aug_position=0, mode="adapt")

        def loss():
            return T.mean(-T.log(T.pick(model(x), y)))

        grads = T.grad(loss(), stack.parameters())
        for p, g in zip(stack.parameters(), grads):
            num = numeric_grad(lambda: loss().item(), p.data)
            assert rel_err(g, num) < 1e-4


def test_adaptable_parameter_count():
    cfg = StackConfig(input_shape=(3, 8, 8), widths=(8, 8, 8, 8), norm="group", num_groups=4)
    params = adaptable_parameters(LayerStack(cfg))
    assert len(params) == 8 and sum(p.size for p in params) == 64


def test_no_norm_layers_no_adaptable():
    cfg = StackConfig(input_shape=(3, 8, 8), widths=(8, 8), norm="none")
    assert adaptable_parameters(LayerStack(cfg)) == []


def test_adapt_step_changes_only_affine():
    cfg = StackConfig(input_shape=(3, 8, 8), widths=(8, 8, 8, 8), norm="batch", num_classes=4)
    stack = LayerStack(cfg, rng=0)
    x = np.random.default_rng(0).uniform(size=(16, 3, 8, 8)).astype(np.float32)
    before = stack.snapshot()
    ep = Episode.start(stack, AdaptConfig(method="ent_min+fata", lr=0.1, e0_frac=1.0))
    rec = adapt_step(ep, x)
    assert rec["updated"] and rec["total"] > 0
    after = stack.snapshot()
    affine = {n for n in before if n.endswith((".gamma", ".beta"))}
    assert any(not np.array_equal(before[n], after[n]) for n in affine if n.endswith("gamma"))
    for name in set(before) - affine:
        assert np.array_equal(before[name], after[name]), name


def test_sgd_momentum_matches_reference():
    p = T.tensor(np.array([1.0]), requires_grad=True)
    opt = SGD([p], lr=0.1, momentum=0.9)
    v, w = 0.0, 1.0
    for g in (1.0, 2.0, -1.0):
        p.grad = np.array([g], dtype=p.data.dtype)
        opt.step()
        v = g if v == 0.0 else 0.9 * v + g
        w -= 0.1 * v
    assert p.data[0] == pytest.approx(w, rel=1e-6)


def test_layer_output_shapes_chain():
    cfg = StackConfig(input_shape=(3, 8, 8), widths=(4, 6, 8, 8), pool_after=(1,), norm="batch")
    stack = LayerStack(cfg)
    h = T.tensor(np.zeros((2, 3, 8, 8)))
    for i, blk in enumerate(stack.layers):
        h = blk(h)
        assert h.shape[1:] == stack.layer_output_shape(i)


# ---------------------------------------------------------------- checkpoints


def _stack(seed=0, norm="batch"):
    return LayerStack(StackConfig(input_shape=(3, 8, 8), widths=(4, 4), norm=norm, num_classes=3), rng=seed)


def test_checkpoint_roundtrip(tmp_path):
    s = _stack()
    s.layers[0].norm.running_mean = np.array([0.1, 0.2, 0.3, 0.4])
    path = save_checkpoint(s, tmp_path / "a.json")
    loaded, _ = load_checkpoint(path, expect=s.config)
    for k, v in s.snapshot().items():
        assert np.array_equal(loaded.snapshot()[k], v), k


def test_checkpoint_byte_stable(tmp_path):
    a = save_checkpoint(_stack(3), tmp_path / "a.json").read_bytes()
    b = save_checkpoint(_stack(3), tmp_path / "b.json").read_bytes()
    assert hashlib.sha256(a).digest() == hashlib.sha256(b).digest()
    assert checkpoint_bytes(_stack(3)) != checkpoint_bytes(_stack(4))


def test_checkpoint_mismatch(tmp_path):
    path = save_checkpoint(_stack(), tmp_path / "a.json")
    with pytest.raises(CheckpointError, match="does not match"):
        load_checkpoint(path, expect=StackConfig(input_shape=(3, 8, 8), widths=(4, 8), norm="batch", num_classes=3))
    (tmp_path / "bad.json").write_text("{}")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.json")
