import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TINY, TINY_LORA, rel_err, tiny_checkpoint, tiny_params
from loralens import autograd as ag
from loralens.data import SeqBatch
from loralens.errors import ConfigError, DivergenceError, ShapeError, ValidationError
from loralens.model import (
    LoraConfig, ModelConfig, forward, init_adapters, is_backbone, loss_and_grads, trainable_names,
)
from loralens.rng import SplitMix64
from loralens.train import Checkpoint, OptimConfig, accuracy, attach_target, pretrain_backbone, train


def fd_grad(params, name, idx, loss_fn, h=1e-5):
    orig = params[name][idx]
    params[name][idx] = orig + h
    up = loss_fn(params)
    params[name][idx] = orig - h
    down = loss_fn(params)
    params[name][idx] = orig
    return (up - down) / (2 * h)


def tiny_labels(n):
    return np.arange(n) % TINY.num_classes


# ------------------------------------------------------------ configs

def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(model_dim=10, num_heads=4)
    with pytest.raises(ConfigError):
        LoraConfig(rank=0)
    with pytest.raises(ConfigError):
        LoraConfig(dropout=1.0)
    with pytest.raises(ConfigError):
        LoraConfig(targets=("key",))
    with pytest.raises(ConfigError):
        LoraConfig(rank=9).check(ModelConfig(model_dim=8, num_heads=2))
    assert LoraConfig(rank=4).scale == 1.0
    assert LoraConfig(rank=4, alpha=8.0).scale == 2.0


# ------------------------------------------------------------ forward

def test_zero_init_equivalence(tiny_batch):
    p = tiny_params(seed=3)
    assert np.all(p["lora.0.query.B"] == 0)
    frozen = forward(p, TINY, tiny_batch, TINY_LORA, "frozen")
    adapted = forward(p, TINY, tiny_batch, TINY_LORA, "adapted")
    assert np.array_equal(frozen, adapted)


def test_nonzero_b_changes_logits(tiny_batch):
    p = tiny_params(seed=3, random_b=True)
    assert not np.array_equal(forward(p, TINY, tiny_batch, TINY_LORA, "frozen"),
                              forward(p, TINY, tiny_batch, TINY_LORA, "adapted"))


@pytest.mark.parametrize("mode", ["frozen", "adapted"])
def test_residual_identity(mode, tiny_batch):
    p = tiny_params(seed=1, random_b=True)
    _, rec = forward(p, TINY, tiny_batch, TINY_LORA, mode, trace=True)
    assert len(rec.h) == TINY.num_layers + 1
    for l in range(TINY.num_layers):
        assert np.max(np.abs(rec.h[l] + rec.a[l] + rec.m[l] - rec.h[l + 1])) <= 1e-12


def test_hand_computed_attention():
    cfg = ModelConfig(num_layers=1, model_dim=2, num_heads=1, mlp_hidden=2, input_dim=2, num_classes=2, seq_len=1)
    p = {n: v for n, v in tiny_params(seed=0, lora=None, cfg=cfg).items()}
    p["embed.W"] = np.eye(2)
    p["embed.b"] = np.zeros(2)
    p["pos"] = np.zeros((1, 2))
    p["layers.0.attn.v.W"] = np.array([[1.0, 2.0], [3.0, 4.0]])
    p["layers.0.attn.v.b"] = np.array([0.5, -0.5])
    p["layers.0.attn.o.W"] = np.array([[0.0, 1.0], [1.0, 0.0]])
    p["layers.0.attn.o.b"] = np.array([0.1, 0.2])
    _, rec = forward(p, cfg, np.array([[[1.0, 3.0]]]), trace=True)
    # h = (1, 3): mean 2, variance 1, so LN(h) = (-s, s) with s = 1 / sqrt(1 + 1e-5)
    s = 1.0 / np.sqrt(1.0 + 1e-5)
    # one key, so attention weight 1: v = (s + 0.5, s - 0.5), a = swap(v) + (0.1, 0.2)
    assert np.allclose(rec.a[0][0, 0], [s - 0.4, s + 0.7], atol=1e-14)


def test_shape_error():
    with pytest.raises(ShapeError):
        forward(tiny_params(), TINY, np.zeros((2, TINY.seq_len + 1, TINY.input_dim)))


def test_adapted_mode_needs_adapters(tiny_batch):
    with pytest.raises(ConfigError):
        forward(tiny_params(lora=None), TINY, tiny_batch, TINY_LORA, "adapted")


def test_eval_forward_deterministic(tiny_batch):
    p = tiny_params(seed=2, random_b=True)
    a = forward(p, TINY, tiny_batch, TINY_LORA, "adapted")
    b = forward(p, TINY, tiny_batch, TINY_LORA, "adapted")
    assert np.array_equal(a, b)


def test_dropout_active_only_in_training(tiny_batch):
    p = tiny_params(seed=2, random_b=True)
    labels = tiny_labels(len(tiny_batch))
    l1, _ = loss_and_grads(p, TINY, tiny_batch, labels, TINY_LORA, "adapted", drop_rng=SplitMix64(1))
    l2, _ = loss_and_grads(p, TINY, tiny_batch, labels, TINY_LORA, "adapted", drop_rng=SplitMix64(2))
    l0, _ = loss_and_grads(p, TINY, tiny_batch, labels, TINY_LORA, "adapted")
    assert l1 != l2
    assert l0 == loss_and_grads(p, TINY, tiny_batch, labels, TINY_LORA, "adapted")[0]


# ------------------------------------------------------------ gradients

def test_uniform_logits_loss():
    p = tiny_params()
    p["head.cls.W"] = np.zeros_like(p["head.cls.W"])
    p["head.cls.b"] = np.zeros_like(p["head.cls.b"])
    loss, _ = loss_and_grads(p, TINY, np.ones((2, TINY.seq_len, TINY.input_dim)), [0, 3])
    assert abs(loss - np.log(4.0)) <= 1e-12


def test_cross_entropy_hand_case():
    loss = ag.cross_entropy(ag.Tensor([[0.0, np.log(3.0)]]), np.array([1]))
    assert abs(float(loss.data) - np.log(4.0 / 3.0)) <= 1e-15


def test_finite_differences_adapted(tiny_batch):
    p = tiny_params(seed=5, random_b=True)
    labels = tiny_labels(len(tiny_batch))
    _, grads = loss_and_grads(p, TINY, tiny_batch, labels, TINY_LORA, "adapted")
    assert set(grads) == set(trainable_names(p, "adapted"))

    def loss_fn(q):
        return loss_and_grads(q, TINY, tiny_batch, labels, TINY_LORA, "adapted")[0]

    worst = 0.0
    for name, g in grads.items():
        assert g.shape == p[name].shape
        for idx in np.ndindex(g.shape):
            worst = max(worst, rel_err(g[idx], fd_grad(p, name, idx, loss_fn)))
    assert worst <= 1e-4


def test_frozen_grads_are_head_only(tiny_batch):
    p = tiny_params(seed=5, random_b=True)
    _, grads = loss_and_grads(p, TINY, tiny_batch, tiny_labels(3), TINY_LORA, "frozen")
    assert grads and all(n.startswith("head.") for n in grads)


def test_full_mode_backbone_gradients(tiny_batch):
    p = tiny_params(seed=6, lora=None)
    labels = tiny_labels(3)
    _, grads = loss_and_grads(p, TINY, tiny_batch, labels, mode="full")
    assert not any(n.startswith("lora.") for n in grads)

    def loss_fn(q):
        return loss_and_grads(q, TINY, tiny_batch, labels, mode="full")[0]

    for name in ("embed.W", "pos", "layers.0.attn.q.W", "layers.1.ln2.g", "layers.1.mlp.fc1.b", "ln_f.b"):
        idx = tuple(0 for _ in p[name].shape)
        assert rel_err(grads[name][idx], fd_grad(p, name, idx, loss_fn)) <= 1e-4


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10**6))
def test_layer_norm_and_gelu_gradients(seed):
    r = np.random.default_rng(seed)
    x0, g0, b0 = r.normal(size=(3, 5)), r.normal(size=5), r.normal(size=5)
    w = r.normal(size=(3, 5))

    def f(x, g, b):
        return np.sum(w * ag.gelu(ag.layer_norm(ag.Tensor(x), ag.Tensor(g), ag.Tensor(b))).data)

    xs = [ag.Tensor(v.copy(), requires_grad=True) for v in (x0, g0, b0)]
    out = ag.mul(ag.gelu(ag.layer_norm(*xs)), w)
    ag.mean(ag.reshape(out, (15,)), axis=0).backward()
    arrays = [x0.copy(), g0.copy(), b0.copy()]
    for k, t in enumerate(xs):
        for idx in np.ndindex(t.shape):
            orig = arrays[k][idx]
            arrays[k][idx] = orig + 1e-6
            up = f(*arrays)
            arrays[k][idx] = orig - 1e-6
            down = f(*arrays)
            arrays[k][idx] = orig
            assert rel_err(t.grad[idx] * 15, (up - down) / 2e-6) <= 1e-5 or abs(t.grad[idx] * 15) < 1e-9


def test_label_validation(tiny_batch):
    p = tiny_params()
    with pytest.raises(ValidationError):
        loss_and_grads(p, TINY, tiny_batch, [0, 1, 4])
    with pytest.raises(ValidationError):
        loss_and_grads(p, TINY, tiny_batch, [0, -1, 2])
    with pytest.raises(ShapeError):
        loss_and_grads(p, TINY, tiny_batch, [0, 1])


# ------------------------------------------------------------ training

def tiny_dataset(n=16, seed=0):
    r = SplitMix64(seed)
    x = r.normal((n, TINY.seq_len, TINY.input_dim))
    labels = np.arange(n) % TINY.num_classes
    x[:, :, 0] += labels[:, None]
    return SeqBatch(x, labels, TINY.num_classes)


def test_zero_learning_rate_keeps_weights():
    ck = tiny_checkpoint(seed=1)
    zero = OptimConfig(lr_adapter=0.0, lr_head=0.0, lr_backbone=0.0, batch_size=4)
    out, _, _ = train(ck, tiny_dataset(), zero, 5, seed=2, mode="adapted")
    for n, v in ck.params.items():
        assert np.array_equal(out.params[n], v)


def test_training_deterministic():
    ck = tiny_checkpoint(seed=1)
    opt = OptimConfig(batch_size=4)
    a = train(ck, tiny_dataset(), opt, 6, seed=3, mode="adapted")
    b = train(ck, tiny_dataset(), opt, 6, seed=3, mode="adapted")
    assert a[1] == b[1]
    assert all(np.array_equal(a[0].params[n], b[0].params[n]) for n in ck.params)


@pytest.mark.parametrize("mode", ["frozen", "adapted"])
def test_backbone_untouched(mode):
    ck = tiny_checkpoint(seed=1)
    out, curve, _ = train(ck, tiny_dataset(), OptimConfig(lr_adapter=1e-2, lr_head=1e-2, batch_size=4),
                          10, seed=3, mode=mode)
    assert len(curve) == 10
    for n, v in ck.params.items():
        if is_backbone(n):
            assert np.array_equal(out.params[n], v)
        elif n.startswith("head.") or mode == "adapted":
            assert not np.array_equal(out.params[n], v)
        else:
            assert np.array_equal(out.params[n], v)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_step():
    ck = tiny_checkpoint(seed=1)
    ck.params["head.cls.b"] = np.array([np.inf, 0.0, 0.0, 0.0])
    with pytest.raises(DivergenceError) as exc:
        train(ck, tiny_dataset(), OptimConfig(batch_size=4), 3, seed=0, mode="adapted")
    assert exc.value.step == 1


def test_training_preconditions():
    ck = tiny_checkpoint(seed=1, lora=None)
    with pytest.raises(ConfigError):
        train(ck, tiny_dataset(), OptimConfig(), 2, seed=0, mode="adapted")
    with pytest.raises(ValidationError):
        train(ck, tiny_dataset(), OptimConfig(), 0, seed=0, mode="frozen")


def test_pretrain_reduces_loss_and_moves_weights():
    src = tiny_dataset(n=32, seed=4)
    ck, curve = pretrain_backbone(TINY, src, 120, seed=0, optim=OptimConfig(lr_backbone=1e-2, lr_head=1e-2,
                                                                            batch_size=8))
    assert np.mean(curve[-10:]) <= 0.5 * curve[0]
    fresh = tiny_checkpoint(seed=0, lora=None)
    assert max(np.max(np.abs(ck.params[n] - fresh.params[n])) for n in fresh.params if is_backbone(n)) > 0
    again, curve2 = pretrain_backbone(TINY, src, 120, seed=0, optim=OptimConfig(lr_backbone=1e-2, lr_head=1e-2,
                                                                                 batch_size=8))
    assert curve == curve2


def test_checkpoint_round_trip(tmp_path):
    ck = tiny_checkpoint(seed=4, random_b=True)
    ck.meta["note"] = "x"
    ck.save(tmp_path / "c.lltd")
    back = Checkpoint.load(tmp_path / "c.lltd")
    assert back.model_config == ck.model_config and back.lora_config == ck.lora_config
    assert back.seed == ck.seed and back.meta == ck.meta
    for n, v in ck.params.items():
        assert back.params[n].tobytes() == v.tobytes()


def test_attach_target_and_accuracy():
    backbone = tiny_checkpoint(seed=0, lora=None)
    start = attach_target(backbone, TINY_LORA, 4, seed=9)
    assert start.has_adapters
    assert set(init_adapters(TINY, TINY_LORA, 9)) <= set(start.params)
    acc = accuracy(start, tiny_dataset(), "adapted")
    assert 0.0 <= acc <= 1.0
