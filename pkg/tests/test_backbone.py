import numpy as np
import pytest

from kernmix import backbone
from kernmix import numerics as nx
from kernmix.backbone import NetSpecError, Optimizer, build, forward, step
from kernmix.data import make_blobs
from kernmix.kernel_classifier import KernelConfig, init_centers, neighbourhood, nngk_loss
from kernmix.losses import (VARIANTS, contrastive_batch_loss, mbdml1_loss, mbdml2_loss,
                            mbdml3_loss, nca_loss, triplet_batch_loss)
from kernmix.mixup import mix_batch, mixup_loss_logits
from kernmix.numerics import Tensor


def test_mlp_parameter_count():
    net = build("mlp-small", d=32, c=10, seed=0, input_shape=(28, 28, 1))
    expect = 784 * 128 + 128 + 128 * 64 + 64 + 64 * 32 + 32 + 64 * 10 + 10
    assert net.parameter_count() == expect
    assert net.parameter_count() == sum(p.data.size for p in net.parameters)


def test_conv_builds_and_embeds(rng):
    net = build("conv-tiny", d=16, c=10, seed=0, input_shape=(28, 28, 1))
    emb, logits = forward(net, rng.uniform(size=(3, 28, 28, 1)))
    assert emb.shape == (3, 16) and logits.shape == (3, 10)
    assert np.isfinite(emb.data).all()


def test_same_seed_is_bit_identical():
    a = build("mlp-small", 8, 4, seed=5, input_shape=(8,))
    b = build("mlp-small", 8, 4, seed=5, input_shape=(8,))
    c = build("mlp-small", 8, 4, seed=6, input_shape=(8,))
    assert all(p.data.tobytes() == q.data.tobytes() for p, q in zip(a.parameters, b.parameters))
    assert any(p.data.tobytes() != q.data.tobytes() for p, q in zip(a.parameters, c.parameters))


def test_he_bounds():
    net = build("mlp-small", 8, None, seed=0, input_shape=(20,))
    w, b = net.trunk[0]
    assert np.abs(w.data).max() <= np.sqrt(6 / 20)
    assert not b.data.any()
    assert net.logit_head is None


@pytest.mark.parametrize("bad", [
    dict(net_spec="mlp-small", d=0, c=2),
    dict(net_spec="resnet50", d=4, c=2),
    dict(net_spec={"kind": "rnn"}, d=4, c=2),
    dict(net_spec={"kind": "mlp", "hidden": [0]}, d=4, c=2),
])
def test_invalid_specs_rejected(bad):
    with pytest.raises(NetSpecError):
        build(**bad, seed=0, input_shape=(4,))


def test_conv_needs_image_shape():
    with pytest.raises(NetSpecError):
        build("conv-tiny", 4, 2, seed=0, input_shape=(16,))
    with pytest.raises(NetSpecError):
        build("conv-tiny", 4, 2, seed=0, input_shape=(3, 3, 1))


def test_input_shape_mismatch(rng):
    net = build("mlp-small", 4, 2, seed=0, input_shape=(6,))
    with pytest.raises(nx.ShapeError):
        forward(net, rng.normal(size=(2, 5)))


@pytest.mark.parametrize("spec,shape", [("mlp-small", (10,)), ("conv-tiny", (8, 8, 1))])
def test_zero_parameters_give_zero_embeddings(spec, shape, rng):
    net = build(spec, 4, 3, seed=0, input_shape=shape)
    for p in net.parameters:
        p.data = np.zeros_like(p.data)
    emb, logits = forward(net, rng.normal(size=(5, *shape)))
    assert not emb.data.any() and not logits.data.any()


@pytest.mark.parametrize("spec,shape", [("mlp-small", (10,)), ("conv-tiny", (8, 8, 2))])
def test_batch_independence(spec, shape, rng):
    net = build(spec, 4, 3, seed=1, input_shape=shape)
    x = rng.normal(size=(8, *shape))
    full, _ = forward(net, x)
    one, _ = forward(net, x[:1])
    # BLAS may block a 1-row product differently; agreement is to round-off
    np.testing.assert_allclose(one.data[0], full.data[0], rtol=0, atol=1e-12)
    perm = rng.permutation(8)
    moved, _ = forward(net, x[perm])
    np.testing.assert_allclose(moved.data, full.data[perm], rtol=0, atol=1e-13)


def test_normalized_embeddings_have_unit_norm(rng):
    net = build("mlp-small", 6, None, seed=0, input_shape=(5,), normalize=True)
    emb, _ = forward(net, rng.normal(size=(4, 5)))
    np.testing.assert_allclose(np.linalg.norm(emb.data, axis=1), 1.0, atol=1e-12)


def _swap_param(net, index, t):
    """Replace parameter ``index`` of ``net`` by tensor ``t``; returns the previous one."""
    slots = [("trunk", i) for i in range(len(net.trunk))] + [("embed_head", None), ("logit_head", None)]
    flat = []
    for name, i in slots:
        layer = getattr(net, name) if i is None else net.trunk[i]
        if layer is not None:
            flat += [(name, i, 0), (name, i, 1)]
    name, i, j = flat[index]
    layer = list(getattr(net, name) if i is None else net.trunk[i])
    old, layer[j] = layer[j], t
    if i is None:
        setattr(net, name, tuple(layer))
    else:
        net.trunk[i] = tuple(layer)
    return old


def test_end_to_end_gradient_matches_fd(rng):
    spec = {"kind": "mlp", "hidden": [6]}
    for trial in range(5):
        net = build(spec, 3, None, seed=trial, input_shape=(4,))
        x = rng.normal(size=(5, 4))
        labels = np.array([0, 1, 0, 1, 1])
        emb = backbone.embed(net, x)
        bank = init_centers(emb, labels, 2, seed=trial)
        cfg = KernelConfig(sigma=1.0, k_neighbours=bank.n)
        nb = neighbourhood(emb, bank, bank.n)
        for index, p in enumerate(net.parameters):
            def f(t):
                old = _swap_param(net, index, t)
                try:
                    return nngk_loss(forward(net, x)[0], labels, bank, cfg, nb)
                finally:
                    _swap_param(net, index, old)
            assert nx.finite_difference_check(f, p.detach()) <= 1e-4


# -- optimizer ----------------------------------------------------------------

def _param(value, grad):
    p = Tensor(np.asarray(value, float), requires_grad=True)
    p.grad = np.asarray(grad, float)
    return p


def test_sgd_single_step():
    p = _param([0.0], [1.0])
    step(Optimizer(1.0, 0.0, 0.0), [p])
    assert p.data.tolist() == [-1.0]


def test_sgd_zero_gradient_leaves_params(rng):
    x = rng.normal(size=5)
    p = _param(x, np.zeros(5))
    step(Optimizer(0.1, 0.0, 0.0), [p])
    assert p.data.tobytes() == x.tobytes()


def test_sgd_two_momentum_steps():
    lr, mu, wd = 0.1, 0.9, 0.01
    p = _param([1.0], [0.5])
    opt = Optimizer(lr, mu, wd)
    step(opt, [p])
    v1 = 0.5
    p1 = 1.0 - lr * (v1 + wd * 1.0)
    assert abs(p.data[0] - p1) < 1e-15
    p.grad = np.array([-0.2])
    step(opt, [p])
    v2 = mu * v1 - 0.2
    p2 = p1 - lr * (v2 + wd * p1)
    assert abs(p.data[0] - p2) < 1e-15


def test_sgd_step_length(rng):
    for _ in range(50):
        g = rng.normal(size=7)
        lr = float(rng.uniform(1e-4, 1))
        p = _param(rng.normal(size=7), g)
        before = p.data.copy()
        step(Optimizer(lr, 0.0, 0.0), [p])
        assert abs(np.linalg.norm(p.data - before) - lr * np.linalg.norm(g)) < 1e-12


def test_sgd_missing_gradient():
    p = Tensor([1.0], requires_grad=True)
    with pytest.raises(ValueError):
        step(Optimizer(), [p])
    with pytest.raises(ValueError):
        Optimizer(learning_rate=0.0)


@pytest.mark.parametrize("variant", VARIANTS)
def test_loss_strictly_decreases_first_steps(variant):
    ds = make_blobs(classes=4, per_class=10, d=8, spread=0.75, seed=3)
    x, y = ds.inputs, ds.labels
    net = build("mlp-small", 8, 4, seed=0, input_shape=(8,))
    bank = init_centers(backbone.embed(net, x), y, 10, seed=0)
    cfg = KernelConfig(sigma=5.0, k_neighbours=50)
    # one fixed mixed batch so every step descends the same objective
    mixed = mix_batch(x, y, 0.6, np.random.default_rng(0))

    def loss():
        emb, _ = forward(net, x)
        if variant == "nngk":
            return nngk_loss(emb, y, bank, cfg)
        if variant == "contrastive":
            return contrastive_batch_loss(emb, y, 1.0)
        if variant == "triplet":
            return triplet_batch_loss(emb, y, 0.05)
        if variant == "nca":
            return nca_loss(emb, y)
        memb, logits = forward(net, mixed.mixed_inputs)
        ya, yb, lam = mixed.labels_a, mixed.labels_b, mixed.lam
        if variant == "mixup":
            return mixup_loss_logits(logits, ya, yb, lam)
        if variant == "mbdml1":
            return mbdml1_loss(emb, y, logits, mixed, bank, cfg)
        if variant == "mbdml2":
            return mbdml2_loss(memb, ya, yb, lam, bank, cfg)
        return mbdml3_loss(memb, ya, yb, lam, emb, y, bank, cfg)

    params = net.parameters + [bank.log_weights]
    opt = Optimizer(0.01, 0.0, 0.0)
    history = []
    for _ in range(21):
        nx.zero_grad(params)
        value = loss()
        history.append(value.item())
        nx.backward(value)
        step(opt, params)
    assert all(b < a for a, b in zip(history, history[1:])), history


def test_checkpoint_round_trip(tmp_path, rng):
    net = build("conv-tiny", 6, 3, seed=9, input_shape=(8, 8, 1))
    net.trunk[0][0].data += 0.5
    backbone.save_checkpoint(net, tmp_path / "m.ckpt", extra={"epoch": 3})
    loaded, extra = backbone.load_checkpoint(tmp_path / "m.ckpt")
    assert extra == {"epoch": 3}
    x = rng.normal(size=(2, 8, 8, 1))
    a, b = forward(net, x), forward(loaded, x)
    assert a[0].data.tobytes() == b[0].data.tobytes()
    assert a[1].data.tobytes() == b[1].data.tobytes()


def test_checkpoint_detects_corruption(tmp_path):
    net = build("mlp-small", 2, None, seed=0, input_shape=(3,))
    path = tmp_path / "m.ckpt"
    backbone.save_checkpoint(net, path)
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="checksum"):
        backbone.load_checkpoint(path)
