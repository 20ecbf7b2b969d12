import numpy as np
import pytest
from hypothesis import given, strategies as st

from perimeter_lab.nn import AdamState, DenseNet, adam_step, clip_by_global_norm


def straight_line(net, x):
    """Independent forward: explicit loops over units, no matrix products."""
    a = list(map(float, x))
    for w, b, act in zip(net.weights, net.biases, net.activations):
        z = [sum(w[i, j] * a[j] for j in range(len(a))) + b[i] for i in range(w.shape[0])]
        if act == "tanh":
            a = [float(np.tanh(v)) for v in z]
        elif act == "relu":
            a = [max(v, 0.0) for v in z]
        else:
            a = z
    return np.array(a)


def random_net(seed, max_layers=3, max_units=16):
    rng = np.random.default_rng(seed)
    n_layers = int(rng.integers(1, max_layers + 1))
    sizes = [int(rng.integers(1, max_units + 1)) for _ in range(n_layers + 1)]
    acts = [str(rng.choice(["tanh", "relu", "none"])) for _ in range(n_layers)]
    net = DenseNet(sizes, acts, rng, hidden_gain=1.0, output_gain=1.0)
    for b in net.biases:
        b += rng.normal(0, 0.3, b.shape)
    return net, rng


def test_zero_net_outputs_zero():
    net = DenseNet([3, 2], ["none"])
    net.weights[0][:] = 0
    assert np.all(net(np.ones(3)) == 0)


def test_identity_layer():
    net = DenseNet([1, 1], ["none"])
    net.weights[0][:] = 1.0
    assert net(np.array([2.5]))[0] == 2.5


@pytest.mark.parametrize("seed", range(10))
def test_forward_matches_straight_line(seed):
    net, rng = random_net(seed)
    x = rng.normal(size=net.sizes[0])
    assert np.max(np.abs(net(x) - straight_line(net, x))) < 1e-12


def test_batch_and_single_agree():
    net, rng = random_net(11)
    xs = rng.normal(size=(5, net.sizes[0]))
    batch = net(xs)
    for i in range(5):
        assert np.allclose(batch[i], net(xs[i]), rtol=0, atol=1e-14)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        DenseNet([3, 2], ["none"])(np.ones(4))
    with pytest.raises(ValueError):
        DenseNet([3, 2], ["tanh", "none"])
    with pytest.raises(ValueError):
        DenseNet([3, 2], ["sigmoid"])


def test_linear_gradient_is_input():
    net = DenseNet([1, 1], ["none"])
    out, cache = net.forward(np.array([3.0]))
    grads, gx = net.backward(cache, np.array([1.0]))
    assert grads[0][0, 0] == 3.0 and grads[1][0] == 1.0
    assert gx[0] == net.weights[0][0, 0]


def test_tanh_derivative_at_zero():
    net = DenseNet([1, 1], ["tanh"])
    net.weights[0][:] = 1.0
    _, cache = net.forward(np.array([0.0]))
    _, gx = net.backward(cache, np.array([1.0]))
    assert gx[0] == pytest.approx(1.0)


def fd_check(net, rng):
    x = rng.normal(size=(3, net.sizes[0]))
    direction = rng.normal(size=(3, net.sizes[-1]))
    loss = lambda: float(np.sum(direction * net(x)))  # noqa: E731
    _, cache = net.forward(x)
    grads, gx = net.backward(cache, direction)
    worst = 0.0
    h = 1e-5
    for p, g in zip(net.params, grads):
        flat = p.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss()
            flat[i] = old - h
            down = loss()
            flat[i] = old
            fd = (up - down) / (2 * h)
            worst = max(worst, abs(fd - g.reshape(-1)[i]) / max(1.0, abs(fd)))
    return worst


def test_gradients_match_central_differences_50_nets():
    worst = max(fd_check(*random_net(100 + s)) for s in range(50))
    assert worst < 1e-4


def test_stale_cache_rejected():
    net, rng = random_net(4)
    _, cache = net.forward(rng.normal(size=net.sizes[0]))
    net.touch()
    with pytest.raises(RuntimeError, match="stale"):
        net.backward(cache, np.ones(net.sizes[-1]))


@given(st.integers(0, 10_000), st.floats(-10, 10))
def test_forward_deterministic_and_finite(seed, scale):
    net, rng = random_net(seed % 97)
    x = scale * rng.uniform(-1, 1, size=net.sizes[0])
    a, b = net(x), net(x)
    assert np.array_equal(a, b) and np.all(np.isfinite(a))


def test_serialization_round_trip_bit_exact(tmp_path):
    net, rng = random_net(7)
    np.savez(tmp_path / "n.npz", **net.state_dict("p."))
    with np.load(tmp_path / "n.npz") as z:
        back = DenseNet.from_state({k: z[k] for k in z.files}, prefix="p.")
    assert back.activations == net.activations
    x = rng.normal(size=(4, net.sizes[0]))
    assert np.array_equal(back(x), net(x))


def test_from_state_needs_activations():
    net, _ = random_net(8)
    d = net.state_dict()
    del d["activations"]
    with pytest.raises(ValueError):
        DenseNet.from_state(d)
    assert np.array_equal(DenseNet.from_state(d, net.activations)(np.ones(net.sizes[0])),
                          net(np.ones(net.sizes[0])))


# -- Adam ------------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    p = [np.array([1.0, -2.0])]
    st_ = AdamState.like(p)
    adam_step(p, [np.zeros(2)], st_, 1e-3)
    assert np.array_equal(p[0], [1.0, -2.0])


def test_adam_first_step_magnitude_is_lr():
    p = [np.array([1.0, -2.0, 0.5])]
    g = np.array([0.3, -7.0, 1e-3])
    adam_step(p, [g], AdamState.like(p), 5e-4)
    step = p[0] - np.array([1.0, -2.0, 0.5])
    assert np.allclose(step, -np.sign(g) * 5e-4, rtol=1e-4)


def test_adam_rejects_non_finite():
    p = [np.ones(2)]
    st_ = AdamState.like(p)
    with pytest.raises(FloatingPointError):
        adam_step(p, [np.array([1.0, np.nan])], st_, 1e-3)
    assert np.array_equal(p[0], np.ones(2)) and st_.t == 0
    with pytest.raises(ValueError):
        adam_step(p, [np.ones(3)], st_, 1e-3)


def test_adam_quadratic_descends():
    scales = np.array([1.0, 10.0])
    p = [np.array([3.0, -2.0])]
    st_ = AdamState.like(p)
    losses = []
    for _ in range(100):
        losses.append(float(np.sum(scales * p[0] ** 2)))
        adam_step(p, [2 * scales * p[0]], st_, 0.05)
    assert all(b < a for a, b in zip(losses[5:], losses[6:]))


def test_clip_by_global_norm():
    g = [np.array([3.0]), np.array([4.0])]
    clipped, norm = clip_by_global_norm(g, 1.0)
    assert norm == 5.0
    assert np.allclose([c[0] for c in clipped], [0.6, 0.8])
    same, _ = clip_by_global_norm(g, 10.0)
    assert np.array_equal(same[0], g[0])
