import numpy as np
import pytest

from mdmeta import diffengine as ad
from mdmeta.features import (MlpParams, feature_net, init_mlp, linf_bound, load_model, param_count,
                             save_model, split_flat, stack_params, surrogate_net)

ARCH = (6, 16, 16, 12)


def test_flatten_roundtrip_and_json(tmp_path):
    p = init_mlp(3, ARCH)
    q = MlpParams.unflatten(p.flatten(), ARCH, 3)
    assert np.array_equal(q.flatten(), p.flatten())
    assert p.size == param_count(ARCH) == p.flatten().size
    save_model(tmp_path / "m.json", p, note="x")
    back, doc = load_model(tmp_path / "m.json")
    assert np.array_equal(back.flatten(), p.flatten()) and doc["note"] == "x"
    with pytest.raises(ValueError):
        MlpParams.from_dict({"architecture": [6, 3], "layers": [{"W": np.zeros((6, 2)).tolist(), "b": [0, 0]}]})


def test_init_determinism_and_statistics():
    a, b = init_mlp(11, ARCH), init_mlp(11, ARCH)
    assert np.array_equal(a.flatten(), b.flatten())
    assert all(np.all(bias == 0.0) for bias in a.biases)
    big = init_mlp(0, (100, 100))
    lim = np.sqrt(6.0 / 200)
    std = big.weights[0].std()
    assert abs(std - lim / np.sqrt(3.0)) < 0.15 * lim / np.sqrt(3.0)
    assert np.all(np.isfinite(big.flatten()))


def test_zero_and_bias_only_networks():
    rng = np.random.default_rng(0)
    q, qd = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    zero = MlpParams.unflatten(np.zeros(param_count(ARCH)), ARCH)
    assert np.all(feature_net(zero.weights, zero.biases, q, qd, 4) == 0.0)
    b = rng.standard_normal(12)
    zero.biases[-1] = b
    Y = feature_net(zero.weights, zero.biases, q, qd, 4)
    assert Y.shape == (5, 3, 4)
    for k in range(5):
        np.testing.assert_array_equal(Y[k], b.reshape(3, 4))
    sarch = (6, 8, 3)
    s0 = MlpParams.unflatten(np.zeros(param_count(sarch)), sarch)
    assert np.all(surrogate_net(s0.weights, s0.biases, q, qd) == 0.0)
    s0.biases[-1] = np.array([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(surrogate_net(s0.weights, s0.biases, q, qd), np.tile([1.0, 2.0, 3.0], (5, 1)))


def test_feature_net_shape_checks():
    p = init_mlp(0, ARCH)
    with pytest.raises(ValueError):
        feature_net(p.weights, p.biases, np.zeros(3), np.zeros(3), 5)


@pytest.mark.parametrize("arch,d", [(ARCH, 4), ((6, 8, 3), None)])
def test_parameter_jacobian_matches_fd(arch, d):
    rng = np.random.default_rng(1)
    p = init_mlp(2, arch)
    q, qd = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    probe = rng.standard_normal((4, 3, d) if d else (4, 3))

    def prog(flat):
        Ws, bs = split_flat(flat, arch)
        out = feature_net(Ws, bs, q, qd, d) if d else surrogate_net(Ws, bs, q, qd)
        return ad.sum_(out * probe)
    assert ad.grad_check(prog, p.flatten(), 1e-6) < 1e-5


def test_stacked_networks_match_individual_evaluation():
    rng = np.random.default_rng(3)
    arch = (6, 8, 3)
    nets = [init_mlp(s, arch) for s in range(3)]
    Ws, bs = stack_params(nets)
    q, qd = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
    batched = surrogate_net(Ws, bs, q, qd)
    for k, net in enumerate(nets):
        np.testing.assert_allclose(batched[k], surrogate_net(net.weights, net.biases, q[k], qd[k]), rtol=1e-13)
    out = surrogate_net(nets[0].weights, nets[0].biases, 50 * q, 50 * qd)
    assert np.all(np.abs(out) <= linf_bound(nets[0]) + 1e-12)
