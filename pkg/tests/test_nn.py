import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skinn import autodiff as ad
from skinn.nn import (
    Adam,
    ConfigError,
    MlpConfig,
    MlpParams,
    init_mlp,
    mlp_forward,
    mlp_input_grad,
    param_count,
    params_from_bytes,
    params_to_bytes,
)

from conftest import central_diff


def test_default_config_is_three_by_thirty_two():
    cfg = MlpConfig()
    assert (cfg.hidden_layers, cfg.hidden_width) == (3, 32)


def test_seeded_init_is_deterministic():
    cfg = MlpConfig(seed=7)
    assert np.array_equal(init_mlp(cfg).flat, init_mlp(cfg).flat)


def test_parameter_count():
    assert param_count(MlpConfig(input_dim=4, hidden_layers=3, hidden_width=32)) == 2305


def test_biases_start_at_zero_and_weights_within_kaiming_bound():
    cfg = MlpConfig(input_dim=4)
    p = init_mlp(cfg)
    for li, (w, b) in enumerate(p.layers()):
        assert np.all(b == 0.0)
        assert np.all(np.abs(w) <= np.sqrt(6.0 / w.shape[0]))


@pytest.mark.parametrize("field", ["input_dim", "hidden_layers", "hidden_width"])
def test_zero_dims_rejected(field):
    with pytest.raises(ConfigError):
        MlpConfig(**{field: 0})


def test_zero_network_outputs_zero():
    cfg = MlpConfig(input_dim=3)
    p = MlpParams(cfg, np.zeros(param_count(cfg)))
    assert mlp_forward(p, cfg, np.array([0.3, -2.0, 5.0])) == 0.0
    assert np.all(mlp_input_grad(p, np.ones((4, 3))) == 0.0)


def _identity_net(w_out, b_out):
    cfg = MlpConfig(input_dim=3, hidden_layers=1, hidden_width=3, activation="relu")
    flat = np.concatenate([np.eye(3).ravel(), np.zeros(3), np.asarray(w_out, float), [b_out]])
    return MlpParams(cfg, flat)


def test_relu_identity_layer_passes_positive_inputs():
    p = _identity_net([1.0, -2.0, 0.5], 0.25)
    x = np.array([0.4, 1.5, 2.0])
    assert mlp_forward(p, p.config, x) == pytest.approx(0.4 - 3.0 + 1.0 + 0.25, abs=1e-15)


def test_linear_network_input_gradient_is_weights():
    w = np.array([1.0, -2.0, 0.5])
    p = _identity_net(w, 0.0)
    g = mlp_input_grad(p, np.array([[0.4, 1.5, 2.0], [1.0, 1.0, 1.0]]))
    assert np.allclose(g, w)


def test_dimension_mismatch_rejected():
    cfg = MlpConfig(input_dim=3)
    with pytest.raises(ValueError):
        mlp_forward(init_mlp(cfg), cfg, np.ones(4))


def test_forward_first_order_taylor_error_is_second_order():
    cfg = MlpConfig(input_dim=3, activation="silu", seed=3)
    p = init_mlp(cfg)
    x = np.array([0.9, 0.4, 0.02])
    g = mlp_input_grad(p, x)
    for i in range(3):
        errs = []
        for h in (1e-3, 1e-4):
            e = np.zeros(3)
            e[i] = h
            errs.append(abs(mlp_forward(p, cfg, x + e) - mlp_forward(p, cfg, x) - h * g[i]))
        # O(h^2): shrinking h tenfold shrinks the error about a hundredfold
        assert errs[1] <= errs[0] / 50 + 1e-15


@pytest.mark.parametrize("act", ["relu", "silu", "tanh"])
def test_input_gradient_matches_finite_differences(act):
    cfg = MlpConfig(input_dim=3, activation=act, seed=11)
    p = init_mlp(cfg)
    X = np.random.default_rng(0).uniform(-1, 1, (20, 3))
    G = mlp_input_grad(p, X)
    for x, g in zip(X, G):
        fd = central_diff(lambda v: mlp_forward(p, cfg, v), x, 1e-6)
        assert np.allclose(g, fd, atol=1e-5)


def test_parameter_gradient_complete():
    cfg = MlpConfig(input_dim=3, hidden_layers=2, hidden_width=8, seed=1)
    p = init_mlp(cfg)
    t = ad.Tape()
    th = t.lift(p.flat)
    out = ad.vsum(mlp_forward(th, cfg, np.random.default_rng(0).normal(size=(5, 3))))
    (g,) = ad.grad(out, [th])
    assert g.shape == (param_count(cfg),)


def test_per_sample_parameter_rows_match_shared():
    cfg = MlpConfig(input_dim=3, hidden_layers=2, hidden_width=5, seed=2)
    p = init_mlp(cfg)
    X = np.random.default_rng(1).normal(size=(6, 3))
    shared = mlp_forward(p.flat, cfg, X)
    tiled = mlp_forward(np.tile(p.flat, (6, 1)), cfg, X)
    assert np.allclose(shared, tiled, rtol=1e-14)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e-1))
def test_relu_piecewise_linearity(seed, eps):
    cfg = MlpConfig(input_dim=3, hidden_layers=2, hidden_width=8, seed=seed)
    p = init_mlp(cfg)
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, 3)
    d = rng.normal(size=3)
    # same activation pattern at both points
    def pattern(v):
        h, pats = v, []
        for i, (w, b) in enumerate(p.layers()[:-1]):
            h = h @ w + b
            pats.append(h > 0)
            h = np.maximum(h, 0)
        return np.concatenate(pats)

    if not np.array_equal(pattern(x), pattern(x + eps * d)):
        return
    g = mlp_input_grad(p, x)
    lhs = mlp_forward(p, cfg, x + eps * d) - mlp_forward(p, cfg, x)
    rhs = eps * g @ d
    assert abs(lhs - rhs) <= 1e-10 * max(abs(rhs), abs(lhs)) + 1e-16


def test_params_serialisation_round_trip():
    cfg = MlpConfig(input_dim=2, hidden_layers=2, hidden_width=4, activation="silu", seed=9)
    p = init_mlp(cfg)
    blob = params_to_bytes(p) + b"tail"
    q, end = params_from_bytes(blob)
    assert q.config == cfg and np.array_equal(q.flat, p.flat)
    assert blob[end:] == b"tail"
    with pytest.raises(ValueError):
        params_from_bytes(b"garbage")


def test_adam_minimises_quadratic():
    opt = Adam(2, lr=0.1)
    x = np.array([3.0, -2.0])
    for _ in range(500):
        x = opt.step(x, 2 * x)
    assert np.all(np.abs(x) < 1e-3)
