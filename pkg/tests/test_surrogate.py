import math

import numpy as np
import pytest
from scipy import stats

from skinn import autodiff as ad
from skinn.nn import MlpConfig
from skinn.skr import SkInputs, bsm_price, get_representation, skr_price
from skinn.surrogate import (
    AE_M_GRID,
    AE_POINTS,
    AE_TAU_GRID,
    FrozenSurrogate,
    SAMPLING_BOUNDS,
    SdeSpec,
    SimulationError,
    SurrogateDataset,
    bilinear_weights,
    bsm_surfaces,
    build_surrogate_dataset,
    simulate_price,
    simulate_terminal,
    surrogate_as_skr,
    train_autoencoder,
    train_surrogate,
)

from conftest import tape_grad

BSM_BOUNDS = {"m": (0.5, 1.5), "tau": (7 / 365, 1.0), "r": (0.0, 0.08), "sigma": (0.05, 0.6)}


def bsm_dataset(n, seed=0):
    rng = np.random.default_rng(seed)
    X = np.column_stack([rng.uniform(*BSM_BOUNDS[c], n) for c in ("m", "tau", "r", "sigma")])
    price = bsm_price(SkInputs.from_moneyness(X[:, 0], X[:, 1], X[:, 2]), X[:, 3]) / X[:, 0]
    return SurrogateDataset("BSM", ("m", "tau", "r", "sigma"), X, price, BSM_BOUNDS)


@pytest.fixture(scope="module")
def bsm_surrogate():
    cfg = MlpConfig(input_dim=4, hidden_layers=3, hidden_width=64, activation="silu")
    return train_surrogate(bsm_dataset(50_000), cfg, epochs=40)


@pytest.fixture(scope="module")
def hsv_surrogate():
    ds = build_surrogate_dataset("HSV", 300, seed=5, paths=200)
    cfg = MlpConfig(input_dim=8, hidden_layers=2, hidden_width=16, activation="silu")
    return train_surrogate(ds, cfg, epochs=30, batch_size=64)


# ------------------------------------------------------------- simulator


def test_vanishing_vol_of_vol_matches_bsm():
    x = SkInputs(100.0, 105.0, 0.03, 0.5)
    spec = SdeSpec("HSV", kappa=1.5, v_theta=0.04, v0=0.04, sigma_v=1e-6, rho=-0.5, paths=40_000, seed=3)
    price, se = simulate_price(spec, x)
    assert abs(price - bsm_price(x, 0.2)) < 3 * se


def test_zero_variance_is_deterministic_drift():
    x = SkInputs(100.0, 95.0, 0.04, 0.75)
    spec = SdeSpec("HSV", v0=0.0, v_theta=0.0, sigma_v=0.3, paths=1000, seed=1)
    price, _ = simulate_price(spec, x)
    ref = math.exp(-0.04 * 0.75) * max(100 * math.exp(0.04 * 0.75) - 95, 0)
    assert abs(price - ref) < 1e-4


def test_nasv_half_elasticity_bit_matches_heston():
    common = dict(kappa=2.5, v_theta=0.05, v0=0.03, sigma_v=0.7, rho=-0.6, paths=5000, seed=42)
    a = simulate_terminal(SdeSpec("HSV", **common), 100.0, 0.02, 0.6)
    b = simulate_terminal(SdeSpec("NASV", gamma=0.5, **common), 100.0, 0.02, 0.6)
    assert np.array_equal(a, b)


def test_simulation_is_seeded():
    spec = SdeSpec("NASV", gamma=0.7, paths=3000, seed=9)
    assert np.array_equal(simulate_terminal(spec, 1.0, 0.01, 0.3), simulate_terminal(spec, 1.0, 0.01, 0.3))
    other = SdeSpec("NASV", gamma=0.7, paths=3000, seed=10)
    assert not np.array_equal(simulate_terminal(spec, 1.0, 0.01, 0.3), simulate_terminal(other, 1.0, 0.01, 0.3))


def test_exploding_paths_report_the_step():
    spec = SdeSpec("NASV", gamma=3.0, sigma_v=20.0, v0=1.0, v_theta=1.0, kappa=0.5, paths=200, steps=200, seed=0)
    with pytest.raises(SimulationError, match="step"):
        simulate_terminal(spec, 1.0, 0.0, 1.0)


def test_invalid_spec_rejected():
    with pytest.raises(ValueError):
        SdeSpec("HSV", rho=1.0)
    with pytest.raises(ValueError):
        SdeSpec("HSV", gamma=0.7)


def test_full_truncation_keeps_variance_inputs_non_negative():
    # with the numpy twin, instrument the stepping: positive part before use
    from skinn.kernels import sv_terminal_numpy

    z = np.random.default_rng(0).standard_normal((100, 2, 500))
    st, bad = sv_terminal_numpy(1.0, 0.01, 0.0, 0.5, 0.01, 1.5, -0.9, 0.5, 0.01, z)
    assert bad == -1 and np.all(np.isfinite(st)) and np.all(st > 0)


# --------------------------------------------------------------- datasets


def test_empty_dataset():
    ds = build_surrogate_dataset("HSV", 0)
    assert len(ds) == 0 and ds.X.shape == (0, 8)


def test_dataset_prices_within_payoff_bounds():
    ds = build_surrogate_dataset("NASV", 40, seed=2, paths=200)
    assert np.all(ds.price >= 0)
    # C/K <= S/K = 1/m
    assert np.all(ds.price <= 1.0 / ds.X[:, 0] + 1e-12)
    for j, c in enumerate(ds.columns):
        lo, hi = SAMPLING_BOUNDS[c]
        assert np.all((ds.X[:, j] >= lo) & (ds.X[:, j] <= hi))


def test_dataset_marginals_are_uniform():
    ds = build_surrogate_dataset("HSV", 10_000, seed=11, paths=2, steps=1)
    crit = stats.chi2.ppf(1 - 0.001, 19)
    for j, c in enumerate(ds.columns):
        lo, hi = SAMPLING_BOUNDS[c]
        counts, _ = np.histogram(ds.X[:, j], bins=20, range=(lo, hi))
        chi2 = np.sum((counts - 500.0) ** 2 / 500.0)
        assert chi2 < crit, c


def test_dataset_deterministic_and_parallel_invariant():
    a = build_surrogate_dataset("HSV", 12, seed=4, paths=100)
    b = build_surrogate_dataset("HSV", 12, seed=4, paths=100, jobs=3)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.price, b.price)


def test_degenerate_bounds_rejected():
    with pytest.raises(ValueError):
        build_surrogate_dataset("HSV", 5, bounds={"kappa": (2.0, 2.0)})


def test_dataset_csv_round_trip(tmp_path):
    ds = build_surrogate_dataset("HSV", 5, seed=1, paths=50)
    ds.to_csv(tmp_path / "d.csv")
    back = SurrogateDataset.from_csv(tmp_path / "d.csv")
    assert back.columns == ds.columns and np.array_equal(back.X, ds.X) and np.array_equal(back.price, ds.price)
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == ",".join(ds.columns) + ",price"


# -------------------------------------------------------------- training


def test_constant_target_surrogate():
    rng = np.random.default_rng(0)
    X = rng.uniform(0, 1, (512, 4))
    ds = SurrogateDataset("BSM", ("m", "tau", "r", "sigma"), X, np.full(512, 0.125))
    fr = train_surrogate(ds, MlpConfig(input_dim=4, hidden_layers=1, hidden_width=8, activation="silu"),
                         epochs=1000, lr=1e-2, batch_size=0)
    assert fr.rmse < 1e-3
    assert np.allclose(fr(X), 0.125, atol=3e-3)


def test_bsm_surrogate_accuracy(bsm_surrogate):
    test = bsm_dataset(5000, seed=99)
    err = np.sqrt(np.mean((bsm_surrogate(test.X) - test.price) ** 2))
    assert bsm_surrogate.rmse < 5e-3 and err < 5e-3


def test_bsm_surrogate_monotone_in_sigma(bsm_surrogate):
    # coarse interior probes: where vega vanishes the price is flat in sigma and
    # the comparison would only measure fitting noise
    m, t = np.meshgrid([0.8, 0.9, 1.0, 1.1, 1.2], [0.25, 0.5, 1.0])
    sig = np.array([0.1, 0.2, 0.35, 0.5])
    viol = total = 0
    for mi, ti in zip(m.ravel(), t.ravel()):
        X = np.column_stack([np.full(4, mi), np.full(4, ti), np.full(4, 0.03), sig])
        d = np.diff(bsm_surrogate(X))
        viol += int(np.sum(d < 0))
        total += d.size
    assert viol <= 0.02 * total


def test_surrogate_retraining_is_deterministic():
    ds = bsm_dataset(300, seed=2)
    cfg = MlpConfig(input_dim=4, hidden_layers=1, hidden_width=8, activation="silu", seed=5)
    a = train_surrogate(ds, cfg, epochs=3, batch_size=64)
    b = train_surrogate(ds, cfg, epochs=3, batch_size=64)
    assert np.array_equal(a.params.flat, b.params.flat)


def test_empty_dataset_cannot_train():
    with pytest.raises(ValueError):
        train_surrogate(build_surrogate_dataset("HSV", 0))


def test_divergence_is_reported():
    ds = bsm_dataset(64)
    with pytest.raises(FloatingPointError, match="non-finite|epoch"), np.errstate(all="ignore"):
        train_surrogate(ds, MlpConfig(input_dim=4, hidden_layers=1, hidden_width=4), epochs=50, lr=1e200)


def test_frozen_surrogate_round_trip(tmp_path, hsv_surrogate):
    hsv_surrogate.save(tmp_path / "s.bin")
    back = FrozenSurrogate.load(tmp_path / "s.bin")
    X = np.random.default_rng(0).uniform(0, 1, (10, 8))
    assert np.array_equal(back(X), hsv_surrogate(X))
    assert back.input_names == hsv_surrogate.input_names


# ------------------------------------------------------------ autoencoder


def test_autoencoder_memorises_one_surface():
    surf, _ = bsm_surfaces(1, seed=3)
    S = np.repeat(surf, 16, axis=0)
    enc, dec = train_autoencoder(S, 2, MlpConfig(hidden_layers=1, hidden_width=16, activation="silu"), epochs=300)
    rep = surrogate_as_skr(dec)
    assert np.max(np.abs(np.asarray(rep.surface(rep.constrain(rep.init_raw()))) - surf[0])) < 1e-4


def test_autoencoder_capacity_monotone():
    surf, _ = bsm_surfaces(64, seed=1, noise=0.01)
    cfg = MlpConfig(hidden_layers=1, hidden_width=32, activation="silu")
    _, d2 = train_autoencoder(surf, 2, cfg, epochs=400)
    _, d200 = train_autoencoder(surf, 200, cfg, epochs=400)
    assert d200.rmse <= d2.rmse


def test_autoencoder_reaches_noise_floor():
    clean, sig = bsm_surfaces(300, noise=0.0, seed=7)
    noisy, _ = bsm_surfaces(300, noise=0.01, seed=7)
    noise_rms = np.sqrt(np.mean((noisy - clean) ** 2))
    _, dec = train_autoencoder(noisy, 2, MlpConfig(hidden_layers=2, hidden_width=64, activation="silu"),
                               epochs=1500, lr=2e-3)
    assert dec.rmse < 2 * noise_rms


def test_autoencoder_rejects_wrong_surface_length():
    with pytest.raises(ValueError):
        train_autoencoder(np.zeros((3, 199)), 2, epochs=1)


# -------------------------------------------------------- as representation


def test_surrogate_phi_gradient_matches_finite_difference(hsv_surrogate):
    rep = surrogate_as_skr(hsv_surrogate, 5)
    x = SkInputs(100.0, np.array([90.0, 100.0, 115.0]), 0.03, np.array([0.2, 0.5, 0.9]))
    phi = np.array([0.05, 0.06, 0.4, -0.5, 2.0])
    _, g = tape_grad(lambda p: rep.price(x, p), phi)
    for j in range(5):
        h = 1e-6
        e = np.zeros(5)
        e[j] = h
        fd = (np.sum(rep.price(x, phi + e)) - np.sum(rep.price(x, phi - e))) / (2 * h)
        assert abs(g[j] - fd) < 1e-5


def test_frozen_weights_are_not_differentiable_inputs(hsv_surrogate):
    rep = surrogate_as_skr(hsv_surrogate)
    t = ad.Tape()
    raw = t.lift(rep.init_raw())
    out = ad.vsum(rep.price(SkInputs(1.0, 1.0, 0.0, 0.5), rep.constrain(raw)))
    # the only leaves on the tape are the phi raws
    assert [op for op in t._ops if op == "leaf"] == ["leaf"]
    assert ad.grad(out, [raw])[0].shape == (5,)


def test_slot_mismatch_rejected(hsv_surrogate):
    with pytest.raises(ValueError):
        surrogate_as_skr(hsv_surrogate, 6)


def test_dispatch_through_skr_price(hsv_surrogate):
    rep = get_representation("DSNN-HSV", surrogate=hsv_surrogate)
    x = SkInputs(100.0, 100.0, 0.02, 0.5)
    phi = rep.constrain(rep.init_raw())
    assert np.array_equal(skr_price(rep, x, phi), rep.price(x, phi))


def test_decoder_lookup_exact_at_grid_nodes():
    surf, _ = bsm_surfaces(8, seed=0)
    _, dec = train_autoencoder(surf, 2, MlpConfig(hidden_layers=1, hidden_width=8, activation="silu"), epochs=5)
    rep = surrogate_as_skr(dec)
    phi = rep.constrain(rep.init_raw())
    grid = np.asarray(rep.surface(phi))
    mm, tt = np.meshgrid(AE_M_GRID, AE_TAU_GRID, indexing="ij")
    x = SkInputs.from_moneyness(mm.ravel(), tt.ravel(), 0.02, S=100.0)
    assert np.allclose(np.asarray(rep.price(x, phi)) / x.K, grid, rtol=1e-12, atol=1e-15)



def test_decoder_input_gradients_match_finite_difference():
    surf, _ = bsm_surfaces(8, seed=0)
    _, dec = train_autoencoder(surf, 2, MlpConfig(hidden_layers=1, hidden_width=8, activation="silu"), epochs=5)
    rep = surrogate_as_skr(dec)
    phi = np.asarray(rep.constrain(rep.init_raw() + 0.3))
    x = SkInputs(np.array([100.0, 97.0]), np.array([93.3, 104.1]), np.array([0.01, 0.04]), np.array([0.33, 0.71]))
    tape = ad.Tape()
    vs = [tape.lift(np.asarray(v, dtype=float).copy()) for v in (x.S, x.K, x.r, x.tau)]
    grads = ad.grad(ad.vsum(rep.price(SkInputs(*vs), phi)), vs)
    base = [np.asarray(v, dtype=float) for v in (x.S, x.K, x.r, x.tau)]
    for k, g in enumerate(grads):
        h = 1e-7 * np.maximum(1.0, base[k])  # the lookup is piecewise bilinear
        up, dn = list(base), list(base)
        up[k], dn[k] = base[k] + h, base[k] - h
        fd = (np.asarray(rep.price(SkInputs(*up), phi)) - np.asarray(rep.price(SkInputs(*dn), phi))) / (2 * h)
        assert np.allclose(g, fd, rtol=1e-5, atol=1e-7)


def test_bilinear_weights_interpolate_within_cell():
    idx, w = bilinear_weights(np.array([0.71, 1.0]), np.array([0.3, 0.9]))
    assert np.allclose(w.sum(axis=1), 1.0) and np.all(w >= 0)
    f = np.add.outer(2 * AE_M_GRID, 3 * AE_TAU_GRID).ravel()  # bilinear functions are reproduced
    assert np.allclose((f[idx] * w).sum(axis=1), [2 * 0.71 + 0.9, 2.0 + 2.7])
    assert AE_POINTS == 200
