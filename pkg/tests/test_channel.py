import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feelpower import channel as ch
from feelpower.channel import ConfigError, DomainError, build_config


def test_unit_conversions():
    assert ch.db_to_linear(-90) == pytest.approx(1e-9, rel=1e-12)
    assert ch.dbm_to_mw(-77) == pytest.approx(10 ** (-7.7), rel=1e-12)
    assert ch.mb_to_bits(0.7) == pytest.approx(5.6e6)
    assert ch.mb_to_bits(1, binary=True) == 8 * 2**20


def test_default_config_matches_reference_setting():
    cfg = build_config()
    assert (cfg.num_nodes, cfg.num_devices, cfg.num_antennas) == (10, 20, 4)
    assert cfg.power_budget == 50.0
    assert cfg.bandwidth == 4e6 and cfg.tx_time == 200.0
    assert cfg.bits_per_sample[0] == pytest.approx(5.6e6)
    assert cfg.initial_samples == (50.0,) * 10
    assert [len(g) for g in cfg.node_devices] == [2] * 10


@pytest.mark.parametrize(
    "kw",
    [
        dict(power_budget_mw=0),
        dict(bandwidth_hz=-1),
        dict(dataset_cap=10, initial_samples=50),
        dict(num_antennas=0),
        dict(num_nodes=5, num_devices=3),
        dict(fading_variance="bogus"),
    ],
)
def test_invalid_config_rejected(kw):
    with pytest.raises(ConfigError):
        build_config(**kw)


def test_partition_must_cover_devices():
    cfg = build_config(num_nodes=2, num_devices=4)
    with pytest.raises(ConfigError):
        cfg.replace(node_devices=((0, 1), (1, 2)))
    with pytest.raises(ConfigError):
        cfg.replace(node_devices=((0, 1), (2, 4)))


def test_unit_channel_gain():
    G = ch.composite_gains(np.array([[1 + 0j]]), [1.0])
    assert G[0, 0] == 1.0


def test_orthogonal_channels_do_not_interfere():
    G = ch.composite_gains(np.array([[1, 0], [0, 1]], dtype=complex), [1.0, 1.0])
    assert G[0, 1] == 0.0 and G[1, 0] == 0.0
    assert G[0, 0] == 1.0 and G[1, 1] == 1.0


def test_composite_gain_formula_against_loops():
    rng = np.random.default_rng(1)
    h = rng.standard_normal((4, 3)) + 1j * rng.standard_normal((4, 3))
    rho = rng.uniform(0.5, 2.0, 4)
    G = ch.composite_gains(h, rho)
    for k in range(4):
        nk = sum(abs(v) ** 2 for v in h[k])
        for l in range(4):
            if k == l:
                want = rho[k] * nk
            else:
                inner = sum(np.conj(h[k, n]) * h[l, n] for n in range(3))
                want = rho[l] * abs(inner) ** 2 / nk
            assert G[k, l] == pytest.approx(want, rel=1e-12)
        # Cauchy-Schwarz
        for l in range(4):
            if l != k:
                assert G[k, l] <= rho[l] * np.sum(np.abs(h[l]) ** 2) * (1 + 1e-12)


def test_zero_fading_row_is_zero():
    h = np.array([[0, 0], [1, 1j]], dtype=complex)
    G = ch.composite_gains(h, [1.0, 1.0])
    assert np.all(G[0] == 0.0)
    assert G[1, 1] == pytest.approx(2.0)


def test_sample_channels_deterministic_and_reconstructible():
    cfg = build_config()
    a, b = ch.sample_channels(cfg, 7), ch.sample_channels(cfg, 7)
    assert np.array_equal(a.gains, b.gains) and np.array_equal(a.h, b.h)
    assert not np.array_equal(a.gains, ch.sample_channels(cfg, 8).gains)
    G = ch.composite_gains(a.h, cfg.path_loss)
    np.testing.assert_allclose(G, a.gains, rtol=1e-12)
    assert np.all(np.diag(a.gains) > 0)


def test_fading_variance_modes():
    unit = build_config(num_devices=2000, num_nodes=1)
    h = ch.sample_channels(unit, 0).h
    # CN(0, 1): real and imaginary parts each have variance 1/2
    assert np.var(h.real) == pytest.approx(0.5, rel=0.05)
    literal = build_config(num_devices=20, num_nodes=1, path_loss_db=0.0, fading_variance="path_loss")
    lit = ch.sample_channels(literal, 0)
    np.testing.assert_allclose(lit.gains, ch.composite_gains(lit.h, literal.path_loss))


def test_rate_examples():
    # SNR = 1 -> one bit
    assert ch.rate(np.array([[2.0]]), [0.5], 1.0, 0) == pytest.approx(1.0)
    G = np.array([[2.0, 1.0], [1.0, 2.0]])
    assert np.all(ch.rates(G, [0.0, 0.0], 1.0) == 0.0)
    # log2(1 + 2 / (1 + 1))
    assert ch.rate(G, [1.0, 1.0], 1.0, 0) == pytest.approx(1.0, abs=1e-15)


def test_rate_domain_errors():
    G = np.eye(2)
    with pytest.raises(DomainError):
        ch.rates(G, [-1.0, 1.0], 1.0)
    with pytest.raises(DomainError):
        ch.rates(G, [1.0, 1.0], 0.0)


def test_sample_count_reference_value():
    cfg = build_config(num_nodes=1, num_devices=1)
    # choose p so that the single device has SNR 1 -> R = 1 bit/s/Hz
    G = np.array([[2.0]])
    sigma2 = 1.0
    p = [0.5]
    oracle = 4e6 * 200 * 1.0 / (0.7 * 8e6) + 50
    assert oracle == pytest.approx(192.857142857, rel=1e-10)
    assert ch.sample_count(G, p, sigma2, cfg, 0) == pytest.approx(oracle, rel=1e-12)
    assert ch.sample_count(G, p, sigma2, cfg, 0, mode="floored") == 192
    assert ch.sample_count(G, [0.0], sigma2, cfg, 0) == 50


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 50.0))
def test_floor_gap_bounded(seed, scale):
    cfg = build_config()
    G = ch.sample_channels(cfg, seed).gains
    p = np.random.default_rng(seed).dirichlet(np.ones(20)) * scale
    cont = ch.node_sample_counts(G, p, cfg.noise_power, cfg)
    flo = ch.node_sample_counts(G, p, cfg.noise_power, cfg, mode="floored")
    gap = cont - flo
    assert np.all(gap >= 0)
    assert np.all(gap < np.array([len(g) for g in cfg.node_devices]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 19), st.floats(1e-3, 10.0))
def test_rate_monotonicity(seed, j, delta):
    cfg = build_config()
    G = ch.sample_channels(cfg, seed).gains
    p = np.random.default_rng(seed).uniform(0, 5, 20)
    q = p.copy()
    q[j] += delta
    r0, r1 = ch.rates(G, p, cfg.noise_power), ch.rates(G, q, cfg.noise_power)
    assert r1[j] >= r0[j]
    others = np.arange(20) != j
    assert np.all(r1[others] <= r0[others] + 1e-12)


def test_channels_csv_round_trip():
    cfg = build_config()
    state = ch.sample_channels(cfg, 4)
    buf = io.StringIO()
    ch.write_channels_csv(state, buf)
    back = ch.read_channels_csv(io.StringIO(buf.getvalue()), cfg.path_loss)
    assert np.array_equal(back.h, state.h)
    np.testing.assert_allclose(back.gains, state.gains, rtol=1e-12)


def test_make_rng_is_stable():
    a = ch.make_rng(123).standard_normal(3)
    b = ch.make_rng(123).standard_normal(3)
    assert np.array_equal(a, b)
    assert math.isfinite(float(a.sum()))
