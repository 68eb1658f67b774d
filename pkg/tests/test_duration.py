import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from maskconv.diffusion import MaskSchedule
from maskconv.duration import (
    RatioSamplingError,
    euler_integrate,
    flow_point,
    fm_loss,
    interpolation_index,
    predict_ratio,
    resample_length,
    resample_to,
    round_half_away,
    target_length,
    twoway_cfg,
)
from maskconv.model import ConversionModel, ModelConfig
from maskconv.train import draw_noise, loss_parts, make_batch


def test_fm_loss_exact_velocity():
    assert fm_loss(1.7 - 0.3, 0.3, 1.7, 0.4) == 0.0


def test_fm_loss_arithmetic():
    assert fm_loss(0.0, 0.0, 2.0, 0.5) == 4.0


def test_fm_loss_random_triple():
    rng = np.random.default_rng(0)
    v, u0, r = rng.standard_normal(3)
    assert fm_loss(v, u0, r, 0.3) == pytest.approx((v - r + u0) ** 2, rel=1e-15)


def test_fm_loss_tensor_mean_and_domain():
    v, u0, r, t = (torch.tensor(x, dtype=torch.float64) for x in ([1.0, 2.0], [0.0, 0.5], [1.0, 1.0], [0.1, 0.9]))
    assert float(fm_loss(v, u0, r, t)) == pytest.approx((0.0 + 2.25) / 2)
    with pytest.raises(ValueError):
        fm_loss(0.0, 0.0, 1.0, 1.5)
    with pytest.raises(ValueError):
        fm_loss(v, u0, r, torch.tensor([0.5, -0.1]))


def test_flow_point_endpoints():
    assert flow_point(-0.7, 1.3, 0.0) == -0.7
    assert flow_point(-0.7, 1.3, 1.0) == 1.3


def test_single_euler_step_constant_field():
    assert euler_integrate(lambda u, t: 2.5, 0.0, 1) == 2.5


def test_euler_linear_field_exact_for_constant_velocity():
    assert euler_integrate(lambda u, t: -1.0, 3.0, 16) == pytest.approx(2.0)


def test_euler_non_finite_raises():
    with pytest.raises(RatioSamplingError):
        euler_integrate(lambda u, t: u * 1e308, 1e10, 4)
    with pytest.raises(ValueError):
        euler_integrate(lambda u, t: u, 0.0, 0)


class ConstantField:
    """Duck-typed model whose duration velocity is a constant."""

    def __init__(self, k):
        self.k = k

    def encode_batch(self, src, lengths=None):
        return torch.zeros(src.shape[0], src.shape[1], 2)

    def dp_pool(self, content, src, lengths=None):
        return torch.zeros(content.shape[0], 2)

    def dp_velocity(self, pooled, u, t):
        return torch.full_like(u, self.k)


def test_predict_ratio_constant_field_and_clamp():
    rng = np.random.default_rng(0)
    u0 = rng.standard_normal(1)[0]
    got = predict_ratio(ConstantField(1.5), [1, 2, 3], steps=1, rng=np.random.default_rng(0))
    assert got == pytest.approx(min(max(u0 + 1.5, 0.25), 4.0))
    assert predict_ratio(ConstantField(100.0), [1], steps=1) == 4.0
    assert predict_ratio(ConstantField(-100.0), [1], steps=1) == 0.25


def test_predict_ratio_seeded():
    torch.manual_seed(0)
    m = ConversionModel(ModelConfig(d_model=16, n_heads=2, enc_layers=1, ff_mult=2, dp_hidden=16)).eval()
    a = predict_ratio(m, [4, 5, 6], 16, np.random.default_rng(3))
    b = predict_ratio(m, [4, 5, 6], 16, np.random.default_rng(3))
    assert a == b


@pytest.mark.parametrize("x,expected", [(0.5, 1), (1.5, 2), (2.5, 3), (-0.5, -1), (2.4999, 2), (0.0, 0)])
def test_round_half_away(x, expected):
    assert round_half_away(x) == expected


def test_identity_ratio():
    n, idx = resample_length(7, 1.0)
    assert n == 7 and idx == list(range(1, 8))


def test_halving_example():
    assert resample_length(4, 0.5) == (2, [2, 4])


def test_doubling_repeats_each_index_twice():
    n, idx = resample_length(3, 2.0)
    assert n == 6 and sorted(idx) == [1, 1, 2, 2, 3, 3]


def test_zero_length_clamped_with_warning():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        assert target_length(3, 0.1) == 1
    assert caught


def test_bad_inputs():
    with pytest.raises(ValueError):
        target_length(0, 1.0)
    with pytest.raises(ValueError):
        target_length(3, 0.0)


def test_identity_for_all_lengths_up_to_512():
    for n in range(1, 513):
        assert resample_length(n, 1.0) == (n, list(range(1, n + 1)))


@given(st.integers(1, 300), st.integers(1, 300))
def test_index_map_monotone_in_range_and_exact(n_src, n_tgt):
    idx = [interpolation_index(j, n_src, n_tgt) for j in range(1, n_tgt + 1)]
    assert all(1 <= i <= n_src for i in idx)
    assert all(a <= b for a, b in zip(idx, idx[1:]))
    from fractions import Fraction
    for j, i in zip(range(1, n_tgt + 1), idx):
        x = Fraction(2 * j - 1, 2) * Fraction(n_src, n_tgt) + Fraction(1, 2)
        assert i == math.floor(x + Fraction(1, 2))


def test_resample_to():
    assert resample_to([1, 2, 3, 4], 2) == [2, 4]
    assert resample_to([7], 3) == [7, 7, 7]


def test_twoway_cfg():
    rng = np.random.default_rng(0)
    v, a, b = rng.standard_normal((3, 5))
    assert np.array_equal(twoway_cfg(v, a, b, 0.0, 0.0), v)
    assert np.allclose(twoway_cfg(v, v, v, 3.0, 0.7), v)
    assert np.allclose(twoway_cfg(v, a, b, 1.0, 1.0), 3 * v - a - b)


MARKER_RATIO = {56: 0.6, 57: 1.0, 58: 1.5}


def marker_corpus(rng, n):
    """Random sources whose ratio is fixed by the single marker token they carry."""
    out = []
    for _ in range(n):
        length = int(rng.integers(8, 17))
        src = rng.integers(0, 48, length).tolist()
        marker = int(rng.choice(list(MARKER_RATIO)))
        src[int(rng.integers(length))] = marker
        out.append((src, MARKER_RATIO[marker]))
    return out


@pytest.fixture(scope="module")
def trained_dp():
    torch.manual_seed(0)
    rng = np.random.default_rng(0)
    model = ConversionModel(ModelConfig(d_model=32, n_heads=2, enc_layers=1, dec_layers=1, ff_mult=2,
                                        dp_hidden=128))
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    for _ in range(1500):
        data = marker_corpus(rng, 64)
        batch = make_batch([d[0] for d in data], [[0]] * 64, None, [[0]] * 64, [d[1] for d in data])
        draws = draw_noise(batch, rng, MaskSchedule(), 0.0)
        loss = loss_parts(model, batch, draws, terms=["dp"])["dp"]
        opt.zero_grad()
        loss.backward()
        opt.step()
    return model.eval()


def test_trained_predictor_recovers_deterministic_ratio(trained_dp):
    held = marker_corpus(np.random.default_rng(1), 200)
    pred = [predict_ratio(trained_dp, s, 16, np.random.default_rng(i)) for i, (s, _) in enumerate(held)]
    mse = float(np.mean([(p - r) ** 2 for p, (_, r) in zip(pred, held)]))
    assert mse < 0.01


def test_trained_predictor_collapses_to_point_mass(trained_dp):
    src, _ = marker_corpus(np.random.default_rng(2), 1)[0]
    draws = predict_ratio(trained_dp, src, 16, np.random.default_rng(5), n_samples=1000)
    assert draws.std() < 0.05
