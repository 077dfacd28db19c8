import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from wfquench.core import (GhostSeries, Worldline, eval_F, parse_series, read_worldline_csv,
                           scale_series, write_worldline_csv)
from wfquench.errors import NonPositiveF, NonPositiveLambda, NonPositiveRadius

small = st.floats(-0.5, 0.5, allow_nan=False)
series_st = st.lists(small, min_size=0, max_size=8).map(lambda c: GhostSeries(tuple(c)))


def _positive(s, lo, hi):
    try:
        eval_F(s, np.linspace(lo, hi, 64))
    except NonPositiveF:
        return False
    return True


def test_empty_series_is_one():
    assert eval_F(GhostSeries(()), 7.3) == 1.0


def test_single_term():
    assert eval_F(GhostSeries((0.5,)), 2.0) == 0.75


def test_eval_vectorised_matches_scalar():
    s = GhostSeries((0.3, -0.2, 0.05))
    r = np.array([1.5, 3.0, 10.0])
    assert np.array_equal(eval_F(s, r), np.array([eval_F(s, x) for x in r]))


def test_eval_errors():
    with pytest.raises(NonPositiveRadius):
        eval_F(GhostSeries((0.1,)), 0.0)
    with pytest.raises(NonPositiveF):
        eval_F(GhostSeries((2.0,)), 1.0)


def test_scale_identity_and_example():
    s = GhostSeries((0.4, 0.1))
    assert scale_series(s, 1.0) == s
    out = scale_series(GhostSeries((1.0,)), 2.0)
    assert out.k0 == 4.0 and out.coeffs == (2.0,)
    with pytest.raises(NonPositiveLambda):
        scale_series(s, 0.0)


def test_too_many_coefficients():
    with pytest.raises(ValueError):
        GhostSeries((0.0,) * 19)


def test_domain_check():
    s = GhostSeries((3.0,), r_min_valid=1.0)
    assert not s.in_domain()
    assert s.in_domain(r_min=4.0)


@given(series_st, st.floats(0.5, 2.0), st.floats(1.0, 100.0))
def test_scaling_homogeneity(s, lam, r):
    assume(_positive(s, min(r, lam * r), max(r, lam * r)))
    lhs = eval_F(scale_series(s, lam), r)
    rhs = lam ** 2 * eval_F(s, lam * r)
    assert lhs == pytest.approx(rhs, rel=1e-13, abs=1e-13)


@given(series_st, st.floats(1.0, 50.0))
def test_derivative_matches_central_difference(s, r):
    h = 1e-5 * r
    assume(_positive(s, r - h, r + h))
    fd = (eval_F(s, r + h) - eval_F(s, r - h)) / (2 * h)
    an = s.derivative(r)
    assert abs(fd - an) <= 1e-6 * max(abs(an), 1e-6)


def test_series_text_round_trip():
    s = GhostSeries((0.1234567890123456789, -2.5e-7, 3.0), k0=0.97)
    back = parse_series(s.to_text())
    assert back.coeffs == s.coeffs and back.k0 == s.k0


@pytest.mark.parametrize("text", ["k1 = 0.2\n", "k0 = 1\nk2 = 0.1\n", "k0 = 1\nfoo = 2\n",
                                  "k0 = 1\nk0 = 1\n", "k0 = one\n"])
def test_series_text_rejects(text):
    with pytest.raises(ValueError):
        parse_series(text)


def _wl(seed, n=50):
    """Smooth random worldline, x consistent with v."""
    rng = np.random.default_rng(seed)
    t = np.sort(rng.uniform(0.0, 40.0, n))
    a, w, ph = rng.uniform(0.1, 0.7), rng.uniform(0.05, 0.5), rng.uniform(0, 2 * np.pi)
    v = a * np.sin(w * t + ph)
    x = -a / w * np.cos(w * t + ph)
    return Worldline(t, x, v)


@given(st.integers(0, 10_000))
def test_worldline_csv_round_trip_is_lossless(tmp_path_factory, seed):
    wl = _wl(seed)
    path = tmp_path_factory.mktemp("wl") / "w.csv"
    write_worldline_csv(wl, path)
    back = read_worldline_csv(path)
    for name in ("t", "x", "v", "tau"):
        assert np.array_equal(getattr(back, name), getattr(wl, name))
    tt = np.linspace(*wl.span, 37)
    assert np.array_equal(back.position(tt), wl.position(tt))


def test_worldline_validation():
    with pytest.raises(ValueError):
        Worldline([0.0, 1.0], [0.0, 0.0], [0.0, 1.0])
    with pytest.raises(ValueError):
        Worldline([0.0, 0.0], [0.0, 0.0], [0.0, 0.0])
    Worldline([0.0, 1.0], [0.0, 0.0], [0.0, 1.0], check_speed=False)


def test_boost_inverse_is_identity():
    wl = _wl(3)
    back = wl.boosted(0.3).boosted(-0.3)
    assert np.allclose(back.t, wl.t, rtol=0, atol=1e-12)
    assert np.allclose(back.x, wl.x, rtol=0, atol=1e-12)
    assert np.allclose(back.v, wl.v, rtol=0, atol=1e-14)


def test_boost_preserves_proper_time():
    wl = _wl(5)
    b = wl.boosted(0.4)
    dt, dx = np.diff(b.t), np.diff(b.x)
    dt0, dx0 = np.diff(wl.t), np.diff(wl.x)
    assert np.allclose(dt ** 2 - dx ** 2, dt0 ** 2 - dx0 ** 2, rtol=1e-12, atol=1e-12)
    assert np.array_equal(b.tau, wl.tau)


def test_resample_exact_rows():
    wl = _wl(1)
    r = wl.resample(1000)
    assert len(r) == 1000 and r.span == wl.span
    assert math.isclose(r.tau[-1], wl.tau[-1])
