import numpy as np
import pytest

from oracles import km_product_limit, margin_by_hand
from unisurv.km import (
    DegenerateTailError,
    KmCurve,
    censor_weight,
    censoring_km,
    km_fit,
    margin_labels,
    margin_time,
)


def test_two_events():
    s = km_fit([1, 2], [True, True], 2).values
    np.testing.assert_allclose(s, [1.0, 0.5, 0.0])


def test_all_censored_is_flat():
    s = km_fit([1, 3, 5], [False] * 3, 8).values
    assert (s == 1.0).all()


def test_event_before_censoring_at_tie():
    s = km_fit([1, 1, 2], [True, False, True], 3).values
    assert s[1] == pytest.approx(2 / 3)
    assert s[2] == 0.0


def test_brute_force_oracle_random():
    rng = np.random.default_rng(0)
    for _ in range(500):
        n = int(rng.integers(1, 21))
        t_max = int(rng.integers(1, 15))
        times = rng.integers(0, t_max + 1, n)
        events = rng.random(n) < 0.6
        got = km_fit(times, events, t_max).values
        assert list(got) == pytest.approx(km_product_limit(times, events, t_max), abs=1e-15)
        assert np.all(np.diff(got) <= 0) and got[0] <= 1


def test_margin_examples():
    flat = KmCurve(np.ones(11))
    assert margin_time(flat, 3) == 10
    assert margin_time(flat, 10) == 10
    assert margin_time(KmCurve(np.array([1.0, 0.5, 0.25])), 1) == 2


def test_margin_degenerate_tail():
    km = KmCurve(np.array([1.0, 0.0, 0.0]))
    with pytest.raises(DegenerateTailError):
        margin_time(km, 1)
    e, w = margin_labels(km, [1, 0], [False, False])
    assert e[0] == 1.0 and w[0] == 1.0


def test_margin_bounds_and_oracle():
    rng = np.random.default_rng(1)
    for _ in range(300):
        n = int(rng.integers(1, 20))
        t_max = int(rng.integers(1, 20))
        km = km_fit(rng.integers(0, t_max + 1, n), rng.random(n) < 0.5, t_max)
        for T in range(t_max + 1):
            want = margin_by_hand(list(km.values), T)
            try:
                got = margin_time(km, T)
            except DegenerateTailError:
                assert km.values[T] == 0
                continue
            assert T <= got <= t_max
            assert got == pytest.approx(want, abs=1e-12)
        if km.values[t_max] > 0:
            assert margin_time(km, t_max) == t_max


def test_censor_weight_examples_and_monotone():
    km = KmCurve(np.array([1.0, 1.0, 0.25, 0.1]))
    assert censor_weight(km, 0) == 0.0
    assert censor_weight(km, 2) == 0.75
    rng = np.random.default_rng(2)
    for _ in range(50):
        km = km_fit(rng.integers(0, 10, 15), rng.random(15) < 0.5, 9)
        w = [censor_weight(km, t) for t in range(10)]
        assert all(0 <= x <= 1 for x in w)
        assert np.all(np.diff(w) >= 0)


def test_censoring_km_swaps_indicators():
    t, e = [1, 2, 3], [True, False, True]
    assert list(censoring_km(t, e, 4).values) == list(km_fit(t, [False, True, False], 4).values)


def test_csv_export():
    assert KmCurve(np.array([1.0, 0.5])).to_csv() == "t,s_km\n0,1.0\n1,0.5\n"
