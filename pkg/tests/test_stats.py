"""Incomplete beta / Student-t tail accuracy against scipy and mpmath."""

import math

import numpy as np
import pytest
from scipy import special as sp
from scipy import stats as ss

from sparsecross.stats import betainc, log_beta, student_t_cdf, student_t_sf


class TestBetainc:
    def test_endpoints(self):
        assert betainc(2.0, 3.0, 0.0) == 0.0
        assert betainc(2.0, 3.0, 1.0) == 1.0

    def test_symmetry_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            a, b, x = rng.uniform(0.2, 20), rng.uniform(0.2, 20), rng.uniform(0, 1)
            assert betainc(a, b, x) == pytest.approx(1.0 - betainc(b, a, 1.0 - x), abs=1e-13)

    def test_against_scipy(self):
        rng = np.random.default_rng(1)
        for _ in range(500):
            a, b, x = rng.uniform(0.1, 60), rng.uniform(0.1, 60), rng.uniform(0, 1)
            assert betainc(a, b, x) == pytest.approx(float(sp.betainc(a, b, x)), abs=1e-12)

    def test_against_mpmath_high_precision(self):
        mpmath = pytest.importorskip("mpmath")
        mpmath.mp.dps = 40
        cases = [(0.5, 0.5, 0.3), (2.0, 7.0, 0.12), (9.5, 0.5, 0.99), (25.0, 25.0, 0.5)]
        for a, b, x in cases:
            expected = float(mpmath.betainc(a, b, 0, x, regularized=True))
            assert betainc(a, b, x) == pytest.approx(expected, abs=1e-13)

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            betainc(-1.0, 2.0, 0.5)
        with pytest.raises(ValueError):
            betainc(1.0, 2.0, 1.5)

    def test_log_beta(self):
        assert log_beta(2.0, 3.0) == pytest.approx(math.log(1 / 12), abs=1e-14)


class TestStudentT:
    def test_symmetry(self):
        for t in (0.0, 0.7, 2.5, 11.0):
            for df in (1, 4, 30):
                assert student_t_cdf(-t, df) == pytest.approx(1.0 - student_t_cdf(t, df), abs=1e-14)

    def test_median_is_half(self):
        for df in (1, 2, 9, 100):
            assert student_t_cdf(0.0, df) == pytest.approx(0.5, abs=1e-15)

    def test_against_scipy(self):
        rng = np.random.default_rng(2)
        for _ in range(500):
            t = float(rng.uniform(-40, 40))
            df = int(rng.integers(1, 300))
            assert student_t_cdf(t, df) == pytest.approx(float(ss.t.cdf(t, df)), abs=1e-12)

    def test_survival_complements_cdf(self):
        for t in (-3.0, 0.4, 6.0):
            assert student_t_sf(t, 7) == pytest.approx(1.0 - student_t_cdf(t, 7), abs=1e-12)

    def test_infinite_t(self):
        assert student_t_cdf(math.inf, 3) == 1.0
        assert student_t_cdf(-math.inf, 3) == 0.0

    def test_rejects_bad_df(self):
        with pytest.raises(ValueError):
            student_t_cdf(1.0, 0)
