"""Scalar special functions against high precision reference values.

Reference values were computed with mpmath at 50 significant digits and
frozen here, so the tests stay independent of scipy's implementations.
"""

import math

import numpy as np
import pytest

from mvst.specialfn import (
    bessel_k,
    bessel_k_scaled,
    log_gamma,
    std_normal_cdf,
    std_normal_pdf,
)


REL = 1e-13


class TestLogGamma:
    @pytest.mark.parametrize(
        "x, expected",
        [
            (0.001, 6.907178885383853682512),
            (0.5, 0.5723649429247000870717),
            (7.3, 7.147892523022249032777),
            (1000.0, 5905.220423209181211826),
        ],
    )
    def test_frozen_values(self, x: float, expected: float) -> None:
        assert math.isclose(log_gamma(x), expected, rel_tol=REL)

    def test_integer_factorials(self) -> None:
        for n in range(1, 12):
            assert math.isclose(log_gamma(n + 1), math.log(math.factorial(n)), rel_tol=REL)

    def test_recurrence(self) -> None:
        for x in (0.3, 1.7, 4.2, 33.0):
            assert math.isclose(log_gamma(x + 1.0), log_gamma(x) + math.log(x), rel_tol=1e-12)

    def test_half_is_log_sqrt_pi(self) -> None:
        assert math.isclose(log_gamma(0.5), 0.5 * math.log(math.pi), rel_tol=REL)


class TestBesselK:
    @pytest.mark.parametrize(
        "nu, x, expected",
        [
            (0.7, 0.35, 1.783404861534507094105),
            (0.5, 1.0, 0.4610685044478945584396),
            (2.25, 7.5, 0.0003417574738801961071244),
            (1.0, 2.0, 0.1398658818165224272846),
        ],
    )
    def test_frozen_values(self, nu: float, x: float, expected: float) -> None:
        assert math.isclose(bessel_k(nu, x), expected, rel_tol=1e-12)

    def test_large_order_small_argument(self) -> None:
        # Huge magnitude, so compare relatively.
        assert math.isclose(bessel_k(4.75, 0.001), 39683459328059904.005, rel_tol=1e-11)

    def test_half_order_closed_form(self) -> None:
        # K_{1/2}(x) = sqrt(pi / (2 x)) exp(-x)
        for x in (0.2, 1.0, 3.7, 10.0):
            closed = math.sqrt(math.pi / (2.0 * x)) * math.exp(-x)
            assert math.isclose(bessel_k(0.5, x), closed, rel_tol=1e-12)

    def test_symmetric_in_order_sign(self) -> None:
        assert bessel_k(1.3, 2.0) == bessel_k(-1.3, 2.0)

    def test_scaled_version(self) -> None:
        for nu, x in [(0.5, 1.0), (1.0, 2.0), (2.25, 7.5)]:
            assert math.isclose(
                bessel_k_scaled(nu, x), math.exp(x) * bessel_k(nu, x), rel_tol=1e-12
            )

    def test_scaled_survives_large_argument(self) -> None:
        # Unscaled underflows near x ~ 700; the scaled form must stay finite
        # and positive far beyond that.
        v = bessel_k_scaled(0.8, 5000.0)
        assert np.isfinite(v) and v > 0.0
        # sqrt(pi / (2 x)) asymptote
        assert math.isclose(v, math.sqrt(math.pi / (2.0 * 5000.0)), rel_tol=1e-3)


class TestStdNormal:
    @pytest.mark.parametrize(
        "x, expected",
        [
            (1.96, 0.9750021048517795658634),
            (-0.5, 0.3085375387259868963623),
            (0.123, 0.5489464510164367590816),
        ],
    )
    def test_cdf_frozen_values(self, x: float, expected: float) -> None:
        assert math.isclose(std_normal_cdf(x), expected, rel_tol=1e-14)

    def test_cdf_symmetry(self) -> None:
        for x in (0.0, 0.4, 1.1, 3.0):
            assert math.isclose(std_normal_cdf(-x), 1.0 - std_normal_cdf(x), abs_tol=1e-15)

    def test_pdf_at_origin(self) -> None:
        assert math.isclose(std_normal_pdf(0.0), 1.0 / math.sqrt(2.0 * math.pi), rel_tol=1e-15)

    def test_pdf_is_cdf_derivative(self) -> None:
        h = 1e-6
        for x in (-1.2, 0.3, 2.0):
            num = (std_normal_cdf(x + h) - std_normal_cdf(x - h)) / (2.0 * h)
            assert math.isclose(num, std_normal_pdf(x), rel_tol=1e-8)
