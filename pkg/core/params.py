"""
params.py — single source of truth for the scalar parameter algebra
====================================================================

Every module asks this file for gamma, Q, the carpet dimension, the loop-soup
intensity and the conformal-radius exponent instead of recomputing them.

Public API
──────────
    carpet_dimension(kappa)              → float   (either closed form)
    loop_soup_intensity(kappa)           → float   c(kappa), kappa in (8/3, 4]
    invert_soup_intensity(c)             → float   kappa with c(kappa) = c
    derive_params(kappa)                 → SleParams
"""
from __future__ import annotations

import math

from scipy.optimize import bisect

from core.exceptions import ParameterDomainError
from core.models import SleParams

KAPPA_MIN = 8.0 / 3.0
KAPPA_MAX = 8.0
SIMPLE_MAX = 4.0


def carpet_dimension(kappa: float, form: str = "sum") -> float:
    """
    Dimension of the CLE carpet (kappa <= 4) or gasket (kappa > 4).

    ``form="sum"`` evaluates 1 + 2/kappa + 3*kappa/32, ``form="product"`` the
    equivalent 2 - (8 - kappa)(3*kappa - 8)/(32*kappa).
    """
    if not KAPPA_MIN <= kappa <= KAPPA_MAX:
        raise ParameterDomainError("kappa", kappa, "[8/3, 8]")
    if form == "sum":
        return 1.0 + 2.0 / kappa + 3.0 * kappa / 32.0
    if form == "product":
        return 2.0 - (8.0 - kappa) * (3.0 * kappa - 8.0) / (32.0 * kappa)
    raise ValueError(f"unknown form {form!r}")


def loop_soup_intensity(kappa: float) -> float:
    """c(kappa) = (3*kappa - 8)(6 - kappa)/(2*kappa) on (8/3, 4]."""
    if not KAPPA_MIN < kappa <= SIMPLE_MAX:
        raise ParameterDomainError("kappa", kappa, "(8/3, 4]")
    return (3.0 * kappa - 8.0) * (6.0 - kappa) / (2.0 * kappa)


def invert_soup_intensity(c: float, xtol: float = 1e-12) -> float:
    """Recover kappa in (8/3, 4] from an intensity c in (0, 1] by bisection."""
    if not 0.0 < c <= 1.0:
        raise ParameterDomainError("c", c, "(0, 1]")
    if c == 1.0:
        return SIMPLE_MAX
    return bisect(lambda k: loop_soup_intensity(k) - c, KAPPA_MIN + 1e-15, SIMPLE_MAX, xtol=xtol, maxiter=200)


def derive_params(kappa: float) -> SleParams:
    """
    Populate every derived parameter for ``kappa`` in [8/3, 8).

    The endpoint 8/3 is admitted so the boundary value d = 2 can be read off;
    its soup intensity is the limit value 0. For kappa <= 4 gamma = sqrt(kappa),
    above 4 gamma = 4/sqrt(kappa).
    """
    if not (KAPPA_MIN <= kappa < KAPPA_MAX) or math.isnan(kappa):
        raise ParameterDomainError("kappa", kappa, "[8/3, 8)")

    simple = kappa <= SIMPLE_MAX
    root = math.sqrt(kappa)
    gamma = root if simple else 4.0 / root

    if kappa == KAPPA_MIN:
        soup = 0.0
    elif simple:
        soup = loop_soup_intensity(kappa)
    else:
        soup = None

    return SleParams(
        kappa=kappa,
        gamma=gamma,
        alpha=4.0 / kappa,
        alpha_hat=kappa / 4.0,
        Q=2.0 / gamma + gamma / 2.0,
        d_carpet=carpet_dimension(kappa),
        d_curve=min(2.0, 1.0 + kappa / 8.0),
        soup_intensity=soup,
        f_exponent=0.5 + 2.0 / kappa + kappa / 32.0,
        length_shift_rate=root / 2.0,
        mu0_radius_exponent=2.0 / gamma ** 2,
    )


def covariance_identity_residual(params: SleParams) -> float:
    """(alpha + 1/2) * Q * rate - f_exponent - d_carpet; zero in both regimes."""
    lhs = (params.alpha + 0.5) * params.Q * params.length_shift_rate - params.f_exponent
    return lhs - params.d_carpet
