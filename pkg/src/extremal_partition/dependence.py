"""Nonstationary exponential variogram and the bivariate Brown-Resnick exponent function.

All functions broadcast over numpy arrays so that a whole pair set is evaluated at once.
The kernel matrix of every site is the locally isotropic Omega(s) = phi(s) * I_2.
"""

from __future__ import annotations

import numpy as np
from scipy.special import log_ndtr, ndtr

from extremal_partition.errors import InvalidArgumentError, NumericFailureError
from extremal_partition.models import DependenceField, PairGeometry, SiteSet

# below this the pair is treated as completely dependent, above it as independent
GAMMA_DEPENDENCE = 1e-12
GAMMA_INDEPENDENCE = 1e8

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def mahalanobis_distance(g: PairGeometry):
    """||s_i - s_j|| scaled by the averaged kernel matrix ((phi_i + phi_j) / 2) I_2."""
    h = np.linalg.norm(np.asarray(g.site_i, float) - np.asarray(g.site_j, float), axis=-1)
    return _out(h / np.sqrt((np.asarray(g.phi_i) + np.asarray(g.phi_j)) / 2.0))


def nonstationary_correlation(g: PairGeometry):
    phi_i = np.asarray(g.phi_i, float)
    phi_j = np.asarray(g.phi_j, float)
    prefactor = 2.0 * np.sqrt(phi_i * phi_j) / (phi_i + phi_j)
    return _out(prefactor * np.exp(-np.asarray(mahalanobis_distance(g))))


def variogram(g: PairGeometry):
    """gamma(s_i, s_j), half the variance of eps(s_i) - eps(s_j)."""
    s2_i = np.asarray(g.sigma2_i, float)
    s2_j = np.asarray(g.sigma2_j, float)
    rho = np.asarray(nonstationary_correlation(g))
    two_gamma = s2_i + s2_j - 2.0 * np.sqrt(s2_i * s2_j) * rho
    return _out(np.maximum(two_gamma, 0.0) / 2.0)


def pair_gamma(sites: SiteSet, field: DependenceField, i, j) -> np.ndarray:
    """Variogram values of a field for the site pairs (i, j)."""
    return np.asarray(variogram(PairGeometry.for_pairs(sites, field, i, j)))


def extremal_coefficient(gamma):
    """theta = 2 Phi(sqrt(2 gamma) / 2), between 1 (dependence) and 2 (independence)."""
    gamma = np.asarray(gamma, float)
    if np.any(gamma < 0) or np.any(np.isnan(gamma)):
        raise InvalidArgumentError("variogram values must be non-negative")
    return _out(2.0 * ndtr(np.sqrt(2.0 * gamma) / 2.0))


def exponent_V(z_i, z_j, gamma):
    z_i, z_j, gamma = _check_inputs(z_i, z_j, gamma)
    dep, indep, mid = _regimes(gamma)
    a, w, v = _arguments(z_i, z_j, gamma, mid)

    V = ndtr(w) / z_i + ndtr(v) / z_j
    V = np.where(dep, 1.0 / np.minimum(z_i, z_j), V)
    V = np.where(indep, 1.0 / z_i + 1.0 / z_j, V)
    return _out(V)


def exponent_partials(z_i, z_j, gamma):
    """(dV/dz_i, dV/dz_j, d2V/dz_i dz_j).

    Uses phi(w)/z_i = phi(v)/z_j, which collapses the first derivatives to
    -Phi(w)/z_i^2 and -Phi(v)/z_j^2.
    """
    z_i, z_j, gamma = _check_inputs(z_i, z_j, gamma)
    dep, indep, mid = _regimes(gamma)
    a, w, v = _arguments(z_i, z_j, gamma, mid)

    V_i = -ndtr(w) / z_i**2
    V_j = -ndtr(v) / z_j**2
    V_ij = -np.exp(-0.5 * w**2 - _LOG_SQRT_2PI) / (a * z_i**2 * z_j)

    # complete dependence: V = 1 / min(z_i, z_j)
    share_i = np.where(z_i < z_j, 1.0, np.where(z_i > z_j, 0.0, 0.5))
    V_i = np.where(dep, -share_i / z_i**2, V_i)
    V_j = np.where(dep, -(1.0 - share_i) / z_j**2, V_j)
    V_i = np.where(indep, -1.0 / z_i**2, V_i)
    V_j = np.where(indep, -1.0 / z_j**2, V_j)
    V_ij = np.where(dep | indep, 0.0, V_ij)
    return _out(V_i), _out(V_j), _out(V_ij)


def pair_log_density(z_i, z_j, gamma):
    """log(V_i V_j - V_ij) - V for unit Frechet margins."""
    z_i, z_j, gamma = _check_inputs(z_i, z_j, gamma)
    out = log_density(z_i, z_j, gamma)
    bad = ~np.isfinite(out)
    if np.any(bad):
        k = np.flatnonzero(np.broadcast_to(bad, out.shape).ravel())[0]
        zi, zj, g = (np.broadcast_to(x, out.shape).ravel()[k] for x in (z_i, z_j, gamma))
        raise NumericFailureError("non-finite pair log-density", (float(zi), float(zj), float(g)))
    return _out(out)


def log_density(z_i, z_j, gamma) -> np.ndarray:
    """Unchecked vectorized pair log-density; gamma is floored at GAMMA_DEPENDENCE.

    The hot path of the pairwise likelihood: inputs are assumed valid.
    """
    z_i = np.asarray(z_i, float)
    z_j = np.asarray(z_j, float)
    gamma = np.maximum(np.asarray(gamma, float), GAMMA_DEPENDENCE)
    indep = gamma > GAMMA_INDEPENDENCE
    a = np.sqrt(2.0 * np.where(indep, 1.0, gamma))
    log_zi = np.log(z_i)
    log_zj = np.log(z_j)
    w = a / 2.0 + (log_zj - log_zi) / a
    v = a - w

    V = ndtr(w) / z_i + ndtr(v) / z_j
    inner = np.logaddexp(
        log_ndtr(w) + log_ndtr(v) - log_zj,
        -0.5 * w**2 - _LOG_SQRT_2PI - np.log(a),
    )
    out = -2.0 * log_zi - log_zj + inner - V
    independent = -2.0 * (log_zi + log_zj) - 1.0 / z_i - 1.0 / z_j
    return np.where(indep, independent, out)


def _check_inputs(z_i, z_j, gamma):
    z_i = np.asarray(z_i, float)
    z_j = np.asarray(z_j, float)
    gamma = np.asarray(gamma, float)
    if np.any(~(z_i > 0)) or np.any(~(z_j > 0)):
        raise InvalidArgumentError("exponent function needs positive z values")
    if np.any(~(gamma >= 0)):
        raise InvalidArgumentError("variogram values must be non-negative")
    return z_i, z_j, gamma


def _regimes(gamma):
    dep = gamma < GAMMA_DEPENDENCE
    indep = gamma > GAMMA_INDEPENDENCE
    return dep, indep, ~(dep | indep)


def _arguments(z_i, z_j, gamma, mid):
    a = np.sqrt(2.0 * np.where(mid, gamma, 1.0))
    log_ratio = np.log(z_j) - np.log(z_i)
    w = a / 2.0 + log_ratio / a
    return a, w, a - w


def _out(x):
    x = np.asarray(x)
    return float(x) if x.ndim == 0 else x
