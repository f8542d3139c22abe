"""Gaussian log-likelihoods for outbreak time series.

Three observation channels are supported, each with its own likelihood:

* per-node infectious counts (``loglik_I1``),
* network-wide infectious totals (``loglik_I2``),
* network-wide cumulative case totals (``loglik_J2``).

All three share the same construction: consecutive observations are
compared against the Gaussian transition density implied by the
linearized early-phase dynamics.  The per-node likelihood integrates
the moment equations across each interval by default;
``mode="approx"`` uses the first-order mean and covariance instead.

Covariances degenerate when counts hit zero (a node with no infectious
neighbors has zero predicted variance).  Per-node cells in that state
are treated as deterministic: a matching observation contributes
nothing, a mismatch is charged a ridge-floored penalty, and the
interval is reported through ``LogLikelihood.flagged``.  Healthy terms
are never perturbed, so closed-form stationary points of the healthy
likelihood are exact.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from scipy.linalg import expm

from .moments import (
    aggregate_moment_curves,
    approx_aggregate_step,
    drift_matrix,
)
from .netgen import MobilityMatrix
from .simulate import TransmissionParams

__all__ = [
    "LogLikelihood",
    "gaussian_logpdf",
    "loglik_I1",
    "loglik_I2",
    "loglik_J2",
]

# Relative size of the diagonal ridge added to a degenerate covariance
# before inversion.
RIDGE_SCALE = 1e-8

# A term is treated as degenerate when its smallest predicted variance
# falls within this factor of the ridge it would receive.
_DEGENERATE_FACTOR = 10.0

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class LogLikelihood:
    """Result of a likelihood evaluation.

    Attributes
    ----------
    value:
        Sum of the per-interval terms (compensated summation).
    terms:
        Per-interval log-density contributions.  Entry ``d`` covers the
        transition from observation ``d`` to ``d + 1``.  Skipped
        intervals hold 0.0.
    skipped:
        Indices of intervals excluded from ``value`` (zero-total
        conditioning observations in the aggregate likelihood).
    flagged:
        Indices of intervals whose covariance needed the
        regularization ridge.  Their terms are included in ``value``
        but are dominated by the regularization, not the model.
    """

    value: float
    terms: np.ndarray
    skipped: tuple[int, ...]
    flagged: tuple[int, ...]


def _ridge_size(trace: float, n: int) -> float:
    return RIDGE_SCALE * max(trace / n, 1.0)


def gaussian_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    """Log-density of a multivariate normal at ``x``.

    A well-conditioned covariance is used as given.  A covariance whose
    smallest diagonal entry sits at the regularization floor (or whose
    factorization fails) gets a small diagonal ridge first.  A matrix
    with an eigenvalue below -1e-6 times its trace is rejected as
    degenerate rather than silently repaired.
    """
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
        raise ValueError("inputs must be finite")
    n = x.size
    ridge = _ridge_size(float(np.trace(cov)), n)
    if np.min(np.diag(cov)) < _DEGENERATE_FACTOR * ridge:
        cov = cov + ridge * np.eye(n)
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        low = float(np.min(np.linalg.eigvalsh(cov)))
        if low < -1e-6 * max(float(np.trace(cov)), 1.0):
            raise ValueError("covariance is degenerate (negative eigenvalue)")
        cov = cov + ridge * np.eye(n)
        sign, logdet = np.linalg.slogdet(cov)
        if sign <= 0:
            raise ValueError("covariance could not be regularized")
    dev = x - mean
    quad = float(dev @ np.linalg.solve(cov, dev))
    return -0.5 * (n * _LOG_2PI + logdet + quad)


def _check_rates(alpha: float, beta: float) -> None:
    if not (math.isfinite(alpha) and math.isfinite(beta)):
        raise ValueError("rates must be finite")
    if alpha <= 0.0 or beta <= 0.0:
        raise ValueError("rates must be positive")


def _noise_basis(params: TransmissionParams, gamma: np.ndarray, states: np.ndarray) -> np.ndarray:
    """Diffusion matrices B(m) for a batch of count vectors.

    states has shape (k, n); returns (k, n, n). B is linear in m:
    diagonal (alpha+beta+g_i) m_i + inflow_i, off-diagonal
    -(gamma_ij m_i + gamma_ji m_j).
    """
    g = gamma.sum(axis=1)
    out = -(states[:, :, None] * gamma + states[:, None, :] * gamma.T)
    idx = np.arange(gamma.shape[0])
    out[:, idx, idx] = (params.alpha + params.beta + g) * states + states @ gamma
    return out


def _matrix_exponentials(a: np.ndarray, times: np.ndarray) -> np.ndarray:
    """e^{a t} for each t, shape (len(times), n, n).

    Uses one eigendecomposition when it is well conditioned, falling
    back to per-time Pade evaluation otherwise. The fallback also
    preserves structural zeros exactly (unreachable nodes keep
    identically zero entries), which the eigenvector route only
    achieves up to roundoff dust well below the degeneracy threshold.
    """
    try:
        lam, U = np.linalg.eig(a)
        if np.linalg.cond(U) < 1e10:
            Uinv = np.linalg.inv(U)
            out = np.einsum("ij,tj,jk->tik", U, np.exp(np.outer(times, lam)), Uinv)
            return np.ascontiguousarray(out.real)
    except np.linalg.LinAlgError:
        pass
    return np.stack([expm(a * t) for t in times])


def _step_propagator(
    params: TransmissionParams, mobility: MobilityMatrix, delta_t: float, n_quad: int = 20
) -> tuple[np.ndarray, np.ndarray]:
    """One-interval solution maps of the moment equations.

    Returns (E, V_basis): the conditional mean after delta_t is
    E @ I(t_d), and the conditional covariance (zero at the start of the
    interval) is sum_i I_i(t_d) * V_basis[i]. Both are exact solutions
    of the interval moment ODEs; the covariance uses

        V(dt | e_i) = int_0^dt e^{a(dt-s)} B(e^{as} e_i) e^{a(dt-s)}^T ds

    evaluated by Gauss-Legendre quadrature, which converges far below
    the ridge scale for the smooth integrand at hand.
    """
    a = drift_matrix(params, mobility)
    gamma = mobility.rates
    n = a.shape[0]
    scale = float(np.abs(a).sum(axis=1).max()) * delta_t
    if scale > 2.0 and n_quad == 20:
        n_quad = 40
    nodes, weights = np.polynomial.legendre.leggauss(n_quad)
    s = 0.5 * delta_t * (nodes + 1.0)
    w = 0.5 * delta_t * weights
    E_all = _matrix_exponentials(a, np.concatenate([s, delta_t - s, [delta_t]]))
    G = E_all[:n_quad]
    F = E_all[n_quad : 2 * n_quad]
    E = E_all[-1]
    B_all = _noise_basis(params, gamma, G.transpose(0, 2, 1).reshape(-1, n))
    B_all = B_all.reshape(n_quad, n, n, n)
    V_basis = np.einsum("k,kab,kibc,kdc->iad", w, F, B_all, F, optimize=True)
    V_basis = 0.5 * (V_basis + V_basis.transpose(0, 2, 1))
    return E, V_basis


def _batched_gaussian_terms(
    obs: np.ndarray, means: np.ndarray, covs: np.ndarray
) -> tuple[np.ndarray, tuple[int, ...]]:
    """Per-interval log-densities with cell-level degeneracy handling.

    Cells whose predicted variance sits at the regularization floor are
    deterministic in the model's eyes: matching observations contribute
    nothing, mismatches are charged the ridge-floored quadratic penalty
    (the ridge -> 0 limit of the regularized Gaussian, without its
    unbounded normalization bonus). Remaining cells form the live block
    and are evaluated unregularized; the ridge is applied to a live
    block only when its factorization fails. Flagged intervals are
    those with any degenerate cell or a ridged live block.
    """
    n_terms, n = obs.shape
    terms = np.empty(n_terms)
    flagged: list[int] = []
    tr = np.trace(covs, axis1=1, axis2=2) / n
    ridge = RIDGE_SCALE * np.maximum(tr, 1.0)
    diag = np.diagonal(covs, axis1=1, axis2=2)
    live = diag >= (_DEGENERATE_FACTOR * ridge)[:, None]
    all_live = live.all(axis=1)

    idx_full = np.nonzero(all_live)[0]
    if idx_full.size:
        sub = covs[idx_full]
        sign, logdet = np.linalg.slogdet(sub)
        bad = sign <= 0
        if bad.any():
            sub = sub + (bad * ridge[idx_full])[:, None, None] * np.eye(n)
            sign, logdet = np.linalg.slogdet(sub)
            if (sign <= 0).any():
                raise FloatingPointError("covariance lost positive definiteness")
            flagged.extend(int(i) for i in idx_full[bad])
        dev = obs[idx_full] - means[idx_full]
        sol = np.linalg.solve(sub, dev[:, :, None])[:, :, 0]
        quad = np.einsum("ij,ij->i", dev, sol)
        terms[idx_full] = -0.5 * (n * _LOG_2PI + logdet + quad)

    for d in np.nonzero(~all_live)[0]:
        flagged.append(int(d))
        m = live[d]
        dead_dev = obs[d, ~m] - means[d, ~m]
        viol = np.abs(dead_dev) > 1e-9 * np.maximum(1.0, np.abs(obs[d, ~m]))
        penalty = 0.0
        if viol.any():
            penalty = -0.5 * (
                float(dead_dev[viol] @ dead_dev[viol]) / ridge[d]
                + viol.sum() * (math.log(ridge[d]) + _LOG_2PI)
            )
        if m.any():
            k = int(m.sum())
            sub = covs[d][np.ix_(m, m)]
            dev = obs[d, m] - means[d, m]
            sign, logdet = np.linalg.slogdet(sub)
            if sign <= 0:
                sub = sub + ridge[d] * np.eye(k)
                sign, logdet = np.linalg.slogdet(sub)
                if sign <= 0:
                    raise FloatingPointError("covariance lost positive definiteness")
            quad = float(dev @ np.linalg.solve(sub, dev))
            penalty += -0.5 * (k * _LOG_2PI + logdet + quad)
        terms[d] = penalty

    return terms, tuple(sorted(flagged))


def loglik_I1(
    values: np.ndarray,
    delta_t: float,
    params: TransmissionParams,
    mobility: MobilityMatrix,
    mode: str = "exact",
) -> LogLikelihood:
    """Likelihood of per-node infectious counts.

    Parameters
    ----------
    values:
        Observations with shape ``(D, n)``; row ``d`` holds the counts
        at time ``t_0 + d * delta_t``.
    delta_t:
        Observation interval.
    params:
        Transmission rates.  ``params.gamma_total`` is not used; the
        mobility rates enter through ``mobility`` directly.
    mobility:
        Travel rate matrix whose entry ``(i, j)`` is the per-capita
        rate from node ``i`` to node ``j``.
    mode:
        ``"exact"`` (default) solves the moment equations over each
        interval, starting from the observed counts with zero
        covariance.  ``"approx"`` uses the first-order one-step mean
        and covariance, linear in ``delta_t``.

    Cells whose predicted variance degenerates (an unreachable node
    under the candidate mobility) contribute nothing when the
    observation matches the deterministic prediction and a large
    ridge-floored penalty when it does not; the interval is flagged
    either way.
    """
    if mode not in ("approx", "exact"):
        raise ValueError(f"unknown mode {mode!r}")
    values = np.asarray(values, dtype=float)
    if values.ndim != 2 or values.shape[0] < 2:
        raise ValueError("values must have shape (D, n) with D >= 2")
    delta_t = float(delta_t)
    if delta_t <= 0.0:
        raise ValueError("delta_t must be positive")
    n = values.shape[1]
    if mobility.rates.shape[0] != n:
        raise ValueError("mobility size does not match observations")

    pred = values[:-1]
    obs = values[1:]

    if mode == "exact":
        E, V_basis = _step_propagator(params, mobility, delta_t)
        means = pred @ E.T
        covs = np.tensordot(pred, V_basis, axes=([1], [0]))
    else:
        gamma = mobility.rates
        g = gamma.sum(axis=1)
        inflow = pred @ gamma  # row d holds gamma.T applied to pred[d]
        means = pred + delta_t * ((params.alpha - params.beta) * pred - pred * g + inflow)
        covs = _noise_basis(params, gamma, pred) * delta_t

    terms, flagged = _batched_gaussian_terms(obs, means, covs)
    return LogLikelihood(
        value=math.fsum(terms), terms=terms, skipped=(), flagged=flagged
    )


def _scalar_series_loglik(
    obs: np.ndarray, means: np.ndarray, variances: np.ndarray, keep: np.ndarray
) -> tuple[np.ndarray, tuple[int, ...], tuple[int, ...]]:
    """Shared core for the totals-based likelihoods.

    Kept entries with healthy variance are evaluated as-is; degenerate
    variances are ridged and flagged.
    """
    terms = np.zeros(obs.shape[0])
    skipped = tuple(int(d) for d in np.nonzero(~keep)[0])
    kept_idx = np.nonzero(keep)[0]
    flagged: tuple[int, ...] = ()
    if kept_idx.size:
        var = np.maximum(variances[keep], 0.0)
        ridge = RIDGE_SCALE * np.maximum(var, 1.0)
        weak = var < _DEGENERATE_FACTOR * ridge
        flagged = tuple(int(d) for d in kept_idx[weak])
        var = np.where(weak, var + ridge, var)
        dev = obs[keep] - means[keep]
        with np.errstate(over="ignore", invalid="ignore"):
            vals = -0.5 * (_LOG_2PI + np.log(var) + dev * dev / var)
        # Diverging predicted moments mean vanishing density at any
        # finite observation.
        terms[kept_idx] = np.where(np.isfinite(vals), vals, -np.inf)
    return terms, skipped, flagged


def loglik_I2(
    totals: np.ndarray, delta_t: float, alpha: float, beta: float
) -> LogLikelihood:
    """Likelihood of network-wide infectious totals.

    The total count follows the same one-step Gaussian transition as a
    single well-mixed node: travel moves cases between nodes without
    changing their sum, so the mobility rates drop out.  An interval
    whose conditioning total is zero has zero predicted variance; it is
    skipped and flagged.
    """
    _check_rates(alpha, beta)
    totals = np.asarray(totals, dtype=float)
    if totals.ndim != 1 or totals.size < 2:
        raise ValueError("totals must be a 1-d array with D >= 2")
    delta_t = float(delta_t)
    if delta_t <= 0.0:
        raise ValueError("delta_t must be positive")

    pred = totals[:-1]
    obs = totals[1:]
    keep = pred > 0.0
    means, variances = approx_aggregate_step(alpha, beta, pred, delta_t)
    terms, skipped, flagged = _scalar_series_loglik(obs, means, variances, keep)
    if skipped:
        warnings.warn(
            f"skipped {len(skipped)} interval(s) conditioned on zero totals: "
            f"{list(skipped)}",
            RuntimeWarning,
            stacklevel=2,
        )
    keep_terms = terms[keep]
    value = math.fsum(keep_terms) if keep_terms.size else 0.0
    return LogLikelihood(
        value=value,
        terms=terms,
        skipped=skipped,
        flagged=tuple(sorted(set(skipped) | set(flagged))),
    )


def loglik_J2(
    j_totals: np.ndarray,
    delta_t: float,
    alpha: float,
    beta: float,
    i0: float,
) -> LogLikelihood:
    """Likelihood of network-wide cumulative case totals.

    Parameters
    ----------
    j_totals:
        Cumulative totals at times ``t_0, t_0 + delta_t, ...`` with
        length ``D + 1``.  The leading entry is the (deterministic)
        count at ``t_0`` and contributes no term; each later entry is
        compared against the marginal mean and variance of the
        cumulative count grown from ``i0`` over the elapsed time.
    i0:
        Infectious total at ``t_0``.  A free parameter of the fit, not
        read from ``j_totals``.
    """
    _check_rates(alpha, beta)
    if not math.isfinite(i0) or i0 < 0.0:
        raise ValueError("i0 must be finite and nonnegative")
    j_totals = np.asarray(j_totals, dtype=float)
    if j_totals.ndim != 1 or j_totals.size < 2:
        raise ValueError("j_totals must be a 1-d array with D + 1 >= 2")
    delta_t = float(delta_t)
    if delta_t <= 0.0:
        raise ValueError("delta_t must be positive")

    obs = j_totals[1:]
    times = delta_t * np.arange(1, j_totals.size)
    _, means, _, _, variances = aggregate_moment_curves(alpha, beta, i0, times)
    keep = np.ones(obs.shape[0], dtype=bool)
    terms, skipped, flagged = _scalar_series_loglik(obs, means, variances, keep)
    return LogLikelihood(
        value=math.fsum(terms), terms=terms, skipped=skipped, flagged=flagged
    )
