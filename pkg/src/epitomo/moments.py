"""First and second moments of the linearized outbreak model.

The linearized dynamics are a multivariate Ornstein-Uhlenbeck-type process
with drift generator a (linear in I) and state-dependent diffusion B(I).
Under the first-moment closure (B evaluated along the mean path) the
moments obey closed linear ODEs:

    dm/dt   = a m                 (mean infectious counts, column form)
    dmJ/dt  = alpha m             (mean cumulative cases)
    dvII/dt = a vII + vII a^T + B(m)
    dvIJ/dt = a vIJ + alpha (vII + diag(m))
    dvJJ/dt = alpha (vIJ + vIJ^T + diag(m))

exact_moments integrates these with an adaptive high-order Runge-Kutta
solver (the mean itself also has the closed form m(t) = expm(a t) m(0)).
For a single aggregated node the whole system has elementary closed forms,
implemented in aggregate_moments through the entire functions

    g1(x) = (e^x - 1)/x          g2(x) = (e^x - 1 - x)/x^2
    h(x)  = (x e^x - e^x + 1)/x^2
    G(x)  = (e^{2x}/2 - x e^x - 1/2)/x^3

evaluated by series below |x| = 3/32 and via expm1 above, so the removable
singularity at alpha = beta costs no precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad_vec, solve_ivp
from scipy.linalg import expm

from .netgen import MobilityMatrix, _freeze
from .simulate import TransmissionParams

__all__ = [
    "MomentState",
    "AggregateMoments",
    "drift_matrix",
    "noise_matrix",
    "exact_moments",
    "exact_moments_quadrature",
    "aggregate_moments",
    "approx_step_moments",
    "approx_aggregate_step",
]


@dataclass(frozen=True)
class MomentState:
    """Per-node means and (co)variances of (I, J) at one time."""

    t: float
    mI: np.ndarray
    mJ: np.ndarray
    vII: np.ndarray
    vIJ: np.ndarray
    vJJ: np.ndarray

    def __post_init__(self) -> None:
        n = np.asarray(self.mI).shape[0]
        for name in ("mI", "mJ"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != (n,):
                raise ValueError(f"{name} must be a length-{n} vector")
            object.__setattr__(self, name, _freeze(v))
        for name in ("vII", "vIJ", "vJJ"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != (n, n):
                raise ValueError(f"{name} must be {n}x{n}")
            object.__setattr__(self, name, _freeze(v))

    @property
    def n(self) -> int:
        return self.mI.shape[0]


@dataclass(frozen=True)
class AggregateMoments:
    """Moments of the node-summed process (single effective node)."""

    t: float
    mI: float
    mJ: float
    vII: float
    vIJ: float
    vJJ: float


def drift_matrix(params: TransmissionParams, mobility: MobilityMatrix) -> np.ndarray:
    """Linear drift generator: a[i,j] = (alpha-beta-sum_k gamma_ik) delta_ij + gamma_ji.

    Off-diagonal entries are nonnegative; column form dm/dt = a m.
    """
    gamma = mobility.rates
    a = gamma.T.copy()
    np.fill_diagonal(a, params.alpha - params.beta - gamma.sum(axis=1))
    return a


def noise_matrix(params: TransmissionParams, mobility: MobilityMatrix, m: np.ndarray) -> np.ndarray:
    """Diffusion matrix B evaluated at infectious counts m.

    B_ij = {(alpha+beta+sum_k gamma_ik) m_i + sum_k gamma_ki m_k} delta_ij
           - gamma_ij m_i - gamma_ji m_j
    Positive semidefinite for m >= 0 (it is the covariance of the summed
    event channels).
    """
    gamma = mobility.rates
    m = np.asarray(m, dtype=float)
    diag = (params.alpha + params.beta + gamma.sum(axis=1)) * m + gamma.T @ m
    b = -gamma * m[:, None] - gamma.T * m[None, :]
    np.fill_diagonal(b, 0.0)
    b[np.arange(m.shape[0]), np.arange(m.shape[0])] = diag
    return b


def _moment_rhs(params: TransmissionParams, mobility: MobilityMatrix, a: np.ndarray):
    n = mobility.n
    alpha = params.alpha

    def rhs(_t: float, y: np.ndarray) -> np.ndarray:
        m = y[:n]
        vII = y[2 * n : 2 * n + n * n].reshape(n, n)
        vIJ = y[2 * n + n * n : 2 * n + 2 * n * n].reshape(n, n)
        dm = a @ m
        dmJ = alpha * m
        b = noise_matrix(params, mobility, np.maximum(m, 0.0))
        dvII = a @ vII + vII @ a.T + b
        c = np.diag(m)
        dvIJ = a @ vIJ + alpha * (vII + c)
        dvJJ = alpha * (vIJ + vIJ.T + c)
        return np.concatenate([dm, dmJ, dvII.ravel(), dvIJ.ravel(), dvJJ.ravel()])

    return rhs


def exact_moments(
    params: TransmissionParams,
    mobility: MobilityMatrix,
    I0: np.ndarray,
    times: float | np.ndarray,
    rtol: float = 1e-10,
    max_step: float = np.inf,
) -> MomentState | list[MomentState]:
    """Moments of the linearized model at the requested times.

    The mean is evaluated through the matrix exponential (scaling-and-squaring);
    the covariance blocks come from the moment ODEs above, integrated with
    DOP853 at tight tolerance. mJ uses the closed form
    I0 + alpha a^{-1} (expm(a t) - E) I0 when a is comfortably invertible,
    otherwise the ODE value.

    Returns a single MomentState for scalar input, else a list in the input
    order. Times must be nonnegative.
    """
    scalar = np.isscalar(times)
    ts = np.atleast_1d(np.asarray(times, dtype=float))
    if (ts < 0).any():
        raise ValueError("times must be nonnegative")
    n = mobility.n
    I0 = np.asarray(I0, dtype=float)
    if I0.shape != (n,):
        raise ValueError(f"I0 must be a length-{n} vector")
    if (I0 < 0).any():
        raise ValueError("I0 must be nonnegative")
    a = drift_matrix(params, mobility)

    order = np.argsort(ts)
    t_sorted = ts[order]
    t_max = float(t_sorted[-1]) if len(t_sorted) else 0.0

    states_by_t: dict[float, MomentState] = {}
    scale = max(float(I0.sum()), 1.0)
    if t_max > 0:
        y0 = np.concatenate([I0, I0, np.zeros(3 * n * n)])
        sol = solve_ivp(
            _moment_rhs(params, mobility, a),
            (0.0, t_max),
            y0,
            method="DOP853",
            t_eval=np.unique(t_sorted),
            rtol=rtol,
            atol=rtol * scale,
            max_step=max_step,
        )
        if not sol.success:
            raise RuntimeError(f"moment ODE integration failed: {sol.message}")
    use_inverse = np.linalg.cond(a) < 1e12

    results: list[MomentState] = [None] * len(ts)  # type: ignore[list-item]
    for pos, t in enumerate(ts):
        t = float(t)
        if t == 0.0:
            mI, mJ = I0.copy(), I0.copy()
            vII = vIJ = vJJ = np.zeros((n, n))
        else:
            eat = expm(a * t)
            mI = eat @ I0
            col = int(np.searchsorted(sol.t, t))
            y = sol.y[:, col]
            if use_inverse:
                mJ = I0 + params.alpha * np.linalg.solve(a, (eat - np.eye(n)) @ I0)
            else:
                mJ = y[n : 2 * n]
            vII = y[2 * n : 2 * n + n * n].reshape(n, n)
            vIJ = y[2 * n + n * n : 2 * n + 2 * n * n].reshape(n, n)
            vJJ = y[2 * n + 2 * n * n :].reshape(n, n)
            vII = (vII + vII.T) / 2
            vJJ = (vJJ + vJJ.T) / 2
        results[pos] = MomentState(t=t, mI=mI, mJ=mJ, vII=vII, vIJ=vIJ, vJJ=vJJ)
    return results[0] if scalar else results


def _eig_propagator(a: np.ndarray):
    """expm(a tau) through diagonalization; independent route for cross-checks."""
    lam, v = np.linalg.eig(a)
    vinv = np.linalg.inv(v)

    def prop(tau: float) -> np.ndarray:
        return np.real(v @ np.diag(np.exp(lam * tau)) @ vinv)

    return prop


def exact_moments_quadrature(
    params: TransmissionParams,
    mobility: MobilityMatrix,
    I0: np.ndarray,
    t: float,
    tol: float = 1e-10,
) -> MomentState:
    """Moments via direct quadrature of the integral solutions.

    vII(t) = int_0^t e^{a(t-s)} B(m(s)) e^{a^T(t-s)} ds, and the J blocks by
    nesting the corresponding integrals. Deliberately shares no machinery
    with the ODE route (propagation through diagonalization, adaptive
    quadrature), serving as the small-N oracle. O(quadrature^3) work, so
    keep N and t modest.
    """
    n = mobility.n
    I0 = np.asarray(I0, dtype=float)
    a = drift_matrix(params, mobility)
    prop = _eig_propagator(a)
    alpha = params.alpha

    def mean(s: float) -> np.ndarray:
        return prop(s) @ I0

    def vii(tt: float) -> np.ndarray:
        if tt == 0.0:
            return np.zeros((n, n))

        def integrand(s: float) -> np.ndarray:
            e = prop(tt - s)
            return (e @ noise_matrix(params, mobility, mean(s)) @ e.T).ravel()

        val, _err = quad_vec(integrand, 0.0, tt, epsabs=tol, epsrel=tol)
        return val.reshape(n, n)

    def vij(tt: float) -> np.ndarray:
        if tt == 0.0:
            return np.zeros((n, n))

        def integrand(s: float) -> np.ndarray:
            return (prop(tt - s) @ (alpha * (vii(s) + np.diag(mean(s))))).ravel()

        val, _err = quad_vec(integrand, 0.0, tt, epsabs=tol, epsrel=tol)
        return val.reshape(n, n)

    def integrand_jj(s: float) -> np.ndarray:
        v = vij(s)
        return (alpha * (v + v.T + np.diag(mean(s)))).ravel()

    vII = vii(t)
    vIJ = vij(t)
    vJJ, _err = quad_vec(integrand_jj, 0.0, t, epsabs=1e-6, epsrel=1e-6)
    vJJ = vJJ.reshape(n, n)
    mI = mean(t)
    mJ_integral, _err = quad_vec(lambda s: mean(s), 0.0, t, epsabs=tol, epsrel=tol)
    mJ = I0 + alpha * mJ_integral
    return MomentState(t=t, mI=mI, mJ=mJ, vII=(vII + vII.T) / 2, vIJ=vIJ, vJJ=(vJJ + vJJ.T) / 2)


# ---------------------------------------------------------------------------
# aggregate (single effective node) closed forms
# ---------------------------------------------------------------------------

_SERIES_CUT = 3.0 / 32.0


def _series_eval(x: np.ndarray, coef: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    for c in coef[::-1]:
        out = out * x + c
    return out


def _coef(which: str) -> np.ndarray:
    import math

    m = np.arange(18)
    if which == "g1":
        return np.array([1.0 / math.factorial(k + 1) for k in m])
    if which == "g2":
        return np.array([1.0 / math.factorial(k + 2) for k in m])
    if which == "h":
        return np.array([(k + 1) / math.factorial(k + 2) for k in m])
    if which == "G":
        return np.array([(2.0 ** (k + 2) - k - 3) / math.factorial(k + 3) for k in m])
    raise KeyError(which)


_C_G1, _C_G2, _C_H, _C_GG = (_coef(w) for w in ("g1", "g2", "h", "G"))


def _g1(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < _SERIES_CUT
    safe = np.where(small, 1.0, x)
    return np.where(small, _series_eval(x, _C_G1), np.expm1(safe) / safe)


def _g2(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < _SERIES_CUT
    safe = np.where(small, 1.0, x)
    return np.where(small, _series_eval(x, _C_G2), (np.expm1(safe) - safe) / safe**2)


def _h(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < _SERIES_CUT
    safe = np.where(small, 1.0, x)
    return np.where(small, _series_eval(x, _C_H), ((safe - 1.0) * np.expm1(safe) + safe) / safe**2)


def _G(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < _SERIES_CUT
    safe = np.where(small, 1.0, x)
    closed = (0.5 * np.expm1(2.0 * safe) - safe * np.expm1(safe) - safe) / safe**3
    return np.where(small, _series_eval(x, _C_GG), closed)


def _aggregate_blocks(
    alpha: float, beta: float, i0: float, ts: np.ndarray
) -> tuple[np.ndarray, ...]:
    """Vectorized (mI, mJ, vII, vIJ, vJJ) at the given times.

    Entries overflow to inf for extreme (alpha - beta) * t; optimizers
    probing such regions rely on the likelihoods treating diverging
    moments as vanishing density, so the overflow is deliberate and
    silent.
    """
    ts = np.asarray(ts, dtype=float)
    x = (alpha - beta) * ts
    with np.errstate(over="ignore", invalid="ignore"):
        ex = np.exp(x)
        g1, g2, hh, gg = _g1(x), _g2(x), _h(x), _G(x)
        s = alpha + beta
        mI = i0 * ex
        mJ = i0 * (1.0 + alpha * ts * g1)
        vII = i0 * s * ts * ex * g1
        vIJ = i0 * ex * (alpha * ts + alpha * s * ts**2 * g2)
        vJJ = alpha * i0 * (
            2.0 * alpha * s * ts**3 * gg + 2.0 * alpha * ts**2 * hh + ts * g1
        )
    return mI, mJ, vII, vIJ, vJJ


def aggregate_moments(alpha: float, beta: float, i0: float, t: float) -> AggregateMoments:
    """Closed-form aggregate moments at time t.

    Continuous through alpha = beta (series branch); mJ(0) = i0, i.e. the
    initial infections count as cases.
    """
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be positive")
    if i0 < 0:
        raise ValueError("i0 must be nonnegative")
    if t < 0:
        raise ValueError("t must be nonnegative")
    mI, mJ, vII, vIJ, vJJ = (float(v[0]) for v in _aggregate_blocks(alpha, beta, i0, np.array([t])))
    return AggregateMoments(t=t, mI=mI, mJ=mJ, vII=vII, vIJ=vIJ, vJJ=vJJ)


def aggregate_moment_curves(
    alpha: float, beta: float, i0: float, times: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Aggregate moments evaluated at an array of times.

    Returns arrays (mI, mJ, vII, vIJ, vJJ) matching the shape of
    ``times``.  Same formulas as ``aggregate_moments``.
    """
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be positive")
    if i0 < 0:
        raise ValueError("i0 must be nonnegative")
    times = np.asarray(times, dtype=float)
    if np.any(times < 0):
        raise ValueError("times must be nonnegative")
    return _aggregate_blocks(alpha, beta, i0, times)


# ---------------------------------------------------------------------------
# small-interval step approximations (first order in delta_t)
# ---------------------------------------------------------------------------


def approx_step_moments(
    params: TransmissionParams,
    mobility: MobilityMatrix,
    i_obs: np.ndarray,
    delta_t: float,
) -> tuple[np.ndarray, np.ndarray]:
    """First-order conditional moments over one observation interval.

    Given observed counts I(t_d), the next observation is approximately
    Gaussian with mean I + (a I) delta_t and covariance B(I) delta_t.
    """
    if delta_t <= 0:
        raise ValueError("delta_t must be positive")
    i_obs = np.asarray(i_obs, dtype=float)
    a = drift_matrix(params, mobility)
    mean = i_obs + (a @ i_obs) * delta_t
    cov = noise_matrix(params, mobility, i_obs) * delta_t
    return mean, cov


def approx_aggregate_step(
    alpha: float, beta: float, i_total: float, delta_t: float
) -> tuple[float, float]:
    """Aggregate version: mean I(1 + (alpha-beta) dt), variance (alpha+beta) I dt."""
    if delta_t <= 0:
        raise ValueError("delta_t must be positive")
    mean = i_total * (1.0 + (alpha - beta) * delta_t)
    var = (alpha + beta) * i_total * delta_t
    return mean, var
