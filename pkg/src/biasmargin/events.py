"""Normalized Gram matrices, concentration events and their bias-extended counterparts.

Measured quantities live in :class:`EventReport` and
:class:`PerturbationReport`; the theoretical event parameters live in
:class:`EventParams` (homogeneous) and :class:`TildeParams` (extended).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .sampler import ExtendedDataset, ModelSpec


class ZeroNormRow(ValueError):
    def __init__(self, index: int):
        super().__init__(f"noise row {index} has zero norm")
        self.index = index


class NoConvergence(RuntimeError):
    def __init__(self, best: float, iterations: int):
        super().__init__(f"power iteration did not converge in {iterations} iterations (best {best:.12g})")
        self.best = best
        self.iterations = iterations


class DegenerateDenominator(ValueError):
    """The factor (1 - eps/4) is not positive."""


# ---------------------------------------------------------------------------
# Spectral norms
# ---------------------------------------------------------------------------


def spectral_norm_sym(A: np.ndarray, tol: float = 1e-10, max_iter: int = 10_000) -> tuple[float, bool]:
    """Spectral norm of a symmetric matrix by power iteration on A^2.

    Returns ``(norm, converged)``. Sizes 1 and 2 use closed forms. When the
    residual test is not met within ``max_iter`` a Rayleigh-Ritz step over
    the last Krylov block refines the estimate before giving up.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    if n == 0:
        return 0.0, True
    if n == 1:
        return abs(float(A[0, 0])), True
    if n == 2:
        a, b, d = float(A[0, 0]), float(A[0, 1]), float(A[1, 1])
        half_tr = 0.5 * (a + d)
        rad = math.hypot(0.5 * (a - d), b)
        return max(abs(half_tr + rad), abs(half_tr - rad)), True
    if not np.any(A):
        return 0.0, True

    rng = np.random.default_rng(0)
    x = rng.standard_normal(n)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(max_iter):
        y = A @ (A @ x)
        lam = float(x @ y)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            x = rng.standard_normal(n)
            x /= np.linalg.norm(x)
            continue
        if np.linalg.norm(y - lam * x) <= tol * lam:
            return math.sqrt(lam), True
        x = y / ny

    # Ritz refinement on span{x, Bx, B^2 x}
    k1 = A @ (A @ x)
    k2 = A @ (A @ k1)
    Q, _ = np.linalg.qr(np.column_stack([x, k1, k2]))
    AQ = A @ Q
    H = AQ.T @ AQ
    w, V = np.linalg.eigh(0.5 * (H + H.T))
    lam_r = float(w[-1])
    u = Q @ V[:, -1]
    ok = np.linalg.norm(A @ (A @ u) - lam_r * u) <= tol * lam_r
    return math.sqrt(max(lam, lam_r, 0.0)), bool(ok)


def spectral_deviation(G: np.ndarray, tol: float = 1e-10, max_iter: int = 10_000, strict: bool = False) -> float:
    """||G - I||. Non-convergence warns (or raises :class:`NoConvergence` if ``strict``)."""
    G = np.asarray(G, dtype=float)
    val, ok = spectral_norm_sym(G - np.eye(G.shape[0]), tol=tol, max_iter=max_iter)
    if not ok:
        if strict:
            raise NoConvergence(val, max_iter)
        warnings.warn(f"spectral norm not converged; returning best estimate {val:.12g}", RuntimeWarning)
    return val


def row_norms(Z: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(Z, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ZeroNormRow(int(zero[0]))
    return norms


def normalized_gram(Z: np.ndarray) -> np.ndarray:
    """G_ij = <z_i, z_j> / (||z_i|| ||z_j||), exactly symmetric with unit diagonal."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    Zc = Z / row_norms(Z)[:, None]
    G = Zc @ Zc.T
    G = np.triu(G, 1)
    G = G + G.T
    np.fill_diagonal(G, 1.0)
    return G


# ---------------------------------------------------------------------------
# Theoretical parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EventParams:
    eps: float
    alpha2: float
    alpha_inf: float
    M: float
    rho: float
    beta: float
    gamma: float
    delta: float
    C1: float = 1.0
    C2: float = 1.0
    g_norm_l: float = 1.0
    n: int = 0

    def to_record(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TildeParams:
    eps_tilde: float
    beta_tilde: float
    gamma_tilde: float
    M_tilde: float
    alpha2_tilde: float
    alpha_inf_tilde: float
    beta_prime: float
    T_bound: float
    T: float
    delta_E1: float
    delta_E4: float
    M_ge_one: bool

    def to_record(self) -> dict:
        return asdict(self)


def _inv_l(l: float) -> float:
    return 0.0 if math.isinf(l) else 1.0 / l


def eps_bound(spec: ModelSpec, n: int, delta: float, C1: float = 1.0) -> float:
    r = spec.xi_spec.r
    p = spec.p
    return (
        C1
        * (n / delta) ** (2.0 / r)
        * max(p ** (2.0 / r - 0.5), n ** (2.0 / r))
        * spec.sigma.frob
        / spec.sigma.trace
    )


def alpha_bound(n: int, delta: float, trace: float, sigma_half_mu_norm: float, mu_norm: float) -> float:
    if mu_norm == 0.0:
        return 0.0
    return 2.0 * math.sqrt(n) * sigma_half_mu_norm / (math.sqrt(delta) * trace * mu_norm)


def m_bound(eps: float, g_norm_l: float, n: int, delta: float, l: float, trace: float) -> float:
    return (1.0 + eps) * g_norm_l * (n / delta) ** _inv_l(l) * math.sqrt(trace)


def beta_bound(eps: float, C2: float, delta: float, n: int, k: float) -> float:
    return eps + C2 * delta ** (-2.0 / k) * n ** (-(1.0 - 2.0 / k))


def homogeneous_params(spec: ModelSpec, n: int, delta: float, C1: float = 1.0, C2: float = 1.0) -> EventParams:
    """Event parameters for the model without bias coordinate."""
    if not (0.0 < delta < 0.5):
        raise ValueError(f"delta must lie in (0, 1/2), got {delta}")
    g = spec.g_spec
    tr = spec.sigma.trace
    eps = eps_bound(spec, n, delta, C1)
    alpha = alpha_bound(n, delta, tr, spec.sigma_half_mu_norm, spec.mu_norm)
    M = m_bound(eps, g.norm_l, n, delta, g.l, tr)
    beta = beta_bound(eps, C2, delta, n, g.k)
    return EventParams(
        eps=eps,
        alpha2=alpha,
        alpha_inf=alpha,
        M=M,
        rho=g.eg_minus2 / tr,
        beta=beta,
        gamma=beta,
        delta=delta,
        C1=C1,
        C2=C2,
        g_norm_l=g.norm_l,
        n=n,
    )


def _one_minus_quarter(eps: float) -> float:
    f = 1.0 - eps / 4.0
    if f <= 0.0:
        raise DegenerateDenominator(f"1 - eps/4 = {f} <= 0 (eps = {eps})")
    return f


def tilde_epsilon_bound(
    eps: float, n: int, delta_E1: float, trace: float, eg_minus_k: float, k: float
) -> tuple[float, float, float]:
    """``(T_bound, T, eps_tilde)`` for the extended Gram deviation.

    T_bound bounds max_i ||z_i||^-2 with probability 1 - delta_E1 by a
    union bound plus Markov on g^-k; T = sqrt(n(n-1)) (2 eps + 1) T_bound
    bounds ||P||_F.
    """
    f = _one_minus_quarter(eps)
    t = (n * eg_minus_k / delta_E1) ** (2.0 / k)
    T_bound = t / (f * trace)
    T = math.sqrt(n * (n - 1)) * (2.0 * eps + 1.0) * T_bound
    return T_bound, T, T + eps


def beta_prime(eps: float, n: int, delta_E4: float, trace: float, eg_minus2: float, eg_minus_k: float, k: float) -> float:
    f = _one_minus_quarter(eps)
    return (n * eg_minus_k / delta_E4) ** (4.0 / k) / (f**2 * eg_minus2 * trace)


def tilde_M(M: float) -> tuple[float, bool]:
    """``(sqrt(M^2 + 1), M >= 1)``; the flag says sqrt(M^2+1) <= sqrt(2) M applies."""
    if M < 0:
        raise ValueError(f"M must be nonnegative, got {M}")
    return math.sqrt(M * M + 1.0), M >= 1.0


def tilde_params(
    params: EventParams,
    spec: ModelSpec,
    delta_E1: float | None = None,
    delta_E4: float | None = None,
) -> TildeParams:
    """Extended-event parameters; both tolerances default to ``params.delta``."""
    d1 = params.delta if delta_E1 is None else delta_E1
    d4 = params.delta if delta_E4 is None else delta_E4
    g = spec.g_spec
    tr = spec.sigma.trace
    T_bound, T, eps_t = tilde_epsilon_bound(params.eps, params.n, d1, tr, g.eg_minus_k, g.k)
    bp = beta_prime(params.eps, params.n, d4, tr, g.eg_minus2, g.eg_minus_k, g.k)
    Mt, ge1 = tilde_M(params.M)
    return TildeParams(
        eps_tilde=eps_t,
        beta_tilde=params.beta + bp,
        gamma_tilde=params.gamma + bp,
        M_tilde=Mt,
        alpha2_tilde=params.alpha2,
        alpha_inf_tilde=params.alpha_inf,
        beta_prime=bp,
        T_bound=T_bound,
        T=T,
        delta_E1=d1,
        delta_E4=d4,
        M_ge_one=ge1,
    )


# ---------------------------------------------------------------------------
# Measurements
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EventReport:
    eps_meas: float
    eps_tilde_meas: float
    alpha2_meas: float
    alpha_inf_meas: float
    alpha2_tilde_meas: float
    alpha_inf_tilde_meas: float
    max_z_norm: float
    max_z_tilde_norm: float
    e4_stat: float
    e4_tilde_stat: float
    e5_stat: float
    e5_tilde_stat: float
    omega1_min: float
    omega1_max: float
    omega1: bool
    E1: bool
    E2: bool
    E3: bool
    E4: bool
    E5: bool
    tE1: bool
    tE2: bool
    tE3: bool
    tE4: bool
    tE5: bool
    rho: float
    delta: float
    C1: float
    C2: float

    def to_record(self) -> dict:
        return asdict(self)


def check_events(ext: ExtendedDataset, params: EventParams, tparams: TildeParams) -> EventReport:
    """Measure every event statistic and evaluate the E_i and extended E_i indicators.

    The inverse-norm averages are centred on the homogeneous ``params.rho``
    for both versions of the events.
    """
    base = ext.base
    Z, Zt = base.z, ext.z_ext
    norms = row_norms(Z)
    norms_t = np.sqrt(norms**2 + 1.0)

    eps_meas = spectral_deviation(normalized_gram(Z))
    eps_t_meas = spectral_deviation(normalized_gram(Zt))

    mu_norm = base.spec.mu_norm
    proj = (Z @ base.spec.mu) / norms
    proj_t = (Zt @ ext.mu_ext) / norms_t
    if mu_norm > 0:
        a2, ainf = np.linalg.norm(proj) / mu_norm, np.max(np.abs(proj)) / mu_norm
        a2t, ainft = np.linalg.norm(proj_t) / mu_norm, np.max(np.abs(proj_t)) / mu_norm
    else:
        a2 = ainf = a2t = ainft = 0.0

    inv = 1.0 / norms**2
    inv_t = 1.0 / norms_t**2
    yy = base.y_noisy * base.y
    e4, e4t = float(inv.mean()), float(inv_t.mean())
    e5, e5t = float((yy * inv).mean()), float((yy * inv_t).mean())

    vr = np.sum(base.v**2, axis=1) / base.spec.sigma.trace
    om_lo, om_hi = float(vr.min()), float(vr.max())
    q = params.eps / 4.0
    omega1 = (1.0 - q) <= om_lo and om_hi <= (1.0 + q)

    rho = params.rho
    center5 = (1.0 - 2.0 * base.spec.eta) * rho
    max_z = float(norms.max())
    max_zt = float(norms_t.max())
    return EventReport(
        eps_meas=eps_meas,
        eps_tilde_meas=eps_t_meas,
        alpha2_meas=float(a2),
        alpha_inf_meas=float(ainf),
        alpha2_tilde_meas=float(a2t),
        alpha_inf_tilde_meas=float(ainft),
        max_z_norm=max_z,
        max_z_tilde_norm=max_zt,
        e4_stat=e4,
        e4_tilde_stat=e4t,
        e5_stat=e5,
        e5_tilde_stat=e5t,
        omega1_min=om_lo,
        omega1_max=om_hi,
        omega1=bool(omega1),
        E1=eps_meas <= params.eps,
        E2=bool(a2 <= params.alpha2 and ainf <= params.alpha_inf),
        E3=max_z <= params.M,
        E4=abs(e4 - rho) <= params.beta * rho,
        E5=abs(e5 - center5) <= params.gamma * rho,
        tE1=eps_t_meas <= tparams.eps_tilde,
        tE2=bool(a2t <= tparams.alpha2_tilde and ainft <= tparams.alpha_inf_tilde),
        tE3=max_zt <= tparams.M_tilde,
        tE4=abs(e4t - rho) <= tparams.beta_tilde * rho,
        tE5=abs(e5t - center5) <= tparams.gamma_tilde * rho,
        rho=rho,
        delta=params.delta,
        C1=params.C1,
        C2=params.C2,
    )


@dataclass(frozen=True)
class PerturbationReport:
    """Effect of the appended constant coordinate on the normalized Gram matrix.

    ``P`` is kept for inspection but left out of :meth:`to_record`.
    """

    P: np.ndarray
    P_spec: float
    P_frob: float
    A_max: float
    B_max: float
    B_pert: float
    max_inv_norm_sq: float

    def to_record(self) -> dict:
        d = asdict(self)
        del d["P"]
        return d


def measure_perturbation(ext: ExtendedDataset) -> PerturbationReport:
    Z = ext.base.z
    norms = row_norms(Z)
    sq = norms**2
    norms_t = np.sqrt(sq + 1.0)
    P = normalized_gram(ext.z_ext) - normalized_gram(Z)
    n = len(norms)
    off = ~np.eye(n, dtype=bool)
    if n > 1:
        A = np.abs(np.outer(norms, norms) / np.outer(norms_t, norms_t) - 1.0)
        B = 1.0 / np.outer(norms_t, norms_t)
        a_max, b_max = float(A[off].max()), float(B[off].max())
    else:
        a_max = b_max = 0.0
    p_spec, ok = spectral_norm_sym(P)
    if not ok:
        warnings.warn("spectral norm of P not converged", RuntimeWarning)
    return PerturbationReport(
        P=P,
        P_spec=p_spec,
        P_frob=float(np.linalg.norm(P)),
        A_max=a_max,
        B_max=b_max,
        B_pert=float(np.mean(1.0 / (sq * (sq + 1.0)))),
        max_inv_norm_sq=float(1.0 / sq.min()),
    )


def perturbation_coverage(
    ext: ExtendedDataset, eps_meas: float, pert: PerturbationReport, delta_E1: float, delta_E4: float
) -> tuple[bool, bool, float, float]:
    """Check the two perturbation bounds against one dataset.

    Returns ``(||P|| <= T, B_pert <= beta' rho, T, beta' rho)`` with T and
    beta' evaluated at the measured Gram deviation ``eps_meas``.
    """
    spec = ext.base.spec
    g = spec.g_spec
    tr = spec.sigma.trace
    _, T, _ = tilde_epsilon_bound(eps_meas, ext.n, delta_E1, tr, g.eg_minus_k, g.k)
    bp = beta_prime(eps_meas, ext.n, delta_E4, tr, g.eg_minus2, g.eg_minus_k, g.k)
    bp_rho = bp * g.eg_minus2 / tr
    return pert.P_spec <= T, pert.B_pert <= bp_rho, T, bp_rho
