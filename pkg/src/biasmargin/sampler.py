"""Data generator for the mixture model x = y*mu + g * Sigma^{1/2} xi with label noise.

The scale factor ``g`` and the direction vector ``xi`` come from small
families with closed-form moments, so that each moment condition
(E g^2 = 1, E g^l < inf, E g^-k < inf, E|xi|^r <= K) can be stressed
independently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any

import numpy as np

G_FAMILIES = ("constant-one", "lower-power", "pareto-tail")
XI_FAMILIES = ("rademacher", "standardized-uniform", "standardized-student-t", "gaussian")
SIGMA_KINDS = ("identity", "diagonal", "spiked")

_MASK64 = (1 << 64) - 1


class MomentViolation(ValueError):
    """A distribution family cannot satisfy a requested moment condition."""


class NonPSD(ValueError):
    """A covariance description is not positive semidefinite."""


# ---------------------------------------------------------------------------
# Seeding
# ---------------------------------------------------------------------------


def splitmix64(x: int) -> int:
    """One round of the SplitMix64 finalizer (Steele, Lea & Flood)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_seed(master: int, *indices: int) -> int:
    """Derive a 64-bit sub-stream seed from a master seed and integer indices.

    ``h = splitmix64(master)``, then for each index ``i``:
    ``h = splitmix64(h ^ splitmix64(i))``. Any implementation of this
    recipe reproduces the same streams.
    """
    h = splitmix64(int(master) & _MASK64)
    for i in indices:
        h = splitmix64(h ^ splitmix64(int(i) & _MASK64))
    return h


# ---------------------------------------------------------------------------
# Scale factor g
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GSpec:
    """Distribution of the positive scale factor ``g``.

    Build with :func:`build_g_spec`; it solves ``scale`` so that E g^2 = 1.
    """

    family: str
    param: float | None
    l: float
    k: float
    scale: float

    def moment(self, q: float) -> float:
        """Closed-form E[g^q]; ``inf`` when the moment diverges."""
        if self.family == "constant-one":
            return 1.0
        c = self.scale
        if self.family == "lower-power":
            theta = self.param
            # E U^{q/theta} = theta / (theta + q), finite for q > -theta
            return c**q * theta / (theta + q) if q > -theta else math.inf
        a = self.param
        # Pareto(a, min 1): E W^q = a / (a - q), finite for q < a
        return c**q * a / (a - q) if q < a else math.inf

    @property
    def eg2(self) -> float:
        return self.moment(2.0)

    @property
    def eg_minus2(self) -> float:
        return self.moment(-2.0)

    @property
    def eg_minus_k(self) -> float:
        return self.moment(-self.k)

    @property
    def eg_l(self) -> float:
        if math.isinf(self.l):
            return math.inf if self.family != "constant-one" else 1.0
        return self.moment(self.l)

    @property
    def norm_l(self) -> float:
        """||g||_{L^l}; for l = inf this is the essential supremum."""
        if math.isinf(self.l):
            if self.family == "constant-one":
                return 1.0
            if self.family == "lower-power":
                return self.scale
            return math.inf
        return self.moment(self.l) ** (1.0 / self.l)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.family == "constant-one":
            return np.ones(n)
        if self.family == "lower-power":
            u = 1.0 - rng.random(n)  # in (0, 1]
            return self.scale * u ** (1.0 / self.param)
        return self.scale * (rng.pareto(self.param, n) + 1.0)

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"family": self.family, "l": _encode_inf(self.l), "k": self.k}
        if self.family == "lower-power":
            d["theta"] = self.param
        elif self.family == "pareto-tail":
            d["a"] = self.param
        return d


def build_g_spec(family: str, params: dict[str, float] | None = None, l: float = 2.0, k: float = 4.0) -> GSpec:
    """Construct a :class:`GSpec`, rejecting infeasible moment combinations.

    ``params`` holds ``theta`` for the lower-power family (g = c U^{1/theta})
    and ``a`` for the pareto-tail family (g = c W, W ~ Pareto(a) on [1, inf)).
    """
    params = dict(params or {})
    if family not in G_FAMILIES:
        raise ValueError(f"unknown g family {family!r}; expected one of {G_FAMILIES}")
    l = float(l)
    k = float(k)
    if not (l >= 2.0):
        raise MomentViolation(f"l must lie in [2, inf], got {l}")
    if not (2.0 < k <= 4.0):
        raise MomentViolation(f"k must lie in (2, 4], got {k}")

    if family == "constant-one":
        if params:
            raise ValueError(f"constant-one takes no parameters, got {sorted(params)}")
        return GSpec(family, None, l, k, 1.0)

    if family == "lower-power":
        theta = float(params.pop("theta"))
        if params:
            raise ValueError(f"unexpected g parameters {sorted(params)}")
        if not theta > 0:
            raise ValueError(f"theta must be positive, got {theta}")
        if k >= theta:
            raise MomentViolation(f"E g^{{-k}} infinite: k >= theta ({k} >= {theta})")
        return GSpec(family, theta, l, k, math.sqrt((theta + 2.0) / theta))

    a = float(params.pop("a"))
    if params:
        raise ValueError(f"unexpected g parameters {sorted(params)}")
    if not a > 2.0:
        raise MomentViolation(f"E g^2 infinite: tail index a <= 2 ({a})")
    if math.isinf(l):
        raise MomentViolation("||g||_{L^inf} infinite: pareto-tail support is unbounded")
    if l >= a:
        raise MomentViolation(f"E g^l infinite: l >= a ({l} >= {a})")
    return GSpec(family, a, l, k, math.sqrt((a - 2.0) / a))


# ---------------------------------------------------------------------------
# Direction vector xi
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class XiSpec:
    """Distribution of the i.i.d. entries of ``xi`` (mean 0, variance 1)."""

    family: str
    r: float
    K: float
    df: float | None = None

    @property
    def abs_moment_r(self) -> float:
        return xi_abs_moment(self.family, self.r, self.df)

    def sample(self, rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
        n, p = shape
        if self.family == "rademacher":
            nbytes = (p + 7) // 8
            bits = np.unpackbits(rng.integers(0, 256, size=(n, nbytes), dtype=np.uint8), axis=1)
            return 2.0 * bits[:, :p] - 1.0
        if self.family == "standardized-uniform":
            return math.sqrt(3.0) * (2.0 * rng.random(shape) - 1.0)
        if self.family == "gaussian":
            return rng.standard_normal(shape)
        nu = self.df
        return rng.standard_t(nu, size=shape) * math.sqrt((nu - 2.0) / nu)

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"family": self.family, "r": self.r, "K": self.K}
        if self.df is not None:
            d["df"] = self.df
        return d


def xi_abs_moment(family: str, r: float, df: float | None = None) -> float:
    """Closed-form E|xi|^r for a standardized family."""
    if family == "rademacher":
        return 1.0
    if family == "standardized-uniform":
        return 3.0 ** (r / 2.0) / (r + 1.0)
    if family == "gaussian":
        return 2.0 ** (r / 2.0) * math.gamma((r + 1.0) / 2.0) / math.sqrt(math.pi)
    if family == "standardized-student-t":
        nu = df
        if not nu > r:
            return math.inf
        return math.exp(
            (r / 2.0) * math.log(nu - 2.0)
            + math.lgamma((r + 1.0) / 2.0)
            + math.lgamma((nu - r) / 2.0)
            - 0.5 * math.log(math.pi)
            - math.lgamma(nu / 2.0)
        )
    raise ValueError(f"unknown xi family {family!r}; expected one of {XI_FAMILIES}")


def build_xi_spec(family: str, r: float = 4.0, K: float | None = None, df: float | None = None) -> XiSpec:
    """Construct a :class:`XiSpec`; ``K`` defaults to the exact E|xi|^r."""
    if family not in XI_FAMILIES:
        raise ValueError(f"unknown xi family {family!r}; expected one of {XI_FAMILIES}")
    r = float(r)
    if not (2.0 < r <= 4.0):
        raise MomentViolation(f"r must lie in (2, 4], got {r}")
    if family == "standardized-student-t":
        if df is None:
            raise ValueError("standardized-student-t requires df")
        df = float(df)
        if not df > r:
            raise MomentViolation(f"E|xi|^r infinite: df <= r ({df} <= {r})")
    elif df is not None:
        raise ValueError(f"df only applies to standardized-student-t, not {family}")
    m = xi_abs_moment(family, r, df)
    if K is None:
        K = m
    K = float(K)
    if not K > 0:
        raise ValueError(f"K must be positive, got {K}")
    if m > K * (1.0 + 1e-12):
        raise MomentViolation(f"E|xi|^r = {m:.6g} exceeds K = {K:.6g}")
    return XiSpec(family, r, K, df)


# ---------------------------------------------------------------------------
# Covariance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Covariance:
    """Structured covariance: identity, diagonal, or identity + strength * u u^T.

    Sigma^{1/2} is applied analytically from the structure.
    """

    kind: str
    p: int
    diag: np.ndarray | None = None
    strength: float = 0.0
    u: np.ndarray | None = None
    trace: float = field(init=False)
    op_norm: float = field(init=False)
    frob: float = field(init=False)

    def __post_init__(self):
        eig = self.eigenvalues()
        object.__setattr__(self, "trace", float(eig.sum()))
        object.__setattr__(self, "op_norm", float(eig.max()))
        object.__setattr__(self, "frob", float(math.sqrt(np.sum(eig**2))))

    def eigenvalues(self) -> np.ndarray:
        if self.kind == "identity":
            return np.ones(self.p)
        if self.kind == "diagonal":
            return np.asarray(self.diag, dtype=float)
        eig = np.ones(self.p)
        eig[0] = 1.0 + self.strength
        return eig

    def sqrt_apply(self, rows: np.ndarray) -> np.ndarray:
        """Return ``rows @ Sigma^{1/2}`` (each row mapped by the symmetric root)."""
        if self.kind == "identity":
            return rows
        if self.kind == "diagonal":
            return rows * np.sqrt(self.diag)
        # (I + s u u^T)^{1/2} = I + (sqrt(1 + s) - 1) u u^T
        coef = math.sqrt(1.0 + self.strength) - 1.0
        return rows + coef * np.outer(rows @ self.u, self.u)

    def quad(self, vec: np.ndarray) -> float:
        """vec^T Sigma vec, i.e. ||Sigma^{1/2} vec||^2."""
        vec = np.asarray(vec, dtype=float)
        if self.kind == "identity":
            return float(vec @ vec)
        if self.kind == "diagonal":
            return float(np.sum(self.diag * vec**2))
        return float(vec @ vec + self.strength * (self.u @ vec) ** 2)

    def dense(self) -> np.ndarray:
        if self.kind == "identity":
            return np.eye(self.p)
        if self.kind == "diagonal":
            return np.diag(self.diag)
        return np.eye(self.p) + self.strength * np.outer(self.u, self.u)

    def to_dict(self) -> dict[str, Any]:
        if self.kind == "identity":
            return {"kind": "identity"}
        if self.kind == "diagonal":
            return {"kind": "diagonal", "entries": [float(v) for v in self.diag]}
        return {"kind": "spiked", "strength": self.strength, "u": [float(v) for v in self.u]}


def build_sigma(kind: str, p: int, params: dict[str, Any] | None = None) -> Covariance:
    """Build a structured covariance.

    * ``identity``: no parameters.
    * ``diagonal``: ``entries`` (length p) or ``power`` (entries j^power, j = 1..p).
    * ``spiked``: ``strength`` lambda and optional direction ``u`` (default e_1).
    """
    params = dict(params or {})
    p = int(p)
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    if kind == "identity":
        if params:
            raise ValueError(f"identity covariance takes no parameters, got {sorted(params)}")
        return Covariance("identity", p)
    if kind == "diagonal":
        if "entries" in params:
            diag = np.asarray(params.pop("entries"), dtype=float)
        elif "power" in params:
            diag = np.arange(1, p + 1, dtype=float) ** float(params.pop("power"))
        else:
            raise ValueError("diagonal covariance needs 'entries' or 'power'")
        if params:
            raise ValueError(f"unexpected covariance parameters {sorted(params)}")
        if diag.shape != (p,):
            raise ValueError(f"expected {p} diagonal entries, got shape {diag.shape}")
        bad = np.flatnonzero(diag < 0)
        if bad.size:
            raise NonPSD(f"negative diagonal entry {diag[bad[0]]} at index {bad[0]}")
        return Covariance("diagonal", p, diag=diag)
    if kind == "spiked":
        strength = float(params.pop("strength"))
        u = params.pop("u", None)
        if params:
            raise ValueError(f"unexpected covariance parameters {sorted(params)}")
        if strength < -1.0:
            raise NonPSD(f"spike strength {strength} < -1 gives a negative eigenvalue")
        if u is None:
            u = np.zeros(p)
            u[0] = 1.0
        u = np.asarray(u, dtype=float)
        if u.shape != (p,) or not np.linalg.norm(u) > 0:
            raise ValueError("spike direction must be a nonzero vector of length p")
        return Covariance("spiked", p, strength=strength, u=u / np.linalg.norm(u))
    raise ValueError(f"unknown covariance kind {kind!r}; expected one of {SIGMA_KINDS}")


# ---------------------------------------------------------------------------
# Model and datasets
# ---------------------------------------------------------------------------


def make_mu(p: int, norm: float, direction: np.ndarray | None = None) -> np.ndarray:
    """Signal vector with the given Euclidean norm (direction e_1 by default)."""
    if direction is None:
        mu = np.zeros(p)
        mu[0] = norm
        return mu
    direction = np.asarray(direction, dtype=float)
    return norm * direction / np.linalg.norm(direction)


@dataclass(frozen=True)
class ModelSpec:
    p: int
    mu: np.ndarray
    sigma: Covariance
    g_spec: GSpec
    xi_spec: XiSpec
    eta: float = 0.0

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        object.__setattr__(self, "mu", mu)
        if mu.shape != (self.p,):
            raise ValueError(f"mu must have shape ({self.p},), got {mu.shape}")
        if self.sigma.p != self.p:
            raise ValueError(f"covariance dimension {self.sigma.p} != p = {self.p}")
        if not (0.0 <= self.eta < 0.5):
            raise ValueError(f"eta must lie in [0, 1/2), got {self.eta}")

    @property
    def mu_norm(self) -> float:
        return float(np.linalg.norm(self.mu))

    @property
    def sigma_half_mu_norm(self) -> float:
        return math.sqrt(self.sigma.quad(self.mu))

    def to_dict(self) -> dict[str, Any]:
        return {
            "p": self.p,
            "mu": [float(v) for v in self.mu],
            "sigma": self.sigma.to_dict(),
            "g": self.g_spec.to_dict(),
            "xi": self.xi_spec.to_dict(),
            "eta": self.eta,
        }


def _encode_inf(v: float) -> float | str:
    return "inf" if math.isinf(v) else v


def _check_keys(d: dict, allowed: set[str], what: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ValueError(f"unknown {what} keys: {sorted(unknown)}")


def g_spec_from_dict(d: dict[str, Any]) -> GSpec:
    d = dict(d)
    _check_keys(d, {"family", "theta", "a", "l", "k"}, "g")
    family = d.pop("family")
    l = float(d.pop("l", 2.0))
    k = float(d.pop("k", 4.0))
    return build_g_spec(family, d, l=l, k=k)


def xi_spec_from_dict(d: dict[str, Any]) -> XiSpec:
    _check_keys(d, {"family", "r", "K", "df"}, "xi")
    return build_xi_spec(d["family"], r=d.get("r", 4.0), K=d.get("K"), df=d.get("df"))


def sigma_from_dict(d: dict[str, Any], p: int) -> Covariance:
    d = dict(d)
    _check_keys(d, {"kind", "entries", "power", "strength", "u"}, "sigma")
    kind = d.pop("kind")
    return build_sigma(kind, p, d)


def model_spec_from_dict(d: dict[str, Any]) -> ModelSpec:
    """Inverse of :meth:`ModelSpec.to_dict`; ``mu_norm`` may replace ``mu``."""
    _check_keys(d, {"p", "mu", "mu_norm", "sigma", "g", "xi", "eta"}, "model")
    p = int(d["p"])
    if "mu" in d and "mu_norm" in d:
        raise ValueError("give either 'mu' or 'mu_norm', not both")
    mu = np.asarray(d["mu"], dtype=float) if "mu" in d else make_mu(p, float(d.get("mu_norm", 0.0)))
    return ModelSpec(
        p=p,
        mu=mu,
        sigma=sigma_from_dict(d.get("sigma", {"kind": "identity"}), p),
        g_spec=g_spec_from_dict(d.get("g", {"family": "constant-one"})),
        xi_spec=xi_spec_from_dict(d.get("xi", {"family": "rademacher"})),
        eta=float(d.get("eta", 0.0)),
    )


@dataclass(frozen=True)
class Dataset:
    """n samples with the latent factors kept for diagnostics."""

    spec: ModelSpec
    x: np.ndarray
    y: np.ndarray
    y_noisy: np.ndarray
    z: np.ndarray
    g: np.ndarray
    v: np.ndarray
    seed: int

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def flipped(self) -> np.ndarray:
        return self.y_noisy != self.y


@dataclass(frozen=True)
class ExtendedDataset:
    """Bias-augmented view: x~ = (x, 1), z~ = (z, 1), mu~ = (mu, 0)."""

    base: Dataset

    @property
    def n(self) -> int:
        return self.base.n

    @cached_property
    def x_ext(self) -> np.ndarray:
        return np.hstack([self.base.x, np.ones((self.n, 1))])

    @cached_property
    def z_ext(self) -> np.ndarray:
        return np.hstack([self.base.z, np.ones((self.n, 1))])

    @property
    def mu_ext(self) -> np.ndarray:
        return np.append(self.base.spec.mu, 0.0)


def _draw(spec: ModelSpec, n: int, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    # draw order y, flips, g, xi is part of the reproducibility contract
    rng = np.random.default_rng(seed)
    y = 2.0 * rng.integers(0, 2, size=n) - 1.0
    flip = rng.random(n) < spec.eta
    y_noisy = np.where(flip, -y, y)
    g = spec.g_spec.sample(rng, n)
    xi = spec.xi_spec.sample(rng, (n, spec.p))
    return y, y_noisy, g, xi


def sample_dataset(spec: ModelSpec, n: int, seed: int) -> Dataset:
    """Draw ``n`` i.i.d. samples. Identical ``(spec, n, seed)`` give identical data."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    y, y_noisy, g, xi = _draw(spec, n, seed)
    v = spec.sigma.sqrt_apply(xi)
    z = g[:, None] * v
    x = y[:, None] * spec.mu + z
    return Dataset(spec, x, y, y_noisy, z, g, v, int(seed))


def sample_scores(
    spec: ModelSpec, w: np.ndarray, b: float, n: int, seed: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Labels and scores <w, x> + b for the samples ``sample_dataset(spec, n, seed)`` would draw.

    Uses <w, x> = y <w, mu> + g <Sigma^{1/2} w, xi>, so x itself is never built.
    """
    y, y_noisy, g, xi = _draw(spec, n, seed)
    w = np.asarray(w, dtype=float)
    w_half = spec.sigma.sqrt_apply(w[None, :])[0]
    return y, y_noisy, y * float(w @ spec.mu) + g * (xi @ w_half) + b


def extend_dataset(data: Dataset) -> ExtendedDataset:
    return ExtendedDataset(data)


def dataset_from_noise(
    z: np.ndarray,
    mu: np.ndarray | None = None,
    y: np.ndarray | None = None,
    y_noisy: np.ndarray | None = None,
) -> Dataset:
    """Wrap explicit noise rows as a Dataset (g = 1, v = z, identity covariance).

    Meant for hand-built instances; ``y`` defaults to all +1.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    n, p = z.shape
    mu = np.zeros(p) if mu is None else np.asarray(mu, dtype=float)
    y = np.ones(n) if y is None else np.asarray(y, dtype=float)
    y_noisy = y.copy() if y_noisy is None else np.asarray(y_noisy, dtype=float)
    spec = ModelSpec(p, mu, build_sigma("identity", p), build_g_spec("constant-one"), build_xi_spec("rademacher"))
    x = y[:, None] * mu + z
    return Dataset(spec, x, y, y_noisy, z, np.ones(n), z.copy(), 0)
