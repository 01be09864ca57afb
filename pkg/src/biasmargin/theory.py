"""Condition and bound evaluators for the bias-extended max-margin classifier.

Every evaluator returns thresholds next to observed values, so that how
far a condition misses is readable from the report. Unknown universal
constants are explicit inputs (:class:`ConstantsConfig`) and are echoed
into every report. For l = inf the convention 1/l = 0 is used throughout.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

from .events import EventParams, TildeParams
from .sampler import ModelSpec


class WrongRegime(ValueError):
    """The noise rate does not match the theorem being evaluated."""


class OutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class ConstantsConfig:
    C: float = 1.0
    C_H: float = 2.5
    c: float = 1.0
    C1: float = 1.0
    C2: float = 1.0

    def __post_init__(self):
        for name, val in asdict(self).items():
            if not val > 0:
                raise ValueError(f"constant {name} must be positive, got {val}")
        if not self.C_H > 2:
            raise ValueError(f"C_H must exceed 2, got {self.C_H}")


_RELATIONS = {
    ">=": lambda obs, thr: obs >= thr,
    ">": lambda obs, thr: obs > thr,
    "<=": lambda obs, thr: obs <= thr,
    "<": lambda obs, thr: obs < thr,
}


@dataclass(frozen=True)
class Condition:
    """``observed <relation> threshold``."""

    name: str
    observed: float
    relation: str
    threshold: float

    @property
    def satisfied(self) -> bool:
        return bool(_RELATIONS[self.relation](self.observed, self.threshold))

    @property
    def factor(self) -> float:
        """How many times the observed value clears (>1) or misses (<1) the threshold."""
        obs, thr = self.observed, self.threshold
        try:
            return obs / thr if self.relation in (">=", ">") else thr / obs
        except ZeroDivisionError:
            return math.inf

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "observed": self.observed,
            "relation": self.relation,
            "threshold": self.threshold,
            "satisfied": self.satisfied,
            "factor": self.factor,
        }


@dataclass
class TheoremReport:
    theorem: str
    conditions: list[Condition] = field(default_factory=list)
    values: dict[str, float] = field(default_factory=dict)
    constants: ConstantsConfig = field(default_factory=ConstantsConfig)
    notes: list[str] = field(default_factory=list)

    def add(self, name: str, observed: float, relation: str, threshold: float) -> Condition:
        cond = Condition(name, float(observed), relation, float(threshold))
        self.conditions.append(cond)
        return cond

    def __getitem__(self, name: str) -> Condition:
        for cond in self.conditions:
            if cond.name == name:
                return cond
        raise KeyError(name)

    def all_satisfied(self, names: list[str] | None = None) -> bool:
        conds = self.conditions if names is None else [self[n] for n in names]
        return all(c.satisfied for c in conds)

    def to_dict(self) -> dict:
        return {
            "theorem": self.theorem,
            "conditions": [c.to_dict() for c in self.conditions],
            "values": dict(self.values),
            "constants": asdict(self.constants),
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, default=_json_default)

    def to_markdown(self) -> str:
        lines = [f"### {self.theorem}", "", "| condition | observed | rel | threshold | status | factor |", "|---|---|---|---|---|---|"]
        for c in self.conditions:
            status = "PASS" if c.satisfied else "FAIL"
            lines.append(f"| {c.name} | {c.observed:.6g} | {c.relation} | {c.threshold:.6g} | {status} | {c.factor:.3g} |")
        consts = ", ".join(f"{k}={v:g}" for k, v in asdict(self.constants).items())
        lines += ["", f"constants: {consts}"]
        lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines) + "\n"


def _json_default(o):
    if isinstance(o, float) and not math.isfinite(o):
        return str(o)
    raise TypeError(type(o))


def _inv(l: float) -> float:
    return 0.0 if math.isinf(l) else 1.0 / l


def _dim_factor(p: int, n: int, r: float) -> float:
    return max(p ** (2.0 / r - 0.5), n ** (2.0 / r))


# ---------------------------------------------------------------------------
# Thresholds shared by the theorems
# ---------------------------------------------------------------------------


def t_hom(spec: ModelSpec, n: int, delta: float) -> float:
    r, il = spec.xi_spec.r, _inv(spec.g_spec.l)
    nd = n / delta
    first = nd ** (2.0 / r) * math.sqrt(n) * spec.sigma.frob * _dim_factor(spec.p, n, r)
    second = math.sqrt(nd) * n * spec.sigma_half_mu_norm
    return nd**il * max(first, second)


def t_inhom(n: int, delta: float, k: float, l: float) -> float:
    return (n / delta) ** (2.0 / k + _inv(l)) * n**1.5


def t_hom_noisy(spec: ModelSpec, n: int, delta: float) -> float:
    r, il = spec.xi_spec.r, _inv(spec.g_spec.l)
    return (
        (1.0 / spec.eta)
        * (n / delta) ** (2.0 / r + il)
        * math.sqrt(n)
        * _dim_factor(spec.p, n, r)
        * spec.sigma.frob
    )


def t_inhom_noisy(n: int, delta: float, k: float, l: float, eta: float) -> float:
    return t_inhom(n, delta, k, l) / eta


def n_threshold_noiseless(C2: float, k: float, delta: float) -> float:
    return (6.0 * C2) ** (k / (k - 2.0)) * delta ** (-2.0 / (k - 2.0))


def n_threshold_noisy(C2: float, k: float, delta: float, eta: float) -> float:
    return delta ** (-2.0 / (k - 2.0)) * (32.0 * C2 / min(eta, 1.0 - 2.0 * eta)) ** (k / (k - 2.0))


# ---------------------------------------------------------------------------
# Theorem evaluators
# ---------------------------------------------------------------------------


def thm1_conditions(
    spec: ModelSpec,
    n: int,
    delta: float,
    consts: ConstantsConfig,
    params: EventParams,
    tparams: TildeParams,
) -> TheoremReport:
    """Noiseless, intermediate signal: assumptions plus the five sufficient conditions."""
    if spec.eta != 0:
        raise WrongRegime(f"the noiseless intermediate-signal conditions need eta = 0, got {spec.eta}")
    g = spec.g_spec
    C = consts.C
    rep = TheoremReport("thm1", constants=consts)
    th, ti = t_hom(spec, n, delta), t_inhom(n, delta, g.k, g.l)
    rep.values.update(T_Hom=th, T_Inhom=ti)

    rep.add("n_threshold", n, ">=", n_threshold_noiseless(consts.C2, g.k, delta))
    rep.add("signal", spec.mu_norm**2, ">=", C * delta**-0.5 * spec.sigma_half_mu_norm)
    rep.add("trace", spec.sigma.trace, ">=", C * max(th, ti))

    mu = spec.mu_norm  # ||mu~|| = ||mu||
    nr = n * params.rho
    bt = tparams.beta_tilde
    rep.add("(i) beta_tilde", bt, "<", 0.5)
    rep.add("(ii) signal vs alignment", mu * math.sqrt(max(1.0 - bt, 0.0) * nr), ">=", C * tparams.alpha2_tilde)
    rep.add("(iii) alignment", tparams.alpha2_tilde * mu * math.sqrt((1.0 + bt) * nr), "<=", 0.25)
    rep.add("(iv) gram x norm", tparams.eps_tilde * tparams.M_tilde * math.sqrt((1.0 + bt) * nr), "<=", 0.25)
    rep.add("(v) norm x alignment", tparams.M_tilde * tparams.alpha_inf_tilde * mu * (1.0 + bt) * nr, "<", 3.0 / 32.0)
    return rep


THM1_ASSUMPTIONS = ["n_threshold", "signal", "trace"]


def thm2_conditions(spec: ModelSpec, n: int, delta: float, consts: ConstantsConfig) -> TheoremReport:
    """Noiseless, large signal."""
    if spec.eta != 0:
        raise WrongRegime(f"the large-signal conditions need eta = 0, got {spec.eta}")
    g = spec.g_spec
    r = spec.xi_spec.r
    rep = TheoremReport("thm2", constants=consts)
    large = 1.5 * math.sqrt(2.0) * consts.C_H * g.norm_l * (n / delta) ** _inv(g.l) * math.sqrt(spec.sigma.trace)
    high = 2.0 * consts.C1 * (n / delta) ** (2.0 / r) * _dim_factor(spec.p, n, r) * spec.sigma.frob
    rep.values.update(large_signal_factor=1.5 * math.sqrt(2.0))
    rep.add("large signal", spec.mu_norm, ">=", large)
    rep.add("high dimension", spec.sigma.trace, ">=", high)
    return rep


def thm3_conditions(
    spec: ModelSpec,
    n: int,
    delta: float,
    consts: ConstantsConfig,
    params: EventParams,
    tparams: TildeParams,
) -> TheoremReport:
    """Noisy labels: assumptions, the two signal regimes, and the inner conditions."""
    eta = spec.eta
    if not (0.0 < eta < 0.5):
        raise WrongRegime(f"the noisy conditions need eta in (0, 1/2), got {eta}")
    g = spec.g_spec
    C = consts.C
    il = _inv(g.l)
    nd = n / delta
    mn = min(eta, 1.0 - 2.0 * eta)
    mu, smu, tr = spec.mu_norm, spec.sigma_half_mu_norm, spec.sigma.trace

    rep = TheoremReport("thm3", constants=consts)
    rep.notes.append("one master constant C is shared by all conditions, including both regimes")
    th, ti = t_hom_noisy(spec, n, delta), t_inhom_noisy(n, delta, g.k, g.l, eta)
    rep.values.update(
        T_Hom_prime=th,
        T_Inhom_prime=ti,
        signal_factor=max(1.0 / eta, 1.0 / (1.0 - 2.0 * eta)),
        min_eta=mn,
    )
    rep.add("signal", mu**2, ">=", C * max(1.0 / eta, 1.0 / (1.0 - 2.0 * eta)) * delta**-0.5 * smu)
    rep.add("trace", tr, ">=", C * max(th, ti))
    r1 = rep.add("regime (1) trace", tr, ">=", C * nd ** (0.5 + il) * n * smu)
    r2a = rep.add("regime (2) signal", mu**2, ">=", C / mn * nd ** (0.5 + il) * smu)
    ratio = smu**2 / mu**2 if mu > 0 else 0.0
    r2b = rep.add("regime (2) trace", tr, ">=", C / mn * nd ** (1.0 + il) * math.sqrt(n) * ratio)
    either = r1.satisfied or (r2a.satisfied and r2b.satisfied)
    rep.add("regime (1) or (2)", 1.0 if either else 0.0, ">=", 1.0)
    rep.add("n_threshold", n, ">=", n_threshold_noisy(consts.C2, g.k, delta, eta))

    worst = max(tparams.eps_tilde, tparams.beta_tilde, tparams.gamma_tilde)
    rep.add("eps/beta/gamma tilde", worst, "<=", mn / 8.0)
    rep.add("(N_C) gram x norm", tparams.eps_tilde * tparams.M_tilde * math.sqrt(n * params.rho), "<=", eta / 2.0)
    rep.add("(N_C) signal", mu, ">=", C * math.sqrt(tparams.alpha2_tilde / (n * params.rho)))
    return rep


THM3_ASSUMPTIONS = ["signal", "trace", "regime (1) or (2)", "n_threshold"]


# ---------------------------------------------------------------------------
# Test error bounds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoundEval:
    """``rhs = eta + prefactor * (noise_term + signal_term + interaction_term)``.

    ``components`` holds the four additive pieces, already multiplied out,
    and ``rhs`` is their sum.
    """

    theorem: str
    eta: float
    prefactor: float
    noise_term: float
    signal_term: float
    interaction_term: float
    cov_norm: float
    c: float

    @property
    def bracket(self) -> float:
        return self.noise_term + self.signal_term + self.interaction_term

    @property
    def components(self) -> tuple[float, float, float, float]:
        f = self.prefactor
        return (self.eta, f * self.noise_term, f * self.signal_term, f * self.interaction_term)

    @property
    def rhs(self) -> float:
        return sum(self.components)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rhs"] = self.rhs
        d["components"] = list(self.components)
        return d


def error_bound_rhs(theorem: str, spec: ModelSpec, n: int, params: EventParams, c: float = 1.0) -> BoundEval:
    """Right-hand side of the clean test error bound for ``thm1``, ``thm2`` or ``thm3``.

    ||E z~ z~^T|| = max(||Sigma||, 1) because E z~ z~^T = diag(Sigma, 1).
    """
    eta, rho = spec.eta, params.rho
    if not eta < 0.5:
        raise ValueError(f"eta must be < 1/2, got {eta}")
    cov = max(spec.sigma.op_norm, 1.0)
    mu2 = spec.mu_norm**2
    signal = 1.0 / mu2
    inter = 1.0 / (n * rho * mu2**2)
    if theorem == "thm1":
        return BoundEval(theorem, 0.0, c * cov, 0.0, signal, inter, cov, c)
    if theorem == "thm2":
        return BoundEval(theorem, 0.0, c * cov, 0.0, signal, 0.0, cov, c)
    if theorem == "thm3":
        return BoundEval(theorem, eta, c * cov / (1.0 - 2.0 * eta) ** 2, eta * n * rho, signal, inter, cov, c)
    raise ValueError(f"unknown theorem {theorem!r}")


# ---------------------------------------------------------------------------
# Exponent arithmetic for the isotropic case
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExponentReport:
    r: float
    k: float
    l: float
    E1: float
    E2: float
    E3: float
    margin: float
    requirement: float
    beta_prime_gap: float
    regime_chain_1: float
    regime_chain_2: float
    limit: bool

    def to_dict(self) -> dict:
        d = asdict(self)
        d["l"] = "inf" if math.isinf(self.l) else self.l
        return d


def corollary_exponents(r: float, k: float, l: float) -> ExponentReport:
    """Exponents of n in the isotropic dimension requirements p >~ n^E.

    E1 and E2 come from the homogeneous trace requirement, E3 from the
    bias-coordinate requirement; ``margin = E2 - E3``. ``k = 2`` is accepted
    only as the limiting endpoint, flagged by ``limit``.

    ``beta_prime_gap`` is (3/2 + 2/k + 1/l) - 4/k and the two regime chains
    are E2 - (3/2 + 1/l) and E2 - (2 + 2/l).
    """
    r, k, l = float(r), float(k), float(l)
    if not (2.0 < r <= 4.0):
        raise OutOfRange(f"r must lie in (2, 4], got {r}")
    if not (2.0 <= k <= 4.0):
        raise OutOfRange(f"k must lie in (2, 4] (or the limit point 2), got {k}")
    if not l >= 2.0:
        raise OutOfRange(f"l must lie in [2, inf], got {l}")
    il = _inv(l)
    e1 = (4.0 + (1.0 + 2.0 * il) * r) / (2.0 * (r - 2.0))
    e2 = 1.0 + 8.0 / r + 2.0 * il
    e3 = 1.5 + 2.0 / k + il
    return ExponentReport(
        r=r,
        k=k,
        l=l,
        E1=e1,
        E2=e2,
        E3=e3,
        margin=8.0 / r - 2.0 / k + il - 0.5,
        requirement=max(e1, e2),
        beta_prime_gap=1.5 + il - 2.0 / k,
        regime_chain_1=e2 - (1.5 + il),
        regime_chain_2=e2 - (2.0 + 2.0 * il),
        limit=k == 2.0 or math.isinf(l),
    )


@dataclass(frozen=True)
class MBoundReport:
    factors: dict[str, float]
    failing: list[str]
    M: float

    @property
    def ok(self) -> bool:
        return not self.failing


def m_ge_one_check(params: EventParams, trace: float, n: int, delta: float, l: float) -> MBoundReport:
    """Check each factor of M = (1 + eps) ||g||_l (n/delta)^{1/l} sqrt(Tr) against 1."""
    factors = {
        "1+eps": 1.0 + params.eps,
        "g_norm_l": params.g_norm_l,
        "(n/delta)^(1/l)": (n / delta) ** _inv(l),
        "sqrt_trace": math.sqrt(trace),
    }
    # ||g||_l >= ||g||_2 = 1 holds exactly; allow rounding in the closed form
    failing = [k for k, v in factors.items() if v < 1.0 - (1e-12 if k == "g_norm_l" else 0.0)]
    return MBoundReport(factors, failing, math.prod(factors.values()))
