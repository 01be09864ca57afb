"""Maximum-margin linear classifiers on bias-extended features.

Two routes to the same direction: a hard-margin dual coordinate ascent
solver with a KKT certificate, and gradient descent on the exponential
or logistic loss.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

LOSSES = ("exponential", "logistic")
STEP_RULES = ("constant", "normalized")


class NotSeparable(ValueError):
    def __init__(self, message: str, pair: tuple[int, int] | None = None):
        super().__init__(message if pair is None else f"{message} (most violated pair {pair})")
        self.pair = pair


class CertificateError(RuntimeError):
    """The dual solver stopped without a valid KKT certificate."""


@dataclass
class Solution:
    """Weight/bias pair at functional margin 1 plus its dual certificate.

    ``w_ext`` is (w, b) when ``bias`` is set, otherwise just w (b = 0).
    """

    w_ext: np.ndarray
    alpha: np.ndarray
    bias: bool = True
    margins: np.ndarray | None = None
    certificate: dict = field(default_factory=dict)

    @property
    def w(self) -> np.ndarray:
        return self.w_ext[:-1] if self.bias else self.w_ext

    @property
    def b(self) -> float:
        return float(self.w_ext[-1]) if self.bias else 0.0

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.alpha > 0)

    @property
    def min_margin(self) -> float:
        return float(self.margins.min()) if self.margins is not None and self.margins.size else math.nan

    @property
    def objective(self) -> float:
        return float(self.w_ext @ self.w_ext)

    def to_dict(self) -> dict:
        return {
            "w": [float(v) for v in self.w],
            "b": self.b,
            "support": [int(i) for i in self.support],
            "min_margin": self.min_margin,
            "objective": self.objective,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _closest_opposite_pair(X: np.ndarray, y: np.ndarray) -> tuple[int, int] | None:
    pos, neg = np.flatnonzero(y > 0), np.flatnonzero(y < 0)
    if not pos.size or not neg.size:
        return None
    d = np.sum((X[pos, None, :] - X[None, neg, :]) ** 2, axis=2)
    i, j = np.unravel_index(np.argmin(d), d.shape)
    return int(min(pos[i], neg[j])), int(max(pos[i], neg[j]))


def check_separable(X: np.ndarray, y: np.ndarray) -> bool:
    """Feasibility LP: does some w satisfy y_i <w, x_i> >= 1 for all i?"""
    n, d = X.shape
    res = linprog(
        np.zeros(d),
        A_ub=-(y[:, None] * X),
        b_ub=-np.ones(n),
        bounds=[(None, None)] * d,
        method="highs",
    )
    return res.status == 0


def _kkt_violation(alpha: np.ndarray, grad: np.ndarray) -> np.ndarray:
    # grad = 1 - Q alpha; at alpha_i = 0 only a positive gradient violates
    return np.where(alpha > 0, np.abs(grad), np.maximum(grad, 0.0))


def _polish(Q: np.ndarray, alpha: np.ndarray, tol: float, rounds: int = 50) -> np.ndarray | None:
    """Active-set refinement: solve Q_SS a_S = 1 on the current support."""
    S = alpha > tol * max(alpha.max(), 1.0) * 1e-3
    for _ in range(rounds):
        if not S.any():
            return None
        idx = np.flatnonzero(S)
        a_S = np.linalg.lstsq(Q[np.ix_(idx, idx)], np.ones(idx.size), rcond=None)[0]
        if np.any(a_S < 0):
            S[idx[np.argmin(a_S)]] = False
            continue
        cand = np.zeros_like(alpha)
        cand[idx] = a_S
        grad = 1.0 - Q @ cand
        viol = _kkt_violation(cand, grad)
        if viol.max() <= tol:
            return cand
        worst = int(np.argmax(viol))
        if S[worst]:
            return None
        S[worst] = True
    return None


def certify(X: np.ndarray, y: np.ndarray, sol: Solution) -> dict:
    """KKT residuals: stationarity, primal feasibility, complementary slackness, duality gap."""
    w = sol.w_ext
    margins = y * (X @ w)
    a = sol.alpha
    wn = float(np.linalg.norm(w))
    stat = float(np.linalg.norm(w - X.T @ (a * y)))
    slack = float(np.sum(a * (margins - 1.0)))
    return {
        "stationarity": stat,
        "min_margin": float(margins.min()),
        "comp_slack": slack,
        "duality_gap": abs(float(w @ w) - float(a.sum())),
        "ok": bool(
            stat <= 1e-6 * max(wn, 1e-300)
            and margins.min() >= 1.0 - 1e-6
            and abs(slack) <= 1e-6 * max(a.sum(), 1e-300)
        ),
    }


def hard_margin_oracle(
    X: np.ndarray,
    y: np.ndarray,
    tol: float = 1e-8,
    max_iter: int = 200_000,
    bias: bool = True,
) -> Solution:
    """Minimum-norm w with y_i <w, x_i> >= 1, by greedy dual coordinate ascent.

    The dual is max sum(a) - a^T Q a / 2 over a >= 0 with
    Q_ij = y_i y_j <x_i, x_j>. The bias sits inside ``X`` as a constant
    column, so there is no equality constraint and single-coordinate
    updates suffice. The coordinate with the largest KKT violation is
    updated (lowest index on ties), then an active-set solve on the
    support polishes the result.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if not check_separable(X, y):
        raise NotSeparable("no w satisfies y_i <w, x_i> >= 1", _closest_opposite_pair(X, y))

    K = X @ X.T
    Q = np.outer(y, y) * K
    diag = np.diag(Q).copy()
    if np.any(diag <= 0):
        raise NotSeparable("zero feature vector cannot be separated", (int(np.argmin(diag)),) * 2)

    n = len(y)
    alpha = np.zeros(n)
    grad = np.ones(n)
    for _ in range(max_iter):
        viol = _kkt_violation(alpha, grad)
        i = int(np.argmax(viol))
        if viol[i] <= tol:
            break
        new = max(0.0, alpha[i] + grad[i] / diag[i])
        step = new - alpha[i]
        alpha[i] = new
        grad -= step * Q[:, i]

    polished = _polish(Q, alpha, tol)
    if polished is not None:
        alpha = polished
    w = X.T @ (alpha * y)
    sol = Solution(w_ext=w, alpha=alpha, bias=bias, margins=y * (X @ w))
    sol.certificate = certify(X, y, sol)
    if not sol.certificate["ok"]:
        raise CertificateError(f"KKT certificate failed: {sol.certificate}")
    return sol


# ---------------------------------------------------------------------------
# Gradient descent
# ---------------------------------------------------------------------------


@dataclass
class GdTrace:
    iterations: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    directions: list[np.ndarray] = field(default_factory=list)
    cosines: list[float] = field(default_factory=list)
    step_rule: str = "normalized"
    lr: float = 0.0
    converged: bool = False

    @property
    def final_cosine(self) -> float:
        return self.cosines[-1] if self.cosines else math.nan

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["iteration", "loss", "cosine"])
        for t, lo, c in zip(self.iterations, self.losses, self.cosines):
            wr.writerow([t, repr(lo), repr(c)])
        return buf.getvalue()


def _log_terms(margins: np.ndarray, loss: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample log loss and log derivative magnitude log(-l'(m_i))."""
    if loss == "exponential":
        return -margins, -margins
    # logistic: l(m) = log(1 + e^-m); log l(m) ~ -m once e^-m is negligible
    with np.errstate(divide="ignore"):
        log_l = np.where(margins > 30.0, -margins, np.log(np.logaddexp(0.0, -margins)))
    return log_l, -np.logaddexp(0.0, margins)


def _logsumexp(a: np.ndarray) -> float:
    top = float(np.max(a))
    return top + math.log(float(np.sum(np.exp(a - top))))


def _log_points(max_iter: int, n_log: int) -> set[int]:
    pts = np.unique(np.round(np.logspace(0, math.log10(max(max_iter, 1)), n_log)).astype(int))
    return set(int(t) for t in pts) | {max_iter}


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return math.nan
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def gd_train(
    X: np.ndarray,
    y: np.ndarray,
    loss: str = "exponential",
    step_rule: str = "normalized",
    lr: float | None = None,
    max_iter: int = 1_000_000,
    reference: Solution | None = None,
    n_log: int = 60,
    stop_tol: float | None = None,
    bias: bool = True,
) -> tuple[GdTrace, Solution]:
    """Gradient descent from w = 0 on the mean exponential or logistic loss.

    Both step rules start from the base step ``lr`` (default
    1 / max_i ||x_i||^2). ``'normalized'`` divides the gradient by the
    current loss, which keeps the iterate moving once the loss is tiny;
    ``'constant'`` takes plain fixed steps and is much slower in direction.
    With a ``reference`` the trace records the cosine to it and, if
    ``stop_tol`` is given, stops once 1 - cosine <= stop_tol.
    Directional convergence is declared at cosine >= 1 - 1e-3.
    """
    if loss not in LOSSES:
        raise ValueError(f"loss must be one of {LOSSES}")
    if step_rule not in STEP_RULES:
        raise ValueError(f"step_rule must be one of {STEP_RULES}")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, d = X.shape
    if lr is None:
        lr = 1.0 / float(np.max(np.sum(X**2, axis=1)))
    Xy = X * y[:, None]
    ref = None if reference is None else reference.w_ext
    log_at = _log_points(max_iter, n_log)
    trace = GdTrace(step_rule=step_rule, lr=lr)

    w = np.zeros(d)
    log_n = math.log(n)
    L0 = math.exp(_logsumexp(_log_terms(np.zeros(n), loss)[0]) - log_n)
    prev_dir = np.zeros(d)
    movement = math.inf
    for t in range(1, max_iter + 1):
        log_l, log_a = _log_terms(Xy @ w, loss)
        log_sum = _logsumexp(log_l)
        # gradient divided by the current loss, computed without underflow
        g_rel = -(Xy.T @ np.exp(log_a - log_sum))
        if float(np.linalg.norm(g_rel)) <= 1e-12:
            raise NotSeparable(f"stationary point with loss {math.exp(log_sum - log_n):.6g} > 0 after {t - 1} steps")
        if step_rule == "normalized":
            w = w - lr * g_rel
        else:
            w = w - lr * math.exp(log_sum - log_n) * g_rel
        if t in log_at:
            direction = w / np.linalg.norm(w)
            trace.iterations.append(t)
            trace.losses.append(math.exp(_logsumexp(_log_terms(Xy @ w, loss)[0]) - log_n))
            trace.directions.append(direction)
            trace.cosines.append(_cos(w, ref) if ref is not None else math.nan)
            if stop_tol is not None and ref is not None and trace.cosines[-1] >= 1.0 - stop_tol:
                break
        if t >= max_iter - 1:
            cur = w / np.linalg.norm(w)
            movement = float(np.linalg.norm(cur - prev_dir))
            prev_dir = cur

    L_final = trace.losses[-1]
    if L_final > 1e-3 * L0 and movement < 1e-9:
        raise NotSeparable(f"loss plateaued at {L_final:.6g} with direction movement {movement:.3g}")
    if ref is not None:
        trace.converged = trace.final_cosine >= 1.0 - 1e-3

    margins = y * (X @ w)
    m = float(margins.min())
    w_est = w / m if m > 0 else w.copy()
    sol = Solution(w_ext=w_est, alpha=np.zeros(n), bias=bias, margins=y * (X @ w_est))
    return trace, sol


# ---------------------------------------------------------------------------
# Margin statistics
# ---------------------------------------------------------------------------


def margin_stats(sol: Solution, X_ext: np.ndarray, y_noisy: np.ndarray, y_clean: np.ndarray | None = None) -> dict:
    """Minimum margin, interpolation flag and fraction of flipped labels fitted."""
    m = y_noisy * (X_ext @ sol.w_ext)
    out = {"min_margin": float(m.min()), "interpolated": bool(np.all(m > 0))}
    if y_clean is not None:
        flipped = y_noisy != y_clean
        out["n_flipped"] = int(flipped.sum())
        out["noisy_fit_fraction"] = float(np.mean(m[flipped] > 0)) if flipped.any() else math.nan
    return out
