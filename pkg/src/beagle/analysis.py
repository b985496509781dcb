"""Acceptance-length arithmetic: tail sums, the log-space surrogate, degradation fits and bound checks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class AcceptanceProfile:
    """Conditional acceptance rate of each draft position (position i given 1..i-1 accepted)."""
    alpha: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=np.float64).reshape(-1)
        if a.size == 0:
            raise ValueError("profile needs at least one position")
        if np.any(~np.isfinite(a)) or np.any(a < 0) or np.any(a > 1):
            raise ValueError(f"acceptance rates must lie in [0, 1], got {a}")
        object.__setattr__(self, "alpha", a)

    @property
    def k(self) -> int:
        return self.alpha.size


@dataclass(frozen=True)
class DegradationModel:
    alpha1: float
    r: float

    def __post_init__(self):
        if not 0.0 <= self.alpha1 <= 1.0:
            raise ValueError("alpha1 must lie in [0, 1]")
        if not 0.0 < self.r <= 1.0:
            raise ValueError("r must lie in (0, 1]")


def _as_profile(profile) -> AcceptanceProfile:
    return profile if isinstance(profile, AcceptanceProfile) else AcceptanceProfile(profile)


def expected_acceptance_length(profile) -> float:
    """E[L] = sum over i of the probability that the first i drafts are all accepted."""
    return float(np.sum(np.cumprod(_as_profile(profile).alpha)))


def taylor_surrogate_J(profile) -> float:
    """First-order expansion of E[L] around log alpha = 0: sum (k-i+1) log alpha_i + k."""
    a = _as_profile(profile).alpha
    if np.any(a <= 0):
        raise DomainError("log-space surrogate needs every acceptance rate > 0")
    k = a.size
    return float(np.sum((k - np.arange(k)) * np.log(a)) + k)


def taylor_remainder_bound(profile) -> float:
    """Upper bound on |E[L] - J|: exp(S) - 1 - S lies in [0, S^2/2] for every partial log-sum S <= 0."""
    a = _as_profile(profile).alpha
    if np.any(a <= 0):
        raise DomainError("log-space surrogate needs every acceptance rate > 0")
    return float(np.sum(np.cumsum(np.log(a)) ** 2) / 2)


def geometric_profile(model: DegradationModel, k: int) -> AcceptanceProfile:
    if k < 1:
        raise ValueError("k must be >= 1")
    return AcceptanceProfile(model.alpha1 * model.r ** np.arange(k))


def fit_geometric(profile) -> DegradationModel | None:
    """Least-squares line through log alpha_i against i-1; None when fewer than two positive rates."""
    a = _as_profile(profile).alpha
    idx = np.nonzero(a > 0)[0]
    if idx.size < 2:
        return None
    slope, intercept = np.polyfit(idx.astype(np.float64), np.log(a[idx]), 1)
    return DegradationModel(float(min(1.0, np.exp(intercept))), float(np.clip(np.exp(slope), 1e-12, 1.0)))


def _check_distribution(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or np.any(x < 0) or abs(x.sum() - 1.0) > 1e-6:
        raise ValueError(f"{name} must be a probability vector")
    return x


@dataclass(frozen=True)
class JensenResult:
    lhs: float
    rhs: float
    holds: bool


def jensen_gap_check(p, q, tol: float = 1e-12) -> JensenResult:
    """Compare -E_p[log q] against -log E_p[q]."""
    p = _check_distribution(p, "p")
    q = _check_distribution(q, "q")
    if p.shape != q.shape:
        raise ValueError("p and q must have the same length")
    support = p > 0
    if np.any(q[support] <= 0):
        raise DomainError("q is zero where p is positive")
    lhs = float(-np.sum(p[support] * np.log(q[support])))
    rhs = float(-np.log(np.sum(p * q)))
    return JensenResult(lhs, rhs, lhs >= rhs - tol)


def soft_ce(p, q) -> float:
    p, q = np.asarray(p, np.float64), np.asarray(q, np.float64)
    s = p > 0
    if np.any(q[s] <= 0):
        raise DomainError("q is zero where p is positive")
    return float(-np.sum(p[s] * np.log(q[s])))


@dataclass
class SurrogateReport:
    alpha: np.ndarray
    late_loss: float
    late_bound: float          # -J + k
    late_holds: bool
    early_loss: float
    early_bound: float         # -k log alpha_1
    early_holds: bool
    early_premise: bool        # every parallel-prediction rate <= alpha_1
    jensen_gaps: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def late_gap(self) -> float:
        return self.late_loss - self.late_bound

    @property
    def early_gap(self) -> float:
        return self.early_loss - self.early_bound


def surrogate_bound_check(late_pairs, early_pairs=None, tol: float = 1e-10) -> SurrogateReport:
    """Check both loss shapes against their log-acceptance lower bounds.

    ``late_pairs[i] = (p_i, q_i)`` holds the target distribution and the
    draft distribution of the i-th autoregressive step; alpha_i = E_p[q].
    ``early_pairs[j]`` holds the j-ahead parallel predictions from the window
    start (defaults to ``late_pairs``).  The early bound relies on the parallel
    rates never exceeding alpha_1; ``early_premise`` reports whether it does.
    """
    late_pairs = [(_check_distribution(p, "p"), _check_distribution(q, "q")) for p, q in late_pairs]
    early_pairs = late_pairs if early_pairs is None else \
        [(_check_distribution(p, "p"), _check_distribution(q, "q")) for p, q in early_pairs]
    k = len(late_pairs)
    if k == 0 or len(early_pairs) != k:
        raise ValueError("need k >= 1 pairs in both families")
    alpha = np.array([float(p @ q) for p, q in late_pairs])
    if np.any(alpha <= 0):
        raise DomainError("acceptance rate E_p[q] must be > 0")
    weights = k - np.arange(k)
    ces = np.array([soft_ce(p, q) for p, q in late_pairs])
    late_loss = float(np.sum(weights * ces))
    late_bound = float(-np.sum(weights * np.log(alpha)))
    early_alpha = np.array([float(p @ q) for p, q in early_pairs])
    early_loss = float(sum(soft_ce(p, q) for p, q in early_pairs))
    a1 = float(early_pairs[0][0] @ early_pairs[0][1])
    early_bound = -k * float(np.log(a1))
    return SurrogateReport(
        alpha, late_loss, late_bound, late_loss >= late_bound - tol,
        early_loss, early_bound, early_loss >= early_bound - tol,
        bool(np.all(early_alpha <= a1 + tol)),
        ces + np.log(alpha),
    )


def mc_acceptance_oracle(source, trials: int, seed: int = 0) -> tuple[float, float]:
    """Monte Carlo E[L] with its standard error.

    ``source`` is either a profile (independent Bernoulli acceptance per
    position) or a list of (p, q) pairs, in which case a token is drawn from q
    and accepted with probability min(1, p/q).
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    if isinstance(source, AcceptanceProfile) or np.ndim(source) == 1:
        alpha = _as_profile(source).alpha
        accept = rng.random((trials, alpha.size)) < alpha
    else:
        cols = []
        for p, q in source:
            p, q = np.asarray(p, np.float64), np.asarray(q, np.float64)
            t = np.minimum(np.searchsorted(np.cumsum(q), rng.random(trials) * q.sum(), side="right"), len(q) - 1)
            ratio = np.minimum(1.0, p[t] / q[t])
            cols.append(rng.random(trials) < ratio)
        accept = np.stack(cols, axis=1)
    lengths = np.cumprod(accept, axis=1).sum(axis=1)
    stderr = float(lengths.std(ddof=1) / np.sqrt(trials)) if trials > 1 else 0.0
    return float(lengths.mean()), stderr


@dataclass
class AnalysisReport:
    alpha: np.ndarray
    expected_length: float
    J: float
    remainder_bound: float
    within_remainder_bound: bool
    geometric: DegradationModel | None
    mean_tau: float | None = None

    def rows(self) -> list[tuple[str, str]]:
        out = [(f"alpha_{i + 1}", f"{a:.6f}") for i, a in enumerate(self.alpha)]
        out += [("expected_length", f"{self.expected_length:.6f}"),
                ("J", f"{self.J:.6f}"),
                ("taylor_gap", f"{abs(self.expected_length - self.J):.6f}"),
                ("remainder_bound", f"{self.remainder_bound:.6f}"),
                ("within_remainder_bound", str(self.within_remainder_bound))]
        if self.geometric is not None:
            out += [("geometric_alpha1", f"{self.geometric.alpha1:.6f}"),
                    ("geometric_r", f"{self.geometric.r:.6f}")]
        if self.mean_tau is not None:
            out += [("mean_tau", f"{self.mean_tau:.6f}"),
                    ("mean_tau_minus_bonus", f"{self.mean_tau - 1:.6f}")]
        return out

    def summary(self) -> str:
        width = max(len(k) for k, _ in self.rows())
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in self.rows())


def analyze_profile(profile, mean_tau: float | None = None) -> AnalysisReport:
    prof = _as_profile(profile)
    e_len = expected_acceptance_length(prof)
    if np.all(prof.alpha > 0):
        J = taylor_surrogate_J(prof)
        bound = taylor_remainder_bound(prof)
        within = abs(e_len - J) <= bound + 1e-12
    else:
        J, bound, within = float("-inf"), float("inf"), False
    return AnalysisReport(prof.alpha, e_len, J, bound, within, fit_geometric(prof), mean_tau)
