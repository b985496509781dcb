"""Chain speculative decoding with the cross-attention draft head.

Session invariant between iterations: the committed sequence has length m,
the target cache holds positions 1..m-1, and the draft cache holds the
projections of the true states h*_1..h*_{m-1}.  The last committed token is
"pending": its state is produced by the next verify pass.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .analysis import AcceptanceProfile
from .data import EOS
from .models import DraftHead, KVCache, TargetCache, TargetModel
from .tensor import softmax_np

GREEDY = "greedy"
SAMPLING = "sampling"

EVAL_COLUMNS = ("prompt", "iter", "tau", "T_d_us", "T_v_us", "accepted_mask")


class EvalFormatError(ValueError):
    pass


def _sample(probs: np.ndarray, rng: np.random.Generator) -> int:
    c = np.cumsum(probs)
    return int(min(np.searchsorted(c, rng.random() * c[-1], side="right"), len(probs) - 1))


@dataclass
class SDMetrics:
    taus: list[int] = field(default_factory=list)
    accepted: list[list[bool]] = field(default_factory=list)  # reached positions per iteration
    t_draft: list[float] = field(default_factory=list)        # seconds
    t_verify: list[float] = field(default_factory=list)
    gamma: int = 0

    @property
    def iterations(self) -> int:
        return len(self.taus)

    @property
    def emitted(self) -> int:
        return int(sum(self.taus))

    @property
    def mean_tau(self) -> float:
        if not self.taus:
            raise ValueError("no iterations recorded")
        return float(np.mean(self.taus))

    def merge(self, other: SDMetrics) -> SDMetrics:
        return SDMetrics(self.taus + other.taus, self.accepted + other.accepted,
                         self.t_draft + other.t_draft, self.t_verify + other.t_verify,
                         max(self.gamma, other.gamma))


class SDSession:
    """One generation: target cache, draft cache, committed tokens and RNG."""

    def __init__(self, target: TargetModel, head: DraftHead, prompt, gamma: int = 5,
                 mode: str = GREEDY, seed: int | np.random.Generator = 0, concat_draft_states: bool = True):
        if mode not in (GREEDY, SAMPLING):
            raise ValueError(f"unknown mode {mode!r}")
        if gamma < 1:
            raise ValueError("gamma must be >= 1")
        prompt = [int(t) for t in prompt]
        if not prompt:
            raise ValueError("prompt must contain at least one token")
        self.target, self.head = target, head
        self.gamma, self.mode = gamma, mode
        self.concat = concat_draft_states
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        t_max = target.config.t_max
        if len(prompt) > t_max:
            raise ValueError(f"prompt longer than the target context ({t_max})")
        self.tokens = list(prompt)
        self.prompt_len = len(prompt)
        self.tcache: TargetCache = target.new_cache(t_max)
        self.dcache: KVCache = head.new_cache(t_max + gamma)
        states, _ = target.forward_cached(self.tcache, prompt[:-1])
        self.dcache.append(states, is_true=True)
        self.metrics = SDMetrics(gamma=gamma)

    @property
    def pending_pos(self) -> int:
        return len(self.tokens)

    def copy(self, seed=None) -> SDSession:
        other = SDSession.__new__(SDSession)
        other.__dict__.update(self.__dict__)
        other.tokens = list(self.tokens)
        other.tcache = self.tcache.copy()
        other.dcache = self.dcache.copy()
        other.metrics = SDMetrics(gamma=self.gamma)
        other.rng = self.rng if seed is None else (
            seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed))
        return other


def draft_chain(session: SDSession, gamma: int) -> tuple[list[int], np.ndarray]:
    """Propose ``gamma`` tokens after the pending one; returns tokens and their draft distributions."""
    head, cache = session.head, session.dcache
    token, pos = session.tokens[-1], session.pending_pos
    proposals, dists = [], []
    for i in range(gamma):
        h, q = head.step(cache, token, pos, allow_stale=not session.concat)
        token = int(np.argmax(q)) if session.mode == GREEDY else _sample(q, session.rng)
        proposals.append(token)
        dists.append(q)
        if session.concat and i < gamma - 1:  # the last state is never attended to
            cache.append(h, is_true=False)
        pos += 1
    return proposals, np.array(dists).reshape(gamma, -1)


@dataclass
class VerifyResult:
    n_accepted: int
    next_token: int
    states: np.ndarray   # true states for the pending token and every accepted draft

    @property
    def tau(self) -> int:
        return self.n_accepted + 1


def accept_tokens(proposals, p: np.ndarray, q: np.ndarray | None, mode: str,
                  rng: np.random.Generator) -> tuple[int, int]:
    """Acceptance over one chain: ``p[i]`` is the target distribution for the token at ``proposals[i]``.

    ``p`` has one extra row for the bonus token.  Returns (accepted count, emitted correction/bonus).
    """
    gamma = len(proposals)
    for i, t in enumerate(proposals):
        if mode == GREEDY:
            if int(np.argmax(p[i])) != t:
                return i, int(np.argmax(p[i]))
            continue
        qt = q[i, t]
        if qt <= 0:
            raise RuntimeError(f"draft proposed token {t} with zero draft probability")
        if rng.random() >= min(1.0, p[i, t] / qt):
            residual = np.maximum(p[i] - q[i], 0.0)
            if residual.sum() <= 0:
                residual = p[i]
            return i, _sample(residual / residual.sum(), rng)
    bonus = int(np.argmax(p[gamma])) if mode == GREEDY else _sample(p[gamma], rng)
    return gamma, bonus


def verify(session: SDSession, proposals: list[int], q: np.ndarray) -> VerifyResult:
    """One target pass over the pending token plus all proposals, then acceptance."""
    if len(proposals) == 0:
        raise ValueError("verify needs at least one proposal")
    states, logits = session.target.forward_cached(session.tcache, [session.tokens[-1]] + list(proposals))
    p = softmax_np(logits.astype(np.float64))
    a, nxt = accept_tokens(proposals, p, q, session.mode, session.rng)
    return VerifyResult(a, nxt, states[:a + 1])


def sd_iteration(session: SDSession) -> VerifyResult | None:
    """One draft/verify/commit round; None when the context is full."""
    m = session.pending_pos
    gamma = min(session.gamma, session.target.config.t_max - m)
    if gamma < 0:
        return None
    t0 = time.perf_counter()
    if gamma == 0:
        proposals, q = [], None
    else:
        proposals, q = draft_chain(session, gamma)
    t1 = time.perf_counter()
    if gamma == 0:
        states, logits = session.target.forward_cached(session.tcache, [session.tokens[-1]])
        p = softmax_np(logits.astype(np.float64))
        nxt = int(np.argmax(p[0])) if session.mode == GREEDY else _sample(p[0], session.rng)
        res = VerifyResult(0, nxt, states)
    else:
        res = verify(session, proposals, q)
    t2 = time.perf_counter()
    session.tcache.truncate(m + res.n_accepted)
    session.dcache.reset_to_true(res.states)
    session.tokens.extend(proposals[:res.n_accepted] + [res.next_token])
    t3 = time.perf_counter()
    met = session.metrics
    met.taus.append(res.tau)
    met.accepted.append([True] * res.n_accepted + ([False] if res.n_accepted < gamma else []))
    met.t_draft.append((t1 - t0) + (t3 - t2))
    met.t_verify.append(t2 - t1)
    return res


@dataclass
class GenerationResult:
    tokens: list[int]          # generated tokens, truncated at max_tokens / after EOS
    metrics: SDMetrics
    raw_tokens: list[int]      # everything emitted by the iterations, before truncation
    seconds: float


def _truncate(raw: list[int], max_tokens: int, eos: int | None) -> list[int]:
    out = raw[:max_tokens]
    if eos is not None and eos in out:
        out = out[:out.index(eos) + 1]
    return out


def sd_generate(session: SDSession, max_tokens: int, eos: int | None = EOS) -> GenerationResult:
    """Iterate until ``max_tokens`` are emitted, EOS is accepted, or the context is full."""
    start = time.perf_counter()
    while len(session.tokens) - session.prompt_len < max_tokens:
        res = sd_iteration(session)
        if res is None:
            break
        if eos is not None and eos in session.tokens[session.prompt_len:]:
            break
    raw = session.tokens[session.prompt_len:]
    return GenerationResult(_truncate(raw, max_tokens, eos), session.metrics, raw,
                            time.perf_counter() - start)


def target_generate(target: TargetModel, prompt, max_tokens: int, mode: str = GREEDY,
                    seed: int | np.random.Generator = 0, eos: int | None = EOS) -> GenerationResult:
    """Target-only decoding, one cached forward per token."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    prompt = [int(t) for t in prompt]
    cache = target.new_cache(target.config.t_max)
    start = time.perf_counter()
    target.forward_cached(cache, prompt[:-1])
    tokens = list(prompt)
    out = []
    while len(out) < max_tokens and len(tokens) <= target.config.t_max:
        _, logits = target.forward_cached(cache, [tokens[-1]])
        p = softmax_np(logits[0].astype(np.float64))
        t = int(np.argmax(p)) if mode == GREEDY else _sample(p, rng)
        tokens.append(t)
        out.append(t)
        if eos is not None and t == eos:
            break
    return GenerationResult(out, SDMetrics(), list(out), time.perf_counter() - start)


def measure_alpha_profile(accepted, gamma: int | None = None) -> AcceptanceProfile:
    """Conditional acceptance per position from per-iteration indicators.

    Position i counts only iterations that reached it, i.e. accepted 1..i-1.
    Positions never reached get rate 0.
    """
    if isinstance(accepted, SDMetrics):
        gamma = gamma or accepted.gamma
        accepted = accepted.accepted
    if not accepted:
        raise ValueError("no iterations logged")
    gamma = gamma or max(len(a) for a in accepted)
    reached = np.zeros(gamma)
    hits = np.zeros(gamma)
    for row in accepted:
        for i, ok in enumerate(row[:gamma]):
            reached[i] += 1
            hits[i] += bool(ok)
            if not ok:
                break
    return AcceptanceProfile(np.divide(hits, reached, out=np.zeros(gamma), where=reached > 0))


def improvement_factor(metrics: SDMetrics) -> float:
    """Mean tau over (mean T_d / mean T_v + 1)."""
    if not metrics.taus:
        raise ValueError("no iterations recorded")
    tv = float(np.mean(metrics.t_verify))
    if tv == 0:
        raise ZeroDivisionError("verification time is zero")
    return metrics.mean_tau / (float(np.mean(metrics.t_draft)) / tv + 1.0)


# -- eval CSV ----------------------------------------------------------------------

def eval_rows(prompt_index: int, metrics: SDMetrics) -> list[dict]:
    return [{"prompt": prompt_index, "iter": it, "tau": tau,
             "T_d_us": int(round(td * 1e6)), "T_v_us": int(round(tv * 1e6)),
             "accepted_mask": "".join("1" if a else "0" for a in acc)}
            for it, (tau, td, tv, acc) in enumerate(zip(metrics.taus, metrics.t_draft,
                                                        metrics.t_verify, metrics.accepted), start=1)]


def write_eval_csv(fh, rows: list[dict], header_lines: list[str] = ()) -> None:
    for line in header_lines:
        fh.write(f"# {line}\n")
    w = csv.DictWriter(fh, fieldnames=EVAL_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: r[k] for k in EVAL_COLUMNS})


def read_eval_csv(fh) -> SDMetrics:
    """Parse an eval CSV back into metrics; '#' lines are comments."""
    lines = [(n, line) for n, line in enumerate(fh, start=1) if line.strip() and not line.startswith("#")]
    if not lines:
        raise EvalFormatError("eval CSV is empty")
    header_no, header = lines[0]
    cols = next(csv.reader([header]))
    cols = [c.strip() for c in cols]
    for need in ("tau", "T_d_us", "T_v_us", "accepted_mask"):
        if need not in cols:
            raise EvalFormatError(f"line {header_no}: missing column '{need}'")
    met = SDMetrics()
    for n, line in lines[1:]:
        vals = next(csv.reader([line]))
        if len(vals) != len(cols):
            raise EvalFormatError(f"line {n}: expected {len(cols)} fields, got {len(vals)}")
        rec = dict(zip(cols, (v.strip() for v in vals)))
        try:
            tau = int(rec["tau"])
            td, tv = float(rec["T_d_us"]) * 1e-6, float(rec["T_v_us"]) * 1e-6
        except ValueError as exc:
            raise EvalFormatError(f"line {n}: {exc}") from None
        mask = rec["accepted_mask"]
        if any(c not in "01" for c in mask):
            raise EvalFormatError(f"line {n}: accepted_mask must contain only 0/1")
        if tau < 1:
            raise EvalFormatError(f"line {n}: tau must be >= 1")
        met.taus.append(tau)
        met.t_draft.append(td)
        met.t_verify.append(tv)
        met.accepted.append([c == "1" for c in mask])
        met.gamma = max(met.gamma, len(mask))
    if not met.taus:
        raise EvalFormatError("eval CSV has no data rows")
    return met
