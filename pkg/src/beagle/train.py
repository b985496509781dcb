"""Two-stage block-attention training of the draft head, plus target pretraining.

Loss math lives in :func:`general_loss`: a window plan splits the sequence,
every query in a window sees true states only up to the window start, and
simulation steps overwrite the key buffer in place with the states the head
itself predicted.  The early and late losses are particular settings of it.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint as ckpt_io
from .data import Chunk, SequenceBatch, iter_batches, make_batch
from .masks import WindowPlan, inverse_block_mask, simulation_mask_step, window_plan
from .models import DraftHead, TargetModel
from .tensor import (
    Tensor,
    concat,
    cross_entropy,
    no_grad,
    smooth_l1,
    soft_cross_entropy,
    write_rows,
)

LOG_COLUMNS = ("epoch", "step", "stage", "ce", "vloss", "total", "grad_norm")


@dataclass
class TrainConfig:
    k: int = 5
    s: int = 4
    epochs_early: int = 10
    epochs_late: int = 10
    lr: float = 3e-5
    warmup_steps: int | None = None  # None: min(2000, 10% of total steps)
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.0
    grad_clip: float = 0.5
    vloss_coef: float = 10.0
    noise_std: float = 0.2
    batch_size: int = 16
    seed: int = 0
    max_steps_per_epoch: int | None = None
    predicted_queries: bool = False

    def __post_init__(self):
        if not 1 <= self.s <= self.k:
            raise ValueError(f"need 1 <= s <= k, got s={self.s}, k={self.k}")
        for name in ("lr", "weight_decay", "grad_clip", "vloss_coef", "noise_std"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class LossReport:
    total: Tensor
    ce: float
    vloss: float
    components: dict = field(default_factory=dict)  # (step i, lookahead j) -> mean CE
    n_terms: int = 0
    top1: dict = field(default_factory=dict)  # step i -> bool [B, windows] (None where absent)

    def __float__(self):
        return float(self.total.data)


class AuxAllocationCounter:
    """Test hook: counts auxiliary buffer allocations and records their addresses per step."""

    def __init__(self):
        self.count = 0
        self.addresses: list[tuple[int, int, int]] = []

    def allocate(self, arr: np.ndarray) -> np.ndarray:
        self.count += 1
        return arr

    def observe(self, step: int, mask: np.ndarray, keys: np.ndarray) -> None:
        self.addresses.append((step, mask.__array_interface__["data"][0], keys.__array_interface__["data"][0]))


def beta_star(k: int) -> np.ndarray:
    """Late-stage weights on the diagonal: step i gets k - i + 1."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return np.arange(k, 0, -1, dtype=np.float64)


def inject_state_noise(states: np.ndarray, std: float, rng: np.random.Generator) -> np.ndarray:
    if std < 0:
        raise ValueError("noise std must be >= 0")
    if std == 0:
        return states
    return states + rng.normal(0.0, std, size=states.shape).astype(states.dtype)


@dataclass
class TrainBatch:
    """Everything a loss needs for one batch; positions beyond ``lengths`` are padding."""
    tokens: np.ndarray    # [B, W]
    lengths: np.ndarray   # [B]
    states: np.ndarray    # [B, W, d] clean target states
    probs: np.ndarray     # [B, W, V] target next-token distributions
    keys: np.ndarray      # [B, W, d] states fed as keys (noised in training)

    @property
    def width(self) -> int:
        return self.tokens.shape[1]


def prepare_batch(batch: SequenceBatch, states: list[np.ndarray], target: TargetModel,
                  noise_std: float = 0.0, rng: np.random.Generator | None = None,
                  dtype=np.float32) -> TrainBatch:
    B, W = batch.token_ids.shape
    d = target.config.d_model
    h = np.zeros((B, W, d), dtype=dtype)
    for r, s in enumerate(states):
        h[r, :len(s)] = s
    probs = target.probs(h).astype(dtype)
    keys = inject_state_noise(h, noise_std, rng) if noise_std > 0 else h
    return TrainBatch(batch.token_ids, batch.lengths, h, probs, keys)


def _step_queries(plan: WindowPlan, step: int, lookahead: int | None):
    """Query positions evaluated at a simulation step, with their lookahead j and window index."""
    pos, js, wins = [], [], []
    for w_idx, w in enumerate(plan.windows):
        if step > w.size:
            continue
        last = step if lookahead is None else min(lookahead, w.size)
        for j in range(step, last + 1):
            pos.append(w.start + j)
            js.append(j)
            wins.append(w_idx)
    return np.array(pos, dtype=np.int64), np.array(js, dtype=np.int64), np.array(wins, dtype=np.int64)


def general_loss(head: DraftHead, batch: TrainBatch, plan: WindowPlan, s: int,
                 lookahead: int | None, beta, vloss_coef: float = 10.0,
                 aux: AuxAllocationCounter | None = None,
                 predicted_queries: bool = False) -> LossReport:
    """Weighted multi-step loss over windows.

    At simulation step i (1..s) each window starting at n evaluates queries
    n+j for j in i..l (``lookahead=None`` means l = i), weighting the CE against
    the target distribution by ``beta[i-1, j-1]``.  Queries at step i see true
    states up to n plus the states predicted at n+1..n+i-1 in earlier steps.
    Sum of weighted CE is divided by the number of contributing terms.
    """
    k = plan.k
    if not 1 <= s <= k:
        raise ValueError(f"need 1 <= s <= k, got s={s}, k={k}")
    if lookahead is not None and not s <= lookahead <= k:
        raise ValueError(f"need s <= l <= k, got s={s}, l={lookahead}, k={k}")
    if batch.width != plan.length:
        raise ValueError(f"plan covers {plan.length} positions but batch width is {batch.width}")
    beta = np.broadcast_to(np.asarray(beta, dtype=np.float64), (k, k))
    if lookahead is None:
        used = beta[np.arange(s), np.arange(s)]
    else:
        used = np.concatenate([beta[i, i:lookahead] for i in range(s)])
    if np.any(used <= 0):
        raise ValueError("loss weights beta must be > 0")

    B, W = batch.tokens.shape
    aux = aux or AuxAllocationCounter()
    mask = aux.allocate(inverse_block_mask(plan))
    key_buf = aux.allocate(np.array(batch.keys, dtype=head.dtype, copy=True))
    keys = Tensor(key_buf)
    k_pos = np.arange(1, W + 1)
    tokens = batch.tokens
    if predicted_queries:
        tokens = tokens.copy()

    ce_parts, preds, trues = [], [], []
    components, top1 = {}, {}
    n_terms = 0
    for i in range(1, s + 1):
        if i > 1:
            simulation_mask_step(mask, plan, i)
        aux.observe(i, mask, key_buf)
        pos, js, wins = _step_queries(plan, i, lookahead)
        if len(pos) == 0:
            break
        kt, vt = head.project_kv(keys, k_pos)
        hs = head.attend(tokens[:, pos - 1], pos, kt, vt, mask[pos - 1])
        bi, qi = np.nonzero(pos[None, :] <= batch.lengths[:, None])
        h_sel = hs[bi, qi]
        logits = head.logits(h_sel)
        p_sel = batch.probs[bi, pos[qi] - 1]
        ce = soft_cross_entropy(p_sel, logits)
        w = beta[i - 1, js[qi] - 1].astype(head.dtype)
        ce_parts.append((ce * w).sum())
        preds.append(h_sel)
        trues.append(batch.states[bi, pos[qi] - 1])
        n_terms += len(bi)
        for j in np.unique(js[qi]):
            components[(i, int(j))] = float(ce.data[js[qi] == j].mean())

        diag = js == i
        hit = np.full((B, len(plan.windows)), None, dtype=object)
        match = logits.data.argmax(-1) == p_sel.argmax(-1)
        for r, c, m in zip(bi[diag[qi]], qi[diag[qi]], match[diag[qi]]):
            hit[r, wins[c]] = bool(m)
        top1[i] = hit

        if i < s:
            dq = np.nonzero(diag)[0]
            slots = pos[dq] - 1
            keys = write_rows(keys, (slice(None), slots), hs[:, dq])
            if predicted_queries:
                nxt = logits.data.argmax(-1)
                for r, c, t in zip(bi, qi, nxt):
                    if diag[c] and pos[c] < W:
                        tokens[r, pos[c]] = t

    ce_total = ce_parts[0]
    for part in ce_parts[1:]:
        ce_total = ce_total + part
    ce_total = ce_total * (1.0 / max(n_terms, 1))
    vloss = smooth_l1(concat(preds, axis=0), Tensor(np.concatenate(trues, axis=0)))
    total = ce_total + vloss * vloss_coef
    return LossReport(total, float(ce_total.data), float(vloss.data), components, n_terms, top1)


def early_stage_loss(head: DraftHead, batch: TrainBatch, plan: WindowPlan,
                     vloss_coef: float = 10.0, aux: AuxAllocationCounter | None = None) -> LossReport:
    """One masked forward with inverse block attention; every query contributes with weight 1."""
    return general_loss(head, batch, plan, 1, plan.k, 1.0, vloss_coef, aux)


def late_stage_loss(head: DraftHead, batch: TrainBatch, plan: WindowPlan, s: int,
                    vloss_coef: float = 10.0, aux: AuxAllocationCounter | None = None,
                    predicted_queries: bool = False) -> LossReport:
    """Simulated drafting for s steps; step i is weighted k - i + 1."""
    if s > plan.k:
        raise ValueError(f"simulation steps s={s} exceed window size k={plan.k}")
    return general_loss(head, batch, plan, s, None, np.diag(beta_star(plan.k)) + _offdiag_ones(plan.k),
                        vloss_coef, aux, predicted_queries)


def _offdiag_ones(k: int) -> np.ndarray:
    # off-diagonal entries are never read with lookahead=None; keep them positive for validation
    return np.ones((k, k)) - np.eye(k)


def conditional_top1_rates(reports: list[LossReport], k: int) -> np.ndarray:
    """Greedy acceptance rates per draft step from simulated (late-loss) reports.

    Step i counts windows whose steps 1..i-1 all matched the target's argmax.
    """
    reached = np.zeros(k)
    accepted = np.zeros(k)
    for rep in reports:
        alive = None
        for i in range(1, k + 1):
            hit = rep.top1.get(i)
            if hit is None:
                break
            present = hit != None  # noqa: E711 (object array)
            ok = np.where(present, hit, False).astype(bool)
            cur = present if alive is None else present & alive
            reached[i - 1] += cur.sum()
            accepted[i - 1] += (cur & ok).sum()
            alive = cur & ok
    return np.divide(accepted, reached, out=np.zeros(k), where=reached > 0)


# -- optimisation ---------------------------------------------------------------

def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for g in grads:
            g *= factor
    return total


class AdamW:
    """AdamW with decoupled weight decay, preceded by global-norm clipping."""

    def __init__(self, params: dict[str, Tensor], lr: float = 3e-5, betas=(0.9, 0.95),
                 eps: float = 1e-8, weight_decay: float = 0.0, grad_clip: float | None = 0.5):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> float:
        lr = self.lr if lr is None else lr
        names = list(self.params)
        grads = []
        for name in names:
            g = self.params[name].grad
            g = np.zeros_like(self.params[name].data) if g is None else np.array(g, copy=True)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter '{name}' "
                                         f"at optimizer step {self.step_count + 1}")
            grads.append(g)
        norm = clip_grad_norm(grads, self.grad_clip) if self.grad_clip else \
            math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, g in zip(names, grads):
            p = self.params[name].data
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p *= p.dtype.type(1.0 - lr * self.weight_decay)
            p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(p.dtype)
        return norm

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"opt.m.{k}": v for k, v in self.m.items()}
        out.update({f"opt.v.{k}": v for k, v in self.v.items()})
        out["opt.step"] = np.array([self.step_count], dtype=np.float32)
        return out

    def load_state_tensors(self, tensors: dict) -> None:
        for k in self.m:
            self.m[k] = np.array(tensors[f"opt.m.{k}"], dtype=self.params[k].data.dtype)
            self.v[k] = np.array(tensors[f"opt.v.{k}"], dtype=self.params[k].data.dtype)
        self.step_count = int(tensors["opt.step"][0])


def warmup_lr(base_lr: float, step: int, warmup: int) -> float:
    """Linear warmup over ``warmup`` steps, then constant."""
    if warmup <= 0:
        return base_lr
    return base_lr * min(1.0, (step + 1) / warmup)


def default_warmup(total_steps: int) -> int:
    return min(2000, max(1, total_steps // 10))


# -- draft training loop --------------------------------------------------------

@dataclass
class TrainResult:
    head: DraftHead
    log_rows: list[dict]
    val_rows: list[dict]
    optimizer: AdamW
    epoch: int


def _epoch_rng(seed: int, epoch: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, stream])


def _steps_per_epoch(n_chunks: int, cfg: TrainConfig) -> int:
    n = math.ceil(n_chunks / cfg.batch_size)
    return min(n, cfg.max_steps_per_epoch) if cfg.max_steps_per_epoch else n


def validation_rates(head: DraftHead, target: TargetModel, chunks: list[Chunk],
                     states: list[np.ndarray], k: int, batch_size: int = 16) -> np.ndarray:
    """Teacher-forced greedy acceptance rates per draft step on held-out chunks."""
    reports = []
    with no_grad():
        for s in range(0, len(chunks), batch_size):
            part = chunks[s:s + batch_size]
            tb = prepare_batch(make_batch(part), states[s:s + batch_size], target, dtype=head.dtype)
            plan = window_plan(tb.width, k, 0)
            reports.append(late_stage_loss(head, tb, plan, k))
    return conditional_top1_rates(reports, k)


def run_training(cfg: TrainConfig, head: DraftHead, target: TargetModel, chunks: list[Chunk],
                 states: list[np.ndarray], stages=("early", "late"), val_chunks=None, val_states=None,
                 resume: ckpt_io.Checkpoint | None = None, log_path=None,
                 checkpoint_path=None, meta: dict | None = None, stop_after_epoch: int | None = None,
                 progress=None) -> TrainResult:
    """Early-stage epochs followed by late-stage epochs.

    Every epoch draws its shuffle order, window offsets and key noise from
    generators seeded by ``(seed, epoch)``, so resuming from an end-of-epoch
    checkpoint replays exactly what an uninterrupted run would do.
    """
    plan_epochs = []
    if "early" in stages:
        plan_epochs += ["early"] * cfg.epochs_early
    if "late" in stages:
        plan_epochs += ["late"] * cfg.epochs_late
    steps_per_epoch = _steps_per_epoch(len(chunks), cfg)
    warmup = cfg.warmup_steps if cfg.warmup_steps is not None else default_warmup(steps_per_epoch * len(plan_epochs))
    opt = AdamW(head.params, cfg.lr, (cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay,
                grad_clip=cfg.grad_clip)
    start_epoch = 1
    if resume is not None:
        head.load_params(resume.tensors)
        opt = AdamW(head.params, cfg.lr, (cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay,
                    grad_clip=cfg.grad_clip)
        opt.load_state_tensors(resume.tensors)
        start_epoch = int(resume.meta["epoch"]) + 1

    log_rows, val_rows = [], []
    epoch = start_epoch - 1
    for epoch in range(start_epoch, len(plan_epochs) + 1):
        stage = plan_epochs[epoch - 1]
        rng_eps = _epoch_rng(cfg.seed, epoch, 1)
        rng_noise = _epoch_rng(cfg.seed, epoch, 2)
        batches = iter_batches(chunks, cfg.batch_size, seed=int(_epoch_rng(cfg.seed, epoch, 0).integers(2**31)))
        for step, batch in enumerate(batches, start=1):
            if step > steps_per_epoch:
                break
            tb = prepare_batch(batch, [states[i] for i in batch.chunk_ids], target,
                               cfg.noise_std, rng_noise, dtype=head.dtype)
            plan = window_plan(tb.width, cfg.k, int(rng_eps.integers(cfg.k)))
            if stage == "early":
                rep = early_stage_loss(head, tb, plan, cfg.vloss_coef)
            else:
                rep = late_stage_loss(head, tb, plan, cfg.s, cfg.vloss_coef,
                                      predicted_queries=cfg.predicted_queries)
            opt.zero_grad()
            rep.total.backward()
            norm = opt.step(warmup_lr(cfg.lr, opt.step_count, warmup))
            row = {"epoch": epoch, "step": opt.step_count, "stage": stage, "ce": rep.ce,
                   "vloss": rep.vloss, "total": float(rep.total.data), "grad_norm": norm}
            if not all(math.isfinite(row[c]) for c in ("ce", "vloss", "total", "grad_norm")):
                raise FloatingPointError(f"training diverged at epoch {epoch}, step {opt.step_count}")
            log_rows.append(row)
            if progress:
                progress(row)
        if val_chunks:
            rates = validation_rates(head, target, val_chunks, val_states, cfg.k)
            val_rows.append({"epoch": epoch, "stage": stage,
                             **{f"alpha_{i + 1}": float(a) for i, a in enumerate(rates)}})
        if log_path:
            append_log(log_path, [r for r in log_rows if r["epoch"] == epoch])
        if checkpoint_path:
            save_draft_checkpoint(checkpoint_path, head, opt, epoch, stage, cfg, meta)
        if stop_after_epoch is not None and epoch >= stop_after_epoch:
            break
    return TrainResult(head, log_rows, val_rows, opt, epoch)


def save_draft_checkpoint(path, head: DraftHead, opt: AdamW | None, epoch: int, stage: str,
                          cfg: TrainConfig, meta: dict | None = None) -> bytes:
    info = {"epoch": epoch, "stage": stage, "train_config": asdict(cfg)}
    info.update(meta or {})
    extra = opt.state_tensors() if opt is not None else {}
    return ckpt_io.save(path, head.to_checkpoint(info, extra))


def format_log(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for r in rows:
        w.writerow([r["epoch"], r["step"], r["stage"], repr(r["ce"]), repr(r["vloss"]),
                    repr(r["total"]), repr(r["grad_norm"])])
    return buf.getvalue()


def append_log(path, rows: list[dict], header: str | None = None) -> None:
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a") as fh:
        if new:
            if header:
                fh.write(header)
            fh.write(",".join(LOG_COLUMNS) + "\n")
        fh.write(format_log(rows))


# -- target pretraining -----------------------------------------------------------

@dataclass
class TargetTrainConfig:
    epochs: int = 2
    lr: float = 2e-3
    batch_size: int = 16
    warmup_steps: int = 100
    grad_clip: float = 1.0
    weight_decay: float = 0.0
    seed: int = 0
    max_steps_per_epoch: int | None = None
    patience: int = 1  # epochs without validation improvement before stopping


def lm_loss(target: TargetModel, batch: SequenceBatch) -> Tensor:
    """Mean next-token cross-entropy over non-padding positions."""
    _, logits = target.forward(batch.token_ids)
    nxt = np.arange(1, batch.width)[None, :] < batch.lengths[:, None]
    bi, ti = np.nonzero(nxt)
    ce = cross_entropy(logits[bi, ti - 1], batch.token_ids[bi, ti])
    return ce.sum() * (1.0 / max(len(bi), 1))


def validation_ce(target: TargetModel, chunks: list[Chunk], batch_size: int = 32) -> float:
    total, count = 0.0, 0
    with no_grad():
        for s in range(0, len(chunks), batch_size):
            b = make_batch(chunks[s:s + batch_size])
            n = int(np.sum(b.lengths - 1))
            total += float(lm_loss(target, b).data) * n
            count += n
    return total / max(count, 1)


def train_target(target: TargetModel, cfg: TargetTrainConfig, chunks: list[Chunk],
                 val_chunks: list[Chunk] | None = None, progress=None) -> list[dict]:
    opt = AdamW(target.params, cfg.lr, (0.9, 0.95), weight_decay=cfg.weight_decay, grad_clip=cfg.grad_clip)
    history, best, stale = [], math.inf, 0
    for epoch in range(1, cfg.epochs + 1):
        seed = int(_epoch_rng(cfg.seed, epoch, 0).integers(2**31))
        for step, batch in enumerate(iter_batches(chunks, cfg.batch_size, seed), start=1):
            if cfg.max_steps_per_epoch and step > cfg.max_steps_per_epoch:
                break
            loss = lm_loss(target, batch)
            opt.zero_grad()
            loss.backward()
            opt.step(warmup_lr(cfg.lr, opt.step_count, cfg.warmup_steps))
            if progress:
                progress({"epoch": epoch, "step": opt.step_count, "loss": float(loss.data)})
        rec = {"epoch": epoch, "steps": opt.step_count}
        if val_chunks:
            rec["val_ce"] = validation_ce(target, val_chunks)
            if rec["val_ce"] < best - 1e-3:
                best, stale = rec["val_ce"], 0
            else:
                stale += 1
        history.append(rec)
        if val_chunks and stale >= cfg.patience:
            break
    target._hash = None
    return history


def config_header(cfg: dict) -> str:
    return "# " + json.dumps(cfg, sort_keys=True) + "\n"
