"""Command-line pipelines: train the target, train the draft head, generate, evaluate, dump masks, analyze."""

from __future__ import annotations

import argparse
import dataclasses
import os
import resource
import sys
from dataclasses import dataclass, fields

import numpy as np

from . import checkpoint as ckpt_io
from .analysis import analyze_profile
from .data import (StaleCacheError, StateCache, build_state_cache, chunk_documents, decode, encode,
                   split_documents)
from .masks import render, simulation_mask, window_plan
from .models import DraftHead, ModelConfig, TargetModel
from .specdec import (SDMetrics, SDSession, eval_rows, improvement_factor, measure_alpha_profile,
                      read_eval_csv, sd_generate, target_generate, write_eval_csv, EvalFormatError)
from .train import TargetTrainConfig, TrainConfig, config_header, run_training, train_target


class UsageError(Exception):
    """Bad flags, config or missing inputs: exit code 2."""


@dataclass
class RunConfig:
    # model
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 4
    t_max: int = 512
    context_len: int = 128
    # data
    corpus: str = "corpus.txt"
    val_fraction: float = 0.05
    # target training
    target_epochs: int = 3
    target_lr: float = 2e-3
    target_batch_size: int = 16
    target_warmup_steps: int = 100
    target_max_steps: int = 0
    # draft training
    k: int = 5
    s: int = 4
    epochs_early: int = 10
    epochs_late: int = 10
    lr: float = 3e-5
    warmup_steps: int = -1
    weight_decay: float = 0.0
    grad_clip: float = 0.5
    vloss_coef: float = 10.0
    noise_std: float = 0.2
    batch_size: int = 16
    max_steps_per_epoch: int = 0
    predicted_queries: bool = False
    # decoding
    gamma: int = 5
    mode: str = "greedy"
    concat_draft_states: bool = True
    max_tokens: int = 64
    inference_dtype: str = "float64"
    # bookkeeping
    seed: int = 0
    target_ckpt: str = "target.bgle"
    draft_ckpt: str = "draft.bgle"
    state_cache: str = "states.bgsc"
    metric_log: str = "draft_log.csv"

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.d_model, self.n_heads, self.n_layers, self.t_max)

    def train_config(self) -> TrainConfig:
        return TrainConfig(k=self.k, s=self.s, epochs_early=self.epochs_early, epochs_late=self.epochs_late,
                           lr=self.lr, warmup_steps=None if self.warmup_steps < 0 else self.warmup_steps,
                           weight_decay=self.weight_decay, grad_clip=self.grad_clip,
                           vloss_coef=self.vloss_coef, noise_std=self.noise_std, batch_size=self.batch_size,
                           seed=self.seed, max_steps_per_epoch=self.max_steps_per_epoch or None,
                           predicted_queries=self.predicted_queries)

    def target_train_config(self) -> TargetTrainConfig:
        return TargetTrainConfig(epochs=self.target_epochs, lr=self.target_lr, batch_size=self.target_batch_size,
                                 warmup_steps=self.target_warmup_steps, seed=self.seed,
                                 max_steps_per_epoch=self.target_max_steps or None)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _convert(name: str, raw: str, kind):
    try:
        if kind is bool or kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise UsageError(f"config key '{name}': cannot parse {raw!r}") from None


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    """Flat ``key = value`` lines; '#' starts a comment; unknown keys are rejected."""
    cfg = dataclasses.replace(base) if base else RunConfig()
    kinds = {f.name: f.type for f in fields(RunConfig)}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in kinds:
            raise UsageError(f"config line {lineno}: unknown key '{key}'")
        setattr(cfg, key, _convert(key, value, kinds[key]))
    return cfg


def load_run_config(path: str | None, overrides: list[str] = ()) -> RunConfig:
    cfg = RunConfig()
    if path:
        if not os.path.exists(path):
            raise UsageError(f"config file not found: {path}")
        with open(path) as fh:
            cfg = parse_config_text(fh.read(), cfg)
    if overrides:
        cfg = parse_config_text("\n".join(overrides), cfg)
    env_seed = os.environ.get("BEAGLE_SEED")
    if env_seed is not None:
        cfg.seed = _convert("BEAGLE_SEED", env_seed, int)
    if cfg.mode not in ("greedy", "sampling"):
        raise UsageError(f"mode must be greedy or sampling, got {cfg.mode!r}")
    if cfg.inference_dtype not in ("float32", "float64"):
        raise UsageError("inference_dtype must be float32 or float64")
    return cfg


# -- shared steps -------------------------------------------------------------------

def split_corpus(cfg: RunConfig):
    if not os.path.exists(cfg.corpus):
        raise UsageError(f"corpus not found: {cfg.corpus}")
    with open(cfg.corpus, "rb") as fh:
        docs = split_documents(fh.read())
    if not docs:
        raise UsageError(f"corpus is empty: {cfg.corpus}")
    n_val = max(1, int(round(len(docs) * cfg.val_fraction))) if len(docs) > 1 else 0
    train_docs, val_docs = docs[:len(docs) - n_val], docs[len(docs) - n_val:]
    return chunk_documents(train_docs, cfg.context_len), chunk_documents(val_docs, cfg.context_len)


def load_target(cfg: RunConfig) -> TargetModel:
    if not os.path.exists(cfg.target_ckpt):
        raise UsageError(f"target checkpoint not found: {cfg.target_ckpt} (run train-target first)")
    return TargetModel.load(cfg.target_ckpt)


def states_for(target: TargetModel, chunks, path: str | None, log=print) -> list[np.ndarray]:
    """Target states for ``chunks``, reusing the on-disk cache when its hash matches."""
    if path and os.path.exists(path):
        try:
            cache = StateCache.load(path, expected_hash=target.checkpoint_hash())
            if len(cache.states) == len(chunks) and all(len(s) == len(c.tokens) for s, c in zip(cache.states, chunks)):
                return cache.states
            log(f"state cache {path} does not match the corpus; rebuilding")
        except StaleCacheError:
            log(f"state cache {path} is stale; rebuilding")
    cache = build_state_cache(target, chunks)
    if path:
        cache.save(path)
    return cache.states


def _provenance(cfg: RunConfig) -> dict:
    return {"run_config": cfg.as_dict()}


# -- subcommands -------------------------------------------------------------------------

def cmd_train_target(cfg: RunConfig, out=print) -> int:
    train_chunks, val_chunks = split_corpus(cfg)
    target = TargetModel(cfg.model_config(), seed=cfg.seed)
    history = train_target(target, cfg.target_train_config(), train_chunks, val_chunks or None,
                           progress=lambda r: None)
    for rec in history:
        out(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in rec.items()))
    target.save(cfg.target_ckpt, _provenance(cfg))
    out(f"saved target checkpoint to {cfg.target_ckpt}")
    return 0


def cmd_train_draft(cfg: RunConfig, stage: str, from_scratch: bool = False, resume: bool = False,
                    out=print) -> int:
    target = load_target(cfg)
    train_chunks, val_chunks = split_corpus(cfg)
    head = DraftHead.for_target(target, seed=cfg.seed)
    tcfg = cfg.train_config()
    stages = ("early", "late") if stage == "both" else (stage,)
    resume_ckpt = None
    if resume:
        if not os.path.exists(cfg.draft_ckpt):
            raise UsageError(f"nothing to resume: {cfg.draft_ckpt} does not exist")
        resume_ckpt = ckpt_io.load(cfg.draft_ckpt)
    elif stage == "late" and not from_scratch:
        if not os.path.exists(cfg.draft_ckpt):
            raise UsageError("stage=late needs an early-stage draft checkpoint; pass --from-scratch to skip it")
        head = DraftHead.from_checkpoint(ckpt_io.load(cfg.draft_ckpt), target)
    if not resume and os.path.exists(cfg.metric_log):
        os.remove(cfg.metric_log)
    states = states_for(target, train_chunks, cfg.state_cache, out)
    val_states = states_for(target, val_chunks, None) if val_chunks else None
    if not os.path.exists(cfg.metric_log):
        with open(cfg.metric_log, "w") as fh:
            fh.write(config_header(cfg.as_dict()))
    result = run_training(tcfg, head, target, train_chunks, states, stages=stages,
                          val_chunks=val_chunks or None, val_states=val_states, resume=resume_ckpt,
                          log_path=cfg.metric_log, checkpoint_path=cfg.draft_ckpt,
                          meta=_provenance(cfg))
    for row in result.val_rows:
        rates = " ".join(f"{k}={v:.3f}" for k, v in row.items() if k.startswith("alpha"))
        out(f"epoch {row['epoch']} ({row['stage']}): {rates}")
    out(f"saved draft checkpoint to {cfg.draft_ckpt}; metric log at {cfg.metric_log}")
    return 0


def _load_models(cfg: RunConfig, need_draft: bool = True):
    target = load_target(cfg)
    head = None
    if need_draft:
        if not os.path.exists(cfg.draft_ckpt):
            raise UsageError(f"draft checkpoint not found: {cfg.draft_ckpt} (run train-draft first)")
        head = DraftHead.from_checkpoint(ckpt_io.load(cfg.draft_ckpt), target)
    return target.astype(np.dtype(cfg.inference_dtype)), head


def cmd_generate(cfg: RunConfig, prompt: str, spec: bool, out=print) -> int:
    target, head = _load_models(cfg, need_draft=spec)
    ids = encode(prompt, add_bos=True)
    if spec:
        session = SDSession(target, head, ids, cfg.gamma, cfg.mode, cfg.seed, cfg.concat_draft_states)
        res = sd_generate(session, cfg.max_tokens)
    else:
        res = target_generate(target, ids, cfg.max_tokens, cfg.mode, cfg.seed)
    out(decode(res.tokens).decode("utf-8", errors="replace"))
    tps = len(res.tokens) / res.seconds if res.seconds > 0 else float("inf")
    out(f"tokens/sec: {tps:.1f}")
    if spec:
        out(f"mean tau: {res.metrics.mean_tau:.3f}  improvement factor: {improvement_factor(res.metrics):.3f}")
    return 0


def _peak_rss_mb() -> float:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def cmd_eval(cfg: RunConfig, prompts_path: str, out_path: str, out=print) -> int:
    if not os.path.exists(prompts_path):
        raise UsageError(f"prompts file not found: {prompts_path}")
    with open(prompts_path, encoding="utf-8") as fh:
        prompts = [line.rstrip("\n") for line in fh if line.strip()]
    if not prompts:
        raise UsageError("prompts file is empty")
    target, head = _load_models(cfg)
    rows, summary, total = [], [], SDMetrics(gamma=cfg.gamma)
    spec_tokens = spec_time = base_tokens = base_time = 0.0
    for idx, text in enumerate(prompts):
        ids = encode(text, add_bos=True)
        session = SDSession(target, head, ids, cfg.gamma, cfg.mode, [cfg.seed, idx], cfg.concat_draft_states)
        res = sd_generate(session, cfg.max_tokens)
        base = target_generate(target, ids, cfg.max_tokens, cfg.mode, [cfg.seed, idx])
        rows += eval_rows(idx, res.metrics)
        total = total.merge(res.metrics)
        spec_tokens += len(res.tokens)
        spec_time += res.seconds
        base_tokens += len(base.tokens)
        base_time += base.seconds
        summary.append({"prompt": idx, "tokens": len(res.tokens), "iterations": res.metrics.iterations,
                        "mean_tau": res.metrics.mean_tau,
                        "spec_tps": len(res.tokens) / res.seconds if res.seconds else float("inf"),
                        "baseline_tps": len(base.tokens) / base.seconds if base.seconds else float("inf"),
                        "matches_baseline": res.tokens == base.tokens})
    header = [f"seed={cfg.seed} gamma={cfg.gamma} mode={cfg.mode} concat={cfg.concat_draft_states}"]
    with open(out_path, "w") as fh:
        write_eval_csv(fh, rows, header)
    summary_path = os.path.splitext(out_path)[0] + ".summary.csv"
    with open(summary_path, "w") as fh:
        keys = list(summary[0])
        fh.write(",".join(keys) + "\n")
        for rec in summary:
            fh.write(",".join(f"{rec[k]:.4f}" if isinstance(rec[k], float) else str(rec[k]) for k in keys) + "\n")
    spec_tps = spec_tokens / spec_time if spec_time else float("inf")
    base_tps = base_tokens / base_time if base_time else float("inf")
    alpha = measure_alpha_profile(total, cfg.gamma).alpha
    out(f"prompts: {len(prompts)}  iterations: {total.iterations}")
    out(f"alpha: {' '.join(f'{a:.3f}' for a in alpha)}")
    out(f"mean tau: {total.mean_tau:.3f}  improvement factor: {improvement_factor(total):.3f}")
    out(f"spec tokens/sec: {spec_tps:.1f}  baseline tokens/sec: {base_tps:.1f}  speedup: {spec_tps / base_tps:.3f}")
    out(f"peak resident memory: {_peak_rss_mb():.1f} MB")
    out(f"wrote {out_path} and {summary_path}")
    return 0


def cmd_mask_dump(T: int, k: int, eps: int, step: int, out=print) -> int:
    if T < 1:
        raise UsageError("T must be >= 1")
    if k < 1 or not 0 <= eps < k:
        raise UsageError("need k >= 1 and 0 <= eps < k")
    if not 1 <= step <= k:
        raise UsageError("step must lie in [1, k]")
    out(render(simulation_mask(window_plan(T, k, eps), step)))
    return 0


def cmd_analyze(csv_path: str, out_path: str | None = None, out=print) -> int:
    if not os.path.exists(csv_path):
        raise UsageError(f"eval CSV not found: {csv_path}")
    with open(csv_path) as fh:
        metrics = read_eval_csv(fh)
    report = analyze_profile(measure_alpha_profile(metrics), metrics.mean_tau)
    if out_path:
        with open(out_path, "w") as fh:
            fh.write("metric,value\n")
            for k, v in report.rows():
                fh.write(f"{k},{v}\n")
    out(report.summary())
    return 0


# -- argument parsing ------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="beagle", description="Cross-attention draft head for speculative decoding.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
        return sp

    with_config(sub.add_parser("train-target", help="train the target LM on the corpus"))
    sp = with_config(sub.add_parser("train-draft", help="train the draft head"))
    sp.add_argument("--stage", choices=("early", "late", "both"), default="both")
    sp.add_argument("--from-scratch", action="store_true", help="allow stage=late without an early checkpoint")
    sp.add_argument("--resume", action="store_true", help="continue from the saved draft checkpoint")
    sp = with_config(sub.add_parser("generate", help="decode one prompt"))
    sp.add_argument("--prompt", required=True)
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--spec", action="store_true", help="speculative decoding")
    g.add_argument("--baseline", action="store_true", help="target-only decoding")
    sp = with_config(sub.add_parser("eval", help="speculative decoding over a prompt file"))
    sp.add_argument("--prompts", required=True)
    sp.add_argument("--out", default="eval.csv")
    sp = sub.add_parser("mask-dump", help="print an attention mask as an ASCII grid")
    sp.add_argument("--T", type=int, required=True)
    sp.add_argument("--k", type=int, required=True)
    sp.add_argument("--eps", type=int, default=0)
    sp.add_argument("--step", type=int, default=1)
    sp = sub.add_parser("analyze", help="acceptance-length report from an eval CSV")
    sp.add_argument("csv")
    sp.add_argument("--out")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command == "mask-dump":
            return cmd_mask_dump(args.T, args.k, args.eps, args.step)
        if args.command == "analyze":
            return cmd_analyze(args.csv, args.out)
        cfg = load_run_config(args.config, args.set)
        if args.command == "train-target":
            return cmd_train_target(cfg)
        if args.command == "train-draft":
            return cmd_train_draft(cfg, args.stage, args.from_scratch, args.resume)
        if args.command == "generate":
            return cmd_generate(cfg, args.prompt, spec=args.spec)
        if args.command == "eval":
            return cmd_eval(cfg, args.prompts, args.out)
    except UsageError as exc:
        print(f"beagle: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (EvalFormatError, ckpt_io.CheckpointError) as exc:
        print(f"beagle: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"beagle: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
