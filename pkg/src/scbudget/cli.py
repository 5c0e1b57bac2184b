"""Command-line entry point.

Every subcommand takes ``--config FILE`` (a flat JSON object) plus flags
that override it, writes its outputs to ``--out DIR`` and records the fully
resolved parameters in ``DIR/resolved_config.json``.  Running the same
subcommand with ``--config DIR/resolved_config.json`` repeats the run bit for
bit.

Exit codes: 0 success, 2 usage or contract error, 3 I/O or parse error,
4 capacity error or trace shortfall, 5 trace-source (HTTP) failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from collections import Counter
from dataclasses import dataclass
from typing import Any, Optional

import numpy as np

from .core import as_theta, lattice_size, sc_exact_binary, sc_multinomial
from .errors import CapacityError, ContractError, PoolParseError, ShortfallError, TraceSourceError
from .llm_client import SamplingJob, collect
from .offline import QuestionBelief, run_offline
from .online import (
    PATTERNS,
    GridModel,
    StreamState,
    binary_grid_model,
    fit_question,
    greedy_allocate,
    stream_step,
    train_grid_model,
    warmup_grids,
)
from .simulator import (
    EvalContext,
    EvalReport,
    PolicyConfig,
    PoolSpec,
    TracePool,
    build_trace_pool,
    confidence_weighting,
    generate_pool,
    online_first_hit,
    run_policy,
)
from .surrogate import fit_probit

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_CAPACITY, EXIT_SOURCE = 0, 2, 3, 4, 5
MAX_EXACT_LATTICE = 2_000_000
REQUIRED = object()


# ---------------------------------------------------------------------------
# parameter handling


@dataclass(frozen=True)
class Param:
    name: str
    kind: str  # int, float, str, bool, floats, strs, thetas, json
    default: Any = None
    help: str = ""


def _parse_value(kind: str, raw):
    """Coerce a flag string or a JSON config value."""
    if raw is None:
        return None
    if kind == "int":
        if isinstance(raw, bool) or (isinstance(raw, float) and not raw.is_integer()):
            raise ContractError(f"expected an integer, got {raw!r}")
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "str":
        return str(raw)
    if kind == "bool":
        if isinstance(raw, bool):
            return raw
        s = str(raw).lower()
        if s in ("1", "true", "yes", "on"):
            return True
        if s in ("0", "false", "no", "off"):
            return False
        raise ContractError(f"expected a boolean, got {raw!r}")
    if kind == "floats":
        if isinstance(raw, str):
            raw = _expand_range(raw)
        return [float(x) for x in raw]
    if kind == "strs":
        if isinstance(raw, str):
            raw = [x for x in raw.split(",") if x.strip()]
        return [str(x).strip() for x in raw]
    if kind == "thetas":
        # "0.8" | "0.6;0.7" | "0.4,0.3,0.2,0.1" ; JSON: 0.8 | [0.6, 0.7] | [[0.4, 0.6]]
        if isinstance(raw, str):
            items = [s for s in raw.split(";") if s.strip()]
            out = []
            for s in items:
                parts = [float(x) for x in s.split(",")]
                out.append(parts[0] if len(parts) == 1 else parts)
            return out
        if isinstance(raw, (int, float)):
            return [float(raw)]
        return [float(x) if np.ndim(x) == 0 else [float(y) for y in x] for x in raw]
    if kind == "json":
        return json.loads(raw) if isinstance(raw, str) else raw
    raise AssertionError(kind)


def _expand_range(s: str) -> list:
    # "1:64" is an inclusive integer range; "1,2,4" a list
    out = []
    for part in s.split(","):
        part = part.strip()
        if not part:
            continue
        if ":" in part:
            lo, hi = part.split(":")
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(float(part))
    return out


COMMON = [Param("out", "str", REQUIRED, "output directory")]

COMMANDS = {
    "sc-curve": (
        "Self-consistency curves SC(theta, B)",
        [
            Param("theta", "thetas", REQUIRED, "binary theta, a full vector '0.4,0.3,0.2,0.1', or several separated by ';'"),
            Param("b_min", "int", 1, "smallest budget"),
            Param("b_max", "int", 9, "largest budget"),
            Param("mode", "str", "auto", "auto | exact | mc"),
            Param("samples", "int", 100_000, "Monte Carlo samples per point"),
            Param("seed", "int", None, "seed (required when Monte Carlo is used)"),
        ],
    ),
    "fit-surrogate": (
        "Fit probit surrogates to exact binary curves or to pooled questions",
        [
            Param("theta", "thetas", None, "binary thetas with exact curves"),
            Param("pool", "str", None, "trace pool; fits every question's plug-in curve"),
            Param("b_max", "int", 63, "largest odd budget in the curve"),
            Param("k_min", "int", 5, "smallest odd budget the surrogate is used for"),
            Param("seed", "int", REQUIRED, "seed for Monte Carlo curves"),
        ],
    ),
    "make-pool": (
        "Generate a synthetic trace pool",
        [
            Param("kind", "str", "mixture", "fixed | dirichlet | mixture"),
            Param("thetas", "thetas", None, "fixed: question thetas"),
            Param("m", "int", 2, "dirichlet: number of answers"),
            Param("concentration", "float", 1.0, "dirichlet concentration"),
            Param("components", "json", [[0.8, 0.9], [0.2, 0.6]], "mixture: JSON [[weight, theta], ...]"),
            Param("stratified", "bool", True, "mixture: exact component proportions"),
            Param("mu_top", "float", 1.0, "confidence mean of the most likely answer"),
            Param("mu_other", "float", 0.7, "confidence mean of other answers"),
            Param("confidence_sd", "float", 0.3, "confidence noise"),
            Param("wrong_majority_fraction", "float", 0.0, "share of questions whose truth is not the majority"),
            Param("n_questions", "int", None, "number of questions (fixed: defaults to len(thetas))"),
            Param("per_question", "int", 128, "traces per question"),
            Param("seed", "int", REQUIRED, "seed"),
        ],
    ),
    "train-grid": (
        "Train a warm-up grid model from a trace pool",
        [
            Param("pool", "str", REQUIRED, "training pool"),
            Param("repeats", "int", 1000, "warm-up subsamples per question"),
            Param("k_min", "int", 5, "smallest odd budget for the surrogates"),
            Param("seed", "int", REQUIRED, "seed"),
        ],
    ),
    "allocate": (
        "Allocate traces over a pool with the online, offline or oracle policy",
        [
            Param("mode", "str", REQUIRED, "online | offline | oracle"),
            Param("pool", "str", REQUIRED, "trace pool"),
            Param("budget", "float", REQUIRED, "average traces per question"),
            Param("model", "str", None, "grid model (online)"),
            Param("max_budget", "int", 64, "per-question trace cap (online, oracle)"),
            Param("oracle_bins", "int", 10, "difficulty bins (oracle)"),
            Param("weighted", "bool", False, "confidence-weighted voting"),
            Param("keep_fraction", "float", 0.7, "share of most confident traces kept when weighted"),
            Param("n_mc", "int", 4000, "Monte Carlo size (offline, non-binary or weighted)"),
            Param("seed", "int", REQUIRED, "seed"),
        ],
    ),
    "collect": (
        "Collect live traces from a chat-completions endpoint",
        [
            Param("endpoint", "str", REQUIRED, "full chat-completions URL"),
            Param("model", "str", REQUIRED, "model name"),
            Param("questions", "str", REQUIRED, "JSONL file of {\"id\", \"question\"}"),
            Param("traces", "int", 128, "parsed traces per question"),
            Param("prompt_template", "str", "{question}", "prompt with a {question} slot"),
            Param("temperature", "float", 0.7, "sampling temperature"),
            Param("max_tokens", "int", 4096, "completion token limit"),
            Param("concurrency", "int", 4, "requests in flight"),
            Param("max_attempts", "int", 3, "requests per trace"),
            Param("backoff", "float", 0.5, "base retry delay in seconds"),
            Param("timeout", "float", 120.0, "request timeout in seconds"),
            Param("answer_mode", "str", "boxed", "boxed | letter | numeric"),
            Param("logprobs", "bool", True, "request token log-probabilities"),
            Param("top_logprobs", "int", 0, "top-k log-probabilities per token"),
            Param("confidence_scheme", "str", "geometric", "geometric | token-prob | topk-neg-mean"),
            Param("window", "int", 2048, "tail window in tokens"),
            Param("api_key_env", "str", "SCBUDGET_API_KEY", "environment variable holding the key"),
            Param("job_id", "str", "default", "job id; reruns with the same id top up the pool"),
        ],
    ),
    "compare": (
        "Compare policies on a pool by consistency, accuracy and traces to full consistency",
        [
            Param("pool", "str", REQUIRED, "trace pool"),
            Param("policies", "strs", ["uniform", "pets-online", "pets-offline"], "comma-separated policies"),
            Param("budgets", "floats", list(range(1, 65)), "average budgets, e.g. '1:64' or '1,2,4'"),
            Param("weighted", "bool", False, "confidence-weighted voting"),
            Param("keep_fraction", "float", 0.7, "share of most confident traces kept when weighted"),
            Param("repeats", "int", 30, "subsampling repeats"),
            Param("b_ref", "int", 64, "reference subsample size"),
            Param("model", "str", None, "grid model (pets-online)"),
            Param("oracle_bins", "int", 10, "difficulty bins (pets-oracle)"),
            Param("n_mc", "int", 4000, "Monte Carlo size (pets-offline)"),
            Param("svg", "bool", False, "also write compare.svg"),
            Param("seed", "int", REQUIRED, "seed"),
        ],
    ),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scbudget",
        description="Budget allocation for self-consistency sampling.",
        epilog="exit codes: 0 ok, 2 usage, 3 I/O or parse, 4 capacity or shortfall, 5 trace source",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for name, (desc, params) in COMMANDS.items():
        p = sub.add_parser(name, help=desc, description=desc)
        p.add_argument("--config", help="JSON file of parameters (flags override it)")
        for prm in COMMON + params:
            flag = "--" + prm.name.replace("_", "-")
            default = "" if prm.default in (None, REQUIRED) else f" (default: {_show(prm.default)})"
            req = " [required]" if prm.default is REQUIRED else ""
            p.add_argument(flag, dest=prm.name, default=None, help=prm.help + default + req)
    return parser


def _show(v):
    if isinstance(v, list) and len(v) > 8:
        return f"{_show(v[0])}..{_show(v[-1])}"
    return json.dumps(v)


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then flags."""
    params = COMMON + COMMANDS[command][1]
    known = {p.name: p for p in params}
    cfg = {}
    if args.config:
        with open(args.config) as fh:
            try:
                loaded = json.load(fh)
            except json.JSONDecodeError as e:
                raise PoolParseError(args.config, e.lineno, f"invalid JSON ({e.msg})") from None
        if not isinstance(loaded, dict):
            raise ContractError("config file must hold a JSON object")
        if loaded.get("command", command) != command:
            raise ContractError(f"config was written for {loaded['command']!r}, not {command!r}")
        loaded.pop("command", None)
        unknown = set(loaded) - set(known)
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for name in known:
        v = getattr(args, name, None)
        if v is not None:
            cfg[name] = v
    out = {"command": command}
    for name, prm in known.items():
        if name in cfg:
            try:
                out[name] = _parse_value(prm.kind, cfg[name])
            except (TypeError, ValueError) as e:
                raise ContractError(f"bad value for {name}: {e}") from None
        elif prm.default is REQUIRED:
            raise ContractError(f"missing required parameter --{name.replace('_', '-')}")
        else:
            out[name] = _parse_value(prm.kind, prm.default)
    return out


def _write_resolved(cfg: dict):
    os.makedirs(cfg["out"], exist_ok=True)
    with open(os.path.join(cfg["out"], "resolved_config.json"), "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _num(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


# ---------------------------------------------------------------------------
# commands


def cmd_sc_curve(cfg):
    if cfg["b_min"] < 0 or cfg["b_max"] < cfg["b_min"]:
        raise ContractError("need 0 <= b_min <= b_max")
    if cfg["mode"] not in ("auto", "exact", "mc"):
        raise ContractError(f"unknown mode {cfg['mode']!r}")
    rows = []
    for t in cfg["theta"]:
        vec = as_theta([t, 1 - t] if np.ndim(t) == 0 else t)
        label = f"{t:g}" if np.ndim(t) == 0 else "/".join(f"{x:g}" for x in t)
        for B in range(cfg["b_min"], cfg["b_max"] + 1):
            mode = cfg["mode"]
            if mode == "auto":
                mode = "exact" if vec.size == 2 or lattice_size(B, vec.size) <= MAX_EXACT_LATTICE else "mc"
            if mode == "exact" and vec.size == 2:
                rows.append((label, B, _num(sc_exact_binary(float(vec[0]), B)), "0.0", "exact"))
                continue
            if mode == "exact":
                est = sc_multinomial(vec, B, "exact-enumeration")
            else:
                if cfg["seed"] is None:
                    raise ContractError("Monte Carlo curves need --seed")
                est = sc_multinomial(vec, B, "monte-carlo", cfg["samples"], seed=cfg["seed"] * 100_003 + B)
            rows.append((label, B, _num(est.value), _num(est.stderr), mode))
    _write_csv(os.path.join(cfg["out"], "sc_curve.csv"), ("theta", "B", "sc", "stderr", "mode"), rows)
    return rows


def cmd_fit_surrogate(cfg):
    if (cfg["theta"] is None) == (cfg["pool"] is None):
        raise ContractError("give exactly one of --theta or --pool")
    rows, fits = [], []
    odd = range(1, cfg["b_max"] + 1, 2)
    if cfg["theta"] is not None:
        for t in cfg["theta"]:
            if np.ndim(t) != 0:
                raise ContractError("fit-surrogate takes binary thetas")
            curve = [(n, sc_exact_binary(float(t), n)) for n in odd]
            fit = fit_probit(curve, cfg["k_min"])
            rows.append((f"{t:g}", _num(fit.params.a), _num(fit.params.b), _num(fit.max_abs_error), "fit"))
            fits.append({"label": f"{t:g}", **fit.params.to_dict(), "max_abs_error": fit.max_abs_error})
    else:
        pool = TracePool.read_jsonl(cfg["pool"])
        for i, qid in enumerate(pool.question_ids):
            answers = pool.answers(qid)
            if not answers:
                raise ShortfallError(f"question {qid} has no parsed traces")
            (a, b), status, err = fit_question(answers, cfg["k_min"], cfg["b_max"], seed=[cfg["seed"], i])
            rows.append((qid, _num(a), _num(b), _num(err), status))
            fits.append({"label": qid, "a": a, "b": b, "k_min": cfg["k_min"], "max_abs_error": err,
                         "status": status})
    _write_csv(os.path.join(cfg["out"], "surrogate.csv"), ("label", "a", "b", "max_abs_error", "status"), rows)
    with open(os.path.join(cfg["out"], "surrogate.json"), "w") as fh:
        json.dump(fits, fh, indent=2, allow_nan=True)
    return rows


def cmd_make_pool(cfg):
    spec = PoolSpec(kind=cfg["kind"], thetas=cfg["thetas"], M=cfg["m"], concentration=cfg["concentration"],
                    components=cfg["components"], stratified=cfg["stratified"], mu_top=cfg["mu_top"],
                    mu_other=cfg["mu_other"], confidence_sd=cfg["confidence_sd"],
                    wrong_majority_fraction=cfg["wrong_majority_fraction"])
    if cfg["per_question"] < 1:
        raise ContractError("per_question must be >= 1")
    qs = generate_pool(spec, cfg["n_questions"], cfg["seed"])
    pool = build_trace_pool(qs, cfg["per_question"], cfg["seed"])
    pool.write_jsonl(os.path.join(cfg["out"], "pool.jsonl"))
    _write_csv(os.path.join(cfg["out"], "questions.csv"), ("question_id", "theta", "true_answer"),
               [(q.id, "/".join(_num(x) for x in q.theta), q.true_answer) for q in qs])
    return pool


def cmd_train_grid(cfg):
    pool = TracePool.read_jsonl(cfg["pool"])
    pools = [pool.answers(q) for q in pool.question_ids]
    short = [q for q, a in zip(pool.question_ids, pools) if len(a) < 4]
    if short:
        raise ShortfallError(f"{len(short)} questions have fewer than 4 parsed traces (first: {short[0]})")
    model = train_grid_model(pools, repeats=cfg["repeats"], seed=cfg["seed"], k_min=cfg["k_min"],
                             provenance={"pool": os.path.basename(cfg["pool"])})
    model.save(os.path.join(cfg["out"], "grid_model.json"))
    rows = []
    for g, (pat, proto, mass) in enumerate(zip(PATTERNS, model.prototypes, model.masses), 1):
        rows.append((g, "-".join(map(str, pat)), _num(mass), _num(proto.a), _num(proto.b)))
    _write_csv(os.path.join(cfg["out"], "grid_model.csv"), ("grid", "pattern", "mass", "a", "b"), rows)
    return model


class _PoolView:
    """Per-question label codes and confidences in file order."""

    def __init__(self, pool: TracePool, keep: float):
        self.qids = pool.question_ids
        if not self.qids:
            raise ContractError("pool has no questions")
        self.labels, self.codes, self.conf = [], [], []
        for qid in self.qids:
            ans = pool.answers(qid)
            labels = sorted(set(ans))
            self.labels.append(labels)
            self.codes.append(np.array([labels.index(a) for a in ans], dtype=np.int64))
            self.conf.append(np.nan_to_num(pool.confidences(qid), nan=1.0))
        self.truth = [pool.truth.get(q) for q in self.qids]
        self.keep = keep

    def vote(self, q: int, b: int, weighted: bool) -> Optional[str]:
        if b == 0:
            return None
        codes = self.codes[q][:b]
        M = len(self.labels[q])
        if weighted:
            w = confidence_weighting(self.conf[q][:b], self.keep)
            scores = np.bincount(codes, weights=w, minlength=M)
        else:
            scores = np.bincount(codes, minlength=M)
        return self.labels[q][int(np.argmax(scores))]

    def reference(self, q: int, weighted: bool) -> str:
        return self.vote(q, len(self.codes[q]), weighted)


def _metrics(view, mode, budgets, answers, weighted):
    ref = [view.reference(q, weighted) for q in range(len(view.qids))]
    cons = float(np.mean([a == r for a, r in zip(answers, ref)]))
    acc = None
    if any(t is not None for t in view.truth):
        acc = float(np.mean([a is not None and a == t for a, t in zip(answers, view.truth)]))
    return (mode, len(view.qids), int(sum(budgets)), _num(cons), _num(acc)), ref


def cmd_allocate(cfg):
    mode = cfg["mode"]
    if mode not in ("online", "offline", "oracle"):
        raise ContractError(f"unknown mode {mode!r}")
    if cfg["budget"] < 0:
        raise ContractError("budget must be nonnegative")
    pool = TracePool.read_jsonl(cfg["pool"])
    view = _PoolView(pool, cfg["keep_fraction"])
    N = len(view.qids)
    log_path = os.path.join(cfg["out"], "allocation_log.jsonl")
    budgets, grids, answers = [0] * N, [None] * N, [None] * N
    weighted = cfg["weighted"]

    if mode == "online":
        if cfg["model"] is None:
            raise ContractError("online mode needs --model")
        model = GridModel.load(cfg["model"])
        state = StreamState.start(cfg["budget"] * N, N, seed=cfg["seed"])
        with open(log_path, "w") as log:
            for q in range(N):
                avail = len(view.codes[q])
                if state.remaining_budget < model.offset:
                    b = int(math.floor(state.remaining_budget + 1e-9))
                    state = StreamState(state.remaining_budget - b, state.remaining_horizon - 1,
                                        state.seed, state.t + 1)
                else:
                    if avail < model.offset:
                        raise ShortfallError(f"question {view.qids[q]} has {avail} traces, warm-up needs {model.offset}")
                    g = int(warmup_grids(view.codes[q][None, : model.offset])[0]) - 1
                    grids[q] = g + 1
                    b, state = stream_step(state, model, g, max_budget=cfg["max_budget"] - model.offset)
                if b > avail:
                    raise ShortfallError(f"question {view.qids[q]} needs {b} traces but the pool has {avail}")
                budgets[q] = b
                answers[q] = view.vote(q, b, weighted)
                log.write(json.dumps({"t": q, "question_id": view.qids[q], "grid": grids[q], "budget": b,
                                      "remaining_budget": state.remaining_budget}) + "\n")

    elif mode == "oracle":
        if any(len(lbl) > 2 for lbl in view.labels):
            raise ContractError("oracle mode supports binary pools only")
        # plug-in difficulty from the whole pool
        thetas = [float(np.mean(c == 0)) if c.size else 0.5 for c in view.codes]
        model, idx = binary_grid_model(thetas, cfg["oracle_bins"])
        plan = greedy_allocate(model, cfg["budget"], max_budget=cfg["max_budget"])
        with open(log_path, "w") as log:
            for q in range(N):
                b = int(plan.budgets[idx[q]])
                if b > len(view.codes[q]):
                    raise ShortfallError(f"question {view.qids[q]} needs {b} traces but the pool has {len(view.codes[q])}")
                budgets[q], grids[q] = b, int(idx[q]) + 1
                answers[q] = view.vote(q, b, weighted)
                log.write(json.dumps({"question_id": view.qids[q], "theta": thetas[q], "bin": grids[q],
                                      "budget": b}) + "\n")

    else:
        H = int(round(cfg["budget"] * N))
        cap = [len(c) for c in view.codes]
        if sum(cap) < H:
            raise ShortfallError(f"budget of {H} traces exceeds the pool's {sum(cap)}")
        if H < 1:
            raise ContractError("offline mode needs a budget of at least one trace")
        priors = [QuestionBelief.prior(max(len(lbl), 2)) for lbl in view.labels]
        src = lambda q, k: (int(view.codes[q][k]), float(view.conf[q][k]) if weighted else 0.0)
        with open(log_path, "w") as log:
            res = run_offline(priors, src, H, weighted, cfg["n_mc"], cfg["seed"], cap, log=log)
        budgets = list(res.counts)
        answers = [view.labels[q][a] if a < len(view.labels[q]) else None for q, a in enumerate(res.answers)]

    metrics, ref = _metrics(view, mode, budgets, answers, weighted)
    _write_csv(os.path.join(cfg["out"], "budgets.csv"), ("question_id", "grid", "budget", "answer", "reference"),
               [(view.qids[q], "" if grids[q] is None else grids[q], budgets[q],
                 "" if answers[q] is None else answers[q], ref[q]) for q in range(N)])
    _write_csv(os.path.join(cfg["out"], "metrics.csv"),
               ("mode", "questions", "total_traces", "consistency", "accuracy"), [metrics])
    return budgets, answers


def cmd_collect(cfg):
    qpath = cfg["questions"]
    questions = []
    with open(qpath) as fh:
        for i, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                questions.append((str(d["id"]), str(d["question"])))
            except (json.JSONDecodeError, KeyError, TypeError):
                raise PoolParseError(qpath, i, "expected {\"id\": ..., \"question\": ...}") from None
    out = os.path.join(cfg["out"], "pool.jsonl")
    pool = TracePool.read_jsonl(out) if os.path.exists(out) else TracePool()
    keys = ("traces", "prompt_template", "temperature", "max_tokens", "concurrency", "max_attempts", "backoff",
            "timeout", "answer_mode", "logprobs", "top_logprobs", "confidence_scheme", "window", "api_key_env",
            "job_id")
    rows, short = [], 0
    for qid, text in questions:
        job = SamplingJob(endpoint=cfg["endpoint"], model=cfg["model"], question=text, question_id=qid,
                          **{k: cfg[k] for k in keys})
        res = collect(job, pool=pool, out_path=out)
        have = sum(1 for r in pool.parsed(qid) if r.source == job.source_tag)
        rows.append((qid, cfg["traces"], have, len(res.records), max(cfg["traces"] - have, 0)))
        short += max(cfg["traces"] - have, 0)
    _write_csv(os.path.join(cfg["out"], "collect.csv"),
               ("question_id", "requested", "parsed", "added", "shortfall"), rows)
    if short:
        raise ShortfallError(f"collection fell {short} parsed traces short; see collect.csv")
    return rows


def _empirical_thetas(ctx: EvalContext) -> list:
    out = []
    for qid, labels in zip(ctx.qids, ctx.labels):
        answers = ctx.pool.answers(qid)
        out.append(Counter(answers)[labels[0]] / len(answers))
    return out


def cmd_compare(cfg):
    pool = TracePool.read_jsonl(cfg["pool"])
    ctx = EvalContext(pool, cfg["b_ref"], cfg["repeats"], cfg["seed"], cfg["keep_fraction"])
    pcfg = PolicyConfig(n_mc=cfg["n_mc"], oracle_bins=cfg["oracle_bins"])
    policies = cfg["policies"]
    for p in policies:
        if p not in ("uniform", "pets-online", "pets-oracle", "pets-offline"):
            raise ContractError(f"unknown policy {p!r}")
    if "pets-online" in policies:
        if cfg["model"] is None:
            raise ContractError("pets-online needs --model")
        pcfg.model = GridModel.load(cfg["model"])
    if "pets-oracle" in policies:
        pcfg.oracle_thetas = _empirical_thetas(ctx)
    weighted = cfg["weighted"]
    results, summary = [], []
    for p in policies:
        res = run_policy(p, ctx, cfg["budgets"], pcfg, weighted=weighted)
        if p == "pets-online":
            res.first_hit = online_first_hit(ctx, pcfg, weighted)
        results.append(res)
        ttf = res.traces_to_full
        cons = acc = None
        if not math.isnan(ttf):
            at = run_policy(p, ctx, [min(ttf / ctx.N, float(cfg["b_ref"]))], pcfg, weighted=weighted)
            cons = at.consistency[0]
            acc = None if at.accuracy is None else at.accuracy[0]
        summary.append((res.policy, int(weighted), _num(ttf), _num(res.traces_to_full_var), _num(cons), _num(acc)))
    report = EvalReport(results, cfg["repeats"], cfg["b_ref"], ctx.N)
    report.to_csv(os.path.join(cfg["out"], "compare.csv"))
    _write_csv(os.path.join(cfg["out"], "summary.csv"),
               ("policy", "weighted", "traces_to_full", "traces_to_full_var", "consistency_at_full",
                "accuracy_at_full"), summary)
    if cfg["svg"]:
        report.to_svg(os.path.join(cfg["out"], "compare.svg"))
    return report


HANDLERS = {
    "sc-curve": cmd_sc_curve,
    "fit-surrogate": cmd_fit_surrogate,
    "make-pool": cmd_make_pool,
    "train-grid": cmd_train_grid,
    "allocate": cmd_allocate,
    "collect": cmd_collect,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    try:
        cfg = resolve_config(args.command, args)
        _write_resolved(cfg)
        HANDLERS[args.command](cfg)
    except (CapacityError, ShortfallError) as e:
        print(f"scbudget: capacity: {e}", file=sys.stderr)
        return EXIT_CAPACITY
    except (PoolParseError, OSError) as e:
        print(f"scbudget: I/O: {e}", file=sys.stderr)
        return EXIT_IO
    except ContractError as e:
        print(f"scbudget: usage: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TraceSourceError as e:
        print(f"scbudget: trace source: {e}", file=sys.stderr)
        return EXIT_SOURCE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
