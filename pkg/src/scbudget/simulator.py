"""Synthetic trace pools and policy evaluation.

The evaluation protocol: every question has a pool of traces (typically 128).
For each repeat a random 64-trace subsample is drawn; its (weighted) majority
is that repeat's reference answer, and the same 64 traces, in the drawn order,
are the only traces a policy may consume.  A policy spending ``b`` traces on a
question votes over the first ``b`` of them.  Exact vote ties are broken by a
per-(repeat, question) random label priority that does not depend on ``b``,
so a policy that spends all 64 traces reproduces the reference exactly.

Consistency is the fraction of questions whose vote matches the reference.
For each repeat the *first-hit* budget is the smallest total trace count at
which every question is consistent; reports give its mean and variance over
repeats.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import betainc

from .core import as_theta
from .errors import ContractError, PoolParseError
from .offline import OKGRunner, QuestionBelief, posterior_majority_prob, question_seed
from .online import GridModel, StreamState, binary_grid_model, greedy_allocate, stream_step, warmup_grids

POLICIES = ("uniform", "pets-online", "pets-oracle", "pets-offline")
DEFAULT_KEEP = 0.7


# ---------------------------------------------------------------------------
# synthetic questions


@dataclass(frozen=True)
class SyntheticQuestion:
    id: str
    theta: tuple
    mu: tuple
    confidence_sd: float = 0.3
    true_answer: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "theta", tuple(float(x) for x in as_theta(self.theta)))
        if len(self.mu) != len(self.theta):
            raise ContractError("mu must have one entry per answer")
        if not self.confidence_sd > 0:
            raise ContractError("confidence_sd must be positive")


@dataclass
class PoolSpec:
    """Distribution of synthetic questions.

    kind ``fixed`` uses ``thetas`` as given (a float is a binary question's
    probability of answer 0); ``dirichlet`` draws theta ~ Dir(concentration)
    over ``M`` answers; ``mixture`` picks one of ``components`` =
    [[weight, theta], ...] per question, stratified to exact proportions when
    ``stratified`` is set.  Confidence means are ``mu_top`` for the most
    likely answer and ``mu_other`` elsewhere.  A ``wrong_majority_fraction``
    of questions get a true answer that differs from the majority.
    """

    kind: str = "mixture"
    thetas: Optional[list] = None
    M: int = 2
    concentration: float = 1.0
    components: Optional[list] = None
    stratified: bool = True
    mu_top: float = 1.0
    mu_other: float = 0.7
    confidence_sd: float = 0.3
    wrong_majority_fraction: float = 0.0

    @classmethod
    def from_dict(cls, d: dict) -> "PoolSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractError(f"unknown pool-spec keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _theta_vector(t) -> np.ndarray:
    if np.ndim(t) == 0:
        return as_theta([float(t), 1.0 - float(t)])
    return as_theta(t)


def bimodal_spec(easy=0.9, hard=0.6, easy_share=0.8, **kw) -> PoolSpec:
    return PoolSpec(kind="mixture", components=[[easy_share, easy], [1 - easy_share, hard]], **kw)


def generate_pool(spec: PoolSpec, N: Optional[int] = None, seed: int = 0) -> list:
    """Deterministic list of :class:`SyntheticQuestion` for a spec and seed."""
    rng = np.random.default_rng([seed, 0])
    if spec.kind == "fixed":
        if spec.thetas is None:
            raise ContractError("fixed spec needs thetas")
        base = [_theta_vector(t) for t in spec.thetas]
        N = len(base) if N is None else N
        thetas = [base[i % len(base)] for i in range(N)] if base else []
    elif spec.kind == "dirichlet":
        if N is None:
            raise ContractError("dirichlet spec needs N")
        conc = np.broadcast_to(np.asarray(spec.concentration, float), (spec.M,))
        thetas = list(rng.dirichlet(conc, size=N)) if N else []
    elif spec.kind == "mixture":
        if not spec.components or N is None:
            raise ContractError("mixture spec needs components and N")
        w = np.array([c[0] for c in spec.components], float)
        w = w / w.sum()
        comps = [_theta_vector(c[1]) for c in spec.components]
        if spec.stratified:
            counts = np.floor(w * N).astype(int)
            # hand out remaining slots by largest fractional part
            rest = N - counts.sum()
            order = np.argsort(-(w * N - counts), kind="stable")
            counts[order[:rest]] += 1
            labels = np.repeat(np.arange(len(comps)), counts)
            rng.shuffle(labels)
        else:
            labels = rng.choice(len(comps), size=N, p=w)
        thetas = [comps[k] for k in labels]
    else:
        raise ContractError(f"unknown pool kind {spec.kind!r}")
    out = []
    n_wrong = int(round(spec.wrong_majority_fraction * len(thetas)))
    wrong = set(rng.choice(len(thetas), size=n_wrong, replace=False).tolist()) if n_wrong else set()
    for i, t in enumerate(thetas):
        top = int(np.argmax(t))
        mu = tuple(spec.mu_top if m == top else spec.mu_other for m in range(t.size))
        truth = top
        if i in wrong:
            truth = int(np.argsort(-t, kind="stable")[1])
        out.append(SyntheticQuestion(f"q{i:04d}", tuple(t), mu, spec.confidence_sd, truth))
    return out


def sample_traces(q: SyntheticQuestion, n: int, rng) -> tuple:
    """``n`` i.i.d. (answer index, confidence) draws."""
    rng = np.random.default_rng(rng)
    answers = rng.choice(len(q.theta), size=n, p=np.asarray(q.theta))
    conf = rng.normal(np.asarray(q.mu)[answers], q.confidence_sd)
    return answers, conf


def sample_trace(q: SyntheticQuestion, seed) -> tuple:
    a, c = sample_traces(q, 1, seed)
    return int(a[0]), float(c[0])


# ---------------------------------------------------------------------------
# trace pools


@dataclass(frozen=True)
class TraceRecord:
    question_id: str
    answer: Optional[str]
    confidence: Optional[float] = None
    tokens: Optional[int] = None
    source: str = ""

    def to_json(self) -> str:
        return json.dumps({"question_id": self.question_id, "answer": self.answer,
                           "confidence": self.confidence, "tokens": self.tokens, "source": self.source})


class TracePool:
    """Per-question trace records, persisted as one JSON object per line.

    Records with ``answer`` None are unparseable traces; they are kept for
    bookkeeping but ignored by :meth:`answers`.
    """

    def __init__(self, records: Sequence[TraceRecord] = (), truth: Optional[dict] = None):
        self._by_q: dict = {}
        for r in records:
            self._by_q.setdefault(r.question_id, []).append(r)
        self.truth = dict(truth or {})

    def add(self, record: TraceRecord):
        self._by_q.setdefault(record.question_id, []).append(record)

    @property
    def question_ids(self) -> list:
        return list(self._by_q)

    def records(self, qid=None) -> list:
        if qid is not None:
            return list(self._by_q.get(qid, []))
        return [r for rs in self._by_q.values() for r in rs]

    def parsed(self, qid) -> list:
        return [r for r in self._by_q.get(qid, []) if r.answer is not None]

    def answers(self, qid) -> list:
        return [r.answer for r in self.parsed(qid)]

    def confidences(self, qid) -> np.ndarray:
        return np.array([np.nan if r.confidence is None else r.confidence for r in self.parsed(qid)])

    def count(self, qid) -> int:
        return len(self.parsed(qid))

    def __len__(self):
        return len(self._by_q)

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            for r in self.records():
                fh.write(r.to_json() + "\n")
        if self.truth:
            with open(str(path) + ".truth.json", "w") as fh:
                json.dump(self.truth, fh, indent=2, sort_keys=True)

    @classmethod
    def read_jsonl(cls, path) -> "TracePool":
        import os

        pool = cls()
        with open(path) as fh:
            for i, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    d = json.loads(line)
                except json.JSONDecodeError as e:
                    raise PoolParseError(path, i, f"invalid JSON ({e.msg})") from None
                if not isinstance(d, dict) or "question_id" not in d or "answer" not in d:
                    raise PoolParseError(path, i, "record needs question_id and answer")
                conf = d.get("confidence")
                if conf is not None and not isinstance(conf, (int, float)):
                    raise PoolParseError(path, i, "confidence must be a number or null")
                ans = d["answer"]
                pool.add(TraceRecord(str(d["question_id"]), None if ans is None else str(ans),
                                     None if conf is None else float(conf), d.get("tokens"), d.get("source", "")))
        truth_path = str(path) + ".truth.json"
        if os.path.exists(truth_path):
            with open(truth_path) as fh:
                pool.truth = json.load(fh)
        return pool


def build_trace_pool(questions: Sequence[SyntheticQuestion], per_question: int = 128, seed: int = 0) -> TracePool:
    """Sample ``per_question`` traces for every question into a pool."""
    pool = TracePool(truth={q.id: str(q.true_answer) for q in questions if q.true_answer is not None})
    tag = f"synthetic:seed={seed}"
    for i, q in enumerate(questions):
        answers, conf = sample_traces(q, per_question, np.random.default_rng([seed, 1, i]))
        for a, c in zip(answers, conf):
            pool.add(TraceRecord(q.id, str(int(a)), float(c), None, tag))
    return pool


# ---------------------------------------------------------------------------
# voting helpers


def confidence_weighting(confidences, keep_fraction: float = DEFAULT_KEEP) -> np.ndarray:
    """Weights for top-``keep_fraction`` confidence-weighted voting.

    Traces at or above the ``1 - keep_fraction`` quantile (linear
    interpolation) keep their confidence as weight, the rest get 0.
    Negative confidences are floored at 0.
    """
    c = np.asarray(confidences, dtype=float)
    if c.size == 0:
        raise ContractError("need at least one trace")
    if not 0 < keep_fraction <= 1:
        raise ContractError("keep_fraction must lie in (0, 1]")
    if keep_fraction == 1:
        return np.clip(c, 0.0, None)
    thr = np.quantile(c, 1 - keep_fraction)
    return np.where(c >= thr, np.clip(c, 0.0, None), 0.0)


# ---------------------------------------------------------------------------
# evaluation context


class EvalContext:
    """Subsampled universes, references and vote tables for one pool."""

    def __init__(self, pool: TracePool, B_ref: int = 64, repeats: int = 30, seed: int = 0,
                 keep_fraction: float = DEFAULT_KEEP, question_ids: Optional[Sequence[str]] = None):
        self.pool = pool
        self.qids = list(question_ids or pool.question_ids)
        if not self.qids:
            raise ContractError("pool has no questions")
        self.B_ref, self.repeats, self.seed, self.keep = B_ref, repeats, seed, keep_fraction
        N = len(self.qids)
        self.labels, self.M = [], []
        self.codes = np.zeros((repeats, N, B_ref), dtype=np.int64)
        self.conf = np.zeros((repeats, N, B_ref))
        self.priority = []  # [r][q] -> array of label priorities
        self.truth = np.full(N, -1)
        for q, qid in enumerate(self.qids):
            answers = pool.answers(qid)
            if len(answers) < B_ref:
                raise ContractError(f"question {qid} has {len(answers)} parsed traces, fewer than B_ref={B_ref}")
            labels, inv = np.unique(np.asarray(answers, dtype=str), return_inverse=True)
            self.labels.append(list(labels))
            self.M.append(max(len(labels), 2))
            conf = pool.confidences(qid)
            t = pool.truth.get(qid)
            if t is not None and str(t) in self.labels[q]:
                self.truth[q] = self.labels[q].index(str(t))
            pr = []
            for r in range(repeats):
                perm = np.random.default_rng([seed, r, q]).permutation(len(answers))[:B_ref]
                self.codes[r, q] = inv[perm]
                self.conf[r, q] = conf[perm]
                pr.append(np.random.default_rng([seed, r, q, 1]).permutation(self.M[q]))
            self.priority.append(pr)
        self._votes = {}

    @property
    def N(self) -> int:
        return len(self.qids)

    def votes(self, weighted: bool = False) -> np.ndarray:
        """(repeats, N, B_ref + 1) table: vote after the first b universe traces."""
        if weighted not in self._votes:
            R, N, B = self.codes.shape
            out = np.zeros((R, N, B + 1), dtype=np.int64)
            for q in range(N):
                M = self.M[q]
                for r in range(R):
                    onehot = np.zeros((B + 1, M))
                    codes = self.codes[r, q]
                    if weighted:
                        for b in range(1, B + 1):
                            w = confidence_weighting(self.conf[r, q, :b], self.keep)
                            onehot[b] = np.bincount(codes[:b], weights=w, minlength=M)
                    else:
                        onehot[1:] = np.cumsum(np.eye(M)[codes], axis=0)
                    out[r, q] = _vote_rows(onehot, self.priority[q][r])
            self._votes[weighted] = out
        return self._votes[weighted]

    def reference(self, weighted: bool = False) -> np.ndarray:
        return self.votes(weighted)[:, :, self.B_ref]


def _vote_rows(scores: np.ndarray, priority: np.ndarray) -> np.ndarray:
    # argmax of score with exact ties broken by the highest priority
    best = scores.max(axis=1, keepdims=True)
    tied = scores == best
    return np.argmax(np.where(tied, priority[None, :] + 1, 0), axis=1)


@dataclass
class ReferenceReport:
    answers: list  # modal reference label per question
    agreement: np.ndarray  # fraction of repeats agreeing with the modal answer
    per_repeat: np.ndarray  # (repeats, N) label codes


def reference_majority(pool: TracePool, B_ref: int = 64, repeats: int = 30, seed: int = 0,
                       weighted: bool = False, keep_fraction: float = DEFAULT_KEEP) -> ReferenceReport:
    ctx = EvalContext(pool, B_ref, repeats, seed, keep_fraction)
    ref = ctx.reference(weighted)
    answers, agree = [], np.zeros(ctx.N)
    for q in range(ctx.N):
        counts = np.bincount(ref[:, q], minlength=ctx.M[q])
        mode = int(np.argmax(counts))
        answers.append(ctx.labels[q][mode] if mode < len(ctx.labels[q]) else None)
        agree[q] = counts[mode] / repeats
    return ReferenceReport(answers, agree, ref)


# ---------------------------------------------------------------------------
# policies


@dataclass
class PolicyConfig:
    model: Optional[GridModel] = None  # pets-online
    oracle_thetas: Optional[Sequence[float]] = None  # pets-oracle: P(answer label "0") per question
    oracle_bins: int = 10
    replan: bool = True  # pets-online: re-plan per arrival or use the fixed plan
    n_mc: int = 4000  # pets-offline Monte Carlo size (non-binary or weighted)
    alpha0: float = 1.0
    beta0: float = 1.0
    v0: float = 1.0


@dataclass
class PolicyResult:
    policy: str
    weighted: bool
    budgets: list  # average per-question budgets evaluated
    total_traces: list  # mean realised total traces per budget
    consistency: list
    accuracy: Optional[list]
    first_hit: Optional[np.ndarray] = None  # per-repeat traces to full consistency (nan if never)

    @property
    def name(self) -> str:
        return self.policy + (" (conf)" if self.weighted else "")

    @property
    def traces_to_full(self) -> float:
        """Mean first-hit total over repeats (nan if some repeat never got there)."""
        if self.first_hit is None or np.isnan(self.first_hit).any():
            return math.nan
        return float(np.mean(self.first_hit))

    @property
    def traces_to_full_var(self) -> float:
        if self.first_hit is None or np.isnan(self.first_hit).any():
            return math.nan
        return float(np.var(self.first_hit))


def _check_budgets(budgets, B_ref):
    b = [float(x) for x in budgets]
    if not b or any(x < 0 or x > B_ref for x in b):
        raise ContractError(f"budgets must lie in [0, {B_ref}]")
    if sorted(b) != b:
        raise ContractError("budgets must be increasing")
    return b


def _score(ctx, weighted, per_q_budget_rows):
    """per_q_budget_rows: (repeats, N) integer budgets -> (consistency, accuracy) per repeat."""
    votes = ctx.votes(weighted)
    ref = ctx.reference(weighted)
    R, N = per_q_budget_rows.shape
    got = np.take_along_axis(votes, per_q_budget_rows[:, :, None], axis=2)[:, :, 0]
    cons = (got == ref).mean(axis=1)
    acc = None
    if (ctx.truth >= 0).any():
        acc = (got == ctx.truth[None, :]).mean(axis=1)
    return cons, acc


def _uniform(ctx, weighted, budgets):
    cons_l, acc_l, tot = [], [], []
    for b in budgets:
        bq = np.full((ctx.repeats, ctx.N), int(math.floor(b)))
        cons, acc = _score(ctx, weighted, bq)
        cons_l.append(float(cons.mean()))
        acc_l.append(None if acc is None else float(acc.mean()))
        tot.append(float(bq.sum(axis=1).mean()))
    # first hit over every integer budget
    votes, ref = ctx.votes(weighted), ctx.reference(weighted)
    full = (votes == ref[:, :, None]).all(axis=1)  # (R, B_ref + 1)
    first = np.argmax(full, axis=1).astype(float) * ctx.N
    return tot, cons_l, acc_l, first


def _oracle(ctx, weighted, budgets, cfg):
    if cfg.oracle_thetas is None:
        raise ContractError("pets-oracle needs oracle_thetas")
    if any(m != 2 for m in ctx.M) or any(len(lbl) > 2 for lbl in ctx.labels):
        raise ContractError("pets-oracle supports binary pools only")
    model, idx = binary_grid_model(cfg.oracle_thetas, cfg.oracle_bins)
    cons_l, acc_l, tot, rows = [], [], [], []
    for b in budgets:
        plan = greedy_allocate(model, b, max_budget=ctx.B_ref)
        per_q = np.array(plan.budgets)[idx]
        bq = np.broadcast_to(per_q, (ctx.repeats, ctx.N))
        cons, acc = _score(ctx, weighted, bq)
        cons_l.append(float(cons.mean()))
        acc_l.append(None if acc is None else float(acc.mean()))
        tot.append(float(per_q.sum()))
        rows.append((cons, float(per_q.sum())))
    first = np.full(ctx.repeats, np.nan)
    for cons, total in rows:
        hit = np.isnan(first) & (cons == 1.0)
        first[hit] = total
    return tot, cons_l, acc_l, first


def _online_repeat(ctx, weighted, r, avg_budget, cfg):
    """One stream over all questions of repeat ``r``; returns per-question budgets."""
    model = cfg.model
    order = np.random.default_rng([ctx.seed, r, 2]).permutation(ctx.N)
    state = StreamState.start(avg_budget * ctx.N, ctx.N, seed=ctx.seed)
    rng = np.random.default_rng([ctx.seed, r, 3, int(round(avg_budget * 1000))])
    warm = warmup_grids(ctx.codes[r, :, :4]) - 1
    cap = ctx.B_ref - model.offset
    fixed = None if cfg.replan else greedy_allocate(model, max(avg_budget - model.offset, 0.0), cap)
    out = np.zeros(ctx.N, dtype=np.int64)
    for q in order:
        if state.remaining_budget < model.offset:
            # cannot afford the warm-up: spend what is left without gridding
            b = int(math.floor(state.remaining_budget + 1e-9))
            state = StreamState(state.remaining_budget - b, state.remaining_horizon - 1, state.seed, state.t + 1)
        elif fixed is not None:
            b = min(model.offset + fixed.budgets[warm[q]], int(math.floor(state.remaining_budget + 1e-9)))
            state = StreamState(state.remaining_budget - b, state.remaining_horizon - 1, state.seed, state.t + 1)
        else:
            b, state = stream_step(state, model, int(warm[q]), max_budget=cap, rng=rng)
        out[q] = b
    return out


def _online(ctx, weighted, budgets, cfg, stop_at_first_hit=False):
    if cfg.model is None:
        raise ContractError("pets-online needs a grid model")
    if cfg.model.K != 5 or cfg.model.offset != 4:
        raise ContractError("pets-online expects a 5-grid warm-up model with offset 4")
    votes, ref = ctx.votes(weighted), ctx.reference(weighted)
    cons_l, acc_l, tot = [], [], []
    first = np.full(ctx.repeats, np.nan)
    for b in budgets:
        active = [r for r in range(ctx.repeats) if not (stop_at_first_hit and not np.isnan(first[r]))]
        if not active:
            break
        rows = np.zeros((ctx.repeats, ctx.N), dtype=np.int64)
        for r in active:
            rows[r] = _online_repeat(ctx, weighted, r, b, cfg)
        got = np.take_along_axis(votes, rows[:, :, None], axis=2)[:, :, 0]
        cons = (got == ref).mean(axis=1)
        spent = rows.sum(axis=1).astype(float)
        for r in active:
            if np.isnan(first[r]) and cons[r] == 1.0:
                first[r] = spent[r]
        if not stop_at_first_hit:
            cons_l.append(float(cons.mean()))
            tot.append(float(spent.mean()))
            acc_l.append(float((got == ctx.truth[None, :]).mean()) if (ctx.truth >= 0).any() else None)
    return tot, cons_l, acc_l, first


def _offline_answer(runner, q, ctx, r, weighted, n_mc, seed):
    b = runner.beliefs[q]
    if b.M == 2 and not weighted:
        if b.alpha[0] == b.alpha[1]:
            probs = np.array([0.5, 0.5])  # exact tie; betainc is off by an ulp here
        else:
            p0 = float(betainc(b.alpha[1], b.alpha[0], 0.5))
            probs = np.array([p0, 1 - p0])
    else:
        probs = posterior_majority_prob(b, weighted, n_mc, question_seed(seed, q, b.n_obs))
    return int(_vote_rows(probs[None, :], ctx.priority[q][r])[0])


def _offline(ctx, weighted, budgets, cfg):
    ref = ctx.reference(weighted)
    levels = [int(round(b * ctx.N)) for b in budgets]
    H_max = max(levels) if levels else 0
    cons_at = np.zeros((ctx.repeats, len(levels)))
    acc_at = np.zeros((ctx.repeats, len(levels)))
    first = np.full(ctx.repeats, np.nan)
    has_truth = (ctx.truth >= 0).any()
    for r in range(ctx.repeats):
        priors = [QuestionBelief.prior(ctx.M[q], cfg.alpha0, cfg.beta0, cfg.v0) for q in range(ctx.N)]
        codes, conf = ctx.codes[r], ctx.conf[r]
        src = (lambda q, k: (int(codes[q, k]), float(conf[q, k]) if weighted else 0.0))
        seed = int(np.random.SeedSequence([ctx.seed, r, 4]).generate_state(1)[0])
        runner = OKGRunner(priors, src, weighted, cfg.n_mc, seed, capacity=[ctx.B_ref] * ctx.N)
        answers = np.array([_offline_answer(runner, q, ctx, r, weighted, cfg.n_mc, seed) for q in range(ctx.N)])
        ok = answers == ref[r]
        n_ok = int(ok.sum())
        li = 0
        while li < len(levels) and levels[li] == 0:
            cons_at[r, li] = n_ok / ctx.N
            acc_at[r, li] = (answers == ctx.truth).mean()
            li += 1
        if n_ok == ctx.N:
            first[r] = 0
        for h in range(1, H_max + 1):
            q, _, _ = runner.step()
            answers[q] = _offline_answer(runner, q, ctx, r, weighted, cfg.n_mc, seed)
            now = answers[q] == ref[r, q]
            n_ok += int(now) - int(ok[q])
            ok[q] = now
            if n_ok == ctx.N and np.isnan(first[r]):
                first[r] = h
            while li < len(levels) and levels[li] == h:
                cons_at[r, li] = n_ok / ctx.N
                acc_at[r, li] = (answers == ctx.truth).mean()
                li += 1
    tot = [float(h) for h in levels]
    cons_l = [float(x) for x in cons_at.mean(axis=0)]
    acc_l = [float(x) for x in acc_at.mean(axis=0)] if has_truth else [None] * len(levels)
    return tot, cons_l, acc_l, first


def run_policy(policy: str, ctx: EvalContext, budgets: Sequence[float], config: Optional[PolicyConfig] = None,
               weighted: bool = False) -> PolicyResult:
    """Evaluate one policy over a sweep of average per-question budgets.

    Randomness comes only from the context's seed, so results are
    reproducible bit for bit.
    """
    if policy not in POLICIES:
        raise ContractError(f"unknown policy {policy!r}; choose from {POLICIES}")
    cfg = config or PolicyConfig()
    b = _check_budgets(budgets, ctx.B_ref)
    if policy == "uniform":
        tot, cons, acc, first = _uniform(ctx, weighted, b)
    elif policy == "pets-oracle":
        tot, cons, acc, first = _oracle(ctx, weighted, b, cfg)
    elif policy == "pets-online":
        tot, cons, acc, first = _online(ctx, weighted, b, cfg)
    else:
        tot, cons, acc, first = _offline(ctx, weighted, b, cfg)
    if all(a is None for a in acc):
        acc = None
    return PolicyResult(policy, weighted, b, tot, cons, acc, first)


def online_first_hit(ctx: EvalContext, config: PolicyConfig, weighted: bool = False, step: float = 1.0) -> np.ndarray:
    """Per-repeat first-hit totals for pets-online, sweeping the average
    budget upward from the warm-up size and stopping each repeat at its hit."""
    start = float(config.model.offset) if config.model is not None else 0.0
    levels = list(np.arange(start, ctx.B_ref + 1e-9, step))
    if levels[-1] != ctx.B_ref:
        levels.append(float(ctx.B_ref))
    return _online(ctx, weighted, levels, config, stop_at_first_hit=True)[3]


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    results: list = field(default_factory=list)
    repeats: int = 30
    B_ref: int = 64
    n_questions: int = 0

    CSV_FIELDS = ("policy", "weighted", "avg_budget", "total_traces", "consistency", "accuracy",
                  "traces_to_full", "traces_to_full_var")

    def rows(self) -> list:
        out = []
        for res in self.results:
            for i, b in enumerate(res.budgets):
                out.append({
                    "policy": res.policy,
                    "weighted": int(res.weighted),
                    "avg_budget": _fmt(b),
                    "total_traces": _fmt(res.total_traces[i]),
                    "consistency": _fmt(res.consistency[i]),
                    "accuracy": "" if res.accuracy is None or res.accuracy[i] is None else _fmt(res.accuracy[i]),
                    "traces_to_full": _fmt(res.traces_to_full),
                    "traces_to_full_var": _fmt(res.traces_to_full_var),
                })
        return out

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.CSV_FIELDS, lineterminator="\n")
            w.writeheader()
            w.writerows(self.rows())

    def to_svg(self, path, width: int = 640, height: int = 400):
        write_svg(path, [(r.name, r.total_traces, r.consistency) for r in self.results],
                  "total traces", "consistency", width, height)


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return repr(float(x))


PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f")


def write_svg(path, series, xlabel, ylabel, width=640, height=400):
    """Minimal polyline chart; ``series`` is a list of (name, xs, ys)."""
    pad_l, pad_r, pad_t, pad_b = 60, 150, 20, 50
    xs = [x for _, sx, _ in series for x in sx] or [0, 1]
    ys = [y for _, _, sy in series for y in sy] or [0, 1]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(min(ys), 0.0), max(max(ys), 1.0)
    x1 = x1 if x1 > x0 else x0 + 1
    W, H = width - pad_l - pad_r, height - pad_t - pad_b

    def px(x):
        return pad_l + (x - x0) / (x1 - x0) * W

    def py(y):
        return pad_t + H - (y - y0) / (y1 - y0) * H

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect x="{pad_l}" y="{pad_t}" width="{W}" height="{H}" fill="none" stroke="#333"/>']
    for frac in (0, 0.5, 1):
        yv = y0 + frac * (y1 - y0)
        xv = x0 + frac * (x1 - x0)
        parts.append(f'<text x="{pad_l - 6}" y="{py(yv) + 4:.1f}" font-size="11" text-anchor="end">{yv:.2f}</text>')
        parts.append(f'<text x="{px(xv):.1f}" y="{pad_t + H + 16}" font-size="11" text-anchor="middle">{xv:g}</text>')
    parts.append(f'<text x="{pad_l + W / 2}" y="{height - 10}" font-size="13" text-anchor="middle">{xlabel}</text>')
    parts.append(f'<text x="15" y="{pad_t + H / 2}" font-size="13" text-anchor="middle" '
                 f'transform="rotate(-90 15 {pad_t + H / 2})">{ylabel}</text>')
    for k, (name, sx, sy) in enumerate(series):
        color = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(sx, sy))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        ly = pad_t + 16 * (k + 1)
        parts.append(f'<line x1="{pad_l + W + 10}" y1="{ly - 4}" x2="{pad_l + W + 30}" y2="{ly - 4}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{pad_l + W + 35}" y="{ly}" font-size="11">{_xml(name)}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


def _xml(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def pool_answer_counts(pool: TracePool) -> dict:
    return {qid: dict(Counter(pool.answers(qid))) for qid in pool.question_ids}
