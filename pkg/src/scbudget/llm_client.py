"""Live trace collection against a chat-completions style HTTP endpoint."""

from __future__ import annotations

import math
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from typing import Optional, Sequence

import requests

from .errors import ContractError, TraceSourceError
from .simulator import TracePool, TraceRecord

DEFAULT_WINDOW = 2048
SCHEMES = ("geometric", "token-prob", "topk-neg-mean")
MODES = ("boxed", "letter", "numeric")
_MODE_ALIASES = {"final-line-option-letter": "letter"}
MIN_CONFIDENCE = 1e-300


# ---------------------------------------------------------------------------
# answer extraction

_NUM = re.compile(r"[-+]?\d[\d,]*(?:\.\d+)?|[-+]?\.\d+")


def _normalize_number(s: str) -> Optional[str]:
    s = s.replace(",", "").strip()
    try:
        d = Decimal(s)
    except InvalidOperation:
        return None
    if d == 0:
        return "0"
    out = format(d.normalize(), "f")
    return out


def _normalize(s: str) -> Optional[str]:
    s = " ".join(s.strip().strip("$").split())
    if not s:
        return None
    if _NUM.fullmatch(s):
        return _normalize_number(s)
    if re.fullmatch(r"\(?[A-Za-z]\)?", s):
        return s.strip("()").upper()
    return s


def _last_boxed(text: str) -> Optional[str]:
    start = text.rfind("\\boxed{")
    if start < 0:
        return None
    i = start + len("\\boxed{")
    depth = 1
    for j in range(i, len(text)):
        if text[j] == "{":
            depth += 1
        elif text[j] == "}":
            depth -= 1
            if depth == 0:
                return text[i:j]
    return None


_LETTER_AFTER_ANSWER = re.compile(r"answer\s*(?:is)?\s*[:\-]?\s*\(?([A-Ja-j])\)?(?![A-Za-z])", re.I)


def extract_answer(text: str, mode: str = "boxed") -> Optional[str]:
    """Normalized answer string, or None when the text has no parseable answer.

    ``boxed`` takes the last ``\\boxed{...}``; ``letter`` reads an option
    letter from the final non-empty line; ``numeric`` takes the last number.
    """
    mode = _MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ContractError(f"unknown extraction mode {mode!r}")
    if not text:
        return None
    if mode == "boxed":
        inner = _last_boxed(text)
        return None if inner is None else _normalize(inner)
    if mode == "letter":
        lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
        if not lines:
            return None
        last = lines[-1]
        m = _LETTER_AFTER_ANSWER.search(last)
        if m:
            return m.group(1).upper()
        bare = re.fullmatch(r"\**\(?([A-Ja-j])\)?[.\s*]*", last)
        return bare.group(1).upper() if bare else None
    nums = _NUM.findall(text)
    return _normalize_number(nums[-1]) if nums else None


# ---------------------------------------------------------------------------
# confidence


def tail_confidence(logprobs: Sequence, window: int = DEFAULT_WINDOW, scheme: str = "geometric") -> float:
    """Mean confidence over the last ``min(window, len)`` tokens.

    Schemes: ``geometric`` is exp of the mean chosen-token log-probability;
    ``token-prob`` is the mean chosen-token probability; ``topk-neg-mean``
    expects per-token lists of top-k log-probabilities and averages their
    negated means.  The result is floored at a tiny positive value.
    """
    if window < 1:
        raise ContractError("window must be >= 1")
    if len(logprobs) == 0:
        raise ContractError("need at least one token")
    tail = logprobs[-window:]
    if scheme == "geometric":
        c = math.exp(math.fsum(float(x) for x in tail) / len(tail))
    elif scheme == "token-prob":
        c = math.fsum(math.exp(float(x)) for x in tail) / len(tail)
    elif scheme == "topk-neg-mean":
        per_tok = []
        for top in tail:
            if len(top) == 0:
                raise ContractError("empty top-k list")
            per_tok.append(-math.fsum(float(x) for x in top) / len(top))
        c = math.fsum(per_tok) / len(per_tok)
    else:
        raise ContractError(f"unknown confidence scheme {scheme!r}")
    return max(c, MIN_CONFIDENCE)


# ---------------------------------------------------------------------------
# jobs


@dataclass
class SamplingJob:
    endpoint: str  # full chat-completions URL
    model: str
    question: str
    question_id: str
    traces: int = 1
    prompt_template: str = "{question}"
    temperature: float = 0.7
    max_tokens: int = 4096
    concurrency: int = 4
    max_attempts: int = 3
    backoff: float = 0.5
    timeout: float = 120.0
    answer_mode: str = "boxed"
    logprobs: bool = True
    top_logprobs: int = 0
    confidence_scheme: str = "geometric"
    window: int = DEFAULT_WINDOW
    api_key_env: str = "SCBUDGET_API_KEY"
    job_id: str = "default"

    def __post_init__(self):
        if self.traces < 1:
            raise ContractError("traces must be >= 1")
        if self.concurrency < 1:
            raise ContractError("concurrency must be >= 1")
        if not self.temperature > 0:
            raise ContractError("temperature must be positive for i.i.d. sampling")
        if self.max_attempts < 1:
            raise ContractError("max_attempts must be >= 1")
        if self.confidence_scheme not in SCHEMES:
            raise ContractError(f"unknown confidence scheme {self.confidence_scheme!r}")
        if self.confidence_scheme == "topk-neg-mean" and self.top_logprobs < 1:
            raise ContractError("topk-neg-mean needs top_logprobs >= 1")
        if _MODE_ALIASES.get(self.answer_mode, self.answer_mode) not in MODES:
            raise ContractError(f"unknown extraction mode {self.answer_mode!r}")

    @property
    def source_tag(self) -> str:
        return f"live:{self.job_id}"

    def payload(self) -> dict:
        p = {
            "model": self.model,
            "messages": [{"role": "user", "content": self.prompt_template.format(question=self.question)}],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }
        if self.logprobs:
            p["logprobs"] = True
            if self.top_logprobs:
                p["top_logprobs"] = self.top_logprobs
        return p


@dataclass
class RawTrace:
    text: str
    answer: Optional[str]
    logprobs: Optional[tuple] = None
    confidence: Optional[float] = None
    latency: float = 0.0
    tokens: Optional[int] = None
    attempts: int = 1

    @property
    def parseable(self) -> bool:
        return self.answer is not None


@dataclass
class CollectResult:
    traces: list = field(default_factory=list)  # RawTrace in index order
    records: list = field(default_factory=list)  # TraceRecord appended to the pool
    requested: int = 0
    errors: list = field(default_factory=list)

    @property
    def parsed(self) -> int:
        return sum(1 for t in self.traces if t.parseable)

    @property
    def shortfall(self) -> int:
        return max(self.requested - self.parsed, 0)


def _token_logprobs(choice: dict, scheme: str):
    lp = choice.get("logprobs") or {}
    content = lp.get("content") if isinstance(lp, dict) else None
    if not content:
        return None
    if scheme == "topk-neg-mean":
        return tuple(tuple(t["logprob"] for t in tok.get("top_logprobs") or [tok]) for tok in content)
    return tuple(float(tok["logprob"]) for tok in content)


def parse_response(body: dict, job: SamplingJob, latency: float = 0.0, attempts: int = 1) -> RawTrace:
    try:
        choice = body["choices"][0]
        text = choice["message"]["content"] or ""
    except (KeyError, IndexError, TypeError):
        raise TraceSourceError("malformed completion response") from None
    lps = _token_logprobs(choice, job.confidence_scheme)
    conf = tail_confidence(lps, job.window, job.confidence_scheme) if lps else None
    usage = body.get("usage") or {}
    tokens = usage.get("completion_tokens", len(lps) if lps else None)
    return RawTrace(text, extract_answer(text, job.answer_mode), lps, conf, latency, tokens, attempts)


class _Sampler:
    def __init__(self, job: SamplingJob, session_factory=requests.Session):
        self.job = job
        self.key = os.environ.get(job.api_key_env)
        self._local = threading.local()
        self._factory = session_factory

    def _session(self):
        s = getattr(self._local, "session", None)
        if s is None:
            s = self._local.session = self._factory()
        return s

    def _post(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.key:
            headers["Authorization"] = f"Bearer {self.key}"
        try:
            r = self._session().post(self.job.endpoint, json=self.job.payload(), headers=headers,
                                     timeout=self.job.timeout)
        except requests.RequestException as e:
            raise TraceSourceError(f"request failed: {e}") from None
        if r.status_code != 200:
            raise TraceSourceError(f"HTTP {r.status_code}: {r.text[:200]}")
        try:
            return r.json()
        except ValueError:
            raise TraceSourceError("response is not JSON") from None

    def sample(self, index: int):
        """One trace, retrying transport errors and unparseable answers.

        Returns (RawTrace or None, last error message or None).
        """
        last_trace, last_err = None, None
        for attempt in range(1, self.job.max_attempts + 1):
            t0 = time.perf_counter()
            try:
                body = self._post()
                trace = parse_response(body, self.job, time.perf_counter() - t0, attempt)
            except TraceSourceError as e:
                last_err = f"trace {index}: {e}"
            else:
                if trace.parseable:
                    return trace, None
                last_trace = trace
            if attempt < self.job.max_attempts and self.job.backoff > 0:
                time.sleep(self.job.backoff * 2 ** (attempt - 1))
        return last_trace, (None if last_trace is not None else last_err)


def collect(job: SamplingJob, pool: Optional[TracePool] = None, out_path=None) -> CollectResult:
    """Sample up to ``job.traces`` parsed traces for one question.

    Traces this job already placed in ``pool`` (matched by source tag) count
    toward the request, so re-running a finished job adds nothing.  Requests
    run on at most ``job.concurrency`` threads; results are appended in trace
    index order by the calling thread.  Unparseable answers that exhaust the
    retry cap are stored with answer None; traces that never got a response
    are reported in ``errors`` and count toward the shortfall.  If no request
    succeeds at all the last transport error is raised.
    """
    pool = pool if pool is not None else TracePool()
    have = sum(1 for r in pool.parsed(job.question_id) if r.source == job.source_tag)
    need = max(job.traces - have, 0)
    res = CollectResult(requested=need)
    if need == 0:
        return res
    sampler = _Sampler(job)
    with ThreadPoolExecutor(max_workers=job.concurrency) as ex:
        outcomes = list(ex.map(sampler.sample, range(need)))
    for trace, err in outcomes:
        if trace is None:
            res.errors.append(err)
            continue
        res.traces.append(trace)
        rec = TraceRecord(job.question_id, trace.answer, trace.confidence, trace.tokens, job.source_tag)
        pool.add(rec)
        res.records.append(rec)
    if not res.traces and res.errors:
        raise TraceSourceError(res.errors[-1])
    if out_path is not None and res.records:
        with open(out_path, "a") as fh:
            for rec in res.records:
                fh.write(rec.to_json() + "\n")
    return res
