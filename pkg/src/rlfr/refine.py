"""Teachers that turn an actor draft into a refined target.

Three kinds share one interface (``refine`` / ``refine_batch``):

* ``oracle`` - minimal rule-based correction toward the synthetic task's exact output,
* ``remote`` - an OpenAI-compatible chat endpoint, with a persistent cache,
* ``fixed``  - a static reference per source that ignores the draft.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .corpus import (
    ENTITY_MARKER,
    ConfigError,
    ParallelExample,
    SyntheticTaskSpec,
    resolve_task,
    target_symbols,
    transduce,
)

log = logging.getLogger(__name__)

TEACHER_KINDS = ("oracle", "remote", "fixed")

REFINE_SYSTEM_PROMPT = """\
You are an expert in Machine Translation and Cultural Localization. Refine a given machine-translated sentence by improving its quality and naturally localizing named entities into the target language only.

Guidelines
- Entity Localization: Translate or adapt all named entities into natural, target-language-only forms. Do not include the source language. Use official or culturally standard localized names.
- Style and Tone: Match the tone of the source (formal, neutral, conversational).
- Fluency: Ensure the result is natural, idiomatic, and fluid.
- Grammar and Accuracy: Fix any awkward grammar or inconsistent wording."""


def user_message(source: Sequence[str], draft: Sequence[str]) -> str:
    return f"Source: {' '.join(source)}\nDraft translation: {' '.join(draft)}"


class RefinementError(RuntimeError):
    def __init__(self, message: str, attempts: Sequence[str] = ()):
        super().__init__(message)
        self.attempts = list(attempts)


@dataclass(frozen=True)
class TeacherConfig:
    kind: str = "oracle"
    endpoint: str | None = None
    model: str | None = None
    api_key_env: str | None = None
    timeout: float = 30.0
    retries: int = 2
    max_concurrency: int = 4
    temperature: float = 0.0
    backoff: float = 0.5
    cache_path: str | None = None

    def __post_init__(self):
        if self.kind not in TEACHER_KINDS:
            raise ConfigError(f"unknown teacher kind {self.kind!r}; expected one of {TEACHER_KINDS}")
        remote_fields = (self.endpoint, self.model)
        if self.kind == "remote" and not all(remote_fields):
            raise ConfigError("remote teacher needs endpoint and model")
        if self.kind != "remote" and (any(remote_fields) or self.api_key_env):
            raise ConfigError(f"{self.kind} teacher does not take endpoint/model/api key settings")
        if self.max_concurrency < 1 or self.retries < 0:
            raise ConfigError("max_concurrency must be >= 1 and retries >= 0")


@dataclass(frozen=True)
class RefinedPair:
    source: tuple[str, ...]
    draft: tuple[str, ...]
    refined: tuple[str, ...]
    kind: str
    edits: tuple[tuple, ...] = ()
    latency: float | None = None
    tokens_used: int | None = None
    cached: bool = False

    def __post_init__(self):
        if not self.refined:
            raise ValueError("refined target must be non-empty")


# -- oracle -----------------------------------------------------------------


def suffix_distances(a: Sequence, b: Sequence) -> list[list[int]]:
    """``S[i][j]`` = edit distance between ``a[i:]`` and ``b[j:]``."""
    m, n = len(a), len(b)
    S = [[0] * (n + 1) for _ in range(m + 1)]
    for i in range(m, -1, -1):
        for j in range(n, -1, -1):
            if i == m:
                S[i][j] = n - j
            elif j == n:
                S[i][j] = m - i
            else:
                S[i][j] = min(S[i + 1][j + 1] + (a[i] != b[j]), S[i + 1][j] + 1, S[i][j + 1] + 1)
    return S


def minimal_edits(draft: Sequence, target: Sequence) -> list[tuple]:
    """A minimum-cost edit script turning ``draft`` into ``target``.

    Ties go to substitution, then deletion, then insertion, and an edit is
    taken as early (leftmost) as optimality allows.  Ops are
    ``("sub", i, tok)``, ``("del", i)`` and ``("ins", i, tok)`` indexed into the draft.
    """
    S = suffix_distances(draft, target)
    i = j = 0
    ops = []
    m, n = len(draft), len(target)
    while i < m or j < n:
        cur = S[i][j]
        if i < m and j < n and draft[i] != target[j] and cur == S[i + 1][j + 1] + 1:
            ops.append(("sub", i, target[j]))
            i, j = i + 1, j + 1
        elif i < m and cur == S[i + 1][j] + 1:
            ops.append(("del", i))
            i += 1
        elif j < n and cur == S[i][j + 1] + 1:
            ops.append(("ins", i, target[j]))
            j += 1
        else:
            i, j = i + 1, j + 1  # match
    return ops


def apply_edits(draft: Sequence, ops: Sequence[tuple]) -> list:
    out = []
    by_pos: dict[int, list[tuple]] = {}
    for op in ops:
        by_pos.setdefault(op[1], []).append(op)
    for i in range(len(draft) + 1):
        keep = True
        for op in by_pos.get(i, []):
            if op[0] == "ins":
                out.append(op[2])
            elif op[0] == "sub":
                out.append(op[2])
                keep = False
            else:
                keep = False
        if keep and i < len(draft):
            out.append(draft[i])
    return out


class OracleTeacher:
    kind = "oracle"

    def __init__(self, task: SyntheticTaskSpec):
        resolve_task(task)
        self.task = task

    def refine(self, source: Sequence[str], draft: Sequence[str]) -> RefinedPair:
        try:
            gold = transduce(self.task, source)
        except ValueError as exc:
            raise RefinementError(f"oracle cannot translate source: {exc}") from exc
        ops = minimal_edits(draft, gold)
        refined = tuple(apply_edits(draft, ops))
        return RefinedPair(tuple(source), tuple(draft), refined, self.kind, edits=tuple(ops))

    def refine_batch(self, pairs):
        return _serial_batch(self, pairs)


# -- fixed references ------------------------------------------------------


class FixedTeacher:
    kind = "fixed"

    def __init__(self, references: Mapping[tuple[str, ...], Sequence[str]]):
        self.references = {tuple(k): tuple(v) for k, v in references.items()}

    def refine(self, source: Sequence[str], draft: Sequence[str]) -> RefinedPair:
        ref = self.references.get(tuple(source))
        if ref is None:
            raise RefinementError(f"no fixed reference for source {' '.join(source)!r}")
        return RefinedPair(tuple(source), tuple(draft), ref, self.kind)

    def refine_batch(self, pairs):
        return _serial_batch(self, pairs)


def paraphrase_references(
    corpus: Sequence[ParallelExample],
    task: SyntheticTaskSpec,
    seed: int,
    token_rate: float = 0.2,
    entity_variant_rate: float = 0.5,
) -> dict[tuple[str, ...], tuple[str, ...]]:
    """Static references that are full rewrites of the exact output.

    Ordinary tokens are swapped for another target symbol at ``token_rate``;
    each entity is rendered in a non-canonical variant at
    ``entity_variant_rate``.  One reference per distinct source.
    """
    rng = random.Random(f"paraphrase:{seed}")
    resolved = resolve_task(task)
    plain = [resolved.mapping[a] for a in resolved.alphabet]
    entity_tokens = sorted(set(target_symbols(task)) - set(plain) - {ENTITY_MARKER})
    refs: dict[tuple[str, ...], tuple[str, ...]] = {}
    for ex in corpus:
        if ex.source in refs:
            continue
        gold = list(transduce(task, ex.source))
        in_entity = [False] * len(gold)
        i = 0
        while i < len(gold):
            if gold[i] == ENTITY_MARKER:
                j = i + 1
                while j < len(gold) and gold[j] not in plain and gold[j] != ENTITY_MARKER:
                    j += 1
                for t in range(i, j):
                    in_entity[t] = True
                if rng.random() < entity_variant_rate and j - i > 1 and entity_tokens:
                    pos = rng.randrange(i + 1, j)
                    gold[pos] = rng.choice([t for t in entity_tokens if t != gold[pos]])
                i = j
            else:
                i += 1
        for t, tok in enumerate(gold):
            if not in_entity[t] and rng.random() < token_rate:
                gold[t] = rng.choice([p for p in plain if p != tok] or plain)
        refs[ex.source] = tuple(gold)
    return refs


# -- remote -----------------------------------------------------------------


def cache_key(kind: str, model: str | None, source: Sequence[str], draft: Sequence[str]) -> str:
    payload = json.dumps([kind, model, list(source), list(draft)], ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class RefinementCache:
    """Append-only JSON-lines store of refinements keyed by content digest."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._entries: dict[str, dict] = {}
        self._load()

    def _load(self) -> None:
        if not self.path.exists():
            return
        good, bad = [], 0
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    if not isinstance(rec, dict) or not rec.get("refined") or "key" not in rec:
                        raise ValueError
                except ValueError:
                    bad += 1
                    continue
                good.append(rec)
                self._entries[rec["key"]] = rec
        if bad:
            log.warning("refinement cache %s: dropped %d corrupt line(s), rebuilding", self.path, bad)
            tmp = self.path.with_suffix(self.path.suffix + ".tmp")
            with open(tmp, "w", encoding="utf-8") as fh:
                for rec in good:
                    fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
            os.replace(tmp, self.path)

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, key: str) -> dict | None:
        return self._entries.get(key)

    def put(self, key: str, source, draft, refined, model) -> None:
        rec = {
            "key": key,
            "source": " ".join(source),
            "draft": " ".join(draft),
            "refined": " ".join(refined),
            "model": model,
            "timestamp": time.time(),
        }
        with self._lock:
            if key in self._entries:
                return
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
            self._entries[key] = rec


class RemoteTeacher:
    kind = "remote"

    def __init__(self, config: TeacherConfig, client=None, cache: RefinementCache | None = None):
        import httpx

        if config.kind != "remote":
            raise ConfigError("RemoteTeacher needs a remote TeacherConfig")
        self.config = config
        self.client = client or httpx.Client(timeout=config.timeout)
        if cache is None and config.cache_path:
            cache = RefinementCache(config.cache_path)
        self.cache = cache
        self.calls = 0
        self._calls_lock = threading.Lock()

    @property
    def url(self) -> str:
        base = self.config.endpoint.rstrip("/")
        return base if base.endswith("/chat/completions") else base + "/chat/completions"

    def _headers(self) -> dict:
        env = self.config.api_key_env
        if not env:
            return {}
        key = os.environ.get(env)
        if not key:
            raise RefinementError(f"environment variable {env} holding the teacher API key is not set")
        return {"Authorization": f"Bearer {key}"}

    def request_body(self, source, draft) -> dict:
        return {
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": REFINE_SYSTEM_PROMPT},
                {"role": "user", "content": user_message(source, draft)},
            ],
            "temperature": self.config.temperature,
        }

    def _call(self, source, draft) -> RefinedPair:
        import httpx

        attempts: list[str] = []
        headers = self._headers()
        for attempt in range(self.config.retries + 1):
            t0 = time.monotonic()
            with self._calls_lock:
                self.calls += 1
            try:
                resp = self.client.post(self.url, json=self.request_body(source, draft), headers=headers, timeout=self.config.timeout)
                resp.raise_for_status()
                data = resp.json()
                content = data["choices"][0]["message"]["content"]
                refined = tuple(str(content).split())
                if not refined:
                    raise ValueError("empty refinement")
                usage = data.get("usage") or {}
                return RefinedPair(
                    tuple(source), tuple(draft), refined, self.kind,
                    latency=time.monotonic() - t0, tokens_used=usage.get("total_tokens"),
                )
            except (httpx.HTTPError, ValueError, KeyError, IndexError, TypeError) as exc:
                attempts.append(f"attempt {attempt + 1}: {type(exc).__name__}: {exc}")
                if attempt < self.config.retries and self.config.backoff > 0:
                    time.sleep(self.config.backoff * 2**attempt)
        raise RefinementError(f"remote refinement failed after {len(attempts)} attempt(s)", attempts)

    def refine(self, source: Sequence[str], draft: Sequence[str]) -> RefinedPair:
        key = cache_key(self.kind, self.config.model, source, draft)
        if self.cache is not None:
            hit = self.cache.get(key)
            if hit is not None:
                return RefinedPair(tuple(source), tuple(draft), tuple(hit["refined"].split()), self.kind, cached=True)
        pair = self._call(source, draft)
        if self.cache is not None:
            self.cache.put(key, source, draft, pair.refined, self.config.model)
        return pair

    def refine_batch(self, pairs):
        pairs = [(tuple(s), tuple(d)) for s, d in pairs]
        if not pairs:
            raise ValueError("refine_batch needs at least one pair")
        unique = list(dict.fromkeys(pairs))

        def one(p):
            try:
                return self.refine(*p)
            except RefinementError as exc:
                return exc

        with ThreadPoolExecutor(max_workers=self.config.max_concurrency) as pool:
            results = dict(zip(unique, pool.map(one, unique)))
        return [results[p] for p in pairs]


def _serial_batch(teacher, pairs) -> list:
    pairs = list(pairs)
    if not pairs:
        raise ValueError("refine_batch needs at least one pair")
    out = []
    for s, d in pairs:
        try:
            out.append(teacher.refine(s, d))
        except RefinementError as exc:
            out.append(exc)
    return out


Teacher = OracleTeacher | FixedTeacher | RemoteTeacher


def make_teacher(
    config: TeacherConfig,
    task: SyntheticTaskSpec | None = None,
    references: Mapping | None = None,
    client=None,
) -> Teacher:
    if config.kind == "oracle":
        if task is None:
            raise ConfigError("oracle teacher needs the synthetic task")
        return OracleTeacher(task)
    if config.kind == "fixed":
        if references is None:
            raise ConfigError("fixed teacher needs static references")
        return FixedTeacher(references)
    return RemoteTeacher(config, client=client)


def refine(teacher: Teacher, source: Sequence[str], draft: Sequence[str]) -> RefinedPair:
    return teacher.refine(source, draft)


def refine_batch(teacher: Teacher, pairs: Sequence[tuple[Sequence[str], Sequence[str]]]) -> list:
    """Refine every pair, keeping input order.

    Failed entries come back as :class:`RefinementError` instances rather than
    aborting the batch.
    """
    return teacher.refine_batch(pairs)
