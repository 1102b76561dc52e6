"""Composite translation reward: quantile-scaled edit similarity blended with a semantic score."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .corpus import ConfigError

log = logging.getLogger(__name__)

ALPHA_PRESETS = {"lexical": 1.0, "semantic": 0.0, "balanced": 0.5}
DEGENERATE_SPREAD = 1e-9


class RewardError(RuntimeError):
    """The semantic scorer could not score a sample."""


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Unit-cost insert/delete/substitute distance."""
    if len(a) < len(b):
        a, b = b, a
    # a shared prefix or suffix never changes the distance
    lo, hi_a, hi_b = 0, len(a), len(b)
    while lo < hi_b and a[lo] == b[lo]:
        lo += 1
    while hi_b > lo and a[hi_a - 1] == b[hi_b - 1]:
        hi_a -= 1
        hi_b -= 1
    a, b = a[lo:hi_a], b[lo:hi_b]
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        left = i
        for j, y in enumerate(b):
            v = prev[j] if x == y else prev[j] + 1
            up = prev[j + 1] + 1
            if up < v:
                v = up
            if left + 1 < v:
                v = left + 1
            cur.append(v)
            left = v
        prev = cur
    return prev[-1]


def lexical_similarity(draft: Sequence, refined: Sequence) -> float:
    """``1 - dist / max(len)``; two empty sequences count as identical."""
    longest = max(len(draft), len(refined))
    if longest == 0:
        log.debug("lexical_similarity called on two empty sequences")
        return 1.0
    return 1.0 - levenshtein(draft, refined) / longest


@dataclass(frozen=True)
class BatchScaleStats:
    mean: float
    q90: float
    n: int


def fit_scale_stats(zs: Sequence[float]) -> BatchScaleStats:
    if len(zs) < 2:
        raise ConfigError("scale statistics need at least two similarity values")
    arr = np.asarray(zs, dtype=np.float64)
    return BatchScaleStats(float(arr.mean()), float(np.percentile(arr, 90, method="linear")), len(arr))


def scale_z(z: float, stats: BatchScaleStats) -> float:
    """Map a similarity to [-1, 1] against the batch mean and 90th percentile."""
    if z < stats.mean:
        return -1.0
    spread = stats.q90 - stats.mean
    if spread < DEGENERATE_SPREAD or z >= stats.q90:
        return 1.0
    return (z - stats.mean) / spread


class SemanticScorer(Protocol):
    def score(self, source: Sequence[str], hypothesis: Sequence[str], reference: Sequence[str] | None) -> float:
        """Adequacy in [0, 1]."""


def _char_ngrams(text: str, n: int) -> Counter:
    return Counter(text[i : i + n] for i in range(len(text) - n + 1))


class ChrFScorer:
    """Character n-gram F-score, orders 1..max_order, whitespace ignored.

    Precision and recall are averaged over the orders both strings are long
    enough to have, then combined into one F-beta.  With
    ``reference_free=True`` the hypothesis is scored against the source
    instead of the refinement.
    """

    def __init__(self, max_order: int = 4, beta: float = 2.0, reference_free: bool = False):
        self.max_order = max_order
        self.beta = beta
        self.reference_free = reference_free

    def score(self, source, hypothesis, reference=None) -> float:
        ref = source if self.reference_free or reference is None else reference
        hyp_s, ref_s = "".join(hypothesis), "".join(ref)
        if hyp_s == ref_s:
            return 1.0
        prec = rec = 0.0
        orders = 0
        for n in range(1, self.max_order + 1):
            h, r = _char_ngrams(hyp_s, n), _char_ngrams(ref_s, n)
            if not h or not r:
                continue
            match = sum((h & r).values())
            prec += match / sum(h.values())
            rec += match / sum(r.values())
            orders += 1
        if orders == 0 or prec + rec == 0:
            return 0.0
        prec, rec = prec / orders, rec / orders
        b2 = self.beta**2
        return (1 + b2) * prec * rec / (b2 * prec + rec)


class RemoteScorer:
    """Scores via ``POST {source, hypothesis, reference} -> {score}``."""

    def __init__(self, url: str, timeout: float = 10.0, client=None):
        import httpx

        self.url = url
        self.client = client or httpx.Client(timeout=timeout)

    def score(self, source, hypothesis, reference=None) -> float:
        body = {
            "source": " ".join(source),
            "hypothesis": " ".join(hypothesis),
            "reference": " ".join(reference) if reference is not None else None,
        }
        try:
            resp = self.client.post(self.url, json=body)
            resp.raise_for_status()
            value = float(resp.json()["score"])
        except Exception as exc:  # noqa: BLE001 - any transport or payload failure
            raise RewardError(f"remote scorer failed: {exc}") from exc
        if not 0.0 <= value <= 1.0 or math.isnan(value):
            raise RewardError(f"remote scorer returned {value}, outside [0, 1]")
        return value


def semantic_score(scorer: SemanticScorer, source, draft, refined) -> float:
    """Adequacy of ``draft`` mapped linearly from [0, 1] to [-1, 1]."""
    return 2.0 * scorer.score(source, draft, refined) - 1.0


@dataclass(frozen=True)
class RewardBreakdown:
    z: float
    r_edit: float
    r_sem: float
    alpha: float
    r: float


def resolve_alpha(alpha: float | str) -> float:
    if isinstance(alpha, str):
        if alpha in ALPHA_PRESETS:
            return ALPHA_PRESETS[alpha]
        try:
            alpha = float(alpha)
        except ValueError:
            raise ConfigError(f"unknown alpha preset {alpha!r}; expected one of {sorted(ALPHA_PRESETS)}") from None
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    return float(alpha)


def composite_reward(z: float, r_edit: float, r_sem: float, alpha: float | str) -> RewardBreakdown:
    a = resolve_alpha(alpha)
    return RewardBreakdown(z, r_edit, r_sem, a, (1.0 - a) * r_sem + a * r_edit)


def score_batch(
    drafts: Sequence[Sequence[str]],
    refinements: Sequence[Sequence[str]],
    sources: Sequence[Sequence[str]],
    alpha: float | str,
    scorer: SemanticScorer | None = None,
) -> tuple[list[RewardBreakdown], BatchScaleStats]:
    """Reward every (draft, refinement) pair of one rollout batch.

    The scale statistics are fitted on this batch's own similarity values.
    """
    scorer = scorer or ChrFScorer()
    zs = [lexical_similarity(d, r) for d, r in zip(drafts, refinements)]
    stats = fit_scale_stats(zs)
    out = []
    for z, src, d, r in zip(zs, sources, drafts, refinements):
        out.append(composite_reward(z, scale_z(z, stats), semantic_score(scorer, src, d, r), alpha))
    return out, stats
