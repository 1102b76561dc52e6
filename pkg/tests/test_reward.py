import math
import random

import httpx
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rlfr.corpus import ConfigError
from rlfr.reward import (
    ALPHA_PRESETS,
    BatchScaleStats,
    ChrFScorer,
    RemoteScorer,
    RewardError,
    composite_reward,
    fit_scale_stats,
    levenshtein,
    lexical_similarity,
    resolve_alpha,
    scale_z,
    score_batch,
    semantic_score,
)

sacrebleu = pytest.importorskip("sacrebleu")


# -- edit distance -----------------------------------------------------------


def test_levenshtein_examples():
    assert levenshtein("kitten", "sitting") == 3
    assert levenshtein(list("abc"), list("abc")) == 0
    assert levenshtein(list("abcd"), []) == 4
    assert levenshtein([], list("ab")) == 2


def brute_force_distance(a, b):
    """Shortest edit path by exhaustive breadth-first search over sequences."""
    symbols = set(a) | set(b) or {"a"}
    frontier, seen, d = {tuple(a)}, {tuple(a)}, 0
    target = tuple(b)
    while target not in frontier:
        nxt = set()
        for s in frontier:
            for i in range(len(s) + 1):
                for c in symbols:
                    nxt.add(s[:i] + (c,) + s[i:])
                if i < len(s):
                    nxt.add(s[:i] + s[i + 1 :])
                    for c in symbols:
                        nxt.add(s[:i] + (c,) + s[i + 1 :])
        frontier = nxt - seen
        seen |= frontier
        d += 1
    return d


@settings(max_examples=150, deadline=None)
@given(st.lists(st.sampled_from("xyz"), max_size=4), st.lists(st.sampled_from("xyz"), max_size=4))
def test_levenshtein_matches_brute_force(a, b):
    assert levenshtein(a, b) == brute_force_distance(a, b)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 3), max_size=7), st.lists(st.integers(0, 3), max_size=7),
       st.lists(st.integers(0, 3), max_size=7))
def test_levenshtein_is_a_metric(a, b, c):
    assert levenshtein(a, b) == levenshtein(b, a)
    assert levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c)
    assert abs(len(a) - len(b)) <= levenshtein(a, b) <= max(len(a), len(b))


def test_lexical_similarity_examples():
    assert lexical_similarity(list("abcd"), list("abcd")) == 1.0
    assert lexical_similarity(list("abcd"), list("abcdefgh")) == 0.5
    assert lexical_similarity(list("abc"), list("xyz")) == 0.0
    assert lexical_similarity([], []) == 1.0


# -- scaling -----------------------------------------------------------------


def test_fit_scale_stats_examples():
    s = fit_scale_stats([0.0, 1.0])
    assert (s.mean, s.q90) == (0.5, pytest.approx(0.9))
    c = fit_scale_stats([0.3] * 5)
    assert c.mean == pytest.approx(0.3) and c.q90 == pytest.approx(0.3)
    with pytest.raises(ConfigError):
        fit_scale_stats([0.2])


def linear_percentile(values, q):
    """Order-statistic interpolation at rank q/100 * (n - 1)."""
    xs = sorted(values)
    pos = q / 100 * (len(xs) - 1)
    lo = math.floor(pos)
    hi = min(lo + 1, len(xs) - 1)
    return xs[lo] + (pos - lo) * (xs[hi] - xs[lo])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=40), st.randoms())
def test_scale_stats_match_oracle_and_ignore_order(zs, rnd):
    s = fit_scale_stats(zs)
    assert s.mean == pytest.approx(sum(zs) / len(zs))
    assert s.q90 == pytest.approx(linear_percentile(zs, 90), abs=1e-12)
    shuffled = zs[:]
    rnd.shuffle(shuffled)
    t = fit_scale_stats(shuffled)
    assert t.mean == pytest.approx(s.mean, abs=1e-15) and t.q90 == s.q90


def test_scale_z_examples():
    s = BatchScaleStats(0.6, 0.9, 10)
    assert scale_z(0.75, s) == pytest.approx(0.5)
    assert scale_z(0.6, s) == 0.0
    assert scale_z(0.9, s) == 1.0 and scale_z(0.95, s) == 1.0
    assert scale_z(0.59, s) == -1.0
    degenerate = BatchScaleStats(0.4, 0.4, 3)
    assert scale_z(0.4, degenerate) == 1.0 and scale_z(0.39, degenerate) == -1.0


@settings(max_examples=300, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_scale_z_monotone_and_bounded(mean, spread, z1, z2):
    s = BatchScaleStats(mean, mean + spread * (1 - mean), 2)
    lo, hi = sorted((z1, z2))
    assert -1.0 <= scale_z(lo, s) <= scale_z(hi, s) <= 1.0


# -- semantic score ----------------------------------------------------------


def test_chrf_examples():
    s = ChrFScorer()
    assert s.score(None, ["a", "b"], ["a", "b"]) == 1.0
    assert s.score(None, ["a", "b"], ["x", "y"]) == 0.0
    assert s.score(None, [], []) == 1.0
    assert s.score(None, [], ["a"]) == 0.0


@settings(max_examples=300, deadline=None)
@given(st.lists(st.sampled_from(["a", "b", "c", "@", "Ba", "Kel"]), max_size=8),
       st.lists(st.sampled_from(["a", "b", "c", "@", "Ba", "Kel"]), min_size=1, max_size=8))
def test_chrf_matches_sacrebleu(hyp, ref):
    oracle = sacrebleu.metrics.CHRF(char_order=4, word_order=0, beta=2)
    expected = oracle.sentence_score(" ".join(hyp), [" ".join(ref)]).score / 100
    assert ChrFScorer().score(None, hyp, ref) == pytest.approx(expected, abs=1e-12)


def test_chrf_reference_free_uses_source():
    s = ChrFScorer(reference_free=True)
    assert s.score(["a", "b"], ["a", "b"], ["x"]) == 1.0


def test_semantic_score_linear_map():
    class Half:
        def score(self, source, hypothesis, reference):
            return 0.5

    assert semantic_score(Half(), ["a"], ["b"], ["c"]) == 0.0
    assert semantic_score(ChrFScorer(), ["a"], ["b", "c"], ["b", "c"]) == 1.0
    assert semantic_score(ChrFScorer(), ["a"], ["b"], ["c"]) == -1.0


def test_composite_reward_presets():
    assert composite_reward(0.7, 0.2, -0.4, "lexical").r == 0.2
    assert composite_reward(0.7, 0.2, -0.4, "semantic").r == -0.4
    assert composite_reward(0.7, 1.0, 0.5, 0.5).r == pytest.approx(0.75)
    assert ALPHA_PRESETS == {"lexical": 1.0, "semantic": 0.0, "balanced": 0.5}
    with pytest.raises(ConfigError):
        resolve_alpha(1.5)
    with pytest.raises(ConfigError):
        resolve_alpha("heavy")


def test_score_batch_fits_stats_on_its_own_batch():
    drafts = [["a", "b"], ["a", "c"], ["x", "y"]]
    refs = [["a", "b"]] * 3
    rewards, stats = score_batch(drafts, refs, [["s"]] * 3, "lexical")
    zs = [1.0, 0.5, 0.0]
    assert stats == fit_scale_stats(zs)
    assert [r.r for r in rewards] == [scale_z(z, stats) for z in zs]


# -- remote scorer -----------------------------------------------------------


def scorer_with(handler):
    return RemoteScorer("http://scorer/score", client=httpx.Client(transport=httpx.MockTransport(handler)))


def test_remote_scorer_wire_format():
    seen = {}

    def handler(request):
        seen.update(__import__("json").loads(request.content))
        return httpx.Response(200, json={"score": 0.25})

    assert scorer_with(handler).score(["s", "t"], ["h"], ["r", "q"]) == 0.25
    assert seen == {"source": "s t", "hypothesis": "h", "reference": "r q"}


@pytest.mark.parametrize("response", [
    httpx.Response(500),
    httpx.Response(200, json={"nope": 1}),
    httpx.Response(200, json={"score": 1.5}),
])
def test_remote_scorer_failures(response):
    with pytest.raises(RewardError):
        scorer_with(lambda request: response).score(["s"], ["h"], ["r"])
