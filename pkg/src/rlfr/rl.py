"""Critic-free REINFORCE++ training against teacher refinements.

One iteration: snapshot the actor, sample ``k`` drafts per prompt, have the
teacher refine each draft, score the drafts, then take ``inner_epochs``
gradient steps on the batch-normalised, ratio-clipped surrogate.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corpus import ConfigError, ParallelExample
from .evaluation import evaluate
from .grad import SGD, NonFiniteGradient, Tape
from .policy import (
    Hypothesis,
    PolicyParams,
    PolicySnapshot,
    batch_logprobs,
    categorical_kl,
    render_prompt,
    sample_batch,
    save_checkpoint,
)
from .refine import RefinedPair, RefinementError
from .reward import (
    BatchScaleStats,
    ChrFScorer,
    RewardBreakdown,
    RewardError,
    SemanticScorer,
    composite_reward,
    fit_scale_stats,
    lexical_similarity,
    resolve_alpha,
    scale_z,
    semantic_score,
)

log = logging.getLogger(__name__)

MODES = ("rlfr", "fixed-ref")


class TrainingAborted(RuntimeError):
    pass


class ContractViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    k: int = 4
    rollout_batch: int = 32
    alpha: str | float = "balanced"
    beta: float = 0.02
    eps_clip: float = 0.2
    eps_stat: float = 1e-6
    lr: float = 0.05
    inner_epochs: int = 1
    iterations: int = 300
    seed: int = 0
    mode: str = "rlfr"
    temperature: float = 1.0
    max_grad_norm: float | None = 1.0
    max_drop_rate: float = 0.5
    eval_every: int = 10
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.k < 1 or self.rollout_batch < 1:
            raise ConfigError("k and rollout_batch must be at least 1")
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")
        if not 0.0 < self.eps_clip < 1.0:
            raise ConfigError("eps_clip must lie in (0, 1)")
        if self.eps_stat <= 0 or self.lr <= 0 or self.temperature <= 0:
            raise ConfigError("eps_stat, lr and temperature must be positive")
        if self.inner_epochs < 1 or self.iterations < 0:
            raise ConfigError("inner_epochs must be >= 1 and iterations >= 0")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        resolve_alpha(self.alpha)


@dataclass
class RolloutItem:
    example: ParallelExample
    prompt: list[int]
    hypotheses: list[Hypothesis]
    refinements: list[RefinedPair]
    rewards: list[RewardBreakdown]


@dataclass
class RolloutBatch:
    items: list[RolloutItem]
    snapshot: PolicySnapshot
    stats: BatchScaleStats
    n_dropped: int = 0
    old_dists: np.ndarray | None = field(default=None, repr=False)  # (H, T, V) snapshot log-distributions

    def __post_init__(self):
        for it in self.items:
            if not len(it.hypotheses) == len(it.refinements) == len(it.rewards):
                raise ContractViolation("every hypothesis needs exactly one refinement and one reward")

    @property
    def hypotheses(self) -> list[Hypothesis]:
        return [h for it in self.items for h in it.hypotheses]

    @property
    def prompts(self) -> list[list[int]]:
        return [it.prompt for it in self.items for _ in it.hypotheses]

    @property
    def rewards(self) -> np.ndarray:
        return np.array([r.r for it in self.items for r in it.rewards])

    def padded(self) -> tuple[np.ndarray, np.ndarray]:
        """Old log-probs (H, T) and the token mask."""
        hyps = self.hypotheses
        T = max(len(h.tokens) for h in hyps)
        old = np.zeros((len(hyps), T))
        mask = np.zeros((len(hyps), T), dtype=bool)
        for i, h in enumerate(hyps):
            old[i, : len(h.tokens)] = h.logprobs
            mask[i, : len(h.tokens)] = True
        return old, mask


@dataclass
class AdvantageTensors:
    raw: np.ndarray  # A, (H, T)
    mask: np.ndarray
    mean: float
    std: float
    eps_stat: float
    normalized: np.ndarray  # A-hat
    ratios: np.ndarray  # rho
    eps_clip: float
    clipped: np.ndarray  # z


@dataclass(frozen=True)
class StepDiagnostics:
    grad_norm: float
    mean_ratio: float
    clip_fraction: float
    skipped: bool = False


@dataclass(frozen=True)
class MetricsRecord:
    iteration: int
    mean_reward: float
    mean_resp_len: float
    rollout_adequacy: float
    mean_kl: float
    clip_fraction: float
    mean_ratio: float
    grad_norm: float
    n_samples: int
    n_dropped: int
    eval_adequacy: float | None = None
    eval_exact_match: float | None = None
    eval_entity_acc: float | None = None


METRICS_COLUMNS = tuple(f.name for f in fields(MetricsRecord))


def _tail_sums(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """``out[:, t] = sum_{j >= t} x[:, j]`` over masked entries."""
    x = np.where(mask, x, 0.0)
    return np.where(mask, np.cumsum(x[:, ::-1], axis=1)[:, ::-1], 0.0)


def current_logprobs(params: PolicyParams, batch: RolloutBatch, tape: Tape | None = None):
    targets = [list(h.tokens) for h in batch.hypotheses]
    return batch_logprobs(params, batch.prompts, targets, tape)


def compute_raw_advantages(
    batch: RolloutBatch, params: PolicyParams, beta: float, current=None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-token ``R_i - beta * sum_{j>=t} KL_j``; returns (A, mask, per-position KL)."""
    version = batch.snapshot.version
    if any(h.snapshot_version != version for h in batch.hypotheses):
        raise ContractViolation("hypotheses were not sampled from the batch's snapshot")
    _, mask = batch.padded()
    R = batch.rewards
    if beta == 0:
        return np.where(mask, R[:, None], 0.0), mask, np.zeros(mask.shape)
    if batch.old_dists is None:
        batch.old_dists = current_logprobs(batch.snapshot, batch).dists
    cur = current if current is not None else current_logprobs(params, batch)
    kl = np.where(mask, categorical_kl(cur.dists, batch.old_dists), 0.0)
    return np.where(mask, R[:, None] - beta * _tail_sums(kl, mask), 0.0), mask, kl


def normalize_advantages(
    A: np.ndarray, eps_stat: float = 1e-6, mask: np.ndarray | None = None
) -> tuple[np.ndarray, float, float]:
    """Centre and scale by the statistics over all ``N`` masked tokens.

    ``eps_stat`` floors the variance, so a constant batch gives
    ``sigma = sqrt(eps_stat)`` and any other batch is scaled to unit std.
    """
    A = np.asarray(A, dtype=np.float64)
    mask = np.ones(A.shape, dtype=bool) if mask is None else mask
    vals = A[mask]
    if vals.size < 2:
        raise ConfigError("advantage normalisation needs at least two tokens")
    mu = float(vals.mean())
    sigma = float(np.sqrt(max(((vals - mu) ** 2).mean(), eps_stat)))
    return np.where(mask, (A - mu) / sigma, 0.0), mu, sigma


def clip_terms(ratios: np.ndarray, adv: np.ndarray, eps_clip: float) -> np.ndarray:
    return np.clip(ratios, 1.0 - eps_clip, 1.0 + eps_clip) * adv


def clipped_terms(
    params: PolicyParams, batch: RolloutBatch, adv_hat: np.ndarray, eps_clip: float, current=None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (z, rho, keep) where ``keep`` drops rows whose ratio is not finite.

    When ``params`` still equal the batch snapshot the ratio is exactly 1; the
    recorded sampling log-probs would only add rounding noise.
    """
    old, mask = batch.padded()
    if _same_weights(params, batch.snapshot):
        rho = np.ones(mask.shape)
    else:
        cur = current if current is not None else current_logprobs(params, batch)
        with np.errstate(over="ignore", invalid="ignore"):
            rho = np.where(mask, np.exp(cur.values - old), 1.0)
    bad = ~np.isfinite(rho).all(axis=1)
    if bad.any():
        log.warning("dropping %d sample(s) with non-finite importance ratios", int(bad.sum()))
    keep = mask & ~bad[:, None]
    rho = np.where(keep, rho, 1.0)
    return np.where(keep, clip_terms(rho, adv_hat, eps_clip), 0.0), rho, keep


def surrogate(params: PolicyParams, batch: RolloutBatch, z: np.ndarray, mask: np.ndarray, tape: Tape, current=None):
    """``J = (1/N) sum z * log pi`` with ``z`` held constant.

    ``current`` may carry log-probs already computed on ``tape``.
    """
    cur = current if current is not None else current_logprobs(params, batch, tape)
    n = int(mask.sum())
    return tape.sum(tape.scale_add(None, np.where(mask, z, 0.0) / n, cur.token_logp))


def policy_gradient_step(
    params: PolicyParams,
    batch: RolloutBatch,
    z: np.ndarray,
    lr: float = 0.05,
    mask: np.ndarray | None = None,
    optimizer: SGD | None = None,
    ratios: np.ndarray | None = None,
    eps_clip: float = 0.2,
    tape: Tape | None = None,
    current=None,
) -> StepDiagnostics:
    """One ascent step on the surrogate; on a non-finite gradient params are left as they were."""
    if mask is None:
        _, mask = batch.padded()
    if current is not None and tape is None:
        raise ValueError("precomputed log-probs must come with their tape")
    opt = optimizer or SGD(params.parameters(), lr)
    opt.zero_grad()
    tape = Tape() if tape is None else tape
    J = surrogate(params, batch, z, mask, tape, current)
    tape.backward(J)
    if ratios is not None:
        r = ratios[mask]
        mean_ratio = float(r.mean())
        clip_fraction = float(((r < 1.0 - eps_clip) | (r > 1.0 + eps_clip)).mean())
    else:
        mean_ratio, clip_fraction = 1.0, 0.0
    try:
        norm = opt.step(ascent=True)
    except NonFiniteGradient:
        log.warning("non-finite policy gradient; step skipped")
        return StepDiagnostics(float("nan"), mean_ratio, clip_fraction, skipped=True)
    return StepDiagnostics(norm, mean_ratio, clip_fraction)


def _same_weights(params: PolicyParams, snapshot: PolicySnapshot) -> bool:
    return all(np.array_equal(t.data, snapshot.arrays[n]) for n, t in params.tensors.items())


def compute_advantages(
    params: PolicyParams, batch: RolloutBatch, config: TrainConfig, current=None
) -> tuple[AdvantageTensors, np.ndarray]:
    cur = current if current is not None else current_logprobs(params, batch)
    if batch.old_dists is None and config.beta > 0 and _same_weights(params, batch.snapshot):
        batch.old_dists = cur.dists
    A, mask, kl = compute_raw_advantages(batch, params, config.beta, current=cur)
    adv_hat, mu, sigma = normalize_advantages(A, config.eps_stat, mask)
    z, rho, keep = clipped_terms(params, batch, adv_hat, config.eps_clip, current=cur)
    return AdvantageTensors(A, keep, mu, sigma, config.eps_stat, adv_hat, rho, config.eps_clip, z), kl


# -- rollout ---------------------------------------------------------------


def collect_rollout(
    snapshot: PolicySnapshot,
    examples: Sequence[ParallelExample],
    teacher,
    config: TrainConfig,
    rng: np.random.Generator,
    scorer: SemanticScorer,
) -> RolloutBatch:
    vocab = snapshot.vocab
    prompts = [render_prompt(vocab, ex.source, ex.direction) for ex in examples]
    groups = sample_batch(snapshot, prompts, config.k, config.temperature, rng, [ex.id for ex in examples])
    pairs = [(ex.source, h.text(vocab)) for ex, hyps in zip(examples, groups) for h in hyps]
    refined = teacher.refine_batch(pairs)
    ok = [not isinstance(r, RefinementError) for r in refined]
    zs = [lexical_similarity(p[1], r.refined) for p, r, good in zip(pairs, refined, ok) if good]
    n_dropped = len(pairs) - len(zs)
    if n_dropped / len(pairs) > config.max_drop_rate or len(zs) < 2:
        reasons = sorted({str(r) for r in refined if isinstance(r, RefinementError)})
        raise TrainingAborted(f"{n_dropped}/{len(pairs)} refinements failed: {'; '.join(reasons[:3])}")
    stats = fit_scale_stats(zs)
    items = []
    flat = 0
    for ex, prompt, hyps in zip(examples, prompts, groups):
        kept_h, kept_r, kept_w = [], [], []
        for h in hyps:
            r, good = refined[flat], ok[flat]
            flat += 1
            if not good:
                continue
            draft = h.text(vocab)
            z = lexical_similarity(draft, r.refined)
            try:
                r_sem = semantic_score(scorer, ex.source, draft, r.refined)
            except RewardError as exc:
                log.warning("dropping sample: %s", exc)
                n_dropped += 1
                continue
            kept_h.append(h)
            kept_r.append(r)
            kept_w.append(composite_reward(z, scale_z(z, stats), r_sem, config.alpha))
        if kept_h:
            items.append(RolloutItem(ex, prompt, kept_h, kept_r, kept_w))
    return RolloutBatch(items, snapshot, stats, n_dropped)


def baseline_resp_len(model, corpus: Sequence[ParallelExample], config: TrainConfig) -> float:
    """Mean sampled response length of ``model`` over ``corpus`` at the rollout temperature.

    Uses its own random stream so it never shifts the training samples.
    """
    vocab = model.vocab
    prompts = [render_prompt(vocab, ex.source, ex.direction) for ex in corpus]
    rng = np.random.default_rng([config.seed, 0])
    groups = sample_batch(model, prompts, config.k, config.temperature, rng)
    return float(np.mean([len(h.text(vocab)) for g in groups for h in g]))


def train_rl(
    init: PolicyParams,
    corpus: Sequence[ParallelExample],
    teacher,
    config: TrainConfig,
    heldout: Sequence[ParallelExample] | None = None,
    scorer: SemanticScorer | None = None,
    on_record: Callable[[MetricsRecord], None] | None = None,
    checkpoint_dir: str | Path | None = None,
) -> tuple[PolicyParams, list[MetricsRecord]]:
    """Run ``config.iterations`` rollout/update cycles from a copy of ``init``."""
    if not corpus:
        raise ValueError("RL needs a non-empty prompt corpus")
    kind = getattr(teacher, "kind", None)
    if config.mode == "fixed-ref" and kind != "fixed":
        raise ConfigError("fixed-ref mode needs the fixed-reference teacher")
    if config.mode == "rlfr" and kind == "fixed":
        raise ConfigError("rlfr mode needs a refining teacher (oracle or remote)")
    scorer = scorer or ChrFScorer()
    params = init.copy()
    records: list[MetricsRecord] = []
    if config.iterations == 0:
        return params, records
    opt = SGD(params.parameters(), config.lr, config.max_grad_norm)
    for it in range(1, config.iterations + 1):
        snapshot = params.snapshot(it)
        rng = np.random.default_rng([config.seed, it])
        idx = rng.choice(len(corpus), size=min(config.rollout_batch, len(corpus)), replace=False)
        batch = collect_rollout(snapshot, [corpus[i] for i in idx], teacher, config, rng, scorer)
        kls, diags = [], []
        for _ in range(config.inner_epochs):
            tape = Tape()
            cur = current_logprobs(params, batch, tape)
            adv, kl = compute_advantages(params, batch, config, current=cur)
            kls.append(float(kl[adv.mask].mean()))
            diags.append(policy_gradient_step(
                params, batch, adv.clipped, mask=adv.mask, optimizer=opt,
                ratios=adv.ratios, eps_clip=config.eps_clip, tape=tape, current=cur,
            ))
        rewards = [w for item in batch.items for w in item.rewards]
        lengths = [len(h.text(params.vocab)) for h in batch.hypotheses]
        ev = evaluate(params, heldout, scorer) if heldout and config.eval_every and it % config.eval_every == 0 else None
        rec = MetricsRecord(
            iteration=it,
            mean_reward=float(np.mean([w.r for w in rewards])),
            mean_resp_len=float(np.mean(lengths)),
            rollout_adequacy=float(np.mean([(w.r_sem + 1.0) / 2.0 for w in rewards])),
            mean_kl=float(np.mean(kls)),
            clip_fraction=float(np.mean([d.clip_fraction for d in diags])),
            mean_ratio=float(np.mean([d.mean_ratio for d in diags])),
            grad_norm=float(np.mean([d.grad_norm for d in diags])),
            n_samples=len(rewards),
            n_dropped=batch.n_dropped,
            eval_adequacy=ev.adequacy if ev else None,
            eval_exact_match=ev.exact_match if ev else None,
            eval_entity_acc=ev.entity_acc if ev else None,
        )
        records.append(rec)
        log.info("rl iteration %d reward %.4f len %.2f", it, rec.mean_reward, rec.mean_resp_len)
        if on_record:
            on_record(rec)
        if checkpoint_dir and config.checkpoint_every and it % config.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"checkpoint-{it:05d}.npz", params, {"iteration": it})
    return params, records


# -- metrics files ---------------------------------------------------------


def _cell(v) -> str:
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else str(v)


class MetricsWriter:
    """Appends records to ``metrics.jsonl`` and mirrors them in ``metrics.csv``."""

    def __init__(self, run_dir: str | Path):
        self.run_dir = Path(run_dir)
        self.jsonl = self.run_dir / "metrics.jsonl"
        self.csv = self.run_dir / "metrics.csv"
        with open(self.csv, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(METRICS_COLUMNS)
        self.jsonl.write_text("")

    def __call__(self, rec: MetricsRecord) -> None:
        with open(self.jsonl, "a") as fh:
            fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")
        with open(self.csv, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow([_cell(getattr(rec, c)) for c in METRICS_COLUMNS])


def read_metrics(path: str | Path) -> list[MetricsRecord]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(MetricsRecord(**json.loads(line)))
    return out
