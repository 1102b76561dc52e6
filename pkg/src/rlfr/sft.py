"""Supervised initialisation of the actor by token-level cross-entropy."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .corpus import ConfigError, ParallelExample
from .evaluation import evaluate
from .grad import SGD, Tape
from .policy import PolicyParams, batch_logprobs, render_prompt

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SftConfig:
    epochs: int = 40
    batch_size: int = 32
    lr: float = 0.5
    max_grad_norm: float | None = 1.0
    seed: int = 0
    patience: int = 5  # epochs without held-out exact-match gain before stopping
    min_epochs: int = 10

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0:
            raise ConfigError("SFT needs batch_size >= 1, epochs >= 0 and lr > 0")


@dataclass(frozen=True)
class SftEpoch:
    epoch: int
    loss: float  # mean nats per predicted token over the epoch
    heldout_exact_match: float | None


def encode_pairs(params: PolicyParams, corpus: Sequence[ParallelExample]) -> tuple[list[list[int]], list[list[int]]]:
    vocab = params.vocab
    prompts, targets = [], []
    for ex in corpus:
        if ex.gold is None:
            raise ValueError(f"example {ex.id!r} has no gold target")
        prompts.append(render_prompt(vocab, ex.source, ex.direction))
        targets.append(vocab.encode(ex.gold) + [vocab.eos_id])
    return prompts, targets


def cross_entropy(params: PolicyParams, prompts, targets, tape: Tape):
    """Summed token NLL over the batch divided by its predicted-token count N."""
    out = batch_logprobs(params, prompts, targets, tape)
    n_tokens = int(out.mask.sum())
    loss = tape.sum(tape.scale_add(None, -out.mask.astype(float) / n_tokens, out.token_logp))
    return loss, n_tokens


def train_sft(
    params: PolicyParams,
    corpus: Sequence[ParallelExample],
    config: SftConfig,
    heldout: Sequence[ParallelExample] | None = None,
    on_epoch: Callable[[SftEpoch], None] | None = None,
) -> tuple[PolicyParams, list[SftEpoch]]:
    """Train ``params`` in place and return them with the per-epoch log.

    With a held-out set, the parameters restored at the end are those of the
    epoch with the best held-out exact match.
    """
    prompts, targets = encode_pairs(params, corpus)
    rng = np.random.default_rng(config.seed)
    opt = SGD(params.parameters(), config.lr, config.max_grad_norm)
    history: list[SftEpoch] = []
    best_em, best_snap, stale = -1.0, None, 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(prompts))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            tape = Tape()
            opt.zero_grad()
            loss, n = cross_entropy(params, [prompts[i] for i in idx], [targets[i] for i in idx], tape)
            tape.backward(loss)
            opt.step()
            total += loss.item() * n
            count += n
        em = evaluate(params, heldout).exact_match if heldout else None
        rec = SftEpoch(epoch, total / count, em)
        history.append(rec)
        log.info("sft epoch %d loss %.4f heldout_em %s", epoch, rec.loss, em)
        if on_epoch:
            on_epoch(rec)
        if em is not None:
            if em > best_em:
                best_em, best_snap, stale = em, params.snapshot(epoch), 0
            else:
                stale += 1
                if stale >= config.patience and epoch >= config.min_epochs:
                    break
    if best_snap is not None:
        params.restore(best_snap)
    return params, history
