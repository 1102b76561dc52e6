"""The actor: a one-block, single-head causal attention model over a tiny vocabulary.

Inputs are laid out as ``<dir> s_1 .. s_n <sep> y_1 .. y_m``.  Tokens up to
``s_n`` form segment 0 and ``<sep>`` onward segment 1; positions restart at
zero in each segment so target step ``j`` can find source token ``j + 1`` by
position alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np

from .corpus import ConfigError, Vocab, direction_token
from .grad import Tape, Tensor

CHECKPOINT_FORMAT = "rlfr-policy/1"

PARAM_NAMES = (
    "tok_emb", "pos_emb", "seg_emb",
    "w_q", "w_k", "w_v", "w_o",
    "w_1", "b_1", "w_2", "b_2",
    "w_out", "b_out",
)


class ContextOverflow(ValueError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    d_model: int = 32
    hidden: int = 64
    context: int = 64

    def shapes(self, vocab_size: int) -> dict[str, tuple[int, ...]]:
        d, h, c, v = self.d_model, self.hidden, self.context, vocab_size
        return {
            "tok_emb": (v, d), "pos_emb": (c, d), "seg_emb": (2, d),
            "w_q": (d, d), "w_k": (d, d), "w_v": (d, d), "w_o": (d, d),
            "w_1": (d, h), "b_1": (h,), "w_2": (h, d), "b_2": (d,),
            "w_out": (d, v), "b_out": (v,),
        }


@dataclass(frozen=True)
class PolicySnapshot:
    """Read-only copy of the actor's parameters (the old policy)."""

    vocab: Vocab
    config: PolicyConfig
    arrays: Mapping[str, np.ndarray]
    version: int

    def weights(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.arrays.items()}


class PolicyParams:
    def __init__(self, vocab: Vocab, config: PolicyConfig, arrays: Mapping[str, np.ndarray]):
        shapes = config.shapes(len(vocab))
        if set(arrays) != set(shapes):
            raise ConfigError(f"parameter names {sorted(arrays)} do not match {sorted(shapes)}")
        for name, shape in shapes.items():
            if tuple(np.shape(arrays[name])) != shape:
                raise ConfigError(f"parameter {name} has shape {np.shape(arrays[name])}, expected {shape}")
        self.vocab = vocab
        self.config = config
        self.tensors = {
            name: Tensor(np.array(arrays[name], dtype=np.float64), requires_grad=True, name=name)
            for name in PARAM_NAMES
        }
        self._version = 0

    @classmethod
    def init(cls, vocab: Vocab, config: PolicyConfig | None = None, seed: int = 0) -> "PolicyParams":
        config = config or PolicyConfig()
        rng = np.random.default_rng(seed)
        arrays = {}
        for name, shape in config.shapes(len(vocab)).items():
            if name.startswith("b_"):
                arrays[name] = np.zeros(shape)
            elif name.endswith("_emb"):
                arrays[name] = rng.normal(0.0, 0.5, size=shape)
            else:
                arrays[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
        return cls(vocab, config, arrays)

    @classmethod
    def zeros(cls, vocab: Vocab, config: PolicyConfig | None = None) -> "PolicyParams":
        config = config or PolicyConfig()
        return cls(vocab, config, {n: np.zeros(s) for n, s in config.shapes(len(vocab)).items()})

    def parameters(self) -> list[Tensor]:
        return [self.tensors[n] for n in PARAM_NAMES]

    def weights(self) -> dict[str, Tensor]:
        return self.tensors

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.tensors.items()}

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.vocab, self.config, self.arrays())

    def snapshot(self, version: int | None = None) -> PolicySnapshot:
        if version is None:
            version = self._version + 1
        elif version <= self._version and self._version:
            raise ValueError(f"snapshot version must increase (last {self._version}, got {version})")
        self._version = version
        frozen = {}
        for n, t in self.tensors.items():
            a = t.data.copy()
            a.setflags(write=False)
            frozen[n] = a
        return PolicySnapshot(self.vocab, self.config, MappingProxyType(frozen), version)

    def restore(self, snapshot: PolicySnapshot) -> None:
        if snapshot.vocab != self.vocab or snapshot.config != self.config:
            raise ConfigError("snapshot belongs to a different model")
        for n, t in self.tensors.items():
            t.data[...] = snapshot.arrays[n]

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()


Model = PolicyParams | PolicySnapshot


def render_prompt(vocab: Vocab, source: Sequence[str], direction: str) -> list[int]:
    """Fixed per-direction template: ``<dir> source <sep>``."""
    return [vocab.lookup(direction_token(direction))] + vocab.encode(source) + [vocab.sep_id]


def max_new_tokens(prompt: Sequence[int], context: int) -> int:
    n_src = len(prompt) - 2
    return max(1, min(2 * n_src + 8, context - len(prompt) + 1))


# -- forward pass -----------------------------------------------------------


def _inputs(seqs: Sequence[Sequence[int]], prompt_lens: Sequence[int], pad_id: int, context: int):
    B = len(seqs)
    L = max(len(s) for s in seqs)
    if L > context:
        raise ContextOverflow(f"sequence of length {L} exceeds context length {context}")
    ids = np.full((B, L), pad_id, dtype=np.int64)
    seg = np.zeros((B, L), dtype=np.int64)
    pos = np.zeros((B, L), dtype=np.int64)
    valid = np.zeros((B, L), dtype=bool)
    for b, (s, P) in enumerate(zip(seqs, prompt_lens)):
        n = len(s)
        idx = np.arange(n)
        ids[b, :n] = s
        in_tgt = idx >= P - 1
        seg[b, :n] = in_tgt
        pos[b, :n] = np.where(in_tgt, idx - (P - 1), idx)
        valid[b, :n] = True
    return ids, seg, pos, valid


def _hidden(tape: Tape, w: Mapping[str, Tensor], ids, seg, pos, valid) -> Tensor:
    """Final hidden states of shape (B, L, d)."""
    B, L = ids.shape
    d = w["w_q"].shape[0]
    x = tape.add(tape.add(tape.embed(ids, w["tok_emb"]), tape.embed(pos, w["pos_emb"])), tape.embed(seg, w["seg_emb"]))
    q = tape.affine(x, w["w_q"])
    k = tape.affine(x, w["w_k"])
    v = tape.affine(x, w["w_v"])
    mask = np.tril(np.ones((L, L), dtype=bool))[None] & valid[:, None, :]
    att = tape.softmax_rows(tape.bmm(q, k, transpose_b=True, scale=1.0 / np.sqrt(d)), mask)
    h = tape.add(x, tape.affine(tape.bmm(att, v), w["w_o"]))
    m = tape.tanh(tape.affine(h, w["w_1"], w["b_1"]))
    return tape.add(h, tape.affine(m, w["w_2"], w["b_2"]))


def _head(tape: Tape, w: Mapping[str, Tensor], h: Tensor) -> Tensor:
    """Next-token log-probabilities from hidden states."""
    return tape.log_softmax_rows(tape.affine(h, w["w_out"], w["b_out"]))


@dataclass
class BatchLogprobs:
    """Per-token log-probabilities for a padded batch of (prompt, target) pairs."""

    token_logp: Tensor  # (B, T) on the tape; entries outside ``mask`` are filler
    mask: np.ndarray  # (B, T) bool
    dists: np.ndarray = field(repr=False)  # (B, T, V) full next-token log-distributions

    @property
    def values(self) -> np.ndarray:
        return np.where(self.mask, self.token_logp.data, 0.0)


def batch_logprobs(
    model: Model, prompts: Sequence[Sequence[int]], targets: Sequence[Sequence[int]], tape: Tape | None = None
) -> BatchLogprobs:
    """Teacher-forced log pi(target_t | prompt, target_<t) for every pair."""
    tape = Tape() if tape is None else tape
    V = len(model.vocab)
    if any(len(t) == 0 for t in targets):
        raise ValueError("targets must be non-empty")
    for t in targets:
        if min(t) < 0 or max(t) >= V:
            raise ValueError(f"target token id out of vocab range [0, {V})")
    seqs = [list(p) + list(t[:-1]) for p, t in zip(prompts, targets)]
    plens = [len(p) for p in prompts]
    ids, seg, pos, valid = _inputs(seqs, plens, model.vocab.pad_id, model.config.context)
    B = ids.shape[0]
    T = max(len(t) for t in targets)
    tgt = np.zeros((B, T), dtype=np.int64)
    rows = np.repeat(np.arange(B)[:, None], T, axis=1)
    cols = np.zeros((B, T), dtype=np.int64)
    mask = np.zeros((B, T), dtype=bool)
    for b, (P, t) in enumerate(zip(plens, targets)):
        n = len(t)
        tgt[b, :n] = t
        cols[b, :n] = np.arange(P - 1, P - 1 + n)
        mask[b, :n] = True
    w = model.weights()
    h = tape.take(_hidden(tape, w, ids, seg, pos, valid), (rows, cols))
    logp = _head(tape, w, h)
    return BatchLogprobs(tape.gather_rows(logp, tgt), mask, logp.data)


def logprob_seq(model: Model, prompt: Sequence[int], target: Sequence[int], tape: Tape | None = None) -> Tensor:
    """Per-token log-probabilities of ``target``; pass a tape to differentiate them."""
    out = batch_logprobs(model, [prompt], [target], tape)
    tape = Tape() if tape is None else tape
    return tape.take(out.token_logp, (np.zeros(len(target), dtype=np.int64), np.arange(len(target))))


def categorical_kl(logp: np.ndarray, logq: np.ndarray) -> np.ndarray:
    """KL(p || q) over the last axis, from log-probabilities."""
    return np.maximum((np.exp(logp) * (logp - logq)).sum(axis=-1), 0.0)


def kl_per_position(params: Model, snapshot: Model, prompt: Sequence[int], target: Sequence[int]) -> np.ndarray:
    """Exact KL(pi_params || pi_snapshot) of the next-token distribution at every target position."""
    cur = batch_logprobs(params, [prompt], [target]).dists[0]
    old = batch_logprobs(snapshot, [prompt], [target]).dists[0]
    return categorical_kl(cur, old)


# -- decoding ---------------------------------------------------------------


@dataclass(frozen=True)
class Hypothesis:
    prompt_id: str
    tokens: tuple[int, ...]  # includes the final <eos> if one was generated
    logprobs: tuple[float, ...]  # under the snapshot at temperature 1
    index: int  # 1..k
    snapshot_version: int = 0

    def __post_init__(self):
        if not self.tokens or len(self.tokens) != len(self.logprobs):
            raise ValueError("hypothesis needs one log-probability per token")

    def text(self, vocab: Vocab) -> list[str]:
        toks = self.tokens[:-1] if self.tokens[-1] == vocab.eos_id else self.tokens
        return vocab.decode(toks)


def _next_token_logp(model: Model, seqs, plens) -> np.ndarray:
    ids, seg, pos, valid = _inputs(seqs, plens, model.vocab.pad_id, model.config.context)
    w = {k: Tensor(t.data) for k, t in model.weights().items()}
    tape = Tape()
    h = _hidden(tape, w, ids, seg, pos, valid).data
    last = h[np.arange(len(seqs)), [len(s) - 1 for s in seqs]]
    return _head(tape, w, Tensor(last)).data


def sample_batch(
    model: Model,
    prompts: Sequence[Sequence[int]],
    k: int,
    temperature: float,
    rng: np.random.Generator,
    prompt_ids: Sequence[str] | None = None,
) -> list[list[Hypothesis]]:
    """Draw ``k`` hypotheses per prompt; ``temperature <= 1e-8`` decodes greedily."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if temperature < 0:
        raise ValueError("temperature must be positive")
    ctx = model.config.context
    for p in prompts:
        if len(p) > ctx:
            raise ContextOverflow(f"prompt of length {len(p)} exceeds context length {ctx}")
    greedy = temperature <= 1e-8
    eos = model.vocab.eos_id
    seqs = [list(p) for p in prompts for _ in range(k)]
    plens = [len(p) for p in prompts for _ in range(k)]
    caps = [max_new_tokens(p, ctx) for p in prompts for _ in range(k)]
    gen: list[list[int]] = [[] for _ in seqs]
    lps: list[list[float]] = [[] for _ in seqs]
    active = list(range(len(seqs)))
    while active:
        logp = _next_token_logp(model, [seqs[i] for i in active], [plens[i] for i in active])
        if greedy:
            toks = logp.argmax(axis=-1)
        else:
            z = logp / temperature
            p = np.exp(z - z.max(axis=-1, keepdims=True))
            cdf = np.cumsum(p / p.sum(axis=-1, keepdims=True), axis=-1)
            u = rng.random(len(active))
            toks = np.minimum((cdf < u[:, None]).sum(axis=-1), logp.shape[-1] - 1)
        still = []
        for row, i in enumerate(active):
            t = int(toks[row])
            seqs[i].append(t)
            gen[i].append(t)
            lps[i].append(float(logp[row, t]))
            if t != eos and len(gen[i]) < caps[i]:
                still.append(i)
        active = still
    version = model.version if isinstance(model, PolicySnapshot) else 0
    out = []
    for j in range(len(prompts)):
        pid = prompt_ids[j] if prompt_ids is not None else str(j)
        out.append([
            Hypothesis(pid, tuple(gen[j * k + r]), tuple(lps[j * k + r]), r + 1, version) for r in range(k)
        ])
    return out


def sample_k(
    snapshot: Model, prompt: Sequence[int], k: int, temperature: float, seed: int, prompt_id: str = "0"
) -> list[Hypothesis]:
    return sample_batch(snapshot, [prompt], k, temperature, np.random.default_rng(seed), [prompt_id])[0]


def greedy_decode(model: Model, prompts: Sequence[Sequence[int]], batch_size: int = 256) -> list[list[int]]:
    """Greedy outputs with any trailing <eos> removed."""
    eos = model.vocab.eos_id
    rng = np.random.default_rng(0)
    out = []
    for i in range(0, len(prompts), batch_size):
        for (h,) in sample_batch(model, prompts[i : i + batch_size], 1, 0.0, rng):
            out.append(list(h.tokens[:-1] if h.tokens[-1] == eos else h.tokens))
    return out


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(path: str | Path, model: Model, extra: dict | None = None) -> None:
    arrays = {n: np.asarray(a) for n, a in (model.arrays.items() if isinstance(model, PolicySnapshot) else model.arrays().items())}
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": {"d_model": model.config.d_model, "hidden": model.config.hidden, "context": model.config.context},
        "vocab": list(model.vocab.symbols),
        "shapes": {n: list(a.shape) for n, a in arrays.items()},
        "extra": extra or {},
    }
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path: str | Path, expected: PolicyConfig | None = None) -> PolicyParams:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
        config = PolicyConfig(**meta["config"])
        if expected is not None and expected != config:
            raise ConfigError(f"{path}: checkpoint config {config} does not match {expected}")
        vocab = Vocab(meta["vocab"])
        arrays = {n: data[n] for n in PARAM_NAMES if n in data}
    for n, shape in meta["shapes"].items():
        if n in arrays and list(arrays[n].shape) != shape:
            raise ConfigError(f"{path}: tensor {n} has shape {arrays[n].shape}, header says {shape}")
    return PolicyParams(vocab, config, arrays)


def checkpoint_extra(path: str | Path) -> dict:
    with np.load(path, allow_pickle=False) as data:
        return json.loads(str(data["__meta__"])).get("extra", {})
