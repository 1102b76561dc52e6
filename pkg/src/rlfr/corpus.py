"""Data model, corpus files and deterministic synthetic translation tasks."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

PAD, BOS, EOS, UNK, SEP = "<pad>", "<bos>", "<eos>", "<unk>", "<sep>"
SPECIALS = (PAD, BOS, EOS, UNK, SEP)
ENTITY_MARKER = "@"
DEFAULT_DIRECTION = "src-tgt"

TASK_KINDS = ("substitution-cipher", "word-mapping-with-reorder")

_SYLLABLES_SRC = [c + v for c in "kmnrstvz" for v in "aiou"]
_SYLLABLES_TGT = [c + v for c in "BDFGHJLP" for v in "AEOY"]


class ConfigError(ValueError):
    """Invalid task, model or training configuration."""


class CorpusError(ValueError):
    """A corpus file could not be parsed."""


def direction_token(direction: str) -> str:
    return f"<{direction}>"


class Vocab:
    """Dense token alphabet; ids are positions in ``symbols``."""

    def __init__(self, symbols: Iterable[str]):
        symbols = list(symbols)
        for s in SPECIALS:
            if s not in symbols:
                raise ConfigError(f"vocab is missing special symbol {s!r}")
        if len(set(symbols)) != len(symbols):
            raise ConfigError("vocab symbols must be unique")
        self.symbols: tuple[str, ...] = tuple(symbols)
        self._index = {s: i for i, s in enumerate(self.symbols)}
        self.pad_id = self._index[PAD]
        self.bos_id = self._index[BOS]
        self.eos_id = self._index[EOS]
        self.unk_id = self._index[UNK]
        self.sep_id = self._index[SEP]

    def __len__(self) -> int:
        return len(self.symbols)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocab) and self.symbols == other.symbols

    def __hash__(self) -> int:
        return hash(self.symbols)

    def __contains__(self, symbol: str) -> bool:
        return symbol in self._index

    def lookup(self, symbol: str) -> int:
        return self._index[symbol]

    def symbol(self, idx: int) -> str:
        return self.symbols[idx]

    def encode(self, tokens: Sequence[str], strict: bool = True) -> list[int]:
        if strict:
            missing = [t for t in tokens if t not in self._index]
            if missing:
                raise KeyError(f"tokens not in vocab: {missing[:5]}")
            return [self._index[t] for t in tokens]
        return [self._index.get(t, self.unk_id) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.symbols[i] for i in ids]


@dataclass(frozen=True)
class Entity:
    start: int
    length: int
    target: str  # canonical rendering, whitespace-separated tokens

    @property
    def target_tokens(self) -> tuple[str, ...]:
        return tuple(self.target.split())


@dataclass(frozen=True)
class ParallelExample:
    id: str
    source: tuple[str, ...]
    gold: tuple[str, ...] | None = None
    entities: tuple[Entity, ...] = ()
    direction: str = DEFAULT_DIRECTION

    def __post_init__(self):
        if not self.source:
            raise ValueError(f"example {self.id!r}: empty source")
        end = 0
        for ent in sorted(self.entities, key=lambda e: e.start):
            if ent.length < 1 or ent.start < 0 or ent.start + ent.length > len(self.source):
                raise ValueError(
                    f"example {self.id!r}: entity span ({ent.start}, {ent.length}) "
                    f"outside source of length {len(self.source)}"
                )
            if ent.start < end:
                raise ValueError(f"example {self.id!r}: overlapping entity spans")
            end = ent.start + ent.length

    def with_gold(self, gold: Sequence[str]) -> "ParallelExample":
        return ParallelExample(self.id, self.source, tuple(gold), self.entities, self.direction)

    def to_record(self) -> dict:
        rec = {"id": self.id, "source": " ".join(self.source)}
        if self.gold is not None:
            rec["gold"] = " ".join(self.gold)
        rec["entities"] = [
            {"start": e.start, "len": e.length, "target": e.target} for e in self.entities
        ]
        rec["direction"] = self.direction
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "ParallelExample":
        gold = rec.get("gold")
        return cls(
            id=str(rec["id"]),
            source=tuple(rec["source"].split()),
            gold=tuple(gold.split()) if gold is not None else None,
            entities=tuple(
                Entity(int(e["start"]), int(e["len"]), str(e["target"]))
                for e in rec.get("entities", [])
            ),
            direction=str(rec.get("direction", DEFAULT_DIRECTION)),
        )


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """A synthetic translation task.

    ``mapping`` may be given explicitly as (source, target) pairs; otherwise a
    random permutation of the alphabet is drawn from ``mapping_seed``.  When
    ``entity_table`` is empty, ``n_entities`` names are generated from the same
    seed.  ``length_range`` counts ordinary tokens; each injected entity adds
    its own tokens on top.
    """

    kind: str = "substitution-cipher"
    alphabet_size: int = 12
    mapping_seed: int = 0
    entity_table: tuple[tuple[str, str], ...] = ()
    n_entities: int = 16
    entity_rate: float = 0.5
    max_entities: int = 1
    length_range: tuple[int, int] = (4, 8)
    corruption_rate: float = 0.2
    direction: str = DEFAULT_DIRECTION
    mapping: tuple[tuple[str, str], ...] | None = None

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "alphabet_size": self.alphabet_size,
            "mapping_seed": self.mapping_seed,
            "entity_table": [list(p) for p in self.entity_table],
            "n_entities": self.n_entities,
            "entity_rate": self.entity_rate,
            "max_entities": self.max_entities,
            "length_range": list(self.length_range),
            "corruption_rate": self.corruption_rate,
            "direction": self.direction,
            "mapping": [list(p) for p in self.mapping] if self.mapping is not None else None,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTaskSpec":
        mapping = d.get("mapping")
        return cls(
            kind=d["kind"],
            alphabet_size=int(d["alphabet_size"]),
            mapping_seed=int(d["mapping_seed"]),
            entity_table=tuple(tuple(p) for p in d.get("entity_table", [])),
            n_entities=int(d.get("n_entities", 0)),
            entity_rate=float(d.get("entity_rate", 0.0)),
            max_entities=int(d.get("max_entities", 1)),
            length_range=tuple(d["length_range"]),
            corruption_rate=float(d["corruption_rate"]),
            direction=d.get("direction", DEFAULT_DIRECTION),
            mapping=tuple(tuple(p) for p in mapping) if mapping is not None else None,
        )


def alphabet(size: int) -> list[str]:
    if size <= 26:
        return [chr(ord("a") + i) for i in range(size)]
    return [f"w{i}" for i in range(size)]


@dataclass(frozen=True)
class _Task:
    spec: SyntheticTaskSpec
    alphabet: tuple[str, ...]
    mapping: dict = field(hash=False, compare=False)
    entities: tuple[tuple[tuple[str, ...], tuple[str, ...]], ...]
    entity_src_lookup: dict = field(hash=False, compare=False)


@lru_cache(maxsize=64)
def resolve_task(spec: SyntheticTaskSpec) -> _Task:
    """Validate ``spec`` and derive its mapping and entity table."""
    if spec.kind not in TASK_KINDS:
        raise ConfigError(f"unknown task kind {spec.kind!r}; expected one of {TASK_KINDS}")
    if spec.alphabet_size < 1:
        raise ConfigError("alphabet must be non-empty")
    if not 0.0 <= spec.corruption_rate < 1.0:
        raise ConfigError("corruption rate must lie in [0, 1)")
    if not 0.0 <= spec.entity_rate <= 1.0:
        raise ConfigError("entity rate must lie in [0, 1]")
    lo, hi = spec.length_range
    if lo < 1 or hi < lo:
        raise ConfigError(f"invalid length range {spec.length_range}")
    letters = alphabet(spec.alphabet_size)
    rng = random.Random(spec.mapping_seed)
    if spec.mapping is not None:
        mapping = dict(spec.mapping)
        if len(mapping) != len(spec.mapping):
            raise ConfigError("mapping has repeated source symbols")
        if sorted(mapping) != sorted(letters) or sorted(mapping.values()) != sorted(letters):
            raise ConfigError("mapping must be a bijection on the alphabet")
    else:
        shuffled = letters[:]
        rng.shuffle(shuffled)
        mapping = dict(zip(letters, shuffled))

    table = spec.entity_table or _generate_entity_table(spec.n_entities, rng)
    entities = []
    seen: set[str] = set()
    for src, tgt in table:
        s_toks, t_toks = tuple(src.split()), tuple(tgt.split())
        if not s_toks or s_toks[0] != ENTITY_MARKER or not t_toks or t_toks[0] != ENTITY_MARKER:
            raise ConfigError(f"entity names must start with the marker {ENTITY_MARKER!r}")
        if len(s_toks) != len(t_toks):
            raise ConfigError(f"entity {src!r} and its rendering {tgt!r} differ in length")
        for tok in s_toks[1:] + t_toks[1:]:
            if tok in letters or tok in SPECIALS or tok == ENTITY_MARKER:
                raise ConfigError(f"entity token {tok!r} collides with the ordinary vocabulary")
        if src in seen:
            raise ConfigError(f"duplicate entity {src!r}")
        seen.add(src)
        entities.append((s_toks, t_toks))
    return _Task(
        spec=spec,
        alphabet=tuple(letters),
        mapping=mapping,
        entities=tuple(entities),
        entity_src_lookup={s: t for s, t in entities},
    )


def _generate_entity_table(n: int, rng: random.Random) -> tuple[tuple[str, str], ...]:
    table = []
    used_src: set[str] = set()
    used_tgt: set[str] = set()
    while len(table) < n:
        s = [rng.choice(_SYLLABLES_SRC) + rng.choice(_SYLLABLES_SRC) for _ in range(2)]
        t = [rng.choice(_SYLLABLES_TGT) + rng.choice(_SYLLABLES_TGT).lower() for _ in range(2)]
        if used_src.intersection(s) or used_tgt.intersection(t) or s[0] == s[1] or t[0] == t[1]:
            continue
        used_src.update(s)
        used_tgt.update(t)
        table.append((" ".join([ENTITY_MARKER, *s]), " ".join([ENTITY_MARKER, *t])))
    return tuple(table)


def build_vocab(spec: SyntheticTaskSpec) -> Vocab:
    task = resolve_task(spec)
    symbols = list(SPECIALS) + [direction_token(spec.direction), ENTITY_MARKER]
    symbols += list(task.alphabet)
    for s_toks, t_toks in task.entities:
        symbols += [t for t in s_toks[1:] if t not in symbols]
        symbols += [t for t in t_toks[1:] if t not in symbols]
    return Vocab(symbols)


def target_symbols(spec: SyntheticTaskSpec) -> list[str]:
    """Tokens that may appear in a target sentence."""
    task = resolve_task(spec)
    out = [task.mapping[a] for a in task.alphabet] + [ENTITY_MARKER]
    for _, t_toks in task.entities:
        out += list(t_toks[1:])
    return out


def _units(spec: SyntheticTaskSpec, source: Sequence[str]) -> list[tuple[str, ...]]:
    """Split a source into translation units: single tokens or whole entity names."""
    task = resolve_task(spec)
    units, i = [], 0
    while i < len(source):
        if source[i] == ENTITY_MARKER:
            for s_toks in task.entity_src_lookup:
                if tuple(source[i : i + len(s_toks)]) == s_toks:
                    units.append(s_toks)
                    i += len(s_toks)
                    break
            else:
                raise ValueError(f"unknown entity at position {i} of {' '.join(source)!r}")
        else:
            units.append((source[i],))
            i += 1
    return units


def transduce(spec: SyntheticTaskSpec, source: Sequence[str]) -> tuple[str, ...]:
    """The task's exact translation of ``source``."""
    task = resolve_task(spec)
    out_units = []
    for unit in _units(spec, source):
        if unit in task.entity_src_lookup:
            out_units.append(task.entity_src_lookup[unit])
        else:
            tok = unit[0]
            if tok not in task.mapping:
                raise ValueError(f"token {tok!r} is not in the task alphabet")
            out_units.append((task.mapping[tok],))
    if spec.kind == "word-mapping-with-reorder":
        out_units.reverse()
    return tuple(t for unit in out_units for t in unit)


def generate_corpus(spec: SyntheticTaskSpec, n: int, seed: int) -> list[ParallelExample]:
    if n < 1:
        raise ConfigError("corpus size must be at least 1")
    task = resolve_task(spec)
    rng = random.Random(f"corpus:{seed}")
    lo, hi = spec.length_range
    out = []
    for i in range(n):
        tokens = [rng.choice(task.alphabet) for _ in range(rng.randint(lo, hi))]
        n_ent = sum(rng.random() < spec.entity_rate for _ in range(spec.max_entities))
        n_ent = n_ent if task.entities else 0
        # insertion slots between ordinary tokens, distinct so spans never touch
        slots = sorted(rng.sample(range(len(tokens) + 1), min(n_ent, len(tokens) + 1)))
        source: list[str] = []
        entities = []
        prev = 0
        for slot in slots:
            source += tokens[prev:slot]
            s_toks, t_toks = rng.choice(task.entities)
            entities.append(Entity(len(source), len(s_toks), " ".join(t_toks)))
            source += s_toks
            prev = slot
        source += tokens[prev:]
        src = tuple(source)
        out.append(
            ParallelExample(
                id=f"{spec.direction}-{seed}-{i:06d}",
                source=src,
                gold=transduce(spec, src),
                entities=tuple(entities),
                direction=spec.direction,
            )
        )
    return out


def corrupt_corpus(
    corpus: Sequence[ParallelExample], spec: SyntheticTaskSpec, seed: int, rate: float | None = None
) -> list[ParallelExample]:
    """Replace each gold token with a random target symbol with probability ``rate``."""
    rate = spec.corruption_rate if rate is None else rate
    if not 0.0 <= rate < 1.0:
        raise ConfigError("corruption rate must lie in [0, 1)")
    pool = target_symbols(spec)
    rng = random.Random(f"corrupt:{seed}")
    out = []
    for ex in corpus:
        if ex.gold is None:
            raise ValueError(f"example {ex.id!r} has no gold target")
        gold = [rng.choice(pool) if rng.random() < rate else t for t in ex.gold]
        out.append(ex.with_gold(gold))
    return out


def split_corpus(
    corpus: Sequence[ParallelExample], n_heldout: int
) -> tuple[list[ParallelExample], list[ParallelExample]]:
    return list(corpus[n_heldout:]), list(corpus[:n_heldout])


def save_corpus(path: str | Path, corpus: Iterable[ParallelExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in corpus:
            fh.write(json.dumps(ex.to_record(), ensure_ascii=False, sort_keys=True) + "\n")


def load_corpus(path: str | Path) -> list[ParallelExample]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"corpus file not found: {path}")
    out: list[ParallelExample] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict):
                    raise ValueError("record is not an object")
                ex = ParallelExample.from_record(rec)
            except (ValueError, KeyError, TypeError, AttributeError) as exc:
                raise CorpusError(f"{path}:{lineno}: malformed record: {exc}") from exc
            if ex.id in seen:
                raise CorpusError(f"{path}:{lineno}: duplicate id {ex.id!r} (first on line {seen[ex.id]})")
            seen[ex.id] = lineno
            out.append(ex)
    return out


def save_task(path: str | Path, spec: SyntheticTaskSpec) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")


def load_task(path: str | Path) -> SyntheticTaskSpec:
    spec = SyntheticTaskSpec.from_dict(json.loads(Path(path).read_text()))
    resolve_task(spec)
    return spec
