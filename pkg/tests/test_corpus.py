import json

import pytest
from hypothesis import given, settings, strategies as st

from rlfr.corpus import (
    ENTITY_MARKER,
    ConfigError,
    CorpusError,
    Entity,
    ParallelExample,
    SyntheticTaskSpec,
    Vocab,
    build_vocab,
    corrupt_corpus,
    generate_corpus,
    load_corpus,
    load_task,
    save_corpus,
    save_task,
    split_corpus,
    target_symbols,
    transduce,
)

ABC = SyntheticTaskSpec(alphabet_size=3, n_entities=0, entity_rate=0.0, mapping=(("a", "b"), ("b", "c"), ("c", "a")))


def test_identity_mapping_copies_source():
    spec = SyntheticTaskSpec(alphabet_size=5, n_entities=0, mapping=tuple((c, c) for c in "abcde"))
    (ex,) = generate_corpus(spec, 1, 0)
    assert ex.gold == ex.source


def test_cyclic_cipher_by_hand():
    assert transduce(ABC, ["a", "b", "c"]) == ("b", "c", "a")


def test_reorder_task_reverses_units():
    spec = SyntheticTaskSpec(kind="word-mapping-with-reorder", alphabet_size=3, n_entities=0,
                             mapping=(("a", "b"), ("b", "c"), ("c", "a")),
                             entity_table=(("@ ka ki", "@ Ba Be"),))
    assert transduce(spec, ["a", "@", "ka", "ki", "b"]) == ("c", "@", "Ba", "Be", "b")


def test_entities_translate_as_units(small_task, small_corpus):
    with_ent = [ex for ex in small_corpus if ex.entities]
    assert with_ent
    for ex in with_ent:
        for ent in ex.entities:
            assert ex.source[ent.start] == ENTITY_MARKER
            assert ent.target_tokens[0] == ENTITY_MARKER
            assert ent.target in " ".join(ex.gold)


def test_generation_is_deterministic(small_task, tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save_corpus(a, generate_corpus(small_task, 30, 7))
    save_corpus(b, generate_corpus(small_task, 30, 7))
    assert a.read_bytes() == b.read_bytes()
    assert generate_corpus(small_task, 30, 8) != generate_corpus(small_task, 30, 7)


def test_lengths_respect_range(small_task):
    for ex in generate_corpus(small_task, 50, 1):
        plain = len(ex.source) - sum(e.length for e in ex.entities)
        assert 2 <= plain <= 4


@pytest.mark.parametrize("bad", [
    dict(alphabet_size=0),
    dict(alphabet_size=2, mapping=(("a", "a"), ("b", "a"))),
    dict(alphabet_size=2, mapping=(("a", "b"),)),
    dict(kind="nope"),
    dict(length_range=(3, 2)),
    dict(corruption_rate=1.0),
])
def test_invalid_specs_rejected(bad):
    with pytest.raises(ConfigError):
        build_vocab(SyntheticTaskSpec(**bad))


def test_vocab_round_trip_and_specials(small_vocab):
    toks = ["a", "b", "@"]
    assert small_vocab.decode(small_vocab.encode(toks)) == toks
    with pytest.raises(KeyError):
        small_vocab.encode(["???"])
    assert small_vocab.encode(["???"], strict=False) == [small_vocab.unk_id]
    with pytest.raises(ConfigError):
        Vocab(["a", "b"])


def test_corruption_rate_is_respected(small_task):
    corpus = generate_corpus(small_task, 400, 0)
    noisy = corrupt_corpus(corpus, small_task, 0, rate=0.3)
    total = sum(len(ex.gold) for ex in corpus)
    changed = sum(a != b for x, y in zip(corpus, noisy) for a, b in zip(x.gold, y.gold))
    pool = target_symbols(small_task)
    # a replacement can draw the original token back, so the visible rate is slightly lower
    assert 0.3 * (1 - 1 / len(pool)) - 0.05 < changed / total < 0.3 + 0.05
    assert [x.source for x in corpus] == [y.source for y in noisy]
    assert corrupt_corpus(corpus, small_task, 0, rate=0.0) == corpus


def test_split_keeps_everything(small_corpus):
    train, held = split_corpus(small_corpus, 10)
    assert len(held) == 10 and held + train == small_corpus


def test_empty_file_loads_empty(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text("")
    assert load_corpus(p) == []


def test_single_record_round_trip(tmp_path):
    ex = ParallelExample("x1", ("a", "@", "ka", "ki"), ("b", "@", "Ba", "Be"), (Entity(1, 3, "@ Ba Be"),))
    p = tmp_path / "one.jsonl"
    save_corpus(p, [ex])
    assert load_corpus(p) == [ex]


def test_entity_span_past_source_names_line(tmp_path):
    good = {"id": "a", "source": "a b", "gold": "b c", "entities": [], "direction": "src-tgt"}
    bad = {"id": "b", "source": "a b", "gold": "b c", "entities": [{"start": 1, "len": 5, "target": "@ X"}]}
    p = tmp_path / "bad.jsonl"
    p.write_text(json.dumps(good) + "\n" + json.dumps(bad) + "\n")
    with pytest.raises(CorpusError, match=r"bad.jsonl:2"):
        load_corpus(p)


def test_duplicate_ids_rejected(tmp_path):
    rec = json.dumps({"id": "a", "source": "a"})
    p = tmp_path / "dup.jsonl"
    p.write_text(rec + "\n" + rec + "\n")
    with pytest.raises(CorpusError, match="duplicate"):
        load_corpus(p)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_corpus(tmp_path / "nope.jsonl")


def test_task_round_trip(small_task, tmp_path):
    save_task(tmp_path / "t.json", small_task)
    loaded = load_task(tmp_path / "t.json")
    assert transduce(loaded, ["a", "b"]) == transduce(small_task, ["a", "b"])
    assert build_vocab(loaded) == build_vocab(small_task)


tokens = st.lists(st.sampled_from(list("abcdef")), min_size=1, max_size=8)


@st.composite
def examples(draw):
    src = draw(tokens)
    gold = draw(st.none() | tokens)
    ents, pos = [], 0
    while pos < len(src) and draw(st.booleans()):
        start = draw(st.integers(pos, len(src) - 1))
        length = draw(st.integers(1, len(src) - start))
        ents.append(Entity(start, length, "@ X"))
        pos = start + length
    return ParallelExample(draw(st.text("xyz0123", min_size=1, max_size=6)), tuple(src),
                           tuple(gold) if gold else None, tuple(ents))


@settings(max_examples=60, deadline=None)
@given(st.lists(examples(), max_size=6, unique_by=lambda e: e.id))
def test_save_load_is_identity(tmp_path_factory, corpus):
    p = tmp_path_factory.mktemp("rt") / "c.jsonl"
    save_corpus(p, corpus)
    assert load_corpus(p) == corpus
