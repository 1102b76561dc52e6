import pytest

from rlfr.corpus import Entity, ParallelExample, SyntheticTaskSpec, Vocab, build_vocab, generate_corpus
from rlfr.evaluation import (
    COMPARISON_COLUMNS,
    IncompatibleVocab,
    compare,
    comparison_csv,
    comparison_table,
    entity_hits,
    evaluate,
)
from rlfr.policy import PolicyConfig, PolicyParams
from rlfr.sft import SftConfig, train_sft


@pytest.fixture(scope="module")
def memorised():
    task = SyntheticTaskSpec(alphabet_size=4, n_entities=2, entity_rate=1.0, length_range=(2, 3))
    corpus = generate_corpus(task, 6, 0)
    model = PolicyParams.init(build_vocab(task), PolicyConfig(d_model=16, hidden=32), seed=0)
    model, _ = train_sft(model, corpus, SftConfig(epochs=300, batch_size=6, lr=0.5))
    return model, corpus


def test_memorised_corpus_scores_perfectly(memorised):
    model, corpus = memorised
    res = evaluate(model, corpus)
    assert res.exact_match == 1.0 and res.entity_acc == 1.0 and res.adequacy == 1.0
    assert res.n_entities == res.entities_correct == len(corpus)


def test_untrained_model_scores_zero(small_task):
    corpus = generate_corpus(small_task, 30, 1)
    model = PolicyParams.init(build_vocab(small_task), seed=0)
    assert evaluate(model, corpus).exact_match == 0.0


def test_entity_hits_counts_occurrences():
    ex = ParallelExample("e", ("@", "ka", "@", "ka"), ("@", "X", "@", "X"),
                         (Entity(0, 2, "@ X"), Entity(2, 2, "@ X")))
    assert entity_hits(["@", "X", "@", "X"], ex) == 2
    assert entity_hits(["@", "X", "b"], ex) == 1
    assert entity_hits(["@", "Y"], ex) == 0


def test_no_entities_gives_none(small_task):
    task = SyntheticTaskSpec(alphabet_size=4, n_entities=0)
    corpus = generate_corpus(task, 5, 0)
    assert evaluate(PolicyParams.init(build_vocab(task), seed=0), corpus).entity_acc is None


def test_evaluate_rejects_bad_input(tiny_params, small_corpus):
    with pytest.raises(ValueError):
        evaluate(tiny_params, [])
    with pytest.raises(ValueError):
        evaluate(tiny_params, [ParallelExample("x", ("a",))])
    other = ParallelExample("x", ("zz",), ("zz",))
    with pytest.raises(IncompatibleVocab):
        evaluate(tiny_params, [other])


def test_compare_rows_and_formats(tiny_params, small_corpus):
    other = PolicyParams.init(tiny_params.vocab, tiny_params.config, seed=7)
    rows = compare([("sft", tiny_params), ("rl", other)], small_corpus[:5])
    assert [r["checkpoint"] for r in rows] == ["sft", "rl"]
    text = comparison_csv(rows)
    assert text.splitlines()[0] == ",".join(COMPARISON_COLUMNS)
    assert len(text.splitlines()) == 3
    assert "sft" in comparison_table(rows)
    with pytest.raises(ValueError):
        compare([("only", tiny_params)], small_corpus)
