import itertools
import math

import numpy as np
import pytest

from rlfr.corpus import SPECIALS, ConfigError, Vocab, direction_token
from rlfr.grad import Tape
from rlfr.policy import (
    ContextOverflow,
    PolicyConfig,
    PolicyParams,
    _next_token_logp,
    batch_logprobs,
    categorical_kl,
    greedy_decode,
    kl_per_position,
    load_checkpoint,
    logprob_seq,
    max_new_tokens,
    render_prompt,
    sample_batch,
    sample_k,
    save_checkpoint,
)

TWO = Vocab(list(SPECIALS) + [direction_token("src-tgt"), "x", "y"])


def two_symbol_model(context=5, seed=0):
    return PolicyParams.init(TWO, PolicyConfig(d_model=6, hidden=8, context=context), seed=seed)


def prompt(vocab, toks=("x",)):
    return render_prompt(vocab, list(toks), "src-tgt")


def test_uniform_model_logprobs(small_vocab):
    model = PolicyParams.zeros(small_vocab)
    lp = logprob_seq(model, prompt(small_vocab, "ab"), [5, 6, small_vocab.eos_id])
    np.testing.assert_allclose(lp.data, -math.log(len(small_vocab)))


def test_next_token_distributions_normalised(tiny_params, small_vocab):
    out = batch_logprobs(tiny_params, [prompt(small_vocab, "abc")] * 2, [[5, 6, 7], [8]])
    np.testing.assert_allclose(np.exp(out.dists).sum(-1), 1.0, atol=1e-9)


def test_enumeration_matches_teacher_forcing():
    """Chain-rule probabilities from step-by-step decoding equal the teacher-forced ones,
    and all complete continuations carry total probability one."""
    model = two_symbol_model()
    p = prompt(TWO)
    cap = max_new_tokens(p, model.config.context)
    assert cap == 3
    total = 0.0
    for n in range(1, cap + 1):
        for seq in itertools.product(range(len(TWO)), repeat=n):
            if TWO.eos_id in seq[:-1] or (n < cap and seq[-1] != TWO.eos_id):
                continue
            stepwise = sum(_next_token_logp(model, [p + list(seq[:t])], [len(p)])[0, seq[t]] for t in range(n))
            forced = logprob_seq(model, p, list(seq)).data
            assert forced.sum() == pytest.approx(stepwise, abs=1e-10)
            total += math.exp(stepwise)
    assert total == pytest.approx(1.0, abs=1e-9)


def test_sampled_logprobs_match_recomputation(tiny_params, small_vocab, rng):
    snap = tiny_params.snapshot(1)
    prompts = [prompt(small_vocab, "ab"), prompt(small_vocab, "cde")]
    for hyps, pr in zip(sample_batch(snap, prompts, 3, 1.0, rng), prompts):
        for h in hyps:
            again = logprob_seq(snap, pr, list(h.tokens)).data
            np.testing.assert_allclose(h.logprobs, again, atol=1e-9)
            assert h.snapshot_version == 1


def test_sampling_is_seeded(tiny_params, small_vocab):
    pr = prompt(small_vocab, "ab")
    a = sample_k(tiny_params, pr, 3, 1.0, seed=5)
    b = sample_k(tiny_params, pr, 3, 1.0, seed=5)
    assert [h.tokens for h in a] == [h.tokens for h in b]


def test_zero_temperature_is_greedy(tiny_params, small_vocab, rng):
    pr = prompt(small_vocab, "ab")
    hyps = sample_batch(tiny_params, [pr], 3, 0.0, rng)[0]
    assert len({h.tokens for h in hyps}) == 1
    assert hyps[0].text(small_vocab) == small_vocab.decode(greedy_decode(tiny_params, [pr])[0])


def test_generation_respects_cap(tiny_params, small_vocab, rng):
    pr = prompt(small_vocab, "abc")
    cap = max_new_tokens(pr, tiny_params.config.context)
    for h in sample_batch(tiny_params, [pr], 8, 3.0, rng)[0]:
        assert len(h.tokens) <= cap


def test_prompt_longer_than_context(small_vocab):
    model = PolicyParams.init(small_vocab, PolicyConfig(d_model=4, hidden=4, context=4))
    with pytest.raises(ContextOverflow):
        sample_batch(model, [prompt(small_vocab, "abcdef")], 1, 1.0, np.random.default_rng(0))


def test_categorical_kl_by_hand():
    p = np.log([[0.9, 0.1]])
    q = np.log([[0.5, 0.5]])
    expected = 0.9 * math.log(1.8) + 0.1 * math.log(0.2)
    assert categorical_kl(p, q)[0] == pytest.approx(expected)
    assert expected == pytest.approx(0.368, abs=1e-3)


def test_kl_per_position(tiny_params, small_vocab):
    pr, tgt = prompt(small_vocab, "ab"), [5, 6, small_vocab.eos_id]
    np.testing.assert_allclose(kl_per_position(tiny_params, tiny_params.snapshot(1), pr, tgt), 0.0, atol=1e-12)
    other = PolicyParams.init(small_vocab, tiny_params.config, seed=9)
    kl = kl_per_position(tiny_params, other, pr, tgt)
    assert kl.shape == (3,) and (kl > 0).all()


def test_policy_gradient_matches_finite_differences(small_vocab):
    model = PolicyParams.init(small_vocab, PolicyConfig(d_model=4, hidden=5, context=16), seed=3)
    prompts = [prompt(small_vocab, "ab"), prompt(small_vocab, "c")]
    targets = [[5, 6, small_vocab.eos_id], [7, small_vocab.eos_id]]
    weights = np.random.default_rng(0).normal(size=(2, 3))

    def objective(tape=None):
        tape = Tape() if tape is None else tape
        out = batch_logprobs(model, prompts, targets, tape)
        return tape.sum(tape.scale_add(None, np.where(out.mask, weights, 0.0), out.token_logp)), tape

    model.zero_grad()
    J, tape = objective(Tape())
    tape.backward(J)
    h = 1e-4
    rng = np.random.default_rng(1)
    for name, t in model.tensors.items():
        for idx in [tuple(rng.integers(0, s) for s in t.shape) for _ in range(3)]:
            old = t.data[idx]
            t.data[idx] = old + h
            up = objective()[0].item()
            t.data[idx] = old - h
            down = objective()[0].item()
            t.data[idx] = old
            num = (up - down) / (2 * h)
            assert abs(t.grad[idx] - num) <= 1e-3 * max(1e-3, abs(num)) + 1e-7, name


def test_snapshot_versions_increase(tiny_params):
    tiny_params.snapshot(3)
    with pytest.raises(ValueError):
        tiny_params.snapshot(2)


def test_snapshot_is_frozen(tiny_params):
    snap = tiny_params.snapshot(1)
    before = snap.arrays["w_out"].copy()
    tiny_params.tensors["w_out"].data += 1.0
    np.testing.assert_array_equal(snap.arrays["w_out"], before)
    with pytest.raises(ValueError):
        snap.arrays["w_out"][0, 0] = 5.0


def test_checkpoint_round_trip(tiny_params, tmp_path):
    path = tmp_path / "m.npz"
    save_checkpoint(path, tiny_params, {"stage": "test"})
    loaded = load_checkpoint(path, tiny_params.config)
    assert loaded.vocab == tiny_params.vocab
    for name, arr in tiny_params.arrays().items():
        np.testing.assert_array_equal(loaded.arrays()[name], arr)


def test_checkpoint_config_mismatch(tiny_params, tmp_path):
    path = tmp_path / "m.npz"
    save_checkpoint(path, tiny_params)
    with pytest.raises(ConfigError):
        load_checkpoint(path, PolicyConfig(d_model=16))
