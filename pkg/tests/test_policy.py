import hashlib

import numpy as np
import pytest

from hybridrl.dapo import OptimizerConfig, OptimizerState, update_step
from hybridrl.errors import ConfigError, InvalidInputError
from hybridrl.gradcheck import numeric_grad, relative_error
from hybridrl.policy import (
    PolicyParams,
    Trajectory,
    Vocab,
    batch_log_probs,
    encode_prompt,
    grad_log_prob,
    init_params,
    load_checkpoint,
    log_prob,
    sample,
    sample_batch,
    save_checkpoint,
    sft_loss_and_grad,
)
from hybridrl.template import ChatMode, render_response

D = 9


@pytest.fixture
def params():
    return init_params(11, D, hidden=8, embed_dim=4, vocab_size=13, scale=0.5)


def test_vocab_default():
    v = Vocab.default()
    assert len(v) >= 10 and v.tokens.count(v.eos) == 1 and v.eos_id == 0
    text = render_response("hmm wait real", "B", ChatMode.THINKING)
    ids = v.encode(text)
    assert v.encode(v.decode(ids)) == ids


def test_vocab_validation():
    with pytest.raises(ConfigError):
        Vocab(tokens=tuple("abcdefghij"), eos="z")
    with pytest.raises(ConfigError):
        Vocab(tokens=tuple("abcdefghi"), eos="a")
    with pytest.raises(InvalidInputError):
        Vocab.default().encode("unknownword")


def test_encode_prompt_mode_bit():
    x = np.arange(3.0)
    assert encode_prompt(x, ChatMode.THINKING)[-1] == 1.0
    assert encode_prompt(x, ChatMode.NON_THINKING)[-1] == 0.0
    assert np.array_equal(encode_prompt(x, ChatMode.THINKING)[:-1], x)


def test_param_shape_validation(params):
    with pytest.raises(ConfigError):
        PolicyParams(params.W_x, params.W_h, params.W_e, params.E, params.b[:-1], params.W_o)
    with pytest.raises(InvalidInputError):
        params.with_vector(np.zeros(3))
    assert params.with_vector(params.to_vector()).equals(params)


def test_sample_deterministic(params):
    x = np.linspace(-1, 1, D)
    a = sample(params, x, 5, 20)
    b = sample(params, x, 5, 20)
    assert a.tokens == b.tokens and np.array_equal(a.token_logprobs, b.token_logprobs)
    assert sample(params, x, 6, 20).seed == 6


def test_sample_max_len_one(params):
    t = sample(params, np.ones(D), 0, 1)
    assert t.length == 1


def test_sample_dimension_mismatch(params):
    with pytest.raises(ConfigError):
        sample(params, np.ones(D + 1), 0, 5)
    with pytest.raises(InvalidInputError):
        sample(params, np.ones(D), 0, 0)


def test_recorded_logprobs_match_teacher_forcing(params):
    rng = np.random.default_rng(0)
    X = rng.normal(size=(50, D))
    draws = sample_batch(params, X, list(range(50)), 30)
    new = batch_log_probs(params, X, [t for t, _ in draws])
    for (toks, lps), lp in zip(draws, new):
        assert np.all(lps <= 0)
        np.testing.assert_allclose(lp, lps, rtol=0, atol=1e-12)


def test_first_step_frequencies_match_softmax(params):
    x = np.full(D, 0.3)
    n = 100_000
    draws = sample_batch(params, np.repeat(x[None, :], n, axis=0), list(range(n)), 1)
    counts = np.bincount([t[0] for t, _ in draws], minlength=params.vocab_size)
    p = np.exp(np.array([log_prob(params, x, [v])[0] for v in range(params.vocab_size)]))
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma + 1)


def test_uniform_logits(params):
    flat = PolicyParams(params.W_x, params.W_h, params.W_e, params.E, params.b, np.zeros_like(params.W_o))
    lp = log_prob(flat, np.ones(D), [3, 4, 5, 0])
    np.testing.assert_allclose(lp, -np.log(params.vocab_size), atol=1e-15)


def test_normalization_brute_force(params):
    x = np.linspace(0, 1, D)
    prefix = [1, 7, 8]
    for k in range(len(prefix) + 1):
        seqs = [prefix[:k] + [v] for v in range(params.vocab_size)]
        lps = batch_log_probs(params, np.repeat(x[None, :], len(seqs), axis=0), seqs)
        assert abs(sum(np.exp(lp[-1]) for lp in lps) - 1.0) <= 1e-12


def test_invalid_token_index(params):
    with pytest.raises(InvalidInputError):
        log_prob(params, np.ones(D), [99])


def test_trajectory_invariants():
    with pytest.raises(InvalidInputError):
        Trajectory("p", ChatMode.THINKING, [1, 2], np.zeros(1))
    assert Trajectory("p", ChatMode.THINKING, [1, 2], np.zeros(2)).length == 2


def test_grad_log_prob_finite_differences(params):
    rng = np.random.default_rng(1)
    x = rng.normal(size=D)
    toks = [1, 7, 9, 2, 3, 5, 4, 0]
    coords = np.sort(rng.choice(params.to_vector().size, 50, replace=False))
    g = grad_log_prob(params, x, toks).to_vector()[coords]
    n = numeric_grad(lambda p: float(log_prob(p, x, toks).sum()), params, coords, 1e-5)
    assert relative_error(g, n) < 1e-4


def test_grad_every_block_nonzero(params):
    g = grad_log_prob(params, np.ones(D), [1, 7, 2, 0])
    for name, block in g.blocks().items():
        assert np.abs(block).max() > 0, name


def test_grad_empty_sequence_is_zero(params):
    assert np.all(grad_log_prob(params, np.ones(D), []).to_vector() == 0)


def test_single_step_closed_form():
    # hidden 1, vocab 2: d log p(tok) / d W_o[v] = (1[v == tok] - p_v) * h
    p = PolicyParams(
        W_x=np.array([[0.7]]),
        W_h=np.array([[0.2]]),
        W_e=np.array([[0.5]]),
        E=np.array([[0.3], [-0.4]]),
        b=np.array([0.1]),
        W_o=np.array([[0.9], [-0.6]]),
    )
    x = np.array([0.8])
    h = np.tanh(0.7 * 0.8 + 0.5 * 0.3 + 0.1)
    logits = np.array([0.9, -0.6]) * h
    prob = np.exp(logits) / np.exp(logits).sum()
    g = grad_log_prob(p, x, [1], eos_id=0)
    np.testing.assert_allclose(g.W_o[:, 0], (np.array([0.0, 1.0]) - prob) * h, atol=1e-15)
    # chain rule into W_x: dlogp/dh * (1 - h^2) * x
    dh = (np.array([0.0, 1.0]) - prob) @ np.array([0.9, -0.6])
    np.testing.assert_allclose(g.W_x[0, 0], dh * (1 - h * h) * 0.8, atol=1e-15)


def test_sft_loss_matches_log_prob(params):
    rng = np.random.default_rng(2)
    batch = [(rng.normal(size=D), [1, 7, 2, 3, 5, 4, 0]), (rng.normal(size=D), [1, 2, 3, 6, 4, 0])]
    loss, grad = sft_loss_and_grad(params, batch)
    want = -np.mean([log_prob(params, x, t).sum() for x, t in batch])
    assert loss == pytest.approx(want, abs=1e-12)
    # consistent with grad_log_prob scaled by -1/|batch|
    ref = sum(grad_log_prob(params, x, t).to_vector() for x, t in batch) * (-1 / len(batch))
    np.testing.assert_allclose(grad.to_vector(), ref, atol=1e-12)
    coords = np.arange(0, params.to_vector().size, 7)
    n = numeric_grad(lambda p: sft_loss_and_grad(p, batch)[0], params, coords, 1e-5)
    assert relative_error(grad.to_vector()[coords], n) < 1e-4


def test_sft_empty_batch(params):
    with pytest.raises(InvalidInputError):
        sft_loss_and_grad(params, [])


def test_sft_overfit_single_target(params):
    batch = [(np.ones(D), [1, 2, 3, 5, 4, 0])]
    state = OptimizerState.zeros(params)
    p = params
    for _ in range(300):
        _, g = sft_loss_and_grad(p, batch)
        p, state = update_step(p, g.with_vector(-g.to_vector()), state, OptimizerConfig(lr=0.05))
    assert sft_loss_and_grad(p, batch)[0] < 1e-2


def test_checkpoint_round_trip(tmp_path, params):
    v = Vocab.default()
    path = tmp_path / "ck.json"
    digest = save_checkpoint(path, params, v, {"stage": "stage1"})
    assert digest == hashlib.sha256(path.read_bytes()).hexdigest()
    p2, v2, meta = load_checkpoint(path)
    assert p2.equals(params) and v2 == v and meta == {"stage": "stage1"}
    x, toks = np.linspace(-1, 1, D), [1, 7, 8, 2, 3, 5, 4, 0]
    assert np.array_equal(log_prob(p2, x, toks), log_prob(params, x, toks))


def test_checkpoint_errors(tmp_path, params):
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "missing.json")
    small = Vocab(tokens=tuple(Vocab.default().tokens[:11]), eos="<|im_end|>")
    save_checkpoint(tmp_path / "bad.json", params, small)
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "bad.json")
