import numpy as np
import pytest

from mot.harness.tasks import EOS, score
from mot.inference import (decode_step, full_forward, generate, generate_batch, non_primary_token_rule, prefill,
                           sample_token)
from mot.model import MoTConfig, MoTModel

from conftest import tiny_experts


def model64(scale=0.5, K=2, M=2, seed=0, dtype=np.float64):
    dims, layers = (8, 12, 8)[:M], (2, 3, 2)[:M]
    experts = tiny_experts(dims=dims, layers=layers, scale=scale, seed=seed, dtype=dtype)
    return MoTModel(experts, MoTConfig(Q=2, d_s=8, heads=2, K=K, d_z=8, h_r=6, dropout=0.0, seed=seed), dtype)


def prompts(n, rng, lo=2, hi=5):
    return [rng.integers(3, 16, size=rng.integers(lo, hi + 1)).tolist() for _ in range(n)]


def test_sample_token_greedy_and_nucleus():
    logits = np.array([0.0, 5.0, 1.0])
    assert sample_token(logits) == 1
    rng = np.random.default_rng(0)
    assert {sample_token(logits, 1.0, 0.5, rng) for _ in range(50)} == {1}
    assert len({sample_token(np.zeros(3), 1.0, 1.0, rng) for _ in range(100)}) == 3


def test_non_primary_rule_takes_the_peak():
    assert non_primary_token_rule(np.array([0.1, 3.0, -1.0])) == 1


def test_prefill_rejects_bad_inputs():
    model = model64()
    with pytest.raises(ValueError):
        prefill(model, [])
    with pytest.raises(ValueError):
        prefill(model, [3] * 13)
    with pytest.raises(ValueError):
        prefill(model, [3, 4], max_len=0)


def test_max_len_one_stops_after_prefill():
    state = generate(model64(), [3, 4, 5], max_len=1, return_state=True)
    assert len(state.y) == 1 and state.t == 0


def test_prefill_logits_equal_full_forward():
    model = model64()
    state = prefill(model, [3, 9, 4, 7])
    full = full_forward(model, state)
    for m in state.active:
        assert np.abs(state.logits[0][m] - full[m][-1]).max() < 1e-10


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-10), (np.float32, 1e-5)])
def test_cached_decoding_equals_recompute_at_every_prefix(dtype, tol):
    model = model64(scale=0.3, M=3, dtype=dtype)
    for p in prompts(5, np.random.default_rng(1)):
        state = generate(model, p, max_len=6, return_state=True)
        full = full_forward(model, state)
        n0 = len(p)
        for step, logits in enumerate(state.logits):
            for m, v in logits.items():
                assert np.abs(v - full[m][n0 - 1 + step]).max() < tol


def test_two_decode_steps_equal_two_token_recompute():
    model = model64()
    state = prefill(model, [3, 5, 7], max_len=10)
    decode_step(state, model)
    decode_step(state, model)
    full = full_forward(model, state)
    for m in state.active:
        assert np.abs(state.logits[-1][m] - full[m][-1]).max() < 1e-10


def test_generation_is_deterministic_and_terminates():
    model = model64()
    rng = np.random.default_rng(2)
    for p in prompts(10, rng):
        a = generate(model, p, max_len=7)
        assert a == generate(model, p, max_len=7)
        assert 1 <= len(a) <= 7


def test_primary_eos_after_first_decode_gives_two_tokens():
    model = model64(K=1)
    state = prefill(model, [3, 4], max_len=10)
    first = state.y[0]
    # from now on the primary's head can only say EOS
    e = model.experts[state.primary]
    e.params["head"].data[:] = 0.0
    e.params["head"].data[:, EOS] = 1.0
    e.params["ln_f.b"].data[:] = 1.0
    decode_step(state, model)
    assert state.y == [first, EOS] and state.done


def test_killing_a_non_primary_expert_mid_generation_is_harmless():
    model = model64(M=3, K=3)
    for p in prompts(6, np.random.default_rng(3)):
        state = generate(model, p, max_len=6, return_state=True)
        victim = next(m for m in state.active if m != state.primary)
        y = generate(model, p, max_len=6, kill={1: victim})
        assert 1 <= len(y) <= 6


def test_dead_expert_state_stops_changing():
    model = model64(M=3, K=3)
    state = prefill(model, [3, 4, 5], max_len=8)
    victim = next(m for m in state.active if m != state.primary)
    state.alive[victim] = False
    hash_before = model.experts[victim].weight_hash()
    decode_step(state, model)
    keys = [k.copy() for k in state.caches[victim].keys]
    n_stream = len(state.streams[victim])
    decode_step(state, model)
    assert all(np.array_equal(a, b) for a, b in zip(keys, state.caches[victim].keys))
    assert state.pad[victim][-2:] == [True, True]
    assert len(state.streams[victim]) == n_stream + 1 and state.streams[victim][-1] == 0
    assert model.experts[victim].weight_hash() == hash_before


def test_all_peers_dead_reduces_to_self_attention():
    model = model64(M=2, K=2)
    p = [3, 4, 5]
    state = prefill(model, p, max_len=5)
    other = next(m for m in state.active if m != state.primary)
    state.alive[other] = False
    while not state.done:
        decode_step(state, model)
    k1 = model64(M=2, K=1)
    k1_state = prefill(k1, p, max_len=5)
    assert k1_state.primary == state.primary
    full = full_forward(model, state)
    assert np.abs(state.logits[-1][state.primary] - full[state.primary][-1]).max() < 1e-10


def test_zero_interaction_generation_equals_primary_alone():
    model = model64(M=3, K=2)
    model.zero_interaction()
    for p in prompts(10, np.random.default_rng(4)):
        state = generate(model, p, max_len=5, return_state=True)
        alone = model.experts[state.primary].greedy(p, 5, eos=EOS)
        assert state.y == alone


def test_batched_generation_equals_single_prompt_generation():
    model = model64(M=3, K=2, dtype=np.float32, scale=0.3)
    ps = prompts(12, np.random.default_rng(5), 2, 4)
    for dead in (None, {0}, {2}):
        batch = generate_batch(model, ps, 5, dead=dead)
        assert batch == [generate(model, p, max_len=5, dead=dead) for p in ps]


def test_appending_prompt_tokens_keeps_earlier_interaction_states():
    model = model64(M=2, K=2)
    a = prefill(model, [3, 4, 5])
    b = prefill(model, [3, 4, 5, 6])
    for m in a.active:
        if m in b.active:
            for la, lb in zip(a.icache.keys, b.icache.keys):
                assert np.abs(la[m] - lb[m][..., :3, :]).max() < 1e-12


def test_trained_copy_specialist_copies_through_mot(main_setup):
    cfg, tasks, experts = main_setup
    model = MoTModel(experts, cfg.mot)
    model.zero_interaction()
    exs = tasks["copy"].heldout[:100]
    dead = {1, 2}
    preds = generate_batch(model, [e.prompt for e in exs], [len(e.answer) for e in exs], K=1, dead=dead)
    assert np.mean([score(p, e) for p, e in zip(preds, exs)]) >= 0.9
