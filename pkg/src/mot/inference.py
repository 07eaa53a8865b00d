"""Single-pass generation: routed prefill, then synchronized cached decoding."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx
from .expert import BackboneKVCache
from .harness.tasks import EOS, PAD
from .interaction import InteractionKVCache
from .model import MoTModel
from .router import RoutingDecision, select_topk


def non_primary_token_rule(logits: np.ndarray) -> int:
    """Non-primary experts decode greedily."""
    return int(np.argmax(logits))


def sample_token(logits: np.ndarray, temperature: float = 0.0, top_p: float = 1.0,
                 rng: np.random.Generator | None = None) -> int:
    """Greedy when ``temperature`` is 0, otherwise nucleus sampling."""
    if temperature <= 0:
        return int(np.argmax(logits))
    z = np.asarray(logits, dtype=np.float64) / temperature
    p = np.exp(z - z.max())
    p /= p.sum()
    order = np.argsort(-p, kind="stable")
    cum = np.cumsum(p[order])
    keep = order[: int(np.searchsorted(cum, top_p) + 1)]
    q = p[keep] / p[keep].sum()
    rng = rng or np.random.default_rng()
    return int(keep[rng.choice(len(keep), p=q)])


@dataclass
class GenerationState:
    decision: RoutingDecision
    active: list[int]
    primary: int
    streams: dict[int, list[int]]
    pad: dict[int, list[bool]]
    alive: dict[int, bool]
    last: dict[int, int]
    caches: dict[int, BackboneKVCache]
    icache: InteractionKVCache
    max_len: int
    eos: int = EOS
    y: list[int] = field(default_factory=list)
    t: int = 0
    logits: list[dict[int, np.ndarray]] = field(default_factory=list)
    done: bool = False
    temperature: float = 0.0
    top_p: float = 1.0
    rng: np.random.Generator | None = None

    @property
    def length(self) -> int:
        return len(next(iter(self.streams.values())))


def _emit(state: GenerationState, logits: dict[int, np.ndarray]) -> None:
    state.logits.append({m: v.copy() for m, v in logits.items()})
    for m in state.active:
        if not state.alive[m]:
            continue
        if m == state.primary:
            tok = sample_token(logits[m], state.temperature, state.top_p, state.rng)
            state.y.append(tok)
            state.last[m] = tok
            if tok == state.eos:
                state.done = True
        else:
            tok = non_primary_token_rule(logits[m])
            state.last[m] = tok
            if tok == state.eos:
                state.alive[m] = False
    if len(state.y) >= state.max_len:
        state.done = True


def prefill(model: MoTModel, prompt, K: int | None = None, max_len: int = 16, dead=None,
            temperature: float = 0.0, top_p: float = 1.0, seed: int | None = None) -> GenerationState:
    """Route the prompt, run every active expert over it, emit the first tokens."""
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ValueError("empty prompt")
    if len(prompt) > model.max_seq:
        raise ValueError(f"prompt of {len(prompt)} tokens exceeds max_seq {model.max_seq}")
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    with nx.no_grad():
        s = model.scores([prompt])
        decision = select_topk(s, K or model.cfg.K, tau=model.cfg.tau, dead=set(dead) if dead else None)
        active = [int(m) for m in decision.active[0]]
        caches = {m: model.experts[m].new_cache() for m in active}
        icache = InteractionKVCache(model.cfg.Q)
        x = np.asarray(prompt)[None]
        out = model.forward({m: x for m in active}, decision, caches=caches, icache=icache)
    state = GenerationState(
        decision=decision, active=active, primary=int(decision.primary[0]),
        streams={m: list(prompt) for m in active}, pad={m: [False] * len(prompt) for m in active},
        alive={m: True for m in active}, last={}, caches=caches, icache=icache, max_len=max_len,
        temperature=temperature, top_p=top_p, rng=np.random.default_rng(seed),
    )
    _emit(state, {m: out[m].data[0, -1] for m in active})
    return state


def decode_step(state: GenerationState, model: MoTModel) -> GenerationState:
    """Advance every alive active expert by one token through the caches."""
    if state.done:
        return state
    if state.length >= model.max_seq:
        state.done = True
        return state
    dead = {m for m in state.active if not state.alive[m]}
    tokens, pad = {}, {}
    for m in state.active:
        tok = state.last[m] if m not in dead else PAD
        tokens[m] = np.array([[tok]])
        pad[m] = np.array([[m in dead]])
        state.streams[m].append(tok)
        state.pad[m].append(m in dead)
    with nx.no_grad():
        out = model.forward(tokens, state.decision, pad=pad, caches=state.caches, icache=state.icache, skip=dead)
    state.t += 1
    _emit(state, {m: out[m].data[0, -1] for m in out})
    return state


def generate(model: MoTModel, prompt, max_len: int = 16, K: int | None = None, dead=None,
             temperature: float = 0.0, top_p: float = 1.0, seed: int | None = None,
             kill: dict[int, int] | None = None, on_token: Callable[[int], None] | None = None,
             return_state: bool = False):
    """Generate until the primary emits EOS or ``max_len`` tokens exist.

    ``kill`` maps a decode step to a non-primary expert that is marked dead
    just before that step (failure injection).
    """
    state = prefill(model, prompt, K, max_len, dead, temperature, top_p, seed)
    if on_token:
        on_token(state.y[-1])
    while not state.done:
        if kill and state.t in kill:
            m = kill[state.t]
            if m in state.alive and m != state.primary:
                state.alive[m] = False
        before = len(state.y)
        decode_step(state, model)
        if on_token and len(state.y) > before:
            on_token(state.y[-1])
    return state if return_state else state.y


def full_forward(model: MoTModel, state: GenerationState) -> dict[int, np.ndarray]:
    """Uncached recomputation over the streams consumed so far (the oracle for caching).

    Returns logits ``[n, V]`` per alive-at-position expert; the row for
    position ``p`` corresponds to the token emitted after consuming ``p``.
    """
    with nx.no_grad():
        tokens = {m: np.asarray(state.streams[m])[None] for m in state.active}
        pad = {m: np.asarray(state.pad[m])[None] for m in state.active}
        out = model.forward(tokens, state.decision, pad=pad)
    return {m: v.data[0] for m, v in out.items()}


def generate_batch(model: MoTModel, prompts, max_len: int | list[int] = 16, K: int | None = None,
                   dead=None) -> list[list[int]]:
    """Greedy generation for many prompts, equal to calling :func:`generate` on each.

    Prompts are grouped by length and decoded together. An expert that is dead
    in some rows still runs there on padding tokens whose keys/values are
    flagged as padding, so no row observes it.
    """
    prompts = [[int(t) for t in p] for p in prompts]
    lens = [max_len] * len(prompts) if isinstance(max_len, int) else list(max_len)
    out: list[list[int] | None] = [None] * len(prompts)
    groups: dict[int, list[int]] = {}
    for i, p in enumerate(prompts):
        if not p or len(p) > model.max_seq:
            raise ValueError(f"prompt {i} has invalid length {len(p)}")
        groups.setdefault(len(p), []).append(i)
    dead = set(dead) if dead else None
    with nx.no_grad():
        for idxs in groups.values():
            x = np.array([prompts[i] for i in idxs])
            B, N = x.shape
            limit = np.array([lens[i] for i in idxs])
            s = model.scores([prompts[i] for i in idxs])
            decision = select_topk(s, K or model.cfg.K, tau=model.cfg.tau, dead=dead)
            amask = decision.active_mask
            ids = sorted(set(decision.active.ravel().tolist()))
            caches = {m: model.experts[m].new_cache() for m in ids}
            icache = InteractionKVCache(model.cfg.Q)
            logits = model.forward({m: x for m in ids}, decision, caches=caches, icache=icache)
            alive = amask[:, ids].copy()  # [B, len(ids)]
            prim_col = np.array([ids.index(p) for p in decision.primary])
            ys = [[] for _ in range(B)]
            done = np.zeros(B, dtype=bool)
            pos = N
            while True:
                last = {}
                for j, m in enumerate(ids):
                    tok = logits[m].data[:, -1].argmax(-1)
                    last[m] = tok
                    is_prim = prim_col == j
                    for b in range(B):
                        if done[b] or not alive[b, j]:
                            continue
                        if is_prim[b]:
                            ys[b].append(int(tok[b]))
                        elif tok[b] == EOS:
                            alive[b, j] = False
                for b in range(B):
                    if not done[b] and (ys[b][-1] == EOS or len(ys[b]) >= limit[b]):
                        done[b] = True
                if done.all() or pos >= model.max_seq:
                    break
                tokens, pad = {}, {}
                for j, m in enumerate(ids):
                    off = ~alive[:, j] | done
                    tokens[m] = np.where(off, PAD, last[m])[:, None]
                    pad[m] = off[:, None]
                logits = model.forward(tokens, decision, pad=pad, caches=caches, icache=icache)
                pos += 1
            for r, i in enumerate(idxs):
                out[i] = ys[r]
    return out
