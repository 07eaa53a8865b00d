"""Toy decoder-only expert backbones and their partition into stacks."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Tensor

log = logging.getLogger(__name__)

PLACEMENTS = ("uniform", "shallow", "intermediate", "deep")


@dataclass
class ExpertConfig:
    expert_id: int
    num_layers: int
    hidden: int
    heads: int = 4
    vocab: int = 64
    max_seq: int = 32
    mlp_ratio: float = 2.0

    def __post_init__(self):
        if self.num_layers < 1 or self.hidden < 1 or self.heads < 1:
            raise ValueError(f"expert {self.expert_id}: sizes must be positive")
        if self.hidden % self.heads:
            raise ValueError(f"expert {self.expert_id}: hidden {self.hidden} not divisible by heads {self.heads}")


@dataclass
class StackPlan:
    """Layer ranges executed before each interaction point.

    ``stacks[q]`` is the half-open layer range run before interaction ``q``;
    ``tail`` is whatever remains after the last interaction point.
    """

    stacks: list[tuple[int, int]]
    tail: tuple[int, int]
    placement: str = "uniform"

    @property
    def sizes(self) -> list[int]:
        return [b - a for a, b in self.stacks]

    @property
    def interaction_points(self) -> list[int]:
        """1-based layer numbers after which interaction happens."""
        return [b for _, b in self.stacks]


def plan_stacks(num_layers: int, Q: int, placement: str = "uniform") -> StackPlan:
    if not 1 <= Q <= num_layers:
        raise ValueError(f"need 1 <= Q <= L, got Q={Q}, L={num_layers}")
    if placement not in PLACEMENTS:
        raise ValueError(f"unknown placement {placement!r}")
    if placement == "uniform":
        base, rem = divmod(num_layers, Q)
        ends, acc = [], 0
        for q in range(Q):
            acc += base + (1 if q < rem else 0)
            ends.append(acc)
    else:
        half = -(-num_layers // 2)
        lo = {"shallow": 0, "intermediate": (num_layers - half) // 2, "deep": num_layers - half}[placement]
        window = list(range(lo + 1, lo + half + 1))
        if Q > len(window):
            raise ValueError(f"Q={Q} exceeds the {len(window)}-layer {placement} window")
        # evenly spaced, always ending at the window's last layer
        ends = [window[int(round((q + 1) * len(window) / Q)) - 1] for q in range(Q)]
    stacks, start = [], 0
    for e in ends:
        stacks.append((start, e))
        start = e
    return StackPlan(stacks=stacks, tail=(start, num_layers), placement=placement)


class BackboneKVCache:
    """Per-layer keys/values (numpy, ``[B, H, T, dh]``) for one expert."""

    def __init__(self, num_layers: int):
        self.keys: list[np.ndarray | None] = [None] * num_layers
        self.values: list[np.ndarray | None] = [None] * num_layers
        self.length = 0

    def layer_length(self, i: int) -> int:
        return 0 if self.keys[i] is None else self.keys[i].shape[-2]


def _init_params(cfg: ExpertConfig, rng: np.random.Generator, dtype) -> dict[str, np.ndarray]:
    d, V = cfg.hidden, cfg.vocab
    hid = int(round(d * cfg.mlp_ratio))
    std = 0.02
    proj_std = std / np.sqrt(2 * cfg.num_layers)
    p = {
        "tok_emb": rng.normal(0, std, (V, d)),
        "pos_emb": rng.normal(0, std, (cfg.max_seq, d)),
        "ln_f.g": np.ones(d),
        "ln_f.b": np.zeros(d),
        "head": rng.normal(0, std, (d, V)),
    }
    for i in range(cfg.num_layers):
        p[f"h{i}.ln1.g"] = np.ones(d)
        p[f"h{i}.ln1.b"] = np.zeros(d)
        p[f"h{i}.qkv"] = rng.normal(0, std, (d, 3 * d))
        p[f"h{i}.proj"] = rng.normal(0, proj_std, (d, d))
        p[f"h{i}.ln2.g"] = np.ones(d)
        p[f"h{i}.ln2.b"] = np.zeros(d)
        p[f"h{i}.fc"] = rng.normal(0, std, (d, hid))
        p[f"h{i}.fc.b"] = np.zeros(hid)
        p[f"h{i}.out"] = rng.normal(0, proj_std, (hid, d))
        p[f"h{i}.out.b"] = np.zeros(d)
    return {k: v.astype(dtype) for k, v in p.items()}


class ExpertBackbone:
    """Pre-norm GPT-style decoder with learned positions and a bias-free head."""

    def __init__(self, cfg: ExpertConfig, seed: int = 0, dtype=np.float32, params: dict | None = None):
        self.cfg = cfg
        raw = params if params is not None else _init_params(cfg, np.random.default_rng(seed), dtype)
        self.params = {k: Tensor(np.asarray(v, dtype=dtype), requires_grad=True, name=k) for k, v in raw.items()}
        self.frozen = False
        self.pretrain_log: list[dict] = []

    # -- state ------------------------------------------------------------------
    @property
    def dtype(self):
        return self.params["tok_emb"].dtype

    def freeze(self) -> ExpertBackbone:
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        self.frozen = True
        return self

    def unfreeze(self) -> ExpertBackbone:
        for p in self.params.values():
            p.requires_grad = True
            p.grad = np.zeros_like(p.data)
        self.frozen = False
        return self

    def weight_hash(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k].data).tobytes())
        return h.hexdigest()

    def astype(self, dtype) -> ExpertBackbone:
        out = ExpertBackbone(self.cfg, dtype=dtype, params={k: p.data for k, p in self.params.items()})
        if self.frozen:
            out.freeze()
        out.pretrain_log = list(self.pretrain_log)
        return out

    def new_cache(self) -> BackboneKVCache:
        return BackboneKVCache(self.cfg.num_layers)

    # -- forward pieces ------------------------------------------------------------
    def embed(self, tokens, offset: int = 0) -> Tensor:
        """Token plus positional embedding; ``tokens`` is ``[N]`` or ``[B, N]``."""
        ids = np.asarray(tokens, dtype=np.int64)
        n = ids.shape[-1]
        if offset + n > self.cfg.max_seq:
            raise ValueError(f"sequence of {offset + n} positions exceeds max_seq {self.cfg.max_seq}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab):
            raise ValueError(f"token id outside vocabulary [0, {self.cfg.vocab})")
        tok = nx.embedding(self.params["tok_emb"], ids)
        pos = nx.index(self.params["pos_emb"], slice(offset, offset + n))
        return tok + pos

    def _attention(self, x: Tensor, i: int, cache: BackboneKVCache | None) -> Tensor:
        p = self.params
        H = self.cfg.heads
        d = self.cfg.hidden
        qkv = x @ p[f"h{i}.qkv"]
        q, k, v = nx.split(qkv, [d, d, d], axis=-1)
        q, k, v = nx.split_heads(q, H), nx.split_heads(k, H), nx.split_heads(v, H)
        n = x.shape[-2]
        past = 0
        if cache is not None:
            past = cache.layer_length(i)
            if past:
                k = nx.concat([Tensor(cache.keys[i]), k], axis=-2)
                v = nx.concat([Tensor(cache.values[i]), v], axis=-2)
            cache.keys[i] = k.data
            cache.values[i] = v.data
        T = past + n
        scores = nx.scale(q @ k.T, 1.0 / np.sqrt(d // H))
        allowed = np.arange(T)[None, :] <= (past + np.arange(n))[:, None]
        mask = np.where(allowed, 0.0, nx.NEG_INF).astype(x.dtype)
        att = nx.softmax_last(scores, mask)
        y = nx.merge_heads(att @ v)
        return y @ p[f"h{i}.proj"]

    def block(self, h: Tensor, i: int, cache: BackboneKVCache | None = None) -> Tensor:
        p = self.params
        a = nx.layer_norm(h, p[f"h{i}.ln1.g"], p[f"h{i}.ln1.b"])
        h = h + self._attention(a, i, cache)
        m = nx.layer_norm(h, p[f"h{i}.ln2.g"], p[f"h{i}.ln2.b"])
        m = nx.gelu(m @ p[f"h{i}.fc"] + p[f"h{i}.fc.b"]) @ p[f"h{i}.out"] + p[f"h{i}.out.b"]
        return h + m

    def forward_layers(self, h: Tensor, layers: tuple[int, int], cache: BackboneKVCache | None = None) -> Tensor:
        for i in range(*layers):
            if cache is not None and cache.layer_length(i) != cache.length:
                raise ValueError(f"cache for layer {i} holds {cache.layer_length(i)} positions, expected {cache.length}")
            h = self.block(h, i, cache)
        return h

    def forward_stack(self, h: Tensor, plan: StackPlan, q: int, cache: BackboneKVCache | None = None) -> Tensor:
        return self.forward_layers(h, plan.stacks[q], cache)

    def lm_head(self, h: Tensor) -> Tensor:
        p = self.params
        return nx.layer_norm(h, p["ln_f.g"], p["ln_f.b"]) @ p["head"]

    def forward(self, tokens, cache: BackboneKVCache | None = None) -> Tensor:
        """Standalone logits for ``tokens`` (``[N]`` or ``[B, N]``)."""
        offset = cache.length if cache is not None else 0
        h = self.embed(tokens, offset)
        h = self.forward_layers(h, (0, self.cfg.num_layers), cache)
        if cache is not None:
            cache.length += np.asarray(tokens).shape[-1]
        return self.lm_head(h)

    def greedy(self, prompt, max_new: int, eos: int | None = None) -> list[int]:
        out = []
        with nx.no_grad():
            cache = self.new_cache()
            logits = self.forward(np.asarray(prompt)[None], cache)
            while True:
                tok = int(np.argmax(logits.data[0, -1]))
                out.append(tok)
                if len(out) >= max_new or tok == eos or cache.length >= self.cfg.max_seq:
                    break
                logits = self.forward(np.array([[tok]]), cache)
        return out


def pretrain_specialist(backbone: ExpertBackbone, task, steps: int = 1500, batch_size: int = 32, lr: float = 3e-3,
                        seed: int = 0, eval_every: int = 250, target: float = 0.9,
                        log_path: str | Path | None = None) -> ExpertBackbone:
    """Train ``backbone`` on one synthetic task, then freeze it.

    ``task`` is a :class:`mot.harness.tasks.TaskData`. Training stops early
    once held-out exact match reaches ``target``.
    """
    from .harness.tasks import batchify, exact_match
    from .optim import AdamW

    if backbone.frozen:
        raise ValueError("pretrain_specialist needs an unfrozen backbone")
    rng = np.random.default_rng(seed)
    params = list(backbone.params.values())
    opt = AdamW(params, lr=lr, weight_decay=0.01, warmup=min(100, steps // 10), clip=1.0)
    records = []
    acc = 0.0
    for step in range(1, steps + 1):
        idx = rng.integers(0, len(task.train), batch_size)
        batch = batchify([task.train[j] for j in idx], task.unknown_targets, rng)
        logits = backbone.forward(batch.inputs)
        loss = nx.cross_entropy(logits, batch.targets, ignore=~batch.loss_mask)
        for p in params:
            p.zero_grad()
        loss.backward()
        opt.step()
        if step % eval_every == 0 or step == steps:
            acc = exact_match(backbone, task.heldout)
            rec = {"step": step, "loss": float(loss.item()), "heldout_acc": acc}
            records.append(rec)
            log.info("pretrain %s expert=%d %s", task.spec.kind, backbone.cfg.expert_id, rec)
            if acc >= target:
                break
    if acc < 0.5:
        records.append({"warning": f"held-out accuracy {acc:.3f} below 0.5"})
        log.warning("expert %d failed to reach 0.5 on %s (%.3f)", backbone.cfg.expert_id, task.spec.kind, acc)
    backbone.pretrain_log = records
    backbone.freeze()
    if log_path is not None:
        Path(log_path).write_text("".join(json.dumps(r) + "\n" for r in records))
    return backbone
