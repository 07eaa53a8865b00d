"""The full system: frozen experts, router and interaction layers in one forward."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .expert import BackboneKVCache, ExpertBackbone, plan_stacks
from .interaction import InteractionKVCache, InteractionLayer, apply_interaction
from .numerics import Tensor
from .router import Router, RouterConfig, RoutingDecision, select_topk

ROUTE_GRAD_MODES = ("interaction", "interaction+output")


@dataclass
class MoTConfig:
    Q: int = 2
    d_s: int = 32
    heads: int = 8
    K: int = 2
    tau: float = 1.0
    placement: str = "uniform"
    dropout: float = 0.1
    cross_attn: bool = True
    literal_scale: bool = False
    route_grad: str = "interaction+output"
    d_z: int = 64
    h_r: int = 64
    encoder_layers: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.route_grad not in ROUTE_GRAD_MODES:
            raise ValueError(f"route_grad must be one of {ROUTE_GRAD_MODES}")
        if self.d_s % self.heads:
            raise ValueError(f"d_s={self.d_s} not divisible by heads={self.heads}")


class MoTModel:
    def __init__(self, experts: list[ExpertBackbone], cfg: MoTConfig, dtype=np.float32):
        if not experts:
            raise ValueError("empty expert pool")
        vocab = {e.cfg.vocab for e in experts}
        if len(vocab) != 1:
            raise ValueError(f"experts disagree on vocabulary size: {sorted(vocab)}")
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.experts = [e if e.dtype == self.dtype else e.astype(self.dtype) for e in experts]
        for e in self.experts:
            if not e.frozen:
                e.freeze()
        self.M = len(experts)
        self.vocab = vocab.pop()
        self.max_seq = min(e.cfg.max_seq for e in self.experts)
        self.plans = [plan_stacks(e.cfg.num_layers, cfg.Q, cfg.placement) for e in self.experts]
        self.router = Router(RouterConfig(d_z=cfg.d_z, h_r=cfg.h_r, M=self.M, K=cfg.K, tau=cfg.tau, seed=cfg.seed,
                                          vocab=self.vocab, max_seq=self.max_seq,
                                          encoder_layers=cfg.encoder_layers), dtype=self.dtype)
        dims = [e.cfg.hidden for e in self.experts]
        self.layers = [InteractionLayer(q, dims, cfg.d_s, cfg.heads, cfg.dropout, cfg.seed, self.dtype,
                                        cfg.literal_scale) for q in range(cfg.Q)]

    # -- parameters -----------------------------------------------------------------
    def trainable(self) -> dict[str, Tensor]:
        out = {f"router/{k}": p for k, p in self.router.params.items()}
        for layer in self.layers:
            if not self.cfg.cross_attn:
                out.update({f"interaction/layer{layer.index}/{k}": p for k, p in layer.params.items()
                            if k.startswith(("F", "R"))})
            else:
                out.update({f"interaction/layer{layer.index}/{k}": p for k, p in layer.params.items()})
        return out

    def frozen_params(self) -> dict[str, Tensor]:
        return {f"expert{m}/{k}": p for m, e in enumerate(self.experts) for k, p in e.params.items()}

    def zero_interaction(self) -> None:
        for layer in self.layers:
            for p in layer.params.values():
                p.data[...] = 0

    # -- routing ---------------------------------------------------------------------
    def scores(self, prompts) -> Tensor:
        return self.router.scores_for(prompts)

    def route(self, prompts, noise=None, dead=None, K: int | None = None,
              reuse: RoutingDecision | None = None) -> RoutingDecision:
        s = self.scores(prompts)
        return select_topk(s, K or self.cfg.K, noise=noise, tau=self.cfg.tau, dead=dead, reuse=reuse)

    # -- forward ----------------------------------------------------------------------
    def forward(self, tokens: dict[int, np.ndarray], decision: RoutingDecision,
                pad: dict[int, np.ndarray] | None = None, caches: dict[int, BackboneKVCache] | None = None,
                icache: InteractionKVCache | None = None, rng: np.random.Generator | None = None,
                skip: set[int] | None = None) -> dict[int, Tensor]:
        """Logits ``[B, n, V]`` for each expert in ``tokens``.

        Every expert listed in ``tokens`` runs through its stacks; the routing
        decides which of them interact. Experts in ``skip`` (dead during
        decoding) are not computed and only contribute padded keys/values.
        """
        skip = skip or set()
        ids = sorted(tokens)
        offset = 0
        if caches is not None:
            lens = {caches[m].length for m in ids if m not in skip}
            if len(lens) != 1:
                raise ValueError(f"backbone caches out of sync: {sorted(lens)}")
            offset = lens.pop()
        n = np.asarray(tokens[ids[0]]).shape[-1]
        B = decision.batch
        h: dict[int, Tensor] = {}
        for m in ids:
            if m not in skip:
                h[m] = self.experts[m].embed(tokens[m], offset)
        for q, layer in enumerate(self.layers):
            for m in ids:
                if m not in skip:
                    h[m] = self.experts[m].forward_layers(h[m], self.plans[m].stacks[q],
                                                          caches[m] if caches else None)
            full = {m: h[m] if m not in skip else Tensor(np.zeros((B, n, self.experts[m].cfg.hidden), self.dtype))
                    for m in ids}
            full = apply_interaction(layer, full, decision, pad=pad, cache=icache, query_offset=offset,
                                     cross_attn=self.cfg.cross_attn, rng=rng)
            h = {m: full[m] for m in ids if m not in skip}
        logits = {}
        for m in h:
            hm = self.experts[m].forward_layers(h[m], self.plans[m].tail, caches[m] if caches else None)
            logits[m] = self.experts[m].lm_head(hm)
        if caches is not None:
            for m in ids:
                if m not in skip:
                    caches[m].length += n
        return logits

    def primary_logits(self, logits: dict[int, Tensor], decision: RoutingDecision) -> Tensor:
        """The primary's logits per row.

        In ``interaction+output`` mode the selection is a straight-through
        one-hot over every computed expert, so the router also receives
        ``d loss / d logits_m`` against each expert's own logits.
        """
        ids = sorted(logits)
        pm = decision.primary_mask
        if self.cfg.route_grad == "interaction+output" and len(ids) == self.M:
            w = decision.hard_plus_soft(pm)
            out = None
            for m in ids:
                term = nx.reshape(w[:, m], (-1, 1, 1)) * logits[m]
                out = term if out is None else out + term
            return out
        out = None
        for m in ids:
            term = Tensor(pm[:, m].astype(self.dtype)[:, None, None]) * logits[m]
            out = term if out is None else out + term
        return out

    def forward_batch(self, inputs: np.ndarray, decision: RoutingDecision, pad: np.ndarray | None = None,
                      rng: np.random.Generator | None = None) -> tuple[Tensor, dict[int, Tensor]]:
        """Teacher-forced pass of the whole pool over one shared token batch."""
        tokens = {m: inputs for m in range(self.M)}
        pads = {m: pad for m in range(self.M)} if pad is not None else None
        logits = self.forward(tokens, decision, pad=pads, rng=rng)
        return self.primary_logits(logits, decision), logits
