"""Trainable-parameter accounting: closed form against instantiated tensors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..interaction import InteractionLayer
from ..router import Router, RouterConfig


@dataclass
class ParamsReport:
    router: int
    proj: int
    attn: int
    total: int
    overhead_pct: float | None
    instantiated: dict[str, int]

    def record(self) -> dict:
        return {"router": self.router, "proj": self.proj, "attn": self.attn, "total": self.total,
                "overhead_pct": self.overhead_pct, "instantiated": dict(self.instantiated)}


def closed_form(dims: list[int], Q: int, d_s: int, d_z: int, h_r: int, cross_attn: bool = True) -> dict[str, int]:
    M = len(dims)
    router = d_z * h_r + h_r * M
    proj = Q * 2 * d_s * sum(dims)
    attn = Q * 4 * d_s * d_s if cross_attn else 0
    return {"router": router, "proj": proj, "attn": attn, "total": router + proj + attn}


def instantiated(dims: list[int], Q: int, d_s: int, d_z: int, h_r: int, cross_attn: bool = True,
                 heads: int = 1) -> dict[str, int]:
    """Count by building the router and every interaction layer and summing weight sizes."""
    router = Router(RouterConfig(d_z=d_z, h_r=h_r, M=len(dims), K=1, encoder_layers=0, encoder_heads=1))
    proj = attn = 0
    for q in range(Q):
        layer = InteractionLayer(q, dims, d_s, heads=heads)
        for k, p in layer.params.items():
            if k[0] in "FR":
                proj += p.size
            elif cross_attn:
                attn += p.size
    r = router.weight_count()
    return {"router": r, "proj": proj, "attn": attn, "total": r + proj + attn}


def params_report(dims: list[int], Q: int, d_s: int, d_z: int, h_r: int, cross_attn: bool = True,
                  expert_params: int | None = None, heads: int = 1) -> ParamsReport:
    """Both counts; any disagreement is a hard error.

    ``heads`` only has to divide ``d_s``; it does not change any count.
    """
    cf = closed_form(dims, Q, d_s, d_z, h_r, cross_attn)
    inst = instantiated(dims, Q, d_s, d_z, h_r, cross_attn, heads)
    if cf != inst:
        raise AssertionError(f"closed-form counts {cf} disagree with instantiated {inst}")
    pct = None if not expert_params else 100.0 * cf["total"] / expert_params
    return ParamsReport(cf["router"], cf["proj"], cf["attn"], cf["total"], pct, inst)


def model_params_report(model) -> ParamsReport:
    """Report for a built :class:`~mot.model.MoTModel`, checked against its live tensors."""
    cfg = model.cfg
    dims = [e.cfg.hidden for e in model.experts]
    expert_params = sum(int(np.prod(p.shape)) for p in model.frozen_params().values())
    rep = params_report(dims, cfg.Q, cfg.d_s, cfg.d_z, cfg.h_r, cfg.cross_attn, expert_params, cfg.heads)
    live = sum(p.size for k, p in model.trainable().items() if not k.endswith(("/b1", "/b2")))
    if live != rep.total:
        raise AssertionError(f"model holds {live} trainable weights, report says {rep.total}")
    return rep
