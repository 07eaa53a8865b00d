"""Joint objective over router and interaction parameters, and the training step."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .harness.tasks import Batch
from .model import MoTModel
from .numerics import Tensor
from .optim import AdamW, OptimState, adamw_update, warmup_lr  # noqa: F401  (re-exported)
from .router import RoutingDecision, sample_gumbel

log = logging.getLogger(__name__)

KL_EPS = 1e-12


@dataclass
class LossWeights:
    ent: float = 0.01
    bal: float = 0.01
    con: float = 0.05

    def __post_init__(self):
        if min(self.ent, self.bal, self.con) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossBreakdown:
    lm: float
    ent: float
    bal: float
    con: float
    total: float
    f: list[float]
    step: int = 0
    lr: float = 0.0
    aborted: bool = False

    def record(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Individual terms
# ---------------------------------------------------------------------------


def lm_loss(logits: Tensor, targets, loss_mask=None) -> Tensor:
    """Mean next-token NLL of the primary over scored target positions."""
    ignore = None if loss_mask is None else ~np.asarray(loss_mask, dtype=bool)
    return nx.cross_entropy(logits, targets, ignore=ignore)


def entropy_loss(s, tau: float = 1.0) -> Tensor:
    """Negative Shannon entropy (nats) of ``softmax(s / tau)``, averaged over rows."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    s = nx.as_tensor(s)
    logp = nx.log_softmax_last(nx.scale(s, 1.0 / tau))
    p = nx.exp(logp)
    neg_h = nx.tsum(p * logp, axis=-1)
    return nx.mean(neg_h)


def activation_frequencies(active_sets, M: int) -> np.ndarray:
    """``f_m``: fraction of queries whose active set contains expert ``m``."""
    mask = np.zeros((len(active_sets), M))
    for i, act in enumerate(active_sets):
        mask[i, list(act)] = 1.0
    return mask.mean(axis=0)


def balance_loss(active_sets, M: int | None = None) -> float:
    """Squared coefficient of variation of the activation frequencies (population std)."""
    if isinstance(active_sets, np.ndarray) and active_sets.dtype == bool:
        f = active_sets.mean(axis=0)
    else:
        f = activation_frequencies(active_sets, M)
    return float((f.std() / f.mean()) ** 2)


def balance_loss_st(decision: RoutingDecision) -> tuple[Tensor, np.ndarray]:
    """Balance loss whose value uses hard indicators and whose gradient uses ``pi``."""
    ind = decision.hard_plus_soft(decision.active_mask)  # [B, M]
    f = nx.mean(ind, axis=0)
    mu = nx.mean(f)
    dev = f - mu
    var = nx.mean(nx.square(dev))
    return var / nx.square(mu), decision.active_mask.mean(axis=0)


def consistency_loss(p0, p1, mask=None) -> Tensor:
    """Symmetric token-wise KL, ``(1/2T) * sum_t [KL(p0||p1) + KL(p1||p0)]``.

    ``p0``/``p1`` are probability tensors ``[..., V]``; ``mask`` selects the
    ``T`` scored positions.
    """
    p0, p1 = nx.as_tensor(p0), nx.as_tensor(p1)
    l0 = nx.log(p0 + KL_EPS)
    l1 = nx.log(p1 + KL_EPS)
    sym = nx.tsum((p0 - p1) * (l0 - l1), axis=-1)  # KL01 + KL10 per position
    if mask is None:
        T = int(np.prod(sym.shape)) or 1
        return nx.scale(nx.tsum(sym), 1.0 / (2 * T))
    m = np.asarray(mask, dtype=sym.dtype)
    T = max(float(m.sum()), 1.0)
    return nx.scale(nx.tsum(sym * Tensor(m)), 1.0 / (2 * T))


# ---------------------------------------------------------------------------
# Training step
# ---------------------------------------------------------------------------


@dataclass
class StepTensors:
    lm: Tensor
    ent: Tensor
    bal: Tensor
    con: Tensor | None
    total: Tensor
    f: np.ndarray
    decisions: tuple[RoutingDecision, RoutingDecision | None]


def second_routed_pass(model: MoTModel, batch: Batch, s: Tensor, g1, reuse: RoutingDecision | None = None,
                       rng=None) -> tuple[Tensor, RoutingDecision]:
    """Independent full forward under the alternative selection ``TopK(s + g1)``."""
    d1 = _select(model, s, g1, reuse)
    logits1, _ = model.forward_batch(batch.inputs, d1, pad=batch.pad, rng=rng)
    return logits1, d1


def _select(model: MoTModel, s: Tensor, g, reuse):
    from .router import select_topk

    return select_topk(s, model.cfg.K, noise=g, tau=model.cfg.tau, reuse=reuse)


def compute_losses(model: MoTModel, batch: Batch, weights: LossWeights, g0, g1, rng=None,
                   reuse: tuple[RoutingDecision, RoutingDecision | None] | None = None) -> StepTensors:
    """Forward half of one training step: every loss term as a graph node.

    ``reuse`` pins the hard selections and detached relaxations of an earlier
    call, which makes the result a smooth function of the trainable weights.
    """
    s = model.scores(batch.prompts)
    d0 = _select(model, s, g0, reuse[0] if reuse else None)
    logits0, _ = model.forward_batch(batch.inputs, d0, pad=batch.pad, rng=rng)
    lm = lm_loss(logits0, batch.targets, batch.loss_mask)
    ent = entropy_loss(s, model.cfg.tau)
    bal, f = balance_loss_st(d0)
    total = lm + nx.scale(ent, weights.ent) + nx.scale(bal, weights.bal)
    con = None
    d1 = None
    if weights.con > 0:
        logits1, d1 = second_routed_pass(model, batch, s, g1, reuse[1] if reuse else None, rng=rng)
        p0 = nx.softmax_last(logits0)
        p1 = nx.softmax_last(logits1)
        con = consistency_loss(p0, p1, batch.loss_mask)
        total = total + nx.scale(con, weights.con)
    return StepTensors(lm, ent, bal, con, total, f, (d0, d1))


def train_step(model: MoTModel, batch: Batch, opt: AdamW, weights: LossWeights, rng: np.random.Generator,
               dropout: bool = True) -> LossBreakdown:
    B = len(batch.prompts)
    g0 = sample_gumbel((B, model.M), rng=rng)
    g1 = sample_gumbel((B, model.M), rng=rng)
    out = compute_losses(model, batch, weights, g0, g1, rng=rng if dropout else None)
    vals = dict(lm=out.lm.item(), ent=out.ent.item(), bal=out.bal.item(),
                con=out.con.item() if out.con is not None else 0.0, total=out.total.item())
    if not all(math.isfinite(v) for v in vals.values()):
        log.warning("non-finite loss at step %d, update skipped: %s", opt.state.step, vals)
        return LossBreakdown(**vals, f=out.f.tolist(), step=opt.state.step, aborted=True)
    opt.zero_grad()
    out.total.backward()
    if not all(p.grad is None or np.isfinite(p.grad).all() for p in opt.params):
        log.warning("non-finite gradient at step %d, update skipped", opt.state.step)
        return LossBreakdown(**vals, f=out.f.tolist(), step=opt.state.step, aborted=True)
    lr = opt.step()
    return LossBreakdown(**vals, f=out.f.tolist(), step=opt.state.step, lr=lr)


@dataclass
class TrainConfig:
    steps: int = 600
    batch_size: int = 32
    lr: float = 3e-3
    warmup: int = 50
    weight_decay: float = 0.01
    clip: float = 1.0
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    log_every: int = 50


def make_optimizer(model: MoTModel, tc: TrainConfig) -> AdamW:
    return AdamW(list(model.trainable().values()), lr=tc.lr, weight_decay=tc.weight_decay, warmup=tc.warmup,
                 clip=tc.clip)


def train(model: MoTModel, sampler, tc: TrainConfig, log_path: str | Path | None = None,
          callback=None) -> list[LossBreakdown]:
    """Run ``tc.steps`` training steps; ``sampler(rng, B)`` yields a :class:`Batch`.

    Every step's breakdown is returned; when ``log_path`` is given, every
    step is also written as one JSON line. ``callback(step, model, record)``
    runs after each step (step counted from 1).
    """
    rng = np.random.default_rng(tc.seed)
    opt = make_optimizer(model, tc)
    history = []
    fh = open(log_path, "w") if log_path else None
    try:
        for step in range(tc.steps):
            batch = sampler(rng, tc.batch_size)
            rec = train_step(model, batch, opt, tc.weights, rng)
            history.append(rec)
            if callback:
                callback(step + 1, model, rec)
            if fh:
                fh.write(json.dumps(rec.record()) + "\n")
            if step % tc.log_every == 0 or step == tc.steps - 1:
                log.info("step %d lm=%.4f ent=%.4f bal=%.4f con=%.4f f=%s", step, rec.lm, rec.ent, rec.bal,
                         rec.con, np.round(rec.f, 3).tolist())
    finally:
        if fh:
            fh.close()
    return history
