"""Global routing: frozen prompt encoder, MLP scorer, Gumbel Top-K selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor


@dataclass
class RouterConfig:
    d_z: int = 64
    h_r: int = 64
    M: int = 3
    K: int = 2
    tau: float = 1.0
    seed: int = 0
    vocab: int = 64
    max_seq: int = 32
    encoder_layers: int = 2
    encoder_heads: int = 4

    def __post_init__(self):
        if not 1 <= self.K <= self.M:
            raise ValueError(f"need 1 <= K <= M, got K={self.K}, M={self.M}")
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")


class PromptEncoder:
    """Frozen, randomly initialised bidirectional transformer with mean pooling."""

    def __init__(self, d_z: int = 64, vocab: int = 64, max_seq: int = 32, layers: int = 2, heads: int = 4,
                 seed: int = 0):
        rng = np.random.default_rng(seed + 7919)
        s = 1.0 / np.sqrt(d_z)
        self.d_z, self.heads, self.layers = d_z, heads, layers
        self.tok = rng.normal(0, 1.0, (vocab, d_z))
        self.pos = rng.normal(0, 1.0, (max_seq, d_z))
        self.w = [
            {
                "qkv": rng.normal(0, s, (d_z, 3 * d_z)),
                "proj": rng.normal(0, s, (d_z, d_z)),
                "fc": rng.normal(0, s, (d_z, 2 * d_z)),
                "out": rng.normal(0, s / np.sqrt(2), (2 * d_z, d_z)),
            }
            for _ in range(layers)
        ]
        self._memo: dict[tuple[int, ...], np.ndarray] = {}

    @staticmethod
    def _ln(x):
        mu = x.mean(-1, keepdims=True)
        return (x - mu) / np.sqrt(x.var(-1, keepdims=True) + 1e-5)

    def _encode(self, tokens: tuple[int, ...]) -> np.ndarray:
        ids = np.asarray(tokens)
        x = self.tok[ids] + self.pos[: len(ids)]
        H, dh = self.heads, self.d_z // self.heads
        for w in self.w:
            a = self._ln(x)
            q, k, v = np.split(a @ w["qkv"], 3, axis=-1)
            q, k, v = (t.reshape(len(ids), H, dh).transpose(1, 0, 2) for t in (q, k, v))
            sc = q @ k.transpose(0, 2, 1) / np.sqrt(dh)
            sc = np.exp(sc - sc.max(-1, keepdims=True))
            att = sc / sc.sum(-1, keepdims=True)
            x = x + (att @ v).transpose(1, 0, 2).reshape(len(ids), -1) @ w["proj"]
            m = self._ln(x) @ w["fc"]
            x = x + nx.gelu(Tensor(m)).data @ w["out"]
        return self._ln(x).mean(axis=0)

    def encode(self, tokens) -> np.ndarray:
        key = tuple(int(t) for t in tokens)
        if not key:
            raise ValueError("cannot encode an empty prompt")
        if key not in self._memo:
            self._memo[key] = self._encode(key)
        return self._memo[key]

    def encode_batch(self, prompts) -> np.ndarray:
        return np.stack([self.encode(p) for p in prompts])


class Router:
    """Two-layer MLP scorer ``d_z -> h_r -> M`` with a GELU in between."""

    def __init__(self, cfg: RouterConfig, dtype=np.float64):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed + 104729)
        self.encoder = PromptEncoder(cfg.d_z, cfg.vocab, cfg.max_seq, cfg.encoder_layers, cfg.encoder_heads, cfg.seed)
        self.params = {
            "w1": Tensor(rng.normal(0, 1 / np.sqrt(cfg.d_z), (cfg.d_z, cfg.h_r)).astype(dtype), True, "w1"),
            "b1": Tensor(np.zeros(cfg.h_r, dtype), True, "b1"),
            "w2": Tensor(rng.normal(0, 0.1 / np.sqrt(cfg.h_r), (cfg.h_r, cfg.M)).astype(dtype), True, "w2"),
            "b2": Tensor(np.zeros(cfg.M, dtype), True, "b2"),
        }

    def weight_count(self) -> int:
        return self.params["w1"].size + self.params["w2"].size

    def encode_prompt(self, tokens) -> np.ndarray:
        return self.encoder.encode(tokens)

    def score(self, z) -> Tensor:
        """Relevance scores ``[..., M]`` for prompt embeddings ``[..., d_z]``."""
        p = self.params
        if not isinstance(z, Tensor):
            z = Tensor(np.asarray(z, dtype=p["w1"].dtype))
        if z.shape[-1] != self.cfg.d_z:
            raise ValueError(f"prompt embedding width {z.shape[-1]} != d_z {self.cfg.d_z}")
        if z.ndim == 1:
            hidden = nx.gelu(nx.reshape(z, (1, -1)) @ p["w1"] + p["b1"])
            return nx.reshape(hidden @ p["w2"] + p["b2"], (self.cfg.M,))
        return nx.gelu(z @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"]

    def scores_for(self, prompts) -> Tensor:
        return self.score(self.encoder.encode_batch(prompts))


def sample_gumbel(M, seed=None, rng: np.random.Generator | None = None, dtype=np.float64) -> np.ndarray:
    """i.i.d. standard Gumbel draws ``-log(-log u)`` with ``u`` in the open unit interval."""
    rng = rng if rng is not None else np.random.default_rng(seed)
    u = rng.random(M)
    u = np.where(u <= 0.0, np.finfo(np.float64).tiny, u)
    return (-np.log(-np.log(u))).astype(dtype)


@dataclass
class RoutingDecision:
    """Routing for a batch of prompts (leading axis ``B``).

    ``active`` lists each row's K experts by descending perturbed score, so
    ``active[:, 0] == primary``. ``pi`` is the relaxed selection that carries
    gradient; ``pi_ref`` is its detached value at the point the hard choice
    was made.
    """

    scores: Tensor  # [B, M]
    perturbed: np.ndarray  # [B, M]
    active: np.ndarray  # [B, K]
    primary: np.ndarray  # [B]
    pi: Tensor  # [B, M]
    pi_ref: np.ndarray  # [B, M]
    logpi: Tensor | None = None  # log of pi, for numerically safe gates
    logpi_ref: np.ndarray | None = None

    @property
    def M(self) -> int:
        return self.scores.shape[-1]

    @property
    def K(self) -> int:
        return self.active.shape[-1]

    @property
    def batch(self) -> int:
        return self.active.shape[0]

    @property
    def active_mask(self) -> np.ndarray:
        m = np.zeros((self.batch, self.M), dtype=bool)
        np.put_along_axis(m, self.active, True, axis=1)
        return m

    @property
    def primary_mask(self) -> np.ndarray:
        m = np.zeros((self.batch, self.M), dtype=bool)
        m[np.arange(self.batch), self.primary] = True
        return m

    def gates(self) -> Tensor:
        """Straight-through factors ``pi / sg(pi)``: value 1, gradient ``d log pi``.

        Evaluated as ``exp(log pi - sg(log pi))`` so that a selected expert with
        a tiny ``pi`` does not overflow the backward pass.
        """
        if self.logpi is None:
            return nx.div(self.pi, Tensor(np.where(self.pi_ref > 0, self.pi_ref, 1.0).astype(self.pi.dtype)))
        ref = np.where(np.isfinite(self.logpi_ref), self.logpi_ref, 0.0).astype(self.logpi.dtype)
        return nx.exp(nx.sub(self.logpi, Tensor(ref)))

    def hard_plus_soft(self, hard: np.ndarray) -> Tensor:
        """``hard + pi - sg(pi)``: value ``hard``, gradient that of ``pi``."""
        return nx.add(nx.sub(self.pi, Tensor(self.pi_ref)), Tensor(hard.astype(self.pi.dtype)))

    def frozen(self) -> RoutingDecision:
        """Copy whose hard choices and ``pi_ref`` stay fixed under re-scoring."""
        return RoutingDecision(self.scores, self.perturbed.copy(), self.active.copy(), self.primary.copy(),
                               self.pi, self.pi_ref.copy(), self.logpi,
                               None if self.logpi_ref is None else self.logpi_ref.copy())

    def row(self, b: int) -> dict:
        return {"active": self.active[b].tolist(), "primary": int(self.primary[b]),
                "scores": self.scores.data[b].tolist()}


def _topk_rows(perturbed: np.ndarray, K: int) -> np.ndarray:
    # stable sort on the negated scores keeps lower indices first among ties
    return np.argsort(-perturbed, axis=-1, kind="stable")[:, :K]


def select_topk(s: Tensor, K: int, noise=None, tau: float = 1.0, dead=None,
                reuse: RoutingDecision | None = None) -> RoutingDecision:
    """Hard Top-K over ``(s + g) / tau`` with a softmax relaxation for backward.

    ``s`` is ``[M]`` or ``[B, M]``. ``dead`` (set of expert ids) forces those
    experts' perturbed scores to -inf and clamps K to the survivors. With
    ``reuse`` the hard selection and ``pi_ref`` are taken from an earlier
    decision, so that the result is a smooth function of ``s``; gradient
    checks rely on this.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    single = s.ndim == 1
    if single:
        s = nx.reshape(s, (1, -1))
    B, M = s.shape
    if K > M:
        raise ValueError(f"K={K} exceeds pool size M={M}")
    g = np.zeros((B, M)) if noise is None else np.broadcast_to(np.asarray(noise, dtype=np.float64), (B, M))
    dead_mask = np.zeros(M, dtype=bool)
    if dead:
        dead_mask[list(dead)] = True
        if dead_mask.all():
            raise ValueError("every expert is dead")
        K = min(K, int((~dead_mask).sum()))
    shift = np.where(dead_mask, -np.inf, 0.0)
    z = nx.add(nx.scale(s, 1.0 / tau), Tensor((g / tau).astype(s.dtype)))
    pi = nx.softmax_last(z, shift.astype(s.dtype)[None, :].repeat(B, 0) if dead else None)
    logpi = nx.log_softmax_last(nx.add(z, Tensor(shift.astype(s.dtype))) if dead else z)
    if reuse is not None:
        return RoutingDecision(s, reuse.perturbed, reuse.active, reuse.primary, pi, reuse.pi_ref, logpi,
                               reuse.logpi_ref)
    perturbed = (s.data.astype(np.float64) + g) / tau + shift
    active = _topk_rows(perturbed, K)
    return RoutingDecision(s, perturbed, active, active[:, 0].copy(), pi, pi.data.copy(), logpi, logpi.data.copy())


def drop_experts(s: Tensor, K: int, dead, noise=None, tau: float = 1.0) -> RoutingDecision:
    """Routing over the surviving pool; dead experts can never be selected."""
    return select_topk(s, K, noise=noise, tau=tau, dead=set(dead) or None)
