"""Interaction layers: projectors into a shared space and primary cross-attention."""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .router import RoutingDecision


class InteractionLayer:
    """One stack boundary: per-expert forward/reverse projectors plus shared W_Q/K/V/O.

    All weights are bias-free so the parameter count matches the closed form
    ``2 * d_s * sum(d_m) + 4 * d_s**2``.
    """

    def __init__(self, index: int, dims: list[int], d_s: int, heads: int = 8, dropout: float = 0.1,
                 seed: int = 0, dtype=np.float32, literal_scale: bool = False, reverse_std: float = 0.02):
        if d_s % heads:
            raise ValueError(f"shared width {d_s} not divisible by {heads} heads")
        self.index = index
        self.dims = list(dims)
        self.d_s, self.heads, self.dropout = d_s, heads, dropout
        self.literal_scale = literal_scale
        rng = np.random.default_rng(seed * 7907 + index)
        p = {}
        for m, d in enumerate(dims):
            p[f"F{m}"] = rng.normal(0, 1 / np.sqrt(d), (d, d_s))
            p[f"R{m}"] = rng.normal(0, reverse_std, (d_s, d))
        for name in ("WQ", "WK", "WV", "WO"):
            p[name] = rng.normal(0, 1 / np.sqrt(d_s), (d_s, d_s))
        self.params = {k: Tensor(v.astype(dtype), requires_grad=True, name=f"interaction/layer{index}/{k}")
                       for k, v in p.items()}

    def weight_count(self) -> int:
        return sum(p.size for p in self.params.values())

    @property
    def attn_scale(self) -> float:
        width = self.d_s if self.literal_scale else self.d_s // self.heads
        return 1.0 / np.sqrt(width)

    def project_forward(self, h: Tensor, m: int) -> Tensor:
        return h @ self.params[f"F{m}"]

    def project_reverse(self, o: Tensor, m: int) -> Tensor:
        return o @ self.params[f"R{m}"]


class InteractionKVCache:
    """Shared-space keys/values per layer and expert, plus padding flags."""

    def __init__(self, num_layers: int):
        self.keys: list[dict[int, np.ndarray]] = [{} for _ in range(num_layers)]
        self.values: list[dict[int, np.ndarray]] = [{} for _ in range(num_layers)]
        self.pad: list[dict[int, np.ndarray]] = [{} for _ in range(num_layers)]

    def length(self, layer: int) -> int:
        lens = {v.shape[-1] for v in self.pad[layer].values()}
        if len(lens) > 1:
            raise ValueError(f"interaction cache layer {layer} out of sync: lengths {sorted(lens)}")
        return lens.pop() if lens else 0


def build_block_causal_mask(n_q: int, block_lengths: list[int], query_offset: int = 0, pad=None,
                            active=None, dtype=np.float64) -> np.ndarray:
    """Additive mask ``[(B,) n_q, sum(block_lengths)]`` with 0 for visible and -inf for hidden.

    Query ``i`` sits at absolute position ``query_offset + i`` and sees, in
    every block, the positions at or before its own. ``pad`` is a list (one
    per block) of boolean arrays ``[len]`` or ``[B, len]``; padded columns are
    hidden from every query. ``active`` ``[B, n_blocks]`` hides whole blocks.
    """
    lengths = list(block_lengths)
    if pad is None and len(set(lengths)) > 1:
        raise ValueError(f"blocks of unequal length {lengths} need padding flags")
    if pad is None and lengths and min(lengths) < query_offset + n_q:
        raise ValueError(f"block length {min(lengths)} shorter than last query position {query_offset + n_q - 1}")
    qpos = query_offset + np.arange(n_q)
    cols = []
    for b, L in enumerate(lengths):
        vis = np.arange(L)[None, :] <= qpos[:, None]  # [n_q, L]
        if pad is not None:
            pb = np.asarray(pad[b], dtype=bool)
            vis = vis & ~pb[..., None, :]
        if active is not None:
            act = np.asarray(active, dtype=bool)[:, b]
            vis = np.broadcast_to(vis, (act.shape[0], n_q, L)) & act[:, None, None]
        cols.append(vis)
    if not cols:
        return np.zeros((n_q, 0), dtype=dtype)
    batched = max(c.ndim for c in cols) == 3
    if batched:
        B = next(c.shape[0] for c in cols if c.ndim == 3)
        cols = [np.broadcast_to(c, (B, n_q, c.shape[-1])) for c in cols]
    vis = np.concatenate(cols, axis=-1)
    return np.where(vis, 0.0, -np.inf).astype(dtype)


def primary_cross_attend(layer: InteractionLayer, z_primary: Tensor, peer_z: list[Tensor], mask: np.ndarray,
                         cache: InteractionKVCache | None = None, peer_ids: list[int] | None = None,
                         peer_pad: list[np.ndarray] | None = None, rng: np.random.Generator | None = None) -> Tensor:
    """Multi-head attention of the primary's queries over all blocks of peer keys/values.

    ``z_primary`` is ``[B, n, d_s]``; ``peer_z`` holds one ``[B, n, d_s]``
    tensor per block (the primary's own block included). With a cache, the
    new keys/values are appended per ``peer_ids`` and attention runs over the
    full cached history; ``mask`` must then cover that history.
    """
    p = layer.params
    H = layer.heads
    q = nx.split_heads(z_primary @ p["WQ"], H)
    ks, vs = [], []
    for j, z in enumerate(peer_z):
        k = nx.split_heads(z @ p["WK"], H)
        v = nx.split_heads(z @ p["WV"], H)
        if cache is not None:
            m = peer_ids[j]
            li = layer.index
            if m in cache.keys[li]:
                k = nx.concat([Tensor(cache.keys[li][m]), k], axis=-2)
                v = nx.concat([Tensor(cache.values[li][m]), v], axis=-2)
                cache.pad[li][m] = np.concatenate([cache.pad[li][m], peer_pad[j]], axis=-1)
            else:
                cache.pad[li][m] = np.asarray(peer_pad[j], dtype=bool)
            cache.keys[li][m] = k.data
            cache.values[li][m] = v.data
        ks.append(k)
        vs.append(v)
    k = nx.concat(ks, axis=-2)
    v = nx.concat(vs, axis=-2)
    scores = nx.scale(q @ k.T, layer.attn_scale)
    mask = np.asarray(mask, dtype=scores.dtype)
    if mask.ndim == 3:
        mask = mask[:, None]
    att = nx.softmax_last(scores, mask)
    att = nx.dropout(att, layer.dropout, rng)
    return nx.merge_heads(att @ v) @ p["WO"]


def apply_interaction(layer: InteractionLayer, hiddens: dict[int, Tensor], decision: RoutingDecision,
                      pad: dict[int, np.ndarray] | None = None, cache: InteractionKVCache | None = None,
                      query_offset: int = 0, cross_attn: bool = True,
                      rng: np.random.Generator | None = None) -> dict[int, Tensor]:
    """Update every active expert's hidden states at one stack boundary.

    ``hiddens`` maps expert id to ``[B, n, d_m]`` for the experts computed in
    this pass; rows of the batch may route differently. The primary of each
    row receives ``R(o)`` from cross-attention, other active experts receive
    ``R(F(h))``, inactive experts are untouched. Contributions are scaled by
    the routing gates (value 1, gradient of the relaxed selection).
    """
    ids = sorted(hiddens)
    pad = pad or {}
    B = decision.batch
    amask = decision.active_mask
    pmask = decision.primary_mask
    for m in amask.nonzero()[1]:
        if m not in hiddens:
            raise ValueError(f"active expert {m} has no hidden states at interaction layer {layer.index}")
    gates = decision.gates()
    dtype = hiddens[ids[0]].dtype
    n = hiddens[ids[0]].shape[-2]

    z = {m: layer.project_forward(hiddens[m], m) for m in ids}
    o = None
    if cross_attn:
        sel = [Tensor(pmask[:, m].astype(dtype)[:, None, None]) for m in ids]
        zq = sel[0] * z[ids[0]]
        for s, m in zip(sel[1:], ids[1:]):
            zq = zq + s * z[m]
        pads = [np.broadcast_to(pad.get(m, np.zeros((B, n), dtype=bool)), (B, n)) for m in ids]
        if cache is not None:
            hist = [np.concatenate([cache.pad[layer.index][m], p], axis=-1) if m in cache.pad[layer.index] else p
                    for m, p in zip(ids, pads)]
        else:
            hist = pads
        lengths = [h.shape[-1] for h in hist]
        mask = build_block_causal_mask(n, lengths, query_offset, pad=hist, active=amask[:, ids], dtype=dtype)
        o = primary_cross_attend(layer, zq, [z[m] for m in ids], mask, cache=cache, peer_ids=ids,
                                 peer_pad=pads, rng=rng)

    out = dict(hiddens)
    for m in ids:
        a = amask[:, m]
        if not a.any():
            continue
        gm = nx.reshape(gates[:, m], (B, 1, 1))
        if o is not None:
            prim = pmask[:, m].astype(dtype)[:, None, None]
            rest = (a & ~pmask[:, m]).astype(dtype)[:, None, None]
            u = Tensor(prim) * o + Tensor(rest) * z[m]
        else:
            u = Tensor(a.astype(dtype)[:, None, None]) * z[m]
        out[m] = hiddens[m] + gm * layer.project_reverse(u, m)
    return out
