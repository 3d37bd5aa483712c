"""Latent interaction graph: node encoding, edge posteriors and sampled adjacency.

All functions operate on a batch axis first: node tensors are ``(B, K, d)``,
pair tensors are ``(B, P, ...)`` where ``P`` indexes the candidate pairs
returned by :func:`pair_index`.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import distributions as dist

VALUE_FREQS = (1.0, 0.5)


@dataclass
class EntityProfile:
    entity_ids: list[str]
    values: np.ndarray
    node_mask: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.node_mask is None:
            self.node_mask = np.ones(len(self.entity_ids), dtype=bool)
        self.node_mask = np.asarray(self.node_mask, dtype=bool)
        k = len(self.entity_ids)
        if k < 2:
            raise ValueError("a profile needs at least two entities")
        if self.values.shape != (k,) or self.node_mask.shape != (k,):
            raise ValueError("values and mask must have one entry per entity")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("profile values must be finite")
        if self.node_mask.sum() < 2:
            raise ValueError("at least two entities must be unmasked")

    @property
    def size(self) -> int:
        return len(self.entity_ids)


@dataclass
class EdgePosterior:
    """Per-pair variational quantities for one batch."""

    rows: np.ndarray
    cols: np.ndarray
    u: ad.Tensor
    delta: ad.Tensor
    m: ad.Tensor
    m0: ad.Tensor
    b: ad.Tensor
    pair_mask: np.ndarray


@dataclass
class LatentGraph:
    adjacency: np.ndarray
    w_sym: dict[tuple[int, int], float] = field(default_factory=dict)
    topk: list[tuple[int, int]] = field(default_factory=list)


def entity_embedding(entity_id: str, dim: int, seed: int = 0) -> np.ndarray:
    """Frozen pseudo-random embedding keyed by a stable hash of the id."""
    digest = hashlib.sha256(f"{seed}:{entity_id}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return rng.standard_normal(dim) / np.sqrt(dim)


def embedding_table(entity_ids: Sequence[str], dim: int, seed: int = 0) -> np.ndarray:
    return np.stack([entity_embedding(e, dim, seed) for e in entity_ids])


def value_encoding(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)[..., None]
    parts = []
    for f in VALUE_FREQS:
        parts += [np.sin(f * z), np.cos(f * z)]
    return np.concatenate(parts, axis=-1)


def node_inputs(id_emb: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Frozen part of the node encoder: id embedding joined with the value code."""
    return np.concatenate([id_emb, value_encoding(values)], axis=-1)


def encode_nodes(id_emb: np.ndarray, values: np.ndarray, mask: np.ndarray, params) -> ad.Tensor:
    """Project frozen node inputs to the graph width; masked rows are zero."""
    x = node_inputs(id_emb, values)
    h = ad.matmul(x, params["node.W"]) + params["node.b"]
    return h * np.asarray(mask, dtype=np.float64)[..., None]


def pair_index(k: int, symmetric: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Candidate pairs: ``i < j`` when symmetric, every ``i != j`` otherwise."""
    if symmetric:
        rows, cols = np.triu_indices(k, 1)
    else:
        grid = ~np.eye(k, dtype=bool)
        rows, cols = np.nonzero(grid)
    return rows, cols


def pair_features(h, rows, cols, mode: str = "blocks"):
    """Raw pair representation before the edge MLP.

    ``blocks`` gives ``[h_i; h_j; |h_i - h_j|; h_i * h_j]``; ``concat`` gives ``[h_i; h_j]``.
    """
    hi = h[:, rows] if isinstance(h, ad.Tensor) else np.asarray(h)[:, rows]
    hj = h[:, cols] if isinstance(h, ad.Tensor) else np.asarray(h)[:, cols]
    if mode == "concat":
        parts = [hi, hj]
    elif mode == "blocks":
        parts = [hi, hj, ad.absolute(hi - hj), hi * hj]
    else:
        raise ValueError(f"unknown edge feature mode {mode!r}")
    if isinstance(h, ad.Tensor):
        return ad.concat(parts, axis=-1)
    return np.concatenate(parts, axis=-1)


def edge_features(h, rows, cols, params, mode: str = "blocks", activation: str = "tanh"):
    feats = pair_features(h, rows, cols, mode)
    if activation == "identity":
        return feats
    return ad.tanh(ad.matmul(feats, params["edge.W"]) + params["edge.b"])


def _head(e, w, b):
    out = ad.matmul(e, w) + b
    return ad.reshape(out, out.shape[:-1])


def prior_rates(e, params):
    """m0 = softplus(f(e)) + 1e-6."""
    return dist.positive(_head(e, params["prior.w"], params["prior.b"]))


def posterior_params(e, params):
    """Gaussian proxy (u, delta) per pair; delta = softplus(raw) + 1e-6."""
    u = _head(e, params["post_u.w"], params["post_u.b"])
    delta = dist.positive(_head(e, params["post_d.w"], params["post_d.b"]))
    return u, delta


def laplace_scales(e, m, params):
    """b = softplus(g([e; m])) + 1e-6; the Laplace location stays at zero."""
    m_col = ad.reshape(m, m.shape + (1,)) if isinstance(m, ad.Tensor) else np.asarray(m)[..., None]
    joined = ad.concat([e, m_col], axis=-1) if isinstance(e, ad.Tensor) or isinstance(m, ad.Tensor) \
        else np.concatenate([e, m_col], axis=-1)
    return dist.positive(_head(joined, params["scale.w"], params["scale.b"]))


def infer_posterior(h: ad.Tensor, mask: np.ndarray, params, *, symmetric: bool = True,
                    edge_mode: str = "blocks") -> EdgePosterior:
    k = h.shape[1]
    rows, cols = pair_index(k, symmetric)
    e = edge_features(h, rows, cols, params, edge_mode)
    u, delta = posterior_params(e, params)
    m = dist.match_poisson_rate(u, delta)
    m0 = prior_rates(e, params)
    b = laplace_scales(e, m, params)
    mask = np.asarray(mask, dtype=bool)
    pair_mask = mask[:, rows] & mask[:, cols]
    return EdgePosterior(rows, cols, u, delta, m, m0, b, pair_mask)


def scatter_matrix(k: int, rows, cols, symmetric: bool) -> np.ndarray:
    """Constant (P, K*K) map placing pair values into a flattened adjacency."""
    s = np.zeros((len(rows), k * k))
    s[np.arange(len(rows)), rows * k + cols] = 1.0
    if symmetric:
        s[np.arange(len(rows)), cols * k + rows] = 1.0
    return s


def edge_weights(post: EdgePosterior, eps):
    """relu of the Laplace-mapped proxy draw, zero on masked pairs."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != post.u.shape:
        raise ValueError(f"need one draw per pair: expected {post.u.shape}, got {eps.shape}")
    if not np.all(np.isfinite(eps)):
        raise ValueError("non-finite draw")
    w = dist.npn_edge_sample(post.u, post.delta, post.b, eps)
    return ad.relu(w) * post.pair_mask.astype(np.float64)


def sample_adjacency(post: EdgePosterior, eps, k: int, symmetric: bool = True) -> ad.Tensor:
    """Batched K x K nonnegative adjacency with zero diagonal."""
    a = edge_weights(post, eps)
    flat = ad.matmul(a, scatter_matrix(k, post.rows, post.cols, symmetric))
    return ad.reshape(flat, (flat.shape[0], k, k))


def symmetrize(adjacency: np.ndarray) -> np.ndarray:
    a = np.asarray(adjacency, dtype=np.float64)
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def symmetrize_topk(adjacency: np.ndarray, k_sel: int) -> tuple[dict[tuple[int, int], float], list[tuple[int, int]]]:
    """Average both directions and keep the ``k_sel`` strongest unordered pairs.

    Ties are broken by lexicographic pair order.
    """
    a = np.asarray(adjacency, dtype=np.float64)
    k = a.shape[0]
    total = k * (k - 1) // 2
    if not 1 <= k_sel <= total:
        raise ValueError(f"k_sel must lie in [1, {total}], got {k_sel}")
    ws = symmetrize(a)
    rows, cols = np.triu_indices(k, 1)
    weights = ws[rows, cols]
    # lexsort: last key is primary
    order = np.lexsort((cols, rows, -weights))[:k_sel]
    w_sym = {(int(i), int(j)): float(w) for i, j, w in zip(rows, cols, weights)}
    topk = [(int(rows[o]), int(cols[o])) for o in order]
    return w_sym, topk


def latent_graph(adjacency: np.ndarray, k_sel: int) -> LatentGraph:
    w_sym, topk = symmetrize_topk(adjacency, k_sel)
    return LatentGraph(np.asarray(adjacency, dtype=np.float64), w_sym, topk)
