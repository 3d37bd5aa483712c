"""The full graph-conditioned adapter model and Monte Carlo prediction."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import distributions as dist
from . import graph as g
from . import hypernet as hn


@dataclass
class ModelConfig:
    d_emb: int = 32
    d_g: int = 128
    d_e: int = 128
    d_hyper: int = 64
    d_hidden: int = 64
    d_in: int = 32
    d_out: int = 32
    rank: int = 4
    alpha: float = 8.0
    edge_features: str = "blocks"
    symmetric: bool = True
    gcn_activation: str = "tanh"
    attention: str = "residual"
    static_adapter: bool = False
    embed_seed: int = 0
    backbone_seed: int = 7919
    init_u: float = 1.0
    init_delta: float = 0.3
    init_scale: float = 1.0

    def backbone(self, d_x: int) -> hn.BackboneConfig:
        return hn.BackboneConfig(d_x=d_x, d_hidden=self.d_hidden, d_in=self.d_in,
                                 d_out=self.d_out, rank=self.rank, alpha=self.alpha)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Batch:
    """Arrays for B samples over a shared entity schema of size K."""

    id_emb: np.ndarray  # (B, K, d_emb)
    values: np.ndarray  # (B, K)
    mask: np.ndarray  # (B, K) bool
    x: np.ndarray  # (B, d_x) backbone input
    labels: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.values.shape[0]

    @property
    def k(self) -> int:
        return self.values.shape[1]

    def subset(self, idx) -> "Batch":
        labels = None if self.labels is None else self.labels[idx]
        return Batch(self.id_emb[idx], self.values[idx], self.mask[idx], self.x[idx], labels)


def _inv_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


def _glorot(rng, fan_in, fan_out):
    return rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, ad.Tensor]:
    """Trainable weights. The adapter factor B starts at zero."""
    rng = np.random.default_rng(seed)
    d_node = cfg.d_emb + 2 * len(g.VALUE_FREQS)
    d_pair = (4 if cfg.edge_features == "blocks" else 2) * cfg.d_g
    m_init = float(dist.match_poisson_rate(cfg.init_u, cfg.init_delta))
    p = {
        "node.W": _glorot(rng, d_node, cfg.d_g),
        "node.b": np.zeros(cfg.d_g),
        "edge.W": _glorot(rng, d_pair, cfg.d_e),
        "edge.b": np.zeros(cfg.d_e),
        "post_u.w": 0.1 * _glorot(rng, cfg.d_e, 1),
        "post_u.b": np.full(1, cfg.init_u),
        "post_d.w": 0.1 * _glorot(rng, cfg.d_e, 1),
        "post_d.b": np.full(1, _inv_softplus(cfg.init_delta)),
        "prior.w": 0.1 * _glorot(rng, cfg.d_e, 1),
        "prior.b": np.full(1, _inv_softplus(m_init)),
        "scale.w": 0.1 * _glorot(rng, cfg.d_e + 1, 1),
        "scale.b": np.full(1, _inv_softplus(cfg.init_scale)),
        "gcn.W1": _glorot(rng, cfg.d_g, cfg.d_g),
        "gcn.W2": _glorot(rng, cfg.d_g, cfg.d_g),
        "att.Wq": _glorot(rng, cfg.d_g, cfg.d_g),
        "att.Wk": _glorot(rng, cfg.d_g, cfg.d_g),
        "att.Wv": _glorot(rng, cfg.d_g, cfg.d_g),
        "hyper.W1": _glorot(rng, cfg.d_g, cfg.d_hyper),
        "hyper.b1": np.zeros(cfg.d_hyper),
        "hyper.W2": _glorot(rng, cfg.d_hyper, cfg.rank * cfg.d_in),
        "hyper.b2": np.zeros(cfg.rank * cfg.d_in),
        "lora.B": np.zeros((cfg.d_out, cfg.rank)),
    }
    if cfg.static_adapter:
        # graph branch unused; one trainable down-projection shared by all samples
        p = {"lora.A": _glorot(rng, cfg.rank, cfg.d_in).reshape(cfg.rank, cfg.d_in),
             "lora.B": np.zeros((cfg.d_out, cfg.rank))}
    return {k: ad.tensor(v, requires_grad=True, name=k) for k, v in p.items()}


@dataclass
class ForwardResult:
    logits: ad.Tensor
    posterior: g.EdgePosterior | None = None
    adjacency: ad.Tensor | None = None
    h_graph: ad.Tensor | None = None
    a_gen: ad.Tensor | None = None
    extras: dict = field(default_factory=dict)


class ILoRAModel:
    """Frozen backbone plus the trainable graph branch, hypernetwork and adapter factor."""

    def __init__(self, cfg: ModelConfig, entity_ids: Sequence[str], d_x: int | None = None,
                 seed: int = 0, params: dict[str, ad.Tensor] | None = None):
        self.cfg = cfg
        self.entity_ids = list(entity_ids)
        self.k = len(self.entity_ids)
        self.d_x = self.k if d_x is None else d_x
        self.backbone_cfg = cfg.backbone(self.d_x)
        self.backbone = hn.Backbone(self.backbone_cfg, seed=cfg.backbone_seed)
        self.params = init_params(cfg, seed) if params is None else params
        self.id_table = g.embedding_table(self.entity_ids, cfg.d_emb, cfg.embed_seed)
        self.rows, self.cols = g.pair_index(self.k, cfg.symmetric)

    @property
    def n_pairs(self) -> int:
        return len(self.rows)

    def make_batch(self, values: np.ndarray, mask: np.ndarray | None = None,
                   labels: np.ndarray | None = None) -> Batch:
        values = np.atleast_2d(np.asarray(values, dtype=np.float64))
        n = values.shape[0]
        mask = np.ones(values.shape, dtype=bool) if mask is None else np.atleast_2d(np.asarray(mask, bool))
        id_emb = np.broadcast_to(self.id_table, (n,) + self.id_table.shape)
        x = np.where(mask, values, 0.0)
        return Batch(id_emb, values, mask, x, None if labels is None else np.asarray(labels))

    def draw_eps(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((n, self.n_pairs))

    # pieces -------------------------------------------------------------------

    def posterior(self, batch: Batch) -> tuple[ad.Tensor, g.EdgePosterior]:
        h = g.encode_nodes(batch.id_emb, batch.values, batch.mask, self.params)
        post = g.infer_posterior(h, batch.mask, self.params, symmetric=self.cfg.symmetric,
                                 edge_mode=self.cfg.edge_features)
        return h, post

    def graph_vector(self, h, adjacency, mask):
        act = self.cfg.gcn_activation
        h1 = hn.gcn_layer(h, adjacency, self.params["gcn.W1"], act)
        h2 = hn.gcn_layer(h1, adjacency, self.params["gcn.W2"], act)
        fused = hn.matching_attention(h, h2, mask, self.params, self.cfg.attention)
        return hn.readout_pool(fused, mask)

    def forward(self, batch: Batch, eps: np.ndarray | None = None,
                posterior: tuple | None = None) -> ForwardResult:
        feats = self.backbone.features(batch.x)
        if self.cfg.static_adapter:
            a_gen = self.params["lora.A"]
            update = hn.adapter_update(a_gen, self.params["lora.B"], feats, self.backbone_cfg.scaling)
            return ForwardResult(self.backbone.logits_from_update(feats, update), a_gen=a_gen)
        if eps is None:
            raise ValueError("the graph-conditioned model needs edge draws")
        h, post = self.posterior(batch) if posterior is None else posterior
        adjacency = g.sample_adjacency(post, eps, self.k, self.cfg.symmetric)
        h_graph = self.graph_vector(h, adjacency, batch.mask)
        a_gen = hn.generate_adapter(h_graph, self.params, self.backbone_cfg)
        update = hn.adapter_update(a_gen, self.params["lora.B"], feats, self.backbone_cfg.scaling)
        logits = self.backbone.logits_from_update(feats, update)
        return ForwardResult(logits, post, adjacency, h_graph, a_gen)

    def delta_w(self, batch: Batch, eps: np.ndarray | None = None) -> np.ndarray:
        """Merged per-sample update s * B @ A_gen, shape (B, d_out, d_in)."""
        res = self.forward(batch, eps)
        a_gen = res.a_gen.data
        if a_gen.ndim == 2:
            a_gen = np.broadcast_to(a_gen, (batch.size,) + a_gen.shape)
        return self.backbone_cfg.scaling * (self.params["lora.B"].data @ a_gen)

    def predict_proba(self, batch: Batch, eps: np.ndarray | None = None) -> np.ndarray:
        logits = self.forward(batch, eps).logits.data
        return hn.softmax_np(logits)

    def mean_adjacency(self, batch: Batch, samples: int, rng: np.random.Generator) -> np.ndarray:
        """Average sampled adjacency over ``samples`` draws, shape (B, K, K)."""
        _, post = self.posterior(batch)
        total = np.zeros((batch.size, self.k, self.k))
        for _ in range(samples):
            total += g.sample_adjacency(post, self.draw_eps(batch.size, rng), self.k, self.cfg.symmetric).data
        return total / samples

    # persistence --------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for k, v in state.items():
            arr = np.asarray(v, dtype=np.float64)
            if arr.shape != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k}")
            self.params[k].data = arr.copy()


@dataclass
class MCPrediction:
    probs: np.ndarray  # (B, C) averaged
    spread: np.ndarray  # (B,) std of the positive-class probability across draws
    per_sample: np.ndarray  # (S, B, C)


def mc_predict(model: ILoRAModel, batch: Batch, samples: int, rng: np.random.Generator | None = None,
               eps: Sequence[np.ndarray] | None = None) -> MCPrediction:
    """Average class probabilities over independently sampled graphs."""
    if samples < 1:
        raise ValueError("need at least one graph sample")
    if eps is not None and len(eps) != samples:
        raise ValueError("one draw array per graph sample")
    if model.cfg.static_adapter:
        p = model.predict_proba(batch)
        stack = np.broadcast_to(p, (samples,) + p.shape)
    else:
        posterior = model.posterior(batch)
        draws = eps if eps is not None else [model.draw_eps(batch.size, rng) for _ in range(samples)]
        stack = np.stack([hn.softmax_np(model.forward(batch, e, posterior=posterior).logits.data)
                          for e in draws])
    return MCPrediction(stack.mean(axis=0), stack[..., -1].std(axis=0), np.array(stack))
