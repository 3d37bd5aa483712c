"""Graph embedding, low-rank adapter generation and the frozen desk-scale backbone."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

_ACTIVATIONS = {
    "tanh": ad.tanh,
    "relu": ad.relu,
    "identity": lambda x: x,
}


@dataclass
class BackboneConfig:
    d_x: int
    d_hidden: int = 64
    d_in: int = 32
    d_out: int = 32
    n_classes: int = 2
    rank: int = 4
    alpha: float = 8.0

    def __post_init__(self):
        if self.rank > min(self.d_in, self.d_out):
            raise ValueError("adapter rank exceeds layer width")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


class Backbone:
    """Frozen random network: bias-free tanh feature map, adapted layer, linear head.

    The weights are plain arrays and never enter an optimizer.
    """

    def __init__(self, cfg: BackboneConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.W_f1 = rng.standard_normal((cfg.d_hidden, cfg.d_x)) / np.sqrt(cfg.d_x)
        self.W_f2 = rng.standard_normal((cfg.d_in, cfg.d_hidden)) / np.sqrt(cfg.d_hidden)
        self.W0 = rng.standard_normal((cfg.d_out, cfg.d_in)) / np.sqrt(cfg.d_in)
        self.head = rng.standard_normal((cfg.n_classes, cfg.d_out)) / np.sqrt(cfg.d_out)
        for w in (self.W_f1, self.W_f2, self.W0, self.head):
            w.setflags(write=False)

    def features(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.cfg.d_x:
            raise ValueError(f"input width {x.shape[-1]} != backbone input width {self.cfg.d_x}")
        return np.tanh(x @ self.W_f1.T) @ self.W_f2.T

    def logits_from_update(self, feats: np.ndarray, update) -> ad.Tensor:
        """Head logits given the adapter contribution ``update = dW @ feats`` (B, d_out)."""
        pre = feats @ self.W0.T
        if update is not None:
            pre = update + pre
        hidden = ad.tanh(pre)
        return ad.matmul(hidden, self.head.T)

    def baseline_logits(self, x: np.ndarray) -> np.ndarray:
        feats = self.features(x)
        return self.merged_logits(feats, np.broadcast_to(self.W0, feats.shape[:-1] + self.W0.shape))

    def merged_logits(self, feats: np.ndarray, weight: np.ndarray) -> np.ndarray:
        """Head logits with a per-sample adapted weight of shape (..., d_out, d_in)."""
        pre = np.einsum("...oi,...i->...o", weight, feats)
        return np.tanh(pre) @ self.head.T


def normalized_adjacency(a):
    """D^{-1/2} (A + I) D^{-1/2} with D the row sums of A + I."""
    av = a.data if isinstance(a, ad.Tensor) else np.asarray(a)
    if np.any(av < 0):
        raise ValueError("adjacency entries must be nonnegative")
    k = av.shape[-1]
    a_tilde = a + np.eye(k)
    deg = ad.summation(a_tilde, axis=-1) if isinstance(a_tilde, ad.Tensor) else a_tilde.sum(-1)
    dinv = deg ** -0.5
    if isinstance(dinv, ad.Tensor):
        left = ad.reshape(dinv, dinv.shape + (1,))
        right = ad.reshape(dinv, dinv.shape[:-1] + (1, k))
    else:
        left, right = dinv[..., :, None], dinv[..., None, :]
    return a_tilde * left * right


def gcn_layer(h, a, w, activation: str = "tanh"):
    """sigma(D^{-1/2} (A + I) D^{-1/2} H W)."""
    act = _ACTIVATIONS[activation]
    return act(ad.matmul(ad.matmul(normalized_adjacency(a), h), w))


def matching_attention(h_orig, h_graph, mask, params, mode: str = "residual"):
    """Queries from the graph-refined rows, keys and values from the original rows."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("matching attention needs at least one unmasked node")
    q = ad.matmul(h_graph, params["att.Wq"])
    k = ad.matmul(h_orig, params["att.Wk"])
    v = ad.matmul(h_orig, params["att.Wv"])
    scores = ad.matmul(q, ad.transpose(k)) * (1.0 / np.sqrt(q.shape[-1]))
    weights = ad.masked_softmax(scores, mask[:, None, :], axis=-1)
    attended = ad.matmul(weights, v)
    out = h_graph + attended if mode == "residual" else attended
    return out * mask[..., None].astype(np.float64)


def attention_weights(h_orig, h_graph, mask, params) -> np.ndarray:
    q = np.asarray(ad.matmul(h_graph, params["att.Wq"]).data)
    k = np.asarray(ad.matmul(h_orig, params["att.Wk"]).data)
    scores = q @ np.swapaxes(k, -1, -2) / np.sqrt(q.shape[-1])
    return ad.masked_softmax(scores, np.asarray(mask, bool)[:, None, :]).data


def readout_pool(h, mask):
    """Mean over unmasked node rows."""
    return ad.masked_mean(h, mask, axis=1)


def generate_adapter(h_graph, params, cfg: BackboneConfig):
    """Per-sample adapter down-projection, shape (B, r, d_in)."""
    hidden = ad.tanh(ad.matmul(h_graph, params["hyper.W1"]) + params["hyper.b1"])
    flat = ad.matmul(hidden, params["hyper.W2"]) + params["hyper.b2"]
    if flat.shape[-1] != cfg.rank * cfg.d_in:
        raise ValueError("hypernetwork width must equal rank * d_in")
    return ad.reshape(flat, (flat.shape[0], cfg.rank, cfg.d_in))


def generate_lora(h_graph, params, cfg: BackboneConfig):
    """Delta W = s * B @ A_gen with A_gen generated from the pooled graph vector."""
    a_gen = generate_adapter(h_graph, params, cfg)
    return cfg.scaling * ad.matmul(params["lora.B"], a_gen)


def adapter_update(a_gen, lora_b, feats: np.ndarray, scaling: float):
    """Unmerged adapter contribution s * B (A_gen h) for a batch of features."""
    proj = ad.matmul(a_gen, feats[..., None])
    out = ad.matmul(lora_b, proj)
    out = ad.reshape(out, out.shape[:-1])
    return out * scaling


def adapted_forward(x: np.ndarray, delta_w, backbone: Backbone) -> np.ndarray:
    """Class probabilities from the merged weight (W0 + Delta W) applied per sample."""
    feats = backbone.features(x)
    dw = np.asarray(delta_w.data if isinstance(delta_w, ad.Tensor) else delta_w, dtype=np.float64)
    if dw.shape[-2:] != backbone.W0.shape:
        raise ValueError("Delta W shape does not match the adapted layer")
    merged = np.broadcast_to(backbone.W0 + dw, feats.shape[:-1] + backbone.W0.shape)
    return softmax_np(backbone.merged_logits(feats, merged))


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
