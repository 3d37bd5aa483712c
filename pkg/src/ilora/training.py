"""Variational objective, AdamW loop with checkpoint selection, and gradient checks."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import distributions as dist
from . import metrics
from .model import Batch, ILoRAModel, mc_predict

log = logging.getLogger(__name__)

LAMBDA_RANGE = (0.0, 1.0)


@dataclass
class LossBreakdown:
    task: float
    kl_pois: float
    kl_lap: float
    total: float
    lambda_pois: float
    lambda_lap: float


@dataclass
class TrainConfig:
    lr: float = 3e-3
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    lambda_pois: float = 1e-3
    lambda_lap: float = 1e-3
    prior_scale: float = 1.0
    train_samples: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-2
    clip_norm: float = 1.0
    warmup_steps: int = 0
    select_metric: str = "auroc"
    eval_samples: int = 1
    divergence_limit: float = 1e6

    def __post_init__(self):
        lo, hi = LAMBDA_RANGE
        for name in ("lambda_pois", "lambda_lap"):
            v = getattr(self, name)
            if not lo <= v <= hi:
                raise ValueError(f"{name}={v} outside [{lo}, {hi}]")
        if self.prior_scale <= 0:
            raise ValueError("prior_scale must be positive")
        if self.train_samples < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("train_samples, batch_size must be >= 1 and epochs >= 0")
        if self.select_metric not in ("auroc", "loss"):
            raise ValueError("select_metric must be 'auroc' or 'loss'")


class DivergenceError(RuntimeError):
    pass


def cross_entropy(logits: ad.Tensor, labels: np.ndarray) -> ad.Tensor:
    logp = ad.log_softmax(logits, axis=-1)
    labels = np.asarray(labels, dtype=int)
    onehot = np.eye(logits.shape[-1])[labels]
    return -ad.mean(ad.summation(logp * onehot, axis=-1))


def loss_terms(model: ILoRAModel, batch: Batch, eps_list, cfg: TrainConfig):
    """Taped loss pieces; returns (total, task, kl_pois, kl_lap) tensors.

    Each entry of ``eps_list`` is one graph draw; the task loss averages the
    cross-entropy over draws. KL terms are summed over candidate pairs and
    averaged over the batch.
    """
    if batch.size == 0:
        raise ValueError("empty batch")
    if model.cfg.static_adapter:
        task = cross_entropy(model.forward(batch).logits, batch.labels)
        zero = ad.constant(0.0)
        return task, task, zero, zero
    posterior = model.posterior(batch)
    post = posterior[1]
    task = None
    for eps in eps_list:
        ce = cross_entropy(model.forward(batch, eps, posterior=posterior).logits, batch.labels)
        task = ce if task is None else task + ce
    task = task * (1.0 / len(eps_list))
    pm = post.pair_mask.astype(np.float64)
    n = float(batch.size)
    kl_p = ad.summation(dist.kl_poisson(post.m, post.m0) * pm) * (1.0 / n)
    kl_l = ad.summation(dist.kl_laplace(post.b, cfg.prior_scale) * pm) * (1.0 / n)
    total = task + cfg.lambda_pois * kl_p + cfg.lambda_lap * kl_l
    return total, task, kl_p, kl_l


def total_loss(model: ILoRAModel, batch: Batch, eps_list, cfg: TrainConfig) -> LossBreakdown:
    total, task, kl_p, kl_l = loss_terms(model, batch, eps_list, cfg)
    out = LossBreakdown(task.item(), kl_p.item(), kl_l.item(), total.item(),
                        cfg.lambda_pois, cfg.lambda_lap)
    if not np.isfinite(out.total):
        raise DivergenceError(f"non-finite loss: {out}")
    return out


def global_norm(arrays) -> float:
    """Euclidean norm over several arrays, rescaled so huge entries do not overflow."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    peak = max((float(np.max(np.abs(a))) for a in arrays if a.size), default=0.0)
    if peak == 0.0 or not np.isfinite(peak):
        return peak
    return peak * float(np.sqrt(sum(float(np.sum((a / peak) ** 2)) for a in arrays)))


class AdamW:
    """Adam moments with weight decay applied directly to the parameters."""

    def __init__(self, params: dict[str, ad.Tensor], lr: float, beta1=0.9, beta2=0.999,
                 eps=1e-8, weight_decay=0.0, clip_norm: float | None = None, warmup_steps: int = 0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.warmup_steps = warmup_steps
        self.t = 0
        self.m = {k: np.zeros(p.shape) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> float:
        norm = global_norm(grads.values())
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / (norm + 1e-12)
        self.t += 1
        lr = self.lr
        if self.warmup_steps:
            lr *= min(1.0, self.t / self.warmup_steps)
        if lr == 0.0:
            return norm
        b1, b2 = self.beta1, self.beta2
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            g = g * scale
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1**self.t)
            vhat = self.v[k] / (1 - b2**self.t)
            new = p.data - lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.data)
            if not np.all(np.isfinite(new)):
                raise DivergenceError(f"non-finite update for {k}")
            p.data = new
        return norm


@dataclass
class EpochRecord:
    epoch: int
    task: float
    kl_pois: float
    kl_lap: float
    total: float
    val_auroc: float


@dataclass
class TrainResult:
    model: ILoRAModel
    curve: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_score: float = float("nan")
    diverged: bool = False


def evaluate_auroc(model: ILoRAModel, batch: Batch, samples: int, rng) -> float:
    pred = mc_predict(model, batch, samples, rng)
    labels = np.asarray(batch.labels, dtype=int)
    if labels.min() == labels.max():
        return float("nan")
    return metrics.roc_pr_auc(pred.probs[:, 1], labels)[0]


def validation_loss(model: ILoRAModel, batch: Batch, cfg: TrainConfig, rng) -> float:
    eps = [model.draw_eps(batch.size, rng) for _ in range(cfg.train_samples)]
    return total_loss(model, batch, eps, cfg).task


def train(model: ILoRAModel, train_batch: Batch, val_batch: Batch | None, cfg: TrainConfig,
          callback: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Minibatch AdamW on the variational objective.

    The returned model carries the parameters of the best validation epoch.
    """
    rng = np.random.default_rng(cfg.seed)
    eval_rng_seed = cfg.seed + 1_000_003
    opt = AdamW(model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps,
                cfg.weight_decay, cfg.clip_norm, cfg.warmup_steps)
    names = list(model.params)
    leaves = [model.params[k] for k in names]
    result = TrainResult(model)
    best_state = copy.deepcopy(model.state_dict())
    best = -np.inf
    n = train_batch.size
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sums = np.zeros(4)
        count = 0
        last_good = copy.deepcopy(model.state_dict())
        try:
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                mb = train_batch.subset(idx)
                eps = [model.draw_eps(mb.size, rng) for _ in range(cfg.train_samples)]
                with ad.Tape() as tape:
                    total, task, kl_p, kl_l = loss_terms(model, mb, eps, cfg)
                value = total.item()
                if not np.isfinite(value) or abs(value) > cfg.divergence_limit:
                    raise DivergenceError(f"loss {value} at epoch {epoch}")
                grads = tape.gradient(total, leaves)
                opt.step(dict(zip(names, grads)))
                sums += np.array([task.item(), kl_p.item(), kl_l.item(), value]) * mb.size
                count += mb.size
        except (DivergenceError, ad.NonFiniteError) as err:
            log.warning("training diverged: %s; keeping last good parameters", err)
            model.load_state_dict(last_good)
            result.diverged = True
            break
        means = sums / max(count, 1)
        eval_rng = np.random.default_rng(eval_rng_seed)
        if val_batch is not None and cfg.select_metric == "auroc":
            score = evaluate_auroc(model, val_batch, cfg.eval_samples, eval_rng)
            val_auroc = score
        elif val_batch is not None:
            score = -validation_loss(model, val_batch, cfg, eval_rng)
            val_auroc = float("nan")
        else:
            score = -means[0]
            val_auroc = float("nan")
        rec = EpochRecord(epoch, *means.tolist(), val_auroc=val_auroc)
        result.curve.append(rec)
        if callback is not None:
            callback(rec)
        log.info("epoch %d total=%.4f task=%.4f val=%.4f", epoch, means[3], means[0], score)
        if np.isfinite(score) and score > best:
            best = score
            best_state = copy.deepcopy(model.state_dict())
            result.best_epoch = epoch
            result.best_score = float(score)
    if result.best_epoch >= 0:
        model.load_state_dict(best_state)
    return result


# gradient verification ------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped_kinks: int
    worst: tuple[str, int] | None


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(model: ILoRAModel, batch: Batch, cfg: TrainConfig, *, n_coords: int = 200,
               h: float = 1e-5, seed: int = 0, names: list[str] | None = None,
               eps_list=None) -> GradCheckReport:
    """Compare taped gradients of the total loss with central differences.

    Draws are frozen across perturbations. A coordinate whose +h and -h
    evaluations land on different branches of a piecewise op is skipped.
    """
    rng = np.random.default_rng(seed)
    if eps_list is None:
        eps_list = [model.draw_eps(batch.size, rng) for _ in range(cfg.train_samples)]
    names = list(model.params) if names is None else names
    leaves = [model.params[k] for k in names]
    with ad.Tape() as tape:
        total = loss_terms(model, batch, eps_list, cfg)[0]
    analytic = dict(zip(names, tape.gradient(total, leaves)))

    sizes = np.array([model.params[k].size for k in names])
    flat_ids = rng.choice(int(sizes.sum()), size=min(n_coords, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def evaluate():
        with ad.kink_monitor() as pattern:
            val = loss_terms(model, batch, eps_list, cfg)[0].item()
        return val, pattern

    worst, worst_at, checked, skipped = 0.0, None, 0, 0
    for fid in np.sort(flat_ids):
        which = int(np.searchsorted(offsets, fid, side="right") - 1)
        name = names[which]
        local = int(fid - offsets[which])
        p = model.params[name]
        flat = p.data.reshape(-1)
        orig = flat[local]
        flat[local] = orig + h
        fp, pat_p = evaluate()
        flat[local] = orig - h
        fm, pat_m = evaluate()
        flat[local] = orig
        if len(pat_p) != len(pat_m) or any(not np.array_equal(a, b) for a, b in zip(pat_p, pat_m)):
            skipped += 1
            continue
        numeric = (fp - fm) / (2 * h)
        err = relative_error(float(analytic[name].reshape(-1)[local]), numeric)
        checked += 1
        if err > worst:
            worst, worst_at = err, (name, local)
    return GradCheckReport(worst, checked, skipped, worst_at)
