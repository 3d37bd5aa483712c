"""Datasets: synthetic planted graphs, abundance tables, entity selection, graph export."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import LatentGraph, symmetrize_topk
from .stats import AbundanceTable

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass
class SyntheticSpec:
    k: int = 20
    n_blocks: int = 4
    w_in: float = 1.0
    w_out: float = 0.2
    p_in: float = 0.9
    p_out: float = 0.1
    feature_noise: float = 0.5
    coherent_prob: float = 1.0
    label_noise: float = 0.5
    n_train: int = 600
    n_val: int = 150
    n_test: int = 150
    seed: int = 0
    shuffle_blocks: bool = True

    def __post_init__(self):
        if not self.w_in > self.w_out >= 0:
            raise ValueError("need w_in > w_out >= 0")
        if not 1 <= self.n_blocks <= self.k:
            raise ValueError("block count must lie in [1, k]")
        if self.k < 2:
            raise ValueError("need at least two nodes")
        if not 0 <= self.coherent_prob <= 1:
            raise ValueError("coherent_prob must lie in [0, 1]")
        if self.feature_noise < 0 or self.label_noise < 0:
            raise ValueError("noise levels must be nonnegative")

    @property
    def n(self) -> int:
        return self.n_train + self.n_val + self.n_test


@dataclass
class Dataset:
    entity_ids: list[str]
    values: np.ndarray  # (n, K)
    labels: np.ndarray  # (n,)
    splits: np.ndarray  # (n,) of split names
    sample_ids: list[str]
    mask: np.ndarray | None = None
    ground_truth: np.ndarray | None = None  # (n, K, K)
    blocks: np.ndarray | None = None
    reference: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        if self.mask is None:
            self.mask = np.ones(self.values.shape, dtype=bool)
        if self.ground_truth is not None:
            gt = self.ground_truth
            if not np.allclose(gt, np.swapaxes(gt, 1, 2)) or np.any(np.diagonal(gt, axis1=1, axis2=2)):
                raise ValueError("ground-truth adjacency must be symmetric with zero diagonal")

    def indices(self, split: str) -> np.ndarray:
        return np.nonzero(self.splits == split)[0]

    def split(self, name: str) -> "Dataset":
        idx = self.indices(name)
        return Dataset(list(self.entity_ids), self.values[idx], self.labels[idx], self.splits[idx],
                       [self.sample_ids[i] for i in idx], self.mask[idx],
                       None if self.ground_truth is None else self.ground_truth[idx],
                       self.blocks, list(self.reference))


def _block_assignment(spec: SyntheticSpec, rng) -> np.ndarray:
    blocks = np.arange(spec.k) * spec.n_blocks // spec.k
    return rng.permutation(blocks) if spec.shuffle_blocks else blocks


def gen_synthetic(spec: SyntheticSpec) -> Dataset:
    """Block-structured interaction graphs with labels driven by pairwise products.

    In each sample every block is independently coherent with probability
    ``coherent_prob``: its node values are then a shared N(0, 1) prototype plus
    N(0, feature_noise^2) noise. Nodes of an incoherent block are independent
    with the same marginal N(0, 1 + feature_noise^2), so each node looks the
    same regardless of coherence and the means carry no label information.
    Squared values still track the label weakly; within-block products carry
    most of it.
    ``coherent_prob = 1`` gives the plain prototype-plus-noise generator.
    Edges appear with probability ``p_in`` inside blocks (weight ``w_in``)
    and ``p_out`` across (weight ``w_out``). The label is 1
    when ``sum_{i<j} A_ij z_i z_j`` plus noise exceeds the cohort median.
    """
    rng = np.random.default_rng(spec.seed)
    blocks = _block_assignment(spec, rng)
    n, k = spec.n, spec.k
    same = blocks[:, None] == blocks[None, :]
    iu = np.triu_indices(k, 1)

    protos = rng.standard_normal((n, spec.n_blocks))
    coherent = (rng.random((n, spec.n_blocks)) < spec.coherent_prob)[:, blocks]
    noise = rng.standard_normal((n, k))
    spread = np.sqrt(1.0 + spec.feature_noise**2)
    values = np.where(coherent, protos[:, blocks] + spec.feature_noise * noise, spread * noise)

    presence = rng.random((n, k, k)) < np.where(same, spec.p_in, spec.p_out)
    upper = np.zeros((n, k, k))
    weights = np.where(same, spec.w_in, spec.w_out)
    upper[:, iu[0], iu[1]] = (presence * weights)[:, iu[0], iu[1]]
    adjacency = upper + np.swapaxes(upper, 1, 2)

    score = np.einsum("nij,ni,nj->n", upper, values, values)
    score = score + spec.label_noise * rng.standard_normal(n)
    labels = (score > np.median(score)).astype(int)

    splits = np.array(["train"] * spec.n_train + ["val"] * spec.n_val + ["test"] * spec.n_test)
    ids = [f"e{i:02d}" for i in range(k)]
    reference = [(int(i), int(j)) for i, j in zip(*iu) if same[i, j]]
    return Dataset(ids, values, labels, splits, [f"s{i:04d}" for i in range(n)],
                   ground_truth=adjacency, blocks=blocks, reference=reference)


def planted_abundance_table(n: int = 100, n_taxa: int = 10, pairs=((0, 1), (2, 3), (4, 5)),
                            factor_sd: float = 1.0, noise_sd: float = 0.2, effect: float = 0.4,
                            background_sd: float = 3.0, seed: int = 0) -> AbundanceTable:
    """Compositional table where each planted pair shares a latent factor and
    its first taxon shifts with the label.

    Within a planted pair the shared factor cancels in the log-ratio, so only
    planted pairs are both co-varying and strongly label-associated.
    """
    rng = np.random.default_rng(seed)
    labels = np.tile([0, 1], n // 2 + 1)[:n]
    rng.shuffle(labels)
    logs = background_sd * rng.standard_normal((n, n_taxa))
    for a, b in pairs:
        f = factor_sd * rng.standard_normal(n)
        logs[:, a] = f + noise_sd * rng.standard_normal(n) + effect * labels
        logs[:, b] = f + noise_sd * rng.standard_normal(n)
    x = np.exp(logs)
    x /= x.sum(axis=1, keepdims=True)
    return AbundanceTable([f"s{i:03d}" for i in range(n)], [f"t{j}" for j in range(n_taxa)], x, labels)


# abundance CSV --------------------------------------------------------------------

class DataFormatError(ValueError):
    pass


ROW_SUM_TOL = 1e-6


def load_abundance(path) -> AbundanceTable:
    """Read ``sample_id,label,<taxon>...``; rows are renormalized to sum to one."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        if len(header) < 4 or header[0] != "sample_id" or header[1] != "label":
            raise DataFormatError(f"{path}: header must start with sample_id,label and name >= 2 taxa")
        taxa = header[2:]
        ids, labels, rows = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            if row[1] not in ("0", "1"):
                raise DataFormatError(f"{path}:{lineno}: unknown label {row[1]!r}")
            vals = []
            for col, cell in enumerate(row[2:]):
                try:
                    v = float(cell)
                except ValueError:
                    raise DataFormatError(f"{path}:{lineno}: column {taxa[col]!r} is not a number") from None
                if v < 0 or not np.isfinite(v):
                    raise DataFormatError(
                        f"{path}: negative or non-finite abundance at row {lineno}, column {taxa[col]!r}")
                vals.append(v)
            ids.append(row[0])
            labels.append(int(row[1]))
            rows.append(vals)
    if not rows:
        raise DataFormatError(f"{path}: no samples")
    x = np.array(rows, dtype=np.float64)
    sums = x.sum(axis=1)
    if np.any(sums <= 0):
        raise DataFormatError(f"{path}: a sample has zero total abundance")
    off = np.abs(sums - 1.0) > ROW_SUM_TOL
    if off.any():
        log.warning("%s: %d rows do not sum to 1; renormalizing", path, int(off.sum()))
    x = x / sums[:, None]
    return AbundanceTable(ids, taxa, x, np.array(labels))


def write_abundance(table: AbundanceTable, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "label", *table.taxa])
        for sid, lab, row in zip(table.sample_ids, table.labels, table.x):
            w.writerow([sid, int(lab), *(repr(float(v)) for v in row)])


def select_entities(table: AbundanceTable, mode: str = "variance", k_sel: int | None = None,
                    explicit: Sequence[str] | None = None) -> list[str]:
    """Pick the entity schema: an explicit taxa list, or top-K by cross-sample variance."""
    if mode == "list":
        if explicit is None:
            raise ValueError("list mode needs explicit taxa")
        unknown = [t for t in explicit if t not in table.taxa]
        if unknown:
            raise KeyError(f"unknown taxa: {unknown}")
        return list(explicit)
    if mode != "variance":
        raise ValueError(f"unknown selection mode {mode!r}")
    if k_sel is None or not 1 <= k_sel <= table.p:
        raise ValueError(f"k_sel must lie in [1, {table.p}]")
    var = table.x.var(axis=0)
    order = sorted(range(table.p), key=lambda j: (-var[j], table.taxa[j]))
    return [table.taxa[j] for j in order[:k_sel]]


def profile_values(table: AbundanceTable, taxa: Sequence[str], pseudocount: float = 1e-6) -> np.ndarray:
    """Standardized log abundances of the selected taxa, one row per sample."""
    sub = table.select(list(taxa)).x
    logs = np.log(sub + pseudocount)
    sd = logs.std(axis=0)
    return (logs - logs.mean(axis=0)) / np.where(sd > 0, sd, 1.0)


def dataset_from_table(table: AbundanceTable, taxa: Sequence[str], fractions=(0.7, 0.15, 0.15),
                       seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    n = table.n
    order = rng.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    splits = np.empty(n, dtype=object)
    splits[order[:n_train]] = "train"
    splits[order[n_train:n_train + n_val]] = "val"
    splits[order[n_train + n_val:]] = "test"
    return Dataset(list(taxa), profile_values(table, taxa), table.labels.copy(),
                   splits.astype(str), list(table.sample_ids))


# dataset files ----------------------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def write_dataset(ds: Dataset, directory) -> list[Path]:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    path = out / "samples.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "split", "label", *ds.entity_ids])
        for i, sid in enumerate(ds.sample_ids):
            row = [_fmt(v) if m else "" for v, m in zip(ds.values[i], ds.mask[i])]
            w.writerow([sid, ds.splits[i], int(ds.labels[i]), *row])
    written.append(path)
    if ds.ground_truth is not None:
        path = out / "ground_truth.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "entity_i", "entity_j", "weight"])
            iu = np.triu_indices(len(ds.entity_ids), 1)
            for n, sid in enumerate(ds.sample_ids):
                for i, j in zip(*iu):
                    if ds.ground_truth[n, i, j] != 0:
                        w.writerow([sid, ds.entity_ids[i], ds.entity_ids[j], _fmt(ds.ground_truth[n, i, j])])
        written.append(path)
    if ds.reference:
        path = out / "reference.csv"
        write_edge_set(ds.reference, ds.entity_ids, path)
        written.append(path)
    return written


def write_edge_set(pairs, ids: Sequence[str], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["entity_i", "entity_j"])
        for i, j in sorted(pairs):
            w.writerow([ids[i], ids[j]])


def read_edge_set(path, ids: Sequence[str]) -> set[tuple[int, int]]:
    index = {e: n for n, e in enumerate(ids)}
    out = set()
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            try:
                i, j = index[row["entity_i"]], index[row["entity_j"]]
            except KeyError as err:
                raise DataFormatError(f"{path}: unknown entity {err}") from None
            out.add((min(i, j), max(i, j)))
    return out


def read_dataset(directory) -> Dataset:
    d = Path(directory)
    with open(d / "samples.csv", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["sample_id", "split", "label"]:
            raise DataFormatError(f"{d / 'samples.csv'}: bad header")
        ids = header[3:]
        sids, splits, labels, values, mask = [], [], [], [], []
        for row in reader:
            sids.append(row[0])
            splits.append(row[1])
            labels.append(int(row[2]))
            values.append([float(c) if c != "" else 0.0 for c in row[3:]])
            mask.append([c != "" for c in row[3:]])
    gt = None
    if (d / "ground_truth.csv").exists():
        index = {e: n for n, e in enumerate(ids)}
        pos = {s: n for n, s in enumerate(sids)}
        gt = np.zeros((len(sids), len(ids), len(ids)))
        with open(d / "ground_truth.csv", newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                n, i, j = pos[row["sample_id"]], index[row["entity_i"]], index[row["entity_j"]]
                gt[n, i, j] = gt[n, j, i] = float(row["weight"])
    reference = []
    if (d / "reference.csv").exists():
        reference = sorted(read_edge_set(d / "reference.csv", ids))
    return Dataset(ids, np.array(values), np.array(labels), np.array(splits), sids,
                   np.array(mask, dtype=bool), gt, None, reference)


# graph export -----------------------------------------------------------------------

def export_graph(graph: LatentGraph, ids: Sequence[str], path, k_sel: int | None = None) -> list[Path]:
    """Edge list CSV sorted by weight, adjacency CSV and a DOT rendering.

    ``path`` is the edge-list file; siblings ``*.adjacency.csv`` and ``*.dot``
    are written next to it.
    """
    base = Path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    w_sym, topk = graph.w_sym, graph.topk
    if k_sel is not None or not w_sym:
        w_sym, topk = symmetrize_topk(graph.adjacency, k_sel or max(1, len(graph.topk)))
    top = set(topk)
    edges = sorted(((i, j, w) for (i, j), w in w_sym.items() if w > 0), key=lambda e: (-e[2], e[0], e[1]))
    with open(base, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["entity_i", "entity_j", "weight", "in_topk"])
        for i, j, wt in edges:
            w.writerow([ids[i], ids[j], _fmt(wt), int((i, j) in top)])
    adj_path = base.with_suffix(".adjacency.csv")
    with open(adj_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["", *ids])
        for i, e in enumerate(ids):
            w.writerow([e, *(_fmt(v) for v in graph.adjacency[i])])
    dot_path = base.with_suffix(".dot")
    buf = io.StringIO()
    buf.write("graph latent {\n")
    for e in ids:
        buf.write(f'  "{e}";\n')
    for i, j, wt in edges:
        style = ", penwidth=2" if (i, j) in top else ""
        buf.write(f'  "{ids[i]}" -- "{ids[j]}" [weight={wt:.6g}{style}];\n')
    buf.write("}\n")
    dot_path.write_text(buf.getvalue(), encoding="utf-8")
    return [base, adj_path, dot_path]


def read_edge_list(path, ids: Sequence[str]) -> tuple[dict[tuple[int, int], float], list[tuple[int, int]]]:
    index = {e: n for n, e in enumerate(ids)}
    weights, top = {}, []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            i, j = sorted((index[row["entity_i"]], index[row["entity_j"]]))
            weights[(i, j)] = float(row["weight"])
            if row["in_topk"] == "1":
                top.append((i, j))
    return weights, top


def spec_dict(spec: SyntheticSpec) -> dict:
    return asdict(spec)
