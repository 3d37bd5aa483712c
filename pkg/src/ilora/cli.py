"""Command-line entry point: ``ilora <subcommand> --config cfg.json --out DIR``.

Every run writes ``manifest.json`` next to its artifacts. The manifest holds the
resolved config, its hash, the seed and sha256 digests of inputs and outputs,
so two runs with the same config and seed can be compared byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import data, metrics, stats
from . import graph as g
from .model import ILoRAModel, ModelConfig, mc_predict
from .training import TrainConfig, grad_check, train

log = logging.getLogger("ilora")

COMMANDS = ("synth", "train", "eval", "infer-graph", "stats-ref", "compare", "gradcheck", "sweep-k")


class ConfigError(ValueError):
    pass


# config handling ---------------------------------------------------------------------

EVAL_DEFAULTS = {"samples": 16, "k_sel": None, "bins": 10, "threshold": 0.5, "split": "test",
                 "graph_samples": 16, "report_samples": [1, 4, 16]}
ABUNDANCE_DEFAULTS = {"path": None, "select": "variance", "k_sel": 20, "taxa": None,
                      "pseudocount": 1e-6, "reference": None}
STATS_DEFAULTS = {"abundance": None, "fdr": 0.05, "pseudocount": 1e-6, "eps": 1e-6}
COMPARE_DEFAULTS = {"reference": None, "graphs": [], "entities": None, "k_sel": None, "random_trials": 0}
GRADCHECK_DEFAULTS = {"k": 8, "n": 3, "n_coords": 200, "h": 1e-5, "tol": 1e-4, "b_scale": 0.5}
SWEEP_DEFAULTS = {"ks": [10, 20, 30]}

SECTIONS = {
    "synth": ("data",),
    "train": ("data", "model", "train"),
    "eval": ("data", "eval", "checkpoint"),
    "infer-graph": ("data", "eval", "checkpoint"),
    "stats-ref": ("stats",),
    "compare": ("compare",),
    "gradcheck": ("model", "train", "gradcheck"),
    "sweep-k": ("data", "model", "train", "eval", "sweep"),
}


def _type_ok(value, default) -> bool:
    if default is None:
        return True
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, type(default))


def _merge(defaults: dict, raw, path: str) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected an object")
    out = dict(defaults)
    for key, value in raw.items():
        if key not in defaults:
            raise ConfigError(f"{path}.{key}: unknown key")
        if value is not None and not _type_ok(value, defaults[key]):
            raise ConfigError(f"{path}.{key}: expected {type(defaults[key]).__name__}, got {value!r}")
        out[key] = value
    return out


def _dataclass_section(cls, raw, path: str):
    defaults = {f.name: f.default for f in dataclasses.fields(cls)}
    merged = _merge(defaults, raw, path)
    try:
        return cls(**merged)
    except ValueError as err:
        raise ConfigError(f"{path}: {err}") from None


def _data_section(raw, seed: int) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError("data: expected an object")
    sources = [k for k in ("synthetic", "dir", "abundance") if k in raw]
    extra = set(raw) - {"synthetic", "dir", "abundance"}
    if extra:
        raise ConfigError(f"data.{sorted(extra)[0]}: unknown key")
    if len(sources) > 1:
        raise ConfigError("data: give exactly one of synthetic, dir, abundance")
    if not sources or "synthetic" in raw:
        syn = dict(raw.get("synthetic", {}))
        syn.setdefault("seed", seed)
        spec = _dataclass_section(data.SyntheticSpec, syn, "data.synthetic")
        return {"synthetic": dataclasses.asdict(spec)}
    if "dir" in raw:
        if not isinstance(raw["dir"], str):
            raise ConfigError("data.dir: expected a path string")
        return {"dir": raw["dir"]}
    ab = _merge(ABUNDANCE_DEFAULTS, raw["abundance"], "data.abundance")
    if not ab["path"]:
        raise ConfigError("data.abundance.path: required")
    return {"abundance": ab}


def resolve_config(command: str, raw: dict, seed: int) -> dict:
    """Validate ``raw`` and fill defaults for the sections ``command`` uses.

    One file can serve every subcommand. Every section present is validated;
    only the ones ``command`` uses enter the resolved config.
    """
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object")
    known = {"seed"}.union(*SECTIONS.values())
    for key in raw:
        if key not in known:
            raise ConfigError(f"{key}: unknown key")
    wanted = set(SECTIONS[command])
    present = wanted | (set(raw) - {"seed"})
    full: dict[str, Any] = {"seed": seed}
    if "data" in present:
        full["data"] = _data_section(raw.get("data", {}), seed)
    if "model" in present:
        full["model"] = dataclasses.asdict(_dataclass_section(ModelConfig, raw.get("model", {}), "model"))
    if "train" in present:
        tr = dict(raw.get("train", {}))
        tr.setdefault("seed", seed)
        full["train"] = dataclasses.asdict(_dataclass_section(TrainConfig, tr, "train"))
    if "eval" in present:
        full["eval"] = _merge(EVAL_DEFAULTS, raw.get("eval", {}), "eval")
        if full["eval"]["split"] not in data.SPLITS:
            raise ConfigError(f"eval.split: must be one of {data.SPLITS}")
    if "checkpoint" in present:
        full["checkpoint"] = raw.get("checkpoint")
        if full["checkpoint"] is not None and not isinstance(full["checkpoint"], str):
            raise ConfigError("checkpoint: expected a path string")
    for name, defaults in (("stats", STATS_DEFAULTS), ("compare", COMPARE_DEFAULTS),
                           ("gradcheck", GRADCHECK_DEFAULTS), ("sweep", SWEEP_DEFAULTS)):
        if name in present:
            full[name] = _merge(defaults, raw.get(name, {}), name)
    return {k: v for k, v in full.items() if k == "seed" or k in wanted}


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(_canonical(cfg).encode()).hexdigest()


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def resolve_seed(flag: int | None, raw: dict) -> int:
    if flag is not None:
        return flag
    if isinstance(raw, dict) and "seed" in raw:
        if not _type_ok(raw["seed"], 0):
            raise ConfigError("seed: expected int")
        return raw["seed"]
    env = os.environ.get("ILORA_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"ILORA_SEED: not an integer: {env!r}") from None
    return 0


# artifacts ---------------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def write_manifest(out: Path, command: str, cfg: dict, inputs: Sequence[Path], outputs: Sequence[Path]) -> Path:
    def rel(p):
        p = Path(p)
        try:
            return p.resolve().relative_to(out.resolve()).as_posix()
        except ValueError:
            return p.as_posix()

    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "inputs": {rel(p): sha256_file(p) for p in sorted(set(map(Path, inputs)))},
        "outputs": {rel(p): sha256_file(p) for p in sorted(set(map(Path, outputs)))},
    }
    return write_json(manifest, out / "manifest.json")


def save_checkpoint(model: ILoRAModel, path, extra: dict | None = None) -> Path:
    state = model.state_dict()
    obj = {
        "entity_ids": list(model.entity_ids),
        "model": dataclasses.asdict(model.cfg),
        "config_hash": model.cfg.digest(),
        "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in sorted(state.items())},
        **(extra or {}),
    }
    return write_json(obj, path)


def load_checkpoint(path) -> tuple[ILoRAModel, dict]:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    cfg = ModelConfig(**obj["model"])
    if obj.get("config_hash", cfg.digest()) != cfg.digest():
        raise ValueError(f"{path}: config hash does not match the stored model config")
    model = ILoRAModel(cfg, obj["entity_ids"])
    model.load_state_dict({k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
                           for k, v in obj["params"].items()})
    return model, obj


def write_loss_curve(records, path) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "task", "kl_pois", "kl_lap", "total", "val_auroc"])
        for r in records:
            w.writerow([r.epoch, repr(r.task), repr(r.kl_pois), repr(r.kl_lap), repr(r.total), repr(r.val_auroc)])
    return Path(path)


def write_pair_results(ref: stats.ReferenceEdgeSet, taxa: Sequence[str], path) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["test", "taxon_i", "taxon_j", "stat", "p", "q", "in_E_spear", "in_E_ratio", "in_E_GT",
                    "firth_flag"])
        for name, results in (("spearman", ref.spearman), ("logratio", ref.ratio)):
            for r in results:
                i, j = r.pair
                w.writerow([name, taxa[i], taxa[j], repr(r.statistic), repr(r.pvalue), repr(r.qvalue),
                            int(r.pair in ref.e_spear), int(r.pair in ref.e_ratio), int(r.pair in ref.e_gt),
                            int(r.firth)])
    return Path(path)


# data and experiment helpers ---------------------------------------------------------

def load_data(section: dict) -> tuple[data.Dataset, list[Path]]:
    """Dataset for a resolved ``data`` section plus the input files it read."""
    if "synthetic" in section:
        return data.gen_synthetic(data.SyntheticSpec(**section["synthetic"])), []
    if "dir" in section:
        d = Path(section["dir"])
        ds = data.read_dataset(d)
        inputs = [p for p in (d / "samples.csv", d / "ground_truth.csv", d / "reference.csv") if p.exists()]
        return ds, inputs
    ab = section["abundance"]
    table = data.load_abundance(ab["path"])
    taxa = data.select_entities(table, ab["select"], ab["k_sel"], ab["taxa"])
    ds = data.dataset_from_table(table, taxa)
    inputs = [Path(ab["path"])]
    if ab["reference"]:
        ds.reference = sorted(data.read_edge_set(ab["reference"], taxa))
        inputs.append(Path(ab["reference"]))
    return ds, inputs


def make_batch(model: ILoRAModel, ds: data.Dataset, split: str):
    part = ds.split(split)
    if len(part.labels) == 0:
        raise ConfigError(f"split '{split}' is empty")
    return model.make_batch(part.values, part.mask, part.labels)


def default_k_sel(k: int) -> int:
    return k - 1


def topk_graphs(model: ILoRAModel, batch, k_sel: int, samples: int, rng) -> tuple[np.ndarray, list]:
    adj = model.mean_adjacency(batch, samples, rng)
    return adj, [g.symmetrize_topk(a, k_sel)[1] for a in adj]


def evaluate_model(model: ILoRAModel, ds: data.Dataset, ev: dict, seed: int) -> dict:
    """Metrics JSON for one split: calibration, ranking and graph recovery."""
    batch = make_batch(model, ds, ev["split"])
    rng = np.random.default_rng(seed)
    pred = mc_predict(model, batch, ev["samples"], rng)
    report = metrics.metrics_report(pred.probs[:, 1], batch.labels, ev["bins"], ev["threshold"])
    by_s = {}
    if not model.cfg.static_adapter:
        for s in ev["report_samples"]:
            p = mc_predict(model, batch, s, np.random.default_rng([seed, s])).probs[:, 1]
            by_s[str(s)] = metrics.metrics_report(p, batch.labels, ev["bins"], ev["threshold"])
    k = len(ds.entity_ids)
    k_sel = ev["k_sel"] or default_k_sel(k)
    err = None
    if ds.reference and not model.cfg.static_adapter:
        _, tops = topk_graphs(model, batch, k_sel, ev["graph_samples"], rng)
        err = metrics.graph_score(tops, ds.reference, k * (k - 1) // 2).mean
    return {**report, "err_at_k": err, "K": k, "k_sel": k_sel, "S": ev["samples"], "seed": seed, "by_S": by_s}


def fit_model(ds: data.Dataset, model_cfg: dict, train_cfg: dict, seed: int):
    model = ILoRAModel(ModelConfig(**model_cfg), ds.entity_ids, seed=seed)
    tr = make_batch(model, ds, "train")
    va = make_batch(model, ds, "val") if len(ds.indices("val")) else None
    res = train(model, tr, va, TrainConfig(**train_cfg))
    return model, res


# subcommands -------------------------------------------------------------------------

def cmd_synth(cfg, out: Path, args):
    ds, inputs = load_data(cfg["data"])
    return inputs, data.write_dataset(ds, out / "dataset")


def cmd_train(cfg, out: Path, args):
    ds, inputs = load_data(cfg["data"])
    model, res = fit_model(ds, cfg["model"], cfg["train"], cfg["seed"])
    extra = {"best_epoch": res.best_epoch, "best_score": res.best_score, "diverged": res.diverged,
             "train": cfg["train"]}
    outputs = [save_checkpoint(model, out / "checkpoint.json", extra),
               write_loss_curve(res.curve, out / "loss_curve.csv")]
    if res.diverged:
        log.warning("training diverged; kept the last finite checkpoint")
    return inputs, outputs


def _checkpoint_path(cfg, args) -> Path:
    path = args.checkpoint or cfg.get("checkpoint")
    if not path:
        raise ConfigError("checkpoint: required (flag --checkpoint or config key)")
    return Path(path)


def _load_for_eval(cfg, args):
    ck = _checkpoint_path(cfg, args)
    model, _ = load_checkpoint(ck)
    ds, inputs = load_data(cfg["data"])
    if list(ds.entity_ids) != list(model.entity_ids):
        raise ConfigError("data: entity ids differ from the checkpoint")
    return model, ds, [ck, *inputs]


def cmd_eval(cfg, out: Path, args):
    model, ds, inputs = _load_for_eval(cfg, args)
    report = evaluate_model(model, ds, cfg["eval"], cfg["seed"])
    print(metrics.format_table({k: v for k, v in report.items() if v is not None and k != "by_S"}))
    return inputs, [write_json(report, out / "metrics.json")]


def cmd_infer_graph(cfg, out: Path, args):
    model, ds, inputs = _load_for_eval(cfg, args)
    if model.cfg.static_adapter:
        raise ConfigError("model: a static adapter has no latent graph")
    ev = cfg["eval"]
    batch = make_batch(model, ds, ev["split"])
    k = len(ds.entity_ids)
    k_sel = ev["k_sel"] or default_k_sel(k)
    adj, tops = topk_graphs(model, batch, k_sel, ev["graph_samples"], np.random.default_rng(cfg["seed"]))
    cohort = adj.mean(axis=0)
    outputs = data.export_graph(g.latent_graph(cohort, k_sel), ds.entity_ids, out / "graph.csv")
    summary = {"k_sel": k_sel, "n": int(batch.size), "K": k}
    if ds.reference:
        total = k * (k - 1) // 2
        score = metrics.graph_score(tops, ds.reference, total)
        summary.update(err_at_k=score.mean, err_cohort=metrics.err_at_k(g.symmetrize_topk(cohort, k_sel)[1],
                                                                         ds.reference, total))
    outputs.append(write_json(summary, out / "graph_summary.json"))
    return inputs, outputs


def cmd_stats_ref(cfg, out: Path, args):
    st = cfg["stats"]
    if not st["abundance"]:
        raise ConfigError("stats.abundance: required")
    table = data.load_abundance(st["abundance"])
    ref = stats.build_reference(table, fdr=st["fdr"], pseudocount=st["pseudocount"], eps=st["eps"])
    outputs = [write_pair_results(ref, table.taxa, out / "pairs.csv")]
    data.write_edge_set(ref.e_gt, table.taxa, out / "reference.csv")
    outputs.append(out / "reference.csv")
    outputs.append(write_json(ref.counts(), out / "reference_counts.json"))
    return [Path(st["abundance"])], outputs


def _entities_for(cp: dict) -> list[str]:
    if cp["entities"]:
        return list(cp["entities"])
    if cp["graphs"]:
        adj = Path(cp["graphs"][0]).with_suffix(".adjacency.csv")
        if adj.exists():
            with open(adj, newline="", encoding="utf-8") as fh:
                return next(csv.reader(fh))[1:]
    raise ConfigError("compare.entities: required when no adjacency CSV sits next to the first graph")


def cmd_compare(cfg, out: Path, args):
    cp = cfg["compare"]
    if not cp["reference"]:
        raise ConfigError("compare.reference: required")
    ids = _entities_for(cp)
    ref = data.read_edge_set(cp["reference"], ids)
    total = len(ids) * (len(ids) - 1) // 2
    result: dict[str, Any] = {"K": len(ids), "reference_size": len(ref), "total_pairs": total, "graphs": {}}
    for path in cp["graphs"]:
        weights, top = data.read_edge_list(path, ids)
        if cp["k_sel"]:
            ranked = sorted(weights.items(), key=lambda kv: (-kv[1], kv[0]))
            top = [pair for pair, _ in ranked[:cp["k_sel"]]]
        result["graphs"][Path(path).as_posix()] = metrics.err_at_k(top, ref, total)
    if result["graphs"]:
        result["mean_err"] = float(np.mean(list(result["graphs"].values())))
    if cp["random_trials"]:
        k_sel = cp["k_sel"] or default_k_sel(len(ids))
        rng = np.random.default_rng(cfg["seed"])
        result["random"] = {"k_sel": k_sel, "trials": cp["random_trials"],
                            "mean_err": metrics.random_baseline_err(total, len(ref), k_sel, cp["random_trials"], rng)}
    print(json.dumps(result, sort_keys=True, indent=2))
    return [Path(cp["reference"]), *map(Path, cp["graphs"])], [write_json(result, out / "compare.json")]


def cmd_gradcheck(cfg, out: Path, args):
    gc = cfg["gradcheck"]
    rng = np.random.default_rng(cfg["seed"])
    ids = [f"n{i}" for i in range(gc["k"])]
    model = ILoRAModel(ModelConfig(**cfg["model"]), ids, seed=cfg["seed"])
    b = model.params["lora.B"]
    b.data = gc["b_scale"] * rng.standard_normal(b.shape)  # B = 0 would hide every hypernetwork gradient
    batch = model.make_batch(rng.standard_normal((gc["n"], gc["k"])), labels=np.arange(gc["n"]) % 2)
    report = grad_check(model, batch, TrainConfig(**cfg["train"]), n_coords=gc["n_coords"], h=gc["h"],
                        seed=cfg["seed"])
    result = {"max_rel_error": report.max_rel_error, "checked": report.checked,
              "skipped_kinks": report.skipped_kinks, "tol": gc["tol"], "ok": report.max_rel_error < gc["tol"]}
    print(json.dumps(result, sort_keys=True))
    return [], [write_json(result, out / "gradcheck.json")], 0 if result["ok"] else 1


def cmd_sweep_k(cfg, out: Path, args):
    section = cfg["data"]
    if "dir" in section:
        raise ConfigError("data.dir: sweep-k needs a synthetic spec or an abundance table")
    rows, inputs = [], []
    for k in cfg["sweep"]["ks"]:
        sub = json.loads(json.dumps(section))
        if "synthetic" in sub:
            sub["synthetic"]["k"] = k
        else:
            sub["abundance"]["k_sel"] = k
        try:
            ds, used = load_data(sub)
        except ValueError as err:
            raise ConfigError(f"sweep.ks: K={k}: {err}") from None
        inputs.extend(used)
        model, _ = fit_model(ds, cfg["model"], cfg["train"], cfg["seed"])
        ev = dict(cfg["eval"], k_sel=None)
        rows.append(evaluate_model(model, ds, ev, cfg["seed"]))
        log.info("K=%d auroc=%.4f", k, rows[-1]["auroc"])
    path = out / "sweep.csv"
    cols = ["K", "k_sel", "auroc", "auprc", "ece", "f1_pos", "err_at_k", "n"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in cols])
    return inputs, [path]


HANDLERS = {
    "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "infer-graph": cmd_infer_graph,
    "stats-ref": cmd_stats_ref, "compare": cmd_compare, "gradcheck": cmd_gradcheck, "sweep-k": cmd_sweep_k,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ilora", description="Graph-conditioned low-rank adapters.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="global seed (overrides config and ILORA_SEED)")
        p.add_argument("--out", default="out", help="output directory")
        if name in ("eval", "infer-graph"):
            p.add_argument("--checkpoint", help="checkpoint JSON written by 'train'")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def run_cli(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("ilora: error: missing subcommand", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        raw = {}
        config_inputs = []
        if args.config:
            try:
                raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
            except json.JSONDecodeError as err:
                raise ConfigError(f"{args.config}: invalid JSON: {err}") from None
            config_inputs.append(Path(args.config))
        seed = resolve_seed(args.seed, raw)
        cfg = resolve_config(args.command, raw, seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        inputs, outputs, *code = HANDLERS[args.command](cfg, out, args)
        write_manifest(out, args.command, cfg, [*config_inputs, *inputs], outputs)
        if code and code[0]:
            return code[0]
    except ConfigError as err:
        print(f"ilora {args.command}: config error: {err}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as err:
        print(f"ilora {args.command}: error: {err}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
