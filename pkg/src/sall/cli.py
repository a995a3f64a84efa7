"""Command-line entry point: ``sall <verb> [--config c.yaml] [--seed N] [--out DIR] [--override k=v ...]``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import synthetic as syn
from .calibration import calibration_report, plot_reliability, records_from
from .experiments import (Bench, ExperimentConfig, best_ratio, gains, run_ablation, run_ntask, run_ratio_sweep,
                          run_temperature_sweep)
from .interpretability import grad_cam, mask_contrast, save_heatmap
from .network import load_checkpoint, predict_proba, save_checkpoint
from .pipeline import (attach_soft_labels, generate_synergic_labels, label_stats, pretrain_single,
                       read_soft_labels, train_multitask, write_run_log, write_soft_labels)

log = logging.getLogger("sall")

VERBS = ("generate-data", "pretrain", "make-labels", "train-sall", "ablation", "t-sweep", "ratio-sweep", "ntask",
         "report", "gradcam")


class StageError(RuntimeError):
    pass


def _dump(path: Path, doc) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _seed(cfg: ExperimentConfig) -> int:
    return int(cfg.seeds[0])


# ---------------------------------------------------------------- data


def _splits(cfg: ExperimentConfig, out: Path, bench: Bench) -> dict:
    """``task -> (train, val, test)`` from an exported dataset when present, else generated."""
    root = out / "data"
    if not (root / "config.json").exists():
        return bench.splits(_seed(cfg))
    meta = json.loads((root / "config.json").read_text())
    if meta["config"] != cfg.fingerprint() or meta["seed"] != _seed(cfg):
        raise StageError(f"{root} was generated with another config or seed; re-run generate-data")
    examples, split_of = syn.import_dataset(root)
    out_splits = {}
    for task in cfg.tasks:
        parts = tuple([ex for ex in examples if ex.task_id == task and split_of[ex.example_id] == name]
                      for name in ("train", "val", "test"))
        out_splits[task] = parts
    return out_splits


def cmd_generate_data(cfg, out, bench):
    seed = _seed(cfg)
    splits = bench.splits(seed)
    examples, split_of, recipe = [], {}, {}
    for (task, ov), parts in zip(bench.task_pairs(), splits.values()):
        recipe[task.task_id] = task.fingerprint(syn.resolve_kinds(task, ov))
        for name, part in zip(("train", "val", "test"), parts):
            examples += part
            split_of.update({ex.example_id: name for ex in part})
    syn.export_dataset(out / "data", examples, split_of, seed, recipe)
    _dump(out / "data" / "config.json", {"config": cfg.fingerprint(), "seed": seed})
    digest = {t: hashlib.sha256(b"".join(ex.image.tobytes() for p in parts for ex in p)).hexdigest()[:16]
              for t, parts in splits.items()}
    counts = {t: {n: len(p) for n, p in zip(("train", "val", "test"), parts)} for t, parts in splits.items()}
    return {"counts": counts, "image_hash": digest, "recipe_hash": recipe}


def _models(out: Path) -> Path:
    return out / "models"


def cmd_pretrain(cfg, out, bench):
    seed = _seed(cfg)
    splits = _splits(cfg, out, bench)
    tcfg = cfg.train_config(seed=seed)
    metrics = {}
    for task, ov in bench.task_pairs():
        spec = cfg.spec([(task.task_id, task.K)])
        res = pretrain_single(splits[task.task_id][0], spec, tcfg)
        path = save_checkpoint(_models(out) / f"{task.task_id}_single.npz", res.params, spec, seed,
                               config=cfg.fingerprint())
        write_run_log(_models(out) / f"{task.task_id}_single.log.json", res, tcfg, spec)
        test = splits[task.task_id][2]
        probs = predict_proba(res.params, spec, np.stack([e.image for e in test]), task.task_id)
        rep = calibration_report(records_from(probs, [e.grade for e in test]), cfg.n_bins)
        metrics[task.task_id] = {"accuracy": rep.accuracy, "final_loss": res.total_losses[-1],
                                 "params_hash": res.params.fingerprint(), "checkpoint": path.name}
    return metrics


def _load(out: Path, name: str):
    path = _models(out) / f"{name}.npz"
    if not path.exists():
        raise StageError(f"missing checkpoint {path}; run the earlier stage first")
    return load_checkpoint(path)


def cmd_make_labels(cfg, out, bench):
    splits = _splits(cfg, out, bench)
    T = cfg.train_config().temperature
    stats = {}
    for src in cfg.tasks:
        params, spec, header = _load(out, f"{src}_single")
        for dst in cfg.tasks:
            if dst == src:
                continue
            train = splits[dst][0]
            labels = generate_synergic_labels(params, spec, src, train, T)
            write_soft_labels(out / "labels" / f"{dst}_from_{src}.jsonl", train, src, header["params_hash"])
            s = label_stats(labels)
            stats[f"{src}->{dst}"] = {"T": T, "mean_max": s.mean_max, "mean_variance": s.mean_variance, "n": len(labels)}
    return stats


def cmd_train_sall(cfg, out, bench):
    seed = _seed(cfg)
    splits = _splits(cfg, out, bench)
    train = {t: splits[t][0] for t in cfg.tasks}
    if cfg.use_synergic_labels:
        for dst in cfg.tasks:
            for src in cfg.tasks:
                if src != dst:
                    path = out / "labels" / f"{dst}_from_{src}.jsonl"
                    if not path.exists():
                        raise StageError(f"missing soft labels {path}; run make-labels first")
                    attach_soft_labels(train[dst], read_soft_labels(path))
    tcfg = cfg.train_config(seed=seed)
    heads = [(t.task_id, t.K) for t, _ in bench.task_pairs()]
    metrics = {}
    groups = [heads] if cfg.use_multitask else [[h] for h in heads]
    for group in groups:
        spec = cfg.spec(group)
        data = train if cfg.use_synergic_labels else {t: train[t] for t, _ in group}
        res = train_multitask(data, spec, tcfg, use_soft=cfg.use_synergic_labels)
        name = "sall" if cfg.use_multitask else f"sall_{group[0][0]}"
        save_checkpoint(_models(out) / f"{name}.npz", res.params, spec, seed, config=cfg.fingerprint())
        write_run_log(_models(out) / f"{name}.log.json", res, tcfg, spec)
        for t, _ in group:
            test = splits[t][2]
            probs = predict_proba(res.params, spec, np.stack([e.image for e in test]), t)
            rep = calibration_report(records_from(probs, [e.grade for e in test]), cfg.n_bins)
            metrics[t] = {"accuracy": rep.accuracy, "conf": rep.conf, "err": rep.err, "ece": rep.ece,
                          "params_hash": res.params.fingerprint()}
    return metrics


def cmd_report(cfg, out, bench):
    splits = _splits(cfg, out, bench)
    doc = {}
    sall = _load(out, "sall")
    for t in cfg.tasks:
        test = splits[t][2]
        labels = [e.grade for e in test]
        images = np.stack([e.image for e in test])
        doc[t] = {}
        for name, (params, spec, _) in (("baseline", _load(out, f"{t}_single")), ("sall", sall)):
            probs = predict_proba(params, spec, images, t)
            rep = calibration_report(records_from(probs, labels), cfg.n_bins)
            rep.save(out / "report" / f"{t}_{name}_calibration.json")
            plot_reliability(rep, out / "report" / f"{t}_{name}_reliability.png", f"{t} {name}  ECE {rep.ece:.3f}")
            K = probs.shape[1]
            cm = np.zeros((K, K), dtype=np.int64)
            np.add.at(cm, (np.array(labels), probs.argmax(1)), 1)
            np.savetxt(out / "report" / f"{t}_{name}_confusion.txt", cm, fmt="%d")
            doc[t][name] = {**{k: v for k, v in rep.to_dict().items() if k != "bins"}, "confusion": cm.tolist()}
    return doc


def cmd_gradcam(cfg, out, bench):
    """Cross-task heatmaps: severe images of the first task queried through every other head."""
    splits = _splits(cfg, out, bench)
    params, spec, _ = _load(out, "sall")
    native = cfg.tasks[0]
    task = syn.CATALOG[native]
    severe = [e for e in splits[native][2] if e.grade == task.K - 1][: cfg.gradcam_images]
    doc = {}
    for head in cfg.tasks[1:]:
        shared = set(syn.resolve_kinds(*dict((t.task_id, (t, o)) for t, o in bench.task_pairs())[head])) & set(task.kinds)
        rows = []
        for ex in severe:
            h = grad_cam(params, spec, ex.image, head)
            save_heatmap(out / "gradcam" / f"{ex.example_id}_{head}.png", h, ex.image)
            inside, outside = mask_contrast(h, ex.lesion_mask(shared))
            rows.append({"example_id": ex.example_id, "class_index": h.class_index, "inside": inside,
                         "outside": outside, "degenerate": h.degenerate})
        doc[head] = {"shared_kinds": sorted(shared), "images": rows,
                     "concentrated": sum(r["inside"] > r["outside"] for r in rows)}
    return doc


def _table_verb(runner):
    def run(cfg, out, bench):
        res = runner(cfg, bench)
        table, extra = (res[0], res[1:]) if isinstance(res, tuple) else (res, ())
        table.save(out / table.experiment)
        doc = {"results": table.fingerprint(), "aggregates": table.aggregates()}
        if table.experiment == "ablation":
            doc["gains"] = {str(T): gains(table, T) for T in cfg.ablation_T}
        elif table.experiment == "t-sweep":
            doc["best_T"], doc["label_stats"] = extra
        elif table.experiment == "ratio-sweep":
            doc["best_ratio"] = {t: best_ratio(table, t) for t in cfg.tasks}
        return doc
    return run


COMMANDS = {
    "generate-data": cmd_generate_data,
    "pretrain": cmd_pretrain,
    "make-labels": cmd_make_labels,
    "train-sall": cmd_train_sall,
    "ablation": _table_verb(run_ablation),
    "t-sweep": _table_verb(run_temperature_sweep),
    "ratio-sweep": _table_verb(run_ratio_sweep),
    "ntask": _table_verb(run_ntask),
    "report": cmd_report,
    "gradcam": cmd_gradcam,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sall", description=__doc__)
    ap.add_argument("verb", choices=VERBS)
    ap.add_argument("--config", help="YAML experiment config")
    ap.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
    ap.add_argument("--out", help="output directory (overrides the config)")
    ap.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                    help="config override; repeatable, train.<field> reaches TrainConfig")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    stage = "config"
    try:
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        cfg = cfg.with_overrides(args.override)
        if args.seed is not None:
            cfg = cfg.with_overrides([f"seeds=[{args.seed}]"])
        if args.out:
            cfg = cfg.with_overrides([f"out={args.out}"])
        out = Path(cfg.out)
        stage = args.verb
        doc = COMMANDS[args.verb](cfg, out, Bench(cfg))
        path = _dump(out / "metrics" / f"{args.verb}.json",
                     {"verb": args.verb, "config": cfg.fingerprint(), "seeds": list(cfg.seeds), "metrics": doc})
        print(f"{args.verb}: wrote {path}")
        return 0
    except Exception as exc:  # every failure exits nonzero naming the stage
        log.debug("stage %s failed", stage, exc_info=True)
        print(f"sall: stage {stage!r} failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
