"""Config-driven experiment grid: ablation, temperature sweep, data-ratio sweep,
three-task runs with per-class caps, confusion matrices and result tables.

Every cell of a grid shares the generated datasets and pre-trained graders of
its seed, so cells differ only in the training scheme.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import yaml

from . import synthetic as syn
from .calibration import calibration_report, records_from
from .network import NetworkSpec, ParameterSet, default_spec, init_params, predict_proba
from .pipeline import TrainConfig, config_hash, generate_synergic_labels, label_stats, pretrain_single, train_multitask

log = logging.getLogger(__name__)

CELLS = {
    # name: (use_synergic_labels, use_multitask)
    "baseline": (False, False),
    "multitask": (False, True),
    "labels": (True, False),
    "sall": (True, True),
}


class ExperimentError(RuntimeError):
    """A grid cell failed; the message names the cell."""


@dataclass(frozen=True)
class ExperimentConfig:
    tasks: tuple = ("dr", "amd")
    overlap: float = 0.6
    n_per_grade: int = 300  # before the 50/25/25 split
    image_size: int = 64
    width: int = 8
    feature_dim: int = 32
    train: dict = field(default_factory=dict)  # TrainConfig fields
    use_synergic_labels: bool = True
    use_multitask: bool = True
    ablation_T: tuple = (1.0, 3.0)
    t_grid: tuple = (1.0, 3.0, 5.0, 8.0, 10.0, 20.0, 50.0)
    ratio_grid: tuple = (0.2, 0.4, 0.6, 0.8, 1.0)  # auxiliary share of its train split
    caps: tuple = (1500, 3000)
    cap_scale: float = 0.0267  # 150 train images per grade vs ~5630 per class at full scale
    seeds: tuple = (0, 1, 2)
    n_bins: int = 10
    gradcam_images: int = 20
    out: str = "runs"

    def __post_init__(self):
        for name in ("tasks", "ablation_T", "t_grid", "ratio_grid", "caps", "seeds"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "train", dict(self.train))
        if not self.seeds:
            raise ValueError("seeds list must not be empty")
        if len(self.tasks) < 1:
            raise ValueError("need at least one task")
        unknown = [t for t in self.tasks if t not in syn.CATALOG]
        if unknown:
            raise ValueError(f"unknown tasks {unknown}; catalog has {sorted(syn.CATALOG)}")
        if self.n_per_grade < 4:
            raise ValueError("n_per_grade must be at least 4 to split")
        bad = set(self.train) - {f.name for f in dataclasses.fields(TrainConfig)}
        if bad:
            raise ValueError(f"unknown train keys {sorted(bad)}")
        self.train_config()

    # -- construction ------------------------------------------------------

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        d = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(d, dict):
            raise ValueError(f"{path}: config must be a mapping")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def with_overrides(self, pairs: Sequence[str]) -> "ExperimentConfig":
        """Apply ``key=value`` strings; values parse as YAML, dotted keys reach into ``train``."""
        d = self.to_dict()
        for pair in pairs:
            if "=" not in pair:
                raise ValueError(f"override {pair!r} is not key=value")
            key, raw = pair.split("=", 1)
            value = yaml.safe_load(raw)
            if key.startswith("train."):
                d["train"][key[len("train."):]] = value
            elif key in d:
                d[key] = value
            else:
                raise ValueError(f"unknown config key {key!r}")
        return ExperimentConfig.from_dict(d)

    def fingerprint(self) -> str:
        d = self.to_dict()
        d.pop("out")
        return config_hash(d)

    # -- derived objects -----------------------------------------------------

    def train_config(self, **changes) -> TrainConfig:
        return TrainConfig(**{**self.train, **changes})

    def spec(self, heads) -> NetworkSpec:
        return default_spec(heads, (3, self.image_size, self.image_size), self.width, self.feature_dim)


# ------------------------------------------------------------------ tables


METRICS = ("accuracy", "conf", "err", "ece")


@dataclass
class ResultTable:
    """Per-seed rows plus mean/std aggregates over rows sharing a cell key."""

    experiment: str
    config_fingerprint: str
    rows: list = field(default_factory=list)

    def add(self, cell: str, params: Mapping, seed: int, metrics: Mapping, confusion: Optional[Mapping] = None):
        self.rows.append({
            "cell": cell,
            "params": dict(params),
            "seed": seed,
            "metrics": {t: dict(m) for t, m in metrics.items()},
            "confusion": {t: np.asarray(c).tolist() for t, c in (confusion or {}).items()},
            "config": self.config_fingerprint,
        })

    @staticmethod
    def key(row) -> tuple:
        return (row["cell"], json.dumps(row["params"], sort_keys=True))

    def aggregates(self) -> list:
        groups: dict = {}
        for row in self.rows:
            groups.setdefault(self.key(row), []).append(row)
        out = []
        for (cell, _), rows in groups.items():
            agg = {"cell": cell, "params": rows[0]["params"], "seeds": [r["seed"] for r in rows], "mean": {}, "std": {}}
            for task in rows[0]["metrics"]:
                agg["mean"][task], agg["std"][task] = {}, {}
                for m in METRICS:
                    vals = [r["metrics"][task].get(m) for r in rows]
                    vals = [v for v in vals if v is not None]
                    agg["mean"][task][m] = float(np.mean(vals)) if vals else None
                    agg["std"][task][m] = float(np.std(vals)) if vals else None
            out.append(agg)
        return out

    def find(self, cell: str, **params) -> dict:
        for agg in self.aggregates():
            if agg["cell"] == cell and all(agg["params"].get(k) == v for k, v in params.items()):
                return agg
        raise KeyError(f"no aggregate for cell {cell!r} with {params}")

    def confusion_sum(self, cell: str, task: str, **params) -> np.ndarray:
        mats = [np.array(r["confusion"][task]) for r in self.rows
                if r["cell"] == cell and all(r["params"].get(k) == v for k, v in params.items())]
        return np.sum(mats, axis=0)

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.rows, sort_keys=True).encode()).hexdigest()[:16]

    def to_text(self) -> str:
        """Aligned human-readable table of the aggregates."""
        lines = [f"# {self.experiment}  config {self.config_fingerprint}  results {self.fingerprint()}"]
        header = ["cell", "params", "task", "n"] + [f"{m}" for m in METRICS]
        body = []
        for agg in self.aggregates():
            for task, means in agg["mean"].items():
                cells = [agg["cell"], json.dumps(agg["params"], sort_keys=True), task, str(len(agg["seeds"]))]
                for m in METRICS:
                    mu, sd = means[m], agg["std"][task][m]
                    cells.append("-" if mu is None else f"{mu:.4f}+-{sd:.4f}")
                body.append(cells)
        widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
        for r in [header] + body:
            lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
        return "\n".join(lines) + "\n"

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "rows.jsonl", "w") as fh:
            for row in self.rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        with open(directory / "aggregates.jsonl", "w") as fh:
            for agg in self.aggregates():
                fh.write(json.dumps({**agg, "config": self.config_fingerprint}, sort_keys=True) + "\n")
        (directory / "table.txt").write_text(self.to_text())
        return directory


# ------------------------------------------------------------- evaluation


def confusion_matrix(params, spec: NetworkSpec, test: Sequence, task_id: str) -> np.ndarray:
    """Counts with rows = true grade, columns = predicted grade."""
    if not test:
        raise ValueError("confusion matrix needs a non-empty test set")
    K = spec.n_classes(task_id)
    pred = predict_proba(params, spec, np.stack([ex.image for ex in test]), task_id).argmax(axis=1)
    m = np.zeros((K, K), dtype=np.int64)
    np.add.at(m, (np.array([ex.grade for ex in test]), pred), 1)
    return m


def evaluate(params, spec: NetworkSpec, test: Sequence, task_id: str, n_bins: int = 10):
    """``(metrics dict, confusion matrix)`` for one head on one test set."""
    probs = predict_proba(params, spec, np.stack([ex.image for ex in test]), task_id)
    labels = np.array([ex.grade for ex in test])
    rep = calibration_report(records_from(probs, labels), n_bins)
    K = spec.n_classes(task_id)
    m = np.zeros((K, K), dtype=np.int64)
    np.add.at(m, (labels, probs.argmax(axis=1)), 1)
    return {"accuracy": rep.accuracy, "conf": rep.conf, "err": rep.err, "ece": rep.ece}, m


def extreme_confusions(matrix) -> int:
    """Grade 0 predicted as the top grade plus the top grade predicted as 0."""
    m = np.asarray(matrix)
    return int(m[0, -1] + m[-1, 0])


# ----------------------------------------------------------------- bench


def _relabel(examples):
    """Copies that share images but own their soft-label maps."""
    return [dataclasses.replace(ex, soft_labels={}) for ex in examples]


class Bench:
    """Datasets, graders and trained networks for one config, memoized.

    ``cache`` may be shared between benches (and configs): keys include
    everything that determines the cached object.
    """

    def __init__(self, config: ExperimentConfig, cache: Optional[dict] = None):
        self.config = config
        self.cache = {} if cache is None else cache

    def _memo(self, key, build):
        key = json.dumps(key, sort_keys=True, default=str)
        if key not in self.cache:
            self.cache[key] = build()
        return self.cache[key]

    # data

    def task_pairs(self, tasks=None):
        return syn.benchmark_tasks(tuple(tasks or self.config.tasks), self.config.overlap)

    def _data_key(self, task, ov, seed):
        return ["data", task.task_id, list(syn.resolve_kinds(task, ov)), task.fingerprint(), self.config.n_per_grade,
                self.config.image_size, seed]

    def splits(self, seed: int, tasks=None) -> dict:
        """``task -> (train, val, test)``."""
        out = {}
        for task, ov in self.task_pairs(tasks):
            def build(task=task, ov=ov):
                data = syn.generate_dataset(task, ov, [self.config.n_per_grade] * task.K, self.config.image_size, seed)
                return syn.split(data, seed)
            out[task.task_id] = self._memo(self._data_key(task, ov, seed), build)
        return out

    def train_sets(self, seed, tasks=None, cap: Optional[int] = None) -> dict:
        sets = {t: s[0] for t, s in self.splits(seed, tasks).items()}
        if cap is None:
            return sets
        capped = {}
        for t, data in sets.items():
            seen: dict = {}
            keep = []
            for ex in data:
                seen[ex.grade] = seen.get(ex.grade, 0) + 1
                if seen[ex.grade] <= cap:
                    keep.append(ex)
            capped[t] = keep
        return capped

    # models

    def _train_key(self, cfg: TrainConfig, uses_T: bool) -> dict:
        d = cfg.to_dict()
        if not uses_T and not cfg.apply_t_to_hard:
            d.pop("temperature")  # T cannot influence a hard-label-only run
        return d

    def baseline(self, task_id: str, seed: int, tasks=None, cap=None):
        """Single-task grader: ``(params, spec)``."""
        tasks = tuple(tasks or self.config.tasks)
        cfg = self.config.train_config(seed=seed)
        task, ov = dict((t.task_id, (t, o)) for t, o in self.task_pairs(tasks))[task_id]
        spec = self.config.spec([(task_id, task.K)])
        if cap is not None:
            grades = [ex.grade for ex in self.splits(seed, tasks)[task_id][0]]
            if max(np.bincount(grades)) <= cap:
                cap = None  # the cap removes nothing, so share the uncapped grader

        def build():
            log.info("pretrain %s seed %d cap %s", task_id, seed, cap)
            return pretrain_single(self.train_sets(seed, tasks, cap)[task_id], spec, cfg).params, spec
        key = ["baseline", self._data_key(task, ov, seed), cap, self._train_key(cfg, False), spec.fingerprint()]
        return self._memo(key, build)

    def labelled(self, seed: int, T: float, tasks=None, cap=None) -> dict:
        """Train sets (copies) carrying synergic labels at ``T`` from every other task's grader."""
        tasks = tuple(tasks or self.config.tasks)

        def build():
            sets = {t: _relabel(d) for t, d in self.train_sets(seed, tasks, cap).items()}
            for src in tasks:
                params, spec = self.baseline(src, seed, tasks, cap)
                for dst in tasks:
                    if dst != src:
                        generate_synergic_labels(params, spec, src, sets[dst], T)
            return sets
        key = ["labelled", tasks, seed, T, cap, self.config.fingerprint()]
        return self._memo(key, build)

    def _warm_init(self, spec: NetworkSpec, seed: int, tasks, cap) -> ParameterSet:
        """Trunk from the first task's grader, each head from its own grader."""
        init = init_params(spec, seed)
        for i, t in enumerate(tasks):
            grader, _ = self.baseline(t, seed, tasks, cap)
            names = grader.head_names(t) + (grader.trunk_names() if i == 0 else [])
            for name in names:
                init.values[name] = grader.values[name].copy()
        return init

    def cell(self, name: str, seed: int, T: float, tasks=None, cap=None, task_counts=None) -> dict:
        """Trained model(s) for an ablation cell: ``task -> (params, spec)``."""
        tasks = tuple(tasks or self.config.tasks)
        use_labels, use_mt = CELLS[name]
        if name == "baseline":
            return {t: self.baseline(t, seed, tasks, cap) for t in tasks}
        cfg = self.config.train_config(seed=seed, temperature=T, task_counts=task_counts)
        heads = [(t.task_id, t.K) for t, _ in self.task_pairs(tasks)]

        def build():
            log.info("cell %s seed %d T %s cap %s counts %s", name, seed, T, cap, task_counts)
            data = self.labelled(seed, T, tasks, cap) if use_labels else self.train_sets(seed, tasks, cap)
            if use_mt:
                spec = self.config.spec(heads)
                init = self._warm_init(spec, seed, tasks, cap) if cfg.warm_start else None
                res = train_multitask(data, spec, cfg, use_soft=use_labels, init=init)
                return {t: (res.params, spec) for t in tasks}
            out = {}
            for t, k in heads:
                spec = self.config.spec([(t, k)])
                out[t] = (train_multitask(data, spec, cfg, use_soft=True).params, spec)
            return out
        key = ["cell", name, tasks, seed, cap, self._train_key(cfg, use_labels), self.config.fingerprint()]
        try:
            return self._memo(key, build)
        except Exception as exc:
            raise ExperimentError(f"cell {name!r} (seed {seed}, T {T}, cap {cap}) failed: {exc}") from exc

    def score(self, models: Mapping, seed: int, tasks=None):
        splits = self.splits(seed, tasks)
        metrics, conf = {}, {}
        for t, (params, spec) in models.items():
            metrics[t], conf[t] = evaluate(params, spec, splits[t][2], t, self.config.n_bins)
        return metrics, conf


# ---------------------------------------------------------------- runners


def run_ablation(config: ExperimentConfig, bench: Optional[Bench] = None, cells=tuple(CELLS)) -> ResultTable:
    """The {labels on/off} x {multi-task on/off} grid at each T in ``ablation_T``."""
    bench = bench or Bench(config)
    table = ResultTable("ablation", config.fingerprint())
    for T in config.ablation_T:
        for name in cells:
            use_labels, use_mt = CELLS[name]
            for seed in config.seeds:
                m, c = bench.score(bench.cell(name, seed, T), seed)
                table.add(name, {"T": T, "use_synergic_labels": use_labels, "use_multitask": use_mt}, seed, m, c)
    return table


def gains(table: ResultTable, T: float) -> dict:
    """Accuracy gain of full SALL at ``T`` over the baseline and over SALL at T=1."""
    sall = table.find("sall", T=T)["mean"]
    base = table.find("baseline", T=T)["mean"]
    out = {}
    for task in sall:
        out[task] = {"vs_baseline": sall[task]["accuracy"] - base[task]["accuracy"]}
        try:
            out[task]["vs_sall_T1"] = sall[task]["accuracy"] - table.find("sall", T=1.0)["mean"][task]["accuracy"]
        except KeyError:
            out[task]["vs_sall_T1"] = None
    return out


def run_temperature_sweep(config: ExperimentConfig, bench: Optional[Bench] = None):
    """Full SALL at each T of ``t_grid``; returns ``(table, best_T per task, label stats)``."""
    if not config.t_grid:
        raise ValueError("temperature sweep needs a non-empty t_grid")
    bench = bench or Bench(config)
    table = ResultTable("t-sweep", config.fingerprint())
    stats: dict = {}
    for T in config.t_grid:
        for seed in config.seeds:
            m, c = bench.score(bench.cell("sall", seed, T), seed)
            table.add("sall", {"T": T}, seed, m, c)
            for dst, data in bench.labelled(seed, T).items():
                for src in config.tasks:
                    if src != dst:
                        s = label_stats([ex.soft_labels[src] for ex in data])
                        stats.setdefault(f"{src}->{dst}", {}).setdefault(str(T), []).append(
                            {"seed": seed, "mean_max": s.mean_max, "mean_variance": s.mean_variance})
    best = {}
    for task in config.tasks:
        accs = {T: table.find("sall", T=T)["mean"][task]["accuracy"] for T in config.t_grid}
        best[task] = max(accs, key=lambda T: (accs[T], -T))
    return table, best, stats


def run_ratio_sweep(config: ExperimentConfig, bench: Optional[Bench] = None) -> ResultTable:
    """Full SALL with the primary task's count fixed and the auxiliary task's
    count set to each share in ``ratio_grid`` of its train split, both directions."""
    if not config.ratio_grid:
        raise ValueError("ratio sweep needs a non-empty ratio_grid")
    if len(config.tasks) != 2:
        raise ValueError("ratio sweep runs on exactly two tasks")
    bench = bench or Bench(config)
    T = config.train_config().temperature
    table = ResultTable("ratio-sweep", config.fingerprint())
    for primary, aux in (config.tasks, config.tasks[::-1]):
        for r in config.ratio_grid:
            for seed in config.seeds:
                train = bench.train_sets(seed)
                n_aux = int(round(r * len(train[aux])))
                if n_aux <= 0:
                    raise ValueError(f"ratio {r} leaves no {aux!r} examples; use the ablation's no-multitask cell")
                counts = {primary: len(train[primary]), aux: n_aux}
                m, c = bench.score(bench.cell("sall", seed, T, task_counts=counts), seed)
                # the auxiliary head's metrics are reported too, beyond the primary-only layout
                table.add("sall", {"primary": primary, "aux": aux, "ratio": r, "aux_count": n_aux}, seed, m, c)
    return table


def best_ratio(table: ResultTable, primary: str):
    rows = [a for a in table.aggregates() if a["params"]["primary"] == primary]
    return max(rows, key=lambda a: a["mean"][primary]["accuracy"])["params"]["ratio"]


def run_ntask(config: ExperimentConfig, bench: Optional[Bench] = None, caps=None) -> ResultTable:
    """N-head SALL against single-task graders at each per-class cap."""
    if len(config.tasks) < 3:
        raise ValueError("the n-task experiment needs at least three tasks")
    bench = bench or Bench(config)
    T = config.train_config().temperature
    table = ResultTable("ntask", config.fingerprint())
    for cap in (config.caps if caps is None else caps):
        scaled = max(1, int(round(cap * config.cap_scale)))
        for name in ("baseline", "sall"):
            for seed in config.seeds:
                m, c = bench.score(bench.cell(name, seed, T, cap=scaled), seed)
                table.add(name, {"cap": cap, "per_class": scaled}, seed, m, c)
    return table
