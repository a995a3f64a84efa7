"""Synergic adversarial label learning: pre-train one grader per task, let each
grader label the other tasks' images with temperature-softened probabilities,
then train one hard-shared network with a head per task on all images."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tape
from .network import NetworkSpec, ParameterSet, adam_step, bind, forward, init_params, predict_proba
from .synthetic import LabeledExample, augment

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    temperature: float = 3.0
    lr: float = 3e-3  # 1e-5 suits a full-size backbone, not this small trunk
    epochs: int = 20
    batch_size: int = 32
    task_counts: Optional[Mapping] = None  # examples per task used each epoch
    seed: int = 0
    online_augment: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    apply_t_to_hard: bool = False
    t_squared: bool = False
    warm_start: bool = False
    lr_schedule: str = "cosine"  # or "constant"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.task_counts is not None:
            object.__setattr__(self, "task_counts", dict(self.task_counts))
            if any(int(n) < 0 for n in self.task_counts.values()):
                raise ValueError("task counts must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SoftLabel:
    source_model_task: str
    probabilities: np.ndarray
    temperature: float = 1.0

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64)
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
            raise ValueError("soft label must be a probability vector")
        object.__setattr__(self, "probabilities", p)


@dataclass(frozen=True)
class LabelStats:
    mean_max: float
    mean_variance: float


@dataclass
class TrainResult:
    """Final parameters plus the per-step loss record."""

    params: ParameterSet
    head_losses: dict = field(default_factory=dict)  # task -> [loss per step]
    total_losses: list = field(default_factory=list)

    @property
    def losses(self) -> list:
        return self.total_losses


# ------------------------------------------------------------ batching


def _select(datasets: Mapping, counts: Optional[Mapping], rng) -> dict:
    """Fix, once per run, which examples of each task are used."""
    chosen = {}
    for task, data in datasets.items():
        n = len(data) if counts is None or task not in counts else int(counts[task])
        if n > len(data):
            raise ValueError(f"task {task!r}: asked for {n} examples, only {len(data)} available")
        order = np.sort(rng.permutation(len(data))[:n]) if n < len(data) else np.arange(len(data))
        chosen[task] = [data[i] for i in order]
    return chosen


def epoch_batches(pool: Sequence, batch_size: int, rng) -> list:
    """Shuffle the pooled examples and cut them into batches."""
    order = rng.permutation(len(pool))
    return [[pool[i] for i in order[s:s + batch_size]] for s in range(0, len(pool), batch_size)]


def step_lr(config: TrainConfig, step: int, total: int) -> float:
    """Learning rate for 0-based ``step`` of ``total``."""
    if config.lr_schedule == "cosine":
        return config.lr * 0.5 * (1.0 + np.cos(np.pi * step / total))
    return config.lr


def _stack(batch, rng, online_augment: bool):
    if online_augment:
        seeds = rng.integers(0, 2 ** 31, size=len(batch))
        return np.stack([augment(ex, int(s)).image for ex, s in zip(batch, seeds)])
    return np.stack([ex.image for ex in batch])


# --------------------------------------------------------------- losses


def head_losses(logits: Mapping, batch: Sequence[LabeledExample], config: TrainConfig,
                use_soft: bool = True) -> dict:
    """Per-head loss Tensors for one batch.

    Head ``t`` scores its native examples against hard labels and, when
    ``use_soft``, every other example against its synergic label for ``t``,
    averaged over the batch. Without soft labels head ``t`` sees only its
    native examples.
    """
    B = len(batch)
    T = config.temperature
    T_hard = T if config.apply_t_to_hard else 1.0
    out = {}
    for task, z in logits.items():
        native = [i for i, ex in enumerate(batch) if ex.task_id == task]
        foreign = [i for i, ex in enumerate(batch) if ex.task_id != task] if use_soft else []
        terms = []
        if native:
            y = np.stack([batch[i].hard_label for i in native])
            zn = z if len(native) == B else ad.take_rows(z, native)
            ce = ad.cross_entropy_soft(zn, y, T_hard)
            terms.append(ce if len(native) == B or not use_soft else ad.scale(ce, len(native) / B))
        if foreign:
            missing = [batch[i].example_id for i in foreign if task not in batch[i].soft_labels]
            if missing:
                raise ValueError(f"examples {missing[:3]} lack a synergic label for head {task!r}")
            y = np.stack([batch[i].soft_labels[task].probabilities for i in foreign])
            zf = z if len(foreign) == B else ad.take_rows(z, foreign)
            ce = ad.cross_entropy_soft(zf, y, T)
            w = len(foreign) / B * (T * T if config.t_squared else 1.0)
            terms.append(ce if w == 1.0 else ad.scale(ce, w))
        if terms:
            loss = terms[0]
            for t in terms[1:]:
                loss = ad.add(loss, t)
            out[task] = loss
    return out


def total_loss(losses: Mapping):
    names = list(losses)
    total = losses[names[0]]
    for t in names[1:]:
        total = ad.add(total, losses[t])
    return total


def loss_and_grads(params: ParameterSet, spec: NetworkSpec, images, batch, config: TrainConfig,
                   use_soft: bool = True, heads=None):
    """Forward, per-head losses, their sum, and the gradient of the sum by parameter name."""
    with Tape() as tape:
        bound = bind(params)
        logits = forward(bound, spec, images)
        losses = head_losses(logits, batch, config, use_soft)
        if heads is not None:
            losses = {t: losses[t] for t in heads if t in losses}
        total = total_loss(losses)
    g = ad.backward(total, tape)
    grads = {name: g[t] for name, t in bound.items() if t in g}
    return {t: l.item() for t, l in losses.items()}, total.item(), grads


# ------------------------------------------------------------- training


def pretrain_single(dataset: Sequence[LabeledExample], spec: NetworkSpec, config: TrainConfig) -> TrainResult:
    """Train a one-head grader with hard-label cross-entropy and Adam."""
    if not dataset:
        raise ValueError("cannot pre-train on an empty dataset")
    if len(spec.heads) != 1:
        raise ValueError("pre-training needs a spec with exactly one head")
    task, K = spec.heads[0]
    if any(ex.task_id != task or ex.n_classes != K for ex in dataset):
        raise ValueError(f"every example must belong to task {task!r} with {K} grades")
    rng = np.random.default_rng(config.seed)
    params = init_params(spec, config.seed)
    pool = _select({task: list(dataset)}, config.task_counts, rng)[task]
    T = config.temperature if config.apply_t_to_hard else 1.0
    result = TrainResult(params, {task: []}, [])
    n_steps = config.epochs * -(-len(pool) // config.batch_size)
    for _ in range(config.epochs):
        for batch in epoch_batches(pool, config.batch_size, rng):
            images = _stack(batch, rng, config.online_augment)
            with Tape() as tape:
                bound = bind(params)
                z = forward(bound, spec, images)[task]
                loss = ad.cross_entropy_soft(z, np.stack([ex.hard_label for ex in batch]), T)
            g = ad.backward(loss, tape)
            lr = step_lr(config, len(result.total_losses), n_steps)
            adam_step(params, {n: g[t] for n, t in bound.items() if t in g}, lr,
                      config.beta1, config.beta2, config.eps)
            result.head_losses[task].append(loss.item())
            result.total_losses.append(loss.item())
    return result


def train_multitask(datasets: Mapping, spec: NetworkSpec, config: TrainConfig, use_soft: bool = True,
                    init: Optional[ParameterSet] = None) -> TrainResult:
    """Joint training of the shared trunk and every head.

    Each step draws a batch from the shuffled pool of all tasks' examples and
    minimizes the sum of per-head losses; the trunk receives the gradient of
    the sum, each head that of its own loss. With soft labels on, a dataset
    may belong to a task without a head: its images then only feed the other
    heads through their synergic labels.
    """
    tasks = spec.task_ids
    for task in datasets:
        if task not in tasks and not use_soft:
            raise ValueError(f"dataset for task {task!r} has no head in the spec and soft labels are off")
    if not any(len(d) for d in datasets.values()):
        raise ValueError("cannot train on empty datasets")
    if use_soft:
        for task, data in datasets.items():
            for ex in data:
                missing = [t for t in tasks if t != task and t not in ex.soft_labels]
                if missing:
                    raise ValueError(f"example {ex.example_id} lacks synergic labels for heads {missing}")
    rng = np.random.default_rng(config.seed)
    params = init.copy() if init is not None else init_params(spec, config.seed)
    chosen = _select({t: list(d) for t, d in datasets.items()}, config.task_counts, rng)
    pool = [ex for t in datasets for ex in chosen[t]]
    result = TrainResult(params, {t: [] for t in tasks}, [])
    n_steps = config.epochs * -(-len(pool) // config.batch_size)
    for epoch in range(config.epochs):
        for batch in epoch_batches(pool, config.batch_size, rng):
            images = _stack(batch, rng, config.online_augment)
            per_head, total, grads = loss_and_grads(params, spec, images, batch, config, use_soft)
            adam_step(params, grads, step_lr(config, len(result.total_losses), n_steps), config.beta1, config.beta2,
                      config.eps)
            for t in tasks:
                result.head_losses[t].append(per_head.get(t, 0.0))
            result.total_losses.append(total)
        log.debug("epoch %d total loss %.4f", epoch, result.total_losses[-1])
    return result


# ------------------------------------------------------ synergic labels


def generate_synergic_labels(model_params: ParameterSet, spec: NetworkSpec, model_task: str,
                             inputs: Sequence[LabeledExample], T: float, attach: bool = True) -> list:
    """Label foreign images with the frozen ``model_task`` grader's softmax at temperature ``T``."""
    spec.n_classes(model_task)
    bad = [ex.example_id for ex in inputs if ex.task_id == model_task]
    if bad:
        raise ContractError(f"synergic labels need images from another task; {bad[:3]} belong to {model_task!r}")
    if not inputs:
        return []
    probs = predict_proba(model_params, spec, np.stack([ex.image for ex in inputs]), model_task, T)
    labels = [SoftLabel(model_task, p, float(T)) for p in probs]
    if attach:
        for ex, lab in zip(inputs, labels):
            ex.soft_labels[model_task] = lab
    return labels


def label_stats(labels: Sequence[SoftLabel]) -> LabelStats:
    """Mean over labels of the max probability and of the population variance."""
    if not labels:
        raise ValueError("label_stats needs at least one label")
    P = np.stack([np.asarray(l.probabilities if isinstance(l, SoftLabel) else l) for l in labels])
    return LabelStats(float(P.max(axis=1).mean()), float(P.var(axis=1).mean()))


# ----------------------------------------------------------- sidecars


def write_soft_labels(path, examples: Sequence[LabeledExample], source_task: str, checkpoint_hash: str = "") -> Path:
    """Line-delimited records: example id, source task, probabilities, temperature, model hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for ex in examples:
            lab = ex.soft_labels[source_task]
            fh.write(json.dumps({
                "example_id": ex.example_id,
                "source_task": source_task,
                "probabilities": [float(p) for p in lab.probabilities],
                "temperature": lab.temperature,
                "checkpoint_hash": checkpoint_hash,
            }) + "\n")
    return path


def read_soft_labels(path) -> list:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def attach_soft_labels(examples: Sequence[LabeledExample], records: Sequence[Mapping]) -> int:
    by_id = {ex.example_id: ex for ex in examples}
    n = 0
    for rec in records:
        ex = by_id.get(rec["example_id"])
        if ex is not None:
            ex.soft_labels[rec["source_task"]] = SoftLabel(rec["source_task"], np.array(rec["probabilities"]),
                                                           rec["temperature"])
            n += 1
    return n


def write_run_log(path, result: TrainResult, config: TrainConfig, spec: NetworkSpec, **extra) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "config": config.to_dict(),
        "seed": config.seed,
        "spec_hash": spec.fingerprint(),
        "params_hash": result.params.fingerprint(),
        "total_losses": result.total_losses,
        "head_losses": result.head_losses,
        **extra,
    }
    path.write_text(json.dumps(doc, sort_keys=True, default=_jsonable))
    return path


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=_jsonable).encode()).hexdigest()[:16]
