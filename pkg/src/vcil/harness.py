"""Class-incremental protocol: expand, cache, train, fine-tune, evaluate, account.

Labels are remapped to output positions in the concatenated classifier bank:
the classes of task 0 in stream order come first, then task 1's, and so on.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analyzer, causal, checkpoint
from . import numerics as nx
from .backbone import BlockConfig
from .datagen import Corpus, Split, TaskStream, default_classes, generate_corpus, make_task_stream
from .expansion import ExpandableModel

SIG = "{:.9g}"


# -- configuration ---------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 5
    base_epochs: int = 15  # task 0 trains from scratch and needs longer
    finetune_epochs: int = 5  # one pass over 5 exemplars/class is too few steps at this scale
    finetune: bool = True
    exemplars: int = 5
    optimizer: str = "adam"  # "adam" | "sgd"
    base_lr: float = 1e-3
    lr: float = 2e-3
    finetune_lr: float = 1e-2
    momentum: float = 0.9
    batch_size: int = 8
    lambda1: float = 0.2
    lambda2: float = 0.2
    mu1: float = 0.15
    mu2: float = 0.15
    mu3: float = 0.15
    k: int = 5
    k1: int = 5
    cache_per_class: int = 32
    probe_batch: int = 64
    curve_cadence: int = 0  # steps between curve points; 0 = once per epoch
    track_curves: bool = True
    normalize_mix: bool = False
    kl_reversed: bool = False
    seed: int = 42
    sep_ada: bool = True
    relation_recovery: bool = True
    compensation: bool = True
    mlp_adapter: bool = False
    cross_attention: bool = True
    concat_axis: str = "token"
    ce_scope: str = "current"  # "current": task-n head only; "all": softmax over every seen class
    distill_scope: str = "current"  # KL on the task-n head, or on every head seen so far

    def __post_init__(self):
        for name in ("base_lr", "lr", "finetune_lr", "batch_size", "k", "k1", "cache_per_class", "probe_batch"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("epochs", "base_epochs", "finetune_epochs", "exemplars", "curve_cadence"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        for name in ("lambda1", "lambda2", "mu1", "mu2", "mu3"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.ce_scope not in ("all", "current"):
            raise ValueError(f"ce_scope must be 'all' or 'current', got {self.ce_scope!r}")
        if self.distill_scope not in ("all", "current"):
            raise ValueError(f"distill_scope must be 'all' or 'current', got {self.distill_scope!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.sep_ada and self.mlp_adapter:
            raise ValueError("sep_ada and mlp_adapter are alternative placements; enable at most one")
        if (self.relation_recovery or self.compensation) and not self.sep_ada:
            raise ValueError("relation_recovery/compensation need separate spatial/temporal adapters (sep_ada)")

    @property
    def mode(self) -> str:
        if self.sep_ada:
            return "sep_ada"
        return "mlp_adapter" if self.mlp_adapter else "finetune"

    @property
    def causal(self) -> bool:
        return self.relation_recovery or self.compensation

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class CorpusConfig:
    n_textures: int = 10
    motions: tuple[int, ...] = (0, 1)
    train_per_class: int = 40
    test_per_class: int = 10
    seed: int = 42

    def to_dict(self) -> dict:
        return {**dataclasses.asdict(self), "motions": list(self.motions)}


@dataclass
class StreamConfig:
    tasks: int = 5
    style: str = "balanced"
    seed: int = 42

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    block: BlockConfig = field(default_factory=BlockConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    corpus_path: str | None = None
    output: str = "runs/default"

    def to_dict(self) -> dict:
        return {"schema": 1, "train": self.train.to_dict(), "block": self.block.to_dict(),
                "corpus": self.corpus.to_dict(), "stream": self.stream.to_dict(),
                "corpus_path": self.corpus_path, "output": self.output}


class StageError(RuntimeError):
    def __init__(self, stage: str, task: int, cause: BaseException):
        super().__init__(f"stage '{stage}' failed at task {task}: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.task = task


# -- optimisers --------------------------------------------------------------------------

class Adam:
    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params, self.lr, self.betas, self.eps = params, lr, betas, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            self.m[k] = b1 * self.m[k] + (1 - b1) * p.grad
            self.v[k] = b2 * self.v[k] + (1 - b2) * p.grad ** 2
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class SGD:
    def __init__(self, params: dict, lr: float, momentum: float = 0.9):
        self.params, self.lr, self.momentum = params, lr, momentum
        self.buf = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        for k, p in self.params.items():
            if p.grad is None:
                continue
            self.buf[k] = self.momentum * self.buf[k] + p.grad
            p.data -= self.lr * self.buf[k]


def make_optimizer(model: ExpandableModel, config: TrainConfig, lr: float):
    params = {n: model.params[n] for n in model.trainable_names()}
    if config.optimizer == "adam":
        return Adam(params, lr)
    return SGD(params, lr, config.momentum)


# -- data views -------------------------------------------------------------------------

@dataclass
class TaskData:
    """One task's training split plus the label remapping of the stream."""

    index: int
    classes: list[int]
    train: Split
    label_map: dict[int, int]

    def targets(self, labels) -> np.ndarray:
        return np.array([self.label_map[int(c)] for c in labels], dtype=np.int64)


def label_map(stream: TaskStream) -> dict[int, int]:
    order = [c for t in stream.tasks for c in t.classes]
    return {c: i for i, c in enumerate(order)}


# -- cache ---------------------------------------------------------------------------

def _branch_logits(model: ExpandableModel, bundle, head: int):
    bb = model.backbone
    return (bb.classify_branch(bundle.S, head).data, bb.classify_branch(bundle.T, head).data,
            bb.classify_branch(bundle.F, head).data)


def _batched(model: ExpandableModel, clips: np.ndarray, size: int, **kw):
    for i in range(0, len(clips), size):
        with nx.no_grad():
            yield model.forward(clips[i:i + size], **kw)


def build_cache(model: ExpandableModel, data: TaskData, config: TrainConfig) -> causal.RelationCache:
    """Populate the relation cache for task n under the task n-1 model.

    Takes the first ``cache_per_class`` training samples of every new class.
    Relations and benefits use head n-1; the head-n branch logits are filled
    in by ``refresh_cache``.
    """
    n = model.current_task
    if n < 1:
        raise ValueError("the relation cache is built for tasks n >= 1")
    keep = np.zeros(len(data.train), dtype=bool)
    for c in data.classes:
        keep[np.flatnonzero(data.train.labels == c)[:config.cache_per_class]] = True
    sub = data.train.subset(keep)
    rs, rt, bs, bt = [], [], [], []
    for bundle in _batched(model, sub.clips, 64, skip=model.skip_current()):
        s, t, f = _branch_logits(model, bundle, n - 1)
        r_s, r_t = causal.relation_np(s, t, f)
        rs.append(r_s), rt.append(r_t), bs.append(f - s), bt.append(f - t)
    c = model.backbone.head_classes[n]
    cache = causal.RelationCache(n, sub.sample_ids.copy(), sub.labels.copy(), np.concatenate(rs),
                                 np.concatenate(rt), np.zeros((len(sub), c)), np.zeros((len(sub), c)),
                                 np.concatenate(bs), np.concatenate(bt), clips=sub.clips)
    refresh_cache(model, cache)
    return cache


def refresh_cache(model: ExpandableModel, cache: causal.RelationCache) -> None:
    """Recompute the candidates' head-n branch logits under the current model."""
    n = model.current_task
    ls, lt = [], []
    for bundle in _batched(model, cache.clips, 64):
        s, t, _ = _branch_logits(model, bundle, n)
        ls.append(s), lt.append(t)
    cache.refresh_logits(np.concatenate(ls), np.concatenate(lt))


# -- training ------------------------------------------------------------------------

@dataclass
class EpochLog:
    task: int
    epoch: int
    ce: float
    distill: float
    recovery_t: float
    recovery_s: float
    total: float
    mu: float
    alpha_t: float
    alpha_s: float

    FIELDS = ("task", "epoch", "ce", "distill", "recovery_t", "recovery_s", "total", "mu", "alpha_t", "alpha_s")


@dataclass
class TaskResult:
    logs: list[EpochLog]
    curve: analyzer.RelationCurve | None


def _probe_clips(data: TaskData, config: TrainConfig) -> np.ndarray:
    rng = np.random.default_rng([config.seed, data.index, 7])
    idx = np.sort(rng.permutation(len(data.train))[:config.probe_batch])
    return data.train.clips[idx]


def _pad_head(e: np.ndarray, total: int) -> np.ndarray:
    out = np.zeros((e.shape[0], total))
    out[:, total - e.shape[1]:] = e
    return out


def _step_terms(model: ExpandableModel, clips, ids, y, config: TrainConfig, cache, alpha, mu):
    """Forward one batch and assemble the objective; returns (loss, parts)."""
    n = model.current_task
    bundle = model.forward(clips)
    if config.ce_scope == "current" and n > 0:
        logits = bundle.logits[n]
        y = y - sum(model.backbone.head_classes[:n])
    else:
        logits = bundle.all_logits()
    parts = {"ce": 0.0, "distill": 0.0, "recovery_t": 0.0, "recovery_s": 0.0}
    if n == 0 or model.mode == "finetune":
        loss = nx.cross_entropy(logits, y)
        parts["ce"] = loss.item()
        return loss, parts
    with nx.no_grad():
        plain = model.forward(clips, skip=model.skip_current())
    l_t = l_s = None
    if cache is not None and config.causal:
        s_old, t_old, f_old = _branch_logits(model, plain, n - 1)
        if config.compensation and (alpha.alpha_s != 0.0 or alpha.alpha_t != 0.0):
            width = model.backbone.head_classes[n]
            e_t = causal.compensation_effect(cache, f_old - t_old, alpha.alpha_t, config.k1, "temporal", ids, width)
            e_s = causal.compensation_effect(cache, f_old - s_old, alpha.alpha_s, config.k1, "spatial", ids, width)
            total = logits.shape[-1]
            logits = causal.combined_prediction(logits, _pad_head(e_s, total), _pad_head(e_t, total),
                                                config.lambda1, config.lambda2)
        if config.relation_recovery:
            q_s, q_t = causal.relation_np(s_old, t_old, f_old)
            mix_s = causal.mixed_logits(cache, q_s, config.k, "spatial", ids, config.normalize_mix)
            mix_t = causal.mixed_logits(cache, q_t, config.k, "temporal", ids, config.normalize_mix)
            bb = model.backbone
            l_s, l_t = causal.hybrid_recovery_loss(mix_s, mix_t, bb.classify_branch(bundle.S, n),
                                                   bb.classify_branch(bundle.T, n), bundle.logits[n])
            parts["recovery_s"], parts["recovery_t"] = l_s.item(), l_t.item()
    ce = nx.cross_entropy(logits, y)
    if config.distill_scope == "all":
        l_d = nx.kl_divergence(plain.all_logits(), bundle.all_logits())
    else:
        l_d = nx.kl_divergence(plain.logits[n], bundle.logits[n])
    parts["ce"], parts["distill"] = ce.item(), l_d.item()
    return causal.total_loss(ce, l_d, l_t, l_s, config.mu1 * mu, config.mu2 * mu, config.mu3 * mu), parts


def run_task(model: ExpandableModel, data: TaskData, config: TrainConfig,
             cache: causal.RelationCache | None = None, epochs: int | None = None) -> TaskResult:
    """Train the current task's trainable set; everything else stays bitwise frozen."""
    n = model.current_task
    if n != data.index:
        raise ValueError(f"model is expanded for task {n}, data is task {data.index}")
    if n >= 1 and config.causal and cache is None:
        raise ValueError(f"task {n}: relation cache missing")
    if epochs is None:
        epochs = config.base_epochs if n == 0 else config.epochs
    opt = make_optimizer(model, config, config.base_lr if n == 0 else config.lr)
    y_all = data.targets(data.train.labels)
    probing = n >= 1 and model.mode == "sep_ada"
    probe = _probe_clips(data, config) if probing else None
    curve = analyzer.RelationCurve(n, "causal" if config.causal else "noncausal") \
        if probing and config.track_curves else None
    alpha = causal.CompensationFactors(0.0, 0.0, 0.0, 0.0, 0.0)
    logs, step = [], 0
    for epoch in range(epochs):
        mu = causal.mu_schedule(1.0, epoch, epochs)
        if probing and (config.compensation or curve is not None):
            snaps = analyzer.probe_all(model, probe, step, config.kl_reversed)
            if curve is not None:
                curve.add(step, snaps)
            if config.compensation:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    alpha = causal.mapping_influence_factor(snaps["inc_spatial"].vector,
                                                            snaps["inc_temporal"].vector)
        if cache is not None and epoch > 0:
            refresh_cache(model, cache)
        rng = np.random.default_rng([config.seed, n, epoch])
        order = rng.permutation(len(data.train))
        sums = {"ce": 0.0, "distill": 0.0, "recovery_t": 0.0, "recovery_s": 0.0, "total": 0.0}
        batches = 0
        for i in range(0, len(order), config.batch_size):
            idx = np.sort(order[i:i + config.batch_size])
            model.zero_grad()
            loss, parts = _step_terms(model, data.train.clips[idx], data.train.sample_ids[idx], y_all[idx],
                                      config, cache, alpha, mu)
            nx.backward(loss)
            opt.step()
            for k, v in parts.items():
                sums[k] += v
            sums["total"] += loss.item()
            batches += 1
            step += 1
            if curve is not None and config.curve_cadence and step % config.curve_cadence == 0:
                curve.add(step, analyzer.probe_all(model, probe, step, config.kl_reversed))
        avg = {k: v / max(batches, 1) for k, v in sums.items()}
        logs.append(EpochLog(n, epoch, avg["ce"], avg["distill"], avg["recovery_t"], avg["recovery_s"],
                             avg["total"], config.mu1 * mu, alpha.alpha_t, alpha.alpha_s))
    model.zero_grad()
    return TaskResult(logs, curve)


def exemplar_set(train: Split, classes, per_class: int, seed: int, task: int) -> Split:
    rng = np.random.default_rng([seed, task, 11])
    picks = []
    for c in classes:
        pool = np.flatnonzero(train.labels == c)
        picks.append(np.sort(rng.choice(pool, size=min(per_class, len(pool)), replace=False)))
    return train.subset(np.concatenate(picks) if picks else np.zeros(0, dtype=np.int64))


def finetune_classifier(model: ExpandableModel, exemplars: Split, lmap: dict[int, int],
                        config: TrainConfig, seen_classes=None) -> None:
    """Tune only the classifier bank on a balanced exemplar set; the extractor is untouched."""
    if seen_classes is not None:
        present = set(int(c) for c in exemplars.labels)
        for c in seen_classes:
            if int(c) not in present:
                raise ValueError(f"exemplar set is missing class {c}")
    if config.finetune_epochs == 0 or len(exemplars) == 0:
        return
    previous = model.trainable_names()
    model.set_trainable(model.backbone.head_names())
    try:
        opt = make_optimizer(model, config, config.finetune_lr)
        y = np.array([lmap[int(c)] for c in exemplars.labels], dtype=np.int64)
        # the frozen extractor's features do not change, so compute them once
        with nx.no_grad():
            feats = np.concatenate([b.F.data for b in _batched(model, exemplars.clips, 64)])
        for epoch in range(config.finetune_epochs):
            order = np.random.default_rng([config.seed, model.current_task, 13, epoch]).permutation(len(y))
            for i in range(0, len(order), config.batch_size):
                idx = np.sort(order[i:i + config.batch_size])
                model.zero_grad()
                f = nx.Tensor(feats[idx])
                logits = nx.concatenate([model.backbone.classify_branch(f, h)
                                         for h in range(model.backbone.n_heads)], axis=-1)
                nx.backward(nx.cross_entropy(logits, y[idx]))
                opt.step()
    finally:
        model.set_trainable(previous)


# -- evaluation and metrics ------------------------------------------------------------

@dataclass
class AccuracyMatrix:
    """acc[i][j]: accuracy on task j's test set after task i (j <= i); pooled[i] = Acc_i."""

    acc: list[list[float]] = field(default_factory=list)
    pooled: list[float] = field(default_factory=list)

    def add_row(self, per_task: list[float], pooled: float) -> None:
        if len(per_task) != len(self.acc) + 1:
            raise ValueError(f"row {len(self.acc)} must have {len(self.acc) + 1} entries, got {len(per_task)}")
        vals = list(per_task) + [pooled]
        if any(not 0.0 <= v <= 1.0 for v in vals):
            raise ValueError("accuracies must lie in [0, 1]")
        self.acc.append([float(v) for v in per_task])
        self.pooled.append(float(pooled))

    @property
    def n(self) -> int:
        return len(self.pooled)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["after_task", "pooled"] + [f"task{j}" for j in range(self.n)])
        for i, row in enumerate(self.acc):
            w.writerow([i, SIG.format(self.pooled[i])] + [SIG.format(v) for v in row] + [""] * (self.n - len(row)))
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> AccuracyMatrix:
        m = cls()
        for r in csv.DictReader(io.StringIO(text)):
            per = [float(r[f"task{j}"]) for j in range(int(r["after_task"]) + 1)]
            m.add_row(per, float(r["pooled"]))
        return m


def predict(model: ExpandableModel, clips: np.ndarray, batch: int = 64) -> np.ndarray:
    return np.concatenate([np.argmax(b.all_logits().data, axis=-1) for b in _batched(model, clips, batch)]) \
        if len(clips) else np.zeros(0, dtype=np.int64)


def evaluate(model: ExpandableModel, test: Split, stream: TaskStream, lmap: dict[int, int],
             config: TrainConfig | None = None) -> tuple[list[float], float]:
    """Top-1 over the concatenated heads, per seen task and pooled.

    ``config`` is accepted for symmetry with training and deliberately unused:
    relation recovery and compensation play no part at inference.
    """
    n = model.current_task
    seen = stream.classes_seen(n)
    split = test.of_classes(seen)
    pred = predict(model, split.clips)
    y = np.array([lmap[int(c)] for c in split.labels], dtype=np.int64)
    hits = pred == y
    per_task = []
    for t in stream.tasks[:n + 1]:
        mask = np.isin(split.labels, t.classes)
        per_task.append(float(hits[mask].mean()) if mask.any() else 0.0)
    return per_task, float(hits.mean()) if len(hits) else 0.0


def accuracy_of(pred: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.asarray(pred) == np.asarray(labels)))


def bwf(acc) -> float:
    """(1/(N-1)) * sum_{i<N} (Acc_i - Acc_N) over pooled checkpoint accuracies."""
    a = acc.pooled if isinstance(acc, AccuracyMatrix) else list(acc)
    if len(a) < 2:
        raise ValueError("BWF needs at least 2 completed tasks")
    return float(sum(x - a[-1] for x in a[:-1]) / (len(a) - 1))


def avg_acc(acc, paper_formula: bool = False) -> float:
    """Mean of Acc_1..Acc_N; ``paper_formula`` averages Acc_1..Acc_{N-1} only."""
    a = acc.pooled if isinstance(acc, AccuracyMatrix) else list(acc)
    if not a:
        raise ValueError("no checkpoints")
    if paper_formula:
        if len(a) < 2:
            raise ValueError("the N-1 average needs at least 2 checkpoints")
        return float(sum(a[:-1]) / (len(a) - 1))
    return float(sum(a) / len(a))


# -- accounting -----------------------------------------------------------------------

@dataclass
class BudgetReport:
    trainable: list[int]
    total: list[int]
    storage_bytes: list[int]  # serialized adapters + cross-task attention added per task
    storage_overhead: list[int]  # header bytes inside storage_bytes
    exemplar_bytes: int
    ratio: list[float]  # trainable[n] / trainable[0]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def storage_names(model: ExpandableModel, task: int) -> list[str]:
    """Adapter and cross-task attention parameters introduced at ``task``."""
    added = model.manifests[task].added
    return [n for n in added if n.startswith(("adapters.", "cross."))]


def account(model: ExpandableModel, exemplar_count: int = 0) -> BudgetReport:
    if not model.manifests:
        raise ValueError("nothing to account: no task expanded")
    man = model.manifests
    sizes, overheads = [], []
    for t in range(len(man)):
        names = storage_names(model, t)
        shapes = {k: np.zeros(man[t].added[k]) for k in names}
        raw = len(checkpoint.dumps(shapes))
        overhead = len(checkpoint.header_for(shapes))
        sizes.append(raw)
        overheads.append(overhead)
    frame = model.config.frames * model.config.frame_size ** 2
    base = man[0].trainable_count
    return BudgetReport([m.trainable_count for m in man], [m.total_count for m in man], sizes, overheads,
                        exemplar_count * frame * 8, [m.trainable_count / base for m in man])


# -- experiment ---------------------------------------------------------------------

def build_model(config: ExperimentConfig) -> ExpandableModel:
    t = config.train
    return ExpandableModel(config.block, seed=t.seed, mode=t.mode, cross_attention=t.cross_attention,
                           concat_axis=t.concat_axis)


def corpus_for(config: ExperimentConfig) -> Corpus:
    from .datagen import load_corpus
    if config.corpus_path and Path(config.corpus_path, "index.json").exists():
        return load_corpus(config.corpus_path)
    c = config.corpus
    return generate_corpus(default_classes(c.n_textures, tuple(c.motions)), c.train_per_class,
                           c.test_per_class, c.seed, config.block.frames, config.block.frame_size)


def stream_for(config: ExperimentConfig, corpus: Corpus) -> TaskStream:
    s = config.stream
    return make_task_stream(len(corpus.classes), s.tasks, s.style, s.seed,
                            int(np.sum(corpus.train.labels == corpus.classes[0].class_id)),
                            int(np.sum(corpus.test.labels == corpus.classes[0].class_id)))


@dataclass
class ExperimentResult:
    matrix: AccuracyMatrix
    budget: BudgetReport
    logs: list[EpochLog]
    curves: list[analyzer.RelationCurve]
    model: ExpandableModel

    @property
    def acc_n(self) -> float:
        return self.matrix.pooled[-1]

    @property
    def bwf(self) -> float | None:
        return bwf(self.matrix) if self.matrix.n >= 2 else None


def _stage(name: str, task: int, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except Exception as e:  # noqa: BLE001 - re-raised with stage context
        raise StageError(name, task, e) from e


def run_experiment(config: ExperimentConfig, out_dir: str | Path | None = None, corpus: Corpus | None = None,
                   start: dict | None = None, progress=None) -> ExperimentResult:
    """Run the whole protocol; write the run directory when ``out_dir`` is given.

    ``start`` optionally supplies a finished task-0 state ({"params": arrays,
    "row": (per_task, pooled)}) so ablations sharing a seed skip retraining it.
    """
    corpus = corpus if corpus is not None else _stage("corpus", 0, corpus_for, config)
    stream = _stage("stream", 0, stream_for, config, corpus)
    lmap = label_map(stream)
    t = config.train
    model = build_model(config)
    matrix = AccuracyMatrix()
    logs: list[EpochLog] = []
    curves: list[analyzer.RelationCurve] = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out / "relation_curves").mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True) + "\n")
    exemplar_count = 0
    for task in stream.tasks:
        n = task.index
        data = TaskData(n, list(task.classes), corpus.train.of_classes(task.classes), lmap)
        _stage("expand", n, model.expand_for_task, n, len(task.classes))
        if n == 0 and start is not None:
            checkpoint.restore(model, start["params"])
            per_task, pooled = start["row"]
            matrix.add_row(list(per_task), pooled)
        else:
            cache = _stage("cache", n, build_cache, model, data, t) if n >= 1 and t.causal else None
            res = _stage("train", n, run_task, model, data, t, cache)
            logs += res.logs
            if res.curve is not None:
                curves.append(res.curve)
            if t.finetune and n >= 1:
                seen = stream.classes_seen(n)
                ex = exemplar_set(corpus.train, seen, t.exemplars, t.seed, n)
                exemplar_count = len(ex)
                _stage("finetune", n, finetune_classifier, model, ex, lmap, t, seen)
            per_task, pooled = _stage("evaluate", n, evaluate, model, corpus.test, stream, lmap)
            matrix.add_row(per_task, pooled)
        if progress is not None:
            progress(n, matrix.pooled[-1])
        if out is not None:
            checkpoint.save(out / "checkpoints" / f"task{n}.ckpt", checkpoint.model_arrays(model),
                            {"task": n, "trainable": model.manifests[n].trainable})
    budget = _stage("account", stream.n_tasks - 1, account, model, exemplar_count)
    result = ExperimentResult(matrix, budget, logs, curves, model)
    if out is not None:
        write_run(out, result, stream)
    return result


def metrics_csv(result: ExperimentResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["after_task", "acc", "trainable", "total", "ratio"])
    b = result.budget
    for i, a in enumerate(result.matrix.pooled):
        w.writerow([i, SIG.format(a), b.trainable[i], b.total[i], SIG.format(b.ratio[i])])
    w.writerow([])
    w.writerow(["metric", "value"])
    w.writerow(["acc_n", SIG.format(result.acc_n)])
    w.writerow(["bwf", "n/a" if result.bwf is None else SIG.format(result.bwf)])
    w.writerow(["avg_acc", SIG.format(avg_acc(result.matrix))])
    w.writerow(["avg_acc_n_minus_1", "n/a" if result.matrix.n < 2 else SIG.format(avg_acc(result.matrix, True))])
    return buf.getvalue()


def losses_csv(logs: list[EpochLog]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EpochLog.FIELDS)
    for lg in logs:
        w.writerow([lg.task, lg.epoch] + [SIG.format(getattr(lg, f)) for f in EpochLog.FIELDS[2:]])
    return buf.getvalue()


def write_run(out: Path, result: ExperimentResult, stream: TaskStream) -> None:
    (out / "accuracy_matrix.csv").write_text(result.matrix.to_csv())
    (out / "metrics.csv").write_text(metrics_csv(result))
    (out / "losses.csv").write_text(losses_csv(result.logs))
    (out / "budget.json").write_text(json.dumps(result.budget.to_dict(), indent=1, sort_keys=True) + "\n")
    (out / "stream.json").write_text(json.dumps(stream.to_dict(), indent=1, sort_keys=True) + "\n")
    for c in result.curves:
        c.write(out / "relation_curves")
    for n, man in enumerate(result.model.manifests):
        (out / "checkpoints" / f"task{n}.manifest.json").write_text(man.to_json() + "\n")


RUN_FILES = ("config.json", "metrics.csv", "accuracy_matrix.csv", "budget.json", "losses.csv")


def missing_run_files(run_dir: str | Path) -> list[str]:
    run_dir = Path(run_dir)
    missing = [f for f in RUN_FILES if not (run_dir / f).exists()]
    if not (run_dir / "relation_curves").is_dir():
        missing.append("relation_curves/")
    return missing


def train_base(config: ExperimentConfig, corpus: Corpus | None = None) -> dict:
    """Train and evaluate task 0 alone; the result can seed ``run_experiment(start=...)``.

    Task 0 never involves adapters or causal terms, so every configuration
    sharing the seed, block config and base optimiser settings starts from it.
    """
    corpus = corpus if corpus is not None else corpus_for(config)
    stream = stream_for(config, corpus)
    lmap = label_map(stream)
    model = build_model(config)
    task = stream.tasks[0]
    model.expand_for_task(0, len(task.classes))
    run_task(model, TaskData(0, list(task.classes), corpus.train.of_classes(task.classes), lmap), config.train)
    row = evaluate(model, corpus.test, stream, lmap)
    return {"params": {k: v.copy() for k, v in checkpoint.model_arrays(model).items()}, "row": row}
