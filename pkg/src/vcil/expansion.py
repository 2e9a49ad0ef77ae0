"""Per-task adapter expansion on top of a frozen backbone.

Task 0 trains the whole backbone.  Every later task appends a bottleneck
adapter after each block's temporal and spatial attention, a classifier head,
and (re)trains a gated cross-task attention over the representations of
earlier tasks in the last block.  Everything else is frozen.

Adapters all read the frozen attention output ``F0``:

    F_n = F0 + sum_i W2_i gelu(W1_i F0)

so a task-n adapter with ``W2 = 0`` leaves every output bitwise unchanged.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .backbone import BRANCHES, Backbone, BlockConfig, FeatureBundle
from .numerics import Tensor

MODES = ("sep_ada", "mlp_adapter", "finetune")


@dataclass
class Adapter:
    down: Tensor  # [d, b]
    up: Tensor  # [b, d]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.down.shape[0]:
            raise nx.ShapeError(f"adapter expects width {self.down.shape[0]}, got {list(x.shape)}")
        return nx.matmul(nx.gelu(nx.matmul(x, self.down)), self.up)


def adapt_msa(f0: Tensor, adapters: list[Adapter], n: int | None = None) -> Tensor:
    """F0 plus the sum of every adapter applied to F0 (not to the running sum)."""
    if n is not None and n != len(adapters):
        raise ValueError(f"expected {n} adapters, got {len(adapters)}")
    out = f0
    for a in adapters:
        out = nx.add(out, a(f0))
    return out


@dataclass
class CrossTaskAttention:
    """Single-head attention from current features to a memory of earlier-task features.

    ``axis="token"`` stacks snapshots along the token axis (fixed d x d
    projections); ``axis="embedding"`` stacks them along the feature axis, so
    the key/value projections are (n*d) x d and are rebuilt per task.
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    gate: Tensor  # shape [1]
    scale: float
    axis: str = "token"

    def attend(self, fn: Tensor, snapshots: list[Tensor], record: list | None = None) -> Tensor:
        if not snapshots:
            raise ValueError("cross-task attention needs at least one earlier-task snapshot")
        q = nx.matmul(fn, self.wq)
        if self.axis == "token":
            mem = nx.concatenate(snapshots, axis=-2) if len(snapshots) > 1 else snapshots[0]
        else:
            mem = nx.concatenate(snapshots, axis=-1) if len(snapshots) > 1 else snapshots[0]
            if mem.shape[-1] != self.wk.shape[0]:
                raise nx.ShapeError(f"embedding-axis memory width {mem.shape[-1]} != projection {self.wk.shape[0]}")
        k = nx.matmul(mem, self.wk)
        v = nx.matmul(mem, self.wv)
        scores = nx.mul(nx.matmul(q, nx.transpose(k)), 1.0 / self.scale)
        probs = nx.softmax(scores, axis=-1)
        if record is not None:
            record.append(probs.data)
        return nx.matmul(probs, v)

    def __call__(self, fn: Tensor, snapshots: list[Tensor]) -> Tensor:
        return nx.add(fn, nx.mul(self.attend(fn, snapshots), self.gate))


def cross_task_attend(fn: Tensor, snapshots: list[Tensor], cta: CrossTaskAttention | None) -> Tensor:
    """ACT; with no earlier tasks (and no module) this is a no-op returning ``fn``."""
    if cta is None:
        if snapshots:
            raise ValueError("snapshots given but no cross-task attention module")
        return fn
    return cta.attend(fn, snapshots)


class AdapterHook:
    """Backbone hook applying adapters of tasks 1..upto, minus ``skip`` (task, site) pairs."""

    def __init__(self, model: ExpandableModel, upto: int, skip=frozenset(), record: dict | None = None):
        self.model = model
        self.upto = upto
        self.skip = frozenset(skip)
        self.record = record

    def __call__(self, block: int, site: str, f0: Tensor) -> Tensor:
        m = self.model
        placement_site = "mlp" if m.mode == "mlp_adapter" else None
        if m.mode == "finetune" or self.upto < 1:
            return f0
        if placement_site is not None and site != "mlp":
            return f0
        if placement_site is None and site == "mlp":
            return f0
        tasks = range(1, self.upto + 1)
        out = f0
        for t in tasks:
            if (t, site) in self.skip:
                continue
            out = nx.add(out, m.adapter(t, block, site)(f0))
        if m.cross_attention and site in BRANCHES and block == m.config.blocks - 1:
            cta = m.cross_module(self.upto, site)
            if cta is not None:
                snaps = [f0]
                run = f0
                for t in range(1, self.upto):
                    run = nx.add(run, m.adapter(t, block, site)(f0))
                    snaps.append(run)
                rec = [] if self.record is not None else None
                act = cta.attend(out, snaps, rec)
                if rec is not None:
                    self.record[("cross", site)] = rec[0]
                out = nx.add(out, nx.mul(act, cta.gate))
        return out


@dataclass
class ExpansionManifest:
    task: int
    classes: int
    added: dict[str, list[int]]
    trainable: list[str]
    trainable_count: int
    total_count: int

    @property
    def added_count(self) -> int:
        return int(sum(math.prod(s) for s in self.added.values()))

    def to_json(self) -> str:
        return json.dumps({
            "task": self.task,
            "classes": self.classes,
            "added": self.added,
            "added_count": self.added_count,
            "trainable": self.trainable,
            "trainable_count": self.trainable_count,
            "total_count": self.total_count,
        }, indent=1)


class ExpandableModel:
    """Backbone plus the per-task expansion state and the freeze ledger.

    ``mode`` selects how tasks n >= 1 are learned:
      sep_ada      separate spatial/temporal adapters after each attention
      mlp_adapter  one adapter after each block's MLP (overall adaptation)
      finetune     no adapters; every block's MLP and the new head train
    """

    def __init__(self, config: BlockConfig = BlockConfig(), seed: int = 0, mode: str = "sep_ada",
                 cross_attention: bool = True, concat_axis: str = "token", adapter_init: float | None = None):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        if concat_axis not in ("token", "embedding"):
            raise ValueError(f"concat_axis must be 'token' or 'embedding', got {concat_axis!r}")
        self.config = config
        self.mode = mode
        self.cross_attention = cross_attention and mode == "sep_ada"
        self.concat_axis = concat_axis
        self.backbone = Backbone(config, seed)
        self.rng = np.random.default_rng([seed, 1])
        self.adapter_init = adapter_init if adapter_init is not None else 1.0 / math.sqrt(config.embed_dim)
        self.manifests: list[ExpansionManifest] = []
        self.trainable: set[str] = set()
        self.cross_history: dict[int, dict[str, np.ndarray]] = {}

    # -- registry ---------------------------------------------------------------
    @property
    def params(self) -> dict[str, Tensor]:
        return self.backbone.params

    @property
    def n_tasks(self) -> int:
        return len(self.manifests)

    @property
    def current_task(self) -> int:
        return self.n_tasks - 1

    def adapter(self, task: int, block: int, site: str) -> Adapter:
        p = f"adapters.{task}.{block}.{site}"
        return Adapter(self.params[f"{p}.down"], self.params[f"{p}.up"])

    def adapter_sites(self) -> tuple[str, ...]:
        return ("mlp",) if self.mode == "mlp_adapter" else BRANCHES

    def cross_prefix(self, task: int, site: str) -> str:
        return f"cross.{task}.{site}" if self.concat_axis == "embedding" else f"cross.{site}"

    def cross_module(self, task: int, site: str) -> CrossTaskAttention | None:
        p = self.cross_prefix(task, site)
        if f"{p}.q" not in self.params:
            return None
        P = self.params
        return CrossTaskAttention(P[f"{p}.q"], P[f"{p}.k"], P[f"{p}.v"], P[f"{p}.gate"],
                                  self.config.scale, self.concat_axis)

    def set_trainable(self, names) -> None:
        names = set(names)
        unknown = names - set(self.params)
        if unknown:
            raise KeyError(f"unknown parameters: {sorted(unknown)}")
        self.trainable = names
        for n, p in self.params.items():
            p.requires_grad = n in names
            p.grad = None

    def trainable_names(self) -> list[str]:
        """Trainable parameter names in registry order (the fixed flattening order)."""
        return [n for n in self.params if n in self.trainable]

    def trainable_tensors(self) -> list[Tensor]:
        return [self.params[n] for n in self.trainable_names()]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def count(self, names=None) -> int:
        names = self.params if names is None else names
        return int(sum(self.params[n].size for n in names))

    # -- lifecycle --------------------------------------------------------------
    def expand_for_task(self, task: int, classes: int) -> list[str]:
        """Add the task's parameters, freeze everything older, return the trainable names."""
        if task != self.n_tasks:
            if task < self.n_tasks:
                raise ValueError(f"task {task} already expanded")
            raise ValueError(f"expected task {self.n_tasks} next, got {task}")
        before = set(self.params)
        c = self.config
        d, b = c.embed_dim, c.adapter_width
        head = self.backbone.add_task_head(classes)
        assert head == task
        if task == 0:
            trainable = list(self.params)
        else:
            trainable = list(self.backbone.head_names(task))
            if self.mode == "finetune":
                trainable += [n for n in self.params if n.startswith("blocks.") and ".mlp." in n]
            else:
                for blk in range(c.blocks):
                    for site in self.adapter_sites():
                        p = f"adapters.{task}.{blk}.{site}"
                        self.backbone._add(f"{p}.down", self.rng.uniform(-self.adapter_init, self.adapter_init, (d, b)))
                        self.backbone._add(f"{p}.up", np.zeros((b, d)))
                        trainable += [f"{p}.down", f"{p}.up"]
                if self.cross_attention:
                    trainable += self._expand_cross(task)
        self.set_trainable(trainable)
        added = {n: list(self.params[n].shape) for n in self.params if n not in before}
        names = self.trainable_names()
        self.manifests.append(ExpansionManifest(task, classes, added, names, self.count(names), self.count()))
        return names

    def _expand_cross(self, task: int) -> list[str]:
        d = self.config.embed_dim
        names = []
        width = d * task if self.concat_axis == "embedding" else d
        for site in BRANCHES:
            p = self.cross_prefix(task, site)
            if f"{p}.q" in self.params:
                self.cross_history[task - 1] = {
                    **self.cross_history.get(task - 1, {}),
                    **{f"{p}.{k}": self.params[f"{p}.{k}"].data.copy() for k in ("q", "k", "v", "gate")},
                }
            else:
                bq = 1.0 / math.sqrt(d)
                bk = 1.0 / math.sqrt(width)
                self.backbone._add(f"{p}.q", self.rng.uniform(-bq, bq, (d, d)))
                self.backbone._add(f"{p}.k", self.rng.uniform(-bk, bk, (width, d)))
                self.backbone._add(f"{p}.v", self.rng.uniform(-bk, bk, (width, d)))
                self.backbone._add(f"{p}.gate", np.zeros(1))
            names += [f"{p}.{k}" for k in ("q", "k", "v", "gate")]
        return names

    # -- forward ----------------------------------------------------------------
    def hook(self, upto: int | None = None, skip=frozenset(), record: dict | None = None) -> AdapterHook:
        return AdapterHook(self, self.current_task if upto is None else upto, skip, record)

    def forward(self, clips, task: int | None = None, skip=frozenset(), record: bool = False) -> FeatureBundle:
        """Forward as of ``task`` (default: current), evaluating heads 0..task."""
        task = self.current_task if task is None else task
        if task < 0 or task > self.current_task:
            raise IndexError(f"unknown task {task} (expanded {self.n_tasks})")
        rec: dict | None = {} if record else None
        bundle = self.backbone.forward(clips, hook=self.hook(task, skip, rec), heads=task + 1, record=record)
        if rec:
            bundle.attention.update(rec)
        return bundle

    def skip_current(self, task: int | None = None) -> frozenset:
        """(task, site) pairs that remove the given task's adapters."""
        task = self.current_task if task is None else task
        return frozenset((task, s) for s in self.adapter_sites())


def distill_loss(adapted: Tensor, plain: Tensor) -> Tensor:
    """KL(P_plain || P_adapted) on task-n head logits, batch-averaged; ``plain`` is the fixed target."""
    return nx.kl_divergence(plain.detach(), adapted)


def model_distill_loss(model: ExpandableModel, clips, bundle: FeatureBundle | None = None,
                       plain: FeatureBundle | None = None) -> Tensor:
    n = model.current_task
    if n < 1 or model.mode == "finetune":
        raise ValueError("distillation needs an expanded task (n >= 1) with adapters")
    if bundle is None:
        bundle = model.forward(clips)
    if plain is None:
        with nx.no_grad():
            plain = model.forward(clips, skip=model.skip_current())
    return distill_loss(bundle.logits[n], plain.logits[n])


def analytic_trainable_count(config: BlockConfig, classes: int, task: int, mode: str = "sep_ada",
                             cross_attention: bool = True, concat_axis: str = "token") -> int:
    """Trainable parameters for ``task`` from the configuration alone."""
    d, L, b, h = config.embed_dim, config.blocks, config.adapter_width, config.hidden
    head = d * classes + classes
    if task == 0:
        P = config.patches
        embed = config.patch_size ** 2 * d + d + d
        pos = (P + config.frames) * d if config.pos_embed else 0
        msa = 2 * d + (d * 3 * d + 3 * d) + (d * d + d)
        mlp = 2 * d + (d * h + h) + (h * d + d)
        return embed + pos + L * (2 * msa + mlp) + 2 * d + head
    if mode == "finetune":
        return head + L * (2 * d + d * h + h + h * d + d)
    sites = 1 if mode == "mlp_adapter" else 2
    count = head + L * sites * 2 * d * b
    if mode == "sep_ada" and cross_attention:
        width = d * task if concat_axis == "embedding" else d
        count += 2 * (d * d + 2 * width * d + 1)
    return count
