"""Gradient probes for spatial/temporal increment and memorisation.

Each probe is a KL alignment between two forwards of the current model that
differ only in which of the current task's adapters are switched on.  The
target forward is held fixed; the gradient flows through the source forward
(one branch's adapter only).

    increment of X       target: no current adapters      source: X adapter only
    memorisation of Y    target: both current adapters    source: X adapter only (Y != X)

The curves track the cosine between the four probe gradients.
"""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .expansion import ExpandableModel
from .numerics import Tensor

NEUTRAL = 1e-6
CSV_VERSION = 1
CURVE_COLUMNS = ("step", "cos_inc_inc", "cos_incS_memT", "cos_incT_memS", "cos_mem_mem",
                 "label_inc_inc", "label_incS_memT", "label_incT_memS", "label_mem_mem")
PAIRS = (("inc_spatial", "inc_temporal"), ("inc_spatial", "mem_temporal"),
         ("inc_temporal", "mem_spatial"), ("mem_spatial", "mem_temporal"))


@dataclass(frozen=True)
class ProbeConfig:
    direction: str  # "increment" | "memorization"
    branch: str  # knowledge being incremented / memorised: "spatial" | "temporal"
    kl_reversed: bool = False

    def __post_init__(self):
        if self.direction not in ("increment", "memorization"):
            raise ValueError(f"unknown probe direction {self.direction!r}")
        if self.branch not in ("spatial", "temporal"):
            raise ValueError(f"unknown probe branch {self.branch!r}")

    @property
    def key(self) -> str:
        return f"{'inc' if self.direction == 'increment' else 'mem'}_{self.branch}"

    @property
    def source_adapter(self) -> str:
        """The single current-task adapter switched on in the trainable forward."""
        if self.direction == "increment":
            return self.branch
        return "spatial" if self.branch == "temporal" else "temporal"

    @property
    def target_adapters(self) -> tuple[str, ...]:
        return () if self.direction == "increment" else ("spatial", "temporal")

    @property
    def active(self) -> str:
        """Adapter set of the trainable forward: 'spatial-only' or 'temporal-only'."""
        return f"{self.source_adapter}-only"


PROBES = {p.key: p for p in (ProbeConfig("increment", "spatial"), ProbeConfig("increment", "temporal"),
                             ProbeConfig("memorization", "spatial"), ProbeConfig("memorization", "temporal"))}


@dataclass
class GradientSnapshot:
    probe: str
    vector: np.ndarray
    step: int
    names: tuple[str, ...]

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.vector))


def _skip_all_but(model: ExpandableModel, active: tuple[str, ...]) -> frozenset:
    n = model.current_task
    return frozenset((n, s) for s in ("spatial", "temporal") if s not in active)


def probe_objective(model: ExpandableModel, config: ProbeConfig, clips) -> Tensor:
    if model.current_task < 1 or model.mode != "sep_ada":
        raise ValueError("probes need a task n >= 1 expanded with separate adapters")
    if len(clips) == 0:
        raise ValueError("empty probe batch")
    n = model.current_task
    with nx.no_grad():
        target = model.forward(clips, skip=_skip_all_but(model, config.target_adapters)).logits[n]
    source = model.forward(clips, skip=_skip_all_but(model, (config.source_adapter,))).logits[n]
    if config.kl_reversed:
        return nx.kl_divergence(source, target)
    return nx.kl_divergence(target, source)


def _flat_grad(obj: Tensor, tensors: list[Tensor], scale: float = 1.0) -> np.ndarray:
    """Gradient of ``obj`` into scratch buffers; the tensors' ``.grad`` is left as found."""
    saved = [t.grad for t in tensors]
    for t in tensors:
        t.grad = None
    try:
        if scale != 1.0:
            obj = nx.mul(obj, scale)
        if obj.requires_grad:
            nx.backward(obj)
        return np.concatenate([(t.grad if t.grad is not None else np.zeros_like(t.data)).ravel()
                               for t in tensors])
    finally:
        for t, g in zip(tensors, saved):
            t.grad = g


def _trainable(model: ExpandableModel) -> tuple[tuple[str, ...], list[Tensor]]:
    names = tuple(model.trainable_names())
    if not names:
        raise ValueError("empty trainable set")
    return names, [model.params[k] for k in names]


def probe_gradient(model: ExpandableModel, config: ProbeConfig, clips, step: int = 0,
                   scale: float = 1.0) -> GradientSnapshot:
    """Gradient of the probe over the current trainable set, flattened in registry order."""
    names, tensors = _trainable(model)
    vec = _flat_grad(probe_objective(model, config, clips), tensors, scale)
    return GradientSnapshot(config.key, vec, step, names)


def probe_all(model: ExpandableModel, clips, step: int = 0,
              kl_reversed: bool = False) -> dict[str, GradientSnapshot]:
    """All four probes, sharing the two fixed targets and the two branch-only forwards."""
    if model.current_task < 1 or model.mode != "sep_ada":
        raise ValueError("probes need a task n >= 1 expanded with separate adapters")
    if len(clips) == 0:
        raise ValueError("empty probe batch")
    names, tensors = _trainable(model)
    n = model.current_task
    targets = {}
    with nx.no_grad():
        for active in ((), ("spatial", "temporal")):
            targets[active] = model.forward(clips, skip=_skip_all_but(model, active)).logits[n]
    sources = {b: model.forward(clips, skip=_skip_all_but(model, (b,))).logits[n]
               for b in ("spatial", "temporal")}
    out = {}
    for key, cfg in PROBES.items():
        tgt, src = targets[cfg.target_adapters], sources[cfg.source_adapter]
        obj = nx.kl_divergence(src, tgt) if kl_reversed else nx.kl_divergence(tgt, src)
        out[key] = GradientSnapshot(key, _flat_grad(obj, tensors), step, names)
    return out


def label(cos: float) -> str:
    if abs(cos) <= NEUTRAL:
        return "neutral"
    return "cooperation" if cos > 0 else "conflict"


def pairwise_cosines(snaps: dict[str, GradientSnapshot]) -> dict:
    """The four tracked cosines with their cooperation/conflict labels."""
    lengths = {s.vector.size for s in snaps.values()}
    if len(lengths) != 1:
        raise nx.ShapeError(f"snapshots have differing lengths {sorted(lengths)}")
    row: dict = {}
    for (a, b), col in zip(PAIRS, CURVE_COLUMNS[1:5]):
        va, vb = snaps[a].vector, snaps[b].vector
        if not va.any() or not vb.any():
            warnings.warn(f"zero gradient in pair {a}/{b}; cosine set to 0", nx.DegenerateCosineWarning,
                          stacklevel=2)
            c = 0.0
        else:
            c = nx.cosine_np(va, vb)
        row[col] = c
        row["label_" + col[4:]] = label(c)
    return row


class RelationCurve:
    """Accumulates curve rows; ``to_csv`` renders the fixed schema."""

    def __init__(self, task: int, configuration: str):
        self.task = task
        self.configuration = configuration
        self.rows: list[dict] = []

    def add(self, step: int, snaps: dict[str, GradientSnapshot]) -> dict:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", nx.DegenerateCosineWarning)
            row = {"step": step, **pairwise_cosines(snaps)}
        self.rows.append(row)
        return row

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# vcil relation curve v{CSV_VERSION} task={self.task} configuration={self.configuration}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for r in self.rows:
            w.writerow([r["step"]] + [f"{r[c]:.9g}" for c in CURVE_COLUMNS[1:5]] + [r[c] for c in CURVE_COLUMNS[5:]])
        return buf.getvalue()

    def write(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / f"task{self.task}_{self.configuration}.csv"
        path.write_text(self.to_csv())
        return path


def read_curve(path: str | Path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    rows = []
    for r in csv.DictReader(lines):
        rows.append({"step": int(r["step"]),
                     **{c: float(r[c]) for c in CURVE_COLUMNS[1:5]},
                     **{c: r[c] for c in CURVE_COLUMNS[5:]}})
    return rows


def summarize_curve(rows: list[dict]) -> dict:
    """Mean cosine and conflict fraction per tracked pair."""
    out = {}
    for col in CURVE_COLUMNS[1:5]:
        vals = np.array([r[col] for r in rows]) if rows else np.zeros(0)
        labels = [r["label_" + col[4:]] for r in rows]
        out[col] = {
            "mean": float(vals.mean()) if vals.size else float("nan"),
            "conflict_fraction": labels.count("conflict") / len(labels) if labels else float("nan"),
        }
    return out
