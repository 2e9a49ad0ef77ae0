"""Synthetic moving-shape clips and class-disjoint task streams.

A class is a (texture, motion) pair.  Textures are a shape plus a fill
pattern; motions are per-frame placement programs.  Two classes sharing a
texture differ only temporally, two sharing a motion differ only spatially.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

FRAMES = 8
SIZE = 32

SHAPES = ("square", "disk", "triangle", "cross", "diamond")
FILLS = ("solid", "stripes")
TEXTURES = tuple(f"{s}-{f}" for f in FILLS for s in SHAPES)
MOTIONS = ("left_to_right", "right_to_left", "up_to_down", "rotate", "scale_pulse", "static")

TRAIN_SEED_BASE = 0
TEST_SEED_BASE = 1_000_000
SPAN = 16.0


@dataclass(frozen=True)
class MotionProgram:
    """Per-frame placement for one motion; positions are pixel centres."""

    motion_id: int
    xs: tuple[float, ...]
    ys: tuple[float, ...]
    angles: tuple[float, ...]
    scales: tuple[float, ...]

    @property
    def name(self) -> str:
        return MOTIONS[self.motion_id]


@dataclass(frozen=True)
class SyntheticClassSpec:
    class_id: int
    texture_id: int
    motion_id: int

    @property
    def name(self) -> str:
        return f"{TEXTURES[self.texture_id]}/{MOTIONS[self.motion_id]}"


@dataclass
class VideoClip:
    frames: np.ndarray  # [T, H, W] in [0, 1]
    label: int
    sample_id: int


@dataclass
class TaskSpec:
    index: int
    classes: list[int]
    train_per_class: int
    test_per_class: int


@dataclass
class TaskStream:
    tasks: list[TaskSpec]
    style: str
    seed: int

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def classes_seen(self, upto: int) -> list[int]:
        return [c for t in self.tasks[: upto + 1] for c in t.classes]

    def to_dict(self) -> dict:
        return {"style": self.style, "seed": self.seed, "tasks": [asdict(t) for t in self.tasks]}


# -- motion and rendering ----------------------------------------------------------

def motion_program(motion_id: int, rng: np.random.Generator, frames: int = FRAMES,
                   size: int = SIZE) -> MotionProgram:
    """Draw the jittered placement sequence for ``motion_id``.

    The jitter draws are identical for every motion so that, for a fixed rng
    state, right-to-left is the exact time reversal of left-to-right.
    """
    lo = (size - SPAN) / 2.0
    x0 = lo + rng.uniform(-2.0, 2.0)
    y0 = size / 2.0 + rng.uniform(-6.0, 6.0)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    t = np.arange(frames) / max(frames - 1, 1)
    sweep = x0 + SPAN * t
    name = MOTIONS[motion_id]
    xs = np.full(frames, size / 2.0 + (x0 - lo))
    ys = np.full(frames, y0)
    angles = np.full(frames, 0.0)
    scales = np.ones(frames)
    if name == "left_to_right":
        xs = sweep
    elif name == "right_to_left":
        xs = sweep[::-1].copy()
    elif name == "up_to_down":
        xs = np.full(frames, y0)
        ys = x0 + SPAN * t
    elif name == "rotate":
        angles = phase + t * math.pi
    elif name == "scale_pulse":
        scales = 1.0 + 0.35 * np.sin(phase + 2.0 * math.pi * t)
    return MotionProgram(motion_id, tuple(map(float, xs)), tuple(map(float, ys)),
                         tuple(map(float, angles)), tuple(map(float, scales)))


def _shape_mask(shape: str, u: np.ndarray, v: np.ndarray, r: float) -> np.ndarray:
    if shape == "square":
        return (np.abs(u) <= r) & (np.abs(v) <= r)
    if shape == "disk":
        return u * u + v * v <= r * r
    if shape == "triangle":
        return (v <= r) & (v >= -r) & (np.abs(u) <= (v + r) * 0.5)
    if shape == "cross":
        w = r * 0.4
        return ((np.abs(u) <= w) & (np.abs(v) <= r)) | ((np.abs(v) <= w) & (np.abs(u) <= r))
    if shape == "diamond":
        return np.abs(u) + np.abs(v) <= r * 1.2
    raise ValueError(f"unknown shape {shape!r}")


def render_frame(texture_id: int, cx: float, cy: float, angle: float, scale: float,
                 size: int = SIZE, radius: float = 5.0) -> np.ndarray:
    shape, fill = TEXTURES[texture_id].split("-")
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    c, s = math.cos(angle), math.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    r = radius * scale
    mask = _shape_mask(shape, u, v, r)
    if fill == "solid":
        value = np.full_like(u, 1.0)
    else:
        value = np.where(np.floor((u + r) / 2.0) % 2 == 0, 1.0, 0.35)
    return np.where(mask, value, 0.0)


def render_clip(spec: SyntheticClassSpec, seed: int, frames: int = FRAMES, size: int = SIZE,
                corpus_seed: int = 0) -> VideoClip:
    rng = np.random.default_rng([corpus_seed, seed])
    prog = motion_program(spec.motion_id, rng, frames, size)
    out = np.stack([
        render_frame(spec.texture_id, prog.xs[t], prog.ys[t], prog.angles[t], prog.scales[t], size)
        for t in range(frames)
    ])
    return VideoClip(out, spec.class_id, seed)


def pixel_histogram(frame: np.ndarray, bins: int = 16) -> np.ndarray:
    h, _ = np.histogram(frame, bins=bins, range=(0.0, 1.0))
    return h / h.sum()


# -- class families ----------------------------------------------------------------

def default_classes(n_textures: int = 10, motions: tuple[int, ...] = (0, 1)) -> list[SyntheticClassSpec]:
    """Every texture in a temporal pair, every motion in a spatial pair."""
    specs = []
    for t in range(n_textures):
        for m in motions:
            specs.append(SyntheticClassSpec(len(specs), t, m))
    return specs


def make_confusable_pairs(n_pairs: int) -> list[tuple[SyntheticClassSpec, SyntheticClassSpec]]:
    """``n_pairs`` temporal pairs (shared texture) and ``n_pairs`` spatial pairs (shared motion)."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    pairs = []
    cid = 0
    for k in range(n_pairs):
        tex = k % len(TEXTURES)
        a = SyntheticClassSpec(cid, tex, 0)
        b = SyntheticClassSpec(cid + 1, tex, 1)
        pairs.append((a, b))
        cid += 2
    for k in range(n_pairs):
        motion = k % len(MOTIONS)
        ta = (2 * k) % len(TEXTURES)
        tb = (2 * k + 1) % len(TEXTURES)
        pairs.append((SyntheticClassSpec(cid, ta, motion), SyntheticClassSpec(cid + 1, tb, motion)))
        cid += 2
    return pairs


# -- task streams ------------------------------------------------------------------

def make_task_stream(n_classes: int, n_tasks: int, style: str = "balanced", seed: int = 42,
                     train_per_class: int = 40, test_per_class: int = 10) -> TaskStream:
    """Split a seeded permutation of class ids into tasks.

    ``balanced`` needs ``n_classes % n_tasks == 0``.  ``head-heavy`` puts
    ceil(n/2) classes in task 0 and spreads the rest over the remaining tasks,
    earlier tasks taking any remainder.
    """
    if n_tasks < 1:
        raise ValueError("n_tasks must be >= 1")
    order = np.random.default_rng(seed).permutation(n_classes).tolist()
    if style == "balanced":
        if n_classes % n_tasks:
            raise ValueError(
                f"{n_classes} classes do not split evenly into {n_tasks} tasks "
                f"(remainder {n_classes % n_tasks})")
        per = n_classes // n_tasks
        groups = [order[i * per:(i + 1) * per] for i in range(n_tasks)]
    elif style == "head-heavy":
        if n_classes < 2:
            raise ValueError("head-heavy split needs at least 2 classes")
        head = math.ceil(n_classes / 2)
        if n_tasks == 1:
            groups = [order]
        else:
            rest = order[head:]
            if len(rest) < n_tasks - 1:
                raise ValueError(f"{len(rest)} classes left for {n_tasks - 1} incremental tasks")
            groups = [order[:head]] + [list(g) for g in np.array_split(rest, n_tasks - 1)]
            groups = [[int(c) for c in g] for g in groups]
    else:
        raise ValueError(f"unknown split style {style!r}")
    tasks = [TaskSpec(i, [int(c) for c in g], train_per_class, test_per_class) for i, g in enumerate(groups)]
    return TaskStream(tasks, style, seed)


# -- corpus ------------------------------------------------------------------------

@dataclass
class Split:
    clips: np.ndarray  # [N, T, H, W]
    labels: np.ndarray  # [N]
    sample_ids: np.ndarray  # [N]

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, mask) -> Split:
        return Split(self.clips[mask], self.labels[mask], self.sample_ids[mask])

    def of_classes(self, classes) -> Split:
        return self.subset(np.isin(self.labels, list(classes)))


@dataclass
class Corpus:
    classes: list[SyntheticClassSpec]
    train: Split
    test: Split
    seed: int
    frames: int = FRAMES
    size: int = SIZE
    meta: dict = field(default_factory=dict)


def _render_split(classes, per_class, seed_base, corpus_seed, frames, size) -> Split:
    clips, labels, ids = [], [], []
    for spec in classes:
        for k in range(per_class):
            sid = seed_base + spec.class_id * 10_000 + k
            clips.append(render_clip(spec, sid, frames, size, corpus_seed).frames)
            labels.append(spec.class_id)
            ids.append(sid)
    return Split(np.stack(clips), np.asarray(labels, dtype=np.int64), np.asarray(ids, dtype=np.int64))


def generate_corpus(classes: list[SyntheticClassSpec] | None = None, train_per_class: int = 40,
                    test_per_class: int = 10, seed: int = 42, frames: int = FRAMES,
                    size: int = SIZE) -> Corpus:
    classes = classes if classes is not None else default_classes()
    train = _render_split(classes, train_per_class, TRAIN_SEED_BASE, seed, frames, size)
    test = _render_split(classes, test_per_class, TEST_SEED_BASE, seed, frames, size)
    return Corpus(classes, train, test, seed, frames, size)


def export_corpus(corpus: Corpus, out: str | Path) -> Path:
    """Write ``<split>.f64`` (little-endian float64, row-major) plus ``index.json``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    index = {
        "format": "vcil-corpus",
        "version": 1,
        "seed": corpus.seed,
        "frames": corpus.frames,
        "size": corpus.size,
        "dtype": "<f8",
        "classes": [{**asdict(c), "name": c.name} for c in corpus.classes],
        "splits": {},
    }
    for name in ("train", "test"):
        split: Split = getattr(corpus, name)
        fname = f"{name}.f64"
        (out / fname).write_bytes(np.ascontiguousarray(split.clips, dtype="<f8").tobytes())
        index["splits"][name] = {
            "file": fname,
            "shape": list(split.clips.shape),
            "labels": split.labels.tolist(),
            "sample_ids": split.sample_ids.tolist(),
        }
    (out / "index.json").write_text(json.dumps(index, indent=1) + "\n")
    return out


def load_corpus(path: str | Path) -> Corpus:
    path = Path(path)
    index = json.loads((path / "index.json").read_text())
    classes = [SyntheticClassSpec(c["class_id"], c["texture_id"], c["motion_id"]) for c in index["classes"]]
    splits = {}
    for name, meta in index["splits"].items():
        raw = np.frombuffer((path / meta["file"]).read_bytes(), dtype="<f8").reshape(meta["shape"])
        splits[name] = Split(raw.astype(np.float64), np.asarray(meta["labels"], dtype=np.int64),
                             np.asarray(meta["sample_ids"], dtype=np.int64))
    return Corpus(classes, splits["train"], splits["test"], index["seed"], index["frames"], index["size"])
