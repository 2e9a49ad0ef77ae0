"""Miniature divided space-time video transformer.

Each block runs temporal attention (patch tokens attend across frames at a
fixed patch position), then spatial attention (a frame's patches plus the
classification token attend to each other), then an MLP, all pre-norm with
residual sums.  An optional hook sees every attention output before it is
added back to the residual stream; the adapter machinery plugs in there.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Protocol

import numpy as np

from . import numerics as nx
from .numerics import Tensor

BRANCHES = ("temporal", "spatial")


@dataclass(frozen=True)
class BlockConfig:
    embed_dim: int = 64
    heads: int = 4
    blocks: int = 2
    frames: int = 8
    frame_size: int = 32
    patch_size: int = 8
    mlp_ratio: float = 2.0
    bottleneck: int | None = None
    pos_embed: bool = True

    def __post_init__(self):
        for name in ("embed_dim", "heads", "blocks", "frames", "frame_size", "patch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.frame_size % self.patch_size:
            raise ValueError(f"frame size {self.frame_size} not divisible by patch size {self.patch_size}")
        if self.mlp_ratio <= 0:
            raise ValueError("mlp_ratio must be positive")

    @property
    def patches(self) -> int:
        return (self.frame_size // self.patch_size) ** 2

    @property
    def tokens(self) -> int:
        return self.frames * self.patches + 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def scale(self) -> float:
        """sigma = sqrt(d / h)."""
        return math.sqrt(self.embed_dim / self.heads)

    @property
    def hidden(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    @property
    def adapter_width(self) -> int:
        return self.bottleneck if self.bottleneck is not None else max(1, self.embed_dim // 4)

    def to_dict(self) -> dict:
        return asdict(self)


class Hook(Protocol):
    def __call__(self, block: int, site: str, feature: Tensor) -> Tensor: ...


@dataclass
class FeatureBundle:
    F: Tensor  # [B, d] normalised classification token after the last block
    S: Tensor  # [B, d] spatial-branch feature of the last block
    T: Tensor  # [B, d] temporal-branch feature of the last block
    tokens: Tensor  # [B, N, d]
    logits: list[Tensor] = field(default_factory=list)  # one [B, c_i] per head
    attention: dict = field(default_factory=dict)

    def all_logits(self) -> Tensor:
        return nx.concatenate(self.logits, axis=-1) if len(self.logits) > 1 else self.logits[0]


def _uniform(rng, shape, bound):
    return rng.uniform(-bound, bound, size=shape)


def init_linear(rng, fan_in: int, fan_out: int, bias: bool = True):
    bound = 1.0 / math.sqrt(fan_in)
    w = _uniform(rng, (fan_in, fan_out), bound)
    return (w, np.zeros(fan_out)) if bias else (w, None)


def attention(x: Tensor, qkv_w: Tensor, qkv_b: Tensor, proj_w: Tensor, proj_b: Tensor,
              heads: int, record: list | None = None) -> Tensor:
    """Multi-head self-attention over axis -2 of ``x`` ([..., n, d])."""
    *lead, n, d = x.shape
    dh = d // heads
    qkv = nx.linear(x, qkv_w, qkv_b)  # [..., n, 3d]
    qkv = nx.reshape(qkv, (*lead, n, 3, heads, dh))
    perm = tuple(range(len(lead))) + tuple(len(lead) + i for i in (1, 2, 0, 3))
    qkv = nx.transpose(qkv, perm)  # [..., 3, h, n, dh]
    k_ax = len(lead)
    sl = [slice(None)] * (len(lead) + 4)
    parts = []
    for i in range(3):
        sl[k_ax] = i
        parts.append(nx.index(qkv, tuple(sl)))
    q, k, v = parts
    scores = nx.mul(nx.matmul(q, nx.transpose(k)), 1.0 / math.sqrt(dh))
    probs = nx.softmax(scores, axis=-1)
    if record is not None:
        record.append(probs.data)
    ctx = nx.matmul(probs, v)  # [..., h, n, dh]
    back = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    ctx = nx.reshape(nx.transpose(ctx, back), (*lead, n, d))
    return nx.linear(ctx, proj_w, proj_b)


class Backbone:
    """Parameters live in ``self.params`` (name -> Tensor), in creation order."""

    def __init__(self, config: BlockConfig = BlockConfig(), seed: int = 0):
        self.config = config
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        self.head_classes: list[int] = []
        c = config
        pa = c.patch_size * c.patch_size
        self._add("embed.weight", init_linear(self.rng, pa, c.embed_dim)[0])
        self._add("embed.bias", np.zeros(c.embed_dim))
        self._add("cls_token", self.rng.normal(0.0, 0.02, c.embed_dim))
        if c.pos_embed:
            self._add("pos.spatial", self.rng.normal(0.0, 0.02, (c.patches, c.embed_dim)))
            self._add("pos.temporal", self.rng.normal(0.0, 0.02, (c.frames, c.embed_dim)))
        d = c.embed_dim
        for b in range(c.blocks):
            for br in BRANCHES:
                p = f"blocks.{b}.{br}"
                self._add(f"{p}.norm.weight", np.ones(d))
                self._add(f"{p}.norm.bias", np.zeros(d))
                w, bias = init_linear(self.rng, d, 3 * d)
                self._add(f"{p}.qkv.weight", w)
                self._add(f"{p}.qkv.bias", bias)
                w, bias = init_linear(self.rng, d, d)
                self._add(f"{p}.proj.weight", w)
                self._add(f"{p}.proj.bias", bias)
            p = f"blocks.{b}.mlp"
            self._add(f"{p}.norm.weight", np.ones(d))
            self._add(f"{p}.norm.bias", np.zeros(d))
            w, bias = init_linear(self.rng, d, c.hidden)
            self._add(f"{p}.fc1.weight", w)
            self._add(f"{p}.fc1.bias", bias)
            w, bias = init_linear(self.rng, c.hidden, d)
            self._add(f"{p}.fc2.weight", w)
            self._add(f"{p}.fc2.bias", bias)
        self._add("norm.weight", np.ones(d))
        self._add("norm.bias", np.zeros(d))

    def _add(self, name: str, value) -> Tensor:
        t = Tensor(np.array(value, dtype=np.float64), name=name)
        self.params[name] = t
        return t

    def p(self, name: str) -> Tensor:
        return self.params[name]

    # -- classifier bank ------------------------------------------------------
    @property
    def n_heads(self) -> int:
        return len(self.head_classes)

    def add_task_head(self, classes: int) -> int:
        if classes < 1:
            raise ValueError("a head needs at least one class")
        i = self.n_heads
        d = self.config.embed_dim
        bound = 1.0 / math.sqrt(d)
        self._add(f"heads.{i}.weight", _uniform(self.rng, (d, classes), bound))
        self._add(f"heads.{i}.bias", np.zeros(classes))
        self.head_classes.append(classes)
        return i

    def head_names(self, task: int | None = None) -> list[str]:
        tasks = range(self.n_heads) if task is None else [task]
        return [f"heads.{i}.{k}" for i in tasks for k in ("weight", "bias")]

    def classify_branch(self, feature: Tensor, task: int) -> Tensor:
        if not 0 <= task < self.n_heads:
            raise IndexError(f"no classifier head for task {task} (have {self.n_heads})")
        if feature.shape[-1] != self.config.embed_dim:
            raise nx.ShapeError(f"feature width {feature.shape[-1]} != embed_dim {self.config.embed_dim}")
        return nx.linear(feature, self.p(f"heads.{task}.weight"), self.p(f"heads.{task}.bias"))

    # -- forward pieces ---------------------------------------------------------
    def patchify(self, clips: np.ndarray) -> np.ndarray:
        """[B, T, H, W] -> [B, T*P, patch_area], patches row-major within a frame."""
        clips = np.asarray(clips, dtype=np.float64)
        if clips.ndim == 3:
            clips = clips[None]
        c = self.config
        B, T, H, W = clips.shape
        ps = c.patch_size
        if H % ps or W % ps:
            raise nx.ShapeError(f"frame {H}x{W} not divisible into {ps}x{ps} patches")
        if T != c.frames or H != c.frame_size or W != c.frame_size:
            raise nx.ShapeError(f"clip shape {[T, H, W]} does not match config "
                                f"{[c.frames, c.frame_size, c.frame_size]}")
        g = H // ps
        x = clips.reshape(B, T, g, ps, g, ps).transpose(0, 1, 2, 4, 3, 5)
        return x.reshape(B, T * g * g, ps * ps)

    def patchify_embed(self, clips: np.ndarray) -> Tensor:
        c = self.config
        patches = Tensor(self.patchify(clips))
        B = patches.shape[0]
        tok = nx.linear(patches, self.p("embed.weight"), self.p("embed.bias"))  # [B, TP, d]
        if c.pos_embed:
            tok = nx.reshape(tok, (B, c.frames, c.patches, c.embed_dim))
            tok = nx.add(tok, self.p("pos.spatial"))
            tok = nx.transpose(tok, (0, 2, 1, 3))
            tok = nx.add(tok, self.p("pos.temporal"))
            tok = nx.transpose(tok, (0, 2, 1, 3))
            tok = nx.reshape(tok, (B, c.frames * c.patches, c.embed_dim))
        cls = nx.broadcast_to(nx.reshape(self.p("cls_token"), (1, 1, c.embed_dim)), (B, 1, c.embed_dim))
        return nx.concatenate([cls, tok], axis=1)

    def _msa_params(self, block: int, branch: str):
        p = f"blocks.{block}.{branch}"
        return (self.p(f"{p}.qkv.weight"), self.p(f"{p}.qkv.bias"),
                self.p(f"{p}.proj.weight"), self.p(f"{p}.proj.bias"))

    def t_msa(self, h: Tensor, block: int, record: list | None = None) -> Tensor:
        """Temporal attention; the classification token does not take part (zero output)."""
        c = self.config
        B = h.shape[0]
        patches = nx.index(h, (slice(None), slice(1, None)))
        x = nx.reshape(patches, (B, c.frames, c.patches, c.embed_dim))
        x = nx.transpose(x, (0, 2, 1, 3))  # [B, P, T, d]
        y = attention(x, *self._msa_params(block, "temporal"), heads=c.heads, record=record)
        y = nx.reshape(nx.transpose(y, (0, 2, 1, 3)), (B, c.frames * c.patches, c.embed_dim))
        zero = Tensor(np.zeros((B, 1, c.embed_dim)))
        return nx.concatenate([zero, y], axis=1)

    def s_msa(self, h: Tensor, block: int, record: list | None = None) -> Tensor:
        """Spatial attention per frame over [cls, patches]; cls output averaged over frames."""
        c = self.config
        B = h.shape[0]
        cls = nx.index(h, (slice(None), slice(0, 1)))  # [B, 1, d]
        patches = nx.reshape(nx.index(h, (slice(None), slice(1, None))),
                             (B, c.frames, c.patches, c.embed_dim))
        cls_rep = nx.repeat(nx.reshape(cls, (B, 1, 1, c.embed_dim)), c.frames, axis=1)
        x = nx.concatenate([cls_rep, patches], axis=2)  # [B, T, 1+P, d]
        y = attention(x, *self._msa_params(block, "spatial"), heads=c.heads, record=record)
        cls_out = nx.mean(nx.index(y, (slice(None), slice(None), slice(0, 1))), axis=1)  # [B, 1, d]
        pat_out = nx.reshape(nx.index(y, (slice(None), slice(None), slice(1, None))),
                             (B, c.frames * c.patches, c.embed_dim))
        return nx.concatenate([cls_out, pat_out], axis=1)

    def _norm(self, x: Tensor, prefix: str) -> Tensor:
        return nx.layer_norm(x, self.p(f"{prefix}.norm.weight"), self.p(f"{prefix}.norm.bias"))

    def mlp(self, x: Tensor, block: int) -> Tensor:
        p = f"blocks.{block}.mlp"
        h = self._norm(x, p)
        h = nx.gelu(nx.linear(h, self.p(f"{p}.fc1.weight"), self.p(f"{p}.fc1.bias")))
        return nx.linear(h, self.p(f"{p}.fc2.weight"), self.p(f"{p}.fc2.bias"))

    def forward(self, clips: np.ndarray, hook: Hook | None = None, heads: int | None = None,
                record: bool = False) -> FeatureBundle:
        """Run the backbone; ``heads`` limits how many classifier heads are evaluated."""
        c = self.config
        x = self.patchify_embed(clips)
        attn: dict = {}
        s_feat = t_feat = None
        for b in range(c.blocks):
            rec_t = [] if record else None
            f = self.t_msa(self._norm(x, f"blocks.{b}.temporal"), b, rec_t)
            if hook is not None:
                f = hook(b, "temporal", f)
            x = nx.add(x, f)
            if b == c.blocks - 1:
                t_feat = nx.mean(nx.index(f, (slice(None), slice(1, None))), axis=1)
            rec_s = [] if record else None
            f = self.s_msa(self._norm(x, f"blocks.{b}.spatial"), b, rec_s)
            if hook is not None:
                f = hook(b, "spatial", f)
            x = nx.add(x, f)
            if b == c.blocks - 1:
                s_feat = nx.index(f, (slice(None), 0))
            m = self.mlp(x, b)
            if hook is not None:
                m = hook(b, "mlp", m)
            x = nx.add(x, m)
            if record:
                attn[(b, "temporal")] = rec_t[0]
                attn[(b, "spatial")] = rec_s[0]
        x = nx.layer_norm(x, self.p("norm.weight"), self.p("norm.bias"))
        full = nx.index(x, (slice(None), 0))
        n = self.n_heads if heads is None else heads
        if n > self.n_heads:
            raise IndexError(f"requested {n} heads, bank has {self.n_heads}")
        logits = [self.classify_branch(full, i) for i in range(n)]
        return FeatureBundle(full, s_feat, t_feat, x, logits, attn)

    # -- bookkeeping ------------------------------------------------------------
    def names(self, prefix: str) -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def count(self, names) -> int:
        return int(sum(self.params[n].size for n in names))
