"""Relation recovery and conflict compensation.

A relation vector summarises how much a branch (spatial or temporal) accounts
for the full prediction: the elementwise ratio of the branch's class
distribution to the full one, followed by the cosine between the two branch
logit vectors.  Training pulls each sample's current relation towards a
similarity-weighted mixture of relations from samples that looked alike under
the previous task's model, and adds compensation logits built from samples
whose previous-model "benefit" vectors resemble the current sample's.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Tensor

RATIO_FLOOR = 1e-8
ALPHA_EPS = 1e-12


class EmptyCacheWarning(RuntimeWarning):
    pass


class TopKWarning(RuntimeWarning):
    pass


@dataclass
class RelationVector:
    spatial: Tensor  # [..., c + 1]
    temporal: Tensor  # [..., c + 1]


def compute_relation(logits_s: Tensor, logits_t: Tensor, logits_f: Tensor) -> RelationVector:
    """Branch-to-full probability ratios (floored), then cos(logits_S, logits_T)."""
    logits_s, logits_t, logits_f = (nx.as_tensor(x) for x in (logits_s, logits_t, logits_f))
    if not (logits_s.shape == logits_t.shape == logits_f.shape):
        raise nx.ShapeError(f"relation inputs differ: {list(logits_s.shape)}, "
                            f"{list(logits_t.shape)}, {list(logits_f.shape)}")
    pf = nx.clip_min(nx.softmax(logits_f), RATIO_FLOOR)
    ratio_s = nx.div(nx.clip_min(nx.softmax(logits_s), RATIO_FLOOR), pf)
    ratio_t = nx.div(nx.clip_min(nx.softmax(logits_t), RATIO_FLOOR), pf)
    cos = nx.cosine_similarity(logits_s, logits_t)
    cos = nx.reshape(cos, cos.shape + (1,))
    return RelationVector(nx.concatenate([ratio_s, cos], axis=-1), nx.concatenate([ratio_t, cos], axis=-1))


def relation_np(logits_s, logits_t, logits_f) -> tuple[np.ndarray, np.ndarray]:
    with nx.no_grad():
        r = compute_relation(Tensor(logits_s), Tensor(logits_t), Tensor(logits_f))
    return r.spatial.data, r.temporal.data


def naive_recovery_loss(r_prev: Tensor, r_cur: Tensor) -> Tensor:
    """1 - cos(R_prev, R_cur), averaged over leading axes."""
    return nx.mean(nx.sub(1.0, nx.cosine_similarity(r_prev, r_cur)))


# -- cache and retrieval ------------------------------------------------------------

@dataclass
class RelationCache:
    """Per-task store built once under the previous task's model.

    ``rel_*`` and ``benefit_*`` use the previous head; ``logits_*`` are the
    candidates' current-head branch logits used for mixing.  Only
    ``logits_*`` may be refreshed (``refresh_logits``) as training proceeds.
    """

    task: int
    sample_ids: np.ndarray  # [M]
    labels: np.ndarray  # [M]
    rel_s: np.ndarray  # [M, c_prev + 1]
    rel_t: np.ndarray
    logits_s: np.ndarray  # [M, c_n]
    logits_t: np.ndarray
    benefit_s: np.ndarray  # Clf_prev(F) - Clf_prev(S), [M, c_prev]
    benefit_t: np.ndarray  # Clf_prev(F) - Clf_prev(T)
    clips: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.sample_ids)

    def relations(self, branch: str) -> np.ndarray:
        return self.rel_s if branch == "spatial" else self.rel_t

    def branch_logits(self, branch: str) -> np.ndarray:
        return self.logits_s if branch == "spatial" else self.logits_t

    def benefits(self, branch: str) -> np.ndarray:
        """Benefit vectors used to build the compensation effect *for* ``branch``.

        The temporal effect draws on spatial benefits, F - T, and vice versa.
        """
        return self.benefit_t if branch == "temporal" else self.benefit_s

    def refresh_logits(self, logits_s: np.ndarray, logits_t: np.ndarray) -> None:
        self.logits_s = np.array(logits_s, dtype=np.float64)
        self.logits_t = np.array(logits_t, dtype=np.float64)

    def dump_csv(self, path: str | Path) -> Path:
        path = Path(path)
        c = self.rel_s.shape[1]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "task"] + [f"rs{i}" for i in range(c)] + [f"rt{i}" for i in range(c)])
            for k in range(len(self)):
                w.writerow([int(self.sample_ids[k]), self.task]
                           + [f"{v:.9g}" for v in self.rel_s[k]] + [f"{v:.9g}" for v in self.rel_t[k]])
        return path


def cosine_matrix(queries: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """[B, M] cosines with the zero-vector -> 0 convention."""
    q = np.atleast_2d(queries)
    k = np.atleast_2d(keys)
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    kn = np.linalg.norm(k, axis=1, keepdims=True)
    if np.any(qn == 0) or np.any(kn == 0):
        warnings.warn("cosine of a zero vector; returning 0", nx.DegenerateCosineWarning, stacklevel=2)
    qs = np.where(qn > 0, qn, 1.0)
    ks = np.where(kn > 0, kn, 1.0)
    sims = (q / qs) @ (k / ks).T
    sims = np.where((qn > 0) & (kn.T > 0), sims, 0.0)
    return np.clip(sims, -1.0, 1.0)


def _rank(sims: np.ndarray, ids: np.ndarray, k: int, exclude=None) -> tuple[np.ndarray, np.ndarray]:
    """Top-k positions by similarity, ties to the lower sample id."""
    keep = np.ones(len(ids), dtype=bool) if exclude is None else ids != exclude
    pos = np.flatnonzero(keep)
    order = np.lexsort((ids[pos], -sims[pos]))
    chosen = pos[order[:k]]
    return chosen, sims[chosen]


def _top_k(sims_rows: np.ndarray, ids: np.ndarray, k: int, exclude_ids=None):
    available = len(ids) - (0 if exclude_ids is None else 1)
    if k < 1:
        raise ValueError("K must be >= 1")
    if k > available:
        warnings.warn(f"K={k} exceeds {available} cache entries; returning all", TopKWarning, stacklevel=3)
    out_idx, out_sim = [], []
    for b, row in enumerate(sims_rows):
        ex = None if exclude_ids is None else exclude_ids[b]
        i, s = _rank(row, ids, k, ex)
        out_idx.append(i)
        out_sim.append(s)
    return out_idx, out_sim


def topk_select(cache: RelationCache, query: np.ndarray, k: int, branch: str,
                exclude_ids=None) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """K most cosine-similar cached relations for each query row.

    Returns per-row (cache positions, similarities).  ``exclude_ids`` drops a
    query's own sample from its candidate list.
    """
    if len(cache) == 0:
        raise ValueError("relation cache is empty")
    q = np.atleast_2d(np.asarray(query, dtype=np.float64))
    sims = cosine_matrix(q, cache.relations(branch))
    return _top_k(sims, cache.sample_ids, k, exclude_ids)


def mix_branch_feature(logits: np.ndarray, sims: np.ndarray, normalize: bool = False) -> np.ndarray:
    """Similarity-weighted sum of candidate branch logits ([K, c] x [K] -> [c])."""
    logits = np.asarray(logits, dtype=np.float64)
    w = np.asarray(sims, dtype=np.float64)
    if normalize:
        z = np.exp(w - w.max())
        w = z / z.sum()
    return (w[:, None] * logits).sum(axis=0)


def mixed_logits(cache: RelationCache, queries: np.ndarray, k: int, branch: str, exclude_ids=None,
                 normalize: bool = False) -> np.ndarray:
    idx, sims = topk_select(cache, queries, k, branch, exclude_ids)
    src = cache.branch_logits(branch)
    return np.stack([mix_branch_feature(src[i], s, normalize) for i, s in zip(idx, sims)])


def hybrid_recovery_loss(mixed_s, mixed_t, logits_s: Tensor, logits_t: Tensor,
                         logits_f: Tensor) -> tuple[Tensor, Tensor]:
    """(L_S, L_T): 1 - cos between the mixed relation and the current relation.

    The mixed relation pairs the (constant) mixed branch logits with the
    current full logits, so gradients reach the current prediction through
    both relations.
    """
    mixed = compute_relation(nx.as_tensor(mixed_s), nx.as_tensor(mixed_t), logits_f)
    cur = compute_relation(logits_s, logits_t, logits_f)
    return naive_recovery_loss(mixed.spatial, cur.spatial), naive_recovery_loss(mixed.temporal, cur.temporal)


# -- compensation --------------------------------------------------------------------

@dataclass
class CompensationFactors:
    alpha_t: float
    alpha_s: float
    norm_s: float
    norm_t: float
    cosine: float


def mapping_influence_factor(grad_s: np.ndarray, grad_t: np.ndarray, eps: float = ALPHA_EPS) -> CompensationFactors:
    """alpha_T = |g_S|/|g_T| cos(g_S, g_T); alpha_S swaps the roles.

    A factor whose denominator norm is below ``eps`` is 0 (with a warning).
    """
    gs = np.asarray(grad_s, dtype=np.float64).ravel()
    gt = np.asarray(grad_t, dtype=np.float64).ravel()
    if gs.shape != gt.shape:
        raise nx.ShapeError(f"gradient lengths differ: {gs.size} vs {gt.size}")
    ns, nt = float(np.linalg.norm(gs)), float(np.linalg.norm(gt))
    cos = nx.cosine_np(gs, gt) if ns > 0 and nt > 0 else 0.0
    if nt < eps or ns < eps:
        warnings.warn("vanishing increment gradient; mapping influence factor set to 0",
                      RuntimeWarning, stacklevel=2)
    alpha_t = ns / nt * cos if nt >= eps else 0.0
    alpha_s = nt / ns * cos if ns >= eps else 0.0
    return CompensationFactors(alpha_t, alpha_s, ns, nt, cos)


def compensation_effect(cache: RelationCache | None, benefit_query: np.ndarray, alpha: float, k1: int,
                        branch: str, exclude_ids=None, width: int | None = None) -> np.ndarray:
    """alpha * sum_k Clf_n(branch_k) * sim_k over the K1 most benefit-similar cache entries.

    ``branch`` names the effect being built: "temporal" gives E_T (spatial
    benefits F - T), "spatial" gives E_S.
    """
    q = np.atleast_2d(np.asarray(benefit_query, dtype=np.float64))
    if cache is None or len(cache) == 0:
        warnings.warn("empty relation cache; compensation effect is zero", EmptyCacheWarning, stacklevel=2)
        return np.zeros((q.shape[0], width or 1))
    if alpha == 0.0:
        return np.zeros((q.shape[0], cache.branch_logits(branch).shape[1]))
    sims = cosine_matrix(q, cache.benefits(branch))
    idx, w = _top_k(sims, cache.sample_ids, k1, exclude_ids)
    src = cache.branch_logits(branch)
    return alpha * np.stack([mix_branch_feature(src[i], s) for i, s in zip(idx, w)])


def combined_prediction(base_logits, e_s, e_t, lambda1: float, lambda2: float):
    """Y = Y' + lambda1 E_S + lambda2 E_T (logit level)."""
    if np.shape(base_logits.data if isinstance(base_logits, Tensor) else base_logits) != np.shape(e_s) \
            or np.shape(e_s) != np.shape(e_t):
        raise nx.ShapeError("combined_prediction inputs differ in shape")
    shift = lambda1 * np.asarray(e_s, dtype=np.float64) + lambda2 * np.asarray(e_t, dtype=np.float64)
    if isinstance(base_logits, Tensor):
        return nx.add(base_logits, Tensor(shift))
    return np.asarray(base_logits, dtype=np.float64) + shift


def total_loss(l_ce, l_d, l_t, l_s, mu1: float, mu2: float, mu3: float):
    """L_CE + mu1 L_D + mu2 L_T + mu3 L_S."""
    if min(mu1, mu2, mu3) < 0:
        raise ValueError(f"loss weights must be non-negative, got {(mu1, mu2, mu3)}")
    out = l_ce
    for w, term in ((mu1, l_d), (mu2, l_t), (mu3, l_s)):
        if w != 0.0 and term is not None:
            out = nx.add(out, nx.mul(term, w)) if isinstance(out, Tensor) or isinstance(term, Tensor) \
                else out + w * term
    return out


def mu_schedule(mu: float, epoch: int, epochs: int) -> float:
    """Linear decay from ``mu`` to ``mu / 2`` over the task's epochs."""
    if epochs <= 1:
        return mu
    return mu * (1.0 - 0.5 * epoch / (epochs - 1))
