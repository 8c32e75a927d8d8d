"""Post-hoc analyses: embedding clusters, SWOT/nadir crossovers, stage-1 target ablation."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import InputError
from .metrics import MetricsReport, render_table
from .net import EMBED_DIM, OrcastNet

log = logging.getLogger(__name__)


@dataclass(eq=False)
class EmbeddingGrid:
    points: np.ndarray  # [n, 3] lat, lon, week
    vectors: np.ndarray  # [n, 32]

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[1] != EMBED_DIM:
            raise InputError(f"embedding vectors must be [n, {EMBED_DIM}], got {self.vectors.shape}")


def embedding_grid(model: OrcastNet, lats: Sequence[float], lons: Sequence[float], weeks: Sequence[int],
                   land: Callable | None = None) -> EmbeddingGrid:
    """Evaluate the raw 32-d positional embedding on a lat x lon x week grid.

    ``land`` is an optional predicate ``land(lat, lon) -> bool array`` whose
    points are dropped.
    """
    if not hasattr(model, "pos_embed") or not any(model.group_of(n) == "pos_embed" for n, _ in model.named_parameters()):
        raise InputError("model has no pos_embed parameter group")
    la, lo, wk = np.meshgrid(np.asarray(lats, float), np.asarray(lons, float), np.asarray(weeks, float), indexing="ij")
    pts = np.stack([la.ravel(), lo.ravel(), wk.ravel()], axis=1)
    if land is not None:
        pts = pts[~np.asarray(land(pts[:, 0], pts[:, 1]), dtype=bool)]
    with torch.no_grad():
        vec = model.pos_embed.embed(
            torch.as_tensor(pts[:, 0], dtype=torch.float64),
            torch.as_tensor(pts[:, 1], dtype=torch.float64),
            torch.as_tensor(pts[:, 2], dtype=torch.float64),
        )
    return EmbeddingGrid(pts, vec.double().numpy())


@dataclass(frozen=True)
class KMeansConfig:
    k: int = 30
    batch_size: int = 8
    max_iters: int = 10_000
    seed: int = 0
    init: str = "k-means++"

    def __post_init__(self):
        if self.k < 2:
            raise InputError("k must be >= 2")
        if self.batch_size < 1:
            raise InputError("batch_size must be >= 1")
        if self.init not in ("k-means++", "random"):
            raise InputError(f"unknown init {self.init!r}; expected 'k-means++' or 'random'")


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def assign(points: np.ndarray, centroids: np.ndarray):
    """Nearest-centroid labels and inertia."""
    d = _sq_dists(points, centroids)
    labels = np.argmin(d, axis=1)
    return labels, float(d[np.arange(len(points)), labels].sum())


def _init_centroids(x: np.ndarray, k: int, method: str, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    if method == "random":
        return x[rng.choice(n, size=k, replace=False)].copy()
    # Greedy k-means++: first centre uniform; each later centre is the best of
    # 2 + ln(k) candidates drawn with probability proportional to the squared
    # distance to the nearest chosen centre.
    n_trials = 2 + int(np.log(k))
    idx = [int(rng.integers(n))]
    d2 = _sq_dists(x, x[idx])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            nxt = int(rng.choice(np.setdiff1d(np.arange(n), idx)))
            d2 = np.minimum(d2, _sq_dists(x, x[[nxt]])[:, 0])
        else:
            cand = rng.choice(n, size=n_trials, p=d2 / total)
            cand_d2 = np.minimum(d2[None, :], _sq_dists(x, x[cand]).T)
            best = int(np.argmin(cand_d2.sum(axis=1)))
            nxt = int(cand[best])
            d2 = cand_d2[best]
        idx.append(nxt)
    return x[idx].copy()


def minibatch_kmeans(points, cfg: KMeansConfig = KMeansConfig()):
    """Mini-batch k-means with per-centroid 1/count learning rates.

    Centroids start at ``k`` distinct points (greedy k-means++ seeding by default,
    or drawn uniformly with ``init="random"``); each iteration assigns a
    random batch and moves every touched centroid towards its points.
    Clusters left empty by the final assignment are re-seeded at the point
    farthest from its centroid.
    """
    x = np.asarray(points, dtype=np.float64)
    n = len(x)
    if n < cfg.k:
        raise InputError(f"need at least k={cfg.k} points, got {n}")
    rng = np.random.default_rng(cfg.seed)
    centroids = _init_centroids(x, cfg.k, cfg.init, rng)
    counts = np.zeros(cfg.k)
    for _ in range(cfg.max_iters):
        batch = x[rng.integers(0, n, size=cfg.batch_size)]
        labels = np.argmin(_sq_dists(batch, centroids), axis=1)
        for p, c in zip(batch, labels):
            counts[c] += 1.0
            eta = 1.0 / counts[c]
            centroids[c] = (1.0 - eta) * centroids[c] + eta * p
    labels, _ = assign(x, centroids)
    for _ in range(cfg.k):
        empty = np.setdiff1d(np.arange(cfg.k), labels)
        if empty.size == 0:
            break
        d = _sq_dists(x, centroids)[np.arange(n), labels]
        centroids[empty[0]] = x[int(np.argmax(d))]
        labels, _ = assign(x, centroids)
    return centroids, labels


def reorder_clusters(centroids: np.ndarray, assignments: np.ndarray, points_meta: np.ndarray):
    """Relabel clusters by ascending mean member latitude, ties by mean longitude.

    ``points_meta`` holds ``(lat, lon, ...)`` rows aligned with ``assignments``.
    Returns ``(centroids, assignments, permutation)`` with ``permutation[old] = new``.
    """
    k = len(centroids)
    lat = points_meta[:, 0]
    lon = points_meta[:, 1]
    keys = []
    for c in range(k):
        sel = assignments == c
        if sel.any():
            keys.append((float(lat[sel].mean()), float(lon[sel].mean()), c))
        else:
            keys.append((np.inf, np.inf, c))
    order = [c for _, _, c in sorted(keys)]
    perm = np.empty(k, dtype=int)
    perm[order] = np.arange(k)
    return centroids[order], perm[assignments], perm


def cluster_matrices(centroids: np.ndarray):
    """Pearson correlation and Euclidean distance between centroid vectors."""
    c = np.asarray(centroids, dtype=np.float64)
    k = len(c)
    if k < 2:
        raise InputError("need at least two centroids")
    centered = c - c.mean(axis=1, keepdims=True)
    norms = np.sqrt((centered * centered).sum(axis=1))
    degenerate = norms == 0
    if degenerate.any():
        log.warning("centroids %s have zero variance; their correlations are set to 0", np.flatnonzero(degenerate).tolist())
    safe = np.where(degenerate, 1.0, norms)
    unit = centered / safe[:, None]
    corr = unit @ unit.T
    corr[degenerate, :] = 0.0
    corr[:, degenerate] = 0.0
    corr = 0.5 * (corr + corr.T)
    np.fill_diagonal(corr, 1.0)
    diff = c[:, None, :] - c[None, :, :]
    dist = np.sqrt((diff * diff).sum(-1))
    dist = 0.5 * (dist + dist.T)
    np.fill_diagonal(dist, 0.0)
    return corr, dist


def cluster_geography(assignments: np.ndarray, points_meta: np.ndarray, k: int):
    """Mean latitude and longitude of each non-empty cluster."""
    lat = np.array([points_meta[assignments == c, 0].mean() for c in range(k) if (assignments == c).any()])
    lon = np.array([points_meta[assignments == c, 1].mean() for c in range(k) if (assignments == c).any()])
    return lat, lon


def write_cluster_map(points: np.ndarray, labels: np.ndarray, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lat", "lon", "week", "cluster"])
        for (la, lo, wk), c in zip(points, labels):
            w.writerow([repr(float(la)), repr(float(lo)), int(wk), int(c)])
    return path


def write_matrix(m: np.ndarray, path) -> Path:
    np.savetxt(path, m, delimiter=",", fmt="%.10g")
    return Path(path)


# --------------------------------------------------------------------------- crossovers


@dataclass(frozen=True)
class CrossoverStats:
    n_points: int
    mean_bias: float
    std: float

    def to_dict(self) -> dict:
        return {"n_points": self.n_points, "mean_bias": self.mean_bias, "std": self.std}


def crossover_bias(swot_values, swot_masks, nadir_values, nadir_masks) -> CrossoverStats:
    """Statistics of SWOT minus nadir SSH over co-located, same-day observations.

    Arrays are ``[day, lat, lon]`` stacks on a shared grid and day axis.
    """
    sv, sm = np.asarray(swot_values, np.float64), np.asarray(swot_masks, bool)
    nv, nm = np.asarray(nadir_values, np.float64), np.asarray(nadir_masks, bool)
    if sv.shape != nv.shape or sm.shape != nm.shape or sv.shape != sm.shape:
        raise InputError("SWOT and nadir stacks must share grid and day axis")
    both = sm & nm
    n = int(both.sum())
    if n == 0:
        raise InputError("no co-located SWOT/nadir observations")
    d = sv[both] - nv[both]
    std = float(np.std(d, ddof=1)) if n > 1 else 0.0
    return CrossoverStats(n, float(d.mean()), std)


def crossover_bias_fields(swot_fields, nadir_fields) -> CrossoverStats:
    """Field-list form of :func:`crossover_bias`."""
    if len(swot_fields) != len(nadir_fields):
        raise InputError("SWOT and nadir series differ in length")
    for s, nd in zip(swot_fields, nadir_fields):
        if s.day != nd.day or s.grid != nd.grid:
            raise InputError("SWOT and nadir series must share grid and days")
    return crossover_bias(
        np.stack([f.values for f in swot_fields]), np.stack([f.mask for f in swot_fields]),
        np.stack([f.values for f in nadir_fields]), np.stack([f.mask for f in nadir_fields]),
    )


# --------------------------------------------------------------------------- ablation


@dataclass(eq=False)
class AblationTable:
    rows: dict[tuple[str, str, int], MetricsReport]

    def mean_angle(self, variant: str, stage: str, lead: int = 1) -> float:
        vals = [r.at(lead).pct_correct_angle for (v, s, _), r in self.rows.items() if v == variant and s == stage]
        vals = [x for x in vals if x is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def markdown(self, leads=(1, 3)) -> str:
        return render_table({f"{v} {s} (seed {seed})": r for (v, s, seed), r in self.rows.items()}, leads)

    def to_dict(self) -> dict:
        return {f"{v}|{s}|{seed}": r.to_dict() for (v, s, seed), r in self.rows.items()}


def ablation_run(experiment, seeds: Sequence[int], variants=("L4_ANALOG", "NEUROST_ANALOG"),
                 prepared=None, runner=None) -> AblationTable:
    """Run the curriculum for each stage-1 target variant and seed; one row per (variant, stage, seed)."""
    from .pipeline import prepare, run_experiment

    prepared = prepared or prepare(experiment)
    runner = runner or (lambda variant, seed: run_experiment(experiment, seed, variant, prepared=prepared))
    rows = {}
    for variant in variants:
        for seed in seeds:
            res = runner(variant, seed)
            for stage, rep in res.reports.items():
                rows[(variant, stage, seed)] = rep
    return AblationTable(rows)


def save_json(obj, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
