"""Windowed DBSCAN over event coordinates and the round-blob filter."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree


@dataclass
class ClusterParams:
    eps: float = 3.0
    min_pts: int = 4
    shape_ratio: float = 0.9
    n_min: int = 5
    n_max: int = 200_000
    window_us: int = 100_000

    def __post_init__(self) -> None:
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.min_pts < 1:
            raise ValueError("min_pts must be >= 1")
        if not 0.0 < self.shape_ratio < 1.0:
            raise ValueError("shape_ratio must be in (0, 1)")
        if not 1 <= self.n_min <= self.n_max:
            raise ValueError("need 1 <= n_min <= n_max")


@dataclass(frozen=True)
class Target:
    x: float
    y: float
    size: int
    polarity: float
    window_end_time: int

    @property
    def barycenter(self) -> tuple[float, float]:
        return (self.x, self.y)


def accumulate_window(events: np.ndarray, t0: int, dt: int,
                      times: np.ndarray | None = None) -> np.ndarray:
    """Events with ``t0 <= t < t0 + dt``; ``events`` must be time-sorted.

    ``times`` may carry a contiguous copy of ``events["t"]`` to avoid
    re-gathering the strided field on every call.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    t = events["t"] if times is None else times
    # keys in the array's dtype, otherwise uint64 vs int promotes the whole array
    key = np.array([max(t0, 0), max(t0 + dt, 0)]).astype(t.dtype)
    lo, hi = np.searchsorted(t, key, side="left")
    return events[lo:hi]


@dataclass
class Clustering:
    labels: np.ndarray  # per event, -1 for noise; clusters numbered by first core point

    @property
    def clusters(self) -> list[np.ndarray]:
        n = int(self.labels.max()) + 1 if len(self.labels) else 0
        order = np.argsort(self.labels, kind="stable")
        lab = self.labels[order]
        bounds = np.searchsorted(lab, np.arange(n + 1))
        return [order[bounds[i]:bounds[i + 1]] for i in range(n)]

    @property
    def noise(self) -> np.ndarray:
        return np.nonzero(self.labels < 0)[0]


def dbscan(events: np.ndarray, eps: float, min_pts: int) -> Clustering:
    """DBSCAN on event pixel coordinates.

    Events sharing a pixel have identical neighbourhoods, so the search runs
    on unique pixels weighted by multiplicity and is mapped back. Border
    points join the cluster of their lowest-index core neighbour; clusters
    are numbered in order of their first core event.
    """
    n = len(events)
    if n == 0:
        return Clustering(np.zeros(0, dtype=np.int64))
    x = events["x"].astype(np.int64)
    y = events["y"].astype(np.int64)
    key = x * (int(y.max()) + 1) + y
    ukey, first, inverse, counts = np.unique(key, return_index=True, return_inverse=True,
                                             return_counts=True)
    inverse = inverse.ravel()
    m = len(ukey)
    uxy = np.column_stack([x[first], y[first]]).astype(float)
    tree = cKDTree(uxy)
    # tiny slack so integer lattice distances exactly equal to eps are included
    pairs = tree.query_pairs(eps + 1e-9, output_type="ndarray")
    a = np.concatenate([pairs[:, 0], pairs[:, 1]])
    b = np.concatenate([pairs[:, 1], pairs[:, 0]])
    weight = counts + np.bincount(a, weights=counts[b], minlength=m).astype(np.int64)
    core = weight >= min_pts

    pix_label = np.full(m, -1, dtype=np.int64)
    core_idx = np.nonzero(core)[0]
    if len(core_idx):
        cc = core[a] & core[b]
        graph = coo_matrix((np.ones(int(cc.sum())), (a[cc], b[cc])), shape=(m, m))
        _, comp = connected_components(graph, directed=False)
        # number clusters by the earliest event index among their core pixels
        earliest = np.full(m, np.iinfo(np.int64).max)
        np.minimum.at(earliest, comp[core_idx], first[core_idx])
        used = np.unique(comp[core_idx])
        rank = np.empty(m, dtype=np.int64)
        rank[used[np.argsort(earliest[used], kind="stable")]] = np.arange(len(used))
        pix_label[core_idx] = rank[comp[core_idx]]
        # border pixels take the cluster of their earliest core neighbour
        bd = ~core[a] & core[b]
        if bd.any():
            ba, bb = a[bd], b[bd]
            order = np.lexsort((first[bb], ba))
            ba, bb = ba[order], bb[order]
            lead = np.ones(len(ba), dtype=bool)
            lead[1:] = ba[1:] != ba[:-1]
            pix_label[ba[lead]] = pix_label[bb[lead]]
    return Clustering(pix_label[inverse])


def dbscan_bruteforce(xy: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """O(N^2) reference DBSCAN on raw points; same border rule as :func:`dbscan`."""
    n = len(xy)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    pts = np.asarray(xy, dtype=float)
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    adj = d2 <= eps * eps + 1e-9
    core = adj.sum(1) >= min_pts
    labels = np.full(n, -1, dtype=np.int64)
    k = 0
    for i in range(n):
        if not core[i] or labels[i] >= 0:
            continue
        labels[i] = k
        stack = [i]
        while stack:
            j = stack.pop()
            for m in np.nonzero(adj[j] & core)[0]:
                if labels[m] < 0:
                    labels[m] = k
                    stack.append(m)
        k += 1
    for i in np.nonzero(~core)[0]:
        nb = np.nonzero(adj[i] & core)[0]
        if len(nb):
            labels[i] = labels[nb.min()]
    return labels


def shape_ratio(xs: np.ndarray, ys: np.ndarray) -> tuple[float, float, float]:
    """Barycenter and events per unit area of the circle reaching the farthest event."""
    bx, by = float(np.mean(xs)), float(np.mean(ys))
    r2 = float(np.max((xs - bx) ** 2 + (ys - by) ** 2))
    ratio = math.inf if r2 == 0.0 else len(xs) / (math.pi * r2)
    return bx, by, ratio


def passes_filter(n_events: int, ratio: float, params: ClusterParams) -> bool:
    return ratio > params.shape_ratio and params.n_min <= n_events <= params.n_max


def filter_clusters(clusters: list[np.ndarray], events: np.ndarray, params: ClusterParams,
                    window_end_time: int = 0) -> list[Target]:
    xs_all = events["x"].astype(float)
    ys_all = events["y"].astype(float)
    ps_all = events["p"].astype(float)
    out = []
    for idx in clusters:
        n = len(idx)
        if not params.n_min <= n <= params.n_max:
            continue
        bx, by, ratio = shape_ratio(xs_all[idx], ys_all[idx])
        if not passes_filter(n, ratio, params):
            continue
        out.append(Target(bx, by, n, float(ps_all[idx].sum() / n), int(window_end_time)))
    return out


def detect_targets(events: np.ndarray, params: ClusterParams, window_end_time: int = 0) -> list[Target]:
    """Cluster one window and return the filtered targets."""
    if len(events) == 0:
        return []
    return filter_clusters(dbscan(events, params.eps, params.min_pts).clusters, events, params,
                           window_end_time)
