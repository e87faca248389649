"""Geometric kernels for the point-based pipeline.

Sampling (farthest-point and its fan-split variant, score top-k),
neighbor search (ball query, nearest sample), grouping, and the
stage-level redundancy statistics. Everything here is pure numpy and
deterministic; distance work is done in float64 regardless of the
storage dtype so tie rules are stable.

Neighbor search is a brute-force O(N_q * N) scan, chunked over queries
to bound memory. At desk scale (N <= 65,536) this is fast enough, and
the latency calibration measures whatever kernel exists, so the budget
machinery is indifferent to the kernel choice.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DataError

_CHUNK = 1024  # query rows per distance-matrix chunk


@dataclass
class PointCloud:
    """Coordinates (N, 3) in meters plus per-point features (N, C)."""

    coords: np.ndarray
    feats: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords)
        self.feats = np.asarray(self.feats)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise DataError(f"coords must be (N, 3), got {self.coords.shape}")
        if self.feats.ndim != 2 or self.feats.shape[0] != self.coords.shape[0]:
            raise DataError(
                f"feats must be (N, C) with N={self.coords.shape[0]}, got {self.feats.shape}")
        if self.n > 0 and not np.all(np.isfinite(self.coords)):
            raise DataError("coordinates contain non-finite values")

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def c(self) -> int:
        return self.feats.shape[1]


@dataclass
class QuerySet:
    """Sampled query coordinates and their indices into the parent cloud."""

    coords: np.ndarray        # (N_q, 3)
    source_index: np.ndarray  # (N_q,) unique indices into the parent

    def __len__(self) -> int:
        return self.coords.shape[0]


@dataclass
class NeighborTable:
    """Ball-query result: up to phi in-radius neighbors per query row.

    For row i the first valid_count[i] entries are distinct in-radius
    point indices in ascending index order; remaining slots repeat the
    first valid entry. valid_count[i] == 0 marks an empty ball, whose
    slots all repeat the query's nearest point so downstream grouping
    stays defined.
    """

    indices: np.ndarray      # (N_q, phi) int64
    valid_count: np.ndarray  # (N_q,) int64 in [0, phi]

    @property
    def phi(self) -> int:
        return self.indices.shape[1]

    def empty_rows(self) -> np.ndarray:
        return self.valid_count == 0


def _pairwise_sq_dists(queries: np.ndarray, points: np.ndarray) -> np.ndarray:
    """(Q, N) squared distances in float64, via explicit differences."""
    q = queries.astype(np.float64, copy=False)
    p = points.astype(np.float64, copy=False)
    d2 = np.zeros((q.shape[0], p.shape[0]), dtype=np.float64)
    for axis in range(3):
        diff = q[:, axis:axis + 1] - p[None, :, axis]
        d2 += diff * diff
    return d2


def fps(coords: np.ndarray, m: int, seed: int = 0) -> QuerySet:
    """Greedy max-min farthest point sampling.

    Starts at `seed`, then repeatedly picks the point with the largest
    distance to the selected set; ties break toward the lowest index.
    """
    coords = np.asarray(coords)
    n = coords.shape[0]
    if not 1 <= m <= n:
        raise ArgumentError(f"fps needs 1 <= M <= N, got M={m}, N={n}")
    if not 0 <= seed < n:
        raise ArgumentError(f"fps seed {seed} out of range for N={n}")
    c = coords.astype(np.float64, copy=False)
    selected = np.empty(m, dtype=np.int64)
    selected[0] = seed
    d2 = ((c - c[seed]) ** 2).sum(axis=1)
    d2[seed] = -1.0  # never re-pick selected points
    for i in range(1, m):
        nxt = int(np.argmax(d2))  # first max == lowest index on ties
        selected[i] = nxt
        nd2 = ((c - c[nxt]) ** 2).sum(axis=1)
        np.minimum(d2, nd2, out=d2)
        d2[nxt] = -1.0
    return QuerySet(coords[selected], selected)


def sector_index(coords: np.ndarray, fans: int) -> np.ndarray:
    """Azimuthal sector of each point by atan2(y, x).

    Sector j covers angles in (-pi + j*w, -pi + (j+1)*w] with w = 2*pi/fans,
    so boundary points land in the lower sector; angle -pi is folded to +pi.
    """
    a = np.arctan2(coords[:, 1].astype(np.float64), coords[:, 0].astype(np.float64))
    a = np.where(a == -np.pi, np.pi, a)
    width = 2.0 * np.pi / fans
    idx = np.ceil((a + np.pi) / width).astype(np.int64) - 1
    idx = np.clip(idx, 0, fans - 1)
    # post-correct rounding at the half-open boundaries
    lo = -np.pi + idx * width
    idx = np.where(a <= lo, idx - 1, idx)
    hi = -np.pi + (idx + 1) * width
    idx = np.where(a > hi, idx + 1, idx)
    return np.clip(idx, 0, fans - 1)


def fan_fps(coords: np.ndarray, m: int, fans: int = 4) -> QuerySet:
    """Farthest point sampling run independently per azimuthal sector.

    Points are split into `fans` equal angular sectors; each sector runs
    fps for its share of M (seeded at its lowest-index point) and the
    picks are concatenated in sector order. Sectors short on points
    contribute everything they have and the deficit is redistributed
    round-robin to sectors with spare capacity.
    """
    coords = np.asarray(coords)
    n = coords.shape[0]
    if fans < 1:
        raise ArgumentError(f"fans must be >= 1, got {fans}")
    if not 1 <= m <= n:
        raise ArgumentError(f"fan_fps needs 1 <= M <= N, got M={m}, N={n}")
    sectors = sector_index(coords, fans)
    members = [np.flatnonzero(sectors == j) for j in range(fans)]
    sizes = np.array([len(mem) for mem in members])

    targets = np.full(fans, m // fans, dtype=np.int64)
    targets[: m % fans] += 1
    # cap by sector size, handing the deficit round-robin to sectors with room
    targets = np.minimum(targets, sizes)
    deficit = m - int(targets.sum())
    j = 0
    while deficit > 0:
        if targets[j] < sizes[j]:
            targets[j] += 1
            deficit -= 1
        j = (j + 1) % fans

    picks = []
    for mem, t in zip(members, targets):
        if t == 0:
            continue
        local = fps(coords[mem], int(t), seed=0)
        picks.append(mem[local.source_index])
    selected = np.concatenate(picks) if picks else np.empty(0, dtype=np.int64)
    return QuerySet(coords[selected], selected)


def nearest_sample(queries: QuerySet | np.ndarray, cloud: PointCloud) -> np.ndarray:
    """Feature of the nearest cloud point per query; ties pick the lowest index.

    Returns a plain (N_q, C) array. When the queries come from the cloud
    itself this reduces to an identity gather.
    """
    if cloud.n == 0:
        raise ArgumentError("nearest_sample needs a non-empty cloud")
    q = queries.coords if isinstance(queries, QuerySet) else np.asarray(queries)
    idx = nearest_index(q, cloud.coords)
    return cloud.feats[idx]


def nearest_index(queries: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Index of the nearest point per query row (lowest index on ties)."""
    q = np.asarray(queries)
    out = np.empty(q.shape[0], dtype=np.int64)
    for start in range(0, q.shape[0], _CHUNK):
        stop = min(start + _CHUNK, q.shape[0])
        d2 = _pairwise_sq_dists(q[start:stop], points)
        out[start:stop] = np.argmin(d2, axis=1)
    return out


def ball_query(query_coords: np.ndarray, cloud: PointCloud, r: float, phi: int) -> NeighborTable:
    """Up to `phi` cloud points within radius `r` of each query.

    Neighbors are kept in ascending index order; short rows repeat the
    first found neighbor, and empty balls repeat the query's nearest
    point with valid_count 0.
    """
    if r <= 0:
        raise ArgumentError(f"ball radius must be positive, got {r}")
    if phi < 1:
        raise ArgumentError(f"sample count must be >= 1, got {phi}")
    if cloud.n == 0:
        raise ArgumentError("ball_query needs a non-empty cloud")
    q = np.asarray(query_coords)
    nq = q.shape[0]
    indices = np.empty((nq, phi), dtype=np.int64)
    valid = np.empty(nq, dtype=np.int64)
    r2 = float(r) * float(r)
    slots = np.arange(phi, dtype=np.int64)

    for start in range(0, nq, _CHUNK):
        stop = min(start + _CHUNK, nq)
        d2 = _pairwise_sq_dists(q[start:stop], cloud.coords)
        within = d2 <= r2
        cnt = np.cumsum(within, axis=1)
        total = np.minimum(cnt[:, -1], phi)
        take = within & (cnt <= phi)
        rows, cols = np.nonzero(take)
        pos = cnt[rows, cols] - 1

        chunk_idx = np.zeros((stop - start, phi), dtype=np.int64)
        chunk_idx[rows, pos] = cols
        nearest = np.argmin(d2, axis=1)
        fill = np.where(total > 0, chunk_idx[:, 0], nearest)
        pad = slots[None, :] >= total[:, None]
        chunk_idx = np.where(pad, fill[:, None], chunk_idx)

        indices[start:stop] = chunk_idx
        valid[start:stop] = total
    return NeighborTable(indices, valid)


def group_features(table: NeighborTable, query_coords: np.ndarray,
                   cloud: PointCloud) -> np.ndarray:
    """Stack per-neighbor [coord - query_coord, feats]: (N_q, phi, 3 + C)."""
    q = np.asarray(query_coords)
    if table.indices.shape[0] != q.shape[0]:
        raise ArgumentError(
            f"table rows {table.indices.shape[0]} do not align with {q.shape[0]} queries")
    rel = cloud.coords[table.indices] - q[:, None, :]
    if cloud.c == 0:
        return rel
    return np.concatenate([rel, cloud.feats[table.indices]], axis=-1)


def topk_by_score(scores: np.ndarray, m: int) -> np.ndarray:
    """Indices of the M largest scores, descending, ties toward lower index."""
    scores = np.asarray(scores).reshape(-1)
    n = scores.shape[0]
    if m > n:
        raise ArgumentError(f"topk needs M <= N, got M={m}, N={n}")
    # lexsort: primary key descending score, secondary ascending index
    order = np.lexsort((np.arange(n), -scores.astype(np.float64)))
    return order[:m].astype(np.int64)


def background_ratio(stage_indices: np.ndarray, fg_labels: np.ndarray) -> float:
    """Fraction of surviving stage points labeled background."""
    stage_indices = np.asarray(stage_indices, dtype=np.int64)
    fg = np.asarray(fg_labels).astype(bool)
    if stage_indices.size == 0:
        return 0.0
    if stage_indices.min() < 0 or stage_indices.max() >= fg.shape[0]:
        raise ArgumentError("stage indices out of range for the label array")
    return float(np.count_nonzero(~fg[stage_indices])) / stage_indices.size
