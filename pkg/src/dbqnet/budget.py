"""Measured-latency budget: calibration, the latency ratio, and the loss.

A latency map records, for every (layer, group), the wall time of the
group's ball-query + grouping + MLP + pooling block as a function of the
number of active queries. The map is measured on this machine with a
median-of-reps timer and made monotone with an isotonic fix-up, so the
ratio of active cost to full cost ("psi") is well defined and
non-decreasing in every gate count.

The ratio itself is discrete in the masks. Following the layer's
straight-through treatment, the forward uses hard counts while the
backward substitutes the summed likelihoods and the local interpolation
slope, which is exactly the gradient of the optional expected-cost
forward (useful for finite-difference checks and ablation).
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as tc
from .dbq import DbqLayerParams, group_transform
from .errors import ArgumentError, CalibrationError, ConfigError

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None

UNPINNED_ENV = "DBQNET_UNPINNED_CALIBRATION"


@dataclass
class BudgetConfig:
    """Loss weights: total = task + lam * |psi - gamma|."""

    lam: float = 0.1
    gamma: float = 0.0
    batch_average: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must be in [0, 1], got {self.gamma}")


@dataclass
class LossBreakdown:
    task: float
    budget: float
    total: float
    psi: float


@dataclass
class LatencyMap:
    """Per (layer, group) monotone tables of query count -> milliseconds.

    Every table starts at (0, 0.0) by convention (a block with zero
    queries is skipped entirely) and ends at the layer's full query
    count. Lookups interpolate piecewise-linearly.
    """

    tables: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]]
    header: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for key, (counts, ms) in self.tables.items():
            counts = np.asarray(counts, dtype=np.float64)
            ms = np.asarray(ms, dtype=np.float64)
            if counts.shape != ms.shape or counts.size < 2:
                raise ConfigError(f"latency table {key} needs >= 2 aligned samples")
            if counts[0] != 0 or ms[0] != 0:
                raise ConfigError(f"latency table {key} must start at (0, 0)")
            if np.any(np.diff(counts) <= 0):
                raise ConfigError(f"latency table {key} counts must strictly increase")
            if np.any(np.diff(ms) < 0) or np.any(ms < 0):
                raise ConfigError(f"latency table {key} must be isotonic and non-negative")
            self.tables[key] = (counts, ms)

    def _table(self, layer: int, group: int):
        try:
            return self.tables[(layer, group)]
        except KeyError:
            raise ConfigError(f"latency map has no entry for layer {layer} group {group}")

    def interp(self, layer: int, group: int, count: float) -> float:
        counts, ms = self._table(layer, group)
        return float(np.interp(count, counts, ms))

    def slope(self, layer: int, group: int, at: float) -> float:
        """Slope of the segment containing `at` (right segment at knots)."""
        counts, ms = self._table(layer, group)
        j = int(np.searchsorted(counts, at, side="right")) - 1
        j = min(max(j, 0), counts.size - 2)
        return float((ms[j + 1] - ms[j]) / (counts[j + 1] - counts[j]))

    def full_cost(self, layer: int, group: int) -> float:
        counts, ms = self._table(layer, group)
        return float(ms[-1])

    def full_count(self, layer: int, group: int) -> int:
        counts, _ = self._table(layer, group)
        return int(counts[-1])

    def keys(self):
        return sorted(self.tables.keys())


def isotonic_fit(y: np.ndarray) -> np.ndarray:
    """Least-squares non-decreasing fit (pool adjacent violators)."""
    vals: list[float] = []
    wts: list[float] = []
    for v in np.asarray(y, dtype=np.float64):
        vals.append(float(v))
        wts.append(1.0)
        while len(vals) > 1 and vals[-2] > vals[-1]:
            v2, w2 = vals.pop(), wts.pop()
            v1, w1 = vals.pop(), wts.pop()
            vals.append((v1 * w1 + v2 * w2) / (w1 + w2))
            wts.append(w1 + w2)
    out = np.empty(len(y), dtype=np.float64)
    i = 0
    for v, w in zip(vals, wts):
        out[i:i + int(w)] = v
        i += int(w)
    return out


# ---------------------------------------------------------------------------
# calibration


@dataclass
class LayerWorkload:
    """Synthetic sizing of one layer for calibration."""

    lp: DbqLayerParams
    n_cloud: int
    n_queries: int
    in_channels: int
    extent: float = 20.0  # synthetic cube side, meters


def default_counts(n_queries: int) -> list[int]:
    raw = [1, n_queries // 8, n_queries // 4, n_queries // 2,
           (3 * n_queries) // 4, n_queries]
    return sorted({c for c in raw if c >= 1})


def calibrate_latency_map(workloads: Sequence[LayerWorkload],
                          counts_per_layer: Optional[Sequence[Sequence[int]]] = None,
                          reps: int = 9, warmup: int = 2, seed: int = 0,
                          pinned: bool = True,
                          device_desc: str = "cpu") -> LatencyMap:
    """Measure each group block at several query counts and build the map.

    Runs the actual group transform (forward only) on synthetic uniform
    data of the layer's input size; records the median of `reps` timed
    runs after `warmup` untimed ones, then forces each table monotone.
    Calibration pins BLAS to one thread unless the DBQNET_UNPINNED_CALIBRATION
    environment override is set, in which case the header carries a warning.
    """
    if reps < 1 or warmup < 0:
        raise ArgumentError("calibration needs reps >= 1 and warmup >= 0")
    unpinned_override = os.environ.get(UNPINNED_ENV, "") not in ("", "0")
    use_pin = pinned and not unpinned_override

    header = {
        "device": device_desc,
        "pinned": "single-thread" if use_pin else "UNPINNED (timing may be noisy)",
        "reps": str(reps),
        "warmup": str(warmup),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }

    def run_all() -> dict[tuple[int, int], tuple[np.ndarray, np.ndarray]]:
        rng = np.random.default_rng(seed)
        tables = {}
        for li, wl in enumerate(workloads):
            counts = (list(counts_per_layer[li]) if counts_per_layer is not None
                      else default_counts(wl.n_queries))
            counts = sorted(set(int(c) for c in counts))
            if not counts or counts[0] < 1 or counts[-1] != wl.n_queries:
                raise ArgumentError(
                    f"layer {li} counts must be >= 1 and include the full {wl.n_queries}")
            cloud_coords = rng.uniform(-wl.extent / 2, wl.extent / 2,
                                       size=(wl.n_cloud, 3)).astype(np.float32)
            feats = tc.constant(
                rng.standard_normal((wl.n_cloud, wl.in_channels)), dtype=np.float32)
            q_coords = cloud_coords[rng.choice(wl.n_cloud, size=wl.n_queries,
                                               replace=False)]
            for gi, spec in enumerate(wl.lp.specs):
                ms_list = []
                for c in counts:
                    sub = q_coords[:c]
                    for _ in range(warmup):
                        group_transform(sub, cloud_coords, feats, spec, wl.lp.group_mlps[gi])
                    samples = []
                    for _ in range(reps):
                        t0 = time.perf_counter_ns()
                        group_transform(sub, cloud_coords, feats, spec, wl.lp.group_mlps[gi])
                        samples.append(time.perf_counter_ns() - t0)
                    med = float(np.median(samples)) / 1e6
                    if med <= 0.0:
                        raise CalibrationError(
                            f"timer resolution too coarse at layer {li} group {gi} "
                            f"count {c}; increase reps (currently {reps})")
                    ms_list.append(med)
                full_counts = np.array([0] + counts, dtype=np.float64)
                fixed = isotonic_fit(np.array(ms_list))
                full_ms = np.concatenate([[0.0], np.maximum(fixed, 0.0)])
                tables[(li, gi)] = (full_counts, full_ms)
        return tables

    if use_pin and threadpool_limits is not None:
        with threadpool_limits(limits=1):
            tables = run_all()
    else:
        tables = run_all()
    return LatencyMap(tables, header)


# ---------------------------------------------------------------------------
# the ratio and the losses


def latency_ratio(masks_per_layer: Sequence[np.ndarray], lmap: LatencyMap) -> float:
    """Active-cost over full-cost across all layers and groups.

    `masks_per_layer[l]` is the (N_q, K) gate mask of layer l. Both sums
    run in the same key order, so an all-on mask gives exactly 1.0 and
    all-off gives exactly 0.0.
    """
    num = 0.0
    den = 0.0
    for li, mask in enumerate(masks_per_layer):
        mask = np.asarray(mask)
        for gi in range(mask.shape[1]):
            num += lmap.interp(li, gi, float(mask[:, gi].sum()))
            den += lmap.full_cost(li, gi)
    if den <= 0:
        raise ConfigError("latency map has zero total cost")
    return num / den


def latency_ratio_batch(batch_masks: Sequence[Sequence[np.ndarray]],
                        lmap: LatencyMap) -> float:
    """Mean ratio over a batch of per-layer mask lists."""
    if not batch_masks:
        raise ArgumentError("empty batch")
    return float(np.mean([latency_ratio(m, lmap) for m in batch_masks]))


def psi_tensor(pi_per_layer: Sequence[Optional[tc.Tensor]],
               mask_per_layer: Sequence[np.ndarray],
               lmap: LatencyMap, expected: bool = False) -> tc.Tensor:
    """Differentiable latency ratio for the training loss.

    Forward uses hard mask counts (or summed likelihoods when
    `expected`); backward always distributes the local table slope at
    the summed likelihoods, scaled by the full-cost denominator, to
    every likelihood entry. Layers gated by override (pi None) count by
    mask and contribute no gradient.
    """
    den = 0.0
    for li, mask in enumerate(mask_per_layer):
        for gi in range(np.asarray(mask).shape[1]):
            den += lmap.full_cost(li, gi)
    if den <= 0:
        raise ConfigError("latency map has zero total cost")

    num = 0.0
    slopes: list[Optional[np.ndarray]] = []
    live_inputs: list[tc.Tensor] = []
    live_slots: list[int] = []
    dtype = None
    for li, (pi, mask) in enumerate(zip(pi_per_layer, mask_per_layer)):
        mask = np.asarray(mask)
        k = mask.shape[1]
        if pi is None:
            for gi in range(k):
                num += lmap.interp(li, gi, float(mask[:, gi].sum()))
            slopes.append(None)
            continue
        dtype = pi.data.dtype
        layer_slopes = np.empty(k, dtype=np.float64)
        for gi in range(k):
            soft_count = float(pi.data[:, gi].sum())
            hard_count = float(mask[:, gi].sum())
            num += lmap.interp(li, gi, soft_count if expected else hard_count)
            layer_slopes[gi] = lmap.slope(li, gi, soft_count) / den
        slopes.append(layer_slopes)
        live_slots.append(li)
        live_inputs.append(pi)

    out = np.asarray([num / den], dtype=dtype if dtype is not None else np.float64)

    def backward(g):
        grads = []
        for li, pi in zip(live_slots, live_inputs):
            layer_slopes = slopes[li]
            gpi = np.broadcast_to(layer_slopes[None, :] * float(g[0]),
                                  pi.shape).astype(pi.data.dtype)
            grads.append(gpi)
        return grads

    return tc.record(out, live_inputs, backward)


def budget_loss(psi: float, gamma: float) -> float:
    """|psi - gamma|; its subgradient is sign(psi - gamma), 0 at equality."""
    return abs(psi - gamma)


def total_loss(task: tc.Tensor, psi: tc.Tensor,
               cfg: BudgetConfig) -> tuple[tc.Tensor, LossBreakdown]:
    """Compose task + lam * |psi - gamma| on the tape, with a breakdown."""
    budget_t = tc.abs_diff(psi, cfg.gamma)
    total_t = tc.add(task, tc.scale(budget_t, cfg.lam))
    breakdown = LossBreakdown(task=task.item(), budget=budget_t.item(),
                              total=total_t.item(), psi=psi.item())
    return total_t, breakdown


# ---------------------------------------------------------------------------
# map file: '# key: value' header lines, then 'layer,group,count,ms' rows


def save_latency_map(path, lmap: LatencyMap) -> None:
    with open(path, "w") as fh:
        for key, value in lmap.header.items():
            fh.write(f"# {key}: {value}\n")
        fh.write("layer,group,count,ms\n")
        for (li, gi) in lmap.keys():
            counts, ms = lmap.tables[(li, gi)]
            for c, m in zip(counts, ms):
                fh.write(f"{li},{gi},{int(c)},{m!r}\n")


def load_latency_map(path) -> LatencyMap:
    header: dict[str, str] = {}
    rows: dict[tuple[int, int], list[tuple[float, float]]] = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].partition(":")
                header[key.strip()] = value.strip()
                continue
            if line.startswith("layer,"):
                continue
            li, gi, c, m = line.split(",")
            rows.setdefault((int(li), int(gi)), []).append((float(c), float(m)))
    tables = {}
    for key, pairs in rows.items():
        pairs.sort()
        counts = np.array([p[0] for p in pairs])
        ms = np.array([p[1] for p in pairs])
        tables[key] = (counts, ms)
    return LatencyMap(tables, header)


def uniform_unit_map(layer_group_counts: Sequence[tuple[int, int, int]]) -> LatencyMap:
    """Synthetic linear map (1 ms per query) for tests and map-less eval.

    `layer_group_counts` lists (layer, group, full_count).
    """
    tables = {}
    for li, gi, n in layer_group_counts:
        tables[(li, gi)] = (np.array([0.0, float(n)]), np.array([0.0, float(n)]))
    return LatencyMap(tables, {"device": "synthetic", "pinned": "n/a",
                               "reps": "0", "warmup": "0"})
