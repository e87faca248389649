"""Dynamically gated multi-scale ball-query layer.

One layer owns a learned query multiplexer (a linear map from query
features to per-group gating logits), K ball-query groups with their own
radius, sample count and MLP, and a per-group linear aggregation whose
outputs are summed into the layer feature.

Gating runs in two regimes. Inference thresholds the logits at zero and
only the selected queries are transformed. Training perturbs the logits
with a pair of standard Gumbel draws, keeps the hard mask for the values
but routes gradients through the soft likelihood sigma((h + g - g')/tau)
(straight-through), so the multiplexer trains end to end. A smooth
"surrogate" regime, where the forward also uses the likelihood weights,
exists so that finite differences can validate the exact backward code
used in training.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as tc
from .errors import ArgumentError, ConfigError
from .pointops import PointCloud, QuerySet, ball_query, nearest_index
from .timing import PhaseTimer, maybe_phase

MODES = ("infer", "train", "train_dense", "surrogate")
GRANULARITIES = ("pointwise", "shared", "layerwise")

_NOISE_EPS = 1e-10  # uniform draws clamped away from {0, 1} before the double log


@dataclass
class GroupSpec:
    """Static description of one ball-query group."""

    radius: float
    sample_count: int
    mlp_widths: tuple[int, ...]
    out_width: int

    def __post_init__(self):
        if self.radius <= 0:
            raise ConfigError(f"group radius must be positive, got {self.radius}")
        if self.sample_count < 1:
            raise ConfigError(f"group sample count must be >= 1, got {self.sample_count}")
        if not self.mlp_widths:
            raise ConfigError("group needs at least one MLP width")


@dataclass
class MultiplexerParams:
    """Linear gate parameters: w (C, gate_width), b (1, gate_width)."""

    w: tc.Tensor
    b: tc.Tensor


@dataclass
class GatingState:
    """Per-layer gating record, expanded to (N_q, K).

    mask is the binary routing decision; likelihood is the soft
    selection probability used on the gradient path (None at inference);
    noise holds the Gumbel pair that produced the mask.
    """

    logits: np.ndarray
    mask: np.ndarray
    likelihood: Optional[np.ndarray]
    noise: Optional[tuple[np.ndarray, np.ndarray]]
    tau: float


@dataclass
class LayerOutput:
    """Everything one gated layer produced."""

    out_feats: tc.Tensor                      # (N_q, out_width)
    per_group_sparse: list[Optional[tc.Tensor]]  # compacted pooled features
    per_group_dense: list[Optional[tc.Tensor]]   # aggregated, mask-weighted blocks
    gating: GatingState
    row_maps: list[np.ndarray]
    queries: QuerySet
    pi_expanded: Optional[tc.Tensor] = None   # (N_q, K) likelihood on the tape


@dataclass
class DbqLayerParams:
    """Learned state plus configuration of one layer."""

    specs: list[GroupSpec]
    mux: MultiplexerParams
    group_mlps: list[list[tuple[tc.Tensor, tc.Tensor]]]
    aggs: list[tc.Tensor]                     # bias-free (W_k, out_width) maps
    granularity: str = "pointwise"
    tau: float = 1.0
    dynamic: bool = True

    @property
    def k(self) -> int:
        return len(self.specs)

    @property
    def out_width(self) -> int:
        return self.specs[0].out_width


def init_layer_params(rng: np.random.Generator, in_channels: int,
                      specs: Sequence[GroupSpec], granularity: str = "pointwise",
                      tau: float = 1.0, dynamic: bool = True,
                      dtype=tc.STANDARD) -> DbqLayerParams:
    """Kaiming-uniform MLP/aggregation weights; gate bias starts at +1.

    The positive gate bias keeps most queries active early in training,
    which protects the task loss from query starvation while the budget
    term is still finding its level.
    """
    specs = list(specs)
    if len(specs) > 1:
        radii = [s.radius for s in specs]
        if any(b <= a for a, b in zip(radii, radii[1:])):
            raise ConfigError(f"group radii must be strictly increasing, got {radii}")
    if len({s.out_width for s in specs}) != 1:
        raise ConfigError("all groups in a layer must share out_width")
    if granularity not in GRANULARITIES:
        raise ConfigError(f"unknown gate granularity {granularity!r}")

    def kaiming(fan_in, fan_out):
        bound = np.sqrt(6.0 / fan_in)
        return tc.parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)), dtype)

    gate_width = len(specs) if granularity == "pointwise" else 1
    mux = MultiplexerParams(
        w=kaiming(in_channels, gate_width),
        b=tc.parameter(np.ones((1, gate_width)), dtype),
    )
    group_mlps = []
    aggs = []
    for spec in specs:
        widths = [3 + in_channels, *spec.mlp_widths]
        layers = []
        for cin, cout in zip(widths, widths[1:]):
            layers.append((kaiming(cin, cout), tc.parameter(np.zeros((1, cout)), dtype)))
        group_mlps.append(layers)
        aggs.append(kaiming(spec.mlp_widths[-1], spec.out_width))
    return DbqLayerParams(specs, mux, group_mlps, aggs, granularity, tau, dynamic)


def layer_named_parameters(prefix: str, lp: DbqLayerParams) -> dict[str, tc.Tensor]:
    out = {f"{prefix}.mux.w": lp.mux.w, f"{prefix}.mux.b": lp.mux.b}
    for k, layers in enumerate(lp.group_mlps):
        for j, (w, b) in enumerate(layers):
            out[f"{prefix}.g{k}.mlp{j}.w"] = w
            out[f"{prefix}.g{k}.mlp{j}.b"] = b
    for k, a in enumerate(lp.aggs):
        out[f"{prefix}.g{k}.agg.w"] = a
    return out


# ---------------------------------------------------------------------------
# gating primitives


def multiplexer_logits(query_feats: tc.Tensor, params: MultiplexerParams) -> tc.Tensor:
    """Gating logits h = query_feats @ W + b, one column per gate."""
    return tc.linear(query_feats, params.w, params.b)


def gate_inference(logits: np.ndarray) -> np.ndarray:
    """Hard step gate; the h == 0 boundary maps to 1 (on)."""
    return (np.asarray(logits) >= 0).astype(np.int8)


def draw_gumbel_pair(shape, rng: np.random.Generator,
                     dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    """Two independent standard Gumbel fields of the given shape."""
    u = rng.uniform(size=(2,) + tuple(shape))
    u = np.clip(u, _NOISE_EPS, 1.0 - _NOISE_EPS)
    g = -np.log(-np.log(u)).astype(dtype)
    return g[0], g[1]


def gate_train(logits: np.ndarray, tau: float, rng: np.random.Generator,
               noise: Optional[tuple[np.ndarray, np.ndarray]] = None,
               ) -> tuple[np.ndarray, np.ndarray, tuple[np.ndarray, np.ndarray]]:
    """Stochastic gate: mask = step(h + g - g'), likelihood = sigma((h+g-g')/tau).

    Returns (mask, likelihood, (g, g')). The likelihood and the mask agree
    by construction: likelihood >= 0.5 exactly when the mask is 1.
    """
    if tau <= 0:
        raise ArgumentError(f"temperature must be positive, got {tau}")
    h = np.asarray(logits, dtype=np.float64)
    if noise is None:
        noise = draw_gumbel_pair(h.shape, rng)
    g, gp = noise
    shifted = h + g - gp
    mask = (shifted >= 0).astype(np.int8)
    z = np.clip(shifted / tau, -tc._SIGMOID_CLAMP, tc._SIGMOID_CLAMP)
    likelihood = 1.0 / (1.0 + np.exp(-z))
    return mask, likelihood, (g, gp)


def _expand_gate(raw: np.ndarray, n_q: int, k: int) -> np.ndarray:
    """Broadcast a gate-width array (numpy) out to (N_q, K)."""
    if raw.shape == (n_q, k):
        return raw
    if raw.shape == (n_q, 1):
        return np.repeat(raw, k, axis=1)
    if raw.shape == (1, 1):
        return np.full((n_q, k), raw[0, 0], dtype=raw.dtype)
    raise ArgumentError(f"cannot expand gate shape {raw.shape} to ({n_q}, {k})")


def _expand_gate_tensor(raw: tc.Tensor, n_q: int, k: int) -> tc.Tensor:
    """Tape-aware version of `_expand_gate` (gradients sum back)."""
    if raw.shape == (n_q, k):
        return raw
    if raw.shape == (n_q, 1):
        out = np.repeat(raw.data, k, axis=1)
        return tc.record(out, (raw,), lambda g: (g.sum(axis=1, keepdims=True),))
    if raw.shape == (1, 1):
        out = np.full((n_q, k), raw.data[0, 0], dtype=raw.data.dtype)
        return tc.record(out, (raw,), lambda g: (g.sum().reshape(1, 1),))
    raise ArgumentError(f"cannot expand gate shape {raw.shape} to ({n_q}, {k})")


def st_blend(z: tc.Tensor, pi: tc.Tensor, mask_col: np.ndarray, hard: bool) -> tc.Tensor:
    """Straight-through mask application on one group's dense block.

    Forward multiplies rows by the hard mask (or by the likelihood in the
    smooth surrogate regime). Backward always treats the output as
    likelihood * z: the block gradient is scaled by pi and the likelihood
    receives the channel-summed feature gradient.
    """
    maskf = np.asarray(mask_col).astype(z.data.dtype).reshape(-1, 1)
    factor = maskf if hard else pi.data
    out = z.data * factor

    def backward(g):
        gz = (g * pi.data).astype(z.data.dtype)
        gpi_full = g * z.data
        if pi.shape == (1, 1):
            gpi = gpi_full.sum().reshape(1, 1)
        else:
            gpi = gpi_full.sum(axis=1, keepdims=True)
        return gz, gpi.astype(pi.data.dtype)

    return tc.record(out, (z, pi), backward)


def mask_rows(z: tc.Tensor, mask_col: np.ndarray) -> tc.Tensor:
    """Zero out rows by a fixed mask, no gating gradient path."""
    maskf = np.asarray(mask_col).astype(z.data.dtype).reshape(-1, 1)
    return tc.record(z.data * maskf, (z,), lambda g: (g * maskf,))


# ---------------------------------------------------------------------------
# sparse pipeline


def sparse_select(q_coords: np.ndarray, mask: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Compact the coordinates of queries routed to group k.

    Returns (coords, row_map); original row order is preserved so the
    remap is a plain scatter.
    """
    rows = np.flatnonzero(np.asarray(mask)[:, k])
    return np.asarray(q_coords)[rows], rows


def group_transform(sparse_coords: np.ndarray, cloud_coords: np.ndarray,
                    cloud_feats: tc.Tensor, spec: GroupSpec,
                    mlp_params: Sequence[tuple[tc.Tensor, tc.Tensor]],
                    timings: Optional[PhaseTimer] = None) -> tc.Tensor:
    """Ball query + grouping + shared MLP + neighborhood max pool.

    Produces the compacted (M, mlp_widths[-1]) feature block for one
    group; an empty selection yields an empty block.
    """
    m = sparse_coords.shape[0]
    width = spec.mlp_widths[-1]
    if m == 0:
        return tc.constant(np.zeros((0, width)), dtype=cloud_feats.data.dtype)
    with maybe_phase(timings, "query_group"):
        geo = PointCloud(cloud_coords, cloud_feats.data)
        table = ball_query(sparse_coords, geo, spec.radius, spec.sample_count)
        rel = (cloud_coords[table.indices] - sparse_coords[:, None, :])
        rel_t = tc.constant(rel, dtype=cloud_feats.data.dtype)
        gathered = tc.gather_neighbors(cloud_feats, table.indices)
        grouped = tc.concat_last(rel_t, gathered)
    with maybe_phase(timings, "mlp"):
        hidden = tc.mlp_apply(mlp_params, grouped)
        return tc.max_pool_neighbors(hidden)


def remap_aggregate(blocks: Sequence[Optional[tc.Tensor]],
                    row_maps: Sequence[np.ndarray],
                    mask: np.ndarray,
                    pi_expanded: Optional[tc.Tensor],
                    aggs: Sequence[tc.Tensor],
                    n_q: int, mode: str, dtype) -> tuple[tc.Tensor, list[Optional[tc.Tensor]]]:
    """Scatter each sparse block dense, aggregate, gate, and sum groups.

    Rows blocked by a group stay exactly zero in that group's dense
    block (the aggregation is bias-free). Training modes apply the
    straight-through blend; inference needs no blend because the scatter
    already zeroes unselected rows.
    """
    out_width = aggs[0].shape[1]
    dense_blocks: list[Optional[tc.Tensor]] = []
    total: Optional[tc.Tensor] = None
    for k, (block, rows) in enumerate(zip(blocks, row_maps)):
        if block is None or block.shape[0] == 0:
            dense_blocks.append(None)
            continue
        dense = tc.scatter_rows(block, rows, n_q)
        z_k = tc.matmul(dense, aggs[k])
        if mode in ("train", "train_dense", "surrogate") and pi_expanded is not None:
            pi_col = tc.column(pi_expanded, k)
            z_k = st_blend(z_k, pi_col, mask[:, k], hard=(mode != "surrogate"))
        elif mode == "train_dense":
            z_k = mask_rows(z_k, mask[:, k])
        dense_blocks.append(z_k)
        total = z_k if total is None else tc.add(total, z_k)
    if total is None:
        total = tc.constant(np.zeros((n_q, out_width)), dtype=dtype)
    return total, dense_blocks


def _resolve_override(gate_override, n_q: int, k: int) -> np.ndarray:
    if isinstance(gate_override, str):
        if gate_override == "all_on":
            return np.ones((n_q, k), dtype=np.int8)
        if gate_override == "all_off":
            return np.zeros((n_q, k), dtype=np.int8)
        raise ArgumentError(f"unknown gate override {gate_override!r}")
    mask = np.asarray(gate_override).astype(np.int8)
    if mask.shape != (n_q, k):
        raise ArgumentError(f"gate override shape {mask.shape} != ({n_q}, {k})")
    return mask


def sa_layer_forward(cloud_coords: np.ndarray, cloud_feats: tc.Tensor,
                     queries: QuerySet, lp: DbqLayerParams, mode: str = "infer",
                     rng: Optional[np.random.Generator] = None,
                     noise: Optional[tuple[np.ndarray, np.ndarray]] = None,
                     gate_override=None,
                     timings: Optional[PhaseTimer] = None) -> LayerOutput:
    """Run one gated set-abstraction layer.

    Query features are looked up by nearest sampling (an identity gather
    here, since queries are always drawn from the cloud), the multiplexer
    scores every (query, group) pair, and each group transforms only its
    selected queries. `noise` freezes the Gumbel draws for gradient
    checks; `gate_override` forces a mask (string "all_on"/"all_off" or
    an explicit (N_q, K) array) and disconnects the gating gradient.
    """
    if mode not in MODES:
        raise ArgumentError(f"unknown layer mode {mode!r}")
    n_q = len(queries)
    k = lp.k
    dtype = cloud_feats.data.dtype

    with maybe_phase(timings, "gate"):
        if queries.source_index is not None:
            qfeats = tc.gather_rows(cloud_feats, queries.source_index)
        else:
            idx = nearest_index(queries.coords, cloud_coords)
            qfeats = tc.gather_rows(cloud_feats, idx)

        if lp.granularity == "layerwise":
            logits = multiplexer_logits(tc.mean_rows(qfeats), lp.mux)
        else:
            logits = multiplexer_logits(qfeats, lp.mux)

        pi_expanded: Optional[tc.Tensor] = None
        noise_exp = None
        if gate_override is not None or not lp.dynamic:
            override = "all_on" if gate_override is None else gate_override
            mask_exp = _resolve_override(override, n_q, k)
            likelihood = None
        elif mode == "infer":
            mask_exp = _expand_gate(gate_inference(logits.data), n_q, k)
            likelihood = None
        else:
            if noise is None:
                if rng is None:
                    raise ArgumentError("training modes need an rng or frozen noise")
                noise = draw_gumbel_pair(logits.shape, rng)
            g, gp = noise
            if g.shape != logits.shape:
                raise ArgumentError(f"noise shape {g.shape} != logit shape {logits.shape}")
            delta = tc.constant(g - gp, dtype=dtype)
            mask_raw = ((logits.data + delta.data) >= 0).astype(np.int8)
            pi_raw = tc.sigmoid(tc.scale(tc.add(logits, delta), 1.0 / lp.tau))
            mask_exp = _expand_gate(mask_raw, n_q, k)
            pi_expanded = _expand_gate_tensor(pi_raw, n_q, k)
            likelihood = pi_expanded.data
            noise_exp = (_expand_gate(np.asarray(g, dtype=np.float64), n_q, k),
                         _expand_gate(np.asarray(gp, dtype=np.float64), n_q, k))

    blocks: list[Optional[tc.Tensor]] = []
    row_maps: list[np.ndarray] = []
    for gi, spec in enumerate(lp.specs):
        if mode == "train_dense":
            rows = np.arange(n_q, dtype=np.int64)
            coords_k = queries.coords
        else:
            coords_k, rows = sparse_select(queries.coords, mask_exp, gi)
        row_maps.append(rows)
        if rows.size == 0:
            blocks.append(None)
            continue
        blocks.append(group_transform(coords_k, cloud_coords, cloud_feats,
                                      spec, lp.group_mlps[gi], timings=timings))

    with maybe_phase(timings, "mlp"):
        out, dense_blocks = remap_aggregate(blocks, row_maps, mask_exp, pi_expanded,
                                            lp.aggs, n_q, mode, dtype)

    gating = GatingState(
        logits=_expand_gate(np.asarray(logits.data, dtype=np.float64), n_q, k),
        mask=mask_exp,
        likelihood=likelihood,
        noise=noise_exp,
        tau=lp.tau,
    )
    return LayerOutput(out, blocks, dense_blocks, gating, row_maps, queries,
                       pi_expanded=pi_expanded)


def msg_sa_forward(cloud_coords: np.ndarray, cloud_feats: tc.Tensor,
                   queries: QuerySet, lp: DbqLayerParams) -> tc.Tensor:
    """Static multi-scale grouping baseline: every group, every query.

    Shares parameters with the gated layer; used as the reference the
    gated layer must reproduce when every gate is on.
    """
    n_q = len(queries)
    total = None
    for spec, mlp, agg in zip(lp.specs, lp.group_mlps, lp.aggs):
        pooled = group_transform(queries.coords, cloud_coords, cloud_feats, spec, mlp)
        z_k = tc.matmul(pooled, agg)
        total = z_k if total is None else tc.add(total, z_k)
    assert total is not None
    return total


def gating_stats_rows(layer: int, step: int, gating: GatingState) -> list[tuple]:
    """CSV rows (layer, group, step, active_count, total, ratio)."""
    rows = []
    n_q, k = gating.mask.shape
    for gi in range(k):
        active = int(gating.mask[:, gi].sum())
        ratio = active / n_q if n_q else 0.0
        rows.append((layer, gi, step, active, n_q, ratio))
    return rows
