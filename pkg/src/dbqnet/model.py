"""Encoder-only detector: stacked gated SA layers plus a toy point head.

The encoder samples queries (fan-split farthest point sampling at the
first layer, score top-k afterwards), runs a gated set-abstraction layer
per stage, and predicts a per-query foreground score and a 3-d center
offset. The training loop couples the task loss with the measured
latency budget and logs one metrics row per step.

All randomness is counter-based: every stream is seeded from
(master seed, stream id, step/epoch/index), so resuming from a
checkpoint replays the exact same noise and data order.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import tensor as tc
from .budget import (BudgetConfig, LatencyMap, LayerWorkload, LossBreakdown,
                     latency_ratio, psi_tensor, total_loss)
from .data import Scene
from .dbq import (DbqLayerParams, GroupSpec, LayerOutput, init_layer_params,
                  layer_named_parameters, sa_layer_forward)
from .errors import ConfigError, DataError, NumericError
from .pointops import PointCloud, QuerySet, fan_fps, fps, topk_by_score
from .timing import PhaseTimer, maybe_phase

# rng stream ids (first entry after the master seed)
_STREAM_INIT = 0
_STREAM_DATA = 1
_STREAM_GUMBEL = 2

ASSIGN_RADIUS = 2.0  # meters; queries closer than this to a box center are foreground

SAMPLERS = ("fan_fps", "fps", "topk")


@dataclass
class LayerConfig:
    sampler: str
    n_queries: int
    radii: tuple[float, ...]
    samples: tuple[int, ...]
    mlp: tuple[int, ...]
    out: int
    fans: int = 4
    dynamic: bool = True

    def __post_init__(self):
        if self.sampler not in SAMPLERS:
            raise ConfigError(f"unknown sampler {self.sampler!r}")
        if len(self.radii) != len(self.samples):
            raise ConfigError("radii and samples must have one entry per group")


@dataclass
class EncoderConfig:
    layers: list[LayerConfig]
    head_hidden: int = 64
    gate_granularity: str = "pointwise"
    tau: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("encoder needs at least one layer")
        n_qs = [layer.n_queries for layer in self.layers]
        if any(b > a for a, b in zip(n_qs, n_qs[1:])):
            raise ConfigError(f"query counts must be non-increasing, got {n_qs}")


def default_encoder_config(seed: int = 0) -> EncoderConfig:
    """Three gated layers, two groups each, radii (0.2,0.8)/(0.8,1.6)/(1.6,4.8).

    Sized for 16,384-point scenes with a 4096 -> 1024 -> 256 query
    schedule; the first layer samples with 4-fan split FPS, later layers
    with score top-k.
    """
    return EncoderConfig(layers=[
        LayerConfig("fan_fps", 4096, (0.2, 0.8), (16, 32), (32, 32), 32),
        LayerConfig("topk", 1024, (0.8, 1.6), (16, 32), (64, 64), 64),
        LayerConfig("topk", 256, (1.6, 4.8), (16, 32), (128, 128), 128),
    ])


@dataclass
class Prediction:
    scores: np.ndarray        # (N_q,) foreground probability
    offsets: np.ndarray       # (N_q, 3) predicted center - query coordinate
    cls_logits: tc.Tensor
    offsets_t: tc.Tensor


@dataclass
class ForwardResult:
    prediction: Prediction
    layer_outputs: list[LayerOutput]
    stage_sources: list[np.ndarray]       # per stage, indices into the input cloud
    aux_logits: list[Optional[tc.Tensor]]  # top-k score logits per layer (None if unused)
    final_coords: np.ndarray
    timings: Optional[PhaseTimer] = None

    def masks(self) -> list[np.ndarray]:
        return [lo.gating.mask for lo in self.layer_outputs]


class Encoder:
    """Owns all learned tensors; construction is seed-deterministic."""

    def __init__(self, cfg: EncoderConfig, in_channels: int = 1, dtype=tc.STANDARD):
        self.cfg = cfg
        self.in_channels = in_channels
        self.dtype = dtype
        rng = np.random.default_rng([cfg.seed, _STREAM_INIT])

        def kaiming(fan_in, fan_out, gain=1.0):
            bound = gain * np.sqrt(6.0 / fan_in)
            return tc.parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)), dtype)

        self.layers: list[DbqLayerParams] = []
        self.aux_heads: list[Optional[tuple[tc.Tensor, tc.Tensor]]] = []
        chan = in_channels
        for lcfg in cfg.layers:
            if lcfg.sampler == "topk":
                self.aux_heads.append((kaiming(chan, 1, gain=0.1),
                                       tc.parameter(np.zeros((1, 1)), dtype)))
            else:
                self.aux_heads.append(None)
            specs = [GroupSpec(r, s, tuple(lcfg.mlp), lcfg.out)
                     for r, s in zip(lcfg.radii, lcfg.samples)]
            self.layers.append(init_layer_params(
                rng, chan, specs, cfg.gate_granularity, cfg.tau, lcfg.dynamic, dtype))
            chan = lcfg.out

        hidden = cfg.head_hidden
        self.head_trunk = [(kaiming(chan, hidden), tc.parameter(np.zeros((1, hidden)), dtype))]
        self.cls_head = (kaiming(hidden, 1, gain=0.1), tc.parameter(np.zeros((1, 1)), dtype))
        self.off_head = (kaiming(hidden, 3, gain=0.1), tc.parameter(np.zeros((1, 3)), dtype))

    def named_parameters(self) -> dict[str, tc.Tensor]:
        out: dict[str, tc.Tensor] = {}
        for i, lp in enumerate(self.layers):
            out.update(layer_named_parameters(f"l{i}", lp))
            aux = self.aux_heads[i]
            if aux is not None:
                out[f"aux{i}.w"], out[f"aux{i}.b"] = aux
        for j, (w, b) in enumerate(self.head_trunk):
            out[f"head.trunk{j}.w"] = w
            out[f"head.trunk{j}.b"] = b
        out["head.cls.w"], out["head.cls.b"] = self.cls_head
        out["head.off.w"], out["head.off.b"] = self.off_head
        return out

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()


def build_encoder(cfg: EncoderConfig, in_channels: int = 1, dtype=tc.STANDARD) -> Encoder:
    return Encoder(cfg, in_channels, dtype)


def forward(model: Encoder, cloud: PointCloud, mode: str = "infer",
            rng: Optional[np.random.Generator] = None,
            noise_per_layer: Optional[Sequence] = None,
            gate_override=None,
            timings: Optional[PhaseTimer] = None) -> ForwardResult:
    """Run the full encoder plus heads on one cloud.

    `gate_override` may be a single value applied to every layer or a
    per-layer list; `noise_per_layer` freezes the Gumbel draws (training
    modes only). Stage source indices trace every surviving point back
    to the input cloud for the redundancy statistics.
    """
    n_layers = len(model.layers)
    if cloud.n < model.cfg.layers[0].n_queries:
        raise DataError(
            f"cloud has {cloud.n} points but the first layer samples "
            f"{model.cfg.layers[0].n_queries}")
    if cloud.c != model.in_channels:
        raise DataError(f"cloud has {cloud.c} channels, model expects {model.in_channels}")

    coords = cloud.coords
    feats = tc.constant(cloud.feats, dtype=model.dtype)
    source = np.arange(cloud.n, dtype=np.int64)

    overrides = (gate_override if isinstance(gate_override, (list, tuple))
                 else [gate_override] * n_layers)
    noises = noise_per_layer if noise_per_layer is not None else [None] * n_layers

    layer_outputs: list[LayerOutput] = []
    stage_sources: list[np.ndarray] = [source]
    aux_logits: list[Optional[tc.Tensor]] = []

    for li, (lcfg, lp) in enumerate(zip(model.cfg.layers, model.layers)):
        with maybe_phase(timings, "sample"):
            if lcfg.sampler == "fan_fps":
                qs = fan_fps(coords, lcfg.n_queries, lcfg.fans)
                aux_logits.append(None)
            elif lcfg.sampler == "fps":
                qs = fps(coords, lcfg.n_queries)
                aux_logits.append(None)
            else:  # topk over an auxiliary per-point score head
                aux_w, aux_b = model.aux_heads[li]
                scores = tc.linear(feats, aux_w, aux_b)
                idx = topk_by_score(scores.data.reshape(-1), lcfg.n_queries)
                aux_logits.append(scores)
                qs = QuerySet(coords[idx], idx)

        lo = sa_layer_forward(coords, feats, qs, lp, mode=mode, rng=rng,
                              noise=noises[li], gate_override=overrides[li],
                              timings=timings)
        layer_outputs.append(lo)
        source = source[qs.source_index]
        stage_sources.append(source)
        coords = qs.coords
        feats = lo.out_feats

    with maybe_phase(timings, "head"):
        trunk = tc.mlp_apply(model.head_trunk, feats)
        cls_logits = tc.linear(trunk, *model.cls_head)
        offsets = tc.linear(trunk, *model.off_head)
        scores = 1.0 / (1.0 + np.exp(-np.clip(cls_logits.data.reshape(-1), -40, 40)))

    pred = Prediction(scores, offsets.data, cls_logits, offsets)
    return ForwardResult(pred, layer_outputs, stage_sources, aux_logits,
                         final_coords=coords, timings=timings)


# ---------------------------------------------------------------------------
# losses and metrics


def assign_targets(query_coords: np.ndarray, scene: Scene,
                   radius: float = ASSIGN_RADIUS) -> tuple[np.ndarray, np.ndarray]:
    """Nearest ground-truth assignment within `radius` meters.

    Returns (fg flags, offset targets); offsets are zero for background.
    """
    q = np.asarray(query_coords, dtype=np.float64)
    if not scene.boxes:
        return np.zeros(q.shape[0], dtype=bool), np.zeros((q.shape[0], 3), np.float32)
    centers = np.stack([b.center for b in scene.boxes])
    d = np.linalg.norm(q[:, None, :] - centers[None, :, :], axis=-1)
    nearest = np.argmin(d, axis=1)
    fg = d[np.arange(q.shape[0]), nearest] <= radius
    offsets = (centers[nearest] - q).astype(np.float32)
    offsets[~fg] = 0.0
    return fg, offsets


def task_loss(pred: Prediction, query_coords: np.ndarray,
              scene: Scene) -> tuple[tc.Tensor, dict]:
    """Foreground cross-entropy plus smooth-L1 center offsets (1:1).

    The offset term only sees foreground-assigned queries; with none in
    the batch it is exactly zero and the classification term remains.
    """
    fg, off_targets = assign_targets(query_coords, scene)
    cls = tc.bce_with_logits_mean(pred.cls_logits, fg.astype(np.float64))
    fg_rows = np.flatnonzero(fg)
    if fg_rows.size:
        off = tc.smooth_l1_mean(tc.gather_rows(pred.offsets_t, fg_rows),
                                off_targets[fg_rows])
        loss = tc.add(cls, off)
        off_value = off.item()
        # predicted center minus true center, per foreground query
        err = np.linalg.norm(pred.offsets[fg_rows] - off_targets[fg_rows], axis=1)
        center_err = float(err.mean())
    else:
        loss = cls
        off_value = 0.0
        center_err = 0.0
    acc = float(((pred.scores >= 0.5) == fg).mean())
    parts = {"cls": cls.item(), "offset": off_value, "fg_acc": acc,
             "center_err": center_err, "fg": fg}
    return loss, parts


def aux_sampling_loss(result: ForwardResult, scene: Scene) -> Optional[tc.Tensor]:
    """Cross-entropy supervising each top-k score head on its stage labels."""
    terms = []
    for li, scores in enumerate(result.aux_logits):
        if scores is None:
            continue
        stage_labels = scene.fg_label[result.stage_sources[li]]
        terms.append(tc.bce_with_logits_mean(scores, stage_labels.astype(np.float64)))
    if not terms:
        return None
    out = terms[0]
    for t in terms[1:]:
        out = tc.add(out, t)
    return out


def activation_stats(per_layer_masks: Sequence[np.ndarray]) -> list[dict[str, float]]:
    """Routing-pattern histogram per layer; ratios sum to exactly 1.0.

    With K=2 the patterns are kill / small_only / large_only / both
    (group 0 carries the smaller radius); other K generalize to the
    2^K on/off patterns keyed by their bit string.
    """
    stats = []
    for mask in per_layer_masks:
        mask = np.asarray(mask)
        n_q, k = mask.shape
        pattern = (mask.astype(np.int64) * (1 << np.arange(k))).sum(axis=1)
        counts = np.bincount(pattern, minlength=1 << k)
        if k == 2:
            names = ["kill", "small_only", "large_only", "both"]
        else:
            names = ["".join(str((p >> b) & 1) for b in range(k))
                     for p in range(1 << k)]
        total = counts.sum()
        ratios = {}
        running = 0.0
        for name, c in zip(names[:-1], counts[:-1]):
            r = c / total if total else 0.0
            ratios[name] = r
            running += r
        ratios[names[-1]] = (1.0 - running) if total else 0.0
        stats.append(ratios)
    return stats


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adaptive-moment descent over the model's named parameters."""

    def __init__(self, params: dict[str, tc.Tensor], lr: float = 1e-3,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * (g * g)
            m_hat = self.m[name] / bias1
            v_hat = self.v[name] / bias2
            p.data = p.data - (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)


def onecycle_lr(step: int, total_steps: int, lr_max: float,
                pct_start: float = 0.3) -> float:
    """Linear warmup to lr_max, cosine decay to lr_max / 100."""
    if total_steps <= 1:
        return lr_max
    warm = max(1, int(total_steps * pct_start))
    if step < warm:
        return lr_max * (0.1 + 0.9 * step / warm)
    frac = (step - warm) / max(1, total_steps - warm)
    return lr_max * (0.01 + 0.99 * 0.5 * (1.0 + np.cos(np.pi * frac)))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 4
    lr: float = 1e-3
    batch: int = 4
    onecycle: bool = True
    aux_weight: float = 1.0
    seed: int = 0
    expected_cost: bool = False   # ablation: budget forward uses summed likelihoods
    dense_gradients: bool = False  # ablation: transform all rows so blocked gates learn


@dataclass
class TrainState:
    model: Encoder
    optimizer: Adam
    step: int = 0


METRIC_COLUMNS = ("epoch", "step", "task_loss", "budget_loss", "total", "psi",
                  "act", "fg_acc", "center_err")


def metrics_header(n_layers: int) -> list[str]:
    cols = ["epoch", "step", "task_loss", "budget_loss", "total", "psi"]
    cols += [f"act_l{i + 1}" for i in range(n_layers)]
    cols += ["fg_acc", "center_err"]
    return cols


def train(model: Encoder, scenes: Sequence[Scene], tcfg: TrainConfig,
          bcfg: BudgetConfig, lmap: Optional[LatencyMap] = None,
          state: Optional[TrainState] = None,
          max_steps: Optional[int] = None,
          ) -> tuple[TrainState, list[list]]:
    """Optimize the model on a scene list; returns state and metric rows.

    Scene order reshuffles per epoch, Gumbel noise is drawn per step,
    and both are derived from (seed, stream, counter) so a run can be
    reproduced or resumed bit-for-bit from a checkpoint. Training aborts
    with a state dump if the loss goes non-finite.
    """
    if bcfg.lam > 0 and lmap is None:
        raise ConfigError("budget training (lambda > 0) needs a calibrated latency map")
    if state is None:
        state = TrainState(model, Adam(model.named_parameters(), lr=tcfg.lr))
    opt = state.optimizer
    n_layers = len(model.layers)
    mode = "train_dense" if tcfg.dense_gradients else "train"

    steps_per_epoch = max(1, len(scenes) // tcfg.batch)
    total_steps = steps_per_epoch * tcfg.epochs
    rows: list[list] = []

    while state.step < total_steps:
        if max_steps is not None and len(rows) >= max_steps:
            break
        step = state.step
        epoch = step // steps_per_epoch
        order = np.random.default_rng([tcfg.seed, _STREAM_DATA, epoch]).permutation(len(scenes))
        start = (step % steps_per_epoch) * tcfg.batch
        batch_ids = order[start:start + tcfg.batch]
        noise_rng = np.random.default_rng([tcfg.seed, _STREAM_GUMBEL, step])

        model.zero_grad()
        with tc.Tape() as tape:
            task_terms = []
            psi_terms = []
            mask_lists = []
            accs, errs = [], []
            for sid in batch_ids:
                scene = scenes[int(sid)]
                result = forward(model, scene.cloud, mode=mode, rng=noise_rng)
                t_loss, parts = task_loss(result.prediction, result.final_coords, scene)
                aux = aux_sampling_loss(result, scene)
                if aux is not None and tcfg.aux_weight > 0:
                    t_loss = tc.add(t_loss, tc.scale(aux, tcfg.aux_weight))
                task_terms.append(t_loss)
                accs.append(parts["fg_acc"])
                errs.append(parts["center_err"])
                mask_lists.append(result.masks())
                if lmap is not None:
                    psi_terms.append(psi_tensor(
                        [lo.pi_expanded for lo in result.layer_outputs],
                        result.masks(), lmap, expected=tcfg.expected_cost))

            task_mean = task_terms[0]
            for t in task_terms[1:]:
                task_mean = tc.add(task_mean, t)
            task_mean = tc.scale(task_mean, 1.0 / len(task_terms))

            if lmap is not None:
                psi_mean = psi_terms[0]
                for t in psi_terms[1:]:
                    psi_mean = tc.add(psi_mean, t)
                psi_mean = tc.scale(psi_mean, 1.0 / len(psi_terms))
                loss, breakdown = total_loss(task_mean, psi_mean, bcfg)
            else:
                loss = task_mean
                breakdown = LossBreakdown(task=task_mean.item(), budget=0.0,
                                          total=task_mean.item(), psi=float("nan"))

            if not np.isfinite(loss.item()):
                tc.save_checkpoint("diverged_state.ckpt", checkpoint_arrays(state))
                raise NumericError(
                    f"loss diverged at step {step}; state dumped to diverged_state.ckpt")
            tape.backward(loss)

        lr = onecycle_lr(step, total_steps, tcfg.lr) if tcfg.onecycle else tcfg.lr
        opt.step(lr)
        state.step += 1

        act = [float(np.mean([m[li].mean() for m in mask_lists]))
               for li in range(n_layers)]
        rows.append([epoch, step, breakdown.task, breakdown.budget, breakdown.total,
                     breakdown.psi, *act, float(np.mean(accs)), float(np.mean(errs))])
    return state, rows


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model: Encoder, scenes: Sequence[Scene],
             lmap: Optional[LatencyMap] = None,
             gate_override=None) -> dict:
    """Inference metrics: detection quality, gating activity, speed.

    Per-scene wall time is measured around the un-instrumented forward.
    Psi is recomputed from the exported masks against the latency map,
    which keeps the logged and recomputed values trivially identical.
    """
    tp = fp = fn = tn = 0
    center_errs = []
    psis = []
    wall = []
    act_sums = None
    mask_accum: list[list[np.ndarray]] = []
    for scene in scenes:
        t0 = time.perf_counter()
        result = forward(model, scene.cloud, mode="infer", gate_override=gate_override)
        wall.append(time.perf_counter() - t0)
        fg, off_t = assign_targets(result.final_coords, scene)
        pred_fg = result.prediction.scores >= 0.5
        tp += int(np.sum(pred_fg & fg))
        fp += int(np.sum(pred_fg & ~fg))
        fn += int(np.sum(~pred_fg & fg))
        tn += int(np.sum(~pred_fg & ~fg))
        if fg.any():
            err = np.linalg.norm(result.prediction.offsets[fg] - off_t[fg], axis=1)
            center_errs.append(float(err.mean()))
        masks = result.masks()
        mask_accum.append(masks)
        acts = np.array([m.mean() for m in masks])
        act_sums = acts if act_sums is None else act_sums + acts
        if lmap is not None:
            psis.append(latency_ratio(masks, lmap))
    n = len(scenes)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return {
        "n_scenes": n,
        "fg_precision": precision,
        "fg_recall": recall,
        "fg_accuracy": (tp + tn) / max(1, tp + tn + fp + fn),
        "center_err": float(np.mean(center_errs)) if center_errs else 0.0,
        "psi": float(np.mean(psis)) if psis else float("nan"),
        "wall_time_per_scene": float(np.median(wall)),
        "activation_per_layer": list(np.asarray(act_sums) / n),
        "masks_per_scene": mask_accum,
    }


# ---------------------------------------------------------------------------
# checkpointing


def checkpoint_arrays(state: TrainState) -> dict[str, np.ndarray]:
    named = {name: p.data for name, p in state.model.named_parameters().items()}
    out = dict(named)
    for name in named:
        out[f"opt.m.{name}"] = state.optimizer.m[name]
        out[f"opt.v.{name}"] = state.optimizer.v[name]
    out["trainstate.step"] = np.array([state.step], dtype=np.float32)
    return out


def save_state(path, state: TrainState) -> None:
    tc.save_checkpoint(path, checkpoint_arrays(state))


def load_state(path, model: Encoder, tcfg: Optional[TrainConfig] = None) -> TrainState:
    """Restore parameters, moments and the step counter into a fresh state."""
    arrays = tc.load_checkpoint(path)
    params = model.named_parameters()
    opt = Adam(params, lr=tcfg.lr if tcfg else 1e-3)
    for name, p in params.items():
        if name not in arrays:
            raise ConfigError(f"checkpoint is missing parameter {name!r}")
        if arrays[name].shape != p.data.shape:
            raise ConfigError(
                f"checkpoint shape {arrays[name].shape} != model shape {p.data.shape} "
                f"for {name!r}")
        p.data = arrays[name].astype(model.dtype)
        if f"opt.m.{name}" in arrays:
            opt.m[name] = arrays[f"opt.m.{name}"].astype(model.dtype)
            opt.v[name] = arrays[f"opt.v.{name}"].astype(model.dtype)
    step = int(arrays.get("trainstate.step", np.zeros(1))[0])
    opt.t = step
    return TrainState(model, opt, step)


def encoder_workloads(model: Encoder, n_points: int,
                      extent: float = 20.0) -> list[LayerWorkload]:
    """Per-layer calibration sizing for a given input cloud size."""
    out = []
    n_cloud = n_points
    chan = model.in_channels
    for lcfg, lp in zip(model.cfg.layers, model.layers):
        out.append(LayerWorkload(lp, n_cloud=n_cloud, n_queries=lcfg.n_queries,
                                 in_channels=chan, extent=extent))
        n_cloud = lcfg.n_queries
        chan = lcfg.out
    return out
