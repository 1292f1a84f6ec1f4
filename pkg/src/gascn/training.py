"""Losses, schedules, Adam, the epoch loop and evaluation."""
from __future__ import annotations

import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape, Tensor
from .data import DatasetManifest, clip_input, read_ply
from .geometry import PointCloud, chamfer_distance, denormalize, normalize_cloud
from .graph import NeighborGraph, build_knn_graph
from .model import ModelConfig, ModelParams, forward

CD_VARIANTS = ("unsquared", "squared")


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr_initial: float = 1e-4
    lr_decay: float = 0.95
    alpha_initial: float = 0.01
    alpha_final: float = 1.0
    alpha_ramp_fraction: float = 0.5
    seed: int = 0
    cd_variant: str = "unsquared"
    max_input_points: int = 3000
    eval_every: int = 20
    deterministic: bool = True
    threads: int = 1

    def __post_init__(self):
        if not 0 < self.alpha_initial <= self.alpha_final:
            raise ValueError("need 0 < alpha_initial <= alpha_final")
        if not 0 < self.alpha_ramp_fraction <= 1:
            raise ValueError("alpha_ramp_fraction must lie in (0, 1]")
        if self.lr_initial <= 0 or self.lr_decay <= 0:
            raise ValueError("learning rate and decay must be positive")
        if self.cd_variant not in CD_VARIANTS:
            raise ValueError(f"cd_variant must be one of {CD_VARIANTS}")
        if self.epochs < 0 or self.batch_size < 1 or self.threads < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and threads >= 1 are required")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------- loss


def chamfer_loss(pred: Tensor, gt, squared: bool = False) -> Tensor:
    """Chamfer distance between a predicted cloud tensor and a fixed target cloud."""
    cd, g_pred, _ = chamfer_distance(pred.data, gt, squared=squared)
    return ad.record((pred,), np.array(cd), lambda g: (g.item() * g_pred,))


class LossBreakdown(NamedTuple):
    loss: Tensor
    coarse_cd: float
    fine_cd: float


def combined_loss(coarse: Tensor, fine: Tensor, gt, alpha: float, cd_variant: str = "unsquared") -> LossBreakdown:
    """Coarse CD plus ``alpha`` times fine CD, both against the same ground truth."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    squared = cd_variant == "squared"
    cd_c = chamfer_loss(coarse, gt, squared)
    cd_f = chamfer_loss(fine, gt, squared)
    return LossBreakdown(ad.add(cd_c, ad.scale(cd_f, alpha)), cd_c.item(), cd_f.item())


# ----------------------------------------------------------------- schedules


def alpha_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Linear ramp from alpha_initial to alpha_final over the first ramp fraction of training."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    ramp_end = cfg.alpha_ramp_fraction * cfg.epochs
    if epoch >= ramp_end:
        return cfg.alpha_final
    return cfg.alpha_initial + (cfg.alpha_final - cfg.alpha_initial) * epoch / ramp_end


def learning_rate(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr_initial * cfg.lr_decay**epoch


# ---------------------------------------------------------------------- Adam


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: OptimizerState, lr: float) -> None:
    """One bias-corrected Adam update, in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"gradient of {name!r} is not finite")
        if g.shape != params[name].shape:
            raise ad.ShapeError(f"gradient of {name!r} has shape {g.shape}, parameter has {params[name].shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        params[name].data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ------------------------------------------------------------------ instances


@dataclass
class Instance:
    """One (partial view, ground truth) pair prepared for the network.

    ``points`` is the clipped partial in its own normalised frame and ``target``
    the ground truth mapped into that frame; ``centroid``/``scale`` undo it.
    """

    shape_id: int
    view: int
    category: str
    points: np.ndarray
    target: np.ndarray
    gt: np.ndarray
    centroid: np.ndarray
    scale: float
    _graph: NeighborGraph | None = field(default=None, repr=False)

    def graph(self, k: int) -> NeighborGraph:
        if self._graph is None or self._graph.k != k:
            self._graph = build_knn_graph(self.points, k)
        return self._graph

    def to_object_frame(self, pts: np.ndarray) -> np.ndarray:
        return denormalize(pts, self.centroid, self.scale)


def prepare_instance(partial: PointCloud, gt: PointCloud, max_points: int, seed: int,
                     shape_id: int = 0, view: int = 0, category: str = "") -> Instance:
    clipped = clip_input(partial, max_points, seed)
    normed, centroid, scale = normalize_cloud(clipped)
    target = (gt.points - centroid) * scale
    return Instance(shape_id, view, category, normed.points, target, gt.points, centroid, scale)


def load_instances(manifest: DatasetManifest, split: str, max_points: int = 3000, seed: int = 0) -> list[Instance]:
    """Every (shape, view) pair of a split, clipped with a per-pair seed."""
    out = []
    for rec in manifest.split(split):
        gt_path, partial_paths = rec.resolve(manifest.root)
        gt = read_ply(gt_path)
        for view, p in enumerate(partial_paths):
            clip_seed = int(np.random.default_rng([seed, rec.shape_id, view]).integers(2**31))
            out.append(prepare_instance(read_ply(p), gt, max_points, clip_seed, rec.shape_id, view, rec.category))
    return out


# ---------------------------------------------------------------- epoch loop


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    alpha: float
    mean_coarse_cd: float
    mean_fine_cd: float
    mean_loss: float
    steps: int
    wall_seconds: float | None = None
    val_fine_cd: float | None = None

    def log_record(self, deterministic: bool) -> dict:
        rec = {
            "epoch": self.epoch, "lr": self.lr, "alpha": self.alpha,
            "mean_coarse_cd": self.mean_coarse_cd, "mean_fine_cd": self.mean_fine_cd,
            "wall_seconds": None if deterministic else self.wall_seconds,
        }
        if self.val_fine_cd is not None:
            rec["val_fine_cd"] = self.val_fine_cd
        return rec


def _instance_grads(params: ModelParams, inst: Instance, model_cfg: ModelConfig, alpha: float,
                    cd_variant: str, weight: float) -> tuple[dict[str, np.ndarray], float, float, float]:
    """Forward/backward one instance on private gradient buffers sharing the weights."""
    shadow = ModelParams({k: Tensor(v.data, requires_grad=True, name=k) for k, v in params.items()})
    where = f"shape {inst.shape_id} view {inst.view}"
    try:
        with Tape() as tape:
            out = forward(inst.points, shadow, model_cfg, inst.graph(model_cfg.input_k))
            lb = combined_loss(out.coarse, out.fine, inst.target, alpha, cd_variant)
            scaled = ad.scale(lb.loss, weight)
    except FloatingPointError as exc:
        raise NonFiniteError(f"{where}: {exc}") from exc
    if not np.isfinite(lb.loss.item()):
        raise NonFiniteError(f"non-finite loss on {where}")
    ad.backward(tape, scaled)
    return {k: t.grad for k, t in shadow.items()}, lb.loss.item(), lb.coarse_cd, lb.fine_cd


def train_epoch(params: ModelParams, instances: Sequence[Instance], model_cfg: ModelConfig,
                cfg: TrainConfig, state: OptimizerState, epoch: int) -> EpochMetrics:
    """One pass over ``instances`` in a seeded shuffled order.

    Gradients are averaged over ``batch_size`` instances before each Adam step.
    Without deterministic mode, instances of a batch run on a thread pool and
    their gradients are summed under a lock in completion order.
    """
    if not instances:
        raise ValueError("training set is empty")
    t0 = time.perf_counter()
    lr, alpha = learning_rate(epoch, cfg), alpha_schedule(epoch, cfg)
    order = np.random.default_rng([cfg.seed, epoch]).permutation(len(instances))
    totals = np.zeros(3)
    steps = 0
    pool = ThreadPoolExecutor(cfg.threads) if (cfg.threads > 1 and not cfg.deterministic) else None
    lock = threading.Lock()
    try:
        for start in range(0, len(order), cfg.batch_size):
            batch = [instances[i] for i in order[start:start + cfg.batch_size]]
            sink = {k: np.zeros_like(t.data) for k, t in params.items()}
            weight = 1.0 / len(batch)

            def run(inst):
                grads, loss, cdc, cdf = _instance_grads(params, inst, model_cfg, alpha, cfg.cd_variant, weight)
                with lock:
                    for k, g in grads.items():
                        sink[k] += g
                    totals[:] += (loss, cdc, cdf)

            if pool is None:
                for inst in batch:
                    run(inst)
            else:
                list(pool.map(run, batch))
            adam_step(params, sink, state, lr)
            steps += 1
    finally:
        if pool is not None:
            pool.shutdown()
    n = len(instances)
    return EpochMetrics(epoch, lr, alpha, totals[1] / n, totals[2] / n, totals[0] / n, steps,
                        time.perf_counter() - t0)


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    overall: float
    per_category: dict[str, float]
    counts: dict[str, int]
    per_instance: list[float]

    def as_dict(self) -> dict:
        return asdict(self)


def complete_instance(params: ModelParams, inst: Instance, model_cfg: ModelConfig):
    """Forward pass without recording; outputs stay in the instance's normalised frame."""
    return forward(inst.points, params, model_cfg, inst.graph(model_cfg.input_k))


def evaluate(params: ModelParams, instances: Sequence[Instance], model_cfg: ModelConfig,
             cd_variant: str = "unsquared",
             predict: Callable[[Instance], np.ndarray] | None = None) -> EvalReport:
    """Mean fine-output CD against ground truth in the object frame, per category and overall.

    ``predict`` overrides the network with any function returning an object-frame cloud.
    """
    if not instances:
        raise ValueError("evaluation set is empty")
    squared = cd_variant == "squared"
    per_inst, by_cat = [], {}
    for inst in instances:
        if predict is None:
            fine = inst.to_object_frame(complete_instance(params, inst, model_cfg).fine.data)
        else:
            fine = predict(inst)
        cd = chamfer_distance(fine, inst.gt, squared=squared)[0]
        per_inst.append(cd)
        by_cat.setdefault(inst.category, []).append(cd)
    per_category = {c: float(np.mean(v)) for c, v in sorted(by_cat.items())}
    counts = {c: len(v) for c, v in sorted(by_cat.items())}
    return EvalReport(float(np.mean(per_inst)), per_category, counts, per_inst)


# ------------------------------------------------------------------- driver


@dataclass
class TrainResult:
    params: ModelParams
    state: OptimizerState
    history: list[EpochMetrics]


def sample_views(instances: Sequence[Instance], seed: int, epoch: int) -> list[Instance]:
    """One randomly chosen view per shape for this epoch."""
    by_shape: dict[int, list[Instance]] = {}
    for inst in instances:
        by_shape.setdefault(inst.shape_id, []).append(inst)
    rng = np.random.default_rng([seed, epoch, 0x5EED])
    return [views[int(rng.integers(len(views)))] for _, views in sorted(by_shape.items())]


def train(params: ModelParams, train_set: Sequence[Instance], model_cfg: ModelConfig, cfg: TrainConfig,
          val_set: Sequence[Instance] | None = None, log_path=None,
          on_eval: Callable[[int, ModelParams], None] | None = None,
          one_view_per_shape: bool = True) -> TrainResult:
    """Run ``cfg.epochs`` epochs, logging one JSON line per epoch.

    With ``one_view_per_shape`` each epoch visits every training shape once
    through a randomly chosen partial view.  Every ``eval_every`` epochs the
    validation set is scored and ``on_eval`` is called (e.g. to checkpoint).
    """
    state = OptimizerState()
    history = []
    log = Path(log_path).open("w") if log_path is not None else None
    try:
        for epoch in range(cfg.epochs):
            subset = sample_views(train_set, cfg.seed, epoch) if one_view_per_shape else list(train_set)
            try:
                metrics = train_epoch(params, subset, model_cfg, cfg, state, epoch)
            except FloatingPointError as exc:
                raise NonFiniteError(f"epoch {epoch}: {exc}") from exc
            done = epoch + 1
            if cfg.eval_every and done % cfg.eval_every == 0:
                if val_set:
                    metrics.val_fine_cd = evaluate(params, val_set, model_cfg, cfg.cd_variant).overall
                if on_eval is not None:
                    on_eval(done, params)
            history.append(metrics)
            if log is not None:
                log.write(json.dumps(metrics.log_record(cfg.deterministic)) + "\n")
                log.flush()
    finally:
        if log is not None:
            log.close()
    return TrainResult(params, state, history)


# ---------------------------------------------------------------- baselines


def fit_mean_shape(gts: Sequence[np.ndarray], n_points: int, steps: int = 300, lr: float = 0.01,
                   batch: int = 16, seed: int = 0, cd_variant: str = "unsquared") -> np.ndarray:
    """A single cloud minimising mean CD to a set of ground truths, found with Adam."""
    rng = np.random.default_rng(seed)
    start = gts[int(rng.integers(len(gts)))]
    pts = Tensor(start[rng.choice(len(start), n_points, replace=len(start) < n_points)].copy(), requires_grad=True)
    holder = ModelParams({"points": pts})
    state = OptimizerState()
    squared = cd_variant == "squared"
    for step in range(steps):
        pick = rng.choice(len(gts), size=min(batch, len(gts)), replace=False)
        grad = np.zeros_like(pts.data)
        for i in pick:
            grad += chamfer_distance(pts.data, gts[i], squared=squared)[1]
        adam_step(holder, {"points": grad / len(pick)}, state, lr * (1.0 - step / steps) + 1e-4)
    return pts.data.copy()
