"""Three-stage training schedule over the offset and refinement modules.

Stage one fits the offset predictor alone against the coarse GT tier.
Stage two freezes it bitwise and fits the refiner against the mid and fine
tiers.  Stage three trains both jointly with the stage-two loss.  Both
module parameter vectors live in one flat checkpointed vector; freezing is
enforced by giving the frozen half structurally zero gradients and then
splicing its bytes back after every optimizer step.

Every run is deterministic: batch selection derives from (seed, stage,
step), Adam starts each stage with fresh moments, and a checkpoint resume
continues the exact trajectory.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .completion import (
    DEFAULT_FPS_COUNT,
    DEFAULT_POINTS_PER_RAY,
    DEFAULT_SPLIT_FACTORS,
    CompletionTrace,
    RefinementPlan,
    build_offset_graph,
    build_refine_graph,
    complete,
    init_predictor,
    init_refiner,
    predictor_layout,
    refiner_layout,
)
from .data import PairSizes, SamplePair
from .errors import DatasetEmpty
from .geometry import (
    DEFAULT_CONSTRAINT_ALPHA,
    DEFAULT_CONSTRAINT_BASE,
    OffsetConstraint,
    build_rays,
)
from .metrics import chamfer
from .net import (
    AdamState,
    Gradient,
    NetParams,
    adam_step,
    clip_gradient,
    layout_size,
    save_checkpoint,
)

STAGES = ("offset_pretrain", "refine_pretrain", "joint")

DEFAULT_LR = 1e-3
DEFAULT_STEPS = 2000
DEFAULT_BATCH = 8
CLIP_NORM = 1.0


@dataclass(frozen=True)
class TrainConfig:
    """One stage's schedule plus the model geometry it trains."""

    stage: str
    lr: float = DEFAULT_LR
    steps: int = DEFAULT_STEPS
    batch: int = DEFAULT_BATCH
    seed: int = 0
    sizes: PairSizes = PairSizes()
    points_per_ray: int = DEFAULT_POINTS_PER_RAY
    fps_count: int = DEFAULT_FPS_COUNT
    split_factors: tuple[int, ...] = DEFAULT_SPLIT_FACTORS
    alpha: float = DEFAULT_CONSTRAINT_ALPHA
    base: float = DEFAULT_CONSTRAINT_BASE
    no_adjustment: bool = False
    fixed_bound: float | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if not self.lr > 0.0:
            raise ValueError("lr must be > 0")
        if self.points_per_ray < 1:
            raise ValueError("points_per_ray must be >= 1")
        object.__setattr__(self, "split_factors", tuple(int(k) for k in self.split_factors))

    @property
    def stage_index(self) -> int:
        return STAGES.index(self.stage) + 1

    @property
    def plan(self) -> RefinementPlan:
        return RefinementPlan(
            fps_count=self.fps_count,
            split_factors=self.split_factors,
            constraint=OffsetConstraint(
                alpha=self.alpha, base=self.base, layer_count=len(self.split_factors)
            ),
        )


@dataclass(frozen=True)
class TrainState:
    """Combined parameter vector (predictor then refiner) plus optimizer."""

    params: NetParams
    adam: AdamState


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(parts).generate_state(1)[0])


def combined_layout(config: TrainConfig):
    return predictor_layout(config.points_per_ray) + refiner_layout(config.split_factors)


def split_params(params: NetParams, config: TrainConfig) -> tuple[NetParams, NetParams]:
    """Slice the combined vector back into predictor and refiner params."""
    p_layout = predictor_layout(config.points_per_ray)
    r_layout = refiner_layout(config.split_factors)
    n_pred = layout_size(p_layout)
    if params.count != n_pred + layout_size(r_layout):
        raise ValueError("parameter vector does not match this configuration")
    pred = NetParams(values=params.values[:n_pred], layout=p_layout, rng_seed=params.rng_seed)
    ref = NetParams(values=params.values[n_pred:], layout=r_layout, rng_seed=params.rng_seed)
    return pred, ref


def init_state(config: TrainConfig) -> TrainState:
    pred = init_predictor(_derive_seed(config.seed, 101), config.points_per_ray)
    ref = init_refiner(_derive_seed(config.seed, 102), config.split_factors)
    params = NetParams(
        values=np.concatenate([pred.values, ref.values]),
        layout=combined_layout(config),
        rng_seed=config.seed,
    )
    return TrainState(params=params, adam=AdamState.fresh(params.count))


def loss_stage1(trace: CompletionTrace, gt1) -> float:
    """Chamfer of both coarse clouds against the low-resolution tier."""
    return chamfer(trace.p_first, gt1) + chamfer(trace.p_initial, gt1)


def loss_stage2(trace: CompletionTrace, gt2, gt3) -> float:
    """Chamfer of the mid cloud against gt2 plus the final against gt3."""
    return chamfer(trace.p_mid, gt2) + chamfer(trace.p_final, gt3)


def complete_pair(config: TrainConfig, params: NetParams, pair: SamplePair) -> CompletionTrace:
    """Run the full pipeline on one sample with this configuration."""
    pred, ref = split_params(params, config)
    return complete(
        pair.partial,
        pair.cam,
        pred,
        ref,
        config.plan,
        no_adjustment=config.no_adjustment,
        fixed_bound=config.fixed_bound,
    )


def _sample_loss_grad(config: TrainConfig, params: NetParams, pair: SamplePair):
    """Loss value and combined-vector gradient for one sample."""
    pred, ref = split_params(params, config)
    n_pred, n_ref = pred.count, ref.count
    rays = build_rays(pair.cam, pair.partial)
    stage = config.stage

    train_pred = stage in ("offset_pretrain", "joint")
    og = build_offset_graph(
        rays, pred, trainable=train_pred, no_adjustment=config.no_adjustment
    )
    if stage == "offset_pretrain":
        gt1 = pair.gt_tiers[0].points
        loss = ad.add(
            ad.chamfer_to_const(og.p_first, gt1), ad.chamfer_to_const(og.p_initial, gt1)
        )
        ad.backward(loss)
        grad = np.concatenate([og.tensors.flat_grad().values, np.zeros(n_ref)])
        return float(loss.data), grad

    rg = build_refine_graph(
        og.p_initial,
        ad.reshape(og.o_final, (og.o_final.data.size,)),
        config.plan,
        ref,
        trainable=True,
        fixed_bound=config.fixed_bound,
    )
    loss = ad.add(
        ad.chamfer_to_const(rg.p_mid, pair.gt_tiers[1].points),
        ad.chamfer_to_const(rg.p_final, pair.gt_tiers[2].points),
    )
    ad.backward(loss)
    if train_pred:
        grad = np.concatenate(
            [og.tensors.flat_grad().values, rg.tensors.flat_grad().values]
        )
    else:
        grad = np.concatenate([np.zeros(n_pred), rg.tensors.flat_grad().values])
    return float(loss.data), grad


def _frozen_slice(config: TrainConfig):
    n_pred = layout_size(predictor_layout(config.points_per_ray))
    if config.stage == "offset_pretrain":
        return slice(n_pred, None)
    if config.stage == "refine_pretrain":
        return slice(0, n_pred)
    return None


def _cosine_lr(config: TrainConfig, step: int) -> float:
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * step / max(config.steps, 1)))


def run_stage(
    config: TrainConfig,
    dataset: Sequence[SamplePair],
    state: TrainState | None = None,
    *,
    start_step: int = 0,
    stop_step: int | None = None,
    log_path=None,
    ckpt_dir=None,
) -> tuple[TrainState, list[dict]]:
    """Train one stage; returns the new state and per-step log entries.

    With ``state=None`` a fresh model is initialized.  ``stop_step`` pauses
    the stage early without changing the schedule, and ``start_step`` resumes
    it from a loaded checkpoint; batch selection and learning rate depend
    only on (seed, stage, step), so a paused-and-resumed run retraces the
    uninterrupted one bitwise.  Adam moments are taken as given on resume but
    start fresh at step 0 so that momentum from an earlier stage cannot move
    frozen parameters.
    """
    if len(dataset) == 0:
        raise DatasetEmpty("cannot train on an empty dataset")
    if state is None:
        state = init_state(config)
    params, adam = state.params, state.adam
    if start_step == 0 and adam.step != 0:
        adam = AdamState.fresh(params.count)
    stop = config.steps if stop_step is None else min(stop_step, config.steps)
    frozen = _frozen_slice(config)
    log: list[dict] = []
    log_fh = open(log_path, "a") if log_path is not None else None
    try:
        for step in range(start_step, stop):
            rng = np.random.default_rng(
                np.random.SeedSequence((config.seed, config.stage_index, step))
            )
            ids = rng.integers(0, len(dataset), size=config.batch)
            total_loss = 0.0
            grad_sum = np.zeros(params.count)
            for i in ids:
                loss, grad = _sample_loss_grad(config, params, dataset[int(i)])
                total_loss += loss
                grad_sum += grad
            grad = clip_gradient(Gradient(grad_sum / config.batch), CLIP_NORM)
            lr = _cosine_lr(config, step)
            new_params, adam = adam_step(params, grad, lr, adam)
            if frozen is not None:
                vals = np.array(new_params.values)
                vals[frozen] = params.values[frozen]
                new_params = NetParams(
                    values=vals, layout=params.layout, rng_seed=params.rng_seed
                )
            params = new_params
            entry = {
                "step": step,
                "stage": config.stage,
                "loss": total_loss / config.batch,
                "lr": lr,
            }
            log.append(entry)
            if log_fh is not None:
                log_fh.write(json.dumps(entry) + "\n")
    finally:
        if log_fh is not None:
            log_fh.close()
    out = TrainState(params=params, adam=adam)
    if ckpt_dir is not None:
        ckpt_dir = Path(ckpt_dir)
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt_dir / f"{config.stage}_{stop}.ckpt", out.params, out.adam)
    return out, log


def train_all(
    base: TrainConfig,
    dataset: Sequence[SamplePair],
    *,
    log_path=None,
    ckpt_dir=None,
) -> tuple[TrainState, list[dict]]:
    """Run the three stages in order from a fresh model."""
    state = init_state(base)
    logs: list[dict] = []
    for stage in STAGES:
        config = replace(base, stage=stage)
        state, log = run_stage(
            config, dataset, state, log_path=log_path, ckpt_dir=ckpt_dir
        )
        logs.extend(log)
    return state, logs
