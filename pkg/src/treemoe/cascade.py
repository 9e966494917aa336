"""Cascaded shape regression: initialization, augmentation, forward, training.

The cascade starts from the mean shape placed in the face box and applies K
stages of (extract patches at the current shape -> gated representation ->
gated regression -> add displacement). Stages are trained greedily in order;
within a stage, representation, regression and gate parameters train jointly
with ADAM on the squared shape error.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Adam, Tensor, backward, mean, record, square, sub
from .errors import NumericError
from .moe import ModelDims, RegressionBank, build_variant
from .pose import PoseAngles, PoseModel, pose_forward_batch, prepare_pose_inputs
from .representation import RepresentationBank, extract_patches
from .synthdata import BBox, LandmarkDataset, Sample


@dataclass
class TrainConfig:
    """Training hyperparameters; the seed is required for reproducibility."""

    seed: int
    stages: int = 4
    epochs_per_stage: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    translate_sigma: float = 10.0
    scale_sigma: float = 0.1
    flip_prob: float = 0.5
    plateau_tol: float = 1e-4
    plateau_window: int = 3


@dataclass
class CascadeStage:
    rep: RepresentationBank
    reg: RegressionBank

    def named_parameters(self, prefix: str = ""):
        return (self.rep.named_parameters(prefix + "rep/")
                + self.reg.named_parameters(prefix + "reg/"))


@dataclass
class CascadeModel:
    variant: str
    dims: ModelDims
    stages: list[CascadeStage]
    seed: int
    pose_mode: str = "none"               # 'none' | 'oracle' | 'model'
    pose_model: PoseModel | None = None
    mean_shape: np.ndarray | None = None  # filled by train() or checkpoint load
    mean_box_scale: float | None = None

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def named_parameters(self):
        out = []
        for k, stage in enumerate(self.stages):
            out.extend(stage.named_parameters(f"stage{k}/"))
        return out


def build_cascade_model(variant: str, dims: ModelDims, num_stages: int,
                        rng: np.random.Generator, *, pose_mode: str = "none",
                        pose_model: PoseModel | None = None,
                        seed: int = 0) -> CascadeModel:
    """Construct stage parameter banks from independent spawned streams."""
    if num_stages < 1:
        raise ValueError(f"cascade needs at least one stage, got {num_stages}")
    if variant.startswith("pose-") and pose_mode == "none":
        raise ValueError(f"variant {variant} is pose-gated and needs a pose source")
    stages = []
    for stream in rng.spawn(num_stages):
        rep, reg = build_variant(variant, dims, stream)
        stages.append(CascadeStage(rep=rep, reg=reg))
    return CascadeModel(variant=variant, dims=dims, stages=stages, seed=seed,
                        pose_mode=pose_mode, pose_model=pose_model)


def mean_shape(samples) -> np.ndarray:
    """Coordinate-wise mean of the ground-truth shapes."""
    if len(samples) == 0:
        raise ValueError("cannot take the mean shape of an empty training set")
    return np.stack([s.landmarks for s in samples]).mean(axis=0)


def mean_box_scale(samples) -> float:
    return float(np.mean([np.sqrt(s.bbox.h * s.bbox.w) for s in samples]))


def place_initial_shape(mean_shp: np.ndarray, mean_scale: float, bbox: BBox) -> np.ndarray:
    """Mean shape translated to the box center, scaled by relative box size."""
    pts = mean_shp.reshape(-1, 2)
    centroid = pts.mean(axis=0)
    target = np.array([bbox.x + bbox.w / 2.0, bbox.y + bbox.h / 2.0])
    ratio = np.sqrt(bbox.h * bbox.w) / mean_scale
    return ((pts - centroid) * ratio + target).reshape(-1)


def flip_sample(sample: Sample, mirror: np.ndarray) -> Sample:
    """Horizontal mirror: flips pixels, remaps landmarks, negates yaw/roll."""
    W = sample.image.shape[1]
    pts = sample.landmarks.reshape(-1, 2)[mirror].copy()
    pts[:, 0] = (W - 1) - pts[:, 0]
    bbox = BBox(x=(W - 1) - sample.bbox.x - sample.bbox.w, y=sample.bbox.y,
                h=sample.bbox.h, w=sample.bbox.w)
    pose = PoseAngles(-sample.pose.yaw, sample.pose.pitch, -sample.pose.roll)
    return replace(sample, image=np.flip(sample.image, axis=1).copy(),
                   landmarks=pts.reshape(-1), pose=pose, bbox=bbox)


def augment(sample: Sample, rng: np.random.Generator, *, mirror: np.ndarray,
            mean_shp: np.ndarray, mean_scale: float,
            translate_sigma: float = 10.0, scale_sigma: float = 0.1,
            flip_prob: float = 0.5) -> tuple[Sample, np.ndarray]:
    """One augmentation draw: perturbed initial placement plus optional flip.

    Draw order is fixed (tx, ty, scale, flip uniform) so runs are
    reproducible. Returns the (possibly flipped) sample and its perturbed
    initial shape.
    """
    tx = rng.normal(0.0, translate_sigma)
    ty = rng.normal(0.0, translate_sigma)
    s = rng.normal(1.0, scale_sigma)
    flip = rng.uniform() < flip_prob
    if flip:
        sample = flip_sample(sample, mirror)
    init = place_initial_shape(mean_shp, mean_scale, sample.bbox)
    pts = init.reshape(-1, 2)
    centroid = pts.mean(axis=0)
    pts = (pts - centroid) * s + centroid + np.array([tx, ty])
    return sample, pts.reshape(-1)


@dataclass
class CascadeTrace:
    """Per-stage record of one forward pass."""

    shapes: list[np.ndarray]          # K+1 entries, initial first
    rep_gates: list[np.ndarray]       # K entries ([1.0] where ungated)
    reg_gates: list[np.ndarray]
    displacements: list[np.ndarray]


def _stage_forward(stage: CascadeStage, images, shapes: np.ndarray,
                   pose_rows: np.ndarray | None, q: int):
    """Batched displacement of one stage at the given current shapes."""
    B = shapes.shape[0]
    P = shapes.shape[1] // 2
    patch_arrays = np.stack([
        extract_patches(images[i], shapes[i], q).patches for i in range(B)
    ])
    patches = Tensor(patch_arrays.reshape(B * P, 1, q, q))
    h, rep_g = stage.rep.forward_batch(patches, pose_rows, B, P)
    delta, reg_g = stage.reg.forward(h)
    return delta, rep_g, reg_g


def _gate_rows(g, batch: int, num_experts: int) -> np.ndarray:
    """Normalize a gate record to per-sample rows."""
    if g is None:
        return np.ones((batch, 1))
    data = g.data
    if data.ndim == 1:
        return np.broadcast_to(data, (batch, data.shape[0])).copy()
    return data.copy()


def pose_rows_for(model: CascadeModel, samples) -> np.ndarray | None:
    """Gate conditioning rows for a list of samples, per the pose source."""
    if model.pose_mode == "none":
        return None
    if model.pose_mode == "oracle":
        return np.stack([s.pose.as_vector() for s in samples])
    if model.pose_model is None:
        raise ValueError("pose_mode is 'model' but no pose model is attached")
    inputs = prepare_pose_inputs([s.image for s in samples])
    return pose_forward_batch(model.pose_model, inputs).data


def cascade_forward(image: np.ndarray, pose, model: CascadeModel,
                    bbox: BBox) -> tuple[np.ndarray, CascadeTrace]:
    """Full cascade on one image; returns the final shape and a trace."""
    if model.mean_shape is None or model.mean_box_scale is None:
        raise ValueError("model has no placement statistics; train or load it first")
    if model.pose_mode != "none" and pose is None:
        raise ValueError("pose-gated model needs a pose input")
    if pose is not None and hasattr(pose, "as_vector"):
        pose = pose.as_vector()
    pose_rows = None if pose is None else np.asarray(pose, dtype=np.float64)[None, :]
    shape = place_initial_shape(model.mean_shape, model.mean_box_scale, bbox)
    trace = CascadeTrace(shapes=[shape.copy()], rep_gates=[], reg_gates=[],
                         displacements=[])
    for stage in model.stages:
        delta, rep_g, reg_g = _stage_forward(stage, [image], shape[None, :],
                                             pose_rows, model.dims.patch_size)
        d = delta.data[0]
        shape = shape + d
        trace.shapes.append(shape.copy())
        trace.displacements.append(d.copy())
        trace.rep_gates.append(_gate_rows(rep_g, 1, stage.rep.num_experts)[0])
        trace.reg_gates.append(_gate_rows(reg_g, 1, stage.reg.num_experts)[0])
    return shape, trace


def run_cascade_batch(model: CascadeModel, samples, *, batch_size: int = 128,
                      collect_stage1: bool = False):
    """Predicted shapes for many samples; optionally stage-1 gate rows.

    Returns (preds (N, 2P), stage1) where stage1 is None or a dict with
    'rep' and 'reg' gate-row arrays.
    """
    if model.mean_shape is None or model.mean_box_scale is None:
        raise ValueError("model has no placement statistics; train or load it first")
    N = len(samples)
    preds = np.zeros((N, model.dims.landmarks * 2))
    rep_rows, reg_rows = [], []
    for lo in range(0, N, batch_size):
        chunk = samples[lo:lo + batch_size]
        B = len(chunk)
        images = [s.image for s in chunk]
        pose_rows = pose_rows_for(model, chunk)
        shapes = np.stack([
            place_initial_shape(model.mean_shape, model.mean_box_scale, s.bbox)
            for s in chunk
        ])
        for k, stage in enumerate(model.stages):
            delta, rep_g, reg_g = _stage_forward(stage, images, shapes, pose_rows,
                                                 model.dims.patch_size)
            shapes = shapes + delta.data
            if collect_stage1 and k == 0:
                rep_rows.append(_gate_rows(rep_g, B, stage.rep.num_experts))
                reg_rows.append(_gate_rows(reg_g, B, stage.reg.num_experts))
        preds[lo:lo + B] = shapes
    stage1 = None
    if collect_stage1:
        stage1 = {"rep": np.concatenate(rep_rows), "reg": np.concatenate(reg_rows)}
    return preds, stage1


def train(model: CascadeModel, trainset: LandmarkDataset,
          config: TrainConfig) -> tuple[CascadeModel, list[tuple[int, int, float]]]:
    """Greedy stage-wise training; returns the model and a loss history.

    History rows are (stage, epoch, mean_loss), 1-based. One generator seeded
    from the config drives every stochastic choice, so runs with equal seeds
    are bit-identical.
    """
    samples = trainset.samples
    if len(samples) == 0:
        raise ValueError("training set is empty")
    mirror = trainset.template.mirror
    model.mean_shape = mean_shape(samples)
    model.mean_box_scale = mean_box_scale(samples)
    rng = np.random.default_rng(config.seed)
    n = len(samples)
    q = model.dims.patch_size
    history: list[tuple[int, int, float]] = []

    # Pose-model rows depend only on the image, so precompute both the
    # normal and the flipped variant once.
    pose_cache = None
    if model.pose_mode == "model":
        normal = pose_rows_for(model, samples)
        flipped = pose_rows_for(model, [flip_sample(s, mirror) for s in samples])
        pose_cache = (normal, flipped)

    for k in range(model.num_stages):
        stage = model.stages[k]
        params = [t for _, t in stage.named_parameters()]
        opt = Adam(params, lr=config.lr)
        best = np.inf
        stall = 0
        for epoch in range(config.epochs_per_stage):
            order = rng.permutation(n)
            epoch_losses = []
            for step, lo in enumerate(range(0, n, config.batch_size)):
                idx = order[lo:lo + config.batch_size]
                batch, inits, flips = [], [], []
                for i in idx:
                    drawn, init = augment(
                        samples[i], rng, mirror=mirror, mean_shp=model.mean_shape,
                        mean_scale=model.mean_box_scale,
                        translate_sigma=config.translate_sigma,
                        scale_sigma=config.scale_sigma, flip_prob=config.flip_prob)
                    flips.append(drawn is not samples[i])
                    batch.append(drawn)
                    inits.append(init)
                images = [s.image for s in batch]
                gts = np.stack([s.landmarks for s in batch])
                shapes = np.stack(inits)
                if model.pose_mode == "oracle":
                    pose_rows = np.stack([s.pose.as_vector() for s in batch])
                elif model.pose_mode == "model":
                    normal, flipped = pose_cache
                    pose_rows = np.where(np.array(flips)[:, None],
                                         flipped[idx], normal[idx])
                else:
                    pose_rows = None
                for j in range(k):
                    delta, _, _ = _stage_forward(model.stages[j], images, shapes,
                                                 pose_rows, q)
                    shapes = shapes + delta.data
                with record():
                    delta, _, _ = _stage_forward(stage, images, shapes, pose_rows, q)
                    residual = Tensor(gts - shapes)
                    loss = mean(square(sub(delta, residual)))
                    value = loss.item()
                    if not np.isfinite(value):
                        raise NumericError(
                            f"training loss is not finite at stage {k + 1}, "
                            f"epoch {epoch + 1}, step {step + 1}")
                    backward(loss)
                opt.step()
                opt.zero_grad()
                epoch_losses.append(value)
            mean_loss = float(np.mean(epoch_losses))
            history.append((k + 1, epoch + 1, mean_loss))
            if mean_loss < best * (1.0 - config.plateau_tol):
                best = mean_loss
                stall = 0
            else:
                best = min(best, mean_loss)
                stall += 1
                if stall >= config.plateau_window:
                    break
    return model, history
