"""Optimizer, learning-rate schedule, augmentation, and the staged training
protocol.

Stages run in a fixed order: ``warmup2d`` trains the slice network with the
long-range skip connections disabled (the decoder starts from random
weights), ``stage2d`` enables them and continues, ``stage3d_hff`` freezes
the slice network and its classifier and trains the volumetric branch plus
the fusion head on the fused-output loss, and ``joint`` unfreezes
everything under the combined loss ``lambda * L(slice) + L(fused)``.  The
independent ``coarse`` stage trains the low-resolution liver localizer used
by cascaded inference.

The learning rate follows lr0 * (1 - iteration/total)^0.9 and the optimizer
is stochastic gradient descent with classic momentum: v <- mu*v - lr*g,
p <- p + v.  Every iteration appends one ``iter<TAB>stage<TAB>lr<TAB>loss``
line to the loss trace, and checkpoints carry the optimizer state so a run
resumes exactly where it stopped.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from liverseg import checkpoint
from liverseg.autodiff import Tensor, add, backward, mul
from liverseg.fusion import HybridModel
from liverseg.nets import PRESETS, DenseUNet
from liverseg.ops import softmax_channels, weighted_cross_entropy
from liverseg.volume import hu_window, normalize_windowed, read_manifest, read_volume, resample


class NumericError(RuntimeError):
    """Non-finite values where finite ones are required; aborts the step."""


STAGES = ("warmup2d", "stage2d", "stage3d_hff", "joint")
COARSE_STAGE = "coarse"
ALL_STAGES = (COARSE_STAGE,) + STAGES
_STAGE_INDEX = {s: i for i, s in enumerate(ALL_STAGES)}

STAGE_PREREQUISITE = {
    "coarse": None,
    "warmup2d": None,
    "stage2d": "warmup2d",
    "stage3d_hff": "stage2d",
    "joint": "stage3d_hff",
}

INIT_SCHEME = "conv: normal(0, sqrt(2/fan_in)); bias 0; bn gamma 1 beta 0"


def poly_lr(iteration, total_iterations, lr0=0.01, power=0.9):
    """lr0 * (1 - iteration/total)^power, defined on 0 <= iteration <= total."""
    if not 0 <= iteration <= total_iterations:
        raise ValueError(
            f"poly_lr: iteration {iteration} outside [0, {total_iterations}]"
        )
    return lr0 * (1.0 - iteration / total_iterations) ** power


@dataclass
class TrainConfig:
    stage: str
    total_iterations: int
    lr0: float = 0.01
    decay_power: float = 0.9
    momentum: float = 0.9
    lambda_2d: float = 0.5
    batch_size: int = 4
    augment_mirror: bool = True
    augment_scale: tuple = (0.8, 1.2)
    class_weights: tuple = (1.0, 3.0, 10.0)
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.lambda_2d <= 1:
            raise ValueError(f"lambda_2d must be in [0, 1], got {self.lambda_2d}")
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if self.total_iterations < 1:
            raise ValueError(f"total_iterations must be >= 1, got {self.total_iterations}")
        if self.stage not in ALL_STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; expected one of {ALL_STAGES}")


class SgdMomentum:
    """Classic momentum; velocity buffers mirror the parameter shapes."""

    def __init__(self, momentum=0.9):
        self.momentum = momentum
        self.velocity = {}
        self.iteration = 0

    def step(self, params, lr):
        for name, t in params.trainable():
            g = t.grad
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient in {name!r}; step aborted")
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(t.data)
                self.velocity[name] = v
            v *= self.momentum
            v -= lr * g
            t.data += v
        self.iteration += 1

    def state_arrays(self):
        return {f"opt/{name}": v for name, v in self.velocity.items()}

    def load_state(self, arrays, iteration):
        self.velocity = {
            name[len("opt/"):]: arr.copy() for name, arr in arrays.items() if name.startswith("opt/")
        }
        self.iteration = iteration


def sgd_step(params, state, lr):
    """One optimizer step over all unfrozen parameters (gradients already set)."""
    state.step(params, lr)


def _scale_coords(n, s):
    c = (n - 1) / 2.0
    return c + (np.arange(n) - c) / s


def _gather_linear_axis(data, axis, coords):
    n = data.shape[axis]
    i0 = np.clip(np.floor(coords).astype(int), 0, n - 1)
    i1 = np.minimum(i0 + 1, n - 1)
    w = (coords - i0).astype(np.float32)
    moved = np.moveaxis(data, axis, -1)
    out = moved[..., i0] * (1 - w) + moved[..., i1] * w
    return np.moveaxis(out, -1, axis)


def _gather_nearest_axis(data, axis, coords):
    n = data.shape[axis]
    idx = np.clip(np.rint(coords).astype(int), 0, n - 1)
    moved = np.moveaxis(data, axis, -1)
    return np.moveaxis(moved[..., idx], -1, axis)


def _mirror_scale(image, labels, rng, image_axes, label_axes, mirror, scale_range):
    """Shared in-plane mirror + scale; linear for the image, nearest for labels."""
    if mirror:
        for ia, la in zip(image_axes, label_axes):
            if rng.uniform() < 0.5:
                image = np.flip(image, ia)
                labels = np.flip(labels, la)
    s = rng.uniform(*scale_range)
    if s != 1.0:
        for ia, la in zip(image_axes, label_axes):
            coords = _scale_coords(image.shape[ia], s)
            image = _gather_linear_axis(image, ia, coords)
            labels = _gather_nearest_axis(labels, la, coords)
    return np.ascontiguousarray(image), np.ascontiguousarray(labels)


def augment(volume, labels, rng, mirror=True, scale_range=(0.8, 1.2)):
    """Random in-plane mirror and scaling in [0.8, 1.2], applied identically
    to the image (linear resampling) and labels (nearest neighbour)."""
    if volume.shape != labels.shape:
        raise ValueError(f"augment: image {volume.shape} and labels {labels.shape} differ")
    return _mirror_scale(volume, labels, rng, (0, 1), (0, 1), mirror, scale_range)


def augment_slices(slices, label, rng, mirror=True, scale_range=(0.8, 1.2)):
    """Augment a (k, H, W) slice stack and its (H, W) label map together."""
    return _mirror_scale(slices, label, rng, (1, 2), (0, 1), mirror, scale_range)


@dataclass
class TrainingCase:
    case_id: str
    image: np.ndarray   # float32 in [0, 1], axes (x, y, z)
    labels: np.ndarray  # uint8


def load_training_cases(manifest_path, coarse=False, coarse_spacing=(2.0, 2.0, 2.5),
                        hu_lo=-200.0, hu_hi=250.0, split="train"):
    """Read, window, optionally resample to the coarse grid, and normalize.

    The coarse localizer trains on liver-vs-rest, so its labels collapse
    {1, 2} to 1.
    """
    manifest = read_manifest(manifest_path)
    cases = []
    for entry in manifest.cases:
        if split is not None and entry.split != split:
            continue
        img = hu_window(read_volume(entry.image), hu_lo, hu_hi)
        lab = read_volume(entry.label)
        if coarse:
            img = resample(img, coarse_spacing, "trilinear")
            lab = resample(lab, coarse_spacing, "nearest")
        labels = lab.data.astype(np.uint8)
        if coarse:
            labels = (labels > 0).astype(np.uint8)
        cases.append(TrainingCase(entry.case_id, normalize_windowed(img.data, hu_lo, hu_hi), labels))
    if not cases:
        raise ValueError(f"{manifest_path}: no cases for split {split!r}")
    return cases


def _triplet_from_volume(image, z):
    d = image.shape[2]
    zs = np.clip([z - 1, z, z + 1], 0, d - 1)
    return np.ascontiguousarray(image[:, :, zs].transpose(2, 0, 1))


def _round_up(n, m):
    return max(((n + m - 1) // m) * m, m)


def _pad_pair_to_grid(image, labels, spatial_axes, multiples):
    """Edge-pad an (image, labels) pair so the stride chain divides cleanly.

    Replication keeps the pair self-consistent, so padded voxels carry
    valid (if redundant) supervision.
    """
    pads_img = [(0, 0)] * image.ndim
    pads_lab = [(0, 0)] * labels.ndim
    changed = False
    for k, (ia, m) in enumerate(zip(spatial_axes, multiples)):
        n = image.shape[ia]
        t = _round_up(n, m)
        if t != n:
            pads_img[ia] = (0, t - n)
            pads_lab[labels.ndim - len(spatial_axes) + k] = (0, t - n)
            changed = True
    if not changed:
        return image, labels
    return np.pad(image, pads_img, mode="edge"), np.pad(labels, pads_lab, mode="edge")


def _batch_2d(cases, cfg, rng):
    xs, ys = [], []
    for _ in range(cfg.batch_size):
        case = cases[int(rng.integers(len(cases)))]
        z = int(rng.integers(case.image.shape[2]))
        stack = _triplet_from_volume(case.image, z)
        label = case.labels[:, :, z]
        stack, label = augment_slices(stack, label, rng, cfg.augment_mirror, cfg.augment_scale)
        stack, label = _pad_pair_to_grid(stack, label, (1, 2), (32, 32))
        xs.append(stack)
        ys.append(label)
    return Tensor(np.stack(xs)), np.stack(ys).astype(np.int64)


def _batch_3d(cases, cfg, rng):
    xs, ys = [], []
    for _ in range(cfg.batch_size):
        case = cases[int(rng.integers(len(cases)))]
        img, lab = augment(case.image, case.labels, rng, cfg.augment_mirror, cfg.augment_scale)
        img, lab = _pad_pair_to_grid(img, lab, (0, 1, 2), (32, 32, 4))
        xs.append(img[None])
        ys.append(lab)
    return Tensor(np.stack(xs)), np.stack(ys).astype(np.int64)


def _class_weights_for(model_classes, weights):
    if model_classes == len(weights):
        return np.asarray(weights, dtype=np.float64)
    return np.asarray(weights[:model_classes], dtype=np.float64)


def _apply_stage_freeze(stage, model):
    if stage == "stage3d_hff":
        model.unfreeze_all()
        model.freeze_groups({"2d", "2dcls"})
    elif stage == "joint":
        model.unfreeze_all()


def stage_loss(stage, model, x, y, cfg):
    """Forward pass and loss for one batch of the given stage."""
    if stage in ("coarse", "warmup2d", "stage2d"):
        use_skips = False if stage == "warmup2d" else None
        _, logits = model.forward(x, train=True, use_skips=use_skips)
        probs = softmax_channels(logits)
        w = _class_weights_for(model.cfg.num_classes, cfg.class_weights)
        return weighted_cross_entropy(probs, y, w)
    out = model.forward(x, train=True, train_2d=(stage == "joint"))
    w = _class_weights_for(model.cfg2d.num_classes, cfg.class_weights)
    loss_fused = weighted_cross_entropy(out.probs_fused, y, w)
    if stage == "stage3d_hff":
        return loss_fused
    loss_2d = weighted_cross_entropy(out.probs_2d_volume, y, w)
    return add(mul(loss_2d, cfg.lambda_2d), loss_fused)


def run_stage(stage, model, cases, cfg, optimizer=None, start_iteration=0,
              trace_fn=None, end_iteration=None):
    """Train one stage from ``start_iteration`` (exclusive) up to
    ``end_iteration`` (default: the configured total).  Batches are sampled
    with a per-iteration seeded generator, so a resumed run reproduces the
    interrupted one exactly; stopping early keeps the full schedule.
    """
    if cfg.stage != stage:
        raise ValueError(f"config is for stage {cfg.stage!r}, not {stage!r}")
    is_hybrid_stage = stage in ("stage3d_hff", "joint")
    if is_hybrid_stage != isinstance(model, HybridModel):
        raise ValueError(f"stage {stage!r} expects {'a hybrid' if is_hybrid_stage else 'a 2D'} model")
    if optimizer is None:
        optimizer = SgdMomentum(cfg.momentum)
    if end_iteration is None:
        end_iteration = cfg.total_iterations
    _apply_stage_freeze(stage, model)
    params = model.params
    losses = []
    for it in range(start_iteration + 1, end_iteration + 1):
        rng = np.random.default_rng([cfg.seed, _STAGE_INDEX[stage], it])
        if is_hybrid_stage:
            x, y = _batch_3d(cases, cfg, rng)
        else:
            x, y = _batch_2d(cases, cfg, rng)
        loss = stage_loss(stage, model, x, y, cfg)
        params.zero_grads()
        backward(loss)
        lr = poly_lr(it - 1, cfg.total_iterations, cfg.lr0, cfg.decay_power)
        optimizer.step(params, lr)
        value = float(loss.data)
        losses.append(value)
        if trace_fn is not None:
            trace_fn(f"{it}\t{stage}\t{lr:.8g}\t{value:.8g}")
    return optimizer, losses


# -- checkpoint plumbing ----------------------------------------------------


def build_model_for_stage(stage, run_cfg, seed=0):
    """Fresh model of the right kind; 2D stages share the 'hybrid' naming so
    their checkpoints load straight into the hybrid model later."""
    bn = dict(bn_epsilon=run_cfg.bn_epsilon, bn_momentum=run_cfg.bn_momentum)
    if stage == COARSE_STAGE:
        return DenseUNet(PRESETS[run_cfg.coarse_model], prefix="coarse/", seed=seed, **bn)
    if stage in ("warmup2d", "stage2d"):
        return DenseUNet(PRESETS[run_cfg.model_2d], prefix="2d/", seed=seed, **bn)
    return HybridModel(PRESETS[run_cfg.model_2d], PRESETS[run_cfg.model_3d], seed=seed, **bn)


def checkpoint_path(out_dir, stage):
    return os.path.join(out_dir, f"{stage}.ckpt")


def save_stage_checkpoint(path, stage, model, optimizer, iteration, total, run_cfg):
    arrays = dict(model.params.arrays())
    arrays.update(optimizer.state_arrays())
    meta = {
        "stage": stage,
        "iteration": iteration,
        "total_iterations": total,
        "init": INIT_SCHEME,
        "config": run_cfg.to_dict(),
    }
    checkpoint.save_arrays(path, arrays, meta)


def split_checkpoint_arrays(arrays):
    params = {k: v for k, v in arrays.items() if not k.startswith("opt/")}
    opt = {k: v for k, v in arrays.items() if k.startswith("opt/")}
    return params, opt


def train_command(manifest_path, run_cfg, stage, out_dir, max_iterations=None, log=print):
    """Train one stage end to end: prerequisite check, resume, trace, checkpoint.

    Returns the path of the written checkpoint.
    """
    if stage not in ALL_STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {ALL_STAGES}")
    os.makedirs(out_dir, exist_ok=True)
    prereq = STAGE_PREREQUISITE[stage]
    prereq_arrays = None
    if prereq is not None:
        prereq_path = checkpoint_path(out_dir, prereq)
        if not os.path.exists(prereq_path):
            raise FileNotFoundError(
                f"stage {stage!r} requires a completed {prereq!r} checkpoint "
                f"({prereq_path} not found); run --stage {prereq} first"
            )
        prereq_arrays, _ = checkpoint.load_arrays(prereq_path)

    total = run_cfg.stage_iterations(stage)
    cfg = TrainConfig(
        stage=stage,
        total_iterations=total,
        lr0=run_cfg.lr0,
        decay_power=run_cfg.decay_power,
        momentum=run_cfg.momentum,
        lambda_2d=run_cfg.lambda_2d,
        batch_size=run_cfg.batch_size_3d if stage in ("stage3d_hff", "joint") else run_cfg.batch_size_2d,
        augment_mirror=run_cfg.augment_mirror,
        augment_scale=(run_cfg.augment_scale_min, run_cfg.augment_scale_max),
        class_weights=run_cfg.class_weights(),
        seed=run_cfg.seed,
    )
    cases = load_training_cases(
        manifest_path,
        coarse=(stage == COARSE_STAGE),
        coarse_spacing=run_cfg.coarse_spacing,
        hu_lo=run_cfg.hu_window_lo,
        hu_hi=run_cfg.hu_window_hi,
    )

    model = build_model_for_stage(stage, run_cfg, seed=run_cfg.seed)
    optimizer = SgdMomentum(cfg.momentum)
    start_iteration = 0

    own_path = checkpoint_path(out_dir, stage)
    if os.path.exists(own_path):
        arrays, meta = checkpoint.load_arrays(own_path)
        if meta.get("stage") != stage:
            raise ValueError(f"{own_path} holds stage {meta.get('stage')!r}, expected {stage!r}")
        params_arrays, opt_arrays = split_checkpoint_arrays(arrays)
        model.params.load_arrays(params_arrays, strict=True)
        optimizer.load_state(opt_arrays, meta["iteration"])
        start_iteration = int(meta["iteration"])
        log(f"resuming {stage} from iteration {start_iteration}")
    elif prereq_arrays is not None:
        params_arrays, _ = split_checkpoint_arrays(prereq_arrays)
        missing = model.params.load_arrays(params_arrays, strict=False)
        carried = set(params_arrays) & set(model.params.arrays())
        if not carried:
            raise ValueError(f"prerequisite checkpoint shares no parameters with stage {stage!r}")
        log(f"initialized {stage} from {prereq} ({len(carried)} arrays; {len(missing)} fresh)")

    if start_iteration >= total:
        log(f"{stage} already complete at iteration {start_iteration}")
        return own_path

    end = total if max_iterations is None else min(total, start_iteration + max_iterations)
    trace_file = os.path.join(out_dir, "trace.tsv")
    with open(trace_file, "a") as tf:
        def trace_fn(line):
            tf.write(line + "\n")

        optimizer, _ = run_stage(
            stage, model, cases, cfg, optimizer=optimizer,
            start_iteration=start_iteration, trace_fn=trace_fn, end_iteration=end,
        )

    save_stage_checkpoint(own_path, stage, model, optimizer, end, total, run_cfg)
    log(f"wrote {own_path} at iteration {end}/{total}")
    return own_path
