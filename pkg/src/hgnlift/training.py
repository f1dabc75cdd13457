"""Optimization: the composite objective, Adam with stepped learning-rate
decay, per-row weight clipping, lateral flip augmentation, and the seeded
training loop.

The loop is deterministic end to end: shuffling, flip coin-tosses, and every
update follow from TrainConfig.seed, and the per-epoch report contains no
timing, so two runs with the same config produce byte-identical reports.
Wall-clock timing goes to the console only.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import skeleton
from .autodiff import Tape, Variable, backward
from .data import PoseSample, dataset_arrays
from .metrics import mpjpe
from .model import forward, named_parameters

# the network regresses metres internally: row-norm clipping caps weight rows
# at 1, so millimetre-scale outputs would be unreachable; every public
# boundary (datasets, predict, reports, metrics) stays in millimetres
TARGET_SCALE_MM = 1000.0


@dataclass
class LossWeights:
    lambda_pose: float = 1.0
    lambda_mesh: float = 0.01

    def __post_init__(self):
        if self.lambda_pose < 0 or self.lambda_mesh < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    base_lr: float = 1e-3
    lr_decay: float = 0.9
    lr_step_epochs: int = 20
    max_norm: float = 1.0
    flip: bool = False
    seed: int = 0
    loss: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.lr_step_epochs < 1:
            raise ValueError("lr_step_epochs must be at least 1")
        if self.max_norm <= 0:
            raise ValueError("max_norm must be positive")


def lr_at(cfg, epoch):
    """Stepped decay: base_lr * lr_decay ** (epoch // lr_step_epochs)."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return cfg.base_lr * cfg.lr_decay ** (epoch // cfg.lr_step_epochs)


def compute_loss(outputs, y3d, mesh_mid=None, mesh_top=None, mesh_mask=None, weights=None):
    """Batch-mean objective: summed squared pose error plus the weighted sum
    of squared coarse-mesh errors.

    A mesh term enters only when both the model output and the target exist
    and lambda_mesh is nonzero; mesh_mask (one flag per sample) zeroes the
    mesh contribution of samples without targets.  Returns a scalar Variable.
    """
    w = weights if weights is not None else LossWeights()
    batch = outputs.pose.value.shape[0]
    diff = ad.sub(outputs.pose, Variable(np.asarray(y3d, dtype=np.float64)))
    total = ad.scale(ad.vsum(ad.square(diff)), w.lambda_pose)
    if w.lambda_mesh != 0.0:
        mesh_sum = None
        for pred, target in ((outputs.mesh_top, mesh_top), (outputs.mesh_mid, mesh_mid)):
            if pred is None or target is None:
                continue
            sq = ad.square(ad.sub(pred, Variable(np.asarray(target, dtype=np.float64))))
            if mesh_mask is not None:
                gate = np.asarray(mesh_mask, dtype=np.float64).reshape(-1, 1, 1)
                sq = ad.hadamard(sq, Variable(gate))
            term = ad.vsum(sq)
            mesh_sum = term if mesh_sum is None else ad.add(mesh_sum, term)
        if mesh_sum is not None:
            total = ad.add(total, ad.scale(mesh_sum, w.lambda_mesh))
    return ad.scale(total, 1.0 / batch)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_state(named_params):
    return AdamState(
        m={k: np.zeros_like(p.value) for k, p in named_params.items()},
        v={k: np.zeros_like(p.value) for k, p in named_params.items()})


def adam_step(named_params, state, lr):
    """One bias-corrected Adam update in place.

    Raises FloatingPointError naming the first parameter with a non-finite
    gradient.  A parameter whose gradient is identically zero on a fresh
    state is left exactly unchanged.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for name, p in named_params.items():
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / (1.0 - b1 ** state.t)
        v_hat = state.v[name] / (1.0 - b2 ** state.t)
        p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def max_norm_clip(named_params, max_norm=1.0):
    """Rescale any row of a rank-2 weight matrix whose L2 norm exceeds
    max_norm back onto the ball; vectors (biases, batch-norm affine,
    attention logits) pass through untouched.  Idempotent."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    for p in named_params.values():
        if p.value.ndim != 2:
            continue
        norms = np.linalg.norm(p.value, axis=1, keepdims=True)
        factor = np.minimum(1.0, max_norm / np.maximum(norms, 1e-30))
        if np.any(factor < 1.0):
            p.value = p.value * factor


_MIRROR = np.asarray(skeleton.MIRROR_JOINT)


def flip_augment(sample, coarse_mirrors=None):
    """Lateral flip: negate x and swap left/right joints in 2D and 3D.

    Mesh targets follow the coarse mirror permutations in
    coarse_mirrors = (mid_map, top_map) when both exist; otherwise the
    coarsening broke lateral symmetry and the targets are dropped.  Applying
    the flip twice returns the original sample.
    """
    j2 = np.asarray(sample.joints2d)[_MIRROR].copy()
    j2[:, 0] *= -1.0
    j3 = np.asarray(sample.joints3d)[_MIRROR].copy()
    j3[:, 0] *= -1.0
    mesh_mid = mesh_top = None
    if sample.mesh_mid is not None and sample.mesh_top is not None and coarse_mirrors is not None:
        mid_map, top_map = coarse_mirrors
        if mid_map is not None and top_map is not None:
            mesh_mid = np.asarray(sample.mesh_mid)[mid_map].copy()
            mesh_mid[:, 0] *= -1.0
            mesh_top = np.asarray(sample.mesh_top)[top_map].copy()
            mesh_top[:, 0] *= -1.0
    return PoseSample(j2, j3, mesh_mid, mesh_top, sample.action, sample.subject)


def _flip_rows(x2d, y3d, mesh_mid, mesh_top, mask, rows, coarse_mirrors):
    """Vectorized flip_augment over the selected row indices."""
    x2d[rows] = x2d[rows][:, _MIRROR]
    x2d[rows, :, 0] *= -1.0
    y3d[rows] = y3d[rows][:, _MIRROR]
    y3d[rows, :, 0] *= -1.0
    if mask is None:
        return
    mid_map, top_map = coarse_mirrors if coarse_mirrors is not None else (None, None)
    if mid_map is None or top_map is None:
        mask[rows] = False
        return
    mesh_mid[rows] = mesh_mid[rows][:, mid_map]
    mesh_mid[rows, :, 0] *= -1.0
    mesh_top[rows] = mesh_top[rows][:, top_map]
    mesh_top[rows, :, 0] *= -1.0


def predict(params, x2d, batch_size=256):
    """Eval-mode forward in batches, converted to millimetres; plain arrays
    keyed pose/mesh_mid/mesh_top (mesh keys only when the variant produces
    them)."""
    x = np.asarray(x2d, dtype=np.float64)
    chunks = {}
    for start in range(0, len(x), batch_size):
        out = forward(params, x[start : start + batch_size], mode="eval")
        for key in ("pose", "mesh_mid", "mesh_top"):
            value = getattr(out, key)
            if value is not None:
                chunks.setdefault(key, []).append(value.value * TARGET_SCALE_MM)
    return {key: np.concatenate(parts, axis=0) for key, parts in chunks.items()}


def train(params, train_data, val_data=None, cfg=None, trainable=None,
          coarse_mirrors=None, bn_mode="train", report_path=None, verbose=False):
    """Seeded training loop; returns the per-epoch history.

    Each epoch: shuffle, flip each sample with p = 0.5 when cfg.flip, then
    minibatch forward/backward, an Adam step at the decayed rate, and row
    clipping.  `trainable` (a collection of parameter names) restricts which
    parameters move; pass bn_mode="eval" as well to freeze batch-norm
    statistics.  History records go to report_path as one JSON object per
    line with keys epoch, lr, train_loss, val_mpjpe_mm.
    """
    cfg = cfg if cfg is not None else TrainConfig()
    x2d0, y3d0, mid0, top0, mask0 = dataset_arrays(train_data)
    y3d0 = y3d0 / TARGET_SCALE_MM  # loss runs in metres, see TARGET_SCALE_MM
    if mid0 is not None:
        mid0, top0 = mid0 / TARGET_SCALE_MM, top0 / TARGET_SCALE_MM
    named_all = dict(named_parameters(params))
    if trainable is None:
        named = named_all
    else:
        unknown = sorted(set(trainable) - set(named_all))
        if unknown:
            raise ValueError(f"unknown trainable parameters {unknown}")
        named = {k: v for k, v in named_all.items() if k in trainable}
        if not named:
            raise ValueError("trainable filter selects no parameters")
    if val_data is not None:
        val_x, val_y, *_ = dataset_arrays(val_data)
    state = adam_state(named)
    rng = np.random.default_rng(cfg.seed)
    n = len(x2d0)
    history = []
    report_f = open(report_path, "w") if report_path else None
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            lr = lr_at(cfg, epoch)
            order = rng.permutation(n)
            x2d, y3d = x2d0, y3d0
            mid, top, mask = mid0, top0, mask0
            if cfg.flip:
                x2d, y3d = x2d0.copy(), y3d0.copy()
                if mask0 is not None:
                    mid, top, mask = mid0.copy(), top0.copy(), mask0.copy()
                rows = np.flatnonzero(rng.random(n) < 0.5)
                _flip_rows(x2d, y3d, mid, top, mask, rows, coarse_mirrors)
            loss_sum = 0.0
            for batch_index, start in enumerate(range(0, n, cfg.batch_size)):
                idx = order[start : start + cfg.batch_size]
                try:
                    with Tape():
                        out = forward(params, x2d[idx], mode=bn_mode)
                        loss = compute_loss(
                            out, y3d[idx],
                            None if mid is None else mid[idx],
                            None if top is None else top[idx],
                            None if mask is None else mask[idx],
                            cfg.loss)
                        if not np.isfinite(loss.value):
                            raise FloatingPointError("non-finite loss")
                        for p in named_all.values():
                            p.zero_grad()
                        backward(loss)
                    adam_step(named, state, lr)
                except FloatingPointError as e:
                    raise FloatingPointError(f"epoch {epoch} batch {batch_index}: {e}") from e
                max_norm_clip(named, cfg.max_norm)
                loss_sum += float(loss.value) * len(idx)
            record = {
                "epoch": epoch,
                "lr": lr,
                "train_loss": loss_sum / n,
                "val_mpjpe_mm": None,
            }
            if val_data is not None:
                record["val_mpjpe_mm"] = mpjpe(predict(params, val_x)["pose"], val_y)
            history.append(record)
            if report_f is not None:
                report_f.write(json.dumps(record) + "\n")
            if verbose:
                wall_ms = (time.perf_counter() - t0) * 1e3
                print(
                    f"epoch {record['epoch']} lr {record['lr']:.6g} "
                    f"train_loss {record['train_loss']:.6g} "
                    f"val_mpjpe_mm {record['val_mpjpe_mm']} wall_ms {wall_ms:.1f}")
    finally:
        if report_f is not None:
            report_f.close()
    return history
