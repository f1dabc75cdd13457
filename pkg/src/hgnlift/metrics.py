"""Pose and mesh error metrics: MPJPE, Procrustes-aligned MPJPE, MPVPE,
PCK/AUC curves, grouped breakdowns, and small report artifacts (CSV, SVG).

All position errors are Euclidean distances in the unit of the inputs
(millimetres everywhere in this package); aggregate metrics average over
joints or vertices and then over samples uniformly.
"""
from __future__ import annotations

import csv

import numpy as np

from . import skeleton

PCK_THRESHOLDS_MM = np.linspace(0.0, 150.0, 31)


def _paired(pred, gt, width=3):
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    if p.ndim < 2 or p.shape[-1] != width:
        raise ValueError(f"expected (..., N, {width}) arrays, got {p.shape}")
    return p, g


def mpjpe(pred, gt):
    """Mean per-joint position error: mean Euclidean distance over all
    joints and all samples."""
    p, g = _paired(pred, gt)
    return float(np.mean(np.linalg.norm(p - g, axis=-1)))


def mpvpe(pred, gt):
    """Mean per-vertex position error; same reduction as mpjpe."""
    return mpjpe(pred, gt)


def procrustes_align(pred, gt, with_scale=True):
    """Similarity-align pred onto gt per sample: rotation (never a
    reflection), translation, and optionally isotropic scale, minimizing the
    summed squared distance.  Accepts (J, 3) or (B, J, 3); returns the
    aligned copy of pred with the same shape.
    """
    p, g = _paired(pred, gt)
    single = p.ndim == 2
    if single:
        p, g = p[None], g[None]
    mu_p = p.mean(axis=1, keepdims=True)
    mu_g = g.mean(axis=1, keepdims=True)
    pc = p - mu_p
    gc = g - mu_g
    h = np.transpose(pc, (0, 2, 1)) @ gc  # (B, 3, 3) cross-covariance
    u, s, vt = np.linalg.svd(h)
    v = np.transpose(vt, (0, 2, 1))
    ut = np.transpose(u, (0, 2, 1))
    # flip the smallest singular direction when the best orthogonal map
    # would be a reflection, keeping det(r) = +1
    d = np.ones_like(s)
    d[:, -1] = np.sign(np.linalg.det(v @ ut))
    r = (v * d[:, None, :]) @ ut
    if with_scale:
        denom = np.maximum((pc ** 2).sum(axis=(1, 2)), 1e-12)
        scale = (s * d).sum(axis=1) / denom
    else:
        scale = np.ones(p.shape[0])
    aligned = scale[:, None, None] * (pc @ np.transpose(r, (0, 2, 1))) + mu_g
    return aligned[0] if single else aligned


def pa_mpjpe(pred, gt, with_scale=True):
    """MPJPE after per-sample Procrustes alignment."""
    p, g = _paired(pred, gt)
    return mpjpe(procrustes_align(p, g, with_scale=with_scale), g)


def pck_auc(pred, gt, thresholds=None):
    """(PCK at the largest threshold, area under the PCK curve), in percent.

    A joint scores a hit at threshold t when its error is strictly below
    max(t, 1e-9); the floor keeps exact matches counted at t = 0.  AUC is the
    uniform mean of PCK over the thresholds.
    """
    p, g = _paired(pred, gt)
    if thresholds is None:
        thresholds = PCK_THRESHOLDS_MM
    t = np.asarray(thresholds, dtype=np.float64)
    err = np.linalg.norm(p - g, axis=-1).ravel()
    hits = err[None, :] < np.maximum(t, 1e-9)[:, None]
    pck = 100.0 * hits.mean(axis=1)
    return float(pck[-1]), float(pck.mean())


def per_joint_errors(pred, gt):
    """Mean error per joint over all samples, shape (n_joints,)."""
    p, g = _paired(pred, gt)
    err = np.linalg.norm(p - g, axis=-1)
    return err.reshape(-1, err.shape[-1]).mean(axis=0)


def per_group_errors(pred, gt, groups):
    """Mean error for each distinct group label (e.g. action or subject).

    `groups` has one label per leading-axis sample; returns {label: mpjpe}
    sorted by label.
    """
    p, g = _paired(pred, gt)
    labels = list(groups)
    if len(labels) != p.shape[0]:
        raise ValueError(f"{len(labels)} group labels for {p.shape[0]} samples")
    err = np.linalg.norm(p - g, axis=-1).reshape(len(labels), -1).mean(axis=1)
    out = {}
    for label in sorted(set(labels)):
        mask = np.array([x == label for x in labels])
        out[label] = float(err[mask].mean())
    return out


def write_breakdown_csv(path, rows, value_name="mpjpe_mm"):
    """Two-column CSV: label, value.  `rows` is a dict or (label, value) list."""
    items = sorted(rows.items()) if isinstance(rows, dict) else list(rows)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["label", value_name])
        for label, value in items:
            w.writerow([label, repr(float(value))])


def per_joint_csv(path, pred, gt):
    errs = per_joint_errors(pred, gt)
    if len(errs) != len(skeleton.JOINT_NAMES):
        raise ValueError(f"expected {len(skeleton.JOINT_NAMES)} joints, got {len(errs)}")
    write_breakdown_csv(path, list(zip(skeleton.JOINT_NAMES, errs)))


def bar_chart_svg(path, rows, title="error (mm)", width=640, bar_height=22):
    """Write a horizontal bar chart of {label: value} as a standalone SVG."""
    items = sorted(rows.items()) if isinstance(rows, dict) else list(rows)
    if not items:
        raise ValueError("nothing to chart")
    top = max(value for _, value in items)
    top = top if top > 0 else 1.0
    label_w, pad, gap = 150, 10, 6
    chart_w = width - label_w - 2 * pad - 60
    height = pad * 2 + 24 + len(items) * (bar_height + gap)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="sans-serif" font-size="12">',
        f'<text x="{pad}" y="{pad + 12}" font-weight="bold">{title}</text>',
    ]
    y = pad + 24
    for label, value in items:
        w = max(1.0, chart_w * float(value) / top)
        parts.append(
            f'<text x="{label_w - 4}" y="{y + bar_height - 7}" text-anchor="end">{label}</text>')
        parts.append(
            f'<rect x="{label_w}" y="{y}" width="{w:.1f}" height="{bar_height}" fill="#4878a8"/>')
        parts.append(
            f'<text x="{label_w + w + 4:.1f}" y="{y + bar_height - 7}">{float(value):.1f}</text>')
        y += bar_height + gap
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts) + "\n")
