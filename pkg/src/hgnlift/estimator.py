"""Scikit-learn style estimator wrapping the whole lifting pipeline.

fit accepts 2D detections and 3D targets as arrays (native or flat layout);
the estimator builds its own mesh coarsening hierarchy from its
configuration, trains, and then predicts pelvis-rooted 3D joints in
millimetres.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .data import Dataset, PoseSample, assert_compatible, coarse_mirror_map, root_center
from .graphs import build_hierarchy, build_synthetic_body_mesh
from .metrics import mpjpe
from .model import HGNConfig, build
from .training import LossWeights, TrainConfig, predict as _predict, train
from .validation import check_is_fitted, check_joints2d, check_joints3d, check_mesh_targets


class HierarchicalPoseLifter(BaseEstimator):
    """Lifts 2D joint detections to pelvis-rooted 3D joints.

    Parameters mirror the model and training configuration; mesh_targets are
    the two coarse vertex counts the hierarchy is asked to hit.  After fit,
    the trained parameters live in params_, the hierarchy in hierarchy_, and
    the per-epoch records in history_.
    """

    def __init__(self, channels=64, gconv_kind="semantic", variant="full",
                 epochs=100, batch_size=64, base_lr=1e-3, lr_decay=0.9,
                 lr_step_epochs=20, max_norm=1.0, lambda_mesh=0.01,
                 flip=False, seed=0, n_mesh_vertices=6890, mesh_seed=0,
                 coarsen_seed=0, mesh_targets=(96, 48)):
        self.channels = channels
        self.gconv_kind = gconv_kind
        self.variant = variant
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.lr_decay = lr_decay
        self.lr_step_epochs = lr_step_epochs
        self.max_norm = max_norm
        self.lambda_mesh = lambda_mesh
        self.flip = flip
        self.seed = seed
        self.n_mesh_vertices = n_mesh_vertices
        self.mesh_seed = mesh_seed
        self.coarsen_seed = coarsen_seed
        self.mesh_targets = mesh_targets

    def _build_hierarchy(self):
        if self.variant == "baseline_single_scale":
            return None, None
        mesh = build_synthetic_body_mesh(self.n_mesh_vertices, seed=self.mesh_seed)
        hierarchy = build_hierarchy(
            mesh.graph, list(self.mesh_targets), seed=self.coarsen_seed)
        return mesh, hierarchy

    def fit(self, X, y, mesh_mid=None, mesh_top=None):
        """Train on detections X (n, 17, 2) and targets y (n, 17, 3) in mm.

        y is root-centered internally.  Coarse mesh targets are optional and
        must match the vertex counts of this estimator's own hierarchy.
        """
        X = check_joints2d(X)
        y = root_center(check_joints3d(y, len(X)))
        mesh, hierarchy = self._build_hierarchy()
        config = HGNConfig(
            channels=self.channels, gconv_kind=self.gconv_kind, seed=self.seed)
        params = build(config, hierarchy, variant=self.variant)
        n_mid = n_top = None
        if hierarchy is not None:
            lo, hi = sorted(hierarchy.selected, key=lambda s: s.graph.n_nodes)
            n_mid, n_top = lo.graph.n_nodes, hi.graph.n_nodes
        if (mesh_mid is None) != (mesh_top is None):
            raise ValueError("provide both mesh_mid and mesh_top or neither")
        if mesh_mid is not None:
            if hierarchy is None:
                raise ValueError(f"variant {self.variant!r} takes no mesh targets")
            mesh_mid = check_mesh_targets("mesh_mid", mesh_mid, len(X), n_mid)
            mesh_top = check_mesh_targets("mesh_top", mesh_top, len(X), n_top)
        samples = []
        for i in range(len(X)):
            samples.append(PoseSample(
                joints2d=X[i], joints3d=y[i],
                mesh_mid=None if mesh_mid is None else mesh_mid[i],
                mesh_top=None if mesh_top is None else mesh_top[i]))
        dataset = Dataset(samples=samples, meta={})
        mirrors = None
        if self.flip and hierarchy is not None:
            lo, hi = sorted(hierarchy.selected, key=lambda s: s.graph.n_nodes)
            mirrors = (
                coarse_mirror_map(mesh.mirror_map, lo.composed_map, lo.graph.n_nodes),
                coarse_mirror_map(mesh.mirror_map, hi.composed_map, hi.graph.n_nodes))
        cfg = TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, base_lr=self.base_lr,
            lr_decay=self.lr_decay, lr_step_epochs=self.lr_step_epochs,
            max_norm=self.max_norm, flip=self.flip, seed=self.seed,
            loss=LossWeights(lambda_mesh=self.lambda_mesh))
        self.history_ = train(params, dataset, cfg=cfg, coarse_mirrors=mirrors)
        self.params_ = params
        self.hierarchy_ = hierarchy
        self.n_features_in_ = X.shape[1] * X.shape[2]
        return self

    def fit_dataset(self, dataset):
        """Fit from a generated or loaded Dataset, verifying that it was
        built for this estimator's hierarchy before using its mesh targets."""
        _, hierarchy = self._build_hierarchy()
        if hierarchy is not None:
            assert_compatible(dataset, hierarchy)
        X = np.stack([s.joints2d for s in dataset.samples])
        y = np.stack([s.joints3d for s in dataset.samples])
        has_mesh = (hierarchy is not None
                    and all(s.mesh_mid is not None and s.mesh_top is not None
                            for s in dataset.samples))
        if has_mesh:
            mesh_mid = np.stack([s.mesh_mid for s in dataset.samples])
            mesh_top = np.stack([s.mesh_top for s in dataset.samples])
            return self.fit(X, y, mesh_mid=mesh_mid, mesh_top=mesh_top)
        return self.fit(X, y)

    def predict(self, X):
        """Pelvis-rooted 3D joints in millimetres, shape (n, 17, 3)."""
        check_is_fitted(self)
        X = check_joints2d(X)
        return _predict(self.params_, X)["pose"]

    def score(self, X, y):
        """Negative MPJPE in millimetres (greater is better)."""
        check_is_fitted(self)
        X = check_joints2d(X)
        y = root_center(check_joints3d(y, len(X)))
        return -mpjpe(self.predict(X), y)
