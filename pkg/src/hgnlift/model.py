"""The hierarchical lifting network: parallel per-scale subnetworks over the
skeleton and two coarsened body graphs, with staged activation and repeated
cross-scale fusion.

Scale 0 is the 17-joint skeleton; scales 1 and 2 are the mid and top body
graphs from a coarsening hierarchy.  Scale s runs one residual block per
stage from its join stage on; blocks_per_scale therefore fixes the schedule
(the default [4, 4, 2] gives 4 stages with the top scale joining at 3).
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import skeleton
from .autodiff import Variable
from .graphs import normalize_adjacency, skeleton_graph
from .layers import (
    batch_norm,
    bn_state,
    fuse,
    gconv,
    gconv_params,
    residual_block,
    residual_block_params,
    scale_transfer,
    transfer_params,
)

VARIANTS = ("full", "no_top", "no_mid_coarsest", "baseline_single_scale")


@dataclass
class HGNConfig:
    channels: int = 128
    gconv_kind: str = "semantic"
    blocks_per_scale: tuple = (4, 4, 2)
    scale_node_counts: Optional[tuple] = None  # filled from the hierarchy by build
    top_scale_join_stage: int = 3
    seed: int = 0

    def __post_init__(self):
        self.blocks_per_scale = tuple(int(b) for b in self.blocks_per_scale)
        if self.scale_node_counts is not None:
            self.scale_node_counts = tuple(int(n) for n in self.scale_node_counts)
        if self.channels < 8:
            raise ValueError(f"channels must be >= 8, got {self.channels}")
        if self.gconv_kind not in ("vanilla", "semantic"):
            raise ValueError(f"unknown gconv kind {self.gconv_kind!r}")
        if len(self.blocks_per_scale) != 3:
            raise ValueError(f"blocks_per_scale must list 3 scales, got {self.blocks_per_scale}")
        n_stages = self.blocks_per_scale[0]
        if self.blocks_per_scale[1] != n_stages:
            raise ValueError("mid scale joins at stage 1, so it needs as many blocks as stage 0")
        join = self.top_scale_join_stage
        if not 1 <= join <= n_stages:
            raise ValueError(f"top_scale_join_stage {join} outside 1..{n_stages}")
        if n_stages - join + 1 != self.blocks_per_scale[2]:
            raise ValueError(
                f"top scale joining at stage {join} of {n_stages} runs "
                f"{n_stages - join + 1} blocks, config says {self.blocks_per_scale[2]}")

    @property
    def n_stages(self):
        return self.blocks_per_scale[0]


@dataclass
class ModelOutputs:
    pose: Variable                       # batch x 17 x 3
    mesh_mid: Optional[Variable] = None  # batch x n_mid x 3
    mesh_top: Optional[Variable] = None  # batch x n_top x 3

    def present(self):
        out = {"pose": self.pose}
        if self.mesh_mid is not None:
            out["mesh_mid"] = self.mesh_mid
        if self.mesh_top is not None:
            out["mesh_top"] = self.mesh_top
        return out


@dataclass
class HGNParams:
    config: HGNConfig
    variant: str
    node_counts: list                 # per active scale
    adjacencies: list                 # per active scale
    join_stages: list                 # per active scale, 1-based
    pre: object
    pre_bn: object
    blocks: list                      # blocks[s][j]
    seed_transfers: dict              # (src, dst) -> ScaleTransferParams
    stage_fusions: list               # per stage, {(i, k): ScaleTransferParams}
    heads: dict                       # name -> GConvParams
    head_scales: dict                 # name -> scale index
    hierarchy_snapshot: object = None

    @property
    def n_scales(self):
        return len(self.node_counts)


def _mesh_scale_graphs(hierarchy):
    """(mid, top) selected levels of a two-target hierarchy, by node count."""
    if hierarchy is None or len(hierarchy.selected) < 2:
        raise ValueError("model needs a hierarchy with two selected mesh scales")
    lo, hi = sorted(hierarchy.selected, key=lambda s: s.graph.n_nodes)
    return lo, hi


def build(config, hierarchy, variant="full"):
    """Create all parameters: Glorot weights from config.seed, zero biases,
    unit/zero batch-norm affine, zero attention logits."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    rng = np.random.default_rng(config.seed)
    kind = config.gconv_kind
    tied = kind == "vanilla"
    n_stages = config.n_stages

    scale_graphs = [skeleton_graph()]
    join_stages = [1]
    heads_on = {"pose": 0}
    snapshot = None
    if variant != "baseline_single_scale":
        mid, top = _mesh_scale_graphs(hierarchy)
        snapshot = hierarchy.snapshot()
        if variant == "full":
            scale_graphs += [mid.graph, top.graph]
            join_stages += [1, config.top_scale_join_stage]
            heads_on.update(mesh_mid=1, mesh_top=2)
        elif variant == "no_top":
            # the mid subnetwork itself runs on the larger graph
            scale_graphs.append(top.graph)
            join_stages.append(1)
            heads_on.update(mesh_top=1)
        else:  # no_mid_coarsest
            scale_graphs.append(mid.graph)
            join_stages.append(1)
            heads_on.update(mesh_mid=1)

    node_counts = [g.n_nodes for g in scale_graphs]
    if config.scale_node_counts is not None:
        expected = list(config.scale_node_counts[: len(node_counts)])
        if expected != node_counts:
            raise ValueError(
                f"config expects scale node counts {expected}, hierarchy gives {node_counts}")
    resolved = HGNConfig(
        channels=config.channels, gconv_kind=kind,
        blocks_per_scale=config.blocks_per_scale,
        scale_node_counts=tuple(node_counts),
        top_scale_join_stage=config.top_scale_join_stage, seed=config.seed)

    adjacencies = [normalize_adjacency(g) for g in scale_graphs]
    supports = [a.support for a in adjacencies]
    ch = config.channels

    pre = gconv_params(rng, 2, ch, kind, support=supports[0], tied=tied)
    pre_bn = bn_state(ch)

    blocks = []
    for s in range(len(scale_graphs)):
        n_blocks = n_stages - join_stages[s] + 1
        blocks.append([
            residual_block_params(rng, ch, kind, support=supports[s], tied=tied)
            for _ in range(n_blocks)])

    seed_transfers = {}
    for s in range(1, len(scale_graphs)):
        for i in range(s):
            seed_transfers[(i, s)] = transfer_params(rng, node_counts[i], node_counts[s])

    stage_fusions = []
    for stage in range(1, n_stages + 1):
        active = [s for s in range(len(scale_graphs)) if join_stages[s] <= stage]
        fusion = {}
        for i in active:
            for k in active:
                if i != k:
                    fusion[(i, k)] = transfer_params(rng, node_counts[i], node_counts[k])
        stage_fusions.append(fusion)

    heads = {name: gconv_params(rng, ch, 3, kind, support=supports[s], tied=tied)
             for name, s in heads_on.items()}

    return HGNParams(
        config=resolved, variant=variant, node_counts=node_counts,
        adjacencies=adjacencies, join_stages=join_stages, pre=pre, pre_bn=pre_bn,
        blocks=blocks, seed_transfers=seed_transfers, stage_fusions=stage_fusions,
        heads=heads, head_scales=heads_on, hierarchy_snapshot=snapshot)


def build_ablation(config, hierarchy, variant):
    return build(config, hierarchy, variant=variant)


def forward(params, x2d, mode):
    """Staged forward pass; returns per-head coordinate Variables."""
    if not isinstance(x2d, Variable):
        x2d = Variable(np.asarray(x2d, dtype=np.float64))
    if x2d.value.ndim != 3 or x2d.value.shape[1:] != (skeleton.N_JOINTS, 2):
        raise ValueError(
            f"expected input of shape (batch, {skeleton.N_JOINTS}, 2), got {x2d.value.shape}")
    if not np.isfinite(x2d.value).all():
        raise ValueError("non-finite values in model input")

    n_stages = params.config.n_stages
    feats = [None] * params.n_scales
    for stage in range(1, n_stages + 1):
        for s in range(params.n_scales):
            if params.join_stages[s] != stage:
                continue
            if s == 0:
                x = gconv(params.pre, x2d, params.adjacencies[0])
                feats[0] = ad.relu(batch_norm(params.pre_bn, x, mode))
            else:
                seeded = None
                for i in range(s):
                    part = scale_transfer(params.seed_transfers[(i, s)], feats[i])
                    seeded = part if seeded is None else ad.add(seeded, part)
                feats[s] = seeded
        for s in range(params.n_scales):
            if feats[s] is not None:
                local = params.blocks[s][stage - params.join_stages[s]]
                feats[s] = residual_block(local, feats[s], params.adjacencies[s], mode)
        active = [s for s in range(params.n_scales) if feats[s] is not None]
        if len(active) > 1:
            fused = fuse(params.stage_fusions[stage - 1], [feats[s] for s in active])
            for s, y in zip(active, fused):
                feats[s] = y

    out = {}
    for name, s in params.head_scales.items():
        head = gconv(params.heads[name], feats[s], params.adjacencies[s])
        if not np.isfinite(head.value).all():
            raise FloatingPointError(f"non-finite values in {name} output")
        out[name] = head
    return ModelOutputs(pose=out["pose"], mesh_mid=out.get("mesh_mid"),
                        mesh_top=out.get("mesh_top"))


def _gconv_entries(prefix, p):
    yield f"{prefix}.w_self", p.w_self
    yield f"{prefix}.w_neigh", p.w_neigh
    yield f"{prefix}.bias", p.bias
    if p.t_vals is not None:
        yield f"{prefix}.t_vals", p.t_vals


def _block_entries(prefix, b):
    yield from _gconv_entries(f"{prefix}.conv1", b.conv1)
    yield f"{prefix}.bn1.gamma", b.bn1.gamma
    yield f"{prefix}.bn1.beta", b.bn1.beta
    yield from _gconv_entries(f"{prefix}.conv2", b.conv2)
    yield f"{prefix}.bn2.gamma", b.bn2.gamma
    yield f"{prefix}.bn2.beta", b.bn2.beta
    yield f"{prefix}.attn.theta", b.attention.theta
    yield f"{prefix}.attn.phi", b.attention.phi
    yield f"{prefix}.attn.g", b.attention.g
    yield f"{prefix}.attn.w_z", b.attention.w_z


def _transfer_entries(prefix, t):
    yield f"{prefix}.node_map", t.node_map
    if t.channel_map is not None:
        yield f"{prefix}.channel_map", t.channel_map


def named_parameters(params):
    """Ordered (name, Variable) pairs; a tensor reused under several
    fields (tied weights) appears once, under its first name."""
    pairs = []
    seen = set()

    def push(name, v):
        if id(v) not in seen:
            seen.add(id(v))
            pairs.append((name, v))

    for name, v in _gconv_entries("pre", params.pre):
        push(name, v)
    push("pre_bn.gamma", params.pre_bn.gamma)
    push("pre_bn.beta", params.pre_bn.beta)
    for s, scale_blocks in enumerate(params.blocks):
        for j, b in enumerate(scale_blocks):
            for name, v in _block_entries(f"scale{s}.block{j}", b):
                push(name, v)
    for (i, k) in sorted(params.seed_transfers):
        for name, v in _transfer_entries(f"seed.{i}to{k}", params.seed_transfers[(i, k)]):
            push(name, v)
    for st, fusion in enumerate(params.stage_fusions, start=1):
        for (i, k) in sorted(fusion):
            for name, v in _transfer_entries(f"stage{st}.fuse.{i}to{k}", fusion[(i, k)]):
                push(name, v)
    for head in sorted(params.heads):
        for name, v in _gconv_entries(f"head.{head}", params.heads[head]):
            push(name, v)
    return pairs


def named_bn_states(params):
    """Ordered (name, BatchNormState) pairs; running stats live here."""
    out = [("pre_bn", params.pre_bn)]
    for s, scale_blocks in enumerate(params.blocks):
        for j, b in enumerate(scale_blocks):
            out.append((f"scale{s}.block{j}.bn1", b.bn1))
            out.append((f"scale{s}.block{j}.bn2", b.bn2))
    return out


def param_count(params):
    return sum(v.value.size for _, v in named_parameters(params) if v.requires_grad)
