"""Differentiable graph layers for the pose lifting network.

All layers are pure functions over Variables plus small parameter
containers, so the same code serves training (inside a Tape) and
inference (no tape, no recording).  Aggregation matrices derived from a
NormalizedAdjacency are constants; only the containers' Variables train.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Variable


def glorot_uniform(rng, shape):
    """Uniform init scaled by fan-in + fan-out; rows are output channels."""
    fan_out, fan_in = shape[0], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _expect_nodes(who, x, n_nodes):
    if x.value.ndim < 2 or x.value.shape[-2] != n_nodes:
        raise ValueError(f"{who}: expected {n_nodes} nodes, got input shape {x.value.shape}")


# ---------------------------------------------------------------------------
# graph convolutions
# ---------------------------------------------------------------------------

@dataclass
class GConvParams:
    """Weights of one graph convolution.

    w_self and w_neigh may be the same Variable (weight tying); the
    semantic kind additionally carries attention logits t_vals over the
    flat support positions of an n_nodes x n_nodes grid.
    """

    kind: str            # "vanilla" | "semantic"
    w_self: Variable     # (d_out, d_in)
    w_neigh: Variable    # (d_out, d_in)
    bias: Variable       # (d_out,)
    t_vals: Optional[Variable] = None
    t_index: Optional[np.ndarray] = None
    n_nodes: int = 0

    def __post_init__(self):
        if self.w_self.value.shape != self.w_neigh.value.shape:
            raise ValueError("w_self and w_neigh must share shape")
        if (self.t_vals is not None) != (self.kind == "semantic"):
            raise ValueError(f"t_vals must be present iff kind is semantic, got {self.kind!r}")

    @property
    def d_out(self):
        return self.w_self.value.shape[0]

    @property
    def d_in(self):
        return self.w_self.value.shape[1]


def gconv_params(rng, d_in, d_out, kind, support=None, tied=False):
    """Glorot weights, zero bias; semantic kind gets zero attention logits
    (uniform attention at init) over the given boolean support."""
    w_self = Variable(glorot_uniform(rng, (d_out, d_in)), requires_grad=True)
    w_neigh = w_self if tied else Variable(
        glorot_uniform(rng, (d_out, d_in)), requires_grad=True)
    bias = Variable(np.zeros(d_out), requires_grad=True)
    if kind == "vanilla":
        return GConvParams(kind, w_self, w_neigh, bias)
    if kind != "semantic":
        raise ValueError(f"unknown gconv kind {kind!r}")
    support = np.asarray(support, dtype=bool)
    flat = np.flatnonzero(support)
    t_vals = Variable(np.zeros(flat.size), requires_grad=True)
    return GConvParams(kind, w_self, w_neigh, bias,
                       t_vals=t_vals, t_index=flat, n_nodes=support.shape[0])


def masked_softmax(t, support):
    """Row softmax of t restricted to the boolean support.

    Supported entries of each row are normalised among themselves with
    max-subtraction; off-support entries come out exactly 0.
    """
    support = np.asarray(support, dtype=bool)
    if t.value.shape[-2:] != support.shape:
        raise ValueError(
            f"masked_softmax: logits {t.value.shape} do not match support {support.shape}")
    empty = ~support.any(axis=1)
    if empty.any():
        raise ValueError(f"masked_softmax: empty support on row(s) {np.flatnonzero(empty).tolist()}")
    row_max = np.where(support, t.value, -np.inf).max(axis=-1, keepdims=True)
    # off-support positions shift to 0 so exp never overflows there
    shift = np.where(support, np.broadcast_to(row_max, t.value.shape), t.value)
    e = ad.exp(ad.sub(t, Variable(shift)))
    masked = ad.hadamard(e, Variable(support.astype(np.float64)))
    return ad.div(masked, ad.vsum(masked, axis=-1, keepdims=True))


def vanilla_gconv(p, x, a_tilde):
    """Fixed-weight aggregation: the normalized adjacency's diagonal scales
    the self transform, its off-diagonal part mixes the neighbor transform."""
    if p.kind != "vanilla":
        raise ValueError(f"vanilla_gconv: got kind {p.kind!r}")
    _expect_nodes("vanilla_gconv", x, a_tilde.n_nodes)
    diag = np.diag(a_tilde.matrix)
    self_term = ad.hadamard(ad.matmul(x, ad.transpose(p.w_self)), Variable(diag[:, None]))
    off = a_tilde.matrix - np.diag(diag)
    neigh_term = ad.matmul(ad.matmul(Variable(off), x), ad.transpose(p.w_neigh))
    return ad.add(ad.add(self_term, neigh_term), p.bias)


def sem_gconv(p, x, a_tilde):
    """Learned aggregation: attention logits, softmax-normalised over the
    adjacency support, replace the fixed adjacency values."""
    if p.kind != "semantic":
        raise ValueError(f"sem_gconv: got kind {p.kind!r}")
    if p.n_nodes != a_tilde.n_nodes:
        raise ValueError(
            f"sem_gconv: attention built for {p.n_nodes} nodes, adjacency has {a_tilde.n_nodes}")
    _expect_nodes("sem_gconv", x, a_tilde.n_nodes)
    n = a_tilde.n_nodes
    t_dense = ad.scatter(p.t_vals, p.t_index, (n, n))
    attn = masked_softmax(t_dense, a_tilde.support)
    eye = np.eye(n)
    p_diag = ad.vsum(ad.hadamard(attn, Variable(eye)), axis=-1, keepdims=True)
    self_term = ad.hadamard(ad.matmul(x, ad.transpose(p.w_self)), p_diag)
    p_off = ad.hadamard(attn, Variable(1.0 - eye))
    neigh_term = ad.matmul(ad.matmul(p_off, x), ad.transpose(p.w_neigh))
    return ad.add(ad.add(self_term, neigh_term), p.bias)


def gconv(p, x, a_tilde):
    if p.kind == "vanilla":
        return vanilla_gconv(p, x, a_tilde)
    return sem_gconv(p, x, a_tilde)


# ---------------------------------------------------------------------------
# non-local block
# ---------------------------------------------------------------------------

@dataclass
class NonLocalParams:
    theta: Variable  # (d_embed, d)
    phi: Variable    # (d_embed, d)
    g: Variable      # (d_embed, d)
    w_z: Variable    # (d, d_embed)

    @property
    def d_embed(self):
        return self.theta.value.shape[0]

    @property
    def d(self):
        return self.theta.value.shape[1]


def nonlocal_params(rng, d):
    """Embedding dim d // 2 (at least 1); every matrix Glorot-initialized."""
    de = max(1, d // 2)
    mk = lambda shape: Variable(glorot_uniform(rng, shape), requires_grad=True)
    return NonLocalParams(theta=mk((de, d)), phi=mk((de, d)), g=mk((de, d)),
                          w_z=mk((d, de)))


def _row_softmax(s):
    shift = s.value.max(axis=-1, keepdims=True)
    e = ad.exp(ad.sub(s, Variable(np.broadcast_to(shift, s.value.shape).copy())))
    return ad.div(e, ad.vsum(e, axis=-1, keepdims=True))


def nonlocal_attention(p, x):
    q = ad.matmul(x, ad.transpose(p.theta))
    k = ad.matmul(x, ad.transpose(p.phi))
    return _row_softmax(ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(p.d_embed)))


def non_local(p, x):
    """Scaled dot-product attention over nodes, added back residually."""
    if x.value.shape[-1] != p.d:
        raise ValueError(f"non_local: built for width {p.d}, got input shape {x.value.shape}")
    attn = nonlocal_attention(p, x)
    y = ad.matmul(attn, ad.matmul(x, ad.transpose(p.g)))
    return ad.add(x, ad.matmul(y, ad.transpose(p.w_z)))


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BatchNormState:
    gamma: Variable           # (d,)
    beta: Variable            # (d,)
    running_mean: np.ndarray  # (d,), updated in train mode
    running_var: np.ndarray   # (d,), biased, updated in train mode
    momentum: float = 0.1
    eps: float = 1e-5


def bn_state(d, momentum=0.1, eps=1e-5):
    return BatchNormState(
        gamma=Variable(np.ones(d), requires_grad=True),
        beta=Variable(np.zeros(d), requires_grad=True),
        running_mean=np.zeros(d), running_var=np.ones(d),
        momentum=momentum, eps=eps)


def batch_norm(state, x, mode):
    """Normalize each channel over all leading dims (batch and nodes pooled).

    Train mode uses biased batch statistics and folds them into the running
    stats; eval mode applies the running stats as constants.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"batch_norm: unknown mode {mode!r}")
    d = x.value.shape[-1]
    if state.gamma.value.shape != (d,):
        raise ValueError(f"batch_norm: state is {state.gamma.value.shape[0]}-channel, input has {d}")
    if mode == "eval":
        centered = ad.sub(x, Variable(state.running_mean))
        scaled = ad.div(centered, Variable(np.sqrt(state.running_var + state.eps)))
        return ad.add(ad.hadamard(scaled, state.gamma), state.beta)

    n = x.value.size // d
    if n < 2:
        raise ValueError(f"batch_norm: train mode needs >= 2 samples per channel, got {n}")
    flat = ad.reshape(x, (n, d))
    mean = ad.vmean(flat, axis=0, keepdims=True)
    centered = ad.sub(flat, mean)
    var = ad.vmean(ad.square(centered), axis=0, keepdims=True)
    scaled = ad.div(centered, ad.sqrt(ad.add(var, Variable(np.full((1, d), state.eps)))))
    out = ad.add(ad.hadamard(scaled, state.gamma), state.beta)
    m = state.momentum
    state.running_mean = (1.0 - m) * state.running_mean + m * mean.value[0]
    state.running_var = (1.0 - m) * state.running_var + m * var.value[0]
    return ad.reshape(out, x.value.shape)


# ---------------------------------------------------------------------------
# residual block
# ---------------------------------------------------------------------------

@dataclass
class ResidualBlockParams:
    conv1: GConvParams
    bn1: BatchNormState
    conv2: GConvParams
    bn2: BatchNormState
    attention: NonLocalParams


def residual_block_params(rng, d, kind, support=None, tied=False,
                          momentum=0.1, eps=1e-5):
    return ResidualBlockParams(
        conv1=gconv_params(rng, d, d, kind, support=support, tied=tied),
        bn1=bn_state(d, momentum=momentum, eps=eps),
        conv2=gconv_params(rng, d, d, kind, support=support, tied=tied),
        bn2=bn_state(d, momentum=momentum, eps=eps),
        attention=nonlocal_params(rng, d))


def residual_block(p, x, a_tilde, mode):
    h = ad.relu(batch_norm(p.bn1, gconv(p.conv1, x, a_tilde), mode))
    h = ad.relu(batch_norm(p.bn2, gconv(p.conv2, h, a_tilde), mode))
    return non_local(p.attention, ad.add(x, h))


# ---------------------------------------------------------------------------
# cross-scale transfer and fusion
# ---------------------------------------------------------------------------

@dataclass
class ScaleTransferParams:
    """Dense learned map over the node dimension; channel_map None means
    the channel transform is the identity (no extra parameters)."""

    node_map: Variable                    # (n_out, n_in)
    channel_map: Optional[Variable] = None  # (d, d)

    @property
    def n_in(self):
        return self.node_map.value.shape[1]

    @property
    def n_out(self):
        return self.node_map.value.shape[0]


def transfer_params(rng, n_in, n_out, node_init=None, channel_dim=None):
    node = glorot_uniform(rng, (n_out, n_in)) if node_init is None else np.asarray(node_init)
    if node.shape != (n_out, n_in):
        raise ValueError(f"transfer_params: node_init shape {node.shape} != ({n_out}, {n_in})")
    channel = None
    if channel_dim is not None:
        channel = Variable(glorot_uniform(rng, (channel_dim, channel_dim)), requires_grad=True)
    return ScaleTransferParams(node_map=Variable(node.copy(), requires_grad=True),
                               channel_map=channel)


def scale_transfer(p, x):
    if x.value.ndim < 2 or x.value.shape[-2] != p.n_in:
        raise ValueError(
            f"scale_transfer: node map takes {p.n_in} nodes, got input shape {x.value.shape}")
    out = ad.matmul(p.node_map, x)
    if p.channel_map is not None:
        out = ad.matmul(out, ad.transpose(p.channel_map))
    return out


def fuse(transfers, xs):
    """Per-scale sum of the scale's own features (identity path) and the
    transferred features of every other scale."""
    n_scales = len(xs)
    ys = []
    for k in range(n_scales):
        y = xs[k]
        for i in range(n_scales):
            if i == k:
                continue
            if (i, k) not in transfers:
                raise ValueError(f"fuse: missing transfer {i} -> {k}")
            y = ad.add(y, scale_transfer(transfers[(i, k)], xs[i]))
        ys.append(y)
    return ys
