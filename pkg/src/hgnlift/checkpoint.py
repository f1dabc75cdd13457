"""Self-contained binary checkpoints: a magic line, a JSON header, and one
packed little-endian float64 blob.

The header carries everything needed to rebuild the model without outside
state: the resolved model configuration, the variant, the selected hierarchy
levels (edges plus composed cluster maps), an index of tensor names, shapes,
and byte offsets, and optimizer scalars.  Writing contains no timestamps or
environment data, so identical training runs produce byte-identical files.
"""
from __future__ import annotations

import json

import numpy as np

from .graphs import Graph, HierarchySnapshot, SelectedLevel
from .model import HGNConfig, build, named_bn_states, named_parameters

MAGIC = b"HGNCKPT1\n"
CHECKPOINT_VERSION = 1


def _snapshot_payload(snapshot):
    if snapshot is None:
        return None
    return {
        "n_source": int(snapshot.n_source),
        "selected": [
            {
                "target": int(sl.target),
                "level_index": int(sl.level_index),
                "n_nodes": int(sl.graph.n_nodes),
                "edges": [[int(a), int(b), float(w)] for a, b, w in sl.graph.edges()],
                "composed_map": [int(c) for c in sl.composed_map],
            }
            for sl in snapshot.selected
        ],
    }


def _snapshot_from_payload(payload):
    if payload is None:
        return None
    selected = []
    for sl in payload["selected"]:
        graph = Graph(sl["n_nodes"], [tuple(e) for e in sl["edges"]])
        selected.append(SelectedLevel(
            target=sl["target"], level_index=sl["level_index"], graph=graph,
            composed_map=np.asarray(sl["composed_map"], dtype=np.int64)))
    return HierarchySnapshot(n_source=payload["n_source"], selected=selected)


def _named_tensors(params, optimizer=None):
    """Every float array the checkpoint must restore, in a fixed order:
    parameters, batch-norm running stats, then optimizer moments."""
    tensors = [(name, p.value) for name, p in named_parameters(params)]
    for name, state in named_bn_states(params):
        tensors.append((f"{name}.running_mean", state.running_mean))
        tensors.append((f"{name}.running_var", state.running_var))
    if optimizer is not None:
        for key in sorted(optimizer.m):
            tensors.append((f"adam.m.{key}", optimizer.m[key]))
        for key in sorted(optimizer.v):
            tensors.append((f"adam.v.{key}", optimizer.v[key]))
    return tensors


def save_checkpoint(path, params, optimizer=None, train_config=None):
    """Write model parameters, batch-norm statistics, and (optionally) Adam
    state.  `train_config` is an arbitrary JSON-compatible echo stored for
    provenance."""
    cfg = params.config
    tensors = _named_tensors(params, optimizer)
    index = []
    offset = 0
    blobs = []
    for name, value in tensors:
        data = np.ascontiguousarray(value, dtype="<f8").tobytes()
        index.append({"name": name, "shape": list(value.shape), "offset": offset})
        blobs.append(data)
        offset += len(data)
    header = {
        "version": CHECKPOINT_VERSION,
        "model_config": {
            "channels": cfg.channels,
            "gconv_kind": cfg.gconv_kind,
            "blocks_per_scale": list(cfg.blocks_per_scale),
            "scale_node_counts": None if cfg.scale_node_counts is None
            else list(cfg.scale_node_counts),
            "top_scale_join_stage": cfg.top_scale_join_stage,
            "seed": cfg.seed,
        },
        "variant": params.variant,
        "hierarchy": _snapshot_payload(params.hierarchy_snapshot),
        "optimizer": None if optimizer is None else {
            "t": optimizer.t,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
        },
        "train_config": train_config,
        "blob_bytes": offset,
        "tensors": index,
    }
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(json.dumps(header, separators=(",", ":")).encode() + b"\n")
        for data in blobs:
            f.write(data)


def load_checkpoint(path):
    """Rebuild (params, optimizer_state_or_None, header) from a checkpoint.

    The model is reconstructed from the stored configuration and hierarchy
    snapshot, then every tensor is overwritten from the blob; a file whose
    blob or index disagrees with the rebuilt shapes is rejected.
    """
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        header_line = f.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}: malformed checkpoint header ({e})") from e
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(
                f"{path}: unsupported checkpoint version {header.get('version')!r}, "
                f"this reader handles {CHECKPOINT_VERSION}")
        blob = f.read()
    if len(blob) != header["blob_bytes"]:
        raise ValueError(
            f"{path}: truncated checkpoint: expected {header['blob_bytes']} tensor bytes, "
            f"found {len(blob)}")
    cfg = HGNConfig(
        channels=header["model_config"]["channels"],
        gconv_kind=header["model_config"]["gconv_kind"],
        blocks_per_scale=tuple(header["model_config"]["blocks_per_scale"]),
        scale_node_counts=None if header["model_config"]["scale_node_counts"] is None
        else tuple(header["model_config"]["scale_node_counts"]),
        top_scale_join_stage=header["model_config"]["top_scale_join_stage"],
        seed=header["model_config"]["seed"],
    )
    snapshot = _snapshot_from_payload(header["hierarchy"])
    params = build(cfg, snapshot, variant=header["variant"])
    targets = {}
    for name, p in named_parameters(params):
        targets[name] = ("param", p)
    for name, state in named_bn_states(params):
        targets[f"{name}.running_mean"] = ("buffer", (state, "running_mean"))
        targets[f"{name}.running_var"] = ("buffer", (state, "running_var"))
    opt_header = header["optimizer"]
    optimizer = None
    if opt_header is not None:
        from .training import AdamState

        optimizer = AdamState(
            m={}, v={}, t=opt_header["t"],
            beta1=opt_header["beta1"], beta2=opt_header["beta2"], eps=opt_header["eps"])
    seen = set()
    for entry in header["tensors"]:
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = offset + 8 * count
        if end > len(blob):
            raise ValueError(f"{path}: tensor {name} runs past the end of the blob")
        value = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        value = value.reshape(shape).astype(np.float64)
        if name.startswith("adam.m.") or name.startswith("adam.v."):
            if optimizer is None:
                raise ValueError(f"{path}: optimizer tensor {name} without optimizer header")
            kind, key = name.split(".", 2)[1], name.split(".", 2)[2]
            getattr(optimizer, kind)[key] = value
        elif name in targets:
            kind, target = targets[name]
            if kind == "param":
                if target.value.shape != value.shape:
                    raise ValueError(
                        f"{path}: tensor {name} has shape {value.shape}, "
                        f"model expects {target.value.shape}")
                target.value = value
            else:
                state, field = target
                setattr(state, field, value)
        else:
            raise ValueError(f"{path}: unknown tensor {name}")
        seen.add(name)
    missing = {n for n in targets} - seen
    if missing:
        raise ValueError(f"{path}: checkpoint is missing tensors {sorted(missing)[:3]}")
    return params, optimizer, header
