"""Gated forward and backward passes over a GraphSpec."""
from dataclasses import dataclass

import numpy as np

from . import runtime as rt
from .agents import ActionSample
from .errors import ShapeError, StaleCacheError
from .runtime import ParamState, ParamStore


def init_params(graph, rng, dtype=np.float32):
    """He-normal conv/dense weights, zero biases, identity batchnorm."""
    store = ParamStore()
    for n in graph.nodes:
        if n.kind == "conv":
            fan_in = n.in_channels * n.kernel * n.kernel
            w = rng.standard_normal((n.out_channels, n.in_channels, n.kernel, n.kernel))
            store.params[f"{n.id}.weight"] = ParamState((w * np.sqrt(2.0 / fan_in)).astype(dtype))
            store.params[f"{n.id}.bias"] = ParamState(np.zeros(n.out_channels, dtype))
        elif n.kind == "dense":
            w = rng.standard_normal((n.out_channels, n.in_channels))
            store.params[f"{n.id}.weight"] = ParamState((w * np.sqrt(2.0 / n.in_channels)).astype(dtype))
            store.params[f"{n.id}.bias"] = ParamState(np.zeros(n.out_channels, dtype))
        elif n.kind == "batchnorm":
            store.params[f"{n.id}.gamma"] = ParamState(np.ones(n.out_channels, dtype))
            store.params[f"{n.id}.beta"] = ParamState(np.zeros(n.out_channels, dtype))
            store.buffers[f"{n.id}.running_mean"] = np.zeros(n.out_channels, dtype)
            store.buffers[f"{n.id}.running_var"] = np.ones(n.out_channels, dtype)
    return store


@dataclass
class ForwardCache:
    graph: object
    version: int
    mode: str
    masks: dict             # node id -> broadcastable mask
    caches: dict            # node id -> primitive cache
    batch: int


def _resolve_masks(graph, masks, batch):
    """Validate per-group masks and broadcast each to (batch, C)."""
    if isinstance(masks, ActionSample):
        masks = masks.actions
    if set(masks) != set(graph.group_ids()):
        raise ShapeError(f"masks cover groups {sorted(masks)}, graph has {graph.group_ids()}",
                         dim="gate_groups", expected=graph.group_ids(), got=sorted(masks))
    out = {}
    for g in graph.group_ids():
        m = np.asarray(masks[g])
        c = graph.group_channels(g)
        if m.ndim not in (1, 2) or m.shape[-1] != c or (m.ndim == 2 and m.shape[0] != batch):
            raise ShapeError(f"mask for group {g} has shape {m.shape}; expected ({c},) or ({batch}, {c})",
                             dim="mask", expected=c, got=m.shape)
        out[g] = np.broadcast_to(m, (batch, c))
    return out


def forward(graph, params, x, masks=None, mode="train"):
    """Run the network. ``masks`` is an ActionSample or {group id: mask}
    (mask shape (C,) shared over the batch, or (N, C) per sample). Each
    member node's output is multiplied by its group's mask."""
    in_shape = tuple(graph.input_shape)
    if x.ndim != 4 or tuple(x.shape[1:]) != in_shape:
        raise ShapeError(f"input batch has shape {x.shape}, graph expects (N, {', '.join(map(str, in_shape))})",
                         dim="input_shape", expected=in_shape, got=tuple(x.shape[1:]))
    if mode not in ("train", "inference"):
        raise ValueError(f"unknown mode {mode!r}")
    batch = x.shape[0]
    acts = {}
    caches = {}
    node_masks = {}
    group_masks = {} if masks is None else _resolve_masks(graph, masks, batch)
    owner = graph.group_of()
    for n in graph.nodes:
        if n.kind == "input":
            y = x
        else:
            a = acts[n.preds[0]]
            p = n.id
            if n.kind == "conv":
                y, caches[p] = rt.conv2d_forward(a, params[f"{p}.weight"], params[f"{p}.bias"], n.stride, n.padding)
            elif n.kind == "dense":
                y, caches[p] = rt.dense_forward(a, params[f"{p}.weight"], params[f"{p}.bias"])
            elif n.kind == "batchnorm":
                y, caches[p] = rt.batchnorm_forward(
                    a, params[f"{p}.gamma"], params[f"{p}.beta"], params.buffers[f"{p}.running_mean"],
                    params.buffers[f"{p}.running_var"], mode)
            elif n.kind == "relu":
                y, caches[p] = rt.relu_forward(a)
            elif n.kind == "maxpool":
                y, caches[p] = rt.maxpool2_forward(a)
            elif n.kind == "globalavgpool":
                y, caches[p] = rt.globalavgpool_forward(a)
            elif n.kind == "add":
                y = acts[n.preds[0]]
                for q in n.preds[1:]:
                    y = y + acts[q]
            else:  # output
                y = a
        if group_masks and n.id in owner:
            m = group_masks[owner[n.id]]
            m = m.reshape(m.shape + (1,) * (y.ndim - 2)).astype(y.dtype)
            node_masks[n.id] = m
            y = y * m
        acts[n.id] = y
    logits = acts[graph.output_node.id]
    return logits, ForwardCache(graph, params.version, mode, node_masks, caches, batch)


def backward(graph, params, cache, dlogits):
    """Backpropagate ``dlogits`` through a cached train-mode forward.

    Sets ``.grad`` on every network parameter and returns {name: grad}.
    Agent weights are not touched.
    """
    if cache.graph is not graph and cache.graph != graph:
        raise StaleCacheError("forward cache was produced by a different graph")
    if cache.version != params.version:
        raise StaleCacheError(f"forward cache is from parameter version {cache.version}, "
                              f"parameters are now at version {params.version}")
    if cache.mode != "train":
        raise ValueError("backward needs a cache from a train-mode forward")
    grads = {}
    upstream = {graph.output_node.id: dlogits}

    def push(nid, g):
        if nid in upstream:
            upstream[nid] = upstream[nid] + g
        else:
            upstream[nid] = g

    for n in reversed(graph.nodes):
        if n.id not in upstream:
            continue
        d = upstream.pop(n.id)
        if n.id in cache.masks:
            d = d * cache.masks[n.id]
        p = n.id
        c = cache.caches.get(p)
        if n.kind == "input":
            continue
        if n.kind == "conv":
            dx, grads[f"{p}.weight"], grads[f"{p}.bias"] = rt.conv2d_backward(d, c)
        elif n.kind == "dense":
            dx, grads[f"{p}.weight"], grads[f"{p}.bias"] = rt.dense_backward(d, c)
        elif n.kind == "batchnorm":
            dx, grads[f"{p}.gamma"], grads[f"{p}.beta"] = rt.batchnorm_backward(d, c)
        elif n.kind == "relu":
            dx = rt.relu_backward(d, c)
        elif n.kind == "maxpool":
            dx = rt.maxpool2_backward(d, c)
        elif n.kind == "globalavgpool":
            dx = rt.globalavgpool_backward(d, c)
        elif n.kind == "add":
            for q in n.preds:
                push(q, d)
            continue
        else:
            dx = d
        push(n.preds[0], dx)
    for name, st in params.params.items():
        g = grads.get(name)
        st.grad = np.zeros_like(st.value) if g is None else g.astype(st.value.dtype).reshape(st.value.shape)
        grads[name] = st.grad
    return grads


def predict(graph, params, x, masks=None, batch_size=256):
    """Inference-mode argmax predictions, evaluated in chunks."""
    out = []
    for s in range(0, x.shape[0], batch_size):
        m = masks
        if masks is not None:
            m = {g: (a[s:s + batch_size] if np.ndim(a) == 2 else a)
                 for g, a in (masks.actions if isinstance(masks, ActionSample) else masks).items()}
        logits, _ = forward(graph, params, x[s:s + batch_size], m, mode="inference")
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
