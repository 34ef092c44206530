"""Parameter/FLOPs accounting and physical channel pruning.

FLOPs follow the multiply-accumulate convention: one MAC is one FLOP, and
only conv and dense layers are counted (no batchnorm, activation or pooling
cost). Parameter counts include conv/dense biases and the two affine
batchnorm vectors.
"""
import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np

from .agents import keep_probabilities
from .graph import COMPUTE_KINDS, channel_spaces
from .runtime import ParamState, ParamStore


def _space_groups(graph):
    """space id -> gate group id, for gated spaces."""
    space = channel_spaces(graph)
    return {space[min(m)]: g for g, m in graph.gate_sites.items()}, space


def effective_widths(graph, group_sizes=None):
    """Output width of every node when group g keeps group_sizes[g] channels."""
    if not group_sizes:
        return {n.id: n.out_channels for n in graph.nodes}
    sg, space = _space_groups(graph)
    out = {}
    for n in graph.nodes:
        g = sg.get(space[n.id])
        out[n.id] = group_sizes[g] if g is not None and g in group_sizes else n.out_channels
    return out


def count_params(graph, group_sizes=None):
    w = effective_widths(graph, group_sizes)
    total = 0
    for n in graph.nodes:
        if n.kind == "conv":
            total += n.kernel * n.kernel * w[n.preds[0]] * w[n.id] + w[n.id]
        elif n.kind == "dense":
            total += w[n.preds[0]] * w[n.id] + w[n.id]
        elif n.kind == "batchnorm":
            total += 2 * w[n.id]
    return total


def spatial_sizes(graph, input_shape=None):
    """(H, W) of every node's output."""
    shape = tuple(graph.input_shape if input_shape is None else input_shape)
    hw = {}
    for n in graph.nodes:
        if n.kind == "input":
            hw[n.id] = (shape[-2], shape[-1])
            continue
        h, w = hw[n.preds[0]]
        if n.kind == "conv":
            h = (h + 2 * n.padding - n.kernel) // n.stride + 1
            w = (w + 2 * n.padding - n.kernel) // n.stride + 1
        elif n.kind == "maxpool":
            h, w = h // 2, w // 2
        elif n.kind in ("globalavgpool", "dense"):
            h, w = 1, 1
        hw[n.id] = (h, w)
    return hw


def count_flops(graph, input_shape=None, group_sizes=None):
    w = effective_widths(graph, group_sizes)
    hw = spatial_sizes(graph, input_shape)
    total = 0
    for n in graph.nodes:
        if n.kind == "conv":
            oh, ow = hw[n.id]
            total += n.kernel * n.kernel * w[n.preds[0]] * w[n.id] * oh * ow
        elif n.kind == "dense":
            total += w[n.preds[0]] * w[n.id]
    return total


# ------------------------------------------------------------------ prune

def keep_indices(bank, threshold=0.5):
    """Kept channel indices per group (p >= threshold); a group that would be
    emptied keeps its single most probable channel."""
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    out = {}
    for g, p in keep_probabilities(bank).items():
        idx = np.flatnonzero(p >= threshold)
        if idx.size == 0:
            idx = np.array([int(np.argmax(p))])
        out[g] = idx
    return out


def prune_channels(graph, params, keep):
    """Physically remove every channel not listed in ``keep[gid]``.

    Producers lose output filters, consumers lose the matching input slices
    and batchnorm entries follow their space. Returns a new graph and
    parameter store; the inputs are not modified.
    """
    sg, space = _space_groups(graph)
    sel = {}
    for n in graph.nodes:
        g = sg.get(space[n.id])
        sel[n.id] = np.asarray(keep[g], dtype=np.intp) if g is not None else np.arange(n.out_channels)
    nodes = []
    for n in graph.nodes:
        cin = n.in_channels if n.kind == "input" else sel[n.preds[0]].size
        nodes.append(replace(n, in_channels=cin, out_channels=sel[n.id].size))
    new_graph = replace(graph, nodes=tuple(nodes))

    store = ParamStore()

    def put(name, fn):
        st = params.params[name]
        store.params[name] = ParamState(*(np.ascontiguousarray(fn(a)) for a in (st.value, st.grad, st.m, st.v)),
                                        step=st.step)

    for n in graph.nodes:
        o = sel[n.id]
        if n.kind in COMPUTE_KINDS:
            i = sel[n.preds[0]]
            put(f"{n.id}.weight", lambda a, o=o, i=i: a[o][:, i])
            put(f"{n.id}.bias", lambda a, o=o: a[o])
        elif n.kind == "batchnorm":
            put(f"{n.id}.gamma", lambda a, o=o: a[o])
            put(f"{n.id}.beta", lambda a, o=o: a[o])
            for b in n.buffers:
                store.buffers[b] = np.ascontiguousarray(params.buffers[b][o])
    return new_graph, store


def prune(graph, params, bank, threshold=0.5):
    """Threshold the bank and remove dropped channels.

    Returns ``(graph, params, bank, keep)`` for the compressed network; the
    returned bank holds only the surviving agents.
    """
    keep = keep_indices(bank, threshold)
    g2, p2 = prune_channels(graph, params, keep)
    return g2, p2, bank.subset(keep), keep


# ----------------------------------------------------------------- report

def pruned_rate(before, after):
    if before <= 0:
        return 0.0
    return round((1.0 - after / before) * 100.0, 1)


@dataclass
class CompressionReport:
    params_before: int
    params_after: int
    flops_before: int
    flops_after: int
    layers: list = field(default_factory=list)   # [{"node", "name", "kind", "before", "after"}]
    accuracy_before: float = None
    accuracy_after: float = None
    extra: dict = field(default_factory=dict)

    @property
    def params_pr(self):
        return pruned_rate(self.params_before, self.params_after)

    @property
    def flops_pr(self):
        return pruned_rate(self.flops_before, self.flops_after)

    def to_dict(self):
        d = {
            "params_before": self.params_before, "params_after": self.params_after,
            "params_pruned_rate": self.params_pr,
            "flops_before": self.flops_before, "flops_after": self.flops_after,
            "flops_pruned_rate": self.flops_pr,
            "accuracy_before": self.accuracy_before, "accuracy_after": self.accuracy_after,
            "layers": self.layers,
        }
        d.update(self.extra)
        return d

    def layers_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["node", "name", "kind", "channels_before", "channels_after"])
        for row in self.layers:
            w.writerow([row["node"], row["name"], row["kind"], row["before"], row["after"]])
        return buf.getvalue()


def compression_report(original, pruned, accuracy_before=None, accuracy_after=None):
    layers = []
    after = {n.id: n for n in pruned.nodes}
    for n in original.nodes:
        if n.kind in COMPUTE_KINDS:
            layers.append({"node": n.id, "name": n.name, "kind": n.kind, "before": n.out_channels,
                           "after": after[n.id].out_channels})
    return CompressionReport(count_params(original), count_params(pruned), count_flops(original),
                             count_flops(pruned), layers, accuracy_before, accuracy_after)


# --------------------------------------------------------------- ablation

def rank_agents(bank, order="lowest"):
    """All (gid, channel) pairs sorted by agent weight; ties by group id then
    channel index."""
    if order not in ("highest", "lowest"):
        raise ValueError(f"order must be 'highest' or 'lowest', got {order!r}")
    entries = [(float(w), g, j) for g in bank.group_ids() for j, w in enumerate(bank.weights[g])]
    sign = -1.0 if order == "highest" else 1.0
    entries.sort(key=lambda e: (sign * e[0], e[1], e[2]))
    return [(g, j) for _, g, j in entries]


def ablation_masks(bank, k, order):
    if not 0 <= k <= bank.total_agents:
        raise ValueError(f"k must lie in [0, {bank.total_agents}], got {k}")
    masks = {g: np.ones(bank.weights[g].size, dtype=np.float32) for g in bank.group_ids()}
    for g, j in rank_agents(bank, order)[:k]:
        masks[g][j] = 0.0
    return masks


def ablate_topk(graph, params, bank, k, order, dataset):
    """Accuracy with the k highest- (or lowest-) weight channels zero-masked.
    The network and bank are left untouched."""
    from .training import evaluate

    masks = ablation_masks(bank, k, order)
    if k == 0:
        return evaluate(graph, params, dataset)
    return evaluate(graph, params, dataset, masks)
