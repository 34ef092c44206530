"""Layer graphs for VGG-style chains and basic residual networks.

A :class:`GraphSpec` is an immutable, topologically ordered list of
:class:`LayerNode` plus the gate groups: sets of node ids whose output
activations are masked channel-wise by one shared agent vector.

Gate placement works on *channel spaces*. Every conv/dense layer opens a new
space; batchnorm, relu, pooling and the residual ``add`` pass their input
space through, and ``add`` merges the spaces of its inputs. A space gets one
gate group if any of its tensors feeds a conv, dense or add node, except the
raw image space (ungated unless asked) and the logits. The group's members are
exactly those feeding tensors, which puts both merge paths of a residual block
under the same agents.
"""
import json
from dataclasses import dataclass, field, replace

from .errors import GraphError

GRAPH_FORMAT = "decore-graph"
GRAPH_VERSION = 1

KINDS = ("input", "conv", "dense", "batchnorm", "relu", "maxpool", "globalavgpool", "add", "output")
COMPUTE_KINDS = ("conv", "dense")


@dataclass(frozen=True)
class LayerNode:
    id: int
    kind: str
    in_channels: int
    out_channels: int
    preds: tuple = ()
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    name: str = ""

    @property
    def params(self):
        """Names of this node's trainable parameters in a ParamStore."""
        if self.kind in COMPUTE_KINDS:
            return (f"{self.id}.weight", f"{self.id}.bias")
        if self.kind == "batchnorm":
            return (f"{self.id}.gamma", f"{self.id}.beta")
        return ()

    @property
    def buffers(self):
        if self.kind == "batchnorm":
            return (f"{self.id}.running_mean", f"{self.id}.running_var")
        return ()


@dataclass(frozen=True)
class GraphSpec:
    nodes: tuple
    input_shape: tuple
    num_classes: int
    gate_sites: dict = field(default_factory=dict)   # group id -> frozenset of node ids
    gate_input: bool = False

    def __post_init__(self):
        validate(self)

    def node(self, nid):
        return self._index()[nid]

    def _index(self):
        return {n.id: n for n in self.nodes}

    @property
    def output_node(self):
        return self.nodes[-1]

    @property
    def logits_node(self):
        return self.node(self.output_node.preds[0])

    def consumers(self):
        out = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for p in n.preds:
                out[p].append(n.id)
        return out

    def group_of(self):
        """Map member node id -> gate group id."""
        return {nid: g for g, members in self.gate_sites.items() for nid in members}

    def group_channels(self, gid):
        return self.node(min(self.gate_sites[gid])).out_channels

    def group_ids(self):
        return sorted(self.gate_sites)

    def with_gates(self, gate_sites, gate_input=False):
        return replace(self, gate_sites={g: frozenset(m) for g, m in gate_sites.items()},
                       gate_input=gate_input)

    # ------------------------------------------------------------- json io
    def to_dict(self):
        nodes = []
        for n in self.nodes:
            d = {"id": n.id, "kind": n.kind, "in_channels": n.in_channels,
                 "out_channels": n.out_channels, "preds": list(n.preds)}
            if n.kind == "conv":
                d.update(kernel=n.kernel, stride=n.stride, padding=n.padding)
            if n.name:
                d["name"] = n.name
            nodes.append(d)
        return {
            "format": GRAPH_FORMAT,
            "version": GRAPH_VERSION,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "gate_input": self.gate_input,
            "nodes": nodes,
            "gate_groups": [{"id": g, "channels": self.group_channels(g),
                             "members": sorted(self.gate_sites[g])} for g in self.group_ids()],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != GRAPH_FORMAT:
            raise GraphError(f"not a graph document (format={d.get('format')!r})")
        if d.get("version") != GRAPH_VERSION:
            raise GraphError(f"unsupported graph version {d.get('version')!r}, expected {GRAPH_VERSION}")
        nodes = tuple(
            LayerNode(id=n["id"], kind=n["kind"], in_channels=n["in_channels"],
                      out_channels=n["out_channels"], preds=tuple(n["preds"]),
                      kernel=n.get("kernel", 0), stride=n.get("stride", 1),
                      padding=n.get("padding", 0), name=n.get("name", ""))
            for n in d["nodes"])
        sites = {g["id"]: frozenset(g["members"]) for g in d.get("gate_groups", [])}
        return cls(nodes=nodes, input_shape=tuple(d["input_shape"]), num_classes=d["num_classes"],
                   gate_sites=sites, gate_input=d.get("gate_input", False))

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, s):
        return cls.from_dict(json.loads(s))


def validate(g):
    if not g.nodes:
        raise GraphError("graph has no nodes")
    seen = {}
    for n in g.nodes:
        if n.kind not in KINDS:
            raise GraphError(f"node {n.id}: unknown kind {n.kind!r}")
        if n.id in seen:
            raise GraphError(f"duplicate node id {n.id}")
        for p in n.preds:
            if p not in seen:
                raise GraphError(f"node {n.id}: predecessor {p} is not earlier in topological order")
        if n.in_channels < 1 or n.out_channels < 1:
            raise GraphError(f"node {n.id}: channel counts must be positive")
        if n.kind == "input":
            if n.preds:
                raise GraphError("input node cannot have predecessors")
        elif n.kind == "add":
            if len(n.preds) < 2:
                raise GraphError(f"add node {n.id} needs at least two predecessors")
            widths = {seen[p].out_channels for p in n.preds}
            if len(widths) != 1:
                raise GraphError(f"add node {n.id} merges unequal widths {sorted(widths)}")
        elif len(n.preds) != 1:
            raise GraphError(f"node {n.id} ({n.kind}) needs exactly one predecessor")
        if n.kind != "input":
            if n.in_channels != seen[n.preds[0]].out_channels:
                raise GraphError(f"node {n.id}: in_channels {n.in_channels} != predecessor width "
                                 f"{seen[n.preds[0]].out_channels}")
            if n.kind not in COMPUTE_KINDS and n.out_channels != n.in_channels:
                raise GraphError(f"node {n.id} ({n.kind}) cannot change channel count")
        seen[n.id] = n
    inputs = [n for n in g.nodes if n.kind == "input"]
    outputs = [n for n in g.nodes if n.kind == "output"]
    if len(inputs) != 1 or g.nodes[0].kind != "input":
        raise GraphError("graph needs exactly one input node, first in order")
    if len(outputs) != 1 or g.nodes[-1].kind != "output":
        raise GraphError("graph needs exactly one output node, last in order")
    logits = seen[g.nodes[-1].preds[0]]
    if logits.kind != "dense" or logits.out_channels != g.num_classes:
        raise GraphError("output must follow a dense layer producing num_classes logits")
    owner = {}
    for gid, members in g.gate_sites.items():
        widths = set()
        for nid in members:
            if nid not in seen:
                raise GraphError(f"gate group {gid} references unknown node {nid}")
            if nid == logits.id or seen[nid].kind == "output":
                raise GraphError(f"gate group {gid} would mask the logits")
            if nid in owner:
                raise GraphError(f"node {nid} is in gate groups {owner[nid]} and {gid}")
            owner[nid] = gid
            widths.add(seen[nid].out_channels)
        if len(widths) != 1:
            raise GraphError(f"gate group {gid} members have differing widths {sorted(widths)}")


class _Builder:
    def __init__(self, input_shape):
        self.nodes = []
        self.input_shape = tuple(input_shape)
        self.add("input", self.input_shape[0], self.input_shape[0], ())

    def add(self, kind, cin, cout, preds, **kw):
        nid = len(self.nodes)
        self.nodes.append(LayerNode(nid, kind, cin, cout, tuple(preds), **kw))
        return nid

    def width(self, nid):
        return self.nodes[nid].out_channels

    def conv(self, src, cout, kernel=3, stride=1, padding=None, name=""):
        pad = kernel // 2 if padding is None else padding
        return self.add("conv", self.width(src), cout, (src,), kernel=kernel, stride=stride,
                        padding=pad, name=name)

    def unary(self, kind, src):
        return self.add(kind, self.width(src), self.width(src), (src,))

    def dense(self, src, cout, name=""):
        return self.add("dense", self.width(src), cout, (src,), name=name)

    def finish(self, logits, k):
        self.add("output", k, k, (logits,))
        return GraphSpec(tuple(self.nodes), self.input_shape, k)


def build_vgg_tiny(channel_plan, fc_width, num_classes, input_shape=(3, 32, 32), pool_after=None):
    """conv3x3-BN-ReLU stages with 2x2 max pools, global average pool, then
    dense(fc_width)-ReLU-dense(num_classes).

    ``pool_after`` lists the conv indices followed by a pool; by default every
    conv is pooled while the feature map stays even-sized.
    """
    plan = list(channel_plan)
    if not plan:
        raise GraphError("channel_plan must not be empty")
    if fc_width < 1 or num_classes < 1 or any(c < 1 for c in plan):
        raise GraphError("widths and class count must be positive")
    b = _Builder(input_shape)
    cur = 0
    h, w = input_shape[1:]
    for i, width in enumerate(plan):
        cur = b.conv(cur, width, name=f"conv{i + 1}")
        cur = b.unary("batchnorm", cur)
        cur = b.unary("relu", cur)
        pool = (h % 2 == 0 and w % 2 == 0 and h >= 2) if pool_after is None else i in pool_after
        if pool:
            if h % 2 or w % 2:
                raise GraphError(f"cannot pool after conv {i + 1}: feature map {h}x{w} is odd")
            cur = b.unary("maxpool", cur)
            h, w = h // 2, w // 2
    cur = b.unary("globalavgpool", cur)
    cur = b.dense(cur, fc_width, name="fc1")
    cur = b.unary("relu", cur)
    cur = b.dense(cur, num_classes, name="fc2")
    return b.finish(cur, num_classes)


VGG16_CIFAR_PLAN = (64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512)
VGG16_CIFAR_POOLS = (1, 3, 6, 9, 12)


def build_vgg16_cifar(num_classes=10):
    """The CIFAR variant of VGG16 used for parameter/FLOPs accounting.

    After five pools the 512x1x1 map is averaged (identical to flattening it)
    and fed to a 512-unit hidden layer. Totals: 14,991,946 parameters and
    313,463,808 MACs on 3x32x32 input.
    """
    return build_vgg_tiny(VGG16_CIFAR_PLAN, 512, num_classes, (3, 32, 32), VGG16_CIFAR_POOLS)


def build_resnet_tiny(stage_plan, num_classes, input_shape=(3, 32, 32), projection=True):
    """Stem conv followed by one basic residual block per entry of
    ``stage_plan``. A block whose width differs from its input uses a strided
    1x1 projection shortcut (stride 2 when the map can be halved)."""
    plan = list(stage_plan)
    if not plan:
        raise GraphError("stage_plan must not be empty")
    b = _Builder(input_shape)
    h, w = input_shape[1:]
    cur = b.conv(0, plan[0], name="stem")
    cur = b.unary("batchnorm", cur)
    cur = b.unary("relu", cur)
    for i, width in enumerate(plan):
        cin = b.width(cur)
        change = width != cin
        if change and not projection:
            raise GraphError(f"block {i + 1}: width {cin} -> {width} needs a projection shortcut")
        stride = 2 if change and h % 2 == 0 and w % 2 == 0 and h >= 4 else 1
        x = cur
        y = b.conv(x, width, stride=stride, name=f"block{i + 1}.conv1")
        y = b.unary("batchnorm", y)
        y = b.unary("relu", y)
        y = b.conv(y, width, name=f"block{i + 1}.conv2")
        y = b.unary("batchnorm", y)
        if change:
            s = b.conv(x, width, kernel=1, stride=stride, padding=0, name=f"block{i + 1}.proj")
            s = b.unary("batchnorm", s)
        else:
            s = x
        cur = b.add("add", width, width, (y, s))
        cur = b.unary("relu", cur)
        if stride == 2:
            h, w = h // 2, w // 2
    cur = b.unary("globalavgpool", cur)
    cur = b.dense(cur, num_classes, name="fc")
    return b.finish(cur, num_classes)


def channel_spaces(graph):
    """Union-find over node outputs: node id -> space id (the smallest node
    id in the space). Nodes in one space share a channel index set."""
    parent = {}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for n in graph.nodes:
        parent[n.id] = n.id
        if n.kind in COMPUTE_KINDS or n.kind == "input":
            continue
        if n.kind == "output":
            continue
        for p in n.preds:
            ra, rb = find(n.id), find(p)
            if ra != rb:
                lo, hi = min(ra, rb), max(ra, rb)
                parent[hi] = lo
    return {nid: find(nid) for nid in parent}


def gate_plan(graph, gate_input=False):
    """Compute gate groups without attaching them: {group id: member ids}.

    Group ids are assigned 0, 1, ... in order of the space's first node.
    """
    space = channel_spaces(graph)
    logits = graph.logits_node.id
    feeders = {}
    for n in graph.nodes:
        if n.kind in COMPUTE_KINDS or n.kind == "add":
            for p in n.preds:
                feeders.setdefault(space[p], set()).add(p)
    input_space = space[graph.nodes[0].id]
    groups = {}
    for sid in sorted(feeders):
        if sid == input_space and not gate_input:
            continue
        if space[logits] == sid:
            continue
        groups[len(groups)] = frozenset(feeders[sid])
    return groups


def attach_gates(graph, gate_input=False, init=None):
    """Attach gate groups to ``graph`` and create the matching agent bank.

    Returns ``(gated_graph, bank)``; every agent starts at ``init``
    (6.9 by default, i.e. keep probability ~0.99).
    """
    from .agents import AgentBank, DEFAULT_INIT

    gated = graph.with_gates(gate_plan(graph, gate_input), gate_input)
    bank = AgentBank.for_graph(gated, DEFAULT_INIT if init is None else init)
    return gated, bank
