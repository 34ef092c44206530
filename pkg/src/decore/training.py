"""Joint training of network weights and channel agents, checkpoints, metrics.

Schedule (epochs counted from 0):

* ``epoch < policy_stop_epoch`` -- every batch samples masks, runs one masked
  forward, takes a cross-entropy step on the network (when
  ``joint_training``) and a REINFORCE ascent step on the agents, both from
  that single forward.
* ``policy_stop_epoch <= epoch < epochs`` -- agents are frozen, channels with
  keep probability below ``threshold`` are masked out and the surviving
  subnetwork is fine-tuned.
* After the last epoch the masked channels are physically removed.

Random streams are derived from ``(seed, purpose, epoch, batch)`` so a resumed
run draws exactly what an uninterrupted run would have drawn.
"""
import base64
import csv
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import accounting, graph as graphs
from .agents import AgentBank, GRANULARITIES, PER_SAMPLE, sample_actions
from .errors import CheckpointError
from .model import backward, forward, init_params, predict
from .rewards import RewardConfig, compute_rewards, reinforce_gradient
from .runtime import ParamState, ParamStore, softmax_xent

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "decore-checkpoint"
CHECKPOINT_VERSION = 1
METRICS_HEADER = ("epoch", "batch", "loss", "train_acc", "mean_R_acc", "mean_R_C", "mean_R", "kept_fraction",
                  "eval_acc")

_INIT, _SHUFFLE, _POLICY = 1, 2, 3


@dataclass
class TrainConfig:
    epochs: int = 60
    policy_stop_epoch: int = 45
    batch_size: int = 64
    network_lr: float = 0.001
    policy_lr: float = 0.01
    penalty: float = 5.0
    seed: int = 0
    granularity: str = PER_SAMPLE
    joint_training: bool = True
    threshold: float = 0.5
    arch: str = "vgg_tiny"
    widths: tuple = (16, 32)
    fc_width: int = 64

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if not 0 < self.policy_stop_epoch <= self.epochs:
            raise ValueError(f"need 0 < policy_stop_epoch <= epochs, got {self.policy_stop_epoch}, {self.epochs}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if self.penalty < 0:
            raise ValueError("penalty must be >= 0")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"granularity must be one of {GRANULARITIES}")
        if self.arch not in ("vgg_tiny", "resnet_tiny"):
            raise ValueError(f"unknown arch {self.arch!r}")

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def build_graph(self, input_shape, num_classes):
        if self.arch == "vgg_tiny":
            return graphs.build_vgg_tiny(self.widths, self.fc_width, num_classes, tuple(input_shape))
        return graphs.build_resnet_tiny(self.widths, num_classes, tuple(input_shape))


# ------------------------------------------------------------- checkpoint

def _enc(a):
    return {"shape": list(a.shape), "data": base64.b64encode(np.asarray(a, dtype="<f4").tobytes()).decode("ascii")}


def _dec(d):
    raw = base64.b64decode(d["data"], validate=True)
    arr = np.frombuffer(raw, dtype="<f4").astype(np.float32)
    return arr.reshape(d["shape"]) if d["shape"] else arr.reshape(())


def params_to_dict(store):
    return {
        "params": {k: {"value": _enc(p.value), "m": _enc(p.m), "v": _enc(p.v), "step": p.step}
                   for k, p in sorted(store.params.items())},
        "buffers": {k: _enc(b) for k, b in sorted(store.buffers.items())},
    }


def params_from_dict(d):
    store = ParamStore()
    for k, p in d["params"].items():
        store.params[k] = ParamState(_dec(p["value"]), None, _dec(p["m"]), _dec(p["v"]), p["step"])
    for k, b in d["buffers"].items():
        store.buffers[k] = _dec(b)
    return store


@dataclass
class Checkpoint:
    graph: object
    params: object
    bank: object
    config: object
    epoch: int
    stage: str = "decore"          # baseline | decore | pruned
    rng: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def to_dict(self):
        return {
            "format": CHECKPOINT_FORMAT,
            "version": self.version,
            "stage": self.stage,
            "epoch": self.epoch,
            "graph": self.graph.to_dict(),
            "network": params_to_dict(self.params),
            "agents": self.bank.to_dict(),
            "config": self.config.to_dict(),
            "rng": self.rng,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict) or d.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError("not a checkpoint document")
        if d.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint version {d.get('version')!r} is not supported "
                                  f"(this build reads version {CHECKPOINT_VERSION})",
                                  found=d.get("version"), supported=CHECKPOINT_VERSION)
        try:
            g = graphs.GraphSpec.from_dict(d["graph"])
            ck = cls(g, params_from_dict(d["network"]), AgentBank.from_dict(d["agents"]),
                     TrainConfig.from_dict(d["config"]), d["epoch"], d["stage"], d["rng"], d.get("extra", {}))
            ck.bank.check_graph(g)
        except CheckpointError:
            raise
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"corrupt checkpoint: {e}") from e
        return ck


def dumps_json(obj):
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def atomic_write_text(path, text):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    os.replace(tmp, path)


def save_checkpoint(ckpt, path):
    atomic_write_text(path, dumps_json(ckpt.to_dict()))


def load_checkpoint(path):
    try:
        with open(path, encoding="utf-8") as f:
            d = json.load(f)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: not valid JSON ({e.msg} at line {e.lineno} column {e.colno})") from e
    return Checkpoint.from_dict(d)


# ---------------------------------------------------------------- metrics

def metrics_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow(["" if r.get(k) is None else (repr(r[k]) if isinstance(r[k], float) else r[k])
                    for k in METRICS_HEADER])
    return buf.getvalue()


# ------------------------------------------------------------------ train

def evaluate(graph, params, dataset, masks=None):
    """Fraction of correct argmax predictions, inference-mode batchnorm."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = predict(graph, params, dataset.images, masks)
    return float(np.mean(pred == dataset.labels))


def _check_data(graph, ds, what):
    if ds is None:
        return
    if ds.num_classes != graph.num_classes:
        raise ValueError(f"{what} set has {ds.num_classes} classes, network has {graph.num_classes}")
    if tuple(ds.shape) != tuple(graph.input_shape):
        raise ValueError(f"{what} images have shape {ds.shape}, network expects {tuple(graph.input_shape)}")


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    if n <= batch_size:
        return [perm]
    return [perm[i * batch_size:(i + 1) * batch_size] for i in range(n // batch_size)]


def masks_from_keep(graph, keep):
    out = {}
    for g in graph.group_ids():
        m = np.zeros(graph.group_channels(g), dtype=np.float32)
        m[keep[g]] = 1.0
        out[g] = m
    return out


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list
    pruned: Checkpoint = None
    report: object = None
    agent_updates: int = 0


def _fresh_optimizer(store):
    for p in store.params.values():
        p.m[...] = 0
        p.v[...] = 0
        p.step = 0


def train(config, train_set, eval_set=None, init=None, resume=False, until=None):
    """Run the schedule. ``init`` seeds the network from a checkpoint (e.g. a
    pretrained baseline); with ``resume`` the checkpoint's agents, optimiser
    state and epoch counter are continued as well. ``until`` stops after that
    many epochs (for checkpoint/resume)."""
    if resume and init is None:
        raise ValueError("resume needs an init checkpoint")
    if init is not None:
        graph = init.graph
        params = init.params.copy()
        if resume:
            bank = init.bank.copy()
            start = init.epoch
        else:
            graph, bank = graphs.attach_gates(graphs.GraphSpec(graph.nodes, graph.input_shape, graph.num_classes))
            _fresh_optimizer(params)
            start = 0
    else:
        graph, bank = graphs.attach_gates(config.build_graph(train_set.shape, train_set.num_classes))
        params = init_params(graph, np.random.default_rng([config.seed, _INIT]))
        start = 0
    _check_data(graph, train_set, "train")
    _check_data(graph, eval_set, "eval")
    reward_cfg = RewardConfig(config.penalty)
    rows = []
    updates = 0
    frozen = None
    if start >= config.policy_stop_epoch:
        frozen = masks_from_keep(graph, accounting.keep_indices(bank, config.threshold))

    end = config.epochs if until is None else min(until, config.epochs)
    for epoch in range(start, end):
        if epoch == config.policy_stop_epoch:
            frozen = masks_from_keep(graph, accounting.keep_indices(bank, config.threshold))
            log.info("epoch %d: agents frozen, %d/%d channels kept", epoch,
                     int(sum(m.sum() for m in frozen.values())), bank.total_agents)
        policy_phase = epoch < config.policy_stop_epoch
        update_net = config.joint_training or not policy_phase
        batches = _batches(len(train_set), config.batch_size, np.random.default_rng([config.seed, _SHUFFLE, epoch]))
        for b, idx in enumerate(batches):
            x = train_set.images[idx]
            y = train_set.labels[idx]
            row = {"epoch": epoch, "batch": b}
            if policy_phase:
                rng = np.random.default_rng([config.seed, _POLICY, epoch, b])
                sample = sample_actions(bank, rng, len(idx), config.granularity, seed=(config.seed, epoch, b))
                masks = sample
            else:
                masks = frozen
            logits, cache = forward(graph, params, x, masks, mode="train" if update_net else "inference")
            loss, dlogits = softmax_xent(logits, y)
            pred = np.argmax(logits, axis=1)
            row["loss"] = loss
            row["train_acc"] = float(np.mean(pred == y))
            if update_net:
                backward(graph, params, cache, dlogits)
                params.step(config.network_lr)
            if policy_phase:
                rewards = compute_rewards(sample, pred, y, reward_cfg)
                bank.ascent_step(reinforce_gradient(sample, rewards), config.policy_lr)
                updates += 1
                row["mean_R_acc"], row["mean_R_C"], row["mean_R"] = rewards.means()
                kept = sum(float(a.sum()) * (1 if a.ndim == 2 else len(idx)) for a in sample.actions.values())
                row["kept_fraction"] = kept / (bank.total_agents * len(idx)) if bank.total_agents else 1.0
            else:
                total = sum(m.size for m in masks.values())
                row["kept_fraction"] = float(sum(m.sum() for m in masks.values()) / total) if total else 1.0
            rows.append(row)
        if eval_set is not None and rows:
            cur = frozen if frozen is not None else masks_from_keep(
                graph, accounting.keep_indices(bank, config.threshold))
            rows[-1]["eval_acc"] = evaluate(graph, params, eval_set, cur)

    ckpt = Checkpoint(graph, params, bank, config, max(end, start), "decore",
                      {"seed": config.seed, "next_epoch": max(end, start)})
    g2, p2, b2, keep = accounting.prune(graph, params, bank, config.threshold)
    report = accounting.compression_report(
        graph, g2,
        evaluate(graph, params, eval_set) if eval_set is not None else None,
        evaluate(g2, p2, eval_set) if eval_set is not None else None)
    pruned = Checkpoint(g2, p2, b2, config, ckpt.epoch, "pruned", dict(ckpt.rng))
    return TrainResult(ckpt, rows, pruned, report, updates)


def _fit(graph, params, config, train_set, eval_set, epochs, first_epoch=0):
    rows = []
    for epoch in range(first_epoch, first_epoch + epochs):
        batches = _batches(len(train_set), config.batch_size, np.random.default_rng([config.seed, _SHUFFLE, epoch]))
        for b, idx in enumerate(batches):
            logits, cache = forward(graph, params, train_set.images[idx], None, "train")
            loss, dlogits = softmax_xent(logits, train_set.labels[idx])
            backward(graph, params, cache, dlogits)
            params.step(config.network_lr)
            rows.append({"epoch": epoch, "batch": b, "loss": loss, "kept_fraction": 1.0,
                         "train_acc": float(np.mean(np.argmax(logits, 1) == train_set.labels[idx]))})
        if eval_set is not None:
            rows[-1]["eval_acc"] = evaluate(graph, params, eval_set)
    return rows


def train_baseline(config, train_set, eval_set=None, epochs=None):
    """Plain cross-entropy training of the ungated network (same init, data
    order and optimiser as :func:`train`)."""
    graph = config.build_graph(train_set.shape, train_set.num_classes)
    _check_data(graph, train_set, "train")
    _check_data(graph, eval_set, "eval")
    params = init_params(graph, np.random.default_rng([config.seed, _INIT]))
    n_epochs = config.epochs if epochs is None else epochs
    rows = _fit(graph, params, config, train_set, eval_set, n_epochs)
    gated, bank = graphs.attach_gates(graph)
    ckpt = Checkpoint(gated, params, bank, config, n_epochs, "baseline", {"seed": config.seed})
    return TrainResult(ckpt, rows)


def fine_tune(ckpt, train_set, eval_set=None, epochs=1):
    """Train every weight of an (already pruned) checkpoint without masks.
    Returns a new checkpoint; the input is not modified."""
    _check_data(ckpt.graph, train_set, "train")
    _check_data(ckpt.graph, eval_set, "eval")
    params = ckpt.params.copy()
    _fresh_optimizer(params)
    rows = _fit(ckpt.graph, params, ckpt.config, train_set, eval_set, epochs, ckpt.epoch)
    out = Checkpoint(ckpt.graph, params, ckpt.bank.copy(), ckpt.config, ckpt.epoch + epochs, ckpt.stage,
                     dict(ckpt.rng), dict(ckpt.extra))
    return TrainResult(out, rows)
