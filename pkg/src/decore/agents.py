"""Per-channel agents: one real weight per gated channel.

An agent's keep probability is ``sigmoid(w)``; actions are independent
Bernoulli draws (1 keeps the channel, 0 drops it).
"""
from dataclasses import dataclass

import numpy as np

DEFAULT_INIT = 6.9
PER_SAMPLE = "per_sample"
PER_BATCH = "per_batch"
GRANULARITIES = (PER_SAMPLE, PER_BATCH)


def sigmoid(w):
    w = np.asarray(w, dtype=np.float64)
    # split by sign so neither branch overflows
    out = np.empty_like(w)
    pos = w >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-w[pos]))
    e = np.exp(w[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class AgentBank:
    """Agent weights per gate group, with Adam moments for the policy update.

    ``weights[gid]`` is a float64 vector with one entry per channel of that
    group.
    """

    def __init__(self, weights, init=DEFAULT_INIT, m=None, v=None, step=0):
        self.weights = {int(g): np.array(w, dtype=np.float64) for g, w in weights.items()}
        for g, w in self.weights.items():
            if not np.all(np.isfinite(w)):
                raise ValueError(f"agent weights of group {g} are not finite")
        self.init = float(init)
        self.m = {g: np.zeros_like(w) for g, w in self.weights.items()} if m is None else \
            {int(g): np.array(a, dtype=np.float64) for g, a in m.items()}
        self.v = {g: np.zeros_like(w) for g, w in self.weights.items()} if v is None else \
            {int(g): np.array(a, dtype=np.float64) for g, a in v.items()}
        self.step = int(step)

    @classmethod
    def for_graph(cls, graph, init=DEFAULT_INIT):
        return cls({g: np.full(graph.group_channels(g), init) for g in graph.group_ids()}, init)

    def group_ids(self):
        return sorted(self.weights)

    @property
    def total_agents(self):
        return sum(w.size for w in self.weights.values())

    def copy(self):
        return AgentBank(self.weights, self.init, self.m, self.v, self.step)

    def check_graph(self, graph):
        if self.group_ids() != graph.group_ids():
            raise ValueError(f"bank groups {self.group_ids()} do not match graph groups {graph.group_ids()}")
        for g in self.group_ids():
            if self.weights[g].size != graph.group_channels(g):
                raise ValueError(f"group {g}: {self.weights[g].size} agents for "
                                 f"{graph.group_channels(g)} channels")

    def ascent_step(self, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        """Adam step that *increases* the objective whose gradient is ``grads``."""
        self.step += 1
        c1 = 1 - beta1 ** self.step
        c2 = 1 - beta2 ** self.step
        for g in self.group_ids():
            d = -np.asarray(grads[g], dtype=np.float64)   # minimise -J
            self.m[g] = beta1 * self.m[g] + (1 - beta1) * d
            self.v[g] = beta2 * self.v[g] + (1 - beta2) * d * d
            self.weights[g] = self.weights[g] - lr * (self.m[g] / c1) / (np.sqrt(self.v[g] / c2) + eps)

    def subset(self, keep):
        """Bank restricted to the kept channel indices ``keep[gid]``."""
        sel = {g: np.asarray(keep[g]) for g in self.group_ids()}
        return AgentBank({g: self.weights[g][sel[g]] for g in sel}, self.init,
                         {g: self.m[g][sel[g]] for g in sel}, {g: self.v[g][sel[g]] for g in sel},
                         self.step)

    def to_dict(self):
        return {
            "init": self.init,
            "step": self.step,
            "groups": [{"id": g, "weights": self.weights[g].tolist(), "m": self.m[g].tolist(),
                        "v": self.v[g].tolist()} for g in self.group_ids()],
        }

    @classmethod
    def from_dict(cls, d):
        gs = d["groups"]
        return cls({g["id"]: g["weights"] for g in gs}, d["init"],
                   {g["id"]: g["m"] for g in gs}, {g["id"]: g["v"] for g in gs}, d["step"])


@dataclass(frozen=True)
class ActionSample:
    """Sampled masks. ``actions[gid]`` is (batch, C) for per-sample
    granularity and (C,) for per-batch; ``probs[gid]`` is (C,)."""
    probs: dict
    actions: dict
    granularity: str
    seed: tuple = ()

    def batch_masks(self, batch_size):
        """Masks broadcast to (batch, C) float arrays."""
        out = {}
        for g, a in self.actions.items():
            out[g] = np.broadcast_to(a, (batch_size, a.shape[-1])) if a.ndim == 1 else a
        return out


def keep_probabilities(bank):
    return {g: sigmoid(bank.weights[g]) for g in bank.group_ids()}


def sample_actions(bank, rng, batch_size, granularity=PER_SAMPLE, seed=()):
    """Independent Bernoulli(p_j) keep decisions.

    ``rng`` is a ``numpy.random.Generator``; groups are drawn in ascending id
    order, so one generator state fully determines the sample.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if granularity not in GRANULARITIES:
        raise ValueError(f"granularity must be one of {GRANULARITIES}, got {granularity!r}")
    probs = keep_probabilities(bank)
    actions = {}
    for g in bank.group_ids():
        p = probs[g]
        shape = (batch_size, p.size) if granularity == PER_SAMPLE else (p.size,)
        actions[g] = (rng.random(shape) < p).astype(np.float32)
    return ActionSample(probs, actions, granularity, tuple(seed))


def deterministic_mask(bank, threshold=0.5):
    """Keep channel j iff p_j >= threshold."""
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return {g: (p >= threshold).astype(np.float32) for g, p in keep_probabilities(bank).items()}


def log_prob_grad(sample):
    """d/dw log Bernoulli(a | sigmoid(w)) = a - p, per group, same shape as
    the actions."""
    return {g: sample.actions[g].astype(np.float64) - sample.probs[g] for g in sample.actions}


def bernoulli_log_prob(w, a):
    """sum_j a_j log p_j + (1 - a_j) log(1 - p_j), computed stably."""
    w = np.asarray(w, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    # log sigmoid(w) = -log1p(exp(-w)); log(1 - sigmoid(w)) = -log1p(exp(w))
    return float(np.sum(-a * np.logaddexp(0, -w) - (1 - a) * np.logaddexp(0, w)))
