"""Compression and accuracy rewards and the REINFORCE estimator.

Each gate group is one layer of agents. A group's reward for sample ``b`` is

    R[b, g] = (number of channels dropped in g) * (1 if correct else -penalty)

and the ascent gradient for agent ``j`` of group ``g`` is

    grad_j = mean_b (a[b, j] - p_j) * R[b, g]

Each group follows its own reward, so the estimator is unbiased for
d E[R_g] / d w_j with j in g (not for the gradient of the sum over groups).
"""
import itertools
from dataclasses import dataclass

import numpy as np

from .agents import ActionSample, log_prob_grad, sigmoid
from .errors import ShapeError

DEFAULT_PENALTY_GRID = (5, 10, 50, 100, 200, 500)
MAX_EXACT_CHANNELS = 10


@dataclass(frozen=True)
class RewardConfig:
    penalty: float = 100.0

    def __post_init__(self):
        if not self.penalty >= 0:
            raise ValueError(f"penalty must be >= 0, got {self.penalty}")


@dataclass(frozen=True)
class RewardBatch:
    compression: dict   # gid -> (N,) dropped-channel counts
    accuracy: np.ndarray  # (N,) values in {1, -penalty}
    combined: dict      # gid -> (N,)

    def means(self):
        rc = np.mean([c.mean() for c in self.compression.values()]) if self.compression else 0.0
        r = np.mean([c.mean() for c in self.combined.values()]) if self.combined else 0.0
        return float(self.accuracy.mean()), float(rc), float(r)


def compression_reward(actions):
    """Dropped-channel count per group. Per-sample actions (N, C) give (N,);
    a per-batch vector (C,) gives a scalar."""
    return {g: (1.0 - np.asarray(a, dtype=np.float64)).sum(axis=-1) for g, a in actions.items()}


def accuracy_reward(predictions, labels, penalty):
    if penalty < 0:
        raise ValueError("penalty must be >= 0")
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ShapeError("predictions and labels differ in shape", dim="batch",
                         expected=labels.shape, got=predictions.shape)
    return np.where(predictions == labels, 1.0, -float(penalty))


def combined_reward(r_c, r_acc):
    """R = R_C * R_acc per sample; per-batch (scalar) R_C broadcast over the batch."""
    r_acc = np.asarray(r_acc, dtype=np.float64)
    out = {}
    for g, rc in r_c.items():
        rc = np.asarray(rc, dtype=np.float64)
        if rc.ndim and rc.shape != r_acc.shape:
            raise ShapeError(f"group {g}: compression reward shape {rc.shape} != accuracy reward shape "
                             f"{r_acc.shape}", dim="batch", expected=r_acc.shape, got=rc.shape)
        out[g] = rc * r_acc
    return out


def compute_rewards(sample, predictions, labels, config):
    r_c = compression_reward(sample.actions)
    r_acc = accuracy_reward(predictions, labels, config.penalty)
    n = r_acc.shape[0]
    r_c = {g: np.broadcast_to(v, (n,)).astype(np.float64) for g, v in r_c.items()}
    return RewardBatch(r_c, r_acc, combined_reward(r_c, r_acc))


def reinforce_gradient(sample, rewards, batch_size=None):
    """Ascent direction for every agent weight, {gid: (C,)}.

    ``rewards`` is {gid: (N,)} (or a RewardBatch). Per-batch actions are
    treated as the same action for every sample.
    """
    if isinstance(rewards, RewardBatch):
        rewards = rewards.combined
    coef = log_prob_grad(sample)
    grads = {}
    for g, c in coef.items():
        r = np.asarray(rewards[g], dtype=np.float64)
        n = r.shape[0] if batch_size is None else batch_size
        if r.ndim != 1 or r.shape[0] != n:
            raise ShapeError(f"group {g}: rewards shape {r.shape}, expected ({n},)", dim="batch",
                             expected=n, got=r.shape)
        if c.ndim == 2:
            if c.shape[0] != n:
                raise ShapeError(f"group {g}: actions for {c.shape[0]} samples, rewards for {n}",
                                 dim="batch", expected=n, got=c.shape[0])
            grads[g] = (c * r[:, None]).sum(axis=0) / n
        else:
            grads[g] = c * r.sum() / n
    return grads


# ---------------------------------------------------------------- oracle

def _enumerate(bank):
    gids = bank.group_ids()
    sizes = [bank.weights[g].size for g in gids]
    total = sum(sizes)
    if total > MAX_EXACT_CHANNELS:
        raise ValueError(f"exact enumeration supports at most {MAX_EXACT_CHANNELS} channels, bank has {total}")
    for bits in itertools.product((0.0, 1.0), repeat=total):
        masks, off = {}, 0
        for g, s in zip(gids, sizes):
            masks[g] = np.array(bits[off:off + s])
            off += s
        yield masks


def _mask_prob(weights, masks):
    logp = 0.0
    for g, m in masks.items():
        p = sigmoid(weights[g])
        logp += float(np.sum(np.where(m > 0, np.log(p), np.log1p(-p))))
    return np.exp(logp)


def _expectation(weights, masks_list, values):
    return sum(_mask_prob(weights, m) * v for m, v in zip(masks_list, values))


def expected_reward_exact(bank, reward_fn, h=1e-5):
    """Exact expected reward by enumerating every mask, and its gradient by
    central finite differences in the agent weights.

    ``reward_fn(masks)`` returns a float, or {gid: float} for per-group
    rewards. In the per-group case ``J`` is {gid: E[R_g]} and the gradient
    for an agent in group g is d E[R_g] / d w (each layer follows its own
    reward).
    """
    masks_list = list(_enumerate(bank))
    values = [reward_fn(m) for m in masks_list]
    per_group = isinstance(values[0], dict)
    w0 = {g: bank.weights[g].copy() for g in bank.group_ids()}

    def J(weights, g=None):
        vals = [v[g] for v in values] if per_group else values
        return _expectation(weights, masks_list, vals)

    if per_group:
        j_val = {g: J(w0, g) for g in bank.group_ids()}
    else:
        j_val = J(w0)
    grad = {}
    for g in bank.group_ids():
        grad[g] = np.zeros_like(w0[g])
        for j in range(w0[g].size):
            wp = {k: v.copy() for k, v in w0.items()}
            wm = {k: v.copy() for k, v in w0.items()}
            wp[g][j] += h
            wm[g][j] -= h
            target = g if per_group else None
            grad[g][j] = (J(wp, target) - J(wm, target)) / (2 * h)
    return j_val, grad


def expected_reinforce_exact(bank, reward_fn):
    """Exact expectation of the single-sample REINFORCE estimator,
    sum_a pi(a) (a - p) R_g(a), by enumeration."""
    probs = {g: sigmoid(bank.weights[g]) for g in bank.group_ids()}
    out = {g: np.zeros_like(probs[g]) for g in bank.group_ids()}
    for masks in _enumerate(bank):
        pi = _mask_prob(bank.weights, masks)
        r = reward_fn(masks)
        for g in bank.group_ids():
            rg = r[g] if isinstance(r, dict) else r
            out[g] += pi * (masks[g] - probs[g]) * rg
    return out


def layer_reward_fn(correct_fn, penalty):
    """Per-group combined reward for one deterministic sample: drop count of
    the group times +1/-penalty, where ``correct_fn(masks)`` says whether the
    masked network predicts correctly."""
    def fn(masks):
        acc = 1.0 if correct_fn(masks) else -float(penalty)
        return {g: float((1 - m).sum()) * acc for g, m in masks.items()}
    return fn


def sample_from_masks(bank, masks):
    """Wrap explicit masks (per-sample (N, C) or (C,)) as an ActionSample."""
    probs = {g: sigmoid(bank.weights[g]) for g in bank.group_ids()}
    gran = "per_sample" if np.ndim(next(iter(masks.values()))) == 2 else "per_batch"
    return ActionSample(probs, {g: np.asarray(m, dtype=np.float32) for g, m in masks.items()}, gran)
