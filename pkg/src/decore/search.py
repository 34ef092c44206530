"""Retraining-free architecture search under a memory or FLOPs budget.

Channels are removed one at a time in ascending agent-weight order until the
budget is met. A channel whose removal would empty its gate group is skipped.
"""
from dataclasses import dataclass

import numpy as np

from .accounting import compression_report, count_flops, count_params, prune_channels, rank_agents
from .errors import ConstraintError


@dataclass(frozen=True)
class Constraint:
    max_bytes: int = None
    max_flops: int = None
    bytes_per_param: int = 4

    def __post_init__(self):
        if (self.max_bytes is None) == (self.max_flops is None):
            raise ValueError("give exactly one of max_bytes or max_flops")

    @property
    def limit(self):
        return self.max_bytes if self.max_bytes is not None else self.max_flops

    def measure(self, graph, group_sizes=None):
        if self.max_bytes is not None:
            return count_params(graph, group_sizes) * self.bytes_per_param
        return count_flops(graph, group_sizes=group_sizes)

    def to_dict(self):
        if self.max_bytes is not None:
            return {"max_bytes": self.max_bytes, "bytes_per_param": self.bytes_per_param}
        return {"max_flops": self.max_flops}


def verify_constraint(graph, constraint):
    """Return ``(satisfied, measured)``."""
    measured = constraint.measure(graph)
    return measured <= constraint.limit, measured


@dataclass
class SearchResult:
    graph: object
    params: object
    keep: dict
    removed: list        # (gid, channel) in removal order
    measured: int
    report: object


def search_by_constraint(graph, params, bank, constraint):
    """Drop lowest-weight channels until ``constraint`` holds.

    Works on the graph as given (all channels present); the network weights
    and bank are not modified.
    """
    sizes = {g: bank.weights[g].size for g in bank.group_ids()}
    kept = {g: np.ones(sizes[g], dtype=bool) for g in sizes}
    removed = []
    measured = constraint.measure(graph, sizes)
    if measured > constraint.limit:
        for g, j in rank_agents(bank, "lowest"):
            if sizes[g] == 1:
                continue
            sizes[g] -= 1
            kept[g][j] = False
            removed.append((g, j))
            measured = constraint.measure(graph, sizes)
            if measured <= constraint.limit:
                break
    if measured > constraint.limit:
        raise ConstraintError(
            f"budget {constraint.limit} is below the one-channel-per-group floor of {measured}",
            floor=measured)
    keep = {g: np.flatnonzero(kept[g]) for g in kept}
    g2, p2 = prune_channels(graph, params, keep)
    report = compression_report(graph, g2)
    report.extra.update(constraint=constraint.to_dict(), measured=measured, satisfied=True,
                        removed=len(removed))
    return SearchResult(g2, p2, keep, removed, measured, report)
