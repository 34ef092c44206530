import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from decore.accounting import (ablate_topk, ablation_masks, compression_report, count_flops, count_params,
                               keep_indices, prune, prune_channels, pruned_rate, rank_agents)
from decore.agents import AgentBank
from decore.data import synth_data
from decore.graph import GraphSpec, LayerNode, attach_gates, build_resnet_tiny, build_vgg16_cifar, build_vgg_tiny
from decore.model import forward, init_params
from decore.training import evaluate


def single_conv():
    nodes = (LayerNode(0, "input", 3, 3), LayerNode(1, "conv", 3, 8, (0,), 3, 1, 1),
             LayerNode(2, "globalavgpool", 8, 8, (1,)), LayerNode(3, "dense", 8, 2, (2,)),
             LayerNode(4, "output", 2, 2, (3,)))
    return GraphSpec(nodes, (3, 32, 32), 2)


def test_single_conv_counts():
    g = single_conv()
    # conv 3x3 3->8 with bias at 32x32, plus dense 8->2
    assert count_params(g) == 224 + 18
    assert count_flops(g) == 221_184 + 16


def test_single_dense_counts():
    nodes = (LayerNode(0, "input", 512, 512), LayerNode(1, "dense", 512, 10, (0,)), LayerNode(2, "output", 10, 10, (1,)))
    g = GraphSpec(nodes, (512, 1, 1), 10)
    assert count_params(g) == 5130
    assert count_flops(g) == 5120


def hand_count(plan, fc, k, c_in, hw):
    """Closed-form VGG-tiny totals: conv+bn per stage, pool while even."""
    params = flops = 0
    c, s = c_in, hw
    for w in plan:
        params += 9 * c * w + w + 2 * w
        flops += 9 * c * w * s * s
        c = w
        if s % 2 == 0:
            s //= 2
    params += c * fc + fc + fc * k + k
    flops += c * fc + fc * k
    return params, flops


@pytest.mark.parametrize("plan,fc,k,c_in,hw", [
    ([4], 4, 2, 1, 4), ([8, 16], 32, 10, 3, 32), ([3, 5, 7], 6, 3, 2, 8),
    ([16, 32], 64, 10, 1, 16), ([2, 2, 2, 2], 2, 2, 1, 16),
])
def test_vgg_tiny_counts_table(plan, fc, k, c_in, hw):
    g = build_vgg_tiny(plan, fc, k, (c_in, hw, hw))
    assert (count_params(g), count_flops(g)) == hand_count(plan, fc, k, c_in, hw)


def test_vgg16_cifar_matches_published_baseline():
    g = build_vgg16_cifar()
    assert abs(count_params(g) - 14.98e6) / 14.98e6 <= 0.002
    assert abs(count_flops(g) - 313.73e6) / 313.73e6 <= 0.02


def test_counts_follow_group_sizes():
    g, bank = attach_gates(build_vgg_tiny([8, 16], 32, 10, (3, 8, 8)))
    sizes = {0: 4, 1: 16, 2: 32}
    smaller = build_vgg_tiny([4, 16], 32, 10, (3, 8, 8))
    assert count_params(g, sizes) == count_params(smaller)
    assert count_flops(g, group_sizes=sizes) == count_flops(smaller)


def test_report_math():
    assert pruned_rate(14.98e6, 5.54e6) == 63.0
    assert pruned_rate(313.73e6, 203.08e6) == 35.3
    assert pruned_rate(10, 10) == 0.0


def test_report_document():
    g, bank = attach_gates(build_vgg_tiny([8, 16], 32, 10, (3, 8, 8)))
    params = init_params(g, np.random.default_rng(0))
    bank.weights[0][:4] = -5
    g2, p2, _, _ = prune(g, params, bank)
    rep = compression_report(g, g2, 0.9, 0.8)
    d = rep.to_dict()
    assert d["params_before"] == count_params(g) and d["params_after"] == count_params(g2)
    assert d["params_pruned_rate"] == rep.params_pr > 0
    assert rep.layers[0]["before"] == 8 and rep.layers[0]["after"] == 4
    lines = rep.layers_csv().splitlines()
    assert lines[0] == "node,name,kind,channels_before,channels_after"
    assert lines[1].endswith("conv1,conv,8,4")


# ------------------------------------------------------------------- prune

def random_bank(bank, seed, frac=0.4):
    r = np.random.default_rng(seed)
    for g in bank.group_ids():
        w = bank.weights[g]
        w[:] = np.where(r.random(w.size) < frac, -3.0, 3.0)
    return bank


NETS = {
    "vgg": lambda: build_vgg_tiny([6, 8], 12, 4, (2, 8, 8)),
    "resnet": lambda: build_resnet_tiny([6, 8], 4, (2, 8, 8)),
    "resnet_identity": lambda: build_resnet_tiny([6], 4, (2, 8, 8)),
}


@pytest.mark.parametrize("name", sorted(NETS))
def test_mask_prune_equivalence(name):
    g, bank = attach_gates(NETS[name]())
    params = init_params(g, np.random.default_rng(1))
    for k in params.buffers:
        params.buffers[k][:] = np.random.default_rng(len(k)).random(params.buffers[k].shape) + 0.5
    random_bank(bank, 2)
    keep = keep_indices(bank)
    masks = {gid: np.isin(np.arange(bank.weights[gid].size), keep[gid]).astype(np.float32) for gid in keep}
    g2, p2 = prune_channels(g, params, keep)
    x = np.random.default_rng(3).random((100, 2, 8, 8)).astype(np.float32)
    a, _ = forward(g, params, x, masks, "inference")
    b, _ = forward(g2, p2, x, None, "inference")
    assert np.max(np.abs(a - b)) <= 1e-5


def test_all_kept_is_bit_identical():
    g, bank = attach_gates(NETS["resnet"]())
    params = init_params(g, np.random.default_rng(1))
    g2, p2, _, keep = prune(g, params, bank)
    assert g2 == g
    for k in params.params:
        np.testing.assert_array_equal(p2.params[k].value, params.params[k].value)
    x = np.random.default_rng(3).random((4, 2, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(forward(g, params, x, None, "inference")[0],
                                  forward(g2, p2, x, None, "inference")[0])


def test_prune_does_not_mutate_inputs():
    g, bank = attach_gates(NETS["vgg"]())
    params = init_params(g, np.random.default_rng(1))
    random_bank(bank, 5)
    before = {k: v.value.copy() for k, v in params.params.items()}
    prune(g, params, bank)
    for k in before:
        np.testing.assert_array_equal(params.params[k].value, before[k])


def test_threshold_guard_keeps_one():
    g, bank = attach_gates(NETS["vgg"]())
    params = init_params(g, np.random.default_rng(1))
    bank.weights[0][:] = -10.0
    bank.weights[0][4] = -9.0
    g2, _, _, keep = prune(g, params, bank)
    np.testing.assert_array_equal(keep[0], [4])
    assert g2.group_channels(0) == 1


def test_prune_is_idempotent():
    g, bank = attach_gates(NETS["resnet"]())
    params = init_params(g, np.random.default_rng(1))
    random_bank(bank, 7)
    g2, p2, b2, _ = prune(g, params, bank)
    g3, p3, _, _ = prune(g2, p2, b2)
    assert g3 == g2
    for k in p2.params:
        np.testing.assert_array_equal(p3.params[k].value, p2.params[k].value)


def test_shared_group_pruned_consistently():
    g, bank = attach_gates(build_resnet_tiny([8, 8], 4, (2, 8, 8)))
    params = init_params(g, np.random.default_rng(1))
    gid = next(gid for gid, m in g.gate_sites.items() if len(m) > 1)
    bank.weights[gid][[1, 5]] = -4.0
    g2, _, _, _ = prune(g, params, bank)
    for m in g.gate_sites[gid]:
        assert g2.node(m).out_channels == 6
    for n in g2.nodes:
        if n.kind == "add":
            assert len({g2.node(p).out_channels for p in n.preds}) == 1


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000), st.floats(0.0, 0.9))
def test_pruning_never_increases_counts(seed, frac):
    g, bank = attach_gates(NETS["resnet"]())
    params = init_params(g, np.random.default_rng(0))
    random_bank(bank, seed, frac)
    g2, _, _, _ = prune(g, params, bank)
    assert count_params(g2) <= count_params(g)
    assert count_flops(g2) <= count_flops(g)


# ---------------------------------------------------------------- ablation

def test_rank_agents_ties_and_order():
    bank = AgentBank({0: [1.0, 3.0], 1: [1.0, -2.0]})
    assert rank_agents(bank, "lowest") == [(1, 1), (0, 0), (1, 0), (0, 1)]
    assert rank_agents(bank, "highest") == [(0, 1), (0, 0), (1, 0), (1, 1)]
    with pytest.raises(ValueError):
        rank_agents(bank, "middle")


def test_ablation_bounds_and_baseline():
    g, bank = attach_gates(build_vgg_tiny([4], 6, 3, (1, 8, 8)))
    params = init_params(g, np.random.default_rng(0))
    ds = synth_data(0, 30, 3, (1, 8, 8))
    assert ablate_topk(g, params, bank, 0, "highest", ds) == evaluate(g, params, ds)
    with pytest.raises(ValueError):
        ablation_masks(bank, bank.total_agents + 1, "highest")
    with pytest.raises(ValueError):
        ablation_masks(bank, -1, "lowest")
    m = ablation_masks(bank, bank.total_agents, "lowest")
    assert all(np.all(v == 0) for v in m.values())
