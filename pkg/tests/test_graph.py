import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from decore.agents import DEFAULT_INIT
from decore.errors import GraphError, ShapeError, StaleCacheError
from decore.graph import (GraphSpec, LayerNode, attach_gates, build_resnet_tiny, build_vgg_tiny,
                          validate)
from decore.model import backward, forward, init_params
from decore.runtime import softmax_xent
from gradcheck import numeric_grad, rel_error


def kinds(g):
    return Counter(n.kind for n in g.nodes)


def by_name(g, name):
    return next(n for n in g.nodes if n.name == name)


# ------------------------------------------------------------------ builders

def test_vgg_tiny_structure():
    g = build_vgg_tiny([8, 16], 32, 10)
    c = kinds(g)
    assert (c["conv"], c["batchnorm"], c["maxpool"], c["dense"]) == (2, 2, 2, 2)
    assert g.logits_node.out_channels == 10
    assert g.nodes[0].kind == "input" and g.nodes[-1].kind == "output"


def test_vgg_smallest_network():
    g = build_vgg_tiny([4], 4, 2, input_shape=(1, 4, 4))
    params = init_params(g, np.random.default_rng(0))
    logits, _ = forward(g, params, np.ones((3, 1, 4, 4), np.float32))
    assert logits.shape == (3, 2)


def test_vgg_empty_plan():
    with pytest.raises(GraphError):
        build_vgg_tiny([], 8, 10)


def test_resnet_one_block_shares_group():
    g, bank = attach_gates(build_resnet_tiny([8], 10))
    bn2 = g.nodes[by_name(g, "block1.conv2").id + 1]
    add = next(n for n in g.nodes if n.kind == "add")
    main, shortcut = add.preds
    assert main == bn2.id
    owner = g.group_of()
    assert owner[main] == owner[shortcut]


def test_resnet_identity_blocks_validate():
    g, _ = attach_gates(build_resnet_tiny([8, 8], 10))
    adds = [n for n in g.nodes if n.kind == "add"]
    assert len(adds) == 2
    for a in adds:
        assert len({g.node(p).out_channels for p in a.preds}) == 1
    # the identity chain is a single channel space
    owner = g.group_of()
    assert len({owner[p] for a in adds for p in a.preds}) == 1


def test_resnet_projection_group():
    g, _ = attach_gates(build_resnet_tiny([8, 16], 10))
    proj = by_name(g, "block2.proj")
    proj_bn = g.nodes[proj.id + 1]
    add = [n for n in g.nodes if n.kind == "add"][1]
    assert proj_bn.id in add.preds
    owner = g.group_of()
    assert owner[add.preds[0]] == owner[add.preds[1]]
    assert g.group_channels(owner[proj_bn.id]) == 16
    validate(g)


def test_resnet_width_change_without_projection():
    with pytest.raises(GraphError, match="projection"):
        build_resnet_tiny([8, 16], 10, projection=False)


def test_validator_rejects_unequal_add():
    nodes = (LayerNode(0, "input", 3, 3), LayerNode(1, "conv", 3, 4, (0,), 3, 1, 1),
             LayerNode(2, "add", 4, 4, (1, 0)), LayerNode(3, "globalavgpool", 4, 4, (2,)),
             LayerNode(4, "dense", 4, 2, (3,)), LayerNode(5, "output", 2, 2, (4,)))
    with pytest.raises(GraphError, match="unequal"):
        GraphSpec(nodes, (3, 8, 8), 2)


def test_validator_rejects_gated_logits():
    g = build_vgg_tiny([4], 4, 2)
    with pytest.raises(GraphError, match="logits"):
        g.with_gates({0: {g.logits_node.id}})


# --------------------------------------------------------------------- gates

def test_attach_gates_vgg_counts():
    g, bank = attach_gates(build_vgg_tiny([8, 16], 32, 10))
    assert [g.group_channels(i) for i in g.group_ids()] == [8, 16, 32]
    assert bank.total_agents == 56
    owner = g.group_of()
    assert g.logits_node.id not in owner
    assert g.nodes[0].id not in owner
    assert all(np.all(w == DEFAULT_INIT) for w in bank.weights.values())


def test_attach_gates_input_flag():
    g, bank = attach_gates(build_vgg_tiny([8, 16], 32, 10), gate_input=True)
    assert g.nodes[0].id in g.group_of()
    assert bank.total_agents == 59


def test_graph_build_is_deterministic():
    a = attach_gates(build_resnet_tiny([8, 16], 10))[0]
    b = attach_gates(build_resnet_tiny([8, 16], 10))[0]
    assert a.to_json() == b.to_json()


@settings(max_examples=30, deadline=None)
@given(st.lists(st.sampled_from([4, 8, 16]), min_size=1, max_size=4), st.booleans())
def test_gate_invariants_hold(plan, residual):
    base = build_resnet_tiny(plan, 3, (3, 8, 8)) if residual else build_vgg_tiny(plan, 8, 3, (3, 8, 8))
    g, bank = attach_gates(base)
    seen = set()
    for gid, members in g.gate_sites.items():
        assert len({g.node(m).out_channels for m in members}) == 1
        assert not (seen & members)
        seen |= members
        assert bank.weights[gid].size == g.group_channels(gid)
    assert g.logits_node.id not in seen
    # every conv/dense input except the raw image is gated
    for n in g.nodes:
        if n.kind in ("conv", "dense") and n.preds[0] != 0:
            assert n.preds[0] in seen
    for n in g.nodes:
        if n.kind == "add":
            assert len({g.group_of()[p] for p in n.preds}) == 1


def test_json_round_trip():
    g, _ = attach_gates(build_resnet_tiny([8, 16], 10))
    doc = json.loads(g.to_json())
    assert doc["format"] == "decore-graph" and doc["version"] == 1
    assert GraphSpec.from_json(g.to_json()) == g


def test_json_version_mismatch():
    doc = build_vgg_tiny([4], 4, 2).to_dict()
    doc["version"] = 99
    with pytest.raises(GraphError, match="version"):
        GraphSpec.from_dict(doc)


# ------------------------------------------------------------------ forward

@pytest.fixture(params=["vgg", "resnet"])
def net(request):
    if request.param == "vgg":
        base = build_vgg_tiny([4, 6], 8, 3, (2, 8, 8))
    else:
        base = build_resnet_tiny([4, 6], 3, (2, 8, 8))
    g, bank = attach_gates(base)
    params = init_params(g, np.random.default_rng(3), dtype=np.float64)
    # non-trivial batchnorm state so inference differs from train
    for k in params.buffers:
        params.buffers[k] = np.random.default_rng(len(k)).random(params.buffers[k].shape) + 0.5
    x = np.random.default_rng(4).random((5, 2, 8, 8))
    return g, bank, params, x


def ones_masks(g):
    return {gid: np.ones(g.group_channels(gid)) for gid in g.group_ids()}


def test_all_ones_mask_is_identity(net):
    g, _, params, x = net
    for mode in ("train", "inference"):
        a, _ = forward(g, params.copy(), x, None, mode)
        b, _ = forward(g, params.copy(), x, ones_masks(g), mode)
        np.testing.assert_array_equal(a, b)


def test_zero_mask_equals_zeroed_downstream_weights():
    g, _ = attach_gates(build_vgg_tiny([4, 6], 8, 3, (2, 8, 8)))
    params = init_params(g, np.random.default_rng(3), dtype=np.float64)
    x = np.random.default_rng(4).random((5, 2, 8, 8))
    masks = ones_masks(g)
    masks[0][2] = 0
    masked, _ = forward(g, params.copy(), x, masks, "inference")
    zeroed = params.copy()
    conv2 = next(n for n in g.nodes if n.name == "conv2")
    zeroed.params[f"{conv2.id}.weight"].value[:, 2] = 0
    ref, _ = forward(g, zeroed, x, None, "inference")
    np.testing.assert_allclose(masked, ref, atol=1e-12)


def test_inference_uses_running_stats(net):
    g, _, params, x = net
    before = {k: v.copy() for k, v in params.buffers.items()}
    a, _ = forward(g, params, x, None, "inference")
    for k in before:
        np.testing.assert_array_equal(params.buffers[k], before[k])
    b, _ = forward(g, params, x[:2], None, "inference")
    np.testing.assert_allclose(a[:2], b)   # each sample independent of the batch
    t, _ = forward(g, params.copy(), x, None, "train")
    assert not np.allclose(a, t)


def test_mask_group_mismatch(net):
    g, _, params, x = net
    masks = ones_masks(g)
    masks.pop(g.group_ids()[0])
    with pytest.raises(ShapeError, match="groups"):
        forward(g, params, x, masks)
    bad = ones_masks(g)
    bad[0] = np.ones(bad[0].size + 1)
    with pytest.raises(ShapeError):
        forward(g, params, x, bad)


def test_per_sample_and_per_batch_masks_agree(net):
    g, _, params, x = net
    r = np.random.default_rng(9)
    vec = {gid: (r.random(g.group_channels(gid)) < 0.6).astype(float) for gid in g.group_ids()}
    mat = {gid: np.tile(m, (x.shape[0], 1)) for gid, m in vec.items()}
    np.testing.assert_array_equal(forward(g, params, x, vec, "inference")[0],
                                  forward(g, params, x, mat, "inference")[0])


# ----------------------------------------------------------------- backward

def test_backward_finite_differences(net):
    g, _, params, x = net
    r = np.random.default_rng(11)
    masks = {gid: (r.random((x.shape[0], g.group_channels(gid))) < 0.7).astype(float) for gid in g.group_ids()}
    labels = np.array([0, 1, 2, 1, 0])

    def loss():
        return softmax_xent(forward(g, params, x, masks, "train")[0], labels)[0]

    logits, cache = forward(g, params, x, masks, "train")
    _, dlogits = softmax_xent(logits, labels)
    grads = backward(g, params, cache, dlogits)
    # h=1e-3 steps across relu/maxpool kinks of the whole network; 1e-5 does not
    for name in sorted(params.params):
        num = numeric_grad(loss, params.params[name].value, h=1e-5)
        assert rel_error(grads[name], num) <= 1e-3, name


def test_zero_dlogits_zero_grads(net):
    g, _, params, x = net
    logits, cache = forward(g, params, x, ones_masks(g), "train")
    grads = backward(g, params, cache, np.zeros_like(logits))
    assert all(np.all(v == 0) for v in grads.values())


def test_masked_channel_filter_gets_no_gradient():
    g, _ = attach_gates(build_vgg_tiny([4, 6], 8, 3, (2, 8, 8)))
    params = init_params(g, np.random.default_rng(3), dtype=np.float64)
    x = np.random.default_rng(4).random((5, 2, 8, 8))
    masks = ones_masks(g)
    masks[0][1] = 0
    logits, cache = forward(g, params, x, masks, "train")
    _, d = softmax_xent(logits, np.zeros(5, dtype=int))
    grads = backward(g, params, cache, d)
    conv1 = next(n for n in g.nodes if n.name == "conv1")
    assert np.all(grads[f"{conv1.id}.weight"][1] == 0)
    assert np.all(grads[f"{conv1.id}.bias"][1] == 0)
    assert np.any(grads[f"{conv1.id}.weight"][0] != 0)


def test_stale_cache(net):
    g, _, params, x = net
    logits, cache = forward(g, params, x, None, "train")
    _, d = softmax_xent(logits, np.zeros(x.shape[0], dtype=int))
    backward(g, params, cache, d)
    params.step(0.01)
    with pytest.raises(StaleCacheError):
        backward(g, params, cache, d)
