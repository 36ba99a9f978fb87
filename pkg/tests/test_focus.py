"""Focus predictor, pseudo-labels, and disjoint subgraph selection."""

import numpy as np
import pytest

from conftest import random_connected_graph, toy_config
from slidefocus import focus, global_branch as gb
from slidefocus.nn import ParamStore
from test_global_branch import make_graph


def build_both(cfg, seed=0):
    ps = ParamStore(seed=seed, dtype=cfg.np_dtype)
    gb.build_params(ps, cfg)
    focus.build_params(ps, cfg)
    return ps


def test_predict_is_distribution():
    cfg = toy_config()
    ps = build_both(cfg)
    tr = gb.forward(ps, cfg, make_graph(6, seed=1))
    q = focus.predict(ps, tr)
    assert q.shape == (6,)
    assert q.values.min() > 0
    assert abs(q.values.sum() - 1.0) < 1e-12


def test_focus_loss_reaches_only_focus_head():
    cfg = toy_config()
    ps = build_both(cfg, seed=2)
    tr = gb.forward(ps, cfg, make_graph(5, seed=2))
    q = focus.predict(ps, tr)
    target = np.full(5, 0.2)
    loss = focus.focus_loss(q, target)
    loss.backward()
    for name, t in ps.items():
        if name.startswith("focus/"):
            assert t.grad is not None, name
        else:
            assert t.grad is None, name


def test_pseudo_label_cold_start_passthrough():
    s = np.array([0.7, 0.2, 0.1])
    np.testing.assert_array_equal(focus.pseudo_label("cold_start", s), s)


def test_pseudo_label_calibrated_worked_example():
    # uniform saliency over 4 nodes; nodes 0 and 1 selected with lesion
    # probability 1 -> raw [1, 1, 0.25, 0.25] -> [0.4, 0.4, 0.1, 0.1]
    s = np.full(4, 0.25)
    q = focus.pseudo_label("calibrated", s, local_lesion_probs={0: 1.0, 1: 1.0})
    np.testing.assert_allclose(q, [0.4, 0.4, 0.1, 0.1])


def test_pseudo_label_calibrated_all_zero_uniform():
    s = np.zeros(4)
    q = focus.pseudo_label("calibrated", s, local_lesion_probs={1: 0.0})
    np.testing.assert_allclose(q, np.full(4, 0.25))


def test_pseudo_label_supervised():
    fr = np.array([0.0, 0.5, 0.25, 0.25])
    np.testing.assert_allclose(focus.pseudo_label("supervised", None, lesion_fractions=fr),
                               [0.0, 0.5, 0.25, 0.25])
    uniform = focus.pseudo_label("supervised", None, lesion_fractions=np.zeros(4))
    np.testing.assert_allclose(uniform, np.full(4, 0.25))


def test_pseudo_label_unknown_phase():
    with pytest.raises(ValueError):
        focus.pseudo_label("bogus", np.ones(2) / 2)


# -- candidate growth -----------------------------------------------------------

def path_graph(n):
    adj = np.zeros((n, n), dtype=np.uint8)
    for i in range(n - 1):
        adj[i, i + 1] = adj[i + 1, i] = 1
    centroids = np.stack([np.arange(n, dtype=float), np.zeros(n)], axis=1)
    return adj, centroids


def test_grow_candidate_path_tie_breaks():
    adj, cent = path_graph(4)
    neighbors = focus._adjacency_lists(adj)
    # from node 1: hop-1 neighbors 0 and 2 tie on distance; lower id wins
    assert focus.grow_candidate(1, neighbors, cent, 2) == (1, 0)
    assert focus.grow_candidate(2, neighbors, cent, 2) == (2, 1)


def test_grow_candidate_connected_random():
    for seed in range(10):
        adj, cent = random_connected_graph(12, seed, extra_edges=6)
        neighbors = focus._adjacency_lists(adj)
        members = focus.grow_candidate(seed % 12, neighbors, cent, 5)
        assert len(members) == 5
        # connectivity: BFS within the member set reaches all members
        mset = set(members)
        seen = {members[0]}
        frontier = [members[0]]
        while frontier:
            u = frontier.pop()
            for v in neighbors[u]:
                if int(v) in mset and int(v) not in seen:
                    seen.add(int(v))
                    frontier.append(int(v))
        assert seen == mset


def test_grow_candidate_small_component():
    adj = np.zeros((5, 5), dtype=np.uint8)
    adj[0, 1] = adj[1, 0] = 1  # component {0,1}; rest isolated
    cent = np.random.default_rng(0).uniform(0, 1, (5, 2))
    neighbors = focus._adjacency_lists(adj)
    assert focus.grow_candidate(0, neighbors, cent, 4) == (0, 1)


# -- selection --------------------------------------------------------------------

def test_select_topk_path_worked_example():
    adj, cent = path_graph(4)
    sel = focus.select_topk(np.array([0.4, 0.3, 0.2, 0.1]), adj, cent, k=2, t=2)
    sets = [tuple(sorted(sg.members)) for sg in sel.subgraphs]
    assert sets == [(0, 1), (2, 3)]
    assert abs(sel.subgraphs[0].score - 0.35) < 1e-12
    assert abs(sel.subgraphs[1].score - 0.15) < 1e-12
    assert not sel.shortfall


def test_select_topk_uniform_heatmap_seed_order():
    adj, cent = path_graph(6)
    sel = focus.select_topk(np.full(6, 1 / 6), adj, cent, k=3, t=2)
    # pure tie-break: seeds considered in ascending id order
    assert sel.subgraphs[0].seed == 0
    sets = [tuple(sorted(sg.members)) for sg in sel.subgraphs]
    assert sets == [(0, 1), (2, 3), (4, 5)]


def test_select_topk_disjoint_random():
    # K*T <= N does not guarantee K disjoint candidates exist; what is
    # guaranteed is that whatever is returned never overlaps
    rng = np.random.default_rng(0)
    full = 0
    for seed in range(15):
        adj, cent = random_connected_graph(30, seed, extra_edges=15)
        q = rng.dirichlet(np.ones(30))
        sel = focus.select_topk(q, adj, cent, k=3, t=3)
        sets = sel.member_sets()
        full += len(sets) == 3
        for i in range(len(sets)):
            for j in range(i + 1, len(sets)):
                assert not (sets[i] & sets[j])
    assert full >= 12  # dense-enough graphs almost always fill the budget


def test_select_topk_shortfall_flagged():
    # star: every 2-node candidate contains the hub, so only one fits
    n = 5
    adj = np.zeros((n, n), dtype=np.uint8)
    adj[0, 1:] = adj[1:, 0] = 1
    cent = np.random.default_rng(1).uniform(0, 1, (n, 2))
    sel = focus.select_topk(np.full(n, 0.2), adj, cent, k=2, t=2)
    assert len(sel.subgraphs) == 1
    assert sel.shortfall


def test_select_topk_budget_guard():
    adj, cent = path_graph(4)
    with pytest.raises(ValueError):
        focus.select_topk(np.full(4, 0.25), adj, cent, k=3, t=2)


def test_select_topk_raise_to_top_keeps_candidate():
    # raising an accepted candidate's nodes above every other heatmap value
    # (then renormalizing) never evicts it: its mean becomes the strict
    # maximum, so greedy accepts it first
    rng = np.random.default_rng(7)
    for seed in range(12):
        adj, cent = random_connected_graph(18, seed, extra_edges=8)
        q = rng.uniform(0.05, 1.0, 18)
        q /= q.sum()
        sel = focus.select_topk(q, adj, cent, k=3, t=3)
        for sg in sel.subgraphs:
            boosted = q.copy()
            boosted[list(sg.members)] = 1.01 * q.max()
            boosted /= boosted.sum()
            again = focus.select_topk(boosted, adj, cent, k=3, t=3)
            assert set(sg.members) in again.member_sets()
