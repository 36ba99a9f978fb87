"""Shared test helpers: toy configurations and small random graphs."""

import numpy as np

from slidefocus.config import PipelineConfig


def toy_config(**overrides) -> PipelineConfig:
    """A miniature model geometry small enough for finite differences."""
    cfg = PipelineConfig()
    cfg.d_model = 8
    cfg.heads = 2
    cfg.depth_global = 1
    cfg.depth_group = 1
    cfg.depth_inter = 1
    cfg.gcn_layers = 3
    cfg.bins = 4
    cfg.n_global = 12
    cfg.n_local = 6
    cfg.subgraph_size = 2
    cfg.k_subgraphs = 2
    cfg.prototype_count = 3
    for k, v in overrides.items():
        setattr(cfg, k, v)
    cfg.validate()
    return cfg


def random_connected_graph(n: int, seed: int, extra_edges: int = 0):
    """Adjacency + centroids for a random connected graph (spanning tree base)."""
    rng = np.random.default_rng(seed)
    adj = np.zeros((n, n), dtype=np.uint8)
    order = rng.permutation(n)
    for i in range(1, n):
        a, b = order[i], order[rng.integers(0, i)]
        adj[a, b] = adj[b, a] = 1
    for _ in range(extra_edges):
        a, b = rng.integers(0, n, size=2)
        if a != b:
            adj[a, b] = adj[b, a] = 1
    centroids = rng.uniform(0, 100, size=(n, 2))
    return adj, centroids
