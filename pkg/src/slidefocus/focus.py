"""Focus predictor: per-node zoom-worthiness scores, pseudo-label targets,
and top-K disjoint connected subgraph selection.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad, nn
from .autodiff import Tensor
from .config import PipelineConfig
from .global_branch import GlobalTrace
from .nn import ParamStore


def build_params(ps: ParamStore, cfg: PipelineConfig) -> None:
    d = cfg.d_model
    nn.build_linear(ps, "focus/fc1", d, d // 2)
    nn.build_linear(ps, "focus/fc2", d // 2, 1)


def predict(ps: ParamStore, trace: GlobalTrace) -> Tensor:
    """Focus distribution q' over nodes from detached post-attention states.

    The input is detached so focus-loss gradients reach only the focus head,
    never the trunk that produced h'.
    """
    h = trace.h_prime.detach()
    s = nn.apply_linear(ps, "focus/fc2", ad.gelu(nn.apply_linear(ps, "focus/fc1", h)))
    return ad.softmax(ad.reshape(s, (h.shape[0],)), axis=-1)


def pseudo_label(phase: str, saliency: np.ndarray,
                 selection: "Selection | None" = None,
                 local_lesion_probs: dict | None = None,
                 lesion_fractions: np.ndarray | None = None) -> np.ndarray:
    """Target distribution Q_gt for the focus loss.

    cold_start: the saliency heatmap as-is. calibrated: selected nodes take
    their magnified branch's lesion probability, unselected nodes keep their
    raw saliency mass, then everything renormalizes. supervised: per-node
    lesion-area fractions normalized (uniform when the slide has none).
    """
    if phase == "cold_start":
        return saliency.copy()
    if phase == "calibrated":
        raw = saliency.astype(np.float64).copy()
        for node, prob in (local_lesion_probs or {}).items():
            raw[node] = prob
        total = raw.sum()
        if total <= 0.0:
            return np.full(len(raw), 1.0 / len(raw))
        return raw / total
    if phase == "supervised":
        if lesion_fractions is None:
            raise ValueError("supervised pseudo-labels need lesion fractions")
        total = lesion_fractions.sum()
        if total <= 0.0:
            return np.full(len(lesion_fractions), 1.0 / len(lesion_fractions))
        return lesion_fractions / total
    raise ValueError(f"unknown pseudo-label phase {phase!r}")


def focus_loss(q_pred: Tensor, q_target: np.ndarray) -> Tensor:
    """KL(predicted focus || target distribution)."""
    return nn.kl_divergence(q_pred, np.asarray(q_target, dtype=np.float64))


# ---------------------------------------------------------------------------
# subgraph selection


@dataclass
class Subgraph:
    seed: int
    members: tuple          # node ids, BFS order from the seed
    score: float


@dataclass
class Selection:
    subgraphs: list
    requested: int

    @property
    def shortfall(self) -> bool:
        return len(self.subgraphs) < self.requested

    def member_sets(self):
        return [set(sg.members) for sg in self.subgraphs]

    def all_members(self):
        out = []
        for sg in self.subgraphs:
            out.extend(sg.members)
        return out


def _adjacency_lists(adj: np.ndarray):
    return [np.nonzero(adj[i])[0] for i in range(adj.shape[0])]


def grow_candidate(seed: int, neighbors, centroids: np.ndarray, t: int) -> tuple:
    """The t nodes nearest the seed by (hop, centroid distance, id).

    Taking whole BFS rings in that order keeps the set connected: any node
    at hop h+1 enters only after every node at hop <= h, including one of
    its parents.
    """
    n = len(centroids)
    hops = np.full(n, -1, dtype=np.int64)
    hops[seed] = 0
    queue = deque([seed])
    while queue:
        u = queue.popleft()
        for v in neighbors[u]:
            if hops[v] < 0:
                hops[v] = hops[u] + 1
                queue.append(v)
    reachable = np.nonzero(hops >= 0)[0]
    d = np.linalg.norm(centroids[reachable] - centroids[seed], axis=1)
    order = sorted(range(len(reachable)), key=lambda i: (hops[reachable[i]], d[i], reachable[i]))
    take = [int(reachable[i]) for i in order[:t]]
    return tuple(take)


def select_topk(heatmap: np.ndarray, adjacency: np.ndarray, centroids: np.ndarray,
                k: int, t: int) -> Selection:
    """Greedy disjoint selection of K connected T-node subgraphs.

    Every node seeds a BFS-grown candidate; candidates rank by mean heatmap
    (ties to the lower seed id) and are accepted greedily when disjoint from
    all accepted ones. Fewer than K disjoint candidates yields a flagged
    shortfall rather than an error.
    """
    n = len(heatmap)
    if k * t > n:
        raise ValueError("K * T exceeds the node count")
    neighbors = _adjacency_lists(adjacency)
    candidates = []
    for seed in range(n):
        members = grow_candidate(seed, neighbors, centroids, t)
        score = float(np.mean(heatmap[list(members)]))
        candidates.append(Subgraph(seed, members, score))
    candidates.sort(key=lambda sg: (-sg.score, sg.seed))
    chosen: list[Subgraph] = []
    used = np.zeros(n, dtype=bool)
    for sg in candidates:
        if len(chosen) == k:
            break
        idx = list(sg.members)
        if used[idx].any():
            continue
        used[idx] = True
        chosen.append(sg)
    return Selection(chosen, requested=k)
