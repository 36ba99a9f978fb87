"""Magnified branch: crops around selected region subgraphs, local region
graphs, group-isolated attention with per-group class tokens, and the local
classification and cross-scale consistency losses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad, nn
from .autodiff import Tensor
from .config import PipelineConfig
from .global_branch import GlobalTrace
from .nn import NEG_INF, ParamStore
from .slides import SlideRecord, read_region
from .superpixels import RegionGraph, build_graph


def build_params(ps: ParamStore, cfg: PipelineConfig) -> None:
    d = cfg.d_model
    nn.build_gcn_stack(ps, "local/gcn", d_in=3 * cfg.bins + 2, d=d, layers=cfg.gcn_layers)
    ps.param("local/proj", (d, d))              # per-node projection, matrix only
    ps.param("local/cls", (d,), init="normal")  # shared group class-token template
    nn.build_encoder_stack(ps, "local/att_group", d, cfg.depth_group)
    nn.build_encoder_stack(ps, "local/att_inter", d, cfg.depth_inter)
    nn.build_mlp_head(ps, "local/head", d, d // 2, cfg.class_count)
    ps.param("local/cls_map", (d, d))           # group token -> thumbnail feature space


# ---------------------------------------------------------------------------
# crop geometry and grouping


def subgraph_footprint(bboxes: np.ndarray, members, quantum: int, extent) -> tuple:
    """Snapped union rect (x0, y0, x1, y1) of member bboxes, thumbnail coords.

    Corners snap outward to multiples of quantum, clamped to the extent, so
    selections that drift a little between epochs keep hitting the same crop.
    """
    b = np.asarray(bboxes)[list(members)]
    w, h = extent
    x0 = (int(b[:, 0].min()) // quantum) * quantum
    y0 = (int(b[:, 1].min()) // quantum) * quantum
    x1 = min(-(-int(b[:, 2].max()) // quantum) * quantum, w)
    y1 = min(-(-int(b[:, 3].max()) // quantum) * quantum, h)
    return (x0, y0, x1, y1)


def rect_pixels(rect: tuple, zoom: int) -> int:
    """Magnified pixel count under a thumbnail-space rect."""
    x0, y0, x1, y1 = rect
    return (x1 - x0) * (y1 - y0) * zoom * zoom


def crop_graph(record: SlideRecord, cfg: PipelineConfig, rect: tuple,
               n_target: int | None = None, with_mask: bool = True) -> RegionGraph:
    """Read the magnified crop under a thumbnail rect and build its region graph.

    The mask is sampled at crop resolution by integer index arithmetic, so
    per-node class tallies stay exact whatever factor the mask is stored at;
    with_mask=False skips it entirely (inference never opens the mask).
    """
    x0, y0, x1, y1 = rect
    z = cfg.zoom
    lvl = record.level(cfg.local_factor)
    lh, lw = lvl.shape[:2]
    lx0, ly0 = x0 * z, y0 * z
    lx1, ly1 = min(x1 * z, lw), min(y1 * z, lh)
    if lx1 <= lx0 or ly1 <= ly0:
        raise ValueError(f"rect {rect} leaves an empty magnified crop")
    image = read_region(record, cfg.local_factor, lx0, ly0, lx1 - lx0, ly1 - ly0)
    mask = None
    if with_mask:
        ys = ((ly0 + np.arange(ly1 - ly0)) * cfg.local_factor) // record.mask_factor
        xs = ((lx0 + np.arange(lx1 - lx0)) * cfg.local_factor) // record.mask_factor
        mask = record.mask[np.ix_(ys, xs)]
    return build_graph(image, cfg.n_local if n_target is None else n_target,
                       bins=cfg.bins, compactness=cfg.compactness,
                       iterations=cfg.slic_iterations, mask=mask,
                       class_count=cfg.class_count)


def assign_groups(local: RegionGraph, rect: tuple, zoom: int,
                  global_graph: RegionGraph, members) -> list:
    """Partition magnified nodes into one group per member region.

    A node joins the member whose thumbnail region contains its centroid;
    nodes landing outside every member go to the nearest member centroid
    (ties to the lower region id). A member left with no nodes of its own
    borrows its nearest node without removing it from the donor group, so
    every group is nonempty whenever the crop has at least one region.
    """
    x0, y0, x1, y1 = rect
    members = list(members)
    index_of = {m: i for i, m in enumerate(members)}
    fx = x0 + local.centroids[:, 0] / zoom
    fy = y0 + local.centroids[:, 1] / zoom
    tx = np.clip(fx.astype(np.int64), x0, x1 - 1)
    ty = np.clip(fy.astype(np.int64), y0, y1 - 1)
    mcent = global_graph.centroids[members]
    groups = [[] for _ in members]
    for i in range(local.n):
        g = index_of.get(int(global_graph.labeling[ty[i], tx[i]]))
        if g is None:
            d = np.hypot(mcent[:, 0] - fx[i], mcent[:, 1] - fy[i])
            g = min(range(len(members)), key=lambda j: (d[j], members[j]))
        groups[g].append(i)
    for g in range(len(members)):
        if groups[g]:
            continue
        d = np.hypot(fx - mcent[g, 0], fy - mcent[g, 1])
        groups[g].append(int(np.argmin(d)))
    return [np.asarray(g, dtype=np.int64) for g in groups]


def group_labels(local: RegionGraph, groups) -> np.ndarray:
    """Majority mask class over each group's pixels (ties to the lower class)."""
    if local.class_counts is None:
        raise ValueError("crop graph was built without a mask")
    out = np.zeros(len(groups), dtype=np.int64)
    for t, g in enumerate(groups):
        out[t] = int(np.argmax(local.class_counts[g].sum(axis=0)))
    return out


def group_isolation_mask(sizes) -> np.ndarray:
    """Additive attention mask keeping each group (nodes + its token) sealed."""
    t = len(sizes)
    owner = np.concatenate(
        [np.full(s, g, dtype=np.int64) for g, s in enumerate(sizes)]
        + [np.arange(t, dtype=np.int64)])
    return np.where(owner[:, None] == owner[None, :], 0.0, NEG_INF)


# ---------------------------------------------------------------------------
# forward and losses


@dataclass
class LocalTrace:
    """Forward artifacts of one magnified crop."""

    node_embed: Tensor         # u [n_crop, d] GCN output over crop regions
    cls_bar: Tensor            # [T, d] group tokens after cross-group mixing
    logits: Tensor             # [T, C]
    groups: list               # node ids per group (a borrowed node may repeat)
    group_labels: np.ndarray | None

    def probabilities(self) -> np.ndarray:
        return ad.softmax(self.logits.detach(), axis=-1).values


def forward_subgraph(ps: ParamStore, cfg: PipelineConfig, local: RegionGraph,
                     groups, labels: np.ndarray | None = None,
                     nhat: np.ndarray | None = None) -> LocalTrace:
    """Run the magnified branch over one crop's region graph.

    Tokens are laid out group by group followed by one class token per group.
    Each group block is min-max normalized on its own. The first attention
    stack is sealed inside groups; the second mixes the group tokens.
    """
    if nhat is None:
        nhat = nn.normalized_adjacency(local.adjacency, dtype=cfg.np_dtype)
    x = Tensor(np.asarray(local.features, dtype=cfg.np_dtype))
    u = nn.apply_gcn_stack(ps, "local/gcn", nhat, x, layers=cfg.gcn_layers)
    pu = ad.matmul(u, ps["local/proj"])
    blocks = [ad.minmax_norm(ad.gather_rows(pu, g)) for g in groups]
    cls_rows = ad.tile_rows(ps["local/cls"], len(groups))
    seq = ad.concat(blocks + [cls_rows], axis=0)
    sizes = [len(g) for g in groups]
    j = sum(sizes)
    out = nn.apply_encoder_stack(ps, "local/att_group", seq, cfg.heads,
                                 cfg.depth_group, group_isolation_mask(sizes))
    cls_bar = nn.apply_encoder_stack(ps, "local/att_inter", out[j:], cfg.heads,
                                     cfg.depth_inter)
    logits = nn.apply_mlp_head(ps, "local/head", cls_bar)
    return LocalTrace(u, cls_bar, logits, groups, labels)


def local_loss(trace: LocalTrace) -> Tensor:
    """Mean cross-entropy of the group logits against their mask majorities."""
    if trace.group_labels is None:
        raise ValueError("group labels unavailable (crop built without a mask)")
    return nn.cross_entropy(trace.logits, trace.group_labels)


def consistency_loss(ps: ParamStore, trace: LocalTrace,
                     global_trace: GlobalTrace, members) -> Tensor:
    """Mean KL from mapped group tokens to their member's thumbnail state.

    Both sides are softmaxed over the feature axis; gradients reach the
    magnified branch and flow back up the thumbnail trunk.
    """
    mapped = ad.softmax(ad.matmul(trace.cls_bar, ps["local/cls_map"]), axis=-1)
    target = ad.softmax(ad.gather_rows(global_trace.h_prime, list(members)), axis=-1)
    total = None
    for i in range(len(members)):
        term = nn.kl_divergence(mapped[i], target[i])
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / len(members))


# ---------------------------------------------------------------------------
# per-subgraph driver


@dataclass
class SubgraphRun:
    """One selected subgraph taken through crop, grouping, and forward."""

    members: tuple
    rect: tuple
    graph: RegionGraph
    trace: LocalTrace


def process_subgraph(ps: ParamStore, cfg: PipelineConfig, record: SlideRecord,
                     global_graph: RegionGraph, members,
                     cache: dict | None = None,
                     with_mask: bool = True) -> SubgraphRun:
    """Footprint, crop graph, groups, forward for one selected subgraph.

    cache, if given, maps footprint rects to already-built crop graphs;
    quantized rects make hits common across epochs and selections.
    """
    thumb = record.level(cfg.thumbnail_factor)
    rect = subgraph_footprint(global_graph.bboxes, members, cfg.footprint_quantum,
                              (thumb.shape[1], thumb.shape[0]))
    graph = None if cache is None else cache.get(rect)
    if graph is None:
        graph = crop_graph(record, cfg, rect, with_mask=with_mask)
        if cache is not None:
            cache[rect] = graph
    groups = assign_groups(graph, rect, cfg.zoom, global_graph, members)
    labels = group_labels(graph, groups) if graph.class_counts is not None else None
    trace = forward_subgraph(ps, cfg, graph, groups, labels)
    return SubgraphRun(tuple(members), rect, graph, trace)


def member_lesion_probs(run: SubgraphRun) -> dict:
    """Per-member probability of any lesion class, from the group logits."""
    p = run.trace.probabilities()
    return {int(m): float(1.0 - p[i, 0]) for i, m in enumerate(run.members)}
