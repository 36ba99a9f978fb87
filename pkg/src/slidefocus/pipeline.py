"""End-to-end slide pass: parameter assembly, thumbnail graph, focus and
selection, magnified crops, vocabulary, fusion, and the combined loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import focus, global_branch as gb, local_branch as lb, nn, prototypes as pr
from .autodiff import Tensor
from .config import PipelineConfig
from .nn import ParamStore
from .slides import SlideRecord
from .superpixels import RegionGraph, build_graph


def build_model(cfg: PipelineConfig, seed: int | None = None) -> ParamStore:
    """All learnable tensors in a fixed creation order, so one seed gives
    bit-identical initialization everywhere."""
    ps = ParamStore(seed=cfg.seed if seed is None else seed, dtype=cfg.np_dtype)
    gb.build_params(ps, cfg)
    focus.build_params(ps, cfg)
    lb.build_params(ps, cfg)
    pr.build_params(ps, cfg)
    return ps


def thumbnail_graph(record: SlideRecord, cfg: PipelineConfig,
                    with_mask: bool = True) -> RegionGraph:
    """Region graph of the thumbnail plane, mask resampled to match."""
    thumb = record.level(cfg.thumbnail_factor)
    mask = None
    if with_mask:
        th, tw = thumb.shape[:2]
        ys = (np.arange(th) * cfg.thumbnail_factor) // record.mask_factor
        xs = (np.arange(tw) * cfg.thumbnail_factor) // record.mask_factor
        mask = record.mask[np.ix_(ys, xs)]
    return build_graph(thumb, cfg.n_global, bins=cfg.bins,
                       compactness=cfg.compactness,
                       iterations=cfg.slic_iterations, mask=mask,
                       class_count=cfg.class_count)


@dataclass
class SlideOutputs:
    """Everything one forward pass produces for a slide."""

    graph: RegionGraph
    gtrace: gb.GlobalTrace
    q_pred: Tensor                   # focus distribution over thumbnail nodes
    heatmap: np.ndarray              # selection heatmap actually used
    selection: focus.Selection
    runs: list                       # SubgraphRun per selected subgraph
    vocab: pr.PrototypeVocabulary | None
    ftrace: pr.FusionTrace

    def predicted_class(self) -> int:
        return self.ftrace.predicted_class()

    def probabilities(self) -> np.ndarray:
        return self.ftrace.probabilities()


def run_slide(ps: ParamStore, cfg: PipelineConfig, record: SlideRecord,
              graph: RegionGraph | None = None, crop_cache: dict | None = None,
              with_local: bool | None = None,
              crop_mask: bool = True) -> SlideOutputs:
    """Thumbnail branch, focus, selection, magnified crops, fusion.

    with_local overrides cfg.enable_local (the warmup phase passes False);
    crop_mask=False keeps inference from opening the annotation mask.
    The selection heatmap comes from the focus head or, when configured,
    from the saliency of the predicted class.
    """
    if graph is None:
        graph = thumbnail_graph(record, cfg)
    gtrace = gb.forward(ps, cfg, graph)
    q_pred = focus.predict(ps, gtrace)
    if cfg.selection_source == "gradcam":
        heat = gb.saliency_heatmap(gtrace, gtrace.predicted_class())
    else:
        heat = q_pred.detach().values
    local_on = cfg.enable_local if with_local is None else with_local
    if local_on and cfg.k_subgraphs > 0:
        selection = focus.select_topk(heat, graph.adjacency, graph.centroids,
                                      k=cfg.k_subgraphs, t=cfg.subgraph_size)
    else:
        selection = focus.Selection([], requested=0)
    runs = [lb.process_subgraph(ps, cfg, record, graph, sg.members,
                                cache=crop_cache, with_mask=crop_mask)
            for sg in selection.subgraphs]
    vocab = pr.build_vocabulary(runs, cfg.prototype_count, seed=cfg.seed,
                                iterations=cfg.kmeans_iterations,
                                tol=cfg.kmeans_tol)
    ftrace = pr.fuse(ps, cfg, gtrace, runs, vocab)
    return SlideOutputs(graph, gtrace, q_pred, heat, selection, runs, vocab,
                        ftrace)


def focus_target(cfg: PipelineConfig, out: SlideOutputs, label: int) -> np.ndarray:
    """Target distribution for the focus loss under the configured supervision.

    supervised reads mask lesion fractions; phased uses the label's saliency
    map, calibrated by magnified lesion probabilities once crops exist.
    """
    if cfg.focus_supervision == "supervised":
        return focus.pseudo_label(
            "supervised", None, lesion_fractions=out.graph.lesion_fractions())
    sal = gb.saliency_heatmap(out.gtrace, label)
    if out.runs:
        probs: dict = {}
        for run in out.runs:
            probs.update(lb.member_lesion_probs(run))
        return focus.pseudo_label("calibrated", sal, selection=out.selection,
                                  local_lesion_probs=probs)
    return focus.pseudo_label("cold_start", sal)


def slide_losses(ps: ParamStore, cfg: PipelineConfig, out: SlideOutputs,
                 label: int) -> dict:
    """Per-term loss tensors for one slide (keys depend on what ran)."""
    losses = {"global": gb.classification_loss(out.gtrace, label),
              "focus": focus.focus_loss(out.q_pred, focus_target(cfg, out, label))}
    if out.runs:
        loc = None
        cst = None
        for run in out.runs:
            l1 = lb.local_loss(run.trace)
            l2 = lb.consistency_loss(ps, run.trace, out.gtrace, run.members)
            loc = l1 if loc is None else ad.add(loc, l1)
            cst = l2 if cst is None else ad.add(cst, l2)
        losses["local"] = ad.scale(loc, 1.0 / len(out.runs))
        losses["cst"] = ad.scale(cst, 1.0 / len(out.runs))
    losses["all"] = pr.fused_loss(out.ftrace, label)
    return losses


LOSS_WEIGHT_FIELDS = {"global": "w_global", "focus": "w_focus",
                      "local": "w_local", "cst": "w_cst", "all": "w_all"}


def total_loss(cfg: PipelineConfig, losses: dict) -> Tensor:
    """Weighted sum of the per-term losses, one backward pass.

    Zero-weighted terms are dropped outright, not multiplied by 0, so
    disabling a term reproduces the reduced objective bit for bit.
    """
    total = None
    for key, term in losses.items():
        w = getattr(cfg, LOSS_WEIGHT_FIELDS[key])
        if w == 0.0:
            continue
        weighted = term if w == 1.0 else ad.scale(term, w)
        total = weighted if total is None else ad.add(total, weighted)
    if total is None:
        raise ValueError("every loss weight is zero; nothing to optimize")
    return total


def loss_values(losses: dict) -> dict:
    return {k: float(t.values) for k, t in losses.items()}


AUDIT_TERMS = ("total", "global", "focus", "local", "cst", "all")

# Central differences trade truncation (grows with eps) against roundoff
# (shrinks with eps). The consistency KL has the largest third derivatives
# and wants a smaller step; the summed objective is roundoff-limited and
# wants a larger one.
AUDIT_EPS = {"total": 1e-5, "global": 1e-5, "focus": 1e-5,
             "local": 1e-5, "cst": 3e-6, "all": 1e-5}


def audit_config(seed: int = 0) -> PipelineConfig:
    """The toy geometry the gradient audit runs on: 8 nodes, d=8, float64."""
    cfg = PipelineConfig()
    cfg.d_model = 8
    cfg.heads = 2
    cfg.depth_global = 1
    cfg.depth_group = 1
    cfg.depth_inter = 1
    cfg.gcn_layers = 2
    cfg.bins = 4
    cfg.n_global = 8
    cfg.n_local = 6
    cfg.subgraph_size = 2
    cfg.k_subgraphs = 2
    cfg.prototype_count = 3
    cfg.seed = seed
    cfg.dtype = "float64"
    cfg.validate()
    return cfg


def gradient_audit(seed: int = 0, eps: float | None = None, term: str = "total"):
    """Finite-difference audit of a training objective on a toy geometry.

    An 8-node float64 graph runs end-to-end on one synthetic slide. `term`
    picks the objective: one of the component losses, or "total" for the
    weighted sum. Every parameter the objective reaches analytically is
    checked element by element. Selection, crop graphs, the focus target,
    the focus head's input features, and the vocabulary are frozen across
    evaluations: the model treats them as constants (stop-gradient or data),
    so the objective stays smooth in the parameters. Returns (max_rel_err,
    tensor_names, seconds).
    """
    from .slides import SynthConfig, generate_synthetic

    import dataclasses
    import time

    if term not in AUDIT_TERMS:
        raise ValueError(f"term must be one of {AUDIT_TERMS}, got {term!r}")
    if eps is None:
        eps = AUDIT_EPS[term]
    t0 = time.perf_counter()
    cfg = audit_config(seed)
    record = generate_synthetic(
        SynthConfig(width=256, height=256, lesion_count_range=(1, 1),
                    blob_radius_range=(0.12, 0.2)), seed=seed + 40)
    label = record.label
    ps = build_model(cfg)
    graph = thumbnail_graph(record, cfg)
    cache: dict = {}
    first = run_slide(ps, cfg, record, graph=graph, crop_cache=cache)
    members_list = [sg.members for sg in first.selection.subgraphs]
    vocab = first.vocab
    target = focus.pseudo_label("supervised", None,
                                lesion_fractions=graph.lesion_fractions())
    # The focus head reads stop-gradient features, so finite differences must
    # see the same constant input or they would measure the trunk path the
    # analytic gradient deliberately omits.
    frozen_h = Tensor(first.gtrace.h_prime.values.copy())

    def objective():
        gtrace = gb.forward(ps, cfg, graph)
        q_pred = focus.predict(ps,
                               dataclasses.replace(gtrace, h_prime=frozen_h))
        losses = {"global": gb.classification_loss(gtrace, label),
                  "focus": focus.focus_loss(q_pred, target)}
        runs = [lb.process_subgraph(ps, cfg, record, graph, m, cache=cache)
                for m in members_list]
        loc = cst = None
        for run in runs:
            l1 = lb.local_loss(run.trace)
            l2 = lb.consistency_loss(ps, run.trace, gtrace, run.members)
            loc = l1 if loc is None else ad.add(loc, l1)
            cst = l2 if cst is None else ad.add(cst, l2)
        losses["local"] = ad.scale(loc, 1.0 / len(runs))
        losses["cst"] = ad.scale(cst, 1.0 / len(runs))
        losses["all"] = pr.fused_loss(pr.fuse(ps, cfg, gtrace, runs, vocab),
                                      label)
        if term == "total":
            return total_loss(cfg, losses)
        return losses[term]

    # one analytic backward picks the parameters the objective reaches; for
    # "total" that is the whole store (the acceptance suite asserts this)
    ps.zero_grad()
    ad.backward(objective())
    names = [n for n, t in ps.items()
             if t.grad is not None and np.any(t.grad != 0)]
    ps.zero_grad()
    err = nn.grad_check(objective, [ps[n] for n in names], eps=eps)
    return err, names, time.perf_counter() - t0
