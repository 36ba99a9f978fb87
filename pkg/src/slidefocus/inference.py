"""Label-free slide inference with logical pixel accounting.

Focused mode magnifies only the selected subgraph footprints; exhaustive
mode sweeps the whole magnified plane in quantum tiles and is the cost
baseline the focused path is measured against.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import global_branch as gb, local_branch as lb, pipeline, prototypes as pr
from .config import PipelineConfig
from .nn import ParamStore
from .slides import SlideRecord


@dataclass
class InferenceResult:
    slide_id: str
    mode: str
    predicted: int
    probabilities: list
    pixels_read: int          # thumbnail plus magnified crop pixels
    level0_pixels: int
    seconds: float
    stage_seconds: dict       # wall-clock per stage (graph build vs model)
    rects: list               # magnified rects, thumbnail coords
    shortfall: bool
    used_prototypes: bool

    @property
    def pixel_fraction(self) -> float:
        return self.pixels_read / self.level0_pixels

    def to_json(self) -> dict:
        return {
            "slide_id": self.slide_id, "mode": self.mode,
            "predicted": self.predicted,
            "probabilities": [round(float(p), 6) for p in self.probabilities],
            "pixels_read": self.pixels_read,
            "level0_pixels": self.level0_pixels,
            "pixel_fraction": round(self.pixel_fraction, 6),
            "seconds": round(self.seconds, 4),
            "stage_seconds": {k: round(v, 4)
                              for k, v in self.stage_seconds.items()},
            "rects": [list(r) for r in self.rects],
            "shortfall": self.shortfall,
            "used_prototypes": self.used_prototypes,
        }

    def comparable(self) -> dict:
        """Everything timing-independent, for determinism comparisons."""
        d = self.to_json()
        del d["seconds"]
        del d["stage_seconds"]
        return d


def exhaustive_rects(record: SlideRecord, cfg: PipelineConfig) -> list:
    """Quantum tiling of the whole thumbnail plane."""
    th, tw = record.level(cfg.thumbnail_factor).shape[:2]
    q = cfg.footprint_quantum
    return [(x0, y0, min(x0 + q, tw), min(y0 + q, th))
            for y0 in range(0, th, q) for x0 in range(0, tw, q)]


def infer_slide(ps: ParamStore, cfg: PipelineConfig, record: SlideRecord,
                mode: str = "focused",
                graph=None) -> InferenceResult:
    """Classify one slide without touching its annotation mask.

    graph, if given, must be a mask-free thumbnail graph (reusing one across
    modes keeps comparisons apples-to-apples and skips repeated SLIC).
    """
    if mode not in ("focused", "exhaustive"):
        raise ValueError("mode must be 'focused' or 'exhaustive'")
    t0 = time.perf_counter()
    if graph is None:
        graph = pipeline.thumbnail_graph(record, cfg, with_mask=False)
    t_graph = time.perf_counter() - t0
    thumb = record.level(cfg.thumbnail_factor)
    pixels = thumb.shape[0] * thumb.shape[1]
    if mode == "focused":
        # crop-graph construction happens inside the pass, so the model
        # stage absorbs it here; exhaustive mode reports it separately
        out = pipeline.run_slide(ps, cfg, record, graph=graph, crop_mask=False)
        rects = [run.rect for run in out.runs]
        ftrace = out.ftrace
        shortfall = out.selection.shortfall
        stage = {"thumbnail_graph": t_graph,
                 "model": time.perf_counter() - t0 - t_graph}
    else:
        gtrace = gb.forward(ps, cfg, graph)
        n_tile = max(4, cfg.n_local // cfg.subgraph_size)
        rects = exhaustive_rects(record, cfg)
        runs = []
        t_crops = 0.0
        for rect in rects:
            c0 = time.perf_counter()
            g = lb.crop_graph(record, cfg, rect, n_target=n_tile,
                              with_mask=False)
            t_crops += time.perf_counter() - c0
            trace = lb.forward_subgraph(ps, cfg, g, [np.arange(g.n)], None)
            runs.append(lb.SubgraphRun((), rect, g, trace))
        vocab = pr.build_vocabulary(runs, cfg.prototype_count, seed=cfg.seed,
                                    iterations=cfg.kmeans_iterations,
                                    tol=cfg.kmeans_tol)
        ftrace = pr.fuse(ps, cfg, gtrace, runs, vocab)
        shortfall = False
        stage = {"thumbnail_graph": t_graph, "crop_graphs": t_crops,
                 "model": time.perf_counter() - t0 - t_graph - t_crops}
    pixels += sum(lb.rect_pixels(r, cfg.zoom) for r in rects)
    probs = ftrace.probabilities()
    return InferenceResult(
        slide_id=record.slide_id, mode=mode,
        predicted=int(np.argmax(probs)),
        probabilities=[float(p) for p in probs],
        pixels_read=int(pixels),
        level0_pixels=int(record.width * record.height),
        seconds=time.perf_counter() - t0,
        stage_seconds=stage,
        rects=list(rects), shortfall=shortfall,
        used_prototypes=ftrace.used_prototypes)


def focus_map_export(ps: ParamStore, cfg: PipelineConfig, record: SlideRecord,
                     out_dir) -> dict:
    """Write the focus heatmap, saliency overlay, and selection rects.

    Returns a JSON-ready summary with the written file names.
    """
    import json
    import os

    os.makedirs(out_dir, exist_ok=True)
    graph = pipeline.thumbnail_graph(record, cfg, with_mask=False)
    out = pipeline.run_slide(ps, cfg, record, graph=graph, crop_mask=False)
    thumb = record.level(cfg.thumbnail_factor)
    files = {}
    files["focus_png"] = os.path.join(out_dir, "focus_heatmap.png")
    gb.save_heatmap_png(files["focus_png"], out.q_pred.detach().values,
                        graph.labeling, thumb)
    sal = gb.saliency_heatmap(out.gtrace, out.gtrace.predicted_class())
    files["saliency_png"] = os.path.join(out_dir, "saliency.png")
    gb.save_heatmap_png(files["saliency_png"], sal, graph.labeling, thumb)
    summary = {
        "slide_id": record.slide_id,
        "predicted": out.predicted_class(),
        "selection": [{"seed": sg.seed, "members": list(sg.members),
                       "score": round(sg.score, 6)}
                      for sg in out.selection.subgraphs],
        "rects": [list(r.rect) for r in out.runs],
        "files": {k: os.path.basename(v) for k, v in files.items()},
    }
    with open(os.path.join(out_dir, "focus_map.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    return summary
