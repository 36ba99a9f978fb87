"""Thumbnail branch: GCN over the region graph, class-token attention,
slide-level classification, and gradient-based node saliency.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad, nn
from .autodiff import Tensor
from .config import PipelineConfig
from .nn import ParamStore
from .superpixels import RegionGraph


def build_params(ps: ParamStore, cfg: PipelineConfig) -> None:
    d = cfg.d_model
    nn.build_gcn_stack(ps, "global/gcn", d_in=3 * cfg.bins + 2, d=d, layers=cfg.gcn_layers)
    ps.param("global/proj", (d, d))              # token projection, matrix only
    ps.param("global/cls", (d,), init="normal")  # learnable class token
    nn.build_encoder_stack(ps, "global/att", d, cfg.depth_global)
    nn.build_mlp_head(ps, "global/head", d, d // 2, cfg.class_count)


@dataclass
class GlobalTrace:
    """Forward artifacts the rest of the pipeline consumes."""

    node_embed: Tensor    # v  [N, d] GCN output
    tokens: Tensor        # h  [N, d] projected + minmax-normalized
    h_prime: Tensor       # h' [N, d] post-attention node states
    cls_prime: Tensor     # CLS' [d]
    logits: Tensor        # [C]

    @property
    def n(self) -> int:
        return self.h_prime.shape[0]

    def probabilities(self) -> np.ndarray:
        return ad.softmax(self.logits.detach()).values

    def predicted_class(self) -> int:
        return int(np.argmax(self.logits.values))


def forward(ps: ParamStore, cfg: PipelineConfig, graph: RegionGraph,
            nhat: np.ndarray | None = None) -> GlobalTrace:
    """Run the thumbnail branch over one region graph."""
    if nhat is None:
        nhat = nn.normalized_adjacency(graph.adjacency, dtype=cfg.np_dtype)
    x = Tensor(np.asarray(graph.features, dtype=cfg.np_dtype))
    v = nn.apply_gcn_stack(ps, "global/gcn", nhat, x, layers=cfg.gcn_layers)
    h = ad.minmax_norm(ad.matmul(v, ps["global/proj"]))
    n = h.shape[0]
    seq = ad.concat([h, ad.reshape(ps["global/cls"], (1, cfg.d_model))], axis=0)
    out = nn.apply_encoder_stack(ps, "global/att", seq, cfg.heads, cfg.depth_global)
    h_prime = out[:n]
    cls_row = out[n:n + 1]  # [1, d]: keep matrix rank through the head
    cls_prime = ad.reshape(cls_row, (cfg.d_model,))
    logits = ad.reshape(nn.apply_mlp_head(ps, "global/head", cls_row),
                        (cfg.class_count,))
    return GlobalTrace(v, h, h_prime, cls_prime, logits)


def classification_loss(trace: GlobalTrace, label: int) -> Tensor:
    return nn.cross_entropy(trace.logits, label)


def saliency_heatmap(trace: GlobalTrace, class_index: int) -> np.ndarray:
    """Node saliency: ReLU of the per-node gradient-activation inner product.

    d logit_c / d h'_n dotted with h'_n, rectified then normalized to sum 1;
    an all-zero map degenerates to uniform. Computed with a side gradient
    pass so parameter .grad fields stay untouched.
    """
    target = trace.logits[int(class_index)]
    (g,) = ad.gradients(target, [trace.h_prime])
    n = trace.h_prime.shape[0]
    if g is None:
        return np.full(n, 1.0 / n)
    s = np.maximum((g * trace.h_prime.values).sum(axis=1), 0.0)
    total = s.sum()
    if total <= 0.0:
        return np.full(n, 1.0 / n)
    return s / total


def heatmap_to_raster(heatmap: np.ndarray, labeling: np.ndarray) -> np.ndarray:
    """Paint per-node weights back onto the pixel grid."""
    return heatmap[labeling]


def save_heatmap_png(path, heatmap: np.ndarray, labeling: np.ndarray,
                     image: np.ndarray | None = None) -> None:
    """Normalized heatmap as a grayscale or overlay PNG."""
    from PIL import Image

    raster = heatmap_to_raster(heatmap, labeling)
    peak = raster.max()
    scaled = (raster / peak * 255.0).astype(np.uint8) if peak > 0 else \
        np.zeros(raster.shape, dtype=np.uint8)
    if image is None:
        Image.fromarray(scaled).save(path)
        return
    overlay = np.asarray(image).astype(np.float64).copy()
    overlay[..., 0] = np.minimum(255.0, overlay[..., 0] + 0.6 * scaled)
    overlay[..., 1] *= 1.0 - 0.4 * (scaled / 255.0)
    overlay[..., 2] *= 1.0 - 0.4 * (scaled / 255.0)
    Image.fromarray(overlay.astype(np.uint8)).save(path)
