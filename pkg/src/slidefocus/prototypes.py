"""Per-slide appearance vocabulary by k-means over magnified node embeddings,
and the fusion head that combines thumbnail, magnified, and vocabulary
evidence into the final slide logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad, nn
from .autodiff import Tensor
from .config import PipelineConfig
from .global_branch import GlobalTrace
from .nn import ParamStore


# ---------------------------------------------------------------------------
# k-means


def _plusplus_init(pts: np.ndarray, k: int, rng) -> np.ndarray:
    """Distance-weighted seeding; falls back to uniform picks when every
    remaining point coincides with a chosen center."""
    n = len(pts)
    centers = np.empty((k, pts.shape[1]), dtype=np.float64)
    centers[0] = pts[rng.integers(0, n)]
    d2 = ((pts - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centers[j:] = pts[rng.integers(0, n, size=k - j)]
            break
        centers[j] = pts[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((pts - centers[j]) ** 2).sum(axis=1))
    return centers


def kmeans(points: np.ndarray, k: int, seed: int = 0, iterations: int = 100,
           tol: float = 1e-6):
    """Lloyd's algorithm with distance-weighted seeding.

    Returns (centers [k, d], assign [n], inertia history). The history is
    non-increasing: assignment minimizes cost for fixed centers, the mean
    update minimizes it for fixed assignments, and an empty cluster reseeds
    to the point farthest from its current center (cost can only drop).
    Stops when inertia improves by less than tol relative to the last value.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError("points must be an [n, d] matrix")
    n = len(pts)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    rng = np.random.default_rng(seed)
    centers = _plusplus_init(pts, k, rng)
    history = []
    assign = np.zeros(n, dtype=np.int64)
    prev = None
    for _ in range(iterations):
        d2 = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        best = d2[np.arange(n), assign]
        inertia = float(best.sum())
        history.append(inertia)
        if prev is not None and abs(prev - inertia) <= tol * max(prev, 1e-12):
            break
        prev = inertia
        counts = np.bincount(assign, minlength=k)
        for c in range(k):
            if counts[c] > 0:
                centers[c] = pts[assign == c].mean(axis=0)
        for c in np.nonzero(counts == 0)[0]:
            far = int(np.argmax(best))
            if best[far] <= 0.0:
                break   # every point already sits on a center
            centers[c] = pts[far]
            best[far] = 0.0
    return centers, assign, history


# ---------------------------------------------------------------------------
# vocabulary


@dataclass
class PrototypeVocabulary:
    """Per-slide k-means centers over magnified region embeddings."""

    centers: np.ndarray      # [C_eff, d]
    assign: np.ndarray       # [M] corpus row -> prototype id
    inertia: list
    requested: int

    @property
    def count(self) -> int:
        return len(self.centers)

    @property
    def truncated(self) -> bool:
        """True when the corpus had fewer rows than requested prototypes."""
        return self.count < self.requested

    def summary(self) -> np.ndarray:
        return self.centers.mean(axis=0)


def build_vocabulary(runs, count: int, seed: int = 0, iterations: int = 100,
                     tol: float = 1e-6) -> PrototypeVocabulary | None:
    """Cluster the detached magnified embeddings of all selected crops.

    Returns None when there are no crops at all; a corpus smaller than the
    requested count is clustered at its own size and flagged truncated.
    """
    if not runs:
        return None
    emb = np.vstack([run.trace.node_embed.detach().values for run in runs])
    c_eff = min(count, len(emb))
    centers, assign, history = kmeans(emb.astype(np.float64), c_eff, seed=seed,
                                      iterations=iterations, tol=tol)
    return PrototypeVocabulary(centers, assign, history, requested=count)


def prototype_rasters(runs, vocab: PrototypeVocabulary) -> list:
    """Per-crop (rect, raster) pairs painting prototype ids over crop pixels."""
    out = []
    offset = 0
    for run in runs:
        n = run.trace.node_embed.shape[0]
        ids = vocab.assign[offset:offset + n]
        out.append((run.rect, ids[run.graph.labeling]))
        offset += n
    if offset != len(vocab.assign):
        raise ValueError("vocabulary was built from a different crop list")
    return out


def save_prototype_png(path, raster: np.ndarray, count: int) -> None:
    """Categorical PNG of a prototype raster (golden-angle hue palette)."""
    import colorsys

    from PIL import Image

    palette = np.zeros((max(count, 1), 3), dtype=np.uint8)
    for i in range(count):
        r, g, b = colorsys.hsv_to_rgb((i * 0.618033988749895) % 1.0, 0.65, 0.95)
        palette[i] = (int(r * 255), int(g * 255), int(b * 255))
    Image.fromarray(palette[raster]).save(path)


# ---------------------------------------------------------------------------
# fusion


def build_params(ps: ParamStore, cfg: PipelineConfig) -> None:
    d = cfg.d_model
    ps.param("fusion/wg", (d, d))
    ps.param("fusion/wl", (d, d))
    ps.param("fusion/wp", (d, d))
    nn.build_mlp_head(ps, "fusion/head", d, d // 2, cfg.class_count)


@dataclass
class FusionTrace:
    """Final slide logits plus flags for which evidence contributed."""

    logits: Tensor           # [C]
    used_local: bool
    used_prototypes: bool

    def probabilities(self) -> np.ndarray:
        return ad.softmax(self.logits.detach()).values

    def predicted_class(self) -> int:
        return int(np.argmax(self.logits.values))


def fuse(ps: ParamStore, cfg: PipelineConfig, global_trace: GlobalTrace,
         runs, vocab: PrototypeVocabulary | None) -> FusionTrace:
    """Slide logits from the thumbnail token, the mean magnified group token,
    and the vocabulary summary.

    The three projections are summed before the head. Missing magnified
    evidence or an absent vocabulary simply contributes nothing; the
    vocabulary summary enters as a constant (clustering is not
    differentiated through), so its gradient reaches only the projection.
    """
    d = cfg.d_model
    cls_row = ad.reshape(global_trace.cls_prime, (1, d))
    total = ad.matmul(cls_row, ps["fusion/wg"])
    if runs:
        toks = [ad.tmean(r.trace.cls_bar, axis=0, keepdims=True) for r in runs]
        mean_tok = ad.tmean(ad.concat(toks, axis=0), axis=0, keepdims=True)
        total = ad.add(total, ad.matmul(mean_tok, ps["fusion/wl"]))
    if vocab is not None:
        psum = Tensor(np.asarray(vocab.summary()[None, :], dtype=cfg.np_dtype))
        total = ad.add(total, ad.matmul(psum, ps["fusion/wp"]))
    logits = ad.reshape(nn.apply_mlp_head(ps, "fusion/head", total),
                        (cfg.class_count,))
    return FusionTrace(logits, used_local=bool(runs),
                       used_prototypes=vocab is not None)


def fused_loss(trace: FusionTrace, label: int) -> Tensor:
    return nn.cross_entropy(trace.logits, int(label))
