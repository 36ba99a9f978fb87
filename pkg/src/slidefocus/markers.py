"""Marker mining over magnified group tokens: tag-coherent clusters, a 2-D
principal-component view, and mask-level morphology statistics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .prototypes import kmeans


# ---------------------------------------------------------------------------
# corpus


@dataclass
class FeatureCorpus:
    """Group tokens pooled across slides, with their provenance."""

    features: np.ndarray      # [M, d] detached tokens
    slide_ids: list           # [M]
    tags: list                # [M] prognosis tag or None
    group_classes: np.ndarray  # [M] mask majority class, -1 when unknown

    @property
    def size(self) -> int:
        return len(self.features)


def collect_focus_features(entries) -> FeatureCorpus:
    """Pool detached group tokens from (slide_id, tag, runs) triples."""
    feats, sids, tags, classes = [], [], [], []
    for slide_id, tag, runs in entries:
        for run in runs:
            cb = run.trace.cls_bar.detach().values
            gl = run.trace.group_labels
            for t in range(len(cb)):
                feats.append(cb[t])
                sids.append(slide_id)
                tags.append(tag)
                classes.append(int(gl[t]) if gl is not None else -1)
    if not feats:
        raise ValueError("no group tokens to collect")
    return FeatureCorpus(np.vstack(feats).astype(np.float64), sids, tags,
                         np.asarray(classes, dtype=np.int64))


# ---------------------------------------------------------------------------
# cluster mining


@dataclass
class MarkerCluster:
    """A tag-coherent token cluster: a candidate appearance marker."""

    center: np.ndarray
    rows: np.ndarray          # corpus row indices
    dominant_tag: str
    purity: float
    tag_counts: dict

    @property
    def size(self) -> int:
        return len(self.rows)


def mine_clusters(corpus: FeatureCorpus, k: int, seed: int = 0,
                  min_size: int = 5, min_purity: float = 0.95) -> list:
    """Cluster the corpus and keep clusters dominated by a single tag.

    Rows without a tag count toward cluster size but not purity; clusters
    with no tagged rows are dropped. Results sort by size, largest first.
    """
    centers, assign, _ = kmeans(corpus.features, min(k, corpus.size), seed=seed)
    found = []
    for c in range(len(centers)):
        rows = np.nonzero(assign == c)[0]
        if len(rows) < min_size:
            continue
        tagged = [corpus.tags[i] for i in rows if corpus.tags[i] is not None]
        if not tagged:
            continue
        counts: dict = {}
        for t in tagged:
            counts[t] = counts.get(t, 0) + 1
        dom, cnt = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        purity = cnt / len(tagged)
        if purity >= min_purity:
            found.append(MarkerCluster(centers[c], rows, dom, purity, counts))
    found.sort(key=lambda mc: (-mc.size, mc.dominant_tag))
    return found


def cluster_report(clusters, corpus: FeatureCorpus) -> list:
    """JSON-ready summary of mined clusters and their source slides."""
    out = []
    for mc in clusters:
        slides = sorted({corpus.slide_ids[i] for i in mc.rows})
        out.append({"size": mc.size, "dominant_tag": mc.dominant_tag,
                    "purity": round(mc.purity, 6), "tag_counts": mc.tag_counts,
                    "slides": slides})
    return out


# ---------------------------------------------------------------------------
# 2-D projection


def project_2d(features: np.ndarray, components: int = 2,
               iterations: int = 500, tol: float = 1e-9):
    """Principal-component embedding by power iteration with deflation.

    Each axis gets a fixed sign (its largest-magnitude entry positive) so
    repeated runs agree. Returns (coords [M, c], axes [c, d], explained
    variance ratios [c]).
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("features must be an [M, d] matrix")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / max(len(x) - 1, 1)
    total = float(np.trace(cov))
    axes, vals = [], []
    work = cov.copy()
    for _ in range(components):
        v = np.ones(work.shape[0]) / np.sqrt(work.shape[0])
        for _ in range(iterations):
            nv = work @ v
            norm = np.linalg.norm(nv)
            if norm <= tol:
                break
            nv = nv / norm
            if np.linalg.norm(nv - v) < tol:
                v = nv
                break
            v = nv
        lam = max(float(v @ work @ v), 0.0)
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        axes.append(v)
        vals.append(lam)
        work = work - lam * np.outer(v, v)
    axes = np.vstack(axes)
    explained = (np.asarray(vals) / total) if total > 0 else np.zeros(components)
    return xc @ axes.T, axes, explained


def save_projection_png(path, coords: np.ndarray, tags) -> None:
    """Scatter of the 2-D embedding colored by tag (untagged rows gray)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 5))
    uniq = sorted({t for t in tags if t is not None})
    untagged = np.array([t is None for t in tags])
    if untagged.any():
        ax.scatter(coords[untagged, 0], coords[untagged, 1], s=12,
                   c="lightgray", label="untagged")
    for t in uniq:
        sel = np.array([tt == t for tt in tags])
        ax.scatter(coords[sel, 0], coords[sel, 1], s=12, label=str(t))
    ax.legend(loc="best", fontsize=8)
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# mask morphology


def spatial_stats(mask: np.ndarray, class_count: int) -> dict:
    """Area shares, lesion component census, and an infiltration index.

    Infiltration counts mixed 4-neighbor pixel pairs (lesion vs non-lesion)
    per unit lesion area: interleaved growth scores high, compact low.
    """
    m = np.minimum(np.asarray(mask), class_count - 1)
    areas = np.bincount(m.ravel(), minlength=class_count)
    lesion = m >= 1
    mixed = int((lesion[:, :-1] != lesion[:, 1:]).sum()
                + (lesion[:-1, :] != lesion[1:, :]).sum())
    lesion_area = int(lesion.sum())
    components = 0
    sizes = []
    for c in range(1, class_count):
        labeled, count = ndimage.label(m == c)
        components += count
        if count:
            sizes.extend(np.bincount(labeled.ravel())[1:].tolist())
    return {
        "area_fraction": (areas / m.size).tolist(),
        "lesion_components": components,
        "mean_component_size": float(np.mean(sizes)) if sizes else 0.0,
        "infiltration": (mixed / lesion_area) if lesion_area else 0.0,
    }
