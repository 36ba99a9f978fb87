"""SLIC superpixel segmentation and region-adjacency graph construction.

The segmentation is deterministic: fixed grid seeding (no RNG), strict
lowest-id tie-breaking, and a connectivity pass that merges stray
components in a fixed order. Node features are per-channel color
histograms plus the normalized region centroid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import pnm

FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=np.uint8)


def rgb_to_lab(image: np.ndarray) -> np.ndarray:
    """sRGB uint8 to CIELAB (D65), float64."""
    c = np.asarray(image, dtype=np.float64) / 255.0
    c = np.where(c > 0.04045, ((c + 0.055) / 1.055) ** 2.4, c / 12.92)
    m = np.array([
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ])
    xyz = c @ m.T
    xyz /= np.array([0.95047, 1.0, 1.08883])
    d = 6.0 / 29.0
    f = np.where(xyz > d ** 3, np.cbrt(xyz), xyz / (3 * d * d) + 4.0 / 29.0)
    lab = np.empty_like(xyz)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def _seed_grid(h: int, w: int, n_target: int):
    """Choose a rows x cols seed grid whose product best matches n_target.

    Searching row counts (cols = round(n/rows)) keeps the count inside the
    +-10% band even for narrow crops where round(H/S) * round(W/S) would
    drift.
    """
    best = None
    max_rows = min(h, max(2 * int(np.sqrt(n_target * h / max(w, 1))) + 2, n_target))
    for rows in range(1, max_rows + 1):
        cols = int(round(n_target / rows))
        if cols < 1 or cols > w:
            continue
        count_err = abs(rows * cols - n_target)
        aspect_err = abs((h / rows) - (w / cols))
        key = (count_err, aspect_err, rows)
        if best is None or key < best[0]:
            best = (key, rows, cols)
    _, rows, cols = best
    ys = (np.arange(rows) + 0.5) * (h / rows)
    xs = (np.arange(cols) + 0.5) * (w / cols)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([yy.ravel(), xx.ravel()], axis=1)


def _gradient_map(lab: np.ndarray) -> np.ndarray:
    gx = np.zeros(lab.shape[:2])
    gy = np.zeros(lab.shape[:2])
    d = lab[:, 2:] - lab[:, :-2]
    gx[:, 1:-1] = (d * d).sum(axis=2)
    d = lab[2:] - lab[:-2]
    gy[1:-1] = (d * d).sum(axis=2)
    return gx + gy


def slic_segment(image: np.ndarray, n_target: int, compactness: float = 10.0,
                 iterations: int = 10) -> np.ndarray:
    """SLIC labeling of an [H, W, 3] uint8 image into ~n_target regions.

    Distance: sqrt(d_lab^2 + (d_xy / S)^2 * compactness^2) with
    S = sqrt(HW / n_target); assignment searches a 2S x 2S window around
    each center; ties go to the lower center id; a final pass enforces
    4-connectivity by merging orphan components into the largest adjacent
    region. Region ids are contiguous and follow seed order.

    The Lab image used for distances is box-smoothed 3x3 first so pixel-scale
    texture cannot shred regions into one-pixel islands (centers would
    otherwise lock onto alternating texture phases). Straight two-color
    boundaries survive smoothing exactly: the majority side of the window
    still wins. Node features are not affected; callers histogram the raw
    image.
    """
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("expected an [H, W, 3] color image")
    h, w = img.shape[:2]
    if not (1 <= n_target <= h * w):
        raise ValueError("n_target must be between 1 and the pixel count")
    lab = ndimage.uniform_filter(rgb_to_lab(img), size=(3, 3, 1), mode="nearest")
    s = float(np.sqrt(h * w / n_target))
    seeds = _seed_grid(h, w, n_target)

    centers_xy = seeds.copy()
    if s >= 2.0:  # dense seeding skips perturbation so seeds stay distinct
        grad = _gradient_map(lab)
        for i, (cy, cx) in enumerate(centers_xy):
            iy, ix = int(round(cy)), int(round(cx))
            iy = min(max(iy, 0), h - 1)
            ix = min(max(ix, 0), w - 1)
            y0, y1 = max(iy - 1, 0), min(iy + 2, h)
            x0, x1 = max(ix - 1, 0), min(ix + 2, w)
            win = grad[y0:y1, x0:x1]
            k = int(np.argmin(win))  # first minimum: deterministic
            centers_xy[i] = (y0 + k // win.shape[1], x0 + k % win.shape[1])
    else:
        centers_xy = np.floor(centers_xy)  # floor keeps dense seeds distinct
        centers_xy[:, 0] = np.clip(centers_xy[:, 0], 0, h - 1)
        centers_xy[:, 1] = np.clip(centers_xy[:, 1], 0, w - 1)

    k = len(centers_xy)
    centers_lab = lab[centers_xy[:, 0].astype(int), centers_xy[:, 1].astype(int)]
    m2s2 = (compactness * compactness) / (s * s)
    labels = np.full((h, w), -1, dtype=np.int32)
    # color distance via the expanded square ||x||^2 - 2 x.c + ||c||^2 in
    # float32: one matvec per window instead of per-channel subtract/square
    lab32 = lab.astype(np.float32)
    lab_sq = np.einsum("ijk,ijk->ij", lab32, lab32)

    for _ in range(iterations):
        dist = np.full((h, w), np.inf, dtype=np.float32)
        labels.fill(-1)
        c32 = centers_lab.astype(np.float32)
        for i in range(k):
            cy, cx = centers_xy[i]
            y0, y1 = max(int(cy - s), 0), min(int(cy + s) + 1, h)
            x0, x1 = max(int(cx - s), 0), min(int(cx + s) + 1, w)
            if y0 >= y1 or x0 >= x1:
                continue
            ci = c32[i]
            d2 = lab_sq[y0:y1, x0:x1] - 2.0 * (lab32[y0:y1, x0:x1] @ ci) + float(ci @ ci)
            yy = np.arange(y0, y1, dtype=np.float32)[:, None] - np.float32(cy)
            xx = np.arange(x0, x1, dtype=np.float32)[None, :] - np.float32(cx)
            d2 += (yy * yy + xx * xx) * np.float32(m2s2)
            win = dist[y0:y1, x0:x1]
            better = d2 < win  # strict: earlier (lower id) center keeps ties
            win[better] = d2[better]
            labels[y0:y1, x0:x1][better] = i

        # any pixel outside every window joins the nearest center spatially
        orphan = labels < 0
        if orphan.any():
            oy, ox = np.nonzero(orphan)
            d = (oy[:, None] - centers_xy[None, :, 0]) ** 2 \
                + (ox[:, None] - centers_xy[None, :, 1]) ** 2
            labels[oy, ox] = np.argmin(d, axis=1)

        flat = labels.ravel()
        counts = np.bincount(flat, minlength=k).astype(np.float64)
        nz = counts > 0
        yy, xx = np.nonzero(labels >= 0)
        sy = np.bincount(flat, weights=yy, minlength=k)
        sx = np.bincount(flat, weights=xx, minlength=k)
        centers_xy[nz, 0] = sy[nz] / counts[nz]
        centers_xy[nz, 1] = sx[nz] / counts[nz]
        for c in range(3):
            sc = np.bincount(flat, weights=lab[..., c].ravel(), minlength=k)
            centers_lab[nz, c] = sc[nz] / counts[nz]

    labels = _enforce_connectivity(labels, k)
    return labels


def _enforce_connectivity(labels: np.ndarray, k: int) -> np.ndarray:
    """Merge orphan components into the largest adjacent finalized region.

    Each label's largest same-label component is a root that keeps its id.
    Remaining components attach, in deterministic sweeps, to the adjacent
    already-finalized region with the most pixels (ties to the lower id),
    growing regions outward so every final region is 4-connected.
    """
    boxes = ndimage.find_objects(labels + 1)
    comp_img = np.full(labels.shape, -1, dtype=np.int32)
    comp_label: list[int] = []
    comp_size: list[int] = []
    for lab_id in range(k):
        if lab_id >= len(boxes) or boxes[lab_id] is None:
            continue
        sl = boxes[lab_id]
        crop = labels[sl] == lab_id
        comp, ncomp = ndimage.label(crop, structure=FOUR_CONN)
        base = len(comp_label)
        view = comp_img[sl]
        view[crop] = comp[crop] + base - 1
        counts = np.bincount(comp.ravel())[1:]
        comp_label.extend([lab_id] * ncomp)
        comp_size.extend(int(c) for c in counts)
    ncomp = len(comp_label)
    comp_label_arr = np.asarray(comp_label)
    comp_size_arr = np.asarray(comp_size)

    # component adjacency from 4-neighbor contacts
    edges = set()
    for a, b in ((comp_img[:, :-1], comp_img[:, 1:]), (comp_img[:-1, :], comp_img[1:, :])):
        d = a != b
        pairs = np.stack([a[d], b[d]], axis=1)
        if len(pairs):
            pairs = np.unique(np.sort(pairs, axis=1), axis=0)
            edges.update(map(tuple, pairs.tolist()))
    neigh: list[set] = [set() for _ in range(ncomp)]
    for a, b in edges:
        neigh[a].add(b)
        neigh[b].add(a)

    # roots: first largest component of each label
    assigned = np.full(ncomp, -1, dtype=np.int64)  # final label per component
    region_size = np.zeros(k, dtype=np.int64)
    for lab_id in range(k):
        members = np.nonzero(comp_label_arr == lab_id)[0]
        if len(members) == 0:
            continue
        root = members[np.argmax(comp_size_arr[members])]
        assigned[root] = lab_id
        region_size[lab_id] = comp_size_arr[root]

    pending = [ci for ci in range(ncomp) if assigned[ci] < 0]
    while pending:
        progressed = False
        remaining = []
        for ci in pending:
            options = {int(assigned[nb]) for nb in neigh[ci] if assigned[nb] >= 0}
            if not options:
                remaining.append(ci)
                continue
            target = min(options, key=lambda v: (-int(region_size[v]), v))
            assigned[ci] = target
            region_size[target] += comp_size_arr[ci]
            progressed = True
        if not progressed:
            # isolated leftovers (single-label image): keep their own label
            for ci in remaining:
                assigned[ci] = comp_label_arr[ci]
            break
        pending = remaining

    out = assigned[comp_img].astype(np.int32)
    # contiguous relabel preserving seed order
    live = np.nonzero(np.bincount(out.ravel(), minlength=k))[0]
    remap = np.zeros(k, dtype=np.int32)
    remap[live] = np.arange(len(live), dtype=np.int32)
    return remap[out]


# ---------------------------------------------------------------------------
# node features and graph


def extract_node_features(image: np.ndarray, labeling: np.ndarray, bins: int = 16):
    """Per-region color histograms z [N, 3*bins] and centroids p [N, 2].

    Each channel's histogram sums to 1; bin = value * bins // 256. p is the
    mean (x, y) position scaled to [0, 1] by the image extent.
    """
    img = np.asarray(image)
    lab = np.asarray(labeling)
    n = int(lab.max()) + 1
    flat = lab.ravel()
    sizes = np.bincount(flat, minlength=n).astype(np.float64)
    z = np.empty((n, 3 * bins), dtype=np.float64)
    for c in range(3):
        binned = (img[..., c].astype(np.int64) * bins) // 256
        idx = flat * bins + binned.ravel()
        hist = np.bincount(idx, minlength=n * bins).reshape(n, bins)
        z[:, c * bins:(c + 1) * bins] = hist / sizes[:, None]
    h, w = lab.shape
    yy, xx = np.nonzero(lab >= 0)
    sy = np.bincount(flat, weights=yy, minlength=n) / sizes
    sx = np.bincount(flat, weights=xx, minlength=n) / sizes
    p = np.stack([sx / max(w - 1, 1), sy / max(h - 1, 1)], axis=1)
    return z, p


def build_adjacency(labeling: np.ndarray) -> np.ndarray:
    """Symmetric 0/1 region adjacency from 4-neighbor pixel contacts."""
    lab = np.asarray(labeling)
    n = int(lab.max()) + 1
    a = np.zeros((n, n), dtype=np.uint8)
    lh, rh = lab[:, :-1].ravel(), lab[:, 1:].ravel()
    d = lh != rh
    a[lh[d], rh[d]] = 1
    lv, rv = lab[:-1].ravel(), lab[1:].ravel()
    d = lv != rv
    a[lv[d], rv[d]] = 1
    a = np.maximum(a, a.T)
    np.fill_diagonal(a, 0)
    return a


@dataclass
class RegionGraph:
    """Region-adjacency graph of one image crop."""

    labeling: np.ndarray      # [H, W] int32 region ids
    z: np.ndarray             # [N, 3*bins] histograms
    p: np.ndarray             # [N, 2] normalized centroids
    adjacency: np.ndarray     # [N, N] 0/1
    centroids: np.ndarray     # [N, 2] pixel (x, y)
    bboxes: np.ndarray        # [N, 4] x0, y0, x1, y1 (exclusive)
    sizes: np.ndarray         # [N] pixel counts
    class_counts: np.ndarray | None = None  # [N, C] mask pixel tallies

    @property
    def n(self) -> int:
        return len(self.sizes)

    @property
    def features(self) -> np.ndarray:
        return np.hstack([self.z, self.p])

    def lesion_fractions(self) -> np.ndarray:
        """Per-node fraction of pixels carrying any lesion class."""
        if self.class_counts is None:
            raise ValueError("graph was built without a mask")
        total = self.class_counts.sum(axis=1)
        return self.class_counts[:, 1:].sum(axis=1) / np.maximum(total, 1)


def build_graph(image: np.ndarray, n_target: int, bins: int = 16,
                compactness: float = 10.0, iterations: int = 10,
                mask: np.ndarray | None = None, class_count: int = 2) -> RegionGraph:
    """Segment an image and assemble its region graph.

    mask, if given, must be the same height/width as image; per-node class
    pixel tallies are recorded for supervision.
    """
    labeling = slic_segment(image, n_target, compactness, iterations)
    z, p = extract_node_features(image, labeling, bins)
    adj = build_adjacency(labeling)
    n = int(labeling.max()) + 1
    flat = labeling.ravel()
    sizes = np.bincount(flat, minlength=n)
    h, w = labeling.shape
    yy, xx = np.nonzero(labeling >= 0)
    cy = np.bincount(flat, weights=yy, minlength=n) / sizes
    cx = np.bincount(flat, weights=xx, minlength=n) / sizes
    centroids = np.stack([cx, cy], axis=1)
    boxes = ndimage.find_objects(labeling + 1)
    bboxes = np.zeros((n, 4), dtype=np.int64)
    for i, sl in enumerate(boxes):
        bboxes[i] = (sl[1].start, sl[0].start, sl[1].stop, sl[0].stop)
    class_counts = None
    if mask is not None:
        if mask.shape != labeling.shape:
            raise ValueError("mask must match the image extent")
        idx = flat * class_count + np.minimum(mask.ravel(), class_count - 1)
        class_counts = np.bincount(idx, minlength=n * class_count).reshape(n, class_count)
    return RegionGraph(labeling, z, p, adj, centroids, bboxes, sizes,
                       class_counts)


# ---------------------------------------------------------------------------
# exports and metrics


def save_labeling(path, labeling: np.ndarray) -> None:
    """Region ids as 16-bit PGM (supports up to 65535 regions)."""
    lab = np.asarray(labeling)
    if lab.max() > 65535:
        raise ValueError("labeling exceeds 16-bit id range")
    pnm.write_pgm(path, lab.astype(np.uint16), maxval=65535)


def load_labeling(path) -> np.ndarray:
    return pnm.read_pgm(path).astype(np.int32)


def boundary_map(labeling: np.ndarray) -> np.ndarray:
    """Pixels whose right or lower 4-neighbor has a different label."""
    lab = np.asarray(labeling)
    b = np.zeros(lab.shape, dtype=bool)
    b[:, :-1] |= lab[:, :-1] != lab[:, 1:]
    b[:-1, :] |= lab[:-1, :] != lab[1:, :]
    return b


def boundary_recall(labeling: np.ndarray, reference: np.ndarray,
                    tolerance: int = 1) -> float:
    """Fraction of reference boundary pixels within tolerance of a predicted one."""
    pred = boundary_map(labeling)
    ref = boundary_map(reference)
    if not ref.any():
        return 1.0
    if tolerance > 0:
        pred = ndimage.binary_dilation(pred, iterations=tolerance)
    return float((ref & pred).sum() / ref.sum())


def save_boundary_overlay(path, image: np.ndarray, labeling: np.ndarray) -> None:
    """PNG of the image with region boundaries burned in red."""
    from PIL import Image

    img = np.asarray(image).copy()
    b = boundary_map(labeling)
    img[b] = (220, 30, 30)
    Image.fromarray(img).save(path)
