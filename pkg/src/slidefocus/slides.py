"""Slide pyramid store and synthetic slide generation.

A slide is a fixed image pyramid: level 0 at full magnification plus
box-filtered levels at integer downsample factors, a class-id lesion mask
at a declared factor, a scalar label derived from the mask, and an
optional prognosis tag. Slides are immutable once generated.

Disk layout per slide: manifest.json, level_<f>.ppm per pyramid level,
mask.pgm at the mask factor. Round trips are bit-exact.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import pnm

MIN_LESION_FRACTION = 0.005  # class must cover this area share to set the label


@dataclass
class SynthConfig:
    """Controls for the synthetic slide generator.

    Textures are chosen so that blob interiors share one mean color: the
    benign texture is a +-amplitude one-pixel checkerboard that averages
    away under any even box filter, while lesion textures are flat (class 1)
    or stronger checkerboards (other classes / marker variants). Thumbnails
    therefore show where tissue is but not what kind it is.
    """

    width: int = 512
    height: int = 512
    factors: tuple = (1, 2)
    mask_factor: int = 2
    class_count: int = 2
    blob_count_range: tuple = (2, 3)
    lesion_count_range: tuple = (0, 1)
    lesion_class_range: tuple = (1, 1)
    blob_radius_range: tuple = (0.07, 0.13)
    background_rgb: tuple = (236, 228, 238)
    background_noise: float = 5.0
    noise_grain: int = 32
    blob_rgb: tuple = (184, 148, 192)
    benign_amplitude: float = 40.0
    lesion_amplitudes: tuple = (0.0, 64.0, 24.0)  # class c uses entry (c-1) mod len
    lesion_rgb_shift: tuple = (0.0, 0.0, 0.0)  # added to blob_rgb on lesion blobs only
    blob_rgb_jitter: float = 0.0  # uniform +-jitter per blob per channel, all blobs
    checker_period: int = 1
    marker_texture: bool = False
    marker_amplitude: float = 88.0
    unfavorable_probability: float = 0.0
    min_lesion_fraction: float = MIN_LESION_FRACTION

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "SynthConfig":
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name in d:
                v = d[f.name]
                kwargs[f.name] = tuple(v) if isinstance(v, list) else v
        return cls(**kwargs)


@dataclass
class SlideRecord:
    """In-memory slide: pyramid levels keyed by factor, mask, label, tag."""

    slide_id: str
    levels: dict
    mask: np.ndarray
    mask_factor: int
    label: int
    prognosis_tag: str | None = None

    @property
    def factors(self):
        return sorted(self.levels)

    @property
    def width(self) -> int:
        return self.levels[self.factors[0]].shape[1]

    @property
    def height(self) -> int:
        return self.levels[self.factors[0]].shape[0]

    def level(self, factor: int) -> np.ndarray:
        if factor not in self.levels:
            raise KeyError(f"slide {self.slide_id} has no level for factor {factor}")
        return self.levels[factor]


def box_downsample(image: np.ndarray, factor: int) -> np.ndarray:
    """Downsample by an integer factor: floor mean over each f x f block.

    Edge blocks average however many pixels remain. floor((0+0+255+255)/4)
    is 127, matching integer division.
    """
    if factor < 1:
        raise ValueError("factor must be a positive integer")
    img = np.asarray(image)
    if factor == 1:
        return img.copy()
    h, w = img.shape[:2]
    ys = np.arange(0, h, factor)
    xs = np.arange(0, w, factor)
    s = np.add.reduceat(np.add.reduceat(img.astype(np.int64), ys, axis=0), xs, axis=1)
    ch = np.minimum(ys + factor, h) - ys
    cw = np.minimum(xs + factor, w) - xs
    counts = ch[:, None] * cw[None, :]
    if img.ndim == 3:
        counts = counts[..., None]
    return (s // counts).astype(np.uint8)


def build_pyramid(level0: np.ndarray, factors) -> dict:
    """Compute every pyramid level directly from level 0."""
    level0 = np.asarray(level0)
    if level0.dtype != np.uint8 or level0.ndim != 3:
        raise ValueError("level 0 must be an [H, W, 3] uint8 array")
    out = {}
    for f in sorted(set(int(f) for f in factors)):
        out[f] = box_downsample(level0, f) if f != 1 else level0
    return out


def read_region(record: SlideRecord, factor: int, x: int, y: int, w: int, h: int) -> np.ndarray:
    """Crop [y:y+h, x:x+w] from the level at the given factor (level coords)."""
    lvl = record.level(factor)
    lh, lw = lvl.shape[:2]
    if w <= 0 or h <= 0:
        raise ValueError("region width and height must be positive")
    if x < 0 or y < 0 or x + w > lw or y + h > lh:
        raise ValueError(
            f"region ({x},{y},{w},{h}) outside level {factor} bounds {lw}x{lh}")
    return lvl[y:y + h, x:x + w].copy()


def thumbnail(record: SlideRecord, factor: int | None = None) -> np.ndarray:
    """The coarsest level (or the level at an explicit factor)."""
    f = max(record.factors) if factor is None else factor
    return record.level(f)


def label_from_mask(mask: np.ndarray, class_count: int,
                    min_fraction: float = MIN_LESION_FRACTION) -> int:
    """Highest lesion class covering at least min_fraction of the slide, else 0."""
    total = mask.size
    label = 0
    for c in range(1, class_count):
        if (mask == c).sum() / total >= min_fraction:
            label = c
    return label


# ---------------------------------------------------------------------------
# synthesis


def _value_noise(rng, h: int, w: int, grain: int, amplitude: float) -> np.ndarray:
    """Blocky low-frequency noise: coarse normal grid scaled up by repetition."""
    gh, gw = h // grain + 2, w // grain + 2
    coarse = rng.normal(0.0, 1.0, size=(gh, gw))
    up = np.repeat(np.repeat(coarse, grain, axis=0), grain, axis=1)
    return amplitude * up[:h, :w]


def _checker(h: int, w: int, period: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return np.where(((xx // period) + (yy // period)) % 2 == 0, 1.0, -1.0)


def _ellipse_mask(h: int, w: int, cx: float, cy: float, rx: float, ry: float,
                  theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    dx, dy = xx - cx, yy - cy
    ct, st = np.cos(theta), np.sin(theta)
    u = (dx * ct + dy * st) / rx
    v = (-dx * st + dy * ct) / ry
    return u * u + v * v <= 1.0


def generate_synthetic(config: SynthConfig, seed: int) -> SlideRecord:
    """Deterministic synthetic slide for (config, seed).

    Blobs are rotated ellipses over a noisy background; lesion blobs paint
    their class id into the mask. The slide label is derived from the mask
    by the area rule, never set directly.
    """
    rng = np.random.default_rng(np.random.SeedSequence([0x51DE, seed]))
    h, w = config.height, config.width
    base = np.array(config.background_rgb, dtype=np.float64)
    img = np.empty((h, w, 3), dtype=np.float64)
    img[:] = base
    img += _value_noise(rng, h, w, config.noise_grain, config.background_noise)[..., None]

    n_blobs = int(rng.integers(config.blob_count_range[0], config.blob_count_range[1] + 1))
    n_lesion = int(rng.integers(config.lesion_count_range[0], config.lesion_count_range[1] + 1))
    n_lesion = min(n_lesion, n_blobs)
    lesion_class = int(rng.integers(config.lesion_class_range[0], config.lesion_class_range[1] + 1))
    lesion_class = max(1, min(lesion_class, config.class_count - 1))

    tag = None
    if n_lesion > 0:
        unfavorable = rng.random() < config.unfavorable_probability
        tag = "unfavorable" if unfavorable else "favorable"

    rmin, rmax = config.blob_radius_range
    scale = min(h, w)
    placed = []  # (cx, cy, r) for spacing
    geoms = []
    for i in range(n_blobs):
        r = float(rng.uniform(rmin, rmax)) * scale
        for _ in range(60):
            cx = float(rng.uniform(0.16 * w, 0.84 * w))
            cy = float(rng.uniform(0.16 * h, 0.84 * h))
            if all((cx - px) ** 2 + (cy - py) ** 2 >= (0.9 * (r + pr)) ** 2
                   for px, py, pr in placed):
                break
        placed.append((cx, cy, r))
        rx = r * float(rng.uniform(0.8, 1.2))
        ry = r * float(rng.uniform(0.8, 1.2))
        theta = float(rng.uniform(0.0, np.pi))
        geoms.append((cx, cy, rx, ry, theta))

    blob_rgb = np.array(config.blob_rgb, dtype=np.float64)
    checker = _checker(h, w, config.checker_period)
    mh, mw = -(-h // config.mask_factor), -(-w // config.mask_factor)
    mask = np.zeros((mh, mw), dtype=np.uint8)

    # benign blobs first, lesions last so lesions win overlaps in mask and paint
    order = list(range(n_blobs))
    lesion_ids = set(order[n_blobs - n_lesion:])
    for i in order:
        cx, cy, rx, ry, theta = geoms[i]
        region = _ellipse_mask(h, w, cx, cy, rx, ry, theta)
        rgb = blob_rgb
        if i in lesion_ids:
            amp = config.lesion_amplitudes[(lesion_class - 1) % len(config.lesion_amplitudes)]
            if config.marker_texture and tag == "unfavorable":
                amp = config.marker_amplitude
            rgb = blob_rgb + np.array(config.lesion_rgb_shift, dtype=np.float64)
        else:
            amp = config.benign_amplitude
        img[region] = rgb + amp * checker[region][:, None]
        f = config.mask_factor
        mregion = _ellipse_mask(mh, mw, cx / f, cy / f, rx / f, ry / f, theta)
        if i in lesion_ids:
            mask[mregion] = lesion_class
        else:
            mask[mregion] = 0

    level0 = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    label = label_from_mask(mask, config.class_count, config.min_lesion_fraction)
    return SlideRecord(
        slide_id=f"synth-{seed:08d}",
        levels=build_pyramid(level0, config.factors),
        mask=mask,
        mask_factor=config.mask_factor,
        label=label,
        prognosis_tag=tag,
    )


# ---------------------------------------------------------------------------
# disk format


def save_slide(dirpath, record: SlideRecord) -> None:
    os.makedirs(dirpath, exist_ok=True)
    manifest = {
        "slide_id": record.slide_id,
        "width": record.width,
        "height": record.height,
        "factors": list(record.factors),
        "mask_factor": record.mask_factor,
        "label": record.label,
        "prognosis_tag": record.prognosis_tag,
        "tile_layout": "single",
    }
    with open(os.path.join(dirpath, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    for f in record.factors:
        pnm.write_ppm(os.path.join(dirpath, f"level_{f}.ppm"), record.level(f))
    pnm.write_pgm(os.path.join(dirpath, "mask.pgm"), record.mask)


def load_slide(dirpath) -> SlideRecord:
    with open(os.path.join(dirpath, "manifest.json")) as fh:
        manifest = json.load(fh)
    levels = {}
    for f in manifest["factors"]:
        levels[int(f)] = pnm.read_ppm(os.path.join(dirpath, f"level_{f}.ppm"))
    mask = pnm.read_pgm(os.path.join(dirpath, "mask.pgm"))
    return SlideRecord(
        slide_id=manifest["slide_id"],
        levels=levels,
        mask=mask,
        mask_factor=int(manifest["mask_factor"]),
        label=int(manifest["label"]),
        prognosis_tag=manifest.get("prognosis_tag"),
    )


# ---------------------------------------------------------------------------
# datasets


def make_dataset(out_dir, base: SynthConfig, themes: list[dict],
                 train_per_class: int, test_per_class: int, seed: int) -> dict:
    """Write a labeled train/test split of synthetic slides.

    themes[i] holds SynthConfig field overrides for slides whose intended
    label is i; a slide whose derived label disagrees with its theme is
    regenerated under a bumped sub-seed (bounded retries) so the published
    split is exactly balanced.
    """
    index = {"train": [], "test": [], "labels": {}, "tags": {}}
    slide_root = os.path.join(out_dir, "slides")
    os.makedirs(slide_root, exist_ok=True)
    counter = 0
    for split, per_class in (("train", train_per_class), ("test", test_per_class)):
        for cls, overrides in enumerate(themes):
            cfg = dataclasses.replace(base, **{
                k: tuple(v) if isinstance(v, list) else v for k, v in overrides.items()})
            for j in range(per_class):
                rec = None
                for attempt in range(20):
                    s = seed * 1_000_003 + counter * 101 + attempt
                    rec = generate_synthetic(cfg, s)
                    if rec.label == cls:
                        break
                if rec is None or rec.label != cls:
                    raise RuntimeError(f"could not realize a class-{cls} slide")
                counter += 1
                save_slide(os.path.join(slide_root, rec.slide_id), rec)
                index[split].append(rec.slide_id)
                index["labels"][rec.slide_id] = rec.label
                index["tags"][rec.slide_id] = rec.prognosis_tag
    index["base_config"] = base.to_json()
    index["themes"] = themes
    index["seed"] = seed
    with open(os.path.join(out_dir, "index.json"), "w") as fh:
        json.dump(index, fh, indent=1, sort_keys=True)
    return index


class SlideSet:
    """Lazy loader over a dataset directory with a small LRU of open slides."""

    def __init__(self, root, cache_slides: int = 16):
        self.root = root
        with open(os.path.join(root, "index.json")) as fh:
            self.index = json.load(fh)
        self._cache: dict[str, SlideRecord] = {}
        self._order: list[str] = []
        self.capacity = cache_slides

    @property
    def train_ids(self):
        return list(self.index["train"])

    @property
    def test_ids(self):
        return list(self.index["test"])

    def label(self, slide_id: str) -> int:
        return int(self.index["labels"][slide_id])

    def tag(self, slide_id: str):
        return self.index["tags"].get(slide_id)

    def get(self, slide_id: str) -> SlideRecord:
        if slide_id in self._cache:
            self._order.remove(slide_id)
            self._order.append(slide_id)
            return self._cache[slide_id]
        rec = load_slide(os.path.join(self.root, "slides", slide_id))
        self._cache[slide_id] = rec
        self._order.append(slide_id)
        if len(self._order) > self.capacity:
            evict = self._order.pop(0)
            del self._cache[evict]
        return rec
