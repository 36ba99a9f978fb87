"""Pyramid math, synthetic generation, and the on-disk slide format."""

import dataclasses

import numpy as np
import pytest

from slidefocus import pnm, slides
from slidefocus.slides import SlideRecord, SynthConfig

TINY = SynthConfig(width=64, height=64, factors=(1, 2), mask_factor=2,
                   noise_grain=16, blob_radius_range=(0.12, 0.2))


# -- netpbm -------------------------------------------------------------------

def test_ppm_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    pnm.write_ppm(tmp_path / "a.ppm", img)
    np.testing.assert_array_equal(pnm.read_ppm(tmp_path / "a.ppm"), img)


def test_pgm_roundtrip_8_and_16_bit(tmp_path):
    rng = np.random.default_rng(1)
    m8 = rng.integers(0, 256, size=(4, 6), dtype=np.uint8)
    pnm.write_pgm(tmp_path / "m8.pgm", m8)
    np.testing.assert_array_equal(pnm.read_pgm(tmp_path / "m8.pgm"), m8)
    m16 = rng.integers(0, 40000, size=(4, 6), dtype=np.uint16)
    pnm.write_pgm(tmp_path / "m16.pgm", m16, maxval=65535)
    back = pnm.read_pgm(tmp_path / "m16.pgm")
    assert back.dtype == np.uint16
    np.testing.assert_array_equal(back, m16)


def test_pgm_header_comment_tolerated(tmp_path):
    p = tmp_path / "c.pgm"
    with open(p, "wb") as fh:
        fh.write(b"P5\n# a comment\n2 2\n255\n" + bytes([1, 2, 3, 4]))
    np.testing.assert_array_equal(pnm.read_pgm(p), [[1, 2], [3, 4]])


# -- pyramid ------------------------------------------------------------------

def test_box_downsample_floor_oracle():
    img = np.array([[0, 0], [255, 255]], dtype=np.uint8)[..., None].repeat(3, axis=2)
    out = slides.box_downsample(img, 2)
    assert out.shape == (1, 1, 3)
    assert tuple(out[0, 0]) == (127, 127, 127)


def test_box_downsample_ragged_edges():
    img = np.arange(15, dtype=np.uint8).reshape(3, 5)[..., None].repeat(3, axis=2)
    out = slides.box_downsample(img, 2)
    assert out.shape == (2, 3, 3)
    # bottom-right block is the single pixel 14
    assert out[1, 2, 0] == 14


def test_pyramid_consistency_within_rounding():
    rng = np.random.default_rng(2)
    level0 = rng.integers(0, 256, size=(64, 48, 3), dtype=np.uint8)
    pyr = slides.build_pyramid(level0, (1, 2, 4))
    redown = slides.box_downsample(pyr[2], 2)
    diff = redown.astype(int) - pyr[4].astype(int)
    assert np.abs(diff).max() <= 1


def test_read_region_content_and_bounds():
    rng = np.random.default_rng(3)
    level0 = rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
    rec = SlideRecord("s", slides.build_pyramid(level0, (1, 2)), np.zeros((16, 16), np.uint8), 2, 0)
    crop = slides.read_region(rec, 1, 4, 6, 10, 8)
    np.testing.assert_array_equal(crop, level0[6:14, 4:14])
    with pytest.raises(ValueError):
        slides.read_region(rec, 1, 30, 0, 8, 8)
    with pytest.raises(ValueError):
        slides.read_region(rec, 1, 0, 0, 0, 4)
    with pytest.raises(KeyError):
        slides.read_region(rec, 8, 0, 0, 4, 4)


def test_thumbnail_is_coarsest_level():
    level0 = np.zeros((16, 16, 3), dtype=np.uint8)
    rec = SlideRecord("s", slides.build_pyramid(level0, (1, 2, 4)), np.zeros((4, 4), np.uint8), 4, 0)
    assert slides.thumbnail(rec).shape == (4, 4, 3)


# -- label rule ---------------------------------------------------------------

def test_label_rule_no_lesion():
    assert slides.label_from_mask(np.zeros((10, 10), np.uint8), 3) == 0


def test_label_rule_highest_qualifying_class():
    mask = np.zeros((10, 10), np.uint8)
    mask[:5] = 1
    mask[5:8] = 2
    assert slides.label_from_mask(mask, 3) == 2


def test_label_rule_fraction_threshold():
    mask = np.zeros((100, 100), np.uint8)
    mask[0, :49] = 1  # 0.49% < 0.5%
    assert slides.label_from_mask(mask, 2) == 0
    mask[0, :50] = 1  # exactly 0.5%
    assert slides.label_from_mask(mask, 2) == 1


# -- generator ----------------------------------------------------------------

def test_generate_deterministic():
    a = slides.generate_synthetic(TINY, 7)
    b = slides.generate_synthetic(TINY, 7)
    np.testing.assert_array_equal(a.level(1), b.level(1))
    np.testing.assert_array_equal(a.mask, b.mask)
    assert a.label == b.label and a.slide_id == b.slide_id


def test_generate_no_lesion_config():
    cfg = dataclasses.replace(TINY, lesion_count_range=(0, 0))
    rec = slides.generate_synthetic(cfg, 3)
    assert rec.label == 0
    assert rec.mask.max() == 0
    assert rec.prognosis_tag is None


def test_generate_forced_lesion_sets_label():
    cfg = dataclasses.replace(TINY, lesion_count_range=(1, 1))
    rec = slides.generate_synthetic(cfg, 5)
    assert rec.label == 1
    assert (rec.mask == 1).sum() > 0
    assert rec.prognosis_tag in ("favorable", "unfavorable")


def test_mask_label_agreement_many_seeds():
    # the published label always equals the rule applied to the mask
    cfg = dataclasses.replace(TINY, width=48, height=48, lesion_count_range=(0, 1),
                              blob_radius_range=(0.1, 0.2))
    for seed in range(1000):
        rec = slides.generate_synthetic(cfg, seed)
        assert rec.label == slides.label_from_mask(rec.mask, cfg.class_count)


def test_benign_checker_vanishes_in_thumbnail():
    # the +-a one-pixel checkerboard averages to the blob mean under 2x2 boxes
    cfg = dataclasses.replace(TINY, width=128, height=128, lesion_count_range=(0, 0),
                              background_noise=0.0, blob_count_range=(1, 1),
                              blob_radius_range=(0.25, 0.25))
    rec = slides.generate_synthetic(cfg, 11)
    thumb = rec.level(2).astype(int)
    # blob interior pixels at thumbnail scale sit within 1 gray level of the mean
    lvl0 = rec.level(1).astype(int)
    interior = np.abs(lvl0[:, :, 0].astype(int) - 236).max() > 0  # sanity: blob painted
    assert interior
    blob = np.abs(thumb[:, :, 1] - cfg.blob_rgb[1]) <= 1
    assert blob.sum() > 50  # a solid flat patch exists where the blob is


def test_lesion_and_benign_blobs_share_thumbnail_color():
    cfg = dataclasses.replace(
        TINY, width=128, height=128, background_noise=0.0,
        blob_count_range=(2, 2), lesion_count_range=(1, 1),
        blob_radius_range=(0.18, 0.2))
    rec = slides.generate_synthetic(cfg, 2)
    thumb = rec.level(2).astype(int)
    mask = rec.mask
    lesion_px = thumb[mask == 1]
    assert len(lesion_px) > 0
    # lesion blob is flat at blob_rgb; benign thumbnail interior matches it
    assert np.abs(lesion_px.mean(axis=0) - np.array(cfg.blob_rgb)).max() <= 2.0


def test_lesion_rgb_shift_moves_only_lesion_blobs():
    cfg = dataclasses.replace(
        TINY, width=128, height=128, background_noise=0.0,
        blob_count_range=(2, 2), lesion_count_range=(1, 1),
        blob_radius_range=(0.18, 0.2))
    shifted = dataclasses.replace(cfg, lesion_rgb_shift=(8.0, -6.0, 6.0))
    a = slides.generate_synthetic(cfg, 2)
    b = slides.generate_synthetic(shifted, 2)
    mask = a.mask
    assert np.array_equal(a.mask, b.mask)
    ta, tb = a.level(2).astype(float), b.level(2).astype(float)
    delta = (tb - ta)[mask == 1].mean(axis=0)
    assert np.abs(delta - np.array([8.0, -6.0, 6.0])).max() <= 1.0
    # benign blobs and background untouched except the lesion boundary ring,
    # where 2x2 box cells straddle the mask edge
    changed = np.any(ta != tb, axis=2) & (mask == 0)
    assert changed.mean() < 0.02


# -- disk format ---------------------------------------------------------------

def test_slide_roundtrip_bit_exact(tmp_path):
    rec = slides.generate_synthetic(TINY, 9)
    slides.save_slide(tmp_path / "s", rec)
    back = slides.load_slide(tmp_path / "s")
    assert back.slide_id == rec.slide_id
    assert back.label == rec.label
    assert back.mask_factor == rec.mask_factor
    assert back.prognosis_tag == rec.prognosis_tag
    assert back.factors == rec.factors
    for f in rec.factors:
        np.testing.assert_array_equal(back.level(f), rec.level(f))
    np.testing.assert_array_equal(back.mask, rec.mask)


def test_make_dataset_split_and_balance(tmp_path):
    themes = [{"lesion_count_range": (0, 0)}, {"lesion_count_range": (1, 1)}]
    index = slides.make_dataset(tmp_path, TINY, themes, train_per_class=3,
                                test_per_class=2, seed=1)
    assert len(index["train"]) == 6 and len(index["test"]) == 4
    labels = [index["labels"][s] for s in index["train"]]
    assert sorted(labels) == [0, 0, 0, 1, 1, 1]
    ss = slides.SlideSet(tmp_path)
    rec = ss.get(index["train"][0])
    assert ss.label(rec.slide_id) == rec.label


def test_slide_set_lru_eviction(tmp_path):
    themes = [{"lesion_count_range": (0, 0)}]
    slides.make_dataset(tmp_path, TINY, themes, train_per_class=4, test_per_class=0, seed=2)
    ss = slides.SlideSet(tmp_path, cache_slides=2)
    for sid in ss.train_ids:
        ss.get(sid)
    assert len(ss._cache) == 2
