import dataclasses

import numpy as np
import pytest

from pcgesture.geometry import REFERENCE_ROI, GestureSequence, Point3, PointCloudFrame, Roi, roi_mask
from pcgesture.synthgen import (
    CLASS_NAMES,
    FAMILIES,
    SynthConfig,
    SynthError,
    generate,
    generate_sequence,
    shifted_test_variant,
    train_test_split,
)
from pcgesture.voxelizer import voxelize

SMALL = SynthConfig(per_class=3, frames=6, points=50, seed=11)


def test_ten_distinct_families():
    assert len(FAMILIES) == 10 and len(set(CLASS_NAMES)) == 10
    assert CLASS_NAMES[0] == "static"


def test_generate_is_deterministic_and_ordered():
    a, b = generate(SMALL, REFERENCE_ROI), generate(SMALL, REFERENCE_ROI)
    assert a == b
    assert [s.label for s in a] == [c for c in range(10) for _ in range(3)]
    assert len(a[0]) == 6 and len(a[0].frames[0]) == 50


def test_sequences_independent_of_generation_order():
    data = generate(SMALL, REFERENCE_ROI)
    assert generate_sequence(SMALL, REFERENCE_ROI, 7, 2) == data[7 * 3 + 2]
    bigger = generate(dataclasses.replace(SMALL, per_class=5), REFERENCE_ROI)
    assert bigger[7 * 5 + 2] == data[7 * 3 + 2]


def test_noise_free_single_point_lies_on_trajectory():
    cfg = SynthConfig(per_class=1, frames=5, points=1, noise=0.0, offset=0.0, amplitude_jitter=0.0)
    seq = generate_sequence(cfg, REFERENCE_ROI, 1, 0)
    centre = (REFERENCE_ROI.lower + REFERENCE_ROI.upper) / 2
    for t, frame in enumerate(seq.frames):
        expected = centre + FAMILIES[1][1](t, 5, 1.0)[0]
        np.testing.assert_allclose(frame.points[0], expected, atol=1e-9)


def test_static_vs_sweep_centroid_statistics():
    cfg = SynthConfig(per_class=1, frames=8, points=400, offset=0.0, amplitude_jitter=0.0, seed=3)
    static = generate_sequence(cfg, REFERENCE_ROI, 0, 0)
    sweep = generate_sequence(cfg, REFERENCE_ROI, 1, 0)
    bound = 2 * 3 * cfg.noise / np.sqrt(cfg.points)  # two centroids, each within 3 sigma/sqrt(n)
    for t in range(cfg.frames):
        d = sweep.frames[t].points.mean(axis=0) - static.frames[t].points.mean(axis=0)
        np.testing.assert_allclose(d, FAMILIES[1][1](t, cfg.frames, 1.0)[0], atol=bound)


def test_points_stay_inside_shrunk_roi():
    cfg = SynthConfig(per_class=4, seed=5)
    inner = REFERENCE_ROI.shrink(cfg.margin)
    for seq in generate(cfg, REFERENCE_ROI):
        assert all(roi_mask(inner, f.points).all() for f in seq.frames)


def test_trajectory_escape_is_a_config_error():
    tiny = Roi(Point3(0, 0, 0), Point3(0.3, 0.3, 0.3))
    with pytest.raises(SynthError):
        generate(SynthConfig(per_class=1), tiny)
    with pytest.raises(SynthError):
        SynthConfig(per_class=0)
    with pytest.raises(SynthError):
        SynthConfig(noise=-1)


def features(seq):
    """Per-frame centroid (relative to the sequence mean) and per-axis spread."""
    c = np.array([f.points.mean(axis=0) for f in seq.frames])
    s = np.array([f.points.std(axis=0) for f in seq.frames])
    return np.concatenate([(c - c.mean(axis=0)).ravel(), s.ravel()])


def test_noise_free_classes_are_separable_by_nearest_centroid_trajectory():
    base = SynthConfig(per_class=1, noise=0.0, offset=0.0, amplitude_jitter=0.0)
    templates = [features(generate_sequence(base, REFERENCE_ROI, c, 0)) for c in range(10)]
    cfg = SynthConfig(per_class=8, noise=0.0, seed=21)
    data = generate(cfg, REFERENCE_ROI)
    preds = [int(np.argmin([np.linalg.norm(features(s) - t) for t in templates])) for s in data]
    assert preds == [s.label for s in data]


def test_train_test_split_takes_last_ordinals():
    data = generate(SMALL, REFERENCE_ROI)
    tags = train_test_split(data, 1)
    assert tags.count("test") == 10
    assert [t for t, s in zip(tags, data) if s.label == 4] == ["train", "train", "test"]


def test_shift_examples():
    data = generate(SMALL, REFERENCE_ROI)[:6]
    assert shifted_test_variant(data, (0, 0, 0)) == data
    once = shifted_test_variant(shifted_test_variant(data, (0.05, 0, 0.05)), (0.05, 0, 0.05))
    twice = shifted_test_variant(data, (0.1, 0, 0.1))
    for a, b in zip(once, twice):
        assert a.label == b.label
        for fa, fb in zip(a.frames, b.frames):
            np.testing.assert_allclose(fa.points, fb.points, atol=1e-12)
    with pytest.raises(SynthError):
        shifted_test_variant(data, (0.6, 0, 0), roi=REFERENCE_ROI)


def test_shift_moves_occupied_x_indices_by_one():
    cfg = SynthConfig(per_class=1, frames=1, points=60, noise=0.005, offset=0.0, seed=2)
    seq = generate_sequence(cfg, REFERENCE_ROI, 0, 0)
    # keep points clear of cell boundaries so the one-voxel shift is exact
    pts = seq.frames[0].points
    frac = ((pts - REFERENCE_ROI.lower) / 0.05) % 1
    keep = np.all((frac > 1e-6) & (frac < 1 - 1e-6), axis=1)
    seq = GestureSequence((PointCloudFrame(0, pts[keep]),), 0)
    moved = shifted_test_variant([seq], (0.05, 0, 0))[0]
    a = np.argwhere(voxelize(seq.frames[0], REFERENCE_ROI, 0.05, "count").values)
    b = np.argwhere(voxelize(moved.frames[0], REFERENCE_ROI, 0.05, "count").values)
    np.testing.assert_array_equal(b, a + [1, 0, 0])


def test_subject_ids_cycle():
    data = generate(dataclasses.replace(SMALL, per_class=6), REFERENCE_ROI)
    assert [s.subject_id for s in data[:6]] == ["s00", "s01", "s02", "s03", "s04", "s00"]
