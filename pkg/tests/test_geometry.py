import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcgesture.geometry import (
    REFERENCE_ROI,
    GestureSequence,
    PcsFormatError,
    Point3,
    PointCloudFrame,
    Roi,
    filter_roi,
    parse_sequence_file,
    quantize,
    roi_contains,
    translate_roi,
    write_sequence_file,
)


def test_reference_roi_bounds():
    assert REFERENCE_ROI.min == Point3(-0.5, -0.3, 0.5)
    assert REFERENCE_ROI.max == Point3(0.5, 0.4, 1.4)


def test_roi_rejects_inverted_box():
    with pytest.raises(ValueError):
        Roi(Point3(0, 0, 0), Point3(1, 0, 1))


def test_frame_rejects_non_finite():
    with pytest.raises(ValueError):
        PointCloudFrame(0, [[0.0, np.nan, 1.0]])


def test_sequence_rejects_non_increasing_frames():
    with pytest.raises(ValueError):
        GestureSequence((PointCloudFrame(1, []), PointCloudFrame(1, [])), 0)


# --- roi_contains -----------------------------------------------------------

def test_roi_contains_reference_examples():
    assert roi_contains(REFERENCE_ROI, (0.0, 0.0, 1.0))
    assert roi_contains(REFERENCE_ROI, REFERENCE_ROI.min)
    assert not roi_contains(REFERENCE_ROI, REFERENCE_ROI.max)


@pytest.mark.parametrize("axis", [0, 1, 2])
def test_roi_contains_half_open_per_axis(axis):
    p = np.array([0.0, 0.0, 1.0])
    p[axis] = REFERENCE_ROI.upper[axis]
    assert not roi_contains(REFERENCE_ROI, p)
    p[axis] = np.nextafter(REFERENCE_ROI.upper[axis], -np.inf)
    assert roi_contains(REFERENCE_ROI, p)
    p[axis] = np.nextafter(REFERENCE_ROI.lower[axis], -np.inf)
    assert not roi_contains(REFERENCE_ROI, p)


# --- filter_roi ---------------------------------------------------------------

def test_filter_all_inside_and_all_outside():
    inside = PointCloudFrame(3, [[0, 0, 1.0], [0.1, 0.1, 0.9]])
    assert filter_roi(inside, REFERENCE_ROI) == inside
    outside = PointCloudFrame(4, [[2, 0, 1.0], [0, 0, 0]])
    out = filter_roi(outside, REFERENCE_ROI)
    assert out.index == 4 and len(out) == 0


def test_filter_mixed_matches_per_point_predicate():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1, 2, size=(500, 3))
    frame = PointCloudFrame(0, pts)
    expected = [p for p in pts if roi_contains(REFERENCE_ROI, p)]
    got = filter_roi(frame, REFERENCE_ROI)
    np.testing.assert_array_equal(got.points, np.array(expected).reshape(-1, 3))
    assert filter_roi(got, REFERENCE_ROI) == got  # idempotent


# --- translate_roi -----------------------------------------------------------

def test_translate_examples():
    assert translate_roi(REFERENCE_ROI, (0, 0, 0)) == REFERENCE_ROI
    moved = translate_roi(REFERENCE_ROI, (0.05, 0, 0))
    assert (moved.min.x, moved.max.x) == (pytest.approx(-0.45), pytest.approx(0.55))


@given(st.tuples(*[st.sampled_from([0.0, 0.015, -0.015, 0.05, -0.05, 0.1, -0.1])] * 3))
def test_translate_inverse_and_extent(v):
    moved = translate_roi(REFERENCE_ROI, v)
    back = translate_roi(moved, tuple(-c for c in v))
    np.testing.assert_allclose(back.lower, REFERENCE_ROI.lower, atol=1e-15)
    np.testing.assert_allclose(moved.extent, REFERENCE_ROI.extent, atol=1e-15)


def test_translate_preserves_extent_exactly_for_dyadic_values():
    roi = Roi(Point3(-0.5, -0.25, 0.5), Point3(0.5, 0.375, 1.5))
    moved = translate_roi(roi, (0.0625, -0.125, 0.25))
    np.testing.assert_array_equal(moved.extent, roi.extent)
    assert translate_roi(moved, (-0.0625, 0.125, -0.25)) == roi


# --- .pcs I/O ----------------------------------------------------------------

SAMPLE = b"PCS 1\nlabel 3\nsubject s01\nFRAME 0 2\n0.1 0.2 0.3\n-1 0 2.5\n"


def test_parse_sample():
    seq = parse_sequence_file(SAMPLE)
    assert seq.label == 3 and seq.subject_id == "s01"
    assert len(seq.frames) == 1
    np.testing.assert_array_equal(seq.frames[0].points, [[0.1, 0.2, 0.3], [-1, 0, 2.5]])


def test_parse_zero_frames():
    seq = parse_sequence_file(b"PCS 1\nlabel 0\nsubject a\n")
    assert len(seq) == 0


def test_write_empty_sequence_is_header_only():
    seq = GestureSequence((), 2, "x")
    assert write_sequence_file(seq) == b"PCS 1\nlabel 2\nsubject x\n"


@pytest.mark.parametrize(
    "text, lineno, fragment",
    [
        (b"PCS 2\nlabel 0\nsubject a\n", 1, "magic"),
        (b"PCS 1\nlabl 0\nsubject a\n", 2, "label"),
        (b"PCS 1\nlabel x\nsubject a\n", 2, "integer"),
        (b"PCS 1\nlabel 0\nsubject a\nFRAME 0 3\n0 0 0\n1 1 1\n", 7, "declares 3 points but lists 2"),
        (b"PCS 1\nlabel 0\nsubject a\nFRAME 0 2\n0 0 0\nFRAME 1 0\n", 6, "declares 2 points but lists 1"),
        (b"PCS 1\nlabel 0\nsubject a\nFRAME 0 1\n0 abc 0\n", 5, "non-numeric"),
        (b"PCS 1\nlabel 0\nsubject a\nFRAME 0 1\n0 0\n", 5, "3 coordinates"),
        (b"PCS 1\nlabel 0\nsubject a\nFRAME 0 1\n0 nan 0\n", 5, "non-finite"),
        (b"PCS 1\nlabel 0\nsubject a\nFRAME 1 0\nFRAME 1 0\n", 5, "does not increase"),
        (b"PCS 1\nlabel 0\nsubject a\nFRAMES 1 0\n", 4, "FRAME"),
    ],
)
def test_parse_errors_carry_line_numbers(text, lineno, fragment):
    with pytest.raises(PcsFormatError) as info:
        parse_sequence_file(text)
    assert info.value.lineno == lineno
    assert fragment in str(info.value)


def test_point_count_error_names_frame():
    with pytest.raises(PcsFormatError, match="frame 7"):
        parse_sequence_file(b"PCS 1\nlabel 0\nsubject a\nFRAME 7 3\n0 0 0\n")


def test_nine_digit_coordinate_round_trip():
    seq = GestureSequence((PointCloudFrame(0, [[0.123456789, -1.5, 1e-3]]),), 0)
    text = write_sequence_file(seq)
    assert b"0.123456789 -1.5 0.001" in text
    back = parse_sequence_file(text)
    assert back.frames[0].points[0, 0] == 0.123456789


coords = st.floats(-10, 10, allow_nan=False, allow_infinity=False).map(lambda v: float("%.9g" % v))
frames = st.lists(st.tuples(coords, coords, coords), max_size=6)


@st.composite
def sequences(draw):
    n = draw(st.integers(0, 5))
    gaps = draw(st.lists(st.integers(1, 4), min_size=n, max_size=n))
    idx = np.cumsum([0] + gaps)[:n] + draw(st.integers(0, 3))
    fr = tuple(PointCloudFrame(int(i), np.array(draw(frames), dtype=float).reshape(-1, 3)) for i in idx)
    return GestureSequence(fr, draw(st.integers(0, 9)), draw(st.sampled_from(["s01", "subjectA", "x"])))


@settings(max_examples=150, deadline=None)
@given(sequences())
def test_parse_write_identity(seq):
    assert parse_sequence_file(write_sequence_file(seq)) == seq


def test_random_float_coordinates_quantize_then_round_trip():
    rng = np.random.default_rng(3)
    pts = quantize(rng.normal(size=(200, 3)))
    seq = GestureSequence((PointCloudFrame(0, pts),), 1)
    assert parse_sequence_file(write_sequence_file(seq)) == seq
