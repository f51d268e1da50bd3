import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from contamdetect import imaging
from contamdetect.imaging import (
    DELTA,
    InvalidCoordinatesError,
    StructuringElement,
    binarize,
    closing,
    connected_components,
    crop,
    dilate,
    erode,
    label_image,
    moment_table,
    opening,
    shape_stats,
)

import oracles

gray_images = arrays(np.uint8, st.tuples(st.integers(1, 24), st.integers(1, 24)))
binary_images = arrays(np.bool_, st.tuples(st.integers(1, 20), st.integers(1, 20)))
elements = st.builds(StructuringElement, st.sampled_from(["disk", "square"]), st.integers(1, 3))


def offsets_of(se):
    return oracles.disk_offsets(se.radius) if se.shape == "disk" else oracles.square_offsets(se.radius)


# binarization


def test_binarize_strict_inequality_at_real_threshold():
    img = np.array([[0, 74, 75, 255]], dtype=np.uint8)
    th7 = imaging.threshold_level(7)
    assert th7 == pytest.approx(74.375)
    assert binarize(img, th7).tolist() == [[True, True, False, False]]
    assert not binarize(img, 255).any(axis=None) or binarize(img, 255)[0, 3] == False  # noqa: E712


def test_binarize_rejects_out_of_range_threshold():
    with pytest.raises(ValueError):
        binarize(np.zeros((2, 2), np.uint8), 256)
    with pytest.raises(ValueError):
        binarize(np.zeros((2, 2), np.uint8), -1)


@settings(max_examples=60, deadline=None)
@given(gray_images, st.integers(0, 23))
def test_threshold_nesting(img, k):
    lower = binarize(img, k * DELTA)
    upper = binarize(img, (k + 1) * DELTA)
    assert not (lower & ~upper).any()


# labeling and blob statistics


@settings(max_examples=60, deadline=None)
@given(binary_images)
def test_components_match_bfs(mask):
    got = {frozenset(map(tuple, b.pixel_list.tolist())) for b in connected_components(mask)}
    want = {frozenset(c) for c in oracles.bfs_components(mask)}
    assert got == want


def test_diagonal_pixels_are_one_component():
    mask = np.eye(4, dtype=bool)
    assert len(connected_components(mask)) == 1


def test_single_pixel_is_isotropic_and_solid():
    s = shape_stats([(3, 4)])
    assert s.area == 1 and s.centroid == (3.0, 4.0)
    assert s.aspect_ratio == pytest.approx(1.0)
    assert s.solidity == 1.0
    assert s.minor_axis_len == pytest.approx(4 / np.sqrt(12))


def test_rectangle_axes():
    pix = [(r, c) for r in range(3) for c in range(5)]
    s = shape_stats(pix)
    # variances (n^2 - 1)/12 + 1/12 = n^2/12, so axes are 4n/sqrt(12)
    assert s.major_axis_len == pytest.approx(4 * 5 / np.sqrt(12))
    assert s.minor_axis_len == pytest.approx(4 * 3 / np.sqrt(12))
    assert s.aspect_ratio == pytest.approx(5 / 3)
    assert s.solidity == 1.0


def test_line_aspect_ratio_equals_length():
    s = shape_stats([(0, c) for c in range(10)])
    assert s.aspect_ratio == pytest.approx(10.0)


def test_plus_shape_solidity():
    plus = [(1, 0), (0, 1), (1, 1), (2, 1), (1, 2)]
    # the hull is a diamond containing exactly the five pixels
    assert shape_stats(plus).solidity == 1.0
    l_shape = [(0, 0), (1, 0), (2, 0), (2, 1), (2, 2)]
    assert shape_stats(l_shape).solidity == pytest.approx(5 / 6)


def test_blob_stats_match_oracles_on_random_blobs():
    rng = np.random.default_rng(0)
    for _ in range(300):
        blob = oracles.random_blob(rng)
        s = shape_stats(sorted(blob))
        major, minor = oracles.ellipse_axes(blob)
        assert s.area == len(blob)
        assert s.major_axis_len == pytest.approx(major, rel=1e-9)
        assert s.minor_axis_len == pytest.approx(minor, rel=1e-9)
        assert s.solidity == pytest.approx(len(blob) / oracles.hull_lattice_count(blob), rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(binary_images)
def test_blob_invariants(mask):
    for b in connected_components(mask):
        assert b.area >= 1 and b.aspect_ratio >= 1 - 1e-12 and 0 < b.solidity <= 1
        r0, c0, r1, c1 = b.bbox
        assert r0 <= b.centroid[0] <= r1 - 1 and c0 <= b.centroid[1] <= c1 - 1
        assert (b.pixel_list.min(axis=0) == (r0, c0)).all() and (b.pixel_list.max(axis=0) == (r1 - 1, c1 - 1)).all()


@settings(max_examples=40, deadline=None)
@given(binary_images)
def test_moment_table_agrees_with_per_blob_stats(mask):
    n, labels = label_image(mask)
    table = moment_table(labels, n)
    for b in connected_components(mask):
        assert table.area[b.label] == b.area
        assert table.centroid[b.label] == pytest.approx(b.centroid)
        assert table.major_axis_len[b.label] == pytest.approx(b.major_axis_len, rel=1e-9)
        assert table.minor_axis_len[b.label] == pytest.approx(b.minor_axis_len, rel=1e-9)


def test_hull_count_degenerate_cases():
    assert imaging.hull_pixel_count(imaging.convex_hull(np.array([[2, 2]]))) == 1
    seg = np.array([[0, 0], [0, 4], [0, 2]])
    assert imaging.hull_pixel_count(imaging.convex_hull(seg)) == 5
    diag = np.array([[0, 0], [3, 3]])
    assert imaging.hull_pixel_count(imaging.convex_hull(diag)) == 4


def test_empty_pixel_list_rejected():
    with pytest.raises(ValueError):
        shape_stats([])


# morphology


def test_structuring_element_validation_and_kernels():
    with pytest.raises(ValueError):
        StructuringElement("disk", 0)
    with pytest.raises(ValueError):
        StructuringElement("hexagon", 1)
    assert StructuringElement("disk", 1).kernel.sum() == 5
    assert StructuringElement("square", 1).kernel.sum() == 9
    assert StructuringElement("disk", 2).kernel.sum() == 13
    se = StructuringElement("square", 2)
    assert StructuringElement.from_dict(se.to_dict()) == se


@settings(max_examples=60, deadline=None)
@given(binary_images, elements)
def test_dilate_erode_match_set_oracles(mask, se):
    off = offsets_of(se)
    assert (dilate(mask, se) == oracles.set_dilate(mask, off)).all()
    assert (erode(mask, se) == oracles.set_erode(mask, off)).all()


@settings(max_examples=60, deadline=None)
@given(binary_images, elements)
def test_closing_matches_infinite_plane_oracle(mask, se):
    assert (closing(mask, se) == oracles.set_closing(mask, offsets_of(se), se.radius)).all()


@settings(max_examples=60, deadline=None)
@given(binary_images, elements)
def test_duality_with_black_border(mask, se):
    r = se.radius
    framed = np.pad(mask, r)  # black band of width r
    assert (erode(framed, se) == ~dilate(~framed, se)).all()
    # the converse needs white outside the frame, so compare only the original region
    inner = (slice(r, -r), slice(r, -r))
    assert (dilate(framed, se)[inner] == ~erode(~framed, se)[inner]).all()


@settings(max_examples=60, deadline=None)
@given(binary_images, elements)
def test_opening_closing_idempotent(mask, se):
    op = opening(mask, se)
    cl = closing(mask, se)
    assert (opening(op, se) == op).all()
    assert (closing(cl, se) == cl).all()
    # and they bracket the input
    assert not (op & ~mask).any()
    assert not (mask & ~cl).any()


# crops and files


def test_crop_centres_and_replicates_edges():
    img = np.arange(100, dtype=np.uint8).reshape(10, 10)
    c = crop(img, (0, 0), size=6)
    assert c.shape == (6, 6)
    assert c[3, 3] == img[0, 0]
    assert (c[:3, 3] == img[0, 0]).all()  # rows above the image replicate row 0
    inner = crop(img, (5.4, 4.6), size=4)
    assert inner[2, 2] == img[5, 5]


def test_crop_outside_raises():
    img = np.zeros((10, 10), np.uint8)
    for bad in [(-1, 3), (3, 10), (10.6, 2)]:
        with pytest.raises(InvalidCoordinatesError):
            crop(img, bad)


@pytest.mark.parametrize("suffix", [".pgm", ".png"])
def test_image_round_trip(tmp_path, suffix):
    img = np.random.default_rng(1).integers(0, 256, (17, 23)).astype(np.uint8)
    path = tmp_path / f"x{suffix}"
    imaging.write_image(path, img)
    assert (imaging.read_image(path) == img).all()


def test_pgm_header_is_plain_p5(tmp_path):
    path = tmp_path / "x.pgm"
    imaging.write_image(path, np.zeros((2, 3), np.uint8))
    assert path.read_bytes() == b"P5\n3 2\n255\n" + bytes(6)


def test_gray_validation():
    with pytest.raises(ValueError):
        binarize(np.array([[300]]), 10)
    with pytest.raises(ValueError):
        binarize(np.zeros((2, 2, 3), np.uint8), 10)
    with pytest.raises(TypeError):
        binarize(np.zeros((2, 2), bool), 10)
    assert binarize(np.array([[1.0, 200.0]]), 100).tolist() == [[True, False]]
