# Copyright 2026 The pclab authors
# See LICENSE file for licensing details.

import numpy as np
import pytest

from errors import GeometryError, ParameterError, UnknownLabelError
from point_process import (
    Box,
    PointCloud,
    ProcessSpec,
    Seed,
    cells_per_side,
    count_statistics,
    dump_cloud,
    format_cloud,
    load_cloud,
    parse_cloud,
    poisson_goodness_of_fit,
    sample_discretized,
    sample_poisson,
    thin,
    thinning_mask,
)


@pytest.fixture(scope="module")
def box2d():
    return Box(d=2, L=10.0)


def test_seed_substreams_are_reproducible():
    seed = Seed(42)
    first = seed.generator("poisson", 3).random(5)
    again = Seed(42).generator("poisson", 3).random(5)
    assert np.array_equal(first, again)


@pytest.mark.parametrize(
    "tag, index",
    [("poisson", 4), ("thin", 3), ("discretized", 3)],
)
def test_seed_substreams_differ_by_tag_and_index(tag, index):
    reference = Seed(42).generator("poisson", 3).random(5)
    assert not np.array_equal(reference, Seed(42).generator(tag, index).random(5))


def test_seed_rejects_negative_master():
    with pytest.raises(ParameterError):
        Seed(-1)


def test_minimum_image_distance():
    box = Box(d=1, L=10.0)
    assert box.distance(np.array([0.5]), np.array([9.5])) == pytest.approx(1.0)
    assert box.displacement(np.array([9.5]), np.array([0.5]))[0] == pytest.approx(1.0)


def test_cloud_rejects_points_outside_box(box2d):
    with pytest.raises(GeometryError):
        PointCloud(box2d, np.array([[1.0, 10.0]]))


def test_unknown_label(box2d):
    cloud = PointCloud.from_positions(box2d, [[1.0, 1.0]])
    with pytest.raises(UnknownLabelError):
        cloud.position(1)
    with pytest.raises(UnknownLabelError):
        cloud.check_labels([0, 5])


def test_from_positions_wraps(box2d):
    cloud = PointCloud.from_positions(box2d, [[-1.0, 11.0]])
    assert np.allclose(cloud.positions, [[9.0, 1.0]])


def test_poisson_counts_match_poisson_law(box2d):
    spec = ProcessSpec("poisson", box2d, intensity=0.5)
    stats = count_statistics(spec, 2000, Seed(1))
    expected = 0.5 * box2d.volume
    assert abs(stats.mean - expected) <= 4 * stats.mean_stderr
    assert abs(stats.variance - expected) <= 4 * stats.variance_stderr
    assert poisson_goodness_of_fit(stats.counts, expected) > 1e-3


def test_poisson_zero_intensity_is_empty(box2d):
    assert len(sample_poisson(0.0, box2d, Seed(0))) == 0


def test_discretized_has_one_point_per_cube_in_lex_order(box2d):
    h = 0.5
    cloud = sample_discretized(h, 1.0, box2d, Seed(9))
    assert len(cloud) > 0
    cubes = np.floor(cloud.positions / h).astype(int)
    flat = np.ravel_multi_index(tuple(cubes.T), (cells_per_side(box2d.L, h),) * 2)
    assert np.all(np.diff(flat) > 0)


def test_discretized_full_retention_fills_every_cube():
    box = Box(d=1, L=4.0)
    cloud = sample_discretized(1.0, 1.0, box, Seed(0))
    assert len(cloud) == 4


@pytest.mark.parametrize(
    "h, intensity, error",
    [
        (0.3, 1.0, GeometryError),  # L/h not an integer
        (1.0, 1.5, ParameterError),  # lambda h^d > 1
        (0.0, 1.0, ParameterError),
    ],
)
def test_discretized_rejects_bad_parameters(box2d, h, intensity, error):
    with pytest.raises(error):
        sample_discretized(h, intensity, box2d, Seed(0))


def test_thinning_is_monotone_in_p(box2d):
    cloud = sample_poisson(2.0, box2d, Seed(5))
    masks = [thinning_mask(cloud, p, Seed(5), 0) for p in (0.1, 0.3, 0.6, 0.9)]
    for small, large in zip(masks, masks[1:]):
        assert np.all(large[small])


def test_thinning_extremes(box2d):
    cloud = sample_poisson(1.0, box2d, Seed(2))
    assert len(thin(cloud, 1.0, Seed(2))) == len(cloud)
    assert len(thin(cloud, 0.0, Seed(2))) == 0


def test_thinned_cloud_keeps_parent_labels(box2d):
    cloud = sample_poisson(1.0, box2d, Seed(3))
    thinned = thin(cloud, 0.5, Seed(3))
    assert np.array_equal(thinned.positions, cloud.positions[thinned.parent_labels])


@pytest.mark.parametrize(
    "intensity, p, h",
    [
        (0.3, 0.5, 0.1),
        (1.0, 0.2, 0.25),
        (0.5, 0.9, 0.5),
    ],
)
def test_thinning_law_matches_reduced_intensity(intensity, p, h):
    box = Box(d=1, L=20.0)
    thinned = count_statistics(ProcessSpec("thinned", box, intensity, h, p), 4000, Seed(10))
    direct = count_statistics(ProcessSpec("discretized", box, intensity * p, h), 4000, Seed(11))
    mean_gap = abs(thinned.mean - direct.mean)
    assert mean_gap <= 4 * np.hypot(thinned.mean_stderr, direct.mean_stderr)
    variance_gap = abs(thinned.variance - direct.variance)
    assert variance_gap <= 4 * np.hypot(thinned.variance_stderr, direct.variance_stderr)


def test_cloud_text_round_trip(tmp_path, box2d):
    cloud = sample_discretized(0.5, 1.0, box2d, Seed(4))
    path = dump_cloud(cloud, tmp_path / "cloud.txt")
    loaded = load_cloud(path)
    assert np.array_equal(loaded.positions, cloud.positions)
    assert loaded.params == cloud.params
    assert format_cloud(loaded) == format_cloud(cloud)


def test_parse_cloud_rejects_bad_header():
    with pytest.raises(GeometryError):
        parse_cloud("1 10.0\n0 1.0\n")


def test_parse_cloud_rejects_unsorted_labels():
    with pytest.raises(GeometryError):
        parse_cloud("1 10 0 0 1 0\n1 1.0\n0 2.0\n")
