import numpy as np
import pytest

from edgeopc.errors import ConfigError
from edgeopc.fixtures import (
    FIXTURE_NAMES, make_fixture, oracle_fd_gradient, oracle_rasterize, random_manhattan_layout,
)
from edgeopc.geometry import Polygon, validate_polygon


def test_square_is_one_400_polygon():
    fx = make_fixture("square")
    assert len(fx.polygons) == 1
    x0, y0, x1, y1 = fx.polygons[0].bbox()
    assert (x1 - x0, y1 - y0) == (400, 400)


def test_donut_has_two_rings():
    assert make_fixture("donut").n_rings == 2


def test_lines_are_three_polygons_at_pitch():
    fx = make_fixture("lines", 120)
    assert len(fx.polygons) == 3
    xs = sorted(p.bbox()[0] for p in fx.polygons)
    assert np.diff(xs).tolist() == [120, 120]


@pytest.mark.parametrize("name", FIXTURE_NAMES)
def test_fixtures_are_valid_and_fit(name):
    fx = make_fixture(name)
    for p in fx.polygons:
        validate_polygon(p)
        x0, y0, x1, y1 = p.bbox()
        assert x0 >= 0 and y0 >= 0 and x1 <= fx.width - 1 and y1 <= fx.height - 1


def test_unknown_or_oversized_fixture_rejected():
    with pytest.raises(ConfigError):
        make_fixture("spiral")
    with pytest.raises(ConfigError):
        make_fixture("square", 600)


def test_random_layouts_are_valid_and_seeded():
    for seed in range(30):
        a = random_manhattan_layout(np.random.default_rng(seed), 128)
        b = random_manhattan_layout(np.random.default_rng(seed), 128)
        assert [p.vertices for p in a] == [p.vertices for p in b]
        for p in a:
            validate_polygon(p)


def test_oracle_rasterize_basics():
    assert not oracle_rasterize([], 16, 16).any()
    full = oracle_rasterize([Polygon.rect(0, -1, 16, 15)], 16, 16)
    assert full.all()


def test_fd_oracle_on_toy_losses():
    M = np.random.default_rng(0).random((6, 6))
    px = [(0, 0), (2, 3), (5, 5)]
    assert not oracle_fd_gradient(lambda m: 3.0, M, px).any()
    g = oracle_fd_gradient(lambda m: float(np.sum(m * m)), M, px)
    assert np.allclose(g, [2 * M[y, x] for y, x in px], atol=1e-8)
    with pytest.raises(ConfigError):
        oracle_fd_gradient(lambda m: 0.0, M, px, 0.0)
