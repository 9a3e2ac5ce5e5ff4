import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pathfusion.errors import ConfigError, DomainError
from pathfusion.scene import (
    Box,
    Route,
    SceneConfig,
    build_scene,
    free_space_intercept_db,
    generate_routes,
    los_blocked,
    oracle_path_loss,
    shadowing_db,
)


@pytest.fixture(scope="module")
def cube_scene(scene):
    return replace(scene, buildings=(Box((10.0, 10.0, 10.0), (20.0, 20.0, 20.0)),))


def test_default_scene_dimensions(scene):
    assert scene.street_width == 14.0 and scene.street_length == 375.0
    assert len(scene.buildings) == 5
    assert scene.tx_pose[2] == 1.5
    for b in scene.buildings:
        assert all(h > l for l, h in zip(b.lo, b.hi))


def test_scene_determinism():
    a, b = build_scene(SceneConfig(seed=7)), build_scene(SceneConfig(seed=7))
    assert a == b
    assert [x.lo for x in a.buildings] == [x.lo for x in b.buildings]


@pytest.mark.parametrize(
    "field,value", [("building_count", 0), ("street_width_m", -1.0), ("street_length_m", 0.0), ("tx_height_m", 0.0)]
)
def test_bad_config_names_field(field, value):
    with pytest.raises(ConfigError, match=field):
        build_scene(replace(SceneConfig(), **{field: value}))


def test_buildings_outside_street(scene):
    for b in scene.buildings:
        for x in np.linspace(b.lo[0] + 0.01, b.hi[0] - 0.01, 7):
            for y in np.linspace(b.lo[1] + 0.01, b.hi[1] - 0.01, 7):
                assert not scene.in_street(x, y)


def test_routes_default(scene):
    routes = generate_routes(scene, 4)
    assert len(routes) == 4
    for r in routes:
        assert len(r.waypoints) >= 2
        for s in np.linspace(0, r.length, 200):  # dense containment check, not just waypoints
            x, y, _ = r.point_at(s)
            assert scene.in_street(x, y)


def test_single_route_is_monotone(scene):
    (r,) = generate_routes(scene, 1)
    xs = [r.point_at(s)[0] for s in np.linspace(0, r.length, 50)]
    assert np.all(np.diff(xs) > 0)


@given(st.integers(5, 12), st.integers(0, 2**31))
@settings(max_examples=10, deadline=None)
def test_extra_routes_stay_in_street(scene, n, seed):
    for r in generate_routes(scene, n, seed=seed):
        assert all(scene.in_street(x, y) for x, y in r.waypoints)


def test_route_contracts():
    with pytest.raises(ConfigError):
        Route(((0.0, 0.0),))
    with pytest.raises(ConfigError):
        Route(((0.0, 0.0), (0.0, 0.0), (1.0, 0.0)))
    r = Route(((0.0, 0.0), (3.0, 4.0)))
    assert r.length == 5.0
    with pytest.raises(DomainError):
        r.point_at(5.5)


def test_los_blocked_examples(cube_scene):
    assert los_blocked(cube_scene, (0, 15, 15), (30, 15, 15))
    assert not los_blocked(cube_scene, (0, 25, 25), (30, 25, 25))
    assert not los_blocked(cube_scene, (0, 20, 15), (30, 20, 15))  # grazing a face is not blocking
    with pytest.raises(DomainError):
        los_blocked(cube_scene, (1, 2, 3), (1, 2, 3))


def _sampled_blocked(scene, a, b, n=10_000):
    t = (np.arange(n) + 0.5) / n
    pts = a[None] + t[:, None] * (b - a)[None]
    lo, hi = scene.box_arrays()
    inside = (pts[:, None] > lo[None]) & (pts[:, None] < hi[None])
    return bool(inside.all(axis=2).any())


def test_los_blocked_matches_point_sampling(scene):
    rng = np.random.default_rng(0)
    agree = 0
    for _ in range(1000):
        a = rng.uniform([0, -40, 0.5], [375, 80, 30])
        b = rng.uniform([0, -40, 0.5], [375, 80, 30])
        agree += los_blocked(scene, a, b) == _sampled_blocked(scene, a, b)
    # the sampler can only miss cuts thinner than 1/10^4 of the segment
    assert agree >= 998


def test_free_space_intercept():
    ref = 20 * math.log10(4 * math.pi * 5.9e9 / 299792458.0)
    assert free_space_intercept_db(5.9e9) == pytest.approx(ref, abs=1e-12)
    assert free_space_intercept_db(5.9e9) == pytest.approx(47.86, abs=0.01)


def test_path_loss_examples(cube_scene):
    pl0 = free_space_intercept_db(5.9e9)
    one = oracle_path_loss(cube_scene, (0, 0, 1.5), (1, 0, 1.5), seed=0, shadowing=False)
    assert one.los and one.pl_db == pytest.approx(pl0, abs=1e-12)
    hundred = oracle_path_loss(cube_scene, (0, 0, 1.5), (100, 0, 1.5), seed=0, shadowing=False)
    assert hundred.pl_db - pl0 == pytest.approx(42.0, abs=1e-9)
    a = oracle_path_loss(cube_scene, (0, 0, 1.5), (50, 3, 2), seed=3)
    assert a == oracle_path_loss(cube_scene, (0, 0, 1.5), (50, 3, 2), seed=3)
    with pytest.raises(DomainError):
        oracle_path_loss(cube_scene, (0, 0, 1.5), (0.5, 0, 1.5), seed=0)


@given(st.floats(1.0, 300.0), st.floats(0.01, 100.0))
def test_path_loss_monotone_and_nlos_gap(cube_scene, d, extra):
    los1 = oracle_path_loss(cube_scene, (0, -5, 1.5), (d, -5, 1.5), 0, shadowing=False)
    los2 = oracle_path_loss(cube_scene, (0, -5, 1.5), (d + extra, -5, 1.5), 0, shadowing=False)
    assert los1.los and los2.pl_db > los1.pl_db
    # same distance straight through the cube: NLOS
    half = d / 2 + 6
    nlos = oracle_path_loss(cube_scene, (15 - half, 15, 15), (15 + half, 15, 15), 0, shadowing=False)
    los = oracle_path_loss(cube_scene, (0, -5, 1.5), (2 * half, -5, 1.5), 0, shadowing=False)
    assert not nlos.los
    expected = 12.0 + 10 * (3.2 - 2.1) * math.log10(2 * half)
    assert nlos.pl_db - los.pl_db == pytest.approx(expected, abs=1e-9)


def test_shadowing_statistics_and_consistency():
    vals = np.array([shadowing_db(x, 1.3, seed=5, sigma=2.0, cell=10.0) for x in np.arange(0, 40000, 7.3)])
    assert abs(vals.mean()) < 0.15 and abs(vals.std() - 2.0) < 0.15
    assert shadowing_db(12.5, -3.0, 5, 2.0, 10.0) == shadowing_db(12.5, -3.0, 5, 2.0, 10.0)
    # continuous across lattice lines
    assert abs(shadowing_db(20 - 1e-9, 4, 5, 2.0, 10.0) - shadowing_db(20 + 1e-9, 4, 5, 2.0, 10.0)) < 1e-6
    assert shadowing_db(3.0, 3.0, 5, 0.0, 10.0) == 0.0


def test_default_scene_has_los_and_nlos(scene):
    tx = np.array(scene.tx_pose)
    verdicts = {los_blocked(scene, tx, (x, -3.5, 2.0)) for x in np.linspace(5, 370, 60)}
    assert verdicts == {True, False}
