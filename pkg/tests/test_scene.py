import math

import numpy as np
import pytest

from twrloc import em_core, scene


@pytest.fixture(scope="module")
def grid():
    return em_core.make_grid(2.0, 3e9, pml_cells=10)


class TestWallSpecs:
    def test_thicknesses(self):
        for name in scene.SCENARIOS:
            wall = scene.wall_for_scenario(name)
            expected = 0.15 if name == "airgap" else 0.10
            assert wall.thickness == pytest.approx(expected)
            assert wall.wall_band[1] - wall.wall_band[0] == pytest.approx(expected)

    def test_unknown_scenario(self):
        with pytest.raises(ValueError):
            scene.wall_for_scenario("brick")

    def test_layer_eps_all_at_least_one(self):
        for name in scene.SCENARIOS:
            wall = scene.wall_for_scenario(name)
            assert min(min(layer) for layer in wall.layer_eps) >= 1.0


class TestBuildMaterialMap:
    def test_vacuum_scene_is_all_ones(self, grid):
        mats = scene.build_material_map(scene.Scene(wall=None, targets=()), grid)
        assert (mats.eps_xx == 1.0).all()
        assert (mats.eps_yy == 1.0).all()
        assert (mats.eps_zz == 1.0).all()
        assert mats.mu == 1.0 and mats.sigma == 0.0

    def test_inhomogeneous_profile_one_layer_per_cm(self, grid):
        mats = scene.build_material_map(
            scene.Scene(wall=scene.wall_for_scenario("inhomogeneous"), targets=()), grid)
        column = mats.eps_zz[grid.x_index(1.0), :]
        wall_rows = np.nonzero(column != 1.0)[0]
        assert len(wall_rows) == 10
        ys = grid.y_coords()[wall_rows]
        assert ys[0] == pytest.approx(1.10) and ys[-1] == pytest.approx(1.19)
        assert list(column[wall_rows]) == [3, 6, 4, 5, 6, 3, 6, 3, 5, 2]

    def test_anisotropic_wall_tensor(self, grid):
        mats = scene.build_material_map(
            scene.Scene(wall=scene.wall_for_scenario("anisotropic"), targets=()), grid)
        iy = grid.y_index(1.15)
        band = slice(grid.y_index(1.10), grid.y_index(1.20))
        assert (mats.eps_xx[:, band] == 6.0).all()
        assert (mats.eps_yy[:, band] == 4.0).all()
        assert (mats.eps_zz[:, band] == 2.0).all()
        assert mats.eps_zz[grid.x_index(0.3), iy] == 2.0

    def test_inhomogeneous_anisotropic_layers_match_table(self, grid):
        mats = scene.build_material_map(
            scene.Scene(wall=scene.wall_for_scenario("inhomogeneous_anisotropic"), targets=()),
            grid)
        ix = grid.x_index(0.7)
        for k, (exx, eyy, ezz) in enumerate(scene.INHOM_ANISO_LAYERS):
            iy = grid.y_index(1.10 + 0.01 * k)
            assert mats.eps_xx[ix, iy] == exx
            assert mats.eps_yy[ix, iy] == eyy
            assert mats.eps_zz[ix, iy] == ezz

    def test_airgap_three_slabs(self, grid):
        mats = scene.build_material_map(
            scene.Scene(wall=scene.wall_for_scenario("airgap"), targets=()), grid)
        ix = grid.x_index(1.2)
        assert mats.eps_zz[ix, grid.y_index(1.07)] == 6.0
        assert mats.eps_zz[ix, grid.y_index(1.12)] == 1.0
        assert mats.eps_zz[ix, grid.y_index(1.17)] == 6.0

    def test_target_painted_isotropic_80(self, grid):
        scn = scene.Scene(wall=scene.wall_for_scenario("homogeneous"),
                          targets=(scene.TargetSpec((50.0, 70.0), 0.10),))
        mats = scene.build_material_map(scn, grid)
        # center (50,70) cm maps to (1.00, 0.70) m; 10 cm half-open box = 10 nodes
        cols = np.nonzero(mats.eps_zz[:, grid.y_index(0.70)] == 80.0)[0]
        assert len(cols) == 10
        assert grid.x_coords()[cols[0]] == pytest.approx(0.95)
        iy = grid.y_index(0.70)
        ix = grid.x_index(1.00)
        assert mats.eps_xx[ix, iy] == 80.0 and mats.eps_yy[ix, iy] == 80.0

    def test_target_wall_intersection_rejected(self, grid):
        scn = scene.Scene(wall=scene.wall_for_scenario("homogeneous"),
                          targets=(scene.TargetSpec((50.0, 100.0), 0.30),))
        with pytest.raises(scene.InvalidSceneError):
            scene.build_material_map(scn, grid)

    def test_touching_wall_is_allowed(self, grid):
        # 20 cm target at y=100 tops out exactly at the wall's lower edge
        scn = scene.Scene(wall=scene.wall_for_scenario("homogeneous"),
                          targets=(scene.TargetSpec((50.0, 100.0), 0.20),))
        mats = scene.build_material_map(scn, grid)
        assert mats.eps_zz[grid.x_index(1.0), grid.y_index(1.10)] == 6.0

    def test_overlapping_targets_rejected(self, grid):
        scn = scene.Scene(wall=None, targets=(
            scene.TargetSpec((50.0, 70.0), 0.30),
            scene.TargetSpec((60.0, 70.0), 0.30),
        ))
        with pytest.raises(scene.InvalidSceneError):
            scene.build_material_map(scn, grid)

    def test_deterministic(self, grid):
        scn = scene.Scene(wall=scene.wall_for_scenario("airgap"),
                          targets=(scene.TargetSpec((30.0, 60.0), 0.20),))
        m1 = scene.build_material_map(scn, grid)
        m2 = scene.build_material_map(scn, grid)
        assert np.array_equal(m1.eps_zz, m2.eps_zz)
        assert np.array_equal(m1.eps_xx, m2.eps_xx)


class TestEnumerateSinglePositions:
    def test_paper_grid_has_63_distinct_centers(self):
        centers = scene.enumerate_single_positions((5, 85), (40, 100), 10)
        assert len(centers) == 63
        assert len(set(centers)) == 63
        assert centers[0] == (5, 40)

    def test_coarser_step(self):
        centers = scene.enumerate_single_positions((5, 85), (40, 100), 20)
        assert len(centers) == 20

    def test_empty_range(self):
        assert scene.enumerate_single_positions((10, 5), (40, 100), 10) == []

    def test_bad_step(self):
        with pytest.raises(ValueError):
            scene.enumerate_single_positions((5, 85), (40, 100), 0)


@pytest.fixture(scope="module")
def positions():
    return scene.enumerate_single_positions((5, 85), (40, 100), 10)


class TestEnumeratePairs:
    def test_756_unique_canonical_pairs(self, positions):
        pairs = scene.enumerate_pairs(positions, 756, seed=7)
        assert len(pairs) == 756
        assert len(set(pairs)) == 756
        for a, b in pairs:
            assert (a[0], a[1]) <= (b[0], b[1])
            assert max(abs(a[0] - b[0]), abs(a[1] - b[1])) >= 30

    def test_same_seed_identical(self, positions):
        assert scene.enumerate_pairs(positions, 756, seed=7) == \
            scene.enumerate_pairs(positions, 756, seed=7)

    def test_zero_separation_gives_all_pairs(self, positions):
        pairs = scene.enumerate_pairs(positions, math.comb(63, 2), seed=1,
                                      min_separation_cm=0.0)
        assert len(pairs) == 1953

    def test_capacity_error(self, positions):
        with pytest.raises(ValueError):
            scene.enumerate_pairs(positions, 2000, seed=1)


class TestPaperFrameToDomain:
    def test_lower_corner(self):
        assert scene.paper_frame_to_domain((5, 40), (0.50, 0.0)) == \
            pytest.approx((0.55, 0.40))

    def test_upper_corner(self):
        assert scene.paper_frame_to_domain((85, 100), (0.50, 0.0)) == \
            pytest.approx((1.35, 1.00))

    def test_square_leaving_domain_rejected(self):
        with pytest.raises(scene.InvalidSceneError):
            scene.paper_frame_to_domain((5, 40), (0.0, 0.0), size_m=0.30)


class TestValidTargetSizes:
    def test_all_sizes_fit_in_open_area(self):
        wall = scene.wall_for_scenario("homogeneous")
        assert scene.valid_target_sizes((50, 70), wall) == (0.10, 0.20, 0.30)

    def test_large_size_excluded_near_wall(self):
        wall = scene.wall_for_scenario("homogeneous")
        assert scene.valid_target_sizes((50, 100), wall) == (0.10, 0.20)

    def test_airgap_stricter_near_wall(self):
        wall = scene.wall_for_scenario("airgap")
        assert scene.valid_target_sizes((50, 100), wall) == (0.10,)


class TestScenarioDistinguishability:
    def test_wall_scenarios_change_the_probe_record(self):
        grid = em_core.make_grid(2.0, 3e9, pml_cells=10)
        src = em_core.SourceSpec(3e9, row_y=1.6, amplitude=1.0)

        def record(name):
            scn = scene.Scene(wall=scene.wall_for_scenario(name), targets=())
            return em_core.run_simulation(scn, grid, src, (1.0, 1.5), 500, 1)

        hom = record("homogeneous")
        aniso = record("anisotropic")
        inhom = record("inhomogeneous")
        assert np.abs(hom.ez_series - aniso.ez_series).max() > 1e-6
        assert np.abs(hom.ez_series - inhom.ez_series).max() > 1e-6
