import numpy as np
import pytest

from gridsense.numerics import Rng
from gridsense.scene import (Scene, SceneDistribution, enumerate_scene_set,
                             load_scene_file, occupancy_of, resample_coefficients,
                             sample_scene, save_scene_file)


class TestOccupancy:
    def test_empty_space(self):
        assert np.all(occupancy_of(np.zeros(5, dtype=complex)) == 0)

    def test_mixed(self):
        assert np.array_equal(occupancy_of(np.array([0, 1 + 2j, 0])), [0, 1, 0])

    def test_roundtrip_through_sampling(self):
        dist = SceneDistribution.uniform(3)
        rng = Rng(1)
        q = np.array([1, 0, 1])
        for _ in range(200):
            nu = sample_scene(q, dist, rng)
            assert np.array_equal(occupancy_of(nu), q)


class TestSampleScene:
    def test_all_empty(self):
        dist = SceneDistribution.uniform(4)
        nu = sample_scene(np.zeros(4), dist, Rng(2))
        assert np.all(nu == 0)

    def test_power_matches_variance(self):
        dist = SceneDistribution(priors=[0.5], reflect_var=[2.0])
        rng = Rng(3)
        samples = np.array([sample_scene([1], dist, rng)[0] for _ in range(200_000)])
        power = np.mean(np.abs(samples) ** 2)
        assert abs(power - 2.0) < 0.02 * 2.0

    def test_grids_independent(self):
        dist = SceneDistribution.uniform(2)
        rng = Rng(4)
        draws = np.array([sample_scene([1, 1], dist, rng) for _ in range(200_000)])
        corr = np.corrcoef(draws[:, 0].real, draws[:, 1].real)[0, 1]
        assert abs(corr) < 0.01

    def test_determinism(self):
        dist = SceneDistribution.uniform(3)
        a = sample_scene([1, 1, 0], dist, Rng(77))
        b = sample_scene([1, 1, 0], dist, Rng(77))
        assert np.array_equal(a, b)


class TestEnumerate:
    def test_exhaustive_two_grids(self):
        dist = SceneDistribution.uniform(2)
        scenes = enumerate_scene_set(2, dist, "exhaustive", Rng(5))
        occupancies = {tuple(s.q) for s in scenes}
        assert occupancies == {(0, 0), (1, 0), (0, 1), (1, 1)}

    def test_exhaustive_four_grids(self):
        dist = SceneDistribution.uniform(4)
        scenes = enumerate_scene_set(4, dist, "exhaustive", Rng(5))
        assert len(scenes) == 16

    def test_exhaustive_size_limit(self):
        dist = SceneDistribution.uniform(20)
        with pytest.raises(ValueError):
            enumerate_scene_set(20, dist, "exhaustive", Rng(5))

    def test_sampled_frequency(self):
        dist = SceneDistribution.uniform(3, prior=0.3)
        scenes = enumerate_scene_set(3, dist, "sampled", Rng(6), n_samples=100_000)
        freq = np.mean([s.q for s in scenes], axis=0)
        assert np.all(np.abs(freq - 0.3) < 0.005)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            enumerate_scene_set(2, SceneDistribution.uniform(2), "other", Rng(1))


class TestSceneFile:
    def test_roundtrip(self, tmp_path):
        dist = SceneDistribution.uniform(3)
        scenes = enumerate_scene_set(3, dist, "exhaustive", Rng(7))
        path = tmp_path / "scenes.csv"
        save_scene_file(path, scenes)
        loaded = load_scene_file(path, dist, Rng(8))
        assert len(loaded) == len(scenes)
        for a, b in zip(scenes, loaded):
            assert np.array_equal(a.q, b.q)
            assert np.array_equal(occupancy_of(b.nu), b.q)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "scenes.csv"
        path.write_text("id,a,b\n0,1,0\n")
        with pytest.raises(ValueError):
            load_scene_file(path, SceneDistribution.uniform(2), Rng(1))


def test_resample_keeps_masks():
    dist = SceneDistribution.uniform(3)
    scenes = enumerate_scene_set(3, dist, "exhaustive", Rng(9))
    fresh = resample_coefficients(scenes, dist, Rng(10))
    for a, b in zip(scenes, fresh):
        assert np.array_equal(a.q, b.q)
        if a.q.sum():
            assert not np.array_equal(a.nu, b.nu)
