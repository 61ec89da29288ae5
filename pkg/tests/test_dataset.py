"""Sampler, rendering, chunking, splits, and the dataset file format."""

import json

import numpy as np
import pytest
from scipy import stats as scipy_stats

from l96lab.dataset import (
    TEST,
    TRAIN,
    NormalizationStats,
    ParameterSampler,
    TaskKind,
    build_dataset,
    chunk_image,
    iter_parameters,
    load_dataset,
    render_image,
    sample_parameters,
    save_dataset,
    task_columns,
)
from l96lab.errors import (
    ChecksumError,
    DegenerateColumn,
    FormatError,
    InsufficientData,
    RangeEmpty,
    ZeroVariance,
)
from l96lab.sim import IntegratorConfig, ModelParams, Trajectory, default_init, simulate


def make_trajectory(b=10.0, c=10.0, h=1.0, n_steps=200, seed=None):
    params = ModelParams(b=b, c=c, h=h, F=10.0)
    return simulate(params, default_init(params), IntegratorConfig(dt=0.005, n_steps=n_steps))


def synthetic_trajectory(rng, b=10.0, c=10.0, h=1.0, n_steps=100):
    """Random-walk stand-in; cheap and spread over all columns."""
    params = ModelParams(b=b, c=c, h=h, F=10.0)
    states = np.cumsum(rng.normal(size=(n_steps, params.n_vars)), axis=0)
    return Trajectory(params=params, states=states, dt=0.005)


class TestParameterSampler:
    def test_degenerate_range(self):
        eps = 1e-9
        sampler = ParameterSampler(
            n_sims=1, seed=3,
            b_range=(10 - eps, 10 + eps), c_range=(10 - eps, 10 + eps),
            h_range=(1 - eps, 1 + eps),
        )
        (p,) = sample_parameters(sampler)
        assert abs(p.b - 10) < 1e-8 and abs(p.c - 10) < 1e-8 and abs(p.h - 1) < 1e-8

    def test_deterministic(self):
        sampler = ParameterSampler(n_sims=10, seed=99)
        a = sample_parameters(sampler)
        b = sample_parameters(sampler)
        assert a == b

    def test_empty_range_rejected(self):
        with pytest.raises(RangeEmpty):
            ParameterSampler(n_sims=1, seed=0, b_range=(13.0, 7.0))

    def test_draws_within_ranges_and_uniform(self):
        sampler = ParameterSampler(n_sims=200, seed=2024)
        draws = sample_parameters(sampler)
        b = np.array([p.b for p in draws])
        c = np.array([p.c for p in draws])
        h = np.array([p.h for p in draws])
        assert b.min() >= 7 and b.max() <= 13
        assert c.min() >= 7 and c.max() <= 13
        assert h.min() >= 0.5 and h.max() <= 1.5
        for vals, lo, hi in ((b, 7, 13), (c, 7, 13), (h, 0.5, 1.5)):
            ks = scipy_stats.kstest((vals - lo) / (hi - lo), "uniform").statistic
            assert ks < 0.1

    def test_stream_extends_samples(self):
        sampler = ParameterSampler(n_sims=5, seed=7)
        head = sample_parameters(sampler)
        stream = iter_parameters(sampler)
        assert [next(stream) for _ in range(5)] == head


class TestRenderImage:
    def make_stats(self, n_vars=20):
        return NormalizationStats(
            col_min=np.zeros(n_vars),
            col_max=np.full(n_vars, 2.0),
            target_mean=np.array([10.0, 10.0, 1.0]),
            target_std=np.array([1.0, 1.0, 0.3]),
        )

    def test_midpoint(self):
        rng = np.random.default_rng(0)
        traj = synthetic_trajectory(rng)
        traj.states[:] = 1.0
        img = render_image(traj, self.make_stats(), TaskKind.XY)
        assert np.array_equal(img, np.full((100, 20), 0.5))

    def test_clamps_below_min(self):
        rng = np.random.default_rng(1)
        traj = synthetic_trajectory(rng)
        traj.states[:] = -5.0
        img = render_image(traj, self.make_stats(), TaskKind.XY)
        assert np.array_equal(img, np.zeros((100, 20)))

    def test_widths_per_task(self):
        rng = np.random.default_rng(2)
        traj = synthetic_trajectory(rng)
        assert render_image(traj, self.make_stats(), TaskKind.XY).shape[1] == 20
        assert render_image(traj, self.make_stats(), TaskKind.Y_ONLY).shape[1] == 16

    def test_idempotent_extremes(self):
        # values at the fitted min/max map exactly to 0 and 1
        rng = np.random.default_rng(3)
        traj = synthetic_trajectory(rng)
        stats = NormalizationStats.fit(traj.states, np.tile([10.0, 10, 1], (4, 1)) + rng.normal(size=(4, 3)))
        img = render_image(traj, stats, TaskKind.XY)
        for col in range(20):
            assert img[np.argmin(traj.states[:, col]), col] == 0.0
            assert img[np.argmax(traj.states[:, col]), col] == 1.0

    def test_degenerate_column(self):
        with pytest.raises(DegenerateColumn):
            NormalizationStats(
                col_min=np.zeros(20),
                col_max=np.r_[np.zeros(1), np.ones(19)],
                target_mean=np.zeros(3),
                target_std=np.ones(3),
            )

    def test_zero_sigma_rejected(self):
        with pytest.raises(ZeroVariance):
            NormalizationStats(
                col_min=np.zeros(20),
                col_max=np.ones(20),
                target_mean=np.zeros(3),
                target_std=np.array([1.0, 0.0, 1.0]),
            )


class TestChunkImage:
    def test_full_scale_count(self):
        img = np.zeros((50_000, 20))
        chunks = chunk_image(img)
        assert len(chunks) == 2500
        assert chunks[0].shape == (20, 20)

    def test_small_count(self):
        assert len(chunk_image(np.zeros((40, 20)))) == 2

    def test_partition_property(self):
        rng = np.random.default_rng(5)
        img = rng.normal(size=(107, 8))
        chunks = chunk_image(img)
        assert len(chunks) == 5
        assert np.array_equal(np.vstack(chunks), img[:100])


def build_fixture(n_sims=4, n_steps=200, test_mode=False, task=TaskKind.XY, seed=11, **kw):
    rng = np.random.default_rng(1234)
    trajs = [
        synthetic_trajectory(rng, b=7 + i, c=8 + 0.5 * i, h=0.5 + 0.1 * i, n_steps=n_steps)
        for i in range(n_sims)
    ]
    return trajs, build_dataset(trajs, task, test_mode, split_seed=seed, **kw)


class TestBuildDataset:
    def test_in_simulation_split_arithmetic(self):
        _, ds = build_fixture(n_sims=2, n_steps=2000)  # 100 chunks each
        for sim in (0, 1):
            labels = ds.split[ds.sim_ids == sim]
            assert labels.size == 100
            assert int((labels == TRAIN).sum()) == 90
            assert int((labels == TEST).sum()) == 10

    def test_holdout_split_arithmetic(self):
        _, ds = build_fixture(n_sims=10, n_steps=100, test_mode=True)
        test_sims = set(ds.sim_ids[ds.split == TEST].tolist())
        train_sims = set(ds.sim_ids[ds.split == TRAIN].tolist())
        assert len(test_sims) == 2
        assert test_sims.isdisjoint(train_sims)
        for sim in test_sims:  # whole simulations are held out
            assert (ds.split[ds.sim_ids == sim] == TEST).all()

    def test_paper_scale_chunk_count_per_sim(self):
        rng = np.random.default_rng(8)
        trajs = [
            synthetic_trajectory(rng, b=8 + i, c=9 + i, h=0.8 + 0.1 * i, n_steps=50_000)
            for i in range(2)
        ]
        ds = build_dataset(trajs, TaskKind.XY, False, split_seed=3)
        assert len(ds) == 2 * 2500

    def test_split_determinism(self):
        _, a = build_fixture(seed=77)
        _, b = build_fixture(seed=77)
        assert np.array_equal(a.split, b.split)
        _, c = build_fixture(seed=78)
        assert not np.array_equal(a.split, c.split)

    def test_stats_from_train_only(self):
        trajs, ds = build_fixture(n_sims=5, n_steps=100, test_mode=True)
        test_sims = set(ds.sim_ids[ds.split == TEST].tolist())
        # perturbing held-out trajectories must not move the statistics
        perturbed = []
        for i, t in enumerate(trajs):
            t2 = Trajectory(params=t.params, states=t.states.copy(), dt=t.dt)
            if i in test_sims:
                t2.states += 1000.0
            perturbed.append(t2)
        ds2 = build_dataset(perturbed, TaskKind.XY, True, split_seed=11)
        assert np.array_equal(ds.stats.col_min, ds2.stats.col_min)
        assert np.array_equal(ds.stats.col_max, ds2.stats.col_max)
        assert np.array_equal(ds.stats.target_std, ds2.stats.target_std)

    def test_chunk_provenance(self):
        trajs, ds = build_fixture(n_sims=3, n_steps=100)
        cols = task_columns(ds.task, 4, 20)
        mn = ds.stats.col_min[cols]
        mx = ds.stats.col_max[cols]
        for i in (0, 7, len(ds) - 1):
            chunk = ds.chunk(i)
            src = trajs[chunk.sim_id].states[
                chunk.chunk_index * 20 : (chunk.chunk_index + 1) * 20, cols
            ]
            want = np.clip((src - mn) / (mx - mn), 0.0, 1.0)
            assert np.array_equal(chunk.pixels, want)

    def test_insufficient_data(self):
        rng = np.random.default_rng(2)
        with pytest.raises(InsufficientData):
            build_dataset([synthetic_trajectory(rng)], TaskKind.XY, False, split_seed=1)

    def test_bad_fraction(self):
        rng = np.random.default_rng(2)
        trajs = [synthetic_trajectory(rng), synthetic_trajectory(rng)]
        with pytest.raises(ValueError):
            build_dataset(trajs, TaskKind.XY, False, split_seed=1, train_fraction=1.0)

    def test_targets_follow_params(self):
        trajs, ds = build_fixture(n_sims=3, n_steps=100)
        for sim, t in enumerate(trajs):
            np.testing.assert_array_equal(
                ds.sim_target(sim), [t.params.b, t.params.c, t.params.h]
            )


class TestDatasetFile:
    def test_round_trip(self, tmp_path):
        _, ds = build_fixture(n_sims=3, n_steps=100)
        path = save_dataset(ds, tmp_path / "d.l96d")
        back = load_dataset(path)
        assert len(back) == len(ds)
        assert back.task == ds.task
        assert back.test_mode == ds.test_mode
        assert np.array_equal(back.split, ds.split)
        assert np.array_equal(back.sim_ids, ds.sim_ids)
        assert np.array_equal(back.targets, ds.targets)
        # pixels survive the float32 store exactly once quantized
        assert np.array_equal(back.pixels, ds.pixels.astype(np.float32).astype(np.float64))
        assert np.array_equal(back.stats.col_min, ds.stats.col_min)

    def test_truncated_file(self, tmp_path):
        _, ds = build_fixture(n_sims=2, n_steps=100)
        path = save_dataset(ds, tmp_path / "d.l96d")
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(FormatError):
            load_dataset(path)

    def test_bad_magic(self, tmp_path):
        _, ds = build_fixture(n_sims=2, n_steps=100)
        path = save_dataset(ds, tmp_path / "d.l96d")
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_dataset(path)

    def test_tampered_digest(self, tmp_path):
        _, ds = build_fixture(n_sims=2, n_steps=100)
        path = save_dataset(ds, tmp_path / "d.l96d")
        manifest_path = tmp_path / "d.l96d.json"
        manifest = json.loads(manifest_path.read_text())
        manifest["payload_sha256"] = "f" * 64
        manifest_path.write_text(json.dumps(manifest))
        with pytest.raises(ChecksumError):
            load_dataset(path)

    def test_manifest_records_width(self, tmp_path):
        _, ds = build_fixture(n_sims=2, n_steps=100, task=TaskKind.Y_ONLY)
        save_dataset(ds, tmp_path / "d.l96d")
        manifest = json.loads((tmp_path / "d.l96d.json").read_text())
        assert manifest["width"] == 16
