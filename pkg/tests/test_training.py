import numpy as np
import numpy.testing as npt
import pytest

from nfcl import diffcore as dc
from nfcl import training
from nfcl.continual import LossKind, Task, TaskKind
from nfcl.datagen import GridSpec, Volume, VolumeKind
from nfcl.errors import ConfigError, TrainingDivergedError
from nfcl.fieldmodels import Arch, ModelConfig, build_model
from nfcl.training import AdamState, TrainConfig, adam_step, fit_task


def constant_task(value=0.5, dims=(6, 6, 4), loss=LossKind.HUBER):
    grid = GridSpec(*dims)
    data = np.full(dims, value, dtype=np.float32)
    vol = Volume(dims, VolumeKind.INTENSITY, data)
    return Task(1, TaskKind.SIGNAL_LAYER, grid, vol, loss, (0, 1))


class TestAdam:
    def test_first_step_ignores_moment_scale(self):
        # with bias correction, a unit gradient moves theta by ~lr
        with dc.precision("float64"):
            params = dc.ParamSet()
            p = params.add("w", np.array([[1.0]]))
            state = AdamState.create(params)
            adam_step(params, {"w": np.array([[1.0]])}, state, lr=0.001)
            expected = 1.0 - 0.001 / (1.0 + 1e-8)
            npt.assert_allclose(p.data, [[expected]], rtol=1e-9)

    def test_zero_gradient_is_identity(self):
        params = dc.ParamSet()
        p = params.add("w", np.array([[0.3, -0.7]]))
        state = AdamState.create(params)
        before = p.data.copy()
        for _ in range(5):
            adam_step(params, {"w": np.zeros((1, 2))}, state, lr=0.01)
        npt.assert_array_equal(p.data, before)

    def test_two_runs_bit_identical(self):
        def run():
            params = dc.ParamSet()
            p = params.add("w", np.array([[1.0, 2.0], [3.0, 4.0]]))
            state = AdamState.create(params)
            rng = np.random.default_rng(0)
            for _ in range(10):
                adam_step(params, {"w": rng.normal(size=(2, 2))}, state, lr=0.01)
            return p.data

        npt.assert_array_equal(run(), run())

    def test_step_counter_increments(self):
        params = dc.ParamSet()
        params.add("w", np.zeros((1, 1)))
        state = AdamState.create(params)
        for expected in (1, 2, 3):
            adam_step(params, {"w": np.ones((1, 1))}, state, lr=0.01)
            assert state.t == expected

    def test_resize_pads_moments_with_zeros(self):
        params = dc.ParamSet()
        p = params.add("w", np.ones((2, 3)))
        state = AdamState.create(params)
        adam_step(params, {"w": np.ones((2, 3))}, state, lr=0.01)
        m_old = state.m["w"].copy()
        params.replace("w", np.vstack([p.data, np.zeros((2, 3), dtype=p.data.dtype)]))
        state.resize(params)
        assert state.m["w"].shape == (4, 3)
        npt.assert_array_equal(state.m["w"][:2], m_old)
        npt.assert_array_equal(state.m["w"][2:], 0.0)
        npt.assert_array_equal(state.v["w"][2:], 0.0)


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(iterations=-1)
        with pytest.raises(ConfigError):
            TrainConfig(lr=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(batch_coords=0)


class TestFitTask:
    def test_constant_target_converges(self):
        task = constant_task(0.5)
        model = build_model(
            ModelConfig(arch=Arch.PE_RELU, in_dim=3, out_channels=1,
                        hidden_layers=2, hidden_width=32, pe_levels=4, seed=0)
        )
        cfg = TrainConfig(iterations=50, lr=0.05, batch_coords=256, seed=0)
        trace = fit_task(model, task, cfg)
        assert trace.loss_fit[-1] < 1e-3

    def test_zero_iterations_is_identity(self):
        task = constant_task()
        model = build_model(
            ModelConfig(arch=Arch.SIREN, in_dim=3, out_channels=1,
                        hidden_layers=2, hidden_width=8, seed=0)
        )
        before = {n: model.params[n].data.copy() for n in model.params.names()}
        trace = fit_task(model, task, TrainConfig(iterations=0, seed=0))
        assert len(trace) == 0
        for name in model.params.names():
            npt.assert_array_equal(model.params[name].data, before[name])

    def test_trace_is_finite_and_total_matches(self):
        task = constant_task()
        model = build_model(
            ModelConfig(arch=Arch.FINER, in_dim=3, out_channels=1,
                        hidden_layers=2, hidden_width=16, seed=1)
        )
        trace = fit_task(model, task, TrainConfig(iterations=20, seed=1))
        assert np.isfinite(trace.loss_total).all()
        npt.assert_allclose(
            np.array(trace.loss_total),
            np.array(trace.loss_fit) + np.array(trace.loss_distil),
        )

    def test_divergence_raises_with_iteration(self):
        task = constant_task()
        model = build_model(
            ModelConfig(arch=Arch.SIREN, in_dim=3, out_channels=1,
                        hidden_layers=2, hidden_width=8, seed=0)
        )
        model.params.replace("W1", np.full_like(model.params["W1"].data, 1e30))
        model.params.replace("W2", np.full_like(model.params["W2"].data, 1e30))
        model.params.replace("W3", np.full_like(model.params["W3"].data, np.nan))
        with pytest.raises(TrainingDivergedError) as err:
            fit_task(model, task, TrainConfig(iterations=5, seed=0))
        assert err.value.iteration == 0

    def test_replays_are_exact(self):
        def run():
            task = constant_task()
            model = build_model(
                ModelConfig(arch=Arch.SIREN, in_dim=3, out_channels=1,
                            hidden_layers=2, hidden_width=16, seed=3)
            )
            fit_task(model, task, TrainConfig(iterations=15, batch_coords=32, seed=3))
            return model.params["W1"].data.copy()

        npt.assert_array_equal(run(), run())

    def test_monotone_trailing_average_on_constant_signal(self):
        task = constant_task(0.25)
        model = build_model(
            ModelConfig(arch=Arch.SIREN, in_dim=3, out_channels=1,
                        hidden_layers=2, hidden_width=32, seed=0)
        )
        trace = fit_task(model, task, TrainConfig(iterations=200, batch_coords=144, seed=0))
        first = np.mean(trace.loss_fit[:100])
        last = np.mean(trace.loss_fit[-100:])
        assert last < first

    def test_trace_csv(self, tmp_path):
        task = constant_task()
        model = build_model(
            ModelConfig(arch=Arch.SIREN, in_dim=3, out_channels=1,
                        hidden_layers=2, hidden_width=8, seed=0)
        )
        trace = fit_task(model, task, TrainConfig(iterations=3, seed=0))
        path = tmp_path / "trace.csv"
        trace.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "iteration,loss_fit,loss_distil,loss_total"
        assert len(lines) == 4


class TestEpochSampler:
    def test_batches_partition_epoch(self):
        sampler = training._EpochSampler(10, 5, np.random.default_rng(0))
        seen = np.concatenate([sampler.next(), sampler.next()])
        assert sorted(seen) == list(range(10))

    def test_full_grid_when_batch_larger(self):
        sampler = training._EpochSampler(8, 100, np.random.default_rng(0))
        assert sorted(sampler.next()) == list(range(8))

    def test_reshuffles_between_epochs(self):
        sampler = training._EpochSampler(64, 64, np.random.default_rng(0))
        assert not np.array_equal(sampler.next(), sampler.next())
