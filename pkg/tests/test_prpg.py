import numpy as np
import pytest

from gridsense import mdp, prpg
from gridsense.channel import ControlMatrix, ReflectionTable, build_projection_matrix
from gridsense.nets import PolicyParams, SensingParams, policy_grad_logprob
from gridsense.numerics import Rng
from gridsense.scene import SceneDistribution, enumerate_scene_set

from conftest import make_geometry


def tiny_task(noise_power=1e-13, m_grids=4):
    geom = make_geometry(m_grids=m_grids, noise_power=noise_power)
    table = ReflectionTable.uniform_phases(2)
    a = build_projection_matrix(geom, table)
    dist = SceneDistribution.uniform(m_grids)
    return prpg.SensingTask(geom=geom, a_proj=a, dist=dist)


def tiny_cfg(**kw):
    base = dict(k_frames=4, n_elements=4, n_states=2, m_grids=4, epochs=5,
                n_mc=4, lr0=1e-3, seed=1, eval_every=1,
                group_hidden=(16, 8), head_hidden=(16,), sensing_hidden=(32,))
    base.update(kw)
    return prpg.TrainConfig(**base)


class TestLrSchedule:
    def test_initial(self):
        assert prpg.lr_schedule(1e-3, 0) == 1e-3

    def test_half_at_thousand(self):
        assert abs(prpg.lr_schedule(1e-3, 1000) - 5e-4) < 1e-18

    def test_monotone(self):
        vals = [prpg.lr_schedule(0.1, n) for n in range(0, 5000, 100)]
        assert all(a > b for a, b in zip(vals, vals[1:]))


class TestBsgStep:
    def test_zero_gradient(self):
        x = np.array([1.0, -2.0])
        assert np.array_equal(prpg.bsg_step(x, np.zeros(2), 0.5), x)

    def test_matches_proximal_grid_search(self):
        # 1-D: minimise g (x' - x) + (x' - x)^2 / (2 lr) on a fine grid
        x, g, lr = 1.0, 2.0, 0.1
        grid = np.linspace(0.0, 1.5, 150_001)
        objective = g * (grid - x) + (grid - x) ** 2 / (2 * lr)
        best = grid[np.argmin(objective)]
        stepped = prpg.bsg_step(np.array([x]), np.array([g]), lr)[0]
        assert abs(stepped - 0.8) < 1e-12
        assert abs(stepped - best) <= (grid[1] - grid[0])

    def test_bad_rate(self):
        with pytest.raises(ValueError):
            prpg.bsg_step(np.ones(1), np.ones(1), 0.0)


class TestSelectAction:
    def test_uniform_policy_frequencies(self):
        task = tiny_task()
        theta = PolicyParams.create(4, 4, 4, 2, Rng(1), group_hidden=(8, 4))
        theta.head.weights[-1][:] = 0
        theta.head.biases[-1][:] = 0
        theta.head._version += 1
        state = mdp.initial_state(4, 4, 2)
        rng = Rng(2)
        draws = np.array([prpg.select_action(theta, state, task.a_proj, rng)
                          for _ in range(100_000)])
        for action in (1, 2):
            assert abs(np.mean(draws == action) - 0.5) < 0.01

    def test_degenerate_policy(self):
        task = tiny_task()
        theta = PolicyParams.create(4, 4, 4, 2, Rng(3), group_hidden=(8, 4))
        theta.head.weights[-1][:] = 0
        theta.head.biases[-1][:] = np.array([50.0, -50.0])
        theta.head._version += 1
        state = mdp.initial_state(4, 4, 2)
        rng = Rng(4)
        assert all(prpg.select_action(theta, state, task.a_proj, rng) == 1
                   for _ in range(100))

    def test_seeded_reproducible(self):
        task = tiny_task()
        theta = PolicyParams.create(4, 4, 4, 2, Rng(5), group_hidden=(8, 4))
        state = mdp.initial_state(4, 4, 2)
        seq1 = [prpg.select_action(theta, state, task.a_proj, Rng(6)) for _ in range(10)]
        seq2 = [prpg.select_action(theta, state, task.a_proj, Rng(6)) for _ in range(10)]
        assert seq1 == seq2

    def test_terminal_rejected(self):
        task = tiny_task()
        theta = PolicyParams.create(4, 4, 4, 2, Rng(7), group_hidden=(8, 4))
        terminal = mdp.MdpState(5, 1, ControlMatrix.default(4, 4, 2))
        with pytest.raises(ValueError):
            prpg.select_action(theta, terminal, task.a_proj, Rng(8))


class TestRollout:
    @pytest.mark.parametrize("k,n", [(2, 1), (3, 2), (4, 4)])
    def test_buffer_length(self, k, n):
        task = tiny_task()
        cfg = tiny_cfg(k_frames=k, n_elements=n)
        a = task.a_proj[:n * 2]  # first n elements' state blocks
        theta = PolicyParams.create(4, k, n, 2, Rng(9), group_hidden=(8, 4))
        buffer, terminal = prpg.rollout_episode(theta, cfg, a, Rng(10))
        assert len(buffer) == k * n
        assert mdp.is_terminal(terminal)

    def test_terminal_control_fully_chosen(self):
        task = tiny_task()
        cfg = tiny_cfg()
        theta = PolicyParams.create(4, 4, 4, 2, Rng(11), group_hidden=(8, 4))
        _, terminal = prpg.rollout_episode(theta, cfg, task.a_proj, Rng(12))
        assert np.all((terminal.control.states >= 1) & (terminal.control.states <= 2))
        # one-hot structure of every block
        binary = terminal.control.binary()
        blocks = binary.reshape(4, 4, 2)
        assert np.all(blocks.sum(axis=2) == 1)

    def test_visit_order(self):
        task = tiny_task()
        cfg = tiny_cfg(k_frames=2, n_elements=4)
        theta = PolicyParams.create(4, 2, 4, 2, Rng(13), group_hidden=(8, 4))
        buffer, _ = prpg.rollout_episode(theta, cfg, task.a_proj, Rng(14))
        visits = [(e.state.k, e.state.n) for e in buffer]
        assert visits == [(1, 1), (1, 2), (1, 3), (1, 4), (2, 1), (2, 2), (2, 3), (2, 4)]


class TestMonteCarloReward:
    def test_seeded_deterministic(self):
        task = tiny_task()
        w = SensingParams.create(4, Rng(15), hidden=(16,))
        scenes = enumerate_scene_set(4, task.dist, "exhaustive", Rng(16))
        control = ControlMatrix.random(4, 4, 2, Rng(17))
        r1 = prpg.monte_carlo_reward(control, w, scenes, 8, task, Rng(18))
        r2 = prpg.monte_carlo_reward(control, w, scenes, 8, task, Rng(18))
        assert r1 == r2 and r1 <= 0

    def test_sample_size_convergence(self):
        task = tiny_task()
        w = SensingParams.create(4, Rng(19), hidden=(16,))
        scenes = enumerate_scene_set(4, task.dist, "exhaustive", Rng(20))
        control = ControlMatrix.random(4, 4, 2, Rng(21))
        r_small = prpg.monte_carlo_reward(control, w, scenes, 10_000, task, Rng(22))
        r_big = prpg.monte_carlo_reward(control, w, scenes, 100_000, task, Rng(23))
        # estimate the per-draw spread to get a standard error for n=10^4
        per_scene = [prpg.monte_carlo_reward(control, w, scenes, 1, task, r)
                     for r in Rng(24).split(64)]
        se = np.std(per_scene) / np.sqrt(10_000 / 1.0)
        assert abs(r_small - r_big) < max(3 * se * np.sqrt(64), 5e-3)


class TestUpdatePolicy:
    def setup_run(self, seed=25):
        task = tiny_task()
        cfg = tiny_cfg()
        theta = PolicyParams.create(4, 4, 4, 2, Rng(seed), group_hidden=(8, 4))
        buffer, terminal = prpg.rollout_episode(theta, cfg, task.a_proj, Rng(seed + 1))
        return task, theta, buffer

    def test_centered_returns_leave_params(self):
        task, theta, buffer = self.setup_run()
        before = theta.get_flat().copy()
        returns = np.full(len(buffer), -2.0)
        prpg.update_policy(theta, buffer, returns, baseline=-2.0, lr=0.1,
                           a_proj=task.a_proj)
        assert np.array_equal(theta.get_flat(), before)

    def test_zero_lr(self):
        task, theta, buffer = self.setup_run(seed=27)
        before = theta.get_flat().copy()
        prpg.update_policy(theta, buffer, np.full(len(buffer), -1.0), 0.0, 0.0,
                           task.a_proj)
        assert np.array_equal(theta.get_flat(), before)

    def test_single_experience_matches_direct_formula(self):
        task, theta, _ = self.setup_run(seed=29)
        state = mdp.initial_state(4, 4, 2)
        buffer = mdp.ReplayBuffer()
        buffer.append(mdp.Experience(state, 2))
        g_direct = policy_grad_logprob(theta, state, 2, task.a_proj)
        ret = -1.7
        expected = theta.get_flat() + 0.05 * np.clip(
            1.0, 0.0, None) * (ret * g_direct if np.linalg.norm(ret * g_direct) <= 10
                               else ret * g_direct * 10 / np.linalg.norm(ret * g_direct))
        prpg.update_policy(theta, buffer, np.array([ret]), 0.0, 0.05, task.a_proj)
        assert np.allclose(theta.get_flat(), expected, atol=1e-12)


class TestUpdateSensing:
    def test_zero_lr(self):
        task = tiny_task()
        w = SensingParams.create(4, Rng(31), hidden=(16,))
        scenes = enumerate_scene_set(4, task.dist, "exhaustive", Rng(32))
        control = ControlMatrix.random(4, 4, 2, Rng(33))
        before = w.get_flat().copy()
        prpg.update_sensing(w, control, scenes, 4, task, 0.0, Rng(34))
        assert np.array_equal(w.get_flat(), before)

    @pytest.mark.parametrize("seed", range(20))
    def test_descent_on_fixed_batch(self, seed):
        # a small step on a fixed batch must reduce that batch's CE
        task = tiny_task()
        rng = Rng(1000 + seed)
        w = SensingParams.create(4, rng, hidden=(16,))
        scenes = enumerate_scene_set(4, task.dist, "exhaustive", rng)
        control = ControlMatrix.random(4, 4, 2, rng)
        from gridsense.channel import measurement_matrix
        from gridsense.nets import sensing_loss_grad
        from gridsense.numerics import pinv, sample_complex_gaussian
        gamma = measurement_matrix(task.geom, task.a_proj, control)
        gp = pinv(gamma)
        nu = np.stack([s.nu for s in scenes])
        p = np.stack([s.q for s in scenes]).astype(float)
        y = nu @ gamma.T + sample_complex_gaussian(
            2 * task.geom.noise_power, rng, size=(len(scenes), 4))
        loss0, grad = sensing_loss_grad(w, y, p, gp)
        w.set_flat(w.get_flat() - 1e-3 * grad)
        loss1, _ = sensing_loss_grad(w, y, p, gp)
        assert loss1 < loss0

    def test_repeated_steps_mostly_decrease(self):
        task = tiny_task()
        rng = Rng(50)
        w = SensingParams.create(4, rng, hidden=(16,))
        scenes = enumerate_scene_set(4, task.dist, "exhaustive", rng)
        control = ControlMatrix.random(4, 4, 2, rng)
        from gridsense.channel import measurement_matrix
        from gridsense.nets import sensing_loss_grad
        from gridsense.numerics import pinv, sample_complex_gaussian
        gamma = measurement_matrix(task.geom, task.a_proj, control)
        gp = pinv(gamma)
        nu = np.stack([s.nu for s in scenes])
        p = np.stack([s.q for s in scenes]).astype(float)
        y = nu @ gamma.T + sample_complex_gaussian(
            2 * task.geom.noise_power, rng, size=(len(scenes), 4))
        losses = []
        for _ in range(50):
            loss, grad = sensing_loss_grad(w, y, p, gp)
            losses.append(loss)
            w.set_flat(w.get_flat() - 1e-4 * grad)
        increases = sum(b > a for a, b in zip(losses, losses[1:]))
        assert increases <= 2  # 5% of 49 steps, allowing curvature wiggle


class TestTrain:
    def test_zero_epochs(self):
        task = tiny_task()
        theta, w, trace = prpg.train(task, tiny_cfg(epochs=0))
        assert trace.rows == []
        assert theta.param_count() > 0 and w.param_count() > 0

    def test_trace_structure_and_determinism(self):
        task = tiny_task()
        cfg = tiny_cfg(epochs=6, eval_every=2, seed=99)
        theta1, w1, trace1 = prpg.train(task, cfg)
        theta2, w2, trace2 = prpg.train(task, cfg)
        assert np.array_equal(theta1.get_flat(), theta2.get_flat())
        assert np.array_equal(w1.get_flat(), w2.get_flat())
        assert [r.epoch for r in trace1.rows] == [0, 2, 4, 6]
        for a, b in zip(trace1.rows, trace2.rows):
            assert a.ce_eval == b.ce_eval
            assert np.array_equal(a.reward_mean, b.reward_mean, equal_nan=True)

    def test_alternating_updates_change_both_blocks(self):
        task = tiny_task()
        cfg = tiny_cfg(epochs=3, seed=7)
        theta, w, _ = prpg.train(task, cfg)
        theta0 = PolicyParams.create(4, 4, 4, 2, Rng(7).split(5)[0],
                                     group_hidden=cfg.group_hidden,
                                     head_hidden=cfg.head_hidden,
                                     feature_scale=theta.feature_scale)
        assert not np.array_equal(theta.get_flat(), theta0.get_flat())

    def test_fixed_gamma_variant(self):
        task = tiny_task()
        cfg = tiny_cfg(epochs=4, eval_every=2)
        control = ControlMatrix.random(4, 4, 2, Rng(41))
        from gridsense.channel import measurement_matrix
        gamma = measurement_matrix(task.geom, task.a_proj, control)
        w, trace = prpg.train_sensing_only(gamma, task, cfg)
        assert [r.epoch for r in trace.rows] == [0, 2, 4]
        assert all(np.isfinite(r.ce_eval) for r in trace.rows)
