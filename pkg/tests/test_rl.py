import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mprlab import nn, rl
from mprlab.rl import (
    ConditionedMLP,
    DqnLearner,
    EpisodeBuffer,
    GaussianPolicyHead,
    PpoLearner,
    RolloutBatch,
    build_keep_policy_net,
    build_keep_value_net,
    build_push_qnet,
    compute_gae,
    epsilon_at,
    gaussian_log_prob,
    huber,
    squash,
    squashed_log_prob,
)


def make_buffer(rng, episodes=6, t=8, obs_dim=6, num_actions=5):
    buf = EpisodeBuffer(10_000)
    for e in range(episodes):
        buf.add(
            rl.Episode(
                observations=rng.standard_normal((t + 1, obs_dim)),
                representations=rng.standard_normal((t + 1, 32)),
                actions=rng.integers(0, num_actions, t),
                opp_actions=rng.integers(0, num_actions, t),
                rewards=rng.standard_normal(t),
                policy_label=e % 3,
                episode_id=e,
            )
        )
    return buf


class TestConditionedMLP:
    def test_injection_after_first_layer(self):
        net = ConditionedMLP(4, [8, 8], 3, "relu", seed=0, rep_dim=5)
        assert net.layers[0].in_dim == 4
        assert net.layers[1].in_dim == 8 + 5
        assert net.layers[2].in_dim == 8

    def test_push_qnet_shape(self):
        q = build_push_qnet(6, 5, seed=0)
        assert [l.out_dim for l in q.layers] == [128, 128, 128, 128, 5]
        assert q.layers[1].in_dim == 128 + 32
        assert all(l.activation == "relu" for l in q.layers[:-1])

    def test_keep_net_shapes(self):
        p = build_keep_policy_net(4, 2, seed=0)
        assert [l.out_dim for l in p.layers] == [32, 64, 32, 4]
        assert all(l.activation == "tanh" for l in p.layers[:-1])
        v = build_keep_value_net(4, seed=0)
        assert v.layers[-1].out_dim == 1

    def test_zero_representation_reduces_to_unconditioned(self):
        # the baseline code path is literally the conditioned net with rep=0
        net = ConditionedMLP(4, [8, 8], 3, "tanh", seed=1, rep_dim=5)
        obs = np.random.default_rng(0).standard_normal((7, 4))
        zero = np.zeros((7, 5))
        out1, _ = net.forward(obs, zero)
        out2, _ = net.forward(obs, zero)
        assert np.array_equal(out1, out2)
        out3, _ = net.forward(obs, np.ones((7, 5)))
        assert not np.allclose(out1, out3)

    def test_gradients_match_finite_differences(self):
        net = ConditionedMLP(3, [6, 5], 2, "tanh", seed=2, rep_dim=4)
        rng = np.random.default_rng(1)
        obs = rng.standard_normal((4, 3))
        rep = rng.standard_normal((4, 4))

        def loss():
            out, _ = net.forward(obs, rep)
            return float(np.sum(out ** 2))

        out, caches = net.forward(obs, rep)
        analytic, _, d_rep = net.backward(caches, 2.0 * out)
        numeric = nn.finite_difference_grads(net.params, loss)
        assert nn.max_relative_error(analytic, numeric) < 1e-4
        # representation gradient checked by finite differences too
        h = 1e-6
        for i in range(4):
            rp, rm = rep.copy(), rep.copy()
            rp[0, i] += h
            rm[0, i] -= h
            fd = (np.sum(net.forward(obs, rp)[0] ** 2) - np.sum(net.forward(obs, rm)[0] ** 2)) / (2 * h)
            assert d_rep[0, i] == pytest.approx(fd, rel=1e-4, abs=1e-7)


class TestEpisodeBuffer:
    def test_fifo_capacity(self):
        buf = EpisodeBuffer(20)
        rng = np.random.default_rng(0)
        for e in range(5):
            t = 8
            buf.add(rl.Episode(rng.standard_normal((t + 1, 2)), rng.standard_normal((t + 1, 32)),
                               rng.integers(0, 2, t), rng.integers(0, 2, t),
                               rng.standard_normal(t), 0, e))
        assert len(buf) <= 24  # drops oldest once above capacity
        assert buf.episodes[0].episode_id >= 2

    def test_sample_fields_consistent(self):
        rng = np.random.default_rng(1)
        buf = make_buffer(rng)
        batch = buf.sample_transitions(32, rng)
        for i in range(32):
            ep, t = batch.episodes[i], batch.steps[i]
            assert np.array_equal(batch.obs[i], ep.observations[t])
            assert np.array_equal(batch.next_obs[i], ep.observations[t + 1])
            assert batch.rewards[i] == ep.rewards[t]
            assert batch.dones[i] == (t == len(ep) - 1)

    def test_sampling_reproducible(self):
        buf = make_buffer(np.random.default_rng(2))
        a = buf.sample_transitions(16, np.random.default_rng(5))
        b = buf.sample_transitions(16, np.random.default_rng(5))
        assert np.array_equal(a.steps, b.steps)
        assert np.array_equal(a.rewards, b.rewards)

    def test_sampling_uniform_over_transitions(self):
        buf = make_buffer(np.random.default_rng(3), episodes=4, t=10)
        rng = np.random.default_rng(7)
        counts = np.zeros(40)
        n = 40_000
        batch = buf.sample_transitions(n, rng)
        eps = list(buf.episodes)
        for ep, t in zip(batch.episodes, batch.steps):
            counts[eps.index(ep) * 10 + t] += 1
        chi2 = float(np.sum((counts - n / 40) ** 2 / (n / 40)))
        assert chi2 < 39 + 4 * math.sqrt(2 * 39)


class TestDqn:
    def test_pure_exploration_uniform(self):
        q = build_push_qnet(4, 5, seed=0)
        learner = DqnLearner(q)
        rng = np.random.default_rng(0)
        counts = np.zeros(5)
        n = 100_000
        obs, rep = np.zeros(4), np.zeros(32)
        for _ in range(n):
            counts[learner.act(obs, rep, 1.0, rng)] += 1
        expected = n / 5
        chi2 = float(np.sum((counts - expected) ** 2 / expected))
        assert chi2 < 4 + 3 * math.sqrt(8)

    def test_greedy_argmax(self):
        q = build_push_qnet(4, 5, seed=1)
        learner = DqnLearner(q)
        # force known Q values by zeroing the net and setting the head bias
        for k in q.params:
            q.params[k][:] = 0.0
        q.params["4.b"][:] = np.array([3.0, 1.0, 0.0, 0.0, 0.0])
        a = learner.act(np.zeros(4), np.zeros(32), 0.0, np.random.default_rng(0))
        assert a == 0
        # adding a constant to all outputs leaves the argmax unchanged
        q.params["4.b"][:] += 7.5
        assert learner.act(np.zeros(4), np.zeros(32), 0.0, np.random.default_rng(0)) == 0

    def test_epsilon_validation(self):
        learner = DqnLearner(build_push_qnet(4, 5, seed=0))
        with pytest.raises(ValueError):
            learner.act(np.zeros(4), np.zeros(32), 1.5, np.random.default_rng(0))

    def test_done_target_is_reward(self):
        rng = np.random.default_rng(4)
        buf = make_buffer(rng, episodes=2, t=3)
        learner = DqnLearner(build_push_qnet(6, 5, seed=2))
        batch = buf.sample_transitions(64, rng)
        targets = learner.td_targets(batch)
        for i in range(64):
            if batch.dones[i]:
                assert targets[i] == batch.rewards[i]

    def test_gamma_zero_target_is_reward(self):
        rng = np.random.default_rng(5)
        buf = make_buffer(rng)
        learner = DqnLearner(build_push_qnet(6, 5, seed=3), gamma=0.0)
        batch = buf.sample_transitions(32, rng)
        assert np.allclose(learner.td_targets(batch), batch.rewards)

    def test_single_transition_huber_value(self):
        learner = DqnLearner(build_push_qnet(6, 5, seed=4), gamma=0.5)
        q = learner.q_net
        for k in q.params:
            q.params[k][:] = 0.0
        q.params["4.b"][:] = np.array([1.0, 0.0, 0.0, 0.0, 0.0])
        learner.sync_target()
        ep = rl.Episode(np.zeros((2, 6)), np.zeros((2, 32)), np.array([0]), np.array([0]),
                        np.array([0.25]), 0, 0)
        batch = rl.TransitionBatch(
            obs=np.zeros((1, 6)), reps=np.zeros((1, 32)), actions=np.array([0]),
            rewards=np.array([0.25]), next_obs=np.zeros((1, 6)), next_reps=np.zeros((1, 32)),
            dones=np.array([False]), episodes=[ep], steps=np.array([0]),
        )
        # Q(s,a)=1, target = 0.25 + 0.5 * 1 = 0.75, err = 0.25 => huber 0.03125
        loss = learner.update(batch)
        assert loss == pytest.approx(0.5 * 0.25 ** 2, rel=1e-6)

    def test_target_sync_period(self):
        rng = np.random.default_rng(6)
        buf = make_buffer(rng)
        learner = DqnLearner(build_push_qnet(6, 5, seed=5), target_sync=3)
        before = {k: v.copy() for k, v in learner.target_net.params.items()}
        learner.update(buf.sample_transitions(8, rng))
        learner.update(buf.sample_transitions(8, rng))
        assert all(np.array_equal(before[k], learner.target_net.params[k]) for k in before)
        learner.update(buf.sample_transitions(8, rng))  # third update syncs
        assert any(not np.array_equal(before[k], learner.target_net.params[k]) for k in before)

    def test_epsilon_schedule(self):
        assert epsilon_at(0, 1000) == 1.0
        assert epsilon_at(200, 1000) == pytest.approx(0.05)  # end of the 20% ramp
        assert epsilon_at(999, 1000) == pytest.approx(0.05)
        assert epsilon_at(100, 1000) == pytest.approx(0.525)


class TestGae:
    def test_hand_recursion_three_steps(self):
        rewards = [1.0, 0.0, 2.0]
        values = [0.5, 1.5, -0.5]
        dones = [False, False, True]
        gamma, lam = 0.9, 0.8
        d2 = 2.0 - (-0.5)
        d1 = 0.0 + gamma * (-0.5) - 1.5
        d0 = 1.0 + gamma * 1.5 - 0.5
        a2 = d2
        a1 = d1 + gamma * lam * a2
        a0 = d0 + gamma * lam * a1
        adv, ret = compute_gae(rewards, values, dones, gamma, lam)
        assert np.allclose(adv, [a0, a1, a2], atol=1e-12)
        assert np.allclose(ret, np.array([a0, a1, a2]) + values, atol=1e-12)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_lambda_one_is_discounted_monte_carlo(self, seed):
        rng = np.random.default_rng(seed)
        t = int(rng.integers(2, 10))
        rewards = rng.standard_normal(t)
        values = rng.standard_normal(t)
        dones = np.zeros(t, dtype=bool)
        dones[-1] = True
        gamma = 0.95
        adv, _ = compute_gae(rewards, values, dones, gamma, lam=1.0)
        for k in range(t):
            mc = sum(gamma ** (j - k) * rewards[j] for j in range(k, t))
            assert adv[k] == pytest.approx(mc - values[k], rel=1e-9, abs=1e-9)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_lambda_zero_is_td_residual(self, seed):
        rng = np.random.default_rng(seed)
        t = int(rng.integers(2, 10))
        rewards = rng.standard_normal(t)
        values = rng.standard_normal(t)
        dones = np.zeros(t, dtype=bool)
        dones[-1] = True
        gamma = 0.9
        adv, _ = compute_gae(rewards, values, dones, gamma, lam=0.0)
        for k in range(t):
            nxt = 0.0 if dones[k] else values[k + 1]
            assert adv[k] == pytest.approx(rewards[k] + gamma * nxt - values[k], rel=1e-9, abs=1e-9)


class TestGaussianHead:
    def test_tiny_std_collapses_to_mean(self):
        head = GaussianPolicyHead(2, bound=2.0)
        raw = np.array([0.3, -0.7, -20.0, -20.0])  # log_std clipped to -5
        rng = np.random.default_rng(0)
        action, z, _ = head.sample(raw, rng)
        assert np.allclose(z, [0.3, -0.7], atol=1e-2)
        assert np.allclose(action, 2.0 * np.tanh([0.3, -0.7]), atol=1e-2)

    def test_log_prob_of_mean_closed_form(self):
        head = GaussianPolicyHead(2, bound=2.0)
        mean = np.array([0.4, -0.2])
        log_std = np.array([-1.0, 0.5])
        # density at z = mean, including the squash correction
        gauss = -np.sum(log_std) - math.log(2 * math.pi)
        corr = np.sum(math.log(2.0) + 2.0 * (math.log(2.0) - mean - np.logaddexp(0.0, -2.0 * mean)))
        raw = np.concatenate([mean, log_std])
        assert head.log_prob(raw, mean) == pytest.approx(gauss - corr, rel=1e-12)
        assert gaussian_log_prob(mean, mean, log_std) == pytest.approx(gauss, rel=1e-12)

    def test_samples_within_bounds(self):
        head = GaussianPolicyHead(2, bound=2.0)
        rng = np.random.default_rng(1)
        for _ in range(500):
            raw = rng.standard_normal(4) * 3
            action, _, _ = head.sample(raw, rng)
            assert np.all(np.abs(action) <= 2.0)

    def test_squash_correction_consistency(self):
        # squashed density integrates the correction: compare against a
        # numerical change-of-variables at a held point
        z = np.array([0.3])
        mean = np.array([0.0])
        log_std = np.array([0.0])
        bound = 2.0
        lp = squashed_log_prob(z, mean, log_std, bound)
        eps = 1e-6
        a = squash(z, bound)
        a2 = squash(z + eps, bound)
        dadz = (a2 - a) / eps
        expected = gaussian_log_prob(z, mean, log_std) - np.log(np.abs(dadz))
        assert lp == pytest.approx(float(expected), abs=1e-4)


def tiny_rollout(rng, learner, n_eps=3, t=5, obs_dim=4):
    episodes = []
    for _ in range(n_eps):
        obs = rng.standard_normal((t, obs_dim))
        reps = rng.standard_normal((t, 32))
        zs, lps, values = [], [], []
        for k in range(t):
            _, z, logp, v = learner.act(obs[k], reps[k], rng)
            zs.append(z)
            lps.append(logp)
            values.append(v)
        episodes.append({
            "obs": obs, "reps": reps, "z": np.stack(zs),
            "logp": np.array(lps), "rewards": rng.standard_normal(t),
            "values": np.array(values),
        })
    return RolloutBatch.from_episodes(episodes)


class TestPpo:
    def _learner(self, seed=0):
        policy = build_keep_policy_net(4, 2, seed=seed)
        value = build_keep_value_net(4, seed=seed + 1)
        return PpoLearner(policy, value, act_bound=2.0)

    def test_ratio_one_at_epoch_start(self):
        learner = self._learner()
        rng = np.random.default_rng(0)
        rollout = tiny_rollout(rng, learner)
        raw, _ = learner.policy.forward(rollout.obs, rollout.reps)
        mean, log_std = learner.head.split(raw)
        logp = squashed_log_prob(rollout.z, mean, log_std, 2.0)
        assert np.allclose(np.exp(logp - rollout.log_probs), 1.0, atol=1e-12)

    def test_zero_advantage_zero_policy_gradient(self):
        learner = self._learner(seed=3)
        rng = np.random.default_rng(1)
        rollout = tiny_rollout(rng, learner)
        rollout.advantages[:] = 0.0
        learner.normalize_advantages = False
        before = {k: v.copy() for k, v in learner.policy.params.items()}
        learner.entropy_coef = 0.0
        learner.update(rollout, updates=1, minibatch=len(rollout), rng=np.random.default_rng(2))
        for k in before:
            assert np.allclose(learner.policy.params[k], before[k], atol=1e-12)

    def test_update_moves_value_toward_returns(self):
        learner = self._learner(seed=5)
        rng = np.random.default_rng(3)
        rollout = tiny_rollout(rng, learner, n_eps=6, t=10)
        v0, _ = learner.value.forward(rollout.obs, rollout.reps)
        err0 = float(np.mean((v0[:, 0] - rollout.returns) ** 2))
        for _ in range(30):
            learner.update(rollout, updates=4, minibatch=32, rng=rng)
        v1, _ = learner.value.forward(rollout.obs, rollout.reps)
        err1 = float(np.mean((v1[:, 0] - rollout.returns) ** 2))
        assert err1 < err0

    def test_clipped_gradient_zero_outside_band(self):
        # one sample far outside the clip band with positive advantage:
        # the surrogate is flat, so no policy gradient flows
        learner = self._learner(seed=7)
        learner.entropy_coef = 0.0
        learner.normalize_advantages = False
        rng = np.random.default_rng(4)
        rollout = tiny_rollout(rng, learner, n_eps=1, t=2)
        rollout.advantages[:] = 1.0
        rollout.log_probs[:] = rollout.log_probs - 10.0  # ratio e^10 >> 1+clip
        before = {k: v.copy() for k, v in learner.policy.params.items()}
        learner.update(rollout, updates=1, minibatch=2, rng=np.random.default_rng(0))
        for k in before:
            assert np.allclose(learner.policy.params[k], before[k], atol=1e-12)

    def test_nonfinite_ratio_halts(self):
        learner = self._learner(seed=9)
        rng = np.random.default_rng(5)
        rollout = tiny_rollout(rng, learner)
        rollout.log_probs[:] = np.nan
        with pytest.raises(FloatingPointError):
            learner.update(rollout, updates=1, minibatch=4, rng=rng)


class TestHuber:
    def test_quadratic_and_linear_regions(self):
        assert huber(np.array([0.5]))[0] == pytest.approx(0.125)
        assert huber(np.array([2.0]))[0] == pytest.approx(1.5)
        assert huber(np.array([-2.0]))[0] == pytest.approx(1.5)
