"""DQN and PPO learners conditioned on opponent-policy representations.

Both learners consume the representation as a plain extra input: it is
concatenated with the output of the first dense layer and forwarded through
the rest of the network. Baselines without an encoder feed a zero vector
through the identical code path.

Experience is stored per episode, keeping the full observation history and
the per-step representations next to the transitions, so encoder batches
and RL batches are drawn from the same buffer.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .encoder import ObservationHistory, REPRESENTATION_DIM

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0


class ConditionedMLP:
    """Dense stack whose second layer input is concat(first layer output,
    representation)."""

    def __init__(self, obs_dim, hidden, out_dim, activation, seed, rep_dim=REPRESENTATION_DIM, dtype=np.float64):
        if len(hidden) < 1:
            raise ValueError("need at least one hidden layer")
        self.obs_dim = obs_dim
        self.rep_dim = rep_dim
        self.dtype = np.dtype(dtype).type
        rng = np.random.default_rng(seed)
        dims = [obs_dim] + list(hidden)
        self.layers = []
        for i in range(len(hidden)):
            in_dim = dims[i] + (rep_dim if i == 1 else 0)
            self.layers.append(nn.Dense(in_dim, dims[i + 1], activation))
        if len(hidden) == 1:
            self.layers.append(nn.Dense(hidden[0] + rep_dim, out_dim, "identity"))
        else:
            self.layers.append(nn.Dense(hidden[-1], out_dim, "identity"))
        self.params = {}
        for idx, layer in enumerate(self.layers):
            for name, arr in layer.init_params(rng, self.dtype).items():
                self.params[f"{idx}.{name}"] = arr

    def _lp(self, idx):
        return {n: self.params[f"{idx}.{n}"] for n in self.layers[idx].param_shapes()}

    def forward(self, obs, rep):
        obs = np.atleast_2d(np.asarray(obs, dtype=self.dtype))
        rep = np.atleast_2d(np.asarray(rep, dtype=self.dtype))
        caches = []
        x, _, c = self.layers[0].forward(self._lp(0), obs)
        caches.append(c)
        x = np.concatenate([x, rep], axis=1)
        for idx in range(1, len(self.layers)):
            x, _, c = self.layers[idx].forward(self._lp(idx), x)
            caches.append(c)
        return x, caches

    def backward(self, caches, dout, grads=None):
        """Returns (grads, d_obs, d_rep)."""
        if grads is None:
            grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        dx = np.asarray(dout, dtype=self.dtype)
        for idx in range(len(self.layers) - 1, 0, -1):
            g, dx, _ = self.layers[idx].backward(self._lp(idx), caches[idx], dx)
            for name, arr in g.items():
                grads[f"{idx}.{name}"] += arr
        first_width = self.layers[0].out_dim
        d_first, d_rep = dx[:, :first_width], dx[:, first_width:]
        g, d_obs, _ = self.layers[0].backward(self._lp(0), caches[0], d_first)
        for name, arr in g.items():
            grads[f"0.{name}"] += arr
        return grads, d_obs, d_rep

    def copy(self):
        clone = object.__new__(ConditionedMLP)
        clone.obs_dim = self.obs_dim
        clone.rep_dim = self.rep_dim
        clone.dtype = self.dtype
        clone.layers = self.layers
        clone.params = {k: v.copy() for k, v in self.params.items()}
        return clone


def build_push_qnet(obs_dim, num_actions, seed, hidden=128, depth=4, dtype=np.float64):
    return ConditionedMLP(obs_dim, [hidden] * depth, num_actions, "relu", seed, dtype=dtype)


def build_keep_policy_net(obs_dim, act_dim, seed, dtype=np.float64):
    return ConditionedMLP(obs_dim, [32, 64, 32], 2 * act_dim, "tanh", seed, dtype=dtype)


def build_keep_value_net(obs_dim, seed, dtype=np.float64):
    return ConditionedMLP(obs_dim, [32, 64, 32], 1, "tanh", seed, dtype=dtype)


# ---------------------------------------------------------------------------
# Experience storage


@dataclass(eq=False)
class Episode:
    observations: np.ndarray  # (T+1, obs_dim); last row is the final observation
    representations: np.ndarray  # (T+1, rep_dim) as used when acting
    actions: np.ndarray  # (T,) ints or (T, act_dim)
    opp_actions: np.ndarray  # (T,) ints or (T, act_dim)
    rewards: np.ndarray  # (T,)
    policy_label: int
    episode_id: int

    def __len__(self):
        return len(self.rewards)

    def history(self) -> ObservationHistory:
        return ObservationHistory(self.observations[:-1], self.episode_id, self.policy_label)


@dataclass(eq=False)
class TransitionBatch:
    obs: np.ndarray
    reps: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    next_reps: np.ndarray
    dones: np.ndarray
    episodes: list  # source Episode per row
    steps: np.ndarray  # source timestep per row


class EpisodeBuffer:
    """FIFO replay keyed by episodes; capacity counts transitions."""

    def __init__(self, capacity_transitions: int):
        self.capacity = int(capacity_transitions)
        self.episodes: deque[Episode] = deque()
        self.num_transitions = 0

    def add(self, episode: Episode) -> None:
        self.episodes.append(episode)
        self.num_transitions += len(episode)
        while self.num_transitions > self.capacity and len(self.episodes) > 1:
            dropped = self.episodes.popleft()
            self.num_transitions -= len(dropped)

    def __len__(self) -> int:
        return self.num_transitions

    def histories(self) -> list[ObservationHistory]:
        return [ep.history() for ep in self.episodes]

    def episodes_by_label(self) -> dict[int, list[Episode]]:
        out: dict[int, list[Episode]] = {}
        for ep in self.episodes:
            out.setdefault(ep.policy_label, []).append(ep)
        return out

    def sample_transitions(self, batch_size: int, rng: np.random.Generator) -> TransitionBatch:
        if self.num_transitions == 0:
            raise ValueError("cannot sample from an empty buffer")
        eps = list(self.episodes)
        lengths = np.array([len(e) for e in eps])
        cum = np.cumsum(lengths)
        flat = rng.integers(self.num_transitions, size=batch_size)
        ep_idx = np.searchsorted(cum, flat, side="right")
        t_idx = flat - (cum[ep_idx] - lengths[ep_idx])
        rows = [eps[i] for i in ep_idx]
        obs = np.stack([e.observations[t] for e, t in zip(rows, t_idx)])
        next_obs = np.stack([e.observations[t + 1] for e, t in zip(rows, t_idx)])
        reps = np.stack([e.representations[t] for e, t in zip(rows, t_idx)])
        next_reps = np.stack([e.representations[t + 1] for e, t in zip(rows, t_idx)])
        actions = np.stack([e.actions[t] for e, t in zip(rows, t_idx)])
        rewards = np.array([e.rewards[t] for e, t in zip(rows, t_idx)])
        dones = np.array([t == len(e) - 1 for e, t in zip(rows, t_idx)])
        return TransitionBatch(obs, reps, actions, rewards, next_obs, next_reps, dones, rows, t_idx)


# ---------------------------------------------------------------------------
# DQN


def huber(x: np.ndarray, delta: float = 1.0) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax <= delta, 0.5 * x * x, delta * (ax - 0.5 * delta))


def dhuber(x: np.ndarray, delta: float = 1.0) -> np.ndarray:
    return np.clip(x, -delta, delta)


def epsilon_at(step: int, total_steps: int, start=1.0, end=0.05, decay_frac=0.2) -> float:
    """Linear decay over the first ``decay_frac`` of training, then flat."""
    horizon = max(1, int(total_steps * decay_frac))
    frac = min(1.0, step / horizon)
    return float(start + (end - start) * frac)


class DqnLearner:
    """Q-learning with a target network; one Adam on the Q parameters."""

    def __init__(self, q_net: ConditionedMLP, lr=1e-3, gamma=0.99, target_sync=500, huber_delta=1.0):
        self.q_net = q_net
        self.target_net = q_net.copy()
        self.opt = nn.AdamState(q_net.params, lr=lr)
        self.gamma = float(gamma)
        self.target_sync = int(target_sync)
        self.huber_delta = float(huber_delta)
        self.updates = 0

    def act(self, obs, rep, epsilon: float, rng: np.random.Generator) -> int:
        if not 0.0 <= epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        num_actions = self.q_net.layers[-1].out_dim
        if epsilon > 0 and rng.random() < epsilon:
            return int(rng.integers(num_actions))
        q, _ = self.q_net.forward(obs, rep)
        return int(np.argmax(q[0]))

    def td_targets(self, batch: TransitionBatch) -> np.ndarray:
        q_next, _ = self.target_net.forward(batch.next_obs, batch.next_reps)
        bootstrap = np.max(q_next, axis=1) * (~batch.dones)
        return batch.rewards + self.gamma * bootstrap

    def update(self, batch: TransitionBatch) -> float:
        targets = self.td_targets(batch)
        q, caches = self.q_net.forward(batch.obs, batch.reps)
        idx = np.arange(len(batch.actions))
        taken = q[idx, batch.actions.astype(np.int64)]
        err = taken - targets
        loss = float(np.mean(huber(err, self.huber_delta)))
        dq = np.zeros_like(q)
        dq[idx, batch.actions.astype(np.int64)] = dhuber(err, self.huber_delta) / len(idx)
        grads, _, _ = self.q_net.backward(caches, dq)
        nn.adam_step(self.opt, self.q_net.params, grads)
        self.updates += 1
        if self.updates % self.target_sync == 0:
            self.sync_target()
        return loss

    def update_with_encoder(self, batch: TransitionBatch, enc_net, trainer, discrete_opponent=True) -> float:
        """Variant whose TD loss is backpropagated through recomputed
        representations into the encoder, combined with the per-step
        opponent-action prediction loss (the prediction-baseline training
        scheme)."""
        from . import encoder as enc_mod

        histories = [e.observations[:-1] for e in batch.episodes]
        lengths = {h.shape[0] for h in histories}
        if len(lengths) != 1:
            raise ValueError("encoder-coupled updates require equal-length episodes")
        reps_all, seq_cache = enc_mod.per_step_representations(enc_net, histories)
        tlen, bsz, _ = reps_all.shape
        rows = np.arange(bsz)
        reps_t = reps_all[batch.steps, rows]

        targets = self.td_targets(batch)
        q, caches = self.q_net.forward(batch.obs, reps_t)
        taken = q[rows, batch.actions.astype(np.int64)]
        err = taken - targets
        loss = float(np.mean(huber(err, self.huber_delta)))
        dq = np.zeros_like(q)
        dq[rows, batch.actions.astype(np.int64)] = dhuber(err, self.huber_delta) / bsz
        grads, _, d_rep = self.q_net.backward(caches, dq)
        nn.adam_step(self.opt, self.q_net.params, grads)

        douts = np.zeros((tlen, bsz, reps_all.shape[2]), dtype=enc_net.dtype)
        douts[batch.steps, rows] = d_rep

        opp = np.stack([e.opp_actions for e in batch.episodes], axis=1)
        pred_loss, head_grads, d_rep_steps = _prediction_grads_from_reps(
            trainer.head, reps_all, opp, discrete_opponent
        )
        douts += d_rep_steps
        enc_grads, _ = enc_net.backward_sequence(seq_cache, douts)
        trainer.apply_external_grads(enc_grads, head_grads)
        trainer.last_loss = pred_loss

        self.updates += 1
        if self.updates % self.target_sync == 0:
            self.sync_target()
        return loss

    def sync_target(self) -> None:
        for k, v in self.q_net.params.items():
            self.target_net.params[k] = v.copy()


def _prediction_grads_from_reps(head, reps_all, opp_actions, discrete):
    """Opponent-action prediction loss on precomputed per-step reps.
    Returns (loss, head_grads, d_reps (T, B, rep_dim))."""
    from .encoder import prediction_loss_terms

    t, b, rep_dim = reps_all.shape
    flat = reps_all.reshape(t * b, rep_dim)
    out, _, caches = head.forward(flat)
    loss, dout = prediction_loss_terms(out, opp_actions, discrete)
    head_grads, d_flat, _ = head.backward(caches, dout)
    return loss, head_grads, d_flat.reshape(t, b, rep_dim)


# ---------------------------------------------------------------------------
# Gaussian policy head (continuous actions)


def gaussian_log_prob(z: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """Diagonal Gaussian log density of pre-squash samples ``z``."""
    var = np.exp(2.0 * log_std)
    return -0.5 * np.sum((z - mean) ** 2 / var + 2.0 * log_std + math.log(2 * math.pi), axis=-1)


def squash(z: np.ndarray, bound: float) -> np.ndarray:
    return bound * np.tanh(z)


def squash_correction(z: np.ndarray, bound: float) -> np.ndarray:
    """log|d squash / d z| summed over dims; subtract from the Gaussian log
    density to get the density of the squashed action."""
    # log(bound * (1 - tanh(z)^2)) computed stably.
    return np.sum(math.log(bound) + 2.0 * (math.log(2.0) - z - np.logaddexp(0.0, -2.0 * z)), axis=-1)


def squashed_log_prob(z, mean, log_std, bound) -> np.ndarray:
    return gaussian_log_prob(z, mean, log_std) - squash_correction(z, bound)


def gaussian_entropy(log_std: np.ndarray) -> np.ndarray:
    return np.sum(log_std + 0.5 * (1.0 + math.log(2 * math.pi)), axis=-1)


class GaussianPolicyHead:
    """Interprets a policy network's raw output as (mean, log_std) of a
    diagonal Gaussian whose samples are tanh-squashed to [-bound, bound]."""

    def __init__(self, act_dim: int, bound: float):
        self.act_dim = act_dim
        self.bound = float(bound)

    def split(self, raw: np.ndarray):
        mean = raw[..., : self.act_dim]
        log_std = np.clip(raw[..., self.act_dim :], LOG_STD_MIN, LOG_STD_MAX)
        return mean, log_std

    def sample(self, raw: np.ndarray, rng: np.random.Generator):
        """Returns (action, z, log_prob) for one raw output row."""
        mean, log_std = self.split(raw)
        z = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
        action = squash(z, self.bound)
        logp = squashed_log_prob(z, mean, log_std, self.bound)
        return action, z, float(logp)

    def mean_action(self, raw: np.ndarray) -> np.ndarray:
        mean, _ = self.split(raw)
        return squash(mean, self.bound)

    def log_prob(self, raw: np.ndarray, z: np.ndarray) -> np.ndarray:
        mean, log_std = self.split(raw)
        return squashed_log_prob(z, mean, log_std, self.bound)


# ---------------------------------------------------------------------------
# GAE + PPO


def compute_gae(rewards, values, dones, gamma=0.99, lam=0.95, last_value=0.0):
    """Generalized advantage estimation over one trajectory.

    ``dones[t]`` cuts bootstrapping after step t. Returns (advantages,
    returns) with returns = advantages + values.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    t = len(rewards)
    adv = np.zeros(t)
    next_adv = 0.0
    next_value = float(last_value)
    for k in reversed(range(t)):
        cont = 0.0 if dones[k] else 1.0
        delta = rewards[k] + gamma * next_value * cont - values[k]
        next_adv = delta + gamma * lam * cont * next_adv
        adv[k] = next_adv
        next_value = values[k]
    return adv, adv + values


@dataclass(eq=False)
class RolloutBatch:
    """Flattened on-policy data for one PPO update phase."""

    obs: np.ndarray
    reps: np.ndarray
    z: np.ndarray  # pre-squash action samples
    log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self):
        return len(self.log_probs)

    @classmethod
    def from_episodes(cls, episodes, gamma=0.99, lam=0.95):
        """episodes: list of dicts with obs, reps, z, logp, rewards, values."""
        obs, reps, zs, lps, advs, rets = [], [], [], [], [], []
        for ep in episodes:
            t = len(ep["rewards"])
            dones = np.zeros(t, dtype=bool)
            dones[-1] = True
            adv, ret = compute_gae(ep["rewards"], ep["values"], dones, gamma, lam)
            obs.append(ep["obs"])
            reps.append(ep["reps"])
            zs.append(ep["z"])
            lps.append(ep["logp"])
            advs.append(adv)
            rets.append(ret)
        return cls(
            np.concatenate(obs),
            np.concatenate(reps),
            np.concatenate(zs),
            np.concatenate(lps),
            np.concatenate(advs),
            np.concatenate(rets),
        )


class PpoLearner:
    """Clipped-surrogate PPO with separate policy and value networks."""

    def __init__(
        self,
        policy: ConditionedMLP,
        value: ConditionedMLP,
        act_bound: float,
        lr=3e-4,
        clip=0.2,
        entropy_coef=0.01,
        value_coef=0.5,
        clip_norm=10.0,
        normalize_advantages=True,
    ):
        act_dim = policy.layers[-1].out_dim // 2
        self.policy = policy
        self.value = value
        self.head = GaussianPolicyHead(act_dim, act_bound)
        self.policy_opt = nn.AdamState(policy.params, lr=lr)
        self.value_opt = nn.AdamState(value.params, lr=lr)
        self.clip = float(clip)
        self.entropy_coef = float(entropy_coef)
        self.value_coef = float(value_coef)
        self.clip_norm = float(clip_norm)
        self.normalize_advantages = normalize_advantages

    def act(self, obs, rep, rng: np.random.Generator):
        raw, _ = self.policy.forward(obs, rep)
        action, z, logp = self.head.sample(raw[0], rng)
        v, _ = self.value.forward(obs, rep)
        return action, z, logp, float(v[0, 0])

    def act_mean(self, obs, rep) -> np.ndarray:
        raw, _ = self.policy.forward(obs, rep)
        return self.head.mean_action(raw[0])

    def update(self, rollout: RolloutBatch, updates: int, minibatch: int, rng: np.random.Generator):
        """``updates`` gradient steps, each on a fresh random minibatch."""
        n = len(rollout)
        minibatch = min(minibatch, n)
        stats = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0}
        for _ in range(updates):
            idx = rng.choice(n, size=minibatch, replace=False)
            s = self._update_minibatch(rollout, idx)
            for k in stats:
                stats[k] += s[k] / updates
        return stats

    def _update_minibatch(self, rollout: RolloutBatch, idx: np.ndarray):
        obs = rollout.obs[idx]
        reps = rollout.reps[idx]
        z = rollout.z[idx]
        old_logp = rollout.log_probs[idx]
        adv = rollout.advantages[idx]
        if self.normalize_advantages:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        ret = rollout.returns[idx]
        b = len(idx)

        raw, pcaches = self.policy.forward(obs, reps)
        mean, log_std = self.head.split(raw)
        logp = squashed_log_prob(z, mean, log_std, self.head.bound)
        ratio = np.exp(logp - old_logp)
        if not np.all(np.isfinite(ratio)):
            raise FloatingPointError("non-finite PPO ratio; training diverged")
        clipped = np.clip(ratio, 1.0 - self.clip, 1.0 + self.clip)
        surr1 = ratio * adv
        surr2 = clipped * adv
        policy_loss = float(-np.mean(np.minimum(surr1, surr2)))
        entropy = float(np.mean(gaussian_entropy(log_std)))

        # d(-min)/d logp: active only where the unclipped branch is taken.
        active = surr1 <= surr2
        dlogp = np.where(active, -ratio * adv, 0.0) / b
        var = np.exp(2.0 * log_std)
        dmean = dlogp[:, None] * (z - mean) / var
        dlog_std = dlogp[:, None] * ((z - mean) ** 2 / var - 1.0)
        dlog_std -= self.entropy_coef / b  # entropy bonus: dH/dlog_std = 1
        raw_log_std = raw[:, self.head.act_dim :]
        at_bound = (raw_log_std <= LOG_STD_MIN) | (raw_log_std >= LOG_STD_MAX)
        dlog_std = np.where(at_bound, 0.0, dlog_std)
        draw = np.concatenate([dmean, dlog_std], axis=1)
        pgrads, _, _ = self.policy.backward(pcaches, draw)
        nn.clip_global_norm(pgrads, self.clip_norm)
        nn.adam_step(self.policy_opt, self.policy.params, pgrads)

        v, vcaches = self.value.forward(obs, reps)
        verr = v[:, 0] - ret
        value_loss = float(self.value_coef * np.mean(verr ** 2))
        dv = (self.value_coef * 2.0 * verr / b)[:, None]
        vgrads, _, _ = self.value.backward(vcaches, dv)
        nn.clip_global_norm(vgrads, self.clip_norm)
        nn.adam_step(self.value_opt, self.value.params, vgrads)

        return {"policy_loss": policy_loss, "value_loss": value_loss, "entropy": entropy}
