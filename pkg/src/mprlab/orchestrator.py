"""End-to-end training: joint-action distribution sampling, distance-matrix
construction, interleaved RL and encoder updates, optional periodic
re-sampling, evaluation, and artifact export.

The control flow per run: (1) when the encoder trains on distance targets,
roll out a fixed ego behavior against every training opponent and estimate
the policy distance matrix; (2) iterate: pick a training opponent, collect
episodes into the shared buffer, update the RL learner, update the encoder;
(3) in re-sampling mode, periodically redo step 1 with the current policy
and pinned exploration; (4) evaluate against the test opponents on a fixed
step cadence and stream metrics to CSV.
"""

from __future__ import annotations

import csv
import json
import math
import os
import shutil
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import distmath, encoder as enc_mod, envs, nn, plots, rl
from .config import ExperimentConfig, dump_config
from .distmath import (
    FrequencyTable,
    PolicyDistanceMatrix,
    ProjectionSet,
    SampleSet,
    build_distance_matrix,
    classical_mds,
    pairwise_euclidean,
)
from .encoder import REPRESENTATION_DIM, EncoderSession, EncoderTrainer

KEEP_REFERENCE_TEST_TRIPLES = ((-45.0, 1.0, 0.5), (90.0, 1.0, 0.4), (0.0, 1.0, 1.0))


# ---------------------------------------------------------------------------
# Actors: everything that maps (observation, representation) to an action.


class RandomDiscreteActor:
    def __init__(self, num_actions: int):
        self.num_actions = num_actions

    def act(self, obs, rep, rng):
        return int(rng.integers(self.num_actions)), None


class RandomForceActor:
    """Uniform (magnitude, direction) force within the ego bound."""

    def __init__(self, max_force: float):
        self.max_force = float(max_force)

    def act(self, obs, rep, rng):
        magnitude = rng.uniform(0.0, self.max_force)
        angle = rng.uniform(0.0, 2.0 * math.pi)
        return np.array([math.cos(angle), math.sin(angle)]) * magnitude, None


class EpsilonGreedyActor:
    def __init__(self, q_net: rl.ConditionedMLP, epsilon: float):
        self.q_net = q_net
        self.epsilon = float(epsilon)

    def act(self, obs, rep, rng):
        if self.epsilon > 0 and rng.random() < self.epsilon:
            return int(rng.integers(self.q_net.layers[-1].out_dim)), None
        q, _ = self.q_net.forward(obs, rep)
        return int(np.argmax(q[0])), None


class PpoSampleActor:
    def __init__(self, learner: rl.PpoLearner):
        self.learner = learner

    def act(self, obs, rep, rng):
        action, z, logp, value = self.learner.act(obs, rep, rng)
        return action, {"z": z, "logp": logp, "value": value}


class PpoMeanActor:
    def __init__(self, learner: rl.PpoLearner):
        self.learner = learner

    def act(self, obs, rep, rng):
        return self.learner.act_mean(obs, rep), None


# ---------------------------------------------------------------------------
# Episode rollouts


@dataclass(eq=False)
class EpisodeResult:
    episode: rl.Episode
    extras: dict | None  # z / logp / value arrays for on-policy learners
    records: list
    job: "EpisodeJob | None" = None  # set when run through run_episodes


def play_episode(env, policy, label, episode_id, env_rng, act_rng, actor, encoder_net=None,
                 keep_records=False) -> EpisodeResult:
    """Roll one episode; representations are advanced incrementally so the
    policy at step t conditions on the history through its current
    observation."""
    obs = env.reset(env_rng)
    horizon = env.cfg.horizon
    session = EncoderSession(encoder_net) if encoder_net is not None else None
    zero_rep = np.zeros(REPRESENTATION_DIM)
    observations = [np.asarray(obs, dtype=np.float64)]
    reps, actions, opp_actions, rewards, records = [], [], [], [], []
    extras: dict[str, list] = {"z": [], "logp": [], "value": []}
    has_extras = False
    for _ in range(horizon):
        rep = session.observe(obs) if session is not None else zero_rep
        reps.append(np.asarray(rep, dtype=np.float64))
        action, extra = actor.act(obs, rep, act_rng)
        obs, record = env.step(action, policy)
        observations.append(np.asarray(obs, dtype=np.float64))
        actions.append(record.ego_action)
        opp_actions.append(record.opp_action)
        rewards.append(record.reward)
        if keep_records:
            records.append(record)
        if extra is not None:
            has_extras = True
            for k, v in extra.items():
                extras[k].append(v)
    final_rep = session.observe(obs) if session is not None else zero_rep
    reps.append(np.asarray(final_rep, dtype=np.float64))
    episode = rl.Episode(
        observations=np.stack(observations),
        representations=np.stack(reps),
        actions=np.asarray(actions),
        opp_actions=np.asarray(opp_actions),
        rewards=np.asarray(rewards, dtype=np.float64),
        policy_label=label,
        episode_id=episode_id,
    )
    out_extras = None
    if has_extras:
        out_extras = {
            "z": np.stack(extras["z"]),
            "logp": np.asarray(extras["logp"], dtype=np.float64),
            "values": np.asarray(extras["value"], dtype=np.float64),
        }
    return EpisodeResult(episode, out_extras, records)


@dataclass
class EpisodeJob:
    policy: object
    label: int
    episode_id: int
    env_seed: int
    act_seed: int


def _run_job(args):
    cfg, job, actor, encoder_net, keep_records = args
    env = envs.make_env(cfg.env.id, cfg.env.push, cfg.env.keep)
    result = play_episode(
        env,
        job.policy,
        job.label,
        job.episode_id,
        np.random.default_rng(job.env_seed),
        np.random.default_rng(job.act_seed),
        actor,
        encoder_net,
        keep_records,
    )
    result.job = job
    return result


def run_episodes(cfg: ExperimentConfig, jobs, actor, encoder_net=None, workers=1,
                 keep_records=False) -> list[EpisodeResult]:
    """Run rollouts, optionally fanning out to worker processes. Seeds are
    pre-assigned per job so the result is identical either way."""
    payloads = [(cfg, job, actor, encoder_net, keep_records) for job in jobs]
    if workers <= 1 or len(jobs) < 4:
        return [_run_job(p) for p in payloads]
    import concurrent.futures

    with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, payloads, chunksize=max(1, len(jobs) // (workers * 4))))


# ---------------------------------------------------------------------------
# Distribution sampling and the distance matrix


def _seeded_jobs(policies, labels, episodes_per_policy, rng, start_id=0):
    jobs = []
    eid = start_id
    for policy, label in zip(policies, labels):
        seeds = rng.integers(np.iinfo(np.int64).max, size=(episodes_per_policy, 2))
        for env_seed, act_seed in seeds:
            jobs.append(EpisodeJob(policy, label, eid, int(env_seed), int(act_seed)))
            eid += 1
    return jobs


def sample_distributions(cfg: ExperimentConfig, actor, rng, encoder_net=None, workers=1):
    """Roll ``num_sample`` episodes against every training opponent and
    accumulate all (ego action, opponent action) pairs per label.

    Returns an ordered dict: label string -> FrequencyTable (discrete) or
    SampleSet (continuous).
    """
    policies = envs.training_policies(cfg.env.id)
    jobs = _seeded_jobs(policies, range(len(policies)), cfg.orchestrator.num_sample, rng)
    results = run_episodes(cfg, jobs, actor, encoder_net, workers)
    store: dict[str, object] = {}
    if cfg.env.id == "push":
        sizes = (envs.PUSH_ACTIONS, envs.PUSH_ACTIONS)
        counts = {i: np.zeros(sizes, dtype=np.int64) for i in range(len(policies))}
        for res in results:
            ep = res.episode
            np.add.at(counts[ep.policy_label], (ep.actions.astype(np.int64), ep.opp_actions.astype(np.int64)), 1)
        for i, policy in enumerate(policies):
            store[policy.label()] = FrequencyTable(counts[i], smoothing=cfg.encoder.smoothing)
    else:
        points = {i: [] for i in range(len(policies))}
        for res in results:
            ep = res.episode
            points[ep.policy_label].append(np.concatenate([ep.actions, ep.opp_actions], axis=1))
        for i, policy in enumerate(policies):
            store[policy.label()] = SampleSet(np.concatenate(points[i]))
    return store


def distance_matrix_from_store(store, cfg: ExperimentConfig, projections=None) -> PolicyDistanceMatrix:
    first = next(iter(store.values()))
    if isinstance(first, FrequencyTable):
        return build_distance_matrix(store, mode="kl")
    return build_distance_matrix(store, mode="sliced_wasserstein", projections=projections)


def export_heatmaps(store, out_dir: Path) -> list[Path]:
    """One ego-by-opponent frequency CSV per label; discrete stores only."""
    paths = []
    for label, table in store.items():
        if not isinstance(table, FrequencyTable):
            raise ValueError("heatmap export requires a discrete distribution store")
        path = Path(out_dir) / f"heatmap_{label}.csv"
        table.to_csv(path)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# Evaluation


def evaluate(cfg: ExperimentConfig, actor, rng, encoder_net=None, episodes=None, workers=1,
             keep_records=False):
    """Greedy rollouts against the test opponent family. Push tests the
    single held-out threshold; Keep draws a fresh random opponent per
    episode."""
    episodes = episodes if episodes is not None else cfg.orchestrator.eval_episodes
    jobs = []
    for e in range(episodes):
        policy = envs.sample_opponent_policy("test", cfg.env.id, rng)
        env_seed, act_seed = rng.integers(np.iinfo(np.int64).max, size=2)
        jobs.append(EpisodeJob(policy, -1, e, int(env_seed), int(act_seed)))
    results = run_episodes(cfg, jobs, actor, encoder_net, workers, keep_records)
    returns = [float(np.sum(r.episode.rewards)) for r in results]
    return float(np.mean(returns)), results


# ---------------------------------------------------------------------------
# Representation export and MDS


def representation_rows_from_episode(episode: rl.Episode, label_text: str):
    """Per-step rows (episode_id, label, t, 32 values) using the acting-time
    representations."""
    rows = []
    for t in range(len(episode)):
        rows.append((episode.episode_id, label_text, t, episode.representations[t]))
    return rows


def reencode_rows(net, episodes, label_text):
    """Re-encode stored histories with the current encoder, one row per step."""
    histories = [ep.observations[:-1] for ep in episodes]
    reps, _ = enc_mod.per_step_representations(net, histories)
    rows = []
    for b, ep in enumerate(episodes):
        for t in range(reps.shape[0]):
            rows.append((ep.episode_id, label_text, t, np.asarray(reps[t, b], dtype=np.float64)))
    return rows


def write_representations_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode_id", "label", "t"] + [f"r{i}" for i in range(REPRESENTATION_DIM)])
        for episode_id, label, t, vec in rows:
            writer.writerow([episode_id, label, t] + [repr(float(v)) for v in vec])


def read_representations_csv(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        dim = len(header) - 3
        for row in reader:
            rows.append((int(row[0]), row[1], int(row[2]), np.array([float(v) for v in row[3 : 3 + dim]])))
    return rows


def select_mds_points(rows, mode: str, last_steps: int = 10):
    """Reduce representation rows to the points that get embedded.

    ``per-step`` keeps the final ``last_steps`` timesteps of each episode;
    ``per-episode-mean`` averages each episode into one point.
    """
    if mode not in ("per-step", "per-episode-mean"):
        raise ValueError(f"unknown mds mode {mode!r}")
    by_episode: dict[tuple, list] = {}
    for episode_id, label, t, vec in rows:
        by_episode.setdefault((episode_id, label), []).append((t, vec))
    points, labels, tags = [], [], []
    for (episode_id, label), steps in by_episode.items():
        steps.sort(key=lambda s: s[0])
        if mode == "per-episode-mean":
            points.append(np.mean([v for _, v in steps], axis=0))
            labels.append(label)
            tags.append((episode_id, "mean"))
        else:
            for t, vec in steps[-last_steps:]:
                points.append(vec)
                labels.append(label)
                tags.append((episode_id, t))
    return np.stack(points), labels, tags


def export_mds(rows, mode: str, out_csv, out_svg=None, last_steps: int = 10):
    """Classical-MDS 2-D embedding of representation rows, written as CSV
    (and optionally an SVG scatter)."""
    if len(rows) < 3:
        raise ValueError("mds export needs at least 3 representation rows")
    points, labels, tags = select_mds_points(rows, mode, last_steps)
    if len(points) < 3:
        raise ValueError("mds export needs at least 3 points after reduction")
    coords = classical_mds(pairwise_euclidean(points), 2)
    with open(out_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode_id", "label", "t", "x", "y"])
        for (episode_id, t), label, (x, y) in zip(tags, labels, coords):
            writer.writerow([episode_id, label, t, repr(float(x)), repr(float(y))])
    if out_svg is not None:
        svg = plots.scatter_svg(coords, labels, title=f"policy representations ({mode})")
        Path(out_svg).write_text(svg)
    return coords, labels


# ---------------------------------------------------------------------------
# The training loop


class _MetricsWriter:
    COLUMNS = [
        "step", "episodes", "epsilon", "train_reward", "rl_loss",
        "value_loss", "encoder_loss", "test_reward", "test_reward_ma",
    ]

    def __init__(self, path):
        self.fh = open(path, "w", newline="")
        self.writer = csv.writer(self.fh)
        self.writer.writerow(self.COLUMNS)

    def row(self, **kw):
        self.writer.writerow([repr(float(kw[c])) if c not in ("step", "episodes") else int(kw[c])
                              for c in self.COLUMNS])
        self.fh.flush()

    def close(self):
        self.fh.close()


@dataclass
class _Streams:
    """Independent RNG streams derived from one master seed."""

    init_sampling: np.random.Generator
    collection: np.random.Generator
    exploration: np.random.Generator
    batches: np.random.Generator
    evaluation: np.random.Generator
    export: np.random.Generator
    net_seed: int
    encoder_seed: int
    projection_seed: int

    @classmethod
    def from_seed(cls, seed: int) -> "_Streams":
        children = np.random.SeedSequence(seed).spawn(9)
        ints = [int(c.generate_state(1)[0]) for c in children[6:]]
        return cls(
            init_sampling=np.random.default_rng(children[0]),
            collection=np.random.default_rng(children[1]),
            exploration=np.random.default_rng(children[2]),
            batches=np.random.default_rng(children[3]),
            evaluation=np.random.default_rng(children[4]),
            export=np.random.default_rng(children[5]),
            net_seed=ints[0],
            encoder_seed=ints[1],
            projection_seed=ints[2],
        )


def _np_dtype(name: str):
    return np.float32 if name == "float32" else np.float64


def build_networks(cfg: ExperimentConfig, streams: _Streams):
    """Encoder (+ prediction head) and RL learner for the configured setup."""
    env = envs.make_env(cfg.env.id, cfg.env.push, cfg.env.keep)
    obs_dim = env.observation_dim
    enc_dtype = _np_dtype(cfg.encoder.dtype)
    rl_dtype = _np_dtype(cfg.rl.dtype)

    encoder_net = None
    trainer = None
    if cfg.encoder.mode != "none":
        if cfg.env.id == "push":
            encoder_net = enc_mod.build_push_encoder(obs_dim, streams.encoder_seed,
                                                     cfg.encoder.lstm_hidden, dtype=enc_dtype)
        else:
            encoder_net = enc_mod.build_keep_encoder(obs_dim, streams.encoder_seed,
                                                     cfg.encoder.gru_hidden, dtype=enc_dtype)
        head = None
        if cfg.encoder.mode == "actpred":
            out = envs.PUSH_ACTIONS if cfg.env.id == "push" else 2 * env.action_dim
            head = nn.Network([nn.Dense(REPRESENTATION_DIM, out, "identity")],
                              seed=streams.encoder_seed + 1, dtype=enc_dtype)
        trainer = EncoderTrainer(
            net=encoder_net,
            mode=cfg.encoder.mode,
            lr=cfg.encoder.lr,
            clip_norm=cfg.encoder.clip_norm,
            triplet_margin=cfg.encoder.triplet_margin,
            target_scale=cfg.encoder.target_scale,
            head=head,
        )

    if cfg.rl.algorithm == "dqn":
        q_net = rl.build_push_qnet(obs_dim, env.num_actions, streams.net_seed,
                                   cfg.rl.dqn.hidden, cfg.rl.dqn.depth, dtype=rl_dtype)
        learner = rl.DqnLearner(q_net, lr=cfg.rl.dqn.lr, gamma=cfg.rl.gamma,
                                target_sync=cfg.rl.dqn.target_sync,
                                huber_delta=cfg.rl.dqn.huber_delta)
    else:
        policy = rl.build_keep_policy_net(obs_dim, env.action_dim, streams.net_seed, dtype=rl_dtype)
        value = rl.build_keep_value_net(obs_dim, streams.net_seed + 1, dtype=rl_dtype)
        learner = rl.PpoLearner(
            policy, value, act_bound=cfg.rl.ppo.act_bound, lr=cfg.rl.ppo.lr,
            clip=cfg.rl.ppo.clip, entropy_coef=cfg.rl.ppo.entropy_coef,
            value_coef=cfg.rl.ppo.value_coef, clip_norm=cfg.encoder.clip_norm,
            normalize_advantages=cfg.rl.ppo.normalize_advantages,
        )
    return encoder_net, trainer, learner


def _sampling_actor(cfg: ExperimentConfig, learner, epsilon: float | None):
    """Ego behavior for distribution sampling: uniform random before any
    training, otherwise the current policy with pinned exploration."""
    if learner is None:
        if cfg.env.id == "push":
            return RandomDiscreteActor(envs.PUSH_ACTIONS)
        return RandomForceActor(cfg.env.keep.max_ego_force)
    if isinstance(learner, rl.DqnLearner):
        return EpsilonGreedyActor(learner.q_net, epsilon if epsilon is not None else 0.05)
    return PpoSampleActor(learner)


def train(cfg: ExperimentConfig, out_root=None):
    """Run one experiment; returns a summary dict including the run path.

    The run directory is written to a temporary location and renamed at the
    end so partially-written runs never appear under the output root.
    """
    cfg.validate()
    orch = cfg.orchestrator
    out_root = Path(out_root if out_root is not None else orch.out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    run_name = cfg.run_name()
    tmp_dir = out_root / f".tmp-{run_name}"
    if tmp_dir.exists():
        shutil.rmtree(tmp_dir)
    tmp_dir.mkdir(parents=True)
    (tmp_dir / "checkpoints").mkdir()

    streams = _Streams.from_seed(orch.seed)
    env = envs.make_env(cfg.env.id, cfg.env.push, cfg.env.keep)
    horizon = cfg.horizon()
    policies = envs.training_policies(cfg.env.id)
    encoder_net, trainer, learner = build_networks(cfg, streams)
    is_dqn = cfg.rl.algorithm == "dqn"
    mpr_mode = cfg.encoder.mode in ("mpr-nors", "mpr-rs")

    projections = None
    store = None
    matrix = None
    if mpr_mode:
        if cfg.env.id == "keep":
            projections = ProjectionSet.generate(2 + env.action_dim, cfg.encoder.num_projections,
                                                 streams.projection_seed)
        store = sample_distributions(cfg, _sampling_actor(cfg, None, None),
                                     streams.init_sampling, workers=orch.workers)
        matrix = distance_matrix_from_store(store, cfg, projections)

    if is_dqn:
        buffer = rl.EpisodeBuffer(cfg.rl.dqn.replay_capacity)
    else:
        buffer = rl.EpisodeBuffer(cfg.encoder.buffer_episodes * horizon)

    metrics = _MetricsWriter(tmp_dir / "metrics.csv")
    total_steps = orch.iterations * orch.num_collect * horizon
    env_steps = 0
    episode_count = 0
    eval_bucket = 0
    ma_window: deque = deque(maxlen=orch.eval_ma_window)
    recent_returns: list[float] = []
    last_rl_loss = float("nan")
    last_value_loss = float("nan")
    current_eps = cfg.rl.dqn.eps_start if is_dqn else float("nan")
    resamples = 0
    last_eval = float("nan")

    def eval_actor():
        if is_dqn:
            return EpsilonGreedyActor(learner.q_net, 0.0)
        return PpoMeanActor(learner)

    def maybe_evaluate():
        nonlocal eval_bucket, recent_returns, last_eval
        bucket = env_steps // max(orch.eval_every_steps, 1)
        if bucket <= eval_bucket:
            return
        eval_bucket = bucket
        mean_reward, _ = evaluate(cfg, eval_actor(), streams.evaluation, encoder_net,
                                  workers=orch.workers)
        ma_window.append(mean_reward)
        last_eval = mean_reward
        train_reward = float(np.mean(recent_returns)) if recent_returns else float("nan")
        recent_returns = []
        metrics.row(
            step=env_steps,
            episodes=episode_count,
            epsilon=current_eps,
            train_reward=train_reward,
            rl_loss=last_rl_loss,
            value_loss=last_value_loss,
            encoder_loss=trainer.last_loss if trainer is not None else float("nan"),
            test_reward=mean_reward,
            test_reward_ma=float(np.mean(ma_window)),
        )

    for iteration in range(1, orch.iterations + 1):
        policy_idx = int(streams.collection.integers(len(policies)))
        collected = []
        for _ in range(orch.num_collect):
            if orch.opponent_per_episode:
                policy_idx = int(streams.collection.integers(len(policies)))
            policy = policies[policy_idx]
            if is_dqn:
                current_eps = rl.epsilon_at(env_steps, total_steps, cfg.rl.dqn.eps_start,
                                            cfg.rl.dqn.eps_end, cfg.rl.dqn.eps_decay_frac)
                actor = EpsilonGreedyActor(learner.q_net, current_eps)
            else:
                actor = PpoSampleActor(learner)
            env_seed = int(streams.collection.integers(np.iinfo(np.int64).max))
            act_seed = int(streams.exploration.integers(np.iinfo(np.int64).max))
            result = play_episode(env, policy, policy_idx, episode_count,
                                  np.random.default_rng(env_seed),
                                  np.random.default_rng(act_seed), actor, encoder_net)
            buffer.add(result.episode)
            collected.append(result)
            episode_count += 1
            env_steps += len(result.episode)
            recent_returns.append(float(np.sum(result.episode.rewards)))

        if is_dqn:
            if len(buffer) >= max(cfg.rl.dqn.learn_start, cfg.rl.dqn.batch_size):
                for _ in range(cfg.rl.dqn.updates_per_iteration):
                    batch = buffer.sample_transitions(cfg.rl.dqn.batch_size, streams.batches)
                    if cfg.encoder.mode == "actpred":
                        last_rl_loss = learner.update_with_encoder(batch, encoder_net, trainer,
                                                                   discrete_opponent=True)
                    else:
                        last_rl_loss = learner.update(batch)
                enc_updates = cfg.encoder.updates_per_iteration
                if enc_updates < 0:
                    enc_updates = cfg.rl.dqn.updates_per_iteration
                _encoder_updates(cfg, trainer, buffer, matrix, enc_updates, streams.batches)
        else:
            rollout = rl.RolloutBatch.from_episodes(
                [
                    {
                        "obs": r.episode.observations[:-1],
                        "reps": r.episode.representations[:-1],
                        "z": r.extras["z"],
                        "logp": r.extras["logp"],
                        "rewards": r.episode.rewards,
                        "values": r.extras["values"],
                    }
                    for r in collected
                ],
                gamma=cfg.rl.gamma,
                lam=cfg.rl.ppo.gae_lambda,
            )
            stats = learner.update(rollout, cfg.rl.ppo.updates, cfg.rl.ppo.minibatch, streams.batches)
            last_rl_loss = stats["policy_loss"]
            last_value_loss = stats["value_loss"]
            enc_updates = max(cfg.encoder.updates_per_iteration, 0)
            _encoder_updates(cfg, trainer, buffer, matrix, enc_updates, streams.batches)

        if cfg.encoder.mode == "mpr-rs" and iteration % orch.resample_period == 0:
            actor = _sampling_actor(cfg, learner, current_eps if is_dqn else None)
            store = sample_distributions(cfg, actor, streams.init_sampling, encoder_net,
                                         workers=orch.workers)
            matrix = distance_matrix_from_store(store, cfg, projections)
            resamples += 1

        maybe_evaluate()

    # ----- artifacts -----
    if matrix is not None:
        matrix.to_csv(tmp_dir / "distances.csv")
    if store is not None and cfg.env.id == "push":
        export_heatmaps(store, tmp_dir)
    _save_checkpoints(cfg, tmp_dir / "checkpoints", learner, encoder_net, trainer, env_steps, orch.seed)

    if encoder_net is not None:
        rep_rows = _export_final_representations(cfg, tmp_dir, buffer, encoder_net, learner, streams)
        mode = "per-step" if cfg.env.id == "push" else "per-episode-mean"
        try:
            export_mds(rep_rows, mode, tmp_dir / "mds.csv", tmp_dir / "mds.svg")
        except ValueError:
            pass  # too few points at tiny smoke scales

    (tmp_dir / "config.cfg").write_text(dump_config(cfg))
    (tmp_dir / "seed.txt").write_text(f"{orch.seed}\n")
    summary = {
        "run_name": run_name,
        "environment": cfg.env.id,
        "algorithm": cfg.rl.algorithm,
        "encoder_mode": cfg.encoder.mode,
        "seed": orch.seed,
        "env_steps": env_steps,
        "episodes": episode_count,
        "resamples": resamples,
        "final_test_reward": last_eval,
        "final_test_reward_ma": float(np.mean(ma_window)) if ma_window else float("nan"),
    }
    (tmp_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    metrics.close()

    run_dir = out_root / run_name
    if run_dir.exists():
        shutil.rmtree(run_dir)
    os.replace(tmp_dir, run_dir)
    summary["run_dir"] = str(run_dir)
    return summary


def _encoder_updates(cfg, trainer, buffer, matrix, count, rng):
    if trainer is None or count <= 0 or len(buffer.episodes) < 2:
        return
    mode = cfg.encoder.mode
    histories = buffer.histories()
    for _ in range(count):
        if mode in ("mpr-nors", "mpr-rs"):
            trainer.step_embed(histories, matrix, cfg.encoder.batch_pairs, rng)
        elif mode == "triplet":
            labels = {h.policy_label for h in histories}
            if len(labels) >= 2:
                trainer.step_triplet(histories, cfg.encoder.batch_pairs, rng)
        elif mode == "actpred" and cfg.rl.algorithm == "ppo":
            episodes = list(buffer.episodes)
            idx = rng.integers(len(episodes), size=min(cfg.encoder.batch_pairs, len(episodes)))
            batch = [episodes[i] for i in idx]
            opp = np.stack([e.opp_actions for e in batch], axis=1)
            trainer.step_action_prediction([e.history() for e in batch], opp, discrete=False)


def _save_checkpoints(cfg, ckpt_dir, learner, encoder_net, trainer, step, seed):
    if isinstance(learner, rl.DqnLearner):
        nn.save_checkpoint(ckpt_dir / "qnet.npz", learner.q_net.params, seed=seed, step=step)
    else:
        nn.save_checkpoint(ckpt_dir / "policy.npz", learner.policy.params, seed=seed, step=step)
        nn.save_checkpoint(ckpt_dir / "value.npz", learner.value.params, seed=seed, step=step)
    if encoder_net is not None:
        nn.save_checkpoint(ckpt_dir / "encoder.npz", encoder_net.params, seed=seed, step=step)
    if trainer is not None and trainer.head is not None:
        nn.save_checkpoint(ckpt_dir / "prediction_head.npz", trainer.head.params, seed=seed, step=step)


def _export_final_representations(cfg, out_dir, buffer, encoder_net, learner, streams):
    """representations.csv: buffer histories re-encoded per training policy,
    plus fresh greedy rollouts against held-out opponents."""
    policies = envs.training_policies(cfg.env.id)
    rows = []
    count = cfg.orchestrator.export_episodes
    if cfg.env.id == "push":
        by_label = buffer.episodes_by_label()
        for label, policy in enumerate(policies):
            eps = by_label.get(label, [])
            if not eps:
                continue
            idx = streams.export.choice(len(eps), size=min(count, len(eps)), replace=False)
            rows.extend(reencode_rows(encoder_net, [eps[i] for i in idx], policy.label()))
        test_policies = [envs.PushDefenderPolicy(envs.PUSH_TEST_THRESHOLD)]
    else:
        for label, policy in enumerate(policies):
            jobs = _seeded_jobs([policy], [label], count, streams.export,
                                start_id=1_000_000 + label * count)
            for res in run_episodes(cfg, jobs, _greedy_actor(learner), encoder_net):
                rows.extend(representation_rows_from_episode(res.episode, policy.label()))
        test_policies = [envs.KeepOpponentPolicy(*t) for t in KEEP_REFERENCE_TEST_TRIPLES]
    for j, policy in enumerate(test_policies):
        jobs = _seeded_jobs([policy], [-1 - j], count, streams.export, start_id=2_000_000 + j * count)
        for res in run_episodes(cfg, jobs, _greedy_actor(learner), encoder_net):
            rows.extend(representation_rows_from_episode(res.episode, policy.label()))
    write_representations_csv(out_dir / "representations.csv", rows)
    return rows


def _greedy_actor(learner):
    if isinstance(learner, rl.DqnLearner):
        return EpsilonGreedyActor(learner.q_net, 0.0)
    return PpoMeanActor(learner)
