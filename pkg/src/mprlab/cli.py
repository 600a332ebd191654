"""Command-line front end: experiments, distance/analysis utilities, and a
built-in selftest.

Commands: train | eval | sample-dist | heatmap | mds | selftest. Output
root precedence: --out flag, then the MPRLAB_OUT environment variable, then
the config's orchestrator.out_root.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import envs, nn, orchestrator, rl
from .config import load_config
from .orchestrator import (
    EpsilonGreedyActor,
    PpoMeanActor,
    _Streams,
    build_networks,
    distance_matrix_from_store,
    evaluate,
    export_heatmaps,
    export_mds,
    read_representations_csv,
    sample_distributions,
)


def _build_parser():
    parser = argparse.ArgumentParser(prog="mprlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="experiment config file")
            p.add_argument("--override", action="append", default=[], metavar="K=V",
                           help="config override, repeatable")
            p.add_argument("--seed", type=int, default=None, help="orchestrator.seed shorthand")
            p.add_argument("--workers", type=int, default=None, help="rollout fan-out processes")
        p.add_argument("--out", default=None, help="output directory root")

    common(sub.add_parser("train", help="run one training experiment"))
    p_eval = sub.add_parser("eval", help="evaluate a trained run against test opponents")
    common(p_eval)
    p_eval.add_argument("--run", required=True, help="run directory with checkpoints/")
    p_eval.add_argument("--episodes", type=int, default=None)
    p_eval.add_argument("--traces", type=int, default=0, help="write this many episode trace files")
    common(sub.add_parser("sample-dist", help="estimate the training-policy distance matrix"))
    common(sub.add_parser("heatmap", help="export joint-action frequency heatmaps"))
    p_mds = sub.add_parser("mds", help="embed a representations CSV to 2-D")
    p_mds.add_argument("--reps", required=True, help="representations.csv path")
    p_mds.add_argument("--mode", choices=["per-step", "per-episode-mean"], default="per-step")
    p_mds.add_argument("--last", type=int, default=10, help="per-step mode: last K timesteps")
    p_mds.add_argument("--out", default=None)
    sub.add_parser("selftest", help="run built-in gradient/metric/determinism checks")
    return parser


def _load(args):
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"orchestrator.seed={args.seed}")
    if args.workers is not None:
        overrides.append(f"orchestrator.workers={args.workers}")
    return load_config(args.config, overrides)


def _out_root(args, cfg=None) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    env_root = os.environ.get("MPRLAB_OUT")
    if env_root:
        return Path(env_root)
    return Path(cfg.orchestrator.out_root if cfg is not None else "runs")


def _cmd_train(args) -> int:
    cfg = _load(args)
    summary = orchestrator.train(cfg, out_root=_out_root(args, cfg))
    print(f"run directory: {summary['run_dir']}")
    print(f"env steps: {summary['env_steps']}  episodes: {summary['episodes']}")
    print(f"final test reward: {summary['final_test_reward']:.4f}  "
          f"(moving avg {summary['final_test_reward_ma']:.4f})")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load(args)
    run_dir = Path(args.run)
    streams = _Streams.from_seed(cfg.orchestrator.seed)
    encoder_net, trainer, learner = build_networks(cfg, streams)
    ckpt = run_dir / "checkpoints"
    if isinstance(learner, rl.DqnLearner):
        params, _ = nn.load_checkpoint(ckpt / "qnet.npz")
        learner.q_net.params.update(params)
        actor = EpsilonGreedyActor(learner.q_net, 0.0)
    else:
        params, _ = nn.load_checkpoint(ckpt / "policy.npz")
        learner.policy.params.update(params)
        actor = PpoMeanActor(learner)
    if encoder_net is not None:
        params, _ = nn.load_checkpoint(ckpt / "encoder.npz")
        encoder_net.set_params(params)
    episodes = args.episodes if args.episodes is not None else cfg.orchestrator.eval_episodes
    mean_reward, results = evaluate(cfg, actor, streams.evaluation, encoder_net,
                                    episodes=episodes, workers=cfg.orchestrator.workers,
                                    keep_records=args.traces > 0)
    print(f"mean test reward over {episodes} episodes: {mean_reward:.4f}")
    if args.traces > 0:
        out = _out_root(args, cfg)
        out.mkdir(parents=True, exist_ok=True)
        for i, res in enumerate(results[: args.traces]):
            path = out / f"trace_{i}.jsonl"
            envs.write_trace(path, cfg.env.id, res.job.env_seed, res.job.policy,
                             res.episode.policy_label, res.records)
            print(f"wrote {path}")
    return 0


def _cmd_sample_dist(args) -> int:
    cfg = _load(args)
    streams = _Streams.from_seed(cfg.orchestrator.seed)
    actor = orchestrator._sampling_actor(cfg, None, None)
    store = sample_distributions(cfg, actor, streams.init_sampling,
                                 workers=cfg.orchestrator.workers)
    projections = None
    if cfg.env.id == "keep":
        from .distmath import ProjectionSet

        projections = ProjectionSet.generate(4, cfg.encoder.num_projections, streams.projection_seed)
    matrix = distance_matrix_from_store(store, cfg, projections)
    out = _out_root(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "distances.csv"
    matrix.to_csv(path)
    print(f"wrote {path}")
    for label, row in zip(matrix.labels, matrix.values):
        print(f"  {label}: " + " ".join(f"{v:.4f}" for v in row))
    return 0


def _cmd_heatmap(args) -> int:
    cfg = _load(args)
    if cfg.env.id != "push":
        print("heatmap export requires the discrete-action environment", file=sys.stderr)
        return 2
    streams = _Streams.from_seed(cfg.orchestrator.seed)
    actor = orchestrator._sampling_actor(cfg, None, None)
    store = sample_distributions(cfg, actor, streams.init_sampling,
                                 workers=cfg.orchestrator.workers)
    out = _out_root(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    for path in export_heatmaps(store, out):
        print(f"wrote {path}")
    return 0


def _cmd_mds(args) -> int:
    rows = read_representations_csv(args.reps)
    out = Path(args.out) if args.out else Path(args.reps).parent
    out.mkdir(parents=True, exist_ok=True)
    export_mds(rows, args.mode, out / "mds.csv", out / "mds.svg", last_steps=args.last)
    print(f"wrote {out / 'mds.csv'} and {out / 'mds.svg'}")
    return 0


def _selftest() -> int:
    """Quick gradient, metric-property, and determinism checks."""
    from . import distmath, encoder as enc_mod

    failures = []

    def check(name, ok):
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
        if not ok:
            failures.append(name)

    rng = np.random.default_rng(7)

    # gradient checks per layer kind
    for name, layers in [
        ("dense relu+tanh+identity", [nn.Dense(3, 5, "relu"), nn.Dense(5, 4, "tanh"), nn.Dense(4, 2, "identity")]),
        ("lstm", [nn.LSTM(3, 4), nn.Dense(4, 2, "identity")]),
        ("gru", [nn.GRU(3, 4), nn.Dense(4, 2, "tanh")]),
    ]:
        net = nn.Network(layers, seed=11)
        xs = rng.standard_normal((5, 2, 3))

        def loss():
            outs, _, _ = net.forward_sequence(xs)
            return float(np.sum(outs ** 2))

        outs, _, cache = net.forward_sequence(xs)
        analytic, _ = net.backward_sequence(cache, 2.0 * outs)
        numeric = nn.finite_difference_grads(net.params, loss)
        check(f"gradient {name}", nn.max_relative_error(analytic, numeric) < 1e-4)

    # embedding loss gradient
    net = nn.Network([nn.GRU(3, 6), nn.Dense(6, 4, "identity")], seed=3)
    hs = [enc_mod.ObservationHistory(rng.standard_normal((4, 3)), i, i % 2) for i in range(4)]
    batch = enc_mod.EmbedBatch([(hs[0], hs[1], 0.7), (hs[2], hs[3], 1.3)])
    loss, analytic = enc_mod.embed_loss_and_grads(batch, net)
    numeric = nn.finite_difference_grads(net.params, lambda: enc_mod.embed_loss(batch, net))
    check("gradient embedding loss", nn.max_relative_error(analytic, numeric) < 1e-4)

    # metric properties
    ok = True
    for _ in range(200):
        counts = rng.integers(0, 20, size=(3, 3)) + 0
        p = distmath.FrequencyTable(counts + 1, smoothing=1.0)
        q = distmath.FrequencyTable(rng.integers(0, 20, size=(3, 3)) + 1, smoothing=1.0)
        d_pq = distmath.symmetric_kl(p, q)
        d_qp = distmath.symmetric_kl(q, p)
        ok &= d_pq >= -1e-9 and abs(d_pq - d_qp) < 1e-9
        ok &= distmath.symmetric_kl(p, p) < 1e-12
    check("symmetric KL properties", ok)

    ok = True
    proj = distmath.ProjectionSet.generate(3, 32, seed=5)
    for _ in range(50):
        x = distmath.SampleSet(rng.standard_normal((20, 3)))
        y = distmath.SampleSet(rng.standard_normal((20, 3)))
        d_xy = distmath.sliced_wasserstein(x, y, proj)
        d_yx = distmath.sliced_wasserstein(y, x, proj)
        ok &= d_xy >= 0 and abs(d_xy - d_yx) < 1e-9
        ok &= distmath.sliced_wasserstein(x, x, proj) < 1e-12
    check("sliced Wasserstein properties", ok)

    # environment determinism
    for env_id in ("push", "keep"):
        env_a = envs.make_env(env_id)
        env_b = envs.make_env(env_id)
        policy = envs.training_policies(env_id)[0]
        obs_a = env_a.reset(np.random.default_rng(42))
        obs_b = env_b.reset(np.random.default_rng(42))
        same = np.array_equal(obs_a, obs_b)
        act_rng = np.random.default_rng(1)
        for _ in range(20):
            if env_id == "push":
                action = int(act_rng.integers(5))
            else:
                action = act_rng.uniform(-1, 1, size=2)
            oa, ra = env_a.step(action, policy)
            ob, rb = env_b.step(action, policy)
            same &= np.array_equal(oa, ob) and ra.reward == rb.reward
        check(f"{env_id} determinism", bool(same))

    print(f"{len(failures)} failure(s)" if failures else "all selftests passed")
    return 1 if failures else 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "sample-dist":
            return _cmd_sample_dist(args)
        if args.command == "heatmap":
            return _cmd_heatmap(args)
        if args.command == "mds":
            return _cmd_mds(args)
        if args.command == "selftest":
            return _selftest()
    except (ValueError, KeyError, FileNotFoundError) as exc:
        message = exc.args[0] if exc.args else str(exc)
        print(f"error: {message}", file=sys.stderr)
        return 2
    parser.error(f"unknown command {args.command!r}")
    return 2


if __name__ == "__main__":
    sys.exit(main())
