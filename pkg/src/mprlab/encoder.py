"""Recurrent encoders mapping observation histories to 32-dim policy
representations, and the three ways of training them.

The metric trainer regresses the L2 distance between two histories'
representations onto the estimated distance between the opponent policies
that produced them. The triplet trainer only separates differently-labeled
histories by a margin. The action-prediction trainer adds a head that
predicts the opponent's action at every step (cross-entropy for discrete
opponents, Gaussian negative log-likelihood for continuous ones).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .distmath import PolicyDistanceMatrix

REPRESENTATION_DIM = 32


@dataclass(eq=False)
class ObservationHistory:
    """Time-ordered observations from one episode against one opponent."""

    observations: np.ndarray  # (T, obs_dim); T may be 0
    episode_id: int
    policy_label: int

    def __len__(self) -> int:
        return int(self.observations.shape[0])


@dataclass(eq=False)
class EmbedBatch:
    """Pairs of histories with their target policy distances."""

    pairs: list  # (history_i, history_j, target_distance)

    def __len__(self) -> int:
        return len(self.pairs)


def build_push_encoder(obs_dim: int, seed: int, hidden: int = 128, dtype=np.float64) -> nn.Network:
    """2-layer LSTM stack with a linear embedding head."""
    return nn.Network(
        [
            nn.LSTM(obs_dim, hidden),
            nn.LSTM(hidden, hidden),
            nn.Dense(hidden, REPRESENTATION_DIM, "identity"),
        ],
        seed=seed,
        dtype=dtype,
    )


def build_keep_encoder(obs_dim: int, seed: int, hidden: int = 32, dtype=np.float64) -> nn.Network:
    """1-layer GRU with a tanh embedding head."""
    return nn.Network(
        [
            nn.GRU(obs_dim, hidden),
            nn.Dense(hidden, REPRESENTATION_DIM, "tanh"),
        ],
        seed=seed,
        dtype=dtype,
    )


class EncoderSession:
    """Incremental encoding of a growing history.

    ``current()`` before any observation returns the embedding of the zero
    recurrent state, which is also what a full re-encode of an empty history
    yields.
    """

    def __init__(self, net: nn.Network):
        self.net = net
        self.state = net.init_state(1)
        self._rep = self._head_of_state()

    def _head_of_state(self) -> np.ndarray:
        # Apply the trailing dense layers to the last recurrent layer's
        # hidden output (zeros before the first observation).
        x = None
        for idx, layer in enumerate(self.net.layers):
            if layer.recurrent:
                st = self.state[idx]
                x = st[0] if isinstance(st, tuple) else st
            else:
                params = {n: self.net.params[f"{idx}.{n}"] for n in layer.param_shapes()}
                x, _, _ = layer.forward(params, x)
        return np.asarray(x[0], dtype=np.float64)

    def observe(self, observation: np.ndarray) -> np.ndarray:
        out, self.state, _ = self.net.forward(np.asarray(observation)[None, :], self.state)
        self._rep = np.asarray(out[0], dtype=np.float64)
        return self._rep

    def current(self) -> np.ndarray:
        return self._rep


def encode(history: ObservationHistory | np.ndarray, net: nn.Network) -> np.ndarray:
    """Representation of a full history; empty histories embed the zero
    recurrent state."""
    obs = history.observations if isinstance(history, ObservationHistory) else np.asarray(history)
    if obs.ndim != 2 and not (obs.ndim == 1 and obs.size == 0):
        raise ValueError("history must be a (T, obs_dim) array")
    if obs.size and obs.shape[1] != net.in_dim:
        raise ValueError(f"observation dim {obs.shape[1]} does not match encoder input {net.in_dim}")
    session = EncoderSession(net)
    for row in obs:
        session.observe(row)
    return session.current()


def encode_batch(net: nn.Network, histories: list[np.ndarray]):
    """Encode same-length histories in one sequence pass.

    Returns (reps (B, 32), seq_cache) so gradients w.r.t. the final-step
    representations can be pulled back with :func:`backprop_final_reps`.
    """
    lengths = {h.shape[0] for h in histories}
    if len(lengths) != 1:
        raise ValueError("batched encoding requires equal-length histories")
    (t,) = lengths
    if t == 0:
        raise ValueError("cannot batch-encode empty histories")
    xs = np.stack(histories, axis=1)  # (T, B, obs_dim)
    outs, _, seq_cache = net.forward_sequence(xs)
    return outs[-1], outs, seq_cache


def backprop_final_reps(net: nn.Network, seq_cache, d_final, grads=None):
    """Backpropagate gradients that touch only the last step's output."""
    t, batch = seq_cache[0], seq_cache[1]
    douts = np.zeros((t, batch, net.out_dim), dtype=net.dtype)
    douts[-1] = d_final
    return net.backward_sequence(seq_cache, douts, grads=grads)


def embed_loss(batch: EmbedBatch, net: nn.Network) -> float:
    """Mean squared difference between representation distance and target
    policy distance over the batch."""
    loss, _ = embed_loss_and_grads(batch, net, want_grads=False)
    return loss


def embed_loss_and_grads(batch: EmbedBatch, net: nn.Network, want_grads: bool = True):
    """Loss plus parameter gradients for one pair batch.

    Encodes the 2B histories in one pass when all lengths match, otherwise
    falls back to per-history encoding (still exact, just slower).
    """
    if len(batch) == 0:
        raise ValueError("empty embedding batch")
    his = [np.asarray(p[0].observations, dtype=np.float64) for p in batch.pairs]
    hjs = [np.asarray(p[1].observations, dtype=np.float64) for p in batch.pairs]
    targets = np.array([float(p[2]) for p in batch.pairs])
    if np.any(targets < 0) or not np.all(np.isfinite(targets)):
        raise ValueError("target distances must be finite and non-negative")
    b = len(batch)
    lengths = {h.shape[0] for h in his} | {h.shape[0] for h in hjs}
    batched = len(lengths) == 1 and next(iter(lengths)) > 0
    if batched:
        reps, _, seq_cache = encode_batch(net, his + hjs)
        ri, rj = reps[:b], reps[b:]
    else:
        ri = np.stack([encode(ObservationHistory(h, 0, 0), net) for h in his])
        rj = np.stack([encode(ObservationHistory(h, 0, 0), net) for h in hjs])
    diff = ri - rj
    dist = np.linalg.norm(diff, axis=1)
    resid = dist - targets
    loss = float(np.mean(resid ** 2))
    if not want_grads:
        return loss, None
    if not batched:
        raise NotImplementedError("gradients require equal-length, non-empty histories")
    # d loss / d dist = 2 resid / B; d dist / d ri = diff / dist.
    safe = np.where(dist > 1e-12, dist, 1.0)
    scale = (2.0 * resid / b) / safe
    scale = np.where(dist > 1e-12, scale, 0.0)
    d_ri = scale[:, None] * diff
    d_final = np.concatenate([d_ri, -d_ri], axis=0)
    grads, _ = backprop_final_reps(net, seq_cache, d_final)
    return loss, grads


def sample_embed_batch(
    histories: list[ObservationHistory],
    distance_matrix: PolicyDistanceMatrix,
    batch_size: int,
    rng: np.random.Generator,
    target_scale: float = 1.0,
) -> EmbedBatch:
    """Uniform with-replacement pairs; same-label pairs get target 0 via the
    matrix's zero diagonal."""
    if not histories:
        raise ValueError("cannot sample from an empty history buffer")
    n = len(histories)
    idx = rng.integers(n, size=(batch_size, 2))
    pairs = []
    for a, bb in idx:
        hi, hj = histories[a], histories[bb]
        target = distance_matrix[hi.policy_label, hj.policy_label] * target_scale
        pairs.append((hi, hj, target))
    return EmbedBatch(pairs)


def triplet_loss(anchor: np.ndarray, positive: np.ndarray, negative: np.ndarray, margin: float = 1.0) -> float:
    """max(0, ||a-p||^2 - ||a-n||^2 + margin) for single representations."""
    ap = float(np.sum((anchor - positive) ** 2))
    an = float(np.sum((anchor - negative) ** 2))
    return max(0.0, ap - an + margin)


def triplet_loss_and_grads(
    net: nn.Network,
    anchors: list[ObservationHistory],
    positives: list[ObservationHistory],
    negatives: list[ObservationHistory],
    margin: float = 1.0,
):
    """Batched triplet loss over same-length histories, with gradients."""
    for a, p, n in zip(anchors, positives, negatives):
        if a.policy_label != p.policy_label:
            raise ValueError("anchor and positive must share a policy label")
        if a.policy_label == n.policy_label:
            raise ValueError("negative must have a different policy label")
    b = len(anchors)
    his = [np.asarray(h.observations, dtype=np.float64) for h in anchors + positives + negatives]
    reps, _, seq_cache = encode_batch(net, his)
    ra, rp, rn = reps[:b], reps[b : 2 * b], reps[2 * b :]
    ap = np.sum((ra - rp) ** 2, axis=1)
    an = np.sum((ra - rn) ** 2, axis=1)
    per = ap - an + margin
    active = per > 0
    loss = float(np.mean(np.where(active, per, 0.0)))
    w = active.astype(reps.dtype)[:, None] / b
    d_ra = w * 2.0 * (rn - rp)
    d_rp = w * -2.0 * (ra - rp)
    d_rn = w * 2.0 * (ra - rn)
    d_final = np.concatenate([d_ra, d_rp, d_rn], axis=0)
    grads, _ = backprop_final_reps(net, seq_cache, d_final)
    return loss, grads


def sample_triplets(histories: list[ObservationHistory], batch_size: int, rng: np.random.Generator):
    """Anchor/positive share a label, negative differs. Requires >= 2 labels."""
    by_label: dict[int, list[ObservationHistory]] = {}
    for h in histories:
        by_label.setdefault(h.policy_label, []).append(h)
    labels = sorted(by_label)
    if len(labels) < 2:
        raise ValueError("triplet sampling needs histories from >= 2 labels")
    anchors, positives, negatives = [], [], []
    for _ in range(batch_size):
        la = labels[rng.integers(len(labels))]
        others = [l for l in labels if l != la]
        ln = others[rng.integers(len(others))]
        pool = by_label[la]
        anchors.append(pool[rng.integers(len(pool))])
        positives.append(pool[rng.integers(len(pool))])
        npool = by_label[ln]
        negatives.append(npool[rng.integers(len(npool))])
    return anchors, positives, negatives


def per_step_representations(net: nn.Network, histories: list[np.ndarray]):
    """Representations after every prefix o_1..o_t of each history.

    Returns (reps (T, B, 32), seq_cache)."""
    xs = np.stack(histories, axis=1)
    outs, _, seq_cache = net.forward_sequence(xs)
    return outs, seq_cache


def prediction_loss_terms(out: np.ndarray, opp_actions: np.ndarray, discrete: bool, want_grads: bool = True):
    """Loss and output-gradient of the opponent-action prediction head.

    Discrete: softmax cross-entropy of logits ``out`` against integer
    actions. Continuous: diagonal-Gaussian negative log-likelihood where
    ``out`` stacks (mean, log_std) along the last axis. The mean is taken
    over all rows.
    """
    n = out.shape[0]
    if discrete:
        acts = np.asarray(opp_actions, dtype=np.int64).reshape(n)
        if out.shape[1] < 2:
            raise ValueError("discrete prediction head needs >= 2 action logits")
        logits = out - out.max(axis=1, keepdims=True)
        logz = np.log(np.sum(np.exp(logits), axis=1))
        loss = float(np.mean(logz - logits[np.arange(n), acts]))
        if not want_grads:
            return loss, None
        dout = np.exp(logits - logz[:, None])
        dout[np.arange(n), acts] -= 1.0
        dout /= n
    else:
        acts = np.asarray(opp_actions, dtype=np.float64).reshape(n, -1)
        act_dim = acts.shape[1]
        if out.shape[1] != 2 * act_dim:
            raise ValueError("gaussian prediction head must emit mean and log_std per dim")
        mean, raw = out[:, :act_dim], out[:, act_dim:]
        log_std = np.clip(raw, -5.0, 2.0)
        inv_var = np.exp(-2.0 * log_std)
        sq = (acts - mean) ** 2
        nll = 0.5 * np.sum(sq * inv_var, axis=1) + np.sum(log_std, axis=1) + 0.5 * act_dim * np.log(2 * np.pi)
        loss = float(np.mean(nll))
        if not want_grads:
            return loss, None
        dmean = -(acts - mean) * inv_var / n
        dlog_std = np.where((raw > -5.0) & (raw < 2.0), (1.0 - sq * inv_var) / n, 0.0)
        dout = np.concatenate([dmean, dlog_std], axis=1)
    return loss, dout


def action_prediction_loss_and_grads(
    net: nn.Network,
    head: nn.Network,
    histories: list[np.ndarray],
    opp_actions: np.ndarray,
    discrete: bool,
    want_grads: bool = True,
):
    """Per-step opponent-action prediction loss through encoder and head.

    ``opp_actions`` has shape (T, B) for discrete opponents or
    (T, B, act_dim) for continuous ones.
    """
    reps, seq_cache = per_step_representations(net, histories)
    t, b, _ = reps.shape
    flat = reps.reshape(t * b, -1)
    out, _, head_cache = head.forward(flat)
    loss, dout = prediction_loss_terms(out, opp_actions, discrete, want_grads)
    if not want_grads:
        return loss, None, None
    head_grads, d_flat, _ = head.backward(head_cache, dout)
    enc_grads, _ = net.backward_sequence(seq_cache, d_flat.reshape(t, b, -1))
    return loss, enc_grads, head_grads


@dataclass
class EncoderTrainer:
    """Owns the encoder (and optional prediction head) and their Adam state;
    the RL learner never steps these parameters except in action-prediction
    mode, where combined gradients are handed in explicitly."""

    net: nn.Network
    mode: str  # mpr | triplet | actpred
    lr: float = 1e-3
    clip_norm: float = 10.0
    triplet_margin: float = 1.0
    target_scale: float = 1.0
    head: nn.Network | None = None
    opt: nn.AdamState = field(init=False)
    head_opt: nn.AdamState | None = field(init=False, default=None)
    last_loss: float = field(init=False, default=float("nan"))

    def __post_init__(self):
        self.opt = nn.AdamState(self.net.params, lr=self.lr)
        if self.head is not None:
            self.head_opt = nn.AdamState(self.head.params, lr=self.lr)

    def step_embed(self, histories, distance_matrix, batch_size, rng) -> float:
        batch = sample_embed_batch(histories, distance_matrix, batch_size, rng, self.target_scale)
        loss, grads = embed_loss_and_grads(batch, self.net)
        nn.clip_global_norm(grads, self.clip_norm)
        nn.adam_step(self.opt, self.net.params, grads)
        self.last_loss = loss
        return loss

    def step_triplet(self, histories, batch_size, rng) -> float:
        a, p, n = sample_triplets(histories, batch_size, rng)
        loss, grads = triplet_loss_and_grads(self.net, a, p, n, self.triplet_margin)
        nn.clip_global_norm(grads, self.clip_norm)
        nn.adam_step(self.opt, self.net.params, grads)
        self.last_loss = loss
        return loss

    def step_action_prediction(self, histories, opp_actions, discrete, rng=None) -> float:
        obs = [np.asarray(h.observations, dtype=np.float64) for h in histories]
        loss, enc_grads, head_grads = action_prediction_loss_and_grads(
            self.net, self.head, obs, opp_actions, discrete
        )
        nn.clip_global_norm(enc_grads, self.clip_norm)
        nn.adam_step(self.opt, self.net.params, enc_grads)
        nn.clip_global_norm(head_grads, self.clip_norm)
        nn.adam_step(self.head_opt, self.head.params, head_grads)
        self.last_loss = loss
        return loss

    def apply_external_grads(self, enc_grads, head_grads=None) -> None:
        """Used by the action-prediction DQN variant, whose TD loss flows
        into the encoder."""
        nn.clip_global_norm(enc_grads, self.clip_norm)
        nn.adam_step(self.opt, self.net.params, enc_grads)
        if head_grads is not None and self.head is not None:
            nn.clip_global_norm(head_grads, self.clip_norm)
            nn.adam_step(self.head_opt, self.head.params, head_grads)
