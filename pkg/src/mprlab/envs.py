"""Push and Keep: small 2-D physics tasks with rule-based opponent families.

Push is a discrete-action particle task: an attacker (the learning agent)
tries to reach a landmark at the origin while a heavier, slower defender
blocks it. The defender guards the landmark until the attacker comes within
its threshold distance, then chases the attacker. Keep is a continuous
control task: the agent pushes a ball toward the origin while an opponent
pulls it toward a fixed target point with constant force.

Both step functions are deterministic given (seed, action sequence,
opponent policy); opponents are plain parameter objects fixed per episode.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np

PUSH_ACTIONS = 5  # 0 = no force, 1..4 = unit force along +x, -x, +y, -y
_PUSH_DIRS = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])

PUSH_TRAIN_THRESHOLDS = (0.1, 0.3, 0.75, 1.0)
PUSH_TEST_THRESHOLD = 0.5
KEEP_TRAIN_TRIPLES = (
    (45.0, 1.0, 0.5),
    (170.0, 2.0, 1.0),
    (-90.0, 1.5, 0.7),
    (0.0, 1.0, 0.3),
)
KEEP_TEST_ANGLE_RANGE = (-180.0, 180.0)
KEEP_TEST_DISTANCE_RANGE = (0.0, 1.0)
KEEP_TEST_FORCE_RANGE = (0.2, 1.7)


@dataclass(frozen=True)
class PushDefenderPolicy:
    """Threshold defender: guards the target while the attacker is farther
    than ``threshold`` from it, otherwise chases the attacker."""

    threshold: float

    def label(self) -> str:
        return f"d={self.threshold:g}"


@dataclass(frozen=True)
class KeepOpponentPolicy:
    """Pulls the ball toward the polar point (angle, distance) with a
    constant force magnitude."""

    angle: float  # degrees in [-180, 180)
    distance: float
    force: float

    def target_point(self) -> np.ndarray:
        rad = math.radians(self.angle)
        return np.array([math.cos(rad), math.sin(rad)]) * self.distance

    def label(self) -> str:
        return f"({self.angle:g},{self.distance:g},{self.force:g})"


@dataclass(eq=False)
class StepRecord:
    observation: np.ndarray  # observation the action was taken from
    ego_action: object  # int (Push) or 2-vector force (Keep)
    opp_action: object  # int (Push) or 2-vector force (Keep)
    reward: float
    done: bool
    clamped: bool = False


@dataclass
class PushConfig:
    horizon: int = 50
    dt: float = 0.1
    damping: float = 0.25
    attacker_mass: float = 1.0
    attacker_radius: float = 0.05
    attacker_accel: float = 4.0
    attacker_max_speed: float = 1.3
    defender_mass: float = 2.0
    defender_radius: float = 0.15
    defender_accel: float = 3.0
    defender_max_speed: float = 1.0
    target_radius: float = 0.05
    arena: float = 1.0  # agents spawn uniformly in [-arena, arena]^2
    touch_reward: float = 2.0
    collision_penalty: float = 2.0
    contact_force: float = 100.0
    contact_margin: float = 0.001
    defender_deadzone: float = 0.05  # emits action 0 inside this radius


@dataclass
class KeepConfig:
    horizon: int = 100
    dt: float = 0.1
    damping: float = 0.25
    ball_mass: float = 1.0
    max_ego_force: float = 2.0
    init_range: float = 0.1  # ball spawns uniformly in [-r, r]^2


@dataclass(eq=False)
class EnvState:
    positions: np.ndarray  # (n_bodies, 2); Push: [attacker, defender], Keep: [ball]
    velocities: np.ndarray
    step: int = 0


def _limit_speed(vel: np.ndarray, max_speed: float) -> np.ndarray:
    speed = float(np.linalg.norm(vel))
    if speed > max_speed:
        return vel * (max_speed / speed)
    return vel


def _toward(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    diff = dst - src
    norm = float(np.linalg.norm(diff))
    if norm < 1e-12:
        return np.zeros(2)
    return diff / norm


class PushEnv:
    """Attacker-vs-defender particle task with 5 discrete actions each."""

    observation_dim = 6
    num_actions = PUSH_ACTIONS
    discrete = True

    def __init__(self, config: PushConfig | None = None):
        self.cfg = config or PushConfig()
        self.state: EnvState | None = None

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        pos = rng.uniform(-self.cfg.arena, self.cfg.arena, size=(2, 2))
        self.state = EnvState(pos, np.zeros((2, 2)), step=0)
        return self._observe()

    def _observe(self) -> np.ndarray:
        attacker, defender = self.state.positions
        vel = self.state.velocities[0]
        # Defender velocity is deliberately not observable.
        return np.concatenate([-attacker, defender - attacker, vel])

    def defender_action(self, defender: PushDefenderPolicy) -> int:
        attacker_pos, defender_pos = self.state.positions
        if float(np.linalg.norm(attacker_pos)) > defender.threshold:
            goal = np.zeros(2)
        else:
            goal = attacker_pos
        diff = goal - defender_pos
        if float(np.linalg.norm(diff)) <= self.cfg.defender_deadzone:
            return 0
        return int(np.argmax(_PUSH_DIRS[1:] @ diff)) + 1

    def _contact_force(self, delta: np.ndarray, dist_min: float) -> np.ndarray:
        dist = float(np.linalg.norm(delta))
        if dist < 1e-12:
            return np.zeros(2)
        k = self.cfg.contact_margin
        penetration = math.log1p(math.exp(-(dist - dist_min) / k)) * k
        return self.cfg.contact_force * (delta / dist) * penetration

    def step(self, ego_action: int, defender: PushDefenderPolicy):
        if self.state is None:
            raise RuntimeError("reset the environment before stepping")
        if not 0 <= int(ego_action) < PUSH_ACTIONS:
            raise ValueError(f"invalid action {ego_action!r}")
        cfg = self.cfg
        obs_before = self._observe()
        opp_action = self.defender_action(defender)

        forces = np.zeros((2, 2))
        forces[0] = _PUSH_DIRS[int(ego_action)] * cfg.attacker_accel
        forces[1] = _PUSH_DIRS[opp_action] * cfg.defender_accel
        contact = self._contact_force(
            self.state.positions[0] - self.state.positions[1],
            cfg.attacker_radius + cfg.defender_radius,
        )
        forces[0] += contact
        forces[1] -= contact

        masses = (cfg.attacker_mass, cfg.defender_mass)
        caps = (cfg.attacker_max_speed, cfg.defender_max_speed)
        for i in range(2):
            vel = self.state.velocities[i] * (1.0 - cfg.damping)
            vel = vel + (forces[i] / masses[i]) * cfg.dt
            self.state.velocities[i] = _limit_speed(vel, caps[i])
            self.state.positions[i] = self.state.positions[i] + self.state.velocities[i] * cfg.dt

        self.state.step += 1
        attacker, defender_pos = self.state.positions
        dist_to_target = float(np.linalg.norm(attacker))
        reward = -dist_to_target
        if dist_to_target < cfg.attacker_radius + cfg.target_radius:
            reward += cfg.touch_reward
        if float(np.linalg.norm(attacker - defender_pos)) < cfg.attacker_radius + cfg.defender_radius:
            reward -= cfg.collision_penalty
        done = self.state.step >= cfg.horizon
        record = StepRecord(obs_before, int(ego_action), opp_action, reward, done)
        return self._observe(), record


class KeepEnv:
    """Ball-control task: the agent's 2-D force opposes a constant pull."""

    observation_dim = 4
    action_dim = 2
    discrete = False

    def __init__(self, config: KeepConfig | None = None):
        self.cfg = config or KeepConfig()
        self.state: EnvState | None = None

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        pos = rng.uniform(-self.cfg.init_range, self.cfg.init_range, size=(1, 2))
        self.state = EnvState(pos, np.zeros((1, 2)), step=0)
        return self._observe()

    def _observe(self) -> np.ndarray:
        return np.concatenate([self.state.positions[0], self.state.velocities[0]])

    def opponent_force(self, opponent: KeepOpponentPolicy) -> np.ndarray:
        direction = _toward(self.state.positions[0], opponent.target_point())
        return direction * opponent.force

    def step(self, ego_action: np.ndarray, opponent: KeepOpponentPolicy):
        if self.state is None:
            raise RuntimeError("reset the environment before stepping")
        cfg = self.cfg
        obs_before = self._observe()
        force = np.asarray(ego_action, dtype=np.float64).reshape(2)
        if not np.all(np.isfinite(force)):
            raise ValueError("ego force must be finite")
        clamped = False
        magnitude = float(np.linalg.norm(force))
        if magnitude > cfg.max_ego_force:
            force = force * (cfg.max_ego_force / magnitude)
            clamped = True
        opp_force = self.opponent_force(opponent)

        vel = self.state.velocities[0] * (1.0 - cfg.damping)
        vel = vel + ((force + opp_force) / cfg.ball_mass) * cfg.dt
        self.state.velocities[0] = vel
        self.state.positions[0] = self.state.positions[0] + vel * cfg.dt
        self.state.step += 1

        reward = -float(np.linalg.norm(self.state.positions[0]))
        done = self.state.step >= cfg.horizon
        record = StepRecord(obs_before, force.copy(), opp_force, reward, done, clamped)
        return self._observe(), record


def make_env(env_id: str, push_cfg: PushConfig | None = None, keep_cfg: KeepConfig | None = None):
    if env_id == "push":
        return PushEnv(push_cfg)
    if env_id == "keep":
        return KeepEnv(keep_cfg)
    raise ValueError(f"unknown environment {env_id!r}")


def training_policies(env_id: str):
    """The fixed training opponent set, in canonical label order."""
    if env_id == "push":
        return [PushDefenderPolicy(d) for d in PUSH_TRAIN_THRESHOLDS]
    if env_id == "keep":
        return [KeepOpponentPolicy(*t) for t in KEEP_TRAIN_TRIPLES]
    raise ValueError(f"unknown environment {env_id!r}")


def sample_opponent_policy(which: str, env_id: str, rng: np.random.Generator):
    """Draw an opponent policy from the training or test family."""
    if which not in ("train", "test"):
        raise ValueError(f"unknown policy set {which!r}")
    if env_id == "push":
        if which == "train":
            return PushDefenderPolicy(PUSH_TRAIN_THRESHOLDS[rng.integers(len(PUSH_TRAIN_THRESHOLDS))])
        return PushDefenderPolicy(PUSH_TEST_THRESHOLD)
    if env_id == "keep":
        if which == "train":
            return KeepOpponentPolicy(*KEEP_TRAIN_TRIPLES[rng.integers(len(KEEP_TRAIN_TRIPLES))])
        return KeepOpponentPolicy(
            angle=float(rng.uniform(*KEEP_TEST_ANGLE_RANGE)),
            distance=float(rng.uniform(*KEEP_TEST_DISTANCE_RANGE)),
            force=float(rng.uniform(*KEEP_TEST_FORCE_RANGE)),
        )
    raise ValueError(f"unknown environment {env_id!r}")


def opponent_params(policy) -> dict:
    return asdict(policy)


def write_trace(path, env_id: str, seed: int, policy, label: int, records: list[StepRecord]):
    """Line-delimited episode trace: one JSON header, then one record per step."""
    def _plain(v):
        return v.tolist() if isinstance(v, np.ndarray) else v

    with open(path, "w") as fh:
        header = {
            "environment": env_id,
            "seed": int(seed),
            "opponent": opponent_params(policy),
            "label": int(label),
        }
        fh.write(json.dumps(header) + "\n")
        for rec in records:
            fh.write(
                json.dumps(
                    {
                        "observation": _plain(rec.observation),
                        "ego_action": _plain(rec.ego_action),
                        "opp_action": _plain(rec.opp_action),
                        "reward": rec.reward,
                        "done": rec.done,
                        "clamped": rec.clamped,
                    }
                )
                + "\n"
            )


def read_trace(path):
    """Returns (header dict, list of StepRecord)."""
    with open(path) as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    header, rows = lines[0], lines[1:]
    records = []
    for row in rows:
        obs = np.asarray(row["observation"], dtype=np.float64)
        ego = row["ego_action"]
        opp = row["opp_action"]
        if isinstance(ego, list):
            ego = np.asarray(ego, dtype=np.float64)
        if isinstance(opp, list):
            opp = np.asarray(opp, dtype=np.float64)
        records.append(StepRecord(obs, ego, opp, float(row["reward"]), bool(row["done"]), bool(row.get("clamped", False))))
    return header, records
