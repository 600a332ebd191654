"""Experiment configuration: nested dataclasses serialized as flat
``section.key=value`` text, diffable and override-friendly."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .envs import KeepConfig, PushConfig

ENCODER_MODES = ("mpr-nors", "mpr-rs", "triplet", "actpred", "none")


@dataclass
class EnvSection:
    id: str = "push"  # push | keep
    push: PushConfig = field(default_factory=PushConfig)
    keep: KeepConfig = field(default_factory=KeepConfig)


@dataclass
class DqnSection:
    lr: float = 1e-3
    batch_size: int = 64
    replay_capacity: int = 100000
    target_sync: int = 500
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_frac: float = 0.2
    learn_start: int = 1000  # buffer transitions before updates begin
    huber_delta: float = 1.0
    updates_per_iteration: int = 1
    hidden: int = 128
    depth: int = 4


@dataclass
class PpoSection:
    lr: float = 3e-4
    clip: float = 0.2
    updates: int = 80
    minibatch: int = 1024
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    gae_lambda: float = 0.95
    act_bound: float = 2.0
    normalize_advantages: bool = True


@dataclass
class RlSection:
    algorithm: str = "dqn"  # dqn | ppo
    gamma: float = 0.99
    dtype: str = "float64"  # float64 | float32
    dqn: DqnSection = field(default_factory=DqnSection)
    ppo: PpoSection = field(default_factory=PpoSection)


@dataclass
class EncoderSection:
    mode: str = "mpr-nors"  # mpr-nors | mpr-rs | triplet | actpred | none
    lr: float = 1e-3
    clip_norm: float = 10.0
    batch_pairs: int = 64
    updates_per_iteration: int = -1  # -1: one encoder step per RL step
    triplet_margin: float = 1.0
    smoothing: float = 1.0  # additive pseudo-count for frequency tables
    num_projections: int = 100
    target_scale: float = 1.0  # optional rescale of distance targets
    lstm_hidden: int = 128
    gru_hidden: int = 32
    buffer_episodes: int = 2000  # history buffer size for on-policy learners
    dtype: str = "float64"


@dataclass
class OrchestratorSection:
    seed: int = 0
    iterations: int = 2000
    num_sample: int = 200  # episodes per policy when sampling distributions
    num_collect: int = 1  # episodes collected per training iteration
    resample_period: int = 0  # iterations between re-sampling; 0 = never
    eval_every_steps: int = 1000
    eval_episodes: int = 5
    eval_ma_window: int = 20
    opponent_per_episode: bool = False  # re-draw the opponent every episode
    export_episodes: int = 5  # episodes per policy in representations.csv
    out_root: str = "runs"
    run_name: str = ""  # derived from env/algo/mode/seed when empty
    workers: int = 1


@dataclass
class ExperimentConfig:
    env: EnvSection = field(default_factory=EnvSection)
    rl: RlSection = field(default_factory=RlSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    orchestrator: OrchestratorSection = field(default_factory=OrchestratorSection)

    def validate(self) -> "ExperimentConfig":
        if self.env.id not in ("push", "keep"):
            raise ValueError(f"env.id must be push or keep, got {self.env.id!r}")
        if self.rl.algorithm not in ("dqn", "ppo"):
            raise ValueError(f"rl.algorithm must be dqn or ppo, got {self.rl.algorithm!r}")
        if self.encoder.mode not in ENCODER_MODES:
            raise ValueError(f"encoder.mode must be one of {ENCODER_MODES}, got {self.encoder.mode!r}")
        if self.encoder.mode == "mpr-rs" and self.orchestrator.resample_period <= 0:
            raise ValueError("encoder.mode=mpr-rs requires orchestrator.resample_period > 0")
        if self.encoder.mode != "mpr-rs" and self.orchestrator.resample_period > 0:
            raise ValueError("orchestrator.resample_period > 0 is only meaningful with encoder.mode=mpr-rs")
        if self.rl.dtype not in ("float64", "float32") or self.encoder.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")
        return self

    def horizon(self) -> int:
        return self.env.push.horizon if self.env.id == "push" else self.env.keep.horizon

    def run_name(self) -> str:
        if self.orchestrator.run_name:
            return self.orchestrator.run_name
        return f"{self.env.id}_{self.rl.algorithm}_{self.encoder.mode}_seed{self.orchestrator.seed}"


def _walk_fields(obj, prefix=""):
    """Yield (dotted_key, parent_obj, field) for every leaf field."""
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            yield from _walk_fields(value, key + ".")
        else:
            yield key, obj, f


def valid_keys(config: ExperimentConfig | None = None) -> list[str]:
    config = config or ExperimentConfig()
    return [key for key, _, _ in _walk_fields(config)]


def _parse_value(text: str, typ):
    text = text.strip()
    if typ is bool:
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"cannot parse {text!r} as bool")
    if typ is int:
        return int(text)
    if typ is float:
        return float(text)
    return text


def _field_type(f) -> type:
    # Field annotations are strings under `from __future__ import annotations`.
    name = f.type if isinstance(f.type, str) else f.type.__name__
    return {"int": int, "float": float, "bool": bool, "str": str}[name]


def apply_assignment(config: ExperimentConfig, key: str, raw_value: str) -> None:
    for full_key, parent, f in _walk_fields(config):
        if full_key == key:
            setattr(parent, f.name, _parse_value(raw_value, _field_type(f)))
            return
    known = "\n  ".join(valid_keys(config))
    raise KeyError(f"unknown config key {key!r}; valid keys:\n  {known}")


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    config = base or ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = stripped.split("=", 1)
        apply_assignment(config, key.strip(), value)
    return config


def load_config(path, overrides: list[str] | None = None) -> ExperimentConfig:
    with open(path) as fh:
        config = parse_config_text(fh.read())
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override must be key=value, got {item!r}")
        key, value = item.split("=", 1)
        apply_assignment(config, key.strip(), value)
    return config.validate()


def dump_config(config: ExperimentConfig) -> str:
    lines = []
    for key, parent, f in _walk_fields(config):
        value = getattr(parent, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def default_config(env_id: str, algorithm: str, mode: str, seed: int = 0) -> ExperimentConfig:
    """Tuned defaults for each environment/algorithm pairing."""
    cfg = ExperimentConfig()
    cfg.env.id = env_id
    cfg.rl.algorithm = algorithm
    cfg.encoder.mode = mode
    cfg.orchestrator.seed = seed
    if env_id == "keep":
        cfg.encoder.lr = 3e-4
        cfg.encoder.batch_pairs = 20
        cfg.encoder.updates_per_iteration = 15
        cfg.orchestrator.num_sample = 50
        cfg.orchestrator.num_collect = 64
        cfg.orchestrator.iterations = 30
        cfg.orchestrator.eval_every_steps = 6400
        cfg.orchestrator.eval_episodes = 20
        cfg.orchestrator.opponent_per_episode = True
    if mode == "mpr-rs":
        # ten rebuilds over the run unless overridden
        cfg.orchestrator.resample_period = max(1, cfg.orchestrator.iterations // 10)
    return cfg.validate()
