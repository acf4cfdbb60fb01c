"""Sectioned run configuration (INI) with desk and paper profiles.

Every key has a default; files may override any subset. Unknown sections or
keys are rejected. The resolved configuration is rendered canonically and
hashed, and the hash travels with every artifact.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field, fields

from .bvp import X_GT, BvpConfig
from .game import GameGeometry
from .operator import LatticeSpec, OperatorConfig
from .rollout import RolloutConfig
from .trainer import LossWeights, TrainConfig

PROFILES = ("desk", "paper")
ALL_PAIRS = tuple((a, b) for a in range(1, 6) for b in range(1, 6))


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    profile: str = "desk"
    seed: int = 0


@dataclass
class OperatorSection:
    hidden_widths: tuple = (64, 64, 64)
    q: int = 64
    activation: str = "tanh"
    adaptive: bool = True
    omega0: float = 30.0
    lattice_d1: tuple = (15.0, 105.0)
    lattice_d2: tuple = (15.0, 105.0)
    lattice_resolution: tuple = (31, 31)
    d_bounds: tuple = (15.0, 105.0)    # X_HJ position range [m]
    v_bounds: tuple = (15.0, 32.0)     # X_HJ speed range [m/s]
    sign_convention: str = "maximizing"

    def build(self, with_costate: bool = True) -> OperatorConfig:
        return OperatorConfig(hidden_widths=tuple(self.hidden_widths), q=self.q, activation=self.activation,
                              adaptive=self.adaptive, omega0=self.omega0,
                              lattice=LatticeSpec(tuple(self.lattice_d1), tuple(self.lattice_d2),
                                                  tuple(self.lattice_resolution)),
                              d_bounds=tuple(self.d_bounds), v_bounds=tuple(self.v_bounds),
                              sign_convention=self.sign_convention, with_costate=with_costate)


@dataclass
class DatasetSection:
    count: int = 20
    d_box: tuple = X_GT[0]
    v_box: tuple = X_GT[1]
    theta_set: tuple = ((1, 1), (1, 5), (5, 1), (5, 5))

    @property
    def box(self):
        return (tuple(self.d_box), tuple(self.v_box))


@dataclass
class EvaluatorSection:
    d_box: tuple = X_GT[0]
    v_box: tuple = X_GT[1]
    n_cases: int = 50                  # per type pair (after filtering for without-inevitable)
    theta_pairs: tuple = ((1, 1),)
    variant: str = "without-inevitable"
    pno_source: str = "pno-value-gradient"
    methods: tuple = ("gt", "pno", "hybrid")
    dt: float = 0.1
    candidate_factor: float = 1.5      # candidates drawn per round when filtering
    grid_resolution: int = 46
    grid_speed: float = 18.0
    grid_time: float = 0.0
    grid_thetas: tuple = ((1, 1), (1, 5), (5, 1), (5, 5))
    bvp_grid_resolution: int = 0       # 0 disables the equilibrium-value slice

    @property
    def box(self):
        return (tuple(self.d_box), tuple(self.v_box))


@dataclass
class IoSection:
    out_dir: str = "runs"
    checkpoint: str = "pno.ckpt"
    hybrid_checkpoint: str = "hybrid.ckpt"
    untrained_checkpoint: str = "untrained.ckpt"
    metrics: str = "metrics.csv"
    hybrid_metrics: str = "hybrid_metrics.csv"
    dataset: str = "bvp_dataset.csv"
    manifest: str = "bvp_manifest.json"
    safety_table: str = "safety_table.csv"
    value_grid: str = "value_grid.csv"


SECTIONS = {
    "run": RunSection,
    "game": GameGeometry,
    "operator": OperatorSection,
    "trainer": TrainConfig,
    "weights": LossWeights,
    "rollout": RolloutConfig,
    "bvp": BvpConfig,
    "dataset": DatasetSection,
    "evaluator": EvaluatorSection,
    "io": IoSection,
}

# keys owned by another section: the run seed and the operator's state box
_DERIVED = {("trainer", "seed"), ("bvp", "seed"), ("trainer", "d_bounds"), ("trainer", "v_bounds"),
            ("rollout", "d_bounds"), ("rollout", "v_bounds")}

PROFILE_OVERRIDES = {
    "desk": {
        "trainer": dict(pretrain_iters=2000, train_iters=30, gradient_steps=100, n_rollouts=64,
                        n_residual=1000, n_boundary=500, learning_rate=1e-3, lr_schedule="cosine",
                        theta_training_set=((1, 1), (5, 5)), hybrid_stage1_iters=2000,
                        hybrid_stage2_iters=1000, hybrid_batch=620, hybrid_learning_rate=1e-3,
                        hybrid_lr_schedule="cosine"),
        "dataset": dict(count=20),
        "evaluator": dict(n_cases=50, theta_pairs=((1, 1),)),
    },
    "paper": {
        "trainer": dict(pretrain_iters=50000, train_iters=300, gradient_steps=3000, n_rollouts=1000,
                        n_residual=60000, n_boundary=10000, learning_rate=2e-5, lr_schedule="cosine",
                        theta_training_set=((1, 1), (1, 5), (5, 1), (5, 5)),
                        hybrid_stage1_iters=100000, hybrid_stage2_iters=100000, hybrid_batch=1024,
                        hybrid_learning_rate=2e-5, hybrid_lr_schedule="constant"),
        "dataset": dict(count=1000),
        "evaluator": dict(n_cases=600, theta_pairs=ALL_PAIRS),
    },
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    game: GameGeometry = field(default_factory=GameGeometry)
    operator: OperatorSection = field(default_factory=OperatorSection)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    bvp: BvpConfig = field(default_factory=BvpConfig)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    evaluator: EvaluatorSection = field(default_factory=EvaluatorSection)
    io: IoSection = field(default_factory=IoSection)

    @classmethod
    def for_profile(cls, profile: str = "desk", seed: int = 0) -> "RunConfig":
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; expected one of {PROFILES}")
        cfg = cls(run=RunSection(profile, seed))
        for section, values in PROFILE_OVERRIDES[profile].items():
            setattr(cfg, section, dataclasses.replace(getattr(cfg, section), **values))
        return cfg.with_seed(seed)

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with the run seed set and all derived keys re-synchronized."""
        out = dataclasses.replace(self, run=dataclasses.replace(self.run, seed=seed))
        box = dict(d_bounds=tuple(self.operator.d_bounds), v_bounds=tuple(self.operator.v_bounds))
        out.trainer = dataclasses.replace(self.trainer, seed=seed, **box)
        out.rollout = dataclasses.replace(self.rollout, **box)
        out.bvp = dataclasses.replace(self.bvp, seed=seed)
        return out

    def operator_config(self, with_costate: bool = True) -> OperatorConfig:
        return self.operator.build(with_costate)

    def to_ini(self) -> str:
        lines = []
        for name in SECTIONS:
            obj = getattr(self, name)
            lines.append(f"[{name}]")
            for f in fields(obj):
                if (name, f.name) in _DERIVED:
                    continue
                lines.append(f"{f.name} = {format_value(getattr(obj, f.name))}")
            lines.append("")
        return "\n".join(lines)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:16]

    def provenance(self) -> dict:
        return {"config_hash": self.hash, "seed": self.run.seed, "profile": self.run.profile}


# -- value (de)serialization -------------------------------------------------------

def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ", ".join(" ".join(format_value(x) for x in item) for item in v)
        return ", ".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(text: str, default, where: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [s.strip() for s in text.split(",") if s.strip()]
            if default and isinstance(default[0], tuple):
                return tuple(tuple(parse_value(x, default[0][0], where) for x in item.split()) for item in items)
            proto = default[0] if default else ""
            return tuple(parse_value(x, proto, where) for x in items)
        return text
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {text!r} ({exc})") from None


def load_config(path=None, profile: str | None = None, seed: int | None = None, text: str | None = None) -> RunConfig:
    """Resolve defaults for the profile, then apply the file, then flag overrides."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    if text is not None:
        parser.read_string(text)
    elif path is not None:
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
    file_profile = parser.get("run", "profile", fallback=None)
    file_seed = parser.get("run", "seed", fallback=None)
    prof = profile or file_profile or "desk"
    sd = seed if seed is not None else (parse_value(file_seed, 0, "run.seed") if file_seed is not None else 0)
    cfg = RunConfig.for_profile(prof, sd)
    for section in parser.sections():
        obj = getattr(cfg, section)
        known = {f.name: f for f in fields(obj)}
        updates = {}
        for key, raw in parser.items(section):
            if key not in known or (section, key) in _DERIVED:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            if section == "run":
                continue
            updates[key] = parse_value(raw, getattr(obj, key), f"{section}.{key}")
        if updates:
            try:
                setattr(cfg, section, dataclasses.replace(obj, **updates))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{section}]: {exc}") from None
    return cfg.with_seed(sd)
