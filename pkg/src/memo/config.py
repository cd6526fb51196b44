"""Sectioned ``key = value`` experiment configs.

Example::

    phase = TrainExpert
    seeds = 0, 1, 2
    output_dir = runs/expert

    [env]
    env_kind = crawler
    counts = 3, 3

    [rl]
    total_timesteps = 300000

Lines starting with ``#`` are comments. Every key is typed and defaulted
below; unknown keys and sections that the phase does not use are rejected.
"""
from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .envs import EnvConfig
from .errors import ConfigError, MissingKeyError, ParseError, UnknownKeyError
from .imitation import ILConfig, LossMode
from .policy import ArchSpec
from .ppo import PPOConfig
from .transfer import TransferMode


class Phase(str, enum.Enum):
    TRAIN_EXPERT = "TrainExpert"
    PRETRAIN_MODULES = "PretrainModules"
    TRANSFER = "Transfer"
    ANALYZE = "Analyze"


REQUIRED = object()

# type tags: int, float, bool, str, ints (comma-separated list), or a tuple of allowed strings
SCHEMA: dict[str, dict[str, tuple]] = {
    "": {
        "phase": (tuple(p.value for p in Phase), REQUIRED),
        "seeds": ("ints", [0]),
        "output_dir": ("str", "runs"),
        # single-threaded rollouts and wall_seconds logged as 0 so metrics files are byte-reproducible
        "deterministic": ("bool", True),
    },
    "env": {
        "env_kind": (("crawler", "lifter"), REQUIRED),
        "counts": ("ints", REQUIRED),
        "terrain": (("flat", "ridged"), "flat"),
        "object": (("disk", "wide_disk"), "disk"),
        "action_scale": ("float", 0.1),
        "episode_len": ("int", 0),  # 0 = per-environment default (128 crawler, 50 lifter)
        "broken_joints": ("ints", []),
        "broken_noise_scale": ("float", 0.02),
        "init_noise": ("float", 0.05),
    },
    "policy": {
        "kind": (("mlp", "modular"), "mlp"),
        "D": ("int", 32),
        "module_hidden": ("int", 32),
        "module_layers": ("int", 2),
        "boss_layers": ("int", 2),
        "critic_layers": ("int", 2),
    },
    "rl": {
        "value_coef": ("float", 0.5),
        "entropy_coef": ("float", 0.0),
        "gamma": ("float", 0.995),
        "gae_lambda": ("float", 0.95),
        "clip": ("float", 0.2),
        "max_grad_norm": ("float", 0.5),
        "lr": ("float", 3e-4),
        "lr_decay": ("bool", True),
        "epochs": ("int", 10),
        "num_minibatches": ("int", 4),
        "batch_size": ("int", 512),
        "total_timesteps": ("int", 300_000),
        "num_envs": ("int", 8),
        "noise_injection": ("bool", False),
        "noise_sigma": ("float", 1.0),
    },
    "il": {
        "expert": ("str", REQUIRED),
        "loss_mode": (tuple(m.value for m in LossMode), LossMode.NOISE_INJECTION.value),
        "sigma": ("float", 1.0),
        "reg_weight": ("float", 0.0),
        "dagger_iterations": ("int", 40),
        "epochs_per_iteration": ("int", 5),
        "batch_size": ("int", 256),
        "lr": ("float", 1e-3),
        "validation_episodes": ("int", 5),
        "validation_fraction": ("float", 0.9),
        "validate": ("bool", True),
    },
    "transfer": {
        "source": ("str", REQUIRED),
        "mode": (tuple(m.value for m in TransferMode), TransferMode.FREEZE_MODULES_REINIT_BOSS.value),
        "logstd_init": ("float", -1.0),
    },
    "analyze": {
        "checkpoint": ("str", REQUIRED),
        "rollout": ("str", ""),  # checkpoint whose mean actions generate the states; empty = the analyzed policy
        "num_trajectories": ("int", 20),
        "trajectory_seed": ("int", 99),
    },
}

# sections each phase requires / may contain
PHASE_SECTIONS = {
    Phase.TRAIN_EXPERT: ({"env"}, {"env", "policy", "rl"}),
    Phase.PRETRAIN_MODULES: ({"env", "il"}, {"env", "policy", "il"}),
    Phase.TRANSFER: ({"env", "transfer"}, {"env", "rl", "transfer"}),
    Phase.ANALYZE: ({"analyze"}, {"env", "analyze"}),
}


def _convert(kind, raw: str, key: str, line: int):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError
            return low == "true"
        if kind == "str":
            return raw
        if kind == "ints":
            return [int(x) for x in raw.split(",")] if raw.strip() else []
        if isinstance(kind, tuple):
            if raw not in kind:
                raise ValueError
            return raw
    except ValueError:
        pass
    expected = "one of " + ", ".join(kind) if isinstance(kind, tuple) else kind
    raise ParseError(f"bad value {raw!r} for {key!r} (expected {expected})", line)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class ExperimentConfig:
    phase: Phase
    seeds: list[int]
    output_dir: str
    deterministic: bool
    sections: dict[str, dict] = field(default_factory=dict)

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self.serialize() == other.serialize()

    # --- typed views ------------------------------------------------------
    def env_config(self, seed: int = 0) -> EnvConfig:
        env = self.sections["env"]
        return EnvConfig(
            env_kind=env["env_kind"], counts=tuple(env["counts"]), terrain=env["terrain"], object=env["object"],
            action_scale=env["action_scale"], episode_len=env["episode_len"] or None,
            broken_joints=frozenset(env["broken_joints"]), broken_noise_scale=env["broken_noise_scale"],
            init_noise=env["init_noise"], seed=seed,
        )

    @property
    def policy_kind(self) -> str:
        return self.sections.get("policy", {}).get("kind", "mlp")

    @property
    def arch(self) -> ArchSpec:
        p = self.sections["policy"]
        return ArchSpec(p["D"], p["module_hidden"], p["module_layers"], p["boss_layers"], p["critic_layers"])

    @property
    def ppo(self) -> PPOConfig:
        return PPOConfig(**self.sections["rl"])

    @property
    def il(self) -> ILConfig:
        il = dict(self.sections["il"])
        for k in ("expert", "validate"):
            il.pop(k)
        return ILConfig(**il)

    # --- text -------------------------------------------------------------
    def serialize(self, include_run_keys: bool = True) -> str:
        lines = [f"phase = {self.phase.value}"]
        if include_run_keys:
            lines += [f"seeds = {_format(self.seeds)}", f"output_dir = {self.output_dir}"]
        lines.append(f"deterministic = {_format(self.deterministic)}")
        for name in SCHEMA:
            if name and name in self.sections:
                lines += ["", f"[{name}]"]
                lines += [f"{k} = {_format(v)}" for k, v in self.sections[name].items()]
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        """Hash of everything that defines the experiment except the seeds and the output location."""
        return hashlib.sha256(self.serialize(include_run_keys=False).encode()).hexdigest()

    def run_id(self, seed: int) -> str:
        return f"{self.config_hash()[:12]}-s{seed}"


def parse_text(text: str, phase: Phase | str | None = None) -> ExperimentConfig:
    raw: dict[str, dict[str, tuple[str, int]]] = {"": {}}
    section = ""
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ParseError(f"malformed section header {stripped!r}", lineno)
            section = stripped[1:-1].strip()
            if section not in SCHEMA or not section:
                raise UnknownKeyError(f"unknown section [{section}] (line {lineno})")
            if section in raw:
                raise ParseError(f"section [{section}] appears twice", lineno)
            raw[section] = {}
            continue
        if "=" not in stripped:
            raise ParseError(f"expected 'key = value', got {stripped!r}", lineno)
        key, value = (s.strip() for s in stripped.split("=", 1))
        if not key:
            raise ParseError("empty key", lineno)
        if key not in SCHEMA[section]:
            where = f"[{section}]" if section else "top level"
            raise UnknownKeyError(f"unknown key {key!r} in {where} (line {lineno})")
        if key in raw[section]:
            raise ParseError(f"duplicate key {key!r}", lineno)
        raw[section][key] = (value, lineno)

    if phase is not None:
        phase = Phase(phase)
        if "phase" in raw[""]:
            value, lineno = raw[""]["phase"]
            given = _convert(SCHEMA[""]["phase"][0], value, "phase", lineno)
            if given != phase.value:
                raise ConfigError(f"config is for phase {given}, command runs {phase.value}")
        raw[""]["phase"] = (phase.value, 0)

    typed: dict[str, dict] = {}
    for name, entries in raw.items():
        out = {}
        for key, (kind, default) in SCHEMA[name].items():
            if key in entries:
                out[key] = _convert(kind, entries[key][0], key, entries[key][1])
            elif default is REQUIRED:
                out[key] = REQUIRED
            else:
                out[key] = list(default) if isinstance(default, list) else default
        typed[name] = out
    top = typed.pop("")
    if top["phase"] is REQUIRED:
        raise MissingKeyError("missing required key 'phase'")
    ph = Phase(top["phase"])
    required, allowed = PHASE_SECTIONS[ph]
    for name in typed:
        if name not in allowed:
            raise UnknownKeyError(f"section [{name}] is not used by phase {ph.value}")
    for name in allowed:
        # optional sections are fully populated with defaults; required ones must be present
        if name in required or all(d is not REQUIRED for _, d in SCHEMA[name].values()):
            typed.setdefault(name, {k: (list(d) if isinstance(d, list) else d) for k, (_, d) in SCHEMA[name].items()})
    for name, values in typed.items():
        missing = [k for k, v in values.items() if v is REQUIRED]
        if missing:
            raise MissingKeyError(f"missing required key(s) {missing} in [{name}]")
    if "env" in typed and len(typed["env"]["counts"]) != 2:
        raise ConfigError("env.counts needs exactly two integers")
    if not top["seeds"]:
        raise ConfigError("seeds must list at least one seed")
    ordered = {name: typed[name] for name in SCHEMA if name in typed}
    return ExperimentConfig(ph, top["seeds"], top["output_dir"], top["deterministic"], ordered)


def parse_config(path, phase: Phase | str | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    return parse_text(text, phase)
