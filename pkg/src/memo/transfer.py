"""Checkpoints, module grafting onto new morphologies, and transfer training."""
from __future__ import annotations

import enum
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .envs import EnvConfig, RunningNormalizer, env_layout
from .errors import ArityMismatch, CorruptFile, TypeMismatch, VersionMismatch
from .nn import Activation, ParamStore, as_rng
from .policy import ArchSpec, Critic, MLPPolicy, ModularPolicy, init_boss
from .ppo import PPOConfig, TrainResult, train_ppo

MAGIC = b"MEMOCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sII")  # magic, version, header length
_DIGEST = 32


@dataclass
class Checkpoint:
    policy_kind: str  # "modular" | "mlp"
    env: dict  # EnvConfig fields that define the morphology and task
    arch: ArchSpec
    stores: dict[str, ParamStore]
    logstd: np.ndarray
    normalizer: RunningNormalizer
    type_arity: dict[int, int] = field(default_factory=dict)
    critic: ParamStore | None = None
    meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @property
    def env_config(self) -> EnvConfig:
        return EnvConfig(**self.env)

    def module_types(self) -> dict[int, list[ParamStore]]:
        out: dict[int, list[ParamStore]] = {}
        for name, store in self.stores.items():
            if name.startswith("module."):
                _, k, p = name.split(".")
                out.setdefault(int(k), []).append((int(p), store))
        return {k: [s for _, s in sorted(v, key=lambda t: t[0])] for k, v in sorted(out.items())}

    def build_policy(self):
        graph, partition, layout = env_layout(self.env_config)
        if self.policy_kind == "mlp":
            return MLPPolicy(layout.total_dim, graph.num_joints, len(partition), self.arch,
                             net=self.stores["net"].copy(), logstd=self.logstd.copy())
        modules = {k: [s.copy() for s in nets] for k, nets in self.module_types().items()}
        return ModularPolicy(graph, partition, layout, self.arch, boss=self.stores["boss"].copy(),
                             modules=modules, logstd=self.logstd.copy())


def env_descriptor(config: EnvConfig) -> dict:
    return {
        "env_kind": config.env_kind.value,
        "counts": list(config.counts),
        "terrain": config.terrain.value,
        "object": config.object.value,
        "action_scale": config.action_scale,
        "episode_len": config.episode_len,
        "broken_joints": sorted(config.broken_joints),
        "broken_noise_scale": config.broken_noise_scale,
        "init_noise": config.init_noise,
        "seed": config.seed,
    }


def make_checkpoint(policy, normalizer: RunningNormalizer, env_config: EnvConfig, critic: Critic | None = None,
                    meta: dict | None = None) -> Checkpoint:
    type_arity = dict(policy.partition.type_arity) if policy.kind == "modular" else {}
    return Checkpoint(
        policy.kind, env_descriptor(env_config), policy.arch,
        {k: v.copy() for k, v in policy.stores().items()}, policy.logstd.copy(), normalizer.copy(),
        type_arity, critic.net.copy() if critic is not None else None, dict(meta or {}),
    )


def _store_header(store: ParamStore) -> dict:
    return {"widths": store.widths, "activations": [a.value for a in store.activations]}


def _arrays(ckpt: Checkpoint):
    """(name, array) pairs in serialization order."""
    out = []
    stores = dict(ckpt.stores)
    if ckpt.critic is not None:
        stores["critic"] = ckpt.critic
    for name, store in stores.items():
        out.extend(store.named_arrays(f"{name}.").items())
    out.append(("logstd", ckpt.logstd))
    out.append(("normalizer.mean", ckpt.normalizer.mean))
    out.append(("normalizer.m2", ckpt.normalizer.m2))
    return out


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    arrays = _arrays(ckpt)
    stores = {name: _store_header(s) for name, s in ckpt.stores.items()}
    header = {
        "policy_kind": ckpt.policy_kind,
        "env": ckpt.env,
        "arch": asdict(ckpt.arch),
        "type_arity": {str(k): v for k, v in sorted(ckpt.type_arity.items())},
        "stores": stores,
        "critic": _store_header(ckpt.critic) if ckpt.critic is not None else None,
        "normalizer_count": ckpt.normalizer.count,
        "arrays": [[name, list(a.shape)] for name, a in arrays],
        "meta": ckpt.meta,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = _PREFIX.pack(MAGIC, ckpt.format_version, len(head)) + head
    body += b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = checkpoint_bytes(ckpt)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


def parse_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < _PREFIX.size + _DIGEST:
        raise CorruptFile("checkpoint is truncated")
    magic, version, head_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CorruptFile("not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint format {version}, this build reads {FORMAT_VERSION}")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptFile("checksum mismatch")
    try:
        header = json.loads(body[_PREFIX.size:_PREFIX.size + head_len])
        offset = _PREFIX.size + head_len
        arrays = {}
        for name, shape in header["arrays"]:
            n = int(np.prod(shape)) if shape else 1
            arrays[name] = np.frombuffer(body, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(shape)
            offset += 8 * n
        if offset != len(body):
            raise CorruptFile("trailing bytes after arrays")

        def store(name, spec):
            n = len(spec["activations"])
            return ParamStore([arrays[f"{name}.W{i}"] for i in range(n)], [arrays[f"{name}.b{i}"] for i in range(n)],
                              [Activation(a) for a in spec["activations"]])

        stores = {name: store(name, spec) for name, spec in header["stores"].items()}
        critic = store("critic", header["critic"]) if header["critic"] else None
        mean = arrays["normalizer.mean"]
        norm = RunningNormalizer(len(mean), header["normalizer_count"], mean, arrays["normalizer.m2"])
        return Checkpoint(
            header["policy_kind"], header["env"], ArchSpec(**header["arch"]), stores, arrays["logstd"], norm,
            {int(k): v for k, v in header["type_arity"].items()}, critic, header["meta"], version,
        )
    except CorruptFile:
        raise
    except (KeyError, ValueError, TypeError) as exc:
        raise CorruptFile(f"malformed checkpoint: {exc}") from exc


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


# --- transfer ---------------------------------------------------------------

class TransferMode(str, enum.Enum):
    FREEZE_MODULES_REINIT_BOSS = "FreezeModulesReinitBoss"
    FINETUNE_ALL = "FinetuneAll"


@dataclass
class TransferPlan:
    source: Checkpoint
    target: EnvConfig
    mode: TransferMode = TransferMode.FREEZE_MODULES_REINIT_BOSS
    logstd_init: float = -1.0

    def __post_init__(self):
        self.mode = TransferMode(self.mode)

    @property
    def frozen(self) -> bool:
        return self.mode is TransferMode.FREEZE_MODULES_REINIT_BOSS


@dataclass
class AssembledPolicy:
    policy: ModularPolicy
    normalizer: RunningNormalizer
    frozen: bool


def assemble_transfer_policy(plan: TransferPlan, rng=None) -> AssembledPolicy:
    src = plan.source
    if src.policy_kind != "modular":
        raise TypeMismatch("transfer needs a modular source policy")
    if src.env_config.env_kind != plan.target.env_kind:
        # type ids are per environment kind (a crawler leg is not a lifter finger)
        raise TypeMismatch(f"source modules are {src.env['env_kind']} types, target is {plan.target.env_kind.value}")
    graph, partition, layout = env_layout(plan.target)
    src_modules = src.module_types()
    for k in partition.type_ids:
        if k not in src_modules:
            raise TypeMismatch(f"target module type {k} does not exist in the source checkpoint")
        if len(src_modules[k]) != partition.type_arity[k]:
            raise ArityMismatch(
                f"type {k}: source arity {len(src_modules[k])}, target arity {partition.type_arity[k]}")
        if src_modules[k][0].in_dim != layout.per_joint_dim + src.arch.D:
            raise ArityMismatch(f"type {k}: module input width does not match the target layout")
    modules = {k: [s.copy() for s in src_modules[k]] for k in partition.type_ids}
    src_graph, _, src_layout = env_layout(src.env_config)
    same_layout = src_layout.same_as(layout)
    if plan.mode is TransferMode.FINETUNE_ALL:
        if not same_layout:
            raise ArityMismatch("FinetuneAll needs the source morphology; use FreezeModulesReinitBoss")
        boss = src.stores["boss"].copy()
    else:
        boss = init_boss(layout.total_dim, len(partition), src.arch, as_rng(rng))
    logstd = np.full(graph.num_joints, float(plan.logstd_init))
    policy = ModularPolicy(graph, partition, layout, src.arch, boss=boss, modules=modules, logstd=logstd)
    normalizer = src.normalizer.copy() if same_layout else RunningNormalizer(layout.total_dim)
    return AssembledPolicy(policy, normalizer, plan.frozen)


def run_transfer(plan: TransferPlan, config: PPOConfig, seed: int, callback=None, threads=None) -> TrainResult:
    ss = np.random.SeedSequence([seed, 17])
    assembled = assemble_transfer_policy(plan, np.random.default_rng(ss))
    return train_ppo(assembled.policy, plan.target, config, seed, normalizer=assembled.normalizer,
                     freeze_modules=assembled.frozen, callback=callback, threads=threads)
