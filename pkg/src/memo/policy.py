"""Actor and critic networks.

The modular actor is a boss MLP that reads the whole observation and emits a
latent ``H`` of ``|P| * D`` values, one ``D``-wide slice per module instance.
Each module type owns one small MLP per joint role; every instance of the type
runs the same networks on ``concat(own joint's local features, its slice)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .morphology import ModulePartition, MorphologyGraph, ObsLayout
from .nn import Activation, GradStore, ParamStore, Tape, as_rng, backward, init_mlp, mlp_forward

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
HIDDEN_GAIN = 1.0
OUTPUT_GAIN = 0.01

T, I = Activation.TANH, Activation.IDENTITY


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 1.0
    enabled: bool = True

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("noise sigma must be non-negative")

    @property
    def active(self) -> bool:
        return self.enabled and self.sigma > 0


NO_NOISE = NoiseSpec(0.0, False)


@dataclass
class LatentSignal:
    H: np.ndarray
    eta: np.ndarray | None = None
    tape: Tape | None = None


@dataclass(frozen=True)
class ArchSpec:
    D: int = 32
    module_hidden: int = 32
    module_layers: int = 2
    boss_layers: int = 2
    critic_layers: int = 2


def _check_obs(obs, dim):
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape[-1] != dim or obs.ndim not in (1, 2):
        raise DimensionError(f"observation shape {obs.shape} incompatible with width {dim}")
    return obs


def boss_widths(obs_dim: int, num_instances: int, arch: ArchSpec) -> list[int]:
    # first layer D wide, last layer |P|*D wide; extra layers (depth variants) stay D wide
    return [obs_dim] + [arch.D] * (arch.boss_layers - 1) + [num_instances * arch.D]


def init_boss(obs_dim, num_instances, arch: ArchSpec, rng) -> ParamStore:
    widths = boss_widths(obs_dim, num_instances, arch)
    return init_mlp(widths, [T] * (len(widths) - 1), rng, [HIDDEN_GAIN] * (len(widths) - 1))


def init_role_net(per_joint_dim, arch: ArchSpec, rng) -> ParamStore:
    widths = [per_joint_dim + arch.D] + [arch.module_hidden] * arch.module_layers + [1]
    n = len(widths) - 1
    return init_mlp(widths, [T] * (n - 1) + [I], rng, [HIDDEN_GAIN] * (n - 1) + [OUTPUT_GAIN])


@dataclass
class _RoleGroup:
    """All joints playing role ``role`` in modules of type ``type_id`` (batched together)."""

    type_id: int
    role: int
    joint_ids: np.ndarray
    instance_ids: np.ndarray
    local_idx: np.ndarray  # (n_inst, per_joint_dim)


@dataclass
class PolicyGrads:
    logstd: np.ndarray
    boss: GradStore | None = None
    modules: dict[int, list[GradStore]] = field(default_factory=dict)
    net: GradStore | None = None  # monolithic actor
    H: np.ndarray | None = None

    def named(self, prefix: str = "") -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        if self.net is not None:
            out.update(self.net.named_arrays(f"{prefix}net."))
        if self.boss is not None:
            out.update(self.boss.named_arrays(f"{prefix}boss."))
        for k, nets in self.modules.items():
            for p, g in enumerate(nets):
                out.update(g.named_arrays(f"{prefix}module.{k}.{p}."))
        out[f"{prefix}logstd"] = self.logstd
        return out


@dataclass
class ModularCache:
    boss_tape: Tape
    role_tapes: list[Tape]
    batch: int
    vector: bool


class ModularPolicy:
    """Boss + type-shared worker modules + state-independent log-std."""

    kind = "modular"

    def __init__(self, graph: MorphologyGraph, partition: ModulePartition, layout: ObsLayout,
                 arch: ArchSpec = ArchSpec(), seed=None, boss: ParamStore | None = None,
                 modules: dict[int, list[ParamStore]] | None = None, logstd: np.ndarray | None = None):
        rng = as_rng(seed)
        self.graph, self.partition, self.layout, self.arch = graph, partition, layout, arch
        self.D = arch.D
        self.num_instances = len(partition)
        self.num_joints = graph.num_joints
        self.boss = boss if boss is not None else init_boss(layout.total_dim, self.num_instances, arch, rng)
        if self.boss.in_dim != layout.total_dim or self.boss.out_dim != self.num_instances * self.D:
            raise DimensionError("boss dimensions do not match the layout and partition")
        if modules is None:
            modules = {
                k: [init_role_net(layout.per_joint_dim, arch, rng) for _ in range(partition.type_arity[k])]
                for k in partition.type_ids
            }
        self.modules = modules
        self.logstd = np.zeros(self.num_joints) if logstd is None else np.asarray(logstd, dtype=np.float64)
        self.groups: list[_RoleGroup] = []
        for k in partition.type_ids:
            insts = partition.instances_of(k)
            if len(modules.get(k, ())) != partition.type_arity[k]:
                raise DimensionError(f"module type {k} needs {partition.type_arity[k]} role networks")
            for p in range(partition.type_arity[k]):
                joints = np.array([inst.joint_ids[p] for inst in insts])
                self.groups.append(_RoleGroup(
                    k, p, joints, np.array([inst.instance_id for inst in insts]),
                    np.stack([layout.local_indices(j) for j in joints]),
                ))

    # --- structure -------------------------------------------------------
    def role_net(self, type_id: int, role: int) -> ParamStore:
        return self.modules[type_id][role]

    def stores(self) -> dict[str, ParamStore]:
        out = {"boss": self.boss}
        for k, nets in self.modules.items():
            for p, net in enumerate(nets):
                out[f"module.{k}.{p}"] = net
        return out

    def named_parameters(self, prefix: str = "", include_modules: bool = True) -> dict[str, np.ndarray]:
        out = {}
        for name, store in self.stores().items():
            if not include_modules and name.startswith("module."):
                continue
            out.update(store.named_arrays(f"{prefix}{name}."))
        out[f"{prefix}logstd"] = self.logstd
        return out

    def touch(self) -> None:
        for store in self.stores().values():
            store.touch()

    def module_bytes(self) -> dict[int, bytes]:
        return {k: b"".join(net.to_bytes() for net in nets) for k, nets in self.modules.items()}

    # --- forward ---------------------------------------------------------
    def boss_forward(self, obs) -> LatentSignal:
        obs = _check_obs(obs, self.layout.total_dim)
        H, tape = mlp_forward(self.boss, obs)
        return LatentSignal(H, None, tape)

    def sample_noise(self, batch_shape, noise: NoiseSpec, rng) -> np.ndarray:
        shape = tuple(batch_shape) + (self.num_instances * self.D,)
        if not noise.active:
            return np.zeros(shape)
        return noise.sigma * as_rng(rng).standard_normal(shape)

    def modules_forward(self, signal, obs):
        """Action means from a (possibly perturbed) latent ``signal`` and the observation.

        Modules read only ``signal`` and their own joints' local slices of ``obs``.
        """
        signal = np.asarray(signal, dtype=np.float64)
        obs = _check_obs(obs, self.layout.total_dim)
        vector = obs.ndim == 1
        Hs = signal.reshape(-1, self.num_instances, self.D)
        O = obs.reshape(-1, self.layout.total_dim)
        B = O.shape[0]
        if Hs.shape[0] != B:
            raise DimensionError("latent and observation batch sizes differ")
        means = np.empty((B, self.num_joints))
        tapes = []
        for g in self.groups:
            x = np.concatenate([O[:, g.local_idx], Hs[:, g.instance_ids, :]], axis=2)
            y, tape = mlp_forward(self.modules[g.type_id][g.role], x.reshape(B * len(g.joint_ids), -1))
            means[:, g.joint_ids] = y.reshape(B, len(g.joint_ids))
            tapes.append(tape)
        return (means[0] if vector else means), tapes

    def forward(self, obs, eta=None):
        """Means for a single obs vector or a batch; ``eta`` is added to the boss latent."""
        obs = _check_obs(obs, self.layout.total_dim)
        H, boss_tape = mlp_forward(self.boss, obs)
        signal = H if eta is None else H + eta
        means, tapes = self.modules_forward(signal, obs)
        B = 1 if obs.ndim == 1 else obs.shape[0]
        return means, ModularCache(boss_tape, tapes, B, obs.ndim == 1), H

    def mean_actions(self, obs) -> np.ndarray:
        return self.forward(obs)[0]

    # --- backward --------------------------------------------------------
    def backward(self, cache: ModularCache, d_means, d_H_extra=None, modules: bool = True,
                 boss: bool = True) -> PolicyGrads:
        """Gradients of a loss given dL/d(means). ``d_H_extra`` adds a direct dL/dH term."""
        dm = np.asarray(d_means, dtype=np.float64).reshape(cache.batch, self.num_joints)
        dH = np.zeros((cache.batch, self.num_instances, self.D))
        mod_grads = {k: [None] * len(nets) for k, nets in self.modules.items()}
        for g, tape in zip(self.groups, cache.role_tapes):
            n = len(g.joint_ids)
            gs = backward(tape, dm[:, g.joint_ids].reshape(cache.batch * n, 1))
            dH[:, g.instance_ids, :] += gs.input.reshape(cache.batch, n, -1)[:, :, self.layout.per_joint_dim:]
            gs.input = None
            mod_grads[g.type_id][g.role] = gs
        dH = dH.reshape(cache.batch, self.num_instances * self.D)
        if d_H_extra is not None:
            dH = dH + np.asarray(d_H_extra).reshape(dH.shape)
        boss_grads = None
        if boss:
            tape = cache.boss_tape
            boss_grads = backward(tape, dH[0] if cache.vector else dH, need_input_grad=False)
        if not modules:
            mod_grads = {}
        return PolicyGrads(np.zeros_like(self.logstd), boss_grads, mod_grads, None,
                           dH[0] if cache.vector else dH)


class MLPPolicy:
    """Monolithic actor: the boss-sized trunk followed by a linear decoder."""

    kind = "mlp"

    def __init__(self, obs_dim: int, num_joints: int, num_instances: int, arch: ArchSpec = ArchSpec(),
                 seed=None, net: ParamStore | None = None, logstd: np.ndarray | None = None):
        rng = as_rng(seed)
        self.arch = arch
        self.obs_dim, self.num_joints, self.num_instances = obs_dim, num_joints, num_instances
        if net is None:
            widths = boss_widths(obs_dim, num_instances, arch) + [num_joints]
            n = len(widths) - 1
            net = init_mlp(widths, [T] * (n - 1) + [I], rng, [HIDDEN_GAIN] * (n - 1) + [OUTPUT_GAIN])
        self.net = net
        self.logstd = np.zeros(num_joints) if logstd is None else np.asarray(logstd, dtype=np.float64)

    def stores(self) -> dict[str, ParamStore]:
        return {"net": self.net}

    def named_parameters(self, prefix: str = "", include_modules: bool = True) -> dict[str, np.ndarray]:
        out = self.net.named_arrays(f"{prefix}net.")
        out[f"{prefix}logstd"] = self.logstd
        return out

    def touch(self) -> None:
        self.net.touch()

    def forward(self, obs, eta=None):
        obs = _check_obs(obs, self.obs_dim)
        means, tape = mlp_forward(self.net, obs)
        return means, tape, None

    def mean_actions(self, obs) -> np.ndarray:
        return self.forward(obs)[0]

    def backward(self, cache: Tape, d_means, d_H_extra=None, modules=True, boss=True) -> PolicyGrads:
        g = backward(cache, d_means, need_input_grad=False)
        return PolicyGrads(np.zeros_like(self.logstd), net=g)


def monolithic_forward(policy: MLPPolicy, normalized_obs) -> np.ndarray:
    return policy.forward(normalized_obs)[0]


class Critic:
    def __init__(self, obs_dim: int, arch: ArchSpec = ArchSpec(), seed=None, net: ParamStore | None = None):
        if net is None:
            widths = [obs_dim] + [arch.D] * arch.critic_layers + [1]
            n = len(widths) - 1
            net = init_mlp(widths, [T] * (n - 1) + [I], as_rng(seed))
        self.net = net

    def named_parameters(self, prefix: str = "") -> dict[str, np.ndarray]:
        return self.net.named_arrays(f"{prefix}net.")

    def touch(self) -> None:
        self.net.touch()

    def forward(self, obs):
        v, tape = mlp_forward(self.net, obs)
        return v[..., 0], tape

    def backward(self, tape: Tape, d_values) -> GradStore:
        d = np.asarray(d_values, dtype=np.float64)[..., None]
        return backward(tape, d, need_input_grad=False)


def critic_forward(critic: Critic, normalized_obs) -> float | np.ndarray:
    v = critic.forward(normalized_obs)[0]
    return float(v) if np.ndim(v) == 0 else v


# --- functional views of the modular actor --------------------------------

def boss_forward(policy: ModularPolicy, normalized_obs) -> LatentSignal:
    return policy.boss_forward(normalized_obs)


def split_latent(H, partition: ModulePartition | int, D: int | None = None) -> list[np.ndarray]:
    H = H.H if isinstance(H, LatentSignal) else np.asarray(H)
    P = partition if isinstance(partition, int) else len(partition)
    if D is None:
        D, rem = divmod(H.shape[-1], P)
    else:
        rem = 0
    if rem or H.shape[-1] != P * D:
        raise DimensionError(f"latent of width {H.shape[-1]} cannot be split into {P} slices")
    return [H[..., i * D:(i + 1) * D] for i in range(P)]


def module_forward(type_params: list[ParamStore], signal, local_obs, per_joint_dim: int = 4) -> np.ndarray:
    """Reference (unbatched) evaluation of one module instance."""
    signal = np.asarray(signal, dtype=np.float64)
    local_obs = np.asarray(local_obs, dtype=np.float64)
    arity = len(type_params)
    if local_obs.shape != (arity * per_joint_dim,):
        raise DimensionError(f"module expects {arity * per_joint_dim} local features, got {local_obs.shape}")
    if signal.shape != (type_params[0].in_dim - per_joint_dim,):
        raise DimensionError(f"module signal has width {signal.shape}, expected {type_params[0].in_dim - per_joint_dim}")
    out = np.empty(arity)
    for p, net in enumerate(type_params):
        x = np.concatenate([local_obs[p * per_joint_dim:(p + 1) * per_joint_dim], signal])
        out[p] = mlp_forward(net, x)[0][0]
    return out


def modular_forward(policy: ModularPolicy, normalized_obs, noise: NoiseSpec = NO_NOISE, rng=None):
    """Returns (means, H, eta, cache). ``eta`` is drawn fresh when noise is active, else zero."""
    obs = _check_obs(normalized_obs, policy.layout.total_dim)
    batch = () if obs.ndim == 1 else (obs.shape[0],)
    eta = policy.sample_noise(batch, noise, rng)
    means, cache, H = policy.forward(obs, eta)
    return means, H, eta, cache


# --- diagonal Gaussian head -----------------------------------------------

def log_prob(means, logstd, action):
    means = np.asarray(means, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    z = (action - means) * np.exp(-logstd)
    return np.sum(-logstd - LOG_SQRT_2PI - 0.5 * z * z, axis=-1)


def sample_action(means, logstd, rng):
    means = np.asarray(means, dtype=np.float64)
    z = as_rng(rng).standard_normal(means.shape)
    action = means + np.exp(logstd) * z
    return action, log_prob(means, logstd, action)


def entropy(logstd) -> float:
    return float(np.sum(logstd + LOG_SQRT_2PI + 0.5))


def build_modular_policy(graph, partition, layout, arch=ArchSpec(), seed=None) -> ModularPolicy:
    return ModularPolicy(graph, partition, layout, arch, seed)


def build_mlp_policy(layout: ObsLayout, partition: ModulePartition, arch=ArchSpec(), seed=None) -> MLPPolicy:
    return MLPPolicy(layout.total_dim, layout.num_joints, len(partition), arch, seed)
