"""DAgger distillation of an expert into the modular policy, with latent noise injection.

Loss modes:
  NoiseInjection  NLL of expert means under N(W(B(s) + eta), sigma_u), eta ~ N(0, sigma^2) fresh per sample
  BCOnly          same with eta = 0
  DualLoss        bc NLL + invariance NLL, the two objectives summed explicitly
  L1Reg / L2Reg   bc NLL + w * |B(s)|_1  or  w * |B(s)|_2^2
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .envs import Env, EnvConfig, RunningNormalizer
from .errors import ConfigError, TrainingDiverged, ValidationFailure
from .nn import AdamState, adam_step, as_rng
from .policy import LOG_SQRT_2PI, ArchSpec, ModularPolicy, NoiseSpec, PolicyGrads

log = logging.getLogger(__name__)


class LossMode(str, enum.Enum):
    NOISE_INJECTION = "NoiseInjection"
    BC_ONLY = "BCOnly"
    DUAL_LOSS = "DualLoss"
    L1_REG = "L1Reg"
    L2_REG = "L2Reg"


def parse_mode(mode) -> LossMode:
    try:
        return LossMode(mode)
    except ValueError:
        raise ConfigError(f"unknown IL loss mode {mode!r}; expected one of {[m.value for m in LossMode]}") from None


@dataclass
class ILConfig:
    loss_mode: LossMode | str = LossMode.NOISE_INJECTION
    sigma: float = 1.0
    reg_weight: float = 0.0
    dagger_iterations: int = 40
    epochs_per_iteration: int = 5
    batch_size: int = 256
    lr: float = 1e-3
    validation_episodes: int = 5
    # distilled policy must reach this fraction of the expert's validation reward
    validation_fraction: float = 0.9
    # cap on samples used for the per-epoch decomposition telemetry
    report_samples: int = 2048

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigError("sigma must be non-negative")
        if self.reg_weight < 0:
            raise ConfigError("reg_weight must be non-negative")
        if self.dagger_iterations < 1 or self.epochs_per_iteration < 1 or self.batch_size < 1:
            raise ConfigError("iteration, epoch and batch counts must be positive")

    @property
    def noise(self) -> NoiseSpec:
        return NoiseSpec(self.sigma)


@dataclass
class AggregatedDataset:
    """Append-only (normalized obs, expert mean action) pairs with the DAgger iteration that added them."""

    obs_dim: int
    act_dim: int
    _obs: list = field(default_factory=list)
    _act: list = field(default_factory=list)
    _tag: list = field(default_factory=list)

    def __len__(self):
        return sum(len(o) for o in self._obs)

    def append(self, obs, actions, iteration: int) -> None:
        obs = np.asarray(obs, dtype=np.float64).reshape(-1, self.obs_dim)
        actions = np.asarray(actions, dtype=np.float64).reshape(-1, self.act_dim)
        if len(obs) != len(actions):
            raise ValueError("observation and label counts differ")
        self._obs.append(obs.copy())
        self._act.append(actions.copy())
        self._tag.append(np.full(len(obs), iteration, dtype=np.int64))

    @property
    def observations(self) -> np.ndarray:
        return np.concatenate(self._obs) if self._obs else np.zeros((0, self.obs_dim))

    @property
    def actions(self) -> np.ndarray:
        return np.concatenate(self._act) if self._act else np.zeros((0, self.act_dim))

    @property
    def iterations(self) -> np.ndarray:
        return np.concatenate(self._tag) if self._tag else np.zeros(0, dtype=np.int64)


# --- objectives (squared-error form) ----------------------------------------

def bc_loss(policy, obs, targets) -> float:
    """mean_i |W(B(s_i)) - F(s_i)|^2."""
    means = policy.forward(obs)[0]
    r = np.asarray(means - targets).reshape(-1, policy.num_joints)
    return float(np.mean(np.sum(r * r, axis=1)))


def invariance_residual(policy: ModularPolicy, obs, eta) -> np.ndarray:
    """D(s, eta) = W(B(s) + eta) - W(B(s))."""
    clean, _, H = policy.forward(obs)
    noisy = policy.modules_forward(H + eta, obs)[0]
    return noisy - clean


@dataclass
class DecompositionReport:
    L1_bc: float
    L2_inv: float
    Lp_product: float
    ratio: float

    @property
    def total(self) -> float:
        return self.L1_bc + self.L2_inv + self.Lp_product


def decomposition_terms(policy: ModularPolicy, obs, targets, eta):
    """Per-sample (bc, invariance, product) terms, each summed over action dimensions."""
    clean, _, H = policy.forward(obs)
    noisy = policy.modules_forward(H + eta, obs)[0]
    r = clean - targets
    d = noisy - clean
    return np.sum(r * r, axis=-1), np.sum(d * d, axis=-1), np.sum(2.0 * d * r, axis=-1)


def report_from_terms(l1, l2, lp) -> DecompositionReport:
    L1, L2, Lp = float(np.mean(l1)), float(np.mean(l2)), float(np.mean(lp))
    denom = L1 + L2
    ratio = abs(Lp) / denom if denom > 0 else 0.0
    return DecompositionReport(L1, L2, Lp, ratio)


def decomposition_report(policy: ModularPolicy, obs, targets, rng, sigma: float = 1.0) -> DecompositionReport:
    obs = np.atleast_2d(obs)
    eta = policy.sample_noise((obs.shape[0],), NoiseSpec(sigma), rng)
    return report_from_terms(*decomposition_terms(policy, obs, np.atleast_2d(targets), eta))


def gaussian_nll(means, logstd, targets) -> np.ndarray:
    """Per-sample -log N(targets; means, exp(logstd)) summed over dimensions."""
    z = (targets - means) * np.exp(-logstd)
    return np.sum(logstd + LOG_SQRT_2PI + 0.5 * z * z, axis=-1)


def nll_decomposition(policy: ModularPolicy, obs, targets, eta):
    """Per-sample (noisy NLL, bc NLL, invariance NLL, log-normalizer sum, product term C)."""
    clean, _, H = policy.forward(obs)
    noisy = policy.modules_forward(H + eta, obs)[0]
    logstd = policy.logstd
    ni = gaussian_nll(noisy, logstd, targets)
    bc = gaussian_nll(clean, logstd, targets)
    inv = gaussian_nll(noisy, logstd, clean)
    const = float(np.sum(logstd + LOG_SQRT_2PI))
    C = np.sum((noisy - clean) * (clean - targets) * np.exp(-2.0 * logstd), axis=-1)
    return ni, bc, inv, const, C


# --- optimized loss ---------------------------------------------------------

def _add_grads(a: PolicyGrads, b: PolicyGrads) -> PolicyGrads:
    a.boss.add_(b.boss)
    for k, nets in b.modules.items():
        for p, g in enumerate(nets):
            a.modules[k][p].add_(g)
    a.logstd = a.logstd + b.logstd
    return a


def il_loss(policy: ModularPolicy, obs, targets, config: ILConfig, rng=None):
    """Mean NLL-form loss over the batch and its gradients (PolicyGrads).

    ``rng`` is only consumed when noise is actually drawn, so NoiseInjection
    with sigma = 0 follows the BCOnly code path exactly.
    """
    mode = parse_mode(config.loss_mode)
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    B = obs.shape[0]
    logstd = policy.logstd
    inv_var = np.exp(-2.0 * logstd)

    noise = config.noise
    eta = None
    if mode in (LossMode.NOISE_INJECTION, LossMode.DUAL_LOSS) and noise.active:
        eta = policy.sample_noise((B,), noise, rng)

    if mode is LossMode.NOISE_INJECTION or eta is None:
        # NoiseInjection, BCOnly, the regularized modes, and DualLoss at sigma = 0 (no invariance signal)
        means, cache, H = policy.forward(obs, eta)
        r = means - targets
        loss = float(np.mean(gaussian_nll(means, logstd, targets)))
        d_means = r * inv_var / B
        d_logstd = np.mean(1.0 - r * r * inv_var, axis=0)
        d_H = None
        if mode is LossMode.L1_REG and config.reg_weight > 0:
            loss += config.reg_weight * float(np.mean(np.sum(np.abs(H), axis=-1)))
            d_H = config.reg_weight * np.sign(H) / B
        elif mode is LossMode.L2_REG and config.reg_weight > 0:
            loss += config.reg_weight * float(np.mean(np.sum(H * H, axis=-1)))
            d_H = 2.0 * config.reg_weight * H / B
        elif mode is LossMode.DUAL_LOSS:
            # invariance NLL of identical outputs: only the normalizer term survives
            loss += float(np.sum(logstd + LOG_SQRT_2PI))
            d_logstd = d_logstd + 1.0
        grads = policy.backward(cache, d_means, d_H_extra=d_H)
    else:
        # DualLoss with noise: two module passes sharing one boss pass
        clean, cache, H = policy.forward(obs)
        noisy, noisy_tapes = policy.modules_forward(H + eta, obs)
        r = clean - targets
        d = noisy - clean
        loss = float(np.mean(gaussian_nll(clean, logstd, targets) + gaussian_nll(noisy, logstd, clean)))
        d_clean = (r - d) * inv_var / B
        d_noisy = d * inv_var / B
        d_logstd = np.mean(1.0 - r * r * inv_var, axis=0) + np.mean(1.0 - d * d * inv_var, axis=0)
        grads = policy.backward(cache, d_clean)
        noisy_cache = type(cache)(cache.boss_tape, noisy_tapes, cache.batch, cache.vector)
        grads = _add_grads(grads, policy.backward(noisy_cache, d_noisy))
    if not math.isfinite(loss):
        raise TrainingDiverged(f"IL loss became {loss}")
    grads.logstd = d_logstd
    return loss, grads


def squared_objective_sum(policy: ModularPolicy, obs, targets, sigma: float, epochs: int, rng) -> float:
    """Average over ``epochs`` fresh noise draws of bc + invariance (squared-error form)."""
    rng = as_rng(rng)
    clean, _, H = policy.forward(obs)
    r = clean - targets
    bc = float(np.mean(np.sum(r * r, axis=-1)))
    inv = 0.0
    for _ in range(epochs):
        eta = sigma * rng.standard_normal(H.shape)
        d = policy.modules_forward(H + eta, obs)[0] - clean
        inv += float(np.mean(np.sum(d * d, axis=-1)))
    return bc + inv / epochs


# --- DAgger -----------------------------------------------------------------

@dataclass
class Expert:
    """A trained actor plus the frozen normalizer it was trained with."""

    policy: object
    normalizer: RunningNormalizer

    def label(self, normalized_obs) -> np.ndarray:
        return self.policy.mean_actions(normalized_obs)


def rollout_states(policy, env: Env, normalizer: RunningNormalizer, seed: int):
    """One deterministic-mean episode; returns (normalized obs, total reported reward)."""
    raw = env.reset(seed=seed)
    states = []
    total = 0.0
    done = False
    while not done:
        obs = normalizer.normalize(raw)
        states.append(obs)
        raw, _, done, info = env.step(policy.mean_actions(obs))
        total += info["reported_reward"]
    return np.array(states), total


def train_epoch(policy: ModularPolicy, dataset: AggregatedDataset, config: ILConfig, opt: AdamState,
                shuffle_rng, noise_rng) -> float:
    obs, acts = dataset.observations, dataset.actions
    n = len(obs)
    perm = shuffle_rng.permutation(n)
    params = policy.named_parameters()
    losses = []
    for start in range(0, n, config.batch_size):
        idx = perm[start:start + config.batch_size]
        loss, grads = il_loss(policy, obs[idx], acts[idx], config, noise_rng)
        adam_step(params, grads.named(), opt, config.lr)
        policy.touch()
        losses.append(loss)
    return float(np.mean(losses))


@dataclass
class ILRngs:
    shuffle: np.random.Generator
    noise: np.random.Generator
    report: np.random.Generator

    @classmethod
    def from_seed(cls, seed) -> "ILRngs":
        return cls(*(np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)))


def dagger_iteration(policy: ModularPolicy, expert: Expert, env: Env, dataset: AggregatedDataset,
                     config: ILConfig, rngs: ILRngs, opt: AdamState, iteration: int, episode_seed: int):
    """Roll the learner, label with the expert, aggregate, then optimize; returns per-epoch rows."""
    states, _ = rollout_states(policy, env, expert.normalizer, episode_seed)
    dataset.append(states, expert.label(states), iteration)
    rows = []
    for epoch in range(config.epochs_per_iteration):
        loss = train_epoch(policy, dataset, config, opt, rngs.shuffle, rngs.noise)
        obs, acts = dataset.observations, dataset.actions
        if len(obs) > config.report_samples:
            idx = rngs.report.choice(len(obs), config.report_samples, replace=False)
            obs, acts = obs[idx], acts[idx]
        sigma = config.sigma if config.sigma > 0 else 1.0
        rep = decomposition_report(policy, obs, acts, rngs.report, sigma)
        rows.append({
            "iteration": iteration,
            "epoch": epoch,
            "dataset_size": len(dataset),
            "loss": loss,
            "L1_bc": rep.L1_bc,
            "L2_inv": rep.L2_inv,
            "Lp_product": rep.Lp_product,
            "ratio": rep.ratio,
        })
    return rows


def evaluate(policy, env_config: EnvConfig, normalizer: RunningNormalizer, episodes: int, seed: int) -> float:
    env = Env(env_config)
    return float(np.mean([rollout_states(policy, env, normalizer, seed * 100_003 + k)[1]
                          for k in range(episodes)]))


def passes_validation(score: float, expert_score: float, fraction: float) -> bool:
    # fraction of the expert's reward, measured as a shortfall so negative rewards behave
    return score >= expert_score - (1.0 - fraction) * abs(expert_score)


@dataclass
class ILResult:
    policy: ModularPolicy
    validation_score: float
    expert_score: float
    ratio_curve: list[float]
    metrics: list[dict]


def train_il(expert: Expert, env_config: EnvConfig, config: ILConfig, seed: int, arch: ArchSpec = ArchSpec(),
             policy: ModularPolicy | None = None, callback=None, validate: bool = True) -> ILResult:
    env = Env(env_config)
    if policy is None:
        policy = ModularPolicy(env.graph, env.partition, env.layout, arch, np.random.default_rng([seed, 1]))
    dataset = AggregatedDataset(env.layout.total_dim, env.num_joints)
    rngs = ILRngs.from_seed(seed)
    opt = AdamState()
    rows = []
    for k in range(config.dagger_iterations):
        new = dagger_iteration(policy, expert, env, dataset, config, rngs, opt, k,
                               episode_seed=seed * 1_000_003 + k)
        for row in new:
            if callback is not None:
                callback(row)
        rows.extend(new)
        log.info("dagger %d: loss %.4f ratio %.3f", k, new[-1]["loss"], new[-1]["ratio"])
    score = evaluate(policy, env_config, expert.normalizer, config.validation_episodes, seed + 7)
    expert_score = evaluate(expert.policy, env_config, expert.normalizer, config.validation_episodes, seed + 7)
    result = ILResult(policy, score, expert_score, [r["ratio"] for r in rows], rows)
    if validate and not passes_validation(score, expert_score, config.validation_fraction):
        raise ValidationFailure(
            f"distilled policy scored {score:.3f}, expert {expert_score:.3f} "
            f"(bar {config.validation_fraction:.0%})", result)
    return result
