"""On-policy actor-critic training with PPO (clipped surrogate + GAE)."""
from __future__ import annotations

import logging
import math
import os
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .envs import Env, EnvConfig, RunningNormalizer
from .errors import TrainingDiverged
from .nn import AdamState, adam_step, as_rng, clip_by_global_norm
from .policy import NO_NOISE, Critic, NoiseSpec, log_prob, sample_action

log = logging.getLogger(__name__)


@dataclass
class PPOConfig:
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    gamma: float = 0.995
    gae_lambda: float = 0.95
    clip: float = 0.2
    max_grad_norm: float = 0.5
    lr: float = 3e-4
    lr_decay: bool = True
    epochs: int = 10
    num_minibatches: int = 4
    batch_size: int = 512  # env steps per update, summed over parallel envs
    total_timesteps: int = 300_000
    num_envs: int = 8
    # naive noise injection at the boss latent during RL (ablation)
    noise_injection: bool = False
    noise_sigma: float = 1.0

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("gae_lambda must be in [0, 1]")
        if not self.clip > 0:
            raise ValueError("clip must be positive")
        if self.batch_size % self.num_envs:
            raise ValueError("batch_size must be a multiple of num_envs")

    @property
    def steps_per_env(self) -> int:
        return self.batch_size // self.num_envs

    @property
    def num_updates(self) -> int:
        return self.total_timesteps // self.batch_size

    def lr_at(self, update: int) -> float:
        if not self.lr_decay:
            return self.lr
        return self.lr * (1.0 - update / self.num_updates)


@dataclass
class RolloutBuffer:
    obs: np.ndarray  # (T, P, obs_dim) normalized
    actions: np.ndarray  # (T, P, N)
    log_probs: np.ndarray  # (T, P)
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    last_values: np.ndarray  # (P,)
    means: np.ndarray
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self):
        return self.rewards.size

    def flat(self) -> dict[str, np.ndarray]:
        T, P = self.rewards.shape
        return {
            "obs": self.obs.reshape(T * P, -1),
            "actions": self.actions.reshape(T * P, -1),
            "log_probs": self.log_probs.reshape(-1),
            "values": self.values.reshape(-1),
            "advantages": self.advantages.reshape(-1),
            "returns": self.returns.reshape(-1),
        }


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("MEMO_THREADS", "1")))
    except ValueError:
        return 1


class VecEnv:
    """Parallel environments sharing one morphology and one observation normalizer."""

    def __init__(self, config: EnvConfig, num_envs: int, seed: int, normalizer: RunningNormalizer | None = None,
                 threads: int | None = None):
        self.envs = [Env(config.with_seed(seed * 1000 + i)) for i in range(num_envs)]
        self.layout = self.envs[0].layout
        self.normalizer = normalizer if normalizer is not None else RunningNormalizer(self.layout.total_dim)
        self.raw_obs = np.stack([e.reset() for e in self.envs])
        self.ep_return = np.zeros(num_envs)
        self.ep_reported = np.zeros(num_envs)
        self.finished_returns: deque = deque(maxlen=num_envs)
        self.finished_reported: deque = deque(maxlen=num_envs)
        self.episodes = 0
        self.threads = _worker_count() if threads is None else threads
        self._pool = ThreadPoolExecutor(self.threads) if self.threads > 1 else None

    def __len__(self):
        return len(self.envs)

    def step(self, actions: np.ndarray):
        def one(i):
            obs, r, done, info = self.envs[i].step(actions[i])
            if done:
                obs = self.envs[i].reset()
            return obs, r, done, info["reported_reward"]

        idx = range(len(self.envs))
        results = list(self._pool.map(one, idx)) if self._pool else [one(i) for i in idx]
        obs = np.stack([r[0] for r in results])
        rewards = np.array([r[1] for r in results])
        dones = np.array([r[2] for r in results])
        reported = np.array([r[3] for r in results])
        self.ep_return += rewards
        self.ep_reported += reported
        for i in np.flatnonzero(dones):
            self.finished_returns.append(self.ep_return[i])
            self.finished_reported.append(self.ep_reported[i])
            self.ep_return[i] = 0.0
            self.ep_reported[i] = 0.0
            self.episodes += 1
        self.raw_obs = obs
        return obs, rewards, dones

    def recent_means(self) -> tuple[float, float]:
        if not self.finished_returns:
            return math.nan, math.nan
        return float(np.mean(self.finished_returns)), float(np.mean(self.finished_reported))


def collect_rollouts(policy, critic: Critic, vec: VecEnv, T: int, rng, noise: NoiseSpec = NO_NOISE,
                     update_normalizer: bool = True) -> RolloutBuffer:
    rng = as_rng(rng)
    P = len(vec)
    N = policy.num_joints
    obs_dim = vec.layout.total_dim
    buf = RolloutBuffer(
        obs=np.zeros((T, P, obs_dim)), actions=np.zeros((T, P, N)), log_probs=np.zeros((T, P)),
        rewards=np.zeros((T, P)), values=np.zeros((T, P)), dones=np.zeros((T, P)),
        last_values=np.zeros(P), means=np.zeros((T, P, N)),
    )
    norm = vec.normalizer
    raw = vec.raw_obs
    for t in range(T):
        if update_normalizer:
            norm.update(raw)
        obs = norm.normalize(raw)
        eta = None
        if noise.active:
            eta = policy.sample_noise((P,), noise, rng)
        means = policy.forward(obs, eta)[0]
        actions, logp = sample_action(means, policy.logstd, rng)
        values = critic.forward(obs)[0]
        raw, rewards, dones = vec.step(actions)
        buf.obs[t], buf.actions[t], buf.log_probs[t], buf.means[t] = obs, actions, logp, means
        buf.values[t], buf.rewards[t], buf.dones[t] = values, rewards, dones
    buf.last_values = critic.forward(norm.normalize(raw))[0]
    return buf


def compute_gae(rewards, values, dones, last_values, gamma: float, lam: float):
    """GAE advantages and returns; arrays are (T,) or (T, P). Returns raw (unnormalized) advantages."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    next_value = np.asarray(last_values, dtype=np.float64)
    running = np.zeros_like(next_value)
    for t in reversed(range(T)):
        mask = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * mask - values[t]
        running = delta + gamma * lam * mask * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


def clipped_surrogate(ratio, adv, clip: float):
    """Per-sample min(r*A, clip(r)*A)."""
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv)


def ppo_loss_and_grads(policy, critic: Critic, batch: dict, config: PPOConfig, rng=None,
                       freeze_modules: bool = False):
    """Loss, metrics and named gradients for one minibatch (advantages used as given)."""
    obs, actions = batch["obs"], batch["actions"]
    adv, old_logp = batch["advantages"], batch["log_probs"]
    B = obs.shape[0]
    eta = None
    if config.noise_injection and getattr(policy, "kind", "") == "modular":
        eta = policy.sample_noise((B,), NoiseSpec(config.noise_sigma), rng)
    means, cache, _ = policy.forward(obs, eta)
    logstd = policy.logstd
    logp = log_prob(means, logstd, actions)
    ratio = np.exp(logp - old_logp)
    surr = clipped_surrogate(ratio, adv, config.clip)
    # gradient flows through whichever branch min() selected; the clipped branch is flat outside the range
    unclipped = ratio * adv <= np.clip(ratio, 1.0 - config.clip, 1.0 + config.clip) * adv
    inside = (ratio > 1.0 - config.clip) & (ratio < 1.0 + config.clip)
    dsurr_dr = np.where(unclipped | inside, adv, 0.0)
    dlogp = -(dsurr_dr * ratio) / B  # d(-mean surr)/d logp

    inv_var = np.exp(-2.0 * logstd)
    diff = actions - means
    d_means = dlogp[:, None] * diff * inv_var
    d_logstd = (dlogp[:, None] * (diff * diff * inv_var - 1.0)).sum(axis=0)
    ent = float(np.sum(logstd)) + logstd.size * (0.5 + 0.5 * math.log(2 * math.pi))
    d_logstd = d_logstd - config.entropy_coef

    values, vtape = critic.forward(obs)
    vdiff = values - batch["returns"]
    value_loss = float(np.mean(vdiff * vdiff))
    d_values = 2.0 * config.value_coef * vdiff / B

    loss = -float(np.mean(surr)) + config.value_coef * value_loss - config.entropy_coef * ent
    if not math.isfinite(loss):
        raise TrainingDiverged(f"PPO loss became {loss}")

    pgrads = policy.backward(cache, d_means, modules=not freeze_modules)
    pgrads.logstd = d_logstd
    grads = pgrads.named("pi.")
    grads.update(critic.backward(vtape, d_values).named_arrays("vf.net."))
    metrics = {
        "loss": loss,
        "surrogate": float(np.mean(surr)),
        "value_loss": value_loss,
        "entropy": ent,
        "clip_frac": float(np.mean(~inside)),
    }
    return loss, metrics, grads


def ppo_update(policy, critic: Critic, buffer: RolloutBuffer, config: PPOConfig, opt: AdamState,
               lr: float, rng, freeze_modules: bool = False) -> dict:
    rng = as_rng(rng)
    data = buffer.flat()
    adv = data["advantages"]
    data["advantages"] = (adv - adv.mean()) / (adv.std() + 1e-8)
    n = len(adv)
    mb = max(1, n // config.num_minibatches)
    params = policy.named_parameters("pi.", include_modules=not freeze_modules)
    params.update(critic.named_parameters("vf."))
    totals: dict[str, float] = {}
    count = 0
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        for start in range(0, n - mb + 1, mb):
            idx = perm[start:start + mb]
            batch = {k: v[idx] for k, v in data.items()}
            _, metrics, grads = ppo_loss_and_grads(policy, critic, batch, config, rng, freeze_modules)
            if freeze_modules:
                grads = {k: v for k, v in grads.items() if not k.startswith("pi.module.")}
            metrics["grad_norm"] = clip_by_global_norm(grads, config.max_grad_norm)
            if not math.isfinite(metrics["grad_norm"]):
                raise TrainingDiverged("non-finite gradient norm")
            adam_step(params, grads, opt, lr)
            policy.touch()
            critic.touch()
            for k, v in metrics.items():
                totals[k] = totals.get(k, 0.0) + v
            count += 1
    return {k: v / count for k, v in totals.items()}


@dataclass
class TrainResult:
    policy: object
    critic: Critic
    normalizer: RunningNormalizer
    metrics: list[dict]


def train_ppo(policy, env_config: EnvConfig, config: PPOConfig, seed: int, critic: Critic | None = None,
              normalizer: RunningNormalizer | None = None, freeze_modules: bool = False,
              callback=None, threads: int | None = None) -> TrainResult:
    """Collect -> GAE -> update until ``total_timesteps``; one metrics row per update."""
    ss = np.random.SeedSequence(seed)
    init_rng, act_rng, upd_rng = (np.random.default_rng(s) for s in ss.spawn(3))
    vec = VecEnv(env_config, config.num_envs, seed, normalizer, threads)
    if critic is None:
        critic = Critic(vec.layout.total_dim, policy.arch, init_rng)
    opt = AdamState()
    noise = NoiseSpec(config.noise_sigma) if config.noise_injection else NO_NOISE
    if getattr(policy, "kind", "") != "modular":
        noise = NO_NOISE
    T = config.steps_per_env
    rows = []
    frozen_before = policy.module_bytes() if freeze_modules else None
    t0 = time.perf_counter()
    for update in range(config.num_updates):
        buf = collect_rollouts(policy, critic, vec, T, act_rng, noise)
        buf.advantages, buf.returns = compute_gae(
            buf.rewards, buf.values, buf.dones, buf.last_values, config.gamma, config.gae_lambda)
        lr = config.lr_at(update)
        stats = ppo_update(policy, critic, buf, config, opt, lr, upd_rng, freeze_modules)
        mean_reward, reported = vec.recent_means()
        row = {
            "update": update,
            "env_steps": (update + 1) * config.batch_size,
            "mean_reward": mean_reward,
            "reported_reward": reported,
            "lr": lr,
            "wall_seconds": time.perf_counter() - t0,
            **stats,
        }
        rows.append(row)
        if callback is not None:
            callback(row)
        if update % 20 == 0:
            log.info("update %d steps %d reward %.3f reported %.3f", update, row["env_steps"], mean_reward, reported)
    if frozen_before is not None and policy.module_bytes() != frozen_before:
        raise AssertionError("frozen module parameters changed during training")
    return TrainResult(policy, critic, vec.normalizer, rows)


def evaluate_policy(policy, env_config: EnvConfig, normalizer: RunningNormalizer, episodes: int,
                    seed: int, reported: bool = True) -> float:
    """Mean episode return of the deterministic (mean-action) policy; normalizer is not updated."""
    totals = []
    for ep in range(episodes):
        env = Env(env_config)
        raw = env.reset(seed=seed * 100_003 + ep)
        total = 0.0
        done = False
        while not done:
            a = policy.mean_actions(normalizer.normalize(raw))
            raw, r, done, info = env.step(a)
            total += info["reported_reward"] if reported else r
        totals.append(total)
    return float(np.mean(totals))
