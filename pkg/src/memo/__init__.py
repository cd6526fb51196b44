"""Modular boss/worker policies pretrained with latent noise injection, and their transfer to new morphologies."""

from .envs import Env, EnvConfig, RunningNormalizer
from .errors import MemoError
from .imitation import ILConfig, LossMode, train_il
from .morphology import build_crawler, build_lifter, build_morphology, validate_partition
from .policy import ArchSpec, Critic, MLPPolicy, ModularPolicy, NoiseSpec
from .ppo import PPOConfig, train_ppo
from .transfer import TransferMode, TransferPlan, load_checkpoint, save_checkpoint

__all__ = [
    "ArchSpec", "Critic", "Env", "EnvConfig", "ILConfig", "LossMode", "MLPPolicy", "MemoError", "ModularPolicy",
    "NoiseSpec", "PPOConfig", "RunningNormalizer", "TransferMode", "TransferPlan", "build_crawler",
    "build_lifter", "build_morphology", "load_checkpoint", "save_checkpoint", "train_il", "train_ppo",
    "validate_partition",
]
