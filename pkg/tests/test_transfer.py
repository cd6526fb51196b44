import numpy as np
import pytest

from conftest import SMALL, make_mlp, make_modular
from memo.envs import EnvConfig, RunningNormalizer
from memo.errors import ArityMismatch, CorruptFile, TypeMismatch, VersionMismatch
from memo.policy import ArchSpec, Critic
from memo.ppo import PPOConfig
from memo.transfer import (
    FORMAT_VERSION, TransferPlan, assemble_transfer_policy, checkpoint_bytes, load_checkpoint, make_checkpoint,
    parse_checkpoint, run_transfer, save_checkpoint,
)

SRC = EnvConfig("crawler", (3, 3), init_noise=0.05)
TINY = PPOConfig(total_timesteps=512, num_envs=2, batch_size=64, epochs=2)


def checkpoint(seed=0, critic=True, arch=SMALL):
    pol = make_modular(arch=arch, seed=seed)
    norm = RunningNormalizer(pol.layout.total_dim).update(np.random.default_rng(seed).normal(size=(10, 37)))
    crit = Critic(37, arch, seed) if critic else None
    return make_checkpoint(pol, norm, SRC, crit, {"note": "x"}), pol


def test_round_trip_is_byte_exact(tmp_path):
    ck, pol = checkpoint()
    path = save_checkpoint(ck, tmp_path / "a.memockpt")
    back = load_checkpoint(path)
    assert checkpoint_bytes(back) == path.read_bytes()
    rebuilt = back.build_policy()
    obs = np.random.default_rng(1).normal(size=(4, 37))
    np.testing.assert_array_equal(rebuilt.mean_actions(obs), pol.mean_actions(obs))
    assert back.normalizer.count == ck.normalizer.count and back.meta == {"note": "x"}
    assert back.type_arity == dict(pol.partition.type_arity)
    mlp = make_mlp()
    ck2 = make_checkpoint(mlp, RunningNormalizer(37), SRC)
    np.testing.assert_array_equal(parse_checkpoint(checkpoint_bytes(ck2)).build_policy().mean_actions(obs),
                                  mlp.mean_actions(obs))


def test_load_errors(tmp_path):
    ck, _ = checkpoint()
    data = checkpoint_bytes(ck)
    with pytest.raises(CorruptFile):
        parse_checkpoint(data[:len(data) // 2])
    with pytest.raises(CorruptFile):
        parse_checkpoint(data[:10])
    with pytest.raises(CorruptFile):
        parse_checkpoint(b"NOTACKPT" + data[8:])
    bad = bytearray(data)
    bad[8:12] = (999).to_bytes(4, "little")
    with pytest.raises(VersionMismatch):
        parse_checkpoint(bytes(bad))
    flipped = bytearray(data)
    flipped[-100] ^= 1
    with pytest.raises(CorruptFile):
        parse_checkpoint(bytes(flipped))
    assert FORMAT_VERSION == 1


def test_assemble_onto_larger_crawler():
    arch = ArchSpec()
    ck, src = checkpoint(arch=arch, critic=False)
    target = EnvConfig("crawler", (5, 5))
    asm = assemble_transfer_policy(TransferPlan(ck, target), np.random.default_rng(0))
    pol = asm.policy
    assert pol.num_instances == 9 and asm.frozen
    assert pol.boss.widths[-1] == 288
    for k, nets in pol.modules.items():
        for a, b in zip(nets, src.modules[k]):
            assert a.to_bytes() == b.to_bytes()
    np.testing.assert_array_equal(pol.logstd, np.full(pol.num_joints, -1.0))
    assert asm.normalizer.count == 0  # different layout: fresh statistics


def test_finetune_all_reproduces_source():
    ck, src = checkpoint()
    asm = assemble_transfer_policy(TransferPlan(ck, SRC, "FinetuneAll", logstd_init=0.0))
    obs = np.random.default_rng(2).normal(size=(5, 37))
    np.testing.assert_array_equal(asm.policy.mean_actions(obs), src.mean_actions(obs))
    assert not asm.frozen and asm.normalizer.count == ck.normalizer.count
    with pytest.raises(ArityMismatch):
        assemble_transfer_policy(TransferPlan(ck, EnvConfig("crawler", (5, 5)), "FinetuneAll"))


def test_type_and_arity_mismatch():
    ck, _ = checkpoint()
    with pytest.raises(TypeMismatch):
        assemble_transfer_policy(TransferPlan(ck, EnvConfig("lifter", (3, 3))))
    mlp = make_checkpoint(make_mlp(), RunningNormalizer(37), SRC)
    with pytest.raises(TypeMismatch):
        assemble_transfer_policy(TransferPlan(mlp, SRC))
    missing = parse_checkpoint(checkpoint_bytes(ck))
    del missing.stores["module.1.0"]
    with pytest.raises(TypeMismatch):
        assemble_transfer_policy(TransferPlan(missing, SRC))
    broken = parse_checkpoint(checkpoint_bytes(ck))
    del broken.stores["module.0.1"]
    with pytest.raises(ArityMismatch):
        assemble_transfer_policy(TransferPlan(broken, SRC))


def test_frozen_modules_unchanged_by_training():
    ck, _ = checkpoint()
    before = {k: [s.to_bytes() for s in v] for k, v in ck.module_types().items()}
    cfg = PPOConfig(total_timesteps=10 * 64, num_envs=2, batch_size=64, epochs=2)
    res = run_transfer(TransferPlan(ck, EnvConfig("crawler", (5, 5), episode_len=32)), cfg, 0)
    assert len(res.metrics) == 10
    for k, nets in res.policy.modules.items():
        assert [s.to_bytes() for s in nets] == before[k]
    boss0 = assemble_transfer_policy(TransferPlan(ck, EnvConfig("crawler", (5, 5))),
                                     np.random.default_rng(np.random.SeedSequence([0, 17]))).policy.boss
    assert res.policy.boss.to_bytes() != boss0.to_bytes()


def test_broken_joint_target_runs():
    ck, _ = checkpoint()
    # 7 of the 14 joints of crawler(5,5) broken
    target = EnvConfig("crawler", (5, 5), broken_joints=frozenset(range(0, 14, 2)), episode_len=32)
    res = run_transfer(TransferPlan(ck, target), TINY, 0)
    assert all(np.isfinite(r["loss"]) for r in res.metrics)


def test_seeds_give_distinct_reproducible_curves():
    ck, _ = checkpoint()
    target = EnvConfig("crawler", (5, 5), episode_len=16)
    curves = [[r["mean_reward"] for r in run_transfer(TransferPlan(ck, target), TINY, s).metrics] for s in range(3)]
    assert len({tuple(c) for c in curves}) == 3
    again = [r["mean_reward"] for r in run_transfer(TransferPlan(ck, target), TINY, 1).metrics]
    assert again == curves[1]
