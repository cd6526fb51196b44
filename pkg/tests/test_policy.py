import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import SMALL, fd_grad, make_mlp, make_modular, max_rel_err
from memo.errors import DimensionError
from memo.policy import (
    NO_NOISE, ArchSpec, Critic, NoiseSpec, critic_forward, entropy, log_prob, modular_forward, module_forward,
    sample_action, split_latent,
)


def obs_batch(policy, n=3, seed=0):
    return np.random.default_rng(seed).normal(size=(n, policy.layout.total_dim))


def test_shapes(modular):
    o = obs_batch(modular)
    means, cache, H = modular.forward(o)
    assert means.shape == (3, 8) and H.shape == (3, 5 * SMALL.D)
    m1, _, H1 = modular.forward(o[0])
    assert m1.shape == (8,) and H1.shape == (5 * SMALL.D,)
    np.testing.assert_allclose(m1, means[0], atol=1e-14)
    with pytest.raises(DimensionError):
        modular.forward(np.zeros(5))


def test_boss_dims_follow_partition():
    pol = make_modular((5, 5), arch=ArchSpec(), random=False)
    assert pol.boss.out_dim == 9 * 32
    assert pol.boss.widths == [5 + 4 * 14, 32, 288]


def test_zero_noise_is_bit_exact(modular):
    o = obs_batch(modular)
    base = modular.forward(o)[0]
    zero = modular.forward(o, np.zeros((3, modular.num_instances * modular.D)))[0]
    assert base.tobytes() == zero.tobytes()
    a = modular_forward(modular, o, NoiseSpec(0.0), np.random.default_rng(1))
    b = modular_forward(modular, o, NO_NOISE, np.random.default_rng(1))
    assert a[0].tobytes() == b[0].tobytes() == base.tobytes()


def test_noise_changes_outputs(modular):
    o = obs_batch(modular)
    means, H, eta, _ = modular_forward(modular, o, NoiseSpec(1.0), np.random.default_rng(0))
    assert eta.shape == H.shape and np.any(eta != 0)
    assert not np.allclose(means, modular.forward(o)[0])


def test_information_asymmetry(modular):
    # with the latent held fixed, a module only reacts to its own joints' local features
    o = obs_batch(modular, 1)[0]
    H = modular.forward(o)[2]
    base = modular.modules_forward(H, o)[0]
    inst_of = modular.partition.instance_of_joint()
    for j in range(modular.num_joints):
        o2 = o.copy()
        o2[modular.layout.local_indices(j)] += 1.0
        o2[:modular.layout.global_dim] += 1.0  # global features are invisible to modules
        out = modular.modules_forward(H, o2)[0]
        changed = {n for n in range(modular.num_joints) if out[n] != base[n]}
        assert changed == {j}
        assert all(inst_of[n] == inst_of[j] for n in changed)


def test_type_sharing_gives_identical_outputs(modular):
    legs = modular.partition.instances_of(0)
    o = np.zeros(modular.layout.total_dim)
    rng = np.random.default_rng(3)
    local = rng.normal(size=8)
    for inst in legs:
        o[modular.layout.module_slices[inst.instance_id]] = local
    H = np.tile(rng.normal(size=modular.D), modular.num_instances)
    out = modular.modules_forward(H, o)[0]
    for inst in legs[1:]:
        assert out[list(inst.joint_ids)].tobytes() == out[list(legs[0].joint_ids)].tobytes()


def test_reference_module_forward(modular):
    o = obs_batch(modular, 1)[0]
    means, _, H = modular.forward(o)
    slices = split_latent(H, modular.partition)
    for inst in modular.partition.instances:
        ref = module_forward(modular.modules[inst.type_id], slices[inst.instance_id],
                             o[modular.layout.module_slices[inst.instance_id]])
        np.testing.assert_allclose(ref, means[list(inst.joint_ids)], atol=1e-14)


def test_split_latent_errors():
    with pytest.raises(DimensionError):
        split_latent(np.zeros(10), 3)
    assert len(split_latent(np.zeros(12), 3)) == 3


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 1000))
def test_modular_gradients_match_fd(seed):
    pol = make_modular(seed=seed)
    o = obs_batch(pol, 2, seed)
    eta = np.random.default_rng(seed + 1).normal(size=(2, pol.num_instances * pol.D))
    c = np.random.default_rng(seed + 2).normal(size=(2, pol.num_joints))
    cH = np.random.default_rng(seed + 3).normal(size=eta.shape)

    def loss():
        means, _, H = pol.forward(o, eta)
        return float(np.sum(c * means) + np.sum(cH * H))

    _, cache, _ = pol.forward(o, eta)
    g = pol.backward(cache, c, d_H_extra=cH).named()
    params = pol.named_parameters()
    for name in ["boss.W0", "boss.b1", "module.0.0.W0", "module.0.1.W2", "module.1.0.b0"]:
        assert max_rel_err(g[name], fd_grad(loss, params[name])) < 1e-4, name


def test_latent_gradient_matches_fd(modular):
    o = obs_batch(modular, 1)[0]
    H = modular.forward(o)[2].copy()
    c = np.random.default_rng(5).normal(size=modular.num_joints)
    _, cache, _ = modular.forward(o)
    dH = modular.backward(cache, c).H

    def loss():
        return float(c @ modular.modules_forward(H, o)[0])

    assert max_rel_err(dH, fd_grad(loss, H)) < 1e-4


def test_mlp_policy_gradients():
    pol = make_mlp()
    o = np.random.default_rng(0).normal(size=(3, pol.obs_dim))
    c = np.random.default_rng(1).normal(size=(3, pol.num_joints))

    def loss():
        return float(np.sum(c * pol.forward(o)[0]))

    g = pol.backward(pol.forward(o)[1], c).named()
    for name, p in pol.named_parameters().items():
        if name != "logstd":
            assert max_rel_err(g[name], fd_grad(loss, p)) < 1e-4


def test_mlp_widths():
    pol = make_mlp(arch=ArchSpec(), random=False)
    assert pol.net.widths == [37, 32, 5 * 32, 8]


def test_critic():
    c = Critic(37, SMALL, 0)
    assert c.net.widths == [37, 4, 4, 1]
    assert isinstance(critic_forward(c, np.zeros(37)), float)
    assert critic_forward(c, np.zeros((4, 37))).shape == (4,)


def test_gaussian_head():
    assert log_prob(np.zeros(1), np.zeros(1), np.ones(1)) == pytest.approx(-1.4189385, abs=1e-7)
    assert log_prob(np.zeros(1), np.zeros(1), np.zeros(1)) == pytest.approx(-0.9189385, abs=1e-7)
    assert entropy(np.zeros(2)) == pytest.approx(2 * 1.4189385, abs=1e-7)
    means = np.array([[0.2, -0.1], [1.0, 0.0]])
    logstd = np.array([-0.5, 0.3])
    a, lp = sample_action(means, logstd, np.random.default_rng(0))
    assert a.shape == means.shape
    np.testing.assert_allclose(lp, log_prob(means, logstd, a), atol=1e-14)
    # independent oracle via the normal density
    sd = np.exp(logstd)
    dens = np.prod(np.exp(-0.5 * ((a - means) / sd) ** 2) / (sd * np.sqrt(2 * np.pi)), axis=1)
    np.testing.assert_allclose(lp, np.log(dens), atol=1e-12)


def test_lifter_policy_runs():
    pol = make_modular((2, 4), env_kind="lifter")
    assert pol.num_instances == 5 and pol.num_joints == 10
    assert pol.forward(np.zeros(pol.layout.total_dim))[0].shape == (10,)
