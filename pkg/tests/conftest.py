import numpy as np
import pytest

from memo.envs import EnvConfig, env_layout
from memo.policy import ArchSpec, ModularPolicy, build_mlp_policy

SMALL = ArchSpec(D=4, module_hidden=5, module_layers=2, boss_layers=2, critic_layers=2)


def randomize(policy, seed=0, scale=0.5):
    """Give every parameter (biases and the tiny output layers too) generic random values."""
    rng = np.random.default_rng(seed)
    for store in policy.stores().values():
        for w in store.weights + store.biases:
            w[:] = rng.normal(scale=scale, size=w.shape)
        store.touch()
    policy.logstd[:] = rng.normal(scale=0.3, size=policy.logstd.shape)
    return policy


def make_modular(counts=(3, 3), env_kind="crawler", arch=SMALL, seed=0, random=True):
    graph, partition, layout = env_layout(EnvConfig(env_kind, counts))
    pol = ModularPolicy(graph, partition, layout, arch, seed)
    return randomize(pol, seed + 100) if random else pol


def make_mlp(counts=(3, 3), env_kind="crawler", arch=SMALL, seed=0, random=True):
    _, partition, layout = env_layout(EnvConfig(env_kind, counts))
    pol = build_mlp_policy(layout, partition, arch, seed)
    return randomize(pol, seed + 100) if random else pol


def fd_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        fp = f()
        x[idx] = old - eps
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


def fd_grad_4th(f, x, h=1e-3):
    """Fourth-order central differences; less round-off than fd_grad on entries near zero."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        vals = []
        for step in (2, 1, -1, -2):
            x[idx] = old + step * h
            vals.append(f())
        x[idx] = old
        g[idx] = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
    return g


def max_rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(1e-6, np.maximum(np.abs(a), np.abs(b)))))


@pytest.fixture
def modular():
    return make_modular()


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        name, passed, detail = mod.RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if passed else 'FAIL'} {name}: {detail}")
