"""Actuator/latent Jacobians, one-sided Jacobi SVD, and normalized singular spectra."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .envs import Env, EnvConfig, RunningNormalizer
from .errors import NumericalError
from .nn import backward
from .policy import ModularPolicy

log = logging.getLogger(__name__)

HIST_BINS = 20
SMALL_VALUE = 0.1


def jacobian_wrt_latent(policy: ModularPolicy, normalized_obs) -> np.ndarray:
    """Exact d mean_n / d H_m at the given state(s); shape (N, |P|*D) or (B, N, |P|*D).

    Joint n only reads its own instance's slice of H, so every row is zero
    outside that slice. One reverse pass per role network with a unit output
    seed yields the nonzero blocks for all instances (and all states) at once.
    """
    obs = np.asarray(normalized_obs, dtype=np.float64)
    single = obs.ndim == 1
    O = obs[None, :] if single else obs
    B = O.shape[0]
    _, cache, _ = policy.forward(O)
    D, pjd = policy.D, policy.layout.per_joint_dim
    J = np.zeros((B, policy.num_joints, policy.num_instances, D))
    for g, tape in zip(policy.groups, cache.role_tapes):
        n = len(g.joint_ids)
        gin = backward(tape, np.ones((B * n, 1))).input.reshape(B, n, -1)[:, :, pjd:]
        J[:, g.joint_ids, g.instance_ids, :] = gin
    J = J.reshape(B, policy.num_joints, policy.num_instances * D)
    return J[0] if single else J


def _jacobi_columns(A: np.ndarray, tol: float, max_sweeps: int):
    """Orthogonalize the columns of a batch of tall matrices (B, m, n), m >= n, in place."""
    Bsz, m, n = A.shape
    V = np.broadcast_to(np.eye(n), (Bsz, n, n)).copy()
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                ap, aq = A[:, :, p], A[:, :, q]
                alpha = np.einsum("bi,bi->b", ap, ap)
                beta = np.einsum("bi,bi->b", aq, aq)
                gamma = np.einsum("bi,bi->b", ap, aq)
                active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
                if not active.any():
                    continue
                rotated = True
                g = np.where(active, gamma, 1.0)
                zeta = (beta - alpha) / (2.0 * g)
                t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                t = np.where(zeta == 0, 1.0, t)
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                c = np.where(active, c, 1.0)[:, None]
                s = np.where(active, s, 0.0)[:, None]
                new_p = c * ap - s * aq
                A[:, :, q] = s * ap + c * aq
                A[:, :, p] = new_p
                vp, vq = V[:, :, p].copy(), V[:, :, q]
                V[:, :, p] = c * vp - s * vq
                V[:, :, q] = s * vp + c * vq
        if not rotated:
            return A, V
    raise NumericalError(f"Jacobi SVD did not converge in {max_sweeps} sweeps")


def _check_finite(J):
    if not np.all(np.isfinite(J)):
        raise NumericalError("matrix has non-finite entries")


def batched_singular_values(Js, tol: float = 1e-15, max_sweeps: int = 60) -> np.ndarray:
    """Descending singular values of a stack of matrices (B, m, n) -> (B, min(m, n))."""
    Js = np.asarray(Js, dtype=np.float64)
    _check_finite(Js)
    A = Js if Js.shape[1] >= Js.shape[2] else np.swapaxes(Js, 1, 2)
    A, _ = _jacobi_columns(A.copy(), tol, max_sweeps)
    s = np.linalg.norm(A, axis=1)
    return -np.sort(-s, axis=1)


def _complete_basis(U: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace columns of U not in ``keep`` by an orthonormal complement of the kept ones."""
    if keep.all():
        return U
    m = U.shape[0]
    kept = U[:, keep]
    q, _ = np.linalg.qr(np.column_stack([kept, np.eye(m)]))
    out = U.copy()
    out[:, ~keep] = q[:, kept.shape[1]:kept.shape[1] + int((~keep).sum())]
    return out


def svd(J, tol: float = 1e-15, max_sweeps: int = 60):
    """Thin SVD by one-sided Jacobi: returns (s, U, Vt) with s descending and J = U diag(s) Vt."""
    J = np.asarray(J, dtype=np.float64)
    if J.ndim != 2:
        raise ValueError("svd expects a matrix")
    _check_finite(J)
    transpose = J.shape[0] < J.shape[1]
    A = (J.T if transpose else J).copy()[None]
    A, V = _jacobi_columns(A, tol, max_sweeps)
    A, V = A[0], V[0]
    s = np.linalg.norm(A, axis=0)
    order = np.argsort(-s, kind="stable")
    s, A, V = s[order], A[:, order], V[:, order]
    scale = s[0] if s.size and s[0] > 0 else 1.0
    keep = s > 1e-14 * scale
    U = np.zeros_like(A)
    U[:, keep] = A[:, keep] / s[keep]
    U = _complete_basis(U, keep)
    if transpose:
        return s, V, U.T
    return s, U, V.T


def normalized_spectrum(s: np.ndarray) -> np.ndarray:
    """Singular values divided by the largest (rows of a 2-D array handled independently)."""
    s = np.asarray(s, dtype=np.float64)
    top = s[..., :1]
    return np.divide(s, top, out=np.zeros_like(s), where=top > 0)


@dataclass
class SpectrumReport:
    per_state: np.ndarray  # (num_states, min(N, |P|*D)), each row descending with max 1
    bin_edges: np.ndarray
    counts: np.ndarray
    median: float
    frac_below: float  # fraction of pooled values below SMALL_VALUE
    skipped: int = 0  # states whose Jacobian was exactly zero (normalization undefined)

    @property
    def num_states(self) -> int:
        return self.per_state.shape[0]


def spectrum_report(per_state: np.ndarray, skipped: int = 0) -> SpectrumReport:
    pooled = per_state.reshape(-1)
    counts, edges = np.histogram(pooled, bins=HIST_BINS, range=(0.0, 1.0))
    if pooled.size == 0:
        return SpectrumReport(per_state, edges, counts, float("nan"), float("nan"), skipped)
    return SpectrumReport(per_state, edges, counts, float(np.median(pooled)),
                          float(np.mean(pooled < SMALL_VALUE)), skipped)


def trajectory_states(policy, env_config: EnvConfig, normalizer: RunningNormalizer, num_trajectories: int,
                      seed: int) -> np.ndarray:
    """Normalized states visited by deterministic-mean episodes of ``policy``."""
    env = Env(env_config)
    states = []
    for k in range(num_trajectories):
        raw = env.reset(seed=seed * 100_003 + k)
        done = False
        while not done:
            obs = normalizer.normalize(raw)
            states.append(obs)
            raw, _, done, _ = env.step(policy.mean_actions(obs))
    return np.array(states)


def spectra_over_trajectories(policy: ModularPolicy, env_config: EnvConfig, normalizer: RunningNormalizer,
                              num_trajectories: int, seed: int, rollout_policy=None,
                              chunk: int = 256) -> SpectrumReport:
    """Normalized Jacobian spectra of ``policy`` at states from ``rollout_policy`` (default: itself)."""
    states = trajectory_states(rollout_policy or policy, env_config, normalizer, num_trajectories, seed)
    rows, skipped = [], 0
    for start in range(0, len(states), chunk):
        s = batched_singular_values(jacobian_wrt_latent(policy, states[start:start + chunk]))
        nonzero = s[:, 0] > 0
        skipped += int((~nonzero).sum())
        rows.append(normalized_spectrum(s[nonzero]))
    if skipped:
        log.warning("skipped %d of %d states with a zero Jacobian", skipped, len(states))
    return spectrum_report(np.concatenate(rows), skipped)


def write_histogram_csv(path, report: SpectrumReport, label: str = "") -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["label", "bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(report.bin_edges[:-1], report.bin_edges[1:], report.counts):
            w.writerow([label, repr(float(lo)), repr(float(hi)), int(c)])


def write_spectra_csv(path, report: SpectrumReport) -> None:
    """Long format: one (state_index, rank, value) row per normalized singular value."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["state_index", "rank", "value"])
        for i, row in enumerate(report.per_state):
            for k, v in enumerate(row):
                w.writerow([i, k, repr(float(v))])
