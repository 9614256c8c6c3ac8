"""Benchmark simulators and their hand-crafted summary statistics.

Each task bundles a prior, a simulator producing one dataset (N rows, one
row per observation or trajectory), and a fixed summary function. simulate
validates that the parameter lies in the prior support; simulate_raw skips
the check so posterior-predictive resampling can probe out-of-prior
parameters without crashing. Trajectory values are clipped at +-1e30 to
keep explosive off-prior dynamics finite.

All randomness flows through numpy Generators; build_training_pool derives
one child stream per dataset index so pools are reproducible under any
execution order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .util import derive_rng

TRAJECTORY_CLIP = 1e30


@dataclass
class TaskSpec:
    name: str
    theta_dim: int
    obs_dim: int  # length of one dataset row
    n_obs: int  # rows per dataset
    summary_dim: int
    params: dict
    prior_sample: Callable
    simulate: Callable  # (theta, rng) -> (n_obs, obs_dim), validates support
    simulate_raw: Callable  # same, without the support check
    summary: Callable  # (dataset) -> (summary_dim,)


@dataclass
class TrainingPool:
    task_name: str
    params: dict
    master_seed: int
    thetas: np.ndarray  # (M, theta_dim)
    datasets: np.ndarray  # (M, n_obs, obs_dim)
    summaries: np.ndarray  # (M, summary_dim)


def _check_dataset(data, n_obs, obs_dim, name):
    x = np.asarray(data, dtype=np.float64)
    if x.shape != (n_obs, obs_dim):
        raise ValueError(f"{name} expects data of shape ({n_obs}, {obs_dim}), got {x.shape}")
    return x


# ---------------------------------------------------------------------------
# Gaussian location
# ---------------------------------------------------------------------------

def gaussian_task(d: int = 2, n_obs: int = 100) -> TaskSpec:
    """theta ~ N(0, I_d); observations x_i ~ N(theta, I_d); summary = sample mean."""
    if d < 1 or n_obs < 1:
        raise ValueError(f"d and n_obs must be positive, got {d}, {n_obs}")

    def prior_sample(rng):
        return rng.standard_normal(d)

    def simulate(theta, rng):
        t = np.asarray(theta, dtype=np.float64)
        if t.shape != (d,):
            raise ValueError(f"theta must have shape ({d},), got {t.shape}")
        return t + rng.standard_normal((n_obs, d))

    def summary(data):
        return _check_dataset(data, n_obs, d, "gaussian_task").mean(axis=0)

    return TaskSpec(
        name="gaussian", theta_dim=d, obs_dim=d, n_obs=n_obs, summary_dim=d,
        params={"d": d, "n_obs": n_obs},
        prior_sample=prior_sample, simulate=simulate, simulate_raw=simulate,
        summary=summary,
    )


def gaussian_posterior(summary: np.ndarray, n_obs: int):
    """Conjugate posterior for the Gaussian location task.

    With a standard normal prior and unit observation noise the posterior is
    N(n/(n+1) * xbar, 1/(n+1) * I).
    """
    s = np.asarray(summary, dtype=np.float64)
    if n_obs < 1:
        raise ValueError(f"n_obs must be positive, got {n_obs}")
    mean = (n_obs / (n_obs + 1.0)) * s
    var = 1.0 / (n_obs + 1.0)
    return mean, var


# ---------------------------------------------------------------------------
# Gaussian linear factor model
# ---------------------------------------------------------------------------

def factor_task(obs_dim: int = 5, n_obs: int = 100,
                rng: np.random.Generator | None = None,
                loading: np.ndarray | None = None) -> TaskSpec:
    """x_i ~ N(A theta, I_D) with a frozen (D, 2) loading matrix A.

    A is drawn once (i.i.d. standard normal, redrawn while nearly singular)
    and stored in params so the task can be reconstructed exactly. The
    summary is the least-squares readout pinv(A) @ xbar.
    """
    if obs_dim < 2 or n_obs < 1:
        raise ValueError(f"obs_dim must be >= 2 and n_obs positive, got {obs_dim}, {n_obs}")
    if loading is None:
        if rng is None:
            raise ValueError("factor_task needs either rng or an explicit loading matrix")
        while True:
            loading = rng.standard_normal((obs_dim, 2))
            if np.linalg.svd(loading, compute_uv=False).min() >= 1e-8:
                break
    a = np.asarray(loading, dtype=np.float64)
    if a.shape != (obs_dim, 2):
        raise ValueError(f"loading must have shape ({obs_dim}, 2), got {a.shape}")
    if np.linalg.svd(a, compute_uv=False).min() < 1e-8:
        raise ValueError("loading matrix is numerically singular")
    pinv = np.linalg.pinv(a)

    def prior_sample(rng):
        return rng.standard_normal(2)

    def simulate(theta, rng):
        t = np.asarray(theta, dtype=np.float64)
        if t.shape != (2,):
            raise ValueError(f"theta must have shape (2,), got {t.shape}")
        return a @ t + rng.standard_normal((n_obs, obs_dim))

    def summary(data):
        xbar = _check_dataset(data, n_obs, obs_dim, "factor_task").mean(axis=0)
        return pinv @ xbar

    return TaskSpec(
        name="factor", theta_dim=2, obs_dim=obs_dim, n_obs=n_obs, summary_dim=2,
        params={"obs_dim": obs_dim, "n_obs": n_obs, "loading": a.tolist()},
        prior_sample=prior_sample, simulate=simulate, simulate_raw=simulate,
        summary=summary,
    )


# ---------------------------------------------------------------------------
# Ornstein-Uhlenbeck process
# ---------------------------------------------------------------------------

OUP_X0 = 10.0
OUP_SIGMA2 = 0.1
OUP_BOUNDS = ((0.0, 2.0), (-2.0, 2.0))


def simulate_oup_trajectories(theta, n_traj: int, horizon: int, rng: np.random.Generator,
                              x0: float = OUP_X0, sigma2: float = OUP_SIGMA2,
                              dt: float = 1.0) -> np.ndarray:
    """Euler-Maruyama paths of dX = th1 (exp(th2) - X) dt + sigma dW.

    Records X_1 .. X_horizon (the fixed X_0 is not part of the data).
    """
    th1, th2 = float(theta[0]), float(theta[1])
    sigma = np.sqrt(sigma2)
    sqrt_dt = np.sqrt(dt)
    level = np.exp(th2)
    x = np.full(n_traj, x0)
    out = np.empty((n_traj, horizon))
    for t in range(horizon):
        x = x + th1 * (level - x) * dt + sigma * sqrt_dt * rng.standard_normal(n_traj)
        np.clip(x, -TRAJECTORY_CLIP, TRAJECTORY_CLIP, out=x)
        out[:, t] = x
    return out


def _lag1_corr(a: np.ndarray, b: np.ndarray) -> float:
    # Pearson correlation, 0 when either side is degenerate
    sa, sb = a.std(), b.std()
    if sa == 0.0 or sb == 0.0:
        return 0.0
    c = float(np.mean((a - a.mean()) * (b - b.mean())) / (sa * sb))
    return c if np.isfinite(c) else 0.0


def oup_task(n_obs: int = 100, horizon: int = 25) -> TaskSpec:
    """OU process with prior theta ~ U[0,2] x U[-2,2], sigma^2 = 0.1, X0 = 10.

    Summary: grand mean, grand variance, and the lag-1 autocorrelation of
    the pooled (X_t, X_t+1) pairs across the whole dataset.
    """
    if n_obs < 1 or horizon < 2:
        raise ValueError(f"n_obs must be positive and horizon >= 2, got {n_obs}, {horizon}")
    (lo1, hi1), (lo2, hi2) = OUP_BOUNDS

    def prior_sample(rng):
        return rng.uniform([lo1, lo2], [hi1, hi2])

    def simulate_raw(theta, rng):
        return simulate_oup_trajectories(theta, n_obs, horizon, rng)

    def simulate(theta, rng):
        t = np.asarray(theta, dtype=np.float64)
        if t.shape != (2,):
            raise ValueError(f"theta must have shape (2,), got {t.shape}")
        if not (lo1 <= t[0] <= hi1 and lo2 <= t[1] <= hi2):
            raise ValueError(f"theta {t.tolist()} outside the prior box {OUP_BOUNDS}")
        return simulate_raw(t, rng)

    def summary(data):
        x = _check_dataset(data, n_obs, horizon, "oup_task")
        s1 = float(x.mean())
        s2 = float(x.var())
        s3 = _lag1_corr(x[:, :-1].ravel(), x[:, 1:].ravel())
        return np.array([s1, s2, s3])

    return TaskSpec(
        name="oup", theta_dim=2, obs_dim=horizon, n_obs=n_obs, summary_dim=3,
        params={"n_obs": n_obs, "horizon": horizon},
        prior_sample=prior_sample, simulate=simulate, simulate_raw=simulate_raw,
        summary=summary,
    )


# ---------------------------------------------------------------------------
# Stochastic SIR
# ---------------------------------------------------------------------------

SIR_POPULATION = 10_000.0
SIR_SIGMA = 0.05
SIR_ETA = 0.05
SIR_INIT = (0.999, 0.001, 0.0)
SIR_RATE_MAX = 0.5


def simulate_sir_trajectories(theta, n_traj: int, horizon: int, rng: np.random.Generator,
                              sigma: float = SIR_SIGMA, eta: float = SIR_ETA,
                              dt: float = 1.0, return_compartments: bool = False):
    """Daily infection counts from an SIR model with a diffusing contact rate.

    The reproduction number follows dR0 = eta (b/g - R0) dt + sigma
    sqrt(|R0|) dW, reflected at zero and started at its reversion level b/g.
    The effective transmission rate is g * R0. Compartments are clipped to
    [0, 1] after every Euler step; counts are population * I_t for
    t = 1 .. horizon.
    """
    beta, gamma = float(theta[0]), float(theta[1])
    r0_bar = beta / gamma if gamma != 0.0 else 0.0
    sqrt_dt = np.sqrt(dt)
    s = np.full(n_traj, SIR_INIT[0])
    i = np.full(n_traj, SIR_INIT[1])
    r = np.full(n_traj, SIR_INIT[2])
    r0 = np.full(n_traj, r0_bar)
    out = np.empty((n_traj, horizon))
    pre_clip_sums = np.empty((n_traj, horizon))
    for t in range(horizon):
        beta_eff = gamma * r0
        flow_si = beta_eff * s * i * dt
        flow_ir = gamma * i * dt
        noise = rng.standard_normal(n_traj)
        r0 = np.abs(r0 + eta * (r0_bar - r0) * dt + sigma * np.sqrt(np.abs(r0)) * sqrt_dt * noise)
        s_new = s - flow_si
        i_new = i + flow_si - flow_ir
        r_new = r + flow_ir
        pre_clip_sums[:, t] = s_new + i_new + r_new
        s = np.clip(s_new, 0.0, 1.0)
        i = np.clip(i_new, 0.0, 1.0)
        r = np.clip(r_new, 0.0, 1.0)
        out[:, t] = SIR_POPULATION * i
    if return_compartments:
        return out, (s, i, r), pre_clip_sums
    return out


def _sir_trajectory_summary(x: np.ndarray) -> np.ndarray:
    total = x.sum()
    if total > 0.0:
        half_day = int(np.searchsorted(np.cumsum(x), 0.5 * total))
    else:
        half_day = 0
    return np.array([
        np.log1p(x.mean()),
        np.log1p(np.median(x)),
        np.log1p(x.max()),
        np.log1p(np.argmax(x)),
        np.log1p(half_day),
        _lag1_corr(x[:-1], x[1:]),
    ])


def sir_task(n_obs: int = 100, horizon: int = 365) -> TaskSpec:
    """Stochastic SIR with prior (beta, gamma) uniform over 0 < gamma < beta < 0.5."""
    if n_obs < 1 or horizon < 2:
        raise ValueError(f"n_obs must be positive and horizon >= 2, got {n_obs}, {horizon}")

    def prior_sample(rng):
        while True:
            beta, gamma = rng.uniform(0.0, SIR_RATE_MAX, size=2)
            if 0.0 < gamma < beta < SIR_RATE_MAX:
                return np.array([beta, gamma])

    def simulate_raw(theta, rng):
        return simulate_sir_trajectories(theta, n_obs, horizon, rng)

    def simulate(theta, rng):
        t = np.asarray(theta, dtype=np.float64)
        if t.shape != (2,):
            raise ValueError(f"theta must have shape (2,), got {t.shape}")
        if not (0.0 < t[1] < t[0] < SIR_RATE_MAX):
            raise ValueError(
                f"theta {t.tolist()} violates the prior constraint 0 < gamma < beta < {SIR_RATE_MAX}"
            )
        return simulate_raw(t, rng)

    def summary(data):
        x = _check_dataset(data, n_obs, horizon, "sir_task")
        rows = np.stack([_sir_trajectory_summary(row) for row in x])
        return rows.mean(axis=0)

    return TaskSpec(
        name="sir", theta_dim=2, obs_dim=horizon, n_obs=n_obs, summary_dim=6,
        params={"n_obs": n_obs, "horizon": horizon},
        prior_sample=prior_sample, simulate=simulate, simulate_raw=simulate_raw,
        summary=summary,
    )


# ---------------------------------------------------------------------------
# Task registry and training pools
# ---------------------------------------------------------------------------

def make_task(name: str, **params) -> TaskSpec:
    """Reconstruct a task from its name and serialized params."""
    if name == "gaussian":
        return gaussian_task(d=params.get("d", 2), n_obs=params.get("n_obs", 100))
    if name == "factor":
        if "loading" in params and params["loading"] is not None:
            return factor_task(obs_dim=params.get("obs_dim", 5),
                               n_obs=params.get("n_obs", 100),
                               loading=np.asarray(params["loading"]))
        raise ValueError("factor task params must carry the frozen loading matrix")
    if name == "oup":
        return oup_task(n_obs=params.get("n_obs", 100), horizon=params.get("horizon", 25))
    if name == "sir":
        return sir_task(n_obs=params.get("n_obs", 100), horizon=params.get("horizon", 365))
    raise ValueError(f"unknown task {name!r}")


def build_training_pool(task: TaskSpec, n_datasets: int, master_seed: int) -> TrainingPool:
    """Simulate (theta_i, dataset_i, summary_i) triples for i < n_datasets.

    Each record uses its own RNG stream derived from (master_seed, index),
    so the pool is identical no matter how the loop is chunked.
    """
    if n_datasets < 1:
        raise ValueError(f"n_datasets must be positive, got {n_datasets}")
    thetas = np.empty((n_datasets, task.theta_dim))
    datasets = np.empty((n_datasets, task.n_obs, task.obs_dim))
    summaries = np.empty((n_datasets, task.summary_dim))
    for i in range(n_datasets):
        rng = derive_rng(master_seed, "pool", i)
        theta = task.prior_sample(rng)
        data = task.simulate(theta, rng)
        thetas[i] = theta
        datasets[i] = data
        summaries[i] = task.summary(data)
    return TrainingPool(task_name=task.name, params=dict(task.params),
                        master_seed=master_seed, thetas=thetas,
                        datasets=datasets, summaries=summaries)


def save_pool(pool: TrainingPool, path) -> None:
    header = {
        "task": pool.task_name,
        "params": pool.params,
        "n_datasets": int(pool.thetas.shape[0]),
        "n_obs": int(pool.datasets.shape[1]),
        "obs_dim": int(pool.datasets.shape[2]),
        "summary_dim": int(pool.summaries.shape[1]),
        "master_seed": pool.master_seed,
    }
    np.savez_compressed(path, header=json.dumps(header),
                        thetas=pool.thetas, datasets=pool.datasets,
                        summaries=pool.summaries)


def load_pool(path) -> TrainingPool:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        return TrainingPool(
            task_name=header["task"], params=header["params"],
            master_seed=header["master_seed"], thetas=z["thetas"],
            datasets=z["datasets"], summaries=z["summaries"],
        )
