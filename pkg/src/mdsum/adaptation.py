"""Test-time summary adaptation with a calibrated misspecification gate.

Given a frozen decoder and an observed dataset, the pipeline is:

1. compute the observed summary s0 and the dataset's empirical mean
   embedding;
2. detect: compare ||mu(s0) - mu_obs||^2 against a threshold calibrated on
   clean held-out simulations (the (1 - alpha) quantile of the same
   statistic);
3. only if flagged, minimize ||mu(s) - mu_obs||^2 over s starting from s0
   and query the posterior engine at the minimizer instead.

The posterior engine and decoder are never modified; if the optimizer fails
to improve on s0 the original summary is kept. When s0 lies absurdly far
outside the training range (saturating the tanh regressor, hence zero
gradient), the optimizer is started from s0 clipped to a wide standardized
trust band; in-range summaries start exactly at s0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .inference import DecoderEmbedding, HoldoutRecords, decoder_embed, decoder_objective, posterior_sample, standardize
from .kernels import MeanEmbedding, mean_embedding
from .optimize import OptimOptions, gd_minimize, lbfgs_minimize
from .simulators import make_task


@dataclass
class AdaptationResult:
    s_initial: np.ndarray
    s_star: np.ndarray
    objective_initial: float
    objective_final: float
    detected: bool  # True when adaptation was triggered
    statistic: float
    threshold: float | None
    iterations: int
    converged: bool


def calibrate_threshold(dec: DecoderEmbedding, holdout: HoldoutRecords,
                        alpha: float = 0.05) -> float:
    """Set the detection threshold from clean held-out records.

    The statistic ||mu(s_i) - zbar_i||^2 is computed on every holdout record
    and the threshold is its (1 - alpha) empirical quantile (linear
    interpolation between order statistics). Stores the value on dec.
    """
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    n = holdout.summaries.shape[0]
    if n < 1:
        raise ValueError("holdout is empty")
    stats = np.empty(n)
    for i in range(n):
        pred = decoder_embed(dec, holdout.summaries[i]).values
        diff = pred - holdout.embeddings[i]
        stats[i] = diff @ diff
    tau = float(np.quantile(stats, 1.0 - alpha, method="linear"))
    dec.threshold = tau
    return tau


def detect(dec: DecoderEmbedding, s0, obs_embedding: MeanEmbedding):
    """Misspecification check at the observed summary.

    Returns (statistic, flagged). Requires a calibrated threshold.
    """
    if dec.threshold is None:
        raise RuntimeError("detection threshold not calibrated; run calibrate_threshold first")
    pred = decoder_embed(dec, s0).values
    diff = pred - obs_embedding.values
    statistic = float(diff @ diff)
    return statistic, bool(statistic > dec.threshold)


def _optimizer_start(dec: DecoderEmbedding, s0: np.ndarray) -> np.ndarray:
    u0 = standardize(s0, dec.summary_mean, dec.summary_std)
    if np.all(np.abs(u0) <= dec.clip_band):
        return s0  # in range: start exactly at the observed summary
    u_clipped = np.clip(u0, -dec.clip_band, dec.clip_band)
    return dec.summary_mean + dec.summary_std * u_clipped


def minimize_embedding_distance(dec: DecoderEmbedding, target, s0,
                                optimizer: str = "lbfgs",
                                opts: OptimOptions | None = None):
    """Minimize ||mu(s) - target||^2 from s0. Returns (s, iterations, converged)."""
    target = np.asarray(target, dtype=np.float64)
    s0 = np.asarray(s0, dtype=np.float64)
    objective = decoder_objective(dec, target)
    start = _optimizer_start(dec, s0)
    if optimizer == "lbfgs":
        return lbfgs_minimize(objective, start, opts)
    if optimizer == "gd":
        return gd_minimize(objective, start, opts)
    raise ValueError(f"unknown optimizer {optimizer!r} (expected 'lbfgs' or 'gd')")


def adapt(dec: DecoderEmbedding, observations, optimizer: str = "lbfgs",
          opts: OptimOptions | None = None, gate: bool = True,
          summary_fn=None) -> AdaptationResult:
    """Full query-side pipeline for one observed dataset.

    With the gate enabled (default), adaptation only runs when the detection
    statistic exceeds the calibrated threshold; otherwise the observed
    summary is returned untouched. With gate=False adaptation always runs
    (used by the consistency and stability checks). The summary function is
    taken from the decoder's task metadata unless summary_fn is given.
    """
    if summary_fn is None:
        if not dec.task_name:
            raise ValueError("decoder has no task metadata; pass summary_fn")
        summary_fn = make_task(dec.task_name, **dec.task_params).summary
    s0 = np.asarray(summary_fn(observations), dtype=np.float64)
    obs_emb = mean_embedding(dec.feature_map, observations)

    pred0 = decoder_embed(dec, s0).values
    diff0 = pred0 - obs_emb.values
    statistic = float(diff0 @ diff0)

    if gate:
        if dec.threshold is None:
            raise RuntimeError("gate requires a calibrated threshold; run calibrate_threshold")
        triggered = statistic > dec.threshold
    else:
        triggered = True

    if not triggered:
        return AdaptationResult(
            s_initial=s0, s_star=s0.copy(), objective_initial=statistic,
            objective_final=statistic, detected=False, statistic=statistic,
            threshold=dec.threshold, iterations=0, converged=True)

    s_star, iters, converged = minimize_embedding_distance(
        dec, obs_emb.values, s0, optimizer=optimizer, opts=opts)
    pred_star = decoder_embed(dec, s_star).values
    diff_star = pred_star - obs_emb.values
    final = float(diff_star @ diff_star)
    if not np.all(np.isfinite(s_star)) or not (final < statistic):
        # safe fallback: keep the observed summary
        s_star, final, converged = s0.copy(), statistic, False
    return AdaptationResult(
        s_initial=s0, s_star=s_star, objective_initial=statistic,
        objective_final=final, detected=True, statistic=statistic,
        threshold=dec.threshold, iterations=iters, converged=converged)


def query_robust_posterior(engine, result: AdaptationResult, n_samples: int,
                           rng: np.random.Generator) -> np.ndarray:
    """Posterior samples at the adapted summary."""
    return posterior_sample(engine, result.s_star, n_samples, rng)
