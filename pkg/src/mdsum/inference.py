"""Amortized inference components: embedding decoder and posterior engines.

The decoder is an MLP regressing a dataset's summary statistic onto the
empirical mean of its random Fourier features, trained once on the
simulation pool and frozen afterwards. Posterior engines answer queries
q(theta | s): either the conjugate closed form for the Gaussian location
task or a trained mixture density network.

Both artifacts serialize to JSON with bit-exact float payloads, so content
hashes can certify that test-time adaptation never touches them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .kernels import FeatureMap, MeanEmbedding, feature_map_from_payload, feature_map_to_payload, rff_matrix
from .nn import (Mlp, TrainOptions, TrainReport, fit_mlp, forward_batch, mlp_forward,
                 mlp_from_payload, mlp_init, mlp_input_gradient, mlp_to_payload)
from .simulators import TrainingPool, gaussian_posterior
from .util import canonical_json, check_finite, decode_floats, encode_floats, sha256_hex

_CHUNK_ELEMS = 2 ** 24  # cap on rows * K per feature chunk, keeps peaks ~130 MB
_STD_FLOOR = 1e-12

DEFAULT_HIDDEN = (256, 256)
DEFAULT_CLIP_BAND = 8.0
LOGSIG_LO = -7.0
LOGSIG_HI = 3.0


@dataclass
class DecoderEmbedding:
    feature_map: FeatureMap
    regressor: Mlp
    summary_mean: np.ndarray  # (d_s,)
    summary_std: np.ndarray  # (d_s,)
    threshold: float | None = None  # set by calibrate_threshold
    task_name: str = ""
    task_params: dict = field(default_factory=dict)
    clip_band: float = DEFAULT_CLIP_BAND


@dataclass
class HoldoutRecords:
    summaries: np.ndarray  # (H, d_s)
    embeddings: np.ndarray  # (H, K)


@dataclass
class AnalyticGaussianEngine:
    n_obs: int
    dim: int


@dataclass
class MdnEngine:
    mlp: Mlp
    n_components: int
    theta_dim: int
    input_mean: np.ndarray
    input_std: np.ndarray
    logsig_lo: float = LOGSIG_LO
    logsig_hi: float = LOGSIG_HI


PosteriorEngine = AnalyticGaussianEngine | MdnEngine


def pool_feature_means(fm: FeatureMap, datasets: np.ndarray) -> np.ndarray:
    """Empirical mean embedding of every dataset in a (M, N, d) stack."""
    m, n_obs, obs_dim = datasets.shape
    per = max(1, _CHUNK_ELEMS // (fm.n_features * n_obs))
    out = np.empty((m, fm.n_features))
    for start in range(0, m, per):
        chunk = datasets[start:start + per]
        flat = chunk.reshape(-1, obs_dim)
        feats = rff_matrix(fm, flat).reshape(chunk.shape[0], n_obs, fm.n_features)
        out[start:start + per] = feats.mean(axis=1)
    return out


def standardize(values: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (values - mean) / std


def train_decoder(pool: TrainingPool, fm: FeatureMap, rng: np.random.Generator,
                  opts: TrainOptions | None = None, holdout_frac: float = 0.05,
                  hidden=DEFAULT_HIDDEN):
    """Fit the summary -> mean-embedding regressor on a simulation pool.

    A holdout_frac slice of the pool is reserved before training and
    returned for threshold calibration; the regressor never sees it.
    Returns (DecoderEmbedding, HoldoutRecords, TrainReport).
    """
    if not (0.0 < holdout_frac < 1.0):
        raise ValueError(f"holdout_frac must lie in (0, 1), got {holdout_frac}")
    if opts is None:
        opts = TrainOptions()
    m = pool.summaries.shape[0]
    n_hold = max(1, int(round(holdout_frac * m)))
    if n_hold >= m - 1:
        raise ValueError(f"holdout leaves too few training records (M={m})")
    embeddings = pool_feature_means(fm, pool.datasets)
    perm = rng.permutation(m)
    hold_idx, train_idx = perm[:n_hold], perm[n_hold:]

    s_train = pool.summaries[train_idx]
    z_train = embeddings[train_idx]
    mean = s_train.mean(axis=0)
    std = np.maximum(s_train.std(axis=0), _STD_FLOOR)

    mlp = mlp_init([pool.summaries.shape[1], *hidden, fm.n_features], rng)
    report = fit_mlp(mlp, standardize(s_train, mean, std), z_train, opts, rng)

    dec = DecoderEmbedding(feature_map=fm, regressor=mlp, summary_mean=mean,
                           summary_std=std, task_name=pool.task_name,
                           task_params=dict(pool.params))
    holdout = HoldoutRecords(summaries=pool.summaries[hold_idx],
                             embeddings=embeddings[hold_idx])
    return dec, holdout, report


def decoder_embed(dec: DecoderEmbedding, s) -> MeanEmbedding:
    """Model-predicted mean embedding for a summary (sample_count 0)."""
    u = standardize(np.asarray(s, dtype=np.float64), dec.summary_mean, dec.summary_std)
    return MeanEmbedding(values=mlp_forward(dec.regressor, u), sample_count=0)


def decoder_objective(dec: DecoderEmbedding, target: np.ndarray):
    """phi(s) = ||mu(s) - target||^2 with its exact gradient in s.

    Returns a callable suitable for the optimize module. The gradient chains
    through the input standardization.
    """
    from .optimize import ObjectiveEval  # local import to avoid a cycle at module load

    target = np.asarray(target, dtype=np.float64)

    def objective(s: np.ndarray) -> ObjectiveEval:
        u = standardize(s, dec.summary_mean, dec.summary_std)
        out = mlp_forward(dec.regressor, u)
        resid = out - target
        value = float(resid @ resid)
        grad_u = mlp_input_gradient(dec.regressor, u, 2.0 * resid)
        return ObjectiveEval(value, grad_u / dec.summary_std)

    return objective


# ---------------------------------------------------------------------------
# Mixture density network engine
# ---------------------------------------------------------------------------

def _mdn_split(engine_dims, outputs: np.ndarray):
    """Split raw MLP outputs into (logits, means, raw log-sigmas)."""
    c, d = engine_dims
    logits = outputs[:, :c]
    means = outputs[:, c:c + c * d].reshape(-1, c, d)
    logsig_raw = outputs[:, c + c * d:].reshape(-1, c, d)
    return logits, means, logsig_raw


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def mdn_loss_grad_factory(n_components: int, theta_dim: int,
                          logsig_lo: float = LOGSIG_LO, logsig_hi: float = LOGSIG_HI):
    """Mean negative log-likelihood of a diagonal Gaussian mixture, with the
    exact gradient in the raw network outputs.

    Log-stddevs are hard-clipped to [logsig_lo, logsig_hi]; the gradient is
    zero where the clip is active.
    """
    c, d = n_components, theta_dim
    log2pi = np.log(2.0 * np.pi)

    def loss_grad(outputs: np.ndarray, thetas: np.ndarray):
        b = outputs.shape[0]
        logits, means, raw = _mdn_split((c, d), outputs)
        logsig = np.clip(raw, logsig_lo, logsig_hi)
        inv_var = np.exp(-2.0 * logsig)
        diff = thetas[:, None, :] - means  # (B, C, d)
        comp_ll = -0.5 * np.sum(diff * diff * inv_var, axis=2) \
            - np.sum(logsig, axis=2) - 0.5 * d * log2pi  # (B, C)
        logw = _log_softmax(logits)
        joint = logw + comp_ll
        top = joint.max(axis=1, keepdims=True)
        log_mix = top[:, 0] + np.log(np.exp(joint - top).sum(axis=1))
        loss = -float(np.mean(log_mix))

        resp = np.exp(joint - log_mix[:, None])  # responsibilities, rows sum to 1
        w = np.exp(logw)
        d_logits = (w - resp) / b
        d_means = -resp[:, :, None] * diff * inv_var / b
        d_raw = -resp[:, :, None] * (diff * diff * inv_var - 1.0) / b
        d_raw[(raw <= logsig_lo) | (raw >= logsig_hi)] = 0.0

        grad = np.concatenate(
            [d_logits, d_means.reshape(b, c * d), d_raw.reshape(b, c * d)], axis=1)
        return loss, grad

    return loss_grad


def train_mdn(pool: TrainingPool, n_components: int, rng: np.random.Generator,
              opts: TrainOptions | None = None, hidden=DEFAULT_HIDDEN):
    """Fit a mixture density network q(theta | s) on a simulation pool.

    Component-mean output biases are seeded with parameter draws from the
    pool and log-sigma biases with the pooled parameter spread, which breaks
    the initial symmetry between components.
    Returns (MdnEngine, TrainReport).
    """
    if n_components < 1:
        raise ValueError(f"n_components must be positive, got {n_components}")
    if opts is None:
        opts = TrainOptions()
    thetas = pool.thetas
    d = thetas.shape[1]
    mean = pool.summaries.mean(axis=0)
    std = np.maximum(pool.summaries.std(axis=0), _STD_FLOOR)
    inputs = standardize(pool.summaries, mean, std)

    out_dim = n_components * (1 + 2 * d)
    mlp = mlp_init([pool.summaries.shape[1], *hidden, out_dim], rng)
    anchors = thetas[rng.choice(thetas.shape[0], size=n_components, replace=False)]
    spread = np.log(np.maximum(thetas.std(axis=0), 1e-3))
    bias = mlp.biases[-1]
    bias[n_components:n_components + n_components * d] = anchors.reshape(-1)
    bias[n_components + n_components * d:] = np.tile(spread, n_components)

    loss_grad = mdn_loss_grad_factory(n_components, d)
    report = fit_mlp(mlp, inputs, thetas, opts, rng, loss_grad=loss_grad)
    engine = MdnEngine(mlp=mlp, n_components=n_components, theta_dim=d,
                       input_mean=mean, input_std=std)
    return engine, report


def mdn_parameters(engine: MdnEngine, s):
    """Mixture parameters (weights, means, sigmas) at a single summary."""
    u = standardize(np.asarray(s, dtype=np.float64), engine.input_mean, engine.input_std)
    out = mlp_forward(engine.mlp, u)[None, :]
    logits, means, raw = _mdn_split((engine.n_components, engine.theta_dim), out)
    logw = _log_softmax(logits)
    sig = np.exp(np.clip(raw, engine.logsig_lo, engine.logsig_hi))
    return np.exp(logw[0]), means[0], sig[0]


def mdn_log_prob(engine: MdnEngine, s, thetas) -> np.ndarray:
    """log q(theta | s) for each row of thetas."""
    w, means, sig = mdn_parameters(engine, s)
    t = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    diff = t[:, None, :] - means[None, :, :]
    comp = -0.5 * np.sum((diff / sig[None, :, :]) ** 2, axis=2) \
        - np.sum(np.log(sig), axis=1)[None, :] \
        - 0.5 * engine.theta_dim * np.log(2.0 * np.pi)
    joint = np.log(w)[None, :] + comp
    top = joint.max(axis=1, keepdims=True)
    return top[:, 0] + np.log(np.exp(joint - top).sum(axis=1))


def posterior_sample(engine: PosteriorEngine, s, n_samples: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Draw n_samples rows from q(theta | s)."""
    if n_samples < 1:
        raise ValueError(f"n_samples must be positive, got {n_samples}")
    if isinstance(engine, AnalyticGaussianEngine):
        mean, var = gaussian_posterior(np.asarray(s, dtype=np.float64), engine.n_obs)
        if mean.shape != (engine.dim,):
            raise ValueError(f"summary must have shape ({engine.dim},), got {mean.shape}")
        return mean + np.sqrt(var) * rng.standard_normal((n_samples, engine.dim))
    if isinstance(engine, MdnEngine):
        w, means, sig = mdn_parameters(engine, s)
        comps = rng.choice(engine.n_components, size=n_samples, p=w)
        eps = rng.standard_normal((n_samples, engine.theta_dim))
        return means[comps] + sig[comps] * eps
    raise TypeError(f"unknown engine type {type(engine).__name__}")


def posterior_moments(engine: PosteriorEngine, s):
    """Mean and per-dimension variance of q(theta | s)."""
    if isinstance(engine, AnalyticGaussianEngine):
        mean, var = gaussian_posterior(np.asarray(s, dtype=np.float64), engine.n_obs)
        return mean, np.full(engine.dim, var)
    if isinstance(engine, MdnEngine):
        w, means, sig = mdn_parameters(engine, s)
        mean = w @ means
        second = w @ (sig * sig + means * means)
        return mean, second - mean * mean
    raise TypeError(f"unknown engine type {type(engine).__name__}")


def posterior_kl_analytic(engine_a: PosteriorEngine, engine_b: PosteriorEngine,
                          s_a, s_b) -> float:
    """Closed-form KL( q_a(. | s_a) || q_b(. | s_b) ) for analytic engines."""
    if not (isinstance(engine_a, AnalyticGaussianEngine)
            and isinstance(engine_b, AnalyticGaussianEngine)):
        raise TypeError("closed-form KL requires analytic Gaussian engines")
    if engine_a.dim != engine_b.dim:
        raise ValueError(f"dimension mismatch: {engine_a.dim} vs {engine_b.dim}")
    d = engine_a.dim
    ma, va = gaussian_posterior(np.asarray(s_a, dtype=np.float64), engine_a.n_obs)
    mb, vb = gaussian_posterior(np.asarray(s_b, dtype=np.float64), engine_b.n_obs)
    dm = mb - ma
    return float(0.5 * (d * va / vb + (dm @ dm) / vb - d + d * np.log(vb / va)))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def decoder_to_payload(dec: DecoderEmbedding, holdout: HoldoutRecords | None = None) -> dict:
    payload = {
        "kind": "decoder",
        "task": {"name": dec.task_name, "params": dec.task_params},
        "feature_map": feature_map_to_payload(dec.feature_map),
        "regressor": mlp_to_payload(dec.regressor),
        "summary_mean": encode_floats(dec.summary_mean),
        "summary_std": encode_floats(dec.summary_std),
        "threshold": None if dec.threshold is None else encode_floats(np.array([dec.threshold])),
        "clip_band": dec.clip_band,
    }
    if holdout is not None:
        payload["holdout"] = {
            "summaries": encode_floats(holdout.summaries),
            "embeddings": encode_floats(holdout.embeddings),
        }
    return payload


def decoder_from_payload(payload: dict):
    if payload.get("kind") != "decoder":
        raise ValueError(f"not a decoder payload: kind={payload.get('kind')!r}")
    dec = DecoderEmbedding(
        feature_map=feature_map_from_payload(payload["feature_map"]),
        regressor=mlp_from_payload(payload["regressor"]),
        summary_mean=decode_floats(payload["summary_mean"]),
        summary_std=decode_floats(payload["summary_std"]),
        threshold=None if payload["threshold"] is None else float(decode_floats(payload["threshold"])[0]),
        task_name=payload["task"]["name"],
        task_params=payload["task"]["params"],
        clip_band=float(payload.get("clip_band", DEFAULT_CLIP_BAND)),
    )
    holdout = None
    if "holdout" in payload:
        holdout = HoldoutRecords(
            summaries=decode_floats(payload["holdout"]["summaries"]),
            embeddings=decode_floats(payload["holdout"]["embeddings"]),
        )
    return dec, holdout


def decoder_save(dec: DecoderEmbedding, path, holdout: HoldoutRecords | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(decoder_to_payload(dec, holdout), fh)


def decoder_load(path):
    with open(path, "r", encoding="utf-8") as fh:
        return decoder_from_payload(json.load(fh))


def decoder_hash(dec: DecoderEmbedding) -> str:
    """Hash of the model content only (holdout records excluded)."""
    return sha256_hex(canonical_json(decoder_to_payload(dec)))


def engine_to_payload(engine: PosteriorEngine) -> dict:
    if isinstance(engine, AnalyticGaussianEngine):
        return {"kind": "engine", "variant": "analytic_gaussian",
                "n_obs": engine.n_obs, "dim": engine.dim}
    if isinstance(engine, MdnEngine):
        return {
            "kind": "engine", "variant": "mdn",
            "mlp": mlp_to_payload(engine.mlp),
            "n_components": engine.n_components,
            "theta_dim": engine.theta_dim,
            "input_mean": encode_floats(engine.input_mean),
            "input_std": encode_floats(engine.input_std),
            "logsig_lo": engine.logsig_lo,
            "logsig_hi": engine.logsig_hi,
        }
    raise TypeError(f"unknown engine type {type(engine).__name__}")


def engine_from_payload(payload: dict) -> PosteriorEngine:
    if payload.get("kind") != "engine":
        raise ValueError(f"not an engine payload: kind={payload.get('kind')!r}")
    if payload["variant"] == "analytic_gaussian":
        return AnalyticGaussianEngine(n_obs=int(payload["n_obs"]), dim=int(payload["dim"]))
    if payload["variant"] == "mdn":
        return MdnEngine(
            mlp=mlp_from_payload(payload["mlp"]),
            n_components=int(payload["n_components"]),
            theta_dim=int(payload["theta_dim"]),
            input_mean=decode_floats(payload["input_mean"]),
            input_std=decode_floats(payload["input_std"]),
            logsig_lo=float(payload["logsig_lo"]),
            logsig_hi=float(payload["logsig_hi"]),
        )
    raise ValueError(f"unknown engine variant {payload['variant']!r}")


def engine_save(engine: PosteriorEngine, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(engine_to_payload(engine), fh)


def engine_load(path) -> PosteriorEngine:
    with open(path, "r", encoding="utf-8") as fh:
        return engine_from_payload(json.load(fh))


def engine_hash(engine: PosteriorEngine) -> str:
    return sha256_hex(canonical_json(engine_to_payload(engine)))
