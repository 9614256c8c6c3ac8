"""Declarative experiment harness.

A single config document drives the whole pipeline:

    simulate pool -> fit feature map + decoder -> calibrate gate
    -> train/choose posterior engine -> evaluate contamination grid
    -> results CSV + manifest

Every stage artifact is cached in the output directory under a content key
derived from the part of the config that affects it, so stages are
skippable and reruns are cheap. All randomness is derived from
(master_seed, stage tag, dataset index); together with ordered row
emission this makes the results CSV byte-identical for a given config at
any parallelism level.

Per-row wall_time_ms is written as 0 unless record_timing is set, because
measured timings would break CSV reproducibility; stage timings always go
to the manifest instead.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import json
import multiprocessing
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adaptation import adapt, calibrate_threshold, detect
from .contamination import ContaminationSpec, apply_contamination, default_kind
from .inference import (AnalyticGaussianEngine, decoder_hash, decoder_load, decoder_save,
                        engine_hash, engine_load, engine_save, posterior_sample,
                        train_decoder, train_mdn)
from .kernels import build_feature_map, mean_embedding, median_heuristic
from .metrics import coverage, predictive_mmd, rmse, sample_mmd, summary_oracle_distance
from .nn import TrainOptions
from .simulators import build_training_pool, factor_task, load_pool, make_task, save_pool
from .util import NumericalError, canonical_json, derive_rng, sha256_hex
from . import __version__

CSV_HEADER = ("task,method,eps,delta,seed,rmse,coverage,posterior_mmd,"
              "predictive_mmd,summary_oracle_dist,detected,wall_time_ms")

_TASKS = ("gaussian", "factor", "oup", "sir")
_METHODS = ("npe_plain", "npe_mds")
_ENGINES = ("", "analytic", "mdn")
_OPTIMIZERS = ("lbfgs", "gd")
_DEFAULT_N_TRAIN = {"gaussian": 50_000, "factor": 50_000, "oup": 10_000, "sir": 10_000}
_DEFAULT_HORIZON = {"oup": 25, "sir": 365}


@dataclass
class ExperimentConfig:
    task: str = "gaussian"
    d: int = 2  # gaussian location dimension
    obs_dim: int = 5  # factor observation dimension
    n_obs: int = 100  # rows per dataset
    horizon: int | None = None  # trajectory length (oup/sir only)
    n_train: int | None = None  # simulation pool size (per-task default)
    n_features: int = 512
    alpha: float = 0.05
    holdout_frac: float = 0.05
    gate: bool = True
    engine: str = ""  # "" = analytic for gaussian, mdn otherwise
    mdn_components: int = 5
    learning_rate: float = 5e-4
    batch_size: int = 128
    max_epochs: int = 500
    patience: int = 20
    contamination: list = field(default_factory=lambda: [{"eps": 0.0, "delta": 0.0}])
    methods: list = field(default_factory=lambda: list(_METHODS))
    n_test_datasets: int = 100
    n_posterior_samples: int = 1000
    n_predictive: int = 200
    coverage_alpha: float = 0.05
    optimizer: str = "lbfgs"
    master_seed: int = 0
    record_timing: bool = False


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build and validate a config; unknown keys are errors."""
    if not isinstance(raw, dict):
        raise ValueError(f"config document must be a mapping, got {type(raw).__name__}")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    cfg = ExperimentConfig(**raw)
    if cfg.task not in _TASKS:
        raise ValueError(f"unknown task {cfg.task!r} (expected one of {_TASKS})")
    if cfg.horizon is not None and cfg.task not in _DEFAULT_HORIZON:
        raise ValueError(f"horizon only applies to trajectory tasks, not {cfg.task!r}")
    if cfg.horizon is None:
        cfg.horizon = _DEFAULT_HORIZON.get(cfg.task)
    if cfg.n_train is None:
        cfg.n_train = _DEFAULT_N_TRAIN[cfg.task]
    if cfg.engine not in _ENGINES:
        raise ValueError(f"unknown engine {cfg.engine!r} (expected one of {_ENGINES})")
    if cfg.engine == "analytic" and cfg.task != "gaussian":
        raise ValueError("the analytic engine is only available for the gaussian task")
    if cfg.engine == "":
        cfg.engine = "analytic" if cfg.task == "gaussian" else "mdn"
    if cfg.optimizer not in _OPTIMIZERS:
        raise ValueError(f"unknown optimizer {cfg.optimizer!r} (expected one of {_OPTIMIZERS})")
    if not cfg.methods:
        raise ValueError("methods must not be empty")
    for m in cfg.methods:
        if m not in _METHODS:
            raise ValueError(f"unknown method {m!r} (expected subset of {_METHODS})")
    if not (0.0 < cfg.alpha < 1.0):
        raise ValueError(f"alpha must lie in (0, 1), got {cfg.alpha}")
    if not (0.0 < cfg.coverage_alpha < 1.0):
        raise ValueError(f"coverage_alpha must lie in (0, 1), got {cfg.coverage_alpha}")
    if not (0.0 < cfg.holdout_frac < 1.0):
        raise ValueError(f"holdout_frac must lie in (0, 1), got {cfg.holdout_frac}")
    for name in ("d", "obs_dim", "n_obs", "n_train", "n_features", "mdn_components",
                 "batch_size", "max_epochs", "patience", "n_test_datasets",
                 "n_posterior_samples", "n_predictive"):
        if int(getattr(cfg, name)) < 1:
            raise ValueError(f"{name} must be positive, got {getattr(cfg, name)}")
    if not isinstance(cfg.contamination, list) or not cfg.contamination:
        raise ValueError("contamination must be a non-empty list of cells")
    cells = []
    for cell in cfg.contamination:
        if not isinstance(cell, dict):
            raise ValueError(f"contamination cells must be mappings, got {cell!r}")
        extra = sorted(set(cell) - {"kind", "eps", "delta"})
        if extra:
            raise ValueError(f"unknown contamination keys: {', '.join(extra)}")
        cells.append({"kind": cell.get("kind", default_kind(cfg.task)),
                      "eps": float(cell.get("eps", 0.0)),
                      "delta": float(cell.get("delta", 0.0))})
    cfg.contamination = cells
    # eager validation of kind/eps ranges
    for cell in cells:
        ContaminationSpec(kind=cell["kind"], eps=cell["eps"], delta=cell["delta"])
    return cfg


def config_load(path) -> ExperimentConfig:
    """Read a config from JSON or YAML."""
    text = Path(path).read_text(encoding="utf-8")
    suffix = Path(path).suffix.lower()
    import yaml
    if suffix == ".json":
        raw = json.loads(text)
    elif suffix in (".yaml", ".yml"):
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as err:
            raise ValueError(f"invalid YAML config {path}: {err}") from err
    else:
        try:
            raw = json.loads(text)
        except json.JSONDecodeError:
            try:
                raw = yaml.safe_load(text)
            except yaml.YAMLError as err:
                raise ValueError(f"config {path} is neither valid JSON nor YAML: {err}") from err
    return config_from_dict(raw if raw is not None else {})


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_hash(cfg: ExperimentConfig) -> str:
    return sha256_hex(canonical_json(config_to_dict(cfg)))


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def _pool_key(cfg: ExperimentConfig) -> str:
    parts = {"task": cfg.task, "d": cfg.d, "obs_dim": cfg.obs_dim, "n_obs": cfg.n_obs,
             "horizon": cfg.horizon, "n_train": cfg.n_train, "master_seed": cfg.master_seed}
    return sha256_hex(canonical_json(parts))[:16]

def _decoder_key(cfg: ExperimentConfig) -> str:
    parts = {"pool": _pool_key(cfg), "n_features": cfg.n_features,
             "holdout_frac": cfg.holdout_frac, "alpha": cfg.alpha,
             "learning_rate": cfg.learning_rate, "batch_size": cfg.batch_size,
             "max_epochs": cfg.max_epochs, "patience": cfg.patience}
    return sha256_hex(canonical_json(parts))[:16]

def _engine_key(cfg: ExperimentConfig) -> str:
    parts = {"pool": _pool_key(cfg), "engine": cfg.engine,
             "mdn_components": cfg.mdn_components, "learning_rate": cfg.learning_rate,
             "batch_size": cfg.batch_size, "max_epochs": cfg.max_epochs,
             "patience": cfg.patience}
    return sha256_hex(canonical_json(parts))[:16]


def build_task(cfg: ExperimentConfig):
    if cfg.task == "gaussian":
        return make_task("gaussian", d=cfg.d, n_obs=cfg.n_obs)
    if cfg.task == "factor":
        # the loading matrix is frozen from its own seed stream
        return factor_task(obs_dim=cfg.obs_dim, n_obs=cfg.n_obs,
                           rng=derive_rng(cfg.master_seed, "factor-loading"))
    if cfg.task == "oup":
        return make_task("oup", n_obs=cfg.n_obs, horizon=cfg.horizon)
    if cfg.task == "sir":
        return make_task("sir", n_obs=cfg.n_obs, horizon=cfg.horizon)
    raise ValueError(f"unknown task {cfg.task!r}")


def stage_pool(cfg: ExperimentConfig, out_dir: Path, task=None):
    path = out_dir / f"pool-{_pool_key(cfg)}.npz"
    if path.exists():
        return load_pool(path), path
    if task is None:
        task = build_task(cfg)
    pool = build_training_pool(task, cfg.n_train, cfg.master_seed)
    save_pool(pool, path)
    return pool, path


def _train_options(cfg: ExperimentConfig) -> TrainOptions:
    return TrainOptions(learning_rate=cfg.learning_rate, batch_size=cfg.batch_size,
                        max_epochs=cfg.max_epochs, patience=cfg.patience)


def stage_decoder(cfg: ExperimentConfig, out_dir: Path, pool=None, task=None):
    path = out_dir / f"decoder-{_decoder_key(cfg)}.json"
    if path.exists():
        dec, holdout = decoder_load(path)
        return dec, holdout, path
    if pool is None:
        pool, _ = stage_pool(cfg, out_dir, task=task)
    seed = cfg.master_seed
    rows = pool.datasets.reshape(-1, pool.datasets.shape[2])
    bandwidth = median_heuristic(rows, rng=derive_rng(seed, "bandwidth"))
    fm = build_feature_map(pool.datasets.shape[2], cfg.n_features, bandwidth,
                           derive_rng(seed, "feature-map"))
    dec, holdout, _report = train_decoder(pool, fm, derive_rng(seed, "decoder"),
                                          opts=_train_options(cfg),
                                          holdout_frac=cfg.holdout_frac)
    calibrate_threshold(dec, holdout, alpha=cfg.alpha)
    decoder_save(dec, path, holdout)
    return dec, holdout, path


def stage_engine(cfg: ExperimentConfig, out_dir: Path, pool=None, task=None):
    path = out_dir / f"engine-{_engine_key(cfg)}.json"
    if path.exists():
        return engine_load(path), path
    if cfg.engine == "analytic":
        engine = AnalyticGaussianEngine(n_obs=cfg.n_obs, dim=cfg.d)
    else:
        if pool is None:
            pool, _ = stage_pool(cfg, out_dir, task=task)
        engine, _report = train_mdn(pool, cfg.mdn_components,
                                    derive_rng(cfg.master_seed, "mdn"),
                                    opts=_train_options(cfg))
    engine_save(engine, path)
    return engine, path


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class _EvalContext:
    cfg: ExperimentConfig
    task: object
    dec: object
    engine: object


_CTX: _EvalContext | None = None


def _format_float(x: float) -> str:
    return repr(float(x))


def _eval_item(item):
    """One (grid cell, test dataset) pair -> one CSV line per method."""
    cell_idx, j = item
    ctx = _CTX
    cfg, task, dec, engine = ctx.cfg, ctx.task, ctx.dec, ctx.engine
    cell = cfg.contamination[cell_idx]
    spec = ContaminationSpec(kind=cell["kind"], eps=cell["eps"], delta=cell["delta"])
    seed = cfg.master_seed

    rng_data = derive_rng(seed, "test-data", cell_idx, j)
    theta_star = task.prior_sample(rng_data)
    clean = task.simulate(theta_star, rng_data)
    observed = apply_contamination(spec, task, clean,
                                   derive_rng(seed, "contaminate", cell_idx, j))
    s_oracle = task.summary(clean)
    s_tilde = task.summary(observed)
    obs_emb = mean_embedding(dec.feature_map, observed)
    statistic, flagged = detect(dec, s_tilde, obs_emb)

    ref_samples = None
    if task.name == "gaussian":
        ref_engine = AnalyticGaussianEngine(n_obs=cfg.n_obs, dim=cfg.d)
        ref_samples = posterior_sample(ref_engine, s_oracle, cfg.n_posterior_samples,
                                       derive_rng(seed, "reference", cell_idx, j))

    lines = []
    for method in cfg.methods:
        t0 = time.perf_counter()
        if method == "npe_plain":
            s_query = s_tilde
        else:
            result = adapt(dec, observed, optimizer=cfg.optimizer, gate=cfg.gate)
            s_query = result.s_star
        samples = posterior_sample(engine, s_query, cfg.n_posterior_samples,
                                   derive_rng(seed, "posterior", cell_idx, j, method))
        wall_ms = (time.perf_counter() - t0) * 1e3 if cfg.record_timing else 0.0

        row_rmse = rmse(samples, theta_star)
        row_cov = coverage(samples, theta_star, alpha=cfg.coverage_alpha)
        row_pmmd = "" if ref_samples is None else _format_float(sample_mmd(samples, ref_samples))
        row_pred = predictive_mmd(task, samples, clean, cfg.n_predictive,
                                  derive_rng(seed, "predictive", cell_idx, j, method))
        row_dist = summary_oracle_distance(s_query, s_oracle)
        lines.append(",".join([
            task.name, method, _format_float(cell["eps"]), _format_float(cell["delta"]),
            str(j), _format_float(row_rmse), _format_float(row_cov), row_pmmd,
            _format_float(row_pred), _format_float(row_dist),
            "true" if flagged else "false", _format_float(wall_ms),
        ]))
    return lines


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name for diagnostics."""


def _run_stage(name: str, seed: int, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (NumericalError, ValueError) as err:
        # keep the type so callers can still map it to an exit code
        raise type(err)(f"stage {name!r} failed (master_seed={seed}): {err}") from err
    except Exception as err:
        raise StageError(f"stage {name!r} failed (master_seed={seed}): {err}") from err


def run_pipeline(cfg: ExperimentConfig, out_dir, jobs: int = 1) -> dict:
    """Run every stage (cache-aware) and write results + manifest.

    Returns the manifest dict; the CSV lands at results-<config hash>.csv
    (and a results.csv convenience copy) inside out_dir. On a stage failure
    an incomplete manifest naming the failed stage is written before the
    error propagates.
    """
    if jobs < 1:
        raise ValueError(f"jobs must be positive, got {jobs}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings = {}
    full_hash = config_hash(cfg)
    csv_path = out / f"results-{full_hash[:16]}.csv"
    manifest_path = out / f"manifest-{full_hash[:16]}.json"
    seed = cfg.master_seed

    manifest = {
        "config": config_to_dict(cfg),
        "config_hash": full_hash,
        "version": __version__,
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "complete": False,
        "stage_keys": {"pool": _pool_key(cfg), "decoder": _decoder_key(cfg),
                       "engine": _engine_key(cfg)},
        "jobs": jobs,
    }

    def _flush_manifest():
        with open(manifest_path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2)

    try:
        t0 = time.perf_counter()
        task = _run_stage("task", seed, build_task, cfg)
        pool, pool_path = _run_stage("simulate", seed, stage_pool, cfg, out, task=task)
        timings["pool_ms"] = (time.perf_counter() - t0) * 1e3

        t0 = time.perf_counter()
        dec, holdout, decoder_path = _run_stage("decoder", seed, stage_decoder,
                                                cfg, out, pool=pool, task=task)
        timings["decoder_ms"] = (time.perf_counter() - t0) * 1e3

        t0 = time.perf_counter()
        engine, engine_path = _run_stage("engine", seed, stage_engine,
                                         cfg, out, pool=pool, task=task)
        timings["engine_ms"] = (time.perf_counter() - t0) * 1e3

        dec_hash_before = decoder_hash(dec)
        eng_hash_before = engine_hash(engine)
        manifest["artifacts"] = {"pool": pool_path.name, "decoder": decoder_path.name,
                                 "engine": engine_path.name, "results": csv_path.name}
        manifest["decoder_hash"] = dec_hash_before
        manifest["engine_hash"] = eng_hash_before

        t0 = time.perf_counter()
        if not csv_path.exists():
            _run_stage("evaluate", seed, _evaluate_to_csv,
                       cfg, task, dec, engine, csv_path, jobs)
        timings["evaluate_ms"] = (time.perf_counter() - t0) * 1e3

        # amortization audit: adaptation must never touch the frozen models
        if decoder_hash(dec) != dec_hash_before or engine_hash(engine) != eng_hash_before:
            raise StageError("frozen model artifacts changed during evaluation")
    except Exception as err:
        manifest["error"] = str(err)
        _flush_manifest()
        raise

    with open(csv_path, encoding="utf-8") as fh:
        n_rows = sum(1 for _ in fh) - 1
    manifest["complete"] = True
    manifest["n_rows"] = n_rows
    manifest["timings_ms"] = timings
    _flush_manifest()
    (out / "results.csv").write_bytes(csv_path.read_bytes())
    return manifest


def _evaluate_to_csv(cfg: ExperimentConfig, task, dec, engine, csv_path: Path,
                     jobs: int) -> None:
    items = [(ci, j) for ci in range(len(cfg.contamination))
             for j in range(cfg.n_test_datasets)]
    global _CTX
    _CTX = _EvalContext(cfg=cfg, task=task, dec=dec, engine=engine)
    if jobs == 1:
        all_lines = [_eval_item(item) for item in items]
    else:
        # fork so workers inherit the prepared context; every item owns
        # its RNG streams, so worker count cannot change the rows
        pool_exec = concurrent.futures.ProcessPoolExecutor(
            max_workers=jobs, mp_context=multiprocessing.get_context("fork"))
        with pool_exec as ex:
            all_lines = list(ex.map(_eval_item, items, chunksize=4))
    # write to a temp name then rename so an abort never leaves a partial CSV
    tmp_path = csv_path.with_suffix(".csv.tmp")
    with open(tmp_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(CSV_HEADER + "\n")
        for lines in all_lines:
            for line in lines:
                fh.write(line + "\n")
    tmp_path.replace(csv_path)


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------

_NUMERIC_COLS = ("rmse", "coverage", "posterior_mmd", "predictive_mmd",
                 "summary_oracle_dist", "wall_time_ms")


def read_results_csv(path):
    """Parse a results CSV into a list of row dicts."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != CSV_HEADER:
            raise ValueError(f"unexpected CSV header in {path}")
        names = header.split(",")
        rows = []
        for line in fh:
            parts = line.rstrip("\n").split(",")
            if len(parts) != len(names):
                raise ValueError(f"malformed CSV line in {path}: {line!r}")
            row = dict(zip(names, parts))
            for col in _NUMERIC_COLS:
                row[col] = float(row[col]) if row[col] != "" else None
            row["eps"], row["delta"] = float(row["eps"]), float(row["delta"])
            row["seed"] = int(row["seed"])
            row["detected"] = row["detected"] == "true"
            rows.append(row)
    return rows


def _median_iqr(values):
    arr = np.asarray(values, dtype=np.float64)
    return (float(np.median(arr)),
            float(np.quantile(arr, 0.75) - np.quantile(arr, 0.25)))


def summarize(csv_paths, expected_cells=None):
    """Aggregate one or more results CSVs per (task, method, eps, delta) cell.

    Returns (summary_rows, table_text, missing_cells). Each summary row
    carries n, median and IQR for the numeric metrics, and the detection
    rate. expected_cells, when given, is an iterable of (task, method, eps,
    delta) tuples; cells absent from the data are reported, never invented.
    """
    rows = []
    for p in csv_paths:
        rows.extend(read_results_csv(p))
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["task"], r["method"], r["eps"], r["delta"]), []).append(r)

    summary_rows = []
    for key in sorted(groups):
        cell = groups[key]
        out = {"task": key[0], "method": key[1], "eps": key[2], "delta": key[3],
               "n": len(cell), "detected_rate": sum(r["detected"] for r in cell) / len(cell)}
        for col in ("rmse", "coverage", "posterior_mmd", "predictive_mmd",
                    "summary_oracle_dist"):
            vals = [r[col] for r in cell if r[col] is not None]
            med, iqr = _median_iqr(vals) if vals else (None, None)
            out[f"{col}_median"], out[f"{col}_iqr"] = med, iqr
        summary_rows.append(out)

    missing = []
    if expected_cells is not None:
        present = set(groups)
        missing = [c for c in expected_cells if tuple(c) not in present]

    cols = ["task", "method", "eps", "delta", "n", "rmse_median", "rmse_iqr",
            "coverage_median", "posterior_mmd_median", "predictive_mmd_median",
            "summary_oracle_dist_median", "detected_rate"]
    widths = {c: max(len(c), 12) for c in cols}
    def fmt(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.4g}"
        return str(v)
    lines = ["  ".join(c.ljust(widths[c]) for c in cols)]
    for r in summary_rows:
        lines.append("  ".join(fmt(r.get(c)).ljust(widths[c]) for c in cols))
    table = "\n".join(lines)
    return summary_rows, table, missing


def write_summary_csv(summary_rows, path) -> None:
    cols = ["task", "method", "eps", "delta", "n",
            "rmse_median", "rmse_iqr", "coverage_median", "coverage_iqr",
            "posterior_mmd_median", "posterior_mmd_iqr",
            "predictive_mmd_median", "predictive_mmd_iqr",
            "summary_oracle_dist_median", "summary_oracle_dist_iqr",
            "detected_rate"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(cols) + "\n")
        for r in summary_rows:
            vals = []
            for c in cols:
                v = r.get(c)
                if v is None:
                    vals.append("")
                elif isinstance(v, float):
                    vals.append(repr(v))
                else:
                    vals.append(str(v))
            fh.write(",".join(vals) + "\n")
