"""Experiment runner: specs, cached training runs, cross-validation, lambda
sweeps and the logit-grid analysis.

Every trained model is a *run* identified by a content hash of everything
that determines its result (training config, data recipe, fold, and the
source of the numerical modules). Completed runs are stored under
``<out_dir>/runs/<key>/`` and reused when the same key is requested again,
so re-running a command is cheap and always reproduces the stored files.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import yaml

from . import ci_engine, fairmetrics, nets, synthgen
from .ci_engine import TrainingConfig
from .errors import ConfigError, InvalidParameterError

log = logging.getLogger(__name__)

VARIANTS = {
    "vanilla": "none",
    "regularized": "regularizer",
    "y_space_ci": "label_space",
    "v_space_ci": "latent_space",
    "partitioned_ci": "partitioned",
}
OUT_ENV = "FAIRCI_OUT"
HISTORY_COLUMNS = ("epoch", "l_d1", "l_d2", "l_ci", "l_task", "val_bacc", "val_dcor2", "l_aux", "l_total")
REPORT_LEAD = ("model", "seed", "lambda")
SWEEP_COLUMNS = ("variant", "lambda", "seed", "bacc", "dcor2_latent", "eo_gap")
DEFAULT_SIGMAS = tuple(float(v) for v in range(1, 8))
RUN_FORMAT = 1

# per-run settings chosen by variant or by the caller, never by the training block
_RUN_FIELDS = ("ci_target", "lambda_ci", "seed")


# -- spec ---------------------------------------------------------------------

@dataclass
class DataSpec:
    n_train: int = 10_000
    n_val: int = 2_000
    n_test: int = 2_000
    seed: int = 0

    def split_seed(self, split: str) -> int:
        # distinct, reproducible streams per split from one data seed
        ss = np.random.SeedSequence([self.seed, synthgen.SPLITS.index(split)])
        return int(ss.generate_state(1)[0])


@dataclass
class CVSpec:
    k: int = 5
    grid: tuple = (1.0, 10.0, 30.0, 100.0)
    dcor2_ceiling: float = 0.1
    tie_tolerance: float = 1e-3
    seed: int = 0


@dataclass
class SweepSpec:
    lambdas: tuple = (0.0, 1.0, 3.0, 10.0, 30.0, 100.0)
    variants: tuple = ("y_space_ci", "v_space_ci")


@dataclass
class ExperimentSpec:
    training: TrainingConfig = field(default_factory=TrainingConfig)
    data: DataSpec = field(default_factory=DataSpec)
    variants: tuple = ("vanilla", "regularized", "y_space_ci", "v_space_ci")
    seeds: tuple = (0,)
    lambdas: dict = field(default_factory=lambda: {
        "vanilla": 0.0, "regularized": 1.0, "y_space_ci": 30.0,
        "v_space_ci": 30.0, "partitioned_ci": 30.0,
    })
    cv: CVSpec = field(default_factory=CVSpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    sigma_values: tuple = DEFAULT_SIGMAS
    out_dir: str = ""
    emit_plots: bool = False
    reuse_runs: bool = True

    def __post_init__(self):
        if not self.out_dir:
            self.out_dir = os.environ.get(OUT_ENV, "results")

    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    def config_for(self, variant: str, seed: int, lam: Optional[float] = None) -> TrainingConfig:
        if lam is None:
            lam = self.lambdas.get(variant, 0.0)
        if variant == "vanilla":
            lam = 0.0
        return replace(self.training, ci_target=VARIANTS[variant], lambda_ci=float(lam), seed=int(seed))

    def validate(self) -> "ExperimentSpec":
        try:
            self.training.validate()
        except InvalidParameterError as e:
            raise ConfigError(f"training.{e}") from None
        for name in ("n_train", "n_val", "n_test"):
            v = getattr(self.data, name)
            if not isinstance(v, int) or v < 2 or v % 2:
                raise ConfigError(f"data.{name}: must be an even integer >= 2 (got {v!r})")
        _check_int("data.seed", self.data.seed)
        if not self.variants:
            raise ConfigError("variants: must name at least one variant")
        for i, v in enumerate(self.variants):
            _check_variant(f"variants[{i}]", v)
        if not self.seeds:
            raise ConfigError("seeds: must be nonempty")
        for i, s in enumerate(self.seeds):
            _check_int(f"seeds[{i}]", s)
        for v, lam in self.lambdas.items():
            _check_variant(f"lambdas.{v}", v)
            _check_weight(f"lambdas.{v}", lam)
        if not isinstance(self.cv.k, int) or self.cv.k < 2:
            raise ConfigError(f"cv.k: must be an integer >= 2 (got {self.cv.k!r})")
        if not self.cv.grid:
            raise ConfigError("cv.grid: must be nonempty")
        for i, lam in enumerate(self.cv.grid):
            _check_weight(f"cv.grid[{i}]", lam)
        _check_weight("cv.dcor2_ceiling", self.cv.dcor2_ceiling)
        _check_weight("cv.tie_tolerance", self.cv.tie_tolerance)
        if not self.sweep.lambdas:
            raise ConfigError("sweep.lambdas: must be nonempty")
        for i, lam in enumerate(self.sweep.lambdas):
            _check_weight(f"sweep.lambdas[{i}]", lam)
        for i, v in enumerate(self.sweep.variants):
            _check_variant(f"sweep.variants[{i}]", v)
        if not self.sigma_values:
            raise ConfigError("sigma_values: must be nonempty")
        for i, s in enumerate(self.sigma_values):
            if not isinstance(s, (int, float)) or not s > 0:
                raise ConfigError(f"sigma_values[{i}]: must be > 0 (got {s!r})")
        return self

    def to_dict(self) -> dict:
        train = self.training.to_dict()
        for k in _RUN_FIELDS:
            train.pop(k)
        return {
            "training": train,
            "data": vars(self.data).copy(),
            "variants": list(self.variants),
            "seeds": list(self.seeds),
            "lambdas": dict(self.lambdas),
            "cv": {**vars(self.cv), "grid": list(self.cv.grid)},
            "sweep": {"lambdas": list(self.sweep.lambdas), "variants": list(self.sweep.variants)},
            "sigma_values": list(self.sigma_values),
            "out_dir": self.out_dir,
            "emit_plots": self.emit_plots,
            "reuse_runs": self.reuse_runs,
        }


def _check_int(path, v):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{path}: must be an integer (got {v!r})")


def _check_variant(path, v):
    if v not in VARIANTS:
        raise ConfigError(f"{path}: unknown variant {v!r}; expected one of {sorted(VARIANTS)}")


def _check_weight(path, v):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not v >= 0:
        raise ConfigError(f"{path}: must be a non-negative number (got {v!r})")


def _section(raw: dict, name: str, cls):
    sub = raw.get(name) or {}
    if not isinstance(sub, dict):
        raise ConfigError(f"{name}: expected a mapping")
    known = {f.name for f in fields(cls)}
    for k in sub:
        if k not in known:
            raise ConfigError(f"{name}.{k}: unknown field")
    return sub


def spec_from_dict(raw: Optional[dict]) -> ExperimentSpec:
    """Build and validate a spec; every problem is reported as a
    ``ConfigError`` whose message starts with the offending field path."""
    raw = dict(raw or {})
    top = {f.name for f in fields(ExperimentSpec)}
    for k in raw:
        if k not in top:
            raise ConfigError(f"{k}: unknown field")

    train_raw = _section(raw, "training", TrainingConfig)
    for k in _RUN_FIELDS:
        if k in train_raw:
            raise ConfigError(f"training.{k}: set per run through variants, lambdas and seeds")
    try:
        training = TrainingConfig.from_dict(train_raw)
    except (TypeError, InvalidParameterError) as e:
        raise ConfigError(f"training: {e}") from None

    kwargs = {"training": training}
    kwargs["data"] = DataSpec(**_section(raw, "data", DataSpec))
    cv = _section(raw, "cv", CVSpec)
    if "grid" in cv:
        cv["grid"] = tuple(_listish("cv.grid", cv["grid"]))
    kwargs["cv"] = CVSpec(**cv)
    sweep = _section(raw, "sweep", SweepSpec)
    for k in ("lambdas", "variants"):
        if k in sweep:
            sweep[k] = tuple(_listish(f"sweep.{k}", sweep[k]))
    kwargs["sweep"] = SweepSpec(**sweep)
    for k in ("variants", "seeds", "sigma_values"):
        if k in raw:
            kwargs[k] = tuple(_listish(k, raw[k]))
    if "lambdas" in raw:
        if not isinstance(raw["lambdas"], dict):
            raise ConfigError("lambdas: expected a mapping variant -> lambda")
        kwargs["lambdas"] = {**ExperimentSpec().lambdas, **raw["lambdas"]}
    for k in ("out_dir", "emit_plots", "reuse_runs"):
        if k in raw:
            kwargs[k] = raw[k]
    if not isinstance(kwargs.get("emit_plots", False), bool):
        raise ConfigError("emit_plots: must be true or false")
    return ExperimentSpec(**kwargs).validate()


def _listish(path, v):
    if not isinstance(v, (list, tuple)):
        raise ConfigError(f"{path}: expected a list")
    return v


def load_spec(path) -> ExperimentSpec:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"config {path} is not valid YAML: {e}") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    return spec_from_dict(raw)


def dump_spec(spec: ExperimentSpec) -> str:
    return yaml.safe_dump(spec.to_dict(), sort_keys=False)


# -- data ---------------------------------------------------------------------

_DATA_CACHE: dict = {}


def datasets(data: DataSpec) -> dict:
    """Train/val/test splits for a data recipe (memoised in-process)."""
    key = (data.n_train, data.n_val, data.n_test, data.seed)
    if key not in _DATA_CACHE:
        sizes = {"train": data.n_train, "val": data.n_val, "test": data.n_test}
        _DATA_CACHE[key] = {
            split: synthgen.generate_dataset(n, split, data.split_seed(split))
            for split, n in sizes.items()
        }
    return _DATA_CACHE[key]


def fold_indices(n: int, k: int, seed: int) -> list:
    """``k`` disjoint, label-agnostic folds covering ``range(n)``."""
    if k < 2 or k > n:
        raise InvalidParameterError(f"k must lie in [2, n], got k={k}, n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


# -- runs ---------------------------------------------------------------------

_SOURCE_MODULES = (synthgen, nets, ci_engine, fairmetrics)


def code_fingerprint() -> str:
    h = hashlib.sha256()
    for mod in _SOURCE_MODULES:
        h.update(Path(mod.__file__).read_bytes())
    return h.hexdigest()[:16]


@dataclass
class RunResult:
    key: str
    directory: Path
    config: TrainingConfig
    report: dict
    history: list

    @property
    def checkpoint(self) -> Path:
        return self.directory / "checkpoint.npz"

    def encoder(self) -> nets.Encoder:
        return nets.load_checkpoint(self.checkpoint)[0]


# at lambda 0 these targets train bitwise like vanilla, so they share its runs
_VANILLA_AT_ZERO = ("label_space", "latent_space")


def run_key(cfg: TrainingConfig, data: DataSpec, fold: Optional[tuple]) -> str:
    if cfg.lambda_ci == 0 and cfg.ci_target in _VANILLA_AT_ZERO:
        cfg = replace(cfg, ci_target="none")
    payload = {
        "format": RUN_FORMAT,
        "code": code_fingerprint(),
        "config": cfg.to_dict(),
        "data": vars(data),
        "fold": fold,
    }
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:20]


def train_run(
    cfg: TrainingConfig,
    data: DataSpec,
    out_dir,
    fold: Optional[tuple] = None,
    reuse: bool = True,
) -> RunResult:
    """Train one model, or load it if an identical run is already stored.

    Without ``fold`` the model trains on the train split, monitors on val and
    is reported on test. With ``fold=(k, i, seed)`` it trains on the other
    folds of the train split and is reported on fold ``i``.
    """
    cfg.validate()
    key = run_key(cfg, data, fold)
    run_dir = Path(out_dir) / "runs" / key
    done = run_dir / "run.json"
    if reuse and done.exists():
        meta = json.loads(done.read_text())
        return RunResult(
            key, run_dir, cfg, meta["report"], fairmetrics.read_csv(run_dir / "history.csv")
        )

    splits = datasets(data)
    if fold is None:
        train_ds, monitor, held_out = splits["train"], splits["val"], splits["test"]
    else:
        k, i, fseed = fold
        folds = fold_indices(len(splits["train"]), k, fseed)
        rest = np.sort(np.concatenate([f for j, f in enumerate(folds) if j != i]))
        train_ds = splits["train"].subset(rest)
        monitor = held_out = splits["train"].subset(folds[i])

    log.info("training %s lambda=%g seed=%d fold=%s", cfg.ci_target, cfg.lambda_ci, cfg.seed, fold)
    encoder, history = ci_engine.train(cfg, train_ds, monitor)
    report = ci_engine.evaluate(encoder, held_out, cfg.s_binarization_threshold).flat()

    run_dir.mkdir(parents=True, exist_ok=True)
    nets.save_checkpoint(encoder, cfg.seed, run_dir / "checkpoint.npz")
    fairmetrics.write_csv(history.epochs, run_dir / "history.csv", fieldnames=HISTORY_COLUMNS)
    meta = {"config": cfg.to_dict(), "data": vars(data), "fold": fold,
            "report": report, "warnings": history.warnings}
    tmp = run_dir / "run.json.tmp"
    tmp.write_text(json.dumps(meta, indent=1, sort_keys=True))
    tmp.replace(done)
    rows = fairmetrics.read_csv(run_dir / "history.csv")
    return RunResult(key, run_dir, cfg, report, rows)


def report_row(variant: str, run: RunResult) -> dict:
    return {"model": variant, "seed": run.config.seed, "lambda": run.config.lambda_ci, **run.report}


# -- experiments --------------------------------------------------------------

def run_experiment(spec: ExperimentSpec, variants=None, seeds=None) -> list:
    """Train and test every (variant, seed); write results CSV, text report,
    per-run checkpoints and histories. Returns the result rows."""
    spec.validate()
    out = _ensure_dir(spec.out)
    rows, runs = [], []
    for variant in variants or spec.variants:
        _check_variant("variant", variant)
        for seed in seeds or spec.seeds:
            run = train_run(spec.config_for(variant, seed), spec.data, out, reuse=spec.reuse_runs)
            runs.append((variant, run))
            rows.append(report_row(variant, run))
    fairmetrics.write_csv(rows, out / "results.csv", fieldnames=_report_columns(rows))
    (out / "report.txt").write_text(
        "\n".join(f"[{r['model']} seed={r['seed']}]\n" + fairmetrics.text_report(r) for r in rows)
    )
    for variant, run in runs:
        stem = f"{variant}_seed{run.config.seed}"
        _copy(run.checkpoint, out / "checkpoints" / f"{stem}.npz")
        _copy(run.directory / "history.csv", out / "history" / f"{stem}.csv")
    return rows


def _report_columns(rows):
    cols = list(REPORT_LEAD)
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    return cols


def _ensure_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"output directory {path} is not writable: {e.strerror}") from None
    if not os.access(path, os.W_OK):
        raise OSError(f"output directory {path} is not writable")
    return path


def _copy(src: Path, dst: Path):
    dst.parent.mkdir(parents=True, exist_ok=True)
    dst.write_bytes(src.read_bytes())


@dataclass
class CVResult:
    best_lambda: float
    fold_table: list
    summary: list


def select_lambda(summary: list, ceiling: float, tol: float) -> float:
    """Highest mean validation bAcc among grid points whose mean validation
    dcor2 is within ``ceiling``; scores within ``tol`` of the best count as
    ties and go to the larger lambda. If no grid point meets the ceiling,
    the one with the lowest mean dcor2 is taken."""
    if not summary:
        raise InvalidParameterError("empty lambda grid")
    ok = [r for r in summary if r["mean_dcor2"] <= ceiling]
    if not ok:
        return max(summary, key=lambda r: (-r["mean_dcor2"], r["lambda"]))["lambda"]
    best = max(r["mean_bacc"] for r in ok)
    return max(r["lambda"] for r in ok if r["mean_bacc"] >= best - tol)


def crossval_lambda(spec: ExperimentSpec, variant: str, grid=None, k: Optional[int] = None) -> CVResult:
    """k-fold cross-validation of lambda on the train split; writes the fold
    table and per-lambda summary CSVs."""
    spec.validate()
    _check_variant("variant", variant)
    grid = tuple(spec.cv.grid if grid is None else grid)
    k = spec.cv.k if k is None else k
    if not grid:
        raise InvalidParameterError("lambda grid must be nonempty")
    if k < 2:
        raise InvalidParameterError(f"k must be >= 2, got {k}")
    out = _ensure_dir(spec.out)
    table, summary = [], []
    for lam in grid:
        scores = []
        for i in range(k):
            cfg = spec.config_for(variant, spec.cv.seed, lam)
            run = train_run(cfg, spec.data, out, fold=(k, i, spec.cv.seed), reuse=spec.reuse_runs)
            table.append({"variant": variant, "lambda": float(lam), "fold": i,
                          "val_bacc": run.report["bacc"], "val_dcor2": run.report["dcor2_latent"]})
            scores.append((run.report["bacc"], run.report["dcor2_latent"]))
        b, d = np.mean(scores, axis=0)
        summary.append({"lambda": float(lam), "mean_bacc": float(b), "mean_dcor2": float(d)})
    best = select_lambda(summary, spec.cv.dcor2_ceiling, spec.cv.tie_tolerance)
    for r in summary:
        r["selected"] = int(r["lambda"] == best)
    fairmetrics.write_csv(table, out / f"cv_{variant}_folds.csv")
    fairmetrics.write_csv(summary, out / f"cv_{variant}_summary.csv")
    return CVResult(best, table, summary)


def sweep_lambda(spec: ExperimentSpec, lambdas=None, seeds=None, variants=None) -> list:
    """Full factorial (variant, lambda, seed) grid evaluated on the test split."""
    spec.validate()
    lambdas = tuple(spec.sweep.lambdas if lambdas is None else lambdas)
    seeds = tuple(spec.seeds if seeds is None else seeds)
    variants = tuple(spec.sweep.variants if variants is None else variants)
    if not lambdas or not seeds or not variants:
        raise InvalidParameterError("lambdas, seeds and variants must all be nonempty")
    out = _ensure_dir(spec.out)
    rows = []
    for variant in variants:
        _check_variant("variant", variant)
        for lam in lambdas:
            for seed in seeds:
                run = train_run(spec.config_for(variant, seed, lam), spec.data, out,
                                reuse=spec.reuse_runs)
                row = {"variant": variant, "lambda": float(lam), "seed": int(seed)}
                row.update({c: run.report[c] for c in SWEEP_COLUMNS[3:]})
                rows.append(row)
    fairmetrics.write_csv(rows, out / "sweep.csv", fieldnames=SWEEP_COLUMNS)
    if spec.emit_plots:
        from . import plots
        plots.sweep_plot(rows, out / "sweep.png")
    return rows


def sweep_means(rows: list, variant: str) -> dict:
    """Mean of each sweep metric per lambda for one variant."""
    by = {}
    for r in rows:
        if r["variant"] == variant:
            by.setdefault(float(r["lambda"]), []).append(r)
    return {
        lam: {c: float(np.mean([float(r[c]) for r in rs])) for c in SWEEP_COLUMNS[3:]}
        for lam, rs in sorted(by.items())
    }


# -- logit grid ---------------------------------------------------------------

def logit_grid(model, sigma_values=DEFAULT_SIGMAS) -> np.ndarray:
    """Raw logits for images rendered at every (sigma_A, sigma_B) pair.

    ``model`` is an encoder or a checkpoint path. Entry ``[i, j]`` is the
    logit at ``sigma_A = sigma_values[i]``, ``sigma_B = sigma_values[j]``,
    so a row varies sigma_B only.
    """
    encoder = nets.load_checkpoint(model)[0] if isinstance(model, (str, Path)) else model
    values = np.asarray(sigma_values, dtype=np.float64)
    if values.ndim != 1 or len(values) == 0 or not np.all(values > 0):
        raise InvalidParameterError("sigma_values must be a nonempty list of positive numbers")
    a, b = np.meshgrid(values, values, indexing="ij")
    images = synthgen.render_batch(a.ravel(), b.ravel()) / synthgen.MAX_AMPLITUDE
    with torch.no_grad():
        logits = nets.encode_predict(encoder, images.astype(np.float32)).logit
    return logits.double().numpy().reshape(len(values), len(values))


def variance_ratio(grid: np.ndarray) -> float:
    """Mean within-row variance (sigma_B varying) over mean within-column
    variance (sigma_A varying). Small values mean the logit ignores sigma_B."""
    grid = np.asarray(grid, dtype=np.float64)
    col = grid.var(axis=0).mean()
    if col == 0:
        return 0.0 if grid.var(axis=1).mean() == 0 else float("inf")
    return float(grid.var(axis=1).mean() / col)


def write_grid(grid: np.ndarray, sigma_values, path, emit_plots: bool = False) -> Path:
    path = Path(path)
    _ensure_dir(path.parent)
    rows = [
        {"sigma_a": a, **{f"sigma_b={b:g}": grid[i, j] for j, b in enumerate(sigma_values)}}
        for i, a in enumerate(sigma_values)
    ]
    fairmetrics.write_csv(rows, path)
    if emit_plots:
        from . import plots
        plots.grid_heatmap(grid, sigma_values, path.with_suffix(".png"))
    return path


# -- report -------------------------------------------------------------------

def summarize(rows: list) -> list:
    """Mean and standard deviation of the headline metrics per model."""
    metrics = ("bacc", "dcor2_latent", "dcor2_output", "eo_gap")
    by = {}
    for r in rows:
        by.setdefault(r["model"], []).append(r)
    out = []
    for model, rs in by.items():
        row = {"model": model, "n_seeds": len(rs)}
        for m in metrics:
            vals = np.array([float(r[m]) for r in rs])
            row[f"{m}_mean"] = float(vals.mean())
            row[f"{m}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out.append(row)
    return out
