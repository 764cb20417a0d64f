"""Desk-scale experiment drivers: sweeps, robustness matrix, ensembles, strategies.

All drivers take a base ``TrainConfig`` and a ``Dataset``, run every cell
deterministically and return CSV-ready rows. Evaluation uses all tokens
except inside ``run_robustness``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .cost import empirical_flops, match_keep_rate
from .data import Dataset, make_synthetic
from .errors import PatchDropoutError
from .manifest import RunManifest, canonical_json, config_hash
from .model import VARIANTS, ModelConfig
from .sampler import STRATEGIES, SamplingSpec, kept_count
from .trainer import TrainConfig, TrainResult, evaluate, train

log = logging.getLogger(__name__)

AXES = ("keep_rate", "image_size", "patch_size", "variant", "depth", "strategy")
EVAL_SEED = 20_221_017


def runs_root() -> Path:
    return Path(os.environ.get("PATCHDROP_RUNS_DIR", "runs"))


# --------------------------------------------------------------------------
# the desk-scale benchmark


def desk_model(**overrides) -> ModelConfig:
    """2-block, width-32 ViT on 32x32 grayscale with 4x4 patches (N = 64)."""
    cfg = dict(depth=2, width=32, heads=2, patch=4, image_h=32, image_w=32, classes=4, channels=1)
    cfg.update(overrides)
    return ModelConfig(**cfg)


def desk_config(seed: int = 0, keep_rate: float | None = 1.0, strategy: str = "random", rate_interval=None, **overrides) -> TrainConfig:
    model = overrides.pop("model", None) or desk_model()
    if rate_interval is not None:
        keep_rate = None
        rate_interval = tuple(rate_interval)
    sampling = SamplingSpec(
        strategy=strategy,
        keep_rate=keep_rate,
        rate_interval=rate_interval,
        seed=seed,
        grid_rows=model.grid[0],
        grid_cols=model.grid[1],
    )
    settings = dict(
        epochs=8,
        batch_size=32,
        base_lr=0.02,
        warmup_epochs=1,
        init_std=0.15,
        seed=seed,
    )
    settings.update(overrides)
    return TrainConfig(model=model, sampling=sampling, **settings)


def dataset_fingerprint(data: Dataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(data.images).tobytes())
    h.update(np.asarray(data.labels, dtype=np.int64).tobytes())
    for name in sorted(data.splits):
        h.update(name.encode())
        h.update(np.asarray(data.splits[name], dtype=np.int64).tobytes())
    return h.hexdigest()


def train_config_hash(cfg: TrainConfig, data: Dataset | None = None) -> str:
    payload = {"train": cfg.to_dict()}
    if data is not None:
        payload["data"] = dataset_fingerprint(data)
    return config_hash(payload)


def train_cached(cfg: TrainConfig, data: Dataset, cache: dict | None = None) -> TrainResult:
    """``train`` memoized on (config, dataset) when a cache dict is supplied."""
    if cache is None:
        return train(cfg, data)
    key = train_config_hash(cfg, data)
    if key not in cache:
        cache[key] = train(cfg, data)
    return cache[key]


def score_test(result: TrainResult, data: Dataset) -> tuple[float, float]:
    x, y = data.split("test")
    top1, loss, _ = evaluate(result.params, result.config.model, x, y)
    return top1, loss


# --------------------------------------------------------------------------
# CSV helpers


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ";".join(str(_fmt(x)) for x in v)
    return v


def rows_to_csv(rows: list[dict], columns: list[str] | tuple[str, ...]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k, "")) for k in columns})
    return buf.getvalue()


# --------------------------------------------------------------------------
# sweeps


@dataclass
class SweepPlan:
    base: TrainConfig
    axis: str
    values: list
    seeds: list[int] = field(default_factory=lambda: [0])
    repeats: int | None = None
    match_budget: bool | None = None  # default: on for the depth and image_size axes

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValueError(f"unknown sweep axis {self.axis!r}; choose from {AXES}")
        if not self.values:
            raise ValueError("sweep needs at least one value")
        if self.repeats is None:
            self.repeats = len(self.seeds)
        if self.repeats != len(self.seeds):
            raise ValueError(f"repeats={self.repeats} but {len(self.seeds)} seeds given")
        if self.match_budget is None:
            self.match_budget = self.axis in ("depth", "image_size")

    def to_dict(self) -> dict:
        return {
            "base": self.base.to_dict(),
            "axis": self.axis,
            "values": self.values,
            "seeds": list(self.seeds),
            "match_budget": self.match_budget,
        }

    @property
    def sweep_id(self) -> str:
        return config_hash(self.to_dict())[:12]


def _value_key(v) -> str:
    return v if isinstance(v, str) else canonical_json(v)


def _sort_key(v):
    if isinstance(v, (int, float)):
        return (0, float(v), "")
    return (1, 0.0, _value_key(v))


def _with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return replace(cfg, seed=seed, sampling=replace(cfg.sampling, seed=seed))


def _apply_overrides(base: TrainConfig, overrides: dict) -> TrainConfig:
    model_changes: dict = {}
    sampling_changes: dict = {}
    train_changes: dict = {}
    for key, v in overrides.items():
        if key == "variant":
            dims = VARIANTS[str(v).lower()]
            model_changes.update(dims)
        elif key == "image":
            model_changes.update(image_h=int(v), image_w=int(v))
        elif key in ("patch", "depth", "width", "heads", "classes", "channels", "mlp_ratio"):
            model_changes[key] = int(v)
        elif key == "keep_rate":
            sampling_changes.update(keep_rate=float(v), rate_interval=None)
        elif key == "strategy":
            sampling_changes["strategy"] = str(v)
        else:
            train_changes[key] = v
    model = replace(base.model, **model_changes) if model_changes else base.model
    sampling = replace(base.sampling, **sampling_changes).with_grid(*model.grid)
    return replace(base, model=model, sampling=sampling, **train_changes)


_AXIS_KEY = {
    "keep_rate": "keep_rate",
    "image_size": "image",
    "patch_size": "patch",
    "variant": "variant",
    "depth": "depth",
    "strategy": "strategy",
}


def _base_rate(cfg: TrainConfig) -> float:
    s = cfg.sampling
    return s.keep_rate if s.keep_rate is not None else 0.5 * (s.rate_interval[0] + s.rate_interval[1])


def cell_config(plan: SweepPlan, value, seed: int) -> TrainConfig:
    """Config for one sweep cell; dict values override several fields at once."""
    overrides = dict(value) if isinstance(value, dict) else {_AXIS_KEY[plan.axis]: value}
    cfg = _apply_overrides(plan.base, overrides)
    if plan.match_budget and "keep_rate" not in overrides:
        base_flops = empirical_flops(plan.base.model, kept_count(_base_rate(plan.base), plan.base.model.num_patches))
        rate = match_keep_rate(cfg.model, base_flops)
        cfg = _apply_overrides(cfg, {"keep_rate": rate})
    return _with_seed(cfg, seed)


def cell_id(axis: str, value, seed: int) -> str:
    raw = f"{axis}={_value_key(value)}__seed={seed}"
    return "".join(c if c.isalnum() or c in "=._-" else "_" for c in raw)


SWEEP_COLUMNS = (
    "config_hash", "cell_id", "axis", "value", "seed", "strategy", "keep_rate", "image", "patch", "depth",
    "width", "N", "k", "T", "flops_per_image", "train_flops", "epochs_run", "best_epoch", "val_top1",
    "test_top1", "test_loss", "status", "error",
)
SUMMARY_COLUMNS = (
    "config_hash", "axis", "value", "n", "seeds", "keep_rate", "flops_per_image", "train_flops_mean",
    "test_top1_mean", "test_top1_sd", "failed",
)


def _run_cell(args):
    cid, cfg, data = args
    try:
        res = train(cfg, data)
        top1, loss = score_test(res, data)
        return cid, res, top1, loss, ""
    except (PatchDropoutError, ValueError, ArithmeticError) as exc:
        return cid, None, math.nan, math.nan, f"{type(exc).__name__}: {exc}"


def _cell_row(plan_hash, cid, axis, value, seed, cfg, res, top1, loss, error):
    s = cfg.sampling
    N = cfg.model.num_patches
    rate = s.keep_rate if s.keep_rate is not None else f"{s.rate_interval[0]}-{s.rate_interval[1]}"
    k = kept_count(s.keep_rate, N) if s.keep_rate is not None else ""
    return dict(
        config_hash=plan_hash,
        cell_id=cid,
        axis=axis,
        value=_value_key(value),
        seed=seed,
        strategy=s.strategy,
        keep_rate=rate,
        image=cfg.model.image_h,
        patch=cfg.model.patch,
        depth=cfg.model.depth,
        width=cfg.model.width,
        N=N,
        k=k,
        T=(k + 1) if k != "" else "",
        flops_per_image=empirical_flops(cfg.model, k) if k != "" else "",
        train_flops=res.cum_flops if res else "",
        epochs_run=res.epochs_run if res else "",
        best_epoch=res.best_epoch if res else "",
        val_top1=res.best_val_top1 if res else "",
        test_top1=top1 if res else "",
        test_loss=loss if res else "",
        status="ok" if res else "failed",
        error=error,
    )


@dataclass
class SweepResult:
    plan: SweepPlan
    rows: list[dict]
    summary: list[dict]
    results: dict[str, TrainResult] = field(default_factory=dict, repr=False)

    def to_csv(self) -> str:
        return rows_to_csv(self.rows, SWEEP_COLUMNS)

    def summary_csv(self) -> str:
        return rows_to_csv(self.summary, SUMMARY_COLUMNS)


def run_sweep(
    plan: SweepPlan,
    data: Dataset | None = None,
    out_dir: str | Path | None = None,
    workers: int = 1,
    data_factory=None,
) -> SweepResult:
    """Train and test every (value, seed) cell; failed cells stay in the grid."""
    plan_hash = config_hash(plan.to_dict())
    datasets: dict[tuple, Dataset] = {}

    def data_for(cfg: TrainConfig) -> Dataset:
        shape = (cfg.model.channels, cfg.model.image_h, cfg.model.image_w)
        if data is not None and data.images.shape[1:] == shape:
            return data
        if shape not in datasets:
            factory = data_factory or (lambda c, h, w: make_synthetic(seed=0, size=h))
            datasets[shape] = factory(*shape)
        return datasets[shape]

    jobs, meta = [], {}
    for value in sorted(plan.values, key=_sort_key):
        for seed in plan.seeds:
            cid = cell_id(plan.axis, value, seed)
            try:
                cfg = cell_config(plan, value, seed)
                jobs.append((cid, cfg, data_for(cfg)))
                meta[cid] = (value, seed, cfg, "")
            except (PatchDropoutError, ValueError) as exc:
                meta[cid] = (value, seed, None, f"{type(exc).__name__}: {exc}")

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = {o[0]: o for o in pool.map(_run_cell, jobs)}
    else:
        outcomes = {o[0]: o for o in map(_run_cell, jobs)}

    rows, results = [], {}
    for cid, (value, seed, cfg, err) in meta.items():
        if cfg is None:
            rows.append(dict(config_hash=plan_hash, cell_id=cid, axis=plan.axis, value=_value_key(value),
                             seed=seed, status="failed", error=err))
            continue
        _, res, top1, loss, error = outcomes[cid]
        rows.append(_cell_row(plan_hash, cid, plan.axis, value, seed, cfg, res, top1, loss, error))
        if res is not None:
            results[cid] = res

    summary = []
    for value in sorted(plan.values, key=_sort_key):
        vrows = [r for r in rows if r["value"] == _value_key(value)]
        ok = [r for r in vrows if r["status"] == "ok"]
        accs = [r["test_top1"] for r in ok]
        summary.append(
            dict(
                config_hash=plan_hash,
                axis=plan.axis,
                value=_value_key(value),
                n=len(ok),
                seeds=[r["seed"] for r in vrows],
                keep_rate=vrows[0].get("keep_rate", "") if vrows else "",
                flops_per_image=vrows[0].get("flops_per_image", "") if vrows else "",
                train_flops_mean=statistics.fmean(r["train_flops"] for r in ok) if ok else "",
                test_top1_mean=statistics.fmean(accs) if accs else "",
                test_top1_sd=statistics.stdev(accs) if len(accs) > 1 else 0.0,
                failed=len(vrows) - len(ok),
            )
        )
    result = SweepResult(plan, rows, summary, results)
    if out_dir is not None:
        write_sweep(result, Path(out_dir))
    return result


def write_sweep(result: SweepResult, root: Path) -> Path:
    """runs/<sweep-id>/<cell-id>/{manifest.json, trainlog.csv, checkpoint.pdvt, metrics.csv}."""
    sweep_dir = root / result.plan.sweep_id
    sweep_dir.mkdir(parents=True, exist_ok=True)
    for row in result.rows:
        cdir = sweep_dir / row["cell_id"]
        cdir.mkdir(exist_ok=True)
        res = result.results.get(row["cell_id"])
        manifest = RunManifest("sweep-cell", {"plan": result.plan.to_dict(), "cell": row["cell_id"]})
        (cdir / "manifest.json").write_text(manifest.to_json())
        (cdir / "metrics.csv").write_text(rows_to_csv([row], SWEEP_COLUMNS))
        if res is not None:
            (cdir / "trainlog.csv").write_text(res.log.to_csv())
            (cdir / "checkpoint.pdvt").write_bytes(res.checkpoint())
    (sweep_dir / "results.csv").write_text(result.to_csv())
    (sweep_dir / "summary.csv").write_text(result.summary_csv())
    return sweep_dir


# --------------------------------------------------------------------------
# robustness


@dataclass
class RobustnessMatrix:
    train_rates: list[float]
    eval_rates: list[float]
    accuracy: list[list[float]]  # [train][eval]

    def at(self, train_rate: float, eval_rate: float) -> float:
        return self.accuracy[self.train_rates.index(train_rate)][self.eval_rates.index(eval_rate)]

    def same_rate(self) -> list[tuple[float, float]]:
        """Trained with dropout and evaluated at the training keep rate."""
        return [(r, self.at(r, r)) for r in self.train_rates if r in self.eval_rates]

    def baseline(self) -> list[tuple[float, float]]:
        """Fully trained model evaluated at reduced keep rates."""
        return [(e, self.at(1.0, e)) for e in self.eval_rates] if 1.0 in self.train_rates else []

    def full_eval(self) -> list[tuple[float, float]]:
        """Dropout-trained models evaluated with every token."""
        return [(r, self.at(r, 1.0)) for r in self.train_rates] if 1.0 in self.eval_rates else []

    def to_rows(self) -> list[dict]:
        rows = [
            dict(train_rate=t, eval_rate=e, accuracy=self.accuracy[i][j])
            for i, t in enumerate(self.train_rates)
            for j, e in enumerate(self.eval_rates)
        ]
        return rows

    def curve_rows(self) -> list[dict]:
        out = []
        for name, curve in (("same_rate", self.same_rate()), ("baseline", self.baseline()), ("full_eval", self.full_eval())):
            out.extend(dict(series=name, keep_rate=r, accuracy=a) for r, a in curve)
        return out

    def to_csv(self) -> str:
        return rows_to_csv(self.to_rows(), ("train_rate", "eval_rate", "accuracy"))

    def curves_csv(self) -> str:
        return rows_to_csv(self.curve_rows(), ("series", "keep_rate", "accuracy"))


def run_robustness(
    train_rates,
    eval_rates,
    base: TrainConfig,
    data: Dataset,
    cache: dict | None = None,
    eval_seed: int = EVAL_SEED,
) -> RobustnessMatrix:
    """One model per training keep rate, each tested at every evaluation keep rate.

    All models see the same per-image evaluation keep sets.
    """
    train_rates = [float(r) for r in train_rates]
    eval_rates = [float(r) for r in eval_rates]
    x, y = data.split("test")
    acc = []
    for r in train_rates:
        res = train_cached(_apply_overrides(base, {"keep_rate": r}), data, cache)
        row = []
        for e in eval_rates:
            top1, _, _ = evaluate(res.params, base.model, x, y, eval_keep_rate=e, seed=eval_seed)
            row.append(top1)
        acc.append(row)
    return RobustnessMatrix(train_rates, eval_rates, acc)


# --------------------------------------------------------------------------
# ensembles


@dataclass
class EnsembleResult:
    keep_rate: float
    seeds: list[int]
    member_top1: list[float]
    ensemble_top1: float
    total_train_flops: int

    def to_rows(self) -> list[dict]:
        rows = [dict(member=str(s), keep_rate=self.keep_rate, top1=a) for s, a in zip(self.seeds, self.member_top1)]
        rows.append(dict(member="ensemble", keep_rate=self.keep_rate, top1=self.ensemble_top1, train_flops=self.total_train_flops))
        return rows

    def to_csv(self) -> str:
        return rows_to_csv(self.to_rows(), ("member", "keep_rate", "top1", "train_flops"))


def run_ensemble(n_models: int, keep_rate: float, base: TrainConfig, data: Dataset, cache: dict | None = None) -> EnsembleResult:
    """Train ``n_models`` with seeds base.seed + i and average their softmax outputs."""
    if n_models < 1:
        raise ValueError("n_models must be >= 1")
    x, y = data.split("test")
    seeds = [base.seed + i for i in range(n_models)]
    probs, members, flops = [], [], 0
    for s in seeds:
        res = train_cached(_with_seed(_apply_overrides(base, {"keep_rate": keep_rate}), s), data, cache)
        top1, _, p = evaluate(res.params, base.model, x, y)
        members.append(top1)
        probs.append(p)
        flops += res.cum_flops
    avg = np.mean(probs, axis=0)
    ens = float((avg.argmax(axis=1) == y).mean())
    return EnsembleResult(float(keep_rate), seeds, members, ens, flops)


# --------------------------------------------------------------------------
# sampling strategies


@dataclass
class StrategyResult:
    keep_rate: float
    rows: list[dict]

    def means(self) -> dict[str, float]:
        out: dict[str, list[float]] = {}
        for r in self.rows:
            out.setdefault(r["strategy"], []).append(r["test_top1"])
        return {k: statistics.fmean(v) for k, v in out.items()}

    def to_csv(self) -> str:
        return rows_to_csv(self.rows, ("strategy", "seed", "keep_rate", "seq_len", "test_top1", "train_flops"))


def run_strategy_compare(
    strategies,
    keep_rate: float,
    base: TrainConfig,
    data: Dataset,
    seeds=None,
    cache: dict | None = None,
) -> StrategyResult:
    strategies = list(strategies)
    bad = [s for s in strategies if s not in STRATEGIES]
    if bad:
        raise ValueError(f"unknown strategies {bad}; choose from {STRATEGIES}")
    seeds = list(seeds) if seeds is not None else [base.seed]
    rows = []
    for strat in strategies:
        for s in seeds:
            cfg = _with_seed(_apply_overrides(base, {"keep_rate": keep_rate, "strategy": strat}), s)
            res = train_cached(cfg, data, cache)
            lengths = {st.seq_len for st in res.log.steps}
            top1, _ = score_test(res, data)
            rows.append(
                dict(strategy=strat, seed=s, keep_rate=float(keep_rate), seq_len=";".join(map(str, sorted(lengths))),
                     test_top1=top1, train_flops=res.cum_flops)
            )
    return StrategyResult(float(keep_rate), rows)
