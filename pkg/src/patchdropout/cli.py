"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error.

Settings resolve in three layers: built-in defaults, then an optional
``--config`` file of flat ``key=value`` lines, then explicit flags. Keys use
the flag names with underscores (``keep_rate``, ``base_lr`` ...).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .cost import cost_report
from .errors import PatchDropoutError, UsageError
from .manifest import RunManifest

log = logging.getLogger("patchdropout")

SUBCOMMANDS = ("dataset-gen", "train", "eval", "cost", "sweep", "robustness", "ensemble", "strategies", "plot")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2) itself
        raise UsageError(message)


# --------------------------------------------------------------------------
# option groups: (flag, key, type, default, help)

_MODEL = [
    ("--variant", "variant", str, None, "named ViT size: tiny, small, base, large"),
    ("--depth", "depth", int, 2, "transformer blocks"),
    ("--width", "width", int, 32, "embedding width"),
    ("--heads", "heads", int, 2, "attention heads"),
    ("--patch", "patch", int, 4, "patch size in pixels"),
    ("--image", "image", int, 32, "square image side in pixels"),
    ("--classes", "classes", int, 4, "number of classes"),
    ("--channels", "channels", int, 1, "image channels"),
    ("--mlp-ratio", "mlp_ratio", int, 4, "MLP hidden / width"),
]
_SAMPLING = [
    ("--strategy", "strategy", str, "random", "random, uniform, structured or cropping"),
    ("--keep-rate", "keep_rate", float, 1.0, "fraction of patches kept per training step"),
    ("--rate-interval", "rate_interval", str, None, "lo,hi: draw the keep rate per step uniformly"),
    ("--shared-keep-set", "shared_keep_set", "flag", False, "one keep set per batch instead of per image"),
]
_TRAIN = [
    ("--epochs", "epochs", int, 8, ""),
    ("--batch-size", "batch_size", int, 32, ""),
    ("--base-lr", "base_lr", float, 0.02, ""),
    ("--warmup-epochs", "warmup_epochs", int, 1, ""),
    ("--momentum", "momentum", float, 0.9, ""),
    ("--weight-decay", "weight_decay", float, 1e-4, ""),
    ("--label-smoothing", "label_smoothing", float, 0.1, ""),
    ("--seed", "seed", int, 0, ""),
    ("--early-stop-patience", "early_stop_patience", int, 0, "0 disables early stopping"),
    ("--flip", "flip", "flag", False, "horizontal flip augmentation"),
    ("--crop-pad", "crop_pad", int, 0, "pad-and-crop augmentation margin"),
    ("--init-std", "init_std", float, 0.15, "truncated-normal init std"),
    ("--decay-exempt", "decay_exempt", "flag", False, "no weight decay on biases, norms, cls, pos"),
]
_DATA = [
    ("--data", "data", str, None, "TID file; default is the generated synthetic benchmark"),
    ("--data-seed", "data_seed", int, 0, "seed of the synthetic benchmark"),
    ("--n-train", "n_train", int, 4000, ""),
    ("--n-val", "n_val", int, 500, ""),
    ("--n-test", "n_test", int, 500, ""),
    ("--noise", "noise", float, 0.2, "pixel noise of the synthetic benchmark"),
]
_OUT = [
    ("--out", "out", str, None, "output directory (default: $PATCHDROP_RUNS_DIR or ./runs)"),
]

_SPECIFIC = {
    "dataset-gen": [
        ("--out", "out", str, None, "TID file to write"),
        ("--data-seed", "data_seed", int, 0, ""),
        ("--n-train", "n_train", int, 4000, ""),
        ("--n-val", "n_val", int, 500, ""),
        ("--n-test", "n_test", int, 500, ""),
        ("--image", "image", int, 32, ""),
        ("--noise", "noise", float, 0.2, ""),
    ],
    "train": _MODEL + _SAMPLING + _TRAIN + _DATA + _OUT,
    "eval": [
        ("--checkpoint", "checkpoint", str, None, "PDVT checkpoint"),
        ("--eval-keep-rate", "eval_keep_rate", float, 1.0, "fraction of patches kept at test time"),
        ("--split", "split", str, "test", "train, val or test"),
        ("--eval-seed", "eval_seed", int, 0, ""),
    ]
    + _DATA,
    "cost": [
        ("--variant", "variant", str, "base", "comma list of variants"),
        ("--image", "image", str, "224", "comma list of image sides"),
        ("--patch", "patch", int, 16, ""),
        ("--keep-rate", "keep_rate", str, "1.0", "comma list of keep rates"),
        ("--classes", "classes", int, 1000, ""),
        ("--batch-size", "batch_size", int, 1, "batch used for the activation estimate"),
        ("--out", "out", str, None, "CSV file (default: stdout)"),
    ],
    "sweep": _MODEL + _SAMPLING + _TRAIN + _DATA + _OUT
    + [
        ("--axis", "axis", str, "keep_rate", "keep_rate, image_size, patch_size, variant, depth or strategy"),
        ("--values", "values", str, None, "comma list of axis values"),
        ("--seeds", "seeds", str, "0", "comma list of seeds"),
        ("--workers", "workers", int, 1, "parallel worker processes"),
    ],
    "robustness": _MODEL + _SAMPLING + _TRAIN + _DATA + _OUT
    + [
        ("--train-rates", "train_rates", str, "1.0,0.5,0.25", ""),
        ("--eval-rates", "eval_rates", str, "1.0,0.5,0.25,0.1,0.05", ""),
    ],
    "ensemble": _MODEL + _SAMPLING + _TRAIN + _DATA + _OUT + [("--n-models", "n_models", int, 2, "")],
    "strategies": _MODEL + _SAMPLING + _TRAIN + _DATA + _OUT
    + [
        ("--strategies", "strategies", str, "random,uniform,structured,cropping", ""),
        ("--seeds", "seeds", str, "0", ""),
    ],
    "plot": [
        ("--csv", "csv", str, None, "input CSV"),
        ("--kind", "kind", str, None, "keep_rate_curve, robustness or savings"),
        ("--out", "out", str, None, "SVG file (default: CSV path with .svg)"),
        ("--title", "title", str, "", ""),
    ],
}

_REQUIRED = {"dataset-gen": ("out",), "eval": ("checkpoint",), "plot": ("csv", "kind"), "sweep": ("values",)}
_TRAINS = ("train", "sweep", "robustness", "ensemble", "strategies")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="patchdropout", description="PatchDropout training, cost model and experiments.")
    parser.add_argument("--version", action="version", version=f"patchdropout {__version__}")
    sub = parser.add_subparsers(dest="subcommand", parser_class=_Parser)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", dest="config", default=None, help="flat key=value settings file")
        p.add_argument("--dry-run", dest="dry_run", action="store_true", help="print the manifest and cost prediction only")
        p.add_argument("-v", "--verbose", dest="verbose", action="store_true")
        seen = set()
        for flag, key, typ, _default, help_ in _SPECIFIC[name]:
            if flag in seen:
                continue
            seen.add(flag)
            if typ == "flag":
                p.add_argument(flag, dest=key, action="store_const", const=True, default=None, help=help_)
            else:
                aliases = [flag, "--keep"] if flag == "--keep-rate" else [flag]
                p.add_argument(*aliases, dest=key, type=str, default=None, help=help_)
    return parser


def _spec_table(sub: str) -> dict:
    table = {}
    for flag, key, typ, default, _ in _SPECIFIC[sub]:
        table.setdefault(key, (flag, typ, default))
    return table


def _convert(key: str, flag: str, typ, raw):
    if typ == "flag":
        if isinstance(raw, bool):
            return raw
        low = str(raw).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{flag}: expected a boolean, got {raw!r}")
    try:
        return typ(raw)
    except (TypeError, ValueError):
        raise UsageError(f"{flag}: expected {typ.__name__}, got {raw!r}") from None


def read_config_file(path: str) -> dict[str, str]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"--config: cannot read {path}: {exc.strerror}") from None
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"--config {path}:{lineno}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _floats(flag: str, text: str) -> list[float]:
    try:
        return [float(s) for s in str(text).split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"{flag}: expected a comma-separated list of numbers, got {text!r}") from None


def _ints(flag: str, text: str) -> list[int]:
    try:
        return [int(s) for s in str(text).split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"{flag}: expected a comma-separated list of integers, got {text!r}") from None


def _check_rate(flag: str, r: float) -> None:
    if not (0.0 < r <= 1.0):
        raise UsageError(f"{flag}: keep rate must lie in (0, 1], got {r}")


def _validate(sub: str, cfg: dict) -> None:
    for key in _REQUIRED.get(sub, ()):
        if cfg.get(key) in (None, ""):
            raise UsageError(f"--{key.replace('_', '-')} is required for {sub}")
    if sub in _TRAINS:
        _check_rate("--keep-rate", cfg["keep_rate"])
        if cfg.get("rate_interval"):
            lo_hi = _floats("--rate-interval", cfg["rate_interval"])
            if len(lo_hi) != 2 or lo_hi[0] > lo_hi[1]:
                raise UsageError("--rate-interval: expected lo,hi with lo <= hi")
            for r in lo_hi:
                _check_rate("--rate-interval", r)
        if cfg["strategy"] not in ("random", "uniform", "structured", "cropping"):
            raise UsageError(f"--strategy: unknown strategy {cfg['strategy']!r}")
        if cfg.get("variant") and cfg["variant"] not in ("tiny", "small", "base", "large"):
            raise UsageError(f"--variant: unknown variant {cfg['variant']!r}")
    if sub == "cost":
        for r in _floats("--keep-rate", cfg["keep_rate"]):
            _check_rate("--keep-rate", r)
        _ints("--image", cfg["image"])
        for v in str(cfg["variant"]).split(","):
            if v not in ("tiny", "small", "base", "large"):
                raise UsageError(f"--variant: unknown variant {v!r}")
    if sub == "eval":
        _check_rate("--eval-keep-rate", cfg["eval_keep_rate"])
    if sub == "robustness":
        for r in _floats("--train-rates", cfg["train_rates"]) + _floats("--eval-rates", cfg["eval_rates"]):
            _check_rate("--train-rates/--eval-rates", r)
    if sub == "sweep":
        from .experiments import AXES

        if cfg["axis"] not in AXES:
            raise UsageError(f"--axis: unknown axis {cfg['axis']!r}")
        _ints("--seeds", cfg["seeds"])
    if sub == "plot" and cfg["kind"] not in ("keep_rate_curve", "robustness", "savings"):
        raise UsageError(f"--kind: unknown plot kind {cfg['kind']!r}")


def parse_args(argv) -> RunManifest:
    """Resolve flags and config file into a complete manifest."""
    argv = list(argv)
    if not argv:
        raise UsageError("a subcommand is required")
    parser = build_parser()
    ns = parser.parse_args(argv)
    if ns.subcommand is None:
        raise UsageError("a subcommand is required")
    sub = ns.subcommand
    table = _spec_table(sub)

    cfg = {key: default for key, (_, _, default) in table.items()}
    if ns.config:
        for k, v in read_config_file(ns.config).items():
            if k not in table:
                raise UsageError(f"--config: unknown key {k!r} for {sub}")
            flag, typ, _ = table[k]
            cfg[k] = _convert(k, flag, typ, v)
    for key, (flag, typ, _) in table.items():
        raw = getattr(ns, key, None)
        if raw is not None:
            cfg[key] = _convert(key, flag, typ, raw)
    cfg["dry_run"] = bool(ns.dry_run)
    _validate(sub, cfg)
    return RunManifest(sub, cfg)


# --------------------------------------------------------------------------
# execution


def _model_config(cfg: dict):
    from .model import VARIANTS, ModelConfig

    dims = dict(depth=cfg["depth"], width=cfg["width"], heads=cfg["heads"])
    if cfg.get("variant"):
        dims.update(VARIANTS[cfg["variant"]])
    return ModelConfig(
        patch=cfg["patch"],
        image_h=cfg["image"],
        image_w=cfg["image"],
        classes=cfg["classes"],
        channels=cfg["channels"],
        mlp_ratio=cfg["mlp_ratio"],
        **dims,
    )


def _train_config(cfg: dict):
    from .sampler import SamplingSpec
    from .trainer import TrainConfig

    model = _model_config(cfg)
    interval = tuple(_floats("--rate-interval", cfg["rate_interval"])) if cfg.get("rate_interval") else None
    sampling = SamplingSpec(
        strategy=cfg["strategy"],
        keep_rate=None if interval else cfg["keep_rate"],
        rate_interval=interval,
        seed=cfg["seed"],
        grid_rows=model.grid[0],
        grid_cols=model.grid[1],
        per_sample=not cfg["shared_keep_set"],
    )
    keys = ("epochs", "batch_size", "base_lr", "warmup_epochs", "momentum", "weight_decay", "label_smoothing",
            "seed", "early_stop_patience", "flip", "crop_pad", "init_std", "decay_exempt")
    return TrainConfig(model=model, sampling=sampling, **{k: cfg[k] for k in keys})


def _dataset(cfg: dict):
    from .data import load_dataset, make_synthetic

    if cfg.get("data"):
        return load_dataset(cfg["data"])
    return make_synthetic(
        seed=cfg["data_seed"], n_train=cfg["n_train"], n_val=cfg["n_val"], n_test=cfg["n_test"],
        size=cfg["image"], noise=cfg["noise"],
    )


def _out_dir(manifest: RunManifest) -> Path:
    from .experiments import runs_root

    root = Path(manifest.config["out"]) if manifest.config.get("out") else runs_root() / manifest.subcommand
    out = root / manifest.config_hash[:12]
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(manifest.to_json())
    return out


def _prediction(cfg: dict) -> dict:
    from .cost import cost_report

    model = _model_config(cfg)
    rate = cfg["keep_rate"]
    if cfg.get("rate_interval"):
        lo, hi = _floats("--rate-interval", cfg["rate_interval"])
        rate = (lo + hi) / 2
    rep = cost_report(model, rate, batch=cfg["batch_size"])
    steps = -(-cfg["n_train"] // cfg["batch_size"]) * cfg["epochs"] if cfg.get("n_train") else None
    out = rep.as_row()
    out["train_forward_flops_estimate"] = rep.empirical_flops * cfg["batch_size"] * steps if steps else None
    return out


def _cmd_dataset_gen(m: RunManifest) -> int:
    from .data import make_synthetic, save_dataset

    c = m.config
    ds = make_synthetic(seed=c["data_seed"], n_train=c["n_train"], n_val=c["n_val"], n_test=c["n_test"],
                        size=c["image"], noise=c["noise"])
    save_dataset(c["out"], ds)
    Path(c["out"] + ".manifest.json").write_text(m.to_json())
    print(c["out"])
    return 0


def _cmd_train(m: RunManifest) -> int:
    from .experiments import SWEEP_COLUMNS, rows_to_csv, score_test
    from .trainer import train

    tcfg = _train_config(m.config)
    data = _dataset(m.config)
    res = train(tcfg, data)
    top1, loss = score_test(res, data)
    out = _out_dir(m)
    (out / "trainlog.csv").write_text(res.log.to_csv())
    (out / "checkpoint.pdvt").write_bytes(res.checkpoint())
    row = dict(config_hash=m.config_hash, seed=tcfg.seed, strategy=tcfg.sampling.strategy,
               keep_rate=m.config["rate_interval"] or tcfg.sampling.keep_rate, train_flops=res.cum_flops,
               epochs_run=res.epochs_run, best_epoch=res.best_epoch, val_top1=res.best_val_top1,
               test_top1=top1, test_loss=loss, status="ok")
    (out / "metrics.csv").write_text(rows_to_csv([row], [c for c in SWEEP_COLUMNS if c in row]))
    print(f"test_top1={top1:.4f} train_flops={res.cum_flops} -> {out}")
    return 0


def _cmd_eval(m: RunManifest) -> int:
    from .experiments import rows_to_csv
    from .model import load_checkpoint
    from .trainer import evaluate

    c = m.config
    model, params = load_checkpoint(c["checkpoint"])
    data = _dataset({**c, "image": model.image_h})
    x, y = data.split(c["split"])
    top1, loss, _ = evaluate(params, model, x, y, eval_keep_rate=c["eval_keep_rate"], seed=c["eval_seed"])
    row = dict(config_hash=m.config_hash, split=c["split"], eval_keep_rate=c["eval_keep_rate"], top1=top1, loss=loss)
    sys.stdout.write(rows_to_csv([row], list(row)))
    return 0


COST_COLUMNS = ("config_id", "keep_rate", "N", "kept_patches", "token_count", "theoretical_flops", "empirical_flops",
                "relative_theoretical", "relative_empirical", "activation_elements", "parameter_count")


def cost_rows(variants, images, patch, rates, classes=1000, batch=1) -> list[dict]:
    from .model import variant as make_variant

    rows = []
    for v in variants:
        for image in images:
            cfg = make_variant(v, image=image, patch=patch, classes=classes)
            for r in rates:
                rep = cost_report(cfg, r, batch=batch, config_id=f"{v}-{image}-p{patch}-r{r:g}")
                rows.append({"keep_rate": r, **rep.as_row()})
    return rows


def _cmd_cost(m: RunManifest) -> int:
    from .experiments import rows_to_csv

    c = m.config
    rows = cost_rows(str(c["variant"]).split(","), _ints("--image", c["image"]), c["patch"],
                     _floats("--keep-rate", c["keep_rate"]), c["classes"], c["batch_size"])
    text = rows_to_csv(rows, COST_COLUMNS)
    if c.get("out"):
        Path(c["out"]).write_text(text)
        Path(c["out"] + ".manifest.json").write_text(m.to_json())
    else:
        sys.stdout.write(text)
    return 0


def _parse_values(axis: str, text: str) -> list:
    vals = []
    for s in text.split(","):
        s = s.strip()
        if not s:
            continue
        if axis in ("strategy", "variant"):
            vals.append(s)
        elif axis == "keep_rate":
            v = float(s)
            _check_rate("--values", v)
            vals.append(v)
        else:
            try:
                vals.append(int(s))
            except ValueError:
                raise UsageError(f"--values: expected integers for axis {axis}, got {s!r}") from None
    return vals


def _cmd_sweep(m: RunManifest) -> int:
    from .experiments import SweepPlan, run_sweep, runs_root

    c = m.config
    plan = SweepPlan(_train_config(c), c["axis"], _parse_values(c["axis"], c["values"]), _ints("--seeds", c["seeds"]))
    data = _dataset(c)
    root = Path(c["out"]) if c.get("out") else runs_root()
    res = run_sweep(plan, data, out_dir=root, workers=c["workers"])
    sweep_dir = root / plan.sweep_id
    (sweep_dir / "manifest.json").write_text(m.to_json())
    failed = sum(r["status"] != "ok" for r in res.rows)
    print(f"{len(res.rows)} cells ({failed} failed) -> {sweep_dir / 'summary.csv'}")
    return 1 if failed == len(res.rows) else 0


def _cmd_robustness(m: RunManifest) -> int:
    from .experiments import run_robustness
    from .plot import render_svg, read_rows

    c = m.config
    mat = run_robustness(_floats("--train-rates", c["train_rates"]), _floats("--eval-rates", c["eval_rates"]),
                         _train_config(c), _dataset(c))
    out = _out_dir(m)
    (out / "robustness.csv").write_text(mat.to_csv())
    curves = mat.curves_csv()
    (out / "curves.csv").write_text(curves)
    (out / "curves.svg").write_text(render_svg(read_rows(curves), "robustness", "keep-rate robustness"))
    print(out / "robustness.csv")
    return 0


def _cmd_ensemble(m: RunManifest) -> int:
    from .experiments import run_ensemble

    c = m.config
    tcfg = _train_config(c)
    res = run_ensemble(c["n_models"], c["keep_rate"], tcfg, _dataset(c))
    out = _out_dir(m)
    (out / "ensemble.csv").write_text(res.to_csv())
    print(f"ensemble_top1={res.ensemble_top1:.4f} total_train_flops={res.total_train_flops} -> {out}")
    return 0


def _cmd_strategies(m: RunManifest) -> int:
    from .experiments import run_strategy_compare

    c = m.config
    res = run_strategy_compare(c["strategies"].split(","), c["keep_rate"], _train_config(c), _dataset(c),
                               seeds=_ints("--seeds", c["seeds"]))
    out = _out_dir(m)
    (out / "strategies.csv").write_text(res.to_csv())
    print(out / "strategies.csv")
    return 0


def _cmd_plot(m: RunManifest) -> int:
    from .plot import emit_plot

    c = m.config
    path = emit_plot(c["csv"], c["kind"], c.get("out"), c.get("title", ""))
    print(path)
    return 0


_COMMANDS = {
    "dataset-gen": _cmd_dataset_gen,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "cost": _cmd_cost,
    "sweep": _cmd_sweep,
    "robustness": _cmd_robustness,
    "ensemble": _cmd_ensemble,
    "strategies": _cmd_strategies,
    "plot": _cmd_plot,
}


def execute(manifest: RunManifest) -> int:
    if manifest.config.get("dry_run"):
        payload = manifest.to_dict()
        if manifest.subcommand in _TRAINS:
            payload["prediction"] = _prediction(manifest.config)
        elif manifest.subcommand == "cost":
            c = manifest.config
            payload["prediction"] = cost_rows(str(c["variant"]).split(","), _ints("--image", c["image"]), c["patch"],
                                              _floats("--keep-rate", c["keep_rate"]), c["classes"], c["batch_size"])
        print(json.dumps(payload, sort_keys=True, indent=2, default=str))
        return 0
    return _COMMANDS[manifest.subcommand](manifest)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        manifest = parse_args(argv)
    except UsageError as exc:
        build_parser().print_usage(sys.stderr)
        print(f"patchdropout: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if "-v" in argv or "--verbose" in argv else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return execute(manifest)
    except UsageError as exc:
        print(f"patchdropout: error: {exc}", file=sys.stderr)
        return 2
    except (PatchDropoutError, OSError, ValueError) as exc:
        print(f"patchdropout: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
