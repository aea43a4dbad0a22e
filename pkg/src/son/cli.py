"""
Command-line harness: ``son generate|train|eval|noise|ensemble|compare``.

Every command writes a ``manifest.json`` into its ``--out`` directory holding
the argv, the resolved preset and the produced artifact paths, which is
enough to replay the run.

Exit codes: 0 success, 2 configuration error, 3 numeric divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from contextlib import nullcontext
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import diagnostics as diag
from .errors import ConfigError, ContractError, DimensionError, DomainError, NumericError
from .model import load_checkpoint, save_checkpoint
from .oracles import elliptic_truth, load_dataset, sample_elliptic_fields, save_dataset, spawn_rngs
from .presets import SCALES, ExperimentPreset, get_preset, list_presets
from .training import train

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _thread_limit():
    n = os.environ.get("SON_THREADS")
    if not n:
        return nullcontext()
    try:
        n = int(n)
    except ValueError:
        raise ConfigError(f"SON_THREADS must be an integer, got {n!r}") from None
    if n < 1:
        raise ConfigError("SON_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def resolve_preset(args) -> ExperimentPreset:
    """Preset from --preset/--scale, then the JSON --config file, then CLI flags."""
    file_cfg = {}
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            file_cfg = json.load(fh)
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
    name = args.preset or file_cfg.get("preset")
    if not name:
        raise ConfigError("a preset is required (--preset or 'preset' in the config file)")
    scale = args.scale or file_cfg.get("scale") or "paper"
    preset = get_preset(name, scale)
    overrides = {k: v for k, v in file_cfg.items() if k not in ("preset", "scale")}
    if overrides:
        try:
            preset = preset.override(overrides)
        except (TypeError, KeyError) as exc:
            raise ConfigError(f"bad config file: {exc}") from exc
    over = {}
    if getattr(args, "epochs", None) is not None:
        over["epochs"] = args.epochs
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if over:
        preset = preset.override({"train": over})
    return preset


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command, argv, started, preset=None, seed=None, artifacts=None, extra=None):
    manifest = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "run_dir": str(out.resolve()),
        "seed": seed,
        "started": started,
        "finished": _now(),
        "preset": preset.to_dict() if preset is not None else None,
        "artifacts": {k: str(v) for k, v in (artifacts or {}).items()},
    }
    if extra:
        manifest.update(extra)
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def _write_table(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _load_split(data_dir, split):
    path = Path(data_dir) / split
    if not path.is_dir():
        path = Path(data_dir)
    return load_dataset(path)


def _limit(ds, args):
    nf = getattr(args, "max_functions", None)
    nq = getattr(args, "max_queries", None)
    return ds.subset(nf, nq) if (nf or nq) else ds


def _check_pair(model, ds):
    if ds.d_out != model.d_out or ds.queries.shape[1] != model.trunk_cfg.query_dim:
        raise ConfigError(f"checkpoint ({model.kind}) does not fit dataset '{ds.experiment}'")
    want = int(np.prod(model.branch_cfg.input_shape))
    if ds.functions.shape[1] != want:
        raise ConfigError(f"checkpoint expects {want} sensors, dataset has {ds.functions.shape[1]}")


def _rng(seed, tag):
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag]))


INIT_TAG, EVAL_TAG, NOISE_TAG, ENSEMBLE_TAG = 11, 12, 13, 14


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(args, argv):
    started = _now()
    preset = resolve_preset(args)
    seed = preset.train.seed
    out = _out_dir(args)
    arts = {}
    for split in ("train", "test"):
        ds = preset.dataset.build(seed, split)
        save_dataset(ds, out / split)
        arts[split] = out / split
        print(f"{split}: {ds.n_functions} functions x {ds.n_queries} queries = {len(ds)} rows, d_out={ds.d_out}")
    _write_manifest(out, "generate", argv, started, preset, seed, arts)
    return EXIT_OK


def _train_one(preset, kind, train_ds, out, seed):
    model = preset.make_model(kind, _rng(seed, INIT_TAG))
    cfg = preset.train
    t0 = time.perf_counter()
    every = max(1, cfg.epochs // 20)

    def progress(row):
        if row.epoch % every == 0 or row.epoch == cfg.epochs - 1:
            print(f"[{kind}] epoch {row.epoch}  loss {row.mean_loss:.6g}  lr {row.lr:.3g}  {row.wall_ms:.0f} ms",
                  flush=True)

    result = train(model, train_ds, cfg, out_dir=str(out), callback=progress)
    wall = time.perf_counter() - t0
    ckpt = out / "checkpoint_final.npz"
    save_checkpoint(model, ckpt, cfg.epochs, extra={"experiment": preset.experiment, "preset": preset.name,
                                                      "scale": preset.scale, "seed": seed})
    return model, result, wall, ckpt


def cmd_train(args, argv):
    started = _now()
    preset = resolve_preset(args)
    seed = preset.train.seed
    train_ds = _load_split(args.data, "train")
    if train_ds.experiment != preset.experiment:
        raise ConfigError(f"dataset is '{train_ds.experiment}', preset is '{preset.experiment}'")
    out = _out_dir(args)
    with open(out / "preset.json", "w", encoding="utf-8") as fh:
        json.dump(preset.to_dict(), fh, indent=2, sort_keys=True)
    model, result, wall, ckpt = _train_one(preset, args.model, train_ds, out, seed)
    final = result.history[-1].mean_loss if result.history else float("nan")
    print(f"trained {args.model} for {len(result.history)} epochs in {wall:.1f}s; final mean loss {final:.6g}")
    _write_manifest(out, "train", argv, started, preset, seed,
                    {"checkpoint": ckpt, "history": out / "history.csv", "preset": out / "preset.json"},
                    {"model": args.model, "wall_seconds": wall, "final_loss": final})
    return EXIT_OK


def cmd_eval(args, argv):
    started = _now()
    model, epoch, extra = load_checkpoint(args.checkpoint)
    out = _out_dir(args)
    rows = []
    for split in args.split:
        ds = _limit(_load_split(args.data, split), args)
        _check_pair(model, ds)
        t0 = time.perf_counter()
        mse = diag.eval_mse(model, ds, _rng(args.seed, EVAL_TAG))
        rows.append([split, len(ds), repr(mse), f"{1000 * (time.perf_counter() - t0):.3f}"])
        print(f"{split}: mse {mse:.6g} over {len(ds)} samples")
    _write_table(out / "eval_report.csv", ["split", "n_samples", "mse", "wall_ms"], rows)
    _write_manifest(out, "eval", argv, started, None, args.seed, {"report": out / "eval_report.csv"},
                    {"checkpoint_epoch": epoch, "checkpoint_meta": extra})
    return EXIT_OK


def cmd_noise(args, argv):
    started = _now()
    model, epoch, extra = load_checkpoint(args.checkpoint)
    ds = _limit(_load_split(args.data, args.split[0]), args)
    _check_pair(model, ds)
    out = _out_dir(args)
    report = diag.noise_recovery(model, ds, args.reps, _rng(args.seed, NOISE_TAG),
                                 dataset_id=f"{ds.experiment}/{args.split[0]}")
    diag.write_noise_report(report, out / "noise_report.csv")
    print("recovered noise per dimension:", " ".join(f"{v:.6g}" for v in report.per_dim),
          f"| overall {report.overall:.6g} (reps={report.reps}, samples={report.n_samples})")
    _write_manifest(out, "noise", argv, started, None, args.seed, {"report": out / "noise_report.csv"},
                    {"checkpoint_epoch": epoch, "checkpoint_meta": extra})
    return EXIT_OK


def elliptic_ensembles(model, count, length_scale, seed, query_x, n_sensors=100):
    """Model ensemble on the reference fields, the reference solutions, and an independent oracle ensemble.

    The model predicts (one stochastic draw each) from the same ``count`` fields
    that produced the reference, so the comparison isolates model error; the
    second oracle ensemble uses fresh fields and only serves the MC floor.
    """
    x = np.linspace(0.0, 1.0, n_sensors)
    idx = np.searchsorted(x, np.asarray(query_x).ravel() - 1e-12)
    fields = []
    for tag in (1, 2):
        rngs = spawn_rngs([int(seed), ENSEMBLE_TAG, tag], count)
        fields.append(sample_elliptic_fields(rngs, length_scale=length_scale, m=n_sensors)[0])
    y = np.asarray(query_x, dtype=float).reshape(-1, 1)
    rng = _rng(seed, ENSEMBLE_TAG)
    model_ens = np.stack([model.predict_values(np.repeat(b[None], len(y), 0), y, rng)[:, 0] for b in fields[0]])
    ref1 = elliptic_truth(fields[0])[:, idx]
    ref2 = elliptic_truth(fields[1])[:, idx]
    return model_ens, ref1, ref2


def cmd_ensemble(args, argv):
    started = _now()
    model, epoch, extra = load_checkpoint(args.checkpoint)
    ds = _load_split(args.data, args.split[0])
    _check_pair(model, ds)
    out = _out_dir(args)
    arts = {}
    summary = []
    if ds.experiment == "elliptic":
        model_ens, ref1, ref2 = elliptic_ensembles(model, args.count, args.length_scale, args.seed, ds.queries[:, 0])
        floor = diag.mc_floor(ref1, ref2)
        rep = diag.covariance_compare(model_ens, ref1, mc_floor=floor)
        arts.update(diag.write_covariance_report(rep, out))
        inside = diag.mean_within_band(model_ens, ref1)
        mean, std = model_ens.mean(axis=0), model_ens.std(axis=0, ddof=1)
        ens = diag.Ensemble(mean[:, None], std[:, None], (mean - 2 * std)[:, None], (mean + 2 * std)[:, None],
                            model_ens[..., None])
        summary = [["max_abs_cov_diff", repr(rep.max_abs)], ["frobenius_cov_diff", repr(rep.frobenius)],
                   ["mc_floor", repr(floor)], ["ratio_to_floor", repr(rep.max_abs / floor)],
                   ["mean_within_3se_fraction", repr(float(inside.mean()))]]
        y = ds.queries
    else:
        u = ds.functions[args.function]
        ens = diag.ensemble_stats(model, u, ds.queries, args.count, _rng(args.seed, ENSEMBLE_TAG))
        summary = [["mean_band_width", repr(float((ens.hi - ens.lo).mean()))]]
        y = ds.queries
    diag.write_band(y, ens, out / "band.csv")
    arts["band"] = out / "band.csv"
    _write_table(out / "ensemble_summary.csv", ["metric", "value"], summary)
    arts["summary"] = out / "ensemble_summary.csv"
    for k, v in summary:
        print(f"{k}: {float(v):.6g}")
    _write_manifest(out, "ensemble", argv, started, None, args.seed, arts,
                    {"checkpoint_epoch": epoch, "checkpoint_meta": extra})
    return EXIT_OK


def cmd_compare(args, argv):
    started = _now()
    preset = resolve_preset(args)
    seed = preset.train.seed
    train_ds = _load_split(args.data, "train")
    test_ds = _limit(_load_split(args.data, "test"), args)
    if train_ds.experiment != preset.experiment:
        raise ConfigError(f"dataset is '{train_ds.experiment}', preset is '{preset.experiment}'")
    out = _out_dir(args)
    rows, arts = [], {}
    for kind in ("son", "baseline"):
        sub = out / kind
        sub.mkdir(exist_ok=True)
        model, result, wall, ckpt = _train_one(preset, kind, train_ds, sub, seed)
        arts[f"{kind}_checkpoint"] = ckpt
        train_mse = diag.eval_mse(model, train_ds, _rng(seed, EVAL_TAG))
        test_mse = diag.eval_mse(model, test_ds, _rng(seed, EVAL_TAG))
        noise = diag.noise_recovery(model, test_ds, args.reps, _rng(seed, NOISE_TAG))
        rows.append([kind, repr(train_mse), repr(test_mse), repr(noise.overall), f"{wall:.3f}"])
        print(f"{kind:9s} train_mse {train_mse:.5g}  test_mse {test_mse:.5g}  noise {noise.overall:.5g}  "
              f"wall {wall:.1f}s")
    _write_table(out / "compare.csv", ["model", "train_mse", "test_mse", "recovered_noise", "wall_seconds"], rows)
    arts["compare"] = out / "compare.csv"
    _write_manifest(out, "compare", argv, started, preset, seed, arts)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="son", description="Stochastic operator network experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def preset_flags(sp):
        sp.add_argument("--preset", choices=list_presets())
        sp.add_argument("--config", help="JSON file: {'preset': ..., 'scale': ..., <section>: {...}}")
        sp.add_argument("--scale", choices=SCALES)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--epochs", type=int)

    def subset_flags(sp):
        sp.add_argument("--max-functions", type=int)
        sp.add_argument("--max-queries", type=int)

    g = sub.add_parser("generate", help="sample train/test datasets for a preset")
    preset_flags(g)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a SON or baseline model")
    preset_flags(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--model", choices=("son", "baseline"), default="son")

    for name, hlp in (("eval", "single-draw MSE"), ("noise", "noise-recovery report"),
                      ("ensemble", "ensemble band / covariance study")):
        e = sub.add_parser(name, help=hlp)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--data", required=True)
        e.add_argument("--out", required=True)
        e.add_argument("--seed", type=int, default=0)
        e.add_argument("--split", nargs="+", default=["test"], choices=("train", "test"))
        subset_flags(e)
        if name == "noise":
            e.add_argument("--reps", type=int, default=100)
        if name == "ensemble":
            e.add_argument("--count", type=int, default=1000)
            e.add_argument("--length-scale", type=float, default=1.5)
            e.add_argument("--function", type=int, default=0)

    c = sub.add_parser("compare", help="train SON and the baseline on one dataset and tabulate both")
    preset_flags(c)
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--reps", type=int, default=100)
    subset_flags(c)
    return p


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "noise": cmd_noise,
            "ensemble": cmd_ensemble, "compare": cmd_compare}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        with _thread_limit():
            return COMMANDS[args.command](args, argv)
    except (ConfigError, DimensionError, ContractError, DomainError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
