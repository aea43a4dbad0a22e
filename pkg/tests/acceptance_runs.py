"""Training reproductions behind the acceptance gate, with an on-disk result cache.

A reproduction trains a preset from scratch and records its metrics as JSON.
The cache key hashes the resolved preset, every module under ``src/son`` and
this file, so any code change forces a fresh run.  Set ``SON_ACCEPTANCE_RERUN=1``
to ignore the cache entirely.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from pathlib import Path

import numpy as np

import son
from son import diagnostics as diag
from son.cli import INIT_TAG, EVAL_TAG, NOISE_TAG, elliptic_ensembles, _rng
from son.presets import get_preset
from son.training import train

CACHE = Path(__file__).parent / "acceptance_cache"
SRC = Path(son.__file__).parent

# test-set slice used for noise recovery and test MSE (the full 1D test set is 10^6 rows)
NOISE_SUBSET = {"antiderivative": (100, 100), "exp_ode": (100, 100), "pendulum2d": (100, 100),
                "double_integral": (None, None), "elliptic": (None, None)}


def _key(preset, kinds) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(preset.to_dict(), sort_keys=True).encode())
    h.update(json.dumps(sorted(kinds)).encode())
    for p in sorted(SRC.glob("*.py")) + [Path(__file__)]:
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _fit(preset, kind, train_ds, test_ds, seed):
    model = preset.make_model(kind, _rng(seed, INIT_TAG))
    t0 = time.perf_counter()
    result = train(model, train_ds, preset.train)
    wall = time.perf_counter() - t0
    noise = diag.noise_recovery(model, test_ds, preset.noise_reps, _rng(seed, NOISE_TAG))
    out = {
        "epochs": len(result.history),
        "final_loss": result.history[-1].mean_loss,
        "train_mse": diag.eval_mse(model, train_ds, _rng(seed, EVAL_TAG)),
        "test_mse": diag.eval_mse(model, test_ds, _rng(seed, EVAL_TAG)),
        "noise": noise.overall,
        "noise_per_dim": [float(v) for v in noise.per_dim],
        "noise_reps": noise.reps,
        "noise_samples": noise.n_samples,
        "wall_seconds": wall,
        "sec_per_epoch": wall / max(1, len(result.history)),
    }
    if preset.experiment == "elliptic" and kind == "son":
        model_ens, ref1, ref2 = elliptic_ensembles(model, 1000, 1.5, seed, train_ds.queries[:, 0])
        floor = diag.mc_floor(ref1, ref2)
        rep = diag.covariance_compare(model_ens, ref1, mc_floor=floor)
        out.update(cov_max_abs=rep.max_abs, mc_floor=floor, cov_ratio=rep.max_abs / floor,
                   band_fraction=float(diag.mean_within_band(model_ens, ref1).mean()))
    return out


def reproduce(name, scale, kinds=("son",), seed=0, overrides=None) -> dict:
    """Metrics for training ``kinds`` on preset ``name``; cached by code and config hash."""
    preset = get_preset(name, scale)
    if overrides:
        preset = preset.override(overrides)
    key = _key(preset, kinds)
    path = CACHE / f"{name}_{scale}_{'_'.join(kinds)}.json"
    if path.exists() and os.environ.get("SON_ACCEPTANCE_RERUN") != "1":
        cached = json.loads(path.read_text())
        if cached.get("key") == key:
            return cached["metrics"]
    train_ds = preset.dataset.build(seed, "train")
    test_ds = preset.dataset.build(seed, "test").subset(*NOISE_SUBSET[name])
    metrics = {kind: _fit(preset, kind, train_ds, test_ds, seed) for kind in kinds}
    metrics["preset"] = preset.to_dict()
    CACHE.mkdir(exist_ok=True)
    path.write_text(json.dumps({"key": key, "metrics": metrics}, indent=2, sort_keys=True))
    return metrics


if __name__ == "__main__":
    import sys
    name, scale, *kinds = sys.argv[1:]
    print(json.dumps({k: v for k, v in reproduce(name, scale, tuple(kinds) or ("son",)).items()
                      if k != "preset"}, indent=2))
