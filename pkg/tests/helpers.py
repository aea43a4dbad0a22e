"""Finite-difference utilities shared by the gradient tests."""

import numpy as np


def central_diff(f, x, eps=1e-5):
    """Gradient of scalar ``f`` w.r.t. array ``x`` (modified in place, then restored)."""
    g = np.zeros_like(x, dtype=float)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), floor))


def son_run(args, env=None):
    """Run the CLI in a subprocess with extra environment variables."""
    import os
    import subprocess
    import sys
    full = dict(os.environ)
    full.update(env or {})
    return subprocess.run([sys.executable, "-m", "son.cli", *args], capture_output=True, text=True, env=full,
                          timeout=600)
