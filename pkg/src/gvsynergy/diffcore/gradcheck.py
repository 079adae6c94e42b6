"""Central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np

from .graph import Graph


def _evaluate(build, values):
    g = Graph()
    bound = {k: g.param(k, v) for k, v in values.items()}
    out = build(g, bound)
    if out.data.size != 1:
        raise ValueError(f"gradient check needs a scalar function, got shape {out.shape}")
    val = float(out.data.reshape(()))
    if not np.isfinite(val):
        raise FloatingPointError("function value is not finite")
    return g, out, val


def check_gradients(build, values, step=1e-6, max_coords=None, rng=None):
    """Compare analytic and central-difference gradients.

    ``build(graph, tensors)`` receives a dict of parameter Tensors bound from
    ``values`` and returns a scalar Tensor. Returns a dict name -> max
    relative error, where the error of one coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.

    ``max_coords`` caps the probed coordinates per array (sampled with
    ``rng``); ``None`` probes all of them.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    values = {k: np.array(v, dtype=np.float64, order="C") for k, v in values.items()}
    g, out, _ = _evaluate(build, values)
    analytic = g.backward(out)
    errors = {}
    for name, arr in values.items():
        flat = arr.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng if rng is not None else np.random.default_rng(0)
            coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
        worst = 0.0
        a_flat = analytic[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            fp = _evaluate(build, values)[2]
            flat[i] = orig - step
            fm = _evaluate(build, values)[2]
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * step)
            err = abs(a_flat[i] - numeric) / max(1.0, abs(a_flat[i]))
            worst = max(worst, err)
        errors[name] = worst
    return errors


def grad_check(function, point, step=1e-6):
    """Max relative gradient error of a one-argument scalar function.

    ``function(graph, x)`` maps a Tensor to a scalar Tensor.
    """
    errs = check_gradients(lambda g, t: function(g, t["x"]), {"x": point}, step)
    return errs["x"]
