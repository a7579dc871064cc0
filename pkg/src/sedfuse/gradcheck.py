"""Finite-difference verification of analytic gradients.

The harness walks a set of live arrays (parameter values and/or inputs),
perturbs one coordinate at a time and compares central differences of a
scalar loss against the gradients produced by a backward pass.  Run it in
float64 with stochastic elements frozen; float32 has too little headroom
for eps around 1e-4.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DataError


@dataclass
class GradCheckReport:
    per_tensor: dict = field(default_factory=dict)
    max_error: float = 0.0
    worst: str = ""

    def record(self, name, err):
        self.per_tensor[name] = max(err, self.per_tensor.get(name, 0.0))
        if err >= self.max_error:
            self.max_error = err
            self.worst = name

    def merge(self, other: "GradCheckReport") -> "GradCheckReport":
        for name, err in other.per_tensor.items():
            self.record(name, err)
        return self


def relative_error(analytic, numeric, guard=1e-8):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), guard)


def grad_check(evaluate, targets, eps=1e-4, max_coords_per_tensor=None, seed=0):
    """Compare analytic gradients with central finite differences.

    Parameters
    ----------
    evaluate : callable(want_grads: bool) -> (loss, grads or None)
        Deterministic closure.  With ``want_grads`` it must run a backward
        pass and return ``{name: gradient array}`` for every entry of
        ``targets``; without, only the scalar loss.  It must read the live
        arrays in ``targets`` so in-place perturbations are observed.
    targets : dict[str, np.ndarray]
        Live arrays to wiggle (parameter values, inputs).
    max_coords_per_tensor : int or None
        Check all coordinates when None, otherwise a seeded random subset
        per tensor (keeps full-model checks tractable).

    Returns
    -------
    GradCheckReport with the max relative error per tensor, using the
    guard max(|analytic|, |numeric|, 1e-8) in the denominator.
    """
    loss0, grads = evaluate(True)
    if not np.isfinite(loss0):
        raise DataError("grad check: non-finite loss")
    for name in targets:
        if name not in grads:
            raise DataError(f"grad check: no analytic gradient returned for '{name}'")
        if not np.all(np.isfinite(grads[name])):
            raise DataError(f"grad check: non-finite gradient in '{name}'")
    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    for name, arr in targets.items():
        size = arr.size
        if max_coords_per_tensor is None or size <= max_coords_per_tensor:
            coords = range(size)
        else:
            coords = rng.choice(size, size=max_coords_per_tensor, replace=False)
        flat = arr.reshape(-1)
        gflat = grads[name].reshape(-1)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + eps
            lp = evaluate(False)[0]
            flat[idx] = orig - eps
            lm = evaluate(False)[0]
            flat[idx] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise DataError(f"grad check: non-finite loss while perturbing '{name}'")
            numeric = (lp - lm) / (2.0 * eps)
            report.record(name, relative_error(float(gflat[idx]), float(numeric)))
    return report


def probe(rng, shape, dtype=np.float64):
    """Fixed random weights for turning a tensor output into a scalar loss."""
    return rng.standard_normal(shape).astype(dtype)


def check_simple_layer(layer, x, forward, eps=1e-4, seed=0,
                       max_coords_per_tensor=None):
    """Grad-check one layer's parameters and input.

    ``forward`` is called as ``forward(cache)`` and must run the layer on
    the live ``x`` (so perturbations are seen) and return the output; the
    loss is a fixed random linear functional of that output.
    """
    rng = np.random.default_rng(seed + 7)
    w = None

    def evaluate(want_grads):
        nonlocal w
        out = forward(cache=want_grads)
        if w is None:
            w = probe(rng, out.shape, out.dtype)
        loss = float((out * w).sum())
        if not want_grads:
            return loss, None
        for p in getattr(layer, "params", list)():
            p.zero_grad()
        gin = layer.backward(w)
        grads = {"input": gin}
        for i, p in enumerate(getattr(layer, "params", list)()):
            grads[f"param{i}"] = p.grad.copy()
        return loss, grads

    targets = {"input": x}
    for i, p in enumerate(getattr(layer, "params", list)()):
        targets[f"param{i}"] = p.value
    return grad_check(evaluate, targets, eps=eps,
                      max_coords_per_tensor=max_coords_per_tensor, seed=seed)
