"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tape import Node, Tape


def numeric_grads(fn: Callable[[dict[str, np.ndarray]], float],
                  params: dict[str, np.ndarray], step: float = 1e-5) -> dict[str, np.ndarray]:
    out = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = fn(params)
            flat[i] = orig - step
            down = fn(params)
            flat[i] = orig
            g.reshape(-1)[i] = (up - down) / (2 * step)
        out[name] = g
    return out


def tape_grads(build: Callable[[dict[str, Node]], Node],
               params: dict[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
    tape = Tape()
    P = tape.params(params)
    out = build(P)
    return float(out.value), tape.grads_by_name(out, P)


def max_grad_error(build: Callable[[dict[str, Node]], Node],
                   params: dict[str, np.ndarray], step: float = 1e-5,
                   abs_floor: float = 1e-6) -> tuple[float, float]:
    """Worst relative error (entries with |g| > abs_floor) and worst absolute
    error (the rest) between tape and finite-difference gradients."""
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def value(p):
        tape = Tape(grad=False)
        return float(build({k: tape.const(v) for k, v in p.items()}).value)

    _, analytic = tape_grads(build, params)
    numeric = numeric_grads(value, params, step)
    worst_rel = worst_abs = 0.0
    for name in params:
        a, n = analytic[name], numeric[name]
        big = np.maximum(np.abs(a), np.abs(n)) > abs_floor
        if big.any():
            rel = np.abs(a - n)[big] / np.maximum(np.abs(a), np.abs(n))[big]
            worst_rel = max(worst_rel, float(rel.max()))
        if (~big).any():
            worst_abs = max(worst_abs, float(np.abs(a - n)[~big].max()))
    return worst_rel, worst_abs
