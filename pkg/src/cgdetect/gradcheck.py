"""Finite-difference verification of analytic gradients.

Every backward pass in the library is exact, so analytic gradients must match
central differences at float64 to tight tolerances. The scalar probe is
L(inputs) = sum(forward(inputs) * P) for a fixed random projection P, whose
analytic gradient is backward(P).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops, softpool

# relative error denominators are floored so near-zero gradient coordinates
# are compared absolutely instead of dividing by ~0
_REL_FLOOR = 1e-3


@dataclass
class GradCheckResult:
    name: str
    tolerance: float
    max_rel_error: float
    coords_checked: int
    worst_coord: tuple | None  # (input index, flat index within it)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def line(self) -> str:
        status = "pass" if self.passed else "FAIL"
        where = "" if self.worst_coord is None else \
            f"  worst=input{self.worst_coord[0]}[{self.worst_coord[1]}]"
        return (f"{status}  {self.name:<22} max_rel_err={self.max_rel_error:.3e}  "
                f"tol={self.tolerance:.0e}{where}")


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), _REL_FLOOR)


def gradient_check(name, forward, backward, inputs, *, tolerance,
                   seed=0, step=1e-5, max_coords=None) -> GradCheckResult:
    """Compare backward(P) against central differences of sum(forward * P).

    forward(*inputs) -> array; backward(grad_out, *inputs) -> gradient per
    input (None entries are skipped). Inputs must be float64.
    """
    for a in inputs:
        if a.dtype != np.float64:
            raise ValueError("gradient_check requires float64 inputs")
    rng = np.random.default_rng(seed)
    y = forward(*inputs)
    proj = rng.standard_normal(np.shape(y))
    analytic = backward(proj, *inputs)

    def probe() -> float:
        return float(np.sum(forward(*inputs) * proj))

    coords = []
    for i, (x, g) in enumerate(zip(inputs, analytic)):
        if g is None:
            continue
        if g.shape != x.shape:
            raise ValueError(f"gradient {i} shape {g.shape} != input shape {x.shape}")
        coords.extend((i, j) for j in range(x.size))
    if max_coords is not None and len(coords) > max_coords:
        picks = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[p] for p in picks]

    worst = 0.0
    worst_coord = None
    for i, j in coords:
        x = inputs[i]
        v = x.flat[j]
        h = step * max(1.0, abs(v))
        x.flat[j] = v + h
        up = probe()
        x.flat[j] = v - h
        down = probe()
        x.flat[j] = v
        numeric = (up - down) / (2 * h)
        if not np.isfinite(numeric):
            raise ops.NumericError(f"{name}: non-finite finite-difference probe")
        err = _rel_err(float(analytic[i].flat[j]), numeric)
        if err > worst:
            worst, worst_coord = err, (i, j)
    return GradCheckResult(name, tolerance, worst, len(coords), worst_coord)


# ---------------------------------------------------------------------------
# operator suite (what `cgdetect gradcheck` runs)
# ---------------------------------------------------------------------------

def _conv_case(rng):
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3)) * 0.5
    b = rng.standard_normal(4) * 0.1
    return [x, w, b]


def check_conv2d(seed=0, tolerance=1e-5):
    rng = np.random.default_rng(seed)
    return gradient_check(
        "conv2d",
        lambda x, w, b: ops.conv2d_forward(x, w, b, stride=1, pad=1),
        lambda g, x, w, b: ops.conv2d_backward(g, x, w, stride=1, pad=1),
        _conv_case(rng), tolerance=tolerance, seed=seed)


def check_batchnorm(seed=0, tolerance=1e-4):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 4, 5, 5))
    gamma = rng.uniform(0.5, 1.5, 4)
    beta = rng.standard_normal(4) * 0.2

    def fwd(x, gamma, beta):
        y, _ = ops.batchnorm2d_forward(x, gamma, beta, mode="train")
        return y

    def bwd(g, x, gamma, beta):
        _, cache = ops.batchnorm2d_forward(x, gamma, beta, mode="train")
        return ops.batchnorm2d_backward(g, cache)

    return gradient_check("batchnorm2d", fwd, bwd, [x, gamma, beta],
                          tolerance=tolerance, seed=seed)


def check_relu(seed=0, tolerance=1e-4):
    rng = np.random.default_rng(seed)
    # keep inputs away from the kink so central differences are valid
    x = rng.uniform(0.05, 1.0, (3, 4, 6, 6)) * rng.choice([-1.0, 1.0], (3, 4, 6, 6))
    return gradient_check(
        "relu", ops.relu_forward,
        lambda g, x: (ops.relu_backward(g, x),),
        [x], tolerance=tolerance, seed=seed)


def check_linear(seed=0, tolerance=1e-5):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 7))
    w = rng.standard_normal((3, 7)) * 0.5
    b = rng.standard_normal(3) * 0.1
    return gradient_check(
        "linear", ops.linear_forward,
        lambda g, x, w, b: ops.linear_backward(g, x, w),
        [x, w, b], tolerance=tolerance, seed=seed)


def check_softpool(seed=0, tolerance=1e-5):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 6, 6))
    return gradient_check(
        "softpool", softpool.softpool_forward,
        lambda g, x: (softpool.softpool_backward(g, x),),
        [x], tolerance=tolerance, seed=seed)


def check_global_avg_pool(seed=0, tolerance=1e-5):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 5, 5))
    return gradient_check(
        "global_avg_pool", ops.global_avg_pool_forward,
        lambda g, x: (ops.global_avg_pool_backward(g, x.shape),),
        [x], tolerance=tolerance, seed=seed)


def check_cross_entropy(seed=0, tolerance=1e-4):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((6, 2))
    labels = rng.integers(0, 2, 6)

    def fwd(logits):
        loss, _ = ops.softmax_cross_entropy(logits, labels)
        return np.asarray(loss)

    def bwd(g, logits):
        _, grad = ops.softmax_cross_entropy(logits, labels)
        return (grad * g,)

    return gradient_check("cross_entropy", fwd, bwd, [logits],
                          tolerance=tolerance, seed=seed)


def run_operator_suite(seed=0, softpool_backward_override=None):
    """Run every operator check; returns a list of GradCheckResult.

    softpool_backward_override is a verification hook: substituting a wrong
    backward here must make the softpool check fail (negative control).
    """
    results = [
        check_conv2d(seed),
        check_batchnorm(seed),
        check_relu(seed),
        check_linear(seed),
        check_softpool(seed) if softpool_backward_override is None else
        gradient_check(
            "softpool", softpool.softpool_forward,
            lambda g, x: (softpool_backward_override(g, x),),
            [np.random.default_rng(seed).standard_normal((2, 3, 6, 6))],
            tolerance=1e-5, seed=seed),
        check_global_avg_pool(seed),
        check_cross_entropy(seed),
    ]
    return results


def check_model(model, x, labels, *, n_coords=50, seed=0, step=1e-5,
                tolerance=1e-3) -> GradCheckResult:
    """Finite-difference check of d(loss)/d(parameter) through a whole model.

    Samples n_coords learnable coordinates. The model must be built at
    float64. Train-mode batch statistics are recomputed per probe, so the
    loss is a deterministic function of the parameters.
    """
    rng = np.random.default_rng(seed)

    def loss() -> float:
        logits = model.forward(x, mode="train")
        value, _ = ops.softmax_cross_entropy(logits, labels)
        return value

    model.store.zero_grads()
    logits = model.forward(x, mode="train")
    _, dlogits = ops.softmax_cross_entropy(logits, labels)
    model.backward(dlogits)

    entries = [e for _, e in model.store.learnable()]
    sizes = np.array([e.value.size for e in entries])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    worst_coord = None
    for p in picks:
        i = int(np.searchsorted(offsets, p, side="right") - 1)
        j = int(p - offsets[i])
        e = entries[i]
        v = e.value.flat[j]
        h = step * max(1.0, abs(v))
        e.value.flat[j] = v + h
        up = loss()
        e.value.flat[j] = v - h
        down = loss()
        e.value.flat[j] = v
        numeric = (up - down) / (2 * h)
        err = _rel_err(float(e.grad.flat[j]), numeric)
        if err > worst:
            worst, worst_coord = err, (i, j)
    return GradCheckResult("whole_model", tolerance, worst, len(picks), worst_coord)
