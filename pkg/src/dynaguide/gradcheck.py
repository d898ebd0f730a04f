"""Central finite-difference verification of every differentiable op and the composed loss."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .config import RunConfig
from .losses import total_loss
from .network import assign_labels, forward, init_params
from .tensor import Tensor

STEP = 1e-5
TOLERANCE = 1e-4
KINK_MARGIN = 1e-6


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    checked: int
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


@dataclass
class GradcheckReport:
    seed: int
    results: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def lines(self) -> list[str]:
        out = []
        for r in self.results:
            status = "PASS" if r.passed else "FAIL"
            out.append(f"{status} {r.name:<12} max_rel_err={r.max_rel_error:.3e} "
                       f"checked={r.checked} skipped={r.skipped}")
        return out


def _evaluate(fn, inputs: list[Tensor]) -> tuple[float, list[bytes]]:
    with T.kink_probe() as pattern, T.Tape():
        value = fn(inputs).item()
    return value, pattern


def check_gradients(name: str, fn: Callable[[list[Tensor]], Tensor], inputs: list[Tensor],
                    h: float = STEP, coords: int | None = None,
                    rng: np.random.Generator | None = None) -> CheckResult:
    """Compare tape gradients of ``fn(inputs)`` with central differences.

    Coordinates whose +h/-h evaluations land on different branches of a
    piecewise op are skipped. ``coords`` limits the check to a random subset.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    with T.Tape() as tape:
        loss = fn(inputs)
    tape.backward(loss)
    analytic = [t.grad.copy() for t in inputs]

    positions = [(i, j) for i, t in enumerate(inputs) for j in range(t.data.size)]
    if coords is not None and coords < len(positions):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(positions), size=coords, replace=False)
        positions = [positions[k] for k in sorted(pick)]

    worst, checked, skipped = 0.0, 0, 0
    for i, j in positions:
        flat = inputs[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + h
        f_plus, pat_plus = _evaluate(fn, inputs)
        flat[j] = orig - h
        f_minus, pat_minus = _evaluate(fn, inputs)
        flat[j] = orig
        if pat_plus != pat_minus:
            skipped += 1
            continue
        numeric = (f_plus - f_minus) / (2 * h)
        err = abs(analytic[i].reshape(-1)[j] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
        checked += 1
    return CheckResult(name, worst, checked, skipped)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x) * margin + x, x)


def op_cases(rng: np.random.Generator, size: int = 6):
    """Yield ``(name, fn, inputs)`` for each differentiable op on a random instance."""
    s = size

    def weighted(out: Tensor, w):
        return T.dot(out, w)

    w3 = rng.standard_normal((3, s, s))
    w4 = rng.standard_normal((4, s, s))

    yield ("conv2d", lambda a: weighted(T.conv2d(a[0], a[1], a[2], 1), w3),
           [Tensor(rng.standard_normal((2, s, s))), Tensor(rng.standard_normal((3, 2, 3, 3))),
            Tensor(rng.standard_normal(3))])
    yield ("batch_norm", lambda a: weighted(T.batch_norm(a[0], a[1], a[2], 1e-5), w3),
           [Tensor(rng.standard_normal((3, s, s))), Tensor(rng.standard_normal(3)),
            Tensor(rng.standard_normal(3))])
    yield ("relu", lambda a: weighted(T.relu(a[0]), w3),
           [Tensor(_away_from_zero(rng, (3, s, s)))])
    yield ("add", lambda a: weighted(T.add(a[0], a[1]), w3),
           [Tensor(rng.standard_normal((3, s, s))), Tensor(rng.standard_normal((3, s, s)))])
    factor = float(rng.uniform(-2, 2))
    yield ("scale", lambda a: weighted(T.scale(a[0], factor), w3),
           [Tensor(rng.standard_normal((3, s, s)))])
    yield ("total", lambda a: T.scale(T.total(a[0]), 0.5),
           [Tensor(rng.standard_normal((3, s, s)))])
    yield ("dot", lambda a: weighted(a[0], w3), [Tensor(rng.standard_normal((3, s, s)))])
    yield ("log_softmax", lambda a: weighted(T.log_softmax(a[0], axis=0), w4),
           [Tensor(rng.standard_normal((4, s, s)))])
    index = rng.integers(0, 4, (s, s))
    w_pick = rng.standard_normal((s, s))
    yield ("pick", lambda a: T.dot(T.pick(a[0], index), w_pick),
           [Tensor(rng.standard_normal((4, s, s)))])

    def shifts(a):
        out = None
        for dy, dx in ((0, 1), (1, 0), (1, 1)):
            d = T.shift_diff(a[0], dy, dx)
            term = T.dot(d, rng_w[(dy, dx)])
            out = term if out is None else T.add(out, term)
        return out

    rng_w = {(dy, dx): rng.standard_normal((3, s - dy, s - dx))
             for dy, dx in ((0, 1), (1, 0), (1, 1))}
    yield ("shift_diff", shifts, [Tensor(rng.standard_normal((3, s, s)))])
    yield ("huber", lambda a: weighted(T.huber(a[0], 1.0), w3),
           [Tensor(2.0 * rng.standard_normal((3, s, s)))])
    yield ("absolute", lambda a: weighted(T.absolute(a[0]), w3),
           [Tensor(_away_from_zero(rng, (3, s, s)))])


def composed_case(seed: int, size: int = 6, reduction: str = "mean",
                  padding_mode: str = "replicate"):
    """The full objective (all terms active) on a small network; labels held fixed."""
    rng = np.random.default_rng(seed)
    config = RunConfig(p=4, q=5, min_clusters=1, reduction=reduction, padding_mode=padding_mode,
                       seed=seed)
    params = init_params(config)
    for t in params:
        t.data += 0.1 * rng.standard_normal(t.shape)
    image = Tensor(rng.uniform(0, 1, (3, size, size)))
    pseudo = rng.integers(0, config.q, (size, size))
    with T.Tape():
        labels = assign_labels(forward(params, image))
    names = [n for n, _ in params.named()]

    def fn(a):
        for n, t in zip(names, a):
            params.tensors[n] = t
        return total_loss(forward(params, image), labels, pseudo, config).tensor

    return fn, list(params)


def run(seed: int = 0, composed_coords: int | None = None) -> GradcheckReport:
    """Check every op plus the composed loss on one 6x6 instance."""
    rng = np.random.default_rng(seed)
    report = GradcheckReport(seed)
    for name, fn, inputs in op_cases(rng):
        report.results.append(check_gradients(name, fn, inputs))
    fn, inputs = composed_case(seed)
    report.results.append(check_gradients("total_loss", fn, inputs, coords=composed_coords,
                                          rng=rng))
    return report
