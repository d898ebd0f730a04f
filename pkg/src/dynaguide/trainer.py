"""Per-image iterative refinement with SGD + momentum."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .config import RunConfig
from .exceptions import InvariantError
from .losses import LossBreakdown, total_loss
from .network import NetworkParams, assign_labels, forward, init_params
from .validation import check_image, check_label_map

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ("iteration", "l_sim", "l_con", "l_gp", "total", "q_active")


@dataclass
class IterationRecord:
    iteration: int
    loss: LossBreakdown
    q_active: int


@dataclass
class RunTrace:
    records: list[IterationRecord] = field(default_factory=list)
    labels: np.ndarray | None = None
    stop_reason: str = "iterations"

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        if name == "iteration":
            return np.array([r.iteration for r in self.records])
        if name == "q_active":
            return np.array([r.q_active for r in self.records])
        return np.array([getattr(r.loss, name) for r in self.records])

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for r in self.records:
            writer.writerow([r.iteration, repr(r.loss.l_sim), repr(r.loss.l_con),
                             repr(r.loss.l_gp), repr(r.loss.total), r.q_active])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


class SGDMomentum:
    """Classical momentum: ``v <- m v + g``; ``theta <- theta - lr v``. No weight decay."""

    def __init__(self, params: NetworkParams, learning_rate: float, momentum: float):
        self.params = params
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(t.data) for name, t in params.named()}

    def step(self) -> None:
        sgd_step(self.params, self.velocity, self.learning_rate, self.momentum)


def sgd_step(params: NetworkParams, velocity: dict[str, np.ndarray],
             learning_rate: float, momentum: float) -> None:
    trainable = [(name, t) for name, t in params.named() if t.requires_grad]
    for name, t in trainable:
        if t.grad is None:
            raise InvariantError(f"parameter {name} has no gradient")
    for name, t in trainable:
        v = velocity[name]
        v *= momentum
        v += t.grad
        t.data -= learning_rate * v
        t.grad.fill(0.0)


def refine(image, pseudo, config: RunConfig, params: NetworkParams | None = None,
           callback: Callable[[int, LossBreakdown], None] | None = None,
           ) -> tuple[np.ndarray, RunTrace, NetworkParams]:
    """Train a freshly initialised network on one image and return its final labels.

    Each iteration runs forward, re-assigns argmax labels, evaluates the
    dynamically weighted loss and takes one momentum step. The loop ends after
    ``config.iterations`` steps or as soon as the active cluster count drops to
    ``config.min_clusters``.
    """
    image = check_image(image)
    _, h, w = image.shape
    if config.guidance_enabled:
        pseudo = check_label_map(pseudo, shape=(h, w), max_label=config.q, name="pseudo-labels")
    elif pseudo is not None:
        pseudo = check_label_map(pseudo, shape=(h, w), name="pseudo-labels")
    if params is None:
        params = init_params(config)
    opt = SGDMomentum(params, config.learning_rate, config.momentum)
    trace = RunTrace()
    img = T.Tensor(image)

    if config.iterations == 0:
        with T.Tape():
            out = forward(params, img)
        trace.labels = out.labels
        return out.labels, trace, params

    labels = None
    for it in range(config.iterations):
        with T.Tape() as tape:
            out = forward(params, img)
            labels = assign_labels(out)
            breakdown = total_loss(out, labels, pseudo, config)
        if not np.isfinite(breakdown.total):
            raise InvariantError(f"non-finite loss {breakdown.total} at iteration {it}")
        trace.records.append(IterationRecord(it, breakdown, breakdown.q_active))
        if callback is not None:
            callback(it, breakdown)
        if breakdown.q_active <= config.min_clusters:
            trace.stop_reason = "min_clusters"
            logger.debug("early stop at iteration %d with %d clusters", it, breakdown.q_active)
            break
        tape.backward(breakdown.tensor)
        opt.step()
    trace.labels = labels
    return labels, trace, params
