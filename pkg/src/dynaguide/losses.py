"""Feature similarity, spatial continuity and pseudo-label guidance losses.

Each term reduces by ``sum`` or ``mean`` over its elements; training uses the
reduction named in the run config.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import RunConfig
from .exceptions import InputError
from .network import ResponseMap
from .tensor import Tensor

# (dy, dx) neighbour offsets: horizontal, vertical, down-right diagonal
DIRECTIONS = {"h": (0, 1), "v": (1, 0), "d": (1, 1)}


def huber(x, delta: float = 1.0):
    """Scalar/array Huber penalty: ``0.5 x^2`` inside ``delta``, linear outside."""
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    out = np.where(a <= delta, 0.5 * x * x, delta * (a - 0.5 * delta))
    return float(out) if out.ndim == 0 else out


def _tensor(response) -> Tensor:
    return response.response if isinstance(response, ResponseMap) else response


def _check_ids(ids: np.ndarray, q: int, hw: tuple[int, int], what: str) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.shape != hw:
        raise InputError(f"{what} shape {ids.shape} does not match response {hw}")
    if ids.size and (ids.min() < 0 or ids.max() >= q):
        bad = np.argwhere((ids < 0) | (ids >= q))[0]
        value = ids[tuple(bad)]
        raise InputError(
            f"{what} id {value} at pixel (row={bad[0]}, col={bad[1]}) outside [0, {q})")
    return ids.astype(np.intp)


def _reduce(x: Tensor, reduction: str, pixels: int) -> Tensor:
    if reduction == "sum":
        return T.total(x)
    if reduction == "mean":
        return T.scale(T.total(x), 1.0 / x.data.size)
    if reduction == "pixel":
        # one shared divisor keeps the relative weights of the sums
        return T.scale(T.total(x), 1.0 / pixels)
    raise ValueError(f"reduction must be 'sum', 'mean' or 'pixel', got {reduction!r}")


def _cross_entropy(r: Tensor, target: np.ndarray, reduction: str) -> Tensor:
    return T.scale(_reduce(T.pick(T.log_softmax(r, axis=0), target), reduction,
                                target.size), -1.0)


def loss_sim(response, labels: np.ndarray, reduction: str = "sum") -> Tensor:
    """Cross-entropy of the response against its own argmax labels (held constant)."""
    r = _tensor(response)
    labels = _check_ids(labels, r.shape[0], r.shape[1:], "label")
    return _cross_entropy(r, labels, reduction)


def loss_gp(response, pseudo: np.ndarray, reduction: str = "sum") -> Tensor:
    """Cross-entropy of the response against fixed global pseudo-labels."""
    r = _tensor(response)
    pseudo = _check_ids(pseudo, r.shape[0], r.shape[1:], "pseudo-label")
    return _cross_entropy(r, pseudo, reduction)


def continuity_terms(response, delta: float = 1.0, include_diagonal: bool = True,
                     use_huber: bool = True, reduction: str = "sum") -> dict[str, Tensor]:
    """Per-direction penalties on neighbour differences; ``mean`` averages each term."""
    r = _tensor(response)
    terms = {}
    for key, (dy, dx) in DIRECTIONS.items():
        if key == "d" and not include_diagonal:
            continue
        diff = T.shift_diff(r, dy, dx)
        penalty = T.huber(diff, delta) if use_huber else T.absolute(diff)
        terms[key] = _reduce(penalty, reduction, r.shape[1] * r.shape[2])
    return terms


def loss_con(response, delta: float = 1.0, include_diagonal: bool = True,
             use_huber: bool = True, reduction: str = "sum") -> Tensor:
    terms = list(continuity_terms(response, delta, include_diagonal, use_huber,
                                  reduction).values())
    out = terms[0]
    for t in terms[1:]:
        out = T.add(out, t)
    return out


@dataclass
class LossBreakdown:
    l_sim: float
    l_con: float
    l_gp: float
    weight_con: float
    weight_gp: float
    total: float
    q_active: int
    l_con_terms: dict[str, float] = field(default_factory=dict)
    tensor: Tensor | None = field(default=None, repr=False, compare=False)

    def as_row(self) -> dict:
        return {"l_sim": self.l_sim, "l_con": self.l_con, "l_gp": self.l_gp,
                "total": self.total, "q_active": self.q_active}


def dynamic_weights(q_active: int, alpha: float) -> tuple[float, float]:
    """``(q'/alpha, 1/q')`` weights on continuity and guidance."""
    if q_active < 1:
        raise InputError(f"active cluster count must be >= 1, got {q_active}")
    return q_active / alpha, 1.0 / q_active


def total_loss(response: ResponseMap, labels: np.ndarray | None, pseudo: np.ndarray | None,
               config: RunConfig) -> LossBreakdown:
    """``L_sim + (q'/alpha) L_con + (1/q') L_GP``; guidance dropped when disabled."""
    r = _tensor(response)
    if labels is None:
        labels = response.labels
    q_active = int(np.unique(labels).size)
    w_con, w_gp = dynamic_weights(q_active, config.alpha)

    sim = loss_sim(r, labels, config.reduction)
    terms = continuity_terms(r, config.huber_delta, config.include_diagonal, config.use_huber,
                             config.reduction)
    con = terms["h"]
    for key in ("v", "d"):
        if key in terms:
            con = T.add(con, terms[key])
    loss = T.add(sim, T.scale(con, w_con))
    gp_value = 0.0
    if config.guidance_enabled:
        if pseudo is None:
            raise InputError("guidance is enabled but no pseudo-labels were given")
        gp = loss_gp(r, pseudo, config.reduction)
        gp_value = gp.item()
        loss = T.add(loss, T.scale(gp, w_gp))
    else:
        w_gp = 0.0
    return LossBreakdown(
        l_sim=sim.item(), l_con=con.item(), l_gp=gp_value,
        weight_con=w_con, weight_gp=w_gp, total=loss.item(), q_active=q_active,
        l_con_terms={k: v.item() for k, v in terms.items()}, tensor=loss)
