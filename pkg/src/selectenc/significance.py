"""Per-element significance scores for gradient entries.

Metrics:

* ``ProdSig``       |g_i * theta_i|
* ``Grad``          |g_i|
* ``Param``         |theta_i|
* ``Sens``          mean over input dims j of |d g_i / d x_j| (reverse-over-reverse)
* ``SensDiscrete``  the same with central differences in x
* ``LayerSlice``    1 on the selected layers, 0 elsewhere
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .models import FlatGradient, ParamVector, apply, check_onehot, cross_entropy, loss_and_grad

METRICS = ("Sens", "SensDiscrete", "ProdSig", "Grad", "Param", "LayerSlice")

# obtained as a by-product of training, see report handling in the harness
FREE_METRICS = frozenset({"Grad", "Param"})

DEFAULT_SENS_BUDGET = 5_000_000


class BudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class SignificanceScores:
    scores: np.ndarray
    metric_id: str
    compute_seconds: float = 0.0
    label: str = ""

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if not np.all(np.isfinite(s)) or np.any(s < 0):
            raise ValueError(f"{self.metric_id}: scores must be finite and non-negative")
        object.__setattr__(self, "scores", s)
        if not self.label:
            object.__setattr__(self, "label", self.metric_id)

    def __len__(self):
        return self.scores.size


def _vec(v) -> np.ndarray:
    if isinstance(v, FlatGradient):
        return v.values
    if isinstance(v, ParamVector):
        return v.theta
    return np.asarray(v, dtype=np.float64).reshape(-1)


def prodsig(g, theta) -> SignificanceScores:
    g, theta = _vec(g), _vec(theta)
    if g.size != theta.size:
        raise ValueError(f"gradient length {g.size} != parameter length {theta.size}")
    return SignificanceScores(np.abs(g * theta), "ProdSig")


def grad_magnitude(g) -> SignificanceScores:
    return SignificanceScores(np.abs(_vec(g)), "Grad")


def param_magnitude(theta) -> SignificanceScores:
    return SignificanceScores(np.abs(_vec(theta)), "Param")


def _model_loss(params: ParamVector, y: np.ndarray):
    y = check_onehot(y, params.spec.num_classes)

    def loss_fn(blocks, x):
        return cross_entropy(apply(params.spec, blocks, x), y)

    return loss_fn


def mixed_sensitivity(loss_fn: Callable, blocks: list, x, budget: int = DEFAULT_SENS_BUDGET) -> np.ndarray:
    """mean_j |d^2 L / d theta_i d x_j| for every parameter entry i.

    ``loss_fn(block_tensors, x_tensor)`` returns a scalar Tensor. Uses one
    reverse pass for grad_x L with a recorded graph, then one reverse pass per
    input coordinate j through that graph (mixed partials commute).
    """
    x = np.asarray(x, dtype=np.float64)
    m = sum(int(np.size(b)) for b in blocks)
    n = x.size
    if m * n > budget:
        raise BudgetExceeded(f"exact sensitivity needs {m} x {n} = {m * n} second-order entries, budget is {budget}")
    tape = ad.Tape()
    xt = tape.watch(x)
    leaves = [tape.watch(b) for b in blocks]
    loss = loss_fn(leaves, xt)
    (gx,) = ad.grad(loss, [xt], create_graph=True)
    acc = np.zeros(m)
    mark = len(tape)
    for j in range(n):
        gxj = ad.take(gx, np.array(j))
        cols = ad.grad(gxj, leaves)
        acc += np.abs(np.concatenate([c.data.reshape(-1) for c in cols]))
        del tape.nodes[mark:]
    tape.release()
    return acc / n


def sensitivity_exact(params: ParamVector, x, y, budget: int = DEFAULT_SENS_BUDGET) -> SignificanceScores:
    """Mean absolute mixed second derivative d g_i / d x_j over input dims."""
    x = np.asarray(x.data if isinstance(x, ad.Tensor) else x, dtype=np.float64)
    s = mixed_sensitivity(_model_loss(params, y), params.blocks(), x, budget)
    return SignificanceScores(s, "Sens")


def central_sensitivity(grad_fn: Callable[[np.ndarray], np.ndarray], x, step: float) -> np.ndarray:
    """mean_j |(g(x + step e_j) - g(x - step e_j)) / (2 step)| using 2n calls of ``grad_fn``."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    acc = None
    for j in range(flat.size):
        up = flat.copy()
        up[j] += step
        dn = flat.copy()
        dn[j] -= step
        d = np.abs((grad_fn(up.reshape(x.shape)) - grad_fn(dn.reshape(x.shape))) / (2 * step))
        acc = d if acc is None else acc + d
    return acc / flat.size


def sensitivity_discrete(params: ParamVector, x, y, step: float = 1e-4) -> SignificanceScores:
    def grad_fn(xx):
        return loss_and_grad(params, xx, y)[1].values

    return SignificanceScores(central_sensitivity(grad_fn, x, step), "SensDiscrete")


def one_fifth(i: int, n_groups: int = 5) -> Callable[[list[int]], set[int]]:
    """Selector for the i-th (1-based) of ``n_groups`` contiguous layer groups.

    Group sizes are as equal as possible, earlier groups taking the remainder.
    """
    if not 1 <= i <= n_groups:
        raise ValueError(f"group index must be in 1..{n_groups}")

    def select(layers: list[int]) -> set[int]:
        base, extra = divmod(len(layers), n_groups)
        sizes = [base + (1 if g < extra else 0) for g in range(n_groups)]
        start = sum(sizes[: i - 1])
        return set(layers[start : start + sizes[i - 1]])

    select.__name__ = f"OneFifth-{i}"
    return select


def layer_slice(theta: ParamVector, selector) -> SignificanceScores:
    """Indicator scores over the layers picked by ``selector``.

    ``selector`` is an iterable of layer ids or a callable mapping the ordered
    list of parameterized layer ids to the chosen subset.
    """
    layers = theta.layer_ids
    chosen = set(selector(layers)) if callable(selector) else set(selector)
    chosen &= set(layers)
    if not chosen:
        raise ValueError("layer selection is empty")
    s = np.zeros(theta.m)
    for b in theta.layer_index:
        if b.layer in chosen:
            s[b.start : b.stop] = 1.0
    label = getattr(selector, "__name__", "LayerSlice") if callable(selector) else "LayerSlice"
    return SignificanceScores(s, "LayerSlice", label=label)


def timed(fn: Callable[..., SignificanceScores], *args, **kwargs) -> SignificanceScores:
    """Run a metric and record its wall-clock duration in ``compute_seconds``."""
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return replace(out, compute_seconds=time.perf_counter() - t0)


def compute(metric: str, params: ParamVector, x, y, g=None, *, step: float = 1e-4,
            budget: int = DEFAULT_SENS_BUDGET) -> SignificanceScores:
    """Dispatch by metric name, timed. ``OneFifth-i`` names select layer groups."""
    if metric in ("Grad", "ProdSig") and g is None:
        g = loss_and_grad(params, x, y)[1]
    if metric == "ProdSig":
        return timed(prodsig, g, params)
    if metric == "Grad":
        return timed(grad_magnitude, g)
    if metric == "Param":
        return timed(param_magnitude, params)
    if metric == "Sens":
        return timed(sensitivity_exact, params, x, y, budget)
    if metric == "SensDiscrete":
        return timed(sensitivity_discrete, params, x, y, step)
    if metric.startswith("OneFifth-"):
        return timed(layer_slice, params, one_fifth(int(metric.split("-", 1)[1])))
    raise ValueError(f"unknown metric {metric!r}")


def export_csv(scores: SignificanceScores, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "score"])
        for i, s in enumerate(scores.scores):
            w.writerow([i, repr(float(s))])


def export_binary(scores: SignificanceScores, path) -> None:
    """Little-endian float64 dump preceded by a uint64 element count."""
    with open(path, "wb") as fh:
        fh.write(np.uint64(scores.scores.size).tobytes())
        fh.write(scores.scores.astype("<f8").tobytes())


def load_binary(path, metric_id: str) -> SignificanceScores:
    raw = open(path, "rb").read()
    n = int(np.frombuffer(raw[:8], "<u8")[0])
    vals = np.frombuffer(raw[8:], "<f8")
    if vals.size != n:
        raise ValueError(f"score file declares {n} entries but holds {vals.size}")
    return SignificanceScores(vals.copy(), metric_id)
