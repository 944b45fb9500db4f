"""Optimization-based gradient inversion (Inverting-Gradients style).

The attacker starts from random images and moves them so that the gradient
they induce matches the observed, partially encrypted gradient. The label is
assumed known.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape, Tensor
from .encryption import AttackerView
from .models import ParamVector, loss_and_grad

log = logging.getLogger(__name__)


class AttackInfeasible(ValueError):
    """The attacker view leaves nothing to match against."""


class AttackFailed(RuntimeError):
    """Every restart diverged."""


@dataclass(frozen=True)
class AttackConfig:
    matching: str = "cosine"
    alpha_tv: float = 1e-8
    iterations: int = 2000
    restarts: int = 5
    step_size: float = 0.1
    signed_gradients: bool = True
    seed: int = 0
    lr_decay: bool = True
    tail_fraction: float = 0.1

    def __post_init__(self):
        if self.iterations < 1 or self.restarts < 1:
            raise ValueError("iterations and restarts must be >= 1")
        if self.matching not in ("l2", "cosine"):
            raise ValueError(f"unknown matching {self.matching!r}")
        if self.alpha_tv < 0 or self.step_size <= 0:
            raise ValueError("alpha_tv must be >= 0 and step_size > 0")


@dataclass(eq=False)
class ReconstructionResult:
    x_star: np.ndarray
    final_rec_loss: float
    loss_trace: list
    restart_index: int
    wall_seconds: float
    restart_losses: list = field(default_factory=list)


def _known_target(view: AttackerView) -> tuple[np.ndarray, np.ndarray]:
    idx = view.usable
    if idx.size == 0:
        raise AttackInfeasible("attacker view has no known gradient coordinates")
    return idx, view.values[idx]


def matching_loss(view: AttackerView, g_candidate, matching: str = "cosine"):
    """Distance between a candidate gradient and the view, on usable coordinates only.

    ``g_candidate`` may be a numpy vector (returns a float) or a Tensor (returns
    a scalar Tensor on its tape).
    """
    idx, target = _known_target(view)
    if isinstance(g_candidate, Tensor):
        return _matching_tensor(ad.take(g_candidate, idx), target, matching)
    g = np.asarray(g_candidate.values if hasattr(g_candidate, "values") else g_candidate, dtype=np.float64)
    g = g.reshape(-1)[idx]
    if matching == "l2":
        return float(np.sum((g - target) ** 2))
    nu, nv = np.linalg.norm(g), np.linalg.norm(target)
    if nu == 0 or nv == 0:
        return 1.0
    return float(1.0 - np.dot(g, target) / (nu * nv))


def _matching_tensor(gk: Tensor, target: np.ndarray, matching: str) -> Tensor:
    t = Tensor(target)
    if matching == "l2":
        d = gk - t
        return ad.tsum(d * d)
    nv = float(np.linalg.norm(target))
    sq = ad.tsum(gk * gk)
    if nv == 0 or sq.item() == 0:
        return Tensor(np.array(1.0))
    return 1.0 - ad.tsum(gk * t) / (ad.power(sq, 0.5) * nv)


def total_variation(x):
    """Anisotropic TV of an (H, W, C) image: sum of |horizontal| + |vertical| steps."""
    if not isinstance(x, Tensor):
        x = np.asarray(x, dtype=np.float64)
        return float(np.abs(np.diff(x, axis=0)).sum() + np.abs(np.diff(x, axis=1)).sum())
    h, w, c = x.shape
    idx = np.arange(h * w * c).reshape(h, w, c)
    dv = ad.take(x, idx[1:]) - ad.take(x, idx[:-1])
    dh = ad.take(x, idx[:, 1:]) - ad.take(x, idx[:, :-1])
    return ad.tsum(ad.absolute(dv)) + ad.tsum(ad.absolute(dh))


def _tv_tensor(x: Tensor, idx) -> Tensor:
    v0, v1, h0, h1 = idx
    return ad.tsum(ad.absolute(ad.take(x, v1) - ad.take(x, v0))) + ad.tsum(
        ad.absolute(ad.take(x, h1) - ad.take(x, h0))
    )


def _tv_index(shape):
    h, w, c = (tuple(shape) + (1, 1))[:3]
    idx = np.arange(int(np.prod(shape))).reshape(h, w, c)
    return idx[:-1], idx[1:], idx[:, :-1], idx[:, 1:]


def restart_seed(seed: int, restart: int, sample: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(restart), int(sample)])


def _milestones(iterations: int) -> set[int]:
    return {int(iterations * f) for f in (3 / 8, 5 / 8, 7 / 8)}


def objective_and_grad(params: ParamVector, y0, view: AttackerView, x: np.ndarray,
                       cfg: AttackConfig, tv_index=None) -> tuple[float, float, np.ndarray]:
    """(matching loss, full objective, gradient of the objective w.r.t. x)."""
    tape = Tape()
    try:
        xt = tape.watch(x)
        _, g = loss_and_grad(params, xt, y0, create_graph=True)
        rec = matching_loss(view, g.tensor, cfg.matching)
        obj = rec
        if cfg.alpha_tv > 0 and len(x.shape) == 3:
            obj = obj + cfg.alpha_tv * _tv_tensor(xt, tv_index or _tv_index(x.shape))
        if obj.node is None:
            return rec.item(), obj.item(), np.zeros_like(x)
        (dx,) = ad.grad(obj, [xt])
        return rec.item(), obj.item(), dx.data
    finally:
        tape.release()


def _run_restart(params, y0, view, cfg, rng) -> tuple[np.ndarray, float, list]:
    shape = params.spec.input_shape
    x = rng.standard_normal(shape)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    b1, b2, eps = 0.9, 0.999, 1e-8
    lr = cfg.step_size
    drops = _milestones(cfg.iterations) if cfg.lr_decay else set()
    tail_start = cfg.iterations - max(1, int(round(cfg.iterations * cfg.tail_fraction)))
    tv_index = _tv_index(shape) if len(shape) == 3 else None
    trace = []
    best_x, best = None, np.inf
    for it in range(cfg.iterations):
        if it in drops:
            lr *= 0.1
        rec, obj, dx = objective_and_grad(params, y0, view, x, cfg, tv_index)
        if not (np.isfinite(obj) and np.all(np.isfinite(dx))):
            raise FloatingPointError(f"non-finite objective at iteration {it}")
        trace.append(rec)
        if it >= tail_start and rec < best:
            best, best_x = rec, x.copy()
        step = np.sign(dx) if cfg.signed_gradients else dx
        m = b1 * m + (1 - b1) * step
        v = b2 * v + (1 - b2) * step * step
        mhat = m / (1 - b1 ** (it + 1))
        vhat = v / (1 - b2 ** (it + 1))
        x = np.clip(x - lr * mhat / (np.sqrt(vhat) + eps), 0.0, 1.0)
    return best_x, best, trace


def invert(params: ParamVector, y0, view: AttackerView, cfg: AttackConfig,
           sample_index: int = 0) -> ReconstructionResult:
    """Reconstruct the input behind ``view``; best of ``cfg.restarts`` by matching loss."""
    if view.m != params.m:
        raise ValueError(f"view has {view.m} coordinates, model has {params.m} parameters")
    _known_target(view)
    t0 = time.perf_counter()
    best = None
    losses = []
    for r in range(cfg.restarts):
        rng = np.random.default_rng(restart_seed(cfg.seed, r, sample_index))
        try:
            x, loss, trace = _run_restart(params, y0, view, cfg, rng)
        except (NonFiniteError, FloatingPointError) as exc:
            log.warning("restart %d aborted: %s", r, exc)
            losses.append(float("nan"))
            continue
        losses.append(loss)
        if best is None or loss < best[1]:
            best = (x, loss, trace, r)
    if best is None:
        raise AttackFailed(f"all {cfg.restarts} restarts diverged")
    x, loss, trace, r = best
    return ReconstructionResult(x, float(loss), trace, r, time.perf_counter() - t0, losses)


def trace_rows(result: ReconstructionResult) -> list[tuple[int, float]]:
    return list(enumerate(result.loss_trace))


def trace_export(result: ReconstructionResult, path=None) -> str:
    """CSV with header ``iter,rec_loss``; losses written with 17 significant digits."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iter", "rec_loss"])
    for i, v in trace_rows(result):
        w.writerow([i, f"{v:.17g}"])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def trace_import(text: str) -> list[float]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["iter", "rec_loss"]:
        raise ValueError("missing iter,rec_loss header")
    return [float(v) for _, v in rows[1:]]
