"""Flow-matching paths and training objectives.

The linear path interpolates data x0 toward noise x1 as
xt = (1 - t) * x0 + t * x1 with instantaneous velocity x1 - x0.  Training
objectives come in three forms: plain flow matching (regress the velocity at
r = t), the mean-velocity objective (regress an average velocity over [r, t]
using an exact directional derivative), and its distillation variant where a
frozen teacher supplies the target velocity, optionally with classifier-free
guidance applied.

All losses return (value, GradTape) and are deterministic given their
inputs; (t, r) sampling and noise draws happen in the callers through
TrScheduler and sample_path, which keeps the losses replayable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import net
from .errors import DomainError
from .losses import cfg_combine

CLIP_BOUNDS = (-1.0, 1.0)


@dataclass(frozen=True)
class PathSample:
    """A batch of points on linear noising paths."""

    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    xt: np.ndarray
    v_target: np.ndarray


def sample_path(x0: np.ndarray, rng: np.random.Generator, t=None) -> PathSample:
    """Draw noise endpoints and path positions for a data batch.

    t ~ U(0.001, 1) per sample unless forced via ``t``; x1 is standard
    normal.  xt and v_target follow the PathSample invariants exactly.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if not np.all(np.isfinite(x0)):
        raise DomainError("x0 must be finite")
    n = x0.shape[0]
    x1 = rng.standard_normal(x0.shape)
    if t is None:
        t = rng.uniform(0.001, 1.0, n)
    else:
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)).copy()
    xt = (1.0 - t)[:, None] * x0 + t[:, None] * x1
    return PathSample(x0=x0, x1=x1, t=t, xt=xt, v_target=x1 - x0)


@dataclass(frozen=True)
class TrScheduler:
    """Sampler for (t, r) pairs with 0 <= r <= t.

    t ~ U(t_min, t_max); with probability p_equal the pair collapses to
    r = t, otherwise r ~ U(0, t).  Draw order per call: t block, then the
    collapse coin block, then the r block, so seeded runs replay exactly.
    """

    t_min: float = 0.001
    t_max: float = 1.0
    p_equal: float = 0.5

    def __post_init__(self):
        if not (0.0 <= self.t_min <= self.t_max <= 1.0):
            raise DomainError("need 0 <= t_min <= t_max <= 1")
        if not (0.0 <= self.p_equal <= 1.0):
            raise DomainError("p_equal must lie in [0, 1]")

    def sample(self, rng: np.random.Generator, n: int):
        t = rng.uniform(self.t_min, self.t_max, n)
        equal = rng.random(n) < self.p_equal
        r = np.where(equal, t, rng.random(n) * t)
        return t, r


def apply_cond_dropout(cond, drop_prob: float, rng: np.random.Generator, null_id: int):
    """Replace each condition id with the null id with probability drop_prob."""
    if not (0.0 <= drop_prob <= 1.0):
        raise DomainError("drop_prob must lie in [0, 1]")
    ids = np.asarray(cond).copy()
    drop = rng.random(ids.shape) < drop_prob
    ids[drop] = null_id
    return ids


def _check_batch(batch: PathSample, r=None):
    if batch.xt.shape != batch.v_target.shape or batch.t.shape != (batch.xt.shape[0],):
        raise DomainError("inconsistent path batch shapes")
    if r is not None:
        r = np.asarray(r, dtype=np.float64)
        if r.shape != batch.t.shape:
            raise DomainError("r shape does not match batch t")
        if np.any(r < 0.0) or np.any(r > batch.t + 1e-12):
            raise DomainError("need 0 <= r <= t per sample")
        return r
    return None


def fm_loss(model, batch: PathSample, cond=None):
    """Flow-matching objective: mean squared error between u(xt, t, t) and
    the path velocity.  Returns (loss, GradTape)."""
    _check_batch(batch)
    u = net.forward(model, batch.xt, batch.t, batch.t, cond)
    diff = u - batch.v_target
    loss = float(np.mean(diff * diff))
    upstream = (2.0 / diff.size) * diff
    tape = net.backward(model, batch.xt, batch.t, batch.t, cond, upstream)
    return loss, tape


def meanflow_loss(model, batch: PathSample, r, cond=None, clip_bounds=CLIP_BOUNDS):
    """Mean-velocity objective with the stop-gradient construction.

    The directional derivative du/dt along (v_target, 1, 0) comes from the
    exact jvp; the regression target is v_target - (t - r) * du/dt, treated
    as constant.  The residual is clipped to ``clip_bounds``, the loss value
    is mean(g^2), and the gradient flows only through u (upstream 2g/n).

    With r = t this is exactly fm_loss whenever every residual lies inside
    the clip bounds.
    """
    r = _check_batch(batch, r)
    u, dudt = net.jvp(
        model, batch.xt, batch.t, r, cond, (batch.v_target, 1.0, 0.0)
    )
    v_tgt_total = batch.v_target - (batch.t - r)[:, None] * dudt
    g = np.clip(u - v_tgt_total, clip_bounds[0], clip_bounds[1])
    loss = float(np.mean(g * g))
    upstream = (2.0 / g.size) * g
    tape = net.backward(model, batch.xt, batch.t, r, cond, upstream)
    return loss, tape


@dataclass(frozen=True)
class CfgSpec:
    """Classifier-free-guidance settings for distillation targets."""

    scale_range: tuple = (1.0, 9.0)
    drop_prob: float = 0.1
    mode: str = "standard"

    def __post_init__(self):
        lo, hi = self.scale_range
        if hi < lo:
            raise DomainError("scale_range must be ordered")
        if not (0.0 <= self.drop_prob <= 1.0):
            raise DomainError("drop_prob must lie in [0, 1]")


def meanflow_distill_loss(
    student,
    teacher,
    batch: PathSample,
    r,
    cond=None,
    cfg: CfgSpec | None = None,
    rng: np.random.Generator | None = None,
    clip_bounds=CLIP_BOUNDS,
):
    """Distillation form of the mean-velocity objective.

    The target velocity is the frozen teacher's instantaneous prediction
    u_teacher(xt, t, t), optionally replaced by a guided combination of
    conditional and unconditional teacher calls with a per-sample scale
    drawn from cfg.scale_range and condition dropout at cfg.drop_prob.
    The jvp tangent is (v_tgt, 1, 0); gradients reach only the student.
    """
    r = _check_batch(batch, r)
    if cfg is not None and rng is None:
        raise DomainError("guided distillation needs an rng for scale/dropout draws")
    if cond is None:
        cond_ids = np.full(batch.xt.shape[0], teacher.config.null_cond, dtype=np.intp)
    else:
        cond_ids = np.asarray(cond, dtype=np.intp)

    if cfg is None:
        v_tgt = net.forward(teacher, batch.xt, batch.t, batch.t, cond_ids)
    else:
        cond_ids = apply_cond_dropout(
            cond_ids, cfg.drop_prob, rng, teacher.config.null_cond
        )
        lo, hi = cfg.scale_range
        w = rng.uniform(lo, hi, batch.xt.shape[0]) if hi > lo else np.full(
            batch.xt.shape[0], lo
        )
        v_c = net.forward(teacher, batch.xt, batch.t, batch.t, cond_ids)
        v_u = net.forward(teacher, batch.xt, batch.t, batch.t, None)
        if np.all(w == w[0]):
            v_tgt = cfg_combine(v_c, v_u, float(w[0]), mode=cfg.mode)
        else:
            v_tgt = cfg_combine(v_c, v_u, w[:, None], mode=cfg.mode)

    u, dudt = net.jvp(student, batch.xt, batch.t, r, cond_ids, (v_tgt, 1.0, 0.0))
    v_tgt_total = v_tgt - (batch.t - r)[:, None] * dudt
    g = np.clip(u - v_tgt_total, clip_bounds[0], clip_bounds[1])
    loss = float(np.mean(g * g))
    upstream = (2.0 / g.size) * g
    tape = net.backward(student, batch.xt, batch.t, r, cond_ids, upstream)
    return loss, tape
