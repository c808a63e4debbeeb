"""ODE samplers: fixed-step Euler with optional renoising, and adaptive
Dormand-Prince 5(4) with a PI step-size controller and NFE accounting.

Both solvers integrate from t = 1 (noise) down to t = 0 (data).  The vector
field may be a VelocityModel or any callable f(x, t, r, cond) -> velocity,
which keeps analytic test problems cheap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import net
from .errors import DomainError, SolverError
from .losses import cfg_combine, cfg_neutral_scale

# Dormand-Prince 5(4) tableau.  The last row of A equals b (FSAL): the 7th
# stage of an accepted step is the 1st stage of the next.
_DOPRI_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DOPRI_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_DOPRI_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DOPRI_B_HAT = np.array(
    [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
)

SAFETY = 0.9
FACTOR_MIN = 0.2
FACTOR_MAX = 5.0
INITIAL_STEP = 0.05
MIN_STEP = 1e-10


@dataclass(frozen=True)
class SolverConfig:
    kind: str = "euler"
    steps: int = 4
    renoise_weights: tuple | None = None
    renoise_mode: str = "remix"
    atol: float = 1e-3
    rtol: float = 1e-3
    cfg_scale: float = 7.0
    cfg_mode: str = "standard"
    max_nfe: int = 10000

    def __post_init__(self):
        if self.kind not in ("euler", "dopri5"):
            raise DomainError(f"unknown solver kind {self.kind!r}")
        if self.steps < 1:
            raise DomainError("steps must be >= 1")
        if self.atol <= 0 or self.rtol <= 0:
            raise DomainError("tolerances must be positive")
        if self.max_nfe < 1:
            raise DomainError("max_nfe must be >= 1")
        if self.renoise_mode not in ("remix", "additive"):
            raise DomainError(f"unknown renoise mode {self.renoise_mode!r}")
        if self.renoise_weights is not None:
            w = tuple(float(v) for v in self.renoise_weights)
            if len(w) != self.steps:
                raise DomainError(
                    f"{len(w)} renoise weights for {self.steps} steps"
                )
            if any(v < 0.0 or v > 1.0 for v in w):
                raise DomainError("renoise weights must lie in [0, 1]")
            if self.renoise_mode == "remix" and w[0] != 0.0:
                # the remix estimate reuses the previous step's velocity,
                # which does not exist before the first step
                raise DomainError("remix renoising requires weights[0] == 0")
            object.__setattr__(self, "renoise_weights", w)


@dataclass
class SampleTrace:
    final: np.ndarray
    nfe: int
    t_grid: list
    accepted: int
    rejected: int
    meta: dict = field(default_factory=dict)


def _make_field(model):
    if callable(model):
        return model
    return lambda x, t, r, cond: net.forward(model, x, t, r, cond)


def euler_sample(model, x1, cond=None, config: SolverConfig = SolverConfig(),
                 rng: np.random.Generator | None = None) -> SampleTrace:
    """Fixed-step Euler over the uniform grid t = 1 ... 0.

    Each step evaluates the field once at (x, t_k, r = t_{k+1}) and updates
    x <- x - (t_k - t_{k+1}) * u, so a mean-velocity model integrates its
    average velocity exactly over the step and nfe equals steps.

    When renoise weights are set, the state is renoised before each step
    with weight w_k.  In remix mode the noise component is estimated from
    the previous step's velocity (so w_0 must be 0), then remixed
    variance-preservingly with fresh noise: eps <- sqrt(1-w^2) * eps_hat +
    w * eps_new.  In additive mode fresh noise scaled by w_k * t_k is added.
    """
    if config.kind != "euler":
        raise DomainError("euler_sample needs config.kind == 'euler'")
    weights = config.renoise_weights or (0.0,) * config.steps
    if any(w > 0 for w in weights) and rng is None:
        raise DomainError("renoising draws fresh noise and needs an rng")
    f = _make_field(model)
    x = np.array(x1, dtype=np.float64)
    grid = 1.0 - np.arange(config.steps + 1) / config.steps
    grid[-1] = 0.0
    nfe = 0
    u_prev = None
    for k in range(config.steps):
        t_k, r_k = grid[k], grid[k + 1]
        w = weights[k]
        if w > 0.0:
            if config.renoise_mode == "remix":
                x0_hat = x - t_k * u_prev
                eps_hat = (x - (1.0 - t_k) * x0_hat) / t_k
                eps = np.sqrt(1.0 - w * w) * eps_hat + w * rng.standard_normal(x.shape)
                x = (1.0 - t_k) * x0_hat + t_k * eps
            else:
                x = x + w * t_k * rng.standard_normal(x.shape)
        u = f(x, t_k, r_k, cond)
        nfe += 1
        x = x - (t_k - r_k) * u
        u_prev = u
        if not np.all(np.isfinite(x)):
            raise SolverError(f"non-finite state after step {k}", step=k, nfe=nfe)
    return SampleTrace(final=x, nfe=nfe, t_grid=list(grid), accepted=config.steps,
                       rejected=0)


def _cfg_field(model, cond, config):
    """Wrap the raw field with classifier-free guidance; returns the guided
    field and the number of model calls it makes per evaluation."""
    f = _make_field(model)
    if cond is None or config.cfg_scale == cfg_neutral_scale(config.cfg_mode):
        return (lambda x, t: f(x, t, t, cond)), 1

    def guided(x, t):
        v_c = f(x, t, t, cond)
        v_u = f(x, t, t, None)
        return cfg_combine(v_c, v_u, config.cfg_scale, mode=config.cfg_mode)

    return guided, 2


def dopri5_sample(model, x1, cond=None,
                  config: SolverConfig = SolverConfig(kind="dopri5")) -> SampleTrace:
    """Adaptive Dormand-Prince 5(4) from t = 1 to t = 0.

    The error norm is sqrt(mean((err / (atol + rtol * |x|))^2)) and a step
    is accepted when it is <= 1.  Step sizes follow a PI controller with
    safety 0.9 clamped to factors in [0.2, 5].  With guidance active each
    field evaluation makes two model calls (conditional + unconditional).
    """
    if config.kind != "dopri5":
        raise DomainError("dopri5_sample needs config.kind == 'dopri5'")
    guided, calls_per_eval = _cfg_field(model, cond, config)
    x = np.array(x1, dtype=np.float64)
    nfe = 0

    def eval_field(x_at, s):
        # integrate forward in s = 1 - t: dx/ds = -u(x, t)
        nonlocal nfe
        nfe += calls_per_eval
        if nfe > config.max_nfe:
            raise SolverError(
                f"nfe budget {config.max_nfe} exhausted", nfe=nfe
            )
        return -np.asarray(guided(x_at, 1.0 - s), dtype=np.float64)

    s, s_end = 0.0, 1.0
    h = INITIAL_STEP
    k1 = eval_field(x, s)
    t_grid = [1.0]
    accepted = rejected = 0
    err_prev = 1.0
    ks = [None] * 7
    while s < s_end:
        if s_end - s <= MIN_STEP:
            break  # residual span is far below the error-control scale
        h = min(h, s_end - s)
        if h < MIN_STEP:
            raise SolverError(
                f"step size underflow (h={h:.3e}) at t={1.0 - s:.6f}",
                step=accepted, nfe=nfe,
            )
        ks[0] = k1
        xi = x
        for i in range(1, 7):
            xi = x + h * sum(a * ks[j] for j, a in enumerate(_DOPRI_A[i]))
            ks[i] = eval_field(xi, s + _DOPRI_C[i] * h)
        x_new = xi  # stage 7 sits at c=1 with the b-row, i.e. the 5th-order result
        err_vec = h * sum(
            (b - bh) * ks[i]
            for i, (b, bh) in enumerate(zip(_DOPRI_B, _DOPRI_B_HAT))
            if b != bh
        )
        scale = config.atol + config.rtol * np.maximum(np.abs(x), np.abs(x_new))
        err = float(np.sqrt(np.mean((err_vec / scale) ** 2)))
        if not np.isfinite(err):
            raise SolverError("non-finite error estimate", step=accepted, nfe=nfe)
        if err <= 1.0:
            s += h
            x = x_new
            k1 = ks[6]  # FSAL: stage 7 was evaluated at (x_new, s + h)
            t_grid.append(1.0 - s)
            accepted += 1
            factor = SAFETY * err ** -0.14 * err_prev ** 0.08 if err > 0 else FACTOR_MAX
            err_prev = max(err, 1e-10)
        else:
            rejected += 1
            factor = max(SAFETY * err ** -0.2, FACTOR_MIN)
            factor = min(factor, 1.0)  # never grow after a rejection
        h *= min(max(factor, FACTOR_MIN), FACTOR_MAX)
    if not np.all(np.isfinite(x)):
        raise SolverError("non-finite final state", step=accepted, nfe=nfe)
    t_grid[-1] = 0.0
    return SampleTrace(final=x, nfe=nfe, t_grid=t_grid, accepted=accepted,
                       rejected=rejected)
