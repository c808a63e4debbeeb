"""A small dense velocity network with exact reverse-mode gradients, exact
forward-mode directional derivatives (dual numbers), Adam with warmup and
EMA, and a byte-deterministic JSON checkpoint format.

The model computes u(x, t, r, cond): the input is the concatenation of x, a
learned linear map of sinusoidal (t, r) features, and a learned condition
embedding (with a dedicated null row for unconditional passes); hidden layers
use SiLU; the output layer is linear.

Forward, backward, and jvp all run the same primal expressions in the same
order, so the jvp value is bit-identical to forward and the tape replays
exactly what forward computed.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.special import expit

from .errors import DomainError, FileFormatError

CHECKPOINT_FORMAT = "flowfx-checkpoint-v1"


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 2
    hidden: tuple = (128, 128, 128)
    n_cond: int = 0
    cond_dim: int = 16
    embed_dim: int = 32
    n_freqs: int = 16
    freq_min: float = 1.0
    freq_max: float = 1000.0

    def __post_init__(self):
        if self.dim < 1 or self.cond_dim < 1 or self.embed_dim < 1:
            raise DomainError("dimensions must be positive")
        if self.n_cond < 0:
            raise DomainError("n_cond must be >= 0")
        if self.n_freqs < 1 or self.freq_min <= 0 or self.freq_max < self.freq_min:
            raise DomainError("bad frequency ladder")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def null_cond(self) -> int:
        """Index of the unconditional row in the condition table."""
        return self.n_cond

    @property
    def sin_dim(self) -> int:
        return 2 * self.n_freqs  # sin and cos per frequency, per variable

    @property
    def in_dim(self) -> int:
        return self.dim + self.embed_dim + self.cond_dim

    def frequencies(self) -> np.ndarray:
        if self.n_freqs == 1:
            return np.array([self.freq_min])
        expo = np.arange(self.n_freqs) / (self.n_freqs - 1)
        return self.freq_min * (self.freq_max / self.freq_min) ** expo


@dataclass
class VelocityModel:
    config: ModelConfig
    params: dict

    def clone(self) -> "VelocityModel":
        return VelocityModel(self.config, {k: v.copy() for k, v in self.params.items()})


EMBED_PARAM_NAMES = ("embed_w", "embed_b")


def init_model(config: ModelConfig, rng: np.random.Generator) -> VelocityModel:
    """He-scaled random init; biases zero; condition rows small."""
    p = {}
    p["embed_w"] = rng.normal(
        0.0, (2 * config.sin_dim) ** -0.5, (config.embed_dim, 2 * config.sin_dim)
    )
    p["embed_b"] = np.zeros(config.embed_dim)
    p["cond_table"] = 0.1 * rng.standard_normal((config.n_cond + 1, config.cond_dim))
    sizes = [config.in_dim, *config.hidden]
    for i in range(len(config.hidden)):
        p[f"w{i}"] = rng.normal(0.0, (2.0 / sizes[i]) ** 0.5, (sizes[i + 1], sizes[i]))
        p[f"b{i}"] = np.zeros(sizes[i + 1])
    p["w_out"] = rng.normal(0.0, sizes[-1] ** -0.5, (config.dim, sizes[-1]))
    p["b_out"] = np.zeros(config.dim)
    return VelocityModel(config, p)


@dataclass
class GradTape:
    """Parameter gradients (keys mirror the model) plus the input gradient."""

    grads: dict
    grad_x: np.ndarray


def _as_batch(x, dim):
    arr = np.asarray(x, dtype=np.float64)
    squeeze = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise DomainError(f"input shape {np.shape(x)} does not match dim {dim}")
    return arr, squeeze


def _as_scalar_batch(val, n, name):
    arr = np.asarray(val, dtype=np.float64)
    if arr.ndim == 0:
        return np.full(n, float(arr))
    if arr.shape != (n,):
        raise DomainError(f"{name} shape {arr.shape} does not match batch {n}")
    return arr


def _resolve_cond(cond, n, config):
    if cond is None:
        return np.full(n, config.null_cond, dtype=np.intp)
    ids = np.asarray(cond)
    if ids.ndim == 0:
        ids = np.full(n, int(ids))
    if ids.shape != (n,):
        raise DomainError(f"cond shape {ids.shape} does not match batch {n}")
    ids = ids.astype(np.intp)
    if np.any(ids < 0) or np.any(ids > config.null_cond):
        raise DomainError(
            f"condition ids must lie in [0, {config.null_cond}] "
            f"(the last id is the null condition)"
        )
    return ids


def _core(model, x, t, r, cond, want_tape=False, tangent=None):
    """Shared primal pass.  Optionally records a tape for backward and/or
    propagates a (dx, dt, dr) tangent in lockstep with the primal ops."""
    cfg = model.config
    p = model.params
    x2, squeeze = _as_batch(x, cfg.dim)
    n = x2.shape[0]
    t_arr = _as_scalar_batch(t, n, "t")
    r_arr = _as_scalar_batch(r, n, "r")
    ids = _resolve_cond(cond, n, cfg)
    freqs = cfg.frequencies()

    ang_t = t_arr[:, None] * freqs[None, :]
    ang_r = r_arr[:, None] * freqs[None, :]
    sin_t, cos_t = np.sin(ang_t), np.cos(ang_t)
    sin_r, cos_r = np.sin(ang_r), np.cos(ang_r)
    e_in = np.concatenate([sin_t, cos_t, sin_r, cos_r], axis=1)
    e = e_in @ p["embed_w"].T + p["embed_b"]
    c = p["cond_table"][ids]
    z = np.concatenate([x2, e, c], axis=1)

    dh = None
    if tangent is not None:
        dx, dt, dr = tangent
        dx2, _ = _as_batch(dx, cfg.dim)
        if dx2.shape != x2.shape:
            raise DomainError("tangent dx shape does not match x")
        dt_arr = _as_scalar_batch(dt, n, "dt")
        dr_arr = _as_scalar_batch(dr, n, "dr")
        d_ang_t = dt_arr[:, None] * freqs[None, :]
        d_ang_r = dr_arr[:, None] * freqs[None, :]
        de_in = np.concatenate(
            [cos_t * d_ang_t, -sin_t * d_ang_t, cos_r * d_ang_r, -sin_r * d_ang_r],
            axis=1,
        )
        de = de_in @ p["embed_w"].T
        dh = np.concatenate([dx2, de, np.zeros_like(c)], axis=1)

    tape = None
    if want_tape:
        tape = {"e_in": e_in, "ids": ids, "inputs": [], "pre": [], "sig": []}

    h = z
    for i in range(len(cfg.hidden)):
        if want_tape:
            tape["inputs"].append(h)
        a = h @ p[f"w{i}"].T + p[f"b{i}"]
        s = expit(a)
        if tangent is not None:
            da = dh @ p[f"w{i}"].T
            dh = (s * (1.0 + a * (1.0 - s))) * da  # d silu
        h = a * s  # silu
        if want_tape:
            tape["pre"].append(a)
            tape["sig"].append(s)
    if want_tape:
        tape["inputs"].append(h)
    u = h @ p["w_out"].T + p["b_out"]
    du = dh @ p["w_out"].T if tangent is not None else None

    if squeeze:
        u = u[0]
        du = du[0] if du is not None else None
    return u, du, tape, squeeze


def forward(model: VelocityModel, x, t, r, cond=None) -> np.ndarray:
    """Evaluate u(x, t, r, cond).  x is (dim,) or (batch, dim); t and r are
    scalars or per-sample vectors; cond is None (unconditional), a scalar id,
    or a per-sample id vector."""
    u, _, _, _ = _core(model, x, t, r, cond)
    return u


def backward(model: VelocityModel, x, t, r, cond, upstream) -> GradTape:
    """Exact gradients of <forward(model, x, t, r, cond), upstream> with
    respect to every parameter and to x."""
    cfg = model.config
    p = model.params
    u, _, tape, squeeze = _core(model, x, t, r, cond, want_tape=True)
    up, up_squeeze = _as_batch(upstream, cfg.dim)
    if up_squeeze != squeeze or up.shape[0] != np.atleast_2d(u).shape[0]:
        raise DomainError("upstream shape does not match output")

    grads = {}
    h_last = tape["inputs"][-1]
    grads["w_out"] = up.T @ h_last
    grads["b_out"] = up.sum(axis=0)
    g = up @ p["w_out"]
    for i in reversed(range(len(cfg.hidden))):
        a, s, inp = tape["pre"][i], tape["sig"][i], tape["inputs"][i]
        ga = g * (s * (1.0 + a * (1.0 - s)))
        grads[f"w{i}"] = ga.T @ inp
        grads[f"b{i}"] = ga.sum(axis=0)
        g = ga @ p[f"w{i}"]

    dim, ed = cfg.dim, cfg.embed_dim
    gx = g[:, :dim]
    ge = g[:, dim : dim + ed]
    gc = g[:, dim + ed :]
    grads["embed_w"] = ge.T @ tape["e_in"]
    grads["embed_b"] = ge.sum(axis=0)
    gtab = np.zeros_like(p["cond_table"])
    np.add.at(gtab, tape["ids"], gc)
    grads["cond_table"] = gtab
    return GradTape(grads, gx[0] if squeeze else gx)


def jvp(model: VelocityModel, x, t, r, cond, tangent):
    """Forward-mode directional derivative along tangent = (dx, dt, dr).

    Returns (value, derivative); the value is bit-identical to forward
    because both run the same primal expressions.
    """
    u, du, _, _ = _core(model, x, t, r, cond, tangent=tangent)
    return u, du


def hidden_forward(model: VelocityModel, x, t, r, cond=None):
    """Penultimate hidden activations (the features feeding the output
    layer) plus a replay handle for hidden_input_gradient."""
    _, _, tape, squeeze = _core(model, x, t, r, cond, want_tape=True)
    h = tape["inputs"][-1]
    return (h[0] if squeeze else h), tape


def hidden_input_gradient(model: VelocityModel, tape, upstream) -> np.ndarray:
    """Gradient of <hidden_forward features, upstream> with respect to x,
    holding every parameter fixed (the net acts as a frozen feature map)."""
    cfg = model.config
    p = model.params
    g = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    for i in reversed(range(len(cfg.hidden))):
        a, s = tape["pre"][i], tape["sig"][i]
        ga = g * (s * (1.0 + a * (1.0 - s)))
        g = ga @ p[f"w{i}"]
    return g[:, : cfg.dim]


def zero_grads(model: VelocityModel) -> GradTape:
    return GradTape(
        {k: np.zeros_like(v) for k, v in model.params.items()},
        np.zeros(model.config.dim),
    )


def accumulate_grads(total: GradTape, part: GradTape, weight: float = 1.0) -> None:
    for k in total.grads:
        total.grads[k] += weight * part.grads[k]


def global_grad_norm(tape: GradTape) -> float:
    return float(np.sqrt(sum(np.sum(g * g) for g in tape.grads.values())))


@dataclass
class OptimizerState:
    lr: float = 1e-4
    warmup: int = 1000
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ema_decay: float = 0.999
    step: int = 0
    skipped: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    ema: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 < self.ema_decay < 1.0):
            raise DomainError("ema_decay must lie in (0, 1)")


def init_optimizer(model: VelocityModel, **kwargs) -> OptimizerState:
    state = OptimizerState(**kwargs)
    state.m = {k: np.zeros_like(p) for k, p in model.params.items()}
    state.v = {k: np.zeros_like(p) for k, p in model.params.items()}
    state.ema = {k: p.copy() for k, p in model.params.items()}
    return state


def adam_step(state: OptimizerState, model: VelocityModel, tape: GradTape) -> bool:
    """One optimizer step, in place.  Order: global-norm clip at clip_norm,
    linear learning-rate warmup, bias-corrected Adam, then EMA shadow update.

    Non-finite gradients skip the step entirely (no state advances) and are
    reported with a warning; returns whether the step was applied.
    """
    for k, g in tape.grads.items():
        if not np.all(np.isfinite(g)):
            state.skipped += 1
            warnings.warn(f"skipping optimizer step: non-finite gradient in {k!r}")
            return False
    norm = global_grad_norm(tape)
    scale = state.clip_norm / norm if norm > state.clip_norm else 1.0
    state.step += 1
    lr_t = state.lr * min(1.0, state.step / state.warmup)
    b1c = 1.0 - state.beta1**state.step
    b2c = 1.0 - state.beta2**state.step
    for k, p in model.params.items():
        g = tape.grads[k] * scale
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        p -= lr_t * (state.m[k] / b1c) / (np.sqrt(state.v[k] / b2c) + state.eps)
        state.ema[k] = state.ema_decay * state.ema[k] + (1.0 - state.ema_decay) * p
    return True


def ema_model(model: VelocityModel, state: OptimizerState) -> VelocityModel:
    """A copy of the model carrying the EMA shadow parameters."""
    return VelocityModel(model.config, {k: v.copy() for k, v in state.ema.items()})


def _config_to_dict(config: ModelConfig) -> dict:
    return {f.name: getattr(config, f.name) for f in fields(config)}


def _config_from_dict(d: dict) -> ModelConfig:
    try:
        d = dict(d)
        d["hidden"] = tuple(d["hidden"])
        return ModelConfig(**d)
    except (TypeError, KeyError, DomainError) as exc:
        raise FileFormatError("<config>", f"bad model config: {exc}") from exc


def save_checkpoint(path, model: VelocityModel, optimizer=None, meta=None) -> None:
    """Serialize model (and optionally optimizer state) as JSON.

    Floats go through repr, so loading restores every parameter exactly and
    identical states produce identical bytes.
    """
    for k, p in model.params.items():
        if not np.all(np.isfinite(p)):
            raise DomainError(f"refusing to checkpoint non-finite parameter {k!r}")
    obj = {
        "format": CHECKPOINT_FORMAT,
        "config": _config_to_dict(model.config),
        "params": {k: v.tolist() for k, v in model.params.items()},
        "optimizer": None,
        "meta": dict(meta) if meta else {},
    }
    if optimizer is not None:
        obj["optimizer"] = {
            "lr": optimizer.lr,
            "warmup": optimizer.warmup,
            "clip_norm": optimizer.clip_norm,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
            "ema_decay": optimizer.ema_decay,
            "step": optimizer.step,
            "skipped": optimizer.skipped,
            "m": {k: v.tolist() for k, v in optimizer.m.items()},
            "v": {k: v.tolist() for k, v in optimizer.v.items()},
            "ema": {k: v.tolist() for k, v in optimizer.ema.items()},
        }
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, separators=(",", ":"), allow_nan=False)


def load_checkpoint(path):
    """Inverse of save_checkpoint: returns (model, optimizer or None, meta)."""
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FileFormatError(path, f"invalid JSON: {exc}") from exc
    if not isinstance(obj, dict) or obj.get("format") != CHECKPOINT_FORMAT:
        raise FileFormatError(path, f"not a {CHECKPOINT_FORMAT} checkpoint")
    try:
        config = _config_from_dict(obj["config"])
        params = {k: np.array(v, dtype=np.float64) for k, v in obj["params"].items()}
        model = VelocityModel(config, params)
        expected = set(init_model(config, np.random.default_rng(0)).params)
        if set(params) != expected:
            raise KeyError(f"parameter set mismatch: {sorted(set(params) ^ expected)}")
        opt = None
        if obj.get("optimizer") is not None:
            o = obj["optimizer"]
            opt = OptimizerState(
                lr=o["lr"], warmup=o["warmup"], clip_norm=o["clip_norm"],
                beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"],
                ema_decay=o["ema_decay"], step=o["step"], skipped=o["skipped"],
            )
            opt.m = {k: np.array(v, dtype=np.float64) for k, v in o["m"].items()}
            opt.v = {k: np.array(v, dtype=np.float64) for k, v in o["v"].items()}
            opt.ema = {k: np.array(v, dtype=np.float64) for k, v in o["ema"].items()}
        return model, opt, obj.get("meta", {})
    except FileFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise FileFormatError(path, f"malformed checkpoint: {exc}") from exc
