"""Adversarial distillation of a trained velocity model into a few-step
student.

The loop alternates one discriminator step and one generator step per batch
once a warmup period ends.  The discriminator scores partially denoised
states: a frozen copy of the teacher supplies hidden features, and small
trainable dense heads map them to scalars under a hinge loss.  The generator
objective is the mean-velocity distillation loss plus a weighted
-D(x_r) term whose gradient enters the student through x_r = x_t - (t-r)*u.

An embedding-matching phase retrains just the (t, r) embedding of a cloned
student against the teacher's, by plain full-batch gradient descent on a
fixed time grid (the subproblem is quadratic, so a safe step size makes the
grid error decrease monotonically).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import flow, losses, net
from .errors import DomainError
from .net import GradTape

DISC_HEADS = 4
HEAD_HIDDEN = 64
EMBED_GRID_SIZE = 64
# Joint audio-video distillation runs the same loop with a stronger
# adversarial term than the audio-only default of 0.5.
AV_ADV_WEIGHT = 1.0


@dataclass(frozen=True)
class DistillConfig:
    warmup_steps: int = 5000
    adv_weight: float = 0.5
    epochs: int = 1
    lr: float = 5e-6
    cfg_scale_range: tuple = (1.0, 9.0)
    cfg_drop_prob: float = 0.1
    embed_match_steps: int = 1000

    def __post_init__(self):
        if self.warmup_steps < 0 or self.embed_match_steps < 0:
            raise DomainError("step counts must be >= 0")
        if self.adv_weight < 0.0:
            raise DomainError("adv_weight must be >= 0")
        if self.epochs < 1:
            raise DomainError("epochs must be >= 1")
        if self.lr <= 0.0:
            raise DomainError("lr must be positive")
        lo, hi = self.cfg_scale_range
        if hi < lo:
            raise DomainError("cfg_scale_range must be ordered")
        if not (0.0 <= self.cfg_drop_prob <= 1.0):
            raise DomainError("cfg_drop_prob must lie in [0, 1]")


@dataclass
class Discriminator:
    """Frozen feature trunk (a copy of the teacher) plus trainable dense
    heads, each mapping trunk features to one scalar score per sample.

    Only ``params`` (the head weights) train; the trunk never updates.
    """

    trunk: net.VelocityModel
    params: dict
    n_heads: int
    head_hidden: int


def init_discriminator(
    teacher: net.VelocityModel,
    rng: np.random.Generator,
    n_heads: int = DISC_HEADS,
    head_hidden: int = HEAD_HIDDEN,
) -> Discriminator:
    if n_heads < 1 or head_hidden < 1:
        raise DomainError("need at least one head and one hidden unit")
    feat_dim = teacher.config.hidden[-1]
    p = {}
    for h in range(n_heads):
        p[f"head{h}_w1"] = rng.normal(0.0, (2.0 / feat_dim) ** 0.5, (head_hidden, feat_dim))
        p[f"head{h}_b1"] = np.zeros(head_hidden)
        p[f"head{h}_w2"] = rng.normal(0.0, head_hidden**-0.5, head_hidden)
        p[f"head{h}_b2"] = np.zeros(1)
    return Discriminator(teacher.clone(), p, n_heads, head_hidden)


def disc_scores(disc: Discriminator, x: np.ndarray, r: np.ndarray):
    """Head scores (n, n_heads) for states x at time r.

    The trunk sees (x, t=r, r=r) unconditionally; returns (scores, cache)
    where cache replays the forward pass for the backward helpers.
    """
    feats, handle = net.hidden_forward(disc.trunk, x, r, r, None)
    pre, sig, cols = [], [], []
    for h in range(disc.n_heads):
        a = feats @ disc.params[f"head{h}_w1"].T + disc.params[f"head{h}_b1"]
        s = expit(a)
        pre.append(a)
        sig.append(s)
        cols.append((a * s) @ disc.params[f"head{h}_w2"] + disc.params[f"head{h}_b2"][0])
    cache = {"feats": feats, "handle": handle, "pre": pre, "sig": sig}
    return np.stack(cols, axis=1), cache


def _head_backward(disc: Discriminator, cache: dict, up_scores: np.ndarray):
    """Backprop d<scores, up_scores> through the heads.

    Returns (head parameter grads, gradient on the trunk features)."""
    feats = cache["feats"]
    grads = {}
    g_feats = np.zeros_like(feats)
    for h in range(disc.n_heads):
        a, s = cache["pre"][h], cache["sig"][h]
        up = up_scores[:, h]
        act = a * s
        grads[f"head{h}_w2"] = act.T @ up
        grads[f"head{h}_b2"] = np.array([up.sum()])
        g_act = up[:, None] * disc.params[f"head{h}_w2"][None, :]
        ga = g_act * (s * (1.0 + a * (1.0 - s)))
        grads[f"head{h}_w1"] = ga.T @ feats
        grads[f"head{h}_b1"] = ga.sum(axis=0)
        g_feats += ga @ disc.params[f"head{h}_w1"]
    return grads, g_feats


def disc_input_gradient(disc: Discriminator, cache: dict, up_scores: np.ndarray):
    """Gradient of <scores, up_scores> with respect to the disc input x."""
    _, g_feats = _head_backward(disc, cache, up_scores)
    return net.hidden_input_gradient(disc.trunk, cache["handle"], g_feats)


def disc_step(
    disc: Discriminator,
    student: net.VelocityModel,
    x0: np.ndarray,
    scheduler: flow.TrScheduler,
    opt: net.OptimizerState,
    rng: np.random.Generator,
    cond=None,
) -> float:
    """One hinge-loss discriminator update on fresh (t, r) draws.

    Real states are exact path points x_r = (1-r) x0 + r x1; fakes are the
    student's one-jump estimates x_t - (t-r) u, treated as constants so no
    gradient reaches the student.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    n = x0.shape[0]
    t, r = scheduler.sample(rng, n)
    batch = flow.sample_path(x0, rng, t=t)
    u = net.forward(student, batch.xt, t, r, cond)
    x_fake = batch.xt - (t - r)[:, None] * u
    x_true = (1.0 - r)[:, None] * batch.x0 + r[:, None] * batch.x1
    s_true, cache_true = disc_scores(disc, x_true, r)
    s_fake, cache_fake = disc_scores(disc, x_fake, r)
    loss = losses.hinge_disc_loss(s_true, s_fake)
    up_true = np.where(1.0 - s_true > 0.0, -1.0, 0.0) / s_true.size
    up_fake = np.where(1.0 + s_fake > 0.0, 1.0, 0.0) / s_fake.size
    g_true, _ = _head_backward(disc, cache_true, up_true)
    g_fake, _ = _head_backward(disc, cache_fake, up_fake)
    grads = {k: g_true[k] + g_fake[k] for k in g_true}
    net.adam_step(opt, disc, GradTape(grads, np.zeros(disc.trunk.config.dim)))
    return loss


def adversarial_grads(
    student: net.VelocityModel,
    disc: Discriminator,
    xt: np.ndarray,
    t: np.ndarray,
    r: np.ndarray,
    cond=None,
):
    """Generator-side adversarial term -mean D(x_r) and its student grads.

    x_r = x_t - (t-r) u(x_t, t, r); the loss gradient reaches the student
    only through u, as dL/du = -(t-r) dD/dx_r with the trunk frozen.
    """
    u = net.forward(student, xt, t, r, cond)
    x_fake = xt - (t - r)[:, None] * u
    scores, cache = disc_scores(disc, x_fake, r)
    adv_loss = losses.hinge_gen_loss(scores)
    up_scores = np.full(scores.shape, -1.0 / scores.size)
    d_dx = disc_input_gradient(disc, cache, up_scores)
    upstream_u = -(t - r)[:, None] * d_dx
    tape = net.backward(student, xt, t, r, cond, upstream_u)
    return adv_loss, tape


def gen_step(
    student: net.VelocityModel,
    teacher: net.VelocityModel,
    disc: Discriminator | None,
    x0: np.ndarray,
    scheduler: flow.TrScheduler,
    opt: net.OptimizerState,
    rng: np.random.Generator,
    step: int,
    config: DistillConfig,
    cond=None,
    cfg: flow.CfgSpec | None = None,
):
    """One generator update: mean-velocity distillation loss plus, once the
    warmup ends, adv_weight times the adversarial term.  Returns
    (mf_loss, adv_loss or None, total); the discriminator is read-only here.

    The adversarial branch draws nothing from rng, so runs with the term
    gated off consume exactly the same random stream as a plain
    meanflow_distill_loss loop.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    n = x0.shape[0]
    t, r = scheduler.sample(rng, n)
    batch = flow.sample_path(x0, rng, t=t)
    mf_loss, tape = flow.meanflow_distill_loss(
        student, teacher, batch, r, cond, cfg, rng
    )
    adv_loss = None
    total = mf_loss
    if step > config.warmup_steps and config.adv_weight != 0.0 and disc is not None:
        adv_loss, adv_tape = adversarial_grads(student, disc, batch.xt, t, r, cond)
        net.accumulate_grads(tape, adv_tape, config.adv_weight)
        total = mf_loss + config.adv_weight * adv_loss
    net.adam_step(opt, student, tape)
    return mf_loss, adv_loss, total


def effective_lr(opt: net.OptimizerState) -> float:
    return opt.lr * min(1.0, opt.step / opt.warmup)


def distill_loop(
    student: net.VelocityModel,
    teacher: net.VelocityModel,
    sample_batch,
    n_steps: int,
    batch_size: int,
    config: DistillConfig,
    rng_gen: np.random.Generator,
    rng_disc: np.random.Generator,
    cfg: flow.CfgSpec | None = None,
    scheduler: flow.TrScheduler | None = None,
    gen_opt: net.OptimizerState | None = None,
    disc: Discriminator | None = None,
    disc_opt: net.OptimizerState | None = None,
):
    """Run the alternating distillation schedule for n_steps batches.

    sample_batch(rng, n) -> (x0, cond) supplies data.  Generator and
    discriminator consume independent random streams, so setting
    adv_weight to zero leaves the generator's draws (and therefore its
    parameter trajectory) untouched.  Returns (rows, disc) where each row
    is (step, mf_loss, adv_loss or None, disc_loss or None, lr).
    """
    if n_steps < 0 or batch_size < 1:
        raise DomainError("need n_steps >= 0 and batch_size >= 1")
    scheduler = scheduler or flow.TrScheduler()
    if gen_opt is None:
        gen_opt = net.init_optimizer(student, lr=config.lr)
    adversarial = config.adv_weight != 0.0
    if adversarial and disc is None:
        disc = init_discriminator(teacher, rng_disc)
    if adversarial and disc_opt is None:
        disc_opt = net.init_optimizer(disc, lr=config.lr)

    rows = []
    for step in range(1, n_steps + 1):
        disc_loss = None
        if adversarial and step > config.warmup_steps:
            x0_d, cond_d = sample_batch(rng_disc, batch_size)
            disc_loss = disc_step(
                disc, student, x0_d, scheduler, disc_opt, rng_disc, cond_d
            )
        x0, cond = sample_batch(rng_gen, batch_size)
        mf_loss, adv_loss, _ = gen_step(
            student, teacher, disc, x0, scheduler, gen_opt, rng_gen,
            step, config, cond, cfg,
        )
        rows.append((step, mf_loss, adv_loss, disc_loss, effective_lr(gen_opt)))
    return rows, disc


def _time_features(config: net.ModelConfig, t_values: np.ndarray) -> np.ndarray:
    """Sinusoidal feature rows for (t, r=t), matching the network's layout."""
    freqs = config.frequencies()
    ang = np.asarray(t_values, dtype=np.float64)[:, None] * freqs[None, :]
    s, c = np.sin(ang), np.cos(ang)
    return np.concatenate([s, c, s, c], axis=1)


def embedding_at(model: net.VelocityModel, t_values: np.ndarray) -> np.ndarray:
    """The learned time embedding evaluated at (t, r=t)."""
    e_in = _time_features(model.config, t_values)
    return e_in @ model.params["embed_w"].T + model.params["embed_b"]


def reinit_embedding(model: net.VelocityModel, rng: np.random.Generator) -> None:
    """Fresh random (t, r) embedding, same scheme as init_model."""
    cfg = model.config
    model.params["embed_w"] = rng.normal(
        0.0, (2 * cfg.sin_dim) ** -0.5, model.params["embed_w"].shape
    )
    model.params["embed_b"] = np.zeros_like(model.params["embed_b"])


def embed_match_phase(
    student: net.VelocityModel,
    teacher: net.VelocityModel,
    steps: int,
    grid_size: int = EMBED_GRID_SIZE,
):
    """Fit the student's (t, r) embedding to the teacher's t embedding.

    Full-batch gradient descent on a fixed uniform grid of t values updates
    only the parameters named in net.EMBED_PARAM_NAMES.  The objective is
    quadratic in them, and the step size is set from the feature Gram
    spectrum, so the grid MSE decreases monotonically.  Returns the MSE
    history (length steps + 1, starting with the initial error).
    """
    if steps < 0:
        raise DomainError("steps must be >= 0")
    if student.config != teacher.config:
        raise DomainError("student and teacher must share a config")
    grid = np.linspace(0.0, 1.0, grid_size)
    target = embedding_at(teacher, grid)
    feats = _time_features(student.config, grid)
    n, e_dim = target.shape
    w = student.params["embed_w"]
    b = student.params["embed_b"]

    aug = np.concatenate([feats, np.ones((n, 1))], axis=1)
    lips = 2.0 / (n * e_dim) * float(np.linalg.eigvalsh(aug.T @ aug)[-1])
    lr = 1.0 / lips

    def mse():
        diff = feats @ w.T + b - target
        return float(np.mean(diff * diff))

    history = [mse()]
    for _ in range(steps):
        diff = feats @ w.T + b - target
        scale = 2.0 / diff.size
        w -= lr * (scale * diff.T @ feats)
        b -= lr * (scale * diff.sum(axis=0))
        history.append(mse())
    return history
