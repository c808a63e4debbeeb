"""Forward-pass math for multimodal transformer blocks.

Two block families operate over text/video/audio token sequences:

* multi-stream blocks keep one sequence per modality, with per-modality
  QKV projections and FFNs around a (optionally joint) self-attention;
* single-stream blocks run one concatenated sequence through shared
  attention plus a parallel dense nonlinearity.

Rotary position embeddings encode wall-clock time so that tokens from
streams with different frame rates line up when they co-occur.  Only the
forward pass lives here; nothing in this module is trained.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import DomainError

MODALITIES = ("text", "video", "audio")
ROPE_BASE = 10000.0
AUDIO_RATE_HZ = 100.0  # latent frames per second
VIDEO_RATE_HZ = 24.0
LN_EPS = 1e-5

# Full-scale stack shape: 6 multi-stream + 6 single-stream blocks.
PRODUCTION_SHAPE = {
    "n_multi": 6,
    "n_single": 6,
    "d_model": 1024,
    "d_ffn": 4096,
    "rope_dims": 112,
}


def _silu(x: np.ndarray) -> np.ndarray:
    return x * expit(x)


@dataclass(frozen=True)
class ModalitySequence:
    """L tokens of one modality with per-token positions (seconds) and a
    validity mask.  Invalid rows always hold the null embedding (zeros);
    the constructor enforces that by zeroing them.
    """

    tokens: np.ndarray
    modality: str
    positions: np.ndarray
    validity: np.ndarray | None = None

    def __post_init__(self):
        tokens = np.asarray(self.tokens, dtype=np.float64)
        if tokens.ndim != 2:
            raise DomainError(f"tokens must be 2-D, got shape {tokens.shape}")
        if not np.all(np.isfinite(tokens)):
            raise DomainError("tokens must be finite")
        if self.modality not in MODALITIES:
            raise DomainError(f"unknown modality {self.modality!r}")
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.shape != (tokens.shape[0],):
            raise DomainError("positions must be one value per token")
        if not np.all(np.isfinite(pos)):
            raise DomainError("positions must be finite")
        if np.any(np.diff(pos) < 0.0):
            raise DomainError("positions must be nondecreasing")
        if self.validity is None:
            valid = np.ones(tokens.shape[0], dtype=bool)
        else:
            valid = np.asarray(self.validity, dtype=bool)
            if valid.shape != (tokens.shape[0],):
                raise DomainError("validity must be one flag per token")
        tokens = np.where(valid[:, None], tokens, 0.0)
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "validity", valid)

    @property
    def length(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


@dataclass(frozen=True)
class JointSequence:
    """Concatenation of modality sequences: positions no longer need to be
    monotone because streams interleave on different clocks."""

    tokens: np.ndarray
    positions: np.ndarray
    validity: np.ndarray

    def __post_init__(self):
        tokens = np.asarray(self.tokens, dtype=np.float64)
        pos = np.asarray(self.positions, dtype=np.float64)
        valid = np.asarray(self.validity, dtype=bool)
        if tokens.ndim != 2 or not np.all(np.isfinite(tokens)):
            raise DomainError("tokens must be a finite 2-D array")
        if pos.shape != (tokens.shape[0],) or valid.shape != (tokens.shape[0],):
            raise DomainError("positions/validity must be one value per token")
        tokens = np.where(valid[:, None], tokens, 0.0)
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "validity", valid)


def concat_sequences(seqs) -> JointSequence:
    if not seqs:
        raise DomainError("need at least one sequence")
    dims = {s.dim for s in seqs}
    if len(dims) != 1:
        raise DomainError("sequences must share a model dimension")
    return JointSequence(
        np.concatenate([s.tokens for s in seqs], axis=0),
        np.concatenate([s.positions for s in seqs], axis=0),
        np.concatenate([s.validity for s in seqs], axis=0),
    )


def positions_from_indices(n: int, rate_hz: float) -> np.ndarray:
    """Token positions in seconds for a stream sampled at rate_hz."""
    if rate_hz <= 0.0:
        raise DomainError("rate_hz must be positive")
    return np.arange(n, dtype=np.float64) / rate_hz


def rope_frequencies(rope_dims: int, base: float = ROPE_BASE) -> np.ndarray:
    """Geometric angular frequencies, one per rotated coordinate pair."""
    if rope_dims <= 0 or rope_dims % 2 != 0:
        raise DomainError(f"rope_dims must be a positive even number, got {rope_dims}")
    j = np.arange(rope_dims // 2, dtype=np.float64)
    return base ** (-2.0 * j / rope_dims)


def rope_apply(
    x: np.ndarray,
    positions: np.ndarray,
    rate_hz: float = 1.0,
    rope_dims: int | None = None,
    base: float = ROPE_BASE,
) -> np.ndarray:
    """Rotate coordinate pairs of the last axis by angle frequency * seconds.

    positions/rate_hz gives the wall-clock time of each token, so streams
    with different frame rates share phases whenever they share a time.
    When rope_dims < the head dimension, trailing coordinates pass through
    unrotated.
    """
    x = np.asarray(x, dtype=np.float64)
    pos = np.asarray(positions, dtype=np.float64)
    d_h = x.shape[-1]
    if rope_dims is None:
        rope_dims = d_h
    if rope_dims % 2 != 0:
        raise DomainError(f"rotated dimension count must be even, got {rope_dims}")
    if rope_dims > d_h:
        raise DomainError(f"rope_dims {rope_dims} exceeds head dim {d_h}")
    if rate_hz <= 0.0:
        raise DomainError("rate_hz must be positive")
    if pos.ndim != 1 or pos.shape[0] != x.shape[-2]:
        raise DomainError("positions must be one value per token")
    theta = rope_frequencies(rope_dims, base)
    ang = (pos / rate_hz)[:, None] * theta
    cos, sin = np.cos(ang), np.sin(ang)
    out = x.copy()
    a = x[..., 0:rope_dims:2]
    b = x[..., 1:rope_dims:2]
    out[..., 0:rope_dims:2] = a * cos - b * sin
    out[..., 1:rope_dims:2] = a * sin + b * cos
    return out


def masked_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, valid: np.ndarray):
    """Scaled dot-product attention per head with key masking.

    q: (H, Lq, d_h); k, v: (H, Lk, d_h); valid: (Lk,) booleans.  Masked keys
    get exactly zero weight; a query with no valid keys yields a zero row.
    Returns (values (H, Lq, d_h), weights (H, Lq, Lk)).
    """
    d_h = q.shape[-1]
    logits = q @ np.swapaxes(k, -1, -2) / np.sqrt(d_h)
    logits = np.where(valid[None, None, :], logits, -np.inf)
    peak = np.max(logits, axis=-1, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)  # all-masked rows
    w = np.exp(logits - peak)
    denom = np.sum(w, axis=-1, keepdims=True)
    w = w / np.where(denom > 0.0, denom, 1.0)
    return w @ v, w


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    length, d = x.shape
    return x.reshape(length, n_heads, d // n_heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    n_heads, length, d_h = x.shape
    return x.transpose(1, 0, 2).reshape(length, n_heads * d_h)


def layer_norm(x: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = np.mean((x - mean) ** 2, axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + LN_EPS)


@dataclass
class MultiStreamParams:
    """Per-modality QKV and FFN weights around one shared output projection."""

    modalities: tuple
    wq: dict
    wk: dict
    wv: dict
    wo: np.ndarray
    ffn_w1: dict
    ffn_b1: dict
    ffn_w2: dict
    ffn_b2: dict
    n_heads: int
    rope_dims: int
    rope_base: float = ROPE_BASE

    @property
    def dim(self) -> int:
        return self.wo.shape[0]


@dataclass
class SingleStreamParams:
    """Shared attention plus a parallel dense+activation branch."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    wp: np.ndarray
    bp: np.ndarray
    n_heads: int
    rope_dims: int
    rope_base: float = ROPE_BASE

    @property
    def dim(self) -> int:
        return self.wo.shape[0]


def _check_head_geometry(d: int, n_heads: int, rope_dims: int):
    if d % n_heads != 0:
        raise DomainError(f"model dim {d} not divisible by {n_heads} heads")
    d_h = d // n_heads
    if rope_dims % 2 != 0 or rope_dims > d_h:
        raise DomainError(f"rope_dims {rope_dims} must be even and fit head dim {d_h}")


def init_multistream(
    rng: np.random.Generator,
    d: int,
    d_ffn: int,
    modalities: tuple = MODALITIES,
    n_heads: int = 2,
    rope_dims: int | None = None,
    rope_base: float = ROPE_BASE,
) -> MultiStreamParams:
    if rope_dims is None:
        rope_dims = d // n_heads
    _check_head_geometry(d, n_heads, rope_dims)
    wq, wk, wv = {}, {}, {}
    w1, b1, w2, b2 = {}, {}, {}, {}
    for m in modalities:
        wq[m] = rng.standard_normal((d, d)) / np.sqrt(d)
        wk[m] = rng.standard_normal((d, d)) / np.sqrt(d)
        wv[m] = rng.standard_normal((d, d)) / np.sqrt(d)
        w1[m] = rng.standard_normal((d, d_ffn)) / np.sqrt(d)
        b1[m] = np.zeros(d_ffn)
        w2[m] = rng.standard_normal((d_ffn, d)) / np.sqrt(d_ffn)
        b2[m] = np.zeros(d)
    wo = rng.standard_normal((d, d)) / np.sqrt(d)
    return MultiStreamParams(
        tuple(modalities), wq, wk, wv, wo, w1, b1, w2, b2, n_heads, rope_dims, rope_base
    )


def init_singlestream(
    rng: np.random.Generator,
    d: int,
    n_heads: int = 2,
    rope_dims: int | None = None,
    rope_base: float = ROPE_BASE,
) -> SingleStreamParams:
    if rope_dims is None:
        rope_dims = d // n_heads
    _check_head_geometry(d, n_heads, rope_dims)
    def w():
        return rng.standard_normal((d, d)) / np.sqrt(d)
    return SingleStreamParams(
        w(), w(), w(), w(), w(), np.zeros(d), n_heads, rope_dims, rope_base
    )


def _ffn(params: MultiStreamParams, modality: str, x: np.ndarray) -> np.ndarray:
    h = _silu(x @ params.ffn_w1[modality] + params.ffn_b1[modality])
    return h @ params.ffn_w2[modality] + params.ffn_b2[modality]


def multistream_block(
    seqs,
    params: MultiStreamParams,
    joint: bool | None = None,
    return_weights: bool = False,
):
    """One multi-stream block: per-modality QKV, self-attention (joint across
    modalities or independent per stream), shared output projection, then a
    per-modality FFN with pre-normalization on the residual sum:

        Y_m = (X_m + Z_m) + FFN_m(LN(X_m + Z_m))

    Two-modality stacks attend independently per stream by default; three or
    more default to joint attention over the concatenated keys.
    """
    names = tuple(s.modality for s in seqs)
    if names != params.modalities:
        raise DomainError(f"sequence modalities {names} do not match params {params.modalities}")
    d = params.dim
    for s in seqs:
        if s.dim != d:
            raise DomainError(f"sequence dim {s.dim} does not match params dim {d}")
    if joint is None:
        joint = len(seqs) >= 3
    heads = params.n_heads

    qs, ks, vs = [], [], []
    for s in seqs:
        q = _split_heads(s.tokens @ params.wq[s.modality], heads)
        k = _split_heads(s.tokens @ params.wk[s.modality], heads)
        v = _split_heads(s.tokens @ params.wv[s.modality], heads)
        q = rope_apply(q, s.positions, 1.0, params.rope_dims, params.rope_base)
        k = rope_apply(k, s.positions, 1.0, params.rope_dims, params.rope_base)
        qs.append(q)
        ks.append(k)
        vs.append(v)

    if joint:
        k_all = np.concatenate(ks, axis=1)
        v_all = np.concatenate(vs, axis=1)
        valid_all = np.concatenate([s.validity for s in seqs])

    outs, weights = [], []
    for i, s in enumerate(seqs):
        if joint:
            z, w = masked_attention(qs[i], k_all, v_all, valid_all)
        else:
            z, w = masked_attention(qs[i], ks[i], vs[i], s.validity)
        h = s.tokens + _merge_heads(z) @ params.wo
        y = h + _ffn(params, s.modality, layer_norm(h))
        outs.append(ModalitySequence(y, s.modality, s.positions, s.validity))
        weights.append(w)
    if return_weights:
        return outs, weights
    return outs


def singlestream_block(
    seq,
    params: SingleStreamParams,
    return_weights: bool = False,
):
    """One single-stream block over a concatenated sequence: self-attention
    plus a parallel dense+activation branch, both added to the residual:

        Y = X + Z W_o + act(LN(X) W_p + b_p)
    """
    x = seq.tokens
    if x.shape[1] != params.dim:
        raise DomainError(f"sequence dim {x.shape[1]} does not match params dim {params.dim}")
    q = _split_heads(x @ params.wq, params.n_heads)
    k = _split_heads(x @ params.wk, params.n_heads)
    v = _split_heads(x @ params.wv, params.n_heads)
    q = rope_apply(q, seq.positions, 1.0, params.rope_dims, params.rope_base)
    k = rope_apply(k, seq.positions, 1.0, params.rope_dims, params.rope_base)
    z, w = masked_attention(q, k, v, seq.validity)
    y = x + _merge_heads(z) @ params.wo + _silu(layer_norm(x) @ params.wp + params.bp)
    y = np.where(seq.validity[:, None], y, 0.0)
    if isinstance(seq, ModalitySequence):
        out = ModalitySequence(y, seq.modality, seq.positions, seq.validity)
    else:
        out = JointSequence(y, seq.positions, seq.validity)
    if return_weights:
        return out, w
    return out


def parameter_count(
    d: int, d_ffn: int, n_modalities: int, n_multi: int, n_single: int
) -> int:
    """Learnable scalar count for a stack of multi- and single-stream blocks.

    Per multi-stream block: 3 d^2 QKV weights and a (d*d_ffn + d_ffn +
    d_ffn*d + d) FFN per modality, plus one shared d^2 output projection.
    Per single-stream block: four d^2 projections plus the d^2 + d parallel
    branch.
    """
    multi = n_modalities * (3 * d * d + 2 * d * d_ffn + d_ffn + d) + d * d
    single = 5 * d * d + d
    return n_multi * multi + n_single * single


def count_params(params) -> int:
    """Actual scalar count of a params object, for checking the formula."""
    total = 0
    for val in vars(params).values():
        if isinstance(val, np.ndarray):
            total += val.size
        elif isinstance(val, dict):
            total += sum(a.size for a in val.values())
    return total
