"""Evaluation metrics: SI-SDR, mel/STFT spectral distances, Gaussian Fréchet
distance, softmax KL divergence, paired cosine score, retrieval recall@k,
and the CSV formats that carry embeddings and metric reports.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .dsp import AudioBuffer, StftConfig, log_mel, mel_filterbank, stft
from .errors import DomainError, FileFormatError

SDR_CAP_DB = 100.0
KL_EPS = 1e-10
MEL_DIST_CONFIG = StftConfig(n_fft=2048, hop=512)
MEL_DIST_BANDS = 128
STFT_DIST_CONFIG = StftConfig(n_fft=512, hop=128)
LOG_MAG_FLOOR = 1e-5


@dataclass(frozen=True)
class EmbeddingSet:
    """N x D embedding rows with optional string ids."""

    rows: np.ndarray
    ids: tuple | None = None

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2:
            raise DomainError(f"embeddings must be 2-D, got shape {rows.shape}")
        if not np.all(np.isfinite(rows)):
            raise DomainError("embeddings must be finite")
        object.__setattr__(self, "rows", rows)
        if self.ids is not None:
            ids = tuple(str(i) for i in self.ids)
            if len(ids) != rows.shape[0]:
                raise DomainError("id count does not match row count")
            object.__setattr__(self, "ids", ids)


def si_sdr(reference: AudioBuffer, estimate: AudioBuffer) -> float:
    """Scale-invariant signal-to-distortion ratio in dB, capped to +/-100.

    The reference is rescaled by alpha = <estimate, reference> / ||reference||^2
    before comparing, so any positive rescaling of a faithful estimate scores
    identically.
    """
    s = reference.samples
    s_hat = estimate.samples
    if len(s) != len(s_hat):
        raise DomainError("lengths differ")
    denom = float(s @ s)
    if denom == 0.0:
        raise DomainError("reference is all zeros")
    alpha = float(s_hat @ s) / denom
    target = alpha * s
    signal = float(target @ target)
    err = target - s_hat
    noise = float(err @ err)
    if noise == 0.0:
        return SDR_CAP_DB
    if signal == 0.0:
        return -SDR_CAP_DB
    return float(np.clip(10.0 * np.log10(signal / noise), -SDR_CAP_DB, SDR_CAP_DB))


def _check_pair(a: AudioBuffer, b: AudioBuffer):
    if a.sample_rate != b.sample_rate:
        raise DomainError("sample rates differ")
    if len(a.samples) != len(b.samples):
        raise DomainError("lengths differ")


def mel_dist(a: AudioBuffer, b: AudioBuffer) -> float:
    """Mean absolute difference between 128-band log-mel spectrograms
    (FFT 2048, hop 512)."""
    _check_pair(a, b)
    fb = mel_filterbank(MEL_DIST_BANDS, MEL_DIST_CONFIG, a.sample_rate)
    return float(
        np.mean(np.abs(log_mel(a, fb, MEL_DIST_CONFIG) - log_mel(b, fb, MEL_DIST_CONFIG)))
    )


def log_magnitude(a: AudioBuffer, config: StftConfig = STFT_DIST_CONFIG) -> np.ndarray:
    return np.log(np.maximum(np.abs(stft(a, config).data), LOG_MAG_FLOOR))


def stft_dist(a: AudioBuffer, b: AudioBuffer) -> float:
    """Mean absolute difference between log-magnitude spectrograms
    (FFT 512, hop 128)."""
    _check_pair(a, b)
    return float(np.mean(np.abs(log_magnitude(a) - log_magnitude(b))))


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    vals = np.maximum(vals, 0.0)  # clamp tiny negative roundoff
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_from_stats(mu1, cov1, mu2, cov2) -> float:
    """Gaussian Frechet distance ||mu1-mu2||^2 + Tr(C1 + C2 - 2 (C1 C2)^1/2).

    The matrix square root uses the symmetric form sqrt(S1 C2 S1) with
    S1 = C1^1/2, which keeps everything in eigh territory.
    """
    mu1 = np.asarray(mu1, dtype=np.float64)
    mu2 = np.asarray(mu2, dtype=np.float64)
    cov1 = np.asarray(cov1, dtype=np.float64)
    cov2 = np.asarray(cov2, dtype=np.float64)
    if mu1.shape != mu2.shape or cov1.shape != cov2.shape:
        raise DomainError("statistic shapes differ")
    s1 = _psd_sqrt(cov1)
    inner = s1 @ cov2 @ s1
    inner = (inner + inner.T) / 2.0
    vals = np.linalg.eigh(inner)[0]
    vals = np.maximum(vals, 0.0)
    diff = mu1 - mu2
    dist = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * np.sum(np.sqrt(vals)))
    # identical statistics can land a hair below zero through cancellation
    return max(dist, 0.0)


def frechet_distance(x: EmbeddingSet, y: EmbeddingSet) -> float:
    """Frechet distance between the Gaussian fits of two embedding sets.

    Sample covariances use ddof=1; when a set has no more rows than
    dimensions, a 1e-6 ridge keeps the covariance well-posed.
    """
    xr, yr = x.rows, y.rows
    if xr.shape[1] != yr.shape[1]:
        raise DomainError("embedding dimensions differ")
    if xr.shape[0] < 2 or yr.shape[0] < 2:
        raise DomainError("need at least 2 rows per set for covariance")
    d = xr.shape[1]
    stats = []
    for rows in (xr, yr):
        mu = rows.mean(axis=0)
        cov = np.atleast_2d(np.cov(rows, rowvar=False, ddof=1))
        if rows.shape[0] <= d:
            cov = cov + 1e-6 * np.eye(d)
        stats.append((mu, cov))
    return frechet_from_stats(stats[0][0], stats[0][1], stats[1][0], stats[1][1])


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    mx = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - mx)
    return e / e.sum(axis=1, keepdims=True)


def kl_divergence(p_logits, q_logits) -> float:
    """KL(softmax(p) || softmax(q)), averaged over rows when batched.

    Both probabilities are floored by 1e-10 inside the logs; entries where
    p is exactly zero contribute nothing.
    """
    p = np.atleast_2d(np.asarray(p_logits, dtype=np.float64))
    q = np.atleast_2d(np.asarray(q_logits, dtype=np.float64))
    if p.shape != q.shape:
        raise DomainError(f"logit shapes differ: {p.shape} vs {q.shape}")
    pp = _softmax_rows(p)
    qq = _softmax_rows(q)
    terms = np.where(
        pp > 0.0,
        pp * (np.log(np.maximum(pp, KL_EPS)) - np.log(np.maximum(qq, KL_EPS))),
        0.0,
    )
    return float(np.mean(terms.sum(axis=1)))


def clap_score(text_emb: EmbeddingSet, audio_emb: EmbeddingSet) -> float:
    """Mean cosine similarity between matched (same-index) rows."""
    t, a = text_emb.rows, audio_emb.rows
    if t.shape != a.shape:
        raise DomainError("embedding sets must share a shape")
    tn = np.linalg.norm(t, axis=1)
    an = np.linalg.norm(a, axis=1)
    if np.any(tn == 0.0) or np.any(an == 0.0):
        raise DomainError("zero-norm embedding row has no direction")
    return float(np.mean(np.sum(t * a, axis=1) / (tn * an)))


def cosine_similarity_matrix(text_emb: EmbeddingSet, audio_emb: EmbeddingSet) -> np.ndarray:
    t, a = text_emb.rows, audio_emb.rows
    if t.shape[1] != a.shape[1]:
        raise DomainError("embedding dimensions differ")
    tn = np.linalg.norm(t, axis=1, keepdims=True)
    an = np.linalg.norm(a, axis=1, keepdims=True)
    if np.any(tn == 0.0) or np.any(an == 0.0):
        raise DomainError("zero-norm embedding row has no direction")
    return (t / tn) @ (a / an).T


def recall_at_k(sim: np.ndarray, k: int):
    """Retrieval recall: fraction of queries whose true match (the diagonal)
    ranks within the top k, ties broken toward the lower index.

    Rows are text queries over audio candidates (t2a); columns give the
    audio-to-text direction.  Returns (t2a, a2t).
    """
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise DomainError(f"similarity matrix must be square, got {sim.shape}")
    n = sim.shape[0]
    if not (1 <= k <= n):
        raise DomainError(f"k={k} out of range for {n} candidates")

    def direction(mat):
        hits = 0
        for i in range(n):
            order = np.argsort(-mat[i], kind="stable")  # stable = lower index wins ties
            if i in order[:k]:
                hits += 1
        return hits / n

    return direction(sim), direction(sim.T)


def write_embedding_csv(path, emb: EmbeddingSet) -> None:
    """Write rows as `id,dim0..dimN`; ids default to the row index."""
    ids = emb.ids if emb.ids is not None else tuple(str(i) for i in range(len(emb.rows)))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id"] + [f"dim{j}" for j in range(emb.rows.shape[1])])
        for rid, row in zip(ids, emb.rows):
            writer.writerow([rid] + [repr(float(v)) for v in row])


def read_embedding_csv(path) -> EmbeddingSet:
    """Parse an `id,dim0..dimN` CSV; malformed content reports the byte
    offset of the offending line."""
    rows, ids = [], []
    with open(path, "rb") as fh:
        offset = fh.tell()
        header = fh.readline()
        fields = header.decode("utf-8", errors="replace").strip().split(",")
        if len(fields) < 2 or fields[0] != "id":
            raise FileFormatError(path, "expected header id,dim0..dimN", offset=offset)
        dim = len(fields) - 1
        if fields[1:] != [f"dim{j}" for j in range(dim)]:
            raise FileFormatError(path, "dimension columns must be dim0..dimN", offset=offset)
        while True:
            offset = fh.tell()
            line = fh.readline()
            if not line:
                break
            text = line.decode("utf-8", errors="replace").strip()
            if not text:
                continue
            parts = text.split(",")
            if len(parts) != dim + 1:
                raise FileFormatError(
                    path, f"expected {dim + 1} fields, got {len(parts)}", offset=offset
                )
            try:
                rows.append([float(v) for v in parts[1:]])
            except ValueError as exc:
                raise FileFormatError(path, f"bad number: {exc}", offset=offset) from exc
            ids.append(parts[0])
    if not rows:
        raise FileFormatError(path, "no embedding rows")
    return EmbeddingSet(np.array(rows, dtype=np.float64), ids=tuple(ids))


def write_report_csv(path, entries) -> None:
    """Write `metric,value,n_items` rows; floats via repr for stable bytes."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value", "n_items"])
        for metric, value, n_items in entries:
            writer.writerow([metric, repr(float(value)), int(n_items)])
