"""Metric-layer tests.

Hand-checkable fixtures are frozen as literals (SI-SDR 0 dB case, softmax KL
of (0, ln 3) against uniform, diagonal-covariance Fréchet distances); the
retrieval metric is cross-checked against a brute-force sort oracle.
"""

import numpy as np
import pytest

from flowfx.dsp import AudioBuffer, StftConfig, log_mel, mel_filterbank, stft
from flowfx.errors import DomainError, FileFormatError
from flowfx.metrics import (
    EmbeddingSet,
    clap_score,
    cosine_similarity_matrix,
    frechet_distance,
    frechet_from_stats,
    kl_divergence,
    mel_dist,
    read_embedding_csv,
    recall_at_k,
    si_sdr,
    stft_dist,
    write_embedding_csv,
    write_report_csv,
)

RATE = 48000


def _buf(x):
    return AudioBuffer(np.asarray(x, dtype=np.float64), RATE)


class TestSiSdr:
    def test_zero_db_hand_case(self):
        # alpha = 1, target (1,0), error (0,-1): powers equal -> exactly 0 dB.
        assert si_sdr(_buf([1.0, 0.0]), _buf([1.0, 1.0])) == 0.0

    def test_perfect_and_scaled_estimates_hit_cap(self):
        rng = np.random.default_rng(11)
        s = rng.standard_normal(500)
        assert si_sdr(_buf(s), _buf(s)) == 100.0
        assert si_sdr(_buf(s), _buf(2.0 * s)) == 100.0

    def test_orthogonal_estimate_hits_floor(self):
        assert si_sdr(_buf([1.0, 0.0]), _buf([0.0, 1.0])) == -100.0

    def test_scale_invariance_of_estimate(self):
        rng = np.random.default_rng(12)
        s = rng.standard_normal(300)
        est = s + 0.1 * rng.standard_normal(300)
        base = si_sdr(_buf(s), _buf(est))
        for beta in (0.01, 3.0, 250.0):
            assert si_sdr(_buf(s), _buf(beta * est)) == pytest.approx(base, abs=1e-9)

    def test_zero_reference_rejected(self):
        with pytest.raises(DomainError):
            si_sdr(_buf(np.zeros(10)), _buf(np.ones(10)))

    def test_length_mismatch_rejected(self):
        with pytest.raises(DomainError):
            si_sdr(_buf(np.ones(10)), _buf(np.ones(11)))


class TestSpectralDistances:
    def test_identical_signals_give_zero(self):
        rng = np.random.default_rng(21)
        a = _buf(rng.standard_normal(RATE // 4))
        assert mel_dist(a, a) == 0.0
        assert stft_dist(a, a) == 0.0

    def test_mel_dist_of_e_scaling_is_one(self):
        # log(e*x) - log(x) = 1 wherever neither side clamps at the floor;
        # loud white noise keeps every band well above it.
        rng = np.random.default_rng(22)
        x = rng.standard_normal(RATE // 4)
        a = _buf(x)
        b = _buf(np.e * x)
        fb = mel_filterbank(128, StftConfig(2048, 512), RATE)
        assert np.min(log_mel(a, fb, StftConfig(2048, 512))) > np.log(1e-5)
        assert mel_dist(a, b) == pytest.approx(1.0, abs=1e-9)

    def test_stft_dist_matches_recomputation(self):
        rng = np.random.default_rng(23)
        a = _buf(rng.standard_normal(4000))
        b = _buf(rng.standard_normal(4000))
        cfg = StftConfig(512, 128)
        la = np.log(np.maximum(np.abs(stft(a, cfg).data), 1e-5))
        lb = np.log(np.maximum(np.abs(stft(b, cfg).data), 1e-5))
        expected = float(np.mean(np.abs(la - lb)))
        assert stft_dist(a, b) == pytest.approx(expected, abs=1e-9)

    def test_rate_mismatch_rejected(self):
        a = AudioBuffer(np.ones(100), 48000)
        b = AudioBuffer(np.ones(100), 44100)
        with pytest.raises(DomainError):
            mel_dist(a, b)


class TestFrechet:
    def test_diagonal_closed_form(self):
        # ||mu_d||^2 + sum(a + b - 2 sqrt(ab)) = 2 + 4 + 1 = 7.
        got = frechet_from_stats(
            [0.0, 0.0], np.diag([1.0, 4.0]), [1.0, -1.0], np.diag([9.0, 1.0])
        )
        assert got == pytest.approx(7.0, abs=1e-6)

    def test_diagonal_closed_form_randomized(self):
        rng = np.random.default_rng(31)
        for _ in range(20):
            d = int(rng.integers(2, 6))
            a = rng.uniform(0.1, 4.0, d)
            b = rng.uniform(0.1, 4.0, d)
            m1 = rng.standard_normal(d)
            m2 = rng.standard_normal(d)
            want = float((m1 - m2) @ (m1 - m2) + np.sum(a + b - 2.0 * np.sqrt(a * b)))
            got = frechet_from_stats(m1, np.diag(a), m2, np.diag(b))
            assert got == pytest.approx(want, abs=1e-9)

    def test_equal_covariance_reduces_to_mean_gap(self):
        rng = np.random.default_rng(32)
        w = rng.standard_normal((4, 4))
        cov = w @ w.T + 0.5 * np.eye(4)
        d = rng.standard_normal(4)
        got = frechet_from_stats(np.zeros(4), cov, d, cov)
        assert got == pytest.approx(float(d @ d), abs=1e-9)

    def test_same_set_is_zero(self):
        rng = np.random.default_rng(33)
        x = EmbeddingSet(rng.standard_normal((64, 4)))
        assert frechet_distance(x, x) == pytest.approx(0.0, abs=1e-6)

    def test_symmetry(self):
        rng = np.random.default_rng(34)
        x = EmbeddingSet(rng.standard_normal((50, 3)))
        y = EmbeddingSet(1.5 * rng.standard_normal((70, 3)) + 0.3)
        assert frechet_distance(x, y) == pytest.approx(frechet_distance(y, x), abs=1e-9)

    def test_ridge_keeps_small_sets_finite(self):
        rng = np.random.default_rng(35)
        x = EmbeddingSet(rng.standard_normal((3, 8)))  # N <= D: rank-deficient cov
        y = EmbeddingSet(rng.standard_normal((3, 8)))
        assert np.isfinite(frechet_distance(x, y))

    def test_too_few_rows_rejected(self):
        with pytest.raises(DomainError):
            frechet_distance(EmbeddingSet(np.ones((1, 3))), EmbeddingSet(np.ones((5, 3))))

    def test_dim_mismatch_rejected(self):
        rng = np.random.default_rng(36)
        with pytest.raises(DomainError):
            frechet_distance(
                EmbeddingSet(rng.standard_normal((4, 3))),
                EmbeddingSet(rng.standard_normal((4, 2))),
            )


class TestKl:
    def test_hand_value_against_uniform(self):
        # softmax(0, ln 3) = (1/4, 3/4); KL to uniform = .25 ln .5 + .75 ln 1.5.
        got = kl_divergence([0.0, np.log(3.0)], [0.0, 0.0])
        assert got == pytest.approx(0.13081203594113697, abs=1e-12)

    def test_identical_logits_give_exact_zero(self):
        rng = np.random.default_rng(41)
        logits = rng.standard_normal((5, 7))
        assert kl_divergence(logits, logits) == 0.0

    def test_shift_invariance_per_row(self):
        rng = np.random.default_rng(42)
        p = rng.standard_normal((4, 6))
        q = rng.standard_normal((4, 6))
        shifted = kl_divergence(p + 3.0, q - 2.0)
        assert shifted == pytest.approx(kl_divergence(p, q), abs=1e-12)

    def test_nonnegative_and_positive_when_different(self):
        rng = np.random.default_rng(43)
        for _ in range(30):
            p = rng.standard_normal((3, 8)) * rng.uniform(0.5, 4.0)
            q = rng.standard_normal((3, 8)) * rng.uniform(0.5, 4.0)
            val = kl_divergence(p, q)
            assert val > 0.0

    def test_batched_is_mean_of_rows(self):
        rng = np.random.default_rng(44)
        p = rng.standard_normal((6, 5))
        q = rng.standard_normal((6, 5))
        rows = [kl_divergence(p[i], q[i]) for i in range(6)]
        assert kl_divergence(p, q) == pytest.approx(np.mean(rows), abs=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(DomainError):
            kl_divergence(np.zeros(3), np.zeros(4))


class TestClapScore:
    def test_identical_sets_score_one(self):
        rng = np.random.default_rng(51)
        e = EmbeddingSet(rng.standard_normal((10, 6)))
        assert clap_score(e, e) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_rows_score_zero(self):
        t = EmbeddingSet(np.array([[1.0, 0.0], [0.0, 2.0]]))
        a = EmbeddingSet(np.array([[0.0, 3.0], [5.0, 0.0]]))
        assert clap_score(t, a) == 0.0

    def test_row_scaling_invariance(self):
        rng = np.random.default_rng(52)
        t = rng.standard_normal((8, 5))
        a = rng.standard_normal((8, 5))
        base = clap_score(EmbeddingSet(t), EmbeddingSet(a))
        scaled = clap_score(EmbeddingSet(4.0 * t), EmbeddingSet(0.25 * a))
        assert scaled == pytest.approx(base, abs=1e-12)

    def test_zero_row_rejected(self):
        t = EmbeddingSet(np.array([[0.0, 0.0], [1.0, 0.0]]))
        a = EmbeddingSet(np.array([[1.0, 0.0], [1.0, 0.0]]))
        with pytest.raises(DomainError):
            clap_score(t, a)

    def test_similarity_matrix_agrees_on_diagonal(self):
        rng = np.random.default_rng(53)
        t = EmbeddingSet(rng.standard_normal((7, 4)))
        a = EmbeddingSet(rng.standard_normal((7, 4)))
        sim = cosine_similarity_matrix(t, a)
        assert np.mean(np.diag(sim)) == pytest.approx(clap_score(t, a), abs=1e-12)


def _recall_oracle(sim, k):
    """Brute-force ranking with explicit (value desc, index asc) sort keys."""
    n = sim.shape[0]

    def one_direction(mat):
        hits = 0
        for i in range(n):
            order = sorted(range(n), key=lambda j: (-mat[i, j], j))
            if order.index(i) < k:
                hits += 1
        return hits / n

    return one_direction(sim), one_direction(sim.T)


class TestRecallAtK:
    def test_identity_matrix_is_perfect(self):
        assert recall_at_k(np.eye(5), 1) == (1.0, 1.0)

    def test_tie_goes_to_lower_index(self):
        sim = np.array([[1.0, 1.0], [0.0, 1.0]])
        # Row ties pick column 0 first, so t2a row 0 still hits at k=1;
        # column 1 of the transpose loses its tie and misses.
        assert recall_at_k(sim, 1) == (1.0, 0.5)

    def test_matches_sort_oracle_continuous(self):
        rng = np.random.default_rng(61)
        for trial in range(50):
            sim = rng.standard_normal((10, 10))
            for k in (1, 5, 10):
                assert recall_at_k(sim, k) == _recall_oracle(sim, k), (trial, k)

    def test_matches_sort_oracle_with_ties(self):
        rng = np.random.default_rng(62)
        for trial in range(50):
            sim = rng.integers(0, 3, (10, 10)).astype(np.float64)
            for k in (1, 5, 10):
                assert recall_at_k(sim, k) == _recall_oracle(sim, k), (trial, k)

    def test_k_equal_n_is_always_one(self):
        rng = np.random.default_rng(63)
        sim = rng.standard_normal((6, 6))
        assert recall_at_k(sim, 6) == (1.0, 1.0)

    def test_bad_k_rejected(self):
        sim = np.eye(4)
        with pytest.raises(DomainError):
            recall_at_k(sim, 5)
        with pytest.raises(DomainError):
            recall_at_k(sim, 0)

    def test_non_square_rejected(self):
        with pytest.raises(DomainError):
            recall_at_k(np.ones((3, 4)), 1)


class TestCsv:
    def test_embedding_roundtrip_is_exact(self, tmp_path):
        rng = np.random.default_rng(71)
        emb = EmbeddingSet(rng.standard_normal((5, 3)), ids=("a", "b", "c", "d", "e"))
        path = tmp_path / "emb.csv"
        write_embedding_csv(path, emb)
        back = read_embedding_csv(path)
        assert back.ids == emb.ids
        assert np.array_equal(back.rows, emb.rows)  # repr roundtrips exactly

    def test_default_ids_are_row_indices(self, tmp_path):
        emb = EmbeddingSet(np.ones((3, 2)))
        path = tmp_path / "emb.csv"
        write_embedding_csv(path, emb)
        assert read_embedding_csv(path).ids == ("0", "1", "2")

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("name,x,y\n1,2,3\n")
        with pytest.raises(FileFormatError):
            read_embedding_csv(path)

    def test_bad_number_reports_offset(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("id,dim0\nrow0,1.5\nrow1,oops\n")
        with pytest.raises(FileFormatError) as exc:
            read_embedding_csv(path)
        assert exc.value.offset == len("id,dim0\nrow0,1.5\n")

    def test_field_count_mismatch_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("id,dim0,dim1\nrow0,1.0\n")
        with pytest.raises(FileFormatError):
            read_embedding_csv(path)

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("id,dim0\n")
        with pytest.raises(FileFormatError):
            read_embedding_csv(path)

    def test_report_csv_layout(self, tmp_path):
        path = tmp_path / "report.csv"
        write_report_csv(path, [("si_sdr", 42.5, 10), ("mel_dist", 0.125, 10)])
        lines = path.read_text().splitlines()
        assert lines[0] == "metric,value,n_items"
        assert lines[1] == "si_sdr,42.5,10"
        assert lines[2] == "mel_dist,0.125,10"


class TestEmbeddingSet:
    def test_one_dimensional_rejected(self):
        with pytest.raises(DomainError):
            EmbeddingSet(np.ones(4))

    def test_nonfinite_rejected(self):
        with pytest.raises(DomainError):
            EmbeddingSet(np.array([[1.0, np.nan]]))

    def test_id_count_mismatch_rejected(self):
        with pytest.raises(DomainError):
            EmbeddingSet(np.ones((2, 2)), ids=("only-one",))
