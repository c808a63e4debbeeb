import numpy as np
import pytest

from flowfx.dsp import (
    AudioBuffer,
    ComplexSpectrogram,
    HeadOutput,
    StftConfig,
    complex_to_head,
    compression_ratios,
    hann_window,
    head_to_complex,
    hz_to_mel,
    istft,
    log_mel,
    mel_filterbank,
    read_wav,
    softplus,
    stft,
    synth_signal,
    write_wav,
)
from flowfx.errors import DomainError, FileFormatError

SR = 48000
CFG = StftConfig()


def test_stft_shape_and_zero_input():
    buf = AudioBuffer(np.zeros(4800), SR)
    spec = stft(buf, CFG)
    assert spec.data.shape == (10, 481)
    assert np.all(spec.data == 0)


def test_stft_frame_count_rounds_up():
    for n, frames in [(480, 1), (481, 2), (4799, 10), (4800, 10), (4801, 11)]:
        spec = stft(AudioBuffer(np.ones(n), SR), CFG)
        assert spec.frames == frames, n


def test_stft_bin_center_sine_mainlobe():
    # 300 Hz sits exactly on bin 6 (spacing 50 Hz).  A Hann-windowed
    # bin-center sine puts sum(w)/2 = 240 in its bin and 120 in each
    # neighbor, with nothing else beyond roundoff.
    t = np.arange(4800) / SR
    spec = stft(AudioBuffer(np.sin(2 * np.pi * 300 * t), SR), CFG)
    mags = np.abs(spec.data)
    for k in range(2, 8):  # interior frames, away from the reflect padding
        assert mags[k, 6] == pytest.approx(240.0, rel=1e-9)
        assert mags[k, 5] == pytest.approx(120.0, rel=1e-9)
        assert mags[k, 7] == pytest.approx(120.0, rel=1e-9)
        others = np.delete(mags[k], [5, 6, 7])
        assert np.max(others) < 1e-9


def test_stft_impulse_first_frame_flat():
    # With reflect padding of n_fft/2 the first frame is centered on sample
    # 0, so an impulse there is scaled by the window peak w[480] = 1 and
    # shows magnitude 1 in every bin of frame 0 only.
    x = np.zeros(4800)
    x[0] = 1.0
    mags = np.abs(stft(AudioBuffer(x, SR), CFG).data)
    assert np.allclose(mags[0], 1.0, atol=1e-12)
    assert np.max(mags[1:]) == 0.0


def test_stft_parseval_per_frame():
    rng = np.random.default_rng(7)
    x = rng.standard_normal(4800)
    w = hann_window(CFG.n_fft)
    pad = CFG.n_fft // 2
    padded = np.pad(x, pad, mode="reflect")
    spec = stft(AudioBuffer(x, SR), CFG).data
    for k in range(10):
        seg = padded[k * CFG.hop : k * CFG.hop + CFG.n_fft] * w
        lhs = np.sum(seg**2)
        rhs = (
            np.abs(spec[k, 0]) ** 2
            + 2 * np.sum(np.abs(spec[k, 1:-1]) ** 2)
            + np.abs(spec[k, -1]) ** 2
        ) / CFG.n_fft
        assert abs(lhs - rhs) <= 1e-9 * max(lhs, 1.0)


def test_roundtrip_white_noise_exact():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(48000)
    y = istft(stft(AudioBuffer(x, SR), CFG), length=len(x))
    assert np.max(np.abs(y - x)) <= 1e-10


def test_roundtrip_random_lengths():
    rng = np.random.default_rng(42)
    for _ in range(20):
        n = int(rng.integers(700, 20000))
        x = rng.standard_normal(n)
        y = istft(stft(AudioBuffer(x, SR), CFG), length=n)
        rel = np.linalg.norm(y - x) / np.linalg.norm(x)
        assert rel <= 1e-10, n


def test_roundtrip_synth_signal():
    buf = synth_signal(3, 1.0, SR)
    y = istft(stft(buf, CFG), length=len(buf.samples))
    rel = np.linalg.norm(y - buf.samples) / np.linalg.norm(buf.samples)
    assert rel <= 1e-10


def test_roundtrip_alternate_geometry():
    rng = np.random.default_rng(5)
    cfg = StftConfig(n_fft=512, hop=128)
    x = rng.standard_normal(10000)
    y = istft(stft(AudioBuffer(x, SR), cfg), length=len(x))
    assert np.max(np.abs(y - x)) <= 1e-10


def test_stft_config_rejects_bad_overlap():
    with pytest.raises(DomainError):
        StftConfig(n_fft=960, hop=961)
    with pytest.raises(DomainError):
        StftConfig(n_fft=960, hop=481)  # gaps in coverage break the inverse
    with pytest.raises(DomainError):
        StftConfig(n_fft=0, hop=1)


def test_istft_length_bounds():
    spec = stft(AudioBuffer(np.ones(4800), SR), CFG)
    with pytest.raises(DomainError):
        istft(spec, length=4801)
    with pytest.raises(DomainError):
        istft(spec, length=0)


def test_head_hand_case():
    # softplus(0) = ln 2; direction (3,4)/5 = (0.6, 0.8)
    h = HeadOutput(m=np.array([0.0]), x_raw=np.array([3.0]), y_raw=np.array([4.0]))
    c = head_to_complex(h)
    assert c[0].real == pytest.approx(0.4158883083359672, abs=1e-15)
    assert c[0].imag == pytest.approx(0.5545177444479562, abs=1e-15)


def test_head_magnitude_is_softplus():
    rng = np.random.default_rng(11)
    for _ in range(20):
        m = rng.uniform(-6, 6, size=(4, 9))
        x = rng.standard_normal((4, 9))
        y = rng.standard_normal((4, 9))
        c = head_to_complex(HeadOutput(m, x, y))
        assert np.max(np.abs(np.abs(c) - softplus(m))) <= 1e-12


def test_head_saturation_extremes():
    c = head_to_complex(
        HeadOutput(np.array([-50.0, 10.0]), np.ones(2), np.zeros(2))
    )
    assert abs(c[0]) <= 2e-22  # softplus(-50) ~ e^-50, positive
    assert abs(c[0]) > 0
    assert abs(c[1]) == pytest.approx(10.000045398899218, rel=1e-12)


def test_head_degenerate_direction_is_phase_zero():
    c = head_to_complex(
        HeadOutput(np.array([1.0]), np.array([0.0]), np.array([0.0]))
    )
    assert c[0].imag == 0.0
    assert c[0].real == pytest.approx(softplus(np.array([1.0]))[0], abs=1e-15)


def test_head_direction_scale_invariant():
    rng = np.random.default_rng(2)
    m = rng.standard_normal(16)
    x = rng.standard_normal(16)
    y = rng.standard_normal(16)
    a = head_to_complex(HeadOutput(m, x, y))
    b = head_to_complex(HeadOutput(m, 1e3 * x, 1e3 * y))
    assert np.max(np.abs(a - b)) <= 1e-12


def test_complex_head_roundtrip():
    buf = synth_signal(9, 0.25, SR)
    spec = stft(buf, CFG)
    back = head_to_complex(complex_to_head(spec), CFG)
    assert np.max(np.abs(back.data - spec.data)) <= 1e-8 * np.max(np.abs(spec.data))


def test_mel_filterbank_frozen_values():
    # n_mels=10 @ 48 kHz / n_fft=960: first edge at mel(24000)/11 -> 267.807 Hz,
    # so bin 1 (50 Hz) carries weight 50/267.807... = 0.18670...
    fb = mel_filterbank(10, CFG, SR)
    assert fb.weights.shape == (10, 481)
    assert fb.weights[0, 0] == 0.0
    assert fb.weights[0, 1] == pytest.approx(0.1867014753068494, abs=1e-12)
    assert fb.weights[0, 2] == pytest.approx(0.3734029506136988, abs=1e-12)


def test_mel_filterbank_properties():
    fb = mel_filterbank(128, CFG, SR)
    assert np.all(fb.weights >= 0)
    assert np.all(fb.weights.max(axis=1) <= 1.0 + 1e-12)
    assert np.all(np.any(fb.weights > 0, axis=1))  # no dead bands
    centers = fb.weights.argmax(axis=1)
    assert np.all(np.diff(centers) >= 0)  # centers ordered by frequency


def test_mel_filterbank_narrow_filter_fallback():
    # 400 bands over 481 bins leaves the low filters narrower than one bin;
    # those rows must still get a single unit weight at the nearest bin.
    fb = mel_filterbank(400, CFG, SR)
    assert np.all(np.any(fb.weights > 0, axis=1))
    row_sums = fb.weights.sum(axis=1)
    assert np.all(row_sums > 0)


def test_mel_filterbank_too_many_bands():
    with pytest.raises(DomainError):
        mel_filterbank(482, CFG, SR)  # only 481 bins available
    mel_filterbank(481, CFG, SR)  # boundary case allowed


def test_hz_mel_scale_anchor():
    assert hz_to_mel(700.0) == pytest.approx(2595.0 * np.log10(2.0), rel=1e-12)
    assert hz_to_mel(0.0) == 0.0


def test_log_mel_floor_on_silence():
    fb = mel_filterbank(128, CFG, SR)
    lm = log_mel(AudioBuffer(np.zeros(4800), SR), fb, CFG)
    assert lm.shape == (10, 128)
    assert np.allclose(lm, np.log(1e-5))
    assert lm.min() == pytest.approx(-11.512925464970229, abs=1e-12)


def test_log_mel_gain_monotone():
    # doubling the signal cannot decrease any log-mel entry
    buf = synth_signal(1, 0.3, SR)
    fb = mel_filterbank(64, CFG, SR)
    a = log_mel(buf, fb, CFG)
    b = log_mel(AudioBuffer(2.0 * buf.samples, SR), fb, CFG)
    assert np.all(b >= a - 1e-12)


def test_log_mel_rejects_rate_mismatch():
    fb = mel_filterbank(32, CFG, 44100)
    with pytest.raises(DomainError):
        log_mel(AudioBuffer(np.zeros(4800), SR), fb, CFG)


def test_synth_signal_deterministic():
    a = synth_signal(123, 0.5, SR)
    b = synth_signal(123, 0.5, SR)
    assert np.array_equal(a.samples, b.samples)
    c = synth_signal(124, 0.5, SR)
    assert not np.array_equal(a.samples, c.samples)


def test_synth_signal_peak_and_length():
    for seed in range(8):
        buf = synth_signal(seed, 0.5, SR)
        assert len(buf.samples) == 24000
        assert np.max(np.abs(buf.samples)) == pytest.approx(0.9, abs=1e-12)


def test_synth_signal_is_broadband():
    # seed 0 must light up at least three mel bands well above the floor
    buf = synth_signal(0, 1.0, SR)
    fb = mel_filterbank(128, CFG, SR)
    lm = log_mel(buf, fb, CFG)
    active = np.sum(lm.max(axis=0) > np.log(1e-5) + 1.0)
    assert active >= 3


def test_synth_signal_rejects_bad_duration():
    with pytest.raises(DomainError):
        synth_signal(0, 0.0, SR)


def test_compression_ratios_both_conventions():
    r = compression_ratios(48000, 480, 128)
    assert r["audio_samples_per_latent_value"] == pytest.approx(3.75)
    assert r["latent_values_per_audio_sample"] == pytest.approx(128 / 480)


def test_wav_roundtrip_float32(tmp_path):
    buf = synth_signal(4, 0.2, SR)
    p = tmp_path / "a.wav"
    write_wav(p, buf, fmt="float32")
    back = read_wav(p)
    assert back.sample_rate == SR
    assert np.max(np.abs(back.samples - buf.samples)) <= 1e-7  # float32 quantization


def test_wav_roundtrip_pcm16(tmp_path):
    buf = synth_signal(4, 0.2, SR)
    p = tmp_path / "a16.wav"
    write_wav(p, buf, fmt="pcm16")
    back = read_wav(p)
    assert np.max(np.abs(back.samples - buf.samples)) <= 1.0 / 32768.0


def test_wav_stereo_downmix_warns(tmp_path):
    from scipy.io import wavfile

    p = tmp_path / "st.wav"
    left = np.linspace(-0.5, 0.5, 1000).astype(np.float32)
    right = np.zeros(1000, dtype=np.float32)
    wavfile.write(p, SR, np.stack([left, right], axis=1))
    with pytest.warns(UserWarning):
        buf = read_wav(p)
    assert np.allclose(buf.samples, left / 2, atol=1e-7)


def test_wav_rejects_garbage(tmp_path):
    p = tmp_path / "bad.wav"
    p.write_bytes(b"not a riff file at all..........")
    with pytest.raises(FileFormatError):
        read_wav(p)


def test_wav_missing_file_raises_oserror(tmp_path):
    with pytest.raises(OSError):
        read_wav(tmp_path / "nope.wav")


def test_audio_buffer_validation():
    with pytest.raises(DomainError):
        AudioBuffer(np.array([np.nan, 0.0]), SR)
    with pytest.raises(DomainError):
        AudioBuffer(np.zeros((2, 3)), SR)
    with pytest.raises(DomainError):
        AudioBuffer(np.zeros(4), 0)


def test_spectrogram_shape_validation():
    with pytest.raises(DomainError):
        ComplexSpectrogram(np.zeros((3, 480), dtype=complex), CFG)
