"""Command-line entry point wiring the library into reproducible runs.

Commands:
  codec     STFT -> head -> iSTFT roundtrip of a WAV file, with a quality report
  train-fm  train the conditional flow model on the Gaussian-ring dataset
  distill   distill a trained teacher checkpoint into a few-step student
  sample    integrate a checkpoint's velocity field from noise to samples
  eval      metric report comparing two directories of embeddings and/or audio

Configuration is a flat ``key = value`` text file; command-line flags override
file values; unknown keys are rejected.  The output directory resolves as
``--out``, then the config, then ``$FLOWFX_OUT``, then ``./flowfx_out``.  Every
command is deterministic given (config, seed): outputs are byte-identical
across runs.  Exit codes: 0 success, 1 usage or config error, 2 I/O error,
3 numeric failure (divergence, solver breakdown).
"""

import argparse
import csv
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import distill, dsp, flow, metrics, net, solvers, toy
from .errors import (
    ConfigError,
    DivergenceError,
    DomainError,
    FileFormatError,
    SolverError,
)

OUT_ENV_VAR = "FLOWFX_OUT"
DEFAULT_OUT = "flowfx_out"

RING_COND_DIM = 16
RING_EMBED_DIM = 32
RING_N_FREQS = 8
RING_FREQ_MAX = 100.0


class _UsageError(Exception):
    """Raised instead of argparse's sys.exit so main can map it to code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _parse_bool(text):
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_hidden(text):
    if isinstance(text, tuple):
        return text
    parts = [p.strip() for p in str(text).split(",") if p.strip()]
    if not parts:
        raise ValueError("expected comma-separated layer widths")
    return tuple(int(p) for p in parts)


# Per-command tunables: key -> (caster, default, help).  Path arguments are
# positional on the command line and never come from the config file.
SCHEMAS = {
    "codec": {
        "n_fft": (int, 960, "STFT frame size"),
        "hop": (int, 480, "STFT hop size"),
    },
    "train-fm": {
        "steps": (int, 4000, "optimizer steps"),
        "batch_size": (int, 256, "samples per step"),
        "lr": (float, 2e-3, "Adam learning rate"),
        "lr_warmup": (int, 100, "linear learning-rate warmup steps"),
        "hidden": (_parse_hidden, (64, 64), "hidden layer widths, comma-separated"),
    },
    "distill": {
        "steps": (int, 800, "distillation steps"),
        "batch_size": (int, 256, "samples per step"),
        "lr": (float, 1e-3, "Adam learning rate for student and discriminator"),
        "warmup_steps": (int, 500, "steps before the adversarial term activates"),
        "adv_weight": (float, 0.5, "adversarial loss weight"),
        "guidance": (_parse_bool, False, "distill the guided field"),
        "cfg_lo": (float, 1.0, "low end of the guidance scale range"),
        "cfg_hi": (float, 9.0, "high end of the guidance scale range"),
        "drop_prob": (float, 0.1, "condition dropout probability under guidance"),
    },
    "sample": {
        "solver": (str, "euler", "euler or dopri5"),
        "steps": (int, 4, "euler step count"),
        "n": (int, 256, "number of samples"),
        "rtol": (float, 1e-3, "dopri5 relative tolerance"),
        "atol": (float, 1e-3, "dopri5 absolute tolerance"),
        "cfg_scale": (float, 1.0, "guidance scale at sampling time"),
        "cfg_mode": (str, "standard", "guidance combination mode"),
        "max_nfe": (int, 10000, "model-evaluation budget"),
        "cond": (int, -1, "condition id, or -1 to cycle over classes"),
    },
    "eval": {
        "k": (int, 1, "retrieval depth for recall"),
        "workers": (int, 4, "worker threads for file loading"),
    },
}


@dataclass(frozen=True)
class RunConfig:
    """A command's fully-resolved parameters plus seed and output directory."""

    command: str
    seed: int
    out_dir: Path
    values: dict


def load_config_file(path):
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    entries = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            text = raw.split("#", 1)[0].strip()
            if not text:
                continue
            key, sep, value = text.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or not key:
                raise ConfigError(f"{path}:{lineno}: expected `key = value`")
            if key in entries:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            entries[key] = value
    return entries


def resolve_config(command: str, args) -> RunConfig:
    """Merge schema defaults, config-file entries, and flag overrides."""
    schema = SCHEMAS[command]
    file_values = load_config_file(args.config) if args.config else {}
    unknown = set(file_values) - set(schema) - {"seed", "out"}
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")

    values = {}
    for key, (cast, default, _) in schema.items():
        flag_value = getattr(args, key)
        if flag_value is not None:
            values[key] = flag_value
        elif key in file_values:
            try:
                values[key] = cast(file_values[key])
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {exc}") from exc
        else:
            values[key] = default

    if args.seed is not None:
        seed = args.seed
    elif "seed" in file_values:
        try:
            seed = int(file_values["seed"])
        except ValueError as exc:
            raise ConfigError(f"bad value for 'seed': {exc}") from exc
    else:
        seed = 0

    out = args.out or file_values.get("out") or os.environ.get(OUT_ENV_VAR) or DEFAULT_OUT
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    return RunConfig(command, seed, out_dir, values)


def ring_model_config(hidden) -> net.ModelConfig:
    """The fixed architecture trained on the ring dataset."""
    return net.ModelConfig(
        dim=2,
        hidden=tuple(hidden),
        n_cond=toy.N_MODES,
        cond_dim=RING_COND_DIM,
        embed_dim=RING_EMBED_DIM,
        n_freqs=RING_N_FREQS,
        freq_max=RING_FREQ_MAX,
    )


def cmd_codec(cfg: RunConfig, input_path) -> None:
    """Roundtrip a WAV through stft -> head parameterization -> istft and
    report mel, spectral, and SI-SDR fidelity against the input."""
    audio = dsp.read_wav(input_path)
    st = dsp.StftConfig(n_fft=cfg.values["n_fft"], hop=cfg.values["hop"])
    spec = dsp.stft(audio, st)
    head = dsp.complex_to_head(spec)
    recon_samples = dsp.istft(dsp.head_to_complex(head, st), length=len(audio.samples))
    recon = dsp.AudioBuffer(recon_samples, audio.sample_rate)
    dsp.write_wav(cfg.out_dir / "reconstructed.wav", recon)
    if np.any(audio.samples != 0.0):
        sdr = metrics.si_sdr(audio, recon)
    else:
        sdr = -metrics.SDR_CAP_DB  # silent reference: report the cap floor
    metrics.write_report_csv(
        cfg.out_dir / "codec_report.csv",
        [
            ("mel_dist", metrics.mel_dist(audio, recon), 1),
            ("stft_dist", metrics.stft_dist(audio, recon), 1),
            ("si_sdr", sdr, 1),
        ],
    )


def _write_log(path, header, rows) -> None:
    """CSV training log; None cells stay empty, floats go through repr."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(
                ["" if v is None else repr(v) if isinstance(v, float) else v for v in row]
            )


def cmd_train_fm(cfg: RunConfig) -> None:
    """Train the conditional velocity field on the Gaussian ring.

    Writes fm_teacher.json (exactly reloadable checkpoint) and fm_log.csv
    with (step, loss, lr) rows.  A non-finite loss aborts with the step.
    """
    v = cfg.values
    rng = np.random.default_rng(cfg.seed)
    model = net.init_model(ring_model_config(v["hidden"]), rng)
    opt = net.init_optimizer(model, lr=v["lr"], warmup=v["lr_warmup"])
    rows = []
    for step in range(1, v["steps"] + 1):
        x0, labels = toy.sample_ring(rng, v["batch_size"])
        batch = flow.sample_path(x0, rng)
        loss, tape = flow.fm_loss(model, batch, labels)
        if not math.isfinite(loss):
            raise DivergenceError(step)
        net.adam_step(opt, model, tape)
        rows.append((step, loss, distill.effective_lr(opt)))
    meta = {"dataset": "ring", "seed": cfg.seed, "steps": v["steps"]}
    net.save_checkpoint(cfg.out_dir / "fm_teacher.json", model, meta=meta)
    _write_log(cfg.out_dir / "fm_log.csv", ["step", "loss", "lr"], rows)


def cmd_distill(cfg: RunConfig, teacher_path) -> None:
    """Distill a ring-trained teacher into a few-step student.

    Writes student.json and distill_log.csv with (step, mf_loss, adv_loss,
    disc_loss, lr) rows; the adversarial and discriminator cells stay empty
    until the warmup ends.
    """
    v = cfg.values
    teacher, _, _ = net.load_checkpoint(teacher_path)
    if teacher.config.dim != 2 or teacher.config.n_cond < toy.N_MODES:
        raise ConfigError(
            f"teacher must model 2-D data with >= {toy.N_MODES} classes, got "
            f"dim={teacher.config.dim} n_cond={teacher.config.n_cond}"
        )
    scale_range = (v["cfg_lo"], v["cfg_hi"])
    dconf = distill.DistillConfig(
        warmup_steps=v["warmup_steps"],
        adv_weight=v["adv_weight"],
        lr=v["lr"],
        cfg_scale_range=scale_range,
        cfg_drop_prob=v["drop_prob"],
    )
    guide = None
    if v["guidance"]:
        guide = flow.CfgSpec(scale_range=scale_range, drop_prob=v["drop_prob"])
    student = teacher.clone()
    rows, _ = distill.distill_loop(
        student,
        teacher,
        toy.sample_ring,
        n_steps=v["steps"],
        batch_size=v["batch_size"],
        config=dconf,
        rng_gen=np.random.default_rng([cfg.seed, 0]),
        rng_disc=np.random.default_rng([cfg.seed, 1]),
        cfg=guide,
    )
    meta = {"dataset": "ring", "seed": cfg.seed, "teacher": str(teacher_path)}
    net.save_checkpoint(cfg.out_dir / "student.json", student, meta=meta)
    _write_log(
        cfg.out_dir / "distill_log.csv",
        ["step", "mf_loss", "adv_loss", "disc_loss", "lr"],
        rows,
    )


def cmd_sample(cfg: RunConfig, ckpt_path) -> None:
    """Integrate a checkpoint's field from noise; write samples and NFE.

    The batch integrates jointly, so every sample shares the trace NFE;
    nfe.csv carries it per sample and sample_report.csv the aggregates.
    """
    v = cfg.values
    model, _, _ = net.load_checkpoint(ckpt_path)
    n = v["n"]
    if n < 1:
        raise ConfigError("n must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    x1 = rng.standard_normal((n, model.config.dim))
    if model.config.n_cond == 0:
        cond = None
    elif v["cond"] < 0:
        cond = np.arange(n) % model.config.n_cond
    else:
        cond = np.full(n, v["cond"])
    solver_cfg = solvers.SolverConfig(
        kind=v["solver"],
        steps=v["steps"],
        rtol=v["rtol"],
        atol=v["atol"],
        cfg_scale=v["cfg_scale"],
        cfg_mode=v["cfg_mode"],
        max_nfe=v["max_nfe"],
    )
    if v["solver"] == "euler":
        trace = solvers.euler_sample(model, x1, cond, solver_cfg)
    else:
        trace = solvers.dopri5_sample(model, x1, cond, solver_cfg)
    metrics.write_embedding_csv(cfg.out_dir / "samples.csv", metrics.EmbeddingSet(trace.final))
    with open(cfg.out_dir / "nfe.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "nfe"])
        for i in range(n):
            writer.writerow([i, trace.nfe])
    metrics.write_report_csv(
        cfg.out_dir / "sample_report.csv",
        [
            ("mean_nfe", trace.nfe, n),
            ("accepted_steps", trace.accepted, n),
            ("rejected_steps", trace.rejected, n),
        ],
    )


def _is_embedding_csv(path) -> bool:
    """True when the header marks an ``id,dim0..dimN`` embedding file.

    Other CSV artifacts (reports, NFE tables) share the extension and are
    skipped rather than treated as malformed."""
    try:
        with open(path, "rb") as fh:
            header = fh.readline().decode("utf-8", errors="replace").strip()
    except OSError:
        return False
    return header.split(",")[:2] == ["id", "dim0"]


def _merge_embeddings(paths, sets):
    if not sets:
        return None
    dim = sets[0].rows.shape[1]
    for path, emb in zip(paths, sets):
        if emb.rows.shape[1] != dim:
            raise FileFormatError(
                path, f"embedding dimension {emb.rows.shape[1]} differs from {dim}"
            )
    return metrics.EmbeddingSet(np.concatenate([s.rows for s in sets], axis=0))


def cmd_eval(cfg: RunConfig, real_dir, fake_dir) -> None:
    """Compare two directories and write one report row per metric.

    ``*.csv`` files are embedding sets (concatenated per side, in sorted
    path order); ``*.wav`` files pair up by matching filename.  Files load
    on a bounded worker pool; results merge deterministically.
    """
    real_dir, fake_dir = Path(real_dir), Path(fake_dir)
    for d in (real_dir, fake_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"not a directory: {d}")
    v = cfg.values
    entries = []
    with ThreadPoolExecutor(max_workers=max(1, v["workers"])) as pool:
        real_csvs = [p for p in sorted(real_dir.glob("*.csv")) if _is_embedding_csv(p)]
        fake_csvs = [p for p in sorted(fake_dir.glob("*.csv")) if _is_embedding_csv(p)]
        real_emb = _merge_embeddings(real_csvs, list(pool.map(metrics.read_embedding_csv, real_csvs)))
        fake_emb = _merge_embeddings(fake_csvs, list(pool.map(metrics.read_embedding_csv, fake_csvs)))
        if real_emb is not None and fake_emb is not None:
            n_fake = len(fake_emb.rows)
            entries.append(("frechet", metrics.frechet_distance(real_emb, fake_emb), n_fake))
            if len(real_emb.rows) == n_fake:
                entries.append(("kl", metrics.kl_divergence(real_emb.rows, fake_emb.rows), n_fake))
                entries.append(("clap_score", metrics.clap_score(real_emb, fake_emb), n_fake))
                sim = metrics.cosine_similarity_matrix(real_emb, fake_emb)
                fwd, bwd = metrics.recall_at_k(sim, v["k"])
                entries.append((f"recall_at_{v['k']}_real_to_fake", fwd, n_fake))
                entries.append((f"recall_at_{v['k']}_fake_to_real", bwd, n_fake))

        names = sorted(
            {p.name for p in real_dir.glob("*.wav")} & {p.name for p in fake_dir.glob("*.wav")}
        )

        def audio_pair(name):
            a = dsp.read_wav(real_dir / name)
            b = dsp.read_wav(fake_dir / name)
            return metrics.si_sdr(a, b), metrics.mel_dist(a, b), metrics.stft_dist(a, b)

        pair_stats = list(pool.map(audio_pair, names))
    if pair_stats:
        stacked = np.array(pair_stats, dtype=np.float64)
        entries.append(("si_sdr", float(stacked[:, 0].mean()), len(names)))
        entries.append(("mel_dist", float(stacked[:, 1].mean()), len(names)))
        entries.append(("stft_dist", float(stacked[:, 2].mean()), len(names)))
    if not entries:
        raise ConfigError("nothing to evaluate: no embedding CSVs and no paired WAVs")
    metrics.write_report_csv(cfg.out_dir / "eval_report.csv", entries)


def _add_common(parser) -> None:
    parser.add_argument("--config", default=None, help="flat key = value config file")
    parser.add_argument("--seed", type=int, default=None, help="global seed (default 0)")
    parser.add_argument(
        "--out", default=None, help=f"output directory (default ${OUT_ENV_VAR} or {DEFAULT_OUT})"
    )


def _add_schema_flags(parser, command: str) -> None:
    for key, (cast, default, text) in SCHEMAS[command].items():
        parser.add_argument(
            f"--{key.replace('_', '-')}",
            dest=key,
            type=cast,
            default=None,
            help=f"{text} (default {default})",
        )


def build_parser() -> _Parser:
    parser = _Parser(prog="flowfx", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("codec", help="WAV roundtrip through the spectral codec")
    p.add_argument("input", help="input WAV file")
    _add_common(p)
    _add_schema_flags(p, "codec")

    p = sub.add_parser("train-fm", help="train the flow model on the ring dataset")
    _add_common(p)
    _add_schema_flags(p, "train-fm")

    p = sub.add_parser("distill", help="distill a teacher checkpoint into a student")
    p.add_argument("teacher", help="teacher checkpoint (fm_teacher.json)")
    _add_common(p)
    _add_schema_flags(p, "distill")

    p = sub.add_parser("sample", help="sample from a checkpoint")
    p.add_argument("ckpt", help="model checkpoint")
    _add_common(p)
    _add_schema_flags(p, "sample")

    p = sub.add_parser("eval", help="metric report comparing two directories")
    p.add_argument("--real", required=True, help="reference directory")
    p.add_argument("--fake", required=True, help="candidate directory")
    _add_common(p)
    _add_schema_flags(p, "eval")
    return parser


def _dispatch(args) -> None:
    cfg = resolve_config(args.command, args)
    if args.command == "codec":
        cmd_codec(cfg, args.input)
    elif args.command == "train-fm":
        cmd_train_fm(cfg)
    elif args.command == "distill":
        cmd_distill(cfg, args.teacher)
    elif args.command == "sample":
        cmd_sample(cfg, args.ckpt)
    else:
        cmd_eval(cfg, args.real, args.fake)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help prints and exits 0
        return 0 if (exc.code or 0) == 0 else 1
    try:
        _dispatch(args)
    except (_UsageError, ConfigError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SolverError, DivergenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
