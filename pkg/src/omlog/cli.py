"""Command line entry point: parse | synth | train | stream | sweep | analyze."""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import shift_census, similarity_report, write_frequency_matrix
from .config import RunConfig, desk_config, load_config
from .corpus import ConfigError, GroupingStats, split_train_test
from .features import load_embeddings
from .loaders import DataError, load_dataset, write_parse_outputs, write_samples
from .neural import NonFiniteError
from .pipeline import Detector, Mode, batches_of, fit_detector, run_stream, sweep
from .synth import PRESETS, synthesize

log = logging.getLogger("omlog")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
OUT_ENV = "OMLOG_OUT"


class UsageError(Exception):
    pass


def _out_dir(args) -> Path:
    out = Path(os.environ.get(OUT_ENV) or args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, command: str, cfg: RunConfig, extra: dict | None = None) -> None:
    doc = {
        "command": command,
        "argv": sys.argv[1:],
        "config": cfg.to_dict(),
        "seed": cfg.stream.seed,
        "versions": {"omlog": __version__, "python": platform.python_version(), "numpy": np.__version__},
    }
    doc.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, default=str))


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else desk_config()
    if getattr(args, "samples", None):
        cfg.data.dataset = "samples"
        cfg.data.samples = str(Path(args.samples).resolve())
    if getattr(args, "train_ratio", None) is not None:
        cfg.data.train_ratio = args.train_ratio
    if getattr(args, "batch_size", None) is not None:
        cfg.stream.batch_size = args.batch_size
    if getattr(args, "mode", None):
        cfg.stream.mode = Mode(args.mode)
    if getattr(args, "seed", None) is not None:
        cfg.stream.seed = args.seed
    return cfg


def _split(cfg: RunConfig):
    result = load_dataset(cfg)
    stats = GroupingStats()
    train, test = split_train_test(result.samples, cfg.data.train_ratio, stats)
    if stats.discarded_abnormal:
        log.info("discarded %d abnormal training samples", stats.discarded_abnormal)
    return train, test


def _checkpoint(args, cfg: RunConfig) -> Path:
    path = Path(args.checkpoint) if getattr(args, "checkpoint", None) else cfg.resolve(cfg.data.checkpoint)
    if path is None or not (path / "detector.json").exists():
        raise DataError(f"missing checkpoint{'' if path is None else ' at ' + str(path)}: run `omlog train` first "
                        "or pass --checkpoint")
    return path


# -- subcommands ---------------------------------------------------------------

def cmd_parse(args) -> int:
    cfg = _config(args)
    cfg.data.dataset = args.dataset
    cfg.data.input = str(Path(args.input).resolve())
    if args.labels:
        cfg.data.labels = str(Path(args.labels).resolve())
    result = load_dataset(cfg)
    out = _out_dir(args)
    write_parse_outputs(result, out)
    write_manifest(out, "parse", cfg, {"records": len(result.records), "samples": len(result.samples),
                                       "templates": len(result.vocabulary or []), "quarantined": result.quarantined,
                                       "timestamp_regressions": result.timestamp_regressions,
                                       "dropped_records": result.stats.dropped_records})
    print(f"parsed {len(result.records)} records into {len(result.vocabulary or [])} templates, "
          f"{len(result.samples)} samples ({result.quarantined} quarantined)")
    return EXIT_OK


def cmd_synth(args) -> int:
    out = _out_dir(args)
    spec = PRESETS[args.preset](seed=args.seed)
    stream = synthesize(spec)
    write_samples(stream.samples, out / "samples.jsonl")
    (out / "shifts.json").write_text(json.dumps({"shift_points": stream.shift_points,
                                                 "shift_batches": stream.shift_batches,
                                                 "repeat_batches": stream.repeat_batches}, indent=2))
    cfg = desk_config(samples="samples.jsonl", checkpoint="checkpoint",
                      train_ratio={"stable": 1 / 6, "drifted": 0.4}.get(args.preset, 0.5))
    cfg.stream.seed = args.seed
    cfg.output_dir = "run"
    (out / "config.ini").write_text(cfg.to_ini())
    write_manifest(out, "synth", cfg, {"preset": args.preset, "samples": len(stream.samples)})
    print(f"wrote {len(stream.samples)} samples to {out / 'samples.jsonl'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    train, _ = _split(cfg)
    detector = fit_detector(train, cfg.stream)
    if cfg.data.embeddings:
        detector.model.import_embeddings(load_embeddings(cfg.resolve(cfg.data.embeddings)))
    out = _out_dir(args)
    ckpt = detector.save(out / "checkpoint")
    write_manifest(out, "train", cfg, {"train_samples": len(train), "vocab_size": detector.model.vocab_size,
                                       "epsilon": detector.mmd.epsilon, "sigma": detector.mmd.sigma})
    print(f"trained on {len(train)} samples in {detector.train_seconds:.1f}s; checkpoint at {ckpt}")
    return EXIT_OK


def cmd_stream(args) -> int:
    cfg = _config(args)
    ckpt = _checkpoint(args, cfg)
    train, test = _split(cfg)
    detector = Detector.load(ckpt)
    report = run_stream(train, test, cfg.stream, detector)
    out = _out_dir(args)
    report.write(out)
    write_manifest(out, "stream", cfg, {"checkpoint": str(ckpt)})
    m = report.metrics
    print(f"{report.mode}: P={m.precision:.3f} R={m.recall:.3f} F1={m.f1:.3f} "
          f"online batches {report.online_batches}/{len(report.batches)}, {report.update_steps} update steps")
    return EXIT_OK


def _grid(text: str, cast):
    try:
        return [cast(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad grid {text!r}") from None


def cmd_sweep(args) -> int:
    cfg = _config(args)
    ckpt = _checkpoint(args, cfg)
    train, test = _split(cfg)
    detector = Detector.load(ckpt)
    eps_grid = _grid(args.epsilon_grid, float)
    tasks_grid = _grid(args.tasks_grid, int)
    rows, reports = sweep(train, test, cfg.stream, eps_grid, tasks_grid, detector)
    out = _out_dir(args)
    with open(out / "sweep.csv", "w") as fh:
        keys = list(rows[0])
        fh.write(",".join(keys) + "\n")
        for r in rows:
            fh.write(",".join(str(r[k]) for k in keys) + "\n")
    for r, rep in zip(rows, reports):
        rep.write(out / f"eps{r['epsilon_multiplier']:g}_T{r['tasks']}")
    write_manifest(out, "sweep", cfg, {"epsilon_grid": eps_grid, "tasks_grid": tasks_grid})
    for r in rows:
        print(f"eps x{r['epsilon_multiplier']:g} T={r['tasks']}: F1={r['f1']:.3f} "
              f"online={r['online_batches']} steps={r['update_steps']} test={r['test_seconds']:.1f}s")
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _config(args)
    samples = load_dataset(cfg).samples
    batches = batches_of(samples, cfg.stream.batch_size)
    out = _out_dir(args)
    census = shift_census(batches, args.threshold, seed=cfg.stream.seed)
    census.write_csv(out / "census.csv")
    sim = similarity_report(batches, history=args.history, cap=args.cap, seed=cfg.stream.seed)
    sim.write_csv(out / "similarity.csv")
    write_frequency_matrix(samples, out / "frequency.csv")
    write_manifest(out, "analyze", cfg, {"threshold": args.threshold, "stable_pairs": census.below,
                                         "pairs": census.pairs, "identical_pairs": census.identical})
    print(f"{census.below}/{census.pairs} batch pairs below MMD {args.threshold:g} "
          f"({100 * census.stable_fraction:.1f}%), {census.identical} identical")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="omlog", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="INI config or a run manifest.json")
        sp.add_argument("--samples", help="sample file (JSONL) overriding the config")
        sp.add_argument("--seed", type=int)
        if out:
            sp.add_argument("--out", required=True)

    sp = sub.add_parser("parse", help="parse raw logs into records, templates and samples")
    sp.add_argument("--dataset", choices=["hdfs", "bgl", "generic"], required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--labels", help="HDFS anomaly_label.csv")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_parse)

    sp = sub.add_parser("synth", help="generate a synthetic regime-shift stream")
    sp.add_argument("--preset", choices=sorted(PRESETS), default="drifted")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train the initial detector")
    common(sp)
    sp.add_argument("--train-ratio", type=float)
    sp.set_defaults(func=cmd_train)

    for name, func in (("stream", cmd_stream), ("sweep", cmd_sweep)):
        sp = sub.add_parser(name)
        common(sp)
        sp.add_argument("--checkpoint")
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--train-ratio", type=float)
        sp.add_argument("--mode", choices=[m.value for m in Mode])
        if name == "sweep":
            sp.add_argument("--epsilon-grid", default="0.5,1,2")
            sp.add_argument("--tasks-grid", default="2,10")
        sp.set_defaults(func=func)

    sp = sub.add_parser("analyze", help="batch shift census, DTW similarity and frequency matrix")
    common(sp)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--threshold", type=float, default=0.001)
    sp.add_argument("--history", type=int, default=10)
    sp.add_argument("--cap", type=int, default=20)
    sp.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"omlog: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"omlog: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"omlog: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
