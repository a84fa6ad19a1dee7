"""Dataset loaders (HDFS sessions, BGL sliding windows) and the sample file format."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .corpus import (ABNORMAL, DEFAULT_MASKS, NORMAL, DrainParser, EventVocabulary, GroupingStats, LogHeader,
                     ParsedRecord, Sample, parse_lines, read_lines, sessionize, sliding_windows, write_catalog,
                     write_parsed)
from .config import RunConfig

log = logging.getLogger(__name__)


class DataError(RuntimeError):
    pass


@dataclass
class LoadResult:
    samples: list[Sample]
    records: list[ParsedRecord] = field(default_factory=list)
    vocabulary: EventVocabulary | None = None
    quarantined: int = 0
    timestamp_regressions: int = 0
    stats: GroupingStats = field(default_factory=GroupingStats)


def read_hdfs_labels(path) -> dict[str, int]:
    """``BlockId,Label`` rows with Label in {Normal, Anomaly}."""
    labels = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"BlockId", "Label"} <= set(reader.fieldnames):
            raise DataError(f"{path}: expected a 'BlockId,Label' header")
        for row in reader:
            value = row["Label"].strip().lower()
            if value not in ("normal", "anomaly"):
                raise DataError(f"{path}: unexpected label {row['Label']!r} for {row['BlockId']}")
            labels[row["BlockId"].strip()] = ABNORMAL if value == "anomaly" else NORMAL
    return labels


def parse_file(path, dataset: str, cfg: RunConfig) -> tuple[list[ParsedRecord], DrainParser]:
    parser = DrainParser(cfg.parser.drain(DEFAULT_MASKS.get(dataset, [])), dataset)
    records = list(parse_lines(read_lines(path), parser))
    return records, parser


def load_dataset(cfg: RunConfig) -> LoadResult:
    data = cfg.data
    if data.dataset == "samples":
        path = cfg.resolve(data.samples)
        if path is None or not path.exists():
            raise DataError(f"sample file not found: {path}")
        result = LoadResult(read_samples(path))
    elif data.dataset in ("hdfs", "bgl", "generic"):
        path = cfg.resolve(data.input)
        if path is None or not path.exists():
            raise DataError(f"log file not found: {path}")
        records, parser = parse_file(path, data.dataset, cfg)
        result = LoadResult([], records, parser.vocabulary, parser.quarantined, parser.timestamp_regressions)
        if data.dataset == "hdfs":
            labels = read_hdfs_labels(cfg.resolve(data.labels)) if data.labels else None
            result.samples = sessionize(records, data.key_pattern, labels, str(path), result.stats)
        else:
            result.samples = sliding_windows(records, data.window_size, data.window_step, str(path))
    else:
        raise DataError(f"unknown dataset kind {data.dataset!r}")
    if not result.samples:
        raise DataError("input yielded zero samples")
    return result


# -- sample files ----------------------------------------------------------------

def write_samples(samples: Sequence[Sample], path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps({
                "events": s.events,
                "headers": [[h.timestamp, h.component, h.level] for h in s.headers],
                "label": s.label,
                "origin": list(s.origin),
            }) + "\n")


def read_samples(path) -> list[Sample]:
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                out.append(Sample(list(d["events"]), [LogHeader(float(t), c, lv) for t, c, lv in d["headers"]],
                                  d.get("label"), tuple(d.get("origin", ("", 0, n - 1)))))
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{n}: malformed sample ({exc})") from None
    return out


def write_parse_outputs(result: LoadResult, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_parsed(result.records, out_dir / "records.tsv")
    if result.vocabulary is not None:
        write_catalog(result.vocabulary, out_dir / "templates.tsv")
    write_samples(result.samples, out_dir / "samples.jsonl")
    return out_dir
