"""Log ingestion: header parsing, Drain template mining and sample grouping."""

from __future__ import annotations

import logging
import re
import sys
from collections import OrderedDict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Callable, Iterable, Iterator, Optional, Sequence

log = logging.getLogger(__name__)

PLACEHOLDER = "<*>"
NORMAL, ABNORMAL = 0, 1


class ConfigError(ValueError):
    pass


class HeaderParseError(ValueError):
    pass


@dataclass(frozen=True)
class RawLogRecord:
    line_no: int
    text: str


@dataclass(frozen=True)
class LogHeader:
    timestamp: float
    component: str
    level: str


@dataclass
class LogEvent:
    event_id: int
    template: list[str]

    @property
    def text(self) -> str:
        return " ".join(self.template)

    @property
    def placeholder_count(self) -> int:
        return sum(tok.count(PLACEHOLDER) for tok in self.template)


@dataclass
class ParsedRecord:
    line_no: int
    header: LogHeader
    event_id: int
    params: list[str]
    content: str = ""
    label: Optional[int] = None


@dataclass
class Sample:
    events: list[int]
    headers: list[LogHeader]
    label: Optional[int] = None
    origin: tuple = ("", 0, 0)

    def __post_init__(self):
        if not self.events:
            raise ValueError("a sample needs at least one event")
        if len(self.headers) != len(self.events):
            raise ValueError("headers must align 1:1 with events")

    @property
    def index(self) -> int:
        """Position of the sample in its source stream."""
        return self.origin[2]

    def __len__(self):
        return len(self.events)


class EventVocabulary:
    """Append-only list of templates; event ids are dense and never reused."""

    def __init__(self):
        self.templates: list[LogEvent] = []

    @property
    def count(self) -> int:
        return len(self.templates)

    def __len__(self):
        return len(self.templates)

    def __getitem__(self, event_id: int) -> LogEvent:
        return self.templates[event_id]

    def add(self, template: list[str]) -> LogEvent:
        event = LogEvent(len(self.templates), list(template))
        self.templates.append(event)
        return event


# -- header formats ------------------------------------------------------------

@dataclass
class LineFormat:
    """Splits a raw line into header, message body and an optional label."""

    name: str
    split: Callable[[str], tuple[LogHeader, str, Optional[int]]]


def _hdfs_split(text: str):
    # 081109 203615 148 INFO dfs.DataNode$PacketResponder: PacketResponder 1 ...
    parts = text.split(None, 5)
    if len(parts) < 6:
        raise HeaderParseError("expected 'date time pid level component: content'")
    date, time, _pid, level, component, content = parts
    try:
        ts = datetime.strptime(date + time, "%y%m%d%H%M%S").replace(tzinfo=timezone.utc).timestamp()
    except ValueError as exc:
        raise HeaderParseError(str(exc)) from None
    return LogHeader(ts, sys.intern(component.rstrip(":")), sys.intern(level)), content, None


def _bgl_split(text: str):
    # - 1117838570 2005.06.03 R02-M1-N0-C:J12-U11 2005-06-03-15.42.50.675872 R02-M1-N0-C:J12-U11 RAS KERNEL INFO msg
    parts = text.split(None, 9)
    if len(parts) < 9:
        raise HeaderParseError("expected 9 BGL header fields")
    try:
        ts = float(parts[1])
    except ValueError:
        raise HeaderParseError(f"bad epoch field {parts[1]!r}") from None
    label = NORMAL if parts[0] == "-" else ABNORMAL
    content = parts[9] if len(parts) > 9 else ""
    return LogHeader(ts, sys.intern(parts[7]), sys.intern(parts[8])), content, label


def _generic_split(text: str):
    return LogHeader(0.0, "-", "-"), text, None


FORMATS = {
    "hdfs": LineFormat("hdfs", _hdfs_split),
    "bgl": LineFormat("bgl", _bgl_split),
    "generic": LineFormat("generic", _generic_split),
}

# Parameter masks applied before tokenization, per dataset.
DEFAULT_MASKS = {
    "hdfs": [r"blk_-?\d+", r"(\d+\.){3}\d+(:\d+)?"],
    "bgl": [r"0x[0-9a-fA-F]+"],
    "generic": [],
}

_NUMBER = re.compile(r"(?<![A-Za-z0-9])-?\d+(?:\.\d+)*(?![A-Za-z0-9])|0x[0-9a-fA-F]+")


# -- Drain ---------------------------------------------------------------------

@dataclass
class DrainConfig:
    depth: int = 4
    similarity_threshold: float = 0.5
    max_children: int = 100
    masks: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.depth < 3:
            raise ConfigError("drain depth must be >= 3")
        if not 0.0 <= self.similarity_threshold <= 1.0:
            raise ConfigError("similarity threshold must be within [0, 1]")
        if self.max_children < 1:
            raise ConfigError("max_children must be >= 1")


class _Node:
    __slots__ = ("children", "clusters")

    def __init__(self):
        self.children: dict = {}
        self.clusters: list[LogEvent] = []


def _has_digit(tok: str) -> bool:
    return any(ch.isdigit() for ch in tok)


class DrainParser:
    """Fixed-depth parse tree: length layer, then ``depth - 2`` token layers, then clusters."""

    def __init__(self, config: DrainConfig | None = None, line_format: str | LineFormat = "generic",
                 vocabulary: EventVocabulary | None = None):
        self.config = config or DrainConfig()
        self.format = FORMATS[line_format] if isinstance(line_format, str) else line_format
        self.vocabulary = vocabulary if vocabulary is not None else EventVocabulary()
        self.root = _Node()
        self._masks = [re.compile(m) for m in self.config.masks]
        self.quarantined = 0
        self.timestamp_regressions = 0
        self._last_ts: float | None = None
        self._token_layers = self.config.depth - 2

    # token preparation
    def _mask(self, content: str) -> tuple[list[str], list[str]]:
        """Return (original tokens, masked tokens) of equal length."""
        original = content.split()
        masked = []
        for tok in original:
            m = tok
            for rx in self._masks:
                m = rx.sub(PLACEHOLDER, m)
            m = _NUMBER.sub(PLACEHOLDER, m)
            masked.append(m)
        return original, masked

    # tree search
    def _leaf(self, tokens: list[str], create: bool) -> Optional[_Node]:
        n = len(tokens)
        node = self.root.children.get(n)
        if node is None:
            if not create:
                return None
            node = self.root.children[n] = _Node()
        for depth, tok in enumerate(tokens):
            if depth >= self._token_layers:
                break
            key = PLACEHOLDER if (_has_digit(tok) or PLACEHOLDER in tok) else tok
            child = node.children.get(key)
            if child is None and not create:
                child = node.children.get(PLACEHOLDER)
                if child is None:
                    return None
            elif child is None:
                if PLACEHOLDER not in node.children and len(node.children) >= self.config.max_children - 1:
                    key = PLACEHOLDER
                elif len(node.children) >= self.config.max_children:
                    key = PLACEHOLDER
                child = node.children.get(key)
                if child is None:
                    child = node.children[key] = _Node()
            node = child
        return node

    @staticmethod
    def _similarity(template: list[str], tokens: list[str]) -> tuple[float, int]:
        same = params = 0
        for t, s in zip(template, tokens):
            if t == PLACEHOLDER:
                params += 1
            elif t == s:
                same += 1
        return same / len(template), params

    def _best_match(self, clusters: list[LogEvent], tokens: list[str]) -> Optional[LogEvent]:
        best, best_sim, best_params = None, -1.0, -1
        for cluster in clusters:
            sim, params = self._similarity(cluster.template, tokens)
            if sim > best_sim or (sim == best_sim and params > best_params):
                best, best_sim, best_params = cluster, sim, params
        if best is not None and best_sim >= self.config.similarity_threshold:
            return best
        return None

    @staticmethod
    def _extract_params(template: list[str], original: list[str]) -> list[str]:
        params: list[str] = []
        for t, o in zip(template, original):
            k = t.count(PLACEHOLDER)
            if k == 0:
                continue
            if t == PLACEHOLDER:
                params.append(o)
                continue
            pattern = "(.*?)".join(re.escape(piece) for piece in t.split(PLACEHOLDER))
            m = re.fullmatch(pattern, o)
            if m is not None:
                params.extend(m.groups())
            else:
                params.extend([o] + [""] * (k - 1))
        return params

    def match(self, content: str) -> Optional[LogEvent]:
        """Read-only lookup of a message against the current templates."""
        _, tokens = self._mask(content)
        if not tokens:
            return None
        leaf = self._leaf(tokens, create=False)
        if leaf is None:
            return None
        return self._best_match(leaf.clusters, tokens)

    def add_message(self, content: str) -> tuple[LogEvent, list[str]]:
        original, tokens = self._mask(content)
        if not tokens:
            original, tokens = ["<empty>"], ["<empty>"]
        leaf = self._leaf(tokens, create=False)
        cluster = self._best_match(leaf.clusters, tokens) if leaf is not None else None
        if cluster is None:
            cluster = self.vocabulary.add(tokens)
            self._leaf(tokens, create=True).clusters.append(cluster)
        else:
            merged = [t if t == s else PLACEHOLDER for t, s in zip(cluster.template, tokens)]
            if merged != cluster.template:
                cluster.template = merged
        return cluster, self._extract_params(cluster.template, original)

    def parse(self, record: RawLogRecord) -> Optional[ParsedRecord]:
        """Parse one line; lines whose header cannot be read are quarantined (None)."""
        text = record.text.strip()
        if not text:
            self.quarantined += 1
            return None
        try:
            header, content, label = self.format.split(text)
        except HeaderParseError as exc:
            self.quarantined += 1
            log.debug("quarantined line %d: %s", record.line_no, exc)
            return None
        if self._last_ts is not None and header.timestamp < self._last_ts:
            self.timestamp_regressions += 1
        self._last_ts = header.timestamp
        event, params = self.add_message(content)
        return ParsedRecord(record.line_no, header, event.event_id, params, content, label)


def drain_parse(line: RawLogRecord, state: DrainParser) -> Optional[ParsedRecord]:
    return state.parse(line)


def read_lines(path) -> Iterator[RawLogRecord]:
    with open(path, encoding="utf-8", errors="replace") as fh:
        for i, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if line.strip():
                yield RawLogRecord(i, line)


def parse_lines(records: Iterable[RawLogRecord], parser: DrainParser) -> Iterator[ParsedRecord]:
    for rec in records:
        parsed = parser.parse(rec)
        if parsed is not None:
            yield parsed


# -- grouping ------------------------------------------------------------------

@dataclass
class GroupingStats:
    dropped_records: int = 0
    discarded_abnormal: int = 0
    short_tail: int = 0


def sessionize(records: Iterable[ParsedRecord], key_pattern: str | re.Pattern,
               labels: dict | None = None, source: str = "", stats: GroupingStats | None = None) -> list[Sample]:
    """One sample per distinct key found in the record content, in order of first appearance.

    A record whose content carries several distinct keys joins each of those
    sessions. ``labels`` maps key -> NORMAL/ABNORMAL.
    """
    rx = re.compile(key_pattern) if isinstance(key_pattern, str) else key_pattern
    stats = stats if stats is not None else GroupingStats()
    sessions: "OrderedDict[str, list[ParsedRecord]]" = OrderedDict()
    seen_any = False
    for rec in records:
        seen_any = True
        keys = list(dict.fromkeys(rx.findall(rec.content)))
        if not keys:
            stats.dropped_records += 1
            continue
        for key in keys:
            sessions.setdefault(key if isinstance(key, str) else key[0], []).append(rec)
    if seen_any and not sessions:
        raise ConfigError(f"key pattern {rx.pattern!r} matched no records")
    out = []
    for i, (key, recs) in enumerate(sessions.items()):
        label = labels.get(key) if labels is not None else None
        out.append(Sample([r.event_id for r in recs], [r.header for r in recs], label,
                          (source or key, recs[0].line_no, i)))
    return out


def sliding_windows(records: Sequence[ParsedRecord], size: int, step: int, source: str = "") -> list[Sample]:
    """Fixed windows at offsets 0, step, 2*step, ...; an incomplete trailing window is dropped."""
    if size < 1 or step < 1:
        raise ConfigError("window size and step must be >= 1")
    records = list(records)
    out = []
    for w, start in enumerate(range(0, len(records) - size + 1, step)):
        chunk = records[start:start + size]
        labels = [r.label for r in chunk]
        if all(lab is None for lab in labels):
            label = None
        else:
            label = ABNORMAL if any(lab == ABNORMAL for lab in labels) else NORMAL
        out.append(Sample([r.event_id for r in chunk], [r.header for r in chunk], label,
                          (source, chunk[0].line_no, w)))
    return out


def split_train_test(samples: Sequence[Sample], ratio: float, stats: GroupingStats | None = None):
    """Chronological split. Abnormal samples on the training side are discarded."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"train ratio must be in (0, 1), got {ratio}")
    samples = list(samples)
    cut = int(round(len(samples) * ratio))
    head, test = samples[:cut], samples[cut:]
    train = [s for s in head if s.label != ABNORMAL]
    if stats is not None:
        stats.discarded_abnormal += len(head) - len(train)
    if not train or not test:
        raise ConfigError(f"split at ratio {ratio} leaves an empty side ({len(train)} train, {len(test)} test)")
    return train, test


# -- files ---------------------------------------------------------------------

PARAM_SEP = "\x1f"


def write_parsed(records: Iterable[ParsedRecord], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("line_no\ttimestamp\tcomponent\tlevel\tevent_id\tparams\n")
        for r in records:
            params = PARAM_SEP.join(p.replace("\t", " ").replace("\n", " ") for p in r.params)
            h = r.header
            fh.write(f"{r.line_no}\t{h.timestamp!r}\t{h.component}\t{h.level}\t{r.event_id}\t{params}\n")
            n += 1
    return n


def read_parsed(path) -> list[ParsedRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            line_no, ts, comp, level, eid, params = line.rstrip("\n").split("\t")
            out.append(ParsedRecord(int(line_no), LogHeader(float(ts), comp, level), int(eid),
                                    params.split(PARAM_SEP) if params else []))
    return out


def write_catalog(vocab: EventVocabulary, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("event_id\ttemplate\n")
        for ev in vocab.templates:
            fh.write(f"{ev.event_id}\t{ev.text}\n")
