"""Session log ingestion, filtering, chronological splitting and prefix expansion."""

from __future__ import annotations

import csv
import hashlib
import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

CORPUS_FORMAT = "miasrec-corpus"
CORPUS_VERSION = 1


class DataError(ValueError):
    """Input data cannot be turned into a usable corpus."""


class ParseError(DataError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


class EmptyCorpusError(DataError):
    pass


@dataclass
class EventLog:
    """Raw interaction rows ``(session_id, item_id, timestamp)`` in file order."""

    rows: list[tuple[str, str, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)


@dataclass(frozen=True)
class Session:
    id: str
    items: tuple[int, ...]
    end_time: int

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class SessionCorpus:
    """Index-mapped sessions ordered by end time.

    ``vocabulary[i - 1]`` is the raw item id of dense index ``i``; indices run
    from 1 to ``n_items`` and 0 is never a valid item.
    """

    sessions: list[Session]
    vocabulary: list[str]

    @property
    def n_items(self) -> int:
        return len(self.vocabulary)

    @property
    def n_interactions(self) -> int:
        return sum(len(s) for s in self.sessions)

    def __len__(self) -> int:
        return len(self.sessions)

    def item_index(self) -> dict[str, int]:
        return {item: i for i, item in enumerate(self.vocabulary, start=1)}

    def to_event_log(self) -> EventLog:
        """Rebuild a log whose events reproduce this corpus (one second apart, ending at ``end_time``)."""
        rows = []
        for s in self.sessions:
            start = s.end_time - len(s) + 1
            rows.extend((s.id, self.vocabulary[i - 1], start + k) for k, i in enumerate(s.items))
        return EventLog(rows)

    def statistics(self) -> dict:
        n_sessions = len(self.sessions)
        return {
            "interactions": self.n_interactions,
            "sessions": n_sessions,
            "items": len({i for s in self.sessions for i in s.items}),
            "avg_len": self.n_interactions / n_sessions if n_sessions else 0.0,
        }


@dataclass(frozen=True)
class PrefixExample:
    """One revealed prefix and the item that follows it."""

    prefix: tuple[int, ...]
    target: int
    positions: tuple[int, ...]
    frequencies: tuple[int, ...]
    session_id: str = ""

    def __len__(self) -> int:
        return len(self.prefix)


# ---------------------------------------------------------------------------
# ingestion


def parse_timestamp(value: str) -> int:
    """Integer epoch seconds, or an ISO ``YYYY-MM-DD`` date mapped to UTC midnight."""
    value = value.strip()
    try:
        return int(value)
    except ValueError:
        pass
    try:
        day = date.fromisoformat(value)
    except ValueError:
        raise ValueError(f"timestamp {value!r} is neither an integer nor a YYYY-MM-DD date") from None
    return int(datetime(day.year, day.month, day.day, tzinfo=timezone.utc).timestamp())


def _resolve_column(column: int | str, header: list[str] | None) -> int:
    if isinstance(column, int):
        return column
    if isinstance(column, str) and column.lstrip("-").isdigit():
        return int(column)
    if header is None:
        raise DataError(f"column {column!r} given by name but the file has no header")
    try:
        return header.index(column)
    except ValueError:
        raise DataError(f"column {column!r} not found in header {header}") from None


def load_events(
    path,
    session_col: int | str = 0,
    item_col: int | str = 1,
    time_col: int | str = 2,
    delimiter: str | None = None,
    header: bool = False,
) -> EventLog:
    """Read a delimited interaction log.

    ``delimiter`` defaults to ``,`` for ``.csv`` files and tab otherwise.
    Columns may be given by position or, when ``header`` is set, by name.
    """
    path = Path(path)
    if delimiter is None:
        delimiter = "," if path.suffix.lower() == ".csv" else "\t"

    rows: list[tuple[str, str, int]] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        names = None
        if header:
            names = next(reader, None)
            if names is None:
                return EventLog(rows)
            names = [n.strip() for n in names]
        cols = [_resolve_column(c, names) for c in (session_col, item_col, time_col)]
        width = max(cols) + 1
        for record in reader:
            line = reader.line_num
            if not record or all(not cell.strip() for cell in record):
                continue
            if len(record) < width:
                raise ParseError(path, line, f"expected at least {width} columns, found {len(record)}")
            sid, item, ts = (record[c].strip() for c in cols)
            if not sid or not item:
                raise ParseError(path, line, "empty session or item id")
            try:
                stamp = parse_timestamp(ts)
            except ValueError as exc:
                raise ParseError(path, line, str(exc)) from None
            rows.append((sid, item, stamp))
    return EventLog(rows)


# ---------------------------------------------------------------------------
# filtering and splitting


def _group_sessions(rows: Iterable[tuple[str, str, int]]) -> dict[str, list[tuple[int, int, str]]]:
    grouped: dict[str, list[tuple[int, int, str]]] = defaultdict(list)
    for order, (sid, item, ts) in enumerate(rows):
        grouped[sid].append((ts, order, item))
    for events in grouped.values():
        events.sort()
    return grouped


def _order_key(session: Session) -> tuple[int, str]:
    return (session.end_time, session.id)


def preprocess(
    log: EventLog,
    min_item_support: int = 5,
    min_session_len: int = 2,
    fixed_point: bool = False,
) -> SessionCorpus:
    """Drop rare items, then short sessions, and map items to dense indices.

    Item support is counted over the whole log. By default the two filters run
    once each; ``fixed_point=True`` repeats them until nothing changes.
    """
    if len(log) == 0:
        raise EmptyCorpusError("event log is empty")

    grouped = _group_sessions(log.rows)
    raw = {sid: [(ts, item) for ts, _, item in events] for sid, events in grouped.items()}

    while True:
        support = Counter(item for events in raw.values() for _, item in events)
        kept = {}
        for sid, events in raw.items():
            filtered = [(ts, item) for ts, item in events if support[item] >= min_item_support]
            if len(filtered) >= min_session_len:
                kept[sid] = filtered
        changed = kept.keys() != raw.keys() or any(len(kept[s]) != len(raw[s]) for s in kept)
        raw = kept
        if not fixed_point or not changed:
            break

    if not raw:
        raise EmptyCorpusError(
            f"no sessions left after filtering (min_item_support={min_item_support}, "
            f"min_session_len={min_session_len})"
        )

    ordered = sorted(raw.items(), key=lambda kv: (kv[1][-1][0], kv[0]))
    vocabulary: list[str] = []
    index: dict[str, int] = {}
    sessions = []
    for sid, events in ordered:
        for _, item in events:
            if item not in index:
                vocabulary.append(item)
                index[item] = len(vocabulary)
        sessions.append(Session(sid, tuple(index[item] for _, item in events), events[-1][0]))
    return SessionCorpus(sessions, vocabulary)


def _split_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    total = float(sum(ratios))
    bounds, acc = [], 0.0
    for r in ratios[:-1]:
        acc += r
        bounds.append(int(n * acc / total + 1e-9))
    bounds.append(n)
    sizes, prev = [], 0
    for b in bounds:
        sizes.append(b - prev)
        prev = b
    return sizes


def _restrict(sessions: Iterable[Session], vocab_of: dict[int, int], min_session_len: int) -> list[Session]:
    out = []
    for s in sessions:
        items = tuple(vocab_of[i] for i in s.items if i in vocab_of)
        if len(items) >= min_session_len:
            out.append(Session(s.id, items, s.end_time))
    return out


def chronological_split(
    corpus: SessionCorpus,
    ratios: Sequence[float] = (8, 1, 1),
    drop_cold_items: bool = True,
    min_session_len: int = 2,
) -> tuple[SessionCorpus, SessionCorpus, SessionCorpus]:
    """Split by session end time into train / validation / test portions.

    With ``drop_cold_items`` the result is re-indexed over the training items
    only; items never seen in training are removed from later sessions and
    sessions left shorter than ``min_session_len`` are dropped.
    """
    if len(ratios) != 3:
        raise ValueError("ratios must have three entries")
    if len(corpus) < 10:
        raise DataError(f"need at least 10 sessions to split, got {len(corpus)}")

    sessions = sorted(corpus.sessions, key=_order_key)
    n_train, n_val, _ = _split_sizes(len(sessions), ratios)
    parts = [sessions[:n_train], sessions[n_train : n_train + n_val], sessions[n_train + n_val :]]

    if not drop_cold_items:
        return tuple(SessionCorpus(list(p), list(corpus.vocabulary)) for p in parts)

    remap: dict[int, int] = {}
    vocabulary: list[str] = []
    for s in parts[0]:
        for i in s.items:
            if i not in remap:
                vocabulary.append(corpus.vocabulary[i - 1])
                remap[i] = len(vocabulary)
    train = SessionCorpus([Session(s.id, tuple(remap[i] for i in s.items), s.end_time) for s in parts[0]], vocabulary)
    val = SessionCorpus(_restrict(parts[1], remap, min_session_len), list(vocabulary))
    test = SessionCorpus(_restrict(parts[2], remap, min_session_len), list(vocabulary))
    return train, val, test


# ---------------------------------------------------------------------------
# prefix expansion


def reversed_positions(length: int) -> tuple[int, ...]:
    return tuple(range(length, 0, -1))


def prefix_frequencies(prefix: Sequence[int]) -> tuple[int, ...]:
    counts = Counter(prefix)
    return tuple(counts[i] for i in prefix)


def make_example(prefix: Sequence[int], target: int, max_len: int = 50, session_id: str = "") -> PrefixExample:
    prefix = tuple(prefix[-max_len:])
    return PrefixExample(prefix, target, reversed_positions(len(prefix)), prefix_frequencies(prefix), session_id)


def expand_prefixes(corpus: SessionCorpus | Iterable[Session], max_len: int = 50) -> list[PrefixExample]:
    """Iterative revealing: a session of length L yields L - 1 (prefix, next item) pairs."""
    sessions = corpus.sessions if isinstance(corpus, SessionCorpus) else corpus
    examples = []
    for s in sessions:
        for i in range(1, len(s.items)):
            examples.append(make_example(s.items[:i], s.items[i], max_len, s.id))
    return examples


# ---------------------------------------------------------------------------
# corpus files


def corpus_to_dict(corpus: SessionCorpus) -> dict:
    return {
        "vocabulary": corpus.vocabulary,
        "sessions": [{"id": s.id, "items": list(s.items), "end_time": s.end_time} for s in corpus.sessions],
    }


def corpus_fingerprint(corpus: SessionCorpus) -> str:
    payload = json.dumps(corpus_to_dict(corpus), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def save_corpus(corpus: SessionCorpus, path, config: dict | None = None) -> None:
    doc = {
        "format": CORPUS_FORMAT,
        "version": CORPUS_VERSION,
        "config": config or {},
        "statistics": corpus.statistics(),
        "fingerprint": corpus_fingerprint(corpus),
        **corpus_to_dict(corpus),
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def load_corpus(path) -> SessionCorpus:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not a corpus file ({exc})") from None
    if doc.get("format") != CORPUS_FORMAT:
        raise DataError(f"{path}: not a corpus file")
    if doc.get("version") != CORPUS_VERSION:
        raise DataError(f"{path}: unsupported corpus version {doc.get('version')}")
    sessions = [Session(str(s["id"]), tuple(s["items"]), int(s["end_time"])) for s in doc["sessions"]]
    return SessionCorpus(sessions, list(doc["vocabulary"]))
