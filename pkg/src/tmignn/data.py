"""Session logs: parsing, filtering, prefix augmentation and the dataset file."""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

from sklearn.base import BaseEstimator, TransformerMixin

DATASET_FORMAT = "tmignn-dataset"
DATASET_VERSION = 1
MAX_STEP = 300


class ParseError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class SessionRecord:
    session_id: str
    items: list
    timestamps: list

    def __post_init__(self):
        if len(self.items) != len(self.timestamps):
            raise ValueError(
                f"session {self.session_id!r}: {len(self.items)} items "
                f"but {len(self.timestamps)} timestamps"
            )
        if any(b < a for a, b in zip(self.timestamps, self.timestamps[1:])):
            raise ValueError(f"session {self.session_id!r}: timestamps decrease")

    def __len__(self):
        return len(self.items)

    @property
    def end_time(self):
        return self.timestamps[-1] if self.timestamps else 0

    def prefix(self, k: int) -> "SessionRecord":
        return SessionRecord(self.session_id, self.items[:k], self.timestamps[:k])


@dataclass
class DatasetSplit:
    """Prefix/target examples plus the item vocabulary they index into."""

    train: list
    test: list
    item_count: int
    vocabulary: dict = field(default_factory=dict)

    def __post_init__(self):
        for part in (self.train, self.test):
            for prefix, target in part:
                if target >= self.item_count or any(i >= self.item_count for i in prefix.items):
                    raise ValueError(
                        f"session {prefix.session_id!r} indexes past item_count={self.item_count}"
                    )


# ------------------------------------------------------------------ parsing


def _sniff_delimiter(header: str) -> str:
    return "\t" if "\t" in header else ","


def parse_sessions(path, format: str = "auto") -> list[SessionRecord]:
    """Read ``session_id, item_id, timestamp`` rows into sessions.

    ``format`` is ``"tsv"``, ``"csv"`` or ``"auto"`` (sniffed from the
    header). Rows inside a session are ordered by timestamp; equal
    timestamps keep file order. Item ids stay as the raw strings.
    """
    text = Path(path).read_text(encoding="utf-8")
    return parse_sessions_text(text, format)


def parse_sessions_text(text: str, format: str = "auto") -> list[SessionRecord]:
    lines = text.splitlines()
    if not any(line.strip() for line in lines):
        return []
    if format == "auto":
        delim = _sniff_delimiter(lines[0])
    elif format in ("tsv", "csv"):
        delim = "\t" if format == "tsv" else ","
    else:
        raise ValueError(f"unknown format {format!r}")

    reader = csv.reader(io.StringIO(text), delimiter=delim)
    groups: dict[str, list] = {}
    header_seen = False
    for lineno, row in enumerate(reader, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if not header_seen:
            header_seen = True
            cols = [c.strip().lower() for c in row]
            if cols[:3] == ["session_id", "item_id", "timestamp"]:
                continue
        if len(row) < 3:
            raise ParseError(f"expected 3 columns, got {len(row)}", lineno)
        sid, item, ts = (c.strip() for c in row[:3])
        try:
            stamp = float(ts)
        except ValueError:
            raise ParseError(f"non-numeric timestamp {ts!r}", lineno) from None
        if not math.isfinite(stamp):
            raise ParseError(f"non-finite timestamp {ts!r}", lineno)
        stamp = int(stamp) if stamp.is_integer() else stamp
        groups.setdefault(sid, []).append((stamp, len(groups.get(sid, ())), item))

    sessions = []
    for sid, rows in groups.items():
        rows.sort(key=lambda r: (r[0], r[1]))
        sessions.append(SessionRecord(sid, [r[2] for r in rows], [r[0] for r in rows]))
    return sessions


def gap_split(sessions: Iterable[SessionRecord], gap: float) -> list[SessionRecord]:
    """Cut sessions wherever consecutive clicks are more than ``gap`` seconds apart."""
    out = []
    for s in sessions:
        start = 0
        part = 0
        for k in range(1, len(s) + 1):
            if k == len(s) or s.timestamps[k] - s.timestamps[k - 1] > gap:
                sid = s.session_id if part == 0 else f"{s.session_id}#{part}"
                out.append(SessionRecord(sid, s.items[start:k], s.timestamps[start:k]))
                start, part = k, part + 1
    return out


# --------------------------------------------------------------- filtering


def filter_corpus(sessions, min_session_len: int = 3, min_item_freq: int = 5):
    """Drop rare items and short sessions, repeating until nothing changes.

    Items with fewer than ``min_item_freq`` occurrences are removed from
    every session, then sessions shorter than ``min_session_len`` are
    dropped; the two steps alternate to a fixpoint.
    """
    current = list(sessions)
    while True:
        counts = Counter(item for s in current for item in s.items)
        rare = {item for item, c in counts.items() if c < min_item_freq}
        kept = []
        for s in current:
            if rare:
                pairs = [(i, t) for i, t in zip(s.items, s.timestamps) if i not in rare]
                s = SessionRecord(s.session_id, [p[0] for p in pairs], [p[1] for p in pairs])
            if len(s) >= min_session_len:
                kept.append(s)
        if not rare and len(kept) == len(current):
            return kept
        current = kept


def augment_prefixes(session: SessionRecord) -> list[tuple]:
    """``[(prefix of length k, item k+1) for k = 1 .. n-1]``."""
    return [(session.prefix(k), session.items[k]) for k in range(1, len(session))]


def bucket_interval(t_i, t_j, bucket_width: float, max_step: int = MAX_STEP) -> int:
    """Time-bucket index ``floor(|t_i - t_j| / bucket_width)`` clamped to ``[0, max_step]``."""
    if bucket_width <= 0:
        raise ValueError("bucket_width must be positive")
    return int(min(max_step, math.floor(abs(t_i - t_j) / bucket_width)))


# ------------------------------------------------------------ splitting


def build_vocabulary(sessions: Iterable[SessionRecord]) -> dict:
    """Dense indices in order of first appearance."""
    vocab: dict = {}
    for s in sessions:
        for item in s.items:
            if item not in vocab:
                vocab[item] = len(vocab)
    return vocab


def remap(session: SessionRecord, vocab: dict) -> SessionRecord:
    return SessionRecord(session.session_id, [vocab[i] for i in session.items], list(session.timestamps))


def chronological_split(sessions: Sequence[SessionRecord], test_frac: float = 0.1):
    """Latest-ending ``test_frac`` of sessions become the test part."""
    if not 0 <= test_frac < 1:
        raise ValueError("test_frac must lie in [0, 1)")
    order = sorted(range(len(sessions)), key=lambda k: (sessions[k].end_time, k))
    n_test = int(round(len(sessions) * test_frac))
    cut = len(sessions) - n_test
    train = [sessions[k] for k in sorted(order[:cut])]
    test = [sessions[k] for k in sorted(order[cut:])]
    return train, test


def make_split(
    sessions: Sequence[SessionRecord],
    test_frac: float = 0.1,
    vocabulary: Optional[dict] = None,
    augment_test: bool = True,
) -> DatasetSplit:
    """Remap items densely, split chronologically and unroll prefixes."""
    vocab = build_vocabulary(sessions) if vocabulary is None else vocabulary
    dense = [remap(s, vocab) for s in sessions]
    train_s, test_s = chronological_split(dense, test_frac)
    train = [ex for s in train_s for ex in augment_prefixes(s)]
    if augment_test:
        test = [ex for s in test_s for ex in augment_prefixes(s)]
    else:
        test = [(s.prefix(len(s) - 1), s.items[-1]) for s in test_s if len(s) >= 2]
    return DatasetSplit(train, test, item_count=len(vocab), vocabulary=dict(vocab))


def preprocess(
    sessions,
    min_session_len: int = 3,
    min_item_freq: int = 5,
    test_frac: float = 0.1,
    gap: Optional[float] = None,
) -> DatasetSplit:
    if gap is not None:
        sessions = gap_split(sessions, gap)
    kept = filter_corpus(sessions, min_session_len, min_item_freq)
    return make_split(kept, test_frac)


class CorpusFilter(TransformerMixin, BaseEstimator):
    """Transformer wrapper around :func:`filter_corpus`."""

    def __init__(self, min_session_len=3, min_item_freq=5):
        self.min_session_len = min_session_len
        self.min_item_freq = min_item_freq

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return filter_corpus(X, self.min_session_len, self.min_item_freq)


class PrefixAugmenter(TransformerMixin, BaseEstimator):
    """Expands sessions into ``(prefixes, targets)``."""

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        pairs = [ex for s in X for ex in augment_prefixes(s)]
        return [p for p, _ in pairs], [t for _, t in pairs]


# ------------------------------------------------------------ dataset file


def _fmt_ts(t) -> str:
    return repr(t) if isinstance(t, float) and not float(t).is_integer() else str(int(t))


def _parse_ts(tok: str):
    v = float(tok)
    return int(v) if v.is_integer() and "." not in tok else v


def write_dataset(split: DatasetSplit, path) -> None:
    """Write the versioned text format.

    Layout::

        # tmignn-dataset 1
        item_count <n>
        [vocab]
        <original id>\\t<index>
        [train]
        <session id>\\t<items>\\t<timestamps>\\t<target>
        [test]
        ...
    """
    lines = [f"# {DATASET_FORMAT} {DATASET_VERSION}", f"item_count {split.item_count}", "[vocab]"]
    for orig, idx in sorted(split.vocabulary.items(), key=lambda kv: kv[1]):
        lines.append(f"{orig}\t{idx}")
    for name, part in (("train", split.train), ("test", split.test)):
        lines.append(f"[{name}]")
        for prefix, target in part:
            lines.append(
                "\t".join(
                    [
                        prefix.session_id,
                        " ".join(str(i) for i in prefix.items),
                        " ".join(_fmt_ts(t) for t in prefix.timestamps),
                        str(target),
                    ]
                )
            )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_dataset(path) -> DatasetSplit:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(f"# {DATASET_FORMAT} "):
        raise ParseError("not a dataset file", 1)
    version = lines[0].split()[-1]
    if version != str(DATASET_VERSION):
        raise ParseError(f"unsupported dataset version {version}", 1)
    item_count = None
    vocab: dict = {}
    parts: dict = {"train": [], "test": []}
    block = None
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("item_count "):
            item_count = int(line.split()[1])
        elif line.startswith("[") and line.endswith("]"):
            block = line[1:-1]
            if block not in ("vocab", "train", "test"):
                raise ParseError(f"unknown block {line}", lineno)
        elif block == "vocab":
            orig, idx = line.rsplit("\t", 1)
            vocab[orig] = int(idx)
        elif block in parts:
            cols = line.split("\t")
            if len(cols) != 4:
                raise ParseError("expected 4 tab-separated fields", lineno)
            try:
                items = [int(i) for i in cols[1].split()]
                stamps = [_parse_ts(t) for t in cols[2].split()]
                target = int(cols[3])
                rec = SessionRecord(cols[0], items, stamps)
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            parts[block].append((rec, target))
        else:
            raise ParseError("content outside a block", lineno)
    if item_count is None:
        raise ParseError("missing item_count")
    return DatasetSplit(parts["train"], parts["test"], item_count, vocab)
