"""Raw interaction-log ingestion and synthetic dataset generation.

Parses delimiter-separated event logs into per-user chronological sequences:
parse -> frequency-filtered vocabulary -> sequences -> leave-one-out split.
Event-to-code mappings are declared by a schema descriptor, never inferred,
so runs are bit-stable across files.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np


class SchemaError(ValueError):
    """Input file does not match the declared schema."""


class UnknownEventError(ValueError):
    """Event string with no declared code."""


class EmptyVocabularyError(ValueError):
    """Every item was filtered out."""


@dataclass(frozen=True)
class SchemaDescriptor:
    name: str
    columns: tuple[str, ...]
    timestamp_col: str
    user_col: str
    item_col: str
    event_col: str
    event_codes: dict[str, int]
    n_types: int
    delimiter: str = ","
    has_header: bool = True

    def __post_init__(self):
        for col in (self.timestamp_col, self.user_col, self.item_col, self.event_col):
            if col not in self.columns:
                raise SchemaError(f"schema {self.name!r}: column {col!r} not declared")
        if self.n_types < 1 or any(not 0 <= c < self.n_types for c in self.event_codes.values()):
            raise SchemaError(f"schema {self.name!r}: event codes must lie in [0, n_types)")


RETAILROCKET = SchemaDescriptor(
    name="retailrocket",
    columns=("timestamp", "visitorid", "event", "itemid", "transactionid"),
    timestamp_col="timestamp",
    user_col="visitorid",
    item_col="itemid",
    event_col="event",
    event_codes={"view": 0, "addtocart": 1, "transaction": 2},
    n_types=3,
)

TAOBAO = SchemaDescriptor(
    name="taobao",
    columns=("user_id", "item_id", "category_id", "behavior_type", "timestamp"),
    timestamp_col="timestamp",
    user_col="user_id",
    item_col="item_id",
    event_col="behavior_type",
    event_codes={"pv": 0, "buy": 1, "cart": 2, "fav": 3},
    n_types=4,
    has_header=False,
)

BUILTIN_SCHEMAS = {"retailrocket": RETAILROCKET, "taobao": TAOBAO}


def load_schema(path: str | Path) -> SchemaDescriptor:
    raw = json.loads(Path(path).read_text())
    return SchemaDescriptor(
        name=raw["name"],
        columns=tuple(raw["columns"]),
        timestamp_col=raw["timestamp_col"],
        user_col=raw["user_col"],
        item_col=raw["item_col"],
        event_col=raw["event_col"],
        event_codes={str(k): int(v) for k, v in raw["event_codes"].items()},
        n_types=int(raw["n_types"]),
        delimiter=raw.get("delimiter", ","),
        has_header=bool(raw.get("has_header", True)),
    )


@dataclass(frozen=True)
class EventRecord:
    timestamp: int
    user: str
    item: str
    event_type: int


def parse_events(source, schema: SchemaDescriptor) -> tuple[list[EventRecord], int]:
    """Parse a header-bearing delimited text stream into EventRecords.

    Returns (events in file order, count of skipped malformed rows).
    Unknown event strings and missing header columns are fatal.
    """
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as fh:
            return parse_events(fh, schema)
    if isinstance(source, bytes):
        return parse_events(io.StringIO(source.decode("utf-8")), schema)
    if isinstance(source, str):  # pragma: no cover - guarded above
        raise TypeError("pass a path, bytes, file object or iterable of lines")

    lines: Iterable[str] = source
    it = iter(lines)
    if schema.has_header:
        try:
            header_line = next(it)
        except StopIteration:
            raise SchemaError(f"schema {schema.name!r}: empty input, header expected")
        header = [c.strip() for c in header_line.rstrip("\r\n").split(schema.delimiter)]
        positions = {}
        for col in (schema.timestamp_col, schema.user_col, schema.item_col, schema.event_col):
            if col not in header:
                raise SchemaError(f"schema {schema.name!r}: required column {col!r} missing from header {header}")
            positions[col] = header.index(col)
    else:
        positions = {c: i for i, c in enumerate(schema.columns)}

    ts_i = positions[schema.timestamp_col]
    user_i = positions[schema.user_col]
    item_i = positions[schema.item_col]
    event_i = positions[schema.event_col]
    needed = max(ts_i, user_i, item_i, event_i) + 1

    events: list[EventRecord] = []
    skipped = 0
    for line in it:
        row = line.rstrip("\r\n")
        if not row:
            skipped += 1
            continue
        fields = row.split(schema.delimiter)
        if len(fields) < needed:
            skipped += 1
            continue
        try:
            ts = int(fields[ts_i])
        except ValueError:
            skipped += 1
            continue
        if ts < 0:
            skipped += 1
            continue
        ev = fields[event_i].strip()
        if ev not in schema.event_codes:
            raise UnknownEventError(f"schema {schema.name!r}: unknown event string {ev!r}")
        user = fields[user_i].strip()
        item = fields[item_i].strip()
        if not user or not item:
            skipped += 1
            continue
        events.append(EventRecord(ts, user, item, schema.event_codes[ev]))
    return events, skipped


def serialize_events(events: list[EventRecord], schema: SchemaDescriptor) -> str:
    """Inverse of parse_events for the captured columns (others left blank)."""
    code_to_event = {}
    for name, code in schema.event_codes.items():
        code_to_event.setdefault(code, name)
    lines = []
    if schema.has_header:
        lines.append(schema.delimiter.join(schema.columns))
    for ev in events:
        fields = [""] * len(schema.columns)
        fields[schema.columns.index(schema.timestamp_col)] = str(ev.timestamp)
        fields[schema.columns.index(schema.user_col)] = ev.user
        fields[schema.columns.index(schema.item_col)] = ev.item
        fields[schema.columns.index(schema.event_col)] = code_to_event[ev.event_type]
        lines.append(schema.delimiter.join(fields))
    return "\n".join(lines) + "\n"


@dataclass
class Vocabulary:
    item_to_id: dict[str, int]
    id_to_item: list[str]
    counts: np.ndarray
    min_count: int

    @property
    def V(self) -> int:
        return len(self.id_to_item)


def build_vocabulary(events: list[EventRecord], min_count: int) -> Vocabulary:
    """Frequency-filtered dense vocabulary, ids ordered by (count desc, key asc)."""
    if min_count < 1:
        raise ValueError(f"min_count must be >= 1, got {min_count}")
    counts: dict[str, int] = {}
    for ev in events:
        counts[ev.item] = counts.get(ev.item, 0) + 1
    kept = sorted(
        ((item, c) for item, c in counts.items() if c >= min_count),
        key=lambda kv: (-kv[1], kv[0]),
    )
    if not kept:
        raise EmptyVocabularyError(
            f"no item reaches min_count={min_count} (max observed "
            f"{max(counts.values()) if counts else 0})"
        )
    id_to_item = [item for item, _ in kept]
    return Vocabulary(
        item_to_id={item: i for i, (item, _) in enumerate(kept)},
        id_to_item=id_to_item,
        counts=np.asarray([c for _, c in kept], dtype=np.int64),
        min_count=min_count,
    )


@dataclass
class UserSequence:
    user_id: str
    items: np.ndarray  # int32 dense ids
    types: np.ndarray  # uint8 event codes
    timestamps: np.ndarray  # int64

    def __post_init__(self):
        if not (len(self.items) == len(self.types) == len(self.timestamps) >= 1):
            raise ValueError(f"user {self.user_id}: inconsistent or empty arrays")
        if np.any(np.diff(self.timestamps) < 0):
            raise ValueError(f"user {self.user_id}: timestamps decrease")

    def __len__(self) -> int:
        return len(self.items)


def build_sequences(events: list[EventRecord], vocab: Vocabulary) -> list[UserSequence]:
    """Group events per user, stably sorted by timestamp; vocabulary-filtered;
    users with fewer than 2 surviving events are dropped. Result is sorted by
    user id so sharded builds merge deterministically."""
    per_user: dict[str, list[tuple[int, int, int]]] = {}
    for ev in events:
        item_id = vocab.item_to_id.get(ev.item)
        if item_id is None:
            continue
        per_user.setdefault(ev.user, []).append((ev.timestamp, item_id, ev.event_type))
    out = []
    for user in sorted(per_user):
        rows = per_user[user]
        rows.sort(key=lambda r: r[0])  # stable: file order preserved on ties
        if len(rows) < 2:
            continue
        out.append(
            UserSequence(
                user_id=user,
                items=np.asarray([r[1] for r in rows], dtype=np.int32),
                types=np.asarray([r[2] for r in rows], dtype=np.uint8),
                timestamps=np.asarray([r[0] for r in rows], dtype=np.int64),
            )
        )
    return out


@dataclass
class EvalCase:
    context: UserSequence  # the user's train sequence
    target_item: int
    target_type: int


@dataclass
class DatasetSplit:
    train: list[UserSequence]
    eval_cases: list[EvalCase]


def split_holdout(sequences: list[UserSequence]) -> DatasetSplit:
    """Leave-one-out: each user's final event is the eval target, the rest is
    both the train sequence and the eval context."""
    train = []
    cases = []
    for seq in sequences:
        if len(seq) < 2:
            raise ValueError(f"user {seq.user_id}: need >= 2 events to split")
        ctx = UserSequence(seq.user_id, seq.items[:-1], seq.types[:-1], seq.timestamps[:-1])
        train.append(ctx)
        cases.append(EvalCase(ctx, int(seq.items[-1]), int(seq.types[-1])))
    return DatasetSplit(train=train, eval_cases=cases)


def generate_synthetic(n_users: int, vocab_size: int, mean_len: int,
                       signal_period: int, seed: int, n_types: int = 3) -> list[UserSequence]:
    """Synthetic sequences with profile-conditioned items and a planted
    long-range rule.

    Positions below signal_period sample a mixture conditioned on the user's
    hidden profile: a soft low-rank item-affinity field (a smooth,
    population-level transition structure that takes many examples to
    learn), a profile-specific Zipf distribution, and a uniform floor that
    keeps every conditional bounded away from zero. From signal_period on,
    the item at i is a fixed permutation g applied to the item at
    i - signal_period, so co-occurrence at lag signal_period is
    deterministic while no single training window shorter than the period
    can see both ends of the rule.
    """
    if n_users < 1 or vocab_size < 2 or mean_len < 2 or signal_period < 1:
        raise ValueError("n_users >= 1, vocab_size >= 2, mean_len >= 2, signal_period >= 1 required")
    if n_types < 1:
        raise ValueError("n_types must be >= 1")
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 0x53594E54])  # "SYNT"

    # fixed affine permutation g(x) = (a x + c) mod V with gcd(a, V) = 1
    a = 7
    while math.gcd(a, vocab_size) != 1:
        a += 2
    c = 13 % vocab_size

    n_profiles = max(2, vocab_size // 50)
    support = min(50, vocab_size)
    profile_items = np.stack([
        rng.choice(vocab_size, size=support, replace=False) for _ in range(n_profiles)
    ])
    zipf = 1.0 / np.arange(1, support + 1) ** 0.9
    zipf /= zipf.sum()

    # soft item-to-item affinity: next ~ softmax(1.6 * low-rank field) rows;
    # materialized only at desk-scale vocabularies
    if vocab_size <= 4096:
        rank = 8
        left = rng.standard_normal((vocab_size, rank))
        right = rng.standard_normal((vocab_size, rank))
        logits = left @ right.T * (1.6 / math.sqrt(rank))
        logits -= logits.max(axis=1, keepdims=True)
        trans = np.exp(logits)
        trans /= trans.sum(axis=1, keepdims=True)
        trans_cdf = np.cumsum(trans, axis=1)
        trans_cdf[:, -1] = 1.0
    else:
        trans_cdf = None

    half = max(1, mean_len // 3)
    lo, hi = max(2, mean_len - half), mean_len + half
    uniform_p, profile_p = 0.08, 0.32  # remainder follows the affinity field

    out = []
    for u in range(n_users):
        n = int(rng.integers(lo, hi + 1))
        profile = int(rng.integers(n_profiles))
        items = np.empty(n, dtype=np.int64)
        base = min(n, signal_period)
        mix = rng.random(base)
        profile_draws = rng.choice(profile_items[profile], size=base, p=zipf)
        uniform_draws = rng.integers(0, vocab_size, base)
        inv_cdf_u = rng.random(base)
        prev = int(profile_draws[0])
        for i in range(base):
            if mix[i] < uniform_p:
                prev = int(uniform_draws[i])
            elif mix[i] < uniform_p + profile_p or i == 0 or trans_cdf is None:
                prev = int(profile_draws[i])
            else:
                prev = int(np.searchsorted(trans_cdf[prev], inv_cdf_u[i]))
            items[i] = prev
        for i in range(signal_period, n):
            items[i] = (a * items[i - signal_period] + c) % vocab_size
        out.append(
            UserSequence(
                user_id=f"synth{u:07d}",
                items=items.astype(np.int32),
                types=rng.integers(0, n_types, n).astype(np.uint8),
                timestamps=np.arange(n, dtype=np.int64),
            )
        )
    return out
