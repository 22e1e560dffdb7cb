"""Interaction ingestion, per-user sequences, leave-one-out splits and
prefix-example batching.

Two batching regimes exist: length buckets of padding-free prefix examples
(relative-exact, each training position its own example) and left-padded
fixed windows (absolute-trick, one whole-sequence example per user). Item id
0 is reserved for padding and never assigned to a real item.
"""

from __future__ import annotations

import gzip
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD_ID = 0

POSITION_MODES = ("relative-exact", "absolute-trick")


class DataError(Exception):
    pass


class IdMap:
    """Dense external<->internal id map. Internal ids start at `base`
    (1 for items so 0 stays reserved for padding)."""

    def __init__(self, base: int = 1):
        self.base = base
        self._to_internal: dict[str, int] = {}
        self._to_external: list[str] = []

    def intern(self, external: str) -> int:
        got = self._to_internal.get(external)
        if got is None:
            got = self.base + len(self._to_external)
            self._to_internal[external] = got
            self._to_external.append(external)
        return got

    def internal(self, external: str) -> int:
        return self._to_internal[external]

    def external(self, internal: int) -> str:
        return self._to_external[internal - self.base]

    def __len__(self) -> int:
        return len(self._to_external)

    def externals(self) -> list[str]:
        return list(self._to_external)


@dataclass
class InteractionLog:
    users: IdMap
    items: IdMap
    records: list[tuple[int, int, int]]  # (user, item, timestamp)
    has_timestamps: bool

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_items(self) -> int:
        return len(self.items)


def parse_interactions(stream) -> InteractionLog:
    """Parse whitespace-separated `user item [timestamp]` lines. Timestamp
    presence is decided by the first record and must be consistent. Without
    timestamps, line order is time order. Duplicate records are kept."""
    users = IdMap(base=1)
    items = IdMap(base=1)
    records: list[tuple[int, int, int]] = []
    has_ts: bool | None = None
    for lineno, raw in enumerate(stream, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) not in (2, 3):
            raise DataError(f"line {lineno}: expected 'user item [timestamp]', "
                            f"got {len(parts)} fields")
        if has_ts is None:
            has_ts = len(parts) == 3
        if (len(parts) == 3) != has_ts:
            want = "with" if has_ts else "without"
            raise DataError(f"line {lineno}: expected a record {want} "
                            f"timestamp, matching the first record")
        if has_ts:
            try:
                ts = int(parts[2])
            except ValueError:
                raise DataError(f"line {lineno}: timestamp {parts[2]!r} is "
                                f"not an integer") from None
        else:
            ts = len(records)
        records.append((users.intern(parts[0]), items.intern(parts[1]), ts))
    if not records:
        raise DataError("empty input: no interaction records")
    return InteractionLog(users, items, records, has_timestamps=bool(has_ts))


@dataclass
class SequenceCorpus:
    """Per-user time-ordered item sequences with leave-one-out markers.
    Users with fewer than 3 interactions train but carry no validation/test
    item. The interacted set and item frequencies come from the training
    split only."""

    sequences: dict[int, list[int]]
    n_users: int
    n_items: int
    first_user: dict[int, int] = field(default_factory=dict)
    _counts: np.ndarray = field(default=None, repr=False)

    def users(self) -> list[int]:
        return sorted(self.sequences)

    def eligible_users(self) -> list[int]:
        return [u for u in self.users() if len(self.sequences[u]) >= 3]

    def train_sequence(self, user: int) -> list[int]:
        seq = self.sequences[user]
        return seq[:-2] if len(seq) >= 3 else list(seq)

    def valid_item(self, user: int) -> int | None:
        seq = self.sequences[user]
        return seq[-2] if len(seq) >= 3 else None

    def test_item(self, user: int) -> int | None:
        seq = self.sequences[user]
        return seq[-1] if len(seq) >= 3 else None

    def interacted(self, user: int) -> frozenset[int]:
        return frozenset(self.train_sequence(user))

    def train_item_counts(self) -> np.ndarray:
        """Interaction count per item id over the training split,
        index 0 (padding) always 0."""
        if self._counts is None:
            counts = np.zeros(self.n_items + 1, dtype=np.int64)
            for u in self.users():
                for it in self.train_sequence(u):
                    counts[it] += 1
            self._counts = counts
        return self._counts

def build_sequences(log: InteractionLog) -> SequenceCorpus:
    """Order each user's items by timestamp (stable: ties keep input order)
    and attach leave-one-out markers. Also records each item's first-ever
    user (earliest record globally), used as an exposure-provenance proxy."""
    per_user: dict[int, list[tuple[int, int]]] = {}
    first_user: dict[int, int] = {}
    for user, item, ts in log.records:
        per_user.setdefault(user, []).append((ts, item))
    for _, (user, item, _ts) in sorted(enumerate(log.records),
                                       key=lambda e: (e[1][2], e[0])):
        first_user.setdefault(item, user)
    sequences = {}
    for user, pairs in per_user.items():
        pairs.sort(key=lambda p: p[0])  # list.sort is stable
        sequences[user] = [item for _, item in pairs]
    return SequenceCorpus(sequences, n_users=log.n_users, n_items=log.n_items,
                          first_user=first_user)


@dataclass(frozen=True)
class PrefixExample:
    user: int
    prefix: tuple[int, ...]
    target: int


@dataclass
class BucketBatch:
    prefix_length: int
    examples: list[PrefixExample]

    def __post_init__(self):
        for ex in self.examples:
            if len(ex.prefix) != self.prefix_length:
                raise DataError("bucket mixes prefix lengths")
            if PAD_ID in ex.prefix or ex.target == PAD_ID:
                raise DataError("padding id inside a bucket batch")

    def item_matrix(self) -> np.ndarray:
        return np.asarray([ex.prefix for ex in self.examples], dtype=np.int64)

    def targets(self) -> np.ndarray:
        return np.asarray([ex.target for ex in self.examples], dtype=np.int64)


def make_prefix_examples(corpus: SequenceCorpus, mode: str):
    """relative-exact: one example per training position, sum(l_train - 1)
    in total. absolute-trick: one whole-sequence example per user (the
    longest training prefix; internal positions are packed by the model)."""
    if mode not in POSITION_MODES:
        raise DataError(f"unknown mode {mode!r}")
    for u in corpus.users():
        train = corpus.train_sequence(u)
        if len(train) < 2:
            continue
        if mode == "relative-exact":
            for j in range(1, len(train)):
                yield PrefixExample(u, tuple(train[:j]), train[j])
        else:
            yield PrefixExample(u, tuple(train[:-1]), train[-1])


def bucket_batches(examples, batch_size: int, seed: int):
    """Group examples by prefix length, shuffle within buckets and shuffle
    bucket emission order, both driven by `seed`. Every example appears
    exactly once; lengths never mix."""
    buckets: dict[int, list[PrefixExample]] = {}
    for ex in examples:
        buckets.setdefault(len(ex.prefix), []).append(ex)
    rng = np.random.default_rng(seed)
    lengths = sorted(buckets)
    order = {k: rng.permutation(len(buckets[k])) for k in lengths}
    for k in rng.permutation(lengths):
        k = int(k)
        bucket = buckets[k]
        shuffled = [bucket[i] for i in order[k]]
        for start in range(0, len(shuffled), batch_size):
            yield BucketBatch(k, shuffled[start:start + batch_size])


def pad_truncate(sequence, max_len: int) -> list[int]:
    """Left-pad with id 0 to max_len; keep the most recent items when the
    sequence is longer. Retained for the absolute-trick baseline."""
    if max_len < 1:
        raise DataError("max_len must be >= 1")
    seq = list(sequence)
    if len(seq) >= max_len:
        return seq[-max_len:]
    return [PAD_ID] * (max_len - len(seq)) + seq


# --- dataset manifest and cache -------------------------------------------

@dataclass
class DatasetManifest:
    path: Path
    has_timestamps: bool


def read_manifest(path) -> DatasetManifest:
    """Plain text key=value manifest: `path` (relative to the manifest) and
    `has_timestamps`."""
    path = Path(path)
    fields: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected key = value")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key in fields:
            raise DataError(f"{path}:{lineno}: duplicate key {key!r}")
        fields[key] = value
    unknown = set(fields) - {"path", "has_timestamps"}
    if unknown:
        raise DataError(f"{path}: unknown manifest keys {sorted(unknown)}")
    if "path" not in fields:
        raise DataError(f"{path}: manifest is missing 'path'")
    has_ts = fields.get("has_timestamps", "true").lower()
    if has_ts not in ("true", "false"):
        raise DataError(f"{path}: has_timestamps must be true or false")
    data_path = Path(fields["path"])
    if not data_path.is_absolute():
        data_path = path.parent / data_path
    return DatasetManifest(path=data_path, has_timestamps=has_ts == "true")


def open_interactions(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rt", encoding="utf-8")
    return open(path, "r", encoding="utf-8")


def load_log(manifest: DatasetManifest) -> InteractionLog:
    with open_interactions(manifest.path) as fh:
        log = parse_interactions(fh)
    if log.has_timestamps != manifest.has_timestamps:
        raise DataError(f"manifest says has_timestamps="
                        f"{manifest.has_timestamps} but the data disagrees")
    return log


def save_corpus_cache(log: InteractionLog, corpus: SequenceCorpus, path):
    """Deterministic text cache: id maps plus ordered per-user sequences."""
    lines = ["# seqrec corpus cache v1"]
    lines.append("[users]")
    lines.extend(log.users.externals())
    lines.append("[items]")
    lines.extend(log.items.externals())
    lines.append("[sequences]")
    for u in corpus.users():
        lines.append(" ".join([str(u)] + [str(i) for i in corpus.sequences[u]]))
    lines.append("[first_user]")
    for item in sorted(corpus.first_user):
        lines.append(f"{item} {corpus.first_user[item]}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_corpus_cache(path) -> tuple[IdMap, IdMap, SequenceCorpus]:
    text = Path(path).read_text().splitlines()
    if not text or text[0] != "# seqrec corpus cache v1":
        raise DataError(f"{path}: not a seqrec corpus cache")
    users, items = IdMap(base=1), IdMap(base=1)
    sequences: dict[int, list[int]] = {}
    first_user: dict[int, int] = {}
    section = None
    for line in text[1:]:
        if line in ("[users]", "[items]", "[sequences]", "[first_user]"):
            section = line
            continue
        if section == "[users]":
            users.intern(line)
        elif section == "[items]":
            items.intern(line)
        elif section == "[sequences]":
            parts = [int(p) for p in line.split()]
            sequences[parts[0]] = parts[1:]
        elif section == "[first_user]":
            item, user = line.split()
            first_user[int(item)] = int(user)
        else:
            raise DataError(f"{path}: content before any section")
    corpus = SequenceCorpus(sequences, n_users=len(users), n_items=len(items),
                            first_user=first_user)
    return users, items, corpus
