"""Trace data types, JSONL trace I/O and simple dataset statistics.

A trace is a set of per-UE streams.  Each stream is an ordered list of
``(timestamp, event_type)`` pairs, timestamps in seconds relative to the
start of the stream.
"""
from __future__ import annotations

import enum
import json
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

DEVICE_TYPES = ("phone", "connected_car", "tablet")


class TraceFormatError(ValueError):
    """Raised for malformed or semantically invalid trace content."""


class Generation(str, enum.Enum):
    LTE = "4g"
    NR = "5g"

    @property
    def events(self) -> tuple[str, ...]:
        return _VOCAB[self]

    @property
    def vocab_size(self) -> int:
        return len(_VOCAB[self])

    def index(self, event_type: str) -> int:
        try:
            return _VOCAB_INDEX[self][event_type]
        except KeyError:
            raise TraceFormatError(
                f"unknown event type {event_type!r} for generation {self.value}"
            ) from None

    @classmethod
    def parse(cls, value: "str | Generation") -> "Generation":
        if isinstance(value, Generation):
            return value
        v = str(value).strip().lower()
        for g in cls:
            if v in (g.value, g.name.lower()):
                return g
        raise ValueError(f"unknown generation {value!r} (expected '4g' or '5g')")


_VOCAB = {
    Generation.LTE: ("ATCH", "DTCH", "SRV_REQ", "S1_CONN_REL", "HO", "TAU"),
    Generation.NR: ("REGISTER", "DEREGISTER", "SRV_REQ", "AN_REL", "HO"),
}
_VOCAB_INDEX = {g: {e: i for i, e in enumerate(v)} for g, v in _VOCAB.items()}


class Event(NamedTuple):
    timestamp: float
    event_type: str


@dataclass(frozen=True)
class Stream:
    ue_id: str
    device_type: str
    events: tuple[Event, ...]

    def __post_init__(self):
        if not isinstance(self.events, tuple):
            object.__setattr__(self, "events", tuple(Event(float(t), e) for t, e in self.events))
        if len(self.events) == 0:
            raise TraceFormatError(f"stream {self.ue_id!r} has no events")
        if self.device_type not in DEVICE_TYPES:
            raise TraceFormatError(
                f"stream {self.ue_id!r}: unknown device type {self.device_type!r}"
            )
        prev = 0.0
        for k, (t, _) in enumerate(self.events):
            if not (math.isfinite(t) and t >= 0):
                raise TraceFormatError(
                    f"stream {self.ue_id!r}: event {k} has invalid timestamp {t!r}"
                )
            if t < prev:
                raise TraceFormatError(
                    f"stream {self.ue_id!r}: timestamps out of order at event {k} "
                    f"({t!r} < {prev!r})"
                )
            prev = t

    def __len__(self) -> int:
        return len(self.events)

    @property
    def timestamps(self) -> list[float]:
        return [e.timestamp for e in self.events]

    @property
    def event_types(self) -> list[str]:
        return [e.event_type for e in self.events]


@dataclass(frozen=True)
class TraceDataset:
    generation: Generation
    streams: tuple[Stream, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "generation", Generation.parse(self.generation))
        if not isinstance(self.streams, tuple):
            object.__setattr__(self, "streams", tuple(self.streams))
        vocab = _VOCAB_INDEX[self.generation]
        for s in self.streams:
            for e in s.events:
                if e.event_type not in vocab:
                    raise TraceFormatError(
                        f"stream {s.ue_id!r}: event type {e.event_type!r} is not a "
                        f"{self.generation.value} event"
                    )

    def __len__(self) -> int:
        return len(self.streams)

    def __iter__(self):
        return iter(self.streams)

    def filter(self, pred) -> "TraceDataset":
        return TraceDataset(self.generation, tuple(s for s in self.streams if pred(s)))

    def n_events(self) -> int:
        return sum(len(s) for s in self.streams)


def _parse_line(obj, lineno: int) -> Stream:
    if not isinstance(obj, dict):
        raise TraceFormatError(f"line {lineno}: expected a JSON object")
    try:
        ue_id = obj["ue_id"]
        device_type = obj["device_type"]
        raw = obj["events"]
    except KeyError as exc:
        raise TraceFormatError(f"line {lineno}: missing field {exc.args[0]!r}") from None
    if not isinstance(ue_id, str) or not isinstance(device_type, str):
        raise TraceFormatError(f"line {lineno}: ue_id and device_type must be strings")
    if not isinstance(raw, list):
        raise TraceFormatError(f"line {lineno}: events must be an array")
    events = []
    for k, item in enumerate(raw):
        if (
            not isinstance(item, list)
            or len(item) != 2
            or isinstance(item[0], bool)
            or not isinstance(item[0], (int, float))
            or not isinstance(item[1], str)
        ):
            raise TraceFormatError(
                f"line {lineno}: event {k} must be [seconds, event_type], got {item!r}"
            )
        events.append(Event(float(item[0]), item[1]))
    return Stream(ue_id, device_type, tuple(events))


def load_trace(path: str | os.PathLike, generation: "str | Generation") -> TraceDataset:
    generation = Generation.parse(generation)
    vocab = _VOCAB_INDEX[generation]
    streams = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            try:
                stream = _parse_line(obj, lineno)
            except TraceFormatError as exc:
                msg = str(exc)
                if not msg.startswith("line "):
                    msg = f"line {lineno}: {msg}"
                raise TraceFormatError(msg) from None
            for e in stream.events:
                if e.event_type not in vocab:
                    raise TraceFormatError(
                        f"line {lineno}: unknown event type {e.event_type!r} "
                        f"for generation {generation.value}"
                    )
            streams.append(stream)
    return TraceDataset(generation, tuple(streams))


def stream_to_json(stream: Stream) -> str:
    # json uses repr() for floats, which round-trips exactly
    return json.dumps(
        {
            "ue_id": stream.ue_id,
            "device_type": stream.device_type,
            "events": [[e.timestamp, e.event_type] for e in stream.events],
        },
        separators=(",", ":"),
    )


def save_trace(dataset: TraceDataset, path: str | os.PathLike) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for s in dataset.streams:
                fh.write(stream_to_json(s))
                fh.write("\n")
    except OSError as exc:
        raise OSError(f"cannot write trace to {os.fspath(path)!r}: {exc.strerror or exc}") from exc


def interarrivals(stream: Stream) -> list[float]:
    ts = stream.timestamps
    return [0.0] + [ts[k] - ts[k - 1] for k in range(1, len(ts))]


def initial_event_distribution(dataset: TraceDataset) -> dict[str, float]:
    """Share of streams starting with each event type (zeros included)."""
    if len(dataset) == 0:
        raise ValueError("initial event distribution of an empty dataset is undefined")
    counts = Counter(s.events[0].event_type for s in dataset.streams)
    n = len(dataset)
    return {e: counts.get(e, 0) / n for e in dataset.generation.events}


def validate_distribution(dist: dict[str, float], generation: Generation) -> dict[str, float]:
    for e, p in dist.items():
        generation.index(e)
        if not (p >= 0 and math.isfinite(p)):
            raise ValueError(f"negative or non-finite probability for {e!r}: {p!r}")
    total = math.fsum(dist.values())
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"initial event distribution sums to {total!r}, not 1")
    return {e: float(dist.get(e, 0.0)) for e in generation.events}


def event_counts(streams: Iterable[Stream]) -> Counter:
    c: Counter = Counter()
    for s in streams:
        c.update(e.event_type for e in s.events)
    return c


def make_stream(ue_id: str, events: Sequence[tuple[float, str]], device_type: str = "phone") -> Stream:
    return Stream(ue_id, device_type, tuple(Event(float(t), e) for t, e in events))
