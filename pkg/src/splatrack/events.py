"""Event streams and adaptive event keyframes."""

from dataclasses import dataclass
import gzip
import io

import numpy as np


class EventFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Event:
    t: float
    x: int
    y: int
    polarity: int


class EventArray:
    """Columnar event stream: ``t`` float64, ``x``/``y`` int32, ``p`` int8 in {-1, +1}."""

    def __init__(self, t, x, y, p):
        self.t = np.asarray(t, dtype=np.float64)
        self.x = np.asarray(x, dtype=np.int32)
        self.y = np.asarray(y, dtype=np.int32)
        self.p = np.asarray(p, dtype=np.int8)
        n = self.t.shape[0]
        if not (self.x.shape[0] == self.y.shape[0] == self.p.shape[0] == n):
            raise ValueError("event columns differ in length")

    @classmethod
    def empty(cls):
        return cls(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0))

    @classmethod
    def from_events(cls, events):
        events = list(events)
        return cls([e.t for e in events], [e.x for e in events],
                   [e.y for e in events], [e.polarity for e in events])

    def __len__(self):
        return self.t.shape[0]

    def __getitem__(self, i):
        if isinstance(i, slice):
            return EventArray(self.t[i], self.x[i], self.y[i], self.p[i])
        return Event(float(self.t[i]), int(self.x[i]), int(self.y[i]), int(self.p[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other):
        return (isinstance(other, EventArray) and len(self) == len(other)
                and np.array_equal(self.t, other.t) and np.array_equal(self.x, other.x)
                and np.array_equal(self.y, other.y) and np.array_equal(self.p, other.p))

    def validate(self, width=None, height=None):
        if np.any(np.diff(self.t) < 0):
            bad = int(np.flatnonzero(np.diff(self.t) < 0)[0]) + 1
            raise EventFormatError(f"event {bad + 1}: timestamp decreases")
        if not np.all((self.p == 1) | (self.p == -1)):
            raise EventFormatError("polarity must be -1 or +1")
        if width is not None and height is not None:
            bad = (self.x < 0) | (self.x >= width) | (self.y < 0) | (self.y >= height)
            if np.any(bad):
                i = int(np.flatnonzero(bad)[0])
                raise EventFormatError(
                    f"event {i + 1}: pixel ({self.x[i]}, {self.y[i]}) outside {width}x{height}")
        return self


def _open_text(path, mode):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode + "t", encoding="ascii")
    return open(path, mode, encoding="ascii")


def _scan_lines(lines, width, height):
    """Slow path: locate the first bad line for a precise error message."""
    t_prev = -np.inf
    rows = []
    for lineno, line in enumerate(lines, start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.split()
        if len(parts) != 4:
            raise EventFormatError(f"line {lineno}: expected 't x y p', got {s!r}")
        try:
            t = float(parts[0])
            x, y, p = int(parts[1]), int(parts[2]), int(parts[3])
        except ValueError:
            raise EventFormatError(f"line {lineno}: cannot parse {s!r}") from None
        if p not in (-1, 0, 1):
            raise EventFormatError(f"line {lineno}: polarity {p} not in {{-1, 0, 1}}")
        if width is not None and not (0 <= x < width and 0 <= y < height):
            raise EventFormatError(f"line {lineno}: pixel ({x}, {y}) out of bounds")
        if t < t_prev:
            raise EventFormatError(f"line {lineno}: timestamp {t} precedes {t_prev}")
        t_prev = t
        rows.append((t, x, y, p))
    return rows


def parse_events(path, width=None, height=None):
    """Read a ``t x y p`` text file (optionally gzip) into an :class:`EventArray`.

    Polarity ``0`` maps to ``-1``.  Any malformed or out-of-order line raises
    :class:`EventFormatError` naming the line number.
    """
    with _open_text(path, "r") as fh:
        text = fh.read()
    try:
        data = np.loadtxt(io.StringIO(text), comments="#", ndmin=2)
        if data.size and data.shape[1] != 4:
            raise ValueError
        if data.size and not np.all(np.isin(data[:, 3], (-1, 0, 1))):
            raise ValueError
        if data.size and np.any(data[:, 1:3] != np.round(data[:, 1:3])):
            raise ValueError
    except ValueError:
        _scan_lines(text.splitlines(), width, height)
        raise EventFormatError(f"{path}: malformed event file") from None
    if data.size == 0:
        return EventArray.empty()
    p = data[:, 3].astype(np.int8)
    p[p == 0] = -1
    events = EventArray(data[:, 0], data[:, 1], data[:, 2], p)
    try:
        events.validate(width, height)
    except EventFormatError:
        _scan_lines(text.splitlines(), width, height)
        raise
    return events


def write_events(events, path):
    """Write events as ``t x y p`` lines with round-trip exact timestamps."""
    with _open_text(path, "w") as fh:
        for t, x, y, p in zip(events.t.tolist(), events.x.tolist(),
                              events.y.tolist(), events.p.tolist()):
            fh.write(f"{t!r} {x} {y} {p}\n")


@dataclass(frozen=True)
class FrontendConfig:
    events_per_keyframe: int = 15000
    width: int = 346
    height: int = 260

    def __post_init__(self):
        if self.events_per_keyframe < 1:
            raise ValueError("events_per_keyframe must be at least 1")


@dataclass(frozen=True)
class EventKeyframe:
    """Per-pixel polarity sums of N consecutive events (threshold counts)."""

    delta_Ie: np.ndarray
    tau: float
    delta_tau: float
    count: int
    first_index: int = 0


class EventCursor:
    """Single-consumer read position in an event stream."""

    def __init__(self, events, start=0):
        self.events = events
        self.position = start

    @property
    def remaining(self):
        return len(self.events) - self.position


def accumulate(events, width, height):
    img = np.zeros((height, width))
    np.add.at(img, (events.y, events.x), events.p.astype(np.float64))
    return img


def next_keyframe(cursor, cfg):
    """Consume exactly ``cfg.events_per_keyframe`` events; ``None`` at end of stream."""
    n = cfg.events_per_keyframe
    if cursor.remaining < n:
        return None
    start = cursor.position
    chunk = cursor.events[start:start + n]
    cursor.position += n
    t0, t1 = float(chunk.t[0]), float(chunk.t[-1])
    delta_tau = t1 - t0
    return EventKeyframe(accumulate(chunk, cfg.width, cfg.height), t0 + 0.5 * delta_tau,
                         delta_tau, n, start)


def iter_keyframes(events, cfg):
    cursor = EventCursor(events)
    while True:
        kf = next_keyframe(cursor, cfg)
        if kf is None:
            return
        yield kf


def polarity_free(kf):
    """Absolute value of the accumulated image (all polarities treated as +1)."""
    img = kf.delta_Ie if isinstance(kf, EventKeyframe) else np.asarray(kf)
    return np.abs(img)
