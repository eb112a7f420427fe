"""Standard MIDI File ingestion and emission on a 32nd-note grid.

Scores are tick-quantized: tempo never moves the grid, it is only kept as
metadata. A quarter note is 8 grid units, a 4/4 measure 32.
"""

from __future__ import annotations

import hashlib
import logging
import math
import struct
from collections import Counter, defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

UNITS_PER_QUARTER = 8
GRID = 32  # units per whole note
MAX_MEASURE_LEN = 128
MAX_TRACKS = 32
PERCUSSION = 128
PERCUSSION_CHANNEL = 9
OUTPUT_PPQ = 480
OUTPUT_VELOCITY = 80
DEFAULT_TEMPO_BPM = 120.0


class MidiParseError(ValueError):
    """Raised for malformed or unsupported MIDI data."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


@dataclass(frozen=True, order=True)
class NoteEvent:
    onset: int
    pitch: int
    duration: int
    # velocity is carried through ingestion only; the codec drops it
    velocity: int = field(default=OUTPUT_VELOCITY, compare=False)

    def __post_init__(self):
        if not 0 <= self.pitch < 128:
            raise ValueError(f"pitch out of range: {self.pitch}")
        if self.onset < 0:
            raise ValueError(f"negative onset: {self.onset}")
        if self.duration < 1:
            raise ValueError(f"duration must be >= 1: {self.duration}")

    @property
    def end(self) -> int:
        return self.onset + self.duration

    def key(self) -> tuple[int, int, int]:
        return (self.onset, self.pitch, self.duration)


@dataclass(frozen=True)
class Track:
    instrument: int
    notes: tuple[NoteEvent, ...] = ()

    def __post_init__(self):
        if not 0 <= self.instrument <= PERCUSSION:
            raise ValueError(f"instrument out of range: {self.instrument}")


@dataclass(frozen=True)
class QuantizedScore:
    tracks: tuple[Track, ...] = ()
    measures: tuple[int, ...] = ()
    # metadata, never part of equality
    tempos: tuple[tuple[int, float], ...] = field(default=(), compare=False)
    warnings: tuple[str, ...] = field(default=(), compare=False)

    grid = GRID

    @property
    def length(self) -> int:
        return sum(self.measures)

    def measure_starts(self) -> list[int]:
        starts, t = [], 0
        for m in self.measures:
            starts.append(t)
            t += m
        return starts

    def note_count(self) -> int:
        return sum(len(t.notes) for t in self.tracks)

    def end(self) -> int:
        return max((n.end for t in self.tracks for n in t.notes), default=0)

    def validate(self, max_tracks: int = MAX_TRACKS) -> None:
        if len(self.tracks) > max_tracks:
            raise ValueError(f"{len(self.tracks)} tracks exceed maximum {max_tracks}")
        for m in self.measures:
            if not 1 <= m <= MAX_MEASURE_LEN:
                raise ValueError(f"measure length {m} outside [1, {MAX_MEASURE_LEN}]")
        if self.length < self.end():
            raise ValueError("measures do not cover all notes")


def canonical_notes(notes: Iterable[NoteEvent]) -> tuple[NoteEvent, ...]:
    """Sort, deduplicate and resolve same-pitch overlaps within one track.

    A note still sounding when the same pitch is struck again at a later
    onset is cut at that onset; this is the only form a single MIDI channel
    can represent unambiguously.
    """
    unique = {}
    for n in notes:
        unique.setdefault(n.key(), n)
    by_pitch: dict[int, list[NoteEvent]] = defaultdict(list)
    for n in unique.values():
        by_pitch[n.pitch].append(n)
    out = []
    for group in by_pitch.values():
        group.sort()
        onsets = sorted({n.onset for n in group})
        for n in group:
            i = onsets.index(n.onset)
            if i + 1 < len(onsets) and n.end > onsets[i + 1]:
                n = NoteEvent(n.onset, n.pitch, onsets[i + 1] - n.onset, n.velocity)
            out.append(n)
    dedup = {}
    for n in out:
        dedup.setdefault(n.key(), n)
    return tuple(sorted(dedup.values()))


def canonicalize(score: QuantizedScore) -> QuantizedScore:
    """Canonical form: sorted, deduplicated, overlap-free, no empty tracks,
    and enough trailing 4/4 measures to cover every note."""
    tracks = []
    for t in score.tracks:
        notes = canonical_notes(t.notes)
        if notes:
            tracks.append(Track(t.instrument, notes))
    measures = list(score.measures)
    end = max((n.end for t in tracks for n in t.notes), default=0)
    while sum(measures) < end:
        measures.append(32)
    return QuantizedScore(tuple(tracks), tuple(measures), score.tempos, score.warnings)


def quantize_time(ticks: int, ppq: int) -> int:
    """Convert MIDI ticks to 32nd-note grid units, rounding half up."""
    if ppq < 1:
        raise ValueError("ppq must be >= 1")
    return (2 * ticks * UNITS_PER_QUARTER + ppq) // (2 * ppq)


def _measure_len(numerator: int, denom_pow: int) -> int | None:
    num = numerator * 32
    den = 1 << denom_pow
    if num % den:
        return None
    return num // den


# ---------------------------------------------------------------------------
# reading


def _read_varlen(data: bytes, pos: int) -> tuple[int, int]:
    value = 0
    for _ in range(4):
        if pos >= len(data):
            raise MidiParseError("truncated variable-length quantity", pos)
        b = data[pos]
        pos += 1
        value = (value << 7) | (b & 0x7F)
        if not b & 0x80:
            return value, pos
    raise MidiParseError("variable-length quantity longer than 4 bytes", pos)


_CHANNEL_DATA_LEN = {0x80: 2, 0x90: 2, 0xA0: 2, 0xB0: 2, 0xC0: 1, 0xD0: 1, 0xE0: 2}


def _parse_track_chunk(data: bytes, start: int, end: int):
    """Yield (tick, kind, payload) for one MTrk body."""
    events = []
    pos, tick, status = start, 0, None
    while pos < end:
        delta, pos = _read_varlen(data, pos)
        tick += delta
        if pos >= end:
            raise MidiParseError("event truncated", pos)
        b = data[pos]
        if b == 0xFF:
            if pos + 2 > end:
                raise MidiParseError("meta event truncated", pos)
            mtype = data[pos + 1]
            length, p = _read_varlen(data, pos + 2)
            if p + length > end:
                raise MidiParseError("meta event overruns chunk", pos)
            events.append((tick, "meta", (mtype, data[p:p + length])))
            pos = p + length
            if mtype == 0x2F:
                break
            continue
        if b in (0xF0, 0xF7):
            length, p = _read_varlen(data, pos + 1)
            if p + length > end:
                raise MidiParseError("sysex overruns chunk", pos)
            pos = p + length
            continue
        if b & 0x80:
            status = b
            pos += 1
        elif status is None:
            raise MidiParseError("running status without prior status byte", pos)
        kind = status & 0xF0
        if kind not in _CHANNEL_DATA_LEN:
            raise MidiParseError(f"unsupported status byte 0x{status:02X}", pos)
        n = _CHANNEL_DATA_LEN[kind]
        if pos + n > end:
            raise MidiParseError("channel event truncated", pos)
        events.append((tick, "chan", (kind, status & 0x0F, bytes(data[pos:pos + n]))))
        pos += n
    return events, tick


def parse_midi(data: bytes, max_tracks: int = MAX_TRACKS) -> QuantizedScore:
    """Parse SMF type 0/1 bytes into a canonical QuantizedScore.

    Score tracks are (track chunk, channel) pairs that carry notes, in chunk
    then channel order. Channel 10 maps to instrument 128.
    """
    if len(data) < 14 or data[:4] != b"MThd":
        raise MidiParseError("missing MThd header", 0)
    hlen = struct.unpack(">I", data[4:8])[0]
    if hlen < 6 or 8 + hlen > len(data):
        raise MidiParseError("bad header length", 4)
    fmt, ntrks, division = struct.unpack(">HHH", data[8:14])
    if fmt == 2:
        raise MidiParseError("SMF type 2 is not supported", 8)
    if fmt not in (0, 1):
        raise MidiParseError(f"unknown SMF format {fmt}", 8)
    if division & 0x8000:
        raise MidiParseError("SMPTE time division is not supported", 12)
    ppq = division
    if ppq == 0:
        raise MidiParseError("division of zero ticks per quarter", 12)

    pos = 8 + hlen
    chunks = []
    while pos < len(data) and len(chunks) < ntrks:
        if pos + 8 > len(data):
            raise MidiParseError("truncated chunk header", pos)
        ctype = data[pos:pos + 4]
        clen = struct.unpack(">I", data[pos + 4:pos + 8])[0]
        body = pos + 8
        if body + clen > len(data):
            raise MidiParseError("chunk overruns file", pos)
        if ctype == b"MTrk":
            chunks.append(_parse_track_chunk(data, body, body + clen))
        pos = body + clen
    if len(chunks) < ntrks:
        raise MidiParseError(f"expected {ntrks} tracks, found {len(chunks)}", pos)

    warnings: list[str] = []
    time_sigs: list[tuple[int, int]] = []
    tempos: list[tuple[int, float]] = []
    last_tick = 0
    programs = [0] * 16
    raw_tracks: dict[tuple[int, int], list[tuple[int, int, int, int]]] = {}
    track_programs: dict[tuple[int, int], int] = {}

    for ci, (events, end_tick) in enumerate(chunks):
        last_tick = max(last_tick, end_tick)
        open_notes: dict[tuple[int, int], deque] = defaultdict(deque)
        for tick, kind, payload in events:
            if kind == "meta":
                mtype, body = payload
                if mtype == 0x58 and len(body) >= 2:
                    length = _measure_len(body[0], body[1])
                    if length is None or not 1 <= length <= MAX_MEASURE_LEN:
                        raise MidiParseError(
                            f"time signature {body[0]}/{1 << body[1]} is unrepresentable")
                    time_sigs.append((quantize_time(tick, ppq), length))
                elif mtype == 0x51 and len(body) == 3:
                    usec = int.from_bytes(body, "big")
                    if usec:
                        tempos.append((quantize_time(tick, ppq), 60e6 / usec))
                continue
            status, ch, args = payload
            if status == 0xC0:
                programs[ch] = args[0] & 0x7F
                continue
            if status not in (0x80, 0x90):
                continue
            pitch, vel = args[0] & 0x7F, args[1] & 0x7F
            key = (ci, ch)
            if status == 0x90 and vel > 0:
                if key not in raw_tracks:
                    raw_tracks[key] = []
                    track_programs[key] = PERCUSSION if ch == PERCUSSION_CHANNEL else programs[ch]
                open_notes[(ch, pitch)].append((tick, vel))
            else:
                queue = open_notes.get((ch, pitch))
                if queue:
                    start, v = queue.popleft()
                    raw_tracks[key].append((pitch, start, tick, v))
        for (ch, pitch), queue in open_notes.items():
            for start, v in queue:
                warnings.append(f"unmatched note-on pitch {pitch} channel {ch} at tick {start}")
                raw_tracks[(ci, ch)].append((pitch, start, end_tick, v))

    tracks = []
    for key in sorted(raw_tracks):
        notes = [
            NoteEvent(quantize_time(s, ppq), p, max(1, quantize_time(e - s, ppq)), v)
            for p, s, e, v in raw_tracks[key]
        ]
        notes_c = canonical_notes(notes)
        if notes_c:
            tracks.append(Track(track_programs[key], notes_c))
    if len(tracks) > max_tracks:
        raise MidiParseError(f"{len(tracks)} tracks exceed maximum {max_tracks}")

    end = max(quantize_time(last_tick, ppq),
              max((n.end for t in tracks for n in t.notes), default=0))
    measures = _measures_from_signatures(time_sigs, end)
    for w in warnings:
        logger.warning(w)
    return QuantizedScore(tuple(tracks), tuple(measures), tuple(tempos), tuple(warnings))


def _measures_from_signatures(time_sigs: list[tuple[int, int]], end: int) -> list[int]:
    # a signature change takes effect at the next measure boundary at or after it
    sigs = sorted(time_sigs, key=lambda s: s[0])
    measures, t, current, i = [], 0, 32, 0
    while t < end:
        while i < len(sigs) and sigs[i][0] <= t:
            current = sigs[i][1]
            i += 1
        measures.append(current)
        t += current
    return measures


def read_midi(path: str | Path, max_tracks: int = MAX_TRACKS) -> QuantizedScore:
    return parse_midi(Path(path).read_bytes(), max_tracks)


# ---------------------------------------------------------------------------
# writing


def _varlen(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


def _time_signature(length: int) -> tuple[int, int]:
    """Return (numerator, log2 denominator) for a measure length in grid units."""
    for dpow in (2, 3, 4, 5):
        per_unit = 32 >> dpow
        if length % per_unit == 0:
            return length // per_unit, dpow
    raise AssertionError("unreachable")


def _chunk(events: list[tuple[int, int, bytes]]) -> bytes:
    events.sort(key=lambda e: (e[0], e[1]))
    body, last = bytearray(), 0
    for tick, _, msg in events:
        body += _varlen(tick - last) + msg
        last = tick
    return b"MTrk" + struct.pack(">I", len(body)) + bytes(body)


def write_midi(score: QuantizedScore, tempo_bpm: float = DEFAULT_TEMPO_BPM) -> bytes:
    """Render a score as SMF type 1 at 480 ppq, one MIDI track per score track."""
    score.validate(max_tracks=max(MAX_TRACKS, len(score.tracks)))
    unit = OUTPUT_PPQ // UNITS_PER_QUARTER
    total = score.length * unit

    usec = int(round(60e6 / tempo_bpm))
    conductor = [(0, 0, b"\xff\x51\x03" + usec.to_bytes(3, "big"))]
    prev = None
    for start, length in zip(score.measure_starts(), score.measures):
        if length != prev:
            num, dpow = _time_signature(length)
            conductor.append((start * unit, 0, bytes([0xFF, 0x58, 0x04, num, dpow, 24, 8])))
            prev = length
    if not score.measures:
        conductor.append((0, 0, bytes([0xFF, 0x58, 0x04, 4, 2, 24, 8])))
    conductor.append((total, 9, b"\xff\x2f\x00"))
    chunks = [_chunk(conductor)]

    melodic = [c for c in range(16) if c != PERCUSSION_CHANNEL]
    n_melodic = sum(1 for t in score.tracks if t.instrument != PERCUSSION)
    if n_melodic > len(melodic):
        logger.warning("%d melodic tracks share %d channels", n_melodic, len(melodic))
    mi = 0
    for track in score.tracks:
        if track.instrument == PERCUSSION:
            ch = PERCUSSION_CHANNEL
            events = []
        else:
            ch = melodic[mi % len(melodic)]
            mi += 1
            events = [(0, 0, bytes([0xC0 | ch, track.instrument]))]
        for n in track.notes:
            # offs sort before ons at the same tick so re-strikes pair correctly
            events.append((n.onset * unit, 2, bytes([0x90 | ch, n.pitch, OUTPUT_VELOCITY])))
            events.append((n.end * unit, 1, bytes([0x80 | ch, n.pitch, 0])))
        end = max(total, max((n.end * unit for n in track.notes), default=0))
        events.append((end, 9, b"\xff\x2f\x00"))
        chunks.append(_chunk(events))

    header = b"MThd" + struct.pack(">IHHH", 6, 1, len(chunks), OUTPUT_PPQ)
    return header + b"".join(chunks)


# ---------------------------------------------------------------------------
# corpus statistics


@dataclass
class CorpusStats:
    file_count: int = 0
    note_count: int = 0
    token_lengths: Counter = field(default_factory=Counter)
    duplicates: list[list[str]] = field(default_factory=list)
    time_signatures: Counter = field(default_factory=Counter)
    errors: list[tuple[str, str]] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [
            f"files\t{self.file_count}",
            f"notes\t{self.note_count}",
            f"errors\t{len(self.errors)}",
            f"duplicate_groups\t{len(self.duplicates)}",
        ]
        for bucket in sorted(self.token_lengths):
            lines.append(f"token_length[{bucket}]\t{self.token_lengths[bucket]}")
        for length in sorted(self.time_signatures):
            num, dpow = _time_signature(length)
            lines.append(f"time_signature[{num}/{1 << dpow}]\t{self.time_signatures[length]}")
        for group in self.duplicates:
            lines.append("duplicate\t" + "\t".join(group))
        for path, msg in self.errors:
            lines.append(f"error\t{path}\t{msg}")
        return "\n".join(lines) + "\n"


def content_hash(score: QuantizedScore) -> str:
    h = hashlib.sha256()
    notes = sorted((t.instrument, *n.key()) for t in score.tracks for n in t.notes)
    for row in notes:
        h.update(struct.pack(">4i", *row))
    return h.hexdigest()


def _length_bucket(n: int) -> str:
    if n <= 0:
        return "0"
    lo = 1 << int(math.log2(n))
    return f"{lo}-{2 * lo - 1}"


def corpus_stats(paths: Sequence[str | Path]) -> CorpusStats:
    """Scan MIDI files; unparseable files are recorded, never fatal.

    Token lengths are measured with the merge-free MMR encoding.
    """
    from .chords import detect_measure_chords
    from .codec import encode

    stats = CorpusStats()
    by_hash: dict[str, list[str]] = defaultdict(list)
    for path in paths:
        try:
            score = read_midi(path)
            tokens = encode(score, detect_measure_chords(score))
        except (OSError, ValueError) as exc:
            stats.errors.append((str(path), str(exc)))
            continue
        stats.file_count += 1
        stats.note_count += score.note_count()
        stats.token_lengths[_length_bucket(len(tokens))] += 1
        stats.time_signatures.update(score.measures)
        by_hash[content_hash(score)].append(str(path))
    stats.duplicates = [g for g in by_hash.values() if len(g) > 1]
    return stats


# ---------------------------------------------------------------------------
# score cache


def score_to_json(score: QuantizedScore) -> str:
    import json

    doc = {
        "measures": list(score.measures),
        "tracks": [
            {"instrument": t.instrument,
             "notes": [[n.onset, n.pitch, n.duration, n.velocity] for n in t.notes]}
            for t in score.tracks
        ],
    }
    return json.dumps(doc, separators=(",", ":"), sort_keys=True) + "\n"


def score_from_json(text: str) -> QuantizedScore:
    import json

    doc = json.loads(text)
    tracks = tuple(
        Track(t["instrument"], tuple(NoteEvent(*n) for n in t["notes"])) for t in doc["tracks"]
    )
    score = QuantizedScore(tracks, tuple(doc["measures"]))
    score.validate(max_tracks=len(tracks))
    return score
