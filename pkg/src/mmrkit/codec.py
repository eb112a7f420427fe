"""MMR token sequences: encoding, decoding, 3-D positions and the grammar.

Grammar::

    score    := BOS measure* EOS
    measure  := BOM CHORD (CC posgroup+)* EOM
    posgroup := POS note+

Each step is a :class:`TokenTuple` carrying four aligned channels (event,
duration, track ordinal, instrument) plus a (measure, onset, track) triple.
The track ordinal of a CC group is the 1-based index of the score track,
stable across measures.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .bpe import MergeVocab
from .chords import N_CHORD_LABELS, NO_CHORD, ChordLabel
from .score_io import MAX_MEASURE_LEN, MAX_TRACKS, NoteEvent, QuantizedScore, Track, canonical_notes

# event id layout
BOS, EOS, EOM, CC = 0, 1, 2, 3
BOM_BASE = 4  # BOM_i -> BOM_BASE + i - 1, i in [1, 128]
CHORD_BASE = BOM_BASE + MAX_MEASURE_LEN  # 132
POS_BASE = CHORD_BASE + N_CHORD_LABELS  # 265
PS_BASE = POS_BASE + MAX_MEASURE_LEN  # 393
N_STRUCTURAL = PS_BASE

MAX_DURATION = 64
DUR_NULL = 0
DUR_PAD = MAX_DURATION + 1
N_DURATIONS = MAX_DURATION + 2

INST_MASK = 129
INST_NULL = 130
N_INSTRUMENTS = 131

N_TRACK_ORDS = MAX_TRACKS + 1


class GrammarError(ValueError):
    def __init__(self, index: int, expected: str, got: str):
        super().__init__(f"token {index}: expected {expected}, got {got}")
        self.index = index
        self.expected = expected


def bom(length: int) -> int:
    return BOM_BASE + length - 1


def chord_event(label: ChordLabel) -> int:
    return CHORD_BASE + label.index


def pos(j: int) -> int:
    return POS_BASE + j


def pitchset(k: int) -> int:
    return PS_BASE + k


def event_kind(event: int) -> str:
    if event == BOS:
        return "BOS"
    if event == EOS:
        return "EOS"
    if event == EOM:
        return "EOM"
    if event == CC:
        return "CC"
    if BOM_BASE <= event < CHORD_BASE:
        return "BOM"
    if CHORD_BASE <= event < POS_BASE:
        return "CHORD"
    if POS_BASE <= event < PS_BASE:
        return "POS"
    if event >= PS_BASE:
        return "PS"
    raise ValueError(f"bad event id {event}")


def event_value(event: int) -> int:
    kind = event_kind(event)
    if kind == "BOM":
        return event - BOM_BASE + 1
    if kind == "CHORD":
        return event - CHORD_BASE
    if kind == "POS":
        return event - POS_BASE
    if kind == "PS":
        return event - PS_BASE
    return 0


def event_name(event: int) -> str:
    kind = event_kind(event)
    if kind in ("BOS", "EOS", "EOM", "CC"):
        return kind
    if kind == "CHORD":
        return "CHORD_" + ChordLabel.from_index(event_value(event)).name
    return f"{kind}_{event_value(event)}"


def parse_event(name: str) -> int:
    fixed = {"BOS": BOS, "EOS": EOS, "EOM": EOM, "CC": CC}
    if name in fixed:
        return fixed[name]
    kind, _, value = name.partition("_")
    if kind == "CHORD":
        return chord_event(ChordLabel.from_name(value))
    n = int(value)
    if kind == "BOM" and 1 <= n <= MAX_MEASURE_LEN:
        return bom(n)
    if kind == "POS" and 0 <= n < MAX_MEASURE_LEN:
        return pos(n)
    if kind == "PS" and n >= 0:
        return pitchset(n)
    raise ValueError(f"unknown event {name!r}")


@dataclass(frozen=True)
class TokenTuple:
    event: int
    dur: int = DUR_NULL
    track: int = 0
    inst: int = INST_NULL
    pos3d: tuple[int, int, int] = (0, 0, 0)

    @property
    def kind(self) -> str:
        return event_kind(self.event)

    def check_channels(self) -> None:
        kind = self.kind
        if (kind == "PS") != (self.dur != DUR_NULL):
            raise ValueError(f"{event_name(self.event)}: duration channel {self.dur} invalid")
        if kind == "PS" and not 1 <= self.dur <= MAX_DURATION:
            raise ValueError(f"duration {self.dur} outside [1, {MAX_DURATION}]")
        if (kind in ("CC", "PS")) != (self.inst != INST_NULL):
            raise ValueError(f"{event_name(self.event)}: instrument channel {self.inst} invalid")
        if kind in ("CC", "PS") and not 0 <= self.inst <= 128:
            raise ValueError(f"instrument {self.inst} out of range")


TokenSeq = list  # list[TokenTuple]


# ---------------------------------------------------------------------------
# grammar


class Phase(Enum):
    START = "start"
    MEASURE = "expect-measure"
    CHORD = "expect-chord"
    TRACK_OR_EOM = "expect-track-or-EOM"
    POS = "expect-pos"
    NOTE = "expect-note"
    NOTE_OR_NEXT = "expect-note-or-next"
    DONE = "done"


# tokens still needed to reach EOS from each phase
_CLOSE_COST = {
    Phase.START: 2,
    Phase.MEASURE: 1,
    Phase.CHORD: 3,
    Phase.TRACK_OR_EOM: 2,
    Phase.POS: 4,
    Phase.NOTE: 3,
    Phase.NOTE_OR_NEXT: 2,
    Phase.DONE: 0,
}
_PHASE_AFTER = {
    "BOS": Phase.MEASURE,
    "EOS": Phase.DONE,
    "BOM": Phase.CHORD,
    "CHORD": Phase.TRACK_OR_EOM,
    "CC": Phase.POS,
    "POS": Phase.NOTE,
    "PS": Phase.NOTE_OR_NEXT,
    "EOM": Phase.MEASURE,
}


@dataclass
class DecoderState:
    """Grammar position plus the counters needed for 3-D positions."""

    phase: Phase = Phase.START
    measure: int = 0
    measure_len: int = 0
    track: int = 0
    instrument: int = INST_NULL
    onset_ord: int = 0
    last_pos: int = -1
    used_tracks: set[int] = field(default_factory=set)
    length: int = 0

    def copy(self) -> "DecoderState":
        return replace(self, used_tracks=set(self.used_tracks))

    @property
    def can_open_track(self) -> bool:
        return len(self.used_tracks) < MAX_TRACKS

    def admissible_kinds(self) -> tuple[str, ...]:
        p = self.phase
        if p is Phase.START:
            return ("BOS",)
        if p is Phase.MEASURE:
            return ("BOM", "EOS")
        if p is Phase.CHORD:
            return ("CHORD",)
        if p is Phase.TRACK_OR_EOM:
            return ("CC", "EOM") if self.can_open_track else ("EOM",)
        if p is Phase.POS:
            return ("POS",)
        if p is Phase.NOTE:
            return ("PS",)
        if p is Phase.NOTE_OR_NEXT:
            kinds = ["PS"]
            if self.last_pos + 1 < self.measure_len:
                kinds.append("POS")
            if self.can_open_track:
                kinds.append("CC")
            kinds.append("EOM")
            return tuple(kinds)
        return ()

    def pos3d(self, tok: TokenTuple) -> tuple[int, int, int]:
        """Triple for ``tok`` if it were emitted next (state not modified)."""
        kind = tok.kind
        if kind in ("BOS", "EOS"):
            return (0, 0, 0)
        if kind == "BOM":
            return (self.measure + 1, 0, 0)
        if kind in ("CHORD", "EOM"):
            return (self.measure, 0, 0)
        if kind == "CC":
            return (self.measure, 0, tok.track)
        if kind == "POS":
            return (self.measure, self.onset_ord + 1, self.track)
        return (self.measure, self.onset_ord, self.track)

    def advance(self, tok: TokenTuple, n_pitchsets: int | None = None) -> None:
        """Consume one tuple, raising GrammarError if it is not admissible."""
        index = self.length
        kind = tok.kind
        allowed = self.admissible_kinds()
        if kind not in allowed:
            raise GrammarError(index, "|".join(allowed) or "end of sequence", event_name(tok.event))
        value = event_value(tok.event)
        if kind == "POS":
            if not self.last_pos < value < self.measure_len:
                raise GrammarError(
                    index, f"POS in ({self.last_pos}, {self.measure_len})", event_name(tok.event))
        elif kind == "PS" and n_pitchsets is not None and value >= n_pitchsets:
            raise GrammarError(index, f"PS below {n_pitchsets}", event_name(tok.event))
        elif kind == "CC":
            if not 1 <= tok.track <= MAX_TRACKS or tok.track in self.used_tracks:
                raise GrammarError(index, "an unused track ordinal", f"CC track {tok.track}")
        try:
            tok.check_channels()
        except ValueError as exc:
            raise GrammarError(index, "valid channels", str(exc)) from None

        if kind == "BOM":
            self.measure += 1
            self.measure_len = value
            self.used_tracks = set()
            self.track = 0
        elif kind == "CC":
            self.track = tok.track
            self.instrument = tok.inst
            self.used_tracks.add(tok.track)
            self.onset_ord = 0
            self.last_pos = -1
        elif kind == "POS":
            self.onset_ord += 1
            self.last_pos = value
        elif kind == "PS" and tok.track != self.track:
            raise GrammarError(index, f"track {self.track}", f"track {tok.track}")
        elif kind == "EOM":
            self.track = 0
        self.phase = _PHASE_AFTER[kind]
        self.length += 1


_KIND_RANGES = {
    "BOS": (BOS, BOS + 1),
    "EOS": (EOS, EOS + 1),
    "EOM": (EOM, EOM + 1),
    "CC": (CC, CC + 1),
    "BOM": (BOM_BASE, CHORD_BASE),
    "CHORD": (CHORD_BASE, POS_BASE),
}


def grammar_mask(state: DecoderState, n_pitchsets: int, budget: int | None = None) -> np.ndarray:
    """Boolean mask over event ids ``[0, N_STRUCTURAL + n_pitchsets)``.

    With ``budget`` (tuples still allowed including this one), events that
    would leave too little room to close the sequence are excluded.
    """
    mask = np.zeros(N_STRUCTURAL + n_pitchsets, dtype=bool)
    for kind in state.admissible_kinds():
        if budget is not None and _CLOSE_COST[_PHASE_AFTER[kind]] > budget - 1:
            continue
        if kind == "POS":
            mask[pos(state.last_pos + 1):pos(state.measure_len)] = True
        elif kind == "PS":
            mask[PS_BASE:] = True
        else:
            lo, hi = _KIND_RANGES[kind]
            mask[lo:hi] = True
    return mask


def admissible_events(state: DecoderState, n_pitchsets: int) -> set[int]:
    return set(np.flatnonzero(grammar_mask(state, n_pitchsets)).tolist())


def validate(tokens: Sequence[TokenTuple], n_pitchsets: int | None = None,
             complete: bool = True) -> DecoderState:
    state = DecoderState()
    for tok in tokens:
        state.advance(tok, n_pitchsets)
    if complete and state.phase is not Phase.DONE:
        raise GrammarError(len(tokens), "|".join(state.admissible_kinds()), "end of sequence")
    return state


# ---------------------------------------------------------------------------
# encode / decode


def assign_positions(tokens: Sequence[TokenTuple]) -> list[tuple[int, int, int]]:
    """3-D (measure, onset ordinal, track ordinal) triple for every tuple.

    Structural tokens of measure m get (m, 0, 0), a CC (m, 0, r); a POS and
    the notes under it share (m, o, r) with o the 1-based rank of the onset
    among the occupied onsets of that track in that measure.
    """
    state = DecoderState()
    out = []
    for tok in tokens:
        out.append(state.pos3d(tok))
        state.advance(tok)
    return out


def with_positions(tokens: Sequence[TokenTuple]) -> list[TokenTuple]:
    return [replace(t, pos3d=p) for t, p in zip(tokens, assign_positions(tokens))]


def encode(score: QuantizedScore, chords: Sequence[ChordLabel] | None = None,
           vocab: MergeVocab | None = None) -> list[TokenTuple]:
    """Serialize a canonical score: measures in time order, tracks in score
    order, onsets ascending, concurrent tokens by ascending lowest pitch."""
    vocab = vocab or _SINGLETONS
    if chords is None:
        chords = [NO_CHORD] * len(score.measures)
    if len(chords) != len(score.measures):
        raise ValueError(f"{len(chords)} chords for {len(score.measures)} measures")
    if len(score.tracks) > MAX_TRACKS:
        raise ValueError(f"{len(score.tracks)} tracks are unrepresentable (max {MAX_TRACKS})")
    for m in score.measures:
        if not 1 <= m <= MAX_MEASURE_LEN:
            raise ValueError(f"measure length {m} is unrepresentable")
    if score.end() > score.length:
        raise ValueError("measures do not cover all notes")

    starts = score.measure_starts()
    # per measure -> per track -> onset -> duration -> pitches
    grid: list[dict[int, dict[int, dict[int, set[int]]]]] = [defaultdict(dict) for _ in starts]
    for ti, track in enumerate(score.tracks):
        mi = 0
        for n in track.notes:
            while mi + 1 < len(starts) and starts[mi + 1] <= n.onset:
                mi += 1
            onsets = grid[mi][ti]
            onsets.setdefault(n.onset, defaultdict(set))[min(n.duration, MAX_DURATION)].add(n.pitch)

    out = [TokenTuple(BOS)]
    for mi, (start, length) in enumerate(zip(starts, score.measures)):
        out.append(TokenTuple(bom(length)))
        out.append(TokenTuple(chord_event(chords[mi])))
        for ti in sorted(grid[mi]):
            inst = score.tracks[ti].instrument
            r = ti + 1
            out.append(TokenTuple(CC, track=r, inst=inst))
            for onset in sorted(grid[mi][ti]):
                out.append(TokenTuple(pos(onset - start), track=r))
                items = []
                for dur, pitches in grid[mi][ti][onset].items():
                    for k in vocab.apply(pitches):
                        items.append((vocab.pitchsets[k], dur, k))
                items.sort()
                for _, dur, k in items:
                    out.append(TokenTuple(pitchset(k), dur=dur, track=r, inst=inst))
        out.append(TokenTuple(EOM))
    out.append(TokenTuple(EOS))
    return with_positions(out)


def decode(tokens: Sequence[TokenTuple], vocab: MergeVocab | None = None,
           complete: bool = True) -> QuantizedScore:
    """Rebuild the score. Tracks are keyed by (track ordinal, instrument) and
    ordered by ordinal; duplicate notes collapse."""
    vocab = vocab or _SINGLETONS
    state = DecoderState()
    measures: list[int] = []
    notes: dict[tuple[int, int], list[NoteEvent]] = defaultdict(list)
    start = 0
    onset = 0
    for tok in tokens:
        state.advance(tok, len(vocab))
        kind = tok.kind
        if kind == "BOM":
            if measures:
                start += measures[-1]
            measures.append(state.measure_len)
        elif kind == "CC":
            notes.setdefault((tok.track, tok.inst), [])
        elif kind == "POS":
            onset = start + state.last_pos
        elif kind == "PS":
            key = (state.track, state.instrument)
            for p in vocab.expand(event_value(tok.event)):
                notes[key].append(NoteEvent(onset, p, tok.dur))
    if complete and state.phase is not Phase.DONE:
        raise GrammarError(len(tokens), "|".join(state.admissible_kinds()), "end of sequence")
    tracks = tuple(
        Track(inst, canonical_notes(ns)) for (_, inst), ns in sorted(notes.items()) if ns
    )
    score = QuantizedScore(tracks, tuple(measures))
    # notes may ring past the last measure; pad so the score stays valid
    return _cover(score)


def _cover(score: QuantizedScore) -> QuantizedScore:
    end = score.end()
    measures = list(score.measures)
    while sum(measures) < end:
        measures.append(measures[-1] if measures else 32)
    return QuantizedScore(score.tracks, tuple(measures))


def canonicalize_tokens(tokens: Sequence[TokenTuple], vocab: MergeVocab | None = None,
                        chords: Sequence[ChordLabel] | None = None) -> list[TokenTuple]:
    """Canonical form of a token sequence: re-encode its decoded score,
    keeping its chord tokens."""
    if chords is None:
        chords = [ChordLabel.from_index(event_value(t.event)) for t in tokens if t.kind == "CHORD"]
    score = decode(tokens, vocab)
    chords = list(chords) + [NO_CHORD] * (len(score.measures) - len(chords))
    return encode(score, chords, vocab)


def chords_of(tokens: Iterable[TokenTuple]) -> list[ChordLabel]:
    return [ChordLabel.from_index(event_value(t.event)) for t in tokens if t.kind == "CHORD"]


_SINGLETONS = MergeVocab()


# ---------------------------------------------------------------------------
# text format: event  dur  trk  inst  m  o  r


def _inst_name(inst: int) -> str:
    return {INST_MASK: "MASK", INST_NULL: "NULL"}.get(inst, str(inst))


def _parse_inst(s: str) -> int:
    if s == "MASK":
        return INST_MASK
    if s == "NULL":
        return INST_NULL
    return int(s)


def format_tokens(tokens: Iterable[TokenTuple]) -> str:
    lines = []
    for t in tokens:
        dur = "DUR_NULL" if t.dur == DUR_NULL else f"DUR_{t.dur}"
        m, o, r = t.pos3d
        lines.append("\t".join([event_name(t.event), dur, str(t.track), _inst_name(t.inst),
                                str(m), str(o), str(r)]))
    return "".join(line + "\n" for line in lines)


def parse_tokens(text: str) -> list[TokenTuple]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 7:
            raise ValueError(f"line {lineno}: expected 7 tab-separated fields, got {len(fields)}")
        try:
            event = parse_event(fields[0])
            dur = DUR_NULL if fields[1] == "DUR_NULL" else int(fields[1].removeprefix("DUR_"))
            m, o, r = (int(x) for x in fields[4:7])
            out.append(TokenTuple(event, dur, int(fields[2]), _parse_inst(fields[3]), (m, o, r)))
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return out
