"""Rule-based per-measure chord labelling by pitch-class template matching."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

from .score_io import PERCUSSION, QuantizedScore

ROOT_NAMES = ("C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B")

QUALITIES = {
    "maj": (0, 4, 7),
    "min": (0, 3, 7),
    "dim": (0, 3, 6),
    "aug": (0, 4, 8),
    "sus2": (0, 2, 7),
    "sus4": (0, 5, 7),
    "maj7": (0, 4, 7, 11),
    "min7": (0, 3, 7, 10),
    "dom7": (0, 4, 7, 10),
    "dim7": (0, 3, 6, 9),
    "halfdim7": (0, 3, 6, 10),
}
QUALITY_NAMES = tuple(QUALITIES)

OUT_OF_TEMPLATE_PENALTY = 0.5
MIN_COVERED_TONES = 2


@dataclass(frozen=True)
class ChordLabel:
    root: int | None = None
    quality: str | None = None

    def __post_init__(self):
        if (self.root is None) != (self.quality is None):
            raise ValueError("root and quality must both be set or both be None")
        if self.root is not None and not 0 <= self.root < 12:
            raise ValueError(f"root out of range: {self.root}")
        if self.quality is not None and self.quality not in QUALITIES:
            raise ValueError(f"unknown quality: {self.quality}")

    @property
    def is_none(self) -> bool:
        return self.root is None

    def pitch_classes(self) -> frozenset[int]:
        if self.is_none:
            return frozenset()
        return frozenset((self.root + i) % 12 for i in QUALITIES[self.quality])

    @property
    def index(self) -> int:
        """0 for no-chord, then root-major over the 11 qualities."""
        if self.is_none:
            return 0
        return 1 + self.root * len(QUALITY_NAMES) + QUALITY_NAMES.index(self.quality)

    @classmethod
    def from_index(cls, index: int) -> "ChordLabel":
        if index == 0:
            return NO_CHORD
        if not 0 < index < N_CHORD_LABELS:
            raise ValueError(f"chord index out of range: {index}")
        root, q = divmod(index - 1, len(QUALITY_NAMES))
        return cls(root, QUALITY_NAMES[q])

    @property
    def name(self) -> str:
        if self.is_none:
            return "NC"
        return f"{ROOT_NAMES[self.root]}_{self.quality}"

    @classmethod
    def from_name(cls, name: str) -> "ChordLabel":
        name = name.strip()
        if name.startswith("[") and name.endswith("]"):
            name = name[1:-1]
        if name == "NC":
            return NO_CHORD
        root, _, quality = name.partition("_")
        if root not in ROOT_NAMES:
            raise ValueError(f"unknown chord root in {name!r}")
        return cls(ROOT_NAMES.index(root), quality)

    def __str__(self) -> str:
        return f"[{self.name}]"


NO_CHORD = ChordLabel()
N_CHORD_LABELS = 1 + 12 * len(QUALITY_NAMES)  # 133
ALL_CHORDS = tuple(ChordLabel.from_index(i) for i in range(N_CHORD_LABELS))


def detect_chord(weights: Mapping[int, float]) -> ChordLabel:
    """Pick the best-matching chord template for weighted pitch classes.

    Each template scores the weight it covers minus half the weight it does
    not. Exact score ties go to the candidate with more weight on its root,
    then fewer absent template tones, then quality order, then the larger
    weight vector read upwards from the root. Every step of that order is
    transposition invariant, so only inputs that are themselves symmetric
    under some transposition fall through to the final lower-root rule.
    Returns the no-chord label if the winner covers fewer than two tones.
    """
    w = [0.0] * 12
    for pc, weight in weights.items():
        if weight < 0:
            raise ValueError("pitch-class weights must be non-negative")
        w[pc % 12] += weight
    total = sum(w)
    if total <= 0:
        return NO_CHORD

    best_key, best = None, NO_CHORD
    for qi, (quality, intervals) in enumerate(QUALITIES.items()):
        for root in range(12):
            tones = [(root + i) % 12 for i in intervals]
            covered = sum(w[t] for t in tones)
            present = sum(1 for t in tones if w[t] > 0)
            score = covered - OUT_OF_TEMPLATE_PENALTY * (total - covered)
            rotated = tuple(w[(root + i) % 12] for i in range(12))
            key = (score, w[root], present - len(tones), -qi, rotated, -root, present)
            if best_key is None or key > best_key:
                best_key, best = key, ChordLabel(root, quality)
    if best_key[-1] < MIN_COVERED_TONES:
        return NO_CHORD
    return best


def measure_pitch_classes(score: QuantizedScore, measure_index: int) -> dict[int, int]:
    """Duration-weighted pitch classes sounding inside one measure.

    Notes that start earlier and ring into the measure count only for the
    part inside it. Percussion is ignored.
    """
    if not 0 <= measure_index < len(score.measures):
        raise IndexError(f"measure index {measure_index} out of range")
    start = sum(score.measures[:measure_index])
    end = start + score.measures[measure_index]
    out: dict[int, int] = {}
    for track in score.tracks:
        if track.instrument == PERCUSSION:
            continue
        for n in track.notes:
            overlap = min(n.end, end) - max(n.onset, start)
            if overlap > 0:
                out[n.pitch % 12] = out.get(n.pitch % 12, 0) + overlap
    return out


def detect_measure_chords(score: QuantizedScore) -> list[ChordLabel]:
    return [detect_chord(measure_pitch_classes(score, i)) for i in range(len(score.measures))]
