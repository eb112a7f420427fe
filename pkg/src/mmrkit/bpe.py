"""Music BPE: byte-pair encoding driven by note concurrence, not adjacency.

A *mulpi* is a set of two or more pitches that share onset, duration and
track. Tokens are pitch sets; training repeatedly merges the unordered token
pair that co-occurs inside the most mulpies.
"""

from __future__ import annotations

import heapq
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .score_io import QuantizedScore

N_PITCHES = 128


@dataclass(frozen=True)
class Mulpi:
    pitches: frozenset[int]
    # (file, measure, track, onset), debugging only
    provenance: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if len(self.pitches) < 2:
            raise ValueError("a mulpi holds at least two pitches")
        if not all(0 <= p < N_PITCHES for p in self.pitches):
            raise ValueError("pitch out of range")


def extract_mulpies(score: QuantizedScore, source: str = "") -> list[Mulpi]:
    """Group each track's notes by (onset, duration); keep groups of two or more."""
    starts = score.measure_starts()
    bag = []
    for ti, track in enumerate(score.tracks):
        groups: dict[tuple[int, int], set[int]] = defaultdict(set)
        for n in track.notes:
            groups[(n.onset, n.duration)].add(n.pitch)
        for (onset, _), pitches in sorted(groups.items()):
            if len(pitches) >= 2:
                measure = _measure_of(starts, onset)
                bag.append(Mulpi(frozenset(pitches), (source, measure, ti, onset)))
    return bag


def _measure_of(starts: Sequence[int], t: int) -> int:
    lo, hi = 0, len(starts) - 1
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if starts[mid] <= t:
            lo = mid
        else:
            hi = mid - 1
    return lo


class MergeVocab:
    """128 singleton pitch sets followed by learned merges in rank order.

    Token ``128 + k`` is the union produced by merge ``k``.
    """

    def __init__(self, merges: Iterable[tuple[int, int]] = ()):
        self.pitchsets: list[tuple[int, ...]] = [(p,) for p in range(N_PITCHES)]
        self.merges: list[tuple[int, int]] = []
        self._ids: dict[frozenset[int], int] = {frozenset(ps): i for i, ps in enumerate(self.pitchsets)}
        self._cache: dict[frozenset[int], tuple[int, ...]] = {}
        for left, right in merges:
            self.add_merge(left, right)

    def __len__(self) -> int:
        return len(self.pitchsets)

    def __eq__(self, other) -> bool:
        return isinstance(other, MergeVocab) and self.merges == other.merges

    def add_merge(self, left: int, right: int) -> int:
        a, b = set(self.pitchsets[left]), set(self.pitchsets[right])
        if a & b:
            raise ValueError(f"merge parts overlap: {sorted(a)} | {sorted(b)}")
        union = frozenset(a | b)
        if union in self._ids:
            raise ValueError(f"pitch set {sorted(union)} already in vocab")
        self.merges.append((left, right))
        self.pitchsets.append(tuple(sorted(union)))
        self._ids[union] = len(self.pitchsets) - 1
        self._cache.clear()
        return len(self.pitchsets) - 1

    def token_id(self, pitches: Iterable[int]) -> int:
        return self._ids[frozenset(pitches)]

    def expand(self, token: int) -> frozenset[int]:
        if not 0 <= token < len(self.pitchsets):
            raise KeyError(f"unknown pitch-set token {token}")
        return frozenset(self.pitchsets[token])

    def apply(self, pitches: Iterable[int]) -> list[int]:
        """Tokenize a pitch set by replaying merges in rank order.

        Returned tokens are ordered by their lowest pitch.
        """
        key = frozenset(pitches)
        hit = self._cache.get(key)
        if hit is not None:
            return list(hit)
        if not all(0 <= p < N_PITCHES for p in key):
            raise ValueError("pitch out of range")
        current = set(key)
        if len(key) > 1:
            for rank, (left, right) in enumerate(self.merges):
                if left in current and right in current:
                    current.discard(left)
                    current.discard(right)
                    current.add(N_PITCHES + rank)
        out = tuple(sorted(current, key=lambda t: self.pitchsets[t]))
        self._cache[key] = out
        return list(out)

    def to_text(self) -> str:
        lines = []
        for left, right in self.merges:
            lp = ",".join(map(str, self.pitchsets[left]))
            rp = ",".join(map(str, self.pitchsets[right]))
            lines.append(f"{lp}|{rp}")
        return "".join(line + "\n" for line in lines)

    @classmethod
    def from_text(cls, text: str) -> "MergeVocab":
        vocab = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line:
                continue
            try:
                lp, rp = line.split("|")
                left = vocab.token_id(int(p) for p in lp.split(","))
                right = vocab.token_id(int(p) for p in rp.split(","))
            except (ValueError, KeyError) as exc:
                raise ValueError(f"vocab line {lineno}: {line!r}: {exc}") from None
            vocab.add_merge(left, right)
        return vocab

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "MergeVocab":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def _as_pitchsets(bag: Iterable) -> list[frozenset[int]]:
    out = []
    for m in bag:
        pitches = m.pitches if isinstance(m, Mulpi) else frozenset(m)
        if len(pitches) < 2:
            raise ValueError("a mulpi holds at least two pitches")
        out.append(frozenset(pitches))
    return out


def _check_target(n: int) -> None:
    if n < N_PITCHES:
        raise ValueError(f"target vocab size {n} is below {N_PITCHES}")


# called before each merge with (pair, count, current partitions)
MergeTrace = Callable[[tuple[int, int], int, list[list[int]]], None]


def train(bag: Iterable, n: int, min_freq: int = 2, trace: MergeTrace | None = None) -> MergeVocab:
    """Learn merges from a bag of mulpies until the vocab holds ``n`` tokens.

    Stops early once no pair co-occurs at least ``min_freq`` times. Ties on
    count go to the pair whose sorted pitch lists compare smallest. Pair
    counts are maintained incrementally; identical mulpies share one entry
    weighted by multiplicity.
    """
    _check_target(n)
    vocab = MergeVocab()
    ps = vocab.pitchsets

    words: list[list[int]] = []
    weights: list[int] = []
    for pitches, count in Counter(_as_pitchsets(bag)).items():
        words.append(sorted(pitches))
        weights.append(count)

    counts: dict[tuple[int, int], int] = defaultdict(int)
    where: dict[tuple[int, int], set[int]] = defaultdict(set)

    def pair(a: int, b: int) -> tuple[int, int]:
        return (a, b) if ps[a] < ps[b] else (b, a)

    for wi, parts in enumerate(words):
        for i, a in enumerate(parts):
            for b in parts[i + 1:]:
                p = pair(a, b)
                counts[p] += weights[wi]
                where[p].add(wi)

    heap = [(-c, ps[a], ps[b], a, b) for (a, b), c in counts.items()]
    heapq.heapify(heap)

    def bump(p: tuple[int, int], delta: int, wi: int) -> None:
        c = counts[p] + delta
        if c:
            counts[p] = c
            heapq.heappush(heap, (-c, ps[p[0]], ps[p[1]], p[0], p[1]))
        else:
            del counts[p]
        if delta > 0:
            where[p].add(wi)
        else:
            where[p].discard(wi)
            if not where[p]:
                del where[p]

    while len(vocab) < n:
        best = None
        while heap:
            negc, _, _, a, b = heap[0]
            if counts.get((a, b)) == -negc:
                best = (a, b)
                break
            heapq.heappop(heap)
        if best is None or counts[best] < min_freq:
            break
        if trace is not None:
            trace(best, counts[best], _expanded_partitions(words, weights))
        a, b = best
        new = vocab.add_merge(a, b)
        for wi in sorted(where.pop(best)):
            parts = words[wi]
            c = weights[wi]
            parts.remove(a)
            parts.remove(b)
            for q in parts:
                bump(pair(q, a), -c, wi)
                bump(pair(q, b), -c, wi)
                bump(pair(q, new), c, wi)
            parts.append(new)
        del counts[best]
    return vocab


def _expanded_partitions(words: list[list[int]], weights: list[int]) -> list[list[int]]:
    out = []
    for parts, c in zip(words, weights):
        out.extend([list(parts)] * c)
    return out


def train_reference(bag: Iterable, n: int, min_freq: int = 2) -> MergeVocab:
    """Slow oracle for :func:`train`: recounts every pair from scratch per merge."""
    _check_target(n)
    vocab = MergeVocab()
    partitions = [[frozenset([p]) for p in m] for m in _as_pitchsets(bag)]
    while len(vocab) < n:
        counts = recount_pairs(partitions)
        if not counts:
            break
        (left, right), c = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if c < min_freq:
            break
        vocab.add_merge(vocab.token_id(left), vocab.token_id(right))
        lset, rset = frozenset(left), frozenset(right)
        for parts in partitions:
            if lset in parts and rset in parts:
                parts.remove(lset)
                parts.remove(rset)
                parts.append(lset | rset)
    return vocab


def recount_pairs(partitions: Iterable[Iterable[frozenset[int]]]) -> Counter:
    """Count unordered co-occurring token pairs, once per mulpi.

    Keys are (left, right) sorted pitch tuples with left < right.
    """
    counts: Counter = Counter()
    for parts in partitions:
        keys = sorted(tuple(sorted(p)) for p in parts)
        for i, a in enumerate(keys):
            for b in keys[i + 1:]:
                counts[(a, b)] += 1
    return counts


def tokens_per_mulpi(vocab: MergeVocab, bag: Iterable) -> float:
    sets = _as_pitchsets(bag)
    if not sets:
        return 0.0
    return sum(len(vocab.apply(s)) for s in sets) / len(sets)
