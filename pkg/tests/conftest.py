from collections import Counter

import numpy as np
import pytest

from mmrkit.bpe import MergeVocab, recount_pairs, train

from mmrkit.score_io import NoteEvent, QuantizedScore, Track, canonicalize

ACCEPTANCE_KEY = pytest.StashKey[dict]()

MEASURE_CHOICES = (32, 32, 32, 24, 16, 48, 12, 28, 8, 64, 128, 7)


def random_score(rng: np.random.Generator, max_tracks=8, max_measures=16, max_dur=64,
                 max_notes=40) -> QuantizedScore:
    n_measures = int(rng.integers(0, max_measures + 1))
    measures = tuple(int(rng.choice(MEASURE_CHOICES)) for _ in range(n_measures))
    total = sum(measures)
    tracks = []
    if total:
        for _ in range(int(rng.integers(0, max_tracks + 1))):
            inst = int(rng.integers(0, 129))
            notes = []
            for _ in range(int(rng.integers(1, max_notes + 1))):
                onset = int(rng.integers(0, total))
                dur = int(rng.integers(1, min(max_dur, total - onset) + 1))
                pitch = int(rng.integers(0, 128))
                notes.append(NoteEvent(onset, pitch, dur))
                # chords at one onset give BPE something to do
                if rng.random() < 0.5:
                    for p in rng.choice(128, size=int(rng.integers(1, 4)), replace=False):
                        notes.append(NoteEvent(onset, int(p), dur))
            tracks.append(Track(inst, tuple(notes)))
    return canonicalize(QuantizedScore(tuple(tracks), measures))


def random_bag(rng: np.random.Generator, size: int, lo=0, hi=128, min_len=2, max_len=10):
    bag = []
    for _ in range(size):
        k = int(rng.integers(min_len, max_len + 1))
        bag.append(frozenset(int(p) for p in rng.choice(np.arange(lo, hi), size=k, replace=False)))
    return bag


def greedy_checked_train(bag, n):
    """Train while recounting all pairs from scratch before every merge.

    Asserts the chosen pair has the maximal count (smallest pitch tuples on
    ties) and that every mulpi is still a disjoint partition of its pitches.
    """
    local = MergeVocab()
    originals = [s for s, c in Counter(frozenset(m) for m in bag).items() for _ in range(c)]
    seen = []

    def trace(pair, count, partitions):
        sets = [[frozenset(local.pitchsets[t]) for t in parts] for parts in partitions]
        for parts, original in zip(sets, originals, strict=True):
            assert frozenset().union(*parts) == original
            assert sum(map(len, parts)) == len(original)
        counts = recount_pairs(sets)
        key = (local.pitchsets[pair[0]], local.pitchsets[pair[1]])
        assert counts[key] == count
        assert min(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0] == key
        local.add_merge(*pair)
        seen.append(pair)

    return train(bag, n, trace=trace), seen


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def single_note_score():
    return QuantizedScore((Track(0, (NoteEvent(0, 60, 8),)),), (32,))


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria")


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
