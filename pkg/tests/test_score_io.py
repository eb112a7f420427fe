import struct
from fractions import Fraction
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mmrkit.score_io import (
    MidiParseError,
    NoteEvent,
    QuantizedScore,
    Track,
    canonical_notes,
    corpus_stats,
    parse_midi,
    quantize_time,
    score_from_json,
    score_to_json,
    write_midi,
)

from conftest import random_score


def vlq(n):
    out = [n & 0x7F]
    n >>= 7
    while n:
        out.append(0x80 | (n & 0x7F))
        n >>= 7
    return bytes(reversed(out))


def smf(tracks, fmt=1, ppq=480):
    """Hand-rolled SMF builder; each track is a list of (delta, raw bytes)."""
    out = b"MThd" + struct.pack(">IHHH", 6, fmt, len(tracks), ppq)
    for events in tracks:
        body = b"".join(vlq(d) + msg for d, msg in events) + b"\x00\xff\x2f\x00"
        out += b"MTrk" + struct.pack(">I", len(body)) + body
    return out


# quantize_time


@pytest.mark.parametrize("ticks,ppq,expected", [(0, 480, 0), (480, 480, 8), (59, 480, 1),
                                                (30, 480, 1), (29, 480, 0), (1920, 480, 32)])
def test_quantize_examples(ticks, ppq, expected):
    assert quantize_time(ticks, ppq) == expected


@given(st.integers(0, 10**7), st.integers(1, 5000))
def test_quantize_matches_exact_half_up(ticks, ppq):
    exact = math.floor(Fraction(ticks * 8, ppq) + Fraction(1, 2))
    assert quantize_time(ticks, ppq) == exact


@given(st.integers(0, 10**5), st.sampled_from([8, 96, 120, 384, 480, 960]))
def test_quantize_grid_aligned_is_identity(units, ppq):
    ticks = units * ppq // 8
    assert quantize_time(ticks, ppq) == units


def test_quantize_rejects_bad_ppq():
    with pytest.raises(ValueError):
        quantize_time(10, 0)


# parse


def test_header_only_file_is_empty():
    data = b"MThd" + struct.pack(">IHHH", 6, 1, 0, 480)
    score = parse_midi(data)
    assert score.tracks == () and score.measures == ()


def test_identical_note_ons_are_deduplicated():
    on = b"\x90\x3c\x64"
    off = b"\x80\x3c\x00"
    data = smf([[(0, on), (0, on), (480, off), (0, off)]])
    score = parse_midi(data)
    assert len(score.tracks) == 1
    assert score.tracks[0].notes == (NoteEvent(0, 60, 8),)


def test_running_status_and_velocity_zero_off():
    data = smf([[(0, b"\xc0\x28"), (0, b"\x90\x3c\x50"), (240, b"\x3c\x00"), (0, b"\x40\x50"),
                 (240, b"\x40\x00")]])
    score = parse_midi(data)
    assert score.tracks[0].instrument == 40
    assert score.tracks[0].notes == (NoteEvent(0, 60, 4), NoteEvent(4, 64, 4))


def test_channel_ten_is_percussion():
    data = smf([[(0, b"\x99\x24\x64"), (120, b"\x89\x24\x00")]])
    assert parse_midi(data).tracks[0].instrument == 128


def test_unmatched_note_on_closes_at_track_end():
    data = smf([[(0, b"\x90\x3c\x64"), (960, b"\xff\x01\x01x")]])
    score = parse_midi(data)
    assert score.tracks[0].notes == (NoteEvent(0, 60, 16),)
    assert score.warnings


def test_time_signatures_define_measures():
    ts34 = b"\xff\x58\x04\x03\x02\x18\x08"
    ts68 = b"\xff\x58\x04\x06\x03\x18\x08"
    data = smf([[(0, ts34), (2880, ts68)], [(0, b"\x90\x3c\x64"), (4320, b"\x80\x3c\x00")]])
    assert parse_midi(data).measures == (24, 24, 24)


def test_missing_time_signature_defaults_to_four_four():
    data = smf([[(0, b"\x90\x3c\x64"), (1920 * 2, b"\x80\x3c\x00")]])
    assert parse_midi(data).measures == (32, 32)


@pytest.mark.parametrize("data", [b"", b"MThd\x00\x00", b"RIFF" + b"\x00" * 20])
def test_malformed_header(data):
    with pytest.raises(MidiParseError):
        parse_midi(data)


def test_truncated_chunk_reports_offset():
    data = smf([[(0, b"\x90\x3c\x64"), (480, b"\x80\x3c\x00")]])[:-3]
    with pytest.raises(MidiParseError) as info:
        parse_midi(data)
    assert info.value.offset is not None


def test_type2_rejected():
    with pytest.raises(MidiParseError, match="type 2"):
        parse_midi(smf([[]], fmt=2))


def test_overlong_time_signature_rejected():
    ts = b"\xff\x58\x04\x11\x02\x18\x08"  # 17/4 = 136 units
    with pytest.raises(MidiParseError):
        parse_midi(smf([[(0, ts)]]))


# write


def test_write_empty_score_is_valid():
    data = write_midi(QuantizedScore())
    assert data[:4] == b"MThd"
    assert parse_midi(data) == QuantizedScore()


def _channel_events(data):
    """Absolute-tick channel events of every track chunk (minimal independent reader)."""
    pos, out = 14, []
    while pos < len(data):
        length = struct.unpack(">I", data[pos + 4:pos + 8])[0]
        body, p, tick, events = data[pos + 8:pos + 8 + length], 0, 0, []
        while p < len(body):
            d = 0
            while True:
                b = body[p]
                p += 1
                d = (d << 7) | (b & 0x7F)
                if not b & 0x80:
                    break
            tick += d
            if body[p] == 0xFF:
                n = body[p + 2]
                p += 3 + n
                continue
            size = 2 if body[p] & 0xF0 == 0xC0 else 3
            events.append((tick, body[p:p + size]))
            p += size
        out.append(events)
        pos += 8 + length
    return out


def test_write_single_note_ticks(single_note_score):
    data = write_midi(single_note_score)
    assert struct.unpack(">HHH", data[8:14]) == (1, 2, 480)
    events = _channel_events(data)[1]
    assert events == [(0, bytes([0xC0, 0])), (0, bytes([0x90, 60, 80])), (480, bytes([0x80, 60, 0]))]


def test_many_tracks_reuse_channels():
    tracks = tuple(Track(i, (NoteEvent(0, 60 + i, 8),)) for i in range(17))
    score = QuantizedScore(tracks, (32,))
    assert parse_midi(write_midi(score)) == score


def test_roundtrip_random_scores():
    rng = np.random.default_rng(7)
    for _ in range(100):
        s = random_score(rng)
        assert parse_midi(write_midi(s)) == s


def test_roundtrip_restrike_and_mixed_meters():
    notes = (NoteEvent(0, 60, 8), NoteEvent(0, 60, 16), NoteEvent(16, 60, 4), NoteEvent(20, 62, 40))
    s = QuantizedScore((Track(128, canonical_notes(notes)),), (24, 7, 32))
    assert parse_midi(write_midi(s)) == s


# canonical form


@given(st.lists(st.tuples(st.integers(0, 50), st.integers(0, 127), st.integers(1, 20)), max_size=30))
def test_canonical_notes_invariants(raw):
    notes = canonical_notes(NoteEvent(o, p, d) for o, p, d in raw)
    keys = [n.key() for n in notes]
    assert keys == sorted(keys)
    assert len(set(keys)) == len(keys)
    assert canonical_notes(notes) == notes
    for a in notes:
        for b in notes:
            if a.pitch == b.pitch and a.onset < b.onset:
                assert a.end <= b.onset


def test_score_json_roundtrip(rng):
    s = random_score(rng)
    assert score_from_json(score_to_json(s)) == s


# corpus stats


def test_corpus_stats_empty():
    stats = corpus_stats([])
    assert (stats.file_count, stats.note_count, stats.duplicates, stats.errors) == (0, 0, [], [])


def test_corpus_stats_duplicates_and_errors(tmp_path, single_note_score):
    data = write_midi(single_note_score)
    (tmp_path / "a.mid").write_bytes(data)
    (tmp_path / "b.mid").write_bytes(data)
    (tmp_path / "bad.mid").write_bytes(b"garbage")
    stats = corpus_stats(sorted(tmp_path.iterdir()))
    assert stats.file_count == 2
    assert len(stats.duplicates) == 1 and len(stats.duplicates[0]) == 2
    assert [p for p, _ in stats.errors] == [str(tmp_path / "bad.mid")]
    text = stats.to_text()
    assert "files\t2" in text and "time_signature[4/4]\t2" in text


def test_corpus_stats_counts_notes(tmp_path):
    paths = []
    for i in range(10):
        p = tmp_path / f"{i}.mid"
        p.write_bytes(write_midi(QuantizedScore((Track(0, (NoteEvent(i, 40 + i, 4),)),), (32,))))
        paths.append(p)
    stats = corpus_stats(paths)
    assert stats.note_count == 10 and stats.duplicates == []
