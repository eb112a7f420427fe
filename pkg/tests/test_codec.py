import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmrkit.bpe import MergeVocab, extract_mulpies, train
from mmrkit.chords import ALL_CHORDS, NO_CHORD, ChordLabel, detect_measure_chords
from mmrkit.codec import (
    BOS,
    CC,
    EOM,
    EOS,
    INST_NULL,
    N_STRUCTURAL,
    PS_BASE,
    DecoderState,
    GrammarError,
    TokenTuple,
    assign_positions,
    bom,
    canonicalize_tokens,
    chord_event,
    decode,
    encode,
    event_name,
    format_tokens,
    grammar_mask,
    parse_event,
    parse_tokens,
    pitchset,
    pos,
    validate,
)
from mmrkit.score_io import NoteEvent, QuantizedScore, Track

from conftest import random_score


def events(tokens):
    return [event_name(t.event) for t in tokens]


def test_event_layout():
    assert N_STRUCTURAL == 393
    assert bom(1) == 4 and bom(128) == 131
    assert chord_event(NO_CHORD) == 132
    assert pos(0) == 265 and pos(127) == 392
    assert pitchset(0) == PS_BASE == 393


@pytest.mark.parametrize("name", ["BOS", "EOS", "EOM", "CC", "BOM_32", "CHORD_C_maj7", "CHORD_NC",
                                  "POS_0", "POS_127", "PS_417"])
def test_event_names_roundtrip(name):
    assert event_name(parse_event(name)) == name


@pytest.mark.parametrize("name", ["BOM_0", "BOM_129", "POS_128", "FOO_1"])
def test_bad_event_names(name):
    with pytest.raises(ValueError):
        parse_event(name)


def test_empty_score():
    tokens = encode(QuantizedScore(), [])
    assert events(tokens) == ["BOS", "EOS"]
    assert decode(tokens) == QuantizedScore()


def test_single_note_trace(single_note_score):
    tokens = encode(single_note_score, [NO_CHORD])
    assert events(tokens) == ["BOS", "BOM_32", "CHORD_NC", "CC", "POS_0", "PS_60", "EOM", "EOS"]
    ps = tokens[5]
    assert (ps.dur, ps.track, ps.inst) == (8, 1, 0)
    assert [t.pos3d for t in tokens] == [(0, 0, 0), (1, 0, 0), (1, 0, 0), (1, 0, 1), (1, 1, 1),
                                         (1, 1, 1), (1, 0, 0), (0, 0, 0)]
    assert decode(tokens) == single_note_score


def test_repeated_instrument_tracks():
    note = (NoteEvent(0, 60, 8),)
    s = QuantizedScore((Track(40, note), Track(40, note)), (32,))
    tokens = encode(s)
    assert events(tokens) == ["BOS", "BOM_32", "CHORD_NC", "CC", "POS_0", "PS_60", "CC", "POS_0",
                              "PS_60", "EOM", "EOS"]
    assert [(t.track, t.inst) for t in tokens if t.event == CC] == [(1, 40), (2, 40)]
    assert [t.pos3d for t in tokens[3:9]] == [(1, 0, 1), (1, 1, 1), (1, 1, 1), (1, 0, 2), (1, 1, 2),
                                              (1, 1, 2)]
    assert decode(tokens) == s


def test_positions_of_bos():
    assert assign_positions([TokenTuple(BOS)]) == [(0, 0, 0)]


def test_same_onset_notes_share_positions():
    s = QuantizedScore((Track(0, (NoteEvent(4, 60, 8), NoteEvent(4, 67, 4), NoteEvent(9, 50, 2))),),
                       (32,))
    tokens = encode(s)
    assert events(tokens)[3:] == ["CC", "POS_4", "PS_60", "PS_67", "POS_9", "PS_50", "EOM", "EOS"]
    assert tokens[5].pos3d == tokens[6].pos3d == (1, 1, 1)
    assert tokens[8].pos3d == (1, 2, 1)


def test_durations_clamped():
    s = QuantizedScore((Track(0, (NoteEvent(0, 60, 100),)),), (128,))
    assert [t.dur for t in encode(s) if t.kind == "PS"] == [64]


def test_encode_errors():
    with pytest.raises(ValueError):
        encode(QuantizedScore((), (32,)), [])
    many = tuple(Track(0, (NoteEvent(0, 60, 1),)) for _ in range(33))
    with pytest.raises(ValueError):
        encode(QuantizedScore(many, (32,)))


def test_roundtrip_with_merges():
    rng = np.random.default_rng(3)
    scores = [random_score(rng) for _ in range(40)]
    vocab = train([m for s in scores for m in extract_mulpies(s)], 300)
    assert len(vocab.merges) > 0
    for s in scores:
        chords = detect_measure_chords(s)
        tokens = encode(s, chords, vocab)
        validate(tokens, len(vocab))
        assert decode(tokens, vocab) == s
        assert canonicalize_tokens(tokens, vocab) == tokens


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_roundtrip_property(seed):
    s = random_score(np.random.default_rng(seed))
    assert decode(encode(s)) == s


# grammar


def advance_all(names_and_tokens):
    state = DecoderState()
    for tok in names_and_tokens:
        state.advance(tok)
    return state


def admitted(state, n=10):
    return set(np.flatnonzero(grammar_mask(state, n)).tolist())


def test_mask_after_bos():
    state = advance_all([TokenTuple(BOS)])
    assert admitted(state) == {bom(i) for i in range(1, 129)} | {EOS}


def test_mask_after_bom():
    state = advance_all([TokenTuple(BOS), TokenTuple(bom(32))])
    assert admitted(state) == {chord_event(c) for c in ALL_CHORDS}


def test_mask_after_pos30():
    prefix = [TokenTuple(BOS), TokenTuple(bom(32)), TokenTuple(chord_event(NO_CHORD)),
              TokenTuple(CC, track=1, inst=0), TokenTuple(pos(30), track=1)]
    state = advance_all(prefix)
    assert admitted(state) == {pitchset(k) for k in range(10)}
    state.advance(TokenTuple(pitchset(3), dur=4, track=1, inst=0))
    assert admitted(state) == {pitchset(k) for k in range(10)} | {pos(31), CC, EOM}


def test_mask_closes_under_budget():
    state = advance_all([TokenTuple(BOS), TokenTuple(bom(32)), TokenTuple(chord_event(NO_CHORD))])
    assert set(np.flatnonzero(grammar_mask(state, 10, budget=2)).tolist()) == {EOM}


def test_encoded_sequences_follow_the_mask():
    rng = np.random.default_rng(11)
    for _ in range(30):
        tokens = encode(random_score(rng))
        state = DecoderState()
        for tok in tokens:
            assert grammar_mask(state, 128)[tok.event]
            state.advance(tok)


def test_descending_pos_is_grammar_error():
    tokens = [TokenTuple(BOS), TokenTuple(bom(32)), TokenTuple(chord_event(NO_CHORD)),
              TokenTuple(CC, track=1, inst=0), TokenTuple(pos(5), track=1),
              TokenTuple(pitchset(60), dur=4, track=1, inst=0), TokenTuple(pos(2), track=1)]
    with pytest.raises(GrammarError) as info:
        decode(tokens)
    assert info.value.index == 6 and "POS" in info.value.expected


def test_pitchset_before_pos_is_grammar_error():
    tokens = [TokenTuple(BOS), TokenTuple(bom(32)), TokenTuple(chord_event(NO_CHORD)),
              TokenTuple(CC, track=1, inst=0), TokenTuple(pitchset(60), dur=4, track=1, inst=0)]
    with pytest.raises(GrammarError) as info:
        decode(tokens)
    assert info.value.index == 4


def test_incomplete_sequence_rejected():
    with pytest.raises(GrammarError):
        decode([TokenTuple(BOS), TokenTuple(bom(32))])


def test_bad_channels_rejected():
    with pytest.raises(GrammarError):
        validate([TokenTuple(BOS, dur=3), TokenTuple(EOS)])
    with pytest.raises(GrammarError):
        validate([TokenTuple(BOS), TokenTuple(bom(4)), TokenTuple(chord_event(NO_CHORD)),
                  TokenTuple(CC, track=1, inst=INST_NULL)], complete=False)


def test_reused_track_rejected():
    prefix = [TokenTuple(BOS), TokenTuple(bom(8)), TokenTuple(chord_event(NO_CHORD)),
              TokenTuple(CC, track=1, inst=0), TokenTuple(pos(0), track=1),
              TokenTuple(pitchset(60), dur=1, track=1, inst=0), TokenTuple(CC, track=1, inst=5)]
    with pytest.raises(GrammarError):
        validate(prefix, complete=False)


def test_cc_group_permutation():
    s = QuantizedScore((Track(0, (NoteEvent(0, 60, 8), NoteEvent(8, 62, 8))),
                        Track(33, (NoteEvent(4, 40, 4),)),
                        Track(128, (NoteEvent(0, 36, 2), NoteEvent(16, 38, 2)))), (32,))
    tokens = encode(s, [ChordLabel(0, "maj")])
    body = tokens[3:-2]
    groups, cur = [], []
    for t in body:
        if t.event == CC and cur:
            groups.append(cur)
            cur = []
        cur.append(t)
    groups.append(cur)
    permuted = tokens[:3] + groups[2] + groups[0] + groups[1] + tokens[-2:]
    assert decode(permuted) == s
    assert sorted(t.pos3d for t in permuted) == sorted(t.pos3d for t in tokens)
    assert canonicalize_tokens(permuted) == tokens


def test_text_format_roundtrip(single_note_score):
    tokens = encode(single_note_score, [ChordLabel(0, "maj7")])
    text = format_tokens(tokens)
    assert text.splitlines()[5] == "PS_60\tDUR_8\t1\t0\t1\t1\t1"
    assert text.splitlines()[2] == "CHORD_C_maj7\tDUR_NULL\t0\tNULL\t1\t0\t0"
    assert parse_tokens(text) == tokens


def test_text_format_errors():
    with pytest.raises(ValueError, match="line 1"):
        parse_tokens("BOS\tDUR_NULL\t0\n")
    with pytest.raises(ValueError, match="line 2"):
        parse_tokens("BOS\tDUR_NULL\t0\tNULL\t0\t0\t0\nXYZ\tDUR_NULL\t0\tNULL\t0\t0\t0\n")


def test_vocab_tokens_decode():
    vocab = MergeVocab([(60, 64)])
    s = QuantizedScore((Track(0, (NoteEvent(0, 60, 8), NoteEvent(0, 64, 8), NoteEvent(0, 67, 8))),),
                       (32,))
    tokens = encode(s, vocab=vocab)
    assert events(tokens)[5:7] == ["PS_128", "PS_67"]
    assert decode(tokens, vocab) == s
