"""Multi-track symbolic music modelling: MMR tokens, Music BPE and a
four-head linear-attention decoder."""

from .bpe import MergeVocab, Mulpi, extract_mulpies, train, train_reference
from .chords import ChordLabel, detect_chord, measure_pitch_classes
from .codec import DecoderState, TokenTuple, assign_positions, decode, encode, grammar_mask
from .score_io import NoteEvent, QuantizedScore, Track, parse_midi, quantize_time, write_midi

__version__ = "0.1.0"
