"""Training loop, grammar-constrained sampling and gradient checking."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import codec
from .chords import ChordLabel
from .codec import DecoderState, Phase, TokenTuple, grammar_mask
from .model import HEADS, MMRDecoder, ModelConfig, gradients, loss, make_batch

logger = logging.getLogger(__name__)


class TrainingError(ArithmeticError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    lr: float = 3e-4
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    max_steps: int = 1000
    clip_norm: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def split_windows(tokens: Sequence[TokenTuple], max_len: int) -> list[list[TokenTuple]]:
    """Cut a sequence into BOS-led windows of whole measures, at most
    ``max_len`` tuples each; the final window keeps EOS. A single measure
    longer than the window is truncated. Measure ordinals restart per window.
    """
    if max_len < 3:
        raise ValueError("window too short")
    measures, current = [], []
    for tok in tokens:
        kind = tok.kind
        if kind == "BOM":
            current = [tok]
        elif kind == "EOM":
            current.append(tok)
            measures.append(current)
            current = []
        elif current:
            current.append(tok)
    has_eos = bool(tokens) and tokens[-1].kind == "EOS"

    windows, win = [], [TokenTuple(codec.BOS)]
    for meas in measures:
        if len(win) + len(meas) > max_len and len(win) > 1:
            windows.append(win)
            win = [TokenTuple(codec.BOS)]
        win.extend(meas[: max_len - len(win)])
    if has_eos and len(win) < max_len:
        win.append(TokenTuple(codec.EOS))
    if len(win) > 1:
        windows.append(win)
    return [codec.with_positions(w) for w in windows]


def train_loop(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    corpus: Sequence[Sequence[TokenTuple]],
    checkpoint: str | Path | None = None,
    log: Callable[[str], None] | None = None,
    model: MMRDecoder | None = None,
) -> tuple[MMRDecoder, list[str]]:
    """Train with AdamW at a constant learning rate and gradient clipping.

    Returns the model and the loss log lines
    ``step<TAB>total<TAB>evt<TAB>dur<TAB>trk<TAB>inst``; each line records
    the loss of the batch that step updated on.
    """
    windows = [w for seq in corpus for w in split_windows(seq, model_cfg.max_seq + 1) if len(w) > 1]
    if not windows:
        raise ValueError("empty corpus")
    model = model or MMRDecoder(model_cfg)
    opt = torch.optim.AdamW(
        model.parameters(), lr=train_cfg.lr, betas=(train_cfg.beta1, train_cfg.beta2),
        weight_decay=train_cfg.weight_decay,
    )
    rng = np.random.default_rng(train_cfg.seed)
    order: list[int] = []
    lines: list[str] = []
    fixed = None
    if len(windows) <= train_cfg.batch_size:
        fixed = make_batch(windows, model_cfg)

    for step in range(train_cfg.max_steps):
        if fixed is not None:
            batch = fixed
        else:
            if len(order) < train_cfg.batch_size:
                order.extend(rng.permutation(len(windows)).tolist())
            picks, order = order[: train_cfg.batch_size], order[train_cfg.batch_size:]
            batch = make_batch([windows[i] for i in picks], model_cfg)
        opt.zero_grad(set_to_none=True)
        total, parts = loss(model(batch), batch)
        value = total.item()
        if not np.isfinite(value):
            raise TrainingError(step, value)
        total.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.clip_norm)
        opt.step()
        line = "\t".join([str(step), f"{value:.8f}"] + [f"{parts[h]:.8f}" for h in HEADS])
        lines.append(line)
        if log is not None:
            log(line)
        if checkpoint and train_cfg.checkpoint_every and (step + 1) % train_cfg.checkpoint_every == 0:
            model.save(checkpoint)
    if checkpoint:
        model.save(checkpoint)
    return model, lines


# ---------------------------------------------------------------------------
# sampling


@dataclass
class SampleConfig:
    temperature: float = 1.0
    top_p: float = 0.9
    max_len: int = 512
    seed: int = 0
    mode: str = "unconditional"

    def __post_init__(self):
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.mode not in ("unconditional", "prime", "chord-sequence"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.max_len < 2:
            raise ValueError("max_len must be >= 2")


def nucleus_sample(logits: np.ndarray, allowed: np.ndarray, temperature: float, top_p: float,
                   rng: np.random.Generator) -> int:
    """Sample an index from the smallest high-probability set reaching ``top_p``
    among ``allowed`` entries."""
    idx = np.flatnonzero(allowed)
    if idx.size == 0:
        raise AssertionError("no admissible token")
    z = logits[idx] / temperature
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    order = np.argsort(-p, kind="stable")
    cum = np.cumsum(p[order])
    k = min(int(np.searchsorted(cum, top_p)) + 1, idx.size)
    keep = order[:k]
    q = np.cumsum(p[keep])
    choice = int(np.searchsorted(q, rng.random() * q[-1], side="right"))
    return int(idx[keep[min(choice, k - 1)]])


@dataclass
class Session:
    """One sequence being generated: grammar state, emitted tuples and RNG."""

    rng: np.random.Generator
    state: DecoderState = field(default_factory=DecoderState)
    tokens: list[TokenTuple] = field(default_factory=list)
    forced: list[TokenTuple] = field(default_factory=list)
    chords: list[ChordLabel] = field(default_factory=list)

    @property
    def done(self) -> bool:
        return self.state.phase is Phase.DONE


def _budget(session: Session, cfg: SampleConfig) -> int:
    remaining = cfg.max_len - len(session.tokens)
    pending = max(0, len(session.chords) - session.state.measure)
    if pending and session.state.phase is Phase.MEASURE:
        # the next BOM's own closure cost already covers its CHORD and EOM
        pending -= 1
    # each pending forced chord still needs BOM, CHORD and EOM
    return remaining - 3 * pending


def sample_step(logits: dict[str, np.ndarray], session: Session, cfg: SampleConfig,
                n_pitchsets: int) -> TokenTuple:
    """Choose the next tuple for ``session`` from one row of head logits.

    Forced tuples (prime, chord list) bypass sampling. The event is drawn
    under the grammar mask; duration, track and instrument follow the
    channel rules of the chosen event. The session state is advanced.
    """
    st = session.state
    tok = None
    if session.forced:
        tok = session.forced.pop(0)
    elif st.phase is Phase.START:
        tok = TokenTuple(codec.BOS)
    elif st.phase is Phase.CHORD and st.measure <= len(session.chords):
        tok = TokenTuple(codec.chord_event(session.chords[st.measure - 1]))
    if tok is None:
        mask = grammar_mask(st, n_pitchsets, budget=_budget(session, cfg))
        if st.phase is Phase.MEASURE and st.measure < len(session.chords):
            mask[codec.EOS] = False
        if not mask.any():
            # budget exhausted by pending chords: close what is open
            mask = grammar_mask(st, n_pitchsets, budget=cfg.max_len - len(session.tokens))
        full = np.zeros(logits["event"].shape[-1], dtype=bool)
        full[: mask.size] = mask
        event = nucleus_sample(logits["event"], full, cfg.temperature, cfg.top_p, session.rng)
        tok = _fill_channels(event, logits, st, cfg, session.rng)
    tok = replace(tok, pos3d=st.pos3d(tok))
    st.advance(tok, n_pitchsets)
    session.tokens.append(tok)
    return tok


def _fill_channels(event: int, logits, st: DecoderState, cfg: SampleConfig, rng) -> TokenTuple:
    kind = codec.event_kind(event)
    if kind == "PS":
        allowed = np.zeros(logits["dur"].shape[-1], dtype=bool)
        allowed[1: codec.MAX_DURATION + 1] = True
        dur = nucleus_sample(logits["dur"], allowed, cfg.temperature, cfg.top_p, rng)
        return TokenTuple(event, dur=dur, track=st.track, inst=st.instrument)
    if kind == "CC":
        allowed = np.zeros(logits["track"].shape[-1], dtype=bool)
        allowed[1: codec.MAX_TRACKS + 1] = True
        allowed[list(st.used_tracks)] = False
        track = nucleus_sample(logits["track"], allowed, cfg.temperature, cfg.top_p, rng)
        allowed = np.zeros(logits["inst"].shape[-1], dtype=bool)
        allowed[:129] = True
        inst = nucleus_sample(logits["inst"], allowed, cfg.temperature, cfg.top_p, rng)
        return TokenTuple(event, track=track, inst=inst)
    if kind == "POS":
        return TokenTuple(event, track=st.track)
    return TokenTuple(event)


def generate_many(
    model: MMRDecoder,
    cfg: SampleConfig,
    n_pitchsets: int,
    count: int = 1,
    prime: Sequence[TokenTuple] | None = None,
    chords: Sequence[ChordLabel] | None = None,
) -> list[list[TokenTuple]]:
    """Generate ``count`` sequences in lock-step; sequence i draws from its own
    RNG seeded with (cfg.seed, i), so results do not depend on ``count``."""
    if n_pitchsets > model.cfg.n_pitchsets:
        raise ValueError(f"{n_pitchsets} pitch sets exceed the model's {model.cfg.n_pitchsets}")
    if cfg.mode == "prime":
        if not prime:
            raise ValueError("prime mode needs a prime sequence")
        codec.validate(prime, n_pitchsets, complete=False)
    if cfg.mode == "chord-sequence":
        if not chords:
            raise ValueError("chord-sequence mode needs a non-empty chord list")
        if cfg.max_len < 3 * len(chords) + 2:
            raise ValueError("max_len too short for the chord list")
    sessions = []
    for i in range(count):
        s = Session(rng=np.random.default_rng([cfg.seed, i]))
        if cfg.mode == "prime":
            s.forced = list(prime)
        elif cfg.mode == "chord-sequence":
            s.chords = list(chords)
        sessions.append(s)

    model.eval()
    cache = model.init_cache(count)
    logits = {h: np.zeros((count, size)) for h, size in model.cfg.head_sizes().items()}
    while not all(s.done for s in sessions) and any(len(s.tokens) < cfg.max_len for s in sessions):
        feed = []
        for b, s in enumerate(sessions):
            if s.done or len(s.tokens) >= cfg.max_len:
                feed.append(TokenTuple(codec.EOS))
                continue
            row = {h: logits[h][b] for h in HEADS}
            feed.append(sample_step(row, s, cfg, n_pitchsets))
        out, cache = model.step(
            *(torch.tensor(v, dtype=torch.long) for v in zip(*[
                (t.event, t.dur, t.pos3d[0], t.pos3d[1], t.pos3d[2]) for t in feed
            ])),
            cache,
        )
        logits = {h: out[h].numpy() for h in HEADS}
    return [s.tokens for s in sessions]


def generate(model: MMRDecoder, cfg: SampleConfig, n_pitchsets: int,
             condition: Sequence[TokenTuple] | Sequence[ChordLabel] | None = None) -> list[TokenTuple]:
    """Generate one sequence; ``condition`` is a prime TokenSeq in prime mode
    or a chord list in chord-sequence mode."""
    if cfg.mode == "prime":
        return generate_many(model, cfg, n_pitchsets, 1, prime=condition)[0]
    if cfg.mode == "chord-sequence":
        return generate_many(model, cfg, n_pitchsets, 1, chords=condition)[0]
    return generate_many(model, cfg, n_pitchsets, 1)[0]


# ---------------------------------------------------------------------------
# gradient check


@dataclass
class GradCheckReport:
    errors: dict[str, float]

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    def to_text(self) -> str:
        lines = [f"{name}\t{err:.3e}" for name, err in self.errors.items()]
        name, err = self.worst
        lines.append(f"worst\t{name}\t{err:.3e}")
        return "\n".join(lines) + "\n"


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    """Norm-wise relative error of two same-shaped tensors."""
    scale = max(a.norm().item(), b.norm().item())
    if scale == 0.0:
        return 0.0
    return (a - b).norm().item() / scale


@torch.no_grad()
def _loss_value(model: MMRDecoder, batch) -> float:
    return loss(model(batch), batch)[0].item()


def finite_diff_check(model: MMRDecoder, batch, h: float = 1e-4) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences, per tensor."""
    if not h > 0:
        raise ValueError("step size h must be positive")
    analytic = gradients(model, batch)
    errors = {}
    for name, p in model.named_parameters():
        numeric = torch.zeros_like(p)
        flat, nflat = p.data.view(-1), numeric.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = _loss_value(model, batch)
            flat[i] = orig - h
            down = _loss_value(model, batch)
            flat[i] = orig
            nflat[i] = (up - down) / (2 * h)
        errors[name] = relative_error(analytic[name], numeric)
    return GradCheckReport(errors)
