"""Four-head causal linear-attention decoder over MMR token tuples.

Input rows are the sum of event, duration, masked-instrument and the three
positional embeddings (measure, onset, track). Outputs are independent
logit streams for event, duration, track and instrument.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import codec
from .codec import TokenTuple

DTYPE = torch.float64
IGNORE = -100
EPS = 1e-6
HEADS = ("event", "dur", "track", "inst")

CHECKPOINT_MAGIC = b"MMRCKPT\x00"
CHECKPOINT_VERSION = 1


class NumericError(ArithmeticError):
    def __init__(self, layer: int):
        super().__init__(f"non-finite activation after layer {layer}")
        self.layer = layer


@dataclass
class ModelConfig:
    embed_dim: int = 64
    layers: int = 2
    heads: int = 4
    max_seq: int = 512
    event_vocab: int = 1000
    dur_vocab: int = codec.N_DURATIONS
    inst_vocab: int = codec.N_INSTRUMENTS
    track_vocab: int = codec.N_TRACK_ORDS
    measure_positions: int = 256
    onset_positions: int = codec.MAX_MEASURE_LEN + 1
    track_positions: int = codec.N_TRACK_ORDS
    ffn_mult: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.event_vocab <= codec.N_STRUCTURAL:
            raise ValueError(f"event_vocab must exceed {codec.N_STRUCTURAL} structural tokens")
        for f in fields(self):
            if f.name.endswith(("vocab", "positions")) and getattr(self, f.name) < 2:
                raise ValueError(f"{f.name} must be >= 2")

    @classmethod
    def paper_scale(cls, **overrides) -> "ModelConfig":
        return cls(**{"embed_dim": 512, "layers": 12, "heads": 16, "max_seq": 4096, **overrides})

    @property
    def n_pitchsets(self) -> int:
        return self.event_vocab - codec.N_STRUCTURAL

    def head_sizes(self) -> dict[str, int]:
        return {"event": self.event_vocab, "dur": self.dur_vocab,
                "track": self.track_vocab, "inst": self.inst_vocab}


class Batch(NamedTuple):
    event: torch.Tensor
    dur: torch.Tensor
    inst: torch.Tensor
    measure: torch.Tensor
    onset: torch.Tensor
    track: torch.Tensor
    targets: dict  # head name -> (B, T) long tensor, IGNORE where masked

    @property
    def shape(self):
        return tuple(self.event.shape)


def _targets_for(tok: TokenTuple) -> tuple[int, int, int, int]:
    kind = tok.kind
    dur = tok.dur if kind == "PS" else IGNORE
    track = tok.track if kind in ("CC", "POS", "PS") else IGNORE
    inst = tok.inst if kind in ("CC", "PS") else IGNORE
    return tok.event, dur, track, inst


def make_batch(seqs: Sequence[Sequence[TokenTuple]], cfg: ModelConfig) -> Batch:
    """Teacher-forcing batch: inputs are tuples [0, L-1), targets [1, L).

    The instrument channel of every input is replaced by the mask token.
    Short sequences are right-padded; padded targets are ignored. Measure
    ordinals beyond the table are clamped to its last row.
    """
    T = max(len(s) for s in seqs) - 1
    if T < 1:
        raise ValueError("sequences need at least two tuples")
    B = len(seqs)
    inp = np.zeros((5, B, T), dtype=np.int64)
    inp[0] = codec.EOS
    inp[1] = codec.DUR_PAD
    tgt = np.full((4, B, T), IGNORE, dtype=np.int64)
    for b, seq in enumerate(seqs):
        for t, tok in enumerate(seq[:-1]):
            m, o, r = tok.pos3d
            inp[:, b, t] = (tok.event, tok.dur, min(m, cfg.measure_positions - 1), o, r)
        for t, tok in enumerate(seq[1:]):
            tgt[:, b, t] = _targets_for(tok)
    bounds = (cfg.event_vocab, cfg.dur_vocab, cfg.measure_positions, cfg.onset_positions,
              cfg.track_positions)
    for name, arr, bound in zip(("event", "dur", "measure", "onset", "track"), inp, bounds):
        if arr.min() < 0 or arr.max() >= bound:
            raise ValueError(f"{name} index {int(arr.max())} outside a table of {bound} rows")
    as_t = torch.from_numpy
    return Batch(
        event=as_t(inp[0]), dur=as_t(inp[1]),
        inst=torch.full((B, T), codec.INST_MASK, dtype=torch.long),
        measure=as_t(inp[2]), onset=as_t(inp[3]), track=as_t(inp[4]),
        targets={name: as_t(tgt[i]) for i, name in enumerate(HEADS)},
    )


def feature_map(x: torch.Tensor) -> torch.Tensor:
    return F.elu(x) + 1.0


def causal_linear_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                            eps: float = EPS) -> torch.Tensor:
    """Causal kernelized attention with running sums, linear in sequence length.

    Shapes are (..., T, d). out_t = phi(q_t) S_t / (phi(q_t) z_t + eps) with
    S_t = sum_{s<=t} phi(k_s) v_s^T and z_t = sum_{s<=t} phi(k_s).
    """
    fq, fk = feature_map(q), feature_map(k)
    kv = torch.cumsum(fk.unsqueeze(-1) * v.unsqueeze(-2), dim=-3)
    z = torch.cumsum(fk, dim=-2)
    num = torch.einsum("...td,...tde->...te", fq, kv)
    den = (fq * z).sum(-1, keepdim=True) + eps
    return num / den


def quadratic_attention_reference(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """O(T^2) explicit-weight form of the same attention (test oracle)."""
    fq = np.where(q > 0, q + 1.0, np.exp(q))
    fk = np.where(k > 0, k + 1.0, np.exp(k))
    T = q.shape[-2]
    out = np.zeros_like(v)
    for t in range(T):
        w = fk[..., : t + 1, :] @ fq[..., t, :, None]  # (..., t+1, 1)
        w = w / w.sum(axis=-2, keepdims=True)
        out[..., t, :] = (w * v[..., : t + 1, :]).sum(axis=-2)
    return out


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, h = cfg.embed_dim, cfg.embed_dim * cfg.ffn_mult
        self.heads = cfg.heads
        self.ln1_g = nn.Parameter(torch.ones(d))
        self.ln1_b = nn.Parameter(torch.zeros(d))
        self.wq = nn.Parameter(torch.empty(d, d))
        self.wk = nn.Parameter(torch.empty(d, d))
        self.wv = nn.Parameter(torch.empty(d, d))
        self.wo = nn.Parameter(torch.empty(d, d))
        self.ln2_g = nn.Parameter(torch.ones(d))
        self.ln2_b = nn.Parameter(torch.zeros(d))
        self.w1 = nn.Parameter(torch.empty(d, h))
        self.b1 = nn.Parameter(torch.zeros(h))
        self.w2 = nn.Parameter(torch.empty(h, d))
        self.b2 = nn.Parameter(torch.zeros(d))

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        *lead, d = x.shape
        return x.reshape(*lead, self.heads, d // self.heads).transpose(-2, -3)

    def _merge(self, x: torch.Tensor) -> torch.Tensor:
        x = x.transpose(-2, -3)
        return x.reshape(*x.shape[:-2], -1)

    def _ffn(self, x: torch.Tensor) -> torch.Tensor:
        h = F.layer_norm(x, x.shape[-1:], self.ln2_g, self.ln2_b)
        return F.gelu(h @ self.w1 + self.b1) @ self.w2 + self.b2

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.layer_norm(x, x.shape[-1:], self.ln1_g, self.ln1_b)
        q, k, v = (self._split(h @ w) for w in (self.wq, self.wk, self.wv))
        x = x + self._merge(causal_linear_attention(q, k, v)) @ self.wo
        return x + self._ffn(x)

    def step(self, x: torch.Tensor, state: tuple[torch.Tensor, torch.Tensor]):
        """One recurrent step; x is (B, d), state is (S: B,H,dh,dh, z: B,H,dh)."""
        S, z = state
        h = F.layer_norm(x, x.shape[-1:], self.ln1_g, self.ln1_b)
        B = x.shape[0]
        q, k, v = (
            (h @ w).reshape(B, self.heads, -1) for w in (self.wq, self.wk, self.wv)
        )
        fq, fk = feature_map(q), feature_map(k)
        S = S + fk.unsqueeze(-1) * v.unsqueeze(-2)
        z = z + fk
        att = torch.einsum("bhd,bhde->bhe", fq, S) / ((fq * z).sum(-1, keepdim=True) + EPS)
        x = x + att.reshape(B, -1) @ self.wo
        return x + self._ffn(x), (S, z)


class MMRDecoder(nn.Module):
    """Parameters are registered in the order they are checkpointed."""

    def __init__(self, cfg: ModelConfig, init: bool = True):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.event_embed = nn.Parameter(torch.empty(cfg.event_vocab, d))
        self.dur_embed = nn.Parameter(torch.empty(cfg.dur_vocab, d))
        self.inst_embed = nn.Parameter(torch.empty(cfg.inst_vocab, d))
        self.measure_pos = nn.Parameter(torch.empty(cfg.measure_positions, d))
        self.onset_pos = nn.Parameter(torch.empty(cfg.onset_positions, d))
        self.track_pos = nn.Parameter(torch.empty(cfg.track_positions, d))
        self.final_g = nn.Parameter(torch.ones(d))
        self.final_b = nn.Parameter(torch.zeros(d))
        for name, size in cfg.head_sizes().items():
            self.register_parameter(f"head_{name}_w", nn.Parameter(torch.empty(d, size)))
            self.register_parameter(f"head_{name}_b", nn.Parameter(torch.zeros(size)))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.to(DTYPE)
        if init:
            self.reset_parameters(cfg.seed)

    def reset_parameters(self, seed: int) -> None:
        """normal(0, 0.02) for matrices and tables; unit gains, zero biases."""
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                leaf = name.rsplit(".", 1)[-1]
                if leaf.endswith("_g"):
                    p.fill_(1.0)
                elif leaf.endswith("_b") or leaf in ("b1", "b2"):
                    p.zero_()
                else:
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=DTYPE) * 0.02)

    def embed(self, batch: Batch) -> torch.Tensor:
        return (
            F.embedding(batch.event, self.event_embed)
            + F.embedding(batch.dur, self.dur_embed)
            + F.embedding(batch.inst, self.inst_embed)
            + F.embedding(batch.measure, self.measure_pos)
            + F.embedding(batch.onset, self.onset_pos)
            + F.embedding(batch.track, self.track_pos)
        )

    def _heads(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        x = F.layer_norm(x, x.shape[-1:], self.final_g, self.final_b)
        return {
            name: x @ getattr(self, f"head_{name}_w") + getattr(self, f"head_{name}_b")
            for name in HEADS
        }

    def forward(self, batch: Batch) -> dict[str, torch.Tensor]:
        x = self.embed(batch)
        for i, block in enumerate(self.blocks):
            x = block(x)
            if not torch.isfinite(x).all():
                raise NumericError(i)
        return self._heads(x)

    # incremental decoding

    def init_cache(self, batch_size: int) -> list[tuple[torch.Tensor, torch.Tensor]]:
        H = self.cfg.heads
        dh = self.cfg.embed_dim // H
        return [
            (torch.zeros(batch_size, H, dh, dh, dtype=DTYPE),
             torch.zeros(batch_size, H, dh, dtype=DTYPE))
            for _ in self.blocks
        ]

    @torch.no_grad()
    def step(self, event, dur, measure, onset, track, cache):
        """Advance B sequences by one tuple each; returns (logits, new cache).

        Arguments are (B,) long tensors; instruments are always masked.
        """
        inst = torch.full_like(event, codec.INST_MASK)
        x = (
            self.event_embed[event] + self.dur_embed[dur] + self.inst_embed[inst]
            + self.measure_pos[measure.clamp(max=self.cfg.measure_positions - 1)]
            + self.onset_pos[onset] + self.track_pos[track]
        )
        new_cache = []
        for i, (block, state) in enumerate(zip(self.blocks, cache)):
            x, state = block.step(x, state)
            new_cache.append(state)
            if not torch.isfinite(x).all():
                raise NumericError(i)
        return self._heads(x), new_cache

    # checkpoints

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(checkpoint_bytes(self))

    @classmethod
    def load(cls, path: str | Path) -> "MMRDecoder":
        return from_checkpoint_bytes(Path(path).read_bytes())


def loss(logits: dict[str, torch.Tensor], batch: Batch) -> tuple[torch.Tensor, dict[str, float]]:
    """Sum of per-head mean cross-entropies over unmasked targets."""
    total = logits["event"].new_zeros(())
    parts = {}
    for name in HEADS:
        target = batch.targets[name]
        if (target != IGNORE).any():
            lg = logits[name]
            ce = F.cross_entropy(lg.reshape(-1, lg.shape[-1]), target.reshape(-1),
                                 ignore_index=IGNORE)
        else:
            ce = total.new_zeros(())
        parts[name] = ce.item()
        total = total + ce
    return total, parts


def gradients(model: MMRDecoder, batch: Batch) -> dict[str, torch.Tensor]:
    """Exact gradient of the total loss for every parameter (reverse mode)."""
    model.zero_grad(set_to_none=True)
    total, _ = loss(model(batch), batch)
    if not torch.isfinite(total):
        raise ArithmeticError("loss is not finite")
    total.backward()
    return {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }


def checkpoint_bytes(model: MMRDecoder) -> bytes:
    cfg = asdict(model.cfg)
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<qq", CHECKPOINT_VERSION, len(cfg))
    out += struct.pack(f"<{len(cfg)}q", *cfg.values())
    params = list(model.parameters())
    out += struct.pack("<q", len(params))
    for p in params:
        arr = p.detach().cpu().numpy()
        out += struct.pack(f"<q{arr.ndim}q", arr.ndim, *arr.shape)
        out += arr.astype("<f8").tobytes()
    return bytes(out)


def from_checkpoint_bytes(data: bytes) -> MMRDecoder:
    try:
        return _read_checkpoint(data)
    except struct.error as exc:
        raise ValueError(f"truncated checkpoint: {exc}") from None


def _read_checkpoint(data: bytes) -> MMRDecoder:
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not an MMR checkpoint")
    pos = 8
    version, n_cfg = struct.unpack_from("<qq", data, pos)
    pos += 16
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    names = [f.name for f in fields(ModelConfig)]
    if n_cfg != len(names):
        raise ValueError("checkpoint config does not match this version")
    values = struct.unpack_from(f"<{n_cfg}q", data, pos)
    pos += 8 * n_cfg
    model = MMRDecoder(ModelConfig(**dict(zip(names, values))), init=False)
    (n_params,) = struct.unpack_from("<q", data, pos)
    pos += 8
    params = list(model.parameters())
    if n_params != len(params):
        raise ValueError("checkpoint tensor count mismatch")
    with torch.no_grad():
        for p in params:
            (ndim,) = struct.unpack_from("<q", data, pos)
            pos += 8
            shape = struct.unpack_from(f"<{ndim}q", data, pos)
            pos += 8 * ndim
            if tuple(shape) != tuple(p.shape):
                raise ValueError(f"tensor shape {shape} does not match {tuple(p.shape)}")
            n = int(np.prod(shape))
            arr = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape)
            pos += 8 * n
            p.copy_(torch.from_numpy(arr.astype(np.float64)))
    if pos != len(data):
        raise ValueError("trailing bytes in checkpoint")
    return model
