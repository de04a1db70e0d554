"""Three-axis rotary position embedding (time, x = row, y = column) for the decoder.

Scene and region tokens sit at the centre of the area they summarise; text
tokens follow the visual block with all three axes equal.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ContractError
from .numeric import Tensor, rotate_pairs
from .tokens import REGION_KIND, RegionLayout, TokenKind, TokenSeq

ROPE_BASE = 10000.0


@dataclass(frozen=True)
class MRoPEPos:
    t: float
    x: float
    y: float


def center_index(layout: RegionLayout, kind: TokenKind) -> tuple[float, float]:
    kind = TokenKind(kind)
    if kind == TokenKind.SCENE:
        r0, r1, c0, c1 = 0, layout.rows - 1, 0, layout.cols - 1
    elif kind.is_compression:
        q = kind.name.split("_")[1]
        (r0, r1), (c0, c1) = layout.row_range(q), layout.col_range(q)
    else:
        raise ContractError(f"{kind.name} tokens have no area centre")
    return (r0 + r1) / 2.0, (c0 + c1) / 2.0


def _layout_for(frame_layouts, frame: int) -> RegionLayout:
    if isinstance(frame_layouts, RegionLayout):
        return frame_layouts
    return frame_layouts[frame]


def assign_positions(seq: TokenSeq, frame_layouts) -> TokenSeq:
    """Return a copy of ``seq`` with an (N, 3) array of (t, x, y) positions."""
    pos = np.zeros((len(seq), 3))
    visual = seq.kinds != TokenKind.TEXT
    for i, (k, f) in enumerate(zip(seq.kinds, seq.frame)):
        if k == TokenKind.TEXT:
            continue
        try:
            kind = TokenKind(int(k))
        except ValueError:
            raise ContractError(f"unknown token kind {k}") from None
        if kind == TokenKind.PATCH:
            x, y = seq.cell[i]
        else:
            x, y = center_index(_layout_for(frame_layouts, int(f)), kind)
        pos[i] = (f, x, y)
    start = seq.frame[visual].max() + 1 if visual.any() else 0
    text_idx = np.flatnonzero(~visual)
    pos[text_idx] = (start + np.arange(len(text_idx)))[:, None]
    return replace(seq, pos=pos)


def mrope_angles(positions: np.ndarray, head_dim: int, base: float = ROPE_BASE):
    """cos/sin tables of shape (N, head_dim // 2) for interleaved pair rotation."""
    if head_dim % 3 or (head_dim // 3) % 2:
        raise ConfigError(f"head dim {head_dim} does not split into three even chunks")
    chunk = head_dim // 3
    inv_freq = base ** (-np.arange(0, chunk, 2) / chunk)
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    angles = np.concatenate([positions[:, a:a + 1] * inv_freq for a in range(3)], axis=1)
    return np.cos(angles), np.sin(angles)


def apply_mrope(embeddings, positions, head_dim: int | None = None, base: float = ROPE_BASE):
    """Rotate (..., N, head_dim) embeddings; accepts numpy arrays or Tensors."""
    hd = embeddings.shape[-1] if head_dim is None else head_dim
    if embeddings.shape[-1] != hd:
        raise ConfigError("embedding width does not match head_dim")
    cos, sin = mrope_angles(positions, hd, base)
    if isinstance(embeddings, Tensor):
        return rotate_pairs(embeddings, cos, sin)
    return rotate_pairs(Tensor(embeddings), cos, sin).data


def positions_csv(seq: TokenSeq) -> str:
    if seq.pos is None:
        raise ContractError("positions not assigned")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "kind", "t", "x", "y"])
    for i, (k, p) in enumerate(zip(seq.kinds, seq.pos)):
        w.writerow([i, TokenKind(int(k)).name, *(f"{v:g}" for v in p)])
    return buf.getvalue()


def region_centers(layout: RegionLayout) -> dict[str, tuple[float, float]]:
    return {q: center_index(layout, k) for q, k in REGION_KIND.items()}
