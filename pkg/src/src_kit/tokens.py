"""Token kinds, quadrant layout of a patch grid, and the decoder token sequence."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError

QUADRANTS = ("UL", "UR", "LL", "LR")


class TokenKind(enum.IntEnum):
    SCENE = 0
    REGION_UL = 1
    REGION_UR = 2
    REGION_LL = 3
    REGION_LR = 4
    PATCH = 5
    TEXT = 6

    @property
    def is_compression(self) -> bool:
        return self <= TokenKind.REGION_LR

    @property
    def is_visual(self) -> bool:
        return self != TokenKind.TEXT


COMPRESSION_KINDS = (TokenKind.SCENE, TokenKind.REGION_UL, TokenKind.REGION_UR,
                     TokenKind.REGION_LL, TokenKind.REGION_LR)
REGION_KIND = {q: TokenKind[f"REGION_{q}"] for q in QUADRANTS}


@dataclass(frozen=True)
class RegionLayout:
    """Quadrant partition of an r x c patch grid (patches indexed row-major).

    With odd dims the middle row/column belongs to the upper/left quadrants.
    """

    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ConfigError(f"invalid grid {self.rows}x{self.cols}")

    @property
    def n(self) -> int:
        return self.rows * self.cols

    @property
    def split(self) -> tuple[int, int]:
        return (self.rows + 1) // 2, (self.cols + 1) // 2

    def quadrant_of(self, row: int, col: int) -> str:
        if not (0 <= row < self.rows and 0 <= col < self.cols):
            raise ContractError(f"cell ({row}, {col}) outside {self.rows}x{self.cols} grid")
        hr, hc = self.split
        return ("U" if row < hr else "L") + ("L" if col < hc else "R")

    def row_range(self, quadrant: str) -> tuple[int, int]:
        hr = self.split[0]
        return (0, hr - 1) if quadrant[0] == "U" else (hr, self.rows - 1)

    def col_range(self, quadrant: str) -> tuple[int, int]:
        hc = self.split[1]
        return (0, hc - 1) if quadrant[1] == "L" else (hc, self.cols - 1)

    def member_patch_indices(self, quadrant: str) -> np.ndarray:
        r0, r1 = self.row_range(quadrant)
        c0, c1 = self.col_range(quadrant)
        return np.array([i * self.cols + j for i in range(r0, r1 + 1) for j in range(c0, c1 + 1)],
                        dtype=np.int64)

    def cell_of(self, index: int) -> tuple[int, int]:
        return divmod(int(index), self.cols)


@dataclass
class TokenSeq:
    """Ordered decoder tokens.

    ``emb`` may carry leading batch axes, ``(..., N, d)``; the layout fields
    (kind, frame, cell, pos) are shared by every batch element.
    ``frame`` is the source frame for visual tokens and -1 for text;
    ``cell`` is the (row, col) of patch tokens and (-1, -1) otherwise.
    """

    kinds: np.ndarray
    frame: np.ndarray
    cell: np.ndarray
    emb: object = None
    pos: np.ndarray | None = None
    layouts: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kinds = np.asarray(self.kinds, dtype=np.int64).reshape(-1)
        self.frame = np.asarray(self.frame, dtype=np.int64).reshape(-1)
        self.cell = np.asarray(self.cell, dtype=np.int64).reshape(-1, 2)
        if not (len(self.kinds) == len(self.frame) == len(self.cell)):
            raise ContractError("token layout fields disagree in length")

    def __len__(self) -> int:
        return len(self.kinds)

    @property
    def visual_count(self) -> int:
        return int(np.sum(self.kinds != TokenKind.TEXT))

    @property
    def text_count(self) -> int:
        return int(np.sum(self.kinds == TokenKind.TEXT))

    def kind_list(self) -> list[TokenKind]:
        return [TokenKind(k) for k in self.kinds]
