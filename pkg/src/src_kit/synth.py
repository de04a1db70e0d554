"""Symbol-grid driving scenes, template captions, VideoQA samples and a frozen text encoder.

Frames are r x c grids of cell symbols plus two global attributes (weather,
daytime). Every cell's input encoding carries the global attributes, so they
are visible anywhere in the frame; object identity is local to one cell.
"""
from __future__ import annotations

import enum
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, VocabularyError

CELL_SYMBOLS = (
    "EMPTY", "CAR_RED", "CAR_BLUE", "TRUCK", "PED", "BIKE",
    "LIGHT_RED", "LIGHT_GREEN", "LIGHT_YELLOW",
)
OBJECTS = CELL_SYMBOLS[1:]
WEATHER = ("CLEAR", "RAIN", "FOG", "SNOW")
DAYTIME = ("DAY", "NIGHT", "DUSK", "DAWN")
ANSWERS = OBJECTS + WEATHER + DAYTIME
ANSWER_INDEX = {a: i for i, a in enumerate(ANSWERS)}

QUADRANTS = ("UL", "UR", "LL", "LR")
FEATURE_DIM = len(CELL_SYMBOLS) + len(WEATHER) + len(DAYTIME)

# question templates, four symbols each
DETAIL_Q = ("what", "now", "at")
GLOBAL_Q = ("what", "is", "the")
MAX_GRID = 16


class QuestionKind(str, enum.Enum):
    LAST_FRAME_DETAIL = "LAST_FRAME_DETAIL"
    GLOBAL_CONTEXT = "GLOBAL_CONTEXT"


def symbol_words(symbol: str) -> list[str]:
    return symbol.lower().split("_")


def cell_token(row: int, col: int) -> str:
    return f"cell_{row}_{col}"


def text_vocabulary() -> list[str]:
    words = {"scene", "region", "empty", "weather", "daytime"}
    words.update(DETAIL_Q + GLOBAL_Q)
    for s in OBJECTS + WEATHER + DAYTIME:
        words.update(symbol_words(s))
    words.update(cell_token(r, c) for r in range(MAX_GRID) for c in range(MAX_GRID))
    return sorted(words)


@dataclass(frozen=True)
class SynthScene:
    grid: np.ndarray
    global_attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.int64)
        if g.ndim != 2:
            raise ConfigError("scene grid must be 2-D")
        if g.min() < 0 or g.max() >= len(CELL_SYMBOLS):
            raise VocabularyError("cell symbol outside the closed vocabulary")
        if self.global_attrs.get("weather") not in WEATHER or self.global_attrs.get("daytime") not in DAYTIME:
            raise VocabularyError(f"bad global attributes {self.global_attrs}")
        g.setflags(write=False)
        object.__setattr__(self, "grid", g)

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    def symbol(self, row: int, col: int) -> str:
        return CELL_SYMBOLS[self.grid[row, col]]

    def quadrant_cells(self, quadrant: str) -> np.ndarray:
        r, c = self.shape
        hr, hc = (r + 1) // 2, (c + 1) // 2
        rows = slice(0, hr) if quadrant[0] == "U" else slice(hr, r)
        cols = slice(0, hc) if quadrant[1] == "L" else slice(hc, c)
        return self.grid[rows, cols]

    def with_cells(self, updates: dict[tuple[int, int], str]) -> "SynthScene":
        g = self.grid.copy()
        for (row, col), sym in updates.items():
            g[row, col] = CELL_SYMBOLS.index(sym)
        return SynthScene(g, dict(self.global_attrs))

    def one_hot(self) -> np.ndarray:
        """Row-major (n, FEATURE_DIM) encoding: cell symbol | weather | daytime."""
        n = self.grid.size
        out = np.zeros((n, FEATURE_DIM))
        out[np.arange(n), self.grid.reshape(-1)] = 1.0
        out[:, len(CELL_SYMBOLS) + WEATHER.index(self.global_attrs["weather"])] = 1.0
        out[:, len(CELL_SYMBOLS) + len(WEATHER) + DAYTIME.index(self.global_attrs["daytime"])] = 1.0
        return out

    def to_json(self) -> dict:
        return {"grid": self.grid.tolist(), "global_attrs": dict(self.global_attrs)}

    @classmethod
    def from_json(cls, d: dict) -> "SynthScene":
        return cls(np.array(d["grid"], dtype=np.int64), dict(d["global_attrs"]))

    def __eq__(self, other):
        return (isinstance(other, SynthScene) and self.grid.shape == other.grid.shape
                and bool(np.all(self.grid == other.grid)) and self.global_attrs == other.global_attrs)

    __hash__ = None


@dataclass(frozen=True)
class CaptionSet:
    scene_caption: tuple
    region_captions: dict

    def to_json(self) -> dict:
        return {"scene": list(self.scene_caption),
                "regions": {q: list(self.region_captions[q]) for q in QUADRANTS}}

    @classmethod
    def from_json(cls, d: dict) -> "CaptionSet":
        return cls(tuple(d["scene"]), {q: tuple(d["regions"][q]) for q in QUADRANTS})


def _check_grid_shape(grid_shape):
    r, c = grid_shape
    if r < 2 or c < 2 or r % 2 or c % 2:
        raise ConfigError(f"scene grid dims must be even and >= 2, got {grid_shape}")
    if r > MAX_GRID or c > MAX_GRID:
        raise ConfigError(f"scene grid limited to {MAX_GRID}x{MAX_GRID}")


def _quadrant_coords(r: int, c: int, quadrant: str) -> list[tuple[int, int]]:
    hr, hc = (r + 1) // 2, (c + 1) // 2
    rows = range(0, hr) if quadrant[0] == "U" else range(hr, r)
    cols = range(0, hc) if quadrant[1] == "L" else range(hc, c)
    return [(i, j) for i in rows for j in cols]


def gen_scene(rng: np.random.Generator, grid_shape=(4, 4), global_attrs: dict | None = None) -> SynthScene:
    """Random scene: each quadrant gets 1-2 objects, global attributes uniform."""
    _check_grid_shape(grid_shape)
    r, c = grid_shape
    grid = np.zeros((r, c), dtype=np.int64)
    for q in QUADRANTS:
        coords = _quadrant_coords(r, c, q)
        k = int(rng.integers(1, min(2, len(coords)) + 1))
        for ci in rng.choice(len(coords), size=k, replace=False):
            grid[coords[ci]] = 1 + int(rng.integers(len(OBJECTS)))
    if global_attrs is None:
        global_attrs = {"weather": WEATHER[rng.integers(len(WEATHER))],
                        "daytime": DAYTIME[rng.integers(len(DAYTIME))]}
    return SynthScene(grid, dict(global_attrs))


def gen_captions(scene: SynthScene) -> CaptionSet:
    ga = scene.global_attrs
    scene_cap = ("scene", ga["weather"].lower(), ga["daytime"].lower())
    regions = {}
    for q in QUADRANTS:
        present = sorted(set(int(s) for s in scene.quadrant_cells(q).reshape(-1)) - {0})
        words = ["region"]
        for s in present:
            words.extend(symbol_words(CELL_SYMBOLS[s]))
        if not present:
            words.append("empty")
        regions[q] = tuple(words)
    return CaptionSet(scene_cap, regions)


@dataclass
class VideoSample:
    frames: list
    question: tuple
    answer: str
    kind: QuestionKind
    seed: int = 0
    index: int = 0

    def __post_init__(self):
        self.kind = QuestionKind(self.kind)

    @property
    def answer_id(self) -> int:
        return ANSWER_INDEX[self.answer]

    def to_json(self) -> dict:
        return {
            "frames": [f.to_json() for f in self.frames],
            "captions": [gen_captions(f).to_json() for f in self.frames],
            "question": list(self.question),
            "answer": self.answer,
            "kind": self.kind.value,
            "seed": self.seed,
            "index": self.index,
        }

    @classmethod
    def from_json(cls, d: dict) -> "VideoSample":
        return cls([SynthScene.from_json(f) for f in d["frames"]], tuple(d["question"]),
                   d["answer"], QuestionKind(d["kind"]), d.get("seed", 0), d.get("index", 0))


def answer_for(frames: Sequence[SynthScene], question: Sequence[str]) -> str:
    """Ground-truth answer; reads only the last frame for detail questions."""
    last = frames[-1]
    q = tuple(question)
    if q[:3] == DETAIL_Q:
        _, r, c = q[3].split("_")
        return last.symbol(int(r), int(c))
    if q[:3] == GLOBAL_Q and q[3] in ("weather", "daytime"):
        return last.global_attrs[q[3]]
    raise VocabularyError(f"unrecognised question {q}")


def gen_video_qa(rng: np.random.Generator, T: int, kind, grid_shape=(4, 4)) -> VideoSample:
    """One VideoQA sample.

    Detail questions ask which object occupies a given cell in the last frame.
    The queried quadrant of every frame is filled with distinct objects, and
    in frames before the last the queried cell holds an object absent from
    the last frame's queried quadrant, so early frames never reveal the answer.
    """
    if T < 2:
        raise ConfigError("a video needs at least two frames")
    kind = QuestionKind(kind)
    _check_grid_shape(grid_shape)
    r, c = grid_shape
    ga = {"weather": WEATHER[rng.integers(len(WEATHER))], "daytime": DAYTIME[rng.integers(len(DAYTIME))]}
    frames = [gen_scene(rng, grid_shape, ga) for _ in range(T)]

    if kind is QuestionKind.GLOBAL_CONTEXT:
        attr = ("weather", "daytime")[rng.integers(2)]
        question = GLOBAL_Q + (attr,)
        return VideoSample(frames, question, ga[attr], kind)

    row, col = int(rng.integers(r)), int(rng.integers(c))
    quadrant = ("U" if row < (r + 1) // 2 else "L") + ("L" if col < (c + 1) // 2 else "R")
    coords = _quadrant_coords(r, c, quadrant)
    others = [xy for xy in coords if xy != (row, col)]
    fill = others if len(others) <= 3 else [others[i] for i in sorted(rng.choice(len(others), 3, replace=False))]
    objects = np.array(OBJECTS)

    answer = str(objects[rng.integers(len(objects))])
    rest = [o for o in OBJECTS if o != answer]
    last_set = [answer] + [str(x) for x in rng.choice(rest, size=len(fill), replace=False)]
    updates = {xy: "EMPTY" for xy in coords}
    updates[(row, col)] = last_set[0]
    updates.update(zip(fill, last_set[1:]))
    frames[-1] = frames[-1].with_cells(updates)

    outside = [o for o in OBJECTS if o not in last_set]
    for t in range(T - 1):
        decoy = str(outside[rng.integers(len(outside))])
        pool = [o for o in OBJECTS if o != decoy]
        early = {xy: "EMPTY" for xy in coords}
        early[(row, col)] = decoy
        early.update(zip(fill, (str(x) for x in rng.choice(pool, size=len(fill), replace=False))))
        frames[t] = frames[t].with_cells(early)

    question = DETAIL_Q + (cell_token(row, col),)
    return VideoSample(frames, question, answer, kind)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("SRC_KIT_THREADS", "1")))
    except ValueError:
        return 1


def gen_video_dataset(seed: int, count: int, T: int, kind: str, grid_shape=(4, 4)) -> list[VideoSample]:
    """``kind`` is a QuestionKind value or ``"mixed"`` (alternating by index)."""

    def one(i: int) -> VideoSample:
        k = kind
        if kind == "mixed":
            k = (QuestionKind.LAST_FRAME_DETAIL, QuestionKind.GLOBAL_CONTEXT)[i % 2]
        s = gen_video_qa(sample_rng(seed, i), T, k, grid_shape)
        s.seed, s.index = seed, i
        return s

    with ThreadPoolExecutor(max_workers=_workers()) as ex:
        return list(ex.map(one, range(count)))


def gen_scene_corpus(seed: int, count: int, grid_shape=(4, 4)) -> list[SynthScene]:
    with ThreadPoolExecutor(max_workers=_workers()) as ex:
        return list(ex.map(lambda i: gen_scene(sample_rng(seed, i), grid_shape), range(count)))


class TextEmbedder:
    """Frozen bag-of-symbols plus position-tagged random projection, unit-norm output."""

    def __init__(self, d_text: int = 64, seed: int = 1234, max_len: int = 12, vocabulary=None):
        self.vocabulary = {s: i for i, s in enumerate(vocabulary or text_vocabulary())}
        self.d_text = d_text
        self.max_len = max_len
        self.seed = seed
        v = len(self.vocabulary)
        rng = np.random.default_rng(seed)
        proj = rng.normal(size=(v * (1 + max_len), d_text)) / np.sqrt(d_text)
        proj.setflags(write=False)
        self.projection = proj

    def features(self, caption: Iterable[str]) -> np.ndarray:
        v = len(self.vocabulary)
        f = np.zeros(v * (1 + self.max_len))
        for pos, sym in enumerate(caption):
            if sym not in self.vocabulary:
                raise VocabularyError(f"unknown text symbol {sym!r}")
            i = self.vocabulary[sym]
            f[i] += 1.0
            f[v * (1 + min(pos, self.max_len - 1)) + i] += 1.0
        return f

    def encode(self, caption: Iterable[str]) -> np.ndarray:
        e = self.features(caption) @ self.projection
        return e / np.linalg.norm(e)


def encode_text(embedder: TextEmbedder, caption: Iterable[str]) -> np.ndarray:
    return embedder.encode(caption)


def write_jsonl(path, records: Iterable[dict]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def read_jsonl(path) -> list[dict]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


def scene_record(scene: SynthScene, seed: int, index: int) -> dict:
    return {"frames": [scene.to_json()], "captions": [gen_captions(scene).to_json()],
            "question": None, "answer": None, "kind": None, "seed": seed, "index": index}


def save_videos(path, samples: Sequence[VideoSample]):
    write_jsonl(path, (s.to_json() for s in samples))


def load_videos(path) -> list[VideoSample]:
    return [VideoSample.from_json(d) for d in read_jsonl(path)]


def save_scenes(path, scenes: Sequence[SynthScene], seed: int = 0):
    write_jsonl(path, (scene_record(s, seed, i) for i, s in enumerate(scenes)))


def load_scenes(path) -> list[SynthScene]:
    return [SynthScene.from_json(d["frames"][0]) for d in read_jsonl(path)]
