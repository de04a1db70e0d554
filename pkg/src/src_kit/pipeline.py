"""Compressed-frame VideoQA pipeline: token substitution, mapper, toy decoder, stage two.

Compressed frames contribute their five compression tokens (or a variant's
stand-in) instead of their n patch tokens. All visual tokens pass through the
same vision-language mapper, then the text tokens of the question follow the
visual block and a small causal decoder with 3-axis rotary positions reads
the answer from the last position.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import CapacityError, ConfigError, NumericError, ShapeError
from .numeric import Adam, AttnMask, ParamStore, Tensor, concat, cross_entropy, gelu, layer_norm, linear, softmax
from .position import assign_positions, mrope_angles
from .synth import ANSWERS, QuestionKind, TextEmbedder, VideoSample
from .tokens import COMPRESSION_KINDS, QUADRANTS, RegionLayout, TokenKind, TokenSeq
from .transformer import block_forward, init_block
from .vit import EncodedFrame, SrcVitModel

log = logging.getLogger(__name__)


class Variant(str, enum.Enum):
    FULL = "FULL"
    SRC = "SRC"
    S_ONLY = "S_ONLY"
    AVG_POOL = "AVG_POOL"
    NO_SR = "NO_SR"
    REVERSE = "REVERSE"

    @classmethod
    def parse(cls, s) -> "Variant":
        if isinstance(s, cls):
            return s
        key = str(s).strip().upper().replace("-", "_")
        aliases = {"SONLY": "S_ONLY", "AVG": "AVG_POOL", "AVGPOOL": "AVG_POOL", "NOSR": "NO_SR"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ConfigError(f"unknown variant {s!r}") from None


@dataclass(frozen=True)
class PipelineConfig:
    T: int = 5
    M: int = 4
    rows: int = 4
    cols: int = 4
    variant: Variant = Variant.SRC
    d_enc: int = 32
    d_dec: int = 48
    dec_layers: int = 2
    dec_heads: int = 4
    max_len: int = 128
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        if self.T < 1:
            raise ConfigError("T must be positive")
        if not 0 <= self.M <= self.T:
            raise ConfigError(f"compressed-frame count M={self.M} must lie in [0, T={self.T}]")
        if self.d_dec % self.dec_heads:
            raise ConfigError("decoder width must be divisible by its head count")

    @property
    def n(self) -> int:
        return self.rows * self.cols

    @property
    def layout(self) -> RegionLayout:
        return RegionLayout(self.rows, self.cols)

    def compressed_frames(self) -> list[int]:
        if self.variant is Variant.FULL:
            return []
        if self.variant is Variant.REVERSE:
            return list(range(self.T - self.M, self.T))
        return list(range(self.M))

    def tokens_per_compressed_frame(self) -> int:
        return {Variant.S_ONLY: 1, Variant.NO_SR: 0}.get(self.variant, 5)

    def visual_tokens(self) -> int:
        k = len(self.compressed_frames())
        return k * self.tokens_per_compressed_frame() + (self.T - k) * self.n

    def to_json(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d


class VlMapper:
    """Two-layer MLP from encoder width to decoder width, one GELU in between."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, params: ParamStore | None = None,
                 prefix: str = "mapper"):
        self.params = params if params is not None else ParamStore()
        self.prefix = prefix
        self.d_in, self.d_out = d_in, d_out
        self.params.add(f"{prefix}.w1", rng.normal(0, d_in**-0.5, (d_in, d_out)))
        self.params.add(f"{prefix}.b1", np.zeros(d_out))
        self.params.add(f"{prefix}.w2", rng.normal(0, d_out**-0.5, (d_out, d_out)))
        self.params.add(f"{prefix}.b2", np.zeros(d_out))

    def __call__(self, x) -> Tensor:
        p, pre = self.params, self.prefix
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"mapper expects width {self.d_in}, got {x.shape[-1]}")
        h = gelu(linear(x, p[f"{pre}.w1"], p[f"{pre}.b1"]))
        return linear(h, p[f"{pre}.w2"], p[f"{pre}.b2"])


@dataclass(frozen=True)
class DecoderConfig:
    d: int = 48
    layers: int = 2
    heads: int = 4
    max_len: int = 128
    d_text: int = 64
    n_answers: int = len(ANSWERS)


class ToyDecoder:
    """Causal pre-norm transformer with 3-axis rotary q/k; classifies the last position."""

    def __init__(self, config: DecoderConfig, rng: np.random.Generator, params: ParamStore | None = None,
                 prefix: str = "decoder"):
        self.config = config
        self.params = params if params is not None else ParamStore()
        self.prefix = prefix
        c, p = config, self.params
        if (c.d // c.heads) % 6:
            raise ConfigError(f"head dim {c.d // c.heads} must split into three even rotary chunks")
        p.add(f"{prefix}.text_proj", rng.normal(0, c.d_text**-0.5, (c.d_text, c.d)))
        for i in range(c.layers):
            init_block(p, f"{prefix}.block{i}", c.d, rng)
        p.add(f"{prefix}.ln_f.g", np.ones(c.d))
        p.add(f"{prefix}.ln_f.b", np.zeros(c.d))
        p.add(f"{prefix}.head.w", rng.normal(0, 0.02, (c.d, c.n_answers)))
        p.add(f"{prefix}.head.b", np.zeros(c.n_answers))

    def embed_text(self, text_embeddings) -> Tensor:
        """(..., q, d_text) frozen symbol embeddings -> (..., q, d)."""
        return linear(text_embeddings if isinstance(text_embeddings, Tensor) else Tensor(text_embeddings),
                      self.params[f"{self.prefix}.text_proj"])

    def logits(self, seq: TokenSeq) -> Tensor:
        c, p, pre = self.config, self.params, self.prefix
        n = len(seq)
        if n > c.max_len:
            raise CapacityError(f"sequence of {n} tokens exceeds decoder capacity {c.max_len}")
        if n == 0:
            raise ShapeError("cannot decode an empty sequence")
        if seq.pos is None:
            raise ConfigError("positions must be assigned before decoding")
        rope = mrope_angles(seq.pos, c.d // c.heads)
        causal = AttnMask.causal(n).allowed
        x = seq.emb
        for i in range(c.layers):
            x = block_forward(x, p, f"{pre}.block{i}", c.heads, causal, rope=rope)
        x = layer_norm(x, p[f"{pre}.ln_f.g"], p[f"{pre}.ln_f.b"])
        last = x[(Ellipsis, -1, slice(None))]
        return linear(last, p[f"{pre}.head.w"], p[f"{pre}.head.b"])


def _frame_block(frame: EncodedFrame, t: int, config: PipelineConfig, compressed: bool, layout: RegionLayout):
    """Encoder-space vectors contributed by frame ``t`` with their kinds and cells."""
    if not compressed:
        cells = [layout.cell_of(i) for i in range(layout.n)]
        return frame.patches, [TokenKind.PATCH] * layout.n, cells
    v = config.variant
    if v is Variant.NO_SR:
        return None, [], []
    if v is Variant.S_ONLY:
        return frame.compression[..., :1, :], [TokenKind.SCENE], [(-1, -1)]
    if v is Variant.AVG_POOL:
        pools = [frame.patches.mean(axis=-2)]
        pools += [frame.patches[..., layout.member_patch_indices(q), :].mean(axis=-2) for q in QUADRANTS]
        return np.stack(pools, axis=-2), list(COMPRESSION_KINDS), [(-1, -1)] * 5
    return frame.compression, list(COMPRESSION_KINDS), [(-1, -1)] * 5


def assemble_visual(frames: Sequence[EncodedFrame], config: PipelineConfig, mapper: VlMapper) -> TokenSeq:
    """Visual block: per frame either mapped patch tokens or the variant's compressed stand-in."""
    if config.M > config.T:
        raise ConfigError("M > T")
    if len(frames) != config.T:
        raise ShapeError(f"expected {config.T} encoded frames, got {len(frames)}")
    layout = config.layout
    compressed = set(config.compressed_frames())
    blocks, kinds, frame_ix, cells = [], [], [], []
    for t, fr in enumerate(frames):
        if fr.patches.shape[-2] != layout.n:
            raise ShapeError(f"frame {t} has {fr.patches.shape[-2]} patches, expected {layout.n}")
        vecs, k, c = _frame_block(fr, t, config, t in compressed, layout)
        if vecs is not None:
            blocks.append(vecs)
        kinds += k
        frame_ix += [t] * len(k)
        cells += c
    lead = frames[0].patches.shape[:-2] if frames else ()
    if blocks:
        emb = mapper(np.concatenate(blocks, axis=-2))
    else:
        emb = Tensor(np.zeros((*lead, 0, mapper.d_out)))
    return TokenSeq(kinds, frame_ix, np.array(cells, dtype=np.int64).reshape(-1, 2), emb,
                    layouts={t: layout for t in range(config.T)})


def assemble_input(visual: TokenSeq, question: Tensor, layouts=None) -> TokenSeq:
    """Decoder input: visual block then text block, with rotary positions assigned."""
    q = question if isinstance(question, Tensor) else Tensor(question)
    nq = q.shape[-2]
    v_emb = visual.emb if isinstance(visual.emb, Tensor) else Tensor(visual.emb)
    if v_emb.shape[-2] == 0:
        lead = q.shape[:-2]
        emb = q
        if v_emb.shape[:-2] != lead:
            raise ShapeError("visual and text blocks disagree in batch shape")
    else:
        emb = concat([v_emb, q], axis=-2)
    seq = TokenSeq(
        np.concatenate([visual.kinds, np.full(nq, int(TokenKind.TEXT))]),
        np.concatenate([visual.frame, np.full(nq, -1)]),
        np.concatenate([visual.cell.reshape(-1, 2), np.full((nq, 2), -1)]),
        emb,
        layouts=visual.layouts,
    )
    layouts = layouts if layouts is not None else visual.layouts
    return assign_positions(seq, layouts)


def decode_answer(decoder: ToyDecoder, seq: TokenSeq) -> np.ndarray:
    """Answer distribution over the closed vocabulary, read at the final position."""
    return softmax(decoder.logits(seq).data)


# ---------------------------------------------------------------- stage two


@dataclass
class Stage2Config:
    steps: int = 3000
    batch: int = 32
    lr: float = 1e-3
    seed: int = 0
    clip_norm: float | None = 1.0
    log_every: int = 50


@dataclass
class EncodedDataset:
    """Frozen-encoder outputs for a list of VideoQA samples."""

    compression: np.ndarray  # (S, T, 5, d)
    patches: np.ndarray  # (S, T, n, d)
    question: np.ndarray  # (S, q, d_text)
    answers: np.ndarray  # (S,)
    kinds: np.ndarray  # (S,) of QuestionKind values

    def __len__(self):
        return len(self.answers)

    def frames(self, idx) -> list[EncodedFrame]:
        return [EncodedFrame(self.compression[idx, t], self.patches[idx, t])
                for t in range(self.compression.shape[1])]


def encode_dataset(src_vit: SrcVitModel, embedder: TextEmbedder, samples: Sequence[VideoSample]) -> EncodedDataset:
    T = len(samples[0].frames)
    if any(len(s.frames) != T for s in samples):
        raise ShapeError("all samples must have the same frame count")
    flat = [f for s in samples for f in s.frames]
    enc = src_vit.encode(flat)
    S = len(samples)
    comp = enc.compression.reshape(S, T, *enc.compression.shape[1:])
    patches = enc.patches.reshape(S, T, *enc.patches.shape[1:])
    cache = {}
    q = np.array([[cache.setdefault(w, embedder.encode([w])) for w in s.question] for s in samples])
    return EncodedDataset(comp, patches, q,
                          np.array([s.answer_id for s in samples]),
                          np.array([s.kind.value for s in samples]))


@dataclass
class Stage2Model:
    config: PipelineConfig
    mapper: VlMapper
    decoder: ToyDecoder
    params: ParamStore

    def forward(self, data: EncodedDataset, idx) -> Tensor:
        visual = assemble_visual(data.frames(idx), self.config, self.mapper)
        seq = assemble_input(visual, self.decoder.embed_text(data.question[idx]))
        return self.decoder.logits(seq)

    def predict(self, data: EncodedDataset, batch: int = 250) -> np.ndarray:
        out = []
        for i in range(0, len(data), batch):
            idx = np.arange(i, min(i + batch, len(data)))
            out.append(softmax(self.forward(data, idx).data))
        return np.concatenate(out)


def build_stage2(config: PipelineConfig, d_text: int = 64) -> Stage2Model:
    rng = np.random.default_rng([config.seed, 202])
    params = ParamStore()
    mapper = VlMapper(config.d_enc, config.d_dec, rng, params)
    decoder = ToyDecoder(DecoderConfig(config.d_dec, config.dec_layers, config.dec_heads, config.max_len, d_text),
                         rng, params)
    return Stage2Model(config, mapper, decoder, params)


def accuracy_by_kind(probs: np.ndarray, data: EncodedDataset) -> dict:
    hit = probs.argmax(axis=1) == data.answers
    out = {"accuracy": float(hit.mean())}
    for k, name in ((QuestionKind.LAST_FRAME_DETAIL, "accuracy_last_frame"),
                    (QuestionKind.GLOBAL_CONTEXT, "accuracy_global")):
        sel = data.kinds == k.value
        out[name] = float(hit[sel].mean()) if sel.any() else None
    return out


@dataclass
class Stage2Result:
    model: Stage2Model
    curve: list = field(default_factory=list)
    vit_checksum_before: str = ""
    vit_checksum_after: str = ""


def train_stage2(src_vit: SrcVitModel, model: Stage2Model, data: EncodedDataset, config: Stage2Config) -> Stage2Result:
    """Fit mapper + decoder on frozen encoder outputs with answer cross-entropy (Adam).

    The encoder's parameters are never handed to the optimizer; its checksum
    is recorded before and after as evidence.
    """
    before = src_vit.params.checksum()
    opt = Adam(model.params, lr=config.lr, clip_norm=config.clip_norm)
    rng = np.random.default_rng([config.seed, 303])
    n = len(data)
    b = min(config.batch, n)
    curve, running = [], []
    order, pos = rng.permutation(n), 0
    for step in range(config.steps):
        if pos + b > n:
            order, pos = rng.permutation(n), 0
        idx = order[pos:pos + b]
        pos += b
        model.params.zero_grad()
        logits = model.forward(data, idx)
        loss = cross_entropy(logits, data.answers[idx])
        if not np.isfinite(loss.data):
            raise NumericError(f"stage-two loss diverged at step {step}")
        loss.backward()
        opt.step()
        running.append(float(loss.data))
        if (step + 1) % config.log_every == 0 or step == config.steps - 1:
            acc = float((logits.data.argmax(axis=1) == data.answers[idx]).mean())
            curve.append({"step": step, "loss": float(np.mean(running)), "batch_accuracy": acc})
            running = []
    model.params.zero_grad()
    after = src_vit.params.checksum()
    return Stage2Result(model, curve, before, after)
