"""Scene-region compression ViT.

Each frame's patch tokens are prefixed with one scene token and four region
tokens, ordered ``[S, R_UL, R_UR, R_LL, R_LR, P_1 .. P_n]``. Region tokens may
only attend to patches inside their quadrant, at every layer.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .numeric import AttnMask, ParamStore, Tensor, concat, l2_normalize, layer_norm, linear
from .numeric.tensor import broadcast_to
from .synth import FEATURE_DIM, SynthScene
from .tokens import QUADRANTS, RegionLayout
from .transformer import block_forward, init_block

N_COMPRESSION = 5


@dataclass(frozen=True)
class SrcVitConfig:
    rows: int = 4
    cols: int = 4
    d: int = 32
    layers: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    d_joint: int = 64
    feature_dim: int = FEATURE_DIM
    seed: int = 0
    token_init_std: float = 0.02
    pos_init_std: float = 0.5
    embed_init_std: float = 0.5

    def __post_init__(self):
        if self.d % self.heads:
            raise ConfigError("d must be divisible by the head count")
        if self.rows > 16 or self.cols > 16:
            raise ConfigError("grids larger than 16x16 are not supported")

    @property
    def n(self) -> int:
        return self.rows * self.cols

    @property
    def layout(self) -> RegionLayout:
        return RegionLayout(self.rows, self.cols)


@dataclass
class EncodedFrame:
    """Encoder output for one frame (or a batch of frames along leading axes)."""

    compression: np.ndarray  # (..., 5, d): S, R_UL, R_UR, R_LL, R_LR
    patches: np.ndarray  # (..., n, d)

    def __post_init__(self):
        if self.compression.shape[-2] != N_COMPRESSION:
            raise ShapeError("compression block must hold exactly five tokens")
        if not (np.isfinite(self.compression).all() and np.isfinite(self.patches).all()):
            raise NumericError("encoder produced non-finite values")


def build_region_mask(layout: RegionLayout) -> AttnMask:
    n = layout.n
    allowed = np.ones((n + 5, n + 5), dtype=bool)
    for qi, q in enumerate(QUADRANTS):
        row = 1 + qi
        allowed[row, N_COMPRESSION:] = False
        allowed[row, N_COMPRESSION + layout.member_patch_indices(q)] = True
    return AttnMask(allowed)


class SrcVitModel:
    def __init__(self, config: SrcVitConfig, params: ParamStore | None = None):
        self.config = config
        self.mask = build_region_mask(config.layout)
        if params is None:
            params = self._init_params()
        self.params = params

    def _init_params(self) -> ParamStore:
        c = self.config
        rng = np.random.default_rng([c.seed, 101])
        p = ParamStore()
        p.add("patch_embed", rng.normal(0, c.embed_init_std, (c.feature_dim, c.d)))
        p.add("tokens", rng.normal(0, c.token_init_std, (N_COMPRESSION, c.d)))
        p.add("pos", rng.normal(0, c.pos_init_std, (c.n + N_COMPRESSION, c.d)))
        for i in range(c.layers):
            init_block(p, f"block{i}", c.d, rng, c.mlp_ratio)
        p.add("ln_f.g", np.ones(c.d))
        p.add("ln_f.b", np.zeros(c.d))
        p.add("scene_head", rng.normal(0, c.d**-0.5, (c.d, c.d_joint)))
        p.add("region_head", rng.normal(0, c.d**-0.5, (c.d, c.d_joint)))
        p.add("log_tau", np.array(np.log(0.07)))
        return p

    @property
    def encoder_param_names(self) -> list[str]:
        return [n for n in self.params.names() if n != "log_tau"]

    def scene_features(self, scenes: Sequence[SynthScene]) -> np.ndarray:
        c = self.config
        for s in scenes:
            if s.shape != (c.rows, c.cols):
                raise ShapeError(f"scene grid {s.shape} does not match model grid {(c.rows, c.cols)}")
        return np.stack([s.one_hot() for s in scenes])

    def patch_embed(self, features) -> Tensor:
        f = features if isinstance(features, Tensor) else Tensor(features)
        if f.shape[-1] != self.config.feature_dim:
            raise ShapeError(f"feature width {f.shape[-1]} != {self.config.feature_dim}")
        return linear(f, self.params["patch_embed"])

    def forward(self, features, attn_record: list | None = None) -> Tensor:
        """features: (B, n, F) one-hot cells -> encoder outputs (B, n + 5, d)."""
        c, p = self.config, self.params
        pe = self.patch_embed(features)
        b = pe.shape[0]
        toks = broadcast_to(p["tokens"], (b, N_COMPRESSION, c.d))
        z = concat([toks, pe], axis=1) + p["pos"]
        for i in range(c.layers):
            z = block_forward(z, p, f"block{i}", c.heads, self.mask.allowed, record=attn_record)
        return layer_norm(z, p["ln_f.g"], p["ln_f.b"])

    def project(self, out: Tensor) -> tuple[Tensor, Tensor]:
        """Unit-norm joint-space features: scene (B, d_j) and regions (B, 4, d_j)."""
        p = self.params
        scene = l2_normalize(linear(out[:, 0], p["scene_head"]))
        regions = l2_normalize(linear(out[:, 1:N_COMPRESSION], p["region_head"]))
        return scene, regions

    def encode(self, scenes: Sequence[SynthScene], batch_size: int = 512) -> EncodedFrame:
        """Batched inference without graph construction."""
        feats = self.scene_features(scenes)
        outs = []
        for i in range(0, len(feats), batch_size):
            outs.append(self.forward(feats[i:i + batch_size]).data)
        o = np.concatenate(outs) if outs else np.zeros((0, self.config.n + 5, self.config.d))
        return EncodedFrame(o[:, :N_COMPRESSION], o[:, N_COMPRESSION:])

    def save(self, path, extra: dict | None = None):
        meta = {"config": asdict(self.config), "seed": self.config.seed, "kind": "src_vit", **(extra or {})}
        return self.params.save(path, meta)

    @classmethod
    def load(cls, path) -> "SrcVitModel":
        state, manifest = ParamStore.read(path)
        model = cls(SrcVitConfig(**manifest["config"]))
        model.params.load_state(state)
        return model


def patch_embed(model: SrcVitModel, scene: SynthScene) -> np.ndarray:
    return model.patch_embed(model.scene_features([scene])[0]).data


def encode_frame(model: SrcVitModel, scene: SynthScene, return_attention: bool = False):
    rec = [] if return_attention else None
    out = model.forward(model.scene_features([scene]), attn_record=rec).data[0]
    frame = EncodedFrame(out[:N_COMPRESSION].copy(), out[N_COMPRESSION:].copy())
    if return_attention:
        return frame, [w[0] for w in rec]
    return frame


def project_image_features(model: SrcVitModel, encoded: EncodedFrame) -> np.ndarray:
    """(5, d_joint) unit vectors: projected scene token then the four regions."""
    p = model.params
    c = encoded.compression
    raw = np.concatenate([c[..., :1, :] @ p["scene_head"].data, c[..., 1:, :] @ p["region_head"].data], axis=-2)
    norms = np.linalg.norm(raw, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        bad = np.argwhere(norms[..., 0] == 0.0).tolist()
        raise NumericError(f"zero-norm projected feature at token index {bad}")
    return raw / norms
