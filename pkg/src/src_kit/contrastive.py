"""Stage one: align scene/region tokens with caption embeddings, and retrieval evaluation.

Both losses are symmetric InfoNCE with a learnable temperature. The region
loss contrasts every region feature against all region captions in the
batch, including the other three regions of the same frame.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, NumericError
from .numeric import RMSProp, Tensor, as_tensor, cross_entropy, exp, matmul, reshape, transpose
from .synth import QUADRANTS, SynthScene, TextEmbedder, gen_captions
from .vit import SrcVitModel, project_image_features

log = logging.getLogger(__name__)

TAU_MIN, TAU_MAX = 0.01, 1.0
UNIT_TOL = 1e-6


@dataclass
class ContrastBatch:
    """Joint-space features for B scenes.

    Region rows are ordered sample-major, then UL, UR, LL, LR, identically on
    the image and text sides. ``log_tau`` is the log temperature.
    """

    image_scene: object
    image_regions: object
    text_scene: object
    text_regions: object
    log_tau: object = float(np.log(0.07))

    def __post_init__(self):
        for name in ("image_scene", "image_regions", "text_scene", "text_regions"):
            t = as_tensor(getattr(self, name))
            setattr(self, name, t)
            norms = np.linalg.norm(t.data, axis=-1)
            if not np.allclose(norms, 1.0, atol=UNIT_TOL):
                raise ContractError(f"{name} rows must be unit-norm (max dev {np.abs(norms - 1).max():.2e})")
        self.log_tau = as_tensor(self.log_tau)
        b = self.image_scene.shape[0]
        if b < 1 or self.text_scene.shape[0] != b:
            raise ContractError("scene feature batches must be non-empty and equal in size")
        if self.image_regions.shape[0] != 4 * b or self.text_regions.shape[0] != 4 * b:
            raise ContractError("region features must hold exactly 4B rows")

    @property
    def tau(self) -> float:
        return float(np.exp(self.log_tau.data))


def _symmetric_infonce(img: Tensor, txt: Tensor, log_tau: Tensor) -> Tensor:
    logits = matmul(img, transpose(txt, (1, 0))) * exp(-log_tau)
    targets = np.arange(img.shape[0])
    return (cross_entropy(logits, targets) + cross_entropy(transpose(logits, (1, 0)), targets)) * 0.5


def scene_loss(batch: ContrastBatch) -> Tensor:
    return _symmetric_infonce(batch.image_scene, batch.text_scene, batch.log_tau)


def region_loss(batch: ContrastBatch) -> Tensor:
    return _symmetric_infonce(batch.image_regions, batch.text_regions, batch.log_tau)


def total_loss(batch: ContrastBatch) -> Tensor:
    return scene_loss(batch) * 0.5 + region_loss(batch) * 0.5


def caption_targets(embedder: TextEmbedder, scenes: Sequence[SynthScene]) -> tuple[np.ndarray, np.ndarray]:
    """Caption embeddings: scene (N, d) and regions (N, 4, d)."""
    scene_t, region_t = [], []
    for s in scenes:
        caps = gen_captions(s)
        scene_t.append(embedder.encode(caps.scene_caption))
        region_t.append([embedder.encode(caps.region_captions[q]) for q in QUADRANTS])
    return np.array(scene_t), np.array(region_t)


def model_batch(model: SrcVitModel, features: np.ndarray, text_scene: np.ndarray,
                text_regions: np.ndarray) -> ContrastBatch:
    out = model.forward(features)
    s_img, r_img = model.project(out)
    b = features.shape[0]
    return ContrastBatch(s_img, reshape(r_img, (4 * b, -1)), text_scene,
                         text_regions.reshape(4 * b, -1), model.params["log_tau"])


@dataclass
class Stage1Config:
    steps: int = 200
    batch: int = 8
    lr: float = 3e-3
    seed: int = 0
    clip_norm: float | None = 5.0
    eval_batches: int = 8


@dataclass
class Stage1Result:
    model: SrcVitModel
    curve: list = field(default_factory=list)
    initial_loss: float = float("nan")
    final_loss: float = float("nan")


def clamp_temperature(model: SrcVitModel):
    lt = model.params["log_tau"]
    lt.data = np.clip(lt.data, np.log(TAU_MIN), np.log(TAU_MAX))


def mean_total_loss(model: SrcVitModel, features, text_scene, text_regions, batches) -> float:
    vals = [float(total_loss(model_batch(model, features[ix], text_scene[ix], text_regions[ix])).data)
            for ix in batches]
    return float(np.mean(vals))


def train_stage1(model: SrcVitModel, scenes: Sequence[SynthScene], embedder: TextEmbedder,
                 config: Stage1Config, out_dir=None) -> Stage1Result:
    if embedder.d_text != model.config.d_joint:
        raise ContractError("text embedding width must equal the model's joint dimension")
    features = model.scene_features(scenes)
    text_scene, text_regions = caption_targets(embedder, scenes)
    n = len(scenes)
    b = min(config.batch, n)
    rng = np.random.default_rng([config.seed, 7])
    eval_rng = np.random.default_rng([config.seed, 8])
    eval_ix = [eval_rng.choice(n, b, replace=False) for _ in range(config.eval_batches)]
    opt = RMSProp(model.params, lr=config.lr, clip_norm=config.clip_norm)

    initial = mean_total_loss(model, features, text_scene, text_regions, eval_ix)
    curve = []
    for step in range(config.steps):
        ix = rng.choice(n, b, replace=False)
        model.params.zero_grad()
        batch = model_batch(model, features[ix], text_scene[ix], text_regions[ix])
        ls, lr_ = scene_loss(batch), region_loss(batch)
        loss = ls * 0.5 + lr_ * 0.5
        if not np.isfinite(loss.data):
            raise NumericError(f"stage-one loss diverged at step {step}")
        loss.backward()
        opt.step()
        clamp_temperature(model)
        curve.append({"step": step, "scene_loss": float(ls.data), "region_loss": float(lr_.data),
                      "total_loss": float(loss.data), "tau": float(np.exp(model.params["log_tau"].data))})
    model.params.zero_grad()
    final = mean_total_loss(model, features, text_scene, text_regions, eval_ix)
    log.info("stage one: total loss %.4f -> %.4f over %d steps", initial, final, config.steps)
    result = Stage1Result(model, curve, initial, final)
    if out_dir is not None:
        out = Path(out_dir)
        model.save(out / "src_vit", {"stage1": asdict(config), "initial_loss": initial, "final_loss": final})
        write_curve(out / "stage1_curve.csv", curve)
    return result


def write_curve(path, curve: list[dict]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = list(curve[0]) if curve else ["step"]
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in curve:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})


def _recall_at_1(queries: np.ndarray, pool: np.ndarray, query_labels, pool_labels) -> tuple[float, float]:
    """Recall@1 where a hit means the retrieved item carries the query's caption.

    Returns (recall, chance) with chance the expected recall of a uniformly
    random pick, which accounts for duplicate captions in the pool.
    """
    sims = queries @ pool.T
    best = np.argmax(sims, axis=1)
    pool_labels = np.array([" ".join(l) for l in pool_labels])
    query_labels = np.array([" ".join(l) for l in query_labels])
    hits = pool_labels[best] == query_labels
    chance = (query_labels[:, None] == pool_labels[None, :]).mean(axis=1)
    return float(np.mean(hits)), float(np.mean(chance))


def eval_retrieval(model: SrcVitModel, embedder: TextEmbedder, held_out: Sequence[SynthScene]) -> dict:
    enc = model.encode(held_out)
    feats = project_image_features(model, enc)  # (N, 5, d_j)
    caps = [gen_captions(s) for s in held_out]
    scene_lab = [c.scene_caption for c in caps]
    region_lab = [c.region_captions[q] for c in caps for q in QUADRANTS]
    text_scene, text_regions = caption_targets(embedder, held_out)
    text_regions = text_regions.reshape(-1, text_regions.shape[-1])
    img_scene = feats[:, 0]
    img_regions = feats[:, 1:].reshape(-1, feats.shape[-1])

    i2t, chance_scene = _recall_at_1(img_scene, text_scene, scene_lab, scene_lab)
    t2i, _ = _recall_at_1(text_scene, img_scene, scene_lab, scene_lab)
    r_i2t, chance_region = _recall_at_1(img_regions, text_regions, region_lab, region_lab)
    r_t2i, _ = _recall_at_1(text_regions, img_regions, region_lab, region_lab)
    s_r_i2t, _ = _recall_at_1(np.repeat(img_scene, 4, axis=0), text_regions, region_lab, region_lab)
    n = len(held_out)
    return {
        "pool_size": n,
        "ItoT_recall@1": i2t,
        "TtoI_recall@1": t2i,
        "region_ItoT_recall@1": r_i2t,
        "region_TtoI_recall@1": r_t2i,
        "scene_token_region_ItoT_recall@1": s_r_i2t,
        "chance_scene": chance_scene,
        "chance_region": chance_region,
        "uniform_chance": 1.0 / n,
    }


def write_report(path, report: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
