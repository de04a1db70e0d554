"""Analytic prefill FLOPs for the toy decoder.

Per layer, each token pays 12·d² for its projections (4·d² for Q, K, V, O
and 8·d² for the 4x MLP) and the sequence pays 2·N²·d for scores plus the
weighted sum of values. These coefficients count one unit per
multiply-accumulate; doubling every count would not change any ratio.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

from .errors import ContractError
from .pipeline import PipelineConfig

LINEAR_COEF = 12
ATTN_COEF = 2
PAPER_CLAIMS = {"one_full_frame_flops_pct": 33.3, "abstract_flops_pct": 66.0}


@dataclass(frozen=True)
class FlopsReport:
    visual_tokens: int
    total_tokens: int
    linear_flops: int
    attention_flops: int
    total: int
    ratio_vs_baseline: float = 1.0
    encoder_flops: int = 0

    def to_json(self) -> dict:
        return asdict(self)


def decoder_flops(n_tokens: int, d: int, layers: int) -> tuple[int, int]:
    return layers * n_tokens * LINEAR_COEF * d * d, layers * ATTN_COEF * n_tokens * n_tokens * d


def encoder_flops(config: PipelineConfig, d_enc: int | None = None, layers: int = 2) -> int:
    """Informational: SrcVit cost over all T frames (n + 5 tokens each)."""
    d = d_enc or config.d_enc
    lin, att = decoder_flops(config.n + 5, d, layers)
    return config.T * (lin + att)


def estimate_flops(config: PipelineConfig, question_len: int, baseline: PipelineConfig | None = None) -> FlopsReport:
    if question_len < 0:
        raise ContractError("question length must be non-negative")
    v = config.visual_tokens()
    n_tok = v + question_len
    lin, att = decoder_flops(n_tok, config.d_dec, config.dec_layers)
    total = lin + att
    ratio = 1.0
    if baseline is not None:
        ratio = flops_ratio(config, baseline, question_len)
    return FlopsReport(v, n_tok, lin, att, total, ratio, encoder_flops(config))


def flops_ratio(variant_config: PipelineConfig, baseline_config: PipelineConfig, question_len: int) -> float:
    if (variant_config.d_dec, variant_config.dec_layers) != (baseline_config.d_dec, baseline_config.dec_layers):
        raise ContractError("FLOPs ratios need identical decoder dimensions")
    num = estimate_flops(variant_config, question_len).total
    den = estimate_flops(baseline_config, question_len).total
    if den == 0:
        raise ContractError("baseline has zero FLOPs")
    return num / den
