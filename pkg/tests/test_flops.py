import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from src_kit.errors import ContractError
from src_kit.flops import decoder_flops, estimate_flops, flops_ratio
from src_kit.pipeline import PipelineConfig, Variant

GRIDS = [(2, 2), (2, 4), (4, 4), (4, 8), (8, 8)]


def test_zero_tokens():
    assert decoder_flops(0, 48, 2) == (0, 0)
    r = estimate_flops(PipelineConfig(M=5, variant=Variant.NO_SR), 0)
    assert (r.visual_tokens, r.total_tokens, r.linear_flops, r.attention_flops, r.total) == (0, 0, 0, 0, 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 500), st.integers(1, 64), st.integers(1, 4))
def test_doubling_tokens(n, d, layers):
    lin, att = decoder_flops(n, d, layers)
    lin2, att2 = decoder_flops(2 * n, d, layers)
    assert lin2 == 2 * lin and att2 == 4 * att


def test_documented_ratio():
    src, full = PipelineConfig(variant=Variant.SRC), PipelineConfig(variant=Variant.FULL)
    a, b = estimate_flops(src, 4, baseline=full), estimate_flops(full, 4)
    assert (a.total_tokens, b.total_tokens) == (40, 84)
    # oracle: L=2, d=48 evaluated by hand from the formula
    assert a.linear_flops == 2 * 40 * 12 * 48 * 48 == 2211840
    assert a.attention_flops == 2 * 2 * 40 * 40 * 48 == 307200
    assert b.total == 2 * 84 * 12 * 48 * 48 + 2 * 2 * 84 * 84 * 48 == 5999616
    assert a.ratio_vs_baseline == pytest.approx(0.4198668714797747, abs=1e-15)
    assert a.total == a.linear_flops + a.attention_flops


@pytest.mark.parametrize("rows,cols", GRIDS)
@pytest.mark.parametrize("T", [1, 3, 5, 8])
def test_monotone_in_m(rows, cols, T):
    totals = [estimate_flops(PipelineConfig(T=T, M=m, rows=rows, cols=cols), 4).total for m in range(T + 1)]
    if rows * cols > 5:
        assert all(a > b for a, b in zip(totals, totals[1:]))
    else:
        # five compression tokens outnumber a tiny frame's patches
        assert all(a < b for a, b in zip(totals, totals[1:]))


@pytest.mark.parametrize("M", range(6))
def test_reverse_equals_src(M):
    a = estimate_flops(PipelineConfig(M=M, variant=Variant.SRC), 4)
    b = estimate_flops(PipelineConfig(M=M, variant=Variant.REVERSE), 4)
    assert a == b


def test_identity_ratios():
    full = PipelineConfig(variant=Variant.FULL)
    assert flops_ratio(PipelineConfig(M=0), full, 4) == 1.0
    assert flops_ratio(full, full, 0) == 1.0
    assert estimate_flops(PipelineConfig(M=0), 4, baseline=full).ratio_vs_baseline == 1.0


def test_ratio_at_most_one_when_fewer_tokens():
    full = PipelineConfig(variant=Variant.FULL)
    for v in Variant:
        for m in range(6):
            assert flops_ratio(PipelineConfig(M=m, variant=v), full, 4) <= 1.0


def test_zero_baseline_and_mismatch():
    empty = PipelineConfig(M=5, variant=Variant.NO_SR)
    with pytest.raises(ContractError):
        flops_ratio(PipelineConfig(), empty, 0)
    with pytest.raises(ContractError):
        flops_ratio(PipelineConfig(), PipelineConfig(d_dec=96), 4)
    with pytest.raises(ContractError):
        estimate_flops(PipelineConfig(), -1)


def test_all_compressed_limit():
    # wide decoder keeps the linear term dominant
    kw = dict(T=5, M=5, rows=16, cols=16, d_dec=48000, dec_heads=1)
    ratio = flops_ratio(PipelineConfig(**kw), PipelineConfig(**{**kw, "M": 0}), 0)
    assert ratio == pytest.approx(5 / 256, rel=0.05)


def test_encoder_flops_is_informational():
    a = estimate_flops(PipelineConfig(M=0), 4)
    b = estimate_flops(PipelineConfig(M=4), 4)
    assert a.encoder_flops == b.encoder_flops > 0
    assert a.to_json()["total"] == a.total
    assert np.isfinite(b.ratio_vs_baseline)
