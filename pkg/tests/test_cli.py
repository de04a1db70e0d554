import csv
import json

import pytest

from src_kit.cli import EXIT_IO, EXIT_USAGE, main, mask_text


@pytest.fixture(autouse=True)
def _in_tmp(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)


def _files(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def test_gen_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["gen", "--seed", "0", "--scenes", "64", "--qa", "20", "--test", "10", "--out", name]) == 0
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert set(a) == {"scenes.jsonl", "qa_train.jsonl", "qa_test.jsonl", "resolved_config.json"}
    a.pop("resolved_config.json"), b.pop("resolved_config.json")  # records --out
    assert a == b
    assert sorted(p.name for p in tmp_path.iterdir()) == ["a", "b"]


def test_gen_kind_last_frame(tmp_path):
    assert main(["gen", "--qa", "2000", "--test", "0", "--scenes", "0", "--kind", "last_frame", "--out", "d"]) == 0
    lines = (tmp_path / "d" / "qa_train.jsonl").read_text().splitlines()
    assert len(lines) == 2000
    assert {json.loads(l)["kind"] for l in lines} == {"LAST_FRAME_DETAIL"}


def test_malformed_flag(capsys):
    with pytest.raises(SystemExit) as e:
        main(["gen", "--bogus"])
    assert e.value.code == EXIT_USAGE
    assert "usage" in capsys.readouterr().err
    with pytest.raises(SystemExit) as e:
        main(["gen", "--grid", "four"])
    assert e.value.code == EXIT_USAGE


def test_train2_needs_checkpoint(capsys):
    assert main(["train2", "--out", "x"]) == EXIT_USAGE
    assert "--stage1-ckpt" in capsys.readouterr().err
    assert main(["train2", "--stage1-ckpt", "missing/src_vit", "--out", "x"]) == EXIT_IO
    assert main(["eval", "--out", "x"]) == EXIT_USAGE


def test_bad_config_file(tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    assert main(["gen", "--config", "c.json"]) == EXIT_USAGE
    (tmp_path / "c.json").write_text('{"nonsense": 1}')
    assert main(["gen", "--config", "c.json"]) == EXIT_USAGE
    assert main(["gen", "--config", "absent.json"]) == EXIT_IO


def test_flops_output(capsys):
    assert main(["flops", "--T", "5", "--n", "16", "--M", "4", "--q", "4"]) == 0
    out = capsys.readouterr().out
    assert "tokens 40" in out and "tokens 84" in out
    assert "flops ratio 0.4199" in out


def test_mask_dump(capsys):
    assert main(["mask-dump", "--grid", "4x4"]) == 0
    rows = [l.split()[1] for l in capsys.readouterr().out.splitlines()[1:]]
    assert len(rows) == 21 and all(len(r) == 21 for r in rows)
    for r in rows[1:5]:
        assert r[5:].count(".") == 12
    assert all("." not in r for r in rows[:1] + rows[5:])
    assert mask_text(4, 4) == mask_text(4, 4)


def test_train_commands_reproduce_from_resolved_config(tmp_path):
    small = ["--scenes", "32", "--steps", "5", "--batch", "4"]
    assert main(["train1", *small, "--seed", "3", "--out", "s1"]) == 0
    assert main(["train1", "--config", "s1/resolved_config.json", "--out", "s1b"]) == 0
    assert (tmp_path / "s1" / "src_vit.bin").read_bytes() == (tmp_path / "s1b" / "src_vit.bin").read_bytes()
    vit_before = (tmp_path / "s1" / "src_vit.bin").read_bytes()

    qa = ["--qa", "40", "--test", "20", "--steps", "6", "--batch", "8"]
    assert main(["train2", "--stage1-ckpt", "s1/src_vit", *qa, "--out", "s2"]) == 0
    assert main(["train2", "--config", "s2/resolved_config.json", "--out", "s2b"]) == 0
    assert (tmp_path / "s2" / "stage2.bin").read_bytes() == (tmp_path / "s2b" / "stage2.bin").read_bytes()
    assert (tmp_path / "s1" / "src_vit.bin").read_bytes() == vit_before
    curve = list(csv.DictReader((tmp_path / "s2" / "stage2_curve.csv").open()))
    assert [int(r["step"]) for r in curve] == [5]
    metrics = json.loads((tmp_path / "s2" / "metrics.json").read_text())
    assert metrics["encoder_frozen"] is True and metrics["visual_tokens"] == 36

    assert main(["eval", "--stage1-ckpt", "s1/src_vit", "--stage2-ckpt", "s2/stage2", "--test", "20",
                 "--pool", "16", "--out", "ev"]) == 0
    rep = json.loads((tmp_path / "ev" / "eval_report.json").read_text())
    assert rep["retrieval"]["pool_size"] == 16 and 0.0 <= rep["videoqa"]["accuracy"] <= 1.0


def test_flag_overrides_config(tmp_path):
    assert main(["gen", "--scenes", "4", "--qa", "0", "--test", "0", "--out", "g"]) == 0
    assert main(["gen", "--config", "g/resolved_config.json", "--scenes", "6", "--out", "h"]) == 0
    assert len((tmp_path / "h" / "scenes.jsonl").read_text().splitlines()) == 6
    cfg = json.loads((tmp_path / "h" / "resolved_config.json").read_text())
    assert cfg["scenes"] == 6 and cfg["grid"] == "4x4"


@pytest.mark.slow
def test_ablate_two_variants(tmp_path):
    args = ["ablate", "--variants", "src,reverse", "--seed", "7", "--scenes", "64", "--qa", "300", "--test", "100",
            "--kind", "last_frame", "--steps", "150", "--lr", "3e-3", "--out", "ab"]
    assert main(args) == 0
    rows = list(csv.DictReader((tmp_path / "ab" / "ablation.csv").open()))
    assert [r["variant"] for r in rows] == ["SRC", "REVERSE"]
    assert rows[0]["visual_tokens"] == rows[1]["visual_tokens"] == "36"
    assert rows[0]["accuracy"] != rows[1]["accuracy"]
