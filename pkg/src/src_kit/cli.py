"""Command line entry point: ``src-kit <command> [flags]``.

Exit codes: 0 success, 1 usage or configuration, 2 I/O, 3 numeric divergence.
Every command that takes ``--out`` writes ``resolved_config.json`` there; passing
that file back via ``--config`` reproduces the run.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from .errors import NumericError, SrcKitError
from .synth import QuestionKind

log = logging.getLogger("src_kit")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED = 0, 1, 2, 3

KIND_ALIASES = {
    "last_frame": QuestionKind.LAST_FRAME_DETAIL.value,
    "last_frame_detail": QuestionKind.LAST_FRAME_DETAIL.value,
    "global": QuestionKind.GLOBAL_CONTEXT.value,
    "global_context": QuestionKind.GLOBAL_CONTEXT.value,
    "mixed": "mixed",
}


# keys written to resolved_config.json for the record, ignored when read back
RECORD_ONLY = frozenset({"command", "config", "verbose", "stage1", "stage2"})


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _grid(s: str) -> tuple[int, int]:
    try:
        r, c = s.lower().split("x")
        return int(r), int(c)
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like RxC, got {s!r}") from None


def _kind(s: str) -> str:
    key = s.strip().lower()
    if key not in KIND_ALIASES:
        raise argparse.ArgumentTypeError(f"unknown question kind {s!r}")
    return KIND_ALIASES[key]


def _common(p: argparse.ArgumentParser, out_default="runs"):
    p.add_argument("--config", help="JSON file with flat keys named like the flags")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=out_default)
    p.add_argument("--grid", type=_grid, default=(4, 4))
    p.add_argument("--frames", type=int, default=5)
    p.add_argument("--compressed", type=int, default=4)
    p.add_argument("--variant", default="SRC")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="src-kit", description="Scene-region compression toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="write synthetic JSONL datasets")
    _common(p)
    p.add_argument("--scenes", type=int, default=256, help="stage-one scene count")
    p.add_argument("--qa", type=int, default=2000, help="VideoQA train samples")
    p.add_argument("--test", type=int, default=500, help="VideoQA test samples")
    p.add_argument("--kind", type=_kind, default="mixed")

    p = sub.add_parser("train1", help="contrastive stage one")
    _common(p)
    p.add_argument("--data", help="scene JSONL (default: generate --scenes from --seed)")
    p.add_argument("--scenes", type=int, default=256)

    p = sub.add_parser("train2", help="stage two on a frozen encoder")
    _common(p)
    p.add_argument("--stage1-ckpt", help="path stem of a stage-one checkpoint")
    p.add_argument("--data", help="VideoQA train JSONL (default: generate --qa from --seed)")
    p.add_argument("--test-data", help="VideoQA test JSONL (default: generate --test)")
    p.add_argument("--qa", type=int, default=2000)
    p.add_argument("--test", type=int, default=500)
    p.add_argument("--kind", type=_kind, default="mixed")

    p = sub.add_parser("eval", help="retrieval and/or VideoQA evaluation")
    _common(p)
    p.add_argument("--stage1-ckpt")
    p.add_argument("--stage2-ckpt")
    p.add_argument("--pool", type=int, default=64, help="held-out retrieval pool size")
    p.add_argument("--test-data")
    p.add_argument("--test", type=int, default=500)
    p.add_argument("--kind", type=_kind, default="mixed")

    p = sub.add_parser("ablate", help="train and compare pipeline variants")
    _common(p)
    p.add_argument("--stage1-ckpt")
    p.add_argument("--variants", default="full,src,s_only,avg_pool,no_sr,reverse")
    p.add_argument("--data", help="VideoQA train JSONL (default: generate --qa from --seed)")
    p.add_argument("--test-data", help="VideoQA test JSONL (default: generate --test)")
    p.add_argument("--scenes", type=int, default=256)
    p.add_argument("--qa", type=int, default=2000)
    p.add_argument("--test", type=int, default=500)
    p.add_argument("--kind", type=_kind, default="mixed")

    p = sub.add_parser("flops", help="analytic decoder prefill FLOPs")
    _common(p, out_default=None)
    p.add_argument("--T", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--M", type=int)
    p.add_argument("--q", type=int, default=4)

    p = sub.add_parser("mask-dump", help="print the region attention mask")
    _common(p, out_default=None)
    return ap


def parse_args(argv=None) -> argparse.Namespace:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except OSError as e:
            raise OSError(f"cannot read config {args.config}: {e}") from e
        except json.JSONDecodeError as e:
            raise UsageError(f"config {args.config} is not valid JSON: {e}") from e
        cfg = {k.replace("-", "_"): v for k, v in cfg.items() if k not in RECORD_ONLY}
        if "grid" in cfg and isinstance(cfg["grid"], str):
            cfg["grid"] = _grid(cfg["grid"])
        # explicit flags win over the file: re-parse with file values as defaults
        sub = ap._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(cfg) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        sub.set_defaults(**cfg)
        args = ap.parse_args(argv)
    return args


def resolved(args: argparse.Namespace, **extra) -> dict:
    d = {k: v for k, v in vars(args).items() if k not in ("config", "verbose")}
    if isinstance(d.get("grid"), tuple):
        d["grid"] = f"{d['grid'][0]}x{d['grid'][1]}"
    d.update(extra)
    return d


def write_resolved(args, out: Path, **extra):
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(resolved(args, **extra), indent=2, sort_keys=True) + "\n")


def _pipeline_config(args, variant=None):
    from .pipeline import PipelineConfig

    return PipelineConfig(T=args.frames, M=args.compressed, rows=args.grid[0], cols=args.grid[1],
                          variant=variant or args.variant, seed=args.seed)


def _stage1_config(args):
    from .contrastive import Stage1Config

    c = Stage1Config(seed=args.seed)
    return Stage1Config(steps=args.steps if args.steps is not None else c.steps,
                        batch=args.batch or c.batch, lr=args.lr if args.lr is not None else c.lr, seed=args.seed)


def _stage2_config(args):
    from .pipeline import Stage2Config

    c = Stage2Config(seed=args.seed)
    return Stage2Config(steps=args.steps if args.steps is not None else c.steps,
                        batch=args.batch or c.batch, lr=args.lr if args.lr is not None else c.lr, seed=args.seed)


def _load_vit(path):
    from .vit import SrcVitModel

    if path is None:
        raise UsageError("--stage1-ckpt is required")
    if not Path(f"{path}.json").exists():
        raise FileNotFoundError(f"no stage-one checkpoint at {path}.json")
    return SrcVitModel.load(path)


def _test_set(args):
    from .synth import gen_video_dataset, load_videos

    if args.test_data:
        return load_videos(args.test_data)
    return gen_video_dataset(2 * args.seed + 1, args.test, args.frames, args.kind, tuple(args.grid))


def _qa_sets(args):
    from .synth import gen_video_dataset, load_videos

    train = load_videos(args.data) if getattr(args, "data", None) else \
        gen_video_dataset(2 * args.seed, args.qa, args.frames, args.kind, tuple(args.grid))
    return train, _test_set(args)


def cmd_gen(args) -> int:
    from .synth import gen_scene_corpus, gen_video_dataset, save_scenes, save_videos

    out = Path(args.out)
    grid = tuple(args.grid)
    if args.scenes:
        save_scenes(out / "scenes.jsonl", gen_scene_corpus(args.seed, args.scenes, grid), args.seed)
    if args.qa:
        save_videos(out / "qa_train.jsonl", gen_video_dataset(2 * args.seed, args.qa, args.frames, args.kind, grid))
    if args.test:
        save_videos(out / "qa_test.jsonl",
                    gen_video_dataset(2 * args.seed + 1, args.test, args.frames, args.kind, grid))
    write_resolved(args, out)
    print(f"wrote datasets to {out}")
    return EXIT_OK


def _train_vit(args, out: Path | None, scenes_path=None):
    from .contrastive import train_stage1
    from .synth import TextEmbedder, gen_scene_corpus, load_scenes
    from .vit import SrcVitConfig, SrcVitModel

    grid = tuple(args.grid)
    scenes = load_scenes(scenes_path) if scenes_path else gen_scene_corpus(args.seed, args.scenes, grid)
    model = SrcVitModel(SrcVitConfig(rows=grid[0], cols=grid[1], seed=args.seed))
    return train_stage1(model, scenes, TextEmbedder(), _stage1_config(args), out_dir=out)


def cmd_train1(args) -> int:
    out = Path(args.out)
    res = _train_vit(args, out, args.data)
    write_resolved(args, out, stage1=asdict(_stage1_config(args)))
    print(f"stage one: total loss {res.initial_loss:.4f} -> {res.final_loss:.4f}; checkpoint {out / 'src_vit'}")
    return EXIT_OK


def cmd_train2(args) -> int:
    from .contrastive import write_curve
    from .pipeline import accuracy_by_kind, build_stage2, encode_dataset, train_stage2
    from .synth import TextEmbedder

    vit = _load_vit(args.stage1_ckpt)
    out = Path(args.out)
    emb = TextEmbedder()
    train, test = _qa_sets(args)
    cfg = _pipeline_config(args)
    s2 = _stage2_config(args)
    dtr, dte = encode_dataset(vit, emb, train), encode_dataset(vit, emb, test)
    model = build_stage2(cfg)
    res = train_stage2(vit, model, dtr, s2)
    metrics = accuracy_by_kind(model.predict(dte), dte)
    metrics.update(seed=args.seed, variant=cfg.variant.value, visual_tokens=cfg.visual_tokens(),
                   encoder_frozen=res.vit_checksum_before == res.vit_checksum_after)
    model.params.save(out / "stage2", {"pipeline": cfg.to_json(), "stage2": asdict(s2)})
    write_curve(out / "stage2_curve.csv", res.curve)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    write_resolved(args, out, stage2=asdict(s2))
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .contrastive import eval_retrieval
    from .numeric import ParamStore
    from .pipeline import PipelineConfig, accuracy_by_kind, build_stage2, encode_dataset
    from .synth import TextEmbedder, gen_scene_corpus

    vit = _load_vit(args.stage1_ckpt)
    out = Path(args.out)
    emb = TextEmbedder()
    grid = (vit.config.rows, vit.config.cols)
    # held-out pool drawn from a stream no training command uses
    pool = gen_scene_corpus(10_000 + args.seed, args.pool, grid)
    report = {"retrieval": eval_retrieval(vit, emb, pool)}
    if args.stage2_ckpt:
        if not Path(f"{args.stage2_ckpt}.json").exists():
            raise FileNotFoundError(f"no stage-two checkpoint at {args.stage2_ckpt}.json")
        state, manifest = ParamStore.read(args.stage2_ckpt)
        cfg = PipelineConfig(**manifest["pipeline"])
        model = build_stage2(cfg)
        model.params.load_state(state)
        args.frames, args.grid = cfg.T, (cfg.rows, cfg.cols)
        dte = encode_dataset(vit, emb, _test_set(args))
        report["videoqa"] = accuracy_by_kind(model.predict(dte), dte)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_resolved(args, out)
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import run_ablation_suite, write_metrics_json, write_table_csv
    from .pipeline import encode_dataset
    from .synth import TextEmbedder

    out = Path(args.out)
    vit = _load_vit(args.stage1_ckpt) if args.stage1_ckpt else _train_vit(args, None).model
    emb = TextEmbedder()
    variants = [v for v in args.variants.split(",") if v.strip()]
    base = _pipeline_config(args)
    train, test = _qa_sets(args)
    rows = run_ablation_suite(vit, encode_dataset(vit, emb, train), encode_dataset(vit, emb, test), base,
                              _stage2_config(args), variants)
    write_table_csv(out / "ablation.csv", rows)
    write_metrics_json(out / "metrics.json", rows)
    write_resolved(args, out, stage2=asdict(_stage2_config(args)))
    for r in rows:
        print(f"{r['variant']:>9}  tokens={r['visual_tokens']:>3}  acc={r['accuracy']:.3f}  "
              f"flops={r['flops_pct']:.1f}%")
    return EXIT_OK


def cmd_flops(args) -> int:
    from dataclasses import replace

    from .flops import PAPER_CLAIMS, estimate_flops, flops_ratio
    from .pipeline import PipelineConfig, Variant

    T = args.T if args.T is not None else args.frames
    M = args.M if args.M is not None else args.compressed
    rows, cols = (1, args.n) if args.n is not None else args.grid
    cfg = PipelineConfig(T=T, M=M, rows=rows, cols=cols, variant=args.variant, seed=args.seed)
    full = replace(cfg, variant=Variant.FULL)
    rep = estimate_flops(cfg, args.q, baseline=full)
    base = estimate_flops(full, args.q)
    ratio = flops_ratio(cfg, full, args.q)
    print(f"variant {cfg.variant.value}: tokens {rep.total_tokens} (visual {rep.visual_tokens}), "
          f"FULL: tokens {base.total_tokens} (visual {base.visual_tokens})")
    print(f"token ratio {rep.total_tokens / base.total_tokens:.4f}  flops ratio {ratio:.4f}")
    print(f"linear {rep.linear_flops} attention {rep.attention_flops} total {rep.total} (FULL total {base.total})")
    print(f"reported reference figures (not reproduced): {PAPER_CLAIMS['one_full_frame_flops_pct']}% "
          f"and {PAPER_CLAIMS['abstract_flops_pct']}%")
    if args.out:
        out = Path(args.out)
        write_resolved(args, out)
        (out / "flops.json").write_text(json.dumps({"variant": rep.to_json(), "baseline": base.to_json(),
                                                    "ratio": ratio}, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def mask_text(rows: int, cols: int) -> str:
    from .tokens import RegionLayout
    from .vit import build_region_mask

    m = build_region_mask(RegionLayout(rows, cols)).allowed
    labels = ["S", "R_UL", "R_UR", "R_LL", "R_LR"] + [f"P{i + 1}" for i in range(rows * cols)]
    w = max(map(len, labels))
    lines = [f"# region attention mask {rows}x{cols}: {m.shape[0]}x{m.shape[1]}, 1 = may attend"]
    lines += [f"{lab:<{w}} " + "".join("1" if a else "." for a in row) for lab, row in zip(labels, m)]
    return "\n".join(lines) + "\n"


def cmd_mask_dump(args) -> int:
    text = mask_text(*args.grid)
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        write_resolved(args, out)
        (out / "mask.txt").write_text(text)
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train1": cmd_train1, "train2": cmd_train2, "eval": cmd_eval,
            "ablate": cmd_ablate, "flops": cmd_flops, "mask-dump": cmd_mask_dump}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as e:
        print(f"src-kit: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"src-kit: error: {e}", file=sys.stderr)
        return EXIT_IO
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except NumericError as e:
        print(f"src-kit: numeric divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, SrcKitError, ValueError, KeyError) as e:
        print(f"src-kit: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"src-kit: I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
