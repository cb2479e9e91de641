"""Command line entry point: ``zsreid <verb> ...``.

Failures print a single JSON object ``{"error": ..., "message": ...}`` to
stderr and exit with status 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from zsreid.corpus import (
    FILTER_STAGES,
    SPLIT_SCOPES,
    Corpus,
    SequenceSource,
    SplitAssignment,
    ingest,
    stratified_split,
)
from zsreid.metrics import POOLING_MODES
from zsreid.pipeline import (
    GALLERY_SCOPES,
    REPORT_FORMATS,
    STAGE_NAMES,
    PipelineConfig,
    ablate,
    emit_report,
    fuse_table,
    load_report,
    run_evaluation,
)
from zsreid.rerank import RerankParams


def _write_json(path: str, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def _seed(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _config_from_args(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config)
    cfg = replace(cfg, seed=args.seed)
    if getattr(args, "pooling", None):
        cfg = replace(cfg, pooling=args.pooling)
    if getattr(args, "gallery_scope", None):
        cfg = replace(cfg, gallery_scope=args.gallery_scope)
    if getattr(args, "alpha", None) is not None:
        cfg = replace(cfg, alpha=args.alpha)
    if getattr(args, "beta", None) is not None:
        cfg = replace(cfg, beta=args.beta)
    if getattr(args, "aqe_k", None) is not None:
        cfg = replace(cfg, aqe_k=args.aqe_k)
    rr = cfg.rerank
    k1 = args.k1 if getattr(args, "k1", None) is not None else rr.k1
    k2 = args.k2 if getattr(args, "k2", None) is not None else rr.k2
    lam = args.lambda_value if getattr(args, "lambda_value", None) is not None else rr.lambda_value
    cfg = replace(cfg, rerank=RerankParams(k1, k2, lam))
    if getattr(args, "disable", None):
        cfg = replace(cfg, stages=replace(cfg.stages, **{s: False for s in args.disable}))
    cfg.validate()
    return cfg


def cmd_ingest(args) -> None:
    sources = [SequenceSource(seq, path, (int(w), int(h))) for seq, path, w, h in args.sequence]
    corpus = ingest(sources, args.pad_frac, args.min_side, args.filter_stage)
    corpus.save(args.out)
    print(json.dumps({"sequences": len(sources), "crops": len(corpus)}))


def cmd_split(args) -> None:
    corpus = Corpus.load(args.manifest)
    split = stratified_split(corpus.crops, args.ratio, args.seed, args.scope)
    _write_json(args.out, split.to_dict())
    print(json.dumps({"gallery": len(split.gallery), "query": len(split.query)}))


def cmd_evaluate(args) -> None:
    cfg = _config_from_args(args)
    split = None
    if args.split:
        split = SplitAssignment.from_dict(json.loads(Path(args.split).read_text(encoding="utf-8")))
    report = run_evaluation(cfg, split)
    emit_report(report, args.format, args.out)
    print(json.dumps({"map": report.map, "cmc": {str(k): v for k, v in report.cmc.items()}}))


def cmd_ablate(args) -> None:
    cfg = _config_from_args(args)
    rows = ablate(cfg)
    _write_json(args.out, [{"stages": stages, "report": rep.to_dict()} for stages, rep in rows])
    for stages, rep in rows:
        print(f"{stages['row']:<24} mAP {rep.map:.4f}  top1 {rep.cmc[1]:.4f}  top3 {rep.cmc[3]:.4f}")


def cmd_fuse_table(args) -> None:
    cfg = _config_from_args(args)
    rows = fuse_table(cfg)
    _write_json(args.out, rows)
    for r in rows:
        qe = r["qe"] if r["qe"] is not None else "-"
        print(f"{'+'.join(r['models']):<28} QE {qe!s:<3} mAP {r['map']:.4f}  top1 {r['cmc']['1']:.4f}")


def cmd_report(args) -> None:
    report = load_report(args.input)
    if args.format == "text":
        lines = [f"mAP    {report.map:.4f}"] + [f"top-{k:<2}  {v:.4f}" for k, v in sorted(report.cmc.items())]
        lines.append(f"queries {report.n_queries_evaluated} evaluated, {report.n_queries_skipped} skipped")
        text = "\n".join(lines) + "\n"
        if args.out:
            Path(args.out).write_text(text, encoding="utf-8")
        else:
            sys.stdout.write(text)
        return
    if not args.out:
        raise ValueError(f"--out is required for format {args.format!r}")
    emit_report(report, args.format, args.out)


def _add_eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="pipeline config (JSON)")
    p.add_argument("--seed", required=True, type=_seed, help="split seed (u64)")
    p.add_argument("--out", required=True)
    p.add_argument("--pooling", choices=POOLING_MODES)
    p.add_argument("--gallery-scope", choices=GALLERY_SCOPES)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--k1", type=int)
    p.add_argument("--k2", type=int)
    p.add_argument("--lambda", dest="lambda_value", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zsreid", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse MOT annotations into a corpus manifest")
    p.add_argument("--sequence", nargs=4, action="append", required=True,
                   metavar=("ID", "GT_PATH", "WIDTH", "HEIGHT"))
    p.add_argument("--out", required=True)
    p.add_argument("--pad-frac", type=float, default=0.05)
    p.add_argument("--min-side", type=int, default=32)
    p.add_argument("--filter-stage", choices=FILTER_STAGES, default="post_pad")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", help="stratified gallery/query split of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", required=True, type=_seed)
    p.add_argument("--ratio", type=float, default=0.75)
    p.add_argument("--scope", choices=SPLIT_SCOPES, default="per_sequence")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("evaluate", help="run one configured evaluation")
    _add_eval_flags(p)
    p.add_argument("--format", choices=REPORT_FORMATS, default="json")
    p.add_argument("--split", help="use a precomputed split file instead of --seed")
    p.add_argument("--aqe-k", type=int)
    p.add_argument("--disable", action="append", choices=STAGE_NAMES, default=[])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="stage ablation grid")
    _add_eval_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("fuse-table", help="encoder-subset fusion grid with and without AQE")
    _add_eval_flags(p)
    p.set_defaults(func=cmd_fuse_table)

    p = sub.add_parser("report", help="convert a JSON report")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--format", choices=REPORT_FORMATS + ("text",), default="text")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (ValueError, OSError, KeyError) as e:
        sys.stderr.write(json.dumps({"error": type(e).__name__, "message": str(e)}) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
