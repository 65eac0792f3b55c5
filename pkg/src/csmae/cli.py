"""Command-line entry point: ``csmae <command> [--config FILE] [section.key=value ...]``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
Errors are reported as one line on stderr::

    error code=2 kind=ConfigError message="..."
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import backbone, datasets, retrieval, training
from .config import TrainConfig, build_config, write_resolved
from .errors import ConfigError, CsmaeError, DataError


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest_pairs(cfg: TrainConfig, split: str):
    manifest = datasets.load_manifest(cfg.data.manifest) if cfg.data.manifest else None
    if manifest is None:
        raise DataError("data.manifest is not set")
    pairs = datasets.load_pairs(manifest, split=split)
    if not pairs:
        raise DataError(f"no records in split {split!r} of {cfg.data.manifest}")
    return pairs


def _checkpoint_config(args) -> tuple:
    model, saved, meta = training.load_model(args.checkpoint)
    cfg = build_config(args.config, args.overrides, base=saved)
    if cfg.model != saved.model:
        raise ConfigError("model section cannot be overridden for a trained checkpoint")
    return model, cfg


def cmd_synth_data(args) -> int:
    cfg = build_config(args.config, args.overrides)
    out = _out(args)
    d = cfg.data
    pairs = datasets.generate_synthetic(d.n_pairs, d.synth_side, d.n_classes, seed=cfg.run.seed)
    fractions = tuple(float(v) for v in d.split_fractions.split(","))
    for pair, tag in zip(pairs, datasets.split(pairs, fractions, seed=cfg.run.seed)):
        pair.split = tag
    manifest = datasets.write_dataset(pairs, out)
    cfg.data.manifest = str(manifest.resolve())
    write_resolved(cfg, out)
    print(manifest)
    return 0


def cmd_train(args) -> int:
    cfg = build_config(args.config, args.overrides)
    out = _out(args)
    write_resolved(cfg, out)
    ckpt, metrics = training.train(cfg, out, resume=args.resume)
    print(ckpt)
    print(metrics)
    return 0


def cmd_embed(args) -> int:
    model, cfg = _checkpoint_config(args)
    out = _out(args)
    split = args.split or cfg.data.archive_split
    pairs = _manifest_pairs(cfg, split)
    modalities = backbone.MODALITIES if args.modality == "both" else (args.modality,)
    records = []
    for mod in modalities:
        records += retrieval.embed_pairs(model, pairs, mod)
    path = out / "embeddings.tsv"
    retrieval.write_embeddings(path, records)
    write_resolved(cfg, out)
    print(path)
    return 0


def cmd_retrieve(args) -> int:
    records = retrieval.read_embeddings(args.embeddings)
    by_key = {(r.image_id, r.modality): r for r in records}
    if (args.query, args.query_modality) not in by_key:
        raise DataError(f"query {args.query}/{args.query_modality} not in {args.embeddings}")
    index = retrieval.EmbeddingIndex.from_records(records, args.archive_modality)
    exclude = {args.query} if args.query_modality == args.archive_modality else set()
    got = retrieval.query_topk(index, by_key[(args.query, args.query_modality)].vector, args.k, exclude)
    print(f"query\t{args.query}\t{args.query_modality}->{args.archive_modality}")
    for rank, image_id in enumerate(got, 1):
        print(f"{_ordinal(rank)}\t{image_id}")
    return 0


def _ordinal(n: int) -> str:
    suffix = "th" if 10 <= n % 100 <= 20 else {1: "st", 2: "nd", 3: "rd"}.get(n % 10, "th")
    return f"{n}{suffix}"


def cmd_evaluate(args) -> int:
    model, cfg = _checkpoint_config(args)
    out = _out(args)
    queries = _manifest_pairs(cfg, cfg.data.query_split)
    archive = _manifest_pairs(cfg, cfg.data.archive_split)
    reports = [retrieval.evaluate_task(model, queries, archive, t, cfg.data.k) for t in retrieval.TASKS]
    header = (
        f"F1@{cfg.data.k} queries={cfg.data.query_split}({len(queries)}) "
        f"archive={cfg.data.archive_split}({len(archive)})"
    )
    text = retrieval.format_report(reports, header)
    (out / "report.txt").write_text(text)
    write_resolved(cfg, out)
    sys.stdout.write(text)
    return 0


def cmd_param_count(args) -> int:
    cfg = build_config(args.config, args.overrides)
    counts = backbone.count_parameters(cfg.model)
    m = cfg.model
    print(f"# {m.variant} {m.vit_variant} K={m.patch_size} channels={m.channels} cross_depth={m.cross_depth}")
    print(backbone.format_breakdown(counts))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csmae", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, out=True, ckpt=False):
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI config file")
        p.add_argument("overrides", nargs="*", help="section.key=value overrides")
        if out:
            p.add_argument("--out", default=".", help="output directory")
        if ckpt:
            p.add_argument("--checkpoint", required=True)
        p.set_defaults(func=fn)
        return p

    add("synth-data", cmd_synth_data)
    add("train", cmd_train).add_argument("--resume", help="checkpoint to resume from")
    p = add("embed", cmd_embed, ckpt=True)
    p.add_argument("--split", help="manifest split (default: data.archive_split)")
    p.add_argument("--modality", choices=["S1", "S2", "both"], default="both")
    add("evaluate", cmd_evaluate, ckpt=True)
    add("param-count", cmd_param_count, out=False)

    p = sub.add_parser("retrieve")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--query", required=True, help="query image id")
    p.add_argument("--query-modality", choices=backbone.MODALITIES, default="S1")
    p.add_argument("--archive-modality", choices=backbone.MODALITIES, default="S2")
    p.add_argument("-k", type=int, default=10)
    p.set_defaults(func=cmd_retrieve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CsmaeError as exc:
        msg = str(exc).replace("\n", " ").replace('"', "'")
        print(f'error code={exc.exit_code} kind={type(exc).__name__} message="{msg}"', file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
