"""Command-line entry point: ``hamreid <subcommand> ...``.

Every failure ends in one stderr line of the form ``error: <Type>: <message>``
and a nonzero exit code, so wrappers can parse it without a traceback.
"""
from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

from . import checkpoint as ckpt
from .config import ConfigError, RunConfig, load_config, to_text
from .data import (load_embeddings, load_images, load_manifest, relabel, save_embeddings,
                   synth_generate, write_pgm)
from .metrics import EmbeddingSet, evaluate, write_ranked_lists, write_report
from .model import Model
from .training import normalize, train_loop, warmup_lr

EXIT_ERROR = 1


def _run_config(args) -> RunConfig:
    rc = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        rc = RunConfig(rc.model, rc.train, rc.num_ids_auto, rc.max_rank, args.seed, rc.out)
    return rc


def _load_model(args, expected=None) -> Model:
    with warnings.catch_warnings():
        warnings.simplefilter("always", ckpt.ConfigMismatchWarning)
        return ckpt.load_checkpoint(args.checkpoint, expected, override=args.force)


def cmd_synth(args) -> int:
    m = synth_generate(args.ids, args.images, args.cams, (args.height, args.width), args.seed,
                       args.out, test_ids=args.test_ids, closed_set=args.closed_set)
    counts = {s: len(m.split(s)) for s in ("train", "query", "gallery")}
    print(f"wrote {len(m.records)} images to {args.out} "
          + " ".join(f"{k}={v}" for k, v in counts.items()))
    return 0


def cmd_train(args) -> int:
    rc = _run_config(args)
    manifest = load_manifest(args.manifest) if args.manifest else None
    records = manifest.split("train") if manifest else []
    if manifest is not None and not records:
        raise ConfigError(f"{args.manifest}: no train rows")
    n_ids = len({r.pid for r in records}) if records else None
    if n_ids is not None:
        rc = rc.with_num_ids(n_ids)
    rc.validate(n_ids)
    if args.dry_run:
        print(to_text(rc), end="")
        print("\nepoch,lr")
        for e in range(1, max(150, rc.train.epochs) + 1):
            print(f"{e},{warmup_lr(e)!r}")
        return 0
    if manifest is None:
        raise ConfigError("train needs --manifest (or --dry-run)")
    out = Path(args.out or rc.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(to_text(rc))
    labels, _ = relabel([r.pid for r in records])
    images = load_images(records, rc.model.backbone.input_hw)
    model = Model(rc.model, seed=rc.seed)
    history = train_loop(model, images, labels, rc.train, rc.seed, out,
                         on_checkpoint=lambda _, path: ckpt.save_checkpoint(model, path))
    ckpt.save_checkpoint(model, out / "model.ckpt")
    last = history[-1]
    print(f"trained {last.epoch} epochs: id_loss={last.id_loss:.4f} tp_loss={last.tp_loss:.4f} "
          f"checkpoint={out / 'model.ckpt'}")
    return 0


def _embed_split(model: Model, manifest, split: str):
    records = manifest.split(split)
    if not records:
        raise ConfigError(f"manifest has no {split} rows")
    desc = model.embed(normalize(load_images(records, model.cfg.backbone.input_hw)))
    return desc, records


def cmd_embed(args) -> int:
    model = _load_model(args)
    desc, records = _embed_split(model, load_manifest(args.manifest), args.split)
    save_embeddings(args.out, desc, records)
    print(f"wrote {len(records)}×{desc.shape[1]} descriptors to {args.out}.tensor")
    return 0


def cmd_eval(args) -> int:
    if args.query and args.gallery:
        sets = []
        for prefix, role in ((args.query, "query"), (args.gallery, "gallery")):
            desc, paths, pids, cams = load_embeddings(prefix)
            sets.append(EmbeddingSet(desc, pids, cams, role, paths))
        q, g = sets
    elif args.checkpoint and args.manifest:
        model = _load_model(args)
        manifest = load_manifest(args.manifest)
        sets = []
        for role in ("query", "gallery"):
            desc, recs = _embed_split(model, manifest, role)
            sets.append(EmbeddingSet(desc, [r.pid for r in recs], [r.camid for r in recs], role,
                                     [Path(r.path).as_posix() for r in recs]))
        q, g = sets
    else:
        raise ConfigError("eval needs --query and --gallery dumps, or --checkpoint and --manifest")
    result = evaluate(q, g, args.max_rank)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_report(result, out / "metrics.csv")
        write_ranked_lists(result, q, g, out / "ranked.csv", top=args.max_rank)
    print(result.summary())
    return 0


def cmd_inspect(args) -> int:
    model = _load_model(args)
    records = load_manifest(args.manifest).split(args.split)[: args.limit]
    if not records:
        raise ConfigError(f"manifest has no {args.split} rows")
    images = load_images(records, model.cfg.backbone.input_hw)
    maps = model.forward(normalize(images)).attention
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = 0
    for i, rec in enumerate(records):
        stem = Path(rec.path).stem
        for site, m in maps.sam.items():
            write_pgm(out / f"{stem}_sam_{site}.pgm", m.data[i, 0])
            written += 1
        for site, m in maps.cam.items():
            write_pgm(out / f"{stem}_cam_{site}.pgm", m.data[i][None, :])
            written += 1
    print(f"wrote {written} attention maps to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(args.seed)
    for r in results:
        print(f"{r.name:<20} {r.error:.3e}  {'ok' if r.ok else 'FAIL'} (tol {r.tol:g})")
    worst = max(r.error for r in results)
    print(f"max error {worst:.3e}")
    return 0 if all(r.ok for r in results) else EXIT_ERROR


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hamreid", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a procedural pedestrian dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ids", type=int, default=16)
    p.add_argument("--images", type=int, default=8, help="images per identity")
    p.add_argument("--cams", type=int, default=2)
    p.add_argument("--height", type=int, default=48)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--test-ids", type=int, default=None,
                   help="identities held out for query/gallery (default half)")
    p.add_argument("--closed-set", action="store_true",
                   help="hold out images rather than identities")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model from a config and manifest")
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--out", help="run directory (default: [run] out)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dry-run", action="store_true",
                   help="validate, print the canonical config and the lr table, then stop")
    p.set_defaults(fn=cmd_train)

    for name, fn, helptext in (("embed", cmd_embed, "write descriptors for one manifest split"),
                               ("inspect", cmd_inspect, "dump attention maps as PGM images")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--manifest", required=True)
        p.add_argument("--split", default="query" if name == "embed" else "train")
        p.add_argument("--out", required=True,
                       help="dump prefix" if name == "embed" else "output directory")
        p.add_argument("--force", action="store_true", help="load despite a config mismatch")
        if name == "inspect":
            p.add_argument("--limit", type=int, default=4, help="number of images")
        p.set_defaults(fn=fn)

    p = sub.add_parser("eval", help="CMC and mAP from two dumps or end to end")
    p.add_argument("--query", help="query embedding dump prefix")
    p.add_argument("--gallery", help="gallery embedding dump prefix")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--max-rank", type=int, default=10)
    p.add_argument("--out", help="directory for metrics.csv and ranked.csv")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.fn(args)
    except Exception as exc:  # noqa: BLE001 - the CLI contract is one line per failure
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
