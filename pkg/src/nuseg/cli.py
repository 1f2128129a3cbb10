"""``nuseg`` command line front-end.

Exit status: 0 success, 2 configuration error, 3 data or format error,
4 numerical failure (divergence, failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import grid, volio
from .data import SynthConfig, generate_corpus, load_corpus, save_corpus
from .errors import ConfigError, FormatError, NumericalError, NusegError
from .harness import (
    DESK_SCHEDULE,
    ExperimentConfig,
    baseline_report,
    directional_report,
    run,
    write_outputs,
)
from .loss import gradcheck
from .metrics import evaluate_against_set
from .model import TinySegNet, forward
from .rpmap import build_rpmap
from .training import LOSS_KINDS, load_checkpoint, save_checkpoint, train


def _image(corpus, image_id):
    try:
        return corpus.get(image_id)
    except KeyError:
        raise ConfigError(f"image {image_id!r} not in corpus (have {', '.join(corpus.image_ids)})") from None


def _schedule(args):
    sched = DESK_SCHEDULE
    if args.epochs is not None:
        sched = replace(sched, max_epochs=args.epochs)
    if args.lr is not None:
        sched = replace(sched, initial_lr=args.lr)
    if args.batch_size is not None:
        sched = replace(sched, batch_size=args.batch_size)
    return sched


def _parse_seeds(text: str, base: int) -> tuple:
    """``"5"`` means five seeds starting at ``base``; ``"0,3,7"`` is an explicit list."""
    try:
        if "," in text:
            return tuple(int(s) for s in text.split(",") if s.strip())
        n = int(text)
    except ValueError:
        raise ConfigError(f"--seeds must be a count or a comma-separated list, got {text!r}") from None
    if n < 1:
        raise ConfigError("--seeds count must be at least 1")
    return tuple(range(base, base + n))


def cmd_generate(args):
    cfg = SynthConfig(shape=(args.shape,) * 3, num_images=args.images,
                      num_annotators=args.annotators, rng_seed=args.seed)
    root = save_corpus(generate_corpus(cfg), args.out)
    print(f"wrote {cfg.num_images} images x {cfg.num_annotators} annotators to {root}")


def cmd_rpmap(args):
    im = _image(load_corpus(args.corpus), args.image)
    m = build_rpmap(im.annotations, args.penalty)
    volio.write_volume(args.out, m.values, mask=False,
                       meta={"image_id": im.image_id, "annotator_id": "", "kind": "rpmap"})
    vals, counts = np.unique(m.values, return_counts=True)
    print(json.dumps({"image_id": im.image_id, "values": dict(zip(map(repr, vals.tolist()), counts.tolist()))}))


def cmd_train(args):
    corpus = load_corpus(args.corpus)
    excluded = set(args.exclude_image or [])
    for iid in excluded:
        _image(corpus, iid)
    data = []
    for im in corpus:
        if im.image_id in excluded:
            continue
        ann = im.annotations
        if args.exclude_annotator:
            try:
                ann = ann.without(args.exclude_annotator)
            except KeyError:
                raise ConfigError(f"annotator {args.exclude_annotator!r} not in {im.image_id}") from None
        data.append((im.intensity, ann))
    if not data:
        raise ConfigError("every image is excluded")
    sched = replace(_schedule(args), rng_seed=args.seed)
    net = TinySegNet.init(args.seed, args.channels, input_shape=data[0][0].shape, compute_dtype="float32")
    model = train(net, data, args.loss, sched)
    save_checkpoint(args.out, model, excluded_images=sorted(excluded),
                    excluded_annotator=args.exclude_annotator or "", seed=args.seed)
    last = model.history[-1]
    print(f"trained {args.loss}: {len(model.history)} epochs, best epoch {model.best_epoch}, "
          f"final val loss {last.val_loss:.6f}; wrote {args.out}")


def cmd_predict(args):
    net, manifest = load_checkpoint(args.ckpt)
    x = volio.read_volume(args.image)
    try:
        meta = volio.read_sidecar(args.image)
        iid = meta["image_id"]
    except FormatError:
        iid = Path(args.image).stem
    prob = forward(net, x)
    if args.threshold is not None:
        volio.write_volume(args.out, grid.binarize(prob, args.threshold), mask=True,
                           meta={"image_id": iid, "annotator_id": "", "kind": "prediction_mask"})
    else:
        volio.write_volume(args.out, prob, mask=False,
                           meta={"image_id": iid, "annotator_id": "", "kind": "prediction"})
    print(f"wrote {args.out} ({manifest.get('loss_kind', '?')} model, foreground "
          f"{int(grid.binarize(prob).sum())} voxels)")


def cmd_evaluate(args):
    im = _image(load_corpus(args.corpus), args.image)
    pred = volio.read_volume(args.pred)
    refs = im.annotations
    if args.exclude_annotator:
        try:
            refs = refs.without(args.exclude_annotator)
        except KeyError:
            raise ConfigError(f"annotator {args.exclude_annotator!r} not in {im.image_id}") from None
    m = build_rpmap(im.annotations if args.map_side == "test" else refs)
    report = evaluate_against_set(pred.astype(np.float64), refs, m, args.threshold)
    out = report.summary()
    out["image_id"] = im.image_id
    out["map_side"] = args.map_side
    out["per_reference"] = [{"annotator_id": s.annotator_id, "dice": s.dice, "rpd": s.rpd}
                            for s in report.per_reference]
    print(json.dumps(out, indent=2))


def cmd_xval(args):
    seeds = _parse_seeds(args.seeds, args.seed)
    kinds = tuple(k.strip().lower() for k in args.losses.split(",") if k.strip())
    protocol = args.protocol
    cfg = ExperimentConfig(protocol=protocol, loss_kinds=kinds, schedule=_schedule(args),
                           corpus_path=args.corpus, seeds=seeds, rpd_map_side=args.map_side)
    corpus = load_corpus(args.corpus) if args.corpus else generate_corpus(SynthConfig())
    results, tables = run(cfg, corpus, n_jobs=args.jobs)
    out = write_outputs(args.out, cfg, results, tables)
    print(tables["text"])
    if protocol == "exp1":
        rep = directional_report(results)
        (out / "directional.json").write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
        ov = rep["overall"]
        print("mean dice " + "  ".join(f"{k}={v:.4f}" for k, v in ov.items()))
        if "rpdl" in ov and "dl" in ov:
            print(f"RPDL > DL in {rep['rpdl_beats_dl_seeds']}/{rep['num_seeds']} seeds")
    else:
        rep = baseline_report(results)
        (out / "baseline_report.json").write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
        counts = rep["folds_above_baseline"]
        print("folds above baseline " + "  ".join(f"{k}={counts[k]}/{rep['num_folds']}"
                                                  for k in cfg.loss_kinds))
    print(f"wrote {out}")


def cmd_gradcheck(args):
    kinds = LOSS_KINDS if args.loss == "all" else (args.loss,)
    failed = False
    for kind in kinds:
        errs = gradcheck(kind, args.trials, args.seed, args.h)
        worst = max(errs)
        ok = worst < args.tol
        failed |= not ok
        print(f"{kind}: {len(errs)} trials, max relative error {worst:.3e} "
              f"({'ok' if ok else 'FAIL'} at tol {args.tol:g})")
    if failed:
        raise NumericalError("gradient check failed")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nuseg", description="Non-unique segmentation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic multi-annotator corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--images", type=int, default=9)
    g.add_argument("--annotators", type=int, default=7)
    g.add_argument("--shape", type=int, default=32, help="cube side length")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_generate)

    r = sub.add_parser("rpmap", help="build the reward-penalty map of one image")
    r.add_argument("--corpus", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--penalty", type=float, default=-1.0)
    r.set_defaults(fn=cmd_rpmap)

    def schedule_args(sp):
        sp.add_argument("--epochs", type=int, default=None)
        sp.add_argument("--lr", type=float, default=None)
        sp.add_argument("--batch-size", type=int, default=None)

    t = sub.add_parser("train", help="train one model and write a checkpoint")
    t.add_argument("--corpus", required=True)
    t.add_argument("--loss", required=True, choices=LOSS_KINDS)
    t.add_argument("--exclude-image", action="append", help="hold out an image (repeatable)")
    t.add_argument("--exclude-annotator", default=None)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--channels", type=int, default=8)
    t.add_argument("--out", required=True)
    schedule_args(t)
    t.set_defaults(fn=cmd_train)

    pr = sub.add_parser("predict", help="run a checkpoint on an intensity volume")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--image", required=True, help="intensity .nuseg file")
    pr.add_argument("--out", required=True)
    pr.add_argument("--threshold", type=float, default=None, help="write a binary mask instead")
    pr.set_defaults(fn=cmd_predict)

    e = sub.add_parser("evaluate", help="score a prediction against an image's annotations")
    e.add_argument("--pred", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--image", required=True)
    e.add_argument("--map-side", choices=("test", "train"), default="test")
    e.add_argument("--exclude-annotator", default=None)
    e.add_argument("--threshold", type=float, default=0.5)
    e.set_defaults(fn=cmd_evaluate)

    x = sub.add_parser("xval", help="run a cross-validation experiment")
    x.add_argument("--protocol", choices=("exp1", "exp2"), required=True)
    x.add_argument("--corpus", default=None, help="corpus directory (default: generate the default corpus)")
    x.add_argument("--losses", default=",".join(LOSS_KINDS))
    x.add_argument("--seeds", default="5", help="count (starting at --seed) or comma-separated list")
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--map-side", choices=("test", "train"), default="test")
    x.add_argument("--jobs", type=int, default=1)
    x.add_argument("--out", required=True)
    schedule_args(x)
    x.set_defaults(fn=cmd_xval)

    gc = sub.add_parser("gradcheck", help="finite-difference check of the loss gradients")
    gc.add_argument("--loss", choices=LOSS_KINDS + ("all",), default="all")
    gc.add_argument("--trials", type=int, default=100)
    gc.add_argument("--tol", type=float, default=1e-3)
    gc.add_argument("--h", type=float, default=1e-5)
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except NusegError as exc:
        print(f"nuseg: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"nuseg: error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
