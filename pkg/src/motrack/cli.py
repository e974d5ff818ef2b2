"""Command line: dataset synthesis, training, tracking, evaluation, SSL.

Every command is deterministic given its inputs, the seed, and --threads 1.
Options may come from a flat key=value config file (--config); explicit flags
win over file values. The seed falls back to the MOTRACK_SEED environment
variable and is mandatory for train/semi.

Exit codes: 0 success, 1 usage error, 2 missing input, 3 internal error.

Heavy imports happen inside the command handlers so --threads can pin the
BLAS thread pools through environment variables before numpy loads.
"""

from __future__ import annotations

import argparse
import os
import sys


class CliError(Exception):
    code = 3


class UsageError(CliError):
    code = 1


class MissingInput(CliError):
    code = 2


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; the contract reserves 2 for missing inputs
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# option plumbing

def _peek_threads(argv):
    for i, tok in enumerate(argv):
        if tok == "--threads" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--threads="):
            return tok.split("=", 1)[1]
    return None


def _set_thread_env(raw):
    try:
        n = int(raw) if raw is not None else 1
    except ValueError:
        return  # argparse reports the bad value later
    if "numpy" in sys.modules:
        if n != 1:
            print("note: numpy is already loaded, --threads has no effect here",
                  file=sys.stderr)
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(n))


def _apply_config_file(sub: argparse.ArgumentParser, path):
    """Turn config-file entries into parser defaults so explicit flags win."""
    from .data import read_manifest

    if not os.path.exists(path):
        raise MissingInput(f"config file not found: {path}")
    kv = {k.replace("-", "_"): v for k, v in read_manifest(path).items()}
    kv.pop("config", None)
    for action in sub._actions:
        if action.dest not in kv:
            continue
        raw = kv.pop(action.dest)
        if isinstance(action, argparse._StoreTrueAction):
            value = raw.lower() in ("1", "true", "yes", "on")
        elif action.type is not None:
            try:
                value = action.type(raw)
            except ValueError:
                raise UsageError(f"config key {action.dest}: bad value {raw!r}")
        else:
            value = raw
        sub.set_defaults(**{action.dest: value})
    if kv:
        raise UsageError(f"unknown config keys: {sorted(kv)}")


def _resolve_seed(args, required: bool):
    if args.seed is None:
        env = os.environ.get("MOTRACK_SEED")
        if env is not None:
            try:
                args.seed = int(env)
            except ValueError:
                raise UsageError(f"MOTRACK_SEED must be an integer, got {env!r}")
        elif required:
            raise UsageError("a seed is required (--seed or MOTRACK_SEED)")
        else:
            args.seed = 0


def _need(args, *names):
    for name in names:
        if getattr(args, name) is None:
            raise UsageError(f"--{name.replace('_', '-')} is required")


def _load_split(path):
    if not os.path.isdir(path):
        raise MissingInput(f"dataset directory not found: {path}")
    from .data import load_dataset

    return load_dataset(path)


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    from .data import write_dataset
    from .metrics import distractor_stats
    from .synth import SynthConfig, make_dataset

    _need(args, "out")
    cfg = SynthConfig(
        n_frames=args.frames, k_distractors=args.distractors,
        clutter_points=args.clutter, static_prob=args.static_prob,
    )
    try:
        cfg.validate()
    except ValueError as e:
        raise UsageError(str(e))
    splits = (("train", args.n_train), ("val", args.n_val), ("test", args.n_test))
    if any(n < 0 for _, n in splits) or all(n == 0 for _, n in splits):
        raise UsageError("split sizes must be non-negative, at least one positive")

    start = 0  # disjoint sequence indices keep the splits independent
    for name, n in splits:
        if n == 0:
            continue
        seqs = make_dataset(cfg, n, args.seed, start_index=start)
        stats = distractor_stats(seqs)
        extra = {
            "split": name, "seed": args.seed, "start_index": start,
            "n_frames": cfg.n_frames, "k_distractors": cfg.k_distractors,
        }
        extra.update({f"distractor_{k}": v for k, v in stats.items()})
        write_dataset(os.path.join(args.out, name), seqs, extra)
        print(f"{name}: {n} sequences, {cfg.n_frames} frames each, "
              f"distractors near target {stats}")
        start += n
    return 0


def _train_config(args):
    from .train import TrainConfig

    cfg = TrainConfig(
        seed=args.seed, epochs=args.epochs, batch_size=args.batch_size,
        lr=args.lr, points_per_frame=args.points, margin=args.margin,
        interval_max=args.interval_max, samples_per_epoch=args.samples_per_epoch,
        model=args.model, grad_clip=args.grad_clip, save_every=args.save_every,
    )
    try:
        cfg.validate()
    except ValueError as e:
        raise UsageError(str(e))
    return cfg


def _run_grad_check(cfg) -> None:
    from .train import gradient_check

    rep = gradient_check(cfg)
    print(f"grad check: max relative error {rep['max_rel_err']:.3e} "
          f"over {len(rep['probes'])} probed parameters")
    if rep["max_rel_err"] > 1e-3:
        worst = max(rep["probes"], key=lambda r: r["rel_err"])
        raise CliError(f"gradient check failed at {worst['param']} "
                       f"(rel err {worst['rel_err']:.3e})")


def cmd_train(args) -> int:
    from .train import train_supervised

    _need(args, "data", "out")
    cfg = _train_config(args)
    if args.grad_check:
        _run_grad_check(cfg)
    if args.resume is not None and not os.path.exists(args.resume):
        raise MissingInput(f"resume checkpoint not found: {args.resume}")
    sequences, _ = _load_split(args.data)
    val = _load_split(args.val_data)[0] if args.val_data else None
    result = train_supervised(sequences, cfg, args.out, val_sequences=val,
                              resume=args.resume)
    print(f"trained {len(result.epoch_losses)} epochs, "
          f"final loss {result.epoch_losses[-1]:.6f}")
    print(f"checkpoint: {result.last_checkpoint}")
    print(f"log: {result.csv_log}")
    return 0


def cmd_semi(args) -> int:
    from dataclasses import replace

    from .data import split_breakpoint
    from .semi import SemiConfig, train_semim

    _need(args, "data", "out", "label_ratio")
    if not 0.0 < args.label_ratio < 1.0:
        raise UsageError("--label-ratio must lie strictly between 0 and 1")
    args.model = "m2"  # the pipeline needs both stages
    mixed = _train_config(args)
    pretrain = replace(mixed, epochs=args.pretrain_epochs or mixed.epochs)
    semi = SemiConfig(
        lam=args.lam, alpha=args.alpha, gamma=args.gamma,
        paste_prob=args.paste_prob, grad_clip=args.grad_clip,
        unlabeled_per_batch=args.unlabeled_per_batch,
        pretrain=pretrain, mixed=mixed,
    )
    try:
        semi.validate()
    except ValueError as e:
        raise UsageError(str(e))

    sequences, _ = _load_split(args.data)
    scenes = sorted({s.scene for s in sequences})
    if len(scenes) < 2:
        raise UsageError("need at least two scenes to split by label ratio")
    n_labeled = min(max(int(round(args.label_ratio * len(scenes))), 1),
                    len(scenes) - 1)
    ds = split_breakpoint(sequences, scenes[n_labeled - 1])
    print(f"label split: {len(ds.labeled)} labeled / "
          f"{len(ds.unlabeled)} unlabeled sequences")
    val = _load_split(args.val_data)[0] if args.val_data else None
    res = train_semim(ds.labeled, ds.unlabeled, semi, args.out,
                      val_sequences=val, progress=print)
    print(f"pseudo labels: {res.pseudo_path}")
    print(f"pasted samples: {res.pasted_samples}, "
          f"skipped cycle passes: {res.skipped_cycles}")
    print(f"checkpoint: {res.mixed.last_checkpoint}")
    print(f"log: {res.mixed.csv_log}")
    return 0


def cmd_track(args) -> int:
    from .data import tracklet_rows, write_jsonl
    from .tracker import (
        CentroidRefiner,
        TrackOptions,
        load_tracker,
        track_sequence,
    )

    _need(args, "data", "checkpoint", "out")
    if args.ensemble < 1:
        raise UsageError("--ensemble must be at least 1")
    if not os.path.exists(args.checkpoint):
        raise MissingInput(f"checkpoint not found: {args.checkpoint}")
    sequences, _ = _load_split(args.data)
    opts = TrackOptions(points_per_frame=args.points, margin=args.margin,
                        seed=args.seed)
    tracker = load_tracker(args.checkpoint, opts)
    refiner = CentroidRefiner() if args.refine == "naive" else None

    rows, debug_rows = [], []
    for seq in sequences:
        sink = [] if args.dump_debug else None
        pred = track_sequence(tracker, seq.frames, seq.target.first_box(),
                              ensemble=args.ensemble, refiner=refiner,
                              debug_sink=sink)
        pred.category = seq.target.category
        rows += tracklet_rows(seq.seq_id, pred)
        if sink is not None:
            debug_rows += [{"seq": seq.seq_id, **d} for d in sink]
    write_jsonl(args.out, rows)
    print(f"tracked {len(sequences)} sequences -> {args.out}")
    if args.dump_debug:
        write_jsonl(args.dump_debug, debug_rows)
        print(f"per-frame debug: {args.dump_debug}")
    return 0


def _load_gt(path):
    """Ground truth from a dataset directory (targets only) or a JSONL file."""
    from .data import read_jsonl, rows_to_tracklets

    if os.path.isdir(path):
        seqs, _ = _load_split(path)
        return {(s.seq_id, "target"): s.target for s in seqs}
    if not os.path.exists(path):
        raise MissingInput(f"ground truth not found: {path}")
    return rows_to_tracklets(read_jsonl(path))


def cmd_eval(args) -> int:
    import numpy as np

    from .data import Frame, read_jsonl, rows_to_tracklets
    from .metrics import (
        PRECISION_THRESHOLDS,
        SUCCESS_THRESHOLDS,
        ope,
        weighted_mean,
        write_csv_report,
        write_json_report,
        zero_motion_baseline,
    )

    _need(args, "pred", "gt", "out")
    if not os.path.exists(args.pred):
        raise MissingInput(f"predictions not found: {args.pred}")
    preds = rows_to_tracklets(read_jsonl(args.pred))
    gt = _load_gt(args.gt)
    if set(preds) != set(gt):
        missing = sorted(set(gt) - set(preds))
        extra = sorted(set(preds) - set(gt))
        raise UsageError(f"prediction/ground-truth ids differ: "
                         f"missing {missing}, unexpected {extra}")

    per_seq = {key: ope(preds[key], gt[key], per_frame=True)
               for key in sorted(gt)}
    mean = weighted_mean(per_seq.values())

    by_cat = {}
    for key, res in per_seq.items():
        by_cat.setdefault(gt[key].category, []).append(res)
    header = ["category", "sequences", "frames", "success", "precision"]
    rows = []
    for cat in sorted(by_cat):
        agg = weighted_mean(by_cat[cat])
        rows.append([cat, len(by_cat[cat]), agg.n_frames,
                     f"{agg.success:.4f}", f"{agg.precision:.4f}"])
    rows.append(["all", len(per_seq), mean.n_frames,
                 f"{mean.success:.4f}", f"{mean.precision:.4f}"])

    payload = {
        "mean": {"success": mean.success, "precision": mean.precision,
                 "frames": mean.n_frames},
        "per_sequence": {
            f"{seq}/{track}": {"success": r.success, "precision": r.precision,
                               "frames": r.n_frames}
            for (seq, track), r in per_seq.items()
        },
        "per_category": {
            cat: {"success": weighted_mean(group).success,
                  "precision": weighted_mean(group).precision,
                  "frames": weighted_mean(group).n_frames}
            for cat, group in by_cat.items()
        },
    }

    if args.baseline == "zero-motion":
        base = []
        for key in sorted(gt):
            g = gt[key]
            frames = [Frame(fid, np.zeros((0, 3))) for fid in g.frame_ids()]
            base.append(ope(zero_motion_baseline(frames, g.first_box()), g))
        bagg = weighted_mean(base)
        rows.append(["zero-motion baseline", len(base), bagg.n_frames,
                     f"{bagg.success:.4f}", f"{bagg.precision:.4f}"])
        payload["baseline"] = {"success": bagg.success,
                               "precision": bagg.precision,
                               "frames": bagg.n_frames}

    os.makedirs(args.out, exist_ok=True)
    write_csv_report(os.path.join(args.out, "report.csv"), rows, header)
    write_json_report(os.path.join(args.out, "report.json"), payload)
    if args.curves:
        ious = np.concatenate([r.ious for r in per_seq.values()])
        errors = np.concatenate([r.errors for r in per_seq.values()])
        write_csv_report(
            os.path.join(args.out, "success_curve.csv"),
            [[f"{t:.2f}", f"{float(np.mean(ious > t)):.6f}"]
             for t in SUCCESS_THRESHOLDS],
            ["iou_threshold", "fraction"],
        )
        write_csv_report(
            os.path.join(args.out, "precision_curve.csv"),
            [[f"{d:.2f}", f"{float(np.mean(errors <= d)):.6f}"]
             for d in PRECISION_THRESHOLDS],
            ["error_threshold", "fraction"],
        )
    print(f"success {mean.success:.4f} precision {mean.precision:.4f} "
          f"over {mean.n_frames} frames")
    print(f"report: {os.path.join(args.out, 'report.csv')}")
    return 0


# ---------------------------------------------------------------------------
# parser assembly

def _add_common(sub):
    sub.add_argument("--config", help="flat key=value option file, flags win")
    sub.add_argument("--threads", type=int, default=1,
                     help="BLAS threads (results are pinned at 1)")


def _add_train_options(sub, model_choice: bool):
    sub.add_argument("--data", help="training dataset directory")
    sub.add_argument("--out", help="output directory")
    sub.add_argument("--seed", type=int, default=None,
                     help="required (or MOTRACK_SEED)")
    sub.add_argument("--epochs", type=int, default=60)
    sub.add_argument("--batch-size", type=int, default=32)
    sub.add_argument("--points", type=int, default=1024,
                     help="points per frame crop")
    sub.add_argument("--lr", type=float, default=1e-3)
    sub.add_argument("--margin", type=float, default=2.0)
    sub.add_argument("--interval-max", type=int, default=1,
                     help="max frame gap of training pairs")
    sub.add_argument("--samples-per-epoch", type=int, default=0,
                     help="0 = one full pass over all pairs")
    sub.add_argument("--save-every", type=int, default=1,
                     help="checkpoint cadence in epochs")
    sub.add_argument("--val-data", help="validation dataset directory")
    if model_choice:
        sub.add_argument("--model", choices=("m2", "mvanilla"), default="m2")
        sub.add_argument("--grad-clip", type=float, default=0.0,
                         help="max gradient norm, 0 disables")


def build_parser():
    parser = _Parser(prog="motrack",
                     description="Motion-centric 3D single object tracking.")
    commands = parser.add_subparsers(dest="command", metavar="command")
    subs = {}

    s = subs["synth"] = commands.add_parser(
        "synth", description="Generate train/val/test scene splits.")
    s.add_argument("--out", help="dataset root directory")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--n-train", type=int, default=40)
    s.add_argument("--n-val", type=int, default=10)
    s.add_argument("--n-test", type=int, default=10)
    s.add_argument("--frames", type=int, default=20, help="frames per sequence")
    s.add_argument("--distractors", type=int, default=2,
                   help="same-category distractors per scene")
    s.add_argument("--clutter", type=int, default=600,
                   help="background points per frame")
    s.add_argument("--static-prob", type=float, default=0.15)
    _add_common(s)

    t = subs["train"] = commands.add_parser(
        "train", description="Supervised training.")
    _add_train_options(t, model_choice=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--grad-check", action="store_true",
                   help="finite-difference audit of the loss gradients first")
    _add_common(t)

    m = subs["semi"] = commands.add_parser(
        "semi", description="Semi-supervised pipeline: "
        "pre-train, pseudo-label, mixed training.")
    _add_train_options(m, model_choice=False)
    m.add_argument("--label-ratio", type=float,
                   help="fraction of scenes keeping labels, in (0, 1)")
    m.add_argument("--pretrain-epochs", type=int, default=0,
                   help="0 = same as --epochs")
    m.add_argument("--lam", type=float, default=0.1,
                   help="pseudo-label loss weight")
    m.add_argument("--alpha", type=float, default=0.1,
                   help="motion-consistency loss weight")
    m.add_argument("--gamma", type=float, default=1.25,
                   help="deletion scale of paste augmentation")
    m.add_argument("--paste-prob", type=float, default=0.5)
    m.add_argument("--grad-clip", type=float, default=1.0)
    m.add_argument("--unlabeled-per-batch", type=int, default=0,
                   help="0 = match the labeled batch size")
    _add_common(m)

    k = subs["track"] = commands.add_parser(
        "track", description="Track every sequence of a dataset.")
    k.add_argument("--data", help="dataset directory (first boxes from targets)")
    k.add_argument("--checkpoint", help="trained model checkpoint")
    k.add_argument("--out", help="output tracklet JSONL path")
    k.add_argument("--seed", type=int, default=None)
    k.add_argument("--ensemble", type=int, default=1,
                   help="recent frames voting per step")
    k.add_argument("--refine", choices=("naive",),
                   help="post-refine boxes by centroid matching")
    k.add_argument("--points", type=int, default=1024)
    k.add_argument("--margin", type=float, default=2.0)
    k.add_argument("--dump-debug", metavar="PATH",
                   help="write per-frame diagnostics JSONL")
    _add_common(k)

    e = subs["eval"] = commands.add_parser(
        "eval", description="Score predicted tracklets against ground truth.")
    e.add_argument("--pred", help="predicted tracklet JSONL")
    e.add_argument("--gt", help="dataset directory or tracklet JSONL")
    e.add_argument("--out", help="report output directory")
    e.add_argument("--curves", action="store_true",
                   help="also write success/precision curve points")
    e.add_argument("--baseline", choices=("zero-motion",),
                   help="add a propagate-first-box comparison row")
    _add_common(e)

    return parser, subs


_DISPATCH = {
    "synth": cmd_synth,
    "train": cmd_train,
    "semi": cmd_semi,
    "track": cmd_track,
    "eval": cmd_eval,
}

_SEED_REQUIRED = {"train", "semi"}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _set_thread_env(_peek_threads(argv))
    try:
        parser, subs = build_parser()
        try:
            args = parser.parse_args(argv)
        except SystemExit as e:  # --help
            return int(e.code or 0)
        if args.command is None:
            raise UsageError("no command given (see motrack --help)")
        if getattr(args, "config", None):
            _apply_config_file(subs[args.command], args.config)
            args = parser.parse_args(argv)
        if hasattr(args, "seed"):
            _resolve_seed(args, args.command in _SEED_REQUIRED)
        return _DISPATCH[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return e.code
    except MissingInput as e:
        print(f"missing input: {e}", file=sys.stderr)
        return e.code
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except FileNotFoundError as e:
        print(f"missing input: {e}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130
    except Exception as e:  # noqa: BLE001  anything else is our bug
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
