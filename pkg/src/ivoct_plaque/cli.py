"""Command-line entry point: ``ivoct-plaque <subcommand> ...``.

The 16-model comparison is a shell loop over backbones, representations and
the pretrained flag; there is no built-in sweep.
"""
import argparse
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from .dataset import Representation, convert_manifest, load_manifest, patient_split, write_manifest
from .evaluation import evaluate, read_report, scatter_plot, write_report

log = logging.getLogger("ivoct_plaque")


def cmd_synth(args):
    from .phantom import generate_dataset

    rc = cfgmod.read_run_config(args.spec)
    if rc.phantom is None:
        raise ValueError(f"{args.spec}: missing [phantom] section")
    m = generate_dataset(rc.phantom, args.out, workers=args.workers)
    print(f"wrote {len(m)} frames for {len(m.patients)} patients to {Path(args.out) / 'manifest.csv'}")


def cmd_convert(args):
    m = load_manifest(args.manifest)
    out = convert_manifest(
        m, args.to, args.out, side=args.side,
        depth_samples=args.depth_samples, num_ascans=args.num_ascans,
    )
    print(f"converted {len(out)} frames to {args.to} in {args.out}")


def cmd_split(args):
    m = load_manifest(args.manifest)
    s = patient_split(m, args.test_patients, args.seed)
    out = Path(args.out)
    write_manifest(s.train, out / "train.csv")
    write_manifest(s.test, out / "test.csv")
    print(
        f"train: {len(s.train.patients)} patients / {len(s.train)} frames; "
        f"test: {len(s.test.patients)} patients / {len(s.test)} frames"
    )


def cmd_train(args):
    from .augmentation import AugmentConfig
    from .models import ModelConfig, TrainConfig, build_model, save_checkpoint, train

    rc = cfgmod.read_run_config(args.config)
    m = load_manifest(args.train_manifest)
    aug = rc.augment or AugmentConfig(representation=m.representation)
    tc = rc.train or TrainConfig(representation=m.representation)
    mc = rc.model or ModelConfig()
    model = build_model(mc, seed=tc.seed, weights_cache=rc.path("weights_cache"))
    trained = train(model, m, aug, tc)
    save_checkpoint(trained, args.out)
    last = trained.history[-1]
    print(
        f"trained {mc.backbone.value} ({'pretrained' if mc.pretrained else 'scratch'}) on "
        f"{len(m)} {m.representation.value} frames: final loss {last['loss']:.4f}, "
        f"train accuracy {trained.final_train_accuracy:.3f} -> {args.out}"
    )


def cmd_eval(args):
    from .models import load_checkpoint

    model = load_checkpoint(args.ckpt)
    m = load_manifest(args.test_manifest)
    report = evaluate(model, m)
    write_report(report, args.out)
    print(report.summary())


def cmd_plot(args):
    reports = [read_report(p) for p in args.reports]
    res = scatter_plot(reports, args.out)
    print(f"plotted {len(res.plotted)} of {len(reports)} reports -> {res.image}, {res.csv}")


def build_parser():
    p = argparse.ArgumentParser(prog="ivoct-plaque", description="IVOCT plaque classification pipeline")
    p.add_argument("--print-config", action="store_true", help="print all default settings and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="<command>")

    s = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    s.add_argument("--spec", required=True, help="config file with a [phantom] section")
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("convert", help="scan-convert a dataset between polar and cartesian")
    s.add_argument("--manifest", required=True)
    s.add_argument("--to", required=True, choices=[r.value for r in Representation])
    s.add_argument("--side", type=int, default=600)
    s.add_argument("--depth-samples", type=int, default=512)
    s.add_argument("--num-ascans", type=int, default=360)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_convert)

    s = sub.add_parser("split", help="patient-level train/test split")
    s.add_argument("--manifest", required=True)
    s.add_argument("--test-patients", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", help="train a classifier and save a checkpoint")
    s.add_argument("--config", required=True)
    s.add_argument("--train-manifest", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a test manifest")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--test-manifest", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("plot", help="sensitivity vs 1-specificity scatter of reports")
    s.add_argument("--reports", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.print_config:
        sys.stdout.write(cfgmod.format_run_config(cfgmod.RunConfig.defaults()))
        return 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("ivoct-plaque: error: a subcommand is required", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except Exception as e:
        msg = str(e).splitlines()[0] if str(e) else e.__class__.__name__
        print(f"ivoct-plaque {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
