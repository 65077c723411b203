"""Command-line entry points: generate, train, eval, sweep, export-attention, rerun.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
Every command writes ``run.json`` into its output directory.
"""

import argparse
import csv
import json
import logging
import os
import sys

from . import data
from .config import AXIS_ALIASES, SWEEP_AXES, from_mapping, load_config_file
from .errors import Label2LabelError, NonFiniteLoss
from .train import evaluate, export_attention, train, write_run_record

log = logging.getLogger("label2label")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


def _kv_overrides(items):
    out = {}
    for item in items or ():
        if "=" not in item:
            raise UsageError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _resolve_config(args):
    """File values, then explicit flags, then trailing key=value overrides."""
    mapping = load_config_file(args.config) if args.config else {}
    for key in ("dataset", "out", "mode", "seed", "epochs"):
        val = getattr(args, key, None)
        if val is not None:
            mapping[key] = val
    mapping.update(_kv_overrides(args.set))
    return from_mapping(mapping).validate()


def cmd_generate(args, argv):
    if args.k > 16:
        log.warning("K=%d: the Bayes oracle will be unavailable", args.k)
    try:
        spec = data.SynthSpec(n_attributes=args.m, n_factors=args.k, flip_eps=args.eps,
                              occlusion_rho=args.rho, seed=args.seed, image_size=args.image_size,
                              patch=args.patch)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    splits = None
    if args.splits:
        try:
            splits = [int(s) for s in args.splits.split(",")]
        except ValueError as exc:
            raise UsageError(f"--splits: {exc}") from exc
        if len(splits) != 3:
            raise UsageError("--splits needs three comma-separated sizes")
    try:
        data.generate(spec, args.n, args.out, splits)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    write_run_record(args.out, "generate", argv, spec.to_dict())
    return EXIT_OK


def cmd_train(args, argv):
    cfg = _resolve_config(args)
    if not cfg.dataset or not cfg.out:
        raise UsageError("train needs dataset and out")
    write_run_record(cfg.out, "train", argv, cfg.to_dict(), [cfg.dataset, os.path.dirname(cfg.dataset),
                                                              cfg.init_checkpoint])
    recs = train(cfg, log_fn=lambda r: log.info("epoch %d L_total=%.6f val_error=%.4f",
                                                 r["epoch"], r["L_total"], r["val"]["mean_error"]))
    log.info("trained %d epochs into %s", len(recs), cfg.out)
    return EXIT_OK


def _write_eval(result, out_dir):
    from .objectives import MetricReport

    os.makedirs(out_dir, exist_ok=True)
    rep = MetricReport.from_dict(result["model"])
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        fh.write(rep.to_json() + "\n")
    rep.write_error_csv(os.path.join(out_dir, "per_attribute_error.csv"))
    with open(os.path.join(out_dir, "eval.json"), "w", encoding="utf-8") as fh:
        json.dump(result, fh, indent=1)
        fh.write("\n")
    return rep


def cmd_eval(args, argv):
    write_run_record(args.out, "eval", argv, {"checkpoint": args.checkpoint, "dataset": args.dataset,
                                              "split": args.split},
                     [args.checkpoint, os.path.dirname(args.dataset)])
    result = evaluate(args.checkpoint, args.dataset, args.split)
    rep = _write_eval(result, args.out)
    log.info("mean error %.4f", rep.mean_error)
    if "oracle" in result:
        log.info("oracle mean error %.4f", result["oracle"]["mean_error"])
    return EXIT_OK


def cmd_sweep(args, argv):
    axis = AXIS_ALIASES.get(args.axis, args.axis)
    if axis not in SWEEP_AXES:
        raise UsageError(f"axis must be one of {SWEEP_AXES} (or alias {sorted(AXIS_ALIASES)})")
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise UsageError("--values is empty")
    base = _resolve_config(args)
    if not base.dataset:
        raise UsageError("sweep needs dataset")
    # validate every grid point before any training
    cfgs = [base.replace(**{axis: v, "out": os.path.join(args.out, f"{axis}_{v}")}).validate() for v in values]
    write_run_record(args.out, "sweep", argv, base.to_dict(), [base.dataset, os.path.dirname(base.dataset)])
    rows = []
    for raw, cfg in zip(values, cfgs):
        log.info("sweep %s=%s", axis, raw)
        train(cfg)
        result = evaluate(os.path.join(cfg.out, "checkpoint"), cfg.dataset, cfg.eval_split)
        _write_eval(result, os.path.join(cfg.out, "eval"))
        m = result["model"]
        rows.append([raw, repr(m["mean_error"]), "" if m["mA"] is None else repr(m["mA"]), repr(m["f1"])])
    with open(os.path.join(args.out, "sweep.csv"), "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["value", "mean_error", "mA", "f1"])
        wr.writerows(rows)
    return EXIT_OK


def cmd_export_attention(args, argv):
    try:
        ids = [int(s) for s in args.ids.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"--ids: {exc}") from exc
    write_run_record(args.out, "export-attention", argv,
                     {"checkpoint": args.checkpoint, "dataset": args.dataset, "ids": ids},
                     [args.checkpoint, os.path.dirname(args.dataset)])
    export_attention(args.checkpoint, args.dataset, ids, args.out)
    return EXIT_OK


def cmd_rerun(args, argv):
    try:
        with open(args.record, encoding="utf-8") as fh:
            rec = json.load(fh)
        old = list(rec["args"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"{args.record}: not a run record ({exc})") from exc
    if args.out:
        old = _replace_out(old, args.out)
    return main(old)


def _replace_out(argv, new_out):
    out = list(argv)
    for i, a in enumerate(out):
        if a == "--out" and i + 1 < len(out):
            out[i + 1] = new_out
            return out
        if a.startswith("--out="):
            out[i] = "--out=" + new_out
            return out
        if a.startswith("out="):
            out[i] = "out=" + new_out
            return out
    return out + ["--out", new_out]


def _config_flags(p, need_out=True):
    p.add_argument("--config", help="key=value file or a run.json whose config is reused")
    p.add_argument("--dataset", help="path to manifest.json")
    p.add_argument("--out", required=need_out)
    p.add_argument("--mode")
    p.add_argument("--seed")
    p.add_argument("--epochs")
    p.add_argument("set", nargs="*", metavar="KEY=VALUE", help="further config overrides")


def build_parser():
    ap = argparse.ArgumentParser(prog="l2l", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--m", type=int, default=8, help="number of attributes")
    g.add_argument("--k", type=int, default=3, help="number of latent factors")
    g.add_argument("--eps", type=float, default=0.05, help="label flip probability")
    g.add_argument("--rho", type=float, default=0.3, help="patch occlusion probability")
    g.add_argument("--n", type=int, default=5000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--image-size", type=int, default=16)
    g.add_argument("--patch", type=int, default=4)
    g.add_argument("--splits", help="train,val,test sizes (default 80/10/10)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model")
    _config_flags(t, need_out=False)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="one train+eval per value of an ablation axis")
    s.add_argument("--axis", required=True)
    s.add_argument("--values", required=True, help="comma-separated")
    _config_flags(s)
    s.set_defaults(func=cmd_sweep)

    x = sub.add_parser("export-attention", help="dump attention matrices and PGM heatmaps")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--dataset", required=True)
    x.add_argument("--ids", required=True, help="comma-separated sample ids")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_attention)

    r = sub.add_parser("rerun", help="repeat the command recorded in a run.json")
    r.add_argument("record")
    r.add_argument("--out", help="write into this directory instead")
    r.set_defaults(func=cmd_rerun)
    return ap


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args, argv)
    except (NonFiniteLoss, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, Label2LabelError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
