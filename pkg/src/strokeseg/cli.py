"""``strokeseg`` command-line entry point: synth | folds | train | eval | predict."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as dp
from .config import DATA_ROOT_ENV, RunConfig, format_config, load_config, parse_config_text
from .errors import ConfigError, DataError, StrokeSegError
from .evaluation import CvReport, dump_reports, evaluate_fold, load_reports, predict_case, render_table
from .training import ABLATIONS, ablation_flags, load_checkpoint, train

log = logging.getLogger("strokeseg")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


# -- synth ---------------------------------------------------------------------


def cmd_synth(args):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = []
    for i in range(args.n_cases):
        case = dp.synth_case(args.seed + i, tuple(args.shape), case_id=f"case{i:03d}")
        dp.save_case(case, out, args.format)
        ids.append(case.case_id)
    dp.write_manifest(out / "manifest.txt", ids)
    print(f"wrote {len(ids)} cases to {out}")
    return EXIT_OK


# -- folds ---------------------------------------------------------------------


def _manifest_path(args, cfg=None):
    if getattr(args, "manifest", None):
        return Path(args.manifest)
    if cfg is not None and cfg.resolved_manifest() is not None:
        return cfg.resolved_manifest()
    root = getattr(args, "data_root", None)
    if root:
        return Path(root) / "manifest.txt"
    raise ConfigError(f"no manifest given (use --manifest, --data-root or ${DATA_ROOT_ENV})")


def cmd_folds(args):
    entries = dp.read_manifest(_manifest_path(args, RunConfig(data_root=args.data_root)),
                               args.data_root)
    split = dp.make_folds([cid for cid, _ in entries], args.k, args.seed)
    text = json.dumps(split.to_json(), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- train ---------------------------------------------------------------------

_TRAIN_FLAG_KEYS = ("epochs", "batch_size", "seed", "max_iterations", "data_root", "manifest",
                    "out_dir", "k_folds", "device")


def build_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {k: getattr(args, k) for k in _TRAIN_FLAG_KEYS if getattr(args, k, None) is not None}
    for item in args.set or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    return cfg.with_overrides(overrides)


def _ablation_tags(text):
    if text is None:
        return None
    if text.lower() == "all":
        return list(ABLATIONS)
    tags = [t.strip().upper() for t in text.split(",")]
    for t in tags:
        ablation_flags(t)
    return tags


def _fold_ids(text, k):
    if text is None or text == "all":
        return list(range(k))
    try:
        ids = [int(t) for t in text.split(",")]
    except ValueError as exc:
        raise ConfigError(f"--fold expects N, N,M or 'all', got {text!r}") from exc
    bad = [i for i in ids if not 0 <= i < k]
    if bad:
        raise ConfigError(f"fold index out of range 0..{k - 1}: {bad}")
    return ids


def cmd_train(args):
    cfg = build_run_config(args)
    tags = _ablation_tags(args.ablation) or [cfg.train.ablation]
    folds_wanted = _fold_ids(args.fold, cfg.k_folds)
    cfg.validate(need_data=not args.dry_run)
    sys.stdout.write("# effective configuration\n" + format_config(cfg))
    runs = [(tag, f) for tag in tags for f in folds_wanted]
    if args.dry_run:
        for tag, f in runs:
            print(f"run ablation={tag} fold={f}")
        return EXIT_OK
    cases = dp.load_manifest_cases(cfg.resolved_manifest(), cfg.resolved_data_root())
    split = dp.make_folds([c.case_id for c in cases], cfg.k_folds, cfg.fold_seed)
    for tag in tags:
        run_cfg = cfg.with_overrides({"ablation": tag})
        run_dir = Path(cfg.out_dir) / tag
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.ini").write_text(format_config(run_cfg))
        (run_dir / "folds.json").write_text(json.dumps(split.to_json(), indent=2) + "\n")
        results = train(cases, split, run_cfg.train, out_dir=run_dir, only_folds=folds_wanted)
        for r in results:
            print(f"{tag} fold {r.fold}: best {json.dumps(r.best_dice)} -> {r.checkpoint}")
    return EXIT_OK


# -- eval ----------------------------------------------------------------------


def _checkpoints_in(path: Path):
    """Group checkpoints by run: a checkpoint file, a run dir, or a dir of run dirs."""
    if path.is_file():
        return [[path]]
    if not path.is_dir():
        raise DataError(f"no checkpoint or run directory at {path}")
    own = sorted(path.glob("fold*/best.pt"))
    if own:
        return [own]
    groups = [sorted(d.glob("fold*/best.pt")) for d in sorted(path.iterdir()) if d.is_dir()]
    groups = [g for g in groups if g]
    if not groups:
        raise DataError(f"no fold checkpoints under {path}")
    return groups


def evaluate_checkpoints(ckpts, cases_by_id, inclusive_penumbra=None) -> CvReport:
    fold_scores, tag = [], None
    for ckpt in ckpts:
        seg, _, tcfg, meta = load_checkpoint(ckpt)
        tag = tag or tcfg.ablation
        ids = meta.get("val_ids") if len(ckpts) > 1 else None
        ids = ids or list(cases_by_id)
        missing = [i for i in ids if i not in cases_by_id]
        if missing:
            raise DataError(f"{ckpt}: validation cases missing from manifest: {missing[:5]}")
        incl = tcfg.inclusive_penumbra if inclusive_penumbra is None else inclusive_penumbra
        fold_scores.append(evaluate_fold(seg, [cases_by_id[i] for i in ids], incl,
                                         tcfg.pad_to_multiple))
    return CvReport.from_folds(tag, fold_scores)


def cmd_eval(args):
    reports = []
    for path in args.reports or ():
        reports.extend(load_reports(path))
    if args.checkpoints:
        manifest = _manifest_path(args)
        cases = dp.load_manifest_cases(manifest, args.data_root)
        by_id = {c.case_id: c for c in cases}
        for target in args.checkpoints:
            for group in _checkpoints_in(Path(target)):
                reports.append(evaluate_checkpoints(group, by_id, args.inclusive_penumbra))
    if not reports:
        raise ConfigError("nothing to evaluate: pass checkpoints or --reports")
    blob = json.dumps([r.to_json() for r in reports], indent=2) + "\n"
    if args.out:
        dump_reports(reports, args.out)
    else:
        sys.stdout.write(blob)
    if args.table:
        table = render_table(reports)
        if args.table_out:
            Path(args.table_out).write_text(table)
        sys.stdout.write(table)
    return EXIT_OK


# -- predict -------------------------------------------------------------------


def cmd_predict(args):
    seg, _, tcfg, _ = load_checkpoint(args.checkpoint)
    case = dp.load_case(args.case_dir)
    pred = predict_case(seg, case, tcfg.pad_to_multiple)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spacing = case.penumbra_mask.spacing
    dp.write_rawf32(out / "prediction.rawf32", pred.astype(np.float32), spacing)
    print(f"wrote {out / 'prediction.rawf32'}")
    if args.overlay:
        from .overlay import write_overlays

        paths = write_overlays(case.modalities["DWI"].data, pred, out / "overlays")
        print(f"wrote {len(paths)} overlays to {out / 'overlays'}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def _int_triplet(values):
    return [int(v) for v in values]


def build_parser():
    p = argparse.ArgumentParser(prog="strokeseg",
                                description="Stroke lesion segmentation: data, training, evaluation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a phantom dataset and its manifest")
    s.add_argument("--n-cases", type=int, default=12, help="number of cases (default 12)")
    s.add_argument("--shape", type=int, nargs=3, default=[4, 96, 96], metavar=("D", "H", "W"),
                   help="volume shape (default 4 96 96)")
    s.add_argument("--seed", type=int, default=0, help="seed of the first case (default 0)")
    s.add_argument("--format", choices=["rawf32", "nii", "nii.gz"], default="rawf32",
                   help="volume file format (default rawf32)")
    s.add_argument("out_dir", help="output dataset directory")
    s.set_defaults(func=cmd_synth)

    f = sub.add_parser("folds", help="print the k-fold case split")
    f.add_argument("--manifest", help="manifest file (default <data-root>/manifest.txt)")
    f.add_argument("--data-root", help=f"dataset root (default ${DATA_ROOT_ENV})")
    f.add_argument("--k", type=int, default=3, help="number of folds (default 3)")
    f.add_argument("--seed", type=int, default=0, help="shuffle seed (default 0)")
    f.add_argument("--out", help="write JSON here instead of stdout")
    f.set_defaults(func=cmd_folds)

    t = sub.add_parser("train", help="cross-validated training of one or more ablations")
    t.add_argument("config", nargs="?", help="config file (INI sections: data, train, loss, model, eval, output)")
    t.add_argument("--ablation", help="BL1..BL7, PROPOSED, a comma list, or 'all'")
    t.add_argument("--fold", help="fold index, comma list, or 'all' (default all)")
    t.add_argument("--data-root", help=f"dataset root (default ${DATA_ROOT_ENV})")
    t.add_argument("--manifest", help="manifest file (default <data-root>/manifest.txt)")
    t.add_argument("--out-dir", help="where run directories are written")
    t.add_argument("--k-folds", type=int, help="number of folds")
    t.add_argument("--epochs", type=int, help="training epochs per fold")
    t.add_argument("--batch-size", type=int, help="slices per batch")
    t.add_argument("--max-iterations", type=int, help="cap on optimizer steps per fold")
    t.add_argument("--seed", type=int, help="training seed")
    t.add_argument("--device", help="torch device (default cpu)")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key, e.g. --set lambda_adv=0.05")
    t.add_argument("--dry-run", action="store_true", help="print the runs without training")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="Dice report (JSON) and optional Markdown table")
    e.add_argument("checkpoints", nargs="*",
                   help="checkpoint file, run directory, or directory of run directories")
    e.add_argument("--manifest", help="manifest of the cases to score")
    e.add_argument("--data-root", help=f"dataset root (default: manifest directory)")
    e.add_argument("--reports", action="append", help="existing report JSON to include")
    e.add_argument("--inclusive-penumbra", action="store_true", default=None,
                   help="score penumbra as lesion (penumbra+core) vs the raw penumbra mask")
    e.add_argument("--out", help="write report JSON here instead of stdout")
    e.add_argument("--table", action="store_true", help="also print the Markdown table")
    e.add_argument("--table-out", help="also write the Markdown table to this file")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="predict one case; optional PNG overlays")
    r.add_argument("checkpoint", help="checkpoint file")
    r.add_argument("case_dir", help="case directory")
    r.add_argument("out_dir", help="output directory")
    r.add_argument("--overlay", action="store_true", help="write one contour overlay PNG per slice")
    r.set_defaults(func=cmd_predict)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StrokeSegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
