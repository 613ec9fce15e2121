"""Operator command line.

Subcommands: synth, train, eval, verify, identify, params, active, serve.
Report-producing commands (eval, active) write delimited CSV and render the
matching figure next to it. Exit codes: 0 success, 2 usage, 3 data problems,
4 numeric/fit failures.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import active as active_mod
from . import classify, dataio, pipeline, pixelhop, report
from .errors import DataError, FitError, ModelIOError, ToolkitError
from .pairfeat import FeatureLayout
from .preprocess import read_image

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _settings_from_args(args) -> pipeline.TrainSettings:
    ec_y = args.ec if args.ec is not None else args.ec_y
    ef_y = args.ef if args.ef is not None else (args.ef_y if args.ef_y is not None else ec_y)
    ec_crcb = args.ec if args.ec is not None else args.ec_crcb
    ef_crcb = args.ef if args.ef is not None else (args.ef_crcb if args.ef_crcb is not None else ec_crcb)
    if ec_y > ef_y or ec_crcb > ef_crcb:
        raise DataError("--ec must not exceed --ef")
    return pipeline.TrainSettings(
        ec_y=ec_y,
        ef_y=ef_y,
        ec_crcb=ec_crcb,
        ef_crcb=ef_crcb,
        patch_subsample=args.patch_subsample,
        seed=args.seed,
        augment=getattr(args, "augment", False),
        low_resolution=getattr(args, "low_resolution", None),
    )


def _add_settings_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ec", type=float, default=None, help="energy cutoff for both submodels")
    p.add_argument("--ef", type=float, default=None, help="energy forward threshold for both submodels")
    p.add_argument("--ec-y", type=float, default=pipeline.DEFAULT_EC_Y)
    p.add_argument("--ef-y", type=float, default=None)
    p.add_argument("--ec-crcb", type=float, default=pipeline.DEFAULT_EC_CRCB)
    p.add_argument("--ef-crcb", type=float, default=None)
    p.add_argument("--patch-subsample", type=float, default=1.0, help="fit-time patch sampling rate")
    p.add_argument("--seed", type=int, default=0)


def _load_pairs(args) -> list[dataio.FacePair]:
    if getattr(args, "manifest", None):
        return dataio.load_manifest_pairs(args.manifest)
    if getattr(args, "pairs_file", None) and getattr(args, "data", None):
        return dataio.parse_pairs_file(args.pairs_file, args.data).all_pairs()
    raise DataError("provide either --manifest or both --data and --pairs-file")


def _print_table1(model: classify.VerificationModel, settings: pipeline.TrainSettings) -> None:
    print(f"{'input_ch':<9}{'E_C':<9}{'K1':>5}{'K2':>5}{'K3':>5}{'P':>4}{'N':>5}")
    for name, sub, ec in (
        ("Y", model.submodel_y, settings.ec_y),
        ("CrCb", model.submodel_crcb, settings.ec_crcb),
    ):
        lay = sub.layout
        print(f"{name:<9}{ec:<9g}{lay.k1:>5}{lay.k2:>5}{lay.k3:>5}{lay.p:>4}{lay.n_features:>5}")


def cmd_synth(args) -> int:
    spec = dataio.SyntheticSpec(
        n_identities=args.identities,
        images_per_identity=args.images_per_identity,
        intra_class_noise=args.noise,
        seed=args.seed,
        n_pairs=args.pairs,
    )
    manifest = dataio.write_synthetic_dataset(spec, args.out)
    print(f"wrote synthetic dataset manifest: {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    settings = _settings_from_args(args)
    pairs = _load_pairs(args)
    store = dataio.ImageStore(capacity=args.cache)
    model = pipeline.train_verification_model(pairs, store, settings)
    classify.save_verification_model(model, args.out)
    _print_table1(model, settings)
    print(f"model written to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    settings = _settings_from_args(args)
    store = dataio.ImageStore(capacity=args.cache)
    if args.manifest:
        pairs = dataio.load_manifest_pairs(args.manifest)
        if args.folds < 2:
            raise DataError("--folds must be >= 2")
        chunks = [list(c) for c in np.array_split(np.arange(len(pairs)), args.folds)]
        protocol = dataio.PairProtocol(folds=[[pairs[i] for i in chunk] for chunk in chunks])
    else:
        protocol = dataio.parse_pairs_file(args.pairs_file, args.data)

    def progress(fold: int, acc: float) -> None:
        print(f"fold {fold}: accuracy {acc:.4f}")

    accs = pipeline.cross_validate(protocol, store, settings, progress=progress)
    mean, std = float(np.mean(accs)), float(np.std(accs))
    print(f"mean accuracy: {mean:.4f} +/- {std:.4f} over {len(accs)} folds")

    if args.out_csv:
        out_csv = Path(args.out_csv)
        lines = ["fold,accuracy"] + [f"{i},{a!r}" for i, a in enumerate(accs)]
        lines.append(f"mean,{mean!r}")
        out_csv.write_text("\n".join(lines) + "\n", encoding="utf-8")
        print(f"per-fold accuracies written to {out_csv}")
        if not args.no_plot:
            fig = out_csv.with_suffix(".png")
            report.plot_fold_accuracies(accs, fig)
            print(f"figure written to {fig}")
    return EXIT_OK


def cmd_verify(args) -> int:
    model = classify.load_verification_model(args.model)
    prob, match = classify.verify(model, read_image(args.a), read_image(args.b))
    print(f"probability: {prob:.6f}")
    print(f"decision: {'match' if match else 'mismatch'}")
    return EXIT_OK


def cmd_identify(args) -> int:
    model = classify.load_verification_model(args.model)
    folders = dataio.scan_identity_folders(args.gallery)
    if not folders:
        raise DataError(f"no identity folders under {args.gallery}")
    gallery = [(ident, read_image(p)) for ident, paths in folders.items() for p in paths]
    ranking = classify.identify(model, gallery, read_image(args.probe))
    for rank, (ident, score) in enumerate(ranking[: args.top], start=1):
        print(f"{rank:>3}  {ident:<24} {score:.6f}")
    return EXIT_OK


def _params_rows(y_counts, crcb_counts, accounting: str) -> tuple[list[tuple[str, int]], list[str]]:
    rows: list[tuple[str, int]] = []
    notes: list[str] = []
    for tag, counts, k0 in (("Y", y_counts, 1), ("CrCb", crcb_counts, 2)):
        if counts is None:
            continue
        k1, k2, k3 = counts
        per_level = pixelhop.count_parameters((k1, k2, k3), k0=k0, accounting=accounting)
        layout = FeatureLayout(k1=k1, k2=k2, k3=k3)
        rows.append((f"First hop - {tag}", per_level["level1"]))
        rows.append((f"Second hop - {tag}", per_level["level2"]))
        rows.append((f"Third hop - {tag}", per_level["level3"]))
        rows.append((f"Pairwise feature stats - {tag}", 2 * (k1 + k2 + k3)))
        rows.append((f"Pair classifier - {tag}", layout.n_features + 1))
        if tag == "CrCb" and accounting == "text":
            alt = pixelhop.count_parameters((k1, k2, k3), k0=2, accounting="table4")["level1"]
            notes.append(
                "note: first CrCb hop costed at its true 50-dim joint-kernel size "
                f"({per_level['level1']:,}); 25-dim accounting would report {alt:,}"
            )
    if y_counts is not None and crcb_counts is not None:
        rows.append(("Meta classifier", 3))
    return rows, notes


def cmd_params(args) -> int:
    if args.model:
        model = classify.load_verification_model(args.model)
        y_counts = model.submodel_y.hop.level_counts
        crcb_counts = model.submodel_crcb.hop.level_counts
    else:
        if args.y_counts is None and args.crcb_counts is None:
            raise DataError("provide --model or forced --y-counts/--crcb-counts")
        y_counts = args.y_counts
        crcb_counts = args.crcb_counts
    rows, notes = _params_rows(y_counts, crcb_counts, args.accounting)
    width = max(len(name) for name, _ in rows) + 2
    for name, value in rows:
        print(f"{name:<{width}}{value:>8,}")
    print(f"{'Total':<{width}}{sum(v for _, v in rows):>8,}")
    for note in notes:
        print(note)
    return EXIT_OK


def cmd_active(args) -> int:
    settings = _settings_from_args(args)
    pairs = dataio.load_manifest_pairs(args.manifest)
    store = dataio.ImageStore(capacity=args.cache)
    n_pool = max(2, int(len(pairs) * args.pool_fraction))
    if n_pool >= len(pairs):
        raise DataError("manifest has too few pairs for a held-out test split")
    pool_pairs, test_pairs = pairs[:n_pool], pairs[n_pool:]
    featurizer, fitted = pipeline.fit_featurizer(pool_pairs, store, settings)
    x_pool = np.hstack([fitted["y"], fitted["crcb"]])
    x_test = featurizer.features(test_pairs, store)
    y_pool = np.array([p.label for p in pool_pairs], dtype=int)
    y_test = np.array([p.label for p in test_pairs], dtype=int)

    config = active_mod.ActiveConfig(
        strategy=args.strategy, budget=args.budget, batch_size=args.batch, seed=args.seed
    )
    oracle = active_mod.GroundTruthOracle(y_pool)
    engine = active_mod.run_active_loop(x_pool, x_test, y_test, config, oracle, state_path=args.state)

    passive_model = classify.train_logistic(x_pool, y_pool)
    passive_acc = float(np.mean(classify.predict_label(passive_model, x_test) == y_test))
    target = args.target_fraction * passive_acc
    reached = next((c for _, c, a in engine.trace if a >= target), None)
    print(f"passive (all {len(y_pool)} labels) accuracy: {passive_acc:.4f}")
    if reached is None:
        print(f"target {target:.4f} not reached within the budget")
    else:
        print(f"reached {args.target_fraction:.0%} of passive accuracy with {reached} labels")

    csv_text = active_mod.trace_to_csv(engine.trace)
    if args.out_csv:
        out_csv = Path(args.out_csv)
        out_csv.write_text(csv_text, encoding="utf-8")
        print(f"trace written to {out_csv}")
        if not args.no_plot:
            fig = out_csv.with_suffix(".png")
            report.plot_active_trace(engine.trace, fig, passive_accuracy=passive_acc)
            print(f"figure written to {fig}")
    else:
        sys.stdout.write(csv_text)
    return EXIT_OK


def cmd_serve(args) -> int:
    from .service import run_server

    run_server(
        host=args.host,
        port=args.port,
        session_store=args.session_store,
        data_root=args.data_root,
        model_path=args.model,
        token=args.token,
    )
    return EXIT_OK


def _counts(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected K1,K2,K3")
    return tuple(int(p) for p in parts)  # type: ignore[return-value]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sslface", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic blob-face dataset")
    p.add_argument("--identities", type=int, default=20)
    p.add_argument("--images-per-identity", type=int, default=10)
    p.add_argument("--noise", type=float, default=4.0)
    p.add_argument("--pairs", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit both submodels and the meta classifier")
    p.add_argument("--manifest", help="synthetic dataset manifest")
    p.add_argument("--data", help="identity-folder image root")
    p.add_argument("--pairs-file", help="pairs protocol file")
    p.add_argument("--out", required=True, help="output model container")
    p.add_argument("--augment", action="store_true", help="add horizontally flipped training pairs")
    p.add_argument("--low-resolution", type=int, default=None, help="simulate NxN capture, e.g. 16")
    p.add_argument("--cache", type=int, default=512, help="decoded-image cache capacity")
    _add_settings_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="held-out-fold cross-validation accuracy")
    p.add_argument("--manifest")
    p.add_argument("--data")
    p.add_argument("--pairs-file")
    p.add_argument("--folds", type=int, default=10, help="fold count when evaluating a manifest")
    p.add_argument("--out-csv", help="write per-fold accuracies here")
    p.add_argument("--no-plot", action="store_true", help="skip the per-fold accuracy figure")
    p.add_argument("--low-resolution", type=int, default=None)
    p.add_argument("--cache", type=int, default=512)
    _add_settings_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="score one face pair with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("identify", help="rank gallery identities against a probe")
    p.add_argument("--model", required=True)
    p.add_argument("--gallery", required=True, help="identity-folder root")
    p.add_argument("--probe", required=True)
    p.add_argument("--top", type=int, default=5)
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("params", help="stored-parameter table per component")
    p.add_argument("--model")
    p.add_argument("--y-counts", type=_counts, default=None, metavar="K1,K2,K3")
    p.add_argument("--crcb-counts", type=_counts, default=None, metavar="K1,K2,K3")
    p.add_argument("--accounting", choices=("text", "table4"), default="text")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("active", help="query-loop simulation with a ground-truth oracle")
    p.add_argument("--manifest", required=True)
    p.add_argument("--strategy", choices=active_mod.STRATEGIES, default=active_mod.ENTROPY)
    p.add_argument("--batch", type=int, default=100)
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--pool-fraction", type=float, default=0.9)
    p.add_argument("--target-fraction", type=float, default=0.99)
    p.add_argument("--out-csv")
    p.add_argument("--no-plot", action="store_true")
    p.add_argument("--state", help="resumable state file path")
    p.add_argument("--cache", type=int, default=512)
    _add_settings_flags(p)
    p.set_defaults(func=cmd_active)

    p = sub.add_parser("serve", help="run the annotation/verification HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8396)
    p.add_argument("--session-store", required=True)
    p.add_argument("--data-root")
    p.add_argument("--model")
    p.add_argument("--token")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    started = time.time()
    try:
        code = args.func(args)
    except (FitError,) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ModelIOError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ToolkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if args.command in ("train", "eval", "active"):
        print(f"done in {time.time() - started:.1f}s")
    return code


if __name__ == "__main__":
    sys.exit(main())
