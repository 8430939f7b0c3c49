"""Command-line entry point: ``sliceprior <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import evaluation as ev
from . import fileio
from .fileio import FormatError
from .geometry import DegenerateGeometryError
from .model import CLASS_NAMES, LA, LV, load_checkpoint, save_checkpoint
from .phantom import PhantomBoundsError, cohort, write_manifest
from .pipeline import (EXPERIMENTS, METRIC_COLUMNS, ConfigError, ReconConfig, TrainingDivergedError,
                       _metric_rows, aggregate, reconstruct, run_experiment, train)
from .views import VIEW_NAMES, MissingClassError, acquire_views
from .volume import GridMismatchError

log = logging.getLogger("sliceprior")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _log_config(command: str, cfg: dict, **extra):
    log.info("resolved config for %s: %s", command,
             json.dumps({"config": cfg, **extra}, sort_keys=True, default=str))


def _config(args) -> dict:
    return fileio.load_config(getattr(args, "config", None), getattr(args, "profile", "paper"))


def _load_manifest(path) -> tuple[dict, Path]:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest {path} is not valid JSON: {exc}") from None
    if "cases" not in manifest:
        raise FormatError(f"manifest {path} has no 'cases' list")
    return manifest, path.parent


def _load_cases(manifest: dict, root: Path, split: str) -> dict:
    cases = {}
    for c in manifest["cases"]:
        if c["split"] == split:
            vol = fileio.read_volume(root / c["file"])
            fileio.check_class_order(vol.class_names, root / c["file"])
            cases[c["id"]] = (vol, int(c["seed"]))
    return cases


def _write_csv(path, rows: list[dict]):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
    Path(path).write_text(buf.getvalue())


# -- subcommands ------------------------------------------------------------------

def cmd_phantom(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    cfg = _config(args)
    if args.grid is not None:
        cfg["phantom"]["grid"] = args.grid
    if args.spacing is not None:
        cfg["phantom"]["spacing"] = args.spacing
    cfg = fileio.resolve_config(cfg)
    _log_config("phantom", cfg, count=args.count, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    split = tuple(cfg["experiment"]["split"])
    volumes, manifest = cohort(fileio.phantom_params(cfg), args.count, args.seed, split)
    for case in manifest["cases"]:
        fileio.write_volume(out / case["file"], volumes[case["id"]])
    write_manifest(out / "manifest.json", manifest)
    log.info("wrote %d volumes to %s", args.count, out)
    return EXIT_OK


def cmd_slice(args) -> int:
    if args.perturb_sigma < 0:
        raise UsageError("--perturb-sigma must be non-negative")
    _log_config("slice", {}, vol=args.vol, sigma=args.perturb_sigma, seed=args.seed,
                anchored_view=args.anchored_view)
    vol = fileio.read_volume(args.vol)
    fileio.check_class_order(vol.class_names, args.vol)
    bundle = acquire_views(vol, Path(args.vol).stem, args.perturb_sigma, args.seed, args.anchored_view)
    fileio.write_bundle(args.out, bundle, vol.grid_spec())
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    _log_config("train", cfg, manifest=args.manifest)
    manifest, root = _load_manifest(args.manifest)
    cases = _load_cases(manifest, root, args.split)
    if not cases:
        raise FormatError(f"manifest has no '{args.split}' cases")
    tcfg = fileio.train_config(cfg)
    extra = {"train_ids": sorted(cases), "config": cfg}
    volumes = {cid: v for cid, (v, _) in cases.items()}

    def on_epoch(epoch, state, codebook):
        if tcfg.checkpoint_every and (epoch + 1) % tcfg.checkpoint_every == 0:
            save_checkpoint(args.out, state, codebook, {**extra, "epochs_done": epoch + 1})

    result = train(volumes, tcfg, on_epoch)
    save_checkpoint(args.out, result.state, result.codebook, {**extra, "epochs_done": tcfg.epochs,
                                                              "final_loss": result.losses[-1] if result.losses else None})
    return EXIT_OK


def _recon_config(cfg: dict, mode: str, views: str) -> ReconConfig:
    rc = dict(cfg["recon"])
    rc["optimize_pose"] = mode == "joint"
    rc["active_views"] = list(VIEW_NAMES) if views == "all" else ["A2C", "A4C"]
    return ReconConfig(**rc)


def cmd_reconstruct(args) -> int:
    cfg = _config(args)
    rcfg = _recon_config(cfg, args.mode, args.views)
    cfg["recon"] = json.loads(json.dumps(asdict(rcfg)))
    _log_config("reconstruct", cfg, bundle=args.bundle, ckpt=args.ckpt)
    bundle, grid = fileio.read_bundle(args.bundle)
    state, _, _ = load_checkpoint(args.ckpt)
    fileio.check_class_order(bundle.class_names, args.bundle)
    fileio.check_class_order(state.class_names, args.ckpt)
    if args.grid_from:
        grid = fileio.read_volume(args.grid_from).grid_spec()
    if grid is None:
        raise FormatError("bundle carries no reference grid; pass --grid-from VOL")
    res = reconstruct(bundle.subset(rcfg.active_views), state, rcfg, grid)
    fileio.write_volume(args.out, res.volume)
    if args.params:
        Path(args.params).write_text(json.dumps({
            "latent": res.latent.tolist(),
            "rigid": {v: {"axis_angle": r.axis_angle.tolist(), "translation": r.translation.tolist()}
                      for v, r in res.rigid.items()},
            "loss_trace": res.loss_trace, "data_loss_trace": res.data_loss_trace}, indent=1) + "\n")
    log.info("final loss %.5f", res.loss_trace[-1])
    return EXIT_OK


def cmd_simpson(args) -> int:
    cfg = _config(args)
    n = args.disks or cfg["experiment"]["simpson_disks"]
    _log_config("simpson", cfg, bundle=args.bundle, cls=args.cls, disks=n)
    bundle, _ = fileio.read_bundle(args.bundle)
    fileio.check_class_order(bundle.class_names, args.bundle)
    cls = {"lv": LV, "la": LA}[args.cls]
    vol = ev.simpson_biplane(bundle.masks["A2C"], bundle.masks["A4C"], cls, n_disks=n)
    Path(args.out).write_text(json.dumps({"case_id": bundle.case_id, "structure": CLASS_NAMES[cls],
                                          "n_disks": n, "volume_ml": vol}, indent=1) + "\n")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    _log_config("evaluate", {}, pred=args.pred, ref=args.ref)
    pred, ref = fileio.read_volume(args.pred), fileio.read_volume(args.ref)
    fileio.check_class_order(pred.class_names, args.pred)
    fileio.check_class_order(ref.class_names, args.ref)
    _write_csv(args.out, _metric_rows(Path(args.ref).stem, "evaluate", pred, ref))
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = _config(args)
    seed = cfg["experiment"]["seed"] if args.seed is None else args.seed
    _log_config("experiment", cfg, name=args.name, manifest=args.manifest, ckpt=args.ckpt, seed=seed)
    manifest, root = _load_manifest(args.manifest)
    state, codebook, extra = load_checkpoint(args.ckpt)
    fileio.check_class_order(state.class_names, args.ckpt)
    cases = _load_cases(manifest, root, "test")
    if args.cases:
        cases = {k: cases[k] for k in sorted(cases)[: args.cases]}
    if not cases:
        raise FormatError("manifest has no 'test' cases")
    train_ids = set(extra.get("train_ids", codebook.codes))
    rows, _ = run_experiment(args.name, cases, state, fileio.recon_config(cfg), seed, train_ids,
                             cfg["experiment"]["sigma"], cfg["experiment"]["simpson_disks"])
    rows.sort(key=lambda r: (r["case_id"], r["experiment"], CLASS_NAMES.index(r["structure"])))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / f"{args.name}.csv", rows)
    (out / f"{args.name}.json").write_text(json.dumps(aggregate(rows), indent=1, sort_keys=True) + "\n")
    return EXIT_OK


# -- wiring -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sliceprior", description="Cardiac shape reconstruction from sparse apical views")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="JSON run config overriding the defaults")
        sp.add_argument("--profile", choices=("paper", "desk"), default="paper")
        return sp

    sp = with_config(sub.add_parser("phantom", help="generate a phantom cohort"))
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--grid", type=int)
    sp.add_argument("--spacing", type=float)
    sp.set_defaults(func=cmd_phantom)

    sp = sub.add_parser("slice", help="render the four apical views of a volume")
    sp.add_argument("--vol", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--perturb-sigma", type=float, default=5.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--anchored-view", choices=VIEW_NAMES, default="A4C")
    sp.set_defaults(func=cmd_slice)

    sp = with_config(sub.add_parser("train", help="fit the shape prior"))
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", default="train")
    sp.set_defaults(func=cmd_train)

    sp = with_config(sub.add_parser("reconstruct", help="fit a latent code (and poses) to a slice bundle"))
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--mode", choices=("joint", "latent-only"), default="joint")
    sp.add_argument("--views", choices=("all", "a2c-a4c"), default="all")
    sp.add_argument("--out", required=True)
    sp.add_argument("--grid-from", help="volume whose grid the output should use")
    sp.add_argument("--params", help="also write latent, poses and loss trace as JSON")
    sp.set_defaults(func=cmd_reconstruct)

    sp = with_config(sub.add_parser("simpson", help="biplane method-of-disks volume"))
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--class", dest="cls", choices=("lv", "la"), required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--disks", type=int)
    sp.set_defaults(func=cmd_simpson)

    sp = sub.add_parser("evaluate", help="per-structure metrics between two volumes")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = with_config(sub.add_parser("experiment", help="run one named experiment on the test split"))
    sp.add_argument("--name", choices=EXPERIMENTS, required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--cases", type=int, help="only the first K test cases")
    sp.set_defaults(func=cmd_experiment)
    return p


_HINTS = {
    ConfigError: "check the JSON config keys against the documented defaults",
    FormatError: "regenerate the file with the phantom/slice/train subcommands",
    MissingClassError: "every chamber must be present before slicing",
    GridMismatchError: "prediction and reference must share dims, spacing and origin",
    ev.MissingStructureError: "the structure is absent; check the input masks",
}


def _fail(code: int, exc: BaseException) -> int:
    err = {"error": type(exc).__name__, "message": str(exc)}
    for cls, hint in _HINTS.items():
        if isinstance(exc, cls):
            err["hint"] = hint
            break
    print(json.dumps(err), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        return _fail(EXIT_USAGE, exc)
    except (TrainingDivergedError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, exc)
    except (FormatError, MissingClassError, PhantomBoundsError, GridMismatchError, DegenerateGeometryError,
            ev.MissingStructureError, KeyError, ValueError, OSError) as exc:
        return _fail(EXIT_DATA, exc)


if __name__ == "__main__":
    sys.exit(main())
