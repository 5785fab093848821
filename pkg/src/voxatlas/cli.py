"""Command-line entry point: ``voxatlas <command> [options]``.

Option precedence is command-line flag, then ``--config`` file (flat
``key=value`` lines using the flag names), then built-in defaults.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, gradcheck, nnet, phantom, trainer
from .atlas import Atlas, AtlasConfig, build_atlas
from .metrics import EmptyMaskError, MetricReport, ejection_fraction
from .volume import VolumeFormatError, read_vvol, write_vvol

EXIT_OK, EXIT_VALIDATION, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hashes(paths) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            for f in sorted(p.rglob("*")):
                if f.is_file() and f.name != "manifest.json":
                    out[str(f)] = file_hash(f)
        elif p.exists():
            out[str(p)] = file_hash(p)
    return out


def write_manifest(path, command, args, inputs, outputs, started) -> None:
    """Run record: command, full configuration, seed, version, hashes, timing."""
    config = {k: v for k, v in vars(args).items() if k not in ("func", "config", "verbose", "failed")}
    record = {
        "command": command,
        "config": config,
        "seed": config.get("seed"),
        "version": __version__,
        "inputs": _hashes(inputs),
        "outputs": _hashes(outputs),
        "seconds": round(time.perf_counter() - started, 3),
    }
    Path(path).write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")


def read_config_file(path) -> dict[str, str]:
    values = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{n}: expected key=value")
        values[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return values


def _train_config(args) -> trainer.TrainConfig:
    try:
        return _make_train_config(args)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _make_train_config(args) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        lr=args.lr, momentum=args.momentum, alpha=args.alpha, beta=args.beta, epochs=args.epochs,
        seed=args.seed, use_atlas_head=not args.no_atlas, use_consistency=not args.no_consistency,
        optimizer=args.optimizer, patience=args.patience, adv_weight=args.adv_weight,
    ).validate()


def _load_dataset(data):
    try:
        train, val = phantom.read_dataset(data)
    except (FileNotFoundError, VolumeFormatError, KeyError, ValueError) as exc:
        raise DataError(f"dataset {data}: {exc}") from exc
    if not train:
        raise DataError(f"dataset {data}: no training subjects")
    return train, val


def _load_atlas(path) -> Atlas:
    try:
        return Atlas.load(path)
    except (FileNotFoundError, VolumeFormatError, ValueError) as exc:
        raise DataError(f"atlas {path}: {exc}") from exc


# ------------------------------------------------------------------ commands


def cmd_phantom_gen(args):
    if args.n < 2:
        raise UsageError("--n must be at least 2")
    n_train = args.n_train if args.n_train is not None else (2 * args.n) // 3
    subjects = phantom.generate_dataset(args.n, args.seed, (args.dims,) * 3, args.spacing)
    phantom.write_dataset(args.out, subjects, n_train)
    return [], [args.out], Path(args.out) / "manifest.json"


def cmd_build_atlas(args):
    train, _ = _load_dataset(args.data)
    cases, ids = trainer.atlas_subset(train, args.cases)
    atlas = build_atlas(cases, AtlasConfig(rounds=args.rounds), ids)
    atlas.save(args.out)
    return [args.data], [args.out], Path(args.out) / "manifest.json"


def cmd_train(args):
    cfg = _train_config(args)
    train, val = _load_dataset(args.data)
    atlas = _load_atlas(args.atlas)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    G, D = trainer.make_networks(train[0].ed[0].dims, cfg)
    history = trainer.fit(G, D, train, atlas, cfg, val or None, out / "train_log.csv")
    nnet.save_checkpoint(out / "model.vnet", {"G": G, "D": D})
    trainer.write_history(out / "history.csv", history)
    return [args.data, args.atlas], [out], out / "manifest.json"


def load_generator(path, dims):
    """Rebuild the generator stored in a checkpoint, detecting which head it has."""
    rng = np.random.default_rng(0)
    errors = []
    for make in (nnet.Generator, nnet.DecoderGenerator):
        G = make(dims, rng)
        D = nnet.Discriminator(dims, rng)
        try:
            nnet.load_checkpoint(path, {"G": G, "D": D})
            return G
        except (ValueError, KeyError) as exc:
            errors.append(str(exc))
    raise DataError(f"checkpoint {path} does not match a generator for dims {dims}: {errors}")


def cmd_segment(args):
    try:
        vol = read_vvol(args.inp)
    except (FileNotFoundError, VolumeFormatError) as exc:
        raise DataError(f"input {args.inp}: {exc}") from exc
    G = load_generator(args.model, vol.dims)
    atlas = _load_atlas(args.atlas) if isinstance(G, nnet.Generator) else None
    label, _, seconds = trainer.segment(G, atlas, vol)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_vvol(args.out, label)
    print(f"{args.out}: {int(label.data.sum())} foreground voxels in {seconds:.4f} s")
    return [args.model, args.inp], [args.out], Path(str(args.out) + ".manifest.json")


def cmd_evaluate(args):
    pred_dir, truth_dir = Path(args.pred), Path(args.truth)
    truths = sorted(truth_dir.glob("*_lab.vvol"))
    if not truths:
        raise DataError(f"no *_lab.vvol files in {truth_dir}")
    report = MetricReport(bootstrap=args.bootstrap, seed=args.seed)
    preds = {}
    for t in truths:
        p = pred_dir / t.name
        if not p.exists():
            raise DataError(f"missing prediction {p}")
        pred, truth = read_vvol(p), read_vvol(t)
        report.add_case(t.name[: -len("_lab.vvol")], pred, truth)
        preds[t.name] = pred
    manifest = truth_dir / phantom.MANIFEST
    if manifest.exists():
        with open(manifest, newline="") as fh:
            rows = list(csv.DictReader(fh))
        subjects = {}
        for r in rows:
            subjects.setdefault(r["subject_id"], {"ef": float(r["true_ef"])})[r["frame"]] = r["label"]
        for sid, e in sorted(subjects.items(), key=lambda kv: int(kv[0])):
            if e.get("ED") in preds and e.get("ES") in preds:
                try:
                    report.add_ef(ejection_fraction(preds[e["ED"]], preds[e["ES"]]), e["ef"])
                except EmptyMaskError:
                    report.add_ef(float("nan"), e["ef"])
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(args.out)
    return [args.pred, args.truth], [args.out], Path(str(args.out) + ".manifest.json")


def cmd_ablate(args):
    cfg = _train_config(args)
    train, val = _load_dataset(args.data)
    if not val:
        raise DataError(f"dataset {args.data}: no validation subjects")
    atlas = _load_atlas(args.atlas) if args.atlas else None
    acfg = trainer.AblationConfig(train=cfg, atlas=AtlasConfig(rounds=args.rounds),
                                  atlas_cases=args.cases, bootstrap=args.bootstrap)
    reports = trainer.run_ablation(train, val, acfg, args.out, atlas)
    for name, rep in reports.items():
        s = rep.summary()
        print(f"{name:<14} dice={s['dice']:.4f} msd={s['msd_mm']:.3f} hsd={s['hsd_mm']:.3f} "
              f"corr_ef={s['corr_ef']:.3f} s/vol={s['seconds']:.3f}")
    inputs = [args.data] + ([args.atlas] if args.atlas else [])
    return inputs, [args.out], Path(args.out) / "manifest.json"


def cmd_gradcheck(args):
    results = gradcheck.run(args.scope, args.seed)
    lines = [r.line() for r in results]
    print("\n".join(lines))
    outputs, manifest = [], None
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
        outputs, manifest = [args.out], Path(str(args.out) + ".manifest.json")
    args.failed = not all(r.passed for r in results)
    return [], outputs, manifest


# ------------------------------------------------------------------ parser


def _add_train_flags(p):
    d = trainer.TrainConfig()
    p.add_argument("--alpha", type=float, default=d.alpha,
                   help=f"label-consistency weight (default {d.alpha}, published setting)")
    p.add_argument("--beta", type=float, default=d.beta,
                   help=f"intensity-consistency weight (default {d.beta}, published setting)")
    p.add_argument("--lr", type=float, default=d.lr,
                   help=f"learning rate (default {d.lr}, published setting)")
    p.add_argument("--momentum", type=float, default=d.momentum,
                   help=f"momentum, or Adam beta1 (default {d.momentum}, published setting)")
    p.add_argument("--optimizer", choices=trainer.OPTIMIZERS, default=d.optimizer,
                   help="sgd: v <- m*v + g, w <- w - lr*v; adam: momentum is beta1 (default adam)")
    p.add_argument("--adv-weight", type=float, default=d.adv_weight,
                   help=f"adversarial term scale in the generator step (default {d.adv_weight})")
    p.add_argument("--epochs", type=int, default=d.epochs, help=f"maximum epochs (default {d.epochs})")
    p.add_argument("--patience", type=int, default=d.patience,
                   help=f"early-stopping patience in epochs on validation Dice (default {d.patience})")
    p.add_argument("--seed", type=int, default=d.seed, help="root seed (default 0)")
    p.add_argument("--no-atlas", action="store_true", help="decoder generator instead of the atlas head")
    p.add_argument("--no-consistency", action="store_true", help="drop the label/intensity terms")
    p.epilog = "Batch size is fixed at 1 (published setting)."


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voxatlas", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="key=value file; flags given on the command line win")
        p.set_defaults(func=func)
        return p

    p = command("phantom-gen", cmd_phantom_gen, "write a seeded synthetic LV dataset")
    p.add_argument("--n", type=int, default=30, help="number of subjects (default 30)")
    p.add_argument("--n-train", type=int, default=None, help="training subjects (default 2/3 of n)")
    p.add_argument("--dims", type=int, default=32, help="cubic volume size (default 32)")
    p.add_argument("--spacing", type=float, default=2.0, help="voxel size in mm (default 2.0)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = command("build-atlas", cmd_build_atlas, "build the mean-space atlas from training cases")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cases", type=int, default=8, help="training frames used (default 8)")
    p.add_argument("--rounds", type=int, default=3, help="mean-space rounds (default 3)")
    p.add_argument("--seed", type=int, default=0)

    p = command("train", cmd_train, "train a generator/discriminator pair")
    p.add_argument("--data", required=True)
    p.add_argument("--atlas", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)

    p = command("segment", cmd_segment, "segment one volume with a trained generator")
    p.add_argument("--model", required=True)
    p.add_argument("--atlas", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)

    p = command("evaluate", cmd_evaluate, "score predicted labels against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bootstrap", type=int, default=1000, help="EF-correlation resamples (default 1000)")
    p.add_argument("--seed", type=int, default=0)

    p = command("ablate", cmd_ablate, "registration baseline and the three trained variants")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--atlas", default=None, help="prebuilt atlas (default: build from training data)")
    p.add_argument("--cases", type=int, default=8, help="training frames used for the atlas (default 8)")
    p.add_argument("--rounds", type=int, default=3, help="mean-space rounds (default 3)")
    p.add_argument("--bootstrap", type=int, default=1000, help="EF-correlation resamples (default 1000)")
    _add_train_flags(p)

    p = command("gradcheck", cmd_gradcheck, "compare analytic gradients with finite differences")
    p.add_argument("--scope", choices=gradcheck.SCOPES, default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="also write the report (and a manifest) here")
    return parser


def parse_args(argv):
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        choices = parser._subparsers._group_actions[0].choices
        command = next((a for a in argv if a in choices), None)
        if command is None:
            raise UsageError("--config needs a command")
        subparser = choices[command]
        actions = {a.dest: a for a in subparser._actions}
        for key, value in read_config_file(known.config).items():
            if key not in actions or key in ("help", "config"):
                raise UsageError(f"{known.config}: unknown key {key!r}")
            action = actions[key]
            if isinstance(action, argparse._StoreTrueAction):
                value = value.lower() in ("1", "true", "yes", "on")
            elif action.type is not None:
                value = action.type(value)
            if action.choices is not None and value not in action.choices:
                raise UsageError(f"{known.config}: {key}={value!r} is not one of {list(action.choices)}")
            # a value from the file satisfies a required flag
            action.required = False
            subparser.set_defaults(**{key: value})
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    started = time.perf_counter()
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    except (UsageError, ValueError, OSError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    try:
        inputs, outputs, manifest = args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, VolumeFormatError, EmptyMaskError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    if manifest is not None:
        write_manifest(manifest, args.command, args, inputs, outputs, started)
    return EXIT_VALIDATION if getattr(args, "failed", False) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
