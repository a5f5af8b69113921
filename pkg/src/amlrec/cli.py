"""Command-line interface: ``amlrec <command> [options]``.

Every command writes its outputs plus a ``manifest.json`` into ``--out-dir``.
``amlrec replay <manifest>`` re-runs a command from its manifest and checks
that the outputs come out byte-identical.

Exit codes: 0 success, 1 numerical or runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .benchmark import METHODS, simulate
from .evaluation import (
    METRICS,
    CurveSet,
    SynthConfig,
    build_curves,
    curves_svg,
    difficulty_weighted_sample,
    synth_generate,
)
from .gplvm import InitializationError, Model, TrainConfig, TrainingError, train
from .kernel import NumericalError
from .perf_matrix import ParseError, ValidationError, read_matrix, write_matrix
from .recommender import ColumnOracle, read_traces, warm_start, write_traces

logger = logging.getLogger("amlrec")

MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _threads() -> int | None:
    raw = os.environ.get("AMLREC_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"AMLREC_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("AMLREC_THREADS must be positive")
    return n


def _read_lines(path: str) -> list[str]:
    try:
        with open(path, encoding="utf-8") as fh:
            return [ln.strip() for ln in fh if ln.strip()]
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from None


def _load_matrix(path: str):
    if not os.path.isfile(path):
        raise UsageError(f"matrix file not found: {path}")
    return read_matrix(path)


def _load_model(path: str) -> Model:
    if not os.path.isfile(path):
        raise UsageError(f"model file not found: {path}")
    return Model.load(path)


def _dataset_indices(m, ids: list[str]) -> list[int]:
    try:
        return [m.dataset_index(d) for d in ids]
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None


# -- commands ---------------------------------------------------------------


def cmd_synth(args, out: Path) -> dict:
    cfg = SynthConfig(
        n_pipelines=args.n_pipelines,
        n_datasets=args.n_datasets,
        q_true=args.q_true,
        noise_sigma=args.noise,
        missing_fraction=args.missing,
        surface=args.surface,
        seed=args.seed,
    )
    m = synth_generate(cfg)
    write_matrix(m, out / f"matrix.{args.format}")
    return {"inputs": {}}


def cmd_select_test(args, out: Path) -> dict:
    m = _load_matrix(args.matrix)
    picks = difficulty_weighted_sample(
        m, args.n_test, args.trials, args.iters, args.seed, args.aggregate
    )
    with open(out / "test_datasets.txt", "w", encoding="utf-8") as fh:
        for d in picks:
            fh.write(m.dataset_ids[d] + "\n")
    return {"inputs": {"matrix": args.matrix}}


def cmd_train(args, out: Path) -> dict:
    m = _load_matrix(args.matrix)
    inputs = {"matrix": args.matrix}
    if args.exclude:
        drop = set(_dataset_indices(m, _read_lines(args.exclude)))
        m = m.select_datasets([d for d in range(m.n_datasets) if d not in drop])
        inputs["exclude"] = args.exclude
    cfg = TrainConfig(
        q=args.q,
        learning_rate=args.lr,
        optimizer=args.optimizer,
        epochs=args.epochs,
        column_batch=args.batch,
        seed=args.seed,
        init=args.init,
        family=args.kernel,
        hyper_lr_scale=args.hyper_lr_scale,
        learn_noise=not args.fixed_noise,
        workers=_threads() or 1,
        checkpoint_every=args.checkpoint_every,
        checkpoint_path=str(out / "checkpoint.json") if args.checkpoint_every else None,
    )
    model = train(m, cfg)
    model.save(out / "model.json")
    return {"inputs": inputs}


def _test_split(m, test_file: str):
    test_ids = _read_lines(test_file)
    test = _dataset_indices(m, test_ids)
    held = set(test)
    m_train = m.select_datasets([d for d in range(m.n_datasets) if d not in held])
    return test, m_train


def cmd_simulate(args, out: Path) -> dict:
    m = _load_matrix(args.matrix)
    model = _load_model(args.model)
    if model.X.shape[0] != m.n_pipelines:
        raise UsageError("model and matrix disagree on the number of pipelines")
    methods = _methods(args.methods)
    test, m_train = _test_split(m, args.test_datasets)
    oracles = [ColumnOracle.from_matrix(m, d) for d in test]
    warm = warm_start(m_train, args.warm) if args.warm and args.budget else []
    traces = simulate(
        model, oracles, args.budget, warm, methods, args.seeds, args.xi, args.seed, args.center
    )
    tdir = out / "traces"
    tdir.mkdir(exist_ok=True)
    for method, trs in traces.items():
        with open(tdir / f"{method}.jsonl", "w", encoding="utf-8") as fh:
            write_traces(trs, fh)
    curves = build_curves(traces, {o.name: o for o in oracles}, model, center=args.center)
    _write_curves(curves, out, svg=args.svg)
    return {
        "inputs": {"matrix": args.matrix, "model": args.model, "test_datasets": args.test_datasets}
    }


def cmd_eval(args, out: Path) -> dict:
    m = _load_matrix(args.matrix)
    model = _load_model(args.model) if args.model else None
    tdir = Path(args.traces)
    files = sorted(tdir.glob("*.jsonl")) if tdir.is_dir() else []
    if not files:
        raise UsageError(f"no trace files in {args.traces}")
    traces = {}
    for f in files:
        with open(f, encoding="utf-8") as fh:
            for tr in read_traces(fh):
                traces.setdefault(tr.method, []).append(tr)
    labels = {t.dataset for trs in traces.values() for t in trs}
    oracles = {}
    for label in sorted(labels, key=str):
        (d,) = _dataset_indices(m, [str(label)])
        oracles[label] = ColumnOracle.from_matrix(m, d)
    curves = build_curves(traces, oracles, model, center=args.center)
    _write_curves(curves, out, svg=args.svg)
    inputs = {"matrix": args.matrix}
    inputs.update({f"traces/{f.name}": str(f) for f in files})
    if args.model:
        inputs["model"] = args.model
    return {"inputs": inputs}


def _methods(raw: str) -> list[str]:
    methods = [s.strip() for s in raw.split(",") if s.strip()]
    bad = [s for s in methods if s not in METHODS]
    if bad:
        raise UsageError(f"unknown methods {bad}; choose from {list(METHODS)}")
    return methods


def _write_curves(curves: CurveSet, out: Path, svg: bool) -> None:
    with open(out / "curves.csv", "w", encoding="utf-8", newline="") as fh:
        curves.write_csv(fh)
    if svg:
        for metric in METRICS:
            if any(metric in v for v in curves.values.values()):
                (out / f"{metric}.svg").write_text(curves_svg(curves, metric), encoding="utf-8")


# -- manifest and replay ----------------------------------------------------


def _outputs(out: Path) -> dict[str, str]:
    return {
        str(p.relative_to(out)): _sha256(p)
        for p in sorted(out.rglob("*"))
        if p.is_file() and p.name != MANIFEST
    }


def _write_manifest(args, argv: list[str], out: Path, extra: dict) -> None:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out_dir", "verbose")}
    inputs = {
        name: {"path": path, "sha256": _sha256(Path(path))}
        for name, path in sorted(extra.get("inputs", {}).items())
    }
    manifest = {
        "command": args.command,
        "argv": argv,
        "config": config,
        "seed": getattr(args, "seed", None),
        "inputs": inputs,
        "outputs": _outputs(out),
        "version": __version__,
    }
    with open(out / MANIFEST, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _strip_out_dir(argv: list[str]) -> list[str]:
    clean, skip = [], False
    for a in argv:
        if skip:
            skip = False
            continue
        if a == "--out-dir":
            skip = True
            continue
        if a.startswith("--out-dir="):
            continue
        clean.append(a)
    return clean


def cmd_replay(args) -> int:
    try:
        with open(args.manifest, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read manifest {args.manifest}: {exc}") from None
    for name, info in manifest["inputs"].items():
        if not os.path.isfile(info["path"]) or _sha256(Path(info["path"])) != info["sha256"]:
            raise UsageError(f"input {name} ({info['path']}) missing or changed")
    out = args.out_dir or str(Path(args.manifest).resolve().parent / "replay")
    code = main(manifest["argv"] + ["--out-dir", out])
    if code:
        return code
    produced = _outputs(Path(out))
    if produced != manifest["outputs"]:
        diff = sorted(set(produced.items()) ^ set(manifest["outputs"].items()))
        print(f"replay mismatch: {diff}", file=sys.stderr)
        return 1
    print(f"replay reproduced {len(produced)} outputs byte-identically in {out}")
    return 0


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amlrec", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"amlrec {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--out-dir", required=True, help="directory for outputs and manifest")
        p.add_argument("-v", "--verbose", action="store_true")
        if seed:
            p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("synth", help="generate a synthetic performance matrix")
    common(p)
    p.add_argument("--n-pipelines", type=int, default=200)
    p.add_argument("--n-datasets", type=int, default=50)
    p.add_argument("--q-true", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--missing", type=float, default=0.0)
    p.add_argument("--surface", choices=("linear", "nonlinear"), default="linear")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("select-test", help="difficulty-weighted test dataset selection")
    common(p)
    p.add_argument("--matrix", required=True)
    p.add_argument("--n-test", type=int, required=True)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--iters", type=int, default=300)
    p.add_argument("--aggregate", choices=("mean", "final"), default="mean")
    p.set_defaults(func=cmd_select_test)

    p = sub.add_parser("train", help="fit the latent pipeline embedding")
    common(p)
    p.add_argument("--matrix", required=True)
    p.add_argument("--exclude", help="file of dataset ids (one per line) to leave out")
    p.add_argument("--q", type=int, default=20)
    p.add_argument("--lr", type=float, default=None, help="default 1e-7 (sgd) / 1e-2 (adam)")
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd")
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--batch", type=int, default=50)
    p.add_argument("--init", choices=("pca", "random"), default="pca")
    p.add_argument("--kernel", choices=("rbf_ard", "linear"), default="rbf_ard")
    p.add_argument("--hyper-lr-scale", type=float, default=1.0)
    p.add_argument("--fixed-noise", action="store_true")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", help="replay selection episodes on test datasets")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--matrix", required=True)
    p.add_argument("--test-datasets", required=True, help="file of dataset ids")
    p.add_argument("--budget", type=int, default=100)
    p.add_argument("--warm", type=int, default=5)
    p.add_argument("--xi", type=float, default=0.01)
    p.add_argument("--seeds", type=int, default=1, help="replicates per dataset")
    p.add_argument("--methods", default=",".join(METHODS))
    p.add_argument("--center", action="store_true", help="center scores per dataset")
    p.add_argument("--svg", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("eval", help="recompute curves from trace files")
    common(p, seed=False)
    p.add_argument("--traces", required=True, help="directory of *.jsonl trace files")
    p.add_argument("--matrix", required=True)
    p.add_argument("--model")
    p.add_argument("--center", action="store_true")
    p.add_argument("--svg", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("replay", help="re-run a command from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out-dir")
    p.set_defaults(func=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "replay":
            return cmd_replay(args)
        threads = _threads()
        limit = contextlib.nullcontext()
        if threads:
            from threadpoolctl import threadpool_limits

            limit = threadpool_limits(threads)
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with limit:
            extra = args.func(args, out)
        _write_manifest(args, _strip_out_dir(argv), out, extra)
        return 0
    except (UsageError, ParseError, ValidationError, InitializationError, ValueError) as exc:
        print(f"amlrec: error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, NumericalError, ArithmeticError, RuntimeError) as exc:
        print(f"amlrec: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
