"""Command line entry point: ``ctxshift <subcommand> ...``.

Exit codes: 0 success, 1 usage or input error, 2 reproduction outside tolerance.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import METHODS, build_experiment, parse_kv, parse_value
from .sources import DATA_ENV, SourceMissingError

log = logging.getLogger("ctxshift")

EXIT_OK, EXIT_USAGE, EXIT_TOLERANCE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _overrides(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def _unique_dir(parent: Path, stem: str) -> Path:
    parent.mkdir(parents=True, exist_ok=True)
    base = f"{stem}-{time.strftime('%Y%m%d-%H%M%S')}"
    for i in range(1000):
        path = parent / (base if i == 0 else f"{base}-{i}")
        try:
            path.mkdir()
            return path
        except FileExistsError:
            continue
    raise RuntimeError(f"could not allocate a run directory under {parent}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_build_dataset(args) -> int:
    from .lt_data import ensure_dataset, manifest_hash

    directory, hit = ensure_dataset(args.name, args.rho, args.seed, args.root)
    manifest = json.loads((directory / "manifest.json").read_text())
    print(f"{'cache hit' if hit else 'built'}: {directory}")
    print(f"counts: {manifest['profile']['counts']}")
    print(f"shot groups: {manifest['shot_groups']}")
    print(f"manifest sha256: {manifest_hash(directory / 'manifest.json')}")
    return EXIT_OK


def _experiment(args):
    flat = parse_kv(Path(args.config).read_text()) if args.config else {}
    flat.update(_overrides(args.set))
    for flag, key in (("dataset", "dataset.name"), ("method", "method"), ("output", "output"),
                      ("seed", "train.seed"), ("data_seed", "dataset.seed"), ("head", "eval.head")):
        value = getattr(args, flag, None)
        if value is not None:
            flat[key] = value
    return build_experiment(flat)


def cmd_train(args) -> int:
    from .lt_data import ensure_dataset, load_dataset
    from .recipes import default_head, run_method
    from .training import save_checkpoint

    exp = _experiment(args)
    directory, _ = ensure_dataset(exp.dataset, exp.rho, exp.data_seed, args.root)
    dataset, test = load_dataset(directory)
    run = _unique_dir(Path(exp.output), f"{exp.dataset}-{exp.method}-s{exp.train.seed}")
    (run / "config.cfg").write_text(exp.dumps())
    log_path = run / "metrics.jsonl"

    def on_epoch(_state, row):
        with log_path.open("a") as fh:
            fh.write(json.dumps(row) + "\n")

    head = exp.head or default_head(exp.method)
    model, _history, metrics = run_method(exp.method, dataset, test, exp.train, on_epoch, head)
    save_checkpoint(run / "checkpoint.pt", model, extra={"method": exp.method, "dataset": exp.dataset})
    record = {"method": exp.method, "dataset": exp.dataset, "head": head, "metrics": metrics.to_dict()}
    (run / "metrics.json").write_text(json.dumps(record, indent=2))
    print(run)
    print(json.dumps({"overall": metrics.overall_acc, **metrics.group_acc}))
    return EXIT_OK


def _load_run(run: Path, root):
    from .config import load_experiment
    from .lt_data import ensure_dataset, load_dataset
    from .models import DualBranchModel
    from .training import load_checkpoint

    if not (run / "config.cfg").exists() or not (run / "checkpoint.pt").exists():
        raise UsageError(f"{run} is not a run directory (needs config.cfg and checkpoint.pt)")
    exp = load_experiment(run / "config.cfg")
    directory, _ = ensure_dataset(exp.dataset, exp.rho, exp.data_seed, root)
    dataset, test = load_dataset(directory)
    model = DualBranchModel.from_name(exp.train.backbone, dataset.images.shape[-1], dataset.num_classes)
    load_checkpoint(run / "checkpoint.pt", model)
    model.eval()
    return exp, dataset, test, model


def cmd_eval(args) -> int:
    from .evaluation import evaluate
    from .recipes import default_head

    exp, dataset, test, model = _load_run(Path(args.run), args.root)
    head = args.head or exp.head or default_head(exp.method)
    metrics = evaluate(model, test, dataset.shot_groups, head)
    print(json.dumps({"head": head, **metrics.to_dict()}))
    return EXIT_OK


def cmd_reproduce(args) -> int:
    from .recipes import reproduce

    seeds = tuple(int(s) for s in args.seeds.split(","))
    checks, report = reproduce(args.target, seeds, args.root)
    out = _unique_dir(Path(args.output), f"reproduce-{args.target}")
    lines = [c.line() for c in checks]
    text = report + "\n\n" + "\n".join(lines) + "\n"
    (out / "report.txt").write_text(text)
    summary = {"target": args.target, "seeds": list(seeds),
               "checks": [{"name": c.name, "passed": c.passed, "detail": c.detail} for c in checks]}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(text)
    print(f"report: {out}")
    return EXIT_OK if all(c.passed for c in checks) else EXIT_TOLERANCE


def write_pgm(path: Path, gray: np.ndarray) -> None:
    """Binary 8-bit PGM (P5)."""
    h, w = gray.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(gray, dtype=np.uint8).tobytes())


def cmd_export_gradcam(args) -> int:
    import torch

    from .saliency import grad_cam_batch, to_uint8
    from .training import Normalizer, to_chw

    _exp, _dataset, test, model = _load_run(Path(args.run), args.root)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = min(args.count, len(test.labels))
    norm = Normalizer(model.normalizer_state["mean"], model.normalizer_state["std"])
    x = to_chw(test.images[:n])
    cams, _ = grad_cam_batch(model, norm(x), torch.from_numpy(test.labels[:n]), args.head)
    for i in range(n):
        cam = to_uint8(cams[i])
        write_pgm(out / f"{i:05d}_y{int(test.labels[i])}_cam.pgm", cam)
        write_pgm(out / f"{i:05d}_y{int(test.labels[i])}_mask.pgm", 255 - cam)
    print(f"wrote {2 * n} heatmaps to {out}")
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    from .evaluation import embeddings_to_csv, export_embeddings

    _exp, dataset, test, model = _load_run(Path(args.run), args.root)
    data = test if args.split == "test" else dataset
    rows = export_embeddings(model, data.images, data.labels)
    Path(args.out).write_text(embeddings_to_csv(rows))
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .lt_data import RECIPES
    from .recipes import TARGETS

    p = _Parser(prog="ctxshift", description="Long-tail classification with context-shift augmentation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--root", default=None, help=f"data/cache root (default: ${DATA_ENV} or ~/.cache/ctxshift)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    b = sub.add_parser("build-dataset", help="materialize a long-tail dataset cache")
    b.add_argument("--name", required=True, choices=sorted(RECIPES))
    b.add_argument("--rho", type=float, default=100.0)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_build_dataset)

    t = sub.add_parser("train", help="train one method and write a run directory")
    t.add_argument("--config", help="flat key = value config file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    t.add_argument("--dataset", choices=sorted(RECIPES))
    t.add_argument("--method", choices=METHODS)
    t.add_argument("--seed", type=int, help="training seed")
    t.add_argument("--data-seed", type=int, dest="data_seed")
    t.add_argument("--head", choices=("uniform", "balanced", "ensemble"))
    t.add_argument("--output", help="parent directory for run directories")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a run directory on its test set")
    e.add_argument("run")
    e.add_argument("--head", choices=("uniform", "balanced", "ensemble"))
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("reproduce", help="run a reproduction target and check it against reported values")
    r.add_argument("target", choices=TARGETS)
    r.add_argument("--seeds", default="0,1,2")
    r.add_argument("--output", default="runs")
    r.set_defaults(func=cmd_reproduce)

    g = sub.add_parser("export-gradcam", help="write Grad-CAM and mask heatmaps as 8-bit PGM files")
    g.add_argument("run")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=16)
    g.add_argument("--head", default="uniform", choices=("uniform", "balanced"))
    g.set_defaults(func=cmd_export_gradcam)

    x = sub.add_parser("export-embeddings", help="write feature embeddings as CSV")
    x.add_argument("run")
    x.add_argument("--out", required=True)
    x.add_argument("--split", default="test", choices=("train", "test"))
    x.set_defaults(func=cmd_export_embeddings)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ValueError, SourceMissingError) as exc:
        print(f"ctxshift: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
