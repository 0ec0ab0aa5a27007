"""Command-line entry point: ``mafer <command> [--config FILE] [--set key=value ...]``."""
from __future__ import annotations

import argparse
import contextlib
import datetime as _dt
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, DatasetRef, RunConfig, load_config
from .datasets import (
    DatasetError,
    SynthSpec,
    class_weights_from_counts,
    compute_class_weights,
    synth_sample,
)
from .evaluation import (
    ConfusionMatrix,
    EvaluationError,
    cbir_from_features,
    extract_features,
    features_from_csv,
    features_to_csv,
    format_mean_sd,
    run_cbir,
)
from .imageops import encode_pnm
from .pipeline import InputSpec
from .training import TrainingDivergedError, evaluate_model, kfold_evaluate, resolve_dataset, run_mafer

log = logging.getLogger("mafer")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


class Outputs:
    """Collects written files so the manifest can list their checksums."""

    def __init__(self, root: Path):
        self.root = root
        self.root.mkdir(parents=True, exist_ok=True)
        self.files: dict[str, str] = {}

    def write(self, name: str, data: str | bytes) -> Path:
        raw = data.encode() if isinstance(data, str) else data
        path = self.root / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(raw)
        self.files[name] = _sha256(raw)
        return path

    def track(self, name: str):
        self.files[name] = _sha256((self.root / name).read_bytes())

    def manifest(self, command: str, cfg: RunConfig, started: float, extra: dict | None = None):
        body = {
            "command": command,
            "config": cfg.to_dict(),
            "outputs": dict(sorted(self.files.items())),
            "created_utc": _dt.datetime.now(_dt.timezone.utc).isoformat(),
            "wall_clock_s": round(time.perf_counter() - started, 3),
        }
        body.update(extra or {})
        (self.root / "manifest.json").write_text(_dump(body))


# dataset arguments -------------------------------------------------------------

def dataset_ref_from_path(path: str, usage: str = "Training") -> DatasetRef:
    p = Path(path)
    if p.suffix.lower() == ".csv":
        return DatasetRef(kind="fer2013", path=str(p), usage=usage)
    return DatasetRef(kind="directory", path=str(p))


def check_paths(refs: list[DatasetRef | None]):
    missing = [f"dataset path {r.path} does not exist" for r in refs if r is not None and r.path and not Path(r.path).exists()]
    if missing:
        raise ConfigError(missing)


def pick_dataset(args, cfg: RunConfig, default: DatasetRef | None, what: str) -> DatasetRef:
    if getattr(args, "dataset", None):
        ref = dataset_ref_from_path(args.dataset, getattr(args, "usage", "Training"))
    else:
        ref = default
    if ref is None:
        raise ConfigError([f"no dataset given for {what}: pass --dataset or configure it"])
    check_paths([ref])
    return ref


def _checkpoint_model(path: str):
    if not Path(path).exists():
        raise ConfigError([f"checkpoint {path} does not exist"])
    model, meta, _ = load_checkpoint(path)
    spec = InputSpec.from_dict(meta["input"]) if "input" in meta else InputSpec(64)
    return model, meta, spec


# commands ------------------------------------------------------------------------

SYNTH_CLASS_DIR = "{label:02d}_lobes{lobes}"


def cmd_synth(args, cfg: RunConfig, out: Outputs) -> dict:
    if args.verify:
        problems = verify_synth_dir(Path(args.verify))
        if problems:
            for p in problems:
                print(p)
            raise RuntimeError(f"{len(problems)} file(s) fail checksum verification")
        print("ok")
        return {"verified": args.verify}
    spec = SynthSpec(**cfg.synth.model_dump())
    files = write_synth_dir(spec, out)
    print(f"wrote {len(files)} images to {out.root}")
    return {}


def write_synth_dir(spec: SynthSpec, out: Outputs) -> dict[str, str]:
    files = {}
    for i in range(spec.num_classes * spec.samples_per_class):
        label, j = i % spec.num_classes, i // spec.num_classes
        name = f"{SYNTH_CLASS_DIR.format(label=label, lobes=label + 2)}/img_{j:05d}.pgm"
        raw = encode_pnm(synth_sample(spec, label, j))
        out.write(name, raw)
        files[name] = _sha256(raw)
    body = {"spec": spec.to_dict(), "seed": spec.seed, "num_classes": spec.num_classes,
            "files": dict(sorted(files.items()))}
    out.write("synth_manifest.json", _dump(body))
    return files


def verify_synth_dir(root: Path) -> list[str]:
    mpath = root / "synth_manifest.json"
    if not mpath.exists():
        return [f"{mpath} missing"]
    manifest = json.loads(mpath.read_text())
    problems = []
    for name, digest in manifest["files"].items():
        f = root / name
        if not f.exists():
            problems.append(f"missing: {name}")
        elif _sha256(f.read_bytes()) != digest:
            problems.append(f"checksum mismatch: {name}")
    return problems


def cmd_weights(args, cfg: RunConfig, out: Outputs) -> dict:
    if args.counts:
        weights = class_weights_from_counts(*_read_counts(Path(args.counts)))
    else:
        ref = pick_dataset(args, cfg, cfg.data.train, "weights")
        weights = compute_class_weights(resolve_dataset(ref))
    text = weights.to_csv()
    out.write("weights.csv", text)
    sys.stdout.write(text)
    return {}


def _read_counts(path: Path):
    if not path.exists():
        raise ConfigError([f"counts file {path} does not exist"])
    text = path.read_text()
    if path.suffix.lower() == ".json":
        d = json.loads(text)
        return list(d.values()), list(d.keys())
    rows = [ln.split(",") for ln in text.splitlines() if ln.strip()]
    if rows and rows[0][0].strip() == "class":
        rows = rows[1:]
    return [int(r[1]) for r in rows], [r[0].strip() for r in rows]


def cmd_train(args, cfg: RunConfig, out: Outputs) -> dict:
    check_paths([cfg.data.train, cfg.data.val, cfg.data.test, cfg.step1.data, cfg.step1.val])
    if cfg.data.train is None:
        raise ConfigError(["data.train is not configured"])
    print("step,split,loss,acc,lr_cls,lr_bb", flush=True)

    def progress(r):
        print(f"{r['step']},{r['split']},{r['loss']:.6f},{r['acc']:.6f},{r['lr_cls']:.3g},{r['lr_bb']:.3g}", flush=True)

    _, report = run_mafer(cfg, out.root, progress)
    out.track("run_report.json")
    for name in report.checkpoints.values():
        out.track(name)
    return {"train_wall_clock_s": round(report.wall_clock_s, 3)}


def _resolutions(args, cfg: RunConfig) -> list:
    if args.resolutions:
        vals = []
        for tok in args.resolutions.split(","):
            tok = tok.strip()
            vals.append("native" if tok == "native" else int(tok))
        return vals
    return list(cfg.eval.resolutions)


def cmd_eval(args, cfg: RunConfig, out: Outputs) -> dict:
    model, meta, spec = _checkpoint_model(args.checkpoint)
    ds = resolve_dataset(pick_dataset(args, cfg, cfg.data.test, "eval"), "test")
    if ds.num_classes != model.config.num_classes:
        raise EvaluationError(f"dataset has {ds.num_classes} classes, checkpoint expects {model.config.num_classes}")
    blocks = []
    for r in _resolutions(args, cfg):
        m = evaluate_model(model, ds, cfg, None if r == "native" else int(r), spec)
        m["resolution"] = r
        blocks.append(m)
        csv_name = f"confusion_{r}.csv"
        out.write(csv_name, ConfusionMatrix(np.array(m["confusion"]), ds.class_names).to_csv())
        avg = m["average_accuracy"]
        avg_txt = format_mean_sd(avg["mean"], avg["sd"]) if avg else "n/a"
        print(f"resolution={r} overall={100 * m['overall_accuracy']:.2f} average={avg_txt}")
    out.write("metrics_eval.json", _dump({"checkpoint": Path(args.checkpoint).name, "config": cfg.to_dict(),
                                          "input": spec.to_dict(), "results": blocks}))
    return {}


def cmd_cbir(args, cfg: RunConfig, out: Outputs) -> dict:
    c = cfg.cbir
    if args.features:
        if not Path(args.features).exists():
            raise ConfigError([f"feature file {args.features} does not exist"])
        _, labels, feats = features_from_csv(Path(args.features).read_text())
        rep = cbir_from_features(feats, labels, c.queries_per_class, c.ks, cfg.seed, c.knn_k)
    else:
        if not args.checkpoint:
            raise ConfigError(["cbir needs --checkpoint or --features"])
        model, _, spec = _checkpoint_model(args.checkpoint)
        ds = resolve_dataset(pick_dataset(args, cfg, cfg.data.test, "cbir"), "test")
        rep = run_cbir(model, ds, spec, c.queries_per_class, c.ks, cfg.seed, c.knn_k, c.query_resolution,
                       c.eligibility, cfg.eval.batch_size, c.eligibility_view)
    body = rep.to_dict()
    body["config"] = cfg.to_dict()
    out.write("metrics_cbir.json", _dump(body))
    print(f"queries={rep.num_queries} mAP={100 * rep.map[0]:.1f} ± {100 * rep.map[1]:.1f}")
    for k, (m, s) in rep.precision.items():
        print(f"P@{k}={100 * m:.1f} ± {100 * s:.1f}")
    return {}


def cmd_extract(args, cfg: RunConfig, out: Outputs) -> dict:
    model, _, spec = _checkpoint_model(args.checkpoint)
    ds = resolve_dataset(pick_dataset(args, cfg, cfg.data.test, "extract"), "test")
    feats, labels, _ = extract_features(model, ds, spec, cfg.eval.batch_size, args.resolution)
    out.write("features.csv", features_to_csv(feats, labels, [s.source or str(i) for i, s in enumerate(ds.samples)]))
    print(f"extracted {len(feats)} x {feats.shape[1]} features")
    return {}


def cmd_kfold(args, cfg: RunConfig, out: Outputs) -> dict:
    ref = pick_dataset(args, cfg, cfg.data.train, "kfold")
    check_paths([cfg.step1.data])
    ds = resolve_dataset(ref)
    k = args.k or cfg.kfold.k
    res = kfold_evaluate(cfg, ds, k, progress=lambda r: print(f"fold={r['fold']} n={r['n_test']} acc={r['acc']:.4f}"))
    body = res.to_dict()
    body["subject_disjoint"] = ds.has_subjects
    body["config"] = cfg.to_dict()
    out.write("metrics_kfold.json", _dump(body))
    print(f"accuracy {body['summary']}")
    return {}


COMMANDS = {
    "synth": cmd_synth,
    "weights": cmd_weights,
    "train": cmd_train,
    "eval": cmd_eval,
    "cbir": cmd_cbir,
    "extract": cmd_extract,
    "kfold": cmd_kfold,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-key override, repeatable (e.g. multires.p_max=0.5)")
    common.add_argument("--seed", type=int, help="u64 seed (overrides the config)")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--threads", type=int, help="cap BLAS worker threads")

    parser = argparse.ArgumentParser(prog="mafer", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write the synthetic glyph dataset as P5 pixmaps")
    p.add_argument("--verify", metavar="DIR", help="check an existing synth directory against its manifest")

    p = sub.add_parser("weights", parents=[common], help="per-class weights as class,count,weight CSV")
    p.add_argument("--dataset", help="class directory or FER2013 CSV")
    p.add_argument("--usage", default="Training", choices=["Training", "PublicTest", "PrivateTest"])
    p.add_argument("--counts", help="class,count CSV or {class: count} JSON")

    sub.add_parser("train", parents=[common], help="run base or two-step training")

    for name, helptext in (("eval", "accuracy at several test resolutions"),
                           ("cbir", "retrieval Precision@k and mAP"),
                           ("extract", "export embedding features as CSV")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--checkpoint", required=(name != "cbir"))
        p.add_argument("--dataset", help="class directory or FER2013 CSV (default: data.test)")
        p.add_argument("--usage", default="PrivateTest", choices=["Training", "PublicTest", "PrivateTest"])
        if name == "eval":
            p.add_argument("--resolutions", help="comma list, e.g. 16,24,32,native")
        if name == "cbir":
            p.add_argument("--features", help="feature CSV from 'extract' instead of a checkpoint")
        if name == "extract":
            p.add_argument("--resolution", type=int, help="degrade inputs to this shortest side first")

    p = sub.add_parser("kfold", parents=[common], help="k-fold accuracy, mean ± sd")
    p.add_argument("--dataset", help="class directory or FER2013 CSV (default: data.train)")
    p.add_argument("--usage", default="Training", choices=["Training", "PublicTest", "PrivateTest"])
    p.add_argument("--k", type=int, help="number of folds (default: kfold.k)")
    return parser


def _error(kind: str, message: str, details=None) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "details": details or []}) + "\n")


def _thread_limit(n: int | None):
    if n is None:
        return contextlib.nullcontext()
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    started = time.perf_counter()
    try:
        cfg = load_config(args.config, args.set, args.seed)
        if args.threads is not None and args.threads < 1:
            raise ConfigError(["--threads must be >= 1"])
        out = Outputs(Path(args.out))
        with _thread_limit(args.threads):
            extra = COMMANDS[args.command](args, cfg, out)
        if not (args.command == "synth" and args.verify):
            out.manifest(args.command, cfg, started, extra)
        return EXIT_OK
    except (ConfigError, UsageError) as exc:
        _error("config", str(exc), getattr(exc, "problems", None))
        return EXIT_USAGE
    except (DatasetError, CheckpointError, EvaluationError, TrainingDivergedError, RuntimeError, ValueError, OSError) as exc:
        _error(type(exc).__name__, str(exc))
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
