"""Command-line entry point: ``peneo <subcommand> [flags]``.

Exit status: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure. Every run writes ``manifest.json`` into ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .baseline import (
    ERROR_TYPES,
    PERTURB_PS,
    SerReModel,
    evaluate_serre,
    perturbation_sweep,
    prepare_serre,
    read_ser_predictions,
    train_serre,
    write_ser_predictions,
)
from .config import RunConfig, resolve_config
from .corpus import (
    DatasetError,
    SchemaError,
    SynthSpec,
    Vocab,
    generate_synthetic_corpus,
    load_dataset,
    relabel_file,
    save_dataset,
    tokenize,
)
from .encoder import FeatureError, load_external_features
from .evalkit import build_report, run_report, write_report
from .fixtures import whole_pipeline_grad_check
from .model import PEneoModel
from .numerics import CheckpointError, ConfigurationError, load_tensors
from .parser import parse_output_record, write_parse_output
from .training import TrainingError, train_peneo

logger = logging.getLogger("peneo")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CHECKPOINT_NAME = "model.pene"


class UsageError(Exception):
    pass


class NumericFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, argv: list[str], cfg: RunConfig | None,
                   outputs: list[Path], elapsed: float, extra: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "argv": argv,
        "config": cfg.to_dict() if cfg else None,
        "seed": cfg.seed if cfg else None,
        "versions": {"peneo": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "outputs": {p.name: _sha256(p) for p in outputs if p.exists()},
        "elapsed_seconds": round(elapsed, 3),
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _load_docs(path: str, what: str):
    if not path:
        raise UsageError(f"no {what} dataset given")
    return load_dataset(path)


def _load_model(cfg: RunConfig):
    if not cfg.checkpoint:
        raise UsageError("no checkpoint given")
    meta_path = Path(cfg.checkpoint + ".json")
    if not Path(cfg.checkpoint).exists() or not meta_path.exists():
        raise DatasetError(f"checkpoint {cfg.checkpoint} not found")
    kind = json.loads(meta_path.read_text(encoding="utf-8")).get("kind")
    if kind == "serre":
        return SerReModel.load(cfg.checkpoint)
    if kind == "peneo":
        return PEneoModel.load(cfg.checkpoint)
    raise CheckpointError(f"unknown checkpoint kind {kind!r}")


def _require(model, cls, cfg: RunConfig):
    if not isinstance(model, cls):
        raise UsageError(f"checkpoint {cfg.checkpoint} does not match --pipeline={cfg.pipeline}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(cfg: RunConfig, out: Path, args) -> list[Path]:
    train_docs = _load_docs(cfg.train, "training")
    valid_docs = load_dataset(cfg.valid) if cfg.valid else []
    vocab = Vocab.build(train_docs)
    tcfg = cfg.train_config()

    def on_epoch(entry):
        loss = entry.get("loss", entry.get("ser_loss", 0.0) + entry.get("re_loss", 0.0))
        if not math.isfinite(loss):
            raise NumericFailure(f"non-finite loss at epoch {entry['epoch']}")

    if cfg.pipeline == "serre":
        model = SerReModel(vocab, cfg.model_config(), seed=cfg.seed)
        log = train_serre(model, train_docs, valid_docs, tcfg, on_epoch)
    else:
        model = PEneoModel(vocab, cfg.model_config(), seed=cfg.seed)
        log = train_peneo(model, train_docs, valid_docs, tcfg, on_epoch)
    ckpt = out / CHECKPOINT_NAME
    model.save(ckpt)
    log_path = out / "train_log.json"
    log_path.write_text(json.dumps(log, indent=1) + "\n", encoding="utf-8")
    return [ckpt, Path(str(ckpt) + ".json"), log_path]


def _substitute(value: str) -> tuple[str, ...]:
    return {"none": (), "le": ("le",), "lg": ("lg",), "both": ("le", "lg")}[value]


def cmd_eval(cfg: RunConfig, out: Path, args) -> list[Path]:
    docs = _load_docs(cfg.test, "test")
    path = out / "report.json"
    if args.gold_matrices:
        report = run_report(cfg.experiment_dict(), cfg.seed, docs, None, n_max=cfg.n_max)
    else:
        model = _load_model(cfg)
        if cfg.pipeline == "serre":
            _require(model, SerReModel, cfg)
            examples = prepare_serre(docs, model, cfg.n_max)
            override = None
            if args.ser == "gold":
                override = {ex.doc.doc_id: ex.entities for ex in examples}
            elif args.ser_predictions:
                override = read_ser_predictions(args.ser_predictions, {ex.doc.doc_id: ex.tokens for ex in examples})
                missing = [ex.doc.doc_id for ex in examples if ex.doc.doc_id not in override]
                if missing:
                    raise DatasetError(f"SER predictions missing for {len(missing)} documents, e.g. {missing[0]!r}")
            per_doc: list[dict] = []
            evaluate_serre(model, examples, per_doc, override)
            report = build_report(per_doc, cfg.experiment_dict(), cfg.seed)
        else:
            _require(model, PEneoModel, cfg)
            report = run_report(cfg.experiment_dict(), cfg.seed, docs, model, _substitute(args.substitute),
                                threads=cfg.threads, n_max=cfg.n_max)
    write_report(path, report)
    print(f"pair F1 {report['aggregate']['pair_f1']:.4f} over {report['aggregate']['documents']} documents")
    return [path]


def cmd_parse(cfg: RunConfig, out: Path, args) -> list[Path]:
    docs = _load_docs(cfg.test, "input")
    model = _load_model(cfg)
    records = []
    path = out / "pairs.json"
    if cfg.pipeline == "serre":
        _require(model, SerReModel, cfg)
        ser_records = []
        for ex in prepare_serre(docs, model, cfg.n_max):
            f = model.features(ex.inputs)
            ents = model.ser_infer(f, ex.tokens, ex.order)
            ser_records.append((ex.doc.doc_id, ents))
            pairs = [{"key": k.text, "value": v.text} for k, v in model.re_infer(f, ents)]
            records.append({"doc_id": ex.doc.doc_id, "pairs": pairs})
        ser_path = out / "ser_predictions.json"
        write_ser_predictions(ser_path, ser_records)
        path.write_text(json.dumps(records, indent=1) + "\n", encoding="utf-8")
        return [path, ser_path]
    _require(model, PEneoModel, cfg)
    feature_cache = load_tensors(cfg.features) if cfg.features else None
    skipped = 0
    for d in docs:
        t = tokenize(d, model.vocab, cfg.n_max)
        features = None
        if feature_cache is not None:
            try:
                features = load_external_features(cfg.features, d.doc_id, t.N, _cache=feature_cache)
            except FeatureError as exc:
                logger.warning("skipping %s: %s", d.doc_id, exc)
                skipped += 1
                continue
        records.append(parse_output_record(d.doc_id, model.parse(t, features)))
    write_parse_output(path, records)
    if skipped:
        print(f"skipped {skipped} documents without usable features")
    return [path]


def cmd_perturb(cfg: RunConfig, out: Path, args) -> list[Path]:
    docs = _load_docs(cfg.test, "test")
    model = _load_model(cfg)
    if not isinstance(model, SerReModel):
        raise UsageError("perturb needs a serre checkpoint")
    ps = [float(x) for x in args.ps.split(",")] if args.ps else list(PERTURB_PS)
    rows = perturbation_sweep(model, prepare_serre(docs, model, cfg.n_max), ERROR_TYPES, ps, cfg.seed)
    path = out / "perturb.csv"
    cols = ["error_type", "p", "precision", "recall", "f1", "true_positives", "num_predicted", "num_gold"]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "p": f"{r['p']:g}"})
    return [path]


def cmd_relabel(cfg: RunConfig, out: Path, args) -> list[Path]:
    dst = Path(args.dst) if args.dst else out / "relabeled.json"
    _, review = relabel_file(args.src, dst)
    return [dst, Path(review)]


def cmd_synth(cfg: RunConfig, out: Path, args) -> list[Path]:
    spec = SynthSpec(docs=args.docs, multi_line_frac=args.multi_line_frac, doc_prefix=args.prefix)
    docs = generate_synthetic_corpus(spec, cfg.seed)
    path = out / f"{args.prefix}.json"
    save_dataset(docs, path)
    return [path]


def cmd_gradcheck(cfg: RunConfig, out: Path, args) -> list[Path]:
    err = whole_pipeline_grad_check(c_e=args.c_e, seed=cfg.seed)
    print(f"max relative error {err:.3e}")
    path = out / "gradcheck.json"
    path.write_text(json.dumps({"c_e": args.c_e, "max_relative_error": err, "tolerance": args.tolerance}) + "\n",
                    encoding="utf-8")
    if not err <= args.tolerance:
        raise NumericFailure(f"gradient check failed: {err:.3e} > {args.tolerance:g}")
    return [path]


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "parse": cmd_parse,
    "perturb": cmd_perturb,
    "relabel": cmd_relabel,
    "synth": cmd_synth,
    "gradcheck": cmd_gradcheck,
}


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--pipeline", choices=["peneo", "serre"])
    common.add_argument("--threads", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config field (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="peneo", description="Key-value pair extraction on document layouts.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", parents=[common], help="train PEneo or the SER+RE baseline")
    p.add_argument("--train", dest="train_path")
    p.add_argument("--valid", dest="valid_path")

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint and write report.json")
    p.add_argument("--checkpoint")
    p.add_argument("--data", dest="test_path")
    p.add_argument("--substitute", choices=["none", "le", "lg", "both"], default="none",
                   help="replace predicted sub-task matrices by gold ones (PEneo)")
    p.add_argument("--gold-matrices", action="store_true", help="parse gold matrices, no model needed")
    p.add_argument("--ser", choices=["predicted", "gold"], default="predicted", help="SER input (baseline)")
    p.add_argument("--ser-predictions", help="external SER predictions JSON (baseline)")

    p = sub.add_parser("parse", parents=[common], help="extract key-value pairs to pairs.json")
    p.add_argument("--checkpoint")
    p.add_argument("--data", dest="test_path")
    p.add_argument("--features", help="external backbone features (tensor container)")

    p = sub.add_parser("perturb", parents=[common], help="SER error sweep on a fixed RE head")
    p.add_argument("--checkpoint")
    p.add_argument("--data", dest="test_path")
    p.add_argument("--ps", help="comma-separated probabilities (default 0,0.1,...,0.5)")

    p = sub.add_parser("relabel", parents=[common], help="convert entity-level boxes to line level")
    p.add_argument("src")
    p.add_argument("dst", nargs="?")

    p = sub.add_parser("synth", parents=[common], help="write a synthetic corpus")
    p.add_argument("--docs", type=int, default=200)
    p.add_argument("--multi-line-frac", type=float, default=0.3)
    p.add_argument("--prefix", default="synth")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the full model")
    p.add_argument("--c-e", type=int, default=8)
    p.add_argument("--tolerance", type=float, default=1e-3)
    return parser


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    for flag, key in (("seed", "seed"), ("pipeline", "pipeline"), ("threads", "threads"), ("out", "out"),
                      ("train_path", "train"), ("valid_path", "valid"), ("test_path", "test"),
                      ("checkpoint", "checkpoint"), ("features", "features")):
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = value
    return out


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.config, _overrides(args))
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        start = time.perf_counter()
        outputs = COMMANDS[args.command](cfg, out, args)
        write_manifest(out, args.command, argv, cfg, outputs, time.perf_counter() - start)
    except (UsageError, ConfigurationError) as exc:
        print(f"peneo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, SchemaError, CheckpointError, TrainingError, FeatureError,
            FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"peneo: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFailure, FloatingPointError) as exc:
        print(f"peneo: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
