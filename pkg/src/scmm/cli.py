"""Command-line surface: synth, train, predict, evaluate, report, validate.

Every verb reads inputs, writes artifacts under --out (never mutating its
inputs), and on failure emits a machine-readable error object on stderr
with a nonzero exit code.  All randomness flows from the config seed;
SCMM_THREADS caps the decode worker pool.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import config as cfgmod
from .data import Dataset, LabelSet, ParseError, SchemaError, load_dataset, load_embeddings, load_split, validate_bio
from .evaluation import entity_prf, reliability_report, reliability_table_csv
from .model import LabelModel
from .synth import generate_corpus, write_corpus
from .trainer import Trainer


class _JsonArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error("usage", message)
        raise SystemExit(2)


def _emit_error(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": {"type": kind, "message": message}}) + "\n")


def _threads() -> int:
    raw = os.environ.get("SCMM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _scan_entities(paths) -> tuple[str, ...]:
    """Collect entity types from labels/annotations in raw JSONL files."""
    found = set()
    for path in paths:
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                obj = json.loads(line)
                seqs = list(obj.get("annotations", {}).values())
                if obj.get("labels") is not None:
                    seqs.append(obj["labels"])
                for seq in seqs:
                    for lab in seq:
                        if lab != "O":
                            found.add(lab.split("-", 1)[1])
    if not found:
        raise SchemaError("no entity labels found in input files")
    return tuple(sorted(found))


def _load_with_embeddings(data_path, emb_path, label_set: LabelSet):
    triples = load_split(data_path, label_set)
    ds = Dataset(label_set, {"train": triples})
    ds = load_embeddings(emb_path, ds, "train")
    return ds.split("train")


# -- verbs ----------------------------------------------------------------------

def _cmd_synth(args) -> int:
    cfg = cfgmod.load_synth_config(args.config, args.set)
    dataset = generate_corpus(cfg)
    write_corpus(cfg, dataset, args.out)
    sizes = {name: len(t) for name, t in dataset.splits.items()}
    print(json.dumps({"out": str(args.out), "sizes": sizes}))
    return 0


def _cmd_train(args) -> int:
    loaded = cfgmod.load_train_config(args.config, args.set)
    dataset = load_dataset(loaded.data_dir, loaded.entities)
    for split in dataset.splits:
        emb = loaded.data_dir / f"{split}.bin"
        if emb.exists():
            dataset = load_embeddings(emb, dataset, split)
    train_config = loaded.resolve(len(dataset.lf_names))
    model, report = Trainer(dataset, train_config, out_dir=args.out).train()
    summary = {"out": str(args.out), "stage_f1": report.stage_f1}
    if report.reliability is not None:
        summary["pearson_r"] = report.reliability["pearson_r"]
    print(json.dumps(summary))
    return 0


def _cmd_predict(args) -> int:
    model = LabelModel.load(args.model)
    triples = _load_with_embeddings(args.data, args.embeddings, model.label_set)
    preds = model.decode(triples, n_threads=_threads())
    labels = model.label_set.labels
    with open(args.out, "w", encoding="utf-8") as fh:
        for t, path in zip(triples, preds):
            fh.write(json.dumps({"id": t.sentence.id,
                                 "labels": [labels[i] for i in path]}) + "\n")
    print(json.dumps({"out": str(args.out), "sentences": len(triples)}))
    return 0


def _cmd_evaluate(args) -> int:
    entities = (tuple(args.entities.split(","))
                if args.entities else _scan_entities([args.gold, args.pred]))
    label_set = LabelSet(entities)
    gold_triples = load_split(args.gold, label_set)
    gold = {t.sentence.id: t.sentence.gold for t in gold_triples}
    if any(g is None for g in gold.values()):
        raise SchemaError("gold file is missing labels")
    preds = {}
    with open(args.pred, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            if "id" not in obj or "labels" not in obj:
                raise SchemaError(f"{args.pred}: line {lineno}: need id and labels")
            preds[obj["id"]] = [label_set.index(s) for s in obj["labels"]]
    missing = set(gold) - set(preds)
    if missing:
        raise SchemaError(f"predictions missing for {len(missing)} sentences")
    ids = [t.sentence.id for t in gold_triples]
    rep = entity_prf([gold[i] for i in ids], [preds[i] for i in ids], label_set)
    payload = json.dumps(rep.to_dict(), indent=2)
    print(payload)
    if args.out:
        Path(args.out).write_text(payload + "\n", encoding="utf-8")
    return 0


def _cmd_report(args) -> int:
    model = LabelModel.load(args.model)
    triples = _load_with_embeddings(args.data, args.embeddings, model.label_set)
    report = reliability_report(model, list(triples))
    payload = json.dumps(report, indent=2)
    print(payload)
    if args.out:
        Path(args.out).write_text(payload + "\n", encoding="utf-8")
    if args.csv:
        Path(args.csv).write_text(reliability_table_csv(report), encoding="utf-8")
    return 0


def _cmd_validate(args) -> int:
    if args.entities:
        entities = tuple(args.entities.split(","))
    else:
        try:
            entities = _scan_entities([args.data])
        except SchemaError:
            entities = ("ENT",)  # all-O file: any label universe parses it
    label_set = LabelSet(entities)
    triples = load_split(args.data, label_set)
    if args.embeddings:
        ds = Dataset(label_set, {"train": triples})
        load_embeddings(args.embeddings, ds, "train")
    warnings = []
    for t in triples:
        if t.sentence.gold is not None:
            for pos, msg in validate_bio(t.sentence.gold, label_set, mode="strict"):
                warnings.append({"id": t.sentence.id, "position": pos, "message": msg})
    print(json.dumps({
        "ok": True,
        "sentences": len(triples),
        "lfs": list(triples[0].weak.lf_names) if triples else [],
        "entities": list(entities),
        "embeddings_checked": bool(args.embeddings),
        "strict_bio_warnings": warnings,
    }, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _JsonArgumentParser(prog="scmm",
                                 description="weak-supervision sequence label model")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="run the full training pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="decode a dataset with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("evaluate", help="entity-level micro P/R/F1")
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--entities", default=None, help="comma-separated; inferred if omitted")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("report", help="reliability/correlation tables")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--csv", default=None, help="also write the per-LF table as CSV")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("validate", help="format-check a dataset file")
    p.add_argument("--data", required=True)
    p.add_argument("--embeddings", default=None)
    p.add_argument("--entities", default=None)
    p.set_defaults(func=_cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except cfgmod.ConfigError as exc:
        _emit_error("config", str(exc))
        return 2
    except (ParseError, SchemaError) as exc:
        _emit_error("data", str(exc))
        return 1
    except FileNotFoundError as exc:
        _emit_error("missing-file", f"{exc.filename or exc}")
        return 1
    except (ValueError, RuntimeError, KeyError) as exc:
        _emit_error("runtime", str(exc))
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
