"""Command-line entry point: ``modmoe <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 missing prerequisite,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import itertools
import json
import sys
from dataclasses import asdict
from pathlib import Path

from . import evaluation, pipeline, synthdata
from .backbone import TransformerConfig, Vocabulary, build_model
from .moe import expand_from_dense, trace_activations
from .numkernel import NumericalError
from .pipeline import Checkpoint, PhaseError, TrainingDiverged

DEFAULT_SIZES = {"align": 256, "instruct": 512, "tune": 64, "test": 200}
PHASE_SPLIT = {"align": "align", "instruct": "instruct", "router": "instruct", "moe": "tune"}
PREVIOUS = {"instruct": "align", "router": "instruct", "moe": "router"}

DEFAULT_CONFIG = {
    "seed": 0,
    "model": {"d_model": 64, "n_layers": 4, "n_heads": 4, "ffn_hidden": 128, "max_seq_len": 64,
              "moe_layer_indices": [1, 3], "n_experts": 4, "top_k": 2, "use_meta": True,
              "router_depth": 1, "router_hidden": 64},
    "phases": {"align": {}, "instruct": {}, "router": {}, "moe": {}},
    "router_labels_per_modality": 25,
    "phase3_train_non_ffn": False,
    "learned_router": False,
    "max_new": 8,
}


class CliError(Exception):
    code = 2


class MissingPrerequisite(CliError):
    code = 3


class NumericalFailure(CliError):
    code = 4


# ----------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------

def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in out:
            raise CliError(f"unknown config key {k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            if k == "phases":
                for p, pv in v.items():
                    if p not in out[k]:
                        raise CliError(f"unknown phase {p!r} in config")
                    out[k][p] = {**out[k][p], **pv}
            else:
                out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str | None, args: argparse.Namespace | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {path}: {exc}") from None
        cfg = _merge(cfg, user)
    if args is not None:
        if getattr(args, "seed", None) is not None:
            cfg["seed"] = args.seed
        phase = getattr(args, "phase", None)
        for key in ("epochs", "lr", "batch_size", "max_steps"):
            value = getattr(args, key, None)
            if value is not None:
                targets = [phase] if phase else list(cfg["phases"])
                for p in targets:
                    cfg["phases"][p][key] = value
    return cfg


def model_config(cfg: dict, vocab: Vocabulary) -> TransformerConfig:
    try:
        return TransformerConfig(vocab_size=len(vocab), **cfg["model"])
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad model config: {exc}") from None


def phase_config(cfg: dict, phase: str, sft: bool = False) -> pipeline.PhaseConfig:
    try:
        return pipeline.default_phase_config(
            phase, seed=cfg["seed"], sft=sft,
            phase3_train_non_ffn=cfg["phase3_train_non_ffn"] if phase == "moe" else False,
            learned_router=cfg["learned_router"] if phase == "moe" else False,
            **cfg["phases"][phase])
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad {phase} phase config: {exc}") from None


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def write_losses(path: Path, losses) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "lr"])
        for step, loss, lr in losses:
            w.writerow([step, repr(loss), repr(lr)])


def load_data(data_dir: str) -> tuple[dict, Vocabulary, dict]:
    d = Path(data_dir)
    if not (d / "manifest.json").exists() or not (d / "vocab.txt").exists():
        raise MissingPrerequisite(f"{d} is not a generated corpus (run gen-data first)")
    return synthdata.load_corpus(d), Vocabulary.load(d / "vocab.txt"), json.loads((d / "manifest.json").read_text())


def load_checkpoint(path: str | None, what: str) -> Checkpoint:
    if not path or not Path(path).exists():
        raise MissingPrerequisite(f"{what} checkpoint not found: {path}")
    return Checkpoint.load(path)


# ----------------------------------------------------------------------
# phase drivers
# ----------------------------------------------------------------------

def train(cfg: dict, phase: str, splits: dict, vocab: Vocabulary, corpus_seed: int,
          init: Checkpoint | None = None, resume: Checkpoint | None = None,
          stop_after: int | None = None) -> Checkpoint:
    """Run one phase from its prerequisite checkpoint (or resume within it)."""
    split = PHASE_SPLIT[phase]
    if split not in splits:
        raise MissingPrerequisite(f"corpus has no {split!r} split")
    records = splits[split]
    if resume is not None:
        if resume.phase != phase:
            raise CliError(f"cannot resume a {resume.phase!r} checkpoint as phase {phase!r}")
        model = resume.model
    elif phase == "align":
        model = init.model if init is not None else build_model(model_config(cfg, vocab), cfg["seed"])
    else:
        need = PREVIOUS[phase]
        if init is None or init.model.stage != need:
            got = "none" if init is None else init.model.stage
            raise MissingPrerequisite(f"phase {phase!r} needs a {need!r} checkpoint (got {got})")
        model = init.model
    pc = phase_config(cfg, phase)
    try:
        if phase == "align":
            return pipeline.run_phase1(model, records, vocab, pc, resume=resume,
                                       stop_after=stop_after, corpus_seed=corpus_seed)
        if phase == "instruct":
            return pipeline.run_phase2(model, records, vocab, pc, resume=resume,
                                       stop_after=stop_after, corpus_seed=corpus_seed)
        if phase == "router":
            labelled = pipeline.label_subset(records, cfg["router_labels_per_modality"])
            model.router = pipeline.train_router(model, labelled, vocab, pc)
            model.stage = "router"
            return Checkpoint(model, "router", pipeline.total_steps(len(labelled), pc),
                              corpus_seed, None, pc.to_dict(), [])
        if resume is None:
            router = model.router
            if cfg["learned_router"]:
                router = pipeline.new_router(model.cfg, cfg["seed"])
            expand_from_dense(model, model.cfg.n_experts, model.cfg.moe_layer_indices, router,
                              top_k=model.cfg.top_k, use_meta=model.cfg.use_meta,
                              learned_router=cfg["learned_router"])
        return pipeline.run_phase3(model, records, vocab, pc, resume=resume,
                                   stop_after=stop_after, corpus_seed=corpus_seed)
    except TrainingDiverged as exc:
        raise NumericalFailure(f"training diverged: {exc}") from None
    except NumericalError as exc:
        raise NumericalFailure(f"numerical failure in {exc.op}") from None
    except PhaseError as exc:
        raise CliError(str(exc)) from None


def save_run(out: Path, ck: Checkpoint, cfg: dict, data_manifest: dict, extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    ck.save(out / "checkpoint.bin")
    write_losses(out / "losses.csv", ck.losses)
    final = {"steps": ck.step, "final_loss": ck.losses[-1][1] if ck.losses else None}
    final.update(extra or {})
    write_json(out / "manifest.json", {
        "phase": ck.phase, "config": cfg, "corpus_seed": data_manifest["seed"],
        "config_hash": ck.config_hash, "final_metrics": final,
    })


def trace_records(model, records, vocab):
    from .pipeline import collate, encode_examples

    ex = encode_examples(records, vocab, "instruct")
    n_image = model.cfg.n_image_tokens
    batches = [collate(ex[i:i + 50], n_image) for i in range(0, len(ex), 50)]
    return trace_activations(model, batches)


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------

def parse_sizes(text: str | None) -> dict:
    sizes = dict(DEFAULT_SIZES)
    if not text:
        return sizes
    for part in text.split(","):
        try:
            k, v = part.split("=")
            sizes[k.strip()] = int(v)
        except ValueError:
            raise CliError(f"bad --sizes entry {part!r}; expected split=count") from None
        if k.strip() not in synthdata.SPLITS:
            raise CliError(f"unknown split {k.strip()!r}")
    return sizes


def cmd_gen_data(args) -> int:
    sizes = parse_sizes(args.sizes)
    try:
        _, manifest = synthdata.generate_corpus(args.seed, sizes, args.out)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    print(json.dumps(manifest.counts, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", cfg)
    splits, vocab, manifest = load_data(args.data)
    init = load_checkpoint(args.init, "initial") if args.init else None
    resume = load_checkpoint(args.resume, "resume") if args.resume else None
    ck = train(cfg, args.phase, splits, vocab, manifest["seed"], init, resume, args.stop_after)
    save_run(out, ck, cfg, manifest)
    print(f"{args.phase}: {ck.step} steps, checkpoint {out / 'checkpoint.bin'}")
    return 0


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint, "model")
    splits, vocab, _ = load_data(args.data)
    if args.split not in splits:
        raise MissingPrerequisite(f"corpus has no {args.split!r} split")
    report = evaluation.evaluate(ck.model, splits[args.split], vocab, args.max_new)
    report.extra["split"] = args.split
    report.write(args.out)
    print(json.dumps(report.aggregates, sort_keys=True))
    return 0


def cmd_trace(args) -> int:
    ck = load_checkpoint(args.checkpoint, "model")
    if not ck.model.is_moe:
        raise MissingPrerequisite("tracing needs an expanded MoE checkpoint")
    splits, vocab, _ = load_data(args.data)
    if args.split not in splits:
        raise MissingPrerequisite(f"corpus has no {args.split!r} split")
    records = splits[args.split][:args.n] if args.n else splits[args.split]
    trace = trace_records(ck.model, records, vocab)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    trace.to_csv(Path(args.out) / "trace.csv")
    print(f"traced {len(records)} records over layers {trace.layers}")
    return 0


def count_report(model) -> dict:
    pc = pipeline.count_parameters(model)
    report = pc.to_dict()
    if model.is_moe:
        report["reference_scale"] = pipeline.reference_scale_counts()
    return report


def cmd_count_params(args) -> int:
    ck = load_checkpoint(args.checkpoint, "model")
    report = count_report(ck.model)
    print(json.dumps(report, sort_keys=True, indent=2))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        write_json(Path(args.out) / "params.json", report)
    return 0


def cmd_pipeline(args) -> int:
    """All phases in order, then evaluation, tracing and parameter counts."""
    cfg = load_config(args.config, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", cfg)
    splits, vocab, manifest = load_data(args.data)
    ck = None
    for phase in pipeline.PHASES:
        ck = train(cfg, phase, splits, vocab, manifest["seed"], init=ck)
        save_run(out / phase, ck, cfg, manifest)
        print(f"{phase}: {ck.step} steps", flush=True)
    model = ck.model
    report = evaluation.evaluate(model, splits["tune"], vocab, cfg["max_new"])
    report.extra["split"] = "tune"
    report.extra["params"] = count_report(model)
    report.write(out)
    trace = trace_records(model, splits["test"], vocab)
    trace.to_csv(out / "trace.csv")
    write_json(out / "manifest.json", {
        "phase": "pipeline", "config": cfg, "corpus_seed": manifest["seed"],
        "config_hash": ck.config_hash, "final_metrics": report.aggregates,
    })
    print(json.dumps(report.aggregates, sort_keys=True))
    return 0


# ----------------------------------------------------------------------
# ablations
# ----------------------------------------------------------------------

CELL_KEYS = {"name", "meta", "router", "k", "e", "tuning"}
BASELINE = {"meta": True, "router": "frozen", "k": 2, "e": 4, "tuning": "moe"}
SETTINGS = ("instruct", "tune", "test")


def validate_cell(cell: dict) -> dict:
    extra = set(cell) - CELL_KEYS
    if extra:
        raise CliError(f"unknown cell keys {sorted(extra)}")
    c = {**BASELINE, **cell}
    if not isinstance(c["meta"], bool):
        raise CliError(f"meta must be true/false, got {c['meta']!r}")
    if c["router"] not in ("frozen", "learned"):
        raise CliError(f"router must be frozen or learned, got {c['router']!r}")
    if c["tuning"] not in ("moe", "sft"):
        raise CliError(f"tuning must be moe or sft, got {c['tuning']!r}")
    if not isinstance(c["e"], int) or not isinstance(c["k"], int) or not 1 <= c["k"] <= c["e"]:
        raise CliError(f"need integers 1 <= k <= e, got k={c['k']!r} e={c['e']!r}")
    if "name" not in c:
        c["name"] = cell_name(c)
    return c


def cell_name(c: dict) -> str:
    if c["tuning"] == "sft":
        return "sft"
    return f"meta-{'on' if c['meta'] else 'off'}_{c['router']}_k{c['k']}_e{c['e']}"


def matrix_preset(name: str) -> list[dict]:
    if name == "oneway":
        variants = [{}, {"meta": False}, {"router": "learned"}, {"k": 1}, {"e": 2}, {"e": 6},
                    {"tuning": "sft"}]
        return [validate_cell(v) for v in variants]
    if name == "full":
        cells = [validate_cell({"meta": m, "router": r, "k": k, "e": e})
                 for m, r, k, e in itertools.product((True, False), ("frozen", "learned"),
                                                     (1, 2), (2, 4, 6))]
        return cells + [validate_cell({"tuning": "sft"})]
    raise CliError(f"unknown matrix preset {name!r}")


def load_matrix(spec: str | None) -> tuple[list[dict], str]:
    if spec is None or spec in ("oneway", "full"):
        cells = matrix_preset(spec or "oneway")
        return cells, cells[0]["name"] if spec != "full" else cell_name(BASELINE)
    try:
        data = json.loads(Path(spec).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read matrix {spec}: {exc}") from None
    raw = data.get("cells") if isinstance(data, dict) else data
    if not isinstance(raw, list) or not raw:
        raise CliError("matrix must list at least one cell")
    cells = [validate_cell(c) if isinstance(c, dict) else _bad_cell(c) for c in raw]
    names = [c["name"] for c in cells]
    if len(set(names)) != len(names):
        raise CliError("cell names must be unique")
    baseline = data.get("baseline", names[0]) if isinstance(data, dict) else names[0]
    if baseline not in names:
        raise CliError(f"baseline {baseline!r} is not a cell")
    return cells, baseline


def _bad_cell(c):
    raise CliError(f"cell must be an object, got {c!r}")


def run_cell(cell: dict, cfg: dict, base: Checkpoint, splits: dict, vocab: Vocabulary,
             corpus_seed: int):
    """Phase 3 for one ablation cell, starting from a copy of the instruction-tuned model."""
    model = copy.deepcopy(base.model)
    model.router = None
    model.cfg.n_experts = cell["e"]
    model.cfg.top_k = cell["k"]
    model.cfg.use_meta = cell["meta"]
    tune = splits["tune"]
    sft = cell["tuning"] == "sft"
    learned = cell["router"] == "learned"
    cell_cfg = _merge(cfg, {"learned_router": learned})
    try:
        if sft:
            pc = pipeline.default_phase_config("moe", seed=cfg["seed"], sft=True, **cfg["phases"]["moe"])
            ck = pipeline.run_phase3(model, tune, vocab, pc, sft=True, corpus_seed=corpus_seed)
        else:
            if learned:
                router = pipeline.new_router(model.cfg, cfg["seed"])
            else:
                labelled = pipeline.label_subset(splits["instruct"], cfg["router_labels_per_modality"])
                router = pipeline.train_router(model, labelled, vocab, phase_config(cfg, "router"))
            expand_from_dense(model, cell["e"], model.cfg.moe_layer_indices, router,
                              top_k=cell["k"], use_meta=cell["meta"], learned_router=learned)
            ck = pipeline.run_phase3(model, tune, vocab, phase_config(cell_cfg, "moe"),
                                     corpus_seed=corpus_seed)
    except TrainingDiverged as exc:
        raise NumericalFailure(f"cell {cell['name']}: {exc}") from None
    results = {}
    for split in SETTINGS:
        if split not in splits:
            continue
        rep = evaluation.evaluate(model, splits[split], vocab, cfg["max_new"])
        results[(split, "open", "recall")] = rep.aggregates.get("open", {}).get("recall", 0.0)
        results[(split, "closed", "accuracy")] = rep.aggregates.get("closed", {}).get("accuracy", 0.0)
    return ck, results


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, args)
    cells, baseline = load_matrix(args.matrix)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", {"config": cfg, "cells": cells, "baseline": baseline})
    splits, vocab, manifest = load_data(args.data)
    if args.init:
        base = load_checkpoint(args.init, "instruction-tuned")
        if base.model.stage not in ("instruct", "router"):
            raise MissingPrerequisite("ablations start from an instruction-tuned checkpoint")
    else:
        base = train(cfg, "align", splits, vocab, manifest["seed"])
        base = train(cfg, "instruct", splits, vocab, manifest["seed"], init=base)
    all_results = {}
    for cell in cells:
        ck, results = run_cell(cell, cfg, base, splits, vocab, manifest["seed"])
        all_results[cell["name"]] = results
        cell_dir = out / cell["name"]
        cell_dir.mkdir(parents=True, exist_ok=True)
        write_losses(cell_dir / "losses.csv", ck.losses)
        write_json(cell_dir / "manifest.json", {
            "phase": "moe", "cell": cell, "config": cfg, "corpus_seed": manifest["seed"],
            "config_hash": pipeline.config_hash(cfg, cell),
            "final_metrics": {f"{s}/{kind}/{m}": v for (s, kind, m), v in results.items()},
        })
        write_json(cell_dir / "report.json", {f"{s}/{kind}/{m}": v for (s, kind, m), v in results.items()})
        print(f"cell {cell['name']} done", flush=True)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "setting", "metric", "value", "delta"])
        base_res = all_results[baseline]
        for cell in cells:
            for key, value in all_results[cell["name"]].items():
                split, kind, metric = key
                w.writerow([cell["name"], f"{split}-{kind}", metric, repr(value),
                            repr(value - base_res[key])])
    return 0


# ----------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="modmoe", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate the synthetic corpus")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--sizes", help="comma list like align=64,tune=64 (others keep defaults)")
    g.set_defaults(func=cmd_gen_data)

    def training_flags(sp):
        sp.add_argument("--config")
        sp.add_argument("--data", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--max-steps", type=int)

    t = sub.add_parser("train", help="run one training phase")
    t.add_argument("--phase", required=True, choices=pipeline.PHASES)
    training_flags(t)
    t.add_argument("--init", help="checkpoint from the previous phase")
    t.add_argument("--resume", help="checkpoint of an interrupted run of this phase")
    t.add_argument("--stop-after", type=int, help="stop once this many steps are done")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--max-new", type=int, default=8)
    e.set_defaults(func=cmd_eval)

    tr = sub.add_parser("trace", help="export top-1 expert activation counts")
    tr.add_argument("--checkpoint", required=True)
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--split", default="test")
    tr.add_argument("--n", type=int, default=200)
    tr.set_defaults(func=cmd_trace)

    c = sub.add_parser("count-params", help="total and activated parameter counts")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--out")
    c.set_defaults(func=cmd_count_params)

    a = sub.add_parser("ablate", help="run the ablation matrix")
    training_flags(a)
    a.add_argument("--matrix", help="'oneway' (default), 'full' or a JSON cell file")
    a.add_argument("--init", help="instruction-tuned checkpoint to start every cell from")
    a.set_defaults(func=cmd_ablate)

    pl = sub.add_parser("pipeline", help="all phases, evaluation and tracing")
    training_flags(pl)
    pl.set_defaults(func=cmd_pipeline)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"modmoe: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
