"""Command-line entry point: ``cate <command> ...``.

Exit codes: 0 success, 2 config error, 3 missing artifact, 4 mode mismatch, 1 other.
Config files are JSON objects; unknown keys are rejected.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from .bags import read_store, write_store
from .cfi import similarity_vector
from .concepts import load_concept_file, write_prompt_file
from .errors import ConfigError, FormatError, MissingArtifactError, ModeMismatchError, ValidationError
from .evalkit import SplitPlan, ablate
from .synth import WorldSpec, generate_world, template_embeddings
from .trainer import TABLE3_MODES, TrainConfig, load_checkpoint, load_model, save_checkpoint, train, write_curve_csv

log = logging.getLogger("cate")

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_MISSING, EXIT_MODE = 0, 1, 2, 3, 4


# -- config ---------------------------------------------------------------------
def _read_json(path: str | Path) -> dict:
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{p}: top level must be a JSON object")
    return doc


def _build(cls, section: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(section) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(known)}")
    try:
        return cls(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_world_config(path) -> WorldSpec:
    return _build(WorldSpec, _read_json(path), str(path))


def load_experiment_config(path) -> tuple[TrainConfig, SplitPlan | None]:
    """``{"train": {...}, "plan": {...}}``; a bare object is taken as the train section."""
    doc = _read_json(path)
    if set(doc) <= {"train", "plan"} and doc:
        extra = set(doc) - {"train", "plan"}
        if extra:
            raise ConfigError(f"{path}: unknown key(s) {sorted(extra)}")
        cfg = _build(TrainConfig, doc.get("train", {}), f"{path}:train")
        plan = _build(SplitPlan, doc["plan"], f"{path}:plan") if "plan" in doc else None
        return cfg, plan
    return _build(TrainConfig, doc, str(path)), None


def _load_data(store: str, concepts: str):
    if not (Path(store) / "manifest.json").exists() and not Path(store).is_file():
        raise MissingArtifactError(f"no bag store at {store}")
    if not Path(concepts).exists():
        raise MissingArtifactError(f"concept file not found: {concepts}")
    bags, manifest = read_store(store)
    bank = load_concept_file(concepts, num_classes=len(set(manifest["classes"].values())) or None)
    if bank.dim != int(manifest["dim"]):
        raise ValidationError(f"concept dim {bank.dim} != store dim {manifest['dim']}")
    return bags, manifest, bank


def _require_plan(plan: SplitPlan | None, path: str) -> SplitPlan:
    if plan is None:
        raise ConfigError(f"{path}: a 'plan' section is required for this command")
    return plan


# -- commands -------------------------------------------------------------------
def cmd_simulate(args) -> int:
    spec = load_world_config(args.config) if args.config else WorldSpec()
    if args.seed is not None:
        spec = _build(WorldSpec, {**spec.to_dict(), "seed": args.seed}, "--seed")
    bank, bags, truth = generate_world(spec)
    out = Path(args.out)
    classes = {f"class{c}": c for c in range(spec.num_classes)}
    write_store(out / "store", bags, classes)
    templates = template_embeddings(bank, args.templates, args.jitter, spec.seed)
    cs_names = dict(zip(bank.cs_names, (int(v) for v in bank.cs_labels)))
    write_prompt_file(out / "concepts.json", templates, cs_names)
    truth_doc = {"world": spec.to_dict(), **truth.to_dict()}
    (out / "ground_truth.json").write_text(json.dumps(truth_doc, sort_keys=True) + "\n", encoding="utf-8")
    sites = ", ".join(f"{s}({'ind' if s in spec.sites_ind else 'ood'})" for s in spec.sites)
    print(f"world: {len(bags)} bags, dim {spec.dim}, {spec.num_classes} classes, m={bank.m} n={bank.n}; sites {sites}")
    print(f"wrote {out / 'store'}, {out / 'concepts.json'}, {out / 'ground_truth.json'}")
    return EXIT_OK


def cmd_build_concepts(args) -> int:
    if not Path(args.prompts).exists():
        raise MissingArtifactError(f"prompt embedding file not found: {args.prompts}")
    bank = load_concept_file(args.prompts)
    print(f"concept bank: dim {bank.dim}, m={bank.m} class-specific, n={bank.n} class-agnostic")
    for c in bank.classes:
        names = [n for n, lab in zip(bank.cs_names, bank.cs_labels) if lab == c]
        print(f"  class {c}: {', '.join(names)}")
    if args.out:
        # one "template" per name: the file reloads to the same anchors
        anchors = {name: vec[None, :] for name, vec in zip(bank.names, bank.all_vectors)}
        write_prompt_file(args.out, anchors, dict(zip(bank.cs_names, (int(v) for v in bank.cs_labels))))
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, _ = load_experiment_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    bags, _, bank = _load_data(args.store, args.concepts)
    if args.sites:
        keep = set(args.sites.split(","))
        bags = [b for b in bags if b.site in keep]
        if not bags:
            raise ValidationError(f"no bags from sites {sorted(keep)}")
    resume = None
    if args.resume:
        if not Path(args.resume).exists():
            raise MissingArtifactError(f"checkpoint not found: {args.resume}")
        resume = load_checkpoint(args.resume)
        if resume.config != cfg:
            raise ConfigError("--resume checkpoint was trained with a different config")
    result = train(bags, bank, cfg, resume=resume, stop_epoch=args.stop_epoch)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.checkpoint, out / "model.ckpt")
    write_curve_csv(result.checkpoint.curve, out / "curve.csv")
    last = result.checkpoint.curve[-1] if result.checkpoint.curve else {}
    print(f"trained {cfg.mode} to epoch {result.checkpoint.epoch} on {len(bags)} bags; last epoch: "
          + ", ".join(f"{k}={v:.6g}" for k, v in last.items() if k != "epoch"))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg, plan = load_experiment_config(args.config)
    plan = _require_plan(plan, args.config)
    modes = args.modes.split(",") if args.modes else [cfg.mode]
    bad = [m for m in modes if m not in TABLE3_MODES]
    if bad:
        raise ConfigError(f"unknown mode(s) {bad}; choose from {list(TABLE3_MODES)}")
    bags, _, bank = _load_data(args.store, args.concepts)
    table = ablate(bags, bank, cfg, plan, modes=modes, n_jobs=args.jobs)
    return _emit(table, args.out)


def cmd_ablate(args) -> int:
    cfg, plan = load_experiment_config(args.config)
    plan = _require_plan(plan, args.config)
    bags, _, bank = _load_data(args.store, args.concepts)
    if args.sweep:
        name, _, raw = args.sweep.partition("=")
        if name not in {f.name for f in fields(TrainConfig)} or not raw:
            raise ConfigError(f"--sweep expects PARAM=v1,v2,... over a train config key, got {args.sweep!r}")
        kind = type(getattr(cfg, name))
        try:
            values = [kind(v) for v in raw.split(",")]
        except ValueError as exc:
            raise ConfigError(f"--sweep values for {name}: {exc}") from exc
        table = ablate(bags, bank, cfg, plan, sweep=(name, values), n_jobs=args.jobs)
    else:
        table = ablate(bags, bank, cfg, plan, modes=TABLE3_MODES, n_jobs=args.jobs)
    return _emit(table, args.out)


def _emit(table, out) -> int:
    table.write(out)
    print(table.to_csv(), end="")
    return EXIT_OK


def _model_and_bag(args):
    if not Path(args.checkpoint).exists():
        raise MissingArtifactError(f"checkpoint not found: {args.checkpoint}")
    ckpt = load_checkpoint(args.checkpoint)
    bags, _, bank = _load_data(args.store, args.concepts)
    by_id = {b.id: b for b in bags}
    if args.bag not in by_id:
        raise MissingArtifactError(f"unknown bag id {args.bag!r}")
    return ckpt, load_model(ckpt, bank), bank, by_id[args.bag]


def _write_rows(path, header, rows) -> None:
    lines = [",".join(header)] + [",".join(row) for row in rows]
    text = "\n".join(lines) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _quote(name: str) -> str:
    return f'"{name}"' if any(ch in name for ch in ',"') else name


def cmd_export_similarity(args) -> int:
    ckpt, model, bank, bag = _model_and_bag(args)
    if model.encoder is None:
        raise ModeMismatchError(f"mode {ckpt.config.mode!r} has no calibrated features to compare with concepts")
    with torch.no_grad():
        sample = model.calibrate(torch.from_numpy(bag.features), train_mode=False)
        sim = similarity_vector(sample.alpha, model.cs_anchors).numpy()
    rows = ([str(i)] + [f"{v:.6g}" for v in row] for i, row in enumerate(sim))
    _write_rows(args.out, ["patch"] + [_quote(n) for n in bank.cs_names], rows)
    return EXIT_OK


def cmd_export_attention(args) -> int:
    _, model, _, bag = _model_and_bag(args)
    with torch.no_grad():
        _, attention, _ = model(torch.from_numpy(bag.features), train_mode=False)
    _write_rows(args.out, ["patch", "attention"], ([str(i), f"{a:.6g}"] for i, a in enumerate(attention.numpy())))
    return EXIT_OK


# -- parser ---------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cate", description="Concept-anchored feature enhancement for MIL.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic world: bag store, concept file, ground truth")
    p.add_argument("--config", help="world config JSON (WorldSpec fields); defaults if omitted")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--templates", type=int, default=8, help="prompt templates per concept name")
    p.add_argument("--jitter", type=float, default=0.1, help="template embedding scatter around each anchor")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("build-concepts", help="ensemble prompt embeddings into a concept bank")
    p.add_argument("--prompts", required=True, help="prompt embedding JSON {dim, concepts, classes}")
    p.add_argument("--out", help="write the anchors back as a one-template-per-name file")
    p.set_defaults(func=cmd_build_concepts)

    def data_args(p):
        p.add_argument("--store", required=True, help="bag store directory (contains manifest.json)")
        p.add_argument("--concepts", required=True, help="prompt embedding JSON")

    p = sub.add_parser("train", help="train one model on the store's bags")
    p.add_argument("--config", required=True, help="train config JSON (TrainConfig fields or {train: ...})")
    data_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--sites", help="comma-separated sites to train on (default: all)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--stop-epoch", type=int, help="stop after this epoch count (for staged runs)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="Monte-Carlo CV over IND/OOD splits for one or more modes")
    p.add_argument("--config", required=True, help='experiment JSON {"train": {...}, "plan": {...}}')
    data_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--modes", help="comma-separated modes (default: the config's mode)")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="mode lattice (--table3) or a parameter sweep")
    p.add_argument("--config", required=True)
    data_args(p)
    p.add_argument("--out", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--table3", action="store_true", help="all six ablation modes")
    group.add_argument("--sweep", help="PARAM=v1,v2,... e.g. lambda_s=0,1,10,30,100")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    for name, func, what in (
        ("export-similarity", cmd_export_similarity, "per-patch cosine similarity to class-specific anchors"),
        ("export-attention", cmd_export_attention, "per-patch attention weights"),
    ):
        p = sub.add_parser(name, help=what)
        p.add_argument("--checkpoint", required=True)
        data_args(p)
        p.add_argument("--bag", required=True, help="bag id")
        p.add_argument("--out", help="CSV path (default: stdout)")
        p.set_defaults(func=func)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifactError, FileNotFoundError) as exc:
        print(f"missing: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ModeMismatchError as exc:
        print(f"mode mismatch: {exc}", file=sys.stderr)
        return EXIT_MODE
    except (ValidationError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
