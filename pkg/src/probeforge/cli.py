"""Command-line pipeline: curate, rewire, probe, eval, and sweep."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

from . import __version__
from .curator import (ProbeQuery, default_templates, group_queries,
                      load_dataset, load_templates, load_triples, save_dataset,
                      split_hard)
from .encoders import (EncoderHandle, encoder_from_spec, generator_from_spec,
                       load_checkpoint, mlm_from_spec)
from .errors import (ConfigurationError, InputError, ProbeforgeError,
                     ValidationError)
from .evaluation import (EvalReport, RescoreResult, StabilitySummary,
                         aggregate, bin_by_answer_length, expert_rescore,
                         load_annotations, save_report, score_predictions,
                         stability_summary, step_curves, write_layer_sweep_csv,
                         write_report_csv, write_step_curves_csv)
from .probers import (DEFAULT_NUM_MASKS, MASK_STRATEGIES, RankedPrediction,
                      build_entity_index, contrastive_probe, generate_probe,
                      load_entities, load_predictions, mask_average_rank,
                      mask_predict_detail, save_predictions)
from .rewire import MaskedPair, RewireConfig, rewire_train, sample_sentences, tail_mask
from .text import collapse_norm

CACHE_ENV = "PROBEFORGE_CACHE"
PROBE_STRATEGIES = ("contrastive", "mask-predict", "mask-average", "generate")
SWEEP_AXES = ("layer", "mask-ratio", "checkpoint-step", "seed")

# RewireConfig fields that may be overridden from the rewire command line.
REWIRE_OVERRIDE_FIELDS = (
    "num_sentences", "mask_ratio", "temperature", "learning_rate", "steps",
    "batch_size", "checkpoint_every", "probe_checkpoint_step", "seed",
    "max_query_tokens", "max_answer_tokens",
)


# ---------------------------------------------------------------------------
# shared plumbing

def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _flag_dict(args: argparse.Namespace) -> dict:
    return {k: v for k, v in vars(args).items()
            if not k.startswith("_") and k not in ("func", "out")}


def _resolve_out(args: argparse.Namespace) -> Path:
    """--out wins; otherwise derive a directory under $PROBEFORGE_CACHE."""
    if args.out:
        return Path(args.out)
    cache = os.environ.get(CACHE_ENV)
    if not cache:
        args._parser.error(f"--out is required when {CACHE_ENV} is not set")
    payload = json.dumps({"command": args._command, **_flag_dict(args)},
                         sort_keys=True, default=str)
    digest = hashlib.sha1(payload.encode("utf-8")).hexdigest()[:12]
    return Path(cache) / f"{args._command}-{digest}"


def _write_manifest(out_dir: Path, command: str, config: dict, inputs: dict,
                    outputs: Sequence[str], seed, started_at: str,
                    t0: float) -> None:
    # Written last so a manifest marks a completed run; apart from the two
    # clock fields the document is a pure function of the flags.
    doc = {
        "command": command,
        "config": config,
        "inputs": {k: str(v) for k, v in inputs.items() if v is not None},
        "outputs": sorted(outputs),
        "seed": seed,
        "version": __version__,
        "started_at": started_at,
        "duration_seconds": round(time.perf_counter() - t0, 3),
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _parse_int_list(raw: str, flag: str) -> tuple[int, ...]:
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise ConfigurationError(f"{flag} must list at least one integer")
    try:
        return tuple(int(p) for p in parts)
    except ValueError:
        raise ConfigurationError(
            f"{flag}: expected comma-separated integers, got {raw!r}") from None


def _by_relation(queries: Sequence[ProbeQuery]):
    grouped: dict[str, list[ProbeQuery]] = {}
    for q in queries:
        grouped.setdefault(q.relation_id, []).append(q)
    return grouped.items()


def _relation_candidates(rel_queries: Sequence[ProbeQuery]) -> list[str]:
    """Gold answers of one relation, deduplicated in first-appearance order."""
    names: list[str] = []
    seen: set[str] = set()
    for q in rel_queries:
        for answer in q.answers:
            key = collapse_norm(answer)
            if key not in seen:
                seen.add(key)
                names.append(answer)
    return names


def _masked_pairs(corpus, config: RewireConfig) -> list[MaskedPair]:
    sentences = sample_sentences(corpus, config.num_sentences, seed=config.seed)
    pairs = (tail_mask(s, config.mask_ratio, config.mask_placeholder)
             for s in sentences)
    return [p for p in pairs if p is not None]


def _resolve_checkpoint(checkpoint) -> Path:
    """Accept either a checkpoint directory or a whole rewire output dir."""
    root = Path(checkpoint)
    if (root / "sidecar.json").is_file():
        return root
    config_path = root / "rewire_config.json"
    if config_path.is_file():
        config = RewireConfig.from_json(config_path)
        if config.probe_checkpoint_step < 1:
            raise ConfigurationError(
                f"{config_path}: probe_checkpoint_step is "
                f"{config.probe_checkpoint_step}; pass a checkpoint directory")
        step_dir = root / "checkpoints" / f"step_{config.probe_checkpoint_step:05d}"
        if not (step_dir / "sidecar.json").is_file():
            raise InputError(
                f"no checkpoint at step {config.probe_checkpoint_step} under {root}")
        return step_dir
    raise InputError(f"{root} holds neither a checkpoint nor a rewire run")


# ---------------------------------------------------------------------------
# curate

def cmd_curate(args: argparse.Namespace) -> int:
    t0, started = time.perf_counter(), _utc_now()
    out = _resolve_out(args)
    result = load_triples(args.triples)
    templates = load_templates(args.templates) if args.templates else default_templates()
    queries = group_queries(result.triples, templates,
                            max_answers=args.max_answers,
                            per_relation_cap=args.per_relation, seed=args.seed)
    if not queries:
        raise InputError(f"{args.triples}: no queries survived curation")
    flagged = split_hard(queries)

    out.mkdir(parents=True, exist_ok=True)
    save_dataset(flagged, out / "full.jsonl")
    save_dataset([q for q in flagged if q.hard], out / "hard.jsonl")
    counts: dict[str, list[int]] = {}
    for q in flagged:
        row = counts.setdefault(q.relation_id, [0, 0])
        row[0] += 1
        row[1] += int(q.hard)
    with open(out / "stats.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["relation_id", "full_count", "hard_count"])
        for rel, (full_count, hard_count) in counts.items():
            writer.writerow([rel, full_count, hard_count])

    _write_manifest(
        out, "curate",
        config={"max_answers": args.max_answers,
                "per_relation": args.per_relation,
                "malformed_triple_lines": result.malformed},
        inputs={"triples": args.triples,
                "templates": args.templates or "builtin"},
        outputs=["full.jsonl", "hard.jsonl", "stats.csv"],
        seed=args.seed, started_at=started, t0=t0)
    n_hard = sum(q.hard for q in flagged)
    print(f"curate: {len(flagged)} queries ({n_hard} hard) -> {out}")
    return 0


# ---------------------------------------------------------------------------
# rewire

def cmd_rewire(args: argparse.Namespace) -> int:
    t0, started = time.perf_counter(), _utc_now()
    out = _resolve_out(args)
    overrides = {name: getattr(args, name) for name in REWIRE_OVERRIDE_FIELDS}
    config = RewireConfig.from_json(args.config, **overrides)
    encoder = encoder_from_spec(args.encoder)
    pairs = _masked_pairs(args.corpus, config)

    result = rewire_train(encoder, pairs, config, out_dir=out)

    outputs = ["rewire_config.json", "loss_trace.csv"]
    outputs += [str(p.relative_to(out)) for p in result.checkpoint_dirs]
    _write_manifest(
        out, "rewire",
        config=asdict(config),
        inputs={"encoder": args.encoder, "corpus": args.corpus,
                "config": args.config},
        outputs=outputs, seed=config.seed, started_at=started, t0=t0)
    final = result.trace[-1].loss_mean if result.trace else float("nan")
    print(f"rewire: {config.steps} steps on {len(pairs)} pairs, "
          f"final mean loss {final:.4f} -> {out}")
    return 0


# ---------------------------------------------------------------------------
# probe

def _contrastive_encoder(args: argparse.Namespace) -> EncoderHandle:
    if args.checkpoint and args.encoder:
        args._parser.error("--encoder and --checkpoint are mutually exclusive")
    if args.checkpoint:
        return load_checkpoint(_resolve_checkpoint(args.checkpoint))
    if args.encoder:
        return encoder_from_spec(args.encoder)
    args._parser.error("contrastive probing needs --encoder or --checkpoint")
    raise AssertionError("unreachable")


def _probe_contrastive(args, queries: Sequence[ProbeQuery]):
    encoder = _contrastive_encoder(args)
    if args.candidate_scope == "full":
        if not args.entities:
            args._parser.error("--entities is required with --candidate-scope full")
        names = load_entities(args.entities)
        index = build_entity_index(encoder, names, layer_limit=args.layer_limit)
        return contrastive_probe(encoder, index, queries, args.k), encoder.identity
    predictions = []
    for _, rel_queries in _by_relation(queries):
        index = build_entity_index(encoder, _relation_candidates(rel_queries),
                                   layer_limit=args.layer_limit)
        predictions.extend(contrastive_probe(encoder, index, rel_queries, args.k))
    order = {q.query_id: i for i, q in enumerate(queries)}
    predictions.sort(key=lambda p: order[p.query_id])
    return predictions, encoder.identity


def _probe_mask_predict(args, queries: Sequence[ProbeQuery]):
    mlm = mlm_from_spec(args.encoder)
    predictions = []
    for q in queries:
        detail = mask_predict_detail(mlm, q.query_text,
                                     num_masks=args.num_masks,
                                     strategy=args.fill_strategy,
                                     refine=args.refine,
                                     max_refine_iters=args.max_refine_iters)
        predictions.append(RankedPrediction(
            q.query_id, ((detail.answer, detail.score),), "mask-predict"))
    return predictions, mlm.identity


def _probe_mask_average(args, queries: Sequence[ProbeQuery]):
    mlm = mlm_from_spec(args.encoder)
    if args.candidate_scope == "full":
        if not args.entities:
            args._parser.error("--entities is required with --candidate-scope full")
        names = load_entities(args.entities)
        preds = [mask_average_rank(mlm, q, names, args.k) for q in queries]
        return preds, mlm.identity
    predictions = []
    for _, rel_queries in _by_relation(queries):
        candidates = _relation_candidates(rel_queries)
        predictions.extend(mask_average_rank(mlm, q, candidates, args.k)
                           for q in rel_queries)
    order = {q.query_id: i for i, q in enumerate(queries)}
    predictions.sort(key=lambda p: order[p.query_id])
    return predictions, mlm.identity


def _probe_generate(args, queries: Sequence[ProbeQuery]):
    generator = generator_from_spec(args.encoder)
    return [generate_probe(generator, q, args.k) for q in queries], generator.identity


def cmd_probe(args: argparse.Namespace) -> int:
    t0, started = time.perf_counter(), _utc_now()
    out = _resolve_out(args)
    if args.k < 1:
        raise ConfigurationError("--k must be >= 1")
    if args.checkpoint and args.strategy != "contrastive":
        args._parser.error("--checkpoint only applies to contrastive probing")
    if args.strategy != "contrastive" and not args.encoder:
        args._parser.error(f"--encoder is required for {args.strategy} probing")
    queries = load_dataset(args.dataset)
    if not queries:
        raise InputError(f"{args.dataset}: dataset is empty")

    runner = {
        "contrastive": _probe_contrastive,
        "mask-predict": _probe_mask_predict,
        "mask-average": _probe_mask_average,
        "generate": _probe_generate,
    }[args.strategy]
    predictions, identity = runner(args, queries)

    out.mkdir(parents=True, exist_ok=True)
    save_predictions(predictions, out / "predictions.jsonl")
    _write_manifest(
        out, "probe",
        config={"strategy": args.strategy, "k": args.k,
                "layer_limit": args.layer_limit,
                "candidate_scope": args.candidate_scope,
                "num_masks": args.num_masks,
                "fill_strategy": args.fill_strategy,
                "refine": args.refine,
                "max_refine_iters": args.max_refine_iters,
                "model": identity},
        inputs={"encoder": args.encoder, "checkpoint": args.checkpoint,
                "dataset": args.dataset, "entities": args.entities},
        outputs=["predictions.jsonl"], seed=None, started_at=started, t0=t0)
    print(f"probe[{args.strategy}]: {len(predictions)} predictions -> {out}")
    return 0


# ---------------------------------------------------------------------------
# eval

def _write_bins_csv(bins, k_values: Sequence[int], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin", "count", *[f"acc{k}" for k in k_values]])
        for row in bins:
            cells = ["" if row.acc[k] is None else f"{row.acc[k]:.6f}"
                     for k in k_values]
            writer.writerow([row.label, row.count, *cells])


def _write_rescore_json(result: RescoreResult, path) -> None:
    def keyed(mapping):
        return {str(k): v for k, v in mapping.items()}

    doc = {
        "k_values": list(result.k_values),
        "perfect_threshold": result.perfect_threshold,
        "totals": keyed(result.totals),
        "confusion": {str(k): {str(score): dict(cells)
                               for score, cells in table.items()}
                      for k, table in result.confusion.items()},
        "gold_candidate_acc": keyed(result.gold_candidate_acc),
        "gold_query_acc": keyed(result.gold_query_acc),
        "annotated_acc": keyed(result.annotated_acc),
        "annotated_candidate_acc": keyed(result.annotated_candidate_acc),
        "notes": list(result.notes),
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def cmd_eval(args: argparse.Namespace) -> int:
    t0, started = time.perf_counter(), _utc_now()
    out = _resolve_out(args)
    k_values = _parse_int_list(args.k, "--k")
    queries = load_dataset(args.dataset)
    predictions = load_predictions(args.predictions)
    known = {q.query_id for q in queries}
    for pred in predictions:
        if pred.query_id not in known:
            raise ValidationError(
                f"{args.predictions}: prediction for unknown query {pred.query_id!r}")

    split_queries = (queries if args.split == "full"
                     else [q for q in queries if q.hard])
    if not split_queries:
        raise InputError(f"no queries in the {args.split} split")
    split_ids = {q.query_id for q in split_queries}
    split_preds = [p for p in predictions if p.query_id in split_ids]
    strategies = sorted({p.strategy for p in split_preds})
    if len(strategies) > 1:
        raise ValidationError(
            f"{args.predictions}: predictions mix strategies {strategies}")
    strategy = strategies[0] if strategies else ""

    hits = score_predictions(split_preds, split_queries, k_values)
    report = aggregate(hits, k_values, model=args.model, strategy=strategy,
                       split=args.split)

    out.mkdir(parents=True, exist_ok=True)
    save_report(report, out / "report.json")
    write_report_csv(report, out / "report.csv")
    outputs = ["report.json", "report.csv"]
    if args.length_bins:
        edges = _parse_int_list(args.length_bins, "--length-bins")
        bins = bin_by_answer_length(split_queries, hits, edges, k_values)
        _write_bins_csv(bins, k_values, out / "bins.csv")
        outputs.append("bins.csv")
    if args.annotations:
        annotations = load_annotations(args.annotations)
        sample_ids = {a.query_id for a in annotations}
        sample = [p for p in split_preds if p.query_id in sample_ids]
        answers_by_query = {q.query_id: q.answers for q in split_queries}
        rescored = expert_rescore(sample, annotations, answers_by_query, k_values)
        _write_rescore_json(rescored, out / "rescore.json")
        outputs.append("rescore.json")

    _write_manifest(
        out, "eval",
        config={"split": args.split, "k": list(k_values), "model": args.model,
                "strategy": strategy,
                "length_bins": args.length_bins, "annotated": bool(args.annotations)},
        inputs={"predictions": args.predictions, "dataset": args.dataset,
                "annotations": args.annotations},
        outputs=outputs, seed=None, started_at=started, t0=t0)
    accs = " ".join(f"acc@{k}={report.macro[k]:.4f}" for k in k_values)
    print(f"eval[{args.split}]: macro {accs} over {report.total_queries} queries -> {out}")
    return 0


# ---------------------------------------------------------------------------
# sweep

def _parse_axis_values(axis: str, raw: str):
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise ConfigurationError("--values must list at least one value")
    try:
        values = [float(p) if axis == "mask-ratio" else int(p) for p in parts]
    except ValueError:
        raise ConfigurationError(
            f"--values: could not parse {raw!r} for axis {axis}") from None
    if len(set(values)) != len(values):
        raise ConfigurationError(f"--values contains duplicates: {raw!r}")
    return values


def _run_jobs(jobs, workers: int):
    """Run zero-arg callables, preserving input order in the results."""
    if workers == 1 or len(jobs) <= 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return [future.result() for future in [pool.submit(j) for j in jobs]]


def _trained_encoder(encoder_spec: str, corpus, config: RewireConfig,
                     steps: int) -> EncoderHandle:
    encoder = encoder_from_spec(encoder_spec)
    if steps > 0:
        pairs = _masked_pairs(corpus, config)
        rewire_train(encoder, pairs, replace(config, steps=steps,
                                             checkpoint_every=0))
    return encoder


def _sweep_report(encoder: EncoderHandle, queries, entity_names, layer_limit,
                  k_values, metadata) -> EvalReport:
    index = build_entity_index(encoder, entity_names, layer_limit=layer_limit)
    predictions = contrastive_probe(encoder, index, queries, max(k_values))
    hits = score_predictions(predictions, queries, k_values)
    return aggregate(hits, k_values, model=encoder.identity,
                     strategy="contrastive", split="full", metadata=metadata)


def _write_ratio_sweep_csv(rows: Sequence[tuple[float, float, float]], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mask_ratio", "macro_acc1", "macro_acc10"])
        for ratio, acc1, acc10 in rows:
            writer.writerow([f"{ratio:g}", f"{acc1:.6f}", f"{acc10:.6f}"])


def _write_stability_csv(summary: StabilitySummary, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["relation_id", "acc1_mean", "acc1_std",
                         "acc10_mean", "acc10_std"])
        def cells(stats_by_k):
            out = []
            for k in (1, 10):
                out += [f"{stats_by_k[k].mean:.6f}", f"{stats_by_k[k].std:.6f}"]
            return out
        for rel, stats_by_k in summary.per_relation.items():
            writer.writerow([rel, *cells(stats_by_k)])
        writer.writerow(["macro", *cells(summary.macro)])


def cmd_sweep(args: argparse.Namespace) -> int:
    t0, started = time.perf_counter(), _utc_now()
    out = _resolve_out(args)
    if args.workers < 1:
        raise ConfigurationError("--workers must be >= 1")
    values = _parse_axis_values(args.axis, args.values)
    config = RewireConfig.from_json(args.config)
    queries = load_dataset(args.dataset)
    if not queries:
        raise InputError(f"{args.dataset}: dataset is empty")
    entity_names = load_entities(args.entities)
    k_values = (1, 10)
    # Sweeps probe the state the config selects for probing; a config
    # without a probe step is probed after the full training budget.
    probe_step = (config.probe_checkpoint_step
                  if 0 < config.probe_checkpoint_step <= config.steps
                  else config.steps)
    skipped: list = []

    if args.axis == "layer":
        if any(v < 1 for v in values):
            raise ConfigurationError("layer sweep values must be >= 1")
        encoder = _trained_encoder(args.encoder, args.corpus, config, probe_step)
        available = [v for v in values if v <= encoder.max_layers]
        skipped = [v for v in values if v > encoder.max_layers]
        jobs = [lambda L=L: (L, _sweep_report(encoder, queries, entity_names,
                                              L, k_values, {}))
                for L in available]
        results = _run_jobs(jobs, args.workers)
        rows = [(L, rep.macro[1], rep.macro[10]) for L, rep in results]
        out.mkdir(parents=True, exist_ok=True)
        write_layer_sweep_csv(rows, out / "layer_sweep.csv")
        merged = "layer_sweep.csv"
    elif args.axis == "mask-ratio":
        jobs = []
        for ratio in values:
            cfg = replace(config, mask_ratio=ratio)
            jobs.append(lambda cfg=cfg, ratio=ratio: (
                ratio, _sweep_report(
                    _trained_encoder(args.encoder, args.corpus, cfg, probe_step),
                    queries, entity_names, None, k_values, {})))
        results = _run_jobs(jobs, args.workers)
        rows = [(ratio, rep.macro[1], rep.macro[10]) for ratio, rep in results]
        out.mkdir(parents=True, exist_ok=True)
        _write_ratio_sweep_csv(rows, out / "mask_ratio_sweep.csv")
        merged = "mask_ratio_sweep.csv"
    elif args.axis == "checkpoint-step":
        if any(v < 0 for v in values):
            raise ConfigurationError("checkpoint-step values must be >= 0")
        jobs = [lambda s=s: _sweep_report(
                    _trained_encoder(args.encoder, args.corpus, config, s),
                    queries, entity_names, None, k_values,
                    {"checkpoint_step": s})
                for s in values]
        reports = _run_jobs(jobs, args.workers)
        out.mkdir(parents=True, exist_ok=True)
        write_step_curves_csv(step_curves(reports, k=1), out / "step_curves.csv")
        merged = "step_curves.csv"
    else:
        if len(values) < 2:
            raise ConfigurationError("seed sweep needs at least two values")
        if any(v < 0 for v in values):
            raise ConfigurationError("seed values must be >= 0")
        jobs = []
        for seed in values:
            cfg = replace(config, seed=seed)
            jobs.append(lambda cfg=cfg, seed=seed: _sweep_report(
                _trained_encoder(args.encoder, args.corpus, cfg, probe_step),
                queries, entity_names, None, k_values, {"seed": seed}))
        reports = _run_jobs(jobs, args.workers)
        out.mkdir(parents=True, exist_ok=True)
        _write_stability_csv(stability_summary(reports), out / "stability.csv")
        merged = "stability.csv"

    _write_manifest(
        out, "sweep",
        config={"axis": args.axis, "values": values, "skipped_values": skipped,
                "probe_step": probe_step, "workers": args.workers,
                "rewire_config": asdict(config)},
        inputs={"encoder": args.encoder, "corpus": args.corpus,
                "config": args.config, "dataset": args.dataset,
                "entities": args.entities},
        outputs=[merged], seed=config.seed, started_at=started, t0=t0)
    print(f"sweep[{args.axis}]: {len(values) - len(skipped)} runs -> {out / merged}")
    return 0


# ---------------------------------------------------------------------------
# parser

def _add_out(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--out", help=f"output directory (default: derived under ${CACHE_ENV})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="probeforge",
        description="Cloze-style knowledge probing for text encoders.")
    parser.add_argument("--version", action="version",
                        version=f"probeforge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    curate = sub.add_parser(
        "curate", help="build full/hard probe datasets from a triple file")
    curate.add_argument("--triples", required=True,
                        help="TSV file of head, relation, tail columns")
    curate.add_argument("--templates",
                        help="relation template JSON (default: bundled templates)")
    curate.add_argument("--max-answers", type=int, default=10)
    curate.add_argument("--per-relation", type=int, default=1000,
                        help="cap on queries sampled per relation")
    curate.add_argument("--seed", type=int, default=0)
    _add_out(curate)
    curate.set_defaults(func=cmd_curate, _command="curate", _parser=curate)

    rewire = sub.add_parser(
        "rewire", help="contrastively train an encoder on tail-masked sentences")
    rewire.add_argument("--encoder", required=True,
                        help='encoder spec, e.g. "reference:dim=128,seed=7,layers=2"')
    rewire.add_argument("--corpus", required=True, help="one sentence per line")
    rewire.add_argument("--config", required=True, help="RewireConfig JSON")
    for name in REWIRE_OVERRIDE_FIELDS:
        flag = "--" + name.replace("_", "-")
        kind = float if name in ("mask_ratio", "temperature", "learning_rate") else int
        rewire.add_argument(flag, type=kind, default=None,
                            help=f"override {name} from the config file")
    _add_out(rewire)
    rewire.set_defaults(func=cmd_rewire, _command="rewire", _parser=rewire)

    probe = sub.add_parser("probe", help="rank answers for each query")
    probe.add_argument("--encoder",
                       help="reference:..., table-mlm:PATH, or table-generator:PATH")
    probe.add_argument("--checkpoint",
                       help="checkpoint directory or rewire output directory")
    probe.add_argument("--dataset", required=True, help="query JSONL")
    probe.add_argument("--entities", help="candidate entities, one per line")
    probe.add_argument("--strategy", required=True, choices=PROBE_STRATEGIES)
    probe.add_argument("--k", type=int, default=10)
    probe.add_argument("--layer-limit", type=int, default=None)
    probe.add_argument("--candidate-scope", choices=("full", "relation"),
                       default="full")
    probe.add_argument("--num-masks", type=int, default=DEFAULT_NUM_MASKS)
    probe.add_argument("--fill-strategy", choices=MASK_STRATEGIES,
                       default="independent")
    probe.add_argument("--refine", choices=("order",), default=None)
    probe.add_argument("--max-refine-iters", type=int, default=5)
    _add_out(probe)
    probe.set_defaults(func=cmd_probe, _command="probe", _parser=probe)

    ev = sub.add_parser("eval", help="score predictions against gold answers")
    ev.add_argument("--predictions", required=True, help="prediction JSONL")
    ev.add_argument("--dataset", required=True, help="query JSONL")
    ev.add_argument("--split", choices=("full", "hard"), default="full")
    ev.add_argument("--k", default="1,10", help="comma-separated cutoffs")
    ev.add_argument("--model", default="", help="model label for the report")
    ev.add_argument("--annotations", help="expert annotation CSV")
    ev.add_argument("--length-bins",
                    help="comma-separated answer-length bin edges, e.g. 10,20")
    _add_out(ev)
    ev.set_defaults(func=cmd_eval, _command="eval", _parser=ev)

    sweep = sub.add_parser(
        "sweep", help="repeat rewire/probe/eval along one axis and merge CSVs")
    sweep.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sweep.add_argument("--values", required=True,
                       help="comma-separated axis values")
    sweep.add_argument("--encoder", required=True)
    sweep.add_argument("--corpus", required=True)
    sweep.add_argument("--config", required=True, help="RewireConfig JSON")
    sweep.add_argument("--dataset", required=True, help="query JSONL")
    sweep.add_argument("--entities", required=True)
    sweep.add_argument("--workers", type=int, default=1,
                       help="parallel sub-jobs (default: sequential)")
    _add_out(sweep)
    sweep.set_defaults(func=cmd_sweep, _command="sweep", _parser=sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        # argparse has already printed usage or version text
        return exc.code if isinstance(exc.code, int) else 2
    except ProbeforgeError as exc:
        print(f"probeforge: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
