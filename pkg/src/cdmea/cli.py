"""Command-line interface: generate / train / evaluate / debias-external.

Flag precedence is command line > --config JSON file > built-in defaults;
every run writes the resolved options (plus the tool version) to
resolved_config.json next to its outputs. Exit codes: 0 success,
2 argument/config error, 3 data validation error, 4 numerical divergence.
The CDMEA_THREADS environment variable caps torch's worker threads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import __version__
from .data import (
    DataError,
    SyntheticSpec,
    generate_synthetic_pair,
    load_mmkg_pair,
    save_mmkg_pair,
)
from .encoders import prepare_pair
from .evaluation import (
    beta_sweep,
    bucket_report,
    compute_metrics,
    evaluate_alignment,
    format_metrics,
    noise_sweep,
    plot_sweep,
    rank_candidates,
    write_beta_sweep_tsv,
    write_bucket_tsv,
    write_metrics_tsv,
    write_noise_sweep_tsv,
)
from .scoring import read_scores_tsv, score_matrix, write_scores_tsv
from .training import (
    DivergenceError,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train,
    write_trace,
)

GENERATE_DEFAULTS = {
    "entities": 100, "relations": 8, "triples": 300,
    "edge_dropout": 0.0, "attribute_noise": 0.0, "visual_bias": 0.0,
    "image_noise": 0.0, "attribute_dim": 40, "image_dim": 64,
    "seed_ratio": 0.3, "seed": 0, "force": False,
}

TRAIN_DEFAULTS = {
    "seed_ratio": None, "split_seed": None, "epochs": 200, "batch_size": 1000,
    "learning_rate": 5e-4, "temperature": 0.1, "beta": 0.2, "weight_decay": 0.01,
    "iterative_every": 10, "hidden_dim": 300, "layer_count": 2, "visual_dim": 100,
    "no_branch": [], "loss_fused": None, "loss_v": None, "loss_g": None, "loss_m": None,
    "exclude_positive_denominator": False, "seed": 0,
}

EVALUATE_DEFAULTS = {
    "seed_ratio": None, "split_seed": None, "beta": None, "no_cdi": False,
    "debias_target": "visual", "candidates": "test", "avg_directions": False,
    "beta_sweep": None, "buckets": False, "noise_sweep": None,
    "export_scores": False, "plot": False, "allow_mismatch": False,
}

DEBIAS_DEFAULTS = {"beta": 0.2}


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated floats, got {text!r}")


def _fraction(low, high, inclusive_high=False):
    def parse(text: str) -> float:
        v = float(text)
        ok = low <= v <= high if inclusive_high else low <= v < high
        if not ok:
            bracket = "]" if inclusive_high else ")"
            raise argparse.ArgumentTypeError(f"value {v} outside [{low}, {high}{bracket}")
        return v

    return parse


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdmea", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"cdmea {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic perturbed graph pair")
    gen.add_argument("--out", required=True)
    gen.add_argument("--config", default=None)
    gen.add_argument("--entities", type=int)
    gen.add_argument("--relations", type=int)
    gen.add_argument("--triples", type=int)
    gen.add_argument("--edge-dropout", type=_fraction(0.0, 1.0))
    gen.add_argument("--attribute-noise", type=_fraction(0.0, 1.0))
    gen.add_argument("--visual-bias", type=_fraction(0.0, 1.0, inclusive_high=True))
    gen.add_argument("--image-noise", type=_fraction(0.0, 1.0))
    gen.add_argument("--attribute-dim", type=int)
    gen.add_argument("--image-dim", type=int)
    gen.add_argument("--seed-ratio", type=_fraction(0.0, 1.0))
    gen.add_argument("--seed", type=int)
    gen.add_argument("--force", action="store_true", default=None)

    tr = sub.add_parser("train", help="train a model on a dataset directory")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--config", default=None)
    tr.add_argument("--seed-ratio", type=_fraction(0.0, 1.0))
    tr.add_argument("--split-seed", type=int)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float)
    tr.add_argument("--temperature", "--tau", dest="temperature", type=float)
    tr.add_argument("--beta", type=_fraction(0.0, 1.0, inclusive_high=True))
    tr.add_argument("--weight-decay", type=float)
    tr.add_argument("--iterative-every", type=int)
    tr.add_argument("--hidden-dim", type=int)
    tr.add_argument("--layer-count", type=int)
    tr.add_argument("--visual-dim", type=int)
    tr.add_argument("--no-branch", action="append", choices=["v", "g", "m"], default=None)
    for key in ("fused", "v", "g", "m"):
        tr.add_argument(f"--loss-{key}", dest=f"loss_{key}",
                        action=argparse.BooleanOptionalAction, default=None)
    tr.add_argument("--exclude-positive-denominator", action="store_true", default=None)
    tr.add_argument("--seed", type=int)

    ev = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset directory")
    ev.add_argument("--data", required=True)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--config", default=None)
    ev.add_argument("--seed-ratio", type=_fraction(0.0, 1.0))
    ev.add_argument("--split-seed", type=int)
    ev.add_argument("--beta", type=_fraction(0.0, 1.0, inclusive_high=True))
    ev.add_argument("--no-cdi", action="store_true", default=None,
                    help="disable debiasing (identical to --beta 0)")
    ev.add_argument("--debias-target", choices=["visual", "graph"])
    ev.add_argument("--candidates", choices=["test", "all"])
    ev.add_argument("--avg-directions", action="store_true", default=None)
    ev.add_argument("--beta-sweep", type=_float_list, default=None, metavar="B1,B2,...")
    ev.add_argument("--buckets", action="store_true", default=None)
    ev.add_argument("--noise-sweep", type=_float_list, default=None, metavar="R1,R2,...")
    ev.add_argument("--export-scores", action="store_true", default=None)
    ev.add_argument("--plot", action="store_true", default=None)
    ev.add_argument("--allow-mismatch", action="store_true", default=None)

    db = sub.add_parser("debias-external",
                        help="apply debiased inference to imported branch scores")
    db.add_argument("--scores", required=True)
    db.add_argument("--out", required=True)
    db.add_argument("--config", default=None)
    db.add_argument("--data", default=None, help="dataset dir supplying the ground truth")
    db.add_argument("--truth", default=None, help="TSV of query_id<TAB>true_candidate_id")
    db.add_argument("--beta", type=_fraction(0.0, 1.0, inclusive_high=True))
    return parser


def resolve_options(args, defaults: dict) -> dict:
    """command line > config file > defaults; unknown config keys are rejected."""
    resolved = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            with open(config_path, encoding="utf-8") as fh:
                file_values = json.load(fh)
        except FileNotFoundError:
            raise ValueError(f"config file not found: {config_path}")
        except json.JSONDecodeError as exc:
            raise ValueError(f"config file is not valid JSON: {exc}")
        unknown = set(file_values) - set(defaults)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        resolved.update(file_values)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def write_snapshot(out_dir, command: str, options: dict, paths: dict) -> None:
    snapshot = {
        "command": command,
        "version": __version__,
        "paths": paths,
        "options": options,
    }
    with open(os.path.join(out_dir, "resolved_config.json"), "w", encoding="utf-8") as fh:
        json.dump(snapshot, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _ensure_out_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return str(path)


def cmd_generate(args) -> int:
    opts = resolve_options(args, GENERATE_DEFAULTS)
    out = str(args.out)
    if os.path.isdir(out) and os.listdir(out) and not opts["force"]:
        raise ValueError(f"output directory {out} is not empty (use --force to overwrite)")
    spec = SyntheticSpec(
        entity_count=opts["entities"], relation_count=opts["relations"],
        triple_count=opts["triples"], edge_dropout=opts["edge_dropout"],
        attribute_noise=opts["attribute_noise"],
        visual_bias_fraction=opts["visual_bias"],
        image_noise_rate=opts["image_noise"], rng_seed=opts["seed"],
        attribute_dim=opts["attribute_dim"], image_dim=opts["image_dim"])
    kg1, kg2, seeds = generate_synthetic_pair(spec, seed_ratio=opts["seed_ratio"])
    _ensure_out_dir(out)
    extra = {f"synthetic_{key}": value for key, value in asdict(spec).items()}
    save_mmkg_pair(out, kg1, kg2, seeds, extra_meta=extra)
    write_snapshot(out, "generate", opts, {"out": out})
    print(f"wrote synthetic pair ({kg1.entity_count} entities, "
          f"{len(kg1.triples)}/{len(kg2.triples)} triples) to {out}")
    return 0


def _train_config_from_options(opts) -> TrainConfig:
    disabled = set(opts["no_branch"] or [])
    for key in ("v", "g", "m"):
        if key in disabled and opts[f"loss_{key}"] is True:
            raise ValueError(f"--loss-{key} conflicts with --no-branch {key}")

    def loss_on(key):
        explicit = opts[f"loss_{key}"]
        return True if explicit is None else bool(explicit)

    return TrainConfig(
        epochs=opts["epochs"], batch_size=opts["batch_size"],
        learning_rate=opts["learning_rate"], temperature=opts["temperature"],
        beta=opts["beta"], weight_decay=opts["weight_decay"],
        iterative_every=opts["iterative_every"], hidden_dim=opts["hidden_dim"],
        layer_count=opts["layer_count"], visual_dim=opts["visual_dim"],
        loss_fused=loss_on("fused"), loss_v=loss_on("v"),
        loss_g=loss_on("g"), loss_m=loss_on("m"),
        use_visual="v" not in disabled, use_graph="g" not in disabled,
        use_fused="m" not in disabled,
        exclude_positive_denominator=bool(opts["exclude_positive_denominator"]),
        rng_seed=opts["seed"])


def cmd_train(args) -> int:
    opts = resolve_options(args, TRAIN_DEFAULTS)
    config = _train_config_from_options(opts)
    config.validate()
    kg1, kg2, seeds = load_mmkg_pair(args.data, seed_ratio=opts["seed_ratio"],
                                     rng_seed=opts["split_seed"])
    result = train(kg1, kg2, seeds, config)
    out = _ensure_out_dir(args.out)
    save_checkpoint(os.path.join(out, "checkpoint.npz"), result.model, result.optimizer,
                    epoch=config.epochs, config=config)
    write_trace(os.path.join(out, "trace.tsv"), result.trace)
    write_snapshot(out, "train", opts, {"data": str(args.data), "out": out})
    last = result.trace[-1]
    print(f"trained {config.epochs} epochs; final loss {last.loss:.4f}, "
          f"val H@1 {last.val_h1:.4f}")
    return 0


def _load_for_evaluation(args, opts):
    kg1, kg2, seeds = load_mmkg_pair(args.data, seed_ratio=opts["seed_ratio"],
                                     rng_seed=opts["split_seed"])
    model, _, _, config = load_checkpoint(args.checkpoint,
                                          verify_hash=not opts["allow_mismatch"])
    if (model.attribute_dim != kg1.attribute_dim or model.image_dim != kg1.image_dim
            or model.relation_count < max(kg1.relation_count, kg2.relation_count)):
        raise ValueError("checkpoint dimensions do not match the dataset")
    return kg1, kg2, seeds, model, config


def cmd_evaluate(args) -> int:
    opts = resolve_options(args, EVALUATE_DEFAULTS)
    kg1, kg2, seeds, model, config = _load_for_evaluation(args, opts)
    beta = config.beta if opts["beta"] is None else opts["beta"]
    if opts["no_cdi"]:
        beta = 0.0
    gt1, gt2 = prepare_pair(kg1, kg2)
    emb1 = model.modality_embeddings(gt1)
    emb2 = model.modality_embeddings(gt2)
    fusion = model.fusion_params()
    direction = "averaged" if opts["avg_directions"] else "kg1_to_kg2"
    out = _ensure_out_dir(args.out)

    metrics, ranks = evaluate_alignment(
        emb1, emb2, seeds.test_pairs, fusion, beta,
        debias_target=opts["debias_target"], candidates=opts["candidates"],
        direction=direction)
    write_metrics_tsv(os.path.join(out, "metrics.tsv"), metrics)
    print(format_metrics(metrics))

    if opts["buckets"]:
        report = bucket_report(seeds.test_pairs, kg1, kg2, ranks)
        write_bucket_tsv(os.path.join(out, "buckets.tsv"), report)

    if opts["beta_sweep"] is not None:
        rows = beta_sweep(emb1, emb2, seeds.test_pairs, fusion, opts["beta_sweep"],
                          debias_target=opts["debias_target"],
                          candidates=opts["candidates"], direction=direction)
        write_beta_sweep_tsv(os.path.join(out, "beta_sweep.tsv"), rows)
        if opts["plot"]:
            plot_sweep(os.path.join(out, "beta_sweep.svg"),
                       [r[0] for r in rows], [r[1] for r in rows], "beta")

    if opts["noise_sweep"] is not None:
        spec = _synthetic_spec_from_meta(args.data)
        rows = noise_sweep(spec, opts["noise_sweep"], config,
                           seed_ratio=seeds.seed_ratio)
        write_noise_sweep_tsv(os.path.join(out, "noise_sweep.tsv"), rows)
        if opts["plot"]:
            plot_sweep(os.path.join(out, "noise_sweep.svg"),
                       [r.rate for r in rows], [r.metrics for r in rows], "image noise rate")

    if opts["export_scores"]:
        cand = (seeds.test_pairs[:, 1] if opts["candidates"] == "test"
                else np.arange(emb2.entity_count))
        matrix = score_matrix(emb1, emb2, fusion, beta=beta,
                              debias_target=opts["debias_target"],
                              query_ids=seeds.test_pairs[:, 0], candidate_ids=cand)
        write_scores_tsv(os.path.join(out, "scores.tsv"), matrix)

    write_snapshot(out, "evaluate", {**opts, "beta": beta},
                   {"data": str(args.data), "checkpoint": str(args.checkpoint), "out": out})
    return 0


def _synthetic_spec_from_meta(data_dir) -> SyntheticSpec:
    meta_path = os.path.join(str(data_dir), "meta.tsv")
    values = {}
    with open(meta_path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line and line.startswith("synthetic_"):
                key, value = line.split("\t")
                values[key.removeprefix("synthetic_")] = value
    if not values:
        raise ValueError("noise sweep needs a generated dataset "
                         "(meta.tsv lacks the synthetic_* recipe keys)")
    ints = {"entity_count", "relation_count", "triple_count", "rng_seed",
            "attribute_dim", "image_dim"}
    kwargs = {key: (int(v) if key in ints else float(v)) for key, v in values.items()}
    return SyntheticSpec(**kwargs)


def _load_truth(args) -> dict[int, int]:
    if args.truth:
        truth = {}
        with open(args.truth, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise ValueError(f"truth line {lineno}: expected 2 fields")
                truth[int(parts[0])] = int(parts[1])
        return truth
    if args.data:
        _, _, seeds = load_mmkg_pair(args.data)
        return {int(a): int(b) for a, b in seeds.test_pairs}
    raise ValueError("debias-external needs --data or --truth for the ground truth")


def cmd_debias_external(args) -> int:
    opts = resolve_options(args, DEBIAS_DEFAULTS)
    rows = read_scores_tsv(args.scores)
    truth = _load_truth(args)
    beta = opts["beta"]
    tie = rows.te - beta * rows.nde

    ranks = []
    for query in np.unique(rows.query_ids):
        mask = rows.query_ids == query
        if int(query) not in truth:
            raise ValueError(f"no ground-truth counterpart for query {query}")
        ranks.append(rank_candidates(tie[mask], rows.candidate_ids[mask],
                                     truth[int(query)]))
    metrics = compute_metrics(np.array(ranks))
    out = _ensure_out_dir(args.out)
    write_metrics_tsv(os.path.join(out, "metrics.tsv"), metrics)
    write_snapshot(out, "debias-external", opts,
                   {"scores": str(args.scores), "out": out})
    print(format_metrics(metrics))
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "debias-external": cmd_debias_external,
}


def main(argv=None) -> int:
    threads = os.environ.get("CDMEA_THREADS")
    if threads:
        import torch

        torch.set_num_threads(max(1, int(threads)))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ValueError, argparse.ArgumentTypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
