"""Command-line pipeline: prepare, build-graph, train, eval, diagnose, sweep.

Every command resolves its configuration as defaults < --config JSON <
explicit flags, writes the resolved configuration into a manifest next to
its artifacts, and is deterministic given the same inputs and seed (only
manifest timestamps differ between reruns).

Report-producing commands write machine-readable TSV/JSON alongside
rendered PNG figures.

Exit codes: 0 success, 2 user/config error, 3 artifact/format error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import evaluation, graph, plots, training
from .config import RunConfig, write_manifest
from .data import (SPLITS_FILE, k_core_filter, load_dataset_dir,
                   load_interactions, split_dataset)
from .errors import ConfigError, RecommenderError
from .fileformats import (read_features, read_graph, write_embeddings,
                          write_features, write_graph)
from .identity import semantic_alignment_score
from .model import GraphRecommender

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USER = 2
EXIT_ARTIFACT = 3
EXIT_NUMERIC = 4

FEATURE_FILES = {"text": "features_text.mmf", "visual": "features_visual.mmf"}
GRAPH_FILE = "adjacency.mgr"
CHECKPOINT_FILE = "checkpoint.mck"

# CLI flag name -> RunConfig field
_CONFIG_FLAGS = {
    "--d": "d", "--alpha-p": "alpha_p", "--alpha-m": "alpha_m",
    "--layers": "n_layers", "--tau": "tau", "--tau-align": "tau_align",
    "--tau-disc": "tau_disc", "--lambda-m": "lambda_modal",
    "--lambda-s": "lambda_structural", "--lambda-cf": "lambda_cf",
    "--eps-cf": "eps_cf", "--eta": "eta", "--knn-k": "k_base",
    "--k-user": "k_user", "--kcf": "k_cf", "--block-size": "block_size",
    "--n-neg": "n_neg", "--lr": "lr", "--batch-size": "batch_size",
    "--max-epochs": "max_epochs", "--patience": "patience",
    "--eval-every": "eval_every", "--seed": "seed", "--k-core": "k_core",
    "--tail-quantile": "tail_quantile", "--ablation": "ablation",
}
_INT_FIELDS = {"d", "n_layers", "k_base", "k_user", "k_cf", "block_size", "n_neg",
               "batch_size", "max_epochs", "patience", "eval_every", "seed", "k_core"}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON file with config overrides")
    for flag, field in _CONFIG_FLAGS.items():
        if field == "ablation":
            parser.add_argument(flag, choices=training.ABLATION_VARIANTS, default=None)
        elif field in _INT_FIELDS:
            parser.add_argument(flag, dest=field, type=int, default=None)
        else:
            parser.add_argument(flag, dest=field, type=float, default=None)
    parser.add_argument("--ks", default=None,
                        help="comma-separated metric cut-offs, e.g. 10,20")
    parser.add_argument("--ratios", default=None,
                        help="train,valid,test split ratios, e.g. 0.8,0.1,0.1")
    parser.add_argument("--boundaries", default=None,
                        help="sparsity group boundaries, e.g. 5,10,20")


def _resolve_config(args) -> RunConfig:
    overrides = {}
    for field in _CONFIG_FLAGS.values():
        value = getattr(args, field, None)
        if value is not None:
            overrides[field] = value
    if getattr(args, "ks", None):
        overrides["ks"] = tuple(int(v) for v in str(args.ks).split(","))
    if getattr(args, "ratios", None):
        overrides["split_ratios"] = tuple(float(v) for v in str(args.ratios).split(","))
    if getattr(args, "boundaries", None):
        overrides["sparsity_boundaries"] = tuple(
            int(v) for v in str(args.boundaries).split(","))
    return RunConfig.resolve(config_path=getattr(args, "config", None),
                             overrides=overrides)


def _write_tsv(path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(str(c) for c in row) + "\n")


def _load_prepared(data_dir):
    data_dir = Path(data_dir)
    dataset = load_dataset_dir(data_dir)
    for modality, fname in FEATURE_FILES.items():
        values = read_features(data_dir / fname, expected_rows=dataset.n_items)
        dataset.attach_features(modality, values)
    return dataset


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_prepare(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    table = load_interactions(args.interactions, has_header=_header_choice(args))
    raw_items = table.item_count
    features = {mod: read_features(path, expected_rows=raw_items)
                for mod, path in (("text", args.features_text),
                                  ("visual", args.features_visual))}
    filtered = k_core_filter(table, cfg.k_core)
    dataset = split_dataset(filtered, ratios=cfg.split_ratios, seed=cfg.seed)
    # re-align feature rows with the filtered dense item indices
    kept_rows = None
    if table.item_ids != filtered.item_ids:
        raw_index = {item_id: row for row, item_id in enumerate(table.item_ids)}
        kept_rows = [raw_index[item_id] for item_id in filtered.item_ids]
    out.mkdir(parents=True, exist_ok=True)
    from .data import save_dataset_dir
    save_dataset_dir(dataset, out)
    for modality, fname in FEATURE_FILES.items():
        values = features[modality]
        if kept_rows is not None:
            values = values[kept_rows]
        write_features(out / fname, values)
    write_manifest(out / "manifest.json", cfg,
                   stage="prepare",
                   inputs={"interactions": str(args.interactions),
                           "features_text": str(args.features_text),
                           "features_visual": str(args.features_visual)},
                   counts={"users": dataset.n_users, "items": dataset.n_items,
                           "interactions": dataset.interactions.n_edges})
    print(f"prepared {dataset.n_users} users, {dataset.n_items} items, "
          f"{dataset.interactions.n_edges} interactions -> {out / SPLITS_FILE}")
    return EXIT_OK


def _header_choice(args):
    return {"auto": None, "yes": True, "no": False}[args.has_header]


def cmd_build_graph(args) -> int:
    cfg = _resolve_config(args)
    dataset = _load_prepared(args.data)
    bundle = graph.build_graphs(dataset, cfg.graph_config(), cfg.alpha_m)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_graph(out / GRAPH_FILE, bundle.normalized.mat)
    stats = evaluation.debias_report(bundle.base, bundle.counterfactual, dataset,
                                     tail_quantile=cfg.tail_quantile)
    (out / "bias_stats.json").write_text(
        json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_tsv(out / "bias_stats.tsv", ["graph", "avg_pop", "tail_ratio"],
               [[name, s["avg_pop"], s["tail_ratio"]] for name, s in stats.items()])
    plots.save_bias_comparison(stats, out / "bias_comparison.png")
    write_manifest(out / "manifest.json", cfg, stage="build-graph",
                   data_dir=str(args.data),
                   graph={"nodes": bundle.adjacency.rows,
                          "nnz": bundle.adjacency.nnz})
    print(f"graph: {bundle.adjacency.rows} nodes, {bundle.adjacency.nnz} edges "
          f"-> {out / GRAPH_FILE}")
    print(f"bias stats: base avg_pop={stats['base']['avg_pop']:.4f} "
          f"cf avg_pop={stats['counterfactual']['avg_pop']:.4f}")
    return EXIT_OK


def _graph_for_training(args, cfg, dataset):
    """Load a pre-built operator, or build in-process when the ablation
    invalidates a stored graph (different eta or substituted features)."""
    graph_path = getattr(args, "graph", None)
    if cfg.ablation in ("no_cna", "no_mm") and graph_path:
        raise ConfigError(
            f"ablation {cfg.ablation!r} changes graph construction; "
            f"omit --graph so the graph is rebuilt to match")
    if graph_path:
        return read_graph(Path(graph_path) / GRAPH_FILE
                          if Path(graph_path).is_dir() else graph_path)
    return graph.build_graphs(dataset, cfg.graph_config(), cfg.alpha_m).normalized.mat


def _resolve_ablated(args) -> RunConfig:
    cfg = _resolve_config(args)
    return training.ablation_config(cfg.ablation, cfg)


def cmd_train(args) -> int:
    cfg = _resolve_ablated(args)
    dataset = training.apply_ablation(_load_prepared(args.data), cfg)
    operator = _graph_for_training(args, cfg, dataset)
    model = training.build_model(dataset, cfg)
    trainer = training.TrainerConfig.from_run(cfg)
    result = training.train(dataset, operator, model, trainer, cfg.loss_weights())

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    training.save_checkpoint(out / CHECKPOINT_FILE, model.params)
    with open(out / "history.jsonl", "w", encoding="utf-8") as fh:
        for record in result.history:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    if result.history:
        plots.save_training_curves(result.history, out / "training_curves.png")
    best = result.best_metric if np.isfinite(result.best_metric) else None
    write_manifest(out / "manifest.json", cfg, stage="train",
                   data_dir=str(args.data),
                   graph=str(args.graph) if args.graph else "built in-process",
                   result={"best_epoch": result.best_epoch,
                           "best_val_recall@20": best,
                           "epochs_run": result.epochs_run})
    print(f"trained {result.epochs_run} epochs; best val Recall@20 = "
          f"{best if best is not None else 'n/a'} at epoch {result.best_epoch}")
    print(f"checkpoint -> {out / CHECKPOINT_FILE}")
    return EXIT_OK


def _restore_model(cfg: RunConfig, dataset, checkpoint_path) -> GraphRecommender:
    model = training.build_model(dataset, cfg)
    if checkpoint_path:
        training.load_checkpoint(checkpoint_path, model.params)
    return model


def cmd_eval(args) -> int:
    cfg = _resolve_ablated(args)
    dataset = training.apply_ablation(_load_prepared(args.data), cfg)
    operator = _graph_for_training(args, cfg, dataset)
    model = _restore_model(cfg, dataset, args.checkpoint)
    user_emb, item_emb = model.final_embeddings(operator)
    split = {"test": 2, "valid": 1}[args.split]
    report = evaluation.evaluate(user_emb, item_emb, dataset, ks=cfg.ks, split=split)
    if args.boundaries or cfg.sparsity_boundaries:
        report.per_group = evaluation.evaluate_per_group(
            user_emb, item_emb, dataset, cfg.sparsity_boundaries, ks=cfg.ks, split=split)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json() + "\n", encoding="utf-8")
    rows = [[k, report.recall[k], report.ndcg[k]] for k in sorted(report.recall)]
    _write_tsv(out / "metrics.tsv", ["k", "recall", "ndcg"], rows)
    if report.per_group:
        grows = [[label, body["n_users"], k, body["recall"][str(k)], body["ndcg"][str(k)]]
                 for label, body in report.per_group.items()
                 for k in sorted(int(s) for s in body["recall"])]
        _write_tsv(out / "metrics_per_group.tsv",
                   ["group", "n_users", "k", "recall", "ndcg"], grows)
        plots.save_group_bars(report.per_group, max(cfg.ks),
                              out / "group_recall.png")
    plots.save_metric_bars(report.recall, report.ndcg, out / "metric_bars.png")
    write_manifest(out / "manifest.json", cfg, stage="eval",
                   data_dir=str(args.data), split=args.split,
                   checkpoint=str(args.checkpoint) if args.checkpoint else None,
                   metrics=report.to_dict())
    for k in sorted(report.recall):
        print(f"recall@{k} = {report.recall[k]:.5f}   ndcg@{k} = {report.ndcg[k]:.5f}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    cfg = _resolve_ablated(args)
    dataset = training.apply_ablation(_load_prepared(args.data), cfg)
    operator = _graph_for_training(args, cfg, dataset)
    model = _restore_model(cfg, dataset, args.checkpoint)

    # identity variants against the fused content anchors, item rows only
    gated = model.forward(operator)
    model_static = GraphRecommender(
        params=model.params, x_text=model.x_text, x_visual=model.x_visual,
        pe=model.pe, n_users=model.n_users, n_items=model.n_items,
        alpha_p=model.alpha_p, alpha_m=model.alpha_m, n_layers=model.n_layers,
        gates_enabled=False)
    static = model_static.forward(operator)
    items = slice(model.n_users, None)
    anchors = gated.anchors.data[items]
    alignment = {
        "static_pe": semantic_alignment_score(static.identity.e0.data[items], anchors),
        "gated_pe": semantic_alignment_score(gated.identity.e0.data[items], anchors),
    }

    bundle = graph.build_graphs(dataset, cfg.graph_config(), cfg.alpha_m)
    bias = evaluation.debias_report(bundle.base, bundle.counterfactual, dataset,
                                    tail_quantile=cfg.tail_quantile)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"alignment": alignment, "bias": bias}
    (out / "diagnostics.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_tsv(out / "diagnostics.tsv", ["measure", "variant", "value"],
               [["alignment", name, val] for name, val in alignment.items()] +
               [[f"bias_{key}", name, val] for name, stats in bias.items()
                for key, val in stats.items()])
    plots.save_alignment_bars(alignment, out / "alignment_scores.png")
    plots.save_bias_comparison(bias, out / "bias_comparison.png")
    final = gated.propagation.final.data
    write_embeddings(out / "embeddings.mem", {
        "final_users": final[:model.n_users],
        "final_items": final[model.n_users:],
        "identity_items": gated.identity.e0.data[items],
        "anchors_items": anchors,
    })
    write_manifest(out / "manifest.json", cfg, stage="diagnose",
                   data_dir=str(args.data),
                   checkpoint=str(args.checkpoint) if args.checkpoint else None,
                   diagnostics=payload)
    print(f"alignment: static_pe={alignment['static_pe']:.4f} "
          f"gated_pe={alignment['gated_pe']:.4f}")
    print(f"bias: base avg_pop={bias['base']['avg_pop']:.4f} "
          f"cf avg_pop={bias['counterfactual']['avg_pop']:.4f}")
    return EXIT_OK


def _parse_sweep_specs(specs: list[str]) -> dict[str, list]:
    valid = {f.name for f in fields(RunConfig)}
    aliases = {flag.lstrip("-").replace("-", "_"): field
               for flag, field in _CONFIG_FLAGS.items()}
    grid: dict[str, list] = {}
    for spec in specs:
        if "=" not in spec:
            raise ConfigError(f"sweep spec {spec!r} must look like name=v1,v2")
        name, _, raw = spec.partition("=")
        name = name.strip()
        name = aliases.get(name, name)
        if name not in valid:
            raise ConfigError(f"unknown sweep parameter {name!r}")
        cast = int if name in _INT_FIELDS else float
        grid[name] = [cast(v) for v in raw.split(",") if v]
        if not grid[name]:
            raise ConfigError(f"sweep spec {spec!r} lists no values")
    if not grid:
        raise ConfigError("sweep requires at least one --sweep spec")
    return grid


def cmd_sweep(args) -> int:
    base_cfg = _resolve_config(args)
    grid = _parse_sweep_specs(args.sweep)
    names = sorted(grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for index, combo in enumerate(itertools.product(*(grid[n] for n in names))):
        assignment = dict(zip(names, combo))
        cell_cfg = training.ablation_config(
            base_cfg.ablation,
            RunConfig.resolve(overrides={**base_cfg.to_dict(), **assignment}))
        tag = "_".join(f"{n}={v:g}" for n, v in assignment.items())
        cell_dir = out / f"cell_{index:03d}_{tag}"
        cell_dir.mkdir(parents=True, exist_ok=True)
        dataset = training.apply_ablation(_load_prepared(args.data), cell_cfg)
        operator = graph.build_graphs(dataset, cell_cfg.graph_config(),
                                      cell_cfg.alpha_m).normalized.mat
        model = training.build_model(dataset, cell_cfg)
        result = training.train(dataset, operator, model,
                                training.TrainerConfig.from_run(cell_cfg),
                                cell_cfg.loss_weights())
        user_emb, item_emb = model.final_embeddings(operator)
        report = evaluation.evaluate(user_emb, item_emb, dataset, ks=cell_cfg.ks)
        training.save_checkpoint(cell_dir / CHECKPOINT_FILE, model.params)
        with open(cell_dir / "history.jsonl", "w", encoding="utf-8") as fh:
            for record in result.history:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        best = result.best_metric if np.isfinite(result.best_metric) else None
        write_manifest(cell_dir / "manifest.json", cell_cfg, stage="sweep-cell",
                       cell={"index": index, **assignment},
                       result={"best_epoch": result.best_epoch,
                               "best_val_recall@20": best,
                               "test_metrics": report.to_dict()})
        row = dict(assignment)
        row["val_recall@20"] = best if best is not None else float("nan")
        for k in sorted(report.recall):
            row[f"test_recall@{k}"] = report.recall[k]
            row[f"test_ndcg@{k}"] = report.ndcg[k]
        rows.append(row)
        print(f"cell {index}: {tag} -> val recall@20 = {row['val_recall@20']}")

    columns = names + sorted(set().union(*(set(r) - set(names) for r in rows)))
    _write_tsv(out / "summary.tsv", columns,
               [[row.get(c, "") for c in columns] for row in rows])
    metric = f"test_recall@{max(base_cfg.ks)}"
    plots.save_sweep_grid(rows, metric, names[0],
                          names[1] if len(names) > 1 else None,
                          out / "sweep_grid.png")
    write_manifest(out / "manifest.json", base_cfg, stage="sweep",
                   grid={n: grid[n] for n in names}, cells=len(rows))
    print(f"swept {len(rows)} cells -> {out / 'summary.tsv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmgraphrec",
        description="ID-free multimodal graph recommender pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="filter, split, and index raw interactions")
    p.add_argument("--interactions", required=True)
    p.add_argument("--features-text", required=True)
    p.add_argument("--features-visual", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--has-header", choices=("auto", "yes", "no"), default="auto")
    _add_config_flags(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("build-graph", help="construct and normalize the graph")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("train", help="optimize the model with early stopping")
    p.add_argument("--data", required=True)
    p.add_argument("--graph", default=None,
                   help="directory or file from build-graph; omit to build in-process")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="full-ranking Top-K evaluation")
    p.add_argument("--data", required=True)
    p.add_argument("--graph", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("test", "valid"), default="test")
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="alignment and debiasing diagnostics")
    p.add_argument("--data", required=True)
    p.add_argument("--graph", default=None)
    p.add_argument("--checkpoint", default=None,
                   help="optional; without it the freshly initialized model is probed")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("sweep", help="cartesian hyperparameter grid, sequential cells")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sweep", action="append", default=[],
                   help="name=v1,v2 (repeatable; grid is the cartesian product)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as err:
        print(f"error: missing file: {err.filename or err}", file=sys.stderr)
        return EXIT_USER
    except json.JSONDecodeError as err:
        print(f"error: invalid JSON: {err}", file=sys.stderr)
        return EXIT_USER
    except RecommenderError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ARTIFACT if err.artifact else err.exit_code
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
