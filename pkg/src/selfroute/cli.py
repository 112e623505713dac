"""Command-line interface.

Subcommands: build-dataset, collect-embeddings, train-router,
sweep-layers, evaluate, simulate, serve.  Every subcommand accepts
--seed, --config <file> (JSON defaults for its flags), and --json
(machine-readable output).  Given equal seeds, output is byte-identical
across runs: no timestamps, sorted keys.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

from .backend import (
    BackendSpec,
    GENERAL,
    Q32B_SHORT_ACCURACY,
    Q7B_SHORT_ACCURACY,
    REASONING,
    SyntheticBackend,
    general_synthetic_config,
    reasoning_synthetic_config,
)
from .dataset import (
    build_gradient,
    collect_labeled_examples,
    estimate_accuracy,
    read_difficulty_records,
    read_labeled_examples,
    write_difficulty_records,
    write_labeled_examples,
)
from .errors import ConfigError, SelfRouteError
from .gateway import (
    create_app,
    gateway_config_to_dict,
    load_gateway_config,
    serve as gateway_serve,
)
from .policy import (
    DatasetResult,
    RoutePolicyConfig,
    answer,
    render_report_table,
    report,
    write_route_results,
)
from .preinference import PreinferenceConfig
from .router import (
    TrainConfig,
    load_router,
    save_router,
    sweep_layers,
    train,
)
from .simulator import (
    RouterPolicy,
    comparison_to_dict,
    fit_router_for_world,
    make_world,
    make_world_spec,
    mint_tagged_query,
    render_comparison_table,
    run_comparison,
)

WORLD_ACCURACY = {"q7b": Q7B_SHORT_ACCURACY, "q32b": Q32B_SHORT_ACCURACY}


def _emit(args: argparse.Namespace, payload: dict, human: str) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True, indent=2))
    else:
        print(human)


def _cfgval(args: argparse.Namespace, name: str, default):
    """Flag value, falling back to --config file entries, then the default."""
    value = getattr(args, name, None)
    if value is not None:
        return value
    config = getattr(args, "_config_data", None) or {}
    return config.get(name, default)


def _general_backend(world: str, seed: int, separation: float) -> SyntheticBackend:
    config = general_synthetic_config(
        seed, accuracy=dict(WORLD_ACCURACY[world]), class_separation=separation
    )
    return SyntheticBackend(BackendSpec(f"synthetic-{world}", GENERAL), config)


def _reasoning_backend(seed: int, separation: float) -> SyntheticBackend:
    config = reasoning_synthetic_config(seed, class_separation=separation)
    return SyntheticBackend(
        BackendSpec("synthetic-reasoning", REASONING, default_max_tokens=32768), config
    )


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_build_dataset(args: argparse.Namespace) -> int:
    world = _cfgval(args, "world", "q7b")
    n_per_level = int(_cfgval(args, "n_per_level", 40))
    trials = int(_cfgval(args, "trials", 8))
    quota = int(_cfgval(args, "quota_per_level", 20))
    separation = float(_cfgval(args, "separation", 4.0))
    backend = _general_backend(world, args.seed, separation)

    queries = [
        mint_tagged_query(level, i, id_prefix=f"{world}-L")
        for level in (1, 2, 3, 4, 5)
        for i in range(n_per_level)
    ]
    by_id = {q.id: q for q in queries}
    records = [estimate_accuracy(q, backend, trials, args.seed) for q in queries]
    dataset = build_gradient(records, quota, args.seed)

    out = _cfgval(args, "out", None)
    if out:
        rows = [(by_id[r.query_id], r) for r in dataset.all_records()]
        write_difficulty_records(out, rows)

    counts = dataset.counts()
    payload = {
        "command": "build-dataset",
        "world": world,
        "seed": args.seed,
        "trials": trials,
        "candidates": len(records),
        "counts": {str(k): v for k, v in counts.items()},
        "mean_difficulty": {str(k): dataset.mean_difficulty(k) for k in counts},
        "total": sum(counts.values()),
        "out": str(out) if out else None,
    }
    lines = [f"gradient dataset over {len(records)} candidates ({world}, k={trials})"]
    for level in sorted(counts):
        lines.append(
            f"  level {level}: {counts[level]:4d} records, "
            f"mean difficulty {dataset.mean_difficulty(level):.3f}"
        )
    if out:
        lines.append(f"wrote {sum(counts.values())} records to {out}")
    _emit(args, payload, "\n".join(lines))
    return 0


def cmd_collect_embeddings(args: argparse.Namespace) -> int:
    dataset_path = _cfgval(args, "dataset", None)
    out = _cfgval(args, "out", None)
    if not dataset_path or not out:
        raise ConfigError("collect-embeddings needs --dataset and --out")
    world = _cfgval(args, "world", "q7b")
    separation = float(_cfgval(args, "separation", 4.0))
    budget = int(_cfgval(args, "budget", 256))
    layer = _cfgval(args, "layer", None)
    template_file = _cfgval(args, "probe_prompt_file", None)

    pre_kwargs: dict = {"budget_tokens": budget}
    if layer is not None:
        pre_kwargs["layer_selection"] = int(layer)
    if template_file:
        pre_kwargs["prompt_template"] = Path(template_file).read_text("utf-8")
    pre = PreinferenceConfig(**pre_kwargs)

    backend = _general_backend(world, args.seed, separation)
    rows = read_difficulty_records(dataset_path)
    queries = [query for query, _ in rows]
    examples = collect_labeled_examples(queries, backend, pre)
    write_labeled_examples(out, examples)

    positives = sum(int(e.label) for e in examples)
    mean_probe = sum(e.embedding.probe_tokens for e in examples) / len(examples)
    payload = {
        "command": "collect-embeddings",
        "seed": args.seed,
        "count": len(examples),
        "layers": examples[0].embedding.num_layers,
        "dim": examples[0].embedding.dim,
        "positive_rate": positives / len(examples),
        "mean_probe_tokens": mean_probe,
        "out": str(out),
    }
    human = (
        f"collected {len(examples)} embeddings "
        f"({payload['layers']} layers x dim {payload['dim']}), "
        f"positive rate {payload['positive_rate']:.3f}, "
        f"mean probe tokens {mean_probe:.1f}\nwrote {out}"
    )
    _emit(args, payload, human)
    return 0


def _train_config(args: argparse.Namespace) -> TrainConfig:
    return TrainConfig(
        epochs=int(_cfgval(args, "epochs", 5)),
        batch_size=int(_cfgval(args, "batch_size", 32)),
        learning_rate=float(_cfgval(args, "lr", 1e-4)),
        seed=args.seed,
        shuffle=not bool(_cfgval(args, "no_shuffle", False)),
        standardize=bool(_cfgval(args, "standardize", False)),
    )


def cmd_train_router(args: argparse.Namespace) -> int:
    examples_path = _cfgval(args, "examples", None)
    if not examples_path:
        raise ConfigError("train-router needs --examples")
    layer = int(_cfgval(args, "layer", 6))
    config = _train_config(args)
    examples = read_labeled_examples(examples_path)
    result = train(examples, layer, config)
    out = _cfgval(args, "out", None)
    if out:
        save_router(out, result.model)
    payload = {
        "command": "train-router",
        "seed": args.seed,
        "layer": layer,
        "dim": result.model.dim,
        "n": len(examples),
        "epochs": config.epochs,
        "batch_size": config.batch_size,
        "lr": config.learning_rate,
        "final_loss": result.loss_trace[-1],
        "loss_trace": list(result.loss_trace),
        "trained_on": result.model.trained_on,
        "out": str(out) if out else None,
    }
    human = (
        f"trained layer-{layer} router on {len(examples)} examples: "
        f"loss {result.loss_trace[0]:.3f} -> {result.loss_trace[-1]:.3f}"
        + (f"\nwrote {out}" if out else "")
    )
    _emit(args, payload, human)
    return 0


def cmd_sweep_layers(args: argparse.Namespace) -> int:
    examples_path = _cfgval(args, "examples", None)
    if not examples_path:
        raise ConfigError("sweep-layers needs --examples")
    train_fraction = float(_cfgval(args, "train_fraction", 0.8))
    config = _train_config(args)
    examples = read_labeled_examples(examples_path)
    result = sweep_layers(examples, train_fraction, config)
    out = _cfgval(args, "out", None)
    if out:
        save_router(out, result.models[result.best_layer])
    payload = {
        "command": "sweep-layers",
        "seed": args.seed,
        "n": len(examples),
        "train_fraction": train_fraction,
        "best_layer": result.best_layer,
        "per_layer": {
            str(layer): metrics.to_dict() for layer, metrics in sorted(result.per_layer.items())
        },
        "out": str(out) if out else None,
    }
    lines = ["layer  accuracy  precision  recall    f1"]
    for layer, metrics in sorted(result.per_layer.items()):
        marker = " <- best" if layer == result.best_layer else ""
        lines.append(
            f"{layer:5d}  {metrics.accuracy:8.3f}  {metrics.precision:9.3f}  "
            f"{metrics.recall:6.3f}  {metrics.f1:5.3f}{marker}"
        )
    if out:
        lines.append(f"wrote best-layer router to {out}")
    _emit(args, payload, "\n".join(lines))
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    dataset_path = _cfgval(args, "dataset", None)
    router_path = _cfgval(args, "router", None)
    if not dataset_path or not router_path:
        raise ConfigError("evaluate needs --dataset and --router")
    world = _cfgval(args, "world", "q7b")
    separation = float(_cfgval(args, "separation", 4.0))
    threshold = float(_cfgval(args, "threshold", 0.5))
    budget = int(_cfgval(args, "budget", 256))

    router = load_router(router_path)
    general = _general_backend(world, args.seed, separation)
    reasoning = _reasoning_backend(args.seed, separation)
    policy_config = RoutePolicyConfig(
        router=router,
        general=general,
        reasoning=reasoning,
        preinference=PreinferenceConfig(budget_tokens=budget),
        route_threshold=threshold,
    )

    rows = read_difficulty_records(dataset_path)
    results = []
    reference_tokens: dict[str, list[int]] = {}
    by_source: dict[str, list] = {}
    for query, _record in rows:
        res = answer(query, policy_config)
        results.append(res)
        by_source.setdefault(query.source, []).append(res)
        long_res = reasoning.generate(query.text, reasoning.spec.default_max_tokens)
        reference_tokens.setdefault(query.source, []).append(long_res.completion_tokens)

    per_dataset = {}
    sizes = {}
    reference = {}
    for source in sorted(by_source):
        group = by_source[source]
        sizes[source] = len(group)
        accuracy = 100.0 * sum(
            1 for r in group if r.outcome.correct
        ) / len(group)
        mean_tokens = (
            sum(r.ledger.probe_tokens + r.ledger.answer_completion_tokens for r in group)
            / len(group)
        )
        per_dataset[source] = DatasetResult(accuracy=accuracy, mean_tokens=mean_tokens)
        reference[source] = sum(reference_tokens[source]) / len(reference_tokens[source])

    eval_report = report(per_dataset, sizes, reference)
    out_results = _cfgval(args, "out_results", None)
    if out_results:
        write_route_results(out_results, results)
    out_report = _cfgval(args, "out_report", None)
    if out_report:
        Path(out_report).write_text(
            json.dumps(eval_report.to_dict(), sort_keys=True, indent=2) + "\n", "utf-8"
        )

    short = sum(1 for r in results if r.outcome.path == "short")
    payload = {
        "command": "evaluate",
        "seed": args.seed,
        "threshold": threshold,
        "n": len(results),
        "short_count": short,
        "long_count": len(results) - short,
        "report": eval_report.to_dict(),
        "out_results": str(out_results) if out_results else None,
        "out_report": str(out_report) if out_report else None,
    }
    human = render_report_table(eval_report) + (
        f"\nrouted short {short}/{len(results)} at threshold {threshold}"
    )
    _emit(args, payload, human)
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    world_name = _cfgval(args, "world", "q7b")
    n_per_level = int(_cfgval(args, "n_per_level", 500))
    separation = float(_cfgval(args, "separation", 4.0))
    threshold = float(_cfgval(args, "threshold", 0.5))
    layer = _cfgval(args, "layer", None)

    spec = make_world_spec(
        seed=args.seed,
        n_per_level=n_per_level,
        general_accuracy=dict(WORLD_ACCURACY[world_name]),
        separation=separation,
    )
    world = make_world(spec)
    fit = fit_router_for_world(spec, layer=int(layer) if layer is not None else None)
    policy = RouterPolicy(fit.model, threshold=threshold)
    comparison = run_comparison(world, policy)

    csv_path = _cfgval(args, "csv", None)
    if csv_path:
        from .simulator import per_level_rows

        with Path(csv_path).open("w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["policy", "level", "n", "accuracy", "mean_tokens"]
            )
            writer.writeheader()
            writer.writerows(per_level_rows(comparison))

    payload = {
        "command": "simulate",
        "world": world_name,
        "seed": args.seed,
        "n_per_level": n_per_level,
        "separation": separation,
        "threshold": threshold,
        "router_layer": fit.model.layer,
        "router_final_loss": fit.loss_trace[-1],
        "policies": comparison_to_dict(comparison),
        "csv": str(csv_path) if csv_path else None,
    }
    human = render_comparison_table(comparison)
    if csv_path:
        human += f"\nwrote per-level stats to {csv_path}"
    _emit(args, payload, human)
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    config_path = getattr(args, "config", None)
    if not config_path:
        raise ConfigError("serve needs --config <gateway config file>")
    config = load_gateway_config(config_path)
    host = getattr(args, "host", None)
    port = getattr(args, "port", None)
    if host or port:
        listen = f"{host or config.host}:{port or config.port}"
        config = replace(config, listen=listen)
    if getattr(args, "check", False):
        create_app(config)
        payload = {
            "command": "serve",
            "seed": args.seed,
            "check": "ok",
            "config": gateway_config_to_dict(config),
        }
        _emit(args, payload, f"config ok; would listen on {config.listen}")
        return 0
    gateway_serve(config)
    return 0


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--seed", type=int, default=0, help="root seed for all randomness")
    sub.add_argument("--config", type=str, default=None, help="JSON file of flag defaults")
    sub.add_argument("--json", action="store_true", help="emit machine-readable JSON")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="selfroute",
        description="Route queries between short- and long-CoT backends.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("build-dataset", help="estimate difficulties, sample a gradient")
    _add_common(p)
    p.add_argument("--world", choices=sorted(WORLD_ACCURACY), default=None)
    p.add_argument("--n-per-level", type=int, default=None)
    p.add_argument("-k", "--trials", type=int, default=None)
    p.add_argument("--quota-per-level", type=int, default=None)
    p.add_argument("--separation", type=float, default=None)
    p.add_argument("--out", type=str, default=None)
    p.set_defaults(func=cmd_build_dataset)

    p = commands.add_parser("collect-embeddings", help="probe and label a dataset")
    _add_common(p)
    p.add_argument("--dataset", type=str, default=None)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--world", choices=sorted(WORLD_ACCURACY), default=None)
    p.add_argument("--separation", type=float, default=None)
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--layer", type=int, default=None)
    p.add_argument("--probe-prompt-file", type=str, default=None)
    p.set_defaults(func=cmd_collect_embeddings)

    p = commands.add_parser("train-router", help="train one linear router")
    _add_common(p)
    p.add_argument("--examples", type=str, default=None)
    p.add_argument("--layer", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--no-shuffle", action="store_true")
    p.add_argument("--standardize", action="store_true")
    p.add_argument("--out", type=str, default=None)
    p.set_defaults(func=cmd_train_router)

    p = commands.add_parser("sweep-layers", help="train per layer, pick the best")
    _add_common(p)
    p.add_argument("--examples", type=str, default=None)
    p.add_argument("--train-fraction", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--standardize", action="store_true")
    p.add_argument("--out", type=str, default=None)
    p.set_defaults(func=cmd_sweep_layers)

    p = commands.add_parser("evaluate", help="route a dataset, report table arithmetic")
    _add_common(p)
    p.add_argument("--dataset", type=str, default=None)
    p.add_argument("--router", type=str, default=None)
    p.add_argument("--world", choices=sorted(WORLD_ACCURACY), default=None)
    p.add_argument("--separation", type=float, default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--out-results", type=str, default=None)
    p.add_argument("--out-report", type=str, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = commands.add_parser("simulate", help="four-policy comparison on a synthetic world")
    _add_common(p)
    p.add_argument("--world", choices=sorted(WORLD_ACCURACY), default=None)
    p.add_argument("--n-per-level", type=int, default=None)
    p.add_argument("--separation", type=float, default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--layer", type=int, default=None)
    p.add_argument("--csv", type=str, default=None)
    p.set_defaults(func=cmd_simulate)

    p = commands.add_parser("serve", help="run the routing gateway")
    _add_common(p)
    p.add_argument("--host", type=str, default=None)
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--check", action="store_true", help="validate config and exit")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    args._config_data = {}
    if args.config and args.command != "serve":
        try:
            args._config_data = json.loads(Path(args.config).read_text("utf-8"))
        except FileNotFoundError:
            print(f"error: config file not found: {args.config}", file=sys.stderr)
            return 1
        except ValueError as exc:
            print(f"error: config file invalid JSON: {exc}", file=sys.stderr)
            return 1

    try:
        return args.func(args)
    except SelfRouteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
