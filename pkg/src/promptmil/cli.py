"""Command-line entry points: gen-prompts, gen-synthetic, train, eval, sweep.

Exit codes: 0 success, 1 runtime/data error, 2 usage error.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import csv
import sys
from pathlib import Path

from .config import (SWEEPABLE_KEYS, ConfigError, ExperimentConfig,
                     config_with, parse_experiment_config)
from .dataio import (SyntheticSpec, generate_synthetic, load_manifest,
                     sample_few_shot)
from .metrics import (AucUndefinedError, MetricEntry, aggregate_repeats,
                      compute_metrics, write_report)
from .model import init_params, load_checkpoint, save_checkpoint
from .prompts import (BackendError, FixtureBackend, HttpBackend, PromptBuildError,
                      build_prompt_pack, load_pack, load_templates, save_pack)
from .textenc import load_embedding_bundle
from .train import (evaluate, init_and_train, make_provider, write_history_csv)


def _add_gen_prompts(sub):
    p = sub.add_parser("gen-prompts", help="build a prompt pack via an LLM backend")
    p.add_argument("--classes", required=True,
                   help="comma-separated subtype names (at least two)")
    p.add_argument("--entities", type=int, default=8,
                   help="entities per scale (default 8)")
    p.add_argument("--backend", choices=["fixture", "http"], default="fixture")
    p.add_argument("--out", default="pack.json")
    p.add_argument("--templates", default=None, help="path to a query template file")
    p.add_argument("--base-url", default=None, help="chat API base URL (http backend)")
    p.add_argument("--model", default=None, help="model name (http backend)")
    p.set_defaults(func=cmd_gen_prompts)


def cmd_gen_prompts(args) -> int:
    subtypes = [c.strip() for c in args.classes.split(",") if c.strip()]
    if len(subtypes) < 2:
        raise ConfigError("--classes needs at least two comma-separated names")
    templates = load_templates(args.templates)
    if args.backend == "fixture":
        backend = FixtureBackend()
    else:
        if not args.base_url or not args.model:
            raise BackendError("http backend requires --base-url and --model")
        backend = HttpBackend(args.base_url, args.model)
    pack = build_prompt_pack(subtypes, args.entities, backend, templates)
    save_pack(pack, args.out)
    print(f"wrote {args.out}: {len(subtypes)} subtypes, "
          f"{args.entities} entities/scale")
    return 0


def _add_gen_synthetic(sub):
    p = sub.add_parser("gen-synthetic", help="generate a synthetic two-scale dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--entities", type=int, default=8)
    p.add_argument("--instances", type=int, default=48)
    p.add_argument("--bags-per-class", type=int, default=40)
    p.add_argument("--separation", type=float, default=6.0)
    p.add_argument("--dim", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_synthetic)


def cmd_gen_synthetic(args) -> int:
    spec = SyntheticSpec(n_classes=args.classes, n_entities=args.entities,
                         instances_per_bag=args.instances,
                         bags_per_class=args.bags_per_class,
                         separation=args.separation, dim=args.dim)
    manifest_path = generate_synthetic(spec, args.seed, args.out)
    print(f"wrote {manifest_path}")
    return 0


def _load_inputs(cfg: ExperimentConfig):
    manifest = load_manifest(cfg.manifest)
    pack = load_pack(cfg.prompt_pack) if cfg.prompt_pack else None
    bundle = (load_embedding_bundle(cfg.embedding_bundle)
              if cfg.embedding_bundle else None)
    return manifest, pack, bundle


def run_experiment(cfg: ExperimentConfig, setting: str = "default") -> dict:
    """Train cfg.run.repeats seeded repeats; returns the aggregate metrics."""
    manifest, pack, bundle = _load_inputs(cfg)
    out_root = Path(cfg.out_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    entries: list[MetricEntry] = []
    for i in range(cfg.run.repeats):
        rcfg = config_with(cfg.run, seed=cfg.run.seed + i)
        split = sample_few_shot(manifest, rcfg.shots, rcfg.seed,
                                rcfg.allow_short_class)
        result, provider = init_and_train(manifest, split, rcfg, pack=pack,
                                          bundle=bundle)
        repeat_dir = out_root / f"repeat_{i:02d}"
        repeat_dir.mkdir(parents=True, exist_ok=True)
        write_history_csv(result.history, repeat_dir / "history.csv")
        save_checkpoint(result.params, repeat_dir / "checkpoint")
        probs, labels = evaluate(manifest, split.test, provider, result.params, rcfg)
        try:
            entries.append(compute_metrics(probs, labels))
        except AucUndefinedError as err:
            entries.append(MetricEntry(auc=float("nan"), f1=err.f1, acc=err.acc))
    report = aggregate_repeats(entries)
    write_report(report, out_root, setting=setting, shots=cfg.run.shots)
    mean, std = report.mean(), report.std()
    return {"auc": mean.auc, "auc_std": std.auc, "f1": mean.f1, "f1_std": std.f1,
            "acc": mean.acc, "acc_std": std.acc}


def _add_train(sub):
    p = sub.add_parser("train", help="train from an experiment config file")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key")
    p.set_defaults(func=cmd_train)


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects KEY=VALUE, got {pair!r}")
        key, _, value = pair.partition("=")
        out[key.strip()] = value.strip()
    return out


def cmd_train(args) -> int:
    cfg = parse_experiment_config(args.config, _parse_overrides(args.set))
    summary = run_experiment(cfg)
    print(f"auc {summary['auc']:.3f}±{summary['auc_std']:.3f}  "
          f"f1 {summary['f1']:.3f}±{summary['f1_std']:.3f}  "
          f"acc {summary['acc']:.3f}±{summary['acc_std']:.3f}")
    return 0


def _add_eval(sub):
    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dump-traces", default=None, metavar="DIR",
                   help="write selection/attention/graph audit files here")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_eval)


def _dump_traces(out_dir: Path, manifest, ids, provider, params, run) -> None:
    from .aggregator import dump_graph
    from .entity_head import export_attention_csv
    from .model import forward_slide
    from .selection import export_selection_csv
    from .train import load_slide_set

    out_dir.mkdir(parents=True, exist_ok=True)
    slides = load_slide_set(manifest, ids, run, provider)
    embeds = provider.current()
    selection_rows, attention_rows = [], []
    for sid in ids:
        out = forward_slide(params, slides.bags[sid], embeds, run,
                            slides.selections[sid])
        for s, trace in out.scales.items():
            selection_rows.append((sid, s, trace.selection))
            for name, weights in zip(trace.entity_names, trace.attention_weights):
                if weights is not None:
                    attention_rows.append((sid, s, name, trace.selection.kept,
                                           weights.value))
        if out.graph is not None:
            dump_graph(out_dir / f"graph_{sid}.json", out.graph,
                       out.node_labels, out.gat_coefficients)
    export_selection_csv(out_dir / "selection.csv", selection_rows)
    export_attention_csv(out_dir / "attention.csv", attention_rows)


def cmd_eval(args) -> int:
    cfg = parse_experiment_config(args.config, _parse_overrides(args.set))
    manifest, pack, bundle = _load_inputs(cfg)
    split = sample_few_shot(manifest, cfg.run.shots, cfg.run.seed,
                            cfg.run.allow_short_class)
    params = init_params(manifest.dim, cfg.run)
    load_checkpoint(params, args.checkpoint)
    provider = make_provider(cfg.run, manifest.dim, params, pack, bundle)
    probs, labels = evaluate(manifest, split.test, provider, params, cfg.run)
    if args.dump_traces:
        _dump_traces(Path(args.dump_traces), manifest, split.test, provider,
                     params, cfg.run)
    try:
        entry = compute_metrics(probs, labels)
        print(f"auc {entry.auc:.3f}  f1 {entry.f1:.3f}  acc {entry.acc:.3f}")
    except AucUndefinedError as err:
        print(f"auc undefined  f1 {err.f1:.3f}  acc {err.acc:.3f}")
    return 0


def _add_sweep(sub):
    p = sub.add_parser("sweep", help="run one training experiment per value")
    p.add_argument("--config", required=True)
    p.add_argument("--key", required=True, choices=SWEEPABLE_KEYS)
    p.add_argument("--values", required=True,
                   help="comma-separated values for the swept key")
    p.add_argument("--parallel", type=int, default=1,
                   help="concurrent runs (default sequential)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_sweep)


def _sweep_one(payload: tuple[str, dict[str, str], str, str]) -> tuple[str, dict]:
    config_path, overrides, key, value = payload
    overrides = dict(overrides)
    overrides[key] = value
    cfg = parse_experiment_config(config_path, overrides)
    cfg.out_dir = str(Path(cfg.out_dir) / f"{key}_{value}")
    return value, run_experiment(cfg, setting=f"{key}={value}")


def cmd_sweep(args) -> int:
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values is empty")
    base_overrides = _parse_overrides(args.set)
    cfg = parse_experiment_config(args.config, base_overrides)  # early validation
    jobs = [(args.config, base_overrides, args.key, v) for v in values]
    if args.parallel > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.parallel) as ex:
            results = list(ex.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(j) for j in jobs]
    summary_path = Path(cfg.out_dir) / f"sweep_{args.key}.csv"
    summary_path.parent.mkdir(parents=True, exist_ok=True)
    with open(summary_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([args.key, "auc", "auc_std", "f1", "f1_std", "acc", "acc_std"])
        for value, summary in results:
            writer.writerow([value] + [f"{summary[k]:.6f}" for k in
                                       ("auc", "auc_std", "f1", "f1_std",
                                        "acc", "acc_std")])
    print(f"wrote {summary_path} ({len(results)} rows)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptmil",
        description="few-shot whole-slide classification on precomputed embeddings")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_gen_prompts(sub)
    _add_gen_synthetic(sub)
    _add_train(sub)
    _add_eval(sub)
    _add_sweep(sub)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 2
    try:
        return args.func(args)
    except (ConfigError, BackendError, PromptBuildError, FileNotFoundError,
            ValueError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
