"""Command-line pipeline: ingest raw inputs, fit models, report, synthesize cities.

Exit codes: 0 success, 1 validation failure, 2 I/O failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import pandas as pd

from .app_usage import (
    EntropyFilter,
    build_mode_association,
    log_odds_dirichlet,
    read_associations,
    usage_matrix,
)
from .fusion import (
    DATA_CONFIGURATIONS,
    ModeSplitFusion,
    _configuration_name,
    compare_configurations,
    configure_graph,
    macro_totals,
    mode_shares,
    updated_mode_split,
)
from .io import (
    MalformedInputError,
    PipelineManifest,
    RelationEntry,
    load_graph,
    read_events,
    read_lines,
    read_manifest,
    read_mapping,
    read_matrix,
    read_stats,
    read_towers,
    read_usage,
    write_manifest,
    write_matrix,
)
from .mobility import (
    SpeedRangeScheme,
    build_municipality_waypoint,
    build_speed_matrices,
    extract_trips,
    filter_trips,
    tfidf,
)
from .mode_priors import MODES, check_mode_split, naive_ratio, project_mode_split
from .relation_graph import GraphError, validate
from .trifactor import FactorSet, FitReport

log = logging.getLogger("modefusion")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class ValidationFailure(Exception):
    """Inputs were read but do not form a usable graph or model."""


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _write_csv(frame: pd.DataFrame, path: Path, **kwargs) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, lineterminator="\n", float_format=None, **kwargs)


def _output_dir(args, manifest: PipelineManifest) -> Path:
    if args.out:
        return Path(args.out)
    if manifest.output is None:
        raise FileNotFoundError("no output directory: pass --out or set 'output' in the manifest")
    return manifest.output


def _configuration(args, settings) -> str:
    name = args.data_configuration or settings.get("data_configuration", "ALL")
    return _configuration_name(name)


def _fit_dir(out: Path, configuration: str) -> Path:
    return out / f"fit-{configuration.lower().replace('_', '-')}"


# ---------------------------------------------------------------- ingest

def run_ingest(manifest: PipelineManifest, out: Path, settings: dict) -> dict:
    """Build the derived relations and the combined graph manifest in ``out``."""
    manifest.require("relations", "events", "towers", "usage", "associations",
                     "stats", "metro", "base_split")
    suffixes = settings.get("public_suffixes", [])
    scheme = (SpeedRangeScheme.from_csv(settings["speed_scheme"])
              if settings.get("speed_scheme") else SpeedRangeScheme())

    towers = read_towers(manifest.towers)
    events = read_events(manifest.events)
    municipalities = sorted(set(towers["municipality"].astype(str)))
    if len(events) == 0:
        log.warning("events file %s has no rows; mobile relations will be all zero", manifest.events)
    trips = extract_trips(events, towers)
    kept = filter_trips(
        trips,
        settings.get("speed_min", 5.0),
        settings.get("speed_max", 120.0),
        tuple(settings.get("window", (6 * 3600, 9 * 3600))),
    )
    log.info("trips extracted: %d, kept after filtering: %d", len(trips), len(kept))

    r05 = tfidf(build_municipality_waypoint(kept, towers, municipalities))
    r07, r08 = build_speed_matrices(kept, towers, scheme, municipalities)
    r08.index.name = "waypoint"

    usage = read_usage(manifest.usage)
    exclusions = read_lines(manifest.exclusions) if manifest.exclusions else []
    counts = usage_matrix(usage, towers.index, exclusions, suffixes)
    filt = EntropyFilter(settings.get("entropy_drop_fraction", 0.10)).fit(counts)
    counts = filt.transform(counts)
    log.info("apps kept: %d of %d", len(filt.kept_), len(filt.entropy_))
    prior = settings.get("prior_strength", 1.0)
    r09 = pd.DataFrame(log_odds_dirichlet(counts.to_numpy(), prior), counts.index, counts.columns)
    r09_signed = pd.DataFrame(log_odds_dirichlet(counts.to_numpy(), prior, clip=False),
                              counts.index, counts.columns)
    associations = read_associations(manifest.associations, suffixes)
    r13 = build_mode_association(associations, list(counts.columns))

    stats = read_stats(manifest.stats, manifest.metro,
                       settings.get("active_factor", 0.975), settings.get("taxi_factor", 1.09))
    base = check_mode_split(read_matrix(manifest.base_split))
    r01 = project_mode_split(base, stats)
    ratio = naive_ratio(base, r01, stats)
    log.info("naive ratio of projected to population-scaled trips: %.6f", ratio)

    rel_dir = out / "relations"
    derived = {
        "R01": ("municipality", "mode", r01, "survey"),
        "R05": ("municipality", "waypoint", r05, "mobile"),
        "R07": ("municipality", "speed", r07, "mobile"),
        "R08": ("waypoint", "speed", r08, "mobile"),
        "R09": ("waypoint", "app", r09, "dpi"),
        "R13": ("app", "mode", r13, "dpi"),
    }
    _, static = read_manifest(manifest.relations)
    clash = sorted({e.id for e in static} & set(derived))
    if clash:
        raise ValidationFailure(f"static manifest already defines {clash}")
    entries = list(static)
    for rid, (source, target, frame, provenance) in derived.items():
        path = rel_dir / f"{rid}.csv"
        write_matrix(frame, path, corner=source)
        entries.append(RelationEntry(rid, source, target, path, provenance))
    write_matrix(r09_signed, out / "diagnostics" / "R09_unclipped.csv", corner="waypoint")
    entries.sort(key=lambda e: e.id)
    write_manifest(out / "graph.json", entries)

    graph = load_graph(out / "graph.json")
    problems = validate(graph)
    summary = {
        "trips_extracted": len(trips),
        "trips_kept": len(kept),
        "apps_total": int(len(filt.entropy_)),
        "apps_kept": len(filt.kept_),
        "naive_ratio": ratio,
        "relations": sorted(graph.relations),
        "violations": problems,
    }
    _write_json(out / "ingest_summary.json", summary)
    if problems:
        raise ValidationFailure("; ".join(problems))
    return summary


# ---------------------------------------------------------------- fit

def _solver_settings(settings: dict) -> dict:
    solver = settings.get("solver", {})
    return {
        "max_iter": solver.get("max_iterations", 2000),
        "tol": solver.get("relative_tolerance", 1e-5),
        "epsilon": solver.get("epsilon", 1e-12),
        "inner_iter": solver.get("inner_iterations", 10),
        "patience": solver.get("patience", 20),
    }


def _write_factors(factors: FactorSet, graph, directory: Path) -> None:
    for concept, G in factors.factors.items():
        frame = pd.DataFrame(G, index=graph.concept(concept).labels,
                             columns=[f"k{i + 1}" for i in range(G.shape[1])])
        write_matrix(frame, directory / f"G_{concept}.csv", corner=concept)
    for rid, S in factors.backbones.items():
        frame = pd.DataFrame(S, index=[f"k{i + 1}" for i in range(S.shape[0])],
                             columns=[f"k{i + 1}" for i in range(S.shape[1])])
        write_matrix(frame, directory / f"S_{rid}.csv", corner=rid)


def _read_factors(graph, directory: Path) -> FactorSet:
    factors, backbones = {}, {}
    for concept in graph.concepts:
        path = directory / f"G_{concept}.csv"
        if not path.is_file():
            raise FileNotFoundError(f"missing factor artifact {path}")
        frame = read_matrix(path)
        if list(frame.index) != list(graph.concept(concept).labels):
            raise ValidationFailure(f"{path}: labels do not match the graph")
        factors[concept] = frame.to_numpy()
    for rid in graph.relations:
        path = directory / f"S_{rid}.csv"
        if not path.is_file():
            raise FileNotFoundError(f"missing backbone artifact {path}")
        backbones[rid] = read_matrix(path).to_numpy()
    return FactorSet(factors, backbones)


def run_fit(out: Path, configuration: str, n_instances: int, base_seed: int,
            settings: dict, n_jobs: int = 1) -> pd.DataFrame:
    graph_path = out / "graph.json"
    if not graph_path.is_file():
        raise FileNotFoundError(f"graph manifest not found: {graph_path} (run ingest first)")
    graph = load_graph(graph_path)
    try:
        configured = configure_graph(graph, configuration)
    except ValueError as exc:
        raise ValidationFailure(str(exc)) from None
    model = ModeSplitFusion(
        n_instances=n_instances,
        data_configuration=configuration,
        base_seed=base_seed,
        ranks=settings.get("ranks"),
        n_jobs=n_jobs,
        **_solver_settings(settings),
    ).fit(graph)
    fit_dir = _fit_dir(out, configuration)
    table = model.instance_table()
    _write_csv(table, fit_dir / "instances.csv", index=False)
    _write_factors(model.best_.factors, configured, fit_dir / "factors")
    report = model.best_.report
    report.to_json(fit_dir / "fit_report.json")
    _write_json(fit_dir / "fit_meta.json", {
        "data_configuration": configuration,
        "relations": sorted(configured.relations),
        "ranks": model.ranks_,
        "best_seed": model.best_.seed,
        "best_global_error": model.best_.global_error,
        "n_instances": n_instances,
        "base_seed": base_seed,
    })
    log.info("fitted %d instances under %s; best seed %d, e=%.6g",
             n_instances, configuration, model.best_.seed, model.best_.global_error)
    return table


# ---------------------------------------------------------------- report

def _load_fit(out: Path, configuration: str):
    fit_dir = _fit_dir(out, configuration)
    meta_path = fit_dir / "fit_meta.json"
    if not meta_path.is_file():
        raise FileNotFoundError(f"fit artifacts not found in {fit_dir} (run fit first)")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    graph = configure_graph(load_graph(out / "graph.json"), configuration)
    if sorted(graph.relations) != meta["relations"]:
        raise ValidationFailure(f"{fit_dir}: artifacts were fitted on a different graph")
    factors = _read_factors(graph, fit_dir / "factors")
    report = FitReport.from_json(fit_dir / "fit_report.json")
    return graph, factors, report, meta


def _shares_table(split: pd.DataFrame) -> pd.DataFrame:
    citywide, per_row = mode_shares(split)
    table = pd.concat([citywide.to_frame("citywide").T, per_row])
    table.index.name = "area"
    return table


def _validation_rows(split, reference, label) -> list[dict]:
    table = compare_configurations(split, reference)
    return [
        {"model": label, "mode": mode, "r": float(row.r), "p": float(row.p),
         "p_bonferroni": float(row.p_bonferroni)}
        for mode, row in table.iterrows()
    ]


def run_report(out: Path, configuration: str, manifest: PipelineManifest, settings: dict,
               compare: str | None = None) -> dict:
    graph, factors, _, meta = _load_fit(out, configuration)
    clamped, raw, n_clamped = updated_mode_split(graph, factors)
    prior = check_mode_split(read_matrix(out / "relations" / "R01.csv"))
    rep_dir = out / f"report-{configuration.lower().replace('_', '-')}"

    write_matrix(clamped, rep_dir / "updated_split.csv", corner="municipality")
    write_matrix(raw, rep_dir / "updated_split_raw.csv", corner="municipality")
    write_matrix(_shares_table(clamped), rep_dir / "shares.csv", corner="area")
    write_matrix(_shares_table(raw), rep_dir / "shares_raw.csv", corner="area")
    write_matrix(clamped - prior.loc[clamped.index], rep_dir / "change.csv", corner="municipality")

    macro_path = settings.get("macro_areas") or manifest.macro_areas
    if macro_path:
        mapping = read_mapping(macro_path, "municipality", "macro_area")
        macro = pd.concat([macro_totals(clamped, mapping, m) for m in MODES], axis=1)
        write_matrix(macro, rep_dir / "macro.csv", corner="macro_area")

    lines = [
        f"data configuration: {configuration}",
        f"selected seed: {meta['best_seed']}",
        f"global error: {meta['best_global_error']!r}",
        f"clamped cells: {n_clamped}",
    ]
    result = {"clamped_cells": n_clamped}
    if manifest.reference is not None:
        if not manifest.reference.is_file():
            raise FileNotFoundError(f"reference split not found: {manifest.reference}")
        reference = check_mode_split(read_matrix(manifest.reference))
        rows = _validation_rows(clamped, reference, "updated")
        rows += _validation_rows(prior.loc[clamped.index], reference, "initial")
        table = pd.DataFrame(rows)
        _write_csv(table, rep_dir / "validation.csv", index=False)
        lines.append("validation against reference:")
        for row in rows:
            lines.append(
                f"  {row['model']:<8} {row['mode']:<13} r={row['r']!r} "
                f"p={row['p']!r} p_bonferroni={row['p_bonferroni']!r}"
            )
        result["validation"] = table
    else:
        lines.append("validation: skipped (no reference split)")
        stale = rep_dir / "validation.csv"
        if stale.exists():
            stale.unlink()

    if compare:
        other = _configuration_name(compare)
        other_graph, other_factors, _, _ = _load_fit(out, other)
        other_split, _, _ = updated_mode_split(other_graph, other_factors)
        table = compare_configurations(clamped, other_split)
        write_matrix(table, rep_dir / f"compare-{other.lower().replace('_', '-')}.csv", corner="mode")
        lines.append(f"comparison with {other}:")
        for mode, row in table.iterrows():
            lines.append(f"  {mode:<13} r={float(row.r)!r} p_bonferroni={float(row.p_bonferroni)!r}")
        result["compare"] = table

    (rep_dir / "validation.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    result["directory"] = rep_dir
    return result


# ---------------------------------------------------------------- synth / validate

def run_synth(out: Path, seed: int | None, overrides: dict, n_instances: int | None) -> Path:
    from .synth import SyntheticSpec, generate

    fields = dict(overrides)
    if seed is not None:
        fields["seed"] = seed
    spec = SyntheticSpec(**fields)
    bundle = generate(spec, out)
    if n_instances is not None:
        cfg_path = out / "run_config.json"
        cfg = json.loads(cfg_path.read_text(encoding="utf-8"))
        cfg["n_instances"] = n_instances
        cfg_path.write_text(json.dumps(cfg, indent=1) + "\n", encoding="utf-8")
    return bundle.manifest


def run_validate_graph(path: Path, configuration: str | None) -> list[str]:
    data = json.loads(path.read_text(encoding="utf-8"))
    if isinstance(data.get("relations"), list):
        graph = load_graph(path)
    else:
        manifest = PipelineManifest.from_json(path)
        combined = manifest.output / "graph.json" if manifest.output else None
        if combined is not None and combined.is_file():
            graph = load_graph(combined)
        else:
            manifest.require("relations")
            graph = load_graph(manifest.relations)
    if configuration:
        graph = graph.drop(DATA_CONFIGURATIONS[_configuration_name(configuration)])
    return validate(graph)


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modefusion", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", type=Path, required=config_required,
                       help="pipeline manifest (JSON)")
        p.add_argument("--out", type=Path, default=None, help="output directory")

    def configuration(p):
        p.add_argument("--data-configuration", type=str.lower,
                       choices=["all", "no-dpi", "no-mobile"], default=None)

    p = sub.add_parser("ingest", help="build derived relations from raw inputs")
    common(p)

    p = sub.add_parser("fit", help="fit seeded model instances and keep the best")
    common(p)
    configuration(p)
    p.add_argument("--instances", type=int, default=None)
    p.add_argument("--seed", type=int, default=None, help="base seed")
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("report", help="write the updated split, shares and validation")
    common(p)
    configuration(p)
    p.add_argument("--compare", type=str.lower, choices=["all", "no-dpi", "no-mobile"],
                   default=None, help="also correlate with another fitted configuration")

    p = sub.add_parser("synth", help="generate a synthetic city bundle")
    p.add_argument("--config", type=Path, default=None, help="JSON with generator settings")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--instances", type=int, default=None)

    p = sub.add_parser("validate-graph", help="check a relation graph")
    p.add_argument("--config", type=Path, required=True,
                   help="relation manifest or pipeline manifest")
    configuration(p)
    return parser


def _dispatch(args) -> int:
    if args.command == "synth":
        overrides = {}
        if args.config is not None:
            overrides = json.loads(args.config.read_text(encoding="utf-8"))
        path = run_synth(args.out, args.seed, overrides, args.instances)
        print(f"wrote synthetic bundle; manifest at {path}")
        return EXIT_OK

    if args.command == "validate-graph":
        if not args.config.is_file():
            raise FileNotFoundError(f"config not found: {args.config}")
        problems = run_validate_graph(args.config, args.data_configuration)
        for problem in problems:
            print(f"violation: {problem}")
        print("graph valid" if not problems else f"{len(problems)} violation(s)")
        return EXIT_INVALID if problems else EXIT_OK

    manifest = PipelineManifest.from_json(args.config)
    settings = manifest.run_settings()
    out = _output_dir(args, manifest)
    out.mkdir(parents=True, exist_ok=True)

    if args.command == "ingest":
        summary = run_ingest(manifest, out, settings)
        print(f"trips extracted {summary['trips_extracted']}, kept {summary['trips_kept']}; "
              f"apps kept {summary['apps_kept']} of {summary['apps_total']}")
        return EXIT_OK

    configuration = _configuration(args, settings)
    if args.command == "fit":
        n = args.instances if args.instances is not None else settings.get("n_instances", 100)
        seed = args.seed if args.seed is not None else settings.get("base_seed", 0)
        table = run_fit(out, configuration, int(n), int(seed), settings, args.jobs)
        best = table[table["best"]].iloc[0]
        print(f"{len(table)} instances; best seed {int(best['seed'])} "
              f"global error {best['global_error']:.6g}")
        return EXIT_OK

    if args.command == "report":
        result = run_report(out, configuration, manifest, settings, args.compare)
        print((result["directory"] / "validation.txt").read_text(encoding="utf-8"), end="")
        return EXIT_OK
    raise AssertionError(args.command)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _dispatch(args)
    except (FileNotFoundError, MalformedInputError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValidationFailure, GraphError, ValueError, KeyError) as exc:
        print(f"validation failed: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
