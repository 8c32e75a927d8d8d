"""Command-line entry point: ``orcast generate | train | forecast | evaluate | analyze``.

Every run is driven by one JSON config (``--config``); ``--seed`` and
``--output-dir`` override the config's values. Failures print a JSON object
on stderr and exit with 2 (config), 3 (input) or 4 (numerical).
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, config_schema, load_config
from .errors import ConfigError, InputError, NumericalError, OrcastError

log = logging.getLogger("orcast")

SUCCESS = 0
UNEXPECTED = 1


# --------------------------------------------------------------------------- helpers


def _prepare_output(path: Path, force: bool) -> Path:
    if path.exists() and not path.is_dir():
        raise InputError(f"output path {path} exists and is not a directory")
    if path.is_dir() and any(path.iterdir()):
        if not force:
            raise InputError(f"output directory {path} is not empty; pass --force to overwrite")
        for child in path.iterdir():
            if child.is_dir() and not child.is_symlink():
                shutil.rmtree(child)
            else:
                child.unlink()
    path.mkdir(parents=True, exist_ok=True)
    return path


def _output_dir(args, cfg: RunConfig | None) -> Path:
    out = args.output_dir or (cfg.output_dir if cfg is not None else None)
    if out is None:
        raise ConfigError("no output directory: pass --output-dir or set output_dir in the config")
    return Path(out)


def _seed(args, cfg: RunConfig | None) -> int:
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be a 64-bit unsigned integer")
        return int(args.seed)
    return cfg.seed if cfg is not None else 0


def _require_config(args) -> RunConfig:
    if args.config is None:
        raise ConfigError(f"`{args.command}` requires --config")
    return load_config(args.config)


def _write_json(obj, path: Path) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _parse_stages(text: str) -> list[str]:
    try:
        nums = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"--stages must be a comma list of 1, 2, 3; got {text!r}") from None
    if not nums or any(n not in (1, 2, 3) for n in nums):
        raise ConfigError(f"--stages must be a comma list of 1, 2, 3; got {text!r}")
    return [f"S{n}" for n in nums]


def _load_checkpoint(path):
    from .net import load_checkpoint
    from .training import Normalizer

    model, manifest = load_checkpoint(path)
    if "normalization" not in manifest:
        raise InputError(f"checkpoint {path} carries no normalization statistics")
    return model, manifest, Normalizer.from_dict(manifest["normalization"])


# --------------------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    from .pipeline import generate_observations, save_observations
    from .synth_ocean import simulate_world

    cfg = _require_config(args)
    seed = _seed(args, cfg)
    exp = cfg.experiment()
    world_cfg = exp.world if args.seed is None else _reseed_world(exp.world, seed)
    obs_cfg = exp.observations if args.seed is None else _reseed_obs(exp.observations, seed)
    out = _prepare_output(_output_dir(args, cfg), args.force)
    world = simulate_world(world_cfg)
    obs = generate_observations(world, obs_cfg)
    save_observations(obs, world, out)
    _write_json(cfg.model_dump(mode="json"), out / "config.json")
    print(json.dumps({"dataset": str(out), "days": [int(obs.days[0]), int(obs.days[-1])],
                      "train_drifters": len(obs.train_tracks), "eval_drifters": len(obs.eval_tracks)}))
    return SUCCESS


def _reseed_world(world_cfg, seed):
    from dataclasses import replace

    return replace(world_cfg, seed=seed)


def _reseed_obs(obs_cfg, seed):
    from dataclasses import replace

    return replace(obs_cfg, seed=seed + 1)


def cmd_train(args) -> int:
    from .net import init_parameters
    from .pipeline import load_observations
    from .training import STAGES, check_stage_order, run_curriculum

    cfg = _require_config(args)
    seed = _seed(args, cfg)
    stages_wanted = _parse_stages(args.stages)
    configured = {s.stage: s for s in cfg.stage_configs()}
    stages = [configured.get(s) for s in stages_wanted]
    if any(s is None for s in stages):
        missing = [n for n, s in zip(stages_wanted, stages) if s is None]
        raise ConfigError(f"stages {missing} are not configured")

    obs = load_observations(args.dataset)
    data = obs.training_data(cfg.training.last_day)

    if args.resume:
        model, manifest, normalizer = _load_checkpoint(args.resume)
        previous = manifest.get("stage_config", {}).get("stage")
        if previous not in STAGES:
            raise InputError(f"checkpoint {args.resume} does not record its stage")
        check_stage_order([previous] + stages_wanted)
        data.normalizer = normalizer
    else:
        if stages_wanted[0] != "S1":
            raise InputError(f"stage {stages_wanted[0]} needs a prior checkpoint; pass --resume")
        check_stage_order(stages_wanted)
        model = init_parameters(cfg.model_config_(), seed)
        data.fit_normalizer(cfg.training.stage1_target, cfg.training.climatology_cell_deg,
                            cfg.training.climatology_period_days)

    out = _prepare_output(_output_dir(args, cfg), args.force)
    results = run_curriculum(model, stages, data, seed, out_dir=out)
    summary = {r.stage: {"checkpoint": str(r.checkpoint), "final_loss": r.history[-1].mean_loss if r.history else None}
               for r in results}
    print(json.dumps(summary, sort_keys=True))
    return SUCCESS


def cmd_forecast(args) -> int:
    from .forecast import export_snapshots, forecast, tile_domain
    from .geo_grid import GriddedDataset, get_region
    from .net import content_hash

    cfg = load_config(args.config) if args.config else None
    if args.issue_day is None:
        raise ConfigError("`forecast` requires --issue-day")
    model, _, normalizer = _load_checkpoint(args.checkpoint)
    ds = GriddedDataset(Path(args.dataset) / "observations")
    land = np.asarray(ds.meta.get("land", np.zeros(ds.grid.shape, dtype=int)), dtype=bool)
    stride = args.tile_stride if args.tile_stride is not None else (cfg.tile.stride if cfg else None)
    sigma = cfg.tile.sigma_cells if cfg else None
    region = get_region(args.region) if args.region not in (None, "world") else None
    mc = model.config
    plan = tile_domain(ds.grid, region, (mc.patch_h, mc.patch_w), stride)
    product = forecast(model, normalizer, ds, args.issue_day, ds.grid, plan, land, sigma, content_hash(model))
    out = _prepare_output(_output_dir(args, cfg), args.force)
    product.save(out / "product")
    if args.snapshots:
        export_snapshots(product, out / "snapshots")
    print(json.dumps({"product": str(out / "product"), "issue_day": product.issue_day, "leads": product.leads}))
    return SUCCESS


def cmd_evaluate(args) -> int:
    from .forecast import ForecastProduct, persistence_forecast
    from .geo_grid import GriddedDataset, GriddedField, Variable, get_region
    from .metrics import evaluate, match_drifters, render_table
    from .synth_ocean import read_drifters_csv

    cfg = load_config(args.config) if args.config else None
    tracks = read_drifters_csv(args.drifters)
    products = [(f"forecast {Path(p).name}", ForecastProduct.load(p)) for p in args.product or []]
    if (args.persistence or args.truth_analysis) and not args.dataset:
        raise ConfigError("--persistence and --truth-analysis need --dataset")
    if not products and not (args.persistence or args.truth_analysis):
        raise ConfigError("nothing to evaluate: pass --product, --persistence or --truth-analysis")

    issue_days = sorted({p.issue_day for _, p in products})
    if args.issue_day is not None:
        issue_days = sorted(set(issue_days) | {args.issue_day})
    n_leads = max([p.n_leads for _, p in products] + [args.leads])
    if (args.persistence or args.truth_analysis) and not issue_days:
        raise ConfigError("baselines need an issue day: pass --issue-day or a --product")

    baselines = []
    if args.dataset:
        ds = GriddedDataset(Path(args.dataset) / "observations")
        for source in args.persistence or []:
            for T in issue_days:
                u, v = ds.field(f"u_{source}", T + 1), ds.field(f"v_{source}", T + 1)
                baselines.append((f"persistence {source}", persistence_forecast(u, v, T, n_leads)))
        for source in args.truth_analysis or []:
            for T in issue_days:
                us, vs = [], []
                for lead in range(1, n_leads + 1):
                    u, v = ds.field(f"u_{source}", T + lead), ds.field(f"v_{source}", T + lead)
                    us.append(u)
                    vs.append(v)
                fields_ = {
                    "U": (np.stack([f.values for f in us]), np.stack([f.mask for f in us])),
                    "V": (np.stack([f.values for f in vs]), np.stack([f.mask for f in vs])),
                }
                baselines.append((f"analysis {source}", ForecastProduct(T, ds.grid, fields_, {"checkpoint_hash": f"analysis-{source}"})))

    region_name = args.region or (cfg.evaluation.region if cfg else "world")
    speed = cfg.evaluation.speed_filter if cfg else 0.25
    region = get_region(region_name) if region_name != "world" else None
    grouped: dict[str, list] = {}
    hashes: dict[str, str] = {}
    for label, prod in products + baselines:
        pairs = match_drifters(prod, tracks, speed)
        if region is not None:
            pairs = [q for q in pairs if region.contains(q.lat, q.lon)]
        grouped.setdefault(label, []).extend(pairs)
        hashes.setdefault(label, str(prod.provenance.get("checkpoint_hash", "")))
    leads = list(range(1, n_leads + 1))
    reports = {label: evaluate(pairs, leads, region_name, hashes[label], label) for label, pairs in grouped.items()}
    out = _prepare_output(_output_dir(args, cfg), args.force)
    _write_json({k: r.to_dict() for k, r in reports.items()}, out / "metrics.json")
    table_leads = tuple(sorted({1, n_leads}))
    table = render_table(reports, table_leads)
    (out / "metrics.md").write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return SUCCESS


def cmd_analyze(args) -> int:
    handlers = {"embeddings": _analyze_embeddings, "crossover": _analyze_crossover, "ablate": _analyze_ablate}
    return handlers[args.analysis](args)


def _analyze_embeddings(args) -> int:
    from .analysis import (KMeansConfig, cluster_matrices, embedding_grid, minibatch_kmeans, reorder_clusters,
                           save_json, write_cluster_map, write_matrix)

    cfg = load_config(args.config) if args.config else None
    if not args.checkpoint:
        raise ConfigError("`analyze embeddings` requires --checkpoint")
    model, _, _ = _load_checkpoint(args.checkpoint)
    lat0, lat1, lon0, lon1 = model.config.domain
    step = args.step
    lats = np.arange(lat0 + step / 2, lat1, step)
    lons = np.arange(lon0 + step / 2, lon1, step)
    weeks = np.arange(0, 53, args.week_step)
    grid = embedding_grid(model, lats, lons, weeks)
    km = KMeansConfig(k=args.k, seed=_seed(args, cfg))
    centroids, labels = minibatch_kmeans(grid.vectors, km)
    centroids, labels, _ = reorder_clusters(centroids, labels, grid.points)
    corr, dist = cluster_matrices(centroids)
    out = _prepare_output(_output_dir(args, cfg), args.force)
    write_cluster_map(grid.points, labels, out / "cluster_map.csv")
    write_matrix(corr, out / "correlation.csv")
    write_matrix(dist, out / "distance.csv")
    save_json({"k": km.k, "n_points": int(len(grid.points)), "checkpoint": str(args.checkpoint)}, out / "summary.json")
    print(json.dumps({"clusters": km.k, "points": int(len(grid.points))}))
    return SUCCESS


def _analyze_crossover(args) -> int:
    from .analysis import crossover_bias, save_json
    from .geo_grid import GriddedDataset

    cfg = load_config(args.config) if args.config else None
    if not args.dataset:
        raise ConfigError("`analyze crossover` requires --dataset")
    ds = GriddedDataset(Path(args.dataset) / "observations")
    sv, sm = ds.read_all("ssh_swot")
    nv, nm = ds.read_all("ssh_nadir")
    stats = crossover_bias(sv, sm, nv, nm)
    out = _prepare_output(_output_dir(args, cfg), args.force)
    save_json(stats.to_dict(), out / "crossover.json")
    print(json.dumps(stats.to_dict(), sort_keys=True))
    return SUCCESS


def _analyze_ablate(args) -> int:
    from .analysis import ablation_run, save_json

    cfg = _require_config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [_seed(args, cfg)]
    out = _prepare_output(_output_dir(args, cfg), args.force)
    table = ablation_run(cfg.experiment(), seeds)
    save_json(table.to_dict(), out / "ablation.json")
    md = table.markdown()
    (out / "ablation.md").write_text(md, encoding="utf-8")
    sys.stdout.write(md)
    return SUCCESS


def cmd_schema(args) -> int:
    sys.stdout.write(json.dumps(config_schema(), indent=2, sort_keys=True) + "\n")
    return SUCCESS


# --------------------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage errors as configuration errors."""

    def error(self, message):
        raise ConfigError(f"usage: {message}")


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    # Subcommands repeat the global flags without defaults, so a flag given
    # before the subcommand is not reset by the subparser.
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    parser.add_argument("--config", type=Path, help="run configuration (JSON)", **kw)
    parser.add_argument("--seed", type=int, help="overrides the config seed", **kw)
    parser.add_argument("--output-dir", type=Path, help="overrides the config output_dir", **kw)
    parser.add_argument("--force", action="store_true", help="overwrite a non-empty output directory", **kw)
    parser.add_argument("-v", "--verbose", action="store_true", **kw)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    _global_flags(common, suppress=True)

    parser = _Parser(prog="orcast", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("generate", parents=[common], help="simulate a world and its observing systems")

    p = sub.add_parser("train", parents=[common], help="run the training curriculum")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--stages", default="1,2,3", help="comma list from {1,2,3}, e.g. 1,3")
    p.add_argument("--resume", type=Path, help="checkpoint of the stage preceding the first requested one")

    p = sub.add_parser("forecast", parents=[common], help="forecast from observations up to the issue day")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--issue-day", type=int)
    p.add_argument("--region", default=None)
    p.add_argument("--tile-stride", type=int)
    p.add_argument("--snapshots", action="store_true", help="also write PNG snapshots")

    p = sub.add_parser("evaluate", parents=[common], help="score products against drifters")
    p.add_argument("--product", type=Path, action="append")
    p.add_argument("--persistence", action="append", choices=["l4", "neurost"])
    p.add_argument("--truth-analysis", action="append", choices=["l4", "neurost"])
    p.add_argument("--dataset", type=Path)
    p.add_argument("--drifters", type=Path, required=True)
    p.add_argument("--issue-day", type=int)
    p.add_argument("--leads", type=int, default=1)
    p.add_argument("--region", default=None)

    p = sub.add_parser("analyze", parents=[common], help="embedding clusters, crossovers, ablation")
    p.add_argument("analysis", choices=["embeddings", "crossover", "ablate"])
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--dataset", type=Path)
    p.add_argument("--k", type=int, default=30)
    p.add_argument("--step", type=float, default=1.0, help="lat/lon spacing of the embedding grid (degrees)")
    p.add_argument("--week-step", type=int, default=4)
    p.add_argument("--seeds", help="comma list of seeds for ablate")

    sub.add_parser("schema", parents=[common], help="print the config JSON schema")
    return parser


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "forecast": cmd_forecast,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
    "schema": cmd_schema,
}


def _fail(err_type: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": err_type, "message": message, "exit_code": code}, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except OrcastError as err:
        return _fail(type(err).__name__, str(err), err.exit_code)
    except FloatingPointError as err:
        return _fail(NumericalError.__name__, str(err), NumericalError.exit_code)
    except (FileNotFoundError, NotADirectoryError) as err:
        return _fail(InputError.__name__, str(err), InputError.exit_code)
    except Exception as err:  # noqa: BLE001  - last-resort JSON error
        return _fail(type(err).__name__, str(err), UNEXPECTED)


if __name__ == "__main__":
    sys.exit(main())
