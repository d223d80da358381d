"""Command-line pipeline: prepare, train, infer, audit, synth.

Configuration comes from a single JSON file; a few flags override it and the
merged configuration is echoed to the output directory. Exit codes: 0 success,
2 input/config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import audit as au
from . import graph_build as gb
from . import grid_store as gs
from . import model as md
from . import synth as sy
from .numcore import NonFiniteError


class ConfigError(ValueError):
    """Bad or missing configuration/input."""


@dataclass
class RunConfig:
    heights: str
    prior_counts: str
    out_dir: str
    tile_size: int = gb.DEFAULT_TILE_SIZE
    split_ratios: tuple[float, float, float] = (0.70, 0.15, 0.15)
    split_seed: int = 0
    split_tolerance: float = 0.25
    upsample_factor: int = 1
    train: md.TrainConfig = field(default_factory=md.TrainConfig)
    regions: list[dict] = field(default_factory=list)
    min_edge: float = 0.05
    threshold_m: float = au.DEFAULT_CHANGE_THRESHOLD_M

    def __post_init__(self):
        if abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ConfigError("split_ratios must sum to 1")
        if self.upsample_factor < 1:
            raise ConfigError("upsample_factor must be >= 1")

    @property
    def prepared_dir(self) -> Path:
        return Path(self.out_dir) / "prepared"


def load_run_config(path: str | Path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    train_doc = dict(doc.get("train", {}))
    for key in ("epochs", "seed"):
        if key in overrides:
            train_doc[key] = overrides.pop(key)
    if "lr" in overrides:
        train_doc["learning_rate"] = overrides.pop("lr")
    doc.update(overrides)
    try:
        train_cfg = md.TrainConfig(
            tau=float(train_doc.get("tau", 1.0)),
            learning_rate=float(train_doc.get("learning_rate", 1e-3)),
            epochs=int(train_doc.get("epochs", 200)),
            edge_dropout=float(train_doc.get("edge_dropout", 0.20)),
            n_subgraphs=(None if train_doc.get("n_subgraphs") is None
                         else int(train_doc["n_subgraphs"])),
            seed=int(train_doc.get("seed", 0)),
            loss_weights=tuple(train_doc.get("loss_weights", (1.0, 1.0, 1.0))),
            adam_betas=tuple(train_doc.get("adam_betas", (0.9, 0.999))),
            adam_eps=float(train_doc.get("adam_eps", 1e-8)),
        )
        return RunConfig(
            heights=doc["heights"],
            prior_counts=doc["prior_counts"],
            out_dir=doc["out_dir"],
            tile_size=int(doc.get("tile_size", gb.DEFAULT_TILE_SIZE)),
            split_ratios=tuple(doc.get("split_ratios", (0.70, 0.15, 0.15))),
            split_seed=int(doc.get("split_seed", 0)),
            split_tolerance=float(doc.get("split_tolerance", 0.25)),
            upsample_factor=int(doc.get("upsample_factor", 1)),
            train=train_cfg,
            regions=list(doc.get("regions", [])),
            min_edge=float(doc.get("min_edge", 0.05)),
            threshold_m=float(doc.get("threshold_m", au.DEFAULT_CHANGE_THRESHOLD_M)),
        )
    except KeyError as exc:
        raise ConfigError(f"missing config key: {exc}") from exc
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad config value: {exc}") from exc


def _echo_config(cfg: RunConfig, command: str) -> None:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = asdict(cfg)
    (out / f"{command}_config_echo.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True, default=list) + "\n",
        encoding="utf-8")


def _read_heights(cfg: RunConfig) -> gs.GridStack:
    path = Path(cfg.heights)
    if not path.is_dir():
        raise ConfigError(f"heights stack not found: {path}")
    stack = gs.read_grid_stack(path)
    if stack.manifest.kind is not gs.StackKind.HEIGHT_SERIES:
        raise ConfigError(f"{path} is not a HEIGHT_SERIES stack")
    return stack


def _load_prepared(cfg: RunConfig) -> tuple[gs.PriorField, gb.SplitAssignment, gb.NormStats]:
    prep = cfg.prepared_dir
    if not prep.is_dir():
        raise ConfigError(f"prepared dataset not found: {prep} (run prepare first)")
    prior = gs.stack_to_prior(gs.read_grid_stack(prep / "prior_proportions"))
    splits = _load_splits(prep / "splits.json")
    report = json.loads((prep / "prep_report.json").read_text(encoding="utf-8"))
    stats = gb.NormStats(float(report["norm_mean"]), float(report["norm_std"]))
    return prior, splits, stats


def _save_splits(splits: gb.SplitAssignment, cfg: RunConfig, path: Path) -> None:
    rows = []
    for name, part in (("train", splits.train), ("test", splits.test),
                       ("validation", splits.validation)):
        for t in part:
            rows.append({"x": t.origin_x, "y": t.origin_y, "w": t.width,
                         "h": t.height, "dominant": t.dominant_category,
                         "split": name})
    rows.sort(key=lambda r: (r["y"], r["x"]))
    doc = {"tile_size": cfg.tile_size, "ratios": list(cfg.split_ratios),
           "seed": cfg.split_seed, "tolerance": cfg.split_tolerance,
           "balanced": splits.balanced, "tiles": rows}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_splits(path: Path) -> gb.SplitAssignment:
    if not path.is_file():
        raise ConfigError(f"splits file not found: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    parts: dict[str, list[gb.Tile]] = {"train": [], "test": [], "validation": []}
    for row in doc["tiles"]:
        tile = gb.Tile(row["x"], row["y"], row["w"], row["h"], row["dominant"])
        parts[row["split"]].append(tile)
    assignment = gb.SplitAssignment(parts["train"], parts["test"], parts["validation"])
    assignment.balanced = bool(doc.get("balanced", True))
    return assignment


def cmd_prepare(cfg: RunConfig) -> int:
    heights = _read_heights(cfg)
    counts_path = Path(cfg.prior_counts)
    if not counts_path.is_dir():
        raise ConfigError(f"prior counts stack not found: {counts_path}")
    counts = gs.read_grid_stack(counts_path)
    coarse = gs.normalize_prior_counts(counts)
    fine = gs.upsample_nearest(coarse, cfg.upsample_factor)
    hm = heights.manifest
    if fine.width < hm.width or fine.height_px < hm.height_px:
        raise ConfigError(
            f"upsampled prior {fine.width}x{fine.height_px} does not cover "
            f"heights {hm.width}x{hm.height_px}; check upsample_factor")
    if (fine.width, fine.height_px) != (hm.width, hm.height_px):
        fine = gs.PriorField(fine.categories,
                             fine.proportions[:hm.height_px, :hm.width],
                             fine.has_prior[:hm.height_px, :hm.width])

    tiles = gb.tile_region(hm.width, hm.height_px, cfg.tile_size)
    splits = gb.split_tiles(tiles, fine, cfg.split_ratios, cfg.split_seed,
                            cfg.split_tolerance)

    node_counts = {label: int(((g.values > 0) & g.valid_mask()).sum())
                   for label, g in zip(hm.layer_labels, heights.grids)}
    pooled = []
    for grid in heights.grids:
        g = gb.build_graph(grid, splits.train)
        if g.n_nodes:
            pooled.append(g.features.ravel())
    if not pooled:
        raise ConfigError("no training nodes at any timestep")
    _, stats = gb.log_normalize(np.concatenate(pooled))

    histogram: dict[str, int] = {}
    for t in splits.all_tiles():
        key = "NONE" if t.dominant_category is None else fine.categories[t.dominant_category]
        histogram[key] = histogram.get(key, 0) + 1

    prep = cfg.prepared_dir
    prep.mkdir(parents=True, exist_ok=True)
    gs.write_grid_stack(gs.prior_to_stack(fine), prep / "prior_proportions")
    _save_splits(splits, cfg, prep / "splits.json")
    report = {"norm_mean": stats.mean, "norm_std": stats.std,
              "node_counts": node_counts, "tile_category_histogram": histogram,
              "balanced": splits.balanced}
    (prep / "prep_report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    # self-check: every artifact must re-validate on read
    gs.stack_to_prior(gs.read_grid_stack(prep / "prior_proportions"))
    _load_splits(prep / "splits.json")
    _echo_config(cfg, "prepare")
    print(f"prepared dataset under {prep}: {sum(node_counts.values())} nodes "
          f"across {len(node_counts)} timesteps, balanced={splits.balanced}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    heights = _read_heights(cfg)
    prior, splits, stats = _load_prepared(cfg)
    params = md.ModelParams.initialize(f_dim=1, k_cats=prior.k,
                                       seed=cfg.train.seed)
    result = md.train(params, heights, prior, splits, cfg.train, stats)

    out = Path(cfg.out_dir)
    md.save_checkpoint(out / "checkpoint", result.params, result.norm_stats, cfg.train)
    lines = ["epoch,train_rec,train_kl,train_ce,train_total,"
             "val_rec,val_kl,val_ce,val_total"]
    for row in result.history:
        t, v = row.train, row.val
        lines.append(",".join([str(row.epoch)] +
                              [repr(x) for x in (t.rec, t.kl, t.ce, t.total,
                                                 v.rec, v.kl, v.ce, v.total)]))
    (out / "losses.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    md.load_checkpoint(out / "checkpoint")  # self-check
    _echo_config(cfg, "train")
    if result.history:
        last = result.history[-1]
        print(f"epoch {last.epoch}: train total {last.train.total:.6f} "
              f"(rec {last.train.rec:.6f}, kl {last.train.kl:.6f}, ce {last.train.ce:.6f}); "
              f"val total {last.val.total:.6f}")
    else:
        print("epochs=0: checkpoint holds the initial parameters")
    return 0


def cmd_infer(cfg: RunConfig, checkpoint: str) -> int:
    heights = _read_heights(cfg)
    ckpt_path = Path(checkpoint)
    if not ckpt_path.is_dir():
        raise ConfigError(f"checkpoint not found: {ckpt_path}")
    params, stats, _ = md.load_checkpoint(ckpt_path)
    prior, _, _ = _load_prepared(cfg)
    if prior.k != params.k_cats:
        raise ConfigError(f"checkpoint has {params.k_cats} categories, "
                          f"prior has {prior.k}")
    out = Path(cfg.out_dir) / "posteriors"
    for label, grid in zip(heights.manifest.layer_labels, heights.grids):
        post = md.infer_posterior(params, grid, stats, prior.categories,
                                  timestep=label)
        stack = md.posterior_to_stack(post)
        gs.write_grid_stack(stack, out / label)
        md.stack_to_posterior(gs.read_grid_stack(out / label), label)  # self-check
    _echo_config(cfg, "infer")
    print(f"wrote {len(heights.grids)} posterior stacks under {out}")
    return 0


def _load_posteriors(cfg: RunConfig, posteriors_dir: Path,
                     labels: list[str]) -> list[md.PosteriorField]:
    fields = []
    for label in labels:
        path = posteriors_dir / label
        if not path.is_dir():
            raise ConfigError(f"posterior stack not found: {path}")
        fields.append(md.stack_to_posterior(gs.read_grid_stack(path), label))
    return fields


def cmd_audit(cfg: RunConfig, posteriors_dir: str) -> int:
    heights = _read_heights(cfg)
    prior, _, _ = _load_prepared(cfg)
    labels = list(heights.manifest.layer_labels)
    posteriors = _load_posteriors(cfg, Path(posteriors_dir), labels)
    out = Path(cfg.out_dir) / "audit"
    out.mkdir(parents=True, exist_ok=True)
    index: dict = {"artifacts": [], "transitions": {}}

    ad_grids = []
    for post in posteriors:
        ad = au.ad_map(prior, post)
        ad_grids.append(ad.grid)
        au.write_ppm_heatmap(ad.grid, out / f"ad_{post.timestep}.ppm")
        index["artifacts"].append(f"ad_{post.timestep}.ppm")
    gs.write_grid_stack(au.maps_to_stack(ad_grids, labels, gs.StackKind.AD_MAP),
                        out / "ad_maps")
    index["artifacts"].append("ad_maps")

    if len(heights.grids) >= 2:
        change_grids, change_labels = [], []
        for a, b, la, lb in zip(heights.grids, heights.grids[1:], labels, labels[1:]):
            cm = au.change_map(a, b, cfg.threshold_m)
            pair = f"{la}_to_{lb}"
            change_grids.append(cm.grid)
            change_labels.append(pair)
            au.write_ppm_heatmap(cm.grid, out / f"change_{pair}.ppm")
            index["artifacts"].append(f"change_{pair}.ppm")
        gs.write_grid_stack(
            au.maps_to_stack(change_grids, change_labels, gs.StackKind.CHANGE_MAP),
            out / "change_maps")
        index["artifacts"].append("change_maps")

    regions = cfg.regions or [{"name": "full", "x": 0, "y": 0,
                               "width": heights.manifest.width,
                               "height": heights.manifest.height_px}]
    for region in regions:
        trend = au.regional_trend(
            posteriors, (int(region["x"]), int(region["y"]),
                         int(region["width"]), int(region["height"])))
        name = region.get("name", f"r{region['x']}_{region['y']}")
        au.write_trend_csv(trend, out / f"trend_{name}.csv")
        index["artifacts"].append(f"trend_{name}.csv")

    if len(posteriors) < 2:
        print("warning: fewer than 2 timesteps, transition outputs disabled",
              file=sys.stderr)
    else:
        matrices = [au.transition_matrix(list(pair), "one_step")
                    for pair in zip(posteriors, posteriors[1:])]
        matrices.append(au.transition_matrix(posteriors, "averaged"))
        names = [f"{a}_to_{b}" for a, b in zip(labels, labels[1:])] + ["averaged"]
        for name, tm in zip(names, matrices):
            au.write_transition_csv(tm, out / f"transition_{name}.csv")
            au.write_transition_csv(tm, out / f"transition_{name}_raw.csv", which="raw")
            (out / f"transition_{name}.dot").write_text(
                au.transition_to_dot(tm, cfg.min_edge), encoding="utf-8")
            index["artifacts"] += [f"transition_{name}.csv",
                                   f"transition_{name}_raw.csv",
                                   f"transition_{name}.dot"]
            index["transitions"][name] = {"period": tm.period,
                                          "zero_mass_rows": tm.zero_mass_rows}

    (out / "index.json").write_text(
        json.dumps(index, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    # self-check written stacks
    gs.read_grid_stack(out / "ad_maps")
    if len(heights.grids) >= 2:
        gs.read_grid_stack(out / "change_maps")
    _echo_config(cfg, "audit")
    print(f"wrote {len(index['artifacts'])} audit artifacts under {out}")
    return 0


def cmd_synth(spec_path: str, out_dir: str) -> int:
    spec = sy.SyntheticSpec.from_json(spec_path)
    paths = sy.write_dataset(spec, out_dir)
    for path in paths.values():
        gs.read_grid_stack(path)  # self-check
    echo = Path(out_dir) / "synth_config_echo.json"
    echo.write_text(json.dumps(asdict(spec), indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    print(f"wrote synthetic dataset under {out_dir}: "
          + ", ".join(sorted(p.name for p in paths.values())))
    return 0


def _check_thread_cap() -> None:
    raw = os.environ.get("VULNAUDIT_THREADS")
    if raw is None:
        return
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"VULNAUDIT_THREADS must be an integer, got {raw!r}")
    if cap < 1:
        raise ConfigError("VULNAUDIT_THREADS must be >= 1")
    # execution is sequential; the cap exists for interface stability and
    # never changes results


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vulnaudit",
        description="Weakly supervised vulnerability mapping and change auditing")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="normalize the prior and build splits")
    p.add_argument("--config", required=True)

    p = sub.add_parser("train", help="train the model on the prepared dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("infer", help="write posterior stacks per timestep")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("audit", help="distance/change maps, trends, transitions")
    p.add_argument("--config", required=True)
    p.add_argument("--posteriors", required=True)
    p.add_argument("--min-edge", type=float, dest="min_edge")
    p.add_argument("--threshold-m", type=float, dest="threshold_m")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _check_thread_cap()
        if args.command == "synth":
            return cmd_synth(args.spec, args.out)
        overrides = {}
        if args.command == "train":
            overrides = {"epochs": args.epochs, "seed": args.seed, "lr": args.lr}
        elif args.command == "audit":
            overrides = {"min_edge": args.min_edge, "threshold_m": args.threshold_m}
        cfg = load_run_config(args.config, overrides)
        if args.command == "prepare":
            return cmd_prepare(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "infer":
            return cmd_infer(cfg, args.checkpoint)
        if args.command == "audit":
            return cmd_audit(cfg, args.posteriors)
        raise ConfigError(f"unknown command {args.command!r}")
    except (md.TrainAbortError, NonFiniteError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, gs.GridFormatError, FileNotFoundError, NotADirectoryError,
            json.JSONDecodeError, KeyError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
