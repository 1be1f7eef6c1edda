"""Command-line surface for the whole pipeline.

Subcommands: ``generate`` (synthetic dataset), ``train`` (fit a model,
logging per-epoch CSV and writing the best-validation checkpoint),
``eval`` (metric/calibration reports for a checkpoint or the physics
baseline), ``rasterize`` (PPM dumps for inspection, including the
lane-following variant) and ``compare`` (merge report CSVs into one
table).

Exit codes: 0 success, 2 usage or config error, 3 I/O error,
4 numerical failure, 5 checkpoint/dataset incompatibility.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

from .autodiff import CorruptCheckpoint
from .baselines import propagation_predictor
from .config import ConfigError, dump_defaults, load_config
from .dataset import CorruptRecord, FormatVersionMismatch, read_dataset, write_dataset
from .evaluation import (
    EmptyDataset,
    calibration,
    evaluate,
    reports_from_csv,
    reports_to_csv,
    reports_to_markdown,
)
from .losses import LOSS_KINDS, EmptyBatch
from .pipeline import (
    build_scenario,
    generate_samples,
    model_config,
    raster_config,
    target_policy,
)
from .raster import dump_ppm, rasterize, rasterize_with_lane
from .scene import APPROACH, ActorSpec, simulate_actor
from .training import (
    NumericalFailure,
    TrainConfig,
    load_model,
    model_predictor,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4
EXIT_COMPAT = 5


class CompatibilityError(RuntimeError):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trajmodes",
        description="Multimodal vehicle-trajectory prediction toolkit")
    parser.add_argument("--print-config", action="store_true",
                        help="print the full default configuration and exit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("generate", help="generate a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None,
                   help="override dataset.seed from the config")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", default=None,
                   help="write the CSV training log here instead of stdout")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or baseline")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--baseline", choices=["propagation"], default=None)
    p.add_argument("--out-dir", default=None,
                   help="write metrics.csv/metrics.md/calibration.csv here")
    p.add_argument("--threshold", type=float, default=0.2,
                   help="probability filter for chosen-mode metrics")
    p.add_argument("--method-name", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rasterize", help="dump rasters as PPM images")
    p.add_argument("--dataset", default=None)
    p.add_argument("--config", default=None,
                   help="render a fresh episode from a scenario config")
    p.add_argument("--indices", required=True,
                   help="comma-separated sample (or tick) indices")
    p.add_argument("--out", required=True)
    p.add_argument("--lane", type=int, default=None,
                   help="render the lane-following variant for this lane id")
    p.add_argument("--channels", default=None,
                   help="three channel indices for the RGB composite")
    p.set_defaults(func=cmd_rasterize)

    p = sub.add_parser("compare", help="merge metric report CSVs")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_config:
        print(dump_defaults(), end="")
        return EXIT_OK
    if args.command is None:
        parser.print_help()
        return EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (EmptyBatch, EmptyDataset) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalFailure as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (CompatibilityError, FormatVersionMismatch) as err:
        print(f"incompatible inputs: {err}", file=sys.stderr)
        return EXIT_COMPAT
    except (CorruptRecord, CorruptCheckpoint) as err:
        print(f"corrupt input: {err}", file=sys.stderr)
        return EXIT_IO
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO


def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["dataset.seed"] = args.seed
    samples, summary = generate_samples(cfg, threads=args.threads)
    write_dataset(samples, args.out, dt=cfg["dataset.dt"],
                  horizon=cfg["dataset.horizon"])
    print(f"samples: {summary['count']}")
    print(f"labels: {summary['labels']}")
    print(f"rollouts: straight={summary['straight_rollouts']} "
          f"turn={summary['turn_rollouts']}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    loss = cfg["train.loss"]
    if loss not in LOSS_KINDS:
        raise ConfigError(f"train.loss must be one of {LOSS_KINDS}, got {loss!r}")
    ds = read_dataset(args.dataset)
    if not ds.samples:
        raise EmptyBatch("dataset has no samples")
    c, h, w = ds.samples[0].raster.data.shape
    mcfg = model_config(cfg, c, h, w, ds.horizon)
    tcfg = TrainConfig(
        loss=loss, epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        learning_rate=cfg["train.learning_rate"],
        decay_factor=cfg["train.decay_factor"],
        decay_interval=cfg["train.decay_interval"],
        alpha=cfg["train.alpha"],
        angle_threshold=math.radians(cfg["train.angle_threshold_deg"]),
        val_fraction=cfg["train.val_fraction"],
        seed=cfg["train.seed"])

    if args.log:
        log_fh = open(args.log, "w", encoding="utf-8")
        emit = lambda line: print(line, file=log_fh)  # noqa: E731
    else:
        log_fh = None
        emit = print
    try:
        result = train(mcfg, ds.samples, tcfg, checkpoint_path=args.out,
                       log=emit, resume_from=args.resume)
    finally:
        if log_fh:
            log_fh.close()
    print(f"best validation loss {result.best_val:.6f} "
          f"(epoch {result.best_epoch}); checkpoint: {args.out}",
          file=sys.stderr)
    return EXIT_OK


def _check_compatible(mcfg, ds):
    c, h, w = ds.samples[0].raster.data.shape
    if (mcfg.in_channels, mcfg.in_height, mcfg.in_width) != (c, h, w):
        raise CompatibilityError(
            f"checkpoint expects raster ({mcfg.in_channels}, {mcfg.in_height}, "
            f"{mcfg.in_width}), dataset has ({c}, {h}, {w})")
    if mcfg.horizon != ds.horizon:
        raise CompatibilityError(
            f"checkpoint horizon {mcfg.horizon} vs dataset {ds.horizon}")


def cmd_eval(args) -> int:
    ds = read_dataset(args.dataset)
    if not ds.samples:
        raise EmptyDataset("dataset has no samples")
    if args.baseline == "propagation":
        predictor = propagation_predictor(ds.horizon, ds.dt)
        method = args.method_name or "propagation"
        num_modes = 1
    else:
        if args.checkpoint is None:
            raise ConfigError("need --checkpoint or --baseline propagation")
        params, mcfg, meta = load_model(args.checkpoint)
        _check_compatible(mcfg, ds)
        predictor = model_predictor(params, mcfg, dt=ds.dt)
        method = args.method_name or meta.get("loss", "model")
        num_modes = mcfg.num_modes

    reports = evaluate(ds.samples, predictor, method=method,
                       threshold=args.threshold)
    markdown = reports_to_markdown(reports)
    print(markdown, end="")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(reports_to_csv(reports),
                                         encoding="utf-8")
        (out / "metrics.md").write_text(markdown, encoding="utf-8")
        if num_modes >= 2:
            table = calibration(ds.samples, predictor)
            lines = ["lower,upper,mean_predicted,frequency,count"]
            lines += [f"{b.lower:.2f},{b.upper:.2f},{b.mean_predicted:.6f},"
                      f"{b.frequency:.6f},{b.count}" for b in table.buckets]
            (out / "calibration.csv").write_text("\n".join(lines) + "\n",
                                                 encoding="utf-8")
    return EXIT_OK


def _parse_indices(raw: str):
    try:
        return [int(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad index list {raw!r}")


def _triplet(raw, available: int):
    if raw is not None:
        idx = _parse_indices(raw)
        if len(idx) != 3:
            raise ConfigError("--channels needs exactly three indices")
        return tuple(idx)
    return tuple(min(i, available - 1) for i in range(3))


def cmd_rasterize(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    indices = _parse_indices(args.indices)

    if args.dataset:
        ds = read_dataset(args.dataset)
        for idx in indices:
            if not 0 <= idx < len(ds.samples):
                raise ConfigError(f"sample index {idx} out of range "
                                  f"(dataset has {len(ds.samples)})")
            raster = ds.samples[idx].raster
            path = out / f"sample_{idx:05d}.ppm"
            dump_ppm(raster, _triplet(args.channels, raster.data.shape[0]), path)
            print(path)
        return EXIT_OK

    if not args.config:
        raise ConfigError("need --dataset or --config")
    cfg = load_config(args.config)
    scenario = build_scenario(cfg)
    rcfg = raster_config(cfg)
    start_lane = APPROACH if cfg["scenario.kind"] == "t_intersection" else 0
    lane_length = scenario.lanes[start_lane].length
    offset = max(lane_length - cfg["traffic.start_max"], 0.0)
    spec = ActorSpec(actor_id=0, lane_id=start_lane, start_offset=offset,
                     policy=target_policy(cfg, scenario, start_lane))
    rollout = simulate_actor(scenario, spec, seed=cfg["dataset.seed"],
                             num_ticks=cfg["traffic.ticks"],
                             dt=cfg["dataset.dt"])
    for idx in indices:
        if not 0 <= idx < len(rollout):
            raise ConfigError(f"tick {idx} out of range "
                              f"(rollout has {len(rollout)} ticks)")
        state = rollout.states[idx]
        if args.lane is not None:
            raster = rasterize_with_lane(scenario, [state], state,
                                         args.lane, rcfg)
            path = out / f"tick_{idx:05d}_lane{args.lane}.ppm"
        else:
            raster = rasterize(scenario, [state], state, rcfg)
            path = out / f"tick_{idx:05d}.ppm"
        dump_ppm(raster, _triplet(args.channels, raster.data.shape[0]), path)
        print(path)
    return EXIT_OK


def cmd_compare(args) -> int:
    all_reports = []
    label_sets = []
    for path in args.reports:
        text = Path(path).read_text(encoding="utf-8")
        try:
            reports = reports_from_csv(text)
        except ValueError as err:
            raise ConfigError(f"{path}: {err}")
        label_sets.append(sorted({r.horizon_label for r in reports}))
        all_reports.extend(reports)
    if any(labels != label_sets[0] for labels in label_sets[1:]):
        raise ConfigError("reports disagree on horizons; refusing to merge")
    try:
        merged = reports_to_markdown(all_reports, bold_best=True)
    except ValueError as err:
        raise ConfigError(str(err))
    print(merged, end="")
    if args.out:
        Path(args.out).write_text(merged, encoding="utf-8")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
