"""Command-line pipeline: generate, train, replay, sweep, fit, serve, bench.

Every subcommand accepts ``--config FILE`` (YAML or JSON mapping of
option names to values) plus flag overrides, and environment variables
prefixed ``BIDSHADE_`` (e.g. ``BIDSHADE_HASH_BITS=14``).  Precedence:
flags > environment > config file > built-in defaults.

On success each subcommand prints a single machine-readable JSON summary
as its last stdout line; failures exit nonzero with a message on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from . import replay as replay_mod
from .baseline import fit_segment_store, SegmentedShader
from .encoding import ConfigError, EncoderConfig
from .modelfile import ModelFileError, TrainMeta, load_model, save_model
from .models import AsymLossConfig, TrainConfig, TrainingDiverged, trace_csv, train
from .records import LogIngestError, read_log, won_records, write_log
from .replay import EvaluationError, IdentityShader, OracleShader
from .server import ShadingEngine, measure_latency, start_server
from .synthetic import generate_synthetic, interaction_benchmark_spec, load_spec

_MS_PER_DAY = 86_400_000


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    import yaml

    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path!r} must contain a mapping")
    return data


def _opt(args: argparse.Namespace, config: dict, name: str, default, cast):
    """Resolve one option: flag > BIDSHADE_<NAME> env > config > default."""
    attr = name.replace("-", "_")
    value = getattr(args, attr, None)
    if value is not None:
        return value
    env = os.environ.get("BIDSHADE_" + attr.upper())
    if env is not None:
        return cast(env)
    if name in config:
        return cast(config[name])
    if attr in config:
        return cast(config[attr])
    return default


def _summary(payload: dict) -> None:
    print(json.dumps(payload))


def _train_window(records) -> str:
    if not records:
        return ""
    days = [r.timestamp_ms // _MS_PER_DAY for r in records]
    return f"day{min(days)}-day{max(days)}"


def _flag_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    return str(value).lower() in ("1", "true", "yes", "on")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_generate(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    spec_path = _opt(args, config, "spec", None, str)
    preset = _opt(args, config, "preset", None, str)
    if spec_path:
        spec = load_spec(spec_path)
    elif preset == "interaction":
        spec = interaction_benchmark_spec()
    else:
        raise ConfigError("generate needs --spec FILE or --preset interaction")
    n_records = _opt(args, config, "records", None, int)
    seed = _opt(args, config, "seed", None, int)
    overrides = {}
    if n_records is not None:
        overrides["n_records"] = n_records
    if seed is not None:
        overrides["seed"] = seed
    if overrides:
        spec = dataclasses.replace(spec, **overrides)

    records = generate_synthetic(spec)
    total = len(records)
    if _flag_bool(_opt(args, config, "won-only", False, _flag_bool)):
        records = won_records(records)
    write_log(records, args.out)
    _summary(
        {
            "command": "generate",
            "out": args.out,
            "records_written": len(records),
            "records_generated": total,
            "seed": spec.seed,
        }
    )
    return 0


def _encoder_from(args: argparse.Namespace, config: dict) -> EncoderConfig:
    return EncoderConfig(
        bits_per_field=_opt(args, config, "hash-bits", 18, int),
        hash_seed=_opt(args, config, "hash-seed", 0, int),
    )


def _train_cfg_from(args: argparse.Namespace, config: dict) -> TrainConfig:
    return TrainConfig(
        learning_rate=_opt(args, config, "learning-rate", 0.05, float),
        epochs=_opt(args, config, "epochs", 5, int),
        batch_size=_opt(args, config, "batch-size", 256, int),
        l2_w=_opt(args, config, "l2-w", 1e-6, float),
        l2_v=_opt(args, config, "l2-v", 1e-6, float),
        init_scale=_opt(args, config, "init-scale", 0.01, float),
        embed_dim=_opt(args, config, "embed-dim", 10, int),
        seed=_opt(args, config, "seed", 0, int),
    )


def _cmd_train(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    parsed = read_log(args.log)
    records = parsed.records
    if not _flag_bool(_opt(args, config, "include-lost", False, _flag_bool)):
        records = won_records(records)
    kind = _opt(args, config, "kind", "fm", str)
    gamma = _opt(args, config, "gamma", 0.2, float)
    encoder = _encoder_from(args, config)
    train_cfg = _train_cfg_from(args, config)
    result = train(
        records,
        kind,
        encoder=encoder,
        train_cfg=train_cfg,
        loss_cfg=AsymLossConfig(gamma=gamma),
    )
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as fh:
            fh.write(trace_csv(result.trace))
    window = _opt(args, config, "window", None, str) or _train_window(records)
    tag = save_model(
        result.model,
        args.out,
        TrainMeta(seed=train_cfg.seed, gamma=gamma, epochs=train_cfg.epochs, window=window),
    )
    final = result.trace[-1]
    _summary(
        {
            "command": "train",
            "kind": kind,
            "model": args.out,
            "version_tag": tag,
            "records": len(records),
            "skipped_lines": parsed.skipped,
            "gamma": gamma,
            "epochs": train_cfg.epochs,
            "final_asym_loss": final.asym_loss,
            "final_mse": final.mse,
        }
    )
    return 0


def _load_shader(path: str):
    return load_model(path).model


def _cmd_replay(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    parsed = read_log(args.log)
    if not parsed.records:
        raise EvaluationError(f"replay log {args.log!r} is empty")
    shaders: dict[str, object] = {"baseline": _load_shader(args.baseline)}
    for entry in args.model or []:
        if "=" not in entry:
            raise ConfigError(f"--model expects NAME=PATH, got {entry!r}")
        name, path = entry.split("=", 1)
        if name in shaders:
            raise ConfigError(f"duplicate shader name {name!r}")
        shaders[name] = _load_shader(path)
    if _flag_bool(_opt(args, config, "with-identity", False, _flag_bool)):
        shaders["identity"] = IdentityShader()
    if _flag_bool(_opt(args, config, "with-oracle", False, _flag_bool)):
        shaders["oracle"] = OracleShader()

    gamma = _opt(args, config, "gamma", None, float)
    report = replay_mod.run_replay(
        parsed.records,
        shaders,
        baseline="baseline",
        loss_cfg=AsymLossConfig(gamma=gamma) if gamma is not None else None,
    )
    table = replay_mod.report_table(report)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(table)
    else:
        print(table, end="")
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(replay_mod.report_csv(report))
    _summary(
        {
            "command": "replay",
            "log": args.log,
            "records": report.records,
            "skipped_lines": parsed.skipped,
            "shaders": list(report.shaders),
            "report": args.report,
            "csv": args.csv,
        }
    )
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    train_parsed = read_log(args.train_log)
    test_parsed = read_log(args.test_log)
    train_set = won_records(train_parsed.records)
    gammas = [float(g) for g in str(_opt(args, config, "gammas", "0,0.2,0.4,0.6,0.8,1.0", str)).split(",")]
    baseline = _load_shader(args.baseline)
    entries = replay_mod.gamma_sweep(
        train_set,
        test_parsed.records,
        gammas,
        baseline_shader=baseline,
        kind=_opt(args, config, "kind", "fm", str),
        encoder=_encoder_from(args, config),
        train_cfg=_train_cfg_from(args, config),
    )
    csv_text = replay_mod.sweep_csv(entries)
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(csv_text)
    else:
        print(csv_text, end="")
    _summary(
        {
            "command": "sweep",
            "gammas": gammas,
            "errors": {str(e.gamma): e.error for e in entries if e.error},
            "csv": args.csv,
        }
    )
    return 0


def _cmd_baseline_fit(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    parsed = read_log(args.log)
    records = won_records(parsed.records)
    if not records:
        raise EvaluationError(f"no won-bid feedback in {args.log!r}")
    store = fit_segment_store(
        records,
        batch_size=_opt(args, config, "batch-size", 256, int),
        max_segments=_opt(args, config, "max-segments", 1_000_000, int),
    )
    tag = save_model(SegmentedShader(store), args.out)
    _summary(
        {
            "command": "baseline-fit",
            "model": args.out,
            "version_tag": tag,
            "records": len(records),
            "segments": len(store),
        }
    )
    return 0


def _cmd_serve(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    host = _opt(args, config, "host", "127.0.0.1", str)
    port = _opt(args, config, "port", 8600, int)
    server = start_server(args.model, host, port)
    _summary(
        {
            "command": "serve",
            "host": server.server_address[0],
            "port": server.server_address[1],
            "model_version": server.service.engine.version_tag,
        }
    )
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def _cmd_bench(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    parsed = read_log(args.log)
    if not parsed.records:
        raise EvaluationError(f"bench log {args.log!r} is empty")
    engine = ShadingEngine(load_model(args.model))
    stats = measure_latency(
        engine,
        parsed.records[:4096],
        n_requests=_opt(args, config, "requests", 10_000, int),
    )
    _summary({"command": "bench", "model": args.model, **stats})
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bidshade",
        description="Bid shading engine for open first-price auctions.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="YAML/JSON config file with option defaults")

    p = sub.add_parser("generate", help="write a synthetic auction log")
    common(p)
    p.add_argument("--spec", help="synthetic landscape spec file (YAML)")
    p.add_argument("--preset", choices=["interaction"], help="built-in landscape preset")
    p.add_argument("--records", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--won-only", action="store_const", const=True, default=None,
                   help="keep only records winnable at the full bid")
    p.add_argument("--out", required=True, help="output log path")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("train", help="train a shading model from a log")
    common(p)
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True, help="model file path")
    p.add_argument("--kind", choices=["fm", "linear"])
    p.add_argument("--gamma", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--hash-bits", type=int)
    p.add_argument("--hash-seed", type=int)
    p.add_argument("--l2-w", type=float)
    p.add_argument("--l2-v", type=float)
    p.add_argument("--init-scale", type=float)
    p.add_argument("--include-lost", action="store_const", const=True, default=None)
    p.add_argument("--window", help="training window label stored in the model file")
    p.add_argument("--trace", help="write the per-epoch loss trace CSV here")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("replay", help="replay a log under shaders vs the baseline")
    common(p)
    p.add_argument("--log", required=True)
    p.add_argument("--baseline", required=True, help="baseline model file (segmented)")
    p.add_argument("--model", action="append", metavar="NAME=PATH",
                   help="additional shader model files (repeatable)")
    p.add_argument("--with-identity", action="store_const", const=True, default=None)
    p.add_argument("--with-oracle", action="store_const", const=True, default=None)
    p.add_argument("--gamma", type=float, help="gamma recorded in the report")
    p.add_argument("--report", help="write the human-readable table here")
    p.add_argument("--csv", help="write machine-readable metrics here")
    p.set_defaults(func=_cmd_replay)

    p = sub.add_parser("sweep", help="train and replay one model per gamma")
    common(p)
    p.add_argument("--train-log", required=True)
    p.add_argument("--test-log", required=True)
    p.add_argument("--baseline", required=True)
    p.add_argument("--gammas", help="comma-separated gamma grid")
    p.add_argument("--kind", choices=["fm", "linear"])
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--hash-bits", type=int)
    p.add_argument("--hash-seed", type=int)
    p.add_argument("--csv", help="write the sweep table here")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("baseline-fit", help="fit the segmented baseline from a log")
    common(p)
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-segments", type=int)
    p.set_defaults(func=_cmd_baseline_fit)

    p = sub.add_parser("serve", help="run the shading service")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("bench", help="measure shading compute latency")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--log", required=True, help="log supplying benchmark requests")
    p.add_argument("--requests", type=int)
    p.set_defaults(func=_cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (
        ConfigError,
        LogIngestError,
        ModelFileError,
        EvaluationError,
        TrainingDiverged,
        ValueError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
