"""Command line front end: generation, feature summaries, training,
calibration, evaluation, and serving.

Configuration precedence is built-in defaults, then an optional JSON
config file (--config), then explicit flags.  Every run writes a
manifest (resolved config, paths, seed, tool version, wall clock)
beside its primary output.  Exit codes: 0 success, 1 validation or
usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import signal
import sys
import threading
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .checkpoint import save_checkpoint
from .conformal import CpConfig, calibrate, threshold_to_json
from .errors import ConfigError, ValidationError
from .evaluation import (
    cp_factory,
    cross_validate,
    render_report,
    report_to_json,
    strong_transformer_factory,
    weak_transformer_factory,
)
from .features import DEFAULT_TOP_K, FEATURE_CHANNELS, token_features
from .models import (
    EpisodeClassifierConfig,
    StepClassifierConfig,
    TrainConfig,
)
from .monitor import load_method, serve_stdio, serve_tcp
from .store import (
    SynthConfig,
    read_episodes,
    split_train_val,
    synthesize_dataset,
    write_episodes,
)
from .training import FeatureTable, train_strong, train_weak


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.format_usage()}{self.prog}: {message}")


_SYNTH = SynthConfig()
GEN_DEFAULTS = {
    "vocab_size": _SYNTH.vocab_size,
    "top_k": _SYNTH.top_k,
    "episodes": _SYNTH.episodes_total,
    "failure_fraction": _SYNTH.failure_fraction,
    "steps_min": _SYNTH.steps_range[0],
    "steps_max": _SYNTH.steps_range[1],
    "tokens_min": _SYNTH.tokens_range[0],
    "tokens_max": _SYNTH.tokens_range[1],
    "kappa_nominal": _SYNTH.nominal_concentration,
    "kappa_degraded": _SYNTH.degraded_concentration,
    "onset_min": _SYNTH.onset_range[0],
    "onset_max": _SYNTH.onset_range[1],
    "seed": _SYNTH.seed,
}

_MODEL = EpisodeClassifierConfig()
MODEL_DEFAULTS = {
    "d_h": _MODEL.d_h,
    "n_head": _MODEL.n_head,
    "n_layers": _MODEL.n_layers,
    "ff_encoder_hidden": _MODEL.ff_encoder_hidden,
    "ff_head_hidden": _MODEL.ff_head_hidden,
    "max_tokens": _MODEL.max_tokens,
    "dropout": _MODEL.dropout,
    "pool_beta": _MODEL.pool_beta,
}

_TRAIN = TrainConfig()
TRAIN_DEFAULTS = {
    "lr": _TRAIN.learning_rate,
    "batch_steps": _TRAIN.batch_steps,
    "batch_episodes": _TRAIN.batch_episodes,
    "max_epochs": _TRAIN.max_epochs,
    "patience": _TRAIN.patience,
    "weight_decay": _TRAIN.weight_decay,
    "grad_clip": _TRAIN.grad_clip,
    "val_fraction": _TRAIN.val_fraction,
    "pos_weight": _TRAIN.pos_weight,
    "trigger_threshold": _TRAIN.threshold,
    "seed": _TRAIN.seed,
}

_CP = CpConfig()
CP_DEFAULTS = {
    "score": _CP.score,
    "regime": _CP.regime,
    "beta": _CP.beta,
    "aggregate": _CP.aggregate,
}


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicit flags."""
    merged = dict(defaults)
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        try:
            loaded = json.loads(Path(cfg_path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {cfg_path}: invalid JSON ({exc})") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {cfg_path}: expected a JSON object")
        unknown = sorted(set(loaded) - set(defaults))
        if unknown:
            raise ConfigError(
                f"config {cfg_path}: unknown keys {', '.join(unknown)}"
            )
        merged.update(loaded)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _write_manifest(
    primary_output: Path,
    subcommand: str,
    config: dict,
    inputs: Sequence[Path],
    outputs: Sequence[Path],
    seed: Optional[int],
    started: float,
) -> None:
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "seed": seed,
        "tool_version": __version__,
        "wall_clock_s": round(time.time() - started, 3),
    }
    path = Path(str(primary_output) + ".manifest.json")
    path.write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def _add_config_flag(sub: argparse.ArgumentParser) -> None:
    sub.add_argument(
        "--config", help="JSON file with defaults; explicit flags win"
    )


def _add_model_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--d-h", type=int)
    sub.add_argument("--n-head", type=int)
    sub.add_argument("--n-layers", type=int)
    sub.add_argument("--ff-encoder-hidden", type=int)
    sub.add_argument("--ff-head-hidden", type=int)
    sub.add_argument("--max-tokens", type=int)
    sub.add_argument("--dropout", type=float)
    sub.add_argument("--pool-beta", type=float)


def _add_train_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--lr", type=float)
    sub.add_argument("--batch-steps", type=int)
    sub.add_argument("--batch-episodes", type=int)
    sub.add_argument("--max-epochs", type=int)
    sub.add_argument("--patience", type=int)
    sub.add_argument("--weight-decay", type=float)
    sub.add_argument("--grad-clip", type=float)
    sub.add_argument("--val-fraction", type=float)
    sub.add_argument("--pos-weight", type=float)
    sub.add_argument("--trigger-threshold", type=float)
    sub.add_argument("--seed", type=int)


def _add_cp_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--score", choices=("entropy", "perplexity"))
    sub.add_argument("--regime", choices=("strong", "weak"))
    sub.add_argument("--beta", type=float)
    sub.add_argument("--aggregate", choices=("mean", "max"))


def _synth_config(merged: dict) -> SynthConfig:
    return SynthConfig(
        vocab_size=merged["vocab_size"],
        top_k=merged["top_k"],
        episodes_total=merged["episodes"],
        failure_fraction=merged["failure_fraction"],
        steps_range=(merged["steps_min"], merged["steps_max"]),
        tokens_range=(merged["tokens_min"], merged["tokens_max"]),
        nominal_concentration=merged["kappa_nominal"],
        degraded_concentration=merged["kappa_degraded"],
        onset_range=(merged["onset_min"], merged["onset_max"]),
        seed=merged["seed"],
    )


def _model_config(merged: dict, mode: str):
    common = {
        "d_h": merged["d_h"],
        "n_head": merged["n_head"],
        "n_layers": merged["n_layers"],
        "ff_encoder_hidden": merged["ff_encoder_hidden"],
        "ff_head_hidden": merged["ff_head_hidden"],
        "max_tokens": merged["max_tokens"],
        "dropout": merged["dropout"],
    }
    if mode == "weak":
        return EpisodeClassifierConfig(pool_beta=merged["pool_beta"], **common)
    return StepClassifierConfig(**common)


def _train_config(merged: dict) -> TrainConfig:
    return TrainConfig(
        learning_rate=merged["lr"],
        batch_steps=merged["batch_steps"],
        batch_episodes=merged["batch_episodes"],
        max_epochs=merged["max_epochs"],
        patience=merged["patience"],
        weight_decay=merged["weight_decay"],
        grad_clip=merged["grad_clip"],
        seed=merged["seed"],
        threshold=merged["trigger_threshold"],
        val_fraction=merged["val_fraction"],
        pos_weight=merged["pos_weight"],
    )


def cmd_gen_synth(args: argparse.Namespace) -> int:
    started = time.time()
    merged = _resolve(args, GEN_DEFAULTS)
    cfg = _synth_config(merged)
    episodes = synthesize_dataset(cfg)
    out = Path(args.out)
    write_episodes(episodes, out)
    _write_manifest(
        out, "gen-synth", merged, [], [out], merged["seed"], started
    )
    failures = sum(ep.weak_label for ep in episodes)
    print(f"wrote {len(episodes)} episodes ({failures} failures) to {out}")
    return 0


def _channel_stats(rows: np.ndarray) -> Dict[str, dict]:
    out = {}
    for i, name in enumerate(FEATURE_CHANNELS):
        col = rows[:, i]
        out[name] = {
            "mean": float(col.mean()),
            "std": float(col.std()),
            "min": float(col.min()),
            "max": float(col.max()),
        }
    return out


def cmd_extract_features(args: argparse.Namespace) -> int:
    started = time.time()
    dataset = Path(args.dataset)
    episodes = read_episodes(dataset)
    top_k = args.top_k if args.top_k is not None else DEFAULT_TOP_K
    rows: List[np.ndarray] = []
    labels: List[int] = []
    n_steps = 0
    for ep in episodes:
        for step in ep.steps:
            n_steps += 1
            label = -1 if step.strong_label is None else step.strong_label
            for tok in step.tokens:
                rows.append(token_features(tok, top_k).as_array())
                labels.append(label)
    data = np.asarray(rows)
    flags = np.asarray(labels)
    summary = {
        "dataset": str(dataset),
        "episodes": len(episodes),
        "failures": int(sum(ep.weak_label for ep in episodes)),
        "steps": n_steps,
        "tokens": len(rows),
        "top_k": top_k,
        "channels": _channel_stats(data),
        "by_strong_label": {
            str(lab): _channel_stats(data[flags == lab])
            for lab in sorted(set(labels))
            if lab >= 0
        },
    }
    text = json.dumps(summary, sort_keys=True, indent=2) + "\n"
    if args.out:
        out = Path(args.out)
        out.write_text(text, encoding="utf-8")
        _write_manifest(
            out,
            "extract-features",
            {"top_k": top_k},
            [dataset],
            [out],
            None,
            started,
        )
        print(f"wrote feature summary to {out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    started = time.time()
    merged = _resolve(args, {**MODEL_DEFAULTS, **TRAIN_DEFAULTS})
    dataset = Path(args.dataset)
    episodes = read_episodes(dataset)
    model_cfg = _model_config(merged, args.mode)
    train_cfg = _train_config(merged)
    train_eps, val_eps = split_train_val(
        episodes, train_cfg.val_fraction, train_cfg.seed
    )
    trainer = train_strong if args.mode == "strong" else train_weak
    model = trainer(train_eps, val_eps, model_cfg, train_cfg)
    out = Path(args.out)
    save_checkpoint(model, out)
    merged["mode"] = args.mode
    _write_manifest(
        out, "train", merged, [dataset], [out], train_cfg.seed, started
    )
    meta = model.metadata
    print(
        f"saved {args.mode} checkpoint to {out} "
        f"(epochs={meta['epochs_run']}, best_epoch={meta['best_epoch']}, "
        f"best_val_loss={meta['best_val_loss']:.6f})"
    )
    return 0


def cmd_calibrate_cp(args: argparse.Namespace) -> int:
    started = time.time()
    merged = _resolve(args, CP_DEFAULTS)
    dataset = Path(args.dataset)
    episodes = read_episodes(dataset)
    cfg = CpConfig(
        score=merged["score"],
        regime=merged["regime"],
        beta=merged["beta"],
        aggregate=merged["aggregate"],
    )
    threshold = calibrate(episodes, cfg)
    out = Path(args.out)
    out.write_text(threshold_to_json(threshold) + "\n", encoding="utf-8")
    _write_manifest(
        out, "calibrate-cp", merged, [dataset], [out], None, started
    )
    print(
        f"calibrated tau={threshold.tau:.6f} "
        f"(n={threshold.n_calibration}) to {out}"
    )
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    started = time.time()
    dataset = Path(args.dataset)
    episodes = read_episodes(dataset)
    merged: dict = {"method": args.method, "folds": args.folds}
    if args.method == "transformer":
        merged.update(_resolve(args, {**MODEL_DEFAULTS, **TRAIN_DEFAULTS}))
        merged["mode"] = args.mode
        model_cfg = _model_config(merged, args.mode)
        train_cfg = _train_config(merged)
        table = FeatureTable(episodes, model_cfg.max_tokens)
        if args.mode == "strong":
            factory = strong_transformer_factory(
                model_cfg, train_cfg, merged["trigger_threshold"], table
            )
        else:
            factory = weak_transformer_factory(
                model_cfg, train_cfg, merged["trigger_threshold"], table
            )
        seed = merged["seed"]
    else:
        merged.update(_resolve(args, {**CP_DEFAULTS, "seed": 0}))
        cp_cfg = CpConfig(
            score=merged["score"],
            regime=merged["regime"],
            beta=merged["beta"],
            aggregate=merged["aggregate"],
        )
        factory = cp_factory(cp_cfg)
        seed = merged["seed"]
    report = cross_validate(
        episodes,
        factory,
        k=args.folds,
        seed=seed,
        dataset_id=dataset.stem,
        evaluate_strong_labels=not args.skip_strong,
    )
    sys.stdout.write(render_report(report, fmt="text"))
    if args.out:
        out = Path(args.out)
        out.write_text(report_to_json(report) + "\n", encoding="utf-8")
        _write_manifest(
            out, "evaluate", merged, [dataset], [out], seed, started
        )
        print(f"wrote report to {out}")
    return 0


def cmd_monitor(args: argparse.Namespace) -> int:
    method = load_method(
        checkpoint_path=args.checkpoint,
        cp_threshold_path=args.cp_threshold,
        threshold=args.trigger_threshold,
    )
    if args.transport == "stdio":
        serve_stdio(method)
        return 0
    server = serve_tcp(method, host=args.host, port=args.port)
    host, port = server.server_address
    print(f"monitor listening on {host}:{port}", file=sys.stderr)

    def _stop(signum, frame):
        # shutdown() blocks until serve_forever() exits; calling it on the
        # signal-handling (= serving) thread would deadlock, so defer it.
        threading.Thread(target=server.shutdown, daemon=True).start()

    signal.signal(signal.SIGINT, _stop)
    signal.signal(signal.SIGTERM, _stop)
    server.serve_forever()
    server.server_close()
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import create_app

    method = load_method(
        checkpoint_path=args.checkpoint,
        cp_threshold_path=args.cp_threshold,
        threshold=args.trigger_threshold,
    )
    uvicorn.run(create_app(method), host=args.host, port=args.port)
    return 0


def _build_parser() -> _Parser:
    parser = _Parser(prog="tokenwatch", description=__doc__)
    parser.add_argument(
        "--version", action="version", version=f"tokenwatch {__version__}"
    )
    sub = parser.add_subparsers(dest="command")

    gen = sub.add_parser("gen-synth", help="generate a synthetic dataset")
    gen.add_argument("--out", required=True)
    gen.add_argument("--vocab-size", type=int)
    gen.add_argument("--top-k", type=int)
    gen.add_argument("--episodes", type=int)
    gen.add_argument("--failure-fraction", type=float)
    gen.add_argument("--steps-min", type=int)
    gen.add_argument("--steps-max", type=int)
    gen.add_argument("--tokens-min", type=int)
    gen.add_argument("--tokens-max", type=int)
    gen.add_argument("--kappa-nominal", type=float)
    gen.add_argument("--kappa-degraded", type=float)
    gen.add_argument("--onset-min", type=float)
    gen.add_argument("--onset-max", type=float)
    gen.add_argument("--seed", type=int)
    _add_config_flag(gen)
    gen.set_defaults(func=cmd_gen_synth)

    feats = sub.add_parser(
        "extract-features", help="summarize uncertainty features"
    )
    feats.add_argument("--dataset", required=True)
    feats.add_argument("--out")
    feats.add_argument("--top-k", type=int)
    feats.set_defaults(func=cmd_extract_features)

    train = sub.add_parser("train", help="train a help-trigger classifier")
    train.add_argument("--dataset", required=True)
    train.add_argument("--mode", choices=("strong", "weak"), required=True)
    train.add_argument("--out", required=True)
    _add_model_flags(train)
    _add_train_flags(train)
    _add_config_flag(train)
    train.set_defaults(func=cmd_train)

    cal = sub.add_parser("calibrate-cp", help="calibrate a conformal threshold")
    cal.add_argument("--dataset", required=True)
    cal.add_argument("--out", required=True)
    _add_cp_flags(cal)
    _add_config_flag(cal)
    cal.set_defaults(func=cmd_calibrate_cp)

    ev = sub.add_parser("evaluate", help="k-fold cross-validated evaluation")
    ev.add_argument("--dataset", required=True)
    ev.add_argument(
        "--method", choices=("transformer", "cp"), required=True
    )
    ev.add_argument("--mode", choices=("strong", "weak"), default="strong")
    ev.add_argument("--folds", type=int, required=True)
    ev.add_argument("--out")
    ev.add_argument("--skip-strong", action="store_true")
    _add_model_flags(ev)
    _add_train_flags(ev)
    _add_cp_flags(ev)
    _add_config_flag(ev)
    ev.set_defaults(func=cmd_evaluate)

    mon = sub.add_parser("monitor", help="serve decisions over NDJSON")
    mon.add_argument("--checkpoint")
    mon.add_argument("--cp-threshold")
    mon.add_argument(
        "--transport", choices=("stdio", "tcp"), default="stdio"
    )
    mon.add_argument("--host", default="127.0.0.1")
    mon.add_argument("--port", type=int, default=0)
    mon.add_argument("--trigger-threshold", type=float, default=0.5)
    mon.set_defaults(func=cmd_monitor)

    srv = sub.add_parser("serve", help="serve decisions over HTTP")
    srv.add_argument("--checkpoint")
    srv.add_argument("--cp-threshold")
    srv.add_argument("--host", default="127.0.0.1")
    srv.add_argument("--port", type=int, default=8000)
    srv.add_argument("--trigger-threshold", type=float, default=0.5)
    srv.set_defaults(func=cmd_serve)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if getattr(args, "command", None) is None or not hasattr(args, "func"):
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except (ValidationError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 2
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
