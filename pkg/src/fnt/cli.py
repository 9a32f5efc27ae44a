"""Command-line interface.

Subcommands: gen-data, train, eval, stream-eval, latency, dump-attn.
Global flags: --config, --seed, --out-dir, plus repeatable --set
section.key=value overrides.  Every run writes its outputs under --out-dir
with the resolved configuration echoed as config.ini.  Exit codes: 0 on
success, 1 on usage errors, 2 on runtime failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, apply_overrides
from .corpus import generate_dataset, load_dataset, save_dataset
from .decoder import DecodeConfig
from .harness import (
    dump_attention,
    evaluate,
    load_model,
    measure_latency,
    stream_evaluate,
    train,
)

__all__ = ["cli", "main"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage problems, not argparse's 2
        raise UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="fnt", description="Factorized transducer with long-content context")
    p.add_argument("--config", help="experiment configuration file (INI)")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--out-dir", required=False, help="directory for all outputs")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override a configuration value (repeatable)",
    )
    sub = p.add_subparsers(dest="command", metavar="command")

    sub.add_parser("gen-data", help="generate the synthetic session dataset")

    p_train = sub.add_parser("train", help="train a model")
    p_train.add_argument("--data", help="dataset directory (defaults to config data.dataset)")
    p_train.add_argument("--resume", help="checkpoint to resume from")

    for name in ("eval", "stream-eval"):
        q = sub.add_parser(name, help=f"{name} a checkpoint")
        q.add_argument("--checkpoint", required=True)
        q.add_argument("--data", help="dataset directory")
        q.add_argument("--split", default=None)
        q.add_argument("--n-his", type=int, default=None)
        q.add_argument("--beam", type=int, default=None)
        q.add_argument(
            "--history-mode",
            default=None,
            choices=(["oracle", "hypothesis", "none", "all"] if name == "eval" else ["oracle", "hypothesis", "none"]),
        )
        if name == "stream-eval":
            q.add_argument("--k", type=int, default=None, help="decode-time history downsampling rate")

    p_lat = sub.add_parser("latency", help="measure streaming end latency")
    p_lat.add_argument("--checkpoint", required=True)
    p_lat.add_argument("--data")
    p_lat.add_argument("--split", default=None)
    p_lat.add_argument("--n-his", type=int, default=None)
    p_lat.add_argument("--beam", type=int, default=None)
    p_lat.add_argument("--k", type=int, default=None)
    p_lat.add_argument("--repeats", type=int, default=5)

    p_att = sub.add_parser("dump-attn", help="write context attention matrices")
    p_att.add_argument("--checkpoint", required=True)
    p_att.add_argument("--data")
    p_att.add_argument("--session", required=True)
    p_att.add_argument("--utterance", type=int, required=True)
    p_att.add_argument("--n-his", type=int, default=None)
    p_att.add_argument("--heatmap", action="store_true")
    return p


def _load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    config = apply_overrides(config, args.overrides)
    if args.seed is not None:
        from dataclasses import replace

        config.train = replace(config.train, seed=args.seed)
    return config


def _out_dir(args) -> Path:
    if not args.out_dir:
        raise UsageError("--out-dir is required")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _decode_config(config: ExperimentConfig, args, k=None) -> DecodeConfig:
    d = config.decode
    return DecodeConfig(
        beam_width=args.beam if args.beam is not None else d.beam_width,
        n_his=args.n_his if args.n_his is not None else d.n_his,
        max_symbols_per_frame=d.max_symbols_per_frame,
        history_text_source=getattr(args, "history_mode", None) or d.history_text,
        frame_shift_s=d.frame_shift_ms / 1000.0,
        downsample_rate=k,
    )


def cli(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required")
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    try:
        return _dispatch(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    out = _out_dir(args)
    if args.command == "gen-data":
        config = _load_config(args)
        seed = args.seed if args.seed is not None else config.train.seed
        dataset = generate_dataset(config.gen, seed)
        save_dataset(dataset, out)
        (out / "config.ini").write_text(config.to_ini(), encoding="utf-8")
        print(f"wrote {sum(len(s.utterances) for s in dataset.sessions)} utterances to {out}")
        return 0

    if args.command == "train":
        config = _load_config(args)
        if args.data:
            from dataclasses import replace

            config.data = replace(config.data, dataset=args.data)
        dataset = load_dataset(config.data.dataset)
        ckpt = train(config, out, dataset=dataset, resume_from=args.resume)
        print(f"checkpoint: {ckpt}")
        return 0

    # remaining commands operate on a checkpoint
    model, config, meta = load_model(args.checkpoint)
    config = apply_overrides(config, args.overrides)
    data_dir = args.data or config.data.dataset
    dataset = load_dataset(data_dir)
    (out / "config.ini").write_text(config.to_ini(), encoding="utf-8")
    split = getattr(args, "split", None) or config.decode.split

    if args.command == "eval":
        mode = args.history_mode or config.decode.history_text
        beam = args.beam if args.beam is not None else config.decode.beam_width
        n_his = args.n_his if args.n_his is not None else config.decode.n_his
        modes = ["oracle", "hypothesis", "none"] if mode == "all" else [mode]
        payload = {}
        records_all = []
        for m in modes:
            metrics, records = evaluate(model, dataset, m, n_his, beam_width=beam, split=split)
            payload[m] = metrics.to_dict()
            for r in records:
                r["history_mode"] = m
            records_all.extend(records)
        if len(modes) > 1:
            payload["deltas"] = {
                f"wer_{a}_minus_{b}": payload[a]["wer"] - payload[b]["wer"]
                for a, b in (("hypothesis", "oracle"), ("none", "oracle"))
                if a in payload and b in payload
            }
        _write_json(out / "metrics.json", payload)
        with open(out / "decode_records.jsonl", "w", encoding="utf-8") as f:
            for r in records_all:
                f.write(json.dumps(r, sort_keys=True) + "\n")
        print(json.dumps(payload, sort_keys=True))
        return 0

    if args.command == "stream-eval":
        decode = _decode_config(config, args, k=args.k)
        metrics, records = stream_evaluate(model, dataset, decode, split=split)
        _write_json(out / "metrics.json", metrics.to_dict(with_latency=True))
        with open(out / "decode_records.jsonl", "w", encoding="utf-8") as f:
            for r in records:
                f.write(json.dumps(r, sort_keys=True) + "\n")
        print(json.dumps({"wer": metrics.wer, "mean_end_latency": metrics.mean_end_latency}))
        return 0

    if args.command == "latency":
        decode = _decode_config(config, args, k=args.k)
        runs = measure_latency(model, dataset, decode, split=split, repeats=args.repeats)
        per_utt = np.array(runs)  # (repeats, n_utterances)
        payload = {
            "k": args.k or model.cfg.encoder.downsample_rate,
            "n_his": decode.n_his,
            "repeats": args.repeats,
            "per_utterance_median": np.median(per_utt, axis=0).tolist(),
            "median_end_latency": float(np.median(per_utt)),
            "mean_end_latency": float(np.mean(per_utt)),
            "min_end_latency": float(per_utt.min()),
        }
        _write_json(out / "latency.json", payload)
        print(json.dumps({k: payload[k] for k in ("k", "n_his", "median_end_latency")}))
        return 0

    if args.command == "dump-attn":
        n_his = args.n_his if args.n_his is not None else config.decode.n_his
        paths = dump_attention(
            model, dataset, args.session, args.utterance, out, n_his=n_his, heatmap=args.heatmap
        )
        print("\n".join(str(p) for p in paths))
        return 0

    raise UsageError(f"unknown command {args.command!r}")


def main() -> None:
    sys.exit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
