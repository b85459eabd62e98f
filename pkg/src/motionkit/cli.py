"""``motionkit`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 2 usage error, 3 data error (missing or malformed
input), 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys
import time

import torch

from . import pipeline
from .errors import DataError, NumericalError
from .pipeline import PipelineConfig

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

STAGES = ("gen-dataset", "encode", "filter", "train", "generate", "eval", "viz", "all")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with PipelineConfig fields")
    common.add_argument("--seed", type=int, help="root seed")
    common.add_argument("--out", help="run directory")
    common.add_argument("--mode", choices=("camera", "human-like"))
    common.add_argument("--filter-percentile", type=float)
    common.add_argument("--mixture-ratio", type=float)
    common.add_argument("--steps", type=int, help="training steps for both generators")
    common.add_argument("--motion-steps", type=int)
    common.add_argument("--video-steps", type=int)
    common.add_argument("--sample-steps", type=int, help="Euler steps at sampling time")
    common.add_argument("--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="motionkit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-dataset", parents=[common], help="render real/synthetic clips and a manifest")
    sub.add_parser("encode", parents=[common], help="scale factor and RGB flow encodings")
    sub.add_parser("filter", parents=[common], help="cycle-consistency scoring and filtering")
    sub.add_parser("train", parents=[common], help="train the motion and video generators")
    sub.add_parser("generate", parents=[common], help="sample frames and flows")
    ev = sub.add_parser("eval", parents=[common], help="M-Err and SNR robustness table")
    ev.add_argument("--input-flows", help="directory of .flo files (direct comparison mode)")
    ev.add_argument("--estimated-flows", help="directory of .flo files (direct comparison mode)")
    vz = sub.add_parser("viz", parents=[common], help="flow PNGs and colour-wheel legend")
    vz.add_argument("--clip", action="append", help="restrict to these clip ids")
    sub.add_parser("all", parents=[common], help="run every stage in order")
    return parser


def config_from_args(args) -> PipelineConfig:
    base = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                base = json.load(fh)
        except OSError as exc:
            raise DataError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"malformed config {args.config}: {exc}") from exc
    overrides = {"seed": args.seed, "out": args.out, "mode": args.mode,
                 "filter_percentile": args.filter_percentile, "mixture_ratio": args.mixture_ratio,
                 "sample_steps": args.sample_steps}
    if args.steps is not None:
        overrides["motion_steps"] = overrides["video_steps"] = args.steps
    if args.motion_steps is not None:
        overrides["motion_steps"] = args.motion_steps
    if args.video_steps is not None:
        overrides["video_steps"] = args.video_steps
    base.update({k: v for k, v in overrides.items() if v is not None})
    return PipelineConfig.from_dict(base)


def _run(args, cfg: PipelineConfig, say) -> None:
    cmd = args.command
    if cmd in ("gen-dataset", "all"):
        m = pipeline.gen_dataset(cfg)
        say(f"gen-dataset: {len(m.entries)} clips -> {cfg.manifest_path}")
    if cmd in ("encode", "all"):
        m = pipeline.encode(cfg)
        say(f"encode: scale factor {m.scale_factor_px:.4f} px")
    if cmd in ("filter", "all"):
        m, thr, report = pipeline.filter_stage(cfg)
        kept = sum(e.kept for e in m.entries)
        say(f"filter: threshold {thr:.4f} px at p{cfg.filter_percentile:g}; kept {kept}/{len(m.entries)}")
        for k, v in report.stats().items():
            say(f"  {k:>5}: {v:.4f}" if isinstance(v, float) else f"  {k:>5}: {v}")
    if cmd in ("train", "all"):
        def log(name, rec):
            if rec.step % 100 == 0:
                say(f"train[{name}] step {rec.step} loss {rec.loss:.4f} ({rec.phase}, "
                    f"{rec.n_real} real / {rec.n_synthetic} synthetic)")
        pipeline.train_stage(cfg, log)
        say(f"train: checkpoints in {cfg.root / 'checkpoints'}")
    if cmd in ("generate", "all"):
        s = pipeline.generate_stage(cfg)
        say(f"generate: {len(s['shifts'])} evaluation clips -> {cfg.root / 'generated'}")
    if cmd == "eval" and (args.input_flows or args.estimated_flows):
        if not (args.input_flows and args.estimated_flows):
            raise _Usage("--input-flows and --estimated-flows go together")
        print(pipeline.eval_flow_dirs(args.input_flows, args.estimated_flows).table())
    elif cmd in ("eval", "all"):
        print(pipeline.eval_stage(cfg).table())
    if cmd == "viz":
        written = pipeline.viz_stage(cfg, args.clip)
        say(f"viz: {len(written)} images -> {cfg.root / 'viz'}")


class _Usage(Exception):
    pass


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    say = (lambda *a: None) if args.quiet else (lambda msg: print(msg, file=sys.stderr))
    torch.set_num_threads(1)
    t0 = time.perf_counter()
    try:
        cfg = config_from_args(args)
        _run(args, cfg, say)
    except _Usage as exc:
        parser.print_usage(sys.stderr)
        print(f"motionkit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"motionkit: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except DataError as exc:
        print(f"motionkit: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    say(f"{args.command} finished in {time.perf_counter() - t0:.1f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
