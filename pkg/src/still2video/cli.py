"""Command-line entry point.

Every option can also come from a flat ``key = value`` config file given with
``--config``; flags override file values and unknown keys are rejected.
Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from PIL import GifImagePlugin, Image

from .checkpoint import KIND_GENERATOR, KIND_VAE, load_checkpoint
from .config import ModelConfig
from .data import DatasetSpec, load_dataset, split_videos, write_flo
from .data.estimate import CoarseToFineEstimator, GroundTruthEstimator
from .data.ingest import list_frames, list_videos, load_flows, load_png, save_png, write_video
from .data.synthetic import KINDS, LAYERS, SyntheticClipSpec, make_synthetic
from .errors import ConfigurationError, Still2VideoError
from .flow2rgb import FeatureExtractor
from .metrics import METRICS, MetricsReport, config_hash, embed_sequences, evaluate_sequences, write_embedding_csv
from .pipeline import (
    TrainConfig,
    _check_pair,
    baseline_copy,
    predict_sequence,
    rollout_with_flows,
    train_flow2rgb,
    train_flow_vae,
)

logger = logging.getLogger("still2video")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Raises instead of exiting so :func:`run` owns the exit code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------- GIF export


def _gif_frame(frame: np.ndarray) -> Image.Image:
    arr = np.clip(np.round(np.asarray(frame, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    return Image.fromarray(arr, mode="RGB").quantize(256, method=Image.Quantize.MEDIANCUT, dither=Image.Dither.NONE)


def export_gif(frames: Sequence[np.ndarray], path: str | Path, delay_ms: int = 100) -> None:
    """Write an 8-bit looping GIF with one image block per input frame.

    Frames are written block by block, so identical consecutive frames are
    kept (Pillow's multi-frame writer merges them).
    """
    if len(frames) < 1:
        raise ConfigurationError("export_gif needs at least one frame")
    if not isinstance(delay_ms, (int, np.integer)) or delay_ms <= 0:
        raise ConfigurationError(f"delay_ms must be a positive integer, got {delay_ms!r}")
    images = [_gif_frame(f) for f in frames]
    size = images[0].size
    if any(im.size != size for im in images):
        raise ConfigurationError("all GIF frames must share one size")
    header, _ = GifImagePlugin.getheader(images[0], None, {"loop": 0})
    chunks = list(header)
    for im in images:
        chunks += GifImagePlugin.getdata(im, (0, 0), include_color_table=True, duration=int(delay_ms), disposal=1)
    chunks.append(b";")
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


# ------------------------------------------------------------- config handling


def read_config_file(path: str | Path) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc}") from exc
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigurationError(f"{path}:{n}: expected 'key = value'")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _model_args(p: argparse.ArgumentParser) -> None:
    r = ModelConfig.reduced()
    p.add_argument("--steps", type=int, default=r.steps, help="M, predicted steps")
    p.add_argument("--height", type=int, default=r.height)
    p.add_argument("--width", type=int, default=r.width)
    p.add_argument("--latent-dim", type=int, default=r.latent_dim)
    p.add_argument("--max-disp", type=float, default=None, help="flow normalization range (px); default scales with height")


def _train_args(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    _model_args(p)
    p.add_argument("--data", help="dataset root: one sub-directory of PNG frames per video")
    p.add_argument("--subset", choices=("all", "train", "test"), default="all")
    p.add_argument("--split", default="0.8", help="train fraction, or 'a-b:c-d' personNN ranges")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--learning-rate", type=float, default=d.learning_rate)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--max-steps", type=int, default=d.max_steps)
    p.add_argument("--kl-weight", type=float, default=d.kl_weight)
    p.add_argument("--kl-warmup", type=float, default=d.kl_warmup)
    p.add_argument("--lam", type=float, default=d.lam)
    p.add_argument("--checkpoint-interval", type=int, default=d.checkpoint_interval)
    p.add_argument("--trunk", choices=("compact", "vgg19"), default=d.trunk)
    p.add_argument("--target", type=float, default=None, help="stop once the monitored training metric is below this")


def build_parser() -> _Parser:
    parser = _Parser(prog="still2video", description="Still image to video: flow sampling and frame synthesis.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def command(name: str, help: str, required: Sequence[str] = ()) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help="output directory (file for evaluate / export-gif)")
        p.set_defaults(_required=("out", *required))
        return p

    parser.commands = sub.choices

    p = command("make-synthetic", "write synthetic clips with ground-truth flows")
    p.add_argument("--kind", choices=KINDS, default="translate")
    p.add_argument("--layer", choices=LAYERS, default="scene")
    p.add_argument("--length", type=int, default=9)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--velocity", default="2,0", help="vx,vy in px per frame")
    p.add_argument("--velocity-jitter", type=float, default=0.0, help="uniform +- jitter per clip")
    p.add_argument("--angular-velocity", type=float, default=0.05)
    p.add_argument("--n-sprites", type=int, default=3)
    p.add_argument("--count", type=int, default=1)
    p.set_defaults(_run=cmd_make_synthetic)

    p = command("train-flow", "train the flow VAE", ("data",))
    _train_args(p)
    p.set_defaults(_run=cmd_train_flow)

    p = command("train-frame", "train the flow-to-frame generator", ("data",))
    _train_args(p)
    p.set_defaults(_run=cmd_train_frame)

    p = command("predict", "sample M flows and frames from one image", ("image", "vae", "gen"))
    p.add_argument("--image")
    p.add_argument("--vae")
    p.add_argument("--gen")
    p.add_argument("--delay-ms", type=int, default=100)
    p.set_defaults(_run=cmd_predict)

    p = command("rollout", "roll a generator out along a video's known flows", ("video", "gen"))
    p.add_argument("--video", help="video directory (PNG frames, optional flows/)")
    p.add_argument("--gen")
    p.add_argument("--mode", choices=("generate", "warp_only", "both"), default="both")
    p.add_argument("--delay-ms", type=int, default=100)
    p.set_defaults(_run=cmd_rollout)

    p = command("evaluate", "score predicted frame sequences against ground truth", ("pred", "gt"))
    p.add_argument("--pred", nargs="+", help="one or more prediction directories")
    p.add_argument("--names", nargs="+", help="method names, one per --pred")
    p.add_argument("--gt", help="ground-truth video directory (x0 first when it holds one extra frame)")
    p.add_argument("--metrics", default="all", help="'all' or a comma list of " + ",".join(METRICS))
    p.add_argument("--embedding", help="also write a 2-D embedding CSV of all sequences here")
    p.add_argument("--embed-method", choices=("pca", "tsne"), default="pca")
    p.add_argument("--flow-estimator", choices=("coarse_to_fine", "ground_truth"), default="coarse_to_fine")
    p.set_defaults(_run=cmd_evaluate)

    p = command("export-gif", "turn a directory of PNG frames into an animated GIF", ("frames",))
    p.add_argument("--frames")
    p.add_argument("--delay-ms", type=int, default=100)
    p.set_defaults(_run=cmd_export_gif)
    return parser


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    pre = _Parser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.command is None:
        parser.error("a command is required")
    if known.config and known.command in parser.commands:
        subparser = parser.commands[known.command]
        file_values = read_config_file(known.config)
        dests = {a.dest for a in subparser._actions} - {"help", "config"}
        unknown = sorted(set(file_values) - dests)
        if unknown:
            raise ConfigurationError(f"unknown config keys for {known.command}: {', '.join(unknown)}")
        # string defaults go through each option's type conversion
        subparser.set_defaults(**file_values)
    args = parser.parse_args(argv)
    missing = [k for k in args._required if getattr(args, k, None) in (None, "")]
    if missing:
        raise ConfigurationError(f"{args.command}: missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    return args


def _resolved(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if not k.startswith("_")}


def _setup_log(out_dir: Path, args: argparse.Namespace) -> logging.Handler:
    out_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out_dir / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger("still2video").addHandler(handler)
    cfg = _resolved(args)
    logger.info("command %s seed %s config-hash %s", args.command, args.seed, config_hash(cfg))
    for k, v in cfg.items():
        logger.info("config %s = %s", k, v)
    return handler


def _model_config(args: argparse.Namespace) -> ModelConfig:
    max_disp = args.max_disp
    if max_disp is None:
        from .core import default_max_disp

        max_disp = default_max_disp(args.height)
    return ModelConfig(steps=args.steps, height=args.height, width=args.width, latent_dim=args.latent_dim, max_disp=max_disp)


def _parse_split(text: str):
    if ":" in text:
        parts = text.split(":")
        try:
            (a, b), (c, d) = (tuple(int(x) for x in part.split("-")) for part in parts)
        except ValueError:
            raise ConfigurationError(f"bad split {text!r}; expected e.g. 1-16:17-25") from None
        return {"train": (a, b), "test": (c, d)}
    try:
        return float(text)
    except ValueError:
        raise ConfigurationError(f"bad split {text!r}") from None


def _write_sequence(out: Path, frames: Sequence[np.ndarray], flows: Optional[np.ndarray], delay_ms: int) -> None:
    (out / "frames").mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        save_png(f, out / "frames" / f"{i:03d}.png")
    if flows is not None:
        (out / "flows").mkdir(exist_ok=True)
        for i, f in enumerate(flows):
            write_flo(np.asarray(f, dtype=np.float32), out / "flows" / f"{i:03d}.flo")
    export_gif(list(frames), out / "anim.gif", delay_ms)


def _read_sequence(path: str | Path, size: Optional[tuple[int, int]] = None) -> list[np.ndarray]:
    d = Path(path)
    if (d / "frames").is_dir():
        d = d / "frames"
    files = list_frames(d)
    if not files:
        raise ConfigurationError(f"{path}: no PNG frames")
    return [load_png(f, size) for f in files]


# -------------------------------------------------------------------- commands


def cmd_make_synthetic(args: argparse.Namespace) -> None:
    out = Path(args.out)
    _setup_log(out, args)
    try:
        vx, vy = (float(x) for x in args.velocity.split(","))
    except ValueError:
        raise ConfigurationError(f"bad velocity {args.velocity!r}; expected vx,vy") from None
    rng = np.random.default_rng(args.seed)
    for i in range(args.count):
        jx, jy = rng.uniform(-args.velocity_jitter, args.velocity_jitter, size=2) if args.velocity_jitter else (0.0, 0.0)
        spec = SyntheticClipSpec(
            kind=args.kind,
            layer=args.layer,
            length=args.length,
            height=args.height,
            width=args.width,
            seed=args.seed + i,
            velocity=(vx + float(jx), vy + float(jy)),
            angular_velocity=args.angular_velocity,
            n_sprites=args.n_sprites,
        )
        clip = make_synthetic(spec)
        target = write_video(out / f"clip_{i:03d}", clip.clip.frames, clip.gt_flows)
        logger.info("wrote %s (%s, velocity %s)", target, spec.kind, spec.velocity)


def _train(args: argparse.Namespace, trainer: Callable, log_name: str) -> None:
    mcfg = _model_config(args)
    cfg = TrainConfig(
        model=mcfg,
        learning_rate=args.learning_rate,
        batch_size=args.batch_size,
        max_steps=args.max_steps,
        kl_weight=args.kl_weight,
        kl_warmup=args.kl_warmup,
        lam=args.lam,
        seed=args.seed,
        checkpoint_interval=args.checkpoint_interval,
        out_dir=args.out,
        trunk=args.trunk,
        target=args.target,
    )
    spec = DatasetSpec(
        root=args.data,
        height=mcfg.height,
        width=mcfg.width,
        clip_length=mcfg.steps + 1,
        split=_parse_split(args.split),
        seed=args.seed,
        stride=args.stride,
    )
    out = Path(args.out)
    _setup_log(out, args)
    if args.subset == "all":
        videos = list_videos(spec.root)
    else:
        train, test = split_videos(spec)
        videos = train if args.subset == "train" else test
    if not videos:
        raise ConfigurationError(f"{spec.root}: no videos in subset {args.subset!r}")
    dataset = load_dataset(videos, spec)
    logger.info("training on %d videos", len(dataset))
    result = trainer(dataset, cfg)
    logger.info("finished after %d steps; checkpoint %s", result.steps, result.checkpoint)
    from .plotting import plot_training_log

    plot_training_log(out / f"{log_name}.csv", out / f"{log_name}.png")


def cmd_train_flow(args: argparse.Namespace) -> None:
    _train(args, train_flow_vae, "train_flow_vae")


def cmd_train_frame(args: argparse.Namespace) -> None:
    _train(args, train_flow2rgb, "train_flow2rgb")


def cmd_predict(args: argparse.Namespace) -> None:
    # validate everything before touching the output directory
    vae = load_checkpoint(args.vae, expect=KIND_VAE)
    gen = load_checkpoint(args.gen, expect=KIND_GENERATOR)
    _check_pair(vae, gen)
    cfg = vae.config
    x0 = load_png(args.image, (cfg.height, cfg.width))
    out = Path(args.out)
    _setup_log(out, args)
    result = predict_sequence(x0, args.seed, vae, gen)
    _write_sequence(out, result.frames, result.flows, args.delay_ms)
    logger.info("wrote %d frames and flows to %s", len(result.frames), out)


def cmd_rollout(args: argparse.Namespace) -> None:
    gen = load_checkpoint(args.gen, expect=KIND_GENERATOR)
    cfg = gen.config
    size = (cfg.height, cfg.width)
    frames = _read_sequence(args.video, size)
    flows = load_flows(args.video)
    if flows is not None and flows.shape[1:3] != size:
        raise ConfigurationError(f"stored flows {flows.shape[1:3]} do not match generator resolution {size}")
    out = Path(args.out)
    _setup_log(out, args)
    if flows is None:
        logger.info("no stored flows; estimating them")
        est = CoarseToFineEstimator()
        flows = np.stack([est(frames[t], frames[t + 1]) for t in range(len(frames) - 1)])
    n = min(cfg.steps, len(flows))
    x0, gt, flows = frames[0], frames[1 : n + 1], flows[:n]
    modes = ("generate", "warp_only") if args.mode == "both" else (args.mode,)
    report = MetricsReport(metadata={"seed": args.seed, "config_hash": config_hash(_resolved(args))})
    runs = {m: rollout_with_flows(x0, flows, gen, mode=m) for m in modes}
    runs["copy"] = baseline_copy(x0, n)
    extractor = FeatureExtractor()
    for name, seq in runs.items():
        evaluate_sequences(name, seq, gt, report, extractor=extractor, x0=x0)
        logger.info("%s: mean frame RMSE %.5f", name, report.mean(name, "rmse_frames"))
    for m in modes:
        _write_sequence(out / m, runs[m], flows if m == modes[0] else None, args.delay_ms)
    report.to_csv(out / "metrics.csv")
    from .plotting import plot_metrics

    plot_metrics(report, out / "metrics.png")


def cmd_evaluate(args: argparse.Namespace) -> None:
    metrics = METRICS if args.metrics == "all" else tuple(m.strip() for m in args.metrics.split(","))
    unknown = set(metrics) - set(METRICS)
    if unknown:
        raise ConfigurationError(f"unknown metrics: {', '.join(sorted(unknown))}")
    names = args.names or [Path(p).name for p in args.pred]
    if len(names) != len(args.pred):
        raise ConfigurationError("--names needs one entry per --pred directory")
    gt = _read_sequence(args.gt)
    size = gt[0].shape[:2]
    preds = [_read_sequence(p, size) for p in args.pred]
    m = len(preds[0])
    x0 = None
    if len(gt) == m + 1:
        x0, gt = gt[0], gt[1:]
    if any(len(p) != len(gt) for p in preds):
        raise ConfigurationError(f"prediction lengths {[len(p) for p in preds]} do not match ground truth {len(gt)}")
    out = Path(args.out)
    logging.getLogger("still2video").addHandler(logging.StreamHandler())
    est = CoarseToFineEstimator()
    if args.flow_estimator == "ground_truth":
        gt_flows = load_flows(args.gt)
        if gt_flows is None:
            raise ConfigurationError(f"{args.gt}: no stored flows for the ground_truth estimator")
        est = GroundTruthEstimator(gt_flows)
    report = MetricsReport(metadata={"seed": args.seed, "config_hash": config_hash(_resolved(args))})
    extractor = FeatureExtractor(seed=1234)
    for name, seq in zip(names, preds):
        evaluate_sequences(name, seq, gt, report, metrics, extractor, est, x0)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.to_csv(out)
    from .plotting import plot_embedding, plot_metrics

    plot_metrics(report, out.with_suffix(".png"))
    if args.embedding:
        points = embed_sequences([gt, *preds], extractor, method=args.embed_method, ids=["gt", *names], seed=args.seed)
        write_embedding_csv(points, args.embedding)
        plot_embedding(points, Path(args.embedding).with_suffix(".png"), highlight="gt")


def cmd_export_gif(args: argparse.Namespace) -> None:
    frames = _read_sequence(args.frames)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    export_gif(frames, args.out, args.delay_ms)


def run(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    root = logging.getLogger("still2video")
    handlers_before = list(root.handlers)
    root.setLevel(logging.INFO)
    try:
        args = parse_args(argv)
        args._run(args)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except ConfigurationError as exc:
        print(f"still2video: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (Still2VideoError, OSError, ValueError) as exc:
        logger.error("%s", exc)
        print(f"still2video: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        for h in list(root.handlers):
            if h not in handlers_before:
                root.removeHandler(h)
                h.close()
    return EXIT_OK


def main() -> None:
    sys.exit(run())
