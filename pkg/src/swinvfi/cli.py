"""Command-line entry point.

Subcommands: gen-data, train, eval, interp, flops, dump-config. Results and
output paths go to stdout, diagnostics to stderr. Exit codes:

    0  success
    2  configuration error (bad flags, config keys or values)
    3  I/O error (missing or unreadable files)
    4  numeric divergence during training
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data as D
from . import evaluation as E
from . import network as N
from . import optics
from . import train as TR
from .tensor import ConfigurationError

log = logging.getLogger("swinvfi")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGENCE = 0, 2, 3, 4
SIDECAR = "effective_config.json"


@dataclass
class RunConfig:
    """Everything a command needs; ``seed`` drives both data generation and training."""

    seed: int = 1
    model: N.ModelConfig = field(default_factory=N.ModelConfig)
    train: TR.TrainConfig = field(default_factory=TR.TrainConfig)
    data: D.DataConfig = field(default_factory=D.DataConfig)
    paths: dict = field(default_factory=lambda: {"data": "data", "out": "runs/desk"})
    eval: dict = field(default_factory=lambda: {"split": "test", "crop": None, "panels": False})

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        train.pop("seed")
        return {"seed": self.seed, "model": self.model.to_dict(), "train": train,
                "data": self.data.to_dict(), "paths": dict(self.paths), "eval": dict(self.eval)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        allowed = {"seed", "model", "train", "data", "paths", "eval"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
        base = cls()
        seed = int(d.get("seed", base.seed))
        train = dict(d.get("train", {}))
        if "seed" in train:
            raise ConfigurationError("set the seed at the top level of the config, not inside 'train'")
        paths = {**base.paths, **d.get("paths", {})}
        evals = {**base.eval, **d.get("eval", {})}
        for name, section, known in (("paths", paths, base.paths), ("eval", evals, base.eval)):
            extra = set(section) - set(known)
            if extra:
                raise ConfigurationError(f"unknown {name} keys: {sorted(extra)}")
        try:
            return cls(
                seed=seed,
                model=N.ModelConfig.from_dict({**base.model.to_dict(), **d.get("model", {})}),
                train=TR.TrainConfig.from_dict({**base.train.to_dict(), **train, "seed": seed}),
                data=D.DataConfig.from_dict({**base.data.to_dict(), **d.get("data", {})}),
                paths=paths,
                eval=evals,
            )
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(str(exc)) from exc


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: the config must be a JSON object")
    return RunConfig.from_dict(raw)


def apply_flags(run: RunConfig, args: argparse.Namespace) -> RunConfig:
    """Flags override the file, which overrides the defaults."""
    if getattr(args, "seed", None) is not None:
        run.seed = args.seed
        run.train = replace(run.train, seed=args.seed)
    if getattr(args, "clips", None) is not None:
        run.data = replace(run.data, clips=args.clips)
    if getattr(args, "epochs", None) is not None:
        run.train = replace(run.train, epochs=args.epochs)
    if getattr(args, "crop", None) is not None:
        run.train = replace(run.train, crop=args.crop)
    if getattr(args, "stages", None) is not None:
        run.model = N.ModelConfig.from_dict({**run.model.to_dict(), "stages": args.stages})
    if getattr(args, "data", None) is not None:
        run.paths["data"] = args.data
    if getattr(args, "out", None) is not None:
        run.paths["out"] = args.out
    return run


def write_sidecar(directory: Path, run: RunConfig, command: str) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / SIDECAR
    path.write_text(json.dumps({"command": command, **run.to_dict()}, indent=1, sort_keys=True) + "\n")
    return path


# -- commands -------------------------------------------------------------------------------

def cmd_gen_data(run: RunConfig, args) -> int:
    root = Path(run.paths["data"])
    D.make_dataset(root, run.data, seed=run.seed)
    write_sidecar(root, run, "gen-data")
    print(root / D.MANIFEST)
    return EXIT_OK


def cmd_train(run: RunConfig, args) -> int:
    out = Path(run.paths["out"])
    write_sidecar(out, run, "train")
    dataset = D.Dataset(run.paths["data"])
    result = TR.train(run.model, run.train, dataset, out, resume=args.checkpoint)
    log.info("trained %d epochs in %.1f s; best epoch %d", len(result.epochs), result.seconds, result.best_epoch)
    print(out / "best.ckpt")
    print(out / "loss.csv")
    return EXIT_OK


def cmd_eval(run: RunConfig, args) -> int:
    dataset = D.Dataset(run.paths["data"])
    out = Path(run.paths["out"])
    panels = out / "panels" if (args.panels or run.eval.get("panels")) else None
    split = args.split or run.eval["split"]
    crop = run.eval.get("crop")
    if args.baseline:
        report = E.evaluate(E.baseline_predictor(args.baseline), dataset, split, run.model.layout, crop,
                            panel_dir=panels)
        name = f"metrics_{args.baseline}.csv"
    else:
        if args.checkpoint is None:
            raise ConfigurationError("eval needs --checkpoint or --baseline")
        cfg, params, _, _ = N.load_checkpoint(args.checkpoint)
        run.model = cfg
        report = E.evaluate_model(cfg, params, dataset, split, crop, panel_dir=panels)
        name = "metrics.csv"
    write_sidecar(out, run, "eval")
    path = out / name
    report.write_csv(path)
    log.info("evaluated %d septuplets in %.1f s", report.aggregate.get("septuplets", 0), report.wall_time)
    print(path)
    return EXIT_OK


def _load_input_frame(path: str, layout: str) -> np.ndarray:
    """One stored 16-bit mosaic PNG -> a network-space frame."""
    mosaic = optics.read_png16(path)
    if layout == "mosaic":
        return mosaic[None]
    return D.to_layout(optics.demosaic(mosaic), layout)


def cmd_interp(run: RunConfig, args) -> int:
    if len(args.frames) != 6:
        raise ConfigurationError(f"interp needs exactly six frame paths, got {len(args.frames)}")
    if args.checkpoint is None:
        raise ConfigurationError("interp needs --checkpoint")
    cfg, params, _, _ = N.load_checkpoint(args.checkpoint)
    run.model = cfg
    frames = np.stack([_load_input_frame(p, cfg.layout) for p in args.frames]).astype(np.float32)
    pred = np.clip(E.model_predictor(cfg, params)(frames), 0.0, 1.0)
    out = Path(run.paths["out"])
    out.mkdir(parents=True, exist_ok=True)
    frame_path = out / "interp.png"
    if cfg.layout == "rgb":
        optics.write_png16(frame_path, pred.mean(axis=0))
        print(frame_path)
    else:
        quad = E.frame_quad(pred, cfg.layout)
        optics.write_png16(frame_path, pred[0] if cfg.layout == "mosaic" else optics.mosaic(quad))
        maps = optics.polarization_maps(quad)
        vis_path = out / "interp_aolp_dolp.png"
        optics.write_png8_rgb(vis_path, optics.visualize_aolp_dolp(maps.aolp, maps.dolp))
        print(frame_path)
        print(vis_path)
    write_sidecar(out, run, "interp")
    return EXIT_OK


def flops_table(cfg: N.ModelConfig, height: int, width: int) -> str:
    lines = [f"{'module':<24}{'flops':>16}"]
    for name, value in N.flops_breakdown(cfg, height, width).items():
        lines.append(f"{name:<24}{value:>16d}")
    lines += [
        f"{'total flops':<24}{N.count_flops(cfg, height, width):>16d}",
        f"{'attention flops':<24}{N.attention_flops(cfg, height, width):>16d}",
        f"{'params shared':<24}{N.shared_params(cfg):>16d}",
        f"{'params per stage':<24}{(N.count_params(cfg) - N.shared_params(cfg)) // cfg.stages:>16d}",
        f"{'params total':<24}{N.count_params(cfg):>16d}",
    ]
    return "\n".join(lines)


def cmd_flops(run: RunConfig, args) -> int:
    print(flops_table(run.model, args.height, args.width))
    return EXIT_OK


def cmd_dump_config(run: RunConfig, args) -> int:
    print(json.dumps(run.to_dict(), indent=1, sort_keys=True))
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="swinvfi", description="Polarized video frame interpolation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *extra):
        p.add_argument("--config", help="JSON run config; flags override it")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        for flag in extra:
            if flag == "data":
                p.add_argument("--data", help="dataset directory")
            elif flag == "checkpoint":
                p.add_argument("--checkpoint", help="checkpoint file")
            else:
                p.add_argument(f"--{flag}", type=int)
        return p

    g = common(sub.add_parser("gen-data", help="render a synthetic dataset"), "clips")
    g.set_defaults(func=cmd_gen_data, out_is_data=True)
    t = common(sub.add_parser("train", help="train a model"), "data", "checkpoint", "epochs", "crop", "stages")
    t.set_defaults(func=cmd_train)
    e = common(sub.add_parser("eval", help="score a checkpoint or a baseline on a split"), "data", "checkpoint")
    e.add_argument("--split", choices=["train", "val", "test"])
    e.add_argument("--baseline", choices=["copy", "average"])
    e.add_argument("--panels", action="store_true", help="write per-clip PNG panels")
    e.set_defaults(func=cmd_eval)
    i = common(sub.add_parser("interp", help="interpolate the middle frame from six mosaic PNGs"), "checkpoint")
    i.add_argument("frames", nargs="+", help="six 16-bit mosaic PNGs: I-2 I-1 I0 I1 I2 I3")
    i.set_defaults(func=cmd_interp)
    f = common(sub.add_parser("flops", help="print parameter and FLOP counts"), "stages")
    f.add_argument("--height", type=int, default=32)
    f.add_argument("--width", type=int, default=32)
    f.set_defaults(func=cmd_flops)
    d = common(sub.add_parser("dump-config", help="print the effective config"), "stages", "epochs", "crop", "clips")
    d.set_defaults(func=cmd_dump_config)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = load_config(args.config)
        if getattr(args, "out_is_data", False) and args.out is not None:
            args.data, args.out = args.out, None
        run = apply_flags(run, args)
        return args.func(run, args)
    except TR.DivergenceError as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGENCE
    except (ConfigurationError, ValueError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
