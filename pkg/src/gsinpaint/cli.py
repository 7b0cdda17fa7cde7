"""Command-line entry point.

    gsinpaint generate  --out DIR                      synthetic dataset
    gsinpaint train     --data DIR --out DIR           baseline training
    gsinpaint sgi       --data DIR --out DIR           baseline + selective inpainting rounds
    gsinpaint render    --scene FILE --data DIR --out DIR
    gsinpaint eval      --scene FILE --data DIR [--out DIR]
    gsinpaint gradcheck [--gaussians N]

Exit codes: 0 ok, 1 unexpected error, 2 usage or configuration error, 3 dataset not found,
4 depth alignment failure, 5 inpainter backend failure, 6 non-finite loss, 7 gradient check failed.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import config as cfgmod
from .fileio import heatmap, write_png, write_splr
from .metrics import evaluate
from .rasterizer import check_gradients, render, separated_scene
from .scene import Camera, SceneFormatError, load_scene
from .sgi import AlignmentError, ExternalDepthEstimator, ExternalInpainter, InpainterError
from .synthetic import DatasetNotFoundError, generate_dataset, load_dataset, save_dataset
from .trainer import (NonFiniteLossError, TrainingView, init_training, load_checkpoint, reference_set_for,
                      run, save_checkpoint, write_log)

log = logging.getLogger("gsinpaint")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_DATASET = 3
EXIT_ALIGNMENT = 4
EXIT_INPAINTER = 5
EXIT_NONFINITE = 6
EXIT_GRADCHECK = 7

COMMANDS = ("generate", "train", "sgi", "render", "eval", "gradcheck")


class UsageError(Exception):
    pass


@dataclass
class CommandConfig:
    command: str
    settings: cfgmod.Settings
    config_path: Optional[Path] = None
    overrides: list[str] = field(default_factory=list)
    out: Optional[Path] = None
    seed: Optional[int] = None
    data: Optional[Path] = None
    scene: Optional[Path] = None
    reference: Optional[int] = None
    resume: Optional[Path] = None
    views: Optional[list[int]] = None
    gaussians: int = 50


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gsinpaint", description="Depth-guided Gaussian-splat scene inpainting")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", type=Path, help="INI config file")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one option (repeatable)")
        sp.add_argument("--seed", type=int, help="seed for both scene generation and training")
        return sp

    common(sub.add_parser("generate", help="write a synthetic dataset")).add_argument("--out", type=Path, required=True)
    for name in ("train", "sgi"):
        sp = common(sub.add_parser(name, help="baseline training" if name == "train" else "full mode with SGI"))
        sp.add_argument("--data", type=Path, required=True)
        sp.add_argument("--out", type=Path, required=True)
        sp.add_argument("--reference", type=int, help="reference view id (default: largest mask)")
        if name == "sgi":
            sp.add_argument("--resume", type=Path, help="start from a trained scene file instead of training")
    sp = common(sub.add_parser("render", help="render color/depth/alpha/feature maps"))
    sp.add_argument("--scene", type=Path, required=True)
    sp.add_argument("--data", type=Path, required=True, help="dataset whose cameras to render")
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--views", help="comma-separated view ids (default: all)")
    sp = common(sub.add_parser("eval", help="PSNR/SSIM on held-out views"))
    sp.add_argument("--scene", type=Path, required=True)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--out", type=Path)
    sp = common(sub.add_parser("gradcheck", help="finite-difference check of the renderer gradients"))
    sp.add_argument("--gaussians", type=int, default=50)
    return p


def parse_cli(argv: Sequence[str]) -> CommandConfig:
    args = build_parser().parse_args(list(argv))
    text = None
    if args.config is not None:
        if not args.config.is_file():
            raise UsageError(f"config file {args.config} not found")
        text = args.config.read_text()
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides += [f"scene.seed={args.seed}", f"train.seed={args.seed}"]
    settings = cfgmod.resolve(text, overrides)
    views = None
    if getattr(args, "views", None):
        try:
            views = [int(x) for x in args.views.split(",") if x.strip()]
        except ValueError:
            raise UsageError(f"bad --views list {args.views!r}") from None
    return CommandConfig(
        command=args.command, settings=settings, config_path=args.config, overrides=args.overrides,
        out=getattr(args, "out", None), seed=args.seed, data=getattr(args, "data", None),
        scene=getattr(args, "scene", None), reference=getattr(args, "reference", None),
        resume=getattr(args, "resume", None), views=views, gaussians=getattr(args, "gaussians", 50),
    )


def _record(out: Path, cc: CommandConfig, seed: int) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfgmod.dump(cc.settings))
    (out / "seed.txt").write_text(f"{seed}\n")


def _inpainter(cc: CommandConfig, dataset):
    b = cc.settings.backend
    if b.inpainter == "external":
        return ExternalInpainter(b.command, b.timeout)
    if any(v.truth is None for v in dataset.views):
        raise InpainterError("the oracle backend needs truth.png for every view")
    return dataset.oracle(b.oracle_noise, cc.settings.train.seed)


def _training_views(cc: CommandConfig, dataset) -> list[TrainingView]:
    views = [TrainingView.from_dataset_view(v) for v in dataset.train_views]
    b = cc.settings.backend
    if b.depth_command:
        est = ExternalDepthEstimator(b.depth_command, b.timeout)
        for v in views:
            v.mono_depth = est(v.image)
            v.init_depth = None
    return views


def _train(cc: CommandConfig, mode: str) -> int:
    s = cc.settings
    dataset = load_dataset(cc.data)
    tc = s.train_config()
    inpainter = _inpainter(cc, dataset)
    views = _training_views(cc, dataset)
    refs = reference_set_for(views, inpainter, cc.reference)
    state = init_training(views, refs, tc)
    out = cc.out
    _record(out, cc, tc.seed)
    skip = False
    if mode == "full" and cc.resume is not None:
        load_checkpoint(state, cc.resume)
        skip = True
    heldout = [v for v in dataset.test_views if v.truth is not None]
    state, report = run(state, mode, inpainter if mode == "full" else None, heldout,
                        out / "checkpoints" if tc.checkpoint_every else None, skip_baseline=skip)
    save_checkpoint(state, out, "scene")
    write_log(state.history, out / "train_log.csv")
    if mode == "full":
        refdir = out / "references"
        refdir.mkdir(exist_ok=True)
        for i, e in enumerate(state.references.entries):
            write_png(refdir / f"{i:02d}_view{e.view_id:03d}.png", e.image)
            write_png(refdir / f"{i:02d}_view{e.view_id:03d}_mask.png", e.mask)
    reports = [r.evaluation for r in report.rounds if r.evaluation is not None]
    if reports:
        (out / "rounds.csv").write_text("".join(
            r.to_csv() if i == 0 else r.to_csv().split("\n", 1)[1] for i, r in enumerate(reports)))
        print(reports[-1].table())
    print(f"{mode}: {report.steps} steps, {report.sgi_rounds} SGI rounds, {len(state.scene)} Gaussians, "
          f"{report.seconds:.1f}s -> {out / 'scene.splf'}")
    return EXIT_OK


def _cameras(cc: CommandConfig):
    dataset = load_dataset(cc.data)
    views = dataset.views
    if cc.views is not None:
        known = {v.view_id for v in views}
        missing = sorted(set(cc.views) - known)
        if missing:
            raise UsageError(f"unknown view ids {missing}")
        views = [v for v in views if v.view_id in cc.views]
    return dataset, views


def _render(cc: CommandConfig) -> int:
    scene = load_scene(cc.scene)
    _, views = _cameras(cc)
    tc = cc.settings.train
    cc.out.mkdir(parents=True, exist_ok=True)
    for v in views:
        out = render(scene, v.camera, tc.background_color, tc.background_depth)
        stem = cc.out / f"view_{v.view_id:03d}"
        write_png(f"{stem}_color.png", out.color)
        write_png(f"{stem}_depth.png", heatmap(out.depth))
        write_splr(f"{stem}_depth.splr", out.depth)
        write_splr(f"{stem}_alpha.splr", out.alpha)
        write_splr(f"{stem}_feature.splr", out.feature)
    print(f"rendered {len(views)} views to {cc.out}")
    return EXIT_OK


def _eval(cc: CommandConfig) -> int:
    scene = load_scene(cc.scene)
    dataset = load_dataset(cc.data)
    views = [v for v in dataset.test_views if v.truth is not None] or \
        [v for v in dataset.views if v.truth is not None]
    if not views:
        raise DatasetNotFoundError(f"{cc.data} has no views with truth.png")
    tc = cc.settings.train
    report = evaluate(scene, views, tc.background_color, tc.background_depth)
    print(report.table())
    if cc.out is not None:
        cc.out.mkdir(parents=True, exist_ok=True)
        (cc.out / "report.csv").write_text(report.to_csv())
    return EXIT_OK


def _gradcheck(cc: CommandConfig) -> int:
    rng = np.random.default_rng(cc.settings.train.seed)
    cam = Camera.look_at((0.0, 0.0, 0.0), (0.0, 0.0, 3.0), fov_deg=50.0, width=40, height=32)
    scene = separated_scene(cc.gaussians, rng, cam)
    report = check_gradients(scene, cam, seed=cc.settings.train.seed)
    print(report.format())
    return EXIT_OK if report.passed else EXIT_GRADCHECK


def run_command(cc: CommandConfig) -> int:
    if cc.command == "generate":
        spec = cc.settings.scene
        dataset = generate_dataset(spec)
        save_dataset(dataset, cc.out)
        (cc.out / "config.ini").write_text(cfgmod.dump(cc.settings))
        print(f"wrote {len(dataset.views)} views ({len(dataset.train_views)} train) to {cc.out}")
        return EXIT_OK
    if cc.command == "train":
        return _train(cc, "baseline")
    if cc.command == "sgi":
        return _train(cc, "full")
    if cc.command == "render":
        return _render(cc)
    if cc.command == "eval":
        return _eval(cc)
    if cc.command == "gradcheck":
        return _gradcheck(cc)
    raise UsageError(f"unknown command {cc.command!r}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    logging.basicConfig(level=logging.INFO if ("-v" in argv or "--verbose" in argv) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run_command(parse_cli(argv))
    except (UsageError, cfgmod.ConfigError) as e:
        print(f"gsinpaint: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DatasetNotFoundError as e:
        print(f"gsinpaint: dataset not found: {e}", file=sys.stderr)
        return EXIT_DATASET
    except AlignmentError as e:
        print(f"gsinpaint: depth alignment failed: {e}", file=sys.stderr)
        return EXIT_ALIGNMENT
    except InpainterError as e:
        print(f"gsinpaint: inpainter failed: {e}", file=sys.stderr)
        return EXIT_INPAINTER
    except NonFiniteLossError as e:
        print(f"gsinpaint: {e}", file=sys.stderr)
        return EXIT_NONFINITE
    except (SceneFormatError, FileNotFoundError) as e:
        print(f"gsinpaint: {e}", file=sys.stderr)
        return EXIT_DATASET if isinstance(e, FileNotFoundError) else EXIT_ERROR
    except Exception as e:  # noqa: BLE001 - last-resort mapping to a nonzero status
        log.debug("unhandled error", exc_info=True)
        print(f"gsinpaint: error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
