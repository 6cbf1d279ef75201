"""Command-line entry point: ``buildpoly generate | train | infer | eval``."""
from __future__ import annotations

import argparse
import base64
import configparser
import io
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .data import SynthConfig, generate_scenes, load_coco_subset, synth_config_dict, write_coco_dataset
from .errors import ContractError, DataFormatError, DegenerateGeometryError, TrainingDivergedError
from .geometry import (
    PermutationMatrix,
    PolygonSet,
    decode_permutation,
    encode_polygons,
    read_geojson,
    write_geojson,
)
from .losses import LossConfig
from .metrics import EvalReport, evaluate
from .model import BackboneConfig, GnnConfig, ModelConfig, PolygonNet, VertexSet, predict
from .train import TrainConfig, Trainer, evaluate_model, load_model, save_report

log = logging.getLogger("buildpoly")

DATA_ENV = "BUILDPOLY_DATA"

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_CONFIG = 4
EXIT_DIVERGED = 5
EXIT_IO = 6


@dataclass
class RunConfig:
    """Validated options of one subcommand invocation."""

    command: str
    options: dict

    def header(self) -> str:
        width = max((len(k) for k in self.options), default=0)
        lines = [f"buildpoly {self.command}"]
        lines += [f"  {k:<{width}} = {v}" for k, v in sorted(self.options.items())]
        return "\n".join(lines)


# argument parsing ------------------------------------------------------------------


def _add_model_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model and loss hyperparameters")
    g.add_argument("--n-vertices", type=int, default=256, help="vertices kept after NMS")
    g.add_argument("--dim", type=int, default=64, help="descriptor and attention width")
    g.add_argument("--layers", type=int, default=4, help="attention layers")
    g.add_argument("--heads", type=int, default=4, help="attention heads")
    g.add_argument("--gamma", type=float, default=0.05, help="offset scale")
    g.add_argument("--omega", type=float, default=100.0, help="positive-class weight of the detection loss")
    g.add_argument("--sigma", type=float, default=10.0, help="angle loss sharpness")
    g.add_argument("--lam", type=float, default=1e3, help="rasterizer sign sharpness")
    g.add_argument("--sinkhorn-iters", type=int, default=100, help="Sinkhorn iterations")
    g.add_argument("--channels", default="16,32", help="backbone channel widths per scale")
    g.add_argument(
        "--residual",
        action=argparse.BooleanOptionalAction,
        default=True,
        help="residual connections in attention layers",
    )
    g.add_argument("--gnn-norm", choices=("vertex", "none"), default="vertex", help="per-layer normalization over vertices")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", type=Path, help="INI file whose [run] section sets option defaults")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="buildpoly", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    default_data = os.environ.get(DATA_ENV)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic COCO-style dataset")
    p.add_argument("--out", type=Path, default=default_data, required=default_data is None)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--min-buildings", type=int, default=1)
    p.add_argument("--max-buildings", type=int, default=3)
    p.add_argument("--shapes", default="rect,lshape", help="comma list of rect, rotated, lshape")

    p = sub.add_parser("train", parents=[common], help="two-phase training on a dataset directory")
    p.add_argument("--data", type=Path, default=default_data, required=default_data is None)
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.add_argument("--heldout", type=int, default=0, help="last K scenes are held out for evaluation")
    p.add_argument("--detection-steps", type=int, default=1000)
    p.add_argument("--full-steps", type=int, default=3000)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--checkpoint-every", type=int, default=500)
    p.add_argument("--resume", type=Path, help="continue from this checkpoint")
    _add_model_args(p)

    p = sub.add_parser("infer", parents=[common], help="predict polygons, write GeoJSON and SVG")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, default=default_data, required=default_data is None)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--no-offset", action="store_true", help="skip the learned position offsets")
    p.add_argument("--score", choices=("both", "clock", "count"), default="both")
    p.add_argument(
        "--gt-seeded",
        action="store_true",
        help="debug path: ground-truth corners as vertices and ground-truth connectivity",
    )

    p = sub.add_parser("eval", parents=[common], help="score GeoJSON predictions against a dataset")
    p.add_argument("--pred", type=Path, required=True, help="directory of <image_id>.geojson files")
    p.add_argument("--data", type=Path, default=default_data, required=default_data is None)
    p.add_argument("--out", type=Path, help="write the JSON report here")
    p.add_argument("--sample-spacing", type=float, default=1.0, help="MTA sampling step in pixels")
    p.add_argument("--workers", type=int, default=1)
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    """Parse ``argv``; a ``--config`` INI file supplies defaults that flags override."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    known, rest = pre.parse_known_args(argv)
    command = next((a for a in rest if a in COMMANDS), None)
    if known.config is None or command is None:
        return parser.parse_args(argv)
    ini = configparser.ConfigParser()
    if not ini.read(known.config, encoding="utf-8"):
        raise ContractError(f"config file {known.config} not found")
    if "run" not in ini:
        raise ContractError(f"{known.config}: missing [run] section")
    sub_action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    subparser = sub_action.choices[command]
    actions = {a.dest: a for a in subparser._actions}
    for key, raw in ini["run"].items():
        dest = key.replace("-", "_")
        action = actions.get(dest)
        if action is None or dest in ("command", "config", "help"):
            raise ContractError(f"{known.config}: unknown key {key!r}")
        if isinstance(action, argparse._StoreTrueAction):
            value = ini["run"].getboolean(key)
        else:
            value = action.type(raw) if action.type else raw
        action.default = value
        action.required = False
    return parser.parse_args(argv)


def _model_config(args: argparse.Namespace) -> ModelConfig:
    channels = tuple(int(c) for c in str(args.channels).split(",") if c.strip())
    return ModelConfig(
        backbone=BackboneConfig(channels=channels, descriptor_dim=args.dim),
        gnn=GnnConfig(
            layers=args.layers,
            heads=args.heads,
            dim=args.dim,
            offset_gamma=args.gamma,
            residual=args.residual,
            norm=args.gnn_norm,
        ),
        n_vertices=args.n_vertices,
        sinkhorn_iterations=args.sinkhorn_iters,
        seed=args.seed,
    )


def _validate(args: argparse.Namespace) -> RunConfig:
    opts = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k not in ("command", "config")}
    positive = ("count", "size", "batch_size", "n_vertices", "dim", "layers", "heads", "sinkhorn_iters", "workers")
    for key in positive:
        if key in opts and opts[key] is not None and opts[key] < 1:
            raise ContractError(f"--{key.replace('_', '-')} must be >= 1")
    for key in ("omega", "sigma", "lam", "lr", "sample_spacing"):
        if key in opts and opts[key] is not None and opts[key] <= 0:
            raise ContractError(f"--{key.replace('_', '-')} must be > 0")
    if args.command == "generate" and args.min_buildings > args.max_buildings:
        raise ContractError("--min-buildings exceeds --max-buildings")
    if args.command == "train":
        _model_config(args)
    return RunConfig(args.command, opts)


# subcommands ------------------------------------------------------------------------


def cmd_generate(args: argparse.Namespace) -> int:
    cfg = SynthConfig(
        size=args.size,
        min_buildings=args.min_buildings,
        max_buildings=args.max_buildings,
        shapes=tuple(s.strip() for s in args.shapes.split(",") if s.strip()),
        seed=args.seed,
    )
    scenes = generate_scenes(cfg, args.count)
    manifest = write_coco_dataset(scenes, args.out, {"generator": synth_config_dict(cfg)})
    print(f"wrote {len(scenes)} scenes to {args.out} (hash {manifest['hash'][:12]})")
    return EXIT_OK


def _split(scenes: list, heldout: int) -> tuple[list, list]:
    if heldout >= len(scenes):
        raise ContractError(f"--heldout {heldout} leaves no training scenes out of {len(scenes)}")
    if heldout <= 0:
        return scenes, []
    return scenes[:-heldout], scenes[-heldout:]


def cmd_train(args: argparse.Namespace) -> int:
    scenes = load_coco_subset(args.data)
    train_set, held = _split(scenes, args.heldout)
    loss = LossConfig(omega=args.omega, sigma=args.sigma, lam=args.lam)
    tcfg = TrainConfig(
        detection_steps=args.detection_steps,
        full_steps=args.full_steps,
        batch_size=args.batch_size,
        lr=args.lr,
        checkpoint_every=args.checkpoint_every,
        seed=args.seed,
        loss=loss,
    )
    if args.resume is not None:
        model = load_model(args.resume)
    else:
        model = PolygonNet(_model_config(args))
    trainer = Trainer(model, train_set, tcfg)
    if args.resume is not None:
        trainer.restore(args.resume)
    args.out.mkdir(parents=True, exist_ok=True)
    model.config.save(args.out / "model.ini")
    trainer.run(args.out)
    print(f"checkpoint written to {args.out / 'checkpoint.bin'}")
    if held:
        report = evaluate_model(model, held)
        save_report(report, args.out / "heldout_report.json")
        print(report.table())
    return EXIT_OK


def svg_overlay(image: np.ndarray, polys: PolygonSet) -> str:
    """SVG with the image embedded as PNG and polygons drawn in pixel units."""
    H, W = image.shape[:2]
    buf = io.BytesIO()
    Image.fromarray(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)).save(buf, format="PNG")
    href = "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode("ascii")
    scale = np.array([W, H])
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{8 * W}" height="{8 * H}" viewBox="0 0 {W} {H}">',
        f'<image href="{href}" width="{W}" height="{H}" style="image-rendering:pixelated"/>',
    ]
    for poly in polys.polygons:
        pts = " ".join(f"{x:.3f},{y:.3f}" for x, y in poly.vertices * scale)
        parts.append(f'<polygon points="{pts}" fill="none" stroke="#ff3030" stroke-width="0.4"/>')
        parts.extend(
            f'<circle cx="{x:.3f}" cy="{y:.3f}" r="0.6" fill="#30a0ff"/>' for x, y in poly.vertices * scale
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _gt_seeded_vertices(scene, n: int) -> tuple[VertexSet, np.ndarray]:
    corners = scene.corners()
    if len(corners) > n:
        raise ContractError(f"{len(corners)} ground-truth corners exceed n_vertices={n}")
    k = len(corners)
    pos = np.zeros((1, n, 2))
    pos[0, :k] = corners
    valid = np.zeros((1, n), dtype=bool)
    valid[0, :k] = True
    pixels = np.stack(
        [np.floor(pos[0, :, 1] * scene.height), np.floor(pos[0, :, 0] * scene.width)], axis=-1
    ).astype(np.int64)
    pixels = np.clip(pixels, 0, [scene.height - 1, scene.width - 1])[None]
    return VertexSet(pos, valid.astype(np.float64), valid, pixels), encode_polygons(scene.gt_polygons, n).next_clockwise


def cmd_infer(args: argparse.Namespace) -> int:
    if not args.checkpoint.exists():
        raise FileNotFoundError(f"checkpoint {args.checkpoint} not found")
    model = load_model(args.checkpoint)
    scenes = load_coco_subset(args.data)
    args.out.mkdir(parents=True, exist_ok=True)
    for scene in scenes:
        if args.gt_seeded:
            verts, nxt = _gt_seeded_vertices(scene, model.config.n_vertices)
            polys = decode_permutation(verts.positions[0], PermutationMatrix(nxt))
            conf = np.ones(len(polys))
        else:
            pred = predict(model, scene.image, use_offsets=not args.no_offset, score_mode=args.score)[0]
            polys, conf = pred.polygons, pred.confidences
        stem = f"{scene.image_id:06d}"
        write_geojson(args.out / f"{stem}.geojson", polys, scene.width, scene.height, conf)
        (args.out / f"{stem}.svg").write_text(svg_overlay(scene.image, polys), encoding="utf-8")
    print(f"wrote predictions for {len(scenes)} images to {args.out}")
    return EXIT_OK


def read_predictions(pred_dir: Path, scenes: Sequence) -> list[tuple[PolygonSet, np.ndarray]]:
    files = sorted(pred_dir.glob("*.geojson"))
    if len(files) != len(scenes):
        raise ContractError(f"{len(files)} prediction files vs {len(scenes)} ground-truth images")
    out = []
    for scene in scenes:
        path = pred_dir / f"{scene.image_id:06d}.geojson"
        if not path.exists():
            raise ContractError(f"no prediction for image {scene.image_id} ({path})")
        try:
            polys = read_geojson(path, scene.width, scene.height)
            feats = json.loads(path.read_text(encoding="utf-8"))["features"]
        except (json.JSONDecodeError, KeyError) as exc:
            raise DataFormatError(f"{path}: {exc}") from exc
        conf = np.array([float((f.get("properties") or {}).get("confidence", 1.0)) for f in feats])
        out.append((polys, conf))
    return out


def cmd_eval(args: argparse.Namespace) -> int:
    scenes = load_coco_subset(args.data)
    if not scenes:
        raise ContractError(f"{args.data} holds no images")
    preds = read_predictions(args.pred, scenes)
    shape = (scenes[0].height, scenes[0].width)
    report: EvalReport = evaluate(
        preds, [s.gt_polygons for s in scenes], shape, args.sample_spacing, args.workers
    )
    if args.out is not None:
        report.to_json(args.out)
    print(report.table())
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = _apply_config_file(parser, sys.argv[1:] if argv is None else list(argv))
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
        )
        run = _validate(args)
        print(run.header(), flush=True)
        return COMMANDS[args.command](args)
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ContractError, DegenerateGeometryError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
