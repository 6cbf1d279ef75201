"""Train a small polygon model on synthetic scenes and evaluate it.

The defaults finish in a few minutes on one core and show the two training
phases (detector only, then everything). Results at this size are rough;
longer runs with ``--detection-steps 1000 --full-steps 3000`` are what the
acceptance run uses.
"""

import argparse
import logging

from buildpoly.data import SynthConfig, generate_scenes
from buildpoly.model import ModelConfig, PolygonNet, predict
from buildpoly.train import TrainConfig, Trainer, evaluate_model

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--scenes", type=int, default=300)
parser.add_argument("--heldout", type=int, default=40)
parser.add_argument("--detection-steps", type=int, default=200)
parser.add_argument("--full-steps", type=int, default=200)
parser.add_argument("--out", default=None, help="optional run directory for logs and checkpoints")
args = parser.parse_args()
logging.basicConfig(level=logging.INFO, format="%(message)s")

scenes = generate_scenes(SynthConfig(seed=0), args.scenes)
train, held = scenes[: -args.heldout], scenes[-args.heldout :]
model = PolygonNet(ModelConfig(n_vertices=32))
config = TrainConfig(
    detection_steps=args.detection_steps,
    full_steps=args.full_steps,
    log_every=50,
    checkpoint_every=0,
)
Trainer(model, train, config).run(args.out)

report = evaluate_model(model, held)
print(report.table())

pred = predict(model, held[0].image)[0]
print(f"first held-out scene: {len(pred.polygons)} polygons predicted, {len(held[0].gt_polygons)} in ground truth")
for poly, conf in zip(pred.polygons.polygons, pred.confidences):
    print(f"  {len(poly)} corners, confidence {conf:.2f}")
