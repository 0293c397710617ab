import asyncio
import logging
import os
from dataclasses import replace

from database.store import read_json, write_csv, write_json
from features.training import TrainConfig, train
from handlers import arg, command, seed_of, write_resolved_config

logger = logging.getLogger(__name__)

LOSS_CURVE_HEADER = ["step", "loss", "pixel_loss", "query_loss", "qer_loss", "lr_backbone", "lr_head"]
GRADNORM_HEADER = ["step", "grad_norm", "backbone_norm", "head_norm"]


def load_train_config(args) -> TrainConfig:
    cfg = TrainConfig.from_dict(read_json(args.config)) if args.config else TrainConfig()
    overrides = {"seed": seed_of(args)}
    if args.steps is not None:
        overrides.update(steps=args.steps, epochs=None, epoch_preset=None)
    return replace(cfg, **overrides)


@command(
    "train-toy",
    help="train the toy segmentation model on synthetic texture scenes",
    arguments=[
        arg("--config", default=None, help="JSON training config; omitted keys take their defaults"),
        arg("--steps", type=int, default=None, help="override the step budget"),
    ],
)
async def train_toy(args):
    cfg = load_train_config(args)
    write_resolved_config(args, cfg.to_dict())

    loop = asyncio.get_running_loop()
    result = await loop.run_in_executor(None, train, cfg, args.out)

    write_csv(os.path.join(args.out, "loss_curve.csv"), LOSS_CURVE_HEADER, result.loss_curve)
    write_csv(os.path.join(args.out, "gradnorm.csv"), GRADNORM_HEADER, result.grad_norms)
    write_json(os.path.join(args.out, "metrics.json"), {**result.metrics, "query_usage": result.query_usage.to_dict(),
                                                       "metadata": result.metadata})
    print(f"held-out mIoU {result.metrics['miou']:.4f} after {result.metadata['total_steps']} steps")
