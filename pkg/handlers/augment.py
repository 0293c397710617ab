import logging
import os

from database.store import read_json, read_jsonl, write_jsonl
from features.augmentation import PRESETS, AugmentConfig, apply_with_record, preset
from handlers import arg, command, resolve_path, seed_of, write_resolved_config
from util.errors import ValidationError
from util.sample import Sample
from utils.helpers import gather_in_executor, load_image, load_mask, save_image, save_mask, stable_sample_id

logger = logging.getLogger(__name__)


def _config(args) -> AugmentConfig:
    overrides = read_json(args.config) if args.config else {}
    overrides["seed"] = seed_of(args)
    if args.crop:
        overrides["crop"] = [int(x) for x in args.crop.split(",")]
    try:
        if args.preset:
            base = preset(args.preset).to_dict()
            base.update(overrides)
            return AugmentConfig.from_dict(base)
        return AugmentConfig.from_dict(overrides)
    except TypeError as e:
        raise ValidationError(f"invalid augmentation config: {e}")


def _worker(cfg: AugmentConfig, manifest_path: str, out: str):
    def run(row: dict) -> dict:
        sid = str(row["id"])
        sample = Sample(load_image(resolve_path(manifest_path, row["image"])),
                        load_mask(resolve_path(manifest_path, row["mask"])), {"id": sid})
        result, record = apply_with_record(sample, cfg, stable_sample_id(sid))
        image_path = os.path.join("images", f"{sid}.png")
        mask_path = os.path.join("masks", f"{sid}.png")
        save_image(os.path.join(out, image_path), result.image)
        save_mask(os.path.join(out, mask_path), result.mask)
        return {"id": sid, "image": image_path, "mask": mask_path, "record": record}
    return run


@command(
    "augment",
    help="apply the Texture-First augmentation pipeline to a dataset manifest",
    arguments=[
        arg("--manifest", required=True, help="dataset JSONL, one {id, image, mask} per line"),
        arg("--config", default=None, help="JSON document of augmentation settings"),
        arg("--preset", default=None, choices=sorted(PRESETS)),
        arg("--crop", default=None, help="H,W crop size"),
        arg("--workers", type=int, default=4),
    ],
)
async def augment(args):
    rows = read_jsonl(args.manifest)
    for row in rows:
        if not {"id", "image", "mask"} <= set(row):
            raise ValidationError(f"dataset row {row!r} needs 'id', 'image' and 'mask'")
        if os.path.basename(str(row["id"])) != str(row["id"]) or str(row["id"]) in ("", ".", ".."):
            raise ValidationError(f"sample id {row['id']!r} cannot be used as a file name")
    cfg = _config(args)
    write_resolved_config(args, {"manifest": os.path.abspath(args.manifest), "preset": args.preset,
                                 "augment": cfg.to_dict()})
    for sub in ("images", "masks"):
        os.makedirs(os.path.join(args.out, sub), exist_ok=True)

    records = await gather_in_executor(_worker(cfg, args.manifest, args.out), rows, args.workers)
    write_jsonl(os.path.join(args.out, "augmented.jsonl"), records)
    logger.info(f"augmented {len(records)} samples into {args.out}")
    print(f"augmented {len(records)} samples")
