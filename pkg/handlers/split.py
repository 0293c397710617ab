import logging
import os

from config import Config
from database.store import read_json, read_jsonl, read_lines, write_json
from features.splitting import (
    SPLITS, ClassHistogram, SplitManifest, load_index_split, parse_ratios, stratified_split, verify_split,
)
from handlers import arg, command, resolve_path, seed_of, write_resolved_config
from util.errors import ValidationError, VerificationFailure
from utils.helpers import gather_in_executor, load_mask

logger = logging.getLogger(__name__)


def _dataset(path: str) -> dict:
    """JSONL rows {id, mask, image?} -> {id: absolute mask path}, in file order."""
    masks = {}
    for row in read_jsonl(path):
        if "id" not in row or "mask" not in row:
            raise ValidationError(f"dataset row {row!r} needs 'id' and 'mask'")
        sid = str(row["id"])
        if sid in masks:
            raise ValidationError(f"duplicate sample id {sid!r} in {path}")
        masks[sid] = resolve_path(path, row["mask"])
    return masks


def _histogram_reader(num_classes: int, ignore_label: int):
    def read(mask_path: str) -> ClassHistogram | None:
        if not os.path.isfile(mask_path):
            return None
        return ClassHistogram.from_mask(load_mask(mask_path), num_classes, ignore_label)
    return read


async def _histograms(masks: dict, num_classes: int, ignore_label: int, workers: int) -> dict:
    ids = list(masks)
    hists = await gather_in_executor(_histogram_reader(num_classes, ignore_label), [masks[i] for i in ids], workers)
    return dict(zip(ids, hists))


@command(
    "split",
    help="build (stratified or from index files) or verify a train/val/test split",
    arguments=[
        arg("--manifest", help="dataset JSONL, one {id, image, mask} per line"),
        arg("--ratios", default="0.8,0.1,0.1", help="train,val,test fractions summing to 1"),
        arg("--from-index", default=None, help="train.txt,val.txt,test.txt: rebuild a published split"),
        arg("--verify", default=None, help="existing split manifest JSON to verify against the masks"),
        arg("--threshold", type=float, default=Config.JSD_THRESHOLD),
        arg("--strict", action="store_true", help="missing masks fail verification"),
        arg("--num-classes", type=int, default=Config.NUM_CLASSES),
        arg("--ignore-label", type=int, default=Config.IGNORE_LABEL),
        arg("--workers", type=int, default=Config.MAX_PARALLEL),
    ],
)
async def split(args):
    ratios = parse_ratios(args.ratios)
    if not args.manifest:
        raise ValidationError("--manifest is required")
    seed = seed_of(args)
    masks = _dataset(args.manifest)
    resolved = {"manifest": os.path.abspath(args.manifest), "ratios": list(ratios), "num_classes": args.num_classes,
                "ignore_label": args.ignore_label, "threshold": args.threshold, "strict": args.strict,
                "from_index": args.from_index, "verify": args.verify, "jsd_log_base": "e"}
    write_resolved_config(args, resolved)

    if args.verify:
        manifest = SplitManifest.from_dict(read_json(args.verify))
        reader = _histogram_reader(args.num_classes, args.ignore_label)
        report = verify_split(manifest, lambda sid: reader(masks[sid]) if sid in masks else None,
                              args.threshold, args.strict)
        write_json(os.path.join(args.out, "verify_report.json"), report.to_dict())
        print(f"JSD train/val={report.jsd_train_val:.6f} train/test={report.jsd_train_test:.6f} "
              f"threshold={args.threshold} -> {'PASS' if report.passed else 'FAIL'}")
        if not report.passed:
            raise VerificationFailure("split verification failed", **report.to_dict())
        return

    histograms = await _histograms(masks, args.num_classes, args.ignore_label, args.workers)
    missing = [sid for sid, h in histograms.items() if h is None]

    if args.from_index:
        files = args.from_index.split(",")
        if len(files) != 3:
            raise ValidationError("--from-index takes three comma-separated files (train, val, test)")
        index_ids = {s: read_lines(f) for s, f in zip(SPLITS, files)}
        manifest = load_index_split(index_ids, {k: h for k, h in histograms.items() if h is not None})
    else:
        if missing:
            raise ValidationError(f"{len(missing)} mask files are missing", missing=missing[:50])
        manifest = stratified_split(list(histograms.items()), ratios, seed)

    write_json(os.path.join(args.out, "split.json"), manifest.to_dict())
    print(f"{manifest.method} split of {len(manifest.assignments)} samples: "
          f"JSD train/val={manifest.jsd_train_val:.6f} train/test={manifest.jsd_train_test:.6f}")
