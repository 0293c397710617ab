import logging
import os

from config import Config
from database.store import read_lines, write_json
from features.metrics import BoundaryAccumulator, ConfusionMatrix, summarize
from handlers import arg, command, write_resolved_config
from util.errors import ValidationError
from util.render_template import write_report
from utils.helpers import gather_in_executor, load_mask

logger = logging.getLogger(__name__)

MASK_SUFFIXES = (".png",)


def _mask_files(directory: str) -> set[str]:
    if not os.path.isdir(directory):
        raise ValidationError(f"directory not found: {directory}", path=directory)
    return {f for f in os.listdir(directory) if f.lower().endswith(MASK_SUFFIXES)}


def paired_files(pred_dir: str, gt_dir: str) -> list[str]:
    """File names present in both directories; any unpaired file is an input error."""
    preds, gts = _mask_files(pred_dir), _mask_files(gt_dir)
    if preds != gts:
        only_pred = sorted(preds - gts)
        only_gt = sorted(gts - preds)
        raise ValidationError(
            f"prediction and ground-truth sets differ ({len(preds)} vs {len(gts)} files); "
            f"without ground truth: {only_pred}; without prediction: {only_gt}",
            without_ground_truth=only_pred, without_prediction=only_gt,
        )
    if not preds:
        raise ValidationError(f"no mask files in {gt_dir}")
    return sorted(preds)


def _scorer(args):
    def score(name: str):
        pred = load_mask(os.path.join(args.pred_dir, name))
        gt = load_mask(os.path.join(args.gt_dir, name))
        if pred.shape != gt.shape:
            raise ValidationError(f"{name}: prediction {pred.shape} and ground truth {gt.shape} differ", file=name)
        cm = ConfusionMatrix(args.num_classes, args.ignore_label).accumulate(pred, gt)
        boundary = BoundaryAccumulator(args.num_classes, args.d_frac, args.ignore_label).accumulate(pred, gt)
        return cm, boundary
    return score


@command(
    "eval",
    help="mIoU, mAcc, aAcc and boundary IoU of predicted masks against ground truth",
    arguments=[
        arg("--pred-dir", required=True),
        arg("--gt-dir", required=True),
        arg("--num-classes", type=int, default=Config.NUM_CLASSES),
        arg("--ignore-label", type=int, default=Config.IGNORE_LABEL),
        arg("--d-frac", type=float, default=Config.BOUNDARY_DFRAC),
        arg("--class-names", default=None, help="text file, one class name per line"),
        arg("--workers", type=int, default=Config.MAX_PARALLEL),
    ],
)
async def evaluate(args):
    names = paired_files(args.pred_dir, args.gt_dir)
    class_names = read_lines(args.class_names) if args.class_names else [str(c) for c in range(args.num_classes)]
    if len(class_names) != args.num_classes:
        raise ValidationError(f"{len(class_names)} class names for {args.num_classes} classes")
    write_resolved_config(args, {"pred_dir": os.path.abspath(args.pred_dir), "gt_dir": os.path.abspath(args.gt_dir),
                                 "num_classes": args.num_classes, "ignore_label": args.ignore_label,
                                 "d_frac": args.d_frac, "images": len(names)})

    partials = await gather_in_executor(_scorer(args), names, args.workers)
    cm = ConfusionMatrix(args.num_classes, args.ignore_label)
    boundary = BoundaryAccumulator(args.num_classes, args.d_frac, args.ignore_label)
    for part_cm, part_boundary in partials:
        cm = cm + part_cm
        boundary = boundary.merge(part_boundary)

    summary = summarize(cm)
    per_class_biou, mean_biou = boundary.summarize()
    metrics = {**summary.to_dict(), "mbiou": mean_biou, "boundary_iou": mean_biou,
               "per_class_boundary_iou": per_class_biou, "images": len(names), "pixel_counts": cm.pixel_counts(),
               "config": {"num_classes": args.num_classes, "ignore_label": args.ignore_label, "d_frac": args.d_frac}}
    write_json(os.path.join(args.out, "metrics.json"), metrics)

    per_class = [{"name": class_names[c], "iou": summary.per_class_iou[c], "acc": summary.per_class_acc[c],
                  "boundary_iou": per_class_biou[c]} for c in range(args.num_classes)]
    await write_report(args.out, "eval_report.md.j2", images=len(names), num_classes=args.num_classes,
                       ignore_label=args.ignore_label, d_frac=args.d_frac, summary=summary,
                       boundary_iou=mean_biou, per_class=per_class)
    print(f"mIoU {summary.miou:.4f}  mAcc {summary.macc:.4f}  aAcc {summary.aacc:.4f}  "
          f"boundary IoU {'n/a' if mean_biou is None else f'{mean_biou:.4f}'}")
