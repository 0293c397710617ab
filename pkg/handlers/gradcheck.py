import logging
import os
from dataclasses import replace

from database.store import write_json
from features.losses import HflpConfig, QerConfig
from features.model import LOSS_MODES, TINY, LossConfig, ToyModel, gradcheck, gradcheck_sample
from handlers import arg, command, seed_of, write_resolved_config
from util.errors import ValidationError, VerificationFailure

logger = logging.getLogger(__name__)


@command(
    "gradcheck",
    help="compare every analytic gradient of the tiny toy model with central differences",
    needs_out=False,
    arguments=[
        arg("--tolerance", type=float, default=1e-4),
        arg("--step", type=float, default=1e-5),
        arg("--mode", choices=LOSS_MODES, default="hflp+qer"),
        arg("--instances", type=int, default=1, help="random model/sample pairs to check"),
        arg("--size", type=int, default=8, help="side of the square check image"),
    ],
)
async def run_gradcheck(args):
    if args.instances < 1 or args.size < 4:
        raise ValidationError("--instances must be >= 1 and --size >= 4")
    seed = seed_of(args)
    loss_cfg = LossConfig(mode=args.mode, hflp=HflpConfig(epsilon=0.1), qer=QerConfig(lam=0.1))
    write_resolved_config(args, {"model": TINY.to_dict(), "loss": loss_cfg.to_dict(), "tolerance": args.tolerance,
                                 "step": args.step, "instances": args.instances, "size": args.size})

    worst = {}
    for i in range(args.instances):
        model = ToyModel(replace(TINY, seed=seed + i))
        sample = gradcheck_sample(seed + i, (args.size, args.size), TINY.num_classes)
        for name, err in gradcheck(model, sample, loss_cfg, args.step).items():
            worst[name] = max(worst.get(name, 0.0), err)

    width = max(len(n) for n in worst)
    for name, err in worst.items():
        print(f"{name:<{width}}  {err:.3e}")
    max_err = max(worst.values())
    print(f"max relative error {max_err:.3e} over {model.num_parameters()} parameters (tolerance {args.tolerance:g})")
    if args.out:
        write_json(os.path.join(args.out, "gradcheck.json"),
                   {"max_rel_err": max_err, "per_block": worst, "tolerance": args.tolerance,
                    "passed": max_err < args.tolerance})
    if not max_err < args.tolerance:
        raise VerificationFailure(f"gradient check failed: max relative error {max_err:.3e}", max_rel_err=max_err)
