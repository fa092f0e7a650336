"""
Command line entry point.

    katana-lab eval --config configs/desk.yaml --out results/ --seed 7

Exit status is 0 on success, 2 for usage and configuration errors and 1 for
any other failure; failures also print one JSON error record on stderr.
"""

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import structlog
from dotenv import load_dotenv

from . import logs
from .augment import generate_ttas
from .config import FIT_MODES
from .data import Dataset, export_raw
from .exceptions import ConfigError, KatanaError
from .lab import KatanaLab
from .results import write_manifest
from .seeding import derive_seed

log = structlog.get_logger(__name__)


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise ConfigError(message, field="argv")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", required=True, help="experiment YAML file")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("--seed", type=int, help="experiment seed")
    common.add_argument("--workers", type=int, help="worker threads for per-image pipelines")
    common.add_argument("--model", help="trained model file to use instead of training one")
    common.add_argument("--log-level", help="debug, info, warning or error")
    common.add_argument("--progress", action="store_true", help="show progress bars")

    parser = _Parser(prog="katana-lab", description="TTA and KATANA adversarial robustness experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("train", parents=[common], help="train the plain classifier and save it")

    attack = sub.add_parser("attack", parents=[common], help="craft adversarial images for a split")
    attack.add_argument("--attack", action="append", help="attack name; repeatable, default all configured")
    attack.add_argument("--split", default="test", choices=("train", "train_val", "test", "test_val"))

    tta = sub.add_parser("tta", parents=[common], help="write augmented copies of images as PNG files")
    tta.add_argument("--split", default="test", choices=("train", "train_val", "test", "test_val"))
    tta.add_argument("--index", type=int, default=0, help="first image position in the split")
    tta.add_argument("--images", type=int, default=1)
    tta.add_argument("--count", type=int, default=8, help="augmentations per image")

    fit = sub.add_parser("fit-katana", parents=[common], help="fit and save KATANA heads")
    fit.add_argument("--defense", default="katana", choices=("katana", "katana-logreg"))
    fit.add_argument("--mode", choices=FIT_MODES, help="fit mode (default from config)")

    sub.add_parser("eval", parents=[common], help="full evaluation table")

    ablate = sub.add_parser("ablate", parents=[common], help="TTA-count and KATANA parameter ablations")
    ablate.add_argument("--what", default="both", choices=("n", "katana", "both"))
    ablate.add_argument("--plot", action="store_true", help="also render the N curve as PNG")

    transfer = sub.add_parser("transfer", parents=[common], help="KATANA transferability across attacks")
    transfer.add_argument("--mode", required=True, choices=FIT_MODES)
    return parser


def _lab(args: argparse.Namespace) -> KatanaLab:
    overrides: Dict[str, Any] = {}
    if args.out:
        overrides["output_dir"] = args.out
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.model:
        overrides["model_path"] = args.model
    return KatanaLab.from_file(args.config, show_progress=args.progress, **overrides)


def _train(lab: KatanaLab, args: argparse.Namespace) -> None:
    path = lab.models.save_plain()
    model = lab.models.plain()
    write_manifest(lab.output_dir / "manifest_train.json", {
        "config": lab.config.to_dict(),
        "model": str(path),
        "model_id": model.model_id,
        "training": {"epochs_run": model.info.epochs_run, "train_accuracy": model.info.train_accuracy,
                     "train_val_accuracy": model.info.train_val_accuracy, "final_lr": model.info.final_lr},
    })
    print(path)


def _attack(lab: KatanaLab, args: argparse.Namespace) -> None:
    names = args.attack or [a.name for a in lab.config.attacks]
    ds = lab.data.get(args.split)
    records = {}
    for name in names:
        result = lab.attacks.craft(name, args.split)
        path = lab.output_dir / "adversarial" / f"{name}-{args.split}.bin"
        path.parent.mkdir(parents=True, exist_ok=True)
        adversarial = Dataset(result.images, ds.labels, f"{ds.name}/{name}", ds.num_classes, ds.indices)
        export_raw(adversarial, path, pixels="f4")
        records[name] = {"path": str(path), "eps": result.eps, "linf": result.linf.tolist(),
                         "seed": derive_seed(lab.config.seed, "attack", name, args.split)}
        print(path)
    write_manifest(lab.output_dir / "manifest_attack.json",
                   {"config": lab.config.to_dict(), "split": args.split, "attacks": records})


def _tta(lab: KatanaLab, args: argparse.Namespace) -> None:
    from .plotting import save_png

    ds = lab.data.get(args.split)
    if not 0 <= args.index < len(ds):
        raise ConfigError(f"index {args.index} outside split '{args.split}' of size {len(ds)}", field="index")
    out = lab.output_dir / "tta"
    out.mkdir(parents=True, exist_ok=True)
    stop = min(len(ds), args.index + args.images)
    for i in range(args.index, stop):
        key = int(ds.indices[i]) if ds.indices is not None else i
        batch = generate_ttas(ds.images[i], lab.tta, derive_seed(lab.config.seed, "tta-preview", key), n=args.count)
        save_png(ds.images[i], out / f"{args.split}-{i}-original.png")
        for j, img in enumerate(batch):
            save_png(img, out / f"{args.split}-{i}-tta{j}.png")
    print(out)


def _fit_katana(lab: KatanaLab, args: argparse.Namespace) -> None:
    mode = args.mode or lab.config.katana.fit_mode
    fits = lab.defenses.fit_all(args.defense, mode, lab.config.attacks)
    paths = lab.defenses.save_fits(args.defense, mode, fits, lab.output_dir)
    write_manifest(lab.output_dir / "manifest_fit_katana.json",
                   {"config": lab.config.to_dict(), "defense": args.defense, "mode": mode, "models": paths})
    for path in sorted(set(paths.values())):
        print(path)


def _eval(lab: KatanaLab, args: argparse.Namespace) -> None:
    lab.experiments.evaluate()
    print(lab.output_dir / "results.csv")


def _ablate(lab: KatanaLab, args: argparse.Namespace) -> None:
    if args.what in ("n", "both"):
        lab.experiments.ablate_n()
        print(lab.output_dir / "ablate_n.csv")
        if args.plot:
            from .plotting import plot_n_curve

            print(plot_n_curve(lab.output_dir / "ablate_n.csv", lab.output_dir / "ablate_n.png"))
    if args.what in ("katana", "both"):
        lab.experiments.ablate_katana()
        print(lab.output_dir / "ablate_katana.csv")


def _transfer(lab: KatanaLab, args: argparse.Namespace) -> None:
    lab.experiments.transfer_eval(args.mode)
    print(lab.output_dir / f"transfer_{args.mode}.csv")


_HANDLERS = {
    "train": _train,
    "attack": _attack,
    "tta": _tta,
    "fit-katana": _fit_katana,
    "eval": _eval,
    "ablate": _ablate,
    "transfer": _transfer,
}


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    load_dotenv()
    try:
        args = build_parser().parse_args(argv)
        logs.configure(args.log_level or os.environ.get("KATANA_LAB_LOG_LEVEL", "info"))
        lab = _lab(args)
        Path(lab.output_dir).mkdir(parents=True, exist_ok=True)
        log.info("command_start", command=args.command, config=args.config, seed=lab.config.seed,
                 out=str(lab.output_dir))
        _HANDLERS[args.command](lab, args)
        return 0
    except ConfigError as exc:
        print(json.dumps(exc.to_record()), file=sys.stderr)
        return 2
    except KatanaError as exc:
        print(json.dumps(exc.to_record()), file=sys.stderr)
        return 1
    except OSError as exc:
        record = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record), file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())
