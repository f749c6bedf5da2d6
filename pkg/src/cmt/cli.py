"""Command-line entry point: ``cmt <command> ...``.

Exit codes: 0 success, 1 self-check failure, 2 invalid config,
3 missing or unwritable files, 4 training diverged.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import yaml

from . import __version__
from . import numerics as nx
from . import trainer
from .detector import load_checkpoint
from .errors import ConfigInvalid, TrainingDiverged
from .evaluation import dump_detections, evaluate, predict
from .selfcheck import format_table, run_checks
from .synth_data import DomainParams, GenConfig, generate_dataset, load_dataset, manifest_hash, save_dataset
from .trainer import TrainConfig

EXIT_OK, EXIT_SELFCHECK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 0, 1, 2, 3, 4
NOISE_FRACTIONS = (0.0, 0.25, 0.5, 0.75, 1.0)

log = logging.getLogger("cmt")


class CLIError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class RunManifest:
    command: str
    config: dict
    dataset: dict
    artifacts: Dict[str, str]
    started: str
    finished: str = ""
    version: str = __version__
    extra: dict = field(default_factory=dict)

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# ------------------------------------------------------------------ helpers

def _parse_seeds(text: str) -> List[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise CLIError(EXIT_CONFIG, f"--seeds must be comma-separated integers, got {text!r}")


def _parse_floats(text: str) -> List[float]:
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise CLIError(EXIT_CONFIG, f"expected comma-separated numbers, got {text!r}")


def load_config(path: Optional[str], overrides: Optional[dict] = None) -> TrainConfig:
    """Flat YAML mapping of TrainConfig fields, then flag overrides on top."""
    values: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise CLIError(EXIT_IO, f"cannot read config {path}: {e}")
        try:
            loaded = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise CLIError(EXIT_CONFIG, f"config {path} is not valid YAML: {e}")
        if loaded is not None and not isinstance(loaded, dict):
            raise CLIError(EXIT_CONFIG, f"config {path} must be a key-value mapping")
        values.update(loaded or {})
    values.update(overrides or {})
    try:
        return TrainConfig.from_dict(values)
    except (ConfigInvalid, TypeError, ValueError) as e:
        raise CLIError(EXIT_CONFIG, f"invalid config: {e}")


def _load_data(path: str):
    root = Path(path)
    if not (root / "manifest.json").is_file():
        raise CLIError(EXIT_IO, f"no dataset at {root} (manifest.json missing)")
    try:
        ds = load_dataset(root)
    except (OSError, KeyError, ValueError) as e:
        raise CLIError(EXIT_IO, f"cannot load dataset {root}: {e}")
    manifest = json.loads((root / "manifest.json").read_text())
    return ds, {"path": str(root.resolve()), "manifest_sha256": manifest_hash(manifest),
                "splits": {k: v["sha256"] for k, v in manifest["splits"].items()}}


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CLIError(EXIT_IO, f"cannot create {out}: {e}")
    return out


def _train_overrides(args) -> dict:
    over = {}
    if args.no_contrastive:
        over["contrastive_enabled"] = False
    if args.no_class_contrast:
        over["class_based_contrast"] = False
    if args.single_scale:
        over["multi_scale"] = False
    if args.noise is not None:
        over["noise_fraction"] = args.noise
    if args.seed is not None:
        over["seed"] = args.seed
    if args.max_iters is not None:
        over["max_iters"] = args.max_iters
    if args.burn_in_iters is not None:
        over["burn_in_iters"] = args.burn_in_iters
    return over


# ----------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    try:
        domain = DomainParams(fog_density=args.fog, blur_sigma=args.blur, noise_std=args.noise_std,
                              brightness_shift=args.brightness)
        gen = GenConfig(image_size=args.image_size, max_objects=args.max_objects, domain=domain)
    except ConfigInvalid as e:
        raise CLIError(EXIT_CONFIG, str(e))
    if args.scenes < 1 or args.eval_scenes < 1:
        raise CLIError(EXIT_CONFIG, "--scenes and --eval-scenes must be positive")
    ds = generate_dataset(args.seed, gen, n_train=args.scenes, n_eval=args.eval_scenes)
    out = _out_dir(args.out)
    try:
        manifest = save_dataset(ds, out)
    except OSError as e:
        raise CLIError(EXIT_IO, f"cannot write dataset to {out}: {e}")
    print(json.dumps({"out": str(out), "manifest_sha256": manifest_hash(manifest)}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, _train_overrides(args))
    ds, data_info = _load_data(args.data)
    out = _out_dir(args.out)
    started = _now()
    every = max(1, cfg.max_iters // 20)

    def progress(rec):
        if rec["iter"] % every == 0:
            log.info("iter %d L_total %.4f pseudo %d", rec["iter"], rec["L_total"], rec["num_pseudo_labels"])

    try:
        result = trainer.run(cfg, ds, out_dir=out, progress=progress)
    except TrainingDiverged as e:
        raise CLIError(EXIT_DIVERGED, f"training diverged: {e}")
    artifacts = {"metrics": "metrics.jsonl", "checkpoint": "checkpoint.json"}
    if args.dump_detections:
        dets = predict(result.teacher, ds.target_eval.images, cfg.detector)
        dump_detections(ds.target_eval, dets, out / "detections")
        artifacts["detections"] = "detections/"
    RunManifest("train", cfg.to_dict(), data_info, artifacts, started, _now(),
                extra={"burn_in_map50": result.burn_in_map, "final_map50": result.final_map}).write(out)
    print(json.dumps({"out": str(out), "burn_in_map50": result.burn_in_map, "final_map50": result.final_map}))
    return EXIT_OK


def cmd_eval(args) -> int:
    path = Path(args.checkpoint)
    if not path.is_file():
        raise CLIError(EXIT_IO, f"checkpoint {path} not found")
    try:
        student, teacher, det_cfg, _ = load_checkpoint(path)
    except (OSError, KeyError, ValueError) as e:
        raise CLIError(EXIT_IO, f"cannot read checkpoint {path}: {e}")
    ds, _ = _load_data(args.data)
    model = teacher if args.model == "teacher" else student
    dets = predict(model, ds.target_eval.images, det_cfg)
    result = evaluate(model, ds.target_eval, det_cfg, detections=dets)
    if args.dump_detections:
        dump_detections(ds.target_eval, dets, args.dump_detections)
    print(result.dumps())
    return EXIT_OK


def _write_csv(out: Path, name: str, rows) -> str:
    try:
        (out / name).write_text(trainer.rows_to_csv(rows))
    except OSError as e:
        raise CLIError(EXIT_IO, f"cannot write {out / name}: {e}")
    return name


def cmd_sweep_noise(args) -> int:
    cfg = load_config(args.config)
    seeds = _parse_seeds(args.seeds)
    fractions = _parse_floats(args.fractions)
    ds, data_info = _load_data(args.data)
    out = _out_dir(args.out)
    started = _now()
    rows = trainer.noise_sweep(cfg, ds, fractions, seeds, jobs=args.jobs)
    name = _write_csv(out, "noise_sweep.csv", rows)
    runs = [{"fraction": f, "variant": v, "seed": s} for f in fractions for v in trainer.VARIANTS for s in seeds]
    RunManifest("sweep-noise", cfg.to_dict(), data_info, {"csv": name}, started, _now(),
                extra={"runs": runs}).write(out)
    sys.stdout.write(trainer.rows_to_csv(rows))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    seeds = _parse_seeds(args.seeds)
    ds, data_info = _load_data(args.data)
    out = _out_dir(args.out)
    started = _now()
    rows = trainer.ablate(cfg, ds, seeds, jobs=args.jobs)
    name = _write_csv(out, "ablation.csv", rows)
    runs = [{"config": c, "seed": s} for c, _ in trainer.ABLATIONS for s in seeds]
    RunManifest("ablate", cfg.to_dict(), data_info, {"csv": name}, started, _now(),
                extra={"runs": runs}).write(out)
    sys.stdout.write(trainer.rows_to_csv(rows))
    return EXIT_OK


def _perturbed_roi_align(features, boxes, out_size, **kw):
    out = nx.roi_align_many(features, boxes, out_size, **kw)
    out.data = out.data + 1e-6
    return out


def cmd_selfcheck(args) -> int:
    roi_fn = _perturbed_roi_align if args.perturb_roi_align else None
    results = run_checks(seed=args.seed, roi_fn=roi_fn)
    print(format_table(results))
    failed = [r for r in results if not r.passed]
    if failed:
        print("failed: " + ", ".join(f"{r.category}: {r.name}" for r in failed), file=sys.stderr)
        return EXIT_SELFCHECK
    return EXIT_OK


# ------------------------------------------------------------------- parser

def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--no-contrastive", action="store_true", help="disable the contrastive branch")
    p.add_argument("--no-class-contrast", action="store_true", help="instance-level positives only")
    p.add_argument("--single-scale", action="store_true", help="contrast on the first feature level only")
    p.add_argument("--noise", type=float, default=None, metavar="F", help="pseudo-label noise fraction")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--max-iters", type=int, default=None)
    p.add_argument("--burn-in-iters", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"cmt {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic source/target dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, default=500, help="images per training split")
    p.add_argument("--eval-scenes", type=int, default=100)
    p.add_argument("--fog", type=float, default=0.5)
    p.add_argument("--blur", type=float, default=1.0)
    p.add_argument("--noise-std", type=float, default=DomainParams().noise_std, help="target sensor noise")
    p.add_argument("--brightness", type=float, default=0.0)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--max-objects", type=int, default=6)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="burn-in plus mean-teacher adaptation")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-detections", action="store_true", help="write PNGs of teacher detections")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on the target eval split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--model", choices=("teacher", "student"), default="teacher")
    p.add_argument("--dump-detections", metavar="DIR")
    p.set_defaults(func=cmd_eval)

    for name, func, helptext in (("sweep-noise", cmd_sweep_noise, "baseline vs cmt across label-noise levels"),
                                 ("ablate", cmd_ablate, "contrastive component ablation")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config")
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--seeds", default="0,1,2")
        p.add_argument("--jobs", type=int, default=1)
        if name == "sweep-noise":
            p.add_argument("--fractions", default=",".join(str(f) for f in NOISE_FRACTIONS))
        p.set_defaults(func=func)

    p = sub.add_parser("selfcheck", help="run built-in oracle checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--perturb-roi-align", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CLIError as e:
        print(f"cmt: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
