"""Command-line driver: generate-data, train-source, adapt, evaluate, overlay, report.

Every command accepts ``--config FILE.json``; explicit flags override values
from the file, and the resolved configuration is written next to the outputs.
Relative output paths are placed under ``$MUVI_TTA_OUTPUT_ROOT`` when it is set.

Exit codes: 0 success, 2 user or configuration error, 1 internal error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import traceback
from dataclasses import replace
from pathlib import Path

from . import __version__
from .errors import MuviError, NormUnsupported

log = logging.getLogger("muvi_tta")

OUTPUT_ROOT_ENV = "MUVI_TTA_OUTPUT_ROOT"
MANIFEST = "manifest.csv"


class UserError(Exception):
    """Bad arguments or inputs; reported with exit code 2."""


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def output_path(path) -> Path:
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def load_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise UserError(f"config file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UserError(f"{path}: invalid JSON ({exc})") from exc


def resolve(defaults: dict, block: dict, args: argparse.Namespace, keys) -> dict:
    """defaults <- config block <- explicitly given flags."""
    out = dict(defaults)
    out.update({k: v for k, v in block.items() if k in defaults})
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


def write_json(path: Path, data) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


def patch_tuple(value) -> tuple[int, int, int]:
    if isinstance(value, int):
        return (value,) * 3
    value = tuple(int(v) for v in value)
    if len(value) == 1:
        return value * 3
    if len(value) != 3:
        raise UserError(f"--patch takes 1 or 3 integers, got {len(value)}")
    return value


def read_manifest(data_dir) -> list[dict]:
    data_dir = Path(data_dir)
    manifest = data_dir / MANIFEST
    if not manifest.exists():
        raise UserError(f"no {MANIFEST} in {data_dir}")
    with open(manifest, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["image"] = str(data_dir / row["image"])
        row["mask"] = str(data_dir / row["mask"])
    return rows


def load_cases(data_dir):
    from .io import load_nifti
    from .synth import DomainSpec, PhantomCase

    cases = []
    for row in read_manifest(data_dir):
        vol = load_nifti(row["image"])
        mask = load_nifti(row["mask"], kind="label")
        cases.append(PhantomCase(vol, mask, int(row["seed"]), DomainSpec(row["domain"]), row["case_id"]))
    return cases


def load_domain(value):
    from .synth import SHIFTED, SOURCE, DomainSpec

    builtin = {"source": SOURCE, "shifted": SHIFTED}
    if value in builtin:
        return builtin[value]
    path = Path(value)
    if not path.exists():
        raise UserError(f"domain file not found: {path}")
    return DomainSpec.from_json(path)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_generate_data(args) -> int:
    from .io import save_nifti
    from .synth import generate_phantom

    cfg = load_config(args.config)
    data = resolve({"domain": "source", "n": 10, "seed": 0, "shape": [64]}, cfg.get("data", {}), args,
                   ("domain", "n", "seed", "shape"))
    domain = load_domain(data["domain"])
    shape = patch_tuple(data["shape"])
    if int(data["n"]) < 1:
        raise UserError("--n must be >= 1")
    out = output_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(int(data["n"])):
        case = generate_phantom(int(data["seed"]) + i, shape, domain)
        image, mask = f"{case.case_id}_image.nii.gz", f"{case.case_id}_mask.nii.gz"
        save_nifti(case.volume, out / image)
        save_nifti(case.mask, out / mask)
        rows.append({"case_id": case.case_id, "seed": case.seed, "domain": domain.name,
                     "domain_hash": domain.digest(), "image": image, "mask": mask})
    with open(out / MANIFEST, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    write_json(out / "config.json", {"data": {**data, "shape": list(shape), "domain_spec": domain.to_dict()}})
    print(f"wrote {len(rows)} cases to {out}")
    return 0


def cmd_train_source(args) -> int:
    from .model import ModelConfig, NormPolicy
    from .synth import TrainConfig, train_source_model

    cfg = load_config(args.config)
    model_block = resolve({"norm": "batch_norm", "channels": 8, "depth": 3, "patch": [64]},
                          cfg.get("model", {}), args, ("norm", "channels", "depth", "patch"))
    train_block = resolve({"epochs": 30, "lr": 1e-3, "batch": 4, "seed": 0, "samples_per_case": 4},
                          cfg.get("train", {}), args, ("epochs", "lr", "batch", "seed", "samples_per_case"))
    patch = patch_tuple(model_block["patch"])
    norm = NormPolicy.batch() if model_block["norm"] == "batch_norm" else NormPolicy.instance()
    model_cfg = ModelConfig(int(model_block["channels"]), int(model_block["depth"]), norm, patch,
                            int(train_block["seed"]))
    # validate architecture before any data is touched
    from .model import build_toy_unet
    build_toy_unet(model_cfg.channels_base, model_cfg.depth, norm, patch)

    train_cfg = TrainConfig(int(train_block["epochs"]), float(train_block["lr"]), int(train_block["batch"]), patch,
                            int(train_block["seed"]), int(train_block["samples_per_case"]))
    train = load_cases(args.data)
    val = load_cases(args.val) if args.val else []
    model, history = train_source_model(train, model_cfg, train_cfg, val_set=val, progress=args.verbose)

    out = output_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.pt")
    with open(out / "train_log.jsonl", "w") as fh:
        for epoch, loss in enumerate(history["epoch_loss"]):
            fh.write(json.dumps({"epoch": epoch, "loss": loss}) + "\n")
    write_json(out / "config.json", {"model": {**model_block, "patch": list(patch)}, "train": train_block,
                                     "data": str(args.data), "val": str(args.val) if args.val else None})
    if "val_dsc" in history:
        write_json(out / "validation.json", {"val_dsc": history["val_dsc"],
                                             "per_case": history["val_dsc_per_case"]})
        print(f"validation DSC: {history['val_dsc']:.4f}")
    print(f"checkpoint: {out / 'model.pt'}")
    return 0


def method_label(method: str, ablate) -> str:
    return f"{method}-{ablate}" if ablate else method


def build_method_configs(model, block: dict, args):
    from .engine import AdaptationConfig
    from .baselines import StrategyConfig

    muvi_cfg = AdaptationConfig.from_dict(block.get("muvi", {}))
    muvi_cfg = replace(muvi_cfg, norm=model.config.norm)
    strategy_cfg = StrategyConfig.from_dict(block.get("strategy", {}))
    if args.lr is not None:
        muvi_cfg = replace(muvi_cfg, learning_rate=args.lr)
        strategy_cfg = replace(strategy_cfg, lr=args.lr)
    if args.epochs is not None:
        muvi_cfg = replace(muvi_cfg, epochs=args.epochs)
    if args.seed is not None:
        muvi_cfg = replace(muvi_cfg, seed=args.seed)
        strategy_cfg = replace(strategy_cfg, seed=args.seed)
    return muvi_cfg, strategy_cfg


def cmd_adapt(args) -> int:
    from .baselines import METHODS, run_method
    from .engine import ABLATIONS, ablation_variant, write_run_dir
    from .model import SegmentationModel

    cfg = load_config(args.config)
    block = cfg.get("method", {})
    method = args.method or block.get("name", "muvi")
    ablate = args.ablate if args.ablate is not None else block.get("ablate")
    if method not in METHODS:
        raise UserError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    if ablate and (method != "muvi" or ablate not in ABLATIONS):
        raise UserError(f"--ablate {ablate!r} needs --method muvi and one of {', '.join(ABLATIONS)}")
    checkpoint = Path(args.checkpoint)
    if not checkpoint.exists():
        raise UserError(f"checkpoint not found: {checkpoint}")
    model = SegmentationModel.load(checkpoint)
    if args.window is not None:
        model = model.with_patch_size(args.window)
    muvi_cfg, strategy_cfg = build_method_configs(model, block, args)
    label = args.label or method_label(method, ablate)

    out = output_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved_muvi = ablation_variant(muvi_cfg, ablate) if ablate else muvi_cfg
    resolved = {"method": {"name": method, "ablate": ablate, "label": label,
                           "muvi": resolved_muvi.to_dict(), "strategy": strategy_cfg.to_dict()},
                "checkpoint": str(checkpoint), "data": str(args.data), "window": list(model.patch_size)}
    write_json(out / "config.json", resolved)

    rows = read_manifest(args.data)
    from .io import load_nifti
    skipped, done = {}, 0
    for row in rows:
        vol = load_nifti(row["image"])
        try:
            result = run_method(method, model, vol, muvi_cfg, strategy_cfg, ablate=ablate)
        except NormUnsupported as exc:
            skipped.setdefault(type(exc).__name__, []).append(row["case_id"])
            continue
        write_run_dir(out / row["case_id"], result, resolved)
        done += 1
        log.info("%s %s done in %.1fs", label, row["case_id"], result.wall_time)
    summary = {"label": label, "n_cases": len(rows), "n_adapted": done,
               "skipped": {k: len(v) for k, v in skipped.items()},
               "skipped_cases": skipped}
    write_json(out / "summary.json", summary)
    print(f"{label}: adapted {done}/{len(rows)} cases -> {out}")
    for reason, ids in skipped.items():
        print(f"{label}: skipped {len(ids)}/{len(rows)} cases ({reason})")
    return 0


def cmd_evaluate(args) -> int:
    from .io import load_nifti
    from .metrics import aggregate, evaluate_case, render_table, write_case_csv, write_table_csv

    refs = {row["case_id"]: row["mask"] for row in read_manifest(args.ref)}
    out = output_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for run_dir in map(Path, args.runs):
        cfg_path = run_dir / "config.json"
        label = json.loads(cfg_path.read_text())["method"]["label"] if cfg_path.exists() else run_dir.name
        predicted = {p.parent.name: p for p in sorted(run_dir.glob("*/prediction.nii.gz"))}
        if not predicted:
            raise UserError(f"{run_dir}: no predictions found")
        missing = sorted(set(refs) - set(predicted))
        extra = sorted(set(predicted) - set(refs))
        if missing or extra:
            raise UserError(f"{run_dir}: case sets differ; missing predictions {missing}, "
                            f"unknown cases {extra}")
        results = []
        for case_id in sorted(refs):
            pred = load_nifti(predicted[case_id], kind="label")
            ref = load_nifti(refs[case_id], kind="label")
            if pred.shape != ref.shape:
                raise UserError(f"{case_id}: prediction shape {pred.shape} != reference {ref.shape}")
            results.append(evaluate_case(pred, ref, case_id, spacing=ref.spacing))
        write_case_csv(results, out / f"metrics_{label}.csv")
        rows.append(aggregate(results, label))
    table = render_table(rows)
    (out / "table.md").write_text(table)
    write_table_csv(rows, out / "table.csv")
    print(table, end="")
    return 0


def cmd_report(args) -> int:
    from .metrics import aggregate, read_case_csv, render_table

    rows = []
    for directory in map(Path, args.metrics):
        files = sorted(directory.glob("metrics_*.csv")) if directory.is_dir() else [directory]
        if not files:
            raise UserError(f"no metrics_*.csv files in {directory}")
        for f in files:
            if not f.exists():
                raise UserError(f"metrics file not found: {f}")
            rows.append(aggregate(read_case_csv(f), f.stem.removeprefix("metrics_")))
    table = render_table(rows)
    if args.out:
        out = output_path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(table)
    print(table, end="")
    return 0


def cmd_overlay(args) -> int:
    from .io import load_nifti
    from .overlay import render_overlay

    for p in [args.volume, *args.masks]:
        if not Path(p).exists():
            raise UserError(f"file not found: {p}")
    vol = load_nifti(args.volume)
    masks = [load_nifti(p, kind="label") for p in args.masks]
    labels = args.labels or [Path(p).name.split(".")[0] for p in args.masks]
    if len(labels) != len(masks):
        raise UserError("--labels must name every mask")
    for p, m in zip(args.masks, masks):
        if m.shape != vol.shape:
            raise UserError(f"{p}: mask shape {m.shape} != volume shape {vol.shape}")
    out = render_overlay(vol.data, [m.data for m in masks], labels, output_path(args.out))
    print(f"wrote {out}")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="muvi-tta", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        p.add_argument("--config", help="JSON run config; flags override it")
        return p

    p = add("generate-data", cmd_generate_data, "write synthetic phantoms as NIfTI pairs")
    p.add_argument("--domain", help="'source', 'shifted' or a DomainSpec JSON file")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--shape", type=int, nargs="+")
    p.add_argument("--out", required=True)

    p = add("train-source", cmd_train_source, "train the source segmentation model")
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--norm", choices=["batch_norm", "instance_norm"])
    p.add_argument("--patch", type=int, nargs="+")
    p.add_argument("--channels", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--samples-per-case", dest="samples_per_case", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = add("adapt", cmd_adapt, "run one adaptation method on every case of a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--method")
    p.add_argument("--ablate")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--window", type=int, help="inference/adaptation patch edge (default: training patch)")
    p.add_argument("--label", help="name used in tables (default: method[-ablation])")
    p.add_argument("--out", required=True)

    p = add("evaluate", cmd_evaluate, "score adapt run directories against references")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True)

    p = add("report", cmd_report, "render the mean ± std table from per-case metric CSVs")
    p.add_argument("--metrics", nargs="+", required=True, help="evaluate output dirs or metrics_*.csv files")
    p.add_argument("--out")

    p = add("overlay", cmd_overlay, "central-slice montage with mask contours")
    p.add_argument("--volume", required=True)
    p.add_argument("--masks", nargs="*", default=[])
    p.add_argument("--labels", nargs="*")
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UserError, MuviError, FileNotFoundError, ValueError) as exc:
        print(f"muvi-tta {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception:  # noqa: BLE001
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
