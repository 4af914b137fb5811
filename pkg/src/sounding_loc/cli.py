"""Command-line entry point: ``sounding-loc <command> [options]``.

Commands write into ``<output-dir>/<command>/`` and echo the resolved config
there as ``config.json``. Later commands find earlier artifacts in sibling
directories unless ``paths.data`` / ``paths.stage1`` / ``paths.stage2``
point elsewhere, which is how ablation arms share one dataset.

Exit codes: 0 success, 1 invalid input or config, 2 missing artifact,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import config as C
from .bank import load_bank
from .data import generate_toy_dataset, load_manifest, load_sample
from .errors import DomainError, NumericError, StateError
from .metrics import evaluate
from .models import load_checkpoint, save_checkpoint
from .stage1 import ObjectDictionary, alternating_train
from .stage2 import AudioEventNet, Stage2State, predict_scene, save_prediction, train_stage2
from .viz import write_scene

logger = logging.getLogger("sounding_loc")

EXIT_OK, EXIT_INVALID, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3

COMMANDS = ("gen-data", "train-stage1", "train-stage2", "eval", "visualize")


def _setup_torch(cfg: dict):
    torch.set_num_threads(int(cfg["threads"]))
    torch.use_deterministic_algorithms(True)


def _dir(out: Path, cfg: dict, key: str, default: str) -> Path:
    p = cfg["paths"].get(key)
    return Path(p) if p else out / default


def _require(path: Path) -> Path:
    if not path.exists():
        raise StateError(f"missing artifact: {path}")
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# Commands --------------------------------------------------------------------


def cmd_gen_data(cfg: dict, out: Path) -> dict:
    d = cfg["data"]
    paths = generate_toy_dataset(C.toy_spec(cfg), out, d["n_solos"], d["n_cocktails"], d["test_fraction"],
                                 C.jitter_params(cfg))
    summary = {k: str(v) for k, v in paths.items()}
    _write_json(out / "summary.json", summary)
    return summary


def cmd_train_stage1(cfg: dict, out: Path, root: Path) -> dict:
    data_dir = _dir(root, cfg, "data", "gen-data")
    manifest = load_manifest(_require(data_dir / "stage1.json"))
    s1 = C.stage1_config(cfg)
    vcfg, acfg = C.backbones(cfg)
    bank = load_bank(manifest, vcfg.input_size)
    t0 = time.perf_counter()
    res = alternating_train(bank, s1, visual_cfg=vcfg, audio_cfg=acfg, log_path=out / "log.jsonl")
    elapsed = time.perf_counter() - t0
    save_checkpoint(out / "model.pt", res.model, {"stage": 1, "num_classes": manifest.num_classes})
    res.dictionary.save(out / "dictionary.npz")
    summary = {
        "nmi": res.nmi,
        "semantic_alignment": None if res.dictionary.semantic_alignment is None
        else [int(c) for c in res.dictionary.semantic_alignment],
        "kmeans_objective": res.dictionary.objective,
        "seconds": elapsed,
    }
    _write_json(out / "summary.json", summary)
    return summary


def _stage1_artifacts(root: Path, cfg: dict):
    s1_dir = _dir(root, cfg, "stage1", "train-stage1")
    model, extra = load_checkpoint(_require(s1_dir / "model.pt"))
    dictionary = ObjectDictionary.load(_require(s1_dir / "dictionary.npz"))
    return model, dictionary, extra


def cmd_train_stage2(cfg: dict, out: Path, root: Path) -> dict:
    data_dir = _dir(root, cfg, "data", "gen-data")
    manifest = load_manifest(_require(data_dir / "stage2.json"))
    model, dictionary, _ = _stage1_artifacts(root, cfg)
    s2 = C.stage2_config(cfg)
    bank = load_bank(manifest, model.visual_cfg.input_size)
    state = Stage2State.from_stage1(model, dictionary, s2)
    t0 = time.perf_counter()
    records = train_stage2(state, bank, log_path=out / "log.jsonl")
    elapsed = time.perf_counter() - t0
    if not torch.equal(state.keys, torch.as_tensor(dictionary.keys, dtype=state.keys.dtype)):
        raise StateError("dictionary keys changed during stage 2")
    save_checkpoint(out / "model.pt", model, {"stage": 2, "stage2": cfg["stage2"],
                                              "num_classes": manifest.num_classes})
    summary = {"final": records[-1] if records else None, "seconds": elapsed}
    _write_json(out / "summary.json", summary)
    return summary


def cmd_eval(cfg: dict, out: Path, root: Path) -> tuple[dict, bool]:
    data_dir = _dir(root, cfg, "data", "gen-data")
    manifest = load_manifest(_require(data_dir / "test.json"))
    s1_model, dictionary, _ = _stage1_artifacts(root, cfg)
    s2_dir = _dir(root, cfg, "stage2", "train-stage2")
    model, extra = load_checkpoint(_require(s2_dir / "model.pt"))
    product = bool(extra.get("stage2", {}).get("enable_product_filter", True))
    audio_event = AudioEventNet.from_model(s1_model)
    keys = torch.as_tensor(dictionary.keys, dtype=torch.float32)
    align = dictionary.semantic_alignment
    if align is None:
        if len(dictionary.keys) != manifest.num_classes:
            raise StateError("dictionary has no semantic alignment and K differs from the class count")
        align = np.arange(manifest.num_classes)
    mcfg = C.metric_config(cfg)
    bank = load_bank(manifest, model.visual_cfg.input_size)
    pred_dir = out / "predictions"
    for i, sid in enumerate(bank.ids):
        pred = predict_scene(model, keys, audio_event, bank.specs[i], bank.frames[i], align,
                             manifest.num_classes, mcfg.tau_fraction, product)
        save_prediction(pred_dir, sid, pred)
    report = evaluate(pred_dir, manifest, mcfg, out / "report.json")
    return report.aggregate, report.complete


def cmd_visualize(cfg: dict, out: Path, root: Path, scenes: list[str] | None, limit: int) -> list[str]:
    data_dir = _dir(root, cfg, "data", "gen-data")
    manifest = load_manifest(_require(data_dir / "test.json"))
    pred_dir = _require(root / "eval" / "predictions")
    by_id = {s.id: s for s in manifest.samples}
    if scenes:
        unknown = [s for s in scenes if s not in by_id]
        if unknown:
            raise LookupError(f"unknown scene id(s): {', '.join(unknown)}")
    else:
        scenes = [s.id for s in manifest.samples][:limit]
    written = []
    for sid in scenes:
        sample = by_id[sid]
        with np.load(_require(pred_dir / f"{sid}.npz")) as z:
            maps = z["class_maps"]
        _, pixels = load_sample(manifest, sample)
        written += [str(p) for p in write_scene(out, sid, pixels, maps, sample.annotation)]
    return written


# Entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file (merged over the defaults)")
    common.add_argument("--seed", type=int, help="global seed (data, initialisation, batching)")
    common.add_argument("--output-dir", type=Path, default=Path("runs/toy"), help="run root directory")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dot-path override, e.g. stage2.lam=0.3 (repeatable)")
    common.add_argument("--log-level", default="INFO")
    p = argparse.ArgumentParser(prog="sounding-loc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate the toy solo and cocktail sets")
    sub.add_parser("train-stage1", parents=[common], help="localization + clustering on solo scenes")
    sub.add_parser("train-stage2", parents=[common], help="distribution matching on cocktail scenes")
    sub.add_parser("eval", parents=[common], help="predict the test cocktails and score them")
    v = sub.add_parser("visualize", parents=[common], help="write heatmap overlays for test scenes")
    v.add_argument("--scene", action="append", default=None, help="scene id (repeatable)")
    v.add_argument("--limit", type=int, default=8, help="number of scenes when --scene is not given")
    return p


def run(args: argparse.Namespace) -> int:
    cfg = C.load_config(args.config, args.override, args.seed)
    root = args.output_dir
    out = root / args.command
    out.mkdir(parents=True, exist_ok=True)
    C.save_config(cfg, out / "config.json")
    _setup_torch(cfg)
    if args.command == "gen-data":
        summary = cmd_gen_data(cfg, out)
        print(json.dumps(summary, indent=1))
    elif args.command == "train-stage1":
        summary = cmd_train_stage1(cfg, out, root)
        print(json.dumps(summary, indent=1))
    elif args.command == "train-stage2":
        summary = cmd_train_stage2(cfg, out, root)
        print(json.dumps(summary, indent=1))
    elif args.command == "eval":
        agg, complete = cmd_eval(cfg, out, root)
        for k, v in agg.items():
            print(f"{k:>12}  {v:.4f}" if isinstance(v, float) else f"{k:>12}  {v}")
        if not complete:
            return EXIT_MISSING
    elif args.command == "visualize":
        for p in cmd_visualize(cfg, out, root, args.scene, args.limit):
            print(p)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (StateError, FileNotFoundError) as exc:
        logger.error("%s", exc)
        return EXIT_MISSING
    except (DomainError, LookupError) as exc:
        logger.error("%s", exc)
        return EXIT_INVALID
    except NumericError as exc:
        logger.error("numeric failure: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
