"""Command-line entry point: one subcommand per pipeline step, one run directory per invocation.

Every run directory receives a copy of the effective config and a
``run_manifest.json``; upstream run directories are only ever read.

Exit codes: 0 success, 2 usage, 3 missing upstream artifacts, 4 non-finite loss.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, checkpoint
from .config import Config, ConfigError, config_hash, load_config, save_config
from .data_synth import Domain, build_dataset, class_balance_stats, load_dataset, manifest_hash, save_dataset
from .evaluation import make_report, summarize
from .pipeline import EVAL_SETS, attention_scores, detector_grid, held_out_spec, preservation_score
from .training import (
    NonFiniteLossError,
    annotation_split_train,
    baseline_train,
    derive_masks,
    load_masks,
    save_masks,
    stage1_train,
    stage2_train,
    translate,
)

log = logging.getLogger("attnsplit")

EXIT_USAGE, EXIT_DEPENDENCY, EXIT_NUMERIC = 2, 3, 4


class UsageError(Exception):
    pass


class DependencyError(Exception):
    def __init__(self, what: str, command: str):
        super().__init__(f"{what}; run `attnsplit {command}` first")
        self.command = command


def artifact_version() -> str:
    """Package version plus a git-style digest of the package sources."""
    h = hashlib.sha1()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


# -- run directories ----------------------------------------------------------


def _fresh_dir(path: str) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        raise UsageError(f"output directory {out} exists and is not empty; prior runs are never overwritten")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, args, cfg: Config, data_hash: str, started: float, inputs: dict) -> None:
    manifest = {
        "command": args.command,
        "argv": args.argv,
        "config_hash": config_hash(cfg),
        "dataset_manifest_hash": data_hash,
        "seed": args.seed,
        "artifact_version": artifact_version(),
        "inputs": {k: str(v) for k, v in inputs.items()},
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _load_cfg(args) -> Config:
    if args.config is None:
        return Config()
    path = Path(args.config)
    if not path.exists():
        raise UsageError(f"config file {path} not found")
    return load_config(path)


def _dataset_root(run: str | None) -> Path:
    if run is None:
        raise UsageError("--data is required")
    root = Path(run) / "dataset"
    if not (root / "manifest.jsonl").exists():
        raise DependencyError(f"no dataset under {run}", "synth-data")
    return root


def _load_data(run: str | None):
    root = _dataset_root(run)
    datasets, spec = load_dataset(root)
    return datasets, spec, manifest_hash(root)


def _train_cfg(cfg: Config, seed: int | None):
    return dataclasses.replace(cfg.train, seed=seed) if seed is not None else cfg.train


def _upstream_file(run: str | None, rel: str, flag: str, command: str) -> Path:
    if run is None:
        raise UsageError(f"{flag} is required")
    path = Path(run) / rel
    if not path.exists():
        raise DependencyError(f"{path} not found", command)
    return path


# -- subcommands --------------------------------------------------------------


def cmd_synth_data(args, cfg: Config, out: Path):
    spec = dataclasses.replace(cfg.data, seed=args.seed) if args.seed is not None else cfg.data
    cfg = dataclasses.replace(cfg, data=spec)
    root = save_dataset(build_dataset(spec), spec, out / "dataset")
    return cfg, manifest_hash(root), {}


def _train_split(fn, name: str):
    def run(args, cfg: Config, out: Path):
        datasets, spec, data_hash = _load_data(args.data)
        cfg = dataclasses.replace(cfg, data=spec, train=_train_cfg(cfg, args.seed))
        fn(datasets, cfg.train, out)
        return cfg, data_hash, {"data": args.data}

    run.__name__ = f"cmd_{name}"
    return run


cmd_train_baseline = _train_split(baseline_train, "train_baseline")
cmd_train_annotation_split = _train_split(annotation_split_train, "train_annotation_split")


def cmd_train_stage1(args, cfg: Config, out: Path):
    datasets, spec, data_hash = _load_data(args.data)
    cfg = dataclasses.replace(cfg, data=spec, train=_train_cfg(cfg, args.seed))
    stage1_train(datasets, cfg.train, out)
    return cfg, data_hash, {"data": args.data}


def _attention_paths(stage1_run: str | None) -> dict[str, Path]:
    if stage1_run is None:
        raise UsageError("--stage1 is required")
    ck = Path(stage1_run) / "checkpoints"
    routed = {"source": ck / "stage1_source_intermediate" / "final" / "A_x.npz",
              "target": ck / "stage1_target_intermediate" / "final" / "A_x.npz"}
    direct = {"source": ck / "stage1_source_target" / "final" / "A_x.npz",
              "target": ck / "stage1_source_target" / "final" / "A_y.npz"}
    for paths in (routed, direct):
        if all(p.exists() for p in paths.values()):
            return paths
    raise DependencyError(f"no final stage-1 attention checkpoints under {stage1_run}", "train-stage1")


def cmd_derive_masks(args, cfg: Config, out: Path):
    datasets, spec, data_hash = _load_data(args.data)
    paths = _attention_paths(args.stage1)
    cfg = dataclasses.replace(cfg, data=spec)
    for side, domain in (("source", Domain.SOURCE), ("target", Domain.TARGET)):
        attention = checkpoint.load_network(paths[side])
        derived = derive_masks(attention, datasets[domain], cfg.masks)
        save_masks(out / "masks" / side, derived)
        if derived.empty.any():
            log.warning("%d of %d %s attention maps stayed below the threshold", int(derived.empty.sum()),
                        len(derived.ids), side)
    return cfg, data_hash, {"data": args.data, "stage1": args.stage1}


def cmd_train_stage2(args, cfg: Config, out: Path):
    datasets, spec, data_hash = _load_data(args.data)
    masks = []
    for side in ("source", "target"):
        _upstream_file(args.masks, f"masks/{side}/index.json", "--masks", "derive-masks")
        masks.append(load_masks(Path(args.masks) / "masks" / side))
    for side, domain, derived in zip(("source", "target"), (Domain.SOURCE, Domain.TARGET), masks):
        if derived.ids != datasets[domain].ids:
            raise DependencyError(f"{side} masks in {args.masks} were derived for a different dataset",
                                  "derive-masks")
    cfg = dataclasses.replace(cfg, data=spec, train=_train_cfg(cfg, args.seed))
    stage2_train(datasets, masks[0], masks[1], cfg.train, out)
    return cfg, data_hash, {"data": args.data, "masks": args.masks}


def _generator(run: str, name: str, command: str):
    return checkpoint.load_network(_upstream_file(run, f"checkpoints/{name}/final/G_xy.npz", "--run", command))


def cmd_evaluate(args, cfg: Config, out: Path):
    datasets, spec, data_hash = _load_data(args.data)
    cfg = dataclasses.replace(cfg, data=spec)
    ev = cfg.eval
    test_spec = held_out_spec(spec, ev.n_eval)
    test = build_dataset(test_spec)
    src_test = test[Domain.SOURCE]
    metrics: dict = {"preservation": {}, "attention_iou": {}, "detector_ap": {}}
    inputs = {"data": args.data}

    arms = (("baseline", args.baseline, "baseline", "train-baseline"),
            ("annotation_split", args.annotation, "annotation_split", "train-annotation-split"),
            ("stage2", args.stage2, "stage2", "train-stage2"))
    generators = {}
    for key, run, name, command in arms:
        if run is not None:
            generators[key] = _generator(run, name, command)
            metrics["preservation"][key] = preservation_score(generators[key], src_test, test_spec)
            inputs[key] = run
    for key, run in (("intermediate", args.stage1), ("direct", args.direct_stage1)):
        if run is not None:
            attention = checkpoint.load_network(_attention_paths(run)["source"])
            metrics["attention_iou"][key] = summarize(attention_scores(attention, src_test, ev.attention_threshold))
            inputs[f"stage1_{key}"] = run

    src, tgt = datasets[Domain.SOURCE], datasets[Domain.TARGET]
    train_sets = {"target": (tgt.images, tgt.labels), "augmented": (src.images, src.labels)}
    if "stage2" in generators:
        train_sets["adapted"] = (translate(generators["stage2"], src.images), src.labels)
    seed = args.seed if args.seed is not None else spec.seed
    metrics["detector_ap"] = detector_grid(train_sets, test[Domain.TARGET], ev, seed)
    metrics["class_balance"] = {d.value: class_balance_stats(datasets[d]) for d in (Domain.SOURCE, Domain.TARGET)}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return cfg, data_hash, inputs


def cmd_report(args, cfg: Config, out: Path):
    if not args.eval:
        raise UsageError("report needs at least one --eval run directory")
    loaded, hashes, cfg_hashes = [], [], []
    for run in args.eval:
        path = _upstream_file(run, "metrics.json", "--eval", "evaluate")
        loaded.append(json.loads(path.read_text()))
        manifest = json.loads((Path(run) / "run_manifest.json").read_text())
        hashes.append(manifest["dataset_manifest_hash"])
        cfg_hashes.append(manifest["config_hash"])

    def mean_of(getter):
        vals = [v for v in (getter(m) for m in loaded) if v is not None]
        return float(np.mean(vals)) if vals else None

    train_names = sorted({t for m in loaded for t in m["detector_ap"]})
    grid = {t: {e: mean_of(lambda m, t=t, e=e: m["detector_ap"].get(t, {}).get(e)) for e in EVAL_SETS}
            for t in train_names}
    preservation = {k: mean_of(lambda m, k=k: m["preservation"].get(k))
                    for k in sorted({k for m in loaded for k in m["preservation"]})}
    iou = {k: mean_of(lambda m, k=k: m["attention_iou"].get(k, {}).get("median"))
           for k in sorted({k for m in loaded for k in m["attention_iou"]})}
    report = make_report(grid, preservation=preservation, attention_iou=iou,
                         class_balance=loaded[0].get("class_balance", {}),
                         config_hash=",".join(sorted(set(cfg_hashes))),
                         dataset_manifest_hash=",".join(sorted(set(hashes))))
    report.save(out)
    print(report.table())
    return cfg, ",".join(sorted(set(hashes))), {f"eval{i}": r for i, r in enumerate(args.eval)}


COMMANDS = {
    "synth-data": (cmd_synth_data, "render the SOURCE, TARGET and INTERMEDIATE datasets"),
    "train-baseline": (cmd_train_baseline, "unsplit cycle translation (control arm)"),
    "train-annotation-split": (cmd_train_annotation_split, "split discriminators gated by ground-truth masks"),
    "train-stage1": (cmd_train_stage1, "learn attention networks"),
    "derive-masks": (cmd_derive_masks, "binarize stage-1 attention into per-sample masks"),
    "train-stage2": (cmd_train_stage2, "split discriminators gated by derived masks"),
    "evaluate": (cmd_evaluate, "preservation, attention IoU and detector AP"),
    "report": (cmd_report, "aggregate evaluate runs into the AP table"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attnsplit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="INI config file (defaults apply to missing keys)")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", required=True, help="new run directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name not in ("synth-data", "report"):
            p.add_argument("--data", required=True, help="run directory of synth-data")
        if name == "derive-masks":
            p.add_argument("--stage1", required=True, help="run directory of train-stage1")
        if name == "train-stage2":
            p.add_argument("--masks", required=True, help="run directory of derive-masks")
        if name == "evaluate":
            p.add_argument("--baseline", help="run directory of train-baseline")
            p.add_argument("--annotation", help="run directory of train-annotation-split")
            p.add_argument("--stage1", help="run directory of train-stage1 (intermediate routing)")
            p.add_argument("--direct-stage1", help="run directory of train-stage1 with direct routing")
            p.add_argument("--stage2", help="run directory of train-stage2")
        if name == "report":
            p.add_argument("--eval", action="append", help="run directory of evaluate (repeatable)")
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)  # exits with status 2 on usage errors
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    fn = COMMANDS[args.command][0]
    started = time.time()
    try:
        cfg = _load_cfg(args)
        out = _fresh_dir(args.out)
        try:
            cfg, data_hash, inputs = fn(args, cfg, out)
        except Exception:
            # a run that never produced anything leaves no trace behind
            if not any(out.iterdir()):
                out.rmdir()
            raise
        save_config(out / "config.cfg", cfg)
        _write_manifest(out, args, cfg, data_hash, started, inputs)
    except (UsageError, ConfigError) as exc:
        print(f"attnsplit {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DependencyError as exc:
        print(f"attnsplit {args.command}: dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except NonFiniteLossError as exc:
        print(f"attnsplit {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
