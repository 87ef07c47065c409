"""Command-line entry point: ``diffmod <subcommand> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_FAILED_CHECK = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_NAN = 5

log = logging.getLogger("diffmod")


class ConfigError(ValueError):
    pass


DEFAULT_CONFIG = {
    "scene": {},
    "dataset": {"n_train": 64, "n_test": 8, "seed": 7},
    "model": {},
    "train": {},
    "loss": {},
    "eval": {"tau": 0.5, "d_eval": 5.0},
    "ablation": {"seeds": [0, 1, 2]},
}


def _known_keys() -> dict:
    from .diffusion import DenoiseConfig
    from .loss import LossWeights
    from .model import ModelConfig
    from .pipeline import TrainConfig
    from .scenegen import SceneConfig
    from .sraa import SraaConfig

    model_keys = set(ModelConfig.__dataclass_fields__) - {"denoise", "sraa"}
    return {
        "scene": set(SceneConfig.__dataclass_fields__),
        "dataset": {"n_train", "n_test", "seed", "root"},
        "model": model_keys | {f"denoise.{k}" for k in DenoiseConfig.__dataclass_fields__}
        | {f"sraa.{k}" for k in SraaConfig.__dataclass_fields__},
        "train": set(TrainConfig.__dataclass_fields__),
        "loss": set(LossWeights.__dataclass_fields__),
        "eval": {"tau", "d_eval"},
        "ablation": {"seeds"},
    }


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def _set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    cur = d
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value


def resolve_config(path: str | None, overrides: list[str], seed: int | None) -> dict:
    """Merge defaults, a JSON config file and ``KEY=VALUE`` overrides; unknown keys are rejected."""
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    if path:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for k, v in _flatten(user).items():
            _set_dotted(cfg, k, v)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, raw = item.split("=", 1)
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        _set_dotted(cfg, key.strip(), val)
    known = _known_keys()
    for section, body in cfg.items():
        if section not in known:
            raise ConfigError(f"unknown config section {section!r}")
        for k in _flatten(body):
            if k not in known[section]:
                raise ConfigError(f"unknown config key {section}.{k}")
    if seed is not None:
        cfg["train"]["seed"] = seed
        cfg["model"]["seed"] = seed
    return cfg


def build_configs(cfg: dict):
    from .loss import LossWeights
    from .model import ModelConfig
    from .pipeline import TrainConfig
    from .scenegen import SceneConfig

    model_raw = {}
    for k, v in cfg["model"].items():
        if isinstance(v, dict):
            model_raw[k] = v
    flat = _flatten(cfg["model"])
    nested: dict = {}
    for k, v in flat.items():
        _set_dotted(nested, k, v)
    mc = ModelConfig.from_dict(nested)
    tc = TrainConfig(**cfg["train"])
    tc.validate()
    lw = LossWeights(**cfg["loss"])
    lw.validate()
    sc = SceneConfig.from_dict(cfg["scene"]) if cfg["scene"] else SceneConfig()
    sc.validate()
    return sc, mc, tc, lw


def _write_effective(out: Path, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))


def _load_scenes(root: Path, split: str):
    from .scenegen import load_split

    return load_split(root, split)


def _read_points_csv(path: str) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for row in reader:
            if not row:
                continue
            try:
                rows.append([float(row[0]), float(row[1])])
            except ValueError:
                if rows:
                    raise
    return np.array(rows, dtype=np.float64).reshape(-1, 2)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen(args, cfg) -> int:
    from .scenegen import make_dataset

    sc, *_ = build_configs(cfg)
    ds = cfg["dataset"]
    root = Path(args.out)
    manifest = make_dataset(root, int(ds["n_train"]), int(ds["n_test"]), sc, int(ds["seed"]))
    _write_effective(root, cfg)
    print(f"wrote {len(manifest['scenes'])} scenes to {root}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    from .model import DiffMod
    from .pipeline import config_dict, train

    _, mc, tc, lw = build_configs(cfg)
    out = Path(args.out)
    _write_effective(out, cfg)
    scenes = _load_scenes(Path(args.data), "train")
    model = DiffMod(mc)
    train(model, scenes, tc, lw, log_path=out / "train_log.jsonl")
    model.save(out / "model.ckpt", {"run": config_dict(mc, tc, lw)})
    print(f"saved checkpoint to {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    from .model import DiffMod
    from .pipeline import evaluate

    out = Path(args.out)
    _write_effective(out, cfg)
    model, _, _ = DiffMod.load(args.checkpoint)
    scenes = _load_scenes(Path(args.data), args.split)
    report = evaluate(model, scenes, tau=float(cfg["eval"]["tau"]), d_eval=float(cfg["eval"]["d_eval"]))
    report.write_csv(out / "metrics.csv")
    print(json.dumps(report.summary(), indent=2))
    return EXIT_OK


def cmd_infer(args, cfg) -> int:
    from .model import DiffMod
    from .scenegen import read_scene

    out = Path(args.out)
    _write_effective(out, cfg)
    model, state, _ = DiffMod.load(args.checkpoint)
    scene = read_scene(args.scene)
    dets, state = model.infer(scene.frames, tau=float(cfg["eval"]["tau"]), state=state)
    with open(out / "detections.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "cx", "cy", "confidence"])
        for frame in dets:
            for d in frame:
                w.writerow([d.frame, f"{d.cx:.3f}", f"{d.cy:.3f}", f"{d.confidence:.6f}"])
    model.save(out / "stream_state.ckpt", state=state)
    print(f"{sum(map(len, dets))} detections written to {out / 'detections.csv'}")
    return EXIT_OK


def cmd_assign(args, cfg) -> int:
    from .assign import AssignConfig, mink_ota

    pts = _read_points_csv(args.points)
    gts = _read_points_csv(args.targets)
    acfg = AssignConfig(args.k, args.level, args.levels, args.r, args.schedule)
    res = mink_ota(pts, gts, acfg)
    dest = Path(args.out)
    dest.mkdir(parents=True, exist_ok=True)
    with open(dest / "matches.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_idx", "target_idx", "cost"])
        for i, j in zip(*np.nonzero(res.match)):
            w.writerow([int(i), int(j), f"{res.cost[i, j]:.6f}"])
    _write_effective(dest, cfg)
    print(f"{int(res.match.sum())} matches written to {dest / 'matches.csv'}")
    return EXIT_OK


def cmd_gradcheck(args, cfg) -> int:
    from .gradcheck import run_suite

    results = run_suite(quick=args.quick)
    worst_fail = False
    for name, err, tol in results:
        ok = err < tol
        worst_fail |= not ok
        print(f"{'PASS' if ok else 'FAIL'} {name}: {err:.3e} (tol {tol:.0e})")
    return EXIT_FAILED_CHECK if worst_fail else EXIT_OK


def cmd_ablate(args, cfg) -> int:
    from .pipeline import run_ablation

    _, mc, tc, _ = build_configs(cfg)
    out = Path(args.out)
    _write_effective(out, cfg)
    tr = _load_scenes(Path(args.data), "train")
    te = _load_scenes(Path(args.data), "test")
    res = run_ablation(args.kind, mc, tc, tr, te, seeds=tuple(cfg["ablation"]["seeds"]),
                       d_eval=float(cfg["eval"]["d_eval"]))
    with open(out / f"ablation_{args.kind}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["kind", "arm", "seed", "metric", "value"])
        w.writeheader()
        w.writerows(res["rows"])
    (out / f"ablation_{args.kind}.json").write_text(json.dumps(res, indent=2))
    print(json.dumps(res["stats"], indent=2))
    print(f"delta {res['metric']}: {res['delta']:+.4f}")
    return EXIT_OK


def plot_rows(what: str) -> tuple[list[str], list[list]]:
    from .assign import AssignConfig, schedule_params
    from .loss import missing_penalty
    from .sraa import SraaConfig, quantize_distance

    if what == "gx":
        cfg = SraaConfig()
        return ["x", "g"], [[x, quantize_distance(float(x), cfg)] for x in range(0, 513)]
    if what == "lmiss":
        ratios = np.round(np.linspace(0.0, 3.0, 301), 4)
        return ["dist_ratio", "L_miss"], [[f"{r:.2f}", f"{missing_penalty(r):.6f}"] for r in ratios]
    if what == "schedule":
        rows = []
        for kind in ("exponential", "linear"):
            for n in range(1, 5):
                k_min, r_thre = schedule_params(AssignConfig(10, n, 4, 4.0, kind))
                rows.append([kind, n, k_min, f"{r_thre:g}"])
        return ["schedule", "level", "k_min", "r_thre"], rows
    raise ConfigError(f"unknown plot {what!r}")


def cmd_plot(args, cfg) -> int:
    header, rows = plot_rows(args.what)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"plot_{args.what}.csv", "w", newline="") as fh:
            cw = csv.writer(fh, lineterminator="\n")
            cw.writerow(header)
            cw.writerows(rows)
        _write_effective(out, cfg)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--seed", type=int, help="seed for model init and training")

    p = argparse.ArgumentParser(prog="diffmod", description="Progressive point-denoising moving-object detector")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    sp = sub.add_parser("train", parents=[common], help="train a model")
    sp.add_argument("--data", required=True)
    sp = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", default="test")
    sp = sub.add_parser("infer", parents=[common], help="detect objects in one scene")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp = sub.add_parser("assign", parents=[common], help="run MinK OTA on CSV point sets")
    sp.add_argument("--points", required=True)
    sp.add_argument("--targets", required=True)
    sp.add_argument("--k", type=int, default=10)
    sp.add_argument("--level", type=int, default=1)
    sp.add_argument("--levels", type=int, default=4)
    sp.add_argument("--r", type=float, default=4.0)
    sp.add_argument("--schedule", choices=["exponential", "linear"], default="exponential")
    sp = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op")
    sp.add_argument("--quick", action="store_true")
    sp = sub.add_parser("ablate", parents=[common], help="run one ablation")
    sp.add_argument("kind", choices=["assignment", "missing_loss", "scheduling", "tpgf"])
    sp.add_argument("--data", required=True)
    sp = sub.add_parser("plot", parents=[common], help="emit curve data as CSV")
    sp.add_argument("what", choices=["gx", "lmiss", "schedule"])
    sub.choices["plot"].set_defaults(out=None)
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "assign": cmd_assign,
            "gradcheck": cmd_gradcheck, "ablate": cmd_ablate, "plot": cmd_plot}


def run(argv: list[str] | None = None) -> int:
    from .numerics import NonFiniteError
    from .pipeline import TrainingDiverged
    from .scenegen import SceneConfigError, SceneFormatError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    threads = os.environ.get("DIFFMOD_THREADS")
    if threads:
        os.environ.setdefault("OMP_NUM_THREADS", threads)
    try:
        cfg = resolve_config(args.config, args.set, args.seed)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, SceneConfigError, KeyError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, NonFiniteError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NAN
    except (OSError, SceneFormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
