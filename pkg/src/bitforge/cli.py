"""Command-line front end: ``bitforge {gen-data,baseline,search,apply,report}``.

Every command writes into a run directory (``--out``, else
``$BITFORGE_RUN_DIR/<command>``, else ``runs/<command>``; gen-data uses
``data`` in place of the command name) and finishes by
atomically writing ``manifest.json``, the only file that holds timestamps.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import tempfile
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

from . import __version__, hwsim
from .agent import AgentConfig
from .data import load_splits, synthetic_splits
from .netgraph import (ModelFileError, ShapeMismatchError, TrainingDiverged, evaluate, finetune,
                       load_model, save_model)
from .policy import BitwidthPolicy, PolicyMismatchError
from .quantizer import model_size, quantize_model, write_calibration_csv
from .search import RewardConfig, QuantEnv, parse_limit, pretrain_float, search

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_DIVERGED = 0, 2, 3, 4

logger = logging.getLogger("bitforge")


class ConfigError(Exception):
    pass


class ManifestError(ConfigError):
    pass


def bundled_model_path() -> Path:
    return Path(str(resources.files("bitforge") / "models" / "desk_net.json"))


def run_root() -> Path:
    return Path(os.environ.get("BITFORGE_RUN_DIR", "runs"))


def _out_dir(args, command) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else run_root() / command
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory is not writable: {out}")
    return out


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_json_atomic(path, doc):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
    with os.fdopen(fd, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def write_manifest(out_dir, command, config, started, artifacts, results):
    doc = {
        "tool": "bitforge", "version": __version__, "command": command,
        "config": config, "seed": config.get("seed"),
        "started": started, "finished": _now(),
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "results": results,
    }
    write_json_atomic(Path(out_dir) / "manifest.json", doc)
    return doc


def read_manifest(run_dir) -> dict:
    path = Path(run_dir) / "manifest.json"
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"corrupt manifest {path}: {exc}") from exc
    for key in ("command", "config", "artifacts", "results"):
        if key not in doc:
            raise ManifestError(f"corrupt manifest {path}: missing {key!r}")
    return doc


def _load_data(ref, n_calib=64):
    ref = str(ref)
    if ref.startswith("synthetic:"):
        return synthetic_splits(seed=int(ref.split(":", 1)[1]), n_calib=n_calib)
    return load_splits(ref)


def _resolve(path, base=None) -> str:
    if str(path).startswith("synthetic:"):
        return str(path)
    p = Path(path)
    if base is not None and not p.is_absolute():
        p = Path(base) / p
    return str(p.resolve())


def _write_rows(path, fields, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)


def write_policy_csv(model, policy, path):
    rows = [{"layer": l.k, "kind": l.kind, "w_bits": w, "a_bits": a, "pinned": int(l.k in policy.pinned)}
            for l, w, a in zip(model.layers, policy.w_bits, policy.a_bits)]
    _write_rows(path, ["layer", "kind", "w_bits", "a_bits", "pinned"], rows)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    started = _now()
    out = _out_dir(args, "data")
    splits = synthetic_splits(seed=args.seed, n_calib=args.calib)
    paths = splits.save(out)
    config = {"seed": args.seed, "calib": args.calib}
    write_manifest(out, "gen-data", config, started, {p.stem: p.resolve() for p in paths},
                   {"train": len(splits.train), "val": len(splits.val), "calib": len(splits.calib)})
    print(f"wrote {len(paths)} files to {out}")
    return EXIT_OK


def cmd_baseline(args):
    started = _now()
    model_path = Path(args.model) if args.model else bundled_model_path()
    model = load_model(model_path)
    splits = _load_data(args.data)
    out = _out_dir(args, "baseline")
    pretrain_float(model, splits, args.holdout, epochs=args.epochs, lr=args.lr, seed=args.seed)
    acc = evaluate(model, splits.val)
    ckpt = save_model(model, out / "float_model.json")
    config = {"model": _resolve(model_path), "data": _resolve(args.data), "epochs": args.epochs,
              "lr": args.lr, "seed": args.seed, "holdout": args.holdout}
    write_manifest(out, "baseline", config, started, {"model": ckpt.resolve()}, {"acc_origin": round(acc, 4)})
    print(f"acc_origin {acc:.4f}")
    print(f"checkpoint {ckpt}")
    return EXIT_OK


SEARCH_DEFAULTS = {
    "model": None, "data": "synthetic:0", "hw": "edge", "objective": "latency", "limit": "0.55x",
    "optimizer": "ddpg", "episodes": 600, "seed": 0, "reward": "constrained",
    "lambda": 0.1, "lambda_latency": 1.0, "lambda_energy": 1.0, "lambda_accuracy": 20.0,
    "finetune_epochs": 1, "finetune_lr": 1e-3,
}


PATH_KEYS = ("model", "data", "hw")
HW_NAMES = ("edge", "cloud", "edge-spatial", "cloud-spatial", "edge-temporal", "cloud-temporal")


def _search_config(args) -> dict:
    """Defaults, then the config file (paths relative to it), then flags
    (paths relative to the working directory)."""
    cfg = dict(SEARCH_DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad config {path}: {exc}") from exc
        if "command" in doc and "config" in doc:  # a run manifest
            if doc["command"] != "search":
                raise ConfigError(f"{path} is a {doc['command']} manifest, not a search manifest")
            doc = doc["config"]
        unknown = set(doc) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key in PATH_KEYS:
            if doc.get(key) is not None and not (key == "hw" and doc[key] in HW_NAMES):
                doc[key] = _resolve(doc[key], path.parent)
        cfg.update(doc)
    for key in ("model", "data", "hw", "objective", "limit", "optimizer", "episodes", "seed", "reward"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = _resolve(val) if key in PATH_KEYS and not (key == "hw" and val in HW_NAMES) else val
    if cfg["model"] is None:
        raise ConfigError("search needs --model (a baseline checkpoint) or a config naming one")
    cfg["reward"] = cfg["reward"].replace("_", "-")
    return cfg


def cmd_search(args):
    started = _now()
    cfg = _search_config(args)
    try:
        budget = parse_limit(cfg["limit"], cfg["objective"])
        hw = hwsim.load_hardware(cfg["hw"])
        reward_cfg = RewardConfig(cfg["reward"], cfg["lambda"], cfg["lambda_latency"], cfg["lambda_energy"],
                                  cfg["lambda_accuracy"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    model = load_model(cfg["model"])
    splits = _load_data(cfg["data"])
    out = _out_dir(args, "search")
    env = QuantEnv(model, splits, budget, hw, reward_cfg, finetune_epochs=cfg["finetune_epochs"],
                   finetune_lr=cfg["finetune_lr"])
    res = search(env, cfg["optimizer"], int(cfg["episodes"]), int(cfg["seed"]), AgentConfig())
    policy = res.best_policy
    art = {
        "policy": policy.save(out / "best_policy.json"),
        "exploration": out / "exploration.csv",
        "cost_report": out / "cost_report.csv",
        "roofline": out / "roofline.csv",
        "policy_layers": out / "policy_layers.csv",
        "calibration": out / "calibration.csv",
    }
    res.write_log(art["exploration"])
    report = hwsim.simulate(model, policy, hw)
    report.write_csv(art["cost_report"])
    hwsim.write_roofline_csv(model, policy, hw, art["roofline"])
    write_policy_csv(model, policy, art["policy_layers"])
    write_calibration_csv(env.calibrator.report_rows(policy), art["calibration"])
    if res.agent is not None:
        art["agent"] = res.agent.save(out / "agent.json")
    results = {
        "best_reward": round(res.best_reward, 6), "search_accuracy": round(res.best_accuracy, 4),
        "val_accuracy": round(res.val_accuracy, 4), "acc_origin": round(env.acc_origin, 4),
        "cost": res.best_cost, "limit": env.limit, "infeasible": policy.infeasible,
        "latency_s": report.latency, "energy_j": report.energy,
        "model_size_bits": model_size(model, policy, codebook_mode=env.codebook),
    }
    write_manifest(out, "search", cfg, started, art, results)
    print(f"best reward {res.best_reward:.6f}  accuracy {res.best_accuracy:.4f}  val {res.val_accuracy:.4f}")
    print(f"w_bits {policy.w_bits}")
    print(f"a_bits {policy.a_bits}")
    if policy.infeasible:
        print("INFEASIBLE: budget not met even with every searchable layer at 2 bits")
        return EXIT_INFEASIBLE
    return EXIT_OK


def cmd_apply(args):
    started = _now()
    model_path = Path(args.model)
    model = load_model(model_path)
    policy = BitwidthPolicy.load(args.policy)
    policy.check(len(model))
    splits = _load_data(args.data)
    out = _out_dir(args, "apply")
    hook = quantize_model(model, policy, splits.calib, codebook=args.codebook)
    float_acc = evaluate(model, splits.val)
    tuned = finetune(model.copy(), splits.train, epochs=args.epochs, lr=args.lr, quant_hook=hook, seed=args.seed)
    acc = evaluate(tuned, splits.val, hook)
    # store the grid-snapped weights so the checkpoint evaluates as deployed
    for k, w in enumerate(tuned.weights):
        tuned.weights[k] = hook.weight(k, w)[0]
    ckpt = save_model(tuned, out / "quantized_model.json")
    pol = policy.save(out / "policy.json")
    config = {"model": _resolve(model_path), "policy": _resolve(args.policy), "data": _resolve(args.data),
              "epochs": args.epochs, "lr": args.lr, "seed": args.seed, "hw": args.hw, "codebook": args.codebook}
    write_manifest(out, "apply", config, started, {"model": ckpt.resolve(), "policy": pol.resolve()},
                   {"accuracy": round(acc, 4), "float_accuracy": round(float_acc, 4), "infeasible": policy.infeasible})
    print(f"float accuracy {float_acc:.4f}  quantized accuracy {acc:.4f}")
    return EXIT_OK


def cmd_report(args):
    run_dir = Path(args.run_dir)
    doc = read_manifest(run_dir)
    cfg, art, results = doc["config"], doc["artifacts"], doc["results"]
    try:
        policy = BitwidthPolicy.load(art["policy"])
        model_file = art.get("model", cfg.get("model"))
        model = load_model(model_file)
        hw = hwsim.load_hardware(args.hw or cfg.get("hw") or "edge")
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"corrupt manifest in {run_dir}: {exc}") from exc
    report = hwsim.simulate(model, policy, hw)
    report.write_csv(run_dir / "cost_report.csv")
    hwsim.write_roofline_csv(model, policy, hw, run_dir / "roofline.csv")
    write_policy_csv(model, policy, run_dir / "policy_layers.csv")
    acc = results.get("accuracy", results.get("val_accuracy"))
    size = model_size(model, policy, codebook_mode=bool(cfg.get("codebook")) or cfg.get("objective") in ("size", "model_size"))
    lines = [f"run {run_dir} ({doc['command']}), hardware {hw.name} [{hw.family}]"]
    if policy.infeasible or results.get("infeasible"):
        lines.append("*** INFEASIBLE: the budget could not be met ***")
    lines.append(f"latency  {report.latency * 1e6:.6f} us")
    lines.append(f"energy   {report.energy * 1e6:.6f} uJ")
    lines.append(f"size     {size} bits")
    lines.append(f"accuracy {acc:.4f}" if acc is not None else "accuracy n/a")
    lines.append(f"{'layer':>5} {'kind':>15} {'w':>2} {'a':>2} {'latency_us':>11} {'stall_us':>9} {'energy_uj':>10}")
    for c in report.layers:
        lines.append(f"{c.layer:>5} {c.kind:>15} {c.w_bits:>2} {c.a_bits:>2} {c.latency * 1e6:>11.4f} "
                     f"{c.t_stall * 1e6:>9.4f} {c.energy * 1e6:>10.4f}")
    print("\n".join(lines))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bitforge", description="Hardware-aware mixed-precision quantization search")
    p.add_argument("--version", action="version", version=f"bitforge {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log every episode")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write the synthetic dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--calib", type=int, default=64, help="calibration split size")
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen_data)

    b = sub.add_parser("baseline", help="train the float model and record its accuracy")
    b.add_argument("--model", help="model JSON (default: bundled desk net)")
    b.add_argument("--data", default="synthetic:0", help="dataset directory or synthetic:<seed>")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--epochs", type=int, default=15)
    b.add_argument("--lr", type=float, default=0.02)
    b.add_argument("--holdout", type=float, default=0.2,
                   help="fraction of train kept unseen for the search reward")
    b.add_argument("--out")
    b.set_defaults(func=cmd_baseline)

    s = sub.add_parser("search", help="search a bitwidth policy")
    s.add_argument("--config", help="search config JSON or a previous search manifest")
    s.add_argument("--model", help="float checkpoint from `baseline`")
    s.add_argument("--data")
    s.add_argument("--seed", type=int)
    s.add_argument("--objective", choices=["latency", "energy", "size", "bitops"])
    s.add_argument("--limit", help="e.g. 0.55x (of uniform 8-bit), 12us, 3mJ, 20KiB, 1.5G")
    s.add_argument("--hw", help="edge | cloud | <config.json>")
    s.add_argument("--optimizer", choices=["ddpg", "random", "evolutionary"])
    s.add_argument("--episodes", type=int)
    s.add_argument("--reward", choices=["constrained", "accuracy-guaranteed"])
    s.add_argument("--out")
    s.set_defaults(func=cmd_search)

    a = sub.add_parser("apply", help="quantize with a policy and finetune")
    a.add_argument("--model", required=True)
    a.add_argument("--policy", required=True)
    a.add_argument("--data", default="synthetic:0")
    a.add_argument("--epochs", type=int, default=5)
    a.add_argument("--lr", type=float, default=1e-3)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--hw", default="edge", help="hardware used by `report` for this run")
    a.add_argument("--codebook", action="store_true", help="k-means weight codebooks")
    a.add_argument("--out")
    a.set_defaults(func=cmd_apply)

    r = sub.add_parser("report", help="summarise a run and write plot CSVs")
    r.add_argument("run_dir")
    r.add_argument("--hw", help="override the run's hardware")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ModelFileError, ShapeMismatchError, PolicyMismatchError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
