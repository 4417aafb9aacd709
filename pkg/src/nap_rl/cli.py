"""Command-line experiment runner.

    nap-rl gen-demos --n 2000 --seed 0 --out runs/demos.jsonl
    nap-rl train-discriminator --corpus runs/demos.jsonl --out runs/disc.json
    nap-rl train-policy --algo ppo --reward comb --corpus runs/demos.jsonl \\
        --discriminator runs/disc.json --out-dir runs/ppo-comb-0
    nap-rl evaluate --policy runs/ppo-comb-0/policy.json --out-dir runs/ppo-comb-0
    nap-rl report runs/* --out runs/table.md

Exit codes: 0 ok, 1 usage or input error, 2 numerical failure, 3 accuracy floor missed.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from functools import partial
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .discriminator import (
    DiscriminatorConfig, DiscriminatorModel, build_pair_dataset, evaluate_accuracy, train_discriminator,
)
from .dqn import DqnConfig, QModel, supervised_q_init, train_dqn
from .env import DialogueEnv
from .errors import InvalidInputError, NumericalError, UsageError
from .evaluation import (
    TABLE_COLUMNS, ExpertAgent, GreedyPolicyAgent, MetricsReport, RandomAgent, SilentAgent, markdown_table,
    run_evaluation,
)
from .expert import generate_demonstrations, read_sessions, write_sessions
from .ontology import load_ontology
from .policy import ActionSpace, MleConfig, PolicyModel, demonstration_dataset, mle_pretrain
from .ppo import CurveRecord, PpoConfig, train
from .reward import RewardMode

log = logging.getLogger("nap_rl")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_FLOOR = 0, 1, 2, 3
CONFIG_VERSION = 1
MANIFEST = "manifest.{command}.json"


class FloorError(Exception):
    """A trained model fell short of the configured acceptance floor."""


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def make_env_factory(ontology_path: Optional[str], goal_domains=None):
    """Picklable zero-argument factory, so worker processes can build their own env."""
    return partial(_build_env, ontology_path, tuple(goal_domains) if goal_domains else None)


def _build_env(ontology_path, goal_domains):
    ontology, db = load_ontology(ontology_path)
    return DialogueEnv(ontology, db, goal_domains=goal_domains)


def write_manifest(out_dir: Path, command: str, config: dict, inputs: list, outputs: list, started: float) -> Path:
    ontology, _ = load_ontology(config.get("ontology"))
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "seed": config.get("seed"),
        "ontology_digest": ontology.digest,
        "inputs": {str(p): _sha256(p) for p in inputs if p and Path(p).is_file()},
        "outputs": {str(p): _sha256(p) for p in outputs if Path(p).is_file()},
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / MANIFEST.format(command=command)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _curve_csv(curve: list[CurveRecord], path: Path) -> None:
    fields = [f.name for f in dataclasses.fields(CurveRecord)]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for rec in curve:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in dataclasses.asdict(rec).items()})


def _load_corpus(path):
    if not path:
        raise UsageError("--corpus is required")
    if not Path(path).is_file():
        raise InvalidInputError(f"corpus not found: {path}")
    sessions = read_sessions(path)
    if not sessions:
        raise InvalidInputError(f"corpus is empty: {path}")
    return sessions


def cmd_gen_demos(cfg: dict) -> int:
    started = time.time()
    factory = make_env_factory(cfg["ontology"])
    sessions = generate_demonstrations(factory(), cfg["n"], cfg["seed"])
    failed = sum(s.outcome != "success" for s in sessions)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_sessions(sessions, out)
    write_manifest(out.parent, "gen-demos", cfg, [], [out], started)
    print(f"wrote {len(sessions)} dialogues to {out} ({failed} failed)")
    if failed:
        raise FloorError(f"{failed} expert sessions failed")
    return EXIT_OK


def cmd_train_discriminator(cfg: dict) -> int:
    started = time.time()
    sessions = _load_corpus(cfg["corpus"])
    factory = make_env_factory(cfg["ontology"])
    env = factory()
    rng = np.random.default_rng(cfg["seed"])
    splits = build_pair_dataset(sessions, rng, cfg["negatives"])
    dcfg = DiscriminatorConfig(**cfg.get("discriminator", {}))
    model, history = train_discriminator(splits, env.vocab, dcfg, rng)
    acc = evaluate_accuracy(model, splits.test)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    model.metadata["test_accuracy"] = acc
    model.save(out)
    report = out.with_suffix(".report.json")
    report.write_text(json.dumps({
        "test_accuracy": acc,
        "validation_accuracy": history.validation_accuracy,
        "best_epoch": history.best_epoch,
        "examples": {"train": len(splits.train), "validation": len(splits.validation), "test": len(splits.test)},
    }, indent=2, sort_keys=True) + "\n")
    write_manifest(out.parent, "train-discriminator", cfg, [cfg["corpus"]], [out, report], started)
    print(f"held-out accuracy {acc:.4f} (floor {cfg['floor']:.2f})")
    if acc < cfg["floor"]:
        raise FloorError(f"accuracy {acc:.4f} below floor {cfg['floor']:.2f}")
    return EXIT_OK


def cmd_train_policy(cfg: dict) -> int:
    started = time.time()
    algo, mode = cfg["algo"], RewardMode.parse(cfg["reward"])
    if mode is not RewardMode.GLOBAL and not cfg.get("discriminator"):
        raise UsageError(f"reward mode {mode.value!r} needs --discriminator")
    discriminator = DiscriminatorModel.load(cfg["discriminator"]) if mode is not RewardMode.GLOBAL else None
    sessions = _load_corpus(cfg["corpus"])
    factory = make_env_factory(cfg["ontology"], cfg.get("domains"))
    env = factory()
    action_space = ActionSpace.from_sessions(sessions)
    x, y, groups = demonstration_dataset(sessions, env, action_space)
    seed = cfg["seed"]
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    policy_path, curve_path = out_dir / "policy.json", out_dir / "curve.csv"
    progress = (lambda r: print(f"epoch {r.epoch:3d} success {r.success_rate:.3f}")) if cfg["verbose"] else None
    mle_cfg = MleConfig(epochs=cfg["mle_epochs"])

    if algo == "mle":
        model, _ = mle_pretrain(x, y, groups, action_space, mle_cfg, np.random.default_rng([seed, 1]))
        model.save(policy_path)
        curve = []
    elif algo == "ppo":
        model, _ = mle_pretrain(x, y, groups, action_space, mle_cfg, np.random.default_rng([seed, 1]))
        pcfg = PpoConfig(**{**cfg.get("ppo", {}), "trajectories_per_epoch": cfg["trajectories"],
                            "max_epochs": cfg["epochs"], "workers": cfg["workers"]})
        model, _, curve = train(factory, model, pcfg, seed, mode, discriminator, progress=progress)
        model.save(policy_path)
    elif algo == "dqn":
        rng = np.random.default_rng([seed, 2])
        q = QModel.create(x.shape[1], action_space, rng)
        if cfg["q_init"]:
            supervised_q_init(q, x, y, rng)
        episodes = max(cfg["trajectories"], 1)
        dcfg = DqnConfig(**{**cfg.get("dqn", {}), "epochs": cfg["epochs"], "episodes_per_epoch": episodes})
        q, curve = train_dqn(factory, q, dcfg, seed, mode, discriminator)
        PolicyModel(q.mlp, action_space).save(policy_path)
    else:
        raise UsageError(f"unknown algo {algo!r}")
    outputs = [policy_path]
    if curve:
        for rec in curve:
            rec.algo = algo
        _curve_csv(curve, curve_path)
        outputs.append(curve_path)
    (out_dir / "run.json").write_text(json.dumps({"algo": algo, "reward": mode.value, "seed": seed}) + "\n")
    write_manifest(out_dir, "train-policy", cfg, [cfg["corpus"], cfg.get("discriminator")], outputs, started)
    final = f"final greedy success {curve[-1].success_rate:.3f}" if curve else "behavioral cloning done"
    print(f"{algo}/{mode.value} seed {seed}: {final}; wrote {policy_path}")
    return EXIT_OK


def cmd_evaluate(cfg: dict) -> int:
    started = time.time()
    factory = make_env_factory(cfg["ontology"], cfg.get("domains"))
    inputs = []
    if cfg.get("policy"):
        if not Path(cfg["policy"]).is_file():
            raise InvalidInputError(f"policy checkpoint not found: {cfg['policy']}")
        agent = GreedyPolicyAgent.from_policy(PolicyModel.load(cfg["policy"]))
        inputs.append(cfg["policy"])
    elif cfg["agent"] == "expert":
        agent = ExpertAgent()
    elif cfg["agent"] == "silent":
        agent = SilentAgent()
    elif cfg["agent"] == "random":
        agent = RandomAgent(ActionSpace.from_sessions(_load_corpus(cfg["corpus"])))
        inputs.append(cfg["corpus"])
    else:
        raise UsageError("give --policy or --agent {expert,random,silent}")
    report, records = run_evaluation(agent, factory, cfg["n"], cfg["seed"], workers=cfg["workers"])
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / "metrics.json", out_dir / "metrics.md", out_dir / "per_domain_f1.csv", out_dir / "sessions.jsonl"]
    paths[0].write_text(report.to_json())
    label = cfg.get("label") or cfg.get("agent") or "policy"
    paths[1].write_text(report.to_markdown(label))
    paths[2].write_text(report.per_domain_csv())
    paths[3].write_text("".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in records))
    write_manifest(out_dir, "evaluate", cfg, inputs, paths, started)
    print(report.to_markdown(label), end="")
    return EXIT_OK


def cmd_report(cfg: dict) -> int:
    rows = []
    for run in cfg["runs"]:
        run = Path(run)
        metrics = run / "metrics.json"
        if not metrics.is_file():
            log.warning("skipping %s: no metrics.json", run)
            continue
        meta_path = run / "run.json"
        meta = json.loads(meta_path.read_text()) if meta_path.is_file() else {}
        report = MetricsReport.from_json(metrics.read_text())
        rows.append({"run": run.name, "algo": meta.get("algo", "-"), "reward": meta.get("reward", "-"),
                     "seed": meta.get("seed", "-"), **report.row()})
    text = markdown_table(rows)
    if cfg.get("out"):
        out = Path(cfg["out"])
        out.parent.mkdir(parents=True, exist_ok=True)
        if out.suffix == ".csv":
            with open(out, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=["run", "algo", "reward", "seed", *TABLE_COLUMNS],
                                   lineterminator="\n")
                w.writeheader()
                w.writerows(rows)
        else:
            out.write_text(text)
    print(text, end="")
    return EXIT_OK


DEFAULTS = {
    "common": {"ontology": None, "seed": 0, "workers": os.cpu_count() or 1, "verbose": False},
    "gen-demos": {"n": 2000, "out": "runs/demos.jsonl"},
    "train-discriminator": {"corpus": None, "out": "runs/discriminator.json", "floor": 0.90, "negatives": 1},
    "train-policy": {"algo": "ppo", "reward": "global", "corpus": None, "discriminator": None, "epochs": 60,
                     "trajectories": 64, "out_dir": "runs/policy", "mle_epochs": 10, "q_init": True,
                     "domains": None},
    "evaluate": {"policy": None, "agent": None, "corpus": None, "n": 500, "out_dir": "runs/eval",
                 "label": None, "domains": None},
    "report": {"runs": [], "out": None},
}

COMMANDS = {
    "gen-demos": cmd_gen_demos,
    "train-discriminator": cmd_train_discriminator,
    "train-policy": cmd_train_policy,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    # every flag defaults to None so that only explicitly given flags override the config file
    p = argparse.ArgumentParser(prog="nap-rl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file; flags override its values")
        sp.add_argument("--ontology", help="ontology JSON (default: bundled 3-domain file)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int, help="worker processes (results do not depend on it)")
        sp.add_argument("-v", "--verbose", action="store_true", default=None)
        return sp

    sp = common(sub.add_parser("gen-demos", help="generate expert demonstration dialogues"))
    sp.add_argument("--n", type=int)
    sp.add_argument("--out")

    sp = common(sub.add_parser("train-discriminator", help="train the next-action-prediction classifier"))
    sp.add_argument("--corpus")
    sp.add_argument("--out")
    sp.add_argument("--floor", type=float, help="minimum held-out accuracy (exit 3 below it)")
    sp.add_argument("--negatives", type=int, help="negatives per positive pair")

    sp = common(sub.add_parser("train-policy", help="train a dialogue policy"))
    sp.add_argument("--algo", choices=["mle", "ppo", "dqn"])
    sp.add_argument("--reward", choices=["global", "local", "comb"])
    sp.add_argument("--corpus")
    sp.add_argument("--discriminator")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--trajectories", type=int, help="trajectories (ppo) or episodes (dqn) per epoch")
    sp.add_argument("--mle-epochs", type=int, dest="mle_epochs")
    sp.add_argument("--no-q-init", action="store_false", dest="q_init", default=None)
    sp.add_argument("--domains", nargs="+", help="pin user goals to these domains")
    sp.add_argument("--out-dir", dest="out_dir")

    sp = common(sub.add_parser("evaluate", help="evaluate a policy or a built-in agent"))
    sp.add_argument("--policy")
    sp.add_argument("--agent", choices=["expert", "random", "silent"])
    sp.add_argument("--corpus", help="demonstrations defining the random agent's action space")
    sp.add_argument("--n", type=int)
    sp.add_argument("--label")
    sp.add_argument("--domains", nargs="+")
    sp.add_argument("--out-dir", dest="out_dir")

    sp = common(sub.add_parser("report", help="combine evaluation runs into one table"))
    sp.add_argument("runs", nargs="*")
    sp.add_argument("--out", help=".md or .csv")
    return p


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then the config file (common keys plus the command's section), then flags."""
    cfg = {**DEFAULTS["common"], **DEFAULTS[args.command]}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise InvalidInputError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"config {path}: {exc}") from None
        if doc.get("version", CONFIG_VERSION) != CONFIG_VERSION:
            raise InvalidInputError(f"config {path}: unsupported version {doc.get('version')!r}")
        for section in ("common", args.command):
            for key, value in (doc.get(section) or {}).items():
                if key not in cfg and section == "common":
                    continue
                cfg[key] = value
    for key, value in vars(args).items():
        if key in ("command", "config") or value is None:
            continue
        if key == "runs" and not value:
            continue
        cfg[key] = value
    return cfg


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except FloorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FLOOR
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InvalidInputError, UsageError, OSError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
