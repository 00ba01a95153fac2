"""Command-line pipeline orchestration.

Six subcommands cover the three pipeline phases and the three experiment
tables::

    policyprune train-adapters   # phase 1: two adapters + merged checkpoint
    policyprune controller       # phase 2: learn p_star, stream a round log
    policyprune finalize         # phase 3: prune once at p_star, fine-tune
    policyprune grid             # exhaustive per-ratio baseline table
    policyprune ablate           # regularizer and micro-dev-size sweeps
    policyprune report           # runtime comparison + rolling ratio series

Every phase writes into its own directory under the output root (flag
``--out``, else the config file, else ``$POLICYPRUNE_OUT``, else ``runs/``)
and finishes by writing ``manifest.json`` — the marker that the phase
completed — recording the seed, the resolved-config content hash, the
SHA-256 of every artifact, and the parent checkpoint it consumed. A phase
directory with a manifest is never overwritten without ``--force``.
Downstream phases refuse to run when their parent was produced under a
different config hash, and inherit the parent's seed unless ``--seed``
says otherwise. No artifact carries a timestamp, so a rerun at the same
seed reproduces every byte.

Exit codes: 0 success, 2 usage errors (including bad flags), 3 storage
failures, 4 numerical failures such as diverged training.
"""

from __future__ import annotations

import argparse
import dataclasses
import functools
import json
import shutil
import sys
from pathlib import Path

from .baselines import (
    ablate_microdev,
    ablate_regularizers,
    compare_efficiency,
    format_runtime_table,
    grid_search,
    rolling_pcurr,
    write_grid_csv,
    write_microdev_csv,
    write_regularizer_csv,
    write_rolling_csv,
    write_runtime_csv,
)
from .configio import RunConfig, config_hash, load_run_config, render_ini
from .container import load_merged, save_adapters, save_merged
from .controller import append_round_log, read_round_log
from .errors import PolicyPruneError, StorageError, UsageError
from .masking import estimate_scale
from .adapters import merge_adapter_sets
from .serialize import canonical_json, sha256_file
from .toytask import ToyData, gen_toy_data
from .training import (
    final_prune_finetune,
    pipeline_rngs,
    sparsity_policy_learning,
    train_adapter,
)

__all__ = ["main", "build_parser", "PHASE_DIRS"]

PHASE_DIRS = {
    "train-adapters": "adapters",
    "controller": "controller",
    "finalize": "final",
    "grid": "grid",
    "ablate": "ablate",
    "report": "report",
}


# --- shared plumbing ---------------------------------------------------------


def _phase_dir(root: Path, command: str) -> Path:
    return root / PHASE_DIRS[command]


def _prepare_phase_dir(root: Path, command: str, force: bool) -> Path:
    """Claim a clean phase directory; existing output needs --force."""
    d = _phase_dir(root, command)
    if d.exists() and any(d.iterdir()):
        if not force:
            raise StorageError(
                f"output already exists: {d} (pass --force to redo this phase)"
            )
        try:
            shutil.rmtree(d)
        except OSError as exc:
            raise StorageError(f"cannot clear {d}: {exc}") from exc
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create output directory {d}: {exc}") from exc
    return d


def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def _persist_config(d: Path, cfg: RunConfig) -> str:
    _write_text(d / "resolved.ini", render_ini(cfg))
    return config_hash(cfg)


def _write_manifest(
    d: Path,
    command: str,
    seed: int,
    chash: str,
    files: list[str],
    parent: dict | None,
) -> None:
    payload = {
        "phase": command,
        "seed": int(seed),
        "config_hash": chash,
        "parent": parent,
        "files": {name: sha256_file(d / name) for name in sorted(files)},
    }
    _write_text(d / "manifest.json", canonical_json(payload) + "\n")


def _read_manifest(root: Path, command: str) -> dict:
    path = _phase_dir(root, command) / "manifest.json"
    if not path.is_file():
        raise UsageError(
            f"missing {path}; run `policyprune {command}` first"
        )
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise StorageError(f"malformed manifest {path}: {exc}") from exc
    for key in ("phase", "seed", "config_hash", "files"):
        if key not in data:
            raise StorageError(f"manifest {path} is missing the {key!r} field")
    return data


def _load_parent_checkpoint(root: Path, chash: str):
    """The merged-init checkpoint, verified against its manifest and config.

    Returns (merged_init, parent_seed, parent_record_for_manifest).
    """
    man = _read_manifest(root, "train-adapters")
    if man["config_hash"] != chash:
        raise UsageError(
            "config mismatch: the adapters phase ran with config hash "
            f"{man['config_hash'][:12]}… but the current resolved config hashes "
            f"to {chash[:12]}…; rerun train-adapters or restore the config"
        )
    ckpt = _phase_dir(root, "train-adapters") / "merged_init.ckpt"
    if not ckpt.is_file():
        raise UsageError(
            f"missing checkpoint: {ckpt}; run `policyprune train-adapters` first"
        )
    actual = sha256_file(ckpt)
    recorded = man["files"].get("merged_init.ckpt")
    if actual != recorded:
        raise StorageError(
            f"checkpoint {ckpt} does not match the hash in its manifest "
            "(file corrupted or edited); rerun train-adapters"
        )
    merged, _header = load_merged(ckpt)
    parent = {"path": "adapters/merged_init.ckpt", "sha256": actual}
    return merged, int(man["seed"]), parent


def _inherited_seed(args, parent_seed: int) -> int:
    return int(args.seed) if args.seed is not None else parent_seed


def _task_data(cfg: RunConfig, seed: int) -> ToyData:
    return gen_toy_data(cfg.task, seed)


def _microdev_slice(cfg: RunConfig, data: ToyData):
    m = cfg.controller.microdev_n
    if m > data.microdev.n:
        raise UsageError(
            f"controller wants m={m} micro-dev examples but the generated "
            f"pool holds {data.microdev.n}"
        )
    return data.microdev.head(m)


# --- subcommands -------------------------------------------------------------


def cmd_train_adapters(cfg: RunConfig, args) -> int:
    root = Path(cfg.out)
    d = _prepare_phase_dir(root, "train-adapters", args.force)
    chash = _persist_config(d, cfg)
    seed = cfg.seed
    data = _task_data(cfg, seed)
    rngs = pipeline_rngs(seed)
    source = train_adapter(
        data.backbone, data.source_train, cfg.lora, cfg.training, rngs["source"]
    )
    target = train_adapter(
        data.backbone, data.target_train, cfg.lora, cfg.training, rngs["target"]
    )
    merged = merge_adapter_sets(
        [source.adapters, target.adapters], data.backbone.site_ids()
    )
    save_adapters(d / "source.ckpt", source.adapters, kind="source",
                  seed=seed, config_hash=chash)
    save_adapters(d / "target.ckpt", target.adapters, kind="target",
                  seed=seed, config_hash=chash)
    save_merged(d / "merged_init.ckpt", merged, kind="merged-init",
                seed=seed, config_hash=chash)
    _write_manifest(
        d, "train-adapters", seed, chash,
        ["source.ckpt", "target.ckpt", "merged_init.ckpt", "resolved.ini"],
        parent=None,
    )
    print(f"adapters trained (seed {seed}); checkpoints in {d}")
    return 0


def cmd_controller(cfg: RunConfig, args) -> int:
    root = Path(cfg.out)
    chash = config_hash(cfg)
    merged_init, parent_seed, parent = _load_parent_checkpoint(root, chash)
    seed = _inherited_seed(args, parent_seed)
    data = _task_data(cfg, seed)
    microdev = _microdev_slice(cfg, data)
    rngs = pipeline_rngs(seed)
    d = _prepare_phase_dir(root, "controller", args.force)
    _persist_config(d, cfg)
    log_path = d / "rounds.jsonl"
    policy = sparsity_policy_learning(
        data.backbone,
        merged_init,
        data.target_train,
        microdev,
        cfg.controller,
        cfg.training,
        rngs["phase2_train"],
        rngs["policy"],
        on_round=functools.partial(append_round_log, log_path),
    )
    p_star_payload = {
        "p_star": policy.p_star,
        "rounds": len(policy.records),
        "commits": policy.commits,
        "seed": seed,
        "config_hash": chash,
    }
    _write_text(d / "p_star.json", canonical_json(p_star_payload) + "\n")
    _write_manifest(
        d, "controller", seed, chash,
        ["rounds.jsonl", "p_star.json", "resolved.ini"],
        parent=parent,
    )
    print(
        f"p_star = {policy.p_star} after {len(policy.records)} rounds "
        f"({policy.commits} commits); log in {log_path}"
    )
    return 0


def _resolve_p_star(root: Path, chash: str, args) -> tuple[float, str]:
    if args.p_star is not None:
        return float(args.p_star), "flag"
    path = _phase_dir(root, "controller") / "p_star.json"
    if not path.is_file():
        raise UsageError(
            f"missing {path}; run `policyprune controller` first or pass --p-star"
        )
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
        p_star = float(payload["p_star"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"cannot parse p_star file {path}: {exc}") from exc
    if payload.get("config_hash") not in (None, chash):
        raise UsageError(
            f"config mismatch: {path} came from config hash "
            f"{payload['config_hash'][:12]}…, current config hashes to {chash[:12]}…"
        )
    return p_star, "file"


def cmd_finalize(cfg: RunConfig, args) -> int:
    root = Path(cfg.out)
    chash = config_hash(cfg)
    merged_init, parent_seed, parent = _load_parent_checkpoint(root, chash)
    p_star, p_star_source = _resolve_p_star(root, chash, args)
    seed = _inherited_seed(args, parent_seed)
    data = _task_data(cfg, seed)
    microdev = _microdev_slice(cfg, data)
    rngs = pipeline_rngs(seed)
    d = _prepare_phase_dir(root, "finalize", args.force)
    _persist_config(d, cfg)
    fin = final_prune_finetune(
        data.backbone,
        merged_init,
        p_star,
        data.target_train,
        data.dev,
        estimate_scale(microdev.x),
        cfg.training,
        rngs["phase3"],
        p_min=cfg.controller.p_min,
        p_max=cfg.controller.p_max,
        test=data.test,
    )
    save_merged(d / "final.ckpt", fin.merged, kind="final",
                seed=seed, config_hash=chash)
    per_tensor = []
    for tid, sid, fac, _arr in fin.merged.tensors():
        st = fin.mask.stats[tid]
        pruned = st.d - int(fin.mask.per_tensor[tid].sum())
        per_tensor.append(
            {"tensor": f"{sid}.{fac}", "d": st.d, "pruned": pruned,
             "fraction": st.fraction}
        )
    metrics = {
        "p_star": p_star,
        "p_star_source": p_star_source,
        "dev_loss": fin.dev_loss,
        "test_loss": fin.test_loss,
        "steps": fin.steps_run,
        "stopped_early": fin.stopped_early,
        "realized_fraction": fin.mask.overall_fraction(),
        "per_tensor": per_tensor,
        "seed": seed,
        "config_hash": chash,
    }
    _write_text(d / "metrics.json", canonical_json(metrics) + "\n")
    _write_manifest(
        d, "finalize", seed, chash,
        ["final.ckpt", "metrics.json", "resolved.ini"],
        parent=parent,
    )
    print(
        f"final model pruned at p_star = {p_star} "
        f"(realized fraction {metrics['realized_fraction']:.4f}); "
        f"dev loss {fin.dev_loss}, test loss {fin.test_loss}"
    )
    return 0


def cmd_grid(cfg: RunConfig, args) -> int:
    root = Path(cfg.out)
    chash = config_hash(cfg)
    merged_init, parent_seed, parent = _load_parent_checkpoint(root, chash)
    seed = _inherited_seed(args, parent_seed)
    data = _task_data(cfg, seed)
    microdev = _microdev_slice(cfg, data)
    d = _prepare_phase_dir(root, "grid", args.force)
    _persist_config(d, cfg)
    outcome = grid_search(
        data.backbone,
        merged_init,
        data.target_train,
        data.dev,
        estimate_scale(microdev.x),
        cfg.training,
        seed,
        grid=cfg.grid,
        test=data.test,
        workers=args.workers,
    )
    write_grid_csv(d / "grid.csv", outcome)
    _write_manifest(d, "grid", seed, chash, ["grid.csv", "resolved.ini"], parent)
    failed = sum(1 for pt in outcome.points if pt.failed)
    print(
        f"grid searched {len(outcome.points)} ratios "
        f"({failed} failed); best p = {outcome.best_p}; table in {d / 'grid.csv'}"
    )
    return 0


def cmd_ablate(cfg: RunConfig, args) -> int:
    root = Path(cfg.out)
    d = _prepare_phase_dir(root, "ablate", args.force)
    chash = _persist_config(d, cfg)
    reg_rows = ablate_regularizers(
        cfg.task, cfg.lora, cfg.training, cfg.controller,
        seeds=cfg.seeds, workers=args.workers,
    )
    micro_rows = ablate_microdev(
        cfg.task, cfg.lora, cfg.training, cfg.controller,
        seeds=cfg.seeds, workers=args.workers,
    )
    write_regularizer_csv(d / "regularizers.csv", reg_rows)
    write_microdev_csv(d / "microdev.csv", micro_rows)
    _write_manifest(
        d, "ablate", cfg.seed, chash,
        ["regularizers.csv", "microdev.csv", "resolved.ini"],
        parent=None,
    )
    print(
        f"ablations done over seeds {list(cfg.seeds)}: "
        f"{len(reg_rows)} regularizer cells, {len(micro_rows)} micro-dev sizes; "
        f"tables in {d}"
    )
    return 0


def cmd_report(cfg: RunConfig, args) -> int:
    root = Path(cfg.out)
    chash = config_hash(cfg)
    ctrl_man = _read_manifest(root, "controller")
    if ctrl_man["config_hash"] != chash:
        raise UsageError(
            "config mismatch: the controller phase ran with config hash "
            f"{ctrl_man['config_hash'][:12]}… but the current resolved config "
            f"hashes to {chash[:12]}…"
        )
    log_path = _phase_dir(root, "controller") / "rounds.jsonl"
    if not log_path.is_file():
        raise UsageError(
            f"missing {log_path}; run `policyprune train-adapters` and then "
            "`policyprune controller` first"
        )
    records = read_round_log(log_path)
    seed = _inherited_seed(args, int(ctrl_man["seed"]))
    d = _prepare_phase_dir(root, "report", args.force)
    _persist_config(d, cfg)
    series = rolling_pcurr(records)
    write_rolling_csv(d / "rolling.csv", series)
    # the runtime comparison is a fixed-budget measurement: both arms run
    # the full step budget, so early stopping is disabled for timing only
    timing_train = dataclasses.replace(cfg.training, early_stop_patience=None)
    comp = compare_efficiency(
        cfg.task, cfg.lora, timing_train, cfg.controller, seed,
        grid=cfg.grid, repeats=args.repeats,
    )
    write_runtime_csv(d / "runtime.csv", comp)
    table = format_runtime_table(comp)
    _write_text(d / "report.txt", table + "\n")
    _write_manifest(
        d, "report", seed, chash,
        ["rolling.csv", "runtime.csv", "report.txt", "resolved.ini"],
        parent={"path": "controller/rounds.jsonl",
                "sha256": sha256_file(log_path)},
    )
    print(table)
    return 0


# --- argument parsing --------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE", default=None,
                        help="INI config file (defaults < file < flags)")
    common.add_argument("--seed", type=int, default=None,
                        help="run seed (downstream phases inherit the parent "
                             "checkpoint's seed unless this is given)")
    common.add_argument("--out", metavar="DIR", default=None,
                        help="output root (default: $POLICYPRUNE_OUT or runs/)")
    common.add_argument("--force", action="store_true",
                        help="redo a phase whose output already exists")

    parser = argparse.ArgumentParser(
        prog="policyprune",
        description="Merge two low-rank adapters, learn a prune ratio online, "
                    "prune once, fine-tune — plus grid/ablation baselines.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-adapters", parents=[common],
                       help="phase 1: train both adapters, write the merged checkpoint")
    p.set_defaults(func=cmd_train_adapters)

    p = sub.add_parser("controller", parents=[common],
                       help="phase 2: learn the prune ratio, stream the round log")
    p.set_defaults(func=cmd_controller)

    p = sub.add_parser("finalize", parents=[common],
                       help="phase 3: prune once at p_star and fine-tune")
    p.add_argument("--p-star", dest="p_star", type=float, default=None,
                   help="prune ratio to use (overrides the controller's p_star file)")
    p.set_defaults(func=cmd_finalize)

    p = sub.add_parser("grid", parents=[common],
                       help="train one model per grid ratio, emit the table")
    p.add_argument("--workers", type=int, default=1,
                   help="process pool width for independent grid cells")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("ablate", parents=[common],
                       help="regularizer and micro-dev-size sweeps")
    p.add_argument("--workers", type=int, default=1,
                   help="process pool width for independent sweep cells")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", parents=[common],
                       help="runtime comparison and rolling ratio series")
    p.add_argument("--repeats", type=int, default=3,
                   help="timing passes per arm; the best is reported")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_run_config(args.config, seed=args.seed, out=args.out)
        return args.func(cfg, args)
    except PolicyPruneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return getattr(exc, "exit_code", 1)
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return StorageError.exit_code


if __name__ == "__main__":
    sys.exit(main())
