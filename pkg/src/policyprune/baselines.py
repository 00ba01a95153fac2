"""Grid-search and no-prune baselines, runtime accounting, and ablation runners.

Everything here reuses the same three-phase machinery the policy pipeline
runs on, so comparisons differ only in how the prune ratio is selected:
the grid trains one full run per candidate ratio and picks the best dev
loss, while the policy pipeline spends one run learning the ratio and one
run finalizing it.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, replace

import numpy as np

from .adapters import FrozenBackbone, MergedAdapterSet, merge_adapter_sets
from .controller import ControllerConfig, ControllerRecord
from .errors import NumericalError, TrainingDivergedError, UsageError
from .masking import ImportanceScale, estimate_scale
from .optim import init_optimizer, optimizer_step_and_reset
from .toytask import (
    DataSplit,
    ToyData,
    ToyTaskConfig,
    gen_toy_data,
    loss_and_gradients,
    mse_loss,
)
from .training import (
    LoraConfig,
    TrainConfig,
    batch_indices,
    final_prune_finetune,
    microdev_loss,
    pipeline_rngs,
    run_pipeline,
    sparsity_policy_learning,
    total_steps,
    train_adapter,
)

__all__ = [
    "GridSpec",
    "GridPoint",
    "GridOutcome",
    "RuntimeReport",
    "EfficiencyComparison",
    "NopruneBaselines",
    "RegularizerCell",
    "MicrodevCell",
    "REGULARIZER_SWEEP",
    "MICRODEV_SIZES",
    "REFERENCE_SPEEDUP_BAND",
    "grid_run_rng",
    "grid_search",
    "run_noprune_baselines",
    "compare_efficiency",
    "format_runtime_table",
    "ablate_regularizers",
    "ablate_microdev",
    "rolling_pcurr",
    "write_grid_csv",
    "write_runtime_csv",
    "write_regularizer_csv",
    "write_microdev_csv",
    "write_rolling_csv",
]

# Wall-clock band observed on the reference full-scale runs, printed next to
# every local measurement for context.
REFERENCE_SPEEDUP_BAND = "3.90× to 7.45×"

# (anchoring weight, exploration offset) cells of the regularizer ablation.
REGULARIZER_SWEEP: tuple[tuple[float, float], ...] = (
    (0.05, 0.01),
    (0.05, 0.0),
    (0.05, 0.05),
    (0.01, 0.01),
    (0.0, 0.01),
    (0.0, 0.0),
)

MICRODEV_SIZES: tuple[int, ...] = (4, 8, 16, 32)

# Child-stream indices 0-7 of a run's root seed belong to the pipeline
# (data generation and the three phases); grid cells draw from 10 upward
# so extra baseline runs never share a stream with the run they shadow.
_GRID_CHILD_BASE = 10


@dataclass(frozen=True)
class GridSpec:
    """The candidate prune ratios a grid search trains through."""

    ratios: tuple[float, ...] = (0.10, 0.20, 0.30, 0.40, 0.50, 0.60, 0.70, 0.80)

    def validate(self) -> "GridSpec":
        if not self.ratios:
            raise UsageError("a grid needs at least one ratio")
        for r in self.ratios:
            if not 0.0 <= r <= 1.0:
                raise UsageError(f"grid ratio {r} outside [0, 1]")
        if any(b <= a for a, b in zip(self.ratios, self.ratios[1:])):
            raise UsageError("grid ratios must be strictly increasing")
        return self


def grid_run_rng(seed: int, index: int) -> np.random.Generator:
    """Deterministic generator for the index-th grid cell of a run seed."""
    kids = np.random.SeedSequence(seed).spawn(_GRID_CHILD_BASE + index + 1)
    return np.random.Generator(np.random.PCG64(kids[_GRID_CHILD_BASE + index]))


@dataclass(frozen=True)
class GridPoint:
    p: float
    dev_loss: float | None
    test_loss: float | None
    steps: int
    failed: bool = False


@dataclass(frozen=True)
class GridOutcome:
    points: tuple[GridPoint, ...]
    best_p: float

    @property
    def best(self) -> GridPoint:
        return next(pt for pt in self.points if pt.p == self.best_p)

    @property
    def total_steps(self) -> int:
        return sum(pt.steps for pt in self.points)


def _pool_map(fn, cells: list, workers: int) -> list:
    """Map `fn` over `cells` with a pool of at most `workers` processes.

    Results come back in input order. Every cell derives its own generator
    and copies its inputs, so the outputs are identical at any pool width;
    workers only return rows — the parent alone writes artifacts.
    """
    if workers < 1:
        raise UsageError(f"workers must be >= 1, got {workers}")
    if workers == 1 or len(cells) <= 1:
        return [fn(c) for c in cells]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=min(workers, len(cells))) as pool:
        return list(pool.map(fn, cells))


def _grid_cell(args: tuple) -> GridPoint:
    """One grid cell: prune at a fixed ratio, fine-tune, report the row."""
    backbone, merged_init, p, index, target_train, dev, scale, train_cfg, seed, test = args
    try:
        fin = final_prune_finetune(
            backbone, merged_init, p, target_train, dev, scale,
            train_cfg, grid_run_rng(seed, index), p_min=0.0, p_max=1.0, test=test,
        )
    except TrainingDivergedError:
        return GridPoint(p=p, dev_loss=None, test_loss=None, steps=0, failed=True)
    return GridPoint(
        p=p, dev_loss=fin.dev_loss, test_loss=fin.test_loss, steps=fin.steps_run
    )


def grid_search(
    backbone: FrozenBackbone,
    merged_init: MergedAdapterSet,
    target_train: DataSplit,
    dev: DataSplit,
    scale: ImportanceScale,
    train_cfg: TrainConfig,
    seed: int,
    grid: GridSpec | None = None,
    test: DataSplit | None = None,
    workers: int = 1,
) -> GridOutcome:
    """One full prune-then-train run per ratio; best = lowest dev loss.

    Every cell starts from the same merged initialization and training
    config; only the fixed prune ratio differs. A diverging cell is kept in
    the table as failed and excluded from the argmin. Ties go to the
    smaller ratio. `workers` > 1 spreads the independent cells over a
    process pool without changing any result.
    """
    grid = (grid or GridSpec()).validate()
    cells = [
        (backbone, merged_init, p, i, target_train, dev, scale, train_cfg, seed, test)
        for i, p in enumerate(grid.ratios)
    ]
    points: list[GridPoint] = _pool_map(_grid_cell, cells, workers)
    survivors = [pt for pt in points if not pt.failed]
    if not survivors:
        raise NumericalError("every grid cell diverged; no best ratio exists")
    best = min(survivors, key=lambda pt: pt.dev_loss)  # ascending order → ties to smaller p
    return GridOutcome(points=tuple(points), best_p=best.p)


@dataclass(frozen=True)
class NopruneBaselines:
    """Dev/test losses of the three reference points with no ratio search."""

    zero_adapter_dev: float
    zero_adapter_test: float
    target_only_dev: float
    target_only_test: float
    merged_noprune_dev: float
    merged_noprune_test: float


def _backbone_loss(backbone: FrozenBackbone, split: DataSplit) -> float:
    pred = sum(split.x @ backbone.site(sid).T for sid in backbone.site_ids())
    return mse_loss(pred, split.y)


def run_noprune_baselines(
    data: ToyData,
    lora_cfg: LoraConfig,
    train_cfg: TrainConfig,
    seed: int,
) -> NopruneBaselines:
    """Reference points: frozen backbone, target-only adapter, unpruned merge.

    The unpruned merge is trained by a plain loop over the same batching
    and optimizer the pipeline uses — deliberately not by calling the
    final-run phase with a zero ratio, so the two routes can be checked
    against each other.
    """
    backbone = data.backbone
    rngs = pipeline_rngs(seed)

    source = train_adapter(
        backbone, data.source_train, lora_cfg, train_cfg, rngs["source"]
    )
    target = train_adapter(
        backbone, data.target_train, lora_cfg, train_cfg, rngs["target"]
    )
    target_merged = merge_adapter_sets([target.adapters], backbone.site_ids())

    merged = merge_adapter_sets(
        [source.adapters, target.adapters], backbone.site_ids()
    ).copy()
    opt = init_optimizer(merged, train_cfg.optimizer_config())
    rng = rngs["phase3"]
    losses: list[float] = []
    best = microdev_loss(backbone, merged, data.dev)
    bad = 0
    for _ in range(train_cfg.epochs):
        for idx in batch_indices(data.target_train.n, train_cfg, rng):
            loss, grads = loss_and_gradients(
                backbone, merged, data.target_train.x[idx], data.target_train.y[idx]
            )
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"no-prune merge training diverged at step {len(losses) + 1}"
                )
            optimizer_step_and_reset(merged, grads, opt)
            losses.append(loss)
        dev_now = microdev_loss(backbone, merged, data.dev)
        if train_cfg.early_stop_patience is not None:
            if dev_now < best:
                best, bad = dev_now, 0
            else:
                bad += 1
                if bad >= train_cfg.early_stop_patience:
                    break

    return NopruneBaselines(
        zero_adapter_dev=_backbone_loss(backbone, data.dev),
        zero_adapter_test=_backbone_loss(backbone, data.test),
        target_only_dev=microdev_loss(backbone, target_merged, data.dev),
        target_only_test=microdev_loss(backbone, target_merged, data.test),
        merged_noprune_dev=microdev_loss(backbone, merged, data.dev),
        merged_noprune_test=microdev_loss(backbone, merged, data.test),
    )


@dataclass(frozen=True)
class RuntimeReport:
    """One side of the runtime comparison table."""

    method: str
    run_count: int
    total_steps: int
    seconds: float
    speedup: float  # reference duration / this method's duration


@dataclass(frozen=True)
class EfficiencyComparison:
    grasp: RuntimeReport
    grid: RuntimeReport
    step_speedup: float
    p_star: float
    best_grid_p: float
    serialized_on_one_host: bool = True


def compare_efficiency(
    task_cfg: ToyTaskConfig,
    lora_cfg: LoraConfig,
    train_cfg: TrainConfig,
    controller_cfg: ControllerConfig,
    seed: int,
    grid: GridSpec | None = None,
    repeats: int = 3,
) -> EfficiencyComparison:
    """Time the 2-run policy pipeline against the full grid on one host.

    Both arms start from the same trained merge and run serialized in this
    process. Wall clock is the best of `repeats` passes per arm (the
    standard way to time under scheduler noise); the work itself is
    deterministic, so repeats change nothing but the clock. Early stopping
    must be off so every run spends an identical step budget.
    """
    if train_cfg.early_stop_patience is not None:
        raise UsageError(
            "the efficiency comparison needs identical per-run budgets; "
            "disable early stopping"
        )
    if repeats < 1:
        raise UsageError("repeats must be >= 1")
    grid = (grid or GridSpec()).validate()
    data = gen_toy_data(task_cfg, seed)
    microdev = data.microdev.head(controller_cfg.microdev_n)
    rngs = pipeline_rngs(seed)
    source = train_adapter(
        data.backbone, data.source_train, lora_cfg, train_cfg, rngs["source"]
    )
    target = train_adapter(
        data.backbone, data.target_train, lora_cfg, train_cfg, rngs["target"]
    )
    merged_init = merge_adapter_sets(
        [source.adapters, target.adapters], data.backbone.site_ids()
    )
    scale = estimate_scale(microdev.x)

    grasp_seconds = []
    policy = final = None
    for _ in range(repeats):
        reps = pipeline_rngs(seed)
        t0 = time.perf_counter()
        policy = sparsity_policy_learning(
            data.backbone, merged_init, data.target_train, microdev,
            controller_cfg, train_cfg, reps["phase2_train"], reps["policy"],
        )
        final = final_prune_finetune(
            data.backbone, merged_init, policy.p_star, data.target_train,
            data.dev, scale, train_cfg, reps["phase3"],
            p_min=controller_cfg.p_min, p_max=controller_cfg.p_max,
        )
        grasp_seconds.append(time.perf_counter() - t0)

    grid_seconds = []
    outcome = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        outcome = grid_search(
            data.backbone, merged_init, data.target_train, data.dev,
            scale, train_cfg, seed, grid=grid,
        )
        grid_seconds.append(time.perf_counter() - t0)

    grasp_steps = policy.steps_run + final.steps_run
    grid_steps = outcome.total_steps
    t_grasp, t_grid = min(grasp_seconds), min(grid_seconds)
    return EfficiencyComparison(
        grasp=RuntimeReport(
            method="policy",
            run_count=2,
            total_steps=grasp_steps,
            seconds=t_grasp,
            speedup=t_grid / t_grasp,
        ),
        grid=RuntimeReport(
            method="grid",
            run_count=len(grid.ratios),
            total_steps=grid_steps,
            seconds=t_grid,
            speedup=1.0,
        ),
        step_speedup=grid_steps / grasp_steps,
        p_star=policy.p_star,
        best_grid_p=outcome.best_p,
    )


def format_runtime_table(comp: EfficiencyComparison, dataset: str = "toy-regression") -> str:
    """Human-readable block for the runtime comparison, with the reference band."""
    lines = [
        f"{'method':<8} {'dataset':<16} {'runs':>4} {'steps':>8} {'runtime_s':>10} {'speedup':>8}",
    ]
    for rep in (comp.grid, comp.grasp):
        lines.append(
            f"{rep.method:<8} {dataset:<16} {rep.run_count:>4} "
            f"{rep.total_steps:>8} {rep.seconds:>10.3f} {rep.speedup:>7.2f}×"
        )
    lines.append(
        f"optimizer-step speedup {comp.step_speedup:.1f}×; "
        f"wall-clock speedup {comp.grasp.speedup:.2f}× on this host "
        f"(reference band {REFERENCE_SPEEDUP_BAND} on the full-scale runs)"
    )
    lines.append(
        "timed serialized on one host: "
        + ("yes" if comp.serialized_on_one_host else "no")
    )
    return "\n".join(lines)


@dataclass(frozen=True)
class RegularizerCell:
    beta: float
    tau: float
    p_star: float
    dev_loss: float


def _pipeline_cell(args: tuple) -> tuple[float, float]:
    """One full pipeline run; returns (p_star, final dev loss)."""
    task_cfg, lora_cfg, train_cfg, controller_cfg, seed = args
    art = run_pipeline(task_cfg, lora_cfg, train_cfg, controller_cfg, seed)
    return art.p_star, art.final.dev_loss


def ablate_regularizers(
    task_cfg: ToyTaskConfig,
    lora_cfg: LoraConfig,
    train_cfg: TrainConfig,
    controller_cfg: ControllerConfig,
    seeds: tuple[int, ...] = (42,),
    sweep: tuple[tuple[float, float], ...] = REGULARIZER_SWEEP,
    workers: int = 1,
) -> list[RegularizerCell]:
    """One policy pipeline per (anchoring, exploration) cell and seed.

    Every cell sees the same seed set; rows report the mean selected ratio
    and mean final dev loss over those seeds. `workers` > 1 spreads the
    independent (cell, seed) runs over a process pool.
    """
    if not seeds:
        raise UsageError("need at least one seed")
    cells = []
    for beta, tau in sweep:
        cfg = replace(controller_cfg, beta=beta, tau_ent=tau).validate()
        cells += [(task_cfg, lora_cfg, train_cfg, cfg, seed) for seed in seeds]
    results = _pool_map(_pipeline_cell, cells, workers)
    rows = []
    for j, (beta, tau) in enumerate(sweep):
        chunk = results[j * len(seeds): (j + 1) * len(seeds)]
        rows.append(
            RegularizerCell(
                beta=beta,
                tau=tau,
                p_star=float(np.mean([c[0] for c in chunk])),
                dev_loss=float(np.mean([c[1] for c in chunk])),
            )
        )
    return rows


@dataclass(frozen=True)
class MicrodevCell:
    m: int
    p_star: float
    dev_loss: float
    non_micro: bool = False  # m at (or past) the fine-tuning set size


def ablate_microdev(
    task_cfg: ToyTaskConfig,
    lora_cfg: LoraConfig,
    train_cfg: TrainConfig,
    controller_cfg: ControllerConfig,
    seeds: tuple[int, ...] = (42,),
    sizes: tuple[int, ...] = MICRODEV_SIZES,
    workers: int = 1,
) -> list[MicrodevCell]:
    """Sweep the micro-dev size m; smaller slices nest inside larger ones.

    All sizes share one generated pool per seed, head-sliced to m, so the
    4-example slice is literally the first quarter of the 16-example one.
    `workers` > 1 spreads the independent (size, seed) runs over a pool.
    """
    if not seeds:
        raise UsageError("need at least one seed")
    for m in sizes:
        if m < 1:
            raise UsageError(f"micro-dev size must be >= 1, got {m}")
        if m > task_cfg.microdev_n:
            raise UsageError(
                f"micro-dev size {m} exceeds the task's generated pool "
                f"({task_cfg.microdev_n})"
            )
    cells = []
    for m in sizes:
        cfg = replace(controller_cfg, microdev_n=m).validate()
        cells += [(task_cfg, lora_cfg, train_cfg, cfg, seed) for seed in seeds]
    results = _pool_map(_pipeline_cell, cells, workers)
    rows = []
    for j, m in enumerate(sizes):
        chunk = results[j * len(seeds): (j + 1) * len(seeds)]
        rows.append(
            MicrodevCell(
                m=m,
                p_star=float(np.mean([c[0] for c in chunk])),
                dev_loss=float(np.mean([c[1] for c in chunk])),
                non_micro=m >= task_cfg.target_train_n,
            )
        )
    return rows


def rolling_pcurr(
    records: list[ControllerRecord], window: int = 10
) -> list[tuple[int, float, float]]:
    """Trailing-window mean and population std of the committed ratio.

    Early rounds with fewer than `window` records use everything available.
    """
    if not records:
        raise UsageError("cannot summarize an empty controller log")
    if window < 1:
        raise UsageError("window must be >= 1")
    ps = [r.p_curr_after for r in records]
    out = []
    for i, rec in enumerate(records):
        w = np.asarray(ps[max(0, i - window + 1): i + 1])
        out.append((rec.round, float(w.mean()), float(w.std())))
    return out


def write_grid_csv(path, outcome: GridOutcome) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["p", "dev_loss", "test_loss", "steps"])
        for pt in outcome.points:
            w.writerow([
                repr(pt.p),
                "" if pt.dev_loss is None else repr(pt.dev_loss),
                "" if pt.test_loss is None else repr(pt.test_loss),
                pt.steps,
            ])


def write_runtime_csv(path, comp: EfficiencyComparison, dataset: str = "toy-regression") -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method", "dataset", "runs", "runtime", "speedup"])
        for rep in (comp.grid, comp.grasp):
            w.writerow([
                rep.method, dataset, rep.run_count,
                repr(rep.seconds), repr(rep.speedup),
            ])


def write_regularizer_csv(path, rows: list[RegularizerCell]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["beta", "tau", "p_star", "dev_loss"])
        for r in rows:
            w.writerow([repr(r.beta), repr(r.tau), repr(r.p_star), repr(r.dev_loss)])


def write_microdev_csv(path, rows: list[MicrodevCell]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["m", "p_star", "dev_loss"])
        for r in rows:
            w.writerow([r.m, repr(r.p_star), repr(r.dev_loss)])


def write_rolling_csv(path, series: list[tuple[int, float, float]]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["round", "mean", "std"])
        for rnd, mean, std in series:
            w.writerow([rnd, repr(mean), repr(std)])
