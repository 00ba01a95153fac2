"""Three-phase pipeline harness on the synthetic task.

Phase 1 trains one low-rank adapter set per task on the frozen backbone and
merges them into stacked factors (the pre-controller merged initialization).
Phase 2 continues target fine-tuning from that initialization with a
controller round interleaved every K optimizer steps, learning the global
prune ratio online. Phase 3 restarts from the same pre-controller merged
initialization, builds the mask once at the learned ratio, and fine-tunes
with the mask fixed, early-stopping on the dev split.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .adapters import (
    FrozenBackbone,
    LoraAdapter,
    MergedAdapterSet,
    SiteFactors,
    merge_adapter_sets,
)
from .controller import (
    ControllerConfig,
    ControllerRecord,
    controller_round,
    init_policy,
    reward_from_loss,
    select_p_star,
)
from .errors import TrainingDivergedError, UsageError
from .masking import (
    ImportanceScale,
    SparsityMask,
    build_mask,
    estimate_scale,
    importance_scores,
    mask_apply_inplace,
    newly_pruned,
    prune_threshold,
)
from .optim import (
    OptimizerConfig,
    OptimizerState,
    init_optimizer,
    optimizer_step_and_reset,
    reset_moments,
)
from .toytask import DataSplit, ToyData, ToyTaskConfig, gen_toy_data, loss_and_gradients, model_forward, mse_loss

__all__ = [
    "LoraConfig",
    "TrainConfig",
    "AdapterTrainResult",
    "MaskedTrainingEnv",
    "PolicyLearningResult",
    "FinalRunResult",
    "RunArtifacts",
    "steps_per_epoch",
    "total_steps",
    "batch_indices",
    "init_adapter_factors",
    "factors_to_adapters",
    "train_adapter",
    "microdev_loss",
    "sparsity_policy_learning",
    "final_prune_finetune",
    "pipeline_rngs",
    "run_pipeline",
]


@dataclass(frozen=True)
class LoraConfig:
    """Adapter shape and scaling. `dropout` is accepted for config-file
    compatibility but is a no-op on this deterministic linear model (it
    would only inject train/eval mismatch, so it defaults to off)."""

    rank: int = 8
    alpha: float = 32.0
    dropout: float = 0.0

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def validate(self) -> None:
        if not isinstance(self.rank, int) or self.rank < 1:
            raise UsageError(f"rank must be a positive integer, got {self.rank!r}")
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise UsageError(f"alpha must be positive, got {self.alpha}")
        if not (0.0 <= self.dropout < 1.0):
            raise UsageError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass(frozen=True)
class TrainConfig:
    """Shared optimizer-loop settings for all three phases.

    The step budget of a run is epochs * ceil(n_train / batch_size).
    `early_stop_patience` counts consecutive end-of-epoch dev evaluations
    without improvement before stopping (phase 3 only); None disables early
    stopping, which also keeps step counts exactly at the budget.
    """

    learning_rate: float = 1e-4
    batch_size: int = 1
    epochs: int = 10
    weight_decay: float = 0.01
    early_stop_patience: int | None = 3
    shuffle: bool = True

    def validate(self) -> None:
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise UsageError(f"learning_rate must be positive, got {self.learning_rate}")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise UsageError(f"batch_size must be a positive integer, got {self.batch_size!r}")
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise UsageError(f"epochs must be a positive integer, got {self.epochs!r}")
        if self.weight_decay < 0:
            raise UsageError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise UsageError(
                f"early_stop_patience must be >= 1 or None, got {self.early_stop_patience}"
            )

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(
            learning_rate=self.learning_rate, weight_decay=self.weight_decay
        )


def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def total_steps(cfg: TrainConfig, n: int) -> int:
    """The run's step budget: epochs * ceil(n / batch_size)."""
    return cfg.epochs * steps_per_epoch(n, cfg.batch_size)


def init_adapter_factors(
    backbone: FrozenBackbone, lora_cfg: LoraConfig, rng: np.random.Generator
) -> MergedAdapterSet:
    """Fresh single-adapter factors per site, in trainable stacked form.

    A starts Gaussian, B starts zero, so the initial update is exactly zero.
    The alpha/rank scaling is folded into the A factor up front (the same
    convention merged checkpoints use), so the forward pass carries scale 1
    and `factors_to_adapters` can unfold it for persistence.
    """
    lora_cfg.validate()
    sites = []
    for sid in backbone.site_ids():
        d_out, d_in = backbone.site(sid).shape
        a = lora_cfg.scale * rng.normal(
            0.0, 1.0 / math.sqrt(d_in), size=(lora_cfg.rank, d_in)
        )
        b = np.zeros((d_out, lora_cfg.rank))
        sites.append(SiteFactors(sid, a, b))
    return MergedAdapterSet(sites)


def factors_to_adapters(
    merged: MergedAdapterSet, lora_cfg: LoraConfig
) -> list[LoraAdapter]:
    """Unfold single-adapter stacked factors back into adapter pairs."""
    out = []
    for s in merged.sites:
        if s.a.shape[0] != lora_cfg.rank:
            raise UsageError(
                f"site {s.site_id!r} has stacked rank {s.a.shape[0]}, not a "
                f"single rank-{lora_cfg.rank} adapter"
            )
        out.append(
            LoraAdapter(
                site_id=s.site_id,
                a=s.a / lora_cfg.scale,
                b=s.b.copy(),
                rank=lora_cfg.rank,
                alpha=lora_cfg.alpha,
            )
        )
    return out


@dataclass
class AdapterTrainResult:
    adapters: list[LoraAdapter]
    step_losses: list[float]


def batch_indices(n: int, cfg: TrainConfig, rng: np.random.Generator):
    """Index batches for one epoch; the shuffle draws once from `rng`."""
    order = rng.permutation(n) if cfg.shuffle else np.arange(n)
    for start in range(0, n, cfg.batch_size):
        yield order[start : start + cfg.batch_size]


def _training_step(
    backbone: FrozenBackbone,
    merged: MergedAdapterSet,
    split: DataSplit,
    idx: np.ndarray,
    opt: OptimizerState,
    mask: SparsityMask | None,
    step_losses: list[float],
) -> None:
    loss, grads = loss_and_gradients(backbone, merged, split.x[idx], split.y[idx])
    if not math.isfinite(loss):
        raise TrainingDivergedError(
            f"training loss became non-finite ({loss}) at step {len(step_losses) + 1}"
        )
    optimizer_step_and_reset(merged, grads, opt, mask=mask)
    step_losses.append(loss)


def train_adapter(
    backbone: FrozenBackbone,
    split: DataSplit,
    lora_cfg: LoraConfig,
    train_cfg: TrainConfig,
    rng: np.random.Generator,
) -> AdapterTrainResult:
    """Phase 1: fit one adapter set to one task; the backbone stays frozen."""
    train_cfg.validate()
    merged = init_adapter_factors(backbone, lora_cfg, rng)
    opt = init_optimizer(merged, train_cfg.optimizer_config())
    losses: list[float] = []
    for _ in range(train_cfg.epochs):
        for idx in batch_indices(split.n, train_cfg, rng):
            _training_step(backbone, merged, split, idx, opt, None, losses)
    return AdapterTrainResult(
        adapters=factors_to_adapters(merged, lora_cfg), step_losses=losses
    )


def microdev_loss(
    backbone: FrozenBackbone, merged: MergedAdapterSet, split: DataSplit
) -> float:
    """Mean loss over a fixed evaluation slice; pure, no gradients."""
    if split.n < 1:
        raise UsageError("cannot evaluate on an empty slice")
    return mse_loss(model_forward(backbone, merged, split.x), split.y)


@dataclass
class MaskedTrainingEnv:
    """The live-model side of the controller protocol.

    Baseline probes read the committed masked parameters in place; candidate
    probes build a trial mask from the current magnitudes and evaluate it on
    a throwaway copy, so the trained parameters are untouched (the round
    audits this via checksum). Commits rebuild the mask at the new ratio,
    zero the newly pruned coordinates, and clear their optimizer moments.
    """

    backbone: FrozenBackbone
    merged: MergedAdapterSet
    microdev: DataSplit
    scale: ImportanceScale
    opt_state: OptimizerState
    mask: SparsityMask
    commits: int = 0

    def __post_init__(self):
        # The backbone term of the micro-dev forward never changes (frozen
        # weights, fixed slice), so probes only recompute the adapter term.
        self._base = sum(
            self.microdev.x @ self.backbone.site(sid).T
            for sid in (s.site_id for s in self.merged.sites)
        )
        self._scores: dict[int, np.ndarray] | None = None

    def begin_round(self) -> None:
        """Drop cached importance scores; call after any parameter change."""
        self._scores = None

    def _importance(self) -> dict[int, np.ndarray]:
        # Within one round the parameters are fixed, so all of the round's
        # candidate probes share the same importance scores.
        if self._scores is None:
            self._scores = {
                tid: importance_scores(arr, self.scale)
                for tid, _sid, _fac, arr in self.merged.tensors()
            }
        return self._scores

    def _probe_loss(self, factors: list[tuple[np.ndarray, np.ndarray]]) -> float:
        x = self.microdev.x
        pred = self._base
        for a, b in factors:
            pred = pred + (x @ a.T) @ b.T
        return mse_loss(pred, self.microdev.y)

    def baseline_reward(self) -> float:
        return reward_from_loss(
            self._probe_loss([(s.a, s.b) for s in self.merged.sites])
        )

    def candidate_reward(self, p: float) -> float:
        scores = self._importance()
        tensors = self.merged.tensors()
        factors = []
        for i in range(0, len(tensors), 2):  # tensors() pairs A before B
            tid_a, _sid, _fac, a = tensors[i]
            tid_b, _sid2, _fac2, b = tensors[i + 1]
            _, tau_a = prune_threshold(scores[tid_a], p)
            _, tau_b = prune_threshold(scores[tid_b], p)
            factors.append(
                (
                    a * (scores[tid_a] > tau_a).reshape(a.shape),
                    b * (scores[tid_b] > tau_b).reshape(b.shape),
                )
            )
        return reward_from_loss(self._probe_loss(factors))

    def commit(self, p_new: float) -> None:
        new_mask = build_mask(self.merged, p_new, self.scale)
        newly = newly_pruned(self.mask, new_mask)
        mask_apply_inplace(self.merged, new_mask)
        reset_moments(self.opt_state, newly)
        self.mask = new_mask
        self.commits += 1
        self._scores = None

    def checksum(self) -> str:
        return self.merged.checksum()


@dataclass
class PolicyLearningResult:
    records: list[ControllerRecord]
    p_star: float
    merged: MergedAdapterSet  # end-of-phase parameters, diagnostics only
    mask: SparsityMask
    step_losses: list[float]
    commits: int

    @property
    def steps_run(self) -> int:
        return len(self.step_losses)


def sparsity_policy_learning(
    backbone: FrozenBackbone,
    merged_init: MergedAdapterSet,
    target_train: DataSplit,
    microdev: DataSplit,
    controller_cfg: ControllerConfig,
    train_cfg: TrainConfig,
    rng_train: np.random.Generator,
    rng_policy: np.random.Generator,
    on_round=None,
) -> PolicyLearningResult:
    """Phase 2: fine-tune under the committed mask, one controller round
    every `round_every` steps, and select p_star from the round log.

    `merged_init` is never modified; the phase trains a copy. On divergence
    the partial round log is attached to the raised error as `.records`.
    `on_round`, if given, is called with each record as soon as its round
    finishes — the hook that lets callers persist an append-only log that
    stays valid even when the run is cut short.
    """
    controller_cfg.validate()
    train_cfg.validate()
    merged = merged_init.copy()
    scale = estimate_scale(microdev.x)
    mask = build_mask(merged, controller_cfg.p_init, scale)
    mask_apply_inplace(merged, mask)
    opt = init_optimizer(merged, train_cfg.optimizer_config())
    env = MaskedTrainingEnv(
        backbone=backbone,
        merged=merged,
        microdev=microdev,
        scale=scale,
        opt_state=opt,
        mask=mask,
    )
    policy = init_policy(controller_cfg)
    records: list[ControllerRecord] = []
    losses: list[float] = []
    step = 0
    try:
        for _ in range(train_cfg.epochs):
            for idx in batch_indices(target_train.n, train_cfg, rng_train):
                _training_step(backbone, merged, target_train, idx, opt, env.mask, losses)
                step += 1
                if step % controller_cfg.round_every == 0:
                    env.begin_round()
                    policy, rec = controller_round(
                        policy,
                        controller_cfg,
                        rng_policy,
                        env,
                        round_index=len(records),
                        step=step,
                    )
                    records.append(rec)
                    if on_round is not None:
                        on_round(rec)
    except TrainingDivergedError as exc:
        exc.records = records
        raise
    if not records:
        raise UsageError(
            f"step budget {step} is smaller than the controller interval "
            f"{controller_cfg.round_every}; no rounds ran"
        )
    return PolicyLearningResult(
        records=records,
        p_star=select_p_star(records),
        merged=merged,
        mask=env.mask,
        step_losses=losses,
        commits=env.commits,
    )


@dataclass
class FinalRunResult:
    merged: MergedAdapterSet
    mask: SparsityMask
    p_star: float
    step_losses: list[float]
    dev_history: list[float]  # index 0 is the pre-training dev loss
    dev_loss: float
    test_loss: float | None
    stopped_early: bool

    @property
    def steps_run(self) -> int:
        return len(self.step_losses)


def final_prune_finetune(
    backbone: FrozenBackbone,
    merged_init: MergedAdapterSet,
    p_star: float,
    target_train: DataSplit,
    dev: DataSplit,
    scale: ImportanceScale,
    train_cfg: TrainConfig,
    rng: np.random.Generator,
    p_min: float = 0.10,
    p_max: float = 0.80,
    test: DataSplit | None = None,
) -> FinalRunResult:
    """Phase 3: restart from the pre-controller merge, mask once, train.

    The mask is built at p_star from the merged initialization and never
    rebuilt. Early stopping watches the dev split at each epoch end (the dev
    split must be disjoint from the controller's micro-dev slice; the data
    generator guarantees this).
    """
    train_cfg.validate()
    if not (p_min <= p_star <= p_max):
        raise UsageError(f"p_star {p_star} outside the prune range [{p_min}, {p_max}]")
    merged = merged_init.copy()
    mask = build_mask(merged, p_star, scale)
    mask_apply_inplace(merged, mask)
    opt = init_optimizer(merged, train_cfg.optimizer_config())

    losses: list[float] = []
    dev_history = [microdev_loss(backbone, merged, dev)]
    best = dev_history[0]
    bad = 0
    stopped = False
    for _ in range(train_cfg.epochs):
        for idx in batch_indices(target_train.n, train_cfg, rng):
            _training_step(backbone, merged, target_train, idx, opt, mask, losses)
        dev_now = microdev_loss(backbone, merged, dev)
        dev_history.append(dev_now)
        if train_cfg.early_stop_patience is not None:
            if dev_now < best:
                best = dev_now
                bad = 0
            else:
                bad += 1
                if bad >= train_cfg.early_stop_patience:
                    stopped = True
                    break
    test_loss = microdev_loss(backbone, merged, test) if test is not None else None
    return FinalRunResult(
        merged=merged,
        mask=mask,
        p_star=p_star,
        step_losses=losses,
        dev_history=dev_history,
        dev_loss=dev_history[-1],
        test_loss=test_loss,
        stopped_early=stopped,
    )


@dataclass
class RunArtifacts:
    """Everything one pipeline run produces, in memory."""

    seed: int
    data: ToyData
    source_adapters: list[LoraAdapter]
    target_adapters: list[LoraAdapter]
    merged_init: MergedAdapterSet
    policy: PolicyLearningResult
    final: FinalRunResult
    source_losses: list[float] = field(repr=False, default_factory=list)
    target_losses: list[float] = field(repr=False, default_factory=list)

    @property
    def p_star(self) -> float:
        return self.policy.p_star


def pipeline_rngs(seed: int) -> dict[str, np.random.Generator]:
    """Independent substreams for every stochastic stage of one run.

    The data generator internally consumes child streams 0-2 of the same
    root seed, so the training-side streams start at child 3. Fixed indices
    keep each stage's stream independent of every other stage's outcome.
    """
    kids = np.random.SeedSequence(seed).spawn(8)
    return {
        "source": np.random.Generator(np.random.PCG64(kids[3])),
        "target": np.random.Generator(np.random.PCG64(kids[4])),
        "phase2_train": np.random.Generator(np.random.PCG64(kids[5])),
        "policy": np.random.Generator(np.random.PCG64(kids[6])),
        "phase3": np.random.Generator(np.random.PCG64(kids[7])),
    }


def run_pipeline(
    task_cfg: ToyTaskConfig,
    lora_cfg: LoraConfig,
    train_cfg: TrainConfig,
    controller_cfg: ControllerConfig,
    seed: int,
    data: ToyData | None = None,
) -> RunArtifacts:
    """All three phases end to end as a pure function of configs and seed.

    The controller's `microdev_n` selects how much of the generated micro-dev
    pool the run actually uses (a head slice, so smaller sizes nest inside
    larger ones); both the probe rewards and the importance scale see only
    that slice.
    """
    data = data if data is not None else gen_toy_data(task_cfg, seed)
    if controller_cfg.microdev_n > data.microdev.n:
        raise UsageError(
            f"controller wants m={controller_cfg.microdev_n} micro-dev examples "
            f"but the generated pool holds {data.microdev.n}"
        )
    microdev = data.microdev.head(controller_cfg.microdev_n)
    assert {r.tobytes() for r in data.dev.x}.isdisjoint(
        {r.tobytes() for r in microdev.x}
    ), "dev split overlaps the micro-dev slice"
    rngs = pipeline_rngs(seed)
    backbone = data.backbone

    source = train_adapter(backbone, data.source_train, lora_cfg, train_cfg, rngs["source"])
    target = train_adapter(backbone, data.target_train, lora_cfg, train_cfg, rngs["target"])
    merged_init = merge_adapter_sets(
        [source.adapters, target.adapters], backbone.site_ids()
    )

    policy = sparsity_policy_learning(
        backbone,
        merged_init,
        data.target_train,
        microdev,
        controller_cfg,
        train_cfg,
        rngs["phase2_train"],
        rngs["policy"],
    )

    scale = estimate_scale(microdev.x)
    final = final_prune_finetune(
        backbone,
        merged_init,
        policy.p_star,
        data.target_train,
        data.dev,
        scale,
        train_cfg,
        rngs["phase3"],
        p_min=controller_cfg.p_min,
        p_max=controller_cfg.p_max,
        test=data.test,
    )
    return RunArtifacts(
        seed=seed,
        data=data,
        source_adapters=source.adapters,
        target_adapters=target.adapters,
        merged_init=merged_init,
        policy=policy,
        final=final,
        source_losses=source.step_losses,
        target_losses=target.step_losses,
    )
