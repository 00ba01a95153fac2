"""Synthetic regression task standing in for source/target fine-tuning corpora.

A frozen multi-site linear backbone defines the base model. Two teachers are
built on top of it: the source teacher adds a low-rank perturbation at every
site, and the target teacher adds a different low-rank perturbation whose
direction conflicts with the source one by a configurable amount. Training
data for both tasks is sampled from the corresponding teacher with Gaussian
observation noise, so a low-rank adapter of sufficient rank can realize
either task exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .adapters import FrozenBackbone, MergedAdapterSet, matrix
from .errors import DimensionError, UsageError

__all__ = [
    "ToyTaskConfig",
    "DataSplit",
    "ToyData",
    "site_names",
    "gen_toy_data",
    "teacher_forward",
    "model_forward",
    "mse_loss",
    "loss_and_gradients",
]

_BASE_SITE_NAMES = ("q_proj", "v_proj", "k_proj", "o_proj")


def site_names(n_sites: int) -> list[str]:
    """Stable site identifiers; the default two mirror Q/V injection."""
    names = list(_BASE_SITE_NAMES[:n_sites])
    names += [f"proj{i}" for i in range(len(names), n_sites)]
    return names


@dataclass(frozen=True)
class ToyTaskConfig:
    """Shapes, split sizes, and teacher geometry for one synthetic task pair.

    `interference` in [0, 1] rotates the target teacher's input directions
    against the source teacher's: 0 keeps them exactly orthogonal, 1 makes
    the target demand the opposite of what the source adapter learned.
    `teacher_rank` is the rank of each planted perturbation; adapters with
    rank >= teacher_rank can realize the task exactly.

    `target_strength` and `source_strength` scale the two perturbations'
    output energy. The defaults make the source perturbation carry twice
    the target's energy, mimicking a well-trained donor adapter merged
    onto a task with little data: the source block then dominates the
    magnitude order, marginal pruning eats into target-signal coordinates,
    and the controller has a real penalty to learn from when it probes
    higher ratios.

    `microdev_n` sizes the generated micro-dev pool, which is deliberately
    larger than the 16-example slice the controller consumes by default:
    runs head-slice the pool, so size sweeps nest inside one generation
    instead of regenerating data. The evaluation block draws dev first and
    the pool after it from one stream, which makes enlarging the pool a
    pure extension — every other split except test is unchanged.
    """

    d_in: int = 24
    d_out: int = 16
    n_sites: int = 2
    teacher_rank: int = 4
    target_strength: float = 0.5
    source_strength: float = 1.0
    source_train_n: int = 384
    target_train_n: int = 288
    dev_n: int = 64
    microdev_n: int = 32
    test_n: int = 128
    noise_std: float = 0.05
    interference: float = 0.5

    def validate(self) -> None:
        for name in (
            "d_in",
            "d_out",
            "n_sites",
            "teacher_rank",
            "source_train_n",
            "target_train_n",
            "dev_n",
            "microdev_n",
            "test_n",
        ):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise UsageError(f"{name} must be a positive integer, got {v!r}")
        if self.d_in < 2 * self.teacher_rank:
            raise UsageError(
                "d_in must be at least 2 * teacher_rank so orthogonal source "
                f"and target directions exist, got d_in={self.d_in}, "
                f"teacher_rank={self.teacher_rank}"
            )
        if not (0.0 <= self.interference <= 1.0):
            raise UsageError(f"interference must be in [0, 1], got {self.interference}")
        if not (self.noise_std >= 0.0 and math.isfinite(self.noise_std)):
            raise UsageError(f"noise_std must be finite and >= 0, got {self.noise_std}")
        for name in ("target_strength", "source_strength"):
            v = getattr(self, name)
            if not (v > 0.0 and math.isfinite(v)):
                raise UsageError(f"{name} must be positive, got {v}")


@dataclass(frozen=True)
class DataSplit:
    """A fixed batch of inputs and regression targets."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", matrix(self.x))
        object.__setattr__(self, "y", matrix(self.y))
        if self.x.shape[0] != self.y.shape[0]:
            raise DimensionError(
                f"split has {self.x.shape[0]} inputs but {self.y.shape[0]} targets"
            )
        self.x.setflags(write=False)
        self.y.setflags(write=False)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def head(self, n: int) -> "DataSplit":
        """The first n examples (used for nested micro-dev slices)."""
        if not 1 <= n <= self.n:
            raise UsageError(f"requested {n} examples from a split of {self.n}")
        return DataSplit(self.x[:n], self.y[:n])


@dataclass(frozen=True)
class ToyData:
    """Everything one (cfg, seed) pair generates, regenerable bit-exactly."""

    config: ToyTaskConfig
    seed: int
    backbone: FrozenBackbone
    source_train: DataSplit
    target_train: DataSplit
    dev: DataSplit
    microdev: DataSplit
    test: DataSplit
    teacher_source: dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    teacher_target: dict[str, np.ndarray] = field(repr=False, default_factory=dict)


def _teacher_site(
    rng: np.random.Generator, cfg: ToyTaskConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One site's frozen weight plus its source and target perturbations."""
    w = rng.normal(0.0, 1.0 / math.sqrt(cfg.d_in), size=(cfg.d_out, cfg.d_in))
    r = cfg.teacher_rank
    # Orthonormal input directions: the first r rows drive the source task,
    # the next r are reserved for the target rotation below.
    raw = rng.normal(size=(2 * r, cfg.d_in))
    q, _ = np.linalg.qr(raw.T)
    v = q.T
    v_src, v_orth = v[:r], v[r : 2 * r]
    i = cfg.interference
    denom = math.sqrt((1.0 - i) ** 2 + i**2)
    v_tgt = ((1.0 - i) * v_orth - i * v_src) / denom
    u = rng.normal(0.0, 1.0 / math.sqrt(r), size=(cfg.d_out, r))
    return (
        matrix(w),
        matrix(cfg.source_strength * (u @ v_src)),
        matrix(cfg.target_strength * (u @ v_tgt)),
    )


def teacher_forward(
    backbone: FrozenBackbone, deltas: dict[str, np.ndarray], x: np.ndarray
) -> np.ndarray:
    """Noise-free teacher outputs: sum over sites of x @ (W_s + D_s)^T."""
    out = None
    for sid in backbone.site_ids():
        y = x @ (backbone.site(sid) + deltas[sid]).T
        out = y if out is None else out + y
    return out


def _sample_split(
    rng: np.random.Generator,
    n: int,
    backbone: FrozenBackbone,
    deltas: dict[str, np.ndarray],
    noise_std: float,
) -> DataSplit:
    d_in = backbone.site(backbone.site_ids()[0]).shape[1]
    x = rng.normal(size=(n, d_in))
    y = teacher_forward(backbone, deltas, x)
    if noise_std > 0:
        y = y + noise_std * rng.normal(size=y.shape)
    return DataSplit(x, y)


def gen_toy_data(cfg: ToyTaskConfig, seed: int) -> ToyData:
    """Generate the task pair and all splits as a pure function of (cfg, seed).

    Seed handling: three independent substreams (teacher construction,
    source sampling, target sampling), so every split is reproducible
    bit-for-bit. The dev and micro-dev splits are sliced from one block of
    draws, which makes them disjoint by construction.
    """
    cfg.validate()
    kids = np.random.SeedSequence(seed).spawn(3)
    rng_teacher = np.random.Generator(np.random.PCG64(kids[0]))
    rng_source = np.random.Generator(np.random.PCG64(kids[1]))
    rng_target = np.random.Generator(np.random.PCG64(kids[2]))

    names = site_names(cfg.n_sites)
    weights, d_src, d_tgt = [], {}, {}
    for sid in names:
        w, ds, dt = _teacher_site(rng_teacher, cfg)
        weights.append((sid, w))
        d_src[sid] = ds
        d_tgt[sid] = dt
    backbone = FrozenBackbone(sites=tuple(weights), embedding_dim=cfg.d_in)

    source_train = _sample_split(
        rng_source, cfg.source_train_n, backbone, d_src, cfg.noise_std
    )
    target_train = _sample_split(
        rng_target, cfg.target_train_n, backbone, d_tgt, cfg.noise_std
    )
    evaluation = _sample_split(
        rng_target, cfg.dev_n + cfg.microdev_n, backbone, d_tgt, cfg.noise_std
    )
    dev = DataSplit(evaluation.x[: cfg.dev_n], evaluation.y[: cfg.dev_n])
    microdev = DataSplit(evaluation.x[cfg.dev_n :], evaluation.y[cfg.dev_n :])
    test = _sample_split(rng_target, cfg.test_n, backbone, d_tgt, cfg.noise_std)

    return ToyData(
        config=cfg,
        seed=seed,
        backbone=backbone,
        source_train=source_train,
        target_train=target_train,
        dev=dev,
        microdev=microdev,
        test=test,
        teacher_source=d_src,
        teacher_target=d_tgt,
    )


def model_forward(
    backbone: FrozenBackbone, merged: MergedAdapterSet, x: np.ndarray
) -> np.ndarray:
    """Student outputs: sum over sites of x @ W^T + (x @ a^T) @ b^T.

    Factor scalings are already folded into the stacked factors, so the
    low-rank product carries scale 1 here. Masks are applied by zeroing
    coordinates in the factors themselves, never inside the forward pass.
    """
    x = matrix(x)
    out = None
    for s in merged.sites:
        w = backbone.site(s.site_id)
        if x.shape[1] != w.shape[1]:
            raise DimensionError(
                f"input cols {x.shape[1]} do not match site d_in {w.shape[1]}"
            )
        y = x @ w.T + (x @ s.a.T) @ s.b.T
        out = y if out is None else out + y
    if out is None:
        raise UsageError("adapter set has no sites")
    return out


def mse_loss(pred: np.ndarray, y: np.ndarray) -> float:
    """Mean squared error over all examples and output coordinates."""
    if pred.shape != y.shape:
        raise DimensionError(f"prediction shape {pred.shape} != target shape {y.shape}")
    diff = pred - y
    return float(np.mean(diff * diff))


def loss_and_gradients(
    backbone: FrozenBackbone,
    merged: MergedAdapterSet,
    x: np.ndarray,
    y: np.ndarray,
) -> tuple[float, dict[int, np.ndarray]]:
    """MSE loss plus exact analytic gradients for every factor tensor.

    With E = pred - y and G = 2 E / (n * d_out):
      dL/db = G^T (x a^T)        dL/da = (G b)^T x
    keyed by the same tensor ids the masking and optimizer layers use.
    """
    x = matrix(x)
    y = matrix(y)
    hidden = {}
    pred = None
    for s in merged.sites:
        w = backbone.site(s.site_id)
        h = x @ s.a.T
        hidden[s.site_id] = h
        out = x @ w.T + h @ s.b.T
        pred = out if pred is None else pred + out
    if pred is None:
        raise UsageError("adapter set has no sites")
    if pred.shape != y.shape:
        raise DimensionError(f"prediction shape {pred.shape} != target shape {y.shape}")
    diff = pred - y
    loss = float(np.mean(diff * diff))
    g_out = (2.0 / diff.size) * diff
    grads: dict[int, np.ndarray] = {}
    for tid, sid, fac, _arr in merged.tensors():
        s = merged.site(sid)
        if fac == "A":
            grads[tid] = (g_out @ s.b).T @ x
        else:
            grads[tid] = g_out.T @ hidden[sid]
    return loss, grads
