"""Gaussian sparsity policy: the online controller that learns the prune ratio.

A scalar Gaussian policy N(mu, sigma^2) proposes candidate prune ratios. Each
controller round evaluates the current committed model on a fixed micro-dev
slice (the baseline), probes C candidate ratios on temporary masked copies,
and updates (mu, sigma) with a score-function gradient over mean-centered
advantages. A candidate is committed only when its relative reward is
non-negative, and the committed ratio moves by at most delta_max per round.
The raw Gaussian draw z is used in the gradient terms; the clamped ratio p is
what gets masked and evaluated (clamping treated as truncation, gradients
passed through).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ProbePurityError, RewardError, StorageError, UsageError
from .serialize import canonical_json_line

SIGMA_FLOOR = 1e-3


def clamp(x: float, lo: float, hi: float) -> float:
    return min(max(x, lo), hi)


@dataclass
class ControllerConfig:
    p_min: float = 0.10
    p_max: float = 0.80
    p_init: float = 0.40
    round_every: int = 10        # K: optimizer steps between rounds
    candidates: int = 3          # C: probes per round
    microdev_n: int = 16         # m: micro-dev examples
    eta: float = 0.05            # controller learning rate
    beta: float = 0.05           # mean-anchoring weight
    tau_ent: float = 0.01        # constant exploration offset added to sigma
    delta_max: float = 0.10      # largest committed move per round
    sigma_floor: float = SIGMA_FLOOR

    def validate(self) -> "ControllerConfig":
        if not (0.0 <= self.p_min < self.p_max <= 1.0):
            raise UsageError(
                f"need 0 <= p_min < p_max <= 1, got [{self.p_min}, {self.p_max}]"
            )
        if not (self.p_min <= self.p_init <= self.p_max):
            raise UsageError(
                f"p_init {self.p_init} outside [{self.p_min}, {self.p_max}]"
            )
        if min(self.round_every, self.candidates, self.microdev_n) < 1:
            raise UsageError("round_every, candidates, microdev_n must be >= 1")
        if self.delta_max <= 0 or self.eta <= 0:
            raise UsageError("delta_max and eta must be positive")
        if self.beta < 0 or self.tau_ent < 0:
            raise UsageError("beta and tau_ent must be non-negative")
        return self


@dataclass
class PolicyState:
    mu: float
    sigma: float
    p_curr: float


def init_policy(cfg: ControllerConfig) -> PolicyState:
    """mu starts at p_init; sigma spans the range at (p_max - p_min)/6."""
    cfg.validate()
    return PolicyState(
        mu=cfg.p_init, sigma=(cfg.p_max - cfg.p_min) / 6.0, p_curr=cfg.p_init
    )


def sample_candidates(
    policy: PolicyState, cfg: ControllerConfig, rng: np.random.Generator
) -> list[tuple[float, float]]:
    """Draw C raw values z ~ N(mu, sigma^2); keep both z and clamped p."""
    zs = rng.normal(loc=policy.mu, scale=policy.sigma, size=cfg.candidates)
    return [(float(z), clamp(float(z), cfg.p_min, cfg.p_max)) for z in zs]


def reward_from_loss(loss: float) -> float:
    """Negative micro-dev loss; NaN poisons the round and must be caught."""
    if math.isnan(loss):
        raise RewardError("micro-dev loss is NaN")
    return -loss


def relative_reward(reward_candidate: float, reward_baseline: float) -> float:
    return reward_candidate - reward_baseline


def centered_advantages(rewards: list[float]) -> list[float]:
    mean = sum(rewards) / len(rewards)
    return [r - mean for r in rewards]


def score_gradients(
    samples: list[tuple[float, float]], mu: float, sigma: float
) -> tuple[float, float]:
    """Monte-Carlo score-function estimators over (z_i, A_i) pairs.

    g_mu = (1/C) sum A_i (z_i - mu) / sigma^2
    g_sigma = (1/C) sum A_i ((z_i - mu)^2 - sigma^2) / sigma^3
    """
    if sigma < SIGMA_FLOOR:
        raise UsageError(f"sigma {sigma} below floor {SIGMA_FLOOR}")
    c = len(samples)
    g_mu = sum(a * (z - mu) / sigma**2 for z, a in samples) / c
    g_sigma = sum(a * ((z - mu) ** 2 - sigma**2) / sigma**3 for z, a in samples) / c
    return g_mu, g_sigma


def policy_update(
    policy: PolicyState, g_mu: float, g_sigma: float, cfg: ControllerConfig
) -> PolicyState:
    """Gradient step with mean anchoring toward p_curr and a sigma offset.

    mu    <- clamp(mu + eta*g_mu - eta*beta*(mu - p_curr), p_min, p_max)
    sigma <- max(floor, sigma + eta*g_sigma + tau_ent)
    """
    mu = policy.mu + cfg.eta * g_mu - cfg.eta * cfg.beta * (policy.mu - policy.p_curr)
    mu = clamp(mu, cfg.p_min, cfg.p_max)
    sigma = max(cfg.sigma_floor, policy.sigma + cfg.eta * g_sigma + cfg.tau_ent)
    return replace(policy, mu=mu, sigma=sigma)


def commit_decision(
    candidates: list[tuple[float, float]], p_curr: float, cfg: ControllerConfig
) -> tuple[bool, float, int]:
    """(committed, p_new, best_index) for candidate (p_i, R_i) pairs.

    The best candidate wins only if its relative reward is >= 0; the move is
    clipped to delta_max and the result clamped back into the prune range.
    """
    if not candidates:
        raise UsageError("commit decision needs at least one candidate")
    best = max(range(len(candidates)), key=lambda i: candidates[i][1])
    p_best, r_best = candidates[best]
    if r_best < 0.0:
        return False, p_curr, best
    dp = clamp(p_best - p_curr, -cfg.delta_max, cfg.delta_max)
    return True, clamp(p_curr + dp, cfg.p_min, cfg.p_max), best


@dataclass
class CandidateOutcome:
    z: float
    p: float
    reward: float | None      # absolute micro-dev reward of the probe
    relative: float | None    # reward minus the round baseline

    def to_obj(self) -> dict:
        return {"z": self.z, "p": self.p, "reward": self.reward,
                "relative": self.relative}

    @classmethod
    def from_obj(cls, obj: dict) -> "CandidateOutcome":
        return cls(z=obj["z"], p=obj["p"], reward=obj["reward"],
                   relative=obj["relative"])


@dataclass
class ControllerRecord:
    round: int
    step: int
    p_curr_before: float
    baseline_reward: float | None
    candidates: list[CandidateOutcome] = field(default_factory=list)
    committed: bool = False
    failed: bool = False
    p_curr_after: float = 0.0
    mu_after: float = 0.0
    sigma_after: float = 0.0

    def to_obj(self) -> dict:
        return {
            "round": self.round,
            "step": self.step,
            "p_curr_before": self.p_curr_before,
            "baseline_reward": self.baseline_reward,
            "candidates": [c.to_obj() for c in self.candidates],
            "committed": self.committed,
            "failed": self.failed,
            "p_curr_after": self.p_curr_after,
            "mu_after": self.mu_after,
            "sigma_after": self.sigma_after,
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "ControllerRecord":
        return cls(
            round=obj["round"],
            step=obj["step"],
            p_curr_before=obj["p_curr_before"],
            baseline_reward=obj["baseline_reward"],
            candidates=[CandidateOutcome.from_obj(c) for c in obj["candidates"]],
            committed=obj["committed"],
            failed=obj["failed"],
            p_curr_after=obj["p_curr_after"],
            mu_after=obj["mu_after"],
            sigma_after=obj["sigma_after"],
        )


def controller_round(
    policy: PolicyState,
    cfg: ControllerConfig,
    rng: np.random.Generator,
    env,
    round_index: int,
    step: int,
) -> tuple[PolicyState, ControllerRecord]:
    """Run one full round against an environment.

    The environment supplies the model side of the protocol:
      baseline_reward() -> float   reward of the committed masked model
      candidate_reward(p) -> float probe p on a temporary copy, restore after
      commit(p_new)                rebuild mask at p_new, zero newly pruned
                                   coordinates, clear their optimizer state
      checksum() -> str            parameter fingerprint for the purity audit

    A NaN baseline fails the round outright (no update, no commit). A NaN
    candidate is dropped and the advantage mean renormalizes over survivors;
    if every candidate fails the round fails.
    """
    record = ControllerRecord(
        round=round_index, step=step, p_curr_before=policy.p_curr,
        baseline_reward=None, p_curr_after=policy.p_curr,
        mu_after=policy.mu, sigma_after=policy.sigma,
    )
    before = env.checksum()
    try:
        baseline = env.baseline_reward()
    except RewardError:
        baseline = float("nan")
    drawn = sample_candidates(policy, cfg, rng)
    if math.isnan(baseline):
        # still consume the candidate draws so the rng stream position is
        # independent of reward outcomes
        record.failed = True
        record.candidates = [CandidateOutcome(z, p, None, None) for z, p in drawn]
        _audit_purity(env, before)
        return policy, record

    record.baseline_reward = baseline
    outcomes = []
    for z, p in drawn:
        try:
            r = env.candidate_reward(p)
        except RewardError:
            r = float("nan")
        if math.isnan(r):
            outcomes.append(CandidateOutcome(z, p, None, None))
        else:
            outcomes.append(CandidateOutcome(z, p, r, relative_reward(r, baseline)))
    record.candidates = outcomes
    _audit_purity(env, before)

    alive = [c for c in outcomes if c.relative is not None]
    if not alive:
        record.failed = True
        return policy, record

    advantages = centered_advantages([c.relative for c in alive])
    g_mu, g_sigma = score_gradients(
        [(c.z, a) for c, a in zip(alive, advantages)], policy.mu, policy.sigma
    )
    new_policy = policy_update(policy, g_mu, g_sigma, cfg)

    committed, p_new, _best = commit_decision(
        [(c.p, c.relative) for c in alive], policy.p_curr, cfg
    )
    if committed:
        env.commit(p_new)
        new_policy.p_curr = p_new
    record.committed = committed
    record.p_curr_after = new_policy.p_curr
    record.mu_after = new_policy.mu
    record.sigma_after = new_policy.sigma
    return new_policy, record


def _audit_purity(env, checksum_before: str) -> None:
    after = env.checksum()
    if after != checksum_before:
        raise ProbePurityError(
            "probe left the trained parameters modified "
            f"({checksum_before[:12]} -> {after[:12]})"
        )


def select_p_star(records: list[ControllerRecord]) -> float:
    """Ratio with the highest implied micro-dev reward across all rounds.

    Every round contributes (p_curr, baseline) plus (p_i, baseline + R_i)
    per surviving candidate. Ties prefer the earliest round, then smaller p.
    """
    entries = []  # (implied_reward, round, p)
    for rec in records:
        if rec.baseline_reward is None:
            continue
        entries.append((rec.baseline_reward, rec.round, rec.p_curr_before))
        for c in rec.candidates:
            if c.relative is not None:
                entries.append((rec.baseline_reward + c.relative, rec.round, c.p))
    if not entries:
        raise UsageError("no usable rounds to select a ratio from")
    entries.sort(key=lambda e: (-e[0], e[1], e[2]))
    return entries[0][2]


def audit_records(records: list[ControllerRecord], cfg: ControllerConfig) -> list[str]:
    """Invariant violations across a round log; empty list means clean."""
    problems = []
    for rec in records:
        tag = f"round {rec.round}"
        if rec.sigma_after < cfg.sigma_floor - 1e-15:
            problems.append(f"{tag}: sigma {rec.sigma_after} below floor")
        if abs(rec.p_curr_after - rec.p_curr_before) > cfg.delta_max + 1e-12:
            problems.append(f"{tag}: committed move exceeds delta_max")
        if rec.baseline_reward is not None:
            rels = [c.relative for c in rec.candidates if c.relative is not None]
            for c in rec.candidates:
                if c.reward is not None and c.relative is not None:
                    if c.relative != c.reward - rec.baseline_reward:
                        problems.append(f"{tag}: relative reward inconsistent")
            if rec.committed:
                if not rels or max(rels) < 0.0:
                    problems.append(f"{tag}: commit without non-negative reward")
            if len(rels) >= 1:
                mean = sum(rels) / len(rels)
                if abs(sum(r - mean for r in rels)) > 1e-12:
                    problems.append(f"{tag}: advantages not centered")
        if rec.failed and rec.committed:
            problems.append(f"{tag}: failed round marked committed")
        if rec.failed and rec.p_curr_after != rec.p_curr_before:
            problems.append(f"{tag}: failed round moved p_curr")
    return problems


def write_round_log(path, records: list[ControllerRecord]) -> None:
    try:
        with open(path, "w") as f:
            for rec in records:
                f.write(canonical_json_line(rec.to_obj()))
    except OSError as exc:
        raise StorageError(f"cannot write round log {path}: {exc}") from exc


def append_round_log(path, record: ControllerRecord) -> None:
    try:
        with open(path, "a") as f:
            f.write(canonical_json_line(record.to_obj()))
    except OSError as exc:
        raise StorageError(f"cannot append round log {path}: {exc}") from exc


def read_round_log(path) -> list[ControllerRecord]:
    records = []
    try:
        with open(path) as f:
            for line in f:
                line = line.strip()
                if line:
                    records.append(ControllerRecord.from_obj(json.loads(line)))
    except OSError as exc:
        raise StorageError(f"cannot read round log {path}: {exc}") from exc
    except (json.JSONDecodeError, KeyError) as exc:
        raise StorageError(f"malformed round log {path}: {exc}") from exc
    return records


def write_round_csv(path, records: list[ControllerRecord]) -> None:
    """Per-round summary: the committed ratio trace used for rolling stats."""
    try:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(
                ["round", "step", "p_curr", "baseline_reward", "committed",
                 "mu", "sigma"]
            )
            for rec in records:
                base = "" if rec.baseline_reward is None else repr(rec.baseline_reward)
                w.writerow(
                    [rec.round, rec.step, repr(rec.p_curr_after), base,
                     int(rec.committed), repr(rec.mu_after), repr(rec.sigma_after)]
                )
    except OSError as exc:
        raise StorageError(f"cannot write round summary {path}: {exc}") from exc
