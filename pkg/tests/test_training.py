"""Training harness: phase-1 fitting, the probe protocol, committed-mask
training, and the end-to-end three-phase pipeline."""

import numpy as np
import pytest

from policyprune.adapters import merge_adapter_sets
from policyprune.controller import ControllerConfig, audit_records, reward_from_loss
from policyprune.errors import TrainingDivergedError, UsageError
from policyprune.masking import build_mask, estimate_scale, mask_apply, mask_apply_inplace
from policyprune.optim import init_optimizer, optimizer_step_and_reset
from policyprune.toytask import (
    ToyTaskConfig,
    gen_toy_data,
    loss_and_gradients,
    model_forward,
    mse_loss,
)
from policyprune.training import (
    LoraConfig,
    MaskedTrainingEnv,
    TrainConfig,
    factors_to_adapters,
    final_prune_finetune,
    init_adapter_factors,
    microdev_loss,
    pipeline_rngs,
    run_pipeline,
    sparsity_policy_learning,
    steps_per_epoch,
    total_steps,
    train_adapter,
)

SMALL = ToyTaskConfig(
    d_in=8,
    d_out=6,
    teacher_rank=2,
    source_train_n=48,
    target_train_n=32,
    dev_n=16,
    microdev_n=8,
    test_n=16,
)
LORA4 = LoraConfig(rank=4)


def _rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


def _backbone_only(backbone, x):
    return sum(x @ backbone.site(sid).T for sid in backbone.site_ids())


def _full_loss(backbone, merged, split):
    return mse_loss(model_forward(backbone, merged, split.x), split.y)


def test_step_budget_arithmetic():
    assert steps_per_epoch(288, 1) == 288
    assert steps_per_epoch(5, 2) == 3
    assert total_steps(TrainConfig(), 288) == 2880
    assert total_steps(TrainConfig(batch_size=7), 288) == 420


def test_zero_b_init_leaves_the_model_at_the_backbone():
    data = gen_toy_data(SMALL, 7)
    merged = init_adapter_factors(data.backbone, LORA4, _rng(0))
    x = data.target_train.x
    np.testing.assert_array_equal(
        model_forward(data.backbone, merged, x), _backbone_only(data.backbone, x)
    )
    # A carries the alpha/rank scale folded in: entries ~ scale * N(0, 1/d_in)
    pooled = np.concatenate([s.a.ravel() for s in merged.sites])
    expected = LORA4.scale / np.sqrt(SMALL.d_in)
    assert 0.5 * expected < pooled.std() < 1.5 * expected
    assert all(not s.b.any() for s in merged.sites)


def test_factor_unfolding_round_trips_the_forward_pass():
    data = gen_toy_data(SMALL, 7)
    merged = init_adapter_factors(data.backbone, LORA4, _rng(3))
    for s in merged.sites:  # give B content so the adapter term is non-zero
        s.b[:] = _rng(4).normal(size=s.b.shape)
    adapters = factors_to_adapters(merged, LORA4)
    assert all(ad.rank == LORA4.rank and ad.alpha == LORA4.alpha for ad in adapters)
    again = merge_adapter_sets([adapters], data.backbone.site_ids())
    x = data.dev.x
    np.testing.assert_allclose(
        model_forward(data.backbone, again, x),
        model_forward(data.backbone, merged, x),
        rtol=0,
        atol=1e-12,
    )


def test_factor_unfolding_rejects_stacked_checkpoints():
    data = gen_toy_data(SMALL, 7)
    one = init_adapter_factors(data.backbone, LORA4, _rng(5))
    stacked = merge_adapter_sets(
        [factors_to_adapters(one, LORA4), factors_to_adapters(one, LORA4)],
        data.backbone.site_ids(),
    )
    with pytest.raises(UsageError):
        factors_to_adapters(stacked, LORA4)


def test_adapter_training_descends():
    data = gen_toy_data(SMALL, 7)
    res = train_adapter(
        data.backbone, data.target_train, LORA4, TrainConfig(epochs=3), _rng(1)
    )
    merged = merge_adapter_sets([res.adapters], data.backbone.site_ids())
    before = mse_loss(
        _backbone_only(data.backbone, data.target_train.x), data.target_train.y
    )
    after = _full_loss(data.backbone, merged, data.target_train)
    assert len(res.step_losses) == total_steps(TrainConfig(epochs=3), SMALL.target_train_n)
    assert after < 0.95 * before


def test_adapter_training_reaches_a_realizable_teacher():
    clean = ToyTaskConfig(
        d_in=8,
        d_out=6,
        teacher_rank=2,
        source_train_n=48,
        target_train_n=64,
        dev_n=16,
        microdev_n=8,
        test_n=16,
        noise_std=0.0,
    )
    data = gen_toy_data(clean, 3)
    generous = TrainConfig(epochs=30, learning_rate=3e-3, weight_decay=0.0)
    res = train_adapter(data.backbone, data.target_train, LORA4, generous, _rng(2))
    merged = merge_adapter_sets([res.adapters], data.backbone.site_ids())
    assert _full_loss(data.backbone, merged, data.target_train) < 1e-3


def test_non_finite_loss_raises_diverged():
    data = gen_toy_data(SMALL, 7)
    reckless = TrainConfig(epochs=50, learning_rate=1e6)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(TrainingDivergedError):
            train_adapter(data.backbone, data.target_train, LORA4, reckless, _rng(3))


def test_microdev_loss_matches_direct_evaluation_and_guards_empty():
    data = gen_toy_data(SMALL, 7)
    res = train_adapter(
        data.backbone, data.target_train, LORA4, TrainConfig(epochs=1), _rng(4)
    )
    merged = merge_adapter_sets([res.adapters], data.backbone.site_ids())
    direct = mse_loss(
        model_forward(data.backbone, merged, data.microdev.x), data.microdev.y
    )
    assert microdev_loss(data.backbone, merged, data.microdev) == direct
    with pytest.raises(UsageError):
        microdev_loss(data.backbone, merged, data.microdev.head(0))


def _probe_env(seed=11, p_init=0.40):
    data = gen_toy_data(SMALL, seed)
    cfg = TrainConfig(epochs=2)
    src = train_adapter(data.backbone, data.source_train, LORA4, cfg, _rng(20))
    tgt = train_adapter(data.backbone, data.target_train, LORA4, cfg, _rng(21))
    merged = merge_adapter_sets(
        [src.adapters, tgt.adapters], data.backbone.site_ids()
    )
    scale = estimate_scale(data.microdev.x)
    mask = build_mask(merged, p_init, scale)
    work = merged.copy()
    mask_apply_inplace(work, mask)
    opt = init_optimizer(work, cfg.optimizer_config())
    env = MaskedTrainingEnv(
        backbone=data.backbone,
        merged=work,
        microdev=data.microdev,
        scale=scale,
        opt_state=opt,
        mask=mask,
    )
    return data, env


def _reference_candidate_reward(data, env, p):
    trial = build_mask(env.merged, p, env.scale)
    probed = mask_apply(env.merged, trial)
    return reward_from_loss(microdev_loss(data.backbone, probed, data.microdev))


def test_candidate_probe_matches_reference_mask_and_evaluate():
    data, env = _probe_env()
    for p in (0.15, 0.45, 0.70):
        assert env.candidate_reward(p) == pytest.approx(
            _reference_candidate_reward(data, env, p), abs=1e-12
        )
    # still exact after a commit and further training perturb the weights
    env.commit(0.55)
    loss, grads = loss_and_gradients(
        data.backbone, env.merged, data.target_train.x[:4], data.target_train.y[:4]
    )
    optimizer_step_and_reset(env.merged, grads, env.opt_state, mask=env.mask)
    env.begin_round()
    for p in (0.2, 0.6):
        assert env.candidate_reward(p) == pytest.approx(
            _reference_candidate_reward(data, env, p), abs=1e-12
        )


def test_baseline_probe_reads_the_live_masked_parameters():
    data, env = _probe_env()
    expected = reward_from_loss(
        microdev_loss(data.backbone, env.merged, data.microdev)
    )
    assert env.baseline_reward() == pytest.approx(expected, abs=1e-12)


def test_probes_never_touch_the_parameters():
    _, env = _probe_env()
    before = env.checksum()
    env.baseline_reward()
    for p in (0.12, 0.40, 0.78):
        env.candidate_reward(p)
    assert env.checksum() == before


def test_commit_zeroes_new_coordinates_and_their_moments():
    _, env = _probe_env(p_init=0.20)
    old_bits = {tid: bits.copy() for tid, bits in env.mask.per_tensor.items()}
    env.commit(0.60)
    assert env.mask.ratio == 0.60
    assert env.commits == 1
    saw_new = False
    for tid, _sid, _fac, arr in env.merged.tensors():
        newly = (old_bits[tid] == 1) & (env.mask.per_tensor[tid] == 0)
        if newly.any():
            saw_new = True
            flat = arr.reshape(-1)
            assert not flat[newly].any()
            assert not env.opt_state.first_moment[tid].reshape(-1)[newly].any()
            assert not env.opt_state.second_moment[tid].reshape(-1)[newly].any()
    assert saw_new


def test_policy_learning_invariants_and_round_bookkeeping():
    data = gen_toy_data(SMALL, 13)
    cfg = TrainConfig(epochs=5)
    src = train_adapter(data.backbone, data.source_train, LORA4, cfg, _rng(30))
    tgt = train_adapter(data.backbone, data.target_train, LORA4, cfg, _rng(31))
    merged_init = merge_adapter_sets(
        [src.adapters, tgt.adapters], data.backbone.site_ids()
    )
    frozen = merged_init.checksum()
    ccfg = ControllerConfig()
    pol = sparsity_policy_learning(
        data.backbone,
        merged_init,
        data.target_train,
        data.microdev,
        ccfg,
        cfg,
        _rng(32),
        _rng(33),
    )
    assert merged_init.checksum() == frozen  # phase input never mutated
    steps = total_steps(cfg, SMALL.target_train_n)
    assert pol.steps_run == steps
    assert len(pol.records) == steps // ccfg.round_every
    assert audit_records(pol.records, ccfg) == []
    assert ccfg.p_min <= pol.p_star <= ccfg.p_max
    # the committed mask is enforced at the end of the phase
    for tid, _sid, _fac, arr in pol.merged.tensors():
        pruned = pol.mask.per_tensor[tid] == 0
        assert not arr.reshape(-1)[pruned].any()


def test_policy_learning_requires_at_least_one_round():
    data = gen_toy_data(SMALL, 13)
    merged = init_adapter_factors(data.backbone, LORA4, _rng(40))
    with pytest.raises(UsageError):
        sparsity_policy_learning(
            data.backbone,
            merged,
            data.target_train.head(5),  # 5 steps < one 10-step round
            data.microdev,
            ControllerConfig(),
            TrainConfig(epochs=1),
            _rng(41),
            _rng(42),
        )


def test_final_run_keeps_one_fixed_mask_and_improves_dev():
    data, env = _probe_env(seed=17)
    merged_init = env.merged.copy()
    frozen = merged_init.checksum()
    cfg = TrainConfig(epochs=6)
    fin = final_prune_finetune(
        data.backbone,
        merged_init,
        0.30,
        data.target_train,
        data.dev,
        env.scale,
        cfg,
        _rng(50),
        test=data.test,
    )
    assert merged_init.checksum() == frozen
    assert fin.mask.ratio == 0.30
    for tid, _sid, _fac, arr in fin.merged.tensors():
        pruned = fin.mask.per_tensor[tid] == 0
        assert not arr.reshape(-1)[pruned].any()
    assert fin.dev_history[0] == pytest.approx(
        microdev_loss(
            data.backbone, mask_apply(merged_init, fin.mask), data.dev
        ),
        abs=1e-12,
    )
    assert fin.dev_loss < fin.dev_history[0]
    assert fin.dev_loss == fin.dev_history[-1]
    assert fin.test_loss is not None
    assert not fin.stopped_early
    assert fin.steps_run == total_steps(cfg, SMALL.target_train_n)


def test_final_run_rejects_ratios_outside_the_prune_range():
    data, env = _probe_env(seed=17)
    for bad in (0.05, 0.85):
        with pytest.raises(UsageError):
            final_prune_finetune(
                data.backbone,
                env.merged,
                bad,
                data.target_train,
                data.dev,
                env.scale,
                TrainConfig(epochs=1),
                _rng(51),
            )


def test_final_run_stops_early_on_a_dev_plateau():
    clean = ToyTaskConfig(
        d_in=8,
        d_out=6,
        teacher_rank=2,
        source_train_n=48,
        target_train_n=64,
        dev_n=16,
        microdev_n=8,
        test_n=16,
        noise_std=0.0,
    )
    data = gen_toy_data(clean, 3)
    res = train_adapter(
        data.backbone,
        data.target_train,
        LORA4,
        TrainConfig(epochs=30, learning_rate=3e-3, weight_decay=0.0),
        _rng(2),
    )
    merged = merge_adapter_sets(
        [res.adapters, res.adapters], data.backbone.site_ids()
    )
    patient = TrainConfig(
        epochs=50, learning_rate=3e-3, weight_decay=0.0, early_stop_patience=3
    )
    fin = final_prune_finetune(
        data.backbone,
        merged,
        0.30,
        data.target_train,
        data.dev,
        estimate_scale(data.microdev.x),
        patient,
        _rng(4),
    )
    assert fin.stopped_early
    assert fin.steps_run < total_steps(patient, clean.target_train_n)
    assert fin.steps_run % steps_per_epoch(clean.target_train_n, patient.batch_size) == 0


def test_rng_streams_are_distinct_and_reproducible():
    first = pipeline_rngs(42)
    again = pipeline_rngs(42)
    draws = {name: g.random() for name, g in first.items()}
    assert len(set(draws.values())) == len(draws)  # stages never share a stream
    for name, g in again.items():
        assert g.random() == draws[name]


def test_pipeline_is_a_pure_function_of_config_and_seed():
    task = ToyTaskConfig(source_train_n=96, target_train_n=96, dev_n=32, test_n=32)
    lora, tcfg, ccfg = LoraConfig(), TrainConfig(), ControllerConfig()
    a = run_pipeline(task, lora, tcfg, ccfg, 42)
    b = run_pipeline(task, lora, tcfg, ccfg, 42)
    assert a.final.merged.checksum() == b.final.merged.checksum()
    assert a.merged_init.checksum() == b.merged_init.checksum()
    assert a.p_star == b.p_star
    assert a.final.dev_loss == b.final.dev_loss
    assert [r.p_curr_after for r in a.policy.records] == [
        r.p_curr_after for r in b.policy.records
    ]
    c = run_pipeline(task, lora, tcfg, ccfg, 43)
    assert c.final.merged.checksum() != a.final.merged.checksum()


def test_pipeline_keeps_the_merge_checkpoint_pristine():
    task = ToyTaskConfig(source_train_n=96, target_train_n=96, dev_n=32, test_n=32)
    art = run_pipeline(task, LoraConfig(), TrainConfig(), ControllerConfig(), 7)
    rebuilt = merge_adapter_sets(
        [art.source_adapters, art.target_adapters], art.data.backbone.site_ids()
    )
    assert rebuilt.checksum() == art.merged_init.checksum()
    assert art.policy.steps_run == total_steps(TrainConfig(), task.target_train_n)
    assert art.final.p_star == art.p_star
