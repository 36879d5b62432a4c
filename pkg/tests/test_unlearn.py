import numpy as np
import pytest

from amun.attacks import AttackConfig, build_adversarial_set
from amun.data import AuditedDataset, LabeledDataset, SplitSpec, gen_blobs
from amun.models import (ModelSpec, ModelState, TrainConfig, accuracy,
                         fingerprint, init_params, predict, train)
from amun.unlearn import (SaliencyMask, UnlearnConfig, ablation_set,
                          assemble_finetune_set, continuous_unlearn, fine_tune,
                          salun_mask, unlearn)

ATTACK = AttackConfig(kind="pgd", steps=30, step_fraction=0.1, eps_init=0.01,
                      max_doublings=25, clamp_box=(0.0, 1.0))
TRAIN = TrainConfig(0.3, 80, 32, None, 0.0, seed=0)


@pytest.fixture(scope="module")
def instance():
    """Overfit MLP on 3-class blobs with a 10% forget split and its advset."""
    train_d, test_d, _ = gen_blobs(300, 4, 3, 0.22, seed=12)
    spec = ModelSpec("mlp", (4, 24, 3))
    model = train(spec, train_d, np.arange(300), TRAIN)
    rng = np.random.default_rng(3)
    forget = np.sort(rng.choice(300, size=30, replace=False))
    retain = np.setdiff1d(np.arange(300), forget)
    split = SplitSpec(retain, forget, np.arange(test_d.n), 0.1, 3)
    adv = build_adversarial_set(model, ATTACK, train_d, forget)
    return train_d, test_d, model, split, adv


# ---------------------------------------------------------------- assembling

def test_assemble_sizes_retain_access(instance):
    train_d, _, model, split, adv = instance
    cfg = UnlearnConfig("amun", has_retain_access=True)
    ds = assemble_finetune_set(train_d, split, adv, cfg)
    assert ds.n == 270 + 30 + 30
    cfg_large = UnlearnConfig("amun", has_retain_access=True,
                              large_forget_variant=True)
    assert assemble_finetune_set(train_d, split, adv, cfg_large).n == 270 + 30


def test_assemble_forget_only_large_is_exactly_the_advset(instance):
    train_d, _, model, split, adv = instance
    cfg = UnlearnConfig("amun", has_retain_access=False,
                        large_forget_variant=True)
    ds = assemble_finetune_set(train_d, split, adv, cfg)
    assert ds.n == 30
    by_id = adv.by_id()
    for i in range(ds.n):
        rec = by_id[int(-(ds.ids[i]) - 1)]
        assert np.array_equal(ds.features[i], rec.x_adv)
        assert ds.labels[i] == rec.y_adv


def test_assemble_adv_labels_never_true_labels(instance):
    train_d, _, model, split, adv = instance
    cfg = UnlearnConfig("amun", has_retain_access=False)
    ds = assemble_finetune_set(train_d, split, adv, cfg)
    originals = dict(zip(train_d.ids[split.forget_idx],
                         train_d.labels[split.forget_idx]))
    for i in range(ds.n):
        if ds.ids[i] < 0:
            assert ds.labels[i] != originals[int(-(ds.ids[i]) - 1)]


def test_assemble_fingerprint_mismatch(instance):
    train_d, _, model, split, adv = instance
    cfg = UnlearnConfig("amun")
    with pytest.raises(ValueError, match="different model"):
        assemble_finetune_set(train_d, split, adv, cfg,
                              expected_fingerprint="deadbeef00000000")
    ok = assemble_finetune_set(train_d, split, adv, cfg,
                               expected_fingerprint=adv.source_model_fingerprint)
    assert ok.n > 0
    transfer = UnlearnConfig("amun", allow_transfer=True)
    assemble_finetune_set(train_d, split, adv, transfer,
                          expected_fingerprint="deadbeef00000000")


# -------------------------------------------------------------- saliency mask

def test_salun_mask_top_magnitudes_by_sort_oracle():
    # craft a model whose forget gradient we can rank exactly
    data = LabeledDataset(np.array([[1.0, 0.0], [0.0, 1.0]]),
                          np.array([0, 1]), np.arange(2), 2)
    st = init_params(ModelSpec("logistic", (2, 2)), seed=0)
    mask = salun_mask(st, data, np.arange(2), 0.5)
    from amun.models import dataset_loss_and_grads
    _, grad, _ = dataset_loss_and_grads(st, data, np.arange(2))
    order = np.argsort(-np.abs(grad), kind="stable")
    expect = np.zeros(grad.size, dtype=bool)
    expect[order[:3]] = True
    assert np.array_equal(mask.bits, expect)
    assert mask.bits.sum() == round(0.5 * 6)


def test_salun_mask_tie_break_lower_index():
    # duplicate-feature samples create exactly tied gradient magnitudes
    data = LabeledDataset(np.array([[1.0, 1.0]]), np.array([0]), np.arange(1), 2)
    st = ModelState(ModelSpec("logistic", (2, 2)), np.zeros(6), 0)
    # gradient: dW = x outer (p - e_y) with p uniform: |g| equal for all 4 weights
    mask = salun_mask(st, data, np.arange(1), 0.5)
    assert mask.bits.sum() == 3
    assert np.array_equal(np.flatnonzero(mask.bits), [0, 1, 2])


def test_salun_mask_len_and_zero_grad_error():
    data = LabeledDataset(np.array([[1.0]]), np.array([0]), np.arange(1), 2)
    st = ModelState(ModelSpec("logistic", (1, 2)), np.array([500.0, -500.0, 0, 0]), 0)
    with pytest.raises(ValueError, match="zero"):
        salun_mask(st, data, np.arange(1), 0.5)


def test_salun_ratio_validation(instance):
    train_d, _, model, split, _ = instance
    with pytest.raises(ValueError):
        salun_mask(model, train_d, split.forget_idx, 0.05)


# ---------------------------------------------------------------- fine_tune

def test_fine_tune_all_false_mask_is_identity(instance):
    train_d, _, model, split, adv = instance
    cfg = UnlearnConfig("amun", epochs=3)
    ds = train_d.subset(split.forget_idx)
    mask = SaliencyMask(np.zeros(model.params.size, dtype=bool), 0.0)
    out = fine_tune(model, ds, cfg, mask=mask)
    assert np.array_equal(out.params, model.params)


def test_fine_tune_zero_epochs_identity(instance):
    train_d, _, model, split, _ = instance
    cfg = UnlearnConfig("amun", epochs=0)
    out = fine_tune(model, train_d.subset(split.forget_idx), cfg)
    assert np.array_equal(out.params, model.params)


def test_fine_tune_masked_params_bit_identical(instance):
    train_d, _, model, split, _ = instance
    cfg = UnlearnConfig("salun", epochs=4, learning_rate=0.05, salun_ratio=0.3)
    mask = salun_mask(model, train_d, split.forget_idx, 0.3)
    out = fine_tune(model, train_d.subset(split.forget_idx), cfg, mask=mask)
    frozen = ~mask.bits
    assert np.array_equal(out.params[frozen], model.params[frozen])
    assert not np.array_equal(out.params[mask.bits], model.params[mask.bits])


def test_fine_tune_own_data_moves_less_than_relabeled(instance):
    train_d, _, model, split, _ = instance
    cfg = UnlearnConfig("amun", epochs=3, learning_rate=0.01, seed=5)
    own = fine_tune(model, train_d.subset(split.retain_idx), cfg)
    flipped = train_d.subset(split.retain_idx)
    relabeled = LabeledDataset(flipped.features,
                               (flipped.labels + 1) % train_d.num_classes,
                               flipped.ids, train_d.num_classes)
    moved = fine_tune(model, relabeled, cfg)
    assert (np.linalg.norm(own.params - model.params)
            < np.linalg.norm(moved.params - model.params))


# ------------------------------------------------------------------ unlearn

def test_retrain_ignores_input_parameters(instance):
    train_d, _, model, split, _ = instance
    other = init_params(model.spec, seed=999)
    cfg = UnlearnConfig("retrain", seed=4)
    a = unlearn(model, train_d, split, None, cfg, TRAIN)
    b = unlearn(other, train_d, split, None, cfg, TRAIN)
    assert np.array_equal(a.params, b.params)


def test_retrain_requires_train_cfg(instance):
    train_d, _, model, split, _ = instance
    with pytest.raises(ValueError, match="TrainConfig"):
        unlearn(model, train_d, split, None, UnlearnConfig("retrain"))


def test_ga_tiny_lr_is_near_identity(instance):
    train_d, _, model, split, _ = instance
    cfg = UnlearnConfig("ga", epochs=1, learning_rate=1e-12)
    out = unlearn(model, train_d, split, None, cfg)
    assert np.allclose(out.params, model.params, atol=1e-9)


def test_ga_moves_uphill_on_forget_loss(instance):
    train_d, _, model, split, _ = instance
    from amun.models import dataset_loss_and_grads
    before = dataset_loss_and_grads(model, train_d, split.forget_idx,
                                    want_params=False)[0]
    cfg = UnlearnConfig("ga", epochs=2, learning_rate=0.01)
    out = unlearn(model, train_d, split, None, cfg)
    after = dataset_loss_and_grads(out, train_d, split.forget_idx,
                                   want_params=False)[0]
    assert after > before


def test_amun_directionality_on_fixed_instance(instance):
    train_d, _, model, split, adv = instance
    cfg = UnlearnConfig("amun", has_retain_access=True, epochs=10,
                        learning_rate=0.02, seed=1)
    out = unlearn(model, train_d, split, adv, cfg)
    before_f = accuracy(model, train_d, split.forget_idx)
    after_f = accuracy(out, train_d, split.forget_idx)
    before_r = accuracy(model, train_d, split.retain_idx)
    after_r = accuracy(out, train_d, split.retain_idx)
    assert after_f <= before_f
    assert after_r >= before_r - 0.02


def test_rl_labels_seeded_and_never_true(instance):
    train_d, _, model, split, _ = instance
    cfg = UnlearnConfig("rl", epochs=1, learning_rate=1e-6, seed=8)
    a = unlearn(model, train_d, split, None, cfg)
    b = unlearn(model, train_d, split, None, cfg)
    assert np.array_equal(a.params, b.params)
    # the label law itself
    from amun.unlearn import _random_wrong_labels
    y = train_d.labels[split.forget_idx]
    rng = np.random.default_rng(8)
    labels = _random_wrong_labels(y, 3, rng)
    assert np.all(labels != y)
    assert set(np.unique(labels)) <= {0, 1, 2}
    # uniform over the two admissible labels: both appear
    big = _random_wrong_labels(np.zeros(2000, dtype=np.int64), 3,
                               np.random.default_rng(0))
    frac1 = np.mean(big == 1)
    assert 0.45 < frac1 < 0.55


def test_bs_labels_match_manual_fgsm_step(instance):
    train_d, _, model, split, _ = instance
    from amun.models import loss_and_grads
    Xf, yf = train_d.rows(split.forget_idx)
    eps = 0.05
    _, _, gx = loss_and_grads(model, Xf, yf, want_params=False, want_inputs=True)
    manual = predict(model, Xf + eps * np.sign(gx))
    cfg = UnlearnConfig("bs", epochs=1, learning_rate=1e-9, seed=0, bs_eps=eps)
    out = unlearn(model, train_d, split, None, cfg)
    assert out is not None  # labels checked via the helper below
    from amun.unlearn import _fgsm_labels
    assert np.array_equal(_fgsm_labels(model, Xf, yf, eps), manual)


def test_l1_sparse_shrinks_weight_norm_vs_ft(instance):
    train_d, _, model, split, _ = instance
    base = UnlearnConfig("ft", epochs=3, learning_rate=0.01, seed=2)
    ft = unlearn(model, train_d, split, None, base)
    l1 = UnlearnConfig("l1_sparse", epochs=3, learning_rate=0.01, seed=2,
                       l1_lambda=0.01)
    sparse = unlearn(model, train_d, split, None, l1)
    assert np.abs(sparse.params).sum() < np.abs(ft.params).sum()


def test_access_rules_enforced(instance):
    train_d, _, model, split, adv = instance
    with pytest.raises(ValueError, match="retain access"):
        unlearn(model, train_d, split, None,
                UnlearnConfig("ft", has_retain_access=False))
    with pytest.raises(ValueError, match="adversarial set"):
        unlearn(model, train_d, split, None, UnlearnConfig("amun"))
    with pytest.raises(ValueError):
        UnlearnConfig("ft", salun_ratio=0.5)
    with pytest.raises(ValueError):
        UnlearnConfig("rl", l1_lambda=0.1)


def test_forget_only_never_reads_retain_rows(instance):
    train_d, _, model, split, adv = instance
    audited = AuditedDataset(train_d)
    cfg = UnlearnConfig("amun", has_retain_access=False, epochs=2,
                        learning_rate=0.01)
    unlearn(model, audited, split, adv, cfg)
    assert not (audited.read_rows & set(int(i) for i in split.retain_idx))
    # with retain access the same call does read retain rows
    audited2 = AuditedDataset(train_d)
    cfg2 = UnlearnConfig("amun", has_retain_access=True, epochs=1,
                         learning_rate=0.01)
    unlearn(model, audited2, split, adv, cfg2)
    assert audited2.read_rows & set(int(i) for i in split.retain_idx)


def test_amun_salun_freezes_unmasked(instance):
    train_d, _, model, split, adv = instance
    cfg = UnlearnConfig("amun_salun", has_retain_access=False, epochs=3,
                        learning_rate=0.02, salun_ratio=0.4, seed=0)
    out = unlearn(model, train_d, split, adv, cfg)
    mask = salun_mask(model, train_d, split.forget_idx, 0.4)
    assert np.array_equal(out.params[~mask.bits], model.params[~mask.bits])


# ------------------------------------------------------------ ablation sets

def test_ablation_advl_is_originals_with_adv_labels(instance):
    train_d, _, model, split, adv = instance
    ds = ablation_set("AdvL", train_d, split.forget_idx, adv, seed=0)
    Xf, _ = train_d.rows(split.forget_idx)
    assert np.array_equal(ds.features, Xf)
    by_id = adv.by_id()
    for i, sid in enumerate(ds.ids):
        assert ds.labels[i] == by_id[int(sid)].y_adv
    assert ds.n == split.forget_idx.size


def test_ablation_a_rs_radius_exact(instance):
    train_d, _, model, split, adv = instance
    ds = ablation_set("A_RS", train_d, split.forget_idx, adv, seed=1)
    Xf, _ = train_d.rows(split.forget_idx)
    by_id = adv.by_id()
    for i, sid in enumerate(ds.ids):
        r = np.linalg.norm(ds.features[i] - Xf[i])
        assert abs(r - by_id[int(sid)].delta) < 1e-9
    # seeded determinism
    again = ablation_set("A_RS", train_d, split.forget_idx, adv, seed=1)
    assert np.array_equal(ds.features, again.features)


def test_ablation_rl_exclusion_forced_label(instance):
    train_d, _, model, split, adv = instance
    ds = ablation_set("RL", train_d, split.forget_idx, adv, seed=2)
    by_id = adv.by_id()
    y_true = dict(zip(train_d.ids[split.forget_idx],
                      train_d.labels[split.forget_idx]))
    for i, sid in enumerate(ds.ids):
        rec = by_id[int(sid)]
        assert ds.labels[i] != rec.y_adv
        assert ds.labels[i] != y_true[int(sid)]
        # 3 classes: exclusion leaves exactly one choice
        only = ({0, 1, 2} - {rec.y_adv, int(y_true[int(sid)])}).pop()
        assert ds.labels[i] == only


def test_ablation_rl_binary_rejected():
    data, _, _ = gen_blobs(40, 2, 2, 0.05, seed=0)
    spec = ModelSpec("logistic", (2, 2))
    model = train(spec, data, np.arange(40), TrainConfig(0.5, 60, 16, seed=1))
    adv = build_adversarial_set(model, ATTACK, data, np.arange(5))
    with pytest.raises(ValueError, match="no admissible"):
        ablation_set("RL", data, np.arange(5), adv, seed=0)


def test_ablation_a_rl_uses_adversarial_points(instance):
    train_d, _, model, split, adv = instance
    ds = ablation_set("A_RL", train_d, split.forget_idx, adv, seed=3)
    by_id = adv.by_id()
    for i, sid in enumerate(ds.ids):
        assert np.array_equal(ds.features[i], by_id[int(sid)].x_adv)


# ------------------------------------------------------- continuous unlearn

def test_continuous_single_request_equals_single_shot(instance):
    train_d, test_d, model, split, adv = instance
    cfg = UnlearnConfig("amun", has_retain_access=True, epochs=2,
                        learning_rate=0.02, seed=0)
    steps = continuous_unlearn(model, train_d, test_d, [split.forget_idx],
                               cfg, ATTACK, "adaptive")
    single = unlearn(model, train_d, split, adv, cfg)
    assert np.array_equal(steps[0][0].params, single.params)


def test_continuous_overlapping_requests_rejected(instance):
    train_d, test_d, model, _, _ = instance
    cfg = UnlearnConfig("amun", epochs=1)
    with pytest.raises(ValueError, match="overlap"):
        continuous_unlearn(model, train_d, test_d,
                           [np.array([1, 2]), np.array([2, 3])],
                           cfg, ATTACK, "adaptive")


def test_continuous_adaptive_rebuilds_on_current_model(instance):
    train_d, test_d, model, _, _ = instance
    cfg = UnlearnConfig("amun", has_retain_access=True, epochs=3,
                        learning_rate=0.05, seed=0)
    reqs = [np.arange(0, 10), np.arange(10, 20)]
    # adaptive second step attacks a model that differs from the initial one,
    # so its records must differ from the precomputed run's second advset
    ad = continuous_unlearn(model, train_d, test_d, reqs, cfg, ATTACK, "adaptive")
    pre = continuous_unlearn(model, train_d, test_d, reqs, cfg, ATTACK,
                             "precomputed")
    assert not np.array_equal(ad[1][0].params, pre[1][0].params)
    step1_model = ad[0][0]
    assert fingerprint(step1_model) != fingerprint(model)


def test_continuous_mode_validated(instance):
    train_d, test_d, model, _, _ = instance
    with pytest.raises(ValueError, match="mode"):
        continuous_unlearn(model, train_d, test_d, [np.arange(3)],
                           UnlearnConfig("amun"), ATTACK, "sometimes")
