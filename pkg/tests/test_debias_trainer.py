import numpy as np
import pytest
from pydantic import ValidationError

from msidebias.core.debias_trainer import (TrainerState, TrainHistory, adversarial_step,
                                           audit_biases, audit_feature_matrix, composite_weights,
                                           fold_indices, make_batches, predict_tiles, run_cross_validation,
                                           split_folds, tile_mask, train_baseline, train_bias_ablated)
from msidebias.core.errors import EmptyInputError, StratificationError, TrainingError
from msidebias.core.neuralcore import corr_loss_grad, forward_features, forward_head, init_bundle
from msidebias.db.artifacts import bundle_hash, read_json
from msidebias.models.models import Batch, Cohort, TileRecord
from msidebias.schemas.schemas import Amplitudes, CohortSpec, ProjectSpec, TrainConfig
from msidebias.services.clinmetrics import confusion
from msidebias.services.synthcohort import generate_cohort
from tests.conftest import small_spec, small_train

BALANCED = [ProjectSpec(project_id="A", pi_mss=0.5, pi_msi=0.5),
            ProjectSpec(project_id="B", pi_mss=0.5, pi_msi=0.5)]


def tiny_cohort(labels):
    """One tile per patient with the given class labels"""
    tiles = [TileRecord(f"t{i}", f"P{i:03d}", "S0", "A-G00", "A", label, "TUM", "x40",
                        np.zeros(2, dtype=np.float32)) for i, label in enumerate(labels)]
    return Cohort(None, tiles)


def toy_batch(labels, seed=0):
    rng = np.random.default_rng(seed)
    n = len(labels)
    codes = np.arange(n) % 2
    X = rng.normal(size=(n, 4))
    X[:, 0] += 2.0 * codes
    return Batch(X, np.asarray(labels, dtype=np.int64), {"project": codes}, [f"t{i}" for i in range(n)])


def toy_bundle():
    return init_bundle(4, [6], 5, [4], {"project": ["A", "B"]}, 11)


def params_bytes(mlp):
    return b"".join(p.tobytes() for p in mlp.parameters())


# Folds

def test_folds_stratify_patients():
    plan = split_folds(tiny_cohort(["MSS"] * 90 + ["MSI-H"] * 10), 5, seed=0)
    assert len(plan.folds) == 5
    seen = []
    for fold in plan.folds:
        assert len(fold.val_patients) == 20
        assert sum(int(p[1:]) >= 90 for p in fold.val_patients) == 2
        assert not set(fold.train_patients) & set(fold.val_patients)
        seen += fold.val_patients
    assert sorted(seen) == [f"P{i:03d}" for i in range(100)]


def test_folds_small_cohort():
    plan = split_folds(tiny_cohort(["MSS", "MSI-H"] * 5), 5, seed=1)
    assert [len(f.val_patients) for f in plan.folds] == [2] * 5
    assert plan.to_json()[0]["fold"] == 0


def test_folds_need_enough_patients_per_class():
    with pytest.raises(StratificationError):
        split_folds(tiny_cohort(["MSS"] * 20 + ["MSI-H"] * 3), 5, seed=0)


def test_fold_indices_follow_patients(cohort):
    plan = split_folds(cohort, 2, seed=0)
    train_idx, val_idx = fold_indices(cohort, plan.folds[0])
    assert train_idx.size + val_idx.size == len(cohort)
    train_patients = {cohort.tiles[i].patient_id for i in train_idx}
    assert train_patients == set(plan.folds[0].train_patients)


# Sampling

def test_composite_weights():
    tiles = tiny_cohort(["MSS", "MSS", "MSI-H", "MSI-H"]).tiles
    np.testing.assert_allclose(composite_weights(tiles), [0.25] * 4)
    tiles = tiny_cohort(["MSS", "MSS", "MSI-H"]).tiles
    w = composite_weights(tiles)
    assert w[:2].sum() == pytest.approx(0.5)
    assert w[2] == pytest.approx(0.5)
    with pytest.raises(EmptyInputError):
        composite_weights([])


def test_composite_weights_balance_classes_in_draws():
    cohort = tiny_cohort(["MSS"] * 9 + ["MSI-H"])
    w = composite_weights(cohort.tiles)
    draws = np.concatenate(list(make_batches(cohort.tiles, w, 100, seed=2, n_batches=100)))
    msi_share = np.mean(cohort.labels[draws] == 1)
    assert msi_share == pytest.approx(0.5, abs=0.02)


def test_composite_weights_are_uniform_over_patients_within_class():
    # 9 MSS patients with 1..9 tiles each and one MSI-H patient with 5 tiles
    tiles = [TileRecord(f"t{p}_{k}", f"P{p}", "S0", "A-G00", "A", "MSS", "TUM", "x40", np.zeros(2))
             for p in range(9) for k in range(p + 1)]
    tiles += [TileRecord(f"t9_{k}", "P9", "S0", "A-G00", "A", "MSI-H", "TUM", "x40", np.zeros(2)) for k in range(5)]
    w = composite_weights(tiles)
    draws = np.concatenate(list(make_batches(tiles, w, 1000, seed=8, n_batches=100)))
    n = draws.size
    patient = np.array([int(tiles[i].patient_id[1:]) for i in draws])
    expected = np.r_[np.full(9, 0.5 / 9), 0.5]
    counts = np.bincount(patient, minlength=10)
    sigma = np.sqrt(n * expected * (1 - expected))
    assert np.all(np.abs(counts - n * expected) < 3 * sigma)
    assert np.mean(patient == 9) == pytest.approx(0.5, abs=0.02)


def test_make_batches():
    tiles = list(range(10))
    uniform = np.full(10, 0.1)
    batches = list(make_batches(tiles, uniform, 4, seed=3))
    assert len(batches) == 3
    assert all(b.shape == (4,) for b in batches)
    again = list(make_batches(tiles, uniform, 4, seed=3))
    assert all(np.array_equal(a, b) for a, b in zip(batches, again))

    draws = np.concatenate(list(make_batches(tiles, uniform, 1000, seed=4, n_batches=100)))
    counts = np.bincount(draws, minlength=10)
    sigma = np.sqrt(100_000 * 0.1 * 0.9)
    assert np.all(np.abs(counts - 10_000) < 3 * sigma)

    one_hot_weights = np.eye(10)[7]
    assert np.all(next(make_batches(tiles, one_hot_weights, 8, seed=5)) == 7)


# One adversarial iteration

def test_bias_phase_only_moves_be_heads():
    batch = toy_batch([0] * 12)
    bundle = toy_bundle()
    fe, msi, be = (params_bytes(m) for m in (bundle.fe, bundle.msi_head, bundle.head("project")))
    config = small_train(lr_task=0.0, lr_be=0.01, **{"lambda": 0.0})
    adversarial_step(batch, bundle, config, TrainerState.create(config, bundle.bias_names))
    assert params_bytes(bundle.fe) == fe
    assert params_bytes(bundle.msi_head) == msi
    assert params_bytes(bundle.head("project")) != be


def test_adversarial_phase_only_moves_feature_extractor():
    batch = toy_batch([0] * 12)
    bundle = toy_bundle()
    fe, msi, be = (params_bytes(m) for m in (bundle.fe, bundle.msi_head, bundle.head("project")))
    config = small_train(lr_task=0.0, lr_be=0.0, lr_adv=0.01)
    adversarial_step(batch, bundle, config, TrainerState.create(config, bundle.bias_names))
    assert params_bytes(bundle.fe) != fe
    assert params_bytes(bundle.msi_head) == msi
    assert params_bytes(bundle.head("project")) == be


def test_batch_without_conditioning_rows_skips_bias_phases():
    batch = toy_batch([1] * 8)
    bundle = toy_bundle()
    be = params_bytes(bundle.head("project"))
    config = small_train()
    step = adversarial_step(batch, bundle, config, TrainerState.create(config, bundle.bias_names))
    assert step.skipped == ["project"]
    assert step.loss_be["project"] is None
    assert params_bytes(bundle.head("project")) == be


def test_step_reports_features_from_after_the_task_phase():
    batch = toy_batch([0] * 12)
    bundle = toy_bundle()
    before, _ = forward_features(bundle.fe, batch.inputs)
    config = small_train(lr_task=0.0, lr_be=0.01, lr_adv=0.05)
    step = adversarial_step(batch, bundle, config, TrainerState.create(config, bundle.bias_names))
    after, _ = forward_features(bundle.fe, batch.inputs)
    np.testing.assert_array_equal(step.features, before)
    assert not np.allclose(after, before)


def test_adversarial_step_reduces_bias_correlation():
    batch = toy_batch([0] * 16, seed=6)
    bundle = toy_bundle()
    target = np.eye(2)[batch.bias_values["project"]]

    def loss():
        F, _ = forward_features(bundle.fe, batch.inputs)
        return corr_loss_grad(target, forward_head(bundle.head("project"), F)[0])[0]

    before = loss()
    config = small_train(lr_task=0.0, lr_be=0.0, lr_adv=1e-3, optimizer="sgd")
    adversarial_step(batch, bundle, config, TrainerState.create(config, bundle.bias_names))
    # the loss is minus the mean squared correlation
    assert loss() > before


def test_history_rejects_non_increasing_iterations():
    history = TrainHistory(["project"])
    history.record({"iter": 3, "epoch": 0})
    with pytest.raises(TrainingError):
        history.record({"iter": 3, "epoch": 0})
    assert history.columns() == ["iter", "loss_msi", "loss_be_project", "dc_task", "dc_project",
                                 "epoch", "skipped"]


# Training regimes

def first_fold(cohort, config):
    return split_folds(cohort, config.folds, config.seed).folds[0]


def test_zero_task_rate_keeps_initial_weights(cohort):
    config = small_train(lr_task=0.0)
    fold = first_fold(cohort, config)
    one, _ = train_baseline(cohort, fold, config)
    two, _ = train_baseline(cohort, fold, small_train(lr_task=0.0, epochs=2))
    assert bundle_hash(one) == bundle_hash(two)


def test_zero_lambda_matches_baseline(cohort):
    config = small_train(epochs=2, **{"lambda": 0.0})
    fold = first_fold(cohort, config)
    baseline, _ = train_baseline(cohort, fold, config)
    ablated, _ = train_bias_ablated(cohort, fold, config)
    assert bundle_hash(baseline) == bundle_hash(ablated)
    assert ablated.bias_names == ["project", "patient", "glass"]
    assert not baseline.bias_names


def test_ablation_needs_bias_names(cohort):
    config = small_train(bias_names=[])
    with pytest.raises(TrainingError):
        train_bias_ablated(cohort, first_fold(cohort, config), config)


def test_history_records(cohort):
    config = small_train(epochs=2, bias_names=["project"])
    _, history = train_bias_ablated(cohort, first_fold(cohort, config), config)
    frame = history.to_frame()
    assert list(frame.columns) == history.columns()
    assert frame["iter"].is_monotonic_increasing
    assert sorted(frame["epoch"].unique()) == [0, 1]
    assert len(history.epoch_end("dc_task")) == 2
    assert len(history.epochs) == 2


def test_separable_cohort_is_learned(separable_cohort):
    config = small_train(epochs=3, lr_task=1e-2, feature_dim=8)
    fold = first_fold(separable_cohort, config)
    bundle, history = train_baseline(separable_cohort, fold, config)
    train_idx, _ = fold_indices(separable_cohort, fold)
    preds = predict_tiles(bundle, separable_cohort, train_idx)
    accuracy = np.mean([(p.score >= 0.5) == p.true_label for p in preds])
    assert accuracy >= 0.95
    dc_task = [row["dc_task"] for row in history.rows]
    assert history.epoch_end("dc_task")[-1] >= dc_task[0]


def test_early_stopping_restores_best_epoch(cohort):
    config = small_train(epochs=4, early_stopping_patience=1, lr_task=0.05)
    result = run_cross_validation(cohort, config, ablate=False)
    for fold in result.folds:
        assert fold.best_epoch < fold.epochs_trained
        assert fold.epochs_trained <= 4


def test_monitoring_ignores_the_adversarial_update_of_the_same_batch(cohort):
    fold = first_fold(cohort, small_train())
    rows = []
    for lr_adv in (0.0, 0.05):
        config = small_train(lr_task=0.0, lr_adv=lr_adv, monitor_every=1, bias_names=["project"])
        rows.append(train_bias_ablated(cohort, fold, config)[1].rows)
    assert rows[0][0]["dc_project"] == rows[1][0]["dc_project"]
    assert rows[0][1]["dc_project"] != rows[1][1]["dc_project"]


def test_monitoring_sample_curves(cohort):
    config = small_train(epochs=2, bias_names=["project", "glass"])
    _, history = train_bias_ablated(cohort, first_fold(cohort, config), config)
    assert set(history.initial) == {"dc_task", "dc_project", "dc_glass"}
    assert [sorted(e) for e in history.epochs] == [sorted(["epoch", "val_loss_msi", *history.initial])] * 2
    assert len(history.sample_curve("dc_glass")) == 3


def test_baseline_learns_the_project_shortcut():
    projects = [ProjectSpec(project_id="A", pi_mss=0.9, pi_msi=0.1),
                ProjectSpec(project_id="B", pi_mss=0.1, pi_msi=0.9)]
    amplitudes = Amplitudes(alpha_class=0.5, alpha_project=1.0, alpha_patient=0.0, alpha_glass=0.0)
    cohort = generate_cohort(small_spec(n_patients=120, tiles_per_spot=8, feature_dim=32, projects=projects,
                                        amplitudes=amplitudes))
    config = small_train(epochs=3, lr_task=1e-2, bias_names=["project"])
    _, history = train_baseline(cohort, first_fold(cohort, config), config)
    assert history.epochs[-1]["dc_project"] >= 2 * history.initial["dc_project"]


def test_task_dependence_grows_every_epoch(separable_cohort):
    config = small_train(epochs=4, lr_task=1e-3, bias_names=["project"])
    _, history = train_baseline(separable_cohort, first_fold(separable_cohort, config), config)
    curve = history.sample_curve("dc_task")
    assert all(b >= a - 1e-3 for a, b in zip(curve, curve[1:]))
    assert curve[-1] > curve[0]


def test_ablation_keeps_accuracy_without_confounding():
    amplitudes = Amplitudes(alpha_class=3.0, alpha_project=0.0, alpha_patient=0.0, alpha_glass=0.5,
                            tissue_class_scale={}, magnification_class_scale={})
    cohort = generate_cohort(small_spec(n_patients=60, msi_rate=0.4, tiles_per_spot=8, feature_dim=16,
                                        projects=BALANCED, amplitudes=amplitudes))
    config = small_train(epochs=3, lr_task=1e-2, bias_names=["project", "glass"])
    baseline = run_cross_validation(cohort, config, ablate=False)
    ablated = run_cross_validation(cohort, config, ablate=True)
    for ref, other in zip(baseline.folds, ablated.folds):
        gap = confusion(ref.predictions).balanced_accuracy - confusion(other.predictions).balanced_accuracy
        assert abs(gap) < 0.05


def test_filters_restrict_training_tiles(cohort):
    config = small_train(tissues=["TUM"], magnifications=["x20", "x10"])
    fold = first_fold(cohort, config)
    train_idx, val_idx = fold_indices(cohort, fold, config)
    for i in np.r_[train_idx, val_idx]:
        assert cohort.tiles[i].tissue_type == "TUM"
        assert cohort.tiles[i].magnification in ("x20", "x10")
    all_train, all_val = fold_indices(cohort, fold)
    assert train_idx.size + val_idx.size == int(tile_mask(cohort, config).sum()) < all_train.size + all_val.size
    result = run_cross_validation(cohort, config, ablate=True)
    assert {(p.tissue_type, p.magnification) for p in result.predictions} <= {("TUM", "x20"), ("TUM", "x10")}
    with pytest.raises(ValidationError):
        small_train(magnifications=["x80"])


# Audit

def test_audit_of_noise_features(rng):
    labels = rng.integers(0, 2, size=2000)
    projects = rng.choice(["A", "B", "C"], size=2000).tolist()
    rows = audit_feature_matrix(rng.normal(size=(2000, 4)), labels, {"project": projects}, "noise")
    assert all(r.dc < 0.05 for r in rows if r.dc is not None)


def test_audit_detects_encoded_variable():
    projects = ["A", "B", "C"] * 20
    codes = np.array([0, 1, 2] * 20)
    F = np.eye(3)[codes]
    labels = np.arange(60) % 2
    rows = audit_feature_matrix(F, labels, {"project": projects}, "onehot")
    overall = next(r for r in rows if r.subgroup == "All" and r.variable == "project")
    assert overall.dc == pytest.approx(1.0)
    conditioned = next(r for r in rows if r.subgroup == "label=MSS" and r.variable == "project")
    assert conditioned.n == 30 and conditioned.dc == pytest.approx(1.0)
    per_project = [r for r in rows if r.subgroup.startswith("project=")]
    assert {r.subgroup for r in per_project} == {"project=A", "project=B", "project=C"}
    assert all(r.variable == "task" for r in per_project)


def test_audit_small_subgroups_and_level_cap(rng):
    F = rng.normal(size=(6, 2))
    rows = audit_feature_matrix(F, [0, 0, 1, 1, 0, 1], {"glass": ["g1", "g2", "g2", "g3", "g3", "g3"],
                                                        "patient": ["a", "b", "c", "d", "e", "f"]},
                                "m", max_subgroup_levels=3)
    g1 = [r for r in rows if r.subgroup == "glass=g1"]
    assert g1 and all(r.dc is None and r.n == 1 for r in g1)
    assert not any(r.subgroup.startswith("patient=") for r in rows)


def test_audit_biases_subsamples(cohort):
    config = small_train(audit_max_samples=50)
    bundle = init_bundle(cohort.tiles[0].payload.size, [16], 8, [8], {}, 0)
    report = audit_biases(bundle, cohort, ["project", "glass"], "init", config=config)
    overall = [r for r in report.rows if r.subgroup == "All"]
    assert {r.variable for r in overall} == {"task", "project", "glass"}
    assert all(r.n == 50 for r in overall)
    assert report.value("init", "All", "project") is not None


def test_cross_validation_writes_run_directory(tmp_path, cohort):
    config = small_train(bias_names=["project"])
    result = run_cross_validation(cohort, config, ablate=True, run_dir=tmp_path)
    folds = read_json(tmp_path / "folds.json")
    assert folds["regime"] == "ablated"
    assert [f["fold"] for f in folds["folds"]] == [0, 1]
    assert set(folds["folds"][0]["monitor_dc"]["initial"]) == {"dc_task", "dc_project"}
    assert len(folds["folds"][0]["monitor_dc"]["epochs"]) == 1
    for i in range(2):
        assert (tmp_path / f"history_fold{i}.csv").exists()
        assert (tmp_path / "checkpoints" / f"fold{i}_final.ckpt").exists()
        assert (tmp_path / "checkpoints" / f"fold{i}_epoch0.ckpt").exists()
    assert (tmp_path / "audit.csv").exists()
    assert {r.model for r in result.audit.rows} == {"ablated:fold0", "ablated:fold1"}
    assert sorted(p.tile_id for p in result.predictions) == sorted(t.tile_id for t in cohort.tiles)


@pytest.mark.slow
def test_ablation_halves_conditioned_project_dependence_on_benchmark_cohort():
    projects = [ProjectSpec(project_id="A", pi_mss=0.9, pi_msi=0.1),
                ProjectSpec(project_id="B", pi_mss=0.1, pi_msi=0.9)]
    cohort = generate_cohort(CohortSpec(n_patients=1000, msi_rate=0.074, projects=projects))
    config = TrainConfig()
    baseline = run_cross_validation(cohort, config, ablate=False)
    ablated = run_cross_validation(cohort, config, ablate=True)
    assert len(ablated.folds) == 5
    def conditioned(result, regime, fold, variable):
        return result.audit.value(f"{regime}:fold{fold}", "label=MSS", variable)

    for i in range(5):
        assert conditioned(ablated, "ablated", i, "project") <= 0.5 * conditioned(baseline, "baseline", i, "project")
        for variable in ("patient", "glass"):
            assert conditioned(ablated, "ablated", i, variable) < conditioned(baseline, "baseline", i, variable)
    for fold in ablated.plan.folds:
        train_idx, val_idx = fold_indices(cohort, fold)
        assert not {cohort.tiles[i].patient_id for i in train_idx} & {cohort.tiles[i].patient_id for i in val_idx}


@pytest.mark.slow
def test_single_class_glasses_keep_their_glass_dependence():
    amplitudes = Amplitudes(alpha_class=4.0, alpha_project=1.0, alpha_patient=0.0, alpha_glass=0.5,
                            tissue_class_scale={}, magnification_class_scale={})
    cohort = generate_cohort(small_spec(n_patients=200, msi_rate=0.5, tiles_per_spot=8, feature_dim=16,
                                        glasses_per_project=4, projects=BALANCED, amplitudes=amplitudes,
                                        single_class_glasses=True, single_class_projects=["B"]))
    config = small_train(epochs=4, batch_size=64, lr_task=3e-3, bias_names=["project", "glass"],
                         audit_max_samples=1024)
    ablated = run_cross_validation(cohort, config, ablate=True)
    for i in range(config.folds):
        model = f"ablated:fold{i}"
        assert ablated.audit.value(model, "All", "project") < 0.05
        assert ablated.audit.value(model, "project=B", "glass") > 0.2
