import numpy as np
import pytest
from pydantic import ValidationError

from msidebias.core.depstats import distance_correlation_sq, one_hot
from msidebias.core.errors import ConfigError, DegenerateCohortError, EmptyCohortError, ManifestParseError
from msidebias.schemas.schemas import Amplitudes, PreprocessConfig, ProjectSpec
from msidebias.services.synthcohort import (BACKGROUND, SHIFT_SCALE, assign_population, draw_directions,
                                            generate_cohort, load_cohort, render_spot_image, save_cohort,
                                            save_spot_images, summarize_cohort)
from tests.conftest import small_spec

BALANCED = [ProjectSpec(project_id="A", pi_mss=0.5, pi_msi=0.5),
            ProjectSpec(project_id="B", pi_mss=0.5, pi_msi=0.5)]


def project_dc(cohort):
    codes, levels = cohort.bias_codes("project")
    return distance_correlation_sq(cohort.payload_matrix(), one_hot(codes, len(levels))).value


def test_generation_is_deterministic(spec):
    assert generate_cohort(spec) == generate_cohort(spec)
    assert generate_cohort(spec) != generate_cohort(small_spec(seed=4))


def test_msi_count_follows_rate():
    population = assign_population(small_spec(n_patients=1000, msi_rate=0.074, seed=7))
    n_msi = sum(p.label == "MSI-H" for p in population.patients)
    assert 45 <= n_msi <= 105


def test_adding_patients_keeps_existing_ones():
    small = assign_population(small_spec(n_patients=20))
    large = assign_population(small_spec(n_patients=30))
    for a, b in zip(small.patients, large.patients):
        assert (a.patient_id, a.label, a.project_id) == (b.patient_id, b.label, b.project_id)


def test_project_assignment_probabilities():
    projects = [ProjectSpec(project_id="A", pi_mss=0.5, pi_msi=0.0),
                ProjectSpec(project_id="B", pi_mss=0.5, pi_msi=1.0)]
    cohort = generate_cohort(small_spec(n_patients=100, projects=projects))
    msi_projects = {t.project_id for t in cohort.tiles if t.label == "MSI-H"}
    assert msi_projects == {"B"}


def test_class_only_signal_is_not_a_project_signal():
    amplitudes = Amplitudes(alpha_class=1.0, alpha_project=0.0, alpha_patient=0.0, alpha_glass=0.0)
    cohort = generate_cohort(small_spec(n_patients=250, tiles_per_spot=4, projects=BALANCED,
                                        amplitudes=amplitudes))
    assert len(cohort) == 2000
    assert project_dc(cohort) < 0.05


def test_project_dependence_grows_with_amplitude():
    values = []
    for alpha in (0.0, 1.0, 4.0):
        amplitudes = Amplitudes(alpha_class=1.0, alpha_project=alpha, alpha_patient=0.0, alpha_glass=0.0)
        values.append(project_dc(generate_cohort(small_spec(n_patients=120, projects=BALANCED,
                                                            amplitudes=amplitudes))))
    assert values[0] < values[1] < values[2]


def class_gap(cohort, keep):
    """Mean MSI-H minus mean MSS projection on the class axis, over the kept tiles"""
    axis = cohort.directions["class:MSI-H"] - cohort.directions["class:MSS"]
    X = cohort.payload_matrix() @ axis
    labels = cohort.labels
    keep = np.asarray(keep)
    return X[keep & (labels == 1)].mean() - X[keep & (labels == 0)].mean()


def test_class_signal_depends_on_tissue_and_magnification():
    amplitudes = Amplitudes(alpha_class=3.0, alpha_project=0.0, alpha_patient=0.0, alpha_glass=0.0,
                            tissue_class_scale={"LYM": 0.0}, magnification_class_scale={"x5": 0.5})
    cohort = generate_cohort(small_spec(n_patients=200, msi_rate=0.5, projects=BALANCED, amplitudes=amplitudes,
                                        tissue_weights={"TUM": 0.5, "LYM": 0.5}))
    axis = cohort.directions["class:MSI-H"] - cohort.directions["class:MSS"]
    full = 3.0 * axis @ axis
    tissue = np.array(cohort.attribute("tissue"))
    mag = np.array(cohort.attribute("magnification"))
    assert class_gap(cohort, (tissue == "TUM") & (mag == "x20")) == pytest.approx(full, rel=0.15)
    assert class_gap(cohort, (tissue == "TUM") & (mag == "x5")) == pytest.approx(0.5 * full, rel=0.25)
    assert abs(class_gap(cohort, tissue == "LYM")) < 0.15 * full


def test_default_class_scales_favour_tumour_at_intermediate_magnification():
    amp = Amplitudes()
    assert amp.class_scale("TUM", "x20") == 1.0
    assert amp.class_scale("LYM", "x20") < amp.class_scale("TUM", "x20")
    assert amp.class_scale("MUC", "x20") < amp.class_scale("TUM", "x20")
    assert amp.class_scale("TUM", "x5") < amp.class_scale("TUM", "x40") < amp.class_scale("TUM", "x20")
    assert Amplitudes(tissue_class_scale={}).class_scale("LYM", "x20") == 1.0
    with pytest.raises(ValidationError):
        Amplitudes(tissue_class_scale={"BONE": 1.0})
    with pytest.raises(ValidationError):
        Amplitudes(magnification_class_scale={"x20": -1.0})


def test_single_class_glasses():
    cohort = generate_cohort(small_spec(n_patients=60, single_class_glasses=True, glasses_per_project=3))
    summary = summarize_cohort(cohort)
    assert summary["glasses"]
    assert all(g["purity"] == 1.0 for g in summary["glasses"].values())
    assert sum(summary["patients_per_class"].values()) == 60


def test_single_class_packing_limited_to_named_projects():
    spec = small_spec(n_patients=80, single_class_glasses=True, single_class_projects=["A"],
                      glasses_per_project=3, projects=BALANCED, msi_rate=0.4)
    glasses = summarize_cohort(generate_cohort(spec))["glasses"]
    assert all(g["purity"] == 1.0 for g in glasses.values() if g["project_id"] == "A")
    assert any(g["purity"] < 1.0 for g in glasses.values() if g["project_id"] == "B")


def test_degenerate_and_empty_cohorts():
    with pytest.raises(DegenerateCohortError):
        generate_cohort(small_spec(n_patients=2, msi_rate=1e-6))
    with pytest.raises(EmptyCohortError):
        generate_cohort(small_spec(tiles_per_spot=0))


def test_tile_ids_and_metadata(cohort, spec):
    ids = [t.tile_id for t in cohort.tiles]
    assert len(set(ids)) == len(ids)
    assert len(cohort) == spec.n_patients * spec.spots_per_patient * spec.tiles_per_spot
    for t in cohort.tiles:
        assert t.payload.shape == (spec.feature_dim,)
        assert t.glass_id.startswith(f"{t.project_id}-G")
    for patient, label in cohort.patient_labels().items():
        assert {t.label for t in cohort.tiles if t.patient_id == patient} == {label}


def test_save_and_load(tmp_path, cohort):
    save_cohort(cohort, tmp_path / "cohort")
    assert load_cohort(tmp_path / "cohort") == cohort


def test_duplicate_tile_id_reports_line(tmp_path, cohort):
    root = save_cohort(cohort, tmp_path / "cohort")
    lines = (root / "manifest.csv").read_text().splitlines()
    lines.insert(2, lines[1])
    (root / "manifest.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(ManifestParseError) as exc:
        load_cohort(root)
    assert exc.value.line == 3
    assert exc.value.column == "tile_id"


def test_unknown_magnification_token(tmp_path, cohort):
    root = save_cohort(cohort, tmp_path / "cohort")
    lines = (root / "manifest.csv").read_text().splitlines()
    fields = lines[1].split(",")
    fields[7] = "x80"
    lines[1] = ",".join(fields)
    (root / "manifest.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(ManifestParseError) as exc:
        load_cohort(root)
    assert "x80" in exc.value.message
    assert exc.value.line == 2
    assert exc.value.column == "magnification"


def test_bad_manifest_header(tmp_path, cohort):
    root = save_cohort(cohort, tmp_path / "cohort")
    lines = (root / "manifest.csv").read_text().splitlines()
    lines[0] = lines[0].replace("glass_id", "slide_id")
    (root / "manifest.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(ManifestParseError) as exc:
        load_cohort(root)
    assert exc.value.column == "slide_id"


# Spot images

def image_spec(**overrides):
    fields = dict(mode="spot-image", image_px=64, disk_radius_px=24, n_patients=6, msi_rate=0.5)
    fields.update(overrides)
    return small_spec(**fields)


def test_rendered_spot_layout():
    amplitudes = Amplitudes(alpha_class=0.0, alpha_project=0.0, alpha_patient=0.0, alpha_glass=0.0)
    spec = image_spec(amplitudes=amplitudes, blob_density=0.0)
    image, mask = render_spot_image(spec, "P00000", "S0")
    assert image.shape == (64, 64, 3) and image.dtype == np.uint8
    yy, xx = np.mgrid[0:64, 0:64]
    inside = (yy - 31.5) ** 2 + (xx - 31.5) ** 2 <= 24 ** 2
    assert np.all(image[~inside] == BACKGROUND)
    assert np.all(mask[~inside] == 0)
    assert np.all(mask[inside] > 0)
    assert np.all(image[inside].mean(axis=1) < BACKGROUND)


def test_rendering_is_byte_identical():
    spec = image_spec()
    a, mask_a = render_spot_image(spec, "P00001", "S1")
    b, mask_b = render_spot_image(spec, "P00001", "S1")
    assert a.tobytes() == b.tobytes()
    assert mask_a.tobytes() == mask_b.tobytes()


def test_background_carries_the_planted_shift():
    amplitudes = Amplitudes(alpha_class=1.0, alpha_project=1.0, alpha_patient=0.5, alpha_glass=0.5)
    spec = image_spec(amplitudes=amplitudes, n_patients=10)
    population = assign_population(spec)
    dirs = draw_directions(spec, population, 3)
    for patient in population.patients[:4]:
        for s, glass in enumerate(patient.glass_ids):
            image, _ = render_spot_image(spec, patient.patient_id, f"S{s}")
            shift = SHIFT_SCALE * (dirs[f"project:{patient.project_id}"] + 0.5 * dirs[f"glass:{glass}"]
                                   + 0.5 * dirs[f"patient:{patient.patient_id}"])
            np.testing.assert_allclose(image[0, 0].astype(float), BACKGROUND + shift, atol=0.51)


def test_image_cohort_through_preprocessing(tmp_path):
    spec = image_spec(n_patients=12, image_px=128, disk_radius_px=56)
    preprocess = PreprocessConfig(tile_px=32, magnifications=["x40", "x20"],
                                  keep_tissues=["TUM", "LYM", "MUC", "other"])
    cohort = generate_cohort(spec, preprocess)
    assert cohort.is_image
    assert len(cohort) > 0
    assert {t.magnification for t in cohort.tiles} <= {"x40", "x20"}
    for t in cohort.tiles:
        assert t.payload.shape == (32, 32, 3)
        assert t.tile_id.startswith(f"{t.patient_id}_{t.spot_id}_{t.magnification}_")
    save_cohort(cohort, tmp_path / "images")
    assert (tmp_path / "images" / "palette.json").exists()
    assert load_cohort(tmp_path / "images") == cohort


def test_spot_rendering_needs_spot_image_mode():
    with pytest.raises(ConfigError) as exc:
        render_spot_image(small_spec(), "P00000", "S0")
    assert exc.value.field == "cohort.mode"


def test_save_spot_images(tmp_path):
    spec = image_spec(n_patients=3, msi_rate=0.5)
    root = save_spot_images(spec, tmp_path / "spots")
    spots = (root / "spots.csv").read_text().splitlines()
    assert spots[0] == "patient_id,spot_id,glass_id,project_id,label"
    assert len(spots) == 1 + 3 * spec.spots_per_patient
    assert (root / "P00000_S0.png").exists()
    assert (root / "P00000_S0_mask.png").exists()
