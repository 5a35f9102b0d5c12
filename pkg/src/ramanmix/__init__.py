"""Synthetic Raman-like spectra from batch-cultivation models, plus
mixing-based label decorrelation for training regressors that stay unbiased
under shifted cultivation conditions."""

from importlib import resources

from .cultivation import (
    CultivationParams,
    CultivationState,
    FitOptions,
    FitResult,
    PerturbationConfig,
    Trajectory,
    derivatives,
    fit_params,
    integrate,
    integrate_batch,
    perturb,
    perturb_initial,
)
from .datasets import (
    Dataset,
    DatasetSpec,
    ModelFixture,
    NormalizationRecord,
    SubstrateMix,
    batch_iterator,
    build_dataset,
    build_table,
    load_dataset,
    load_model_fixture,
    normalize_labels,
    save_dataset,
    save_model_fixture,
    table_specs,
    terminal_hhx_weight_percent,
)
from .decorrelation import (
    AugmentConfig,
    AugmentStats,
    LabeledBatch,
    MixingMatrix,
    augment_batch,
    compensate_and_filter,
    mix_spectra,
    sample_uniform_labels,
    solve_mixing,
)
from .spectra import (
    ComponentLibrary,
    NoiseModel,
    Spectrum,
    WavenumberGrid,
    extract_components,
    generate_components,
    load_peak_table,
    synthesize,
    synthesize_batch,
)
from .training import (
    EvalReport,
    ExperimentConfig,
    Regressor,
    TrainConfig,
    collect_augment_stats,
    evaluate,
    experiment_preset,
    run_experiment_matrix,
    train,
)

__version__ = "0.1.0"


def default_fixture_path(name: str) -> str:
    """Filesystem path of a packaged fixture file."""
    return str(resources.files("ramanmix") / "fixtures" / name)


def default_model_fixture() -> ModelFixture:
    return load_model_fixture(default_fixture_path("params_default.txt"))


def default_component_library() -> ComponentLibrary:
    peaks_path = default_fixture_path("peaks_default.json")
    table = load_peak_table(peaks_path)
    import json

    with open(peaks_path, "r", encoding="utf-8") as fh:
        grid_raw = json.load(fh)["grid"]
    grid = WavenumberGrid(start=grid_raw["start"], end=grid_raw["end"], m=int(grid_raw["m"]))
    return generate_components(grid, table)
