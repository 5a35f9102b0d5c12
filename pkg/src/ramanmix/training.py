"""Reference regressor, training loop with per-batch augmentation, and the
four-setup evaluation matrix.

The regressor is linear-affine in the spectrum: prediction = x @ W + b.  That
is deliberately the simplest model exhibiting the effect under study — a
least-squares learner picks up label correlations from correlated training
data and carries the resulting bias to validation sets with different
substrate mixes.  The interface (predict + gradient steps on squared error)
is the extension point for richer models.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from numpy.random import SeedSequence, default_rng

from .datasets import (
    Dataset,
    ModelFixture,
    VAL_OIL_PCT,
    batch_iterator,
    build_table,
    normalize_labels,
    table_specs,
)
from .decorrelation import AugmentConfig, AugmentStats, augment_batch
from .errors import DivergedError, NormalizationMismatchError
from .spectra import ComponentLibrary


@dataclass
class Regressor:
    """Linear-affine map from spectra to label estimates."""

    weights: np.ndarray  # (m, k)
    bias: np.ndarray     # (k,)
    norm_maxima: np.ndarray | None = None  # normalization the model was trained under

    def predict(self, spectra: np.ndarray) -> np.ndarray:
        spectra = np.asarray(spectra, dtype=float)
        single = spectra.ndim == 1
        out = np.atleast_2d(spectra) @ self.weights + self.bias
        return out[0] if single else out


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 3e-4
    l2: float = 1e-6
    augment: AugmentConfig = AugmentConfig(mode="off")
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.l2 < 0:
            raise ValueError("l2 must be >= 0")


def loss_and_gradients(
    weights: np.ndarray,
    bias: np.ndarray,
    spectra: np.ndarray,
    labels: np.ndarray,
    l2: float,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean-squared-error objective (mean over samples and label dimensions,
    plus an L2 penalty on the weights) and its analytic gradients."""
    resid = spectra @ weights + bias - labels
    n, k = resid.shape
    loss = float((resid**2).mean() + l2 * (weights**2).sum())
    scale = 2.0 / (n * k)
    grad_w = scale * (spectra.T @ resid) + 2.0 * l2 * weights
    grad_b = scale * resid.sum(axis=0)
    return loss, grad_w, grad_b


def train(dataset: Dataset, config: TrainConfig) -> tuple[Regressor, AugmentStats]:
    """Mini-batch SGD with the augmentation stage applied per batch.

    The dataset must carry a normalization record (training is defined on
    normalized labels).  The mean-over-survivors loss keeps the gradient
    scale stable when filtering shrinks a batch.  Deterministic for a fixed
    (dataset, config) pair: shuffling and augmentation run on dedicated
    substreams of ``config.seed``.
    """
    if dataset.norm is None:
        raise ValueError("train expects a normalized dataset")
    m = dataset.spectra.shape[1]
    k = dataset.labels.shape[1]
    shuffle_ss, augment_ss = SeedSequence(config.seed).spawn(2)
    shuffle_rng = default_rng(shuffle_ss)
    augment_rng = default_rng(augment_ss)

    weights = np.zeros((m, k))
    bias = np.zeros(k)
    stats = AugmentStats()

    for _ in range(config.epochs):
        for batch in batch_iterator(dataset, config.batch_size, rng=shuffle_rng):
            out, delta = augment_batch(batch, config.augment, augment_rng)
            stats = stats + delta
            if out.n == 0:
                continue
            loss, grad_w, grad_b = loss_and_gradients(
                weights, bias, out.spectra, out.labels, config.l2
            )
            if not np.isfinite(loss):
                raise DivergedError("training loss became non-finite; lower the learning rate")
            weights -= config.learning_rate * grad_w
            bias -= config.learning_rate * grad_b

    return Regressor(weights=weights, bias=bias, norm_maxima=dataset.norm.maxima.copy()), stats


def evaluate(model: Regressor, val: Dataset) -> float:
    """Mean squared error over samples and label dimensions, on normalized labels.

    The validation set must be scaled with the same record the model was
    trained under; anything else raises
    :class:`NormalizationMismatchError`.  The model is not mutated.
    """
    if val.norm is None:
        raise NormalizationMismatchError("validation dataset is not normalized")
    if model.norm_maxima is None or not np.array_equal(model.norm_maxima, val.norm.maxima):
        raise NormalizationMismatchError("validation set was scaled with a different record")
    pred = val.spectra @ model.weights + model.bias
    return float(((pred - val.labels) ** 2).mean())


def collect_augment_stats(
    dataset: Dataset,
    config: AugmentConfig,
    batch_size: int = 32,
    epochs: int = 1,
    seed: int = 0,
) -> AugmentStats:
    """Run the augmentation stage alone over the dataset and accumulate stats."""
    shuffle_rng = default_rng(SeedSequence(seed).spawn(2)[0])
    augment_rng = default_rng(SeedSequence(seed).spawn(2)[1])
    stats = AugmentStats()
    for _ in range(epochs):
        for batch in batch_iterator(dataset, batch_size, rng=shuffle_rng):
            _, delta = augment_batch(batch, config, augment_rng)
            stats = stats + delta
    return stats


# ---------------------------------------------------------------------------
# Experiment matrix
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to run the four-setup x six-validation-set grid."""

    n_train_cultivations: int = 200
    n_val_cultivations: int = 40
    n_uniform_samples: int = 5000
    epochs: int = 25
    batch_size: int = 32
    learning_rate: float = 3e-4
    l2: float = 1e-6
    noise_sigma: float = 0.01
    alpha: float = 5.0
    beta: float = 5.0
    rank_tol: float = 1e-10
    train_seeds: tuple[int, ...] = (101, 202, 303)
    data_seed: int = 7


EXPERIMENT_PRESETS = {
    "paper": dict(
        n_train_cultivations=2000, n_val_cultivations=400, n_uniform_samples=50_000, epochs=100
    ),
    "reduced": dict(
        n_train_cultivations=200, n_val_cultivations=40, n_uniform_samples=5000, epochs=25
    ),
    "smoke": dict(
        n_train_cultivations=24, n_val_cultivations=8, n_uniform_samples=600, epochs=4
    ),
}


def experiment_preset(name: str, **overrides) -> ExperimentConfig:
    if name not in EXPERIMENT_PRESETS:
        raise ValueError(f"unknown preset {name!r}; expected one of {sorted(EXPERIMENT_PRESETS)}")
    return ExperimentConfig(**{**EXPERIMENT_PRESETS[name], **overrides})


# (row label, training dataset, augmentation mode); row order fixed.
MATRIX_SETUPS = (
    ("no_corr / augment off", "no_corr", "off"),
    ("correlated / augment off", "train", "off"),
    ("correlated / decorrelate", "train", "decorrelate"),
    ("correlated / decorrelate+filter", "train", "decorrelate_filter"),
)


@dataclass
class SetupResult:
    name: str
    train_dataset: str
    mode: str
    mse_by_val: dict[str, float]                 # mean over seeds
    per_seed: list[dict[str, float]]
    augment_stats: AugmentStats

    @property
    def mean_mse(self) -> float:
        return float(np.mean(list(self.mse_by_val.values())))

    @property
    def spread(self) -> float:
        values = list(self.mse_by_val.values())
        return float(max(values) - min(values))


@dataclass
class EvalReport:
    val_names: tuple[str, ...]
    setups: list[SetupResult]
    config: ExperimentConfig
    complete: bool = True
    failures: list[str] = field(default_factory=list)

    def setup(self, name: str) -> SetupResult:
        for s in self.setups:
            if s.name == name:
                return s
        raise KeyError(name)

    def to_json_dict(self) -> dict:
        return {
            "config": dataclasses.asdict(self.config),
            "val_names": list(self.val_names),
            "complete": self.complete,
            "failures": list(self.failures),
            "rows": [
                {
                    "name": s.name,
                    "train_dataset": s.train_dataset,
                    "mode": s.mode,
                    "mse_by_val": s.mse_by_val,
                    "mean": s.mean_mse,
                    "per_seed": s.per_seed,
                    "augment_stats": s.augment_stats.to_json_dict(),
                }
                for s in self.setups
            ],
        }

    def to_text_table(self) -> str:
        width = max(len(s.name) for s in self.setups) + 2
        cols = list(self.val_names) + ["mean"]
        lines = ["".join(["setup".ljust(width)] + [c.rjust(10) for c in cols])]
        for s in self.setups:
            values = [s.mse_by_val[v] for v in self.val_names] + [s.mean_mse]
            lines.append("".join([s.name.ljust(width)] + [f"{v:10.4f}" for v in values]))
        return "\n".join(lines)


def run_experiment_matrix(
    config: ExperimentConfig,
    fixture: ModelFixture,
    library: ComponentLibrary,
    threads: int = 1,
) -> EvalReport:
    """Train the four setups over the configured seeds and evaluate each on
    the six shifted-mix validation sets.

    Datasets are regenerated per training seed (data seed derived from
    ``(data_seed, train_seed)``), so the reported means average over both
    sampling and training randomness.  A failed cell marks the report
    incomplete instead of aborting the grid.
    """
    val_names = tuple(VAL_OIL_PCT.keys())
    per_setup_seed_mse: dict[str, list[dict[str, float]]] = {s[0]: [] for s in MATRIX_SETUPS}
    per_setup_stats: dict[str, AugmentStats] = {s[0]: AugmentStats() for s in MATRIX_SETUPS}
    failures: list[str] = []

    for train_seed in config.train_seeds:
        data_master = int(SeedSequence((config.data_seed, train_seed)).generate_state(1)[0])
        specs = table_specs(
            data_master,
            n_train_cultivations=config.n_train_cultivations,
            n_val_cultivations=config.n_val_cultivations,
            n_uniform_samples=config.n_uniform_samples,
            noise_sigma=config.noise_sigma,
            alpha=config.alpha,
            beta=config.beta,
        )
        datasets = build_table(specs, fixture, library, threads=threads)
        others = [datasets[name] for name in val_names] + [datasets["no_corr"]]
        train_n, scaled, _ = normalize_labels(datasets["train"], others)
        by_name = dict(zip(list(val_names) + ["no_corr"], scaled))
        by_name["train"] = train_n

        for name, train_ds, mode in MATRIX_SETUPS:
            augment = AugmentConfig(
                mode=mode, sigma=config.noise_sigma, rank_tol=config.rank_tol
            )
            train_config = TrainConfig(
                epochs=config.epochs,
                batch_size=config.batch_size,
                learning_rate=config.learning_rate,
                l2=config.l2,
                augment=augment,
                seed=train_seed,
            )
            try:
                model, stats = train(by_name[train_ds], train_config)
                cell = {v: evaluate(model, by_name[v]) for v in val_names}
            except Exception as exc:  # a failed cell poisons only its row
                failures.append(f"{name} @ seed {train_seed}: {exc}")
                continue
            per_setup_seed_mse[name].append(cell)
            per_setup_stats[name] = per_setup_stats[name] + stats

    setups = []
    for name, train_ds, mode in MATRIX_SETUPS:
        cells = per_setup_seed_mse[name]
        if cells:
            mse_by_val = {
                v: float(np.mean([c[v] for c in cells])) for v in val_names
            }
        else:
            mse_by_val = {v: float("nan") for v in val_names}
        setups.append(
            SetupResult(
                name=name,
                train_dataset=train_ds,
                mode=mode,
                mse_by_val=mse_by_val,
                per_seed=cells,
                augment_stats=per_setup_stats[name],
            )
        )
    complete = not failures and all(len(per_setup_seed_mse[s[0]]) == len(config.train_seeds) for s in MATRIX_SETUPS)
    return EvalReport(
        val_names=val_names, setups=setups, config=config, complete=complete, failures=failures
    )
