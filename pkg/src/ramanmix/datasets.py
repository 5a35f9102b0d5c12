"""Experiment datasets: one correlated training set, six shifted-mix
validation sets, and a structure-free uniform set.

Cultivation-kind datasets draw gamma-perturbed parameters and initial
conditions per cultivation, integrate the batch model over 72 h, sample every
3 h, and synthesize one noisy spectrum per sampled state.  The uniform kind
draws label vectors i.i.d. uniform per column over the training ranges.  All
randomness derives from per-cultivation substreams of the dataset seed, so
results are byte-identical regardless of chunking or thread count.

On-disk layout of a dataset directory::

    spec.json     generation recipe echo (see DatasetSpec.to_json_dict)
    labels.csv    raw labels, header "fructose,urea,biomass,phb,phhx"
    spectra.bin   row-major float64 little-endian, shape (n, m)
    spectra.json  binary header: {"n", "m", "dtype", "order", "grid"}
    norm.json     per-label maxima used for scaling (training-set derived)
"""

from __future__ import annotations

import dataclasses
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numpy.random import SeedSequence, default_rng

from .cultivation import (
    PARAM_FIELDS,
    STATE_FIELDS,
    CultivationParams,
    integrate_batch,
)
from .decorrelation import LabeledBatch
from .errors import FixtureMissingError, NonFiniteError, ZeroRangeError
from .spectra import LABEL_NAMES, ComponentLibrary, NoiseModel, WavenumberGrid

# Label columns within the 6-component state vector (oil is a state but
# never a label: it has no spectral component and is hard to assay).
LABEL_STATE_IDX = (0, 2, 3, 4, 5)

INTEGRATION_DT = 0.01  # hours
_PHI_IDX = PARAM_FIELDS.index("phi_hhx")


@dataclass(frozen=True)
class ModelFixture:
    """Nominal fitted parameters plus nominal initial conditions."""

    params: CultivationParams
    carbon_total: float
    urea: float
    inoculum: float


def load_model_fixture(path) -> ModelFixture:
    """Read a flat key=value fixture file ('#' starts a comment line)."""
    if not os.path.exists(path):
        raise FixtureMissingError(f"fixture file not found: {path}")
    values: dict[str, float] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FixtureMissingError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, raw = line.partition("=")
            try:
                values[key.strip()] = float(raw)
            except ValueError as exc:
                raise FixtureMissingError(f"{path}:{lineno}: bad float {raw!r}") from exc
    try:
        params = CultivationParams(**{k: values[k] for k in PARAM_FIELDS})
        return ModelFixture(
            params=params,
            carbon_total=values["init_carbon_total"],
            urea=values["init_urea"],
            inoculum=values["init_inoculum"],
        )
    except KeyError as exc:
        raise FixtureMissingError(f"{path}: missing key {exc.args[0]!r}") from exc


def save_model_fixture(fixture: ModelFixture, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for name in PARAM_FIELDS:
            fh.write(f"{name}={getattr(fixture.params, name):.17g}\n")
        fh.write(f"init_carbon_total={fixture.carbon_total:.17g}\n")
        fh.write(f"init_urea={fixture.urea:.17g}\n")
        fh.write(f"init_inoculum={fixture.inoculum:.17g}\n")


@dataclass(frozen=True)
class SubstrateMix:
    """Carbon-source split in weight percent; polymer composition follows it."""

    oil_pct: float

    def __post_init__(self):
        if not 0.0 <= self.oil_pct <= 100.0:
            raise ValueError("oil_pct must lie in [0, 100]")

    @property
    def fructose_pct(self) -> float:
        return 100.0 - self.oil_pct

    @property
    def hhx_pct(self) -> float:
        return 0.2 * self.oil_pct

    @property
    def hb_pct(self) -> float:
        return 100.0 - self.hhx_pct


@dataclass(frozen=True)
class DatasetSpec:
    """Generation recipe for one dataset.

    kind "cultivation" integrates perturbed cultivations (``n_cultivations``
    of them, each contributing one sample per 3 h grid point); the mix is
    either fixed at ``oil_pct`` or, for the training policy "pure_random",
    a per-cultivation coin flip between pure oil and pure fructose.  kind
    "uniform" draws ``n_samples`` label vectors i.i.d. uniform per column
    with upper bounds ``uniform_maxima``.
    """

    name: str
    kind: str
    mix_policy: str = "fixed"
    oil_pct: float | None = None
    n_cultivations: int = 0
    n_samples: int = 0
    horizon_h: float = 72.0
    sample_interval_h: float = 3.0
    alpha: float = 5.0
    beta: float = 5.0
    noise_sigma: float = 0.01
    seed: int = 0
    uniform_maxima: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("cultivation", "uniform"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "cultivation":
            if self.mix_policy not in ("fixed", "pure_random"):
                raise ValueError(f"unknown mix policy {self.mix_policy!r}")
            if self.mix_policy == "fixed" and self.oil_pct is None:
                raise ValueError("fixed mix needs oil_pct")
            if self.n_cultivations < 1:
                raise ValueError("cultivation dataset needs n_cultivations >= 1")
        else:
            if self.n_samples < 1:
                raise ValueError("uniform dataset needs n_samples >= 1")

    @property
    def samples_per_cultivation(self) -> int:
        return int(round(self.horizon_h / self.sample_interval_h)) + 1

    @property
    def n_total_samples(self) -> int:
        if self.kind == "cultivation":
            return self.n_cultivations * self.samples_per_cultivation
        return self.n_samples

    def to_json_dict(self) -> dict:
        data = dataclasses.asdict(self)
        if self.uniform_maxima is not None:
            data["uniform_maxima"] = list(self.uniform_maxima)
        return data

    @classmethod
    def from_json_dict(cls, data: dict) -> "DatasetSpec":
        if data.get("uniform_maxima") is not None:
            data = dict(data, uniform_maxima=tuple(data["uniform_maxima"]))
        return cls(**data)


@dataclass(frozen=True)
class NormalizationRecord:
    """Per-label maxima of the training set; labels scale to label/max."""

    label_names: tuple[str, ...]
    maxima: np.ndarray

    def __post_init__(self):
        maxima = np.asarray(self.maxima, dtype=float)
        if maxima.shape != (len(self.label_names),):
            raise ValueError("maxima length must match label names")
        if np.any(maxima <= 0):
            raise ZeroRangeError("normalization maxima must be positive")
        object.__setattr__(self, "maxima", maxima)

    def apply(self, labels: np.ndarray) -> np.ndarray:
        return np.asarray(labels, dtype=float) / self.maxima

    def invert(self, labels: np.ndarray) -> np.ndarray:
        return np.asarray(labels, dtype=float) * self.maxima

    def matches(self, other: "NormalizationRecord | None") -> bool:
        return (
            other is not None
            and self.label_names == other.label_names
            and np.array_equal(self.maxima, other.maxima)
        )

    def to_json_dict(self) -> dict:
        return {"label_names": list(self.label_names), "maxima": self.maxima.tolist()}

    @classmethod
    def from_json_dict(cls, data: dict) -> "NormalizationRecord":
        return cls(tuple(data["label_names"]), np.asarray(data["maxima"], dtype=float))


@dataclass
class Dataset:
    """Paired spectra/labels plus the recipe that produced them."""

    spectra: np.ndarray  # (n, m)
    labels: np.ndarray   # (n, k), raw concentrations unless norm is set
    label_names: tuple[str, ...]
    grid: WavenumberGrid
    spec: DatasetSpec
    norm: NormalizationRecord | None = None

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    @property
    def samples_per_cultivation(self) -> int | None:
        if self.spec.kind != "cultivation":
            return None
        return self.spec.samples_per_cultivation

    def raw_labels(self) -> np.ndarray:
        return self.norm.invert(self.labels) if self.norm is not None else self.labels


def _draw_cultivation(rng, fixture: ModelFixture, oil_pct: float, alpha: float, beta: float):
    """One cultivation's perturbed parameter row and initial state row.

    Kinetic parameters get independent gamma factors; the stoichiometric
    split phi_hhx stays at its fixture value (the polymer composition is a
    property of the organism, and perturbing it would wash out the
    composition-vs-mix line the validation sets are built around).  Total
    initial carbon is fixed at its nominal value and split by the mix
    percentage; urea and the inoculum get gamma factors.
    """
    w_params = rng.gamma(shape=alpha, scale=1.0 / beta, size=len(PARAM_FIELDS))
    w_params[_PHI_IDX] = 1.0
    params_row = fixture.params.to_array() * w_params
    w_init = rng.gamma(shape=alpha, scale=1.0 / beta, size=2)
    carbon = fixture.carbon_total
    y0_row = np.array([
        carbon * (100.0 - oil_pct) / 100.0,
        carbon * oil_pct / 100.0,
        fixture.urea * w_init[0],
        fixture.inoculum * w_init[1],
        0.0,
        0.0,
    ])
    return params_row, y0_row


def _integrate_with_retry(y0_rows, params_rows, rngs, oils, fixture, spec, dt):
    """Integrate a chunk; a non-finite cultivation is redrawn once, then fatal."""
    try:
        _, states = integrate_batch(
            y0_rows, params_rows, horizon=spec.horizon_h, dt=dt,
            output_interval=spec.sample_interval_h,
        )
        return states
    except NonFiniteError:
        pass
    out = np.empty((len(rngs), spec.samples_per_cultivation, len(STATE_FIELDS)))
    for i, rng in enumerate(rngs):
        try:
            _, s = integrate_batch(
                y0_rows[i : i + 1], params_rows[i : i + 1],
                horizon=spec.horizon_h, dt=dt, output_interval=spec.sample_interval_h,
            )
        except NonFiniteError:
            p_row, y0_row = _draw_cultivation(rng, fixture, oils[i], spec.alpha, spec.beta)
            _, s = integrate_batch(
                y0_row[None, :], p_row[None, :],
                horizon=spec.horizon_h, dt=dt, output_interval=spec.sample_interval_h,
            )
        out[i] = s[0]
    return out


def build_dataset(
    spec: DatasetSpec,
    fixture: ModelFixture | None,
    library: ComponentLibrary,
    threads: int = 1,
    dt: float = INTEGRATION_DT,
) -> Dataset:
    """Generate one dataset according to its spec.

    Cultivation kind needs ``fixture``; uniform kind needs
    ``spec.uniform_maxima``.
    """
    if spec.kind == "uniform":
        if spec.uniform_maxima is None:
            raise ValueError("uniform dataset spec needs uniform_maxima")
        rng = default_rng(SeedSequence(spec.seed))
        maxima = np.asarray(spec.uniform_maxima, dtype=float)
        labels = rng.uniform(0.0, 1.0, size=(spec.n_samples, len(LABEL_NAMES))) * maxima
        noise = NoiseModel(sigma=spec.noise_sigma)
        from .spectra import synthesize_batch

        spectra = synthesize_batch(labels, library, noise, rng)
        return Dataset(spectra, labels, LABEL_NAMES, library.grid, spec)

    if fixture is None:
        raise FixtureMissingError(f"dataset {spec.name!r} needs a model fixture")

    n_cult = spec.n_cultivations
    children = SeedSequence(spec.seed).spawn(n_cult)
    rngs = [default_rng(child) for child in children]

    oils = np.empty(n_cult)
    params_rows = np.empty((n_cult, len(PARAM_FIELDS)))
    y0_rows = np.empty((n_cult, len(STATE_FIELDS)))
    for i, rng in enumerate(rngs):
        if spec.mix_policy == "pure_random":
            oils[i] = 100.0 if rng.uniform() < 0.5 else 0.0
        else:
            oils[i] = float(spec.oil_pct)
        params_rows[i], y0_rows[i] = _draw_cultivation(rng, fixture, oils[i], spec.alpha, spec.beta)

    spc = spec.samples_per_cultivation
    if threads > 1 and n_cult > 1:
        chunk_size = max(1, -(-n_cult // threads))
        spans = [(s, min(s + chunk_size, n_cult)) for s in range(0, n_cult, chunk_size)]

        def work(span):
            lo, hi = span
            return _integrate_with_retry(
                y0_rows[lo:hi], params_rows[lo:hi], rngs[lo:hi], oils[lo:hi], fixture, spec, dt
            )

        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(work, spans))
        states = np.concatenate(chunks, axis=0)
    else:
        states = _integrate_with_retry(y0_rows, params_rows, rngs, oils, fixture, spec, dt)

    labels = states[:, :, LABEL_STATE_IDX].reshape(n_cult * spc, len(LABEL_NAMES))
    spectra = np.empty((n_cult * spc, library.grid.m))
    clean = labels @ library.components
    for i, rng in enumerate(rngs):
        block = slice(i * spc, (i + 1) * spc)
        spectra[block] = clean[block] + rng.normal(0.0, spec.noise_sigma, size=(spc, library.grid.m))
    return Dataset(spectra, labels, LABEL_NAMES, library.grid, spec)


def normalize_labels(
    train: Dataset, others: list[Dataset]
) -> tuple[Dataset, list[Dataset], NormalizationRecord]:
    """Scale every dataset by the training set's per-label maxima.

    Validation values above the training maximum scale to values above 1 and
    pass through unclipped.  Raises :class:`ZeroRangeError` when a training
    label column is identically zero.
    """
    maxima = train.labels.max(axis=0)
    if np.any(maxima <= 0):
        bad = [train.label_names[i] for i in np.where(maxima <= 0)[0]]
        raise ZeroRangeError(f"training label columns {bad} have zero range")
    record = NormalizationRecord(train.label_names, maxima)

    def scaled(ds: Dataset) -> Dataset:
        if ds.norm is not None:
            raise ValueError(f"dataset {ds.spec.name!r} is already normalized")
        return dataclasses.replace(ds, labels=record.apply(ds.labels), norm=record)

    return scaled(train), [scaled(ds) for ds in others], record


def apply_normalization(dataset: Dataset, record: NormalizationRecord) -> Dataset:
    if dataset.norm is not None:
        raise ValueError("dataset is already normalized")
    return dataclasses.replace(dataset, labels=record.apply(dataset.labels), norm=record)


def batch_iterator(
    dataset: Dataset,
    batch_size: int = 32,
    rng: np.random.Generator | None = None,
    shuffle: bool = True,
):
    """Yield LabeledBatch objects for one pass over the dataset.

    A seeded shuffle reorders samples each call; the final short batch is
    dropped so every emitted batch has exactly ``batch_size`` rows (the
    mixing solve needs n > k anyway, and constant n keeps the rejection
    statistics comparable across batches).
    """
    n = dataset.n
    if batch_size > n:
        raise ValueError("batch_size exceeds dataset size")
    if shuffle:
        if rng is None:
            raise ValueError("shuffle=True needs an rng")
        order = rng.permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n - batch_size + 1, batch_size):
        idx = order[start : start + batch_size]
        yield LabeledBatch(spectra=dataset.spectra[idx], labels=dataset.labels[idx])


def terminal_hhx_weight_percent(dataset: Dataset) -> float:
    """Pooled HHx weight fraction of the polymer at the 72 h harvest, in wt.%."""
    spc = dataset.samples_per_cultivation
    if spc is None:
        raise ValueError("terminal composition is defined for cultivation datasets only")
    labels = dataset.raw_labels()
    terminal = labels[spc - 1 :: spc]
    hb = terminal[:, dataset.label_names.index("phb")].sum()
    hhx = terminal[:, dataset.label_names.index("phhx")].sum()
    total = hb + hhx
    if total <= 0:
        raise ValueError("no polymer was produced; cannot form a composition")
    return 100.0 * hhx / total


# ---------------------------------------------------------------------------
# Experiment-matrix dataset table
# ---------------------------------------------------------------------------

VAL_OIL_PCT = {"val_0": 0.0, "val_2": 20.0, "val_4": 40.0, "val_6": 60.0, "val_8": 80.0, "val_10": 100.0}
DATASET_ORDER = ("train", "val_0", "val_2", "val_4", "val_6", "val_8", "val_10", "no_corr")


def table_specs(
    master_seed: int,
    n_train_cultivations: int = 2000,
    n_val_cultivations: int = 400,
    n_uniform_samples: int = 50_000,
    noise_sigma: float = 0.01,
    alpha: float = 5.0,
    beta: float = 5.0,
) -> dict[str, DatasetSpec]:
    """Specs for the full experiment table at the given scale.

    Defaults reproduce the full-size table: 2,000 training cultivations
    (50,000 samples), six 400-cultivation validation sets (10,000 samples
    each) named by their oil percentage, and a 50,000-sample uniform set.
    """
    seeds = SeedSequence(master_seed).generate_state(len(DATASET_ORDER)).tolist()
    common = dict(alpha=alpha, beta=beta, noise_sigma=noise_sigma)
    specs = {
        "train": DatasetSpec(
            name="train", kind="cultivation", mix_policy="pure_random",
            n_cultivations=n_train_cultivations, seed=seeds[0], **common,
        )
    }
    for i, (name, oil) in enumerate(VAL_OIL_PCT.items(), start=1):
        specs[name] = DatasetSpec(
            name=name, kind="cultivation", mix_policy="fixed", oil_pct=oil,
            n_cultivations=n_val_cultivations, seed=seeds[i], **common,
        )
    specs["no_corr"] = DatasetSpec(
        name="no_corr", kind="uniform", n_samples=n_uniform_samples,
        seed=seeds[-1], **common,
    )
    return specs


def build_table(
    specs: dict[str, DatasetSpec],
    fixture: ModelFixture,
    library: ComponentLibrary,
    threads: int = 1,
    only: list[str] | None = None,
    dt: float = INTEGRATION_DT,
) -> dict[str, Dataset]:
    """Build the requested datasets; the uniform set's ranges come from the
    training set's label maxima, so requesting it builds the training labels
    too (they are discarded unless also requested)."""
    wanted = list(specs.keys()) if only is None else list(only)
    unknown = [w for w in wanted if w not in specs]
    if unknown:
        raise ValueError(f"unknown dataset names {unknown}; expected {list(specs)}")

    datasets: dict[str, Dataset] = {}
    need_train = "train" in wanted or any(specs[w].kind == "uniform" for w in wanted)
    if need_train:
        datasets["train"] = build_dataset(specs["train"], fixture, library, threads=threads, dt=dt)

    for name in wanted:
        if name == "train":
            continue
        spec = specs[name]
        if spec.kind == "uniform" and spec.uniform_maxima is None:
            maxima = tuple(datasets["train"].labels.max(axis=0).tolist())
            spec = dataclasses.replace(spec, uniform_maxima=maxima)
        datasets[name] = build_dataset(spec, fixture, library, threads=threads, dt=dt)

    if "train" in datasets and "train" not in wanted:
        del datasets["train"]
    return {name: datasets[name] for name in wanted}


def sample_count_ledger(datasets: dict[str, Dataset]) -> dict[str, int]:
    return {name: ds.n for name, ds in datasets.items()}


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_SPECTRA_CHUNK_ROWS = 4096


def _write_json(path, data) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_dataset(dataset: Dataset, directory, record: NormalizationRecord | None = None) -> None:
    """Persist a dataset directory.  Labels are stored raw; pass ``record``
    to persist the normalization alongside (norm.json)."""
    if dataset.norm is not None:
        raise ValueError("persist raw datasets; pass the record separately")
    os.makedirs(directory, exist_ok=True)
    _write_json(os.path.join(directory, "spec.json"), dataset.spec.to_json_dict())
    header = ",".join(dataset.label_names)
    np.savetxt(
        os.path.join(directory, "labels.csv"), dataset.labels,
        delimiter=",", header=header, comments="", fmt="%.17g",
    )
    spectra = np.ascontiguousarray(dataset.spectra, dtype="<f8")
    _write_json(
        os.path.join(directory, "spectra.json"),
        {
            "n": int(spectra.shape[0]),
            "m": int(spectra.shape[1]),
            "dtype": "<f8",
            "order": "C",
            "grid": {"start": dataset.grid.start, "end": dataset.grid.end, "m": dataset.grid.m},
        },
    )
    with open(os.path.join(directory, "spectra.bin"), "wb") as fh:
        for start in range(0, spectra.shape[0], _SPECTRA_CHUNK_ROWS):
            fh.write(spectra[start : start + _SPECTRA_CHUNK_ROWS].tobytes())
    if record is not None:
        _write_json(os.path.join(directory, "norm.json"), record.to_json_dict())


def load_dataset(directory) -> tuple[Dataset, NormalizationRecord | None]:
    """Load a dataset directory; returns the raw dataset and the persisted
    normalization record (None if absent)."""
    with open(os.path.join(directory, "spec.json"), "r", encoding="utf-8") as fh:
        spec = DatasetSpec.from_json_dict(json.load(fh))
    with open(os.path.join(directory, "spectra.json"), "r", encoding="utf-8") as fh:
        head = json.load(fh)
    grid = WavenumberGrid(start=head["grid"]["start"], end=head["grid"]["end"], m=head["grid"]["m"])
    spectra = np.fromfile(os.path.join(directory, "spectra.bin"), dtype=head["dtype"])
    spectra = spectra.reshape(head["n"], head["m"])
    with open(os.path.join(directory, "labels.csv"), "r", encoding="utf-8") as fh:
        names = tuple(fh.readline().strip().split(","))
    labels = np.loadtxt(os.path.join(directory, "labels.csv"), delimiter=",", skiprows=1, ndmin=2)
    record = None
    norm_path = os.path.join(directory, "norm.json")
    if os.path.exists(norm_path):
        with open(norm_path, "r", encoding="utf-8") as fh:
            record = NormalizationRecord.from_json_dict(json.load(fh))
    return Dataset(spectra, labels, names, grid, spec), record
