"""Component spectra and spectrum synthesis.

A spectrum is linear in the constituent concentrations: with a per-substance
component matrix ``H`` (one non-negative row per labeled substance on a fixed
wavenumber grid), a concentration vector ``c`` produces ``c @ H`` plus
homoscedastic Gaussian channel noise.  Components either come from a committed
peak table (sums of Lorentzian lines) or are extracted from labeled spectra by
per-channel non-negative least squares.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.optimize import nnls as _nnls

from .errors import DimensionMismatchError, PeakOutOfRangeError, RankDeficientError

LABEL_NAMES = ("fructose", "urea", "biomass", "phb", "phhx")


@dataclass(frozen=True)
class WavenumberGrid:
    """Evenly spaced Raman-shift axis in 1/cm."""

    start: float = 400.0
    end: float = 3200.0
    m: int = 1024

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError("grid start must be below end")
        if self.m < 2:
            raise ValueError("grid needs at least two channels")

    @property
    def wavenumbers(self) -> np.ndarray:
        return np.linspace(self.start, self.end, self.m)


@dataclass(frozen=True)
class NoiseModel:
    """Homoscedastic Gaussian channel noise with standard deviation ``sigma``."""

    sigma: float = 0.01
    seed: int | None = None

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


@dataclass(frozen=True)
class Spectrum:
    intensities: np.ndarray
    grid: WavenumberGrid

    def __post_init__(self):
        arr = np.asarray(self.intensities, dtype=float)
        if arr.shape != (self.grid.m,):
            raise DimensionMismatchError(f"expected {self.grid.m} channels, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("spectrum intensities must be finite")
        object.__setattr__(self, "intensities", arr)


class ComponentLibrary:
    """Per-substance component spectra: a non-negative (k, m) matrix.

    Rows align with ``substances``.  Libraries built by
    :func:`generate_components` are max-normalized per row; libraries
    recovered by :func:`extract_components` keep the least-squares scale so
    that ``Y @ H`` reproduces the input spectra.
    """

    def __init__(self, grid: WavenumberGrid, components: np.ndarray, substances):
        components = np.asarray(components, dtype=float)
        substances = tuple(substances)
        if components.ndim != 2 or components.shape != (len(substances), grid.m):
            raise DimensionMismatchError("component matrix shape does not match substances/grid")
        if not np.all(np.isfinite(components)):
            raise ValueError("components must be finite")
        if np.any(components < 0):
            raise ValueError("components must be non-negative")
        self.grid = grid
        self.components = components
        self.substances = substances

    @property
    def k(self) -> int:
        return len(self.substances)

    def row(self, substance: str) -> np.ndarray:
        return self.components[self.substances.index(substance)]

    def normalized(self) -> "ComponentLibrary":
        """Copy with every row scaled to unit maximum."""
        peaks = self.components.max(axis=1, keepdims=True)
        if np.any(peaks <= 0):
            raise ValueError("cannot normalize an all-zero component row")
        return ComponentLibrary(self.grid, self.components / peaks, self.substances)

    def cosine_similarities(self) -> np.ndarray:
        """Pairwise row cosine similarity; the identifiability guard checks its max."""
        norms = np.linalg.norm(self.components, axis=1)
        sims = (self.components @ self.components.T) / np.outer(norms, norms)
        return sims

    def to_csv(self, path) -> None:
        header = "wavenumber_cm1," + ",".join(self.substances)
        table = np.column_stack([self.grid.wavenumbers, self.components.T])
        np.savetxt(path, table, delimiter=",", header=header, comments="", fmt="%.17g")

    @classmethod
    def from_csv(cls, path) -> "ComponentLibrary":
        with open(path, "r", encoding="utf-8") as fh:
            names = fh.readline().strip().split(",")
        if not names or names[0] != "wavenumber_cm1":
            raise ValueError(f"{path}: expected first column wavenumber_cm1")
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        wn = table[:, 0]
        grid = WavenumberGrid(start=float(wn[0]), end=float(wn[-1]), m=wn.size)
        return cls(grid, table[:, 1:].T, names[1:])


def lorentzian(x: np.ndarray, center: float, width: float, height: float) -> np.ndarray:
    """Lorentzian line with half-width ``width`` and peak value ``height``."""
    return height * width**2 / ((x - center) ** 2 + width**2)


def load_peak_table(path) -> dict[str, list[tuple[float, float, float]]]:
    """Read a substance -> [(center, width, height), ...] table from JSON."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    table = {}
    for name, peaks in raw["substances"].items():
        table[name] = [(float(c), float(w), float(h)) for c, w, h in peaks]
    return table


def generate_components(
    grid: WavenumberGrid,
    peak_table: dict[str, list[tuple[float, float, float]]],
    substances=LABEL_NAMES,
) -> ComponentLibrary:
    """Build a max-normalized library from explicit Lorentzian peak lists.

    Each substance needs 3-8 peaks given as (center 1/cm, width 1/cm, height).
    Raises :class:`PeakOutOfRangeError` for centers outside the grid and
    ``ValueError`` for empty peak lists (an all-zero component row would make
    the substance unidentifiable).
    """
    x = grid.wavenumbers
    rows = []
    for name in substances:
        peaks = peak_table.get(name, [])
        if not 3 <= len(peaks) <= 8:
            raise ValueError(f"substance {name!r} needs 3-8 peaks, got {len(peaks)}")
        row = np.zeros(grid.m)
        for center, width, height in peaks:
            if not grid.start <= center <= grid.end:
                raise PeakOutOfRangeError(
                    f"peak center {center} for {name!r} outside grid [{grid.start}, {grid.end}]"
                )
            if width <= 0 or height <= 0:
                raise ValueError(f"peak width/height must be positive for {name!r}")
            row += lorentzian(x, center, width, height)
        peak = row.max()
        if peak <= 0:
            raise ValueError(f"substance {name!r} produced an all-zero component row")
        rows.append(row / peak)
    return ComponentLibrary(grid, np.asarray(rows), substances)


def random_peak_table(
    rng: np.random.Generator,
    substances=LABEL_NAMES,
    n_peaks=(3, 8),
    grid: WavenumberGrid = WavenumberGrid(),
) -> dict[str, list[tuple[float, float, float]]]:
    """Draw a plausible peak table; handy for tests and demos."""
    lo, hi = n_peaks
    table = {}
    margin = 0.02 * (grid.end - grid.start)
    for name in substances:
        count = int(rng.integers(lo, hi + 1))
        centers = rng.uniform(grid.start + margin, grid.end - margin, size=count)
        widths = rng.uniform(6.0, 35.0, size=count)
        heights = rng.uniform(0.2, 1.0, size=count)
        table[name] = list(zip(centers.tolist(), widths.tolist(), heights.tolist()))
    return table


def extract_components(spectra: np.ndarray, labels: np.ndarray, grid: WavenumberGrid,
                       substances=LABEL_NAMES) -> tuple[ComponentLibrary, float]:
    """Recover component spectra from labeled mixtures by per-channel NNLS.

    Solves ``H = argmin_{H >= 0} ||X - Y H||_F^2`` one spectral channel at a
    time and reports the relative Frobenius residual ``||X - Y H|| / ||X||``.

    Raises :class:`RankDeficientError` when the label matrix has condition
    number above 1e10, and ``ValueError`` for negative inputs or n < k.
    """
    spectra = np.asarray(spectra, dtype=float)
    labels = np.asarray(labels, dtype=float)
    n, m = spectra.shape
    k = labels.shape[1]
    if labels.shape[0] != n:
        raise DimensionMismatchError("spectra and labels disagree on sample count")
    if m != grid.m:
        raise DimensionMismatchError("spectra width does not match grid")
    if n < k:
        raise ValueError("need at least as many samples as substances")
    if np.any(spectra < 0) or np.any(labels < 0):
        raise ValueError("spectra and labels must be non-negative")
    cond = np.linalg.cond(labels)
    if not np.isfinite(cond) or cond > 1e10:
        raise RankDeficientError(f"label matrix condition number {cond:.3g} exceeds 1e10")

    components = np.empty((k, m))
    for channel in range(m):
        components[:, channel], _ = _nnls(labels, spectra[:, channel])

    residual = float(np.linalg.norm(spectra - labels @ components))
    denom = float(np.linalg.norm(spectra))
    rel = residual / denom if denom > 0 else 0.0
    return ComponentLibrary(grid, components, substances), rel


def synthesize(
    concentrations: np.ndarray,
    library: ComponentLibrary,
    noise: NoiseModel,
    rng: np.random.Generator,
) -> Spectrum:
    """One noisy spectrum from one concentration vector: ``c @ H + eps``."""
    c = np.asarray(concentrations, dtype=float)
    if c.shape != (library.k,):
        raise DimensionMismatchError(f"expected {library.k} concentrations, got shape {c.shape}")
    if np.any(c < 0):
        raise ValueError("concentrations must be non-negative")
    clean = c @ library.components
    if noise.sigma > 0:
        clean = clean + rng.normal(0.0, noise.sigma, size=library.grid.m)
    return Spectrum(intensities=clean, grid=library.grid)


def synthesize_batch(
    concentrations: np.ndarray,
    library: ComponentLibrary,
    noise: NoiseModel,
    rng: np.random.Generator,
) -> np.ndarray:
    """Vectorized synthesis: (n, k) concentrations -> (n, m) noisy spectra."""
    c = np.asarray(concentrations, dtype=float)
    if c.ndim != 2 or c.shape[1] != library.k:
        raise DimensionMismatchError(f"expected (n, {library.k}) concentrations, got {c.shape}")
    clean = c @ library.components
    if noise.sigma > 0:
        clean = clean + rng.normal(0.0, noise.sigma, size=clean.shape)
    return clean
