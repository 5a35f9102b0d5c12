"""Batch-cultivation model for a PHA-producing organism.

Monod-type kinetics on two carbon substrates (fructose and canola oil) with
nitrogen-limited growth and nitrogen-inhibited polymer production.  Growth and
production both saturate in the respective substrate; polymer synthesis is
suppressed while urea is abundant and switches on as it depletes, which gives
the classic two-phase batch profile (growth first, polymer accumulation after
nitrogen runs out).  The polymer made from oil contains a fixed weight
fraction of HHx monomer; fructose yields pure HB.

Specific rates, with ``s`` ranging over the two substrates::

    mu_s = mu_max_s * S_s / (K_s + S_s) * N / (K_N + N)
    q_s  = q_max_s  * S_s / (K_s + S_s) * K_I / (K_I + N)

Mass balances::

    dX_r/dt   = (mu_f + mu_o) * X_r
    dN/dt     = -(mu_f + mu_o) * X_r / Y_xn
    dS_s/dt   = -mu_s * X_r / Y_xs - q_s * X_r / Y_ps
    dP_hb/dt  = (q_f + (1 - phi_hhx) * q_o) * X_r
    dP_hhx/dt = phi_hhx * q_o * X_r

Everything here is pure given an explicit ``numpy.random.Generator``; bulk
simulation derives per-cultivation substreams so results do not depend on
chunking or thread count.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .errors import NonFiniteError

STATE_FIELDS = ("S_f", "S_o", "N", "X_r", "P_hb", "P_hhx")

PARAM_FIELDS = (
    "mu_max_f", "mu_max_o", "K_f", "K_o", "K_N",
    "q_max_f", "q_max_o", "K_I",
    "Y_xf", "Y_xo", "Y_xn", "Y_pf", "Y_po",
    "phi_hhx",
)

# Rate constants may legitimately be zero (a substrate the organism does not
# use); half-saturation constants and yields sit in denominators.
_NONNEGATIVE_PARAMS = frozenset({"mu_max_f", "mu_max_o", "q_max_f", "q_max_o"})


@dataclass(frozen=True)
class CultivationParams:
    """Kinetic and stoichiometric parameters of the batch model.

    Units: specific growth rates 1/h, half-saturation constants g/L,
    specific production rates g/g/h, yields g/g, ``phi_hhx`` dimensionless
    (HHx weight fraction of the polymer produced from oil).
    """

    mu_max_f: float
    mu_max_o: float
    K_f: float
    K_o: float
    K_N: float
    q_max_f: float
    q_max_o: float
    K_I: float
    Y_xf: float
    Y_xo: float
    Y_xn: float
    Y_pf: float
    Y_po: float
    phi_hhx: float = 0.2

    def __post_init__(self):
        for name in PARAM_FIELDS:
            value = getattr(self, name)
            if not np.isfinite(value):
                raise ValueError(f"parameter {name} must be finite, got {value!r}")
            if name == "phi_hhx":
                if not 0.0 <= value <= 1.0:
                    raise ValueError(f"phi_hhx must lie in [0, 1], got {value!r}")
            elif name in _NONNEGATIVE_PARAMS:
                if value < 0.0:
                    raise ValueError(f"parameter {name} must be >= 0, got {value!r}")
            elif value <= 0.0:
                raise ValueError(f"parameter {name} must be > 0, got {value!r}")

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in PARAM_FIELDS], dtype=float)

    @classmethod
    def from_array(cls, values) -> "CultivationParams":
        values = np.asarray(values, dtype=float)
        if values.shape != (len(PARAM_FIELDS),):
            raise ValueError(f"expected {len(PARAM_FIELDS)} parameter values, got shape {values.shape}")
        return cls(**dict(zip(PARAM_FIELDS, values.tolist())))


@dataclass(frozen=True)
class CultivationState:
    """Concentrations in g/L. CDW is derived as ``X_r + P_hb + P_hhx``, never stored."""

    S_f: float
    S_o: float
    N: float
    X_r: float
    P_hb: float
    P_hhx: float

    def __post_init__(self):
        for name in STATE_FIELDS:
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0.0:
                raise ValueError(f"state field {name} must be finite and >= 0, got {value!r}")

    @property
    def cdw(self) -> float:
        return self.X_r + self.P_hb + self.P_hhx

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in STATE_FIELDS], dtype=float)

    @classmethod
    def from_array(cls, values) -> "CultivationState":
        values = np.asarray(values, dtype=float)
        return cls(**dict(zip(STATE_FIELDS, values.tolist())))


@dataclass(frozen=True)
class Trajectory:
    """Sampled states at strictly increasing times (hours)."""

    times: np.ndarray
    states: np.ndarray  # (len(times), 6), columns ordered as STATE_FIELDS

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        states = np.asarray(self.states, dtype=float)
        if times.ndim != 1 or states.shape != (times.size, len(STATE_FIELDS)):
            raise ValueError("trajectory shapes inconsistent")
        if times.size >= 2 and not np.all(np.diff(times) > 0):
            raise ValueError("trajectory times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)

    def column(self, field: str) -> np.ndarray:
        return self.states[:, STATE_FIELDS.index(field)]

    def state_at(self, index: int) -> CultivationState:
        return CultivationState.from_array(self.states[index])


@dataclass(frozen=True)
class PerturbationConfig:
    """Gamma multiplier configuration: w ~ Gamma(alpha, rate=beta), E[w] = alpha/beta."""

    alpha: float = 5.0
    beta: float = 5.0
    seed: int | None = None

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("gamma shape and rate must be positive")


def _rate_terms(s_f, s_o, n, x_r, p: CultivationParams):
    """Specific-rate building blocks; polymorphic over floats and arrays."""
    monod_f = s_f / (p.K_f + s_f)
    monod_o = s_o / (p.K_o + s_o)
    n_lim = n / (p.K_N + n)
    n_inhib = p.K_I / (p.K_I + n)
    mu_f = p.mu_max_f * monod_f * n_lim
    mu_o = p.mu_max_o * monod_o * n_lim
    q_f = p.q_max_f * monod_f * n_inhib
    q_o = p.q_max_o * monod_o * n_inhib
    return mu_f, mu_o, q_f, q_o


def _state_rates(s_f, s_o, n, x_r, p: CultivationParams):
    """Time derivatives of the six state components, same types in as out."""
    mu_f, mu_o, q_f, q_o = _rate_terms(s_f, s_o, n, x_r, p)
    mu = mu_f + mu_o
    d_xr = mu * x_r
    d_n = -mu * x_r / p.Y_xn
    d_sf = -mu_f * x_r / p.Y_xf - q_f * x_r / p.Y_pf
    d_so = -mu_o * x_r / p.Y_xo - q_o * x_r / p.Y_po
    d_phb = (q_f + (1.0 - p.phi_hhx) * q_o) * x_r
    d_phhx = p.phi_hhx * q_o * x_r
    return d_sf, d_so, d_n, d_xr, d_phb, d_phhx


def derivatives(state: CultivationState, params: CultivationParams) -> CultivationState:
    """Evaluate dy/dt at one state. Returned object holds rates, so its fields
    may be negative; bypass the state validator on purpose."""
    rates = _state_rates(state.S_f, state.S_o, state.N, state.X_r, params)
    out = object.__new__(CultivationState)
    for name, value in zip(STATE_FIELDS, rates):
        object.__setattr__(out, name, float(value))
    return out


def _resolve_steps(horizon: float, dt: float, output_interval: float):
    if horizon <= 0 or dt <= 0 or output_interval <= 0:
        raise ValueError("horizon, dt and output_interval must be positive")
    n_out = int(round(horizon / output_interval))
    if abs(n_out * output_interval - horizon) > 1e-9 * max(1.0, horizon):
        raise ValueError("horizon must be a multiple of output_interval")
    steps_per_out = max(1, int(round(output_interval / dt)))
    dt_eff = output_interval / steps_per_out
    return n_out, steps_per_out, dt_eff


def integrate_batch(
    y0: np.ndarray,
    params_table: np.ndarray,
    horizon: float = 72.0,
    dt: float = 0.01,
    output_interval: float = 3.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-step RK4 over many cultivations at once.

    Parameters
    ----------
    y0 : (n, 6) initial states, column order ``STATE_FIELDS``.
    params_table : (n, 14) per-cultivation parameter rows, column order
        ``PARAM_FIELDS``.  All cultivations march the same time grid.
    horizon, dt, output_interval : hours.  Sampling happens at every multiple
        of ``output_interval`` (including t=0); ``dt`` is rounded to divide
        the output interval exactly.

    Returns
    -------
    times : (n_out+1,) sampling times.
    states : (n, n_out+1, 6) sampled states, clamped at zero.

    Raises
    ------
    NonFiniteError
        If any cultivation produces NaN/Inf anywhere in the sampled output.
    """
    y0 = np.atleast_2d(np.asarray(y0, dtype=float))
    params_table = np.atleast_2d(np.asarray(params_table, dtype=float))
    n = y0.shape[0]
    if y0.shape[1] != len(STATE_FIELDS) or params_table.shape != (n, len(PARAM_FIELDS)):
        raise ValueError("y0 / params_table shapes inconsistent")

    n_out, steps_per_out, dt_eff = _resolve_steps(horizon, dt, output_interval)
    cols = {f: params_table[:, i] for i, f in enumerate(PARAM_FIELDS)}
    # A params "view" whose fields are length-n arrays; _state_rates is polymorphic.
    p = object.__new__(CultivationParams)
    for name, col in cols.items():
        object.__setattr__(p, name, col)

    times = output_interval * np.arange(n_out + 1)
    out = np.empty((n, n_out + 1, len(STATE_FIELDS)), dtype=float)
    y = [y0[:, i].copy() for i in range(len(STATE_FIELDS))]
    out[:, 0, :] = np.stack(y, axis=1)

    half = 0.5 * dt_eff
    sixth = dt_eff / 6.0
    for block in range(1, n_out + 1):
        for _ in range(steps_per_out):
            k1 = _state_rates(*y[:4], p)
            y2 = [y[i] + half * k1[i] for i in range(6)]
            k2 = _state_rates(*y2[:4], p)
            y3 = [y[i] + half * k2[i] for i in range(6)]
            k3 = _state_rates(*y3[:4], p)
            y4 = [y[i] + dt_eff * k3[i] for i in range(6)]
            k4 = _state_rates(*y4[:4], p)
            y = [
                np.maximum(y[i] + sixth * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]), 0.0)
                for i in range(6)
            ]
        out[:, block, :] = np.stack(y, axis=1)

    if not np.all(np.isfinite(out)):
        bad = np.where(~np.isfinite(out).all(axis=(1, 2)))[0]
        raise NonFiniteError(f"integration produced non-finite states for cultivations {bad[:8].tolist()}")
    return times, out


def integrate(
    y0: CultivationState,
    params: CultivationParams,
    horizon: float = 72.0,
    dt: float = 0.01,
    output_interval: float = 3.0,
) -> Trajectory:
    """Single-cultivation RK4 trajectory, sampled every ``output_interval`` hours."""
    n_out, steps_per_out, dt_eff = _resolve_steps(horizon, dt, output_interval)
    y = list(y0.to_array())
    samples = [tuple(y)]
    half = 0.5 * dt_eff
    sixth = dt_eff / 6.0
    for _ in range(n_out):
        for _ in range(steps_per_out):
            k1 = _state_rates(y[0], y[1], y[2], y[3], params)
            y2 = [y[i] + half * k1[i] for i in range(6)]
            k2 = _state_rates(y2[0], y2[1], y2[2], y2[3], params)
            y3 = [y[i] + half * k2[i] for i in range(6)]
            k3 = _state_rates(y3[0], y3[1], y3[2], y3[3], params)
            y4 = [y[i] + dt_eff * k3[i] for i in range(6)]
            k4 = _state_rates(y4[0], y4[1], y4[2], y4[3], params)
            y = [y[i] + sixth * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) for i in range(6)]
            # `0.0 if v < 0.0 else v` keeps NaN flowing into the finiteness check below.
            y = [0.0 if v < 0.0 else v for v in y]
        samples.append(tuple(y))

    states = np.asarray(samples, dtype=float)
    if not np.all(np.isfinite(states)):
        raise NonFiniteError("integration produced non-finite states")
    times = output_interval * np.arange(n_out + 1)
    return Trajectory(times=times, states=states)


def perturb(
    params: CultivationParams,
    config: PerturbationConfig,
    rng: np.random.Generator,
) -> CultivationParams:
    """Multiply every parameter component by an i.i.d. Gamma(alpha, rate=beta) factor.

    ``phi_hhx`` is clamped to 1.0 afterwards so the perturbed parameter set
    stays valid (the clamp is essentially never active at the defaults).
    """
    w = rng.gamma(shape=config.alpha, scale=1.0 / config.beta, size=len(PARAM_FIELDS))
    values = params.to_array() * w
    phi_idx = PARAM_FIELDS.index("phi_hhx")
    values[phi_idx] = min(values[phi_idx], 1.0)
    return CultivationParams.from_array(values)


def perturb_initial(
    y0: CultivationState,
    config: PerturbationConfig,
    rng: np.random.Generator,
) -> CultivationState:
    """Same gamma-multiplier mechanism applied to the initial conditions."""
    w = rng.gamma(shape=config.alpha, scale=1.0 / config.beta, size=len(STATE_FIELDS))
    return CultivationState.from_array(y0.to_array() * w)


def gamma_factors(config: PerturbationConfig, rng: np.random.Generator, size: int) -> np.ndarray:
    """Raw multiplier draws, exposed for calibration checks."""
    return rng.gamma(shape=config.alpha, scale=1.0 / config.beta, size=size)


# ---------------------------------------------------------------------------
# Parameter fitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FitOptions:
    """Controls for the least-squares parameter fit.

    ``method`` is "nelder-mead" (derivative-free simplex in log-parameter
    space, restarted until the relative objective decrease per restart falls
    below ``rel_tol``) or "least_squares" (finite-difference trust-region in
    log space).  ``max_iters`` caps total simplex iterations.
    """

    method: str = "nelder-mead"
    max_iters: int = 2000
    rel_tol: float = 1e-8
    dt: float = 0.01
    restart_chunk: int = 400

    def __post_init__(self):
        if self.method not in ("nelder-mead", "least_squares"):
            raise ValueError(f"unknown fit method {self.method!r}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass(frozen=True)
class FitResult:
    params: CultivationParams
    converged: bool
    objective: float
    n_iterations: int
    column_scales: dict[str, float]


def _observation_mask(states: np.ndarray) -> np.ndarray:
    return np.isfinite(np.asarray(states, dtype=float))


def fit_params(
    observations: Trajectory,
    initial_guess: CultivationParams,
    y0: CultivationState,
    options: FitOptions = FitOptions(),
) -> FitResult:
    """Least-squares fit of the model parameters to offline measurements.

    ``observations.states`` may contain NaN for unmeasured entries (canola
    oil typically is).  Each observed column is scaled by its maximum
    absolute observation before residuals are formed, so yields and
    concentrations contribute comparably.  Optimization runs in
    log-parameter space, which enforces positivity.

    Returns best-so-far parameters with ``converged=False`` rather than
    raising when the iteration budget runs out while the objective is still
    moving.
    """
    times = np.asarray(observations.times, dtype=float)
    obs = np.asarray(observations.states, dtype=float)
    if times.size < 2:
        raise ValueError("need at least two observed time points")
    if times[0] != 0.0:
        raise ValueError("observations must start at t=0 (initial state is taken as known)")
    mask = _observation_mask(obs)
    if not mask.any():
        raise ValueError("no observed values")

    scales = np.ones(len(STATE_FIELDS))
    for j in range(len(STATE_FIELDS)):
        col = obs[:, j][mask[:, j]]
        if col.size:
            m = float(np.max(np.abs(col)))
            scales[j] = m if m > 0 else 1.0

    horizon = float(times[-1])
    interval = float(np.min(np.diff(times)))
    # Observation times must land on the sampling grid.
    grid = np.round(times / interval).astype(int)
    if not np.allclose(grid * interval, times, atol=1e-9):
        raise ValueError("observation times must be multiples of their smallest spacing")

    y0_arr = y0.to_array()
    obs_scaled = obs / scales
    mask_flat = mask.ravel()
    target = obs_scaled.ravel()[mask_flat]

    def residuals(log_theta: np.ndarray) -> np.ndarray:
        params = CultivationParams.from_array(np.exp(log_theta))
        try:
            _, sim = integrate_batch(
                y0_arr[None, :], params.to_array()[None, :],
                horizon=horizon, dt=options.dt, output_interval=interval,
            )
        except NonFiniteError:
            return np.full(target.size, 1e6)
        sim_at_obs = sim[0][grid] / scales
        return sim_at_obs.ravel()[mask_flat] - target

    def objective(log_theta: np.ndarray) -> float:
        r = residuals(log_theta)
        return float(r @ r)

    x0 = np.log(initial_guess.to_array())

    if options.method == "least_squares":
        res = optimize.least_squares(
            residuals, x0, method="trf", jac="2-point",
            xtol=1e-12, ftol=1e-12, gtol=1e-12, max_nfev=200 * x0.size,
        )
        best_x, best_f = res.x, float(2.0 * res.cost)
        converged = bool(res.status > 0)
        n_iter = int(res.nfev)
    else:
        best_x = x0
        best_f = objective(x0)
        n_iter = 0
        converged = False
        while n_iter < options.max_iters:
            chunk = min(options.restart_chunk, options.max_iters - n_iter)
            res = optimize.minimize(
                objective, best_x, method="Nelder-Mead",
                options={"maxiter": chunk, "xatol": 1e-10, "fatol": 1e-14, "adaptive": True},
            )
            n_iter += int(res.nit)
            improved = best_f - float(res.fun)
            if res.fun < best_f:
                best_f = float(res.fun)
                best_x = res.x
            if improved <= options.rel_tol * max(best_f, 1e-300) or res.success:
                converged = True
                break
            if res.nit == 0:
                converged = True
                break

    fitted = CultivationParams.from_array(np.exp(best_x))
    return FitResult(
        params=fitted,
        converged=converged,
        objective=best_f,
        n_iterations=n_iter,
        column_scales=dict(zip(STATE_FIELDS, scales.tolist())),
    )
