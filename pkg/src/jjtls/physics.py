"""Forward models of flux-tunable JJ-array resonators and TLS coupling.

All frequencies (resonance, TLS transition, coupling g, decay gamma) are
stored as ordinary frequencies in GHz; angular frequencies are formed
internally where the coupled-mode expressions require them.  Transmission
is the dimensionless complex S21 of a hanger-coupled resonator.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from .constants import BOLTZMANN_K, GHZ, HBAR
from .errors import InvalidParameterError, ValidationError

# rng stream tags for counter-based seed splitting (seed, tag, index...)
RNG_MEASURE = 11
RNG_CAL_NOISE = 12
RNG_THRESHOLD = 13


def _require_finite(**values: float) -> None:
    for name, v in values.items():
        if not math.isfinite(v):
            raise InvalidParameterError(f"{name} must be finite, got {v!r}")


@dataclass(frozen=True)
class ResonatorParams:
    """Hanger-model parameter set.

    f_r       resonance frequency [GHz]
    Q_l       loaded quality factor
    Q_e_mag   magnitude of the external quality factor
    theta     impedance-mismatch phase [rad]
    A         off-resonant transmission amplitude
    alpha     background amplitude slope (per unit fractional detuning)
    phi_v     phase slope [rad/GHz]
    phi_0     phase offset [rad]
    """

    f_r: float
    Q_l: float
    Q_e_mag: float
    theta: float = 0.0
    A: float = 1.0
    alpha: float = 0.0
    phi_v: float = 0.0
    phi_0: float = 0.0

    @property
    def kappa(self) -> float:
        """Full linewidth f_r / Q_l [GHz]."""
        return self.f_r / self.Q_l

    @property
    def q_internal_inverse(self) -> float:
        """1/Q_i = 1/Q_l - cos(theta)/|Q_e|; must be >= 0 for a physical device."""
        return 1.0 / self.Q_l - math.cos(self.theta) / self.Q_e_mag

    def validate(self) -> "ResonatorParams":
        _require_finite(f_r=self.f_r, Q_l=self.Q_l, Q_e_mag=self.Q_e_mag,
                        theta=self.theta, A=self.A, alpha=self.alpha,
                        phi_v=self.phi_v, phi_0=self.phi_0)
        if self.f_r <= 0 or self.Q_l <= 0 or self.Q_e_mag <= 0:
            raise InvalidParameterError(
                f"f_r, Q_l, Q_e_mag must be positive (got {self.f_r}, {self.Q_l}, {self.Q_e_mag})")
        if self.q_internal_inverse < 0:
            raise InvalidParameterError(
                f"unphysical resonator: 1/Q_i = {self.q_internal_inverse:.3e} < 0")
        return self

    def as_array(self) -> np.ndarray:
        return np.array([self.f_r, self.Q_l, self.Q_e_mag, self.theta,
                         self.A, self.alpha, self.phi_v, self.phi_0])

    @classmethod
    def from_array(cls, p: np.ndarray) -> "ResonatorParams":
        return cls(*(float(v) for v in p))


PARAM_NAMES = ("f_r", "Q_l", "Q_e_mag", "theta", "A", "alpha", "phi_v", "phi_0")


@dataclass(frozen=True)
class TLSDefect:
    """A single two-level system.

    f_tls        transition frequency [GHz]
    g            coupling strength [GHz]
    gamma        decay rate [GHz]
    temperature  bath temperature [K]
    """

    f_tls: float
    g: float
    gamma: float
    temperature: float = 0.010

    def validate(self) -> "TLSDefect":
        _require_finite(f_tls=self.f_tls, g=self.g, gamma=self.gamma,
                        temperature=self.temperature)
        if self.g < 0:
            raise InvalidParameterError(f"coupling g must be >= 0, got {self.g}")
        if self.gamma <= 0 or self.temperature <= 0 or self.f_tls <= 0:
            raise InvalidParameterError(
                f"f_tls, gamma, temperature must be positive "
                f"(got {self.f_tls}, {self.gamma}, {self.temperature})")
        return self

    def cooperativity(self, params: ResonatorParams) -> float:
        """C = 4 g^2 / (kappa * gamma)."""
        return 4.0 * self.g**2 / (params.kappa * self.gamma)


@dataclass(frozen=True)
class FluxConfig:
    """Flux-to-frequency map of the JJ-array resonator.

    f_bare            zero-detuning resonance frequency [GHz]
    n_islands         number of superconducting islands in the array
    m_trapped         trapped flux quanta in the loop
    flux_per_current  external flux per unit bias current [Phi_0 / mA]
    """

    f_bare: float
    n_islands: int
    m_trapped: int = 0
    flux_per_current: float = 1.0

    def validate(self) -> "FluxConfig":
        _require_finite(f_bare=self.f_bare, flux_per_current=self.flux_per_current)
        if self.f_bare <= 0:
            raise InvalidParameterError(f"f_bare must be positive, got {self.f_bare}")
        if int(self.n_islands) < 1:
            raise InvalidParameterError(f"n_islands must be >= 1, got {self.n_islands}")
        return self


def thermal_population(f_tls: float, temperature: float, *,
                       convention: str = "full") -> float:
    """Thermal two-level polarization <sigma_z>.

    The default ("full") convention returns tanh(h f / k_B T); the
    alternative ("half") convention returns tanh(h f / 2 k_B T).
    f_tls in GHz, temperature in K.
    """
    if not (temperature > 0) or not math.isfinite(temperature):
        raise InvalidParameterError(f"temperature must be positive, got {temperature}")
    if convention not in ("full", "half"):
        raise ValidationError(f"unknown population convention {convention!r}")
    ratio = HBAR * 2.0 * math.pi * f_tls * GHZ / (BOLTZMANN_K * temperature)
    if convention == "half":
        ratio *= 0.5
    return math.tanh(ratio)


def hanger_s21(params: ResonatorParams, f) -> np.ndarray | complex:
    """Complex hanger transmission at frequency f [GHz].

    S21 = A (1 + alpha x) (1 - (Q_l/|Q_e|) e^{i theta} / (1 + 2 i Q_l x))
          * exp(i (phi_v f + phi_0)),   x = (f - f_r) / f_r
    """
    params.validate()
    farr = np.asarray(f, dtype=float)
    x = (farr - params.f_r) / params.f_r
    bg = params.A * (1.0 + params.alpha * x)
    dip = 1.0 - (params.Q_l / params.Q_e_mag) * np.exp(1j * params.theta) \
        / (1.0 + 2j * params.Q_l * x)
    out = bg * dip * np.exp(1j * (params.phi_v * farr + params.phi_0))
    return out if farr.ndim else complex(out)


def tls_s21(params: ResonatorParams, tls: TLSDefect, f, *,
            population_convention: str = "full") -> np.ndarray | complex:
    """Hanger transmission with a coupled TLS.

    The resonance factor is
        1 - (omega_r / Q_e) / 2 / (i (omega - omega_r) + omega_r / 2 Q_l
                                   + i g chi(omega))
        chi(omega) = g <sigma_z> / (omega_tls - omega + i <sigma_z> gamma / 2)
    with Q_e = |Q_e| exp(-i theta), evaluated in angular frequency, and the
    same background amplitude and phase factors as :func:`hanger_s21`.
    """
    params.validate()
    tls.validate()
    farr = np.asarray(f, dtype=float)
    w = 2.0 * math.pi * farr
    w_r = 2.0 * math.pi * params.f_r
    w_t = 2.0 * math.pi * tls.f_tls
    g_w = 2.0 * math.pi * tls.g
    gamma_w = 2.0 * math.pi * tls.gamma
    sz = thermal_population(tls.f_tls, tls.temperature,
                            convention=population_convention)

    chi = g_w * sz / (w_t - w + 0.5j * sz * gamma_w)
    inv_qe = np.exp(1j * params.theta) / params.Q_e_mag   # 1 / Q_e
    dip = 1.0 - 0.5 * w_r * inv_qe / (1j * (w - w_r) + w_r / (2.0 * params.Q_l)
                                      + 1j * g_w * chi)

    x = (farr - params.f_r) / params.f_r
    bg = params.A * (1.0 + params.alpha * x)
    out = bg * dip * np.exp(1j * (params.phi_v * farr + params.phi_0))
    return out if farr.ndim else complex(out)


def flux_to_freq(cfg: FluxConfig, flux, *, quadratic: bool = False):
    """Resonance frequency at external flux [units of Phi_0].

    Exact form: f_bare / sqrt(1 + (1/2) u^2) with
    u = (2 pi / N) (flux - m).  With quadratic=True the small-detuning
    approximation f_bare (1 - (pi/N)^2 (flux - m)^2) is used instead.
    """
    cfg.validate()
    phi = np.asarray(flux, dtype=float)
    delta = phi - cfg.m_trapped
    if quadratic:
        out = cfg.f_bare * (1.0 - (math.pi / cfg.n_islands) ** 2 * delta**2)
    else:
        u = (2.0 * math.pi / cfg.n_islands) * delta
        out = cfg.f_bare / np.sqrt(1.0 + 0.5 * u**2)
    return out if phi.ndim else float(out)


@dataclass(frozen=True)
class Trace:
    """One complex transmission sweep at a fixed bias current."""

    freqs: np.ndarray        # strictly increasing, GHz
    s21: np.ndarray          # complex transmission samples
    bias_current: float = 0.0  # mA

    def __post_init__(self):
        freqs = np.asarray(self.freqs, dtype=float)
        s21 = np.asarray(self.s21, dtype=complex)
        object.__setattr__(self, "freqs", freqs)
        object.__setattr__(self, "s21", s21)
        if freqs.ndim != 1 or freqs.size != s21.size:
            raise ValidationError("freqs and s21 must be 1-d arrays of equal length")
        if freqs.size < 16:
            raise ValidationError(f"trace needs >= 16 points, got {freqs.size}")
        if not np.all(np.diff(freqs) > 0):
            raise ValidationError("frequency grid must be strictly increasing")

    def __len__(self) -> int:
        return int(self.freqs.size)


@dataclass(frozen=True)
class Scenario:
    """Declarative description of a synthetic measurement campaign."""

    resonator: ResonatorParams
    flux: FluxConfig
    defects: tuple[TLSDefect, ...] = ()
    noise_sigma: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "defects", tuple(self.defects))

    def validate(self) -> "Scenario":
        self.resonator.validate()
        self.flux.validate()
        if self.noise_sigma < 0 or not math.isfinite(self.noise_sigma):
            raise InvalidParameterError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        kappa = self.resonator.kappa
        freqs = sorted(d.validate().f_tls for d in self.defects)
        for lo, hi in zip(freqs, freqs[1:]):
            if hi - lo < kappa / 4.0:
                raise InvalidParameterError(
                    f"defects at {lo} and {hi} GHz collide within kappa/4 = {kappa / 4:.3e}")
        return self


def _nearest_defect(params: ResonatorParams, defects) -> TLSDefect | None:
    """The defect nearest in frequency to the resonance, within 10 kappa."""
    best = None
    best_det = 10.0 * params.kappa
    for d in defects:
        det = abs(d.f_tls - params.f_r)
        if det <= best_det:
            best, best_det = d, det
    return best


def synth_trace(params: ResonatorParams, defects, freq_grid, noise_sigma: float,
                rng: np.random.Generator, *, bias_current: float = 0.0) -> Trace:
    """Noisy synthetic trace on a frequency grid.

    The model is the single-TLS response for the defect nearest to the
    resonance (within 10 kappa), or the bare hanger if none qualifies.
    Gaussian noise of std noise_sigma is added independently to both
    quadratures; the draw is deterministic for a given generator state.
    """
    grid = np.asarray(freq_grid, dtype=float)
    if grid.size == 0:
        raise ValidationError("frequency grid is empty")
    tls = _nearest_defect(params, defects)
    if tls is None:
        model = hanger_s21(params, grid)
    else:
        model = tls_s21(params, tls, grid)
    if noise_sigma > 0:
        noise = rng.normal(0.0, noise_sigma, grid.size) \
            + 1j * rng.normal(0.0, noise_sigma, grid.size)
        model = model + noise
    return Trace(freqs=grid, s21=model, bias_current=bias_current)


def _bias_bits(bias_current: float) -> int:
    # stable 64-bit key for a float bias value, used for seed splitting
    return struct.unpack("<Q", struct.pack("<d", float(bias_current)))[0]


def virtual_measure(scenario: Scenario, bias_current: float, f_center: float | None,
                    span: float, n_points: int) -> Trace:
    """Emulate one VNA sweep of the scenario resonator at a bias point.

    The resonance is tuned by the flux map; defects within span/2 of the
    tuned resonance are candidates for coupling.  f_center=None centers
    the sweep on the tuned resonance.  Deterministic per (seed, bias).
    """
    scenario.validate()
    if span <= 0:
        raise ValidationError(f"span must be positive, got {span}")
    if n_points < 16:
        raise ValidationError(f"n_points must be >= 16, got {n_points}")
    f0 = flux_to_freq(scenario.flux, bias_current * scenario.flux.flux_per_current)
    params = replace(scenario.resonator, f_r=f0)
    if f_center is None:
        f_center = f0
    grid = np.linspace(f_center - span / 2.0, f_center + span / 2.0, int(n_points))
    nearby = [d for d in scenario.defects if abs(d.f_tls - f0) <= span / 2.0]
    rng = np.random.default_rng([scenario.rng_seed, RNG_MEASURE, _bias_bits(bias_current)])
    return synth_trace(params, nearby, grid, scenario.noise_sigma, rng,
                       bias_current=bias_current)


def scenario_instrument(scenario: Scenario):
    """Closure with the call signature expected by the sweep orchestrator."""
    scenario.validate()

    def instrument(bias_current: float, f_center: float | None,
                   span: float, n_points: int) -> Trace:
        return virtual_measure(scenario, bias_current, f_center, span, n_points)

    return instrument
