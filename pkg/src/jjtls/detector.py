"""Curve-following sweeps, detector calibration, and TLS peak detection.

The detection chain: follow the resonance across bias points, fit every
trace, exclude collision and past-maximum regions, re-express the residual
metric on a uniform frequency-shift axis (units of the linewidth kappa),
and flag five-point peak shapes above a calibrated threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import brentq
from scipy.signal import savgol_filter
from scipy.special import ndtr

from .errors import (CalibrationError, ConvergenceError, DegenerateDataError,
                     ValidationError)
from .fitting import FitResult, fit_flux_parabola, fit_hanger, residual_metric
from .physics import (RNG_CAL_NOISE, RNG_THRESHOLD, ResonatorParams, Trace,
                      TLSDefect, hanger_s21, tls_s21)

EXCLUSION_REASONS = ("collision", "past-maximum", "manual")
GRID_STEP = 0.25          # residual-series spacing, units of kappa
MERGE_RADIUS = 1.0        # event merge radius, units of kappa


@dataclass(frozen=True)
class Exclusion:
    start: int
    stop: int   # inclusive bias index
    reason: str

    def validate(self, n: int) -> "Exclusion":
        if self.reason not in EXCLUSION_REASONS:
            raise ValidationError(f"unknown exclusion reason {self.reason!r}")
        if not (0 <= self.start <= self.stop < n):
            raise ValidationError(
                f"exclusion [{self.start}, {self.stop}] outside sweep of {n} steps")
        return self


@dataclass(frozen=True)
class SweepDataset:
    """Ordered traces with their fits and exclusion bookkeeping."""

    traces: tuple[Trace, ...]
    fits: tuple[FitResult, ...]
    exclusions: tuple[Exclusion, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "traces", tuple(self.traces))
        object.__setattr__(self, "fits", tuple(self.fits))
        object.__setattr__(self, "exclusions", _merge_exclusions(self.exclusions))
        if len(self.traces) != len(self.fits):
            raise ValidationError("one fit per trace required")
        for ex in self.exclusions:
            ex.validate(len(self.traces))

    def __len__(self) -> int:
        return len(self.traces)

    def excluded_mask(self) -> np.ndarray:
        mask = np.zeros(len(self), dtype=bool)
        for ex in self.exclusions:
            mask[ex.start:ex.stop + 1] = True
        return mask

    def included_indices(self) -> np.ndarray:
        mask = ~self.excluded_mask()
        mask &= np.array([f.converged for f in self.fits], dtype=bool)
        return np.flatnonzero(mask)

    @property
    def bias_currents(self) -> np.ndarray:
        return np.array([t.bias_current for t in self.traces])

    @property
    def f0s(self) -> np.ndarray:
        return np.array([f.params.f_r for f in self.fits])

    @property
    def residuals(self) -> np.ndarray:
        return np.array([f.residual_metric for f in self.fits])

    def median_kappa(self) -> float:
        idx = self.included_indices()
        if idx.size == 0:
            raise DegenerateDataError("no included fits in sweep")
        return float(np.median([self.fits[i].kappa for i in idx]))


def _merge_exclusions(exclusions) -> tuple[Exclusion, ...]:
    """Canonical form: sorted, non-overlapping, same-reason runs merged."""
    items = sorted(exclusions, key=lambda e: (e.start, e.stop))
    merged: list[Exclusion] = []
    for ex in items:
        if merged and ex.start <= merged[-1].stop + 1 and ex.reason == merged[-1].reason:
            merged[-1] = Exclusion(merged[-1].start, max(merged[-1].stop, ex.stop),
                                   ex.reason)
        elif merged and ex.start <= merged[-1].stop:
            # different reasons overlapping: clip the later one
            if ex.stop > merged[-1].stop:
                merged.append(Exclusion(merged[-1].stop + 1, ex.stop, ex.reason))
        else:
            merged.append(ex)
    return tuple(merged)


@dataclass(frozen=True)
class ResidualSeries:
    """Residual metric on a uniform kappa/4 frequency-shift axis."""

    shift_axis: np.ndarray    # cumulative |df0| in units of kappa
    residuals: np.ndarray
    kappa: float
    freq_at: np.ndarray       # interpolated resonance frequency, GHz
    bias_at: np.ndarray       # interpolated bias current, mA
    valid: np.ndarray         # False where the grid crosses an excluded gap

    def __post_init__(self):
        d = np.diff(self.shift_axis)
        if d.size and (np.any(d <= 0) or np.max(np.abs(d - GRID_STEP)) > 1e-9):
            raise ValidationError("shift axis must be uniform at kappa/4")
        if np.any(self.residuals < 0):
            raise ValidationError("residual metric values must be >= 0")

    def __len__(self) -> int:
        return int(self.shift_axis.size)


@dataclass(frozen=True)
class DetectorCalibration:
    """Threshold and error rates calibrated from synthetic ensembles."""

    threshold: float
    fp: float
    fn: float
    noise_sigma: float
    gauss_noise: tuple[float, float]   # (mean, std) of noise-only residuals
    gauss_tls: tuple[float, float]     # (mean, std) of TLS-coupled residuals

    def __post_init__(self):
        if not (0.0 <= self.fp <= 1.0 and 0.0 <= self.fn <= 1.0):
            raise ValidationError("fp and fn must lie in [0, 1]")
        if not (self.gauss_noise[0] < self.threshold < self.gauss_tls[0]):
            raise ValidationError("threshold must lie between the two residual means")


@dataclass(frozen=True)
class DetectionEvent:
    shift_position: float   # kappa units
    peak_residual: float
    bias_current: float     # mA
    frequency: float        # GHz


def curve_follow(instrument, bias_plan, span: float, n_points: int,
                 f_start: float | None = None) -> SweepDataset:
    """Measure-fit-recenter sweep over a bias plan.

    ``instrument(bias, f_center, span, n_points) -> Trace``; an f_center of
    None asks the instrument to center itself (virtual instruments only).
    A failed fit marks that step excluded and the sweep continues from the
    last good center.
    """
    plan = list(bias_plan)
    if not plan:
        raise ValidationError("bias plan is empty")
    traces: list[Trace] = []
    fits: list[FitResult] = []
    failed: list[int] = []
    center = f_start
    last_params: ResonatorParams | None = None
    for k, bias in enumerate(plan):
        trace = instrument(bias, center, span, n_points)
        try:
            fit = fit_hanger(trace)
            if not fit.converged and last_params is not None:
                retry = fit_hanger(trace, init=replace(last_params, f_r=center or
                                                       last_params.f_r))
                if retry.converged:
                    fit = retry
        except Exception:
            fit = None
            if last_params is not None:
                try:
                    fit = fit_hanger(trace, init=last_params)
                except Exception:
                    fit = None
        if fit is None or not fit.converged:
            failed.append(k)
            if fit is None:
                fit = FitResult(params=last_params or ResonatorParams(1.0, 1.0, 2.0),
                                residual_metric=float("inf"), converged=False,
                                param_uncertainties={})
        else:
            center = fit.params.f_r
            last_params = fit.params
        traces.append(trace)
        fits.append(fit)
    exclusions = tuple(Exclusion(i, i, "manual") for i in failed)
    return SweepDataset(traces=tuple(traces), fits=tuple(fits), exclusions=exclusions)


def apply_exclusions(sweep: SweepDataset, manual=()) -> SweepDataset:
    """Add manual collision intervals and the automatic past-maximum cut.

    Tracking a resonator through its frequency maximum would count every
    TLS twice, so all bias indices after the maximum fitted f0 are dropped.
    """
    n = len(sweep)
    extra = [Exclusion(int(a), int(b), "collision").validate(n) for a, b in manual]
    candidate = SweepDataset(sweep.traces, sweep.fits, sweep.exclusions + tuple(extra))

    idx = candidate.included_indices()
    if idx.size >= 5:
        # only an interior maximum means the sweep crossed the flux-map top
        # and would revisit the same frequencies; median smoothing plus a
        # prominence floor keep single-fit noise blips from firing the cut
        from scipy.ndimage import median_filter

        f0 = median_filter(candidate.f0s[idx], size=5, mode="nearest")
        p = int(np.argmax(f0))
        step = float(np.median(np.abs(np.diff(f0)))) if idx.size > 1 else 0.0
        floor = 5.0 * step
        if (0 < p < idx.size - 1
                and f0[p] - f0[0] > floor and f0[p] - f0[-1] > floor):
            extra.append(Exclusion(int(idx[p]) + 1, n - 1, "past-maximum"))
    return SweepDataset(sweep.traces, sweep.fits, sweep.exclusions + tuple(extra))


def normalize_axis(sweep: SweepDataset, kappa: float | None = None) -> ResidualSeries:
    """Residual metric vs cumulative frequency shift in kappa units.

    The bias-to-frequency conversion uses a quadratic fit of f0 vs current
    so fixed current steps map onto physical frequency shifts; the metric
    is then linearly interpolated onto a uniform kappa/4 grid.
    """
    idx = sweep.included_indices()
    if idx.size < 3:
        raise ValidationError(f"need >= 3 included fits, got {idx.size}")
    if kappa is None:
        kappa = sweep.median_kappa()

    bias = sweep.bias_currents[idx]
    f0 = sweep.f0s[idx]
    res = sweep.residuals[idx]
    parab = fit_flux_parabola(bias, f0)
    f_model = np.asarray(parab(bias))
    steps = np.abs(np.diff(f_model)) / kappa
    cum = np.concatenate([[0.0], np.cumsum(steps)])
    total = cum[-1]
    if total <= GRID_STEP:
        raise DegenerateDataError(
            f"total frequency shift {total:.3g} kappa is too small to grid")

    # keep the interpolation abscissa strictly increasing
    keep = np.concatenate([[True], np.diff(cum) > 0])
    cum_k, res_k = cum[keep], res[keep]
    f_k, bias_k, idx_k = f_model[keep], bias[keep], idx[keep]

    n_grid = int(math.floor(total / GRID_STEP + 1e-9)) + 1
    grid = np.arange(n_grid) * GRID_STEP
    series = np.interp(grid, cum_k, res_k)
    freq_at = np.interp(grid, cum_k, f_k)
    bias_at = np.interp(grid, cum_k, bias_k)

    # a grid point is valid if it coincides with a measured sample or its
    # bracketing samples are adjacent in the original sweep (no gap between)
    pos = np.searchsorted(cum_k, grid, side="right") - 1
    pos = np.clip(pos, 0, len(cum_k) - 2)
    adjacent = (idx_k[pos + 1] - idx_k[pos]) == 1
    at_node = np.abs(grid - cum_k[pos]) <= 1e-9
    valid = adjacent | at_node
    return ResidualSeries(shift_axis=grid, residuals=np.maximum(series, 0.0),
                          kappa=kappa, freq_at=freq_at, bias_at=bias_at, valid=valid)


def calibrate_noise(baseline_trace: Trace, fit: FitResult, *,
                    ensemble: int = 64, tolerance: float = 0.01,
                    max_iter: int = 100, seed: int = 0) -> float:
    """Noise sigma that reproduces the measured baseline residual metric.

    Synthetic traces are generated from the fitted parameters, refit, and
    their median residual metric compared against the measured one; sigma
    is bisected (common random numbers, so the objective is monotone)
    until agreement within ``tolerance`` (relative).
    """
    measured = residual_metric(baseline_trace, fit.params)
    if measured < 1e-18:
        return 0.0
    grid = baseline_trace.freqs
    model = hanger_s21(fit.params, grid)
    rng = np.random.default_rng([seed, RNG_CAL_NOISE])
    unit = rng.standard_normal((ensemble, grid.size)) \
        + 1j * rng.standard_normal((ensemble, grid.size))

    def median_metric(sigma: float) -> float:
        vals = []
        for k in range(ensemble):
            tr = Trace(freqs=grid, s21=model + sigma * unit[k],
                       bias_current=baseline_trace.bias_current)
            refit = fit_hanger(tr, init=fit.params)
            vals.append(residual_metric(tr, refit.params))
        return float(np.median(vals))

    mean_mag = float(np.mean(np.abs(baseline_trace.s21)))
    sigma = math.sqrt(measured * mean_mag / 2.0)
    lo, hi = sigma / 4.0, sigma * 4.0
    for _ in range(20):
        if median_metric(lo) <= measured:
            break
        lo /= 4.0
    for _ in range(20):
        if median_metric(hi) >= measured:
            break
        hi *= 4.0

    for _ in range(max_iter):
        mid = math.sqrt(lo * hi)
        got = median_metric(mid)
        if abs(got - measured) / measured <= tolerance:
            return mid
        if got < measured:
            lo = mid
        else:
            hi = mid
    raise ConvergenceError(
        f"noise calibration did not reach {tolerance:.0%} agreement "
        f"in {max_iter} iterations")


def critical_tls(params: ResonatorParams, *, temperature: float = 0.010) -> TLSDefect:
    """Minimally detectable TLS: g = kappa/2, gamma = kappa, detuning kappa/2."""
    kappa = params.kappa
    return TLSDefect(f_tls=params.f_r + kappa / 2.0, g=kappa / 2.0,
                     gamma=kappa, temperature=temperature)


def _gaussian_intersection(mu1: float, s1: float, mu2: float, s2: float) -> float:
    """Crossing point of two normal densities between their means."""
    s1 = max(s1, 1e-300)
    s2 = max(s2, 1e-300)

    def diff(x: float) -> float:
        return (-0.5 * ((x - mu1) / s1) ** 2 - math.log(s1)
                + 0.5 * ((x - mu2) / s2) ** 2 + math.log(s2))

    lo, hi = mu1, mu2
    flo, fhi = diff(lo), diff(hi)
    if not (flo > 0 > fhi):
        raise CalibrationError("residual distributions do not cross between means")
    return float(brentq(diff, lo, hi, xtol=1e-16, rtol=1e-14))


def build_threshold(params: ResonatorParams, noise_sigma: float,
                    ensemble_size: int = 5000, *, seed: int = 0,
                    span_kappas: float = 10.0, n_points: int = 201,
                    temperature: float = 0.010) -> DetectorCalibration:
    """Calibrate the detection threshold against the critical TLS.

    Simulates ``ensemble_size`` noisy traces without coupling and the same
    number with the minimally detectable TLS (cooperativity 1), fits the
    hanger model to each, and fits Gaussians to the two residual-metric
    distributions.  The threshold is the density crossing between the two
    means; fp and fn are the corresponding tail masses.
    """
    params.validate()
    if ensemble_size < 1000:
        raise ValidationError(f"ensemble_size must be >= 1000, got {ensemble_size}")
    if noise_sigma < 0:
        raise ValidationError("noise_sigma must be >= 0")
    kappa = params.kappa
    grid = np.linspace(params.f_r - span_kappas / 2 * kappa,
                       params.f_r + span_kappas / 2 * kappa, n_points)
    tls = critical_tls(params, temperature=temperature)

    base_model = hanger_s21(params, grid)
    tls_model = tls_s21(params, tls, grid)
    rng = np.random.default_rng([seed, RNG_THRESHOLD])

    def ensemble_metrics(model: np.ndarray) -> np.ndarray:
        out = np.empty(ensemble_size)
        for k in range(ensemble_size):
            noisy = model + noise_sigma * (rng.standard_normal(grid.size)
                                           + 1j * rng.standard_normal(grid.size))
            tr = Trace(freqs=grid, s21=noisy)
            refit = fit_hanger(tr, init=params)
            out[k] = residual_metric(tr, refit.params)
        return out

    m_noise = ensemble_metrics(base_model)
    m_tls = ensemble_metrics(tls_model)

    mu1, s1 = float(np.mean(m_noise)), float(np.std(m_noise))
    mu2, s2 = float(np.mean(m_tls)), float(np.std(m_tls))
    if not mu2 > mu1:
        raise CalibrationError(
            f"TLS residual mean {mu2:.3e} does not exceed noise mean {mu1:.3e}")
    threshold = _gaussian_intersection(mu1, s1, mu2, s2)
    fp = float(1.0 - ndtr((threshold - mu1) / s1)) if s1 > 0 else 0.0
    fn = float(ndtr((threshold - mu2) / s2)) if s2 > 0 else 0.0
    return DetectorCalibration(threshold=threshold, fp=fp, fn=fn,
                               noise_sigma=noise_sigma,
                               gauss_noise=(mu1, s1), gauss_tls=(mu2, s2))


def find_peaks(series: ResidualSeries, calib: DetectorCalibration) -> list[DetectionEvent]:
    """Five-point peak detection on the smoothed residual series.

    The series is smoothed with a width-5, order-1 Savitzky-Golay filter
    (one linewidth); an event requires the center above threshold and both
    flanks strictly decreasing outward.  Events closer than one linewidth
    merge, keeping the higher peak.
    """
    n = len(series)
    if n < 5:
        raise ValidationError(f"series shorter than 5 points ({n})")
    smooth = savgol_filter(series.residuals, 5, 1)
    thr = calib.threshold
    candidates: list[int] = []
    for i in range(2, n - 2):
        if not series.valid[i - 2:i + 3].all():
            continue
        window = smooth[i - 2:i + 3]
        if (window[2] > thr
                and window[2] > window[1] > window[0]
                and window[2] > window[3] > window[4]):
            candidates.append(i)

    # non-maximum suppression within one linewidth
    order = sorted(candidates, key=lambda i: -smooth[i])
    kept: list[int] = []
    for i in order:
        if all(abs(series.shift_axis[i] - series.shift_axis[j]) >= MERGE_RADIUS
               for j in kept):
            kept.append(i)
    kept.sort()
    return [DetectionEvent(shift_position=float(series.shift_axis[i]),
                           peak_residual=float(smooth[i]),
                           bias_current=float(series.bias_at[i]),
                           frequency=float(series.freq_at[i]))
            for i in kept]
