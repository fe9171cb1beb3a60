"""Pipeline stages behind the CLI: simulate, detect, infer, correlate, report.

Every stage reads declared files, writes its outputs atomically into the
run directory, and finishes with a checksummed manifest.  All synthetic
randomness derives from the single root seed in the config.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .detector import (apply_exclusions, build_threshold, calibrate_noise,
                       curve_follow, find_peaks, normalize_axis)
from .errors import CalibrationError, SchemaError
from .fileio import (SCHEMAS, atomic_write_text,
                     calibration_from_dict, calibration_to_dict, events_to_csv,
                     fits_to_csv, fnum, load_scenario, read_densities_csv,
                     read_json, read_morphology_csv, scenario_to_dict,
                     series_to_csv, sweep_plan, trace_from_csv, trace_to_csv,
                     write_json)
from .fitting import fit_hanger, residual_metric
from .inference import (InferenceInput, aggregate_device, density,
                        marginal_likelihood, posterior, true_rates)
from .manifest import write_manifest
from .physics import scenario_instrument
from .stats import (cluster_features, gamma_fit, kruskal_wallis, pearson,
                    ridge_permutation_importance, shapiro_wilk, spearman)
from .svgplot import Panel, render


def load_pipeline_config(path: Path) -> dict:
    cfg = read_json(path)
    cfg["_dir"] = str(Path(path).resolve().parent)
    for key in ("scenario", "sweep", "inference"):
        if key not in cfg:
            raise SchemaError(f"{path}: missing required section {key!r}")
    if "seed" not in cfg:
        raise SchemaError(f"{path}: a root seed is mandatory for synthetic runs")
    return cfg


def _config_for_hash(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if not k.startswith("_")}


def _resolve(cfg: dict, maybe_path: str) -> Path:
    p = Path(maybe_path)
    return p if p.is_absolute() else Path(cfg["_dir"]) / p


def cmd_simulate(cfg: dict, outdir: Path) -> dict:
    """Drive the virtual instrument along the bias plan; write trace CSVs."""
    t0 = time.perf_counter()
    outdir = Path(outdir)
    scenario = load_scenario(_resolve(cfg, cfg["scenario"]))
    scenario = replace(scenario, rng_seed=int(cfg["seed"]))
    sweep_cfg = cfg["sweep"]
    plan = sweep_plan(sweep_cfg)
    span = float(sweep_cfg.get("span", 10 * scenario.resonator.kappa))
    n_points = int(sweep_cfg.get("n_points", 201))

    sweep = curve_follow(scenario_instrument(scenario), plan, span, n_points)
    trace_dir = outdir / "traces"
    files = []
    for k, trace in enumerate(sweep.traces):
        path = trace_dir / f"trace_{k:04d}.csv"
        atomic_write_text(path, trace_to_csv(trace))
        files.append(path)
    echo = outdir / "scenario_used.json"
    write_json(echo, scenario_to_dict(scenario))
    files.append(echo)
    write_manifest(outdir, "simulate", _config_for_hash(cfg), files,
                   timings={"seconds": time.perf_counter() - t0})
    return {"n_traces": len(sweep.traces), "outdir": str(outdir)}


def _fit_one(path_str: str):
    trace = trace_from_csv(Path(path_str))
    try:
        fit = fit_hanger(trace)
    except Exception:
        from .fitting import FitResult
        from .physics import ResonatorParams

        fit = FitResult(params=ResonatorParams(1.0, 1.0, 2.0),
                        residual_metric=float("inf"), converged=False,
                        param_uncertainties={})
    return trace, fit


def _fit_all(paths, jobs: int):
    if jobs <= 1:
        return [_fit_one(str(p)) for p in paths]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_fit_one, [str(p) for p in paths], chunksize=8))


def cmd_detect(cfg: dict, outdir: Path, *, jobs: int = 1) -> dict:
    """Fit traces, calibrate the detector, and emit the detected events."""
    t0 = time.perf_counter()
    outdir = Path(outdir)
    trace_files = sorted((outdir / "traces").glob("trace_*.csv"))
    if not trace_files:
        raise SchemaError(f"no trace files under {outdir / 'traces'}; "
                          "run simulate first or point --outdir at recorded data")
    fitted = _fit_all(trace_files, jobs)
    traces = tuple(t for t, _ in fitted)
    fits = tuple(f for _, f in fitted)

    from .detector import SweepDataset

    sweep = SweepDataset(traces=traces, fits=fits)
    manual = [tuple(iv) for iv in cfg["sweep"].get("exclusions", [])]
    sweep = apply_exclusions(sweep, manual)

    files = []
    p = outdir / "fits.csv"
    atomic_write_text(p, fits_to_csv(sweep.bias_currents, fits))
    files.append(p)

    # --- calibration from the user-designated flat interval; on failure the
    # fit table above stays on disk for inspection
    cal_iv = cfg["sweep"].get("calibration_interval")
    if cal_iv is None:
        raise SchemaError("sweep.calibration_interval is required for detection")
    lo, hi = int(cal_iv[0]), int(cal_iv[1])
    included = set(sweep.included_indices().tolist())
    cal_idx = [i for i in range(lo, hi + 1) if i in included]
    if len(cal_idx) < 3:
        raise CalibrationError(
            f"calibration interval [{lo}, {hi}] has {len(cal_idx)} usable fits")
    cal_res = np.array([fits[i].residual_metric for i in cal_idx])
    flatness = float(cal_res.max() / np.median(cal_res)) if np.median(cal_res) > 0 else 1.0
    if flatness >= 2.0:
        raise CalibrationError(
            f"calibration region not flat: max/median = {flatness:.2f} >= 2")
    baseline_i = cal_idx[int(np.argsort(cal_res)[len(cal_res) // 2])]
    seed = int(cfg["seed"])
    det_cfg = cfg.get("detector", {})
    noise_sigma = calibrate_noise(traces[baseline_i], fits[baseline_i], seed=seed)

    # average fitted parameters over the calibration interval
    pvecs = np.array([fits[i].params.as_array() for i in cal_idx])
    from .physics import ResonatorParams

    cal_params = ResonatorParams.from_array(pvecs.mean(axis=0))
    calib = build_threshold(cal_params, noise_sigma,
                            ensemble_size=int(det_cfg.get("ensemble_size", 5000)),
                            seed=seed,
                            temperature=float(det_cfg.get("temperature", 0.010)),
                            n_points=len(traces[baseline_i]))

    series = normalize_axis(sweep)
    events = find_peaks(series, calib)

    idx = sweep.included_indices()
    f0 = sweep.f0s[idx]
    delta_f = float(f0.max() - f0.min())
    kappa = sweep.median_kappa()
    n_bins = max(int(math.floor(delta_f / kappa)), 1)

    p = outdir / "residual_series.csv"
    atomic_write_text(p, series_to_csv(series))
    files.append(p)
    p = outdir / "events.csv"
    atomic_write_text(p, events_to_csv(events))
    files.append(p)
    p = outdir / "calibration.json"
    write_json(p, calibration_to_dict(calib))
    files.append(p)
    p = outdir / "detection_meta.json"
    write_json(p, {
        "n_detected": len(events),
        "n_bins": n_bins,
        "delta_f_GHz": delta_f,
        "kappa_GHz": kappa,
        "n_traces": len(traces),
        "n_included": int(idx.size),
        "exclusions": [[e.start, e.stop, e.reason] for e in sweep.exclusions],
    })
    files.append(p)

    panel = Panel(title="residual metric vs frequency shift",
                  xlabel="shift [kappa]", ylabel="residual metric", logy=True)
    panel.add_line(series.shift_axis, np.maximum(series.residuals, 1e-12), "residual")
    panel.add_hline(calib.threshold, "threshold")
    if events:
        panel.add_points([e.shift_position for e in events],
                         [max(e.peak_residual, 1e-12) for e in events], "events")
    in_gap = ~series.valid
    if in_gap.any():
        edges = np.flatnonzero(np.diff(np.concatenate([[0], in_gap.view(np.int8), [0]])))
        for a, b in zip(edges[::2], edges[1::2]):
            panel.add_vspan(series.shift_axis[a], series.shift_axis[min(b, len(series) - 1)])
    p = outdir / "residuals.svg"
    render(panel, p)
    files.append(p)

    write_manifest(outdir, "detect", _config_for_hash(cfg), files,
                   timings={"seconds": time.perf_counter() - t0})
    return {"n_events": len(events), "n_bins": n_bins, "threshold": calib.threshold,
            "noise_sigma": noise_sigma, "outdir": str(outdir)}


def cmd_infer(cfg: dict, outdir: Path) -> dict:
    """Convert detections into a posterior TLS count and density estimate."""
    t0 = time.perf_counter()
    outdir = Path(outdir)
    meta = read_json(outdir / "detection_meta.json")
    calib_raw = read_json(outdir / "calibration.json")
    for key in ("fp", "fn"):
        if key not in calib_raw:
            raise SchemaError(f"calibration.json: missing {key!r}; "
                              "re-run detect to produce detector rates")
    calib = calibration_from_dict(calib_raw)

    inf_cfg = cfg.get("inference", {})
    if "area" not in inf_cfg:
        raise SchemaError("inference.area (junction area in um^2) is required")
    area = float(inf_cfg["area"])
    delta_f = inf_cfg.get("delta_f")
    delta_f = float(meta["delta_f_GHz"]) if delta_f is None else float(delta_f)

    rates = true_rates(calib.fp, calib.fn)
    inp = InferenceInput(n_detected=int(meta["n_detected"]),
                         n_bins=int(meta["n_bins"]), rates=rates)
    post = posterior(inp)
    est = density(post, delta_f=delta_f, area=area)

    files = []
    p = outdir / "posterior.csv"
    lines = ["n_t,prob"] + [f"{k},{fnum(v)}" for k, v in enumerate(post.pmf)]
    atomic_write_text(p, "\n".join(lines) + "\n")
    files.append(p)
    p = outdir / "estimate.json"
    write_json(p, {
        "rho": est.rho,
        "ci68": [est.ci68[0], est.ci68[1]],
        "lambda_star": post.lambda_star,
        "mean_count": post.mean_count,
        "count_ci68": [post.ci68[0], post.ci68[1]],
        "delta_f_GHz": delta_f,
        "area_um2": area,
        "rates": {"fp": rates.fp, "fn": rates.fn, "FP": rates.FP, "FN": rates.FN},
    })
    files.append(p)

    lam_grid = np.linspace(0.0, max(3.0 * post.lambda_star, 3.0), 121)
    lvals = np.array([marginal_likelihood(inp.n_detected, inp.n_bins, rates, g)
                      for g in lam_grid])
    if lvals.max() > 0:
        lvals = lvals / lvals.max()
    top = Panel(title="marginal likelihood of the TLS rate",
                xlabel="lambda", ylabel="L / L_max")
    top.add_line(lam_grid, lvals, "likelihood")
    show = min(inp.n_bins, max(int(math.ceil(post.ci68[1])) + 8, 12))
    bottom = Panel(title="posterior over the true TLS count",
                   xlabel="N_T", ylabel="P(N_T | N_m)")
    ks = np.arange(show + 1)
    bottom.add_line(ks, post.pmf[:show + 1], "posterior")
    bottom.add_vspan(post.ci68[0], post.ci68[1], "68.27% CI")
    p = outdir / "posterior.svg"
    render([top, bottom], p)
    files.append(p)

    write_manifest(outdir, "infer", _config_for_hash(cfg), files,
                   timings={"seconds": time.perf_counter() - t0})
    return {"rho": est.rho, "ci68": list(est.ci68), "lambda_star": post.lambda_star,
            "outdir": str(outdir)}


def cmd_correlate(densities_path: Path, morphology_path: Path, outdir: Path,
                  *, seed: int = 0, repeats: int = 100) -> dict:
    """Treatment statistics and morphology correlation reports."""
    t0 = time.perf_counter()
    outdir = Path(outdir)
    dens_rows = read_densities_csv(densities_path)
    labels, X, feat_names, tls_density = read_morphology_csv(morphology_path)

    treatments = sorted({r["treatment"] for r in dens_rows})
    by_treatment = {t: [r for r in dens_rows if r["treatment"] == t]
                    for t in treatments}
    notices = []
    files = []

    # normality per treatment (Shapiro-Wilk)
    rows = ["treatment,n,W,p"]
    for t in treatments:
        vals = [r["rho"] for r in by_treatment[t]]
        if len(vals) < 3:
            notices.append(f"shapiro skipped for {t}: n={len(vals)} < 3")
            continue
        try:
            W, pv = shapiro_wilk(vals)
            rows.append(f"{t},{len(vals)},{fnum(W)},{fnum(pv)}")
        except Exception as exc:
            notices.append(f"shapiro failed for {t}: {exc}")
    p = outdir / "normality_tests.csv"
    atomic_write_text(p, "\n".join(rows) + "\n")
    files.append(p)

    # pairwise rank tests
    rows = ["treatment_1,treatment_2,H,p"]
    if len(treatments) < 2:
        notices.append("pairwise tests skipped: only one treatment present")
    else:
        for i, t1 in enumerate(treatments):
            for t2 in treatments[i + 1:]:
                g1 = [r["rho"] for r in by_treatment[t1]]
                g2 = [r["rho"] for r in by_treatment[t2]]
                if len(g1) < 2 or len(g2) < 2:
                    notices.append(f"rank test skipped for {t1} vs {t2}: group too small")
                    continue
                H, pv = kruskal_wallis([g1, g2])
                rows.append(f"{t1},{t2},{fnum(H)},{fnum(pv)}")
    p = outdir / "rank_tests.csv"
    atomic_write_text(p, "\n".join(rows) + "\n")
    files.append(p)

    # gamma fits and device aggregates per treatment
    from .inference import DensityEstimate

    rows = ["treatment,n,shape,scale,mean,mean_stderr"]
    agg_rows = ["treatment,n,rho_mean,sigma_plus,sigma_minus"]
    for t in treatments:
        vals = [r["rho"] for r in by_treatment[t]]
        ests = [DensityEstimate(rho=r["rho"], ci68=(r["ci_lo"], r["ci_hi"]),
                                delta_f=1.0, area=1.0) for r in by_treatment[t]]
        summ = aggregate_device(ests)
        agg_rows.append(f"{t},{len(ests)},{fnum(summ.rho_mean)},"
                        f"{fnum(summ.sigma_plus)},{fnum(summ.sigma_minus)}")
        if len(vals) < 4:
            notices.append(f"gamma fit skipped for {t}: n={len(vals)} < 4")
            continue
        try:
            gf = gamma_fit(vals)
            rows.append(f"{t},{len(vals)},{fnum(gf.shape)},{fnum(gf.scale)},"
                        f"{fnum(gf.mean)},{fnum(gf.mean_stderr)}")
        except Exception as exc:
            notices.append(f"gamma fit failed for {t}: {exc}")
    p = outdir / "gamma_fits.csv"
    atomic_write_text(p, "\n".join(rows) + "\n")
    files.append(p)
    p = outdir / "device_summaries.csv"
    atomic_write_text(p, "\n".join(agg_rows) + "\n")
    files.append(p)

    # pairwise correlation of each morphology metric with density
    rows = ["feature,pearson_r,pearson_p,spearman_rho,spearman_p"]
    for j, name in enumerate(feat_names):
        try:
            r, rp = pearson(X[:, j], tls_density)
            s, sp = spearman(X[:, j], tls_density)
            rows.append(f"{name},{fnum(r)},{fnum(rp)},{fnum(s)},{fnum(sp)}")
        except Exception as exc:
            notices.append(f"correlation skipped for {name}: {exc}")
    p = outdir / "feature_correlations.csv"
    atomic_write_text(p, "\n".join(rows) + "\n")
    files.append(p)

    # collinearity clustering + ridge permutation importance
    report = None
    if X.shape[0] >= 4:
        sel = cluster_features(X, tls_density)
        rep_names = [feat_names[j] for j in sel.representatives]
        rr = ridge_permutation_importance(X[:, list(sel.representatives)],
                                          tls_density, alpha=sel.ridge_alpha,
                                          repeats=repeats, seed=seed,
                                          feature_names=rep_names)
        report = {
            "threshold": sel.threshold,
            "loocv_r2": rr.loocv_r2,
            "ridge_alpha": rr.ridge_alpha,
            "clusters": [[feat_names[j] for j in c] for c in sel.clusters],
            "representatives": rep_names,
            "importances": {k: list(v) for k, v in rr.importances.items()},
            "ranking": rr.ranking(),
        }
        p = outdir / "correlation_report.json"
        write_json(p, report)
        files.append(p)

        ranked = rr.ranking()
        panel = Panel(title="permutation importance (LOOCV R2 drop)",
                      ylabel="mean R2 drop")
        panel.add_bars(ranked, [rr.importances[k][0] for k in ranked])
        p = outdir / "importance.svg"
        render(panel, p)
        files.append(p)
    else:
        notices.append("clustering/importance skipped: fewer than 4 devices")

    # density distributions per treatment with gamma overlays
    panel = Panel(title="TLS density distributions by treatment",
                  xlabel="rho [1 / GHz / um^2]", ylabel="empirical CDF")
    from scipy.special import gammainc

    for t in treatments:
        vals = np.sort([r["rho"] for r in by_treatment[t]])
        steps = np.arange(1, vals.size + 1) / vals.size
        panel.add_line(np.repeat(vals, 2),
                       np.concatenate([[0.0], np.repeat(steps, 2)[:-1]]),
                       f"{t} (n={vals.size})")
        if vals.size >= 4 and vals.std() > 0:
            try:
                gf = gamma_fit(vals)
                xs = np.linspace(0, float(vals.max()) * 1.3, 80)
                panel.add_line(xs, gammainc(gf.shape, xs / gf.scale),
                               f"{t} gamma fit")
            except Exception:
                pass
    p = outdir / "densities.svg"
    render(panel, p)
    files.append(p)

    p = outdir / "notices.json"
    write_json(p, {"notices": notices})
    files.append(p)

    cfg = {"densities": str(densities_path), "morphology": str(morphology_path),
           "seed": seed, "repeats": repeats}
    write_manifest(outdir, "correlate", cfg, files,
                   timings={"seconds": time.perf_counter() - t0})
    return {"treatments": treatments, "notices": notices,
            "ranking": (report or {}).get("ranking", []), "outdir": str(outdir)}


def cmd_report(outdir: Path) -> dict:
    """Consolidate stage manifests and headline numbers into one report."""
    outdir = Path(outdir)
    manifests = sorted(outdir.glob("manifest_*.json"))
    if not manifests:
        raise SchemaError(f"no stage manifests found under {outdir}")
    stages = {}
    for m in manifests:
        data = read_json(m)
        stages[data["stage"]] = {
            "config_hash": data["config_hash"],
            "n_outputs": len(data["outputs"]),
            "outputs": [o["path"] for o in data["outputs"]],
        }
    summary = {"stages": stages}
    for name, loader in (("detection_meta.json", "detect"),
                         ("estimate.json", "infer")):
        path = outdir / name
        if path.exists():
            summary[name] = read_json(path)

    lines = ["# run report", ""]
    for stage, info in stages.items():
        lines.append(f"- stage `{stage}`: {info['n_outputs']} outputs, "
                     f"config {info['config_hash'][:12]}")
    if "detection_meta.json" in summary:
        meta = summary["detection_meta.json"]
        lines.append(f"- detections: {meta['n_detected']} events over "
                     f"{meta['n_bins']} linewidth bins "
                     f"({meta['delta_f_GHz']:.6f} GHz swept)")
    if "estimate.json" in summary:
        est = summary["estimate.json"]
        lines.append(f"- density: rho = {est['rho']:.4g} "
                     f"[{est['ci68'][0]:.4g}, {est['ci68'][1]:.4g}] / GHz / um^2")
    write_json(outdir / "report.json", summary)
    atomic_write_text(outdir / "report.md", "\n".join(lines) + "\n")
    return summary


def schema_text(name: str | None = None) -> str:
    if name is None:
        return "\n".join(SCHEMAS[k] for k in sorted(SCHEMAS))
    if name not in SCHEMAS:
        raise SchemaError(f"unknown schema {name!r}; have: {', '.join(sorted(SCHEMAS))}")
    return SCHEMAS[name]
