"""Whole-package acceptance checks, one test per numbered criterion.

Each test prints a single PASS line with its measured margin (visible
under pytest -s) and fails with the same detail otherwise. Tests are
ordered cheap first; the three estimation studies at the end dominate
the runtime, roughly 35 to 40 minutes in total on one core.
"""

import hashlib
import json
import math
import pathlib

import numpy as np
import pytest
from scipy.integrate import quad

import mvst
from mvst import (
    CompositeModel,
    Dataset,
    Family,
    MarginalParams,
    ModelSpec,
    PointSet,
    SimulationRequest,
    TemporalParams,
    Window,
    assemble_sigma,
    conditional,
    cov,
    crps_normal,
    cross_param_tables,
    demo_sites,
    fit,
    full_nll,
    matern_corr,
    model_variances,
    pair_cov,
    pair_nll,
    rolling_predict,
    score,
    select_window,
    simulate,
    standardize,
    validate,
    wpl,
)
from mvst.cli import main as cli_main
from mvst.kernels import mixture_density_cauchy, mixture_density_matern
from mvst.specialfn import std_normal_cdf


def check(name: str, ok: bool, detail: str) -> None:
    line = f"{name}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line)
    assert ok, line


def reference_model() -> ModelSpec:
    """Three-variable study truth used by the estimation criteria."""
    return ModelSpec(
        family=Family.MATERN,
        p=3,
        d=2,
        marginals=(
            MarginalParams(1.0, 0.7, 1.0 / 250.0),
            MarginalParams(1.0, 0.8, 1.0 / 200.0),
            MarginalParams(1.0, 0.4, 1.0 / 350.0),
        ),
        beta=np.array([
            [1.0, -0.40, -0.40],
            [-0.40, 1.0, 0.25],
            [-0.40, 0.25, 1.0],
        ]),
        temporal=TemporalParams(alpha=0.9, a=0.5, b=0.8, tau=1.0),
    )


def cauchy_reference() -> ModelSpec:
    return ModelSpec(
        family=Family.CAUCHY,
        p=2,
        d=2,
        marginals=(
            MarginalParams(1.2, 0.6, 1.0 / 300.0),
            MarginalParams(0.8, 1.1, 1.0 / 150.0),
        ),
        beta=np.array([[1.0, 0.5], [0.5, 1.0]]),
        temporal=TemporalParams(alpha=0.7, a=0.4, b=0.6, tau=1.0),
        lam=1.5,
    )


def random_feasible_model(rng: np.random.Generator, family: Family,
                          p: int | None = None) -> ModelSpec:
    """Random model satisfying every documented parameter constraint."""
    if p is None:
        p = int(rng.integers(1, 5))
    marginals = tuple(
        MarginalParams(
            sigma=float(rng.uniform(0.5, 2.0)),
            nu=float(rng.uniform(0.3, 2.5)),
            r=float(1.0 / rng.uniform(50.0, 800.0)),
        )
        for _ in range(p)
    )
    w = rng.uniform(-1.0, 1.0, size=(p, p + 1))
    gram = w @ w.T + 1e-3 * np.eye(p)
    dd = np.sqrt(np.diag(gram))
    beta = gram / np.outer(dd, dd)
    b = float(rng.uniform(0.0, 1.0))
    temporal = TemporalParams(
        alpha=float(rng.uniform(0.1, 2.0)),
        a=float(rng.uniform(0.05, 1.0)),
        b=b,
        tau=b + float(rng.uniform(0.0, 1.5)),
    )
    lam = float(rng.uniform(0.3, 2.0)) if family is Family.CAUCHY else None
    return ModelSpec(family=family, p=p, d=2, marginals=marginals, beta=beta,
                     temporal=temporal, lam=lam)


def sha_map(directory) -> dict:
    out = {}
    for f in sorted(pathlib.Path(directory).iterdir()):
        out[f.name] = hashlib.sha256(f.read_bytes()).hexdigest()
    return out


# ---------------------------------------------------------------------------
# 1. kernel correctness


def test_01_kernel_closed_forms_and_mixture_quadrature() -> None:
    rng = np.random.default_rng(101)
    worst_closed = 0.0
    for _ in range(1000):
        h = float(rng.uniform(1e-3, 1500.0))
        r = float(1.0 / rng.uniform(50.0, 500.0))
        rh = r * h
        closed = {
            0.5: math.exp(-rh),
            1.5: (1.0 + rh) * math.exp(-rh),
            2.5: (1.0 + rh + rh * rh / 3.0) * math.exp(-rh),
        }
        for nu, want in closed.items():
            got = matern_corr(h, r, nu)
            worst_closed = max(worst_closed, abs(got - want) / abs(want))
    ok_closed = worst_closed <= 1e-11

    worst_mix = 0.0
    for model in (reference_model(), cauchy_reference()):
        r_tab, nu_tab, rho_tab = cross_param_tables(model)
        t = model.temporal
        for _ in range(50):
            i = int(rng.integers(0, model.p))
            j = int(rng.integers(0, model.p))
            h = float(rng.uniform(0.0, 600.0))
            u = float(rng.uniform(0.0, 4.0))
            base = t.alpha * abs(u) ** (2.0 * t.a) + 1.0
            amp = (model.marginals[i].sigma * model.marginals[j].sigma
                   * rho_tab[i, j] * base ** (-t.tau))
            hh = h / base ** (t.b / 2.0)
            r_ij, nu_ij = float(r_tab[i, j]), float(nu_tab[i, j])
            if model.family is Family.MATERN:
                # the inverse-gamma mixing density concentrates near
                # r^2/4, so integrate at that scale
                c = r_ij * r_ij / 4.0

                def f(w: float) -> float:
                    return (math.exp(-hh * hh * c * w)
                            * mixture_density_matern(c * w, r_ij, nu_ij) * c)

                val = quad(f, 0.0, 1.0, limit=400)[0]
                val += quad(f, 1.0, np.inf, limit=400)[0]
            else:
                # gamma mixing density with mean nu*r: integrate in units
                # of the scale r, splitting at the mean
                s = hh ** model.lam

                def f(w: float) -> float:
                    return (math.exp(-s * r_ij * w)
                            * mixture_density_cauchy(r_ij * w, r_ij, nu_ij)
                            * r_ij)

                split = max(1.0, nu_ij)
                val = quad(f, 0.0, split, limit=400)[0]
                val += quad(f, split, np.inf, limit=400)[0]
            want = amp * val
            got = cov(model, i, j, h, u)
            worst_mix = max(worst_mix, abs(got - want) / max(abs(want), 1e-12))
    ok_mix = worst_mix <= 1e-7
    check("criterion 1 kernel correctness", ok_closed and ok_mix,
          f"closed-form max rel err {worst_closed:.2e} <= 1e-11, "
          f"mixture-quadrature max rel err {worst_mix:.2e} <= 1e-7")


# ---------------------------------------------------------------------------
# 2. model validity on random designs


def test_02_assembled_covariance_positive_semidefinite() -> None:
    rng = np.random.default_rng(202)
    sites = demo_sites()
    worst = math.inf
    for case in range(200):
        family = Family.MATERN if case % 2 == 0 else Family.CAUCHY
        model = random_feasible_model(rng, family)
        assert validate(model).ok
        n_sites = int(rng.integers(2, 7))
        cap = max(1, 60 // (n_sites * model.p))
        n_days = int(rng.integers(1, min(4, cap) + 1))
        pick = tuple(rng.choice(sites.ids, size=n_sites, replace=False))
        pts = PointSet.grid(n_sites, tuple(range(n_days)), model.p)
        sig = assemble_sigma(model, pts, sites.subset(pick))
        assert len(pts) <= 60
        margin = float(np.linalg.eigvalsh(sig).min()
                       / np.max(np.diag(sig)))
        worst = min(worst, margin)
    ok = worst >= -1e-8
    check("criterion 2 validity", ok,
          f"200 random models, min eigenvalue ratio {worst:.2e} >= -1e-8")


# ---------------------------------------------------------------------------
# 3. objective equivalence


def brute_pairwise_objective(model, data: Dataset, window: Window) -> float:
    """Direct double loop over weighted pairs, summed across replicates.

    Same-variable terms use unordered distinct point pairs; cross-variable
    terms for i < j use all ordered point pairs including coincident ones.
    """
    dm = data.sites.distance_matrix()
    vals = data.values
    n_reps, n_days, n_sites, p = vals.shape
    var = model_variances(model)
    pts = [(s, t) for t in range(n_days) for s in range(n_sites)]
    total = 0.0
    for rep in range(n_reps):
        for i in range(p):
            for a in range(len(pts)):
                for b in range(a + 1, len(pts)):
                    (sa, ta), (sb, tb) = pts[a], pts[b]
                    h = dm[sa, sb]
                    u = float(data.days[ta] - data.days[tb])
                    if h <= window.d_s and abs(u) <= window.d_t:
                        c = pair_cov(model, i, i, h, u)
                        total += pair_nll(vals[rep, ta, sa, i],
                                          vals[rep, tb, sb, i],
                                          var[i], var[i], c)
        for i in range(p):
            for j in range(i + 1, p):
                for sa, ta in pts:
                    for sb, tb in pts:
                        h = dm[sa, sb]
                        u = float(data.days[ta] - data.days[tb])
                        if h <= window.d_s and abs(u) <= window.d_t:
                            c = pair_cov(model, i, j, h, u)
                            total += pair_nll(vals[rep, ta, sa, i],
                                              vals[rep, tb, sb, j],
                                              var[i], var[j], c)
    return total


def test_03_objective_matches_independent_oracles() -> None:
    rng = np.random.default_rng(303)
    sites_all = demo_sites()
    worst_wpl = 0.0
    for case in range(5):
        family = Family.MATERN if case % 2 == 0 else Family.CAUCHY
        model = random_feasible_model(rng, family, p=int(rng.integers(1, 3)))
        n_sites = int(rng.integers(2, 4))
        n_days = int(rng.integers(2, 5))
        n_reps = int(rng.integers(1, 4))
        pick = tuple(rng.choice(sites_all.ids, size=n_sites, replace=False))
        sub = sites_all.subset(pick)
        pts = PointSet.grid(n_sites, tuple(range(n_days)), model.p)
        sim = simulate(SimulationRequest(model=model, pts=pts, sites=sub,
                                         n_reps=n_reps, seed=3300 + case))
        data = Dataset.from_replicates(sub, tuple(range(n_days)), model.p,
                                       sim.values)
        window = Window(float(rng.uniform(100.0, 700.0)),
                        float(rng.integers(1, 4)))
        got = wpl(model, data=data, window=window)
        want = brute_pairwise_objective(model, data, window)
        worst_wpl = max(worst_wpl, abs(got - want) / max(abs(want), 1.0))
    ok_wpl = worst_wpl <= 1e-10

    model = random_feasible_model(np.random.default_rng(7), Family.MATERN, p=2)
    sub = sites_all.subset(("s01", "s04", "s07"))
    pts = PointSet.grid(3, (0, 1), 2)
    sim = simulate(SimulationRequest(model=model, pts=pts, sites=sub,
                                     n_reps=3, seed=33))
    data = Dataset.from_replicates(sub, (0, 1), 2, sim.values)
    sig = assemble_sigma(model, pts, sub)
    n = sig.shape[0]
    sign, logdet = np.linalg.slogdet(sig)
    assert sign > 0
    oracle = 0.0
    for rep in range(3):
        z = data.vector(rep)
        oracle += 0.5 * (logdet + z @ np.linalg.solve(sig, z)
                         + n * math.log(2.0 * math.pi))
    got = full_nll(model, data)
    err_full = abs(got - oracle) / max(abs(oracle), 1.0)
    ok_full = err_full <= 1e-9
    check("criterion 3 objective equivalence", ok_wpl and ok_full,
          f"pairwise max rel err {worst_wpl:.2e} <= 1e-10, "
          f"dense-inverse rel err {err_full:.2e} <= 1e-9")


# ---------------------------------------------------------------------------
# 7. closed-form CRPS against numerical integration (cheap, run before the
# long studies)


def test_07_crps_closed_form_vs_quadrature() -> None:
    rng = np.random.default_rng(707)
    worst = 0.0
    for _ in range(1000):
        mean = float(rng.normal(0.0, 2.0))
        sd = float(rng.uniform(0.05, 3.0))
        obs = float(rng.normal(0.0, 3.0))

        def cdf(x: float) -> float:
            return std_normal_cdf((x - mean) / sd)

        below = quad(lambda x: cdf(x) ** 2, -np.inf, obs, limit=200)[0]
        above = quad(lambda x: (1.0 - cdf(x)) ** 2, obs, np.inf, limit=200)[0]
        worst = max(worst, abs(crps_normal(mean, sd, obs) - (below + above)))
    ok = worst <= 1e-6
    check("criterion 7 proper-score oracle", ok,
          f"1000 cases, max abs err {worst:.2e} <= 1e-6")


# ---------------------------------------------------------------------------
# 8. conditioning oracle


def test_08_conditional_matches_partitioned_inverse() -> None:
    rng = np.random.default_rng(808)
    sites_all = demo_sites()
    worst_mean = worst_cov = 0.0
    done = 0
    while done < 100:
        family = Family.MATERN if done % 2 == 0 else Family.CAUCHY
        model = random_feasible_model(rng, family, p=int(rng.integers(1, 4)))
        n_sites = int(rng.integers(2, 5))
        pick = tuple(rng.choice(sites_all.ids, size=n_sites, replace=False))
        sub = sites_all.subset(pick)
        n_days = int(rng.integers(1, 4))
        pool = PointSet.grid(n_sites, tuple(range(n_days)), model.p)
        n_total = int(rng.integers(2, min(12, len(pool)) + 1))
        idx = rng.choice(len(pool), size=n_total, replace=False)
        n_t = int(rng.integers(1, n_total))
        t_idx, g_idx = idx[:n_t], idx[n_t:]
        target = PointSet(site=pool.site[t_idx], day=pool.day[t_idx],
                          var=pool.var[t_idx])
        given = PointSet(site=pool.site[g_idx], day=pool.day[g_idx],
                         var=pool.var[g_idx])
        both = PointSet(site=np.concatenate([target.site, given.site]),
                        day=np.concatenate([target.day, given.day]),
                        var=np.concatenate([target.var, given.var]))
        sig = assemble_sigma(model, both, sub)
        gg = sig[n_t:, n_t:]
        # regenerate when the conditioning block is numerically singular;
        # the oracle needs a clean solve
        if np.linalg.eigvalsh(gg).min() <= 1e-8 * np.max(np.diag(gg)):
            continue
        z = rng.standard_normal(len(given))
        out = conditional(model, sub, target, given, z)
        tg = sig[:n_t, n_t:]
        mean_want = tg @ np.linalg.solve(gg, z)
        cov_want = sig[:n_t, :n_t] - tg @ np.linalg.solve(gg, tg.T)
        scale = max(1.0, float(np.max(np.abs(sig))))
        worst_mean = max(worst_mean,
                         float(np.max(np.abs(out.mean - mean_want))) / scale)
        worst_cov = max(worst_cov,
                        float(np.max(np.abs(out.cov - cov_want))) / scale)
        done += 1
    ok_oracle = worst_mean <= 1e-9 and worst_cov <= 1e-9

    model = reference_model()
    sub = sites_all.subset(("s01", "s04", "s07"))
    given = PointSet.grid(3, (0, 1), 3)
    z = np.random.default_rng(5).standard_normal(len(given))
    worst_interp = 0.0
    for k in (0, 7, 17):
        target = PointSet(site=given.site[[k]], day=given.day[[k]],
                          var=given.var[[k]])
        out = conditional(model, sub, target, given, z)
        worst_interp = max(worst_interp, abs(float(out.mean[0]) - z[k]))
    ok_interp = worst_interp <= 1e-10
    check("criterion 8 conditioning oracle", ok_oracle and ok_interp,
          f"100 cases, mean err {worst_mean:.2e}, cov err {worst_cov:.2e} "
          f"<= 1e-9; interpolation err {worst_interp:.2e} <= 1e-10")


# ---------------------------------------------------------------------------
# 9. CLI byte determinism


def test_09_cli_byte_determinism(tmp_path) -> None:
    model_doc = reference_model().to_dict()
    (tmp_path / "model.json").write_text(json.dumps(model_doc))
    configs = {
        "sim.json": {"model": "model.json", "sites": "demo", "days": 6,
                     "n_reps": 2, "seed": 99},
        "fit.json": {"data": "a/simulate.csv", "sites": "demo",
                     "window": {"d_s_km": 400.0, "d_t_days": 2.0},
                     "variant": "S-D", "b_grid": [0.0], "max_outer": 1},
        "pred.json": {"data": "a/simulate.csv", "sites": "demo",
                      "model": "model.json", "targets": ["v12", "v13"],
                      "q_days": 2},
        "vario.json": {"data": "a/simulate.csv", "sites": "demo",
                       "bins": [0.0, 200.0, 500.0], "lags": [0, 1],
                       "model": "model.json", "curve_points": 9},
        "sw.json": {"model": "model.json", "sites": "demo", "days": 4,
                    "n_reps": 1, "candidates": [[300.0, 1.0], [500.0, 2.0]],
                    "n_sims": 2, "seed": 12, "variant": "S-D",
                    "fit": {"b_grid": [0.0], "max_outer": 1}},
    }
    for name, doc in configs.items():
        (tmp_path / name).write_text(json.dumps(doc))

    plan = [
        ("simulate", "sim.json"),
        ("fit", "fit.json"),
        ("predict", "pred.json"),
        ("score", "pred.json"),
        ("variogram", "vario.json"),
        ("select-window", "sw.json"),
    ]
    n_files = 0
    for command, config in plan:
        out_a = tmp_path / "a" if command == "simulate" else (
            tmp_path / f"{command}_a")
        out_b = tmp_path / f"{command}_b"
        rc_a = cli_main([command, "--config", str(tmp_path / config),
                         "--out", str(out_a), "--threads", "1"])
        rc_b = cli_main([command, "--config", str(tmp_path / config),
                         "--out", str(out_b), "--threads", "2"])
        assert rc_a == 0 and rc_b == 0, command
        a, b = sha_map(out_a), sha_map(out_b)
        assert a == b, f"{command} differs between reruns or thread counts"
        n_files += len(a)
    check("criterion 9 determinism", True,
          f"all 6 commands byte-identical across reruns and "
          f"--threads 1 vs 2 ({n_files} artifacts compared)")


# ---------------------------------------------------------------------------
# 4. parameter recovery study


def test_04_estimation_recovers_reference_parameters() -> None:
    truth = reference_model()
    sites = demo_sites().subset(mvst.DEMO_FIT_SITES)
    days = np.arange(1, 31)
    pts = PointSet.grid(11, days, 3)
    window = Window(500.0, 2.0)
    rows = []
    for k in range(20):
        sim = simulate(SimulationRequest(model=truth, pts=pts, sites=sites,
                                         n_reps=10, seed=4000 + k))
        ds = Dataset.from_replicates(sites, days, 3, sim.values)
        m = fit(ds, window, variant="NS-D").model
        rows.append([
            m.marginals[0].sigma, m.marginals[1].sigma, m.marginals[2].sigma,
            m.beta[0, 1], m.beta[0, 2], m.beta[1, 2],
            m.marginals[0].nu, m.marginals[1].nu, m.marginals[2].nu,
            1.0 / m.marginals[0].r, 1.0 / m.marginals[1].r,
            1.0 / m.marginals[2].r,
            m.temporal.alpha, m.temporal.a, m.temporal.b,
        ])
    arr = np.array(rows)
    med = np.median(arr, axis=0)

    # frozen interquartile bounds of the reference simulation study
    names = ["sigma1", "sigma2", "sigma3", "beta12", "beta13", "beta23",
             "nu1", "nu2", "nu3", "range1", "range2", "range3",
             "alpha", "a"]
    lo = [0.97, 0.97, 0.97, -0.46, -0.47, 0.19, 0.69, 0.76, 0.39,
          205.0, 170.0, 284.0, 0.84, 0.46]
    hi = [1.02, 1.02, 1.02, -0.34, -0.34, 0.33, 0.82, 0.91, 0.46,
          262.0, 215.0, 356.0, 0.99, 0.54]
    misses = [f"{n}={v:.3f} not in [{l}, {h}]"
              for n, v, l, h in zip(names, med[:14], lo, hi)
              if not l <= v <= h]

    # with 20 repetitions the sample median is the midpoint of the two
    # central order statistics, which can fall between grid levels; the
    # median counts as on-grid when that central interval contains a level
    b_sorted = np.sort(arr[:, 14])
    b_lo, b_hi = float(b_sorted[9]), float(b_sorted[10])
    ok_b = any(b_lo <= g <= b_hi for g in (0.7, 0.8, 0.9))
    ok = not misses and ok_b
    check("criterion 4 estimation study", ok,
          f"{14 - len(misses)}/14 medians inside frozen quartile bounds"
          + (f", misses: {misses}" if misses else "")
          + f"; interaction-level median interval [{b_lo:g}, {b_hi:g}]"
          f" touches {{0.7, 0.8, 0.9}}: {ok_b}")


# ---------------------------------------------------------------------------
# 5. window selection ranking


def test_05_window_selection_prefers_short_time_cutoff() -> None:
    truth = reference_model()
    sites = demo_sites().subset(mvst.DEMO_FIT_SITES)
    days = np.arange(1, 31)
    sel = select_window(truth, sites, days, 10,
                        [(250.0, 2.0), (250.0, 5.0),
                         (500.0, 2.0), (500.0, 5.0)],
                        n_sims=50, seed=7000)
    crit = {(res.window.d_s, res.window.d_t): res.criterion
            for res in sel.results}
    failed = sum(res.n_failed for res in sel.results)
    inversions = [ds for ds in (250.0, 500.0)
                  if crit[(ds, 2.0)] >= crit[(ds, 5.0)]]
    ok = len(inversions) <= 1 and failed == 0
    detail = ", ".join(
        f"d_s={ds:g}: crit(d_t=2)={crit[(ds, 2.0)]:.4f} vs "
        f"crit(d_t=5)={crit[(ds, 5.0)]:.4f}" for ds in (250.0, 500.0))
    check("criterion 5 window selection", ok,
          f"{detail}; inversions {len(inversions)} <= 1, failed fits {failed}")


# ---------------------------------------------------------------------------
# 6. prediction score study


def test_06_prediction_scores_near_reference_and_dominant() -> None:
    truth = reference_model()
    sites = demo_sites()
    days = np.arange(1, 31)
    pts = PointSet.grid(13, days, 3)
    window = Window(500.0, 2.0)
    fit_sites = sites.subset(mvst.DEMO_FIT_SITES)
    accs = {"NS-D": [], "S-E": []}
    for k in range(30):
        sim = simulate(SimulationRequest(model=truth, pts=pts, sites=sites,
                                         n_reps=10, seed=2000 + k))
        full = Dataset.from_replicates(sites, days, 3, sim.values)
        fit_ds = Dataset(sites=fit_sites, days=days,
                         values=full.values[:, :, :11, :],
                         var_names=full.var_names, rep_ids=full.rep_ids)
        for variant in ("NS-D", "S-E"):
            rep = fit(fit_ds, window, variant=variant)
            pred = rolling_predict(rep.model, full,
                                   mvst.DEMO_VALIDATION_SITES, q_days=2)
            st = score(pred)
            accs[variant].append([st.rmse, st.mae, st.crps, st.logs1,
                                  st.logs6])
    ns = np.array(accs["NS-D"]).mean(axis=0)
    se = np.array(accs["S-E"]).mean(axis=0)
    bands = [(0.485, "rmse"), (0.383, "mae"), (0.271, "crps")]
    band_miss = [f"{n}={ns[k]:.4f} not within 0.02 of {c}"
                 for k, (c, n) in enumerate(bands)
                 if not abs(ns[k] - c) <= 0.02]
    dom_miss = [n for k, n in enumerate(("rmse", "mae", "crps", "logs1",
                                         "logs6")) if ns[k] > se[k]]
    ok = not band_miss and not dom_miss
    check("criterion 6 prediction scores", ok,
          f"full-model means rmse={ns[0]:.4f} mae={ns[1]:.4f} "
          f"crps={ns[2]:.4f} (bands +-0.02 around 0.485/0.383/0.271"
          + (f", misses: {band_miss}" if band_miss else "")
          + f"); dominates separable pooled fit on all five scores: "
          + ("yes" if not dom_miss else f"no ({dom_miss})"))


# ---------------------------------------------------------------------------
# end-to-end composite pipeline with sill additivity


def test_10_composite_pipeline_and_sill_additivity() -> None:
    spacetime = ModelSpec(
        family=Family.MATERN,
        p=2,
        d=2,
        marginals=(
            MarginalParams(math.sqrt(0.5), 0.8, 1.0 / 60.0),
            MarginalParams(math.sqrt(0.5), 0.6, 1.0 / 80.0),
        ),
        beta=np.array([[1.0, -0.3], [-0.3, 1.0]]),
        temporal=TemporalParams(alpha=1.5, a=0.8, b=0.5, tau=1.0),
    )
    truth = CompositeModel(
        sigma_x=np.sqrt([0.5, 0.5]),
        beta_x=np.array([[1.0, 0.6], [0.6, 1.0]]),
        alpha_x=0.1,
        a_x=0.5,
        spacetime=spacetime,
    )
    ids = tuple(mvst.DEMO_FIT_SITES[:8]) + tuple(mvst.DEMO_VALIDATION_SITES)
    sites = demo_sites().subset(ids)
    days = np.arange(30)
    pts = PointSet.grid(len(sites), days, 2)
    sim = simulate(SimulationRequest(model=truth, pts=pts, sites=sites,
                                     n_reps=8, seed=31))
    full = Dataset.from_replicates(sites, days, 2, sim.values)
    fit_ds = Dataset(sites=sites.subset(ids[:8]), days=days,
                     values=full.values[:, :, :8, :],
                     var_names=full.var_names, rep_ids=full.rep_ids)

    report = fit(fit_ds, Window(700.0, 5.0), composite=True,
                 standardize_data=True, b_grid=(0.0, 0.5))
    cm = report.model
    assert isinstance(cm, CompositeModel)
    assert validate(cm.spacetime).ok

    p = cm.p
    total = np.array([[pair_cov(cm, i, j, 0.0, 0.0) for j in range(p)]
                      for i in range(p)])
    slow_part = np.array([[cm.sigma_x[i] * cm.sigma_x[j] * cm.beta_x[i, j]
                           for j in range(p)] for i in range(p)])
    fast_part = np.array([[cov(cm.spacetime, i, j, 0.0, 0.0)
                           for j in range(p)] for i in range(p)])
    gap = float(np.max(np.abs(total - (slow_part + fast_part))))
    unit_gap = float(np.max(np.abs(np.diag(total) - 1.0)))
    nontrivial = bool(np.all(cm.sigma_x**2 > 0.1)
                      and np.all(cm.sigma_x**2 < 0.9))

    std_full = standardize(full)
    pred = rolling_predict(cm, std_full, mvst.DEMO_VALIDATION_SITES, q_days=2)
    table = score(pred)
    finite = all(math.isfinite(x) for x in (table.rmse, table.mae, table.crps,
                                            table.logs1, table.logs6))
    ok = gap <= 1e-10 and unit_gap <= 1e-10 and nontrivial and finite
    check("composite pipeline additivity", ok,
          f"max sill additivity gap {gap:.2e} <= 1e-10, unit-variance gap "
          f"{unit_gap:.2e}, slow-component shares "
          f"{np.round(cm.sigma_x**2, 3).tolist()}, held-out scores finite: "
          f"{finite}")


if __name__ == "__main__":
    pytest.main([__file__, "-v", "-s"])
