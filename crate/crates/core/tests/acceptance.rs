//! Acceptance checks. Runs without the libtest harness so that every check
//! prints exactly one PASS/FAIL line; exits nonzero if any check fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use stackddd::diagnostics::{
    aggregated_weights, aux_weights, check_weight_properties, implied_estimand, pooled_3wfe_event_study, pretrend_test,
    SpecKind,
};
use stackddd::estimators::{
    event_study, fwl_weights, pooled_event_study, saturated_ols, stack_event_study, WeightScheme,
};
use stackddd::inference::{
    aggregated_influence, crve_variance, multiplier_bootstrap, plugin_variance, pointwise_inference,
    replication_seed, BootstrapConfig, InfluenceTable, Multiplier,
};
use stackddd::simulation::{
    monte_carlo, simulate_panel, true_catt, weighted_truth, Assignment, CohortCurve, CohortCurves, CohortShare,
    Curve, DgpConfig, EligibilityTrend, EligibleShare, EstimatorSpec, TrendViolation,
};
use stackddd::stacks::{build_all_stacks, build_stack, materialize_stacked, OnInfeasible};
use stackddd::{CohortLabel, ComparisonRule, PanelDataset, Role, Stack, StackDesign, UnitRecord};
use CohortLabel::{Finite, Never};

type Check = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

// ---------------------------------------------------------------------------
// Shared fixtures

/// Unbalanced random panel: treated cohorts drawn from `2..=T`, a
/// never-treated cohort, cell sizes in `cell_sizes`, heterogeneous effects,
/// cohort and eligibility trends, and a fraction `missing` of dropped cells.
fn random_panel(rng: &mut ChaCha8Rng, t_range: (i64, i64), cell_sizes: (usize, usize), missing: f64) -> PanelDataset {
    let t_max = rng.random_range(t_range.0..=t_range.1);
    let mut cohorts: Vec<CohortLabel> = (2..=t_max).filter(|_| rng.random_bool(0.35)).map(Finite).collect();
    if cohorts.is_empty() {
        cohorts.push(Finite(rng.random_range(2..=t_max)));
    }
    cohorts.push(Never);
    let effect: BTreeMap<(i64, i64), f64> = cohorts
        .iter()
        .filter_map(|c| c.finite())
        .flat_map(|g| (0..=t_max - g).map(move |e| (g, e)))
        .map(|k| (k, rng.random_range(-2.0..3.0)))
        .collect();
    let elig_slope = rng.random_range(-0.5..0.5);
    let mut units = Vec::new();
    for c in cohorts {
        let slope = rng.random_range(-1.0..1.0);
        for q in [true, false] {
            let n = rng.random_range(cell_sizes.0..=cell_sizes.1);
            for k in 0..n {
                let a: f64 = rng.sample(StandardNormal);
                let mut ys = Vec::new();
                for t in 1..=t_max {
                    if rng.random_bool(missing) {
                        continue;
                    }
                    let noise: f64 = rng.sample(StandardNormal);
                    let mut y = a + slope * t as f64 + if q { elig_slope * (t * t) as f64 / 4.0 } else { 0.0 } + noise;
                    if let (Finite(g), true) = (c, q) {
                        if t >= g {
                            y += effect[&(g, t - g)];
                        }
                    }
                    ys.push((t, y));
                }
                units.push(UnitRecord::new(format!("{c}-{q}-{k}"), c, q).with_outcomes(ys));
            }
        }
    }
    PanelDataset::new(units, (1, t_max), BTreeMap::new()).expect("valid panel")
}

/// Least squares by the normal equations.
fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let xtx = x.transpose() * x;
    let xty = x.transpose() * y;
    xtx.cholesky().expect("full column rank").solve(&xty)
}

fn long_diff(ds: &PanelDataset, i: usize, t: i64, base: i64) -> Option<f64> {
    let u = ds.unit(i);
    Some(u.outcome(t)? - u.outcome(base)?)
}

/// Brute-force saturated regression of one stack at one period:
/// `ΔY ~ 1 + treated + eligible + treated·eligible`.
fn oracle_saturated(stack: &Stack, ds: &PanelDataset, t: i64) -> Option<[f64; 4]> {
    let mut rows = Vec::new();
    for r in Role::ALL {
        let treated = matches!(r, Role::TreatedEligible | Role::TreatedIneligible);
        let eligible = matches!(r, Role::TreatedEligible | Role::ComparisonEligible);
        for &i in stack.cell(r) {
            if let Some(d) = long_diff(ds, i, t, stack.baseline()) {
                rows.push((f64::from(treated), f64::from(eligible), d));
            }
        }
    }
    let x = DMatrix::from_fn(rows.len(), 4, |k, c| {
        let (tr, el, _) = rows[k];
        [1.0, tr, el, tr * el][c]
    });
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.2));
    let b = ols(&x, &y);
    Some([b[0], b[1], b[2], b[3]])
}

/// Usable cell counts of a stack at period `t`, counted from raw outcomes.
fn usable_counts(stack: &Stack, ds: &PanelDataset, t: i64) -> [usize; 4] {
    Role::ALL.map(|r| {
        stack
            .cell(r)
            .iter()
            .filter(|&&i| long_diff(ds, i, t, stack.baseline()).is_some())
            .count()
    })
}

/// Brute-force pooled stacked regression at event time `e`: stack-specific
/// intercept, treated and eligible dummies plus one common interaction.
fn oracle_pooled(stacks: &[Stack], ds: &PanelDataset, e: i64) -> Option<f64> {
    let used: Vec<&Stack> = stacks
        .iter()
        .filter(|s| s.spec.event_times().contains(&e) && usable_counts(s, ds, s.g() + e).iter().all(|&c| c > 0))
        .collect();
    if used.is_empty() {
        return None;
    }
    let p = 3 * used.len() + 1;
    let mut x_rows: Vec<Vec<f64>> = Vec::new();
    let mut y = Vec::new();
    for (k, s) in used.iter().enumerate() {
        for r in Role::ALL {
            let treated = matches!(r, Role::TreatedEligible | Role::TreatedIneligible);
            let eligible = matches!(r, Role::TreatedEligible | Role::ComparisonEligible);
            for &i in s.cell(r) {
                if let Some(d) = long_diff(ds, i, s.g() + e, s.baseline()) {
                    let mut row = vec![0.0; p];
                    row[3 * k] = 1.0;
                    row[3 * k + 1] = f64::from(treated);
                    row[3 * k + 2] = f64::from(eligible);
                    row[p - 1] = f64::from(treated && eligible);
                    x_rows.push(row);
                    y.push(d);
                }
            }
        }
    }
    let x = DMatrix::from_fn(x_rows.len(), p, |a, b| x_rows[a][b]);
    let b = ols(&x, &DVector::from_vec(y));
    Some(b[p - 1])
}

fn random_design(rng: &mut ChaCha8Rng) -> StackDesign {
    StackDesign::new(ComparisonRule::PreferNever, rng.random_range(1..=3), rng.random_range(0..=3))
}

fn base_dgp(n_units: usize, t_max: i64, seed: u64) -> DgpConfig {
    DgpConfig {
        n_units,
        t_max,
        seed,
        cohorts: vec![],
        never_share: 0.0,
        eligible_share: 0.5,
        eligible_share_by_cohort: vec![],
        group_time_trend: CohortCurves {
            default: Curve::Linear { intercept: 0.0, slope: 0.4 },
            by_cohort: vec![CohortCurve {
                cohort: Never,
                curve: Curve::Quadratic { a: 0.5, b: -0.3, c: 0.05 },
            }],
        },
        eligibility_time_trend: EligibilityTrend {
            eligible: Curve::Linear { intercept: 1.0, slope: 0.25 },
            ineligible: Curve::Step { at: 3.0, before: 0.0, after: -0.4 },
        },
        violation: None,
        catt: CohortCurves::default(),
        noise_sd: 1.0,
        unit_effect_sd: 1.0,
        assignment: Assignment::Fixed,
    }
}

fn shares(list: &[(i64, f64)]) -> Vec<CohortShare> {
    list.iter().map(|&(g, share)| CohortShare { g, share }).collect()
}

// ---------------------------------------------------------------------------
// Checks

fn closed_form_vs_ols() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst, mut compared) = (0.0f64, 0usize);
    for _ in 0..200 {
        let ds = random_panel(&mut rng, (4, 10), (4, 40), 0.05);
        let set = build_all_stacks(&ds, &random_design(&mut rng), OnInfeasible::Skip).unwrap();
        for s in &set.stacks {
            for e in s.spec.event_times() {
                let t = s.g() + e;
                let Ok(c) = saturated_ols(s, &ds, t) else { continue };
                let o = oracle_saturated(s, &ds, t).unwrap();
                for (a, b) in [c.mu, c.lambda, c.eta, c.tau_sat].iter().zip(o) {
                    worst = worst.max((a - b).abs());
                }
                compared += 1;
            }
        }
        let stacked = materialize_stacked(&set.stacks, &ds).unwrap();
        for (e, tau) in pooled_event_study(&stacked, &set.stacks).unwrap() {
            let o = oracle_pooled(&set.stacks, &ds, e).unwrap();
            worst = worst.max((tau - o).abs());
            compared += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-10 && secs < 10.0 && compared > 1000,
        format!("max |closed form - OLS| = {worst:.2e} over {compared} fits, {secs:.2} s"),
    )
}

fn fwl_weight_law() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut est_err, mut w_err, mut sum_err, mut min_w, mut points) = (0.0f64, 0.0f64, 0.0f64, f64::INFINITY, 0);
    for _ in 0..200 {
        let ds = random_panel(&mut rng, (4, 10), (4, 40), 0.05);
        let set = build_all_stacks(&ds, &random_design(&mut rng), OnInfeasible::Skip).unwrap();
        if set.stacks.is_empty() {
            continue;
        }
        let es = event_study(&set.stacks, &ds, &WeightScheme::Fwl).unwrap();
        for p in &es.points {
            // Harmonic-count weights and per-stack OLS contrasts, both from raw data.
            let mut v = BTreeMap::new();
            let mut tau = BTreeMap::new();
            for s in set.stacks.iter().filter(|s| s.spec.event_times().contains(&p.e)) {
                let n = usable_counts(s, &ds, s.g() + p.e);
                if n.iter().all(|&c| c > 0) {
                    v.insert(s.g(), 1.0 / n.iter().map(|&c| 1.0 / c as f64).sum::<f64>());
                    tau.insert(s.g(), oracle_saturated(s, &ds, s.g() + p.e).unwrap()[3]);
                }
            }
            let total: f64 = v.values().sum();
            let w: BTreeMap<i64, f64> = v.iter().map(|(&g, &x)| (g, x / total)).collect();
            let lib_w = fwl_weights(&set.stacks, &ds, p.e).unwrap();
            for (g, x) in &w {
                w_err = w_err.max((x - lib_w[g]).abs()).max((x - p.weights_used[g]).abs());
            }
            w_err = w_err.max(if lib_w.len() == w.len() { 0.0 } else { 1.0 });
            sum_err = sum_err.max((lib_w.values().sum::<f64>() - 1.0).abs());
            min_w = lib_w.values().fold(min_w, |m, &x| m.min(x));
            let combo: f64 = w.iter().map(|(g, x)| x * tau[g]).sum();
            let pooled = oracle_pooled(&set.stacks, &ds, p.e).unwrap();
            est_err = est_err.max((combo - pooled).abs()).max((combo - p.estimate).abs());
            points += 1;
        }
    }
    outcome(
        est_err <= 1e-10 && w_err <= 1e-12 && sum_err <= 1e-12 && min_w > 0.0,
        format!(
            "{points} event times: |pooled - Σ w τ| {est_err:.2e}, weight diff {w_err:.2e}, |Σw - 1| {sum_err:.2e}, min w {min_w:.3}"
        ),
    )
}

fn toy_config(catt: CohortCurves) -> DgpConfig {
    DgpConfig {
        cohorts: shares(&[(2, 0.5), (3, 0.5)]),
        eligible_share: 0.4,
        catt,
        noise_sd: 0.0,
        unit_effect_sd: 0.0,
        ..base_dgp(10, 4, 3)
    }
}

fn toy_weights() -> Outcome {
    let ds = simulate_panel(&toy_config(CohortCurves::default())).unwrap();
    let tab = aux_weights(&ds, SpecKind::HwStyle, (1, 0)).unwrap();
    let find = |g: i64, ell: i64| tab.weights.iter().find(|w| w.g == Finite(g) && w.ell == ell && w.j == 0).unwrap();
    let mut err = 0.0f64;
    for (g, ell, target) in [(2, 0, 0.5), (3, 0, 0.5), (2, 1, -0.5), (3, -1, -0.5)] {
        err = err.max((find(g, ell).omega - target).abs());
    }
    for g in [2, 3] {
        err = err.max((find(g, 0).partial_residual.unwrap() - 0.3).abs());
    }
    err = err.max((tab.partial_residual_variance[&0] - 0.12).abs());
    let catt: BTreeMap<(i64, i64), f64> = tab
        .weights
        .iter()
        .filter_map(|w| Some((w.g.finite()?, w.ell)))
        .map(|(g, ell)| ((g, ell), if ell >= 0 { 2.0 } else { 0.0 }))
        .collect();
    let alpha = implied_estimand(&tab, &catt).unwrap()[&0];
    let alpha_err = (alpha - 1.0).abs();
    outcome(
        err <= 1e-10 && alpha_err <= 1e-10,
        format!("max weight/residual/σ² error {err:.2e}, implied α_0 = {alpha:.12}"),
    )
}

fn weight_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut worst, mut omega_err, mut designs, mut failures) = (0.0f64, 0.0f64, 0, Vec::new());
    while designs < 100 {
        let ds = random_panel(&mut rng, (4, 9), (2, 12), 0.0);
        let gs = ds.treated_cohorts();
        let (g_min, g_max) = (*gs.first().unwrap(), *gs.last().unwrap());
        let (_, t_max) = ds.time_range();
        let pre = rng.random_range(1..=(g_max - 1).clamp(1, 4));
        let post = rng.random_range(0..=(t_max - g_min).min(3));
        let tab = match aux_weights(&ds, SpecKind::HwStyle, (pre, post)) {
            Ok(t) => t,
            Err(e) => {
                failures.push(e.to_string());
                designs += 1;
                continue;
            }
        };
        let rep = check_weight_properties(&tab, 1e-10);
        for c in &rep.checks {
            worst = worst
                .max((c.own_sum - 1.0).abs())
                .max(c.other_included_max)
                .max((c.excluded_sum + 1.0).abs())
                .max(c.never_max);
        }
        let post_js: Vec<i64> = tab.event_times_included.iter().copied().filter(|&j| j >= 0).collect();
        let w: BTreeMap<i64, f64> = post_js.iter().map(|&j| (j, 1.0 / post_js.len() as f64)).collect();
        let agg = aggregated_weights(&tab, &w).unwrap();
        omega_err = omega_err.max((agg.post_sum - 1.0).abs());
        if !rep.all_ok || !agg.normalization_ok {
            failures.push(format!("window ({pre},{post})"));
        }
        designs += 1;
    }
    outcome(
        failures.is_empty() && worst <= 1e-10 && omega_err <= 1e-10,
        format!(
            "{designs} designs: max identity deviation {worst:.2e}, |ΣΩ - 1| {omega_err:.2e}, {} failures{}",
            failures.len(),
            failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
        ),
    )
}

fn heterogeneous_catt() -> CohortCurves {
    CohortCurves {
        default: Curve::Linear { intercept: 1.0, slope: 0.5 },
        by_cohort: vec![
            CohortCurve {
                cohort: Finite(3),
                curve: Curve::Quadratic { a: -1.0, b: 2.0, c: -0.3 },
            },
            CohortCurve {
                cohort: Finite(7),
                curve: Curve::Step { at: 1.0, before: 4.0, after: -2.5 },
            },
        ],
    }
}

fn zero_noise_identification() -> Outcome {
    let cfg = DgpConfig {
        cohorts: shares(&[(3, 0.25), (5, 0.25), (7, 0.2)]),
        never_share: 0.3,
        eligible_share_by_cohort: vec![
            EligibleShare { cohort: Finite(3), share: 0.3 },
            EligibleShare { cohort: Never, share: 0.65 },
        ],
        catt: heterogeneous_catt(),
        noise_sd: 0.0,
        ..base_dgp(600, 9, 55)
    };
    let ds = simulate_panel(&cfg).unwrap();
    let set = build_all_stacks(&ds, &StackDesign::new(ComparisonRule::PreferNever, 3, 3), OnInfeasible::Error).unwrap();
    let (mut post_err, mut pre_err, mut cells) = (0.0f64, 0.0f64, 0);
    for s in &set.stacks {
        for x in stack_event_study(s, &ds).entries.iter().filter(|x| x.feasible) {
            let err = (x.estimate.unwrap() - true_catt(&cfg, s.g(), x.e).unwrap()).abs();
            if x.e < 0 {
                pre_err = pre_err.max(err);
            } else {
                post_err = post_err.max(err);
            }
            cells += 1;
        }
    }
    let es = event_study(&set.stacks, &ds, &WeightScheme::CohortSize).unwrap();
    let agg_err = es
        .points
        .iter()
        .map(|p| (p.estimate - weighted_truth(&cfg, &p.weights_used, p.e).unwrap()).abs())
        .fold(0.0, f64::max);
    outcome(
        post_err <= 1e-10 && pre_err <= 1e-10 && agg_err <= 1e-10 && cells > 10,
        format!("{cells} (g,e) cells: max post error {post_err:.2e}, max pre error {pre_err:.2e}, aggregate {agg_err:.2e}"),
    )
}

fn coverage() -> Outcome {
    let cfg = DgpConfig {
        cohorts: shares(&[(4, 0.3), (6, 0.3)]),
        never_share: 0.4,
        catt: CohortCurves {
            default: Curve::Linear { intercept: 1.0, slope: 0.5 },
            by_cohort: vec![CohortCurve {
                cohort: Finite(6),
                curve: Curve::Constant { value: -0.5 },
            }],
        },
        ..base_dgp(2000, 8, 6)
    };
    let spec = EstimatorSpec::Stacked {
        name: "stacked".into(),
        design: StackDesign::new(ComparisonRule::PreferNever, 2, 2),
        weights: WeightScheme::CohortSize,
        alpha: 0.05,
    };
    let start = Instant::now();
    let mc = monte_carlo(&cfg, &[spec], 500).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let cov: Vec<f64> = (0..=2)
        .map(|e| mc.row("stacked", None, e).and_then(|r| r.coverage).unwrap_or(f64::NAN))
        .collect();
    outcome(
        cov.iter().all(|c| (0.92..=0.98).contains(c)) && mc.failures.is_empty() && secs < 120.0,
        format!("coverage at e=0,1,2: {:.3} {:.3} {:.3}, {secs:.1} s", cov[0], cov[1], cov[2]),
    )
}

/// Independent influence contributions `c_g ψ_g(i)` for each stack at `e`.
fn scaled_psi(stacks: &[Stack], ds: &PanelDataset, w: &BTreeMap<i64, f64>, e: i64, n: usize) -> Vec<BTreeMap<usize, f64>> {
    stacks
        .iter()
        .map(|s| {
            let t = s.g() + e;
            let usable: Vec<Vec<(usize, f64)>> = Role::ALL
                .iter()
                .map(|&r| s.cell(r).iter().filter_map(|&i| Some((i, long_diff(ds, i, t, s.baseline())?))).collect())
                .collect();
            let n_g: usize = usable.iter().map(Vec::len).sum();
            let c = n as f64 * w[&s.g()] / n_g as f64;
            let mut out = BTreeMap::new();
            for (r, cell) in Role::ALL.iter().zip(&usable) {
                let mean = cell.iter().map(|x| x.1).sum::<f64>() / cell.len() as f64;
                let pi = cell.len() as f64 / n_g as f64;
                for &(i, d) in cell {
                    out.insert(i, c * r.sign() / pi * (d - mean));
                }
            }
            out
        })
        .collect()
}

fn shared_control_variance() -> Outcome {
    let cfg = DgpConfig {
        cohorts: shares(&[(2, 0.2), (3, 0.2), (5, 0.2), (6, 0.2)]),
        never_share: 0.2,
        eligible_share: 0.45,
        catt: heterogeneous_catt(),
        ..base_dgp(800, 7, 77)
    };
    let ds = simulate_panel(&cfg).unwrap();
    let members = |s: &[Stack]| s.iter().flat_map(|x| x.members().map(|m| m.1)).collect::<std::collections::BTreeSet<_>>().len();

    // Stacks 2 and 3 against the never-treated pool.
    let never = StackDesign::new(ComparisonRule::PreferNever, 1, 1);
    let shared: Vec<Stack> = [2, 3].iter().map(|&g| build_stack(&ds, g, &never).unwrap()).collect();
    // Stacks 2 and 3 against disjoint late cohorts.
    let disjoint = vec![
        build_stack(&ds, 2, &StackDesign::new(ComparisonRule::Explicit(Finite(5)), 1, 1)).unwrap(),
        build_stack(&ds, 3, &StackDesign::new(ComparisonRule::Explicit(Finite(6)), 1, 1)).unwrap(),
    ];
    let (mut shared_err, mut min_cross, mut disjoint_err, mut pooled_once) = (0.0f64, f64::INFINITY, 0.0f64, true);
    for e in [0, 1] {
        for (stacks, is_shared) in [(&shared, true), (&disjoint, false)] {
            let w = fwl_weights(stacks, &ds, e).unwrap();
            let lib = aggregated_influence(stacks, &ds, &w, e).unwrap();
            let v_lib = plugin_variance(lib.phi.values().copied(), lib.n).unwrap();
            let n = members(stacks);
            pooled_once &= lib.n == n;
            let parts = scaled_psi(stacks, &ds, &w, e, n);
            let mut phi: BTreeMap<usize, f64> = BTreeMap::new();
            for p in &parts {
                for (&i, &v) in p {
                    *phi.entry(i).or_default() += v;
                }
            }
            let v_unit = phi.values().map(|x| x * x).sum::<f64>() / n as f64;
            let v_naive = parts.iter().flat_map(|p| p.values()).map(|x| x * x).sum::<f64>() / n as f64;
            let cross = 2.0 * parts[0].iter().filter_map(|(i, a)| Some(a * parts[1].get(i)?)).sum::<f64>() / n as f64;
            if is_shared {
                shared_err = shared_err
                    .max((v_lib - v_unit).abs() / v_lib)
                    .max(((v_lib - v_naive) - cross).abs() / v_lib);
                min_cross = min_cross.min(cross.abs() / v_lib);
            } else {
                disjoint_err = disjoint_err.max((v_lib - v_naive).abs() / v_lib);
            }
        }
    }
    outcome(
        shared_err <= 1e-10 && min_cross > 1e-4 && disjoint_err <= 1e-10 && pooled_once,
        format!(
            "shared pool: gap to naive sum matches cross term to {shared_err:.2e} rel, |cross|/V >= {min_cross:.3}; disjoint: rel diff {disjoint_err:.2e}"
        ),
    )
}

fn large_design(catt: CohortCurves) -> DgpConfig {
    DgpConfig {
        cohorts: shares(&[(4, 0.3), (6, 0.3)]),
        never_share: 0.4,
        catt,
        ..base_dgp(5000, 8, 8)
    }
}

fn common_path() -> CohortCurves {
    CohortCurves::uniform(Curve::Linear { intercept: 1.0, slope: 0.5 })
}

fn bootstrap_agreement() -> Outcome {
    let ds = simulate_panel(&large_design(common_path())).unwrap();
    let set = build_all_stacks(&ds, &StackDesign::new(ComparisonRule::PreferNever, 2, 2), OnInfeasible::Error).unwrap();
    let es = event_study(&set.stacks, &ds, &WeightScheme::Fwl).unwrap();
    let table = InfluenceTable::build(&set.stacks, &ds, &es).unwrap();
    let cfg = BootstrapConfig {
        b: 2000,
        multiplier: Multiplier::Rademacher,
        seed: 42,
        alpha: 0.05,
    };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| multiplier_bootstrap(&table, &es.estimates(), &cfg).unwrap())
    };
    let band = run(4);
    let identical = band == run(1) && band == run(3);
    let mut worst = 0.0f64;
    for p in band.points.iter().filter(|p| p.e >= 0) {
        let target = table.plugin(p.e).unwrap() / table.by_e[&p.e].n as f64;
        worst = worst.max((p.v_boot / target - 1.0).abs());
    }
    outcome(
        worst <= 0.10 && identical,
        format!("max |V_boot / (V/n) - 1| over post e = {worst:.4}, bands identical across 1/3/4 workers: {identical}"),
    )
}

/// Worst relative gap between clustered and plug-in variances over all event times.
fn crve_gap(catt: CohortCurves) -> f64 {
    let ds = simulate_panel(&large_design(catt)).unwrap();
    let set = build_all_stacks(&ds, &StackDesign::new(ComparisonRule::PreferNever, 2, 2), OnInfeasible::Error).unwrap();
    let es = event_study(&set.stacks, &ds, &WeightScheme::Fwl).unwrap();
    let table = InfluenceTable::build(&set.stacks, &ds, &es).unwrap();
    let stacked = materialize_stacked(&set.stacks, &ds).unwrap();
    let inf = pointwise_inference(&table, &es, Some((&stacked, &set.stacks)), 0.05, false).unwrap();
    let mut worst = 0.0f64;
    for v in &inf {
        let direct = crve_variance(&stacked, &set.stacks, v.e, false).unwrap();
        assert_eq!(Some(direct), v.v_crve);
        worst = worst.max((direct / (v.v_plugin / v.n as f64) - 1.0).abs());
    }
    worst
}

fn crve_agreement() -> Outcome {
    let worst = crve_gap(common_path());
    let hetero = crve_gap(CohortCurves {
        default: Curve::Linear { intercept: 1.0, slope: 0.5 },
        by_cohort: vec![CohortCurve {
            cohort: Finite(6),
            curve: Curve::Constant { value: -0.5 },
        }],
    });
    outcome(
        worst <= 0.05,
        format!("max |CRVE / (V/n) - 1| = {worst:.4} (cohort-heterogeneous effects: {hetero:.4})"),
    )
}

fn contamination() -> Outcome {
    // Early cohort: 2 on impact, 4 one period later.
    let dynamic = toy_config(CohortCurves::uniform(Curve::Step { at: 1.0, before: 2.0, after: 4.0 }));
    let ds = simulate_panel(&dynamic).unwrap();
    let pooled_dyn = pooled_3wfe_event_study(&ds, SpecKind::HwStyle, (1, 0)).unwrap()[&0];
    let set = build_all_stacks(&ds, &StackDesign::new(ComparisonRule::PreferNever, 1, 0), OnInfeasible::Skip).unwrap();
    let stacked_dyn = event_study(&set.stacks, &ds, &WeightScheme::Fwl).unwrap().point(0).unwrap().estimate;

    // Common static effect, never-treated units, every relative period included.
    let att = 1.75;
    let stat = DgpConfig {
        cohorts: shares(&[(2, 0.3), (3, 0.3)]),
        never_share: 0.4,
        eligible_share: 0.4,
        catt: CohortCurves::uniform(Curve::Constant { value: att }),
        noise_sd: 0.0,
        ..base_dgp(40, 4, 9)
    };
    let ds = simulate_panel(&stat).unwrap();
    let pooled = pooled_3wfe_event_study(&ds, SpecKind::HwStyle, (2, 2)).unwrap();
    let set = build_all_stacks(&ds, &StackDesign::new(ComparisonRule::PreferNever, 2, 2), OnInfeasible::Error).unwrap();
    let stacked = event_study(&set.stacks, &ds, &WeightScheme::Fwl).unwrap();
    let truth = |j: i64| if j >= 0 { att } else { 0.0 };
    let static_err = pooled
        .iter()
        .map(|(&j, a)| (a - truth(j)).abs())
        .chain(stacked.points.iter().map(|p| (p.estimate - truth(p.e)).abs()))
        .fold(0.0, f64::max);
    outcome(
        pooled_dyn.abs() <= 1e-10 && (stacked_dyn - 2.0).abs() <= 1e-10 && static_err <= 1e-10,
        format!(
            "dynamic: pooled α_0 = {pooled_dyn:.3e}, stacked e=0 = {stacked_dyn:.12}; static: max error {static_err:.2e}"
        ),
    )
}

fn pairwise_robustness() -> Outcome {
    let g_star = 6;
    let cfg = DgpConfig {
        cohorts: shares(&[(4, 0.35), (g_star, 0.35)]),
        never_share: 0.3,
        violation: Some(TrendViolation { cohort: g_star, gamma: 0.25 }),
        catt: heterogeneous_catt(),
        ..base_dgp(2000, 9, 11)
    };
    let design = StackDesign::new(ComparisonRule::PreferNever, 3, 2);
    let reps = 200;
    let spec = EstimatorSpec::Stacked {
        name: "stacked".into(),
        design,
        weights: WeightScheme::Fwl,
        alpha: 0.05,
    };
    let mc = monte_carlo(&cfg, &[spec], reps).unwrap();
    let z = |r: &stackddd::simulation::McRow| {
        let sd = (r.rmse * r.rmse - r.mean_bias * r.mean_bias).max(0.0).sqrt();
        r.mean_bias.abs() / (sd / (r.reps_used as f64).sqrt())
    };
    let other: Vec<f64> = mc.rows.iter().filter(|r| r.g == Some(4)).map(z).collect();
    let biased: Vec<f64> = mc.rows.iter().filter(|r| r.g == Some(g_star) && r.e >= 0).map(z).collect();

    // Per-stack joint pre-trend tests over the same replications.
    let (mut reject_star, mut reject_other) = (0usize, 0usize);
    for b in 0..reps {
        let mut c = cfg.clone();
        c.seed = replication_seed(cfg.seed, b as u64);
        let ds = simulate_panel(&c).unwrap();
        for g in [4, g_star] {
            let s = build_stack(&ds, g, &design).unwrap();
            let tab = stack_event_study(&s, &ds);
            let rep = pretrend_test(std::slice::from_ref(&s), &ds, std::slice::from_ref(&tab)).unwrap();
            if rep.p_value < 0.05 {
                if g == g_star {
                    reject_star += 1;
                } else {
                    reject_other += 1;
                }
            }
        }
    }
    let power = reject_star as f64 / reps as f64;
    let size = reject_other as f64 / reps as f64;
    let max_other = other.iter().copied().fold(0.0, f64::max);
    let min_star = biased.iter().copied().fold(f64::INFINITY, f64::min);
    outcome(
        max_other <= 3.0 && min_star > 3.0 && power > 0.8 && !other.is_empty(),
        format!(
            "other cohort max |bias|/MC se {max_other:.2}; violating cohort min {min_star:.1}; pre-trend power {power:.3} (other cohort {size:.3})"
        ),
    )
}

fn main() {
    let checks: [Check; 11] = [
        ("closed-form vs brute-force OLS", closed_form_vs_ols),
        ("FWL weight law", fwl_weight_law),
        ("two-cohort toy weights", toy_weights),
        ("weight identities", weight_identities),
        ("zero-noise identification", zero_noise_identification),
        ("pointwise coverage", coverage),
        ("shared-control variance", shared_control_variance),
        ("bootstrap vs plug-in", bootstrap_agreement),
        ("clustered vs plug-in", crve_agreement),
        ("pooled contamination", contamination),
        ("pairwise trend robustness", pairwise_robustness),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (k, (name, f)) in checks.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        println!("{} {:>2} {name}: {}", if res.pass { "PASS" } else { "FAIL" }, k + 1, res.detail);
        failed += usize::from(!res.pass);
    }
    if failed > 0 {
        println!("{failed} acceptance check(s) failed");
        std::process::exit(1);
    }
}
