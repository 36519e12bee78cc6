//! Forensics for pooled three-way fixed-effects event studies: demeaning,
//! implicit weights on cohort-specific effects, their aggregation, and a
//! joint pre-trend test on stacked estimates.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::estimators::{CellSamples, StackAttTable};
use crate::panel::{CohortLabel, PanelDataset, UnitIdx};
use crate::stacks::{Role, Stack};

const DEMEAN_TOL: f64 = 1e-12;
const DEMEAN_MAX_SWEEPS: usize = 50_000;

/// Fixed-effect structure of the pooled regression.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecKind {
    /// Unit, group-by-time and eligibility-by-time effects.
    #[default]
    HwStyle,
    /// Unit, time and group-by-time effects only.
    Plain3wfe,
}

/// Alternating-projection demeaning over the observed `(unit, time)` cells.
#[derive(Clone, Debug)]
pub struct Demeaner {
    obs: Vec<(UnitIdx, i64)>,
    /// Group id of each observation and group sizes, per fixed-effect margin.
    margins: Vec<(Vec<usize>, Vec<f64>)>,
}

impl Demeaner {
    pub fn new(ds: &PanelDataset, spec: SpecKind) -> Self {
        let obs: Vec<(UnitIdx, i64)> = ds
            .units()
            .iter()
            .enumerate()
            .flat_map(|(i, u)| u.observed_times().map(move |t| (i, t)))
            .collect();
        let (t_min, t_max) = ds.time_range();
        let width = (t_max - t_min + 1) as usize;
        let cohorts: BTreeMap<CohortLabel, usize> = ds.cohorts().into_iter().enumerate().map(|(k, c)| (c, k)).collect();
        let unit_ids: Vec<usize> = obs.iter().map(|&(i, _)| i).collect();
        let st_ids: Vec<usize> = obs
            .iter()
            .map(|&(i, t)| cohorts[&ds.unit(i).cohort] * width + (t - t_min) as usize)
            .collect();
        let mut margins = vec![
            with_counts(unit_ids, ds.len()),
            with_counts(st_ids, cohorts.len() * width),
        ];
        if spec == SpecKind::HwStyle {
            let qt: Vec<usize> = obs
                .iter()
                .map(|&(i, t)| usize::from(ds.unit(i).eligible) * width + (t - t_min) as usize)
                .collect();
            margins.push(with_counts(qt, 2 * width));
        }
        Demeaner { obs, margins }
    }

    /// Observed cells in the order used by [`Demeaner::apply`].
    pub fn obs(&self) -> &[(UnitIdx, i64)] {
        &self.obs
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut z = x.to_vec();
        let scale = z.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let mut sums: Vec<Vec<f64>> = self.margins.iter().map(|(_, c)| vec![0.0; c.len()]).collect();
        let mut change = f64::INFINITY;
        for _ in 0..DEMEAN_MAX_SWEEPS {
            change = 0.0;
            for ((ids, counts), s) in self.margins.iter().zip(sums.iter_mut()) {
                s.iter_mut().for_each(|v| *v = 0.0);
                for (&g, &v) in ids.iter().zip(&z) {
                    s[g] += v;
                }
                for (&g, v) in ids.iter().zip(z.iter_mut()) {
                    let m = s[g] / counts[g];
                    *v -= m;
                    change = change.max(m.abs());
                }
            }
            if change <= DEMEAN_TOL * scale {
                return Ok(z);
            }
        }
        Err(Error::Convergence {
            iterations: DEMEAN_MAX_SWEEPS,
            change,
        })
    }
}

fn with_counts(ids: Vec<usize>, groups: usize) -> (Vec<usize>, Vec<f64>) {
    let mut c = vec![0.0; groups];
    for &g in &ids {
        c[g] += 1.0;
    }
    (ids, c)
}

/// Residualize `values` on the fixed effects of `spec`. Every observed
/// cell of the panel must carry a value.
pub fn demean(
    values: &BTreeMap<(UnitIdx, i64), f64>,
    ds: &PanelDataset,
    spec: SpecKind,
) -> Result<BTreeMap<(UnitIdx, i64), f64>> {
    let dm = Demeaner::new(ds, spec);
    let x = dm
        .obs()
        .iter()
        .map(|k| {
            values
                .get(k)
                .copied()
                .ok_or_else(|| Error::MissingInput(format!("value for unit {} at time {}", ds.unit(k.0).id, k.1)))
        })
        .collect::<Result<Vec<f64>>>()?;
    let z = dm.apply(&x)?;
    Ok(dm.obs().iter().copied().zip(z).collect())
}

/// Demeaned aggregate event-time indicators and their Gram system.
struct EventDesign {
    dm: Demeaner,
    n_units: usize,
    included: Vec<i64>,
    rdd: Vec<Vec<f64>>,
    ginv: DMatrix<f64>,
}

fn event_indicator(ds: &PanelDataset, obs: &[(UnitIdx, i64)], e: i64) -> Vec<f64> {
    obs.iter()
        .map(|&(i, t)| {
            let u = ds.unit(i);
            match u.cohort {
                CohortLabel::Finite(g) if u.eligible && t - g == e => 1.0,
                _ => 0.0,
            }
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl EventDesign {
    fn new(ds: &PanelDataset, spec: SpecKind, window: (i64, i64)) -> Result<Self> {
        let (pre, post) = window;
        if pre < 1 || post < 0 {
            return Err(Error::Parameter(format!("window (L={pre}, K={post}) needs L >= 1 and K >= 0")));
        }
        if ds.treated_cohorts().is_empty() {
            return Err(Error::EmptyInput("panel has no treated cohort".into()));
        }
        let dm = Demeaner::new(ds, spec);
        let included: Vec<i64> = (-pre..=post).filter(|&e| e != -1).collect();
        let rdd = included
            .par_iter()
            .map(|&e| dm.apply(&event_indicator(ds, dm.obs(), e)))
            .collect::<Result<Vec<_>>>()?;
        let dependent = dependent_columns(&rdd);
        if !dependent.is_empty() {
            return Err(Error::Collinearity(dependent.into_iter().map(|k| included[k]).collect()));
        }
        let m = included.len();
        let gram = DMatrix::from_fn(m, m, |a, b| dot(&rdd[a], &rdd[b]));
        let ginv = gram
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| Error::Collinearity(included.clone()))?;
        Ok(EventDesign {
            dm,
            n_units: ds.len(),
            included,
            rdd,
            ginv,
        })
    }

    /// `Σ R̈ x` over observed cells.
    fn cross(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.rdd.len(), self.rdd.iter().map(|r| dot(r, x)))
    }
}

/// Columns whose Gram–Schmidt remainder is negligible relative to their norm.
fn dependent_columns(cols: &[Vec<f64>]) -> Vec<usize> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut dependent = Vec::new();
    for (k, c) in cols.iter().enumerate() {
        let norm0 = dot(c, c);
        let mut r = c.clone();
        for b in &basis {
            let p = dot(&r, b);
            r.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let norm = dot(&r, &r);
        if norm0 <= 1e-20 || norm <= 1e-10 * norm0 {
            dependent.push(k);
        } else {
            let s = norm.sqrt();
            basis.push(r.into_iter().map(|x| x / s).collect());
        }
    }
    dependent
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxWeight {
    pub g: CohortLabel,
    pub ell: i64,
    pub j: i64,
    pub omega: f64,
    /// Partial residual of `R_j` at the treated-eligible cell of `g` at `g + ell`.
    pub partial_residual: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxWeightTable {
    pub spec: SpecKind,
    pub window: (i64, i64),
    pub event_times_included: Vec<i64>,
    /// Per-unit partial residual variance `σ²_j`.
    pub partial_residual_variance: BTreeMap<i64, f64>,
    pub n_units: usize,
    pub weights: Vec<AuxWeight>,
}

impl AuxWeightTable {
    pub fn omega(&self, g: CohortLabel, ell: i64, j: i64) -> f64 {
        self.weights
            .iter()
            .find(|w| w.g == g && w.ell == ell && w.j == j)
            .map_or(0.0, |w| w.omega)
    }

    /// Tidy rows `g, ell, j, omega`.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["g", "ell", "j", "omega"])?;
        for x in &self.weights {
            w.write_record([x.g.to_string(), x.ell.to_string(), x.j.to_string(), format!("{:?}", x.omega)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Treated-eligible observations of cohort `g` at time `g + ell`, as positions in `obs`.
fn te_positions(ds: &PanelDataset, obs: &[(UnitIdx, i64)]) -> BTreeMap<(i64, i64), Vec<usize>> {
    let mut out: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
    for (k, &(i, t)) in obs.iter().enumerate() {
        let u = ds.unit(i);
        if let (CohortLabel::Finite(g), true) = (u.cohort, u.eligible) {
            out.entry((g, t - g)).or_default().push(k);
        }
    }
    out
}

/// Implicit weights `ω^j_{g,ℓ}` of the pooled specification on every
/// cohort-specific indicator `R_{g,ℓ}` with `g + ℓ` in the observed range.
pub fn aux_weights(ds: &PanelDataset, spec: SpecKind, window: (i64, i64)) -> Result<AuxWeightTable> {
    let d = EventDesign::new(ds, spec, window)?;
    let m = d.included.len();
    let n = d.n_units as f64;
    // Partial residuals R̃_j = Σ_e Ginv_{je} R̈_e / Ginv_{jj}.
    let partial: Vec<Vec<f64>> = (0..m)
        .map(|j| {
            let mut r = vec![0.0; d.dm.obs().len()];
            for e in 0..m {
                let c = d.ginv[(j, e)] / d.ginv[(j, j)];
                r.iter_mut().zip(&d.rdd[e]).for_each(|(x, y)| *x += c * y);
            }
            r
        })
        .collect();
    let mut weights = Vec::new();
    for ((g, ell), pos) in te_positions(ds, d.dm.obs()) {
        let b = DVector::from_iterator(m, d.rdd.iter().map(|r| pos.iter().map(|&k| r[k]).sum::<f64>()));
        let omega = &d.ginv * b;
        for (jk, &j) in d.included.iter().enumerate() {
            let pr = pos.iter().map(|&k| partial[jk][k]).sum::<f64>() / pos.len() as f64;
            weights.push(AuxWeight {
                g: CohortLabel::Finite(g),
                ell,
                j,
                omega: omega[jk],
                partial_residual: Some(pr),
            });
        }
    }
    if ds.cohorts().contains(&CohortLabel::Never) {
        for &ell in &d.included {
            for &j in &d.included {
                weights.push(AuxWeight {
                    g: CohortLabel::Never,
                    ell,
                    j,
                    omega: 0.0,
                    partial_residual: None,
                });
            }
        }
    }
    let sigma = d
        .included
        .iter()
        .enumerate()
        .map(|(k, &j)| (j, 1.0 / (n * d.ginv[(k, k)])))
        .collect();
    Ok(AuxWeightTable {
        spec,
        window,
        event_times_included: d.included,
        partial_residual_variance: sigma,
        n_units: d.n_units,
        weights,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyCheck {
    pub j: i64,
    /// Σ_g ω^j_{g,j}.
    pub own_sum: f64,
    pub own_ok: bool,
    /// Largest |Σ_g ω^j_{g,ℓ}| over included ℓ ≠ j.
    pub other_included_max: f64,
    pub other_ok: bool,
    /// Σ_g Σ_{ℓ not included} ω^j_{g,ℓ}.
    pub excluded_sum: f64,
    pub excluded_ok: bool,
    /// Σ_g ω^j_{g,-1} alone.
    pub reference_sum: f64,
    pub never_max: f64,
    pub never_ok: bool,
    /// Cohorts with a negative own-period weight.
    pub negative_own: Vec<i64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyReport {
    pub tol: f64,
    pub checks: Vec<PropertyCheck>,
    pub all_ok: bool,
}

pub fn check_weight_properties(table: &AuxWeightTable, tol: f64) -> PropertyReport {
    let included: BTreeSet<i64> = table.event_times_included.iter().copied().collect();
    let checks: Vec<PropertyCheck> = table
        .event_times_included
        .iter()
        .map(|&j| {
            let rows: Vec<&AuxWeight> = table.weights.iter().filter(|w| w.j == j).collect();
            let treated = |w: &&&AuxWeight| !w.g.is_never();
            let sum_at = |ell: i64| -> f64 { rows.iter().filter(treated).filter(|w| w.ell == ell).map(|w| w.omega).sum() };
            let own_sum = sum_at(j);
            let other_included_max = included
                .iter()
                .filter(|&&l| l != j)
                .map(|&l| sum_at(l).abs())
                .fold(0.0, f64::max);
            let excluded_sum: f64 = rows
                .iter()
                .filter(treated)
                .filter(|w| !included.contains(&w.ell))
                .map(|w| w.omega)
                .sum();
            let never_max = rows
                .iter()
                .filter(|w| w.g.is_never())
                .map(|w| w.omega.abs())
                .fold(0.0, f64::max);
            let negative_own = rows
                .iter()
                .filter(|w| w.ell == j && w.omega < -tol)
                .filter_map(|w| w.g.finite())
                .collect();
            PropertyCheck {
                j,
                own_sum,
                own_ok: (own_sum - 1.0).abs() <= tol,
                other_included_max,
                other_ok: other_included_max <= tol,
                excluded_sum,
                excluded_ok: (excluded_sum + 1.0).abs() <= tol,
                reference_sum: sum_at(-1),
                never_max,
                never_ok: never_max <= tol,
                negative_own,
            }
        })
        .collect();
    let all_ok = checks.iter().all(|c| c.own_ok && c.other_ok && c.excluded_ok && c.never_ok);
    PropertyReport { tol, checks, all_ok }
}

/// `α_j = Σ_{g, ℓ≠-1} ω^j_{g,ℓ} CATT(g,ℓ)`.
pub fn implied_estimand(table: &AuxWeightTable, catt: &BTreeMap<(i64, i64), f64>) -> Result<BTreeMap<i64, f64>> {
    let mut out: BTreeMap<i64, f64> = table.event_times_included.iter().map(|&j| (j, 0.0)).collect();
    for w in &table.weights {
        let CohortLabel::Finite(g) = w.g else { continue };
        if w.ell == -1 {
            continue;
        }
        match catt.get(&(g, w.ell)) {
            Some(c) => *out.get_mut(&w.j).expect("included j") += w.omega * c,
            None if w.omega.abs() > 1e-12 => return Err(Error::Coverage { g, ell: w.ell }),
            None => {}
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggWeight {
    pub g: i64,
    pub ell: i64,
    pub omega: f64,
    pub negative: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggWeightTable {
    pub w: BTreeMap<i64, f64>,
    pub weights: Vec<AggWeight>,
    /// Σ Ω over ℓ in [0, K].
    pub post_sum: f64,
    pub normalization_ok: bool,
}

impl AggWeightTable {
    pub fn get(&self, g: i64, ell: i64) -> f64 {
        self.weights.iter().find(|x| x.g == g && x.ell == ell).map_or(0.0, |x| x.omega)
    }
}

/// `Ω_{g,ℓ} = Σ_j w_j ω^j_{g,ℓ}` for post-period aggregation weights `w`.
pub fn aggregated_weights(table: &AuxWeightTable, w: &BTreeMap<i64, f64>) -> Result<AggWeightTable> {
    let post = table.window.1;
    if w.is_empty() {
        return Err(Error::Parameter("aggregation weights are empty".into()));
    }
    for (&j, &v) in w {
        if !(0..=post).contains(&j) {
            return Err(Error::Parameter(format!("aggregation weight on j={j} outside 0..={post}")));
        }
        if v.is_nan() || v < 0.0 || v.is_infinite() {
            return Err(Error::Parameter(format!("aggregation weight w_{j}={v} must be >= 0")));
        }
    }
    let total: f64 = w.values().sum();
    if (total - 1.0).abs() > 1e-10 {
        return Err(Error::Parameter(format!("aggregation weights sum to {total}, not 1")));
    }
    let mut acc: BTreeMap<(i64, i64), f64> = BTreeMap::new();
    for x in &table.weights {
        let CohortLabel::Finite(g) = x.g else { continue };
        if let Some(&wj) = w.get(&x.j) {
            *acc.entry((g, x.ell)).or_default() += wj * x.omega;
        }
    }
    let post_sum: f64 = acc.iter().filter(|((_, l), _)| (0..=post).contains(l)).map(|(_, v)| v).sum();
    let weights = acc
        .into_iter()
        .map(|((g, ell), omega)| AggWeight {
            g,
            ell,
            omega,
            negative: omega < -1e-12,
        })
        .collect();
    Ok(AggWeightTable {
        w: w.clone(),
        weights,
        post_sum,
        normalization_ok: (post_sum - 1.0).abs() <= 1e-10,
    })
}

fn outcome_vector(ds: &PanelDataset, obs: &[(UnitIdx, i64)]) -> Vec<f64> {
    obs.iter()
        .map(|&(i, t)| ds.unit(i).outcome(t).expect("observed cell"))
        .collect()
}

/// Pooled event-study coefficients `α̂_j` of the chosen specification.
pub fn pooled_3wfe_event_study(ds: &PanelDataset, spec: SpecKind, window: (i64, i64)) -> Result<BTreeMap<i64, f64>> {
    let d = EventDesign::new(ds, spec, window)?;
    let y = outcome_vector(ds, d.dm.obs());
    let alpha = &d.ginv * d.cross(&y);
    Ok(d.included.iter().copied().zip(alpha.iter().copied()).collect())
}

/// Pooled coefficients alongside the realized cohort-by-event-time contrasts
/// and the estimand those contrasts imply through the implicit weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub alpha: BTreeMap<i64, f64>,
    /// Fully interacted coefficients `ĉ_{g,ℓ}`, `ℓ ≠ -1`.
    pub contrasts: BTreeMap<(i64, i64), f64>,
    pub implied: BTreeMap<i64, f64>,
    pub max_discrepancy: f64,
}

/// Least-squares contrasts from regressing the outcome on every demeaned
/// cohort-specific indicator, solved by SVD so rank deficiency is tolerated.
pub fn realized_contrasts(ds: &PanelDataset, spec: SpecKind) -> Result<BTreeMap<(i64, i64), f64>> {
    let dm = Demeaner::new(ds, spec);
    let obs = dm.obs();
    let keys: Vec<(i64, i64)> = te_positions(ds, obs).into_keys().filter(|&(_, l)| l != -1).collect();
    let cols = keys
        .par_iter()
        .map(|&(g, l)| {
            let x: Vec<f64> = obs
                .iter()
                .map(|&(i, t)| {
                    let u = ds.unit(i);
                    f64::from(u.eligible && u.cohort == CohortLabel::Finite(g) && t - g == l)
                })
                .collect();
            dm.apply(&x)
        })
        .collect::<Result<Vec<_>>>()?;
    let y = dm.apply(&outcome_vector(ds, obs))?;
    let m = keys.len();
    let h = DMatrix::from_fn(m, m, |a, b| dot(&cols[a], &cols[b]));
    let r = DVector::from_iterator(m, cols.iter().map(|c| dot(c, &y)));
    let scale = h.diagonal().max().max(1.0);
    let c = h
        .svd(true, true)
        .solve(&r, 1e-11 * scale)
        .map_err(|e| Error::Config(format!("contrast solve failed: {e}")))?;
    Ok(keys.into_iter().zip(c.iter().copied()).collect())
}

pub fn decompose(ds: &PanelDataset, spec: SpecKind, window: (i64, i64)) -> Result<(AuxWeightTable, Decomposition)> {
    let table = aux_weights(ds, spec, window)?;
    let alpha = pooled_3wfe_event_study(ds, spec, window)?;
    let contrasts = realized_contrasts(ds, spec)?;
    let implied = implied_estimand(&table, &contrasts)?;
    let max_discrepancy = alpha
        .iter()
        .map(|(j, a)| (a - implied[j]).abs())
        .fold(0.0, f64::max);
    Ok((
        table,
        Decomposition {
            alpha,
            contrasts,
            implied,
            max_discrepancy,
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreTrendCoefficient {
    pub g: i64,
    pub e: i64,
    pub estimate: f64,
    pub se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreTrendReport {
    pub coefficients: Vec<PreTrendCoefficient>,
    pub joint_statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Wald statistic `xᵀ Σ⁺ x` with degrees of freedom equal to the rank of `cov`.
pub fn wald(x: &DVector<f64>, cov: &DMatrix<f64>) -> (f64, usize, f64) {
    if x.is_empty() {
        return (0.0, 0, 1.0);
    }
    let eig = cov.clone().symmetric_eigen();
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut stat = 0.0;
    let mut rank = 0;
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if top > 0.0 && lam > 1e-12 * top {
            let proj = eig.eigenvectors.column(k).dot(x);
            stat += proj * proj / lam;
            rank += 1;
        }
    }
    let p = if rank == 0 || stat <= 0.0 {
        1.0
    } else {
        ChiSquared::new(rank as f64).map_or(f64::NAN, |d| d.sf(stat))
    };
    (stat.max(0.0), rank, p)
}

/// Joint test that every feasible pre-period coefficient (`e < -1`) is zero,
/// with the covariance of the per-stack estimates built from unit-level
/// influence contributions so shared comparison units are accounted for.
pub fn pretrend_test(stacks: &[Stack], ds: &PanelDataset, tables: &[StackAttTable]) -> Result<PreTrendReport> {
    let mut coefs = Vec::new();
    let mut infl: Vec<BTreeMap<UnitIdx, f64>> = Vec::new();
    for (s, tab) in stacks.iter().zip(tables) {
        for x in tab.entries.iter().filter(|x| x.e < -1 && x.feasible) {
            let cs = CellSamples::collect(s, ds, s.g() + x.e);
            let n = cs.total() as f64;
            let means = cs.means();
            let mut psi = BTreeMap::new();
            for r in Role::ALL {
                let cell = &cs.cells[r.index()];
                let pi = cell.len() as f64 / n;
                for &(i, d) in cell {
                    psi.insert(i, r.sign() / pi * (d - means[r.index()]) / n);
                }
            }
            coefs.push((s.g(), x.e, x.estimate.expect("feasible entry")));
            infl.push(psi);
        }
    }
    let k = coefs.len();
    let cov = DMatrix::from_fn(k, k, |a, b| {
        infl[a]
            .iter()
            .filter_map(|(i, va)| infl[b].get(i).map(|vb| va * vb))
            .sum::<f64>()
    });
    let mut out = Vec::with_capacity(k);
    for (a, &(g, e, est)) in coefs.iter().enumerate() {
        let v = cov[(a, a)];
        if v <= 0.0 && est.abs() > 1e-12 {
            return Err(Error::DegenerateTest { g, e });
        }
        out.push(PreTrendCoefficient {
            g,
            e,
            estimate: est,
            se: v.max(0.0).sqrt(),
        });
    }
    let x = DVector::from_iterator(k, coefs.iter().map(|c| c.2));
    let (joint_statistic, dof, p_value) = wald(&x, &cov);
    Ok(PreTrendReport {
        coefficients: out,
        joint_statistic,
        dof,
        p_value,
    })
}
