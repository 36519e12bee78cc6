//! Synthetic staggered-adoption panels with known cohort effects, and a
//! Monte Carlo harness around the estimators.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{pooled_3wfe_event_study, pretrend_test, SpecKind};
use crate::error::{Error, Result};
use crate::estimators::{event_study, EventStudyResult, WeightScheme};
use crate::inference::{pointwise_inference, replication_seed, InfluenceTable};
use crate::panel::{CohortLabel, PanelDataset, UnitRecord};
use crate::stacks::{build_all_stacks, OnInfeasible, StackDesign};

/// Parametric curve in one argument.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Curve {
    Constant { value: f64 },
    Linear { intercept: f64, slope: f64 },
    Quadratic { a: f64, b: f64, c: f64 },
    /// `before` for `x < at`, `after` otherwise.
    Step { at: f64, before: f64, after: f64 },
}

impl Default for Curve {
    fn default() -> Self {
        Curve::Constant { value: 0.0 }
    }
}

impl Curve {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Curve::Constant { value } => value,
            Curve::Linear { intercept, slope } => intercept + slope * x,
            Curve::Quadratic { a, b, c } => a + b * x + c * x * x,
            Curve::Step { at, before, after } => {
                if x < at {
                    before
                } else {
                    after
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortCurve {
    pub cohort: CohortLabel,
    pub curve: Curve,
}

/// A curve per cohort with a fallback for unlisted cohorts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CohortCurves {
    #[serde(default)]
    pub default: Curve,
    #[serde(default)]
    pub by_cohort: Vec<CohortCurve>,
}

impl CohortCurves {
    pub fn uniform(curve: Curve) -> Self {
        CohortCurves {
            default: curve,
            by_cohort: Vec::new(),
        }
    }

    pub fn get(&self, c: CohortLabel) -> &Curve {
        self.by_cohort
            .iter()
            .find(|x| x.cohort == c)
            .map_or(&self.default, |x| &x.curve)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EligibilityTrend {
    #[serde(default)]
    pub eligible: Curve,
    #[serde(default)]
    pub ineligible: Curve,
}

/// Adds `gamma * t` to eligible units of `cohort` only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendViolation {
    pub cohort: i64,
    pub gamma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortShare {
    pub g: i64,
    pub share: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EligibleShare {
    pub cohort: CohortLabel,
    pub share: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    /// Cell counts fixed by rounding the configured shares.
    #[default]
    Fixed,
    /// Cohort and eligibility drawn independently per unit.
    Random,
}

fn one() -> f64 {
    1.0
}

fn half() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n_units: usize,
    #[serde(rename = "T")]
    pub t_max: i64,
    pub seed: u64,
    pub cohorts: Vec<CohortShare>,
    #[serde(default)]
    pub never_share: f64,
    #[serde(default = "half")]
    pub eligible_share: f64,
    #[serde(default)]
    pub eligible_share_by_cohort: Vec<EligibleShare>,
    /// `δ(S, t)` as a curve in `t` per cohort.
    #[serde(default)]
    pub group_time_trend: CohortCurves,
    /// `η(Q, t)` as a curve in `t` per eligibility status.
    #[serde(default)]
    pub eligibility_time_trend: EligibilityTrend,
    #[serde(default)]
    pub violation: Option<TrendViolation>,
    /// `CATT(g, e)` as a curve in `e >= 0` per cohort.
    #[serde(default)]
    pub catt: CohortCurves,
    #[serde(default = "one")]
    pub noise_sd: f64,
    #[serde(default = "one")]
    pub unit_effect_sd: f64,
    #[serde(default)]
    pub assignment: Assignment,
}

impl DgpConfig {
    pub fn from_json_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_units == 0 {
            return Err(Error::Config("n_units must be positive".into()));
        }
        if self.t_max < 2 {
            return Err(Error::Config("T must be at least 2".into()));
        }
        if self.cohorts.is_empty() {
            return Err(Error::Config("at least one treated cohort is required".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.cohorts {
            if c.share.is_nan() || c.share <= 0.0 {
                return Err(Error::Config(format!("cohort {} share {} must be positive", c.g, c.share)));
            }
            if c.g < 2 || c.g > self.t_max {
                return Err(Error::Config(format!("cohort {} outside 2..={}", c.g, self.t_max)));
            }
            if !seen.insert(c.g) {
                return Err(Error::Config(format!("cohort {} listed twice", c.g)));
            }
        }
        if self.never_share < 0.0 {
            return Err(Error::Config("never_share must be >= 0".into()));
        }
        let total: f64 = self.cohorts.iter().map(|c| c.share).sum::<f64>() + self.never_share;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("cohort shares sum to {total}, not 1")));
        }
        for c in self.cohort_labels() {
            let p = self.eligible_share_of(c);
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Config(format!("eligible share {p} for cohort {c} must lie in (0, 1)")));
            }
        }
        if self.noise_sd < 0.0 || self.unit_effect_sd < 0.0 {
            return Err(Error::Config("standard deviations must be >= 0".into()));
        }
        Ok(())
    }

    fn cohort_labels(&self) -> Vec<CohortLabel> {
        let mut v: Vec<CohortLabel> = self.cohorts.iter().map(|c| CohortLabel::Finite(c.g)).collect();
        if self.never_share > 0.0 {
            v.push(CohortLabel::Never);
        }
        v
    }

    pub fn eligible_share_of(&self, c: CohortLabel) -> f64 {
        self.eligible_share_by_cohort
            .iter()
            .find(|x| x.cohort == c)
            .map_or(self.eligible_share, |x| x.share)
    }

    fn shares(&self) -> Vec<(CohortLabel, f64)> {
        let mut v: Vec<(CohortLabel, f64)> = self.cohorts.iter().map(|c| (CohortLabel::Finite(c.g), c.share)).collect();
        if self.never_share > 0.0 {
            v.push((CohortLabel::Never, self.never_share));
        }
        v
    }

    /// Untreated outcome net of unit effect and noise.
    fn baseline_path(&self, c: CohortLabel, q: bool, t: i64) -> f64 {
        let tf = t as f64;
        let eta = if q {
            self.eligibility_time_trend.eligible.eval(tf)
        } else {
            self.eligibility_time_trend.ineligible.eval(tf)
        };
        let mut y = self.group_time_trend.get(c).eval(tf) + eta;
        if let (Some(v), CohortLabel::Finite(g)) = (self.violation, c) {
            if q && g == v.cohort {
                y += v.gamma * tf;
            }
        }
        y
    }
}

/// Largest-remainder apportionment of `n` by `shares`.
fn apportion(n: usize, shares: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = shares.iter().map(|s| s * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    counts
}

/// True `CATT(g, e)`: zero before onset.
pub fn true_catt(cfg: &DgpConfig, g: i64, e: i64) -> Result<f64> {
    if !cfg.cohorts.iter().any(|c| c.g == g) {
        return Err(Error::Config(format!("cohort {g} is not configured")));
    }
    if e < 0 {
        return Ok(0.0);
    }
    Ok(cfg.catt.get(CohortLabel::Finite(g)).eval(e as f64))
}

/// `Σ v_g CATT(g, e) / Σ v_g`.
pub fn weighted_truth(cfg: &DgpConfig, weights: &BTreeMap<i64, f64>, e: i64) -> Result<f64> {
    let total: f64 = weights.values().sum();
    let mut acc = 0.0;
    for (&g, &w) in weights {
        acc += w * true_catt(cfg, g, e)?;
    }
    Ok(acc / total)
}

pub fn simulate_panel(cfg: &DgpConfig) -> Result<PanelDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shares = cfg.shares();
    let mut assign: Vec<(CohortLabel, bool)> = Vec::with_capacity(cfg.n_units);
    match cfg.assignment {
        Assignment::Fixed => {
            let counts = apportion(cfg.n_units, &shares.iter().map(|s| s.1).collect::<Vec<_>>());
            for ((c, _), n_c) in shares.iter().zip(counts) {
                let p = cfg.eligible_share_of(*c);
                let n_e = apportion(n_c, &[p, 1.0 - p])[0];
                assign.extend((0..n_c).map(|k| (*c, k < n_e)));
            }
        }
        Assignment::Random => {
            for _ in 0..cfg.n_units {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut c = shares.last().expect("nonempty").0;
                for &(label, s) in &shares {
                    acc += s;
                    if u < acc {
                        c = label;
                        break;
                    }
                }
                let q = rng.random::<f64>() < cfg.eligible_share_of(c);
                assign.push((c, q));
            }
        }
    }
    let noise = Normal::new(0.0, cfg.noise_sd).map_err(|e| Error::Config(e.to_string()))?;
    let width = cfg.n_units.to_string().len();
    let mut units = Vec::with_capacity(cfg.n_units);
    for (k, (c, q)) in assign.into_iter().enumerate() {
        let z: f64 = StandardNormal.sample(&mut rng);
        let a = cfg.unit_effect_sd * z;
        let ys: Vec<(i64, f64)> = (1..=cfg.t_max)
            .map(|t| {
                let mut y = a + cfg.baseline_path(c, q, t) + noise.sample(&mut rng);
                if let CohortLabel::Finite(g) = c {
                    if q && t >= g {
                        y += cfg.catt.get(c).eval((t - g) as f64);
                    }
                }
                (t, y)
            })
            .collect();
        units.push(UnitRecord::new(format!("u{k:0width$}"), c, q).with_outcomes(ys));
    }
    let meta = BTreeMap::from([("source".to_string(), "simulation".to_string()), ("seed".to_string(), cfg.seed.to_string())]);
    PanelDataset::new(units, (1, cfg.t_max), meta)
}

fn default_alpha() -> f64 {
    0.05
}

/// Estimator evaluated in each Monte Carlo replication.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EstimatorSpec {
    /// Stacked event study; target is the realized-weight average of CATT.
    Stacked {
        name: String,
        design: StackDesign,
        #[serde(default)]
        weights: WeightScheme,
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
    /// Pooled fixed-effects event study; target is the treated-eligible
    /// size-weighted CATT over cohorts observed at `g + e`.
    Pooled {
        name: String,
        spec: SpecKind,
        window: (i64, i64),
    },
}

impl EstimatorSpec {
    pub fn name(&self) -> &str {
        match self {
            EstimatorSpec::Stacked { name, .. } | EstimatorSpec::Pooled { name, .. } => name,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub estimator: String,
    /// `None` for aggregated rows, the cohort for per-stack rows.
    pub g: Option<i64>,
    pub e: i64,
    pub mean_bias: f64,
    pub rmse: f64,
    pub coverage: Option<f64>,
    pub mean_se: Option<f64>,
    pub reps_used: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McFailure {
    pub rep: usize,
    pub estimator: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub reps: usize,
    pub rows: Vec<McRow>,
    /// Rejection rate of the joint pre-trend test per stacked estimator.
    pub pretrend_rejection: BTreeMap<String, f64>,
    pub failures: Vec<McFailure>,
}

impl McSummary {
    pub fn row(&self, estimator: &str, g: Option<i64>, e: i64) -> Option<&McRow> {
        self.rows.iter().find(|r| r.estimator == estimator && r.g == g && r.e == e)
    }

    pub fn write_csv<W: std::io::Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["estimator", "g", "e", "mean_bias", "rmse", "coverage", "mean_se", "reps_used"])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.estimator.clone(),
                r.g.map(|g| g.to_string()).unwrap_or_else(|| "all".into()),
                r.e.to_string(),
                format!("{:?}", r.mean_bias),
                format!("{:?}", r.rmse),
                opt(r.coverage),
                opt(r.mean_se),
                r.reps_used.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One draw of one estimator: `(g, e) -> (estimate, truth, ci, se)`.
type DrawValue = (f64, f64, Option<(f64, f64)>, Option<f64>);
type Draw = BTreeMap<(Option<i64>, i64), DrawValue>;

struct RepOutcome {
    draws: Vec<std::result::Result<(Draw, Option<bool>), String>>,
}

fn stacked_draw(
    cfg: &DgpConfig,
    ds: &PanelDataset,
    design: &StackDesign,
    scheme: &WeightScheme,
    alpha: f64,
) -> Result<(Draw, Option<bool>)> {
    let set = build_all_stacks(ds, design, OnInfeasible::Skip)?;
    let es: EventStudyResult = event_study(&set.stacks, ds, scheme)?;
    let table = InfluenceTable::build(&set.stacks, ds, &es)?;
    let inf = pointwise_inference(&table, &es, None, alpha, false)?;
    let z = crate::inference::normal_quantile(1.0 - alpha / 2.0)?;
    let mut out = Draw::new();
    for (p, v) in es.points.iter().zip(&inf) {
        let truth = weighted_truth(cfg, &p.weights_used, p.e)?;
        out.insert((None, p.e), (p.estimate, truth, Some((v.lower, v.upper)), Some(v.se)));
    }
    for t in &es.tables {
        for x in t.entries.iter().filter(|x| x.feasible && x.e != -1) {
            let est = x.estimate.expect("feasible");
            let se = (x.variance.expect("feasible") / x.n_total() as f64).sqrt();
            let truth = true_catt(cfg, t.g, x.e)?;
            out.insert((Some(t.g), x.e), (est, truth, Some((est - z * se, est + z * se)), Some(se)));
        }
    }
    let reject = pretrend_test(&set.stacks, ds, &es.tables)
        .ok()
        .filter(|r| r.dof > 0)
        .map(|r| r.p_value < alpha);
    Ok((out, reject))
}

fn pooled_draw(cfg: &DgpConfig, ds: &PanelDataset, spec: SpecKind, window: (i64, i64)) -> Result<Draw> {
    let alpha = pooled_3wfe_event_study(ds, spec, window)?;
    let (_, t_max) = ds.time_range();
    let mut out = Draw::new();
    for (j, a) in alpha {
        let w: BTreeMap<i64, f64> = ds
            .treated_cohorts()
            .into_iter()
            .filter(|g| g + j <= t_max && g + j >= 1)
            .map(|g| (g, ds.cell_count(CohortLabel::Finite(g), true) as f64))
            .collect();
        let truth = if w.is_empty() { 0.0 } else { weighted_truth(cfg, &w, j)? };
        out.insert((None, j), (a, truth, None, None));
    }
    Ok(out)
}

/// Repeated simulate-estimate cycles with per-replication seeds derived
/// from `cfg.seed`; results do not depend on the worker count.
pub fn monte_carlo(cfg: &DgpConfig, estimators: &[EstimatorSpec], reps: usize) -> Result<McSummary> {
    if reps == 0 {
        return Err(Error::Parameter("reps must be >= 1".into()));
    }
    if estimators.is_empty() {
        return Err(Error::Parameter("no estimators given".into()));
    }
    cfg.validate()?;
    let outcomes: Vec<RepOutcome> = (0..reps)
        .into_par_iter()
        .map(|b| {
            let mut c = cfg.clone();
            c.seed = replication_seed(cfg.seed, b as u64);
            let draws = match simulate_panel(&c) {
                Err(e) => estimators.iter().map(|_| Err(e.to_string())).collect(),
                Ok(ds) => estimators
                    .iter()
                    .map(|spec| {
                        match spec {
                            EstimatorSpec::Stacked { design, weights, alpha, .. } => {
                                stacked_draw(cfg, &ds, design, weights, *alpha)
                            }
                            EstimatorSpec::Pooled { spec, window, .. } => pooled_draw(cfg, &ds, *spec, *window).map(|d| (d, None)),
                        }
                        .map_err(|e| e.to_string())
                    })
                    .collect(),
            };
            RepOutcome { draws }
        })
        .collect();

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut pretrend_rejection = BTreeMap::new();
    for (k, spec) in estimators.iter().enumerate() {
        let mut acc: BTreeMap<(Option<i64>, i64), Vec<DrawValue>> = BTreeMap::new();
        let mut rejections = (0usize, 0usize);
        for (rep, o) in outcomes.iter().enumerate() {
            match &o.draws[k] {
                Ok((d, reject)) => {
                    for (key, v) in d {
                        acc.entry(*key).or_default().push(*v);
                    }
                    if let Some(r) = reject {
                        rejections.0 += usize::from(*r);
                        rejections.1 += 1;
                    }
                }
                Err(message) => failures.push(McFailure {
                    rep,
                    estimator: spec.name().to_string(),
                    message: message.clone(),
                }),
            }
        }
        if rejections.1 > 0 {
            pretrend_rejection.insert(spec.name().to_string(), rejections.0 as f64 / rejections.1 as f64);
        }
        for ((g, e), v) in acc {
            let m = v.len() as f64;
            let mean_bias = v.iter().map(|x| x.0 - x.1).sum::<f64>() / m;
            let rmse = (v.iter().map(|x| (x.0 - x.1).powi(2)).sum::<f64>() / m).sqrt();
            let coverage = v[0].2.map(|_| {
                v.iter()
                    .filter(|x| {
                        let (lo, hi) = x.2.expect("interval");
                        let slack = 1e-9 * x.1.abs().max(1.0);
                        lo - slack <= x.1 && x.1 <= hi + slack
                    })
                    .count() as f64
                    / m
            });
            let mean_se = v[0].3.map(|_| v.iter().map(|x| x.3.expect("se")).sum::<f64>() / m);
            rows.push(McRow {
                estimator: spec.name().to_string(),
                g,
                e,
                mean_bias,
                rmse,
                coverage,
                mean_se,
                reps_used: v.len(),
            });
        }
    }
    Ok(McSummary {
        reps,
        rows,
        pretrend_rejection,
        failures,
    })
}
