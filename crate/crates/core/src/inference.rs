//! Influence-function variance with shared comparison units, unit-clustered
//! sandwich variance, pointwise intervals and multiplier-bootstrap bands.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::estimators::{CellSamples, EventStudyResult, SaturatedCoefficients};
use crate::panel::{PanelDataset, UnitIdx};
use crate::stacks::{Role, Stack, StackedDataset};

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Parameter(format!("probability {p} outside (0, 1)")));
    }
    Ok(Normal::standard().inverse_cdf(p))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!("alpha={alpha} must lie in (0, 1)")))
    }
}

/// Influence contributions of the usable members of `stack` at event time `e`.
/// Members without a usable long difference are omitted (their ψ is zero).
pub fn stack_influence(stack: &Stack, ds: &PanelDataset, e: i64) -> Result<BTreeMap<UnitIdx, f64>> {
    let cs = CellSamples::collect(stack, ds, stack.g() + e);
    if !cs.is_feasible() || !stack.spec.event_times().contains(&e) {
        return Err(Error::Infeasible { g: stack.g(), e });
    }
    Ok(psi_from_samples(&cs))
}

fn psi_from_samples(cs: &CellSamples) -> BTreeMap<UnitIdx, f64> {
    let n = cs.total() as f64;
    let means = cs.means();
    let mut out = BTreeMap::new();
    for r in Role::ALL {
        let cell = &cs.cells[r.index()];
        let pi = cell.len() as f64 / n;
        for &(i, d) in cell {
            out.insert(i, r.sign() / pi * (d - means[r.index()]));
        }
    }
    out
}

/// Aggregated influence function at one event time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatedInfluence {
    pub e: i64,
    /// Unique units in the union of stacks feasible at `e`.
    pub n: usize,
    /// Nonzero-membership contributions `φ̂_i(e)`; absent units have `φ̂ = 0`.
    pub phi: BTreeMap<UnitIdx, f64>,
    /// Within-stack contributions `ψ̂` per stack.
    pub psi: BTreeMap<i64, BTreeMap<UnitIdx, f64>>,
}

/// `φ̂_i(e) = Σ_g (n ω_g(e) / n_g) ψ̂_g(i)` over stacks feasible at `e`.
pub fn aggregated_influence(
    stacks: &[Stack],
    ds: &PanelDataset,
    weights: &BTreeMap<i64, f64>,
    e: i64,
) -> Result<AggregatedInfluence> {
    if weights.values().any(|&w| w.is_nan() || w < 0.0 || w.is_infinite()) {
        return Err(Error::Weight(format!("negative or non-finite weight at e={e}")));
    }
    let total: f64 = weights.values().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Weight(format!("weights at e={e} sum to {total}, not 1")));
    }
    let mut units: BTreeSet<UnitIdx> = BTreeSet::new();
    let mut parts = Vec::new();
    for s in stacks {
        let cs = CellSamples::collect(s, ds, s.g() + e);
        let in_window = s.spec.event_times().contains(&e);
        let w = weights.get(&s.g()).copied().unwrap_or(0.0);
        if !(in_window && cs.is_feasible()) {
            if w > 0.0 {
                return Err(Error::Weight(format!("weight on stack {} infeasible at e={e}", s.g())));
            }
            continue;
        }
        units.extend(s.members().map(|(_, i)| i));
        parts.push((s.g(), w, cs.total(), psi_from_samples(&cs)));
    }
    if units.is_empty() {
        return Err(Error::NoFeasibleStack(e));
    }
    let n = units.len();
    let mut phi: BTreeMap<UnitIdx, f64> = BTreeMap::new();
    let mut psi = BTreeMap::new();
    for (g, w, n_g, p) in parts {
        let scale = n as f64 * w / n_g as f64;
        for (&i, &v) in &p {
            *phi.entry(i).or_default() += scale * v;
        }
        psi.insert(g, p);
    }
    Ok(AggregatedInfluence { e, n, phi, psi })
}

/// `n^{-1} Σ φ̂_i²`.
pub fn plugin_variance(phi: impl IntoIterator<Item = f64>, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::EmptyInput("plug-in variance with n = 0".into()));
    }
    Ok(phi.into_iter().map(|x| x * x).sum::<f64>() / n as f64)
}

/// `estimate ± z_{α/2} sqrt(v / n)`.
pub fn pointwise_ci(estimate: f64, v: f64, n: usize, alpha: f64) -> Result<(f64, f64)> {
    check_alpha(alpha)?;
    if v.is_nan() || v < 0.0 {
        return Err(Error::Parameter(format!("variance {v} must be >= 0")));
    }
    if n == 0 {
        return Err(Error::EmptyInput("confidence interval with n = 0".into()));
    }
    let half = normal_quantile(1.0 - alpha / 2.0)? * (v / n as f64).sqrt();
    Ok((estimate - half, estimate + half))
}

/// Unit-clustered sandwich variance of the pooled coefficient at `e`,
/// computed from stacked rows and the pooled regression residuals. `small_sample` applies `C/(C-1)` with `C`
/// the number of clusters.
pub fn crve_variance(stacked: &StackedDataset, stacks: &[Stack], e: i64, small_sample: bool) -> Result<f64> {
    let known: BTreeSet<i64> = stacks.iter().map(Stack::g).collect();
    let rows: Vec<_> = stacked
        .rows
        .iter()
        .filter(|r| r.event_time == e && known.contains(&r.stack))
        .collect();
    let mut cells: BTreeMap<i64, [(f64, usize); 4]> = BTreeMap::new();
    for r in &rows {
        let c = &mut cells.entry(r.stack).or_default()[r.role.index()];
        c.0 += r.dy;
        c.1 += 1;
    }
    cells.retain(|_, c| c.iter().all(|x| x.1 > 0));
    if cells.is_empty() {
        return Err(Error::NoFeasibleStack(e));
    }
    let v: BTreeMap<i64, f64> = cells
        .iter()
        .map(|(&g, c)| (g, 1.0 / c.iter().map(|x| 1.0 / x.1 as f64).sum::<f64>()))
        .collect();
    // Within-stack interaction contrasts and their FWL-weighted pool.
    let tau: BTreeMap<i64, f64> = cells
        .iter()
        .map(|(&g, c)| (g, SaturatedCoefficients::from_means(c.map(|(s, n)| s / n as f64)).tau_sat))
        .collect();
    let tau_pooled = tau.iter().map(|(g, t)| v[g] * t).sum::<f64>() / v.values().sum::<f64>();
    let mut scores: BTreeMap<&str, f64> = BTreeMap::new();
    let mut rr = 0.0;
    for r in &rows {
        let Some(c) = cells.get(&r.stack) else { continue };
        let (sum, cnt) = c[r.role.index()];
        let rt = r.role.sign() * v[&r.stack] / cnt as f64;
        rr += rt * rt;
        // Regression residual: deviation from the cell mean plus the part of
        // the stack's own contrast not captured by the pooled coefficient.
        let resid = r.dy - sum / cnt as f64 + rt * (tau[&r.stack] - tau_pooled);
        *scores.entry(r.unit.as_str()).or_default() += rt * resid;
    }
    let meat: f64 = scores.values().map(|s| s * s).sum();
    let mut var = meat / (rr * rr);
    let c = scores.len() as f64;
    if small_sample && c > 1.0 {
        var *= c / (c - 1.0);
    }
    Ok(var)
}

/// Pointwise inference at one event time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    pub e: i64,
    pub estimate: f64,
    pub v_plugin: f64,
    pub v_crve: Option<f64>,
    /// `sqrt(v_plugin / n)`.
    pub se: f64,
    pub n: usize,
    pub lower: f64,
    pub upper: f64,
}

/// Aggregated influence functions for every event time of a result, over a
/// common dense unit index (the panel's unit order).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceTable {
    pub n_units: usize,
    pub by_e: BTreeMap<i64, AggregatedInfluence>,
}

impl InfluenceTable {
    pub fn build(stacks: &[Stack], ds: &PanelDataset, result: &EventStudyResult) -> Result<Self> {
        let by_e = result
            .points
            .par_iter()
            .map(|p| aggregated_influence(stacks, ds, &p.weights_used, p.e).map(|a| (p.e, a)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(InfluenceTable {
            n_units: ds.len(),
            by_e,
        })
    }

    pub fn plugin(&self, e: i64) -> Result<f64> {
        let a = self.by_e.get(&e).ok_or(Error::NoFeasibleStack(e))?;
        plugin_variance(a.phi.values().copied(), a.n)
    }

    /// Units with their `φ̂` keyed by id, per event time.
    pub fn to_json(&self, ds: &PanelDataset) -> serde_json::Value {
        let m: BTreeMap<String, BTreeMap<String, f64>> = self
            .by_e
            .iter()
            .map(|(e, a)| {
                let ids = a.phi.iter().map(|(&i, &v)| (ds.unit(i).id.clone(), v)).collect();
                (e.to_string(), ids)
            })
            .collect();
        serde_json::json!({ "phi": m })
    }
}

/// Plug-in (and optionally clustered) pointwise inference for every event time.
pub fn pointwise_inference(
    table: &InfluenceTable,
    result: &EventStudyResult,
    crve: Option<(&StackedDataset, &[Stack])>,
    alpha: f64,
    small_sample: bool,
) -> Result<Vec<VarianceEstimate>> {
    check_alpha(alpha)?;
    result
        .points
        .iter()
        .map(|p| {
            let a = table.by_e.get(&p.e).ok_or(Error::NoFeasibleStack(p.e))?;
            let v = plugin_variance(a.phi.values().copied(), a.n)?;
            let (lower, upper) = pointwise_ci(p.estimate, v, a.n, alpha)?;
            let v_crve = match crve {
                Some((st, stacks)) => Some(crve_variance(st, stacks, p.e, small_sample)?),
                None => None,
            };
            Ok(VarianceEstimate {
                e: p.e,
                estimate: p.estimate,
                v_plugin: v,
                v_crve,
                se: (v / a.n as f64).sqrt(),
                n: a.n,
                lower,
                upper,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Multiplier {
    #[default]
    Rademacher,
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub b: usize,
    pub multiplier: Multiplier,
    pub seed: u64,
    pub alpha: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            b: 999,
            multiplier: Multiplier::Rademacher,
            seed: 20240101,
            alpha: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandPoint {
    pub e: i64,
    pub estimate: f64,
    pub v_boot: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandResult {
    pub points: Vec<BandPoint>,
    pub critical_value: f64,
    pub alpha: f64,
    #[serde(rename = "B")]
    pub b: usize,
    pub multiplier: Multiplier,
    pub seed: u64,
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of replication `b`; depends only on `(seed, b)`.
pub fn replication_seed(seed: u64, b: u64) -> u64 {
    splitmix64(seed ^ splitmix64(b))
}

/// Simultaneous band over all event times in `table`, centered at `estimates`.
pub fn multiplier_bootstrap(
    table: &InfluenceTable,
    estimates: &BTreeMap<i64, f64>,
    cfg: &BootstrapConfig,
) -> Result<BandResult> {
    if cfg.b == 0 {
        return Err(Error::Parameter("bootstrap B must be >= 1".into()));
    }
    check_alpha(cfg.alpha)?;
    let es: Vec<i64> = table.by_e.keys().copied().collect();
    if es.is_empty() {
        return Err(Error::EmptyInput("influence table has no event times".into()));
    }
    // Dense φ per event time, pre-divided by n_e.
    let dense: Vec<Vec<(usize, f64)>> = es
        .iter()
        .map(|e| {
            let a = &table.by_e[e];
            a.phi.iter().map(|(&i, &v)| (i, v / a.n as f64)).collect()
        })
        .collect();
    let n_units = table.n_units;
    let draws: Vec<Vec<f64>> = (0..cfg.b as u64)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(replication_seed(cfg.seed, b));
            let xi: Vec<f64> = (0..n_units)
                .map(|_| match cfg.multiplier {
                    Multiplier::Rademacher => {
                        if rng.random::<bool>() {
                            1.0
                        } else {
                            -1.0
                        }
                    }
                    Multiplier::Gaussian => rng.sample(StandardNormal),
                })
                .collect();
            dense.iter().map(|d| d.iter().map(|&(i, v)| xi[i] * v).sum()).collect()
        })
        .collect();

    let bf = cfg.b as f64;
    let v_boot: Vec<f64> = (0..es.len())
        .map(|k| draws.iter().map(|d| d[k] * d[k]).sum::<f64>() / bf)
        .collect();
    let any_nonzero = draws.iter().any(|d| d.iter().any(|&x| x != 0.0));
    let critical_value = if any_nonzero {
        if let Some(k) = v_boot.iter().position(|&v| v == 0.0) {
            return Err(Error::DegenerateBand(es[k]));
        }
        let mut maxes: Vec<f64> = draws
            .iter()
            .map(|d| {
                d.iter()
                    .zip(&v_boot)
                    .map(|(x, v)| x.abs() / v.sqrt())
                    .fold(0.0, f64::max)
            })
            .collect();
        maxes.sort_by(f64::total_cmp);
        let idx = ((1.0 - cfg.alpha) * bf).ceil() as usize;
        maxes[idx.clamp(1, cfg.b) - 1]
    } else {
        0.0
    };
    let points = es
        .iter()
        .zip(&v_boot)
        .map(|(&e, &v)| {
            let est = estimates.get(&e).copied().ok_or_else(|| Error::MissingInput(format!("estimate at e={e}")))?;
            let half = critical_value * v.sqrt();
            Ok(BandPoint {
                e,
                estimate: est,
                v_boot: v,
                lower: est - half,
                upper: est + half,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BandResult {
        points,
        critical_value,
        alpha: cfg.alpha,
        b: cfg.b,
        multiplier: cfg.multiplier,
        seed: cfg.seed,
    })
}
