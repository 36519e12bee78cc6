//! Within-stack saturated coefficients, per-stack event studies and their
//! aggregation across cohorts.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{CohortLabel, PanelDataset, UnitIdx};
use crate::stacks::{Role, Stack, StackedDataset};

/// Usable long differences of one stack at one period, split by cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSamples {
    pub g: i64,
    pub t: i64,
    /// `(unit, ΔY)` per role, indexed by [`Role::index`].
    pub cells: [Vec<(UnitIdx, f64)>; 4],
}

impl CellSamples {
    pub fn collect(stack: &Stack, ds: &PanelDataset, t: i64) -> Self {
        let base = stack.baseline();
        let cells = Role::ALL.map(|r| {
            stack
                .cell(r)
                .iter()
                .filter_map(|&i| ds.unit(i).long_difference(t, base).map(|d| (i, d)))
                .collect()
        });
        CellSamples { g: stack.g(), t, cells }
    }

    pub fn counts(&self) -> [usize; 4] {
        [0, 1, 2, 3].map(|k| self.cells[k].len())
    }

    /// Total usable units `n_g` at this period.
    pub fn total(&self) -> usize {
        self.cells.iter().map(Vec::len).sum()
    }

    pub fn is_feasible(&self) -> bool {
        self.cells.iter().all(|c| !c.is_empty())
    }

    /// First empty cell, if any.
    pub fn empty_role(&self) -> Option<Role> {
        Role::ALL.into_iter().find(|r| self.cells[r.index()].is_empty())
    }

    pub fn means(&self) -> [f64; 4] {
        [0, 1, 2, 3].map(|k| mean(self.cells[k].iter().map(|&(_, d)| d)))
    }

    /// Within-cell mean squared deviations (divisor `n_cell`).
    pub fn second_moments(&self) -> [f64; 4] {
        let m = self.means();
        [0, 1, 2, 3].map(|k| mean(self.cells[k].iter().map(|&(_, d)| (d - m[k]).powi(2))))
    }

    /// FWL residual variance `(Σ 1/n_cell)^{-1}`.
    pub fn fwl_variance(&self) -> f64 {
        1.0 / self.counts().iter().map(|&n| 1.0 / n as f64).sum::<f64>()
    }

    /// Plug-in within-stack variance `Σ_cells s²_cell / (n_cell / n_g)`.
    pub fn within_variance(&self) -> f64 {
        let n = self.total() as f64;
        let c = self.counts();
        self.second_moments()
            .iter()
            .zip(c)
            .map(|(s2, k)| s2 * n / k as f64)
            .sum()
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Coefficients of the saturated long-difference regression for one stack and period.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaturatedCoefficients {
    pub mu: f64,
    pub lambda: f64,
    pub eta: f64,
    pub tau_sat: f64,
}

impl SaturatedCoefficients {
    /// From cell means ordered as [`Role::ALL`].
    pub fn from_means(m: [f64; 4]) -> Self {
        let [te, ti, ce, ci] = m;
        SaturatedCoefficients {
            mu: ci,
            lambda: ti - ci,
            eta: ce - ci,
            tau_sat: (te - ti) - (ce - ci),
        }
    }

    /// Fitted cell means ordered as [`Role::ALL`].
    pub fn fitted_means(&self) -> [f64; 4] {
        [
            self.mu + self.lambda + self.eta + self.tau_sat,
            self.mu + self.lambda,
            self.mu + self.eta,
            self.mu,
        ]
    }
}

pub fn saturated_ols(stack: &Stack, ds: &PanelDataset, t: i64) -> Result<SaturatedCoefficients> {
    let cs = CellSamples::collect(stack, ds, t);
    if let Some(role) = cs.empty_role() {
        return Err(Error::EmptyCell {
            g: stack.g(),
            comparison: stack.spec.comparison,
            role,
            time: Some(t),
        });
    }
    Ok(SaturatedCoefficients::from_means(cs.means()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackAttEntry {
    pub e: i64,
    /// `None` when the entry is infeasible.
    pub estimate: Option<f64>,
    /// Usable cell counts at `t = g + e`, ordered as [`Role::ALL`].
    pub cell_counts: [usize; 4],
    pub feasible: bool,
    /// Plug-in within-stack variance `σ̂²_g(e)`.
    pub variance: Option<f64>,
}

impl StackAttEntry {
    pub fn n_total(&self) -> usize {
        self.cell_counts.iter().sum()
    }

    fn fwl_variance(&self) -> f64 {
        1.0 / self.cell_counts.iter().map(|&n| 1.0 / n as f64).sum::<f64>()
    }
}

/// Per-stack event study over the stack window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackAttTable {
    pub g: i64,
    pub comparison: CohortLabel,
    pub entries: Vec<StackAttEntry>,
}

impl StackAttTable {
    pub fn entry(&self, e: i64) -> Option<&StackAttEntry> {
        self.entries.iter().find(|x| x.e == e)
    }

    pub fn feasible_entry(&self, e: i64) -> Option<&StackAttEntry> {
        self.entry(e).filter(|x| x.feasible)
    }
}

pub fn stack_event_study(stack: &Stack, ds: &PanelDataset) -> StackAttTable {
    let g = stack.g();
    let entries = stack
        .spec
        .event_times()
        .map(|e| {
            let cs = CellSamples::collect(stack, ds, g + e);
            let feasible = cs.is_feasible();
            let estimate = feasible.then(|| {
                if e == -1 {
                    0.0
                } else {
                    SaturatedCoefficients::from_means(cs.means()).tau_sat
                }
            });
            StackAttEntry {
                e,
                estimate,
                cell_counts: cs.counts(),
                feasible,
                variance: feasible.then(|| cs.within_variance()),
            }
        })
        .collect();
    StackAttTable {
        g,
        comparison: stack.spec.comparison,
        entries,
    }
}

/// FWL weights `V_{g,e} / Σ V_{g',e}` over the stacks feasible at `e`.
pub fn fwl_weights(stacks: &[Stack], ds: &PanelDataset, e: i64) -> Result<BTreeMap<i64, f64>> {
    let v: BTreeMap<i64, f64> = stacks
        .iter()
        .filter_map(|s| {
            let cs = CellSamples::collect(s, ds, s.g() + e);
            cs.is_feasible().then(|| (s.g(), cs.fwl_variance()))
        })
        .collect();
    normalize(v, e)
}

fn normalize(raw: BTreeMap<i64, f64>, e: i64) -> Result<BTreeMap<i64, f64>> {
    if raw.is_empty() {
        return Err(Error::NoFeasibleStack(e));
    }
    let total: f64 = raw.values().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Weight(format!("weights at e={e} do not normalize (sum {total})")));
    }
    Ok(raw.into_iter().map(|(g, w)| (g, w / total)).collect())
}

/// Cohort aggregation scheme.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "weights")]
pub enum WeightScheme {
    #[default]
    Fwl,
    CohortSize,
    Equal,
    /// Inverse estimator variance `n_g / σ̂²_g(e)`.
    Precision,
    /// Welfare weights `v_g > 0`, normalized over feasible cohorts.
    Custom(BTreeMap<i64, f64>),
}

impl WeightScheme {
    pub fn name(&self) -> &'static str {
        match self {
            WeightScheme::Fwl => "fwl",
            WeightScheme::CohortSize => "cohort_size",
            WeightScheme::Equal => "equal",
            WeightScheme::Precision => "precision",
            WeightScheme::Custom(_) => "custom",
        }
    }
}

/// Realized weights of `scheme` at event time `e`.
pub fn scheme_weights(tables: &[StackAttTable], scheme: &WeightScheme, e: i64) -> Result<BTreeMap<i64, f64>> {
    let feasible: Vec<(i64, &StackAttEntry)> = tables
        .iter()
        .filter_map(|t| t.feasible_entry(e).map(|x| (t.g, x)))
        .collect();
    if feasible.is_empty() {
        return Err(Error::NoFeasibleStack(e));
    }
    let raw: BTreeMap<i64, f64> = match scheme {
        WeightScheme::Fwl => feasible.iter().map(|(g, x)| (*g, x.fwl_variance())).collect(),
        WeightScheme::CohortSize => feasible
            .iter()
            .map(|(g, x)| (*g, x.cell_counts[Role::TreatedEligible.index()] as f64))
            .collect(),
        WeightScheme::Equal => feasible.iter().map(|(g, _)| (*g, 1.0)).collect(),
        WeightScheme::Precision => {
            let mut vars = Vec::with_capacity(feasible.len());
            for (g, x) in &feasible {
                let v = x
                    .variance
                    .ok_or_else(|| Error::MissingInput(format!("variance for cohort {g} at e={e}")))?;
                vars.push((*g, v / x.n_total() as f64));
            }
            // Zero-variance cohorts dominate: split weight evenly among them.
            if vars.iter().any(|&(_, v)| v <= 0.0) {
                vars.iter().map(|&(g, v)| (g, if v <= 0.0 { 1.0 } else { 0.0 })).collect()
            } else {
                vars.iter().map(|&(g, v)| (g, 1.0 / v)).collect()
            }
        }
        WeightScheme::Custom(v) => {
            let mut raw = BTreeMap::new();
            for (g, _) in &feasible {
                match v.get(g) {
                    Some(&w) if w > 0.0 && w.is_finite() => {
                        raw.insert(*g, w);
                    }
                    Some(&w) => return Err(Error::Weight(format!("custom weight for cohort {g} is {w}, must be > 0"))),
                    None => return Err(Error::Weight(format!("no custom weight for cohort {g}"))),
                }
            }
            raw
        }
    };
    normalize(raw, e)
}

/// Weighted average of the feasible per-stack estimates at `e`.
pub fn aggregate(tables: &[StackAttTable], scheme: &WeightScheme, e: i64) -> Result<(f64, BTreeMap<i64, f64>)> {
    let w = scheme_weights(tables, scheme, e)?;
    let est = tables
        .iter()
        .filter_map(|t| Some(w.get(&t.g)? * t.feasible_entry(e)?.estimate?))
        .sum();
    Ok((est, w))
}

/// Pooled stacked regression coefficients, computed from stacked rows as
/// the FWL-weighted average of within-stack saturated coefficients.
pub fn pooled_event_study(stacked: &StackedDataset, stacks: &[Stack]) -> Result<BTreeMap<i64, f64>> {
    if stacked.rows.is_empty() {
        return Err(Error::EmptyInput("stacked dataset has no rows".into()));
    }
    // (stack, event time) -> per-role (sum, count)
    let mut acc: BTreeMap<(i64, i64), [(f64, usize); 4]> = BTreeMap::new();
    let known: BTreeSet<i64> = stacks.iter().map(Stack::g).collect();
    for r in &stacked.rows {
        if !known.contains(&r.stack) {
            continue;
        }
        let c = &mut acc.entry((r.stack, r.event_time)).or_default()[r.role.index()];
        c.0 += r.dy;
        c.1 += 1;
    }
    let mut by_e: BTreeMap<i64, (f64, f64)> = BTreeMap::new();
    for ((_, e), cells) in acc {
        if e == -1 || cells.iter().any(|c| c.1 == 0) {
            continue;
        }
        let m = cells.map(|(s, n)| s / n as f64);
        let v = 1.0 / cells.iter().map(|c| 1.0 / c.1 as f64).sum::<f64>();
        let tau = SaturatedCoefficients::from_means(m).tau_sat;
        let slot = by_e.entry(e).or_default();
        slot.0 += v * tau;
        slot.1 += v;
    }
    Ok(by_e.into_iter().map(|(e, (num, den))| (e, num / den)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventTimeEstimate {
    pub e: i64,
    pub estimate: f64,
    pub weights_used: BTreeMap<i64, f64>,
    /// Unique units in the union of stacks feasible at `e`.
    pub n_effective: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventStudyResult {
    pub scheme: WeightScheme,
    pub window: (i64, i64),
    pub points: Vec<EventTimeEstimate>,
    pub tables: Vec<StackAttTable>,
}

impl EventStudyResult {
    pub fn point(&self, e: i64) -> Option<&EventTimeEstimate> {
        self.points.iter().find(|p| p.e == e)
    }

    pub fn estimates(&self) -> BTreeMap<i64, f64> {
        self.points.iter().map(|p| (p.e, p.estimate)).collect()
    }

    /// Tidy rows `g, e, estimate, weight, n_g1, n_g0, ngc1, ngc0`; aggregated
    /// rows carry `g = all` and blank counts.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["g", "e", "estimate", "weight", "n_g1", "n_g0", "ngc1", "ngc0"])?;
        for t in &self.tables {
            for x in &t.entries {
                let weight = self
                    .point(x.e)
                    .and_then(|p| p.weights_used.get(&t.g))
                    .copied()
                    .unwrap_or(0.0);
                let est = x.estimate.map(|v| format!("{v:?}")).unwrap_or_default();
                let mut rec = vec![t.g.to_string(), x.e.to_string(), est, format!("{weight:?}")];
                rec.extend(x.cell_counts.iter().map(usize::to_string));
                w.write_record(&rec)?;
            }
        }
        for p in &self.points {
            w.write_record([
                "all".to_string(),
                p.e.to_string(),
                format!("{:?}", p.estimate),
                "1.0".into(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Unique units in stacks feasible at `e`.
pub fn feasible_units(stacks: &[Stack], tables: &[StackAttTable], e: i64) -> BTreeSet<UnitIdx> {
    stacks
        .iter()
        .zip(tables)
        .filter(|(_, t)| t.feasible_entry(e).is_some())
        .flat_map(|(s, _)| s.members().map(|(_, i)| i))
        .collect()
}

/// Event times covered by any stack window, excluding the reference period.
pub fn event_times(stacks: &[Stack]) -> BTreeSet<i64> {
    stacks
        .iter()
        .flat_map(|s| s.spec.event_times())
        .filter(|&e| e != -1)
        .collect()
}

pub fn event_study(stacks: &[Stack], ds: &PanelDataset, scheme: &WeightScheme) -> Result<EventStudyResult> {
    let tables: Vec<StackAttTable> = stacks.par_iter().map(|s| stack_event_study(s, ds)).collect();
    let mut points = Vec::new();
    for e in event_times(stacks) {
        match aggregate(&tables, scheme, e) {
            Ok((estimate, weights_used)) => points.push(EventTimeEstimate {
                e,
                estimate,
                weights_used,
                n_effective: feasible_units(stacks, &tables, e).len(),
            }),
            Err(Error::NoFeasibleStack(_)) => {}
            Err(err) => return Err(err),
        }
    }
    let window = stacks
        .first()
        .map(|s| (s.spec.pre, s.spec.post))
        .unwrap_or((0, 0));
    Ok(EventStudyResult {
        scheme: scheme.clone(),
        window,
        points,
        tables,
    })
}
