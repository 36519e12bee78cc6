//! Stack construction: one four-cell sub-experiment per treated cohort,
//! paired with a clean comparison cohort, and the concatenated stacked
//! dataset.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{CohortLabel, PanelDataset, UnitIdx};

/// Cell of a unit inside a stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    TreatedEligible,
    TreatedIneligible,
    ComparisonEligible,
    ComparisonIneligible,
}

impl Role {
    pub const ALL: [Role; 4] = [
        Role::TreatedEligible,
        Role::TreatedIneligible,
        Role::ComparisonEligible,
        Role::ComparisonIneligible,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Sign of the cell in the triple difference.
    pub fn sign(self) -> f64 {
        match self {
            Role::TreatedEligible | Role::ComparisonIneligible => 1.0,
            Role::TreatedIneligible | Role::ComparisonEligible => -1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::TreatedEligible => "treated_eligible",
            Role::TreatedIneligible => "treated_ineligible",
            Role::ComparisonEligible => "comparison_eligible",
            Role::ComparisonIneligible => "comparison_ineligible",
        }
    }

    fn of(treated: bool, eligible: bool) -> Role {
        match (treated, eligible) {
            (true, true) => Role::TreatedEligible,
            (true, false) => Role::TreatedIneligible,
            (false, true) => Role::ComparisonEligible,
            (false, false) => Role::ComparisonIneligible,
        }
    }
}

/// How the comparison cohort of a stack is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "cohort")]
pub enum ComparisonRule {
    /// Never-treated if admissible, else the earliest admissible finite cohort.
    #[default]
    PreferNever,
    /// Smallest finite admissible cohort, falling back to never-treated.
    EarliestAdmissible,
    Explicit(CohortLabel),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowPolicy {
    /// Clip the window to the observed range; the baseline must still exist.
    #[default]
    Truncate,
    /// Reject windows that leave the observed range.
    Strict,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnInfeasible {
    #[default]
    Skip,
    Error,
}

/// Stack window and comparison selection, shared by every cohort.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackDesign {
    pub rule: ComparisonRule,
    /// Pre-window length `L >= 1`.
    pub pre: i64,
    /// Post-window length `K >= 0`.
    pub post: i64,
    #[serde(default)]
    pub window: WindowPolicy,
}

impl StackDesign {
    pub fn new(rule: ComparisonRule, pre: i64, post: i64) -> Self {
        StackDesign {
            rule,
            pre,
            post,
            window: WindowPolicy::Truncate,
        }
    }

    fn check(&self) -> Result<()> {
        if self.pre < 1 {
            return Err(Error::Parameter(format!("pre-window L={} must be >= 1", self.pre)));
        }
        if self.post < 0 {
            return Err(Error::Parameter(format!("post-window K={} must be >= 0", self.post)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackSpec {
    pub treated: i64,
    pub comparison: CohortLabel,
    pub pre: i64,
    pub post: i64,
    /// First period of the (possibly truncated) window.
    pub window_start: i64,
    /// Last period of the (possibly truncated) window.
    pub window_end: i64,
}

impl StackSpec {
    pub fn baseline(&self) -> i64 {
        self.treated - 1
    }

    pub fn event_times(&self) -> std::ops::RangeInclusive<i64> {
        (self.window_start - self.treated)..=(self.window_end - self.treated)
    }
}

/// A four-cell sub-experiment for one treated cohort.
#[derive(Clone, Debug, PartialEq)]
pub struct Stack {
    pub spec: StackSpec,
    /// Members per role, indexed by [`Role::index`].
    cells: [Vec<UnitIdx>; 4],
}

impl Stack {
    pub fn g(&self) -> i64 {
        self.spec.treated
    }

    pub fn baseline(&self) -> i64 {
        self.spec.baseline()
    }

    pub fn cell(&self, role: Role) -> &[UnitIdx] {
        &self.cells[role.index()]
    }

    pub fn cell_counts(&self) -> [usize; 4] {
        [
            self.cells[0].len(),
            self.cells[1].len(),
            self.cells[2].len(),
            self.cells[3].len(),
        ]
    }

    pub fn size(&self) -> usize {
        self.cells.iter().map(Vec::len).sum()
    }

    pub fn members(&self) -> impl Iterator<Item = (Role, UnitIdx)> + '_ {
        Role::ALL
            .into_iter()
            .flat_map(move |r| self.cells[r.index()].iter().map(move |&i| (r, i)))
    }

    pub fn roster(&self, ds: &PanelDataset) -> StackRoster {
        let ids = |r: Role| self.cell(r).iter().map(|&i| ds.unit(i).id.clone()).collect();
        StackRoster {
            g: self.g(),
            comparison: self.spec.comparison,
            pre: self.spec.pre,
            post: self.spec.post,
            window: (self.spec.window_start, self.spec.window_end),
            baseline: self.baseline(),
            cell_counts: RoleCounts::from(self.cell_counts()),
            treated_eligible: ids(Role::TreatedEligible),
            treated_ineligible: ids(Role::TreatedIneligible),
            comparison_eligible: ids(Role::ComparisonEligible),
            comparison_ineligible: ids(Role::ComparisonIneligible),
        }
    }
}

/// Cell sizes keyed by role name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleCounts {
    pub treated_eligible: usize,
    pub treated_ineligible: usize,
    pub comparison_eligible: usize,
    pub comparison_ineligible: usize,
}

impl From<[usize; 4]> for RoleCounts {
    fn from(c: [usize; 4]) -> Self {
        RoleCounts {
            treated_eligible: c[0],
            treated_ineligible: c[1],
            comparison_eligible: c[2],
            comparison_ineligible: c[3],
        }
    }
}

/// JSON roster of a stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackRoster {
    pub g: i64,
    pub comparison: CohortLabel,
    pub pre: i64,
    pub post: i64,
    pub window: (i64, i64),
    pub baseline: i64,
    pub cell_counts: RoleCounts,
    pub treated_eligible: Vec<String>,
    pub treated_ineligible: Vec<String>,
    pub comparison_eligible: Vec<String>,
    pub comparison_ineligible: Vec<String>,
}

fn has_both_cells(ds: &PanelDataset, c: CohortLabel) -> bool {
    ds.cell_count(c, true) > 0 && ds.cell_count(c, false) > 0
}

/// Cohorts that can serve as a clean comparison for cohort `g` with post
/// window `post`: finite cohorts with `g_c > g + post` or never-treated,
/// with both eligibility cells populated. Empty when `g` itself lacks a cell.
pub fn admissible_comparisons(ds: &PanelDataset, g: i64, post: i64) -> BTreeSet<CohortLabel> {
    if !has_both_cells(ds, CohortLabel::Finite(g)) {
        return BTreeSet::new();
    }
    ds.cohorts()
        .into_iter()
        .filter(|&c| match c {
            CohortLabel::Finite(gc) => gc > g + post,
            CohortLabel::Never => true,
        })
        .filter(|&c| has_both_cells(ds, c))
        .collect()
}

/// Build the stack for treated cohort `g`.
pub fn build_stack(ds: &PanelDataset, g: i64, design: &StackDesign) -> Result<Stack> {
    design.check()?;
    let treated = CohortLabel::Finite(g);
    let (t_min, t_max) = ds.time_range();
    if g - 1 < t_min {
        return Err(Error::Window {
            g,
            message: format!("baseline period {} precedes first period {t_min}", g - 1),
        });
    }
    if g > t_max {
        return Err(Error::Window {
            g,
            message: format!("cohort after last period {t_max}"),
        });
    }
    if design.window == WindowPolicy::Strict && (g - design.pre < t_min || g + design.post > t_max) {
        return Err(Error::Window {
            g,
            message: format!(
                "window [{}, {}] outside observed range [{t_min}, {t_max}]",
                g - design.pre,
                g + design.post
            ),
        });
    }
    for (q, role) in [(true, Role::TreatedEligible), (false, Role::TreatedIneligible)] {
        if ds.cell_count(treated, q) == 0 {
            return Err(Error::EmptyCell {
                g,
                comparison: CohortLabel::Never,
                role,
                time: None,
            });
        }
    }

    let admissible = admissible_comparisons(ds, g, design.post);
    let earliest_finite = admissible.iter().copied().find(|c| !c.is_never());
    let has_never = admissible.contains(&CohortLabel::Never);
    let comparison = match design.rule {
        ComparisonRule::PreferNever => {
            if has_never {
                Some(CohortLabel::Never)
            } else {
                earliest_finite
            }
        }
        ComparisonRule::EarliestAdmissible => earliest_finite.or(has_never.then_some(CohortLabel::Never)),
        ComparisonRule::Explicit(c) => {
            if let CohortLabel::Finite(gc) = c {
                if gc <= g + design.post {
                    return Err(Error::InfeasibleStack {
                        g,
                        reason: format!("comparison cohort {gc} is not later than g+K={}", g + design.post),
                    });
                }
            }
            for (q, role) in [(true, Role::ComparisonEligible), (false, Role::ComparisonIneligible)] {
                if ds.cell_count(c, q) == 0 {
                    return Err(Error::EmptyCell {
                        g,
                        comparison: c,
                        role,
                        time: None,
                    });
                }
            }
            Some(c)
        }
    };
    let comparison = comparison.ok_or_else(|| Error::InfeasibleStack {
        g,
        reason: "no admissible comparison cohort".into(),
    })?;

    let mut cells: [Vec<UnitIdx>; 4] = Default::default();
    for (i, u) in ds.units().iter().enumerate() {
        let treated_side = u.cohort == treated;
        if treated_side || u.cohort == comparison {
            cells[Role::of(treated_side, u.eligible).index()].push(i);
        }
    }
    let spec = StackSpec {
        treated: g,
        comparison,
        pre: design.pre,
        post: design.post,
        window_start: (g - design.pre).max(t_min),
        window_end: (g + design.post).min(t_max),
    };
    Ok(Stack { spec, cells })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedCohort {
    pub g: i64,
    pub reason: String,
}

/// All feasible stacks plus the cohorts that were skipped.
#[derive(Clone, Debug, PartialEq)]
pub struct StackSet {
    pub stacks: Vec<Stack>,
    pub skipped: Vec<SkippedCohort>,
}

impl StackSet {
    pub fn get(&self, g: i64) -> Option<&Stack> {
        self.stacks.iter().find(|s| s.g() == g)
    }
}

/// One stack per treated cohort, ascending in `g`.
pub fn build_all_stacks(ds: &PanelDataset, design: &StackDesign, on_infeasible: OnInfeasible) -> Result<StackSet> {
    design.check()?;
    let cohorts = ds.treated_cohorts();
    let built: Vec<(i64, Result<Stack>)> = cohorts
        .par_iter()
        .map(|&g| (g, build_stack(ds, g, design)))
        .collect();
    let mut stacks = Vec::new();
    let mut skipped = Vec::new();
    for (g, r) in built {
        match r {
            Ok(s) => stacks.push(s),
            Err(e) => skipped.push(SkippedCohort {
                g,
                reason: e.to_string(),
            }),
        }
    }
    if on_infeasible == OnInfeasible::Error && !skipped.is_empty() {
        return Err(Error::InfeasibleCohorts(skipped.iter().map(|s| s.g).collect()));
    }
    Ok(StackSet { stacks, skipped })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackedRow {
    pub stack: i64,
    pub unit: String,
    #[serde(skip)]
    pub unit_idx: UnitIdx,
    pub time: i64,
    pub role: Role,
    pub event_time: i64,
    pub dy: f64,
}

/// Concatenation of all stacks: one row per (unit, time, stack) with both
/// the time and the stack baseline observed.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedDataset {
    pub rows: Vec<StackedRow>,
    /// Stacks containing each unit id.
    pub index: BTreeMap<String, BTreeSet<i64>>,
}

impl StackedDataset {
    /// Tidy export with columns `stack, unit, time, role, event_time, dy`.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["stack", "unit", "time", "role", "event_time", "dy"])?;
        for r in &self.rows {
            w.write_record([
                r.stack.to_string(),
                r.unit.clone(),
                r.time.to_string(),
                r.role.as_str().to_string(),
                r.event_time.to_string(),
                format!("{:?}", r.dy),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn materialize_stacked(stacks: &[Stack], ds: &PanelDataset) -> Result<StackedDataset> {
    if stacks.is_empty() {
        return Err(Error::EmptyInput("no stacks to materialize".into()));
    }
    let mut rows = Vec::new();
    let mut index: BTreeMap<String, BTreeSet<i64>> = BTreeMap::new();
    for s in stacks {
        let g = s.g();
        let base = s.baseline();
        for (role, i) in s.members() {
            let u = ds.unit(i);
            index.entry(u.id.clone()).or_default().insert(g);
            let Some(y0) = u.outcome(base) else { continue };
            for t in s.spec.window_start..=s.spec.window_end {
                if let Some(y) = u.outcome(t) {
                    rows.push(StackedRow {
                        stack: g,
                        unit: u.id.clone(),
                        unit_idx: i,
                        time: t,
                        role,
                        event_time: t - g,
                        dy: y - y0,
                    });
                }
            }
        }
    }
    Ok(StackedDataset { rows, index })
}
