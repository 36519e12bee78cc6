//! Panel builders shared by unit tests.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::panel::{CohortLabel, PanelDataset, UnitRecord};

/// Balanced panel over `1..=t_max` where each (cohort, eligibility) cell has
/// `per_cell` units on the trend `slope * (t - 1)`; slopes are `[eligible, ineligible]`.
pub fn cell_panel(t_max: i64, cells: &[(CohortLabel, [f64; 2])], per_cell: usize) -> PanelDataset {
    let mut units = Vec::new();
    for &(c, slopes) in cells {
        for (q, slope) in [(true, slopes[0]), (false, slopes[1])] {
            for k in 0..per_cell {
                let id = format!("{c}-{}-{k}", u8::from(q));
                units.push(UnitRecord::new(id, c, q).with_outcomes((1..=t_max).map(|t| (t, slope * (t - 1) as f64))));
            }
        }
    }
    PanelDataset::new(units, (1, t_max), BTreeMap::new()).unwrap()
}

/// Balanced panel with standard normal outcomes.
pub fn random_panel(seed: u64, cohorts: &[CohortLabel], per_cell: usize, t_max: i64) -> PanelDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut units = Vec::new();
    for &c in cohorts {
        for q in [true, false] {
            for k in 0..per_cell {
                let id = format!("{c}-{}-{k}", u8::from(q));
                let ys: Vec<(i64, f64)> = (1..=t_max).map(|t| (t, StandardNormal.sample(&mut rng))).collect();
                units.push(UnitRecord::new(id, c, q).with_outcomes(ys));
            }
        }
    }
    PanelDataset::new(units, (1, t_max), BTreeMap::new()).unwrap()
}

pub fn map_outcomes(ds: &PanelDataset, f: impl Fn(&UnitRecord, i64, f64) -> f64) -> PanelDataset {
    let units = ds
        .units()
        .iter()
        .map(|u| {
            let ys: Vec<(i64, f64)> = u.outcomes.iter().map(|(&t, &y)| (t, f(u, t, y))).collect();
            UnitRecord::new(u.id.clone(), u.cohort, u.eligible).with_outcomes(ys)
        })
        .collect();
    PanelDataset::new(units, ds.time_range(), ds.metadata().clone()).unwrap()
}
