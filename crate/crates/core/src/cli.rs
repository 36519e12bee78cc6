//! Command-line workflows: validate, estimate, decompose and simulate.
//!
//! Every run writes `resolved_config.json` into its output directory; passing
//! that file back through `--config` reproduces the run.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    aggregated_weights, check_weight_properties, decompose, implied_estimand, AggWeightTable, AuxWeightTable,
    Decomposition, PropertyReport, SpecKind,
};
use crate::error::{Error, Result};
use crate::estimators::{event_study, EventStudyResult, WeightScheme};
use crate::inference::{
    multiplier_bootstrap, pointwise_inference, BandResult, BootstrapConfig, InfluenceTable, Multiplier, VarianceEstimate,
};
use crate::panel::{load_panel_path, validate_panel, write_panel, CohortLabel, PanelDataset, Schema};
use crate::simulation::{monte_carlo, simulate_panel, DgpConfig, EstimatorSpec};
use crate::stacks::{
    build_all_stacks, materialize_stacked, ComparisonRule, OnInfeasible, StackDesign, StackSet, StackedDataset,
    WindowPolicy,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Csv,
}

/// Fully resolved settings of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub schema: Schema,
    #[serde(rename = "L")]
    pub pre: i64,
    #[serde(rename = "K")]
    pub post: i64,
    pub rule: ComparisonRule,
    pub window_policy: WindowPolicy,
    pub on_infeasible: OnInfeasible,
    pub weights: WeightScheme,
    pub alpha: f64,
    pub bootstrap: BootstrapConfig,
    /// Apply the `C/(C-1)` factor to the clustered variance.
    pub crve_small_sample: bool,
    pub export_stacked: bool,
    pub spec: SpecKind,
    /// Aggregation weights over post periods for the decomposition.
    pub agg_weights: Option<BTreeMap<i64, f64>>,
    /// User CATT values `(g, e) -> value` for the implied estimand.
    pub catt: Option<Vec<CattValue>>,
    pub dgp: Option<DgpConfig>,
    pub reps: Option<usize>,
    pub estimators: Option<Vec<EstimatorSpec>>,
    pub out: PathBuf,
    pub formats: Vec<Format>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CattValue {
    pub g: i64,
    pub e: i64,
    pub value: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input: None,
            schema: Schema::default(),
            pre: 1,
            post: 0,
            rule: ComparisonRule::PreferNever,
            window_policy: WindowPolicy::Truncate,
            on_infeasible: OnInfeasible::Skip,
            weights: WeightScheme::Fwl,
            alpha: 0.05,
            bootstrap: BootstrapConfig {
                b: 0,
                ..BootstrapConfig::default()
            },
            crve_small_sample: false,
            export_stacked: false,
            spec: SpecKind::HwStyle,
            agg_weights: None,
            catt: None,
            dgp: None,
            reps: None,
            estimators: None,
            out: PathBuf::from("out"),
            formats: vec![Format::Json, Format::Csv],
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "stackddd", version, about = "Stacked triple-differences event studies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check panel structure and cell overlap.
    Validate(CommonArgs),
    /// Stacked event study with pointwise intervals and optional bootstrap band.
    Estimate(CommonArgs),
    /// Implicit weights of the pooled fixed-effects event study.
    Decompose(CommonArgs),
    /// Simulate a panel, or run a Monte Carlo study with --reps.
    Simulate(CommonArgs),
}

#[derive(Debug, Default, Args)]
pub struct CommonArgs {
    /// Run configuration JSON; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Column mapping JSON.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long = "L")]
    pub pre: Option<i64>,
    #[arg(long = "K")]
    pub post: Option<i64>,
    /// never | earliest | explicit:G
    #[arg(long)]
    pub rule: Option<String>,
    #[arg(long, value_enum)]
    pub window_policy: Option<WindowPolicyArg>,
    #[arg(long, value_enum)]
    pub on_infeasible: Option<OnInfeasibleArg>,
    /// fwl | cohort | equal | precision | custom:FILE
    #[arg(long)]
    pub weights: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long = "bootstrap-B")]
    pub bootstrap_b: Option<usize>,
    #[arg(long, value_enum)]
    pub multiplier: Option<MultiplierArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub crve_small_sample: bool,
    /// Also write the stacked dataset.
    #[arg(long)]
    pub export_stacked: bool,
    #[arg(long, value_enum)]
    pub spec: Option<SpecArg>,
    /// Post-period aggregation weights, e.g. `0:0.5,1:0.5`.
    #[arg(long)]
    pub agg_weights: Option<String>,
    /// CATT JSON: list of {g, e, value}.
    #[arg(long)]
    pub catt: Option<PathBuf>,
    /// Data-generating process JSON.
    #[arg(long)]
    pub dgp: Option<PathBuf>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// Estimator list JSON for Monte Carlo runs.
    #[arg(long)]
    pub estimators: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub format: Option<Vec<Format>>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum WindowPolicyArg {
    Truncate,
    Strict,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum OnInfeasibleArg {
    Skip,
    Error,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MultiplierArg {
    Rademacher,
    Gaussian,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SpecArg {
    Hw,
    Plain,
}

pub fn parse_rule(s: &str) -> Result<ComparisonRule> {
    match s {
        "never" | "prefer_never" => Ok(ComparisonRule::PreferNever),
        "earliest" | "earliest_admissible" => Ok(ComparisonRule::EarliestAdmissible),
        _ => {
            let g = s
                .strip_prefix("explicit:")
                .ok_or_else(|| Error::Config(format!("unknown comparison rule {s:?}")))?;
            let label = if g == "never" {
                CohortLabel::Never
            } else {
                CohortLabel::Finite(g.parse().map_err(|_| Error::Config(format!("bad cohort in rule {s:?}")))?)
            };
            Ok(ComparisonRule::Explicit(label))
        }
    }
}

pub fn parse_weights(s: &str) -> Result<WeightScheme> {
    match s {
        "fwl" => Ok(WeightScheme::Fwl),
        "cohort" | "cohort_size" => Ok(WeightScheme::CohortSize),
        "equal" => Ok(WeightScheme::Equal),
        "precision" => Ok(WeightScheme::Precision),
        _ => {
            let path = s
                .strip_prefix("custom:")
                .ok_or_else(|| Error::Config(format!("unknown weight scheme {s:?}")))?;
            let text = fs::read_to_string(path)?;
            let map: BTreeMap<i64, f64> = serde_json::from_str(&text)?;
            Ok(WeightScheme::Custom(map))
        }
    }
}

fn parse_agg_weights(s: &str) -> Result<BTreeMap<i64, f64>> {
    s.split(',')
        .map(|kv| {
            let (k, v) = kv
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("bad aggregation weight {kv:?}")))?;
            let bad = || Error::Config(format!("bad aggregation weight {kv:?}"));
            Ok((k.trim().parse().map_err(|_| bad())?, v.trim().parse().map_err(|_| bad())?))
        })
        .collect()
}

impl CommonArgs {
    /// Defaults, then the `--config` file, then explicit flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.input {
            c.input = Some(v.clone());
        }
        if let Some(p) = &self.schema {
            c.schema = Schema::from_json_path(p)?;
        }
        if let Some(v) = self.pre {
            c.pre = v;
        }
        if let Some(v) = self.post {
            c.post = v;
        }
        if let Some(v) = &self.rule {
            c.rule = parse_rule(v)?;
        }
        if let Some(v) = self.window_policy {
            c.window_policy = match v {
                WindowPolicyArg::Truncate => WindowPolicy::Truncate,
                WindowPolicyArg::Strict => WindowPolicy::Strict,
            };
        }
        if let Some(v) = self.on_infeasible {
            c.on_infeasible = match v {
                OnInfeasibleArg::Skip => OnInfeasible::Skip,
                OnInfeasibleArg::Error => OnInfeasible::Error,
            };
        }
        if let Some(v) = &self.weights {
            c.weights = parse_weights(v)?;
        }
        if let Some(v) = self.alpha {
            c.alpha = v;
            c.bootstrap.alpha = v;
        }
        if let Some(v) = self.bootstrap_b {
            c.bootstrap.b = v;
        }
        if let Some(v) = self.multiplier {
            c.bootstrap.multiplier = match v {
                MultiplierArg::Rademacher => Multiplier::Rademacher,
                MultiplierArg::Gaussian => Multiplier::Gaussian,
            };
        }
        if let Some(v) = self.seed {
            c.bootstrap.seed = v;
        }
        c.crve_small_sample |= self.crve_small_sample;
        c.export_stacked |= self.export_stacked;
        if let Some(v) = self.spec {
            c.spec = match v {
                SpecArg::Hw => SpecKind::HwStyle,
                SpecArg::Plain => SpecKind::Plain3wfe,
            };
        }
        if let Some(v) = &self.agg_weights {
            c.agg_weights = Some(parse_agg_weights(v)?);
        }
        if let Some(p) = &self.catt {
            c.catt = Some(serde_json::from_str(&fs::read_to_string(p)?)?);
        }
        if let Some(p) = &self.dgp {
            c.dgp = Some(DgpConfig::from_json_path(p)?);
        }
        if let Some(v) = self.reps {
            c.reps = Some(v);
        }
        if let Some(p) = &self.estimators {
            c.estimators = Some(serde_json::from_str(&fs::read_to_string(p)?)?);
        }
        if let Some(v) = &self.out {
            c.out = v.clone();
        }
        if let Some(v) = &self.format {
            c.formats = v.clone();
        }
        if let Some(seed) = self.seed {
            if let Some(d) = c.dgp.as_mut() {
                d.seed = seed;
            }
        }
        Ok(c)
    }
}

fn design(c: &RunConfig) -> StackDesign {
    StackDesign {
        rule: c.rule,
        pre: c.pre,
        post: c.post,
        window: c.window_policy,
    }
}

fn input(c: &RunConfig) -> Result<&Path> {
    c.input
        .as_deref()
        .ok_or_else(|| Error::Config("--input is required".into()))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let f = BufWriter::new(File::create(dir.join(name))?);
    serde_json::to_writer_pretty(f, value)?;
    Ok(())
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn prepare_out(c: &RunConfig) -> Result<()> {
    fs::create_dir_all(&c.out)?;
    write_json(&c.out, "resolved_config.json", c)
}

pub fn cmd_validate(c: &RunConfig) -> Result<i32> {
    prepare_out(c)?;
    let ds = match load_panel_path(input(c)?, &c.schema) {
        Ok(ds) => ds,
        Err(e) => {
            write_json(&c.out, "validation.json", &serde_json::json!({ "error": e.to_string() }))?;
            return Err(e);
        }
    };
    let report = validate_panel(&ds);
    write_json(&c.out, "validation.json", &report)?;
    for v in &report.violations {
        eprintln!("violation: {v}");
    }
    Ok(if report.is_clean() { 0 } else { 1 })
}

#[derive(Serialize)]
struct EstimateRow {
    e: i64,
    estimate: f64,
    se: f64,
    lower: f64,
    upper: f64,
    v_plugin: f64,
    v_crve: Option<f64>,
    n: usize,
    band_lower: Option<f64>,
    band_upper: Option<f64>,
}

/// In-memory results of the estimate workflow.
#[derive(Clone, Debug)]
pub struct EstimateOutput {
    pub stacks: StackSet,
    pub event_study: EventStudyResult,
    pub pointwise: Vec<VarianceEstimate>,
    pub band: Option<BandResult>,
    pub stacked: StackedDataset,
}

/// Stacks, aggregated event study, pointwise intervals (clustered variance
/// under FWL weights) and the bootstrap band when `bootstrap.b > 0`.
pub fn estimate(ds: &PanelDataset, c: &RunConfig) -> Result<EstimateOutput> {
    let stacks = build_all_stacks(ds, &design(c), c.on_infeasible)?;
    if stacks.stacks.is_empty() {
        return Err(Error::EmptyInput("no feasible stacks".into()));
    }
    let es = event_study(&stacks.stacks, ds, &c.weights)?;
    let table = InfluenceTable::build(&stacks.stacks, ds, &es)?;
    let stacked = materialize_stacked(&stacks.stacks, ds)?;
    let crve = matches!(c.weights, WeightScheme::Fwl).then_some((&stacked, stacks.stacks.as_slice()));
    let pointwise = pointwise_inference(&table, &es, crve, c.alpha, c.crve_small_sample)?;
    let band = if c.bootstrap.b > 0 {
        Some(multiplier_bootstrap(&table, &es.estimates(), &c.bootstrap)?)
    } else {
        None
    };
    Ok(EstimateOutput {
        stacks,
        event_study: es,
        pointwise,
        band,
        stacked,
    })
}

impl EstimateOutput {
    pub fn stacks_json(&self, ds: &PanelDataset) -> serde_json::Value {
        let rosters: Vec<_> = self.stacks.stacks.iter().map(|s| s.roster(ds)).collect();
        serde_json::json!({ "stacks": rosters, "skipped": self.stacks.skipped })
    }

    pub fn inference_json(&self, alpha: f64) -> serde_json::Value {
        serde_json::json!({ "alpha": alpha, "pointwise": self.pointwise, "band": self.band })
    }
}

pub fn cmd_estimate(c: &RunConfig) -> Result<i32> {
    prepare_out(c)?;
    let ds = load_panel_path(input(c)?, &c.schema)?;
    let out = estimate(&ds, c)?;
    for s in &out.stacks.skipped {
        eprintln!("skipped cohort {}: {}", s.g, s.reason);
    }
    let rows: Vec<EstimateRow> = out
        .pointwise
        .iter()
        .map(|v| {
            let bp = out.band.as_ref().and_then(|b| b.points.iter().find(|p| p.e == v.e));
            EstimateRow {
                e: v.e,
                estimate: v.estimate,
                se: v.se,
                lower: v.lower,
                upper: v.upper,
                v_plugin: v.v_plugin,
                v_crve: v.v_crve,
                n: v.n,
                band_lower: bp.map(|p| p.lower),
                band_upper: bp.map(|p| p.upper),
            }
        })
        .collect();
    if c.formats.contains(&Format::Json) {
        write_json(&c.out, "stacks.json", &out.stacks_json(&ds))?;
        write_json(&c.out, "event_study.json", &out.event_study)?;
        write_json(&c.out, "inference.json", &out.inference_json(c.alpha))?;
    }
    if c.formats.contains(&Format::Csv) {
        out.event_study.write_csv(create(&c.out, "event_study.csv")?)?;
        let mut w = csv::Writer::from_writer(create(&c.out, "inference.csv")?);
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    if c.export_stacked {
        out.stacked.write_csv(create(&c.out, "stacked.csv")?)?;
    }
    for r in &rows {
        println!("e={:>3} estimate={:.6} se={:.6} ci=[{:.6}, {:.6}]", r.e, r.estimate, r.se, r.lower, r.upper);
    }
    Ok(0)
}

/// In-memory results of the decompose workflow.
#[derive(Clone, Debug)]
pub struct DecomposeOutput {
    pub weights: AuxWeightTable,
    pub decomposition: Decomposition,
    pub properties: PropertyReport,
    pub aggregated: AggWeightTable,
    /// Implied estimand from user CATT values if given, else from the realized contrasts.
    pub implied: BTreeMap<i64, f64>,
    pub catt_provenance: &'static str,
}

pub fn decompose_panel(ds: &PanelDataset, c: &RunConfig) -> Result<DecomposeOutput> {
    let (weights, decomposition) = decompose(ds, c.spec, (c.pre, c.post))?;
    let properties = check_weight_properties(&weights, 1e-10);
    let w = c
        .agg_weights
        .clone()
        .unwrap_or_else(|| (0..=c.post).map(|j| (j, 1.0 / (c.post + 1) as f64)).collect());
    let aggregated = aggregated_weights(&weights, &w)?;
    let (catt_provenance, implied) = match &c.catt {
        Some(v) => {
            let m: BTreeMap<(i64, i64), f64> = v.iter().map(|x| ((x.g, x.e), x.value)).collect();
            ("user", implied_estimand(&weights, &m)?)
        }
        None => ("realized_contrasts", decomposition.implied.clone()),
    };
    Ok(DecomposeOutput {
        weights,
        decomposition,
        properties,
        aggregated,
        implied,
        catt_provenance,
    })
}

impl DecomposeOutput {
    pub fn decomposition_json(&self) -> serde_json::Value {
        let contrasts: Vec<CattValue> = self
            .decomposition
            .contrasts
            .iter()
            .map(|(&(g, e), &value)| CattValue { g, e, value })
            .collect();
        serde_json::json!({
            "alpha": self.decomposition.alpha,
            "contrasts": contrasts,
            "implied": self.implied,
            "catt_provenance": self.catt_provenance,
            "max_discrepancy": self.decomposition.max_discrepancy,
        })
    }
}

pub fn cmd_decompose(c: &RunConfig) -> Result<i32> {
    prepare_out(c)?;
    let ds = load_panel_path(input(c)?, &c.schema)?;
    let out = decompose_panel(&ds, c)?;
    if c.formats.contains(&Format::Json) {
        write_json(&c.out, "aux_weights.json", &out.weights)?;
        write_json(&c.out, "agg_weights.json", &out.aggregated)?;
        write_json(&c.out, "properties.json", &out.properties)?;
        write_json(&c.out, "decomposition.json", &out.decomposition_json())?;
    }
    if c.formats.contains(&Format::Csv) {
        out.weights.write_csv(create(&c.out, "aux_weights.csv")?)?;
        let mut wr = csv::Writer::from_writer(create(&c.out, "agg_weights.csv")?);
        for x in &out.aggregated.weights {
            wr.serialize(x)?;
        }
        wr.flush()?;
    }
    for ch in &out.properties.checks {
        println!(
            "j={} own_sum={:.12} (i) {} (ii) {} (iii) {} (iv) {} negative_own={:?}",
            ch.j,
            ch.own_sum,
            pass(ch.own_ok),
            pass(ch.other_ok),
            pass(ch.excluded_ok),
            pass(ch.never_ok),
            ch.negative_own
        );
    }
    let agg = &out.aggregated;
    println!("sum Omega over post periods = {:.12} {}", agg.post_sum, pass(agg.normalization_ok));
    Ok(0)
}

fn pass(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "FAIL"
    }
}

pub fn cmd_simulate(c: &RunConfig) -> Result<i32> {
    prepare_out(c)?;
    let dgp = c.dgp.as_ref().ok_or_else(|| Error::Config("--dgp is required".into()))?;
    match c.reps {
        None => {
            let ds = simulate_panel(dgp)?;
            write_panel(&ds, create(&c.out, "panel.csv")?, &c.schema)?;
        }
        Some(reps) => {
            let specs = match &c.estimators {
                Some(v) => v.clone(),
                None => vec![EstimatorSpec::Stacked {
                    name: "stacked".into(),
                    design: design(c),
                    weights: c.weights.clone(),
                    alpha: c.alpha,
                }],
            };
            let summary = monte_carlo(dgp, &specs, reps)?;
            if c.formats.contains(&Format::Json) {
                write_json(&c.out, "mc_summary.json", &summary)?;
            }
            if c.formats.contains(&Format::Csv) {
                summary.write_csv(create(&c.out, "mc_summary.csv")?)?;
            }
            if !summary.failures.is_empty() {
                eprintln!("{} replication failures", summary.failures.len());
            }
        }
    }
    Ok(0)
}

pub fn run(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Validate(a) => cmd_validate(&a.resolve()?),
        Command::Estimate(a) => cmd_estimate(&a.resolve()?),
        Command::Decompose(a) => cmd_decompose(&a.resolve()?),
        Command::Simulate(a) => cmd_simulate(&a.resolve()?),
    }
}

/// Exit code for a finished run: 0 success, 1 domain error, 2 i/o error.
pub fn exit_code(result: &Result<i32>) -> i32 {
    match result {
        Ok(code) => *code,
        Err(e) if e.is_io() => 2,
        Err(_) => 1,
    }
}
