//! Monte Carlo replications of the simulation design.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{fit, EstimatorSpec, InstrumentSource, Variant};
use crate::rates::{estimate_rates, RatesEstimate, RatesMode};
use crate::simulate::{simulate_replication, MeasureChannelSpec, SimConfig};

/// Where an estimator's misclassification rates come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatesSource {
    /// Estimated from each replication's data.
    #[default]
    Estimated,
    /// The rates of the simulation channels, with no sampling error.
    Known,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McVariant {
    /// Row label in reports; defaults to the estimator's label.
    #[serde(default)]
    pub name: Option<String>,
    pub estimator: EstimatorSpec,
    #[serde(default)]
    pub rates: RatesSource,
}

impl McVariant {
    pub fn new(estimator: EstimatorSpec) -> Self {
        Self {
            name: None,
            estimator,
            rates: RatesSource::Estimated,
        }
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = Some(name.to_string());
        self
    }

    pub fn known_rates(mut self) -> Self {
        self.rates = RatesSource::Known;
        self
    }

    fn needs_rates(&self) -> bool {
        matches!(self.estimator.variant, Variant::Adjusted | Variant::S2sls)
    }

    pub fn display_name(&self, n_measures: usize) -> String {
        self.name.clone().unwrap_or_else(|| self.estimator.label(n_measures))
    }
}

fn default_rates_mode() -> RatesMode {
    RatesMode::Two
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub sim: SimConfig,
    pub replications: usize,
    pub variants: Vec<McVariant>,
    #[serde(default = "default_rates_mode")]
    pub rates_mode: RatesMode,
}

impl McConfig {
    /// The baseline design (`S` groups of `n`, `Q` replications) with the
    /// standard estimator line-up.
    pub fn baseline(groups: usize, n: usize, replications: usize, large: bool, seed: u64) -> Self {
        Self {
            sim: SimConfig::baseline(groups, n, large, seed),
            replications,
            variants: baseline_variants(),
            rates_mode: RatesMode::Two,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        if self.replications == 0 {
            return Err(Error::Invalid("need at least one replication".into()));
        }
        if self.rates_mode == RatesMode::Two && self.sim.measures.len() != 2 {
            if self.variants.iter().any(|v| v.needs_rates() && v.rates == RatesSource::Estimated) {
                return Err(Error::Invalid("two-measure rate estimation needs two measures".into()));
            }
        }
        Ok(())
    }

    fn known_rates(&self) -> RatesEstimate {
        let r: Vec<(f64, f64)> = self.sim.measures.iter().map(MeasureChannelSpec::rates).collect();
        let (a, b) = (r[0], *r.get(1).unwrap_or(&r[0]));
        RatesEstimate::known([a.0, b.0], [a.1, b.1])
    }
}

/// Naive, adjusted and oracle estimators with group fixed effects.
pub fn baseline_variants() -> Vec<McVariant> {
    vec![
        McVariant::new(
            EstimatorSpec::new(Variant::Naive)
                .measure(1)
                .instruments(InstrumentSource::SameMeasure)
                .within(),
        ),
        McVariant::new(
            EstimatorSpec::new(Variant::Naive)
                .measure(2)
                .instruments(InstrumentSource::SameMeasure)
                .within(),
        ),
        McVariant::new(
            EstimatorSpec::new(Variant::Adjusted)
                .measure(1)
                .instruments(InstrumentSource::CrossMeasure)
                .within(),
        ),
        McVariant::new(
            EstimatorSpec::new(Variant::Adjusted)
                .measure(2)
                .instruments(InstrumentSource::CrossMeasure)
                .within(),
        ),
        McVariant::new(EstimatorSpec::new(Variant::Oracle).within()),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    /// Mean of the reported standard errors.
    pub mean_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub name: String,
    pub label: String,
    pub params: Vec<ParamSummary>,
    pub used: usize,
    pub failed: usize,
    /// Replication index of each row of `estimates`.
    pub replications: Vec<usize>,
    pub estimates: Vec<Vec<f64>>,
    pub standard_errors: Vec<Vec<f64>>,
    /// Distinct failure messages with counts.
    pub failures: Vec<(String, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatesReport {
    pub params: Vec<ParamSummary>,
    pub used: usize,
    pub failed: usize,
    pub replications: Vec<usize>,
    pub estimates: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub config: McConfig,
    pub rates: Option<RatesReport>,
    pub variants: Vec<VariantReport>,
}

impl McReport {
    pub fn variant(&self, name: &str) -> Option<&VariantReport> {
        self.variants.iter().find(|v| v.name == name || v.label == name)
    }
}

impl VariantReport {
    pub fn param(&self, name: &str) -> Option<&ParamSummary> {
        self.params.iter().find(|p| p.name == name)
    }
}

impl RatesReport {
    pub fn param(&self, name: &str) -> Option<&ParamSummary> {
        self.params.iter().find(|p| p.name == name)
    }
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

fn summarize(names: &[String], rows: &[Vec<f64>], ses: Option<&[Vec<f64>]>) -> Vec<ParamSummary> {
    names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let col: Vec<f64> = rows.iter().map(|r| r[i]).collect();
            let (mean, sd) = mean_sd(&col);
            let mean_se = ses.map_or(0.0, |s| mean_sd(&s.iter().map(|r| r[i]).collect::<Vec<_>>()).0);
            ParamSummary {
                name: name.clone(),
                mean,
                sd,
                mean_se,
            }
        })
        .collect()
}

struct RepOutcome {
    rates: Option<std::result::Result<RatesEstimate, String>>,
    fits: Vec<std::result::Result<(Vec<String>, Vec<f64>, Vec<f64>), String>>,
}

fn run_replication(cfg: &McConfig, q: usize) -> RepOutcome {
    let n_variants = cfg.variants.len();
    let ds = match simulate_replication(&cfg.sim, q as u64) {
        Ok(ds) => ds,
        Err(e) => {
            let msg = format!("simulation: {e}");
            return RepOutcome {
                rates: Some(Err(msg.clone())),
                fits: vec![Err(msg); n_variants],
            };
        }
    };
    let want_estimated = cfg
        .variants
        .iter()
        .any(|v| v.needs_rates() && v.rates == RatesSource::Estimated);
    let estimated = want_estimated.then(|| estimate_rates(&ds, cfg.rates_mode).map_err(|e| format!("rates: {e}")));
    let known = cfg.known_rates();
    let fits = cfg
        .variants
        .iter()
        .map(|v| {
            let mut spec = v.estimator.clone();
            if v.needs_rates() {
                spec.rates = Some(match v.rates {
                    RatesSource::Known => known.clone(),
                    RatesSource::Estimated => estimated.clone().expect("estimated rates requested")?,
                });
            }
            let f = fit(&ds, &spec).map_err(|e| e.to_string())?;
            Ok((f.names, f.coefficients, f.se))
        })
        .collect();
    RepOutcome { rates: estimated, fits }
}

fn count_failures(msgs: impl Iterator<Item = String>) -> Vec<(String, usize)> {
    let mut out: Vec<(String, usize)> = Vec::new();
    for m in msgs {
        match out.iter_mut().find(|(k, _)| *k == m) {
            Some((_, c)) => *c += 1,
            None => out.push((m, 1)),
        }
    }
    out
}

/// Runs all replications in parallel. Replication `q` draws from streams
/// keyed by `(seed, q, group)`, so results do not depend on the thread count.
pub fn run_mc(cfg: &McConfig) -> Result<McReport> {
    cfg.validate()?;
    let outcomes: Vec<RepOutcome> = (0..cfg.replications)
        .into_par_iter()
        .map(|q| run_replication(cfg, q))
        .collect();
    let n_measures = cfg.sim.measures.len();

    let rates = outcomes.first().and_then(|o| o.rates.as_ref()).map(|_| {
        let mut replications = Vec::new();
        let mut estimates = Vec::new();
        let mut names = Vec::new();
        let mut failed = 0;
        for (q, o) in outcomes.iter().enumerate() {
            match &o.rates {
                Some(Ok(r)) => {
                    names = r.param_names.clone();
                    replications.push(q);
                    estimates.push(r.params.clone());
                }
                _ => failed += 1,
            }
        }
        RatesReport {
            params: summarize(&names, &estimates, None),
            used: estimates.len(),
            failed,
            replications,
            estimates,
        }
    });

    let mut variants = Vec::with_capacity(cfg.variants.len());
    let mut total_used = 0;
    for (vi, v) in cfg.variants.iter().enumerate() {
        let mut names = Vec::new();
        let mut replications = Vec::new();
        let mut estimates = Vec::new();
        let mut standard_errors = Vec::new();
        let mut errors = Vec::new();
        for (q, o) in outcomes.iter().enumerate() {
            match &o.fits[vi] {
                Ok((n, c, s)) => {
                    names = n.clone();
                    replications.push(q);
                    estimates.push(c.clone());
                    standard_errors.push(s.clone());
                }
                Err(e) => errors.push(e.clone()),
            }
        }
        total_used += estimates.len();
        variants.push(VariantReport {
            name: v.display_name(n_measures),
            label: v.estimator.label(n_measures),
            params: summarize(&names, &estimates, Some(&standard_errors)),
            used: estimates.len(),
            failed: errors.len(),
            replications,
            estimates,
            standard_errors,
            failures: count_failures(errors.into_iter()),
        });
    }
    if !cfg.variants.is_empty() && total_used == 0 {
        return Err(Error::AllReplicationsFailed(cfg.replications));
    }
    Ok(McReport {
        config: cfg.clone(),
        rates,
        variants,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Markdown,
    Csv,
}

/// One row of a summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub estimator: String,
    pub parameter: String,
    pub mean: f64,
    pub sd: f64,
    pub mean_se: f64,
    pub used: usize,
    pub failed: usize,
}

pub fn table_rows(report: &McReport) -> Vec<TableRow> {
    let mut rows = Vec::new();
    if let Some(r) = &report.rates {
        for p in &r.params {
            rows.push(TableRow {
                estimator: "rates".into(),
                parameter: p.name.clone(),
                mean: p.mean,
                sd: p.sd,
                mean_se: p.mean_se,
                used: r.used,
                failed: r.failed,
            });
        }
    }
    for v in &report.variants {
        for p in &v.params {
            rows.push(TableRow {
                estimator: v.name.clone(),
                parameter: p.name.clone(),
                mean: p.mean,
                sd: p.sd,
                mean_se: p.mean_se,
                used: v.used,
                failed: v.failed,
            });
        }
    }
    rows
}

/// Mean, SD and mean standard error per estimator and parameter.
pub fn emit_table(report: &McReport, format: TableFormat) -> Result<String> {
    let rows = table_rows(report);
    match format {
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in &rows {
                w.serialize(r)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
        TableFormat::Markdown => {
            let mut s = String::new();
            s.push_str("| estimator | parameter | mean | sd | mean se | used | failed |\n");
            s.push_str("|---|---|---:|---:|---:|---:|---:|\n");
            for r in &rows {
                writeln!(
                    s,
                    "| {} | {} | {:.4} | {:.4} | {:.4} | {} | {} |",
                    r.estimator, r.parameter, r.mean, r.sd, r.mean_se, r.used, r.failed
                )
                .expect("writing to a string");
            }
            Ok(s)
        }
    }
}

/// Parses a table written by [`emit_table`] in CSV form.
pub fn read_table_csv(text: &str) -> Result<Vec<TableRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
