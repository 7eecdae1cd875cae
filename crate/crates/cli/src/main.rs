use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use peerlink::estimators::{fit, s2sls, EstimatorSpec, FixedEffectsMode, InstrumentSource, PeerForm, Variant};
use peerlink::io::{load_dataset_dir, load_json, save_dataset, to_json};
use peerlink::lim::{lim_weight_fast, lim_weights_bruteforce, LimTable, BRUTE_FORCE_CAP};
use peerlink::montecarlo::{emit_table, run_mc, McConfig, TableFormat};
use peerlink::rates::{estimate_rates, estimate_rates_from, psi_moments_single_for, RatesEstimate, RatesMode};
use peerlink::simulate::{simulate_dataset, SimConfig};
use peerlink::{Error, Result};

#[derive(Parser)]
#[command(name = "peerlink", version, about = "Peer effects with misclassified network links")]
struct Cli {
    /// Override the seed in a simulation or Monte Carlo config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file, or directory for `simulate` and `mc`. Defaults to stdout
    /// where a single document is produced.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset from a JSON config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Estimate misclassification rates.
    Rates {
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "two")]
        mode: ModeArg,
        /// Measure used in single mode.
        #[arg(long, default_value_t = 1)]
        measure: usize,
    },
    /// Fit one peer-effects estimator.
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// Rates JSON from `rates`; required by the adjusted variant.
        #[arg(long)]
        rates: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "adjusted")]
        variant: VariantArg,
        #[arg(long, value_enum, default_value = "none")]
        fe: FeArg,
        #[arg(long, default_value_t = 1)]
        measure: usize,
        /// Defaults by variant: same for naive, cross (two measures) or
        /// transpose (one) for adjusted, true for oracle.
        #[arg(long, value_enum)]
        instruments: Option<InstrumentArg>,
        #[arg(long, value_enum, default_value = "sums")]
        form: FormArg,
        /// Skip the first-stage rate correction in the standard errors.
        #[arg(long)]
        no_correction: bool,
    },
    /// Stacked adjusted 2SLS over both measures.
    S2sls {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        rates: PathBuf,
        #[arg(long, value_enum, default_value = "none")]
        fe: FeArg,
    },
    /// Run a Monte Carlo experiment; writes report.json, table.md, table.csv.
    Mc {
        #[arg(long)]
        config: PathBuf,
    },
    /// Linear-in-means weights for one group size.
    Lim {
        #[arg(long)]
        p0: f64,
        #[arg(long)]
        p1: f64,
        /// Group size.
        #[arg(long)]
        n: usize,
        /// Observed row cells, e.g. `0,1,1`; prints the weight on `--j`.
        #[arg(long, value_delimiter = ',')]
        h: Option<Vec<u8>>,
        /// Coordinate (0-based) within `--h`.
        #[arg(long, default_value_t = 0)]
        j: usize,
        /// Also compare against the brute-force solve (n <= 20).
        #[arg(long)]
        check: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Single,
    Two,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Ols,
    Naive,
    Adjusted,
    Oracle,
}

#[derive(Clone, Copy, ValueEnum)]
enum FeArg {
    None,
    Within,
}

#[derive(Clone, Copy, ValueEnum)]
enum InstrumentArg {
    Same,
    Cross,
    Transpose,
    True,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormArg {
    Sums,
    Means,
}

impl From<FeArg> for FixedEffectsMode {
    fn from(a: FeArg) -> Self {
        match a {
            FeArg::None => FixedEffectsMode::None,
            FeArg::Within => FixedEffectsMode::Within,
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn load_rates(path: &Path) -> Result<RatesEstimate> {
    load_json(path)
}

fn run(cli: Cli) -> Result<()> {
    let out = cli.out.as_deref();
    match cli.command {
        Command::Simulate { config } => {
            let mut cfg: SimConfig = load_json(&config)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let dir = out.ok_or_else(|| Error::Invalid("simulate needs --out <dir>".into()))?;
            let ds = simulate_dataset(&cfg)?;
            save_dataset(&ds, dir)?;
        }
        Command::Rates { data, mode, measure } => {
            let ds = load_dataset_dir(&data)?;
            let est = match mode {
                ModeArg::Two => estimate_rates(&ds, RatesMode::Two)?,
                ModeArg::Single if measure == 1 => estimate_rates(&ds, RatesMode::Single)?,
                ModeArg::Single => estimate_rates_from(&psi_moments_single_for(&ds, measure)?)?,
            };
            emit(out, &to_json(&est)?)?;
        }
        Command::Fit {
            data,
            rates,
            variant,
            fe,
            measure,
            instruments,
            form,
            no_correction,
        } => {
            let ds = load_dataset_dir(&data)?;
            let variant = match variant {
                VariantArg::Ols => Variant::Ols,
                VariantArg::Naive => Variant::Naive,
                VariantArg::Adjusted => Variant::Adjusted,
                VariantArg::Oracle => Variant::Oracle,
            };
            let mut spec = EstimatorSpec::new(variant)
                .measure(measure)
                .fixed_effects(fe.into())
                .peer_form(match form {
                    FormArg::Sums => PeerForm::Sums,
                    FormArg::Means => PeerForm::Means,
                });
            if let Some(iv) = instruments {
                spec = spec.instruments(match iv {
                    InstrumentArg::Same => InstrumentSource::SameMeasure,
                    InstrumentArg::Cross => InstrumentSource::CrossMeasure,
                    InstrumentArg::Transpose => InstrumentSource::Transpose,
                    InstrumentArg::True => InstrumentSource::TrueNetwork,
                });
            }
            if no_correction {
                spec = spec.without_correction();
            }
            if let Some(p) = rates {
                spec = spec.with_rates(load_rates(&p)?);
            }
            emit(out, &to_json(&fit(&ds, &spec)?)?)?;
        }
        Command::S2sls { data, rates, fe } => {
            let ds = load_dataset_dir(&data)?;
            let est = s2sls(&ds, &load_rates(&rates)?, fe.into())?;
            emit(out, &to_json(&est)?)?;
        }
        Command::Mc { config } => {
            let mut cfg: McConfig = load_json(&config)?;
            if let Some(s) = cli.seed {
                cfg.sim.seed = s;
            }
            let dir = out.ok_or_else(|| Error::Invalid("mc needs --out <dir>".into()))?;
            let start = Instant::now();
            let report = run_mc(&cfg)?;
            fs::create_dir_all(dir)?;
            fs::write(dir.join("report.json"), to_json(&report)?)?;
            fs::write(dir.join("table.md"), emit_table(&report, TableFormat::Markdown)?)?;
            fs::write(dir.join("table.csv"), emit_table(&report, TableFormat::Csv)?)?;
            eprintln!(
                "{} replications in {:.1}s",
                cfg.replications,
                start.elapsed().as_secs_f64()
            );
        }
        Command::Lim { p0, p1, n, h, j, check } => {
            let doc = lim_document(p0, p1, n, h.as_deref(), j, check)?;
            let mut text = serde_json::to_string_pretty(&doc)?;
            text.push('\n');
            emit(out, &text)?;
        }
    }
    Ok(())
}

fn lim_document(p0: f64, p1: f64, n: usize, h: Option<&[u8]>, j: usize, check: bool) -> Result<serde_json::Value> {
    let table = LimTable::new(n, p0, p1)?;
    let rows: Vec<_> = (0..=n - 2)
        .map(|q| serde_json::json!({ "ones_among_others": q, "h_j0": table.get(0, q), "h_j1": table.get(1, q) }))
        .collect();
    let mut doc = serde_json::json!({ "schema_version": peerlink::io::SCHEMA_VERSION, "n": n, "p0": p0, "p1": p1, "weights": rows });
    if let Some(h) = h {
        if h.len() != n - 1 {
            return Err(Error::Invalid(format!("--h has {} cells; a group of {n} needs {}", h.len(), n - 1)));
        }
        doc["weight"] = lim_weight_fast(h, j, p0, p1)?.into();
    }
    if check {
        if n > BRUTE_FORCE_CAP {
            return Err(Error::TooLarge { n, cap: BRUTE_FORCE_CAP });
        }
        let m = n - 1;
        let mut worst: f64 = 0.0;
        for jj in 0..m {
            for (idx, b) in lim_weights_bruteforce(n, jj, p0, p1)?.iter().enumerate() {
                let ones = idx.count_ones() as usize;
                let hj = ((idx >> (m - 1 - jj)) & 1) as u8;
                worst = worst.max((table.get(hj, ones - usize::from(hj)) - b).abs());
            }
        }
        doc["max_abs_diff_vs_bruteforce"] = worst.into();
    }
    Ok(doc)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
