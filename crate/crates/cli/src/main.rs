use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use opelab_core::harness::{self, run_sweep, run_sweep_to, toy_spec, EnvKind, SweepParam, SweepRow, SweepSpec};
use opelab_core::movielens::{self, MovielensEnv};
use opelab_core::synth::{self, SynthConfig, SynthWorld};
use opelab_core::{Error, Result};

#[derive(Parser)]
#[command(name = "opelab", version, about = "Off-policy estimator benchmarks")]
struct Cli {
    /// Master seed; overrides the seed in any config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (defaults to one per core).
    #[arg(long, global = true, env = "OPELAB_JOBS")]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tree-pooled IPS on the four-action example at levels 1, 2 and 3.
    Toy {
        /// Replications per level.
        #[arg(long, default_value_t = 50_000)]
        reps: usize,
        /// Also write `toy.csv` into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Runs a sweep described by a TOML file and writes `<out>/<experiment>.csv`.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draws one logged dataset from a synthetic world and writes it as CSV.
    GenSynth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Loads a MovieLens ratings file, prints a summary and runs a sweep on it.
    Movielens {
        /// Path to `u.data`.
        #[arg(long)]
        data: PathBuf,
        /// Sweep config; the environment is forced to movielens.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for `<experiment>.csv`; results are printed either way.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replications, when no config is given.
        #[arg(long, default_value_t = 20)]
        n_seeds: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        harness::set_jobs(jobs)?;
    }
    match cli.command {
        Command::Toy { reps, out } => {
            let mut spec = toy_spec();
            spec.n_seeds = reps;
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            let rows = execute(&spec, out.as_deref())?;
            print_rows(&rows);
        }
        Command::Sweep { config, out } => {
            let mut spec = SweepSpec::from_file(&config)?;
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            let rows = execute(&spec, Some(&out))?;
            print_rows(&rows);
        }
        Command::GenSynth { config, out } => {
            let mut cfg = SynthConfig::from_file(&config)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let world = Arc::new(SynthWorld::build(&cfg)?);
            let logging = Arc::new(synth::logging_policy(world.clone(), cfg.beta)?);
            let dataset = synth::generate_dataset(&world, logging, cfg.n_logged, cfg.seed)?;
            let file = File::create(&out).map_err(|e| Error::io(&out, e))?;
            let mut w = BufWriter::new(file);
            synth::export_dataset(&dataset, &mut w)?;
            w.flush().map_err(|e| Error::io(&out, e))?;
            eprintln!("wrote {} interactions to {}", dataset.len(), out.display());
        }
        Command::Movielens {
            data,
            config,
            out,
            n_seeds,
        } => {
            if !data.is_file() {
                return Err(Error::Config(format!(
                    "{}: no such ratings file (expected MovieLens 100K u.data)",
                    data.display()
                )));
            }
            let mut spec = match &config {
                Some(path) => SweepSpec::from_file(path)?,
                None => SweepSpec {
                    experiment: "movielens".into(),
                    sweep_param: SweepParam::NLogged,
                    sweep_values: vec![10_000.0],
                    estimators: ["ips", "snips", "dr", "pc-ips:tree", "pc-snips:knn"]
                        .map(String::from)
                        .to_vec(),
                    n_seeds,
                    ..SweepSpec::default()
                },
            };
            spec.environment = EnvKind::Movielens;
            spec.data_path = Some(data.clone());
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            spec.validate()?;
            let ratings = movielens::load_movielens(&data)?;
            let env = MovielensEnv::from_file(&data, spec.d_embed, spec.seed)?;
            println!(
                "ratings {}  users {}  items {}  positives {}  rank {}  context classes {}",
                ratings.len(),
                ratings.n_users,
                ratings.n_items,
                env.binary().n_ones(),
                spec.d_embed,
                env.n_classes()
            );
            let rows = execute(&spec, out.as_deref())?;
            print_rows(&rows);
        }
    }
    Ok(())
}

fn execute(spec: &SweepSpec, out_dir: Option<&Path>) -> Result<Vec<SweepRow>> {
    match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(format!("{}.csv", spec.experiment));
            let rows = run_sweep_to(spec, &path)?;
            eprintln!("wrote {}", path.display());
            Ok(rows)
        }
        None => run_sweep(spec),
    }
}

fn print_rows(rows: &[SweepRow]) {
    println!(
        "{:<18} {:>12} {:<10} {:>8} {:>8} {:>12} {:>12} {:>12} {:>5}",
        "param", "value", "estimator", "tau1", "tau2", "mse", "bias_sq", "variance", "fail"
    );
    for row in rows {
        let r = &row.result;
        let (t1, t2) = match r.candidate.taus {
            Some((a, b)) => (fmt_tau(a.value()), fmt_tau(b.value())),
            None => ("-".into(), "-".into()),
        };
        let label = match r.candidate.spec.conv {
            Some(k) => format!("{}/{}", r.candidate.spec.label(), k.name()),
            None => r.candidate.spec.label(),
        };
        let (mse, b2, var) = match &r.stats {
            Some(s) => (format!("{:.4}", s.mse), format!("{:.4}", s.bias_sq), format!("{:.4}", s.variance)),
            None => ("failed".into(), "-".into(), "-".into()),
        };
        println!(
            "{:<18} {:>12} {:<10} {:>8} {:>8} {:>12} {:>12} {:>12} {:>5}",
            row.sweep_param, row.sweep_value, label, t1, t2, mse, b2, var, r.failures
        );
    }
}

fn fmt_tau(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_else(|| "id".into())
}
