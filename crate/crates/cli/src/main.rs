use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use imfeed::channel::EnvironmentSpec;
use imfeed::codec::{load_checkpoint, save_checkpoint, train, LayerSpec, Schedule};
use imfeed::dataset::Dataset;
use imfeed::experiment::{run_experiment, ExperimentSpec, Recipe};
use imfeed::ifa::{make_benchmarks, row_col_sums};
use imfeed::metrics::{cdf, sgcs};
use imfeed::pipeline::{bs_decode_traced, link_controls, ue_encode_traced, PipelineFlags};
use imfeed::{atomic_write, desk_config, Exec, SystemConfig};

#[derive(Parser)]
#[command(name = "imfeed", version, about = "Uplink-assisted implicit CSI feedback toolkit")]
struct Cli {
    /// Flat key = value system config (defaults to the desk config).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Run on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone, Copy)]
struct Ablation {
    #[arg(long)]
    no_bce: bool,
    #[arg(long)]
    no_ifa: bool,
    #[arg(long)]
    no_ul_assist: bool,
}

impl Ablation {
    fn flags(self) -> PipelineFlags {
        PipelineFlags {
            bce_on: !self.no_bce,
            ifa_on: !self.no_ifa,
            ul_assist_on: !self.no_ul_assist,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a channel-pair dataset.
    Gen {
        #[arg(long, default_value_t = 5)]
        envs: usize,
        /// Index of the first environment of the family.
        #[arg(long, default_value_t = 0)]
        first_env: usize,
        #[arg(long, default_value_t = 400)]
        per_env: usize,
        /// First user index within every environment.
        #[arg(long, default_value_t = 0)]
        first_user: u64,
        #[arg(long, default_value = "dataset.bin")]
        name: String,
    },
    /// Train a codec on a dataset and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 60)]
        epochs: usize,
        #[arg(long, default_value_t = 12)]
        finetune_epochs: usize,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value = "model.ckpt")]
        name: String,
        #[command(flatten)]
        ablation: Ablation,
    },
    /// Evaluate a checkpoint through the UE encode and BS decode pipelines.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        ablation: Ablation,
    },
    /// Run an experiment recipe: fig2, fig4 or fig5.
    Exp {
        recipe: String,
        #[arg(long)]
        train_per_env: Option<usize>,
        #[arg(long)]
        test_per_env: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        finetune_epochs: Option<usize>,
    },
    /// Print config, benchmark and (optionally) dataset shift diagnostics.
    Inspect {
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<SystemConfig> {
    let mut cfg = match &cli.config {
        Some(p) => SystemConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => desk_config(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    atomic_write(path, serde_json::to_string_pretty(value)?.as_bytes())?;
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    let out = &cli.out;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match &cli.cmd {
        Command::Gen {
            envs,
            first_env,
            per_env,
            first_user,
            name,
        } => {
            if *per_env == 0 || *envs == 0 {
                bail!("--envs and --per-env must be positive");
            }
            let specs: Vec<_> = (*first_env..first_env + envs)
                .map(|i| EnvironmentSpec::family(i, cfg.seed))
                .collect();
            let data = Dataset::generate_users(&cfg, &specs, *first_user, *per_env, exec)?;
            let manifest = data.write(out.join(name))?;
            println!("wrote {} pairs to {} ({})", data.len(), out.join(name).display(), manifest.display());
        }
        Command::Train {
            data,
            epochs,
            finetune_epochs,
            batch_size,
            name,
            ablation,
        } => {
            let flags = ablation.flags();
            let ds = Dataset::read(data, Some(&cfg))?;
            let bench = make_benchmarks(&cfg)?;
            let samples = imfeed::pipeline::prepare_samples(&ds.pairs, &bench, flags, exec)?;
            let schedule = Schedule {
                phase1_epochs: *epochs,
                phase2_epochs: *finetune_epochs,
                batch_size: *batch_size,
                seed: cfg.seed,
                ..Schedule::default()
            };
            let layer = LayerSpec::for_config(&cfg, flags.ul_assist_on);
            let (params, report) = train(&samples, &layer, cfg.b_bits, &schedule, exec)?;
            let path = out.join(name);
            save_checkpoint(&path, &params, cfg.hash64())?;
            write_json(
                &out.join("train_report.json"),
                &json!({ "flags": flags, "schedule": schedule, "report": report, "n_params": params.len() }),
            )?;
            println!(
                "trained {} parameters on {} samples, final loss {:.5}; checkpoint {}",
                params.len(),
                samples.len(),
                report.final_loss().unwrap_or(f64::NAN),
                path.display()
            );
        }
        Command::Eval { data, model, ablation } => {
            let flags = ablation.flags();
            let ds = Dataset::read(data, Some(&cfg))?;
            let (params, _) = load_checkpoint(model, Some(cfg.hash64()))?;
            let bench = make_benchmarks(&cfg)?;
            let scores = exec.try_map(&ds.pairs, |pair| -> imfeed::Result<f64> {
                let (codeword, _, _) = ue_encode_traced(pair, &bench, &params, cfg.b_bits, flags)?;
                let (w_hat, _) = bs_decode_traced(&codeword, pair.uplink(), &bench, &params, flags)?;
                let (target, _) = imfeed::pipeline::link_matrices(pair, flags.bce_on)?;
                sgcs(&target, &w_hat)
            })?;
            let c = cdf(&scores)?;
            let mean = imfeed::metrics::mean(&scores);
            let mut buf = Vec::new();
            c.write_csv(&mut buf)?;
            atomic_write(out.join("eval_sgcs_cdf.csv"), &buf)?;
            write_json(
                &out.join("eval.json"),
                &json!({ "mean_sgcs": mean, "deciles": c.deciles, "n": scores.len(), "flags": flags }),
            )?;
            println!("mean SGCS {mean:.5} over {} samples", scores.len());
        }
        Command::Exp {
            recipe,
            train_per_env,
            test_per_env,
            epochs,
            finetune_epochs,
        } => {
            let recipe: Recipe = recipe.parse()?;
            let mut spec = ExperimentSpec::desk(recipe, cfg, out);
            if let Some(n) = train_per_env {
                spec.train_per_env = *n;
            }
            if let Some(n) = test_per_env {
                spec.test_per_env = *n;
            }
            if let Some(e) = epochs {
                spec.schedule.phase1_epochs = *e;
            }
            if let Some(e) = finetune_epochs {
                spec.schedule.phase2_epochs = *e;
            }
            let report = run_experiment(&spec, exec)?;
            println!("{}", serde_json::to_string_pretty(&report.summary)?);
            for f in &report.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Inspect { data } => {
            println!("# config (hash {:016x})\n{}", cfg.hash64(), cfg.to_kv_string());
            let bench = make_benchmarks(&cfg)?;
            for (link, m) in [("DL", &bench.dl), ("UL", &bench.ul)] {
                let (rows, cols) = row_col_sums(m);
                println!("{link} benchmark row sums {rows:.4?}");
                println!("{link} benchmark col sums {cols:.4?}");
            }
            if let Some(path) = data {
                let ds = Dataset::read(path, Some(&cfg))?;
                let controls = exec.try_map(&ds.pairs, |p| link_controls(p, &bench))?;
                let agree = controls.iter().filter(|(d, u)| d == u).count();
                println!(
                    "{} pairs; UL-derived shift equals DL-derived shift on {agree} ({:.1}%)",
                    ds.len(),
                    100.0 * agree as f64 / ds.len().max(1) as f64
                );
                for (d, u) in controls.iter().take(10) {
                    println!("  b_DL = ({}, {})  b_UL = ({}, {})", d.m_star, d.n_star, u.m_star, u.n_star);
                }
            }
        }
    }
    Ok(())
}
