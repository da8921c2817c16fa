//! Experiment recipes: BCE correlation CDFs, SGCS versus feedback bits, and
//! SGCS versus the number of training environments.
//!
//! Every run writes its CSV tables, a `summary.json` with decile arrays and
//! pass/fail flags, and a `manifest.json` recording seeds, the config hash and
//! stage timings.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::atomic_write;
use crate::channel::EnvironmentSpec;
use crate::codec::{evaluate, train_from, LayerSpec, ModelParams, Schedule, TrainSample};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::ifa::{dft2, make_benchmarks, BenchmarkPair};
use crate::metrics::{cdf, pearson_mag, CdfSummary};
use crate::pipeline::{link_matrices, prepare_samples, PipelineFlags};
use crate::types::SystemConfig;

/// First user index of held-out samples, far from the training users.
pub const HELD_OUT_USER_OFFSET: u64 = 1_000_000;

/// Minimum SGCS gain of the UL-assisted codec over the no-assist ablation.
pub const UL_ASSIST_MARGIN: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Recipe {
    Fig2,
    Fig4,
    Fig5,
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fig2" => Ok(Recipe::Fig2),
            "fig4" => Ok(Recipe::Fig4),
            "fig5" => Ok(Recipe::Fig5),
            other => Err(Error::InvalidConfig(format!("unknown recipe {other:?} (fig2, fig4, fig5)"))),
        }
    }
}

impl std::fmt::Display for Recipe {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Recipe::Fig2 => "fig2",
            Recipe::Fig4 => "fig4",
            Recipe::Fig5 => "fig5",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub recipe: Recipe,
    pub config: SystemConfig,
    pub train_envs: Vec<EnvironmentSpec>,
    pub test_envs: Vec<EnvironmentSpec>,
    pub train_per_env: usize,
    pub test_per_env: usize,
    pub schedule: Schedule,
    /// `(M, B)` pairs; total bits `M * B`.
    pub bit_sweep: Vec<(usize, u32)>,
    /// Prefix lengths of `train_envs` to train on (fig5).
    pub train_env_counts: Vec<usize>,
    pub flags: PipelineFlags,
    /// Requires test environments disjoint from training environments.
    pub generalization: bool,
    pub out_dir: PathBuf,
}

impl ExperimentSpec {
    /// Desk-scale defaults: 5 training and 5 unseen test environments,
    /// 400 and 200 users each.
    pub fn desk(recipe: Recipe, config: SystemConfig, out_dir: impl Into<PathBuf>) -> Self {
        let seed = config.seed;
        Self {
            name: recipe.to_string(),
            recipe,
            train_envs: (0..5).map(|i| EnvironmentSpec::family(i, seed)).collect(),
            test_envs: (5..10).map(|i| EnvironmentSpec::family(i, seed)).collect(),
            train_per_env: 400,
            test_per_env: 200,
            schedule: Schedule {
                phase1_epochs: 60,
                phase2_epochs: 12,
                seed,
                ..Schedule::default()
            },
            bit_sweep: vec![(1, config.b_bits), (4, config.b_bits), (26, config.b_bits)],
            train_env_counts: vec![1, 2, 3, 4, 5],
            flags: PipelineFlags::default(),
            generalization: true,
            out_dir: out_dir.into(),
            config,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        for env in self.train_envs.iter().chain(&self.test_envs) {
            env.validate(&self.config)?;
        }
        if self.test_envs.is_empty() || self.test_per_env == 0 {
            return Err(Error::InvalidConfig("experiment needs test samples".into()));
        }
        if self.recipe != Recipe::Fig2 && (self.train_envs.is_empty() || self.train_per_env == 0) {
            return Err(Error::InvalidConfig("experiment needs training samples".into()));
        }
        if self.generalization
            && self
                .test_envs
                .iter()
                .any(|t| self.train_envs.iter().any(|e| e.env_id == t.env_id || e == t))
        {
            return Err(Error::InvalidConfig("test environments overlap training environments".into()));
        }
        if self.train_env_counts.iter().any(|&n| n == 0 || n > self.train_envs.len()) {
            return Err(Error::InvalidConfig("train_env_counts out of range".into()));
        }
        if self.bit_sweep.iter().any(|&(m, b)| m == 0 || b == 0 || b > 16) {
            return Err(Error::InvalidConfig("invalid (M, B) in bit sweep".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub summary: Value,
    pub files: Vec<PathBuf>,
}

impl ExperimentReport {
    /// All pass/fail flags of the summary are true.
    pub fn passed(&self) -> bool {
        self.summary["pass"].as_object().is_some_and(|m| m.values().all(|v| v.as_bool() == Some(true)))
    }
}

struct Outputs {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Outputs {
    fn write(&mut self, name: &str, contents: &[u8]) -> Result<()> {
        let p = self.dir.join(name);
        atomic_write(&p, contents)?;
        self.files.push(p);
        Ok(())
    }
}

struct Timer(Vec<(String, f64)>);

impl Timer {
    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f()?;
        self.0.push((stage.to_string(), t.elapsed().as_secs_f64()));
        Ok(out)
    }
}

pub fn run_experiment(spec: &ExperimentSpec, exec: Exec) -> Result<ExperimentReport> {
    spec.validate()?;
    let mut out = Outputs {
        dir: spec.out_dir.clone(),
        files: Vec::new(),
    };
    let mut timer = Timer(Vec::new());
    let bench = timer.time("benchmarks", || make_benchmarks(&spec.config))?;
    let summary = match spec.recipe {
        Recipe::Fig2 => fig2(spec, exec, &mut out, &mut timer)?,
        Recipe::Fig4 => fig4(spec, &bench, exec, &mut out, &mut timer)?,
        Recipe::Fig5 => fig5(spec, &bench, exec, &mut out, &mut timer)?,
    };
    out.write("summary.json", serde_json::to_string_pretty(&summary)?.as_bytes())?;
    let manifest = json!({
        "name": spec.name,
        "recipe": spec.recipe,
        "config_hash": format!("{:016x}", spec.config.hash64()),
        "config": spec.config,
        "seeds": {
            "config": spec.config.seed,
            "schedule": spec.schedule.seed,
            "train_envs": spec.train_envs.iter().map(|e| e.seed).collect::<Vec<_>>(),
            "test_envs": spec.test_envs.iter().map(|e| e.seed).collect::<Vec<_>>(),
        },
        "spec": spec,
        "timings_s": timer.0.iter().map(|(k, v)| json!({"stage": k, "seconds": v})).collect::<Vec<_>>(),
        "files": out.files.iter().map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned())).collect::<Vec<_>>(),
        "crate_version": env!("CARGO_PKG_VERSION"),
    });
    out.write("manifest.json", serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(ExperimentReport {
        summary,
        files: out.files,
    })
}

/// Pearson correlation of UL/DL angular-delay magnitudes per pair.
pub fn bce_correlations(pairs: &[crate::ChannelPair], bce_on: bool, exec: Exec) -> Result<Vec<f64>> {
    exec.try_map(pairs, |p| {
        let (dl, ul) = link_matrices(p, bce_on)?;
        pearson_mag(&dft2(&dl), &dft2(&ul))
    })
}

fn cdf_json(c: &CdfSummary) -> Value {
    json!({ "deciles": c.deciles, "median": c.median(), "n": c.values.len() })
}

fn fig2(spec: &ExperimentSpec, exec: Exec, out: &mut Outputs, timer: &mut Timer) -> Result<Value> {
    let data = timer.time("generate", || {
        Dataset::generate_users(&spec.config, &spec.test_envs, HELD_OUT_USER_OFFSET, spec.test_per_env, exec)
    })?;
    let (with, without) = timer.time("correlate", || {
        Ok((
            bce_correlations(&data.pairs, true, exec)?,
            bce_correlations(&data.pairs, false, exec)?,
        ))
    })?;
    let mut table = String::from("method,pearson_value\n");
    for (method, vals) in [("bce", &with), ("no_bce", &without)] {
        for v in vals {
            writeln!(table, "{method},{v}").expect("string write");
        }
    }
    out.write("fig2.csv", table.as_bytes())?;
    let (cw, co) = (cdf(&with)?, cdf(&without)?);
    for (name, c) in [("fig2_cdf_bce.csv", &cw), ("fig2_cdf_no_bce.csv", &co)] {
        let mut buf = Vec::new();
        c.write_csv(&mut buf)?;
        out.write(name, &buf)?;
    }
    Ok(json!({
        "recipe": "fig2",
        "bce": cdf_json(&cw),
        "no_bce": cdf_json(&co),
        "median_gain": cw.median() - co.median(),
        "pass": {
            "bce_dominates_all_deciles": cw.dominates(&co),
            "median_improves": cw.median() > co.median(),
        },
    }))
}

fn samples_for(
    spec: &ExperimentSpec,
    envs: &[EnvironmentSpec],
    first_user: u64,
    per_env: usize,
    bench: &BenchmarkPair,
    flags: PipelineFlags,
    exec: Exec,
) -> Result<Vec<TrainSample>> {
    let data = Dataset::generate_users(&spec.config, envs, first_user, per_env, exec)?;
    prepare_samples(&data.pairs, bench, flags, exec)
}

/// Phase 1 from a fresh initialization.
pub fn pretrain(samples: &[TrainSample], layer: &LayerSpec, schedule: &Schedule) -> Result<ModelParams> {
    let mut params = ModelParams::init(layer, schedule.seed)?;
    train_from(
        &mut params,
        samples,
        None,
        schedule.phase1_epochs,
        schedule.lr_phase1,
        schedule,
        1,
        Exec::Sequential,
    )?;
    Ok(params)
}

/// Phase 2 on a copy of `base` through a `bits`-bit quantizer.
pub fn finetune(base: &ModelParams, samples: &[TrainSample], bits: u32, schedule: &Schedule) -> Result<ModelParams> {
    let mut params = base.clone();
    train_from(
        &mut params,
        samples,
        Some(bits),
        schedule.phase2_epochs,
        schedule.lr_phase2,
        schedule,
        2,
        Exec::Sequential,
    )?;
    Ok(params)
}

fn nondecreasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[1] >= w[0])
}

fn fig4(
    spec: &ExperimentSpec,
    bench: &BenchmarkPair,
    exec: Exec,
    out: &mut Outputs,
    timer: &mut Timer,
) -> Result<Value> {
    let methods = [("ul_assist", true), ("no_assist", false)];
    let mut ms: Vec<usize> = spec.bit_sweep.iter().map(|&(m, _)| m).collect();
    ms.sort_unstable();
    ms.dedup();
    let mut cells = Vec::new();
    for &(method, ul) in &methods {
        for &m in &ms {
            cells.push((method, ul, m));
        }
    }
    let data = timer.time("prepare", || {
        methods
            .iter()
            .map(|&(_, ul)| {
                let flags = PipelineFlags {
                    ul_assist_on: ul,
                    ..spec.flags
                };
                Ok((
                    samples_for(spec, &spec.train_envs, 0, spec.train_per_env, bench, flags, exec)?,
                    samples_for(spec, &spec.test_envs, HELD_OUT_USER_OFFSET, spec.test_per_env, bench, flags, exec)?,
                ))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    // one phase-1 model per (method, M); each B re-finetunes a copy of it
    let rows = timer.time("train_eval", || {
        exec.try_map(&cells, |&(method, ul, m)| {
            let (train, test) = &data[if ul { 0 } else { 1 }];
            let layer = LayerSpec {
                m,
                ..LayerSpec::for_config(&spec.config, ul)
            };
            let base = pretrain(train, &layer, &spec.schedule)?;
            spec.bit_sweep
                .iter()
                .filter(|&&(mm, _)| mm == m)
                .map(|&(_, b)| {
                    let tuned = finetune(&base, train, b, &spec.schedule)?;
                    Ok((method, m * b as usize, evaluate(test, &tuned, Some(b), Exec::Sequential)?))
                })
                .collect::<Result<Vec<_>>>()
        })
    })?;
    let mut rows: Vec<(&str, usize, f64)> = rows.into_iter().flatten().collect();
    rows.sort_by(|a, b| a.0.cmp(b.0).reverse().then(a.1.cmp(&b.1)));
    let mut table = String::from("method,bits,mean_sgcs\n");
    for (method, bits, s) in &rows {
        writeln!(table, "{method},{bits},{s}").expect("string write");
    }
    out.write("fig4.csv", table.as_bytes())?;
    let curve = |name: &str| -> Vec<(usize, f64)> {
        rows.iter().filter(|r| r.0 == name).map(|r| (r.1, r.2)).collect()
    };
    let (ua, na) = (curve("ul_assist"), curve("no_assist"));
    let sgcs = |c: &[(usize, f64)]| c.iter().map(|x| x.1).collect::<Vec<_>>();
    let gain_low = ua.first().zip(na.first()).map(|(a, b)| a.1 - b.1);
    Ok(json!({
        "recipe": "fig4",
        "ul_assist": ua,
        "no_assist": na,
        "gain_at_lowest_bits": gain_low,
        "pass": {
            "ul_assist_monotone": nondecreasing(&sgcs(&ua)),
            "no_assist_monotone": nondecreasing(&sgcs(&na)),
            "ul_assist_gain_at_lowest_bits": gain_low.is_some_and(|g| g >= UL_ASSIST_MARGIN),
        },
    }))
}

fn fig5(
    spec: &ExperimentSpec,
    bench: &BenchmarkPair,
    exec: Exec,
    out: &mut Outputs,
    timer: &mut Timer,
) -> Result<Value> {
    let (m, b) = spec
        .bit_sweep
        .first()
        .copied()
        .unwrap_or((spec.config.m_bottleneck, spec.config.b_bits));
    let methods = [("ifa_on", true), ("ifa_off", false)];
    let mut cells = Vec::new();
    for &(method, ifa) in &methods {
        for &n in &spec.train_env_counts {
            cells.push((method, ifa, n));
        }
    }
    let rows = timer.time("train_eval", || {
        exec.try_map(&cells, |&(method, ifa, n)| {
            let flags = PipelineFlags {
                ifa_on: ifa,
                ..spec.flags
            };
            let seen_envs = &spec.train_envs[..n];
            let inner = Exec::Sequential;
            let train = samples_for(spec, seen_envs, 0, spec.train_per_env, bench, flags, inner)?;
            let seen = samples_for(spec, seen_envs, HELD_OUT_USER_OFFSET, spec.test_per_env, bench, flags, inner)?;
            let unseen = samples_for(spec, &spec.test_envs, HELD_OUT_USER_OFFSET, spec.test_per_env, bench, flags, inner)?;
            let layer = LayerSpec {
                m,
                ..LayerSpec::for_config(&spec.config, flags.ul_assist_on)
            };
            let params = finetune(&pretrain(&train, &layer, &spec.schedule)?, &train, b, &spec.schedule)?;
            let s = evaluate(&seen, &params, Some(b), inner)?;
            let u = evaluate(&unseen, &params, Some(b), inner)?;
            Ok::<_, Error>((method, n, s, u))
        })
    })?;
    let mut table = String::from("method,n_train_envs,mean_sgcs\n");
    for (method, n, _, u) in &rows {
        writeln!(table, "{method},{n},{u}").expect("string write");
    }
    out.write("fig5.csv", table.as_bytes())?;
    let detail: Vec<Value> = rows
        .iter()
        .map(|(method, n, s, u)| json!({"method": method, "n_train_envs": n, "seen": s, "unseen": u, "drop": s - u}))
        .collect();
    let drop = |method: &str, n: usize| rows.iter().find(|r| r.0 == method && r.1 == n).map(|r| r.2 - r.3);
    let smaller_drop = spec
        .train_env_counts
        .iter()
        .all(|&n| matches!((drop("ifa_on", n), drop("ifa_off", n)), (Some(a), Some(b)) if a < b));
    Ok(json!({
        "recipe": "fig5",
        "bits": m * b as usize,
        "results": detail,
        "pass": { "ifa_smaller_drop_every_count": smaller_drop },
    }))
}

/// Reads a summary file back.
pub fn read_summary(dir: &Path) -> Result<Value> {
    Ok(serde_json::from_slice(&std::fs::read(dir.join("summary.json"))?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::desk_config;

    fn tiny(recipe: Recipe, dir: &Path) -> ExperimentSpec {
        let mut s = ExperimentSpec::desk(recipe, desk_config(), dir);
        s.train_envs.truncate(2);
        s.test_envs.truncate(1);
        s.train_per_env = 6;
        s.test_per_env = 4;
        s.schedule.phase1_epochs = 1;
        s.schedule.phase2_epochs = 1;
        s.bit_sweep = vec![(1, 2), (1, 3), (2, 2)];
        s.train_env_counts = vec![1, 2];
        s
    }

    #[test]
    fn recipe_names_roundtrip() {
        for r in [Recipe::Fig2, Recipe::Fig4, Recipe::Fig5] {
            assert_eq!(r.to_string().parse::<Recipe>().unwrap(), r);
        }
        assert!("fig3".parse::<Recipe>().is_err());
    }

    #[test]
    fn overlapping_environments_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = tiny(Recipe::Fig5, dir.path());
        s.test_envs = vec![s.train_envs[0].clone()];
        assert!(s.validate().is_err());
        s.generalization = false;
        assert!(s.validate().is_ok());
    }

    #[test]
    fn fig2_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let rep = run_experiment(&tiny(Recipe::Fig2, dir.path()), Exec::Sequential).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("fig2.csv")).unwrap();
        assert!(csv.starts_with("method,pearson_value\n"));
        assert_eq!(csv.lines().count(), 1 + 2 * 4);
        let cdf_csv = std::fs::read_to_string(dir.path().join("fig2_cdf_bce.csv")).unwrap();
        assert!(cdf_csv.starts_with("value,cumulative_probability\n"));
        assert_eq!(rep.summary["bce"]["deciles"].as_array().unwrap().len(), 9);
        assert_eq!(read_summary(dir.path()).unwrap(), rep.summary);
        assert!(dir.path().join("manifest.json").exists());
    }

    #[test]
    fn fig4_and_fig5_tables_are_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny(Recipe::Fig4, dir.path());
        run_experiment(&spec, Exec::Sequential).unwrap();
        let first = std::fs::read_to_string(dir.path().join("fig4.csv")).unwrap();
        let lines: Vec<&str> = first.lines().collect();
        assert_eq!(lines[0], "method,bits,mean_sgcs");
        assert_eq!(lines.len(), 1 + 2 * 3);
        assert!(lines[1].starts_with("ul_assist,2,"));
        run_experiment(&spec, Exec::Parallel).unwrap();
        assert_eq!(std::fs::read_to_string(dir.path().join("fig4.csv")).unwrap(), first);

        let spec = tiny(Recipe::Fig5, dir.path());
        let rep = run_experiment(&spec, Exec::Sequential).unwrap();
        let t = std::fs::read_to_string(dir.path().join("fig5.csv")).unwrap();
        assert!(t.starts_with("method,n_train_envs,mean_sgcs\nifa_on,1,"));
        assert_eq!(rep.summary["results"].as_array().unwrap().len(), 4);
    }
}
