//! Experiment runners and run plumbing: manifest, checkpoints, CSV output.
//!
//! Every runner writes under the config's output directory:
//!   config.txt        exact copy of the input config
//!   manifest.json     run manifest with the config hash (written last)
//!   metrics/*.csv     deterministic metrics (byte-identical across reruns)
//!   timing/*.csv      wallclock measurements (excluded from determinism)
//!   checkpoints/*.json
//! The `DRMFLOW_OUT_ROOT` environment variable, when set, prefixes the
//! output directory.

use crate::align::{
    grpo_iteration, step_grpo_iteration, Algo, Continuation, GrpoConfig, PolicySnapshot,
};
use crate::config::{Experiment, ExperimentConfig};
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::flow::{sample_trajectory, train_fm, FmTrainConfig, VelocityModel};
use crate::infer::{diversity_proxy, stepwise_sample, SamplerConfig};
use crate::nn::VelocityConfig;
use crate::params::ParamSet;
use crate::reward::{
    build_reward_model, eval_accuracy, reward_score, synth_preferences, train_drm, ConvSpec,
    DrmTrainConfig, PreferenceDataset, RewardHead, RewardHeadConfig, RewardModel,
    save_preferences,
};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

// --- file plumbing ---------------------------------------------------------

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// In-memory CSV with a fixed header; numbers use Rust's default float
/// formatting (decimal point, no separators), so output is locale-stable.
pub struct Csv {
    text: String,
    cols: usize,
}

impl Csv {
    pub fn new(header: &[&str]) -> Csv {
        Csv {
            text: format!("{}\n", header.join(",")),
            cols: header.len(),
        }
    }

    pub fn row(&mut self, fields: &[String]) {
        assert_eq!(fields.len(), self.cols, "csv row width");
        let _ = writeln!(self.text, "{}", fields.join(","));
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.text)
    }
}

/// Shorthand for formatting a mixed row.
macro_rules! csv_row {
    ($csv:expr, $($v:expr),+ $(,)?) => {
        $csv.row(&[$(format!("{}", $v)),+])
    };
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: Vec<String>,
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Check that the stored config hashes to the value recorded in the manifest.
pub fn verify_manifest(run_dir: &Path) -> Result<RunManifest> {
    let manifest: RunManifest = serde_json::from_str(&std::fs::read_to_string(
        run_dir.join("manifest.json"),
    )?)?;
    let stored = std::fs::read_to_string(run_dir.join("config.txt"))?;
    let hash = crate::config::Config::parse(&stored)?.hash();
    if hash != manifest.config_hash {
        return Err(cfg_err(format!(
            "manifest hash {} does not match stored config hash {hash}",
            manifest.config_hash
        )));
    }
    Ok(manifest)
}

/// Output directory with the optional environment root override applied.
pub fn resolve_out_dir(ec: &ExperimentConfig) -> PathBuf {
    resolve_path(&ec.out_dir)
}

/// Relative paths (outputs and referenced checkpoints alike) are prefixed
/// with `DRMFLOW_OUT_ROOT` when it is set, so a chain of runs relocates as
/// one unit; absolute paths pass through.
pub fn resolve_path(path: &Path) -> PathBuf {
    match std::env::var_os("DRMFLOW_OUT_ROOT") {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

// --- checkpoints -----------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RewardMeta {
    vel_cfg: VelocityConfig,
    head: RewardHead,
    l_trunc: usize,
}

/// Reward checkpoints are a pair of files: `<stem>.json` with the parameters
/// and `<stem>.meta.json` with the architecture.
pub fn save_reward_model(model: &RewardModel, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    model.params.save(path)?;
    let meta = RewardMeta {
        vel_cfg: model.vel_cfg.clone(),
        head: model.head.clone(),
        l_trunc: model.l_trunc,
    };
    write_atomic(&meta_path(path), &serde_json::to_string_pretty(&meta)?)
}

fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

pub fn load_reward_model(path: &Path) -> Result<RewardModel> {
    let meta: RewardMeta = serde_json::from_str(
        &std::fs::read_to_string(meta_path(path))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", meta_path(path).display())))?,
    )
    .map_err(|e| Error::Checkpoint(format!("reward meta: {e}")))?;
    let params = ParamSet::load(path)?;
    // Rebuild the architecture and make sure the checkpoint fits it.
    let mut rng = RngStream::new(0, 0);
    let skeleton = build_reward_model(&meta.vel_cfg, meta.head.clone(), meta.l_trunc, None, &mut rng)?;
    skeleton.params.check_compatible(&params)?;
    Ok(RewardModel {
        vel_cfg: meta.vel_cfg,
        head: meta.head,
        l_trunc: meta.l_trunc,
        params,
    })
}

fn load_velocity(ec: &ExperimentConfig, key: &str) -> Result<VelocityModel> {
    let path = resolve_path(Path::new(ec.raw.require(key)?));
    let params = ParamSet::load(&path)?;
    let mut rng = RngStream::new(0, 0);
    let skeleton = VelocityModel::init(ec.model.clone(), &mut rng)?;
    skeleton.params.check_compatible(&params)?;
    Ok(VelocityModel {
        cfg: ec.model.clone(),
        params,
    })
}

fn load_reward(ec: &ExperimentConfig, key: &str) -> Result<RewardModel> {
    load_reward_model(&resolve_path(Path::new(ec.raw.require(key)?)))
}

// --- small config helpers --------------------------------------------------

fn list_f64(ec: &ExperimentConfig, key: &str, default: &[f64]) -> Result<Vec<f64>> {
    match ec.raw.get(key) {
        None => Ok(default.to_vec()),
        Some(v) => v
            .split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| cfg_err(format!("key `{key}`: `{p}` is not a number")))
            })
            .collect(),
    }
}

fn list_usize(ec: &ExperimentConfig, key: &str, default: &[usize]) -> Result<Vec<usize>> {
    match ec.raw.get(key) {
        None => Ok(default.to_vec()),
        Some(v) => v
            .split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| cfg_err(format!("key `{key}`: `{p}` is not an integer")))
            })
            .collect(),
    }
}

// --- oracle evaluation -----------------------------------------------------

/// Mean ground-truth reward of the policy's terminal samples, cycling
/// conditions; fully determined by the rng stream.
pub fn eval_policy_oracle(
    model: &VelocityModel,
    spec: &DatasetSpec,
    n: usize,
    t_steps: usize,
    a: f64,
    rng: &mut RngStream,
) -> Result<f64> {
    let mut acc = 0.0;
    for i in 0..n {
        let cond = i % spec.n_conditions();
        let mut sub = rng.substream(i as u64);
        let traj = sample_trajectory(model, &model.params, cond, t_steps, a, &mut sub)?;
        acc += spec.oracle_reward(traj.terminal().data(), cond);
    }
    Ok(acc / n as f64)
}

// --- runners ---------------------------------------------------------------

fn run_fm_train(ec: &ExperimentConfig, dir: &Path) -> Result<Vec<String>> {
    let train = FmTrainConfig {
        steps: ec.raw.usize_or("fm.steps", 400)?,
        batch: ec.raw.usize_or("fm.batch", 64)?,
        lr: ec.raw.f64_or("fm.lr", 1e-3)?,
        seed: ec.seed,
    };
    let (model, losses) = train_fm(&ec.dataset, ec.model.clone(), &train)?;
    let ckpt = dir.join("checkpoints/fm.json");
    std::fs::create_dir_all(ckpt.parent().unwrap())?;
    model.params.save(&ckpt)?;
    let mut csv = Csv::new(&["step", "loss"]);
    for (i, l) in losses.iter().enumerate() {
        csv_row!(csv, i, l);
    }
    csv.write(&dir.join("metrics/fm_train.csv"))?;
    Ok(vec![
        "checkpoints/fm.json".into(),
        "metrics/fm_train.csv".into(),
    ])
}

fn drm_head_from_config(ec: &ExperimentConfig) -> Result<RewardHead> {
    match ec.raw.str_or("drm.head", "mlp") {
        "mlp" => Ok(RewardHead::Mlp {
            d_p: ec.raw.usize_or("drm.d_p", 32)?,
        }),
        "conv" => {
            let conv_plan = ec.raw.require("drm.conv")?;
            let mut conv = Vec::new();
            for layer in conv_plan.split(';') {
                let parts: Vec<&str> = layer.split(',').map(str::trim).collect();
                if parts.len() != 4 {
                    return Err(cfg_err(
                        "drm.conv layers are `out_channels,kernel,stride,padding`",
                    ));
                }
                let nums: Vec<usize> = parts
                    .iter()
                    .map(|p| {
                        p.parse()
                            .map_err(|_| cfg_err(format!("drm.conv: `{p}` is not an integer")))
                    })
                    .collect::<Result<_>>()?;
                conv.push(ConvSpec {
                    out_channels: nums[0],
                    kernel: nums[1],
                    stride: nums[2],
                    padding: nums[3],
                });
            }
            Ok(RewardHead::Conv(RewardHeadConfig {
                d: ec.raw.get_usize("drm.d")?,
                l: ec.raw.get_usize("drm.l")?,
                d_p: ec.raw.get_usize("drm.d_p")?,
                h: ec.raw.get_usize("drm.h")?,
                w: ec.raw.get_usize("drm.w")?,
                conv,
            }))
        }
        other => Err(cfg_err(format!("unknown drm.head `{other}`"))),
    }
}

struct DrmRunSetup {
    head: RewardHead,
    l_trunc: usize,
    train_cfg: DrmTrainConfig,
    epochs: usize,
    train_set: PreferenceDataset,
    heldout: PreferenceDataset,
}

fn drm_setup(ec: &ExperimentConfig) -> Result<DrmRunSetup> {
    let pairs = ec.raw.usize_or("drm.pairs", 2000)?;
    let heldout_n = ec.raw.usize_or("drm.heldout", 1000)?;
    let flip_p = ec.raw.f64_or("drm.flip_p", 0.1)?;
    let mut data_rng = RngStream::new(ec.seed, 10);
    let mut all = synth_preferences(&ec.dataset, None, pairs + heldout_n, flip_p, &mut data_rng)?;
    let heldout = all.split_off(pairs);
    Ok(DrmRunSetup {
        head: drm_head_from_config(ec)?,
        l_trunc: ec.raw.usize_or("drm.l_trunc", 3)?,
        train_cfg: DrmTrainConfig {
            t_max: ec.raw.f64_or("drm.t_max", 0.75)?,
            epochs: 1,
            lr: ec.raw.f64_or("drm.lr", 1e-3)?,
            batch: ec.raw.usize_or("drm.batch", 16)?,
        },
        epochs: ec.raw.usize_or("drm.epochs", 2)?,
        train_set: all,
        heldout,
    })
}

fn run_drm_train(ec: &ExperimentConfig, dir: &Path) -> Result<Vec<String>> {
    let setup = drm_setup(ec)?;
    let pretrained = match ec.raw.str_or("drm.init", "pretrained") {
        "pretrained" => Some(load_velocity(ec, "drm.fm_checkpoint")?.params),
        "random" => None,
        other => return Err(cfg_err(format!("unknown drm.init `{other}`"))),
    };
    let mut init_rng = RngStream::new(ec.seed, 11);
    let mut model = build_reward_model(
        &ec.model,
        setup.head.clone(),
        setup.l_trunc,
        pretrained.as_ref(),
        &mut init_rng,
    )?;

    std::fs::create_dir_all(dir.join("data"))?;
    save_preferences(&dir.join("data/train.jsonl"), &setup.train_set)?;
    save_preferences(&dir.join("data/heldout.jsonl"), &setup.heldout)?;

    let mut train_rng = RngStream::new(ec.seed, 12);
    let mut csv = Csv::new(&["epoch", "mean_loss", "heldout_accuracy"]);
    for epoch in 0..setup.epochs {
        let losses = train_drm(&mut model, &setup.train_set, &setup.train_cfg, &mut train_rng)?;
        let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let mut eval_rng = RngStream::new(ec.seed, 13 + epoch as u64);
        let acc = eval_accuracy(&model, &setup.heldout, 0.0, &mut eval_rng)?;
        csv_row!(csv, epoch + 1, mean_loss, acc);
    }
    csv.write(&dir.join("metrics/drm_train.csv"))?;
    save_reward_model(&model, &dir.join("checkpoints/drm.json"))?;
    Ok(vec![
        "checkpoints/drm.json".into(),
        "checkpoints/drm.meta.json".into(),
        "metrics/drm_train.csv".into(),
        "data/train.jsonl".into(),
        "data/heldout.jsonl".into(),
    ])
}

fn align_config(ec: &ExperimentConfig) -> Result<GrpoConfig> {
    let algo = match ec.raw.str_or("align.algo", "grpo") {
        "grpo" => Algo::Grpo,
        "step-grpo" => Algo::StepGrpo,
        other => return Err(cfg_err(format!("unknown align.algo `{other}`"))),
    };
    let continuation = match ec.raw.str_or("align.continuation", "random") {
        "random" => Continuation::Random,
        "greedy" => Continuation::Greedy,
        other => return Err(cfg_err(format!("unknown align.continuation `{other}`"))),
    };
    let cfg = GrpoConfig {
        algo,
        group_size: ec.raw.usize_or("align.group_size", 8)?,
        k: ec.raw.usize_or("align.k", 8)?,
        eps_clip: ec.raw.f64_or("align.eps_clip", 1e-4)?,
        beta: ec.raw.f64_or("align.beta", 0.01)?,
        lr: ec.raw.f64_or("align.lr", 3e-4)?,
        noise_scale: ec.raw.f64_or("align.a", 0.7)?,
        t_steps: ec.raw.usize_or("align.t_steps", 8)?,
        continuation,
    };
    cfg.validate().map_err(|e| cfg_err(e.to_string()))?;
    Ok(cfg)
}

/// One full alignment run; appends per-iteration rows to the CSVs and
/// returns the aligned model plus the per-iteration oracle rewards.
fn align_loop(
    ec: &ExperimentConfig,
    mut model: VelocityModel,
    drm: &RewardModel,
    cfg: &GrpoConfig,
    iters: usize,
    eval_n: usize,
    seed: u64,
    metrics: &mut Csv,
    timing: Option<&mut Csv>,
    seed_col: Option<u64>,
) -> Result<(VelocityModel, Vec<f64>)> {
    let mut snapshot = PolicySnapshot::new(&model);
    let mut oracle_curve = Vec::with_capacity(iters);
    let mut timing = timing;
    for it in 0..iters {
        snapshot.refresh(&model);
        let started = Instant::now();
        let mut rng = RngStream::new(seed, 100 + it as u64);
        let m = match cfg.algo {
            Algo::Grpo => {
                let reward = |x: &Tensor, c: usize| reward_score(drm, x, 0.0, c).unwrap_or(f64::NAN);
                grpo_iteration(&mut model, &snapshot, &reward, cfg, &mut rng)?
            }
            Algo::StepGrpo => step_grpo_iteration(&mut model, &snapshot, drm, cfg, &mut rng)?,
        };
        let wall = started.elapsed().as_secs_f64();
        let mut eval_rng = RngStream::new(seed, 10_000 + it as u64);
        let oracle = eval_policy_oracle(
            &model,
            &ec.dataset,
            eval_n,
            cfg.t_steps,
            cfg.noise_scale,
            &mut eval_rng,
        )?;
        oracle_curve.push(oracle);
        match seed_col {
            Some(s) => csv_row!(
                metrics, s, it, m.reward, m.step_reward, m.kl, m.ratio, m.grad_norm, oracle
            ),
            None => csv_row!(
                metrics, it, m.reward, m.step_reward, m.kl, m.ratio, m.grad_norm, oracle
            ),
        }
        if let Some(t) = timing.as_deref_mut() {
            csv_row!(t, it, wall);
        }
    }
    Ok((model, oracle_curve))
}

const ALIGN_HEADER: [&str; 7] = [
    "iteration",
    "mean_terminal_reward",
    "mean_step_reward",
    "mean_kl",
    "mean_ratio",
    "grad_norm",
    "mean_oracle_reward",
];

fn align_header(with_seed: bool) -> Vec<&'static str> {
    if with_seed {
        let mut v = vec!["seed"];
        v.extend_from_slice(&ALIGN_HEADER);
        v
    } else {
        ALIGN_HEADER.to_vec()
    }
}

fn run_align(ec: &ExperimentConfig, dir: &Path) -> Result<Vec<String>> {
    let cfg = align_config(ec)?;
    let model = load_velocity(ec, "align.fm_checkpoint")?;
    let drm = load_reward(ec, "align.drm_checkpoint")?;
    let iters = ec.raw.usize_or("align.iters", 60)?;
    let eval_n = ec.raw.usize_or("align.eval_n", 32)?;
    let mut metrics = Csv::new(&align_header(false));
    let mut timing = Csv::new(&["iteration", "wallclock_s"]);
    let (model, _) = align_loop(
        ec,
        model,
        &drm,
        &cfg,
        iters,
        eval_n,
        ec.seed,
        &mut metrics,
        Some(&mut timing),
        None,
    )?;
    metrics.write(&dir.join("metrics/align.csv"))?;
    timing.write(&dir.join("timing/align.csv"))?;
    let ckpt = dir.join("checkpoints/aligned.json");
    std::fs::create_dir_all(ckpt.parent().unwrap())?;
    model.params.save(&ckpt)?;
    Ok(vec![
        "metrics/align.csv".into(),
        "timing/align.csv".into(),
        "checkpoints/aligned.json".into(),
    ])
}

fn run_sample_sweep(ec: &ExperimentConfig, dir: &Path) -> Result<Vec<String>> {
    let ks = list_usize(ec, "sweep.ks", &[1, 2, 4, 6])?;
    let n = ec.raw.usize_or("sweep.n", 48)?;
    let t_steps = ec.raw.usize_or("sweep.t_steps", 8)?;
    let a = ec.raw.f64_or("sweep.a", 0.7)?;
    let dump = ec.raw.bool_or("sweep.dump_traces", false)?;
    let model = load_velocity(ec, "sweep.fm_checkpoint")?;
    let drm = load_reward(ec, "sweep.drm_checkpoint")?;
    let n_cond = ec.dataset.n_conditions();

    let mut metrics = Csv::new(&["k", "n", "mean_oracle_reward", "diversity_proxy"]);
    let mut timing = Csv::new(&["k", "mean_wallclock_s"]);
    let mut trace_lines = String::new();
    // Warm-up chain so the first timed k does not absorb cold-start costs.
    {
        let cfg = SamplerConfig {
            k: 1,
            t_steps,
            noise_scale: a,
        };
        let mut rng = RngStream::new(ec.seed, u64::MAX);
        stepwise_sample(&model, &drm, 0, &cfg, &mut rng)?;
    }
    for &k in &ks {
        let cfg = SamplerConfig {
            k,
            t_steps,
            noise_scale: a,
        };
        let mut by_cond: Vec<Vec<Tensor>> = vec![Vec::new(); n_cond];
        let mut reward_acc = 0.0;
        let started = Instant::now();
        for i in 0..n {
            let cond = i % n_cond;
            let mut rng = RngStream::new(ec.seed, (k as u64) << 32 | i as u64);
            let (x, traces) = stepwise_sample(&model, &drm, cond, &cfg, &mut rng)?;
            reward_acc += ec.dataset.oracle_reward(x.data(), cond);
            if dump {
                for tr in &traces {
                    let _ = writeln!(
                        trace_lines,
                        "{}",
                        serde_json::json!({
                            "k": k, "sample": i, "t": tr.t,
                            "scores": tr.scores, "chosen": tr.chosen,
                        })
                    );
                }
            }
            by_cond[cond].push(x);
        }
        let wall = started.elapsed().as_secs_f64() / n as f64;
        // Diversity within each condition, averaged; mixing conditions would
        // just measure the distance between modes.
        let mut div_acc = 0.0;
        let mut div_n = 0usize;
        for group in &by_cond {
            if group.len() >= 2 {
                div_acc += diversity_proxy(group)?;
                div_n += 1;
            }
        }
        csv_row!(metrics, k, n, reward_acc / n as f64, div_acc / div_n.max(1) as f64);
        csv_row!(timing, k, wall);
    }
    metrics.write(&dir.join("metrics/sweep.csv"))?;
    timing.write(&dir.join("timing/sweep.csv"))?;
    let mut outputs = vec!["metrics/sweep.csv".to_string(), "timing/sweep.csv".to_string()];
    if dump {
        write_atomic(&dir.join("traces.jsonl"), &trace_lines)?;
        outputs.push("traces.jsonl".into());
    }
    Ok(outputs)
}

fn run_noise_eval(ec: &ExperimentConfig, dir: &Path) -> Result<Vec<String>> {
    let ts = list_f64(ec, "noise.ts", &[0.0, 0.5, 0.75])?;
    let pairs = ec.raw.usize_or("noise.pairs", 1000)?;
    let flip_p = ec.raw.f64_or("noise.flip_p", 0.0)?;
    let drm = load_reward(ec, "noise.drm_checkpoint")?;
    let mut data_rng = RngStream::new(ec.seed, 30);
    let heldout = synth_preferences(&ec.dataset, None, pairs, flip_p, &mut data_rng)?;
    let mut csv = Csv::new(&["t", "n_pairs", "accuracy"]);
    for &t in &ts {
        let mut eval_rng = RngStream::new(ec.seed, 31);
        let acc = eval_accuracy(&drm, &heldout, t, &mut eval_rng)?;
        csv_row!(csv, t, heldout.len(), acc);
    }
    csv.write(&dir.join("metrics/noise_eval.csv"))?;
    Ok(vec!["metrics/noise_eval.csv".into()])
}

fn run_init_ablation(ec: &ExperimentConfig, dir: &Path) -> Result<Vec<String>> {
    let epochs = ec.raw.usize_or("ablate.epochs", 3)?;
    let n_seeds = ec.raw.usize_or("ablate.seeds", 5)?;
    let pretrained = load_velocity(ec, "ablate.fm_checkpoint")?.params;

    let mut csv = Csv::new(&["seed", "init", "epoch", "mean_loss", "heldout_accuracy"]);
    for s in 0..n_seeds as u64 {
        let seed = ec.seed + s;
        let mut ec_s = ec.clone();
        ec_s.seed = seed;
        let setup = drm_setup(&ec_s)?;
        for (label, init) in [("pretrained", Some(&pretrained)), ("random", None)] {
            // Identical init stream and training stream for both arms: the rng
            // consumption of build_reward_model does not depend on the init
            // mode, so heads and shuffles match pairwise within a seed.
            let mut init_rng = RngStream::new(seed, 11);
            let mut model = build_reward_model(&ec.model, setup.head.clone(), setup.l_trunc, init, &mut init_rng)?;
            let mut train_rng = RngStream::new(seed, 12);
            for epoch in 0..epochs {
                let losses = train_drm(&mut model, &setup.train_set, &setup.train_cfg, &mut train_rng)?;
                let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
                let mut eval_rng = RngStream::new(seed, 13 + epoch as u64);
                let acc = eval_accuracy(&model, &setup.heldout, 0.0, &mut eval_rng)?;
                csv_row!(csv, seed, label, epoch + 1, mean_loss, acc);
            }
        }
    }
    csv.write(&dir.join("metrics/init_ablation.csv"))?;
    Ok(vec!["metrics/init_ablation.csv".into()])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceSeed {
    pub seed: u64,
    pub grpo_iters: usize,
    pub stepgrpo_iters: usize,
    pub speedup: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceSummary {
    pub reward_baseline: f64,
    pub reward_max: f64,
    pub threshold: f64,
    pub per_seed: Vec<ConvergenceSeed>,
    pub median_speedup: f64,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// First iteration (1-based) whose oracle reward reaches the threshold;
/// `max` when the run never reaches it.
fn iters_to_threshold(curve: &[f64], threshold: f64) -> usize {
    curve
        .iter()
        .position(|&r| r >= threshold)
        .map(|i| i + 1)
        .unwrap_or(curve.len())
}

fn run_convergence_compare(ec: &ExperimentConfig, dir: &Path) -> Result<Vec<String>> {
    let n_seeds = ec.raw.usize_or("conv.seeds", 5)?;
    let max_iters = ec.raw.usize_or("conv.max_iters", 60)?;
    let frac = ec.raw.f64_or("conv.threshold_frac", 0.8)?;
    let eval_n = ec.raw.usize_or("align.eval_n", 32)?;
    let base = align_config(ec)?;
    let model = load_velocity(ec, "align.fm_checkpoint")?;
    let drm = load_reward(ec, "align.drm_checkpoint")?;

    // Threshold per the matched-compute comparison: close `frac` of the gap
    // between the pretrained policy's oracle reward and the oracle optimum.
    let mut base_rng = RngStream::new(ec.seed, 40);
    let reward_baseline = eval_policy_oracle(
        &model,
        &ec.dataset,
        eval_n.max(64),
        base.t_steps,
        base.noise_scale,
        &mut base_rng,
    )?;
    let n_cond = ec.dataset.n_conditions();
    let reward_max = (0..n_cond).map(|c| ec.dataset.oracle_max(c)).sum::<f64>() / n_cond as f64;
    let threshold = reward_baseline + frac * (reward_max - reward_baseline);

    let mut grpo_csv = Csv::new(&align_header(true));
    let mut step_csv = Csv::new(&align_header(true));
    let mut per_seed = Vec::with_capacity(n_seeds);
    for s in 0..n_seeds {
        let seed = ec.seed + s as u64;
        let grpo_cfg = GrpoConfig {
            algo: Algo::Grpo,
            group_size: base.k,
            ..base.clone()
        };
        let (_, grpo_curve) = align_loop(
            ec,
            model.clone(),
            &drm,
            &grpo_cfg,
            max_iters,
            eval_n,
            seed,
            &mut grpo_csv,
            None,
            Some(seed),
        )?;
        let step_cfg = GrpoConfig {
            algo: Algo::StepGrpo,
            ..base.clone()
        };
        let (_, step_curve) = align_loop(
            ec,
            model.clone(),
            &drm,
            &step_cfg,
            max_iters,
            eval_n,
            seed,
            &mut step_csv,
            None,
            Some(seed),
        )?;
        let grpo_iters = iters_to_threshold(&grpo_curve, threshold);
        let stepgrpo_iters = iters_to_threshold(&step_curve, threshold);
        per_seed.push(ConvergenceSeed {
            seed,
            grpo_iters,
            stepgrpo_iters,
            speedup: grpo_iters as f64 / stepgrpo_iters as f64,
        });
    }
    let mut speedups: Vec<f64> = per_seed.iter().map(|s| s.speedup).collect();
    let summary = ConvergenceSummary {
        reward_baseline,
        reward_max,
        threshold,
        median_speedup: median(&mut speedups),
        per_seed,
    };
    grpo_csv.write(&dir.join("metrics/convergence_grpo.csv"))?;
    step_csv.write(&dir.join("metrics/convergence_stepgrpo.csv"))?;
    write_atomic(&dir.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    Ok(vec![
        "metrics/convergence_grpo.csv".into(),
        "metrics/convergence_stepgrpo.csv".into(),
        "summary.json".into(),
    ])
}

/// Run the configured experiment: outputs under the resolved directory, a
/// copy of the config, and the manifest written last.
pub fn run_experiment(ec: &ExperimentConfig) -> Result<RunManifest> {
    let dir = resolve_out_dir(ec);
    std::fs::create_dir_all(&dir)?;
    let started = unix_now();
    write_atomic(&dir.join("config.txt"), ec.raw.raw())?;
    let mut outputs = match ec.experiment {
        Experiment::FmTrain => run_fm_train(ec, &dir)?,
        Experiment::DrmTrain => run_drm_train(ec, &dir)?,
        Experiment::Align => run_align(ec, &dir)?,
        Experiment::SampleSweep => run_sample_sweep(ec, &dir)?,
        Experiment::NoiseEval => run_noise_eval(ec, &dir)?,
        Experiment::InitAblation => run_init_ablation(ec, &dir)?,
        Experiment::ConvergenceCompare => run_convergence_compare(ec, &dir)?,
    };
    outputs.push("config.txt".into());
    let manifest = RunManifest {
        experiment: ec.experiment.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: ec.raw.hash(),
        seed: ec.seed,
        started_unix: started,
        finished_unix: unix_now(),
        outputs,
    };
    write_atomic(&dir.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}
