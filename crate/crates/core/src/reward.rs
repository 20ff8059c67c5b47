//! Reward model on a truncated generator trunk.
//!
//! The trunk reuses the first blocks of a pretrained velocity model, so the
//! scorer can rate noisy states at any timestep. Two heads: the grid head
//! projects trunk tokens, reshapes them into spatial maps, and runs a small
//! conv stack; the vector2d head is a plain MLP because the 2-D toy has no
//! spatial tokens to reshape.

use crate::data::{Condition, DatasetSpec};
use crate::error::{invalid, Error, Result};
use crate::flow::{interpolate, sample_trajectory, VelocityModel};
use crate::nn::{trunk_features, ParamVars, VelocityConfig};
use crate::params::ParamSet;
use crate::rng::RngStream;
use crate::tape::{log_sigmoid_scalar, Tape, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardHeadConfig {
    /// Trunk feature width (d); tokens are a view of the trunk feature.
    pub d: usize,
    /// Token count L, with L * d equal to the trunk width.
    pub l: usize,
    /// Projection width, divisible by 4.
    pub d_p: usize,
    /// Spatial extents with h * w = 4 * L.
    pub h: usize,
    pub w: usize,
    pub conv: Vec<ConvSpec>,
}

impl RewardHeadConfig {
    pub fn validate(&self, trunk_width: usize) -> Result<()> {
        if self.d_p % 4 != 0 {
            return Err(invalid(format!("d_p={} not divisible by 4", self.d_p)));
        }
        if self.l * self.d != trunk_width {
            return Err(invalid(format!(
                "token view L*d = {}*{} != trunk width {trunk_width}",
                self.l, self.d
            )));
        }
        if self.h * self.w != 4 * self.l {
            return Err(invalid(format!(
                "h*w = {}*{} != 4L = {}",
                self.h,
                self.w,
                4 * self.l
            )));
        }
        if self.conv.is_empty() {
            return Err(invalid("conv plan must have at least one layer"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RewardHead {
    /// projection -> relu -> affine; for datasets without spatial structure.
    Mlp { d_p: usize },
    /// projection -> reshape to maps -> conv stack -> mean pool -> affine.
    Conv(RewardHeadConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    Pretrained,
    Random,
}

#[derive(Debug, Clone)]
pub struct RewardModel {
    pub vel_cfg: VelocityConfig,
    pub head: RewardHead,
    pub l_trunc: usize,
    pub params: ParamSet,
}

impl RewardModel {
    pub fn trunk_depth(&self) -> usize {
        self.vel_cfg.blocks - self.l_trunc
    }
}

fn he_init(rng: &mut RngStream, shape: &[usize], fan_in: usize) -> Tensor {
    let scale = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.normal()).collect()).expect("valid shape")
}

/// Assemble a reward model from a velocity architecture. Pretrained mode
/// copies the embedding, condition table, and the first `blocks - l_trunc`
/// trunk blocks from the checkpoint; the head is always freshly initialized
/// and everything stays trainable.
pub fn build_reward_model(
    vel_cfg: &VelocityConfig,
    head: RewardHead,
    l_trunc: usize,
    pretrained: Option<&ParamSet>,
    rng: &mut RngStream,
) -> Result<RewardModel> {
    vel_cfg.validate()?;
    if l_trunc >= vel_cfg.blocks {
        return Err(invalid(format!(
            "l_trunc={l_trunc} must be below trunk depth {}",
            vel_cfg.blocks
        )));
    }
    let depth = vel_cfg.blocks - l_trunc;
    let mut ps = ParamSet::new();
    ps.insert("embed.w", he_init(rng, &[vel_cfg.hidden, vel_cfg.input_dim()], vel_cfg.input_dim()))?;
    ps.insert("embed.b", Tensor::zeros(&[vel_cfg.hidden]))?;
    ps.insert(
        "cond.table",
        Tensor::new(
            vec![vel_cfg.n_conditions, vel_cfg.cond_dim],
            (0..vel_cfg.n_conditions * vel_cfg.cond_dim)
                .map(|_| 0.5 * rng.normal())
                .collect(),
        )?,
    )?;
    for b in 0..depth {
        ps.insert(&format!("block{b}.w1"), he_init(rng, &[vel_cfg.hidden, vel_cfg.hidden], vel_cfg.hidden))?;
        ps.insert(&format!("block{b}.b1"), Tensor::zeros(&[vel_cfg.hidden]))?;
        ps.insert(&format!("block{b}.w2"), Tensor::zeros(&[vel_cfg.hidden, vel_cfg.hidden]))?;
        ps.insert(&format!("block{b}.b2"), Tensor::zeros(&[vel_cfg.hidden]))?;
    }
    if let Some(src) = pretrained {
        for name in ps.names().cloned().collect::<Vec<_>>() {
            let want = ps.get(&name)?.shape().to_vec();
            let got = src
                .get(&name)
                .map_err(|_| Error::Checkpoint(format!("pretrained checkpoint missing {name}")))?;
            if got.shape() != want {
                return Err(Error::Checkpoint(format!(
                    "pretrained {name}: checkpoint shape {:?} vs architecture {:?}",
                    got.shape(),
                    want
                )));
            }
            ps.set(&name, got.clone())?;
        }
    }
    match &head {
        RewardHead::Mlp { d_p } => {
            ps.insert("proj.w", he_init(rng, &[*d_p, vel_cfg.hidden], vel_cfg.hidden))?;
            ps.insert("proj.b", Tensor::zeros(&[*d_p]))?;
            ps.insert("out.w", he_init(rng, &[1, *d_p], *d_p))?;
            ps.insert("out.b", Tensor::zeros(&[1]))?;
        }
        RewardHead::Conv(cfg) => {
            cfg.validate(vel_cfg.hidden)?;
            ps.insert("proj.w", he_init(rng, &[cfg.d_p, cfg.d], cfg.d))?;
            ps.insert("proj.b", Tensor::zeros(&[cfg.d_p]))?;
            let mut in_ch = cfg.d_p / 4;
            for (i, c) in cfg.conv.iter().enumerate() {
                ps.insert(
                    &format!("conv{i}.k"),
                    he_init(
                        rng,
                        &[c.out_channels, in_ch, c.kernel, c.kernel],
                        in_ch * c.kernel * c.kernel,
                    ),
                )?;
                in_ch = c.out_channels;
            }
            ps.insert("out.w", he_init(rng, &[1, in_ch], in_ch))?;
            ps.insert("out.b", Tensor::zeros(&[1]))?;
        }
    }
    Ok(RewardModel {
        vel_cfg: vel_cfg.clone(),
        head,
        l_trunc,
        params: ps,
    })
}

/// Differentiable score s = head(trunk(x_t, t, c)): a [1,1] tape value.
pub fn reward_forward_var<'t>(
    model: &RewardModel,
    pv: &ParamVars<'t>,
    tape: &'t Tape,
    x: &Tensor,
    t: f64,
    cond: Condition,
) -> Result<Var<'t>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!("reward_forward: t={t} outside [0, 1]")));
    }
    let d = model.vel_cfg.state_dim;
    let row = tape.constant(x.reshaped(&[1, d])?);
    let h = trunk_features(&model.vel_cfg, pv, tape, &row, &[t], &[cond], model.trunk_depth())?;
    match &model.head {
        RewardHead::Mlp { .. } => h
            .linear(pv.get("proj.w")?, pv.get("proj.b")?)?
            .relu()
            .linear(pv.get("out.w")?, pv.get("out.b")?),
        RewardHead::Conv(cfg) => {
            let tokens = h.reshape(&[cfg.l, cfg.d])?;
            let fp = tokens.linear(pv.get("proj.w")?, pv.get("proj.b")?)?;
            // L * d_p elements viewed as (d_p/4) channel maps of h x w.
            let mut cur = fp.reshape(&[cfg.d_p / 4, cfg.h, cfg.w])?;
            for (i, c) in cfg.conv.iter().enumerate() {
                cur = cur
                    .conv2d(pv.get(&format!("conv{i}.k"))?, c.stride, c.padding)?
                    .relu();
            }
            let pooled = cur.mean_pool2d()?;
            let n = pooled.value().numel();
            pooled
                .reshape(&[1, n])?
                .linear(pv.get("out.w")?, pv.get("out.b")?)
        }
    }
}

/// Score without gradient tracking.
pub fn reward_score(model: &RewardModel, x: &Tensor, t: f64, cond: Condition) -> Result<f64> {
    let tape = Tape::new();
    let pv = model.params.vars(&tape);
    Ok(reward_forward_var(model, &pv, &tape, x, t, cond)?.item())
}

/// Bradley-Terry pairwise loss, -ln sigma(s_win - s_lose), in softplus form.
pub fn bt_loss(s_win: f64, s_lose: f64) -> f64 {
    -log_sigmoid_scalar(s_win - s_lose)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTriplet {
    pub win: Vec<f64>,
    pub lose: Vec<f64>,
    pub cond: Condition,
}

pub type PreferenceDataset = Vec<PreferenceTriplet>;

pub fn save_preferences(path: &Path, data: &PreferenceDataset) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in data {
        serde_json::to_writer(&mut f, t)?;
        writeln!(f)?;
    }
    Ok(())
}

pub fn load_preferences(path: &Path) -> Result<PreferenceDataset> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Labeled preference pairs from the oracle. Candidates come from the FM
/// model when one is supplied, otherwise from oracle samples with injected
/// quality perturbations; labels are flipped with probability `flip_p`.
pub fn synth_preferences(
    spec: &DatasetSpec,
    fm: Option<&VelocityModel>,
    n: usize,
    flip_p: f64,
    rng: &mut RngStream,
) -> Result<PreferenceDataset> {
    if !(0.0..0.5).contains(&flip_p) {
        return Err(invalid(format!("flip_p={flip_p} outside [0, 0.5)")));
    }
    spec.validate()?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let cond = rng.index(spec.n_conditions());
        let (a, b) = match fm {
            Some(model) => {
                let mut ra = rng.substream(2 * i as u64);
                let mut rb = rng.substream(2 * i as u64 + 1);
                let ta = sample_trajectory(model, &model.params, cond, 16, 0.5, &mut ra)?;
                let tb = sample_trajectory(model, &model.params, cond, 16, 0.5, &mut rb)?;
                (ta.terminal().data().to_vec(), tb.terminal().data().to_vec())
            }
            None => {
                let a = spec.sample_for(cond, rng);
                let delta = rng.uniform_in(0.2, 1.0);
                let b: Vec<f64> = a.iter().map(|v| v + delta * rng.normal()).collect();
                (a, b)
            }
        };
        let (mut win, mut lose) = if spec.oracle_reward(&a, cond) >= spec.oracle_reward(&b, cond) {
            (a, b)
        } else {
            (b, a)
        };
        if rng.uniform() < flip_p {
            std::mem::swap(&mut win, &mut lose);
        }
        out.push(PreferenceTriplet { win, lose, cond });
    }
    Ok(out)
}

/// Corrupt a clean state along the interpolation path with a fresh noise draw.
pub fn corrupt(x: &[f64], t: f64, rng: &mut RngStream) -> Result<Tensor> {
    let clean = Tensor::from_vec(x.to_vec());
    let noise = rng.normal_tensor(clean.shape());
    interpolate(&clean, &noise, t)
}

#[derive(Debug, Clone)]
pub struct DrmTrainConfig {
    pub t_max: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

/// Minimize the mean Bradley-Terry loss over noise-corrupted pairs.
/// Winner and loser are corrupted at the same timestep with independent
/// draws. Returns the per-minibatch loss curve.
pub fn train_drm(
    model: &mut RewardModel,
    dataset: &PreferenceDataset,
    cfg: &DrmTrainConfig,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(invalid("train_drm: empty dataset"));
    }
    if !(0.0..=1.0).contains(&cfg.t_max) {
        return Err(invalid(format!("train_drm: t_max={} outside [0, 1]", cfg.t_max)));
    }
    let mut losses = Vec::new();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch) {
            let tape = Tape::new();
            let pv = model.params.vars(&tape);
            let mut acc: Option<Var<'_>> = None;
            for &i in chunk {
                let triplet = &dataset[i];
                let t = rng.uniform_in(0.0, cfg.t_max);
                let xw = corrupt(&triplet.win, t, rng)?;
                let xl = corrupt(&triplet.lose, t, rng)?;
                let sw = reward_forward_var(model, &pv, &tape, &xw, t, triplet.cond)?;
                let sl = reward_forward_var(model, &pv, &tape, &xl, t, triplet.cond)?;
                let loss_i = sw.sub(&sl)?.log_sigmoid().scale(-1.0);
                acc = Some(match acc {
                    Some(a) => a.add(&loss_i)?,
                    None => loss_i,
                });
            }
            let loss = acc.expect("non-empty chunk").scale(1.0 / chunk.len() as f64).sum();
            let lv = loss.item();
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("drm loss diverged in epoch {epoch}")));
            }
            losses.push(lv);
            let grads = tape.backward(&loss, &model.params)?;
            model.params.adam_step(&grads, cfg.lr, 0.9, 0.999, 1e-8)?;
        }
    }
    Ok(losses)
}

/// Score both sides of a triplet at the same corruption level with
/// independent noise draws.
pub fn score_pair(
    model: &RewardModel,
    triplet: &PreferenceTriplet,
    t: f64,
    rng: &mut RngStream,
) -> Result<(f64, f64)> {
    let xw = corrupt(&triplet.win, t, rng)?;
    let xl = corrupt(&triplet.lose, t, rng)?;
    Ok((
        reward_score(model, &xw, t, triplet.cond)?,
        reward_score(model, &xl, t, triplet.cond)?,
    ))
}

/// Fraction of held-out pairs ranked correctly at corruption level t; exact
/// ties count one half.
pub fn eval_accuracy(
    model: &RewardModel,
    heldout: &PreferenceDataset,
    t: f64,
    rng: &mut RngStream,
) -> Result<f64> {
    if heldout.is_empty() {
        return Err(invalid("eval_accuracy: empty dataset"));
    }
    let mut correct = 0.0;
    for (i, triplet) in heldout.iter().enumerate() {
        let mut r = rng.substream(i as u64);
        let (sw, sl) = score_pair(model, triplet, t, &mut r)?;
        if sw > sl {
            correct += 1.0;
        } else if sw == sl {
            correct += 0.5;
        }
    }
    Ok(correct / heldout.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::VelocityModel;

    fn v2_spec() -> DatasetSpec {
        DatasetSpec::Vector2d {
            means: vec![[2.0, 2.0], [-2.0, -2.0]],
            stddev: 0.4,
        }
    }

    fn tiny_vel_cfg() -> VelocityConfig {
        VelocityConfig {
            state_dim: 2,
            hidden: 16,
            blocks: 4,
            time_freqs: 2,
            n_conditions: 2,
            cond_dim: 4,
        }
    }

    #[test]
    fn bt_loss_values() {
        assert!((bt_loss(1.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bt_loss(2.0, 0.0) - 0.1269280).abs() < 1e-6);
        assert!(bt_loss(3.0, 0.0) < bt_loss(2.0, 0.0));
        assert!(bt_loss(2.0, 0.0) < bt_loss(1.0, 0.0));
    }

    #[test]
    fn bt_loss_shift_invariance() {
        let a = bt_loss(1.3, -0.2);
        let b = bt_loss(1.3 + 7.0, -0.2 + 7.0);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn truncation_controls_trunk_depth() {
        let cfg = VelocityConfig {
            blocks: 6,
            ..tiny_vel_cfg()
        };
        let mut rng = RngStream::new(0, 0);
        let rm = build_reward_model(&cfg, RewardHead::Mlp { d_p: 8 }, 3, None, &mut rng).unwrap();
        assert_eq!(rm.trunk_depth(), 3);
        assert!(rm.params.contains("block2.w1"));
        assert!(!rm.params.contains("block3.w1"));
    }

    #[test]
    fn pretrained_trunk_is_copied_exactly() {
        let cfg = tiny_vel_cfg();
        let mut rng = RngStream::new(1, 0);
        let vm = VelocityModel::init(cfg.clone(), &mut rng).unwrap();
        let mut rng2 = RngStream::new(2, 0);
        let rm = build_reward_model(
            &cfg,
            RewardHead::Mlp { d_p: 8 },
            3,
            Some(&vm.params),
            &mut rng2,
        )
        .unwrap();
        assert_eq!(rm.params.get("embed.w").unwrap(), vm.params.get("embed.w").unwrap());
        assert_eq!(rm.params.get("block0.w1").unwrap(), vm.params.get("block0.w1").unwrap());
    }

    #[test]
    fn random_init_differs_across_seeds() {
        let cfg = tiny_vel_cfg();
        let mut r1 = RngStream::new(1, 0);
        let mut r2 = RngStream::new(2, 0);
        let a = build_reward_model(&cfg, RewardHead::Mlp { d_p: 8 }, 3, None, &mut r1).unwrap();
        let b = build_reward_model(&cfg, RewardHead::Mlp { d_p: 8 }, 3, None, &mut r2).unwrap();
        assert_ne!(a.params.get("embed.w").unwrap(), b.params.get("embed.w").unwrap());
    }

    #[test]
    fn checkpoint_shape_mismatch_names_shapes() {
        let cfg = tiny_vel_cfg();
        let mut rng = RngStream::new(1, 0);
        let wrong = VelocityModel::init(
            VelocityConfig {
                hidden: 8,
                ..cfg.clone()
            },
            &mut rng,
        )
        .unwrap();
        let err = build_reward_model(&cfg, RewardHead::Mlp { d_p: 8 }, 3, Some(&wrong.params), &mut rng)
            .unwrap_err();
        assert!(err.to_string().contains("16") && err.to_string().contains('8'), "{err}");
    }

    #[test]
    fn head_geometry_is_validated() {
        let bad = RewardHeadConfig {
            d: 4,
            l: 4,
            d_p: 8,
            h: 3,
            w: 3,
            conv: vec![ConvSpec {
                out_channels: 4,
                kernel: 3,
                stride: 1,
                padding: 1,
            }],
        };
        assert!(bad.validate(16).is_err());
        let good = RewardHeadConfig { h: 4, w: 4, ..bad };
        assert!(good.validate(16).is_ok());
    }

    #[test]
    fn conv_head_produces_finite_scalar() {
        let cfg = tiny_vel_cfg();
        let head = RewardHead::Conv(RewardHeadConfig {
            d: 4,
            l: 4,
            d_p: 8,
            h: 4,
            w: 4,
            conv: vec![ConvSpec {
                out_channels: 6,
                kernel: 3,
                stride: 1,
                padding: 1,
            }],
        });
        let mut rng = RngStream::new(3, 0);
        let rm = build_reward_model(&cfg, head, 3, None, &mut rng).unwrap();
        let x = Tensor::from_vec(vec![0.3, -0.7]);
        let s = reward_score(&rm, &x, 0.4, 1).unwrap();
        assert!(s.is_finite());
    }

    #[test]
    fn scoring_is_deterministic_and_t_sensitive() {
        let cfg = tiny_vel_cfg();
        let mut rng = RngStream::new(4, 0);
        let rm = build_reward_model(&cfg, RewardHead::Mlp { d_p: 8 }, 3, None, &mut rng).unwrap();
        let x = Tensor::from_vec(vec![0.5, 0.5]);
        assert_eq!(
            reward_score(&rm, &x, 0.2, 0).unwrap(),
            reward_score(&rm, &x, 0.2, 0).unwrap()
        );
        assert_ne!(
            reward_score(&rm, &x, 0.0, 0).unwrap(),
            reward_score(&rm, &x, 0.5, 0).unwrap()
        );
    }

    #[test]
    fn synth_preferences_oracle_consistent_without_flips() {
        let spec = v2_spec();
        let mut rng = RngStream::new(5, 0);
        let data = synth_preferences(&spec, None, 200, 0.0, &mut rng).unwrap();
        for t in &data {
            assert!(spec.oracle_reward(&t.win, t.cond) >= spec.oracle_reward(&t.lose, t.cond));
        }
    }

    #[test]
    fn flip_fraction_matches_binomial() {
        let spec = v2_spec();
        let mut rng = RngStream::new(6, 0);
        let data = synth_preferences(&spec, None, 10_000, 0.1, &mut rng).unwrap();
        let flipped = data
            .iter()
            .filter(|t| spec.oracle_reward(&t.win, t.cond) < spec.oracle_reward(&t.lose, t.cond))
            .count() as f64
            / data.len() as f64;
        assert!((flipped - 0.1).abs() < 0.01, "flipped {flipped}");
    }

    #[test]
    fn corruption_at_zero_is_identity() {
        let mut rng = RngStream::new(7, 0);
        let x = corrupt(&[1.0, 2.0], 0.0, &mut rng).unwrap();
        assert_eq!(x.data(), &[1.0, 2.0]);
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = std::env::temp_dir().join("drmflow_pref_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("prefs.jsonl");
        let data = vec![PreferenceTriplet {
            win: vec![0.1, 0.2],
            lose: vec![-0.3, 0.4],
            cond: 1,
        }];
        save_preferences(&path, &data).unwrap();
        assert_eq!(load_preferences(&path).unwrap(), data);
    }

    #[test]
    fn perfect_oracle_scorer_gets_full_accuracy() {
        // eval_accuracy at t=0 with the oracle itself as the scorer.
        let spec = v2_spec();
        let mut rng = RngStream::new(8, 0);
        let data = synth_preferences(&spec, None, 100, 0.0, &mut rng).unwrap();
        let mut correct = 0.0;
        for t in &data {
            if spec.oracle_reward(&t.win, t.cond) > spec.oracle_reward(&t.lose, t.cond) {
                correct += 1.0;
            } else {
                correct += 0.5;
            }
        }
        assert!(correct / data.len() as f64 > 0.99);
    }

    #[test]
    fn untrained_scorer_is_near_chance() {
        let cfg = tiny_vel_cfg();
        let mut rng = RngStream::new(9, 0);
        let rm = build_reward_model(&cfg, RewardHead::Mlp { d_p: 8 }, 3, None, &mut rng).unwrap();
        let spec = v2_spec();
        let data = synth_preferences(&spec, None, 1000, 0.0, &mut rng).unwrap();
        let acc = eval_accuracy(&rm, &data, 0.0, &mut rng).unwrap();
        assert!((acc - 0.5).abs() < 0.15, "acc {acc}");
    }
}
