//! Combining the global and local similarity of a candidate into one score.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};

pub const FUSION_MAGIC: &[u8; 4] = b"PRFU";
pub const FUSION_VERSION: u16 = 1;
pub const DEFAULT_HIDDEN: usize = 8;

/// A `2 -> hidden -> 1` network with tanh hidden units and a sigmoid output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    hidden: usize,
    /// `hidden x 2`, row-major: weight on (global, local) per hidden unit.
    w1: Vec<f32>,
    b1: Vec<f32>,
    w2: Vec<f32>,
    b2: f32,
}

impl Mlp {
    pub fn zeros(hidden: usize) -> Self {
        Mlp {
            hidden,
            w1: vec![0.0; 2 * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
        }
    }

    /// Input weights uniform in `±1/sqrt(2)`, output weights in
    /// `±1/sqrt(hidden)`, zero biases.
    pub fn random(hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b_in = 1.0 / 2.0f32.sqrt();
        let b_out = 1.0 / (hidden as f32).sqrt();
        let w1 = (0..2 * hidden).map(|_| rng.random_range(-b_in..=b_in)).collect();
        let w2 = (0..hidden).map(|_| rng.random_range(-b_out..=b_out)).collect();
        Mlp {
            hidden,
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: 0.0,
        }
    }

    /// Builds a network from its flat parameter vector
    /// (`w1`, then `b1`, then `w2`, then `b2`).
    pub fn from_params(hidden: usize, params: &[f32]) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::InvalidConfig("hidden width must be positive".into()));
        }
        if params.len() != Self::param_count(hidden) {
            return Err(Error::DimensionMismatch {
                expected: Self::param_count(hidden),
                actual: params.len(),
            });
        }
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFiniteValue(i));
        }
        let (w1, rest) = params.split_at(2 * hidden);
        let (b1, rest) = rest.split_at(hidden);
        let (w2, b2) = rest.split_at(hidden);
        Ok(Mlp {
            hidden,
            w1: w1.to_vec(),
            b1: b1.to_vec(),
            w2: w2.to_vec(),
            b2: b2[0],
        })
    }

    pub fn param_count(hidden: usize) -> usize {
        4 * hidden + 1
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> Vec<f32> {
        let mut p = Vec::with_capacity(Self::param_count(self.hidden));
        p.extend_from_slice(&self.w1);
        p.extend_from_slice(&self.b1);
        p.extend_from_slice(&self.w2);
        p.push(self.b2);
        p
    }

    pub fn output(&self, global: f64, local: f64) -> f64 {
        let params: Vec<f64> = self.params().into_iter().map(f64::from).collect();
        sigmoid(forward(self.hidden, &params, global, local).1)
    }

    /// Mean binary cross-entropy over `samples` and its gradient w.r.t.
    /// [`Mlp::params`].
    pub fn loss_and_gradient(&self, samples: &[FusionSample]) -> (f64, Vec<f64>) {
        let params: Vec<f64> = self.params().into_iter().map(f64::from).collect();
        bce_loss_and_gradient(self.hidden, &params, samples)
    }
}

/// Hidden activations and the output logit for a flat parameter vector laid
/// out as in [`Mlp::params`].
fn forward(hidden: usize, params: &[f64], global: f64, local: f64) -> (Vec<f64>, f64) {
    let (w1, rest) = params.split_at(2 * hidden);
    let (b1, rest) = rest.split_at(hidden);
    let (w2, b2) = rest.split_at(hidden);
    let mut logit = b2[0];
    let mut act = Vec::with_capacity(hidden);
    for j in 0..hidden {
        let a = (w1[2 * j] * global + w1[2 * j + 1] * local + b1[j]).tanh();
        logit += w2[j] * a;
        act.push(a);
    }
    (act, logit)
}

/// Mean binary cross-entropy of the network with parameters `params` (laid
/// out as in [`Mlp::params`]) and its analytic gradient.
pub fn bce_loss_and_gradient(hidden: usize, params: &[f64], samples: &[FusionSample]) -> (f64, Vec<f64>) {
    assert_eq!(params.len(), Mlp::param_count(hidden));
    let h = hidden;
    let mut grad = vec![0.0; params.len()];
    if samples.is_empty() {
        return (0.0, grad);
    }
    let w2 = &params[3 * h..4 * h];
    let scale = 1.0 / samples.len() as f64;
    let mut loss = 0.0;
    for s in samples {
        let (g, l) = (f64::from(s.global_score), f64::from(s.local_score));
        let y = if s.relevant { 1.0 } else { 0.0 };
        let (act, logit) = forward(h, params, g, l);
        // BCE on a sigmoid output, written in terms of the logit
        loss += softplus(logit) - y * logit;
        let d_logit = scale * (sigmoid(logit) - y);
        for j in 0..h {
            grad[3 * h + j] += d_logit * act[j];
            let d_pre = d_logit * w2[j] * (1.0 - act[j] * act[j]);
            grad[2 * j] += d_pre * g;
            grad[2 * j + 1] += d_pre * l;
            grad[2 * h + j] += d_pre;
        }
        grad[4 * h] += d_logit;
    }
    (loss * scale, grad)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, PartialEq)]
pub enum FusionModel {
    /// `alpha * global + (1 - alpha) * local`.
    Linear {
        alpha: f32,
    },
    Mlp(Mlp),
}

impl FusionModel {
    pub fn linear(alpha: f32) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidConfig(format!("alpha {alpha} outside [0, 1]")));
        }
        Ok(FusionModel::Linear { alpha })
    }

    /// Ranks by the global score alone.
    pub fn global_only() -> Self {
        FusionModel::Linear { alpha: 1.0 }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::with_header(FUSION_MAGIC, FUSION_VERSION, 64);
        match self {
            FusionModel::Linear { alpha } => {
                w.u8(0);
                w.f32s(&[*alpha]);
            }
            FusionModel::Mlp(mlp) => {
                w.u8(1);
                w.u32(mlp.hidden as u32);
                w.f32s(&mlp.params());
            }
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open("fusion checkpoint", bytes, FUSION_MAGIC, FUSION_VERSION)?;
        let model = match r.u8("kind")? {
            0 => FusionModel::linear(r.finite_f32s(1, "alpha")?[0])?,
            1 => {
                let hidden = r.u32("hidden")? as usize;
                let params = r.finite_f32s(Mlp::param_count(hidden), "parameters")?;
                FusionModel::Mlp(Mlp::from_params(hidden, &params)?)
            }
            k => {
                return Err(Error::Malformed {
                    what: "fusion checkpoint",
                    detail: format!("unknown kind {k}"),
                })
            }
        };
        r.finish()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        binio::write_file(path.as_ref(), &self.encode())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&binio::read_file(path.as_ref())?)
    }
}

pub fn fuse(global_score: f32, local_score: f32, model: &FusionModel) -> f32 {
    let (g, l) = (f64::from(global_score), f64::from(local_score));
    match model {
        FusionModel::Linear { alpha } => {
            let a = f64::from(*alpha);
            (a * g + (1.0 - a) * l) as f32
        }
        FusionModel::Mlp(mlp) => mlp.output(g, l) as f32,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionSample {
    pub global_score: f32,
    pub local_score: f32,
    pub relevant: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionTrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub hidden: usize,
}

impl Default for FusionTrainConfig {
    fn default() -> Self {
        FusionTrainConfig {
            learning_rate: 1.0,
            epochs: 500,
            seed: 0,
            hidden: DEFAULT_HIDDEN,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FusionTrainOutcome {
    pub model: FusionModel,
    /// Loss of the returned model on the training samples.
    pub final_loss: f64,
    /// Loss before each epoch's update.
    pub losses: Vec<f64>,
}

/// Fits an [`Mlp`] by full-batch gradient descent on binary cross-entropy.
pub fn train_fusion(samples: &[FusionSample], config: &FusionTrainConfig) -> Result<FusionTrainOutcome> {
    if config.hidden == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::InvalidConfig(
            "hidden width and learning rate must be positive".into(),
        ));
    }
    let positives = samples.iter().filter(|s| s.relevant).count();
    if positives == 0 || positives == samples.len() {
        return Err(Error::DegenerateLabels);
    }
    if samples
        .iter()
        .any(|s| !s.global_score.is_finite() || !s.local_score.is_finite())
    {
        return Err(Error::InvalidConfig("fusion samples must be finite".into()));
    }
    let init = Mlp::random(config.hidden, config.seed);
    let mut params: Vec<f64> = init.params().into_iter().map(f64::from).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let (loss, grad) = bce_loss_and_gradient(config.hidden, &params, samples);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(epoch));
        }
        losses.push(loss);
        for (p, g) in params.iter_mut().zip(&grad) {
            *p -= config.learning_rate * g;
        }
    }
    let rounded: Vec<f32> = params.iter().map(|p| *p as f32).collect();
    let mlp = Mlp::from_params(config.hidden, &rounded).map_err(|_| Error::NonFiniteLoss(config.epochs))?;
    let final_loss = mlp.loss_and_gradient(samples).0;
    Ok(FusionTrainOutcome {
        model: FusionModel::Mlp(mlp),
        final_loss,
        losses,
    })
}

/// Fraction of samples whose output falls on the correct side of 0.5.
pub fn accuracy(model: &FusionModel, samples: &[FusionSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let correct = samples
        .iter()
        .filter(|s| (fuse(s.global_score, s.local_score, model) > 0.5) == s.relevant)
        .count();
    correct as f64 / samples.len() as f64
}
