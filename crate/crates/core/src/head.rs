//! Metric learning over pooled descriptors.
//!
//! A linear [`ProjectionHead`] maps pooled descriptors into the search space.
//! It is trained Siamese-style: every pair of samples in a class-balanced
//! batch is scored with a margin contrastive loss, and both members of a pair
//! pass through the same head. Optimization uses [`Adam`].

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adam::Adam;
use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::feature::{l2_normalize, GlobalDescriptor, ZERO_NORM};

pub const HEAD_MAGIC: &[u8; 4] = b"PRHD";
pub const HEAD_VERSION: u16 = 1;

/// Affine map `weights * x + bias` followed by L2 normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    in_dim: usize,
    out_dim: usize,
    /// `out_dim x in_dim`, row-major.
    weights: Vec<f32>,
    bias: Vec<f32>,
}

impl ProjectionHead {
    pub fn new(in_dim: usize, out_dim: usize, weights: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::InvalidConfig("head dimensions must be positive".into()));
        }
        if weights.len() != in_dim * out_dim {
            return Err(Error::DimensionMismatch {
                expected: in_dim * out_dim,
                actual: weights.len(),
            });
        }
        if bias.len() != out_dim {
            return Err(Error::DimensionMismatch {
                expected: out_dim,
                actual: bias.len(),
            });
        }
        if let Some(i) = weights.iter().chain(&bias).position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(i));
        }
        Ok(ProjectionHead {
            in_dim,
            out_dim,
            weights,
            bias,
        })
    }

    pub fn identity(dim: usize) -> Self {
        let mut weights = vec![0.0; dim * dim];
        for i in 0..dim {
            weights[i * dim + i] = 1.0;
        }
        ProjectionHead {
            in_dim: dim,
            out_dim: dim,
            weights,
            bias: vec![0.0; dim],
        }
    }

    /// Weights uniform in `[-1/sqrt(in_dim), 1/sqrt(in_dim)]`, zero bias.
    pub fn random(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (in_dim as f32).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        ProjectionHead {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.in_dim {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim,
                actual: len,
            });
        }
        Ok(())
    }

    /// `weights * x + bias` in f64.
    fn affine(&self, x: &[f32]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| {
                row.iter()
                    .zip(x)
                    .fold(0.0f64, |acc, (w, v)| acc + f64::from(*w) * f64::from(*v))
                    + f64::from(*b)
            })
            .collect()
    }

    pub fn project(&self, descriptor: &GlobalDescriptor) -> Result<GlobalDescriptor> {
        self.check_input(descriptor.dim())?;
        let z: Vec<f32> = self.affine(&descriptor.vector).into_iter().map(|v| v as f32).collect();
        Ok(GlobalDescriptor {
            id: descriptor.id.clone(),
            vector: l2_normalize(&z)?,
            normalized: true,
        })
    }

    fn params(&self) -> Vec<f32> {
        let mut p = self.weights.clone();
        p.extend_from_slice(&self.bias);
        p
    }

    fn set_params(&mut self, params: &[f32]) {
        let (w, b) = params.split_at(self.weights.len());
        self.weights.copy_from_slice(w);
        self.bias.copy_from_slice(b);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::with_header(HEAD_MAGIC, HEAD_VERSION, 8 + 4 * (self.weights.len() + self.out_dim));
        w.u32(self.in_dim as u32);
        w.u32(self.out_dim as u32);
        w.f32s(&self.weights);
        w.f32s(&self.bias);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open("head checkpoint", bytes, HEAD_MAGIC, HEAD_VERSION)?;
        let in_dim = r.u32("in_dim")? as usize;
        let out_dim = r.u32("out_dim")? as usize;
        let weights = r.finite_f32s(in_dim.saturating_mul(out_dim), "weights")?;
        let bias = r.finite_f32s(out_dim, "bias")?;
        r.finish()?;
        Self::new(in_dim, out_dim, weights, bias)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        binio::write_file(path.as_ref(), &self.encode())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&binio::read_file(path.as_ref())?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub adam_epsilon: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub epochs: usize,
    pub margin: f64,
    pub classes_per_batch: usize,
    pub samples_per_class: usize,
    pub seed: u64,
    /// Output dimension; `None` keeps the input dimension.
    pub out_dim: Option<usize>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            learning_rate: 1.5e-4,
            adam_epsilon: 1e-8,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            epochs: 20,
            margin: 0.5,
            classes_per_batch: 4,
            samples_per_class: 4,
            seed: 0,
            out_dim: None,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if !(self.margin > 0.0) {
            return bad("margin must be positive");
        }
        if self.classes_per_batch < 2 {
            return bad("classes_per_batch must be at least 2");
        }
        if self.samples_per_class < 2 {
            return bad("samples_per_class must be at least 2");
        }
        if !(self.learning_rate > 0.0) || !(self.adam_epsilon > 0.0) {
            return bad("learning rate and epsilon must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.out_dim == Some(0) {
            return bad("out_dim must be positive");
        }
        Ok(())
    }
}

/// Draws class-balanced batches: each batch holds `classes_per_batch` distinct
/// classes with `samples_per_class` members each.
///
/// Within an epoch every sample is used at most once. Each class's members are
/// shuffled and cut into groups of `samples_per_class` (a short remainder is
/// dropped), and each batch takes one group from the classes with the most
/// groups left, ties broken randomly.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    classes: Vec<Vec<usize>>,
    classes_per_batch: usize,
    samples_per_class: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new<S: AsRef<str>>(
        labels: &[S],
        classes_per_batch: usize,
        samples_per_class: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut by_label: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, l) in labels.iter().enumerate() {
            by_label.entry(l.as_ref()).or_default().push(i);
        }
        let classes: Vec<Vec<usize>> = by_label
            .into_values()
            .filter(|members| members.len() >= samples_per_class.max(1))
            .collect();
        if classes_per_batch == 0 || samples_per_class == 0 || classes.len() < classes_per_batch {
            return Err(Error::InsufficientClasses {
                needed: classes_per_batch,
                per_class: samples_per_class,
                found: classes.len(),
            });
        }
        Ok(BatchSampler {
            classes,
            classes_per_batch,
            samples_per_class,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.classes_per_batch * self.samples_per_class
    }

    /// The batches of the next epoch, as indices into the original label list.
    pub fn epoch(&mut self) -> Vec<Vec<usize>> {
        let q = self.samples_per_class;
        let mut groups: Vec<Vec<Vec<usize>>> = self
            .classes
            .iter()
            .map(|members| {
                let mut m = members.clone();
                m.shuffle(&mut self.rng);
                m.chunks_exact(q).map(<[usize]>::to_vec).collect()
            })
            .collect();

        let mut batches = Vec::new();
        loop {
            let mut order: Vec<usize> = (0..groups.len()).filter(|&c| !groups[c].is_empty()).collect();
            if order.len() < self.classes_per_batch {
                break;
            }
            order.shuffle(&mut self.rng);
            order.sort_by_key(|&c| std::cmp::Reverse(groups[c].len()));
            let mut batch = Vec::with_capacity(self.batch_size());
            for &c in &order[..self.classes_per_batch] {
                batch.extend(groups[c].pop().unwrap());
            }
            batches.push(batch);
        }
        batches
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairLabel {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingPair {
    pub anchor_index: usize,
    pub other_index: usize,
    pub label: PairLabel,
}

/// Every unordered pair `(i, j)`, `i < j`, positive when the labels agree.
pub fn mine_pairs<S: PartialEq>(labels: &[S]) -> Vec<TrainingPair> {
    let n = labels.len();
    let mut pairs = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            pairs.push(TrainingPair {
                anchor_index: i,
                other_index: j,
                label: if labels[i] == labels[j] {
                    PairLabel::Positive
                } else {
                    PairLabel::Negative
                },
            });
        }
    }
    pairs
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGradient {
    pub loss: f64,
    /// d loss / d embedding, one row per embedding.
    pub gradient: Vec<Vec<f64>>,
}

/// Mean margin contrastive loss over `pairs`:
/// `D^2` for positives and `max(0, margin - D)^2` for negatives, where `D` is
/// the Euclidean distance between the two embeddings.
pub fn contrastive_loss(pairs: &[TrainingPair], embeddings: &[Vec<f64>], margin: f64) -> LossAndGradient {
    let mut gradient: Vec<Vec<f64>> = embeddings.iter().map(|e| vec![0.0; e.len()]).collect();
    if pairs.is_empty() {
        return LossAndGradient { loss: 0.0, gradient };
    }
    let scale = 1.0 / pairs.len() as f64;
    let mut total = 0.0;
    for pair in pairs {
        let (a, b) = (&embeddings[pair.anchor_index], &embeddings[pair.other_index]);
        let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        let dist_sq: f64 = diff.iter().map(|d| d * d).sum();
        // coefficient of (a - b) in d loss / d a
        let coeff = match pair.label {
            PairLabel::Positive => {
                total += dist_sq;
                2.0
            }
            PairLabel::Negative => {
                let dist = dist_sq.sqrt();
                let slack = margin - dist;
                if slack > 0.0 {
                    total += slack * slack;
                    if dist > 0.0 {
                        -2.0 * slack / dist
                    } else {
                        0.0
                    }
                } else {
                    0.0
                }
            }
        };
        if coeff != 0.0 {
            for (k, d) in diff.iter().enumerate() {
                let g = scale * coeff * d;
                gradient[pair.anchor_index][k] += g;
                gradient[pair.other_index][k] -= g;
            }
        }
    }
    LossAndGradient {
        loss: total * scale,
        gradient,
    }
}

/// A labelled pooled descriptor used for training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub label: String,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub pair_count: usize,
}

/// One line per epoch: `epoch \t mean_loss \t pair_count`.
pub fn format_training_log(log: &[EpochLog]) -> String {
    log.iter()
        .map(|e| format!("{}\t{}\t{}\n", e.epoch, e.mean_loss, e.pair_count))
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub head: ProjectionHead,
    pub log: Vec<EpochLog>,
}

/// Normalized embeddings of a batch plus what backpropagation needs.
struct Forward {
    embeddings: Vec<Vec<f64>>,
    norms: Vec<f64>,
}

fn forward(head: &ProjectionHead, inputs: &[&[f32]]) -> Result<Forward> {
    let mut embeddings = Vec::with_capacity(inputs.len());
    let mut norms = Vec::with_capacity(inputs.len());
    for x in inputs {
        let z = head.affine(x);
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm >= ZERO_NORM) {
            return Err(Error::ZeroVector);
        }
        embeddings.push(z.iter().map(|v| v / norm).collect());
        norms.push(norm);
    }
    Ok(Forward { embeddings, norms })
}

/// Gradient of the loss w.r.t. the head parameters (weights then bias).
fn backward(head: &ProjectionHead, inputs: &[&[f32]], fwd: &Forward, grad_e: &[Vec<f64>]) -> Vec<f64> {
    let (din, dout) = (head.in_dim, head.out_dim);
    let mut grads = vec![0.0; din * dout + dout];
    for ((x, e), (g, norm)) in inputs.iter().zip(&fwd.embeddings).zip(grad_e.iter().zip(&fwd.norms)) {
        let along: f64 = e.iter().zip(g).map(|(a, b)| a * b).sum();
        for r in 0..dout {
            let gz = (g[r] - e[r] * along) / norm;
            if gz == 0.0 {
                continue;
            }
            let row = &mut grads[r * din..(r + 1) * din];
            for (w, v) in row.iter_mut().zip(x.iter()) {
                *w += gz * f64::from(*v);
            }
            grads[din * dout + r] += gz;
        }
    }
    grads
}

/// Loss and parameter gradient of `head` on one batch.
pub fn batch_loss(
    head: &ProjectionHead,
    inputs: &[&[f32]],
    labels: &[&str],
    margin: f64,
) -> Result<(f64, Vec<f64>, usize)> {
    for x in inputs {
        head.check_input(x.len())?;
    }
    let pairs = mine_pairs(labels);
    let fwd = forward(head, inputs)?;
    let out = contrastive_loss(&pairs, &fwd.embeddings, margin);
    let grads = backward(head, inputs, &fwd, &out.gradient);
    Ok((out.loss, grads, pairs.len()))
}

/// Trains a projection head on labelled pooled descriptors.
///
/// The head starts from [`ProjectionHead::random`] with `config.seed`; batches
/// come from a [`BatchSampler`] seeded with `config.seed + 1`.
pub fn train_head(config: &TrainerConfig, samples: &[TrainSample]) -> Result<TrainOutcome> {
    config.validate()?;
    let in_dim = samples
        .first()
        .map(|s| s.vector.len())
        .filter(|&d| d > 0)
        .ok_or_else(|| Error::InvalidConfig("training set is empty".into()))?;
    if let Some(s) = samples.iter().find(|s| s.vector.len() != in_dim) {
        return Err(Error::DimensionMismatch {
            expected: in_dim,
            actual: s.vector.len(),
        });
    }
    let out_dim = config.out_dim.unwrap_or(in_dim);
    let mut head = ProjectionHead::random(in_dim, out_dim, config.seed);
    let labels: Vec<&str> = samples.iter().map(|s| s.label.as_str()).collect();
    let mut sampler = BatchSampler::new(
        &labels,
        config.classes_per_batch,
        config.samples_per_class,
        config.seed.wrapping_add(1),
    )?;
    let mut adam = Adam::new(
        in_dim * out_dim + out_dim,
        config.learning_rate,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_epsilon,
    );
    let mut params = head.params();
    let mut log = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for epoch in 1..=config.epochs {
        let mut loss_sum = 0.0;
        let mut pair_count = 0;
        let batches = sampler.epoch();
        for batch in &batches {
            let inputs: Vec<&[f32]> = batch.iter().map(|&i| samples[i].vector.as_slice()).collect();
            let batch_labels: Vec<&str> = batch.iter().map(|&i| labels[i]).collect();
            let (loss, grads, pairs) = batch_loss(&head, &inputs, &batch_labels, config.margin)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss(step));
            }
            adam.step(&mut params, &grads);
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::NonFiniteLoss(step));
            }
            head.set_params(&params);
            loss_sum += loss;
            pair_count += pairs;
            step += 1;
        }
        log.push(EpochLog {
            epoch,
            mean_loss: if batches.is_empty() {
                0.0
            } else {
                loss_sum / batches.len() as f64
            },
            pair_count,
        });
    }
    Ok(TrainOutcome { head, log })
}
