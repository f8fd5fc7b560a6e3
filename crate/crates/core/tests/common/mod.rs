//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use std::collections::HashSet;

use patchrank::fusion::{bce_loss_and_gradient, Mlp};
use patchrank::head::{TrainSample, TrainingPair};
use patchrank::{contrastive_loss, mine_pairs, DescriptorStore, FusionSample, GlobalDescriptor};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn unit(v: &[f32]) -> Vec<f32> {
    let n = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    v.iter().map(|x| (f64::from(*x) / n) as f32).collect()
}

pub fn naive_dot(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for i in 0..a.len() {
        s += f64::from(a[i]) * f64::from(b[i]);
    }
    s
}

/// A store of `n` random unit rows; roughly one row in ten duplicates an
/// earlier one so that ties occur.
pub fn random_store(rng: &mut ChaCha8Rng, n: usize, c: usize) -> DescriptorStore {
    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 && rng.random_bool(0.1) {
            let j = rng.random_range(0..i);
            rows.push(rows[j].clone());
        } else {
            rows.push(unit(&gaussian(rng, c)));
        }
    }
    let ids: Vec<String> = (0..n).map(|i| format!("d{:08x}-{i}", rng.random::<u32>())).collect();
    let labels = vec!["x".to_string(); n];
    DescriptorStore::from_rows(c, ids, labels, rows.concat()).unwrap()
}

pub fn query(rng: &mut ChaCha8Rng, c: usize) -> GlobalDescriptor {
    GlobalDescriptor {
        id: "q".into(),
        vector: unit(&gaussian(rng, c)),
        normalized: true,
    }
}

/// Full sort of every row by (score desc, id asc), truncated to `k`.
pub fn oracle_top_k(q: &[f32], store: &DescriptorStore, k: usize) -> Vec<(String, f32)> {
    let mut all: Vec<(String, f32)> = (0..store.len())
        .map(|i| {
            let s = (naive_dot(q, store.row(i)) as f32).clamp(-1.0, 1.0);
            (store.ids()[i].clone(), s)
        })
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Mean over query patches of the best dot product with any doc patch;
/// patches are given already normalized.
pub fn naive_local_score(query: &[Vec<f32>], doc: &[Vec<f32>]) -> f64 {
    let mut total = 0.0;
    for q in query {
        let mut best = f64::NEG_INFINITY;
        for d in doc {
            best = best.max(naive_dot(q, d));
        }
        total += best;
    }
    total / query.len() as f64
}

/// AP@k recomputing precision at every rank from scratch.
pub fn naive_ap(ranked: &[String], relevant: &HashSet<String>, k: usize) -> f64 {
    let cut = ranked.len().min(k);
    let mut sum = 0.0;
    for i in 0..cut {
        if relevant.contains(&ranked[i]) {
            let seen = ranked[..=i].iter().filter(|d| relevant.contains(*d)).count();
            sum += seen as f64 / (i + 1) as f64;
        }
    }
    sum / relevant.len().min(k) as f64
}

/// Central finite-difference gradient of `f` at `x`.
pub fn central_difference(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` over the whole vector; 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

pub fn random_batch(r: &mut ChaCha8Rng) -> (Vec<TrainingPair>, Vec<Vec<f64>>) {
    let n = r.random_range(2..=8);
    let dim = r.random_range(2..=8);
    let classes = r.random_range(1..=3);
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
    let emb = (0..n)
        .map(|_| unit(&gaussian(r, dim)).into_iter().map(f64::from).collect())
        .collect();
    (mine_pairs(&labels), emb)
}

pub fn contrastive_gradient_error(r: &mut ChaCha8Rng) -> f64 {
    let (pairs, emb) = random_batch(r);
    let dim = emb[0].len();
    let analytic: Vec<f64> = contrastive_loss(&pairs, &emb, 0.5).gradient.concat();
    let flat: Vec<f64> = emb.concat();
    let numeric = central_difference(&flat, 1e-4, |x| {
        let e: Vec<Vec<f64>> = x.chunks(dim).map(<[f64]>::to_vec).collect();
        contrastive_loss(&pairs, &e, 0.5).loss
    });
    relative_error(&analytic, &numeric)
}

/// Two clusters in 8-d centred at `±2` on the first four axes, unit noise.
pub fn two_clusters(seed: u64, per_class: usize) -> Vec<TrainSample> {
    let mut r = rng(seed);
    let mut samples = Vec::new();
    for (c, sign) in [(0, 1.0f32), (1, -1.0)] {
        for _ in 0..per_class {
            let noise = gaussian(&mut r, 8);
            let vector = noise
                .iter()
                .enumerate()
                .map(|(k, z)| if k < 4 { sign * 2.0 + z } else { *z })
                .collect();
            samples.push(TrainSample {
                label: format!("c{c}"),
                vector,
            });
        }
    }
    samples
}

pub fn random_fusion_samples(r: &mut ChaCha8Rng, n: usize) -> Vec<FusionSample> {
    (0..n)
        .map(|_| FusionSample {
            global_score: r.random_range(-1.0..1.0),
            local_score: r.random_range(-1.0..1.0),
            relevant: r.random_bool(0.5),
        })
        .collect()
}

pub fn fusion_gradient_error(r: &mut ChaCha8Rng) -> f64 {
    let hidden = r.random_range(1..=8);
    let samples = random_fusion_samples(r, 12);
    let params: Vec<f64> = (0..Mlp::param_count(hidden))
        .map(|_| r.random_range(-1.5..1.5))
        .collect();
    let (_, analytic) = bce_loss_and_gradient(hidden, &params, &samples);
    let numeric = central_difference(&params, 1e-4, |p| bce_loss_and_gradient(hidden, p, &samples).0);
    relative_error(&analytic, &numeric)
}

/// A random ranking over a pool of ids, and a non-empty relevant subset of the pool.
pub fn random_ap_case(r: &mut ChaCha8Rng) -> (Vec<String>, HashSet<String>, usize) {
    let pool = r.random_range(1..=60);
    let mut ids: Vec<String> = (0..pool).map(|i| format!("d{i}")).collect();
    ids.shuffle(r);
    let relevant_count = r.random_range(1..=pool);
    let relevant: HashSet<String> = ids.choose_multiple(r, relevant_count).cloned().collect();
    let ranked_len = r.random_range(0..=pool);
    ids.truncate(ranked_len);
    let k = r.random_range(1..=70);
    (ids, relevant, k)
}
