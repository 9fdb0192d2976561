//! Prequential (online) code length of binary labels under a small MLP
//! probe.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeOptimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub optimizer: ProbeOptimizer,
    pub batch_size: usize,
    pub passes_per_batch: usize,
    pub warmup_fraction: f64,
    /// Passes over the warm-up block before coding starts.
    pub warmup_epochs: usize,
    pub reshuffles: usize,
    pub clamp: f64,
    /// Standardise features with warm-up block statistics.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 64,
            learning_rate: 0.01,
            optimizer: ProbeOptimizer::Sgd,
            batch_size: 10,
            passes_per_batch: 4,
            warmup_fraction: 0.1,
            warmup_epochs: 50,
            reshuffles: 10,
            clamp: 1e-6,
            standardize: true,
        }
    }
}

pub const MIN_ROWS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdlResult {
    /// Mean over reshuffles of warm-up plus coding bits.
    pub total_bits: f64,
    pub warmup_bits: f64,
    pub coding_bits: f64,
    pub bits_per_instance: f64,
    /// Coding bits divided by the number of coded (post-warm-up) rows.
    pub post_warmup_bits_per_instance: f64,
    pub per_reshuffle_total: Vec<f64>,
}

struct Probe {
    dim: usize,
    hidden: usize,
    /// `w1` (dim×hidden), `b1`, `w2` (hidden×2), `b2`, flattened.
    theta: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Probe {
    fn new(dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let n = dim * hidden + hidden + hidden * 2 + 2;
        let mut theta = vec![0.0; n];
        let s1 = (2.0 / dim.max(1) as f64).sqrt();
        let s2 = (1.0 / hidden as f64).sqrt();
        for t in &mut theta[..dim * hidden] {
            *t = s1 * rng.sample::<f64, _>(StandardNormal);
        }
        let off = dim * hidden + hidden;
        for t in &mut theta[off..off + hidden * 2] {
            *t = s2 * rng.sample::<f64, _>(StandardNormal);
        }
        Probe {
            dim,
            hidden,
            theta,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.dim * self.hidden;
        let w2 = b1 + self.hidden;
        (b1, w2, w2 + self.hidden * 2)
    }

    /// Hidden activations and class-1 probability.
    fn forward(&self, x: &[f64], hid: &mut [f64]) -> f64 {
        let (b1, w2, b2) = self.offsets();
        let h = self.hidden;
        for (j, out) in hid.iter_mut().enumerate() {
            let mut a = self.theta[b1 + j];
            for (i, xi) in x.iter().enumerate() {
                a += xi * self.theta[i * h + j];
            }
            *out = a.max(0.0);
        }
        let mut z = [self.theta[b2], self.theta[b2 + 1]];
        for (j, hj) in hid.iter().enumerate() {
            z[0] += hj * self.theta[w2 + j * 2];
            z[1] += hj * self.theta[w2 + j * 2 + 1];
        }
        let d = z[1] - z[0];
        1.0 / (1.0 + (-d).exp())
    }

    fn update(&mut self, xs: &[&[f64]], ys: &[u8], cfg: &ProbeConfig) {
        let (b1, w2, b2) = self.offsets();
        let h = self.hidden;
        let mut grad = vec![0.0; self.theta.len()];
        let mut hid = vec![0.0; h];
        let scale = 1.0 / xs.len() as f64;
        for (x, &y) in xs.iter().zip(ys) {
            let p1 = self.forward(x, &mut hid);
            // d loss / d z = p − onehot(y)
            let dz = [(1.0 - p1) - (y == 0) as u8 as f64, p1 - (y == 1) as u8 as f64];
            grad[b2] += dz[0] * scale;
            grad[b2 + 1] += dz[1] * scale;
            for j in 0..h {
                grad[w2 + j * 2] += hid[j] * dz[0] * scale;
                grad[w2 + j * 2 + 1] += hid[j] * dz[1] * scale;
                if hid[j] > 0.0 {
                    let dh = (self.theta[w2 + j * 2] * dz[0] + self.theta[w2 + j * 2 + 1] * dz[1]) * scale;
                    grad[b1 + j] += dh;
                    for (i, xi) in x.iter().enumerate() {
                        grad[i * h + j] += xi * dh;
                    }
                }
            }
        }
        let lr = cfg.learning_rate;
        match cfg.optimizer {
            ProbeOptimizer::Sgd => {
                for (t, g) in self.theta.iter_mut().zip(&grad) {
                    *t -= lr * g;
                }
            }
            ProbeOptimizer::Adam => {
                self.step += 1;
                let (beta1, beta2) = (0.9f64, 0.999f64);
                let bc1 = 1.0 - beta1.powi(self.step);
                let bc2 = 1.0 - beta2.powi(self.step);
                for i in 0..self.theta.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    self.theta[i] -= lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + 1e-8);
                }
            }
        }
    }
}

fn code_one(x: &[Vec<f64>], y: &[u8], cfg: &ProbeConfig, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
    let n = y.len();
    let dim = x[0].len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let warm = ((cfg.warmup_fraction * n as f64).ceil() as usize).clamp(1, n - 1);

    let (mean, std) = if cfg.standardize {
        let mut mean = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for &i in &order[..warm] {
            for (d, v) in x[i].iter().enumerate() {
                mean[d] += v;
                sq[d] += v * v;
            }
        }
        let std: Vec<f64> = (0..dim)
            .map(|d| {
                mean[d] /= warm as f64;
                let var = sq[d] / warm as f64 - mean[d] * mean[d];
                if var > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        (mean, std)
    } else {
        (vec![0.0; dim], vec![1.0; dim])
    };
    let rows: Vec<Vec<f64>> = order
        .iter()
        .map(|&i| x[i].iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s).collect())
        .collect();
    let labels: Vec<u8> = order.iter().map(|&i| y[i]).collect();

    let mut probe = Probe::new(dim, cfg.hidden, rng);
    let mut warm_idx: Vec<usize> = (0..warm).collect();
    for _ in 0..cfg.warmup_epochs {
        warm_idx.shuffle(rng);
        for batch in warm_idx.chunks(cfg.batch_size) {
            let xs: Vec<&[f64]> = batch.iter().map(|&i| rows[i].as_slice()).collect();
            let ys: Vec<u8> = batch.iter().map(|&i| labels[i]).collect();
            probe.update(&xs, &ys, cfg);
        }
    }
    if !probe.theta.iter().all(|t| t.is_finite()) {
        return Err(Error::UndefinedMetric(format!(
            "MDL probe diverged during warm-up (lr {}, {} epochs)",
            cfg.learning_rate, cfg.warmup_epochs
        )));
    }

    let mut hid = vec![0.0; cfg.hidden];
    let mut coding = 0.0;
    let mut start = warm;
    while start < n {
        let end = (start + cfg.batch_size).min(n);
        for i in start..end {
            let p1 = probe.forward(&rows[i], &mut hid).clamp(cfg.clamp, 1.0 - cfg.clamp);
            let p = if labels[i] == 1 { p1 } else { 1.0 - p1 };
            coding -= p.log2();
        }
        let xs: Vec<&[f64]> = (start..end).map(|i| rows[i].as_slice()).collect();
        for _ in 0..cfg.passes_per_batch {
            probe.update(&xs, &labels[start..end], cfg);
        }
        start = end;
    }
    if !coding.is_finite() {
        return Err(Error::UndefinedMetric("MDL code length is not finite".into()));
    }
    Ok((warm as f64, coding))
}

pub fn mdl_preq(x: &[Vec<f64>], y: &[u8], cfg: &ProbeConfig, seed: u64) -> Result<MdlResult> {
    let n = y.len();
    if x.len() != n {
        return Err(Error::Invalid(format!("{} feature rows for {n} labels", x.len())));
    }
    if n < MIN_ROWS {
        return Err(Error::UndefinedMetric(format!("mdl_preq needs at least {MIN_ROWS} rows, got {n}")));
    }
    if y.iter().any(|&v| v > 1) {
        return Err(Error::Invalid("labels must be 0 or 1".into()));
    }
    if cfg.reshuffles == 0 || cfg.batch_size == 0 || cfg.hidden == 0 {
        return Err(Error::Config("probe needs positive reshuffles, batch size and width".into()));
    }
    let dim = x[0].len();
    if dim == 0 || x.iter().any(|r| r.len() != dim) {
        return Err(Error::Invalid("feature rows must share a positive width".into()));
    }
    let mut per = Vec::with_capacity(cfg.reshuffles);
    let (mut warm_sum, mut code_sum) = (0.0, 0.0);
    let mut coded_rows = 0.0;
    for r in 0..cfg.reshuffles {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let (w, c) = code_one(x, y, cfg, &mut rng)?;
        warm_sum += w;
        code_sum += c;
        coded_rows = n as f64 - w;
        per.push(w + c);
    }
    let k = cfg.reshuffles as f64;
    let total = (warm_sum + code_sum) / k;
    Ok(MdlResult {
        total_bits: total,
        warmup_bits: warm_sum / k,
        coding_bits: code_sum / k,
        bits_per_instance: total / n as f64,
        post_warmup_bits_per_instance: code_sum / k / coded_rows,
        per_reshuffle_total: per,
    })
}
