use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{uniform, Real, Tensor};

pub const DEFAULT_DECAY: f64 = 0.99;
/// Codes whose usage EMA falls below this are re-seeded after an epoch.
pub const DEAD_CODE_USAGE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<F> {
    /// `[K, D]`
    pub embeddings: Tensor<F>,
    pub usage_ema: Vec<f64>,
    pub decay: f64,
}

/// Result of snapping every spatial location of a `[n, D, x, y, z]` map to
/// its nearest code.
#[derive(Clone, Debug, PartialEq)]
pub struct Quantized<F> {
    pub zq: Tensor<F>,
    /// One index per location, batch-major then x-fastest.
    pub indices: Vec<usize>,
    pub vq_loss: f64,
    pub commit_loss: f64,
    pub perplexity: f64,
}

impl<F: Real> Codebook<F> {
    pub fn new(embeddings: Tensor<F>, decay: f64) -> Result<Self> {
        let &[k, d] = embeddings.shape() else {
            return Err(Error::InvalidArgument(format!(
                "codebook must be K x D, got {:?}",
                embeddings.shape()
            )));
        };
        if k < 2 || d == 0 {
            return Err(Error::InvalidArgument(format!("codebook needs K >= 2 and D >= 1, got {k} x {d}")));
        }
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::InvalidArgument(format!("codebook decay must lie in (0, 1), got {decay}")));
        }
        if !embeddings.is_finite() {
            return Err(Error::NonFiniteData);
        }
        Ok(Codebook {
            embeddings,
            usage_ema: vec![0.0; k],
            decay,
        })
    }

    pub fn random(k: usize, d: usize, decay: f64, rng: &mut impl Rng) -> Result<Self> {
        Self::new(uniform(&[k, d], 1.0 / k as f64, rng), decay)
    }

    pub fn size(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn row(&self, k: usize) -> &[F] {
        let d = self.dim();
        &self.embeddings.data()[k * d..(k + 1) * d]
    }

    /// Nearest code by squared Euclidean distance; ties go to the smallest index.
    pub fn nearest(&self, v: &[F]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..self.size() {
            let d: f64 = self.row(k).iter().zip(v).map(|(&e, &x)| (e - x).f64().powi(2)).sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    /// Moves assigned codes towards the mean of their vectors and updates
    /// usage. `vectors` is `[L, D]` row-major.
    pub fn ema_update(&mut self, vectors: &[F], indices: &[usize]) -> Result<()> {
        let (k, d) = (self.size(), self.dim());
        if vectors.len() != indices.len() * d {
            return Err(Error::DimensionMismatch {
                expected: indices.len() * d,
                got: vectors.len(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(Error::InvalidArgument(format!("code index {bad} out of range for K = {k}")));
        }
        let mut sums = vec![0.0f64; k * d];
        let mut counts = vec![0usize; k];
        for (l, &i) in indices.iter().enumerate() {
            counts[i] += 1;
            for j in 0..d {
                sums[i * d + j] += vectors[l * d + j].f64();
            }
        }
        let decay = self.decay;
        let total = indices.len().max(1) as f64;
        for c in 0..k {
            self.usage_ema[c] = decay * self.usage_ema[c] + (1.0 - decay) * counts[c] as f64 / total;
            if counts[c] == 0 {
                continue;
            }
            let e = &mut self.embeddings.data_mut()[c * d..(c + 1) * d];
            for j in 0..d {
                let mean = sums[c * d + j] / counts[c] as f64;
                e[j] = F::of(decay * e[j].f64() + (1.0 - decay) * mean);
            }
        }
        Ok(())
    }

    /// Updates only the usage EMA (the gradient-trained codebook still needs
    /// it for dead-code detection).
    pub fn track_usage(&mut self, indices: &[usize]) {
        let mut counts = vec![0usize; self.size()];
        for &i in indices {
            counts[i] += 1;
        }
        let total = indices.len().max(1) as f64;
        for (u, &c) in self.usage_ema.iter_mut().zip(&counts) {
            *u = self.decay * *u + (1.0 - self.decay) * c as f64 / total;
        }
    }

    /// Re-seeds rarely used codes with random vectors from `pool` (`[L, D]`).
    /// Returns how many codes were replaced.
    pub fn reseed_dead(&mut self, pool: &[F], rng: &mut impl Rng) -> usize {
        let d = self.dim();
        let rows: Vec<usize> = (0..pool.len() / d).collect();
        if rows.is_empty() {
            return 0;
        }
        let mut n = 0;
        for c in 0..self.size() {
            if self.usage_ema[c] < DEAD_CODE_USAGE {
                let &r = rows.choose(rng).expect("non-empty");
                self.embeddings.data_mut()[c * d..(c + 1) * d].copy_from_slice(&pool[r * d..(r + 1) * d]);
                n += 1;
            }
        }
        n
    }

    pub fn cast<G: Real>(&self) -> Codebook<G> {
        Codebook {
            embeddings: self.embeddings.cast(),
            usage_ema: self.usage_ema.clone(),
            decay: self.decay,
        }
    }
}

/// Gathers the channel vectors of a `[n, D, ..]` map into `[n * S, D]` rows.
pub fn locations_as_rows<F: Real>(z: &Tensor<F>) -> Result<Vec<F>> {
    let (n, d, _) = z.dims5()?;
    let s = z.spatial_len();
    let mut rows = vec![F::zero(); n * s * d];
    for b in 0..n {
        for c in 0..d {
            let ch = z.channel(b, c);
            for p in 0..s {
                rows[(b * s + p) * d + c] = ch[p];
            }
        }
    }
    Ok(rows)
}

/// Perplexity `exp(H)` of the empirical index distribution.
pub fn perplexity(indices: &[usize], k: usize) -> f64 {
    if indices.is_empty() {
        return 1.0;
    }
    let mut counts = vec![0usize; k];
    for &i in indices {
        counts[i] += 1;
    }
    let n = indices.len() as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    h.exp()
}

/// Nearest-code quantization of a `[n, D, x, y, z]` map. Both losses are the
/// mean over locations of the squared distance to the chosen code; they
/// differ only in where gradients flow, which the tape handles.
pub fn vq_quantize<F: Real>(z: &Tensor<F>, cb: &Codebook<F>) -> Result<Quantized<F>> {
    let (n, d, _) = z.dims5()?;
    if d != cb.dim() {
        return Err(Error::DimensionMismatch {
            expected: cb.dim(),
            got: d,
        });
    }
    let s = z.spatial_len();
    let rows = locations_as_rows(z)?;
    let mut zq = Tensor::zeros(z.shape());
    let mut indices = Vec::with_capacity(n * s);
    let mut sq = 0.0;
    for b in 0..n {
        for p in 0..s {
            let v = &rows[(b * s + p) * d..(b * s + p + 1) * d];
            let k = cb.nearest(v);
            indices.push(k);
            for (c, (&e, &x)) in cb.row(k).iter().zip(v).enumerate() {
                sq += (e - x).f64().powi(2);
                zq.channel_mut(b, c)[p] = e;
            }
        }
    }
    let loss = sq / (n * s).max(1) as f64;
    Ok(Quantized {
        zq,
        perplexity: perplexity(&indices, cb.size()),
        indices,
        vq_loss: loss,
        commit_loss: loss,
    })
}

/// How the codebook learns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodebookUpdate {
    #[default]
    Ema,
    Gradient,
}
