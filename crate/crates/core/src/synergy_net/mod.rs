//! Encoder-decoder with a bottleneck that fuses a continuous latent and its
//! vector-quantized counterpart through cross-attention.

mod cascade;
mod checkpoint;
mod codebook;

pub use cascade::{cascade_prior, forward_cascade, lowres_shape, CascadeModel, LogitPredictor};
pub use checkpoint::{Checkpoint, CheckpointModel, CHECKPOINT_VERSION};
pub use codebook::{
    locations_as_rows, perplexity, vq_quantize, Codebook, CodebookUpdate, Quantized, DEAD_CODE_USAGE, DEFAULT_DECAY,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autoconfig::PlanConfig;
use crate::error::{Error, Result};
use crate::nn::{kaiming_normal, ConvGeom, ParamId, ParamStore, Real, Tape, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.01;

/// A feature map with the pyramid level it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<F> {
    pub data: Tensor<F>,
    pub stage: usize,
}

/// Which latent supplies the attention queries. The other one supplies keys
/// and values, and the query source is also the residual branch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionDirection {
    #[default]
    ContinuousQueries,
    DiscreteQueries,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetOptions {
    pub attention: AttentionDirection,
    pub codebook_update: CodebookUpdate,
    pub codebook_decay: f64,
}

impl Default for NetOptions {
    fn default() -> Self {
        NetOptions {
            attention: AttentionDirection::default(),
            codebook_update: CodebookUpdate::default(),
            codebook_decay: DEFAULT_DECAY,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub pooling: Vec<[u8; 3]>,
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub heads: usize,
    pub options: NetOptions,
}

impl NetConfig {
    pub fn from_plan(plan: &PlanConfig, in_channels: usize, options: NetOptions) -> Self {
        NetConfig {
            in_channels,
            channels: plan.channels_per_stage.clone(),
            pooling: plan.pooling_per_axis_per_stage.clone(),
            codebook_size: plan.codebook_size,
            latent_dim: plan.latent_dim,
            heads: plan.attention_heads,
            options,
        }
    }

    pub fn n_stages(&self) -> usize {
        self.channels.len()
    }

    pub fn total_pooling(&self) -> [usize; 3] {
        let mut t = [1; 3];
        for p in &self.pooling {
            for a in 0..3 {
                t[a] <<= p[a];
            }
        }
        t
    }

    fn stride(&self, s: usize) -> [usize; 3] {
        self.pooling[s].map(|p| 1 + p as usize)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("invalid network config: {m}")));
        if self.channels.is_empty() || self.channels.len() != self.pooling.len() {
            return bad("channels and pooling need one entry per stage");
        }
        if self.in_channels == 0 || self.channels.contains(&0) {
            return bad("channel counts must be positive");
        }
        if self.heads == 0 || self.latent_dim % self.heads != 0 {
            return bad("latent_dim must be divisible by heads");
        }
        if self.codebook_size < 2 {
            return bad("codebook needs at least two codes");
        }
        Ok(())
    }
}

/// conv (no bias) -> instance norm -> leaky ReLU
#[derive(Clone, Copy, Debug)]
struct ConvBlock {
    w: ParamId,
    gamma: ParamId,
    beta: ParamId,
    geom: ConvGeom,
}

impl ConvBlock {
    fn new<F: Real>(
        ps: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let taps = geom.taps();
        ConvBlock {
            w: ps.add(
                format!("{name}.w"),
                kaiming_normal(&[cout, cin, taps], cin * taps, LEAKY_SLOPE, rng),
            ),
            gamma: ps.add(format!("{name}.norm.g"), Tensor::full(&[cout], F::one())),
            beta: ps.add(format!("{name}.norm.b"), Tensor::zeros(&[cout])),
            geom,
        }
    }

    fn apply<F: Real>(&self, t: &mut Tape<F>, x: Var) -> Result<Var> {
        let y = t.conv(x, self.w, None, self.geom)?;
        let y = t.instance_norm(y, self.gamma, self.beta)?;
        Ok(t.leaky_relu(y, LEAKY_SLOPE))
    }
}

/// A 1x1x1 convolution with bias.
#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new<F: Real>(ps: &mut ParamStore<F>, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: ps.add(format!("{name}.w"), kaiming_normal(&[cout, cin, 1], cin, 1.0, rng)),
            b: ps.add(format!("{name}.b"), Tensor::zeros(&[cout])),
        }
    }

    fn apply<F: Real>(&self, t: &mut Tape<F>, x: Var) -> Result<Var> {
        t.conv(x, self.w, Some(self.b), ConvGeom::pointwise())
    }
}

#[derive(Clone, Debug)]
struct UpStage {
    w: ParamId,
    b: ParamId,
    stride: [usize; 3],
    blocks: [ConvBlock; 2],
}

#[derive(Clone, Debug)]
struct Layers {
    encoder: Vec<[ConvBlock; 2]>,
    f1: Linear,
    f2: Linear,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    /// Deepest first.
    decoder: Vec<UpStage>,
    head: Linear,
}

/// Stop-gradient quantities captured from one forward pass, replayed so that
/// the quantizer is a smooth function of its input near that point.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenQuantizer<F> {
    /// Selected code vectors `e`, the commitment target.
    pub codes: Tensor<F>,
    /// `e - z` at the snapshot; replayed as `zq = z + offsets`.
    pub offsets: Tensor<F>,
    pub indices: Vec<usize>,
    pub vq_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub enum Quantizer<F> {
    #[default]
    Live,
    Frozen(FrozenQuantizer<F>),
}

/// Tape handles produced by the bottleneck.
#[derive(Clone, Debug)]
pub struct SynergyVars {
    pub f1: Var,
    /// Pre-quantization features.
    pub z: Var,
    pub zq: Var,
    pub fused: Var,
    pub attention: Var,
    pub vq_loss: Var,
    pub commit_loss: Var,
    pub indices: Vec<usize>,
    pub perplexity: f64,
}

impl SynergyVars {
    /// `vq + beta * commit` as a tape node.
    pub fn aux_loss<F: Real>(&self, t: &mut Tape<F>, beta: f64) -> Var {
        t.weighted_sum(&[(self.vq_loss, 1.0), (self.commit_loss, beta)])
    }

    pub fn freeze<F: Real>(&self, t: &Tape<F>) -> FrozenQuantizer<F> {
        let codes = t.value(self.zq).clone();
        let mut offsets = codes.clone();
        for (o, &z) in offsets.data_mut().iter_mut().zip(t.value(self.z).data()) {
            *o -= z;
        }
        FrozenQuantizer {
            codes,
            offsets,
            indices: self.indices.clone(),
            vq_loss: t.value(self.vq_loss).item().f64(),
        }
    }
}

/// Plain-value summary of a bottleneck pass.
#[derive(Clone, Debug, PartialEq)]
pub struct SynergyOutput<F> {
    pub fused: FeatureMap<F>,
    pub indices: Vec<usize>,
    pub vq_loss: f64,
    pub commit_loss: f64,
    pub perplexity: f64,
}

#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub logits: Var,
    pub synergy: SynergyVars,
}

#[derive(Clone, Debug)]
pub struct SynergyUNet<F: Real> {
    pub config: NetConfig,
    pub params: ParamStore<F>,
    pub codebook: Codebook<F>,
    layers: Layers,
}

impl<F: Real> SynergyUNet<F> {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let n = config.n_stages();
        let d = config.latent_dim;
        let mut encoder = Vec::with_capacity(n);
        let mut cin = config.in_channels;
        for s in 0..n {
            let c = config.channels[s];
            encoder.push([
                ConvBlock::new(&mut ps, &format!("enc.{s}.0"), cin, c, ConvGeom::cube3(config.stride(s)), &mut rng),
                ConvBlock::new(&mut ps, &format!("enc.{s}.1"), c, c, ConvGeom::cube3([1, 1, 1]), &mut rng),
            ]);
            cin = c;
        }
        let deepest = config.channels[n - 1];
        let f1 = Linear::new(&mut ps, "bottleneck.f1", deepest, d, &mut rng);
        let f2 = Linear::new(&mut ps, "bottleneck.f2", deepest, d, &mut rng);
        let query = Linear::new(&mut ps, "bottleneck.attn.q", d, d, &mut rng);
        let key = Linear::new(&mut ps, "bottleneck.attn.k", d, d, &mut rng);
        let value = Linear::new(&mut ps, "bottleneck.attn.v", d, d, &mut rng);
        let out = Linear::new(&mut ps, "bottleneck.attn.out", d, d, &mut rng);
        let mut decoder = Vec::new();
        let mut from = d;
        for s in (0..n - 1).rev() {
            let c = config.channels[s];
            let stride = config.stride(s + 1);
            let taps: usize = stride.iter().product();
            decoder.push(UpStage {
                w: ps.add(
                    format!("dec.{s}.up.w"),
                    kaiming_normal(&[from, c * taps], from, 1.0, &mut rng),
                ),
                b: ps.add(format!("dec.{s}.up.b"), Tensor::zeros(&[c])),
                stride,
                blocks: [
                    ConvBlock::new(&mut ps, &format!("dec.{s}.0"), 2 * c, c, ConvGeom::cube3([1, 1, 1]), &mut rng),
                    ConvBlock::new(&mut ps, &format!("dec.{s}.1"), c, c, ConvGeom::cube3([1, 1, 1]), &mut rng),
                ],
            });
            from = c;
        }
        let head = Linear::new(&mut ps, "head", from, 1, &mut rng);
        let codebook = Codebook::random(config.codebook_size, d, config.options.codebook_decay, &mut rng)?;
        Ok(SynergyUNet {
            config,
            params: ps,
            codebook,
            layers: Layers {
                encoder,
                f1,
                f2,
                query,
                key,
                value,
                out,
                decoder,
                head,
            },
        })
    }

    pub fn from_plan(plan: &PlanConfig, in_channels: usize, options: NetOptions, seed: u64) -> Result<Self> {
        Self::new(NetConfig::from_plan(plan, in_channels, options), seed)
    }

    /// Same architecture and values in another precision.
    pub fn cast<G: Real>(&self) -> SynergyUNet<G> {
        SynergyUNet {
            config: self.config.clone(),
            params: self.params.cast(),
            codebook: self.codebook.cast(),
            layers: self.layers.clone(),
        }
    }

    /// Checks channel count and pooling divisibility of a `[n, c, x, y, z]` input.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[_, c, x, y, z] = shape else {
            return Err(Error::ShapeIncompatible(format!("expected a 5-axis input, got {shape:?}")));
        };
        if c != self.config.in_channels {
            return Err(Error::ShapeIncompatible(format!(
                "network expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let pool = self.config.total_pooling();
        let sp = [x, y, z];
        if (0..3).any(|a| sp[a] == 0 || sp[a] % pool[a] != 0) {
            return Err(Error::ShapeIncompatible(format!(
                "input extent {sp:?} not divisible by total pooling {pool:?}"
            )));
        }
        Ok(())
    }

    /// Encoder pyramid, shallowest first.
    pub fn encode(&self, t: &mut Tape<F>, x: Var) -> Result<Vec<Var>> {
        self.check_input(t.value(x).shape())?;
        let mut h = x;
        let mut out = Vec::with_capacity(self.layers.encoder.len());
        for [a, b] in &self.layers.encoder {
            h = a.apply(t, h)?;
            h = b.apply(t, h)?;
            out.push(h);
        }
        Ok(out)
    }

    /// Cross-attention between two `[n, D, ..]` maps with identical shapes.
    /// Returns `(fused, attention node)`.
    pub fn cross_attend(&self, t: &mut Tape<F>, f1: Var, f2: Var) -> Result<(Var, Var)> {
        if t.value(f1).shape() != t.value(f2).shape() {
            return Err(Error::ShapeIncompatible(format!(
                "cross-attention inputs differ: {:?} vs {:?}",
                t.value(f1).shape(),
                t.value(f2).shape()
            )));
        }
        let (qs, kvs) = match self.config.options.attention {
            AttentionDirection::ContinuousQueries => (f1, f2),
            AttentionDirection::DiscreteQueries => (f2, f1),
        };
        let l = &self.layers;
        let q = l.query.apply(t, qs)?;
        let k = l.key.apply(t, kvs)?;
        let v = l.value.apply(t, kvs)?;
        let att = t.attention(q, k, v, self.config.heads)?;
        let proj = l.out.apply(t, att)?;
        Ok((t.add(qs, proj)?, att))
    }

    pub fn bottleneck(&self, t: &mut Tape<F>, feat: Var, quant: &Quantizer<F>) -> Result<SynergyVars> {
        let f1 = self.layers.f1.apply(t, feat)?;
        let z = self.layers.f2.apply(t, feat)?;
        let zv = t.value(z).clone();
        let (codes, zq_value, indices, vq_value, perp) = match quant {
            Quantizer::Live => {
                let q = vq_quantize(&zv, &self.codebook)?;
                (q.zq.clone(), q.zq, q.indices, q.vq_loss, q.perplexity)
            }
            Quantizer::Frozen(fz) => {
                if fz.offsets.shape() != zv.shape() {
                    return Err(Error::ShapeIncompatible("frozen quantizer snapshot has another shape".into()));
                }
                let mut zq = zv.clone();
                zq.add_assign(&fz.offsets);
                let p = perplexity(&fz.indices, self.codebook.size());
                (fz.codes.clone(), zq, fz.indices.clone(), fz.vq_loss, p)
            }
        };
        let locations = indices.len();
        let commit = t.squared_error_mean(z, codes, locations)?;
        let vq = match (quant, self.config.options.codebook_update) {
            (Quantizer::Live, CodebookUpdate::Gradient) => {
                let rows = locations_as_rows(&zv)?;
                let d = self.codebook.dim();
                let rows = Tensor::from_vec(&[rows.len() / d, d], rows)?;
                t.codebook_loss(rows, indices.clone(), self.codebook.embeddings.clone())
            }
            _ => t.input(Tensor::scalar(F::of(vq_value))),
        };
        let zq = t.straight_through(z, zq_value)?;
        let (fused, attention) = self.cross_attend(t, f1, zq)?;
        Ok(SynergyVars {
            f1,
            z,
            zq,
            fused,
            attention,
            vq_loss: vq,
            commit_loss: commit,
            indices,
            perplexity: perp,
        })
    }

    /// Upsampling path; `skips` is the encoder pyramid, shallowest first.
    pub fn decode(&self, t: &mut Tape<F>, fused: Var, skips: &[Var]) -> Result<Var> {
        let n = self.config.n_stages();
        if skips.len() != n {
            return Err(Error::ShapeIncompatible(format!(
                "decoder needs {n} skip maps, got {}",
                skips.len()
            )));
        }
        let mut h = fused;
        for (i, up) in self.layers.decoder.iter().enumerate() {
            let s = n - 2 - i;
            h = t.conv_transpose(h, up.w, Some(up.b), up.stride)?;
            if t.value(h).shape() != t.value(skips[s]).shape() {
                return Err(Error::ShapeIncompatible(format!(
                    "upsampled {:?} does not match skip {:?}",
                    t.value(h).shape(),
                    t.value(skips[s]).shape()
                )));
            }
            h = t.concat_channels(h, skips[s])?;
            h = up.blocks[0].apply(t, h)?;
            h = up.blocks[1].apply(t, h)?;
        }
        self.layers.head.apply(t, h)
    }

    pub fn forward(&self, t: &mut Tape<F>, x: Var, quant: &Quantizer<F>) -> Result<ForwardPass> {
        let skips = self.encode(t, x)?;
        let synergy = self.bottleneck(t, *skips.last().expect("at least one stage"), quant)?;
        let logits = self.decode(t, synergy.fused, &skips)?;
        Ok(ForwardPass { logits, synergy })
    }

    /// Inference: `[n, c, x, y, z]` in, `[n, 1, x, y, z]` logits out.
    pub fn predict(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let mut t = Tape::new(&self.params);
        let xv = t.input(x.clone());
        let pass = self.forward(&mut t, xv, &Quantizer::Live)?;
        Ok(t.value(pass.logits).clone())
    }

    /// Encoder features of an input, tagged with their stage.
    pub fn features(&self, x: &Tensor<F>) -> Result<Vec<FeatureMap<F>>> {
        let mut t = Tape::new(&self.params);
        let xv = t.input(x.clone());
        let vars = self.encode(&mut t, xv)?;
        Ok(vars
            .into_iter()
            .enumerate()
            .map(|(stage, v)| FeatureMap {
                data: t.value(v).clone(),
                stage,
            })
            .collect())
    }

    /// Runs encoder and bottleneck and reports plain values.
    pub fn synergy(&self, x: &Tensor<F>) -> Result<SynergyOutput<F>> {
        let mut t = Tape::new(&self.params);
        let xv = t.input(x.clone());
        let skips = self.encode(&mut t, xv)?;
        let s = self.bottleneck(&mut t, *skips.last().expect("stage"), &Quantizer::Live)?;
        Ok(SynergyOutput {
            fused: FeatureMap {
                data: t.value(s.fused).clone(),
                stage: skips.len() - 1,
            },
            indices: s.indices.clone(),
            vq_loss: t.value(s.vq_loss).item().f64(),
            commit_loss: t.value(s.commit_loss).item().f64(),
            perplexity: s.perplexity,
        })
    }
}

#[cfg(test)]
mod tests;
