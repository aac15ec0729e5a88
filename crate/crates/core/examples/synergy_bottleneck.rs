//! Build an untrained network and look inside its bottleneck: encoder pyramid,
//! codebook assignments, perplexity and the quantizer losses, for both
//! attention directions.
//!
//!     cargo run --release --example synergy_bottleneck

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use synergyseg::nn::{Tape, Tensor};
use synergyseg::synergy_net::{vq_quantize, AttentionDirection, Codebook, NetConfig, NetOptions, Quantizer, SynergyUNet};

fn main() -> synergyseg::Result<()> {
    // quantizer on its own: four codes on the unit square
    let cb = Codebook::new(Tensor::from_vec(&[4, 2], vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0])?, 0.99)?;
    let z = Tensor::from_vec(&[1, 2, 3, 1, 1], vec![0.1, 0.9, 0.6, 0.2, 0.4, 0.8])?;
    let q = vq_quantize(&z, &cb)?;
    println!("codes {:?}, vq loss {:.3}, perplexity {:.2}", q.indices, q.vq_loss, q.perplexity);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let shape = [2, 1, 16, 16, 8];
    let data: Vec<f32> = (0..shape.iter().product()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let x = Tensor::from_vec(&shape, data)?;

    for attention in [AttentionDirection::ContinuousQueries, AttentionDirection::DiscreteQueries] {
        let cfg = NetConfig {
            in_channels: 1,
            channels: vec![8, 16, 32],
            pooling: vec![[0, 0, 0], [1, 1, 1], [1, 1, 0]],
            codebook_size: 32,
            latent_dim: 16,
            heads: 4,
            options: NetOptions { attention, ..NetOptions::default() },
        };
        let net = SynergyUNet::<f32>::new(cfg, 0)?;
        println!("\n{attention:?}: {} parameters", net.params.num_scalars());
        for f in net.features(&x)? {
            println!("  stage {} features {:?}", f.stage, f.data.shape());
        }
        let s = net.synergy(&x)?;
        let mut used = s.indices.clone();
        used.sort_unstable();
        used.dedup();
        println!(
            "  fused {:?}, {} locations use {} codes, perplexity {:.2}, vq {:.4}, commit {:.4}",
            s.fused.data.shape(),
            s.indices.len(),
            used.len(),
            s.perplexity,
            s.vq_loss,
            s.commit_loss
        );

        // replaying a frozen quantizer reproduces the live pass exactly
        let mut t = Tape::new(&net.params);
        let xv = t.input(x.clone());
        let live = net.forward(&mut t, xv, &Quantizer::Live)?;
        let frozen = live.synergy.freeze(&t);
        let a = t.value(live.logits).clone();
        let mut t2 = Tape::new(&net.params);
        let xv = t2.input(x.clone());
        let replay = net.forward(&mut t2, xv, &Quantizer::Frozen(frozen))?;
        let diff = a.data().iter().zip(t2.value(replay.logits).data()).map(|(p, q)| (p - q).abs()).fold(0.0f32, f32::max);
        println!("  logits {:?}, frozen replay max difference {diff:e}", a.shape());
    }
    Ok(())
}
