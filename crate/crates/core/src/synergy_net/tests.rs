use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::Tape;

fn tiny(options: NetOptions) -> NetConfig {
    NetConfig {
        in_channels: 1,
        channels: vec![4, 8],
        pooling: vec![[0, 0, 0], [1, 1, 1]],
        codebook_size: 8,
        latent_dim: 4,
        heads: 2,
        options,
    }
}

fn noise(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn pyramid_follows_pooling_schedule() {
    let cfg = NetConfig {
        in_channels: 1,
        channels: vec![2, 4, 8],
        pooling: vec![[0, 0, 0], [1, 1, 1], [1, 1, 1]],
        codebook_size: 4,
        latent_dim: 4,
        heads: 2,
        options: NetOptions::default(),
    };
    let net = SynergyUNet::<f32>::new(cfg, 0).unwrap();
    let x = noise(&[1, 1, 32, 32, 16], 1).cast();
    let f = net.features(&x).unwrap();
    assert_eq!(f[2].data.shape(), &[1, 8, 8, 8, 4]);
    assert_eq!(f[1].stage, 1);
    assert_eq!(net.predict(&x).unwrap().shape(), &[1, 1, 32, 32, 16]);
}

#[test]
fn rejects_indivisible_patch() {
    let net = SynergyUNet::<f64>::new(tiny(NetOptions::default()), 0).unwrap();
    assert!(matches!(
        net.predict(&Tensor::zeros(&[1, 1, 8, 7, 8])),
        Err(Error::ShapeIncompatible(_))
    ));
}

#[test]
fn batch_items_are_independent() {
    let net = SynergyUNet::<f64>::new(tiny(NetOptions::default()), 3).unwrap();
    let one = noise(&[1, 1, 8, 8, 8], 4);
    let two = Tensor::concat_channels(&[&one, &one]).unwrap().reshape(&[2, 1, 8, 8, 8]).unwrap();
    let y = net.predict(&two).unwrap();
    let (a, b) = y.data().split_at(512);
    assert_eq!(a, b);
    assert!(y.is_finite());
    assert_eq!(net.predict(&one).unwrap().data(), a);
}

#[test]
fn zero_input_gives_finite_logits() {
    let net = SynergyUNet::<f32>::new(tiny(NetOptions::default()), 3).unwrap();
    assert!(net.predict(&Tensor::zeros(&[1, 1, 8, 8, 8])).unwrap().is_finite());
}

#[test]
fn attention_rows_are_distributions() {
    let net = SynergyUNet::<f64>::new(tiny(NetOptions::default()), 5).unwrap();
    let mut t = Tape::new(&net.params);
    let x = t.input(noise(&[2, 1, 8, 8, 8], 6));
    let pass = net.forward(&mut t, x, &Quantizer::Live).unwrap();
    let p = t.attention_probs(pass.synergy.attention).unwrap();
    // 2 samples, 2 heads, 64 queries, 64 keys
    assert_eq!(p.len(), 2 * 2 * 64 * 64);
    for row in p.chunks_exact(64) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn constant_keys_give_closed_form_fusion() {
    let net = SynergyUNet::<f64>::new(tiny(NetOptions::default()), 7).unwrap();
    let mut t = Tape::new(&net.params);
    let f1 = t.input(noise(&[1, 4, 2, 2, 2], 8));
    let c = [0.3, -1.2, 0.7, 2.0];
    let f2 = t.input(Tensor::from_vec(&[1, 4, 2, 2, 2], c.iter().flat_map(|&v| [v; 8]).collect()).unwrap());
    let (fused, _) = net.cross_attend(&mut t, f1, f2).unwrap();
    // fused = f1 + Wo (Wv c + bv) + bo at every location
    let ps = &net.params;
    let get = |n: &str| ps.get(ps.find(n).unwrap()).data().to_vec();
    let (wv, bv, wo, bo) = (
        get("bottleneck.attn.v.w"),
        get("bottleneck.attn.v.b"),
        get("bottleneck.attn.out.w"),
        get("bottleneck.attn.out.b"),
    );
    let v: Vec<f64> = (0..4).map(|i| (0..4).map(|j| wv[i * 4 + j] * c[j]).sum::<f64>() + bv[i]).collect();
    let o: Vec<f64> = (0..4).map(|i| (0..4).map(|j| wo[i * 4 + j] * v[j]).sum::<f64>() + bo[i]).collect();
    for ch in 0..4 {
        for p in 0..8 {
            let got = t.value(fused).channel(0, ch)[p];
            let want = t.value(f1).channel(0, ch)[p] + o[ch];
            assert!((got - want).abs() < 1e-12);
        }
    }
}

#[test]
fn cross_attend_rejects_mismatched_maps() {
    let net = SynergyUNet::<f64>::new(tiny(NetOptions::default()), 7).unwrap();
    let mut t = Tape::new(&net.params);
    let a = t.input(Tensor::zeros(&[1, 4, 2, 2, 2]));
    let b = t.input(Tensor::zeros(&[1, 4, 2, 2, 1]));
    assert!(matches!(net.cross_attend(&mut t, a, b), Err(Error::ShapeIncompatible(_))));
}

#[test]
fn codebook_matching_encoder_output_has_zero_commitment() {
    let mut net = SynergyUNet::<f64>::new(tiny(NetOptions::default()), 9).unwrap();
    // a 2^3 input leaves a single bottleneck location
    let x = noise(&[1, 1, 2, 2, 2], 10);
    let mut t = Tape::new(&net.params);
    let xv = t.input(x.clone());
    let skips = net.encode(&mut t, xv).unwrap();
    let s = net.bottleneck(&mut t, skips[1], &Quantizer::Live).unwrap();
    let rows = locations_as_rows(t.value(s.z)).unwrap();
    drop(t);
    net.codebook.embeddings.data_mut()[..4].copy_from_slice(&rows[..4]);
    let out = net.synergy(&x).unwrap();
    assert!(out.indices.iter().all(|&i| i == 0));
    assert!(out.commit_loss < 1e-20);
    assert_eq!(out.perplexity, 1.0);
}

#[test]
fn codebook_row_permutation_is_invisible() {
    let net = SynergyUNet::<f64>::new(tiny(NetOptions::default()), 11).unwrap();
    let x = noise(&[1, 1, 8, 8, 8], 12);
    let base = net.synergy(&x).unwrap();
    let mut permuted = net.clone();
    let perm = [3, 7, 0, 5, 1, 6, 2, 4];
    let d = 4;
    for (new, &old) in perm.iter().enumerate() {
        permuted.codebook.embeddings.data_mut()[new * d..(new + 1) * d].copy_from_slice(net.codebook.row(old));
    }
    let out = permuted.synergy(&x).unwrap();
    assert_eq!(out.fused, base.fused);
    assert_eq!(out.vq_loss, base.vq_loss);
    assert_eq!(out.commit_loss, base.commit_loss);
    for (&a, &b) in out.indices.iter().zip(&base.indices) {
        assert_eq!(perm[a], b);
    }
}

#[test]
fn aux_loss_with_zero_beta_is_vq_only() {
    let net = SynergyUNet::<f64>::new(tiny(NetOptions::default()), 13).unwrap();
    let mut t = Tape::new(&net.params);
    let x = t.input(noise(&[1, 1, 8, 8, 8], 14));
    let pass = net.forward(&mut t, x, &Quantizer::Live).unwrap();
    let aux = pass.synergy.aux_loss(&mut t, 0.0);
    assert_eq!(t.value(aux).item(), t.value(pass.synergy.vq_loss).item());
}

#[test]
fn reverse_attention_direction_runs() {
    let opts = NetOptions {
        attention: AttentionDirection::DiscreteQueries,
        ..NetOptions::default()
    };
    let net = SynergyUNet::<f32>::new(tiny(opts), 1).unwrap();
    assert!(net.predict(&noise(&[1, 1, 8, 8, 8], 2).cast()).unwrap().is_finite());
}

/// Loss used by the gradient checks: BCE + Dice + aux terms.
fn total_loss(net: &SynergyUNet<f64>, t: &mut Tape<f64>, x: &Tensor<f64>, y: &[f64], q: &Quantizer<f64>) -> (Var, SynergyVars) {
    let xv = t.input(x.clone());
    let pass = net.forward(t, xv, q).unwrap();
    let bce = t.bce_with_logits(pass.logits, y).unwrap();
    let dice = t.soft_dice_loss(pass.logits, y, 1e-5).unwrap();
    let s = pass.synergy;
    let root = t.weighted_sum(&[(bce, 1.0), (dice, 1.0), (s.vq_loss, 1.0), (s.commit_loss, 0.25)]);
    (root, s)
}

#[test]
fn whole_network_gradient_matches_finite_differences() {
    let net = SynergyUNet::<f64>::new(tiny(NetOptions::default()), 21).unwrap();
    let x = noise(&[1, 1, 8, 8, 8], 22);
    let y: Vec<f64> = (0..512).map(|i| ((i / 8) % 3 == 0) as u8 as f64).collect();
    let mut t = Tape::new(&net.params);
    let (root, s) = total_loss(&net, &mut t, &x, &y, &Quantizer::Live);
    let frozen = Quantizer::Frozen(s.freeze(&t));
    let g = t.backward(root);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let h = 1e-5;
    for _ in 0..12 {
        let id = ParamId(rng.random_range(0..net.params.len()));
        let j = rng.random_range(0..net.params.get(id).numel());
        let eval = |delta: f64| {
            let mut n2 = net.clone();
            n2.params.get_mut(id).data_mut()[j] += delta;
            let mut t2 = Tape::new(&n2.params);
            let (r, _) = total_loss(&n2, &mut t2, &x, &y, &frozen);
            t2.value(r).item()
        };
        let num = (eval(h) - eval(-h)) / (2.0 * h);
        let ana = g.param(id).map_or(0.0, |t| t.data()[j]);
        let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-6);
        assert!(rel < 1e-4, "{}[{j}]: {ana} vs {num}", net.params.name(id));
    }
}

#[test]
fn gradient_codebook_mode_reaches_codes() {
    let opts = NetOptions {
        codebook_update: CodebookUpdate::Gradient,
        ..NetOptions::default()
    };
    let net = SynergyUNet::<f64>::new(tiny(opts), 31).unwrap();
    let x = noise(&[1, 1, 8, 8, 8], 32);
    let mut t = Tape::new(&net.params);
    let (root, s) = total_loss(&net, &mut t, &x, &[0.0; 512], &Quantizer::Live);
    let g = t.backward(root).codebook.expect("codebook gradient");
    for (k, row) in g.data().chunks_exact(4).enumerate() {
        let used = s.indices.contains(&k);
        assert_eq!(row.iter().any(|&v| v != 0.0), used);
    }
}

#[test]
fn checkpoint_round_trip() {
    let plan = crate::autoconfig::PlanConfig {
        variant: crate::autoconfig::Variant::Fullres3d,
        patch_size: [8, 8, 8],
        batch_size: 1,
        n_stages: 2,
        channels_per_stage: vec![4, 8],
        pooling_per_axis_per_stage: vec![[0, 0, 0], [1, 1, 1]],
        lowres_scale: None,
        codebook_size: 8,
        latent_dim: 4,
        attention_heads: 2,
        target_shape: [8, 8, 8],
    };
    let mut net = SynergyUNet::<f32>::from_plan(&plan, 1, NetOptions::default(), 5).unwrap();
    net.codebook.usage_ema[3] = 0.25;
    let ck = Checkpoint::from_model(&CheckpointModel::Single(net.clone()), &plan, 7, 0.5);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("model.json");
    ck.save(&p).unwrap();
    let back = Checkpoint::load(&p).unwrap();
    assert_eq!(back, ck);
    let CheckpointModel::Single(restored) = back.model().unwrap() else {
        panic!("expected a single network")
    };
    assert_eq!(restored.params, net.params);
    assert_eq!(restored.codebook, net.codebook);

    let mut bad = ck.clone();
    bad.params.remove("net.head.w");
    assert!(matches!(bad.model(), Err(Error::Checkpoint(_))));

    let lowres = net.clone();
    let fullres = SynergyUNet::<f32>::from_plan(&plan, 2, NetOptions::default(), 6).unwrap();
    let cascade = CascadeModel::new(lowres, fullres, [2, 2, 1]).unwrap();
    let ck = Checkpoint::from_model(&CheckpointModel::Cascade(cascade), &plan, 1, 0.1);
    assert!(ck.params.keys().any(|k| k.starts_with("fullres.enc.0.0")));
    let CheckpointModel::Cascade(c) = ck.model().unwrap() else {
        panic!("expected a cascade")
    };
    assert_eq!(c.lowres_scale, [2, 2, 1]);
    assert_eq!(c.fullres.config.in_channels, 2);
}
