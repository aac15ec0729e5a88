use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Checks every parameter entry and every input entry of a scalar-valued
/// graph against central differences.
fn check(params: ParamStore<f64>, inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
    let eval = |ps: &ParamStore<f64>, xs: &[Tensor<f64>]| {
        let mut t = Tape::new(ps);
        let vs: Vec<Var> = xs.iter().map(|x| t.input(x.clone())).collect();
        let r = build(&mut t, &vs);
        t.value(r).item()
    };
    let mut t = Tape::new(&params);
    let vs: Vec<Var> = inputs.iter().map(|x| t.input(x.clone())).collect();
    let root = build(&mut t, &vs);
    let g = t.backward(root);
    let h = 1e-5;
    let close = |a: f64, n: f64, what: &str| {
        let tol = 1e-6 + 1e-5 * a.abs().max(n.abs());
        assert!((a - n).abs() <= tol, "{what}: analytic {a} vs numeric {n}");
    };
    for id in params.ids() {
        for j in 0..params.get(id).numel() {
            let mut p = params.clone();
            p.get_mut(id).data_mut()[j] += h;
            let up = eval(&p, &inputs);
            p.get_mut(id).data_mut()[j] -= 2.0 * h;
            let dn = eval(&p, &inputs);
            let a = g.param(id).map_or(0.0, |t| t.data()[j]);
            close(a, (up - dn) / (2.0 * h), params.name(id));
        }
    }
    for (i, x) in inputs.iter().enumerate() {
        for j in 0..x.numel() {
            let mut xs = inputs.clone();
            xs[i].data_mut()[j] += h;
            let up = eval(&params, &xs);
            xs[i].data_mut()[j] -= 2.0 * h;
            let dn = eval(&params, &xs);
            let a = g.input(vs[i]).map_or(0.0, |t| t.data()[j]);
            close(a, (up - dn) / (2.0 * h), "input");
        }
    }
}

/// Projects a feature map to a scalar with fixed pseudo-random weights.
fn probe(t: &mut Tape<f64>, v: Var) -> Var {
    let n = t.value(v).numel();
    let w: Vec<f64> = (0..n).map(|i| ((i * 37 % 17) as f64 - 8.0) / 8.0).collect();
    let target = Tensor::from_vec(t.value(v).shape(), w).unwrap();
    t.squared_error_mean(v, target, 1).unwrap()
}

#[test]
fn conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for geom in [ConvGeom::cube3([1, 1, 1]), ConvGeom::cube3([2, 1, 2]), ConvGeom::pointwise()] {
        let mut ps = ParamStore::new();
        ps.add("w", rand_tensor(&[3, 2, geom.taps()], &mut rng));
        ps.add("b", rand_tensor(&[3], &mut rng));
        let x = rand_tensor(&[2, 2, 4, 3, 2], &mut rng);
        check(ps, vec![x], |t, v| {
            let y = t.conv(v[0], ParamId(0), Some(ParamId(1)), geom).unwrap();
            probe(t, y)
        });
    }
}

#[test]
fn conv_transpose_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ps = ParamStore::new();
    ps.add("w", rand_tensor(&[2, 3 * 4], &mut rng));
    ps.add("b", rand_tensor(&[3], &mut rng));
    let x = rand_tensor(&[2, 2, 2, 3, 2], &mut rng);
    check(ps, vec![x], |t, v| {
        let y = t.conv_transpose(v[0], ParamId(0), Some(ParamId(1)), [2, 1, 2]).unwrap();
        probe(t, y)
    });
}

#[test]
fn norm_and_activation_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ps = ParamStore::new();
    ps.add("g", rand_tensor(&[3], &mut rng));
    ps.add("b", rand_tensor(&[3], &mut rng));
    let x = rand_tensor(&[2, 3, 2, 2, 3], &mut rng);
    check(ps, vec![x], |t, v| {
        let y = t.instance_norm(v[0], ParamId(0), ParamId(1)).unwrap();
        let y = t.leaky_relu(y, 0.01);
        probe(t, y)
    });
}

#[test]
fn attention_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for heads in [1, 2] {
        let q = rand_tensor(&[2, 4, 2, 2, 1], &mut rng);
        let k = rand_tensor(&[2, 4, 3, 1, 1], &mut rng);
        let v = rand_tensor(&[2, 4, 3, 1, 1], &mut rng);
        check(ParamStore::new(), vec![q, k, v], |t, x| {
            let y = t.attention(x[0], x[1], x[2], heads).unwrap();
            let z = t.add(y, x[0]).unwrap();
            probe(t, z)
        });
    }
}

#[test]
fn loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&[1, 1, 3, 2, 2], &mut rng).map(|v| 3.0 * v);
    let y = rand_tensor(&[1, 2, 3, 2, 2], &mut rng);
    let target: Vec<f64> = (0..12).map(|i| (i % 3 == 0) as u8 as f64).collect();
    check(ParamStore::new(), vec![x, y], move |t, v| {
        let bce = t.bce_with_logits(v[0], &target).unwrap();
        let dice = t.soft_dice_loss(v[0], &target, 1e-5).unwrap();
        let cat = t.concat_channels(v[0], v[1]).unwrap();
        let p = probe(t, cat);
        t.weighted_sum(&[(bce, 0.7), (dice, 1.3), (p, 0.1)])
    });
}

#[test]
fn codebook_loss_gradient_moves_rows_towards_inputs() {
    let ps = ParamStore::<f64>::new();
    let mut t = Tape::new(&ps);
    let z = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let cb = Tensor::from_vec(&[3, 2], vec![0.0, 0.0, 1.0, 1.0, 5.0, 5.0]).unwrap();
    let l = t.codebook_loss(z, vec![1, 1], cb);
    // ((0)^2 + 1 + 4 + 9) / 2
    assert!((t.value(l).item() - 7.0).abs() < 1e-12);
    let g = t.backward(l).codebook.unwrap();
    // d/de_1 = (2/2) * ((e-z1) + (e-z2)) = (1-1 + 1-3, 1-2 + 1-4)
    assert_eq!(g.data(), &[0.0, 0.0, -2.0, -4.0, 0.0, 0.0]);
}

#[test]
fn straight_through_passes_identity() {
    let ps = ParamStore::<f64>::new();
    let mut t = Tape::new(&ps);
    let x = t.input(Tensor::from_vec(&[1, 1, 2, 1, 1], vec![0.3, -0.2]).unwrap());
    let y = t.straight_through(x, Tensor::from_vec(&[1, 1, 2, 1, 1], vec![1.0, 0.0]).unwrap()).unwrap();
    let l = t.squared_error_mean(y, Tensor::zeros(&[1, 1, 2, 1, 1]), 1).unwrap();
    let g = t.backward(l);
    // dl/dy = 2y = (2, 0), passed through unchanged
    assert_eq!(g.input(x).unwrap().data(), &[2.0, 0.0]);
}
