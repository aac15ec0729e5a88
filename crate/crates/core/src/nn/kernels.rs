//! Raw forward/backward kernels over flat slices. Shapes are validated by the
//! tape before these run.

use super::real::{gemm, Layout, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    /// Cubic kernel edge, 1 or 3.
    pub kernel: usize,
    pub stride: [usize; 3],
}

impl ConvGeom {
    pub const fn pointwise() -> Self {
        ConvGeom {
            kernel: 1,
            stride: [1, 1, 1],
        }
    }

    pub const fn cube3(stride: [usize; 3]) -> Self {
        ConvGeom { kernel: 3, stride }
    }

    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn taps(&self) -> usize {
        self.kernel * self.kernel * self.kernel
    }

    pub fn out_shape(&self, input: [usize; 3]) -> [usize; 3] {
        let p = self.pad();
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = (input[a] + 2 * p - self.kernel) / self.stride[a] + 1;
        }
        out
    }

    fn is_identity_gather(&self) -> bool {
        self.kernel == 1 && self.stride == [1, 1, 1]
    }
}

/// Unfolds one sample (`cin x in_sp`) into a `(cin * taps) x out_voxels` matrix.
pub fn im2col<F: Real>(x: &[F], cin: usize, in_sp: [usize; 3], geom: ConvGeom, col: &mut [F]) {
    let out_sp = geom.out_shape(in_sp);
    let k = geom.kernel;
    let pad = geom.pad() as isize;
    let [nx, ny, nz] = in_sp;
    let [ox_n, oy_n, oz_n] = out_sp;
    let pin = nx * ny * nz;
    let pout = ox_n * oy_n * oz_n;
    let [sx, sy, sz] = geom.stride;
    for ci in 0..cin {
        let src = &x[ci * pin..(ci + 1) * pin];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k * k * k + (kz * k + ky) * k + kx) * pout;
                    let dst = &mut col[row..row + pout];
                    for oz in 0..oz_n {
                        let iz = (oz * sz) as isize + kz as isize - pad;
                        for oy in 0..oy_n {
                            let iy = (oy * sy) as isize + ky as isize - pad;
                            let d = &mut dst[(oz * oy_n + oy) * ox_n..(oz * oy_n + oy + 1) * ox_n];
                            if iz < 0 || iz >= nz as isize || iy < 0 || iy >= ny as isize {
                                d.fill(F::zero());
                                continue;
                            }
                            let base = (iz as usize * ny + iy as usize) * nx;
                            let line = &src[base..base + nx];
                            for (ox, v) in d.iter_mut().enumerate() {
                                let ix = (ox * sx) as isize + kx as isize - pad;
                                *v = if ix >= 0 && ix < nx as isize {
                                    line[ix as usize]
                                } else {
                                    F::zero()
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `dx`.
pub fn col2im<F: Real>(col: &[F], cin: usize, in_sp: [usize; 3], geom: ConvGeom, dx: &mut [F]) {
    let out_sp = geom.out_shape(in_sp);
    let k = geom.kernel;
    let pad = geom.pad() as isize;
    let [nx, ny, nz] = in_sp;
    let [ox_n, oy_n, oz_n] = out_sp;
    let pin = nx * ny * nz;
    let pout = ox_n * oy_n * oz_n;
    let [sx, sy, sz] = geom.stride;
    for ci in 0..cin {
        let dst = &mut dx[ci * pin..(ci + 1) * pin];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k * k * k + (kz * k + ky) * k + kx) * pout;
                    let src = &col[row..row + pout];
                    for oz in 0..oz_n {
                        let iz = (oz * sz) as isize + kz as isize - pad;
                        if iz < 0 || iz >= nz as isize {
                            continue;
                        }
                        for oy in 0..oy_n {
                            let iy = (oy * sy) as isize + ky as isize - pad;
                            if iy < 0 || iy >= ny as isize {
                                continue;
                            }
                            let base = (iz as usize * ny + iy as usize) * nx;
                            let s = &src[(oz * oy_n + oy) * ox_n..(oz * oy_n + oy + 1) * ox_n];
                            for (ox, &v) in s.iter().enumerate() {
                                let ix = (ox * sx) as isize + kx as isize - pad;
                                if ix >= 0 && ix < nx as isize {
                                    dst[base + ix as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `y[n] = W * im2col(x[n]) + b`. `w` is `cout x (cin * taps)`.
#[allow(clippy::too_many_arguments)]
pub fn conv_forward<F: Real>(
    x: &[F],
    batch: usize,
    cin: usize,
    in_sp: [usize; 3],
    w: &[F],
    bias: Option<&[F]>,
    cout: usize,
    geom: ConvGeom,
    y: &mut [F],
) {
    let out_sp = geom.out_shape(in_sp);
    let pin: usize = in_sp.iter().product();
    let pout: usize = out_sp.iter().product();
    let rows = cin * geom.taps();
    let mut col = if geom.is_identity_gather() {
        Vec::new()
    } else {
        vec![F::zero(); rows * pout]
    };
    for n in 0..batch {
        let xn = &x[n * cin * pin..(n + 1) * cin * pin];
        let cols: &[F] = if geom.is_identity_gather() {
            xn
        } else {
            im2col(xn, cin, in_sp, geom, &mut col);
            &col
        };
        let yn = &mut y[n * cout * pout..(n + 1) * cout * pout];
        gemm(
            cout,
            rows,
            pout,
            F::one(),
            w,
            Layout::row_major(rows),
            cols,
            Layout::row_major(pout),
            F::zero(),
            yn,
            Layout::row_major(pout),
        );
        if let Some(b) = bias {
            for (co, &bv) in b.iter().enumerate() {
                for v in &mut yn[co * pout..(co + 1) * pout] {
                    *v += bv;
                }
            }
        }
    }
}

/// Accumulates `dw`, `db` and (optionally) `dx` for [`conv_forward`].
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<F: Real>(
    x: &[F],
    batch: usize,
    cin: usize,
    in_sp: [usize; 3],
    w: &[F],
    cout: usize,
    geom: ConvGeom,
    dy: &[F],
    dw: &mut [F],
    db: Option<&mut [F]>,
    mut dx: Option<&mut [F]>,
) {
    let out_sp = geom.out_shape(in_sp);
    let pin: usize = in_sp.iter().product();
    let pout: usize = out_sp.iter().product();
    let rows = cin * geom.taps();
    let identity = geom.is_identity_gather();
    let mut col = if identity { Vec::new() } else { vec![F::zero(); rows * pout] };
    let mut dcol = if identity || dx.is_none() {
        Vec::new()
    } else {
        vec![F::zero(); rows * pout]
    };
    if let Some(db) = db {
        for n in 0..batch {
            for (co, g) in db.iter_mut().enumerate() {
                let s = &dy[(n * cout + co) * pout..(n * cout + co + 1) * pout];
                *g += s.iter().copied().sum::<F>();
            }
        }
    }
    for n in 0..batch {
        let xn = &x[n * cin * pin..(n + 1) * cin * pin];
        let dyn_ = &dy[n * cout * pout..(n + 1) * cout * pout];
        let cols: &[F] = if identity {
            xn
        } else {
            im2col(xn, cin, in_sp, geom, &mut col);
            &col
        };
        // dW += dY * cols^T
        gemm(
            cout,
            pout,
            rows,
            F::one(),
            dyn_,
            Layout::row_major(pout),
            cols,
            Layout::transposed(pout),
            F::one(),
            dw,
            Layout::row_major(rows),
        );
        if let Some(dx) = dx.as_deref_mut() {
            let dxn = &mut dx[n * cin * pin..(n + 1) * cin * pin];
            if identity {
                gemm(
                    rows,
                    cout,
                    pout,
                    F::one(),
                    w,
                    Layout::transposed(rows),
                    dyn_,
                    Layout::row_major(pout),
                    F::one(),
                    dxn,
                    Layout::row_major(pout),
                );
            } else {
                gemm(
                    rows,
                    cout,
                    pout,
                    F::one(),
                    w,
                    Layout::transposed(rows),
                    dyn_,
                    Layout::row_major(pout),
                    F::zero(),
                    &mut dcol,
                    Layout::row_major(pout),
                );
                col2im(&dcol, cin, in_sp, geom, dxn);
            }
        }
    }
}

/// Output voxel index for input voxel `p_in` and kernel tap `kk` of a
/// transposed convolution whose kernel equals its stride.
#[inline]
fn up_index(p_in: usize, kk: usize, in_sp: [usize; 3], stride: [usize; 3]) -> usize {
    let [nx, ny, _] = in_sp;
    let [sx, sy, sz] = stride;
    let ix = p_in % nx;
    let iy = (p_in / nx) % ny;
    let iz = p_in / (nx * ny);
    let kx = kk % sx;
    let ky = (kk / sx) % sy;
    let kz = kk / (sx * sy);
    let (ox, oy, oz) = (ix * sx + kx, iy * sy + ky, iz * sz + kz);
    let _ = sz;
    ox + nx * sx * (oy + ny * sy * oz)
}

/// Transposed convolution with kernel == stride. `w` is `cin x (cout * taps)`.
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose_forward<F: Real>(
    x: &[F],
    batch: usize,
    cin: usize,
    in_sp: [usize; 3],
    w: &[F],
    bias: Option<&[F]>,
    cout: usize,
    stride: [usize; 3],
    y: &mut [F],
) {
    let taps: usize = stride.iter().product();
    let pin: usize = in_sp.iter().product();
    let pout = pin * taps;
    let mut tmp = vec![F::zero(); cout * taps * pin];
    let map: Vec<usize> = (0..taps)
        .flat_map(|kk| (0..pin).map(move |p| (kk, p)))
        .map(|(kk, p)| up_index(p, kk, in_sp, stride))
        .collect();
    for n in 0..batch {
        let xn = &x[n * cin * pin..(n + 1) * cin * pin];
        gemm(
            cout * taps,
            cin,
            pin,
            F::one(),
            w,
            Layout::transposed(cout * taps),
            xn,
            Layout::row_major(pin),
            F::zero(),
            &mut tmp,
            Layout::row_major(pin),
        );
        let yn = &mut y[n * cout * pout..(n + 1) * cout * pout];
        for co in 0..cout {
            let b = bias.map_or(F::zero(), |b| b[co]);
            let out = &mut yn[co * pout..(co + 1) * pout];
            let src = &tmp[co * taps * pin..(co + 1) * taps * pin];
            for (i, &v) in src.iter().enumerate() {
                out[map[i]] = v + b;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose_backward<F: Real>(
    x: &[F],
    batch: usize,
    cin: usize,
    in_sp: [usize; 3],
    w: &[F],
    cout: usize,
    stride: [usize; 3],
    dy: &[F],
    dw: &mut [F],
    mut db: Option<&mut [F]>,
    mut dx: Option<&mut [F]>,
) {
    let taps: usize = stride.iter().product();
    let pin: usize = in_sp.iter().product();
    let pout = pin * taps;
    let mut dtmp = vec![F::zero(); cout * taps * pin];
    let map: Vec<usize> = (0..taps)
        .flat_map(|kk| (0..pin).map(move |p| (kk, p)))
        .map(|(kk, p)| up_index(p, kk, in_sp, stride))
        .collect();
    for n in 0..batch {
        let dyn_ = &dy[n * cout * pout..(n + 1) * cout * pout];
        for co in 0..cout {
            let g = &dyn_[co * pout..(co + 1) * pout];
            if let Some(db) = db.as_deref_mut() {
                db[co] += g.iter().copied().sum::<F>();
            }
            let dst = &mut dtmp[co * taps * pin..(co + 1) * taps * pin];
            for (i, v) in dst.iter_mut().enumerate() {
                *v = g[map[i]];
            }
        }
        let xn = &x[n * cin * pin..(n + 1) * cin * pin];
        // dW (cin x cout*taps) += x * dtmp^T
        gemm(
            cin,
            pin,
            cout * taps,
            F::one(),
            xn,
            Layout::row_major(pin),
            &dtmp,
            Layout::transposed(pin),
            F::one(),
            dw,
            Layout::row_major(cout * taps),
        );
        if let Some(dx) = dx.as_deref_mut() {
            gemm(
                cin,
                cout * taps,
                pin,
                F::one(),
                w,
                Layout::row_major(cout * taps),
                &dtmp,
                Layout::row_major(pin),
                F::one(),
                &mut dx[n * cin * pin..(n + 1) * cin * pin],
                Layout::row_major(pin),
            );
        }
    }
}

pub const NORM_EPS: f64 = 1e-5;

/// Instance norm over each (sample, channel); returns normalized values and
/// per-(sample, channel) inverse standard deviations.
pub fn instance_norm_forward<F: Real>(
    x: &[F],
    batch: usize,
    channels: usize,
    spatial: usize,
    gamma: &[F],
    beta: &[F],
    y: &mut [F],
) -> (Vec<F>, Vec<F>) {
    let mut xhat = vec![F::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(batch * channels);
    for n in 0..batch {
        for c in 0..channels {
            let r = (n * channels + c) * spatial..(n * channels + c + 1) * spatial;
            let xs = &x[r.clone()];
            let mean = xs.iter().map(|v| v.f64()).sum::<f64>() / spatial as f64;
            let var = xs.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / spatial as f64;
            let istd = 1.0 / (var + NORM_EPS).sqrt();
            inv_std.push(F::of(istd));
            let (m, is) = (F::of(mean), F::of(istd));
            for ((h, out), &v) in xhat[r.clone()].iter_mut().zip(&mut y[r.clone()]).zip(xs) {
                *h = (v - m) * is;
                *out = *h * gamma[c] + beta[c];
            }
        }
    }
    (xhat, inv_std)
}

#[allow(clippy::too_many_arguments)]
pub fn instance_norm_backward<F: Real>(
    dy: &[F],
    xhat: &[F],
    inv_std: &[F],
    batch: usize,
    channels: usize,
    spatial: usize,
    gamma: &[F],
    dgamma: &mut [F],
    dbeta: &mut [F],
    dx: &mut [F],
) {
    let inv_n = 1.0 / spatial as f64;
    for n in 0..batch {
        for c in 0..channels {
            let r = (n * channels + c) * spatial..(n * channels + c + 1) * spatial;
            let g = &dy[r.clone()];
            let h = &xhat[r.clone()];
            let mut sum_g = 0.0;
            let mut sum_gh = 0.0;
            for (&gv, &hv) in g.iter().zip(h) {
                sum_g += gv.f64();
                sum_gh += (gv * hv).f64();
            }
            dbeta[c] += F::of(sum_g);
            dgamma[c] += F::of(sum_gh);
            let gm = gamma[c].f64();
            let istd = inv_std[n * channels + c].f64();
            // dxhat = dy * gamma
            let mean_dh = sum_g * gm * inv_n;
            let mean_dh_h = sum_gh * gm * inv_n;
            for ((d, &gv), &hv) in dx[r.clone()].iter_mut().zip(g).zip(h) {
                let dh = gv.f64() * gm;
                *d += F::of(istd * (dh - mean_dh - hv.f64() * mean_dh_h));
            }
        }
    }
}

/// Multi-head scaled dot-product attention for one sample.
/// `q` is `d x sq`, `k` and `v` are `d x sk` (channel-major); writes
/// `out` (`d x sq`) and softmax probabilities (`heads x sq x sk`).
#[allow(clippy::too_many_arguments)]
pub fn attention_forward<F: Real>(
    q: &[F],
    k: &[F],
    v: &[F],
    d: usize,
    sq: usize,
    sk: usize,
    heads: usize,
    out: &mut [F],
    probs: &mut [F],
) {
    let dh = d / heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    for h in 0..heads {
        let p = &mut probs[h * sq * sk..(h + 1) * sq * sk];
        // scores = Q_h (sq x dh) * K_h^T (dh x sk)
        gemm(
            sq,
            dh,
            sk,
            scale,
            q,
            Layout::transposed(sq).at(h * dh * sq),
            k,
            Layout::row_major(sk).at(h * dh * sk),
            F::zero(),
            p,
            Layout::row_major(sk),
        );
        for row in p.chunks_exact_mut(sk) {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            let inv = F::one() / z;
            for x in row.iter_mut() {
                *x *= inv;
            }
        }
        // out_h (sq x dh) = P (sq x sk) * V_h (sk x dh)
        gemm(
            sq,
            sk,
            dh,
            F::one(),
            p,
            Layout::row_major(sk),
            v,
            Layout::transposed(sk).at(h * dh * sk),
            F::zero(),
            out,
            Layout::transposed(sq).at(h * dh * sq),
        );
    }
}

#[allow(clippy::too_many_arguments)]
pub fn attention_backward<F: Real>(
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &[F],
    dout: &[F],
    d: usize,
    sq: usize,
    sk: usize,
    heads: usize,
    dq: &mut [F],
    dk: &mut [F],
    dv: &mut [F],
) {
    let dh = d / heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let mut ds = vec![F::zero(); sq * sk];
    for h in 0..heads {
        let p = &probs[h * sq * sk..(h + 1) * sq * sk];
        // dV_h (sk x dh) += P^T dO_h
        gemm(
            sk,
            sq,
            dh,
            F::one(),
            p,
            Layout::transposed(sk),
            dout,
            Layout::transposed(sq).at(h * dh * sq),
            F::one(),
            dv,
            Layout::transposed(sk).at(h * dh * sk),
        );
        // dP = dO_h V_h^T
        gemm(
            sq,
            dh,
            sk,
            F::one(),
            dout,
            Layout::transposed(sq).at(h * dh * sq),
            v,
            Layout::row_major(sk).at(h * dh * sk),
            F::zero(),
            &mut ds,
            Layout::row_major(sk),
        );
        for (drow, prow) in ds.chunks_exact_mut(sk).zip(p.chunks_exact(sk)) {
            let dot: F = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
            for (g, &pv) in drow.iter_mut().zip(prow) {
                *g = pv * (*g - dot);
            }
        }
        // dQ_h += scale * dS K_h
        gemm(
            sq,
            sk,
            dh,
            scale,
            &ds,
            Layout::row_major(sk),
            k,
            Layout::transposed(sk).at(h * dh * sk),
            F::one(),
            dq,
            Layout::transposed(sq).at(h * dh * sq),
        );
        // dK_h += scale * dS^T Q_h
        gemm(
            sk,
            sq,
            dh,
            scale,
            &ds,
            Layout::transposed(sk),
            q,
            Layout::transposed(sq).at(h * dh * sq),
            F::one(),
            dk,
            Layout::transposed(sk).at(h * dh * sk),
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct 7-loop convolution used as the oracle.
    #[allow(clippy::too_many_arguments)]
    fn conv_naive(x: &[f64], cin: usize, sp: [usize; 3], w: &[f64], cout: usize, geom: ConvGeom) -> Vec<f64> {
        let o = geom.out_shape(sp);
        let k = geom.kernel as isize;
        let pad = geom.pad() as isize;
        let mut y = vec![0.0; cout * o[0] * o[1] * o[2]];
        for co in 0..cout {
            for oz in 0..o[2] {
                for oy in 0..o[1] {
                    for ox in 0..o[0] {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let ix = (ox * geom.stride[0]) as isize + kx - pad;
                                        let iy = (oy * geom.stride[1]) as isize + ky - pad;
                                        let iz = (oz * geom.stride[2]) as isize + kz - pad;
                                        if ix < 0 || iy < 0 || iz < 0 || ix >= sp[0] as isize || iy >= sp[1] as isize || iz >= sp[2] as isize {
                                            continue;
                                        }
                                        let xi = ci * sp[0] * sp[1] * sp[2]
                                            + ix as usize
                                            + sp[0] * (iy as usize + sp[1] * iz as usize);
                                        let wi = ((co * cin + ci) * (k * k * k) as usize)
                                            + ((kz * k + ky) * k + kx) as usize;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        y[co * o[0] * o[1] * o[2] + ox + o[0] * (oy + o[1] * oz)] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive_for_strides() {
        let sp = [4, 6, 2];
        let (cin, cout) = (2, 3);
        let x: Vec<f64> = (0..cin * 48).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        for geom in [ConvGeom::cube3([1, 1, 1]), ConvGeom::cube3([2, 2, 1]), ConvGeom::cube3([2, 2, 2]), ConvGeom::pointwise()] {
            let w: Vec<f64> = (0..cout * cin * geom.taps()).map(|i| ((i * 5) % 7) as f64 * 0.1 - 0.3).collect();
            let o: usize = geom.out_shape(sp).iter().product();
            let mut y = vec![0.0; cout * o];
            conv_forward(&x, 1, cin, sp, &w, None, cout, geom, &mut y);
            let e = conv_naive(&x, cin, sp, &w, cout, geom);
            for (a, b) in y.iter().zip(&e) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_strided_gather() {
        // <convT(x), y> == <x, convT^*(y)> where the adjoint is the dx path
        let in_sp = [2, 3, 2];
        let stride = [2, 1, 2];
        let (cin, cout) = (3, 2);
        let taps = 4;
        let pin = 12;
        let x: Vec<f64> = (0..cin * pin).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..cin * cout * taps).map(|i| (i as f64 * 0.71).cos()).collect();
        let mut y = vec![0.0; cout * pin * taps];
        conv_transpose_forward(&x, 1, cin, in_sp, &w, None, cout, stride, &mut y);
        let g: Vec<f64> = (0..y.len()).map(|i| (i as f64 * 1.3).sin()).collect();
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; w.len()];
        conv_transpose_backward(&x, 1, cin, in_sp, &w, cout, stride, &g, &mut dw, None, Some(&mut dx));
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        let rhs_w: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_w).abs() < 1e-10);
    }
}
