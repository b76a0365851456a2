//! Layer primitives with explicit backward passes.
//!
//! Every convolution is stride 1 with `k / 2` zero padding; downsampling is
//! done only by the 2x2 stride-2 pools.

use crate::error::{CnnError, Result};
use crate::tensor::{lit, Scalar, Tensor4};

pub const BN_EPS: f64 = 1e-5;

/// Output rows `o` for which `o + d` lies in `[0, len)`.
#[inline]
fn valid_range(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).clamp(0, len as isize) as usize;
    (lo, hi.max(lo))
}

fn check_conv(x: &Tensor4<impl Scalar>, w_len: usize, out_ch: usize, k: usize) -> Result<()> {
    if k.is_multiple_of(2) {
        return Err(CnnError::Shape(format!("kernel size {k} must be odd")));
    }
    let expect = out_ch * x.channels() * k * k;
    if w_len != expect {
        return Err(CnnError::Shape(format!(
            "conv weight has {w_len} values, expected {out_ch}x{}x{k}x{k}",
            x.channels()
        )));
    }
    Ok(())
}

/// Patch matrix of `x`: row `(ic * k + ky) * k + kx`, column
/// `s * h * w + oy * w + ox`, zero where the window leaves the image.
fn im2col<F: Scalar>(x: &Tensor4<F>, k: usize) -> Vec<F> {
    let [n, in_ch, h, wd] = x.shape();
    let (hw, np) = (h * wd, n * h * wd);
    let pad = (k / 2) as isize;
    let mut col = vec![F::zero(); in_ch * k * k * np];
    for ic in 0..in_ch {
        for ky in 0..k {
            let dy = ky as isize - pad;
            let (oy0, oy1) = valid_range(h, dy);
            for kx in 0..k {
                let dx = kx as isize - pad;
                let (ox0, ox1) = valid_range(wd, dx);
                let row = ((ic * k + ky) * k + kx) * np;
                for s in 0..n {
                    let inp = x.plane(s, ic);
                    for oy in oy0..oy1 {
                        let iy = (oy as isize + dy) as usize;
                        let ix0 = (ox0 as isize + dx) as usize;
                        let dst = row + s * hw + oy * wd;
                        col[dst + ox0..dst + ox1]
                            .copy_from_slice(&inp[iy * wd + ix0..iy * wd + ix0 + (ox1 - ox0)]);
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: sums patch-matrix entries back onto the image.
fn col2im<F: Scalar>(col: &[F], shape: [usize; 4], k: usize) -> Tensor4<F> {
    let [n, in_ch, h, wd] = shape;
    let (hw, np) = (h * wd, n * h * wd);
    let pad = (k / 2) as isize;
    let mut x = Tensor4::zeros(shape);
    for ic in 0..in_ch {
        for ky in 0..k {
            let dy = ky as isize - pad;
            let (oy0, oy1) = valid_range(h, dy);
            for kx in 0..k {
                let dx = kx as isize - pad;
                let (ox0, ox1) = valid_range(wd, dx);
                let row = ((ic * k + ky) * k + kx) * np;
                for s in 0..n {
                    let plane = x.plane_mut(s, ic);
                    for oy in oy0..oy1 {
                        let iy = (oy as isize + dy) as usize;
                        let ix0 = (ox0 as isize + dx) as usize;
                        let src = row + s * hw + oy * wd;
                        for (d, &c) in plane[iy * wd + ix0..iy * wd + ix0 + (ox1 - ox0)]
                            .iter_mut()
                            .zip(&col[src + ox0..src + ox1])
                        {
                            *d += c;
                        }
                    }
                }
            }
        }
    }
    x
}

#[inline]
fn axpy<F: Scalar>(y: &mut [F], a: F, x: &[F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with eight independent partial sums.
fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut total = ra.iter().zip(rb).fold(F::zero(), |t, (&x, &y)| t + x * y);
    for v in acc {
        total += v;
    }
    total
}

/// `k x k` convolution, weight layout `[out, in, k, k]`.
pub fn conv2d_forward<F: Scalar>(
    x: &Tensor4<F>,
    w: &[F],
    out_ch: usize,
    k: usize,
    bias: Option<&[F]>,
) -> Result<Tensor4<F>> {
    check_conv(x, w.len(), out_ch, k)?;
    let [n, in_ch, h, wd] = x.shape();
    let (hw, np, kk) = (h * wd, n * h * wd, in_ch * k * k);
    let col = im2col(x, k);
    let mut y = Tensor4::zeros([n, out_ch, h, wd]);
    let mut acc = vec![F::zero(); np];
    for oc in 0..out_ch {
        acc.fill(bias.map_or(F::zero(), |b| b[oc]));
        for (j, &wv) in w[oc * kk..(oc + 1) * kk].iter().enumerate() {
            axpy(&mut acc, wv, &col[j * np..(j + 1) * np]);
        }
        for s in 0..n {
            y.plane_mut(s, oc)
                .copy_from_slice(&acc[s * hw..(s + 1) * hw]);
        }
    }
    Ok(y)
}

/// Gradients of [`conv2d_forward`]: `(dx, dw, db)`.
pub fn conv2d_backward<F: Scalar>(
    x: &Tensor4<F>,
    w: &[F],
    out_ch: usize,
    k: usize,
    dy: &Tensor4<F>,
) -> Result<(Tensor4<F>, Vec<F>, Vec<F>)> {
    check_conv(x, w.len(), out_ch, k)?;
    let [n, in_ch, h, wd] = x.shape();
    if dy.shape() != [n, out_ch, h, wd] {
        return Err(CnnError::Shape(format!(
            "conv upstream gradient {:?} does not match output {:?}",
            dy.shape(),
            [n, out_ch, h, wd]
        )));
    }
    let (hw, np, kk) = (h * wd, n * h * wd, in_ch * k * k);
    let col = im2col(x, k);
    // upstream gradient as [out][sample, pixel]
    let mut g = vec![F::zero(); out_ch * np];
    for oc in 0..out_ch {
        for s in 0..n {
            g[oc * np + s * hw..oc * np + (s + 1) * hw].copy_from_slice(dy.plane(s, oc));
        }
    }
    let db = (0..out_ch)
        .map(|oc| {
            g[oc * np..(oc + 1) * np]
                .iter()
                .fold(F::zero(), |a, &b| a + b)
        })
        .collect();
    let mut dw = vec![F::zero(); w.len()];
    for oc in 0..out_ch {
        let go = &g[oc * np..(oc + 1) * np];
        for j in 0..kk {
            dw[oc * kk + j] = dot(go, &col[j * np..(j + 1) * np]);
        }
    }
    let mut dcol = col;
    for j in 0..kk {
        let row = &mut dcol[j * np..(j + 1) * np];
        row.fill(F::zero());
        for oc in 0..out_ch {
            axpy(row, w[oc * kk + j], &g[oc * np..(oc + 1) * np]);
        }
    }
    Ok((col2im(&dcol, x.shape(), k), dw, db))
}

/// Values kept by a training-mode batch norm for its backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<F> {
    pub xhat: Tensor4<F>,
    pub inv_std: Vec<F>,
    pub mean: Vec<F>,
    /// Biased batch variance.
    pub var: Vec<F>,
}

/// Per-channel batch normalisation over `(batch, height, width)` with batch
/// statistics.
pub fn batch_norm_train<F: Scalar>(
    x: &Tensor4<F>,
    gamma: &[F],
    beta: &[F],
) -> Result<(Tensor4<F>, BnCache<F>)> {
    let [n, c, h, w] = x.shape();
    if gamma.len() != c || beta.len() != c {
        return Err(CnnError::Shape(format!(
            "batch norm over {c} channels got {} scales",
            gamma.len()
        )));
    }
    let count = lit::<F>((n * h * w) as f64);
    let eps = lit::<F>(BN_EPS);
    let mut y = Tensor4::zeros(x.shape());
    let mut xhat = Tensor4::zeros(x.shape());
    let (mut means, mut vars, mut inv) =
        (vec![F::zero(); c], vec![F::zero(); c], vec![F::zero(); c]);
    for ch in 0..c {
        let mut sum = F::zero();
        for s in 0..n {
            sum += x.plane(s, ch).iter().fold(F::zero(), |a, &b| a + b);
        }
        let mean = sum / count;
        let mut sq = F::zero();
        for s in 0..n {
            sq += x
                .plane(s, ch)
                .iter()
                .fold(F::zero(), |a, &b| a + (b - mean) * (b - mean));
        }
        let var = sq / count;
        let is = F::one() / (var + eps).sqrt();
        for s in 0..n {
            let src = x.plane(s, ch).to_vec();
            let xh = xhat.plane_mut(s, ch);
            for (o, &v) in xh.iter_mut().zip(&src) {
                *o = (v - mean) * is;
            }
            let xh = xhat.plane(s, ch).to_vec();
            for (o, &v) in y.plane_mut(s, ch).iter_mut().zip(&xh) {
                *o = gamma[ch] * v + beta[ch];
            }
        }
        means[ch] = mean;
        vars[ch] = var;
        inv[ch] = is;
    }
    Ok((
        y,
        BnCache {
            xhat,
            inv_std: inv,
            mean: means,
            var: vars,
        },
    ))
}

/// Gradients of [`batch_norm_train`]: `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward<F: Scalar>(
    dy: &Tensor4<F>,
    cache: &BnCache<F>,
    gamma: &[F],
) -> (Tensor4<F>, Vec<F>, Vec<F>) {
    let [n, c, h, w] = dy.shape();
    let count = lit::<F>((n * h * w) as f64);
    let mut dx = Tensor4::zeros(dy.shape());
    let mut dgamma = vec![F::zero(); c];
    let mut dbeta = vec![F::zero(); c];
    for ch in 0..c {
        let (mut sdy, mut sdyx) = (F::zero(), F::zero());
        for s in 0..n {
            for (&g, &xh) in dy.plane(s, ch).iter().zip(cache.xhat.plane(s, ch)) {
                sdy += g;
                sdyx += g * xh;
            }
        }
        dbeta[ch] = sdy;
        dgamma[ch] = sdyx;
        let scale = gamma[ch] * cache.inv_std[ch] / count;
        for s in 0..n {
            let g = dy.plane(s, ch).to_vec();
            let xh = cache.xhat.plane(s, ch).to_vec();
            for ((o, &gv), &xv) in dx.plane_mut(s, ch).iter_mut().zip(&g).zip(&xh) {
                *o = scale * (count * gv - sdy - xv * sdyx);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Batch norm with frozen running statistics.
pub fn batch_norm_eval<F: Scalar>(
    x: &Tensor4<F>,
    gamma: &[F],
    beta: &[F],
    mean: &[F],
    var: &[F],
) -> Result<Tensor4<F>> {
    let [n, c, _, _] = x.shape();
    if gamma.len() != c || mean.len() != c {
        return Err(CnnError::Shape(format!(
            "batch norm over {c} channels got {} scales",
            gamma.len()
        )));
    }
    let eps = lit::<F>(BN_EPS);
    let mut y = x.clone();
    for ch in 0..c {
        let is = F::one() / (var[ch] + eps).sqrt();
        for s in 0..n {
            for v in y.plane_mut(s, ch) {
                *v = gamma[ch] * (*v - mean[ch]) * is + beta[ch];
            }
        }
    }
    Ok(y)
}

pub fn relu_forward<F: Scalar>(x: &Tensor4<F>) -> Tensor4<F> {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v <= F::zero() {
            *v = F::zero();
        }
    }
    y
}

/// Gradient through ReLU given its output (`y > 0` marks the active units).
pub fn relu_backward<F: Scalar>(dy: &Tensor4<F>, y: &Tensor4<F>) -> Tensor4<F> {
    let mut dx = dy.clone();
    for (d, &o) in dx.data_mut().iter_mut().zip(y.data()) {
        if o <= F::zero() {
            *d = F::zero();
        }
    }
    dx
}

fn check_even(x: &Tensor4<impl Scalar>, what: &str) -> Result<()> {
    if !x.height().is_multiple_of(2)
        || !x.width().is_multiple_of(2)
        || x.height() < 2
        || x.width() < 2
    {
        return Err(CnnError::Shape(format!(
            "{what} needs even spatial dims, got {}x{}",
            x.height(),
            x.width()
        )));
    }
    Ok(())
}

/// 2x2 stride-2 max pool. Also returns, per output, the flat input index of
/// the winner (first maximum in row-major window order).
pub fn max_pool2_forward<F: Scalar>(x: &Tensor4<F>) -> Result<(Tensor4<F>, Vec<u32>)> {
    check_even(x, "max pool")?;
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor4::zeros([n, c, oh, ow]);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for s in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = x.index(s, ch, 2 * oy, 2 * ox);
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = x.index(s, ch, 2 * oy + dy, 2 * ox + dx);
                        if x.data()[i] > x.data()[best] {
                            best = i;
                        }
                    }
                    let o = y.index(s, ch, oy, ox);
                    y.data_mut()[o] = x.data()[best];
                    arg.push(best as u32);
                }
            }
        }
    }
    Ok((y, arg))
}

pub fn max_pool2_backward<F: Scalar>(
    dy: &Tensor4<F>,
    argmax: &[u32],
    in_shape: [usize; 4],
) -> Tensor4<F> {
    let mut dx = Tensor4::zeros(in_shape);
    for (&g, &i) in dy.data().iter().zip(argmax) {
        dx.data_mut()[i as usize] += g;
    }
    dx
}

/// 2x2 stride-2 average pool.
pub fn avg_pool2_forward<F: Scalar>(x: &Tensor4<F>) -> Result<Tensor4<F>> {
    check_even(x, "average pool")?;
    let [n, c, h, w] = x.shape();
    let quarter = lit::<F>(0.25);
    let mut y = Tensor4::zeros([n, c, h / 2, w / 2]);
    for s in 0..n {
        for ch in 0..c {
            for oy in 0..h / 2 {
                for ox in 0..w / 2 {
                    let v = x.at(s, ch, 2 * oy, 2 * ox)
                        + x.at(s, ch, 2 * oy, 2 * ox + 1)
                        + x.at(s, ch, 2 * oy + 1, 2 * ox)
                        + x.at(s, ch, 2 * oy + 1, 2 * ox + 1);
                    let o = y.index(s, ch, oy, ox);
                    y.data_mut()[o] = v * quarter;
                }
            }
        }
    }
    Ok(y)
}

pub fn avg_pool2_backward<F: Scalar>(dy: &Tensor4<F>, in_shape: [usize; 4]) -> Tensor4<F> {
    let quarter = lit::<F>(0.25);
    let mut dx = Tensor4::zeros(in_shape);
    let [n, c, oh, ow] = dy.shape();
    for s in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = dy.at(s, ch, oy, ox) * quarter;
                    for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = dx.index(s, ch, 2 * oy + a, 2 * ox + b);
                        dx.data_mut()[i] += g;
                    }
                }
            }
        }
    }
    dx
}

/// Global average pool to an `n x c` row-major matrix.
pub fn global_avg_pool_forward<F: Scalar>(x: &Tensor4<F>) -> Vec<F> {
    let [n, c, h, w] = x.shape();
    let area = lit::<F>((h * w) as f64);
    let mut out = Vec::with_capacity(n * c);
    for s in 0..n {
        for ch in 0..c {
            out.push(x.plane(s, ch).iter().fold(F::zero(), |a, &b| a + b) / area);
        }
    }
    out
}

pub fn global_avg_pool_backward<F: Scalar>(dy: &[F], in_shape: [usize; 4]) -> Tensor4<F> {
    let [n, c, h, w] = in_shape;
    let area = lit::<F>((h * w) as f64);
    let mut dx = Tensor4::zeros(in_shape);
    for s in 0..n {
        for ch in 0..c {
            let g = dy[s * c + ch] / area;
            dx.plane_mut(s, ch).iter_mut().for_each(|v| *v = g);
        }
    }
    dx
}

/// `y = x W^T + b` for `x: n x d`, `W: k x d`, `b: k`.
pub fn linear_forward<F: Scalar>(x: &[F], n: usize, w: &[F], b: &[F]) -> Result<Vec<F>> {
    let k = b.len();
    if n == 0 || !x.len().is_multiple_of(n) || w.len() != k * (x.len() / n) {
        return Err(CnnError::Shape(format!(
            "linear layer: input {} for batch {n}, weight {}, bias {k}",
            x.len(),
            w.len()
        )));
    }
    let d = x.len() / n;
    let mut y = Vec::with_capacity(n * k);
    for s in 0..n {
        let row = &x[s * d..(s + 1) * d];
        for j in 0..k {
            let wr = &w[j * d..(j + 1) * d];
            y.push(row.iter().zip(wr).fold(b[j], |a, (&p, &q)| a + p * q));
        }
    }
    Ok(y)
}

/// Gradients of [`linear_forward`]: `(dx, dw, db)`.
pub fn linear_backward<F: Scalar>(
    x: &[F],
    n: usize,
    w: &[F],
    dy: &[F],
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let d = x.len() / n;
    let k = dy.len() / n;
    let mut dx = vec![F::zero(); n * d];
    let mut dw = vec![F::zero(); k * d];
    let mut db = vec![F::zero(); k];
    for s in 0..n {
        for j in 0..k {
            let g = dy[s * k + j];
            db[j] += g;
            for i in 0..d {
                dw[j * d + i] += g * x[s * d + i];
                dx[s * d + i] += g * w[j * d + i];
            }
        }
    }
    (dx, dw, db)
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the
/// logits.
pub fn softmax_cross_entropy<F: Scalar>(
    logits: &[F],
    n: usize,
    labels: &[usize],
) -> Result<(F, Vec<F>)> {
    if n == 0 || labels.len() != n || !logits.len().is_multiple_of(n) {
        return Err(CnnError::Shape(format!(
            "{} logits for {n} samples and {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let k = logits.len() / n;
    for (s, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(CnnError::Label {
                sample: s,
                label: l,
                classes: k,
            });
        }
    }
    let inv_n = F::one() / lit::<F>(n as f64);
    let mut loss = F::zero();
    let mut grad = vec![F::zero(); logits.len()];
    for s in 0..n {
        let row = &logits[s * k..(s + 1) * k];
        let mx = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let z = row.iter().fold(F::zero(), |a, &b| a + (b - mx).exp());
        let lse = mx + z.ln();
        loss += lse - row[labels[s]];
        for j in 0..k {
            grad[s * k + j] = (row[j] - lse).exp() * inv_n;
        }
        grad[s * k + labels[s]] -= inv_n;
    }
    Ok((loss * inv_n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_objective, FnObjective};
    use poolmix::rng::{Purpose, Stream};

    fn randn(rng: &mut Stream, len: usize) -> Vec<f64> {
        (0..len).map(|_| rng.standard_normal()).collect()
    }

    fn t(shape: [usize; 4], data: Vec<f64>) -> Tensor4<f64> {
        Tensor4::from_vec(shape, data).unwrap()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn identity_1x1_conv() {
        let x = t([1, 1, 3, 3], (0..9).map(f64::from).collect());
        let y = conv2d_forward(&x, &[1.0], 1, 1, Some(&[0.0])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = Stream::new(4, Purpose::GradCheck);
        let x = t([1, 2, 4, 5], randn(&mut rng, 40));
        let w = randn(&mut rng, 3 * 2 * 9);
        let y = conv2d_forward(&x, &w, 3, 3, None).unwrap();
        for oc in 0..3 {
            for oy in 0..4 {
                for ox in 0..5 {
                    let mut s = 0.0;
                    for ic in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = oy as isize + ky as isize - 1;
                                let ix = ox as isize + kx as isize - 1;
                                if (0..4).contains(&iy) && (0..5).contains(&ix) {
                                    s += w[((oc * 2 + ic) * 3 + ky) * 3 + kx]
                                        * x.at(0, ic, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    assert!((y.at(0, oc, oy, ox) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pools_and_gap() {
        let x = t([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let (y, arg) = max_pool2_forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
        assert_eq!(avg_pool2_forward(&x).unwrap().data(), &[2.5]);
        let k = t([2, 3, 4, 4], vec![1.75; 96]);
        assert!(global_avg_pool_forward(&k).iter().all(|&v| v == 1.75));
        assert!(max_pool2_forward(&t([1, 1, 3, 2], vec![0.0; 6])).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let (loss, g) = softmax_cross_entropy(&[0.0; 4], 1, &[2]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
        assert_eq!(g, vec![0.25, 0.25, -0.75, 0.25]);
        assert!(softmax_cross_entropy(&[0.0; 4], 1, &[4]).is_err());
    }

    fn conv_objective(k: usize, bias: bool) -> f64 {
        let mut rng = Stream::new(11 + k as u64, Purpose::GradCheck);
        let shape = [2, 2, 4, 4];
        let (nx, nw, nb) = (64, 3 * 2 * k * k, if bias { 3 } else { 0 });
        let r = randn(&mut rng, 2 * 3 * 16);
        let theta = randn(&mut rng, nx + nw + nb);
        let split = move |th: &[f64]| {
            (
                t(shape, th[..nx].to_vec()),
                th[nx..nx + nw].to_vec(),
                th[nx + nw..].to_vec(),
            )
        };
        let r2 = r.clone();
        let obj = FnObjective::new(
            theta,
            move |th: &[f64]| {
                let (x, w, b) = split(th);
                let y = conv2d_forward(&x, &w, 3, k, bias.then_some(&b[..])).unwrap();
                (dot(y.data(), &r), 0)
            },
            move |th: &[f64]| {
                let (x, w, _) = split(th);
                let dy = t([2, 3, 4, 4], r2.clone());
                let (dx, dw, db) = conv2d_backward(&x, &w, 3, k, &dy).unwrap();
                let mut g = dx.into_vec();
                g.extend(dw);
                if bias {
                    g.extend(db);
                }
                g
            },
        );
        check_objective(obj, 1e-5, 400, &mut rng).max_rel_error
    }

    #[test]
    fn gradcheck_conv3x3() {
        assert!(conv_objective(3, true) < 1e-7);
    }

    #[test]
    fn gradcheck_conv1x1() {
        assert!(conv_objective(1, false) < 1e-7);
    }

    #[test]
    fn gradcheck_batch_norm() {
        let mut rng = Stream::new(21, Purpose::GradCheck);
        let shape = [3, 2, 2, 3];
        let nx = 36;
        let r = randn(&mut rng, nx);
        let theta = randn(&mut rng, nx + 4);
        let r2 = r.clone();
        let obj = FnObjective::new(
            theta,
            move |th: &[f64]| {
                let x = t(shape, th[..nx].to_vec());
                let (y, _) = batch_norm_train(&x, &th[nx..nx + 2], &th[nx + 2..]).unwrap();
                (dot(y.data(), &r), 0)
            },
            move |th: &[f64]| {
                let x = t(shape, th[..nx].to_vec());
                let (_, cache) = batch_norm_train(&x, &th[nx..nx + 2], &th[nx + 2..]).unwrap();
                let (dx, dg, db) =
                    batch_norm_backward(&t(shape, r2.clone()), &cache, &th[nx..nx + 2]);
                let mut g = dx.into_vec();
                g.extend(dg);
                g.extend(db);
                g
            },
        );
        let rep = check_objective(obj, 1e-5, 400, &mut rng);
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
        assert_eq!(rep.checked, 40);
    }

    #[test]
    fn batch_norm_eval_with_batch_stats_matches_train() {
        let mut rng = Stream::new(2, Purpose::GradCheck);
        let x = t([4, 3, 2, 2], randn(&mut rng, 48));
        let (g, b) = (vec![1.5, 0.5, -1.0], vec![0.1, 0.2, 0.3]);
        let (y, c) = batch_norm_train(&x, &g, &b).unwrap();
        let y2 = batch_norm_eval(&x, &g, &b, &c.mean, &c.var).unwrap();
        for (a, b) in y.data().iter().zip(y2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn kink_hash(bits: impl Iterator<Item = u64>) -> u64 {
        use std::hash::{DefaultHasher, Hasher};
        let mut h = DefaultHasher::new();
        bits.for_each(|b| h.write_u64(b));
        h.finish()
    }

    #[test]
    fn gradcheck_relu_skips_kinks() {
        let mut rng = Stream::new(31, Purpose::GradCheck);
        let shape = [2, 2, 3, 3];
        let mut theta = randn(&mut rng, 36);
        theta[5] = 0.0;
        let r = randn(&mut rng, 36);
        let r2 = r.clone();
        let obj = FnObjective::new(
            theta,
            move |th: &[f64]| {
                let y = relu_forward(&t(shape, th.to_vec()));
                (
                    dot(y.data(), &r),
                    kink_hash(th.iter().map(|&v| u64::from(v > 0.0))),
                )
            },
            move |th: &[f64]| {
                let y = relu_forward(&t(shape, th.to_vec()));
                relu_backward(&t(shape, r2.clone()), &y).into_vec()
            },
        );
        let rep = check_objective(obj, 1e-5, 400, &mut rng);
        assert!(rep.max_rel_error < 1e-7, "{rep:?}");
        assert_eq!(rep.skipped, 1, "the exact-zero unit is excluded");
    }

    #[test]
    fn gradcheck_max_pool() {
        let mut rng = Stream::new(41, Purpose::GradCheck);
        let shape = [2, 2, 4, 4];
        let theta = randn(&mut rng, 64);
        let r = randn(&mut rng, 16);
        let r2 = r.clone();
        let obj = FnObjective::new(
            theta,
            move |th: &[f64]| {
                let (y, arg) = max_pool2_forward(&t(shape, th.to_vec())).unwrap();
                (
                    dot(y.data(), &r),
                    kink_hash(arg.iter().map(|&a| u64::from(a))),
                )
            },
            move |th: &[f64]| {
                let (_, arg) = max_pool2_forward(&t(shape, th.to_vec())).unwrap();
                max_pool2_backward(&t([2, 2, 2, 2], r2.clone()), &arg, shape).into_vec()
            },
        );
        let rep = check_objective(obj, 1e-5, 400, &mut rng);
        assert!(rep.max_rel_error < 1e-7, "{rep:?}");
    }

    #[test]
    fn gradcheck_avg_pools() {
        let mut rng = Stream::new(51, Purpose::GradCheck);
        let shape = [2, 3, 4, 4];
        let theta = randn(&mut rng, 96);
        let r = randn(&mut rng, 24);
        let q = randn(&mut rng, 6);
        let (r2, q2) = (r.clone(), q.clone());
        let obj = FnObjective::new(
            theta,
            move |th: &[f64]| {
                let x = t(shape, th.to_vec());
                let y = avg_pool2_forward(&x).unwrap();
                (dot(y.data(), &r) + dot(&global_avg_pool_forward(&x), &q), 0)
            },
            move |_: &[f64]| {
                let mut g = avg_pool2_backward(&t([2, 3, 2, 2], r2.clone()), shape);
                g.add_assign(&global_avg_pool_backward(&q2, shape));
                g.into_vec()
            },
        );
        let rep = check_objective(obj, 1e-5, 400, &mut rng);
        assert!(rep.max_rel_error < 1e-7, "{rep:?}");
    }

    #[test]
    fn gradcheck_linear_with_cross_entropy() {
        let mut rng = Stream::new(61, Purpose::GradCheck);
        let (n, d, k) = (4, 5, 3);
        let labels = vec![0, 2, 1, 2];
        let theta = randn(&mut rng, n * d + k * d + k);
        let l2 = labels.clone();
        let obj = FnObjective::new(
            theta,
            move |th: &[f64]| {
                let y = linear_forward(
                    &th[..n * d],
                    n,
                    &th[n * d..n * d + k * d],
                    &th[n * d + k * d..],
                )
                .unwrap();
                (softmax_cross_entropy(&y, n, &labels).unwrap().0, 0)
            },
            move |th: &[f64]| {
                let (x, w) = (&th[..n * d], &th[n * d..n * d + k * d]);
                let y = linear_forward(x, n, w, &th[n * d + k * d..]).unwrap();
                let (_, dy) = softmax_cross_entropy(&y, n, &l2).unwrap();
                let (dx, dw, db) = linear_backward(x, n, w, &dy);
                [dx, dw, db].concat()
            },
        );
        let rep = check_objective(obj, 1e-5, 400, &mut rng);
        assert!(rep.max_rel_error < 1e-7, "{rep:?}");
    }
}
