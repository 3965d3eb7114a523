//! Forward and backward kernels for the tape primitives.
//!
//! Every reduction runs in a fixed order so repeated runs are bitwise
//! identical. The heavy kernels (convolution, batch norm) live here as free
//! functions; [`crate::autodiff::tape`] only does shape checking and wiring.

use crate::autodiff::tensor::Element;
use crate::error::{Error, Result};

/// Shape bundle for one unbatched convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn check(&self) -> Result<()> {
        if self.kh == 0 || self.kw == 0 || self.co == 0 || self.ci == 0 {
            return Err(Error::Shape("empty convolution extent".into()));
        }
        if self.h + 2 * self.pad < self.kh || self.w + 2 * self.pad < self.kw {
            return Err(Error::Shape(format!(
                "padded input {}x{} (pad {}) smaller than kernel {}x{}",
                self.h, self.w, self.pad, self.kh, self.kw
            )));
        }
        Ok(())
    }

    pub fn out_hw(&self) -> (usize, usize) {
        (
            self.h + 2 * self.pad + 1 - self.kh,
            self.w + 2 * self.pad + 1 - self.kw,
        )
    }
}

/// Cross-correlation with zero padding, stride 1, no bias.
/// `input` is `[ci,h,w]`, `kernel` is `[co,ci,kh,kw]`, `out` is `[co,oh,ow]`.
pub fn conv2d_forward<E: Element>(d: &ConvDims, input: &[E], kernel: &[E], out: &mut [E]) {
    let (oh, ow) = d.out_hw();
    debug_assert_eq!(input.len(), d.ci * d.h * d.w);
    debug_assert_eq!(kernel.len(), d.co * d.ci * d.kh * d.kw);
    debug_assert_eq!(out.len(), d.co * oh * ow);
    out.iter_mut().for_each(|v| *v = E::zero());
    for oc in 0..d.co {
        let out_c = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
        for ic in 0..d.ci {
            let in_c = &input[ic * d.h * d.w..(ic + 1) * d.h * d.w];
            let k_base = (oc * d.ci + ic) * d.kh * d.kw;
            for ky in 0..d.kh {
                let oy_lo = d.pad.saturating_sub(ky);
                let oy_hi = (d.h + d.pad).saturating_sub(ky).min(oh);
                for oy in oy_lo..oy_hi {
                    let iy = oy + ky - d.pad;
                    let in_row = &in_c[iy * d.w..(iy + 1) * d.w];
                    let out_row = &mut out_c[oy * ow..(oy + 1) * ow];
                    for kx in 0..d.kw {
                        let k = kernel[k_base + ky * d.kw + kx];
                        let ox_lo = d.pad.saturating_sub(kx);
                        let ox_hi = (d.w + d.pad).saturating_sub(kx).min(ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let ix_lo = ox_lo + kx - d.pad;
                        let src = &in_row[ix_lo..ix_lo + (ox_hi - ox_lo)];
                        let dst = &mut out_row[ox_lo..ox_hi];
                        for (o, &i) in dst.iter_mut().zip(src) {
                            *o = *o + k * i;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates input and kernel gradients for one unbatched convolution.
pub fn conv2d_backward<E: Element>(
    d: &ConvDims,
    input: &[E],
    kernel: &[E],
    dout: &[E],
    mut din: Option<&mut [E]>,
    mut dkernel: Option<&mut [E]>,
) {
    let (oh, ow) = d.out_hw();
    for oc in 0..d.co {
        let dout_c = &dout[oc * oh * ow..(oc + 1) * oh * ow];
        for ic in 0..d.ci {
            let in_c = &input[ic * d.h * d.w..(ic + 1) * d.h * d.w];
            let k_base = (oc * d.ci + ic) * d.kh * d.kw;
            for ky in 0..d.kh {
                let oy_lo = d.pad.saturating_sub(ky);
                let oy_hi = (d.h + d.pad).saturating_sub(ky).min(oh);
                for kx in 0..d.kw {
                    let ox_lo = d.pad.saturating_sub(kx);
                    let ox_hi = (d.w + d.pad).saturating_sub(kx).min(ow);
                    if ox_lo >= ox_hi || oy_lo >= oy_hi {
                        continue;
                    }
                    let len = ox_hi - ox_lo;
                    let ix_lo = ox_lo + kx - d.pad;
                    let k = kernel[k_base + ky * d.kw + kx];
                    let mut kacc = E::zero();
                    for oy in oy_lo..oy_hi {
                        let iy = oy + ky - d.pad;
                        let g_row = &dout_c[oy * ow + ox_lo..oy * ow + ox_hi];
                        if let Some(di) = din.as_deref_mut() {
                            let di_row =
                                &mut di[ic * d.h * d.w + iy * d.w + ix_lo..][..len];
                            for (x, &g) in di_row.iter_mut().zip(g_row) {
                                *x = *x + k * g;
                            }
                        }
                        if dkernel.is_some() {
                            let i_row = &in_c[iy * d.w + ix_lo..][..len];
                            for (&i, &g) in i_row.iter().zip(g_row) {
                                kacc = kacc + i * g;
                            }
                        }
                    }
                    if let Some(dk) = dkernel.as_deref_mut() {
                        let slot = &mut dk[k_base + ky * d.kw + kx];
                        *slot = *slot + kacc;
                    }
                }
            }
        }
    }
}

/// Shape bundle for batch normalization over `[n,c,h,w]`.
#[derive(Debug, Clone, Copy)]
pub struct BnDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl BnDims {
    /// Samples per channel.
    pub fn m(&self) -> usize {
        self.n * self.h * self.w
    }
}

/// Values the backward pass needs, captured during forward.
#[derive(Debug, Clone)]
pub struct BnSaved<E: Element> {
    /// Per-channel mean actually used for normalization.
    pub mean: Vec<E>,
    /// Per-channel population variance actually used for normalization.
    pub var: Vec<E>,
    pub inv_std: Vec<E>,
    /// Normalized input, present only when gradients will be requested.
    pub x_hat: Option<Vec<E>>,
}

/// Normalizes `x` per channel and applies the affine transform.
///
/// With `stats = None` the batch statistics over the `n*h*w` axis are used
/// (train mode); otherwise the supplied fixed statistics are (eval mode).
pub fn bn_forward<E: Element>(
    d: &BnDims,
    x: &[E],
    gamma: &[E],
    beta: &[E],
    stats: Option<(&[E], &[E])>,
    eps: E,
    save_xhat: bool,
    out: &mut [E],
) -> BnSaved<E> {
    let m = d.m();
    let plane = d.h * d.w;
    let (mean, var): (Vec<E>, Vec<E>) = match stats {
        Some((rm, rv)) => (rm.to_vec(), rv.to_vec()),
        None => {
            let mut mean = Vec::with_capacity(d.c);
            let mut var = Vec::with_capacity(d.c);
            for ci in 0..d.c {
                let mut acc = 0.0f64;
                for ni in 0..d.n {
                    let base = (ni * d.c + ci) * plane;
                    for &v in &x[base..base + plane] {
                        acc += v.as_f64();
                    }
                }
                let mu = acc / m as f64;
                let mut vacc = 0.0f64;
                for ni in 0..d.n {
                    let base = (ni * d.c + ci) * plane;
                    for &v in &x[base..base + plane] {
                        let delta = v.as_f64() - mu;
                        vacc += delta * delta;
                    }
                }
                mean.push(E::from_f64(mu));
                var.push(E::from_f64(vacc / m as f64));
            }
            (mean, var)
        }
    };
    let inv_std: Vec<E> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
    let mut x_hat = if save_xhat {
        Some(vec![E::zero(); x.len()])
    } else {
        None
    };
    for ni in 0..d.n {
        for ci in 0..d.c {
            let base = (ni * d.c + ci) * plane;
            let (mu, istd, g, b) = (mean[ci], inv_std[ci], gamma[ci], beta[ci]);
            for j in base..base + plane {
                let xh = (x[j] - mu) * istd;
                if let Some(saved) = x_hat.as_mut() {
                    saved[j] = xh;
                }
                out[j] = g * xh + b;
            }
        }
    }
    BnSaved {
        mean,
        var,
        inv_std,
        x_hat,
    }
}

/// Accumulates gradients for batch norm. With `train` the batch statistics
/// are treated as functions of `x`; otherwise they are constants.
pub fn bn_backward<E: Element>(
    d: &BnDims,
    saved: &BnSaved<E>,
    gamma: &[E],
    dy: &[E],
    train: bool,
    mut dx: Option<&mut [E]>,
    mut dgamma: Option<&mut [E]>,
    mut dbeta: Option<&mut [E]>,
) {
    let x_hat = saved
        .x_hat
        .as_ref()
        .expect("bn_backward requires saved x_hat");
    let plane = d.h * d.w;
    let m = E::from_f64(d.m() as f64);
    for ci in 0..d.c {
        let istd = saved.inv_std[ci];
        let g = gamma[ci];
        let mut sum_dy = E::zero();
        let mut sum_dy_xhat = E::zero();
        for ni in 0..d.n {
            let base = (ni * d.c + ci) * plane;
            for j in base..base + plane {
                sum_dy = sum_dy + dy[j];
                sum_dy_xhat = sum_dy_xhat + dy[j] * x_hat[j];
            }
        }
        if let Some(dgamma) = dgamma.as_deref_mut() {
            dgamma[ci] = dgamma[ci] + sum_dy_xhat;
        }
        if let Some(dbeta) = dbeta.as_deref_mut() {
            dbeta[ci] = dbeta[ci] + sum_dy;
        }
        if let Some(dx) = dx.as_deref_mut() {
            if train {
                // d/dx of (x - mean(x)) * inv_std(x): the batch statistic
                // terms fold into the two per-channel sums.
                let scale = g * istd / m;
                for ni in 0..d.n {
                    let base = (ni * d.c + ci) * plane;
                    for j in base..base + plane {
                        let t = m * dy[j] - sum_dy - x_hat[j] * sum_dy_xhat;
                        dx[j] = dx[j] + scale * t;
                    }
                }
            } else {
                let scale = g * istd;
                for ni in 0..d.n {
                    let base = (ni * d.c + ci) * plane;
                    for j in base..base + plane {
                        dx[j] = dx[j] + scale * dy[j];
                    }
                }
            }
        }
    }
}

/// Softmax cross-entropy over rows of `logits` (`[n,c]`), mean-reduced.
/// Returns the loss and the per-row softmax probabilities.
pub fn softmax_xent_forward<E: Element>(
    logits: &[E],
    n: usize,
    c: usize,
    labels: &[usize],
) -> (E, Vec<E>) {
    let mut probs = vec![E::zero(); n * c];
    let mut loss = 0.0f64;
    for row in 0..n {
        let l = &logits[row * c..(row + 1) * c];
        let mut max = l[0];
        for &v in &l[1..] {
            if v > max {
                max = v;
            }
        }
        let mut denom = E::zero();
        for (j, &v) in l.iter().enumerate() {
            let e = (v - max).exp();
            probs[row * c + j] = e;
            denom = denom + e;
        }
        for p in &mut probs[row * c..(row + 1) * c] {
            *p = *p / denom;
        }
        let y = labels[row];
        loss -= (l[y] - max).as_f64() - denom.as_f64().ln();
    }
    (E::from_f64(loss / n as f64), probs)
}

/// Gradient of the mean cross-entropy: `(softmax - onehot) / n`, scaled by
/// the incoming scalar gradient.
pub fn softmax_xent_backward<E: Element>(
    probs: &[E],
    n: usize,
    c: usize,
    labels: &[usize],
    dloss: E,
    dlogits: &mut [E],
) {
    let inv_n = dloss / E::from_f64(n as f64);
    for row in 0..n {
        for j in 0..c {
            let onehot = if labels[row] == j { E::one() } else { E::zero() };
            let idx = row * c + j;
            dlogits[idx] = dlogits[idx] + (probs[idx] - onehot) * inv_n;
        }
    }
}
