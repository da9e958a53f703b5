// Raw forward/backward loops behind the tape ops. Layout is row-major
// [batch, channels, time] throughout.

use rayon::prelude::*;

use super::{ExecMode, Scalar};

pub(crate) const BN_EPS: f64 = 1e-5;

/// Upper bound on unfolded-column elements processed by one GEMM.
const GROUP_ELEMS: usize = 1 << 22;

fn map_items<T, F>(mode: ExecMode, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode {
        ExecMode::Sequential => (0..n).map(f).collect(),
        ExecMode::Parallel => (0..n).into_par_iter().map(f).collect(),
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub len: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl ConvDims {
    fn tap_offset(&self, k: usize) -> isize {
        (k as isize - (self.kernel as isize - 1) / 2) * self.dilation as isize
    }

    /// Items per GEMM; depends only on the shape so results do not depend
    /// on the execution mode.
    fn group(&self) -> usize {
        (GROUP_ELEMS / (self.cin * self.kernel * self.len).max(1)).clamp(1, self.batch.max(1))
    }

    /// Unfolds one item into columns `[slot * len, (slot + 1) * len)` of a
    /// `[cin * kernel, stride]` matrix, zero outside the signal.
    fn im2col<S: Scalar>(&self, x: &[S], cols: &mut [S], stride: usize, slot: usize) {
        let t = self.len as isize;
        for i in 0..self.cin {
            let row = &x[i * self.len..(i + 1) * self.len];
            for k in 0..self.kernel {
                let off = self.tap_offset(k);
                let dst = &mut cols[(i * self.kernel + k) * stride + slot * self.len..][..self.len];
                let lo = (-off).clamp(0, t) as usize;
                let hi = (t - off).clamp(0, t) as usize;
                dst[..lo].fill(S::zero());
                dst[hi.max(lo)..].fill(S::zero());
                if hi > lo {
                    let src_lo = (lo as isize + off) as usize;
                    dst[lo..hi].copy_from_slice(&row[src_lo..src_lo + (hi - lo)]);
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: accumulates columns back into one item.
    fn col2im<S: Scalar>(&self, cols: &[S], stride: usize, slot: usize, dx: &mut [S]) {
        let t = self.len as isize;
        for i in 0..self.cin {
            let row = &mut dx[i * self.len..(i + 1) * self.len];
            for k in 0..self.kernel {
                let off = self.tap_offset(k);
                let src = &cols[(i * self.kernel + k) * stride + slot * self.len..][..self.len];
                let lo = (-off).clamp(0, t) as usize;
                let hi = (t - off).clamp(0, t) as usize;
                for tt in lo..hi.max(lo) {
                    let dst = (tt as isize + off) as usize;
                    row[dst] = row[dst] + src[tt];
                }
            }
        }
    }
}

pub(crate) fn conv1d_forward<S: Scalar>(
    dims: ConvDims,
    x: &[S],
    w: &[S],
    bias: &[S],
    mode: ExecMode,
) -> Vec<S> {
    let ConvDims {
        batch,
        cin,
        cout,
        len,
        kernel,
        ..
    } = dims;
    let group = dims.group();
    let outs = map_items(mode, batch.div_ceil(group), |g| {
        let items = g * group..((g + 1) * group).min(batch);
        let width = items.len() * len;
        let mut cols = vec![S::zero(); cin * kernel * width];
        for (slot, b) in items.clone().enumerate() {
            dims.im2col(&x[b * cin * len..(b + 1) * cin * len], &mut cols, width, slot);
        }
        let mut y = vec![S::zero(); cout * width];
        for (c, row) in y.chunks_mut(width).enumerate() {
            row.fill(bias[c]);
        }
        S::gemm(cout, cin * kernel, width, w, false, &cols, false, S::one(), &mut y);
        // [cout, items * len] -> [items, cout, len]
        let mut out = Vec::with_capacity(cout * width);
        for slot in 0..items.len() {
            for c in 0..cout {
                out.extend_from_slice(&y[c * width + slot * len..][..len]);
            }
        }
        out
    });
    outs.concat()
}

/// Returns `(dx, dw, dbias)`.
pub(crate) fn conv1d_backward<S: Scalar>(
    dims: ConvDims,
    x: &[S],
    w: &[S],
    dy: &[S],
    mode: ExecMode,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let ConvDims {
        batch,
        cin,
        cout,
        len,
        kernel,
        ..
    } = dims;
    let wlen = cout * cin * kernel;
    let group = dims.group();
    let parts = map_items(mode, batch.div_ceil(group), |g| {
        let items = g * group..((g + 1) * group).min(batch);
        let width = items.len() * len;
        let mut cols = vec![S::zero(); cin * kernel * width];
        let mut dyg = vec![S::zero(); cout * width];
        for (slot, b) in items.clone().enumerate() {
            dims.im2col(&x[b * cin * len..(b + 1) * cin * len], &mut cols, width, slot);
            for c in 0..cout {
                dyg[c * width + slot * len..][..len].copy_from_slice(&dy[(b * cout + c) * len..][..len]);
            }
        }
        let db: Vec<S> = dyg.chunks(width).map(|row| row.iter().copied().sum()).collect();
        let mut dw = vec![S::zero(); wlen];
        S::gemm(cout, width, cin * kernel, &dyg, false, &cols, true, S::zero(), &mut dw);
        S::gemm(cin * kernel, cout, width, w, true, &dyg, false, S::zero(), &mut cols);
        let mut dx = vec![S::zero(); items.len() * cin * len];
        for (slot, item) in dx.chunks_mut(cin * len).enumerate() {
            dims.col2im(&cols, width, slot, item);
        }
        (dx, dw, db)
    });
    let mut dx = Vec::with_capacity(batch * cin * len);
    let mut dw = vec![S::zero(); wlen];
    let mut db = vec![S::zero(); cout];
    for (pdx, pdw, pdb) in &parts {
        dx.extend_from_slice(pdx);
        dw.iter_mut().zip(pdw).for_each(|(a, v)| *a = *a + *v);
        db.iter_mut().zip(pdb).for_each(|(a, v)| *a = *a + *v);
    }
    (dx, dw, db)
}

/// Per-channel statistics over batch and time; returns biased `(mean, var)`.
pub(crate) fn channel_moments<S: Scalar>(
    x: &[S],
    batch: usize,
    channels: usize,
    len: usize,
) -> (Vec<S>, Vec<S>) {
    let count = S::from_usize(batch * len).expect("count");
    let mut mean = vec![S::zero(); channels];
    let mut var = vec![S::zero(); channels];
    for c in 0..channels {
        let mut acc = S::zero();
        for b in 0..batch {
            acc = acc + x[(b * channels + c) * len..][..len].iter().copied().sum::<S>();
        }
        let m = acc / count;
        let mut sq = S::zero();
        for b in 0..batch {
            for &v in &x[(b * channels + c) * len..][..len] {
                let d = v - m;
                sq = sq + d * d;
            }
        }
        mean[c] = m;
        var[c] = sq / count;
    }
    (mean, var)
}

/// Normalizes with the given per-channel statistics. Returns `(y, xhat)`.
pub(crate) fn batchnorm_apply<S: Scalar>(
    x: &[S],
    dims: (usize, usize, usize),
    mean: &[S],
    inv_std: &[S],
    gamma: &[S],
    beta: &[S],
) -> (Vec<S>, Vec<S>) {
    let (batch, channels, len) = dims;
    let mut xhat = vec![S::zero(); x.len()];
    let mut y = vec![S::zero(); x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let base = (b * channels + c) * len;
            for t in base..base + len {
                let h = (x[t] - mean[c]) * inv_std[c];
                xhat[t] = h;
                y[t] = gamma[c] * h + beta[c];
            }
        }
    }
    (y, xhat)
}

/// Returns `(dx, dgamma, dbeta)`. With `batch_stats` the mean/variance are
/// treated as functions of `x` (train mode); otherwise as constants.
pub(crate) fn batchnorm_backward<S: Scalar>(
    dy: &[S],
    xhat: &[S],
    dims: (usize, usize, usize),
    inv_std: &[S],
    gamma: &[S],
    batch_stats: bool,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let (batch, channels, len) = dims;
    let count = S::from_usize(batch * len).expect("count");
    let mut dgamma = vec![S::zero(); channels];
    let mut dbeta = vec![S::zero(); channels];
    for b in 0..batch {
        for c in 0..channels {
            let base = (b * channels + c) * len;
            for t in base..base + len {
                dgamma[c] = dgamma[c] + dy[t] * xhat[t];
                dbeta[c] = dbeta[c] + dy[t];
            }
        }
    }
    let mut dx = vec![S::zero(); dy.len()];
    for b in 0..batch {
        for c in 0..channels {
            let base = (b * channels + c) * len;
            let g = gamma[c] * inv_std[c];
            for t in base..base + len {
                dx[t] = if batch_stats {
                    g * (dy[t] - (dbeta[c] + xhat[t] * dgamma[c]) / count)
                } else {
                    g * dy[t]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}
