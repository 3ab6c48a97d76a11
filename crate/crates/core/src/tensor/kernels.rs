//! Raw convolution / pooling / affine loops shared by the tape's forward
//! and backward passes. All loops run in a fixed order so repeated runs
//! are bit-identical.

use super::Real;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    pub fn new(
        h: usize,
        w: usize,
        cin: usize,
        kh: usize,
        kw: usize,
        cout: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        ConvDims {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            padding,
            oh,
            ow,
        }
    }

    /// Input row/col for output position `o` and kernel offset `k`, or
    /// `None` when the tap falls into the zero padding.
    #[inline]
    fn tap(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.padding as isize;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    }
}

pub(crate) fn conv2d_forward(
    d: &ConvDims,
    input: &[Real],
    kernels: &[Real],
    bias: &[Real],
    out: &mut [Real],
) {
    for oh in 0..d.oh {
        for ow in 0..d.ow {
            let acc = &mut out[(oh * d.ow + ow) * d.cout..][..d.cout];
            acc.copy_from_slice(bias);
            for kh in 0..d.kh {
                let Some(ih) = d.tap(oh, kh, d.h) else { continue };
                for kw in 0..d.kw {
                    let Some(iw) = d.tap(ow, kw, d.w) else { continue };
                    let in_row = &input[(ih * d.w + iw) * d.cin..][..d.cin];
                    let k_base = ((kh * d.kw + kw) * d.cin) * d.cout;
                    for (ci, &x) in in_row.iter().enumerate() {
                        let k_row = &kernels[k_base + ci * d.cout..][..d.cout];
                        for co in 0..d.cout {
                            acc[co] += x * k_row[co];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_backward_input(
    d: &ConvDims,
    kernels: &[Real],
    gout: &[Real],
    dinput: &mut [Real],
) {
    for oh in 0..d.oh {
        for ow in 0..d.ow {
            let g = &gout[(oh * d.ow + ow) * d.cout..][..d.cout];
            for kh in 0..d.kh {
                let Some(ih) = d.tap(oh, kh, d.h) else { continue };
                for kw in 0..d.kw {
                    let Some(iw) = d.tap(ow, kw, d.w) else { continue };
                    let din_row = &mut dinput[(ih * d.w + iw) * d.cin..][..d.cin];
                    let k_base = ((kh * d.kw + kw) * d.cin) * d.cout;
                    for (ci, dx) in din_row.iter_mut().enumerate() {
                        let k_row = &kernels[k_base + ci * d.cout..][..d.cout];
                        for co in 0..d.cout {
                            *dx += g[co] * k_row[co];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_backward_params(
    d: &ConvDims,
    input: &[Real],
    gout: &[Real],
    dkernels: &mut [Real],
    dbias: &mut [Real],
) {
    for oh in 0..d.oh {
        for ow in 0..d.ow {
            let g = &gout[(oh * d.ow + ow) * d.cout..][..d.cout];
            for co in 0..d.cout {
                dbias[co] += g[co];
            }
            for kh in 0..d.kh {
                let Some(ih) = d.tap(oh, kh, d.h) else { continue };
                for kw in 0..d.kw {
                    let Some(iw) = d.tap(ow, kw, d.w) else { continue };
                    let in_row = &input[(ih * d.w + iw) * d.cin..][..d.cin];
                    let k_base = ((kh * d.kw + kw) * d.cin) * d.cout;
                    for (ci, &x) in in_row.iter().enumerate() {
                        let dk_row = &mut dkernels[k_base + ci * d.cout..][..d.cout];
                        for co in 0..d.cout {
                            dk_row[co] += x * g[co];
                        }
                    }
                }
            }
        }
    }
}

/// `out[m] = sum_n input[n] * weights[n * m_dim + m] + bias[m]`
pub(crate) fn affine_forward(
    n_dim: usize,
    m_dim: usize,
    input: &[Real],
    weights: &[Real],
    bias: &[Real],
    out: &mut [Real],
) {
    out.copy_from_slice(bias);
    for n in 0..n_dim {
        let x = input[n];
        let w_row = &weights[n * m_dim..][..m_dim];
        for m in 0..m_dim {
            out[m] += x * w_row[m];
        }
    }
}

pub(crate) fn affine_backward_input(
    n_dim: usize,
    m_dim: usize,
    weights: &[Real],
    gout: &[Real],
    dinput: &mut [Real],
) {
    for n in 0..n_dim {
        let w_row = &weights[n * m_dim..][..m_dim];
        let mut acc = 0.0;
        for m in 0..m_dim {
            acc += gout[m] * w_row[m];
        }
        dinput[n] += acc;
    }
}

pub(crate) fn affine_backward_params(
    n_dim: usize,
    m_dim: usize,
    input: &[Real],
    gout: &[Real],
    dweights: &mut [Real],
    dbias: &mut [Real],
) {
    for m in 0..m_dim {
        dbias[m] += gout[m];
    }
    for n in 0..n_dim {
        let x = input[n];
        let dw_row = &mut dweights[n * m_dim..][..m_dim];
        for m in 0..m_dim {
            dw_row[m] += x * gout[m];
        }
    }
}

/// Max pooling over square windows without padding. `argmax` receives the
/// flat input index of each output element's maximum; ties resolve to the
/// lowest flat index because the scan uses a strict comparison in
/// ascending (row, col) order.
pub(crate) fn maxpool_forward(
    h: usize,
    w: usize,
    c: usize,
    window: usize,
    stride: usize,
    input: &[Real],
    out: &mut [Real],
    argmax: &mut [usize],
) {
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    for out_h in 0..oh {
        for out_w in 0..ow {
            for ch in 0..c {
                let mut best_idx = (out_h * stride * w + out_w * stride) * c + ch;
                let mut best = input[best_idx];
                for ph in 0..window {
                    for pw in 0..window {
                        let idx = ((out_h * stride + ph) * w + out_w * stride + pw) * c + ch;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (out_h * ow + out_w) * c + ch;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
}

/// Gap between the largest and second-largest value in each pooling
/// window, minimized over all windows. Used to detect inputs where the
/// pooling argmax is about to switch.
pub(crate) fn maxpool_min_top2_gap(
    h: usize,
    w: usize,
    c: usize,
    window: usize,
    stride: usize,
    input: &[Real],
) -> Option<Real> {
    if window == 1 {
        return None;
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut min_gap: Option<Real> = None;
    for out_h in 0..oh {
        for out_w in 0..ow {
            for ch in 0..c {
                let mut best = Real::NEG_INFINITY;
                let mut second = Real::NEG_INFINITY;
                for ph in 0..window {
                    for pw in 0..window {
                        let v = input[((out_h * stride + ph) * w + out_w * stride + pw) * c + ch];
                        if v > best {
                            second = best;
                            best = v;
                        } else if v > second {
                            second = v;
                        }
                    }
                }
                let gap = best - second;
                min_gap = Some(min_gap.map_or(gap, |m: Real| m.min(gap)));
            }
        }
    }
    min_gap
}
