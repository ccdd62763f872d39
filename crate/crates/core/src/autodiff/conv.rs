use crate::scalar::Scalar;

use super::AutodiffError;

/// Kernel, stride and zero-padding of a 2-D convolution over `(freq, time)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeometry {
    pub fn new(kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    /// `floor((in + 2·pad − kernel) / stride) + 1` per axis, `None` when the
    /// kernel does not fit the padded input.
    pub fn output_dims(&self, freq: usize, time: usize) -> Option<(usize, usize)> {
        Some((
            out_dim(freq, self.kernel.0, self.stride.0, self.padding.0)?,
            out_dim(time, self.kernel.1, self.stride.1, self.padding.1)?,
        ))
    }
}

/// Output length of one convolution axis.
pub fn out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_forward_raw<S: Scalar>(
    x_shape: &[usize],
    x: &[S],
    w_shape: &[usize],
    w: &[S],
    b_shape: &[usize],
    b: &[S],
    geom: ConvGeometry,
) -> Result<(Vec<usize>, Vec<S>), AutodiffError> {
    let mismatch = || AutodiffError::ShapeMismatch {
        op: "conv2d",
        shapes: vec![x_shape.to_vec(), w_shape.to_vec(), b_shape.to_vec()],
    };
    if x_shape.len() != 3 || w_shape.len() != 4 || b_shape.len() != 1 {
        return Err(mismatch());
    }
    let (c_in, h, wd) = (x_shape[0], x_shape[1], x_shape[2]);
    let (c_out, c_w, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
    if c_w != c_in || b_shape[0] != c_out || (kh, kw) != geom.kernel {
        return Err(mismatch());
    }
    let (oh, ow) = geom
        .output_dims(h, wd)
        .ok_or(AutodiffError::KernelTooLarge {
            input: (h, wd),
            kernel: geom.kernel,
            padding: geom.padding,
        })?;
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let mut out = vec![S::zero(); c_out * oh * ow];
    for o in 0..c_out {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = b[o];
                for c in 0..c_in {
                    for u in 0..kh {
                        let hi = (i * sh + u) as isize - ph as isize;
                        if hi < 0 || hi >= h as isize {
                            continue;
                        }
                        let x_row = &x[(c * h + hi as usize) * wd..(c * h + hi as usize + 1) * wd];
                        let w_row = &w[((o * c_in + c) * kh + u) * kw..((o * c_in + c) * kh + u + 1) * kw];
                        for (v, &wv) in w_row.iter().enumerate() {
                            let wi = (j * sw + v) as isize - pw as isize;
                            if wi >= 0 && wi < wd as isize {
                                acc += wv * x_row[wi as usize];
                            }
                        }
                    }
                }
                out[(o * oh + i) * ow + j] = acc;
            }
        }
    }
    Ok((vec![c_out, oh, ow], out))
}

type ConvGrads<S> = (Option<Vec<S>>, Vec<S>, Vec<S>);

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<S: Scalar>(
    x_shape: &[usize],
    x: &[S],
    w_shape: &[usize],
    w: &[S],
    out_shape: &[usize],
    g: &[S],
    geom: ConvGeometry,
    want_dx: bool,
) -> ConvGrads<S> {
    let (c_in, h, wd) = (x_shape[0], x_shape[1], x_shape[2]);
    let (c_out, kh, kw) = (w_shape[0], w_shape[2], w_shape[3]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let mut dx = want_dx.then(|| vec![S::zero(); x.len()]);
    let mut dw = vec![S::zero(); w.len()];
    let mut db = vec![S::zero(); c_out];
    for o in 0..c_out {
        for i in 0..oh {
            for j in 0..ow {
                let gv = g[(o * oh + i) * ow + j];
                if gv == S::zero() {
                    continue;
                }
                db[o] += gv;
                for c in 0..c_in {
                    for u in 0..kh {
                        let hi = (i * sh + u) as isize - ph as isize;
                        if hi < 0 || hi >= h as isize {
                            continue;
                        }
                        let xr = (c * h + hi as usize) * wd;
                        let wr = ((o * c_in + c) * kh + u) * kw;
                        for v in 0..kw {
                            let wi = (j * sw + v) as isize - pw as isize;
                            if wi < 0 || wi >= wd as isize {
                                continue;
                            }
                            dw[wr + v] += gv * x[xr + wi as usize];
                            if let Some(dx) = dx.as_mut() {
                                dx[xr + wi as usize] += gv * w[wr + v];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}
