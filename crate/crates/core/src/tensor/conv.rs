//! im2col based convolution kernels over raw row-major buffers.

use super::real::{matmul, Real};
use crate::error::{arg_err, shape_err, Result};

/// Geometry of a forward (cross-correlation) convolution on one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(arg_err!("convolution stride must be positive"));
        }
        if kernel == 0 {
            return Err(arg_err!("convolution kernel must be positive"));
        }
        if kernel > height + 2 * padding || kernel > width + 2 * padding {
            return Err(shape_err!(
                "kernel {kernel} larger than padded input {}x{} (padding {padding})",
                height,
                width
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            padding,
            out_height: (height + 2 * padding - kernel) / stride + 1,
            out_width: (width + 2 * padding - kernel) / stride + 1,
        })
    }

    /// Rows of the column matrix: `channels * kernel * kernel`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn out_positions(&self) -> usize {
        self.out_height * self.out_width
    }

    pub fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Source pixel index for output position `(oy, ox)` and kernel tap `(ky, kx)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.padding as isize;
        let x = (ox * self.stride + kx) as isize - self.padding as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

pub(crate) fn im2col<T: Real>(g: &ConvGeometry, image: &[T], cols: &mut [T]) {
    let positions = g.out_positions();
    let plane = g.height * g.width;
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..g.out_height {
                    for ox in 0..g.out_width {
                        dst[oy * g.out_width + ox] = match g.source(oy, ox, ky, kx) {
                            Some((y, x)) => image[c * plane + y * g.width + x],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto the image, accumulating.
pub(crate) fn col2im<T: Real>(g: &ConvGeometry, cols: &[T], image: &mut [T]) {
    let positions = g.out_positions();
    let plane = g.height * g.width;
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..g.out_height {
                    for ox in 0..g.out_width {
                        if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                            image[c * plane + y * g.width + x] += src[oy * g.out_width + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution of a batch. `weight` is `[out_channels, patch_len]`.
pub(crate) fn conv_forward<T: Real>(
    g: &ConvGeometry,
    batch: usize,
    out_channels: usize,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let positions = g.out_positions();
    let mut cols = vec![T::zero(); g.patch_len() * positions];
    let mut out = vec![T::zero(); batch * out_channels * positions];
    for b in 0..batch {
        im2col(g, &input[b * g.in_len()..(b + 1) * g.in_len()], &mut cols);
        let dst = &mut out[b * out_channels * positions..(b + 1) * out_channels * positions];
        if let Some(bias) = bias {
            for (o, chunk) in dst.chunks_mut(positions).enumerate() {
                chunk.fill(bias[o]);
            }
        }
        matmul(
            out_channels,
            g.patch_len(),
            positions,
            weight,
            false,
            &cols,
            false,
            dst,
            bias.is_some(),
        );
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Real>(
    g: &ConvGeometry,
    batch: usize,
    out_channels: usize,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> ConvGrads<T> {
    let positions = g.out_positions();
    let patch = g.patch_len();
    let mut cols = vec![T::zero(); patch * positions];
    let mut d_input = want_input.then(|| vec![T::zero(); batch * g.in_len()]);
    let mut d_weight = want_weight.then(|| vec![T::zero(); out_channels * patch]);
    let mut d_bias = want_bias.then(|| vec![T::zero(); out_channels]);
    for b in 0..batch {
        let dy = &grad_out[b * out_channels * positions..(b + 1) * out_channels * positions];
        if let Some(dw) = d_weight.as_mut() {
            im2col(g, &input[b * g.in_len()..(b + 1) * g.in_len()], &mut cols);
            matmul(
                out_channels,
                positions,
                patch,
                dy,
                false,
                &cols,
                true,
                dw,
                true,
            );
        }
        if let Some(dx) = d_input.as_mut() {
            matmul(
                patch,
                out_channels,
                positions,
                weight,
                true,
                dy,
                false,
                &mut cols,
                false,
            );
            col2im(g, &cols, &mut dx[b * g.in_len()..(b + 1) * g.in_len()]);
        }
        if let Some(db) = d_bias.as_mut() {
            for (o, chunk) in dy.chunks(positions).enumerate() {
                db[o] += chunk.iter().copied().sum();
            }
        }
    }
    ConvGrads {
        input: d_input,
        weight: d_weight,
        bias: d_bias,
    }
}

/// Transposed convolution: the input-gradient map of the convolution whose
/// geometry is `g` (so `g.out_*` are the transposed conv's *input* extents).
/// `weight` is `[in_channels, patch_len]`.
pub(crate) fn conv_transpose_forward<T: Real>(
    g: &ConvGeometry,
    batch: usize,
    in_channels: usize,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let positions = g.out_positions();
    let patch = g.patch_len();
    let plane = g.height * g.width;
    let mut cols = vec![T::zero(); patch * positions];
    let mut out = vec![T::zero(); batch * g.in_len()];
    for b in 0..batch {
        let x = &input[b * in_channels * positions..(b + 1) * in_channels * positions];
        matmul(
            patch,
            in_channels,
            positions,
            weight,
            true,
            x,
            false,
            &mut cols,
            false,
        );
        let dst = &mut out[b * g.in_len()..(b + 1) * g.in_len()];
        if let Some(bias) = bias {
            for (c, chunk) in dst.chunks_mut(plane).enumerate() {
                chunk.fill(bias[c]);
            }
        }
        col2im(g, &cols, dst);
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose_backward<T: Real>(
    g: &ConvGeometry,
    batch: usize,
    in_channels: usize,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> ConvGrads<T> {
    let positions = g.out_positions();
    let patch = g.patch_len();
    let plane = g.height * g.width;
    let mut cols = vec![T::zero(); patch * positions];
    let mut d_input = want_input.then(|| vec![T::zero(); batch * in_channels * positions]);
    let mut d_weight = want_weight.then(|| vec![T::zero(); in_channels * patch]);
    let mut d_bias = want_bias.then(|| vec![T::zero(); g.channels]);
    for b in 0..batch {
        let dy = &grad_out[b * g.in_len()..(b + 1) * g.in_len()];
        if d_input.is_some() || d_weight.is_some() {
            im2col(g, dy, &mut cols);
        }
        if let Some(dx) = d_input.as_mut() {
            let dst = &mut dx[b * in_channels * positions..(b + 1) * in_channels * positions];
            matmul(
                in_channels,
                patch,
                positions,
                weight,
                false,
                &cols,
                false,
                dst,
                false,
            );
        }
        if let Some(dw) = d_weight.as_mut() {
            let x = &input[b * in_channels * positions..(b + 1) * in_channels * positions];
            matmul(
                in_channels,
                positions,
                patch,
                x,
                false,
                &cols,
                true,
                dw,
                true,
            );
        }
        if let Some(db) = d_bias.as_mut() {
            for (c, chunk) in dy.chunks(plane).enumerate() {
                db[c] += chunk.iter().copied().sum();
            }
        }
    }
    ConvGrads {
        input: d_input,
        weight: d_weight,
        bias: d_bias,
    }
}
