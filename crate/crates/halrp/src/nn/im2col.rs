//! Patch extraction for convolution via matrix multiply.

use crate::linalg::{Matrix, Tensor4};

/// Output spatial size for one dimension. Assumes the caller already
/// validated divisibility.
pub fn out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Extract convolution patches from a batch of flattened images.
///
/// `x` is N×(C·H·W) row-major with feature index c·H·W + h·W + w. The result
/// has one row per output position, N·OH·OW rows total (sample-major), and
/// C·d·d columns with column index c·d·d + kh·d + kw. Out-of-bounds taps read
/// zero.
pub fn im2col(
    x: &Matrix,
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Matrix {
    let n = x.rows();
    let oh = out_size(height, kernel, stride, padding);
    let ow = out_size(width, kernel, stride, padding);
    let mut p = Matrix::zeros(n * oh * ow, channels * kernel * kernel);
    for sample in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (sample * oh + oy) * ow + ox;
                for c in 0..channels {
                    for kh in 0..kernel {
                        let iy = (oy * stride + kh) as isize - padding as isize;
                        if iy < 0 || iy as usize >= height {
                            continue;
                        }
                        for kw in 0..kernel {
                            let ix = (ox * stride + kw) as isize - padding as isize;
                            if ix < 0 || ix as usize >= width {
                                continue;
                            }
                            let feat = (c * height + iy as usize) * width + ix as usize;
                            let col = (c * kernel + kh) * kernel + kw;
                            p.set(row, col, x.get(sample, feat));
                        }
                    }
                }
            }
        }
    }
    p
}

/// Scatter patch gradients back onto the input layout. Overlapping taps
/// accumulate.
#[allow(clippy::too_many_arguments)]
pub fn col2im(
    dp: &Matrix,
    n: usize,
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Matrix {
    let oh = out_size(height, kernel, stride, padding);
    let ow = out_size(width, kernel, stride, padding);
    let mut dx = Matrix::zeros(n, channels * height * width);
    for sample in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (sample * oh + oy) * ow + ox;
                for c in 0..channels {
                    for kh in 0..kernel {
                        let iy = (oy * stride + kh) as isize - padding as isize;
                        if iy < 0 || iy as usize >= height {
                            continue;
                        }
                        for kw in 0..kernel {
                            let ix = (ox * stride + kw) as isize - padding as isize;
                            if ix < 0 || ix as usize >= width {
                                continue;
                            }
                            let feat = (c * height + iy as usize) * width + ix as usize;
                            let col = (c * kernel + kh) * kernel + kw;
                            let val = dx.get(sample, feat) + dp.get(row, col);
                            dx.set(sample, feat, val);
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Flatten a kernel tensor into the J×(C·d·d) matrix matching the im2col
/// column layout.
pub fn kernel_matrix(w: &Tensor4) -> Matrix {
    let (kh, kw, out_ch, in_ch) = w.dims();
    debug_assert_eq!(kh, kw);
    Matrix::from_fn(out_ch, in_ch * kh * kw, |j, col| {
        let c = col / (kh * kw);
        let rem = col % (kh * kw);
        w.get(rem / kw, rem % kw, j, c)
    })
}

/// Inverse of `kernel_matrix` for gradients.
pub fn kernel_tensor(dk: &Matrix, kernel: usize, out_ch: usize, in_ch: usize) -> Tensor4 {
    Tensor4::from_fn(kernel, kernel, out_ch, in_ch, |h, w, j, c| {
        dk.get(j, (c * kernel + h) * kernel + w)
    })
}
