//! Forward and backward kernels for the three layer types.
//!
//! Convolution kernels are stored `[3, 3, in_channels, filters]`, dense weights
//! `[inputs, outputs]`. Both keep the output index innermost so the hot loops
//! run over contiguous memory.

use super::EngineError;
use crate::tensor::Tensor;

pub const KERNEL: usize = 3;
pub const POOL: usize = 2;
const PAD: isize = (KERNEL / 2) as isize;

fn expect_rank(layer: &'static str, t: &Tensor, rank: usize) -> Result<(), EngineError> {
    if t.rank() != rank {
        return Err(EngineError::Shape {
            layer,
            axis: "rank",
            expected: rank,
            actual: t.rank(),
        });
    }
    Ok(())
}

fn expect_axis(
    layer: &'static str,
    axis: &'static str,
    expected: usize,
    actual: usize,
) -> Result<(), EngineError> {
    if expected != actual {
        return Err(EngineError::Shape {
            layer,
            axis,
            expected,
            actual,
        });
    }
    Ok(())
}

fn check_conv(input: &Tensor, weights: &Tensor, biases: &Tensor) -> Result<(), EngineError> {
    expect_rank("conv", input, 3)?;
    expect_rank("conv", weights, 4)?;
    let wd = weights.dims();
    expect_axis("conv", "kernel_height", KERNEL, wd[0])?;
    expect_axis("conv", "kernel_width", KERNEL, wd[1])?;
    expect_axis("conv", "in_channels", wd[2], input.dims()[2])?;
    expect_axis("conv", "filters", wd[3], biases.len())?;
    Ok(())
}

/// Stride-1 cross-correlation with SAME zero padding; spatial dims are kept.
pub fn conv_forward(input: &Tensor, weights: &Tensor, biases: &Tensor) -> Result<Tensor, EngineError> {
    check_conv(input, weights, biases)?;
    let (h, w, cin) = (input.dims()[0], input.dims()[1], input.dims()[2]);
    let cout = biases.len();
    let src = input.data();
    let wts = weights.data();
    let mut out = vec![0.0; h * w * cout];
    for y in 0..h {
        for x in 0..w {
            let o = &mut out[(y * w + x) * cout..][..cout];
            o.copy_from_slice(biases.data());
            for ky in 0..KERNEL {
                let iy = y as isize + ky as isize - PAD;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..KERNEL {
                    let ix = x as isize + kx as isize - PAD;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let px = &src[(iy as usize * w + ix as usize) * cin..][..cin];
                    let wk = &wts[(ky * KERNEL + kx) * cin * cout..][..cin * cout];
                    for (ci, &v) in px.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let row = &wk[ci * cout..][..cout];
                        for (acc, &wv) in o.iter_mut().zip(row) {
                            *acc += v * wv;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![h, w, cout], out))
}

/// Gradients of a SAME convolution. Accumulates into `dweights`/`dbiases` and
/// returns the input gradient when `want_input` is set.
pub fn conv_backward(
    input: &Tensor,
    weights: &Tensor,
    dout: &Tensor,
    dweights: &mut [f64],
    dbiases: &mut [f64],
    want_input: bool,
) -> Option<Tensor> {
    let (h, w, cin) = (input.dims()[0], input.dims()[1], input.dims()[2]);
    let cout = dout.dims()[2];
    let src = input.data();
    let wts = weights.data();
    let g = dout.data();
    let mut din = if want_input {
        vec![0.0; h * w * cin]
    } else {
        Vec::new()
    };
    for y in 0..h {
        for x in 0..w {
            let d = &g[(y * w + x) * cout..][..cout];
            for (b, &dv) in dbiases.iter_mut().zip(d) {
                *b += dv;
            }
            if d.iter().all(|&v| v == 0.0) {
                continue;
            }
            for ky in 0..KERNEL {
                let iy = y as isize + ky as isize - PAD;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..KERNEL {
                    let ix = x as isize + kx as isize - PAD;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let base = (iy as usize * w + ix as usize) * cin;
                    let koff = (ky * KERNEL + kx) * cin * cout;
                    for ci in 0..cin {
                        let v = src[base + ci];
                        let off = koff + ci * cout;
                        if v != 0.0 {
                            for (acc, &dv) in dweights[off..off + cout].iter_mut().zip(d) {
                                *acc += v * dv;
                            }
                        }
                        if want_input {
                            let row = &wts[off..off + cout];
                            din[base + ci] += row.iter().zip(d).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
        }
    }
    want_input.then(|| Tensor::from_parts(vec![h, w, cin], din))
}

/// 2×2 stride-2 max pooling in ceil mode. Returns the pooled tensor and, for
/// every output element, the flat input index that won the window (first
/// maximum in row-major window order).
pub fn pool_forward(input: &Tensor) -> Result<(Tensor, Vec<usize>), EngineError> {
    expect_rank("pool", input, 3)?;
    let (h, w, c) = (input.dims()[0], input.dims()[1], input.dims()[2]);
    let (oh, ow) = (h.div_ceil(POOL), w.div_ceil(POOL));
    let src = input.data();
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut argmax = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best_idx = (oy * POOL * w + ox * POOL) * c + ch;
                let mut best = src[best_idx];
                for y in oy * POOL..(oy * POOL + POOL).min(h) {
                    for x in ox * POOL..(ox * POOL + POOL).min(w) {
                        let idx = (y * w + x) * c + ch;
                        if src[idx] > best {
                            best = src[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((Tensor::from_parts(vec![oh, ow, c], out), argmax))
}

/// Routes each output gradient to the input position that won its window.
pub fn pool_backward(argmax: &[usize], dout: &Tensor, input_dims: &[usize]) -> Tensor {
    let n: usize = input_dims.iter().product();
    let mut din = vec![0.0; n];
    for (&idx, &g) in argmax.iter().zip(dout.data()) {
        din[idx] += g;
    }
    Tensor::from_parts(input_dims.to_vec(), din)
}

/// `out = Wᵀx + b`.
pub fn dense_forward(input: &Tensor, weights: &Tensor, biases: &Tensor) -> Result<Tensor, EngineError> {
    expect_rank("dense", input, 1)?;
    expect_rank("dense", weights, 2)?;
    let (rows, cols) = (weights.dims()[0], weights.dims()[1]);
    expect_axis("dense", "inputs", rows, input.len())?;
    expect_axis("dense", "outputs", cols, biases.len())?;
    let mut out = biases.data().to_vec();
    let wts = weights.data();
    for (i, &v) in input.data().iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        for (acc, &wv) in out.iter_mut().zip(&wts[i * cols..(i + 1) * cols]) {
            *acc += v * wv;
        }
    }
    Ok(Tensor::from_parts(vec![cols], out))
}

/// Accumulates `x·δᵀ` and `δ` into the weight and bias gradients and
/// optionally returns `Wδ`.
pub fn dense_backward(
    input: &Tensor,
    weights: &Tensor,
    dout: &Tensor,
    dweights: &mut [f64],
    dbiases: &mut [f64],
    want_input: bool,
) -> Option<Tensor> {
    let cols = dout.len();
    let d = dout.data();
    for (b, &dv) in dbiases.iter_mut().zip(d) {
        *b += dv;
    }
    for (i, &v) in input.data().iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        for (acc, &dv) in dweights[i * cols..(i + 1) * cols].iter_mut().zip(d) {
            *acc += v * dv;
        }
    }
    want_input.then(|| {
        let wts = weights.data();
        let din = (0..input.len())
            .map(|i| wts[i * cols..(i + 1) * cols].iter().zip(d).map(|(a, b)| a * b).sum())
            .collect();
        Tensor::from_parts(vec![input.len()], din)
    })
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Masks `dout` by `pre > 0`.
pub fn relu_backward(pre: &Tensor, dout: &Tensor) -> Tensor {
    let data = pre
        .data()
        .iter()
        .zip(dout.data())
        .map(|(&p, &g)| if p > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_parts(pre.dims().to_vec(), data)
}
