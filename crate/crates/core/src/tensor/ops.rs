use super::Tensor;
use crate::error::{Error, Result};

/// `out[j] = Σ_k weights[j,k]·input[k] + bias[j]`.
pub fn affine(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, n) = affine_dims(input, weights, bias)?;
    let x = input.data();
    let w = weights.data();
    let out = (0..m)
        .map(|j| {
            let row = &w[j * n..(j + 1) * n];
            row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + bias.data()[j]
        })
        .collect();
    Ok(Tensor::vector(out))
}

/// Gradients of [`affine`] w.r.t. `(input, weights, bias)`.
pub fn affine_backward(
    input: &Tensor,
    weights: &Tensor,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let m = weights.shape().first().copied().unwrap_or(0);
    let n = input.len();
    if weights.shape() != [m, n] || input.shape() != [n] || upstream.shape() != [m] {
        return Err(Error::dim("affine_backward", weights.shape(), upstream.shape()));
    }
    let w = weights.data();
    let g = upstream.data();
    let x = input.data();
    let mut d_input = vec![0.0; n];
    let mut d_weights = vec![0.0; m * n];
    for j in 0..m {
        let gj = g[j];
        let row = &w[j * n..(j + 1) * n];
        for k in 0..n {
            d_input[k] += row[k] * gj;
            d_weights[j * n + k] = gj * x[k];
        }
    }
    Ok((
        Tensor::vector(d_input),
        Tensor::new(vec![m, n], d_weights)?,
        upstream.clone(),
    ))
}

fn affine_dims(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    if input.shape().len() != 1 {
        return Err(Error::dim("affine(input)", input.shape(), &[input.len()]));
    }
    let n = input.len();
    match weights.shape() {
        &[m, k] if k == n => {
            if bias.shape() != [m] {
                return Err(Error::dim("affine(bias)", bias.shape(), &[m]));
            }
            Ok((m, n))
        }
        other => Err(Error::dim("affine(weights)", other, input.shape())),
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

fn conv_geom(input: &Tensor, kernels: &Tensor, stride: usize) -> Result<ConvGeom> {
    if stride != 1 && stride != 2 {
        return Err(Error::Config(format!("conv2d stride must be 1 or 2, got {stride}")));
    }
    let &[c, h, w] = input.shape() else {
        return Err(Error::dim("conv2d(input)", input.shape(), &[0, 0, 0]));
    };
    if h < 3 || w < 3 {
        return Err(Error::dim("conv2d(input)", input.shape(), &[c, 3, 3]));
    }
    match kernels.shape() {
        &[k, kc, 3, 3] if kc == c => Ok(ConvGeom {
            c,
            h,
            w,
            k,
            stride,
            oh: h.div_ceil(stride),
            ow: w.div_ceil(stride),
        }),
        other => Err(Error::dim("conv2d(kernels)", other, input.shape())),
    }
}

/// 3×3 cross-correlation with zero padding 1. Output is `k × ⌈h/s⌉ × ⌈w/s⌉`.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize) -> Result<Tensor> {
    let g = conv_geom(input, kernels, stride)?;
    let x = input.data();
    let kw = kernels.data();
    let mut out = vec![0.0; g.k * g.oh * g.ow];
    for o in 0..g.k {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut acc = 0.0;
                for ci in 0..g.c {
                    let kbase = (o * g.c + ci) * 9;
                    let xbase = ci * g.h * g.w;
                    for dy in 0..3 {
                        let Some(iy) = (oy * g.stride + dy).checked_sub(1).filter(|&y| y < g.h)
                        else {
                            continue;
                        };
                        for dx in 0..3 {
                            let Some(ix) =
                                (ox * g.stride + dx).checked_sub(1).filter(|&x| x < g.w)
                            else {
                                continue;
                            };
                            acc += kw[kbase + dy * 3 + dx] * x[xbase + iy * g.w + ix];
                        }
                    }
                }
                out[(o * g.oh + oy) * g.ow + ox] = acc;
            }
        }
    }
    Tensor::new(vec![g.k, g.oh, g.ow], out)
}

/// Gradients of [`conv2d`] w.r.t. `(input, kernels)`.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let g = conv_geom(input, kernels, stride)?;
    if upstream.shape() != [g.k, g.oh, g.ow] {
        return Err(Error::dim("conv2d_backward", upstream.shape(), &[g.k, g.oh, g.ow]));
    }
    let x = input.data();
    let kw = kernels.data();
    let up = upstream.data();
    let mut d_input = vec![0.0; x.len()];
    let mut d_kernels = vec![0.0; kw.len()];
    for o in 0..g.k {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let gout = up[(o * g.oh + oy) * g.ow + ox];
                if gout == 0.0 {
                    continue;
                }
                for ci in 0..g.c {
                    let kbase = (o * g.c + ci) * 9;
                    let xbase = ci * g.h * g.w;
                    for dy in 0..3 {
                        let Some(iy) = (oy * g.stride + dy).checked_sub(1).filter(|&y| y < g.h)
                        else {
                            continue;
                        };
                        for dx in 0..3 {
                            let Some(ix) =
                                (ox * g.stride + dx).checked_sub(1).filter(|&x| x < g.w)
                            else {
                                continue;
                            };
                            let xi = xbase + iy * g.w + ix;
                            let ki = kbase + dy * 3 + dx;
                            d_kernels[ki] += gout * x[xi];
                            d_input[xi] += gout * kw[ki];
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), d_input)?,
        Tensor::new(kernels.shape().to_vec(), d_kernels)?,
    ))
}

/// Logistic function, stable for any finite input.
pub fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(z: &Tensor) -> Tensor {
    z.map(sigmoid_scalar)
}

/// Takes the sigmoid *output*.
pub fn sigmoid_backward(output: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    zip_with("sigmoid_backward", output, upstream, |s, g| g * s * (1.0 - s))
}

pub fn tanh(z: &Tensor) -> Tensor {
    z.map(f64::tanh)
}

/// Takes the tanh *output*.
pub fn tanh_backward(output: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    zip_with("tanh_backward", output, upstream, |t, g| g * (1.0 - t * t))
}

pub fn relu(z: &Tensor) -> Tensor {
    z.map(|v| v.max(0.0))
}

/// Takes the relu *input*.
pub fn relu_backward(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    zip_with("relu_backward", input, upstream, |x, g| if x > 0.0 { g } else { 0.0 })
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn add_backward(upstream: &Tensor) -> (Tensor, Tensor) {
    (upstream.clone(), upstream.clone())
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("mul", a, b, |x, y| x * y)
}

pub fn mul_backward(a: &Tensor, b: &Tensor, upstream: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((
        zip_with("mul_backward", b, upstream, |y, g| y * g)?,
        zip_with("mul_backward", a, upstream, |x, g| x * g)?,
    ))
}

fn zip_with(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn nested_loop_matvec(x: &[f64], w: &[f64], b: &[f64], m: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m];
        for j in 0..m {
            let mut s = 0.0;
            for k in 0..n {
                s += w[j * n + k] * x[k];
            }
            out[j] = s + b[j];
        }
        out
    }

    /// Direct six-loop cross-correlation with explicit padding test.
    fn naive_conv(x: &Tensor, kern: &Tensor, stride: usize) -> Vec<f64> {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let k = kern.shape()[0];
        let (oh, ow) = ((h + stride - 1) / stride, (w + stride - 1) / stride);
        let mut out = vec![0.0; k * oh * ow];
        for o in 0..k {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ci in 0..c {
                        for dy in 0..3i64 {
                            for dx in 0..3i64 {
                                let iy = (oy * stride) as i64 + dy - 1;
                                let ix = (ox * stride) as i64 + dx - 1;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                    continue;
                                }
                                out[(o * oh + oy) * ow + ox] += kern.data()
                                    [((o * c + ci) * 3 + dy as usize) * 3 + dx as usize]
                                    * x.data()[(ci * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn affine_identity_and_hand_sum() {
        let out = affine(
            &Tensor::vector(vec![1.0, 2.0]),
            &t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]),
            &Tensor::vector(vec![0.0, 0.0]),
        )
        .unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);

        let out = affine(
            &Tensor::vector(vec![1.0, 1.0]),
            &t(&[1, 2], &[2.0, 3.0]),
            &Tensor::vector(vec![1.0]),
        )
        .unwrap();
        assert_eq!(out.data(), &[6.0]);
    }

    #[test]
    fn affine_matches_nested_loops() {
        let s = RngStream::new(11, 0);
        let x = Tensor::random_uniform(&[3], -2.0, 2.0, s.derive(0));
        let w = Tensor::random_uniform(&[4, 3], -2.0, 2.0, s.derive(1));
        let b = Tensor::random_uniform(&[4], -2.0, 2.0, s.derive(2));
        let out = affine(&x, &w, &b).unwrap();
        let oracle = nested_loop_matvec(x.data(), w.data(), b.data(), 4, 3);
        for (a, e) in out.data().iter().zip(&oracle) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_shape_errors_name_both_shapes() {
        let err = affine(
            &Tensor::vector(vec![1.0, 2.0, 3.0]),
            &Tensor::zeros(&[2, 2]),
            &Tensor::zeros(&[2]),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn conv_zero_input() {
        let x = Tensor::zeros(&[2, 5, 5]);
        let k = Tensor::random_normal(&[3, 2, 3, 3], 1.0, RngStream::new(1, 1));
        assert!(conv2d(&x, &k, 1).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(conv2d(&x, &k, 2).unwrap().shape(), &[3, 3, 3]);
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let x = Tensor::random_uniform(&[1, 3, 3], 0.0, 1.0, RngStream::new(2, 0));
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        assert_eq!(conv2d(&x, &k, 1).unwrap(), x);
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let s = RngStream::new(3, 0);
        let x = Tensor::random_uniform(&[2, 5, 5], -2.0, 2.0, s.derive(0));
        let k = Tensor::random_uniform(&[3, 2, 3, 3], -2.0, 2.0, s.derive(1));
        for stride in [1, 2] {
            let out = conv2d(&x, &k, stride).unwrap();
            let oracle = naive_conv(&x, &k, stride);
            assert_eq!(out.len(), oracle.len());
            for (a, e) in out.data().iter().zip(&oracle) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_rejects_bad_stride() {
        let x = Tensor::zeros(&[1, 4, 4]);
        let k = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(matches!(conv2d(&x, &k, 3), Err(Error::Config(_))));
        assert!(matches!(conv2d(&x, &k, 0), Err(Error::Config(_))));
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!((sigmoid_scalar(40.0) - 1.0).abs() <= 1e-15);
        assert!((sigmoid_scalar(3f64.ln()) - 0.75).abs() < 1e-15);
        for z in [-500.0, -40.0, 40.0, 500.0] {
            let s = sigmoid_scalar(z);
            assert!(s.is_finite() && (0.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn sigmoid_grad_at_zero() {
        let out = sigmoid(&Tensor::vector(vec![0.0]));
        let g = sigmoid_backward(&out, &Tensor::vector(vec![1.0])).unwrap();
        assert_eq!(g.data(), &[0.25]);
    }
}
