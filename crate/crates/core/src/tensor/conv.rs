use super::Tensor;
use crate::error::{invalid, Error, Result};

/// Zero padding added before (`lo`) and after (`hi`) each spatial axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Padding {
    pub lo: usize,
    pub hi: usize,
}

impl Padding {
    /// Padding that keeps the spatial size unchanged at stride 1.
    pub fn same(k: usize) -> Self {
        let lo = (k - 1) / 2;
        Padding { lo, hi: k - 1 - lo }
    }
}

struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    oh: usize,
    ow: usize,
}

fn geometry(x_shape: &[usize], w_shape: &[usize], pad: Padding, stride: usize) -> Result<Geometry> {
    if x_shape.len() != 4 || w_shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            left: x_shape.to_vec(),
            right: w_shape.to_vec(),
        });
    }
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (o, c2, k, k2) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
    if c != c2 || k != k2 || k == 0 {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            left: x_shape.to_vec(),
            right: w_shape.to_vec(),
        });
    }
    if stride == 0 {
        return Err(invalid("conv2d stride must be at least 1"));
    }
    let ph = h + pad.lo + pad.hi;
    let pw = w + pad.lo + pad.hi;
    if ph < k || pw < k {
        return Err(invalid(format!(
            "kernel {k} larger than padded input {ph}x{pw}"
        )));
    }
    Ok(Geometry {
        n,
        c,
        h,
        w,
        o,
        k,
        oh: (ph - k) / stride + 1,
        ow: (pw - k) / stride + 1,
    })
}

/// 2-D cross-correlation of `x: [N, C, H, W]` with `w: [O, C, K, K]`.
pub fn conv2d(x: &Tensor, w: &Tensor, pad: Padding, stride: usize) -> Result<Tensor> {
    let g = geometry(x.shape(), w.shape(), pad, stride)?;
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0.0; g.n * g.o * g.oh * g.ow];
    for b in 0..g.n {
        for o in 0..g.o {
            let obase = (b * g.o + o) * g.oh * g.ow;
            for c in 0..g.c {
                let xbase = (b * g.c + c) * g.h * g.w;
                for i in 0..g.k {
                    for j in 0..g.k {
                        let wv = wd[((o * g.c + c) * g.k + i) * g.k + j];
                        if wv == 0.0 {
                            continue;
                        }
                        for y in 0..g.oh {
                            let r = (y * stride + i) as isize - pad.lo as isize;
                            if r < 0 || r >= g.h as isize {
                                continue;
                            }
                            let xrow = xbase + r as usize * g.w;
                            for z in 0..g.ow {
                                let s = (z * stride + j) as isize - pad.lo as isize;
                                if s < 0 || s >= g.w as isize {
                                    continue;
                                }
                                out[obase + y * g.ow + z] += wv * xd[xrow + s as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.n, g.o, g.oh, g.ow], out)
}

/// Adjoint of [`conv2d`] with respect to its input.
pub fn conv2d_grad_input(
    grad: &Tensor,
    w: &Tensor,
    x_shape: &[usize],
    pad: Padding,
    stride: usize,
) -> Result<Tensor> {
    let g = geometry(x_shape, w.shape(), pad, stride)?;
    if grad.shape() != [g.n, g.o, g.oh, g.ow] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_grad_input",
            left: grad.shape().to_vec(),
            right: vec![g.n, g.o, g.oh, g.ow],
        });
    }
    let (gd, wd) = (grad.data(), w.data());
    let mut out = vec![0.0; g.n * g.c * g.h * g.w];
    for b in 0..g.n {
        for o in 0..g.o {
            let obase = (b * g.o + o) * g.oh * g.ow;
            for c in 0..g.c {
                let xbase = (b * g.c + c) * g.h * g.w;
                for i in 0..g.k {
                    for j in 0..g.k {
                        let wv = wd[((o * g.c + c) * g.k + i) * g.k + j];
                        for y in 0..g.oh {
                            let r = (y * stride + i) as isize - pad.lo as isize;
                            if r < 0 || r >= g.h as isize {
                                continue;
                            }
                            let xrow = xbase + r as usize * g.w;
                            for z in 0..g.ow {
                                let s = (z * stride + j) as isize - pad.lo as isize;
                                if s < 0 || s >= g.w as isize {
                                    continue;
                                }
                                out[xrow + s as usize] += wv * gd[obase + y * g.ow + z];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(x_shape.to_vec(), out)
}

/// Adjoint of [`conv2d`] with respect to its kernel.
pub fn conv2d_grad_weight(
    grad: &Tensor,
    x: &Tensor,
    w_shape: &[usize],
    pad: Padding,
    stride: usize,
) -> Result<Tensor> {
    let g = geometry(x.shape(), w_shape, pad, stride)?;
    if grad.shape() != [g.n, g.o, g.oh, g.ow] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_grad_weight",
            left: grad.shape().to_vec(),
            right: vec![g.n, g.o, g.oh, g.ow],
        });
    }
    let (gd, xd) = (grad.data(), x.data());
    let mut out = vec![0.0; g.o * g.c * g.k * g.k];
    for b in 0..g.n {
        for o in 0..g.o {
            let obase = (b * g.o + o) * g.oh * g.ow;
            for c in 0..g.c {
                let xbase = (b * g.c + c) * g.h * g.w;
                for i in 0..g.k {
                    for j in 0..g.k {
                        let mut acc = 0.0;
                        for y in 0..g.oh {
                            let r = (y * stride + i) as isize - pad.lo as isize;
                            if r < 0 || r >= g.h as isize {
                                continue;
                            }
                            let xrow = xbase + r as usize * g.w;
                            for z in 0..g.ow {
                                let s = (z * stride + j) as isize - pad.lo as isize;
                                if s < 0 || s >= g.w as isize {
                                    continue;
                                }
                                acc += gd[obase + y * g.ow + z] * xd[xrow + s as usize];
                            }
                        }
                        out[((o * g.c + c) * g.k + i) * g.k + j] += acc;
                    }
                }
            }
        }
    }
    Tensor::new(w_shape.to_vec(), out)
}
