//! Batched 2D cross-correlation via im2col + GEMM.

use super::graph::{Function, Graph, Var};
use super::linalg::gemm;
use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `(k - 1) / 2` on every side.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    fn new(input: &[usize], kernel: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        let (batch, c_in, h, w) = match *input {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::shape("conv2d", input, kernel)),
        };
        let [c_out, kc, kh, kw] = *kernel else {
            return Err(Error::shape("conv2d", input, kernel));
        };
        if kc != c_in || kh != kw || stride == 0 {
            return Err(Error::shape("conv2d", input, kernel));
        }
        let k = kh;
        let pad = match padding {
            Padding::Same => (k - 1) / 2,
            Padding::Valid => 0,
        };
        if k > h + 2 * pad || k > w + 2 * pad {
            return Err(Error::shape("conv2d", input, kernel));
        }
        Ok(Self {
            batch,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn out_plane(&self) -> usize {
        self.h_out * self.w_out
    }

    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    /// 1x1, stride 1, no padding: im2col is the identity.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let plane = self.out_plane();
        for c in 0..self.c_in {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.h_out {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let dst_row = &mut dst[oy * self.w_out..(oy + 1) * self.w_out];
                        if iy < 0 || iy >= self.h as isize {
                            dst_row.fill(0.0);
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let plane = self.out_plane();
        dx.fill(0.0);
        for c in 0..self.c_in {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.h_out {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dx[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.w_out {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, x: &[f64], kernel: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
        let out_len = self.c_out * self.out_plane();
        let mut out = vec![0.0; self.batch * out_len];
        let plane = self.out_plane();
        parallel::for_each_chunk(&mut out, out_len, |n, y| {
            let xs = &x[n * self.in_len()..(n + 1) * self.in_len()];
            let owned;
            let cols: &[f64] = if self.is_pointwise() {
                xs
            } else {
                let mut buf = vec![0.0; self.patch() * plane];
                self.im2col(xs, &mut buf);
                owned = buf;
                &owned
            };
            gemm(self.c_out, self.patch(), plane, 1.0, kernel, false, cols, false, 0.0, y);
            if let Some(b) = bias {
                for (o, row) in y.chunks_mut(plane).enumerate() {
                    row.iter_mut().for_each(|v| *v += b[o]);
                }
            }
        });
        out
    }
}

struct Conv2d {
    geom: ConvGeom,
    has_bias: bool,
}

impl Function for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let g = &self.geom;
        let x = inputs[0].data();
        let kernel = inputs[1].data();
        let gy = grad.data();
        let plane = g.out_plane();
        let out_len = g.c_out * plane;

        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; g.batch * g.in_len()];
            parallel::for_each_chunk(&mut dx, g.in_len(), |n, dxs| {
                let gys = &gy[n * out_len..(n + 1) * out_len];
                if g.is_pointwise() {
                    gemm(g.c_in, g.c_out, plane, 1.0, kernel, true, gys, false, 0.0, dxs);
                } else {
                    let mut dcols = vec![0.0; g.patch() * plane];
                    gemm(g.patch(), g.c_out, plane, 1.0, kernel, true, gys, false, 0.0, &mut dcols);
                    g.col2im(&dcols, dxs);
                }
            });
            Tensor::from_parts(inputs[0].shape().to_vec(), dx)
        });

        let dk = needs[1].then(|| {
            let partials = parallel::map_range(g.batch, |n| {
                let xs = &x[n * g.in_len()..(n + 1) * g.in_len()];
                let gys = &gy[n * out_len..(n + 1) * out_len];
                let mut dk = vec![0.0; g.c_out * g.patch()];
                if g.is_pointwise() {
                    gemm(g.c_out, plane, g.c_in, 1.0, gys, false, xs, true, 0.0, &mut dk);
                } else {
                    let mut cols = vec![0.0; g.patch() * plane];
                    g.im2col(xs, &mut cols);
                    gemm(g.c_out, plane, g.patch(), 1.0, gys, false, &cols, true, 0.0, &mut dk);
                }
                dk
            });
            let mut total = vec![0.0; g.c_out * g.patch()];
            for p in &partials {
                total.iter_mut().zip(p).for_each(|(t, v)| *t += v);
            }
            Tensor::from_parts(inputs[1].shape().to_vec(), total)
        });

        let mut result = vec![dx, dk];
        if self.has_bias {
            let db = needs[2].then(|| {
                let mut db = vec![0.0; g.c_out];
                for n in 0..g.batch {
                    for (o, acc) in db.iter_mut().enumerate() {
                        let start = n * out_len + o * plane;
                        *acc += gy[start..start + plane].iter().sum::<f64>();
                    }
                }
                Tensor::from_parts(vec![g.c_out], db)
            });
            result.push(db);
        }
        result
    }
}

impl Graph {
    /// Cross-correlation of `input` (`C×H×W` or `N×C×H×W`) with `kernel`
    /// (`C_out×C_in×k×k`), plus an optional per-output-channel bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(input), self.shape(kernel), stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.c_out] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[geom.c_out]));
            }
        }
        let data = geom.forward(
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let shape = if self.shape(input).len() == 3 {
            vec![geom.c_out, geom.h_out, geom.w_out]
        } else {
            vec![geom.batch, geom.c_out, geom.h_out, geom.w_out]
        };
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.apply(
            Conv2d {
                geom,
                has_bias: bias.is_some(),
            },
            &inputs,
            Tensor::from_parts(shape, data),
        ))
    }
}

/// Plain conv2d on tensors, outside any graph.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let k = g.constant(kernel.clone());
    let y = g.conv2d(x, k, None, stride, padding)?;
    Ok(g.value(y).clone())
}
