//! Minimal f32 layers with hand-written backward passes: 3x3 same-padding
//! convolution (im2col + sgemm), dense, SiLU, 2x2 average pooling and
//! nearest upsampling.

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Channel-major `(c, h, w)` activation.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Act {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Act {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn concat(a: &Act, b: &Act) -> Act {
        debug_assert_eq!((a.h, a.w), (b.h, b.w));
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Act {
            c: a.c + b.c,
            h: a.h,
            w: a.w,
            data,
        }
    }

    /// Splits channels into `[0, first)` and the rest.
    pub fn split(&self, first: usize) -> (Act, Act) {
        let n = first * self.hw();
        (
            Act {
                c: first,
                h: self.h,
                w: self.w,
                data: self.data[..n].to_vec(),
            },
            Act {
                c: self.c - first,
                h: self.h,
                w: self.w,
                data: self.data[n..].to_vec(),
            },
        )
    }

    pub fn add_assign(&mut self, other: &Act) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

pub(crate) fn silu_grad(x: f32) -> f32 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub(crate) fn silu_act(x: &Act) -> Act {
    Act {
        c: x.c,
        h: x.h,
        w: x.w,
        data: x.data.iter().map(|&v| silu(v)).collect(),
    }
}

/// `dy * silu'(pre)`.
pub(crate) fn silu_backward(pre: &Act, dy: &Act) -> Act {
    Act {
        c: pre.c,
        h: pre.h,
        w: pre.w,
        data: pre
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&p, &g)| g * silu_grad(p))
            .collect(),
    }
}

pub(crate) fn avg_pool2(x: &Act) -> Act {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut out = Act::zeros(x.c, h2, w2);
    for c in 0..x.c {
        let src = &x.data[c * x.hw()..(c + 1) * x.hw()];
        let dst = &mut out.data[c * h2 * w2..(c + 1) * h2 * w2];
        for r in 0..h2 {
            for col in 0..w2 {
                let i = 2 * r * x.w + 2 * col;
                dst[r * w2 + col] = 0.25 * (src[i] + src[i + 1] + src[i + x.w] + src[i + x.w + 1]);
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward(dy: &Act) -> Act {
    let (h, w) = (dy.h * 2, dy.w * 2);
    let mut dx = Act::zeros(dy.c, h, w);
    for c in 0..dy.c {
        for r in 0..h {
            for col in 0..w {
                dx.data[(c * h + r) * w + col] = 0.25 * dy.data[(c * dy.h + r / 2) * dy.w + col / 2];
            }
        }
    }
    dx
}

pub(crate) fn upsample2(x: &Act) -> Act {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Act::zeros(x.c, h, w);
    for c in 0..x.c {
        for r in 0..h {
            for col in 0..w {
                out.data[(c * h + r) * w + col] = x.data[(c * x.h + r / 2) * x.w + col / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(dy: &Act) -> Act {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Act::zeros(dy.c, h, w);
    for c in 0..dy.c {
        for r in 0..dy.h {
            for col in 0..dy.w {
                dx.data[(c * h + r / 2) * w + col / 2] += dy.data[(c * dy.h + r) * dy.w + col];
            }
        }
    }
    dx
}

/// 3x3 convolution, stride 1, zero padding 1. Weights are `(cout, cin, 3, 3)`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv2d {
    pub fn zeros(cin: usize, cout: usize) -> Self {
        Self {
            cin,
            cout,
            weight: vec![0.0; cout * cin * 9],
            bias: vec![0.0; cout],
        }
    }

    /// He-normal weights scaled by `gain`, zero bias.
    pub fn init(cin: usize, cout: usize, gain: f32, rng: &mut impl Rng) -> Self {
        let std = gain * (2.0 / (cin * 9) as f32).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        Self {
            cin,
            cout,
            weight: (0..cout * cin * 9).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; cout],
        }
    }

    fn k(&self) -> usize {
        self.cin * 9
    }

    pub fn forward(&self, x: &Act) -> Act {
        debug_assert_eq!(x.c, self.cin);
        let hw = x.hw();
        let col = im2col(x);
        let mut out = Act::zeros(self.cout, x.h, x.w);
        for (o, chunk) in out.data.chunks_mut(hw).enumerate() {
            chunk.fill(self.bias[o]);
        }
        // out (cout x hw) += W (cout x k) * col (k x hw)
        unsafe {
            matrixmultiply::sgemm(
                self.cout,
                self.k(),
                hw,
                1.0,
                self.weight.as_ptr(),
                self.k() as isize,
                1,
                col.as_ptr(),
                hw as isize,
                1,
                1.0,
                out.data.as_mut_ptr(),
                hw as isize,
                1,
            );
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Act, dy: &Act, grad: &mut Conv2d) -> Act {
        let hw = x.hw();
        let k = self.k();
        let col = im2col(x);
        unsafe {
            // dW (cout x k) += dY (cout x hw) * col^T (hw x k)
            matrixmultiply::sgemm(
                self.cout,
                hw,
                k,
                1.0,
                dy.data.as_ptr(),
                hw as isize,
                1,
                col.as_ptr(),
                1,
                hw as isize,
                1.0,
                grad.weight.as_mut_ptr(),
                k as isize,
                1,
            );
        }
        for (o, chunk) in dy.data.chunks(hw).enumerate() {
            grad.bias[o] += chunk.iter().sum::<f32>();
        }
        let mut dcol = vec![0.0f32; k * hw];
        unsafe {
            // dcol (k x hw) = W^T (k x cout) * dY (cout x hw)
            matrixmultiply::sgemm(
                k,
                self.cout,
                hw,
                1.0,
                self.weight.as_ptr(),
                1,
                k as isize,
                dy.data.as_ptr(),
                hw as isize,
                1,
                0.0,
                dcol.as_mut_ptr(),
                hw as isize,
                1,
            );
        }
        col2im(&dcol, x.c, x.h, x.w)
    }
}

fn im2col(x: &Act) -> Vec<f32> {
    let (h, w) = (x.h, x.w);
    let hw = h * w;
    let mut col = vec![0.0f32; x.c * 9 * hw];
    for c in 0..x.c {
        let src = &x.data[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let dst = &mut col[((c * 9) + ky * 3 + kx) * hw..((c * 9) + ky * 3 + kx + 1) * hw];
                for r in 0..h {
                    let sr = r as isize + ky as isize - 1;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    let srow = &src[sr as usize * w..(sr as usize + 1) * w];
                    let drow = &mut dst[r * w..(r + 1) * w];
                    match kx {
                        0 => drow[1..].copy_from_slice(&srow[..w - 1]),
                        1 => drow.copy_from_slice(srow),
                        _ => drow[..w - 1].copy_from_slice(&srow[1..]),
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &[f32], c_n: usize, h: usize, w: usize) -> Act {
    let hw = h * w;
    let mut x = Act::zeros(c_n, h, w);
    for c in 0..c_n {
        let dst = &mut x.data[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let src = &col[((c * 9) + ky * 3 + kx) * hw..((c * 9) + ky * 3 + kx + 1) * hw];
                for r in 0..h {
                    let sr = r as isize + ky as isize - 1;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[sr as usize * w..(sr as usize + 1) * w];
                    let srow = &src[r * w..(r + 1) * w];
                    match kx {
                        0 => drow[..w - 1]
                            .iter_mut()
                            .zip(&srow[1..])
                            .for_each(|(d, s)| *d += s),
                        1 => drow.iter_mut().zip(srow).for_each(|(d, s)| *d += s),
                        _ => drow[1..]
                            .iter_mut()
                            .zip(&srow[..w - 1])
                            .for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
    x
}

/// Dense layer, weights `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Linear {
    pub din: usize,
    pub dout: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn zeros(din: usize, dout: usize) -> Self {
        Self {
            din,
            dout,
            weight: vec![0.0; din * dout],
            bias: vec![0.0; dout],
        }
    }

    pub fn init(din: usize, dout: usize, gain: f32, rng: &mut impl Rng) -> Self {
        let std = gain * (1.0 / din as f32).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        Self {
            din,
            dout,
            weight: (0..din * dout).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; dout],
        }
    }

    pub fn forward(&self, x: &[f32]) -> Vec<f32> {
        (0..self.dout)
            .map(|o| {
                self.bias[o]
                    + self.weight[o * self.din..(o + 1) * self.din]
                        .iter()
                        .zip(x)
                        .map(|(a, b)| a * b)
                        .sum::<f32>()
            })
            .collect()
    }

    pub fn backward(&self, x: &[f32], dy: &[f32], grad: &mut Linear) -> Vec<f32> {
        let mut dx = vec![0.0; self.din];
        for o in 0..self.dout {
            grad.bias[o] += dy[o];
            for i in 0..self.din {
                grad.weight[o * self.din + i] += dy[o] * x[i];
                dx[i] += dy[o] * self.weight[o * self.din + i];
            }
        }
        dx
    }
}
