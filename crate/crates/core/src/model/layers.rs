//! Planar tensor kernels used by the network: same-padded convolution,
//! 2x2 max pooling, nearest upsampling and ReLU, each with its backward pass.

/// Channel-major (`c`, `h`, `w`) activation tensor.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f64] {
        let hw = self.h * self.w;
        &self.data[c * hw..(c + 1) * hw]
    }

    /// Stacks `a` on top of `b` along the channel axis.
    pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
        debug_assert!(a.h == b.h && a.w == b.w);
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor {
            c: a.c + b.c,
            h: a.h,
            w: a.w,
            data,
        }
    }

    /// Splits off the first `c` channels.
    pub fn split(self, c: usize) -> (Tensor, Tensor) {
        let hw = self.h * self.w;
        let mut data = self.data;
        let rest = data.split_off(c * hw);
        (
            Tensor {
                c,
                h: self.h,
                w: self.w,
                data,
            },
            Tensor {
                c: self.c - c,
                h: self.h,
                w: self.w,
                data: rest,
            },
        )
    }
}

/// Valid output range `[lo, hi)` along one axis for a tap at offset `d`.
#[inline]
fn span(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).clamp(0, len as isize) as usize;
    (lo, hi.max(lo))
}

/// Zero-padded `k`×`k` convolution, weights laid out `[out][in][ky][kx]`.
pub(crate) fn conv_forward(input: &Tensor, weight: &[f64], bias: &[f64], out_c: usize, k: usize) -> Tensor {
    let (h, w, in_c) = (input.h, input.w, input.c);
    let hw = h * w;
    let pad = (k / 2) as isize;
    let mut out = Tensor::zeros(out_c, h, w);
    for (o, plane) in out.data.chunks_exact_mut(hw).enumerate() {
        plane.fill(bias[o]);
        for i in 0..in_c {
            let src = input.plane(i);
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = span(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = span(w, dx);
                    let wt = weight[((o * in_c + i) * k + ky) * k + kx];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let s0 = (sy * w) as isize + x0 as isize + dx;
                        let s = &src[s0 as usize..s0 as usize + (x1 - x0)];
                        let d = &mut plane[y * w + x0..y * w + x1];
                        for (dv, sv) in d.iter_mut().zip(s) {
                            *dv += wt * sv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients; returns the input gradient when `want_input`.
pub(crate) fn conv_backward(
    input: &Tensor,
    weight: &[f64],
    grad_out: &Tensor,
    k: usize,
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    want_input: bool,
) -> Option<Tensor> {
    let (h, w, in_c) = (input.h, input.w, input.c);
    let out_c = grad_out.c;
    let pad = (k / 2) as isize;
    let mut grad_in = want_input.then(|| Tensor::zeros(in_c, h, w));
    for (o, gb) in grad_bias.iter_mut().enumerate().take(out_c) {
        let go = grad_out.plane(o);
        *gb += go.iter().sum::<f64>();
        for i in 0..in_c {
            let src = input.plane(i);
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = span(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = span(w, dx);
                    let widx = ((o * in_c + i) * k + ky) * k + kx;
                    let wt = weight[widx];
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let s0 = ((sy * w) as isize + x0 as isize + dx) as usize;
                        let g = &go[y * w + x0..y * w + x1];
                        let s = &src[s0..s0 + (x1 - x0)];
                        acc += g.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                        if let Some(gi) = grad_in.as_mut() {
                            let hw = h * w;
                            let d = &mut gi.data[i * hw + s0..i * hw + s0 + (x1 - x0)];
                            for (dv, gv) in d.iter_mut().zip(g) {
                                *dv += wt * gv;
                            }
                        }
                    }
                    grad_weight[widx] += acc;
                }
            }
        }
    }
    grad_in
}

pub(crate) fn relu_inplace(t: &mut Tensor) {
    for v in &mut t.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes gradient entries where the ReLU output was not positive.
pub(crate) fn relu_backward(out: &Tensor, grad: &mut Tensor) {
    for (g, o) in grad.data.iter_mut().zip(&out.data) {
        if *o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2 max pooling with floor semantics. Returns the pooled tensor and the
/// flat source index of each maximum.
pub(crate) fn maxpool_forward(input: &Tensor) -> (Tensor, Vec<usize>) {
    let (h2, w2) = (input.h / 2, input.w / 2);
    let mut out = Tensor::zeros(input.c, h2, w2);
    let mut arg = vec![0usize; input.c * h2 * w2];
    let hw = input.h * input.w;
    for c in 0..input.c {
        for y in 0..h2 {
            for x in 0..w2 {
                let mut best = c * hw + 2 * y * input.w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = c * hw + (2 * y + dy) * input.w + 2 * x + dx;
                    if input.data[idx] > input.data[best] {
                        best = idx;
                    }
                }
                let o = (c * h2 + y) * w2 + x;
                out.data[o] = input.data[best];
                arg[o] = best;
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool_backward(grad_out: &Tensor, arg: &[usize], c: usize, h: usize, w: usize) -> Tensor {
    let mut g = Tensor::zeros(c, h, w);
    for (gv, idx) in grad_out.data.iter().zip(arg) {
        g.data[*idx] += gv;
    }
    g
}

/// Nearest-neighbour upsampling to an explicit target size (`src = min(dst / 2, last)`).
pub(crate) fn upsample_forward(input: &Tensor, h: usize, w: usize) -> Tensor {
    let mut out = Tensor::zeros(input.c, h, w);
    let hw_in = input.h * input.w;
    for c in 0..input.c {
        for y in 0..h {
            let sy = (y / 2).min(input.h - 1);
            for x in 0..w {
                let sx = (x / 2).min(input.w - 1);
                out.data[(c * h + y) * w + x] = input.data[c * hw_in + sy * input.w + sx];
            }
        }
    }
    out
}

pub(crate) fn upsample_backward(grad_out: &Tensor, h_in: usize, w_in: usize) -> Tensor {
    let mut g = Tensor::zeros(grad_out.c, h_in, w_in);
    let (h, w) = (grad_out.h, grad_out.w);
    for c in 0..grad_out.c {
        for y in 0..h {
            let sy = (y / 2).min(h_in - 1);
            for x in 0..w {
                let sx = (x / 2).min(w_in - 1);
                g.data[(c * h_in + sy) * w_in + sx] += grad_out.data[(c * h + y) * w + x];
            }
        }
    }
    g
}
