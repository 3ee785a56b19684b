//! Reverse-mode differentiation over a per-example tape.
//!
//! A [`Graph`] records every operation with its forward value. `backward`
//! walks the tape in reverse and accumulates parameter gradients into a
//! [`Grads`]. Images and feature maps are channel-major `[c][h][w]`.

use super::params::{Grads, ParamId, ParamSet};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Linear {
        x: Var,
        w: ParamId,
        b: ParamId,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Slice {
        x: Var,
        start: usize,
    },
    Concat(Vec<Var>),
    Conv3x3 {
        x: Var,
        w: ParamId,
        b: ParamId,
        c_in: usize,
        h: usize,
        wd: usize,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    ConvT2x2 {
        x: Var,
        w: ParamId,
        b: ParamId,
        c_in: usize,
        h: usize,
        wd: usize,
    },
    SquaredError {
        x: Var,
        target: Vec<f64>,
    },
    SquaredDistance(Var, Var),
    CosineDistance(Var, Var),
    SoftmaxCrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Vec<f64>,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let value = &self.nodes[v.0].value;
        debug_assert_eq!(value.len(), 1);
        value[0]
    }

    pub fn len(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn input(&mut self, values: Vec<f64>) -> Var {
        self.push(values, Op::Input)
    }

    /// `w x + b` with `w` stored row-major as `[out][in]`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = self.params.values(w);
        let bv = self.params.values(b);
        let n_in = xv.len();
        assert_eq!(wv.len(), bv.len() * n_in, "linear layer shape mismatch");
        let out = bv
            .iter()
            .zip(wv.chunks_exact(n_in))
            .map(|(b, row)| b + row.iter().zip(xv).map(|(w, x)| w * x).sum::<f64>())
            .collect();
        self.push(out, Op::Linear { x, w, b })
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.len(), bv.len(), "elementwise shape mismatch");
        let out = av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect();
        self.push(out, op)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.map(a, |x| x * factor, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.nodes[x.0].value[start..start + len].to_vec();
        self.push(out, Op::Slice { x, start })
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        self.push(out, Op::Concat(parts.to_vec()))
    }

    /// 3×3 convolution, stride 1, zero padding 1. Weights `[c_out][c_in][3][3]`.
    pub fn conv3x3(&mut self, x: Var, w: ParamId, b: ParamId, c_in: usize, h: usize, wd: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = self.params.values(w);
        let bv = self.params.values(b);
        let c_out = bv.len();
        assert_eq!(xv.len(), c_in * h * wd, "conv input shape mismatch");
        assert_eq!(wv.len(), c_out * c_in * 9, "conv weight shape mismatch");
        let plane = h * wd;
        let mut out = vec![0.0; c_out * plane];
        for co in 0..c_out {
            let o = &mut out[co * plane..(co + 1) * plane];
            o.iter_mut().for_each(|v| *v = bv[co]);
            for ci in 0..c_in {
                let inp = &xv[ci * plane..(ci + 1) * plane];
                for ky in 0..3 {
                    let (y0, y1) = (1usize.saturating_sub(ky), (h + 1 - ky).min(h));
                    for kx in 0..3 {
                        let weight = wv[((co * c_in + ci) * 3 + ky) * 3 + kx];
                        let (x0, x1) = (1usize.saturating_sub(kx), (wd + 1 - kx).min(wd));
                        for y in y0..y1 {
                            let src = (y + ky - 1) * wd;
                            let orow = &mut o[y * wd + x0..y * wd + x1];
                            let irow = &inp[src + x0 + kx - 1..src + x1 + kx - 1];
                            for (ov, iv) in orow.iter_mut().zip(irow) {
                                *ov += weight * iv;
                            }
                        }
                    }
                }
            }
        }
        self.push(out, Op::Conv3x3 { x, w, b, c_in, h, wd })
    }

    /// 2×2 max pooling, stride 2, over `channels` planes of `h × wd` (both even).
    pub fn max_pool2(&mut self, x: Var, channels: usize, h: usize, wd: usize) -> Var {
        assert!(h % 2 == 0 && wd % 2 == 0, "max pool needs even sides");
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.len(), channels * h * wd);
        let (oh, ow) = (h / 2, wd / 2);
        let mut out = Vec::with_capacity(channels * oh * ow);
        let mut argmax = Vec::with_capacity(channels * oh * ow);
        for c in 0..channels {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = usize::MAX;
                    let mut best_v = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = c * h * wd + (2 * y + dy) * wd + 2 * xx + dx;
                            if xv[idx] > best_v || best == usize::MAX {
                                best_v = xv[idx];
                                best = idx;
                            }
                        }
                    }
                    out.push(best_v);
                    argmax.push(best);
                }
            }
        }
        self.push(out, Op::MaxPool2 { x, argmax })
    }

    /// 2×2 transposed convolution with stride 2 (each input pixel paints a 2×2 block).
    /// Weights `[c_in][c_out][2][2]`.
    pub fn conv_transpose2x2(&mut self, x: Var, w: ParamId, b: ParamId, c_in: usize, h: usize, wd: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = self.params.values(w);
        let bv = self.params.values(b);
        let c_out = bv.len();
        assert_eq!(xv.len(), c_in * h * wd, "transposed conv input shape mismatch");
        assert_eq!(wv.len(), c_in * c_out * 4, "transposed conv weight shape mismatch");
        let (oh, ow) = (2 * h, 2 * wd);
        let mut out = vec![0.0; c_out * oh * ow];
        for co in 0..c_out {
            out[co * oh * ow..(co + 1) * oh * ow]
                .iter_mut()
                .for_each(|v| *v = bv[co]);
        }
        for ci in 0..c_in {
            let inp = &xv[ci * h * wd..(ci + 1) * h * wd];
            for co in 0..c_out {
                let k = &wv[(ci * c_out + co) * 4..(ci * c_out + co) * 4 + 4];
                let o = &mut out[co * oh * ow..(co + 1) * oh * ow];
                for y in 0..h {
                    for xx in 0..wd {
                        let v = inp[y * wd + xx];
                        let base = 2 * y * ow + 2 * xx;
                        o[base] += v * k[0];
                        o[base + 1] += v * k[1];
                        o[base + ow] += v * k[2];
                        o[base + ow + 1] += v * k[3];
                    }
                }
            }
        }
        self.push(out, Op::ConvT2x2 { x, w, b, c_in, h, wd })
    }

    /// `sum (x - target)^2`.
    pub fn squared_error(&mut self, x: Var, target: Vec<f64>) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.len() != target.len() {
            return Err(Error::Shape(format!(
                "reconstruction has {} values, target has {}",
                xv.len(),
                target.len()
            )));
        }
        let loss = xv.iter().zip(&target).map(|(a, t)| (a - t) * (a - t)).sum();
        Ok(self.push(vec![loss], Op::SquaredError { x, target }))
    }

    /// `|a - b|^2`.
    pub fn squared_distance(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.len(), bv.len());
        let d = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum();
        self.push(vec![d], Op::SquaredDistance(a, b))
    }

    /// `1 - a·b / (|a||b|)`.
    pub fn cosine_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (dot, aa, bb) = dot_norms(av, bv);
        if aa == 0.0 || bb == 0.0 {
            return Err(Error::DegenerateVector("zero-norm embedding".into()));
        }
        let d = 1.0 - dot / (aa * bb).sqrt();
        Ok(self.push(vec![d], Op::CosineDistance(a, b)))
    }

    /// Negative log-probability of `target` under a softmax over `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Var {
        let lv = &self.nodes[logits.0].value;
        let max = lv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = lv.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let loss = -(lv[target] - max - z.ln());
        self.push(vec![loss], Op::SoftmaxCrossEntropy { logits, target, probs })
    }

    /// Accumulates d(loss)/d(param) into `grads`. `loss` must be a scalar.
    pub fn backward(&self, loss: Var, grads: &mut Grads) {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward from a non-scalar");
        let mut g: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Linear { x, w, b } => {
                    let xv = &self.nodes[x.0].value;
                    let n_in = xv.len();
                    let wv = self.params.values(*w);
                    {
                        let gb = grads.get_mut(*b);
                        for (d, s) in gb.iter_mut().zip(&gi) {
                            *d += s;
                        }
                    }
                    {
                        let gw = grads.get_mut(*w);
                        for (row, &s) in gw.chunks_exact_mut(n_in).zip(&gi) {
                            if s != 0.0 {
                                for (d, xv) in row.iter_mut().zip(xv) {
                                    *d += s * xv;
                                }
                            }
                        }
                    }
                    let gx = slot(&mut g, *x, n_in);
                    for (row, &s) in wv.chunks_exact(n_in).zip(&gi) {
                        if s != 0.0 {
                            for (d, w) in gx.iter_mut().zip(row) {
                                *d += s * w;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut g, *a, &gi);
                    accumulate(&mut g, *b, &gi);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut g, *a, &gi);
                    let gb = slot(&mut g, *b, gi.len());
                    for (d, s) in gb.iter_mut().zip(&gi) {
                        *d -= s;
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga: Vec<f64> = gi.iter().zip(bv).map(|(s, y)| s * y).collect();
                    let gb: Vec<f64> = gi.iter().zip(av).map(|(s, x)| s * x).collect();
                    accumulate(&mut g, *a, &ga);
                    accumulate(&mut g, *b, &gb);
                }
                Op::Scale(a, f) => {
                    let ga: Vec<f64> = gi.iter().map(|s| s * f).collect();
                    accumulate(&mut g, *a, &ga);
                }
                Op::AddScalar(a) => accumulate(&mut g, *a, &gi),
                Op::Sigmoid(a) => {
                    let ga: Vec<f64> = gi
                        .iter()
                        .zip(&node.value)
                        .map(|(s, y)| s * y * (1.0 - y))
                        .collect();
                    accumulate(&mut g, *a, &ga);
                }
                Op::Tanh(a) => {
                    let ga: Vec<f64> = gi
                        .iter()
                        .zip(&node.value)
                        .map(|(s, y)| s * (1.0 - y * y))
                        .collect();
                    accumulate(&mut g, *a, &ga);
                }
                Op::Relu(a) => {
                    let av = &self.nodes[a.0].value;
                    let ga: Vec<f64> = gi
                        .iter()
                        .zip(av)
                        .map(|(s, x)| if *x > 0.0 { *s } else { 0.0 })
                        .collect();
                    accumulate(&mut g, *a, &ga);
                }
                Op::Slice { x, start } => {
                    let n = self.nodes[x.0].value.len();
                    let gx = slot(&mut g, *x, n);
                    for (d, s) in gx[*start..*start + gi.len()].iter_mut().zip(&gi) {
                        *d += s;
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.len();
                        accumulate(&mut g, *p, &gi[offset..offset + n]);
                        offset += n;
                    }
                }
                Op::Conv3x3 { x, w, b, c_in, h, wd } => {
                    self.conv3x3_backward(&gi, *x, *w, *b, *c_in, *h, *wd, &mut g, grads);
                }
                Op::MaxPool2 { x, argmax } => {
                    let n = self.nodes[x.0].value.len();
                    let gx = slot(&mut g, *x, n);
                    for (s, &idx) in gi.iter().zip(argmax) {
                        gx[idx] += s;
                    }
                }
                Op::ConvT2x2 { x, w, b, c_in, h, wd } => {
                    self.conv_t_backward(&gi, *x, *w, *b, *c_in, *h, *wd, &mut g, grads);
                }
                Op::SquaredError { x, target } => {
                    let xv = &self.nodes[x.0].value;
                    let s = gi[0];
                    let gx: Vec<f64> = xv.iter().zip(target).map(|(a, t)| 2.0 * s * (a - t)).collect();
                    accumulate(&mut g, *x, &gx);
                }
                Op::SquaredDistance(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let s = gi[0];
                    let ga: Vec<f64> = av.iter().zip(bv).map(|(x, y)| 2.0 * s * (x - y)).collect();
                    let gb: Vec<f64> = ga.iter().map(|v| -v).collect();
                    accumulate(&mut g, *a, &ga);
                    accumulate(&mut g, *b, &gb);
                }
                Op::CosineDistance(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (dot, aa, bb) = dot_norms(av, bv);
                    let norm = (aa * bb).sqrt();
                    let sim = dot / norm;
                    let s = gi[0];
                    // d(1 - sim)/da = -(b / (|a||b|) - sim * a / |a|^2)
                    let ga: Vec<f64> = av
                        .iter()
                        .zip(bv)
                        .map(|(x, y)| -s * (y / norm - sim * x / aa))
                        .collect();
                    let gb: Vec<f64> = av
                        .iter()
                        .zip(bv)
                        .map(|(x, y)| -s * (x / norm - sim * y / bb))
                        .collect();
                    accumulate(&mut g, *a, &ga);
                    accumulate(&mut g, *b, &gb);
                }
                Op::SoftmaxCrossEntropy { logits, target, probs } => {
                    let s = gi[0];
                    let gl: Vec<f64> = probs
                        .iter()
                        .enumerate()
                        .map(|(k, p)| s * (p - if k == *target { 1.0 } else { 0.0 }))
                        .collect();
                    accumulate(&mut g, *logits, &gl);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv3x3_backward(
        &self,
        gout: &[f64],
        x: Var,
        w: ParamId,
        b: ParamId,
        c_in: usize,
        h: usize,
        wd: usize,
        g: &mut [Option<Vec<f64>>],
        grads: &mut Grads,
    ) {
        let xv = &self.nodes[x.0].value;
        let wv = self.params.values(w);
        let plane = h * wd;
        let c_out = self.params.values(b).len();
        {
            let gb = grads.get_mut(b);
            for co in 0..c_out {
                gb[co] += gout[co * plane..(co + 1) * plane].iter().sum::<f64>();
            }
        }
        let mut gw_local = vec![0.0; wv.len()];
        let mut gx = vec![0.0; xv.len()];
        for co in 0..c_out {
            let go = &gout[co * plane..(co + 1) * plane];
            for ci in 0..c_in {
                let inp = &xv[ci * plane..(ci + 1) * plane];
                let gin = &mut gx[ci * plane..(ci + 1) * plane];
                for ky in 0..3 {
                    let (y0, y1) = (1usize.saturating_sub(ky), (h + 1 - ky).min(h));
                    for kx in 0..3 {
                        let widx = ((co * c_in + ci) * 3 + ky) * 3 + kx;
                        let weight = wv[widx];
                        let (x0, x1) = (1usize.saturating_sub(kx), (wd + 1 - kx).min(wd));
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let src = (y + ky - 1) * wd + x0 + kx - 1;
                            let grow = &go[y * wd + x0..y * wd + x1];
                            let irow = &inp[src..src + x1 - x0];
                            for (gv, iv) in grow.iter().zip(irow) {
                                acc += gv * iv;
                            }
                            let girow = &mut gin[src..src + x1 - x0];
                            for (d, gv) in girow.iter_mut().zip(grow) {
                                *d += weight * gv;
                            }
                        }
                        gw_local[widx] += acc;
                    }
                }
            }
        }
        for (d, s) in grads.get_mut(w).iter_mut().zip(&gw_local) {
            *d += s;
        }
        accumulate(g, x, &gx);
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_t_backward(
        &self,
        gout: &[f64],
        x: Var,
        w: ParamId,
        b: ParamId,
        c_in: usize,
        h: usize,
        wd: usize,
        g: &mut [Option<Vec<f64>>],
        grads: &mut Grads,
    ) {
        let xv = &self.nodes[x.0].value;
        let wv = self.params.values(w);
        let c_out = self.params.values(b).len();
        let (oh, ow) = (2 * h, 2 * wd);
        {
            let gb = grads.get_mut(b);
            for co in 0..c_out {
                gb[co] += gout[co * oh * ow..(co + 1) * oh * ow].iter().sum::<f64>();
            }
        }
        let mut gw_local = vec![0.0; wv.len()];
        let mut gx = vec![0.0; xv.len()];
        for ci in 0..c_in {
            let inp = &xv[ci * h * wd..(ci + 1) * h * wd];
            for co in 0..c_out {
                let kbase = (ci * c_out + co) * 4;
                let k = &wv[kbase..kbase + 4];
                let go = &gout[co * oh * ow..(co + 1) * oh * ow];
                let mut acc = [0.0; 4];
                for y in 0..h {
                    for xx in 0..wd {
                        let base = 2 * y * ow + 2 * xx;
                        let gs = [go[base], go[base + 1], go[base + ow], go[base + ow + 1]];
                        let v = inp[y * wd + xx];
                        let mut gsum = 0.0;
                        for q in 0..4 {
                            acc[q] += v * gs[q];
                            gsum += k[q] * gs[q];
                        }
                        gx[ci * h * wd + y * wd + xx] += gsum;
                    }
                }
                for q in 0..4 {
                    gw_local[kbase + q] += acc[q];
                }
            }
        }
        for (d, s) in grads.get_mut(w).iter_mut().zip(&gw_local) {
            *d += s;
        }
        accumulate(g, x, &gx);
    }
}

fn dot_norms(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    assert_eq!(a.len(), b.len(), "cosine distance shape mismatch");
    let (mut dot, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        aa += x * x;
        bb += y * y;
    }
    (dot, aa, bb)
}

fn slot(g: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
    g[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn accumulate(g: &mut [Option<Vec<f64>>], v: Var, src: &[f64]) {
    let dst = slot(g, v, src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
