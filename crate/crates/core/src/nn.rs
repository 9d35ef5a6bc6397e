//! Minimal reverse-mode autodiff over 2-D `f64` arrays.
//!
//! A [`Tape`] records operations on channel-by-frame matrices; parameters
//! live in a [`ParamStore`] and are referenced, not copied, by the tape.
//! Waveforms are 1-by-T rows.

use ndarray::{s, Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter tensors in a fixed canonical order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn zeros_like(&self) -> Vec<Array2<f64>> {
        self.values.iter().map(|v| Array2::zeros(v.raw_dim())).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    PRelu(Var, Var),
    Sigmoid(Var),
    GlobalNorm(Var, f64),
    DepthwiseConv { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Upsample { x: Var },
    RowSelect { table: Var, row: usize },
    SliceRows { x: Var, start: usize },
    OverlapAdd { x: Var, hop: usize },
    L1 { x: Var, target: Array2<f64> },
}

struct Node {
    op: Op,
    value: Option<Array2<f64>>,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

/// Gradients with respect to every parameter of the store.
pub type ParamGrads = Vec<Array2<f64>>;

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::with_capacity(256) }
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        match &self.nodes[v.0] {
            Node { op: Op::Param(id), .. } => self.params.get(*id),
            Node { value: Some(val), .. } => val,
            Node { value: None, .. } => unreachable!("node without value"),
        }
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> Var {
        self.nodes.push(Node { op, value: Some(value) });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Const, value)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node { op: Op::Param(id), value: None });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    /// `x + b` with `b` a column broadcast over frames.
    pub fn add_col(&mut self, x: Var, b: Var) -> Var {
        let v = self.value(x) + self.value(b);
        self.push(Op::AddCol(x, b), v)
    }

    /// `x * g` with `g` a column broadcast over frames.
    pub fn mul_col(&mut self, x: Var, g: Var) -> Var {
        let v = self.value(x) * self.value(g);
        self.push(Op::MulCol(x, g), v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, x: Var, a: f64) -> Var {
        let v = self.value(x) * a;
        self.push(Op::Affine(x, a), v)
    }

    /// `a * x + b` elementwise.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        let v = self.value(x).mapv(|t| a * t + b);
        self.push(Op::Affine(x, a), v)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|t| t.max(0.0));
        self.push(Op::Relu(x), v)
    }

    /// Per-channel parametric ReLU; `slope` is a column.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Var {
        let mut v = self.value(x).clone();
        let a = self.value(slope);
        for (mut row, &ai) in v.outer_iter_mut().zip(a.column(0)) {
            row.mapv_inplace(|t| if t > 0.0 { t } else { ai * t });
        }
        self.push(Op::PRelu(x, slope), v)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|t| 1.0 / (1.0 + (-t).exp()));
        self.push(Op::Sigmoid(x), v)
    }

    /// Normalize by the mean and variance over all entries.
    pub fn global_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.len() as f64;
        let mean = xv.sum() / n;
        let var = xv.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + NORM_EPS).sqrt();
        let v = xv.mapv(|t| (t - mean) * inv_std);
        self.push(Op::GlobalNorm(x, inv_std), v)
    }

    /// Per-channel 1-D convolution with zero padding.
    pub fn depthwise_conv(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let (c, len) = xv.dim();
        let k = wv.ncols();
        let out_len = (len + 2 * pad - k) / stride + 1;
        let mut out = Array2::zeros((c, out_len));
        for ch in 0..c {
            let xr = xv.row(ch);
            let xr = xr.as_slice().expect("contiguous");
            let wr = wv.row(ch);
            let bias = bv[[ch, 0]];
            let mut orow = out.row_mut(ch);
            for (o, slot) in orow.iter_mut().enumerate() {
                let base = (o * stride) as isize - pad as isize;
                let mut acc = bias;
                for (j, &wj) in wr.iter().enumerate() {
                    let idx = base + j as isize;
                    if idx >= 0 && (idx as usize) < len {
                        acc += wj * xr[idx as usize];
                    }
                }
                *slot = acc;
            }
        }
        self.push(Op::DepthwiseConv { x, w, b, stride, pad }, out)
    }

    /// Nearest-neighbour x2 upsampling to exactly `len` frames.
    pub fn upsample(&mut self, x: Var, len: usize) -> Var {
        let xv = self.value(x);
        let last = xv.ncols() - 1;
        let out = Array2::from_shape_fn((xv.nrows(), len), |(c, t)| xv[[c, (t / 2).min(last)]]);
        self.push(Op::Upsample { x }, out)
    }

    /// Row `row` of a table, returned as a column.
    pub fn row_select(&mut self, table: Var, row: usize) -> Var {
        let v = self.value(table).row(row).to_owned().insert_axis(Axis(1));
        self.push(Op::RowSelect { table, row }, v)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.value(x).slice(s![start..end, ..]).to_owned();
        self.push(Op::SliceRows { x, start }, v)
    }

    /// Overlap-add `K x F` frames with the given hop into a `1 x len` row.
    pub fn overlap_add(&mut self, x: Var, hop: usize, len: usize) -> Var {
        let xv = self.value(x);
        let mut out = Array2::zeros((1, len));
        for (f, col) in xv.axis_iter(Axis(1)).enumerate() {
            for (k, &v) in col.iter().enumerate() {
                let t = f * hop + k;
                if t < len {
                    out[[0, t]] += v;
                }
            }
        }
        self.push(Op::OverlapAdd { x, hop }, out)
    }

    /// Mean absolute error against a constant target, as a 1x1 scalar.
    pub fn l1(&mut self, x: Var, target: Array2<f64>) -> Var {
        let xv = self.value(x);
        let v = Zip::from(xv).and(&target).fold(0.0, |acc, a, b| acc + (a - b).abs()) / xv.len() as f64;
        self.push(Op::L1 { x, target }, Array2::from_elem((1, 1), v))
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    /// Back-propagate from a scalar node, adding `weight * d(out)/d(param)`
    /// into `grads`.
    pub fn backward(&self, out: Var, weight: f64, grads: &mut ParamGrads) -> Result<()> {
        if self.value(out).dim() != (1, 1) {
            return Err(Error::Shape("backward starts from a scalar".into()));
        }
        let mut g: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[out.0] = Some(Array2::from_elem((1, 1), weight));
        for i in (0..=out.0).rev() {
            let Some(gy) = g[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Const => {}
                Op::Param(id) => grads[id.0] += &gy,
                Op::MatMul(a, b) => {
                    let ga = gy.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&gy);
                    accumulate(&mut g, *a, ga);
                    accumulate(&mut g, *b, gb);
                }
                Op::AddCol(x, b) => {
                    let gb = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut g, *b, gb);
                    accumulate(&mut g, *x, gy);
                }
                Op::MulCol(x, gcol) => {
                    let gv = self.value(*gcol);
                    let xv = self.value(*x);
                    let gg = (&gy * xv).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let gx = &gy * gv;
                    accumulate(&mut g, *gcol, gg);
                    accumulate(&mut g, *x, gx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut g, *b, gy.clone());
                    accumulate(&mut g, *a, gy);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut g, *b, -&gy);
                    accumulate(&mut g, *a, gy);
                }
                Op::Mul(a, b) => {
                    let ga = &gy * self.value(*b);
                    let gb = &gy * self.value(*a);
                    accumulate(&mut g, *a, ga);
                    accumulate(&mut g, *b, gb);
                }
                Op::Affine(x, a) => accumulate(&mut g, *x, gy * *a),
                Op::Relu(x) => {
                    let mut gx = gy;
                    Zip::from(&mut gx).and(self.value(*x)).for_each(|d, &t| {
                        if t <= 0.0 {
                            *d = 0.0
                        }
                    });
                    accumulate(&mut g, *x, gx);
                }
                Op::PRelu(x, slope) => {
                    let xv = self.value(*x);
                    let a = self.value(*slope);
                    let mut gx = gy.clone();
                    let mut ga = Array2::zeros(a.raw_dim());
                    for c in 0..xv.nrows() {
                        let ac = a[[c, 0]];
                        let mut acc = 0.0;
                        for (d, &t) in gx.row_mut(c).iter_mut().zip(xv.row(c)) {
                            if t <= 0.0 {
                                acc += *d * t;
                                *d *= ac;
                            }
                        }
                        ga[[c, 0]] = acc;
                    }
                    accumulate(&mut g, *slope, ga);
                    accumulate(&mut g, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let y = self.value(Var(i));
                    let gx = Zip::from(&gy).and(y).map_collect(|d, s| d * s * (1.0 - s));
                    accumulate(&mut g, *x, gx);
                }
                Op::GlobalNorm(x, inv_std) => {
                    let y = self.value(Var(i));
                    let n = y.len() as f64;
                    let mean_g = gy.sum() / n;
                    let mean_gy = Zip::from(&gy).and(y).fold(0.0, |acc, d, t| acc + d * t) / n;
                    let gx = Zip::from(&gy).and(y).map_collect(|d, t| inv_std * (d - mean_g - t * mean_gy));
                    accumulate(&mut g, *x, gx);
                }
                Op::DepthwiseConv { x, w, b, stride, pad } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (c, len) = xv.dim();
                    let mut gx = Array2::zeros((c, len));
                    let mut gw = Array2::zeros(wv.raw_dim());
                    let gb = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    for ch in 0..c {
                        let xr = xv.row(ch);
                        let wr = wv.row(ch);
                        let gyr = gy.row(ch);
                        let mut gxr = gx.row_mut(ch);
                        for (o, &d) in gyr.iter().enumerate() {
                            if d == 0.0 {
                                continue;
                            }
                            let base = (o * stride) as isize - *pad as isize;
                            for (j, &wj) in wr.iter().enumerate() {
                                let idx = base + j as isize;
                                if idx >= 0 && (idx as usize) < len {
                                    gxr[idx as usize] += d * wj;
                                    gw[[ch, j]] += d * xr[idx as usize];
                                }
                            }
                        }
                    }
                    accumulate(&mut g, *b, gb);
                    accumulate(&mut g, *w, gw);
                    accumulate(&mut g, *x, gx);
                }
                Op::Upsample { x } => {
                    let xv = self.value(*x);
                    let last = xv.ncols() - 1;
                    let mut gx = Array2::zeros(xv.raw_dim());
                    for ((c, t), &d) in gy.indexed_iter() {
                        gx[[c, (t / 2).min(last)]] += d;
                    }
                    accumulate(&mut g, *x, gx);
                }
                Op::RowSelect { table, row } => {
                    let mut gt = Array2::zeros(self.value(*table).raw_dim());
                    gt.row_mut(*row).assign(&gy.column(0));
                    accumulate(&mut g, *table, gt);
                }
                Op::SliceRows { x, start } => {
                    let mut gx = Array2::zeros(self.value(*x).raw_dim());
                    gx.slice_mut(s![*start..*start + gy.nrows(), ..]).assign(&gy);
                    accumulate(&mut g, *x, gx);
                }
                Op::OverlapAdd { x, hop } => {
                    let (k, frames) = self.value(*x).dim();
                    let len = gy.ncols();
                    let gx = Array2::from_shape_fn((k, frames), |(kk, f)| {
                        let t = f * hop + kk;
                        if t < len { gy[[0, t]] } else { 0.0 }
                    });
                    accumulate(&mut g, *x, gx);
                }
                Op::L1 { x, target } => {
                    let xv = self.value(*x);
                    let scale = gy[[0, 0]] / xv.len() as f64;
                    let gx = Zip::from(xv).and(target).map_collect(|a, b| {
                        let d = a - b;
                        if d > 0.0 {
                            scale
                        } else if d < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut g, *x, gx);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(g: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
    match &mut g[v.0] {
        Some(acc) => *acc += &delta,
        slot @ None => *slot = Some(delta),
    }
}

/// Frame a signal into a `K x F` matrix with the right-padding policy
/// `F = ceil((T - K) / H) + 1`.
pub fn frame_signal(x: &[f64], taps: usize, hop: usize) -> Array2<f64> {
    let frames = num_frames(x.len(), taps, hop);
    Array2::from_shape_fn((taps, frames), |(k, f)| x.get(f * hop + k).copied().unwrap_or(0.0))
}

pub fn num_frames(len: usize, taps: usize, hop: usize) -> usize {
    if len <= taps {
        1
    } else {
        (len - taps).div_ceil(hop) + 1
    }
}

pub fn row(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape")
}
