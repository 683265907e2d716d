//! Reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! A [`Tape`] records every operation of a forward pass as a node; calling
//! [`Tape::backward`] walks the nodes in reverse and accumulates gradients
//! for parameter leaves. Parameters flagged frozen never receive a gradient
//! buffer at all, which is how the freezing contract is enforced at the
//! lowest level.
//!
//! The op set is deliberately small: dense/conv layers, normalization,
//! masked attention building blocks, resampling (bilinear resize, average
//! pooling, rotation) and the pointwise functions the losses need. All math
//! is double precision so central finite differences resolve gradients to
//! ~1e-10.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, IxDyn};

use crate::nn::ParamStore;

/// Handle to a node on the tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Debug)]
#[allow(dead_code)] // aux fields on some variants exist for debug printing
enum Op {
    /// External input; no gradient is tracked.
    Leaf,
    /// Parameter leaf. `frozen` suppresses gradient accumulation.
    Param { id: usize, frozen: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    /// (n, d) + (d,) broadcast over rows.
    AddBias(Var, Var),
    /// (h, w, c) + (c,) broadcast over the channel axis.
    AddChan(Var, Var),
    /// (n, d) * (d,) broadcast over rows.
    MulRowVec(Var, Var),
    /// Elementwise product with a constant array (no gradient to the array).
    MulConst(Var, ArrayD<f64>),
    /// Elementwise `x - c` with a constant array.
    SubConst(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize, len: usize },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize, len: usize },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Tanh(Var),
    Ln(Var),
    ClampMin(Var, f64),
    /// Elementwise smooth-L1 with transition point beta.
    SmoothL1 { x: Var, beta: f64 },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    /// Row-wise softmax; `key_mask[j] == false` excludes column j.
    SoftmaxRows { x: Var, key_mask: Option<Vec<bool>> },
    /// x: (h, w, cin), k: (kh, kw, cin, cout), symmetric zero padding.
    Conv2d { x: Var, k: Var, stride: usize, pad: usize },
    /// table: (v, d); output (ids.len(), d).
    Embedding { table: Var, ids: Vec<usize> },
    SumAll(Var),
    MeanAll(Var),
    /// Mean over rows selected by `mask`; x: (n, d) -> (d,).
    MaskedMeanRows { x: Var, mask: Vec<bool> },
    /// Pick flat elements; output (idx.len(),).
    Gather { x: Var, idx: Vec<usize> },
    /// (h, w, c) -> (h2, w2, c) bilinear, half-pixel centers.
    ResizeBilinear { x: Var },
    /// (h, w, c) -> (h/f, w/f, c) exact block average.
    AvgPool { x: Var, factor: usize },
    /// Rotate content by `angle` radians about the map center, bilinear
    /// sampling with zero padding. `angle == 0.0` is an exact passthrough.
    Rotate { x: Var, angle: f64 },
}

struct Node {
    op: Op,
    value: ArrayD<f64>,
}

/// Gradients produced by a backward pass, keyed by parameter id.
pub struct Grads {
    by_param: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn get(&self, id: usize) -> Option<&ArrayD<f64>> {
        self.by_param.get(id).and_then(|g| g.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &ArrayD<f64>)> {
        self.by_param
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (i, g)))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn as2(v: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    v.view().into_dimensionality::<ndarray::Ix2>().unwrap()
}

fn as3(v: &ArrayD<f64>) -> ndarray::ArrayView3<'_, f64> {
    v.view().into_dimensionality::<ndarray::Ix3>().unwrap()
}

fn gelu_fwd(x: f64) -> f64 {
    // tanh approximation
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x), overflow-safe.
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Source coordinate for bilinear resize with half-pixel centers.
fn resize_src(o: usize, out_len: usize, in_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let u = (o as f64 + 0.5) * scale - 0.5;
    let u = u.clamp(0.0, in_len as f64 - 1.0);
    let i0 = u.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, u - i0 as f64)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: ArrayD<f64>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        debug_assert_eq!(val.len(), 1, "scalar() on non-scalar node");
        val.iter().next().copied().unwrap()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ---- leaves ----

    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn leaf2(&mut self, value: Array2<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn leaf3(&mut self, value: Array3<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn param(&mut self, store: &ParamStore, id: crate::nn::ParamId) -> Var {
        let entry = store.entry(id);
        self.push(
            Op::Param {
                id: id.0,
                frozen: entry.frozen,
            },
            entry.value.clone(),
        )
    }

    // ---- arithmetic ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(Op::AddScalar(a, c), v)
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = as2(&self.nodes[x.0].value);
        let bv = &self.nodes[b.0].value;
        debug_assert_eq!(xv.ncols(), bv.len(), "add_bias width mismatch");
        let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let v = (&xv + &b1).into_dyn();
        self.push(Op::AddBias(x, b), v)
    }

    pub fn add_chan(&mut self, x: Var, b: Var) -> Var {
        let xv = as3(&self.nodes[x.0].value);
        let bv = &self.nodes[b.0].value;
        debug_assert_eq!(xv.dim().2, bv.len(), "add_chan width mismatch");
        let mut out = xv.to_owned();
        let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        for mut lane in out.lanes_mut(Axis(2)) {
            lane += &b1;
        }
        self.push(Op::AddChan(x, b), out.into_dyn())
    }

    pub fn mul_row_vec(&mut self, x: Var, v: Var) -> Var {
        let xv = as2(&self.nodes[x.0].value);
        let vv = &self.nodes[v.0].value;
        debug_assert_eq!(xv.ncols(), vv.len(), "mul_row_vec width mismatch");
        let v1 = vv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let out = (&xv * &v1).into_dyn();
        self.push(Op::MulRowVec(x, v), out)
    }

    pub fn mul_const(&mut self, x: Var, c: &ArrayD<f64>) -> Var {
        debug_assert_eq!(self.shape(x), c.shape(), "mul_const shape mismatch");
        let v = &self.nodes[x.0].value * c;
        self.push(Op::MulConst(x, c.clone()), v)
    }

    pub fn sub_const(&mut self, x: Var, c: &ArrayD<f64>) -> Var {
        debug_assert_eq!(self.shape(x), c.shape(), "sub_const shape mismatch");
        let v = &self.nodes[x.0].value - c;
        self.push(Op::SubConst(x), v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = as2(&self.nodes[a.0].value);
        let bv = as2(&self.nodes[b.0].value);
        debug_assert_eq!(av.ncols(), bv.nrows(), "matmul inner dim mismatch");
        let v = av.dot(&bv).into_dyn();
        self.push(Op::MatMul(a, b), v)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = as2(&self.nodes[a.0].value).t().to_owned().into_dyn();
        self.push(Op::Transpose(a), v)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let val = &self.nodes[a.0].value;
        debug_assert_eq!(val.len(), shape.iter().product::<usize>());
        let flat: Vec<f64> = val.iter().copied().collect();
        let v = ArrayD::from_shape_vec(IxDyn(shape), flat).unwrap();
        self.push(Op::Reshape(a), v)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let d = as2(&self.nodes[parts[0].0].value).ncols();
        let total: usize = parts
            .iter()
            .map(|p| as2(&self.nodes[p.0].value).nrows())
            .sum();
        let mut out = Array2::<f64>::zeros((total, d));
        let mut row = 0;
        for p in parts {
            let pv = as2(&self.nodes[p.0].value);
            debug_assert_eq!(pv.ncols(), d, "concat_rows width mismatch");
            out.slice_mut(ndarray::s![row..row + pv.nrows(), ..])
                .assign(&pv);
            row += pv.nrows();
        }
        self.push(Op::ConcatRows(parts.to_vec()), out.into_dyn())
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = as2(&self.nodes[x.0].value);
        let v = xv
            .slice(ndarray::s![start..start + len, ..])
            .to_owned()
            .into_dyn();
        self.push(Op::SliceRows { x, start, len }, v)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = as2(&self.nodes[parts[0].0].value).nrows();
        let total: usize = parts
            .iter()
            .map(|p| as2(&self.nodes[p.0].value).ncols())
            .sum();
        let mut out = Array2::<f64>::zeros((n, total));
        let mut col = 0;
        for p in parts {
            let pv = as2(&self.nodes[p.0].value);
            debug_assert_eq!(pv.nrows(), n, "concat_cols height mismatch");
            out.slice_mut(ndarray::s![.., col..col + pv.ncols()])
                .assign(&pv);
            col += pv.ncols();
        }
        self.push(Op::ConcatCols(parts.to_vec()), out.into_dyn())
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = as2(&self.nodes[x.0].value);
        let v = xv
            .slice(ndarray::s![.., start..start + len])
            .to_owned()
            .into_dyn();
        self.push(Op::SliceCols { x, start, len }, v)
    }

    // ---- pointwise ----

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(|a| a.max(0.0));
        self.push(Op::Relu(x), v)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(gelu_fwd);
        self.push(Op::Gelu(x), v)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(sigmoid);
        self.push(Op::Sigmoid(x), v)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(softplus);
        self.push(Op::Softplus(x), v)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(f64::tanh);
        self.push(Op::Tanh(x), v)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(f64::ln);
        self.push(Op::Ln(x), v)
    }

    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        let v = self.nodes[x.0].value.mapv(|a| a.max(lo));
        self.push(Op::ClampMin(x, lo), v)
    }

    pub fn smooth_l1(&mut self, x: Var, beta: f64) -> Var {
        let v = self.nodes[x.0].value.mapv(|d| {
            if d.abs() < beta {
                0.5 * d * d / beta
            } else {
                d.abs() - 0.5 * beta
            }
        });
        self.push(Op::SmoothL1 { x, beta }, v)
    }

    // ---- normalization / attention ----

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = as2(&self.nodes[x.0].value);
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let d = xv.ncols();
        debug_assert_eq!(g.len(), d);
        debug_assert_eq!(b.len(), d);
        let mut out = Array2::<f64>::zeros(xv.raw_dim());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.mean().unwrap();
            let var = row.mapv(|a| (a - mean) * (a - mean)).mean().unwrap();
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[(i, j)] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
            out.into_dyn(),
        )
    }

    pub fn softmax_rows(&mut self, x: Var, key_mask: Option<&[bool]>) -> Var {
        let xv = as2(&self.nodes[x.0].value);
        let (n, m) = xv.dim();
        if let Some(mask) = key_mask {
            debug_assert_eq!(mask.len(), m, "softmax key mask length");
            debug_assert!(mask.iter().any(|&v| v), "softmax mask excludes all keys");
        }
        let mut out = Array2::<f64>::zeros((n, m));
        for i in 0..n {
            let mut mx = f64::NEG_INFINITY;
            for j in 0..m {
                if key_mask.map_or(true, |k| k[j]) {
                    mx = mx.max(xv[(i, j)]);
                }
            }
            let mut sum = 0.0;
            for j in 0..m {
                if key_mask.map_or(true, |k| k[j]) {
                    let e = (xv[(i, j)] - mx).exp();
                    out[(i, j)] = e;
                    sum += e;
                }
            }
            for j in 0..m {
                out[(i, j)] /= sum;
            }
        }
        self.push(
            Op::SoftmaxRows {
                x,
                key_mask: key_mask.map(|m| m.to_vec()),
            },
            out.into_dyn(),
        )
    }

    // ---- convolution / embedding ----

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Var {
        let xv = as3(&self.nodes[x.0].value);
        let kv = &self.nodes[k.0].value;
        let (h, w, cin) = xv.dim();
        let ks = kv.shape();
        debug_assert_eq!(ks.len(), 4, "conv kernel must be 4-d");
        let (kh, kw, kci, cout) = (ks[0], ks[1], ks[2], ks[3]);
        debug_assert_eq!(kci, cin, "conv channel mismatch");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = Array3::<f64>::zeros((oh, ow, cout));
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            let xe = xv[(iy as usize, ix as usize, ci)];
                            if xe == 0.0 {
                                continue;
                            }
                            for co in 0..cout {
                                out[(oy, ox, co)] += xe * kv[[ky, kx, ci, co]];
                            }
                        }
                    }
                }
            }
        }
        self.push(Op::Conv2d { x, k, stride, pad }, out.into_dyn())
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = as2(&self.nodes[table.0].value);
        let d = tv.ncols();
        let mut out = Array2::<f64>::zeros((ids.len(), d));
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).assign(&tv.row(id));
        }
        self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            out.into_dyn(),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.sum();
        self.push(Op::SumAll(x), ArrayD::from_elem(IxDyn(&[]), s))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let m = self.nodes[x.0].value.mean().unwrap();
        self.push(Op::MeanAll(x), ArrayD::from_elem(IxDyn(&[]), m))
    }

    pub fn masked_mean_rows(&mut self, x: Var, mask: &[bool]) -> Var {
        let xv = as2(&self.nodes[x.0].value);
        debug_assert_eq!(mask.len(), xv.nrows());
        let count = mask.iter().filter(|&&m| m).count();
        debug_assert!(count > 0, "masked_mean_rows: empty mask");
        let mut out = Array1::<f64>::zeros(xv.ncols());
        for (i, row) in xv.rows().into_iter().enumerate() {
            if mask[i] {
                out += &row;
            }
        }
        out /= count as f64;
        self.push(
            Op::MaskedMeanRows {
                x,
                mask: mask.to_vec(),
            },
            out.into_dyn(),
        )
    }

    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = &self.nodes[x.0].value;
        let flat: Vec<f64> = {
            let sl = xv.as_slice().expect("gather needs contiguous input");
            idx.iter().map(|&i| sl[i]).collect()
        };
        let v = ArrayD::from_shape_vec(IxDyn(&[idx.len()]), flat).unwrap();
        self.push(
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            v,
        )
    }

    // ---- resampling ----

    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let xv = as3(&self.nodes[x.0].value);
        let (h, w, c) = xv.dim();
        if oh == h && ow == w {
            let v = xv.to_owned().into_dyn();
            return self.push(Op::Reshape(x), v);
        }
        let mut out = Array3::<f64>::zeros((oh, ow, c));
        for oy in 0..oh {
            let (y0, y1, fy) = resize_src(oy, oh, h);
            for ox in 0..ow {
                let (x0, x1, fx) = resize_src(ox, ow, w);
                for ch in 0..c {
                    let v = xv[(y0, x0, ch)] * (1.0 - fy) * (1.0 - fx)
                        + xv[(y0, x1, ch)] * (1.0 - fy) * fx
                        + xv[(y1, x0, ch)] * fy * (1.0 - fx)
                        + xv[(y1, x1, ch)] * fy * fx;
                    out[(oy, ox, ch)] = v;
                }
            }
        }
        self.push(Op::ResizeBilinear { x }, out.into_dyn())
    }

    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Var {
        let xv = as3(&self.nodes[x.0].value);
        let (h, w, _) = xv.dim();
        self.resize_bilinear(x, h * factor, w * factor)
    }

    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Var {
        let xv = as3(&self.nodes[x.0].value);
        let (h, w, c) = xv.dim();
        debug_assert!(h % factor == 0 && w % factor == 0, "avg_pool divisibility");
        let (oh, ow) = (h / factor, w / factor);
        let norm = 1.0 / (factor * factor) as f64;
        let mut out = Array3::<f64>::zeros((oh, ow, c));
        for oy in 0..oh {
            for ox in 0..ow {
                for dy in 0..factor {
                    for dx in 0..factor {
                        for ch in 0..c {
                            out[(oy, ox, ch)] += xv[(oy * factor + dy, ox * factor + dx, ch)];
                        }
                    }
                }
            }
        }
        out *= norm;
        self.push(Op::AvgPool { x, factor }, out.into_dyn())
    }

    pub fn rotate(&mut self, x: Var, angle: f64) -> Var {
        if angle == 0.0 {
            // bitwise identity on the zero-rotation path
            let v = self.nodes[x.0].value.clone();
            return self.push(Op::Reshape(x), v);
        }
        let xv = as3(&self.nodes[x.0].value);
        let (h, w, c) = xv.dim();
        let mut out = Array3::<f64>::zeros((h, w, c));
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (s, co) = angle.sin_cos();
        for oy in 0..h {
            for ox in 0..w {
                // rotate content by +angle: sample source at R(-angle) * offset
                let dy = oy as f64 - cy;
                let dx = ox as f64 - cx;
                let sx = co * dx + s * dy + cx;
                let sy = -s * dx + co * dy + cy;
                if sx < -1.0 || sy < -1.0 || sx > w as f64 || sy > h as f64 {
                    continue;
                }
                let x0 = sx.floor();
                let y0 = sy.floor();
                let fx = sx - x0;
                let fy = sy - y0;
                for (wy, iy) in [(1.0 - fy, y0 as isize), (fy, y0 as isize + 1)] {
                    if iy < 0 || iy >= h as isize || wy == 0.0 {
                        continue;
                    }
                    for (wx, ix) in [(1.0 - fx, x0 as isize), (fx, x0 as isize + 1)] {
                        if ix < 0 || ix >= w as isize || wx == 0.0 {
                            continue;
                        }
                        for ch in 0..c {
                            out[(oy, ox, ch)] += wy * wx * xv[(iy as usize, ix as usize, ch)];
                        }
                    }
                }
            }
        }
        self.push(Op::Rotate { x, angle }, out.into_dyn())
    }

    // ---- backward ----

    /// Accumulate gradients of `loss` (a scalar node) with respect to every
    /// non-frozen parameter leaf on the tape.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Grads {
        debug_assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::from_elem(self.nodes[loss.0].value.raw_dim(), 1.0));
        let mut out = Grads {
            by_param: vec![None; store.len()],
        };

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param { id, frozen } => {
                    if !*frozen {
                        match &mut out.by_param[*id] {
                            Some(acc) => *acc += &g,
                            slot => *slot = Some(g),
                        }
                    }
                }
                Op::Add(a, b) => {
                    self.accum(&mut grads, *a, g.clone());
                    self.accum(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    self.accum(&mut grads, *a, g.clone());
                    self.accum(&mut grads, *b, g.mapv(|v| -v));
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[b.0].value;
                    let gb = &g * &self.nodes[a.0].value;
                    self.accum(&mut grads, *a, ga);
                    self.accum(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => self.accum(&mut grads, *a, g.mapv(|v| v * c)),
                Op::AddScalar(a, _) => self.accum(&mut grads, *a, g),
                Op::AddBias(x, b) => {
                    let g2 = as2(&g);
                    let gb = g2.sum_axis(Axis(0)).into_dyn();
                    self.accum(&mut grads, *x, g.clone());
                    self.accum(&mut grads, *b, gb);
                }
                Op::AddChan(x, b) => {
                    let g3 = as3(&g);
                    let c = g3.dim().2;
                    let mut gb = Array1::<f64>::zeros(c);
                    for lane in g3.lanes(Axis(2)) {
                        gb += &lane;
                    }
                    self.accum(&mut grads, *x, g.clone());
                    self.accum(&mut grads, *b, gb.into_dyn());
                }
                Op::MulRowVec(x, v) => {
                    let g2 = as2(&g);
                    let xv = as2(&self.nodes[x.0].value);
                    let vv = &self.nodes[v.0].value;
                    let v1 = vv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                    let gx = (&g2 * &v1).into_dyn();
                    let gv = (&g2 * &xv).sum_axis(Axis(0)).into_dyn();
                    self.accum(&mut grads, *x, gx);
                    self.accum(&mut grads, *v, gv);
                }
                Op::MulConst(x, c) => {
                    let gx = &g * c;
                    self.accum(&mut grads, *x, gx);
                }
                Op::SubConst(x) => self.accum(&mut grads, *x, g),
                Op::MatMul(a, b) => {
                    let g2 = as2(&g);
                    let av = as2(&self.nodes[a.0].value);
                    let bv = as2(&self.nodes[b.0].value);
                    let ga = g2.dot(&bv.t()).into_dyn();
                    let gb = av.t().dot(&g2).into_dyn();
                    self.accum(&mut grads, *a, ga);
                    self.accum(&mut grads, *b, gb);
                }
                Op::Transpose(a) => {
                    let gt = as2(&g).t().to_owned().into_dyn();
                    self.accum(&mut grads, *a, gt);
                }
                Op::Reshape(a) => {
                    let target = self.nodes[a.0].value.raw_dim();
                    let flat: Vec<f64> = g.iter().copied().collect();
                    let ga = ArrayD::from_shape_vec(target, flat).unwrap();
                    self.accum(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let g2 = as2(&g);
                    let mut row = 0;
                    for p in parts {
                        let n = as2(&self.nodes[p.0].value).nrows();
                        let gp = g2.slice(ndarray::s![row..row + n, ..]).to_owned().into_dyn();
                        self.accum(&mut grads, *p, gp);
                        row += n;
                    }
                }
                Op::SliceRows { x, start, len } => {
                    let xs = self.nodes[x.0].value.raw_dim();
                    let mut gx = Array2::<f64>::zeros((xs[0], xs[1]));
                    gx.slice_mut(ndarray::s![*start..*start + *len, ..])
                        .assign(&as2(&g));
                    self.accum(&mut grads, *x, gx.into_dyn());
                }
                Op::ConcatCols(parts) => {
                    let g2 = as2(&g);
                    let mut col = 0;
                    for p in parts {
                        let c = as2(&self.nodes[p.0].value).ncols();
                        let gp = g2.slice(ndarray::s![.., col..col + c]).to_owned().into_dyn();
                        self.accum(&mut grads, *p, gp);
                        col += c;
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let xs = self.nodes[x.0].value.raw_dim();
                    let mut gx = Array2::<f64>::zeros((xs[0], xs[1]));
                    gx.slice_mut(ndarray::s![.., *start..*start + *len])
                        .assign(&as2(&g));
                    self.accum(&mut grads, *x, gx.into_dyn());
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let gx = ndarray::Zip::from(&g)
                        .and(xv)
                        .map_collect(|&gi, &xi| if xi > 0.0 { gi } else { 0.0 });
                    self.accum(&mut grads, *x, gx);
                }
                Op::Gelu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let gx = ndarray::Zip::from(&g)
                        .and(xv)
                        .map_collect(|&gi, &xi| gi * gelu_grad(xi));
                    self.accum(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let yv = &node.value;
                    let gx = ndarray::Zip::from(&g)
                        .and(yv)
                        .map_collect(|&gi, &yi| gi * yi * (1.0 - yi));
                    self.accum(&mut grads, *x, gx);
                }
                Op::Softplus(x) => {
                    let xv = &self.nodes[x.0].value;
                    let gx = ndarray::Zip::from(&g)
                        .and(xv)
                        .map_collect(|&gi, &xi| gi * sigmoid(xi));
                    self.accum(&mut grads, *x, gx);
                }
                Op::Tanh(x) => {
                    let yv = &node.value;
                    let gx = ndarray::Zip::from(&g)
                        .and(yv)
                        .map_collect(|&gi, &yi| gi * (1.0 - yi * yi));
                    self.accum(&mut grads, *x, gx);
                }
                Op::Ln(x) => {
                    let xv = &self.nodes[x.0].value;
                    let gx = ndarray::Zip::from(&g)
                        .and(xv)
                        .map_collect(|&gi, &xi| gi / xi);
                    self.accum(&mut grads, *x, gx);
                }
                Op::ClampMin(x, lo) => {
                    let xv = &self.nodes[x.0].value;
                    let gx = ndarray::Zip::from(&g)
                        .and(xv)
                        .map_collect(|&gi, &xi| if xi > *lo { gi } else { 0.0 });
                    self.accum(&mut grads, *x, gx);
                }
                Op::SmoothL1 { x, beta } => {
                    let xv = &self.nodes[x.0].value;
                    let b = *beta;
                    let gx = ndarray::Zip::from(&g).and(xv).map_collect(|&gi, &d| {
                        gi * if d.abs() < b { d / b } else { d.signum() }
                    });
                    self.accum(&mut grads, *x, gx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta: _,
                    eps,
                } => {
                    let xv = as2(&self.nodes[x.0].value);
                    let gm = &self.nodes[gamma.0].value;
                    let g2 = as2(&g);
                    let (n, d) = xv.dim();
                    let mut gx = Array2::<f64>::zeros((n, d));
                    let mut ggamma = Array1::<f64>::zeros(d);
                    let mut gbeta = Array1::<f64>::zeros(d);
                    for i in 0..n {
                        let row = xv.row(i);
                        let mean = row.mean().unwrap();
                        let var = row.mapv(|a| (a - mean) * (a - mean)).mean().unwrap();
                        let inv = 1.0 / (var + eps).sqrt();
                        // xhat and the two row means the gradient needs
                        let mut m1 = 0.0; // mean of gamma*g
                        let mut m2 = 0.0; // mean of gamma*g*xhat
                        let mut xhat = vec![0.0; d];
                        for j in 0..d {
                            xhat[j] = (row[j] - mean) * inv;
                            let gg = g2[(i, j)] * gm[j];
                            m1 += gg;
                            m2 += gg * xhat[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let gg = g2[(i, j)] * gm[j];
                            gx[(i, j)] = (gg - m1 - xhat[j] * m2) * inv;
                            ggamma[j] += g2[(i, j)] * xhat[j];
                            gbeta[j] += g2[(i, j)];
                        }
                    }
                    self.accum(&mut grads, *x, gx.into_dyn());
                    if let Op::LayerNorm { gamma, beta, .. } = &node.op {
                        self.accum(&mut grads, *gamma, ggamma.into_dyn());
                        self.accum(&mut grads, *beta, gbeta.into_dyn());
                    }
                }
                Op::SoftmaxRows { x, key_mask: _ } => {
                    let yv = as2(&node.value);
                    let g2 = as2(&g);
                    let (n, m) = yv.dim();
                    let mut gx = Array2::<f64>::zeros((n, m));
                    for i in 0..n {
                        let mut dot = 0.0;
                        for j in 0..m {
                            dot += g2[(i, j)] * yv[(i, j)];
                        }
                        for j in 0..m {
                            gx[(i, j)] = yv[(i, j)] * (g2[(i, j)] - dot);
                        }
                    }
                    self.accum(&mut grads, *x, gx.into_dyn());
                }
                Op::Conv2d { x, k, stride, pad } => {
                    let xv = as3(&self.nodes[x.0].value);
                    let kv = &self.nodes[k.0].value;
                    let g3 = as3(&g);
                    let (h, w, cin) = xv.dim();
                    let ks = kv.shape();
                    let (kh, kw, _, cout) = (ks[0], ks[1], ks[2], ks[3]);
                    let (oh, ow, _) = g3.dim();
                    let mut gx = Array3::<f64>::zeros((h, w, cin));
                    let mut gk = ArrayD::<f64>::zeros(kv.raw_dim());
                    for oy in 0..oh {
                        for ox in 0..ow {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - *pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - *pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    for ci in 0..cin {
                                        let xe = xv[(iy as usize, ix as usize, ci)];
                                        let mut acc = 0.0;
                                        for co in 0..cout {
                                            let ge = g3[(oy, ox, co)];
                                            acc += ge * kv[[ky, kx, ci, co]];
                                            gk[[ky, kx, ci, co]] += ge * xe;
                                        }
                                        gx[(iy as usize, ix as usize, ci)] += acc;
                                    }
                                }
                            }
                        }
                    }
                    self.accum(&mut grads, *x, gx.into_dyn());
                    self.accum(&mut grads, *k, gk);
                }
                Op::Embedding { table, ids } => {
                    let ts = self.nodes[table.0].value.raw_dim();
                    let g2 = as2(&g);
                    let mut gt = Array2::<f64>::zeros((ts[0], ts[1]));
                    for (i, &id) in ids.iter().enumerate() {
                        let mut row = gt.row_mut(id);
                        row += &g2.row(i);
                    }
                    self.accum(&mut grads, *table, gt.into_dyn());
                }
                Op::SumAll(x) => {
                    let gs = g.iter().next().copied().unwrap();
                    let gx = ArrayD::from_elem(self.nodes[x.0].value.raw_dim(), gs);
                    self.accum(&mut grads, *x, gx);
                }
                Op::MeanAll(x) => {
                    let n = self.nodes[x.0].value.len() as f64;
                    let gs = g.iter().next().copied().unwrap() / n;
                    let gx = ArrayD::from_elem(self.nodes[x.0].value.raw_dim(), gs);
                    self.accum(&mut grads, *x, gx);
                }
                Op::MaskedMeanRows { x, mask } => {
                    let xs = self.nodes[x.0].value.raw_dim();
                    let count = mask.iter().filter(|&&m| m).count() as f64;
                    let g1 = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                    let mut gx = Array2::<f64>::zeros((xs[0], xs[1]));
                    for i in 0..xs[0] {
                        if mask[i] {
                            let mut row = gx.row_mut(i);
                            row.assign(&g1.mapv(|v| v / count));
                        }
                    }
                    self.accum(&mut grads, *x, gx.into_dyn());
                }
                Op::Gather { x, idx } => {
                    let mut gx = ArrayD::<f64>::zeros(self.nodes[x.0].value.raw_dim());
                    {
                        let sl = gx.as_slice_mut().unwrap();
                        for (i, &fi) in idx.iter().enumerate() {
                            sl[fi] += g[[i]];
                        }
                    }
                    self.accum(&mut grads, *x, gx);
                }
                Op::ResizeBilinear { x } => {
                    let xv = as3(&self.nodes[x.0].value);
                    let g3 = as3(&g);
                    let (h, w, c) = xv.dim();
                    let (oh, ow, _) = g3.dim();
                    let mut gx = Array3::<f64>::zeros((h, w, c));
                    for oy in 0..oh {
                        let (y0, y1, fy) = resize_src(oy, oh, h);
                        for ox in 0..ow {
                            let (x0, x1, fx) = resize_src(ox, ow, w);
                            for ch in 0..c {
                                let ge = g3[(oy, ox, ch)];
                                gx[(y0, x0, ch)] += ge * (1.0 - fy) * (1.0 - fx);
                                gx[(y0, x1, ch)] += ge * (1.0 - fy) * fx;
                                gx[(y1, x0, ch)] += ge * fy * (1.0 - fx);
                                gx[(y1, x1, ch)] += ge * fy * fx;
                            }
                        }
                    }
                    self.accum(&mut grads, *x, gx.into_dyn());
                }
                Op::AvgPool { x, factor } => {
                    let xs = self.nodes[x.0].value.raw_dim();
                    let g3 = as3(&g);
                    let (oh, ow, c) = g3.dim();
                    let norm = 1.0 / (factor * factor) as f64;
                    let mut gx = Array3::<f64>::zeros((xs[0], xs[1], xs[2]));
                    for oy in 0..oh {
                        for ox in 0..ow {
                            for dy in 0..*factor {
                                for dx in 0..*factor {
                                    for ch in 0..c {
                                        gx[(oy * factor + dy, ox * factor + dx, ch)] +=
                                            g3[(oy, ox, ch)] * norm;
                                    }
                                }
                            }
                        }
                    }
                    self.accum(&mut grads, *x, gx.into_dyn());
                }
                Op::Rotate { x, angle } => {
                    let xv = as3(&self.nodes[x.0].value);
                    let g3 = as3(&g);
                    let (h, w, c) = xv.dim();
                    let mut gx = Array3::<f64>::zeros((h, w, c));
                    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
                    let (s, co) = angle.sin_cos();
                    for oy in 0..h {
                        for ox in 0..w {
                            let dy = oy as f64 - cy;
                            let dx = ox as f64 - cx;
                            let sx = co * dx + s * dy + cx;
                            let sy = -s * dx + co * dy + cy;
                            if sx < -1.0 || sy < -1.0 || sx > w as f64 || sy > h as f64 {
                                continue;
                            }
                            let x0 = sx.floor();
                            let y0 = sy.floor();
                            let fx = sx - x0;
                            let fy = sy - y0;
                            for (wy, iy) in [(1.0 - fy, y0 as isize), (fy, y0 as isize + 1)] {
                                if iy < 0 || iy >= h as isize || wy == 0.0 {
                                    continue;
                                }
                                for (wx, ix) in [(1.0 - fx, x0 as isize), (fx, x0 as isize + 1)]
                                {
                                    if ix < 0 || ix >= w as isize || wx == 0.0 {
                                        continue;
                                    }
                                    for ch in 0..c {
                                        gx[(iy as usize, ix as usize, ch)] +=
                                            wy * wx * g3[(oy, ox, ch)];
                                    }
                                }
                            }
                        }
                    }
                    self.accum(&mut grads, *x, gx.into_dyn());
                }
            }
        }
        out
    }

    fn accum(&self, grads: &mut [Option<ArrayD<f64>>], v: Var, g: ArrayD<f64>) {
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }
}

/// Central-difference gradient check over every tunable parameter in the
/// store. `build` runs a forward pass and returns the scalar loss node.
/// Exposed for the test suites of the modules built on the tape.
pub fn check_grads<F>(store: &mut crate::nn::ParamStore, build: F, tol: f64)
where
    F: Fn(&mut Tape, &crate::nn::ParamStore) -> Var,
{
    use crate::nn::ParamId;
    let mut tape = Tape::new();
    let loss = build(&mut tape, store);
    let grads = tape.backward(loss, store);
    let eps = 1e-5;
    for id in 0..store.len() {
        if store.entry(ParamId(id)).frozen {
            assert!(grads.get(id).is_none(), "frozen param {} has grad", id);
            continue;
        }
        let n = store.entry(ParamId(id)).value.len();
        for j in 0..n {
            let orig = store.entry(ParamId(id)).value.as_slice().unwrap()[j];
            store.set_elem(ParamId(id), j, orig + eps);
            let mut t1 = Tape::new();
            let l1 = build(&mut t1, store);
            let f1 = t1.scalar(l1);
            store.set_elem(ParamId(id), j, orig - eps);
            let mut t2 = Tape::new();
            let l2 = build(&mut t2, store);
            let f2 = t2.scalar(l2);
            store.set_elem(ParamId(id), j, orig);
            let numeric = (f1 - f2) / (2.0 * eps);
            let analytic = grads
                .get(id)
                .map(|g| g.as_slice().unwrap()[j])
                .unwrap_or(0.0);
            let denom = (numeric.abs() + analytic.abs()).max(1e-8);
            let rel = (numeric - analytic).abs() / denom;
            assert!(
                rel < tol || (numeric - analytic).abs() < 1e-10,
                "grad mismatch param {} elem {}: analytic={:.10e} numeric={:.10e} rel={:.3e}",
                store.name(ParamId(id)),
                j,
                analytic,
                numeric,
                rel
            );
        }
    }
}
