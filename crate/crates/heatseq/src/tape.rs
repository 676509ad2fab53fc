//! Minimal reverse-mode automatic differentiation over dynamic-dimension
//! f64 arrays. Nodes live in an arena indexed by insertion order, which is
//! already a topological order, so the backward pass is a single reverse
//! sweep. Built for clarity at desk-scale problem sizes, not for large
//! tensors.

use ndarray::{ArrayD, Axis, Ix2, IxDyn, Slice};

pub type NodeId = usize;

type GradFn = Box<dyn Fn(&ArrayD<f64>, &[&ArrayD<f64>], &ArrayD<f64>) -> Vec<ArrayD<f64>>>;

pub struct Tape {
    values: Vec<ArrayD<f64>>,
    parents: Vec<Vec<NodeId>>,
    grad_fns: Vec<Option<GradFn>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

// ---------- shape helpers ----------

fn co_broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast shapes {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

fn broadcast_binop(
    a: &ArrayD<f64>,
    b: &ArrayD<f64>,
    f: impl Fn(f64, f64) -> f64,
) -> ArrayD<f64> {
    let shape = co_broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("lhs broadcast");
    let bv = b.broadcast(IxDyn(&shape)).expect("rhs broadcast");
    let mut out = ArrayD::zeros(IxDyn(&shape));
    ndarray::Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

/// Sum `g` down to `shape` (inverse of broadcasting).
fn reduce_to_shape(g: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (axis, (&have, &want)) in out.shape().to_vec().iter().zip(shape).enumerate() {
        if have != want {
            debug_assert_eq!(want, 1);
            out = out
                .sum_axis(Axis(axis))
                .insert_axis(Axis(axis));
        }
    }
    out
}

/// Matrix product over the last two axes; leading axes must match exactly.
pub fn batched_matmul(a: &ArrayD<f64>, b: &ArrayD<f64>) -> ArrayD<f64> {
    let an = a.ndim();
    let bn = b.ndim();
    assert!(an >= 2 && bn >= 2 && an == bn, "matmul rank mismatch");
    let (m, k) = (a.shape()[an - 2], a.shape()[an - 1]);
    let (k2, n) = (b.shape()[bn - 2], b.shape()[bn - 1]);
    assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
    assert_eq!(&a.shape()[..an - 2], &b.shape()[..bn - 2], "matmul batch dims");
    if an == 2 {
        let a2 = a.view().into_dimensionality::<Ix2>().unwrap();
        let b2 = b.view().into_dimensionality::<Ix2>().unwrap();
        return a2.dot(&b2).into_dyn();
    }
    let batch: usize = a.shape()[..an - 2].iter().product();
    let a3 = a
        .to_shape((batch, m, k))
        .expect("standard layout")
        .to_owned();
    let b3 = b
        .to_shape((batch, k, n))
        .expect("standard layout")
        .to_owned();
    let mut out = ndarray::Array3::<f64>::zeros((batch, m, n));
    for i in 0..batch {
        let prod = a3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i));
        out.index_axis_mut(Axis(0), i).assign(&prod);
    }
    let mut shape: Vec<usize> = a.shape()[..an - 2].to_vec();
    shape.push(m);
    shape.push(n);
    out.into_shape_with_order(IxDyn(&shape)).unwrap()
}

/// Swap the last two axes, materialized in standard layout.
pub fn transpose_last2(a: &ArrayD<f64>) -> ArrayD<f64> {
    let n = a.ndim();
    let mut axes: Vec<usize> = (0..n).collect();
    axes.swap(n - 2, n - 1);
    a.view()
        .permuted_axes(IxDyn(&axes))
        .as_standard_layout()
        .to_owned()
}

const MASK_HIDDEN: f64 = f64::NEG_INFINITY;

/// Row-wise softmax along the last axis with an additive {0, -inf} mask
/// broadcast over leading axes. Hidden columns are skipped entirely (their
/// scores are never exponentiated), so they get weight exactly 0.0 and
/// non-finite garbage in hidden positions cannot leak through.
pub fn masked_softmax_array(scores: &ArrayD<f64>, mask: &ndarray::Array2<f64>) -> ArrayD<f64> {
    let n = scores.ndim();
    assert!(n >= 2);
    let rows = scores.shape()[n - 2];
    let cols = scores.shape()[n - 1];
    assert_eq!(mask.dim(), (rows, cols), "mask shape");
    let mut out = scores.clone();
    let lanes_per_block = rows;
    for (lane_idx, mut lane) in out.lanes_mut(Axis(n - 1)).into_iter().enumerate() {
        let row = lane_idx % lanes_per_block;
        let mut max = f64::NEG_INFINITY;
        for j in 0..cols {
            if mask[[row, j]] != MASK_HIDDEN && lane[j] > max {
                max = lane[j];
            }
        }
        if !max.is_finite() {
            // Either every column is hidden (callers validate against this)
            // or the visible scores themselves are NaN; keep the poison
            // confined to this row instead of panicking.
            for j in 0..cols {
                lane[j] = if mask[[row, j]] == MASK_HIDDEN { 0.0 } else { f64::NAN };
            }
            continue;
        }
        let mut sum = 0.0;
        for j in 0..cols {
            if mask[[row, j]] == MASK_HIDDEN {
                lane[j] = 0.0;
            } else {
                lane[j] = (lane[j] - max).exp();
                sum += lane[j];
            }
        }
        for j in 0..cols {
            lane[j] /= sum;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            parents: Vec::new(),
            grad_fns: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.values[id]
    }

    /// Scalar value of a 0-d node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        *self.values[id].iter().next().expect("empty node")
    }

    fn push(&mut self, value: ArrayD<f64>, parents: Vec<NodeId>, grad_fn: Option<GradFn>) -> NodeId {
        self.values.push(value);
        self.parents.push(parents);
        self.grad_fns.push(grad_fn);
        self.values.len() - 1
    }

    /// Leaf node: a parameter or a constant input. Gradients accumulate for
    /// leaves too; whether anyone reads them is the caller's business.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, vec![], None)
    }

    pub fn leaf_scalar(&mut self, value: f64) -> NodeId {
        self.leaf(ndarray::arr0(value).into_dyn())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = broadcast_binop(&self.values[a], &self.values[b], |x, y| x + y);
        let (sa, sb) = (self.values[a].shape().to_vec(), self.values[b].shape().to_vec());
        self.push(
            value,
            vec![a, b],
            Some(Box::new(move |g, _, _| {
                vec![reduce_to_shape(g, &sa), reduce_to_shape(g, &sb)]
            })),
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = broadcast_binop(&self.values[a], &self.values[b], |x, y| x - y);
        let (sa, sb) = (self.values[a].shape().to_vec(), self.values[b].shape().to_vec());
        self.push(
            value,
            vec![a, b],
            Some(Box::new(move |g, _, _| {
                vec![reduce_to_shape(g, &sa), reduce_to_shape(&g.mapv(|v| -v), &sb)]
            })),
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = broadcast_binop(&self.values[a], &self.values[b], |x, y| x * y);
        let (sa, sb) = (self.values[a].shape().to_vec(), self.values[b].shape().to_vec());
        self.push(
            value,
            vec![a, b],
            Some(Box::new(move |g, inputs, _| {
                let ga = broadcast_binop(g, inputs[1], |x, y| x * y);
                let gb = broadcast_binop(g, inputs[0], |x, y| x * y);
                vec![reduce_to_shape(&ga, &sa), reduce_to_shape(&gb, &sb)]
            })),
        )
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = broadcast_binop(&self.values[a], &self.values[b], |x, y| x / y);
        let (sa, sb) = (self.values[a].shape().to_vec(), self.values[b].shape().to_vec());
        self.push(
            value,
            vec![a, b],
            Some(Box::new(move |g, inputs, _| {
                let ga = broadcast_binop(g, inputs[1], |x, y| x / y);
                let num = broadcast_binop(g, inputs[0], |x, y| x * y);
                let gb = broadcast_binop(&num, inputs[1], |x, y| -x / (y * y));
                vec![reduce_to_shape(&ga, &sa), reduce_to_shape(&gb, &sb)]
            })),
        )
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.values[a].mapv(|v| v * c);
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, _, _| vec![g.mapv(|v| v * c)])),
        )
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.values[a].mapv(|v| v + c);
        self.push(value, vec![a], Some(Box::new(|g, _, _| vec![g.clone()])))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let value = self.values[a].mapv(|v| v * v);
        self.push(
            value,
            vec![a],
            Some(Box::new(|g, inputs, _| {
                vec![broadcast_binop(g, inputs[0], |x, y| 2.0 * x * y)]
            })),
        )
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let value = self.values[a].mapv(f64::sqrt);
        self.push(
            value,
            vec![a],
            Some(Box::new(|g, _, out| {
                vec![broadcast_binop(g, out, |x, y| 0.5 * x / y)]
            })),
        )
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.values[a].len() as f64;
        let value = ndarray::arr0(self.values[a].sum() / n).into_dyn();
        let shape = self.values[a].shape().to_vec();
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, _, _| {
                let gs = *g.iter().next().unwrap() / n;
                vec![ArrayD::from_elem(IxDyn(&shape), gs)]
            })),
        )
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let value = ndarray::arr0(self.values[a].sum()).into_dyn();
        let shape = self.values[a].shape().to_vec();
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, _, _| {
                let gs = *g.iter().next().unwrap();
                vec![ArrayD::from_elem(IxDyn(&shape), gs)]
            })),
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = batched_matmul(&self.values[a], &self.values[b]);
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|g, inputs, _| {
                let ga = batched_matmul(g, &transpose_last2(inputs[1]));
                let gb = batched_matmul(&transpose_last2(inputs[0]), g);
                vec![ga, gb]
            })),
        )
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let value = self.values[a]
            .to_shape(IxDyn(shape))
            .expect("reshape size mismatch")
            .to_owned();
        let orig = self.values[a].shape().to_vec();
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, _, _| {
                vec![g.to_shape(IxDyn(&orig)).unwrap().to_owned()]
            })),
        )
    }

    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> NodeId {
        let value = self.values[a]
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let mut inverse = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, _, _| {
                vec![g
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned()]
            })),
        )
    }

    /// Contiguous range slice per axis: `(start, end)` half-open.
    pub fn slice(&mut self, a: NodeId, ranges: &[(usize, usize)]) -> NodeId {
        assert_eq!(ranges.len(), self.values[a].ndim(), "slice rank mismatch");
        let ranges_owned = ranges.to_vec();
        let value = self.values[a]
            .slice_each_axis(|ad| {
                let (s, e) = ranges_owned[ad.axis.index()];
                Slice::from(s..e)
            })
            .as_standard_layout()
            .to_owned();
        let orig = self.values[a].shape().to_vec();
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, _, _| {
                let mut full = ArrayD::zeros(IxDyn(&orig));
                full.slice_each_axis_mut(|ad| {
                    let (s, e) = ranges_owned[ad.axis.index()];
                    Slice::from(s..e)
                })
                .assign(g);
                vec![full]
            })),
        )
    }

    /// Masked softmax along the last axis (see [`masked_softmax_array`]).
    pub fn softmax_masked(&mut self, scores: NodeId, mask: ndarray::Array2<f64>) -> NodeId {
        let value = masked_softmax_array(&self.values[scores], &mask);
        self.push(
            value,
            vec![scores],
            Some(Box::new(|g, _, out| {
                // gS = S * (g - sum_j(g * S))
                let n = out.ndim();
                let gs_dot = (g * out).sum_axis(Axis(n - 1)).insert_axis(Axis(n - 1));
                let inner = broadcast_binop(g, &gs_dot.into_dyn(), |x, y| x - y);
                vec![broadcast_binop(out, &inner, |s, v| s * v)]
            })),
        )
    }

    /// Layer normalization over the last axis with affine gain/bias.
    pub fn layernorm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let xv = &self.values[x];
        let n = xv.ndim();
        let d = xv.shape()[n - 1] as f64;
        let mean = xv.mean_axis(Axis(n - 1)).unwrap().insert_axis(Axis(n - 1));
        let centered = broadcast_binop(xv, &mean.into_dyn(), |a, b| a - b);
        let var = centered
            .mapv(|v| v * v)
            .mean_axis(Axis(n - 1))
            .unwrap()
            .insert_axis(Axis(n - 1))
            .into_dyn();
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let xhat = broadcast_binop(&centered, &inv_std, |a, b| a * b);
        let scaled = broadcast_binop(&xhat, &self.values[gain], |a, b| a * b);
        let value = broadcast_binop(&scaled, &self.values[bias], |a, b| a + b);

        let gain_shape = self.values[gain].shape().to_vec();
        let bias_shape = self.values[bias].shape().to_vec();
        self.push(
            value,
            vec![x, gain, bias],
            Some(Box::new(move |g, inputs, _| {
                let xv = inputs[0];
                let n = xv.ndim();
                let mean = xv.mean_axis(Axis(n - 1)).unwrap().insert_axis(Axis(n - 1));
                let centered = broadcast_binop(xv, &mean.into_dyn(), |a, b| a - b);
                let var = centered
                    .mapv(|v| v * v)
                    .mean_axis(Axis(n - 1))
                    .unwrap()
                    .insert_axis(Axis(n - 1))
                    .into_dyn();
                let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
                let xhat = broadcast_binop(&centered, &inv_std, |a, b| a * b);

                let g_gain = reduce_to_shape(&(g * &xhat), &gain_shape);
                let g_bias = reduce_to_shape(g, &bias_shape);

                let dxhat = broadcast_binop(g, inputs[1], |a, b| a * b);
                let m1 = dxhat
                    .sum_axis(Axis(n - 1))
                    .insert_axis(Axis(n - 1))
                    .into_dyn()
                    .mapv(|v| v / d);
                let m2 = (&dxhat * &xhat)
                    .sum_axis(Axis(n - 1))
                    .insert_axis(Axis(n - 1))
                    .into_dyn()
                    .mapv(|v| v / d);
                let t1 = broadcast_binop(&dxhat, &m1, |a, b| a - b);
                let t2 = broadcast_binop(&xhat, &m2, |a, b| a * b);
                let gx = broadcast_binop(&(&t1 - &t2), &inv_std, |a, b| a * b);
                vec![gx, g_gain, g_bias]
            })),
        )
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        const C: f64 = 0.7978845608028654; // sqrt(2/pi)
        const A: f64 = 0.044715;
        let f = |x: f64| 0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh());
        let value = self.values[a].mapv(f);
        self.push(
            value,
            vec![a],
            Some(Box::new(|g, inputs, _| {
                let d = inputs[0].mapv(|x| {
                    let u = C * (x + A * x * x * x);
                    let t = u.tanh();
                    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
                });
                vec![broadcast_binop(g, &d, |x, y| x * y)]
            })),
        )
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.values[a].mapv(|v| v.max(0.0));
        self.push(
            value,
            vec![a],
            Some(Box::new(|g, inputs, _| {
                let d = inputs[0].mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                vec![broadcast_binop(g, &d, |x, y| x * y)]
            })),
        )
    }

    /// Reverse sweep from a scalar root. Returns per-node gradients (None for
    /// nodes the root does not depend on).
    pub fn backward(&self, root: NodeId) -> Vec<Option<ArrayD<f64>>> {
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.values.len()];
        grads[root] = Some(ArrayD::from_elem(self.values[root].raw_dim(), 1.0));
        for id in (0..=root).rev() {
            let Some(g) = grads[id].clone() else { continue };
            let Some(grad_fn) = &self.grad_fns[id] else { continue };
            let inputs: Vec<&ArrayD<f64>> =
                self.parents[id].iter().map(|&p| &self.values[p]).collect();
            let contribs = grad_fn(&g, &inputs, &self.values[id]);
            debug_assert_eq!(contribs.len(), self.parents[id].len());
            for (&p, c) in self.parents[id].iter().zip(contribs) {
                match &mut grads[p] {
                    Some(acc) => *acc += &c,
                    slot => *slot = Some(c),
                }
            }
        }
        grads
    }
}
