//! Dense row-major `f64` tensors with reverse-mode automatic differentiation.
//!
//! Every operation on a [`Tensor`] whose inputs require gradients records a
//! node holding its parents and a vector-Jacobian closure. The recorded
//! nodes form the computation graph; [`Tensor::backward`] walks it once in
//! reverse topological order and accumulates gradients into the leaves that
//! requested them. Nodes whose inputs are all constant are stored as plain
//! leaves, so frozen sub-graphs cost nothing on the way back.
//!
//! Reductions run sequentially in index order, so the same inputs always
//! produce the same bits.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with graph recording disabled on this thread.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

type BackwardFn =
    Box<dyn Fn(&[f64], &[Tensor], &[bool]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

struct Op {
    name: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<f64>>,
    requires_grad: AtomicBool,
    grad: Mutex<Option<Vec<f64>>>,
    op: Option<Op>,
}

/// Handle to a tensor in the computation graph. Cloning is cheap and shares
/// the underlying storage.
#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.0.shape)
            .field("requires_grad", &self.requires_grad());
        if let Some(op) = &self.0.op {
            s.field("op", &op.name);
        }
        if data.len() <= 16 {
            s.field("data", &*data);
        }
        s.finish()
    }
}

impl Tensor {
    fn leaf(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RwLock::new(data),
            requires_grad: AtomicBool::new(false),
            grad: Mutex::new(None),
            op: None,
        }))
    }

    fn from_op(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        let requires = grad_enabled() && parents.iter().any(Tensor::requires_grad);
        if !requires {
            return Tensor::leaf(shape, data);
        }
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RwLock::new(data),
            requires_grad: AtomicBool::new(true),
            grad: Mutex::new(None),
            op: Some(Op {
                name,
                parents,
                backward,
            }),
        }))
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("from_vec", shape, &[data.len()]));
        }
        Ok(Tensor::leaf(shape.to_vec(), data))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::leaf(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor::leaf(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::leaf(Vec::new(), vec![value])
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::leaf(vec![n, n], data)
    }

    /// Builder-style toggle for leaves; returns `self` for chaining.
    pub fn with_requires_grad(self, requires: bool) -> Self {
        self.set_requires_grad(requires);
        self
    }

    /// Marks a leaf as trainable or constant. Has no effect on op nodes.
    pub fn set_requires_grad(&self, requires: bool) {
        if self.0.op.is_none() {
            self.0.requires_grad.store(requires, Ordering::Relaxed);
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.load(Ordering::Relaxed)
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn rows(&self) -> usize {
        self.0.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.0.shape.get(1).copied().unwrap_or(1)
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<f64>> {
        self.0.data.read().expect("tensor data lock poisoned")
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.data()[0]
    }

    /// Overwrites the values in place. Intended for optimizers and loaders.
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        let mut guard = self.0.data.write().expect("tensor data lock poisoned");
        f(&mut guard);
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn grad_or_zeros(&self) -> Vec<f64> {
        self.grad().unwrap_or_else(|| vec![0.0; self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    /// A constant copy with no graph history.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.0.shape.clone(), self.to_vec())
    }

    fn expect_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.0.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape(op, other, &[0, 0])),
        }
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
        Ok(())
    }

    // ---- backward ----------------------------------------------------

    /// Back-propagates from a single-element loss, accumulating into the
    /// `grad` of every reachable leaf that requires gradients.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);

        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.id()) else {
                continue;
            };
            match &node.0.op {
                None => {
                    let mut slot = node.0.grad.lock().expect("grad lock poisoned");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(op) => {
                    let needs: Vec<bool> = op.parents.iter().map(Tensor::requires_grad).collect();
                    let parent_grads = (op.backward)(&g, &op.parents, &needs);
                    for ((parent, need), pg) in op.parents.iter().zip(&needs).zip(parent_grads) {
                        if !need {
                            continue;
                        }
                        if let Some(pg) = pg {
                            debug_assert_eq!(pg.len(), parent.numel(), "{} grad size", op.name);
                            pending
                                .entry(parent.id())
                                .and_modify(|acc| acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b))
                                .or_insert(pg);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over the grad-requiring subgraph; each node appears once.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((node, next)) = stack.pop() {
            let parents = node.0.op.as_ref().map(|op| op.parents.as_slice()).unwrap_or(&[]);
            if next < parents.len() {
                let parent = parents[next].clone();
                stack.push((node, next + 1));
                if parent.requires_grad() && visited.insert(parent.id()) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }

    // ---- elementwise -------------------------------------------------

    fn map_unary(
        &self,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        df: fn(f64, f64) -> f64,
    ) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        let y = out.clone();
        Tensor::from_op(
            name,
            self.0.shape.clone(),
            out,
            vec![self.clone()],
            Box::new(move |g, parents, _| {
                let x = parents[0].data();
                let dx = g
                    .iter()
                    .zip(x.iter().zip(&y))
                    .map(|(g, (&x, &y))| g * df(x, y))
                    .collect();
                vec![Some(dx)]
            }),
        )
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let out = self.data().iter().zip(other.data().iter()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op(
            "add",
            self.0.shape.clone(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g, _, needs| {
                vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())]
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let out = self.data().iter().zip(other.data().iter()).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_op(
            "sub",
            self.0.shape.clone(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g, _, needs| {
                vec![
                    needs[0].then(|| g.to_vec()),
                    needs[1].then(|| g.iter().map(|v| -v).collect()),
                ]
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        let out = self.data().iter().zip(other.data().iter()).map(|(a, b)| a * b).collect();
        Ok(Tensor::from_op(
            "mul",
            self.0.shape.clone(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g, parents, needs| {
                let a = parents[0].data();
                let b = parents[1].data();
                vec![
                    needs[0].then(|| g.iter().zip(b.iter()).map(|(g, b)| g * b).collect()),
                    needs[1].then(|| g.iter().zip(a.iter()).map(|(g, a)| g * a).collect()),
                ]
            }),
        ))
    }

    /// Adds a length-`n` row vector to every row of an `[m × n]` tensor.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let (m, n) = self.expect_2d("add_row")?;
        if row.numel() != n {
            return Err(Error::shape("add_row", self.shape(), row.shape()));
        }
        let r = row.data();
        let out = self
            .data()
            .chunks(n.max(1))
            .take(m)
            .flat_map(|x| x.iter().zip(r.iter()).map(|(a, b)| a + b))
            .collect();
        drop(r);
        Ok(Tensor::from_op(
            "add_row",
            vec![m, n],
            out,
            vec![self.clone(), row.clone()],
            Box::new(move |g, _, needs| {
                let drow = needs[1].then(|| column_sums(g, m, n));
                vec![needs[0].then(|| g.to_vec()), drow]
            }),
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out = self.data().iter().map(|x| x * c).collect();
        Tensor::from_op(
            "scale",
            self.0.shape.clone(),
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.iter().map(|v| v * c).collect())]),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out = self.data().iter().map(|x| x + c).collect();
        Tensor::from_op(
            "add_scalar",
            self.0.shape.clone(),
            out,
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        )
    }

    pub fn abs(&self) -> Tensor {
        self.map_unary("abs", f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(&self) -> Tensor {
        self.map_unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn exp(&self) -> Tensor {
        self.map_unary("exp", f64::exp, |_, y| y)
    }

    /// Square root clamped at zero; the derivative at zero is taken as zero.
    pub fn sqrt(&self) -> Tensor {
        self.map_unary(
            "sqrt",
            |x| x.max(0.0).sqrt(),
            |_, y| if y > 0.0 { 0.5 / y } else { 0.0 },
        )
    }

    pub fn relu(&self) -> Tensor {
        self.map_unary("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        self.map_unary("gelu", gelu, |x, _| gelu_grad(x))
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().fold(0.0, |acc, x| acc + x);
        let n = self.numel();
        Tensor::from_op(
            "sum",
            Vec::new(),
            vec![s],
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let s = self.data().iter().fold(0.0, |acc, x| acc + x);
        let denom = n.max(1) as f64;
        Tensor::from_op(
            "mean",
            Vec::new(),
            vec![s / denom],
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(vec![g[0] / denom; n])]),
        )
    }

    // ---- structural --------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.expect_2d("transpose")?;
        let out = transpose(&self.data(), m, n);
        Ok(Tensor::from_op(
            "transpose",
            vec![n, m],
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(transpose(g, n, m))]),
        ))
    }

    /// Selects rows of an `[n × d]` tensor; repeated indices accumulate
    /// gradient. Serves as embedding lookup, length regulation, and
    /// subsampling.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (n, d) = self.expect_2d("gather_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Contract(format!(
                "gather_rows index {bad} out of range for {n} rows"
            )));
        }
        let src = self.data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        drop(src);
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            "gather_rows",
            vec![indices.len(), d],
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut dx = vec![0.0; n * d];
                for (r, &i) in idx.iter().enumerate() {
                    let dst = &mut dx[i * d..(i + 1) * d];
                    dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, b)| *a += b);
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Stacks `[n_i × d]` tensors along the row axis.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return Err(Error::Contract("concat_rows of nothing".into()));
        };
        let (_, d) = first.expect_2d("concat_rows")?;
        let mut rows = Vec::with_capacity(parts.len());
        let mut out = Vec::new();
        for p in parts {
            let (r, c) = p.expect_2d("concat_rows")?;
            if c != d {
                return Err(Error::shape("concat_rows", first.shape(), p.shape()));
            }
            rows.push(r);
            out.extend_from_slice(&p.data());
        }
        let total = rows.iter().sum();
        Ok(Tensor::from_op(
            "concat_rows",
            vec![total, d],
            out,
            parts.to_vec(),
            Box::new(move |g, _, needs| {
                let mut offset = 0;
                rows.iter()
                    .zip(needs)
                    .map(|(&r, &need)| {
                        let slice = &g[offset * d..(offset + r) * d];
                        offset += r;
                        need.then(|| slice.to_vec())
                    })
                    .collect()
            }),
        ))
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.expect_2d("matmul")?;
        let (k2, n) = other.expect_2d("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(), other.shape()));
        }
        let out = matmul_kernel(&self.data(), &other.data(), m, k, n);
        Ok(Tensor::from_op(
            "matmul",
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, parents, needs| {
                let da = needs[0].then(|| matmul_bt_kernel(g, &parents[1].data(), m, n, k));
                let db = needs[1].then(|| matmul_at_kernel(&parents[0].data(), g, m, k, n));
                vec![da, db]
            }),
        ))
    }

    /// Same-padded cross-correlation along the frame axis.
    /// `self` is `[frames × c_in]`, `kernel` is `[width × c_in × c_out]`.
    pub fn conv1d(&self, kernel: &Tensor) -> Result<Tensor> {
        let (frames, c_in) = self.expect_2d("conv1d")?;
        let [width, k_in, c_out] = *kernel.shape() else {
            return Err(Error::shape("conv1d", self.shape(), kernel.shape()));
        };
        if width % 2 == 0 {
            return Err(Error::Config(format!("conv1d width must be odd, got {width}")));
        }
        if k_in != c_in {
            return Err(Error::shape("conv1d", self.shape(), kernel.shape()));
        }
        let out = conv1d_forward(&self.data(), &kernel.data(), frames, c_in, c_out, width);
        Ok(Tensor::from_op(
            "conv1d",
            vec![frames, c_out],
            out,
            vec![self.clone(), kernel.clone()],
            Box::new(move |g, parents, needs| {
                let x = parents[0].data();
                let w = parents[1].data();
                let pad = width / 2;
                let mut dx = needs[0].then(|| vec![0.0; frames * c_in]);
                let mut dw = needs[1].then(|| vec![0.0; width * c_in * c_out]);
                for k in 0..width {
                    for t in 0..frames {
                        let Some(src) = (t + k).checked_sub(pad).filter(|&s| s < frames) else {
                            continue;
                        };
                        let grow = &g[t * c_out..(t + 1) * c_out];
                        for c in 0..c_in {
                            let wrow = &w[(k * c_in + c) * c_out..(k * c_in + c + 1) * c_out];
                            if let Some(dx) = dx.as_mut() {
                                dx[src * c_in + c] += dot(grow, wrow);
                            }
                            if let Some(dw) = dw.as_mut() {
                                let xv = x[src * c_in + c];
                                let drow = &mut dw[(k * c_in + c) * c_out..(k * c_in + c + 1) * c_out];
                                drow.iter_mut().zip(grow).for_each(|(a, b)| *a += xv * b);
                            }
                        }
                    }
                }
                vec![dx, dw]
            }),
        ))
    }

    /// Per-row standardization followed by an affine map.
    pub fn layer_norm(&self, gain: &Tensor, offset: &Tensor, eps: f64) -> Result<Tensor> {
        let (m, n) = self.expect_2d("layer_norm")?;
        if gain.numel() != n || offset.numel() != n {
            return Err(Error::shape("layer_norm", self.shape(), gain.shape()));
        }
        let x = self.data();
        let gv = gain.data();
        let bv = offset.data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &x[r * n..(r + 1) * n];
            let mu = row.iter().fold(0.0, |a, v| a + v) / n as f64;
            let var = row.iter().fold(0.0, |a, v| a + (v - mu) * (v - mu)) / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mu) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = gv[c] * h + bv[c];
            }
        }
        drop((x, gv, bv));
        Ok(Tensor::from_op(
            "layer_norm",
            vec![m, n],
            out,
            vec![self.clone(), gain.clone(), offset.clone()],
            Box::new(move |g, parents, needs| {
                let gv = parents[1].data();
                let dx = needs[0].then(|| {
                    let mut dx = vec![0.0; m * n];
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let dh: Vec<f64> = gr.iter().zip(gv.iter()).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().fold(0.0, |a, v| a + v) / n as f64;
                        let mean_dh_h = dh.iter().zip(hr).fold(0.0, |a, (d, h)| a + d * h) / n as f64;
                        for c in 0..n {
                            dx[r * n + c] = inv_std[r] * (dh[c] - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                    dx
                });
                let dgain = needs[1].then(|| {
                    let mut dg = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            dg[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                    dg
                });
                let doffset = needs[2].then(|| column_sums(g, m, n));
                vec![dx, dgain, doffset]
            }),
        ))
    }

    /// Sorts each column of an `[n × L]` tensor ascending. Gradient is routed
    /// back through the sorting permutation. Ties keep their original order.
    pub fn sort_columns(&self) -> Result<Tensor> {
        let (n, l) = self.expect_2d("sort_columns")?;
        let x = self.data();
        let mut perm = vec![0usize; n * l];
        let mut out = vec![0.0; n * l];
        let mut idx: Vec<usize> = Vec::with_capacity(n);
        for c in 0..l {
            idx.clear();
            idx.extend(0..n);
            idx.sort_by(|&a, &b| x[a * l + c].total_cmp(&x[b * l + c]));
            for (r, &src) in idx.iter().enumerate() {
                perm[r * l + c] = src;
                out[r * l + c] = x[src * l + c];
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            "sort_columns",
            vec![n, l],
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut dx = vec![0.0; n * l];
                for r in 0..n {
                    for c in 0..l {
                        dx[perm[r * l + c] * l + c] += g[r * l + c];
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Squared Euclidean distances between the rows of `self` `[n × d]` and
    /// `other` `[m × d]`, computed from explicit differences.
    pub fn pairwise_sq_dist(&self, other: &Tensor) -> Result<Tensor> {
        let (n, d) = self.expect_2d("pairwise_sq_dist")?;
        let (m, d2) = other.expect_2d("pairwise_sq_dist")?;
        if d != d2 {
            return Err(Error::shape("pairwise_sq_dist", self.shape(), other.shape()));
        }
        let a = self.data();
        let b = other.data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let ai = &a[i * d..(i + 1) * d];
            for j in 0..m {
                let bj = &b[j * d..(j + 1) * d];
                out[i * m + j] = ai.iter().zip(bj).fold(0.0, |acc, (x, y)| acc + (x - y) * (x - y));
            }
        }
        drop((a, b));
        Ok(Tensor::from_op(
            "pairwise_sq_dist",
            vec![n, m],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, parents, needs| {
                let a = parents[0].data();
                let b = parents[1].data();
                let mut da = needs[0].then(|| vec![0.0; n * d]);
                let mut db = needs[1].then(|| vec![0.0; m * d]);
                for i in 0..n {
                    for j in 0..m {
                        let gij = 2.0 * g[i * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for c in 0..d {
                            let diff = gij * (a[i * d + c] - b[j * d + c]);
                            if let Some(da) = da.as_mut() {
                                da[i * d + c] += diff;
                            }
                            if let Some(db) = db.as_mut() {
                                db[j * d + c] -= diff;
                            }
                        }
                    }
                }
                vec![da, db]
            }),
        ))
    }
}

// ---- kernels -------------------------------------------------------------

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

fn column_sums(g: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for r in 0..m {
        out.iter_mut().zip(&g[r * n..(r + 1) * n]).for_each(|(a, b)| *a += b);
    }
    out
}

fn transpose(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

/// `a [m×k] · b [k×n]`
fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            orow.iter_mut().zip(&b[p * n..(p + 1) * n]).for_each(|(o, bv)| *o += av * bv);
        }
    }
    out
}

/// `g [m×n] · bᵀ` where `b` is `[k×n]`.
fn matmul_bt_kernel(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = dot(grow, &b[p * n..(p + 1) * n]);
        }
    }
    out
}

/// `aᵀ · g` where `a` is `[m×k]`, `g` is `[m×n]`.
fn matmul_at_kernel(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            out[p * n..(p + 1) * n].iter_mut().zip(grow).for_each(|(o, gv)| *o += av * gv);
        }
    }
    out
}

fn conv1d_forward(
    x: &[f64],
    w: &[f64],
    frames: usize,
    c_in: usize,
    c_out: usize,
    width: usize,
) -> Vec<f64> {
    let pad = width / 2;
    let mut out = vec![0.0; frames * c_out];
    for k in 0..width {
        for t in 0..frames {
            let Some(src) = (t + k).checked_sub(pad).filter(|&s| s < frames) else {
                continue;
            };
            let orow = &mut out[t * c_out..(t + 1) * c_out];
            for c in 0..c_in {
                let xv = x[src * c_in + c];
                if xv == 0.0 {
                    continue;
                }
                let wrow = &w[(k * c_in + c) * c_out..(k * c_in + c + 1) * c_out];
                orow.iter_mut().zip(wrow).for_each(|(o, wv)| *o += xv * wv);
            }
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

// ---- finite differences ------------------------------------------------

/// Central-difference gradient of a scalar function, one coordinate at a
/// time. `f` receives constant tensors with the shape of `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("finite-difference eps must be positive, got {eps}")));
    }
    let base = x.to_vec();
    let mut grad = vec![0.0; base.len()];
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + eps;
        let plus = f(&Tensor::from_vec(x.shape(), probe.clone())?)?;
        probe[i] = base[i] - eps;
        let minus = f(&Tensor::from_vec(x.shape(), probe.clone())?)?;
        probe[i] = base[i];
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    Tensor::from_vec(x.shape(), grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-300 {
        0.0
    } else {
        norm(&diff) / scale
    }
}
