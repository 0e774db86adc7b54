//! Reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! A [`Tape`] records primitive operations in execution order; [`Tape::backward`]
//! replays them in reverse, accumulating vector-Jacobian products. Every value
//! on the tape is a [`Tensor`] addressed by a copyable [`Var`] handle.

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, softplus, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Node {
    Leaf,
    Matmul { a: Var, b: Var },
    Add { a: Var, b: Var },
    /// Row vector broadcast-added to every row of a matrix (bias add).
    AddRow { m: Var, row: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    /// Elementwise max; ties route gradient to `a`.
    Maximum { a: Var, b: Var },
    Scale { x: Var, k: f64 },
    AddConst { x: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Tanh { x: Var },
    ConcatCols { xs: Vec<Var> },
    ConcatRows { xs: Vec<Var> },
    SliceCols { x: Var, start: usize, len: usize },
    Row { x: Var, index: usize },
    BroadcastRow { x: Var, n: usize },
    MeanRows { x: Var },
    SumAll { x: Var },
    SumSqRows { x: Var },
    L2NormalizeRows { x: Var },
    /// Elementwise multiply by a constant mask (dropout, loss masking).
    ApplyMask { x: Var, mask: Vec<f64> },
    GatherRows { table: Var, indices: Vec<usize> },
    /// Masked sum of softplus(z) - y*z over all elements (binary cross-entropy
    /// computed from logits).
    BceWithLogits { logits: Var, labels: Vec<f64>, mask: Vec<f64> },
}

/// Records a forward computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    ran_backward: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node, val: Tensor) -> Var {
        self.nodes.push(node);
        self.vals.push(val);
        self.grads.push(None);
        Var(self.vals.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.vals.len() {
            return Err(Error::Usage(format!("variable {} is not on this tape", v.0)));
        }
        Ok(())
    }

    /// Register a leaf value. Inputs and parameters are validated finite here;
    /// anything non-finite that appears later is caught by the loss check.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        if !t.is_2d() {
            return Err(Error::Dimension(format!("tape values must be 2-D, got {:?}", t.shape())));
        }
        t.validate_finite("leaf")?;
        Ok(self.push(Node::Leaf, t))
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.push(Node::Leaf, Tensor::zeros(rows, cols))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.vals[v.0]
    }

    /// Gradient of the last `backward` target with respect to `v`, if any
    /// reached it. Parameters no gradient reached have an all-zero gradient;
    /// see [`Tape::grad_tensor`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let t = &self.vals[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(t.shape().to_vec(), g.clone()).unwrap(),
            None => Tensor::zeros(t.rows(), t.cols()),
        }
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.vals[v.0];
        (t.rows(), t.cols())
    }

    // ── primitive operations ────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (n, k) = self.dims(a);
        let (k2, m) = self.dims(b);
        if k != k2 {
            return Err(Error::Dimension(format!("matmul {n}x{k} by {k2}x{m}")));
        }
        let av = self.vals[a.0].data();
        let bv = self.vals[b.0].data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * m..(p + 1) * m];
                let orow = &mut out[i * m..(i + 1) * m];
                for (o, &bb) in orow.iter_mut().zip(brow) {
                    *o += aip * bb;
                }
            }
        }
        Ok(self.push(Node::Matmul { a, b }, Tensor::matrix(n, m, out)?))
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, name: &str) -> Result<(usize, usize)> {
        self.check(a)?;
        self.check(b)?;
        let da = self.dims(a);
        let db = self.dims(b);
        if da != db {
            return Err(Error::Dimension(format!("{name}: {da:?} vs {db:?}")));
        }
        Ok(da)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, m) = self.binary_same_shape(a, b, "add")?;
        let out: Vec<f64> =
            self.vals[a.0].data().iter().zip(self.vals[b.0].data()).map(|(x, y)| x + y).collect();
        Ok(self.push(Node::Add { a, b }, Tensor::matrix(n, m, out)?))
    }

    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        self.check(m)?;
        self.check(row)?;
        let (n, d) = self.dims(m);
        let (r1, rd) = self.dims(row);
        if r1 != 1 || rd != d {
            return Err(Error::Dimension(format!("add_row: {n}x{d} with row {r1}x{rd}")));
        }
        let rv = self.vals[row.0].data().to_vec();
        let out: Vec<f64> = self.vals[m.0]
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + rv[i % d])
            .collect();
        Ok(self.push(Node::AddRow { m, row }, Tensor::matrix(n, d, out)?))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, m) = self.binary_same_shape(a, b, "sub")?;
        let out: Vec<f64> =
            self.vals[a.0].data().iter().zip(self.vals[b.0].data()).map(|(x, y)| x - y).collect();
        Ok(self.push(Node::Sub { a, b }, Tensor::matrix(n, m, out)?))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, m) = self.binary_same_shape(a, b, "mul")?;
        let out: Vec<f64> =
            self.vals[a.0].data().iter().zip(self.vals[b.0].data()).map(|(x, y)| x * y).collect();
        Ok(self.push(Node::Mul { a, b }, Tensor::matrix(n, m, out)?))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, m) = self.binary_same_shape(a, b, "maximum")?;
        let out: Vec<f64> = self.vals[a.0]
            .data()
            .iter()
            .zip(self.vals[b.0].data())
            .map(|(x, y)| x.max(*y))
            .collect();
        Ok(self.push(Node::Maximum { a, b }, Tensor::matrix(n, m, out)?))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        self.check(x)?;
        let (n, m) = self.dims(x);
        let out: Vec<f64> = self.vals[x.0].data().iter().map(|v| v * k).collect();
        Ok(self.push(Node::Scale { x, k }, Tensor::matrix(n, m, out)?))
    }

    pub fn add_const(&mut self, x: Var, k: f64) -> Result<Var> {
        self.check(x)?;
        let (n, m) = self.dims(x);
        let out: Vec<f64> = self.vals[x.0].data().iter().map(|v| v + k).collect();
        let _ = k;
        Ok(self.push(Node::AddConst { x }, Tensor::matrix(n, m, out)?))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let (n, m) = self.dims(x);
        let out: Vec<f64> = self.vals[x.0].data().iter().map(|v| v.max(0.0)).collect();
        Ok(self.push(Node::Relu { x }, Tensor::matrix(n, m, out)?))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let (n, m) = self.dims(x);
        let out: Vec<f64> = self.vals[x.0].data().iter().map(|&v| sigmoid(v)).collect();
        Ok(self.push(Node::Sigmoid { x }, Tensor::matrix(n, m, out)?))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let (n, m) = self.dims(x);
        let out: Vec<f64> = self.vals[x.0].data().iter().map(|v| v.tanh()).collect();
        Ok(self.push(Node::Tanh { x }, Tensor::matrix(n, m, out)?))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Input("concat_cols of empty list".into()));
        }
        let n = self.dims(xs[0]).0;
        let mut total = 0;
        for &v in xs {
            self.check(v)?;
            let (r, c) = self.dims(v);
            if r != n {
                return Err(Error::Dimension(format!("concat_cols: row counts {n} vs {r}")));
            }
            total += c;
        }
        let mut out = vec![0.0; n * total];
        let mut off = 0;
        for &v in xs {
            let (_, c) = self.dims(v);
            let d = self.vals[v.0].data();
            for r in 0..n {
                out[r * total + off..r * total + off + c].copy_from_slice(&d[r * c..(r + 1) * c]);
            }
            off += c;
        }
        Ok(self.push(Node::ConcatCols { xs: xs.to_vec() }, Tensor::matrix(n, total, out)?))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Input("concat_rows of empty list".into()));
        }
        let c = self.dims(xs[0]).1;
        let mut total = 0;
        for &v in xs {
            self.check(v)?;
            let (r, cc) = self.dims(v);
            if cc != c {
                return Err(Error::Dimension(format!("concat_rows: col counts {c} vs {cc}")));
            }
            total += r;
        }
        let mut out = Vec::with_capacity(total * c);
        for &v in xs {
            out.extend_from_slice(self.vals[v.0].data());
        }
        Ok(self.push(Node::ConcatRows { xs: xs.to_vec() }, Tensor::matrix(total, c, out)?))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let (n, c) = self.dims(x);
        if start + len > c {
            return Err(Error::Dimension(format!("slice_cols {start}..{} of width {c}", start + len)));
        }
        let d = self.vals[x.0].data();
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&d[r * c + start..r * c + start + len]);
        }
        Ok(self.push(Node::SliceCols { x, start, len }, Tensor::matrix(n, len, out)?))
    }

    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        self.check(x)?;
        let (n, c) = self.dims(x);
        if index >= n {
            return Err(Error::Dimension(format!("row {index} of {n}x{c}")));
        }
        let d = self.vals[x.0].data()[index * c..(index + 1) * c].to_vec();
        Ok(self.push(Node::Row { x, index }, Tensor::row(d)))
    }

    pub fn broadcast_row(&mut self, x: Var, n: usize) -> Result<Var> {
        self.check(x)?;
        let (r, c) = self.dims(x);
        if r != 1 {
            return Err(Error::Dimension(format!("broadcast_row expects 1x{c}, got {r}x{c}")));
        }
        if n == 0 {
            return Err(Error::Input("broadcast_row to zero rows".into()));
        }
        let src = self.vals[x.0].data().to_vec();
        let mut out = Vec::with_capacity(n * c);
        for _ in 0..n {
            out.extend_from_slice(&src);
        }
        Ok(self.push(Node::BroadcastRow { x, n }, Tensor::matrix(n, c, out)?))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let (n, c) = self.dims(x);
        let d = self.vals[x.0].data();
        let mut out = vec![0.0; c];
        for r in 0..n {
            for j in 0..c {
                out[j] += d[r * c + j];
            }
        }
        for o in out.iter_mut() {
            *o /= n as f64;
        }
        Ok(self.push(Node::MeanRows { x }, Tensor::row(out)))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s: f64 = self.vals[x.0].data().iter().sum();
        Ok(self.push(Node::SumAll { x }, Tensor::scalar(s)))
    }

    /// Squared L2 norm of each row: n x d -> n x 1.
    pub fn sumsq_rows(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let (n, c) = self.dims(x);
        let d = self.vals[x.0].data();
        let out: Vec<f64> =
            (0..n).map(|r| d[r * c..(r + 1) * c].iter().map(|v| v * v).sum()).collect();
        Ok(self.push(Node::SumSqRows { x }, Tensor::matrix(n, 1, out)?))
    }

    /// Rows scaled to unit L2 norm; all-zero rows pass through unchanged.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let (n, c) = self.dims(x);
        let d = self.vals[x.0].data();
        let mut out = Vec::with_capacity(n * c);
        for r in 0..n {
            let row = &d[r * c..(r + 1) * c];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                out.extend_from_slice(row);
            } else {
                out.extend(row.iter().map(|v| v / norm));
            }
        }
        Ok(self.push(Node::L2NormalizeRows { x }, Tensor::matrix(n, c, out)?))
    }

    pub fn apply_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        self.check(x)?;
        let (n, c) = self.dims(x);
        if mask.len() != n * c {
            return Err(Error::Dimension(format!("mask length {} for {n}x{c}", mask.len())));
        }
        let out: Vec<f64> =
            self.vals[x.0].data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        Ok(self.push(Node::ApplyMask { x, mask }, Tensor::matrix(n, c, out)?))
    }

    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        self.check(table)?;
        let (n, c) = self.dims(table);
        if indices.is_empty() {
            return Err(Error::Input("gather_rows with no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Input(format!("gather_rows index {bad} out of {n}")));
        }
        let d = self.vals[table.0].data();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&d[i * c..(i + 1) * c]);
        }
        Ok(self.push(
            Node::GatherRows { table, indices: indices.to_vec() },
            Tensor::matrix(indices.len(), c, out)?,
        ))
    }

    /// Masked binary cross-entropy from logits, summed:
    /// sum_i mask_i * (softplus(z_i) - y_i * z_i).
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64], mask: &[f64]) -> Result<Var> {
        self.check(logits)?;
        let n = self.vals[logits.0].numel();
        if labels.len() != n || mask.len() != n {
            return Err(Error::Dimension(format!(
                "bce_with_logits: {n} logits, {} labels, {} mask",
                labels.len(),
                mask.len()
            )));
        }
        let z = self.vals[logits.0].data();
        let total: f64 = z
            .iter()
            .zip(labels)
            .zip(mask)
            .map(|((&zi, &yi), &mi)| mi * (softplus(zi) - yi * zi))
            .collect::<Vec<_>>()
            .iter()
            .sum();
        Ok(self.push(
            Node::BceWithLogits { logits, labels: labels.to_vec(), mask: mask.to_vec() },
            Tensor::scalar(total),
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Fills gradient slots for every
    /// leaf the loss depends on; unreachable leaves keep `None` (read back
    /// as zeros via [`Tape::grad_tensor`]). Intermediate values' gradients
    /// are consumed during the sweep, so only leaves stay readable.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.ran_backward {
            return Err(Error::Usage("backward already ran on this tape".into()));
        }
        if self.vals[loss.0].numel() != 1 {
            return Err(Error::Usage(format!(
                "backward target must be scalar, got {:?}",
                self.vals[loss.0].shape()
            )));
        }
        self.vals[loss.0].validate_finite("loss")?;
        self.ran_backward = true;
        self.grads[loss.0] = Some(vec![1.0]);

        let vals = &self.vals;
        let grads = &mut self.grads;
        let dims = |v: Var| {
            let t = &vals[v.0];
            (t.rows(), t.cols())
        };
        for k in (0..self.nodes.len()).rev() {
            if matches!(self.nodes[k], Node::Leaf) {
                continue;
            }
            let Some(g) = grads[k].take() else { continue };
            // nodes are single-use once the sweep reaches them
            let node = std::mem::replace(&mut self.nodes[k], Node::Leaf);
            match node {
                Node::Leaf => unreachable!(),
                Node::Matmul { a, b } => {
                    let (n, kk) = dims(a);
                    let m = dims(b).1;
                    let av = vals[a.0].data();
                    let bv = vals[b.0].data();
                    // dA = g . B^T
                    let mut da = vec![0.0; n * kk];
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..kk {
                            let brow = &bv[p * m..(p + 1) * m];
                            let mut s = 0.0;
                            for j in 0..m {
                                s += grow[j] * brow[j];
                            }
                            da[i * kk + p] = s;
                        }
                    }
                    // dB = A^T . g
                    let mut db = vec![0.0; kk * m];
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..kk {
                            let aip = av[i * kk + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let drow = &mut db[p * m..(p + 1) * m];
                            for j in 0..m {
                                drow[j] += aip * grow[j];
                            }
                        }
                    }
                    accumulate(grads, a, da);
                    accumulate(grads, b, db);
                }
                Node::Add { a, b } => {
                    accumulate_ref(grads, a, &g);
                    accumulate(grads, b, g);
                }
                Node::AddRow { m, row } => {
                    let (n, d) = dims(m);
                    let mut dr = vec![0.0; d];
                    for r in 0..n {
                        for j in 0..d {
                            dr[j] += g[r * d + j];
                        }
                    }
                    accumulate(grads, row, dr);
                    accumulate(grads, m, g);
                }
                Node::Sub { a, b } => {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(grads, a, g);
                    accumulate(grads, b, neg);
                }
                Node::Mul { a, b } => {
                    let da: Vec<f64> =
                        g.iter().zip(vals[b.0].data()).map(|(gi, bi)| gi * bi).collect();
                    let db: Vec<f64> =
                        g.iter().zip(vals[a.0].data()).map(|(gi, ai)| gi * ai).collect();
                    accumulate(grads, a, da);
                    accumulate(grads, b, db);
                }
                Node::Maximum { a, b } => {
                    let av = vals[a.0].data();
                    let bv = vals[b.0].data();
                    let da: Vec<f64> = g
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(gi, (x, y))| if x >= y { *gi } else { 0.0 })
                        .collect();
                    let db: Vec<f64> = g
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(gi, (x, y))| if y > x { *gi } else { 0.0 })
                        .collect();
                    accumulate(grads, a, da);
                    accumulate(grads, b, db);
                }
                Node::Scale { x, k: f } => {
                    let mut dx = g;
                    for v in dx.iter_mut() {
                        *v *= f;
                    }
                    accumulate(grads, x, dx);
                }
                Node::AddConst { x } => accumulate(grads, x, g),
                Node::Relu { x } => {
                    let mut dx = g;
                    for (v, xi) in dx.iter_mut().zip(vals[x.0].data()) {
                        if *xi <= 0.0 {
                            *v = 0.0;
                        }
                    }
                    accumulate(grads, x, dx);
                }
                Node::Sigmoid { x } => {
                    let mut dx = g;
                    for (v, yi) in dx.iter_mut().zip(vals[k].data()) {
                        *v *= yi * (1.0 - yi);
                    }
                    accumulate(grads, x, dx);
                }
                Node::Tanh { x } => {
                    let mut dx = g;
                    for (v, yi) in dx.iter_mut().zip(vals[k].data()) {
                        *v *= 1.0 - yi * yi;
                    }
                    accumulate(grads, x, dx);
                }
                Node::ConcatCols { xs } => {
                    let (n, total) = dims(Var(k));
                    let mut off = 0;
                    for v in xs {
                        let (_, c) = dims(v);
                        let mut dv = vec![0.0; n * c];
                        for r in 0..n {
                            dv[r * c..(r + 1) * c]
                                .copy_from_slice(&g[r * total + off..r * total + off + c]);
                        }
                        accumulate(grads, v, dv);
                        off += c;
                    }
                }
                Node::ConcatRows { xs } => {
                    let c = dims(Var(k)).1;
                    let mut off = 0;
                    for v in xs {
                        let (r, _) = dims(v);
                        accumulate_ref(grads, v, &g[off * c..(off + r) * c]);
                        off += r;
                    }
                }
                Node::SliceCols { x, start, len } => {
                    let (n, c) = dims(x);
                    let mut dx = vec![0.0; n * c];
                    for r in 0..n {
                        dx[r * c + start..r * c + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    accumulate(grads, x, dx);
                }
                Node::Row { x, index } => {
                    let (n, c) = dims(x);
                    match &mut grads[x.0] {
                        Some(gx) => {
                            for (gi, ci) in gx[index * c..(index + 1) * c].iter_mut().zip(&g) {
                                *gi += ci;
                            }
                        }
                        None => {
                            let mut dx = vec![0.0; n * c];
                            dx[index * c..(index + 1) * c].copy_from_slice(&g);
                            grads[x.0] = Some(dx);
                        }
                    }
                }
                Node::BroadcastRow { x, n } => {
                    let c = dims(x).1;
                    let mut dx = vec![0.0; c];
                    for r in 0..n {
                        for j in 0..c {
                            dx[j] += g[r * c + j];
                        }
                    }
                    accumulate(grads, x, dx);
                }
                Node::MeanRows { x } => {
                    let (n, c) = dims(x);
                    let scale = 1.0 / n as f64;
                    let mut dx = vec![0.0; n * c];
                    for r in 0..n {
                        for j in 0..c {
                            dx[r * c + j] = g[j] * scale;
                        }
                    }
                    accumulate(grads, x, dx);
                }
                Node::SumAll { x } => {
                    let (n, c) = dims(x);
                    accumulate(grads, x, vec![g[0]; n * c]);
                }
                Node::SumSqRows { x } => {
                    let (n, c) = dims(x);
                    let xv = vals[x.0].data();
                    let mut dx = vec![0.0; n * c];
                    for r in 0..n {
                        for j in 0..c {
                            dx[r * c + j] = 2.0 * xv[r * c + j] * g[r];
                        }
                    }
                    accumulate(grads, x, dx);
                }
                Node::L2NormalizeRows { x } => {
                    let (n, c) = dims(x);
                    let xv = vals[x.0].data();
                    let yv = vals[k].data();
                    let mut dx = vec![0.0; n * c];
                    for r in 0..n {
                        let xr = &xv[r * c..(r + 1) * c];
                        let yr = &yv[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm == 0.0 {
                            dx[r * c..(r + 1) * c].copy_from_slice(gr);
                        } else {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                dx[r * c + j] = (gr[j] - yr[j] * dot) / norm;
                            }
                        }
                    }
                    accumulate(grads, x, dx);
                }
                Node::ApplyMask { x, mask } => {
                    let mut dx = g;
                    for (v, mi) in dx.iter_mut().zip(&mask) {
                        *v *= mi;
                    }
                    accumulate(grads, x, dx);
                }
                Node::GatherRows { table, indices } => {
                    let (n, c) = dims(table);
                    if grads[table.0].is_none() {
                        grads[table.0] = Some(vec![0.0; n * c]);
                    }
                    let gt = grads[table.0].as_mut().unwrap();
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..c {
                            gt[i * c + j] += g[r * c + j];
                        }
                    }
                }
                Node::BceWithLogits { logits, labels, mask } => {
                    let z = vals[logits.0].data();
                    let dz: Vec<f64> = z
                        .iter()
                        .zip(labels.iter().zip(&mask))
                        .map(|(&zi, (&yi, &mi))| g[0] * mi * (sigmoid(zi) - yi))
                        .collect();
                    accumulate(grads, logits, dz);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (gi, ci) in g.iter_mut().zip(&contrib) {
                *gi += ci;
            }
        }
        None => grads[v.0] = Some(contrib),
    }
}

fn accumulate_ref(grads: &mut [Option<Vec<f64>>], v: Var, contrib: &[f64]) {
    match &mut grads[v.0] {
        Some(g) => {
            for (gi, ci) in g.iter_mut().zip(contrib) {
                *gi += ci;
            }
        }
        None => grads[v.0] = Some(contrib.to_vec()),
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_val(t: &Tape, v: Var) -> f64 {
        t.value(v).data()[0]
    }

    #[test]
    fn relu_sigmoid_matmul_definitions() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(vec![-1.0, 0.0, 2.0])).unwrap();
        let r = t.relu(x).unwrap();
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);

        let z = t.leaf(Tensor::row(vec![0.0])).unwrap();
        let s = t.sigmoid(z).unwrap();
        assert_eq!(t.value(s).data(), &[0.5]);

        let eye = t.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let col = t.leaf(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap()).unwrap();
        let prod = t.matmul(eye, col).unwrap();
        assert_eq!(t.value(prod).data(), &[3.0, 4.0]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(vec![1.0, 2.0, 3.0])).unwrap();
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum_all(sq).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_constant_has_zero_grads() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(vec![5.0])).unwrap();
        let c = t.leaf(Tensor::scalar(7.0)).unwrap();
        let loss = t.sum_all(c).unwrap();
        t.backward(loss).unwrap();
        assert!(t.grad(x).is_none());
        assert_eq!(t.grad_tensor(x).data(), &[0.0]);
    }

    #[test]
    fn backward_sigmoid_of_dot() {
        // loss = sigmoid(w * x), w = 0, x = 1 -> dloss/dw = sigmoid'(0) * x = 0.25
        let mut t = Tape::new();
        let w = t.leaf(Tensor::scalar(0.0)).unwrap();
        let x = t.leaf(Tensor::scalar(1.0)).unwrap();
        let wx = t.mul(w, x).unwrap();
        let loss = t.sigmoid(wx).unwrap();
        t.backward(loss).unwrap();
        assert!((t.grad(w).unwrap()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn backward_twice_is_usage_error() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(1.0)).unwrap();
        let loss = t.sum_all(x).unwrap();
        t.backward(loss).unwrap();
        assert!(matches!(t.backward(loss), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_on_non_scalar_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(vec![1.0, 2.0])).unwrap();
        assert!(matches!(t.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn nan_leaf_rejected() {
        let mut t = Tape::new();
        assert!(matches!(t.leaf(Tensor::row(vec![f64::NAN])), Err(Error::Numeric(_))));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::row(vec![1.0, 2.0])).unwrap();
        let b = t.leaf(Tensor::row(vec![1.0, 2.0, 3.0])).unwrap();
        assert!(matches!(t.add(a, b), Err(Error::Dimension(_))));
        assert!(matches!(t.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn backward_linearity() {
        // grad of a*f + b*g equals a*grad(f) + b*grad(g), tol 1e-10
        let xv = vec![0.3, -1.2, 2.0];
        let (a, b) = (2.5, -1.75);

        let grad_of = |build: &dyn Fn(&mut Tape, Var) -> Var| -> Vec<f64> {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::row(xv.clone())).unwrap();
            let loss = build(&mut t, x);
            t.backward(loss).unwrap();
            t.grad(x).unwrap().to_vec()
        };

        let f = |t: &mut Tape, x: Var| {
            let s = t.mul(x, x).unwrap();
            t.sum_all(s).unwrap()
        };
        let g = |t: &mut Tape, x: Var| {
            let s = t.tanh(x).unwrap();
            t.sum_all(s).unwrap()
        };
        let combined = |t: &mut Tape, x: Var| {
            let lf = f(t, x);
            let lg = g(t, x);
            let af = t.scale(lf, a).unwrap();
            let bg = t.scale(lg, b).unwrap();
            t.add(af, bg).unwrap()
        };

        let gf = grad_of(&f);
        let gg = grad_of(&g);
        let gc = grad_of(&combined);
        for i in 0..xv.len() {
            assert!((gc[i] - (a * gf[i] + b * gg[i])).abs() < 1e-10);
        }
    }

    /// Central finite differences on a scalar-valued builder over one leaf.
    fn fd_check(xv: Vec<f64>, build: impl Fn(&mut Tape, Var) -> Var) {
        let eval = |data: &[f64]| -> f64 {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::row(data.to_vec())).unwrap();
            let loss = build(&mut t, x);
            scalar_val(&t, loss)
        };
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(xv.clone())).unwrap();
        let loss = build(&mut t, x);
        t.backward(loss).unwrap();
        let analytic = t.grad_tensor(x).data().to_vec();

        let eps = 1e-6;
        for i in 0..xv.len() {
            let mut plus = xv.clone();
            plus[i] += eps;
            let mut minus = xv.clone();
            minus[i] -= eps;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-8);
            let rel = if (analytic[i] - fd).abs() <= 1e-9 {
                0.0
            } else {
                (analytic[i] - fd).abs() / denom
            };
            assert!(rel < 1e-6, "coord {i}: analytic {} vs fd {fd}", analytic[i]);
        }
    }

    #[test]
    fn primitives_match_finite_differences() {
        // inputs avoid relu/maximum kinks
        let xv = vec![0.7, -1.3, 0.4, 2.1, -0.6, 1.9];

        fd_check(xv.clone(), |t, x| {
            let s = t.sigmoid(x).unwrap();
            let h = t.tanh(s).unwrap();
            t.sum_all(h).unwrap()
        });
        fd_check(xv.clone(), |t, x| {
            let r = t.relu(x).unwrap();
            t.sum_all(r).unwrap()
        });
        fd_check(xv.clone(), |t, x| {
            let n = t.l2_normalize_rows(x).unwrap();
            let sq = t.mul(n, n).unwrap();
            let w = t.leaf(Tensor::row(vec![0.3, -0.2, 0.9, 0.1, -0.5, 0.7])).unwrap();
            let p = t.mul(sq, w).unwrap();
            t.sum_all(p).unwrap()
        });
        fd_check(xv.clone(), |t, x| {
            let m = t.leaf(Tensor::matrix(6, 2, (0..12).map(|i| 0.1 * i as f64).collect()).unwrap()).unwrap();
            let prod = t.matmul(x, m).unwrap();
            let s = t.sumsq_rows(prod).unwrap();
            t.sum_all(s).unwrap()
        });
        fd_check(xv.clone(), |t, x| {
            let other = t.leaf(Tensor::row(vec![0.5, -1.0, 0.5, 2.0, -1.0, 2.0])).unwrap();
            let mx = t.maximum(x, other).unwrap();
            let sq = t.mul(mx, mx).unwrap();
            t.sum_all(sq).unwrap()
        });
        fd_check(xv.clone(), |t, x| {
            let wide = t.broadcast_row(x, 3).unwrap();
            let mean = t.mean_rows(wide).unwrap();
            let sl = t.slice_cols(mean, 1, 4).unwrap();
            let sq = t.sumsq_rows(sl).unwrap();
            t.sum_all(sq).unwrap()
        });
        fd_check(xv.clone(), |t, x| {
            let l = t.bce_with_logits(x, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0], &[1.0, 1.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
            t.scale(l, 0.5).unwrap()
        });
        fd_check(xv, |t, x| {
            let mask: Vec<f64> = vec![2.0, 0.0, 1.0, 1.0, 0.0, 0.5];
            let m = t.apply_mask(x, mask).unwrap();
            let a = t.add_const(m, 0.3).unwrap();
            let s = t.scale(a, 1.7).unwrap();
            let sq = t.mul(s, s).unwrap();
            t.sum_all(sq).unwrap()
        });
    }

    #[test]
    fn gather_rows_scatter_adds() {
        let mut t = Tape::new();
        let table = t.leaf(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap()).unwrap();
        let g = t.gather_rows(table, &[2, 0, 2]).unwrap();
        assert_eq!(t.value(g).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = t.sum_all(g).unwrap();
        t.backward(s).unwrap();
        // row 2 used twice, row 0 once, row 1 never
        assert_eq!(t.grad(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_and_row_roundtrip_grads() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::row(vec![1.0, 2.0])).unwrap();
        let b = t.leaf(Tensor::row(vec![3.0])).unwrap();
        let cat = t.concat_cols(&[a, b]).unwrap();
        assert_eq!(t.value(cat).data(), &[1.0, 2.0, 3.0]);
        let stacked = t.concat_rows(&[cat, cat]).unwrap();
        let r1 = t.row(stacked, 1).unwrap();
        let sq = t.mul(r1, r1).unwrap();
        let loss = t.sum_all(sq).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[2.0, 4.0]);
        assert_eq!(t.grad(b).unwrap(), &[6.0]);
    }

    #[test]
    fn zero_row_l2_normalize_passthrough() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(2, 2, vec![0.0, 0.0, 3.0, 4.0]).unwrap()).unwrap();
        let n = t.l2_normalize_rows(x).unwrap();
        assert_eq!(t.value(n).data(), &[0.0, 0.0, 0.6, 0.8]);
    }
}
