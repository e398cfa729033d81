use super::tensor::{gemm, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Sin(Var),
    Cos(Var),
    Relu(Var),
    Log(Var),
    Exp(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    CausalMask(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    PickPerRow(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    Reshape(Var),
    BlockMatMulNt(Var, Var, usize),
    BlockMatMul(Var, Var, usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Linear record of primitive operations supporting one reverse sweep.
///
/// Nodes are appended in evaluation order, so the record is topologically
/// sorted by construction. After [`Tape::backward`] the tape refuses a second
/// sweep until [`Tape::reset`] clears the stored adjoints.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    swept: bool,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf. Its gradient is tracked when `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let ng = tensor.requires_grad();
        self.push(tensor, Op::Leaf, ng)
    }

    /// Records a leaf whose gradient is never tracked.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let t = tensor.with_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let x = &self.nodes[a.0].value;
        let data = x.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("shape preserved");
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = (av.dims2(), bv.dims2());
        if k != k2 {
            return Err(dim_err("matmul", av, bv));
        }
        let mut out = vec![0.0; m * n];
        gemm(av.data(), bv.data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (m, n) = av.dims2();
        let src = av.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let ng = self.ng(a);
        self.push(
            Tensor::matrix(n, m, out).expect("transpose shape"),
            Op::Transpose(a),
            ng,
        )
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err(name, av, bv));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    fn zip_row(
        &mut self,
        a: Var,
        r: Var,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(r));
        let (m, n) = av.dims2();
        if rv.len() != n || rv.dims2().0 != 1 {
            return Err(dim_err(name, av, rv));
        }
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            data.extend(
                av.row_slice(i)
                    .iter()
                    .zip(rv.data())
                    .map(|(&x, &y)| f(x, y)),
            );
        }
        let value = Tensor::matrix(m, n, data)?;
        let ng = self.ng(a) || self.ng(r);
        Ok(self.push(value, op, ng))
    }

    /// Adds a `1×n` row to every row of an `m×n` matrix (the only broadcast supported).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.zip_row(a, row, "add_row", Op::AddRow(a, row), |x, y| x + y)
    }

    /// Multiplies every row of an `m×n` matrix elementwise by a `1×n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.zip_row(a, row, "mul_row", Op::MulRow(a, row), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sin(a), f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Op::Cos(a), f64::cos)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    /// Row-wise softmax with per-row max subtraction. Entries equal to `-inf`
    /// receive zero weight.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (m, n) = av.dims2();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = av.row_slice(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut z = 0.0;
            for &x in row {
                let e = (x - mx).exp();
                z += e;
                out.push(e);
            }
            for v in &mut out[start..] {
                *v /= z;
            }
        }
        let ng = self.ng(a);
        self.push(
            Tensor::new(av.shape().to_vec(), out).expect("softmax shape"),
            Op::SoftmaxRows(a),
            ng,
        )
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (m, n) = av.dims2();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = av.row_slice(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|&x| x - lse));
        }
        let ng = self.ng(a);
        self.push(
            Tensor::new(av.shape().to_vec(), out).expect("log_softmax shape"),
            Op::LogSoftmaxRows(a),
            ng,
        )
    }

    /// Sets entry `(i, j)` of an `m×n` score matrix to `-inf` when
    /// `j > i + (n - m)`: row `i` is the query at sequence position
    /// `i + n - m` and may only see keys up to that position.
    pub fn causal_mask(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = av.dims2();
        if m > n {
            return Err(Error::Contract(format!(
                "causal mask needs rows <= cols, got {m}x{n}"
            )));
        }
        let off = n - m;
        let mut out = av.data().to_vec();
        for i in 0..m {
            for j in (i + off + 1)..n {
                out[i * n + j] = f64::NEG_INFINITY;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::CausalMask(a), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let m = self.value(*first).dims2().0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).dims2();
            if pm != m {
                return Err(dim_err("concat_cols", self.value(*first), self.value(p)));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::matrix(m, n, out)?,
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let n = self.value(*first).dims2().1;
        let mut m = 0;
        let mut out = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            let (pm, pn) = pv.dims2();
            if pn != n {
                return Err(dim_err("concat_rows", self.value(*first), pv));
            }
            m += pm;
            out.extend_from_slice(pv.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::matrix(m, n, out)?,
            Op::ConcatRows(parts.to_vec()),
            ng,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = av.dims2();
        if start >= end || end > m {
            return Err(Error::Contract(format!(
                "row slice {start}..{end} out of range for {m} rows"
            )));
        }
        let out = av.data()[start * n..end * n].to_vec();
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::matrix(end - start, n, out)?,
            Op::SliceRows(a, start),
            ng,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = av.dims2();
        if start >= end || end > n {
            return Err(Error::Contract(format!(
                "column slice {start}..{end} out of range for {n} columns"
            )));
        }
        let mut out = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            out.extend_from_slice(&av.row_slice(i)[start..end]);
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::matrix(m, end - start, out)?,
            Op::SliceCols(a, start),
            ng,
        ))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = av.dims2();
        if idx.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        let mut out = Vec::with_capacity(idx.len() * n);
        for &r in idx {
            if r >= m {
                return Err(Error::Contract(format!(
                    "row index {r} out of range for {m} rows"
                )));
            }
            out.extend_from_slice(av.row_slice(r));
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::matrix(idx.len(), n, out)?,
            Op::GatherRows(a, idx.to_vec()),
            ng,
        ))
    }

    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = av.dims2();
        if idx.is_empty() {
            return Err(Error::Contract("gather_cols with no indices".into()));
        }
        if let Some(&c) = idx.iter().find(|&&c| c >= n) {
            return Err(Error::Contract(format!(
                "column index {c} out of range for {n} columns"
            )));
        }
        let mut out = Vec::with_capacity(m * idx.len());
        for i in 0..m {
            let row = av.row_slice(i);
            out.extend(idx.iter().map(|&c| row[c]));
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::matrix(m, idx.len(), out)?,
            Op::GatherCols(a, idx.to_vec()),
            ng,
        ))
    }

    /// Picks column `idx[i]` from row `i`, producing an `m×1` column.
    pub fn pick_per_row(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = av.dims2();
        if idx.len() != m {
            return Err(Error::Dimension {
                op: "pick_per_row",
                lhs: av.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let mut out = Vec::with_capacity(m);
        for (i, &c) in idx.iter().enumerate() {
            if c >= n {
                return Err(Error::Contract(format!(
                    "column index {c} out of range for {n} columns"
                )));
            }
            out.push(av.get(i, c));
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::column(out)?, Op::PickPerRow(a, idx.to_vec()), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.data().iter().sum::<f64>() / av.len() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Row sums of an `m×n` matrix as an `m×1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (m, _) = av.dims2();
        let out = (0..m).map(|i| av.row_slice(i).iter().sum()).collect();
        let ng = self.ng(a);
        self.push(
            Tensor::column(out).expect("sum_cols shape"),
            Op::SumCols(a),
            ng,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let av = self.value(a);
        let value = Tensor::new(shape, av.data().to_vec())?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    /// Per-block `a_i b_iᵀ` for `blocks` equal row blocks of `a` (`B·ra × h`)
    /// and `b` (`B·rb × h`); the `ra×rb` results are stacked into `B·ra × rb`.
    pub fn block_matmul_nt(&mut self, a: Var, b: Var, blocks: usize) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((ma, h), (mb, h2)) = (av.dims2(), bv.dims2());
        if blocks == 0 || h != h2 || ma % blocks != 0 || mb % blocks != 0 {
            return Err(dim_err("block_matmul_nt", av, bv));
        }
        let (ra, rb) = (ma / blocks, mb / blocks);
        let mut out = vec![0.0; ma * rb];
        for i in 0..blocks {
            gemm_nt(
                &av.data()[i * ra * h..(i + 1) * ra * h],
                &bv.data()[i * rb * h..(i + 1) * rb * h],
                &mut out[i * ra * rb..(i + 1) * ra * rb],
                ra,
                h,
                rb,
            );
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::matrix(ma, rb, out)?,
            Op::BlockMatMulNt(a, b, blocks),
            ng,
        ))
    }

    /// Per-block `w_i v_i` for `w` (`B·ra × rb`) and `v` (`B·rb × h`), stacked into `B·ra × h`.
    pub fn block_matmul(&mut self, w: Var, v: Var, blocks: usize) -> Result<Var> {
        let (wv, vv) = (self.value(w), self.value(v));
        let ((mw, rb), (mv, h)) = (wv.dims2(), vv.dims2());
        if blocks == 0 || mw % blocks != 0 || mv != blocks * rb {
            return Err(dim_err("block_matmul", wv, vv));
        }
        let ra = mw / blocks;
        let mut out = vec![0.0; mw * h];
        for i in 0..blocks {
            gemm(
                &wv.data()[i * ra * rb..(i + 1) * ra * rb],
                &vv.data()[i * rb * h..(i + 1) * rb * h],
                &mut out[i * ra * h..(i + 1) * ra * h],
                ra,
                rb,
                h,
            );
        }
        let ng = self.ng(w) || self.ng(v);
        Ok(self.push(
            Tensor::matrix(mw, h, out)?,
            Op::BlockMatMul(w, v, blocks),
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.swept {
            return Err(Error::State(
                "backward already ran on this tape; call reset() first".into(),
            ));
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad && grads[idx].is_none() {
                grads[idx] = Some(vec![0.0; node.value.len()]);
            }
        }
        self.grads = grads;
        self.swept = true;
        Ok(())
    }

    /// Clears adjoints so that `backward` may run again.
    pub fn reset(&mut self) {
        self.grads.clear();
        self.swept = false;
    }

    /// Gradient of the last swept loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let ((m, k), (_, n)) = (av.dims2(), bv.dims2());
                acc(*a, &mut |ga| gemm_nt(g, bv.data(), ga, m, n, k));
                acc(*b, &mut |gb| gemm_tn(av.data(), g, gb, m, k, n));
            }
            Op::Transpose(a) => {
                let (m, n) = nodes[a.0].value.dims2();
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |ga| {
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gi * bi;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *x += gi * ai;
                    }
                });
            }
            Op::AddRow(a, r) => {
                let n = nodes[r.0].value.len();
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*r, &mut |gr| {
                    for row in g.chunks(n) {
                        add_into(gr, row);
                    }
                });
            }
            Op::MulRow(a, r) => {
                let n = nodes[r.0].value.len();
                let (av, rv) = (nodes[a.0].value.data(), nodes[r.0].value.data());
                acc(*a, &mut |ga| {
                    for (grow, garow) in g.chunks(n).zip(ga.chunks_mut(n)) {
                        for ((x, gi), ri) in garow.iter_mut().zip(grow).zip(rv) {
                            *x += gi * ri;
                        }
                    }
                });
                acc(*r, &mut |gr| {
                    for (grow, arow) in g.chunks(n).zip(av.chunks(n)) {
                        for ((x, gi), ai) in gr.iter_mut().zip(grow).zip(arow) {
                            *x += gi * ai;
                        }
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| {
                ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi * c)
            }),
            Op::Sin(a) => {
                let av = nodes[a.0].value.data();
                acc(*a, &mut |ga| elementwise(ga, g, av, f64::cos));
            }
            Op::Cos(a) => {
                let av = nodes[a.0].value.data();
                acc(*a, &mut |ga| elementwise(ga, g, av, |x| -x.sin()));
            }
            Op::Relu(a) => {
                let av = nodes[a.0].value.data();
                acc(*a, &mut |ga| {
                    elementwise(ga, g, av, |x| if x > 0.0 { 1.0 } else { 0.0 })
                });
            }
            Op::Log(a) => {
                let av = nodes[a.0].value.data();
                acc(*a, &mut |ga| elementwise(ga, g, av, |x| 1.0 / x));
            }
            Op::Exp(a) => {
                let ov = out.data();
                acc(*a, &mut |ga| {
                    for ((x, gi), oi) in ga.iter_mut().zip(g).zip(ov) {
                        *x += gi * oi;
                    }
                });
            }
            Op::Softplus(a) => {
                let av = nodes[a.0].value.data();
                acc(*a, &mut |ga| elementwise(ga, g, av, sigmoid));
            }
            Op::SoftmaxRows(a) => {
                let (_, n) = out.dims2();
                let s = out.data();
                acc(*a, &mut |ga| {
                    for ((srow, grow), garow) in s.chunks(n).zip(g.chunks(n)).zip(ga.chunks_mut(n))
                    {
                        let dot: f64 = srow.iter().zip(grow).map(|(x, y)| x * y).sum();
                        for ((x, si), gi) in garow.iter_mut().zip(srow).zip(grow) {
                            *x += si * (gi - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let (_, n) = out.dims2();
                let y = out.data();
                acc(*a, &mut |ga| {
                    for ((yrow, grow), garow) in y.chunks(n).zip(g.chunks(n)).zip(ga.chunks_mut(n))
                    {
                        let gsum: f64 = grow.iter().sum();
                        for ((x, yi), gi) in garow.iter_mut().zip(yrow).zip(grow) {
                            *x += gi - yi.exp() * gsum;
                        }
                    }
                });
            }
            Op::CausalMask(a) => {
                let (m, n) = out.dims2();
                let off = n - m;
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for j in 0..=(i + off) {
                            ga[i * n + j] += g[i * n + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (m, n) = out.dims2();
                let mut col = 0;
                for &p in parts {
                    let pn = nodes[p.0].value.dims2().1;
                    acc(p, &mut |gp| {
                        for i in 0..m {
                            add_into(
                                &mut gp[i * pn..(i + 1) * pn],
                                &g[i * n + col..i * n + col + pn],
                            );
                        }
                    });
                    col += pn;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    acc(p, &mut |gp| add_into(gp, &g[off..off + len]));
                    off += len;
                }
            }
            Op::SliceRows(a, start) => {
                let n = out.dims2().1;
                acc(*a, &mut |ga| {
                    add_into(&mut ga[start * n..start * n + g.len()], g)
                });
            }
            Op::SliceCols(a, start) => {
                let (m, w) = out.dims2();
                let n = nodes[a.0].value.dims2().1;
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        add_into(
                            &mut ga[i * n + start..i * n + start + w],
                            &g[i * w..(i + 1) * w],
                        );
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let n = out.dims2().1;
                acc(*a, &mut |ga| {
                    for (i, &r) in idx.iter().enumerate() {
                        add_into(&mut ga[r * n..(r + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                });
            }
            Op::GatherCols(a, idx) => {
                let (m, w) = out.dims2();
                let n = nodes[a.0].value.dims2().1;
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for (j, &c) in idx.iter().enumerate() {
                            ga[i * n + c] += g[i * w + j];
                        }
                    }
                });
            }
            Op::PickPerRow(a, idx) => {
                let n = nodes[a.0].value.dims2().1;
                acc(*a, &mut |ga| {
                    for (i, &c) in idx.iter().enumerate() {
                        ga[i * n + c] += g[i];
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = nodes[a.0].value.len() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::SumCols(a) => {
                let n = nodes[a.0].value.dims2().1;
                acc(*a, &mut |ga| {
                    for (row, gi) in ga.chunks_mut(n).zip(g) {
                        row.iter_mut().for_each(|x| *x += gi);
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::BlockMatMulNt(a, b, blocks) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let ((ma, h), (mb, _)) = (av.dims2(), bv.dims2());
                let (ra, rb) = (ma / blocks, mb / blocks);
                acc(*a, &mut |ga| {
                    for i in 0..*blocks {
                        gemm(
                            &g[i * ra * rb..(i + 1) * ra * rb],
                            &bv.data()[i * rb * h..(i + 1) * rb * h],
                            &mut ga[i * ra * h..(i + 1) * ra * h],
                            ra,
                            rb,
                            h,
                        );
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..*blocks {
                        gemm_tn(
                            &g[i * ra * rb..(i + 1) * ra * rb],
                            &av.data()[i * ra * h..(i + 1) * ra * h],
                            &mut gb[i * rb * h..(i + 1) * rb * h],
                            ra,
                            rb,
                            h,
                        );
                    }
                });
            }
            Op::BlockMatMul(w, v, blocks) => {
                let (wv, vv) = (&nodes[w.0].value, &nodes[v.0].value);
                let ((mw, rb), (_, h)) = (wv.dims2(), vv.dims2());
                let ra = mw / blocks;
                acc(*w, &mut |gw| {
                    for i in 0..*blocks {
                        gemm_nt(
                            &g[i * ra * h..(i + 1) * ra * h],
                            &vv.data()[i * rb * h..(i + 1) * rb * h],
                            &mut gw[i * ra * rb..(i + 1) * ra * rb],
                            ra,
                            h,
                            rb,
                        );
                    }
                });
                acc(*v, &mut |gv| {
                    for i in 0..*blocks {
                        gemm_tn(
                            &wv.data()[i * ra * rb..(i + 1) * ra * rb],
                            &g[i * ra * h..(i + 1) * ra * h],
                            &mut gv[i * rb * h..(i + 1) * rb * h],
                            ra,
                            rb,
                            h,
                        );
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn elementwise(ga: &mut [f64], g: &[f64], x: &[f64], d: impl Fn(f64) -> f64) {
    for ((o, gi), xi) in ga.iter_mut().zip(g).zip(x) {
        *o += gi * d(*xi);
    }
}
