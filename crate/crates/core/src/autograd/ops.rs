use super::{accumulate, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::math::{compensated_sum, gelu, gelu_grad, sigmoid};
use crate::tensor::{gemm, Tensor};

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape { op, detail: format!("{:?} vs {:?}", a.shape(), b.shape()) }
}

pub(crate) fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

impl Graph {
    fn rg2(&self, a: Var, b: Var) -> bool {
        self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
    }

    fn rg1(&self, a: Var) -> bool {
        self.nodes[a.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg2(a, b);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.cols() {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let v = gemm(ta, false, tb, true);
        let rg = self.rg2(a, b);
        Ok(self.push(v, Op::MatMulNt(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg2(a, b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg2(a, b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg2(a, b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// Adds a length-`c` vector to every row of an `r×c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if ta.shape().len() != 2 || tr.len() != ta.cols() {
            return Err(shape_err("add_row", ta, tr));
        }
        let c = ta.cols();
        let mut v = ta.clone();
        for r in v.data_mut().chunks_mut(c) {
            for (x, b) in r.iter_mut().zip(tr.data()) {
                *x += b;
            }
        }
        let rg = self.rg2(a, row);
        Ok(self.push(v, Op::AddRow(a, row), rg))
    }

    /// `a · diag(d)`: scales column `j` of `a` by `d[j]`.
    pub fn mul_row(&mut self, a: Var, d: Var) -> Result<Var> {
        let (ta, td) = (self.value(a), self.value(d));
        if ta.shape().len() != 2 || td.len() != ta.cols() {
            return Err(shape_err("mul_row", ta, td));
        }
        let c = ta.cols();
        let mut v = ta.clone();
        for r in v.data_mut().chunks_mut(c) {
            for (x, s) in r.iter_mut().zip(td.data()) {
                *x *= s;
            }
        }
        let rg = self.rg2(a, d);
        Ok(self.push(v, Op::MulRow(a, d), rg))
    }

    /// Right-multiplication by `diag(d)`.
    pub fn diag_scale(&mut self, a: Var, d: Var) -> Result<Var> {
        self.mul_row(a, d)
    }

    /// `diag(d) · a`: scales row `i` of `a` by `d[i]`.
    pub fn mul_col(&mut self, a: Var, d: Var) -> Result<Var> {
        let (ta, td) = (self.value(a), self.value(d));
        if ta.shape().len() != 2 || td.len() != ta.rows() {
            return Err(shape_err("mul_col", ta, td));
        }
        let c = ta.cols();
        let mut v = ta.clone();
        for (r, s) in v.data_mut().chunks_mut(c).zip(td.data()) {
            for x in r.iter_mut() {
                *x *= s;
            }
        }
        let rg = self.rg2(a, d);
        Ok(self.push(v, Op::MulCol(a, d), rg))
    }

    /// Tensor times a one-element node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a), self.value(s));
        if ts.len() != 1 {
            return Err(shape_err("scale_by", ta, ts));
        }
        let k = ts.item();
        let v = ta.map(|x| x * k);
        let rg = self.rg2(a, s);
        Ok(self.push(v, Op::ScaleBy(a, s), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        let rg = self.rg1(a);
        self.push(v, Op::Scale(a, k), rg)
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        let rg = self.rg1(a);
        self.push(v, Op::AddConst(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg1(a);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg1(a);
        self.push(v, Op::Mean(a), rg)
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let s = compensated_sum(ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)));
        let v = Tensor::scalar(s / ta.len() as f64);
        let rg = self.rg2(a, b);
        Ok(self.push(v, Op::Mse(a, b), rg))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let rg = self.rg1(a);
        self.push(v, Op::Square(a), rg)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        let rg = self.rg1(a);
        self.push(v, Op::Softmax(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg1(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        let rg = self.rg1(a);
        self.push(v, Op::Gelu(a), rg)
    }

    /// Clamp to `[lo, hi]`; the derivative is 1 strictly inside, 0 outside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(a);
        let d = t
            .data()
            .iter()
            .map(|&x| (x - lo).abs().min((x - hi).abs()))
            .fold(f64::INFINITY, f64::min);
        let v = t.map(|x| x.clamp(lo, hi));
        let rg = self.rg1(a);
        self.note_kink(d);
        self.push(v, Op::Clamp(a, lo, hi), rg)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of length `c`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = tx.cols();
        if tx.shape().len() != 2 || tg.len() != c || tb.len() != c {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let mut xhat = tx.clone();
        let mut rstd = Vec::with_capacity(tx.rows());
        let mut out = tx.clone();
        for (hrow, orow) in xhat.data_mut().chunks_mut(c).zip(out.data_mut().chunks_mut(c)) {
            let mu = hrow.iter().sum::<f64>() / c as f64;
            let var = hrow.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for j in 0..c {
                hrow[j] = (hrow[j] - mu) * r;
                orow[j] = hrow[j] * tg.data()[j] + tb.data()[j];
            }
        }
        let rg = self.rg1(x) || self.rg2(gamma, beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let rg = self.rg1(a);
        self.push(v, Op::Transpose(a), rg)
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::Shape { op: "concat_cols", detail: "row counts differ".into() });
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg1(p));
        let v = Tensor::matrix(rows, total, data)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return Err(Error::Shape { op: "concat_rows", detail: "column counts differ".into() });
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
            rows += self.value(p).rows();
        }
        let rg = parts.iter().any(|&p| self.rg1(p));
        let v = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start > end || end > t.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                detail: format!("[{start},{end}) of {:?}", t.shape()),
            });
        }
        let v = t.slice_cols(start, end);
        let rg = self.rg1(a);
        Ok(self.push(v, Op::SliceCols(a, start), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start > end || end > t.rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                detail: format!("[{start},{end}) of {:?}", t.shape()),
            });
        }
        let v = t.slice_rows(start, end);
        let rg = self.rg1(a);
        Ok(self.push(v, Op::SliceRows(a, start), rg))
    }
}

pub(crate) fn backward_node(
    graph: &Graph,
    i: usize,
    g: &Tensor,
    grads: &mut [Option<Tensor>],
) -> Result<()> {
    let node = &graph.nodes[i];
    let val = |v: Var| &graph.nodes[v.0].value;
    let rg = |v: Var| graph.nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            if rg(a) {
                accumulate(graph, grads, a, gemm(g, false, val(b), true));
            }
            if rg(b) {
                accumulate(graph, grads, b, gemm(val(a), true, g, false));
            }
        }
        &Op::MatMulNt(a, b) => {
            if rg(a) {
                accumulate(graph, grads, a, gemm(g, false, val(b), false));
            }
            if rg(b) {
                accumulate(graph, grads, b, gemm(g, true, val(a), false));
            }
        }
        &Op::Add(a, b) => {
            accumulate(graph, grads, a, g.clone());
            accumulate(graph, grads, b, g.clone());
        }
        &Op::Sub(a, b) => {
            accumulate(graph, grads, a, g.clone());
            accumulate(graph, grads, b, g.map(|x| -x));
        }
        &Op::Mul(a, b) => {
            if rg(a) {
                accumulate(graph, grads, a, g.zip_map(val(b), |x, y| x * y));
            }
            if rg(b) {
                accumulate(graph, grads, b, g.zip_map(val(a), |x, y| x * y));
            }
        }
        &Op::AddRow(a, row) => {
            accumulate(graph, grads, a, g.clone());
            if rg(row) {
                let c = g.cols();
                let mut acc = vec![0.0; c];
                for r in g.data().chunks(c) {
                    for (s, x) in acc.iter_mut().zip(r) {
                        *s += x;
                    }
                }
                let t = Tensor::new(val(row).shape().to_vec(), acc)?;
                accumulate(graph, grads, row, t);
            }
        }
        &Op::MulRow(a, d) => {
            let c = g.cols();
            if rg(a) {
                let mut ga = g.clone();
                for r in ga.data_mut().chunks_mut(c) {
                    for (x, s) in r.iter_mut().zip(val(d).data()) {
                        *x *= s;
                    }
                }
                accumulate(graph, grads, a, ga);
            }
            if rg(d) {
                let mut acc = vec![0.0; c];
                for (gr, ar) in g.data().chunks(c).zip(val(a).data().chunks(c)) {
                    for j in 0..c {
                        acc[j] += gr[j] * ar[j];
                    }
                }
                accumulate(graph, grads, d, Tensor::new(val(d).shape().to_vec(), acc)?);
            }
        }
        &Op::MulCol(a, d) => {
            let c = g.cols();
            if rg(a) {
                let mut ga = g.clone();
                for (r, s) in ga.data_mut().chunks_mut(c).zip(val(d).data()) {
                    for x in r.iter_mut() {
                        *x *= s;
                    }
                }
                accumulate(graph, grads, a, ga);
            }
            if rg(d) {
                let acc: Vec<f64> = g
                    .data()
                    .chunks(c)
                    .zip(val(a).data().chunks(c))
                    .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                    .collect();
                accumulate(graph, grads, d, Tensor::new(val(d).shape().to_vec(), acc)?);
            }
        }
        &Op::ScaleBy(a, s) => {
            let k = val(s).item();
            if rg(a) {
                accumulate(graph, grads, a, g.map(|x| x * k));
            }
            if rg(s) {
                let dot: f64 = g.data().iter().zip(val(a).data()).map(|(x, y)| x * y).sum();
                let t = Tensor::new(val(s).shape().to_vec(), vec![dot])?;
                accumulate(graph, grads, s, t);
            }
        }
        &Op::Scale(a, k) => accumulate(graph, grads, a, g.map(|x| x * k)),
        &Op::AddConst(a) => accumulate(graph, grads, a, g.clone()),
        &Op::Sum(a) => {
            let gv = g.item();
            accumulate(graph, grads, a, Tensor::full(val(a).shape(), gv));
        }
        &Op::Mean(a) => {
            let n = val(a).len() as f64;
            accumulate(graph, grads, a, Tensor::full(val(a).shape(), g.item() / n));
        }
        &Op::Mse(a, b) => {
            let n = val(a).len() as f64;
            let k = 2.0 * g.item() / n;
            let diff = val(a).zip_map(val(b), |x, y| k * (x - y));
            if rg(b) {
                accumulate(graph, grads, b, diff.map(|x| -x));
            }
            accumulate(graph, grads, a, diff);
        }
        &Op::Square(a) => accumulate(graph, grads, a, g.zip_map(val(a), |x, y| 2.0 * x * y)),
        &Op::Softmax(a) => {
            let y = &node.value;
            let c = y.cols();
            let mut out = g.clone();
            for (orow, yrow) in out.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                let dot: f64 = orow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                for (o, yv) in orow.iter_mut().zip(yrow) {
                    *o = yv * (*o - dot);
                }
            }
            accumulate(graph, grads, a, out);
        }
        &Op::Sigmoid(a) => {
            // s(x) s(-x) keeps the derivative nonzero where 1 - s(x) rounds to 0.
            accumulate(graph, grads, a, g.zip_map(val(a), |x, y| x * sigmoid(y) * sigmoid(-y)));
        }
        &Op::Gelu(a) => accumulate(graph, grads, a, g.zip_map(val(a), |x, y| x * gelu_grad(y))),
        &Op::Clamp(a, lo, hi) => {
            let ga = g.zip_map(val(a), |x, y| if y > lo && y < hi { x } else { 0.0 });
            accumulate(graph, grads, a, ga);
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let c = g.cols();
            let gam = val(*gamma).data();
            if rg(*x) {
                let mut gx = g.clone();
                for ((grow, hrow), &r) in gx.data_mut().chunks_mut(c).zip(xhat.data().chunks(c)).zip(rstd)
                {
                    let mut sum_d = 0.0;
                    let mut sum_dh = 0.0;
                    for j in 0..c {
                        let d = grow[j] * gam[j];
                        sum_d += d;
                        sum_dh += d * hrow[j];
                    }
                    let n = c as f64;
                    for j in 0..c {
                        let d = grow[j] * gam[j];
                        grow[j] = r / n * (n * d - sum_d - hrow[j] * sum_dh);
                    }
                }
                accumulate(graph, grads, *x, gx);
            }
            if rg(*gamma) || rg(*beta) {
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for (grow, hrow) in g.data().chunks(c).zip(xhat.data().chunks(c)) {
                    for j in 0..c {
                        gg[j] += grow[j] * hrow[j];
                        gb[j] += grow[j];
                    }
                }
                accumulate(graph, grads, *gamma, Tensor::new(val(*gamma).shape().to_vec(), gg)?);
                accumulate(graph, grads, *beta, Tensor::new(val(*beta).shape().to_vec(), gb)?);
            }
        }
        &Op::Transpose(a) => accumulate(graph, grads, a, g.transpose()),
        Op::ConcatCols(parts) => {
            let mut start = 0;
            for &p in parts {
                let w = val(p).cols();
                if rg(p) {
                    accumulate(graph, grads, p, g.slice_cols(start, start + w));
                }
                start += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut start = 0;
            for &p in parts {
                let h = val(p).rows();
                if rg(p) {
                    accumulate(graph, grads, p, g.slice_rows(start, start + h));
                }
                start += h;
            }
        }
        &Op::SliceCols(a, start) => {
            if rg(a) {
                let src = val(a);
                let (r, c, w) = (src.rows(), src.cols(), g.cols());
                let mut full = Tensor::zeros(src.shape());
                let fd = full.data_mut();
                for i in 0..r {
                    fd[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                }
                accumulate(graph, grads, a, full);
            }
        }
        &Op::SliceRows(a, start) => {
            if rg(a) {
                let src = val(a);
                let c = src.cols();
                let mut full = Tensor::zeros(src.shape());
                full.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                accumulate(graph, grads, a, full);
            }
        }
        Op::Custom { input, transform } => {
            let out = transform(g);
            let expected = val(*input).shape();
            if out.shape() != expected {
                return Err(Error::GradTransformShape {
                    expected: expected.to_vec(),
                    got: out.shape().to_vec(),
                });
            }
            accumulate(graph, grads, *input, out);
        }
    }
    Ok(())
}
