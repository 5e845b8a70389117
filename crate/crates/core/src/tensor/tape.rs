use super::{GradBuffer, ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Value {
    Owned(Tensor),
    Param(ParamId),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// `[n, d] + [d]` with the row broadcast over `n`.
    AddRow(Var, Var),
    Mul(Var, Var),
    /// `[n, d] * [n]`, scaling each row.
    MulRows(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>, usize),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Reshape(Var),
    Gather(Var, Vec<usize>),
    ScatterAdd(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
    },
    Bce {
        probs: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
        floor: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Records primitive applications for one forward pass.
///
/// Values that do not depend on any gradient-requiring leaf are stored as
/// constants and record nothing.
pub struct Tape<'p> {
    params: Option<&'p ParamSet>,
    grad_params: bool,
    nodes: Vec<Node>,
}

/// Gradients of non-parameter leaves after a backward pass.
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a gradient-requiring leaf; `None` when the leaf does not
    /// influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::detached()
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params: Some(params),
            grad_params: true,
            nodes: Vec::with_capacity(64),
        }
    }

    /// Forward-only tape: parameters are read but nothing is recorded.
    pub fn inference(params: &'p ParamSet) -> Self {
        Self {
            params: Some(params),
            grad_params: false,
            nodes: Vec::with_capacity(64),
        }
    }

    /// A tape without a parameter set.
    pub fn detached() -> Self {
        Self {
            params: None,
            grad_params: false,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self
                .params
                .expect("parameter node on detached tape")
                .get(*id),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Value, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let live = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if live {
            self.push(Value::Owned(value), op, true)
        } else {
            self.push(Value::Owned(value), Op::Leaf, false)
        }
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Value::Owned(t), Op::Leaf, false)
    }

    /// A non-parameter leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(Value::Owned(t), Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        assert!(self.params.is_some(), "parameter leaf on detached tape");
        let live = self.grad_params;
        self.push(Value::Param(id), Op::Leaf, live)
    }

    /// Same values, no gradient path back to `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = ta
            .matrix_dims()
            .ok_or_else(|| Error::shape("matmul", ta.shape(), tb.shape()))?;
        let (k2, m) = tb
            .matrix_dims()
            .ok_or_else(|| Error::shape("matmul", ta.shape(), tb.shape()))?;
        if ta.shape().len() != 2 || tb.shape().len() != 2 || k != k2 {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; n * m];
        matmul_into(ta.data(), tb.data(), &mut out, n, k, m);
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.record(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Elementwise sum; `b` may also be a row vector broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| x + y)
                .collect();
            let value = Tensor::new(ta.shape().to_vec(), data)?;
            return Ok(self.record(value, Op::Add(a, b), &[a, b]));
        }
        let row_len = match tb.shape() {
            [d] | [1, d] => *d,
            _ => return Err(Error::shape("add", ta.shape(), tb.shape())),
        };
        if ta.shape().len() != 2 || ta.shape()[1] != row_len {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(row_len) {
            for (x, y) in row.iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.record(value, Op::AddRow(a, b), &[a, b]))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.record(value, Op::Mul(a, b), &[a, b]))
    }

    /// Scales row `r` of a `[n, d]` matrix by `coef[r]` (`coef` is `[n]` or `[n, 1]`).
    pub fn mul_rows(&mut self, a: Var, coef: Var) -> Result<Var> {
        let (ta, tc) = (self.value(a), self.value(coef));
        let (n, d) = match ta.shape() {
            [n, d] => (*n, *d),
            _ => return Err(Error::shape("mul_rows", ta.shape(), tc.shape())),
        };
        if tc.len() != n || !matches!(tc.shape(), [_] | [_, 1]) {
            return Err(Error::shape("mul_rows", ta.shape(), tc.shape()));
        }
        let mut data = ta.data().to_vec();
        for (row, c) in data.chunks_mut(d.max(1)).zip(tc.data()) {
            row.iter_mut().for_each(|x| *x *= c);
        }
        let value = Tensor::new(vec![n, d], data)?;
        Ok(self.record(value, Op::MulRows(a, coef), &[a, coef]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * s).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.record(value, Op::Scale(a, s), &[a])
    }

    /// Concatenation of 1-D or 2-D tensors along `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let rank = self.value(*first).shape().len();
        if rank == 0 || rank > 2 || axis >= rank {
            return Err(Error::shape("concat", self.value(*first).shape(), &[axis]));
        }
        let shapes: Vec<Vec<usize>> = parts
            .iter()
            .map(|p| self.value(*p).shape().to_vec())
            .collect();
        for s in &shapes[1..] {
            let compatible =
                s.len() == rank && (0..rank).all(|d| d == axis || s[d] == shapes[0][d]);
            if !compatible {
                return Err(Error::shape("concat", &shapes[0], s));
            }
        }
        let value = if axis == 0 {
            let mut shape = shapes[0].clone();
            shape[0] = shapes.iter().map(|s| s[0]).sum();
            let mut data = Vec::with_capacity(shape.iter().product());
            for p in parts {
                data.extend_from_slice(self.value(*p).data());
            }
            Tensor::new(shape, data)?
        } else {
            let rows = shapes[0][0];
            let widths: Vec<usize> = shapes.iter().map(|s| s[1]).collect();
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (p, w) in parts.iter().zip(&widths) {
                    data.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
                }
            }
            Tensor::new(vec![rows, total], data)?
        };
        Ok(self.record(value, Op::Concat(parts.to_vec(), axis), parts))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.record(value, op, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(a, slope),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        Ok(self.record(value, Op::Reshape(a), &[a]))
    }

    /// Collapses everything after the leading axis: `[n, ...] -> [n, rest]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let lead = shape.first().copied().unwrap_or(1);
        let rest = shape.iter().skip(1).product::<usize>();
        self.reshape(a, &[lead, rest])
    }

    /// Row gather: `table[ids[r], :]` for each `r`. Doubles as embedding lookup.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (rows, d) = match tt.shape() {
            [r, d] => (*r, *d),
            _ => return Err(Error::shape("embedding_lookup", tt.shape(), &[ids.len()])),
        };
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("embedding_lookup", tt.shape(), &[bad]));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tt.data()[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.record(value, Op::Gather(table, ids.to_vec()), &[table]))
    }

    /// `out[targets[r], :] += src[r, :]`, producing `out_rows` rows.
    pub fn scatter_add_rows(
        &mut self,
        src: Var,
        targets: &[usize],
        out_rows: usize,
    ) -> Result<Var> {
        let ts = self.value(src);
        let d = match ts.shape() {
            [n, d] if *n == targets.len() => *d,
            _ => {
                return Err(Error::shape(
                    "scatter_add_rows",
                    ts.shape(),
                    &[targets.len()],
                ))
            }
        };
        if let Some(&bad) = targets.iter().find(|&&t| t >= out_rows) {
            return Err(Error::shape("scatter_add_rows", &[out_rows, d], &[bad]));
        }
        let mut data = vec![0.0; out_rows * d];
        for (r, &t) in targets.iter().enumerate() {
            for (o, s) in data[t * d..(t + 1) * d]
                .iter_mut()
                .zip(&ts.data()[r * d..(r + 1) * d])
            {
                *o += s;
            }
        }
        let value = Tensor::new(vec![out_rows, d], data)?;
        Ok(self.record(value, Op::ScatterAdd(src, targets.to_vec()), &[src]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.record(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        self.record(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Valid-padding, stride-1 cross-correlation.
    ///
    /// `input` is `[H, W]` or a batch `[N, H, W]`; `kernel` is `[h, w, c]`;
    /// `bias` is `[c]`. The output is `[H-h+1, W-w+1, c]` (batch-prefixed
    /// when the input is batched).
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (ti, tk, tb) = (self.value(input), self.value(kernel), self.value(bias));
        let (batch, h_in, w_in, batched) = match ti.shape() {
            [h, w] => (1, *h, *w, false),
            [n, h, w] => (*n, *h, *w, true),
            _ => return Err(Error::shape("conv2d", ti.shape(), tk.shape())),
        };
        let (kh, kw, c) = match tk.shape() {
            [kh, kw, c] => (*kh, *kw, *c),
            _ => return Err(Error::shape("conv2d", ti.shape(), tk.shape())),
        };
        if kh == 0 || kw == 0 || kh > h_in || kw > w_in {
            return Err(Error::shape("conv2d", ti.shape(), tk.shape()));
        }
        if tb.shape() != [c] {
            return Err(Error::shape("conv2d bias", tk.shape(), tb.shape()));
        }
        let (ho, wo) = (h_in - kh + 1, w_in - kw + 1);
        let mut out = vec![0.0; batch * ho * wo * c];
        let (x, k, b) = (ti.data(), tk.data(), tb.data());
        for n in 0..batch {
            let xin = &x[n * h_in * w_in..(n + 1) * h_in * w_in];
            let o = &mut out[n * ho * wo * c..(n + 1) * ho * wo * c];
            for y in 0..ho {
                for xo in 0..wo {
                    let cell = &mut o[(y * wo + xo) * c..(y * wo + xo + 1) * c];
                    cell.copy_from_slice(b);
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let v = xin[(y + dy) * w_in + xo + dx];
                            let kr = &k[(dy * kw + dx) * c..(dy * kw + dx + 1) * c];
                            for (acc, kv) in cell.iter_mut().zip(kr) {
                                *acc += v * kv;
                            }
                        }
                    }
                }
            }
        }
        let shape = if batched {
            vec![batch, ho, wo, c]
        } else {
            vec![ho, wo, c]
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.record(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
            },
            &[input, kernel, bias],
        ))
    }

    /// Weighted binary cross-entropy summed over the batch:
    /// `-sum_j w_j [y_j ln p_j + (1 - y_j) ln(1 - p_j)]` with `p_j` clamped to
    /// `[floor, 1 - floor]`. Returns the loss and the number of clamped entries;
    /// clamped entries contribute no gradient.
    pub fn binary_cross_entropy(
        &mut self,
        probs: Var,
        targets: &[f64],
        weights: &[f64],
        floor: f64,
    ) -> Result<(Var, usize)> {
        let tp = self.value(probs);
        if tp.len() != targets.len() || tp.len() != weights.len() {
            return Err(Error::shape(
                "binary_cross_entropy",
                tp.shape(),
                &[targets.len(), weights.len()],
            ));
        }
        let mut loss = 0.0;
        let mut clamped = 0;
        for ((&p, &y), &w) in tp.data().iter().zip(targets).zip(weights) {
            let pc = p.clamp(floor, 1.0 - floor);
            if pc != p {
                clamped += 1;
            }
            loss -= w * (y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
        }
        let op = Op::Bce {
            probs,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            floor,
        };
        Ok((self.record(Tensor::scalar(loss), op, &[probs]), clamped))
    }

    /// Reverse pass from a scalar loss. Parameter gradients are returned in a
    /// fresh buffer.
    pub fn backward(self, loss: Var) -> Result<(Gradients, GradBuffer)> {
        let params = self
            .params
            .map(GradBuffer::zeros_like)
            .unwrap_or_else(|| GradBuffer::zeros_like(&ParamSet::new()));
        let mut buf = params;
        let grads = self.backward_into(loss, &mut buf)?;
        Ok((grads, buf))
    }

    /// Reverse pass accumulating parameter gradients into `param_grads`.
    pub fn backward_into(self, loss: Var, param_grads: &mut GradBuffer) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { nodes: grads });
        }
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    match node.value {
                        Value::Param(id) => {
                            for (acc, v) in param_grads.get_mut(id).iter_mut().zip(&g) {
                                *acc += v;
                            }
                        }
                        Value::Owned(_) => {}
                    }
                    // keep leaf gradients for inspection
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (n, k) = (ta.shape()[0], ta.shape()[1]);
                    let m = tb.shape()[1];
                    if self.requires_grad(*a) {
                        // dA = G · Bᵀ
                        let mut ga = vec![0.0; n * k];
                        for i in 0..n {
                            for j in 0..m {
                                let gij = g[i * m + j];
                                if gij == 0.0 {
                                    continue;
                                }
                                for p in 0..k {
                                    ga[i * k + p] += gij * tb.data()[p * m + j];
                                }
                            }
                        }
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.requires_grad(*b) {
                        // dB = Aᵀ · G
                        let mut gb = vec![0.0; k * m];
                        for i in 0..n {
                            for p in 0..k {
                                let aip = ta.data()[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                for j in 0..m {
                                    gb[p * m + j] += aip * g[i * m + j];
                                }
                            }
                        }
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.requires_grad(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.requires_grad(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::AddRow(a, b) => {
                    if self.requires_grad(*b) {
                        let d = self.value(*b).len();
                        let mut gb = vec![0.0; d];
                        for row in g.chunks(d) {
                            for (acc, v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        accumulate(&mut grads, *b, gb);
                    }
                    if self.requires_grad(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.requires_grad(*a) {
                        let gb = self.value(*b).data();
                        accumulate(
                            &mut grads,
                            *a,
                            g.iter().zip(gb).map(|(x, y)| x * y).collect(),
                        );
                    }
                    if self.requires_grad(*b) {
                        let ga = self.value(*a).data();
                        accumulate(
                            &mut grads,
                            *b,
                            g.iter().zip(ga).map(|(x, y)| x * y).collect(),
                        );
                    }
                }
                Op::MulRows(a, c) => {
                    let (ta, tc) = (self.value(*a), self.value(*c));
                    let d = ta.shape()[1].max(1);
                    if self.requires_grad(*c) {
                        let gc = g
                            .chunks(d)
                            .zip(ta.data().chunks(d))
                            .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                            .collect();
                        accumulate(&mut grads, *c, gc);
                    }
                    if self.requires_grad(*a) {
                        let mut ga = g;
                        for (row, cv) in ga.chunks_mut(d).zip(tc.data()) {
                            row.iter_mut().for_each(|x| *x *= cv);
                        }
                        accumulate(&mut grads, *a, ga);
                    }
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads, *a, g.iter().map(|x| x * s).collect());
                }
                Op::Concat(parts, axis) => {
                    if *axis == 0 {
                        let mut offset = 0;
                        for p in parts {
                            let n = self.value(*p).len();
                            if self.requires_grad(*p) {
                                accumulate(&mut grads, *p, g[offset..offset + n].to_vec());
                            }
                            offset += n;
                        }
                    } else {
                        let widths: Vec<usize> =
                            parts.iter().map(|p| self.value(*p).shape()[1]).collect();
                        let total: usize = widths.iter().sum();
                        let rows = if total == 0 { 0 } else { g.len() / total };
                        let mut col = 0;
                        for (p, &w) in parts.iter().zip(&widths) {
                            if self.requires_grad(*p) {
                                let mut gp = Vec::with_capacity(rows * w);
                                for r in 0..rows {
                                    gp.extend_from_slice(&g[r * total + col..r * total + col + w]);
                                }
                                accumulate(&mut grads, *p, gp);
                            }
                            col += w;
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let y = self.value(Var(idx)).data();
                    accumulate(
                        &mut grads,
                        *a,
                        g.iter().zip(y).map(|(gv, y)| gv * y * (1.0 - y)).collect(),
                    );
                }
                Op::Tanh(a) => {
                    let y = self.value(Var(idx)).data();
                    accumulate(
                        &mut grads,
                        *a,
                        g.iter().zip(y).map(|(gv, y)| gv * (1.0 - y * y)).collect(),
                    );
                }
                Op::LeakyRelu(a, slope) => {
                    let x = self.value(*a).data();
                    accumulate(
                        &mut grads,
                        *a,
                        g.iter()
                            .zip(x)
                            .map(|(gv, x)| if *x > 0.0 { *gv } else { gv * slope })
                            .collect(),
                    );
                }
                Op::Reshape(a) => accumulate(&mut grads, *a, g),
                Op::Gather(table, ids) => {
                    let d = self.value(*table).shape()[1];
                    // Parameter tables receive row updates directly.
                    if let (Value::Param(pid), Op::Leaf) =
                        (&self.nodes[table.0].value, &self.nodes[table.0].op)
                    {
                        let buf = param_grads.get_mut(*pid);
                        for (r, &i) in ids.iter().enumerate() {
                            for (acc, v) in buf[i * d..(i + 1) * d]
                                .iter_mut()
                                .zip(&g[r * d..(r + 1) * d])
                            {
                                *acc += v;
                            }
                        }
                    } else {
                        let mut gt = vec![0.0; self.value(*table).len()];
                        for (r, &i) in ids.iter().enumerate() {
                            for (acc, v) in gt[i * d..(i + 1) * d]
                                .iter_mut()
                                .zip(&g[r * d..(r + 1) * d])
                            {
                                *acc += v;
                            }
                        }
                        accumulate(&mut grads, *table, gt);
                    }
                }
                Op::ScatterAdd(src, targets) => {
                    let d = self.value(*src).shape()[1];
                    let mut gs = Vec::with_capacity(targets.len() * d);
                    for &t in targets {
                        gs.extend_from_slice(&g[t * d..(t + 1) * d]);
                    }
                    accumulate(&mut grads, *src, gs);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    accumulate(&mut grads, *a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len();
                    accumulate(&mut grads, *a, vec![g[0] / n.max(1) as f64; n]);
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                } => {
                    let (ti, tk) = (self.value(*input), self.value(*kernel));
                    let (batch, h_in, w_in) = match ti.shape() {
                        [h, w] => (1, *h, *w),
                        [n, h, w] => (*n, *h, *w),
                        _ => unreachable!("validated in forward"),
                    };
                    let (kh, kw, c) = (tk.shape()[0], tk.shape()[1], tk.shape()[2]);
                    let (ho, wo) = (h_in - kh + 1, w_in - kw + 1);
                    let need_in = self.requires_grad(*input);
                    let need_k = self.requires_grad(*kernel);
                    let mut gi = if need_in {
                        vec![0.0; ti.len()]
                    } else {
                        Vec::new()
                    };
                    let mut gk = if need_k {
                        vec![0.0; tk.len()]
                    } else {
                        Vec::new()
                    };
                    let (x, k) = (ti.data(), tk.data());
                    for n in 0..batch {
                        let base_in = n * h_in * w_in;
                        let base_out = n * ho * wo * c;
                        for y in 0..ho {
                            for xo in 0..wo {
                                let gcell = &g[base_out + (y * wo + xo) * c
                                    ..base_out + (y * wo + xo + 1) * c];
                                for dy in 0..kh {
                                    for dx in 0..kw {
                                        let pos = base_in + (y + dy) * w_in + xo + dx;
                                        let koff = (dy * kw + dx) * c;
                                        if need_in {
                                            let mut acc = 0.0;
                                            for ch in 0..c {
                                                acc += gcell[ch] * k[koff + ch];
                                            }
                                            gi[pos] += acc;
                                        }
                                        if need_k {
                                            let v = x[pos];
                                            for ch in 0..c {
                                                gk[koff + ch] += gcell[ch] * v;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if self.requires_grad(*bias) {
                        let mut gb = vec![0.0; c];
                        for cell in g.chunks(c) {
                            for (acc, v) in gb.iter_mut().zip(cell) {
                                *acc += v;
                            }
                        }
                        accumulate(&mut grads, *bias, gb);
                    }
                    if need_in {
                        accumulate(&mut grads, *input, gi);
                    }
                    if need_k {
                        accumulate(&mut grads, *kernel, gk);
                    }
                }
                Op::Bce {
                    probs,
                    targets,
                    weights,
                    floor,
                } => {
                    let p = self.value(*probs).data();
                    let gp = p
                        .iter()
                        .zip(targets)
                        .zip(weights)
                        .map(|((&p, &y), &w)| {
                            if p < *floor || p > 1.0 - floor {
                                0.0
                            } else {
                                -g[0] * w * (y / p - (1.0 - y) / (1.0 - p))
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *probs, gp);
                }
            }
        }
        Ok(Gradients { nodes: grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += aip * bv;
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
