use std::collections::BTreeMap;

use crate::tensor::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc};
use crate::{AdError, ParamSet, Real, Result, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op<T> {
    Leaf,
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<T>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: T,
    },
    AddScalar {
        x: NodeId,
    },
    Tanh {
        x: NodeId,
    },
    Gelu {
        x: NodeId,
    },
    Softmax {
        x: NodeId,
    },
    LogSoftmax {
        x: NodeId,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    ConcatRows {
        xs: Vec<NodeId>,
    },
    ConcatCols {
        xs: Vec<NodeId>,
    },
    SliceRows {
        x: NodeId,
        start: usize,
    },
    Reshape {
        x: NodeId,
    },
    Film {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    Sum {
        x: NodeId,
    },
    Mean {
        x: NodeId,
    },
    MeanRows {
        x: NodeId,
    },
    MaxRows {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Transpose {
        x: NodeId,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    name: Option<String>,
}

/// Reverse-mode tape. Construction and evaluation are single-threaded per
/// instance; distinct graphs may live on distinct threads.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Non-differentiable input leaf.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf not tied to a parameter set (tests, probes).
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Stage a named parameter. Frozen parameters join the graph without a
    /// gradient path, so no buffer ever exists for them.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<NodeId> {
        let tensor = params
            .get(name)
            .ok_or_else(|| AdError::MissingParam(name.to_string()))?;
        let requires_grad = !params.is_frozen(name);
        let id = self.push(tensor.cast(), Op::Leaf, requires_grad);
        self.nodes[id.0].name = Some(name.to_string());
        Ok(id)
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, i) = self.value(x).dims2();
        let (wi, o) = self.value(w).dims2();
        if i != wi {
            return Err(AdError::ShapeMismatch {
                op: "affine",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(w).shape().to_vec(),
            });
        }
        if self.value(b).len() != o {
            return Err(AdError::ShapeMismatch {
                op: "affine",
                lhs: self.value(w).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![T::ZERO; n * o];
        for r in 0..n {
            out[r * o..(r + 1) * o].copy_from_slice(self.value(b).data());
        }
        matmul_acc(&mut out, self.value(x).data(), self.value(w).data(), n, i, o);
        let shape = if self.value(x).shape().len() == 1 {
            vec![o]
        } else {
            vec![n, o]
        };
        let requires_grad = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Affine { x, w, b },
            requires_grad,
        ))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (n, d) = self.value(x).dims2();
        if d == 0 {
            return Err(AdError::Config("layer_norm over empty rows".into()));
        }
        for (other, side) in [(gain, "gain"), (bias, "bias")] {
            if self.value(other).len() != d {
                return Err(AdError::ShapeMismatch {
                    op: if side == "gain" {
                        "layer_norm gain"
                    } else {
                        "layer_norm bias"
                    },
                    lhs: self.value(x).shape().to_vec(),
                    rhs: self.value(other).shape().to_vec(),
                });
            }
        }
        let eps = T::from_f64(eps);
        let xv = self.value(x).data();
        let g = self.value(gain).data().to_vec();
        let bv = self.value(bias).data().to_vec();
        let mut out = vec![T::ZERO; n * d];
        let mut xhat = vec![T::ZERO; n * d];
        let mut rstd = vec![T::ZERO; n];
        let inv_d = T::ONE / T::from_f64(d as f64);
        for r in 0..n {
            let row = &xv[r * d..(r + 1) * d];
            let mut mean = T::ZERO;
            for &v in row {
                mean += v;
            }
            mean = mean * inv_d;
            let mut var = T::ZERO;
            for &v in row {
                let c = v - mean;
                var = c.mul_add(c, var);
            }
            var = var * inv_d;
            let rs = T::ONE / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h.mul_add(g[c], bv[c]);
            }
        }
        let shape = self.value(x).shape().to_vec();
        let requires_grad = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            requires_grad,
        ))
    }

    /// Multi-head scaled dot-product attention over packed `N×D` tensors.
    /// `causal` masks keys after the query position.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        causal: bool,
    ) -> Result<NodeId> {
        let (n, d) = self.value(q).dims2();
        for other in [k, v] {
            if self.value(other).dims2() != (n, d) {
                return Err(AdError::ShapeMismatch {
                    op: "attention",
                    lhs: self.value(q).shape().to_vec(),
                    rhs: self.value(other).shape().to_vec(),
                });
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(AdError::Config(format!(
                "attention width {d} not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let mut out = vec![T::ZERO; n * d];
        // Probabilities stored per head, head-major: probs[h*n*n + i*n + j].
        let mut probs = vec![T::ZERO; heads * n * n];
        let mut scores = vec![T::ZERO; n];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let limit = if causal { i + 1 } else { n };
                let qrow = &qv[i * d + off..i * d + off + dh];
                let mut max = T::from_f64(f64::NEG_INFINITY);
                for (j, score) in scores.iter_mut().enumerate().take(limit) {
                    let krow = &kv[j * d + off..j * d + off + dh];
                    let mut acc = T::ZERO;
                    for (&a, &b) in qrow.iter().zip(krow) {
                        acc = a.mul_add(b, acc);
                    }
                    let s = acc * scale;
                    *score = s;
                    max = max.maximum(s);
                }
                let mut denom = T::ZERO;
                for score in scores.iter_mut().take(limit) {
                    let e = (*score - max).exp();
                    *score = e;
                    denom += e;
                }
                let inv = T::ONE / denom;
                let prow = &mut probs[h * n * n + i * n..h * n * n + i * n + limit];
                for (p, &e) in prow.iter_mut().zip(scores.iter().take(limit)) {
                    *p = e * inv;
                }
                let orow = &mut out[i * d + off..i * d + off + dh];
                for (j, &p) in prow.iter().enumerate() {
                    let vrow = &vv[j * d + off..j * d + off + dh];
                    for (o, &x) in orow.iter_mut().zip(vrow) {
                        *o = p.mul_add(x, *o);
                    }
                }
            }
        }
        let shape = self.value(q).shape().to_vec();
        let requires_grad = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Attention { q, k, v, heads, probs },
            requires_grad,
        ))
    }

    fn binary_same_shape(&mut self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(AdError::ShapeMismatch {
                op,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let requires_grad = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add { a, b }, requires_grad))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let requires_grad = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul { a, b }, requires_grad))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let c = T::from_f64(c);
        let value = self.value(x).map(|v| v * c);
        let requires_grad = self.rg(x);
        self.push(value, Op::Scale { x, c }, requires_grad)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let c = T::from_f64(c);
        let value = self.value(x).map(|v| v + c);
        let requires_grad = self.rg(x);
        self.push(value, Op::AddScalar { x }, requires_grad)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.tanh());
        let requires_grad = self.rg(x);
        self.push(value, Op::Tanh { x }, requires_grad)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(gelu_forward);
        let requires_grad = self.rg(x);
        self.push(value, Op::Gelu { x }, requires_grad)
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let (n, d) = self.value(x).dims2();
        let xv = self.value(x).data();
        let mut out = vec![T::ZERO; n * d];
        for r in 0..n {
            softmax_row(&xv[r * d..(r + 1) * d], &mut out[r * d..(r + 1) * d]);
        }
        let shape = self.value(x).shape().to_vec();
        let requires_grad = self.rg(x);
        self.push(
            Tensor::new(shape, out).expect("shape preserved"),
            Op::Softmax { x },
            requires_grad,
        )
    }

    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let (n, d) = self.value(x).dims2();
        let xv = self.value(x).data();
        let mut out = vec![T::ZERO; n * d];
        for r in 0..n {
            let row = &xv[r * d..(r + 1) * d];
            let mut max = T::from_f64(f64::NEG_INFINITY);
            for &v in row {
                max = max.maximum(v);
            }
            let mut denom = T::ZERO;
            for &v in row {
                denom += (v - max).exp();
            }
            let lse = max + denom.ln();
            for c in 0..d {
                out[r * d + c] = row[c] - lse;
            }
        }
        let shape = self.value(x).shape().to_vec();
        let requires_grad = self.rg(x);
        self.push(
            Tensor::new(shape, out).expect("shape preserved"),
            Op::LogSoftmax { x },
            requires_grad,
        )
    }

    /// Row gather: `table[V×D]`, `ids[n]` → `n×D`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, d) = self.value(table).dims2();
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(AdError::Contract(format!(
                "embedding id {bad} out of range for table with {v} rows"
            )));
        }
        let tv = self.value(table).data();
        let mut out = vec![T::ZERO; ids.len() * d];
        for (r, &id) in ids.iter().enumerate() {
            out[r * d..(r + 1) * d].copy_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let requires_grad = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            requires_grad,
        ))
    }

    /// Stack along axis 0. Vectors count as single rows.
    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(AdError::Contract("concat_rows of nothing".into()));
        }
        let (_, d) = self.value(xs[0]).dims2();
        let mut total = 0;
        for &x in xs {
            let (n, dx) = self.value(x).dims2();
            if dx != d {
                return Err(AdError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(xs[0]).shape().to_vec(),
                    rhs: self.value(x).shape().to_vec(),
                });
            }
            total += n;
        }
        let mut out = Vec::with_capacity(total * d);
        for &x in xs {
            out.extend_from_slice(self.value(x).data());
        }
        let requires_grad = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(
            Tensor::new(vec![total, d], out)?,
            Op::ConcatRows { xs: xs.to_vec() },
            requires_grad,
        ))
    }

    /// Stack along axis 1. Inputs must share a row count.
    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(AdError::Contract("concat_cols of nothing".into()));
        }
        let (n, _) = self.value(xs[0]).dims2();
        let mut total = 0;
        for &x in xs {
            let (nx, dx) = self.value(x).dims2();
            if nx != n {
                return Err(AdError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(xs[0]).shape().to_vec(),
                    rhs: self.value(x).shape().to_vec(),
                });
            }
            total += dx;
        }
        let mut out = vec![T::ZERO; n * total];
        let mut offset = 0;
        for &x in xs {
            let (_, dx) = self.value(x).dims2();
            let xv = self.value(x).data();
            for r in 0..n {
                out[r * total + offset..r * total + offset + dx]
                    .copy_from_slice(&xv[r * dx..(r + 1) * dx]);
            }
            offset += dx;
        }
        let requires_grad = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(
            Tensor::new(vec![n, total], out)?,
            Op::ConcatCols { xs: xs.to_vec() },
            requires_grad,
        ))
    }

    /// Same data, new shape (row-major layout preserved).
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(AdError::ShapeMismatch {
                op: "reshape",
                lhs: self.value(x).shape().to_vec(),
                rhs: shape,
            });
        }
        let data = self.value(x).data().to_vec();
        let requires_grad = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Reshape { x }, requires_grad))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, rows: usize) -> Result<NodeId> {
        let (n, d) = self.value(x).dims2();
        if start + rows > n {
            return Err(AdError::Contract(format!(
                "slice_rows {start}..{} out of {n} rows",
                start + rows
            )));
        }
        let out = self.value(x).data()[start * d..(start + rows) * d].to_vec();
        let requires_grad = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![rows, d], out)?,
            Op::SliceRows { x, start },
            requires_grad,
        ))
    }

    /// `(1 + gamma) ⊙ x + beta`, gamma/beta broadcast across rows.
    pub fn film(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (n, d) = self.value(x).dims2();
        for other in [gamma, beta] {
            if self.value(other).len() != d {
                return Err(AdError::ShapeMismatch {
                    op: "film",
                    lhs: self.value(x).shape().to_vec(),
                    rhs: self.value(other).shape().to_vec(),
                });
            }
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![T::ZERO; n * d];
        for r in 0..n {
            for c in 0..d {
                out[r * d + c] = (T::ONE + g[c]).mul_add(xv[r * d + c], bv[c]);
            }
        }
        let shape = self.value(x).shape().to_vec();
        let requires_grad = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Film { x, gamma, beta },
            requires_grad,
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let mut acc = T::ZERO;
        for &v in self.value(x).data() {
            acc += v;
        }
        let requires_grad = self.rg(x);
        self.push(Tensor::scalar(acc), Op::Sum { x }, requires_grad)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len().max(1);
        let mut acc = T::ZERO;
        for &v in self.value(x).data() {
            acc += v;
        }
        let requires_grad = self.rg(x);
        self.push(
            Tensor::scalar(acc / T::from_f64(n as f64)),
            Op::Mean { x },
            requires_grad,
        )
    }

    /// Mean over axis 0: `N×D` → `D`.
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let (n, d) = self.value(x).dims2();
        let xv = self.value(x).data();
        let inv = T::ONE / T::from_f64(n.max(1) as f64);
        let mut out = vec![T::ZERO; d];
        for r in 0..n {
            for c in 0..d {
                out[c] += xv[r * d + c];
            }
        }
        for v in &mut out {
            *v = *v * inv;
        }
        let requires_grad = self.rg(x);
        self.push(Tensor::vector(out), Op::MeanRows { x }, requires_grad)
    }

    /// Max over axis 0: `N×D` → `D`. Gradient routes to the first maximal
    /// row per column.
    pub fn max_rows(&mut self, x: NodeId) -> NodeId {
        let (n, d) = self.value(x).dims2();
        let xv = self.value(x).data();
        let mut out = vec![T::from_f64(f64::NEG_INFINITY); d];
        let mut argmax = vec![0usize; d];
        for r in 0..n {
            for c in 0..d {
                if xv[r * d + c] > out[c] {
                    out[c] = xv[r * d + c];
                    argmax[c] = r;
                }
            }
        }
        let requires_grad = self.rg(x);
        self.push(Tensor::vector(out), Op::MaxRows { x, argmax }, requires_grad)
    }

    /// `N×D` → `D×N`.
    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let (n, d) = self.value(x).dims2();
        let xv = self.value(x).data();
        let mut out = vec![T::ZERO; n * d];
        for r in 0..n {
            for c in 0..d {
                out[c * n + r] = xv[r * d + c];
            }
        }
        let requires_grad = self.rg(x);
        self.push(
            Tensor::new(vec![d, n], out).expect("same size"),
            Op::Transpose { x },
            requires_grad,
        )
    }

    /// Reverse sweep from a scalar node. Gradients accumulate only along
    /// paths that require them.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(AdError::Contract(format!(
                "backward from non-scalar output of shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            backprop_node(&self.nodes, &mut self.grads, i, &gout);
            self.grads[i] = Some(gout);
        }
        Ok(())
    }


    /// Gradient of the last `backward` w.r.t. a node, if one was accumulated.
    pub fn grad(&self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get(id.0)?.as_ref().map(|g| {
            Tensor::new(self.nodes[id.0].value.shape().to_vec(), g.clone())
                .expect("grad shaped like value")
        })
    }

    /// Gradients for all named (non-frozen) parameters staged on this graph,
    /// keyed by name, in deterministic order. Staging the same name twice
    /// accumulates.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor<T>> {
        let mut out: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let Some(name) = &node.name else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(Some(g)) = self.grads.get(i) else {
                continue;
            };
            let t = Tensor::new(node.value.shape().to_vec(), g.clone()).expect("shape");
            out.entry(name.clone())
                .and_modify(|acc| {
                    for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                        *a += *b;
                    }
                })
                .or_insert(t);
        }
        out
    }
}

#[inline(always)]
fn rg<T: Real>(nodes: &[Node<T>], id: NodeId) -> bool {
    nodes[id.0].requires_grad
}

#[inline(always)]
fn buf<'a, T: Real>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    id: NodeId,
) -> &'a mut Vec<T> {
    let len = nodes[id.0].value.len();
    grads[id.0].get_or_insert_with(|| vec![T::ZERO; len])
}

/// Scatter one node's output gradient into its parents. Takes the node list
/// and gradient buffers as disjoint borrows so no payload is copied.
fn backprop_node<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], i: usize, gout: &[T]) {
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Affine { x, w, b } => {
            let (x, w, b) = (*x, *w, *b);
            let (n, icols) = nodes[x.0].value.dims2();
            let (_, o) = nodes[w.0].value.dims2();
            if rg(nodes, x) {
                let wv = nodes[w.0].value.data();
                matmul_a_bt_acc(buf(nodes, grads, x), gout, wv, n, o, icols);
            }
            if rg(nodes, w) {
                let xv = nodes[x.0].value.data();
                matmul_at_b_acc(buf(nodes, grads, w), xv, gout, n, icols, o);
            }
            if rg(nodes, b) {
                let gb = buf(nodes, grads, b);
                for r in 0..n {
                    for c in 0..o {
                        gb[c] += gout[r * o + c];
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let (x, gain, bias) = (*x, *gain, *bias);
            let (n, d) = nodes[x.0].value.dims2();
            let g = nodes[gain.0].value.data();
            if rg(nodes, x) {
                let inv_d = T::ONE / T::from_f64(d as f64);
                let gx = buf(nodes, grads, x);
                for r in 0..n {
                    let mut m1 = T::ZERO;
                    let mut m2 = T::ZERO;
                    for c in 0..d {
                        let dy = gout[r * d + c] * g[c];
                        m1 += dy;
                        m2 = dy.mul_add(xhat[r * d + c], m2);
                    }
                    m1 = m1 * inv_d;
                    m2 = m2 * inv_d;
                    for c in 0..d {
                        let dy = gout[r * d + c] * g[c];
                        gx[r * d + c] += rstd[r] * (dy - m1 - xhat[r * d + c] * m2);
                    }
                }
            }
            if rg(nodes, gain) {
                let gg = buf(nodes, grads, gain);
                for r in 0..n {
                    for c in 0..d {
                        gg[c] = gout[r * d + c].mul_add(xhat[r * d + c], gg[c]);
                    }
                }
            }
            if rg(nodes, bias) {
                let gb = buf(nodes, grads, bias);
                for r in 0..n {
                    for c in 0..d {
                        gb[c] += gout[r * d + c];
                    }
                }
            }
        }
        Op::Attention { q, k, v, heads, probs } => {
            let (q, k, v, heads) = (*q, *k, *v, *heads);
            let (n, d) = nodes[q.0].value.dims2();
            let dh = d / heads;
            let scale = T::from_f64(1.0 / (dh as f64).sqrt());
            let qv = nodes[q.0].value.data();
            let kv = nodes[k.0].value.data();
            let vv = nodes[v.0].value.data();
            let mut gq = vec![T::ZERO; n * d];
            let mut gk = vec![T::ZERO; n * d];
            let mut gv = vec![T::ZERO; n * d];
            let mut dp = vec![T::ZERO; n];
            for h in 0..heads {
                let off = h * dh;
                let p_h = &probs[h * n * n..(h + 1) * n * n];
                for i_row in 0..n {
                    let grow = &gout[i_row * d + off..i_row * d + off + dh];
                    let mut dot_pp = T::ZERO;
                    for j in 0..n {
                        let p = p_h[i_row * n + j];
                        let mut acc = T::ZERO;
                        let vrow = &vv[j * d + off..j * d + off + dh];
                        for (&go, &vx) in grow.iter().zip(vrow) {
                            acc = go.mul_add(vx, acc);
                        }
                        dp[j] = acc;
                        dot_pp = p.mul_add(acc, dot_pp);
                        if p != T::ZERO {
                            let gvrow = &mut gv[j * d + off..j * d + off + dh];
                            for (gvx, &go) in gvrow.iter_mut().zip(grow) {
                                *gvx = p.mul_add(go, *gvx);
                            }
                        }
                    }
                    for j in 0..n {
                        let p = p_h[i_row * n + j];
                        if p == T::ZERO {
                            continue;
                        }
                        let ds = p * (dp[j] - dot_pp) * scale;
                        let krow = &kv[j * d + off..j * d + off + dh];
                        let qrow = &qv[i_row * d + off..i_row * d + off + dh];
                        let gqrow = &mut gq[i_row * d + off..i_row * d + off + dh];
                        for (gqx, &kx) in gqrow.iter_mut().zip(krow) {
                            *gqx = ds.mul_add(kx, *gqx);
                        }
                        let gkrow = &mut gk[j * d + off..j * d + off + dh];
                        for (gkx, &qx) in gkrow.iter_mut().zip(qrow) {
                            *gkx = ds.mul_add(qx, *gkx);
                        }
                    }
                }
            }
            if rg(nodes, q) {
                accumulate(buf(nodes, grads, q), &gq);
            }
            if rg(nodes, k) {
                accumulate(buf(nodes, grads, k), &gk);
            }
            if rg(nodes, v) {
                accumulate(buf(nodes, grads, v), &gv);
            }
        }
        Op::Add { a, b } => {
            let (a, b) = (*a, *b);
            if rg(nodes, a) {
                accumulate(buf(nodes, grads, a), gout);
            }
            if rg(nodes, b) {
                accumulate(buf(nodes, grads, b), gout);
            }
        }
        Op::Mul { a, b } => {
            let (a, b) = (*a, *b);
            if rg(nodes, a) {
                let bv = nodes[b.0].value.data();
                let ga = buf(nodes, grads, a);
                for ((g, &go), &x) in ga.iter_mut().zip(gout).zip(bv) {
                    *g = go.mul_add(x, *g);
                }
            }
            if rg(nodes, b) {
                let av = nodes[a.0].value.data();
                let gb = buf(nodes, grads, b);
                for ((g, &go), &x) in gb.iter_mut().zip(gout).zip(av) {
                    *g = go.mul_add(x, *g);
                }
            }
        }
        Op::Scale { x, c } => {
            let (x, c) = (*x, *c);
            if rg(nodes, x) {
                let gx = buf(nodes, grads, x);
                for (g, &go) in gx.iter_mut().zip(gout) {
                    *g = go.mul_add(c, *g);
                }
            }
        }
        Op::AddScalar { x } => {
            let x = *x;
            if rg(nodes, x) {
                accumulate(buf(nodes, grads, x), gout);
            }
        }
        Op::Tanh { x } => {
            let x = *x;
            if rg(nodes, x) {
                let yv = nodes[i].value.data();
                let gx = buf(nodes, grads, x);
                for ((g, &go), &y) in gx.iter_mut().zip(gout).zip(yv) {
                    *g += go * (T::ONE - y * y);
                }
            }
        }
        Op::Gelu { x } => {
            let x = *x;
            if rg(nodes, x) {
                let xv = nodes[x.0].value.data();
                let gx = buf(nodes, grads, x);
                for ((g, &go), &v) in gx.iter_mut().zip(gout).zip(xv) {
                    *g = go.mul_add(gelu_derivative(v), *g);
                }
            }
        }
        Op::Softmax { x } => {
            let x = *x;
            if rg(nodes, x) {
                let (n, d) = nodes[i].value.dims2();
                let yv = nodes[i].value.data();
                let gx = buf(nodes, grads, x);
                for r in 0..n {
                    let mut dot = T::ZERO;
                    for c in 0..d {
                        dot = gout[r * d + c].mul_add(yv[r * d + c], dot);
                    }
                    for c in 0..d {
                        gx[r * d + c] += yv[r * d + c] * (gout[r * d + c] - dot);
                    }
                }
            }
        }
        Op::LogSoftmax { x } => {
            let x = *x;
            if rg(nodes, x) {
                let (n, d) = nodes[i].value.dims2();
                let yv = nodes[i].value.data();
                let gx = buf(nodes, grads, x);
                for r in 0..n {
                    let mut rowsum = T::ZERO;
                    for c in 0..d {
                        rowsum += gout[r * d + c];
                    }
                    for c in 0..d {
                        gx[r * d + c] += gout[r * d + c] - yv[r * d + c].exp() * rowsum;
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            let table = *table;
            if rg(nodes, table) {
                let (_, d) = nodes[table.0].value.dims2();
                let gt = buf(nodes, grads, table);
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        gt[id * d + c] += gout[r * d + c];
                    }
                }
            }
        }
        Op::ConcatRows { xs } => {
            let mut offset = 0;
            for &x in xs {
                let len = nodes[x.0].value.len();
                if rg(nodes, x) {
                    accumulate(buf(nodes, grads, x), &gout[offset..offset + len]);
                }
                offset += len;
            }
        }
        Op::ConcatCols { xs } => {
            let total: usize = xs.iter().map(|&x| nodes[x.0].value.dims2().1).sum();
            let n = nodes[xs[0].0].value.dims2().0;
            let mut offset = 0;
            for &x in xs {
                let (_, dx) = nodes[x.0].value.dims2();
                if rg(nodes, x) {
                    let gx = buf(nodes, grads, x);
                    for r in 0..n {
                        for c in 0..dx {
                            gx[r * dx + c] += gout[r * total + offset + c];
                        }
                    }
                }
                offset += dx;
            }
        }
        Op::Reshape { x } => {
            let x = *x;
            if rg(nodes, x) {
                accumulate(buf(nodes, grads, x), gout);
            }
        }
        Op::SliceRows { x, start } => {
            let (x, start) = (*x, *start);
            if rg(nodes, x) {
                let (_, d) = nodes[x.0].value.dims2();
                let gx = buf(nodes, grads, x);
                accumulate(&mut gx[start * d..start * d + gout.len()], gout);
            }
        }
        Op::Film { x, gamma, beta } => {
            let (x, gamma, beta) = (*x, *gamma, *beta);
            let (n, d) = nodes[x.0].value.dims2();
            if rg(nodes, x) {
                let g = nodes[gamma.0].value.data();
                let gx = buf(nodes, grads, x);
                for r in 0..n {
                    for c in 0..d {
                        gx[r * d + c] = (T::ONE + g[c]).mul_add(gout[r * d + c], gx[r * d + c]);
                    }
                }
            }
            if rg(nodes, gamma) {
                let xv = nodes[x.0].value.data();
                let gg = buf(nodes, grads, gamma);
                for r in 0..n {
                    for c in 0..d {
                        gg[c] = gout[r * d + c].mul_add(xv[r * d + c], gg[c]);
                    }
                }
            }
            if rg(nodes, beta) {
                let gb = buf(nodes, grads, beta);
                for r in 0..n {
                    for c in 0..d {
                        gb[c] += gout[r * d + c];
                    }
                }
            }
        }
        Op::Sum { x } => {
            let x = *x;
            if rg(nodes, x) {
                let go = gout[0];
                let gx = buf(nodes, grads, x);
                for g in gx.iter_mut() {
                    *g += go;
                }
            }
        }
        Op::Mean { x } => {
            let x = *x;
            if rg(nodes, x) {
                let n = nodes[x.0].value.len().max(1);
                let go = gout[0] / T::from_f64(n as f64);
                let gx = buf(nodes, grads, x);
                for g in gx.iter_mut() {
                    *g += go;
                }
            }
        }
        Op::MeanRows { x } => {
            let x = *x;
            if rg(nodes, x) {
                let (n, d) = nodes[x.0].value.dims2();
                let inv = T::ONE / T::from_f64(n.max(1) as f64);
                let gx = buf(nodes, grads, x);
                for r in 0..n {
                    for c in 0..d {
                        gx[r * d + c] = gout[c].mul_add(inv, gx[r * d + c]);
                    }
                }
            }
        }
        Op::MaxRows { x, argmax } => {
            let x = *x;
            if rg(nodes, x) {
                let (_, d) = nodes[x.0].value.dims2();
                let gx = buf(nodes, grads, x);
                for (c, &r) in argmax.iter().enumerate() {
                    gx[r * d + c] += gout[c];
                }
            }
        }
        Op::Transpose { x } => {
            let x = *x;
            if rg(nodes, x) {
                let (n, d) = nodes[x.0].value.dims2();
                let gx = buf(nodes, grads, x);
                for r in 0..n {
                    for c in 0..d {
                        gx[r * d + c] += gout[c * n + r];
                    }
                }
            }
        }
    }
}

fn accumulate<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn softmax_row<T: Real>(row: &[T], out: &mut [T]) {
    let mut max = T::from_f64(f64::NEG_INFINITY);
    for &v in row {
        max = max.maximum(v);
    }
    let mut denom = T::ZERO;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        denom += e;
    }
    let inv = T::ONE / denom;
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_forward<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let inner = c * (x + a * x * x * x);
    T::from_f64(0.5) * x * (T::ONE + inner.tanh())
}

fn gelu_derivative<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = T::ONE - t * t;
    let dinner = c * (T::ONE + T::from_f64(3.0) * a * x * x);
    half * (T::ONE + t) + half * x * sech2 * dinner
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t32(rows: &[&[f32]]) -> Tensor<f32> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn affine_identity_and_zero_weight() {
        let mut g = Graph::<f32>::new();
        let x = g.input(t32(&[&[1.0, 2.0]]));
        let w = g.input(t32(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = g.input(Tensor::vector(vec![0.0, 0.0]));
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        let w0 = g.input(t32(&[&[0.0, 0.0], &[0.0, 0.0]]));
        let b34 = g.input(Tensor::vector(vec![3.0, 4.0]));
        let y2 = g.affine(x, w0, b34).unwrap();
        assert_eq!(g.value(y2).data(), &[3.0, 4.0]);
    }

    #[test]
    fn affine_shape_error_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let x = g.input(t32(&[&[1.0, 2.0]]));
        let w = g.input(t32(&[&[1.0], &[2.0], &[3.0]]));
        let b = g.input(Tensor::vector(vec![0.0]));
        let err = g.affine(x, w, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2]") && msg.contains("[3, 1]"), "{msg}");
    }

    #[test]
    fn affine_grad_matches_hand_value() {
        // d sum(xW + b) / dW for x = [[1, 2]] is [[1, 1], [2, 2]].
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_rows(&[vec![1.0, 2.0]]));
        let w = g.leaf(Tensor::from_rows(&[vec![0.3, -0.2], vec![0.5, 0.7]]));
        let b = g.leaf(Tensor::vector(vec![0.1, 0.2]));
        let y = g.affine(x, w, b).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::<f64>::new();
        let ones = g.input(Tensor::vector(vec![1.0, 1.0, 1.0]));
        let zeros = g.input(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let x = g.input(Tensor::from_rows(&[vec![5.0, 5.0, 5.0]]));
        let y = g.layer_norm(x, ones, zeros, 1e-12).unwrap();
        for &v in g.value(y).data() {
            assert!(v.abs() < 1e-6);
        }

        let ones2 = g.input(Tensor::vector(vec![1.0, 1.0]));
        let zeros2 = g.input(Tensor::vector(vec![0.0, 0.0]));
        let x2 = g.input(Tensor::from_rows(&[vec![1.0, -1.0]]));
        let y2 = g.layer_norm(x2, ones2, zeros2, 1e-15).unwrap();
        assert!((g.value(y2).data()[0] - 1.0).abs() < 1e-6);
        assert!((g.value(y2).data()[1] + 1.0).abs() < 1e-6);

        // (x − μ)/σ then gain·+bias: x = [0, 2], μ = 1, σ = 1 → [−2, 4].
        let g3 = g.input(Tensor::vector(vec![3.0, 3.0]));
        let b3 = g.input(Tensor::vector(vec![1.0, 1.0]));
        let x3 = g.input(Tensor::from_rows(&[vec![0.0, 2.0]]));
        let y3 = g.layer_norm(x3, g3, b3, 1e-15).unwrap();
        assert!((g.value(y3).data()[0] + 2.0).abs() < 1e-6);
        assert!((g.value(y3).data()[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn attention_single_key_returns_value_row() {
        let mut g = Graph::<f32>::new();
        let q = g.input(t32(&[&[0.3, -0.4]]));
        let k = g.input(t32(&[&[1.0, 2.0]]));
        let v = g.input(t32(&[&[5.0, -7.0]]));
        let y = g.attention(q, k, v, 1, false).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, -7.0]);
    }

    #[test]
    fn attention_uniform_over_identical_keys() {
        let mut g = Graph::<f32>::new();
        // q orthogonal to all (identical) keys → uniform average of v.
        let q = g.input(t32(&[&[0.0, 1.0], &[0.0, 1.0]]));
        let k = g.input(t32(&[&[1.0, 0.0], &[1.0, 0.0]]));
        let v = g.input(t32(&[&[2.0, 4.0], &[6.0, 8.0]]));
        let y = g.attention(q, k, v, 1, false).unwrap();
        assert_eq!(g.value(y).row(0), &[4.0, 6.0]);
        assert_eq!(g.value(y).row(1), &[4.0, 6.0]);
    }

    #[test]
    fn attention_matches_dense_oracle() {
        // Independent dense computation of a 2×2 single-head case.
        let qd = [[0.5f64, -1.0], [0.25, 0.75]];
        let kd = [[1.0f64, 0.5], [-0.5, 1.5]];
        let vd = [[2.0f64, -1.0], [0.5, 3.0]];
        let dh = 2.0f64;
        let mut expect = [[0.0f64; 2]; 2];
        for i in 0..2 {
            let s0 = (qd[i][0] * kd[0][0] + qd[i][1] * kd[0][1]) / dh.sqrt();
            let s1 = (qd[i][0] * kd[1][0] + qd[i][1] * kd[1][1]) / dh.sqrt();
            let m = s0.max(s1);
            let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
            let z = e0 + e1;
            for c in 0..2 {
                expect[i][c] = (e0 / z) * vd[0][c] + (e1 / z) * vd[1][c];
            }
        }
        let mut g = Graph::<f64>::new();
        let q = g.input(Tensor::from_rows(&[qd[0].to_vec(), qd[1].to_vec()]));
        let k = g.input(Tensor::from_rows(&[kd[0].to_vec(), kd[1].to_vec()]));
        let v = g.input(Tensor::from_rows(&[vd[0].to_vec(), vd[1].to_vec()]));
        let y = g.attention(q, k, v, 1, false).unwrap();
        for i in 0..2 {
            for c in 0..2 {
                assert!((g.value(y).row(i)[c] - expect[i][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_head_mismatch_is_config_error() {
        let mut g = Graph::<f32>::new();
        let q = g.input(t32(&[&[1.0, 2.0, 3.0]]));
        let err = g.attention(q, q, q, 2, false).unwrap_err();
        assert!(matches!(err, AdError::Config(_)));
    }

    #[test]
    fn film_identity_at_zero_init() {
        let mut g = Graph::<f32>::new();
        let x = g.input(t32(&[&[3.0, -2.0]]));
        let zero = g.input(Tensor::vector(vec![0.0, 0.0]));
        let y = g.film(x, zero, zero).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, -2.0]);
    }

    #[test]
    fn frozen_param_gets_no_grad_buffer() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![1.0f32, 2.0])).unwrap();
        p.insert("frozen/w", Tensor::vector(vec![3.0f32, 4.0]))
            .unwrap();
        p.freeze_matching(&["frozen/"]);
        let mut g = Graph::<f32>::new();
        let a = g.param(&p, "w").unwrap();
        let b = g.param(&p, "frozen/w").unwrap();
        let y = g.mul(a, b).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(a).is_some());
        assert!(g.grad(b).is_none());
        let grads = g.param_grads();
        assert!(grads.contains_key("w"));
        assert!(!grads.contains_key("frozen/w"));
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let run = || {
            let mut g = Graph::<f32>::new();
            let x = g.input(t32(&[&[0.1, -0.7, 0.3], &[1.5, 0.2, -0.9]]));
            let w = g.input(t32(&[&[0.5, 0.1], &[-0.2, 0.8], &[0.7, -0.3]]));
            let b = g.input(Tensor::vector(vec![0.01, -0.02]));
            let y = g.affine(x, w, b).unwrap();
            let h = g.gelu(y);
            let sm = g.softmax(h);
            g.value(sm).data().to_vec()
        };
        let a: Vec<u32> = run().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = run().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }
}
