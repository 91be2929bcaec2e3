use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

use super::attention;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise nonlinearity used inside experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    #[default]
    Gelu,
    Silu,
}

/// Deliberate corruption of one backward rule, used as a negative control
/// for gradient checking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Drops the normalization term from the masked-softmax backward, which
    /// corrupts every gradient flowing through the gating weights.
    MaskedSoftmaxBackward,
    /// Scales the left-operand gradient of every matmul by 1.01.
    MatMulBackward,
}

#[derive(Debug)]
enum Op<R> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        bt: bool,
    },
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        a: Var,
        row: Var,
    },
    Scale {
        a: Var,
        c: R,
    },
    Act {
        a: Var,
        kind: Activation,
    },
    Sum(Var),
    MeanRows(Var),
    SoftmaxRows(Var),
    MaskedSoftmaxRows {
        a: Var,
        masks: Vec<Vec<usize>>,
    },
    TargetLogProbs {
        a: Var,
        targets: Vec<usize>,
        probs: Vec<R>,
    },
    GatherRows {
        a: Var,
        idx: Vec<usize>,
    },
    GatherElements {
        a: Var,
        idx: Vec<(usize, usize)>,
    },
    ScaleRows {
        a: Var,
        s: Var,
    },
    CombineRows {
        parts: Vec<(Var, Vec<usize>)>,
    },
    RmsNorm {
        a: Var,
        gain: Var,
        inv_rms: Vec<R>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: attention::AttnShape,
        probs: Vec<R>,
    },
    WeightedSegments {
        a: Var,
        seg: usize,
        w: Vec<R>,
    },
    Stack(Vec<Var>),
    DotConst {
        a: Var,
        w: Vec<R>,
    },
}

#[derive(Debug)]
struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    requires_grad: bool,
}

/// Dynamic reverse-mode tape. Every operation appends a node; nodes are
/// therefore stored in topological order and `backward` walks them in
/// reverse.
#[derive(Debug)]
pub struct Graph<R: Real = f64> {
    nodes: Vec<Node<R>>,
    grads: Vec<Option<Vec<R>>>,
    fault: Option<Fault>,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2<R: Real>(t: &Tensor<R>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Dimension {
            op,
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            fault: None,
        }
    }

    pub fn set_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<R>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<R>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> R {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`] call, if the node
    /// was reached.
    pub fn grad(&self, v: Var) -> Option<&[R]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ---- linear algebra -------------------------------------------------

    /// `a·b` for `a: m×k`, `b: k×p`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul")?;
        let (k2, p) = dims2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, p],
            });
        }
        let mut out = vec![R::zero(); m * p];
        R::gemm(
            m,
            k,
            p,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let value = Tensor::new(vec![m, p], out)?;
        Ok(self.push(value, Op::MatMul { a, b, bt: false }, &[a, b]))
    }

    /// `a·bᵀ` for `a: m×k`, `b: p×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul_t")?;
        let (p, k2) = dims2(self.value(b), "matmul_t")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul_t",
                lhs: vec![m, k],
                rhs: vec![p, k2],
            });
        }
        let mut out = vec![R::zero(); m * p];
        R::gemm(
            m,
            k,
            p,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            &mut out,
            false,
        );
        let value = Tensor::new(vec![m, p], out)?;
        Ok(self.push(value, Op::MatMul { a, b, bt: true }, &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(a), "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![R::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip(
        &mut self,
        a: Var,
        b: Var,
        op: Op<R>,
        name: &'static str,
        f: impl Fn(R, R) -> R,
    ) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Adds the vector `row` to every row of the matrix `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(a), "add_row")?;
        if self.shape(row) != [n] {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: vec![m, n],
                rhs: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&x, &y)| x + y))
            .collect();
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(value, Op::AddRow { a, row }, &[a, row]))
    }

    pub fn scale(&mut self, a: Var, c: R) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| x * c).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Scale { a, c }, &[a]))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var> {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| activation_value(kind, x))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Act { a, kind }, &[a]))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: R = self.value(a).data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), &[a]))
    }

    /// Column means of an `m×n` matrix, giving a length-`n` vector.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(a), "mean_rows")?;
        let src = self.value(a).data();
        let mut out = vec![R::zero(); n];
        for row in src.chunks(n) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o = *o + x;
            }
        }
        let inv = R::one() / R::of(m as f64);
        out.iter_mut().for_each(|o| *o = *o * inv);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(a), &[a]))
    }

    /// `Σ_i w_i·a_i` with constant weights, giving a scalar.
    pub fn dot_const(&mut self, a: Var, w: &[R]) -> Result<Var> {
        if self.value(a).numel() != w.len() {
            return Err(Error::Dimension {
                op: "dot_const",
                lhs: self.shape(a).to_vec(),
                rhs: vec![w.len()],
            });
        }
        let s: R = self
            .value(a)
            .data()
            .iter()
            .zip(w)
            .map(|(&x, &y)| x * y)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::DotConst { a, w: w.to_vec() }, &[a]))
    }

    /// Per-segment weighted sums of a flat vector split into contiguous
    /// segments of length `seg`: `out[b] = Σ_t w[b·seg+t]·a[b·seg+t]`.
    pub fn weighted_segments(&mut self, a: Var, seg: usize, w: &[R]) -> Result<Var> {
        let n = self.value(a).numel();
        if seg == 0 || n % seg != 0 || w.len() != n {
            return Err(Error::Dimension {
                op: "weighted_segments",
                lhs: self.shape(a).to_vec(),
                rhs: vec![seg, w.len()],
            });
        }
        let out: Vec<R> = self
            .value(a)
            .data()
            .chunks(seg)
            .zip(w.chunks(seg))
            .map(|(x, w)| x.iter().zip(w).map(|(&x, &w)| x * w).sum())
            .collect();
        Ok(self.push(
            Tensor::vector(out),
            Op::WeightedSegments {
                a,
                seg,
                w: w.to_vec(),
            },
            &[a],
        ))
    }

    /// Stacks one-element tensors into a vector.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("stack of zero tensors"));
        }
        let mut out = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.value(p).numel() != 1 {
                return Err(Error::Dimension {
                    op: "stack",
                    lhs: self.shape(p).to_vec(),
                    rhs: vec![1],
                });
            }
            out.push(self.value(p).item());
        }
        Ok(self.push(Tensor::vector(out), Op::Stack(parts.to_vec()), parts))
    }

    // ---- normalizations -------------------------------------------------

    /// Row-wise softmax of an `m×n` matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(a), "softmax_rows")?;
        let mut out = vec![R::zero(); m * n];
        for (row, o) in self.value(a).data().chunks(n).zip(out.chunks_mut(n)) {
            let max = row.iter().copied().fold(R::neg_infinity(), R::max);
            let mut z = R::zero();
            for (oi, &x) in o.iter_mut().zip(row) {
                *oi = (x - max).exp();
                z = z + *oi;
            }
            o.iter_mut().for_each(|oi| *oi = *oi / z);
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::SoftmaxRows(a), &[a]))
    }

    /// Row-wise softmax restricted to `masks[r]`; entries outside the mask
    /// are exactly zero. Accepts a vector as a single row.
    pub fn masked_softmax_rows(&mut self, a: Var, masks: &[Vec<usize>]) -> Result<Var> {
        let (m, n) = self
            .value(a)
            .dims2()
            .ok_or_else(|| Error::invalid("masked_softmax_rows expects a vector or matrix"))?;
        if masks.len() != m {
            return Err(Error::invalid(format!(
                "masked softmax got {} masks for {m} rows",
                masks.len()
            )));
        }
        let src = self.value(a).data();
        let mut out = vec![R::zero(); m * n];
        for (r, mask) in masks.iter().enumerate() {
            if mask.is_empty() {
                return Err(Error::invalid(format!("empty softmax mask at row {r}")));
            }
            if let Some(&bad) = mask.iter().find(|&&i| i >= n) {
                return Err(Error::invalid(format!(
                    "mask index {bad} out of range for {n} entries"
                )));
            }
            let row = &src[r * n..(r + 1) * n];
            let o = &mut out[r * n..(r + 1) * n];
            let max = mask.iter().map(|&i| row[i]).fold(R::neg_infinity(), R::max);
            let mut z = R::zero();
            for &i in mask {
                o[i] = (row[i] - max).exp();
                z = z + o[i];
            }
            for &i in mask {
                o[i] = o[i] / z;
            }
        }
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(
            value,
            Op::MaskedSoftmaxRows {
                a,
                masks: masks.to_vec(),
            },
            &[a],
        ))
    }

    /// `log softmax(a[r])[targets[r]]` for every row, computed with max
    /// subtraction. Accepts a vector as a single row.
    pub fn target_log_probs(&mut self, a: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self
            .value(a)
            .dims2()
            .ok_or_else(|| Error::invalid("target_log_probs expects a vector or matrix"))?;
        if targets.len() != m {
            return Err(Error::invalid(format!(
                "{} targets for {m} rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::invalid(format!(
                "target {bad} out of range for {n} classes"
            )));
        }
        let mut probs = vec![R::zero(); m * n];
        let mut out = Vec::with_capacity(m);
        for (r, (row, p)) in self
            .value(a)
            .data()
            .chunks(n)
            .zip(probs.chunks_mut(n))
            .enumerate()
        {
            let max = row.iter().copied().fold(R::neg_infinity(), R::max);
            let mut z = R::zero();
            for (pi, &x) in p.iter_mut().zip(row) {
                *pi = (x - max).exp();
                z = z + *pi;
            }
            p.iter_mut().for_each(|pi| *pi = *pi / z);
            out.push(row[targets[r]] - max - z.ln());
        }
        Ok(self.push(
            Tensor::vector(out),
            Op::TargetLogProbs {
                a,
                targets: targets.to_vec(),
                probs,
            },
            &[a],
        ))
    }

    /// `−log softmax(logits)[target]` as a scalar.
    pub fn log_softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let lp = self.target_log_probs(logits, &[target])?;
        let neg = self.scale(lp, -R::one())?;
        self.reshape(neg, &[])
    }

    /// RMS normalization of each row followed by an elementwise gain.
    pub fn rms_norm(&mut self, a: Var, gain: Var, eps: f64) -> Result<Var> {
        let (m, n) = dims2(self.value(a), "rms_norm")?;
        if self.shape(gain) != [n] {
            return Err(Error::Dimension {
                op: "rms_norm",
                lhs: vec![m, n],
                rhs: self.shape(gain).to_vec(),
            });
        }
        let g = self.value(gain).data();
        let mut out = vec![R::zero(); m * n];
        let mut inv_rms = Vec::with_capacity(m);
        let inv_n = R::one() / R::of(n as f64);
        for (row, o) in self.value(a).data().chunks(n).zip(out.chunks_mut(n)) {
            let ms: R = row.iter().map(|&x| x * x).sum::<R>() * inv_n;
            let s = R::one() / (ms + R::of(eps)).sqrt();
            for ((oi, &x), &gi) in o.iter_mut().zip(row).zip(g) {
                *oi = x * s * gi;
            }
            inv_rms.push(s);
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::RmsNorm { a, gain, inv_rms }, &[a, gain]))
    }

    /// Multi-head causal self-attention over `batch` sequences of length
    /// `seq`, with `q`, `k`, `v` laid out as `(batch·seq)×d`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let (rows, d) = dims2(self.value(q), "causal_attention")?;
        for other in [k, v] {
            self.same_shape(q, other, "causal_attention")?;
        }
        if rows != batch * seq || heads == 0 || d % heads != 0 {
            return Err(Error::Dimension {
                op: "causal_attention",
                lhs: vec![rows, d],
                rhs: vec![batch, seq, heads],
            });
        }
        let shape = attention::AttnShape {
            batch,
            seq,
            heads,
            d,
        };
        let (out, probs) = attention::forward(
            shape,
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let value = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
            &[q, k, v],
        ))
    }

    // ---- indexing -------------------------------------------------------

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = dims2(self.value(a), "gather_rows")?;
        if idx.is_empty() {
            return Err(Error::invalid("gather_rows with no indices"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::invalid(format!(
                "row {bad} out of range for {m} rows"
            )));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let value = Tensor::new(vec![idx.len(), n], out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
            &[a],
        ))
    }

    /// Picks `a[r, c]` for each `(r, c)` pair into a vector.
    pub fn gather_elements(&mut self, a: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = dims2(self.value(a), "gather_elements")?;
        if idx.is_empty() {
            return Err(Error::invalid("gather_elements with no indices"));
        }
        if let Some(bad) = idx.iter().find(|(r, c)| *r >= m || *c >= n) {
            return Err(Error::invalid(format!(
                "element {bad:?} out of range for {m}x{n}"
            )));
        }
        let src = self.value(a).data();
        let out = idx.iter().map(|&(r, c)| src[r * n + c]).collect();
        Ok(self.push(
            Tensor::vector(out),
            Op::GatherElements {
                a,
                idx: idx.to_vec(),
            },
            &[a],
        ))
    }

    /// Multiplies row `r` of `a` by `s[r]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(a), "scale_rows")?;
        if self.value(s).numel() != m {
            return Err(Error::Dimension {
                op: "scale_rows",
                lhs: vec![m, n],
                rhs: self.shape(s).to_vec(),
            });
        }
        let sv = self.value(s).data();
        let data = self
            .value(a)
            .data()
            .chunks(n)
            .zip(sv)
            .flat_map(|(row, &c)| row.iter().map(move |&x| x * c))
            .collect();
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(value, Op::ScaleRows { a, s }, &[a, s]))
    }

    /// Scatter-adds the rows of each part into a fresh `rows×d` matrix:
    /// row `i` of a part lands on output row `idx[i]`. Parts are added in
    /// the order given.
    pub fn combine_rows(
        &mut self,
        parts: &[(Var, Vec<usize>)],
        rows: usize,
        d: usize,
    ) -> Result<Var> {
        let mut out = vec![R::zero(); rows * d];
        for (p, idx) in parts {
            let (m, n) = dims2(self.value(*p), "combine_rows")?;
            if n != d || m != idx.len() || idx.iter().any(|&i| i >= rows) {
                return Err(Error::Dimension {
                    op: "combine_rows",
                    lhs: vec![m, n],
                    rhs: vec![rows, d],
                });
            }
            for (src, &i) in self.value(*p).data().chunks(d).zip(idx) {
                for (o, &x) in out[i * d..(i + 1) * d].iter_mut().zip(src) {
                    *o = *o + x;
                }
            }
        }
        let value = Tensor::new(vec![rows, d], out)?;
        let inputs: Vec<Var> = parts.iter().map(|(p, _)| *p).collect();
        Ok(self.push(
            value,
            Op::CombineRows {
                parts: parts.to_vec(),
            },
            &inputs,
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Accumulates `∂root/∂node` into every node that requires a gradient.
    /// Gradients from earlier calls are discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::invalid(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<R>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(vec![R::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            backprop(&self.nodes, i, &gout, &mut grads, self.fault);
            grads[i] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }
}

pub(crate) fn activation_value<R: Real>(kind: Activation, x: R) -> R {
    match kind {
        Activation::Relu => x.max(R::zero()),
        Activation::Gelu => {
            let c = R::of((2.0 / std::f64::consts::PI).sqrt());
            let u = c * (x + R::of(0.044715) * x * x * x);
            R::of(0.5) * x * (R::one() + u.tanh())
        }
        Activation::Silu => x / (R::one() + (-x).exp()),
    }
}

fn activation_deriv<R: Real>(kind: Activation, x: R) -> R {
    match kind {
        Activation::Relu => {
            if x > R::zero() {
                R::one()
            } else {
                R::zero()
            }
        }
        Activation::Gelu => {
            let c = R::of((2.0 / std::f64::consts::PI).sqrt());
            let a = R::of(0.044715);
            let t = (c * (x + a * x * x * x)).tanh();
            let half = R::of(0.5);
            half * (R::one() + t)
                + half * x * (R::one() - t * t) * c * (R::one() + R::of(3.0) * a * x * x)
        }
        Activation::Silu => {
            let s = R::one() / (R::one() + (-x).exp());
            s * (R::one() + x * (R::one() - s))
        }
    }
}

fn buf<'a, R: Real>(
    nodes: &[Node<R>],
    grads: &'a mut [Option<Vec<R>>],
    v: Var,
) -> Option<&'a mut Vec<R>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![R::zero(); n]))
}

fn backprop<R: Real>(
    nodes: &[Node<R>],
    i: usize,
    g: &[R],
    grads: &mut [Option<Vec<R>>],
    fault: Option<Fault>,
) {
    let val = |v: Var| nodes[v.0].value.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul { a, b, bt } => {
            let ash = nodes[a.0].value.shape();
            let (m, k) = (ash[0], ash[1]);
            let p = nodes[i].value.shape()[1];
            if let Some(ga) = buf(nodes, grads, *a) {
                if fault == Some(Fault::MatMulBackward) {
                    let mut tmp = vec![R::zero(); m * k];
                    R::gemm(m, p, k, g, false, val(*b), !*bt, &mut tmp, false);
                    for (x, t) in ga.iter_mut().zip(tmp) {
                        *x = *x + t * R::of(1.01);
                    }
                } else {
                    // dA = G·Bᵀ (or G·B when b is already transposed)
                    R::gemm(m, p, k, g, false, val(*b), !*bt, ga, true);
                }
            }
            if let Some(gb) = buf(nodes, grads, *b) {
                if *bt {
                    // b: p×k, dB = Gᵀ·A
                    R::gemm(p, m, k, g, true, val(*a), false, gb, true);
                } else {
                    // b: k×p, dB = Aᵀ·G
                    R::gemm(k, m, p, val(*a), true, g, false, gb, true);
                }
            }
        }
        Op::Transpose(a) => {
            let sh = nodes[i].value.shape();
            let (n, m) = (sh[0], sh[1]);
            if let Some(ga) = buf(nodes, grads, *a) {
                for r in 0..m {
                    for c in 0..n {
                        ga[r * n + c] = ga[r * n + c] + g[c * m + r];
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(ga) = buf(nodes, grads, *a) {
                add_into(ga, g);
            }
        }
        Op::Add(a, b) => {
            if let Some(ga) = buf(nodes, grads, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = buf(nodes, grads, *b) {
                add_into(gb, g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = buf(nodes, grads, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = buf(nodes, grads, *b) {
                for (x, &y) in gb.iter_mut().zip(g) {
                    *x = *x - y;
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(ga) = buf(nodes, grads, *a) {
                for ((x, &gi), &y) in ga.iter_mut().zip(g).zip(bv) {
                    *x = *x + gi * y;
                }
            }
            if let Some(gb) = buf(nodes, grads, *b) {
                for ((x, &gi), &y) in gb.iter_mut().zip(g).zip(av) {
                    *x = *x + gi * y;
                }
            }
        }
        Op::AddRow { a, row } => {
            if let Some(ga) = buf(nodes, grads, *a) {
                add_into(ga, g);
            }
            let n = nodes[row.0].value.numel();
            if let Some(gr) = buf(nodes, grads, *row) {
                for chunk in g.chunks(n) {
                    add_into(gr, chunk);
                }
            }
        }
        Op::Scale { a, c } => {
            if let Some(ga) = buf(nodes, grads, *a) {
                for (x, &gi) in ga.iter_mut().zip(g) {
                    *x = *x + *c * gi;
                }
            }
        }
        Op::Act { a, kind } => {
            let av = val(*a);
            if let Some(ga) = buf(nodes, grads, *a) {
                for ((x, &gi), &xi) in ga.iter_mut().zip(g).zip(av) {
                    *x = *x + gi * activation_deriv(*kind, xi);
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = buf(nodes, grads, *a) {
                ga.iter_mut().for_each(|x| *x = *x + g[0]);
            }
        }
        Op::MeanRows(a) => {
            let sh = nodes[a.0].value.shape();
            let (m, n) = (sh[0], sh[1]);
            let inv = R::one() / R::of(m as f64);
            if let Some(ga) = buf(nodes, grads, *a) {
                for chunk in ga.chunks_mut(n) {
                    for (x, &gi) in chunk.iter_mut().zip(g) {
                        *x = *x + gi * inv;
                    }
                }
            }
        }
        Op::SoftmaxRows(a) => {
            let y = nodes[i].value.data();
            let n = nodes[i].value.shape()[1];
            if let Some(ga) = buf(nodes, grads, *a) {
                for ((gx, yr), gr) in ga.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dot: R = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                    for ((x, &yi), &gi) in gx.iter_mut().zip(yr).zip(gr) {
                        *x = *x + yi * (gi - dot);
                    }
                }
            }
        }
        Op::MaskedSoftmaxRows { a, masks } => {
            let y = nodes[i].value.data();
            let n = nodes[a.0].value.dims2().map_or(0, |d| d.1);
            if let Some(ga) = buf(nodes, grads, *a) {
                for (r, mask) in masks.iter().enumerate() {
                    let base = r * n;
                    let dot: R = if fault == Some(Fault::MaskedSoftmaxBackward) {
                        R::zero()
                    } else {
                        mask.iter().map(|&j| y[base + j] * g[base + j]).sum()
                    };
                    for &j in mask {
                        ga[base + j] = ga[base + j] + y[base + j] * (g[base + j] - dot);
                    }
                }
            }
        }
        Op::TargetLogProbs { a, targets, probs } => {
            let n = probs.len() / targets.len();
            if let Some(ga) = buf(nodes, grads, *a) {
                for (r, &t) in targets.iter().enumerate() {
                    let gr = g[r];
                    let row = &mut ga[r * n..(r + 1) * n];
                    for (x, &p) in row.iter_mut().zip(&probs[r * n..(r + 1) * n]) {
                        *x = *x - gr * p;
                    }
                    row[t] = row[t] + gr;
                }
            }
        }
        Op::GatherRows { a, idx } => {
            let n = nodes[a.0].value.shape()[1];
            if let Some(ga) = buf(nodes, grads, *a) {
                for (src, &r) in g.chunks(n).zip(idx) {
                    add_into(&mut ga[r * n..(r + 1) * n], src);
                }
            }
        }
        Op::GatherElements { a, idx } => {
            let n = nodes[a.0].value.shape()[1];
            if let Some(ga) = buf(nodes, grads, *a) {
                for (&gi, &(r, c)) in g.iter().zip(idx) {
                    ga[r * n + c] = ga[r * n + c] + gi;
                }
            }
        }
        Op::ScaleRows { a, s } => {
            let n = nodes[a.0].value.shape()[1];
            let (av, sv) = (val(*a), val(*s));
            if let Some(ga) = buf(nodes, grads, *a) {
                for ((x, gr), &c) in ga.chunks_mut(n).zip(g.chunks(n)).zip(sv) {
                    for (xi, &gi) in x.iter_mut().zip(gr) {
                        *xi = *xi + gi * c;
                    }
                }
            }
            if let Some(gs) = buf(nodes, grads, *s) {
                for ((x, gr), ar) in gs.iter_mut().zip(g.chunks(n)).zip(av.chunks(n)) {
                    let dot: R = gr.iter().zip(ar).map(|(&g, &a)| g * a).sum();
                    *x = *x + dot;
                }
            }
        }
        Op::CombineRows { parts } => {
            let d = nodes[i].value.shape()[1];
            for (p, idx) in parts {
                if let Some(gp) = buf(nodes, grads, *p) {
                    for (dst, &r) in gp.chunks_mut(d).zip(idx) {
                        add_into(dst, &g[r * d..(r + 1) * d]);
                    }
                }
            }
        }
        Op::RmsNorm { a, gain, inv_rms } => {
            let n = nodes[gain.0].value.numel();
            let (av, gv) = (val(*a), val(*gain));
            let inv_n = R::one() / R::of(n as f64);
            if let Some(ga) = buf(nodes, grads, *a) {
                for (((x, gr), ar), &s) in ga
                    .chunks_mut(n)
                    .zip(g.chunks(n))
                    .zip(av.chunks(n))
                    .zip(inv_rms)
                {
                    let dot: R = gr
                        .iter()
                        .zip(gv)
                        .zip(ar)
                        .map(|((&g, &w), &a)| g * w * a)
                        .sum();
                    let coef = s * s * s * dot * inv_n;
                    for (((xi, &gi), &wi), &ai) in x.iter_mut().zip(gr).zip(gv).zip(ar) {
                        *xi = *xi + s * wi * gi - coef * ai;
                    }
                }
            }
            if let Some(gg) = buf(nodes, grads, *gain) {
                for ((gr, ar), &s) in g.chunks(n).zip(av.chunks(n)).zip(inv_rms) {
                    for ((x, &gi), &ai) in gg.iter_mut().zip(gr).zip(ar) {
                        *x = *x + gi * ai * s;
                    }
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            shape,
            probs,
        } => {
            let n = nodes[q.0].value.numel();
            let mut dq = vec![R::zero(); n];
            let mut dk = vec![R::zero(); n];
            let mut dv = vec![R::zero(); n];
            attention::backward(
                *shape,
                val(*q),
                val(*k),
                val(*v),
                probs,
                g,
                &mut dq,
                &mut dk,
                &mut dv,
            );
            for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                if let Some(gx) = buf(nodes, grads, var) {
                    add_into(gx, &d);
                }
            }
        }
        Op::WeightedSegments { a, seg, w } => {
            if let Some(ga) = buf(nodes, grads, *a) {
                for (j, (x, &wi)) in ga.iter_mut().zip(w).enumerate() {
                    *x = *x + g[j / seg] * wi;
                }
            }
        }
        Op::Stack(parts) => {
            for (j, p) in parts.iter().enumerate() {
                if let Some(gp) = buf(nodes, grads, *p) {
                    gp[0] = gp[0] + g[j];
                }
            }
        }
        Op::DotConst { a, w } => {
            if let Some(ga) = buf(nodes, grads, *a) {
                for (x, &wi) in ga.iter_mut().zip(w) {
                    *x = *x + g[0] * wi;
                }
            }
        }
    }
}

fn add_into<R: Real>(dst: &mut [R], src: &[R]) {
    for (x, &y) in dst.iter_mut().zip(src) {
        *x = *x + y;
    }
}
