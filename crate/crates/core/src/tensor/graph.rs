use std::collections::{BTreeMap, HashMap};
use std::hash::{Hash, Hasher};

use super::kernels::{self, Border};
use super::{Result, Scalar, Tensor, TensorError};

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Operation category, used for fault injection and reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Abs,
    Concat,
    Reshape,
    Transpose,
    Mean,
    Sum,
    LayerNorm,
    Unfold,
    Gather,
    LinearAttention,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::Abs => "abs",
            OpKind::Concat => "concat",
            OpKind::Reshape => "reshape",
            OpKind::Transpose => "transpose",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Unfold => "unfold",
            OpKind::Gather => "gather",
            OpKind::LinearAttention => "linear_attention",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        const ALL: [OpKind; 17] = [
            OpKind::Leaf,
            OpKind::MatMul,
            OpKind::Add,
            OpKind::Sub,
            OpKind::Mul,
            OpKind::Scale,
            OpKind::Relu,
            OpKind::Abs,
            OpKind::Concat,
            OpKind::Reshape,
            OpKind::Transpose,
            OpKind::Mean,
            OpKind::Sum,
            OpKind::LayerNorm,
            OpKind::Unfold,
            OpKind::Gather,
            OpKind::LinearAttention,
        ];
        ALL.into_iter().find(|k| k.name() == s)
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    Relu { a: Var },
    Abs { a: Var },
    Concat { parts: Vec<(Var, usize)>, rows: usize },
    Reshape { a: Var },
    Transpose { a: Var, rows: usize, cols: usize },
    Mean { a: Var },
    Sum { a: Var },
    LayerNorm { a: Var, d: usize, inv_std: Vec<T> },
    Unfold { a: Var, h: usize, w: usize, c: usize, border: Border },
    Gather { a: Var, idx: Vec<usize>, cols: usize },
    LinearAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: T,
        // Scaled per-head summaries, head-major `heads·d·d`.
        summary: Vec<T>,
        external: bool,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Relu { .. } => OpKind::Relu,
            Op::Abs { .. } => OpKind::Abs,
            Op::Concat { .. } => OpKind::Concat,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Mean { .. } => OpKind::Mean,
            Op::Sum { .. } => OpKind::Sum,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Unfold { .. } => OpKind::Unfold,
            Op::Gather { .. } => OpKind::Gather,
            Op::LinearAttention { .. } => OpKind::LinearAttention,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation record. Nodes are appended in evaluation order, so every
/// input precedes its consumer and a reverse sweep is a valid backward order.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            fault: None,
        }
    }

    /// Scales every gradient produced by `kind` in the backward pass by 1.5.
    /// Used only to check that the gradient checker notices a broken rule.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that participates in differentiation but carries no name.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Registers a named trainable leaf. Registering the same name twice returns
    /// the first handle, so shared weights accumulate into one gradient.
    pub fn param(&mut self, name: &str, t: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(t.clone(), Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::mm(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, m, k, n }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcast_ok(sa, sb) {
            return Err(TensorError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let nb = bv.len();
        Ok(av
            .chunks(nb)
            .flat_map(|chunk| chunk.iter().zip(bv).map(|(&x, &y)| f(x, y)))
            .collect())
    }

    /// `a + b`, where `b`'s shape is a suffix of `a`'s (broadcast over leading extents).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64_lossy(c);
        let t = self.value(a);
        let out = t.data().iter().map(|&x| x * c).collect();
        let t = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(a);
        self.push(t, Op::Scale { a, c }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
        let t = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(a);
        self.push(t, Op::Relu { a }, rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|&x| x.abs()).collect();
        let t = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(a);
        self.push(t, Op::Abs { a }, rg)
    }

    /// Concatenation along the last axis; all leading extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Contract {
                op: "concat",
                msg: "no inputs".into(),
            });
        };
        let lead = {
            let s = self.shape(first);
            s[..s.len() - 1].to_vec()
        };
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        let parts = parts.iter().copied().zip(widths).collect();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat { parts, rows }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape { a }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Contract {
                op: "transpose",
                msg: format!("expected a matrix, got shape {s:?}"),
            });
        }
        let out = kernels::transpose(self.value(a).data(), s[0], s[1]);
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(vec![s[1], s[0]], out),
            Op::Transpose {
                a,
                rows: s[0],
                cols: s[1],
            },
            rg,
        ))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().fold(T::zero(), |acc, &x| acc + x);
        let m = s / T::from_usize(t.len()).expect("length fits");
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::Mean { a }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &x| acc + x);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    /// Normalizes each row over the last axis to zero mean and unit variance,
    /// `(x - μ) / sqrt(σ² + eps)`. No affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        if eps < 0.0 || !eps.is_finite() {
            return Err(TensorError::Contract {
                op: "layer_norm",
                msg: format!("eps must be finite and non-negative, got {eps}"),
            });
        }
        let t = self.value(a);
        let d = *t.shape().last().expect("non-empty shape");
        let eps = T::from_f64_lossy(eps);
        let dn = T::from_usize(d).expect("width fits");
        let mut out = Vec::with_capacity(t.len());
        let mut inv_std = Vec::with_capacity(t.len() / d);
        for row in t.data().chunks(d) {
            let mu = row.iter().fold(T::zero(), |s, &x| s + x) / dn;
            let var = row.iter().fold(T::zero(), |s, &x| s + (x - mu) * (x - mu)) / dn;
            let is = T::one() / (var + eps).sqrt();
            out.extend(row.iter().map(|&x| (x - mu) * is));
            inv_std.push(is);
        }
        let t = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(a);
        Ok(self.push(t, Op::LayerNorm { a, d, inv_std }, rg))
    }

    /// Gathers each pixel's 3×3 neighborhood: `[h, w, c] -> [h·w, 9·c]`.
    pub fn unfold3x3(&mut self, a: Var, border: Border) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(TensorError::Contract {
                op: "unfold3x3",
                msg: format!("expected [h, w, c], got {s:?}"),
            });
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let out = kernels::unfold3x3(self.value(a).data(), h, w, c, border);
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(vec![h * w, 9 * c], out),
            Op::Unfold { a, h, w, c, border },
            rg,
        ))
    }

    /// 3×3 same-size convolution with zero padding.
    /// `x: [h, w, cin]`, `kernel: [3, 3, cin, cout]`, `bias: [cout]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 3 || sk.len() != 4 || sk[0] != 3 || sk[1] != 3 || sk[2] != sx[2] {
            return Err(TensorError::Shape {
                op: "conv2d",
                lhs: sx,
                rhs: sk,
            });
        }
        let (h, w, cin, cout) = (sx[0], sx[1], sx[2], sk[3]);
        let cols = self.unfold3x3(x, Border::Zero)?;
        let km = self.reshape(kernel, &[9 * cin, cout])?;
        let y = self.matmul(cols, km)?;
        let y = self.add(y, bias)?;
        self.reshape(y, &[h, w, cout])
    }

    /// Rows `idx` of a matrix.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Contract {
                op: "gather_rows",
                msg: format!("expected a matrix, got {s:?}"),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[0]) {
            return Err(TensorError::Contract {
                op: "gather_rows",
                msg: format!("row {bad} out of range for {} rows", s[0]),
            });
        }
        if idx.is_empty() {
            return Err(TensorError::Contract {
                op: "gather_rows",
                msg: "empty index list".into(),
            });
        }
        let cols = s[1];
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(vec![idx.len(), cols], out),
            Op::Gather {
                a,
                idx: idx.to_vec(),
                cols,
            },
            rg,
        ))
    }

    /// Multi-head linear attention core: for each head `n`,
    /// `Vₙ · (Kₙᵀ·Qₙ) · scale`, heads laid out as contiguous column blocks.
    ///
    /// With `external = Some(s)` the per-head summaries (head-major, already
    /// scaled) are taken as constants and only `v` receives gradient.
    pub fn linear_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
        external: Option<&[T]>,
    ) -> Result<Var> {
        let sv = self.shape(v).to_vec();
        if sv.len() != 2 || self.shape(q) != sv.as_slice() || self.shape(k) != sv.as_slice() {
            return Err(TensorError::Shape {
                op: "linear_attention",
                lhs: self.shape(q).to_vec(),
                rhs: sv,
            });
        }
        let (t, c) = (sv[0], sv[1]);
        if heads == 0 || c % heads != 0 {
            return Err(TensorError::Contract {
                op: "linear_attention",
                msg: format!("width {c} not divisible by {heads} heads"),
            });
        }
        let d = c / heads;
        let scale_t = T::from_f64_lossy(scale);
        let summary: Vec<T> = match external {
            Some(s) => {
                if s.len() != heads * d * d {
                    return Err(TensorError::Contract {
                        op: "linear_attention",
                        msg: format!("summary has {} values, expected {}", s.len(), heads * d * d),
                    });
                }
                s.to_vec()
            }
            None => {
                let (qv, kv) = (self.value(q).data(), self.value(k).data());
                let mut s = Vec::with_capacity(heads * d * d);
                for n in 0..heads {
                    let kn = kernels::columns(kv, t, c, n * d, d);
                    let qn = kernels::columns(qv, t, c, n * d, d);
                    s.extend(kernels::mm_at_b(&kn, &qn, t, d, d).into_iter().map(|x| x * scale_t));
                }
                s
            }
        };
        let vv = self.value(v).data();
        let mut out = vec![T::zero(); t * c];
        for n in 0..heads {
            let vn = kernels::columns(vv, t, c, n * d, d);
            let on = kernels::mm(&vn, &summary[n * d * d..(n + 1) * d * d], t, d, d);
            kernels::add_columns(&mut out, t, c, n * d, d, &on);
        }
        let ext = external.is_some();
        let rg = self.rg(v) || (!ext && (self.rg(q) || self.rg(k)));
        Ok(self.push(
            Tensor::from_parts(vec![t, c], out),
            Op::LinearAttention {
                q,
                k,
                v,
                heads,
                scale: scale_t,
                summary,
                external: ext,
            },
            rg,
        ))
    }

    /// Distinct operation kinds recorded so far, leaves excluded.
    pub fn op_kinds(&self) -> std::collections::BTreeSet<OpKind> {
        self.nodes
            .iter()
            .map(|n| n.op.kind())
            .filter(|&k| k != OpKind::Leaf)
            .collect()
    }

    /// Hash of the sign pattern at every non-smooth point (relu and abs inputs).
    /// Two evaluations with equal signatures lie in the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            let a = match node.op {
                Op::Relu { a } | Op::Abs { a } => a,
                _ => continue,
            };
            for &x in self.nodes[a.0].value.data() {
                let s: i8 = if x > T::zero() {
                    1
                } else if x < T::zero() {
                    -1
                } else {
                    0
                };
                s.hash(&mut h);
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar `loss`. Consumes the record.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let loss_shape = self.shape(loss).to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::Contract {
                op: "backward",
                msg: format!("loss must be a scalar, got shape {loss_shape:?}"),
            });
        }
        let Graph {
            nodes,
            params,
            fault,
        } = self;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let factor = if fault == Some(node.op.kind()) {
                T::from_f64_lossy(1.5)
            } else {
                T::one()
            };
            let mut contribs: Vec<(Var, Vec<T>)> = Vec::new();
            let val = |v: Var| nodes[v.0].value.data();
            let wants = |v: Var| nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                &Op::MatMul { a, b, m, k, n } => {
                    if wants(a) {
                        contribs.push((a, kernels::mm_a_bt(&g, val(b), m, n, k)));
                    }
                    if wants(b) {
                        contribs.push((b, kernels::mm_at_b(val(a), &g, m, k, n)));
                    }
                }
                &Op::Add { a, b } | &Op::Sub { a, b } => {
                    let neg = matches!(node.op, Op::Sub { .. });
                    if wants(b) {
                        let nb = nodes[b.0].value.len();
                        let mut gb = vec![T::zero(); nb];
                        for chunk in g.chunks(nb) {
                            for (s, &x) in gb.iter_mut().zip(chunk) {
                                *s = *s + x;
                            }
                        }
                        if neg {
                            gb.iter_mut().for_each(|x| *x = -*x);
                        }
                        contribs.push((b, gb));
                    }
                    if wants(a) {
                        contribs.push((a, g));
                    }
                }
                &Op::Mul { a, b } => {
                    let (av, bv) = (val(a), val(b));
                    let nb = bv.len();
                    if wants(b) {
                        let mut gb = vec![T::zero(); nb];
                        for (gc, ac) in g.chunks(nb).zip(av.chunks(nb)) {
                            for ((s, &x), &y) in gb.iter_mut().zip(gc).zip(ac) {
                                *s = *s + x * y;
                            }
                        }
                        contribs.push((b, gb));
                    }
                    if wants(a) {
                        let ga = g
                            .chunks(nb)
                            .flat_map(|gc| gc.iter().zip(bv).map(|(&x, &y)| x * y))
                            .collect();
                        contribs.push((a, ga));
                    }
                }
                &Op::Scale { a, c } => {
                    contribs.push((a, g.iter().map(|&x| x * c).collect()));
                }
                &Op::Relu { a } => {
                    let ga = g
                        .iter()
                        .zip(val(a))
                        .map(|(&x, &y)| if y > T::zero() { x } else { T::zero() })
                        .collect();
                    contribs.push((a, ga));
                }
                &Op::Abs { a } => {
                    let ga = g
                        .iter()
                        .zip(val(a))
                        .map(|(&x, &y)| {
                            if y > T::zero() {
                                x
                            } else if y < T::zero() {
                                -x
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    contribs.push((a, ga));
                }
                Op::Concat { parts, rows } => {
                    let total: usize = parts.iter().map(|p| p.1).sum();
                    let mut off = 0;
                    for &(p, w) in parts {
                        if wants(p) {
                            contribs.push((p, kernels::columns(&g, *rows, total, off, w)));
                        }
                        off += w;
                    }
                }
                &Op::Reshape { a } => contribs.push((a, g)),
                &Op::Transpose { a, rows, cols } => {
                    contribs.push((a, kernels::transpose(&g, cols, rows)));
                }
                &Op::Mean { a } => {
                    let n = nodes[a.0].value.len();
                    let share = g[0] / T::from_usize(n).expect("length fits");
                    contribs.push((a, vec![share; n]));
                }
                &Op::Sum { a } => {
                    contribs.push((a, vec![g[0]; nodes[a.0].value.len()]));
                }
                Op::LayerNorm { a, d, inv_std } => {
                    let y = node.value.data();
                    let dn = T::from_usize(*d).expect("width fits");
                    let mut ga = Vec::with_capacity(g.len());
                    for ((gr, yr), &is) in g.chunks(*d).zip(y.chunks(*d)).zip(inv_std) {
                        let mg = gr.iter().fold(T::zero(), |s, &x| s + x) / dn;
                        let mgy = gr.iter().zip(yr).fold(T::zero(), |s, (&x, &yy)| s + x * yy) / dn;
                        ga.extend(gr.iter().zip(yr).map(|(&x, &yy)| is * (x - mg - yy * mgy)));
                    }
                    contribs.push((*a, ga));
                }
                &Op::Unfold { a, h, w, c, border } => {
                    contribs.push((a, kernels::fold3x3(&g, h, w, c, border)));
                }
                Op::Gather { a, idx, cols } => {
                    let mut ga = vec![T::zero(); nodes[a.0].value.len()];
                    for (r, &src) in idx.iter().enumerate() {
                        let dst = &mut ga[src * cols..(src + 1) * cols];
                        for (d, &x) in dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                            *d = *d + x;
                        }
                    }
                    contribs.push((*a, ga));
                }
                Op::LinearAttention {
                    q,
                    k,
                    v,
                    heads,
                    scale,
                    summary,
                    external,
                } => {
                    let s = node.value.shape();
                    let (t, c) = (s[0], s[1]);
                    let d = c / heads;
                    let (want_v, want_qk) = (wants(*v), !external && (wants(*q) || wants(*k)));
                    let mut gv = vec![T::zero(); t * c];
                    let mut gq = vec![T::zero(); t * c];
                    let mut gk = vec![T::zero(); t * c];
                    for n in 0..*heads {
                        let gn = kernels::columns(&g, t, c, n * d, d);
                        let sn = &summary[n * d * d..(n + 1) * d * d];
                        if want_v {
                            let dv = kernels::mm_a_bt(&gn, sn, t, d, d);
                            kernels::add_columns(&mut gv, t, c, n * d, d, &dv);
                        }
                        if want_qk {
                            let vn = kernels::columns(val(*v), t, c, n * d, d);
                            // dA = Vᵀ·g, scaled once here.
                            let da: Vec<T> = kernels::mm_at_b(&vn, &gn, t, d, d)
                                .into_iter()
                                .map(|x| x * *scale)
                                .collect();
                            let qn = kernels::columns(val(*q), t, c, n * d, d);
                            let kn = kernels::columns(val(*k), t, c, n * d, d);
                            let dk = kernels::mm_a_bt(&qn, &da, t, d, d);
                            let dq = kernels::mm(&kn, &da, t, d, d);
                            kernels::add_columns(&mut gk, t, c, n * d, d, &dk);
                            kernels::add_columns(&mut gq, t, c, n * d, d, &dq);
                        }
                    }
                    if want_v {
                        contribs.push((*v, gv));
                    }
                    if want_qk {
                        contribs.push((*q, gq));
                        contribs.push((*k, gk));
                    }
                }
            }
            for (target, mut gt) in contribs {
                if !nodes[target.0].requires_grad {
                    continue;
                }
                if factor != T::one() {
                    gt.iter_mut().for_each(|x| *x = *x * factor);
                }
                match &mut grads[target.0] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&gt) {
                            *a = *a + *b;
                        }
                    }
                    slot @ None => *slot = Some(gt),
                }
            }
        }

        let by_node: Vec<Option<Tensor<T>>> = grads
            .into_iter()
            .zip(&nodes)
            .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)))
            .collect();
        let params = params
            .into_iter()
            .map(|(name, v)| {
                let g = by_node[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(nodes[v.0].value.shape()));
                (name, g)
            })
            .collect();
        Ok(Gradients { by_node, params })
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    by_node: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a recorded leaf; `None` if it was unreachable from the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a named parameter; zero-filled if unreachable.
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::new();
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let p = g.matmul(i, b).unwrap();
        assert_eq!(g.value(p).data(), &[3.0, 4.0, 5.0, 6.0]);
        let r = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let c = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let p = g.matmul(r, c).unwrap();
        assert_eq!(g.value(p).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn relu_values_and_gradient_at_zero() {
        let mut g = Graph::new();
        let x = g.variable(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y);
        let gr = g.backward(s).unwrap();
        assert_eq!(gr.wrt(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn concat_last_axis() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[1], &[3.0]));
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);
        let m = g.constant(Tensor::zeros(&[2, 2]));
        let bad = g.constant(Tensor::zeros(&[3, 1]));
        assert!(g.concat(&[m, bad]).is_err());
    }

    #[test]
    fn mean_spreads_gradient_evenly() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2], &[2.0, 4.0]));
        let m = g.mean(x);
        assert_eq!(g.value(m).data(), &[3.0]);
        let gr = g.backward(m).unwrap();
        assert_eq!(gr.wrt(x).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn broadcast_add_and_error() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.variable(t(&[2], &[10.0, 20.0]));
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.0, 22.0, 13.0, 24.0]);
        let bad = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(g.add(x, bad), Err(TensorError::Shape { .. })));
        let s = g.sum(y);
        let gr = g.backward(s).unwrap();
        assert_eq!(gr.wrt(b).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn sum_of_weighted_constant_gives_constant_gradient() {
        let mut g = Graph::new();
        let w = g.param("w", &t(&[3], &[0.3, -0.2, 0.9]));
        let x = g.constant(t(&[3], &[1.0, -2.0, 5.0]));
        let p = g.mul(w, x).unwrap();
        let loss = g.sum(p);
        let gr = g.backward(loss).unwrap();
        assert_eq!(gr.param("w").unwrap().data(), &[1.0, -2.0, 5.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut g = Graph::new();
        let w = g.param("w", &t(&[2], &[1.0, 2.0]));
        let zero = g.scale(w, 0.0);
        let loss = g.sum(zero);
        let gr = g.backward(loss).unwrap();
        assert_eq!(gr.param("w").unwrap().data(), &[0.0, 0.0]);

        let mut g = Graph::new();
        g.param("w", &t(&[2], &[1.0, 2.0]));
        let c = g.constant(Tensor::scalar(0.0));
        let gr = g.backward(c).unwrap();
        assert_eq!(gr.param("w").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(TensorError::Contract { .. })));
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3], &[1.0, 1.0, 1.0]));
        let y = g.layer_norm(x, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);
        let x = g.constant(t(&[1, 2], &[0.0, 2.0]));
        let y = g.layer_norm(x, 0.0).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, 1.0]);
    }

    #[test]
    fn shared_param_registers_once() {
        let mut g = Graph::new();
        let w = t(&[1], &[2.0]);
        let a = g.param("w", &w);
        let b = g.param("w", &w);
        assert_eq!(a, b);
        let p = g.mul(a, b).unwrap();
        let gr = g.backward(p).unwrap();
        assert_eq!(gr.param("w").unwrap().data(), &[4.0]);
    }

    #[test]
    fn op_kind_names_parse_back() {
        for name in ["matmul", "relu", "linear_attention", "layer_norm"] {
            assert_eq!(OpKind::parse(name).unwrap().name(), name);
        }
        assert!(OpKind::parse("softmax").is_none());
    }
}
