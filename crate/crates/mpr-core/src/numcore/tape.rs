//! Reverse-mode autodiff over a linear tape of matrix operations.
//!
//! The op set is fixed: matmul (with an optional transposed right operand),
//! add / bias-add, elementwise mul, scale, relu, gelu (tanh approximation),
//! tanh, exp, log, softmax (last dim), layernorm (last dim, affine),
//! mean / sum reductions, mse, gather-rows and concat (last dim). Every
//! model in the crate composes from these, which keeps each backward rule
//! individually testable.
//!
//! Values are f64 matrices (rank-0/1 tensors are treated as single rows).
//! Each op validates shapes and checks its output for non-finite values,
//! returning a numeric error naming the op when one appears.

use crate::error::{CoreError, CoreResult};
use crate::numcore::Tensor;

pub const LAYERNORM_EPS: f64 = 1e-5;
const GELU_COEF: f64 = 0.044715;

/// Index of a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// C = A @ B, or A @ B^T when `tb`.
    Matmul { a: usize, b: usize, tb: bool },
    /// Same-shape elementwise addition.
    Add { a: usize, b: usize },
    /// Row-broadcast addition: `b` is 1 x cols.
    BiasAdd { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    Relu { a: usize },
    Gelu { a: usize },
    Tanh { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Softmax { a: usize },
    LayerNorm { a: usize, gamma: usize, beta: usize },
    MeanAll { a: usize },
    SumAll { a: usize },
    /// rows x cols -> 1 x cols.
    MeanRows { a: usize },
    /// rows x cols -> rows x 1.
    SumLast { a: usize },
    /// Mean squared error over all elements -> scalar.
    Mse { a: usize, b: usize },
    GatherRows { a: usize, idx: Vec<usize> },
    Concat { parts: Vec<usize> },
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    requires_grad: bool,
    /// Saved per-row 1/sqrt(var+eps) for layernorm backward.
    aux: Vec<f64>,
}

/// Gradients produced by a consumed tape, indexed by `VarId`.
pub struct TapeGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl TapeGrads {
    pub fn get(&self, id: VarId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }
}

/// A computation tape. Ops append nodes in topological order; `backward`
/// consumes the tape and visits nodes exactly once in reverse.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        // Training rebuilds tapes at high frequency; keep large buffers on
        // the heap instead of handing them back to the kernel each drop,
        // otherwise page faults dominate the small matmuls.
        static MALLOC_TUNE: std::sync::Once = std::sync::Once::new();
        MALLOC_TUNE.call_once(|| {
            #[cfg(target_os = "linux")]
            unsafe {
                libc::mallopt(libc::M_MMAP_THRESHOLD, 256 * 1024 * 1024);
                libc::mallopt(libc::M_TRIM_THRESHOLD, 256 * 1024 * 1024);
            }
        });
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: VarId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn scalar_value(&self, id: VarId) -> f64 {
        self.nodes[id.0].value[0]
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<f64>, rg: bool) -> VarId {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            op,
            rows,
            cols,
            value,
            requires_grad: rg,
            aux: Vec::new(),
        });
        VarId(self.nodes.len() - 1)
    }

    fn check(&self, id: VarId, op: &str) -> CoreResult<VarId> {
        let n = &self.nodes[id.0];
        // NaN and infinity both propagate through the sum, so one reduction
        // covers the whole buffer (values here are far from f64 overflow).
        let sum: f64 = n.value.iter().sum();
        if !sum.is_finite() && n.value.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::numeric(op, "non-finite output"));
        }
        Ok(id)
    }

    fn rg(&self, a: usize) -> bool {
        self.nodes[a].requires_grad
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Register a constant or parameter matrix on the tape.
    pub fn leaf(&mut self, rows: usize, cols: usize, data: &[f64], requires_grad: bool) -> VarId {
        debug_assert_eq!(data.len(), rows * cols);
        self.push(Op::Leaf, rows, cols, data.to_vec(), requires_grad)
    }

    pub fn leaf_tensor(&mut self, t: &Tensor) -> VarId {
        self.leaf(t.rows(), t.cols(), &t.data, t.requires_grad)
    }

    pub fn leaf_scalar(&mut self, v: f64) -> VarId {
        self.push(Op::Leaf, 1, 1, vec![v], false)
    }

    // ── Forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: VarId, b: VarId) -> CoreResult<VarId> {
        self.matmul_impl(a, b, false)
    }

    /// C = A @ B^T. Used for attention scores.
    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> CoreResult<VarId> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: VarId, b: VarId, tb: bool) -> CoreResult<VarId> {
        let (m, k) = self.shape(a);
        let (br, bc) = self.shape(b);
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(CoreError::config(format!(
                "matmul shape mismatch: {}x{} @ {}x{}{}",
                m,
                k,
                br,
                bc,
                if tb { "^T" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        if tb {
            matmul_nt_acc(
                &self.nodes[a.0].value,
                &self.nodes[b.0].value,
                &mut out,
                m,
                k,
                n,
            );
        } else {
            matmul_acc(
                &self.nodes[a.0].value,
                &self.nodes[b.0].value,
                &mut out,
                m,
                k,
                n,
            );
        }
        let rg = self.rg(a.0) || self.rg(b.0);
        let id = self.push(Op::Matmul { a: a.0, b: b.0, tb }, m, n, out, rg);
        self.check(id, "matmul")
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> CoreResult<VarId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ar == br && ac == bc {
            let out: Vec<f64> = self.nodes[a.0]
                .value
                .iter()
                .zip(&self.nodes[b.0].value)
                .map(|(x, y)| x + y)
                .collect();
            let rg = self.rg(a.0) || self.rg(b.0);
            let id = self.push(Op::Add { a: a.0, b: b.0 }, ar, ac, out, rg);
            return self.check(id, "add");
        }
        if br == 1 && bc == ac {
            let mut out = self.nodes[a.0].value.clone();
            for r in 0..ar {
                let row = &mut out[r * ac..(r + 1) * ac];
                for (o, y) in row.iter_mut().zip(&self.nodes[b.0].value) {
                    *o += y;
                }
            }
            let rg = self.rg(a.0) || self.rg(b.0);
            let id = self.push(Op::BiasAdd { a: a.0, b: b.0 }, ar, ac, out, rg);
            return self.check(id, "add");
        }
        Err(CoreError::config(format!(
            "add shape mismatch: {}x{} + {}x{} (only same-shape or bias-add)",
            ar, ac, br, bc
        )))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> CoreResult<VarId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ar != br || ac != bc {
            return Err(CoreError::config(format!(
                "mul shape mismatch: {}x{} * {}x{}",
                ar, ac, br, bc
            )));
        }
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(a.0) || self.rg(b.0);
        let id = self.push(Op::Mul { a: a.0, b: b.0 }, ar, ac, out, rg);
        self.check(id, "mul")
    }

    /// Multiply by a compile-time constant scalar.
    pub fn scale(&mut self, a: VarId, c: f64) -> CoreResult<VarId> {
        let (r, n) = self.shape(a);
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        let rg = self.rg(a.0);
        let id = self.push(Op::Scale { a: a.0, c }, r, n, out, rg);
        self.check(id, "scale")
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> CoreResult<VarId> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn relu(&mut self, a: VarId) -> CoreResult<VarId> {
        let (r, n) = self.shape(a);
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x.max(0.0)).collect();
        let rg = self.rg(a.0);
        let id = self.push(Op::Relu { a: a.0 }, r, n, out, rg);
        self.check(id, "relu")
    }

    /// GELU with the tanh approximation:
    /// 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
    pub fn gelu(&mut self, a: VarId) -> CoreResult<VarId> {
        let (r, n) = self.shape(a);
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| gelu_fwd(x)).collect();
        let rg = self.rg(a.0);
        let id = self.push(Op::Gelu { a: a.0 }, r, n, out, rg);
        self.check(id, "gelu")
    }

    pub fn tanh(&mut self, a: VarId) -> CoreResult<VarId> {
        let (r, n) = self.shape(a);
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x.tanh()).collect();
        let rg = self.rg(a.0);
        let id = self.push(Op::Tanh { a: a.0 }, r, n, out, rg);
        self.check(id, "tanh")
    }

    pub fn exp(&mut self, a: VarId) -> CoreResult<VarId> {
        let (r, n) = self.shape(a);
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x.exp()).collect();
        let rg = self.rg(a.0);
        let id = self.push(Op::Exp { a: a.0 }, r, n, out, rg);
        self.check(id, "exp")
    }

    pub fn log(&mut self, a: VarId) -> CoreResult<VarId> {
        let (r, n) = self.shape(a);
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x.ln()).collect();
        let rg = self.rg(a.0);
        let id = self.push(Op::Log { a: a.0 }, r, n, out, rg);
        self.check(id, "log")
    }

    /// Softmax over the last dimension (per row), stabilized by max
    /// subtraction.
    pub fn softmax(&mut self, a: VarId) -> CoreResult<VarId> {
        let (r, n) = self.shape(a);
        let mut out = vec![0.0; r * n];
        for i in 0..r {
            let row = &self.nodes[a.0].value[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * n..(i + 1) * n];
            let mut s = 0.0;
            for (o, &x) in orow.iter_mut().zip(row) {
                *o = (x - mx).exp();
                s += *o;
            }
            for o in orow.iter_mut() {
                *o /= s;
            }
        }
        let rg = self.rg(a.0);
        let id = self.push(Op::Softmax { a: a.0 }, r, n, out, rg);
        self.check(id, "softmax")
    }

    /// LayerNorm over the last dimension with affine parameters.
    /// `gamma` and `beta` are 1 x cols. eps = 1e-5.
    pub fn layernorm(&mut self, a: VarId, gamma: VarId, beta: VarId) -> CoreResult<VarId> {
        let (r, n) = self.shape(a);
        if n < 2 {
            return Err(CoreError::config(
                "layernorm input last dim must be >= 2".to_string(),
            ));
        }
        let (gr, gc) = self.shape(gamma);
        let (br, bc) = self.shape(beta);
        if gr != 1 || gc != n || br != 1 || bc != n {
            return Err(CoreError::config(format!(
                "layernorm affine shape mismatch: gamma {}x{}, beta {}x{}, cols {}",
                gr, gc, br, bc, n
            )));
        }
        let mut out = vec![0.0; r * n];
        // aux layout: r per-row inverse stds, then r*n normalized values.
        let mut aux = vec![0.0; r + r * n];
        {
            let gv = &self.nodes[gamma.0].value;
            let bv = &self.nodes[beta.0].value;
            let xv = &self.nodes[a.0].value;
            let (inv_buf, xhat_buf) = aux.split_at_mut(r);
            for i in 0..r {
                let row = &xv[i * n..(i + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
                inv_buf[i] = inv;
                let xrow = &mut xhat_buf[i * n..(i + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    let xhat = (row[j] - mean) * inv;
                    xrow[j] = xhat;
                    orow[j] = xhat * gv[j] + bv[j];
                }
            }
        }
        let rg = self.rg(a.0) || self.rg(gamma.0) || self.rg(beta.0);
        let id = self.push(
            Op::LayerNorm {
                a: a.0,
                gamma: gamma.0,
                beta: beta.0,
            },
            r,
            n,
            out,
            rg,
        );
        self.nodes[id.0].aux = aux;
        self.check(id, "layernorm")
    }

    pub fn mean_all(&mut self, a: VarId) -> CoreResult<VarId> {
        let v = &self.nodes[a.0].value;
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a.0);
        let id = self.push(Op::MeanAll { a: a.0 }, 1, 1, vec![m], rg);
        self.check(id, "mean")
    }

    pub fn sum_all(&mut self, a: VarId) -> CoreResult<VarId> {
        let s = self.nodes[a.0].value.iter().sum::<f64>();
        let rg = self.rg(a.0);
        let id = self.push(Op::SumAll { a: a.0 }, 1, 1, vec![s], rg);
        self.check(id, "sum")
    }

    /// Column means: rows x cols -> 1 x cols.
    pub fn mean_rows(&mut self, a: VarId) -> CoreResult<VarId> {
        let (r, n) = self.shape(a);
        let mut out = vec![0.0; n];
        for i in 0..r {
            for j in 0..n {
                out[j] += self.nodes[a.0].value[i * n + j];
            }
        }
        for o in out.iter_mut() {
            *o /= r as f64;
        }
        let rg = self.rg(a.0);
        let id = self.push(Op::MeanRows { a: a.0 }, 1, n, out, rg);
        self.check(id, "mean")
    }

    /// Row sums: rows x cols -> rows x 1.
    pub fn sum_last(&mut self, a: VarId) -> CoreResult<VarId> {
        let (r, n) = self.shape(a);
        let mut out = vec![0.0; r];
        for i in 0..r {
            out[i] = self.nodes[a.0].value[i * n..(i + 1) * n].iter().sum();
        }
        let rg = self.rg(a.0);
        let id = self.push(Op::SumLast { a: a.0 }, r, 1, out, rg);
        self.check(id, "sum")
    }

    /// Mean squared error over all elements -> scalar.
    pub fn mse(&mut self, a: VarId, b: VarId) -> CoreResult<VarId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ar != br || ac != bc {
            return Err(CoreError::config(format!(
                "mse shape mismatch: {}x{} vs {}x{}",
                ar, ac, br, bc
            )));
        }
        let n = (ar * ac) as f64;
        let s: f64 = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(a.0) || self.rg(b.0);
        let id = self.push(Op::Mse { a: a.0, b: b.0 }, 1, 1, vec![s / n], rg);
        self.check(id, "mse")
    }

    /// Select rows by index; indices may repeat (backward scatter-adds).
    pub fn gather_rows(&mut self, a: VarId, idx: &[usize]) -> CoreResult<VarId> {
        let (r, n) = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(CoreError::config(format!(
                "gather-rows index {} out of bounds for {} rows",
                bad, r
            )));
        }
        let mut out = vec![0.0; idx.len() * n];
        for (k, &i) in idx.iter().enumerate() {
            out[k * n..(k + 1) * n].copy_from_slice(&self.nodes[a.0].value[i * n..(i + 1) * n]);
        }
        let rg = self.rg(a.0);
        let id = self.push(
            Op::GatherRows {
                a: a.0,
                idx: idx.to_vec(),
            },
            idx.len(),
            n,
            out,
            rg,
        );
        self.check(id, "gather-rows")
    }

    /// Concatenate along the last dimension. All parts share the row count.
    pub fn concat(&mut self, parts: &[VarId]) -> CoreResult<VarId> {
        if parts.is_empty() {
            return Err(CoreError::config("concat of zero parts".to_string()));
        }
        let (r, _) = self.shape(parts[0]);
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pr != r {
                return Err(CoreError::config(format!(
                    "concat row mismatch: {} vs {}",
                    pr, r
                )));
            }
            total += pc;
        }
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for &p in parts {
            let (_, pc) = self.shape(p);
            for i in 0..r {
                out[i * total + off..i * total + off + pc]
                    .copy_from_slice(&self.nodes[p.0].value[i * pc..(i + 1) * pc]);
            }
            off += pc;
        }
        let rg = parts.iter().any(|&p| self.rg(p.0));
        let id = self.push(
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            r,
            total,
            out,
            rg,
        );
        self.check(id, "concat")
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Run backpropagation from a scalar loss. Consumes the tape and
    /// returns gradients for every node that required them.
    pub fn backward(self, loss: VarId) -> CoreResult<TapeGrads> {
        let nodes = self.nodes;
        let ln = &nodes[loss.0];
        if ln.rows * ln.cols != 1 {
            return Err(CoreError::Usage(format!(
                "backward requires a scalar loss, got {}x{}",
                ln.rows, ln.cols
            )));
        }
        let n = nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            if grads[i].is_none() || !nodes[i].requires_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            let op = nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Matmul { a, b, tb } => {
                    let (m, _) = (nodes[i].rows, nodes[i].cols);
                    let k = if tb { nodes[b].cols } else { nodes[b].rows };
                    let nn = nodes[i].cols;
                    if nodes[a].requires_grad {
                        let ga = ensure(&mut grads, a, nodes[a].value.len());
                        if tb {
                            // dA = dC @ B
                            matmul_acc(&g, &nodes[b].value, ga, m, nn, k);
                        } else {
                            // dA = dC @ B^T
                            matmul_nt_acc(&g, &nodes[b].value, ga, m, nn, k);
                        }
                    }
                    if nodes[b].requires_grad {
                        let gb = ensure(&mut grads, b, nodes[b].value.len());
                        if tb {
                            // dB = dC^T @ A
                            matmul_tn_acc(&g, &nodes[a].value, gb, nn, m, k);
                        } else {
                            // dB = A^T @ dC
                            matmul_tn_acc(&nodes[a].value, &g, gb, k, m, nn);
                        }
                    }
                }
                Op::Add { a, b } => {
                    for &x in &[a, b] {
                        if nodes[x].requires_grad {
                            let gx = ensure(&mut grads, x, nodes[x].value.len());
                            for (o, gi) in gx.iter_mut().zip(&g) {
                                *o += gi;
                            }
                        }
                    }
                }
                Op::BiasAdd { a, b } => {
                    if nodes[a].requires_grad {
                        let gx = ensure(&mut grads, a, nodes[a].value.len());
                        for (o, gi) in gx.iter_mut().zip(&g) {
                            *o += gi;
                        }
                    }
                    if nodes[b].requires_grad {
                        let cols = nodes[b].cols;
                        let rows = nodes[i].rows;
                        let gb = ensure(&mut grads, b, cols);
                        for r in 0..rows {
                            for j in 0..cols {
                                gb[j] += g[r * cols + j];
                            }
                        }
                    }
                }
                Op::Mul { a, b } => {
                    if nodes[a].requires_grad {
                        let bv = &nodes[b].value;
                        let ga = ensure(&mut grads, a, nodes[a].value.len());
                        for ((o, gi), y) in ga.iter_mut().zip(&g).zip(bv) {
                            *o += gi * y;
                        }
                    }
                    if nodes[b].requires_grad {
                        let av = &nodes[a].value;
                        let gb = ensure(&mut grads, b, nodes[b].value.len());
                        for ((o, gi), x) in gb.iter_mut().zip(&g).zip(av) {
                            *o += gi * x;
                        }
                    }
                }
                Op::Scale { a, c } => {
                    if nodes[a].requires_grad {
                        let ga = ensure(&mut grads, a, nodes[a].value.len());
                        for (o, gi) in ga.iter_mut().zip(&g) {
                            *o += gi * c;
                        }
                    }
                }
                Op::Relu { a } => {
                    if nodes[a].requires_grad {
                        let av = &nodes[a].value;
                        let ga = ensure(&mut grads, a, av.len());
                        for ((o, gi), x) in ga.iter_mut().zip(&g).zip(av) {
                            if *x > 0.0 {
                                *o += gi;
                            }
                        }
                    }
                }
                Op::Gelu { a } => {
                    if nodes[a].requires_grad {
                        let av = &nodes[a].value;
                        let ga = ensure(&mut grads, a, av.len());
                        for ((o, gi), &x) in ga.iter_mut().zip(&g).zip(av) {
                            *o += gi * gelu_grad(x);
                        }
                    }
                }
                Op::Tanh { a } => {
                    if nodes[a].requires_grad {
                        let yv = &nodes[i].value;
                        let ga = ensure(&mut grads, a, yv.len());
                        for ((o, gi), y) in ga.iter_mut().zip(&g).zip(yv) {
                            *o += gi * (1.0 - y * y);
                        }
                    }
                }
                Op::Exp { a } => {
                    if nodes[a].requires_grad {
                        let yv = &nodes[i].value;
                        let ga = ensure(&mut grads, a, yv.len());
                        for ((o, gi), y) in ga.iter_mut().zip(&g).zip(yv) {
                            *o += gi * y;
                        }
                    }
                }
                Op::Log { a } => {
                    if nodes[a].requires_grad {
                        let av = &nodes[a].value;
                        let ga = ensure(&mut grads, a, av.len());
                        for ((o, gi), x) in ga.iter_mut().zip(&g).zip(av) {
                            *o += gi / x;
                        }
                    }
                }
                Op::Softmax { a } => {
                    if nodes[a].requires_grad {
                        let (r, c) = (nodes[i].rows, nodes[i].cols);
                        let yv = &nodes[i].value;
                        let ga = ensure(&mut grads, a, r * c);
                        for ri in 0..r {
                            let y = &yv[ri * c..(ri + 1) * c];
                            let gr = &g[ri * c..(ri + 1) * c];
                            let dot: f64 = y.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                            let out = &mut ga[ri * c..(ri + 1) * c];
                            for j in 0..c {
                                out[j] += y[j] * (gr[j] - dot);
                            }
                        }
                    }
                }
                Op::LayerNorm { a, gamma, beta } => {
                    let (r, c) = (nodes[i].rows, nodes[i].cols);
                    let (inv, xhat) = nodes[i].aux.split_at(r);
                    if nodes[beta].requires_grad {
                        let gb = ensure(&mut grads, beta, c);
                        for ri in 0..r {
                            for j in 0..c {
                                gb[j] += g[ri * c + j];
                            }
                        }
                    }
                    if nodes[gamma].requires_grad {
                        let gg = ensure(&mut grads, gamma, c);
                        for ri in 0..r {
                            for j in 0..c {
                                gg[j] += g[ri * c + j] * xhat[ri * c + j];
                            }
                        }
                    }
                    if nodes[a].requires_grad {
                        let gv = &nodes[gamma].value;
                        let mut dxhat = vec![0.0; c];
                        let mut local = vec![0.0; r * c];
                        for ri in 0..r {
                            let gr = &g[ri * c..(ri + 1) * c];
                            let xr = &xhat[ri * c..(ri + 1) * c];
                            for j in 0..c {
                                dxhat[j] = gr[j] * gv[j];
                            }
                            let m1: f64 = dxhat.iter().sum::<f64>() / c as f64;
                            let m2: f64 =
                                dxhat.iter().zip(xr).map(|(d, x)| d * x).sum::<f64>() / c as f64;
                            let out = &mut local[ri * c..(ri + 1) * c];
                            for j in 0..c {
                                out[j] = inv[ri] * (dxhat[j] - m1 - xr[j] * m2);
                            }
                        }
                        let ga = ensure(&mut grads, a, r * c);
                        for (o, v) in ga.iter_mut().zip(&local) {
                            *o += v;
                        }
                    }
                }
                Op::MeanAll { a } => {
                    if nodes[a].requires_grad {
                        let len = nodes[a].value.len();
                        let ga = ensure(&mut grads, a, len);
                        let gi = g[0] / len as f64;
                        for o in ga.iter_mut() {
                            *o += gi;
                        }
                    }
                }
                Op::SumAll { a } => {
                    if nodes[a].requires_grad {
                        let len = nodes[a].value.len();
                        let ga = ensure(&mut grads, a, len);
                        for o in ga.iter_mut() {
                            *o += g[0];
                        }
                    }
                }
                Op::MeanRows { a } => {
                    if nodes[a].requires_grad {
                        let (r, c) = (nodes[a].rows, nodes[a].cols);
                        let ga = ensure(&mut grads, a, r * c);
                        for ri in 0..r {
                            for j in 0..c {
                                ga[ri * c + j] += g[j] / r as f64;
                            }
                        }
                    }
                }
                Op::SumLast { a } => {
                    if nodes[a].requires_grad {
                        let (r, c) = (nodes[a].rows, nodes[a].cols);
                        let ga = ensure(&mut grads, a, r * c);
                        for ri in 0..r {
                            for j in 0..c {
                                ga[ri * c + j] += g[ri];
                            }
                        }
                    }
                }
                Op::Mse { a, b } => {
                    let n = nodes[a].value.len() as f64;
                    let diff: Vec<f64> = nodes[a]
                        .value
                        .iter()
                        .zip(&nodes[b].value)
                        .map(|(x, y)| x - y)
                        .collect();
                    if nodes[a].requires_grad {
                        let ga = ensure(&mut grads, a, diff.len());
                        for (o, d) in ga.iter_mut().zip(&diff) {
                            *o += g[0] * 2.0 * d / n;
                        }
                    }
                    if nodes[b].requires_grad {
                        let gb = ensure(&mut grads, b, diff.len());
                        for (o, d) in gb.iter_mut().zip(&diff) {
                            *o -= g[0] * 2.0 * d / n;
                        }
                    }
                }
                Op::GatherRows { a, idx } => {
                    if nodes[a].requires_grad {
                        let c = nodes[i].cols;
                        let ga = ensure(&mut grads, a, nodes[a].value.len());
                        for (k, &src) in idx.iter().enumerate() {
                            for j in 0..c {
                                ga[src * c + j] += g[k * c + j];
                            }
                        }
                    }
                }
                Op::Concat { parts } => {
                    let total = nodes[i].cols;
                    let rows = nodes[i].rows;
                    let mut off = 0;
                    for p in parts {
                        let pc = nodes[p].cols;
                        if nodes[p].requires_grad {
                            let gp = ensure(&mut grads, p, rows * pc);
                            for ri in 0..rows {
                                for j in 0..pc {
                                    gp[ri * pc + j] += g[ri * total + off + j];
                                }
                            }
                        }
                        off += pc;
                    }
                }
            }
        }
        Ok(TapeGrads { grads })
    }
}

fn ensure<'a>(grads: &'a mut [Option<Vec<f64>>], id: usize, len: usize) -> &'a mut Vec<f64> {
    if grads[id].is_none() {
        grads[id] = Some(vec![0.0; len]);
    }
    grads[id].as_mut().unwrap()
}

fn gelu_fwd(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = c * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = c * (x + GELU_COEF * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * c * (1.0 + 3.0 * GELU_COEF * x * x)
}

// ── Matmul kernels ───────────────────────────────────────────────────
//
// Register-blocked 4x16 tiles, compiled separately for AVX-512 / AVX2+FMA
// and dispatched once at runtime; the portable row-blocked ikj loop is the
// fallback and handles tile edges. All kernels accumulate into `c`.

#[derive(Clone, Copy, PartialEq, Eq)]
enum SimdLevel {
    Scalar,
    Avx2,
    Avx512,
}

fn simd_level() -> SimdLevel {
    static LEVEL: std::sync::OnceLock<SimdLevel> = std::sync::OnceLock::new();
    *LEVEL.get_or_init(|| {
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("avx512f") {
                return SimdLevel::Avx512;
            }
            if std::arch::is_x86_feature_detected!("avx2")
                && std::arch::is_x86_feature_detected!("fma")
            {
                return SimdLevel::Avx2;
            }
        }
        SimdLevel::Scalar
    })
}

/// c += a @ b, with a: m x k, b: k x n, c: m x n.
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    #[cfg(target_arch = "x86_64")]
    match simd_level() {
        SimdLevel::Avx512 => unsafe {
            return matmul_tiled_avx512(a, b, c, m, k, n);
        },
        SimdLevel::Avx2 => unsafe {
            return matmul_tiled_avx2(a, b, c, m, k, n);
        },
        SimdLevel::Scalar => {}
    }
    matmul_rows_portable(a, b, c, 0, m, 0, n, k);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn matmul_tiled_avx512(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    matmul_tiled_body(a, b, c, m, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2", enable = "fma")]
unsafe fn matmul_tiled_avx2(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    matmul_tiled_body(a, b, c, m, k, n);
}

/// 4x16 register tiles: 8 independent accumulator vectors keep the FMA
/// pipes busy; compiled under whichever feature set the caller enables.
#[inline(always)]
fn matmul_tiled_body(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    const MR: usize = 4;
    const NR: usize = 16;
    let m_main = m / MR * MR;
    let n_main = n / NR * NR;
    for ic in (0..m_main).step_by(MR) {
        for jc in (0..n_main).step_by(NR) {
            let mut acc = [[0.0f64; NR]; MR];
            for p in 0..k {
                let bvals: &[f64] = &b[p * n + jc..p * n + jc + NR];
                for (r, accr) in acc.iter_mut().enumerate() {
                    let av = a[(ic + r) * k + p];
                    for j in 0..NR {
                        accr[j] += av * bvals[j];
                    }
                }
            }
            for (r, accr) in acc.iter().enumerate() {
                let crow = &mut c[(ic + r) * n + jc..(ic + r) * n + jc + NR];
                for j in 0..NR {
                    crow[j] += accr[j];
                }
            }
        }
        // Column remainder for these rows.
        if n_main < n {
            matmul_rows_portable(a, b, c, ic, ic + MR, n_main, n, k);
        }
    }
    // Row remainder.
    if m_main < m {
        matmul_rows_portable(a, b, c, m_main, m, 0, n, k);
    }
}

/// Portable ikj over rows [row0, row1) and columns [col0, n) of C, where
/// n is the full row stride of B and C.
fn matmul_rows_portable(
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    row0: usize,
    row1: usize,
    col0: usize,
    n: usize,
    k: usize,
) {
    if col0 >= n {
        return;
    }
    for i in row0..row1 {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n + col0..(p + 1) * n];
            let crow = &mut c[i * n + col0..(i + 1) * n];
            for (o, bv) in crow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// c += a @ b^T, with a: m x k, b: n x k, c: m x n.
///
/// For more than a few output rows, transposing b and running the
/// row-streaming kernel beats the dot-product form (which cannot use wide
/// adds); the transpose is O(nk) against the O(mkn) product.
pub fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    if m >= 4 {
        let mut bt = vec![0.0; k * n];
        for j in 0..n {
            for p in 0..k {
                bt[p * n + j] = b[j * k + p];
            }
        }
        matmul_acc(a, &bt, c, m, k, n);
        return;
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            crow[j] += s;
        }
    }
}

/// c += a^T @ b, with a: k x m, b: k x n, c: m x n.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = t.leaf(2, 2, &[1.0, 2.0, 3.0, 4.0], false);
        let eye = t.leaf(2, 2, &[1.0, 0.0, 0.0, 1.0], false);
        let c = t.matmul(a, eye).unwrap();
        assert_eq!(t.value(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_config_error() {
        let mut t = Tape::new();
        let a = t.leaf(2, 3, &[0.0; 6], false);
        let b = t.leaf(2, 2, &[0.0; 4], false);
        assert!(matches!(t.matmul(a, b), Err(CoreError::Config(_))));
    }

    #[test]
    fn softmax_symmetry() {
        let mut t = Tape::new();
        let a = t.leaf(1, 2, &[0.0, 0.0], false);
        let s = t.softmax(a).unwrap();
        assert!((t.value(s)[0] - 0.5).abs() < 1e-15);
        assert!((t.value(s)[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn layernorm_constant_row_is_zero_pre_affine() {
        let mut t = Tape::new();
        let a = t.leaf(1, 3, &[2.5, 2.5, 2.5], false);
        let g = t.leaf(1, 3, &[1.0, 1.0, 1.0], false);
        let b = t.leaf(1, 3, &[0.0, 0.0, 0.0], false);
        let y = t.layernorm(a, g, b).unwrap();
        for v in t.value(y) {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn layernorm_row_stats() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..20 {
            let data: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mean_in = data.iter().sum::<f64>() / 8.0;
            let var_in = data.iter().map(|x| (x - mean_in).powi(2)).sum::<f64>() / 8.0;
            let mut t = Tape::new();
            let a = t.leaf(1, 8, &data, false);
            let g = t.leaf(1, 8, &[1.0; 8], false);
            let b = t.leaf(1, 8, &[0.0; 8], false);
            let y = t.layernorm(a, g, b).unwrap();
            let out = t.value(y);
            let mean: f64 = out.iter().sum::<f64>() / 8.0;
            let var: f64 = out.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 8.0;
            // Output variance equals var/(var+eps): unit variance under the
            // eps-stabilized normalizer.
            let target = var_in / (var_in + LAYERNORM_EPS);
            assert!(mean.abs() < 1e-6);
            assert!((var - target).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_square() {
        // loss = x * x at x = 3 -> grad 6
        let mut t = Tape::new();
        let x = t.leaf(1, 1, &[3.0], true);
        let y = t.mul(x, x).unwrap();
        let grads = t.backward(y).unwrap();
        assert!((grads.get(x).unwrap()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn backward_mse_linear() {
        // loss = mse(w*x, y) with w=1, x=2, y=0 -> grad_w = 8
        let mut t = Tape::new();
        let w = t.leaf(1, 1, &[1.0], true);
        let x = t.leaf(1, 1, &[2.0], false);
        let y = t.leaf(1, 1, &[0.0], false);
        let p = t.mul(w, x).unwrap();
        let loss = t.mse(p, y).unwrap();
        let grads = t.backward(loss).unwrap();
        assert!((grads.get(w).unwrap()[0] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let x = t.leaf(1, 2, &[1.0, 2.0], true);
        let y = t.scale(x, 2.0).unwrap();
        assert!(matches!(t.backward(y), Err(CoreError::Usage(_))));
    }

    #[test]
    fn non_finite_output_names_op() {
        let mut t = Tape::new();
        let x = t.leaf(1, 1, &[-1.0], false);
        match t.log(x) {
            Err(CoreError::Numeric { op, .. }) => assert_eq!(op, "log"),
            other => panic!("expected numeric error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn forward_is_stateless_replay() {
        // Running the same graph twice yields identical outputs.
        let build = || {
            let mut t = Tape::new();
            let x = t.leaf(2, 3, &[0.3, -1.2, 0.7, 2.0, -0.5, 1.1], false);
            let y = t.gelu(x).unwrap();
            let s = t.softmax(y).unwrap();
            t.value(s).to_vec()
        };
        assert_eq!(build(), build());
    }

    // ── Finite-difference oracle ─────────────────────────────────────
    //
    // The oracle builds the same graph twice per perturbed coordinate and
    // compares the analytic gradient against the central difference. It is
    // independent of the backward implementation.

    fn fd_check<F>(build: F, inputs: &[Vec<f64>], h: f64, tol: f64)
    where
        F: Fn(&mut Tape, &[Vec<f64>]) -> (VarId, Vec<VarId>),
    {
        let mut tape = Tape::new();
        let (loss, leaves) = build(&mut tape, inputs);
        let analytic: Vec<Vec<f64>> = {
            let grads = tape.backward(loss).unwrap();
            leaves
                .iter()
                .map(|&l| grads.get(l).map(|g| g.to_vec()).unwrap_or_default())
                .collect()
        };
        // Inputs beyond the leaf list (targets, constants) are not checked,
        // nor are input coordinates a leaf does not consume.
        for pi in 0..analytic.len() {
            for ci in 0..analytic[pi].len() {
                let mut plus = inputs.to_vec();
                plus[pi][ci] += h;
                let mut minus = inputs.to_vec();
                minus[pi][ci] -= h;
                let mut tp = Tape::new();
                let (lp, _) = build(&mut tp, &plus);
                let fp = tp.scalar_value(lp);
                let mut tm = Tape::new();
                let (lm, _) = build(&mut tm, &minus);
                let fm = tm.scalar_value(lm);
                let fd = (fp - fm) / (2.0 * h);
                let an = analytic[pi][ci];
                assert!(
                    rel_err(an, fd) < tol,
                    "param {pi} coord {ci}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn gradcheck_primitives_100_seeds() {
        // Each primitive wrapped into a scalar loss; analytic vs central
        // finite differences (h = 1e-5) within relative error 1e-4.
        for seed in 0..100u64 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
            let w: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let gamma: Vec<f64> = (0..4).map(|_| rng.random_range(0.5..1.5)).collect();
            let beta: Vec<f64> = (0..4).map(|_| rng.random_range(-0.5..0.5)).collect();

            // matmul + bias-add + relu + mse
            fd_check(
                |t, inp| {
                    let x = t.leaf(3, 4, &inp[0], true);
                    let wt = t.leaf(4, 3, &inp[1], true);
                    let bb = t.leaf(1, 3, &inp[2][..3], true);
                    let m = t.matmul(x, wt).unwrap();
                    let m = t.add(m, bb).unwrap();
                    let r = t.relu(m).unwrap();
                    let tgt = t.leaf(3, 3, &inp[3][..9], false);
                    let loss = t.mse(r, tgt).unwrap();
                    (loss, vec![x, wt, bb])
                },
                &[a.clone(), w.clone(), b.clone(), b.clone()],
                1e-5,
                1e-4,
            );

            // gelu, tanh, exp-of-tanh, log-of-positive, softmax, layernorm
            fd_check(
                |t, inp| {
                    let x = t.leaf(3, 4, &inp[0], true);
                    let g = t.gelu(x).unwrap();
                    let th = t.tanh(g).unwrap();
                    let e = t.exp(th).unwrap();
                    let l = t.log(e).unwrap();
                    let s = t.softmax(l).unwrap();
                    let ga = t.leaf(1, 4, &inp[1][..4], true);
                    let be = t.leaf(1, 4, &inp[2][..4], true);
                    let ln = t.layernorm(s, ga, be).unwrap();
                    let loss = t.mean_all(ln).unwrap();
                    (loss, vec![x, ga, be])
                },
                &[a.clone(), gamma.clone(), beta.clone()],
                1e-5,
                1e-4,
            );

            // gather/concat/sums/mul/scale/matmul_nt
            fd_check(
                |t, inp| {
                    let x = t.leaf(3, 4, &inp[0], true);
                    let y = t.leaf(3, 4, &inp[1], true);
                    let q = t.matmul_nt(x, y).unwrap(); // 3x3
                    let m = t.mul(x, y).unwrap();
                    let gathered = t.gather_rows(m, &[0, 2, 2]).unwrap();
                    let cat = t.concat(&[q, gathered]).unwrap(); // 3x7
                    let sc = t.scale(cat, 0.3).unwrap();
                    let sl = t.sum_last(sc).unwrap();
                    let mr = t.mean_rows(sl).unwrap();
                    let loss = t.sum_all(mr).unwrap();
                    (loss, vec![x, y])
                },
                &[a.clone(), b.clone()],
                1e-5,
                1e-4,
            );
        }
    }

    #[test]
    fn gradcheck_random_mlp() {
        // Random MLP 4 -> 8 -> 2 with relu; analytic vs central differences.
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w1: Vec<f64> = (0..32).map(|_| rng.random_range(-0.7..0.7)).collect();
        let b1: Vec<f64> = (0..8).map(|_| rng.random_range(-0.2..0.2)).collect();
        let w2: Vec<f64> = (0..16).map(|_| rng.random_range(-0.7..0.7)).collect();
        let b2: Vec<f64> = (0..2).map(|_| rng.random_range(-0.2..0.2)).collect();
        let tgt: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        fd_check(
            |t, inp| {
                let x = t.leaf(1, 4, &inp[0], true);
                let w1 = t.leaf(4, 8, &inp[1], true);
                let b1 = t.leaf(1, 8, &inp[2], true);
                let w2 = t.leaf(8, 2, &inp[3], true);
                let b2 = t.leaf(1, 2, &inp[4], true);
                let h = t.matmul(x, w1).unwrap();
                let h = t.add(h, b1).unwrap();
                let h = t.relu(h).unwrap();
                let o = t.matmul(h, w2).unwrap();
                let o = t.add(o, b2).unwrap();
                let tg = t.leaf(1, 2, &inp[5], false);
                let loss = t.mse(o, tg).unwrap();
                (loss, vec![x, w1, b1, w2, b2])
            },
            &[x, w1, b1, w2, b2, tgt],
            1e-5,
            1e-4,
        );
    }
}
