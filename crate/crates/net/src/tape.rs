//! Reverse-mode differentiation over a small fixed set of dense 2D ops.
//!
//! Every tensor is a row-major `rows x cols` matrix of `f64`. A [`Tape`]
//! records values in creation order; [`Tape::backward`] walks it in reverse.

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data does not match shape");
        Tensor { rows, cols, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `a b`
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul inner dimensions differ");
    let mut out = Tensor::zeros(a.rows, b.cols);
    let m = b.cols;
    for i in 0..a.rows {
        let orow = &mut out.data[i * m..(i + 1) * m];
        for k in 0..a.cols {
            let av = a.data[i * a.cols + k];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[k * m..(k + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a b^T`
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols, "matmul_nt inner dimensions differ");
    let mut out = Tensor::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            let br = b.row(j);
            out.data[i * b.rows + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a^T b`
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows, "matmul_tn inner dimensions differ");
    let mut out = Tensor::zeros(a.cols, b.cols);
    let m = b.cols;
    for k in 0..a.rows {
        let brow = b.row(k);
        for i in 0..a.cols {
            let av = a.data[k * a.cols + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * m..(i + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub type Var = usize;

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    ConcatRows(Var, Var),
    SliceRows(Var, usize),
    AddToRow(Var, Var, usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation. Parameters enter through [`Tape::param`] and are
/// identified by their store index.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v].value
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, index: usize, value: &Tensor) -> Var {
        self.push(value.clone(), Op::Param(index))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!((bv.rows, bv.cols), (1, av.cols), "bias shape");
        let mut out = av.clone();
        for r in 0..out.rows {
            for (o, x) in out.data[r * out.cols..(r + 1) * out.cols].iter_mut().zip(&bv.data) {
                *o += x;
            }
        }
        self.push(out, Op::AddBias(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add shapes differ");
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x *= s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x = gelu(*x));
        self.push(out, Op::Gelu(a))
    }

    /// Per-row normalization followed by the affine `gamma`, `beta` (both `1 x cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        let mut out = Tensor::zeros(n, d);
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out.data[r * d + c] = h * g[c] + b[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Multi-head scaled dot-product attention of queries `q` (`n x d`) over
    /// keys `k` and values `v` (`m x d`); heads split the columns evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.shape();
        let m = kv.rows;
        assert!(heads > 0 && d % heads == 0, "heads must divide width");
        assert_eq!((kv.cols, vv.rows, vv.cols), (d, m, d), "attention shapes");
        let dh = d / heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(n, d);
        let mut probs = vec![0.0; heads * n * m];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let p = &mut probs[(h * n + i) * m..(h * n + i + 1) * m];
                let qi = &qv.data[i * d + off..i * d + off + dh];
                let mut mx = f64::NEG_INFINITY;
                for j in 0..m {
                    let kj = &kv.data[j * d + off..j * d + off + dh];
                    let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * inv;
                    p[j] = s;
                    mx = mx.max(s);
                }
                let mut z = 0.0;
                for pj in p.iter_mut() {
                    *pj = (*pj - mx).exp();
                    z += *pj;
                }
                for pj in p.iter_mut() {
                    *pj /= z;
                }
                let orow = &mut out.data[i * d + off..i * d + off + dh];
                for j in 0..m {
                    let vj = &vv.data[j * d + off..j * d + off + dh];
                    for (o, x) in orow.iter_mut().zip(vj) {
                        *o += p[j] * x;
                    }
                }
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        )
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.cols, "concat widths differ");
        let mut data = av.data.clone();
        data.extend_from_slice(&bv.data);
        let out = Tensor::from_vec(av.rows + bv.rows, av.cols, data);
        self.push(out, Op::ConcatRows(a, b))
    }

    /// Rows `start..start + len` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.rows, "row slice out of range");
        let out = Tensor::from_vec(
            len,
            av.cols,
            av.data[start * av.cols..(start + len) * av.cols].to_vec(),
        );
        self.push(out, Op::SliceRows(a, start))
    }

    /// Adds the `1 x cols` tensor `b` to row `row` of `a`.
    pub fn add_to_row(&mut self, a: Var, b: Var, row: usize) -> Var {
        let mut out = self.value(a).clone();
        let bv = self.value(b);
        assert_eq!((bv.rows, bv.cols), (1, out.cols), "row addend shape");
        for (o, x) in out.data[row * out.cols..(row + 1) * out.cols].iter_mut().zip(&bv.data) {
            *o += x;
        }
        self.push(out, Op::AddToRow(a, b, row))
    }

    /// Propagates the seeded output gradients back through the tape.
    /// Returns one optional gradient per node.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Vec<Option<Tensor>> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.value(*v).shape(), "seed shape");
            accumulate(&mut grads, *v, g.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[idx].op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let da = matmul_nt(g, self.value(*b));
                let db = matmul_tn(self.value(*a), g);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::AddBias(a, b) => {
                let mut db = Tensor::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (d, x) in db.data.iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Scale(a, s) => {
                let mut d = g.clone();
                d.data.iter_mut().for_each(|x| *x *= s);
                accumulate(grads, *a, d);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                for (o, xv) in d.data.iter_mut().zip(&x.data) {
                    *o *= gelu_grad(*xv);
                }
                accumulate(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (n, d) = g.shape();
                let gam = &self.value(*gamma).data;
                let mut dx = Tensor::zeros(n, d);
                let mut dg = Tensor::zeros(1, d);
                let mut db = Tensor::zeros(1, d);
                for r in 0..n {
                    let gr = g.row(r);
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_xh = 0.0;
                    for c in 0..d {
                        let dh = gr[c] * gam[c];
                        sum_dh += dh;
                        sum_dh_xh += dh * xh[c];
                        dg.data[c] += gr[c] * xh[c];
                        db.data[c] += gr[c];
                    }
                    let k = rstd[r] / d as f64;
                    for c in 0..d {
                        let dh = gr[c] * gam[c];
                        dx.data[r * d + c] = k * (d as f64 * dh - sum_dh - xh[c] * sum_dh_xh);
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gamma, dg);
                accumulate(grads, *beta, db);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, d) = qv.shape();
                let m = kv.rows;
                let dh = d / heads;
                let inv = 1.0 / (dh as f64).sqrt();
                let mut dq = Tensor::zeros(n, d);
                let mut dk = Tensor::zeros(m, d);
                let mut dv = Tensor::zeros(m, d);
                let mut dp = vec![0.0; m];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..n {
                        let p = &probs[(h * n + i) * m..(h * n + i + 1) * m];
                        let go = &g.data[i * d + off..i * d + off + dh];
                        let mut dot = 0.0;
                        for j in 0..m {
                            let vj = &vv.data[j * d + off..j * d + off + dh];
                            dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                            dot += dp[j] * p[j];
                            let dvj = &mut dv.data[j * d + off..j * d + off + dh];
                            for (o, x) in dvj.iter_mut().zip(go) {
                                *o += p[j] * x;
                            }
                        }
                        let qi = &qv.data[i * d + off..i * d + off + dh];
                        for j in 0..m {
                            let ds = p[j] * (dp[j] - dot) * inv;
                            if ds == 0.0 {
                                continue;
                            }
                            let kj = &kv.data[j * d + off..j * d + off + dh];
                            let dqi = &mut dq.data[i * d + off..i * d + off + dh];
                            for (o, x) in dqi.iter_mut().zip(kj) {
                                *o += ds * x;
                            }
                            let dkj = &mut dk.data[j * d + off..j * d + off + dh];
                            for (o, x) in dkj.iter_mut().zip(qi) {
                                *o += ds * x;
                            }
                        }
                    }
                }
                accumulate(grads, *q, dq);
                accumulate(grads, *k, dk);
                accumulate(grads, *v, dv);
            }
            Op::ConcatRows(a, b) => {
                let ra = self.value(*a).rows;
                let c = g.cols;
                accumulate(grads, *a, Tensor::from_vec(ra, c, g.data[..ra * c].to_vec()));
                accumulate(
                    grads,
                    *b,
                    Tensor::from_vec(g.rows - ra, c, g.data[ra * c..].to_vec()),
                );
            }
            Op::SliceRows(a, start) => {
                let av = self.value(*a);
                let mut d = Tensor::zeros(av.rows, av.cols);
                d.data[start * av.cols..start * av.cols + g.data.len()].copy_from_slice(&g.data);
                accumulate(grads, *a, d);
            }
            Op::AddToRow(a, b, row) => {
                let db = Tensor::from_vec(1, g.cols, g.row(*row).to_vec());
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, db);
            }
        }
    }

    /// Parameter-store index of every parameter leaf, with its node.
    pub fn param_leaves(&self) -> impl Iterator<Item = (Var, usize)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(v, n)| match n.op {
            Op::Param(i) => Some((v, i)),
            _ => None,
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
