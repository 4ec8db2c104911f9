//! Minimal reverse-mode automatic differentiation over dense f64 matrices.
//!
//! Values are computed eagerly when an op is recorded; `backward` walks the
//! tape in reverse and accumulates gradients into leaf nodes. The op set is
//! exactly what the coding model and its losses need.

use ndarray::{s, Array2, Axis};

pub type Id = usize;

const PROB_EPS: f64 = 1e-7;
const NORM_EPS: f64 = 1e-12;
const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf { requires_grad: bool },
    Add(Id, Id),
    /// `a` (n x d) plus a broadcast row vector (1 x d).
    AddRow(Id, Id),
    Scale(Id, f64),
    MatMul(Id, Id),
    /// a . b^T
    MatMulBT(Id, Id),
    ElemMul(Id, Id),
    Relu(Id),
    Sigmoid(Id),
    SoftmaxRows(Id),
    LayerNormRows { x: Id, gain: Id, bias: Id },
    Gather { table: Id, indices: Vec<usize> },
    ConcatRows(Vec<Id>),
    SliceCols { x: Id, start: usize, end: usize },
    ConcatCols(Vec<Id>),
    /// Mask is pre-scaled by 1/(1-p); entries are 0 or 1/(1-p).
    Dropout { x: Id, mask: Array2<f64> },
    /// n x d -> n x 1 row sums.
    SumRows(Id),
    /// Mean binary cross-entropy of a probability column against 0/1 targets.
    Bce { probs: Id, targets: Array2<f64> },
    /// Mean over masked rows of (1 - cosine(a_i, b_i)); zero if mask empty.
    /// With `flatten`, one cosine over the masked rows stacked into a single
    /// vector instead of a per-row mean.
    MaskedCosine {
        a: Id,
        b: Id,
        mask: Vec<bool>,
        flatten: bool,
    },
    /// Halved symmetric Bernoulli KL averaged over entries of two prob columns.
    SymKl { p: Id, q: Id },
    /// Scalar combination sum_k coeff_k * x_k of 1x1 nodes.
    WeightedSum(Vec<(Id, f64)>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn value(&self, id: Id) -> &Array2<f64> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: Id) -> f64 {
        debug_assert_eq!(self.nodes[id].value.dim(), (1, 1));
        self.nodes[id].value[(0, 0)]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Id {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    /// Leaf that receives a gradient (a model parameter).
    pub fn param(&mut self, value: Array2<f64>) -> Id {
        self.push(value, Op::Leaf { requires_grad: true })
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Array2<f64>) -> Id {
        self.push(value, Op::Leaf { requires_grad: false })
    }

    pub fn add(&mut self, a: Id, b: Id) -> Id {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Id, row: Id) -> Id {
        let v = &self.nodes[a].value + &self.nodes[row].value;
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Id, factor: f64) -> Id {
        let v = &self.nodes[a].value * factor;
        self.push(v, Op::Scale(a, factor))
    }

    pub fn matmul(&mut self, a: Id, b: Id) -> Id {
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_bt(&mut self, a: Id, b: Id) -> Id {
        let v = self.nodes[a].value.dot(&self.nodes[b].value.t());
        self.push(v, Op::MatMulBT(a, b))
    }

    pub fn elem_mul(&mut self, a: Id, b: Id) -> Id {
        let v = &self.nodes[a].value * &self.nodes[b].value;
        self.push(v, Op::ElemMul(a, b))
    }

    pub fn relu(&mut self, a: Id) -> Id {
        let v = self.nodes[a].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Id) -> Id {
        let v = self.nodes[a].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Id) -> Id {
        let x = &self.nodes[a].value;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|e| (e - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|e| e / sum);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Row-wise layer normalization with learnable 1 x d gain and bias.
    pub fn layer_norm_rows(&mut self, x: Id, gain: Id, bias: Id) -> Id {
        let xv = &self.nodes[x].value;
        let g = &self.nodes[gain].value;
        let b = &self.nodes[bias].value;
        let d = xv.ncols() as f64;
        let mut v = Array2::zeros(xv.raw_dim());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / d;
            let var = row.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / d;
            let sd = (var + LN_EPS).sqrt();
            for (j, e) in row.iter().enumerate() {
                v[(i, j)] = g[(0, j)] * (e - mean) / sd + b[(0, j)];
            }
        }
        self.push(v, Op::LayerNormRows { x, gain, bias })
    }

    pub fn gather(&mut self, table: Id, indices: &[usize]) -> Id {
        let t = &self.nodes[table].value;
        let mut v = Array2::zeros((indices.len(), t.ncols()));
        for (i, &idx) in indices.iter().enumerate() {
            v.row_mut(i).assign(&t.row(idx));
        }
        self.push(
            v,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Id]) -> Id {
        assert!(!parts.is_empty());
        let cols = self.nodes[parts[0]].value.ncols();
        let rows: usize = parts.iter().map(|&p| self.nodes[p].value.nrows()).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let pv = &self.nodes[p].value;
            v.slice_mut(s![at..at + pv.nrows(), ..]).assign(pv);
            at += pv.nrows();
        }
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Id, start: usize, end: usize) -> Id {
        let v = self.nodes[x].value.slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols { x, start, end })
    }

    pub fn concat_cols(&mut self, parts: &[Id]) -> Id {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0]].value.nrows();
        let cols: usize = parts.iter().map(|&p| self.nodes[p].value.ncols()).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let pv = &self.nodes[p].value;
            v.slice_mut(s![.., at..at + pv.ncols()]).assign(pv);
            at += pv.ncols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// `mask` entries must be 0 or 1/(1-p) (inverted dropout).
    pub fn dropout(&mut self, x: Id, mask: Array2<f64>) -> Id {
        let v = &self.nodes[x].value * &mask;
        self.push(v, Op::Dropout { x, mask })
    }

    pub fn sum_rows(&mut self, x: Id) -> Id {
        let xv = &self.nodes[x].value;
        let v = xv
            .sum_axis(Axis(1))
            .into_shape((xv.nrows(), 1))
            .expect("column shape");
        self.push(v, Op::SumRows(x))
    }

    pub fn bce(&mut self, probs: Id, targets: Array2<f64>) -> Id {
        let p = &self.nodes[probs].value;
        assert_eq!(p.dim(), targets.dim());
        let c = p.nrows() as f64;
        let mut loss = 0.0;
        for (pi, ti) in p.iter().zip(targets.iter()) {
            let pc = clamp_prob(*pi);
            loss -= ti * pc.ln() + (1.0 - ti) * (1.0 - pc).ln();
        }
        loss /= c;
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::Bce { probs, targets },
        )
    }

    pub fn masked_cosine(&mut self, a: Id, b: Id, mask: Vec<bool>, flatten: bool) -> Id {
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        assert_eq!(av.dim(), bv.dim());
        assert_eq!(mask.len(), av.nrows());
        let m = mask.iter().filter(|&&x| x).count();
        let mut loss = 0.0;
        if m > 0 && flatten {
            let mut dot = 0.0;
            let mut sa = 0.0;
            let mut sb = 0.0;
            for (i, &on) in mask.iter().enumerate() {
                if !on {
                    continue;
                }
                let ar = av.row(i);
                let br = bv.row(i);
                dot += ar.dot(&br);
                sa += ar.dot(&ar);
                sb += br.dot(&br);
            }
            let na = sa.sqrt().max(NORM_EPS);
            let nb = sb.sqrt().max(NORM_EPS);
            loss = 1.0 - dot / (na * nb);
        } else if m > 0 {
            for (i, &on) in mask.iter().enumerate() {
                if !on {
                    continue;
                }
                let ar = av.row(i);
                let br = bv.row(i);
                let na = ar.dot(&ar).sqrt().max(NORM_EPS);
                let nb = br.dot(&br).sqrt().max(NORM_EPS);
                loss += 1.0 - ar.dot(&br) / (na * nb);
            }
            loss /= m as f64;
        }
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::MaskedCosine { a, b, mask, flatten },
        )
    }

    pub fn sym_kl(&mut self, p: Id, q: Id) -> Id {
        let pv = &self.nodes[p].value;
        let qv = &self.nodes[q].value;
        assert_eq!(pv.dim(), qv.dim());
        let c = pv.nrows() as f64;
        let mut loss = 0.0;
        for (pi, qi) in pv.iter().zip(qv.iter()) {
            let a = clamp_prob(*pi);
            let b = clamp_prob(*qi);
            let kl_ab = a * (a / b).ln() + (1.0 - a) * ((1.0 - a) / (1.0 - b)).ln();
            let kl_ba = b * (b / a).ln() + (1.0 - b) * ((1.0 - b) / (1.0 - a)).ln();
            loss += kl_ab + kl_ba;
        }
        loss /= 2.0 * c;
        self.push(Array2::from_elem((1, 1), loss), Op::SymKl { p, q })
    }

    pub fn weighted_sum(&mut self, terms: &[(Id, f64)]) -> Id {
        let mut total = 0.0;
        for &(id, coeff) in terms {
            total += coeff * self.scalar(id);
        }
        self.push(Array2::from_elem((1, 1), total), Op::WeightedSum(terms.to_vec()))
    }

    /// Gradients of the scalar at `root` with respect to every node.
    /// Entries stay `None` for nodes the root does not depend on.
    pub fn backward(&self, root: Id) -> Vec<Option<Array2<f64>>> {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=root).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf { .. } => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRow(a, row) => {
                    let row_grad = g
                        .sum_axis(Axis(0))
                        .into_shape((1, g.ncols()))
                        .expect("row shape");
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *row, row_grad);
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, &g * *f),
                Op::MatMul(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    accumulate(&mut grads, *a, g.dot(&bv.t()));
                    accumulate(&mut grads, *b, av.t().dot(&g));
                }
                Op::MatMulBT(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    accumulate(&mut grads, *a, g.dot(bv));
                    accumulate(&mut grads, *b, g.t().dot(av));
                }
                Op::ElemMul(a, b) => {
                    let av = self.nodes[*a].value.clone();
                    let bv = self.nodes[*b].value.clone();
                    accumulate(&mut grads, *a, &g * &bv);
                    accumulate(&mut grads, *b, &g * &av);
                }
                Op::Relu(a) => {
                    let mask = self.nodes[*a].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut grads, *a, &g * &mask);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let dy = y.mapv(|v| v * (1.0 - v));
                    accumulate(&mut grads, *a, &g * &dy);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut gx = Array2::zeros(y.raw_dim());
                    for r in 0..y.nrows() {
                        let dot: f64 = y
                            .row(r)
                            .iter()
                            .zip(g.row(r).iter())
                            .map(|(yi, gi)| yi * gi)
                            .sum();
                        for c in 0..y.ncols() {
                            gx[(r, c)] = y[(r, c)] * (g[(r, c)] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, gx);
                }
                Op::LayerNormRows { x, gain, bias } => {
                    let xv = &self.nodes[*x].value;
                    let gv = &self.nodes[*gain].value;
                    let d = xv.ncols() as f64;
                    let mut gx = Array2::zeros(xv.raw_dim());
                    let mut ggain = Array2::zeros((1, xv.ncols()));
                    let mut gbias = Array2::zeros((1, xv.ncols()));
                    for r in 0..xv.nrows() {
                        let row = xv.row(r);
                        let mean = row.sum() / d;
                        let var = row.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / d;
                        let sd = (var + LN_EPS).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|e| (e - mean) / sd).collect();
                        let dxhat: Vec<f64> =
                            (0..xv.ncols()).map(|c| g[(r, c)] * gv[(0, c)]).collect();
                        let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / d;
                        let mean_dxhat_xhat: f64 = dxhat
                            .iter()
                            .zip(xhat.iter())
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / d;
                        for c in 0..xv.ncols() {
                            gx[(r, c)] =
                                (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat) / sd;
                            ggain[(0, c)] += g[(r, c)] * xhat[c];
                            gbias[(0, c)] += g[(r, c)];
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gain, ggain);
                    accumulate(&mut grads, *bias, gbias);
                }
                Op::Gather { table, indices } => {
                    let tv = &self.nodes[*table].value;
                    let mut gt = Array2::zeros(tv.raw_dim());
                    for (r, &idx) in indices.iter().enumerate() {
                        let mut dst = gt.row_mut(idx);
                        dst += &g.row(r);
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let n = self.nodes[p].value.nrows();
                        let gp = g.slice(s![at..at + n, ..]).to_owned();
                        accumulate(&mut grads, p, gp);
                        at += n;
                    }
                }
                Op::SliceCols { x, start, end } => {
                    let xv = &self.nodes[*x].value;
                    let mut gx = Array2::zeros(xv.raw_dim());
                    gx.slice_mut(s![.., *start..*end]).assign(&g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let n = self.nodes[p].value.ncols();
                        let gp = g.slice(s![.., at..at + n]).to_owned();
                        accumulate(&mut grads, p, gp);
                        at += n;
                    }
                }
                Op::Dropout { x, mask } => {
                    accumulate(&mut grads, *x, &g * mask);
                }
                Op::SumRows(x) => {
                    let xv = &self.nodes[*x].value;
                    let mut gx = Array2::zeros(xv.raw_dim());
                    for r in 0..xv.nrows() {
                        let gr = g[(r, 0)];
                        gx.row_mut(r).fill(gr);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Bce { probs, targets } => {
                    let pv = &self.nodes[*probs].value;
                    let c = pv.nrows() as f64;
                    let gs = g[(0, 0)];
                    let mut gp = Array2::zeros(pv.raw_dim());
                    for (idx, (pi, ti)) in pv.iter().zip(targets.iter()).enumerate() {
                        // zero gradient where the clamp is active
                        if *pi > PROB_EPS && *pi < 1.0 - PROB_EPS {
                            let r = idx / pv.ncols();
                            let cc = idx % pv.ncols();
                            gp[(r, cc)] = gs * (-(ti / pi) + (1.0 - ti) / (1.0 - pi)) / c;
                        }
                    }
                    accumulate(&mut grads, *probs, gp);
                }
                Op::MaskedCosine { a, b, mask, flatten } => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let m = mask.iter().filter(|&&x| x).count();
                    if m == 0 {
                        continue;
                    }
                    let mut ga = Array2::zeros(av.raw_dim());
                    let mut gb = Array2::zeros(bv.raw_dim());
                    if *flatten {
                        let gs = g[(0, 0)];
                        let mut dot = 0.0;
                        let mut sa = 0.0;
                        let mut sb = 0.0;
                        for (r, &on) in mask.iter().enumerate() {
                            if !on {
                                continue;
                            }
                            dot += av.row(r).dot(&bv.row(r));
                            sa += av.row(r).dot(&av.row(r));
                            sb += bv.row(r).dot(&bv.row(r));
                        }
                        let na = sa.sqrt().max(NORM_EPS);
                        let nb = sb.sqrt().max(NORM_EPS);
                        let cosv = dot / (na * nb);
                        for (r, &on) in mask.iter().enumerate() {
                            if !on {
                                continue;
                            }
                            for c in 0..av.ncols() {
                                ga[(r, c)] = -gs
                                    * (bv[(r, c)] / (na * nb) - cosv * av[(r, c)] / (na * na));
                                gb[(r, c)] = -gs
                                    * (av[(r, c)] / (na * nb) - cosv * bv[(r, c)] / (nb * nb));
                            }
                        }
                    } else {
                        let gs = g[(0, 0)] / m as f64;
                        for (r, &on) in mask.iter().enumerate() {
                            if !on {
                                continue;
                            }
                            let ar = av.row(r);
                            let br = bv.row(r);
                            let na = ar.dot(&ar).sqrt().max(NORM_EPS);
                            let nb = br.dot(&br).sqrt().max(NORM_EPS);
                            let dot = ar.dot(&br);
                            let cosv = dot / (na * nb);
                            for c in 0..av.ncols() {
                                // d(1-cos)/da_c = -(b_c/(na*nb) - cos * a_c / na^2)
                                ga[(r, c)] =
                                    -gs * (br[c] / (na * nb) - cosv * ar[c] / (na * na));
                                gb[(r, c)] =
                                    -gs * (ar[c] / (na * nb) - cosv * br[c] / (nb * nb));
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::SymKl { p, q } => {
                    let pv = &self.nodes[*p].value;
                    let qv = &self.nodes[*q].value;
                    let c = pv.nrows() as f64;
                    let gs = g[(0, 0)] / (2.0 * c);
                    let mut gp = Array2::zeros(pv.raw_dim());
                    let mut gq = Array2::zeros(qv.raw_dim());
                    for idx in 0..pv.len() {
                        let r = idx / pv.ncols();
                        let cc = idx % pv.ncols();
                        let a = clamp_prob(pv[(r, cc)]);
                        let b = clamp_prob(qv[(r, cc)]);
                        let inside_a = pv[(r, cc)] > PROB_EPS && pv[(r, cc)] < 1.0 - PROB_EPS;
                        let inside_b = qv[(r, cc)] > PROB_EPS && qv[(r, cc)] < 1.0 - PROB_EPS;
                        if inside_a {
                            let d = (a * (1.0 - b) / (b * (1.0 - a))).ln() - b / a
                                + (1.0 - b) / (1.0 - a);
                            gp[(r, cc)] = gs * d;
                        }
                        if inside_b {
                            let d = (b * (1.0 - a) / (a * (1.0 - b))).ln() - a / b
                                + (1.0 - a) / (1.0 - b);
                            gq[(r, cc)] = gs * d;
                        }
                    }
                    accumulate(&mut grads, *p, gp);
                    accumulate(&mut grads, *q, gq);
                }
                Op::WeightedSum(terms) => {
                    let gs = g[(0, 0)];
                    for &(id, coeff) in terms {
                        accumulate(&mut grads, id, Array2::from_elem((1, 1), gs * coeff));
                    }
                }
            }
        }
        // Only leaves that asked for gradients keep them.
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { requires_grad: false } = node.op {
                grads[i] = None;
            }
        }
        grads
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], id: Id, g: Array2<f64>) {
    match &mut grads[id] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}
