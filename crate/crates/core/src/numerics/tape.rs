//! Reverse-mode differentiation over an operation tape.
//!
//! The tape records every primitive in creation order (a valid topological
//! order), evaluating eagerly. `backward` replays the record once in reverse,
//! accumulating vector-Jacobian products. A tape is single-writer and lives
//! for one training step; tensors handed to it are never mutated.

use super::tensor::{dot, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

const NO_ARGMAX: usize = usize::MAX;

enum Op {
    Input {
        param: bool,
    },
    Add(NodeId, NodeId),
    /// Row-broadcast bias add: `m + 1·biasᵀ`.
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Gelu(NodeId),
    SoftmaxRows {
        x: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        /// Saved forward state: per row, (inv_std, normalized row).
        inv_std: Vec<f64>,
        normalized: Vec<f64>,
    },
    L2NormRows {
        x: NodeId,
        mask: Vec<bool>,
        norms: Vec<f64>,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        start: usize,
        len: usize,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    Sum(NodeId),
    /// Mean-over-max set matching on a B×B grid of token blocks.
    MeanMaxGrid {
        queries: NodeId,
        gallery: NodeId,
        query_mask: Vec<bool>,
        batch: usize,
        queries_per: usize,
        /// argmax gallery row per (query block, gallery block, query slot).
        argmax: Vec<usize>,
        query_counts: Vec<usize>,
    },
    /// Per-row −log softmax(diagonal) at temperature `tau`.
    InfoNceRows {
        scores: NodeId,
        tau: f64,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], addressable by node.
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `id`; parameters unreachable from the loss get zeros.
    pub fn get(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match &self.by_node[id.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }

    pub fn get_ref(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node[id.0].as_ref()
    }
}

#[derive(Default)]
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers a constant input (no gradient requested).
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input { param: false })
    }

    /// Registers a trainable parameter.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input { param: true })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "add",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// `m + bias` with `bias` (a length-c vector) broadcast over the rows of
    /// the r×c matrix `m`.
    pub fn add_bias(&mut self, m: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(m).dims2()?;
        if self.value(bias).shape() != [c] {
            return Err(Error::shape("add_bias", &[c], self.value(bias).shape()));
        }
        let mut data = self.value(m).data().to_vec();
        let b = self.value(bias).data();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += b[j];
            }
        }
        let out = Tensor::new(vec![r, c], data)?;
        Ok(self.push(out, Op::AddBias(m, bias)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "mul",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let data = self.value(a).data().iter().map(|x| x * factor).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(out, Op::Scale(a, factor)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = matmul_values(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let out = transpose_values(self.value(a))?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.value(a).data().iter().map(|&x| gelu(x)).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(out, Op::Gelu(a)))
    }

    /// Row-wise softmax with an optional column mask shared by all rows.
    /// Masked columns get weight exactly 0; each row is stabilized by its
    /// own max over unmasked entries.
    pub fn softmax_rows(&mut self, x: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2()?;
        if let Some(m) = mask {
            if m.len() != c {
                return Err(Error::shape("softmax mask", &[c], &[m.len()]));
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::config("softmax_rows: every column is masked"));
            }
        }
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.value(x).data()[i * c..(i + 1) * c];
            softmax_into(row, mask, &mut data[i * c..(i + 1) * c]);
        }
        let out = Tensor::new(vec![r, c], data)?;
        Ok(self.push(out, Op::SoftmaxRows { x }))
    }

    /// Layer normalization over the last axis with affine gain/bias.
    /// Variance is the population variance of the row.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2()?;
        if self.value(gain).shape() != [c] || self.value(bias).shape() != [c] {
            return Err(Error::shape("layer_norm affine", &[c], self.value(gain).shape()));
        }
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let mut out = vec![0.0; r * c];
        let mut normalized = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &self.value(x).data()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let n = (row[j] - mean) * is;
                normalized[i * c + j] = n;
                out[i * c + j] = g[j] * n + b[j];
            }
        }
        let out = Tensor::new(vec![r, c], out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                inv_std,
                normalized,
            },
        ))
    }

    /// L2-normalizes every unmasked row to unit length; masked rows come out
    /// as zero vectors.
    pub fn l2norm_rows(&mut self, x: NodeId, mask: &[bool]) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2()?;
        if mask.len() != r {
            return Err(Error::shape("l2norm mask", &[r], &[mask.len()]));
        }
        let mut out = vec![0.0; r * c];
        let mut norms = vec![0.0; r];
        for i in 0..r {
            if !mask[i] {
                continue;
            }
            let row = &self.value(x).data()[i * c..(i + 1) * c];
            let n = dot(row, row).sqrt();
            norms[i] = n;
            if n > 0.0 {
                for j in 0..c {
                    out[i * c + j] = row[j] / n;
                }
            }
        }
        let out = Tensor::new(vec![r, c], out)?;
        Ok(self.push(
            out,
            Op::L2NormRows {
                x,
                mask: mask.to_vec(),
                norms,
            },
        ))
    }

    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::config("concat_rows: empty input list"));
        }
        let (_, c) = self.value(xs[0]).dims2()?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &id in xs {
            let (r_i, c_i) = self.value(id).dims2()?;
            if c_i != c {
                return Err(Error::shape("concat_rows", &[c], &[c_i]));
            }
            rows += r_i;
            data.extend_from_slice(self.value(id).data());
        }
        let out = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(out, Op::ConcatRows(xs.to_vec())))
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::config("concat_cols: empty input list"));
        }
        let (r, _) = self.value(xs[0]).dims2()?;
        let widths: Vec<usize> = xs
            .iter()
            .map(|&id| self.value(id).dims2().map(|(ri, ci)| if ri == r { ci } else { usize::MAX }))
            .collect::<Result<_>>()?;
        if widths.contains(&usize::MAX) {
            return Err(Error::config("concat_cols: row counts differ"));
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut offset = 0;
        for (&id, &w) in xs.iter().zip(&widths) {
            let src = self.value(id).data();
            for i in 0..r {
                data[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let out = Tensor::new(vec![r, total], data)?;
        Ok(self.push(out, Op::ConcatCols(xs.to_vec())))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2()?;
        if start + len > r {
            return Err(Error::shape("slice_rows", &[r], &[start + len]));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::new(vec![len, c], data)?;
        Ok(self.push(out, Op::SliceRows { x, start, len }))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2()?;
        if start + len > c {
            return Err(Error::shape("slice_cols", &[c], &[start + len]));
        }
        let mut data = vec![0.0; r * len];
        for i in 0..r {
            data[i * len..(i + 1) * len]
                .copy_from_slice(&self.value(x).data()[i * c + start..i * c + start + len]);
        }
        let out = Tensor::new(vec![r, len], data)?;
        Ok(self.push(out, Op::SliceCols { x, start, len }))
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total: f64 = self.value(x).data().iter().sum();
        let out = Tensor::scalar(total);
        out.debug_check_finite("sum")?;
        Ok(self.push(out, Op::Sum(x)))
    }

    /// Set-matching grid: both inputs stack `batch` blocks of token rows
    /// (`queries_per` and `gallery_per` rows per block). Output entry (i, j)
    /// is the mean over unmasked query rows of block i of the max over
    /// unmasked gallery rows of block j of the row dot product. A block with
    /// no unmasked rows on either side contributes 0. Argmax ties resolve to
    /// the lowest gallery index.
    pub fn mean_max_grid(
        &mut self,
        queries: NodeId,
        gallery: NodeId,
        query_mask: &[bool],
        gallery_mask: &[bool],
        batch: usize,
        queries_per: usize,
        gallery_per: usize,
    ) -> Result<NodeId> {
        let (qr, d) = self.value(queries).dims2()?;
        let (gr, gd) = self.value(gallery).dims2()?;
        if qr != batch * queries_per || gr != batch * gallery_per || d != gd {
            return Err(Error::shape(
                "mean_max_grid",
                &[batch * queries_per, d],
                &[qr, gd],
            ));
        }
        if query_mask.len() != qr || gallery_mask.len() != gr {
            return Err(Error::shape("mean_max_grid masks", &[qr, gr], &[query_mask.len(), gallery_mask.len()]));
        }
        let qdata = self.value(queries).data();
        let gdata = self.value(gallery).data();
        let mut out = vec![0.0; batch * batch];
        let mut argmax = vec![NO_ARGMAX; batch * batch * queries_per];
        let mut query_counts = vec![0usize; batch];
        for (i, count) in query_counts.iter_mut().enumerate() {
            *count = query_mask[i * queries_per..(i + 1) * queries_per]
                .iter()
                .filter(|&&m| m)
                .count();
        }
        for i in 0..batch {
            if query_counts[i] == 0 {
                continue;
            }
            for j in 0..batch {
                let mut acc = 0.0;
                let mut any_gallery = false;
                for k in 0..queries_per {
                    let q_row = i * queries_per + k;
                    if !query_mask[q_row] {
                        continue;
                    }
                    let q = &qdata[q_row * d..(q_row + 1) * d];
                    let mut best = f64::NEG_INFINITY;
                    let mut best_l = NO_ARGMAX;
                    for l in 0..gallery_per {
                        let g_row = j * gallery_per + l;
                        if !gallery_mask[g_row] {
                            continue;
                        }
                        let s = dot(q, &gdata[g_row * d..(g_row + 1) * d]);
                        if s > best {
                            best = s;
                            best_l = g_row;
                        }
                    }
                    if best_l == NO_ARGMAX {
                        // Gallery block fully masked.
                        break;
                    }
                    any_gallery = true;
                    argmax[(i * batch + j) * queries_per + k] = best_l;
                    acc += best;
                }
                if any_gallery {
                    out[i * batch + j] = acc / query_counts[i] as f64;
                }
            }
        }
        let out = Tensor::new(vec![batch, batch], out)?;
        Ok(self.push(
            out,
            Op::MeanMaxGrid {
                queries,
                gallery,
                query_mask: query_mask.to_vec(),
                batch,
                queries_per,
                argmax,
                query_counts,
            },
        ))
    }

    /// Per-row contrastive loss: out[i] = −log softmax(scores[i]/tau)[i],
    /// stabilized with log-sum-exp.
    pub fn info_nce_rows(&mut self, scores: NodeId, tau: f64) -> Result<NodeId> {
        let (r, c) = self.value(scores).dims2()?;
        if r != c {
            return Err(Error::shape("info_nce_rows", &[r, r], &[r, c]));
        }
        if tau <= 0.0 {
            return Err(Error::config("temperature must be positive"));
        }
        let s = self.value(scores).data();
        let mut out = vec![0.0; r];
        let mut probs = vec![0.0; r * c];
        for i in 0..r {
            let row = &s[i * c..(i + 1) * c];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / tau));
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] / tau - m).exp();
                probs[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                probs[i * c + j] /= z;
            }
            let lse = m + z.ln();
            out[i] = lse - row[i] / tau;
        }
        let out = Tensor::new(vec![r], out)?;
        Ok(self.push(out, Op::InfoNceRows { scores, tau, probs }))
    }

    /// Reverse pass from a scalar loss. Returns gradients for every node;
    /// parameters not reachable from the loss report zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape("backward seed", &[1], self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(
            self.value(loss).shape().to_vec(),
            vec![1.0],
        )?);

        for idx in (0..self.nodes.len()).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let keep = matches!(self.nodes[idx].op, Op::Input { param: true });
            self.accumulate_inputs(idx, &g, &mut grads)?;
            if keep || idx == loss.0 {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { by_node: grads })
    }

    fn accumulate_inputs(
        &self,
        idx: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let bump = |id: NodeId, delta: Tensor, grads: &mut [Option<Tensor>]| {
            match grads[id.0].as_mut() {
                Some(acc) => {
                    for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                        *a += d;
                    }
                }
                None => grads[id.0] = Some(delta),
            }
        };
        match &self.nodes[idx].op {
            Op::Input { .. } => {}
            Op::Add(a, b) => {
                bump(*a, g.clone(), grads);
                bump(*b, g.clone(), grads);
            }
            Op::AddBias(m, bias) => {
                let (r, c) = self.value(*m).dims2()?;
                bump(*m, g.clone(), grads);
                let mut db = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        db[j] += g.data()[i * c + j];
                    }
                }
                bump(*bias, Tensor::new(vec![c], db)?, grads);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(x, y)| x * y)
                    .collect();
                let db: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(x, y)| x * y)
                    .collect();
                bump(*a, Tensor::new(self.value(*a).shape().to_vec(), da)?, grads);
                bump(*b, Tensor::new(self.value(*b).shape().to_vec(), db)?, grads);
            }
            Op::Scale(a, factor) => {
                let da: Vec<f64> = g.data().iter().map(|x| x * factor).collect();
                bump(*a, Tensor::new(self.value(*a).shape().to_vec(), da)?, grads);
            }
            Op::Matmul(a, b) => {
                let bt = transpose_values(self.value(*b))?;
                let at = transpose_values(self.value(*a))?;
                bump(*a, matmul_values(g, &bt)?, grads);
                bump(*b, matmul_values(&at, g)?, grads);
            }
            Op::Transpose(a) => {
                bump(*a, transpose_values(g)?, grads);
            }
            Op::Gelu(a) => {
                let da: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(gi, &x)| gi * gelu_derivative(x))
                    .collect();
                bump(*a, Tensor::new(self.value(*a).shape().to_vec(), da)?, grads);
            }
            Op::SoftmaxRows { x, .. } => {
                let y = &self.nodes[idx].value;
                let (r, c) = y.dims2()?;
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let yrow = &y.data()[i * c..(i + 1) * c];
                    let grow = &g.data()[i * c..(i + 1) * c];
                    let inner = dot(grow, yrow);
                    for j in 0..c {
                        dx[i * c + j] = yrow[j] * (grow[j] - inner);
                    }
                }
                bump(*x, Tensor::new(vec![r, c], dx)?, grads);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                inv_std,
                normalized,
            } => {
                let (r, c) = self.value(*x).dims2()?;
                let gv = self.value(*gain).data();
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let grow = &g.data()[i * c..(i + 1) * c];
                    let nrow = &normalized[i * c..(i + 1) * c];
                    let mut mean_dn = 0.0;
                    let mut mean_dn_n = 0.0;
                    for j in 0..c {
                        dgain[j] += grow[j] * nrow[j];
                        dbias[j] += grow[j];
                        let dn = grow[j] * gv[j];
                        mean_dn += dn;
                        mean_dn_n += dn * nrow[j];
                    }
                    mean_dn /= c as f64;
                    mean_dn_n /= c as f64;
                    for j in 0..c {
                        let dn = grow[j] * gv[j];
                        dx[i * c + j] = inv_std[i] * (dn - mean_dn - nrow[j] * mean_dn_n);
                    }
                }
                bump(*x, Tensor::new(vec![r, c], dx)?, grads);
                bump(*gain, Tensor::new(vec![c], dgain)?, grads);
                bump(*bias, Tensor::new(vec![c], dbias)?, grads);
            }
            Op::L2NormRows { x, mask, norms } => {
                let y = &self.nodes[idx].value;
                let (r, c) = y.dims2()?;
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    if !mask[i] || norms[i] == 0.0 {
                        continue;
                    }
                    let yrow = &y.data()[i * c..(i + 1) * c];
                    let grow = &g.data()[i * c..(i + 1) * c];
                    let inner = dot(grow, yrow);
                    for j in 0..c {
                        dx[i * c + j] = (grow[j] - inner * yrow[j]) / norms[i];
                    }
                }
                bump(*x, Tensor::new(vec![r, c], dx)?, grads);
            }
            Op::ConcatRows(xs) => {
                let (_, c) = self.nodes[idx].value.dims2()?;
                let mut start = 0;
                for &id in xs {
                    let (r_i, _) = self.value(id).dims2()?;
                    let slice = g.data()[start * c..(start + r_i) * c].to_vec();
                    bump(id, Tensor::new(vec![r_i, c], slice)?, grads);
                    start += r_i;
                }
            }
            Op::ConcatCols(xs) => {
                let (r, total) = self.nodes[idx].value.dims2()?;
                let mut offset = 0;
                for &id in xs {
                    let (_, w) = self.value(id).dims2()?;
                    let mut part = vec![0.0; r * w];
                    for i in 0..r {
                        part[i * w..(i + 1) * w]
                            .copy_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                    }
                    bump(id, Tensor::new(vec![r, w], part)?, grads);
                    offset += w;
                }
            }
            Op::SliceRows { x, start, len } => {
                let (r, c) = self.value(*x).dims2()?;
                let mut dx = vec![0.0; r * c];
                dx[start * c..(start + len) * c].copy_from_slice(g.data());
                bump(*x, Tensor::new(vec![r, c], dx)?, grads);
            }
            Op::SliceCols { x, start, len } => {
                let (r, c) = self.value(*x).dims2()?;
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len]
                        .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                }
                bump(*x, Tensor::new(vec![r, c], dx)?, grads);
            }
            Op::Sum(x) => {
                let seed = g.data()[0];
                let dx = vec![seed; self.value(*x).numel()];
                bump(*x, Tensor::new(self.value(*x).shape().to_vec(), dx)?, grads);
            }
            Op::MeanMaxGrid {
                queries,
                gallery,
                query_mask,
                batch,
                queries_per,
                argmax,
                query_counts,
            } => {
                let d = self.value(*queries).shape()[1];
                let qdata = self.value(*queries).data();
                let gdata = self.value(*gallery).data();
                let mut dq = vec![0.0; self.value(*queries).numel()];
                let mut dg = vec![0.0; self.value(*gallery).numel()];
                for i in 0..*batch {
                    if query_counts[i] == 0 {
                        continue;
                    }
                    let inv = 1.0 / query_counts[i] as f64;
                    for j in 0..*batch {
                        let go = g.data()[i * batch + j];
                        if go == 0.0 {
                            continue;
                        }
                        for k in 0..*queries_per {
                            let q_row = i * queries_per + k;
                            if !query_mask[q_row] {
                                continue;
                            }
                            let l = argmax[(i * batch + j) * queries_per + k];
                            if l == NO_ARGMAX {
                                continue;
                            }
                            let coef = go * inv;
                            for t in 0..d {
                                dq[q_row * d + t] += coef * gdata[l * d + t];
                                dg[l * d + t] += coef * qdata[q_row * d + t];
                            }
                        }
                    }
                }
                bump(*queries, Tensor::new(self.value(*queries).shape().to_vec(), dq)?, grads);
                bump(*gallery, Tensor::new(self.value(*gallery).shape().to_vec(), dg)?, grads);
            }
            Op::InfoNceRows { scores, tau, probs } => {
                let (r, c) = self.value(*scores).dims2()?;
                let mut ds = vec![0.0; r * c];
                for i in 0..r {
                    let gi = g.data()[i];
                    if gi == 0.0 {
                        continue;
                    }
                    for j in 0..c {
                        let delta = if i == j { 1.0 } else { 0.0 };
                        ds[i * c + j] = gi * (probs[i * c + j] - delta) / tau;
                    }
                }
                bump(*scores, Tensor::new(vec![r, c], ds)?, grads);
            }
        }
        Ok(())
    }
}

/// Matrix product with ascending-k accumulation, so an (i, j) entry is the
/// plain left-to-right dot of row i and column j.
pub fn matmul_values(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul", &[k], &[k2]));
    }
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        for kk in 0..k {
            let aik = ad[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &bd[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose_values(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.dims2()?;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out)
}

/// Row softmax over unmasked entries, stabilized by max subtraction.
pub fn softmax_into(row: &[f64], mask: Option<&[bool]>, out: &mut [f64]) {
    let live = |j: usize| mask.map_or(true, |m| m[j]);
    let mut mx = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if live(j) && v > mx {
            mx = v;
        }
    }
    let mut z = 0.0;
    for (j, &v) in row.iter().enumerate() {
        if live(j) {
            let e = (v - mx).exp();
            out[j] = e;
            z += e;
        } else {
            out[j] = 0.0;
        }
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// tanh-approximated GELU; smooth everywhere, which keeps central-difference
/// gradient checks tight.
pub fn gelu(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.7978845608028654;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.7978845608028654;
    let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
