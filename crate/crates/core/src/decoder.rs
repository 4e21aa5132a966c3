//! Query-oriented mask decoder: masked cross-attention over point
//! embeddings, self-attention among queries, a feed-forward layer, and a mask
//! prediction after every block.

use alloc::format;
use alloc::string::ToString;
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::matrix::{Csr, Matrix};
use crate::params::{Bound, Linear, ParamId, ParamStore};

/// Added to cross-attention logits of points outside the previous mask.
pub const MASK_PENALTY: f64 = -1e9;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-axis sin/cos features at geometrically spaced wavelengths from
/// `4 · range` down to 2 m, concatenated over x, y, z and zero-padded to
/// `dim` columns.
pub fn positional_encoding(positions: &[[f64; 3]], dim: usize, range: f64) -> Matrix {
    let n_freq = dim / 6;
    let longest = 4.0 * range;
    let shortest = 2.0f64.min(longest);
    let wavelengths: Vec<f64> = (0..n_freq)
        .map(|k| {
            if n_freq == 1 {
                longest
            } else {
                let t = k as f64 / (n_freq - 1) as f64;
                longest * math::pow(shortest / longest, t)
            }
        })
        .collect();
    let mut out = Matrix::zeros(positions.len(), dim);
    for (i, p) in positions.iter().enumerate() {
        let row = out.row_mut(i);
        for a in 0..3 {
            for (k, &lambda) in wavelengths.iter().enumerate() {
                let phase = 2.0 * core::f64::consts::PI * p[a] / lambda;
                let base = (a * n_freq + k) * 2;
                row[base] = math::sin(phase);
                row[base + 1] = math::cos(phase);
            }
        }
    }
    out
}

/// `E = F^p + P_e`.
pub fn build_mask_embedding(point_feats: &Matrix, positional: &Matrix) -> Result<Matrix> {
    if point_feats.shape() != positional.shape() {
        return Err(Error::Contract(format!(
            "mask embedding shapes differ: {:?} vs {:?}",
            point_feats.shape(),
            positional.shape()
        )));
    }
    let mut e = point_feats.clone();
    e.add_assign(positional);
    Ok(e)
}

/// `sigmoid(Q · Eᵀ)`: one row per query, one column per point.
pub fn predict_masks(queries: &Matrix, embedding: &Matrix) -> Matrix {
    queries.matmul_t(embedding).map(math::sigmoid)
}

/// Additive gate from the previous soft masks: [`MASK_PENALTY`] where the
/// mask is below 0.5. Rows with no active point stay ungated.
pub fn attention_gate(prev_logits: &Matrix) -> Matrix {
    let mut gate = Matrix::zeros(prev_logits.rows, prev_logits.cols);
    for r in 0..prev_logits.rows {
        let row = prev_logits.row(r);
        // sigmoid(x) < 0.5 exactly when x < 0
        if row.iter().all(|&x| x < 0.0) {
            continue;
        }
        for (g, &x) in gate.row_mut(r).iter_mut().zip(row) {
            if x < 0.0 {
                *g = MASK_PENALTY;
            }
        }
    }
    gate
}

/// Point features a block attends to. `Voxels` holds voxel features and
/// the voxel-to-point interpolation; keys and values are then projected per
/// voxel and interpolated, which equals projecting the interpolated point
/// features because interpolation weights sum to one.
#[derive(Clone, Debug)]
pub enum PointFeatures {
    Points(Var),
    Voxels(Var, Arc<Csr>),
}

impl PointFeatures {
    fn project(&self, tape: &mut Tape, p: &Bound, lin: &Linear) -> Var {
        match self {
            PointFeatures::Points(f) => lin.forward(tape, p, *f),
            PointFeatures::Voxels(f, v2p) => {
                let per_voxel = lin.forward(tape, p, *f);
                tape.sparse_mix(per_voxel, v2p.clone())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    cq: Linear,
    ck: Linear,
    cv: Linear,
    sq: Linear,
    sk: Linear,
    sv: Linear,
    ffn1: Linear,
    ffn2: Linear,
    norms: [(ParamId, ParamId); 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    embed_dim: usize,
    heads: usize,
    blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// Mask logits: index 0 from the initial queries, then one per block.
    pub mask_logits: Vec<Var>,
    pub queries: Var,
    /// Cross-attention weights of every block, one entry per head.
    pub attention: Vec<Vec<Var>>,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, embed_dim: usize, n_blocks: usize, heads: usize, ffn_hidden: usize) -> Self {
        assert!(heads >= 1 && embed_dim.is_multiple_of(heads), "heads must divide the embedding width");
        let c = embed_dim;
        let blocks = (0..n_blocks)
            .map(|b| {
                let lin = |s: &mut ParamStore, n: &str, i, o| Linear::new(s, &format!("dec{b}.{n}"), i, o, true);
                let norm = |s: &mut ParamStore, k: usize| {
                    (
                        s.filled(&format!("dec{b}.norm{k}.gain"), 1, c, 1.0),
                        s.filled(&format!("dec{b}.norm{k}.bias"), 1, c, 0.0),
                    )
                };
                Block {
                    cq: lin(store, "cross_q", c, c),
                    ck: lin(store, "cross_k", c, c),
                    cv: lin(store, "cross_v", c, c),
                    sq: lin(store, "self_q", c, c),
                    sk: lin(store, "self_k", c, c),
                    sv: lin(store, "self_v", c, c),
                    ffn1: lin(store, "ffn1", c, ffn_hidden),
                    ffn2: lin(store, "ffn2", ffn_hidden, c),
                    norms: [norm(store, 0), norm(store, 1), norm(store, 2)],
                }
            })
            .collect();
        Self {
            embed_dim,
            heads,
            blocks,
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Multi-head attention `softmax(q kᵀ / √d + gate) v`, heads concatenated.
    fn attend(&self, tape: &mut Tape, q: Var, k: Var, v: Var, gate: Option<&Matrix>) -> (Var, Vec<Var>) {
        let dk = self.embed_dim / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * dk, dk),
                    tape.slice_cols(k, h * dk, dk),
                    tape.slice_cols(v, h * dk, dk),
                )
            };
            let logits = tape.matmul_t(qh, kh);
            let mut logits = tape.scale(logits, 1.0 / math::sqrt(dk as f64));
            if let Some(g) = gate {
                logits = tape.add_const(logits, g);
            }
            let attn = tape.softmax_rows(logits);
            weights.push(attn);
            outs.push(tape.matmul(attn, vh));
        }
        let out = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
        (out, weights)
    }

    /// One block. Returns the updated queries, new mask logits and the
    /// cross-attention weights.
    #[allow(clippy::too_many_arguments)]
    pub fn block(
        &self,
        tape: &mut Tape,
        p: &Bound,
        index: usize,
        queries: Var,
        point_feats: &PointFeatures,
        prev_logits: Var,
        embedding: Var,
        masked: bool,
    ) -> Result<(Var, Var, Vec<Var>)> {
        let b = &self.blocks[index];
        let check = |tape: &Tape, v: Var, what: &str| {
            if tape.value(v).is_finite() {
                Ok(())
            } else {
                Err(Error::Numeric(format!("decoder block {index}: non-finite {what}")))
            }
        };
        let gate = masked.then(|| attention_gate(tape.value(prev_logits)));
        let q = b.cq.forward(tape, p, queries);
        let k = point_feats.project(tape, p, &b.ck);
        let v = point_feats.project(tape, p, &b.cv);
        let (att, weights) = self.attend(tape, q, k, v, gate.as_ref());
        let x = tape.add(att, queries);
        let x = tape.layer_norm(x, p.var(b.norms[0].0), p.var(b.norms[0].1), LAYER_NORM_EPS);
        check(tape, x, "cross-attention")?;

        let q = b.sq.forward(tape, p, x);
        let k = b.sk.forward(tape, p, x);
        let v = b.sv.forward(tape, p, x);
        let (att, _) = self.attend(tape, q, k, v, None);
        let x2 = tape.add(att, x);
        let x2 = tape.layer_norm(x2, p.var(b.norms[1].0), p.var(b.norms[1].1), LAYER_NORM_EPS);
        check(tape, x2, "self-attention")?;

        let h = b.ffn1.forward(tape, p, x2);
        let h = tape.relu(h);
        let h = b.ffn2.forward(tape, p, h);
        let x3 = tape.add(h, x2);
        let x3 = tape.layer_norm(x3, p.var(b.norms[2].0), p.var(b.norms[2].1), LAYER_NORM_EPS);
        check(tape, x3, "feed-forward")?;

        let logits = tape.matmul_t(x3, embedding);
        Ok((x3, logits, weights))
    }

    /// Runs every block; block `i` attends to `point_feats[i]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        queries: Var,
        point_feats: &[PointFeatures],
        embedding: Var,
        masked: bool,
    ) -> Result<DecoderOutput> {
        if point_feats.len() < self.blocks.len() {
            return Err(Error::Contract("one point-feature level per decoder block".to_string()));
        }
        let mut logits = tape.matmul_t(queries, embedding);
        let mut mask_logits = alloc::vec![logits];
        let mut attention = Vec::new();
        let mut q = queries;
        for i in 0..self.blocks.len() {
            let (nq, nl, w) = self.block(tape, p, i, q, &point_feats[i], logits, embedding, masked)?;
            q = nq;
            logits = nl;
            mask_logits.push(nl);
            attention.push(w);
        }
        Ok(DecoderOutput {
            mask_logits,
            queries: q,
            attention,
        })
    }
}
