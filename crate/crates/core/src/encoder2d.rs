//! The 2D graph position encoder: relational-attention blocks over atom
//! types and bonds only, projected up to the 3D encoder width. By
//! construction no code path here reads coordinates or distances.
//! Also the random-walk structural encoding used as the swap-in
//! alternative.

use crate::autodiff::Value;
use crate::featurize::{init_matrix, init_table, offdiag_mask, EDGE_CATEGORIES};
use crate::molgraph::{Bond, ELEMENTS};
use crate::tensor::Tensor;
use rand::prelude::*;

use crate::encoder3d::LN_EPS;

/// Which structural encoder backs the position-encoding slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PeKind {
    ReTrans2d,
    /// Frozen random-walk return probabilities followed by the trained
    /// projection.
    Rwse { steps: usize },
}

struct Block {
    w_q_n: Value,
    w_q_e: Value,
    w_k_n: Value,
    w_k_e: Value,
    w_v_n: Value,
    w_v_e: Value,
    w_f: Value,
    ln1: Value,
    ln2: Value,
    w_ff1: Value,
    b_ff1: Value,
    w_ff2: Value,
    b_ff2: Value,
}

impl Block {
    fn new(width: usize, rng: &mut StdRng) -> Self {
        let hidden = 4 * width;
        Block {
            w_q_n: init_matrix(rng, width, width),
            w_q_e: init_matrix(rng, width, width),
            w_k_n: init_matrix(rng, width, width),
            w_k_e: init_matrix(rng, width, width),
            w_v_n: init_matrix(rng, width, width),
            w_v_e: init_matrix(rng, width, width),
            w_f: init_matrix(rng, width, width),
            ln1: Value::param(Tensor::full(&[width], 1.0)),
            ln2: Value::param(Tensor::full(&[width], 1.0)),
            w_ff1: init_matrix(rng, width, hidden),
            b_ff1: Value::param(Tensor::zeros(&[hidden])),
            w_ff2: init_matrix(rng, hidden, width),
            b_ff2: Value::param(Tensor::zeros(&[width])),
        }
    }

    fn collect_params(&self, prefix: &str, out: &mut crate::autodiff::ParamSet) {
        out.register(&format!("{prefix}.w_q_n"), &self.w_q_n);
        out.register(&format!("{prefix}.w_q_e"), &self.w_q_e);
        out.register(&format!("{prefix}.w_k_n"), &self.w_k_n);
        out.register(&format!("{prefix}.w_k_e"), &self.w_k_e);
        out.register(&format!("{prefix}.w_v_n"), &self.w_v_n);
        out.register(&format!("{prefix}.w_v_e"), &self.w_v_e);
        out.register(&format!("{prefix}.w_f"), &self.w_f);
        out.register(&format!("{prefix}.ln1"), &self.ln1);
        out.register(&format!("{prefix}.ln2"), &self.ln2);
        out.register(&format!("{prefix}.w_ff1"), &self.w_ff1);
        out.register(&format!("{prefix}.b_ff1"), &self.b_ff1);
        out.register(&format!("{prefix}.w_ff2"), &self.w_ff2);
        out.register(&format!("{prefix}.b_ff2"), &self.b_ff2);
    }
}

/// Position-encoder parameters: a narrow relational-transformer stack
/// plus the output projection into the 3D encoder width.
pub struct Encoder2d {
    pub width: usize,
    pub heads: usize,
    pub d_out: usize,
    pub kind: PeKind,
    atom_table: Value,
    edge_table: Value,
    blocks: Vec<Block>,
    ln_final: Value,
    /// (width, d_out) for ReTrans2d, (steps, d_out) for RWSE.
    pub projection: Value,
}

impl Encoder2d {
    pub fn new(
        width: usize,
        heads: usize,
        layers: usize,
        d_out: usize,
        kind: PeKind,
        rng: &mut StdRng,
    ) -> Self {
        assert!(width % heads == 0, "pe width {width} not divisible by {heads} heads");
        let (blocks, atom_table, edge_table, ln_final, projection) = match kind {
            PeKind::ReTrans2d => {
                let atom_table = init_table(rng, ELEMENTS.len(), width);
                let edge_table = init_table(rng, EDGE_CATEGORIES, width);
                let blocks = (0..layers).map(|_| Block::new(width, rng)).collect();
                let ln_final = Value::param(Tensor::full(&[width], 1.0));
                let projection = init_matrix(rng, width, d_out);
                (blocks, atom_table, edge_table, ln_final, projection)
            }
            PeKind::Rwse { steps } => {
                // tables and blocks unused; the projection consumes the
                // frozen K-step walk features directly
                let atom_table = init_table(rng, ELEMENTS.len(), width);
                let edge_table = init_table(rng, EDGE_CATEGORIES, width);
                let projection = init_matrix(rng, steps, d_out);
                (Vec::new(), atom_table, edge_table, Value::param(Tensor::full(&[width], 1.0)), projection)
            }
        };
        Encoder2d {
            width,
            heads,
            d_out,
            kind,
            atom_table,
            edge_table,
            blocks,
            ln_final,
            projection,
        }
    }

    pub fn collect_params(&self, prefix: &str, out: &mut crate::autodiff::ParamSet) {
        match self.kind {
            PeKind::ReTrans2d => {
                out.register(&format!("{prefix}.atom_table"), &self.atom_table);
                out.register(&format!("{prefix}.edge_table"), &self.edge_table);
                for (l, b) in self.blocks.iter().enumerate() {
                    b.collect_params(&format!("{prefix}.l{l:02}"), out);
                }
                out.register(&format!("{prefix}.ln_final"), &self.ln_final);
                out.register(&format!("{prefix}.projection"), &self.projection);
            }
            PeKind::Rwse { .. } => {
                out.register(&format!("{prefix}.projection"), &self.projection);
            }
        }
    }

    /// Per-atom position encodings (N, d_out) from atom types and bonds
    /// alone. Coordinates never enter; the output is bit-identical under
    /// any coordinate change.
    pub fn encode2d(&self, atom_types: &[usize], bonds: &[Bond]) -> Value {
        match self.kind {
            PeKind::ReTrans2d => self.encode_retrans(atom_types, bonds),
            PeKind::Rwse { steps } => {
                let n = atom_types.len();
                let feats = rwse(bonds, n, steps);
                let flat: Vec<f64> = feats.into_iter().flatten().collect();
                Value::constant(Tensor::from_vec(flat, &[n, steps])).matmul(&self.projection)
            }
        }
    }

    fn encode_retrans(&self, atom_types: &[usize], bonds: &[Bond]) -> Value {
        let n = atom_types.len();
        let w = self.width;
        let dh = w / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let idx = crate::featurize::edge_category_matrix(n, bonds);
        let pair = self.edge_table.gather_rows(&idx).reshape(&[n, n, w]);
        let mask = offdiag_mask(n);
        let mut x = self.atom_table.gather_rows(atom_types); // (N,w)
        for b in &self.blocks {
            let normed = x.layer_norm_rows(LN_EPS).mul(&b.ln1);
            let q = normed
                .matmul(&b.w_q_n)
                .reshape(&[n, 1, w])
                .add(&pair_project(&pair, &b.w_q_e, n, w));
            let k = normed
                .matmul(&b.w_k_n)
                .reshape(&[1, n, w])
                .add(&pair_project(&pair, &b.w_k_e, n, w));
            let v = normed
                .matmul(&b.w_v_n)
                .reshape(&[1, n, w])
                .add(&pair_project(&pair, &b.w_v_e, n, w));
            let mut heads = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let q_h = q.slice_last(h * dh, dh);
                let k_h = k.slice_last(h * dh, dh);
                let v_h = v.slice_last(h * dh, dh);
                let score = q_h.mul(&k_h).sum_axis(2).scale(scale);
                let alpha = score.silu().reshape(&[n, n, 1]).mul(&mask);
                heads.push(alpha.mul(&v_h).sum_axis(1));
            }
            let o = Value::concat_last(&heads).matmul(&b.w_f);
            x = x.add(&o);
            let normed = x.layer_norm_rows(LN_EPS).mul(&b.ln2);
            let ff = normed
                .matmul(&b.w_ff1)
                .add(&b.b_ff1)
                .silu()
                .matmul(&b.w_ff2)
                .add(&b.b_ff2);
            x = x.add(&ff);
        }
        x.layer_norm_rows(LN_EPS)
            .mul(&self.ln_final)
            .matmul(&self.projection)
    }
}

fn pair_project(pair: &Value, w: &Value, n: usize, c_out: usize) -> Value {
    let c_in = pair.shape()[2];
    pair.reshape(&[n * n, c_in]).matmul(w).reshape(&[n, n, c_out])
}

/// Random-walk structural encoding: entry k of node i is the return
/// probability (T^k)_ii with T = D^-1 A over the bond-induced simple
/// graph. Isolated nodes get all-zero rows.
pub fn rwse(bonds: &[Bond], n: usize, steps: usize) -> Vec<Vec<f64>> {
    assert!(steps >= 1, "rwse needs at least one step");
    let mut adj = vec![0.0f64; n * n];
    for b in bonds {
        adj[b.i * n + b.j] = 1.0;
        adj[b.j * n + b.i] = 1.0;
    }
    let mut t = vec![0.0f64; n * n];
    for i in 0..n {
        let deg: f64 = adj[i * n..(i + 1) * n].iter().sum();
        if deg > 0.0 {
            for j in 0..n {
                t[i * n + j] = adj[i * n + j] / deg;
            }
        }
    }
    let mut out = vec![vec![0.0; steps]; n];
    let mut power = t.clone();
    for k in 0..steps {
        for i in 0..n {
            out[i][k] = power[i * n + i];
        }
        if k + 1 < steps {
            power = mat_sq_mul(&power, &t, n);
        }
    }
    out
}

fn mat_sq_mul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for p in 0..n {
            let av = a[i * n + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}
