//! Re-mask decoding, selective re-mask decoding, the structure-independent
//! transformer decoder (plus the structure-dependent ablation arm), the
//! coordinate prediction heads, and the pretraining losses.
//!
//! The decoder sees tokens and gated vector channels only: no bonds, no
//! coordinates, no distances. Whatever 2D context the masked slots get
//! arrives through the stop-gradiented position encodings.

use crate::autodiff::{cosine_similarity, AutodiffError, Value};
use crate::encoder3d::{Encoder3d, EncoderOutput, LN_EPS};
use crate::featurize::{init_matrix, FeatureParams};
use crate::molgraph::{MaskPlan, MolGraph};
use crate::tensor::Tensor;
use rand::prelude::*;

/// Decoder input over all N original atom slots.
pub struct SrdState {
    pub tokens: Value,
    pub vec_in: [Value; 3],
    pub mask: MaskPlan,
}

/// Scatter encoder rows (from the atom-removed graph) back to their
/// original indices and place the shared learnable token at every
/// masked slot.
pub fn remask(h: &Value, mask: &MaskPlan, m_h: &Value, n_atoms: usize) -> Value {
    let unmasked = mask.unmasked(n_atoms);
    assert_eq!(
        h.shape()[0] + mask.masked.len(),
        n_atoms,
        "re-mask bookkeeping mismatch: {} encoder rows + {} masked != {} atoms",
        h.shape()[0],
        mask.masked.len(),
        n_atoms
    );
    h.scatter_rows(&unmasked, &mask.masked, m_h)
}

/// Selective re-mask decoding: re-masked tokens plus the stop-gradiented
/// position encodings of the full graph. Encoder vectors scatter with
/// zero fill at masked slots.
pub fn srd(
    h: &Value,
    vec: &[Value; 3],
    mask: &MaskPlan,
    pe: &Value,
    m_h: &Value,
    n_atoms: usize,
) -> SrdState {
    let d = h.shape()[1];
    assert_eq!(pe.shape(), vec![n_atoms, d], "position encoding width mismatch");
    let tokens = remask(h, mask, m_h, n_atoms).add(&pe.stop_gradient());
    let unmasked = mask.unmasked(n_atoms);
    let zero_fill = Value::constant(Tensor::zeros(&[d]));
    let vec_in = [
        vec[0].scatter_rows(&unmasked, &mask.masked, &zero_fill),
        vec[1].scatter_rows(&unmasked, &mask.masked, &zero_fill),
        vec[2].scatter_rows(&unmasked, &mask.masked, &zero_fill),
    ];
    SrdState {
        tokens,
        vec_in,
        mask: mask.clone(),
    }
}

struct DecBlock {
    ln1: Value,
    w_q: Value,
    b_q: Value,
    w_k: Value,
    b_k: Value,
    w_v: Value,
    b_v: Value,
    w_o: Value,
    b_o: Value,
    ln2: Value,
    w_ff1: Value,
    b_ff1: Value,
    w_ff2: Value,
    b_ff2: Value,
}

impl DecBlock {
    fn new(d: usize, rng: &mut StdRng) -> Self {
        let hidden = 4 * d;
        DecBlock {
            ln1: Value::param(Tensor::full(&[d], 1.0)),
            w_q: init_matrix(rng, d, d),
            b_q: Value::param(Tensor::zeros(&[d])),
            w_k: init_matrix(rng, d, d),
            b_k: Value::param(Tensor::zeros(&[d])),
            w_v: init_matrix(rng, d, d),
            b_v: Value::param(Tensor::zeros(&[d])),
            w_o: init_matrix(rng, d, d),
            b_o: Value::param(Tensor::zeros(&[d])),
            ln2: Value::param(Tensor::full(&[d], 1.0)),
            w_ff1: init_matrix(rng, d, hidden),
            b_ff1: Value::param(Tensor::zeros(&[hidden])),
            w_ff2: init_matrix(rng, hidden, d),
            b_ff2: Value::param(Tensor::zeros(&[d])),
        }
    }

    fn collect_params(&self, prefix: &str, out: &mut crate::autodiff::ParamSet) {
        out.register(&format!("{prefix}.ln1"), &self.ln1);
        out.register(&format!("{prefix}.w_q"), &self.w_q);
        out.register(&format!("{prefix}.b_q"), &self.b_q);
        out.register(&format!("{prefix}.w_k"), &self.w_k);
        out.register(&format!("{prefix}.b_k"), &self.b_k);
        out.register(&format!("{prefix}.w_v"), &self.w_v);
        out.register(&format!("{prefix}.b_v"), &self.b_v);
        out.register(&format!("{prefix}.w_o"), &self.w_o);
        out.register(&format!("{prefix}.b_o"), &self.b_o);
        out.register(&format!("{prefix}.ln2"), &self.ln2);
        out.register(&format!("{prefix}.w_ff1"), &self.w_ff1);
        out.register(&format!("{prefix}.b_ff1"), &self.b_ff1);
        out.register(&format!("{prefix}.w_ff2"), &self.w_ff2);
        out.register(&format!("{prefix}.b_ff2"), &self.b_ff2);
    }
}

pub struct DecodeOutput {
    pub rep: Value,
    pub vec_out: [Value; 3],
}

/// Structure-independent decoder: standard pre-norm transformer blocks
/// with softmax attention over the token sequence, plus a learned
/// per-channel gate that carries vectors through without mixing atoms.
pub struct Decoder {
    pub d_model: usize,
    pub heads: usize,
    pub m_h: Value,
    blocks: Vec<DecBlock>,
    ln_final: Value,
    w_gate: Value,
    b_gate: Value,
}

impl Decoder {
    pub fn new(d_model: usize, heads: usize, layers: usize, rng: &mut StdRng) -> Self {
        assert!(d_model % heads == 0);
        Decoder {
            d_model,
            heads,
            m_h: Value::param(Tensor::zeros(&[d_model])),
            blocks: (0..layers).map(|_| DecBlock::new(d_model, rng)).collect(),
            ln_final: Value::param(Tensor::full(&[d_model], 1.0)),
            w_gate: init_matrix(rng, d_model, d_model),
            b_gate: Value::param(Tensor::zeros(&[d_model])),
        }
    }

    pub fn collect_params(&self, prefix: &str, out: &mut crate::autodiff::ParamSet) {
        out.register(&format!("{prefix}.m_h"), &self.m_h);
        for (l, b) in self.blocks.iter().enumerate() {
            b.collect_params(&format!("{prefix}.l{l}"), out);
        }
        out.register(&format!("{prefix}.ln_final"), &self.ln_final);
        out.register(&format!("{prefix}.w_gate"), &self.w_gate);
        out.register(&format!("{prefix}.b_gate"), &self.b_gate);
    }

    pub fn decode(&self, s: &SrdState) -> DecodeOutput {
        let n = s.tokens.shape()[0];
        let d = self.d_model;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = s.tokens.clone();
        for blk in &self.blocks {
            let normed = x.layer_norm_rows(LN_EPS).mul(&blk.ln1);
            let q = normed.matmul(&blk.w_q).add(&blk.b_q);
            let k = normed.matmul(&blk.w_k).add(&blk.b_k);
            let v = normed.matmul(&blk.w_v).add(&blk.b_v);
            let mut heads = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let q_h = q.slice_last(h * dh, dh);
                let k_h = k.slice_last(h * dh, dh);
                let v_h = v.slice_last(h * dh, dh);
                let scores = q_h.matmul(&k_h.reshape(&[n, dh]).transpose_value()).scale(scale);
                let p = scores.softmax_last(); // (N,N)
                let mixed = p.reshape(&[n, n, 1]).mul(&v_h.reshape(&[1, n, dh])).sum_axis(1);
                heads.push(mixed);
            }
            let o = Value::concat_last(&heads).matmul(&blk.w_o).add(&blk.b_o);
            x = x.add(&o);
            let normed = x.layer_norm_rows(LN_EPS).mul(&blk.ln2);
            let ff = normed
                .matmul(&blk.w_ff1)
                .add(&blk.b_ff1)
                .silu()
                .matmul(&blk.w_ff2)
                .add(&blk.b_ff2);
            x = x.add(&ff);
        }
        let rep = x.layer_norm_rows(LN_EPS).mul(&self.ln_final);
        let gate = rep.matmul(&self.w_gate).add(&self.b_gate).sigmoid();
        let vec_out = [
            s.vec_in[0].mul(&gate),
            s.vec_in[1].mul(&gate),
            s.vec_in[2].mul(&gate),
        ];
        DecodeOutput { rep, vec_out }
    }
}

impl Value {
    /// 2-D transpose as a differentiable op (reshape + gather).
    pub fn transpose_value(&self) -> Value {
        let shape = self.shape();
        assert_eq!(shape.len(), 2);
        let (m, n) = (shape[0], shape[1]);
        // index trick: row-major transpose via gather on the flattened matrix
        let idx: Vec<usize> = (0..m * n).map(|p| (p % m) * n + p / m).collect();
        self.reshape(&[m * n, 1]).gather_rows(&idx).reshape(&[n, m])
    }
}

/// Structure-dependent ablation decoder: a short 3D relational stack that
/// consumes the tokens as its scalar state together with the true bonds
/// and coordinates (masked slots imputed as the unmasked centroid).
pub struct SdDecoder {
    pub feat: FeatureParams,
    pub enc: Encoder3d,
    w_gate: Value,
    b_gate: Value,
}

impl SdDecoder {
    pub fn new(cfg: crate::encoder3d::EncoderConfig, d_cut: f64, rng: &mut StdRng) -> Self {
        SdDecoder {
            feat: FeatureParams::new(cfg.d_model, cfg.k_rbf, d_cut, rng),
            enc: Encoder3d::new(cfg, rng),
            w_gate: init_matrix(rng, cfg.d_model, cfg.d_model),
            b_gate: Value::param(Tensor::zeros(&[cfg.d_model])),
        }
    }

    pub fn collect_params(&self, prefix: &str, out: &mut crate::autodiff::ParamSet) {
        self.feat.collect_params(&format!("{prefix}.feat"), out);
        self.enc.collect_params(&format!("{prefix}.enc"), out);
        out.register(&format!("{prefix}.w_gate"), &self.w_gate);
        out.register(&format!("{prefix}.b_gate"), &self.b_gate);
    }

    pub fn decode(&self, s: &SrdState, g: &MolGraph) -> DecodeOutput {
        let n = g.n_atoms();
        let coords = imputed_coords(g, &s.mask);
        let coords = Value::constant(Tensor::from_vec(
            coords.iter().flatten().copied().collect(),
            &[n, 3],
        ));
        let out: EncoderOutput = self
            .enc
            .encode_from_state(&self.feat, s.tokens.clone(), s.vec_in.clone(), &coords, &g.bonds)
            .expect("imputed geometry is collision-free");
        let rep = out.scalar;
        let gate = rep.matmul(&self.w_gate).add(&self.b_gate).sigmoid();
        let vec_out = [
            out.vec[0].mul(&gate),
            out.vec[1].mul(&gate),
            out.vec[2].mul(&gate),
        ];
        DecodeOutput { rep, vec_out }
    }
}

/// True coordinates at unmasked slots, unmasked centroid at masked slots.
pub fn imputed_coords(g: &MolGraph, mask: &MaskPlan) -> Vec<[f64; 3]> {
    let n = g.n_atoms();
    let unmasked = mask.unmasked(n);
    let mut centroid = [0.0f64; 3];
    for &i in &unmasked {
        for c in 0..3 {
            centroid[c] += g.coords[i][c];
        }
    }
    for c in centroid.iter_mut() {
        *c /= unmasked.len() as f64;
    }
    (0..n)
        .map(|i| if mask.is_masked(i) { centroid } else { g.coords[i] })
        .collect()
}

/// Coordinate head: a small feedforward on rep plus a gated combination
/// of the vector channels. The final feedforward layer is bias-free.
pub struct VecHead {
    pub w1: Value,
    pub b1: Value,
    pub w2: Value,
    pub w_gate: Value,
    pub b_gate: Value,
}

impl VecHead {
    pub fn new(d_model: usize, rng: &mut StdRng) -> Self {
        VecHead {
            w1: init_matrix(rng, d_model, d_model),
            b1: Value::param(Tensor::zeros(&[d_model])),
            w2: init_matrix(rng, d_model, 3),
            w_gate: init_matrix(rng, d_model, d_model),
            b_gate: Value::param(Tensor::zeros(&[d_model])),
        }
    }

    pub fn collect_params(&self, prefix: &str, out: &mut crate::autodiff::ParamSet) {
        out.register(&format!("{prefix}.w1"), &self.w1);
        out.register(&format!("{prefix}.b1"), &self.b1);
        out.register(&format!("{prefix}.w2"), &self.w2);
        out.register(&format!("{prefix}.w_gate"), &self.w_gate);
        out.register(&format!("{prefix}.b_gate"), &self.b_gate);
    }

    /// (N,3) predicted vectors: A(rep) + sum_c gate(rep)_c * vec[c].
    pub fn apply(&self, rep: &Value, vec: &[Value; 3]) -> Value {
        let a = rep.matmul(&self.w1).add(&self.b1).silu().matmul(&self.w2);
        let gate = rep.matmul(&self.w_gate).add(&self.b_gate);
        let n = rep.shape()[0];
        let comps: Vec<Value> = (0..3)
            .map(|c| gate.mul(&vec[c]).sum_axis(1).reshape(&[n, 1]))
            .collect();
        a.add(&Value::concat_last(&comps))
    }
}

/// Masked-coordinate reconstruction loss: the summed squared error over
/// the masked set (a sum, not a mean).
pub fn mgm_loss(xhat: &Value, x_target: &[[f64; 3]], mask: &MaskPlan) -> Value {
    assert!(!mask.masked.is_empty(), "mgm_loss requires a nonempty mask");
    let picked = xhat.gather_rows(&mask.masked);
    let target: Vec<f64> = mask
        .masked
        .iter()
        .flat_map(|&i| x_target[i].iter().copied())
        .collect();
    let target = Value::constant(Tensor::from_vec(target, &[mask.masked.len(), 3]));
    picked.sub(&target).square().sum_all()
}

/// Denoising loss over unmasked atoms: sum of squared errors between the
/// predicted and injected coordinate noise.
pub fn denoise_loss(dxhat: &Value, noise: &[[f64; 3]], mask: &MaskPlan) -> Value {
    let n = dxhat.shape()[0];
    let unmasked = mask.unmasked(n);
    let picked = dxhat.gather_rows(&unmasked);
    let target: Vec<f64> = unmasked
        .iter()
        .flat_map(|&i| noise[i].iter().copied())
        .collect();
    let target = Value::constant(Tensor::from_vec(target, &[unmasked.len(), 3]));
    picked.sub(&target).square().sum_all()
}

/// Distillation loss: negative cosine similarity between the position
/// encodings and the (stop-gradiented) clean-graph encoder outputs,
/// summed over unmasked atoms.
pub fn distill_loss(pe: &Value, h_clean: &Value, mask: &MaskPlan) -> Result<Value, AutodiffError> {
    let n = pe.shape()[0];
    assert_eq!(h_clean.shape()[0], n);
    let target = h_clean.stop_gradient();
    let mut total = Value::scalar(0.0);
    for i in mask.unmasked(n) {
        let c = cosine_similarity(&pe.gather_rows(&[i]), &target.gather_rows(&[i]))?;
        total = total.add(&c);
    }
    Ok(total.neg())
}

/// Combined pretraining objective for one molecule:
/// mgm + w * denoise + distill.
pub fn pretrain_loss(mgm: &Value, denoise: &Value, distill: &Value, w: f64) -> Value {
    mgm.add(&denoise.scale(w)).add(distill)
}
