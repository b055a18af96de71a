//! The 3D encoder: stacked relational-attention and update layers over a
//! residual scalar stream plus a zero-initialized vector stream.
//!
//! Attention scores and pair aggregations always run over all j != i;
//! locality comes from the RBF cutoff, not a neighbor list. Every sum
//! over the pair axis is order-invariant, so relabeling atoms permutes
//! the outputs bit-exactly.

use crate::autodiff::Value;
use crate::featurize::{offdiag_mask, FeatureParams};
use crate::molgraph::{Bond, MolGraph};
use crate::tensor::Tensor;
use rand::prelude::*;
use std::fmt;

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum EncodeError {
    /// Two atoms coincide; pair directions are undefined.
    Geometry { i: usize, j: usize },
}

impl fmt::Display for EncodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Geometry { i, j } => {
                write!(f, "geometry error: atoms {i} and {j} coincide")
            }
        }
    }
}

impl std::error::Error for EncodeError {}

#[derive(Clone, Copy, Debug)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub k_rbf: usize,
    /// Drop the RBF-derived attention filters (plain relational attention).
    pub no_3d_attention: bool,
    /// Skip the update layer; the scalar residual becomes o2 alone and
    /// the vector stream stays zero.
    pub no_update_layer: bool,
}

impl EncoderConfig {
    pub fn head_width(&self) -> usize {
        assert!(
            self.d_model % self.heads == 0,
            "d_model {} not divisible by {} heads",
            self.d_model,
            self.heads
        );
        self.d_model / self.heads
    }
}

/// Weights of one encoder layer. Value projections are three d-wide
/// blocks (the s1/s2/s3 chunks), each internally head-contiguous.
/// The output projector carries no bias, so empty neighborhoods
/// produce exactly zero updates.
pub struct LayerParams {
    pub w_q_n: Value,
    pub w_q_e: Value,
    pub w_k_n: Value,
    pub w_k_e: Value,
    pub w_v_n: Value,
    pub w_v_e: Value,
    pub w_dk: Value,
    pub w_dv: Value,
    pub w_f: Value,
    pub w_vu: Value,
    pub ln_gamma: Value,
}

impl LayerParams {
    pub fn new(cfg: &EncoderConfig, rng: &mut StdRng) -> Self {
        let d = cfg.d_model;
        let init = crate::featurize::init_matrix;
        LayerParams {
            w_q_n: init(rng, d, d),
            w_q_e: init(rng, d, d),
            w_k_n: init(rng, d, d),
            w_k_e: init(rng, d, d),
            w_v_n: init(rng, d, 3 * d),
            w_v_e: init(rng, d, 3 * d),
            w_dk: init(rng, cfg.k_rbf, d),
            w_dv: init(rng, cfg.k_rbf, 3 * d),
            w_f: init(rng, d, 3 * d),
            w_vu: init(rng, d, 3 * d),
            ln_gamma: Value::param(Tensor::full(&[d], 1.0)),
        }
    }

    pub fn collect_params(&self, prefix: &str, out: &mut crate::autodiff::ParamSet) {
        out.register(&format!("{prefix}.w_q_n"), &self.w_q_n);
        out.register(&format!("{prefix}.w_q_e"), &self.w_q_e);
        out.register(&format!("{prefix}.w_k_n"), &self.w_k_n);
        out.register(&format!("{prefix}.w_k_e"), &self.w_k_e);
        out.register(&format!("{prefix}.w_v_n"), &self.w_v_n);
        out.register(&format!("{prefix}.w_v_e"), &self.w_v_e);
        out.register(&format!("{prefix}.w_dk"), &self.w_dk);
        out.register(&format!("{prefix}.w_dv"), &self.w_dv);
        out.register(&format!("{prefix}.w_f"), &self.w_f);
        out.register(&format!("{prefix}.w_vu"), &self.w_vu);
        out.register(&format!("{prefix}.ln_gamma"), &self.ln_gamma);
    }
}

/// Per-layer working state. `scalar` holds the stream as the layer sees
/// it (already normalized when built by [`Encoder3d::encode`]); `vec` is
/// one (N,d) matrix per spatial component.
pub struct EncoderState {
    pub scalar: Value,
    pub vec: [Value; 3],
    pub pair: Value,
    pub coords: Value,
    pub dists: Value,
    pub rbf: Value,
}

pub struct AttnOutputs {
    pub o1: Value,
    pub o2: Value,
    pub o3: Value,
    pub s1: Value,
    pub s2: Value,
    pub s3: Value,
}

pub struct EncoderOutput {
    pub scalar: Value,
    pub vec: [Value; 3],
}

pub struct Encoder3d {
    pub cfg: EncoderConfig,
    pub layers: Vec<LayerParams>,
}

impl Encoder3d {
    pub fn new(cfg: EncoderConfig, rng: &mut StdRng) -> Self {
        let layers = (0..cfg.layers).map(|_| LayerParams::new(&cfg, rng)).collect();
        Encoder3d { cfg, layers }
    }

    pub fn collect_params(&self, prefix: &str, out: &mut crate::autodiff::ParamSet) {
        for (l, layer) in self.layers.iter().enumerate() {
            layer.collect_params(&format!("{prefix}.l{l:02}"), out);
        }
    }

    /// One relational-attention pass. `state.scalar` is consumed as the
    /// per-atom feature n_i; pair features join both query and key/value.
    pub fn relational_attention(&self, state: &EncoderState, p: &LayerParams) -> AttnOutputs {
        let d = self.cfg.d_model;
        let dh = self.cfg.head_width();
        let n = state.scalar.shape()[0];
        let mask = offdiag_mask(n); // (N,N,1)

        let q = state
            .scalar
            .matmul(&p.w_q_n)
            .reshape(&[n, 1, d])
            .add(&pair_project(&state.pair, &p.w_q_e, n, d));
        let k = state
            .scalar
            .matmul(&p.w_k_n)
            .reshape(&[1, n, d])
            .add(&pair_project(&state.pair, &p.w_k_e, n, d));
        let v = state
            .scalar
            .matmul(&p.w_v_n)
            .reshape(&[1, n, 3 * d])
            .add(&pair_project(&state.pair, &p.w_v_e, n, 3 * d));

        let (kd, s) = if self.cfg.no_3d_attention {
            (k, v)
        } else {
            let dk = pair_project(&state.rbf, &p.w_dk, n, d).silu();
            let dv = pair_project(&state.rbf, &p.w_dv, n, 3 * d).silu();
            (k.mul(&dk), v.mul(&dv))
        };

        let s1 = s.slice_last(0, d);
        let s2 = s.slice_last(d, d);
        let s3 = s.slice_last(2 * d, d);

        // per-head SiLU attention, unnormalized, self-pairs excluded
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outputs = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let q_h = q.slice_last(h * dh, dh);
            let kd_h = kd.slice_last(h * dh, dh);
            let s3_h = s3.slice_last(h * dh, dh);
            let score = q_h.mul(&kd_h).sum_axis(2).scale(scale); // (N,N)
            let alpha = score.silu().reshape(&[n, n, 1]).mul(&mask);
            head_outputs.push(alpha.mul(&s3_h).sum_axis(1)); // (N,dh)
        }
        let gathered = Value::concat_last(&head_outputs); // (N,d)
        let o = gathered.matmul(&p.w_f); // (N,3d), bias-free
        AttnOutputs {
            o1: o.slice_last(0, d),
            o2: o.slice_last(d, d),
            o3: o.slice_last(2 * d, d),
            s1,
            s2,
            s3,
        }
    }

    /// The update layer: scalar/vector information exchange. Returns the
    /// residual deltas (Dscalar, Dvec).
    pub fn update_layer(
        &self,
        state: &EncoderState,
        attn: &AttnOutputs,
        p: &LayerParams,
    ) -> (Value, [Value; 3]) {
        let d = self.cfg.d_model;
        let n = state.scalar.shape()[0];
        if self.cfg.no_update_layer {
            let zero = [
                zeros_value(&[n, d]),
                zeros_value(&[n, d]),
                zeros_value(&[n, d]),
            ];
            return (attn.o2.clone(), zero);
        }

        // u chunks per spatial component: vec_c W_vu -> [u1 u2 u3]
        let mut u1 = Vec::with_capacity(3);
        let mut u2 = Vec::with_capacity(3);
        let mut u3 = Vec::with_capacity(3);
        for c in 0..3 {
            let u = state.vec[c].matmul(&p.w_vu); // (N,3d)
            u1.push(u.slice_last(0, d));
            u2.push(u.slice_last(d, d));
            u3.push(u.slice_last(2 * d, d));
        }

        // dot of u1 and u2 over the spatial axis, per channel
        let dot = u1[0]
            .mul(&u2[0])
            .add(&u1[1].mul(&u2[1]))
            .add(&u1[2].mul(&u2[2]));
        let dscalar = attn.o2.add(&attn.o3.mul(&dot));

        let mask = offdiag_mask(n);
        let dirs = unit_directions(&state.coords, &state.dists, n);
        let mut dvec = Vec::with_capacity(3);
        for c in 0..3 {
            let vec_j = state.vec[c].reshape(&[1, n, d]);
            let term1 = vec_j.mul(&attn.s1).mul(&mask);
            let dir_c = dirs[c].reshape(&[n, n, 1]);
            let term2 = attn.s2.mul(&dir_c);
            let w = term1.add(&term2).sum_axis(1); // (N,d)
            dvec.push(u3[c].mul(&attn.o1).add(&w));
        }
        let dvec: [Value; 3] = [dvec.remove(0), dvec.remove(0), dvec.remove(0)];
        (dscalar, dvec)
    }

    /// Full encoder pass from an explicit coordinate leaf. Seeds the
    /// scalar stream with atomic embeddings, the vector stream with
    /// zeros, and applies `layers` residual updates with pre-attention
    /// normalization on the scalar stream only.
    pub fn encode(
        &self,
        feat: &FeatureParams,
        coords: &Value,
        atom_types: &[usize],
        bonds: &[Bond],
    ) -> Result<EncoderOutput, EncodeError> {
        let n = atom_types.len();
        let d = self.cfg.d_model;
        let dists = coords.pairwise_dist();
        for i in 0..n {
            for j in (i + 1)..n {
                if dists.data().at2(i, j) == 0.0 {
                    return Err(EncodeError::Geometry { i, j });
                }
            }
        }
        let scalar = feat.embed_atoms(coords, atom_types, &dists);
        let vec = [
            zeros_value(&[n, d]),
            zeros_value(&[n, d]),
            zeros_value(&[n, d]),
        ];
        self.run_layers(feat, scalar, vec, coords, dists, bonds)
    }

    /// Run the layer stack from caller-supplied scalar and vector
    /// streams (the structure-dependent decoding arm enters here).
    /// Coincident positions are tolerated: their pair directions read
    /// as zero. Centroid-imputed masked slots coincide by construction.
    pub fn encode_from_state(
        &self,
        feat: &FeatureParams,
        scalar: Value,
        vec: [Value; 3],
        coords: &Value,
        bonds: &[Bond],
    ) -> Result<EncoderOutput, EncodeError> {
        let dists = coords.pairwise_dist();
        self.run_layers(feat, scalar, vec, coords, dists, bonds)
    }

    fn run_layers(
        &self,
        feat: &FeatureParams,
        mut scalar: Value,
        mut vec: [Value; 3],
        coords: &Value,
        dists: Value,
        bonds: &[Bond],
    ) -> Result<EncoderOutput, EncodeError> {
        let n = scalar.shape()[0];
        let pair = feat.embed_edges(n, bonds);
        let rbf = feat.rbf_tensor(&dists);
        for p in &self.layers {
            let normed = scalar.layer_norm_rows(LN_EPS).mul(&p.ln_gamma);
            let view = EncoderState {
                scalar: normed,
                vec: vec.clone(),
                pair: pair.clone(),
                coords: coords.clone(),
                dists: dists.clone(),
                rbf: rbf.clone(),
            };
            let attn = self.relational_attention(&view, p);
            let (dscalar, dvec) = self.update_layer(&view, &attn, p);
            scalar = scalar.add(&dscalar);
            for c in 0..3 {
                vec[c] = vec[c].add(&dvec[c]);
            }
        }
        Ok(EncoderOutput { scalar, vec })
    }

    /// Convenience: build a differentiable coordinate leaf from the graph
    /// and encode. Returns the leaf so callers can read coordinate
    /// gradients after a backward pass.
    pub fn encode_graph(
        &self,
        feat: &FeatureParams,
        g: &MolGraph,
    ) -> Result<(EncoderOutput, Value), EncodeError> {
        let coords = coords_leaf(&g.coords);
        let out = self.encode(feat, &coords, &g.atom_types, &g.bonds)?;
        Ok((out, coords))
    }
}

pub fn coords_leaf(coords: &[[f64; 3]]) -> Value {
    let flat: Vec<f64> = coords.iter().flatten().copied().collect();
    Value::leaf(Tensor::from_vec(flat, &[coords.len(), 3]), true)
}

pub fn zeros_value(shape: &[usize]) -> Value {
    Value::constant(Tensor::zeros(shape))
}

/// Project a (N,N,c_in) pair tensor through a (c_in,c_out) matrix.
fn pair_project(pair: &Value, w: &Value, n: usize, c_out: usize) -> Value {
    let c_in = pair.shape()[2];
    pair.reshape(&[n * n, c_in]).matmul(w).reshape(&[n, n, c_out])
}

/// Unit direction matrices per spatial component: (x_i - x_j) / r_ij,
/// zero on the diagonal and for coincident pairs (zero numerator over a
/// padded denominator, so no gradient contamination either).
fn unit_directions(coords: &Value, dists: &Value, n: usize) -> [Value; 3] {
    let pad: Vec<f64> = dists
        .data()
        .data()
        .iter()
        .map(|&d| if d == 0.0 { 1.0 } else { 0.0 })
        .collect();
    let pad = Value::constant(Tensor::from_vec(pad, &[n, n]));
    let den = dists.add(&pad);
    let mut out = Vec::with_capacity(3);
    for c in 0..3 {
        let col = coords.slice_last(c, 1); // (N,1)
        let diff = col.sub(&col.reshape(&[1, n])); // (N,1)-(1,N) -> (N,N)
        out.push(diff.div(&den));
    }
    [out.remove(0), out.remove(0), out.remove(0)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{backward, finite_diff_check};
    use crate::molgraph::generate_synthetic;

    fn small_cfg(layers: usize) -> EncoderConfig {
        EncoderConfig {
            d_model: 8,
            heads: 2,
            layers,
            k_rbf: 4,
            no_3d_attention: false,
            no_update_layer: false,
        }
    }

    fn build(seed: u64, cfg: EncoderConfig) -> (FeatureParams, Encoder3d) {
        let mut rng = StdRng::seed_from_u64(seed);
        let feat = FeatureParams::new(cfg.d_model, cfg.k_rbf, 5.0, &mut rng);
        let enc = Encoder3d::new(cfg, &mut rng);
        (feat, enc)
    }

    #[test]
    fn isolated_atom_gets_zero_attention_outputs() {
        let (feat, enc) = build(1, small_cfg(1));
        let coords = coords_leaf(&[[0.1, -0.4, 0.9]]);
        let dists = coords.pairwise_dist();
        let state = EncoderState {
            scalar: feat.embed_atoms(&coords, &[1], &dists),
            vec: [zeros_value(&[1, 8]), zeros_value(&[1, 8]), zeros_value(&[1, 8])],
            pair: feat.embed_edges(1, &[]),
            coords: coords.clone(),
            dists: dists.clone(),
            rbf: feat.rbf_tensor(&dists),
        };
        let attn = enc.relational_attention(&state, &enc.layers[0]);
        for o in [&attn.o1, &attn.o2, &attn.o3] {
            for &v in o.data().data() {
                assert_eq!(v, 0.0);
            }
        }
        let (dscalar, dvec) = enc.update_layer(&state, &attn, &enc.layers[0]);
        for &v in dscalar.data().data() {
            assert_eq!(v, 0.0);
        }
        for c in 0..3 {
            for &v in dvec[c].data().data() {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn zero_dv_filter_annihilates_outputs() {
        let (feat, enc) = build(2, small_cfg(1));
        // zero the value filter projector: d^v = SiLU(0) = 0 -> s3 = 0
        enc.layers[0].w_dv.set_data(Tensor::zeros(&[4, 24]));
        let g = generate_synthetic(5, 1, 4..=4).unwrap().remove(0);
        let coords = coords_leaf(&g.coords);
        let dists = coords.pairwise_dist();
        let state = EncoderState {
            scalar: feat.embed_atoms(&coords, &g.atom_types, &dists),
            vec: [zeros_value(&[4, 8]), zeros_value(&[4, 8]), zeros_value(&[4, 8])],
            pair: feat.embed_edges(4, &g.bonds),
            coords: coords.clone(),
            dists: dists.clone(),
            rbf: feat.rbf_tensor(&dists),
        };
        let attn = enc.relational_attention(&state, &enc.layers[0]);
        for o in [&attn.o1, &attn.o2, &attn.o3] {
            for &v in o.data().data() {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn vec_zero_reduces_update_to_pair_terms() {
        // layer 1: vec = 0 so u = 0, Dx = o2, Dvec = sum_j s2 * direction
        let (feat, enc) = build(3, small_cfg(1));
        let g = generate_synthetic(6, 1, 3..=3).unwrap().remove(0);
        let coords = coords_leaf(&g.coords);
        let dists = coords.pairwise_dist();
        let n = 3;
        let state = EncoderState {
            scalar: feat.embed_atoms(&coords, &g.atom_types, &dists),
            vec: [zeros_value(&[n, 8]), zeros_value(&[n, 8]), zeros_value(&[n, 8])],
            pair: feat.embed_edges(n, &g.bonds),
            coords: coords.clone(),
            dists: dists.clone(),
            rbf: feat.rbf_tensor(&dists),
        };
        let attn = enc.relational_attention(&state, &enc.layers[0]);
        let (dscalar, dvec) = enc.update_layer(&state, &attn, &enc.layers[0]);
        for (a, b) in dscalar.data().data().iter().zip(attn.o2.data().data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // oracle for Dvec: sum_j s2[i][j][c] * (x_i - x_j)/r_ij per component
        for comp in 0..3 {
            for i in 0..n {
                for ch in 0..8 {
                    let mut want = 0.0;
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let diff = coords.data().at2(i, comp) - coords.data().at2(j, comp);
                        let r = dists.data().at2(i, j);
                        want += attn.s2.data().at3(i, j, ch) * diff / r;
                    }
                    let got = dvec[comp].data().at2(i, ch);
                    assert!((got - want).abs() < 1e-12, "comp {comp} atom {i} ch {ch}");
                }
            }
        }
    }

    #[test]
    fn zero_layers_is_embedding_passthrough() {
        let (feat, enc) = build(4, small_cfg(0));
        let g = generate_synthetic(7, 1, 5..=5).unwrap().remove(0);
        let (out, coords) = enc.encode_graph(&feat, &g).unwrap();
        let want = feat.embed_atoms(&coords, &g.atom_types, &coords.pairwise_dist());
        for (a, b) in out.scalar.data().data().iter().zip(want.data().data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for c in 0..3 {
            for &v in out.vec[c].data().data() {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn encode_permutation_equivariant_bitexact() {
        let (feat, enc) = build(5, small_cfg(2));
        let g = generate_synthetic(8, 1, 6..=6).unwrap().remove(0);
        let perm = vec![3, 5, 0, 4, 2, 1];
        let pg = g.permuted(&perm);
        let (o0, _) = enc.encode_graph(&feat, &g).unwrap();
        let (o1, _) = enc.encode_graph(&feat, &pg).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            for c in 0..8 {
                assert_eq!(
                    o1.scalar.data().at2(new, c).to_bits(),
                    o0.scalar.data().at2(old, c).to_bits(),
                    "scalar atom {old} ch {c}"
                );
                for comp in 0..3 {
                    assert_eq!(
                        o1.vec[comp].data().at2(new, c).to_bits(),
                        o0.vec[comp].data().at2(old, c).to_bits(),
                        "vec comp {comp} atom {old} ch {c}"
                    );
                }
            }
        }
    }

    #[test]
    fn no_update_layer_keeps_vec_zero() {
        let mut cfg = small_cfg(3);
        cfg.no_update_layer = true;
        let (feat, enc) = build(6, cfg);
        let g = generate_synthetic(9, 1, 5..=5).unwrap().remove(0);
        let (out, _) = enc.encode_graph(&feat, &g).unwrap();
        for c in 0..3 {
            for &v in out.vec[c].data().data() {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn bond_order_reaches_representation() {
        let (feat, enc) = build(7, small_cfg(2));
        let mut g = generate_synthetic(10, 1, 5..=5).unwrap().remove(0);
        let (a, _) = enc.encode_graph(&feat, &g).unwrap();
        g.bonds[0].order = if g.bonds[0].order == 1 { 2 } else { 1 };
        let (b, _) = enc.encode_graph(&feat, &g).unwrap();
        let same = a
            .scalar
            .data()
            .data()
            .iter()
            .zip(b.scalar.data().data().iter())
            .all(|(x, y)| x == y);
        assert!(!same, "changing a bond order must change the representation");
    }

    #[test]
    fn coincident_atoms_rejected() {
        let (feat, enc) = build(8, small_cfg(1));
        let coords = coords_leaf(&[[0.0; 3], [0.0; 3]]);
        match enc.encode(&feat, &coords, &[0, 0], &[]) {
            Err(EncodeError::Geometry { i: 0, j: 1 }) => {}
            other => panic!("expected geometry error, got {:?}", other.is_ok()),
        }
    }

    #[test]
    fn encode_gradcheck_coords_and_weights() {
        let cfg = EncoderConfig {
            d_model: 4,
            heads: 2,
            layers: 1,
            k_rbf: 3,
            no_3d_attention: false,
            no_update_layer: false,
        };
        let (feat, enc) = build(9, cfg);
        let g = generate_synthetic(11, 1, 4..=4).unwrap().remove(0);
        let coords = coords_leaf(&g.coords);
        let f = || {
            let out = enc.encode(&feat, &coords, &g.atom_types, &g.bonds).unwrap();
            let vnorm = out.vec[0]
                .square()
                .add(&out.vec[1].square())
                .add(&out.vec[2].square())
                .sum_all();
            out.scalar.square().sum_all().add(&vnorm)
        };
        let err = finite_diff_check(&f, &coords, 1e-6);
        assert!(err < 1e-5, "coords rel err {err}");
        for (name, w) in [
            ("w_f", &enc.layers[0].w_f),
            ("w_dv", &enc.layers[0].w_dv),
            ("w_vu", &enc.layers[0].w_vu),
            ("ln_gamma", &enc.layers[0].ln_gamma),
            ("w_r", &feat.w_r),
        ] {
            let err = finite_diff_check(&f, w, 1e-6);
            assert!(err < 1e-5, "{name} rel err {err}");
        }
    }

    #[test]
    fn update_layer_uses_vec_stream_after_first_layer() {
        // two layers: second layer sees nonzero vec, so u-terms engage
        let (feat, enc) = build(10, small_cfg(2));
        let g = generate_synthetic(12, 1, 4..=4).unwrap().remove(0);
        let (out, _coords) = enc.encode_graph(&feat, &g).unwrap();
        // gradient must flow into the second layer's vec projector
        let loss = out.scalar.square().sum_all();
        backward(&loss);
        let gw = enc.layers[1].w_vu.grad_or_zeros();
        assert!(gw.data().iter().any(|&v| v != 0.0), "w_vu got no gradient");
    }
}
