//! Embedding layer feeding the 3D encoder: radial basis expansion with a
//! smooth cosine cutoff, node + neighborhood + atomic embeddings, and
//! bond-order edge embeddings.

use crate::autodiff::Value;
use crate::molgraph::{Bond, ELEMENTS};
use crate::tensor::Tensor;
use rand::prelude::*;
use std::f64::consts::PI;
use std::fmt;

/// Row count of the edge embedding table: none/single/double/triple/aromatic.
pub const EDGE_CATEGORIES: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub enum FeaturizeError {
    NegativeDistance(f64),
}

impl fmt::Display for FeaturizeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NegativeDistance(d) => write!(f, "distance {d} is negative"),
        }
    }
}

impl std::error::Error for FeaturizeError {}

/// Embedding parameters. `beta`/`mu` are fixed; everything else is
/// learnable. The node and neighborhood embeddings act on the
/// concatenation [coords; one-hot type], realized as two weight blocks.
pub struct FeatureParams {
    pub d_model: usize,
    pub k_rbf: usize,
    pub d_cut: f64,
    pub beta: Vec<f64>,
    pub mu: Vec<f64>,
    /// (3, d) coordinate block of Embed^node
    pub w_node_x: Value,
    /// (V, d) atom-type block of Embed^node
    pub node_table: Value,
    /// (3, d) coordinate block of Embed^neigh
    pub w_neigh_x: Value,
    /// (V, d) atom-type block of Embed^neigh
    pub neigh_table: Value,
    /// (k_rbf, d) RBF filter projector
    pub w_r: Value,
    /// (d, d) node half of the atomic combiner
    pub w_atomic_node: Value,
    /// (d, d) neighborhood half of the atomic combiner
    pub w_atomic_neigh: Value,
    /// (5, d) bond-order table, row 0 = no bond
    pub edge_table: Value,
}

/// Centers linearly spaced over [exp(-d_cut), 1], one shared width.
pub fn rbf_centers(d_cut: f64, k_rbf: usize) -> (Vec<f64>, Vec<f64>) {
    let lo = (-d_cut).exp();
    let mu: Vec<f64> = if k_rbf == 1 {
        vec![1.0]
    } else {
        (0..k_rbf)
            .map(|k| lo + (1.0 - lo) * k as f64 / (k_rbf - 1) as f64)
            .collect()
    };
    let width = 2.0 * (1.0 - lo) / k_rbf as f64;
    let beta = vec![width.powi(-2); k_rbf];
    (mu, beta)
}

pub fn init_matrix(rng: &mut StdRng, rows: usize, cols: usize) -> Value {
    let std = (1.0 / rows as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            z * std
        })
        .collect();
    Value::param(Tensor::from_vec(data, &[rows, cols]))
}

pub fn init_table(rng: &mut StdRng, rows: usize, cols: usize) -> Value {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    Value::param(Tensor::from_vec(data, &[rows, cols]))
}

impl FeatureParams {
    pub fn new(d_model: usize, k_rbf: usize, d_cut: f64, rng: &mut StdRng) -> Self {
        assert!(d_cut > 0.0);
        let (mu, beta) = rbf_centers(d_cut, k_rbf);
        let v = ELEMENTS.len();
        FeatureParams {
            d_model,
            k_rbf,
            d_cut,
            beta,
            mu,
            w_node_x: init_matrix(rng, 3, d_model),
            node_table: init_table(rng, v, d_model),
            w_neigh_x: init_matrix(rng, 3, d_model),
            neigh_table: init_table(rng, v, d_model),
            w_r: init_matrix(rng, k_rbf, d_model),
            w_atomic_node: init_matrix(rng, d_model, d_model),
            w_atomic_neigh: init_matrix(rng, d_model, d_model),
            edge_table: init_table(rng, EDGE_CATEGORIES, d_model),
        }
    }

    pub fn collect_params(&self, prefix: &str, out: &mut crate::autodiff::ParamSet) {
        out.register(&format!("{prefix}.w_node_x"), &self.w_node_x);
        out.register(&format!("{prefix}.node_table"), &self.node_table);
        out.register(&format!("{prefix}.w_neigh_x"), &self.w_neigh_x);
        out.register(&format!("{prefix}.neigh_table"), &self.neigh_table);
        out.register(&format!("{prefix}.w_r"), &self.w_r);
        out.register(&format!("{prefix}.w_atomic_node"), &self.w_atomic_node);
        out.register(&format!("{prefix}.w_atomic_neigh"), &self.w_atomic_neigh);
        out.register(&format!("{prefix}.edge_table"), &self.edge_table);
    }

    /// Smooth cutoff: 1/2 (cos(pi d / d_cut) + 1) inside, 0 beyond.
    pub fn cutoff(&self, d: f64) -> Result<f64, FeaturizeError> {
        if d < 0.0 {
            return Err(FeaturizeError::NegativeDistance(d));
        }
        if d > self.d_cut {
            Ok(0.0)
        } else {
            Ok(0.5 * ((PI * d / self.d_cut).cos() + 1.0))
        }
    }

    /// Scalar RBF expansion of one distance.
    pub fn rbf_expand(&self, d: f64) -> Result<Vec<f64>, FeaturizeError> {
        let cut = self.cutoff(d)?;
        Ok(self
            .mu
            .iter()
            .zip(self.beta.iter())
            .map(|(&mu, &beta)| cut * (-beta * ((-d).exp() - mu).powi(2)).exp())
            .collect())
    }

    /// Differentiable RBF expansion of a full (N,N) distance matrix into
    /// (N,N,k_rbf). Channels vanish at and beyond the cutoff.
    pub fn rbf_tensor(&self, dists: &Value) -> Value {
        let n = dists.shape()[0];
        let d3 = dists.reshape(&[n, n, 1]);
        // data-dependent constant gate: 1 inside the cutoff, 0 beyond
        let gate: Vec<f64> = dists
            .data()
            .data()
            .iter()
            .map(|&d| if d <= self.d_cut { 1.0 } else { 0.0 })
            .collect();
        let gate = Value::constant(Tensor::from_vec(gate, &[n, n, 1]));
        let cut = d3
            .scale(PI / self.d_cut)
            .cos()
            .add_scalar(1.0)
            .scale(0.5)
            .mul(&gate);
        let mu = Value::constant(Tensor::from_vec(self.mu.clone(), &[self.k_rbf]));
        let neg_beta = Value::constant(Tensor::from_vec(
            self.beta.iter().map(|b| -b).collect(),
            &[self.k_rbf],
        ));
        let radial = d3.neg().exp().sub(&mu).square().mul(&neg_beta).exp();
        cut.mul(&radial)
    }

    /// Per-atom atomic embeddings (N, d): node embedding of [x; a]
    /// combined with the RBF-gated neighborhood sum over j != i.
    pub fn embed_atoms(&self, coords: &Value, atom_types: &[usize], dists: &Value) -> Value {
        let n = atom_types.len();
        let e_node = coords
            .matmul(&self.w_node_x)
            .add(&self.node_table.gather_rows(atom_types));
        let neigh = coords
            .matmul(&self.w_neigh_x)
            .add(&self.neigh_table.gather_rows(atom_types));
        let rbf = self.rbf_tensor(dists);
        let filt = rbf
            .reshape(&[n * n, self.k_rbf])
            .matmul(&self.w_r)
            .reshape(&[n, n, self.d_model]);
        let filt = filt.mul(&offdiag_mask(n));
        let summand = neigh.reshape(&[1, n, self.d_model]).mul(&filt);
        let e_neigh = summand.sum_axis(1);
        e_node
            .matmul(&self.w_atomic_node)
            .add(&e_neigh.matmul(&self.w_atomic_neigh))
    }

    /// (N, N, d) edge embeddings: table row per bond order, row 0 for
    /// unbonded pairs and the diagonal. Symmetric by construction.
    pub fn embed_edges(&self, n: usize, bonds: &[Bond]) -> Value {
        let idx = edge_category_matrix(n, bonds);
        self.edge_table
            .gather_rows(&idx)
            .reshape(&[n, n, self.d_model])
    }
}

/// Pair category indices (0 = none) as a flat row-major N*N vector.
pub fn edge_category_matrix(n: usize, bonds: &[Bond]) -> Vec<usize> {
    let mut idx = vec![0usize; n * n];
    for b in bonds {
        let o = b.order as usize;
        idx[b.i * n + b.j] = o;
        idx[b.j * n + b.i] = o;
    }
    idx
}

/// (N,N,1) constant with zero diagonal, one elsewhere.
pub fn offdiag_mask(n: usize) -> Value {
    let mut m = vec![1.0; n * n];
    for i in 0..n {
        m[i * n + i] = 0.0;
    }
    Value::constant(Tensor::from_vec(m, &[n, n, 1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;

    fn toy_params(d_model: usize, k_rbf: usize, seed: u64) -> FeatureParams {
        let mut rng = StdRng::seed_from_u64(seed);
        FeatureParams::new(d_model, k_rbf, 5.0, &mut rng)
    }

    fn coords_value(coords: &[[f64; 3]]) -> Value {
        let flat: Vec<f64> = coords.iter().flatten().copied().collect();
        Value::param(Tensor::from_vec(flat, &[coords.len(), 3]))
    }

    #[test]
    fn cutoff_values() {
        let p = toy_params(4, 4, 0);
        assert!((p.cutoff(0.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(p.cutoff(5.0).unwrap().abs() < 1e-15);
        assert!((p.cutoff(2.5).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(p.cutoff(6.0).unwrap(), 0.0);
        assert!(matches!(p.cutoff(-0.1), Err(FeaturizeError::NegativeDistance(_))));
    }

    #[test]
    fn rbf_zero_beyond_cutoff_and_continuous() {
        let p = toy_params(4, 8, 1);
        for v in p.rbf_expand(5.0).unwrap() {
            assert_eq!(v, 0.0);
        }
        for v in p.rbf_expand(7.3).unwrap() {
            assert_eq!(v, 0.0);
        }
        for v in p.rbf_expand(5.0 - 1e-4).unwrap() {
            assert!(v.abs() < 1e-6, "discontinuity near cutoff: {v}");
        }
    }

    #[test]
    fn rbf_peak_channel_equals_cutoff() {
        // at exp(-d*) = mu_k the exponent vanishes, channel k = cutoff(d*)
        let mut p = toy_params(4, 2, 2);
        p.mu = vec![0.5, 0.8];
        p.beta = vec![10.0, 10.0];
        let d_star = 2.0f64.ln(); // exp(-d*) = 0.5
        let v = p.rbf_expand(d_star).unwrap();
        let cut = p.cutoff(d_star).unwrap();
        assert!((v[0] - cut).abs() < 1e-14);
    }

    #[test]
    fn rbf_scalar_oracle_at_unit_distance() {
        let mut p = toy_params(4, 1, 3);
        p.mu = vec![0.5];
        p.beta = vec![10.0];
        let got = p.rbf_expand(1.0).unwrap()[0];
        // independent scalar evaluation of the defining formula
        let cut = 0.5 * ((PI * 1.0 / 5.0).cos() + 1.0);
        let oracle = cut * (-10.0 * ((-1.0f64).exp() - 0.5).powi(2)).exp();
        assert!((got - oracle).abs() < 1e-15, "got {got}, oracle {oracle}");
    }

    #[test]
    fn rbf_tensor_matches_scalar_path() {
        let p = toy_params(4, 6, 4);
        let coords = coords_value(&[[0.0, 0.0, 0.0], [1.2, 0.3, -0.4], [4.9, 0.0, 0.0]]);
        let dists = coords.pairwise_dist();
        let rbf = p.rbf_tensor(&dists);
        for i in 0..3 {
            for j in 0..3 {
                let d = dists.data().at2(i, j);
                let scalar = p.rbf_expand(d).unwrap();
                for k in 0..6 {
                    assert!((rbf.data().at3(i, j, k) - scalar[k]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn embed_single_atom_has_zero_neighborhood() {
        let p = toy_params(6, 4, 5);
        let coords = coords_value(&[[0.3, -0.2, 0.9]]);
        let dists = coords.pairwise_dist();
        let got = p.embed_atoms(&coords, &[1], &dists);
        // oracle: e_atomic = W_a_node^T applied to e_node only
        let e_node = coords
            .matmul(&p.w_node_x)
            .add(&p.node_table.gather_rows(&[1]));
        let want = e_node.matmul(&p.w_atomic_node);
        for (a, b) in got.data().data().iter().zip(want.data().data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn embed_beyond_cutoff_has_zero_neighborhood() {
        let p = toy_params(6, 4, 6);
        let near = coords_value(&[[0.0, 0.0, 0.0]]);
        let near_d = near.pairwise_dist();
        let single = p.embed_atoms(&near, &[2], &near_d);

        let far = coords_value(&[[0.0, 0.0, 0.0], [8.0, 0.0, 0.0]]);
        let far_d = far.pairwise_dist();
        let pair = p.embed_atoms(&far, &[2, 3], &far_d);
        for c in 0..6 {
            assert_eq!(
                pair.data().at2(0, c).to_bits(),
                single.data().at2(0, c).to_bits()
            );
        }
    }

    #[test]
    fn embed_two_atoms_hand_oracle() {
        // k_rbf = 2, d_model = 2, hand evaluation of the neighborhood sum
        let mut p = toy_params(2, 2, 7);
        p.mu = vec![0.4, 0.9];
        p.beta = vec![3.0, 5.0];
        let coords = coords_value(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let dists = coords.pairwise_dist();
        let got = p.embed_atoms(&coords, &[1, 0], &dists);

        // scalar oracle for atom 0
        let rbf = p.rbf_expand(1.0).unwrap();
        let w_r = p.w_r.data().clone();
        let filt: Vec<f64> = (0..2)
            .map(|c| rbf[0] * w_r.at2(0, c) + rbf[1] * w_r.at2(1, c))
            .collect();
        // neighborhood feature of atom 1 (type 0 at x=(1,0,0))
        let nt = p.neigh_table.data().clone();
        let wx = p.w_neigh_x.data().clone();
        let neigh1: Vec<f64> = (0..2).map(|c| wx.at2(0, c) + nt.at2(0, c)).collect();
        let e_neigh0: Vec<f64> = (0..2).map(|c| neigh1[c] * filt[c]).collect();
        // node embedding of atom 0 (type 1 at origin)
        let node_t = p.node_table.data().clone();
        let e_node0: Vec<f64> = (0..2).map(|c| node_t.at2(1, c)).collect();
        let wan = p.w_atomic_node.data().clone();
        let wne = p.w_atomic_neigh.data().clone();
        for c in 0..2 {
            let want = e_node0[0] * wan.at2(0, c)
                + e_node0[1] * wan.at2(1, c)
                + e_neigh0[0] * wne.at2(0, c)
                + e_neigh0[1] * wne.at2(1, c);
            assert!(
                (got.data().at2(0, c) - want).abs() < 1e-12,
                "channel {c}: {} vs {want}",
                got.data().at2(0, c)
            );
        }
    }

    #[test]
    fn embed_atoms_permutation_equivariant_bitexact() {
        let p = toy_params(8, 6, 8);
        let g = crate::molgraph::generate_synthetic(21, 1, 6..=6).unwrap().remove(0);
        let perm = vec![4, 0, 5, 2, 1, 3];
        let pg = g.permuted(&perm);

        let c0 = coords_value(&g.coords);
        let e0 = p.embed_atoms(&c0, &g.atom_types, &c0.pairwise_dist());
        let c1 = coords_value(&pg.coords);
        let e1 = p.embed_atoms(&c1, &pg.atom_types, &c1.pairwise_dist());
        for (new, &old) in perm.iter().enumerate() {
            for c in 0..8 {
                assert_eq!(
                    e1.data().at2(new, c).to_bits(),
                    e0.data().at2(old, c).to_bits(),
                    "atom {old} channel {c}"
                );
            }
        }
    }

    #[test]
    fn embed_edges_lookup() {
        let p = toy_params(4, 4, 9);
        // no bonds: everything is row 0
        let e = p.embed_edges(2, &[]);
        let row0: Vec<f64> = (0..4).map(|c| p.edge_table.data().at2(0, c)).collect();
        for i in 0..2 {
            for j in 0..2 {
                for c in 0..4 {
                    assert_eq!(e.data().at3(i, j, c), row0[c]);
                }
            }
        }
        // single bond: (0,1) and (1,0) are row 1, diagonal stays row 0
        let e = p.embed_edges(2, &[Bond { i: 0, j: 1, order: 1 }]);
        for c in 0..4 {
            assert_eq!(e.data().at3(0, 1, c), p.edge_table.data().at2(1, c));
            assert_eq!(e.data().at3(1, 0, c), p.edge_table.data().at2(1, c));
            assert_eq!(e.data().at3(0, 0, c), row0[c]);
        }
    }

    #[test]
    fn embed_edges_permutes_consistently() {
        let g = crate::molgraph::generate_synthetic(33, 1, 5..=5).unwrap().remove(0);
        let p = toy_params(4, 4, 10);
        let perm = vec![2, 4, 0, 3, 1];
        let pg = g.permuted(&perm);
        let e0 = p.embed_edges(5, &g.bonds);
        let e1 = p.embed_edges(5, &pg.bonds);
        for ni in 0..5 {
            for nj in 0..5 {
                for c in 0..4 {
                    assert_eq!(
                        e1.data().at3(ni, nj, c).to_bits(),
                        e0.data().at3(perm[ni], perm[nj], c).to_bits()
                    );
                }
            }
        }
    }

    #[test]
    fn neighborhood_sum_gradcheck_through_coords() {
        let p = toy_params(4, 3, 11);
        let coords = coords_value(&[[0.0, 0.0, 0.0], [1.1, 0.2, -0.3], [-0.7, 1.4, 0.5]]);
        let f = || {
            let d = coords.pairwise_dist();
            p.embed_atoms(&coords, &[1, 0, 3], &d).square().sum_all()
        };
        let err = finite_diff_check(f, &coords, 1e-6);
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn moving_across_cutoff_kills_contribution() {
        let p = toy_params(6, 4, 12);
        let inside = coords_value(&[[0.0, 0.0, 0.0], [4.0, 0.0, 0.0]]);
        let outside = coords_value(&[[0.0, 0.0, 0.0], [5.5, 0.0, 0.0]]);
        let alone = coords_value(&[[0.0, 0.0, 0.0]]);
        let e_in = p.embed_atoms(&inside, &[1, 1], &inside.pairwise_dist());
        let e_out = p.embed_atoms(&outside, &[1, 1], &outside.pairwise_dist());
        let e_alone = p.embed_atoms(&alone, &[1], &alone.pairwise_dist());
        // inside the cutoff the neighbor contributes
        let mut differs = false;
        for c in 0..6 {
            if e_in.data().at2(0, c) != e_alone.data().at2(0, c) {
                differs = true;
            }
            // outside, atom 0 looks isolated
            assert_eq!(e_out.data().at2(0, c).to_bits(), e_alone.data().at2(0, c).to_bits());
        }
        assert!(differs);
    }
}
