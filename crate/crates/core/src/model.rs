//! The assembled masked-graph autoencoder: featurizer, 3D encoder, 2D
//! position encoder, structure-independent decoder (plus the
//! structure-dependent ablation arm), prediction heads, and the
//! per-molecule pretraining forward pass.

use crate::autodiff::{AutodiffError, ParamSet, Value};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::Config;
use crate::decoder::{
    denoise_loss, distill_loss, mgm_loss, pretrain_loss, srd, Decoder, DecodeOutput, SdDecoder,
    SrdState, VecHead,
};
use crate::encoder2d::Encoder2d;
use crate::encoder3d::{coords_leaf, EncodeError, Encoder3d, EncoderConfig, EncoderOutput};
use crate::featurize::{init_matrix, FeatureParams};
use crate::molgraph::{MaskPlan, MolGraph};
use crate::tensor::Tensor;
use rand::prelude::*;
use std::fmt;
use std::path::Path;

#[derive(Debug)]
pub enum ModelError {
    Encode(EncodeError),
    Autodiff(AutodiffError),
    Checkpoint(CheckpointError),
    Data(String),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Encode(e) => write!(f, "{e}"),
            Self::Autodiff(e) => write!(f, "{e}"),
            Self::Checkpoint(e) => write!(f, "{e}"),
            Self::Data(m) => write!(f, "data error: {m}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<EncodeError> for ModelError {
    fn from(e: EncodeError) -> Self {
        Self::Encode(e)
    }
}

impl From<AutodiffError> for ModelError {
    fn from(e: AutodiffError) -> Self {
        Self::Autodiff(e)
    }
}

impl From<CheckpointError> for ModelError {
    fn from(e: CheckpointError) -> Self {
        Self::Checkpoint(e)
    }
}

/// Scalar property head: a per-atom feedforward over the scalar channels
/// and the vector channel norms, summed over atoms.
pub struct LabelHead {
    pub w_s: Value,
    pub w_v: Value,
    pub b1: Value,
    pub w2: Value,
    pub b2: Value,
}

impl LabelHead {
    pub fn new(d_model: usize, rng: &mut StdRng) -> Self {
        LabelHead {
            w_s: init_matrix(rng, d_model, d_model),
            w_v: init_matrix(rng, d_model, d_model),
            b1: Value::param(Tensor::zeros(&[d_model])),
            w2: init_matrix(rng, d_model, 1),
            b2: Value::param(Tensor::zeros(&[1])),
        }
    }

    pub fn collect_params(&self, prefix: &str, out: &mut ParamSet) {
        out.register(&format!("{prefix}.w_s"), &self.w_s);
        out.register(&format!("{prefix}.w_v"), &self.w_v);
        out.register(&format!("{prefix}.b1"), &self.b1);
        out.register(&format!("{prefix}.w2"), &self.w2);
        out.register(&format!("{prefix}.b2"), &self.b2);
    }

    pub fn apply(&self, enc_out: &EncoderOutput) -> Value {
        let vnorm = enc_out.vec[0]
            .square()
            .add(&enc_out.vec[1].square())
            .add(&enc_out.vec[2].square())
            .add_scalar(1e-12)
            .sqrt();
        let h = enc_out
            .scalar
            .matmul(&self.w_s)
            .add(&vnorm.matmul(&self.w_v))
            .add(&self.b1)
            .silu();
        h.matmul(&self.w2).add(&self.b2).sum_all()
    }
}

pub struct Model {
    pub cfg: Config,
    pub feat: FeatureParams,
    pub enc: Encoder3d,
    pub pe: Encoder2d,
    pub dec: Decoder,
    pub dec_sd: SdDecoder,
    pub pos_head: VecHead,
    pub denoise_head: VecHead,
    pub label_head: LabelHead,
}

/// Prefixes of the three gradient-isolated parameter groups.
pub const ENCODER_PREFIXES: [&str; 2] = ["feat.", "enc."];
pub const PE_PREFIX: &str = "pe.";
pub const DECODER_PREFIXES: [&str; 3] = ["dec.", "head.pos.", "head.denoise."];

pub struct PretrainOutput {
    pub loss: Value,
    pub mgm: Value,
    pub denoise: Value,
    pub distill: Value,
    /// Mean distillation cosine over unmasked atoms (0 when disabled).
    pub cos_mean: f64,
}

impl PretrainOutput {
    pub fn mgm_value(&self) -> f64 {
        self.mgm.data().scalar_value()
    }

    pub fn denoise_value(&self) -> f64 {
        self.denoise.data().scalar_value()
    }

    pub fn distill_value(&self) -> f64 {
        self.distill.data().scalar_value()
    }
}

impl Model {
    pub fn new(cfg: &Config) -> Self {
        let mut rng = StdRng::seed_from_u64(cfg.seed ^ 0x6d67_3364);
        let enc_cfg = cfg.encoder_config();
        let feat = FeatureParams::new(cfg.d_model, cfg.k_rbf, cfg.d_cut, &mut rng);
        let enc = Encoder3d::new(enc_cfg, &mut rng);
        let pe = Encoder2d::new(
            cfg.pe_width,
            cfg.pe_heads,
            cfg.pe_layers,
            cfg.d_model,
            cfg.pe_kind(),
            &mut rng,
        );
        let dec = Decoder::new(cfg.d_model, cfg.heads, cfg.dec_layers, &mut rng);
        let sd_cfg = EncoderConfig {
            layers: cfg.dec_layers,
            ..enc_cfg
        };
        let dec_sd = SdDecoder::new(sd_cfg, cfg.d_cut, &mut rng);
        let pos_head = VecHead::new(cfg.d_model, &mut rng);
        let denoise_head = VecHead::new(cfg.d_model, &mut rng);
        let label_head = LabelHead::new(cfg.d_model, &mut rng);
        Model {
            cfg: cfg.clone(),
            feat,
            enc,
            pe,
            dec,
            dec_sd,
            pos_head,
            denoise_head,
            label_head,
        }
    }

    pub fn params(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        self.feat.collect_params("feat", &mut ps);
        self.enc.collect_params("enc", &mut ps);
        self.pe.collect_params("pe", &mut ps);
        self.dec.collect_params("dec", &mut ps);
        self.dec_sd.collect_params("dec_sd", &mut ps);
        self.pos_head.collect_params("head.pos", &mut ps);
        self.denoise_head.collect_params("head.denoise", &mut ps);
        self.label_head.collect_params("head.label", &mut ps);
        ps
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        Checkpoint::from_params(&self.params()).save(path)?;
        Ok(())
    }

    /// Restore parameters from a checkpoint; `head.` entries may be
    /// absent (finetuning from a pretraining checkpoint keeps fresh
    /// heads).
    pub fn load_from(&self, path: &Path) -> Result<(), ModelError> {
        let ck = Checkpoint::load(path)?;
        ck.apply_to(&self.params(), &["head."])?;
        Ok(())
    }

    /// Encoder pass over the full, unmodified graph.
    pub fn encode_full(&self, g: &MolGraph) -> Result<(EncoderOutput, Value), ModelError> {
        Ok(self.enc.encode_graph(&self.feat, g)?)
    }

    /// Position encodings of the full graph (atom types and bonds only).
    pub fn pe_full(&self, g: &MolGraph) -> Value {
        self.pe.encode2d(&g.atom_types, &g.bonds)
    }

    /// Scalar energy from an explicit coordinate value.
    pub fn energy_from_coords(
        &self,
        coords: &Value,
        atom_types: &[usize],
        bonds: &[crate::molgraph::Bond],
    ) -> Result<Value, ModelError> {
        let out = self.enc.encode(&self.feat, coords, atom_types, bonds)?;
        Ok(self.label_head.apply(&out))
    }

    pub fn energy(&self, g: &MolGraph) -> Result<Value, ModelError> {
        let coords = coords_leaf(&g.coords);
        self.energy_from_coords(&coords, &g.atom_types, &g.bonds)
    }

    /// One molecule of the pretraining objective. The caller prepares the
    /// frames: `sub_coords` are the atom-removed graph's noised (and
    /// possibly augmented) coordinates, `clean_coords` the full graph in
    /// the same frame without noise, and `noise_target` the injected
    /// noise expressed in that frame.
    pub fn pretrain_forward(
        &self,
        g: &MolGraph,
        plan: &MaskPlan,
        sub_coords: &Value,
        clean_coords: &Value,
        noise_target: &[[f64; 3]],
    ) -> Result<PretrainOutput, ModelError> {
        let n = g.n_atoms();
        let cfg = &self.cfg;
        let (sub, kept) = g.remove_atoms(&plan.masked);
        assert_eq!(sub_coords.shape(), vec![kept.len(), 3]);
        assert_eq!(clean_coords.shape(), vec![n, 3]);

        let enc_out = self
            .enc
            .encode(&self.feat, sub_coords, &sub.atom_types, &sub.bonds)?;

        let need_pe = cfg.srd_enabled || cfg.distill_enabled;
        let pe = if need_pe {
            Some(self.pe_full(g))
        } else {
            None
        };
        let pe_for_tokens = if cfg.srd_enabled {
            pe.clone().expect("pe computed when srd enabled")
        } else {
            Value::constant(Tensor::zeros(&[n, cfg.d_model]))
        };
        let state: SrdState = srd(
            &enc_out.scalar,
            &enc_out.vec,
            plan,
            &pe_for_tokens,
            &self.dec.m_h,
            n,
        );

        let dec_out: DecodeOutput = if cfg.decoder_structure_dependent {
            let mut frame = g.clone();
            for (i, row) in frame.coords.iter_mut().enumerate() {
                for c in 0..3 {
                    row[c] = clean_coords.data().at2(i, c);
                }
            }
            self.dec_sd.decode(&state, &frame)
        } else {
            self.dec.decode(&state)
        };

        let xhat = self.pos_head.apply(&dec_out.rep, &dec_out.vec_out);
        let targets: Vec<[f64; 3]> = (0..n)
            .map(|i| {
                [
                    clean_coords.data().at2(i, 0),
                    clean_coords.data().at2(i, 1),
                    clean_coords.data().at2(i, 2),
                ]
            })
            .collect();
        let mgm = mgm_loss(&xhat, &targets, plan);

        let dxhat = self.denoise_head.apply(&dec_out.rep, &dec_out.vec_out);
        let den = denoise_loss(&dxhat, noise_target, plan);

        let n_unmasked = n - plan.masked.len();
        let (dis, cos_mean) = if cfg.distill_enabled {
            let h_clean = self
                .enc
                .encode(&self.feat, clean_coords, &g.atom_types, &g.bonds)?;
            let dis = distill_loss(pe.as_ref().expect("pe computed"), &h_clean.scalar, plan)?;
            let cm = -dis.data().scalar_value() / n_unmasked as f64;
            (dis, cm)
        } else {
            (Value::scalar(0.0), 0.0)
        };

        let loss = pretrain_loss(&mgm, &den, &dis, cfg.denoise_weight);
        Ok(PretrainOutput {
            loss,
            mgm,
            denoise: den,
            distill: dis,
            cos_mean,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::backward;
    use crate::molgraph::generate_synthetic;
    use crate::train::sample_mask;

    fn desk_model(seed: u64) -> Model {
        let mut cfg = Config::desk();
        cfg.d_model = 16;
        cfg.heads = 2;
        cfg.layers = 2;
        cfg.k_rbf = 8;
        cfg.pe_width = 8;
        cfg.pe_heads = 2;
        cfg.pe_layers = 2;
        cfg.seed = seed;
        Model::new(&cfg)
    }

    fn forward_plain(model: &Model, g: &MolGraph, plan: &MaskPlan) -> PretrainOutput {
        let (sub, kept) = g.remove_atoms(&plan.masked);
        let mut sub_coords: Vec<[f64; 3]> = kept.iter().map(|&i| g.coords[i]).collect();
        for (r, &orig) in kept.iter().enumerate() {
            for c in 0..3 {
                sub_coords[r][c] += plan.noise[orig][c];
            }
        }
        let _ = &sub;
        let sc = coords_leaf(&sub_coords);
        let cc = coords_leaf(&g.coords);
        model
            .pretrain_forward(g, plan, &sc, &cc, &plan.noise)
            .unwrap()
    }

    #[test]
    fn pretrain_forward_produces_finite_loss_and_gradients() {
        let model = desk_model(1);
        let g = generate_synthetic(41, 1, 6..=6).unwrap().remove(0);
        let mut rng = StdRng::seed_from_u64(5);
        let plan = sample_mask(g.n_atoms(), 0.25, 0.04, &mut rng).unwrap();
        let out = forward_plain(&model, &g, &plan);
        assert!(out.loss.data().scalar_value().is_finite());
        assert!(out.mgm_value() >= 0.0);
        assert!(out.denoise_value() >= 0.0);
        backward(&out.loss);
        let ps = model.params();
        let touched = ps
            .iter()
            .filter(|(n, v)| n.starts_with("enc.") && v.grad().is_some())
            .count();
        assert!(touched > 0, "encoder must receive gradients");
    }

    #[test]
    fn gradient_isolation_exact_zeros() {
        // with distillation off, the full loss is MGM + denoise: the
        // position encoder must receive exactly nothing through the
        // stop-gradiented SRD term
        let mut cfg = Config::desk();
        cfg.d_model = 16;
        cfg.heads = 2;
        cfg.layers = 2;
        cfg.k_rbf = 8;
        cfg.pe_width = 8;
        cfg.pe_heads = 2;
        cfg.pe_layers = 2;
        cfg.seed = 2;
        cfg.distill_enabled = false;
        let model = Model::new(&cfg);
        let g = generate_synthetic(42, 1, 7..=7).unwrap().remove(0);
        let mut rng = StdRng::seed_from_u64(6);
        let plan = sample_mask(g.n_atoms(), 0.25, 0.04, &mut rng).unwrap();
        let ps = model.params();

        ps.zero_grads();
        let out = forward_plain(&model, &g, &plan);
        backward(&out.loss);
        for (name, v) in ps.iter() {
            if name.starts_with(PE_PREFIX) {
                assert!(v.grad().is_none(), "{name} leaked MGM gradient into the 2D encoder");
            }
        }

        // distillation alone: encoder and decoder get exact zeros
        ps.zero_grads();
        let cc = coords_leaf(&g.coords);
        let h_clean = model.enc.encode(&model.feat, &cc, &g.atom_types, &g.bonds).unwrap();
        let pe = model.pe_full(&g);
        let dis = distill_loss(&pe, &h_clean.scalar, &plan).unwrap();
        backward(&dis);
        for (name, v) in ps.iter() {
            if !name.starts_with(PE_PREFIX) {
                assert!(
                    v.grad().is_none(),
                    "{name} received distill gradient; must be exactly zero"
                );
            }
        }
    }

    #[test]
    fn srd_disabled_skips_pe_term() {
        let mut cfg = Config::desk();
        cfg.d_model = 16;
        cfg.heads = 2;
        cfg.layers = 1;
        cfg.k_rbf = 8;
        cfg.pe_width = 8;
        cfg.pe_heads = 2;
        cfg.pe_layers = 1;
        cfg.srd_enabled = false;
        cfg.distill_enabled = false;
        let model = Model::new(&cfg);
        let g = generate_synthetic(43, 1, 5..=5).unwrap().remove(0);
        let mut rng = StdRng::seed_from_u64(7);
        let plan = sample_mask(g.n_atoms(), 0.25, 0.04, &mut rng).unwrap();
        let out = forward_plain(&model, &g, &plan);
        assert_eq!(out.distill_value(), 0.0);
        assert_eq!(out.cos_mean, 0.0);
        backward(&out.loss);
        for (name, v) in model.params().iter() {
            if name.starts_with(PE_PREFIX) {
                assert!(v.grad().is_none(), "{name} must not train without SRD/distill");
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_restores_forward() {
        let model = desk_model(3);
        let g = generate_synthetic(44, 1, 5..=5).unwrap().remove(0);
        let e0 = model.energy(&g).unwrap().data().scalar_value();
        let dir = std::env::temp_dir().join("mg3d_model_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        model.save(&path).unwrap();

        let model2 = desk_model(99); // different init
        let e1 = model2.energy(&g).unwrap().data().scalar_value();
        assert!(e0 != e1);
        model2.load_from(&path).unwrap();
        let e2 = model2.energy(&g).unwrap().data().scalar_value();
        let rel = (e0 - e2).abs() / (e0.abs() + 1e-12);
        assert!(rel < 1e-6, "relative drift {rel}");
        std::fs::remove_file(&path).ok();
    }
}
