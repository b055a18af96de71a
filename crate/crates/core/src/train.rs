//! Training machinery: mask/noise sampling, SO(3)+translation
//! augmentation, AdamW with warmup-cosine scheduling, the pretraining
//! and finetuning loops, and finite-difference force evaluation.

use crate::autodiff::{backward, ParamSet, Value};
use crate::config::Config;
use crate::model::{Model, ModelError};
use crate::molgraph::{MaskPlan, MolGraph};
use crate::tensor::Tensor;
use rand::prelude::*;
use rand_distr::StandardNormal;
use std::f64::consts::PI;
use std::fmt;

#[derive(Debug)]
pub enum TrainError {
    MaskInfeasible { n: usize },
    EmptyCorpus,
    MissingLabel { molecule: usize, label: String },
    NonFiniteLoss { step: usize, molecule: usize, detail: String },
    NonFiniteGradient { param: String },
    Model(ModelError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::MaskInfeasible { n } => {
                write!(f, "cannot mask a molecule with {n} atoms (need 1 <= masked <= n-1)")
            }
            Self::EmptyCorpus => write!(f, "corpus is empty"),
            Self::MissingLabel { molecule, label } => {
                write!(f, "molecule {molecule} is missing label {label:?}")
            }
            Self::NonFiniteLoss { step, molecule, detail } => {
                write!(f, "non-finite loss at step {step}, molecule {molecule}: {detail}")
            }
            Self::NonFiniteGradient { param } => {
                write!(f, "non-finite gradient in parameter {param:?}")
            }
            Self::Model(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        Self::Model(e)
    }
}

/// A rigid transform x -> R x + t.
#[derive(Clone, Copy, Debug)]
pub struct Isometry {
    pub r: [[f64; 3]; 3],
    pub t: [f64; 3],
}

impl Isometry {
    pub fn identity() -> Self {
        Isometry {
            r: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            t: [0.0; 3],
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let mut out = self.t;
        for (i, row) in self.r.iter().enumerate() {
            out[i] += row[0] * p[0] + row[1] * p[1] + row[2] * p[2];
        }
        out
    }

    /// Rotation only; used for displacement vectors like injected noise.
    pub fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (i, row) in self.r.iter().enumerate() {
            out[i] = row[0] * v[0] + row[1] * v[1] + row[2] * v[2];
        }
        out
    }

    pub fn apply_all(&self, coords: &[[f64; 3]]) -> Vec<[f64; 3]> {
        coords.iter().map(|&p| self.apply(p)).collect()
    }
}

/// Haar-uniform rotation from a normalized 4-gaussian quaternion.
pub fn haar_rotation(rng: &mut StdRng) -> [[f64; 3]; 3] {
    let mut q = [0.0f64; 4];
    loop {
        for v in q.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-8 {
            for v in q.iter_mut() {
                *v /= norm;
            }
            break;
        }
    }
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Sample the training augmentation: a Haar rotation plus a shared
/// translation drawn from N(0, 0.01 I).
pub fn sample_augmentation(rng: &mut StdRng) -> Isometry {
    let r = haar_rotation(rng);
    let std = 0.01f64.sqrt();
    let mut t = [0.0; 3];
    for v in t.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = std * z;
    }
    Isometry { r, t }
}

/// Spec'd augment operation: new coordinates under a fresh random
/// isometry.
pub fn augment(coords: &[[f64; 3]], rng: &mut StdRng) -> Vec<[f64; 3]> {
    sample_augmentation(rng).apply_all(coords)
}

/// Mask floor(p*n + 0.5) atoms (clamped to [1, n-1]) uniformly without
/// replacement and draw per-unmasked-atom coordinate noise.
pub fn sample_mask(
    n: usize,
    p: f64,
    noise_scale: f64,
    rng: &mut StdRng,
) -> Result<MaskPlan, TrainError> {
    if n < 2 {
        return Err(TrainError::MaskInfeasible { n });
    }
    let m = ((p * n as f64 + 0.5).floor() as usize).clamp(1, n - 1);
    // partial Fisher-Yates for a uniform m-subset
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    let mut masked: Vec<usize> = idx[..m].to_vec();
    masked.sort_unstable();
    let mut noise = vec![[0.0f64; 3]; n];
    for (i, row) in noise.iter_mut().enumerate() {
        if masked.binary_search(&i).is_err() {
            for v in row.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = noise_scale * z;
            }
        }
    }
    Ok(MaskPlan {
        masked,
        noise,
        seed: rng.gen(),
    })
}

/// Linear warmup to `lr_init`, cosine decay to `lr_min` at `max_steps`,
/// constant afterwards.
pub fn lr_schedule(step: usize, cfg: &Config) -> f64 {
    if cfg.warmup_steps > 0 && step < cfg.warmup_steps {
        return cfg.lr_init * step as f64 / cfg.warmup_steps as f64;
    }
    if step >= cfg.max_steps || cfg.max_steps <= cfg.warmup_steps {
        return cfg.lr_min;
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.max_steps - cfg.warmup_steps) as f64;
    cfg.lr_min + 0.5 * (cfg.lr_init - cfg.lr_min) * (1.0 + (PI * progress).cos())
}

/// Decoupled-weight-decay Adam with bias correction. Missing gradients
/// count as zero; non-finite gradients abort with the parameter name.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: &ParamSet) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|(_, p)| Tensor::zeros(p.data().shape())).collect(),
            v: params.iter().map(|(_, p)| Tensor::zeros(p.data().shape())).collect(),
        }
    }

    /// One update over every parameter accepted by `trainable`.
    pub fn step(
        &mut self,
        params: &ParamSet,
        lr: f64,
        weight_decay: f64,
        trainable: &dyn Fn(&str) -> bool,
    ) -> Result<(), TrainError> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (slot, (name, p)) in params.iter().enumerate() {
            if !trainable(name) {
                continue;
            }
            let g = p.grad_or_zeros();
            if !g.all_finite() {
                return Err(TrainError::NonFiniteGradient { param: name.to_string() });
            }
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let mut data = p.data().clone();
            for i in 0..g.len() {
                let gi = g.data()[i];
                m.data_mut()[i] = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                v.data_mut()[i] = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m.data()[i] / bc1;
                let vhat = v.data()[i] / bc2;
                let x = data.data()[i];
                data.data_mut()[i] = x - lr * mhat / (vhat.sqrt() + self.eps) - lr * weight_decay * x;
            }
            p.set_data(data);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PretrainRow {
    pub step: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_mgm: f64,
    pub loss_denoise: f64,
    pub loss_distill: f64,
    pub distill_cosine_mean: f64,
}

#[derive(Debug, Clone, Default)]
pub struct PretrainLog {
    pub rows: Vec<PretrainRow>,
}

impl PretrainLog {
    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("step,lr,loss_total,loss_mgm,loss_denoise,loss_distill,distill_cosine_mean\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.step, r.lr, r.loss_total, r.loss_mgm, r.loss_denoise, r.loss_distill,
                r.distill_cosine_mean
            ));
        }
        s
    }
}

/// Deterministic epoch-shuffled index stream.
struct BatchStream {
    order: Vec<usize>,
    cursor: usize,
}

impl BatchStream {
    fn new(n: usize) -> Self {
        BatchStream {
            order: (0..n).collect(),
            cursor: 0,
        }
    }

    fn next(&mut self, rng: &mut StdRng) -> usize {
        if self.cursor == 0 {
            self.order.shuffle(rng);
        }
        let i = self.order[self.cursor];
        self.cursor = (self.cursor + 1) % self.order.len();
        i
    }
}

/// Frames handed to the model for one molecule: the atom-removed noised
/// coordinates, the clean full coordinates, and the noise expressed in
/// the (possibly augmented) input frame.
pub fn prepare_frames(
    g: &MolGraph,
    plan: &MaskPlan,
    iso: &Isometry,
) -> (Vec<[f64; 3]>, Vec<[f64; 3]>, Vec<[f64; 3]>) {
    let n = g.n_atoms();
    let kept = plan.unmasked(n);
    let sub_coords: Vec<[f64; 3]> = kept
        .iter()
        .map(|&i| {
            let noised = [
                g.coords[i][0] + plan.noise[i][0],
                g.coords[i][1] + plan.noise[i][1],
                g.coords[i][2] + plan.noise[i][2],
            ];
            iso.apply(noised)
        })
        .collect();
    let clean_coords = iso.apply_all(&g.coords);
    let noise_target: Vec<[f64; 3]> = plan.noise.iter().map(|&v| iso.rotate(v)).collect();
    (sub_coords, clean_coords, noise_target)
}

/// Pretraining (masked-coordinate reconstruction + denoising +
/// distillation) for `cfg.max_steps` optimizer steps. `trainable`
/// selects which parameters the optimizer may move.
pub fn pretrain(
    model: &Model,
    corpus: &[MolGraph],
    cfg: &Config,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<PretrainLog, TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    for (i, g) in corpus.iter().enumerate() {
        if g.n_atoms() < 2 {
            return Err(TrainError::NonFiniteLoss {
                step: 0,
                molecule: i,
                detail: "pretraining requires n >= 2 atoms".into(),
            });
        }
    }
    let params = model.params();
    // frozen parameters drop out of the backward graph entirely
    let restore: Vec<Value> = params
        .iter()
        .filter(|(n, _)| !trainable(n))
        .map(|(_, v)| {
            v.set_requires_grad(false);
            v.clone()
        })
        .collect();
    let mut opt = AdamW::new(&params);
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut stream = BatchStream::new(corpus.len());
    let mut log = PretrainLog::default();
    let per_step = cfg.batch_size * cfg.accumulate_grad_batches;

    for step in 0..cfg.max_steps {
        params.zero_grads();
        let (mut t_total, mut t_mgm, mut t_den, mut t_dis, mut t_cos) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for _ in 0..per_step {
            let mi = stream.next(&mut rng);
            let g = &corpus[mi];
            let plan = sample_mask(g.n_atoms(), cfg.mask_ratio, cfg.noise_scale, &mut rng)?;
            let iso = if cfg.augmentation {
                sample_augmentation(&mut rng)
            } else {
                Isometry::identity()
            };
            let (sub_coords, clean_coords, noise_target) = prepare_frames(g, &plan, &iso);
            let sc = const_coords(&sub_coords);
            let cc = const_coords(&clean_coords);
            let out = model.pretrain_forward(g, &plan, &sc, &cc, &noise_target)?;
            let total = out.loss.data().scalar_value();
            if !total.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    step,
                    molecule: mi,
                    detail: format!(
                        "mgm={} denoise={} distill={}",
                        out.mgm_value(),
                        out.denoise_value(),
                        out.distill_value()
                    ),
                });
            }
            backward(&out.loss.scale(1.0 / per_step as f64));
            t_total += total / per_step as f64;
            t_mgm += out.mgm_value() / per_step as f64;
            t_den += out.denoise_value() / per_step as f64;
            t_dis += out.distill_value() / per_step as f64;
            t_cos += out.cos_mean / per_step as f64;
        }
        let lr = lr_schedule(step + 1, cfg);
        opt.step(&params, lr, cfg.weight_decay, trainable)?;
        if step % cfg.log_every == 0 || step + 1 == cfg.max_steps {
            log.rows.push(PretrainRow {
                step,
                lr,
                loss_total: t_total,
                loss_mgm: t_mgm,
                loss_denoise: t_den,
                loss_distill: t_dis,
                distill_cosine_mean: t_cos,
            });
        }
    }
    for v in restore {
        v.set_requires_grad(true);
    }
    Ok(log)
}

fn const_coords(coords: &[[f64; 3]]) -> Value {
    let flat: Vec<f64> = coords.iter().flatten().copied().collect();
    Value::constant(Tensor::from_vec(flat, &[coords.len(), 3]))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FinetuneTask {
    /// MSE on one scalar label.
    Energy,
    /// MAE on energy plus finite-difference force matching,
    /// weighted energy_weight/force_weight with per-term EMA smoothing.
    EnergyForces,
    /// MSE on an arbitrary scalar label.
    Scalar(String),
}

impl FinetuneTask {
    pub fn label(&self) -> &str {
        match self {
            Self::Energy | Self::EnergyForces => "energy",
            Self::Scalar(name) => name,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneRow {
    pub step: usize,
    pub lr: f64,
    pub loss_energy: f64,
    pub loss_force: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, Default)]
pub struct FinetuneLog {
    pub rows: Vec<FinetuneRow>,
}

impl FinetuneLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,lr,loss_energy,loss_force,mae\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step, r.lr, r.loss_energy, r.loss_force, r.mae
            ));
        }
        s
    }
}

/// Exponential smoothing of a per-step loss term: the previous smoothed
/// value enters as a constant, so gradients scale by alpha.
struct EmaTerm {
    alpha: f64,
    prev: Option<f64>,
}

impl EmaTerm {
    fn new(alpha: f64) -> Self {
        EmaTerm { alpha, prev: None }
    }

    fn apply(&mut self, current: &Value) -> Value {
        let cur = current.data().scalar_value();
        let prev = self.prev.unwrap_or(cur);
        let smoothed = current
            .scale(self.alpha)
            .add_scalar((1.0 - self.alpha) * prev);
        self.prev = Some(smoothed.data().scalar_value());
        smoothed
    }
}

/// Finetune on labeled molecules per the given task. With forces, the
/// force-matching term runs through [`forces_fd`], so 6N extra forward
/// passes back the gradient.
pub fn finetune(
    model: &Model,
    corpus: &[MolGraph],
    task: &FinetuneTask,
    cfg: &Config,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<FinetuneLog, TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let label = task.label();
    for (i, g) in corpus.iter().enumerate() {
        if !g.labels.contains_key(label) {
            return Err(TrainError::MissingLabel {
                molecule: i,
                label: label.to_string(),
            });
        }
        if *task == FinetuneTask::EnergyForces && g.forces.is_none() {
            return Err(TrainError::MissingLabel {
                molecule: i,
                label: "force".into(),
            });
        }
    }
    let params = model.params();
    let mut opt = AdamW::new(&params);
    let mut rng = StdRng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut stream = BatchStream::new(corpus.len());
    let mut ema_y = EmaTerm::new(cfg.ema_alpha_y);
    let mut ema_dy = EmaTerm::new(cfg.ema_alpha_dy);
    let mut log = FinetuneLog::default();

    for step in 0..cfg.max_steps {
        params.zero_grads();
        let mut e_loss = Value::scalar(0.0);
        let mut f_loss = Value::scalar(0.0);
        let mut abs_err = 0.0;
        for _ in 0..cfg.batch_size {
            let mi = stream.next(&mut rng);
            let g = &corpus[mi];
            let y = g.labels[label];
            let frame = if cfg.augmentation {
                let iso = sample_augmentation(&mut rng);
                let mut fg = g.clone();
                fg.coords = iso.apply_all(&g.coords);
                if let Some(fs) = &g.forces {
                    fg.forces = Some(fs.iter().map(|&f| iso.rotate(f)).collect());
                }
                fg
            } else {
                g.clone()
            };
            match task {
                FinetuneTask::EnergyForces => {
                    let e_pred = model.energy(&frame)?;
                    let le = e_pred.add_scalar(-y).abs();
                    let fs = frame.forces.as_ref().expect("checked above");
                    let f_pred = forces_fd(model, &frame, cfg.force_fd_step)?;
                    let target: Vec<f64> = fs.iter().flatten().copied().collect();
                    let target = Value::constant(Tensor::from_vec(target, &[frame.n_atoms(), 3]));
                    let lf = f_pred.sub(&target).abs().mean_all();
                    e_loss = e_loss.add(&le.scale(1.0 / cfg.batch_size as f64));
                    f_loss = f_loss.add(&lf.scale(1.0 / cfg.batch_size as f64));
                    abs_err += (e_pred.data().scalar_value() - y).abs() / cfg.batch_size as f64;
                }
                FinetuneTask::Energy | FinetuneTask::Scalar(_) => {
                    let e_pred = model.energy(&frame)?;
                    let le = e_pred.add_scalar(-y).square();
                    e_loss = e_loss.add(&le.scale(1.0 / cfg.batch_size as f64));
                    abs_err += (e_pred.data().scalar_value() - y).abs() / cfg.batch_size as f64;
                }
            }
        }
        let (total, le_val, lf_val) = match task {
            FinetuneTask::EnergyForces => {
                let se = ema_y.apply(&e_loss);
                let sf = ema_dy.apply(&f_loss);
                let total = se
                    .scale(cfg.energy_weight)
                    .add(&sf.scale(cfg.force_weight));
                let (a, b) = (se.data().scalar_value(), sf.data().scalar_value());
                (total, a, b)
            }
            _ => (e_loss.clone(), e_loss.data().scalar_value(), 0.0),
        };
        let tv = total.data().scalar_value();
        if !tv.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step,
                molecule: 0,
                detail: format!("energy={le_val} force={lf_val}"),
            });
        }
        backward(&total);
        let lr = lr_schedule(step + 1, cfg);
        opt.step(&params, lr, cfg.weight_decay, trainable)?;
        if step % cfg.log_every == 0 || step + 1 == cfg.max_steps {
            log.rows.push(FinetuneRow {
                step,
                lr,
                loss_energy: le_val,
                loss_force: lf_val,
                mae: abs_err,
            });
        }
    }
    Ok(log)
}

/// Central finite-difference forces from any scalar energy function of
/// the coordinates: F[i][c] = -(E(x + h e_ic) - E(x - h e_ic)) / 2h.
/// Every term is an ordinary forward pass, so the result stays
/// differentiable with respect to the parameters inside `energy`.
pub fn forces_fd_with<F>(energy: F, coords: &[[f64; 3]], h: f64) -> Value
where
    F: Fn(&[[f64; 3]]) -> Value,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let n = coords.len();
    let mut comps: Vec<Value> = Vec::with_capacity(3 * n);
    let mut work = coords.to_vec();
    for i in 0..n {
        for c in 0..3 {
            let orig = work[i][c];
            work[i][c] = orig + h;
            let e_plus = energy(&work);
            work[i][c] = orig - h;
            let e_minus = energy(&work);
            work[i][c] = orig;
            comps.push(e_minus.sub(&e_plus).scale(1.0 / (2.0 * h)).reshape(&[1, 1]));
        }
    }
    Value::concat_last(&comps).reshape(&[n, 3])
}

/// Model forces via finite differences of the predicted energy.
pub fn forces_fd(model: &Model, g: &MolGraph, h: f64) -> Result<Value, TrainError> {
    let types = g.atom_types.clone();
    let bonds = g.bonds.clone();
    let out = forces_fd_with(
        |coords| {
            let c = const_coords(coords);
            model
                .energy_from_coords(&c, &types, &bonds)
                .expect("geometry already validated")
        },
        &g.coords,
        h,
    );
    Ok(out)
}

/// Verification-only reverse-mode forces: F = -dE/dx via the tape.
pub fn forces_autodiff(model: &Model, g: &MolGraph) -> Result<Tensor, TrainError> {
    let coords = crate::encoder3d::coords_leaf(&g.coords);
    let e = model.energy_from_coords(&coords, &g.atom_types, &g.bonds)?;
    backward(&e);
    Ok(coords.grad_or_zeros().scale(-1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::generate_synthetic;

    #[test]
    fn mask_size_formula() {
        let mut rng = StdRng::seed_from_u64(1);
        let plan = sample_mask(10, 0.25, 0.04, &mut rng).unwrap();
        assert_eq!(plan.masked.len(), 3); // floor(2.5 + 0.5)
        let plan = sample_mask(2, 0.25, 0.04, &mut rng).unwrap();
        assert_eq!(plan.masked.len(), 1); // clamped up
        assert!(sample_mask(1, 0.25, 0.04, &mut rng).is_err());
        // formula holds over the whole grid
        for n in 2..=32usize {
            for p10 in 1..=9usize {
                let p = p10 as f64 / 10.0;
                let plan = sample_mask(n, p, 0.0, &mut rng).unwrap();
                let want = ((p * n as f64 + 0.5).floor() as usize).clamp(1, n - 1);
                assert_eq!(plan.masked.len(), want, "n={n} p={p}");
            }
        }
    }

    #[test]
    fn mask_noise_zero_on_masked_rows() {
        let mut rng = StdRng::seed_from_u64(2);
        let plan = sample_mask(8, 0.25, 0.04, &mut rng).unwrap();
        for &i in &plan.masked {
            assert_eq!(plan.noise[i], [0.0; 3]);
        }
        let has_noise = plan
            .unmasked(8)
            .iter()
            .any(|&i| plan.noise[i] != [0.0; 3]);
        assert!(has_noise);
    }

    #[test]
    fn mask_selection_uniform() {
        let mut rng = StdRng::seed_from_u64(3);
        let n = 8;
        let draws = 100_000;
        let mut counts = vec![0usize; n];
        for _ in 0..draws {
            let plan = sample_mask(n, 0.25, 0.0, &mut rng).unwrap();
            for &i in &plan.masked {
                counts[i] += 1;
            }
        }
        let expect = 2.0 / n as f64; // |V_m| = 2 of 8
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / draws as f64;
            assert!((freq - expect).abs() < 0.01, "atom {i}: freq {freq}");
        }
    }

    #[test]
    fn augmentation_is_isometry_with_unit_determinant() {
        let mut rng = StdRng::seed_from_u64(4);
        let g = generate_synthetic(15, 1, 8..=8).unwrap().remove(0);
        for _ in 0..20 {
            let iso = sample_augmentation(&mut rng);
            let moved = iso.apply_all(&g.coords);
            for i in 0..8 {
                for j in (i + 1)..8 {
                    let d0 = g.distance(i, j);
                    let d1 = {
                        let a = moved[i];
                        let b = moved[j];
                        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2))
                            .sqrt()
                    };
                    assert!((d0 - d1).abs() < 1e-12);
                }
            }
            let r = iso.r;
            let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
                - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
                + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
            assert!((det - 1.0).abs() < 1e-12, "det {det}");
            for a in 0..3 {
                for b in 0..3 {
                    let dot: f64 = (0..3).map(|k| r[k][a] * r[k][b]).sum();
                    let want = if a == b { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn translation_variance_matches() {
        let mut rng = StdRng::seed_from_u64(5);
        let draws = 100_000;
        let mut sum = [0.0f64; 3];
        let mut sumsq = [0.0f64; 3];
        for _ in 0..draws {
            let iso = sample_augmentation(&mut rng);
            for c in 0..3 {
                sum[c] += iso.t[c];
                sumsq[c] += iso.t[c] * iso.t[c];
            }
        }
        for c in 0..3 {
            let mean = sum[c] / draws as f64;
            let var = sumsq[c] / draws as f64 - mean * mean;
            assert!((var - 0.01).abs() < 0.0005, "axis {c}: var {var}");
        }
    }

    #[test]
    fn schedule_endpoints() {
        let mut cfg = Config::default();
        cfg.warmup_steps = 10_000;
        cfg.max_steps = 100_000;
        assert_eq!(lr_schedule(0, &cfg), 0.0);
        assert!((lr_schedule(10_000, &cfg) - 5e-5).abs() < 1e-18);
        assert!((lr_schedule(100_000, &cfg) - 1e-6).abs() < 1e-18);
        assert!((lr_schedule(200_000, &cfg) - 1e-6).abs() < 1e-18);
        // midpoint of the cosine arc
        let mid = lr_schedule(55_000, &cfg);
        let want = 1e-6 + 0.5 * (5e-5 - 1e-6);
        assert!((mid - want).abs() < 1e-12);
    }

    #[test]
    fn adamw_first_step_and_decay() {
        // bias-corrected unit update: first step moves by ~lr
        let p = Value::param(Tensor::scalar(0.0));
        let mut ps = ParamSet::new();
        ps.register("w", &p);
        let mut opt = AdamW::new(&ps);
        p.zero_grad();
        backward(&p.clone()); // dL/dp = 1
        opt.step(&ps, 0.1, 0.0, &|_| true).unwrap();
        assert!((p.data().scalar_value() + 0.1).abs() < 1e-6);

        // decoupled decay alone: p <- p (1 - lr*wd)
        let p = Value::param(Tensor::scalar(2.0));
        let mut ps = ParamSet::new();
        ps.register("w", &p);
        let mut opt = AdamW::new(&ps);
        opt.step(&ps, 0.1, 0.1, &|_| true).unwrap();
        assert!((p.data().scalar_value() - 2.0 * (1.0 - 0.01)).abs() < 1e-12);

        // zero gradient, zero decay: unchanged
        let p = Value::param(Tensor::scalar(3.0));
        let mut ps = ParamSet::new();
        ps.register("w", &p);
        let mut opt = AdamW::new(&ps);
        opt.step(&ps, 0.1, 0.0, &|_| true).unwrap();
        assert_eq!(p.data().scalar_value(), 3.0);
    }

    #[test]
    fn adamw_rejects_non_finite_gradient() {
        let p = Value::param(Tensor::scalar(0.0));
        let mut ps = ParamSet::new();
        ps.register("bad.param", &p);
        p.zero_grad();
        backward(&p.scale(f64::INFINITY).sum_all());
        let mut opt = AdamW::new(&ps);
        match opt.step(&ps, 0.1, 0.0, &|_| true) {
            Err(TrainError::NonFiniteGradient { param }) => assert_eq!(param, "bad.param"),
            other => panic!("expected gradient error, got {:?}", other.is_ok()),
        }
    }

    #[test]
    fn ema_alpha_one_is_identity() {
        let mut ema = EmaTerm::new(1.0);
        for v in [3.0, 1.5, 9.0] {
            let s = ema.apply(&Value::scalar(v));
            assert_eq!(s.data().scalar_value(), v);
        }
        // alpha 0.5 mixes half and half
        let mut ema = EmaTerm::new(0.5);
        assert_eq!(ema.apply(&Value::scalar(4.0)).data().scalar_value(), 4.0);
        assert_eq!(ema.apply(&Value::scalar(0.0)).data().scalar_value(), 2.0);
    }

    #[test]
    fn forces_fd_constant_and_quadratic() {
        let coords = vec![[0.3, -0.2, 0.5], [1.1, 0.4, -0.7]];
        let f = forces_fd_with(|_| Value::scalar(7.25), &coords, 1e-3);
        for &v in f.data().data() {
            assert!(v.abs() < 1e-8);
        }
        // E = sum ||x||^2 gives F = -2x up to O(h^2)
        let f = forces_fd_with(
            |c| {
                let flat: Vec<f64> = c.iter().flatten().copied().collect();
                Value::constant(Tensor::from_vec(flat, &[c.len(), 3]))
                    .square()
                    .sum_all()
            },
            &coords,
            1e-3,
        );
        for (i, row) in coords.iter().enumerate() {
            for c in 0..3 {
                let want = -2.0 * row[c];
                assert!((f.data().at2(i, c) - want).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn forces_fd_matches_reverse_mode() {
        let mut cfg = Config::desk();
        cfg.d_model = 8;
        cfg.heads = 2;
        cfg.layers = 1;
        cfg.k_rbf = 4;
        cfg.pe_width = 8;
        cfg.pe_heads = 2;
        cfg.pe_layers = 1;
        cfg.seed = 11;
        let model = Model::new(&cfg);
        let g = generate_synthetic(16, 1, 4..=4).unwrap().remove(0);
        let fd = forces_fd(&model, &g, 1e-4).unwrap();
        let ad = forces_autodiff(&model, &g).unwrap();
        for i in 0..4 {
            for c in 0..3 {
                let a = fd.data().at2(i, c);
                let b = ad.at2(i, c);
                let rel = (a - b).abs() / (a.abs() + b.abs() + 1e-12);
                assert!(rel < 1e-5, "atom {i} comp {c}: fd {a} ad {b} rel {rel}");
            }
        }
    }

    #[test]
    fn pretrain_is_seed_deterministic() {
        let mut cfg = Config::desk();
        cfg.d_model = 8;
        cfg.heads = 2;
        cfg.layers = 1;
        cfg.k_rbf = 4;
        cfg.pe_width = 8;
        cfg.pe_heads = 2;
        cfg.pe_layers = 1;
        cfg.batch_size = 2;
        cfg.max_steps = 3;
        cfg.warmup_steps = 1;
        cfg.seed = 21;
        let corpus = generate_synthetic(17, 4, 4..=6).unwrap();
        let run = || {
            let model = Model::new(&cfg);
            pretrain(&model, &corpus, &cfg, &|_| true).unwrap();
            crate::checkpoint::Checkpoint::from_params(&model.params()).to_bytes()
        };
        assert_eq!(run(), run(), "same seed must give bit-identical checkpoints");
    }

    #[test]
    fn finetune_missing_label_errors() {
        let cfg = Config::desk();
        let model = Model::new(&cfg);
        let corpus = generate_synthetic(18, 2, 4..=5).unwrap();
        match finetune(&model, &corpus, &FinetuneTask::Energy, &cfg, &|_| true) {
            Err(TrainError::MissingLabel { label, .. }) => assert_eq!(label, "energy"),
            other => panic!("expected missing label, got {:?}", other.is_ok()),
        }
    }
}
