//! Scripted analysis experiments over frozen checkpoints: decoder
//! leakage comparisons, masked-coordinate probing, position-encoding
//! reconstruction probing, and position-encoding classification.
//!
//! Probes are 2-layer feedforward heads (width 128) trained 2000 steps
//! at lr 1e-3 unless configured otherwise; the probed modules stay
//! frozen, asserted by bitwise parameter comparison.

use crate::autodiff::{backward, ParamSet, Value};
use crate::config::Config;
use crate::model::Model;
use crate::molgraph::MolGraph;
use crate::tensor::Tensor;
use crate::train::{pretrain, sample_mask, AdamW, TrainError};
use rand::prelude::*;

pub const PROBE_WIDTH: usize = 128;
pub const PROBE_STEPS: usize = 2000;
pub const PROBE_LR: f64 = 1e-3;

/// Averaging window for reported loss series.
pub const SERIES_WINDOW: usize = 50;

#[derive(Debug, Clone, Default)]
pub struct ProbeReport {
    pub experiment: String,
    pub series: Vec<(String, Vec<f64>)>,
    pub summary: Vec<(String, f64)>,
    pub passes: Vec<(String, bool)>,
    pub config_snapshot: String,
}

impl ProbeReport {
    pub fn summary_value(&self, key: &str) -> Option<f64> {
        self.summary.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    pub fn pass(&self, key: &str) -> Option<bool> {
        self.passes.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    /// One column per series, padded with empty cells.
    pub fn series_csv(&self) -> String {
        let mut s = String::new();
        s.push_str("index");
        for (name, _) in &self.series {
            s.push(',');
            s.push_str(name);
        }
        s.push('\n');
        let rows = self.series.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
        for r in 0..rows {
            s.push_str(&r.to_string());
            for (_, v) in &self.series {
                s.push(',');
                if let Some(x) = v.get(r) {
                    s.push_str(&format!("{x}"));
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn summary_json(&self) -> String {
        fn num(v: f64) -> String {
            if v.is_finite() {
                format!("{v}")
            } else {
                "null".to_string()
            }
        }
        let mut s = String::from("{\n");
        s.push_str(&format!("  \"experiment\": \"{}\",\n", self.experiment));
        s.push_str("  \"summary\": {");
        for (i, (k, v)) in self.summary.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            s.push_str(&format!("\n    \"{k}\": {}", num(*v)));
        }
        s.push_str("\n  },\n  \"passes\": {");
        for (i, (k, v)) in self.passes.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            s.push_str(&format!("\n    \"{k}\": {v}"));
        }
        s.push_str("\n  }\n}\n");
        s
    }
}

fn window_means(series: &[f64], window: usize) -> Vec<f64> {
    series
        .chunks(window)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

fn final_window_mean(series: &[f64]) -> f64 {
    let w = (series.len() / 10).max(1);
    series[series.len() - w..].iter().sum::<f64>() / w as f64
}

fn snapshot_bits(ps: &ParamSet) -> Vec<Vec<u64>> {
    ps.iter()
        .map(|(_, v)| v.data().data().iter().map(|x| x.to_bits()).collect())
        .collect()
}

fn assert_frozen(ps: &ParamSet, before: &[Vec<u64>], what: &str) {
    for ((name, v), snap) in ps.iter().zip(before.iter()) {
        let now: Vec<u64> = v.data().data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(&now, snap, "{what}: parameter {name} drifted during probe");
    }
}

/// Analysis 1: pretrain the autoencoder under the four
/// frozen/trainable x structure-dependent/independent settings with
/// plain re-mask decoding and report windowed reconstruction losses.
pub fn leakage_experiment(corpus: &[MolGraph], base: &Config) -> Result<ProbeReport, TrainError> {
    let mut arm_base = base.clone();
    arm_base.srd_enabled = false;
    arm_base.distill_enabled = false;
    arm_base.denoise_weight = 0.0;
    arm_base.augmentation = false;

    let arms = [
        ("frozen_independent", true, false),
        ("frozen_dependent", true, true),
        ("trainable_independent", false, false),
        ("trainable_dependent", false, true),
    ];
    let mut report = ProbeReport {
        experiment: "analysis1_leakage".into(),
        config_snapshot: arm_base.snapshot(),
        ..Default::default()
    };
    let mut finals = Vec::new();
    for (name, frozen, dep) in arms {
        let mut cfg = arm_base.clone();
        cfg.encoder_frozen = frozen;
        cfg.decoder_structure_dependent = dep;
        let model = Model::new(&cfg);
        let trainable = move |pname: &str| {
            !(frozen && (pname.starts_with("feat.") || pname.starts_with("enc.")))
        };
        let encoder_snapshot: Option<Vec<Vec<u64>>> = if frozen {
            Some(snapshot_bits(&model.params()))
        } else {
            None
        };
        let log = pretrain(&model, corpus, &cfg, &trainable)?;
        if let Some(before) = encoder_snapshot {
            let ps = model.params();
            for (slot, (pname, v)) in ps.iter().enumerate() {
                if pname.starts_with("feat.") || pname.starts_with("enc.") {
                    let now: Vec<u64> = v.data().data().iter().map(|x| x.to_bits()).collect();
                    assert_eq!(now, before[slot], "frozen encoder drifted: {pname}");
                }
            }
        }
        let mgm: Vec<f64> = log.rows.iter().map(|r| r.loss_mgm).collect();
        let windowed = window_means(&mgm, SERIES_WINDOW);
        finals.push((name.to_string(), final_window_mean(&mgm)));
        report.series.push((name.to_string(), windowed));
    }
    for (name, v) in &finals {
        report.summary.push((format!("{name}_final"), *v));
    }
    let get = |n: &str| finals.iter().find(|(k, _)| k == n).unwrap().1;
    let fi = get("frozen_independent");
    let fd = get("frozen_dependent");
    let ti = get("trainable_independent");
    report
        .passes
        .push(("trainable_indep_below_frozen_dep".into(), ti < fd));
    report
        .passes
        .push(("frozen_dep_below_frozen_indep".into(), fd < fi));
    report
        .passes
        .push(("frozen_dep_below_half_of_frozen_indep".into(), fd < 0.5 * fi));
    Ok(report)
}

/// A 2-layer feedforward probe head.
struct Probe {
    w1: Value,
    b1: Value,
    w2: Value,
    b2: Value,
    params: ParamSet,
}

impl Probe {
    fn new(d_in: usize, d_out: usize, seed: u64) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let w1 = crate::featurize::init_matrix(&mut rng, d_in, PROBE_WIDTH);
        let b1 = Value::param(Tensor::zeros(&[PROBE_WIDTH]));
        let w2 = crate::featurize::init_matrix(&mut rng, PROBE_WIDTH, d_out);
        let b2 = Value::param(Tensor::zeros(&[d_out]));
        let mut params = ParamSet::new();
        params.register("probe.w1", &w1);
        params.register("probe.b1", &b1);
        params.register("probe.w2", &w2);
        params.register("probe.b2", &b2);
        Probe { w1, b1, w2, b2, params }
    }

    fn forward(&self, x: &Value) -> Value {
        x.matmul(&self.w1).add(&self.b1).silu().matmul(&self.w2).add(&self.b2)
    }
}

/// Deterministic 75/25 split by group (molecule). Whole molecules go to
/// one side, so held-out scores measure generalization to unseen
/// structures rather than per-molecule memorization.
fn split_groups(groups: &[usize], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut gids: Vec<usize> = groups.to_vec();
    gids.sort_unstable();
    gids.dedup();
    gids.shuffle(&mut StdRng::seed_from_u64(seed ^ 0x51117));
    let cut = (gids.len() * 3) / 4;
    let train_g: std::collections::BTreeSet<usize> = gids[..cut].iter().copied().collect();
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for (row, g) in groups.iter().enumerate() {
        if train_g.contains(g) {
            train.push(row);
        } else {
            eval.push(row);
        }
    }
    (train, eval)
}

/// Full-batch probe training on a regression target (mean squared
/// error). Trains on a 75% molecule split and returns the held-out
/// loss series.
fn train_probe_mse(inputs: &Tensor, targets: &Tensor, groups: &[usize], steps: usize, seed: u64) -> Vec<f64> {
    let (tr, ev) = split_groups(groups, seed);
    let probe = Probe::new(inputs.shape()[1], targets.shape()[1], seed);
    let x = Value::constant(select_rows(inputs, &tr));
    let t = Value::constant(select_rows(targets, &tr));
    let xe = Value::constant(select_rows(inputs, &ev));
    let te = Value::constant(select_rows(targets, &ev));
    let mut opt = AdamW::new(&probe.params);
    let mut series = Vec::with_capacity(steps);
    for _ in 0..steps {
        probe.params.zero_grads();
        let eval = probe.forward(&xe).sub(&te).square().mean_all();
        series.push(eval.data().scalar_value());
        let loss = probe.forward(&x).sub(&t).square().mean_all();
        backward(&loss);
        opt.step(&probe.params, PROBE_LR, 0.0, &|_| true).expect("probe step");
    }
    series
}

fn mean_cosine(probe: &Probe, x: &Value, t: &Value, t_norm: &Value) -> Value {
    let pred = probe.forward(x);
    let dot = pred.mul(t).sum_axis(1);
    let p_norm = pred.square().sum_axis(1).add_scalar(1e-12).sqrt();
    dot.div(&p_norm.mul(t_norm)).mean_all()
}

/// Full-batch probe training maximizing rowwise cosine similarity.
/// Trains on a 75% molecule split and returns the held-out mean-cosine
/// series.
fn train_probe_cosine(inputs: &Tensor, targets: &Tensor, groups: &[usize], steps: usize, seed: u64) -> Vec<f64> {
    let (tr, ev) = split_groups(groups, seed);
    let probe = Probe::new(inputs.shape()[1], targets.shape()[1], seed);
    let x = Value::constant(select_rows(inputs, &tr));
    let t = Value::constant(select_rows(targets, &tr));
    let t_norm = t.square().sum_axis(1).add_scalar(1e-12).sqrt();
    let xe = Value::constant(select_rows(inputs, &ev));
    let te = Value::constant(select_rows(targets, &ev));
    let te_norm = te.square().sum_axis(1).add_scalar(1e-12).sqrt();
    let mut opt = AdamW::new(&probe.params);
    let mut series = Vec::with_capacity(steps);
    for _ in 0..steps {
        probe.params.zero_grads();
        series.push(mean_cosine(&probe, &xe, &te, &te_norm).data().scalar_value());
        let objective = mean_cosine(&probe, &x, &t, &t_norm).neg();
        backward(&objective);
        opt.step(&probe.params, PROBE_LR, 0.0, &|_| true).expect("probe step");
    }
    series
}

/// Classifier probe: returns (train-step accuracy series on the training
/// rows, final accuracy on the eval rows).
fn train_probe_classifier(
    train_x: &Tensor,
    train_y: &[usize],
    eval_x: &Tensor,
    eval_y: &[usize],
    classes: usize,
    steps: usize,
    seed: u64,
) -> (Vec<f64>, f64) {
    let probe = Probe::new(train_x.shape()[1], classes, seed);
    let x = Value::constant(train_x.clone());
    let mut opt = AdamW::new(&probe.params);
    let mut series = Vec::with_capacity(steps);
    for _ in 0..steps {
        probe.params.zero_grads();
        let logits = probe.forward(&x);
        series.push(accuracy(&logits.data(), train_y));
        let loss = logits.softmax_cross_entropy(train_y);
        backward(&loss);
        opt.step(&probe.params, PROBE_LR, 0.0, &|_| true).expect("probe step");
    }
    let eval_logits = probe.forward(&Value::constant(eval_x.clone()));
    let final_acc = accuracy(&eval_logits.data(), eval_y);
    (series, final_acc)
}

fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let mut correct = 0usize;
    for (row, &label) in labels.iter().enumerate() {
        let slice = &logits.data()[row * k..(row + 1) * k];
        let mut best = 0usize;
        for c in 1..k {
            if slice[c] > slice[best] {
                best = c;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct as f64 / labels.len() as f64
}

/// Masked-atom pooled inputs for the Analysis-4 probe: for every masked
/// atom, the mean encoder output of its 4 nearest unmasked atoms.
fn masked_coord_dataset(
    model: &Model,
    corpus: &[MolGraph],
    mask_ratio: f64,
    seed: u64,
) -> (Tensor, Tensor, Vec<usize>) {
    let mut rng = StdRng::seed_from_u64(seed);
    let d = model.cfg.d_model;
    let mut rows: Vec<f64> = Vec::new();
    let mut targets: Vec<f64> = Vec::new();
    let mut groups: Vec<usize> = Vec::new();
    let mut count = 0usize;
    for (gi, g) in corpus.iter().enumerate() {
        let n = g.n_atoms();
        let plan = sample_mask(n, mask_ratio, 0.0, &mut rng).expect("corpus molecules have n >= 2");
        let (sub, kept) = g.remove_atoms(&plan.masked);
        let coords = crate::encoder3d::coords_leaf(&sub.coords);
        let h = model
            .enc
            .encode(&model.feat, &coords, &sub.atom_types, &sub.bonds)
            .expect("generator geometry is valid")
            .scalar;
        let h = h.data().clone();
        for &m in &plan.masked {
            let mut neighbors: Vec<(f64, usize)> = kept
                .iter()
                .enumerate()
                .map(|(row, &orig)| (g.distance(m, orig), row))
                .collect();
            neighbors.sort_by(|a, b| a.0.total_cmp(&b.0));
            let k = neighbors.len().min(4);
            let mut pooled = vec![0.0; d];
            for &(_, row) in &neighbors[..k] {
                for c in 0..d {
                    pooled[c] += h.at2(row, c) / k as f64;
                }
            }
            rows.extend_from_slice(&pooled);
            targets.extend_from_slice(&g.coords[m]);
            groups.push(gi);
            count += 1;
        }
    }
    (
        Tensor::from_vec(rows, &[count, d]),
        Tensor::from_vec(targets, &[count, 3]),
        groups,
    )
}

/// Analysis 4: can a probe recover masked-atom coordinates from frozen
/// encoder representations? Compares two checkpoints (pretrained with
/// and without SRD).
pub fn probe_masked_coords(
    model_with: &Model,
    model_without: &Model,
    corpus: &[MolGraph],
    probe_steps: usize,
    seed: u64,
) -> ProbeReport {
    let mut report = ProbeReport {
        experiment: "analysis4_masked_coords".into(),
        config_snapshot: model_with.cfg.snapshot(),
        ..Default::default()
    };
    let mut finals = Vec::new();
    for (name, model) in [("with_srd", model_with), ("without_srd", model_without)] {
        let ps = model.params();
        let before = snapshot_bits(&ps);
        let (inputs, targets, groups) = masked_coord_dataset(model, corpus, model.cfg.mask_ratio, seed);
        let series = train_probe_mse(&inputs, &targets, &groups, probe_steps, seed ^ 0x9e37);
        assert_frozen(&ps, &before, "analysis4");
        finals.push((name, final_window_mean(&series)));
        report
            .series
            .push((name.to_string(), window_means(&series, SERIES_WINDOW)));
    }
    let with = finals[0].1;
    let without = finals[1].1;
    report.summary.push(("with_srd_final".into(), with));
    report.summary.push(("without_srd_final".into(), without));
    report.summary.push(("ratio".into(), with / without));
    report
        .passes
        .push(("with_srd_at_least_1p5x_without".into(), with >= 1.5 * without));
    report
}

/// Per-atom (encoder representation, position encoding) pairs over the
/// clean corpus, both detached.
fn pe_reconstruction_dataset(
    h_model: &Model,
    pe_model: &Model,
    corpus: &[MolGraph],
) -> (Tensor, Tensor, Vec<usize>) {
    let d = h_model.cfg.d_model;
    let mut xs: Vec<f64> = Vec::new();
    let mut ts: Vec<f64> = Vec::new();
    let mut groups: Vec<usize> = Vec::new();
    let mut count = 0usize;
    for (gi, g) in corpus.iter().enumerate() {
        let (out, _) = h_model.encode_full(g).expect("valid geometry");
        let pe = pe_model.pe_full(g);
        xs.extend_from_slice(out.scalar.data().data());
        ts.extend_from_slice(pe.data().data());
        groups.extend(std::iter::repeat(gi).take(g.n_atoms()));
        count += g.n_atoms();
    }
    (
        Tensor::from_vec(xs, &[count, d]),
        Tensor::from_vec(ts, &[count, d]),
        groups,
    )
}

/// Analysis 5: reconstruct position encodings from frozen 3D encoder
/// representations, for the distilled checkpoint and an un-distilled
/// control.
pub fn probe_pe_reconstruction(
    distilled: &Model,
    control_pe: &Model,
    corpus: &[MolGraph],
    probe_steps: usize,
    seed: u64,
) -> ProbeReport {
    let mut report = ProbeReport {
        experiment: "analysis5_pe_reconstruction".into(),
        config_snapshot: distilled.cfg.snapshot(),
        ..Default::default()
    };
    let ps = distilled.params();
    let before = snapshot_bits(&ps);

    let (x_d, t_d, groups) = pe_reconstruction_dataset(distilled, distilled, corpus);
    let s_d = train_probe_cosine(&x_d, &t_d, &groups, probe_steps, seed);
    let (x_c, t_c, groups_c) = pe_reconstruction_dataset(distilled, control_pe, corpus);
    let s_c = train_probe_cosine(&x_c, &t_c, &groups_c, probe_steps, seed);
    assert_frozen(&ps, &before, "analysis5");

    let d_final = final_window_mean(&s_d);
    let c_final = final_window_mean(&s_c);
    report.series.push(("distilled".into(), window_means(&s_d, SERIES_WINDOW)));
    report.series.push(("control".into(), window_means(&s_c, SERIES_WINDOW)));
    report.summary.push(("distilled_cosine".into(), d_final));
    report.summary.push(("control_cosine".into(), c_final));
    report.summary.push(("gap".into(), d_final - c_final));
    report.passes.push(("distilled_above_0p95".into(), d_final > 0.95));
    report
        .passes
        .push(("gap_at_least_0p2".into(), d_final - c_final >= 0.2));
    report
}

/// Subsample indices so every class appears equally often; chance for
/// the balanced set is exactly 1/K.
fn balance_classes(labels: &[usize], classes: usize, rng: &mut StdRng) -> Vec<usize> {
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        buckets[l].push(i);
    }
    let per = buckets
        .iter()
        .filter(|b| !b.is_empty())
        .map(|b| b.len())
        .min()
        .unwrap_or(0);
    let mut out = Vec::new();
    for b in buckets.iter_mut() {
        if b.is_empty() {
            continue;
        }
        b.shuffle(rng);
        out.extend_from_slice(&b[..per]);
    }
    out.shuffle(rng);
    out
}

fn select_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let w = t.shape()[1];
    let mut out = Vec::with_capacity(idx.len() * w);
    for &i in idx {
        out.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
    }
    Tensor::from_vec(out, &[idx.len(), w])
}

struct ClassifyOutcome {
    accuracy: f64,
    control_accuracy: f64,
    chance: f64,
    majority_baseline: f64,
    present_classes: usize,
}

fn run_classifier_probe(
    inputs: Tensor,
    labels: Vec<usize>,
    groups: Vec<usize>,
    classes: usize,
    probe_steps: usize,
    seed: u64,
) -> ClassifyOutcome {
    let mut rng = StdRng::seed_from_u64(seed);
    // remap to the classes actually present so balancing is exact
    let mut present: Vec<usize> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    let remap: Vec<usize> = labels
        .iter()
        .map(|l| present.binary_search(l).unwrap())
        .collect();
    let k = present.len();
    let _ = classes;

    // molecule-level split, then class-balance each side independently
    let (tr_rows, ev_rows) = split_groups(&groups, seed ^ 0x517);
    let tr_labels: Vec<usize> = tr_rows.iter().map(|&r| remap[r]).collect();
    let ev_labels: Vec<usize> = ev_rows.iter().map(|&r| remap[r]).collect();
    let tr_bal = balance_classes(&tr_labels, k, &mut rng);
    let ev_bal = balance_classes(&ev_labels, k, &mut rng);
    let tr_sel: Vec<usize> = tr_bal.iter().map(|&i| tr_rows[i]).collect();
    let ev_sel: Vec<usize> = ev_bal.iter().map(|&i| ev_rows[i]).collect();
    let train_x = select_rows(&inputs, &tr_sel);
    let eval_x = select_rows(&inputs, &ev_sel);
    let train_y: Vec<usize> = tr_sel.iter().map(|&r| remap[r]).collect();
    let eval_y: Vec<usize> = ev_sel.iter().map(|&r| remap[r]).collect();
    let y: Vec<usize> = train_y.iter().chain(eval_y.iter()).copied().collect();

    let (_series, acc) =
        train_probe_classifier(&train_x, &train_y, &eval_x, &eval_y, k, probe_steps, seed);

    // control: labels shuffled independently in train and eval
    let mut sh_train = train_y.clone();
    sh_train.shuffle(&mut rng);
    let mut sh_eval = eval_y.clone();
    sh_eval.shuffle(&mut rng);
    let (_s, control_acc) =
        train_probe_classifier(&train_x, &sh_train, &eval_x, &sh_eval, k, probe_steps, seed ^ 1);

    let mut counts = vec![0usize; k];
    for &l in &y {
        counts[l] += 1;
    }
    let majority = counts.iter().copied().max().unwrap_or(0) as f64 / y.len() as f64;
    ClassifyOutcome {
        accuracy: acc,
        control_accuracy: control_acc,
        chance: 1.0 / k as f64,
        majority_baseline: majority,
        present_classes: k,
    }
}

/// Analysis 6: predict atom types from pe_i and bond categories from
/// [pe_i; pe_j] with the position encoder frozen.
pub fn probe_pe_classify(
    model: &Model,
    corpus: &[MolGraph],
    probe_steps: usize,
    seed: u64,
) -> ProbeReport {
    let mut report = ProbeReport {
        experiment: "analysis6_pe_classify".into(),
        config_snapshot: model.cfg.snapshot(),
        ..Default::default()
    };
    let ps = model.params();
    let before = snapshot_bits(&ps);
    let d = model.cfg.d_model;
    let mut rng = StdRng::seed_from_u64(seed);

    // atom-type dataset
    let mut atom_x: Vec<f64> = Vec::new();
    let mut atom_y: Vec<usize> = Vec::new();
    let mut atom_g: Vec<usize> = Vec::new();
    // bond dataset over bonded plus sampled non-bonded pairs
    let mut bond_x: Vec<f64> = Vec::new();
    let mut bond_y: Vec<usize> = Vec::new();
    let mut bond_g: Vec<usize> = Vec::new();
    for (gi, g) in corpus.iter().enumerate() {
        let pe = model.pe_full(g);
        let pe = pe.data().clone();
        let n = g.n_atoms();
        for i in 0..n {
            atom_x.extend_from_slice(&pe.data()[i * d..(i + 1) * d]);
            atom_y.push(g.atom_types[i]);
            atom_g.push(gi);
        }
        let push_pair = |i: usize, j: usize, cat: usize, bx: &mut Vec<f64>, by: &mut Vec<usize>| {
            bx.extend_from_slice(&pe.data()[i * d..(i + 1) * d]);
            bx.extend_from_slice(&pe.data()[j * d..(j + 1) * d]);
            by.push(cat);
        };
        let bonded: std::collections::BTreeSet<(usize, usize)> =
            g.bonds.iter().map(|b| (b.i, b.j)).collect();
        for b in &g.bonds {
            push_pair(b.i, b.j, b.order as usize, &mut bond_x, &mut bond_y);
            bond_g.push(gi);
        }
        // as many non-bonded samples as bonds, when available
        let mut nonbonded: Vec<(usize, usize)> = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if !bonded.contains(&(i, j)) {
                    nonbonded.push((i, j));
                }
            }
        }
        nonbonded.shuffle(&mut rng);
        for &(i, j) in nonbonded.iter().take(g.bonds.len()) {
            push_pair(i, j, 0, &mut bond_x, &mut bond_y);
            bond_g.push(gi);
        }
    }

    let atoms = run_classifier_probe(
        Tensor::from_vec(atom_x, &[atom_y.len(), d]),
        atom_y,
        atom_g,
        crate::molgraph::ELEMENTS.len(),
        probe_steps,
        seed ^ 0xa70,
    );
    let bonds = run_classifier_probe(
        Tensor::from_vec(bond_x, &[bond_y.len(), 2 * d]),
        bond_y,
        bond_g,
        crate::featurize::EDGE_CATEGORIES,
        probe_steps,
        seed ^ 0xb0d,
    );
    assert_frozen(&ps, &before, "analysis6");

    report.summary.push(("atom_accuracy".into(), atoms.accuracy));
    report.summary.push(("atom_control".into(), atoms.control_accuracy));
    report.summary.push(("atom_chance".into(), atoms.chance));
    report
        .summary
        .push(("atom_majority_baseline".into(), atoms.majority_baseline));
    report
        .summary
        .push(("atom_classes".into(), atoms.present_classes as f64));
    report.summary.push(("bond_accuracy".into(), bonds.accuracy));
    report.summary.push(("bond_control".into(), bonds.control_accuracy));
    report.summary.push(("bond_chance".into(), bonds.chance));
    report
        .summary
        .push(("bond_majority_baseline".into(), bonds.majority_baseline));
    report
        .summary
        .push(("bond_classes".into(), bonds.present_classes as f64));
    report.passes.push(("atom_above_99".into(), atoms.accuracy > 0.99));
    report.passes.push(("bond_above_99".into(), bonds.accuracy > 0.99));
    report.passes.push((
        "atom_control_within_5pp_of_chance".into(),
        (atoms.control_accuracy - atoms.chance).abs() <= 0.05,
    ));
    report.passes.push((
        "bond_control_within_5pp_of_chance".into(),
        (bonds.control_accuracy - bonds.chance).abs() <= 0.05,
    ));
    report
}

/// Diagnostic for probe calibration: prints train and held-out probe
/// losses on the masked-coordinate task.
pub fn diag_masked_probe(model: &Model, corpus: &[MolGraph], seed: u64, tag: &str) {
    let (inputs, targets, groups) = masked_coord_dataset(model, corpus, model.cfg.mask_ratio, seed);
    let (tr, ev) = split_groups(&groups, seed);
    let probe = Probe::new(inputs.shape()[1], targets.shape()[1], seed ^ 0x9e37);
    let x = Value::constant(select_rows(&inputs, &tr));
    let t = Value::constant(select_rows(&targets, &tr));
    let xe = Value::constant(select_rows(&inputs, &ev));
    let te = Value::constant(select_rows(&targets, &ev));
    let mut opt = AdamW::new(&probe.params);
    for step in 0..PROBE_STEPS {
        probe.params.zero_grads();
        let loss = probe.forward(&x).sub(&t).square().mean_all();
        if step % 400 == 0 || step + 1 == PROBE_STEPS {
            let ev_loss = probe.forward(&xe).sub(&te).square().mean_all();
            println!("{tag} step {step}: train {:.4} heldout {:.4}",
                loss.data().scalar_value(), ev_loss.data().scalar_value());
        }
        backward(&loss);
        opt.step(&probe.params, PROBE_LR, 0.0, &|_| true).expect("probe step");
    }
}

/// Convenience used by the zero-step baseline example: untrained probe
/// loss on the masked-coordinate task.
pub fn untrained_probe_loss(model: &Model, corpus: &[MolGraph], seed: u64) -> (f64, f64) {
    let (inputs, targets, _groups) = masked_coord_dataset(model, corpus, model.cfg.mask_ratio, seed);
    let probe = Probe::new(inputs.shape()[1], targets.shape()[1], seed);
    let x = Value::constant(inputs);
    let t = Value::constant(targets.clone());
    let loss = probe.forward(&x).sub(&t).square().mean_all().data().scalar_value();
    let baseline = targets.data().iter().map(|v| v * v).sum::<f64>() / targets.len() as f64;
    (loss, baseline)
}
