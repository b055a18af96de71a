//! Command-line driver: corpus generation, pretraining, finetuning,
//! analysis probes, the gradient-check suite, evaluation, and
//! checkpoint inspection. Every run writes its config snapshot, metric
//! CSVs, and checkpoints into a fresh run directory.

use mg3d::checkpoint::Checkpoint;
use mg3d::config::Config;
use mg3d::model::Model;
use mg3d::molgraph::{attach_linear_labels, generate_synthetic, parse_mol3d, write_mol3d, MolGraph};
use mg3d::probes;
use mg3d::train::{finetune, forces_fd, pretrain, FinetuneTask};
use mg3d::verify;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

const USAGE: &str = "\
usage: mg3d <command> [options] [--key=value overrides]

commands:
  gen          --out <file.mol3d> [--config <file>]
  pretrain     --data <file.mol3d> --out <rundir> [--config <file>] [--ckpt <init.ckpt>]
  finetune     --data <file.mol3d> --ckpt <model.ckpt> --task <energy|energy+forces|scalar:<label>>
               --out <rundir> [--config <file>]
  probe        <analysis1|analysis4|analysis5|analysis6> --data <file.mol3d> --out <rundir>
               [--config <file>] [--ckpt <with.ckpt>] [--ckpt-control <without.ckpt>]
  gradcheck    [--config <file>] [--seeds <n>]
  eval         --data <file.mol3d> --ckpt <model.ckpt> --task <...> [--config <file>]
  inspect-ckpt <file.ckpt>

Any --key=value pair matching a config key overrides the config file.
";

enum CliError {
    Usage(String),
    Run(String),
}

impl From<mg3d::config::ConfigError> for CliError {
    fn from(e: mg3d::config::ConfigError) -> Self {
        CliError::Run(e.to_string())
    }
}

impl From<mg3d::train::TrainError> for CliError {
    fn from(e: mg3d::train::TrainError) -> Self {
        CliError::Run(e.to_string())
    }
}

impl From<mg3d::model::ModelError> for CliError {
    fn from(e: mg3d::model::ModelError) -> Self {
        CliError::Run(e.to_string())
    }
}

impl From<mg3d::molgraph::MolError> for CliError {
    fn from(e: mg3d::molgraph::MolError) -> Self {
        CliError::Run(e.to_string())
    }
}

impl From<mg3d::checkpoint::CheckpointError> for CliError {
    fn from(e: mg3d::checkpoint::CheckpointError) -> Self {
        CliError::Run(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let code = match dispatch(&args) {
        Ok(()) => 0,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}\n\n{USAGE}");
            2
        }
        Err(CliError::Run(m)) => {
            eprintln!("error: {m}");
            1
        }
    };
    std::process::exit(code);
}

/// Parsed command line: named flags plus config overrides.
struct Args {
    flags: BTreeMap<String, String>,
    overrides: BTreeMap<String, String>,
    positional: Vec<String>,
}

const KNOWN_FLAGS: [&str; 7] = ["config", "data", "out", "ckpt", "ckpt-control", "task", "seeds"];

fn parse_args(args: &[String]) -> Result<Args, CliError> {
    let mut flags = BTreeMap::new();
    let mut overrides = BTreeMap::new();
    let mut positional = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let a = &args[i];
        if let Some(stripped) = a.strip_prefix("--") {
            let (key, value) = if let Some((k, v)) = stripped.split_once('=') {
                (k.to_string(), v.to_string())
            } else {
                let v = args.get(i + 1).ok_or_else(|| {
                    CliError::Usage(format!("flag --{stripped} needs a value"))
                })?;
                i += 1;
                (stripped.to_string(), v.clone())
            };
            if KNOWN_FLAGS.contains(&key.as_str()) {
                flags.insert(key, value);
            } else {
                // must be a config override; validated against the key set
                let mut probe = Config::default();
                if probe.set(&key, &value).is_err() {
                    // distinguish unknown key (usage) from bad value (run)
                    if probe.set(&key, "0").is_err() && probe.set(&key, "none").is_err() {
                        return Err(CliError::Usage(format!("unknown flag --{key}")));
                    }
                    return Err(CliError::Run(format!(
                        "cannot parse --{key}={value} as a config override"
                    )));
                }
                overrides.insert(key, value);
            }
        } else {
            positional.push(a.clone());
        }
        i += 1;
    }
    Ok(Args {
        flags,
        overrides,
        positional,
    })
}

fn load_config(args: &Args) -> Result<Config, CliError> {
    let mut cfg = Config::default();
    if let Some(path) = args.flags.get("config") {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Run(format!("cannot read config {path}: {e}")))?;
        let map = Config::parse_file_text(&text)?;
        cfg.apply_map(&map)?;
    }
    cfg.apply_map(&args.overrides)?;
    Ok(cfg)
}

fn require<'a>(args: &'a Args, flag: &str) -> Result<&'a String, CliError> {
    args.flags
        .get(flag)
        .ok_or_else(|| CliError::Usage(format!("missing required flag --{flag}")))
}

fn read_corpus(path: &str) -> Result<Vec<MolGraph>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Run(format!("cannot read corpus {path}: {e}")))?;
    Ok(parse_mol3d(&text)?)
}

/// Create a fresh run directory; an existing one is an error (a run owns
/// its directory exclusively).
fn make_run_dir(path: &str) -> Result<PathBuf, CliError> {
    let p = PathBuf::from(path);
    if p.exists() {
        return Err(CliError::Run(format!("run directory {path} already exists")));
    }
    fs::create_dir_all(&p)?;
    Ok(p)
}

fn write_snapshot(dir: &Path, cfg: &Config) -> Result<(), CliError> {
    fs::write(dir.join("config.snapshot"), cfg.snapshot())?;
    Ok(())
}

fn parse_task(raw: &str) -> Result<FinetuneTask, CliError> {
    match raw {
        "energy" => Ok(FinetuneTask::Energy),
        "energy+forces" => Ok(FinetuneTask::EnergyForces),
        other => {
            if let Some(label) = other.strip_prefix("scalar:") {
                Ok(FinetuneTask::Scalar(label.to_string()))
            } else {
                Err(CliError::Usage(format!(
                    "unknown task {other:?}; expected energy, energy+forces, or scalar:<label>"
                )))
            }
        }
    }
}

fn dispatch(args: &[String]) -> Result<(), CliError> {
    let Some(command) = args.first() else {
        return Err(CliError::Usage("no command given".into()));
    };
    let rest = parse_args(&args[1..])?;
    match command.as_str() {
        "gen" => cmd_gen(&rest),
        "pretrain" => cmd_pretrain(&rest),
        "finetune" => cmd_finetune(&rest),
        "probe" => cmd_probe(&rest),
        "gradcheck" => cmd_gradcheck(&rest),
        "eval" => cmd_eval(&rest),
        "inspect-ckpt" => cmd_inspect(&rest),
        other => Err(CliError::Usage(format!("unknown command {other:?}"))),
    }
}

fn cmd_gen(args: &Args) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let out = require(args, "out")?;
    let mut mols = generate_synthetic(
        cfg.seed,
        cfg.gen_count,
        cfg.gen_natoms_min..=cfg.gen_natoms_max,
    )?;
    if cfg.gen_label == "atom_count" {
        attach_linear_labels(&mut mols, cfg.seed, "y");
    }
    fs::write(out, write_mol3d(&mols))?;
    println!(
        "wrote {} molecules ({}..={} atoms, seed {}) to {out}",
        mols.len(),
        cfg.gen_natoms_min,
        cfg.gen_natoms_max,
        cfg.seed
    );
    Ok(())
}

fn cmd_pretrain(args: &Args) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let corpus = read_corpus(require(args, "data")?)?;
    let dir = make_run_dir(require(args, "out")?)?;
    write_snapshot(&dir, &cfg)?;
    let model = Model::new(&cfg);
    if let Some(init) = args.flags.get("ckpt") {
        model.load_from(Path::new(init))?;
    }
    let frozen = cfg.encoder_frozen;
    let trainable =
        move |name: &str| !(frozen && (name.starts_with("feat.") || name.starts_with("enc.")));
    let log = pretrain(&model, &corpus, &cfg, &trainable)?;
    fs::write(dir.join("metrics.csv"), log.to_csv())?;
    model.save(&dir.join("model.ckpt"))?;
    if let Some(last) = log.rows.last() {
        println!(
            "pretrained {} steps on {} molecules: loss {:.6} (mgm {:.6}, denoise {:.6}, distill {:.6})",
            cfg.max_steps,
            corpus.len(),
            last.loss_total,
            last.loss_mgm,
            last.loss_denoise,
            last.loss_distill
        );
    }
    println!("run artifacts in {}", dir.display());
    Ok(())
}

fn cmd_finetune(args: &Args) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let corpus = read_corpus(require(args, "data")?)?;
    let task = parse_task(require(args, "task")?)?;
    let dir = make_run_dir(require(args, "out")?)?;
    write_snapshot(&dir, &cfg)?;
    let model = Model::new(&cfg);
    model.load_from(Path::new(require(args, "ckpt")?))?;
    let log = finetune(&model, &corpus, &task, &cfg, &|_| true)?;
    fs::write(dir.join("metrics.csv"), log.to_csv())?;
    model.save(&dir.join("model.ckpt"))?;
    if let Some(last) = log.rows.last() {
        println!(
            "finetuned {} steps: energy loss {:.6}, force loss {:.6}, mae {:.6}",
            cfg.max_steps, last.loss_energy, last.loss_force, last.mae
        );
    }
    println!("run artifacts in {}", dir.display());
    Ok(())
}

fn write_report(dir: &Path, report: &probes::ProbeReport) -> Result<(), CliError> {
    fs::write(dir.join("series.csv"), report.series_csv())?;
    fs::write(dir.join("summary.json"), report.summary_json())?;
    for (k, v) in &report.passes {
        println!("{}: {}", k, if *v { "pass" } else { "FAIL" });
    }
    Ok(())
}

fn cmd_probe(args: &Args) -> Result<(), CliError> {
    let which = args
        .positional
        .first()
        .ok_or_else(|| CliError::Usage("probe needs an analysis name".into()))?;
    let cfg = load_config(args)?;
    let corpus = read_corpus(require(args, "data")?)?;
    let dir = make_run_dir(require(args, "out")?)?;
    write_snapshot(&dir, &cfg)?;

    // with-SRD model: load or pretrain here
    let build_with = |cfg: &Config| -> Result<Model, CliError> {
        let model = Model::new(cfg);
        if let Some(p) = args.flags.get("ckpt") {
            model.load_from(Path::new(p))?;
        } else {
            pretrain(&model, &corpus, cfg, &|_| true)?;
        }
        Ok(model)
    };

    let report = match which.as_str() {
        "analysis1" => probes::leakage_experiment(&corpus, &cfg)?,
        "analysis4" => {
            let with = build_with(&cfg)?;
            let mut cfg_wo = cfg.clone();
            cfg_wo.srd_enabled = false;
            cfg_wo.distill_enabled = false;
            let without = Model::new(&cfg_wo);
            if let Some(p) = args.flags.get("ckpt-control") {
                without.load_from(Path::new(p))?;
            } else {
                pretrain(&without, &corpus, &cfg_wo, &|_| true)?;
            }
            probes::probe_masked_coords(&with, &without, &corpus, probes::PROBE_STEPS, cfg.seed)
        }
        "analysis5" => {
            let distilled = build_with(&cfg)?;
            // control: same initialization, never distilled
            let control = Model::new(&cfg);
            if let Some(p) = args.flags.get("ckpt-control") {
                control.load_from(Path::new(p))?;
            }
            probes::probe_pe_reconstruction(&distilled, &control, &corpus, probes::PROBE_STEPS, cfg.seed)
        }
        "analysis6" => {
            let distilled = build_with(&cfg)?;
            probes::probe_pe_classify(&distilled, &corpus, probes::PROBE_STEPS, cfg.seed)
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown probe {other:?}; expected analysis1, analysis4, analysis5, or analysis6"
            )))
        }
    };
    write_report(&dir, &report)?;
    println!("probe artifacts in {}", dir.display());
    Ok(())
}

fn cmd_gradcheck(args: &Args) -> Result<(), CliError> {
    let _ = load_config(args)?; // validates overrides even though sizes are fixed
    let seeds: u64 = args
        .flags
        .get("seeds")
        .map(|s| s.parse().map_err(|_| CliError::Usage(format!("bad --seeds {s}"))))
        .transpose()?
        .unwrap_or(5);
    let mut worst: f64 = 0.0;
    let mut failures = 0usize;
    for check in verify::gradient_suite(&[3, 4, 5], seeds) {
        let ok = check.max_rel_err < 1e-4;
        println!(
            "{} {}: {:.3e}",
            if ok { "pass" } else { "FAIL" },
            check.name,
            check.max_rel_err
        );
        worst = worst.max(check.max_rel_err);
        failures += usize::from(!ok);
    }
    for check in verify::force_consistency_suite(seeds) {
        let ok = check.max_rel_err < 1e-5;
        println!(
            "{} {}: {:.3e}",
            if ok { "pass" } else { "FAIL" },
            check.name,
            check.max_rel_err
        );
        failures += usize::from(!ok);
    }
    println!("worst loss-gradient relative error: {worst:.3e}");
    if failures > 0 {
        return Err(CliError::Run(format!("{failures} gradient checks failed")));
    }
    Ok(())
}

fn cmd_eval(args: &Args) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let corpus = read_corpus(require(args, "data")?)?;
    let task = parse_task(require(args, "task")?)?;
    let model = Model::new(&cfg);
    model.load_from(Path::new(require(args, "ckpt")?))?;
    let label = task.label();
    let mut mae = 0.0;
    let mut force_mae = 0.0;
    let mut force_rows = 0usize;
    for (i, g) in corpus.iter().enumerate() {
        let y = *g
            .labels
            .get(label)
            .ok_or_else(|| CliError::Run(format!("molecule {i} missing label {label:?}")))?;
        let pred = model.energy(g)?.data().scalar_value();
        mae += (pred - y).abs() / corpus.len() as f64;
        if task == FinetuneTask::EnergyForces {
            let f_label = g
                .forces
                .as_ref()
                .ok_or_else(|| CliError::Run(format!("molecule {i} missing forces")))?;
            let f_pred = forces_fd(&model, g, cfg.force_fd_step)?;
            for (r, row) in f_label.iter().enumerate() {
                for c in 0..3 {
                    force_mae += (f_pred.data().at2(r, c) - row[c]).abs();
                    force_rows += 1;
                }
            }
        }
    }
    println!("molecules: {}", corpus.len());
    println!("{label} mae: {mae:.6}");
    if force_rows > 0 {
        println!("force mae: {:.6}", force_mae / force_rows as f64);
    }
    Ok(())
}

fn cmd_inspect(args: &Args) -> Result<(), CliError> {
    let path = args
        .positional
        .first()
        .ok_or_else(|| CliError::Usage("inspect-ckpt needs a file".into()))?;
    let ck = Checkpoint::load(Path::new(path))?;
    let mut total = 0usize;
    for (name, t) in &ck.entries {
        println!("{name}  {:?}  ({} values)", t.shape(), t.len());
        total += t.len();
    }
    println!("{} entries, {} values, CRC valid", ck.entries.len(), total);
    Ok(())
}
