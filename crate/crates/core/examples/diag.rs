use mg3d::config::Config;
use mg3d::model::Model;
use mg3d::molgraph::generate_synthetic;
use mg3d::probes;
use mg3d::train::pretrain;

fn main() {
    let corpus = generate_synthetic(11, 400, 6..=9).unwrap();
    let mut cfg = Config::desk();
    cfg.d_model = 32; cfg.heads = 4; cfg.layers = 4; cfg.k_rbf = 16;
    cfg.pe_width = 64; cfg.pe_heads = 4; cfg.pe_layers = 3; cfg.dec_layers = 2;
    cfg.batch_size = 10; cfg.max_steps = 4500; cfg.warmup_steps = 100;
    cfg.lr_init = 2e-3; cfg.lr_min = 5e-4; cfg.seed = 3; cfg.log_every = 50;
    cfg.augmentation = false;
    cfg.mask_ratio = 0.1;

    let with = Model::new(&cfg);
    let log_w = pretrain(&with, &corpus, &cfg, &|_| true).unwrap();
    let mut cfg_wo = cfg.clone();
    cfg_wo.srd_enabled = false;
    cfg_wo.distill_enabled = false;
    let without = Model::new(&cfg_wo);
    let log_wo = pretrain(&without, &corpus, &cfg_wo, &|_| true).unwrap();
    println!("final mgm with-SRD {:.4}, without-SRD {:.4}",
        log_w.rows.last().unwrap().loss_mgm, log_wo.rows.last().unwrap().loss_mgm);

    let report = probes::probe_masked_coords(&with, &without, &corpus, probes::PROBE_STEPS, cfg.seed);
    for (k, v) in &report.summary {
        println!("{k}: {v:.4}");
    }
}
