//! Runs the scenario comparison on the synthetic domain-shift task and
//! prints the resulting table.
//!
//! Knobs come from environment variables so experiments don't need a
//! recompile, e.g.:
//!
//! ```text
//! RUST_LOG=info CMP_SEEDS=0 CMP_EPOCHS=6 \
//!   CMP_SCENARIOS=frozen-QA,end2end-QA \
//!   cargo run -p ragforge-core --example comparison
//! ```

use std::time::Instant;

use ragforge_core::eval::{run_comparison, ComparisonConfig, Scenario};

fn env_parse<T: std::str::FromStr>(name: &str, default: T) -> T {
    std::env::var(name)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

fn main() {
    env_logger::init();
    let mut config = ComparisonConfig::default();
    config.seeds = std::env::var("CMP_SEEDS")
        .map(|s| {
            s.split(',')
                .map(|t| t.trim().parse().expect("seed"))
                .collect()
        })
        .unwrap_or_else(|_| vec![0]);
    config.train.epochs = env_parse("CMP_EPOCHS", config.train.epochs);
    config.train.batch_size = env_parse("CMP_BATCH", config.train.batch_size);
    config.train.tau = env_parse("CMP_TAU", config.train.tau);
    config.train.adam.lr = env_parse("CMP_LR", config.train.adam.lr);
    config.train.adam.lr_gen_scale = env_parse("CMP_LR_GEN_SCALE", config.train.adam.lr_gen_scale);
    config.train.adam.gen_anchor = env_parse("CMP_GEN_ANCHOR", config.train.adam.gen_anchor);
    config.train.refresh.refresh_every =
        env_parse("CMP_REFRESH_EVERY", config.train.refresh.refresh_every);
    config.train.encoder.d_emb = env_parse("CMP_D_EMB", config.train.encoder.d_emb);
    config.train.encoder.d_feat = env_parse("CMP_D_FEAT", config.train.encoder.d_feat);
    config.train.encoder.d_feat_gen = env_parse("CMP_D_FEAT_GEN", config.train.encoder.d_feat_gen);
    config.dpr.encoder = config.train.encoder.clone();
    config.dpr.epochs = env_parse("CMP_DPR_EPOCHS", config.dpr.epochs);
    config.dpr.n_hard_negatives = env_parse("CMP_DPR_NEGS", config.dpr.n_hard_negatives);
    config.task.n_passages = env_parse("CMP_PASSAGES", config.task.n_passages);
    config.task.n_qa = env_parse("CMP_QA", config.task.n_qa);
    config.task.n_valid = env_parse("CMP_VALID", config.task.n_valid);
    config.task.n_test = env_parse("CMP_TEST", config.task.n_test);
    config.task.n_x = env_parse("CMP_NX", config.task.n_x);
    config.task.n_y = env_parse("CMP_NY", config.task.n_y);
    config.task.fillers_per_body = env_parse("CMP_FILLERS", config.task.fillers_per_body);
    config.task.filler_pool = env_parse("CMP_FILLER_POOL", config.task.filler_pool);
    config.task.mapped_fraction = env_parse("CMP_MAPPED", config.task.mapped_fraction);
    config.task.n_decoys = env_parse("CMP_DECOYS", config.task.n_decoys);
    config.copy_prior = env_parse("CMP_COPY_PRIOR", config.copy_prior);
    config.train.k = env_parse("CMP_K", config.train.k);

    let scenarios: Vec<Scenario> = std::env::var("CMP_SCENARIOS")
        .map(|s| {
            s.split(',')
                .map(|t| Scenario::parse(t).unwrap_or_else(|| panic!("unknown scenario {t:?}")))
                .collect()
        })
        .unwrap_or_else(|_| Scenario::ALL.to_vec());

    let t0 = Instant::now();
    let table = run_comparison(&config, &scenarios).expect("comparison failed");
    println!("{}", table.render());
    println!("elapsed: {:.1?}", t0.elapsed());
}
