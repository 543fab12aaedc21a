//! Sweep the output-scale knob that controls how strongly features move, and
//! watch final loss, kernel alignment, and the recovered feature-learning
//! strength respond.
//!
//! All runs share one initialization, so differences are due to the knob
//! alone. The effective first-order step is held fixed by the trainer, which
//! scales the raw rate by 1/gamma^2 internally.

use ntk_align::harness::{self, DatasetKind, ExperimentConfig, ExperimentKind, SweepAxis};
use ntk_align::models::LossNormalization;
use ntk_align::ofe;

fn main() {
    let mut config = ExperimentConfig::default();
    config.experiment_kind = ExperimentKind::GammaSweep;
    config.dataset.kind = DatasetKind::RandomBinary;
    config.dataset.p = 40;
    config.dataset.n = 40;
    config.model.hidden_width = 200;
    config.train.eta0 = 0.05;
    config.train.steps = 512;
    config.train.loss_normalization = LossNormalization::MeanOverP;
    config.sweep.axis = SweepAxis::Gamma;
    config.sweep.values = vec![0.5, 1.0, 2.0, 4.0];
    config.output_dir = std::env::temp_dir()
        .join("ntk_align_example_gamma")
        .to_string_lossy()
        .into_owned();

    let values = config.sweep.values.clone();
    let traces = harness::sweep(&config, SweepAxis::Gamma, &values).expect("gamma sweep");

    // The recovered spike coefficient gamma_hat carries the kernel's units,
    // which themselves shrink like 1/gamma^2; the dimensionless spike weight
    // gamma_hat * ||y||^2 / ||K0||_F is what is comparable across runs.
    println!(
        "{:>6} {:>12} {:>12} {:>12} {:>10}",
        "gamma", "final loss", "align gain", "spike weight", "run"
    );
    for (gamma, trace) in values.iter().zip(&traces) {
        let first = &trace.records[0];
        let last = trace.final_record();
        let seed = trace.seed;
        let data = harness::build_dataset(&config.dataset, seed).expect("dataset");
        let mut mcfg = config.model.clone();
        mcfg.gamma = *gamma;
        let model = harness::build_model(&mcfg, data.n(), seed);
        let k0 = ntk_align::ntk::gram_matrix(&model, &data.inputs, *gamma).expect("initial gram");
        let y = data.scalar_targets().expect("targets");
        let weight = ofe::estimate_gamma_hat(k0.scalar_gram(), &y, last.align_traced)
            .map(|g| format!("{:.3}", g * y.dot(&y) / k0.frob()))
            .unwrap_or_else(|_| "-".into());
        println!(
            "{gamma:>6.2} {:>12.4e} {:>12.4} {:>12} {:>10}",
            last.loss,
            last.align_traced - first.align_traced,
            weight,
            trace.run_id.split('_').next_back().unwrap()
        );
    }
    println!("\nstronger feature learning at larger gamma: bigger alignment gains and a");
    println!("heavier label spike in the converged kernel, at equal effective step size");
    println!("per-run directories and the sweep summary CSV are under {}", config.output_dir);
}
