//! Train a small two-layer ReLU network while tracking its tangent kernel,
//! then show where the run directory keeps the trace and snapshots.

use ntk_align::harness::{DatasetKind, DatasetSpec, ExperimentConfig, TrainSpec};
use ntk_align::models::LossNormalization;

fn main() {
    let mut config = ExperimentConfig::default();
    config.dataset = DatasetSpec {
        kind: DatasetKind::RandomBinary,
        p: 32,
        n: 100,
        ..DatasetSpec::default()
    };
    config.model.hidden_width = 128;
    config.train = TrainSpec {
        eta0: 0.1,
        steps: 64,
        loss_normalization: LossNormalization::MeanOverP,
    };
    config.output_dir = std::env::temp_dir()
        .join("ntk_align_example_train")
        .to_string_lossy()
        .into_owned();

    let traces = ntk_align::harness::run_nn(&config).expect("training run");
    let trace = &traces[0];
    println!("run id: {}", trace.run_id);
    println!("{:>6} {:>12} {:>10} {:>10}", "step", "loss", "align", "||K||_F");
    for r in &trace.records {
        println!("{:>6} {:>12.5e} {:>10.4} {:>10.3}", r.step, r.loss, r.align_traced, r.frob);
    }
    let first = &trace.records[0];
    let last = trace.final_record();
    println!(
        "loss {:.3e} -> {:.3e}, alignment {:.4} -> {:.4}, kernel norm grew {:.2}x",
        first.loss,
        last.loss,
        first.align_traced,
        last.align_traced,
        last.frob / first.frob
    );
    println!("trace and snapshots under {}/{}", config.output_dir, trace.run_id);
}
