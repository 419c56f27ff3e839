//! Verify every hand-derived gradient in the layer against central finite
//! differences: expert matrices, the gate through renormalization and the
//! softmax Jacobian, and the auxiliary-loss path.
//!
//! Run with: cargo run --example grad_check

use molelab::config::ExperimentConfig;
use molelab::mole::MoleLayer;
use molelab::numerics::RngState;
use molelab::trainer::{generate_task, grad_check};

fn main() {
    let cfg = ExperimentConfig::default();
    let spec = cfg.to_run_spec();
    let data = generate_task(&spec.task).expect("task");
    let mut rng = RngState::new(spec.train.seed);
    let layer = MoleLayer::init(spec.dims, spec.train.routing.clone(), &mut rng).expect("layer");

    let batch = &data.samples[..spec.train.batch_size.min(data.len())];
    println!(
        "checking a {}-expert layer ({} -> {}, rank {}) on a batch of {} tokens",
        layer.n_experts(),
        spec.dims.d_in,
        spec.dims.d_out,
        spec.dims.rank,
        batch.len()
    );
    println!(
        "loss: task + auxiliary (beta = {}, alpha = {}, q = {})\n",
        spec.train.loss.beta,
        spec.train.loss.alpha,
        spec.train.loss.q.value()
    );

    for eps in [1e-5, 1e-6] {
        let report = grad_check(&layer, batch, &spec.train.loss, eps).expect("grad check");
        println!(
            "eps = {eps:>6.0e}: {} entries checked, max relative error {:.3e} at {}",
            report.checked, report.max_rel_err, report.worst_param
        );
        if report.skipped.is_empty() {
            println!("             no selection-boundary flips");
        } else {
            println!(
                "             skipped {} boundary-flip entries: {:?}",
                report.skipped.len(),
                report.skipped
            );
        }
    }
}
