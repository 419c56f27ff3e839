//! Save a trained layer to a JSON checkpoint, load it back, and show the
//! reload is bit-exact: identical parameters and identical outputs.
//!
//! Run with: cargo run --example checkpoint_roundtrip

use molelab::config::ExperimentConfig;
use molelab::mole::MoleLayer;
use molelab::numerics::RngState;
use molelab::trainer::{generate_task, train};

fn main() {
    let mut cfg = ExperimentConfig::two_cluster_demo();
    cfg.train.steps = 300;
    let spec = cfg.to_run_spec();
    let data = generate_task(&spec.task).expect("task");
    let mut rng = RngState::new(spec.train.seed);
    let mut layer = MoleLayer::init(spec.dims, spec.train.routing.clone(), &mut rng).expect("init");
    train(&mut layer, &data, &spec.train).expect("train");

    let path = std::env::temp_dir().join("molelab_layer.json");
    layer.save(&path).expect("save");
    println!(
        "saved {}-expert layer to {} ({} bytes)",
        layer.n_experts(),
        path.display(),
        std::fs::metadata(&path).unwrap().len()
    );

    let loaded = MoleLayer::load(&path).expect("load");
    let bit_exact = layer
        .params()
        .iter()
        .zip(loaded.params().iter())
        .all(|(a, b)| {
            a.data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits())
        })
        && layer
            .w0
            .data()
            .iter()
            .zip(loaded.w0.data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
    println!(
        "parameter round trip: {}",
        if bit_exact { "bit-exact" } else { "LOSSY" }
    );
    assert!(bit_exact);

    // Identical outputs on a probe token.
    let x = &data.samples[0].x;
    let (y_orig, d_orig, _) = layer.forward(x).expect("forward");
    let (y_load, d_load, _) = loaded.forward(x).expect("forward");
    assert_eq!(d_orig.strategy, d_load.strategy);
    assert_eq!(d_orig.selected, d_load.selected);
    let same = y_orig
        .data()
        .iter()
        .zip(y_load.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    println!(
        "forward pass after reload: {}",
        if same { "identical" } else { "DIFFERS" }
    );
    assert!(same);
    println!(
        "probe token routed {} over experts {:?}",
        d_orig.strategy, d_orig.selected
    );
}
