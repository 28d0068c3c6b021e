// Checks backbone gradients against central finite differences in f64.

use proxygap::model::{self, BackboneConfig, Mode};
use proxygap::rng::StreamKey;
use proxygap::tensor::grad_check;
use rand::Rng;

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let config = BackboneConfig {
        n_layers: 1,
        width: 8,
        n_heads: 2,
        mlp_ratio: 2,
        dropout: 0.1,
        seq_len: 6,
        vocab_size: 80,
    };
    let params = model::init_backbone::<f64>(&config, 1)?;
    let mut rng = StreamKey::root(2).child("tokens").rng();
    let batch: Vec<Vec<u8>> = (0..2).map(|_| (0..6).map(|_| rng.random_range(0..80)).collect()).collect();
    let key = StreamKey::root(3).child("dropout");
    let xs: Vec<_> = params.tensors().into_iter().cloned().collect();
    for (name, mode) in [("eval", Mode::Eval), ("train", Mode::Train(&key))] {
        let report = grad_check(
            |tape, vars| {
                let (_, logits) = model::forward_with_vars(tape, &config, vars, &batch, mode, true)?;
                tape.cross_entropy(logits.expect("requested"), &model::next_token_targets(&batch))
            },
            &xs,
            1e-6,
        )?;
        println!(
            "{name}: {} coordinates, max relative error {:.2e} at tensor {} index {}",
            report.coordinates, report.max_relative_error, report.worst.0, report.worst.1
        );
        assert!(report.max_relative_error < 1e-4);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
