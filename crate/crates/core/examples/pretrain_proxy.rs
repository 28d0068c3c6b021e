// Pretrains a small backbone on each corpus of the primary pair and compares
// their compression-style proxy scores.

use proxygap::data::{gen_dataset, DatasetConfig, SplitSizes};
use proxygap::experiment::{PRIMARY_A, PRIMARY_B};
use proxygap::model::BackboneConfig;
use proxygap::pretrain::{pretrain, proxy_score, TrainConfig};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let sizes = SplitSizes {
        n_train: 256,
        n_val: 64,
        n_test: 16,
        n_ood: 16,
    };
    let backbone = BackboneConfig {
        n_layers: 1,
        width: 16,
        n_heads: 2,
        ..BackboneConfig::smoke()
    };
    let train = TrainConfig {
        epochs: 2,
        lr: 3e-3,
        ..TrainConfig::smoke(42)
    };
    let mut scores = Vec::new();
    for (tag, theta) in [("A", PRIMARY_A), ("B", PRIMARY_B)] {
        let splits = gen_dataset(&DatasetConfig::new(theta, sizes, 11))?;
        let (params, trace) = pretrain(&splits, &backbone, &train)?;
        let s = proxy_score(&trace, params.param_count())?;
        println!(
            "{tag}: val losses {:?}, proxy {s:.4}, {} params, checksum {}",
            trace.val_losses,
            params.param_count(),
            &trace.final_checksum[..12]
        );
        scores.push(s);
    }
    println!("proxy gap A-B = {:.4}", scores[0] - scores[1]);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
