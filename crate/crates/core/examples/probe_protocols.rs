// Fits the all-sample and informative-only probes on frozen features of a
// briefly pretrained backbone.

use proxygap::data::{gen_dataset, DatasetConfig, SplitSizes};
use proxygap::experiment::PRIMARY_B;
use proxygap::model::BackboneConfig;
use proxygap::pretrain::{pretrain, TrainConfig};
use proxygap::probe::{fit_and_evaluate, ProbeConfig, Protocol, SplitFeatures};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let sizes = SplitSizes {
        n_train: 256,
        n_val: 32,
        n_test: 128,
        n_ood: 128,
    };
    let splits = gen_dataset(&DatasetConfig::new(PRIMARY_B, sizes, 5))?;
    let backbone = BackboneConfig {
        n_layers: 1,
        width: 16,
        n_heads: 2,
        ..BackboneConfig::smoke()
    };
    let train = TrainConfig {
        epochs: 1,
        ..TrainConfig::smoke(5)
    };
    let (params, _) = pretrain(&splits, &backbone, &train)?;
    let before = params.checksum();
    let features = SplitFeatures::extract(&params, &splits)?;
    let probe = ProbeConfig {
        hidden: 32,
        epochs: 5,
        ..ProbeConfig::smoke(5)
    };
    for protocol in [Protocol::Main, Protocol::Diag] {
        let run = fit_and_evaluate(protocol, &features, &probe)?;
        println!(
            "{}: trained on {}/{} examples, test acc {:.3}, ood acc {:.3}",
            protocol.name(),
            run.counts.train.used,
            run.counts.train.total,
            run.test_acc,
            run.ood_acc
        );
    }
    assert_eq!(params.checksum(), before);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
