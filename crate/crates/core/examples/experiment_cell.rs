// Runs one seed of a reduced primary experiment cell by cell, persists
// every artifact, and builds the seed's report row from the records.

use proxygap::experiment::{build_report, run_cell, ExperimentName, ExperimentSpec, Scale};
use proxygap::model::BackboneConfig;

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let root = tempfile::tempdir()?;
    let mut spec = ExperimentSpec::named(ExperimentName::Primary, Scale::Smoke, root.path())?;
    spec.seeds = vec![42];
    let mut records = Vec::new();
    for mut plan in spec.plans() {
        // shrink the smoke settings so the example finishes in seconds
        plan.settings.sizes.n_train = 192;
        plan.settings.sizes.n_val = 32;
        plan.settings.sizes.n_test = 64;
        plan.settings.sizes.n_ood = 64;
        plan.settings.backbone = BackboneConfig {
            n_layers: 1,
            width: 16,
            n_heads: 2,
            ..BackboneConfig::smoke()
        };
        plan.settings.pretrain_epochs = 1;
        plan.settings.probe_epochs = 3;
        let cell = run_cell(&plan, &spec.out_dir, &spec.experiment_dir()).map_err(|e| e.to_string())?;
        println!(
            "seed {} dataset {}: proxy {:.4}, main ood {:.3}, diag {:?}",
            cell.record.seed,
            cell.record.tag.name(),
            cell.record.proxy,
            cell.record.main.ood_acc,
            cell.record.diag.run().map(|r| r.ood_acc)
        );
        assert!(cell.artifacts.paths().iter().all(|p| p.exists()));
        records.push(cell.record);
    }
    print!("{}", build_report(&spec, &records)?.to_csv_string());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
