// Generates the primary A/B corpora at a small size, prints per-split
// statistics and round-trips them through the binary split files.

use proxygap::data::{gen_dataset, load_splits, save_splits, DatasetConfig, Split, SplitSizes};
use proxygap::experiment::{PRIMARY_A, PRIMARY_B};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let sizes = SplitSizes {
        n_train: 400,
        n_val: 100,
        n_test: 100,
        n_ood: 100,
    };
    let dir = tempfile::tempdir()?;
    for (tag, theta) in [("A", PRIMARY_A), ("B", PRIMARY_B)] {
        let set = gen_dataset(&DatasetConfig::new(theta, sizes, 7))?;
        println!("dataset {tag}: {theta:?}");
        for split in Split::ALL {
            let exs = set.split(split);
            let informative = exs.iter().filter(|e| e.informative).count();
            let positive = exs.iter().filter(|e| e.label == 1).count();
            println!("  {:>5}: {:>4} examples, {informative:>4} informative, {positive:>4} labeled 1", split.name(), exs.len());
        }
        let first = &set.train[0];
        println!("  first train sequence: {:?}", first.tokens);
        let path = dir.path().join(tag);
        save_splits(&path, &set)?;
        assert_eq!(load_splits(&path)?, set);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
