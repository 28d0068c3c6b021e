// Builds the per-configuration report from the reference three-seed gaps,
// prints the table, verifies it against itself and renders both charts.

use proxygap::chart::{emit_charts, parse_bars};
use proxygap::metrics::{aggregate, reference_background_only, reference_primary};
use proxygap::verify::verify_tables;

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let primary = aggregate("primary", reference_primary())?;
    let background = aggregate("background_only", reference_background_only())?;
    let table = primary.to_csv_string();
    print!("{table}");
    println!(
        "reversal {}/{}, diagnostic {}/{}",
        primary.reversal_count,
        primary.n_seeds(),
        primary.diagnostic_count,
        primary.n_seeds()
    );
    let verdict = verify_tables(&primary, &table)?;
    assert!(verdict.passed());
    println!("background-only differs from primary in {} cell(s):", verify_tables(&background, &table)?.diffs.len());
    for d in verify_tables(&background, &table)?.diffs {
        println!("  {d}");
    }
    let dir = tempfile::tempdir()?;
    for path in emit_charts(&[primary, background], dir.path())? {
        let bars = parse_bars(&std::fs::read_to_string(&path)?)?;
        println!("{}: {} bars", path.file_name().unwrap_or_default().to_string_lossy(), bars.len());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
