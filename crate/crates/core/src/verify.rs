//! Regression check of a report against a reference gap table.
//!
//! Only gap signs and criterion counts are compared; magnitudes are allowed
//! to drift.

use crate::error::Result;
use crate::metrics::{format_gap, parse_table, ConfigReport, TableRow, MEAN_LABEL, MISSING, TABLE_HEADER};
use serde::Serialize;
use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Sign {
    Positive,
    Zero,
    Negative,
    Missing,
}

impl Sign {
    pub fn of(x: Option<f64>) -> Sign {
        match x {
            None => Sign::Missing,
            Some(v) if v > 0.0 => Sign::Positive,
            Some(v) if v < 0.0 => Sign::Negative,
            Some(_) => Sign::Zero,
        }
    }
}

impl fmt::Display for Sign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sign::Positive => "+",
            Sign::Zero => "0",
            Sign::Negative => "-",
            Sign::Missing => "NA",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CellDiff {
    /// Seed, `Mean`, or a criterion name.
    pub row: String,
    pub column: String,
    pub expected: String,
    pub actual: String,
}

impl fmt::Display for CellDiff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}: expected {}, got {}", self.row, self.column, self.expected, self.actual)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Verdict {
    pub diffs: Vec<CellDiff>,
}

impl Verdict {
    pub fn passed(&self) -> bool {
        self.diffs.is_empty()
    }
}

fn signs(row: &TableRow) -> [Sign; 3] {
    [Sign::of(Some(row.delta_proxy)), Sign::of(Some(row.delta_main)), Sign::of(row.delta_diag)]
}

fn counts(rows: &[TableRow]) -> (usize, usize) {
    let seeds = rows.iter().filter(|r| r.seed.is_some());
    let (mut reversal, mut diag) = (0, 0);
    for r in seeds {
        reversal += usize::from(r.delta_proxy > 0.0 && r.delta_main > 0.0);
        diag += usize::from(r.delta_proxy > 0.0 && r.delta_diag.is_some_and(|d| d > 0.0));
    }
    (reversal, diag)
}

/// Errors only when the reference itself cannot be parsed; any disagreement,
/// including a different seed list, is reported as a failing diff.
pub fn verify_tables(report: &ConfigReport, reference_csv: &str) -> Result<Verdict> {
    let expected = parse_table(reference_csv)?;
    let actual: Vec<TableRow> = report
        .seeds
        .iter()
        .map(|s| TableRow {
            seed: Some(s.seed),
            delta_proxy: s.delta_proxy,
            delta_main: s.delta_main,
            delta_diag: s.delta_diag,
        })
        .collect();
    let mut diffs = Vec::new();
    let expected_seeds: Vec<u64> = expected.iter().filter_map(|r| r.seed).collect();
    let actual_seeds: Vec<u64> = actual.iter().filter_map(|r| r.seed).collect();
    if expected_seeds != actual_seeds {
        diffs.push(CellDiff {
            row: "shape".into(),
            column: TABLE_HEADER[0].into(),
            expected: format!("{expected_seeds:?}"),
            actual: format!("{actual_seeds:?}"),
        });
        return Ok(Verdict { diffs });
    }
    let mean = TableRow {
        seed: None,
        delta_proxy: report.mean.delta_proxy,
        delta_main: report.mean.delta_main,
        delta_diag: report.mean.delta_diag,
    };
    for exp in &expected {
        let (label, act) = match exp.seed {
            Some(seed) => (seed.to_string(), actual.iter().find(|r| r.seed == Some(seed)).expect("same seed list")),
            None => (MEAN_LABEL.to_string(), &mean),
        };
        for ((e, a), column) in signs(exp).into_iter().zip(signs(act)).zip(&TABLE_HEADER[1..]) {
            if e != a {
                diffs.push(CellDiff {
                    row: label.clone(),
                    column: column.to_string(),
                    expected: e.to_string(),
                    actual: a.to_string(),
                });
            }
        }
    }
    let (rev, diag) = counts(&expected);
    for (name, e, a) in [
        ("all-sample reversal", rev, report.reversal_count),
        ("diagnostic criterion", diag, report.diagnostic_count),
    ] {
        if e != a {
            diffs.push(CellDiff {
                row: "criteria".into(),
                column: name.into(),
                expected: format!("{e}/{}", expected_seeds.len()),
                actual: format!("{a}/{}", report.n_seeds()),
            });
        }
    }
    Ok(Verdict { diffs })
}

/// One directional condition on a sweep's report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    /// Informational checks are reported but never gate a verdict.
    pub required: bool,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = match (self.passed, self.required) {
            (true, _) => "ok",
            (false, true) => "FAILED",
            (false, false) => "not met (informational)",
        };
        write!(f, "{}: {status} ({})", self.name, self.detail)
    }
}

pub fn all_required_pass(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.passed || !c.required)
}

fn check(name: &'static str, required: bool, passed: bool, detail: String) -> Check {
    Check {
        name,
        required,
        passed,
        detail,
    }
}

fn proxy_positive_everywhere(report: &ConfigReport) -> Check {
    let n = report.seeds.iter().filter(|s| s.delta_proxy > 0.0).count();
    check("proxy gap positive in every seed", true, n == report.n_seeds(), format!("{n}/{}", report.n_seeds()))
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| MISSING.to_string(), format_gap)
}

/// Reduced-scale sweep of the primary pair: the proxy must prefer A in every
/// seed and the mean diagnostic gap must favour B. The all-sample mean is
/// informational only, since one seed in three may flip.
pub fn smoke_checks(primary: &ConfigReport) -> Vec<Check> {
    vec![
        proxy_positive_everywhere(primary),
        check(
            "mean diagnostic gap positive",
            true,
            primary.mean.delta_diag.is_some_and(|d| d > 0.0),
            fmt_opt(primary.mean.delta_diag),
        ),
        check(
            "mean all-sample gap positive",
            false,
            primary.mean.delta_main > 0.0,
            format_gap(primary.mean.delta_main),
        ),
    ]
}

/// Full-scale sweeps: primary pair plus both ablations.
pub fn full_checks(primary: &ConfigReport, background_only: &ConfigReport, relevance_only: &ConfigReport) -> Vec<Check> {
    let (p, bg, rel) = (&primary.mean, &background_only.mean, &relevance_only.mean);
    vec![
        proxy_positive_everywhere(primary),
        check(
            "all-sample reversal in at least one seed",
            true,
            primary.reversal_count >= 1,
            format!("{}/{}", primary.reversal_count, primary.n_seeds()),
        ),
        check(
            "mean all-sample and diagnostic gaps positive",
            true,
            p.delta_main > 0.0 && p.delta_diag.is_some_and(|d| d > 0.0),
            format!("{} / {}", format_gap(p.delta_main), fmt_opt(p.delta_diag)),
        ),
        check(
            "background-only keeps over half the primary proxy gap",
            true,
            bg.delta_proxy > 0.5 * p.delta_proxy,
            format!("{} vs {}", format_gap(bg.delta_proxy), format_gap(p.delta_proxy)),
        ),
        check(
            "background-only all-sample gap within 0.05 of zero",
            true,
            bg.delta_main.abs() < 0.05,
            format_gap(bg.delta_main),
        ),
        check(
            "relevance-only proxy gap at most 0.05",
            true,
            rel.delta_proxy <= 0.05,
            format_gap(rel.delta_proxy),
        ),
        check(
            "relevance-only satisfies neither criterion in any seed",
            true,
            relevance_only.reversal_count == 0 && relevance_only.diagnostic_count == 0,
            format!("{} reversal, {} diagnostic", relevance_only.reversal_count, relevance_only.diagnostic_count),
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{aggregate, reference_background_only, reference_primary, reference_relevance_only, SeedReport};

    const TABLE: &str = "Seed,Proxy gap A\u{2212}B,Main gap B\u{2212}A,Diagnostic gap B\u{2212}A\n\
                         42,1.2406,\u{2212}0.0062,0.0153\n\
                         123,1.2390,0.2494,0.2691\n\
                         456,1.2168,0.4742,0.4836\n\
                         Mean,1.2321,0.2391,0.2560\n";

    fn primary() -> ConfigReport {
        aggregate("primary", reference_primary()).unwrap()
    }

    #[test]
    fn reference_table_passes() {
        let v = verify_tables(&primary(), TABLE).unwrap();
        assert!(v.passed(), "{:?}", v.diffs);
    }

    #[test]
    fn magnitudes_may_drift() {
        let rows = vec![
            SeedReport::from_gaps(42, 0.3, -0.05, Some(0.01)),
            SeedReport::from_gaps(123, 2.0, 0.01, Some(0.9)),
            SeedReport::from_gaps(456, 0.1, 0.2, Some(0.3)),
        ];
        assert!(verify_tables(&aggregate("p", rows).unwrap(), TABLE).unwrap().passed());
    }

    #[test]
    fn flipped_sign_is_located() {
        let mut rows = reference_primary();
        rows[1] = SeedReport::from_gaps(123, 1.2390, -0.2494, Some(0.2691));
        let v = verify_tables(&aggregate("p", rows).unwrap(), TABLE).unwrap();
        assert!(!v.passed());
        assert_eq!(v.diffs[0].row, "123");
        assert_eq!(v.diffs[0].column, TABLE_HEADER[2]);
        assert_eq!((v.diffs[0].expected.as_str(), v.diffs[0].actual.as_str()), ("+", "-"));
        assert!(v.diffs.iter().any(|d| d.column == "all-sample reversal" && d.expected == "2/3" && d.actual == "1/3"));
    }

    #[test]
    fn extra_reference_seed_is_a_shape_mismatch() {
        let table = format!("{TABLE}7,1.0,0.1,0.1\n");
        let v = verify_tables(&primary(), &table).unwrap();
        assert_eq!(v.diffs.len(), 1);
        assert_eq!(v.diffs[0].row, "shape");
    }

    #[test]
    fn malformed_reference_errors() {
        assert!(verify_tables(&primary(), "nonsense\n").is_err());
        assert!(verify_tables(&primary(), &TABLE.replace("0.2494", "abc")).is_err());
    }

    #[test]
    fn reference_tables_meet_every_directional_check() {
        let bg = aggregate("background_only", reference_background_only()).unwrap();
        let rel = aggregate("relevance_only", reference_relevance_only()).unwrap();
        let full = full_checks(&primary(), &bg, &rel);
        assert!(full.iter().all(|c| c.passed), "{full:?}");
        assert!(smoke_checks(&primary()).iter().all(|c| c.passed));
    }

    #[test]
    fn informational_check_does_not_gate() {
        let rows = vec![
            SeedReport::from_gaps(1, 0.5, -0.1, Some(0.2)),
            SeedReport::from_gaps(2, 0.4, -0.2, Some(0.1)),
        ];
        let checks = smoke_checks(&aggregate("p", rows).unwrap());
        assert!(!checks[2].passed && !checks[2].required);
        assert!(all_required_pass(&checks));
    }

    #[test]
    fn negative_proxy_or_diag_fails_smoke() {
        let rows = vec![
            SeedReport::from_gaps(1, 0.5, 0.1, Some(-0.2)),
            SeedReport::from_gaps(2, -0.1, 0.1, Some(0.1)),
        ];
        let checks = smoke_checks(&aggregate("p", rows).unwrap());
        assert_eq!(checks[0].detail, "1/2");
        assert!(!checks[0].passed && !checks[1].passed);
        assert!(!all_required_pass(&checks));
        let none = smoke_checks(&aggregate("p", vec![SeedReport::from_gaps(1, 0.5, 0.1, None)]).unwrap());
        assert_eq!((none[1].passed, none[1].detail.as_str()), (false, "NA"));
    }

    #[test]
    fn ablation_failures_are_named() {
        let bg = aggregate("background_only", vec![SeedReport::from_gaps(1, 0.1, 0.2, Some(0.0))]).unwrap();
        let rel = aggregate("relevance_only", vec![SeedReport::from_gaps(1, 0.3, 0.1, Some(0.1))]).unwrap();
        let failed: Vec<_> = full_checks(&primary(), &bg, &rel).into_iter().filter(|c| !c.passed).map(|c| c.name).collect();
        assert_eq!(
            failed,
            [
                "background-only keeps over half the primary proxy gap",
                "background-only all-sample gap within 0.05 of zero",
                "relevance-only proxy gap at most 0.05",
                "relevance-only satisfies neither criterion in any seed",
            ]
        );
    }
}
