//! Self-contained SVG bar charts.
//!
//! Every bar carries `data-group`, `data-series` and `data-value` attributes,
//! and its printed label uses the same four-decimal text as the CSV table, so
//! [`parse_bars`] recovers exactly the cells of the table.

use crate::error::{Error, Result};
use crate::metrics::{format_gap, ConfigReport, MISSING};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

const BAR_W: f64 = 26.0;
const BAR_GAP: f64 = 4.0;
const GROUP_GAP: f64 = 34.0;
const PLOT_H: f64 = 260.0;
const LEFT: f64 = 64.0;
const TOP: f64 = 48.0;
const BOTTOM: f64 = 70.0;

struct Series {
    name: &'static str,
    label: &'static str,
    color: &'static str,
}

const PROXY: Series = Series {
    name: "proxy",
    label: "Proxy gap A\u{2212}B",
    color: "#6b6b6b",
};
const MAIN: Series = Series {
    name: "main",
    label: "Main gap B\u{2212}A",
    color: "#3b6fb6",
};
const DIAG: Series = Series {
    name: "diag",
    label: "Diagnostic gap B\u{2212}A",
    color: "#d9822b",
};

struct Group {
    name: String,
    values: Vec<Option<f64>>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn render(title: &str, series: &[Series], groups: &[Group]) -> String {
    // Values are rounded first so bar heights agree with their labels.
    let rounded = |v: f64| format_gap(v).parse::<f64>().expect("formatted number");
    let all: Vec<f64> = groups.iter().flat_map(|g| g.values.iter().flatten().map(|&v| rounded(v))).collect();
    let mut hi = all.iter().copied().fold(0.0, f64::max);
    let mut lo = all.iter().copied().fold(0.0, f64::min);
    if hi == lo {
        hi = 1.0;
    }
    let pad = (hi - lo) * 0.1;
    hi += if hi > 0.0 { pad } else { 0.0 };
    lo -= if lo < 0.0 { pad } else { 0.0 };
    let span = hi - lo;
    let y_of = |v: f64| TOP + (hi - v) / span * PLOT_H;
    let group_w = series.len() as f64 * (BAR_W + BAR_GAP) - BAR_GAP;
    let width = LEFT + groups.len() as f64 * (group_w + GROUP_GAP) + GROUP_GAP + 150.0;
    let height = TOP + PLOT_H + BOTTOM;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{LEFT}" y="22" font-size="14" font-weight="bold">{}</text>"#, escape(title));
    let zero = y_of(0.0);
    let right = LEFT + groups.len() as f64 * (group_w + GROUP_GAP) + GROUP_GAP;
    let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{:.2}" stroke="#333"/>"##, TOP + PLOT_H);
    let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{zero:.2}" x2="{right:.2}" y2="{zero:.2}" stroke="#333"/>"##);
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">0</text>"#, LEFT - 6.0, zero + 4.0);

    for (gi, g) in groups.iter().enumerate() {
        let x0 = LEFT + GROUP_GAP + gi as f64 * (group_w + GROUP_GAP);
        let name = escape(&g.name);
        let _ = writeln!(s, r#"<g class="group" data-group="{name}">"#);
        for (si, (ser, v)) in series.iter().zip(&g.values).enumerate() {
            let x = x0 + si as f64 * (BAR_W + BAR_GAP);
            let cx = x + BAR_W / 2.0;
            match v {
                Some(v) => {
                    let text = format_gap(*v);
                    let y = y_of(rounded(*v));
                    let (top, h) = if y < zero { (y, zero - y) } else { (zero, y - zero) };
                    let _ = writeln!(
                        s,
                        r#"<rect class="bar" data-group="{name}" data-series="{}" data-value="{text}" x="{x:.2}" y="{top:.2}" width="{BAR_W}" height="{h:.2}" fill="{}"/>"#,
                        ser.name, ser.color
                    );
                    let ty = if y < zero { top - 4.0 } else { top + h + 12.0 };
                    let _ = writeln!(s, r#"<text class="value" x="{cx:.2}" y="{ty:.2}" text-anchor="middle" font-size="9">{text}</text>"#);
                }
                None => {
                    let _ = writeln!(
                        s,
                        r#"<text class="bar" data-group="{name}" data-series="{}" data-value="{MISSING}" x="{cx:.2}" y="{:.2}" text-anchor="middle" font-size="9">{MISSING}</text>"#,
                        ser.name,
                        zero - 4.0
                    );
                }
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{name}</text>"#,
            x0 + group_w / 2.0,
            TOP + PLOT_H + 18.0
        );
        let _ = writeln!(s, "</g>");
    }

    for (i, ser) in series.iter().enumerate() {
        let y = TOP + 10.0 + i as f64 * 18.0;
        let _ = writeln!(s, r#"<rect x="{:.2}" y="{:.2}" width="12" height="12" fill="{}"/>"#, right + 10.0, y - 10.0, ser.color);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{y:.2}">{}</text>"#, right + 28.0, ser.label);
    }
    s.push_str("</svg>\n");
    s
}

/// Main and diagnostic gaps for every seed of one configuration.
pub fn per_seed_chart(report: &ConfigReport) -> Result<String> {
    if report.seeds.is_empty() {
        return Err(Error::Config(format!("report {:?} has no seeds to chart", report.config)));
    }
    let groups: Vec<Group> = report
        .seeds
        .iter()
        .map(|r| Group {
            name: r.seed.to_string(),
            values: vec![Some(r.delta_main), r.delta_diag],
        })
        .collect();
    Ok(render(
        &format!("{}: per-seed OOD probe gaps (B\u{2212}A)", report.config),
        &[MAIN, DIAG],
        &groups,
    ))
}

/// Mean proxy, main and diagnostic gaps side by side for each configuration.
pub fn comparison_chart(reports: &[ConfigReport]) -> Result<String> {
    if reports.is_empty() || reports.iter().any(|r| r.seeds.is_empty()) {
        return Err(Error::Config("comparison chart needs non-empty reports".into()));
    }
    let groups: Vec<Group> = reports
        .iter()
        .map(|r| Group {
            name: r.config.clone(),
            values: vec![Some(r.mean.delta_proxy), Some(r.mean.delta_main), r.mean.delta_diag],
        })
        .collect();
    Ok(render("Config-level mean gaps", &[PROXY, MAIN, DIAG], &groups))
}

/// Writes `per_seed_<config>.svg` for each report plus `config_comparison.svg`.
pub fn emit_charts(reports: &[ConfigReport], dir: &Path) -> Result<Vec<PathBuf>> {
    let comparison = comparison_chart(reports)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for r in reports {
        let path = dir.join(format!("per_seed_{}.svg", r.config));
        fs::write(&path, per_seed_chart(r)?).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    let path = dir.join("config_comparison.svg");
    fs::write(&path, comparison).map_err(|e| Error::io(&path, e))?;
    paths.push(path);
    Ok(paths)
}

/// One labeled bar read back from an emitted chart.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BarValue {
    pub group: String,
    pub series: String,
    /// Label text exactly as printed (`NA` for an absent value).
    pub value: String,
}

fn attr<'a>(tag: &'a str, name: &str) -> Option<&'a str> {
    let key = format!(" {name}=\"");
    let start = tag.find(&key)? + key.len();
    let len = tag[start..].find('"')?;
    Some(&tag[start..start + len])
}

/// Reads every `class="bar"` element of an emitted chart in document order.
pub fn parse_bars(svg: &str) -> Result<Vec<BarValue>> {
    let mut bars = Vec::new();
    for line in svg.lines().filter(|l| l.contains(r#"class="bar""#)) {
        let get = |name: &str| {
            attr(line, name).map(str::to_string).ok_or_else(|| Error::Malformed {
                what: "chart",
                detail: format!("bar without {name}: {line}"),
            })
        };
        bars.push(BarValue {
            group: get("data-group")?.replace("&quot;", "\"").replace("&lt;", "<").replace("&gt;", ">").replace("&amp;", "&"),
            series: get("data-series")?,
            value: get("data-value")?,
        });
    }
    Ok(bars)
}
