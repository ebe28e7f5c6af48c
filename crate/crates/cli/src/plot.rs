use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use demesh::error::{DemeshError, Result};
use demesh::verifier::{read_roc, EvalReport, RocPoint};

pub const PLOT_HEADER: &str = "model\tfpr\ttpr\tthreshold";

const SIZE: f64 = 400.0;
const MARGIN: f64 = 40.0;
const COLORS: [&str; 7] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"];

fn load_series(dir: &Path, models: &[String]) -> Result<Vec<(String, Vec<RocPoint>)>> {
    let names: Vec<String> = if models.is_empty() {
        let path = dir.join("report.tsv");
        let text = fs::read_to_string(&path).map_err(|e| DemeshError::io(&path, e))?;
        EvalReport::from_tsv(&text, &path)?.rows.into_iter().map(|r| r.model).collect()
    } else {
        models.to_vec()
    };
    let missing: Vec<&str> = names
        .iter()
        .filter(|m| !dir.join(format!("roc_{m}.tsv")).is_file())
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(DemeshError::InvalidArgument {
            op: "roc-plot",
            msg: format!("missing ROC files for: {}", missing.join(",")),
        });
    }
    names
        .into_iter()
        .map(|m| {
            let pts = read_roc(&dir.join(format!("roc_{m}.tsv")))?;
            Ok((m, pts))
        })
        .collect()
}

pub fn plot_tsv(series: &[(String, Vec<RocPoint>)]) -> String {
    let mut out = String::from(PLOT_HEADER);
    out.push('\n');
    for (m, pts) in series {
        for p in pts {
            let _ = writeln!(out, "{m}\t{:.6}\t{:.6}\t{}", p.fpr, p.tpr, p.threshold);
        }
    }
    out
}

/// One stepped polyline per model on the unit square.
pub fn plot_svg(series: &[(String, Vec<RocPoint>)]) -> String {
    let full = SIZE + 2.0 * MARGIN;
    let px = |f: f64| MARGIN + f * SIZE;
    let py = |t: f64| MARGIN + (1.0 - t) * SIZE;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{full}" height="{}" font-family="sans-serif" font-size="11">"#, full + 16.0 * series.len() as f64);
    let _ = writeln!(s, r#"<rect x="{MARGIN}" y="{MARGIN}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">false positive rate</text>"#, px(0.5), full - 10.0);
    let _ = writeln!(s, r#"<text x="12" y="{}" transform="rotate(-90 12 {})" text-anchor="middle">true positive rate</text>"#, py(0.5), py(0.5));
    for (i, (m, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut d = String::new();
        let mut prev: Option<&RocPoint> = None;
        for p in pts {
            if let Some(q) = prev {
                // horizontal then vertical: the curve holds its TPR until the next threshold
                let _ = write!(d, " {:.2},{:.2}", px(p.fpr), py(q.tpr));
            }
            let _ = write!(d, " {:.2},{:.2}", px(p.fpr), py(p.tpr));
            prev = Some(p);
        }
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" points="{}"><title>{m}</title></polyline>"#, d.trim());
        let ly = full + 4.0 + 16.0 * i as f64;
        let _ = writeln!(s, r#"<text x="{MARGIN}" y="{ly}" fill="{color}">{m}</text>"#);
    }
    s.push_str("</svg>\n");
    s
}

pub fn roc_plot(report: &Path, models: &[String], out: &Path) -> Result<()> {
    let series = load_series(report, models)?;
    fs::write(out, plot_tsv(&series)).map_err(|e| DemeshError::io(out, e))?;
    let svg = out.with_extension("svg");
    fs::write(&svg, plot_svg(&series)).map_err(|e| DemeshError::io(&svg, e))?;
    println!("series={} tsv={} svg={}", series.len(), out.display(), svg.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[(f64, f64)]) -> Vec<RocPoint> {
        v.iter().map(|&(fpr, tpr)| RocPoint { fpr, tpr, threshold: 0.5 }).collect()
    }

    #[test]
    fn svg_has_one_polyline_per_series() {
        let s = vec![("a".to_string(), pts(&[(0.0, 0.0), (0.5, 1.0)])), ("b".to_string(), pts(&[(0.0, 0.0), (1.0, 1.0)]))];
        let svg = plot_svg(&s);
        assert_eq!(svg.matches("<polyline").count(), 2);
        // the step adds a corner at (0.5, 0.0) before rising
        assert!(svg.contains("240.00,440.00 240.00,40.00"));
        assert_eq!(plot_tsv(&s).lines().count(), 5);
    }
}
