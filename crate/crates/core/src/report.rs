//! Report emission: metrics CSVs in the fixed column layout, significance
//! annotations from paired t-tests, and grayscale comparison montages
//! written as binary PGM (P5) rasters with a tiny built-in 5x7 font for the
//! column labels.

use crate::error::{Error, Result};
use crate::metrics::{CaseMetrics, ResultsTable};
use crate::stats::paired_ttest;
use ndarray::Array2;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.6}"),
        None => "NA".to_string(),
    }
}

fn metrics_row(r: &CaseMetrics) -> String {
    format!(
        "{},{:.6},{:.6},{:.6},{},{}",
        r.case_id,
        r.dice_vs,
        r.dice_cochlea,
        r.dice_mean,
        fmt_opt(r.assd_vs),
        fmt_opt(r.assd_cochlea)
    )
}

pub const METRICS_CSV_HEADER: &str =
    "case_id,dice_vs,dice_cochlea,dice_mean,assd_vs,assd_cochlea";

/// Render one results table: per-case rows, then the aggregate rows flagged
/// `AGG_MEAN` / `AGG_SD`.
pub fn metrics_csv(table: &ResultsTable) -> String {
    let mut out = String::new();
    out.push_str(METRICS_CSV_HEADER);
    out.push('\n');
    for r in &table.rows {
        out.push_str(&metrics_row(r));
        out.push('\n');
    }
    out.push_str(&metrics_row(&table.agg_mean));
    out.push('\n');
    out.push_str(&metrics_row(&table.agg_sd));
    out.push('\n');
    out
}

/// A named paired comparison of per-case metric values.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub name: String,
    pub metric: String,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

/// The two significance levels of the figure this mirrors.
pub fn annotation(p: f64) -> &'static str {
    if p < 0.0001 {
        "****"
    } else if p < 0.05 {
        "*"
    } else {
        "n.s."
    }
}

pub fn significance_csv(comparisons: &[Comparison]) -> Result<String> {
    let mut out = String::new();
    out.push_str("comparison,metric,t,p,annotation\n");
    for c in comparisons {
        match paired_ttest(&c.xs, &c.ys) {
            Ok((t, p)) => {
                writeln!(out, "{},{},{:.6},{:.6},{}", c.name, c.metric, t, p, annotation(p))
                    .unwrap();
            }
            // Identical results across arms: not significant, flagged.
            Err(Error::ZeroVariance) => {
                writeln!(
                    out,
                    "{},{},NA,NA,n.s. (zero variance)",
                    c.name, c.metric
                )
                .unwrap();
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

// 5x7 font, one u8 per row, low 5 bits used (MSB-left).
fn glyph(c: char) -> [u8; 7] {
    match c {
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x1B, 0x11],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x06, 0x08, 0x10, 0x1F],
        '3' => [0x0E, 0x11, 0x01, 0x06, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        _ => [0x00; 7], // space and anything else
    }
}

fn stamp_text(canvas: &mut Array2<u8>, top: usize, left: usize, text: &str) {
    for (ci, ch) in text.chars().enumerate() {
        let g = glyph(ch.to_ascii_uppercase());
        let x0 = left + ci * 6;
        for (ry, row) in g.iter().enumerate() {
            for rx in 0..5 {
                if row & (1 << (4 - rx)) != 0 {
                    let (y, x) = (top + ry, x0 + rx);
                    if y < canvas.dim().0 && x < canvas.dim().1 {
                        canvas[[y, x]] = 255;
                    }
                }
            }
        }
    }
}

/// A grid of grayscale panels with column labels. Rows are cases, columns
/// are pipeline stages (source, each translation, real target).
#[derive(Debug, Clone)]
pub struct Montage {
    pub col_labels: Vec<String>,
    /// `rows[case][column]`, each panel in `[-1, 1]`.
    pub rows: Vec<Vec<Array2<f32>>>,
}

const LABEL_STRIP: usize = 10;
const GAP: usize = 2;

/// Render the montage and write it as a binary PGM (P5).
pub fn write_montage_pgm(m: &Montage, path: impl AsRef<Path>) -> Result<PathBuf> {
    let path = path.as_ref();
    if m.rows.is_empty() || m.rows[0].is_empty() {
        return Err(Error::IoFailure("montage has no panels".into()));
    }
    let n_cols = m.col_labels.len();
    let (ph, pw) = m.rows[0][0].dim();
    for row in &m.rows {
        if row.len() != n_cols {
            return Err(Error::IoFailure(format!(
                "montage row has {} panels, expected {n_cols}",
                row.len()
            )));
        }
        for p in row {
            if p.dim() != (ph, pw) {
                return Err(Error::IoFailure(format!(
                    "montage panels differ in size: {:?} vs {:?}",
                    p.dim(),
                    (ph, pw)
                )));
            }
        }
    }
    let width = n_cols * pw + (n_cols - 1) * GAP;
    let height = LABEL_STRIP + m.rows.len() * ph + (m.rows.len() - 1) * GAP;
    let mut canvas = Array2::<u8>::zeros((height, width));
    for (c, label) in m.col_labels.iter().enumerate() {
        stamp_text(&mut canvas, 1, c * (pw + GAP) + 1, label);
    }
    for (r, row) in m.rows.iter().enumerate() {
        let top = LABEL_STRIP + r * (ph + GAP);
        for (c, panel) in row.iter().enumerate() {
            let left = c * (pw + GAP);
            for y in 0..ph {
                for x in 0..pw {
                    let v = ((panel[[y, x]].clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round();
                    canvas[[top + y, left + x]] = v as u8;
                }
            }
        }
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(canvas.iter().copied());
    std::fs::write(path, bytes).map_err(|e| Error::IoFailure(format!("{}: {e}", path.display())))?;
    Ok(path.to_path_buf())
}

/// Parse just the dimensions of a P5 file (testing/verification aid).
pub fn pgm_dims(path: impl AsRef<Path>) -> Result<(usize, usize)> {
    let bytes = std::fs::read(path.as_ref())?;
    let text = String::from_utf8_lossy(&bytes[..bytes.len().min(64)]).to_string();
    let mut it = text.split_ascii_whitespace();
    if it.next() != Some("P5") {
        return Err(Error::CorruptHeader("not a P5 PGM".into()));
    }
    let w: usize = it
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::CorruptHeader("missing width".into()))?;
    let h: usize = it
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::CorruptHeader("missing height".into()))?;
    Ok((w, h))
}

/// Write per-table metrics CSVs, a significance CSV when there are
/// comparisons, and an optional montage. Returns the created paths.
pub fn emit_report(
    results: &[(String, ResultsTable)],
    comparisons: &[Comparison],
    montage: Option<&Montage>,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::IoFailure(format!("{}: {e}", out_dir.display())))?;
    let mut written = Vec::new();
    for (label, table) in results {
        let p = out_dir.join(format!("metrics_{label}.csv"));
        std::fs::write(&p, metrics_csv(table))
            .map_err(|e| Error::IoFailure(format!("{}: {e}", p.display())))?;
        written.push(p);
    }
    if !comparisons.is_empty() {
        let p = out_dir.join("significance.csv");
        std::fs::write(&p, significance_csv(comparisons)?)
            .map_err(|e| Error::IoFailure(format!("{}: {e}", p.display())))?;
        written.push(p);
    }
    if let Some(m) = montage {
        written.push(write_montage_pgm(m, out_dir.join("montage.pgm"))?);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::evaluate_cases;
    use crate::volume::LabelMask;
    use ndarray::Array3;

    fn table() -> ResultsTable {
        let mut a = Array3::<u8>::zeros((4, 4, 4));
        a[[1, 1, 1]] = 1;
        a[[2, 2, 2]] = 2;
        let m = LabelMask::new(a, [1.0; 3]).unwrap();
        evaluate_cases(&[m.clone()], &[m], [1.0; 3]).unwrap()
    }

    #[test]
    fn metrics_csv_layout() {
        let csv = metrics_csv(&table());
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], METRICS_CSV_HEADER);
        assert!(lines[1].starts_with("case-0000,"));
        assert!(lines[2].starts_with("AGG_MEAN,"));
        assert!(lines[3].starts_with("AGG_SD,"));
        assert_eq!(lines.len(), 4);
    }

    #[test]
    fn significance_annotations() {
        assert_eq!(annotation(0.2), "n.s.");
        assert_eq!(annotation(0.01), "*");
        assert_eq!(annotation(5e-5), "****");

        let comps = vec![
            Comparison {
                name: "a-vs-b".into(),
                metric: "dice_mean".into(),
                xs: vec![0.9, 0.8, 0.85, 0.95],
                ys: vec![0.5, 0.4, 0.45, 0.55],
            },
            Comparison {
                name: "a-vs-a".into(),
                metric: "dice_mean".into(),
                xs: vec![0.9, 0.8, 0.85],
                ys: vec![0.9, 0.8, 0.85],
            },
        ];
        let csv = significance_csv(&comps).unwrap();
        assert!(csv.contains("a-vs-b,dice_mean,"));
        assert!(csv.contains("n.s. (zero variance)"));
    }

    #[test]
    fn emit_report_with_and_without_comparisons() {
        let dir = tempfile::tempdir().unwrap();
        let results = vec![("arm1".to_string(), table())];
        let written = emit_report(&results, &[], None, dir.path()).unwrap();
        assert_eq!(written.len(), 1);
        assert!(!dir.path().join("significance.csv").exists());

        let comps = vec![Comparison {
            name: "x".into(),
            metric: "dice_mean".into(),
            xs: vec![0.9, 0.7, 0.8],
            ys: vec![0.2, 0.4, 0.1],
        }];
        let written = emit_report(&results, &comps, None, dir.path()).unwrap();
        assert_eq!(written.len(), 2);
        assert!(dir.path().join("significance.csv").exists());
    }

    #[test]
    fn montage_layout_two_cases_four_panels() {
        let dir = tempfile::tempdir().unwrap();
        let panel = |v: f32| Array2::<f32>::from_elem((16, 16), v);
        let m = Montage {
            col_labels: vec![
                "SOURCE".into(),
                "CYCLEGAN".into(),
                "QSATTN".into(),
                "TARGET".into(),
            ],
            rows: vec![
                vec![panel(-1.0), panel(-0.5), panel(0.5), panel(1.0)],
                vec![panel(0.0), panel(0.2), panel(-0.2), panel(0.9)],
            ],
        };
        let p = write_montage_pgm(&m, dir.path().join("m.pgm")).unwrap();
        let (w, h) = pgm_dims(&p).unwrap();
        assert_eq!(w, 4 * 16 + 3 * GAP);
        assert_eq!(h, LABEL_STRIP + 2 * 16 + GAP);
        // Gray levels map [-1,1] -> [0,255].
        let bytes = std::fs::read(&p).unwrap();
        let pixels = &bytes[bytes.len() - w * h..];
        // First panel row starts after the label strip.
        let first_panel_pixel = pixels[LABEL_STRIP * w];
        assert_eq!(first_panel_pixel, 0); // -1.0 -> 0
    }

    #[test]
    fn mismatched_panel_sizes_are_rejected() {
        let m = Montage {
            col_labels: vec!["A".into(), "B".into()],
            rows: vec![vec![
                Array2::<f32>::zeros((8, 8)),
                Array2::<f32>::zeros((8, 9)),
            ]],
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(write_montage_pgm(&m, dir.path().join("m.pgm")).is_err());
    }
}
