//! Metric rows and their rendering as LaTeX-style, aligned-text and CSV tables.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const COLUMNS: [&str; 5] = ["Model", "L1", "MS-SSIM", "Inception", "FID"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    LowerIsBetter,
    HigherIsBetter,
}

/// Orientation of the four metric columns (L1, MS-SSIM, Inception, FID).
pub const ORIENTATION: [Orientation; 4] = [
    Orientation::LowerIsBetter,
    Orientation::LowerIsBetter,
    Orientation::HigherIsBetter,
    Orientation::LowerIsBetter,
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model_name: String,
    pub dataset_name: String,
    pub l1: f64,
    /// `1 - MS-SSIM`.
    pub ms_ssim_dissimilarity: f64,
    pub ms_ssim: f64,
    pub inception: f64,
    pub fid: f64,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        let vals = [self.l1, self.ms_ssim_dissimilarity, self.ms_ssim, self.inception, self.fid];
        if !vals.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("metrics of {}", self.model_name),
            });
        }
        if self.fid < 0.0 || self.inception < 1.0 - 1e-12 || !(0.0..=1.0).contains(&self.ms_ssim_dissimilarity) {
            return Err(Error::Validation(format!(
                "metrics out of range for {}: fid {}, inception {}, ms-ssim dissimilarity {}",
                self.model_name, self.fid, self.inception, self.ms_ssim_dissimilarity
            )));
        }
        Ok(())
    }

    fn cells(&self) -> [String; 5] {
        [
            self.model_name.clone(),
            format_l1(self.l1),
            format_sci(self.ms_ssim_dissimilarity),
            format!("{:.2}", self.inception),
            format!("{:.2}", self.fid),
        ]
    }

    /// `Model & L1 & MS-SSIM & Inception & FID\\`
    pub fn latex_row(&self) -> String {
        format!("{}\\\\", self.cells().join(" & "))
    }
}

/// Two-digit mantissa with an unpadded exponent, e.g. `5.05E-2`.
pub fn format_sci(v: f64) -> String {
    if v == 0.0 {
        return "0.00E0".into();
    }
    let mut exp = v.abs().log10().floor() as i32;
    let mut mant = v / 10f64.powi(exp);
    // Rounding can carry the mantissa to 10.00.
    if (mant.abs() * 100.0).round() >= 1000.0 {
        exp += 1;
        mant = v / 10f64.powi(exp);
    }
    format!("{mant:.2}E{exp}")
}

/// Three decimals from 0.01 up, scientific below.
pub fn format_l1(v: f64) -> String {
    if v.abs() >= 0.01 || v == 0.0 {
        format!("{v:.3}")
    } else {
        format_sci(v)
    }
}

fn datasets(rows: &[MetricReport]) -> Vec<&str> {
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.dataset_name.as_str()) {
            names.push(&r.dataset_name);
        }
    }
    names
}

/// LaTeX tabular body with one section per dataset, in first-seen order.
pub fn latex_table(rows: &[MetricReport]) -> String {
    let mut out = String::new();
    out.push_str("\\begin{tabular}{| l | c c c c|}\n\\hline\n");
    out.push_str(&format!("{} \\\\\n\\hline\n", COLUMNS.join(" & ")));
    for name in datasets(rows) {
        out.push_str(&format!("\\multicolumn{{5}}{{|c|}}{{{name}}}\\\\\n\\hline\n"));
        for r in rows.iter().filter(|r| r.dataset_name == name) {
            out.push_str(&r.latex_row());
            out.push('\n');
        }
        out.push_str("\\hline\n");
    }
    out.push_str("\\end{tabular}\n");
    out
}

/// Column-aligned plain-text table with an orientation row.
pub fn text_table(rows: &[MetricReport]) -> String {
    let orient: Vec<String> = std::iter::once(String::new())
        .chain(ORIENTATION.iter().map(|o| match o {
            Orientation::LowerIsBetter => "lower".to_string(),
            Orientation::HigherIsBetter => "higher".to_string(),
        }))
        .collect();
    let mut lines: Vec<Vec<String>> = vec![COLUMNS.iter().map(|s| s.to_string()).collect(), orient];
    let mut sections = Vec::new();
    for name in datasets(rows) {
        sections.push((lines.len(), name.to_string()));
        for r in rows.iter().filter(|r| r.dataset_name == name) {
            lines.push(r.cells().to_vec());
        }
    }
    let widths: Vec<usize> = (0..5).map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0)).collect();
    let total = widths.iter().sum::<usize>() + 3 * 4;
    let mut out = String::new();
    let mut si = 0;
    for (i, l) in lines.iter().enumerate() {
        while si < sections.len() && sections[si].0 == i {
            out.push_str(&format!("{:-^total$}\n", format!(" {} ", sections[si].1)));
            si += 1;
        }
        let cells: Vec<String> = l
            .iter()
            .enumerate()
            .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
            .collect();
        out.push_str(cells.join("   ").trim_end());
        out.push('\n');
    }
    out
}

pub const CSV_HEADER: &str = "dataset,model,l1,ms_ssim_dissimilarity,ms_ssim,inception,fid";

/// Full-precision CSV.
pub fn csv_table(rows: &[MetricReport]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.dataset_name, r.model_name, r.l1, r.ms_ssim_dissimilarity, r.ms_ssim, r.inception, r.fid
        ));
    }
    out
}
