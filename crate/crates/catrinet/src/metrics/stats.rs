//! Per-head statistics over cosine-weight logs: mean, SD and the 0.95
//! confidence half-width z * sd / sqrt(n), plus the bar-profile export
//! comparing single (w_a) and double (w_a * (1 + w_dwa)) head weights.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdMode {
    Population,
    Sample,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HeadStats {
    pub head: usize,
    pub mean: f64,
    pub sd: f64,
    pub ci_halfwidth: f64,
    pub n: usize,
}

fn z_value(level: f64) -> Result<f64> {
    // two-sided normal quantiles for the supported levels
    if (level - 0.90).abs() < 1e-9 {
        Ok(1.645)
    } else if (level - 0.95).abs() < 1e-9 {
        Ok(1.96)
    } else if (level - 0.99).abs() < 1e-9 {
        Ok(2.576)
    } else {
        Err(Error::Config(format!("unsupported confidence level {level}")))
    }
}

/// Half-width of the confidence interval from a known SD and sample count.
pub fn ci_halfwidth(sd: f64, n: usize, level: f64) -> Result<f64> {
    if n < 2 {
        return Err(Error::InsufficientData(format!("need n >= 2, got {n}")));
    }
    Ok(z_value(level)? * sd / (n as f64).sqrt())
}

/// Mean / SD / CI for one head's sample series.
pub fn head_stats(head: usize, samples: &[f64], level: f64, mode: SdMode) -> Result<HeadStats> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("head {head}: need n >= 2 samples, got {n}")));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let ss: f64 = samples.iter().map(|x| (x - mean) * (x - mean)).sum();
    let denom = match mode {
        SdMode::Population => n as f64,
        SdMode::Sample => (n - 1) as f64,
    };
    let sd = (ss / denom).sqrt();
    Ok(HeadStats {
        head,
        mean,
        sd,
        ci_halfwidth: ci_halfwidth(sd, n, level)?,
        n,
    })
}

/// Parsed head-weight log (the CSV written during training: one row per
/// iteration per head).
#[derive(Debug, Clone)]
pub struct HeadWeightLog {
    pub num_heads: usize,
    pub iterations: Vec<usize>,
    /// per head: series over iterations
    pub w_a: Vec<Vec<f64>>,
    pub w_cos: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
    pub w_dwa: Vec<Vec<f64>>,
}

impl HeadWeightLog {
    pub fn parse(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate();
        let header = match lines.next() {
            Some((_, h)) => h,
            None => return Err(Error::EmptyInput(format!("{}: empty head-weight log", path.display()))),
        };
        let cols: Vec<&str> = header.split(',').collect();
        let expected = ["iteration", "head", "w_a", "w_cos", "lambda", "w_dwa"];
        if cols != expected {
            return Err(Error::Parse(format!(
                "{}: expected header {expected:?}, got {cols:?}",
                path.display()
            )));
        }
        let mut rows: Vec<(usize, usize, f64, f64, f64, f64)> = Vec::new();
        let mut num_heads = 0usize;
        for (lineno, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Parse(format!("{}:{}: expected 6 fields", path.display(), lineno + 1)));
            }
            let parse_err = |e| Error::Parse(format!("{}:{}: {e}", path.display(), lineno + 1));
            let iter: usize = f[0].parse().map_err(|e| parse_err(format!("{e}")))?;
            let head: usize = f[1].parse().map_err(|e| parse_err(format!("{e}")))?;
            let wa: f64 = f[2].parse().map_err(|e| parse_err(format!("{e}")))?;
            let wc: f64 = f[3].parse().map_err(|e| parse_err(format!("{e}")))?;
            let la: f64 = f[4].parse().map_err(|e| parse_err(format!("{e}")))?;
            let wd: f64 = f[5].parse().map_err(|e| parse_err(format!("{e}")))?;
            num_heads = num_heads.max(head + 1);
            rows.push((iter, head, wa, wc, la, wd));
        }
        if rows.is_empty() {
            return Err(Error::EmptyInput(format!("{}: no data rows", path.display())));
        }
        let mut iterations: Vec<usize> = rows.iter().map(|r| r.0).collect();
        iterations.dedup();
        let mut log = HeadWeightLog {
            num_heads,
            iterations,
            w_a: vec![Vec::new(); num_heads],
            w_cos: vec![Vec::new(); num_heads],
            lambda: Vec::new(),
            w_dwa: vec![Vec::new(); num_heads],
        };
        for (_, head, wa, wc, la, wd) in rows {
            log.w_a[head].push(wa);
            log.w_cos[head].push(wc);
            if head == 0 {
                log.lambda.push(la);
            }
            log.w_dwa[head].push(wd);
        }
        Ok(log)
    }

    /// Table-style stats over the per-head cosine weight series.
    pub fn cosine_stats(&self, level: f64, mode: SdMode) -> Result<Vec<HeadStats>> {
        (0..self.num_heads)
            .map(|h| head_stats(h, &self.w_cos[h], level, mode))
            .collect()
    }

    /// Final-iteration single and double weights per head.
    pub fn final_weights(&self) -> (Vec<f64>, Vec<f64>) {
        let single: Vec<f64> = self.w_a.iter().map(|s| *s.last().unwrap()).collect();
        let double: Vec<f64> = self
            .w_a
            .iter()
            .zip(&self.w_dwa)
            .map(|(a, d)| a.last().unwrap() * (1.0 + d.last().unwrap()))
            .collect();
        (single, double)
    }
}

/// Bar-profile SVG comparing single and double weights: exactly one pair
/// of `<rect>` bars per head.
pub fn weight_profile_svg(single: &[f64], double: &[f64]) -> String {
    assert_eq!(single.len(), double.len(), "profile: weight series differ in length");
    let n = single.len();
    let (width, height, margin) = (80 + n * 64, 320usize, 40.0_f64);
    let plot_h = height as f64 - 2.0 * margin;
    let maxv = single
        .iter()
        .chain(double.iter())
        .fold(1e-9_f64, |m, &v| m.max(v));
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(
        svg,
        r#"  <line x1="40" y1="{y}" x2="{x2}" y2="{y}" stroke="black"/>"#,
        y = height as f64 - margin,
        x2 = width - 20
    );
    for h in 0..n {
        let x0 = 60.0 + h as f64 * 64.0;
        let hs = single[h] / maxv * plot_h;
        let hd = double[h] / maxv * plot_h;
        let _ = writeln!(
            svg,
            r##"  <rect class="single" x="{:.2}" y="{:.2}" width="20" height="{:.2}" fill="#4878a8"/>"##,
            x0,
            height as f64 - margin - hs,
            hs
        );
        let _ = writeln!(
            svg,
            r##"  <rect class="double" x="{:.2}" y="{:.2}" width="20" height="{:.2}" fill="#c85450"/>"##,
            x0 + 24.0,
            height as f64 - margin - hd,
            hd
        );
        let _ = writeln!(
            svg,
            r#"  <text x="{:.2}" y="{:.2}" font-size="12">h{h}</text>"#,
            x0 + 8.0,
            height as f64 - margin + 16.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}
