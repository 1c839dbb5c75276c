//! Single-object tracking metrics and the per-frame results file.

use std::fs;
use std::path::Path;

use super::BBox;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SotMetrics {
    /// Mean over IoU thresholds `0, 0.05, …, 1` of the fraction of frames
    /// with a nonzero IoU of at least the threshold.
    pub success: f64,
    /// Fraction of frames with centre error at most 20 px.
    pub precision: f64,
    /// Mean over thresholds `0, 0.005, …, 0.5` of the fraction of frames
    /// whose box-size-normalised centre error is at most the threshold.
    pub norm_precision: f64,
}

pub const PRECISION_PX: f64 = 20.0;

pub fn eval_sot(pred: &[BBox], gt: &[BBox]) -> Result<SotMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Err(Error::Invalid("no frames to evaluate".into()));
    }
    for b in gt {
        b.validate()?;
    }
    let n = gt.len() as f64;
    let ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p.iou(g)).collect();
    let success = (0..=20)
        .map(|k| {
            let th = k as f64 * 0.05;
            ious.iter().filter(|&&v| v > 0.0 && v >= th).count() as f64 / n
        })
        .sum::<f64>()
        / 21.0;
    let precision = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| (p.cx - g.cx).hypot(p.cy - g.cy) <= PRECISION_PX)
        .count() as f64
        / n;
    let nerr: Vec<f64> = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| ((p.cx - g.cx) / g.w).hypot((p.cy - g.cy) / g.h))
        .collect();
    let norm_precision = (0..=100)
        .map(|k| {
            let th = k as f64 * 0.005;
            nerr.iter().filter(|&&e| e <= th).count() as f64 / n
        })
        .sum::<f64>()
        / 101.0;
    Ok(SotMetrics {
        success,
        precision,
        norm_precision,
    })
}

impl SotMetrics {
    /// Flat `key=value` report.
    pub fn to_report(&self) -> String {
        format!(
            "success={}\nprecision={}\nnorm_precision={}\n",
            format_sig(self.success),
            format_sig(self.precision),
            format_sig(self.norm_precision)
        )
    }
}

/// Six significant digits, `%g` style.
pub fn format_sig(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{v:.5e}")
    }
}

/// Writes `t cx cy w h score` lines.
pub fn write_results(path: impl AsRef<Path>, rows: &[(BBox, f64)]) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::new();
    for (t, (b, score)) in rows.iter().enumerate() {
        s.push_str(&format!(
            "{t} {} {} {} {} {}\n",
            format_sig(b.cx),
            format_sig(b.cy),
            format_sig(b.w),
            format_sig(b.h),
            format_sig(*score)
        ));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<(BBox, f64)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || {
            Error::format(
                path,
                format!("line {}: expected `t cx cy w h score`", n + 1),
            )
        };
        let f: Vec<f64> = line
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        if f.len() != 6 || f[0] != out.len() as f64 {
            return Err(bad());
        }
        out.push((BBox::new(f[1], f[2], f[3], f[4]), f[5]));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_disjoint() {
        let gt = vec![BBox::new(10.0, 10.0, 8.0, 8.0); 4];
        let m = eval_sot(&gt, &gt).unwrap();
        assert_eq!((m.success, m.precision, m.norm_precision), (1.0, 1.0, 1.0));
        let far = vec![BBox::new(60.0, 60.0, 8.0, 8.0); 4];
        let m = eval_sot(&far, &gt).unwrap();
        assert_eq!((m.success, m.precision), (0.0, 0.0));
        assert!(eval_sot(&far[..3], &gt).is_err());
    }

    #[test]
    fn sig_format() {
        assert_eq!(format_sig(1.0), "1");
        assert_eq!(format_sig(31.5), "31.5");
        assert_eq!(format_sig(0.123456789), "0.123457");
        assert_eq!(format_sig(123456.7), "123457");
        assert_eq!(format_sig(1234567.0), "1.23457e6");
    }
}
