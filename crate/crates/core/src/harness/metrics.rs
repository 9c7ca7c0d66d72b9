use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// PSNR reported for an exact match.
pub const PSNR_CAP: f64 = 99.0;

/// `(mse, psnr)` of `b` against the reference `a`; peak is `max|a|`.
pub fn compare_outputs(a: &Tensor, b: &Tensor) -> Result<(f64, f64)> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "compare {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    let peak = a.max_abs() as f64;
    let psnr = if mse == 0.0 {
        PSNR_CAP
    } else if peak == 0.0 {
        0.0
    } else {
        (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
    };
    Ok((mse, psnr))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run_id: String,
    pub toggles: String,
    pub executed_macs: u64,
    pub baseline_macs: u64,
    /// `baseline_macs / executed_macs`.
    pub speedup_mac: f64,
    /// MACs weighted by operand width; see [`crate::scheduler::FLOAT_MAC_WIDTH`].
    pub executed_bit_macs: u64,
    pub baseline_bit_macs: u64,
    pub speedup_bit_mac: f64,
    /// Wall-clock figures, only when timing was requested.
    pub wall_time_ms: Option<f64>,
    pub baseline_wall_time_ms: Option<f64>,
    pub speedup_wall: Option<f64>,
    pub mse: f64,
    pub psnr: f64,
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub toggles: String,
    pub speedup_mac: f64,
    pub speedup_wall: Option<f64>,
    pub mse: f64,
    pub psnr: f64,
    pub executed_macs: u64,
    pub baseline_macs: u64,
}

impl From<&RunMetrics> for MetricsRow {
    fn from(m: &RunMetrics) -> Self {
        Self {
            run_id: m.run_id.clone(),
            toggles: m.toggles.clone(),
            speedup_mac: m.speedup_mac,
            speedup_wall: m.speedup_wall,
            mse: m.mse,
            psnr: m.psnr,
            executed_macs: m.executed_macs,
            baseline_macs: m.baseline_macs,
        }
    }
}

pub fn write_metrics_csv(rows: &[RunMetrics], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for m in rows {
        w.serialize(MetricsRow::from(m))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(values: &[f32]) -> Tensor {
        Tensor::new(vec![values.len()], values.to_vec()).unwrap()
    }

    #[test]
    fn identical_outputs_cap_psnr() {
        let a = v(&[0.5, -1.0, 0.25]);
        assert_eq!(compare_outputs(&a, &a).unwrap(), (0.0, PSNR_CAP));
    }

    #[test]
    fn unit_offset_with_unit_peak_is_zero_db() {
        let a = v(&[1.0, -1.0, 0.0, 0.5]);
        let b = a.map(|x| x + 1.0);
        let (mse, psnr) = compare_outputs(&a, &b).unwrap();
        assert_eq!(mse, 1.0);
        assert!(psnr.abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(compare_outputs(&v(&[1.0]), &v(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = RunMetrics {
            run_id: "r".into(),
            toggles: "hlc".into(),
            executed_macs: 10,
            baseline_macs: 20,
            speedup_mac: 2.0,
            executed_bit_macs: 160,
            baseline_bit_macs: 320,
            speedup_bit_mac: 2.0,
            wall_time_ms: None,
            baseline_wall_time_ms: None,
            speedup_wall: None,
            mse: 0.125,
            psnr: 40.0,
        };
        write_metrics_csv(std::slice::from_ref(&m), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(
            "run_id,toggles,speedup_mac,speedup_wall,mse,psnr,executed_macs,baseline_macs\n"
        ));
        assert_eq!(read_metrics_csv(&path).unwrap(), vec![MetricsRow::from(&m)]);
    }
}
