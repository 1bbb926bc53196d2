//! Evaluation metrics and their CSV report.

use serde::{Deserialize, Serialize};

use crate::error::{DnaError, Result};
use crate::losses::{mse_loss, ssim};
use crate::tensor::Tensor;

/// Reports clamp PSNR of identical images to this value.
pub const PSNR_CAP_DB: f64 = 99.0;

pub fn rmse(y: &Tensor, x: &Tensor) -> Result<f64> {
    Ok(mse_loss(y, x)?.sqrt())
}

/// `20 log10(peak / rmse)`; `+inf` for identical images.
pub fn psnr(y: &Tensor, x: &Tensor, peak: f64) -> Result<f64> {
    let e = rmse(y, x)?;
    Ok(if e == 0.0 {
        f64::INFINITY
    } else {
        20.0 * (peak / e).log10()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub image_id: String,
    pub ssim: f64,
    pub psnr_db: f64,
    pub rmse: f64,
}

impl MetricsRow {
    pub fn compute(image_id: &str, pred: &Tensor, truth: &Tensor) -> Result<Self> {
        Ok(MetricsRow {
            image_id: image_id.to_string(),
            ssim: ssim(pred, truth, 1.0)?,
            psnr_db: psnr(pred, truth, 1.0)?.min(PSNR_CAP_DB),
            rmse: rmse(pred, truth)?,
        })
    }
}

/// Mean and sample standard deviation (n - 1 denominator, 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    pub fn push(&mut self, row: MetricsRow) {
        self.rows.push(row);
    }

    pub fn ssim(&self) -> (f64, f64) {
        mean_std(&self.rows.iter().map(|r| r.ssim).collect::<Vec<_>>())
    }

    pub fn psnr(&self) -> (f64, f64) {
        mean_std(&self.rows.iter().map(|r| r.psnr_db).collect::<Vec<_>>())
    }

    pub fn rmse(&self) -> (f64, f64) {
        mean_std(&self.rows.iter().map(|r| r.rmse).collect::<Vec<_>>())
    }

    /// Header, one row per image, then a `mean±std` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("image_id,ssim,psnr_db,rmse\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6}\n",
                r.image_id, r.ssim, r.psnr_db, r.rmse
            ));
        }
        let f = |(m, sd): (f64, f64)| format!("{:.6}±{:.6}", m, sd);
        s.push_str(&format!(
            "mean±std,{},{},{}\n",
            f(self.ssim()),
            f(self.psnr()),
            f(self.rmse())
        ));
        s
    }

    /// Parses the per-image rows of [`to_csv`](Self::to_csv) output.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        let mut offset = 0;
        for (i, line) in text.lines().enumerate() {
            let start = offset;
            offset += line.len() + 1;
            if i == 0 || line.starts_with("mean±std") || line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            let num = |k: usize| -> Result<f64> {
                cells
                    .get(k)
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| DnaError::Parse {
                        offset: start,
                        detail: format!("bad metrics row {:?}", line),
                    })
            };
            rows.push(MetricsRow {
                image_id: cells[0].to_string(),
                ssim: num(1)?,
                psnr_db: num(2)?,
                rmse: num(3)?,
            });
        }
        Ok(MetricsReport { rows })
    }
}
