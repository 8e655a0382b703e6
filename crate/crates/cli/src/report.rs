//! Quality metrics and CSV reports.

use std::path::Path;

use metacodec::checkpoint::write_atomic;
use metacodec::metrics::{ms_ssim_y, psnr};
use metacodec::ImageTensor;
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub image_id: String,
    pub bpp: f64,
    pub ms_ssim_y: f64,
    pub psnr: f64,
    pub bits_total: u64,
    pub bits_payload: u64,
    pub bits_overhead: u64,
}

/// Metrics of `x_hat` against `x`; all bits count as payload until
/// [`MetricsRecord::with_payload`] splits them.
pub fn evaluate(x: &ImageTensor, x_hat: &ImageTensor, bits_total: u64) -> Result<MetricsRecord> {
    let pixels = (x.height() * x.width()) as f64;
    Ok(MetricsRecord {
        image_id: String::new(),
        bpp: bits_total as f64 / pixels,
        ms_ssim_y: ms_ssim_y(x, x_hat)?,
        psnr: psnr(x, x_hat)?,
        bits_total,
        bits_payload: bits_total,
        bits_overhead: 0,
    })
}

impl MetricsRecord {
    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.image_id = id.into();
        self
    }

    pub fn with_payload(mut self, payload: u64) -> Self {
        self.bits_payload = payload.min(self.bits_total);
        self.bits_overhead = self.bits_total - self.bits_payload;
        self
    }
}

/// One row of a sweep report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub image_id: String,
    pub target_bpp: f64,
    pub codec: u8,
    pub bits: u8,
    pub best_effort: bool,
    pub trials: usize,
    pub bpp: f64,
    pub ms_ssim_y: f64,
    pub psnr: f64,
    pub bits_total: u64,
    pub bits_payload: u64,
    pub bits_overhead: u64,
}

pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_atomic(path, &csv_bytes(rows)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images_and_bpp_accounting() {
        let x = ImageTensor::from_fn(64, 64, |y, x, c| ((y + 2 * x + c) % 9) as f64 / 8.0);
        let r = evaluate(&x, &x, 8192).unwrap().with_payload(8000);
        assert_eq!(r.bpp, 2.0);
        assert!((r.ms_ssim_y - 1.0).abs() < 1e-12);
        assert_eq!(r.psnr, 100.0);
        assert_eq!((r.bits_payload, r.bits_overhead), (8000, 192));
        assert!(evaluate(&x, &x.crop(32, 32), 1).is_err());
        let text = String::from_utf8(csv_bytes(&[r.with_id("a")]).unwrap()).unwrap();
        assert!(text.starts_with("image_id,bpp,ms_ssim_y,psnr,bits_total,bits_payload,bits_overhead\n"));
    }
}
