use metacodec::ImageTensor;

use crate::bank::{CodebookSet, CodecBank};
use crate::error::Result;
use crate::pipeline::{compress, decompress, CompressOptions, RateTarget, SWEEP_TARGETS};
use crate::report::{evaluate, SweepRow};

/// Compresses and decompresses one image at every sweep target.
pub fn sweep_image(
    id: &str,
    x: &ImageTensor,
    bank: &CodecBank,
    codebooks: Option<&CodebookSet>,
    margin: f64,
    opts: &CompressOptions,
) -> Result<Vec<SweepRow>> {
    SWEEP_TARGETS
        .iter()
        .map(|&t| {
            let target = RateTarget { target_bpp: t, margin };
            let c = compress(x, &target, bank, codebooks, opts)?;
            let x_hat = decompress(&c.bytes, bank, codebooks)?;
            let m = evaluate(x, &x_hat, c.bits_total())?.with_payload(c.bits_payload());
            Ok(SweepRow {
                image_id: id.to_string(),
                target_bpp: t,
                codec: c.bitstream.codec_id,
                bits: c.bitstream.bits,
                best_effort: c.bitstream.best_effort,
                trials: c.trials.len(),
                bpp: m.bpp,
                ms_ssim_y: m.ms_ssim_y,
                psnr: m.psnr,
                bits_total: m.bits_total,
                bits_payload: m.bits_payload,
                bits_overhead: m.bits_overhead,
            })
        })
        .collect()
}
