use serde::{Deserialize, Serialize};

use crate::codec::{Mask, VideoTensor};
use crate::error::{contract_err, shape_err, Result};

/// PSNR reported for identical inputs.
pub const PSNR_CAP_DB: f64 = 99.0;
/// SSIM window side.
pub const SSIM_WINDOW: usize = 8;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub psnr_db: f64,
    pub ssim: f64,
    /// PSNR over the pixels outside the edit mask.
    pub masked_psnr_db: Option<f64>,
}

/// `10 log10(1 / mse)` for peak 1.0 over pixels where `mask` is set (all
/// pixels when absent), capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &VideoTensor, b: &VideoTensor, mask: Option<&Mask>) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(shape_err!("psnr of {:?} and {:?}", a.dims(), b.dims()));
    }
    let [f, c, h, w] = a.dims();
    let mut sum = 0.0f64;
    let mut n = 0usize;
    match mask {
        None => {
            for (x, y) in a.data().iter().zip(b.data()) {
                sum += (*x as f64 - *y as f64).powi(2);
            }
            n = a.data().len();
        }
        Some(m) => {
            if (m.frames(), m.height(), m.width()) != (f, h, w) {
                return Err(shape_err!("mask {}x{}x{} for video {f}x{h}x{w}", m.frames(), m.height(), m.width()));
            }
            for fr in 0..f {
                for y in 0..h {
                    for x in 0..w {
                        if m.get(fr, y, x) {
                            for ch in 0..c {
                                sum += (a.at(fr, ch, y, x) as f64 - b.at(fr, ch, y, x) as f64).powi(2);
                            }
                            n += c;
                        }
                    }
                }
            }
        }
    }
    if n == 0 {
        return Err(contract_err!("psnr over an empty mask"));
    }
    let mse = sum / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gray_frame(v: &VideoTensor, f: usize) -> Vec<f64> {
    let (c, h, w) = (v.channels(), v.height(), v.width());
    (0..h * w)
        .map(|i| (0..c).map(|ch| v.at(f, ch, i / w, i % w) as f64).sum::<f64>() / c as f64)
        .collect()
}

/// Mean SSIM over all 8x8 windows (stride 1) of every frame, on the channel
/// mean.
pub fn ssim(a: &VideoTensor, b: &VideoTensor) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(shape_err!("ssim of {:?} and {:?}", a.dims(), b.dims()));
    }
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(shape_err!("frame {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"));
    }
    let k = SSIM_WINDOW;
    let area = (k * k) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for f in 0..a.frames() {
        let (ga, gb) = (gray_frame(a, f), gray_frame(b, f));
        for y0 in 0..=h - k {
            for x0 in 0..=w - k {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + k {
                    for x in x0..x0 + k {
                        let (p, q) = (ga[y * w + x], gb[y * w + x]);
                        sa += p;
                        sb += q;
                        saa += p * p;
                        sbb += q * q;
                        sab += p * q;
                    }
                }
                let (ma, mb) = (sa / area, sb / area);
                let va = saa / area - ma * ma;
                let vb = sbb / area - mb * mb;
                let cov = sab / area - ma * mb;
                total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// PSNR and SSIM of `pred` against `target`; with an edit mask, also PSNR
/// over the region outside it.
pub fn evaluate(pred: &VideoTensor, target: &VideoTensor, edit_mask: Option<&Mask>) -> Result<MetricsRecord> {
    Ok(MetricsRecord {
        psnr_db: psnr(pred, target, None)?,
        ssim: ssim(pred, target)?,
        masked_psnr_db: edit_mask.map(|m| psnr(pred, target, Some(&m.inverted()))).transpose()?,
    })
}
