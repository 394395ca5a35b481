//! Space-to-channel stem slicing.
//!
//! Output channel `p * C + c` holds input channel `c` sampled at pixel
//! parity `p`, where `p = 2 * row_parity + col_parity`:
//!
//! | p | rows | cols |
//! |---|------|------|
//! | 0 | even | even |
//! | 1 | even | odd  |
//! | 2 | odd  | even |
//! | 3 | odd  | odd  |

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::spectral::Raster;

fn check_even(h: usize, w: usize) -> Result<()> {
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "focus slicing needs even height and width, got {h}x{w}"
        )));
    }
    Ok(())
}

/// `[B, C, H, W] -> [B, 4C, H/2, W/2]`.
pub fn focus(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    check_even(h, w)?;
    let y = x
        .reshape((b, c, h / 2, 2, w / 2, 2))?
        .permute((0, 3, 5, 1, 2, 4))?
        .contiguous()?
        .reshape((b, 4 * c, h / 2, w / 2))?;
    Ok(y)
}

/// Inverse of [`focus`].
pub fn unfocus(y: &Tensor) -> Result<Tensor> {
    let (b, c4, h2, w2) = y.dims4()?;
    if c4 % 4 != 0 {
        return Err(Error::Shape(format!(
            "unfocus needs a multiple of 4 channels, got {c4}"
        )));
    }
    let c = c4 / 4;
    let x = y
        .reshape((b, 2, 2, c, h2, w2))?
        .permute((0, 3, 4, 1, 5, 2))?
        .contiguous()?
        .reshape((b, c, h2 * 2, w2 * 2))?;
    Ok(x)
}

/// Raster version of [`focus`], with the same channel layout.
pub fn focus_slice(x: &Raster) -> Result<Raster> {
    check_even(x.height, x.width)?;
    let (c, h2, w2) = (x.channels, x.height / 2, x.width / 2);
    let mut out = Raster::filled(4 * c, h2, w2, 0.0);
    for p in 0..4 {
        let (dy, dx) = (p / 2, p % 2);
        for ch in 0..c {
            let src = x.plane(ch);
            let dst = out.plane_mut(p * c + ch);
            for y in 0..h2 {
                for xx in 0..w2 {
                    dst[y * w2 + xx] = src[(2 * y + dy) * x.width + 2 * xx + dx];
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`focus_slice`].
pub fn unfocus_slice(y: &Raster) -> Result<Raster> {
    if y.channels % 4 != 0 {
        return Err(Error::Shape(format!(
            "unfocus needs a multiple of 4 channels, got {}",
            y.channels
        )));
    }
    let (c, h2, w2) = (y.channels / 4, y.height, y.width);
    let mut out = Raster::filled(c, 2 * h2, 2 * w2, 0.0);
    let w = 2 * w2;
    for p in 0..4 {
        let (dy, dx) = (p / 2, p % 2);
        for ch in 0..c {
            let src = y.plane(p * c + ch);
            let dst = out.plane_mut(ch);
            for yy in 0..h2 {
                for xx in 0..w2 {
                    dst[(2 * yy + dy) * w + 2 * xx + dx] = src[yy * w2 + xx];
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn ramp(c: usize, h: usize, w: usize) -> Raster {
        let data = (0..c * h * w).map(|v| v as f32).collect();
        Raster::new(c, h, w, data).unwrap()
    }

    #[test]
    fn four_by_four_parities() {
        let x = ramp(1, 4, 4);
        let y = focus_slice(&x).unwrap();
        assert_eq!((y.channels, y.height, y.width), (4, 2, 2));
        assert_eq!(y.plane(0), &[0.0, 2.0, 8.0, 10.0]);
        assert_eq!(y.plane(1), &[1.0, 3.0, 9.0, 11.0]);
        assert_eq!(y.plane(2), &[4.0, 6.0, 12.0, 14.0]);
        assert_eq!(y.plane(3), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn odd_sizes_rejected() {
        assert!(focus_slice(&ramp(1, 3, 4)).is_err());
        let t = Tensor::zeros((1, 1, 4, 5), candle_core::DType::F32, &Device::Cpu).unwrap();
        assert!(focus(&t).is_err());
    }

    #[test]
    fn tensor_and_raster_agree() {
        let x = ramp(3, 6, 8);
        let t = Tensor::from_vec(x.data.clone(), (1, 3, 6, 8), &Device::Cpu).unwrap();
        let yt = focus(&t).unwrap();
        let yr = focus_slice(&x).unwrap();
        assert_eq!(yt.flatten_all().unwrap().to_vec1::<f32>().unwrap(), yr.data);
        let back = unfocus(&yt).unwrap();
        assert_eq!(back.flatten_all().unwrap().to_vec1::<f32>().unwrap(), x.data);
        assert_eq!(unfocus_slice(&yr).unwrap(), x);
    }
}
