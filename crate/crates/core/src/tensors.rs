//! Value types passed between the codec stages. All are single-image,
//! laid out height x width x channels.

use metacodec_autodiff::{Tensor, Var};
use ndarray::{Array2, Array3, Axis, Ix4};

use crate::error::{CodecError, Result};

/// RGB image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub data: Array3<f64>,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.dim().2 != 3 {
            return Err(CodecError::ShapeMismatch {
                expected: vec![data.dim().0, data.dim().1, 3],
                got: data.shape().to_vec(),
            });
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CodecError::Config("image values must lie in [0, 1]".into()));
        }
        Ok(ImageTensor { data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let data = Array3::from_shape_fn((height, width, 3), |(y, x, c)| f(y, x, c).clamp(0.0, 1.0));
        ImageTensor { data }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    /// 1 x H x W x 3 batch tensor.
    pub fn to_batch(&self) -> Tensor {
        self.data.clone().insert_axis(Axis(0)).into_dyn()
    }

    pub fn stack(images: &[ImageTensor]) -> Tensor {
        let views: Vec<_> = images.iter().map(|im| im.data.view()).collect();
        ndarray::stack(Axis(0), &views).expect("images of equal size").into_dyn()
    }

    /// Image `index` of an NHWC batch.
    pub fn from_batch(batch: &Tensor, index: usize) -> Self {
        let b = batch.view().into_dimensionality::<Ix4>().expect("NHWC");
        ImageTensor { data: b.index_axis(Axis(0), index).mapv(|v| v.clamp(0.0, 1.0)) }
    }

    pub fn crop(&self, height: usize, width: usize) -> ImageTensor {
        ImageTensor { data: self.data.slice(ndarray::s![..height, ..width, ..]).to_owned() }
    }
}

/// Which processing stage a latent tensor is at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentStage {
    Raw,
    Masked,
    Dequantized,
}

/// (H/s) x (W/s) x c latent.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    pub data: Array3<f64>,
    pub stage: LatentStage,
}

impl LatentTensor {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn to_batch(&self) -> Tensor {
        self.data.clone().insert_axis(Axis(0)).into_dyn()
    }

    pub fn from_var(v: &Var, index: usize, stage: LatentStage) -> Self {
        let b = v.value().view().into_dimensionality::<Ix4>().expect("NHWC");
        LatentTensor { data: b.index_axis(Axis(0), index).to_owned(), stage }
    }
}

/// Quantized latent: integers in [0, 2^b - 1].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolTensor {
    pub data: Array3<u8>,
    pub bits: u8,
}

impl SymbolTensor {
    pub fn new(data: Array3<u8>, bits: u8) -> Result<Self> {
        let max = max_symbol(bits);
        if let Some(&s) = data.iter().find(|&&s| u32::from(s) > max) {
            return Err(CodecError::SymbolOutOfRange { symbol: s.into(), bits });
        }
        Ok(SymbolTensor { data, bits })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Symbols as floats on the dequantized grid, as a 1 x h x w x c batch.
    pub fn dequantized_batch(&self) -> Tensor {
        let scale = f64::from(max_symbol(self.bits));
        self.data.mapv(|s| f64::from(s) / scale).insert_axis(Axis(0)).into_dyn()
    }
}

pub fn max_symbol(bits: u8) -> u32 {
    (1u32 << bits) - 1
}

/// Importance map and its quantized form, stored as integer levels
/// `round(tau * c)` so that `tau_q = level / c` exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMap {
    pub tau: Array2<f64>,
    pub levels: Array2<u8>,
    pub channels: usize,
}

impl ImportanceMap {
    pub fn from_tau(tau: Array2<f64>, channels: usize) -> Self {
        let levels = tau.mapv(|t| quantize_importance(t, channels));
        ImportanceMap { tau, levels, channels }
    }

    pub fn tau_q(&self) -> Array2<f64> {
        let c = self.channels as f64;
        self.levels.mapv(|l| f64::from(l) / c)
    }
}

/// `round(tau * c)` with tau clamped to [0, 1].
pub fn quantize_importance(tau: f64, channels: usize) -> u8 {
    (tau.clamp(0.0, 1.0) * channels as f64).round() as u8
}

/// Binary channel mask with the prefix property per spatial position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelMask {
    pub data: Array3<u8>,
}

impl ChannelMask {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn to_f64(&self) -> Array3<f64> {
        self.data.mapv(f64::from)
    }
}

/// Original size of an image before alignment padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRecord {
    pub height: usize,
    pub width: usize,
}

/// Replicate-pads right/bottom so that both dims are multiples of `s`.
pub fn pad_image(x: &ImageTensor, s: usize) -> (ImageTensor, CropRecord) {
    let (h, w) = (x.height(), x.width());
    let record = CropRecord { height: h, width: w };
    let (ph, pw) = (h.div_ceil(s) * s, w.div_ceil(s) * s);
    if (ph, pw) == (h, w) {
        return (x.clone(), record);
    }
    let data = Array3::from_shape_fn((ph, pw, 3), |(y, xx, c)| x.data[[y.min(h - 1), xx.min(w - 1), c]]);
    (ImageTensor { data }, record)
}

pub fn crop_image(x: &ImageTensor, record: CropRecord) -> ImageTensor {
    x.crop(record.height, record.width)
}

pub(crate) fn batch4(t: &Tensor) -> ndarray::ArrayView4<'_, f64> {
    t.view().into_dimensionality::<Ix4>().expect("NHWC tensor")
}

pub(crate) fn first_of_batch(t: &Tensor) -> Array3<f64> {
    batch4(t).index_axis(Axis(0), 0).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_examples() {
        let im = ImageTensor::from_fn(60, 60, |y, x, c| ((y + x + c) % 7) as f64 / 7.0);
        let (p, rec) = pad_image(&im, 8);
        assert_eq!((p.height(), p.width()), (64, 64));
        assert_eq!(rec, CropRecord { height: 60, width: 60 });
        assert_eq!(p.data[[63, 10, 1]], im.data[[59, 10, 1]]);
        assert_eq!(crop_image(&p, rec), im);

        let aligned = ImageTensor::from_fn(16, 8, |_, _, _| 0.5);
        let (same, _) = pad_image(&aligned, 8);
        assert_eq!(same, aligned);

        let tiny = ImageTensor::from_fn(1, 1, |_, _, c| c as f64 / 2.0);
        let (p, rec) = pad_image(&tiny, 8);
        assert_eq!((p.height(), p.width()), (8, 8));
        assert!(p.data.index_axis(Axis(2), 2).iter().all(|&v| v == 1.0));
        assert_eq!(crop_image(&p, rec), tiny);
    }

    #[test]
    fn importance_quantization_examples() {
        assert_eq!(quantize_importance(0.37, 8), 3);
        assert_eq!(quantize_importance(1.0, 8), 8);
        assert_eq!(quantize_importance(0.0, 8), 0);
        let map = ImportanceMap::from_tau(Array2::from_elem((1, 1), 0.37), 8);
        assert_eq!(map.tau_q()[[0, 0]], 0.375);
    }

    #[test]
    fn symbol_tensor_rejects_out_of_range() {
        let data = Array3::from_elem((1, 1, 1), 4u8);
        assert!(SymbolTensor::new(data.clone(), 2).is_err());
        assert!(SymbolTensor::new(data, 3).is_ok());
    }

    #[test]
    fn image_validation() {
        assert!(ImageTensor::new(Array3::from_elem((2, 2, 3), 1.5)).is_err());
        assert!(ImageTensor::new(Array3::from_elem((2, 2, 1), 0.5)).is_err());
        assert!(ImageTensor::new(Array3::from_elem((2, 2, 3), 0.5)).is_ok());
    }
}
