use metacodec::ImageTensor;
use ndarray::s;

/// Square `size` x `size` crops of every image on a grid with step `stride`,
/// in image order then raster order. Images smaller than `size` contribute
/// nothing.
pub fn extract_patches(images: &[ImageTensor], size: usize, stride: usize) -> Vec<ImageTensor> {
    let mut out = Vec::new();
    if size == 0 || stride == 0 {
        return out;
    }
    for img in images {
        let (h, w) = (img.height(), img.width());
        if h < size || w < size {
            continue;
        }
        for y in (0..=h - size).step_by(stride) {
            for x in (0..=w - size).step_by(stride) {
                let data = img.data.slice(s![y..y + size, x..x + size, ..]).to_owned();
                out.push(ImageTensor { data });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_crops() {
        let img = ImageTensor::from_fn(10, 7, |y, x, c| (y * 100 + x * 10 + c) as f64 / 1000.0);
        let p = extract_patches(std::slice::from_ref(&img), 4, 3);
        assert_eq!(p.len(), 3 * 2);
        assert_eq!(p[1].data[[0, 0, 0]], img.data[[0, 3, 0]]);
        assert_eq!(p[2].data[[1, 1, 2]], img.data[[4, 1, 2]]);
        assert!(extract_patches(&[img], 11, 1).is_empty());
    }
}
