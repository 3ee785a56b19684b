use super::{ImageGrid, IMAGE_SIDE};
use crate::error::{Error, Result};

/// Source pixels overlapping output cell `i` when `side` pixels are resampled
/// onto `IMAGE_SIDE`, with their overlap lengths.
fn cell_weights(i: usize, side: usize) -> Vec<(usize, f64)> {
    let scale = side as f64 / IMAGE_SIDE as f64;
    let lo = i as f64 * scale;
    let hi = (i + 1) as f64 * scale;
    let first = lo.floor() as usize;
    let last = (hi.ceil() as usize).min(side);
    (first..last)
        .filter_map(|p| {
            let overlap = (hi.min(p as f64 + 1.0) - lo.max(p as f64)).max(0.0);
            (overlap > 0.0).then_some((p, overlap))
        })
        .collect()
}

/// Inverts a square grayscale grid (`p -> 1 - p`) and area-averages it onto 28×28.
///
/// `raw` is row-major with `side * side` values in `[0, 1]`.
pub fn preprocess_background_image(raw: &[f32], side: usize) -> Result<ImageGrid> {
    if side == 0 || raw.len() != side * side {
        return Err(Error::Shape(format!(
            "{} values do not form a square grid of side {side}",
            raw.len()
        )));
    }
    if side < IMAGE_SIDE && IMAGE_SIDE % side != 0 {
        return Err(Error::Shape(format!(
            "side {side} neither divides nor exceeds {IMAGE_SIDE}"
        )));
    }
    let area = (side as f64 / IMAGE_SIDE as f64).powi(2);
    let weights: Vec<Vec<(usize, f64)>> = (0..IMAGE_SIDE).map(|i| cell_weights(i, side)).collect();
    let mut out = Vec::with_capacity(IMAGE_SIDE * IMAGE_SIDE);
    for row_w in &weights {
        for col_w in &weights {
            let mut acc = 0.0f64;
            for &(r, wr) in row_w {
                for &(c, wc) in col_w {
                    acc += wr * wc * (1.0 - raw[r * side + c] as f64);
                }
            }
            out.push(((acc / area) as f32).clamp(0.0, 1.0));
        }
    }
    ImageGrid::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_background_becomes_black() {
        let out = preprocess_background_image(&vec![1.0; 105 * 105], 105).unwrap();
        assert!(out.pixels().iter().all(|&p| p.abs() < 1e-6));
    }

    #[test]
    fn native_size_only_inverts() {
        let out = preprocess_background_image(&vec![0.25; 28 * 28], 28).unwrap();
        assert!(out.pixels().iter().all(|&p| p == 0.75));
    }

    #[test]
    fn dark_block_maps_to_one_cell() {
        let side = 56;
        let mut raw = vec![1.0f32; side * side];
        for (r, c) in [(10, 20), (10, 21), (11, 20), (11, 21)] {
            raw[r * side + c] = 0.0;
        }
        let out = preprocess_background_image(&raw, side).unwrap();
        assert_eq!(out.get(5, 10), 1.0);
        let lit = out.pixels().iter().filter(|&&p| p != 0.0).count();
        assert_eq!(lit, 1);
    }

    #[test]
    fn odd_scale_preserves_mean() {
        let side = 105;
        let raw: Vec<f32> = (0..side * side).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        let out = preprocess_background_image(&raw, side).unwrap();
        let raw_mean: f64 = raw.iter().map(|&p| 1.0 - p as f64).sum::<f64>() / (side * side) as f64;
        let out_mean: f64 = out.pixels().iter().map(|&p| p as f64).sum::<f64>() / 784.0;
        assert!((raw_mean - out_mean).abs() < 1e-5);
    }

    #[test]
    fn non_square_is_rejected() {
        assert!(matches!(
            preprocess_background_image(&vec![0.0; 28 * 27], 28),
            Err(Error::Shape(_))
        ));
    }
}
