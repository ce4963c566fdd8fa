//! Relief prediction with a trained network.

use crate::error::{Error, Result};
use crate::grid::{denormalize, Grid, HeightMap};
use crate::nn::{Model, TrainingStats};
use crate::pipeline::train::stack;

/// Mirror index into `0..n` without repeating the edge sample
/// (`-1 -> 1`, `n -> n-2`); works for offsets larger than `n`.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Pads bottom and right by reflection up to the next multiple of `m`.
pub fn reflect_pad(g: &Grid, m: usize) -> Result<Grid> {
    let w = g.width().div_ceil(m) * m;
    let h = g.height().div_ceil(m) * m;
    Grid::from_fn(w, h, g.spacing(), |i, j| {
        g.get(reflect_index(i as isize, g.height()), reflect_index(j as isize, g.width()))
    })
}

/// Eval-mode prediction for same-shaped images, returned in relief units.
/// Sizes that are not a multiple of the model's pooling factor are
/// reflect-padded and cropped back.
pub fn predict_batch(model: &Model<f32>, stats: &TrainingStats, images: &[&Grid]) -> Result<Vec<HeightMap>> {
    let first = images.first().ok_or_else(|| Error::invalid("no images to predict"))?;
    let (w, h) = (first.width(), first.height());
    let m = model.spec().size_multiple();
    let padded: Vec<Grid> = images
        .iter()
        .map(|g| {
            if g.width() != w || g.height() != h {
                return Err(Error::dims(format!("{w}x{h}"), format!("{}x{}", g.width(), g.height())));
            }
            reflect_pad(g, m)
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&Grid> = padded.iter().collect();
    let x = stack(&refs, &stats.intensity, stats.mode)?;
    let y = model.infer(&x)?;
    let [_, _, ph, pw] = y.shape();
    (0..images.len())
        .map(|b| {
            let vals: Vec<f64> = y.item(b).iter().map(|&v| v as f64).collect();
            let full = Grid::new(pw, ph, first.spacing(), vals)?;
            let cropped = if (pw, ph) == (w, h) { full } else { full.crop(0, 0, w, h)? };
            Ok(HeightMap::new(denormalize(&cropped, &stats.relief, stats.mode)))
        })
        .collect()
}

pub fn predict(model: &Model<f32>, stats: &TrainingStats, image: &Grid) -> Result<HeightMap> {
    Ok(predict_batch(model, stats, &[image])?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
        assert_eq!(reflect_index(5, 1), 0);
    }

    #[test]
    fn pad_keeps_original_block() {
        let g = Grid::from_fn(5, 3, 1.0, |i, j| (10 * i + j) as f64).unwrap();
        let p = reflect_pad(&g, 4).unwrap();
        assert_eq!((p.width(), p.height()), (8, 4));
        assert_eq!(p.crop(0, 0, 5, 3).unwrap(), g);
        assert_eq!(p.get(0, 5), g.get(0, 3));
        assert_eq!(p.get(3, 0), g.get(1, 0));
    }
}
