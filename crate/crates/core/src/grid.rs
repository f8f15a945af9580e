//! Area-weighted resampling between token grids.

use ndarray::Array2;

/// Row-stochastic `(dst x src)` weights: each destination cell averages the
/// source cells it overlaps, weighted by overlap length.
fn box_weights(src: usize, dst: usize) -> Array2<f64> {
    let mut w = Array2::zeros((dst, src));
    let step = src as f64 / dst as f64;
    for i in 0..dst {
        let lo = i as f64 * step;
        let hi = lo + step;
        let first = lo.floor() as usize;
        let last = (hi.ceil() as usize).min(src);
        for j in first..last {
            let overlap = (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0);
            w[[i, j]] = overlap / step;
        }
    }
    w
}

/// Resamples `src` to `(h, w)` by box filtering. Integer upscaling replicates
/// cells exactly; integer downscaling takes block means.
pub fn resample_area(src: &Array2<f64>, grid: (usize, usize)) -> Array2<f64> {
    let (sh, sw) = src.dim();
    if (sh, sw) == grid {
        return src.clone();
    }
    let wy = box_weights(sh, grid.0);
    let wx = box_weights(sw, grid.1);
    wy.dot(src).dot(&wx.t())
}

/// Nearest-neighbour resampling (cell centres).
pub fn resample_nearest<T: Copy>(src: &Array2<T>, grid: (usize, usize)) -> Array2<T> {
    let (sh, sw) = src.dim();
    Array2::from_shape_fn(grid, |(y, x)| {
        let sy = ((y as f64 + 0.5) * sh as f64 / grid.0 as f64).floor() as usize;
        let sx = ((x as f64 + 0.5) * sw as f64 / grid.1 as f64).floor() as usize;
        src[[sy.min(sh - 1), sx.min(sw - 1)]]
    })
}
