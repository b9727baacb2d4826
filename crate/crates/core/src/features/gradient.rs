use crate::error::{OmrError, Result};
use crate::raster::Plane;

/// Horizontal and vertical derivatives: central differences inside, one-sided
/// differences on the first and last row/column.
pub(crate) fn central_differences(p: &Plane) -> (Plane, Plane) {
    let (w, h) = (p.width(), p.height());
    let gx = Plane::from_fn(w, h, |x, y| derivative(x, w, |i| p.get(i, y)));
    let gy = Plane::from_fn(w, h, |x, y| derivative(y, h, |i| p.get(x, i)));
    (gx, gy)
}

#[inline]
fn derivative(i: usize, n: usize, f: impl Fn(usize) -> f64) -> f64 {
    if n < 2 {
        0.0
    } else if i == 0 {
        f(1) - f(0)
    } else if i == n - 1 {
        f(n - 1) - f(n - 2)
    } else {
        0.5 * (f(i + 1) - f(i - 1))
    }
}

/// `|∂f/∂x| + |∂f/∂y|` per pixel.
pub fn gradient_magnitude(gray: &Plane) -> Result<Plane> {
    if gray.width() < 2 || gray.height() < 2 {
        return Err(OmrError::ImageTooSmall {
            width: gray.width() as u32,
            height: gray.height() as u32,
            min: 2,
        });
    }
    let (gx, gy) = central_differences(gray);
    let data = gx
        .data()
        .iter()
        .zip(gy.data())
        .map(|(a, b)| a.abs() + b.abs())
        .collect();
    Ok(Plane::from_vec(gray.width(), gray.height(), data))
}
