use serde::{Deserialize, Serialize};

use crate::error::{OmrError, Result};

/// Planar affine map in homogeneous form. The bottom row is always `[0, 0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    matrix: [[f64; 3]; 3],
}

impl Default for Transform {
    fn default() -> Self {
        Self::identity()
    }
}

impl Transform {
    pub const MIN_ABS_DET: f64 = 1e-9;

    pub fn identity() -> Self {
        Self::from_affine([[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0])
    }

    /// `linear` is the 2x2 part, `translation` the offset applied after it.
    pub fn from_affine(linear: [[f64; 2]; 2], translation: [f64; 2]) -> Self {
        Transform {
            matrix: [
                [linear[0][0], linear[0][1], translation[0]],
                [linear[1][0], linear[1][1], translation[1]],
                [0.0, 0.0, 1.0],
            ],
        }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self::from_affine([[1.0, 0.0], [0.0, 1.0]], [dx, dy])
    }

    /// Rotation by `radians` (counter-clockwise in image coordinates with y down
    /// this appears clockwise) about `center`, followed by a shift.
    pub fn rotation_about(radians: f64, center: (f64, f64), shift: (f64, f64)) -> Self {
        let (s, c) = radians.sin_cos();
        let (cx, cy) = center;
        let tx = cx - c * cx + s * cy + shift.0;
        let ty = cy - s * cx - c * cy + shift.1;
        Self::from_affine([[c, -s], [s, c]], [tx, ty])
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.matrix
    }

    pub fn linear(&self) -> [[f64; 2]; 2] {
        let m = &self.matrix;
        [[m[0][0], m[0][1]], [m[1][0], m[1][1]]]
    }

    pub fn translation_part(&self) -> [f64; 2] {
        [self.matrix[0][2], self.matrix[1][2]]
    }

    pub fn det(&self) -> f64 {
        let m = &self.matrix;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    pub fn is_invertible(&self) -> bool {
        let d = self.det();
        d.is_finite() && d.abs() > Self::MIN_ABS_DET
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.matrix;
        (
            m[0][0] * x + m[0][1] * y + m[0][2],
            m[1][0] * x + m[1][1] * y + m[1][2],
        )
    }

    pub fn inverse(&self) -> Result<Transform> {
        let det = self.det();
        if !self.is_invertible() {
            return Err(OmrError::SingularTransform { det });
        }
        let [[a, b], [c, d]] = self.linear();
        let [tx, ty] = self.translation_part();
        let ia = d / det;
        let ib = -b / det;
        let ic = -c / det;
        let id = a / det;
        Ok(Self::from_affine(
            [[ia, ib], [ic, id]],
            [-(ia * tx + ib * ty), -(ic * tx + id * ty)],
        ))
    }

    /// `self` applied after `first`.
    pub fn compose(&self, first: &Transform) -> Transform {
        let a = self.linear();
        let b = first.linear();
        let mut lin = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                lin[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        let [tx, ty] = first.translation_part();
        let (x, y) = self.apply(tx, ty);
        Self::from_affine(lin, [x, y])
    }

    /// Least-squares affine fit of `dst ≈ T(src)`. `None` when the source
    /// points are (nearly) collinear.
    pub fn fit_affine(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Option<Transform> {
        debug_assert_eq!(src.len(), dst.len());
        let n = src.len();
        if n < 3 {
            return None;
        }
        let nf = n as f64;
        let (mut sx, mut sy, mut dx, mut dy) = (0.0, 0.0, 0.0, 0.0);
        for (p, q) in src.iter().zip(dst) {
            sx += p.0;
            sy += p.1;
            dx += q.0;
            dy += q.1;
        }
        let (sx, sy, dx, dy) = (sx / nf, sy / nf, dx / nf, dy / nf);
        // centred normal equations: [sxx sxy; sxy syy] a = [sxu; syu]
        let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
        let (mut sxu, mut syu, mut sxv, mut syv) = (0.0, 0.0, 0.0, 0.0);
        for (p, q) in src.iter().zip(dst) {
            let (x, y) = (p.0 - sx, p.1 - sy);
            let (u, v) = (q.0 - dx, q.1 - dy);
            sxx += x * x;
            sxy += x * y;
            syy += y * y;
            sxu += x * u;
            syu += y * u;
            sxv += x * v;
            syv += y * v;
        }
        let det = sxx * syy - sxy * sxy;
        let scale = (sxx + syy).max(1e-12);
        if det.abs() <= 1e-9 * scale * scale {
            return None;
        }
        let a = (syy * sxu - sxy * syu) / det;
        let b = (sxx * syu - sxy * sxu) / det;
        let c = (syy * sxv - sxy * syv) / det;
        let d = (sxx * syv - sxy * sxv) / det;
        let t = Self::from_affine([[a, b], [c, d]], [dx - a * sx - b * sy, dy - c * sx - d * sy]);
        t.is_invertible().then_some(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fit_recovers_exact_affine() {
        let t = Transform::from_affine([[1.01, -0.03], [0.02, 0.99]], [4.0, -7.5]);
        let src = [(0.0, 0.0), (100.0, 5.0), (30.0, 80.0), (60.0, 60.0)];
        let dst: Vec<_> = src.iter().map(|&(x, y)| t.apply(x, y)).collect();
        let fit = Transform::fit_affine(&src, &dst).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((fit.matrix()[i][j] - t.matrix()[i][j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn collinear_points_do_not_fit() {
        let src = [(0.0, 0.0), (1.0, 1.0), (2.0, 2.0)];
        assert!(Transform::fit_affine(&src, &src).is_none());
    }

    #[test]
    fn singular_has_no_inverse() {
        let t = Transform::from_affine([[1.0, 2.0], [2.0, 4.0]], [0.0, 0.0]);
        assert!(matches!(t.inverse(), Err(OmrError::SingularTransform { .. })));
    }

    proptest! {
        #[test]
        fn inverse_round_trips_points(
            angle in -0.5f64..0.5, sx in 0.5f64..2.0, shear in -0.3f64..0.3,
            tx in -50.0f64..50.0, ty in -50.0f64..50.0,
            px in -1000.0f64..1000.0, py in -1000.0f64..1000.0,
        ) {
            let r = Transform::rotation_about(angle, (0.0, 0.0), (tx, ty));
            let s = Transform::from_affine([[sx, shear], [0.0, 1.0]], [0.0, 0.0]);
            let t = r.compose(&s);
            let inv = t.inverse().unwrap();
            let (x, y) = t.apply(px, py);
            let (bx, by) = inv.apply(x, y);
            prop_assert!((bx - px).abs() < 1e-6 && (by - py).abs() < 1e-6);
            prop_assert_eq!(inv.matrix()[2], [0.0, 0.0, 1.0]);
        }
    }
}
