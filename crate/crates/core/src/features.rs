//! Input feature maps `δ` applied before the first network layer.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureMap {
    /// Pass the `dim` spatial coordinates through unchanged.
    Identity { dim: usize },
    /// `x ↦ [sin(2ⁱπx), cos(2ⁱπx)]`, a point on the unit circle.
    Fourier1D { i: u32 },
    /// `(x, y) ↦ [x, y, sin ωx, cos ωx, sin ωy, cos ωy]` with `ω = 2ⁱπ`.
    Fourier2DPlusIdentity { i: u32 },
}

/// Analytic derivatives of a feature map at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureJacobian {
    pub rows: usize,
    pub cols: usize,
    /// `∂δ_r/∂x_c`, row-major.
    pub jacobian: Vec<f64>,
    /// `∂²δ_r/∂y²`, second derivative in the last coordinate.
    pub second_last: Vec<f64>,
}

impl FeatureJacobian {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.jacobian[r * self.cols + c]
    }
}

impl FeatureMap {
    /// Spatial dimension consumed.
    pub fn input_dim(&self) -> usize {
        match *self {
            FeatureMap::Identity { dim } => dim,
            FeatureMap::Fourier1D { .. } => 1,
            FeatureMap::Fourier2DPlusIdentity { .. } => 2,
        }
    }

    /// Width of the mapped vector fed to the network.
    pub fn output_dim(&self) -> usize {
        match *self {
            FeatureMap::Identity { dim } => dim,
            FeatureMap::Fourier1D { .. } => 2,
            FeatureMap::Fourier2DPlusIdentity { .. } => 6,
        }
    }

    /// Angular frequency `2ⁱπ`, or `None` for the identity map.
    pub fn angular_frequency(&self) -> Option<f64> {
        match *self {
            FeatureMap::Identity { .. } => None,
            FeatureMap::Fourier1D { i } | FeatureMap::Fourier2DPlusIdentity { i } => Some(2f64.powi(i as i32) * PI),
        }
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn map_point(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        let mut out = vec![0.0; self.output_dim()];
        self.map_into(x, &mut out);
        Ok(out)
    }

    /// Unchecked variant writing into `out` (length `output_dim`).
    pub(crate) fn map_into(&self, x: &[f64], out: &mut [f64]) {
        match *self {
            FeatureMap::Identity { .. } => out.copy_from_slice(x),
            FeatureMap::Fourier1D { .. } => {
                let w = self.angular_frequency().unwrap();
                let (s, c) = (w * x[0]).sin_cos();
                out[0] = s;
                out[1] = c;
            }
            FeatureMap::Fourier2DPlusIdentity { .. } => {
                let w = self.angular_frequency().unwrap();
                let (sx, cx) = (w * x[0]).sin_cos();
                let (sy, cy) = (w * x[1]).sin_cos();
                out.copy_from_slice(&[x[0], x[1], sx, cx, sy, cy]);
            }
        }
    }

    pub fn map_jacobian(&self, x: &[f64]) -> Result<FeatureJacobian> {
        self.check(x)?;
        let rows = self.output_dim();
        let cols = self.input_dim();
        let mut jac = FeatureJacobian {
            rows,
            cols,
            jacobian: vec![0.0; rows * cols],
            second_last: vec![0.0; rows],
        };
        self.jacobian_into(x, &mut jac.jacobian, &mut jac.second_last);
        Ok(jac)
    }

    /// Unchecked variant; `jac` is row-major `output_dim × input_dim`.
    pub(crate) fn jacobian_into(&self, x: &[f64], jac: &mut [f64], second_last: &mut [f64]) {
        jac.fill(0.0);
        second_last.fill(0.0);
        match *self {
            FeatureMap::Identity { dim } => {
                for k in 0..dim {
                    jac[k * dim + k] = 1.0;
                }
            }
            FeatureMap::Fourier1D { .. } => {
                let w = self.angular_frequency().unwrap();
                let (s, c) = (w * x[0]).sin_cos();
                jac[0] = w * c;
                jac[1] = -w * s;
                second_last[0] = -w * w * s;
                second_last[1] = -w * w * c;
            }
            FeatureMap::Fourier2DPlusIdentity { .. } => {
                let w = self.angular_frequency().unwrap();
                let (sx, cx) = (w * x[0]).sin_cos();
                let (sy, cy) = (w * x[1]).sin_cos();
                jac[0] = 1.0; // ∂x/∂x
                jac[3] = 1.0; // ∂y/∂y
                jac[4] = w * cx;
                jac[6] = -w * sx;
                jac[9] = w * cy;
                jac[11] = -w * sy;
                second_last[4] = -w * w * sy;
                second_last[5] = -w * w * cy;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn fourier1d_examples() {
        assert_close(
            &FeatureMap::Fourier1D { i: 1 }.map_point(&[0.25]).unwrap(),
            &[1.0, 0.0],
            1e-15,
        );
        assert_close(
            &FeatureMap::Fourier1D { i: 2 }.map_point(&[0.5]).unwrap(),
            &[0.0, 1.0],
            1e-15,
        );
    }

    #[test]
    fn fourier2d_example() {
        let v = FeatureMap::Fourier2DPlusIdentity { i: 1 }
            .map_point(&[0.5, 0.25])
            .unwrap();
        assert_close(&v, &[0.5, 0.25, 0.0, -1.0, 1.0, 0.0], 1e-15);
    }

    #[test]
    fn fourier1d_jacobian_at_origin() {
        let j = FeatureMap::Fourier1D { i: 1 }.map_jacobian(&[0.0]).unwrap();
        assert_close(&j.jacobian, &[2.0 * PI, 0.0], 1e-15);
    }

    #[test]
    fn identity_jacobian() {
        let j = FeatureMap::Identity { dim: 2 }.map_jacobian(&[0.3, 0.9]).unwrap();
        assert_eq!(j.jacobian, vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(j.second_last, vec![0.0, 0.0]);
    }

    #[test]
    fn fourier2d_second_derivative_in_y() {
        let fmap = FeatureMap::Fourier2DPlusIdentity { i: 2 };
        let w = 4.0 * PI;
        let y = 0.37;
        let j = fmap.map_jacobian(&[0.1, y]).unwrap();
        let expect = [0.0, 0.0, 0.0, 0.0, -w * w * (w * y).sin(), -w * w * (w * y).cos()];
        assert_close(&j.second_last, &expect, 1e-12);
    }

    #[test]
    fn fourier2d_jacobian_matches_differences() {
        let fmap = FeatureMap::Fourier2DPlusIdentity { i: 2 };
        let h = 1e-6;
        // deterministic pseudo-random points
        let mut s = 0.123_f64;
        for _ in 0..20 {
            s = (s * 9301.0 + 0.49297).fract();
            let x = s;
            s = (s * 9301.0 + 0.49297).fract();
            let y = s;
            let j = fmap.map_jacobian(&[x, y]).unwrap();
            for c in 0..2 {
                let mut p = [x, y];
                let mut m = [x, y];
                p[c] += h;
                m[c] -= h;
                let fp = fmap.map_point(&p).unwrap();
                let fm = fmap.map_point(&m).unwrap();
                for r in 0..6 {
                    let fd = (fp[r] - fm[r]) / (2.0 * h);
                    assert!((fd - j.get(r, c)).abs() < 1e-6, "r={r} c={c}");
                }
            }
        }
    }

    #[test]
    fn wrong_dimension_is_rejected() {
        assert!(matches!(
            FeatureMap::Fourier1D { i: 0 }.map_point(&[0.1, 0.2]),
            Err(Error::DimensionMismatch { expected: 1, got: 2 })
        ));
        assert!(FeatureMap::Fourier2DPlusIdentity { i: 0 }.map_jacobian(&[0.1]).is_err());
    }

    proptest! {
        #[test]
        fn fourier1d_lies_on_unit_circle(x in -3.0f64..3.0, i in 0u32..6) {
            let v = FeatureMap::Fourier1D { i }.map_point(&[x]).unwrap();
            prop_assert!((v[0] * v[0] + v[1] * v[1] - 1.0).abs() < 1e-12);
        }

        #[test]
        fn fourier1d_is_periodic(x in 0.0f64..1.0, i in 0u32..6) {
            let fmap = FeatureMap::Fourier1D { i };
            let period = 2f64.powi(1 - i as i32);
            let a = fmap.map_point(&[x]).unwrap();
            let b = fmap.map_point(&[x + period]).unwrap();
            prop_assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
        }

        #[test]
        fn fourier1d_jacobian_matches_differences(x in 0.0f64..1.0, i in 0u32..5) {
            let fmap = FeatureMap::Fourier1D { i };
            let h = 1e-7;
            let j = fmap.map_jacobian(&[x]).unwrap();
            let fp = fmap.map_point(&[x + h]).unwrap();
            let fm = fmap.map_point(&[x - h]).unwrap();
            let w = fmap.angular_frequency().unwrap();
            for r in 0..2 {
                let fd = (fp[r] - fm[r]) / (2.0 * h);
                prop_assert!((fd - j.get(r, 0)).abs() < 1e-6 * w.max(1.0));
            }
        }
    }
}
