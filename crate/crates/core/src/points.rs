//! Flat storage for sets of points in `[0,1]^d`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points of a fixed dimension stored contiguously, point-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    dim: usize,
    coords: Vec<f64>,
}

impl PointSet {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "point dimension must be positive");
        Self {
            dim,
            coords: Vec::new(),
        }
    }

    pub fn with_capacity(dim: usize, n: usize) -> Self {
        assert!(dim > 0, "point dimension must be positive");
        Self {
            dim,
            coords: Vec::with_capacity(dim * n),
        }
    }

    pub fn from_flat(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim == 0 || !coords.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: coords.len(),
            });
        }
        Ok(Self { dim, coords })
    }

    /// One-dimensional point set from scalar coordinates.
    pub fn from_scalars(xs: &[f64]) -> Self {
        Self {
            dim: 1,
            coords: xs.to_vec(),
        }
    }

    pub fn push(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.dim, "point dimension mismatch");
        self.coords.extend_from_slice(p);
    }

    /// Appends all points of `other`, which must share the dimension.
    pub fn extend(&mut self, other: &PointSet) {
        assert_eq!(other.dim, self.dim, "point dimension mismatch");
        self.coords.extend_from_slice(&other.coords);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.coords.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.coords
    }

    /// Uniform grid with `n` points per axis including both endpoints,
    /// first coordinate varying fastest.
    pub fn uniform_grid(dim: usize, n: usize) -> Self {
        assert!(n >= 2, "grid needs at least two points per axis");
        let h = 1.0 / (n - 1) as f64;
        let mut set = Self::with_capacity(dim, n.pow(dim as u32));
        let mut idx = vec![0usize; dim];
        let mut p = vec![0.0; dim];
        loop {
            for (c, &i) in p.iter_mut().zip(&idx) {
                *c = i as f64 * h;
            }
            set.push(&p);
            let mut axis = 0;
            loop {
                if axis == dim {
                    return set;
                }
                idx[axis] += 1;
                if idx[axis] < n {
                    break;
                }
                idx[axis] = 0;
                axis += 1;
            }
        }
    }
}
