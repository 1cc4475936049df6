//! Equal-area iso-latitude pixelization (ring layout).
//!
//! The sphere is cut into `4 n_side - 1` iso-latitude rings holding
//! `12 n_side²` pixels of identical solid angle `4π / n_pix`:
//!
//! * polar caps, rings `i = 1 .. n_side-1` counted from the pole, with
//!   `z = cos θ = 1 - i²/(3 n_side²)` and `4i` pixels,
//! * an equatorial belt, rings `i = n_side ..= 3 n_side`, with
//!   `z = 4/3 - 2i/(3 n_side)` and `4 n_side` pixels,
//! * a southern cap mirroring the northern one.
//!
//! Pixels are indexed ring by ring from the north pole, in increasing
//! longitude within each ring. The natural band limit of the grid is
//! `l_max = 3 n_side - 1`: signals band-limited there are critically
//! sampled, so the plain quadrature of [`analyze`](super::analyze) is
//! accurate only up to roughly `2 n_side` and improves with refinement
//! steps (see the transform docs).

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// One iso-latitude ring of pixel centers.
#[derive(Debug, Clone)]
pub struct Ring {
    /// Cosine of the colatitude of every pixel center in the ring.
    pub z: f64,
    /// Sine of the colatitude (non-negative).
    pub sin_theta: f64,
    /// Longitude of the first pixel.
    pub phi0: f64,
    /// Number of pixels.
    pub count: usize,
    /// Index of the first pixel in the flat pixel ordering.
    pub offset: usize,
}

impl Ring {
    /// Longitude of pixel `j` of the ring, wrapped into `[0, 2π)`.
    pub fn phi(&self, j: usize) -> f64 {
        let step = 2.0 * PI / self.count as f64;
        (self.phi0 + j as f64 * step).rem_euclid(2.0 * PI)
    }
}

/// Ring-layout pixelization of the sphere for a given `n_side`.
#[derive(Debug, Clone)]
pub struct SphereGrid {
    n_side: usize,
    rings: Vec<Ring>,
}

impl SphereGrid {
    /// Builds the grid. `n_side` must be a power of two in `1..=1024`.
    pub fn new(n_side: usize) -> Result<Self> {
        if n_side == 0 || n_side > 1024 || !n_side.is_power_of_two() {
            return Err(Error::invalid(format!(
                "n_side must be a power of two in 1..=1024, got {n_side}"
            )));
        }
        let n = n_side as f64;
        let n_rings = 4 * n_side - 1;
        let mut rings = Vec::with_capacity(n_rings);
        let mut offset = 0;
        for r in 1..=n_rings {
            let (z, count, phi0) = if r < n_side {
                // north polar cap
                let i = r as f64;
                (1.0 - i * i / (3.0 * n * n), 4 * r, PI / (4.0 * i))
            } else if r <= 3 * n_side {
                // equatorial belt; rings shift by half a pixel width in
                // alternation
                let i = r as f64;
                let s = ((r - n_side + 1) % 2) as f64;
                let step = PI / (2.0 * n);
                (4.0 / 3.0 - 2.0 * i / (3.0 * n), 4 * n_side, step * (1.0 - s / 2.0))
            } else {
                // south polar cap, mirror of the northern ring 4 n_side - r
                let i_mirror = 4 * n_side - r;
                let i = i_mirror as f64;
                (
                    -(1.0 - i * i / (3.0 * n * n)),
                    4 * i_mirror,
                    PI / (4.0 * i),
                )
            };
            rings.push(Ring {
                z,
                sin_theta: (1.0 - z * z).max(0.0).sqrt(),
                phi0,
                count,
                offset,
            });
            offset += count;
        }
        debug_assert_eq!(offset, 12 * n_side * n_side);
        Ok(SphereGrid { n_side, rings })
    }

    #[inline]
    pub fn n_side(&self) -> usize {
        self.n_side
    }

    #[inline]
    pub fn n_pix(&self) -> usize {
        12 * self.n_side * self.n_side
    }

    /// Natural band limit `3 n_side - 1` of the grid.
    #[inline]
    pub fn l_max(&self) -> usize {
        3 * self.n_side - 1
    }

    pub fn rings(&self) -> &[Ring] {
        &self.rings
    }

    /// Solid angle of every pixel (the layout is equal-area).
    pub fn pixel_area(&self) -> f64 {
        4.0 * PI / self.n_pix() as f64
    }

    /// Colatitude/longitude `(θ, φ)` of a pixel center.
    pub fn pixel_center(&self, p: usize) -> (f64, f64) {
        debug_assert!(p < self.n_pix());
        let r = match self
            .rings
            .binary_search_by(|ring| ring.offset.cmp(&p))
        {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        let ring = &self.rings[r];
        (ring.z.acos(), ring.phi(p - ring.offset))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn smallest_grid_geometry() {
        let grid = SphereGrid::new(1).unwrap();
        assert_eq!(grid.n_pix(), 12);
        assert_eq!(grid.l_max(), 2);
        assert_eq!(grid.rings().len(), 3);
        // first ring: z = 1 - 1/3, four pixels
        assert_relative_eq!(grid.rings()[0].z, 2.0 / 3.0);
        assert_eq!(grid.rings()[0].count, 4);
        // middle ring sits on the equator
        assert_relative_eq!(grid.rings()[1].z, 0.0);
    }

    #[test]
    fn ring_structure_is_symmetric_and_complete() {
        for n_side in [1usize, 2, 4, 16] {
            let grid = SphereGrid::new(n_side).unwrap();
            let rings = grid.rings();
            assert_eq!(rings.len(), 4 * n_side - 1);
            let total: usize = rings.iter().map(|r| r.count).sum();
            assert_eq!(total, grid.n_pix());
            // north/south mirror symmetry of z and counts
            for i in 0..rings.len() / 2 {
                let j = rings.len() - 1 - i;
                assert_relative_eq!(rings[i].z, -rings[j].z, epsilon = 1e-15);
                assert_eq!(rings[i].count, rings[j].count);
            }
            // z strictly decreasing from north to south
            for w in rings.windows(2) {
                assert!(w[0].z > w[1].z);
            }
        }
    }

    #[test]
    fn equatorial_ring_has_zero_z_and_belt_has_middle_offset() {
        let grid = SphereGrid::new(8).unwrap();
        let mid = &grid.rings()[2 * 8 - 1];
        assert_relative_eq!(mid.z, 0.0, epsilon = 1e-15);
        assert_eq!(mid.count, 4 * 8);
    }

    #[test]
    fn pixel_centers_match_ring_table() {
        let grid = SphereGrid::new(4).unwrap();
        let mut p = 0;
        for ring in grid.rings() {
            for j in 0..ring.count {
                let (theta, phi) = grid.pixel_center(p);
                assert_relative_eq!(theta.cos(), ring.z, epsilon = 1e-14);
                assert_relative_eq!(phi, ring.phi(j), epsilon = 1e-14);
                p += 1;
            }
        }
        assert_eq!(p, grid.n_pix());
    }

    #[test]
    fn rejects_bad_n_side() {
        assert!(SphereGrid::new(0).is_err());
        assert!(SphereGrid::new(3).is_err());
        assert!(SphereGrid::new(12).is_err());
        assert!(SphereGrid::new(2048).is_err());
    }
}
