//! Real orthonormal spherical harmonics on geographic coordinates.
//!
//! Latitude/longitude map to colatitude `θ = (90 − lat)·π/180` and azimuth
//! `λ = lon·π/180`. Features are ordered by degree `l` ascending, then order
//! `m` from `−l` to `l`, giving `(L+1)²` values. The Condon–Shortley phase is
//! not applied.

use std::f64::consts::PI;

use super::GeoCoordinate;

/// Number of basis functions up to and including degree `max_degree`.
pub fn basis_len(max_degree: usize) -> usize {
    (max_degree + 1) * (max_degree + 1)
}

/// Index of `Y_l^m` in the feature vector.
pub fn basis_index(l: usize, m: i64) -> usize {
    (l * l) + (m + l as i64) as usize
}

/// `Y_l^m(θ, λ)` for every `0 ≤ l ≤ max_degree`, `−l ≤ m ≤ l`.
pub fn real_harmonics(theta: f64, lambda: f64, max_degree: usize) -> Vec<f64> {
    let x = theta.cos();
    let s = theta.sin().abs();
    let lmax = max_degree;
    // legendre[l][m] = P_l^m(x) without the (−1)^m phase.
    let mut legendre = vec![vec![0.0; lmax + 1]; lmax + 1];
    let mut pmm = 1.0;
    for m in 0..=lmax {
        if m > 0 {
            pmm *= (2 * m - 1) as f64 * s;
        }
        legendre[m][m] = pmm;
        if m < lmax {
            legendre[m + 1][m] = x * (2 * m + 1) as f64 * pmm;
        }
        for l in (m + 2)..=lmax {
            legendre[l][m] = ((2 * l - 1) as f64 * x * legendre[l - 1][m]
                - (l + m - 1) as f64 * legendre[l - 2][m])
                / (l - m) as f64;
        }
    }
    let mut out = vec![0.0; basis_len(lmax)];
    for l in 0..=lmax {
        for m in 0..=l {
            // (l−m)!/(l+m)! as a running product.
            let mut ratio = 1.0;
            for k in (l - m + 1)..=(l + m) {
                ratio /= k as f64;
            }
            let norm = ((2 * l + 1) as f64 / (4.0 * PI) * ratio).sqrt();
            let p = legendre[l][m];
            if m == 0 {
                out[basis_index(l, 0)] = norm * p;
            } else {
                let mf = m as f64;
                let c = std::f64::consts::SQRT_2 * norm * p;
                out[basis_index(l, m as i64)] = c * (mf * lambda).cos();
                out[basis_index(l, -(m as i64))] = c * (mf * lambda).sin();
            }
        }
    }
    out
}

/// Spherical-harmonic features of a coordinate. Longitude +180 is folded onto
/// −180 so both spellings of the antimeridian give identical features.
pub fn spherical_harmonic_features(coord: GeoCoordinate, max_degree: usize) -> Vec<f64> {
    let lon = if coord.lon() >= 180.0 { coord.lon() - 360.0 } else { coord.lon() };
    let theta = (90.0 - coord.lat()).to_radians();
    let lambda = lon.to_radians();
    real_harmonics(theta, lambda, max_degree)
}
