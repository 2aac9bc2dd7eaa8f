//! Seeded 2D simplex noise.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GRAD2: [(f64, f64); 12] = [
    (1.0, 1.0),
    (-1.0, 1.0),
    (1.0, -1.0),
    (-1.0, -1.0),
    (1.0, 0.0),
    (-1.0, 0.0),
    (1.0, 0.0),
    (-1.0, 0.0),
    (0.0, 1.0),
    (0.0, -1.0),
    (0.0, 1.0),
    (0.0, -1.0),
];

/// Skew factor `(sqrt(3) - 1) / 2`.
const F2: f64 = 0.366_025_403_784_438_6;
/// Unskew factor `(3 - sqrt(3)) / 6`.
const G2: f64 = 0.211_324_865_405_187_1;

/// Simplex noise over a 256-entry permutation table shuffled by a seed.
#[derive(Debug, Clone)]
pub struct Simplex2 {
    perm: [u8; 512],
}

impl Simplex2 {
    pub fn new(seed: u64) -> Self {
        let mut table: Vec<u8> = (0..=255u8).collect();
        table.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut perm = [0u8; 512];
        for (i, p) in perm.iter_mut().enumerate() {
            *p = table[i & 255];
        }
        Self { perm }
    }

    fn gradient(&self, i: i64, j: i64) -> (f64, f64) {
        let ii = (i & 255) as usize;
        let jj = (j & 255) as usize;
        GRAD2[self.perm[ii + self.perm[jj] as usize] as usize % 12]
    }

    /// Noise value in roughly `[-1, 1]`.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let s = (x + y) * F2;
        let i = (x + s).floor();
        let j = (y + s).floor();
        let t = (i + j) * G2;
        let x0 = x - (i - t);
        let y0 = y - (j - t);
        let (i1, j1) = if x0 > y0 { (1.0, 0.0) } else { (0.0, 1.0) };
        let corners = [
            (x0, y0, 0.0, 0.0),
            (x0 - i1 + G2, y0 - j1 + G2, i1, j1),
            (x0 - 1.0 + 2.0 * G2, y0 - 1.0 + 2.0 * G2, 1.0, 1.0),
        ];
        let (i, j) = (i as i64, j as i64);
        let mut total = 0.0;
        for (dx, dy, oi, oj) in corners {
            let falloff = 0.5 - dx * dx - dy * dy;
            if falloff > 0.0 {
                let (gx, gy) = self.gradient(i + oi as i64, j + oj as i64);
                let f2 = falloff * falloff;
                total += f2 * f2 * (gx * dx + gy * dy);
            }
        }
        70.0 * total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounded_and_continuous() {
        let n = Simplex2::new(3);
        let mut max = 0.0f64;
        for k in 0..10_000 {
            let x = k as f64 * 0.0173;
            let y = k as f64 * 0.0291;
            let v = n.sample(x, y);
            max = max.max(v.abs());
            let dv = (n.sample(x + 1e-4, y) - v).abs();
            assert!(dv < 1e-2);
        }
        assert!(max <= 1.0 + 1e-9 && max > 0.3);
    }

    #[test]
    fn zero_at_lattice_points() {
        let n = Simplex2::new(9);
        assert_eq!(n.sample(0.0, 0.0), 0.0);
    }

    #[test]
    fn seeds_differ() {
        let (a, b) = (Simplex2::new(1), Simplex2::new(2));
        let differs = (0..100).any(|k| {
            let x = k as f64 * 0.37 + 0.1;
            (a.sample(x, 0.5 * x) - b.sample(x, 0.5 * x)).abs() > 1e-6
        });
        assert!(differs);
    }
}
