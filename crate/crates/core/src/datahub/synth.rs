use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Domain};
use crate::error::{ArosError, Result};
use crate::seed::rng_from;
use crate::tensor::Tensor;

fn jitter(noise: f64) -> Result<Normal<f64>> {
    if !(noise >= 0.0) {
        return Err(ArosError::contract(format!("noise must be >= 0, got {noise}")));
    }
    Ok(Normal::new(0.0, noise).expect("finite stddev"))
}

/// Two interleaved half circles: class 0 on `(cos t, sin t)`, class 1 on
/// `(1 − cos t, ½ − sin t)`, `t ~ U[0, π]`, plus isotropic Gaussian jitter.
/// Samples alternate between the classes.
pub fn gen_two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(ArosError::contract("two moons needs n >= 2"));
    }
    let normal = jitter(noise)?;
    let mut rng = rng_from(seed);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let t = rng.gen_range(0.0..=PI);
        let class = i % 2;
        let (x, y) = if class == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        data.push(x + normal.sample(&mut rng));
        data.push(y + normal.sample(&mut rng));
        labels.push(class);
    }
    Dataset::new(Tensor::matrix(n, 2, data)?, labels, 2, Domain::Synthetic2d)
}

/// Points on a circle of `radius` around the origin, uniform in angle, with
/// Gaussian jitter. Single class.
pub fn gen_ring(n: usize, radius: f64, noise: f64, seed: u64) -> Result<Dataset> {
    if !(radius > 0.0) {
        return Err(ArosError::contract(format!("ring radius must be > 0, got {radius}")));
    }
    let normal = jitter(noise)?;
    let mut rng = rng_from(seed);
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let a = rng.gen_range(0.0..2.0 * PI);
        data.push(radius * a.cos() + normal.sample(&mut rng));
        data.push(radius * a.sin() + normal.sample(&mut rng));
    }
    Dataset::new(Tensor::matrix(n, 2, data)?, vec![0; n], 1, Domain::Synthetic2d)
}

/// Isotropic Gaussian blob; a third distribution for auxiliary outliers.
pub fn gen_blob(n: usize, center: [f64; 2], std: f64, seed: u64) -> Result<Dataset> {
    let normal = jitter(std)?;
    let mut rng = rng_from(seed);
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        data.push(center[0] + normal.sample(&mut rng));
        data.push(center[1] + normal.sample(&mut rng));
    }
    Dataset::new(Tensor::matrix(n, 2, data)?, vec![0; n], 1, Domain::Synthetic2d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_moons_lie_on_arcs() {
        let ds = gen_two_moons(4, 0.0, 3).unwrap();
        for (i, &y) in ds.labels.iter().enumerate() {
            let p = ds.inputs.row(i);
            let (cx, cy) = if y == 0 { (0.0, 0.0) } else { (1.0, 0.5) };
            let r = ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt();
            assert!((r - 1.0).abs() < 1e-12);
            if y == 0 {
                assert!(p[1] >= 0.0);
            } else {
                assert!(p[1] <= 0.5);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(gen_two_moons(50, 0.1, 9).unwrap(), gen_two_moons(50, 0.1, 9).unwrap());
        assert_ne!(gen_two_moons(50, 0.1, 9).unwrap(), gen_two_moons(50, 0.1, 10).unwrap());
    }

    #[test]
    fn class_means_match_arc_centroids() {
        // Monte-Carlo oracle: the centroid of a unit half circle sits 2/π from its centre.
        let ds = gen_two_moons(1000, 0.1, 1).unwrap();
        let c = 2.0 / PI;
        let want = [[0.0, c], [1.0, 0.5 - c]];
        for class in 0..2 {
            let idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
            let m = ds.inputs.gather_rows(&idx).column_means().unwrap();
            assert!((m[0] - want[class][0]).abs() < 0.05, "{m:?}");
            assert!((m[1] - want[class][1]).abs() < 0.05, "{m:?}");
        }
    }

    #[test]
    fn ring_radius_and_octants() {
        let ds = gen_ring(200, 5.0, 0.0, 4).unwrap();
        let mut octants = [0usize; 8];
        for i in 0..ds.len() {
            let p = ds.inputs.row(i);
            assert!(((p[0] * p[0] + p[1] * p[1]).sqrt() - 5.0).abs() < 1e-12);
            let a = p[1].atan2(p[0]).rem_euclid(2.0 * PI);
            octants[((a / (PI / 4.0)) as usize).min(7)] += 1;
        }
        assert!(octants.iter().all(|&c| c > 0), "{octants:?}");
        assert!(gen_ring(3, 0.0, 0.1, 0).is_err());
    }

    #[test]
    fn ring_does_not_touch_moons() {
        let moons = gen_two_moons(500, 0.0, 2).unwrap();
        let ring = gen_ring(500, 5.0, 0.0, 2).unwrap();
        let max_moon = (0..moons.len())
            .map(|i| moons.inputs.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        let min_ring = (0..ring.len())
            .map(|i| ring.inputs.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(f64::INFINITY, f64::min);
        assert!(max_moon < min_ring);
    }
}
