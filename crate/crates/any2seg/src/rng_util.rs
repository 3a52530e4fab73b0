//! Seeded sampling helpers shared by the teacher synthesizer and the data
//! generator.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Standard normal draw via Box-Muller. Two uniforms per call keeps the
/// stream layout simple and reproducible.
pub(crate) fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Uniformly random unit vector of dimension `d`.
pub(crate) fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}
