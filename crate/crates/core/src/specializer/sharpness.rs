use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Mean positive loss increase over `k` Gaussian perturbations
/// `delta ~ N(0, sigma^2 I)` of `z`.
pub fn try_sharpness<E, R: Rng + ?Sized>(
    z: &[f64],
    mut loss: impl FnMut(&[f64]) -> Result<f64, E>,
    k: usize,
    sigma: f64,
    rng: &mut R,
) -> Result<f64, E> {
    assert!(k >= 1, "need at least one perturbation");
    assert!(
        sigma > 0.0 && sigma.is_finite(),
        "sigma must be positive, got {sigma}"
    );
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let base = loss(z)?;
    let mut total = 0.0;
    let mut probe = vec![0.0; z.len()];
    for _ in 0..k {
        for (p, &zi) in probe.iter_mut().zip(z) {
            *p = zi + normal.sample(rng);
        }
        total += (loss(&probe)? - base).max(0.0);
    }
    Ok(total / k as f64)
}

pub fn sharpness<R: Rng + ?Sized>(
    z: &[f64],
    mut loss: impl FnMut(&[f64]) -> f64,
    k: usize,
    sigma: f64,
    rng: &mut R,
) -> f64 {
    try_sharpness::<std::convert::Infallible, R>(z, |x| Ok(loss(x)), k, sigma, rng)
        .unwrap_or_else(|never| match never {})
}
