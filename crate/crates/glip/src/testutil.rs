//! Small helpers shared by unit tests, the acceptance suite and examples.

use rand::Rng;

use crate::tensor::Tensor4;

/// Uniform random tensor in [-1, 1).
pub fn rng_tensor(rng: &mut impl Rng, dims: (usize, usize, usize, usize)) -> Tensor4 {
    let (n, c, h, w) = dims;
    let data: Vec<f32> = (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor4::new(dims, data).expect("finite random data")
}

/// Uniform random tensor in [0, 1).
pub fn rng_image(rng: &mut impl Rng, dims: (usize, usize, usize, usize)) -> Tensor4 {
    let (n, c, h, w) = dims;
    let data: Vec<f32> = (0..n * c * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
    Tensor4::new(dims, data).expect("finite random data")
}

/// Random image on the 1/256 dyadic grid (8-bit style values); pyramid
/// arithmetic on these is exact in f32.
pub fn rng_dyadic_image(rng: &mut impl Rng, dims: (usize, usize, usize, usize)) -> Tensor4 {
    let (n, c, h, w) = dims;
    let data: Vec<f32> = (0..n * c * h * w)
        .map(|_| rng.random_range(0..=256u32) as f32 / 256.0)
        .collect();
    Tensor4::new(dims, data).expect("finite random data")
}

/// f64-accumulated dot product of two equal-length slices.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Symmetric relative error |a - n| / max(1e-6, |a| + |n|).
pub fn rel_err(a: f32, n: f32) -> f32 {
    (a - n).abs() / (1e-6f32).max(a.abs() + n.abs())
}
