//! Small shared pieces for the neural components: sinusoidal feature codes
//! and seeded Gaussian weight initialization.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sinusoidal code for scalar position/step `p` in `width` features:
/// interleaved `sin(p * f_i)`, `cos(p * f_i)` with geometric frequencies
/// `f_i = 10000^(-2i/width)`.
pub fn sinusoidal_code(p: f64, width: usize) -> Result<Vec<f64>> {
    if width == 0 || width % 2 != 0 {
        return Err(Error::Domain(format!(
            "sinusoidal code width must be positive and even, got {width}"
        )));
    }
    let mut out = Vec::with_capacity(width);
    for i in 0..width / 2 {
        let freq = (10_000f64).powf(-2.0 * i as f64 / width as f64);
        out.push((p * freq).sin());
        out.push((p * freq).cos());
    }
    Ok(out)
}

/// `[len, width]` table of sinusoidal codes for positions `0..len`.
pub fn sinusoidal_table(len: usize, width: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(len * width);
    for p in 0..len {
        data.extend(sinusoidal_code(p as f64, width)?);
    }
    Tensor::new(vec![len, width], data)
}

/// Seeded `N(0, std^2)` tensor.
pub fn gaussian_tensor<R: Rng>(rng: &mut R, shape: Vec<usize>, std: f64) -> Result<Tensor> {
    let normal = Normal::new(0.0, std).map_err(|e| Error::Domain(e.to_string()))?;
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape, data)
}

/// Init scale `1/sqrt(fan_in)`, matched to tanh activations.
pub fn fan_in_std(fan_in: usize) -> f64 {
    (1.0 / fan_in.max(1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::stream_rng;

    #[test]
    fn sinusoidal_code_hand_values() {
        let c = sinusoidal_code(0.0, 6).unwrap();
        assert_eq!(c, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let c = sinusoidal_code(1.0, 4).unwrap();
        let f1 = (10_000f64).powf(-0.5);
        assert!((c[0] - 1f64.sin()).abs() < 1e-15);
        assert!((c[1] - 1f64.cos()).abs() < 1e-15);
        assert!((c[2] - f1.sin()).abs() < 1e-15);
        assert!((c[3] - f1.cos()).abs() < 1e-15);
        assert!(sinusoidal_code(1.0, 5).is_err());
        assert!(sinusoidal_code(1.0, 0).is_err());
    }

    #[test]
    fn sinusoidal_rows_are_distinct_and_bounded() {
        let t = sinusoidal_table(12, 8).unwrap();
        assert_eq!(t.shape(), &[12, 8]);
        assert!(t.data().iter().all(|x| x.abs() <= 1.0));
        for i in 0..12 {
            for j in (i + 1)..12 {
                assert_ne!(t.row(i).unwrap(), t.row(j).unwrap());
            }
        }
    }

    #[test]
    fn gaussian_tensor_is_seed_stable() {
        let mut r1 = stream_rng(3, "w", 0);
        let mut r2 = stream_rng(3, "w", 0);
        let a = gaussian_tensor(&mut r1, vec![4, 5], 0.1).unwrap();
        let b = gaussian_tensor(&mut r2, vec![4, 5], 0.1).unwrap();
        assert_eq!(a.data(), b.data());
        let sample_std =
            (a.data().iter().map(|x| x * x).sum::<f64>() / a.len() as f64).sqrt();
        assert!(sample_std > 0.02 && sample_std < 0.3, "std {sample_std}");
    }
}
