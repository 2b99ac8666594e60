use crate::error::{Error, Result};
use crate::scalar::Real;

/// Mean of squared differences over all elements.
pub fn mse<T: Real>(pred: &[T], target: &[T]) -> Result<T> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "mse: {} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Ok(T::zero());
    }
    let s: T = pred.iter().zip(target).map(|(&p, &t)| (p - t) * (p - t)).sum();
    Ok(s / T::lit(pred.len() as f64))
}

pub fn softmax<T: Real>(scores: &[T]) -> Vec<T> {
    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = scores.iter().map(|&s| (s - max).exp()).collect();
    let z: T = e.iter().copied().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// `-log softmax(scores)[label]`, computed with the max shifted out.
pub fn cross_entropy<T: Real>(scores: &[T], label: usize) -> Result<T> {
    if label >= scores.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: scores.len(),
        });
    }
    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let z: T = scores.iter().map(|&s| (s - max).exp()).sum();
    Ok(z.ln() - (scores[label] - max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 2.5);
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        for k in 1..6 {
            let v = cross_entropy(&vec![0.3f64; k], 0).unwrap();
            assert!((v - (k as f64).ln()).abs() < 1e-12);
        }
        // huge scores stay finite thanks to the shift
        let v = cross_entropy(&[1000.0f64, 0.0], 0).unwrap();
        assert!(v.is_finite() && v < 1e-12);
        assert!(matches!(
            cross_entropy(&[0.0f64; 3], 3),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }
}
