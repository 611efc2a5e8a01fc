use crate::error::{Error, Result};

/// Numerically stable softmax in `f64`.
pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let e: Vec<f64> = logits.iter().map(|&v| (v as f64 - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `-log softmax(logits)[label]`, max-subtracted.
pub fn softmax_xent(logits: &[f32], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange { label, classes: logits.len() });
    }
    let m = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let lse = logits.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln() + m;
    Ok(lse - logits[label] as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_two_class() {
        assert!((softmax_xent(&[0.0, 0.0], 0).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let l = softmax_xent(&[1000.0, 0.0], 0).unwrap();
        assert!(l.is_finite() && l.abs() < 1e-12);
        let l = softmax_xent(&[1000.0, 0.0], 1).unwrap();
        assert!((l - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn matches_direct_formula() {
        let logits = [0.3f32, -1.7, 2.2, 0.05];
        for label in 0..4 {
            let z: f64 = logits.iter().map(|&v| (v as f64).exp()).sum();
            let direct = -((logits[label] as f64).exp() / z).ln();
            assert!((softmax_xent(&logits, label).unwrap() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn label_out_of_range() {
        assert!(matches!(softmax_xent(&[0.0, 1.0], 2), Err(Error::LabelOutOfRange { .. })));
    }
}
