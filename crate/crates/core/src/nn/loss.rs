use crate::error::{Error, Result};

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-log softmax(logits)[label]` in nats, using max subtraction.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::invalid("logits must be finite"));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    // lse >= logits[label] mathematically; clamp the rounding residue
    Ok((lse - logits[label]).max(0.0))
}

/// Gradient of [`cross_entropy`] with respect to the logits: `softmax - onehot(label)`.
pub fn cross_entropy_grad(logits: &[f64], label: usize) -> Vec<f64> {
    let mut g = softmax(logits);
    g[label] -= 1.0;
    g
}

/// Argmax with ties broken toward the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln10() {
        let l = cross_entropy(&[0.3; 10], 4).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
        assert!((l - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn confident_correct_logits_give_tiny_loss() {
        let mut z = [0.0; 10];
        z[3] = 1000.0;
        assert!(cross_entropy(&z, 3).unwrap() <= 1e-6);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        assert!(matches!(cross_entropy(&[0.0; 10], 10), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.0; 10]), 0);
        let mut z = [0.0; 10];
        z[7] = 2.0;
        assert_eq!(argmax(&z), 7);
        z[2] = 2.0;
        assert_eq!(argmax(&z), 2);
    }
}
