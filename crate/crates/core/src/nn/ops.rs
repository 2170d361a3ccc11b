use super::NnError;

/// Returns `x / |x|` and `|x|`. A zero vector maps to itself with norm 0.
pub fn l2_normalize(x: &[f64]) -> (Vec<f64>, f64) {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return (x.to_vec(), 0.0);
    }
    (x.iter().map(|v| v / norm).collect(), norm)
}

/// Input gradient of [`l2_normalize`] given its output `y` and norm.
pub fn l2_normalize_backward(y: &[f64], norm: f64, grad_y: &[f64]) -> Vec<f64> {
    if norm == 0.0 {
        return grad_y.to_vec();
    }
    let dot: f64 = y.iter().zip(grad_y).map(|(a, b)| a * b).sum();
    y.iter().zip(grad_y).map(|(yi, gi)| (gi - yi * dot) / norm).collect()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> Result<f64, NnError> {
    if a.len() != b.len() {
        return Err(NnError::Shape(format!("dimension mismatch: {} vs {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}
