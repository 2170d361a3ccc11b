//! Scalar losses and their derivatives.

use crate::geometry::BoxParam;

use super::NnError;

/// Probability clamp used by [`bce_loss`].
pub const BCE_EPS: f64 = 1e-7;

fn finite(x: f64, what: &str) -> Result<f64, NnError> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(NnError::InvalidArgument(format!("{what} must be finite, got {x}")))
    }
}

/// Piecewise smooth-L1: `0.5 x^2` inside the unit interval, `|x| - 0.5` outside.
pub fn smooth_l1(x: f64) -> Result<f64, NnError> {
    let x = finite(x, "smooth_l1 input")?;
    Ok(if x.abs() < 1.0 { 0.5 * x * x } else { x.abs() - 0.5 })
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Sum of smooth-L1 over the four box deltas.
pub fn bbox_loss(t: &BoxParam, t_hat: &BoxParam) -> Result<f64, NnError> {
    let mut total = 0.0;
    for (a, b) in t.as_array().iter().zip(t_hat.as_array()) {
        total += smooth_l1(finite(*a, "box delta")? - finite(b, "box delta")?)?;
    }
    Ok(total)
}

/// Gradient of [`bbox_loss`] with respect to the predicted deltas `t`.
pub fn bbox_loss_grad(t: &BoxParam, t_hat: &BoxParam) -> [f64; 4] {
    let a = t.as_array();
    let b = t_hat.as_array();
    [0, 1, 2, 3].map(|i| smooth_l1_grad(a[i] - b[i]))
}

fn check_label(y: f64) -> Result<f64, NnError> {
    if y == 0.0 || y == 1.0 {
        Ok(y)
    } else {
        Err(NnError::InvalidArgument(format!("label must be 0 or 1, got {y}")))
    }
}

/// Binary cross-entropy with `p` clamped to `[BCE_EPS, 1 - BCE_EPS]`.
pub fn bce_loss(p: f64, y: f64) -> Result<f64, NnError> {
    let y = check_label(y)?;
    let p = finite(p, "probability")?.clamp(BCE_EPS, 1.0 - BCE_EPS);
    Ok(-(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
}

/// Derivative of [`bce_loss`] with respect to `p`; zero where the clamp is active.
pub fn bce_grad(p: f64, y: f64) -> f64 {
    if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
        return 0.0;
    }
    -(y / p) + (1.0 - y) / (1.0 - p)
}

/// Whether `p` sits in the clamped (flat) region of [`bce_loss`].
pub fn bce_clamped(p: f64) -> bool {
    !(BCE_EPS..=1.0 - BCE_EPS).contains(&p)
}

/// Pairwise contrastive loss `y d^2 + (1 - y) max(0, margin - d)^2`.
pub fn contrastive_loss(d: f64, y: f64, margin: f64) -> Result<f64, NnError> {
    let d = finite(d, "distance")?;
    if d < 0.0 {
        return Err(NnError::InvalidArgument(format!("distance must be non-negative, got {d}")));
    }
    if !(margin > 0.0) {
        return Err(NnError::InvalidArgument(format!("margin must be positive, got {margin}")));
    }
    let y = check_label(y)?;
    let gap = (margin - d).max(0.0);
    Ok(y * d * d + (1.0 - y) * gap * gap)
}

/// Derivative of [`contrastive_loss`] with respect to `d`.
pub fn contrastive_grad(d: f64, y: f64, margin: f64) -> f64 {
    let gap = (margin - d).max(0.0);
    2.0 * y * d - 2.0 * (1.0 - y) * gap
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(0.0).unwrap(), 0.0);
        assert_eq!(smooth_l1(2.0).unwrap(), 1.5);
        assert_eq!(smooth_l1(0.5).unwrap(), 0.125);
        assert_eq!(smooth_l1(1.0).unwrap(), 0.5);
        assert_eq!(smooth_l1(-2.0).unwrap(), 1.5);
        assert!(smooth_l1(f64::NAN).is_err());
        assert!(smooth_l1(f64::INFINITY).is_err());
    }

    #[test]
    fn smooth_l1_derivative_branches() {
        assert_eq!(smooth_l1_grad(2.0), 1.0);
        assert_eq!(smooth_l1_grad(0.5), 0.5);
        assert_eq!(smooth_l1_grad(-3.0), -1.0);
        // continuity at the branch point
        assert!((smooth_l1_grad(1.0 - 1e-12) - smooth_l1_grad(1.0)).abs() < 1e-9);
        assert!((smooth_l1(1.0 - 1e-12).unwrap() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn bbox_loss_values() {
        let zero = BoxParam::new(0.0, 0.0, 0.0, 0.0);
        let t = BoxParam::new(0.3, -0.2, 1.1, 0.0);
        assert_eq!(bbox_loss(&t, &t).unwrap(), 0.0);
        assert_eq!(bbox_loss(&BoxParam::new(2.0, 0.0, 0.0, 0.0), &zero).unwrap(), 1.5);
        assert_eq!(bbox_loss(&BoxParam::new(0.5, 0.5, 0.5, 0.5), &zero).unwrap(), 0.5);
        assert!(bbox_loss(&BoxParam::new(f64::NAN, 0.0, 0.0, 0.0), &zero).is_err());
    }

    #[test]
    fn bce_values() {
        let ln2 = std::f64::consts::LN_2;
        assert!((bce_loss(0.5, 1.0).unwrap() - ln2).abs() < 1e-12);
        assert!((bce_loss(0.5, 0.0).unwrap() - ln2).abs() < 1e-12);
        let floor = -(1.0 - BCE_EPS).ln();
        assert!((bce_loss(1.0, 1.0).unwrap() - floor).abs() < 1e-15);
        assert!(bce_loss(1.0, 1.0).unwrap() < 1e-6);
        assert!(bce_loss(0.5, 0.5).is_err());
        assert!(bce_loss(0.0, 1.0).unwrap().is_finite());
    }

    #[test]
    fn contrastive_values() {
        assert_eq!(contrastive_loss(0.0, 1.0, 1.0).unwrap(), 0.0);
        assert_eq!(contrastive_loss(1.5, 0.0, 1.0).unwrap(), 0.0);
        assert_eq!(contrastive_loss(0.0, 0.0, 1.0).unwrap(), 1.0);
        assert!(contrastive_loss(-0.1, 1.0, 1.0).is_err());
        assert!(contrastive_loss(0.1, 1.0, 0.0).is_err());
    }

    #[test]
    fn scalar_grads_match_central_differences() {
        let h = 1e-6;
        for &x in &[-2.5, -0.7, 0.3, 0.9, 1.7] {
            let fd = (smooth_l1(x + h).unwrap() - smooth_l1(x - h).unwrap()) / (2.0 * h);
            assert!((fd - smooth_l1_grad(x)).abs() < 1e-6, "smooth_l1 at {x}");
        }
        for &p in &[0.1, 0.4, 0.8] {
            for &y in &[0.0, 1.0] {
                let fd = (bce_loss(p + h, y).unwrap() - bce_loss(p - h, y).unwrap()) / (2.0 * h);
                assert!((fd - bce_grad(p, y)).abs() / fd.abs() < 1e-6);
            }
        }
        for &d in &[0.2, 0.8, 1.3] {
            for &y in &[0.0, 1.0] {
                let fd =
                    (contrastive_loss(d + h, y, 1.0).unwrap() - contrastive_loss(d - h, y, 1.0).unwrap()) / (2.0 * h);
                assert!((fd - contrastive_grad(d, y, 1.0)).abs() < 1e-6);
            }
        }
    }
}
