use crate::error::{Error, Result};

/// Root-mean-square error over the unmasked elements, with `dL/dy` per
/// element (zero where the target is missing).
pub fn rmse_loss(predictions: &[f64], targets: &[Option<f64>]) -> Result<(f64, Vec<f64>)> {
    if predictions.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let mut sse = 0.0;
    let mut n = 0usize;
    for (y, t) in predictions.iter().zip(targets) {
        if let Some(t) = t {
            sse += (y - t) * (y - t);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::AllMasked);
    }
    let loss = (sse / n as f64).sqrt();
    // The gradient of sqrt at zero is unbounded; a perfect fit has nothing to update.
    let scale = if loss > 0.0 { 1.0 / (n as f64 * loss) } else { 0.0 };
    let grad = predictions
        .iter()
        .zip(targets)
        .map(|(y, t)| match t {
            Some(t) => (y - t) * scale,
            None => 0.0,
        })
        .collect();
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let (l, g) = rmse_loss(&[1.0, 2.0], &[Some(1.0), Some(2.0)]).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g, vec![0.0, 0.0]);

        let (l, _) = rmse_loss(&[1.0, 3.0], &[Some(0.0), Some(0.0)]).unwrap();
        assert!((l - 5f64.sqrt()).abs() < 1e-15);

        let (l, g) = rmse_loss(&[1.0, 3.0], &[Some(0.0), None]).unwrap();
        assert_eq!(l, 1.0);
        assert_eq!(g[1], 0.0);
    }

    #[test]
    fn all_masked_is_an_error() {
        assert!(matches!(rmse_loss(&[1.0], &[None]), Err(Error::AllMasked)));
        assert!(matches!(rmse_loss(&[], &[]), Err(Error::AllMasked)));
        assert!(matches!(rmse_loss(&[1.0], &[]), Err(Error::Shape(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let y = [0.3, -1.2, 2.5, 0.7, 0.0];
        let t = [Some(0.1), None, Some(2.0), Some(-0.4), Some(0.9)];
        let (_, g) = rmse_loss(&y, &t).unwrap();
        for k in 0..y.len() {
            let eps = 1e-6;
            let mut yp = y;
            let mut ym = y;
            yp[k] += eps;
            ym[k] -= eps;
            let fd = (rmse_loss(&yp, &t).unwrap().0 - rmse_loss(&ym, &t).unwrap().0) / (2.0 * eps);
            let denom = fd.abs().max(g[k].abs()).max(1e-12);
            assert!((fd - g[k]).abs() / denom < 1e-8 || (fd - g[k]).abs() < 1e-10, "k={k}: {fd} vs {}", g[k]);
        }
    }
}
