//! Displacement errors and best-of-N reduction.

use crate::error::{Error, Result};
use crate::geom::Point2;

/// Average L2 distance over time.
pub fn ade(pred: &[Point2], gt: &[Point2]) -> Result<f64> {
    check_lengths(pred, gt)?;
    let sum: f64 = pred.iter().zip(gt).map(|(p, g)| p.dist(*g)).sum();
    Ok(sum / pred.len() as f64)
}

/// L2 distance between the endpoints.
pub fn fde(pred: &[Point2], gt: &[Point2]) -> Result<f64> {
    check_lengths(pred, gt)?;
    Ok(pred.last().unwrap().dist(*gt.last().unwrap()))
}

fn check_lengths(pred: &[Point2], gt: &[Point2]) -> Result<()> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            context: "displacement error".into(),
            expected: format!("{} ground-truth steps", gt.len()),
            got: format!("{}", pred.len()),
        });
    }
    Ok(())
}

/// Minimum ADE and FDE over a candidate set, minimized independently.
pub fn best_of_n(candidates: &[Vec<Point2>], gt: &[Point2]) -> Result<(f64, f64)> {
    if candidates.is_empty() {
        return Err(Error::InvalidConfig("best-of-N needs at least one candidate".into()));
    }
    let mut best_ade = f64::INFINITY;
    let mut best_fde = f64::INFINITY;
    for c in candidates {
        best_ade = best_ade.min(ade(c, gt)?);
        best_fde = best_fde.min(fde(c, gt)?);
    }
    Ok((best_ade, best_fde))
}

/// Mean over steps, then over items, of per-item per-step values.
pub fn mean_step_metric(values: &[Vec<f64>]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let per_item: Vec<f64> =
        values.iter().map(|v| v.iter().sum::<f64>() / v.len().max(1) as f64).collect();
    per_item.iter().sum::<f64>() / per_item.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[(f64, f64)]) -> Vec<Point2> {
        v.iter().map(|&(x, y)| Point2::new(x, y)).collect()
    }

    #[test]
    fn identical_trajectories_have_zero_error() {
        let t = pts(&[(0.0, 0.0), (1.0, 1.0), (2.0, 0.0)]);
        assert_eq!(ade(&t, &t).unwrap(), 0.0);
        assert_eq!(fde(&t, &t).unwrap(), 0.0);
    }

    #[test]
    fn constant_three_four_offset_gives_five() {
        let gt = pts(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]);
        let pred: Vec<Point2> = gt.iter().map(|p| *p + Point2::new(3.0, 4.0)).collect();
        assert!((ade(&pred, &gt).unwrap() - 5.0).abs() < 1e-12);
        assert!((fde(&pred, &gt).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn ade_matches_direct_recomputation() {
        let gt = pts(&[(0.1, -0.4), (1.3, 0.2), (2.0, 1.0), (2.4, 2.2)]);
        let pred = pts(&[(0.0, 0.0), (1.0, 0.5), (2.5, 0.5), (2.0, 2.0)]);
        let direct: f64 =
            pred.iter().zip(&gt).map(|(p, g)| ((p.x - g.x).powi(2) + (p.y - g.y).powi(2)).sqrt()).sum::<f64>()
                / 4.0;
        assert!((ade(&pred, &gt).unwrap() - direct).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch_errors() {
        let a = pts(&[(0.0, 0.0)]);
        let b = pts(&[(0.0, 0.0), (1.0, 1.0)]);
        assert!(ade(&a, &b).is_err());
        assert!(fde(&a, &b).is_err());
    }

    #[test]
    fn best_of_n_basics() {
        let gt = pts(&[(0.0, 0.0), (1.0, 0.0)]);
        let far: Vec<Point2> = gt.iter().map(|p| *p + Point2::new(1.0, 1.0)).collect();
        // GT among candidates -> zero.
        let (a, f) = best_of_n(&[far.clone(), gt.clone()], &gt).unwrap();
        assert_eq!((a, f), (0.0, 0.0));
        // N = 1 equals plain ade/fde.
        let (a1, f1) = best_of_n(&[far.clone()], &gt).unwrap();
        assert_eq!(a1, ade(&far, &gt).unwrap());
        assert_eq!(f1, fde(&far, &gt).unwrap());
        // Monotone non-increasing when candidates are appended.
        let (a2, f2) = best_of_n(&[far.clone(), far.clone()], &gt).unwrap();
        assert!(a2 >= a - 1e-15 || a2 <= a1);
        assert!(f2 <= f1 + 1e-15);
        assert!(best_of_n(&[], &gt).is_err());
    }

    #[test]
    fn mean_step_metric_trivia() {
        assert_eq!(mean_step_metric(&[vec![2.0, 2.0], vec![2.0]]), 2.0);
        assert_eq!(mean_step_metric(&[vec![3.5]]), 3.5);
        let manual = ((1.0 + 2.0 + 3.0) / 3.0 + (4.0 + 5.0) / 2.0) / 2.0;
        assert!((mean_step_metric(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0]]) - manual).abs() < 1e-15);
    }
}
