//! Evaluation metrics.

use crate::data::Matrix;
use crate::error::{Result, SmcError};

fn check_pair(p: &[f64], t: &[f64]) -> Result<()> {
    if p.len() != t.len() {
        return Err(SmcError::LengthMismatch {
            left: p.len(),
            right: t.len(),
        });
    }
    if p.is_empty() {
        return Err(SmcError::Empty("metric input"));
    }
    if p.iter().chain(t).any(|v| !v.is_finite()) {
        return Err(SmcError::NonFinite("metric input".into()));
    }
    Ok(())
}

pub fn rmse(predictions: &[f64], truths: &[f64]) -> Result<f64> {
    check_pair(predictions, truths)?;
    let sse: f64 = predictions
        .iter()
        .zip(truths)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok((sse / predictions.len() as f64).sqrt())
}

/// RMSE divided by the root-mean-square of the truths.
pub fn relative_rmse(predictions: &[f64], truths: &[f64]) -> Result<f64> {
    let err = rmse(predictions, truths)?;
    let scale = (truths.iter().map(|t| t * t).sum::<f64>() / truths.len() as f64).sqrt();
    if scale == 0.0 {
        return Err(SmcError::UndefinedMetric(
            "relative RMSE of all-zero truths".into(),
        ));
    }
    Ok(err / scale)
}

/// Binary AUROC of `scores` against `positive`, ties at midrank.
pub fn auroc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(SmcError::LengthMismatch {
            left: scores.len(),
            right: positive.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(SmcError::NonFinite("auroc scores".into()));
    }
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(SmcError::UndefinedMetric(
            "auroc needs both positive and negative instances".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Rank-sum (Mann-Whitney U) with average ranks inside tie groups.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if positive[idx] {
                rank_sum_pos += mid_rank;
            }
        }
        i = j + 1;
    }
    let n_pos = n_pos as f64;
    let u = rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0;
    Ok(u / (n_pos * n_neg as f64))
}

/// Unweighted mean over classes of the one-vs-rest AUROC of each score
/// column. Every class `0..K` must appear in `labels`.
pub fn auroc_ovr(scores: &Matrix, labels: &[usize]) -> Result<f64> {
    if scores.rows() != labels.len() {
        return Err(SmcError::LengthMismatch {
            left: scores.rows(),
            right: labels.len(),
        });
    }
    let k = scores.cols();
    if k < 2 {
        return Err(SmcError::invalid("one-vs-rest AUROC needs at least two classes"));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(SmcError::invalid(format!("label {bad} out of range for {k} classes")));
    }
    let mut total = 0.0;
    for class in 0..k {
        if !labels.contains(&class) {
            return Err(SmcError::UndefinedMetric(format!(
                "class {class} absent from labels"
            )));
        }
        let positive: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        total += auroc_binary(&scores.column(class), &positive)?;
    }
    Ok(total / k as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        assert!(matches!(rmse(&[1.0], &[1.0, 2.0]), Err(SmcError::LengthMismatch { .. })));
        assert!(matches!(rmse(&[], &[]), Err(SmcError::Empty(_))));
    }

    #[test]
    fn relative_rmse_examples() {
        assert_eq!(relative_rmse(&[1.0, 1.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(relative_rmse(&[2.0, 2.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert!(relative_rmse(&[1.0, 1.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn auroc_perfect_and_constant() {
        let s = Matrix::from_rows(&[[0.9, 0.1], [0.8, 0.2], [0.1, 0.9]]).unwrap();
        assert_eq!(auroc_ovr(&s, &[0, 0, 1]).unwrap(), 1.0);
        let flat = Matrix::from_rows(&[[0.5, 0.5], [0.5, 0.5], [0.5, 0.5]]).unwrap();
        assert_eq!(auroc_ovr(&flat, &[0, 1, 1]).unwrap(), 0.5);
    }

    #[test]
    fn auroc_requires_every_class() {
        let s = Matrix::from_rows(&[[0.9, 0.1, 0.0], [0.1, 0.9, 0.0]]).unwrap();
        assert!(matches!(auroc_ovr(&s, &[0, 1]), Err(SmcError::UndefinedMetric(_))));
    }
}
