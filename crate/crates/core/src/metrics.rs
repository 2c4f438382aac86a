use crate::error::{ensure, Error, Result};
use crate::scalar::Scalar;

/// Area under the ROC curve in its Mann–Whitney form: the probability that
/// a random positive outscores a random negative, ties counting one half.
pub fn auroc<T: Scalar>(scores: &[T], labels: &[u8]) -> Result<f64> {
    ensure!(
        scores.len() == labels.len(),
        "{} scores for {} labels",
        scores.len(),
        labels.len()
    );
    ensure!(labels.iter().all(|&l| l <= 1), "labels must be 0 or 1");
    ensure!(scores.iter().all(|s| !s.is_nan()), "scores contain NaN");
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes, got {n_pos} positive and {n_neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("no NaN"));

    // sum of (1-based, tie-averaged) ranks of the positives, doubled to stay integral
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let twice_avg = (i + 1 + j) as u128;
        let pos_in_run = order[i..j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        twice_rank_sum += twice_avg * pos_in_run;
        i = j;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}
