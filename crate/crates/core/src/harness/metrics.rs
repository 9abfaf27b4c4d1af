use std::collections::BTreeSet;

use crate::datagen::QuestionInstance;
use crate::error::{ApeError, Result};

/// Area under the ROC curve via the Mann-Whitney rank statistic, with tied
/// scores sharing their average rank. NaN when one class is absent.
pub fn auc(scores: &[f64], labels: &[bool]) -> f64 {
    assert_eq!(scores.len(), labels.len());
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return f64::NAN;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = pos as f64;
    (rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64)
}

/// A question's retained passage ranks after scheduling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RetainedSet {
    pub question_id: String,
    pub ranks: Vec<usize>,
}

/// Fraction of questions whose retained passages include at least one
/// has-answer passage (top-k retrieval accuracy).
pub fn answer_recall_at_k(dataset: &[QuestionInstance], retained: &[RetainedSet], k: usize) -> Result<f64> {
    if dataset.len() != retained.len() {
        return Err(ApeError::Argument(format!(
            "{} questions but {} retained sets",
            dataset.len(),
            retained.len()
        )));
    }
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (q, r) in dataset.iter().zip(retained) {
        if q.id != r.question_id {
            return Err(ApeError::Argument(format!(
                "question id mismatch: dataset has {}, retained set has {}",
                q.id, r.question_id
            )));
        }
        let unique: BTreeSet<usize> = r.ranks.iter().copied().collect();
        if unique.len() != r.ranks.len() || r.ranks.len() > k {
            return Err(ApeError::Argument(format!(
                "question {}: retained set {:?} is not a set of at most {k} ranks",
                q.id, r.ranks
            )));
        }
        let mut covered = false;
        for &n in &r.ranks {
            let p = q.passages.get(n).ok_or_else(|| {
                ApeError::Argument(format!("question {}: retained rank {n} out of range", q.id))
            })?;
            covered |= p.has_answer;
        }
        hits += usize::from(covered);
    }
    Ok(hits as f64 / dataset.len() as f64)
}

/// Median of a non-empty slice; the mean of the two middle values for even
/// lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::Passage;

    fn question(id: &str, labels: &[bool]) -> QuestionInstance {
        QuestionInstance {
            id: id.into(),
            question: vec![1, 8],
            passages: labels
                .iter()
                .enumerate()
                .map(|(rank, &has_answer)| Passage {
                    rank,
                    tokens: vec![70],
                    has_answer,
                })
                .collect(),
        }
    }

    fn retained(id: &str, ranks: &[usize]) -> RetainedSet {
        RetainedSet {
            question_id: id.into(),
            ranks: ranks.to_vec(),
        }
    }

    #[test]
    fn auc_perfect_inverted_and_tied() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]), 1.0);
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]), 0.0);
        assert_eq!(auc(&[0.5, 0.5, 0.5, 0.5], &[false, true, false, true]), 0.5);
        assert!(auc(&[0.1, 0.2], &[true, true]).is_nan());
    }

    #[test]
    fn recall_full_and_partial() {
        let ds = vec![
            question("a", &[false, true, false]),
            question("b", &[true, false, false]),
            question("c", &[false, false, true]),
        ];
        let all = vec![retained("a", &[1]), retained("b", &[0]), retained("c", &[2])];
        assert_eq!(answer_recall_at_k(&ds, &all, 1).unwrap(), 1.0);
        let two = vec![retained("a", &[0, 1]), retained("b", &[0, 2]), retained("c", &[0, 1])];
        let r = answer_recall_at_k(&ds, &two, 2).unwrap();
        assert!((r - 0.6667).abs() < 1e-4);
    }

    #[test]
    fn recall_rejects_mismatches() {
        let ds = vec![question("a", &[true, false])];
        assert!(answer_recall_at_k(&ds, &[retained("b", &[0])], 1).is_err());
        assert!(answer_recall_at_k(&ds, &[], 1).is_err());
        assert!(answer_recall_at_k(&ds, &[retained("a", &[0, 1])], 1).is_err());
    }

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
