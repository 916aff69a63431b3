use crate::error::{Error, Result};

fn check_scores(scores: &[f64], n_labels: usize) -> Result<()> {
    if scores.len() != n_labels {
        return Err(Error::Dimension { op: "metric", lhs: vec![scores.len()], rhs: vec![n_labels] });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("metric scores".into()));
    }
    Ok(())
}

/// Area under the ROC curve via midranks: the probability that a random
/// positive outscores a random negative, ties counting one half.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_scores(scores, labels.len())?;
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!("AUC-ROC needs both classes ({pos} positive, {neg} negative)")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // count pairs directly from tie groups so the result is exact in the counts
    let mut wins = 0.0f64;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let (mut p, mut n) = (0usize, 0usize);
        for &k in &order[i..j] {
            if labels[k] {
                p += 1;
            } else {
                n += 1;
            }
        }
        wins += p as f64 * neg_below as f64 + 0.5 * (p * n) as f64;
        neg_below += n;
        i = j;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Average precision: the mean, over positives in score-descending order, of
/// precision at each positive's rank. Ties keep input order.
pub fn auc_pr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_scores(scores, labels.len())?;
    let pos = labels.iter().filter(|&&y| y).count();
    if pos == 0 {
        return Err(Error::UndefinedMetric("AUC-PR needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &k) in order.iter().enumerate() {
        if labels[k] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / pos as f64)
}

/// Macro (mean of per-label AUC-ROC over labels with both classes) and micro
/// (AUC-ROC of all flattened pairs) for `[n × L]` scores.
pub fn macro_micro_auc(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<(f64, f64)> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Dimension { op: "macro_micro_auc", lhs: vec![scores.len()], rhs: vec![labels.len()] });
    }
    let l = labels[0].len();
    if scores.iter().any(|r| r.len() != l) || labels.iter().any(|r| r.len() != l) {
        return Err(Error::Data("ragged score or label rows".into()));
    }
    let mut per_label = Vec::new();
    let mut skipped = 0;
    for j in 0..l {
        let s: Vec<f64> = scores.iter().map(|r| r[j]).collect();
        let y: Vec<bool> = labels.iter().map(|r| r[j]).collect();
        match auc_roc(&s, &y) {
            Ok(v) => per_label.push(v),
            Err(Error::UndefinedMetric(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if per_label.is_empty() {
        return Err(Error::UndefinedMetric("every label column has a single class".into()));
    }
    if skipped > 0 {
        log::warn!("{skipped} single-class label columns left out of macro AUC-ROC");
    }
    let macro_auc = per_label.iter().sum::<f64>() / per_label.len() as f64;
    let flat_s: Vec<f64> = scores.iter().flatten().copied().collect();
    let flat_y: Vec<bool> = labels.iter().flatten().copied().collect();
    Ok((macro_auc, auc_roc(&flat_s, &flat_y)?))
}

/// Queries, candidates and the correct candidates of each query.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    pub queries: Vec<Vec<f64>>,
    pub candidates: Vec<Vec<f64>>,
    pub correct: Vec<Vec<usize>>,
}

impl RetrievalIndex {
    pub fn new(queries: Vec<Vec<f64>>, candidates: Vec<Vec<f64>>, correct: Vec<Vec<usize>>) -> Result<Self> {
        if queries.len() != correct.len() {
            return Err(Error::Dimension { op: "retrieval_index", lhs: vec![queries.len()], rhs: vec![correct.len()] });
        }
        for (q, c) in correct.iter().enumerate() {
            if c.is_empty() {
                return Err(Error::Data(format!("query {q} has no correct candidate")));
            }
            if let Some(bad) = c.iter().find(|&&i| i >= candidates.len()) {
                return Err(Error::Data(format!("query {q} points at candidate {bad} of {}", candidates.len())));
            }
        }
        Ok(Self { queries, candidates, correct })
    }

    /// Rank (0-based) of the best-placed correct candidate for each query,
    /// ordering by descending similarity with ties broken by candidate index.
    pub fn best_ranks(&self) -> Vec<usize> {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        self.queries
            .iter()
            .zip(&self.correct)
            .map(|(q, correct)| {
                let sims: Vec<f64> = self.candidates.iter().map(|c| dot(q, c)).collect();
                correct
                    .iter()
                    .map(|&j| {
                        sims.iter()
                            .enumerate()
                            .filter(|&(c, &s)| s > sims[j] || (s == sims[j] && c < j))
                            .count()
                    })
                    .min()
                    .expect("non-empty correct set")
            })
            .collect()
    }
}

/// Percentage of queries with a correct candidate among the top `k`.
pub fn recall_at_k(index: &RetrievalIndex, k: usize) -> Result<f64> {
    Ok(recall_at_ks(index, &[k])?[0])
}

/// [`recall_at_k`] for several `k` sharing one ranking pass.
pub fn recall_at_ks(index: &RetrievalIndex, ks: &[usize]) -> Result<Vec<f64>> {
    if index.queries.is_empty() {
        return Err(Error::UndefinedMetric("recall with no queries".into()));
    }
    let ranks = index.best_ranks();
    ks.iter()
        .map(|&k| {
            if k == 0 {
                return Err(Error::Config("recall@k needs k >= 1".into()));
            }
            let n = index.candidates.len();
            if k > n {
                log::warn!("recall@{k} clamped to the {n} available candidates");
            }
            let k = k.min(n);
            let hits = ranks.iter().filter(|&&r| r < k).count();
            Ok(100.0 * hits as f64 / ranks.len() as f64)
        })
        .collect()
}
