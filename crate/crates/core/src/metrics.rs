//! Navigation metrics (SR, SPL, SNA), action-transition matrices and ATP
//! agreement.
//!
//! For `M` episodes with success `S_i`, geodesic optimum `l_i`, cells
//! actually traversed `p_i`, actions executed `n_i` and optimal action count
//! `n*_i`:
//!
//! * SR  = (1/M) sum S_i
//! * SPL = (1/M) sum S_i * l_i / max(p_i, l_i)
//! * SNA = (1/M) sum S_i * n*_i / max(n_i, n*_i)
//!
//! Rotations count toward `n_i` but not `p_i`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub success: bool,
    pub path_length: u32,
    pub geodesic_optimum: u32,
    pub action_count: u32,
    pub optimal_action_count: u32,
    pub category_id: usize,
    pub map_id: String,
}

fn nonempty(records: &[EpisodeRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Invalid("metrics need at least one episode record".into()));
    }
    Ok(())
}

pub fn success_rate(records: &[EpisodeRecord]) -> Result<f64> {
    nonempty(records)?;
    Ok(records.iter().filter(|r| r.success).count() as f64 / records.len() as f64)
}

pub fn spl(records: &[EpisodeRecord]) -> Result<f64> {
    nonempty(records)?;
    let mut total = 0.0;
    for r in records {
        if r.geodesic_optimum == 0 {
            return Err(Error::Invalid(format!("episode on {} has zero geodesic optimum", r.map_id)));
        }
        if r.success {
            let l = r.geodesic_optimum as f64;
            total += l / (r.path_length as f64).max(l);
        }
    }
    Ok(total / records.len() as f64)
}

pub fn sna(records: &[EpisodeRecord]) -> Result<f64> {
    nonempty(records)?;
    let mut total = 0.0;
    for r in records {
        if r.optimal_action_count == 0 {
            return Err(Error::Invalid(format!("episode on {} has zero optimal action count", r.map_id)));
        }
        if r.success {
            let n = r.optimal_action_count as f64;
            total += n / (r.action_count as f64).max(n);
        }
    }
    Ok(total / records.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub sr: f64,
    pub spl: f64,
    pub sna: f64,
    pub episodes: usize,
}

pub fn summarize(records: &[EpisodeRecord]) -> Result<MetricSummary> {
    Ok(MetricSummary { sr: success_rate(records)?, spl: spl(records)?, sna: sna(records)?, episodes: records.len() })
}

/// Sample mean and (population) standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Counts of consecutive within-episode action pairs `(a, a')`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransitionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl TransitionMatrix {
    pub fn new(n: usize) -> Self {
        TransitionMatrix { n, counts: vec![0; n * n] }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn count(&self, from: usize, to: usize) -> u64 {
        self.counts[from * self.n + to]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Row-normalized probabilities; all-zero rows stay zero.
    pub fn probabilities(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.n];
        for a in 0..self.n {
            let row = &self.counts[a * self.n..(a + 1) * self.n];
            let s: u64 = row.iter().sum();
            if s > 0 {
                for (b, &c) in row.iter().enumerate() {
                    out[a * self.n + b] = c as f64 / s as f64;
                }
            }
        }
        out
    }

    pub fn add_sequence(&mut self, seq: &[usize]) -> Result<()> {
        if let Some(&bad) = seq.iter().find(|&&a| a >= self.n) {
            return Err(Error::Invalid(format!("action {bad} outside [0, {})", self.n)));
        }
        for w in seq.windows(2) {
            self.counts[w[0] * self.n + w[1]] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &TransitionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(Error::Invalid(format!("cannot merge {}x{} into {}x{}", other.n, other.n, self.n, self.n)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Delimited text: header, then one row per source action with counts and
    /// row-normalized probabilities.
    pub fn to_delimited(&self, labels: &[&str]) -> String {
        let label = |i: usize| labels.get(i).map_or_else(|| i.to_string(), |s| s.to_string());
        let probs = self.probabilities();
        let mut s = String::from("from\tto\tcount\tprobability\n");
        for a in 0..self.n {
            for b in 0..self.n {
                s.push_str(&format!("{}\t{}\t{}\t{:.6}\n", label(a), label(b), self.count(a, b), probs[a * self.n + b]));
            }
        }
        s
    }
}

pub fn transition_matrix(sequences: &[Vec<usize>], n: usize) -> Result<TransitionMatrix> {
    let mut m = TransitionMatrix::new(n);
    for seq in sequences {
        m.add_sequence(seq)?;
    }
    Ok(m)
}

/// Fraction of positions where the predicted next action equals the executed one.
pub fn atp_agreement(predicted: &[usize], actual: &[usize]) -> Result<f64> {
    if predicted.len() != actual.len() {
        return Err(Error::Invalid(format!(
            "{} predictions vs {} executed actions",
            predicted.len(),
            actual.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::Invalid("agreement of empty sequences".into()));
    }
    let hits = predicted.iter().zip(actual).filter(|(p, a)| p == a).count();
    Ok(hits as f64 / predicted.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(success: bool, p: u32, l: u32, n: u32, nstar: u32) -> EpisodeRecord {
        EpisodeRecord {
            success,
            path_length: p,
            geodesic_optimum: l,
            action_count: n,
            optimal_action_count: nstar,
            category_id: 0,
            map_id: "m".into(),
        }
    }

    #[test]
    fn success_rate_counts() {
        assert_eq!(success_rate(&vec![rec(true, 3, 3, 4, 4); 4]).unwrap(), 1.0);
        assert_eq!(success_rate(&vec![rec(false, 3, 3, 4, 4); 4]).unwrap(), 0.0);
        let mut v = vec![rec(true, 3, 3, 4, 4); 7];
        v.extend(vec![rec(false, 3, 3, 4, 4); 3]);
        assert!((success_rate(&v).unwrap() - 0.7).abs() < 1e-15);
        assert!(success_rate(&[]).is_err());
    }

    #[test]
    fn spl_and_sna_contributions() {
        assert_eq!(spl(&[rec(true, 5, 5, 9, 9)]).unwrap(), 1.0);
        assert_eq!(spl(&[rec(true, 10, 5, 9, 9)]).unwrap(), 0.5);
        assert_eq!(spl(&[rec(false, 5, 5, 9, 9)]).unwrap(), 0.0);
        assert!(spl(&[rec(true, 5, 0, 9, 9)]).is_err());
        assert_eq!(sna(&[rec(true, 5, 5, 9, 9)]).unwrap(), 1.0);
        assert_eq!(sna(&[rec(true, 5, 5, 36, 9)]).unwrap(), 0.25);
        assert!(sna(&[rec(true, 5, 5, 9, 0)]).is_err());
    }

    #[test]
    fn transition_counts() {
        let m = transition_matrix(&[vec![0, 0, 0]], 4).unwrap();
        assert_eq!(m.count(0, 0), 2);
        assert_eq!(m.total(), 2);
        let m = transition_matrix(&[vec![1], vec![2]], 4).unwrap();
        assert_eq!(m.total(), 0);
        assert!(transition_matrix(&[vec![0, 4]], 4).is_err());
        let m = transition_matrix(&[vec![0, 1, 1, 3, 0, 1]], 4).unwrap();
        let p = m.probabilities();
        for a in 0..4 {
            let s: f64 = p[a * 4..(a + 1) * 4].iter().sum();
            assert!(s == 0.0 || (s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn agreement() {
        assert_eq!(atp_agreement(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(atp_agreement(&[0, 1, 2], &[1, 2, 0]).unwrap(), 0.0);
        assert!(atp_agreement(&[0], &[0, 1]).is_err());
        assert!(atp_agreement(&[], &[]).is_err());
    }
}
