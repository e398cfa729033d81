use serde::{Deserialize, Serialize};

/// Ranking quality of next-event predictions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub hit_at_5: f64,
    pub hit_at_10: f64,
    pub ndcg_at_5: f64,
    pub ndcg_at_10: f64,
    pub loss: f64,
    pub count: usize,
}

/// Rank of the true event: one plus the number of strictly higher scores.
pub fn rank_of(logits: &[f64], truth: usize) -> usize {
    let s = logits[truth];
    1 + logits.iter().filter(|&&x| x > s).count()
}

pub fn ndcg_at(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// Aggregates per-target ranks and losses.
#[derive(Debug, Clone, Default)]
pub struct MetricAccumulator {
    n: usize,
    top1: usize,
    hit5: usize,
    hit10: usize,
    ndcg5: f64,
    ndcg10: f64,
    loss: f64,
}

impl MetricAccumulator {
    pub fn push(&mut self, rank: usize, loss: f64) {
        self.n += 1;
        self.top1 += usize::from(rank == 1);
        self.hit5 += usize::from(rank <= 5);
        self.hit10 += usize::from(rank <= 10);
        self.ndcg5 += ndcg_at(rank, 5);
        self.ndcg10 += ndcg_at(rank, 10);
        self.loss += loss;
    }

    pub fn finish(&self) -> MetricReport {
        let n = self.n.max(1) as f64;
        MetricReport {
            accuracy: self.top1 as f64 / n,
            hit_at_5: self.hit5 as f64 / n,
            hit_at_10: self.hit10 as f64 / n,
            ndcg_at_5: self.ndcg5 / n,
            ndcg_at_10: self.ndcg10 / n,
            loss: self.loss / n,
            count: self.n,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(rank: usize) -> MetricReport {
        let mut acc = MetricAccumulator::default();
        for _ in 0..7 {
            acc.push(rank, 0.1);
        }
        acc.finish()
    }

    #[test]
    fn rank_examples() {
        let r = report(1);
        assert_eq!((r.accuracy, r.hit_at_10, r.ndcg_at_10), (1.0, 1.0, 1.0));
        let r = report(2);
        assert!((r.ndcg_at_10 - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((r.ndcg_at_10 - 0.63093).abs() < 1e-5);
        assert_eq!(r.accuracy, 0.0);
        let r = report(11);
        assert_eq!((r.hit_at_10, r.ndcg_at_10), (0.0, 0.0));
        let r = report(6);
        assert_eq!((r.hit_at_5, r.hit_at_10), (0.0, 1.0));
    }

    #[test]
    fn ties_do_not_lower_rank() {
        assert_eq!(rank_of(&[0.5, 0.5, 0.1], 1), 1);
        assert_eq!(rank_of(&[0.9, 0.5, 0.7], 1), 3);
    }
}
