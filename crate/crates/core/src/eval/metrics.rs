use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    Hr,
    Ndcg,
    SessPrec,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Hr => "hr",
            Metric::Ndcg => "ndcg",
            Metric::SessPrec => "sessprec",
        }
    }

    pub const ALL: [Metric; 3] = [Metric::Hr, Metric::Ndcg, Metric::SessPrec];
}

/// Best rank (1-based) of a remaining item at every step of one basket.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionResult {
    pub user: usize,
    pub ranks: Vec<usize>,
}

pub fn hit(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_gain(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / (1.0 + rank as f64).log2()
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub ks: Vec<usize>,
    /// `(metric, k, value)` in metric-major order.
    pub values: Vec<(Metric, usize, f64)>,
    pub steps: usize,
    pub sessions: usize,
}

impl MetricsReport {
    pub fn get(&self, metric: Metric, k: usize) -> Option<f64> {
        self.values
            .iter()
            .find(|(m, kk, _)| *m == metric && *kk == k)
            .map(|v| v.2)
    }

    pub fn hr(&self, k: usize) -> f64 {
        self.get(Metric::Hr, k).unwrap_or(f64::NAN)
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        self.get(Metric::Ndcg, k).unwrap_or(f64::NAN)
    }

    pub fn sess_prec(&self, k: usize) -> f64 {
        self.get(Metric::SessPrec, k).unwrap_or(f64::NAN)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,k,value,steps,sessions\n");
        for (m, k, v) in &self.values {
            let _ = writeln!(
                s,
                "{},{k},{v:.6},{},{}",
                m.name(),
                self.steps,
                self.sessions
            );
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<10}", "metric");
        for k in &self.ks {
            let _ = write!(s, "{:>10}", format!("@{k}"));
        }
        s.push('\n');
        for m in Metric::ALL {
            let _ = write!(s, "{:<10}", m.name());
            for &k in &self.ks {
                let _ = write!(s, "{:>10.4}", self.get(m, k).unwrap_or(f64::NAN));
            }
            s.push('\n');
        }
        let _ = writeln!(s, "steps {}  sessions {}", self.steps, self.sessions);
        s
    }
}

/// HR@k and NDCG@k average over steps; Sess-Prec@k averages the per-basket
/// fraction of hit steps over baskets.
pub fn aggregate_metrics(results: &[SessionResult], ks: &[usize]) -> Result<MetricsReport> {
    let steps: usize = results.iter().map(|r| r.ranks.len()).sum();
    let sessions = results.iter().filter(|r| !r.ranks.is_empty()).count();
    if steps == 0 {
        return Err(Error::Empty("evaluation set"));
    }
    let mut values = Vec::new();
    for m in Metric::ALL {
        for &k in ks {
            let v = match m {
                Metric::Hr => {
                    results
                        .iter()
                        .flat_map(|r| &r.ranks)
                        .map(|&r| hit(r, k))
                        .sum::<f64>()
                        / steps as f64
                }
                Metric::Ndcg => {
                    results
                        .iter()
                        .flat_map(|r| &r.ranks)
                        .map(|&r| ndcg_gain(r, k))
                        .sum::<f64>()
                        / steps as f64
                }
                Metric::SessPrec => {
                    results
                        .iter()
                        .filter(|r| !r.ranks.is_empty())
                        .map(|r| {
                            r.ranks.iter().map(|&x| hit(x, k)).sum::<f64>() / r.ranks.len() as f64
                        })
                        .sum::<f64>()
                        / sessions as f64
                }
            };
            values.push((m, k, v));
        }
    }
    Ok(MetricsReport {
        ks: ks.to_vec(),
        values,
        steps,
        sessions,
    })
}
