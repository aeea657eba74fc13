//! Fairness/equality/performance measures and the run report with its JSON
//! and CSV serializations.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Sample Pearson correlation. Zero variance in either argument yields an
/// explicit error so callers report the correlation as missing rather than 0.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Contract("pearson needs equal-length vectors".into()));
    }
    if x.len() < 2 {
        return Err(Error::Contract("pearson needs at least 2 points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Numerical("pearson undefined for constant input".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Running arithmetic mean of a performance history.
pub fn online_performance(history: &[f64]) -> Result<f64> {
    if history.is_empty() {
        return Err(Error::Contract("empty performance history".into()));
    }
    Ok(history.iter().sum::<f64>() / history.len() as f64)
}

/// Population spread statistics across nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// Population standard deviation plus extremes; the node set is the whole
/// population, not a sample.
pub fn equality_spread(values: &[f64]) -> Result<Spread> {
    if values.is_empty() {
        return Err(Error::Contract("empty value vector".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(Spread { std: var.sqrt(), min, max })
}

/// Per-node summary line of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeReport {
    pub node_id: usize,
    /// Recorded quality level (negative size multiplier for quantity runs).
    pub zeta: f64,
    /// Frozen contribution estimate; absent for baselines without valuation.
    pub psi_final: Option<f64>,
    /// Time-averaged staleness; absent for standalone training.
    pub avg_staleness: Option<f64>,
    /// Mean validation loss of the node's model over the whole run.
    pub online_loss: f64,
    /// Mean validation loss over the final window (up to 10 iterations).
    pub final_loss: f64,
}

/// Aggregate scalars of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    /// Pearson(online loss, zeta); missing when undefined.
    pub pearson_loss_zeta: Option<f64>,
    /// Pearson(average staleness, zeta); missing when undefined or untracked.
    pub pearson_staleness_zeta: Option<f64>,
    /// Fraction of designated low-quality nodes among the lowest estimates.
    pub recall_fraction: Option<f64>,
    pub std_online_loss: f64,
    pub min_online_loss: f64,
    pub max_online_loss: f64,
    pub std_final_loss: f64,
    /// Exploration stopping iteration; absent for baselines.
    pub t_alpha: Option<u64>,
    pub t_total: u64,
    /// Set when exploration hit the horizon without the test firing.
    pub exploration_truncated: bool,
}

/// Per-iteration trace row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: u64,
    /// "explore" or "exploit" (baselines run a single phase).
    pub phase: String,
    pub global_loss: f64,
    pub p_value: Option<f64>,
    pub delta_psi: Option<f64>,
    pub node_loss: Vec<f64>,
    pub node_staleness: Vec<u64>,
}

/// Full experiment output: summary plus per-iteration trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: String,
    pub seed: u64,
    pub per_node: Vec<NodeReport>,
    pub aggregate: AggregateReport,
    pub trajectories: Vec<TraceRow>,
}

impl RunReport {
    /// Summary JSON (pretty-printed, stable key order from struct order).
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<RunReport> {
        Ok(serde_json::from_str(text)?)
    }

    /// Per-iteration CSV: fixed columns then one loss and one staleness
    /// column per node. Floats are rendered with ryu shortest round-trip
    /// notation so identical runs serialize identically.
    pub fn to_csv(&self) -> Result<String> {
        let n = self.per_node.len();
        let mut out = Vec::new();
        {
            let mut w = csv::Writer::from_writer(&mut out);
            let mut header =
                vec!["iteration".to_string(), "phase".to_string(), "global_loss".to_string(),
                     "p_value".to_string(), "delta_psi".to_string()];
            for i in 0..n {
                header.push(format!("loss_node_{i}"));
            }
            for i in 0..n {
                header.push(format!("staleness_node_{i}"));
            }
            w.write_record(&header)?;
            for row in &self.trajectories {
                let mut rec = vec![
                    row.iteration.to_string(),
                    row.phase.clone(),
                    fmt_float(row.global_loss),
                    row.p_value.map(fmt_float).unwrap_or_default(),
                    row.delta_psi.map(fmt_float).unwrap_or_default(),
                ];
                rec.extend(row.node_loss.iter().map(|&v| fmt_float(v)));
                rec.extend(row.node_staleness.iter().map(u64::to_string));
                w.write_record(&rec)?;
            }
            w.flush()?;
        }
        Ok(String::from_utf8(out).expect("csv output is utf-8"))
    }

    /// Writes `summary.json` and `metrics.csv` under `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut json = std::fs::File::create(dir.join("summary.json"))?;
        json.write_all(self.to_json()?.as_bytes())?;
        json.write_all(b"\n")?;
        let mut csv = std::fs::File::create(dir.join("metrics.csv"))?;
        csv.write_all(self.to_csv()?.as_bytes())?;
        Ok(())
    }
}

fn fmt_float(v: f64) -> String {
    let mut buf = ryu_format(v);
    // Trim the ".0" suffix ryu emits for integral values, keeping columns tidy.
    if buf.ends_with(".0") {
        buf.truncate(buf.len() - 2);
    }
    buf
}

fn ryu_format(v: f64) -> String {
    // serde_json uses ryu internally; route through it for identical output.
    serde_json::to_string(&v).unwrap_or_else(|_| "null".to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngs;
    use rand::Rng;

    #[test]
    fn pearson_exact_relations() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_null_concentration() {
        let n = 10_000;
        let mut rng = rngs::stream(61, "pearson", 0, 0);
        let x: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        assert!(pearson(&x, &y).unwrap().abs() <= 0.04);
    }

    #[test]
    fn pearson_zero_variance_is_an_error() {
        let x = vec![1.0, 1.0, 1.0];
        let y = vec![0.0, 1.0, 2.0];
        assert!(matches!(pearson(&x, &y), Err(Error::Numerical(_))));
        assert!(matches!(pearson(&y, &x), Err(Error::Numerical(_))));
    }

    #[test]
    fn pearson_is_affine_invariant() {
        let mut rng = rngs::stream(63, "pearson", 0, 0);
        let x: Vec<f64> = (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let base = pearson(&x, &y).unwrap();
        let x2: Vec<f64> = x.iter().map(|v| 3.0 * v + 7.0).collect();
        let y2: Vec<f64> = y.iter().map(|v| 0.1 * v - 2.0).collect();
        assert!((pearson(&x2, &y2).unwrap() - base).abs() <= 1e-12);
    }

    #[test]
    fn online_performance_means() {
        assert_eq!(online_performance(&[0.7; 5]).unwrap(), 0.7);
        assert_eq!(online_performance(&[1.0, 0.0, 1.0, 0.0]).unwrap(), 0.5);
        assert!(online_performance(&[]).is_err());
    }

    #[test]
    fn online_performance_prefix_means_match_naive_sums() {
        let mut rng = rngs::stream(67, "hist", 0, 0);
        let hist: Vec<f64> = (0..200).map(|_| rng.gen::<f64>()).collect();
        for t in 1..=hist.len() {
            let ours = online_performance(&hist[..t]).unwrap();
            let naive = hist[..t].iter().sum::<f64>() / t as f64;
            assert!((ours - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn merged_history_mean_is_length_weighted() {
        let a = [0.2, 0.6, 0.4];
        let b = [1.0, 0.0];
        let merged: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
        let expected = (3.0 * online_performance(&a).unwrap()
            + 2.0 * online_performance(&b).unwrap())
            / 5.0;
        assert!((online_performance(&merged).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn spread_basics() {
        let s = equality_spread(&[2.0, 2.0, 2.0]).unwrap();
        assert_eq!((s.std, s.min, s.max), (0.0, 2.0, 2.0));
        let s = equality_spread(&[0.0, 2.0]).unwrap();
        assert_eq!((s.std, s.min, s.max), (1.0, 0.0, 2.0));
    }

    #[test]
    fn spread_matches_two_pass_oracle() {
        let mut rng = rngs::stream(71, "spread", 0, 0);
        for _ in 0..20 {
            let v: Vec<f64> = (0..30).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let s = equality_spread(&v).unwrap();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
            assert!((s.std - var.sqrt()).abs() <= 1e-12);
        }
    }

    fn sample_report() -> RunReport {
        RunReport {
            mode: "ours".into(),
            seed: 5,
            per_node: vec![NodeReport {
                node_id: 0,
                zeta: 0.1,
                psi_final: Some(0.25),
                avg_staleness: Some(1.5),
                online_loss: 0.9,
                final_loss: 0.4,
            }],
            aggregate: AggregateReport {
                pearson_loss_zeta: Some(0.5),
                pearson_staleness_zeta: None,
                recall_fraction: Some(1.0),
                std_online_loss: 0.01,
                min_online_loss: 0.9,
                max_online_loss: 0.9,
                std_final_loss: 0.0,
                t_alpha: Some(40),
                t_total: 100,
                exploration_truncated: false,
            },
            trajectories: vec![TraceRow {
                iteration: 1,
                phase: "explore".into(),
                global_loss: 1.25,
                p_value: None,
                delta_psi: Some(0.125),
                node_loss: vec![1.25],
                node_staleness: vec![0],
            }],
        }
    }

    #[test]
    fn report_json_round_trips_losslessly() {
        let report = sample_report();
        let text = report.to_json().unwrap();
        let back = RunReport::from_json(&text).unwrap();
        assert_eq!(report, back);
    }

    #[test]
    fn report_csv_layout() {
        let csv = sample_report().to_csv().unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "iteration,phase,global_loss,p_value,delta_psi,loss_node_0,staleness_node_0"
        );
        assert_eq!(lines.next().unwrap(), "1,explore,1.25,,0.125,1.25,0");
    }
}
