//! Run diagnostics: expert-parallel load fractions, per-rank gate medians,
//! and training-step savings between two validation curves, plus the CSV
//! and JSON files they are exported to.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::RoutingDecision;

/// One optimizer step of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    /// Task (cross-entropy) loss of the training batch.
    pub loss: f64,
    /// Held-out loss, present on validation steps only.
    pub val_loss: Option<f64>,
    pub lr: f64,
    /// Unscaled, averaged over layers.
    pub aux_loss: f64,
    /// Unscaled, averaged over layers.
    pub z_loss: f64,
    pub dropped_frac: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Share of first-layer assignments per expert-parallel group.
    pub ep_load: Vec<f64>,
}

/// Per-rank median gate value for one layer at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitRankSnapshot {
    pub step: usize,
    pub layer: usize,
    /// Index 0 is the top-ranked expert.
    pub medians: Vec<f64>,
}

/// Fraction of pre-drop assignments handled by each of `ep_size` groups,
/// where group `g` owns experts `[g·E/ep, (g+1)·E/ep)`.
pub fn ep_load_fractions(decision: &RoutingDecision, ep_size: usize) -> Result<Vec<f64>> {
    if ep_size == 0 || !decision.n_experts.is_multiple_of(ep_size) {
        return Err(Error::NotDivisible(ep_size, decision.n_experts));
    }
    let per_group = decision.n_experts / ep_size;
    let mut counts = vec![0usize; ep_size];
    for &e in &decision.experts {
        counts[e / per_group] += 1;
    }
    let total = decision.experts.len().max(1) as f64;
    Ok(counts.into_iter().map(|c| c as f64 / total).collect())
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Median over tokens of the gate at each rank. `gates[t]` is token `t`'s
/// gate list, sorted descending.
pub fn logit_rank_medians(gates: &[Vec<f64>], layer: usize, step: usize) -> Result<LogitRankSnapshot> {
    let k = gates
        .first()
        .map(Vec::len)
        .filter(|&k| k > 0)
        .ok_or_else(|| Error::Ragged("no gates".into()))?;
    if let Some((t, g)) = gates.iter().enumerate().find(|(_, g)| g.len() != k) {
        return Err(Error::Ragged(format!("token {t} has {} gates, token 0 has {k}", g.len())));
    }
    let medians = (0..k)
        .map(|r| {
            let mut col: Vec<f64> = gates.iter().map(|g| g[r]).collect();
            median(&mut col)
        })
        .collect();
    Ok(LogitRankSnapshot { step, layer, medians })
}

/// Per-token gate lists of a routing decision.
pub fn decision_gates(decision: &RoutingDecision) -> Vec<Vec<f64>> {
    (0..decision.n_tokens)
        .map(|t| decision.token_gates(t).to_vec())
        .collect()
}

pub const DEFAULT_SMOOTHING_WINDOW: usize = 5;

/// Centered moving average. Near the ends the window shrinks symmetrically
/// so every output is the mean of an odd run centred on its own sample.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let n = values.len();
    let half = window / 2;
    (0..n)
        .map(|i| {
            let h = half.min(i).min(n - 1 - i);
            values[i - h..=i + h].iter().sum::<f64>() / (2 * h + 1) as f64
        })
        .collect()
}

/// Outcome of [`step_savings`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SavingsReport {
    /// Baseline's smoothed final loss.
    pub target_loss: f64,
    /// First (interpolated) step where the smoothed variant reaches it.
    pub crossing_step: f64,
    pub savings_pct: f64,
}

/// Percentage of the baseline's steps the variant saves in reaching the
/// baseline's final loss. Both curves are `(step, loss)` on the same grid.
/// Steps are measured from the first grid point, so the result does not
/// change under an affine rescaling of the step axis.
pub fn step_savings(
    baseline: &[(f64, f64)],
    variant: &[(f64, f64)],
    window: usize,
) -> Result<SavingsReport> {
    if baseline.len() < 2 || baseline.len() != variant.len() {
        return Err(Error::Ragged(format!(
            "curves need the same grid of at least 2 points, got {} and {}",
            baseline.len(),
            variant.len()
        )));
    }
    for (i, (b, v)) in baseline.iter().zip(variant).enumerate() {
        if b.0 != v.0 {
            return Err(Error::Ragged(format!("grid differs at point {i}: {} vs {}", b.0, v.0)));
        }
        if i > 0 && b.0 <= baseline[i - 1].0 {
            return Err(Error::Ragged(format!("steps not increasing at point {i}")));
        }
    }
    let steps: Vec<f64> = baseline.iter().map(|p| p.0).collect();
    let sb = smooth(&baseline.iter().map(|p| p.1).collect::<Vec<_>>(), window);
    let sv = smooth(&variant.iter().map(|p| p.1).collect::<Vec<_>>(), window);
    let target = *sb.last().unwrap();
    let j = sv
        .iter()
        .position(|&v| v <= target)
        .ok_or(Error::TargetUnreached)?;
    let crossing = if j == 0 {
        steps[0]
    } else {
        let (x0, x1, y0, y1) = (steps[j - 1], steps[j], sv[j - 1], sv[j]);
        x0 + (y0 - target) / (y0 - y1) * (x1 - x0)
    };
    let origin = steps[0];
    let span = steps[steps.len() - 1] - origin;
    Ok(SavingsReport {
        target_loss: target,
        crossing_step: crossing,
        savings_pct: 100.0 * (1.0 - (crossing - origin) / span),
    })
}

/// `(step, val_loss)` pairs of the records that carry a validation loss.
pub fn validation_curve(records: &[MetricRecord]) -> Vec<(f64, f64)> {
    records
        .iter()
        .filter_map(|r| r.val_loss.map(|v| (r.step as f64, v)))
        .collect()
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const EP_LOAD_FILE: &str = "ep_load.csv";
pub const LOGIT_RANKS_FILE: &str = "logit_ranks.json";
pub const SAVINGS_FILE: &str = "savings.json";

fn metrics_header(ep: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "step", "loss", "val_loss", "lr", "aux_loss", "z_loss", "dropped_frac", "grad_norm",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((0..ep).map(|g| format!("ep_load_{g}")));
    h
}

fn fraction(v: f64) -> String {
    format!("{v:.6}")
}

/// Writes `metrics.csv` rows to any writer. Losses, learning rate and norms
/// use shortest round-trip formatting; load fractions use 6 decimals.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
    ep: usize,
}

impl MetricsWriter<File> {
    pub fn create(path: &Path, ep: usize) -> Result<Self> {
        Self::new(File::create(path)?, ep)
    }
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(w: W, ep: usize) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(w);
        inner.write_record(metrics_header(ep))?;
        Ok(MetricsWriter { inner, ep })
    }

    pub fn write(&mut self, r: &MetricRecord) -> Result<()> {
        if r.ep_load.len() != self.ep {
            return Err(Error::Ragged(format!(
                "record has {} load groups, file has {}",
                r.ep_load.len(),
                self.ep
            )));
        }
        let mut row = vec![
            r.step.to_string(),
            r.loss.to_string(),
            r.val_loss.map(|v| v.to_string()).unwrap_or_default(),
            r.lr.to_string(),
            r.aux_loss.to_string(),
            r.z_loss.to_string(),
            r.dropped_frac.to_string(),
            r.grad_norm.to_string(),
        ];
        row.extend(r.ep_load.iter().map(|&v| fraction(v)));
        self.inner.write_record(row)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

fn metrics_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Metrics {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Parses a `metrics.csv` written by [`MetricsWriter`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    let ep = header.len().checked_sub(8).ok_or_else(|| metrics_err(path, "too few columns"))?;
    if header.iter().collect::<Vec<_>>() != metrics_header(ep) {
        return Err(metrics_err(path, format!("unexpected header {header:?}")));
    }
    let num = |s: &str, line: usize| -> Result<f64> {
        s.parse()
            .map_err(|_| metrics_err(path, format!("line {line}: bad number `{s}`")))
    };
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let step = rec[0]
            .parse()
            .map_err(|_| metrics_err(path, format!("line {line}: bad step `{}`", &rec[0])))?;
        let val_loss = match &rec[2] {
            "" => None,
            s => Some(num(s, line)?),
        };
        out.push(MetricRecord {
            step,
            loss: num(&rec[1], line)?,
            val_loss,
            lr: num(&rec[3], line)?,
            aux_loss: num(&rec[4], line)?,
            z_loss: num(&rec[5], line)?,
            dropped_frac: num(&rec[6], line)?,
            grad_norm: num(&rec[7], line)?,
            ep_load: (8..8 + ep).map(|c| num(&rec[c], line)).collect::<Result<_>>()?,
        });
    }
    Ok(out)
}

/// One row of `ep_load.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpLoadRow {
    pub step: usize,
    pub group: usize,
    pub fraction: f64,
}

pub fn write_ep_load(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "group", "fraction"])?;
    for r in records {
        for (g, &f) in r.ep_load.iter().enumerate() {
            w.write_record([r.step.to_string(), g.to_string(), fraction(f)])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_ep_load(path: &Path) -> Result<Vec<EpLoadRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

pub fn write_logit_ranks(path: &Path, snapshots: &[LogitRankSnapshot]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, snapshots)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_logit_ranks(path: &Path) -> Result<Vec<LogitRankSnapshot>> {
    Ok(serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?)
}

/// Writes `metrics.csv`, `ep_load.csv` and `logit_ranks.json` into `dir`.
pub fn export(records: &[MetricRecord], snapshots: &[LogitRankSnapshot], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let ep = records.first().map_or(0, |r| r.ep_load.len());
    let mut w = MetricsWriter::create(&dir.join(METRICS_FILE), ep)?;
    for r in records {
        w.write(r)?;
    }
    w.flush()?;
    write_ep_load(&dir.join(EP_LOAD_FILE), records)?;
    write_logit_ranks(&dir.join(LOGIT_RANKS_FILE), snapshots)
}

/// Files produced by [`analyze_run`].
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeOutput {
    pub ep_load: PathBuf,
    pub logit_ranks: Option<PathBuf>,
    pub savings: Option<(PathBuf, SavingsReport)>,
}

/// Re-derives the plot files from a run directory's `metrics.csv` and,
/// given a baseline run, writes `savings.json`.
pub fn analyze_run(run: &Path, baseline: Option<&Path>, window: usize) -> Result<AnalyzeOutput> {
    let records = read_metrics(&run.join(METRICS_FILE))?;
    let ep_load = run.join(EP_LOAD_FILE);
    write_ep_load(&ep_load, &records)?;
    let ranks = run.join(LOGIT_RANKS_FILE);
    let logit_ranks = if ranks.exists() {
        let snaps = read_logit_ranks(&ranks)?;
        write_logit_ranks(&ranks, &snaps)?;
        Some(ranks)
    } else {
        None
    };
    let savings = match baseline {
        None => None,
        Some(b) => {
            let base = read_metrics(&b.join(METRICS_FILE))?;
            let report = step_savings(&validation_curve(&base), &validation_curve(&records), window)?;
            let path = run.join(SAVINGS_FILE);
            let mut f = File::create(&path)?;
            serde_json::to_writer_pretty(&mut f, &report)?;
            f.write_all(b"\n")?;
            Some((path, report))
        }
    };
    Ok(AnalyzeOutput {
        ep_load,
        logit_ranks,
        savings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn decision(n: usize, k: usize, experts: Vec<usize>) -> RoutingDecision {
        let len = experts.len();
        RoutingDecision::from_selections(n, k, experts, vec![0.5; len]).unwrap()
    }

    #[test]
    fn ep_load_examples() {
        let d = decision(64, 8, (0..64).collect());
        assert_eq!(ep_load_fractions(&d, 8).unwrap(), vec![0.125; 8]);
        let d = decision(64, 1, vec![0; 10]);
        let f = ep_load_fractions(&d, 8).unwrap();
        assert_eq!(f[0], 1.0);
        assert!(f[1..].iter().all(|&v| v == 0.0));
        // 4 groups of 2 experts; counts 7, 5, 3, 1
        let mut e = vec![0; 7];
        e.extend([2, 3, 2, 3, 2]);
        e.extend([4, 5, 4]);
        e.push(7);
        let d = decision(8, 1, e);
        assert_eq!(ep_load_fractions(&d, 4).unwrap(), vec![0.4375, 0.3125, 0.1875, 0.0625]);
        assert!(matches!(ep_load_fractions(&d, 3), Err(Error::NotDivisible(3, 8))));
    }

    #[test]
    fn rank_median_examples() {
        let s = logit_rank_medians(&[vec![0.7, 0.3], vec![0.5, 0.5]], 1, 10).unwrap();
        assert_abs_diff_eq!(s.medians[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(s.medians[1], 0.4, epsilon = 1e-15);
        assert_eq!((s.layer, s.step), (1, 10));
        let s = logit_rank_medians(&vec![vec![1.0, 0.0, 0.0]; 5], 0, 0).unwrap();
        assert_eq!(s.medians, vec![1.0, 0.0, 0.0]);
        let s = logit_rank_medians(&[vec![0.6, 0.3, 0.1]], 0, 0).unwrap();
        assert_eq!(s.medians, vec![0.6, 0.3, 0.1]);
        assert!(matches!(logit_rank_medians(&[vec![0.5], vec![0.3, 0.2]], 0, 0), Err(Error::Ragged(_))));
        assert!(logit_rank_medians(&[], 0, 0).is_err());
    }

    fn curve(f: impl Fn(f64) -> f64, n: usize, step: f64) -> Vec<(f64, f64)> {
        (0..=n).map(|i| (i as f64 * step, f(i as f64 * step))).collect()
    }

    #[test]
    fn savings_linear_and_identical() {
        let b = curve(|t| 3.0 - t / 100.0, 20, 5.0);
        let v = curve(|t| 3.0 - t / 80.0, 20, 5.0);
        let r = step_savings(&b, &v, 5).unwrap();
        assert_abs_diff_eq!(r.target_loss, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.crossing_step, 80.0, epsilon = 1e-9);
        assert_abs_diff_eq!(r.savings_pct, 20.0, epsilon = 1e-9);
        let r = step_savings(&b, &b, 5).unwrap();
        assert_abs_diff_eq!(r.savings_pct, 0.0, epsilon = 1e-12);
        let worse = curve(|t| 3.0 - t / 200.0, 20, 5.0);
        assert!(matches!(step_savings(&b, &worse, 5), Err(Error::TargetUnreached)));
        assert!(step_savings(&b, &v[..5], 5).is_err());
    }

    #[test]
    fn smoothing_keeps_lines() {
        let v: Vec<f64> = (0..9).map(|i| 2.0 * i as f64 + 1.0).collect();
        for w in [1, 3, 5, 7] {
            for (a, b) in smooth(&v, w).iter().zip(&v) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
            }
        }
        assert_eq!(smooth(&[1.0, 5.0, 3.0], 3), vec![1.0, 3.0, 3.0]);
    }

    fn record(step: usize, ep: Vec<f64>, val: Option<f64>) -> MetricRecord {
        MetricRecord {
            step,
            loss: 3.25 - step as f64 * 1e-3,
            val_loss: val,
            lr: 2e-4 * step as f64 / 7.0,
            aux_loss: 1.0 + 1.0 / 3.0,
            z_loss: 0.1,
            dropped_frac: 0.0625,
            grad_norm: 0.7,
            ep_load: ep,
        }
    }

    #[test]
    fn export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ep = vec![1.0 / 3.0, 1.0 / 6.0, 0.125, 0.125, 0.0625, 0.0625, 0.0625, 0.0625];
        let records: Vec<MetricRecord> = (1..=4)
            .map(|s| record(s, ep.clone(), (s % 2 == 0).then_some(3.0 / s as f64)))
            .collect();
        let snaps = vec![LogitRankSnapshot { step: 2, layer: 0, medians: vec![0.6, 0.4] }];
        export(&records, &snaps, dir.path()).unwrap();
        let back = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(back.len(), 4);
        for (a, b) in back.iter().zip(&records) {
            assert_eq!(a.step, b.step);
            assert_eq!(a.loss, b.loss);
            assert_eq!(a.val_loss, b.val_loss);
            assert_eq!(a.lr, b.lr);
            assert_eq!(a.ep_load.len(), 8);
            assert!((a.ep_load.iter().sum::<f64>() - 1.0).abs() <= 5e-6);
        }
        let text = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert!(text.starts_with("step,loss,val_loss,lr,aux_loss,z_loss,dropped_frac,grad_norm,ep_load_0,"));
        assert!(text.lines().next().unwrap().ends_with("ep_load_7"));
        let rows = read_ep_load(&dir.path().join(EP_LOAD_FILE)).unwrap();
        assert_eq!(rows.len(), 32);
        assert_eq!(rows[0], EpLoadRow { step: 1, group: 0, fraction: 0.333333 });
        assert_eq!(read_logit_ranks(&dir.path().join(LOGIT_RANKS_FILE)).unwrap(), snaps);
    }

    #[test]
    fn analyze_with_baseline() {
        let base_dir = tempfile::tempdir().unwrap();
        let run_dir = tempfile::tempdir().unwrap();
        let ep = vec![0.5, 0.5];
        let base: Vec<MetricRecord> = (0..=20).map(|i| record(i * 5, ep.clone(), Some(3.0 - i as f64 * 5.0 / 100.0))).collect();
        let run: Vec<MetricRecord> = (0..=20).map(|i| record(i * 5, ep.clone(), Some(3.0 - i as f64 * 5.0 / 80.0))).collect();
        export(&base, &[], base_dir.path()).unwrap();
        export(&run, &[], run_dir.path()).unwrap();
        let out = analyze_run(run_dir.path(), Some(base_dir.path()), 5).unwrap();
        let (path, report) = out.savings.unwrap();
        assert_abs_diff_eq!(report.savings_pct, 20.0, epsilon = 1e-9);
        let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        assert!(json.get("target_loss").is_some() && json.get("crossing_step").is_some());
    }

    #[test]
    fn malformed_metrics_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(METRICS_FILE);
        std::fs::write(&p, "step,loss\n1,2\n").unwrap();
        assert!(matches!(read_metrics(&p), Err(Error::Metrics { .. })));
        std::fs::write(&p, "step,loss,val_loss,lr,aux_loss,z_loss,dropped_frac,grad_norm\n1,x,,0,0,0,0,0\n").unwrap();
        assert!(matches!(read_metrics(&p), Err(Error::Metrics { .. })));
    }

    proptest! {
        #[test]
        fn ep_load_sums_to_one(experts in proptest::collection::vec(0usize..16, 1..200), ep_pow in 0u32..5) {
            let ep = 1usize << ep_pow;
            let d = decision(16, 1, experts);
            let f = ep_load_fractions(&d, ep).unwrap();
            prop_assert!((f.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(f.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn savings_affine_invariant(a in 0.1f64..50.0, b in -1000.0f64..1000.0, slope in 60.0f64..99.0) {
            let base = curve(|t| 3.0 - t / 100.0 + 0.05 * (t / 7.0).sin(), 40, 2.5);
            let var = curve(|t| 3.0 - t / slope + 0.05 * (t / 5.0).cos(), 40, 2.5);
            let r0 = step_savings(&base, &var, 5).unwrap();
            let tr = |c: &[(f64, f64)]| c.iter().map(|&(s, l)| (a * s + b, l)).collect::<Vec<_>>();
            let r1 = step_savings(&tr(&base), &tr(&var), 5).unwrap();
            prop_assert!((r0.savings_pct - r1.savings_pct).abs() < 1e-6);
        }

        #[test]
        fn rank_one_median_dominates_sorted_gates(raw in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 3), 1..30)) {
            let gates: Vec<Vec<f64>> = raw.into_iter().map(|mut g| {
                let s: f64 = g.iter().sum::<f64>() + 1e-9;
                g.iter_mut().for_each(|v| *v /= s);
                g.sort_by(|a, b| b.total_cmp(a));
                g
            }).collect();
            let m = logit_rank_medians(&gates, 0, 0).unwrap().medians;
            prop_assert!(m.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(m.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
