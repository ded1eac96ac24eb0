//! Robust accuracy metrics and loss-landscape grids.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{norm_of_attack, Attack};
use crate::error::{invalid, Error, Result};
use crate::io::config::ExperimentConfig;
use crate::io::data::Dataset;
use crate::io::run::{evaluate_model, train};
use crate::losses::per_example_ce;
use crate::models::Model;
use crate::tensor::Tensor;
use crate::trainer::Method;

/// Marks landscape cells whose loss is not finite.
pub const LANDSCAPE_SENTINEL: f64 = -1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc_clean: f64,
    pub per_attack: BTreeMap<String, f64>,
    /// Fraction of examples correct under every attack.
    pub acc_union: f64,
    /// Mean of the per-attack accuracies.
    pub acc_avg: f64,
    /// Mean over norm groups of the per-group union accuracy.
    pub acc_avg_norm_groups: f64,
    pub n: usize,
    pub config_fingerprint: String,
}

impl MetricsReport {
    /// `acc_union <= min <= acc_avg <= max` over the per-attack accuracies.
    pub fn is_ordered(&self) -> bool {
        let vals: Vec<f64> = self.per_attack.values().copied().collect();
        let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let tol = 1e-12;
        self.acc_union <= min + tol && min <= self.acc_avg + tol && self.acc_avg <= max + tol
    }

    /// Aligned two-column text table.
    pub fn table(&self) -> String {
        let mut rows: Vec<(String, f64)> = vec![("clean".into(), self.acc_clean)];
        rows.extend(self.per_attack.iter().map(|(k, v)| (k.clone(), *v)));
        rows.push(("union".into(), self.acc_union));
        rows.push(("avg".into(), self.acc_avg));
        rows.push(("avg_norm_groups".into(), self.acc_avg_norm_groups));
        let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max("metric".len());
        let mut out = format!("{:<w$}  accuracy\n", "metric");
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<w$}  {:>7.2}%", 100.0 * v);
        }
        let _ = writeln!(out, "{:<w$}  {}", "n", self.n);
        out
    }
}

/// Per-example correctness, one column per attack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectnessMatrix {
    pub attacks: Vec<String>,
    pub groups: Vec<String>,
    pub clean: Vec<bool>,
    /// `rows[i][j]`: example `i` classified correctly under attack `j`.
    pub rows: Vec<Vec<bool>>,
}

fn mean(it: impl Iterator<Item = bool>) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for b in it {
        hit += b as usize;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

impl CorrectnessMatrix {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,clean");
        for a in &self.attacks {
            out.push(',');
            out.push_str(a);
        }
        out.push('\n');
        for (i, (c, row)) in self.clean.iter().zip(&self.rows).enumerate() {
            let _ = write!(out, "{i},{}", *c as u8);
            for b in row {
                let _ = write!(out, ",{}", *b as u8);
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty correctness csv".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 2 || cols[0] != "index" || cols[1] != "clean" {
            return Err(Error::Format(format!("bad correctness header {header:?}")));
        }
        let attacks: Vec<String> = cols[2..].iter().map(|s| s.to_string()).collect();
        let bit = |s: &str| match s {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(Error::Format(format!("bad cell {s:?}"))),
        };
        let (mut clean, mut rows) = (Vec::new(), Vec::new());
        for line in lines {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != cols.len() {
                return Err(Error::Format(format!("row has {} cells, expected {}", cells.len(), cols.len())));
            }
            clean.push(bit(cells[1])?);
            rows.push(cells[2..].iter().map(|c| bit(c)).collect::<Result<Vec<_>>>()?);
        }
        let groups = attacks.iter().map(|a| norm_of_attack(a).map(|n| n.to_string()).unwrap_or_else(|_| a.clone())).collect();
        Ok(CorrectnessMatrix { attacks, groups, clean, rows })
    }

    pub fn report(&self, fingerprint: &str) -> MetricsReport {
        let k = self.attacks.len();
        let per_attack: BTreeMap<String, f64> = (0..k).map(|j| (self.attacks[j].clone(), mean(self.rows.iter().map(|r| r[j])))).collect();
        let acc_avg = if k == 0 { 0.0 } else { (0..k).map(|j| mean(self.rows.iter().map(|r| r[j]))).sum::<f64>() / k as f64 };
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (j, g) in self.groups.iter().enumerate() {
            groups.entry(g).or_default().push(j);
        }
        let group_acc: Vec<f64> = groups.values().map(|cols| mean(self.rows.iter().map(|r| cols.iter().all(|&j| r[j])))).collect();
        let acc_avg_norm_groups = if group_acc.is_empty() { 0.0 } else { group_acc.iter().sum::<f64>() / group_acc.len() as f64 };
        MetricsReport {
            acc_clean: mean(self.clean.iter().copied()),
            per_attack,
            acc_union: mean(self.rows.iter().map(|r| r.iter().all(|&b| b))),
            acc_avg,
            acc_avg_norm_groups,
            n: self.rows.len(),
            config_fingerprint: fingerprint.to_string(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub matrix: CorrectnessMatrix,
    pub wall_time_seconds: f64,
}

/// Random stream for attack `index` of an evaluation seeded by `seed`.
pub fn attack_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Runs every attack on every example of `data` in batches of `batch_size`.
pub fn evaluate<M: Model + ?Sized>(model: &M, data: &Dataset, suite: &[Attack], seed: u64, batch_size: usize, fingerprint: &str) -> Result<Evaluation> {
    if suite.is_empty() {
        return Err(invalid("attack suite is empty"));
    }
    if batch_size == 0 || data.is_empty() {
        return Err(invalid("need a nonempty dataset and batch size >= 1"));
    }
    let start = std::time::Instant::now();
    let n = data.len();
    let mut clean = Vec::with_capacity(n);
    let mut rows = vec![Vec::with_capacity(suite.len()); n];
    let mut rngs: Vec<ChaCha8Rng> = (0..suite.len()).map(|j| attack_rng(seed, j)).collect();
    for lo in (0..n).step_by(batch_size) {
        let idx: Vec<usize> = (lo..(lo + batch_size).min(n)).collect();
        let (x, y) = data.batch(&idx);
        let pred = model.predict(&x)?;
        clean.extend(pred.iter().zip(&y).map(|(p, t)| p == t));
        for (j, attack) in suite.iter().enumerate() {
            let adv = attack
                .run(model, &x, &y, &mut rngs[j])
                .map_err(|e| Error::Numeric(format!("{} on examples {}..{}: {e}", attack.name(), lo, lo + idx.len())))?;
            let pred = model.predict(&adv)?;
            for (k, &i) in idx.iter().enumerate() {
                rows[i].push(pred[k] == y[k]);
            }
        }
    }
    let matrix =
        CorrectnessMatrix { attacks: suite.iter().map(|a| a.name().to_string()).collect(), groups: suite.iter().map(Attack::group).collect(), clean, rows };
    let report = matrix.report(fingerprint);
    Ok(Evaluation { report, matrix, wall_time_seconds: start.elapsed().as_secs_f64() })
}

/// One MNG-AC run per `beta` with the seeds of `cfg`, evaluated on its eval suite.
pub fn beta_sweep(cfg: &ExperimentConfig, betas: &[f64]) -> Result<Vec<(f64, MetricsReport)>> {
    if betas.is_empty() {
        return Err(invalid("no beta values given"));
    }
    let mut out = Vec::with_capacity(betas.len());
    for &beta in betas {
        let mut c = cfg.clone();
        c.method = Method::MngAc;
        c.trainer.beta = beta;
        c.validate()?;
        let (trainer, test, _) = train(&c)?;
        let ev = evaluate_model(&c, &trainer.state.theta, &test, &c.attacks.eval)?;
        out.push((beta, ev.report));
    }
    Ok(out)
}

/// Aligned table of a sweep, one row per beta.
pub fn sweep_table(rows: &[(f64, MetricsReport)]) -> String {
    let mut out = format!("{:>6}  {:>7}  {:>7}  {:>7}\n", "beta", "clean", "union", "avg");
    for (b, r) in rows {
        let _ = writeln!(out, "{b:>6}  {:>6.2}%  {:>6.2}%  {:>6.2}%", 100.0 * r.acc_clean, 100.0 * r.acc_union, 100.0 * r.acc_avg);
    }
    out
}

/// Unit-l2 loss gradient at `x`, and the loss gradient at `x2` made orthogonal to it.
pub fn landscape_directions<M: Model + ?Sized>(model: &M, x: &Tensor, label: usize, x2: &Tensor, label2: usize) -> Result<(Tensor, Tensor)> {
    let unit = |t: Tensor| -> Result<Tensor> {
        let n = t.norm2();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::Numeric(format!("cannot normalise direction with norm {n}")));
        }
        Ok(t.scale(1.0 / n))
    };
    let d1 = unit(model.input_gradient(x, &[label])?.1)?;
    let g2 = model.input_gradient(x2, &[label2])?.1;
    let d2 = unit(g2.sub(&d1.scale(g2.dot(&d1))))?;
    Ok((d1, d2))
}

/// Coordinate of grid index `i` on `[-extent, extent]`.
pub fn grid_coord(extent: f64, i: usize, resolution: usize) -> f64 {
    let r = resolution as f64 - 1.0;
    extent * (2.0 * i as f64 - r) / r
}

/// `grid[i][j] = CE(x + a_i dir1 + b_j dir2)` for a single example `x` of shape `[1, c, h, w]`.
#[allow(clippy::too_many_arguments)]
pub fn loss_landscape_grid<M: Model + ?Sized>(
    model: &M,
    x: &Tensor,
    label: usize,
    dir1: &Tensor,
    dir2: &Tensor,
    extent: f64,
    resolution: usize,
) -> Result<Vec<Vec<f64>>> {
    if resolution < 3 {
        return Err(invalid(format!("resolution must be >= 3, got {resolution}")));
    }
    if !(extent >= 0.0 && extent.is_finite()) {
        return Err(invalid(format!("extent must be finite and >= 0, got {extent}")));
    }
    if x.batch() != 1 || dir1.shape() != x.shape() || dir2.shape() != x.shape() {
        return Err(invalid("landscape needs one example and directions of the same shape"));
    }
    let d = x.len();
    let mut shape = x.shape().to_vec();
    shape[0] = resolution;
    let mut grid = Vec::with_capacity(resolution);
    for i in 0..resolution {
        let a = grid_coord(extent, i, resolution);
        let mut buf = Vec::with_capacity(resolution * d);
        for j in 0..resolution {
            let b = grid_coord(extent, j, resolution);
            buf.extend((0..d).map(|k| x.data()[k] + a * dir1.data()[k] + b * dir2.data()[k]));
        }
        let logits = model.logits(&Tensor::from_vec(&shape, buf))?;
        let losses = per_example_ce(&logits, &vec![label; resolution])?;
        grid.push(losses.into_iter().map(|l| if l.is_finite() { l } else { LANDSCAPE_SENTINEL }).collect());
    }
    Ok(grid)
}

pub fn grid_to_csv(grid: &[Vec<f64>], extent: f64) -> String {
    let r = grid.len();
    let mut out = String::from("a,b,loss\n");
    for (i, row) in grid.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", grid_coord(extent, i, r), grid_coord(extent, j, r), v);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix() -> CorrectnessMatrix {
        CorrectnessMatrix {
            attacks: vec!["a".into(), "b".into(), "c".into()],
            groups: vec!["linf".into(), "linf".into(), "l2".into()],
            clean: vec![true, true, false, true],
            rows: vec![vec![true, true, true], vec![true, false, true], vec![false, false, false], vec![true, true, false]],
        }
    }

    #[test]
    fn report_arithmetic() {
        let r = matrix().report("fp");
        assert_eq!(r.acc_clean, 0.75);
        assert_eq!(r.per_attack["a"], 0.75);
        assert_eq!(r.per_attack["b"], 0.5);
        assert_eq!(r.per_attack["c"], 0.5);
        assert_eq!(r.acc_union, 0.25);
        assert!((r.acc_avg - 1.75 / 3.0).abs() < 1e-15);
        assert_eq!(r.acc_avg_norm_groups, 0.5);
        assert!(r.is_ordered());
    }

    #[test]
    fn csv_round_trip() {
        let m = matrix();
        let back = CorrectnessMatrix::from_csv(&m.to_csv()).unwrap();
        assert_eq!(back.rows, m.rows);
        assert_eq!(back.clean, m.clean);
        assert_eq!(back.attacks, m.attacks);
    }

    #[test]
    fn grid_coords_span_extent() {
        assert_eq!(grid_coord(2.0, 0, 5), -2.0);
        assert_eq!(grid_coord(2.0, 2, 5), 0.0);
        assert_eq!(grid_coord(2.0, 4, 5), 2.0);
    }

    #[test]
    fn table_lists_every_row() {
        let t = matrix().report("fp").table();
        for k in ["clean", "a", "b", "c", "union", "avg"] {
            assert!(t.lines().any(|l| l.starts_with(k)), "{k}");
        }
    }
}
