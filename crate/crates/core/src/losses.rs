//! Cross-entropy, the three-way Jensen-Shannon consistency loss, and their sum.

use mngac_tensor::{CustomOp, Graph, NodeId, Real, Tensor};

use crate::error::{invalid, Result};

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

fn check_labels(logits: &Tensor<impl Real>, labels: &[usize]) -> Result<()> {
    if logits.shape().len() != 2 {
        return Err(invalid(format!("logits must be [batch, classes], got {:?}", logits.shape())));
    }
    if logits.shape()[0] != labels.len() {
        return Err(invalid(format!("{} logit rows for {} labels", logits.shape()[0], labels.len())));
    }
    let c = logits.shape()[1];
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(invalid(format!("label {bad} out of range for {c} classes")));
    }
    Ok(())
}

fn log_softmax_row<T: Real>(row: &[T]) -> Vec<T> {
    let m = row.iter().copied().fold(row[0], T::max_by_primal);
    let mut s = T::zero();
    for &v in row {
        s += (v - m).exp();
    }
    let lse = m + s.ln();
    row.iter().map(|&v| v - lse).collect()
}

pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let mut out = Vec::with_capacity(logits.len());
    for i in 0..logits.batch() {
        out.extend(log_softmax_row(logits.sample(i)).into_iter().map(T::exp));
    }
    Tensor::from_vec(logits.shape(), out)
}

/// Cross-entropy of each row.
pub fn per_example_ce(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    check_labels(logits, labels)?;
    Ok(labels.iter().enumerate().map(|(i, &y)| -log_softmax_row(logits.sample(i))[y]).collect())
}

/// Mean cross-entropy over the batch.
pub fn cls_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let l = per_example_ce(logits, labels)?;
    Ok(l.iter().sum::<f64>() / l.len().max(1) as f64)
}

/// Mean cross-entropy as a tape node.
pub fn cls_loss_node<T: Real>(g: &mut Graph<T>, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let lv = g.value(logits);
    check_labels(lv, labels)?;
    let n = labels.len().max(1) as f64;
    let mut total = T::zero();
    let mut probs = Vec::with_capacity(lv.len());
    for (i, &y) in labels.iter().enumerate() {
        let ls = log_softmax_row(lv.sample(i));
        total -= ls[y];
        probs.extend(ls.into_iter().map(T::exp));
    }
    let probs = Tensor::from_vec(lv.shape(), probs);
    let op = CeOp { labels: labels.to_vec(), probs };
    Ok(g.custom(&[logits], Tensor::scalar(total.scale(1.0 / n)), Box::new(op)))
}

struct CeOp<T> {
    labels: Vec<usize>,
    probs: Tensor<T>,
}

impl<T: Real> CustomOp<T> for CeOp<T> {
    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>, _needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let s = grad.item().scale(1.0 / self.labels.len().max(1) as f64);
        let mut gl = self.probs.clone();
        let c = gl.sample_len();
        for (i, &y) in self.labels.iter().enumerate() {
            gl.data_mut()[i * c + y] -= T::one();
        }
        vec![Some(gl.map(|v| v * s))]
    }
}

/// Clean, adversarial and augmented posteriors, each `[batch, classes]`.
#[derive(Clone, Debug)]
pub struct PosteriorTriple {
    pub clean: Tensor,
    pub adv: Tensor,
    pub aug: Tensor,
}

impl PosteriorTriple {
    pub fn new(clean: Tensor, adv: Tensor, aug: Tensor) -> Result<Self> {
        for t in [&clean, &adv, &aug] {
            if t.shape().len() != 2 || t.shape() != clean.shape() {
                return Err(invalid("posteriors must share a [batch, classes] shape"));
            }
            for i in 0..t.batch() {
                let row = t.sample(i);
                if row.iter().any(|&p| p.is_nan() || p < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-5 {
                    return Err(invalid(format!("row {i} is not a probability vector")));
                }
            }
        }
        Ok(PosteriorTriple { clean, adv, aug })
    }

    pub fn from_logits(clean: &Tensor, adv: &Tensor, aug: &Tensor) -> Result<Self> {
        Self::new(softmax_rows(clean), softmax_rows(adv), softmax_rows(aug))
    }
}

fn jsd_rows<T: Real>(ps: [&[T]; 3]) -> T {
    let mut total = T::zero();
    for c in 0..ps[0].len() {
        let m = (ps[0][c] + ps[1][c] + ps[2][c]).scale(1.0 / 3.0);
        let lm = floor(m).ln();
        for p in ps {
            total += p[c] * (floor(p[c]).ln() - lm);
        }
    }
    total.scale(1.0 / 3.0)
}

fn floor<T: Real>(p: T) -> T {
    if p.primal() < PROB_FLOOR {
        T::from_f64(PROB_FLOOR)
    } else {
        p
    }
}

/// Jensen-Shannon divergence among three posteriors, natural log, batch mean.
pub fn ac_loss(t: &PosteriorTriple) -> f64 {
    let n = t.clean.batch();
    let mut total = 0.0;
    for i in 0..n {
        total += jsd_rows([t.clean.sample(i), t.adv.sample(i), t.aug.sample(i)]);
    }
    total / n.max(1) as f64
}

/// Jensen-Shannon consistency loss computed from three logit nodes.
pub fn ac_loss_node<T: Real>(g: &mut Graph<T>, clean: NodeId, adv: NodeId, aug: NodeId) -> Result<NodeId> {
    let shape = g.value(clean).shape().to_vec();
    if shape.len() != 2 || g.value(adv).shape() != shape.as_slice() || g.value(aug).shape() != shape.as_slice() {
        return Err(invalid("consistency loss needs three [batch, classes] logit tensors of equal shape"));
    }
    let probs = [softmax_rows(g.value(clean)), softmax_rows(g.value(adv)), softmax_rows(g.value(aug))];
    let n = shape[0];
    let mut total = T::zero();
    for i in 0..n {
        total += jsd_rows([probs[0].sample(i), probs[1].sample(i), probs[2].sample(i)]);
    }
    let out = Tensor::scalar(total.scale(1.0 / n.max(1) as f64));
    Ok(g.custom(&[clean, adv, aug], out, Box::new(JsdOp { probs })))
}

struct JsdOp<T> {
    probs: [Tensor<T>; 3],
}

impl<T: Real> CustomOp<T> for JsdOp<T> {
    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>, _needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let [p0, p1, p2] = &self.probs;
        let (n, c) = (p0.batch(), p0.sample_len());
        let s = grad.item().scale(1.0 / (3.0 * n.max(1) as f64));
        let mut outs = [p0.zeros_like(), p1.zeros_like(), p2.zeros_like()];
        for i in 0..n {
            let rows = [p0.sample(i), p1.sample(i), p2.sample(i)];
            let mut dm = vec![T::zero(); c];
            let mut lm = vec![T::zero(); c];
            for j in 0..c {
                let sum = rows[0][j] + rows[1][j] + rows[2][j];
                let m = sum.scale(1.0 / 3.0);
                lm[j] = floor(m).ln();
                if m.primal() >= PROB_FLOOR {
                    dm[j] = sum / (m.scale(3.0));
                }
            }
            for (k, row) in rows.iter().enumerate() {
                let mut gp = vec![T::zero(); c];
                for j in 0..c {
                    let p = row[j];
                    let own = if p.primal() >= PROB_FLOOR { T::one() } else { p / T::from_f64(PROB_FLOOR) };
                    gp[j] = (floor(p).ln() - lm[j] + own - dm[j]) * s;
                }
                let mut dot = T::zero();
                for j in 0..c {
                    dot += row[j] * gp[j];
                }
                let dst = outs[k].sample_mut(i);
                for j in 0..c {
                    dst[j] = row[j] * (gp[j] - dot);
                }
            }
        }
        outs.into_iter().map(Some).collect()
    }
}

/// `cls + beta * ac`.
pub fn total_loss(cls: f64, ac: f64, beta: f64) -> Result<f64> {
    if beta.is_nan() || beta < 0.0 {
        return Err(invalid(format!("beta must be >= 0, got {beta}")));
    }
    Ok(cls + beta * ac)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(v: &[&[f64]]) -> Tensor {
        let c = v[0].len();
        Tensor::from_vec(&[v.len(), c], v.concat())
    }

    #[test]
    fn ce_closed_forms() {
        assert!((cls_loss(&rows(&[&[0.0, 0.0, 0.0, 0.0]]), &[2]).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!(cls_loss(&rows(&[&[800.0, 0.0]]), &[0]).unwrap().abs() < 1e-300);
        assert!(cls_loss(&rows(&[&[0.0, 0.0]]), &[2]).is_err());
    }

    #[test]
    fn jsd_extremes() {
        let a = rows(&[&[0.2, 0.3, 0.5]]);
        assert_eq!(ac_loss(&PosteriorTriple::new(a.clone(), a.clone(), a).unwrap()), 0.0);
        let t = PosteriorTriple::new(rows(&[&[1.0, 0.0, 0.0]]), rows(&[&[0.0, 1.0, 0.0]]), rows(&[&[0.0, 0.0, 1.0]])).unwrap();
        assert!((ac_loss(&t) - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(1.0, 0.5, 2.0).unwrap(), 2.0);
        assert_eq!(total_loss(0.7, 0.0, 12.0).unwrap(), 0.7);
        assert!(total_loss(1.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn node_values_match_plain() {
        let l = rows(&[&[2.0, 1.0, 0.0], &[-1.0, 0.5, 3.0]]);
        let l2 = l.scale(0.5);
        let l3 = l.map(|v| v * v * 0.1);
        let mut g = Graph::<f64>::new();
        let (a, b, c) = (g.constant(l.clone()), g.constant(l2.clone()), g.constant(l3.clone()));
        let ce = cls_loss_node(&mut g, a, &[0, 2]).unwrap();
        let js = ac_loss_node(&mut g, a, b, c).unwrap();
        assert!((g.value(ce).item() - cls_loss(&l, &[0, 2]).unwrap()).abs() < 1e-15);
        let t = PosteriorTriple::from_logits(&l, &l2, &l3).unwrap();
        assert!((g.value(js).item() - ac_loss(&t)).abs() < 1e-15);
    }
}
