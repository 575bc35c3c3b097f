use serde::{Deserialize, Serialize};

use super::{ContrastiveBatch, SyncerModel, SCORE_EPS};
use crate::diffnum::{Bound, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// How the contrastive softmax enters the loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfoNceForm {
    /// `-log softmax_pos`
    #[default]
    Log,
    /// `-softmax_pos`, without the logarithm.
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Objective {
    InfoNce { form: InfoNceForm },
    Triplet { margin: f64 },
}

impl Default for Objective {
    fn default() -> Self {
        Objective::InfoNce { form: InfoNceForm::Log }
    }
}

/// Contrastive loss from positive scores `[B]`, negative scores `[B, N]` and
/// a `[1]` logit scale.
pub fn infonce_from_scores(g: &mut Graph, pos: Var, neg: Var, scale: Var, form: InfoNceForm) -> Result<Var> {
    let (ps, ns) = (g.shape(pos).to_vec(), g.shape(neg).to_vec());
    if ns.len() != 2 || ps != [ns[0]] || ns[1] == 0 || ns[0] == 0 {
        return Err(Error::Shape(format!("infonce: positives {ps:?} and negatives {ns:?} (need [B] and [B, N>=1])")));
    }
    let b = ps[0];
    let pos = g.reshape(pos, &[b, 1])?;
    let logits = g.concat(&[pos, neg], 1)?;
    let logits = g.mul(logits, scale)?;
    let ls = g.log_softmax(logits);
    let first = g.slice(ls, 1, 0, 1)?;
    let per = match form {
        InfoNceForm::Log => first,
        InfoNceForm::Literal => g.exp(first),
    };
    let m = g.mean(per);
    Ok(g.neg(m))
}

/// Mean of `max(0, margin - pos + neg)` over every (anchor, negative) pair.
pub fn triplet_from_scores(g: &mut Graph, pos: Var, neg: Var, margin: f64) -> Result<Var> {
    let (ps, ns) = (g.shape(pos).to_vec(), g.shape(neg).to_vec());
    let neg = if ns == ps { g.reshape(neg, &[ps[0], 1])? } else { neg };
    let ns = g.shape(neg).to_vec();
    if ns.len() != 2 || ps != [ns[0]] || ns[0] == 0 {
        return Err(Error::Shape(format!("triplet: positives {ps:?} and negatives {ns:?}")));
    }
    let pos = g.reshape(pos, &[ps[0], 1])?;
    let d = g.sub(neg, pos)?;
    let d = g.add_scalar(d, margin);
    let h = g.relu(d);
    Ok(g.mean(h))
}

/// Positive `[B]` and negative `[B, N]` scores of a mined batch under
/// parameters bound in `p`.
pub(crate) fn batch_scores(g: &mut Graph, m: &SyncerModel, p: &Bound, batch: &ContrastiveBatch) -> Result<(Var, Var)> {
    let (b, n) = (batch.len(), batch.n_neg);
    if b == 0 || n == 0 {
        return Err(Error::Invalid("contrastive batch is empty".into()));
    }
    let a = g.constant(batch.audio.clone());
    let x = g.constant(batch.positive.clone());
    let xn = g.constant(batch.negatives.clone());
    let ea = m.audio_with(g, p, a)?;
    let ex = m.motion_with(g, p, x)?;
    let en = m.motion_with(g, p, xn)?;
    let pos = g.cosine(ea, ex, SCORE_EPS)?;
    let rep: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, n)).collect();
    let ea_rep = g.index_select(ea, 0, &rep)?;
    let neg = g.cosine(ea_rep, en, SCORE_EPS)?;
    let neg = g.reshape(neg, &[b, n])?;
    Ok((pos, neg))
}

/// Contrastive loss of `m` on `batch` with parameters bound in `p`.
pub fn infonce_loss(g: &mut Graph, m: &SyncerModel, p: &Bound, batch: &ContrastiveBatch, form: InfoNceForm) -> Result<Var> {
    let (pos, neg) = batch_scores(g, m, p, batch)?;
    let scale = m.scale_with(g, p);
    infonce_from_scores(g, pos, neg, scale, form)
}

/// Triplet loss of `m` on `batch`, every negative paired with its anchor.
pub fn triplet_loss(g: &mut Graph, m: &SyncerModel, p: &Bound, batch: &ContrastiveBatch, margin: f64) -> Result<Var> {
    let (pos, neg) = batch_scores(g, m, p, batch)?;
    triplet_from_scores(g, pos, neg, margin)
}

pub(crate) fn objective_loss(
    g: &mut Graph,
    m: &SyncerModel,
    p: &Bound,
    batch: &ContrastiveBatch,
    obj: Objective,
) -> Result<Var> {
    match obj {
        Objective::InfoNce { form } => infonce_loss(g, m, p, batch, form),
        Objective::Triplet { margin } => triplet_loss(g, m, p, batch, margin),
    }
}

/// Convenience for tests and reports: the loss value for fixed scores.
pub fn infonce_value(pos: &[f64], neg: &[Vec<f64>], scale: f64, form: InfoNceForm) -> Result<f64> {
    let mut g = Graph::new();
    let n = neg.first().map_or(0, Vec::len);
    let pv = g.constant(Tensor::from_vec(pos.to_vec()));
    let nv = g.constant(Tensor::new(vec![neg.len(), n], neg.concat())?);
    let s = g.constant(Tensor::from_vec(vec![scale]));
    let l = infonce_from_scores(&mut g, pv, nv, s, form)?;
    Ok(g.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_scores_give_log_n_plus_one() {
        let neg = vec![vec![0.25; 12]; 3];
        let l = infonce_value(&[0.25; 3], &neg, 10.0, InfoNceForm::Log).unwrap();
        assert!((l - 13f64.ln()).abs() < 1e-12);
        assert!((l - 2.564_949_357_461_536_6).abs() < 1e-12);
    }

    #[test]
    fn saturated_scores_give_zero_loss() {
        let l = infonce_value(&[1.0], &[vec![-1.0; 12]], 50.0, InfoNceForm::Log).unwrap();
        assert!((0.0..1e-40).contains(&l));
    }

    #[test]
    fn literal_form_is_negated_probability() {
        let l = infonce_value(&[0.0], &[vec![0.0; 3]], 1.0, InfoNceForm::Literal).unwrap();
        assert!((l + 0.25).abs() < 1e-15);
    }

    #[test]
    fn rejects_empty_batches() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::zeros(&[0]));
        let n = g.constant(Tensor::zeros(&[0, 3]));
        let s = g.constant(Tensor::from_vec(vec![1.0]));
        assert!(infonce_from_scores(&mut g, p, n, s, InfoNceForm::Log).is_err());
    }

    fn triplet(pos: f64, neg: f64, margin: f64) -> f64 {
        let mut g = Graph::new();
        let p = g.constant(Tensor::from_vec(vec![pos]));
        let n = g.constant(Tensor::from_vec(vec![neg]));
        let l = triplet_from_scores(&mut g, p, n, margin).unwrap();
        g.value(l).item()
    }

    #[test]
    fn triplet_cases() {
        assert_eq!(triplet(1.0, -1.0, 0.2), 0.0);
        assert!((triplet(0.6, 0.6, 0.2) - 0.2).abs() < 1e-15);
        assert!((triplet(0.3, 0.4, 0.2) - 0.3).abs() < 1e-12);
        assert!((triplet(-1.0, 1.0, 0.2) - 2.2).abs() < 1e-12);
    }
}
