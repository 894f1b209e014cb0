//! Training objectives over batches of joint features.
//!
//! All losses take L2-normalized `[B, d]` features as graph nodes and a
//! scalar logit-scale node, and return a scalar node.

use pdlab_autograd::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CLASSIFIER_WEIGHT: &str = "classifier.weight";
pub const CLASSIFIER_BIAS: &str = "classifier.bias";
pub const CLASSIFIER_PREFIX: &str = "classifier.";

/// Multiplier applied to cosine similarities before the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitScale {
    /// `exp(logit_scale)` read from the parameter store.
    Learnable,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda: f64,
    pub logit_scale: LogitScale,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            logit_scale: LogitScale::Learnable,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if let LogitScale::Fixed(s) = self.logit_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("logit scale must be > 0, got {s}")));
            }
        }
        Ok(())
    }

    pub fn scale(&self, g: &mut Graph, store: &ParamStore) -> Result<Var> {
        Ok(match self.logit_scale {
            LogitScale::Fixed(s) => g.scalar(s),
            LogitScale::Learnable => {
                let raw = g.param(store, "logit_scale")?;
                g.exp(raw)
            }
        })
    }
}

/// Shared identity classifier `logits = f·W + b` over `classes` identities.
pub fn init_classifier(store: &mut ParamStore, joint_dim: usize, classes: usize, seed: u64) -> Result<()> {
    if classes == 0 {
        return Err(Error::Config("classifier needs at least one identity".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = (6.0 / (joint_dim + classes) as f64).sqrt();
    let w = Tensor::from_fn(&[joint_dim, classes], |_| rng.gen_range(-bound..=bound));
    store.insert(CLASSIFIER_WEIGHT, w, true)?;
    store.insert(CLASSIFIER_BIAS, Tensor::zeros(&[classes]), true)?;
    Ok(())
}

pub fn classifier_classes(store: &ParamStore) -> Option<usize> {
    store.get(CLASSIFIER_BIAS).map(|b| b.numel())
}

fn check_pair(g: &Graph, a: Var, b: Var, n_ids: usize) -> Result<usize> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(Error::Invalid(format!("feature shapes {sa:?} and {sb:?} are incompatible")));
    }
    if sa[0] != sb[0] || sa[0] != n_ids {
        return Err(Error::Invalid(format!(
            "batch sizes {} / {} / {} ids differ",
            sa[0], sb[0], n_ids
        )));
    }
    Ok(sa[0])
}

/// Anchors softmax over the gallery; each anchor averages `-log p` over its
/// same-identity gallery items, and anchors are averaged.
fn directional(g: &mut Graph, anchors: Var, gallery: Var, ids: &[usize], scale: Var) -> Result<Var> {
    let b = ids.len();
    let mut w = vec![0.0; b * b];
    for (i, &yi) in ids.iter().enumerate() {
        let positives: Vec<usize> = (0..b).filter(|&j| ids[j] == yi).collect();
        if positives.is_empty() {
            return Err(Error::EmptyPositiveSet { anchor: i });
        }
        let share = 1.0 / (positives.len() * b) as f64;
        for j in positives {
            w[i * b + j] = share;
        }
    }
    let gt = g.transpose(gallery)?;
    let sim = g.matmul(anchors, gt)?;
    let logits = g.mul(sim, scale)?;
    let logp = g.log_softmax(logits)?;
    let weights = g.input(Tensor::new(&[b, b], w)?);
    let picked = g.mul(logp, weights)?;
    let total = g.sum(picked);
    Ok(g.neg(total))
}

/// Text anchors retrieving images.
pub fn l_t2i(g: &mut Graph, text: Var, image: Var, ids: &[usize], scale: Var) -> Result<Var> {
    check_pair(g, text, image, ids.len())?;
    directional(g, text, image, ids, scale)
}

/// Image anchors retrieving texts.
pub fn l_i2t(g: &mut Graph, text: Var, image: Var, ids: &[usize], scale: Var) -> Result<Var> {
    check_pair(g, text, image, ids.len())?;
    directional(g, image, text, ids, scale)
}

pub fn l_itc(g: &mut Graph, text: Var, image: Var, ids: &[usize], scale: Var) -> Result<Var> {
    let a = l_t2i(g, text, image, ids, scale)?;
    let b = l_i2t(g, text, image, ids, scale)?;
    Ok(g.add(a, b)?)
}

/// Cross-entropy of the shared classifier over text and image features,
/// averaged over all `2B` instances.
pub fn id_loss(g: &mut Graph, store: &ParamStore, text: Var, image: Var, ids: &[usize]) -> Result<Var> {
    check_pair(g, text, image, ids.len())?;
    let classes = classifier_classes(store).ok_or_else(|| Error::Config("classifier is missing".into()))?;
    if let Some(&id) = ids.iter().find(|&&id| id >= classes) {
        return Err(Error::IdentityOutOfRange { id, classes });
    }
    let feats = g.concat(&[text, image], 0)?;
    let w = g.param(store, CLASSIFIER_WEIGHT)?;
    let bias = g.param(store, CLASSIFIER_BIAS)?;
    let logits = g.matmul(feats, w)?;
    let logits = g.add(logits, bias)?;
    cross_entropy(g, logits, &[ids, ids].concat())
}

/// Mean `-log softmax(logits)[target]` over rows of `[n, classes]` logits.
pub fn cross_entropy(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::Invalid(format!(
            "logits {shape:?} do not match {} targets",
            targets.len()
        )));
    }
    let (n, c) = (shape[0], shape[1]);
    let mut onehot = vec![0.0; n * c];
    for (r, &t) in targets.iter().enumerate() {
        if t >= c {
            return Err(Error::IdentityOutOfRange { id: t, classes: c });
        }
        onehot[r * c + t] = 1.0 / n as f64;
    }
    let logp = g.log_softmax(logits)?;
    let mask = g.input(Tensor::new(&[n, c], onehot)?);
    let picked = g.mul(logp, mask)?;
    let total = g.sum(picked);
    Ok(g.neg(total))
}

/// Named components of one loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub itc: Option<Var>,
    pub id: Option<Var>,
    pub infonce: Option<Var>,
}

/// `L_itc + λ·L_id`.
pub fn total_loss_stage2(
    g: &mut Graph,
    store: &ParamStore,
    text: Var,
    image: Var,
    ids: &[usize],
    scale: Var,
    lambda: f64,
) -> Result<LossParts> {
    let itc = l_itc(g, text, image, ids, scale)?;
    let id = id_loss(g, store, text, image, ids)?;
    let weighted = g.scale(id, lambda);
    let total = g.add(itc, weighted)?;
    Ok(LossParts {
        total,
        itc: Some(itc),
        id: Some(id),
        infonce: None,
    })
}

/// Symmetric InfoNCE with diagonal targets: text→image plus image→text.
pub fn infonce(g: &mut Graph, text: Var, image: Var, scale: Var) -> Result<Var> {
    let b = g.shape(text).first().copied().unwrap_or(0);
    let diag: Vec<usize> = (0..b).collect();
    l_itc(g, text, image, &diag, scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats(g: &mut Graph, rows: &[&[f64]]) -> Var {
        let d = rows[0].len();
        g.input(Tensor::new(&[rows.len(), d], rows.concat()).unwrap())
    }

    #[test]
    fn single_pair_is_zero() {
        let mut g = Graph::new();
        let t = feats(&mut g, &[&[0.6, 0.8]]);
        let i = feats(&mut g, &[&[1.0, 0.0]]);
        let s = g.scalar(1.0);
        let l = l_itc(&mut g, t, i, &[3], s).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);
        let n = infonce(&mut g, t, i, s).unwrap();
        assert_eq!(g.value(n).item().unwrap(), 0.0);
    }

    #[test]
    fn equal_similarities_give_ln2() {
        let mut g = Graph::new();
        let t = feats(&mut g, &[&[1.0, 0.0], &[1.0, 0.0]]);
        let i = feats(&mut g, &[&[1.0, 0.0], &[1.0, 0.0]]);
        let s = g.scalar(1.0);
        let l = l_t2i(&mut g, t, i, &[0, 1], s).unwrap();
        assert!((g.value(l).item().unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn uniform_logits_give_ln_classes() {
        let mut g = Graph::new();
        let logits = g.input(Tensor::zeros(&[3, 4]));
        let l = cross_entropy(&mut g, logits, &[0, 2, 3]).unwrap();
        assert!((g.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-15);
        let sat = g.input(Tensor::new(&[1, 2], vec![100.0, 0.0]).unwrap());
        let l = cross_entropy(&mut g, sat, &[0]).unwrap();
        assert!(g.value(l).item().unwrap() < 1e-40);
    }

    #[test]
    fn id_out_of_range_rejected() {
        let mut store = ParamStore::new();
        init_classifier(&mut store, 2, 3, 0).unwrap();
        let mut g = Graph::new();
        let t = feats(&mut g, &[&[1.0, 0.0]]);
        let r = id_loss(&mut g, &store, t, t, &[3]);
        assert!(matches!(r, Err(Error::IdentityOutOfRange { id: 3, classes: 3 })));
    }

    #[test]
    fn lambda_zero_is_itc() {
        let mut store = ParamStore::new();
        init_classifier(&mut store, 2, 3, 0).unwrap();
        let mut g = Graph::new();
        let t = feats(&mut g, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let i = feats(&mut g, &[&[0.6, 0.8], &[0.8, 0.6]]);
        let s = g.scalar(10.0);
        let parts = total_loss_stage2(&mut g, &store, t, i, &[0, 2], s, 0.0).unwrap();
        assert_eq!(
            g.value(parts.total).item().unwrap(),
            g.value(parts.itc.unwrap()).item().unwrap()
        );
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig { lambda: -1.0, ..Default::default() }.validate().is_err());
        let c = LossConfig {
            lambda: 0.1,
            logit_scale: LogitScale::Fixed(0.0),
        };
        assert!(c.validate().is_err());
    }
}
