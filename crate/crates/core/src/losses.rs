//! Training objectives.
//!
//! The contrastive losses share one shape: for every anchor `i` and every
//! in-batch positive `p` (`t_ip = 1`, `p ≠ i`) they average
//!
//! ```text
//! -log( e^{P_ip} / (e^{P_ip} + Σ_{j: t_ij = 0} e^{N_ij}) )
//! ```
//!
//! where the positive logit `P` and negative logit `N` differ per loss:
//!
//! | loss   | `P_ip`                | `N_ij`                              |
//! |--------|-----------------------|-------------------------------------|
//! | ArcCos | `cos(θ_ip + m) / τ`   | `cos(θ_ij) / τ`                     |
//! | SupArc | `cos(θ_ip) / τ`       | `cos(clamp(θ_ij − m·Δ_ij, 0, π)) / τ` |
//!
//! with `θ = arccos(cosine similarity)`. The supervised NT-Xent loss instead
//! normalizes over every `j ≠ i`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Softmax temperature.
    pub tau: f64,
    /// SupArc margin in radians per unit of sentiment difference.
    pub margin_m: f64,
    /// Largest label gap still counted as a positive pair.
    #[serde(rename = "threshold_TH")]
    pub threshold_th: f64,
    /// Cosine margin of the modality triplet loss.
    pub m_tri: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.1,
            margin_m: 0.15,
            threshold_th: 0.5,
            m_tri: 0.2,
            alpha: 0.1,
            beta: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.tau,
            self.margin_m,
            self.threshold_th,
            self.m_tri,
            self.alpha,
            self.beta,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("loss settings must be finite".into()));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config("tau must be > 0".into()));
        }
        if self.threshold_th <= 0.0 {
            return Err(Error::Config("threshold_TH must be > 0".into()));
        }
        if self.margin_m < 0.0 || self.m_tri < 0.0 {
            return Err(Error::Config("margins must be >= 0".into()));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Pair labels and label gaps for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct PairMatrix {
    n: usize,
    positive: Vec<bool>,
    delta: Vec<f64>,
}

impl PairMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// `t_ij`: 1 when `|y_i − y_j| ≤ TH`.
    pub fn t(&self, i: usize, j: usize) -> u8 {
        u8::from(self.positive[i * self.n + j])
    }

    /// `Δ_ij = |y_i − y_j|`.
    pub fn delta(&self, i: usize, j: usize) -> f64 {
        self.delta[i * self.n + j]
    }

    /// Number of ordered `(anchor, positive)` pairs with `i ≠ j`.
    pub fn positive_pairs(&self) -> usize {
        (0..self.n)
            .map(|i| {
                (0..self.n)
                    .filter(|&j| j != i && self.positive[i * self.n + j])
                    .count()
            })
            .sum()
    }

    fn positive_mask(&self) -> Tensor {
        let n = self.n;
        let data = (0..n * n)
            .map(|k| f64::from(u8::from(self.positive[k] && k / n != k % n)))
            .collect();
        Tensor::matrix(n, n, data).expect("square")
    }

    fn negative_mask(&self) -> Tensor {
        let data = self
            .positive
            .iter()
            .map(|&p| f64::from(u8::from(!p)))
            .collect();
        Tensor::matrix(self.n, self.n, data).expect("square")
    }
}

/// Labels every ordered pair of a batch.
pub fn pair_label(y: &[f64], threshold: f64) -> Result<PairMatrix> {
    if y.len() < 2 {
        return Err(Error::Contract(format!(
            "pair labeling needs at least 2 samples, got {}",
            y.len()
        )));
    }
    let n = y.len();
    let mut positive = Vec::with_capacity(n * n);
    let mut delta = Vec::with_capacity(n * n);
    for &yi in y {
        for &yj in y {
            let d = (yi - yj).abs();
            delta.push(d);
            positive.push(d <= threshold);
        }
    }
    Ok(PairMatrix { n, positive, delta })
}

/// Mean absolute error between predictions and labels.
///
/// The subgradient at a zero residual is zero.
pub fn mae_loss(tape: &mut Tape, pred: Var, y: &[f64]) -> Result<Var> {
    let shape = tape.value(pred).shape().to_vec();
    if y.is_empty() {
        return Err(Error::Contract("MAE over an empty batch".into()));
    }
    if tape.value(pred).numel() != y.len() {
        return Err(Error::dim(
            "mae_loss",
            format!(
                "{} predictions for {} labels",
                tape.value(pred).numel(),
                y.len()
            ),
        ));
    }
    let target = tape.constant(Tensor::new(shape, y.to_vec())?);
    let diff = tape.sub(pred, target)?;
    let abs = tape.abs(diff);
    Ok(tape.mean(abs))
}

fn check_batch(tape: &Tape, h: Var, pairs: &PairMatrix) -> Result<()> {
    let hv = tape.value(h);
    if hv.rank() != 2 || hv.rows() != pairs.len() {
        return Err(Error::dim(
            "contrastive loss",
            format!("{:?} fusion batch for {} labels", hv.shape(), pairs.len()),
        ));
    }
    if pairs.positive_pairs() == 0 {
        return Err(Error::EmptyPositive);
    }
    Ok(())
}

/// Averages `log(e^{P_ip} + Σ_neg e^{N_ij}) − P_ip` over positive pairs.
///
/// Both logit matrices are shifted by `shift` (an upper bound on the logits)
/// before exponentiation.
fn margin_softmax(
    tape: &mut Tape,
    pos_logits: Var,
    neg_logits: Var,
    pairs: &PairMatrix,
    shift: f64,
) -> Result<Var> {
    let n = pairs.len();
    let pos_shifted = tape.add_scalar(pos_logits, -shift);
    let neg_shifted = tape.add_scalar(neg_logits, -shift);
    let pos_exp = tape.exp(pos_shifted);
    let neg_exp = tape.exp(neg_shifted);
    let neg_mask = tape.constant(pairs.negative_mask());
    let neg_exp = tape.mul(neg_exp, neg_mask)?;
    let neg_sum = tape.row_sums(neg_exp)?;
    let ones = tape.constant(Tensor::filled(&[1, n], 1.0));
    let neg_sum = tape.matmul(neg_sum, ones)?;
    let denom = tape.add(pos_exp, neg_sum)?;
    let log_denom = tape.log(denom);
    let per_pair = tape.sub(log_denom, pos_shifted)?;
    let pos_mask = tape.constant(pairs.positive_mask());
    let per_pair = tape.mul(per_pair, pos_mask)?;
    let total = tape.sum(per_pair);
    Ok(tape.scale(total, 1.0 / pairs.positive_pairs() as f64))
}

/// Supervised NT-Xent over cosine similarities of the rows of `h`.
pub fn supervised_ntxent(tape: &mut Tape, h: Var, pairs: &PairMatrix, tau: f64) -> Result<Var> {
    check_batch(tape, h, pairs)?;
    let n = pairs.len();
    let sim = tape.pairwise_cosine(h)?;
    let logits = tape.scale(sim, 1.0 / tau);
    let shifted = tape.add_scalar(logits, -1.0 / tau);
    let exp = tape.exp(shifted);
    let off_diag = tape.constant(Tensor::new(
        vec![n, n],
        (0..n * n)
            .map(|k| f64::from(u8::from(k / n != k % n)))
            .collect(),
    )?);
    let exp = tape.mul(exp, off_diag)?;
    let denom = tape.row_sums(exp)?;
    let log_denom = tape.log(denom);
    let ones = tape.constant(Tensor::filled(&[1, n], 1.0));
    let log_denom = tape.matmul(log_denom, ones)?;
    let per_pair = tape.sub(log_denom, shifted)?;
    let pos_mask = tape.constant(pairs.positive_mask());
    let per_pair = tape.mul(per_pair, pos_mask)?;
    let total = tape.sum(per_pair);
    Ok(tape.scale(total, 1.0 / pairs.positive_pairs() as f64))
}

fn angles(tape: &mut Tape, h: Var) -> Result<Var> {
    let sim = tape.pairwise_cosine(h)?;
    Ok(tape.arccos(sim))
}

/// Angular contrastive loss with a fixed additive margin on positive angles.
pub fn arccos_loss(
    tape: &mut Tape,
    h: Var,
    pairs: &PairMatrix,
    tau: f64,
    margin: f64,
) -> Result<Var> {
    check_batch(tape, h, pairs)?;
    let theta = angles(tape, h)?;
    let widened = tape.add_scalar(theta, margin);
    let pos = tape.cos(widened);
    let pos = tape.scale(pos, 1.0 / tau);
    let neg = tape.cos(theta);
    let neg = tape.scale(neg, 1.0 / tau);
    margin_softmax(tape, pos, neg, pairs, 1.0 / tau)
}

/// SupArc: negative angles shrink by `m·Δ_ij`, so negatives with larger label
/// gaps are pushed further away.
pub fn suparc_loss(
    tape: &mut Tape,
    h: Var,
    pairs: &PairMatrix,
    tau: f64,
    margin: f64,
) -> Result<Var> {
    check_batch(tape, h, pairs)?;
    let n = pairs.len();
    let theta = angles(tape, h)?;
    let pos = tape.cos(theta);
    let pos = tape.scale(pos, 1.0 / tau);
    let shrink = tape.constant(Tensor::new(
        vec![n, n],
        pairs.delta.iter().map(|d| margin * d).collect(),
    )?);
    let shifted = tape.sub(theta, shrink)?;
    let shifted = tape.clamp(shifted, 0.0, std::f64::consts::PI);
    let neg = tape.cos(shifted);
    let neg = tape.scale(neg, 1.0 / tau);
    margin_softmax(tape, pos, neg, pairs, 1.0 / tau)
}

/// Modality triplet loss, averaged over the batch.
///
/// `singles[k]` is the fusion with modality `k` (t, v, a) masked;
/// `doubles` holds the `{t,v}`, `{t,a}`, `{v,a}` masked fusions. Each
/// sample sums six hinge terms, one per ordered modality pair `(x, y)`:
/// `max(0, s(h, h_{\x,y}) − s(h, h_{\x}) + m_tri)`.
pub fn triplet_modalities_loss(
    tape: &mut Tape,
    h: Var,
    singles: &[Var; 3],
    doubles: &[Var; 3],
    m_tri: f64,
) -> Result<Var> {
    let n = tape.value(h).rows();
    let mut single_sim = Vec::with_capacity(3);
    for &s in singles {
        single_sim.push(tape.rowwise_cosine(h, s)?);
    }
    // doubles[k] masks the pair DOUBLE_PAIRS[k]
    const DOUBLE_PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];
    let mut terms = Vec::with_capacity(6);
    for (k, &(x, y)) in DOUBLE_PAIRS.iter().enumerate() {
        let double_sim = tape.rowwise_cosine(h, doubles[k])?;
        for single in [x, y] {
            let gap = tape.sub(double_sim, single_sim[single])?;
            let gap = tape.add_scalar(gap, m_tri);
            terms.push(tape.relu(gap));
        }
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    let total = tape.sum(acc);
    Ok(tape.scale(total, 1.0 / n as f64))
}

/// `main + α·suparc + β·tri`; a skipped component contributes nothing.
pub fn total_loss(
    tape: &mut Tape,
    main: Var,
    suparc: Option<Var>,
    tri: Option<Var>,
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    let mut total = main;
    for (term, weight) in [(suparc, alpha), (tri, beta)] {
        if let Some(t) = term {
            let weighted = tape.scale(t, weight);
            total = tape.add(total, weighted)?;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(f: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<f64> {
        let mut tape = Tape::new();
        let v = f(&mut tape)?;
        Ok(tape.value(v).item())
    }

    fn rows(r: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn mae_examples() {
        let mae = |p: &[f64], y: &[f64]| {
            eval(|t| {
                let p = t.constant(Tensor::vector(p.to_vec()));
                mae_loss(t, p, y)
            })
            .unwrap()
        };
        assert_eq!(mae(&[0.4, -1.0], &[0.4, -1.0]), 0.0);
        assert_eq!(mae(&[1.0, -1.0], &[0.0, 0.0]), 1.0);
        assert!((mae(&[2.2, 0.6, -0.6], &[3.0, 0.0, 0.0]) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn mae_rejects_empty() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(vec![]));
        assert!(matches!(
            mae_loss(&mut tape, p, &[]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn pair_label_examples() {
        let p = pair_label(&[2.2, 0.6], 0.5).unwrap();
        assert_eq!(p.t(0, 1), 0);
        assert!((p.delta(0, 1) - 1.6).abs() < 1e-12);
        let p = pair_label(&[1.3, 1.3], 0.5).unwrap();
        assert_eq!((p.t(0, 1), p.delta(0, 1)), (1, 0.0));
        let p = pair_label(&[3.0, -3.0], 0.5).unwrap();
        assert_eq!((p.t(0, 1), p.delta(0, 1)), (0, 6.0));
    }

    #[test]
    fn ntxent_identical_pair_is_zero() {
        let v = eval(|t| {
            let h = t.constant(rows(&[&[0.3, 0.4], &[0.3, 0.4]]));
            let pairs = pair_label(&[1.0, 1.0], 0.5)?;
            supervised_ntxent(t, h, &pairs, 0.1)
        })
        .unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn ntxent_three_point_example() {
        let v = eval(|t| {
            let h = t.constant(rows(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]));
            let pairs = pair_label(&[0.0, 0.0, 2.0], 0.5)?;
            supervised_ntxent(t, h, &pairs, 1.0)
        })
        .unwrap();
        assert!((v - 0.313_261_687_518_222_8).abs() < 1e-9, "{v}");
    }

    #[test]
    fn empty_positive_is_reported() {
        let mut tape = Tape::new();
        let h = tape.constant(rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let pairs = pair_label(&[-2.0, 2.0], 0.5).unwrap();
        assert!(matches!(
            supervised_ntxent(&mut tape, h, &pairs, 0.1),
            Err(Error::EmptyPositive)
        ));
        assert!(matches!(
            suparc_loss(&mut tape, h, &pairs, 0.1, 0.15),
            Err(Error::EmptyPositive)
        ));
    }

    #[test]
    fn total_loss_weights() {
        let v = eval(|t| {
            let main = t.constant(Tensor::scalar(0.5));
            let sup = t.constant(Tensor::scalar(0.3));
            let tri = t.constant(Tensor::scalar(1.2));
            total_loss(t, main, Some(sup), Some(tri), 0.1, 0.1)
        })
        .unwrap();
        assert!((v - 0.65).abs() < 1e-12);
        let v = eval(|t| {
            let main = t.constant(Tensor::scalar(0.5));
            total_loss(t, main, None, None, 0.1, 0.1)
        })
        .unwrap();
        assert_eq!(v, 0.5);
    }

    #[test]
    fn triplet_cases() {
        let h = rows(&[&[1.0, 0.0]]);
        let ortho = rows(&[&[0.0, 2.0]]);
        let v = eval(|t| {
            let hv = t.constant(h.clone());
            let s = [hv; 3];
            let o = t.constant(ortho.clone());
            triplet_modalities_loss(t, hv, &s, &[o; 3], 0.2)
        })
        .unwrap();
        assert_eq!(v, 0.0);

        let same = eval(|t| {
            let hv = t.constant(h.clone());
            triplet_modalities_loss(t, hv, &[hv; 3], &[hv; 3], 0.2)
        })
        .unwrap();
        assert!((same - 1.2).abs() < 1e-12);

        let zero_margin = eval(|t| {
            let hv = t.constant(h.clone());
            triplet_modalities_loss(t, hv, &[hv; 3], &[hv; 3], 0.0)
        })
        .unwrap();
        assert_eq!(zero_margin, 0.0);
    }

    #[test]
    fn triplet_rejects_zero_fusion() {
        let mut tape = Tape::new();
        let h = tape.constant(rows(&[&[0.0, 0.0]]));
        let o = tape.constant(rows(&[&[1.0, 0.0]]));
        assert!(matches!(
            triplet_modalities_loss(&mut tape, h, &[o; 3], &[o; 3], 0.2),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            tau: 0.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossConfig {
            threshold_th: 0.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
