//! Contrastive objectives with analytic gradients.
//!
//! Three diagonal cross-entropy blocks share one core. With M samples
//! per batch and row-normalized embeddings E_I (images), E_C (true
//! captions), E_C' (negated captions), E_I' (distractor images):
//!
//!   term 1: anchors E_I,  candidates [E_C ; E_C']   (M x 2M)
//!   term 2: anchors E_C,  candidates [E_I ; E_I']   (M x 2M)
//!   term 3: anchors E_I', candidates [E_C'; E_C ]   (M x 2M)
//!
//! Each block applies temperature and a per-anchor softmax; the
//! positive sits on the diagonal, and the term is the mean negative
//! log probability of the diagonal. The combined objective is the
//! arithmetic mean of the three terms. The plain symmetric contrastive
//! baseline (no negated candidates) is also provided, along with a
//! central-finite-difference gradient checker.
//!
//! Gradients are reported for all four input matrices; the trainer
//! decides which side of the model they reach.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sim_block, tempered_softmax, EmbeddingBatch, Rng};

/// Which objective a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    L1,
    L2,
    L12,
    ConClip,
    InfoNce,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::L1,
        LossKind::L2,
        LossKind::L12,
        LossKind::ConClip,
        LossKind::InfoNce,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::L1 => "l1",
            LossKind::L2 => "l2",
            LossKind::L12 => "l12",
            LossKind::ConClip => "conclip",
            LossKind::InfoNce => "infonce",
        }
    }

    pub fn parse(s: &str) -> Option<LossKind> {
        match s {
            "l1" => Some(LossKind::L1),
            "l2" => Some(LossKind::L2),
            "l12" | "l1+l2" => Some(LossKind::L12),
            "conclip" => Some(LossKind::ConClip),
            "infonce" => Some(LossKind::InfoNce),
            _ => None,
        }
    }

    /// Whether the objective backpropagates into negated captions.
    pub fn uses_negated_captions(self) -> bool {
        matches!(self, LossKind::L1 | LossKind::ConClip)
    }
}

/// The four embedding matrices of one batch plus the temperature.
#[derive(Debug, Clone)]
pub struct LossBatch {
    pub img: EmbeddingBatch,
    pub cap: EmbeddingBatch,
    pub cap_neg: EmbeddingBatch,
    pub img_neg: EmbeddingBatch,
    pub tau: f64,
}

impl LossBatch {
    pub fn validate(&self) -> Result<()> {
        let (m, d) = (self.img.rows(), self.img.dim());
        for b in [&self.cap, &self.cap_neg, &self.img_neg] {
            if b.rows() != m {
                return Err(Error::DimMismatch {
                    left: m,
                    right: b.rows(),
                });
            }
            if b.dim() != d {
                return Err(Error::DimMismatch {
                    left: d,
                    right: b.dim(),
                });
            }
        }
        if self.tau <= 0.0 {
            return Err(Error::NonPositiveTemperature { temperature: self.tau });
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.img.rows()
    }

    pub fn dim(&self) -> usize {
        self.img.dim()
    }
}

/// Gradients of a scalar objective with respect to each input matrix.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub d_img: EmbeddingBatch,
    pub d_cap: EmbeddingBatch,
    pub d_cap_neg: EmbeddingBatch,
    pub d_img_neg: EmbeddingBatch,
}

impl LossGrads {
    pub fn zeros(m: usize, d: usize) -> LossGrads {
        LossGrads {
            d_img: EmbeddingBatch::zeros(m, d),
            d_cap: EmbeddingBatch::zeros(m, d),
            d_cap_neg: EmbeddingBatch::zeros(m, d),
            d_img_neg: EmbeddingBatch::zeros(m, d),
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &LossGrads) {
        self.d_img.axpy(alpha, &other.d_img);
        self.d_cap.axpy(alpha, &other.d_cap);
        self.d_cap_neg.axpy(alpha, &other.d_cap_neg);
        self.d_img_neg.axpy(alpha, &other.d_img_neg);
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(4 * self.d_img.data().len());
        out.extend_from_slice(self.d_img.data());
        out.extend_from_slice(self.d_cap.data());
        out.extend_from_slice(self.d_cap_neg.data());
        out.extend_from_slice(self.d_img_neg.data());
        out
    }
}

/// All loss components of one batch; `l_conclip` is always the mean of
/// the three terms, and `grads` belongs to `l_conclip`.
#[derive(Debug, Clone)]
pub struct LossResult {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l_conclip: f64,
    pub grads: LossGrads,
}

/// Mean negative log probability of the diagonal under a per-anchor
/// tempered softmax over all candidates. Returns the scalar and its
/// gradients with respect to anchors and candidates.
///
/// Candidates may outnumber anchors (anchor i pairs with candidate i);
/// restricting candidates to the first M rows recovers the one-sided
/// baseline exactly.
pub fn diag_cross_entropy(
    anchors: &EmbeddingBatch,
    candidates: &EmbeddingBatch,
    tau: f64,
) -> Result<(f64, EmbeddingBatch, EmbeddingBatch)> {
    let (m, l, d) = (anchors.rows(), candidates.rows(), anchors.dim());
    if l < m {
        return Err(Error::DimMismatch { left: m, right: l });
    }
    let block = sim_block(anchors, candidates, tau)?;
    let probs = tempered_softmax(&block)?;

    let mut value = 0.0;
    for i in 0..m {
        value -= probs[i * l + i].max(f64::MIN_POSITIVE).ln();
    }
    value /= m as f64;

    // dL/dS[i][j] = (P[i][j] - [i == j]) / (M * tau)
    let scale = 1.0 / (m as f64 * tau);
    let mut d_anchors = EmbeddingBatch::zeros(m, d);
    let mut d_candidates = EmbeddingBatch::zeros(l, d);
    for i in 0..m {
        let anchor = anchors.row(i);
        for j in 0..l {
            let g = (probs[i * l + j] - if i == j { 1.0 } else { 0.0 }) * scale;
            if g == 0.0 {
                continue;
            }
            let cand = candidates.row(j);
            let da = d_anchors.row_mut(i);
            for k in 0..d {
                da[k] += g * cand[k];
            }
            let dc = d_candidates.row_mut(j);
            for k in 0..d {
                dc[k] += g * anchor[k];
            }
        }
    }
    Ok((value, d_anchors, d_candidates))
}

/// True images against all captions: anchors E_I, candidates
/// [E_C ; E_C'].
pub fn loss_l1(batch: &LossBatch) -> Result<(f64, LossGrads)> {
    batch.validate()?;
    let (m, d) = (batch.rows(), batch.dim());
    let cands = EmbeddingBatch::vstack(&batch.cap, &batch.cap_neg)?;
    let (value, d_img, d_cands) = diag_cross_entropy(&batch.img, &cands, batch.tau)?;
    let (d_cap, d_cap_neg) = split_rows(&d_cands, m, d);
    Ok((
        value,
        LossGrads {
            d_img,
            d_cap,
            d_cap_neg,
            d_img_neg: EmbeddingBatch::zeros(m, d),
        },
    ))
}

/// True captions against all images: anchors E_C, candidates
/// [E_I ; E_I'].
pub fn loss_l2(batch: &LossBatch) -> Result<(f64, LossGrads)> {
    batch.validate()?;
    let (m, d) = (batch.rows(), batch.dim());
    let cands = EmbeddingBatch::vstack(&batch.img, &batch.img_neg)?;
    let (value, d_cap, d_cands) = diag_cross_entropy(&batch.cap, &cands, batch.tau)?;
    let (d_img, d_img_neg) = split_rows(&d_cands, m, d);
    Ok((
        value,
        LossGrads {
            d_img,
            d_cap,
            d_cap_neg: EmbeddingBatch::zeros(m, d),
            d_img_neg,
        },
    ))
}

/// Distractor images against all captions: anchors E_I', candidates
/// [E_C' ; E_C], so the positive of distractor i is negated caption i.
pub fn loss_l3(batch: &LossBatch) -> Result<(f64, LossGrads)> {
    batch.validate()?;
    let (m, d) = (batch.rows(), batch.dim());
    let cands = EmbeddingBatch::vstack(&batch.cap_neg, &batch.cap)?;
    let (value, d_img_neg, d_cands) = diag_cross_entropy(&batch.img_neg, &cands, batch.tau)?;
    let (d_cap_neg, d_cap) = split_rows(&d_cands, m, d);
    Ok((
        value,
        LossGrads {
            d_img: EmbeddingBatch::zeros(m, d),
            d_cap,
            d_cap_neg,
            d_img_neg,
        },
    ))
}

/// Mean of the three terms; the gradient is the mean of the three
/// gradients.
pub fn loss_conclip(batch: &LossBatch) -> Result<LossResult> {
    let (l1, g1) = loss_l1(batch)?;
    let (l2, g2) = loss_l2(batch)?;
    let (l3, g3) = loss_l3(batch)?;
    let mut grads = LossGrads::zeros(batch.rows(), batch.dim());
    let third = 1.0 / 3.0;
    grads.axpy(third, &g1);
    grads.axpy(third, &g2);
    grads.axpy(third, &g3);
    Ok(LossResult {
        l1,
        l2,
        l3,
        l_conclip: (l1 + l2 + l3) / 3.0,
        grads,
    })
}

/// Symmetric contrastive baseline over M candidates per direction:
/// the mean of the image-to-caption and caption-to-image diagonal
/// cross-entropies. No negated candidates anywhere.
pub fn loss_infonce(
    img: &EmbeddingBatch,
    cap: &EmbeddingBatch,
    tau: f64,
) -> Result<(f64, LossGrads)> {
    if img.rows() != cap.rows() {
        return Err(Error::DimMismatch {
            left: img.rows(),
            right: cap.rows(),
        });
    }
    let (m, d) = (img.rows(), img.dim());
    let (v_rows, d_img_a, d_cap_a) = diag_cross_entropy(img, cap, tau)?;
    let (v_cols, d_cap_b, d_img_b) = diag_cross_entropy(cap, img, tau)?;
    let mut d_img = d_img_a;
    d_img.axpy(1.0, &d_img_b);
    let mut d_cap = d_cap_a;
    d_cap.axpy(1.0, &d_cap_b);
    for v in d_img.data_mut() {
        *v *= 0.5;
    }
    for v in d_cap.data_mut() {
        *v *= 0.5;
    }
    Ok((
        (v_rows + v_cols) / 2.0,
        LossGrads {
            d_img,
            d_cap,
            d_cap_neg: EmbeddingBatch::zeros(m, d),
            d_img_neg: EmbeddingBatch::zeros(m, d),
        },
    ))
}

/// One objective value and its gradients, dispatched by kind. The
/// l1+l2 arm is the mean of the two terms.
pub fn evaluate_loss(kind: LossKind, batch: &LossBatch) -> Result<(f64, LossGrads)> {
    match kind {
        LossKind::L1 => loss_l1(batch),
        LossKind::L2 => loss_l2(batch),
        LossKind::L12 => {
            let (l1, g1) = loss_l1(batch)?;
            let (l2, g2) = loss_l2(batch)?;
            let mut grads = LossGrads::zeros(batch.rows(), batch.dim());
            grads.axpy(0.5, &g1);
            grads.axpy(0.5, &g2);
            Ok(((l1 + l2) / 2.0, grads))
        }
        LossKind::ConClip => {
            let r = loss_conclip(batch)?;
            Ok((r.l_conclip, r.grads))
        }
        LossKind::InfoNce => {
            batch.validate()?;
            loss_infonce(&batch.img, &batch.cap, batch.tau)
        }
    }
}

fn split_rows(stacked: &EmbeddingBatch, m: usize, d: usize) -> (EmbeddingBatch, EmbeddingBatch) {
    let data = stacked.data();
    let top = EmbeddingBatch::new(m, d, data[..m * d].to_vec()).expect("top half");
    let bottom = EmbeddingBatch::new(m, d, data[m * d..].to_vec()).expect("bottom half");
    (top, bottom)
}

/// Max entrywise relative error between `analytic` and the central
/// finite difference of `f` at `x` with step `h`. The denominator is
/// floored so that genuinely zero gradients compare absolutely.
pub fn finite_diff_max_rel_err<F: Fn(&[f64]) -> f64>(
    f: &F,
    x: &[f64],
    analytic: &[f64],
    h: f64,
) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut probe = x.to_vec();
    let mut max_rel = 0.0f64;
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        let fd = (plus - minus) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
        max_rel = max_rel.max(rel);
    }
    max_rel
}

/// Compare the analytic gradient of an objective against central
/// finite differences over all four input matrices of a random batch.
/// Returns the max relative error observed.
pub fn gradcheck(kind: LossKind, m: usize, d: usize, tau: f64, seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let batch = LossBatch {
        img: EmbeddingBatch::random_unit(&mut rng, m, d),
        cap: EmbeddingBatch::random_unit(&mut rng, m, d),
        cap_neg: EmbeddingBatch::random_unit(&mut rng, m, d),
        img_neg: EmbeddingBatch::random_unit(&mut rng, m, d),
        tau,
    };
    let (_, grads) = evaluate_loss(kind, &batch)?;

    let mut x = Vec::with_capacity(4 * m * d);
    x.extend_from_slice(batch.img.data());
    x.extend_from_slice(batch.cap.data());
    x.extend_from_slice(batch.cap_neg.data());
    x.extend_from_slice(batch.img_neg.data());
    let analytic = grads.flatten();

    let f = move |v: &[f64]| {
        let n = m * d;
        let rebuilt = LossBatch {
            img: EmbeddingBatch::new(m, d, v[..n].to_vec()).unwrap(),
            cap: EmbeddingBatch::new(m, d, v[n..2 * n].to_vec()).unwrap(),
            cap_neg: EmbeddingBatch::new(m, d, v[2 * n..3 * n].to_vec()).unwrap(),
            img_neg: EmbeddingBatch::new(m, d, v[3 * n..].to_vec()).unwrap(),
            tau,
        };
        evaluate_loss(kind, &rebuilt).expect("loss evaluates").0
    };
    Ok(finite_diff_max_rel_err(&f, &x, &analytic, 1e-5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    use crate::tensor::Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    /// -ln(e^s / (e^s + e^t)) for a two-candidate row.
    fn two_way_ce(s: f64, t: f64, tau: f64) -> f64 {
        ((t - s) / tau).exp().ln_1p()
    }

    fn m1_batch(img: [f64; 2], cap: [f64; 2], cap_neg: [f64; 2], img_neg: [f64; 2], tau: f64) -> LossBatch {
        LossBatch {
            img: EmbeddingBatch::from_rows(&[img.to_vec()]).unwrap(),
            cap: EmbeddingBatch::from_rows(&[cap.to_vec()]).unwrap(),
            cap_neg: EmbeddingBatch::from_rows(&[cap_neg.to_vec()]).unwrap(),
            img_neg: EmbeddingBatch::from_rows(&[img_neg.to_vec()]).unwrap(),
            tau,
        }
    }

    #[test]
    fn l1_closed_forms() {
        // Aligned caption, orthogonal negated caption.
        let b = m1_batch([1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0], 1.0);
        let (v, _) = loss_l1(&b).unwrap();
        assert!(close(v, two_way_ce(1.0, 0.0, 1.0), 1e-12));
        assert!(close(v, 0.3133, 5e-5));

        // Negated caption identical to the true caption: tied logits.
        let tied = m1_batch([1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 1.0], 1.0);
        let (v, _) = loss_l1(&tied).unwrap();
        assert!(close(v, (2.0f64).ln() - 0.0, 1e-12));
        assert!(close(v, 0.6931, 5e-5));

        // Sharp temperature drives the separated case toward zero.
        let sharp = m1_batch([1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0], 0.07);
        let (v, _) = loss_l1(&sharp).unwrap();
        assert!(close(v, (-1.0f64 / 0.07).exp().ln_1p(), 1e-15));
        assert!(v < 1e-6 && v > 1e-7, "expected ~6.2e-7, got {v}");
    }

    #[test]
    fn l2_mirrors_l1() {
        let b = m1_batch([1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0], 1.0);
        let (v, _) = loss_l2(&b).unwrap();
        assert!(close(v, 0.3133, 5e-5));

        let tied = m1_batch([1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 0.0], 1.0);
        let (v, _) = loss_l2(&tied).unwrap();
        assert!(close(v, (2.0f64).ln(), 1e-12));

        // Swapping image/caption roles of an L1 input reproduces L1.
        let mut rng = Rng::new(15);
        let batch = LossBatch {
            img: EmbeddingBatch::random_unit(&mut rng, 3, 4),
            cap: EmbeddingBatch::random_unit(&mut rng, 3, 4),
            cap_neg: EmbeddingBatch::random_unit(&mut rng, 3, 4),
            img_neg: EmbeddingBatch::random_unit(&mut rng, 3, 4),
            tau: 0.3,
        };
        let swapped = LossBatch {
            img: batch.cap.clone(),
            cap: batch.img.clone(),
            cap_neg: batch.img_neg.clone(),
            img_neg: batch.cap_neg.clone(),
            tau: batch.tau,
        };
        let (v1, _) = loss_l1(&batch).unwrap();
        let (v2, _) = loss_l2(&swapped).unwrap();
        assert!(close(v1, v2, 1e-15));
    }

    #[test]
    fn l3_closed_forms() {
        let b = m1_batch([1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0], 1.0);
        let (v, _) = loss_l3(&b).unwrap();
        // Anchor I' = [0,1]: sim to c' is 1, to c is 0.
        assert!(close(v, 0.3133, 5e-5));

        let tied = m1_batch([1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 1.0], 1.0);
        let (v, _) = loss_l3(&tied).unwrap();
        assert!(close(v, (2.0f64).ln(), 1e-12));

        let sharp = m1_batch([1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0], 0.07);
        let (v, _) = loss_l3(&sharp).unwrap();
        assert!(v < 1e-5);
    }

    #[test]
    fn conclip_is_mean_of_terms() {
        let b = m1_batch([1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0], 1.0);
        let r = loss_conclip(&b).unwrap();
        assert!(close(r.l_conclip, 0.3133, 5e-5));
        assert!(close(r.l_conclip, (r.l1 + r.l2 + r.l3) / 3.0, 1e-12));

        let mut rng = Rng::new(4);
        let batch = LossBatch {
            img: EmbeddingBatch::random_unit(&mut rng, 5, 6),
            cap: EmbeddingBatch::random_unit(&mut rng, 5, 6),
            cap_neg: EmbeddingBatch::random_unit(&mut rng, 5, 6),
            img_neg: EmbeddingBatch::random_unit(&mut rng, 5, 6),
            tau: 0.07,
        };
        let r = loss_conclip(&batch).unwrap();
        assert!(close(r.l_conclip, (r.l1 + r.l2 + r.l3) / 3.0, 1e-12));

        // Gradient equals the mean of the component gradients.
        let (_, g1) = loss_l1(&batch).unwrap();
        let (_, g2) = loss_l2(&batch).unwrap();
        let (_, g3) = loss_l3(&batch).unwrap();
        let mut mean = LossGrads::zeros(5, 6);
        mean.axpy(1.0 / 3.0, &g1);
        mean.axpy(1.0 / 3.0, &g2);
        mean.axpy(1.0 / 3.0, &g3);
        for (a, b) in r.grads.flatten().iter().zip(mean.flatten().iter()) {
            assert!(close(*a, *b, 1e-12));
        }
    }

    #[test]
    fn infonce_closed_forms() {
        let eye = EmbeddingBatch::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let (v, _) = loss_infonce(&eye, &eye, 1.0).unwrap();
        assert!(close(v, two_way_ce(1.0, 0.0, 1.0), 1e-12));
        assert!(close(v, 0.3133, 5e-5));

        // Single candidate: probability one, loss exactly zero.
        let one = EmbeddingBatch::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let (v, _) = loss_infonce(&one, &one, 0.5).unwrap();
        assert_eq!(v, 0.0);

        // Permuting the caption rows off the diagonal raises the loss.
        let caps = EmbeddingBatch::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let (aligned, _) = loss_infonce(&eye, &eye, 1.0).unwrap();
        let (permuted, _) = loss_infonce(&eye, &caps, 1.0).unwrap();
        assert!(permuted > aligned);
    }

    #[test]
    fn every_term_is_nonnegative() {
        let mut rng = Rng::new(21);
        for m in [1usize, 2, 5] {
            let batch = LossBatch {
                img: EmbeddingBatch::random_unit(&mut rng, m, 4),
                cap: EmbeddingBatch::random_unit(&mut rng, m, 4),
                cap_neg: EmbeddingBatch::random_unit(&mut rng, m, 4),
                img_neg: EmbeddingBatch::random_unit(&mut rng, m, 4),
                tau: 0.2,
            };
            let r = loss_conclip(&batch).unwrap();
            assert!(r.l1 >= 0.0 && r.l2 >= 0.0 && r.l3 >= 0.0 && r.l_conclip >= 0.0);
            let (inf, _) = loss_infonce(&batch.img, &batch.cap, 0.2).unwrap();
            assert!(inf >= 0.0);
        }
    }

    #[test]
    fn masking_negated_block_recovers_one_direction_baseline() {
        // Candidates restricted to the first M columns equal the
        // image-to-caption direction of the symmetric baseline,
        // checked against an independently coded cross-entropy.
        let mut rng = Rng::new(33);
        for trial in 0..20 {
            let m = 1 + rng.below(8);
            let d = 3 + rng.below(6);
            let tau = 0.05 + rng.f64();
            let img = EmbeddingBatch::random_unit(&mut rng, m, d);
            let cap = EmbeddingBatch::random_unit(&mut rng, m, d);
            let (masked, _, _) = diag_cross_entropy(&img, &cap, tau).unwrap();
            let brute = brute_force_image_to_text_ce(&img, &cap, tau);
            assert!(
                close(masked, brute, 1e-12),
                "trial {trial}: {masked} vs {brute}"
            );
        }
    }

    /// Textbook cross-entropy with no shared code: explicit exp sums,
    /// no max subtraction.
    fn brute_force_image_to_text_ce(img: &EmbeddingBatch, cap: &EmbeddingBatch, tau: f64) -> f64 {
        let m = img.rows();
        let mut total = 0.0;
        for i in 0..m {
            let mut denom = 0.0;
            for j in 0..m {
                let mut s = 0.0;
                for k in 0..img.dim() {
                    s += img.row(i)[k] * cap.row(j)[k];
                }
                denom += (s / tau).exp();
            }
            let mut s_ii = 0.0;
            for k in 0..img.dim() {
                s_ii += img.row(i)[k] * cap.row(i)[k];
            }
            total -= ((s_ii / tau).exp() / denom).ln();
        }
        total / m as f64
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = Rng::new(55);
        let m = 6;
        let batch = LossBatch {
            img: EmbeddingBatch::random_unit(&mut rng, m, 5),
            cap: EmbeddingBatch::random_unit(&mut rng, m, 5),
            cap_neg: EmbeddingBatch::random_unit(&mut rng, m, 5),
            img_neg: EmbeddingBatch::random_unit(&mut rng, m, 5),
            tau: 0.07,
        };
        let mut perm: Vec<usize> = (0..m).collect();
        rng.shuffle(&mut perm);
        let permute = |b: &EmbeddingBatch| {
            let rows: Vec<Vec<f64>> = perm.iter().map(|&i| b.row(i).to_vec()).collect();
            EmbeddingBatch::from_rows(&rows).unwrap()
        };
        let permuted = LossBatch {
            img: permute(&batch.img),
            cap: permute(&batch.cap),
            cap_neg: permute(&batch.cap_neg),
            img_neg: permute(&batch.img_neg),
            tau: batch.tau,
        };
        let a = loss_conclip(&batch).unwrap();
        let b = loss_conclip(&permuted).unwrap();
        assert!(close(a.l1, b.l1, 1e-12));
        assert!(close(a.l2, b.l2, 1e-12));
        assert!(close(a.l3, b.l3, 1e-12));
        let (ia, _) = loss_infonce(&batch.img, &batch.cap, 0.07).unwrap();
        let (ib, _) = loss_infonce(&permuted.img, &permuted.cap, 0.07).unwrap();
        assert!(close(ia, ib, 1e-12));
    }

    #[test]
    fn distractor_pressure_is_monotone() {
        // M = 1: raising sim(I, c') with sim(I, c) fixed raises l1.
        let angles = [0.0f64, 0.3, 0.6, 0.9, 1.2];
        let mut last = f64::NEG_INFINITY;
        for a in angles {
            let b = m1_batch(
                [1.0, 0.0],
                [0.8, 0.6],
                [a.cos(), a.sin()],
                [0.0, 1.0],
                0.3,
            );
            // sim(I, c') = cos(a), decreasing in a; iterate reversed.
            let (v, _) = loss_l1(&b).unwrap();
            assert!(v.is_finite());
            if last != f64::NEG_INFINITY {
                assert!(v < last, "loss must fall as the distractor moves away");
            }
            last = v;
        }
    }

    #[test]
    fn finite_diff_harness_self_test() {
        // Quadratic with a known gradient.
        let coeffs = [0.5, -1.25, 2.0, 3.5];
        let f = |x: &[f64]| x.iter().zip(coeffs.iter()).map(|(xi, c)| c * xi * xi).sum::<f64>();
        let x = [1.0, -0.4, 0.2, 2.2];
        let analytic: Vec<f64> = x.iter().zip(coeffs.iter()).map(|(xi, c)| 2.0 * c * xi).collect();
        let err = finite_diff_max_rel_err(&f, &x, &analytic, 1e-5);
        assert!(err < 1e-8, "harness self-test error {err}");
    }

    #[test]
    fn gradcheck_all_losses() {
        for kind in LossKind::ALL {
            let err = gradcheck(kind, 4, 8, 0.07, 2024).unwrap();
            assert!(err < 1e-4, "{} gradcheck error {err}", kind.as_str());
        }
    }

    #[test]
    fn batch_validation_errors() {
        let b = LossBatch {
            img: EmbeddingBatch::zeros(2, 3),
            cap: EmbeddingBatch::zeros(3, 3),
            cap_neg: EmbeddingBatch::zeros(2, 3),
            img_neg: EmbeddingBatch::zeros(2, 3),
            tau: 0.07,
        };
        assert!(matches!(loss_l1(&b), Err(Error::DimMismatch { .. })));

        let b = LossBatch {
            img: EmbeddingBatch::zeros(2, 3),
            cap: EmbeddingBatch::zeros(2, 3),
            cap_neg: EmbeddingBatch::zeros(2, 3),
            img_neg: EmbeddingBatch::zeros(2, 3),
            tau: -0.1,
        };
        assert!(matches!(
            loss_l1(&b),
            Err(Error::NonPositiveTemperature { .. })
        ));
    }

    proptest! {
        #[test]
        fn conclip_identity_holds(seed in any::<u64>(), m in 1usize..6, tau in 0.05f64..1.5) {
            let mut rng = Rng::new(seed);
            let batch = LossBatch {
                img: EmbeddingBatch::random_unit(&mut rng, m, 4),
                cap: EmbeddingBatch::random_unit(&mut rng, m, 4),
                cap_neg: EmbeddingBatch::random_unit(&mut rng, m, 4),
                img_neg: EmbeddingBatch::random_unit(&mut rng, m, 4),
                tau,
            };
            let r = loss_conclip(&batch).unwrap();
            prop_assert!((r.l_conclip - (r.l1 + r.l2 + r.l3) / 3.0).abs() < 1e-9);
            prop_assert!(r.l1 >= 0.0 && r.l2 >= 0.0 && r.l3 >= 0.0);
        }
    }
}
