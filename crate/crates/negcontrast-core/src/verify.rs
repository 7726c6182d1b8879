//! Self-verification suite: gradient checks against central finite
//! differences, miner/exhaustive-scan equality, parser round-trips and
//! negation invariants, and the reduction of the first loss term to
//! the one-directional baseline when the negated candidate block is
//! masked. The CLI exposes this as its `verify` subcommand.

use crate::caption;
use crate::encoders::TextEncoderParams;
use crate::error::Result;
use crate::loss::{
    diag_cross_entropy, evaluate_loss, finite_diff_max_rel_err, LossBatch, LossKind,
};
use crate::miner::{mine, MinerQuery};
use crate::scene::{generate, WorldConfig};
use crate::tensor::{cosine_sim, dot, EmbeddingBatch, Rng};

/// One named check with its observed and allowed error.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: impl Into<String>, max_err: f64, tolerance: f64) -> CheckResult {
        CheckResult {
            name: name.into(),
            max_err,
            tolerance,
            passed: max_err <= tolerance,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOutcome {
    pub checks: Vec<CheckResult>,
}

impl VerifyOutcome {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Test hooks that deliberately break a check, used to prove the
/// harness actually detects faults. All off by default.
#[derive(Debug, Clone, Copy, Default)]
pub struct FaultInjection {
    /// Offset added to one analytic gradient entry before comparison.
    pub corrupt_loss_gradient: bool,
}

/// Run the full verification battery.
pub fn run_verification(seed: u64, faults: FaultInjection) -> Result<VerifyOutcome> {
    let mut checks = Vec::new();

    // Finite-difference harness sanity on a quadratic with a known
    // gradient.
    {
        let coeffs = [1.5, -0.5, 2.5];
        let f = |x: &[f64]| {
            x.iter()
                .zip(coeffs.iter())
                .map(|(xi, c)| c * xi * xi)
                .sum::<f64>()
        };
        let x = [0.7, -1.1, 0.4];
        let analytic: Vec<f64> = x
            .iter()
            .zip(coeffs.iter())
            .map(|(xi, c)| 2.0 * c * xi)
            .collect();
        let err = finite_diff_max_rel_err(&f, &x, &analytic, 1e-5);
        checks.push(CheckResult::new("gradcheck-quadratic-selftest", err, 1e-8));
    }

    // Analytic gradients of every objective, with the optional fault.
    for kind in LossKind::ALL {
        let err = gradcheck_with_fault(kind, 4, 8, 0.07, seed, faults.corrupt_loss_gradient)?;
        checks.push(CheckResult::new(
            format!("gradcheck-{}", kind.as_str()),
            err,
            1e-4,
        ));
    }

    // Text encoder backward pass.
    {
        let mut rng = Rng::new(seed ^ 0xe2c0de);
        let mut worst = 0.0f64;
        for case in 0..5 {
            let (vocab, h, d) = (10usize, 4usize, 4usize);
            let params = TextEncoderParams::init(seed.wrapping_add(case), vocab, h, d);
            let len = 1 + rng.below(6);
            let tokens: Vec<usize> = (0..len).map(|_| rng.below(vocab)).collect();
            let upstream: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let analytic = params.encode_text_backward(&tokens, &upstream)?;
            let mut x: Vec<f64> = params.embedding.clone();
            x.extend_from_slice(&params.projection);
            x.extend_from_slice(&params.bias);
            let mut g: Vec<f64> = analytic.embedding.clone();
            g.extend_from_slice(&analytic.projection);
            g.extend_from_slice(&analytic.bias);
            let tokens_c = tokens.clone();
            let upstream_c = upstream.clone();
            let f = move |v: &[f64]| {
                let mut p = TextEncoderParams::init(0, vocab, h, d);
                p.embedding.copy_from_slice(&v[..vocab * h]);
                p.projection.copy_from_slice(&v[vocab * h..vocab * h + h * d]);
                p.bias.copy_from_slice(&v[vocab * h + h * d..]);
                dot(&p.encode_text(&tokens_c).unwrap(), &upstream_c)
            };
            // Smaller step than the loss checks: the normalization of a
            // near-zero preactivation makes the curvature here large.
            worst = worst.max(finite_diff_max_rel_err(&f, &x, &g, 1e-6));
        }
        checks.push(CheckResult::new("gradcheck-text-encoder", worst, 1e-4));
    }

    // Miner equals an exhaustive scan, including ties.
    {
        let mut rng = Rng::new(seed ^ 0x0a1b2c);
        let mut mismatches = 0usize;
        for trial in 0..1000 {
            let d = 2 + rng.below(6);
            let rows = 1 + rng.below(256);
            let mut pool = EmbeddingBatch::random_unit(&mut rng, rows, d);
            if rows >= 2 && trial % 4 == 0 {
                let first = pool.row(0).to_vec();
                let t = 1 + rng.below(rows - 1);
                pool.set_row(t, &first);
            }
            let query = MinerQuery {
                subject: EmbeddingBatch::random_unit(&mut rng, 1, d).row(0).to_vec(),
                negated_object: EmbeddingBatch::random_unit(&mut rng, 1, d).row(0).to_vec(),
                pool,
            };
            let got = mine(&query)?;
            let want = exhaustive_scan(&query)?;
            if got.0 != want.0 {
                mismatches += 1;
            }
        }
        checks.push(CheckResult::new("miner-oracle-equality", mismatches as f64, 0.0));
    }

    // Parser round-trips and negation invariants over fresh samples.
    {
        let world = WorldConfig::default_world();
        let grammar = world.grammar();
        let triplets = generate(&world, 10_000, seed ^ 0x9a55)?;
        let mut failures = 0usize;
        for t in &triplets {
            if caption::decompose(&t.caption, &grammar).map(|p| p != t.parsed).unwrap_or(true) {
                failures += 1;
            }
            let tokens = caption::tokenize(&t.negated.text);
            let markers = tokens
                .iter()
                .filter(|w| matches!(w.as_str(), "no" | "not" | "without"))
                .count();
            if markers != 1 {
                failures += 1;
            }
            if !caption::validate(&t.parsed).is_accept() {
                failures += 1;
            }
        }
        checks.push(CheckResult::new("parser-roundtrip-10k", failures as f64, 0.0));
    }

    // Masking the negated block out of the first term recovers the
    // one-directional baseline cross-entropy exactly.
    {
        let mut rng = Rng::new(seed ^ 0x1f0);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let m = 1 + rng.below(8);
            let d = 3 + rng.below(6);
            let tau = 0.05 + rng.f64() * 0.95;
            let img = EmbeddingBatch::random_unit(&mut rng, m, d);
            let cap = EmbeddingBatch::random_unit(&mut rng, m, d);
            let (masked, _, _) = diag_cross_entropy(&img, &cap, tau)?;
            let brute = brute_force_image_to_text_ce(&img, &cap, tau);
            worst = worst.max((masked - brute).abs());
        }
        checks.push(CheckResult::new("baseline-reduction-equality", worst, 1e-12));
    }

    Ok(VerifyOutcome { checks })
}

/// Gradient check with an optional deliberate corruption of one
/// analytic entry, which must trip the comparison.
fn gradcheck_with_fault(
    kind: LossKind,
    m: usize,
    d: usize,
    tau: f64,
    seed: u64,
    corrupt: bool,
) -> Result<f64> {
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
    let mut analytic = Vec::with_capacity(4 * m * d);
    analytic.extend_from_slice(grads.d_img.data());
    analytic.extend_from_slice(grads.d_cap.data());
    analytic.extend_from_slice(grads.d_cap_neg.data());
    analytic.extend_from_slice(grads.d_img_neg.data());
    if corrupt {
        analytic[0] += 0.5;
    }
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

fn exhaustive_scan(query: &MinerQuery) -> Result<(usize, f64)> {
    let mut best = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for i in 0..query.pool.rows() {
        let x = query.pool.row(i);
        let s = cosine_sim(x, &query.subject)? - cosine_sim(x, &query.negated_object)?;
        if s > best_score {
            best_score = s;
            best = i;
        }
    }
    Ok((best, best_score))
}

fn brute_force_image_to_text_ce(img: &EmbeddingBatch, cap: &EmbeddingBatch, tau: f64) -> f64 {
    let m = img.rows();
    let mut total = 0.0;
    for i in 0..m {
        let mut denom = 0.0;
        for j in 0..m {
            denom += (dot(img.row(i), cap.row(j)) / tau).exp();
        }
        total -= ((dot(img.row(i), cap.row(i)) / tau).exp() / denom).ln();
    }
    total / m as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        let outcome = run_verification(42, FaultInjection::default()).unwrap();
        assert!(
            outcome.all_passed(),
            "failing checks: {:?}",
            outcome
                .checks
                .iter()
                .filter(|c| !c.passed)
                .map(|c| (&c.name, c.max_err))
                .collect::<Vec<_>>()
        );
        assert_eq!(outcome.checks.len(), 10);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let outcome = run_verification(
            42,
            FaultInjection {
                corrupt_loss_gradient: true,
            },
        )
        .unwrap();
        assert!(!outcome.all_passed());
        let failing: Vec<&CheckResult> = outcome.checks.iter().filter(|c| !c.passed).collect();
        assert!(!failing.is_empty());
        assert!(failing.iter().all(|c| c.name.starts_with("gradcheck-") && c.name != "gradcheck-quadratic-selftest"));
    }
}
