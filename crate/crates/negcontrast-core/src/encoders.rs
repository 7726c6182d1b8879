//! Dual encoder: a frozen image encoder over concept basis vectors and
//! a trainable bag-of-tokens text encoder with exact gradients.
//!
//! The image encoder maps a scene to the normalized sum of its
//! concepts' basis rows; the basis is generated once from a seed and
//! never updated. The text encoder is embed -> mean-pool -> affine ->
//! normalize; negation words are ordinary trainable tokens, so any
//! effect they have on matching must be learned.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::caption::tokenize;
use crate::error::{Error, Result};
use crate::scene::Scene;
use crate::tensor::{dot, l2_normalize, Rng};

/// Token-string to id table with a dedicated out-of-vocabulary id.
/// The OOV id is the last row of the embedding table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Build from a token inventory; order is preserved after dedup.
    pub fn new(tokens: Vec<String>) -> Vocab {
        let mut seen = std::collections::BTreeSet::new();
        let tokens: Vec<String> = tokens.into_iter().filter(|t| seen.insert(t.clone())).collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    /// Tokens observed in a dataset's captions, sorted. Useful when no
    /// manifest is available.
    pub fn from_captions<'a>(captions: impl Iterator<Item = &'a str>) -> Vocab {
        let mut set = std::collections::BTreeSet::new();
        for c in captions {
            for t in tokenize(c) {
                set.insert(t);
            }
        }
        Vocab::new(set.into_iter().collect())
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn oov_id(&self) -> usize {
        self.tokens.len()
    }

    /// Rows the embedding table needs: every token plus OOV.
    pub fn table_size(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(self.oov_id())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Tokenize and map; unknown tokens become the OOV id.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }
}

/// Frozen image-side parameters: one unit row per concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageBasis {
    concept_count: usize,
    dim: usize,
    rows: Vec<f64>,
}

impl ImageBasis {
    /// Generate unit gaussian rows from a seed. The same
    /// (seed, concept_count, dim) always yields the same basis.
    ///
    /// Rows are mean-centered before normalization so no direction is
    /// shared by all concepts. Without centering, every scene embedding
    /// leans toward the common mean, and generic "appears everywhere"
    /// tokens can learn that lean and score captions by length alone.
    pub fn generate(seed: u64, concept_count: usize, dim: usize) -> ImageBasis {
        ImageBasis::generate_grouped(seed, &[concept_count], dim)
    }

    /// Like [`ImageBasis::generate`], but each contiguous group of
    /// rows is centered separately. When subjects and objects occupy
    /// their own id ranges, per-group centering makes the expected
    /// scene embedding zero for every caption complexity, since a
    /// scene always draws one subject and K objects.
    pub fn generate_grouped(seed: u64, group_sizes: &[usize], dim: usize) -> ImageBasis {
        let concept_count: usize = group_sizes.iter().sum();
        let mut rng = Rng::new(seed);
        let mut rows = vec![0.0; concept_count * dim];
        for c in 0..concept_count {
            for v in rows[c * dim..(c + 1) * dim].iter_mut() {
                *v = rng.normal();
            }
        }
        let mut start = 0usize;
        for &size in group_sizes {
            if size > 1 {
                let mut mean = vec![0.0; dim];
                for c in start..start + size {
                    for (m, v) in mean.iter_mut().zip(&rows[c * dim..(c + 1) * dim]) {
                        *m += v / size as f64;
                    }
                }
                for c in start..start + size {
                    for (v, m) in rows[c * dim..(c + 1) * dim].iter_mut().zip(&mean) {
                        *v -= m;
                    }
                }
            }
            start += size;
        }
        for c in 0..concept_count {
            let row = &mut rows[c * dim..(c + 1) * dim];
            let norm = dot(row, row).sqrt().max(1e-12);
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        ImageBasis {
            concept_count,
            dim,
            rows,
        }
    }

    pub fn concept_count(&self) -> usize {
        self.concept_count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, concept: u32) -> Result<&[f64]> {
        let c = concept as usize;
        if c >= self.concept_count {
            return Err(Error::UnknownConcept {
                id: concept,
                count: self.concept_count,
            });
        }
        Ok(&self.rows[c * self.dim..(c + 1) * self.dim])
    }

    pub fn data(&self) -> &[f64] {
        &self.rows
    }

    /// Unit-norm embedding of a scene: normalized sum of its concepts'
    /// basis rows. Deterministic; no trainable state.
    pub fn encode_image(&self, scene: &Scene) -> Result<Vec<f64>> {
        debug_assert!(!scene.concepts.is_empty(), "scenes are nonempty");
        let mut acc = vec![0.0; self.dim];
        for c in &scene.concepts {
            let row = self.row(*c)?;
            for (a, r) in acc.iter_mut().zip(row) {
                *a += r;
            }
        }
        l2_normalize(&acc)
    }
}

/// Trainable text-side parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderParams {
    pub vocab_size: usize,
    pub hidden: usize,
    pub dim: usize,
    /// vocab_size x hidden, row-major.
    pub embedding: Vec<f64>,
    /// hidden x dim, row-major; output_j = sum_i m_i * projection[i][j].
    pub projection: Vec<f64>,
    pub bias: Vec<f64>,
}

impl TextEncoderParams {
    /// Embeddings i.i.d. normal scaled 0.02; projection is identity
    /// plus the same small noise; bias starts at zero.
    pub fn init(seed: u64, vocab_size: usize, hidden: usize, dim: usize) -> TextEncoderParams {
        let mut rng = Rng::new(seed);
        let scale = 0.02;
        let embedding = (0..vocab_size * hidden).map(|_| scale * rng.normal()).collect();
        let mut projection: Vec<f64> = (0..hidden * dim).map(|_| scale * rng.normal()).collect();
        for i in 0..hidden.min(dim) {
            projection[i * dim + i] += 1.0;
        }
        TextEncoderParams {
            vocab_size,
            hidden,
            dim,
            embedding,
            projection,
            bias: vec![0.0; dim],
        }
    }

    fn embedding_row(&self, id: usize) -> &[f64] {
        &self.embedding[id * self.hidden..(id + 1) * self.hidden]
    }

    /// Mean-pooled token embeddings through the affine head, before
    /// normalization.
    fn preactivation(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(Error::EmptyTokenList);
        }
        let mut mean = vec![0.0; self.hidden];
        for id in tokens {
            debug_assert!(*id < self.vocab_size, "token id out of table");
            for (m, e) in mean.iter_mut().zip(self.embedding_row(*id)) {
                *m += e;
            }
        }
        let inv = 1.0 / tokens.len() as f64;
        for m in mean.iter_mut() {
            *m *= inv;
        }
        let mut x = self.bias.clone();
        for i in 0..self.hidden {
            let mi = mean[i];
            if mi == 0.0 {
                continue;
            }
            let row = &self.projection[i * self.dim..(i + 1) * self.dim];
            for (xj, w) in x.iter_mut().zip(row) {
                *xj += mi * w;
            }
        }
        Ok(x)
    }

    /// Unit-norm text embedding.
    pub fn encode_text(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        l2_normalize(&self.preactivation(tokens)?)
    }

    /// Exact chain rule from an upstream gradient on the *normalized*
    /// output back to the parameters, accumulated into `grads`.
    /// Duplicate tokens receive the sum of their occurrences'
    /// contributions.
    pub fn encode_text_backward_into(
        &self,
        tokens: &[usize],
        upstream: &[f64],
        grads: &mut TextGrads,
    ) -> Result<()> {
        if upstream.len() != self.dim {
            return Err(Error::DimMismatch {
                left: upstream.len(),
                right: self.dim,
            });
        }
        let x = self.preactivation(tokens)?;
        let norm = dot(&x, &x).sqrt();
        if norm < 1e-12 {
            return Err(Error::ZeroVector);
        }
        let u: Vec<f64> = x.iter().map(|v| v / norm).collect();

        // d u / d x = (I - u u^T) / |x|
        let proj = dot(&u, upstream);
        let g_x: Vec<f64> = upstream
            .iter()
            .zip(&u)
            .map(|(g, ui)| (g - proj * ui) / norm)
            .collect();

        // Bias.
        for (gb, gx) in grads.bias.iter_mut().zip(&g_x) {
            *gb += gx;
        }

        // Projection and pooled mean.
        let mut mean = vec![0.0; self.hidden];
        for id in tokens {
            for (m, e) in mean.iter_mut().zip(self.embedding_row(*id)) {
                *m += e;
            }
        }
        let inv = 1.0 / tokens.len() as f64;
        for m in mean.iter_mut() {
            *m *= inv;
        }

        let mut g_mean = vec![0.0; self.hidden];
        for i in 0..self.hidden {
            let w_row = &self.projection[i * self.dim..(i + 1) * self.dim];
            let g_row = &mut grads.projection[i * self.dim..(i + 1) * self.dim];
            let mut acc = 0.0;
            for j in 0..self.dim {
                g_row[j] += mean[i] * g_x[j];
                acc += w_row[j] * g_x[j];
            }
            g_mean[i] = acc;
        }

        // Embedding rows of the tokens used; duplicates accumulate.
        for id in tokens {
            let g_row = &mut grads.embedding[id * self.hidden..(id + 1) * self.hidden];
            for (g, gm) in g_row.iter_mut().zip(&g_mean) {
                *g += gm * inv;
            }
        }
        Ok(())
    }

    /// Convenience wrapper returning fresh gradients.
    pub fn encode_text_backward(&self, tokens: &[usize], upstream: &[f64]) -> Result<TextGrads> {
        let mut grads = TextGrads::zeros_like(self);
        self.encode_text_backward_into(tokens, upstream, &mut grads)?;
        Ok(grads)
    }
}

/// Gradients shaped like [`TextEncoderParams`].
#[derive(Debug, Clone)]
pub struct TextGrads {
    pub embedding: Vec<f64>,
    pub projection: Vec<f64>,
    pub bias: Vec<f64>,
}

impl TextGrads {
    pub fn zeros_like(params: &TextEncoderParams) -> TextGrads {
        TextGrads {
            embedding: vec![0.0; params.embedding.len()],
            projection: vec![0.0; params.projection.len()],
            bias: vec![0.0; params.bias.len()],
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.embedding
            .iter()
            .chain(&self.projection)
            .chain(&self.bias)
            .fold(0.0f64, |acc, g| acc.max(g.abs()))
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned bundle of everything needed to score a dataset: the
/// frozen basis, the text parameters, and the vocabulary, stamped with
/// the seed and configuration hash of the run that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub vocab: Vec<String>,
    pub basis: ImageBasis,
    pub text: TextEncoderParams,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let ckpt: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                expected: CHECKPOINT_VERSION,
                got: ckpt.version,
            });
        }
        Ok(ckpt)
    }

    pub fn vocab(&self) -> Vocab {
        let mut v = Vocab {
            tokens: self.vocab.clone(),
            index: HashMap::new(),
        };
        v.rebuild_index();
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::finite_diff_max_rel_err;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn orthonormal_basis() -> ImageBasis {
        ImageBasis {
            concept_count: 2,
            dim: 2,
            rows: vec![1.0, 0.0, 0.0, 1.0],
        }
    }

    #[test]
    fn single_concept_scene_is_its_basis_row() {
        let basis = ImageBasis::generate(3, 5, 8);
        let scene = Scene {
            id: 0,
            concepts: vec![2],
        };
        let e = basis.encode_image(&scene).unwrap();
        let row = basis.row(2).unwrap();
        for (a, b) in e.iter().zip(row) {
            assert!(close(*a, *b, 1e-12));
        }
    }

    #[test]
    fn two_orthonormal_concepts_average() {
        let basis = orthonormal_basis();
        let scene = Scene {
            id: 0,
            concepts: vec![0, 1],
        };
        let e = basis.encode_image(&scene).unwrap();
        let r = 1.0 / 2.0f64.sqrt();
        assert!(close(e[0], r, 1e-12));
        assert!(close(e[1], r, 1e-12));
    }

    #[test]
    fn unknown_concept_errors() {
        let basis = orthonormal_basis();
        let scene = Scene {
            id: 0,
            concepts: vec![9],
        };
        assert!(matches!(
            basis.encode_image(&scene),
            Err(Error::UnknownConcept { id: 9, count: 2 })
        ));
    }

    #[test]
    fn basis_is_frozen_and_reproducible() {
        let a = ImageBasis::generate(11, 20, 16);
        let b = ImageBasis::generate(11, 20, 16);
        assert_eq!(a.data(), b.data());
        for c in 0..20 {
            let row = a.row(c as u32).unwrap();
            assert!(close(dot(row, row).sqrt(), 1.0, 1e-9));
        }
    }

    fn identity_text(vocab_size: usize, d: usize) -> TextEncoderParams {
        let mut p = TextEncoderParams::init(0, vocab_size, d, d);
        p.embedding = vec![0.0; vocab_size * d];
        p.projection = vec![0.0; d * d];
        for i in 0..d {
            p.projection[i * d + i] = 1.0;
        }
        p.bias = vec![0.0; d];
        p
    }

    #[test]
    fn mean_pool_matches_hand_computation() {
        let mut p = identity_text(2, 2);
        p.embedding = vec![1.0, 0.0, 0.0, 1.0];
        let e = p.encode_text(&[0, 1]).unwrap();
        let r = 1.0 / 2.0f64.sqrt();
        assert!(close(e[0], r, 1e-12));
        assert!(close(e[1], r, 1e-12));

        let single = p.encode_text(&[0]).unwrap();
        assert!(close(single[0], 1.0, 1e-12));
        assert!(close(single[1], 0.0, 1e-12));
    }

    #[test]
    fn empty_token_list_errors() {
        let p = identity_text(2, 2);
        assert!(matches!(p.encode_text(&[]), Err(Error::EmptyTokenList)));
    }

    #[test]
    fn vocab_oov_mapping() {
        let v = Vocab::new(vec!["a".into(), "dog".into()]);
        assert_eq!(v.id("dog"), 1);
        assert_eq!(v.id("unseen"), v.oov_id());
        assert_eq!(v.table_size(), 3);
        assert_eq!(v.encode("A DOG zzz"), vec![0, 1, 2]);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let p = TextEncoderParams::init(5, 10, 4, 4);
        let g = p.encode_text_backward(&[1, 2, 3], &[0.0; 4]).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        // 20 random configurations, token lists of length 1..=6 with
        // possible duplicates.
        let mut rng = Rng::new(77);
        for case in 0..20 {
            let (vocab, h, d) = (10usize, 4usize, 4usize);
            let params = TextEncoderParams::init(1000 + case, vocab, h, d);
            let len = 1 + rng.below(6);
            let tokens: Vec<usize> = (0..len).map(|_| rng.below(vocab)).collect();
            let upstream: Vec<f64> = (0..d).map(|_| rng.normal()).collect();

            let analytic = params.encode_text_backward(&tokens, &upstream).unwrap();
            let mut flat_params: Vec<f64> = params.embedding.clone();
            flat_params.extend_from_slice(&params.projection);
            flat_params.extend_from_slice(&params.bias);
            let mut flat_grads: Vec<f64> = analytic.embedding.clone();
            flat_grads.extend_from_slice(&analytic.projection);
            flat_grads.extend_from_slice(&analytic.bias);

            let tokens_c = tokens.clone();
            let upstream_c = upstream.clone();
            let f = move |x: &[f64]| {
                let mut p = TextEncoderParams::init(0, vocab, h, d);
                p.embedding.copy_from_slice(&x[..vocab * h]);
                p.projection.copy_from_slice(&x[vocab * h..vocab * h + h * d]);
                p.bias.copy_from_slice(&x[vocab * h + h * d..]);
                let u = p.encode_text(&tokens_c).unwrap();
                dot(&u, &upstream_c)
            };
            let err = finite_diff_max_rel_err(&f, &flat_params, &flat_grads, 1e-5);
            assert!(err < 1e-4, "case {case}: max relative error {err}");
        }
    }

    #[test]
    fn duplicate_tokens_sum_contributions() {
        let params = TextEncoderParams::init(42, 6, 3, 3);
        let upstream = [0.3, -0.7, 0.2];
        let dup = params.encode_text_backward(&[2, 2], &upstream).unwrap();
        let single = params.encode_text_backward(&[2], &upstream).unwrap();
        // [2, 2] pools to the same mean as [2], so the total gradient
        // matches and is split across the two occurrences.
        for (a, b) in dup.embedding.iter().zip(single.embedding.iter()) {
            assert!(close(*a, *b, 1e-12));
        }
    }

    #[test]
    fn emitted_embeddings_are_unit_norm() {
        let basis = ImageBasis::generate(9, 12, 6);
        let params = TextEncoderParams::init(10, 8, 6, 6);
        let scene = Scene {
            id: 1,
            concepts: vec![0, 3, 7],
        };
        let ei = basis.encode_image(&scene).unwrap();
        let et = params.encode_text(&[1, 5, 5, 2]).unwrap();
        assert!(close(dot(&ei, &ei).sqrt(), 1.0, 1e-6));
        assert!(close(dot(&et, &et).sqrt(), 1.0, 1e-6));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            seed: 7,
            config_hash: "abc".into(),
            vocab: vec!["a".into(), "dog".into()],
            basis: ImageBasis::generate(7, 4, 4),
            text: TextEncoderParams::init(8, 3, 4, 4),
        };
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.seed, 7);
        assert_eq!(back.basis, ckpt.basis);
        assert_eq!(back.text, ckpt.text);
        assert_eq!(back.vocab().id("dog"), 1);
        assert_eq!(back.vocab().id("zzz"), 2);
    }

    #[test]
    fn checkpoint_version_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let mut ckpt = Checkpoint {
            version: 99,
            seed: 0,
            config_hash: String::new(),
            vocab: vec![],
            basis: ImageBasis::generate(0, 2, 2),
            text: TextEncoderParams::init(0, 2, 2, 2),
        };
        ckpt.vocab = vec!["x".into()];
        std::fs::write(&path, serde_json::to_string(&ckpt).unwrap()).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(Error::CheckpointVersion { got: 99, .. })
        ));
    }
}
