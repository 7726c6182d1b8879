//! Distractor-image mining: pick the pool image that best represents
//! the subject while least representing the negated object, i.e. the
//! argmax of cosine(x, s) - cosine(x, o_n) over the pool. Ties break
//! toward the lowest index. The default pipeline builds distractors by
//! set difference instead; this miner exists for building alternative
//! distractor sets from an arbitrary pool.

use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{cosine_sim, EmbeddingBatch};

/// Subject embedding, negated-object embedding, and the candidate
/// pool, one row per image. All unit-norm with matching dimension.
#[derive(Debug, Clone)]
pub struct MinerQuery {
    pub subject: Vec<f64>,
    pub negated_object: Vec<f64>,
    pub pool: EmbeddingBatch,
}

/// Index and score of the best candidate.
pub fn mine(query: &MinerQuery) -> Result<(usize, f64)> {
    if query.pool.rows() == 0 {
        return Err(Error::EmptyPool);
    }
    if query.subject.len() != query.pool.dim() || query.negated_object.len() != query.pool.dim() {
        return Err(Error::DimMismatch {
            left: query.subject.len(),
            right: query.pool.dim(),
        });
    }
    let mut best_idx = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for i in 0..query.pool.rows() {
        let x = query.pool.row(i);
        let score = cosine_sim(x, &query.subject)? - cosine_sim(x, &query.negated_object)?;
        if score > best_score {
            best_score = score;
            best_idx = i;
        }
    }
    Ok((best_idx, best_score))
}

#[derive(Debug, Serialize, Deserialize)]
struct PoolRecord {
    id: u64,
    embedding: Vec<f64>,
}

/// Load a pool dump (one `{"id": ..., "embedding": [...]}` object per
/// line). Rows are normalized on load, so any positive rescaling of a
/// stored row selects the same candidates.
pub fn load_pool(path: &Path) -> Result<(Vec<u64>, EmbeddingBatch)> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PoolRecord = serde_json::from_str(&line).map_err(|e| Error::SchemaError {
            line: i + 1,
            message: e.to_string(),
        })?;
        ids.push(rec.id);
        rows.push(rec.embedding);
    }
    if rows.is_empty() {
        return Err(Error::EmptyPool);
    }
    let mut pool = EmbeddingBatch::from_rows(&rows)?;
    pool.normalize_rows()?;
    Ok((ids, pool))
}

pub fn write_pool(ids: &[u64], pool: &EmbeddingBatch, path: &Path) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (i, id) in ids.iter().enumerate() {
        let rec = PoolRecord {
            id: *id,
            embedding: pool.row(i).to_vec(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn hand_scanned_example() {
        let query = MinerQuery {
            subject: vec![1.0, 0.0],
            negated_object: vec![0.0, 1.0],
            pool: EmbeddingBatch::from_rows(&[vec![1.0, 0.0], vec![0.6, 0.8]]).unwrap(),
        };
        // Scores: 1.0 - 0.0 = 1.0 and 0.6 - 0.8 = -0.2.
        let (idx, score) = mine(&query).unwrap();
        assert_eq!(idx, 0);
        assert!((score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_row_pool() {
        let query = MinerQuery {
            subject: vec![0.0, 1.0],
            negated_object: vec![1.0, 0.0],
            pool: EmbeddingBatch::from_rows(&[vec![0.6, 0.8]]).unwrap(),
        };
        assert_eq!(mine(&query).unwrap().0, 0);
    }

    #[test]
    fn ties_break_to_lowest_index() {
        let row = vec![0.6, 0.8];
        let query = MinerQuery {
            subject: vec![1.0, 0.0],
            negated_object: vec![0.0, 1.0],
            pool: EmbeddingBatch::from_rows(&[row.clone(), row]).unwrap(),
        };
        assert_eq!(mine(&query).unwrap().0, 0);
    }

    #[test]
    fn empty_pool_errors() {
        // A pool cannot be built with zero rows; the loader reports it.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(matches!(load_pool(&path), Err(Error::EmptyPool)));
    }

    /// Independently coded linear scan used as the oracle.
    fn exhaustive_scan(query: &MinerQuery) -> (usize, f64) {
        let mut scores = Vec::new();
        for i in 0..query.pool.rows() {
            let x = query.pool.row(i);
            scores.push(
                cosine_sim(x, &query.subject).unwrap()
                    - cosine_sim(x, &query.negated_object).unwrap(),
            );
        }
        let mut best = 0;
        for i in 1..scores.len() {
            if scores[i] > scores[best] {
                best = i;
            }
        }
        (best, scores[best])
    }

    #[test]
    fn matches_exhaustive_scan_on_random_queries() {
        let mut rng = Rng::new(88);
        for trial in 0..1000 {
            let d = 2 + rng.below(6);
            let rows = 1 + rng.below(256);
            let mut pool = EmbeddingBatch::random_unit(&mut rng, rows, d);
            // Inject exact duplicates so ties actually occur.
            if rows >= 2 && trial % 3 == 0 {
                let first = pool.row(0).to_vec();
                let target = 1 + rng.below(rows - 1);
                pool.set_row(target, &first);
            }
            let query = MinerQuery {
                subject: EmbeddingBatch::random_unit(&mut rng, 1, d).row(0).to_vec(),
                negated_object: EmbeddingBatch::random_unit(&mut rng, 1, d).row(0).to_vec(),
                pool,
            };
            let got = mine(&query).unwrap();
            let want = exhaustive_scan(&query);
            assert_eq!(got.0, want.0, "trial {trial}");
            assert_eq!(got.1.to_bits(), want.1.to_bits(), "trial {trial}");
        }
    }

    #[test]
    fn pool_rescaling_does_not_change_selection() {
        let mut rng = Rng::new(13);
        let dir = tempfile::tempdir().unwrap();
        for trial in 0..50 {
            let d = 3;
            let rows = 2 + rng.below(40);
            let pool = EmbeddingBatch::random_unit(&mut rng, rows, d);
            let ids: Vec<u64> = (0..rows as u64).collect();
            let subject = EmbeddingBatch::random_unit(&mut rng, 1, d).row(0).to_vec();
            let negated = EmbeddingBatch::random_unit(&mut rng, 1, d).row(0).to_vec();

            let plain = dir.path().join(format!("plain{trial}.jsonl"));
            write_pool(&ids, &pool, &plain).unwrap();

            let mut scaled = pool.clone();
            for i in 0..rows {
                let alpha = 0.1 + 10.0 * rng.f64();
                for v in scaled.row_mut(i) {
                    *v *= alpha;
                }
            }
            let scaled_path = dir.path().join(format!("scaled{trial}.jsonl"));
            write_pool(&ids, &scaled, &scaled_path).unwrap();

            let (_, p1) = load_pool(&plain).unwrap();
            let (_, p2) = load_pool(&scaled_path).unwrap();
            let q1 = MinerQuery {
                subject: subject.clone(),
                negated_object: negated.clone(),
                pool: p1,
            };
            let q2 = MinerQuery {
                subject,
                negated_object: negated,
                pool: p2,
            };
            assert_eq!(mine(&q1).unwrap().0, mine(&q2).unwrap().0);
        }
    }
}
