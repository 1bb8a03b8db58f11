//! Per-training-image attribution scores and top-K selection.

mod influence;
mod scores;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::container::{read_file, write_atomic};
use crate::data::Dataset;
use crate::error::{Error, Result};

pub use influence::{
    average_tables, score_influence_projected, score_single_timestep_variant, InfluenceConfig, InfluenceIndex,
};
pub use scores::{
    loss_table, random_scores, score_pixel_cosine, score_unlearning, score_unlearning_from, LossScoring, LossTable,
};

pub const UNLEARNING: &str = "unlearning";
pub const PIXEL_COSINE: &str = "pixel_cosine";
pub const INFLUENCE_PROJECTED: &str = "influence_projected";
pub const SINGLE_TIMESTEP: &str = "single_timestep";
pub const RANDOM: &str = "random";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub id: u64,
    pub score: f64,
    /// Score of the horizontally flipped image, when flips are scored.
    pub score_flipped: Option<f64>,
    pub score_final: f64,
}

impl ScoreRow {
    pub fn new(id: u64, score: f64, score_flipped: Option<f64>) -> Self {
        Self {
            id,
            score,
            score_flipped,
            score_final: score_flipped.map_or(score, |f| score.max(f)),
        }
    }
}

/// Scores `τ` for every live id of a dataset, sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub method: String,
    pub query_id: u64,
    pub query_hash: String,
    pub rows: Vec<ScoreRow>,
    pub params: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    method: String,
    query_id: u64,
    query_hash: String,
    params: serde_json::Value,
    rows: usize,
}

impl ScoreTable {
    pub fn new(method: &str, query_id: u64, query_hash: String, mut rows: Vec<ScoreRow>, params: serde_json::Value) -> Result<Self> {
        rows.sort_by_key(|r| r.id);
        if rows.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(Error::Validation("score table has duplicate ids".into()));
        }
        if let Some(r) = rows.iter().find(|r| !r.score_final.is_finite() || !r.score.is_finite()) {
            return Err(Error::Numeric {
                context: format!("{method} score for id {}", r.id),
                segment: String::new(),
            });
        }
        Ok(Self {
            method: method.to_string(),
            query_id,
            query_hash,
            rows,
            params,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<f64> {
        self.rows
            .binary_search_by_key(&id, |r| r.id)
            .ok()
            .map(|i| self.rows[i].score_final)
    }

    pub fn finals(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.score_final).collect()
    }

    /// Checks that the table has exactly one score per live id of `ds`.
    pub fn check_covers(&self, ds: &Dataset) -> Result<()> {
        if self.rows.len() != ds.len() || self.rows.iter().zip(ds.ids()).any(|(r, id)| r.id != id) {
            return Err(Error::Validation(format!("{} table does not match the dataset ids", self.method)));
        }
        Ok(())
    }

    fn sidecar_path(csv_path: &Path) -> PathBuf {
        csv_path.with_extension("json")
    }

    /// Writes `id,score,score_flipped,score_final` to `csv_path` and the
    /// metadata to the same name with a `.json` extension.
    pub fn write(&self, csv_path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        write_atomic(csv_path, &bytes)?;
        let side = Sidecar {
            method: self.method.clone(),
            query_id: self.query_id,
            query_hash: self.query_hash.clone(),
            params: self.params.clone(),
            rows: self.rows.len(),
        };
        write_atomic(&Self::sidecar_path(csv_path), serde_json::to_string_pretty(&side)?.as_bytes())
    }

    pub fn read(csv_path: &Path) -> Result<Self> {
        let bytes = read_file(csv_path)?;
        let rows = csv::Reader::from_reader(bytes.as_slice())
            .deserialize()
            .collect::<std::result::Result<Vec<ScoreRow>, _>>()?;
        let side_path = Self::sidecar_path(csv_path);
        let side: Sidecar = serde_json::from_slice(&read_file(&side_path)?)?;
        if side.rows != rows.len() {
            return Err(Error::format(csv_path, "row count disagrees with sidecar"));
        }
        Self::new(&side.method, side.query_id, side.query_hash, rows, side.params)
    }
}

/// Ids of the `k` largest final scores, ties broken by ascending id.
pub fn top_k(st: &ScoreTable, k: usize) -> Result<Vec<u64>> {
    crate::error::check_range("k", k, 1, st.len().max(1))?;
    if st.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut order: Vec<&ScoreRow> = st.rows.iter().collect();
    order.sort_by(|a, b| b.score_final.total_cmp(&a.score_final).then(a.id.cmp(&b.id)));
    Ok(order.into_iter().take(k).map(|r| r.id).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(scores: &[f64]) -> ScoreTable {
        let rows = scores.iter().enumerate().map(|(i, &s)| ScoreRow::new(i as u64, s, None)).collect();
        ScoreTable::new("t", 0, String::new(), rows, serde_json::Value::Null).unwrap()
    }

    #[test]
    fn top_k_ties_by_id() {
        let st = table(&[1.0; 6]);
        assert_eq!(top_k(&st, 3).unwrap(), vec![0, 1, 2]);
        let st = table(&[0.5, 2.0, 0.5, 3.0]);
        assert_eq!(top_k(&st, 4).unwrap(), vec![3, 1, 0, 2]);
        assert!(top_k(&st, 0).is_err());
        assert!(top_k(&st, 5).is_err());
    }

    #[test]
    fn final_is_max_over_flip() {
        assert_eq!(ScoreRow::new(1, 0.2, Some(0.7)).score_final, 0.7);
        assert_eq!(ScoreRow::new(1, 0.2, Some(-0.7)).score_final, 0.2);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![ScoreRow::new(4, 0.25, Some(-1.0)), ScoreRow::new(2, -3.5e-9, None)];
        let st = ScoreTable::new("m", 9, "abc".into(), rows, serde_json::json!({"k": 1})).unwrap();
        let path = dir.path().join("scores.csv");
        st.write(&path).unwrap();
        assert_eq!(ScoreTable::read(&path).unwrap(), st);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("id,score,score_flipped,score_final\n2,"));
    }

    #[test]
    fn rejects_non_finite() {
        let rows = vec![ScoreRow::new(0, f64::NAN, None)];
        assert!(ScoreTable::new("m", 0, String::new(), rows, serde_json::Value::Null).is_err());
    }

    proptest! {
        #[test]
        fn top_k_matches_full_sort(scores in proptest::collection::vec(-5i32..5, 1..40), k_frac in 0.0f64..1.0) {
            let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let st = table(&scores);
            let k = 1 + ((scores.len() - 1) as f64 * k_frac) as usize;
            let mut oracle: Vec<(f64, u64)> = scores.iter().enumerate().map(|(i, &s)| (s, i as u64)).collect();
            oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let expect: Vec<u64> = oracle.into_iter().take(k).map(|p| p.1).collect();
            prop_assert_eq!(top_k(&st, k).unwrap(), expect);
        }

        #[test]
        fn top_k_invariant_to_constant_shift(scores in proptest::collection::vec(-100.0f64..100.0, 1..40), shift in -1e3f64..1e3, k in 1usize..40) {
            let k = k.min(scores.len());
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            // shifting can merge near-equal values under rounding; compare on exactly representable grids
            let grid: Vec<f64> = scores.iter().map(|s| (s * 8.0).round() / 8.0).collect();
            let grid_shifted: Vec<f64> = grid.iter().map(|s| s + shift.round()).collect();
            prop_assert_eq!(top_k(&table(&grid), k).unwrap(), top_k(&table(&grid_shifted), k).unwrap());
            prop_assert_eq!(top_k(&table(&shifted), k).unwrap().len(), k);
        }
    }
}
