//! Retrieval metrics: mean average precision and CMC under the cross-camera
//! protocol (gallery items sharing both identity and camera with the query
//! are removed before scoring).

use std::collections::BTreeMap;
use std::fmt;

use ndarray::ArrayView2;
use rayon::prelude::*;

use crate::error::{PdlError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Meta {
    pub identity: usize,
    pub camera_id: usize,
}

pub fn meta_from(identities: &[usize], camera_ids: &[usize]) -> Vec<Meta> {
    identities
        .iter()
        .zip(camera_ids)
        .map(|(&identity, &camera_id)| Meta { identity, camera_id })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub map: f64,
    pub cmc: BTreeMap<usize, f64>,
    pub n_valid_queries: usize,
    /// Queries with no cross-camera match in the gallery.
    pub n_excluded: usize,
}

impl RetrievalResult {
    pub fn rank(&self, r: usize) -> f64 {
        self.cmc.get(&r).copied().unwrap_or(f64::NAN)
    }
}

impl fmt::Display for RetrievalResult {
    /// `mAP=<f> rank1=<f> rank5=<f> rank10=<f> excluded=<n>`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "mAP={:.6} rank1={:.6} rank5={:.6} rank10={:.6} excluded={}",
            self.map,
            self.rank(1),
            self.rank(5),
            self.rank(10),
            self.n_excluded
        )
    }
}

pub const DEFAULT_RANKS: [usize; 3] = [1, 5, 10];

/// Gallery indices ordered by ascending Euclidean distance, ties by index.
pub fn rank_list(query: ArrayView2<'_, f64>, gallery: ArrayView2<'_, f64>) -> Vec<Vec<usize>> {
    (0..query.nrows())
        .into_par_iter()
        .map(|qi| {
            let q = query.row(qi);
            let dist: Vec<f64> = gallery
                .rows()
                .into_iter()
                .map(|g| q.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .collect();
            let mut order: Vec<usize> = (0..gallery.nrows()).collect();
            order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
            order
        })
        .collect()
}

pub fn evaluate(
    query: ArrayView2<'_, f64>,
    gallery: ArrayView2<'_, f64>,
    query_meta: &[Meta],
    gallery_meta: &[Meta],
    ranks: &[usize],
) -> Result<RetrievalResult> {
    if query.nrows() != query_meta.len() || gallery.nrows() != gallery_meta.len() {
        return Err(PdlError::Argument("metadata length does not match embeddings".into()));
    }
    if query.ncols() != gallery.ncols() {
        return Err(PdlError::Argument("query and gallery dimensions differ".into()));
    }
    if query.iter().chain(gallery.iter()).any(|v| !v.is_finite()) {
        return Err(PdlError::numeric("evaluate", "non-finite embedding"));
    }
    let lists = rank_list(query, gallery);
    let mut ap_sum = 0.0;
    let mut hits = vec![0usize; ranks.len()];
    let mut valid = 0;
    for (qi, order) in lists.iter().enumerate() {
        let qm = query_meta[qi];
        let mut position = 0usize;
        let mut found = 0usize;
        let mut precision_sum = 0.0;
        let mut first_hit = None;
        for &g in order {
            let gm = gallery_meta[g];
            if gm.identity == qm.identity && gm.camera_id == qm.camera_id {
                continue;
            }
            position += 1;
            if gm.identity == qm.identity {
                found += 1;
                precision_sum += found as f64 / position as f64;
                first_hit.get_or_insert(position);
            }
        }
        let Some(first) = first_hit else { continue };
        valid += 1;
        ap_sum += precision_sum / found as f64;
        for (h, &r) in hits.iter_mut().zip(ranks) {
            if first <= r {
                *h += 1;
            }
        }
    }
    let denom = valid.max(1) as f64;
    Ok(RetrievalResult {
        map: if valid == 0 { 0.0 } else { ap_sum / denom },
        cmc: ranks
            .iter()
            .zip(&hits)
            .map(|(&r, &h)| (r, if valid == 0 { 0.0 } else { h as f64 / denom }))
            .collect(),
        n_valid_queries: valid,
        n_excluded: query.nrows() - valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn m(identity: usize, camera_id: usize) -> Meta {
        Meta { identity, camera_id }
    }

    #[test]
    fn perfect_ranking() {
        let q = array![[1.0, 0.0], [0.0, 1.0]];
        let g = array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]];
        let r = evaluate(
            q.view(),
            g.view(),
            &[m(0, 0), m(1, 0)],
            &[m(0, 1), m(1, 1), m(2, 1)],
            &DEFAULT_RANKS,
        )
        .unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.rank(1), 1.0);
    }

    #[test]
    fn relevant_at_ranks_one_and_three() {
        let q = array![[0.0]];
        let g = array![[1.0], [2.0], [3.0], [4.0]];
        let gm = [m(7, 1), m(8, 1), m(7, 2), m(9, 1)];
        let r = evaluate(q.view(), g.view(), &[m(7, 0)], &gm, &[1, 2]).unwrap();
        assert!((r.map - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(r.rank(1), 1.0);
    }

    #[test]
    fn junk_is_skipped_and_zero_relevant_excluded() {
        let q = array![[0.0], [0.0]];
        let g = array![[1.0], [2.0], [3.0]];
        // query 0: nearest is same id + same cam (junk), then a cross-camera match
        // query 1: only same-camera matches -> excluded
        let gm = [m(1, 0), m(1, 1), m(2, 0)];
        let r = evaluate(q.view(), g.view(), &[m(1, 0), m(2, 0)], &gm, &[1]).unwrap();
        assert_eq!(r.n_valid_queries, 1);
        assert_eq!(r.n_excluded, 1);
        assert_eq!(r.map, 1.0);
        assert_eq!(r.rank(1), 1.0);
    }

    #[test]
    fn rank_list_ties_and_hand_order() {
        let q = array![[0.0, 0.0]];
        let g = array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]];
        assert_eq!(rank_list(q.view(), g.view()), vec![vec![0, 1, 2]]);
        let g = array![[3.0, 0.0], [0.5, 0.0], [0.0, -2.0]];
        assert_eq!(rank_list(q.view(), g.view()), vec![vec![1, 2, 0]]);
    }

    #[test]
    fn metrics_line_has_five_fields() {
        let r = RetrievalResult {
            map: 0.5,
            cmc: DEFAULT_RANKS.iter().map(|&k| (k, 0.25)).collect(),
            n_valid_queries: 3,
            n_excluded: 1,
        };
        let line = r.to_string();
        assert_eq!(line.split_whitespace().count(), 5);
        assert!(line.starts_with("mAP=0.500000 rank1="));
    }
}
