//! Category-level prototype dictionary: one entry per source class and per
//! target cluster, rebuilt from centroids every epoch and moved towards each
//! query by an exponential moving average in between.

use std::collections::{BTreeMap, HashMap};

use ndarray::{Array2, ArrayView2};

use crate::data::Domain;
use crate::error::{PdlError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub vector: Vec<f64>,
    pub category_id: usize,
    pub domain: Domain,
    pub member_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeDictionary {
    prototypes: Vec<Prototype>,
    n_source: usize,
    momentum: f64,
    rows: HashMap<(Domain, usize), usize>,
}

/// Per-label mean of the rows carrying that label, with member counts.
/// Rows labelled `None` are skipped.
pub fn class_centroids<I>(features: ArrayView2<'_, f64>, labels: I) -> BTreeMap<usize, (Vec<f64>, usize)>
where
    I: IntoIterator<Item = Option<usize>>,
{
    let d = features.ncols();
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (row, label) in features.rows().into_iter().zip(labels) {
        if let Some(l) = label {
            let e = sums.entry(l).or_insert_with(|| (vec![0.0; d], 0));
            e.0.iter_mut().zip(row).for_each(|(s, v)| *s += v);
            e.1 += 1;
        }
    }
    for (sum, n) in sums.values_mut() {
        let inv = 1.0 / *n as f64;
        sum.iter_mut().for_each(|s| *s *= inv);
    }
    sums
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    } else {
        log::warn!("prototype collapsed to the zero vector");
    }
}

impl PrototypeDictionary {
    /// Builds the dictionary from labelled source features and
    /// pseudo-labelled target features (noise is `None`). Source block first.
    pub fn init(
        source_features: ArrayView2<'_, f64>,
        source_labels: &[usize],
        target_features: ArrayView2<'_, f64>,
        target_labels: &[Option<usize>],
        momentum: f64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(PdlError::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        if source_labels.len() != source_features.nrows() || target_labels.len() != target_features.nrows() {
            return Err(PdlError::Argument("label count does not match feature rows".into()));
        }
        let src = class_centroids(source_features, source_labels.iter().map(|&l| Some(l)));
        let tgt = class_centroids(target_features, target_labels.iter().copied());
        if src.is_empty() && tgt.is_empty() {
            return Err(PdlError::Init("no source classes and no target clusters".into()));
        }
        let mut prototypes = Vec::with_capacity(src.len() + tgt.len());
        for (domain, table) in [(Domain::Source, src), (Domain::Target, tgt)] {
            for (category_id, (mut vector, member_count)) in table {
                normalize(&mut vector);
                prototypes.push(Prototype {
                    vector,
                    category_id,
                    domain,
                    member_count,
                });
            }
        }
        let n_source = prototypes.iter().filter(|p| p.domain == Domain::Source).count();
        let rows = prototypes
            .iter()
            .enumerate()
            .map(|(i, p)| ((p.domain, p.category_id), i))
            .collect();
        Ok(PrototypeDictionary {
            prototypes,
            n_source,
            momentum,
            rows,
        })
    }

    pub fn prototypes(&self) -> &[Prototype] {
        &self.prototypes
    }

    pub fn capacity(&self) -> usize {
        self.prototypes.len()
    }

    pub fn n_source(&self) -> usize {
        self.n_source
    }

    pub fn n_target(&self) -> usize {
        self.prototypes.len() - self.n_source
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn dim(&self) -> usize {
        self.prototypes.first().map_or(0, |p| p.vector.len())
    }

    pub fn positive_index(&self, domain: Domain, category_id: usize) -> Result<usize> {
        self.rows
            .get(&(domain, category_id))
            .copied()
            .ok_or_else(|| PdlError::Argument(format!("no {domain:?} prototype for category {category_id}")))
    }

    /// All prototypes as rows, in dictionary order.
    pub fn lookup_all(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.capacity(), self.dim()));
        for (i, p) in self.prototypes.iter().enumerate() {
            m.row_mut(i).iter_mut().zip(&p.vector).for_each(|(d, s)| *d = *s);
        }
        m
    }

    /// `p <- m p + (1 - m) q`, then renormalised.
    pub fn momentum_update(&mut self, domain: Domain, category_id: usize, query: &[f64]) -> Result<()> {
        let row = self.positive_index(domain, category_id)?;
        self.update_row(row, query)
    }

    pub fn update_row(&mut self, row: usize, query: &[f64]) -> Result<()> {
        let m = self.momentum;
        let p = self
            .prototypes
            .get_mut(row)
            .ok_or_else(|| PdlError::Argument(format!("prototype row {row} out of range")))?;
        if query.len() != p.vector.len() {
            return Err(PdlError::Argument(format!(
                "query has dimension {}, prototypes have {}",
                query.len(),
                p.vector.len()
            )));
        }
        p.vector
            .iter_mut()
            .zip(query)
            .for_each(|(v, q)| *v = m * *v + (1.0 - m) * q);
        normalize(&mut p.vector);
        Ok(())
    }
}
