//! Epoch-level training loop.
//!
//! Each epoch extracts features for both domains, pseudo-labels the target
//! domain with DBSCAN over k-reciprocal Jaccard distances, rebuilds the
//! prototype dictionary from scratch and then runs mixed source/target
//! mini-batches. Within one iteration the loss is computed against the
//! dictionary as it stood before the batch, every query then moves its own
//! prototype (ascending sample order), and finally the encoder takes one
//! ADAM step.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::clustering::{dbscan, k_reciprocal_jaccard, pairwise_euclidean, ClusterAssignment, JaccardMode};
use crate::data::{group_by_label, pk_sample, Dataset, Domain, LabelGroups, UnlabeledView};
use crate::encoder::{backward, embed, forward, EncoderParams, EncoderShape, EnhanceConfig};
use crate::error::{PdlError, Result};
use crate::eval::{evaluate, meta_from, RetrievalResult, DEFAULT_RANKS};
use crate::loss::{info_nce_loss, pdl_loss, LossOutput};
use crate::optim::{adam_step, AdamState, LrSchedule};
use crate::prototype::PrototypeDictionary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    /// Category-level loss against the prototype dictionary.
    #[default]
    Pdl,
    /// Instance-level InfoNCE against an instance memory; the dictionary is
    /// not used.
    InfoNce,
}

impl FromStr for LossKind {
    type Err = PdlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pdl" => Ok(LossKind::Pdl),
            "infonce" => Ok(LossKind::InfoNce),
            other => Err(PdlError::Config(format!(
                "unknown loss `{other}` (expected pdl or infonce)"
            ))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Pdl => "pdl",
            LossKind::InfoNce => "infonce",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// `None` means `ceil(usable samples / batch size)`.
    pub iterations_per_epoch: Option<usize>,
    pub batch_p: usize,
    pub batch_k: usize,
    /// Labels per batch drawn from source classes; `None` means `P / 2`.
    pub source_labels_per_batch: Option<usize>,
    pub lr: LrSchedule,
    pub weight_decay: f64,
    pub momentum: f64,
    pub tau: f64,
    pub eps: f64,
    pub min_pts: usize,
    pub k_reciprocal: usize,
    pub jaccard_mode: JaccardMode,
    pub enhance: EnhanceConfig,
    pub loss: LossKind,
    /// Negatives per query for the instance-level loss.
    pub infonce_negatives: usize,
    pub encoder: EncoderShape,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            iterations_per_epoch: None,
            batch_p: 4,
            batch_k: 16,
            source_labels_per_batch: None,
            lr: LrSchedule::default(),
            weight_decay: 0.0005,
            momentum: 0.1,
            tau: 0.05,
            eps: 0.6,
            min_pts: 4,
            k_reciprocal: 30,
            jaccard_mode: JaccardMode::Plain,
            enhance: EnhanceConfig::default(),
            loss: LossKind::Pdl,
            infonce_negatives: 64,
            encoder: EncoderShape::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.batch_p * self.batch_k
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(PdlError::Config(m));
        if self.batch_p == 0 || self.batch_k == 0 {
            return fail("batch P and K must be >= 1".into());
        }
        if self.iterations_per_epoch == Some(0) {
            return fail("iterations_per_epoch must be >= 1".into());
        }
        if let Some(s) = self.source_labels_per_batch {
            if s > self.batch_p {
                return fail(format!("source labels per batch {s} exceeds P={}", self.batch_p));
            }
        }
        if !self.lr.base.is_finite() || self.lr.base <= 0.0 || self.lr.step_epochs == 0 {
            return fail("learning rate must be > 0 with a positive step".into());
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return fail("weight decay must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return fail("tau must be > 0".into());
        }
        if !self.eps.is_finite() || self.eps <= 0.0 || self.min_pts == 0 || self.k_reciprocal == 0 {
            return fail("eps, min_pts and K must be positive".into());
        }
        if !self.enhance.alpha.is_finite() || self.enhance.alpha <= 0.0 {
            return fail("alpha must be > 0".into());
        }
        if self.loss == LossKind::InfoNce && self.infonce_negatives == 0 {
            return fail("infonce_negatives must be >= 1".into());
        }
        self.encoder.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub clusters: usize,
    pub noise: usize,
    pub lr: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} loss={:.9} clusters={} noise={} lr={:e}",
            self.epoch, self.loss, self.clusters, self.noise, self.lr
        )
    }
}

/// Unit-norm inference embeddings (no enhancement), one row per input.
pub fn extract_all_features(params: &EncoderParams, inputs: &[&[f64]]) -> Result<Array2<f64>> {
    let rows: Vec<Vec<f64>> = inputs
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            embed(params, x).map_err(|e| match e {
                PdlError::Numeric { stage, detail } => PdlError::numeric(stage, format!("sample {i}: {detail}")),
                other => other,
            })
        })
        .collect::<Result<_>>()?;
    let mut m = Array2::zeros((inputs.len(), params.shape.out_dim));
    for (i, r) in rows.into_iter().enumerate() {
        m.row_mut(i).iter_mut().zip(r).for_each(|(d, v)| *d = v);
    }
    Ok(m)
}

/// DBSCAN pseudo-labels over k-reciprocal Jaccard distances. `K` is clamped
/// to `N - 1` for small sets.
pub fn pseudo_label(features: &Array2<f64>, k: usize, eps: f64, min_pts: usize) -> Result<ClusterAssignment> {
    let n = features.nrows();
    if n < 2 {
        return Ok(ClusterAssignment::all_noise(n));
    }
    let base = pairwise_euclidean(features.view())?;
    let jac = k_reciprocal_jaccard(&base, k.min(n - 1))?;
    dbscan(&jac, eps, min_pts)
}

/// Transductive retrieval score of a dataset against itself: every sample is
/// a query, the whole set is the gallery.
pub fn self_retrieval(params: &EncoderParams, dataset: &Dataset) -> Result<RetrievalResult> {
    let feats = extract_all_features(params, &dataset.inputs())?;
    let meta = meta_from(&dataset.identities(), &dataset.camera_ids());
    evaluate(feats.view(), feats.view(), &meta, &meta, &DEFAULT_RANKS)
}

pub struct TrainState {
    pub params: EncoderParams,
    pub adam: AdamState,
    pub dictionary: Option<PrototypeDictionary>,
    /// Number of completed epochs.
    pub epoch: usize,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub history: Vec<EpochRecord>,
}

pub struct Trainer<'a> {
    config: TrainConfig,
    source: &'a Dataset,
    target: &'a UnlabeledView,
    state: TrainState,
}

/// Batch sampling groups for one epoch, keyed by dictionary row.
struct BatchGroups {
    source: LabelGroups,
    target: LabelGroups,
    /// Dictionary row for each global sample index; `None` for noise.
    row_of: Vec<Option<usize>>,
}

/// One batch element: index into the concatenated source ++ target sample
/// list and the label (dictionary row) it was drawn under.
#[derive(Debug, Clone, Copy)]
struct BatchItem {
    global: usize,
    row: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, source: &'a Dataset, target: &'a UnlabeledView) -> Result<Self> {
        config.validate()?;
        let d_in = config.encoder.input_dim;
        for (name, dim) in [("source", source.input_dim()), ("target", target.input_dim())] {
            if let Some(d) = dim {
                if d != d_in {
                    return Err(PdlError::Config(format!(
                        "{name} inputs have dimension {d}, encoder expects {d_in}"
                    )));
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = EncoderParams::random(config.encoder, &mut rng)?;
        let adam = AdamState::new(&params);
        Ok(Trainer {
            config,
            source,
            target,
            state: TrainState {
                params,
                adam,
                dictionary: None,
                epoch: 0,
                iteration: 0,
                rng,
                history: Vec::new(),
            },
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn params(&self) -> &EncoderParams {
        &self.state.params
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.state.history
    }

    pub fn checkpoint(&self) -> String {
        self.state
            .params
            .to_checkpoint(&[("epoch", self.state.epoch.to_string())])
    }

    pub fn into_outcome(self) -> TrainOutcome {
        TrainOutcome {
            params: self.state.params,
            history: self.state.history,
        }
    }

    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        let epoch = self.state.epoch;
        self.epoch_inner(epoch).map_err(|e| match e {
            e @ PdlError::Training { .. } => e,
            e => e.in_training(epoch, None),
        })?;
        self.state.epoch += 1;
        Ok(self.state.history.last().expect("record pushed"))
    }

    fn epoch_inner(&mut self, epoch: usize) -> Result<()> {
        let cfg = self.config.clone();
        let n_src = self.source.len();
        let src_feats = extract_all_features(&self.state.params, &self.source.inputs())?;
        let tgt_feats = extract_all_features(&self.state.params, &self.target.inputs())?;

        let assignment = pseudo_label(&tgt_feats, cfg.k_reciprocal, cfg.eps, cfg.min_pts)?;
        if assignment.n_clusters() == 0 && !self.target.is_empty() {
            log::warn!("epoch {epoch}: no target clusters, training on source only");
        }

        let source_labels = self.source.identities();
        let mut dictionary = PrototypeDictionary::init(
            src_feats.view(),
            &source_labels,
            tgt_feats.view(),
            assignment.labels(),
            cfg.momentum,
        )?;

        let mut row_of = vec![None; n_src + assignment.len()];
        for (i, &l) in source_labels.iter().enumerate() {
            row_of[i] = Some(dictionary.positive_index(Domain::Source, l)?);
        }
        for (j, l) in assignment.labels().iter().enumerate() {
            if let Some(c) = l {
                row_of[n_src + j] = Some(dictionary.positive_index(Domain::Target, *c)?);
            }
        }
        let groups = BatchGroups {
            source: group_by_label((0..n_src).map(|i| (i, row_of[i].expect("labelled")))),
            target: group_by_label((n_src..row_of.len()).filter_map(|g| row_of[g].map(|r| (g, r)))),
            row_of,
        };

        let usable = n_src + (assignment.len() - assignment.n_noise());
        let iterations = cfg
            .iterations_per_epoch
            .unwrap_or_else(|| usable.div_ceil(cfg.batch_size()).max(1));
        let lr = cfg.lr.lr(epoch);

        let mut memory = match cfg.loss {
            LossKind::InfoNce => {
                let mut m = Array2::zeros((n_src + tgt_feats.nrows(), src_feats.ncols()));
                m.slice_mut(ndarray::s![..n_src, ..]).assign(&src_feats);
                m.slice_mut(ndarray::s![n_src.., ..]).assign(&tgt_feats);
                Some(m)
            }
            LossKind::Pdl => None,
        };

        let mut loss_sum = 0.0;
        for it in 0..iterations {
            let step = self
                .iteration(&cfg, lr, &groups, &mut dictionary, memory.as_mut())
                .map_err(|e| e.in_training(epoch, Some(it)))?;
            loss_sum += step;
            self.state.iteration += 1;
        }

        self.state.history.push(EpochRecord {
            epoch,
            loss: loss_sum / iterations as f64,
            clusters: assignment.n_clusters(),
            noise: assignment.n_noise(),
            lr,
        });
        self.state.dictionary = Some(dictionary);
        Ok(())
    }

    fn draw_batch(&mut self, cfg: &TrainConfig, groups: &BatchGroups) -> Result<Vec<BatchItem>> {
        let (src, tgt) = (&groups.source, &groups.target);
        let p = cfg.batch_p;
        let want_src = cfg.source_labels_per_batch.unwrap_or(p / 2);
        let mut p_src = want_src.min(src.len());
        let p_tgt = (p - p_src).min(tgt.len());
        p_src = (p - p_tgt).min(src.len());
        if p_src + p_tgt < p {
            return Err(PdlError::Sampling(format!(
                "batch needs {p} labels; {} source classes and {} target clusters available",
                src.len(),
                tgt.len()
            )));
        }
        let rng = &mut self.state.rng;
        let mut items = Vec::with_capacity(cfg.batch_size());
        for (label_groups, count) in [(src, p_src), (tgt, p_tgt)] {
            if count == 0 {
                continue;
            }
            let ids = pk_sample(label_groups, count, cfg.batch_k, rng)?;
            items.extend(ids.into_iter().map(|global| BatchItem {
                global,
                row: groups.row_of[global].expect("sampled ids are labelled"),
            }));
        }
        Ok(items)
    }

    #[allow(clippy::too_many_arguments)]
    fn iteration(
        &mut self,
        cfg: &TrainConfig,
        lr: f64,
        groups: &BatchGroups,
        dictionary: &mut PrototypeDictionary,
        memory: Option<&mut Array2<f64>>,
    ) -> Result<f64> {
        let batch = self.draw_batch(cfg, groups)?;
        let n_src = self.source.len();
        let d = cfg.encoder.out_dim;

        let mut queries = Array2::zeros((batch.len(), d));
        let mut traces = Vec::with_capacity(batch.len());
        for (b, item) in batch.iter().enumerate() {
            let input = if item.global < n_src {
                &self.source.samples()[item.global].input
            } else {
                &self.target.samples()[item.global - n_src].input
            };
            let (v, trace) = forward(&self.state.params, input, &cfg.enhance, &mut self.state.rng)?;
            queries.row_mut(b).iter_mut().zip(v).for_each(|(q, x)| *q = x);
            traces.push(trace);
        }

        // ascending sample order for the memory updates
        let mut order: Vec<usize> = (0..batch.len()).collect();
        order.sort_by_key(|&b| batch[b].global);

        let out: LossOutput = match memory {
            None => {
                let rows: Vec<usize> = batch.iter().map(|i| i.row).collect();
                let out = pdl_loss(queries.view(), &rows, dictionary.lookup_all().view(), cfg.tau)?;
                for &b in &order {
                    dictionary.update_row(batch[b].row, queries.row(b).as_slice().expect("contiguous"))?;
                }
                out
            }
            Some(memory) => {
                let n = memory.nrows();
                let k_neg = cfg.infonce_negatives.min(n.saturating_sub(1));
                if k_neg == 0 {
                    return Err(PdlError::Sampling("instance memory too small for negatives".into()));
                }
                let mut positives = Array2::zeros((batch.len(), d));
                let mut negatives = Array3::zeros((batch.len(), k_neg, d));
                for (b, item) in batch.iter().enumerate() {
                    positives.row_mut(b).assign(&memory.row(item.global));
                    let picks = index::sample(&mut self.state.rng, n - 1, k_neg);
                    for (j, pick) in picks.into_iter().enumerate() {
                        let idx = if pick >= item.global { pick + 1 } else { pick };
                        negatives.slice_mut(ndarray::s![b, j, ..]).assign(&memory.row(idx));
                    }
                }
                let out = info_nce_loss(queries.view(), positives.view(), negatives.view(), cfg.tau)?;
                let m = cfg.momentum;
                for &b in &order {
                    let g = batch[b].global;
                    let mut row = memory.row_mut(g);
                    row.iter_mut()
                        .zip(queries.row(b))
                        .for_each(|(p, q)| *p = m * *p + (1.0 - m) * q);
                    let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        row.iter_mut().for_each(|x| *x /= norm);
                    }
                }
                out
            }
        };

        let params = &self.state.params;
        let grads: Vec<EncoderParams> = traces
            .par_iter()
            .enumerate()
            .map(|(b, t)| backward(params, t, out.grad_wrt_queries.row(b).as_slice().expect("contiguous")))
            .collect::<Result<_>>()?;
        let mut total = EncoderParams::zeros(cfg.encoder);
        for g in &grads {
            total.add_assign(g);
        }
        adam_step(
            &mut self.state.params,
            &total,
            &mut self.state.adam,
            lr,
            cfg.weight_decay,
        )?;
        Ok(out.loss)
    }
}

/// Runs `config.epochs` epochs from a freshly initialised encoder.
pub fn train(config: TrainConfig, source: &Dataset, target: &UnlabeledView) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config, source, target)?;
    for _ in 0..trainer.config.epochs {
        trainer.run_epoch()?;
    }
    Ok(trainer.into_outcome())
}

/// The encoder `train` would start from for this configuration.
pub fn initial_params(config: &TrainConfig) -> Result<EncoderParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    EncoderParams::random(config.encoder, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};

    fn tiny() -> (Dataset, Dataset) {
        generate_synthetic(&SynthConfig {
            n_identities_source: 4,
            n_identities_target: 4,
            samples_per_identity: 12,
            seed: 5,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_p: 4,
            batch_k: 4,
            k_reciprocal: 8,
            lr: LrSchedule {
                base: 3.5e-3,
                step_epochs: 20,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn extraction_is_deterministic_and_unit_norm() {
        let (s, _) = tiny();
        let p = initial_params(&cfg()).unwrap();
        let a = extract_all_features(&p, &s.inputs()).unwrap();
        let b = extract_all_features(&p, &s.inputs()).unwrap();
        assert_eq!(a, b);
        for (i, r) in a.rows().into_iter().enumerate() {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
            assert_eq!(r.to_vec(), embed(&p, &s.samples()[i].input).unwrap());
        }
    }

    #[test]
    fn history_and_capacity() {
        let (s, t) = tiny();
        let view = t.training_view();
        let mut tr = Trainer::new(cfg(), &s, &view).unwrap();
        let rec = tr.run_epoch().unwrap().clone();
        let dict = tr.state().dictionary.as_ref().unwrap();
        assert_eq!(dict.capacity(), 4 + rec.clusters);
        assert_eq!(rec.lr, 3.5e-3);
        tr.run_epoch().unwrap();
        assert_eq!(tr.history().len(), 2);
        assert!(tr.history()[0].to_string().starts_with("epoch=0 loss="));
    }

    #[test]
    fn empty_target_is_source_only() {
        let (s, _) = tiny();
        let out = train(cfg(), &s, &UnlabeledView::default()).unwrap();
        assert_eq!(out.history.len(), 2);
        assert!(out.history.iter().all(|r| r.clusters == 0 && r.noise == 0));
    }

    #[test]
    fn same_seed_same_checkpoint() {
        let (s, t) = tiny();
        let v = t.training_view();
        let a = train(cfg(), &s, &v).unwrap();
        let b = train(cfg(), &s, &v).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn infonce_mode_runs() {
        let (s, t) = tiny();
        let v = t.training_view();
        let out = train(
            TrainConfig {
                loss: LossKind::InfoNce,
                ..cfg()
            },
            &s,
            &v,
        )
        .unwrap();
        assert_eq!(out.history.len(), 2);
        assert!(out.history.iter().all(|r| r.loss.is_finite() && r.loss > 0.0));
    }

    #[test]
    fn input_dim_mismatch_is_config_error() {
        let (s, t) = tiny();
        let v = t.training_view();
        let c = TrainConfig {
            encoder: EncoderShape {
                input_dim: 3,
                ..EncoderShape::default()
            },
            ..cfg()
        };
        assert!(matches!(Trainer::new(c, &s, &v), Err(PdlError::Config(_))));
    }

    #[test]
    fn sampling_failure_carries_epoch_context() {
        let (s, t) = tiny();
        let v = t.training_view();
        let c = TrainConfig { batch_p: 20, ..cfg() };
        match train(c, &s, &v) {
            Err(PdlError::Training {
                epoch: 0,
                iteration: Some(0),
                source,
            }) => {
                assert!(matches!(*source, PdlError::Sampling(_)))
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
