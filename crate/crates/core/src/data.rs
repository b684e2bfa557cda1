//! Datasets, the identity-stripped training view, synthetic two-domain
//! generation and identity-balanced (P x K) batch sampling.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{PdlError, Result};
use crate::format::EmbeddingTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sample_id: usize,
    pub domain: Domain,
    /// Ground truth. For target samples this is only ever read by evaluation.
    pub identity: usize,
    pub camera_id: usize,
    pub input: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    n_identities: usize,
    domain: Domain,
}

impl Dataset {
    /// Builds a dataset, checking dense sample ids, a single domain tag and a
    /// common input dimension.
    pub fn new(domain: Domain, samples: Vec<Sample>) -> Result<Self> {
        let dim = samples.first().map(|s| s.input.len());
        for (i, s) in samples.iter().enumerate() {
            if s.sample_id != i {
                return Err(PdlError::Argument(format!(
                    "sample ids must be dense: position {i} holds id {}",
                    s.sample_id
                )));
            }
            if s.domain != domain {
                return Err(PdlError::Argument(format!(
                    "sample {i} is tagged {:?} in a {domain:?} dataset",
                    s.domain
                )));
            }
            if Some(s.input.len()) != dim {
                return Err(PdlError::Argument(format!(
                    "sample {i} has input dimension {} (expected {})",
                    s.input.len(),
                    dim.unwrap_or(0)
                )));
            }
        }
        let mut ids: Vec<usize> = samples.iter().map(|s| s.identity).collect();
        ids.sort_unstable();
        ids.dedup();
        Ok(Dataset {
            n_identities: ids.len(),
            samples,
            domain,
        })
    }

    pub fn empty(domain: Domain) -> Self {
        Dataset {
            samples: Vec::new(),
            n_identities: 0,
            domain,
        }
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_identities(&self) -> usize {
        self.n_identities
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.input.len())
    }

    pub fn identities(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.identity).collect()
    }

    pub fn camera_ids(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.camera_id).collect()
    }

    pub fn inputs(&self) -> Vec<&[f64]> {
        self.samples.iter().map(|s| s.input.as_slice()).collect()
    }

    /// The view handed to training: identities removed.
    pub fn training_view(&self) -> UnlabeledView {
        UnlabeledView {
            samples: self
                .samples
                .iter()
                .map(|s| UnlabeledSample {
                    sample_id: s.sample_id,
                    camera_id: s.camera_id,
                    input: s.input.clone(),
                })
                .collect(),
        }
    }

    /// Raw inputs in embedding-file layout.
    pub fn to_table(&self) -> EmbeddingTable {
        let d = self.input_dim().unwrap_or(0);
        let mut matrix = Array2::zeros((self.len(), d));
        for (i, s) in self.samples.iter().enumerate() {
            matrix.row_mut(i).iter_mut().zip(&s.input).for_each(|(m, v)| *m = *v);
        }
        EmbeddingTable {
            ids: (0..self.len()).collect(),
            matrix,
            identities: self.identities(),
            camera_ids: self.camera_ids(),
        }
    }

    pub fn from_table(domain: Domain, table: &EmbeddingTable) -> Result<Self> {
        let samples = (0..table.len())
            .map(|i| Sample {
                sample_id: table.ids[i],
                domain,
                identity: table.identities[i],
                camera_id: table.camera_ids[i],
                input: table.matrix.row(i).to_vec(),
            })
            .collect();
        Dataset::new(domain, samples)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSample {
    pub sample_id: usize,
    pub camera_id: usize,
    pub input: Vec<f64>,
}

/// Target-domain samples as the trainer sees them. There is no identity
/// field to read.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct UnlabeledView {
    samples: Vec<UnlabeledSample>,
}

impl UnlabeledView {
    pub fn samples(&self) -> &[UnlabeledSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn inputs(&self) -> Vec<&[f64]> {
        self.samples.iter().map(|s| s.input.as_slice()).collect()
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.input.len())
    }
}

/// Per-dimension affine map applied to every target input.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleShift {
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
}

impl StyleShift {
    pub fn identity(dim: usize) -> Self {
        StyleShift {
            scale: vec![1.0; dim],
            offset: vec![0.0; dim],
        }
    }

    /// Alternating contraction/expansion with a signed offset.
    pub fn default_for(dim: usize) -> Self {
        StyleShift {
            scale: (0..dim).map(|i| if i % 2 == 0 { 1.5 } else { 0.6 }).collect(),
            offset: (0..dim).map(|i| if i % 3 == 0 { 0.4 } else { -0.2 }).collect(),
        }
    }

    pub fn apply(&self, x: &mut [f64]) {
        for ((v, s), o) in x.iter_mut().zip(&self.scale).zip(&self.offset) {
            *v = *v * s + o;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_identities_source: usize,
    pub n_identities_target: usize,
    pub samples_per_identity: usize,
    /// Shared identities between domains. Must be zero.
    pub overlap_identities: usize,
    pub input_dim: usize,
    /// Per-sample isotropic noise.
    pub cluster_spread: f64,
    /// Magnitude of the per-camera offset added to every input captured by
    /// that camera. Offsets are shared by both domains and applied after the
    /// style shift.
    pub camera_shift: f64,
    pub style_shift: StyleShift,
    pub n_cameras: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let input_dim = 16;
        SynthConfig {
            n_identities_source: 10,
            n_identities_target: 10,
            samples_per_identity: 40,
            overlap_identities: 0,
            input_dim,
            cluster_spread: 0.2,
            camera_shift: 2.0,
            style_shift: StyleShift::default_for(input_dim),
            n_cameras: 4,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(PdlError::Config(m.to_string()));
        if self.overlap_identities != 0 {
            return fail("overlap_identities must be 0: domains share no identities");
        }
        if !self.cluster_spread.is_finite() || self.cluster_spread <= 0.0 {
            return fail("cluster_spread must be a finite value > 0");
        }
        if !self.camera_shift.is_finite() || self.camera_shift < 0.0 {
            return fail("camera_shift must be finite and >= 0");
        }
        if self.n_identities_source == 0 {
            return fail("n_identities_source must be >= 1");
        }
        if self.samples_per_identity == 0 {
            return fail("samples_per_identity must be >= 1");
        }
        if self.input_dim == 0 {
            return fail("input_dim must be >= 1");
        }
        if self.n_cameras == 0 {
            return fail("n_cameras must be >= 1");
        }
        if self.style_shift.scale.len() != self.input_dim || self.style_shift.offset.len() != self.input_dim {
            return fail("style_shift vectors must have input_dim entries");
        }
        Ok(())
    }
}

/// Generator output together with the sampled blob centres (before the
/// target style shift).
#[derive(Debug, Clone)]
pub struct SyntheticDomains {
    pub source: Dataset,
    pub target: Dataset,
    pub source_means: Vec<Vec<f64>>,
    pub target_means: Vec<Vec<f64>>,
}

/// Two disjoint-identity Gaussian-blob domains. Target identities are
/// numbered after the source ones.
pub fn generate_synthetic(config: &SynthConfig) -> Result<(Dataset, Dataset)> {
    let d = generate_synthetic_detailed(config)?;
    Ok((d.source, d.target))
}

pub fn generate_synthetic_detailed(config: &SynthConfig) -> Result<SyntheticDomains> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dim = config.input_dim;
    let hypercube_point =
        |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let source_means: Vec<Vec<f64>> = (0..config.n_identities_source)
        .map(|_| hypercube_point(&mut rng))
        .collect();
    let target_means: Vec<Vec<f64>> = (0..config.n_identities_target)
        .map(|_| hypercube_point(&mut rng))
        .collect();
    let camera_offsets: Vec<Vec<f64>> = (0..config.n_cameras)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| config.camera_shift * x / norm).collect()
        })
        .collect();

    let mut build = |domain: Domain, means: &[Vec<f64>], id_base: usize| -> Result<Dataset> {
        let mut samples = Vec::with_capacity(means.len() * config.samples_per_identity);
        for (k, mean) in means.iter().enumerate() {
            for j in 0..config.samples_per_identity {
                let camera_id = j % config.n_cameras;
                let mut input: Vec<f64> = mean
                    .iter()
                    .map(|m| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        m + config.cluster_spread * z
                    })
                    .collect();
                if domain == Domain::Target {
                    config.style_shift.apply(&mut input);
                }
                for (v, c) in input.iter_mut().zip(&camera_offsets[camera_id]) {
                    *v += c;
                }
                samples.push(Sample {
                    sample_id: samples.len(),
                    domain,
                    identity: id_base + k,
                    camera_id,
                    input,
                });
            }
        }
        Dataset::new(domain, samples)
    };

    let source = build(Domain::Source, &source_means, 0)?;
    let target = build(Domain::Target, &target_means, config.n_identities_source)?;
    Ok(SyntheticDomains {
        source,
        target,
        source_means,
        target_means,
    })
}

/// Member ids grouped by their current label (true or pseudo).
pub type LabelGroups = BTreeMap<usize, Vec<usize>>;

pub fn group_by_label<I>(labels: I) -> LabelGroups
where
    I: IntoIterator<Item = (usize, usize)>,
{
    let mut groups = LabelGroups::new();
    for (id, label) in labels {
        groups.entry(label).or_default().push(id);
    }
    groups
}

/// Draws `p` distinct labels and `k` members of each. Labels with fewer than
/// `k` members are sampled with replacement.
pub fn pk_sample<R: Rng + ?Sized>(groups: &LabelGroups, p: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if p == 0 || k == 0 {
        return Err(PdlError::Argument("P and K must both be >= 1".into()));
    }
    let labels: Vec<usize> = groups
        .iter()
        .filter(|(_, members)| !members.is_empty())
        .map(|(l, _)| *l)
        .collect();
    if labels.len() < p {
        return Err(PdlError::Sampling(format!(
            "need {p} labels, only {} available",
            labels.len()
        )));
    }
    let mut out = Vec::with_capacity(p * k);
    for li in index::sample(rng, labels.len(), p) {
        let members = &groups[&labels[li]];
        if members.len() >= k {
            out.extend(index::sample(rng, members.len(), k).into_iter().map(|j| members[j]));
        } else {
            out.extend((0..k).map(|_| members[rng.random_range(0..members.len())]));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            n_identities_source: 2,
            n_identities_target: 2,
            samples_per_identity: 4,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn counts_follow_config() {
        let (s, t) = generate_synthetic(&small(7)).unwrap();
        assert_eq!(s.len(), 8);
        assert_eq!(t.len(), 8);
        for ds in [&s, &t] {
            assert_eq!(ds.n_identities(), 2);
            let groups = group_by_label(ds.samples().iter().map(|x| (x.sample_id, x.identity)));
            assert!(groups.values().all(|m| m.len() == 4));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(
            generate_synthetic(&small(7)).unwrap(),
            generate_synthetic(&small(7)).unwrap()
        );
        assert_ne!(
            generate_synthetic(&small(7)).unwrap(),
            generate_synthetic(&small(8)).unwrap()
        );
    }

    #[test]
    fn zero_noise_identity_shift_recovers_means() {
        let cfg = SynthConfig {
            cluster_spread: 1e-30,
            camera_shift: 0.0,
            style_shift: StyleShift::identity(16),
            ..small(3)
        };
        let d = generate_synthetic_detailed(&cfg).unwrap();
        for s in d.target.samples() {
            let k = s.identity - cfg.n_identities_source;
            assert_eq!(s.input, d.target_means[k]);
        }
    }

    #[test]
    fn rejects_invalid_config() {
        let mut c = small(1);
        c.overlap_identities = 1;
        assert!(matches!(generate_synthetic(&c), Err(PdlError::Config(_))));
        let mut c = small(1);
        c.cluster_spread = 0.0;
        assert!(matches!(generate_synthetic(&c), Err(PdlError::Config(_))));
        let mut c = small(1);
        c.n_identities_source = 0;
        assert!(matches!(generate_synthetic(&c), Err(PdlError::Config(_))));
    }

    #[test]
    fn domains_are_identity_disjoint() {
        let (s, t) = generate_synthetic(&SynthConfig::default()).unwrap();
        let a: HashSet<_> = s.identities().into_iter().collect();
        assert!(t.identities().iter().all(|i| !a.contains(i)));
    }

    #[test]
    fn cameras_round_robin() {
        let (s, _) = generate_synthetic(&small(2)).unwrap();
        let cams: Vec<_> = s.samples().iter().map(|x| x.camera_id).collect();
        assert_eq!(cams, vec![0, 1, 2, 3, 0, 1, 2, 3]);
    }

    #[test]
    fn pk_batch_shape() {
        let groups = group_by_label((0..200).map(|i| (i, i / 20)));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = pk_sample(&groups, 4, 16, &mut rng).unwrap();
        assert_eq!(batch.len(), 64);
        let labels: HashSet<_> = batch.iter().map(|i| i / 20).collect();
        assert_eq!(labels.len(), 4);

        let one = pk_sample(&groups, 1, 1, &mut rng).unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn small_label_sampled_with_replacement() {
        let mut groups = LabelGroups::new();
        groups.insert(5, vec![10, 11, 12]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = pk_sample(&groups, 1, 16, &mut rng).unwrap();
        // multiset check: 16 draws, every draw a member, counts sum to 16
        let counts: Vec<usize> = [10, 11, 12]
            .iter()
            .map(|m| batch.iter().filter(|b| *b == m).count())
            .collect();
        assert_eq!(batch.len(), 16);
        assert_eq!(counts.iter().sum::<usize>(), 16);
        assert!(counts.iter().any(|&c| c > 1));
    }

    #[test]
    fn too_few_labels_is_a_sampling_error() {
        let groups = group_by_label((0..10).map(|i| (i, i % 2)));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(pk_sample(&groups, 3, 2, &mut rng), Err(PdlError::Sampling(_))));
    }

    #[test]
    fn training_view_drops_identity_only() {
        let (_, t) = generate_synthetic(&small(9)).unwrap();
        let view = t.training_view();
        assert_eq!(view.len(), t.len());
        for (u, s) in view.samples().iter().zip(t.samples()) {
            assert_eq!(
                (u.sample_id, u.camera_id, &u.input),
                (s.sample_id, s.camera_id, &s.input)
            );
        }
    }

    proptest::proptest! {
        #[test]
        fn pk_always_p_labels(n_labels in 1usize..12, sizes in proptest::collection::vec(1usize..9, 12),
                              p in 1usize..6, k in 1usize..10, seed in 0u64..1000) {
            let p = p.min(n_labels);
            let mut groups = LabelGroups::new();
            let mut next = 0;
            for (l, &size) in sizes.iter().take(n_labels).enumerate() {
                groups.insert(l, (next..next + size).collect());
                next += size;
            }
            let owner = |id: usize| groups.iter().find(|(_, m)| m.contains(&id)).map(|(l, _)| *l).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch = pk_sample(&groups, p, k, &mut rng).unwrap();
            proptest::prop_assert_eq!(batch.len(), p * k);
            let labels: HashSet<_> = batch.iter().map(|&i| owner(i)).collect();
            proptest::prop_assert_eq!(labels.len(), p);
            for chunk in batch.chunks(k) {
                let l = owner(chunk[0]);
                proptest::prop_assert!(chunk.iter().all(|&i| owner(i) == l));
            }
        }
    }
}
