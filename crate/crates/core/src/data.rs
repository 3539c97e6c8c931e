//! Synthetic multi-domain classification data and federated partitions.
//!
//! Every domain shares the same class prototypes; domain `k` sees them
//! through its own orthogonal transform, shift and noise. Client train sets
//! are carved out of the per-domain train pools, either one client per
//! domain (feature skew) or several Dirichlet-split clients per domain
//! (feature and label skew).

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, weighted::WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::ClientProfile;
use crate::nn::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub domain: usize,
}

impl LabeledDataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize, domain: usize) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows for {} labels",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Index(format!("label {bad} with {num_classes} classes")));
        }
        if let Some(first) = features.first() {
            if features.iter().any(|f| f.len() != first.len()) {
                return Err(Error::Shape("ragged feature rows".into()));
            }
        }
        Ok(LabeledDataset {
            features,
            labels,
            num_classes,
            domain,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> + '_ {
        self.features
            .iter()
            .map(Vec::as_slice)
            .zip(self.labels.iter().copied())
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            domain: self.domain,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Concatenates datasets; the domain tag of the first one is kept.
    pub fn concat(parts: &[&LabeledDataset]) -> Result<LabeledDataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Precondition("concat of nothing".into()))?;
        let mut out = LabeledDataset {
            features: Vec::new(),
            labels: Vec::new(),
            num_classes: first.num_classes,
            domain: first.domain,
        };
        for p in parts {
            if p.num_classes != out.num_classes {
                return Err(Error::Shape("class counts differ".into()));
            }
            out.features.extend(p.features.iter().cloned());
            out.labels.extend_from_slice(&p.labels);
        }
        Ok(out)
    }
}

/// `x ↦ rotation · x + shift + noise · ε`
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub rotation: Matrix,
    pub shift: Vec<f64>,
    pub noise: f64,
}

impl DomainSpec {
    pub fn identity(dim: usize) -> Self {
        DomainSpec {
            rotation: Matrix::identity(dim),
            shift: vec![0.0; dim],
            noise: 0.0,
        }
    }

    /// Orthogonal factor of `I + strength·G/√d` (modified Gram-Schmidt,
    /// two passes). `strength = 0` gives the identity.
    pub fn random<R: Rng + ?Sized>(dim: usize, strength: f64, shift_scale: f64, noise: f64, rng: &mut R) -> Self {
        let mut a = Matrix::gaussian(dim, dim, strength / (dim as f64).sqrt(), rng);
        for i in 0..dim {
            a.set(i, i, a.get(i, i) + 1.0);
        }
        let rotation = orthonormalize_columns(&a);
        let shift = Matrix::gaussian(1, dim, shift_scale / (dim as f64).sqrt(), rng)
            .as_slice()
            .to_vec();
        DomainSpec {
            rotation,
            shift,
            noise,
        }
    }

    pub fn apply<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        let mut y = self.rotation.matvec(x).expect("domain dim");
        for (v, s) in y.iter_mut().zip(&self.shift) {
            *v += s;
        }
        if self.noise > 0.0 {
            let n = Normal::new(0.0, self.noise).expect("finite noise");
            for v in &mut y {
                *v += n.sample(rng);
            }
        }
        y
    }

    /// `max |QᵀQ − I|`
    pub fn orthogonality_error(&self) -> f64 {
        let d = self.rotation.cols();
        let mut worst = 0.0f64;
        for i in 0..d {
            for j in 0..d {
                let dot: f64 = (0..d).map(|k| self.rotation.get(k, i) * self.rotation.get(k, j)).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }
}

fn orthonormalize_columns(a: &Matrix) -> Matrix {
    let d = a.cols();
    let mut cols: Vec<Vec<f64>> = (0..d).map(|j| (0..a.rows()).map(|i| a.get(i, j)).collect()).collect();
    for j in 0..d {
        for _pass in 0..2 {
            for k in 0..j {
                let (done, rest) = cols.split_at_mut(j);
                let proj: f64 = done[k].iter().zip(&rest[0]).map(|(x, y)| x * y).sum();
                for (v, q) in rest[0].iter_mut().zip(&done[k]) {
                    *v -= proj * q;
                }
            }
        }
        let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        cols[j].iter_mut().for_each(|v| *v /= norm);
    }
    let mut q = Matrix::zeros(a.rows(), d);
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            q.set(i, j, v);
        }
    }
    q
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_domains: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    /// Samples per domain before the train/test split.
    pub samples_per_domain: usize,
    pub test_fraction: f64,
    /// Standard deviation of the shared class prototypes.
    pub prototype_scale: f64,
    /// Within-class noise before the domain transform.
    pub class_noise: f64,
    /// 0 keeps every domain on the base distribution.
    pub rotation_strength: f64,
    pub shift_scale: f64,
    pub domain_noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_domains: 6,
            num_classes: 10,
            input_dim: 32,
            samples_per_domain: 750,
            test_fraction: 0.2,
            prototype_scale: 1.0,
            class_noise: 0.6,
            rotation_strength: 1.5,
            shift_scale: 1.0,
            domain_noise: 0.1,
        }
    }
}

/// Per-domain train and test sets.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainCorpus {
    pub specs: Vec<DomainSpec>,
    pub train: Vec<LabeledDataset>,
    pub test: Vec<LabeledDataset>,
}

impl DomainCorpus {
    pub fn num_domains(&self) -> usize {
        self.train.len()
    }

    pub fn num_classes(&self) -> usize {
        self.train.first().map_or(0, |d| d.num_classes)
    }

    pub fn input_dim(&self) -> usize {
        self.train.first().map_or(0, LabeledDataset::dim)
    }
}

pub fn make_synthetic_domains<R: Rng + ?Sized>(cfg: &SyntheticConfig, rng: &mut R) -> Result<DomainCorpus> {
    let specs = (0..cfg.num_domains)
        .map(|_| DomainSpec::random(cfg.input_dim, cfg.rotation_strength, cfg.shift_scale, cfg.domain_noise, rng))
        .collect();
    make_domains_with_specs(cfg, specs, rng)
}

/// Like [`make_synthetic_domains`] with caller-supplied domain transforms.
pub fn make_domains_with_specs<R: Rng + ?Sized>(
    cfg: &SyntheticConfig,
    specs: Vec<DomainSpec>,
    rng: &mut R,
) -> Result<DomainCorpus> {
    if cfg.num_domains == 0 || cfg.num_classes == 0 || cfg.input_dim == 0 || cfg.samples_per_domain == 0 {
        return Err(Error::Precondition(format!("all counts must be >= 1: {cfg:?}")));
    }
    if cfg.num_classes > cfg.samples_per_domain {
        return Err(Error::Precondition(format!(
            "{} classes need at least that many samples per domain, got {}",
            cfg.num_classes, cfg.samples_per_domain
        )));
    }
    if !(0.0..1.0).contains(&cfg.test_fraction) {
        return Err(Error::Precondition(format!("test fraction {}", cfg.test_fraction)));
    }
    if specs.len() != cfg.num_domains {
        return Err(Error::Config(format!("{} domain specs for {} domains", specs.len(), cfg.num_domains)));
    }
    let prototypes = Matrix::gaussian(cfg.num_classes, cfg.input_dim, cfg.prototype_scale, rng);
    let noise = Normal::new(0.0, cfg.class_noise).map_err(|e| Error::Config(e.to_string()))?;

    let mut train = Vec::with_capacity(cfg.num_domains);
    let mut test = Vec::with_capacity(cfg.num_domains);
    for (k, spec) in specs.iter().enumerate() {
        let mut tr: Vec<(Vec<f64>, usize)> = Vec::new();
        let mut te: Vec<(Vec<f64>, usize)> = Vec::new();
        for c in 0..cfg.num_classes {
            let n_c = cfg.samples_per_domain / cfg.num_classes
                + usize::from(c < cfg.samples_per_domain % cfg.num_classes);
            let n_test = (n_c as f64 * cfg.test_fraction).round() as usize;
            for s in 0..n_c {
                let base: Vec<f64> = prototypes.row(c).iter().map(|&p| p + noise.sample(rng)).collect();
                let x = spec.apply(&base, rng);
                if s < n_test {
                    te.push((x, c));
                } else {
                    tr.push((x, c));
                }
            }
        }
        tr.shuffle(rng);
        let (f, l) = tr.into_iter().unzip();
        train.push(LabeledDataset::new(f, l, cfg.num_classes, k)?);
        let (f, l) = te.into_iter().unzip();
        test.push(LabeledDataset::new(f, l, cfg.num_classes, k)?);
    }
    Ok(DomainCorpus { specs, train, test })
}

fn sample_dirichlet<R: Rng + ?Sized>(alpha: f64, parts: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    let mut p: Vec<f64> = (0..parts).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = p.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        p.iter_mut().for_each(|v| *v /= sum);
    } else {
        // every gamma draw underflowed: all mass on one part
        let k = rng.random_range(0..parts);
        p = vec![0.0; parts];
        p[k] = 1.0;
    }
    p
}

/// Index-level Dirichlet split: for each class a proportion vector
/// `p ~ Dir(alpha·1)` over the parts, then each sample of that class lands
/// in part `k` with probability `p_k`. Empty parts take one sample from the
/// currently largest part. Indices in each part are ascending.
pub fn dirichlet_partition_indices<R: Rng + ?Sized>(
    labels: &[usize],
    num_classes: usize,
    alpha: f64,
    parts: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::Precondition(format!("dirichlet alpha {alpha} must be > 0")));
    }
    if parts == 0 {
        return Err(Error::Precondition("at least one part".into()));
    }
    if parts > labels.len() {
        return Err(Error::Precondition(format!(
            "{parts} parts from {} samples",
            labels.len()
        )));
    }
    let mut out = vec![Vec::new(); parts];
    for c in 0..num_classes {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        let p = sample_dirichlet(alpha, parts, rng);
        let pick = WeightedIndex::new(&p).map_err(|e| Error::Numeric(e.to_string()))?;
        for i in members {
            out[pick.sample(rng)].push(i);
        }
    }
    while let Some(empty) = out.iter().position(Vec::is_empty) {
        let largest = (0..parts)
            .max_by(|&a, &b| out[a].len().cmp(&out[b].len()).then(b.cmp(&a)))
            .expect("parts >= 1");
        let moved = out[largest].pop().expect("largest part is non-empty");
        out[empty].push(moved);
    }
    for part in &mut out {
        part.sort_unstable();
    }
    Ok(out)
}

pub fn dirichlet_partition<R: Rng + ?Sized>(
    data: &LabeledDataset,
    alpha: f64,
    parts: usize,
    rng: &mut R,
) -> Result<Vec<LabeledDataset>> {
    let idx = dirichlet_partition_indices(&data.labels, data.num_classes, alpha, parts, rng)?;
    Ok(idx.iter().map(|ix| data.subset(ix)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PartitionMode {
    FeatureSkew,
    FeatureLabelSkew { alpha: f64, parts: usize },
}

#[derive(Clone, Debug)]
pub struct FederationScenario {
    pub clients: Vec<ClientProfile>,
    pub test_sets: Vec<LabeledDataset>,
    pub mode: PartitionMode,
    /// Client train sets as index lists into their domain's train pool.
    pub train_indices: Vec<Vec<usize>>,
}

impl FederationScenario {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn capacities(&self) -> Vec<usize> {
        self.clients.iter().map(|c| c.capacity).collect()
    }
}

/// One client per domain (feature skew), or `parts` Dirichlet clients per
/// domain with capacities listed domain-major (feature and label skew).
pub fn build_federation_scenario<R: Rng + ?Sized>(
    mode: PartitionMode,
    capacities: &[usize],
    corpus: &DomainCorpus,
    rng: &mut R,
) -> Result<FederationScenario> {
    let domains = corpus.num_domains();
    let mut clients = Vec::new();
    let mut train_indices = Vec::new();
    match mode {
        PartitionMode::FeatureSkew => {
            if capacities.len() != domains {
                return Err(Error::Config(format!(
                    "feature skew needs one capacity per domain: {} capacities, {domains} domains",
                    capacities.len()
                )));
            }
            for (k, (&cap, pool)) in capacities.iter().zip(&corpus.train).enumerate() {
                clients.push(ClientProfile::new(k, cap, k, Arc::new(pool.clone()))?);
                train_indices.push((0..pool.len()).collect());
            }
        }
        PartitionMode::FeatureLabelSkew { alpha, parts } => {
            if capacities.len() != domains * parts {
                return Err(Error::Config(format!(
                    "feature&label skew needs {domains} domains x {parts} parts = {} capacities, got {}",
                    domains * parts,
                    capacities.len()
                )));
            }
            for (k, pool) in corpus.train.iter().enumerate() {
                let split = dirichlet_partition_indices(&pool.labels, pool.num_classes, alpha, parts, rng)?;
                for ix in split {
                    let id = clients.len();
                    clients.push(ClientProfile::new(id, capacities[id], k, Arc::new(pool.subset(&ix)))?);
                    train_indices.push(ix);
                }
            }
        }
    }
    Ok(FederationScenario {
        clients,
        test_sets: corpus.test.clone(),
        mode,
        train_indices,
    })
}

/// Total-variation distance between two label histograms.
pub fn total_variation(a: &[usize], b: &[usize]) -> f64 {
    let na: usize = a.iter().sum();
    let nb: usize = b.iter().sum();
    if na == 0 || nb == 0 {
        return 1.0;
    }
    0.5 * a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 / na as f64 - y as f64 / nb as f64).abs())
        .sum::<f64>()
}

/// Mean pairwise total-variation distance between client label distributions.
pub fn mean_pairwise_label_tv(parts: &[LabeledDataset]) -> f64 {
    let hists: Vec<Vec<usize>> = parts.iter().map(LabeledDataset::class_counts).collect();
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..hists.len() {
        for j in i + 1..hists.len() {
            sum += total_variation(&hists[i], &hists[j]);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Writes `domain,split,label,f0..f{d-1}` rows.
pub fn write_corpus_csv(path: &Path, corpus: &DomainCorpus) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let d = corpus.input_dim();
    let mut header = vec!["domain".to_string(), "split".into(), "label".into()];
    header.extend((0..d).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for (split, sets) in [("train", &corpus.train), ("test", &corpus.test)] {
        for set in sets {
            for (x, y) in set.iter() {
                let mut rec = vec![set.domain.to_string(), split.to_string(), y.to_string()];
                rec.extend(x.iter().map(|v| format!("{v:.16e}")));
                w.write_record(&rec)?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a corpus written by [`write_corpus_csv`] (or any file with the same
/// columns). The class count is one more than the largest label.
pub fn read_corpus_csv(path: &Path) -> Result<DomainCorpus> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<(usize, bool, usize, Vec<f64>)> = Vec::new();
    for (n, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::Parse(format!("{} row {}: bad {what}", path.display(), n + 2));
        if rec.len() < 4 {
            return Err(bad("column count"));
        }
        let domain: usize = rec[0].parse().map_err(|_| bad("domain"))?;
        let is_train = match &rec[1] {
            "train" => true,
            "test" => false,
            _ => return Err(bad("split")),
        };
        let label: usize = rec[2].parse().map_err(|_| bad("label"))?;
        let x: Vec<f64> = rec
            .iter()
            .skip(3)
            .map(|v| v.parse().map_err(|_| bad("feature")))
            .collect::<Result<_>>()?;
        rows.push((domain, is_train, label, x));
    }
    let domains = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    let classes = rows.iter().map(|r| r.2 + 1).max().unwrap_or(0);
    let mut train: Vec<(Vec<Vec<f64>>, Vec<usize>)> = vec![(vec![], vec![]); domains];
    let mut test = train.clone();
    for (d, is_train, y, x) in rows {
        let slot = if is_train { &mut train[d] } else { &mut test[d] };
        slot.0.push(x);
        slot.1.push(y);
    }
    let build = |sets: Vec<(Vec<Vec<f64>>, Vec<usize>)>| -> Result<Vec<LabeledDataset>> {
        sets.into_iter()
            .enumerate()
            .map(|(d, (f, l))| LabeledDataset::new(f, l, classes, d))
            .collect()
    };
    Ok(DomainCorpus {
        specs: Vec::new(),
        train: build(train)?,
        test: build(test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn small_cfg() -> SyntheticConfig {
        SyntheticConfig {
            num_domains: 3,
            num_classes: 4,
            input_dim: 6,
            samples_per_domain: 103,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn domain_rotations_are_orthogonal() {
        let mut rng = seeded(1);
        for strength in [0.0, 0.5, 3.0] {
            let spec = DomainSpec::random(16, strength, 1.0, 0.0, &mut rng);
            assert!(spec.orthogonality_error() < 1e-10);
        }
        let id = DomainSpec::random(8, 0.0, 0.0, 0.0, &mut rng);
        assert!(id.orthogonality_error() < 1e-15);
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let y = id.apply(&x, &mut rng);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_domain_matches_base_distribution() {
        let cfg = SyntheticConfig {
            num_domains: 2,
            ..small_cfg()
        };
        let specs = vec![DomainSpec::identity(6), DomainSpec::identity(6)];
        let a = make_domains_with_specs(&cfg, specs.clone(), &mut seeded(4)).unwrap();
        let b = make_domains_with_specs(&cfg, specs, &mut seeded(4)).unwrap();
        assert_eq!(a, b);
        // both domains are draws from the same class-conditional law: class means agree
        for c in 0..cfg.num_classes {
            let mean = |d: &LabeledDataset| -> Vec<f64> {
                let rows: Vec<&Vec<f64>> = d.features.iter().zip(&d.labels).filter(|(_, &l)| l == c).map(|(f, _)| f).collect();
                (0..6).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / rows.len() as f64).collect()
            };
            let (m0, m1) = (mean(&a.train[0]), mean(&a.train[1]));
            for (x, y) in m0.iter().zip(&m1) {
                assert!((x - y).abs() < 0.6, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn stratified_split_and_balance() {
        let cfg = small_cfg();
        let corpus = make_synthetic_domains(&cfg, &mut seeded(2)).unwrap();
        assert_eq!(corpus.num_domains(), 3);
        for (tr, te) in corpus.train.iter().zip(&corpus.test) {
            assert_eq!(tr.len() + te.len(), 103);
            let counts = te.class_counts();
            for (c, &n) in counts.iter().enumerate() {
                let n_c = 103 / 4 + usize::from(c < 103 % 4);
                let expected = n_c as f64 * 0.2;
                assert!((n as f64 - expected).abs() <= 1.0);
            }
        }
        let err = make_synthetic_domains(
            &SyntheticConfig {
                num_classes: 200,
                ..small_cfg()
            },
            &mut seeded(2),
        );
        assert!(matches!(err, Err(Error::Precondition(_))));
    }

    #[test]
    fn default_has_six_domains() {
        assert_eq!(SyntheticConfig::default().num_domains, 6);
    }

    #[test]
    fn single_part_is_identity() {
        let corpus = make_synthetic_domains(&small_cfg(), &mut seeded(3)).unwrap();
        let parts = dirichlet_partition(&corpus.train[0], 0.5, 1, &mut seeded(1)).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0], corpus.train[0]);
    }

    #[test]
    fn dirichlet_errors() {
        let labels = vec![0, 1, 0];
        assert!(dirichlet_partition_indices(&labels, 2, 0.0, 2, &mut seeded(1)).is_err());
        assert!(dirichlet_partition_indices(&labels, 2, 1.0, 0, &mut seeded(1)).is_err());
        assert!(matches!(
            dirichlet_partition_indices(&labels, 2, 1.0, 4, &mut seeded(1)),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn large_alpha_is_near_uniform() {
        let labels: Vec<usize> = (0..10_000).map(|i| i % 10).collect();
        let parts = dirichlet_partition_indices(&labels, 10, 100.0, 5, &mut seeded(8)).unwrap();
        let uniform = vec![1usize; 10];
        for p in parts {
            let mut h = vec![0usize; 10];
            for i in p {
                h[labels[i]] += 1;
            }
            assert!(total_variation(&h, &uniform) < 0.1);
        }
    }

    #[test]
    fn skew_decreases_with_alpha() {
        let data = LabeledDataset::new(vec![vec![0.0]; 3000], (0..3000).map(|i| i % 10).collect(), 10, 0).unwrap();
        let tv = |alpha: f64| -> f64 {
            (0..5)
                .map(|s| {
                    let parts = dirichlet_partition(&data, alpha, 5, &mut seeded(s)).unwrap();
                    mean_pairwise_label_tv(&parts)
                })
                .sum::<f64>()
                / 5.0
        };
        let (a, b, c) = (tv(0.1), tv(0.5), tv(100.0));
        assert!(a > b && b > c, "{a} {b} {c}");
    }

    #[test]
    fn scenarios() {
        let cfg = SyntheticConfig {
            num_domains: 6,
            samples_per_domain: 200,
            ..small_cfg()
        };
        let corpus = make_synthetic_domains(&cfg, &mut seeded(5)).unwrap();
        let fs = build_federation_scenario(PartitionMode::FeatureSkew, &[8, 6, 5, 4, 3, 2], &corpus, &mut seeded(1)).unwrap();
        assert_eq!(fs.num_clients(), 6);
        for (k, c) in fs.clients.iter().enumerate() {
            assert_eq!(c.domain, k);
            assert_eq!(c.capacity, [8, 6, 5, 4, 3, 2][k]);
        }

        let caps: Vec<usize> = [8, 6, 5, 4, 3, 2].iter().flat_map(|&c| [c; 5]).collect();
        let mode = PartitionMode::FeatureLabelSkew { alpha: 0.5, parts: 5 };
        let fl = build_federation_scenario(mode, &caps, &corpus, &mut seeded(1)).unwrap();
        assert_eq!(fl.num_clients(), 30);
        for k in 0..6 {
            let group: Vec<_> = fl.clients.iter().filter(|c| c.domain == k).collect();
            assert_eq!(group.len(), 5);
            assert!(group.iter().all(|c| c.capacity == group[0].capacity));
            let mut all: Vec<usize> = fl
                .train_indices
                .iter()
                .zip(&fl.clients)
                .filter(|(_, c)| c.domain == k)
                .flat_map(|(ix, _)| ix.clone())
                .collect();
            all.sort_unstable();
            assert_eq!(all, (0..corpus.train[k].len()).collect::<Vec<_>>());
        }

        assert!(matches!(
            build_federation_scenario(PartitionMode::FeatureSkew, &[8, 6], &corpus, &mut seeded(1)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build_federation_scenario(mode, &[8; 6], &corpus, &mut seeded(1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let corpus = make_synthetic_domains(&small_cfg(), &mut seeded(6)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        write_corpus_csv(&path, &corpus).unwrap();
        let back = read_corpus_csv(&path).unwrap();
        assert_eq!(back.train, corpus.train);
        assert_eq!(back.test, corpus.test);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn partition_is_complete_and_disjoint(
            seed in any::<u64>(),
            n in 5usize..300,
            classes in 1usize..8,
            parts in 1usize..6,
            alpha in prop::sample::select(vec![0.05, 0.1, 0.5, 1.0, 10.0, 100.0]),
        ) {
            prop_assume!(parts <= n);
            let labels: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % classes).collect();
            let split = dirichlet_partition_indices(&labels, classes, alpha, parts, &mut seeded(seed)).unwrap();
            prop_assert_eq!(split.len(), parts);
            prop_assert!(split.iter().all(|p| !p.is_empty()));
            let mut all: Vec<usize> = split.into_iter().flatten().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
