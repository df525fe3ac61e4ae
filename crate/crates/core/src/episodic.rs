//! Episode sampling and class splits.
//!
//! An episode is drawn deterministically from `(seed, episode_index)`;
//! re-running a seed replays the identical episode stream, and workers
//! can sample any index without coordinating. Class splits are drawn the
//! same way from the split seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingestion::{ClassId, Dataset, SampleId};
use crate::util::{rng_stream, StreamDomain};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub ways: usize,
    pub shots: usize,
    pub queries_per_episode: usize,
    pub seed: u64,
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ways < 2 {
            return Err(Error::InvalidArgument(format!(
                "ways must be at least 2, got {}",
                self.ways
            )));
        }
        if self.shots == 0 || self.queries_per_episode == 0 {
            return Err(Error::InvalidArgument(
                "shots and queries_per_episode must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Samples one class must be able to supply: its support shots plus
    /// its share of the query slots. Query slot j goes to class j mod
    /// ways, so the largest share is ceil(queries / ways).
    pub fn max_samples_per_class(&self) -> usize {
        self.shots + self.queries_per_episode.div_ceil(self.ways)
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeQuery {
    pub sample: SampleId,
    /// Index into the episode's class list, not a global class id.
    pub class_position: usize,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub class_ids: Vec<ClassId>,
    /// Support sample ids per class position.
    pub support: Vec<Vec<SampleId>>,
    pub queries: Vec<EpisodeQuery>,
}

/// Sample pools for one split: class id to sample ids.
#[derive(Debug, Clone, Default)]
pub struct SplitPools {
    pub samples_by_class: BTreeMap<ClassId, Vec<SampleId>>,
}

impl SplitPools {
    pub fn classes(&self) -> Vec<ClassId> {
        self.samples_by_class.keys().copied().collect()
    }

    pub fn num_classes(&self) -> usize {
        self.samples_by_class.len()
    }

    /// Drops classes that cannot serve the given episode shape, returning
    /// what was removed so callers can log it.
    pub fn prune_small_classes(&mut self, min_samples: usize) -> Vec<ClassId> {
        let removed: Vec<ClassId> = self
            .samples_by_class
            .iter()
            .filter(|(_, v)| v.len() < min_samples)
            .map(|(&c, _)| c)
            .collect();
        for c in &removed {
            self.samples_by_class.remove(c);
        }
        removed
    }
}

/// Draws one episode. Classes are uniform without replacement; supports
/// and queries are uniform without replacement within each class, so the
/// two sets are disjoint by construction.
pub fn sample_episode(
    pools: &SplitPools,
    cfg: &EpisodeConfig,
    episode_index: u64,
) -> Result<Episode> {
    cfg.validate()?;
    let classes = pools.classes();
    if classes.len() < cfg.ways {
        return Err(Error::Infeasible(format!(
            "{} ways requested but the split holds {} classes",
            cfg.ways,
            classes.len()
        )));
    }
    let need = cfg.max_samples_per_class();
    if let Some((&limiting, samples)) = pools
        .samples_by_class
        .iter()
        .min_by_key(|(_, v)| v.len())
    {
        if samples.len() < need {
            return Err(Error::Infeasible(format!(
                "class {limiting} has {} samples but the episode shape needs {need}",
                samples.len()
            )));
        }
    }

    let mut rng = rng_stream(cfg.seed, StreamDomain::Episode, episode_index);
    let chosen = index::sample(&mut rng, classes.len(), cfg.ways);
    let class_ids: Vec<ClassId> = chosen.iter().map(|i| classes[i]).collect();

    let mut queries_per_class = vec![0usize; cfg.ways];
    for j in 0..cfg.queries_per_episode {
        queries_per_class[j % cfg.ways] += 1;
    }

    let mut support = Vec::with_capacity(cfg.ways);
    let mut queries = Vec::with_capacity(cfg.queries_per_episode);
    for (position, &class) in class_ids.iter().enumerate() {
        let pool = &pools.samples_by_class[&class];
        let take = cfg.shots + queries_per_class[position];
        let picks = index::sample(&mut rng, pool.len(), take);
        let ids: Vec<SampleId> = picks.iter().map(|i| pool[i]).collect();
        support.push(ids[..cfg.shots].to_vec());
        for &sample in &ids[cfg.shots..] {
            queries.push(EpisodeQuery { sample, class_position: position });
        }
    }
    Ok(Episode { class_ids, support, queries })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum SplitPolicy {
    /// Random class split by fractions; the remainder after flooring the
    /// validation and test shares goes to training.
    Fractions { val: f64, test: f64 },
    /// The benchmark ships its own test classes. Validation takes as many
    /// classes as the test set from the remainder, training the rest.
    ProvidedTest { test_classes: Vec<ClassId> },
}

impl SplitPolicy {
    pub fn eighty_ten_ten() -> Self {
        SplitPolicy::Fractions { val: 0.10, test: 0.10 }
    }

    pub fn sixty_twenty_twenty() -> Self {
        SplitPolicy::Fractions { val: 0.20, test: 0.20 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassSplits {
    pub train: Vec<ClassId>,
    pub val: Vec<ClassId>,
    pub test: Vec<ClassId>,
}

pub fn make_class_splits(
    all_classes: &[ClassId],
    policy: &SplitPolicy,
    seed: u64,
) -> Result<ClassSplits> {
    let mut classes = all_classes.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() != all_classes.len() {
        return Err(Error::InvalidArgument("duplicate class ids in split input".into()));
    }
    let mut rng = rng_stream(seed, StreamDomain::Split, 0);
    let (mut train, mut val, mut test);
    match policy {
        SplitPolicy::Fractions { val: fv, test: ft } => {
            if !(*fv > 0.0 && *ft > 0.0 && fv + ft < 1.0) {
                return Err(Error::Config(format!("bad split fractions {fv}/{ft}")));
            }
            let n = classes.len();
            let n_val = (fv * n as f64).floor() as usize;
            let n_test = (ft * n as f64).floor() as usize;
            if n_val == 0 || n_test == 0 || n_val + n_test >= n {
                return Err(Error::Config(format!(
                    "{n} classes cannot fill a {fv}/{ft} split"
                )));
            }
            let order = index::sample(&mut rng, n, n);
            let shuffled: Vec<ClassId> = order.iter().map(|i| classes[i]).collect();
            test = shuffled[..n_test].to_vec();
            val = shuffled[n_test..n_test + n_val].to_vec();
            train = shuffled[n_test + n_val..].to_vec();
        }
        SplitPolicy::ProvidedTest { test_classes } => {
            let mut remainder = classes.clone();
            for t in test_classes {
                match remainder.iter().position(|c| c == t) {
                    Some(i) => {
                        remainder.remove(i);
                    }
                    None => {
                        return Err(Error::Config(format!(
                            "provided test class {t} is not in the dataset"
                        )));
                    }
                }
            }
            let n_val = test_classes.len();
            if n_val == 0 || remainder.len() <= n_val {
                return Err(Error::Config(
                    "provided test split leaves no room for train and val".into(),
                ));
            }
            let order = index::sample(&mut rng, remainder.len(), remainder.len());
            let shuffled: Vec<ClassId> = order.iter().map(|i| remainder[i]).collect();
            test = test_classes.clone();
            val = shuffled[..n_val].to_vec();
            train = shuffled[n_val..].to_vec();
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(ClassSplits { train, val, test })
}

impl ClassSplits {
    /// Plain-text persistence, one `split class_id` pair per line.
    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for (name, ids) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for id in ids {
                writeln!(text, "{name} {id}").expect("string write");
            }
        }
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read_manifest(path: &Path) -> Result<ClassSplits> {
        let text = std::fs::read_to_string(path)?;
        let mut splits = ClassSplits { train: vec![], val: vec![], test: vec![] };
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (name, id) = (parts.next(), parts.next());
            let id: ClassId = id
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Config(format!("split manifest line {}", lineno + 1)))?;
            match name {
                Some("train") => splits.train.push(id),
                Some("val") => splits.val.push(id),
                Some("test") => splits.test.push(id),
                _ => {
                    return Err(Error::Config(format!(
                        "split manifest line {}: unknown split",
                        lineno + 1
                    )))
                }
            }
        }
        Ok(splits)
    }
}

#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train: SplitPools,
    pub val: SplitPools,
    pub test: SplitPools,
}

pub fn build_pools(dataset: &Dataset, splits: &ClassSplits) -> SplitDataset {
    let collect = |ids: &[ClassId]| {
        let mut pools = SplitPools::default();
        for &c in ids {
            if let Some(samples) = dataset.by_class.get(&c) {
                pools.samples_by_class.insert(c, samples.clone());
            }
        }
        pools
    };
    SplitDataset {
        train: collect(&splits.train),
        val: collect(&splits.val),
        test: collect(&splits.test),
    }
}

/// Removes every sample from train and val whose image also appears in
/// the test pools, so no pixel seen at test time was available earlier.
pub fn enforce_image_disjointness(mut pools: SplitDataset, dataset: &Dataset) -> SplitDataset {
    let test_images: std::collections::BTreeSet<usize> = pools
        .test
        .samples_by_class
        .values()
        .flatten()
        .map(|&s| dataset.samples[s].image_index)
        .collect();
    for split in [&mut pools.train, &mut pools.val] {
        for samples in split.samples_by_class.values_mut() {
            samples.retain(|&s| !test_images.contains(&dataset.samples[s].image_index));
        }
        split.samples_by_class.retain(|_, v| !v.is_empty());
    }
    pools
}

/// Draws `count` samples uniformly without replacement from every pooled
/// class merged together, for non-episodic pretraining batches.
pub fn sample_flat_batch(
    pools: &SplitPools,
    count: usize,
    seed: u64,
    batch_index: u64,
) -> Result<Vec<SampleId>> {
    let all: Vec<SampleId> = pools.samples_by_class.values().flatten().copied().collect();
    if all.len() < count {
        return Err(Error::Infeasible(format!(
            "batch of {count} from a pool of {}",
            all.len()
        )));
    }
    let mut rng = rng_stream(seed, StreamDomain::Shuffle, batch_index);
    let picks = index::sample(&mut rng, all.len(), count);
    Ok(picks.iter().map(|i| all[i]).collect())
}

/// Uniform class draw for single-class (1-way) region episodes.
pub fn sample_region_class(pools: &SplitPools, seed: u64, episode_index: u64) -> Result<ClassId> {
    let classes = pools.classes();
    if classes.is_empty() {
        return Err(Error::Infeasible("empty split".into()));
    }
    let mut rng = rng_stream(seed, StreamDomain::Episode, episode_index);
    Ok(classes[rng.gen_range(0..classes.len())])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_pools(classes: usize, samples_each: usize) -> SplitPools {
        let mut pools = SplitPools::default();
        let mut next = 0usize;
        for c in 0..classes {
            let ids: Vec<SampleId> = (0..samples_each).map(|_| { next += 1; next }).collect();
            pools.samples_by_class.insert(c as ClassId + 1, ids);
        }
        pools
    }

    fn cfg(ways: usize, shots: usize, queries: usize, seed: u64) -> EpisodeConfig {
        EpisodeConfig { ways, shots, queries_per_episode: queries, seed }
    }

    #[test]
    fn episode_has_disjoint_support_and_queries() {
        let pools = toy_pools(8, 12);
        for idx in 0..50 {
            let ep = sample_episode(&pools, &cfg(5, 3, 10, 42), idx).unwrap();
            assert_eq!(ep.class_ids.len(), 5);
            assert_eq!(ep.queries.len(), 10);
            let mut support: Vec<SampleId> = ep.support.iter().flatten().copied().collect();
            assert_eq!(support.len(), 15);
            support.sort_unstable();
            support.dedup();
            assert_eq!(support.len(), 15, "support repeats a sample");
            for q in &ep.queries {
                assert!(!support.contains(&q.sample), "query sample also in support");
            }
            let mut seen = ep.class_ids.clone();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), 5, "episode repeats a class");
        }
    }

    #[test]
    fn episode_stream_is_deterministic() {
        let pools = toy_pools(6, 10);
        let c = cfg(4, 2, 8, 7);
        for idx in 0..20 {
            let a = sample_episode(&pools, &c, idx).unwrap();
            let b = sample_episode(&pools, &c, idx).unwrap();
            assert_eq!(a.class_ids, b.class_ids);
            assert_eq!(a.support, b.support);
            let qa: Vec<_> = a.queries.iter().map(|q| (q.sample, q.class_position)).collect();
            let qb: Vec<_> = b.queries.iter().map(|q| (q.sample, q.class_position)).collect();
            assert_eq!(qa, qb);
        }
        let other = sample_episode(&pools, &cfg(4, 2, 8, 8), 0).unwrap();
        let first = sample_episode(&pools, &c, 0).unwrap();
        assert!(
            other.class_ids != first.class_ids || other.support != first.support,
            "different seeds produced the same draw"
        );
    }

    #[test]
    fn uneven_queries_spread_round_robin() {
        let pools = toy_pools(5, 10);
        let ep = sample_episode(&pools, &cfg(3, 1, 7, 1), 0).unwrap();
        let mut per_class = [0usize; 3];
        for q in &ep.queries {
            per_class[q.class_position] += 1;
        }
        assert_eq!(per_class, [3, 2, 2]);
    }

    #[test]
    fn infeasible_configs_name_the_problem() {
        let pools = toy_pools(3, 4);
        let err = sample_episode(&pools, &cfg(5, 1, 5, 0), 0).unwrap_err();
        assert!(format!("{err}").contains("3 classes"));

        let mut pools = toy_pools(4, 6);
        pools.samples_by_class.insert(99, vec![1, 2]);
        let err = sample_episode(&pools, &cfg(3, 4, 3, 0), 0).unwrap_err();
        assert!(format!("{err}").contains("class 99"), "{err}");

        assert!(sample_episode(&pools, &cfg(1, 1, 1, 0), 0).is_err());
    }

    #[test]
    fn fraction_splits_count_as_documented() {
        let classes: Vec<ClassId> = (1..=100).collect();
        let s = make_class_splits(&classes, &SplitPolicy::eighty_ten_ten(), 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));

        let classes: Vec<ClassId> = (1..=80).collect();
        let s = make_class_splits(&classes, &SplitPolicy::sixty_twenty_twenty(), 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (48, 16, 16));

        let mut all = s.train.clone();
        all.extend(&s.val);
        all.extend(&s.test);
        all.sort_unstable();
        assert_eq!(all, classes, "splits must partition the classes");
    }

    #[test]
    fn provided_test_split_sizes_val_like_test() {
        let classes: Vec<ClassId> = (1..=1000).collect();
        let test_classes: Vec<ClassId> = (761..=1000).collect();
        let s = make_class_splits(
            &classes,
            &SplitPolicy::ProvidedTest { test_classes: test_classes.clone() },
            9,
        )
        .unwrap();
        assert_eq!(s.test, test_classes);
        assert_eq!(s.val.len(), 240);
        assert_eq!(s.train.len(), 520);
        for v in &s.val {
            assert!(!s.test.contains(v) && !s.train.contains(v));
        }
    }

    #[test]
    fn split_manifest_roundtrips() {
        let s = ClassSplits { train: vec![1, 2, 9], val: vec![3], test: vec![4, 5] };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("splits.txt");
        s.write_manifest(&path).unwrap();
        let back = ClassSplits::read_manifest(&path).unwrap();
        assert_eq!(back.train, s.train);
        assert_eq!(back.val, s.val);
        assert_eq!(back.test, s.test);
    }

    #[test]
    fn splits_are_seed_deterministic() {
        let classes: Vec<ClassId> = (1..=50).collect();
        let a = make_class_splits(&classes, &SplitPolicy::eighty_ten_ten(), 11).unwrap();
        let b = make_class_splits(&classes, &SplitPolicy::eighty_ten_ten(), 11).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        let c = make_class_splits(&classes, &SplitPolicy::eighty_ten_ten(), 12).unwrap();
        assert!(a.test != c.test || a.val != c.val);
    }

    #[test]
    fn image_disjointness_drops_shared_images() {
        use crate::ingestion::{LoadedImage, Sample};
        use crate::util::BitMask;
        let images: Vec<LoadedImage> = (0..3)
            .map(|i| LoadedImage::new(i, format!("{i}.png"), 4, 4, vec![0; 48]).unwrap())
            .collect();
        let mut mask = BitMask::new(4, 4);
        mask.set(0, 0, true);
        let mk = |image_index: usize, class: ClassId| Sample {
            image_index,
            class,
            mask: mask.clone(),
            area_fraction: mask.area_fraction(),
        };
        // Image 1 carries both a train-class and a test-class sample.
        let samples = vec![mk(0, 1), mk(1, 1), mk(1, 2), mk(2, 2)];
        let mut by_class = BTreeMap::new();
        by_class.insert(1, vec![0, 1]);
        by_class.insert(2, vec![2, 3]);
        let dataset = Dataset {
            images,
            categories: BTreeMap::from([(1, "a".into()), (2, "b".into())]),
            samples,
            by_class,
        };
        let splits = ClassSplits { train: vec![1], val: vec![], test: vec![2] };
        let pools = build_pools(&dataset, &splits);
        assert_eq!(pools.train.samples_by_class[&1], vec![0, 1]);
        let pools = enforce_image_disjointness(pools, &dataset);
        assert_eq!(pools.train.samples_by_class[&1], vec![0]);
        assert_eq!(pools.test.samples_by_class[&2], vec![2, 3]);
    }

    #[test]
    fn prune_reports_removed_classes() {
        let mut pools = toy_pools(3, 5);
        pools.samples_by_class.insert(50, vec![1]);
        let removed = pools.prune_small_classes(3);
        assert_eq!(removed, vec![50]);
        assert_eq!(pools.num_classes(), 3);
    }
}
