//! Synthetic long-tail benchmark generator.
//!
//! Actions are partitioned into mutually exclusive clusters, each led by a
//! root action; an image carries exactly one root plus a random subset of
//! that root's satellite actions, so roots never co-occur while satellites
//! co-occur with their root at planted conditional rates. One cluster is
//! carried by only a few objects at a tiny rate, producing designated rare
//! interaction classes whose training counts are capped. Features are
//! class-conditional Gaussians per stream, so actions are learnable from
//! features while the planted co-occurrence adds information the features
//! alone do not carry.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AcpError, Result};
use crate::model::{EmbeddingTable, PairExample};
use crate::priors::{PriorMatrices, Scope};
use crate::space::{Box4, HoiSpace, RawAnnotationRecord, RawInstance};

/// Configuration of the synthetic benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_actions: usize,
    pub n_objects: usize,
    /// Training images.
    pub n_images: usize,
    /// Test images (before the per-class top-up).
    pub n_test_images: usize,
    pub seed: u64,
    /// Approximate fraction of valid interaction classes made rare.
    pub rare_fraction: f64,
    /// Hard cap on positive training images per designated rare class.
    pub rare_max_count: u32,
    /// Standard deviation of the per-stream feature noise.
    pub feature_noise: f64,
    /// Feature dimension of each stream.
    pub feature_dim: usize,
    /// Object word-embedding dimension.
    pub embed_dim: usize,
    /// Probability of adding one no-interaction candidate pair per image.
    pub negative_pair_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_actions: 12,
            n_objects: 6,
            n_images: 2400,
            n_test_images: 600,
            seed: 0,
            rare_fraction: 0.15,
            rare_max_count: 8,
            feature_noise: 1.0,
            feature_dim: 16,
            embed_dim: 8,
            negative_pair_prob: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_actions < 4 || self.n_objects == 0 || self.n_images == 0 {
            return Err(AcpError::Config(
                "synthetic benchmark needs at least 4 actions, 1 object, and 1 image".to_string(),
            ));
        }
        if self.feature_dim == 0 || self.embed_dim == 0 {
            return Err(AcpError::Config("zero feature dimension".to_string()));
        }
        if !(0.0..=1.0).contains(&self.rare_fraction) || !(0.0..=1.0).contains(&self.negative_pair_prob) {
            return Err(AcpError::Config("probabilities must lie in [0, 1]".to_string()));
        }
        if self.feature_noise < 0.0 {
            return Err(AcpError::Config("negative feature noise".to_string()));
        }
        Ok(())
    }
}

/// The planted generative structure: exclusive clusters and per-object
/// sampling probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedStructure {
    pub n_actions: usize,
    pub n_objects: usize,
    /// Action indices per cluster; the first entry of each is the root.
    pub clusters: Vec<Vec<usize>>,
    /// Index of the rare cluster, if one was designated.
    pub rare_cluster: Option<usize>,
    /// Objects that carry the rare cluster.
    pub rare_objects: Vec<usize>,
    /// Per object, per cluster: probability that an image of this object
    /// draws this cluster's root.
    pub root_probs: Vec<Vec<f64>>,
    /// Per object, per cluster, per satellite position: inclusion
    /// probability of the satellite given the root.
    pub sat_probs: Vec<Vec<Vec<f64>>>,
}

impl PlantedStructure {
    /// Deterministic cluster structure with per-object long-tailed root
    /// distributions.
    pub fn clustered(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5157_ab7e_11d3_9c42);
        let n = cfg.n_actions;
        let n_clusters = (n / 4).clamp(2, 8);
        // Near-equal contiguous clusters; the last one is smallest and, when
        // a tail is requested, becomes the rare cluster.
        let base = n / n_clusters;
        let extra = n % n_clusters;
        let mut clusters = Vec::with_capacity(n_clusters);
        let mut next = 0;
        for c in 0..n_clusters {
            let size = base + usize::from(c < extra);
            clusters.push((next..next + size).collect::<Vec<usize>>());
            next += size;
        }

        let rare_cluster = (cfg.rare_fraction > 0.0).then_some(n_clusters - 1);
        let rare_cluster_size = rare_cluster.map(|c| clusters[c].len()).unwrap_or(0);
        // Number of rare-cluster carrier objects sized so the designated
        // rare classes approximate rare_fraction of all classes.
        let rare_objects: Vec<usize> = match rare_cluster {
            Some(_) => {
                let approx_valid = (cfg.n_objects * n) as f64;
                let want = (cfg.rare_fraction * approx_valid / rare_cluster_size as f64).round();
                let carriers = (want as usize).clamp(1, cfg.n_objects);
                (0..carriers).collect()
            }
            None => Vec::new(),
        };

        // Expected images per object under uniform object sampling.
        let images_per_object = (cfg.n_images / cfg.n_objects).max(1) as f64;
        let rare_target = (cfg.rare_max_count as f64 / 2.0).max(1.0);

        let mut root_probs = Vec::with_capacity(cfg.n_objects);
        let mut sat_probs = Vec::with_capacity(cfg.n_objects);
        for o in 0..cfg.n_objects {
            // Zipf-like weights over the common clusters, permuted per
            // object so objects favor different roots.
            let common: Vec<usize> = (0..n_clusters)
                .filter(|&c| Some(c) != rare_cluster)
                .collect();
            let mut ranks: Vec<usize> = (0..common.len()).collect();
            for i in (1..ranks.len()).rev() {
                let j = rng.random_range(0..=i);
                ranks.swap(i, j);
            }
            let carries_rare = rare_cluster.is_some() && rare_objects.contains(&o);
            let p_rare = if carries_rare {
                (rare_target / images_per_object).min(0.2)
            } else {
                0.0
            };
            let weights: Vec<f64> = ranks
                .iter()
                .map(|&r| 1.0 / (1.0 + r as f64).powf(1.1))
                .collect();
            let total: f64 = weights.iter().sum();
            let mut probs = vec![0.0; n_clusters];
            for (ci, &c) in common.iter().enumerate() {
                probs[c] = weights[ci] / total * (1.0 - p_rare);
            }
            if let Some(rc) = rare_cluster {
                probs[rc] = p_rare;
            }
            root_probs.push(probs);

            let mut per_cluster = Vec::with_capacity(n_clusters);
            for (c, members) in clusters.iter().enumerate() {
                let mut qs = Vec::with_capacity(members.len().saturating_sub(1));
                for _ in 1..members.len() {
                    let q = if root_probs[o][c] == 0.0 {
                        0.0
                    } else if rng.random::<f64>() < 0.25 {
                        0.0
                    } else {
                        rng.random_range(0.35..0.85)
                    };
                    qs.push(q);
                }
                per_cluster.push(qs);
            }
            sat_probs.push(per_cluster);
        }

        let mut planted = PlantedStructure {
            n_actions: n,
            n_objects: cfg.n_objects,
            clusters,
            rare_cluster,
            rare_objects,
            root_probs,
            sat_probs,
        };
        planted.ensure_satellite_support();
        Ok(planted)
    }

    /// Every satellite must be reachable through at least one object, or it
    /// would be unseen and unlearnable by construction.
    fn ensure_satellite_support(&mut self) {
        for c in 0..self.clusters.len() {
            for si in 0..self.clusters[c].len().saturating_sub(1) {
                let supported = (0..self.n_objects)
                    .any(|o| self.root_probs[o][c] > 0.0 && self.sat_probs[o][c][si] > 0.0);
                if !supported {
                    if let Some(o) =
                        (0..self.n_objects).find(|&o| self.root_probs[o][c] > 0.0)
                    {
                        self.sat_probs[o][c][si] = 0.5;
                    }
                }
            }
        }
    }

    pub fn cluster_of(&self, action: usize) -> usize {
        self.clusters
            .iter()
            .position(|c| c.contains(&action))
            .expect("action belongs to a cluster")
    }

    pub fn root_of(&self, action: usize) -> usize {
        self.clusters[self.cluster_of(action)][0]
    }

    /// Valid (object, action) classes: reachable with positive probability.
    pub fn valid_classes(&self) -> BTreeSet<(usize, usize)> {
        let mut out = BTreeSet::new();
        for o in 0..self.n_objects {
            for (c, members) in self.clusters.iter().enumerate() {
                if self.root_probs[o][c] == 0.0 {
                    continue;
                }
                out.insert((o, members[0]));
                for (si, &s) in members[1..].iter().enumerate() {
                    if self.sat_probs[o][c][si] > 0.0 {
                        out.insert((o, s));
                    }
                }
            }
        }
        out
    }

    /// Designated rare classes: the rare cluster's valid classes.
    pub fn rare_classes(&self) -> BTreeSet<(usize, usize)> {
        match self.rare_cluster {
            Some(rc) => self
                .valid_classes()
                .into_iter()
                .filter(|&(_, a)| self.cluster_of(a) == rc)
                .collect(),
            None => BTreeSet::new(),
        }
    }

    /// Marginal probability that an image of this object carries an action.
    fn marginal(&self, object: usize, action: usize) -> f64 {
        let c = self.cluster_of(action);
        let members = &self.clusters[c];
        let p_root = self.root_probs[object][c];
        if members[0] == action {
            p_root
        } else {
            let si = members[1..].iter().position(|&s| s == action).unwrap();
            p_root * self.sat_probs[object][c][si]
        }
    }

    /// Joint probability that an image of this object carries both actions.
    fn joint(&self, object: usize, a: usize, b: usize) -> f64 {
        if a == b {
            return self.marginal(object, a);
        }
        let ca = self.cluster_of(a);
        if ca != self.cluster_of(b) {
            return 0.0;
        }
        let members = &self.clusters[ca];
        let p_root = self.root_probs[object][ca];
        let inclusion = |action: usize| -> f64 {
            if members[0] == action {
                1.0
            } else {
                let si = members[1..].iter().position(|&s| s == action).unwrap();
                self.sat_probs[object][ca][si]
            }
        };
        p_root * inclusion(a) * inclusion(b)
    }

    /// The analytic co-occurrence matrices this structure induces for one
    /// object, mirroring the empirical definition: conditional probability
    /// given presence (and absence) at the image level.
    pub fn planted_cooc(&self, object: usize) -> PriorMatrices {
        let n = self.n_actions;
        let mut cooc = vec![0.0; n * n];
        let mut comp = vec![0.0; n * n];
        for i in 0..n {
            let pi = self.marginal(object, i);
            for j in 0..n {
                let pij = self.joint(object, i, j);
                if pi > 0.0 {
                    cooc[i * n + j] = pij / pi;
                }
                if i != j && pi < 1.0 {
                    comp[i * n + j] = (self.marginal(object, j) - pij) / (1.0 - pi);
                }
            }
        }
        PriorMatrices {
            n_actions: n,
            scope: Scope::Object(object),
            cooc,
            comp,
        }
    }
}

/// Everything the generator emits.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub space: HoiSpace,
    pub planted: PlantedStructure,
    pub train_annotations: Vec<RawAnnotationRecord>,
    pub test_annotations: Vec<RawAnnotationRecord>,
    pub train_pairs: Vec<PairExample>,
    pub test_pairs: Vec<PairExample>,
    pub embeddings: EmbeddingTable,
}

struct FeatureModel {
    dim: usize,
    noise: f64,
    /// Per stream (human, object-appearance, pose, geometry), per action.
    action_sig: [Vec<Vec<f64>>; 4],
    /// Per object, for the object-appearance stream.
    object_sig: Vec<Vec<f64>>,
    /// Per stream baseline added to every pair.
    neutral: [Vec<f64>; 4],
    embeddings: EmbeddingTable,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * normal(rng)).collect()
}

impl FeatureModel {
    fn new(cfg: &SynthConfig, planted: &PlantedStructure) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x00fe_a75e_5a8d_71c9);
        let dim = cfg.feature_dim;
        let strength = |a: usize| -> f64 {
            if planted.clusters.iter().any(|c| c[0] == a) {
                1.2
            } else {
                0.8
            }
        };
        let mut action_sig: [Vec<Vec<f64>>; 4] = Default::default();
        for sig in action_sig.iter_mut() {
            *sig = (0..cfg.n_actions)
                .map(|a| gaussian_vec(&mut rng, dim, strength(a)))
                .collect();
        }
        let object_sig = (0..cfg.n_objects)
            .map(|_| gaussian_vec(&mut rng, dim, 1.0))
            .collect();
        let neutral = [
            gaussian_vec(&mut rng, dim, 0.4),
            gaussian_vec(&mut rng, dim, 0.4),
            gaussian_vec(&mut rng, dim, 0.4),
            gaussian_vec(&mut rng, dim, 0.4),
        ];
        let rows = (0..cfg.n_objects)
            .map(|_| gaussian_vec(&mut rng, cfg.embed_dim, 1.0))
            .collect();
        let embeddings = EmbeddingTable::new(cfg.embed_dim, rows).expect("finite rows");
        FeatureModel {
            dim,
            noise: cfg.feature_noise,
            action_sig,
            object_sig,
            neutral,
            embeddings,
        }
    }

    fn stream(
        &self,
        rng: &mut ChaCha8Rng,
        stream: usize,
        labels: &BTreeSet<usize>,
        object: usize,
        action_scale: f64,
    ) -> Vec<f64> {
        let mut out = self.neutral[stream].clone();
        if stream == 1 {
            for (v, s) in out.iter_mut().zip(&self.object_sig[object]) {
                *v += s;
            }
        }
        for &a in labels {
            for (v, s) in out.iter_mut().zip(&self.action_sig[stream][a]) {
                *v += action_scale * s;
            }
        }
        for v in out.iter_mut() {
            *v += self.noise * normal(rng);
        }
        out
    }

    fn pair_features(
        &self,
        rng: &mut ChaCha8Rng,
        labels: &BTreeSet<usize>,
        object: usize,
    ) -> [Vec<f64>; 4] {
        [
            self.stream(rng, 0, labels, object, 1.0),
            self.stream(rng, 1, labels, object, 0.3),
            self.stream(rng, 2, labels, object, 1.0),
            self.stream(rng, 3, labels, object, 0.5),
        ]
    }
}

/// Non-overlapping box slot within a 640x480 canvas.
fn slot_boxes(rng: &mut ChaCha8Rng, slot: usize) -> (Box4, Box4) {
    let x0 = (slot % 4) as f64 * 160.0;
    let y0 = if slot < 4 { 0.0 } else { 240.0 };
    let sub_box = |rng: &mut ChaCha8Rng| -> Box4 {
        let x1 = x0 + rng.random_range(0.0..30.0);
        let y1 = y0 + rng.random_range(0.0..60.0);
        let w = rng.random_range(70.0..120.0);
        let h = rng.random_range(90.0..150.0);
        [x1, y1, x1 + w, y1 + h]
    };
    (sub_box(rng), sub_box(rng))
}

fn sample_cluster(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let total: f64 = probs.iter().sum();
    let mut draw = rng.random::<f64>() * total;
    for (c, &p) in probs.iter().enumerate() {
        draw -= p;
        if draw <= 0.0 && p > 0.0 {
            return c;
        }
    }
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .expect("at least one cluster has positive probability")
}

fn action_names(n: usize) -> Vec<String> {
    (0..n).map(|a| format!("act{a:02}")).collect()
}

fn object_names(n: usize) -> Vec<String> {
    (0..n).map(|o| format!("obj{o}")).collect()
}

struct ImageSampler<'a> {
    cfg: &'a SynthConfig,
    planted: &'a PlantedStructure,
    features: &'a FeatureModel,
    rare: BTreeSet<(usize, usize)>,
    counts: BTreeMap<(usize, usize), u32>,
}

impl<'a> ImageSampler<'a> {
    /// Sample one image: label set (with optional rare caps), one positive
    /// pair, maybe one negative pair; returns annotation + pairs.
    fn image(
        &mut self,
        rng: &mut ChaCha8Rng,
        image_id: String,
        enforce_caps: bool,
        forced: Option<(usize, usize)>,
    ) -> Result<(RawAnnotationRecord, Vec<PairExample>)> {
        let planted = self.planted;
        let (object, cluster) = match forced {
            Some((o, a)) => (o, planted.cluster_of(a)),
            None => {
                let o = rng.random_range(0..self.cfg.n_objects);
                let mut tries = 0;
                let c = loop {
                    let c = sample_cluster(rng, &planted.root_probs[o]);
                    let root = planted.clusters[c][0];
                    if !enforce_caps || !self.at_cap(o, root) {
                        break c;
                    }
                    tries += 1;
                    if tries > 200 {
                        return Err(AcpError::Config(
                            "rare-class caps are infeasible for the requested image budget"
                                .to_string(),
                        ));
                    }
                };
                (o, c)
            }
        };
        let members = &planted.clusters[cluster];
        let root = members[0];
        let mut labels = BTreeSet::from([root]);
        for (si, &s) in members[1..].iter().enumerate() {
            let q = planted.sat_probs[object][cluster][si];
            let forced_sat = forced.is_some_and(|(_, fa)| fa == s);
            if forced_sat || rng.random::<f64>() < q {
                if enforce_caps && self.at_cap(object, s) {
                    continue;
                }
                labels.insert(s);
            }
        }
        for &a in &labels {
            *self.counts.entry((object, a)).or_insert(0) += 1;
        }

        let (human_box, object_box) = slot_boxes(rng, 0);
        let feats = self.features.pair_features(rng, &labels, object);
        let positive = PairExample {
            image_id: image_id.clone(),
            x_human: feats[0].clone(),
            x_object: feats[1].clone(),
            pose: feats[2].clone(),
            geom: feats[3].clone(),
            o_embed: self.features.embeddings.rows[object].clone(),
            object,
            det_human: rng.random_range(0.75..0.98),
            det_object: rng.random_range(0.75..0.98),
            gt_actions: labels.clone(),
            human_box,
            object_box,
        };
        let mut pairs = vec![positive];

        if rng.random::<f64>() < self.cfg.negative_pair_prob {
            let neg_object = rng.random_range(0..self.cfg.n_objects);
            let (hb, ob) = slot_boxes(rng, 1);
            let empty = BTreeSet::new();
            let feats = self.features.pair_features(rng, &empty, neg_object);
            pairs.push(PairExample {
                image_id: image_id.clone(),
                x_human: feats[0].clone(),
                x_object: feats[1].clone(),
                pose: feats[2].clone(),
                geom: feats[3].clone(),
                o_embed: self.features.embeddings.rows[neg_object].clone(),
                object: neg_object,
                det_human: rng.random_range(0.75..0.98),
                det_object: rng.random_range(0.75..0.98),
                gt_actions: empty,
                human_box: hb,
                object_box: ob,
            });
        }

        let names = action_names(self.cfg.n_actions);
        let objects = object_names(self.cfg.n_objects);
        let record = RawAnnotationRecord {
            image_id,
            instances: vec![RawInstance {
                human_box,
                object_box,
                object: objects[object].clone(),
                actions: labels.iter().map(|&a| names[a].clone()).collect(),
            }],
        };
        Ok((record, pairs))
    }

    fn at_cap(&self, object: usize, action: usize) -> bool {
        self.rare.contains(&(object, action))
            && self
                .counts
                .get(&(object, action))
                .is_some_and(|&c| c >= self.cfg.rare_max_count)
    }
}

/// Generate the full benchmark: train/test annotations, pair features,
/// embedding table, and the planted priors. Deterministic for a fixed
/// configuration.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let planted = PlantedStructure::clustered(cfg)?;
    let rare = planted.rare_classes();
    if cfg.rare_max_count as usize * rare.len() > cfg.n_images {
        return Err(AcpError::Config(format!(
            "infeasible tail: {} rare classes x cap {} exceeds the {}-image budget",
            rare.len(),
            cfg.rare_max_count,
            cfg.n_images
        )));
    }
    let features = FeatureModel::new(cfg, &planted);

    let valid = planted.valid_classes();
    let space = HoiSpace::new(
        action_names(cfg.n_actions),
        object_names(cfg.n_objects),
        valid.iter().copied().collect(),
        crate::space::DEFAULT_RARE_THRESHOLD,
    )?;

    // Training split: long tail enforced.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7c83_92ad_0001_774f);
    let mut sampler = ImageSampler {
        cfg,
        planted: &planted,
        features: &features,
        rare: rare.clone(),
        counts: BTreeMap::new(),
    };
    let mut train_annotations = Vec::with_capacity(cfg.n_images);
    let mut train_pairs = Vec::new();
    for i in 0..cfg.n_images {
        let (rec, pairs) = sampler.image(&mut rng, format!("train_{i:06}"), true, None)?;
        train_annotations.push(rec);
        train_pairs.extend(pairs);
    }

    // Test split: tempered root distribution (flatter tail) plus a top-up
    // pass so every valid class has ground truth to score.
    let mut tempered = planted.clone();
    for o in 0..cfg.n_objects {
        let probs = &mut tempered.root_probs[o];
        let mut total = 0.0;
        for p in probs.iter_mut() {
            if *p > 0.0 {
                *p = p.powf(0.35);
            }
            total += *p;
        }
        for p in probs.iter_mut() {
            *p /= total;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1f11_6cc0_9a2e_5510);
    let mut test_sampler = ImageSampler {
        cfg,
        planted: &tempered,
        features: &features,
        rare: BTreeSet::new(),
        counts: BTreeMap::new(),
    };
    let mut test_annotations = Vec::with_capacity(cfg.n_test_images);
    let mut test_pairs = Vec::new();
    for i in 0..cfg.n_test_images {
        let (rec, pairs) =
            test_sampler.image(&mut rng, format!("test_{i:06}"), false, None)?;
        test_annotations.push(rec);
        test_pairs.extend(pairs);
    }
    const MIN_TEST_INSTANCES: u32 = 3;
    let mut extra = 0;
    for &(o, a) in &valid {
        loop {
            let have = test_sampler.counts.get(&(o, a)).copied().unwrap_or(0);
            if have >= MIN_TEST_INSTANCES {
                break;
            }
            let (rec, pairs) = test_sampler.image(
                &mut rng,
                format!("test_x{extra:06}"),
                false,
                Some((o, a)),
            )?;
            extra += 1;
            test_annotations.push(rec);
            test_pairs.extend(pairs);
        }
    }

    Ok(SynthOutput {
        space,
        planted,
        train_annotations,
        test_annotations,
        train_pairs,
        test_pairs,
        embeddings: features.embeddings,
    })
}

/// File names used by [`synth_write_dir`] and the harness.
pub mod files {
    pub const VOCAB: &str = "vocab.json";
    pub const TRAIN_ANNOTATIONS: &str = "train.json";
    pub const TEST_ANNOTATIONS: &str = "test.json";
    pub const TRAIN_PAIRS: &str = "train_pairs.jsonl";
    pub const TEST_PAIRS: &str = "test_pairs.jsonl";
    pub const EMBEDDINGS: &str = "embeddings.bin";
    pub const PLANTED: &str = "planted.json";
}

/// Planted priors as written to disk: the structure plus the analytic
/// per-object matrices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantedFile {
    pub structure: PlantedStructure,
    pub per_object_cooc: Vec<PriorMatrices>,
}

/// Generate and write the benchmark into a directory.
pub fn synth_write_dir(cfg: &SynthConfig, dir: &Path) -> Result<SynthOutput> {
    let out = synth_generate(cfg)?;
    std::fs::create_dir_all(dir).map_err(|e| AcpError::io(dir.display().to_string(), e))?;
    crate::io::save_space(&dir.join(files::VOCAB), &out.space)?;
    crate::io::save_annotations(&dir.join(files::TRAIN_ANNOTATIONS), &out.train_annotations)?;
    crate::io::save_annotations(&dir.join(files::TEST_ANNOTATIONS), &out.test_annotations)?;
    crate::io::save_pairs(&dir.join(files::TRAIN_PAIRS), &out.train_pairs, &out.space)?;
    crate::io::save_pairs(&dir.join(files::TEST_PAIRS), &out.test_pairs, &out.space)?;
    crate::io::save_embeddings(&dir.join(files::EMBEDDINGS), &out.embeddings)?;
    let planted_file = PlantedFile {
        structure: out.planted.clone(),
        per_object_cooc: (0..cfg.n_objects).map(|o| out.planted.planted_cooc(o)).collect(),
    };
    crate::io::save_json(&dir.join(files::PLANTED), &planted_file)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::{build_priors, count_label_stats};
    use crate::space::resolve_annotations;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            n_actions: 8,
            n_objects: 3,
            n_images: 300,
            n_test_images: 120,
            seed: 42,
            rare_fraction: 0.15,
            rare_max_count: 5,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = small_cfg();
        let a = synth_generate(&cfg).unwrap();
        let b = synth_generate(&cfg).unwrap();
        assert_eq!(a.train_pairs, b.train_pairs);
        assert_eq!(a.test_pairs, b.test_pairs);
        assert_eq!(
            serde_json::to_string(&a.train_annotations).unwrap(),
            serde_json::to_string(&b.train_annotations).unwrap()
        );
    }

    #[test]
    fn byte_identical_output_files() {
        let cfg = small_cfg();
        let d1 = tempfile::TempDir::new().unwrap();
        let d2 = tempfile::TempDir::new().unwrap();
        synth_write_dir(&cfg, d1.path()).unwrap();
        synth_write_dir(&cfg, d2.path()).unwrap();
        for name in [
            files::VOCAB,
            files::TRAIN_ANNOTATIONS,
            files::TEST_ANNOTATIONS,
            files::TRAIN_PAIRS,
            files::TEST_PAIRS,
            files::EMBEDDINGS,
            files::PLANTED,
        ] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between runs");
        }
    }

    #[test]
    fn certain_satellite_always_accompanies_root() {
        let cfg = SynthConfig {
            rare_fraction: 0.0,
            ..small_cfg()
        };
        let mut planted = PlantedStructure::clustered(&cfg).unwrap();
        // Force q = 1 for the first satellite of cluster 0 on every object.
        for o in 0..cfg.n_objects {
            if planted.root_probs[o][0] > 0.0 {
                planted.sat_probs[o][0][0] = 1.0;
            }
        }
        let features = FeatureModel::new(&cfg, &planted);
        let mut sampler = ImageSampler {
            cfg: &cfg,
            planted: &planted,
            features: &features,
            rare: BTreeSet::new(),
            counts: BTreeMap::new(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let root = planted.clusters[0][0];
        let sat = planted.clusters[0][1];
        let names = action_names(cfg.n_actions);
        for i in 0..200 {
            let (rec, _) = sampler.image(&mut rng, format!("i{i}"), false, None).unwrap();
            let actions = &rec.instances[0].actions;
            if actions.contains(&names[root]) {
                assert!(actions.contains(&names[sat]), "root without its certain satellite");
            }
        }
    }

    #[test]
    fn rare_classes_respect_cap() {
        let cfg = small_cfg();
        let out = synth_generate(&cfg).unwrap();
        let rare = out.planted.rare_classes();
        assert!(!rare.is_empty());
        let resolved = resolve_annotations(&out.train_annotations, &out.space).unwrap();
        let counts = crate::space::train_counts(&resolved, &out.space);
        let index = out.space.hoi_index_map();
        for &(o, a) in &rare {
            let m = index[&(o, a)];
            assert!(
                counts[m] <= cfg.rare_max_count,
                "class ({o},{a}) has {} > cap {}",
                counts[m],
                cfg.rare_max_count
            );
        }
    }

    #[test]
    fn roots_never_cooccur_in_generated_data() {
        let cfg = small_cfg();
        let out = synth_generate(&cfg).unwrap();
        let resolved = resolve_annotations(&out.train_annotations, &out.space).unwrap();
        let stats = count_label_stats(&resolved, &out.space);
        let roots: Vec<usize> = out.planted.clusters.iter().map(|c| c[0]).collect();
        for (i, &a) in roots.iter().enumerate() {
            for &b in &roots[i + 1..] {
                assert_eq!(stats.global.joint(a, b), 0, "roots {a} and {b} co-occur");
            }
        }
    }

    #[test]
    fn planted_priors_recovered_from_large_sample() {
        let cfg = SynthConfig {
            n_actions: 8,
            n_objects: 3,
            n_images: 5000,
            n_test_images: 10,
            seed: 7,
            rare_fraction: 0.0,
            ..Default::default()
        };
        let out = synth_generate(&cfg).unwrap();
        let resolved = resolve_annotations(&out.train_annotations, &out.space).unwrap();
        let stats = count_label_stats(&resolved, &out.space);
        for o in 0..cfg.n_objects {
            let estimated = build_priors(&stats, Scope::Object(o)).unwrap();
            let truth = out.planted.planted_cooc(o);
            let mut max_err = 0.0f64;
            for (e, t) in estimated.cooc.iter().zip(&truth.cooc) {
                max_err = max_err.max((e - t).abs());
            }
            assert!(max_err < 0.05, "object {o}: max abs error {max_err}");
        }
    }

    #[test]
    fn every_valid_class_has_test_ground_truth() {
        let cfg = small_cfg();
        let out = synth_generate(&cfg).unwrap();
        let resolved = resolve_annotations(&out.test_annotations, &out.space).unwrap();
        let counts = crate::space::train_counts(&resolved, &out.space);
        for (m, &c) in counts.iter().enumerate() {
            assert!(c >= 3, "class {m} has only {c} test instances");
        }
    }

    #[test]
    fn infeasible_tail_rejected() {
        let cfg = SynthConfig {
            n_images: 10,
            rare_max_count: 50,
            rare_fraction: 0.5,
            ..small_cfg()
        };
        assert!(synth_generate(&cfg).is_err());
    }

    #[test]
    fn pairs_validate_against_config_dims() {
        let cfg = small_cfg();
        let out = synth_generate(&cfg).unwrap();
        let model_cfg = crate::model::ModelConfig {
            d_human: cfg.feature_dim,
            d_object: cfg.feature_dim,
            d_pose: cfg.feature_dim,
            d_geom: cfg.feature_dim,
            d_embed: cfg.embed_dim,
            ..crate::model::ModelConfig::desk(
                crate::model::Variant::Modified,
                cfg.n_actions,
                cfg.n_objects,
            )
        };
        for pair in out.train_pairs.iter().take(50) {
            pair.validate(&model_cfg, Some(&out.embeddings)).unwrap();
        }
    }
}
