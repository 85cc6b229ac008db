//! Controlled covariate and concept shift benchmarks.
//!
//! The in-distribution task draws `K` random unit prototypes and samples each
//! class as `prototype + N(0, noise² I)`. Covariate shift corrupts those
//! inputs with a five-step severity ladder; concept shift introduces held-out
//! classes whose prototypes sit at a controlled cosine similarity to a
//! training prototype while staying inside the span of the training
//! prototypes. Detection treats ID as the positive class and expects
//! higher scores on ID data.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{GeodinError, Result};
use crate::linalg::{dot, norm};
use crate::persistence::Embeddings;
use crate::scores::{geometry_view, ScoreSet};
use crate::trainer::Model;

/// Corruption magnitude multipliers for severities 1..=5.
pub const SEVERITY_LADDER: [f64; 5] = [0.1, 0.2, 0.4, 0.8, 1.6];

/// SplitMix64 finaliser; derives independent stream seeds.
pub(crate) fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(0x6a09_e667_f3bc_c909);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn gaussian_vec<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, d);
        let n = norm(&v);
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub n_classes: usize,
    pub input_dim: usize,
    pub n_per_class: usize,
    pub noise: f64,
    pub seed: u64,
    pub train_frac: f64,
    pub val_frac: f64,
    pub concept_groups: usize,
    pub classes_per_group: usize,
    pub concept_per_class: usize,
    /// Anchor similarity of the least similar held-out group (index 0).
    pub similarity_min: f64,
    /// Anchor similarity of the most similar held-out group.
    pub similarity_max: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            n_classes: 8,
            input_dim: 16,
            n_per_class: 400,
            noise: 0.2,
            seed: 0,
            train_frac: 0.6,
            val_frac: 0.2,
            concept_groups: 5,
            classes_per_group: 2,
            concept_per_class: 160,
            similarity_min: 0.4,
            similarity_max: 0.9,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(GeodinError::Config(format!(
                "task.n_classes must be at least 2, got {}",
                self.n_classes
            )));
        }
        if self.input_dim == 0 || self.n_per_class == 0 {
            return Err(GeodinError::Config(
                "task.input_dim and task.n_per_class must be positive".into(),
            ));
        }
        if !(self.noise >= 0.0) {
            return Err(GeodinError::Config("task.noise must be nonnegative".into()));
        }
        if !(self.train_frac > 0.0 && self.val_frac >= 0.0 && self.train_frac + self.val_frac < 1.0) {
            return Err(GeodinError::Config(
                "task.train_frac and task.val_frac must leave a nonempty test split".into(),
            ));
        }
        if !(-1.0..=1.0).contains(&self.similarity_min)
            || !(-1.0..=1.0).contains(&self.similarity_max)
            || self.similarity_min > self.similarity_max
        {
            return Err(GeodinError::Config(
                "task similarity range must satisfy -1 <= min <= max <= 1".into(),
            ));
        }
        Ok(())
    }

    fn split_counts(&self) -> (usize, usize, usize) {
        let n = self.n_per_class;
        let train = ((n as f64) * self.train_frac).round() as usize;
        let val = ((n as f64) * self.val_frac).round() as usize;
        let train = train.min(n);
        let val = val.min(n - train);
        (train, val, n - train - val)
    }

    /// Target similarity of concept group `g`; evenly spaced, highest last.
    pub fn group_similarity(&self, g: usize) -> f64 {
        if self.concept_groups <= 1 {
            return self.similarity_max;
        }
        let t = g as f64 / (self.concept_groups - 1) as f64;
        self.similarity_min + (self.similarity_max - self.similarity_min) * t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptGroup {
    pub index: usize,
    /// Cosine similarity of each prototype to its anchor training prototype.
    /// Below roughly 0.4 another training class can be nearer than the anchor.
    pub similarity: f64,
    pub prototypes: Vec<Vec<f64>>,
    /// Labels index into `prototypes`; they are not training classes.
    pub data: Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub config: TaskConfig,
    pub prototypes: Vec<Vec<f64>>,
    pub train: Dataset,
    pub val: Dataset,
    /// Interleaved by class, so any prefix is class balanced.
    pub test: Dataset,
    pub concept: Vec<ConceptGroup>,
}

impl SyntheticTask {
    /// The two halves of the test split used as ID reference and as the base
    /// for covariate-shifted OOD data.
    pub fn test_halves(&self) -> (Dataset, Dataset) {
        self.test.split_at(self.test.len() / 2)
    }
}

pub fn make_task(
    n_classes: usize,
    input_dim: usize,
    n_per_class: usize,
    noise: f64,
    seed: u64,
) -> Result<SyntheticTask> {
    build_task(&TaskConfig {
        n_classes,
        input_dim,
        n_per_class,
        noise,
        seed,
        ..TaskConfig::default()
    })
}

pub fn build_task(config: &TaskConfig) -> Result<SyntheticTask> {
    config.validate()?;
    let k = config.n_classes;
    let d = config.input_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let prototypes: Vec<Vec<f64>> = (0..k).map(|_| unit(&mut rng, d)).collect();

    let sample = |rng: &mut ChaCha8Rng, p: &[f64]| -> Vec<f64> {
        p.iter()
            .map(|&v| {
                let e: f64 = StandardNormal.sample(rng);
                v + config.noise * e
            })
            .collect()
    };

    let per_class: Vec<Vec<Vec<f64>>> = prototypes
        .iter()
        .map(|p| (0..config.n_per_class).map(|_| sample(&mut rng, p)).collect())
        .collect();
    let (n_train, n_val, n_test) = config.split_counts();
    let interleave = |from: usize, count: usize, tag: u64| -> Dataset {
        let mut inputs = Vec::with_capacity(count * k);
        let mut labels = Vec::with_capacity(count * k);
        for j in from..from + count {
            for (c, samples) in per_class.iter().enumerate() {
                inputs.push(samples[j].clone());
                labels.push(c);
            }
        }
        Dataset {
            inputs,
            labels,
            seed: mix_seed(config.seed, tag),
        }
    };
    let train = interleave(0, n_train, 1);
    let val = interleave(n_train, n_val, 2);
    let test = interleave(n_train + n_val, n_test, 3);

    let mut concept = Vec::with_capacity(config.concept_groups);
    for g in 0..config.concept_groups {
        let s = config.group_similarity(g);
        let mut group_protos = Vec::with_capacity(config.classes_per_group);
        for j in 0..config.classes_per_group {
            let a = (g * config.classes_per_group + j) % k;
            let u = blend_direction(&prototypes, a);
            let c = (1.0 - s * s).max(0.0).sqrt();
            group_protos.push(
                prototypes[a]
                    .iter()
                    .zip(&u)
                    .map(|(x, y)| s * x + c * y)
                    .collect::<Vec<f64>>(),
            );
        }
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..config.concept_per_class {
            for (j, p) in group_protos.iter().enumerate() {
                inputs.push(sample(&mut rng, p));
                labels.push(j);
            }
        }
        concept.push(ConceptGroup {
            index: g,
            similarity: s,
            prototypes: group_protos,
            data: Dataset {
                inputs,
                labels,
                seed: mix_seed(config.seed, 100 + g as u64),
            },
        });
    }

    Ok(SyntheticTask {
        config: config.clone(),
        prototypes,
        train,
        val,
        test,
        concept,
    })
}

/// Unit direction orthogonal to prototype `a`, pointing at the centroid of
/// the other prototypes.
fn blend_direction(prototypes: &[Vec<f64>], a: usize) -> Vec<f64> {
    let anchor = &prototypes[a];
    let mut v = vec![0.0; anchor.len()];
    for (i, p) in prototypes.iter().enumerate() {
        if i != a {
            v.iter_mut().zip(p).for_each(|(x, y)| *x += y);
        }
    }
    let p = dot(&v, anchor);
    v.iter_mut().zip(anchor).for_each(|(x, y)| *x -= p * y);
    let n = norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    /// Control: the OOD side is an unshifted held-out half.
    None,
    GaussianNoise,
    UniformNoise,
    FeatureDropout,
    Smoothing,
    ConceptSplit,
}

impl ShiftKind {
    pub const COVARIATE: [ShiftKind; 4] = [
        ShiftKind::GaussianNoise,
        ShiftKind::UniformNoise,
        ShiftKind::FeatureDropout,
        ShiftKind::Smoothing,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ShiftKind::None => "none",
            ShiftKind::GaussianNoise => "gaussian_noise",
            ShiftKind::UniformNoise => "uniform_noise",
            ShiftKind::FeatureDropout => "feature_dropout",
            ShiftKind::Smoothing => "smoothing",
            ShiftKind::ConceptSplit => "concept_split",
        }
    }

    pub fn is_covariate(self) -> bool {
        Self::COVARIATE.contains(&self)
    }

    /// Per-kind unit multiplying [`SEVERITY_LADDER`].
    pub fn scale(self) -> f64 {
        match self {
            ShiftKind::GaussianNoise | ShiftKind::UniformNoise => 0.75,
            // severity 5 masks half the coordinates
            ShiftKind::FeatureDropout => 0.5 / 1.6,
            ShiftKind::Smoothing => 0.5,
            ShiftKind::None | ShiftKind::ConceptSplit => 0.0,
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for ShiftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShiftKind {
    type Err = GeodinError;

    fn from_str(s: &str) -> Result<Self> {
        [
            ShiftKind::None,
            ShiftKind::GaussianNoise,
            ShiftKind::UniformNoise,
            ShiftKind::FeatureDropout,
            ShiftKind::Smoothing,
            ShiftKind::ConceptSplit,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
        .ok_or_else(|| GeodinError::Config(format!("unknown shift kind `{s}`")))
    }
}

/// Shift kind plus severity (1..=5) for covariate kinds or group index for
/// concept splits. The control kind uses severity 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub severity: usize,
}

impl ShiftSpec {
    pub fn new(kind: ShiftKind, severity: usize) -> Result<Self> {
        let ok = match kind {
            ShiftKind::None => severity == 0,
            ShiftKind::ConceptSplit => true,
            _ => (1..=SEVERITY_LADDER.len()).contains(&severity),
        };
        if !ok {
            return Err(GeodinError::Config(format!(
                "severity {severity} out of range for shift kind {kind}"
            )));
        }
        Ok(ShiftSpec { kind, severity })
    }

    pub fn control() -> Self {
        ShiftSpec {
            kind: ShiftKind::None,
            severity: 0,
        }
    }

    /// Corruption magnitude `σ_s`.
    pub fn magnitude(&self) -> f64 {
        if self.kind.is_covariate() {
            SEVERITY_LADDER[self.severity - 1] * self.kind.scale()
        } else {
            0.0
        }
    }
}

impl fmt::Display for ShiftSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.severity)
    }
}

impl FromStr for ShiftSpec {
    type Err = GeodinError;

    /// `kind:severity`, or `none` for the control.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "none" => Ok(ShiftSpec::control()),
            None => Err(GeodinError::Config(format!(
                "shift `{s}` should look like kind:severity"
            ))),
            Some((kind, sev)) => {
                let severity = sev
                    .parse()
                    .map_err(|_| GeodinError::Config(format!("invalid severity in shift `{s}`")))?;
                ShiftSpec::new(kind.parse()?, severity)
            }
        }
    }
}

/// Applies a covariate corruption. Labels are unchanged; the result depends
/// only on `(data.seed, spec)`.
pub fn corrupt(data: &Dataset, spec: &ShiftSpec) -> Result<Dataset> {
    let spec = ShiftSpec::new(spec.kind, spec.severity)?;
    if !spec.kind.is_covariate() {
        return Err(GeodinError::WrongOperation(format!(
            "{} is not a covariate corruption",
            spec.kind
        )));
    }
    let seed = mix_seed(mix_seed(data.seed, spec.kind.tag()), spec.severity as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = spec.magnitude();
    let inputs = data
        .inputs
        .iter()
        .map(|x| match spec.kind {
            ShiftKind::GaussianNoise => x
                .iter()
                .map(|v| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    v + sigma * e
                })
                .collect(),
            ShiftKind::UniformNoise => {
                // same variance as the Gaussian at equal σ
                let a = sigma * 3f64.sqrt();
                x.iter().map(|v| v + rng.random_range(-a..=a)).collect()
            }
            ShiftKind::FeatureDropout => x
                .iter()
                .map(|&v| if rng.random_bool(sigma) { 0.0 } else { v })
                .collect(),
            ShiftKind::Smoothing => {
                let n = x.len();
                (0..n)
                    .map(|i| {
                        let blur = (x[(i + n - 1) % n] + x[i] + x[(i + 1) % n]) / 3.0;
                        x[i] + sigma * (blur - x[i])
                    })
                    .collect()
            }
            ShiftKind::None | ShiftKind::ConceptSplit => unreachable!("checked above"),
        })
        .collect();
    Ok(Dataset {
        inputs,
        labels: data.labels.clone(),
        seed,
    })
}

fn check_sides(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return Err(GeodinError::Domain(format!(
            "detection metrics need both sides nonempty (n_id={}, n_ood={})",
            id.len(),
            ood.len()
        )));
    }
    if id.iter().chain(ood).any(|s| s.is_nan()) {
        return Err(GeodinError::Domain("scores contain NaN".into()));
    }
    Ok(())
}

/// Area under the ROC curve with ID as the positive class, by a threshold
/// sweep over the distinct scores and trapezoidal integration. Tied scores
/// contribute one diagonal segment, so the result equals the Mann–Whitney
/// statistic `P(id > ood) + ½ P(id = ood)`.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_sides(id_scores, ood_scores)?;
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_pos = id_scores.len() as f64;
    let n_neg = ood_scores.len() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < all.len() {
        let threshold = all[i].0;
        let (tp0, fp0) = (tp, fp);
        while i < all.len() && all[i].0 == threshold {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        // trapezoid between consecutive ROC points
        area += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
    }
    Ok(area / (n_pos * n_neg))
}

/// Fraction of OOD scores strictly below the largest threshold that keeps at
/// least 95% of ID scores at or above it.
pub fn tnr_at_tpr95(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_sides(id_scores, ood_scores)?;
    let threshold = tpr95_threshold(id_scores);
    let rejected = ood_scores.iter().filter(|&&s| s < threshold).count();
    Ok(rejected as f64 / ood_scores.len() as f64)
}

/// The `(⌊n/20⌋ + 1)`-th smallest ID score: at most 5% of ID lies below it.
pub fn tpr95_threshold(id_scores: &[f64]) -> f64 {
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted[sorted.len() / 20]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitClass {
    pub name: String,
    /// Embedding token the name resolved to.
    pub token: String,
    /// Largest inner product with any ID class.
    pub similarity: f64,
    pub nearest_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassGroup {
    pub index: usize,
    pub classes: Vec<SplitClass>,
    pub mean_similarity: f64,
    /// Population standard deviation within the group.
    pub std_similarity: f64,
}

/// Lowercased lookup; multiword names (space, `_` or `-` separated) fall back
/// to their first part present in the vocabulary.
pub fn resolve_token(name: &str, embeddings: &Embeddings) -> Option<String> {
    let lower = name.trim().to_lowercase();
    if embeddings.get(&lower).is_some() {
        return Some(lower);
    }
    lower
        .split(|c: char| c.is_whitespace() || c == '_' || c == '-')
        .filter(|p| !p.is_empty())
        .find(|p| embeddings.get(p).is_some())
        .map(str::to_string)
}

/// Groups OOD class names by their maximal embedding inner product with the
/// ID classes. Group `n_groups − 1` holds the most similar classes; every
/// group has `⌊n_ood / n_groups⌋` classes except group 0, which also takes
/// the remainder. Ties are broken by ascending class name.
pub fn concept_split(
    id_names: &[String],
    ood_names: &[String],
    embeddings: &Embeddings,
    n_groups: usize,
) -> Result<Vec<ClassGroup>> {
    if n_groups == 0 || ood_names.len() < n_groups {
        return Err(GeodinError::Config(format!(
            "cannot form {n_groups} groups from {} OOD classes",
            ood_names.len()
        )));
    }
    if id_names.is_empty() {
        return Err(GeodinError::Config("no ID class names given".into()));
    }
    let mut missing = Vec::new();
    let mut resolve_all = |names: &[String]| -> Vec<(String, String)> {
        names
            .iter()
            .filter_map(|n| match resolve_token(n, embeddings) {
                Some(t) => Some((n.clone(), t)),
                None => {
                    missing.push(n.clone());
                    None
                }
            })
            .collect()
    };
    let id = resolve_all(id_names);
    let ood = resolve_all(ood_names);
    if !missing.is_empty() {
        return Err(GeodinError::MissingTokens(missing));
    }
    let mut seen = HashSet::new();
    if let Some((dup, _)) = ood.iter().find(|(n, _)| !seen.insert(n.clone())) {
        return Err(GeodinError::Config(format!("duplicate OOD class `{dup}`")));
    }

    let mut scored: Vec<SplitClass> = ood
        .into_iter()
        .map(|(name, token)| {
            let v = embeddings.get(&token).expect("resolved");
            let (nearest, sim) = id
                .iter()
                .map(|(n, t)| (n, dot(v, embeddings.get(t).expect("resolved"))))
                .fold(
                    (&id[0].0, f64::NEG_INFINITY),
                    |best, cur| if cur.1 > best.1 { cur } else { best },
                );
            SplitClass {
                name,
                token,
                similarity: sim,
                nearest_id: nearest.clone(),
            }
        })
        .collect();
    scored.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then_with(|| a.name.cmp(&b.name)));

    let size = scored.len() / n_groups;
    let mut groups = Vec::with_capacity(n_groups);
    let mut rest = scored.into_iter();
    for k in 0..n_groups {
        let index = n_groups - 1 - k;
        let classes: Vec<SplitClass> = if index == 0 {
            rest.by_ref().collect()
        } else {
            rest.by_ref().take(size).collect()
        };
        let sims: Vec<f64> = classes.iter().map(|c| c.similarity).collect();
        let stats = crate::calibration::MeanStd::of(&sims);
        groups.push(ClassGroup {
            index,
            classes,
            mean_similarity: stats.mean,
            std_similarity: stats.std,
        });
    }
    groups.reverse();
    Ok(groups)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreName {
    G,
    H,
    U,
    Msp,
    Energy,
}

impl ScoreName {
    pub const ALL: [ScoreName; 5] = [
        ScoreName::G,
        ScoreName::H,
        ScoreName::U,
        ScoreName::Msp,
        ScoreName::Energy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreName::G => "g",
            ScoreName::H => "h",
            ScoreName::U => "u",
            ScoreName::Msp => "msp",
            ScoreName::Energy => "energy",
        }
    }

    pub fn pick(self, s: &ScoreSet) -> f64 {
        match self {
            ScoreName::G => s.g,
            ScoreName::H => s.h,
            ScoreName::U => s.u,
            ScoreName::Msp => s.msp,
            ScoreName::Energy => s.energy,
        }
    }
}

impl fmt::Display for ScoreName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreName {
    type Err = GeodinError;

    fn from_str(s: &str) -> Result<Self> {
        ScoreName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| GeodinError::Config(format!("unknown score `{s}` (expected g, h, u, msp or energy)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub score: ScoreName,
    pub shift_kind: ShiftKind,
    pub severity: usize,
    pub auroc: f64,
    pub tnr_at_tpr95: f64,
    pub n_id: usize,
    pub n_ood: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionReport {
    pub rows: Vec<DetectionRow>,
    /// Effective configuration the report was produced with.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl DetectionReport {
    pub fn row(&self, score: ScoreName, spec: ShiftSpec) -> Option<&DetectionRow> {
        self.rows
            .iter()
            .find(|r| r.score == score && r.shift_kind == spec.kind && r.severity == spec.severity)
    }
}

pub fn score_dataset(model: &Model, data: &Dataset) -> Result<Vec<ScoreSet>> {
    data.inputs
        .iter()
        .map(|x| {
            let pass = model.forward(x)?;
            let f = crate::scores::FeatureVector::from_rectified(pass.head.feature.clone());
            let view = geometry_view(&f, &model.head.w)?;
            Ok(ScoreSet::compute(&f, &view, &pass.head.logits))
        })
        .collect()
}

/// The OOD side of a detection cell.
pub fn shifted_set(task: &SyntheticTask, spec: &ShiftSpec) -> Result<Dataset> {
    let (_, reference) = task.test_halves();
    match spec.kind {
        ShiftKind::None => Ok(reference),
        ShiftKind::ConceptSplit => task.concept.get(spec.severity).map(|g| g.data.clone()).ok_or_else(|| {
            GeodinError::Config(format!(
                "concept group {} does not exist (task has {})",
                spec.severity,
                task.concept.len()
            ))
        }),
        _ => corrupt(&reference, spec),
    }
}

/// Every `(score, spec)` cell: ID is the first half of the clean test split.
/// Cells are distributed over `jobs` threads; row order follows
/// `specs × scores` regardless.
pub fn sweep(
    model: &Model,
    task: &SyntheticTask,
    scores: &[ScoreName],
    specs: &[ShiftSpec],
    jobs: usize,
) -> Result<DetectionReport> {
    if !model.meta.trained {
        return Err(GeodinError::State("model has not been trained".into()));
    }
    if model.input_dim() != task.config.input_dim {
        return Err(GeodinError::Shape(format!(
            "model expects inputs of dimension {} but the task has {}",
            model.input_dim(),
            task.config.input_dim
        )));
    }
    let (id_half, _) = task.test_halves();
    let id_scores = score_dataset(model, &id_half)?;

    let cell = |spec: &ShiftSpec| -> Result<Vec<DetectionRow>> {
        let ood = shifted_set(task, spec)?;
        let ood_scores = score_dataset(model, &ood)?;
        scores
            .iter()
            .map(|&name| {
                let id: Vec<f64> = id_scores.iter().map(|s| name.pick(s)).collect();
                let od: Vec<f64> = ood_scores.iter().map(|s| name.pick(s)).collect();
                Ok(DetectionRow {
                    score: name,
                    shift_kind: spec.kind,
                    severity: spec.severity,
                    auroc: auroc(&id, &od)?,
                    tnr_at_tpr95: tnr_at_tpr95(&id, &od)?,
                    n_id: id.len(),
                    n_ood: od.len(),
                    seed: task.config.seed,
                })
            })
            .collect()
    };

    let jobs = jobs.max(1).min(specs.len().max(1));
    let mut cells: Vec<Result<Vec<DetectionRow>>> = Vec::with_capacity(specs.len());
    if jobs == 1 {
        cells.extend(specs.iter().map(cell));
    } else {
        let chunk = specs.len().div_ceil(jobs);
        std::thread::scope(|scope| {
            let handles: Vec<_> = specs
                .chunks(chunk)
                .map(|part| scope.spawn(|| part.iter().map(cell).collect::<Vec<_>>()))
                .collect();
            for h in handles {
                cells.extend(h.join().expect("sweep worker panicked"));
            }
        });
    }
    let mut rows = Vec::with_capacity(specs.len() * scores.len());
    for c in cells {
        rows.extend(c?);
    }
    Ok(DetectionReport { rows, config: None })
}

/// The control row, every covariate kind at severities 1..=5, and every
/// concept group.
pub fn default_specs(task: &SyntheticTask) -> Vec<ShiftSpec> {
    let mut specs = vec![ShiftSpec::control()];
    for kind in ShiftKind::COVARIATE {
        for s in 1..=SEVERITY_LADDER.len() {
            specs.push(ShiftSpec { kind, severity: s });
        }
    }
    for g in 0..task.concept.len() {
        specs.push(ShiftSpec {
            kind: ShiftKind::ConceptSplit,
            severity: g,
        });
    }
    specs
}
