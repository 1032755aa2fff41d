//! Datasets: delimited-text ingestion, implicit conversion, hashed categorical
//! features, per-user splits and seeded synthetic data.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use twox_hash::XxHash64;

use crate::error::{Error, Result};
use crate::model::{FeatureVector, InteractionRow};
use crate::numerics::{dot, DenseMatrix};
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triple {
    pub user: String,
    pub item: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DelimitedFormat {
    pub delimiter: char,
    pub has_header: bool,
    /// Loading fails when more than this fraction of non-blank lines is malformed.
    pub max_malformed_fraction: f64,
}

impl Default for DelimitedFormat {
    fn default() -> Self {
        DelimitedFormat {
            delimiter: '\t',
            has_header: false,
            max_malformed_fraction: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedTriples {
    pub triples: Vec<Triple>,
    pub malformed: usize,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Non-blank, non-comment lines with their 1-based line numbers.
fn data_lines<'a>(text: &'a str, has_header: bool) -> impl Iterator<Item = (usize, &'a str)> + 'a {
    text.lines()
        .enumerate()
        .skip(usize::from(has_header))
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

fn check_malformed(path: &Path, malformed: usize, total: usize, limit: f64) -> Result<()> {
    if malformed > 0 {
        log::warn!("{}: skipped {malformed} malformed of {total} lines", path.display());
    }
    if total > 0 && malformed as f64 > limit * total as f64 {
        return Err(Error::TooManyMalformed {
            path: path.to_path_buf(),
            malformed,
            total,
            limit,
        });
    }
    Ok(())
}

/// Reads `user, item, value` lines; extra columns (timestamps) are ignored.
pub fn load_interactions(path: &Path, format: &DelimitedFormat) -> Result<LoadedTriples> {
    let text = read(path)?;
    let mut triples = Vec::new();
    let mut malformed = 0;
    let mut total = 0;
    for (_, line) in data_lines(&text, format.has_header) {
        total += 1;
        let mut cols = line.split(format.delimiter).map(str::trim);
        let parsed = match (cols.next(), cols.next(), cols.next()) {
            (Some(u), Some(i), Some(v)) if !u.is_empty() && !i.is_empty() => v
                .trim_matches('"')
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(|value| Triple {
                    user: u.trim_matches('"').to_string(),
                    item: i.trim_matches('"').to_string(),
                    value,
                }),
            _ => None,
        };
        match parsed {
            Some(t) => triples.push(t),
            None => malformed += 1,
        }
    }
    if total == 0 {
        log::warn!("{}: no interactions", path.display());
    }
    check_malformed(path, malformed, total, format.max_malformed_fraction)?;
    Ok(LoadedTriples { triples, malformed })
}

/// Drops zero values and maps every positive value to 1.
pub fn to_implicit(triples: Vec<Triple>) -> Result<Vec<Triple>> {
    if let Some(t) = triples.iter().find(|t| t.value < 0.0) {
        return Err(Error::invalid(format!(
            "negative interaction value {} for ({}, {})",
            t.value, t.user, t.item
        )));
    }
    Ok(triples
        .into_iter()
        .filter(|t| t.value > 0.0)
        .map(|t| Triple { value: 1.0, ..t })
        .collect())
}

pub fn hash_index(name: &str, value: &str, hash_size: usize, hash_seed: u64) -> usize {
    let key = format!("{name}__{value}");
    (XxHash64::oneshot(hash_seed, key.as_bytes()) % hash_size as u64) as usize
}

/// One count per `(name, value)` pair at the hashed index; collisions add up.
pub fn hash_features<S: AsRef<str>>(features: &[(S, S)], hash_size: usize, hash_seed: u64) -> Result<FeatureVector> {
    if hash_size == 0 {
        return Err(Error::invalid("hash_size must be at least 1"));
    }
    let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
    for (name, value) in features {
        *counts
            .entry(hash_index(name.as_ref(), value.as_ref(), hash_size, hash_seed))
            .or_default() += 1.0;
    }
    FeatureVector::new(hash_size, counts.into_iter().collect())
}

/// Rewrites raw categorical `(name, value)` pairs before hashing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Transform {
    /// Numeric value → label of the bucket it falls in. `edges` are the upper
    /// bounds of all but the last bucket; `labels` has one more entry.
    Bucket {
        feature: String,
        edges: Vec<f64>,
        labels: Vec<String>,
    },
    /// Keep the first `prefix_len` characters, then look them up in `map`.
    PrefixMap {
        feature: String,
        prefix_len: usize,
        #[serde(default)]
        map: BTreeMap<String, String>,
        #[serde(default)]
        default: Option<String>,
    },
    /// Split free text into lowercase words, one pair per word.
    Keywords {
        feature: String,
        #[serde(default = "default_min_len")]
        min_len: usize,
        #[serde(default)]
        stopwords: Vec<String>,
    },
    Drop {
        feature: String,
    },
}

fn default_min_len() -> usize {
    3
}

impl Transform {
    fn feature(&self) -> &str {
        match self {
            Transform::Bucket { feature, .. }
            | Transform::PrefixMap { feature, .. }
            | Transform::Keywords { feature, .. }
            | Transform::Drop { feature } => feature,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Transform::Bucket { edges, labels, feature } = self {
            if labels.len() != edges.len() + 1 {
                return Err(Error::invalid(format!(
                    "bucket transform on {feature}: {} edges need {} labels",
                    edges.len(),
                    edges.len() + 1
                )));
            }
            if edges.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::invalid(format!("bucket transform on {feature}: edges must increase")));
            }
        }
        Ok(())
    }

    fn apply_one(&self, value: &str, out: &mut Vec<String>) {
        match self {
            Transform::Bucket { edges, labels, .. } => {
                if let Ok(x) = value.trim().parse::<f64>() {
                    let b = edges.iter().position(|&e| x < e).unwrap_or(edges.len());
                    out.push(labels[b].clone());
                }
            }
            Transform::PrefixMap {
                prefix_len, map, default, ..
            } => {
                let prefix: String = value.trim().chars().take(*prefix_len).collect();
                match map.get(&prefix).or(default.as_ref()) {
                    Some(mapped) => out.push(mapped.clone()),
                    None if map.is_empty() => out.push(prefix),
                    None => {}
                }
            }
            Transform::Keywords { min_len, stopwords, .. } => {
                for word in value.split(|c: char| !c.is_alphanumeric()) {
                    let w = word.to_lowercase();
                    if w.chars().count() >= *min_len && !stopwords.contains(&w) {
                        out.push(w);
                    }
                }
            }
            Transform::Drop { .. } => {}
        }
    }
}

pub fn apply_transforms(pairs: Vec<(String, String)>, transforms: &[Transform]) -> Vec<(String, String)> {
    let mut pairs = pairs;
    for t in transforms {
        let mut next = Vec::with_capacity(pairs.len());
        for (name, value) in pairs {
            if name == t.feature() {
                let mut values = Vec::new();
                t.apply_one(&value, &mut values);
                next.extend(values.into_iter().map(|v| (name.clone(), v)));
            } else {
                next.push((name, value));
            }
        }
        pairs = next;
    }
    pairs
}

/// How an entity feature file is laid out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "kebab-case")]
pub enum FeatureFormat {
    /// `id, name=value, name=value, ...`, hashed into `hash_size` buckets.
    Categorical {
        hash_size: usize,
        #[serde(default)]
        hash_seed: u64,
        #[serde(default)]
        transforms: Vec<Transform>,
    },
    /// `id, f_1, ..., f_dim` as real numbers.
    Dense { dim: usize },
}

impl FeatureFormat {
    pub fn dim(&self) -> usize {
        match self {
            FeatureFormat::Categorical { hash_size, .. } => *hash_size,
            FeatureFormat::Dense { dim } => *dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSource {
    pub path: PathBuf,
    #[serde(flatten)]
    pub format: FeatureFormat,
}

/// Loads a feature file into a map from entity id to feature vector.
pub fn load_features(
    path: &Path,
    format: &FeatureFormat,
    text_format: &DelimitedFormat,
) -> Result<BTreeMap<String, FeatureVector>> {
    if let FeatureFormat::Categorical { transforms, .. } = format {
        transforms.iter().try_for_each(Transform::validate)?;
    }
    let text = read(path)?;
    let mut out = BTreeMap::new();
    let mut malformed = 0;
    let mut total = 0;
    for (_, line) in data_lines(&text, text_format.has_header) {
        total += 1;
        let mut cols = line.split(text_format.delimiter).map(str::trim);
        let Some(id) = cols.next().filter(|s| !s.is_empty()) else {
            malformed += 1;
            continue;
        };
        let parsed = match format {
            FeatureFormat::Categorical {
                hash_size,
                hash_seed,
                transforms,
            } => {
                let pairs: Option<Vec<(String, String)>> = cols
                    .filter(|c| !c.is_empty())
                    .map(|c| c.split_once('=').map(|(n, v)| (n.trim().to_string(), v.trim().to_string())))
                    .collect();
                pairs.map(|p| hash_features(&apply_transforms(p, transforms), *hash_size, *hash_seed))
            }
            FeatureFormat::Dense { dim } => {
                let values: Option<Vec<f64>> = cols.map(|c| c.parse::<f64>().ok().filter(|v| v.is_finite())).collect();
                values
                    .filter(|v| v.len() == *dim)
                    .map(|v| Ok(FeatureVector::from_dense(&v)))
            }
        };
        match parsed {
            Some(fv) => {
                out.insert(id.to_string(), fv?);
            }
            None => malformed += 1,
        }
    }
    check_malformed(path, malformed, total, text_format.max_malformed_fraction)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    /// One row per user, indexed like `user_ids`.
    pub interactions: Vec<InteractionRow>,
    pub user_features: Vec<FeatureVector>,
    pub item_features: Vec<FeatureVector>,
    pub d_u: usize,
    pub d_v: usize,
    pub provenance: String,
}

impl Dataset {
    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn n_interactions(&self) -> usize {
        self.interactions.iter().map(InteractionRow::len).sum()
    }

    pub fn density(&self) -> f64 {
        let cells = self.n_users() * self.n_items();
        if cells == 0 {
            0.0
        } else {
            self.n_interactions() as f64 / cells as f64
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n_u = self.n_users();
        let n_v = self.n_items();
        let mut problems = Vec::new();
        if self.interactions.len() != n_u || self.user_features.len() != n_u {
            problems.push(format!(
                "{n_u} users but {} interaction rows and {} feature rows",
                self.interactions.len(),
                self.user_features.len()
            ));
        }
        if self.item_features.len() != n_v {
            problems.push(format!("{n_v} items but {} feature rows", self.item_features.len()));
        }
        if self.interactions.iter().any(|r| r.n_items() != n_v) {
            problems.push("an interaction row has the wrong catalog size".into());
        }
        if self.user_features.iter().any(|x| x.dim() != self.d_u) {
            problems.push(format!("a user feature vector is not of dimension {}", self.d_u));
        }
        if self.item_features.iter().any(|y| y.dim() != self.d_v) {
            problems.push(format!("an item feature vector is not of dimension {}", self.d_v));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// The given users and items, in the given order. Item indices are
    /// renumbered by position in `items`; interactions with other items vanish.
    pub fn subset(&self, users: &[usize], items: &[usize]) -> Result<Dataset> {
        let mut new_index = vec![usize::MAX; self.n_items()];
        for (pos, &j) in items.iter().enumerate() {
            new_index[j] = pos;
        }
        let interactions = users
            .iter()
            .map(|&i| {
                let row = &self.interactions[i];
                let kept = row
                    .items()
                    .iter()
                    .filter(|(j, _)| new_index[*j] != usize::MAX)
                    .map(|&(j, v)| (new_index[j], v))
                    .collect();
                InteractionRow::new(row.user_id.clone(), kept, items.len())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            user_ids: users.iter().map(|&i| self.user_ids[i].clone()).collect(),
            item_ids: items.iter().map(|&j| self.item_ids[j].clone()).collect(),
            interactions,
            user_features: users.iter().map(|&i| self.user_features[i].clone()).collect(),
            item_features: items.iter().map(|&j| self.item_features[j].clone()).collect(),
            d_u: self.d_u,
            d_v: self.d_v,
            provenance: self.provenance.clone(),
        })
    }

    /// Builds a dataset from raw triples, keeping only interactions whose user
    /// and item both have features. Ids are indexed in sorted order; repeated
    /// pairs keep their largest value.
    pub fn from_triples(
        triples: &[Triple],
        user_features: &BTreeMap<String, FeatureVector>,
        item_features: &BTreeMap<String, FeatureVector>,
        d_u: usize,
        d_v: usize,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let mut pairs: BTreeMap<(&str, &str), f64> = BTreeMap::new();
        let mut dropped = 0usize;
        for t in triples {
            if user_features.contains_key(&t.user) && item_features.contains_key(&t.item) {
                let v = pairs.entry((&t.user, &t.item)).or_insert(t.value);
                *v = v.max(t.value);
            } else {
                dropped += 1;
            }
        }
        if dropped > 0 {
            log::info!("dropped {dropped} interactions lacking user or item features");
        }
        let users: Vec<&str> = pairs.keys().map(|(u, _)| *u).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        let items: Vec<&str> = pairs.keys().map(|(_, i)| *i).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        let item_index: HashMap<&str, usize> = items.iter().enumerate().map(|(j, i)| (*i, j)).collect();
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); users.len()];
        let mut u = 0;
        for (&(user, item), &value) in &pairs {
            while users[u] != user {
                u += 1;
            }
            rows[u].push((item_index[item], value));
        }
        let n_v = items.len();
        let interactions = users
            .iter()
            .zip(rows)
            .map(|(id, r)| InteractionRow::new(*id, r, n_v))
            .collect::<Result<Vec<_>>>()?;
        let ds = Dataset {
            user_features: users.iter().map(|u| user_features[*u].clone()).collect(),
            item_features: items.iter().map(|i| item_features[*i].clone()).collect(),
            user_ids: users.into_iter().map(String::from).collect(),
            item_ids: items.into_iter().map(String::from).collect(),
            interactions,
            d_u,
            d_v,
            provenance: provenance.into(),
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Describes a dataset on disk. Relative paths resolve against the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub interactions: PathBuf,
    #[serde(default)]
    pub format: DelimitedFormat,
    #[serde(default = "default_true")]
    pub implicit: bool,
    pub user_features: FeatureSource,
    pub item_features: FeatureSource,
}

fn default_true() -> bool {
    true
}

impl DatasetConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg: DatasetConfig = serde_json::from_str(&read(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.interactions,
            &mut cfg.user_features.path,
            &mut cfg.item_features.path,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Every input file this config reads, in a fixed order.
    pub fn input_paths(&self) -> [&Path; 3] {
        [&self.interactions, &self.user_features.path, &self.item_features.path]
    }

    pub fn problems(&self) -> Vec<String> {
        self.input_paths()
            .iter()
            .filter(|p| !p.exists())
            .map(|p| format!("input file {} does not exist", p.display()))
            .collect()
    }

    pub fn load(&self) -> Result<Dataset> {
        let loaded = load_interactions(&self.interactions, &self.format)?;
        let triples = if self.implicit {
            to_implicit(loaded.triples)?
        } else {
            loaded.triples
        };
        let users = load_features(&self.user_features.path, &self.user_features.format, &self.format)?;
        let items = load_features(&self.item_features.path, &self.item_features.format, &self.format)?;
        Dataset::from_triples(
            &triples,
            &users,
            &items,
            self.user_features.format.dim(),
            self.item_features.format.dim(),
            format!("loaded from {}", self.interactions.display()),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    /// Held-out item indices per user, indexed like `train.user_ids`.
    pub test: Vec<Vec<usize>>,
}

impl SplitDataset {
    pub fn test_sets(&self) -> Vec<HashSet<usize>> {
        self.test.iter().map(|t| t.iter().copied().collect()).collect()
    }
}

/// Per user, shuffles the interacted items and keeps the first
/// `⌈train_fraction · n⌉` for training. A single interaction always trains.
pub fn split_per_user(d: &Dataset, train_fraction: f64, seed: u64) -> Result<SplitDataset> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction must lie in (0, 1) (got {train_fraction})"
        )));
    }
    let mut rng = seeds::rng(seed, seeds::SPLIT);
    let mut train_rows = Vec::with_capacity(d.n_users());
    let mut test = Vec::with_capacity(d.n_users());
    for row in &d.interactions {
        let mut items = row.items().to_vec();
        items.shuffle(&mut rng);
        let n = items.len();
        // the guard keeps 0.8 · 10 from rounding up to 9
        let n_train = ((train_fraction * n as f64) - 1e-9).ceil().max(1.0) as usize;
        let n_train = n_train.min(n);
        let held: Vec<usize> = {
            let mut h: Vec<usize> = items[n_train..].iter().map(|(j, _)| *j).collect();
            h.sort_unstable();
            h
        };
        items.truncate(n_train);
        train_rows.push(InteractionRow::new(row.user_id.clone(), items, row.n_items())?);
        test.push(held);
    }
    Ok(SplitDataset {
        train: Dataset {
            interactions: train_rows,
            ..d.clone()
        },
        test,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub d_u: usize,
    pub d_v: usize,
    pub k_true: usize,
    /// Standard deviation of the Gaussian noise added to X and Y.
    pub noise: f64,
    /// Target fraction of observed interactions.
    pub density: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_users: 500,
            n_items: 200,
            d_u: 20,
            d_v: 20,
            k_true: 4,
            noise: 0.1,
            density: 0.05,
            seed: 0,
        }
    }
}

/// A generated dataset together with the factors that produced it.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub dataset: Dataset,
    pub p: DenseMatrix,
    pub q: DenseMatrix,
    pub u: DenseMatrix,
    pub v: DenseMatrix,
}

/// X = P Uᵀ + noise, Y = Q Vᵀ + noise, and R marks the globally largest
/// entries of P Qᵀ up to the target density.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    gen_synthetic_with_truth(spec).map(|s| s.dataset)
}

pub fn gen_synthetic_with_truth(spec: &SyntheticSpec) -> Result<Synthetic> {
    let mut problems = Vec::new();
    for (name, v) in [
        ("n_users", spec.n_users),
        ("n_items", spec.n_items),
        ("d_u", spec.d_u),
        ("d_v", spec.d_v),
        ("k_true", spec.k_true),
    ] {
        if v == 0 {
            problems.push(format!("{name} must be at least 1"));
        }
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        problems.push(format!("noise must be >= 0 (got {})", spec.noise));
    }
    if !(spec.density > 0.0 && spec.density <= 1.0) {
        problems.push(format!("density must lie in (0, 1] (got {})", spec.density));
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let mut rng = seeds::rng(spec.seed, seeds::SYNTHETIC);
    let k = spec.k_true;
    let scale = 1.0 / (k as f64).sqrt();
    let mut gauss = |r: usize, c: usize, s: f64| DenseMatrix::from_fn(r, c, |_, _| s * rng.sample::<f64, _>(StandardNormal));
    let p = gauss(spec.n_users, k, 1.0);
    let q = gauss(spec.n_items, k, 1.0);
    let u = gauss(spec.d_u, k, scale);
    let v = gauss(spec.d_v, k, scale);
    let mut noisy = |m: DenseMatrix| {
        let mut m = m;
        if spec.noise > 0.0 {
            for x in m.data_mut() {
                *x += spec.noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
        m
    };
    let x = noisy(p.matmul(&u.transpose())?);
    let y = noisy(q.matmul(&v.transpose())?);

    let n_cells = spec.n_users * spec.n_items;
    let n_obs = ((spec.density * n_cells as f64).round() as usize).clamp(1, n_cells);
    let mut affinity: Vec<(f64, usize)> = (0..n_cells)
        .map(|c| (dot(p.row(c / spec.n_items), q.row(c % spec.n_items)), c))
        .collect();
    affinity.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); spec.n_users];
    for &(_, c) in &affinity[..n_obs] {
        rows[c / spec.n_items].push((c % spec.n_items, 1.0));
    }

    // zero-padded so that sorted order is generation order
    let uw = spec.n_users.saturating_sub(1).to_string().len();
    let iw = spec.n_items.saturating_sub(1).to_string().len();
    let user_ids: Vec<String> = (0..spec.n_users).map(|i| format!("u{i:0uw$}")).collect();
    let item_ids: Vec<String> = (0..spec.n_items).map(|j| format!("i{j:0iw$}")).collect();
    let interactions = user_ids
        .iter()
        .zip(rows)
        .map(|(id, r)| InteractionRow::new(id.clone(), r, spec.n_items))
        .collect::<Result<Vec<_>>>()?;
    let dataset = Dataset {
        user_features: x.row_iter().map(FeatureVector::from_dense).collect(),
        item_features: y.row_iter().map(FeatureVector::from_dense).collect(),
        user_ids,
        item_ids,
        interactions,
        d_u: spec.d_u,
        d_v: spec.d_v,
        provenance: format!("synthetic {spec:?}"),
    };
    Ok(Synthetic { dataset, p, q, u, v })
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

fn dense_lines(ids: &[String], features: &[FeatureVector]) -> String {
    let mut out = String::new();
    for (id, f) in ids.iter().zip(features) {
        out.push_str(id);
        for x in f.to_dense() {
            out.push('\t');
            out.push_str(&format!("{x:?}"));
        }
        out.push('\n');
    }
    out
}

/// Writes `interactions.tsv`, dense `user_features.tsv` and
/// `item_features.tsv`, and a `dataset.json` that loads them back.
/// Users without interactions do not survive a reload.
pub fn write_dataset(d: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut inter = String::new();
    for row in &d.interactions {
        for &(j, v) in row.items() {
            inter.push_str(&format!("{}\t{}\t{v:?}\n", row.user_id, d.item_ids[j]));
        }
    }
    write_file(&dir.join("interactions.tsv"), &inter)?;
    write_file(&dir.join("user_features.tsv"), &dense_lines(&d.user_ids, &d.user_features))?;
    write_file(&dir.join("item_features.tsv"), &dense_lines(&d.item_ids, &d.item_features))?;
    let cfg = DatasetConfig {
        interactions: "interactions.tsv".into(),
        format: DelimitedFormat::default(),
        implicit: true,
        user_features: FeatureSource {
            path: "user_features.tsv".into(),
            format: FeatureFormat::Dense { dim: d.d_u },
        },
        item_features: FeatureSource {
            path: "item_features.tsv".into(),
            format: FeatureFormat::Dense { dim: d.d_v },
        },
    };
    let path = dir.join("dataset.json");
    write_file(&path, &serde_json::to_string_pretty(&cfg)?)?;
    Ok(path)
}
