//! Full-stage training samples and the synthetic cascade-log generator.
//!
//! Each impression carries one user and N candidate items drawn from every
//! stage of the funnel: items the first stage never surfaced, items each
//! intermediate stage dropped, items that reached the end without converting,
//! and the ground-truth set. Graded labels respect stage order first and
//! within-stage rank second:
//!
//! ```text
//! grade_i > grade_j  <=>  stage_i > stage_j  or
//!                         (stage_i = stage_j and rank_i > rank_j)
//! ```
//!
//! The generator plays the role of a production log at desk scale: latent
//! user/item vectors define a true utility, a reference cascade with
//! per-stage Gaussian noise filters a candidate pool, items are tagged with
//! the stage that dropped them, and a fixed number of items per tag is
//! sampled into the impression. The reference cascade is independent of any
//! trained model.

use crate::error::{Error, Result};
use crate::numerics::Vector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Funnel position of one sampled item. Level 0 is the earliest drop
/// (never retrieved); the maximum level is the ground-truth set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StageTag(pub u8);

impl StageTag {
    pub fn level(self) -> usize {
        self.0 as usize
    }
}

/// Canonical tag names for a T-stage funnel (T+2 tags, last = ground truth).
pub fn default_stage_names(stages: usize) -> Vec<String> {
    match stages {
        2 => ["retrieval_neg", "prerank_neg", "rank_neg", "gt_pos"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        3 => ["prerank_neg", "coarse_neg", "rank_neg", "rerank_neg", "rerank_pos"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        t => {
            let mut names: Vec<String> = (0..=t).map(|i| format!("stage{i}_neg")).collect();
            names.push("gt_pos".to_string());
            names
        }
    }
}

/// One candidate item inside an impression.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpressionItem {
    pub id: u64,
    pub features: Vector,
    pub stage: StageTag,
    /// Within-stage rank; higher is better. Dense 1..=n within the sampled
    /// stage group.
    pub rank: u32,
    /// Graded label; higher is better.
    pub grade: i64,
    pub gt: bool,
}

/// One user's full-stage training list.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpressionSample {
    pub day: u32,
    pub user_features: Vector,
    pub items: Vec<ImpressionItem>,
}

impl ImpressionSample {
    pub fn gt_indices(&self) -> Vec<usize> {
        (0..self.items.len()).filter(|&i| self.items[i].gt).collect()
    }

    pub fn grades(&self) -> Vec<i64> {
        self.items.iter().map(|it| it.grade).collect()
    }

    pub fn gt_flags(&self) -> Vector {
        Vector::from_fn(self.items.len(), |i| if self.items[i].gt { 1.0 } else { 0.0 })
    }
}

/// A full dataset with its schema.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub feature_dim: usize,
    pub stage_names: Vec<String>,
    pub impressions: Vec<ImpressionSample>,
}

impl Dataset {
    pub fn num_days(&self) -> usize {
        self.impressions
            .iter()
            .map(|s| s.day as usize + 1)
            .max()
            .unwrap_or(0)
    }

    /// Impressions of one day, in file order.
    pub fn day(&self, day: usize) -> Vec<&ImpressionSample> {
        self.impressions
            .iter()
            .filter(|s| s.day as usize == day)
            .collect()
    }

    /// Impressions of days `0..end`, in file order.
    pub fn days_before(&self, end: usize) -> Vec<&ImpressionSample> {
        self.impressions
            .iter()
            .filter(|s| (s.day as usize) < end)
            .collect()
    }
}

/// Assigns dense graded labels 1..=N from (stage, within-stage rank) pairs.
///
/// The grade order is exactly the lexicographic (stage, rank) order, so the
/// output is independent of input permutation. Duplicate (stage, rank)
/// pairs are rejected.
pub fn assign_labels(items: &[(StageTag, u32)]) -> Result<Vec<i64>> {
    let n = items.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (items[i].0, items[i].1));
    for w in order.windows(2) {
        if items[w[0]] == items[w[1]] {
            return Err(Error::invalid(format!(
                "duplicate (stage, rank) pair {:?}",
                items[w[0]]
            )));
        }
    }
    let mut grades = vec![0i64; n];
    for (pos, &i) in order.iter().enumerate() {
        grades[i] = pos as i64 + 1;
    }
    Ok(grades)
}

/// Synthetic cascade-log configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_days: usize,
    pub impressions_per_day: usize,
    /// Distinct latent users; each impression draws one.
    pub n_users: usize,
    /// Candidate pool size per impression (the whole inventory at desk scale).
    pub n_items: usize,
    pub feature_dim: usize,
    /// Items sampled per stage tag, earliest drop first, ground truth last
    /// (length T+2 for a T-stage reference cascade).
    pub stage_counts: Vec<usize>,
    /// Gaussian noise added to the true utility at each reference stage
    /// (length T). Zero gives a noiseless funnel.
    pub noise_scales: Vec<f64>,
    /// Strength of the non-factorized user-item interaction term.
    pub interaction_strength: f64,
    /// When positive, impressions are redrawn until the true-utility gap
    /// between pool ranks K and K+1 is at least this; keeps the noiseless
    /// benchmark separable by an imperfect learner.
    pub min_margin: f64,
    /// Collapse every negative stage to a single grade (production logs
    /// often label whole stages, not ranks within them).
    pub collapse_grades: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_days: 4,
            impressions_per_day: 100,
            n_users: 256,
            n_items: 64,
            feature_dim: 16,
            stage_counts: vec![5, 5, 8, 2],
            noise_scales: vec![0.5, 0.3],
            interaction_strength: 0.5,
            min_margin: 0.0,
            collapse_grades: false,
            seed: 17,
        }
    }
}

impl SynthConfig {
    pub fn stages(&self) -> usize {
        self.noise_scales.len()
    }

    /// Items per impression.
    pub fn items_per_impression(&self) -> usize {
        self.stage_counts.iter().sum()
    }

    /// Ground-truth items per impression.
    pub fn gt_count(&self) -> usize {
        *self.stage_counts.last().unwrap_or(&0)
    }

    /// Reference-cascade quotas R_1 > R_2 > ... > R_T over the pool, sized
    /// so every tag group can supply its sample count.
    pub fn reference_quotas(&self) -> Vec<usize> {
        let t = self.stages();
        let k = self.gt_count();
        let mut quotas = vec![0usize; t];
        quotas[t - 1] = self.stage_counts[t] + k;
        for i in (0..t.saturating_sub(1)).rev() {
            quotas[i] = quotas[i + 1] + 2 * self.stage_counts[i + 1];
        }
        quotas
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.stages();
        if t == 0 {
            return Err(Error::invalid("need at least one reference stage"));
        }
        if self.stage_counts.len() != t + 2 {
            return Err(Error::invalid(format!(
                "stage_counts must have length T+2 = {} (got {})",
                t + 2,
                self.stage_counts.len()
            )));
        }
        let n = self.items_per_impression();
        if !(2..=64).contains(&n) {
            return Err(Error::invalid(format!(
                "items per impression must lie in [2, 64], got {n}"
            )));
        }
        if self.gt_count() == 0 {
            return Err(Error::invalid("ground-truth count must be >= 1"));
        }
        if self.feature_dim < 2 {
            return Err(Error::invalid("feature_dim must be >= 2"));
        }
        if self.n_days == 0 || self.impressions_per_day == 0 || self.n_users == 0 {
            return Err(Error::invalid("days, impressions/day and users must be >= 1"));
        }
        if self.noise_scales.iter().any(|&s| s < 0.0) {
            return Err(Error::invalid("noise scales must be >= 0"));
        }
        let quotas = self.reference_quotas();
        if quotas[0] + self.stage_counts[0] > self.n_items {
            return Err(Error::invalid(format!(
                "pool of {} items cannot feed reference quotas {quotas:?} \
                 plus {} earliest-stage samples",
                self.n_items, self.stage_counts[0]
            )));
        }
        Ok(())
    }
}

/// Fixed latent state behind a synthetic dataset.
pub struct SynthWorld {
    pub user_features: Vec<Vector>,
    pub item_features: Vec<Vector>,
    /// Per-dimension weights of the elementwise interaction term.
    pub interaction_weights: Vector,
    pub interaction_strength: f64,
}

impl SynthWorld {
    /// dot(u, v) + strength * tanh(1.5 * sqrt(d) * <u ⊙ v, w>).
    ///
    /// The saturating interaction term cannot be factored into separate
    /// user/item embeddings, so dot-product scorers can only approximate
    /// it while cross-feature scorers see it directly — the same capacity
    /// asymmetry a retrieval/ranking model pair has in production.
    pub fn true_utility(&self, user: &Vector, item: &Vector) -> f64 {
        let d = user.len();
        let mut dot = 0.0;
        let mut inter = 0.0;
        for k in 0..d {
            dot += user[k] * item[k];
            inter += user[k] * item[k] * self.interaction_weights[k];
        }
        // the gain puts the tanh argument at unit-ish variance
        let gain = 1.5 * (d as f64).sqrt();
        dot + self.interaction_strength * (gain * inter).tanh()
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Latent users, items and interaction weights for a config; deterministic
/// in the seed and shared by every impression of the dataset.
pub fn synth_world(cfg: &SynthConfig) -> SynthWorld {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed));
    let scale = 1.0 / (cfg.feature_dim as f64).sqrt();
    let draw =
        |rng: &mut ChaCha8Rng| Vector::from_fn(cfg.feature_dim, |_| standard_normal(rng) * scale);
    let user_features: Vec<Vector> = (0..cfg.n_users).map(|_| draw(&mut rng)).collect();
    let item_features: Vec<Vector> = (0..cfg.n_items).map(|_| draw(&mut rng)).collect();
    let interaction_weights = Vector::from_fn(cfg.feature_dim, |_| standard_normal(&mut rng));
    SynthWorld {
        user_features,
        item_features,
        interaction_weights,
        interaction_strength: cfg.interaction_strength,
    }
}

/// Generates the full synthetic dataset. Deterministic in the seed; every
/// impression derives its own rng from (seed, impression index).
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let world = synth_world(cfg);
    let t = cfg.stages();
    let ref_quotas = cfg.reference_quotas();
    let k = cfg.gt_count();
    let pool = cfg.n_items;

    let mut impressions = Vec::with_capacity(cfg.n_days * cfg.impressions_per_day);
    for day in 0..cfg.n_days {
        for slot in 0..cfg.impressions_per_day {
            let index = (day * cfg.impressions_per_day + slot) as u64;
            let mut rng =
                ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ splitmix64(index.wrapping_add(1))));

            // Pick a user; with a margin floor, redraw until the pool's
            // true-utility order statistics K and K+1 separate cleanly.
            let mut user_idx = rng.random_range(0..cfg.n_users);
            let mut utility: Vec<f64>;
            let mut attempts = 0;
            loop {
                let user = &world.user_features[user_idx];
                utility = (0..pool)
                    .map(|j| world.true_utility(user, &world.item_features[j]))
                    .collect();
                if cfg.min_margin <= 0.0 {
                    break;
                }
                let mut sorted = utility.clone();
                sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
                if sorted[k - 1] - sorted[k] >= cfg.min_margin {
                    break;
                }
                attempts += 1;
                if attempts > 10_000 {
                    return Err(Error::numerical(
                        "could not satisfy min_margin after 10000 user redraws",
                    ));
                }
                user_idx = rng.random_range(0..cfg.n_users);
            }
            let user = &world.user_features[user_idx];

            // Reference cascade: per-stage noisy utility over the pool.
            let noisy: Vec<Vec<f64>> = (0..t)
                .map(|s| {
                    (0..pool)
                        .map(|j| utility[j] + cfg.noise_scales[s] * standard_normal(&mut rng))
                        .collect()
                })
                .collect();

            // tag_of[j]: level l < T means dropped by filter l+1, level T
            // means survived every filter but missed the ground-truth cut,
            // level T+1 is ground truth.
            let mut tag_of = vec![0u8; pool];
            let mut alive: Vec<usize> = (0..pool).collect();
            for stage in 0..t {
                let scores = &noisy[stage];
                alive.sort_unstable();
                alive.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
                let keep = ref_quotas[stage];
                for &dropped in &alive[keep..] {
                    tag_of[dropped] = stage as u8;
                }
                alive.truncate(keep);
            }
            // ground truth: the top K of the final stage's ordering
            for (pos, &item) in alive.iter().enumerate() {
                tag_of[item] = if pos < k { t as u8 + 1 } else { t as u8 };
            }

            // Sample stage_counts[l] items from each tag group.
            let mut sampled: Vec<(usize, StageTag)> = Vec::new();
            for level in 0..=t + 1 {
                let mut group: Vec<usize> =
                    (0..pool).filter(|&j| tag_of[j] == level as u8).collect();
                let want = cfg.stage_counts[level];
                if group.len() < want {
                    return Err(Error::invalid(format!(
                        "tag level {level} holds {} items, {want} requested",
                        group.len()
                    )));
                }
                // partial Fisher-Yates
                for i in 0..want {
                    let j = rng.random_range(i..group.len());
                    group.swap(i, j);
                }
                for &item in group.iter().take(want) {
                    sampled.push((item, StageTag(level as u8)));
                }
            }

            // Within-stage rank by the score of the filter that judged the
            // group: level l was last scored by filter min(l, T-1).
            let mut keyed: Vec<(StageTag, u32, usize)> = Vec::new();
            for level in 0..=t + 1 {
                let tag = StageTag(level as u8);
                let scores = &noisy[level.min(t - 1)];
                let mut members: Vec<usize> = sampled
                    .iter()
                    .filter(|(_, tg)| *tg == tag)
                    .map(|(j, _)| *j)
                    .collect();
                // ascending score: rank 1 = worst, rank n = best
                members.sort_unstable();
                members.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
                for (pos, &item) in members.iter().enumerate() {
                    keyed.push((tag, pos as u32 + 1, item));
                }
            }
            keyed.sort_by_key(|&(tag, rank, _)| (tag, rank));
            let pairs: Vec<(StageTag, u32)> = keyed.iter().map(|&(tg, r, _)| (tg, r)).collect();
            let mut grades = assign_labels(&pairs)?;
            if cfg.collapse_grades {
                // negative stages flatten to one grade per stage; ground
                // truth keeps its within-stage distinctions on top
                let base = t as i64 + 1;
                for (g, &(tag, rank, _)) in grades.iter_mut().zip(keyed.iter()) {
                    *g = if tag.level() == t + 1 {
                        base + rank as i64
                    } else {
                        tag.level() as i64 + 1
                    };
                }
            }
            let items: Vec<ImpressionItem> = keyed
                .iter()
                .enumerate()
                .map(|(pos, &(tag, rank, item))| ImpressionItem {
                    id: item as u64,
                    features: world.item_features[item].clone(),
                    stage: tag,
                    rank,
                    grade: grades[pos],
                    gt: tag.level() == t + 1,
                })
                .collect();

            impressions.push(ImpressionSample {
                day: day as u32,
                user_features: user.clone(),
                items,
            });
        }
    }

    Ok(Dataset {
        feature_dim: cfg.feature_dim,
        stage_names: default_stage_names(t),
        impressions,
    })
}

// ---------------------------------------------------------------------------
// Line-delimited file format: a JSON header line, then one JSON impression
// per line.

const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    feature_dim: usize,
    stage_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ItemRecord {
    id: u64,
    features: Vec<f64>,
    stage: String,
    rank: u32,
    grade: i64,
    gt: u8,
}

#[derive(Serialize, Deserialize)]
struct ImpressionRecord {
    day: u32,
    user_features: Vec<f64>,
    items: Vec<ItemRecord>,
}

/// Writes a dataset as a header line plus one impression per line.
pub fn write_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header = Header {
        schema_version: SCHEMA_VERSION,
        feature_dim: dataset.feature_dim,
        stage_names: dataset.stage_names.clone(),
    };
    writeln!(file, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for sample in &dataset.impressions {
        let record = ImpressionRecord {
            day: sample.day,
            user_features: sample.user_features.as_slice().to_vec(),
            items: sample
                .items
                .iter()
                .map(|it| ItemRecord {
                    id: it.id,
                    features: it.features.as_slice().to_vec(),
                    stage: dataset.stage_names[it.stage.level()].clone(),
                    rank: it.rank,
                    grade: it.grade,
                    gt: it.gt as u8,
                })
                .collect(),
        };
        writeln!(file, "{}", serde_json::to_string(&record).expect("record serializes"))?;
    }
    Ok(())
}

/// Reads a dataset written by [`write_dataset`]. An empty file parses to an
/// empty dataset; malformed lines report their line number and field.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut lines = file.lines().enumerate();
    let header: Header = match lines.next() {
        None => return Ok(Dataset::default()),
        Some((_, line)) => {
            let line = line?;
            if line.trim().is_empty() {
                return Ok(Dataset::default());
            }
            serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: 1,
                message: e.to_string(),
            })?
        }
    };
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: header.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    let stage_index = |name: &str, line: usize| -> Result<StageTag> {
        header
            .stage_names
            .iter()
            .position(|s| s == name)
            .map(|i| StageTag(i as u8))
            .ok_or_else(|| Error::Parse {
                line,
                message: format!("unknown stage name '{name}'"),
            })
    };
    let mut impressions = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ImpressionRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let mut items = Vec::with_capacity(record.items.len());
        for it in record.items {
            items.push(ImpressionItem {
                id: it.id,
                features: Vector::new(it.features).map_err(|e| Error::Parse {
                    line: line_no,
                    message: e.to_string(),
                })?,
                stage: stage_index(&it.stage, line_no)?,
                rank: it.rank,
                grade: it.grade,
                gt: it.gt != 0,
            });
        }
        impressions.push(ImpressionSample {
            day: record.day,
            user_features: Vector::new(record.user_features).map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?,
            items,
        });
    }
    Ok(Dataset {
        feature_dim: header.feature_dim,
        stage_names: header.stage_names,
        impressions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            n_days: 2,
            impressions_per_day: 20,
            n_users: 32,
            n_items: 48,
            feature_dim: 8,
            stage_counts: vec![5, 5, 8, 2],
            noise_scales: vec![0.5, 0.3],
            interaction_strength: 0.5,
            min_margin: 0.0,
            collapse_grades: false,
            seed: 3,
        }
    }

    #[test]
    fn assign_labels_forced_example() {
        let gt = StageTag(3);
        let rank = StageTag(2);
        let prerank = StageTag(1);
        let items = vec![(gt, 2), (gt, 1), (rank, 1), (prerank, 1)];
        assert_eq!(assign_labels(&items).unwrap(), vec![4, 3, 2, 1]);
    }

    #[test]
    fn assign_labels_single_item_and_duplicates() {
        assert_eq!(assign_labels(&[(StageTag(0), 1)]).unwrap(), vec![1]);
        let dup = vec![(StageTag(1), 2), (StageTag(1), 2)];
        assert!(assign_labels(&dup).is_err());
    }

    #[test]
    fn assign_labels_is_permutation_equivariant() {
        let items = vec![
            (StageTag(2), 3),
            (StageTag(0), 1),
            (StageTag(3), 1),
            (StageTag(2), 1),
        ];
        let grades = assign_labels(&items).unwrap();
        let mut permuted = items.clone();
        permuted.rotate_left(2);
        let permuted_grades = assign_labels(&permuted).unwrap();
        for i in 0..items.len() {
            assert_eq!(grades[i], permuted_grades[(i + items.len() - 2) % items.len()]);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg();
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        let mut other = cfg;
        other.seed += 1;
        let c = generate_dataset(&other).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn impression_size_matches_stage_counts() {
        let data = generate_dataset(&small_cfg()).unwrap();
        for s in &data.impressions {
            assert_eq!(s.items.len(), 20);
            assert_eq!(s.items.iter().filter(|it| it.gt).count(), 2);
        }
    }

    #[test]
    fn noiseless_funnel_selects_true_top_k() {
        let mut cfg = small_cfg();
        cfg.noise_scales = vec![0.0, 0.0];
        let world = synth_world(&cfg);
        let data = generate_dataset(&cfg).unwrap();
        for s in &data.impressions {
            let mut utilities: Vec<(usize, f64)> = (0..cfg.n_items)
                .map(|j| (j, world.true_utility(&s.user_features, &world.item_features[j])))
                .collect();
            utilities.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            let mut expected: Vec<u64> = utilities[..2].iter().map(|&(j, _)| j as u64).collect();
            expected.sort_unstable();
            let mut gt_ids: Vec<u64> =
                s.items.iter().filter(|it| it.gt).map(|it| it.id).collect();
            gt_ids.sort_unstable();
            assert_eq!(gt_ids, expected);
        }
    }

    #[test]
    fn grades_satisfy_the_label_law() {
        let data = generate_dataset(&small_cfg()).unwrap();
        for s in &data.impressions {
            for a in &s.items {
                for b in &s.items {
                    let lhs = a.grade > b.grade;
                    let rhs = a.stage > b.stage || (a.stage == b.stage && a.rank > b.rank);
                    assert_eq!(lhs, rhs);
                }
            }
        }
    }

    #[test]
    fn collapsed_grades_flatten_negative_stages() {
        let mut cfg = small_cfg();
        cfg.collapse_grades = true;
        let data = generate_dataset(&cfg).unwrap();
        let s = &data.impressions[0];
        for level in 0..=2u8 {
            let grades: Vec<i64> = s
                .items
                .iter()
                .filter(|it| it.stage == StageTag(level))
                .map(|it| it.grade)
                .collect();
            assert!(grades.iter().all(|&g| g == grades[0]));
        }
        // ground truth stays above everything and keeps distinct grades
        let mut gt_grades: Vec<i64> =
            s.items.iter().filter(|it| it.gt).map(|it| it.grade).collect();
        let max_neg = s.items.iter().filter(|it| !it.gt).map(|it| it.grade).max().unwrap();
        gt_grades.sort_unstable();
        gt_grades.dedup();
        assert_eq!(gt_grades.len(), 2);
        assert!(gt_grades[0] > max_neg);
    }

    #[test]
    fn generator_statistical_sanity() {
        let mut cfg = small_cfg();
        cfg.n_days = 10;
        cfg.impressions_per_day = 100;
        cfg.interaction_strength = 0.0;
        let data = generate_dataset(&cfg).unwrap();
        assert!(data.impressions.len() >= 1000);
        let world = synth_world(&cfg);
        let (mut gt_sum, mut gt_n) = (0.0, 0usize);
        let (mut neg_sum, mut neg_n) = (0.0, 0usize);
        for s in &data.impressions {
            for it in &s.items {
                let u = world.true_utility(&s.user_features, &it.features);
                if it.gt {
                    gt_sum += u;
                    gt_n += 1;
                } else if it.stage == StageTag(1) {
                    neg_sum += u;
                    neg_n += 1;
                }
            }
        }
        assert!(gt_sum / gt_n as f64 > neg_sum / neg_n as f64);
    }

    #[test]
    fn day_partitions_are_disjoint_and_exhaustive() {
        let data = generate_dataset(&small_cfg()).unwrap();
        let total: usize = (0..data.num_days()).map(|d| data.day(d).len()).sum();
        assert_eq!(total, data.impressions.len());
        assert_eq!(data.days_before(1).len(), data.day(0).len());
        assert_eq!(data.num_days(), 2);
    }

    #[test]
    fn file_roundtrip_preserves_everything() {
        let dir = std::env::temp_dir().join("lcron_sampling_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.jsonl");
        let data = generate_dataset(&small_cfg()).unwrap();
        write_dataset(&path, &data).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(data, back);
    }

    #[test]
    fn empty_file_reads_as_empty_dataset() {
        let dir = std::env::temp_dir().join("lcron_sampling_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("empty.jsonl");
        std::fs::write(&path, b"").unwrap();
        let data = read_dataset(&path).unwrap();
        assert!(data.impressions.is_empty());
    }

    #[test]
    fn missing_grade_field_names_the_field_and_line() {
        let dir = std::env::temp_dir().join("lcron_sampling_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("missing_grade.jsonl");
        let header = r#"{"schema_version":1,"feature_dim":2,"stage_names":["a","b","c","gt_pos"]}"#;
        let bad = r#"{"day":0,"user_features":[0.1,0.2],"items":[{"id":1,"features":[0.0,1.0],"stage":"a","rank":1,"gt":0}]}"#;
        std::fs::write(&path, format!("{header}\n{bad}\n")).unwrap();
        let err = read_dataset(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("grade"), "{msg}");
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn schema_version_mismatch_is_explicit() {
        let dir = std::env::temp_dir().join("lcron_sampling_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad_version.jsonl");
        std::fs::write(
            &path,
            "{\"schema_version\":9,\"feature_dim\":2,\"stage_names\":[]}\n",
        )
        .unwrap();
        match read_dataset(&path) {
            Err(Error::SchemaVersion { found: 9, expected: 1 }) => {}
            other => panic!("expected schema version error, got {other:?}"),
        }
    }

    #[test]
    fn infeasible_counts_are_rejected() {
        let mut cfg = small_cfg();
        cfg.n_items = 20; // reference quotas (20, 10) + 5 earliest samples > 20
        assert!(generate_dataset(&cfg).is_err());
    }

    #[test]
    fn min_margin_separates_order_statistics() {
        let mut cfg = small_cfg();
        cfg.noise_scales = vec![0.0, 0.0];
        cfg.min_margin = 0.3;
        let world = synth_world(&cfg);
        let data = generate_dataset(&cfg).unwrap();
        for s in &data.impressions {
            let mut utilities: Vec<f64> = (0..cfg.n_items)
                .map(|j| world.true_utility(&s.user_features, &world.item_features[j]))
                .collect();
            utilities.sort_by(|a, b| b.partial_cmp(a).unwrap());
            assert!(utilities[1] - utilities[2] >= 0.3);
        }
    }
}
