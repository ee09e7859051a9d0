//! Synthetic few-shot classification data.
//!
//! Samples are token sequences (not single vectors) so the CLS/patch pathway
//! and per-token routing are genuinely exercised. Each class gets a Gaussian
//! token cloud around its own centroid; held-out classes form the novel
//! split, and the out-of-distribution split reuses the base-test draws with a
//! fixed additive shift applied to every token. The "text" side of a class is
//! a fixed synthetic prompt token sequence derived from the class index with
//! a seeded hash.
//!
//! Generation is a pure function of the config, including the seed: every
//! sample is drawn from its own derived RNG stream, so layouts never depend
//! on iteration order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::Path;

use crate::error::{Error, Result};
use crate::serialize::{read_container, write_container, Container, Precision};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTaskConfig {
    pub num_classes: usize,
    pub tokens_per_sample: usize,
    pub token_width: usize,
    /// Tokens in each class prompt sequence.
    pub prompt_tokens: usize,
    /// Distance of class centroids from the origin.
    pub class_separation: f64,
    /// Standard deviation of the per-token Gaussian noise.
    pub noise_scale: f64,
    /// Magnitude of the additive token shift applied to the OOD split.
    pub ood_shift: f64,
    /// Share of classes assigned to the base split (rounded, both splits must
    /// stay nonempty).
    pub base_fraction: f64,
    /// Training-pool samples per base class.
    pub train_per_class: usize,
    /// Test samples per class, in every test split.
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            tokens_per_sample: 4,
            token_width: 16,
            prompt_tokens: 3,
            class_separation: 4.0,
            noise_scale: 0.6,
            ood_shift: 1.5,
            base_fraction: 0.6,
            train_per_class: 32,
            test_per_class: 16,
            seed: 0,
        }
    }
}

impl SyntheticTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("need at least two classes".into()));
        }
        if !(self.base_fraction > 0.0 && self.base_fraction < 1.0) {
            return Err(Error::InvalidConfig("base_fraction must be in (0, 1)".into()));
        }
        if self.noise_scale < 0.0 || self.ood_shift < 0.0 {
            return Err(Error::InvalidConfig("noise_scale and ood_shift must be >= 0".into()));
        }
        if self.tokens_per_sample == 0 || self.token_width == 0 || self.prompt_tokens == 0 {
            return Err(Error::InvalidConfig("token dimensions must be positive".into()));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::InvalidConfig("per-class sample counts must be positive".into()));
        }
        let base = self.base_class_count();
        if base == 0 || base >= self.num_classes {
            return Err(Error::InvalidConfig(format!(
                "base_fraction {} leaves an empty split for {} classes",
                self.base_fraction, self.num_classes
            )));
        }
        Ok(())
    }

    pub fn base_class_count(&self) -> usize {
        (self.base_fraction * self.num_classes as f64).round().max(1.0) as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub label: usize,
    /// tokens_per_sample x token_width.
    pub tokens: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitKind {
    BaseTrain,
    BaseTest,
    NovelTest,
    OodTest,
}

impl SplitKind {
    pub fn name(self) -> &'static str {
        match self {
            SplitKind::BaseTrain => "base_train",
            SplitKind::BaseTest => "base_test",
            SplitKind::NovelTest => "novel_test",
            SplitKind::OodTest => "ood_test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SyntheticTaskConfig,
    pub base_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
    /// Prompt token sequences, one per class (global index).
    pub prompts: Vec<Tensor>,
    pub base_train: Vec<Sample>,
    pub base_test: Vec<Sample>,
    pub novel_test: Vec<Sample>,
    pub ood_test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, kind: SplitKind) -> &[Sample] {
        match kind {
            SplitKind::BaseTrain => &self.base_train,
            SplitKind::BaseTest => &self.base_test,
            SplitKind::NovelTest => &self.novel_test,
            SplitKind::OodTest => &self.ood_test,
        }
    }

    /// Samples as (tokens, label) pairs for evaluation calls.
    pub fn labelled(&self, kind: SplitKind) -> Vec<(Tensor, usize)> {
        self.split(kind)
            .iter()
            .map(|s| (s.tokens.clone(), s.label))
            .collect()
    }
}

// splitmix64; derives one independent RNG stream per (purpose, class, index)
fn derive_seed(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    let mut x = seed
        .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(tag + 1))
        .wrapping_add(a.wrapping_mul(0xbf58476d1ce4e5b9))
        .wrapping_add(b.wrapping_mul(0x94d049bb133111eb));
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58476d1ce4e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d049bb133111eb);
    x ^= x >> 31;
    x
}

const TAG_CENTROID: u64 = 1;
const TAG_PROMPT: u64 = 2;
const TAG_SAMPLE_TRAIN: u64 = 3;
const TAG_SAMPLE_TEST: u64 = 4;
const TAG_OOD_DIRECTION: u64 = 5;

fn gaussian_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, len);
        let norm: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|a| a / norm).collect();
        }
    }
}

fn class_centroid(config: &SyntheticTaskConfig, class: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, TAG_CENTROID, class as u64, 0));
    unit_vec(&mut rng, config.token_width)
        .into_iter()
        .map(|v| v * config.class_separation)
        .collect()
}

fn draw_sample_tokens(config: &SyntheticTaskConfig, centroid: &[f64], stream: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    let mut data = Vec::with_capacity(config.tokens_per_sample * config.token_width);
    for _ in 0..config.tokens_per_sample {
        for (i, noise) in gaussian_vec(&mut rng, config.token_width).into_iter().enumerate() {
            data.push(centroid[i] + config.noise_scale * noise);
        }
    }
    Tensor::from_parts(vec![config.tokens_per_sample, config.token_width], data)
}

/// Generate the four splits of a synthetic task. Pure in the config.
pub fn generate(config: &SyntheticTaskConfig) -> Result<Dataset> {
    config.validate()?;
    let base_count = config.base_class_count();
    let base_classes: Vec<usize> = (0..base_count).collect();
    let novel_classes: Vec<usize> = (base_count..config.num_classes).collect();

    let centroids: Vec<Vec<f64>> = (0..config.num_classes)
        .map(|c| class_centroid(config, c))
        .collect();

    let prompts: Vec<Tensor> = (0..config.num_classes)
        .map(|c| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(config.seed, TAG_PROMPT, c as u64, 0));
            let data = gaussian_vec(&mut rng, config.prompt_tokens * config.token_width);
            Tensor::from_parts(vec![config.prompt_tokens, config.token_width], data)
        })
        .collect();

    let mut next_id = 0u64;
    let mut take_id = || {
        let id = next_id;
        next_id += 1;
        id
    };

    let mut base_train = Vec::new();
    for &class in &base_classes {
        for idx in 0..config.train_per_class {
            let stream = derive_seed(config.seed, TAG_SAMPLE_TRAIN, class as u64, idx as u64);
            base_train.push(Sample {
                id: take_id(),
                label: class,
                tokens: draw_sample_tokens(config, &centroids[class], stream),
            });
        }
    }

    let mut test_split = |classes: &[usize], take_id: &mut dyn FnMut() -> u64| -> Vec<Sample> {
        let mut out = Vec::new();
        for &class in classes {
            for idx in 0..config.test_per_class {
                let stream = derive_seed(config.seed, TAG_SAMPLE_TEST, class as u64, idx as u64);
                out.push(Sample {
                    id: take_id(),
                    label: class,
                    tokens: draw_sample_tokens(config, &centroids[class], stream),
                });
            }
        }
        out
    };
    let base_test = test_split(&base_classes, &mut take_id);
    let novel_test = test_split(&novel_classes, &mut take_id);

    // OOD split: the base-test draws, every token shifted along a fixed
    // direction. ood_shift = 0 reproduces base-test values exactly.
    let mut shift_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(config.seed, TAG_OOD_DIRECTION, 0, 0));
    let shift: Vec<f64> = unit_vec(&mut shift_rng, config.token_width)
        .into_iter()
        .map(|v| v * config.ood_shift)
        .collect();
    let ood_test: Vec<Sample> = base_test
        .iter()
        .map(|s| {
            let mut tokens = s.tokens.clone();
            for t in 0..tokens.rows() {
                for i in 0..tokens.cols() {
                    *tokens.at_mut(t, i) += shift[i];
                }
            }
            Sample {
                id: take_id(),
                label: s.label,
                tokens,
            }
        })
        .collect();

    Ok(Dataset {
        config: *config,
        base_classes,
        novel_classes,
        prompts,
        base_train,
        base_test,
        novel_test,
        ood_test,
    })
}

/// Classify by distance to per-class mean token vectors estimated from a
/// training split. Model-free baseline used to certify task separability.
pub fn nearest_centroid_accuracy(train: &[Sample], test: &[Sample]) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::DegenerateInput("nearest-centroid needs nonempty splits".into()));
    }
    let width = train[0].tokens.cols();
    let mut sums: std::collections::BTreeMap<usize, (Vec<f64>, usize)> = Default::default();
    for s in train {
        let entry = sums.entry(s.label).or_insert_with(|| (vec![0.0; width], 0));
        for t in 0..s.tokens.rows() {
            for i in 0..width {
                entry.0[i] += s.tokens.at(t, i);
            }
        }
        entry.1 += s.tokens.rows();
    }
    let centroids: Vec<(usize, Vec<f64>)> = sums
        .into_iter()
        .map(|(label, (sum, count))| {
            (label, sum.into_iter().map(|v| v / count as f64).collect())
        })
        .collect();
    let mut correct = 0usize;
    for s in test {
        let mut mean = vec![0.0; width];
        for t in 0..s.tokens.rows() {
            for i in 0..width {
                mean[i] += s.tokens.at(t, i);
            }
        }
        for m in &mut mean {
            *m /= s.tokens.rows() as f64;
        }
        let best = centroids
            .iter()
            .map(|(label, c)| {
                let d: f64 = c.iter().zip(mean.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                (*label, d)
            })
            .min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite distances"))
            .expect("nonempty centroids")
            .0;
        if best == s.label {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / test.len() as f64)
}

#[derive(Serialize, Deserialize)]
struct SplitMeta {
    ids: Vec<u64>,
    labels: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    config: SyntheticTaskConfig,
    base_classes: Vec<usize>,
    novel_classes: Vec<usize>,
    base_train: SplitMeta,
    base_test: SplitMeta,
    novel_test: SplitMeta,
    ood_test: SplitMeta,
}

fn pack_split(samples: &[Sample], config: &SyntheticTaskConfig) -> (Tensor, SplitMeta) {
    let (t, w) = (config.tokens_per_sample, config.token_width);
    let mut data = Vec::with_capacity(samples.len() * t * w);
    let mut ids = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        data.extend_from_slice(s.tokens.data());
        ids.push(s.id);
        labels.push(s.label);
    }
    (
        Tensor::from_parts(vec![samples.len(), t, w], data),
        SplitMeta { ids, labels },
    )
}

fn unpack_split(packed: &Tensor, meta: &SplitMeta, config: &SyntheticTaskConfig) -> Result<Vec<Sample>> {
    let (t, w) = (config.tokens_per_sample, config.token_width);
    let count = meta.ids.len();
    if packed.shape() != [count, t, w] || meta.labels.len() != count {
        return Err(Error::Parse {
            offset: 0,
            message: "split record shape disagrees with manifest".into(),
        });
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let chunk = &packed.data()[i * t * w..(i + 1) * t * w];
        out.push(Sample {
            id: meta.ids[i],
            label: meta.labels[i],
            tokens: Tensor::from_parts(vec![t, w], chunk.to_vec()),
        });
    }
    Ok(out)
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let (bt, bt_meta) = pack_split(&dataset.base_train, &dataset.config);
    let (be, be_meta) = pack_split(&dataset.base_test, &dataset.config);
    let (nv, nv_meta) = pack_split(&dataset.novel_test, &dataset.config);
    let (od, od_meta) = pack_split(&dataset.ood_test, &dataset.config);
    let meta = DatasetMeta {
        config: dataset.config,
        base_classes: dataset.base_classes.clone(),
        novel_classes: dataset.novel_classes.clone(),
        base_train: bt_meta,
        base_test: be_meta,
        novel_test: nv_meta,
        ood_test: od_meta,
    };
    let mut records = Vec::new();
    for (c, prompt) in dataset.prompts.iter().enumerate() {
        records.push((format!("prompt{c}"), prompt.clone()));
    }
    records.push(("base_train".into(), bt));
    records.push(("base_test".into(), be));
    records.push(("novel_test".into(), nv));
    records.push(("ood_test".into(), od));
    write_container(
        path,
        &Container {
            kind: "dataset".to_string(),
            precision: Precision::F64,
            meta: serde_json::to_value(&meta)?,
            records,
        },
    )
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let container = read_container(path)?;
    if container.kind != "dataset" {
        return Err(Error::Parse {
            offset: 0,
            message: format!("container kind '{}' is not a dataset", container.kind),
        });
    }
    let meta: DatasetMeta = serde_json::from_value::<DatasetMeta>(container.meta.clone())
        .map_err(|e| Error::Parse {
            offset: 0,
            message: format!("invalid dataset manifest: {e}"),
        })?;
    let prompts = (0..meta.config.num_classes)
        .map(|c| container.record(&format!("prompt{c}")).cloned())
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        base_train: unpack_split(container.record("base_train")?, &meta.base_train, &meta.config)?,
        base_test: unpack_split(container.record("base_test")?, &meta.base_test, &meta.config)?,
        novel_test: unpack_split(container.record("novel_test")?, &meta.novel_test, &meta.config)?,
        ood_test: unpack_split(container.record("ood_test")?, &meta.ood_test, &meta.config)?,
        config: meta.config,
        base_classes: meta.base_classes,
        novel_classes: meta.novel_classes,
        prompts,
    })
}

/// Dataset manifest as JSON, for run records.
pub fn dataset_meta_json(dataset: &Dataset) -> Result<Value> {
    Ok(serde_json::json!({
        "config": dataset.config,
        "base_classes": dataset.base_classes,
        "novel_classes": dataset.novel_classes,
        "sizes": {
            "base_train": dataset.base_train.len(),
            "base_test": dataset.base_test.len(),
            "novel_test": dataset.novel_test.len(),
            "ood_test": dataset.ood_test.len(),
        },
    }))
}
