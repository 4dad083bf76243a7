//! TOML experiment files: one section per stage, explicit seeds, paths
//! resolved against the file's directory.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentPlan, ComparePlan};
use crate::error::{Error, Result};
use crate::gan::GanConfig;
use crate::gumbel::{Mode, TemperatureSchedule};
use crate::lm::{LmConfig, TrainSettings};
use crate::optim::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    pub out_dir: PathBuf,
}

/// One seed per stage; each feeds its own named random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub lm_init: u64,
    pub lm_train: u64,
    pub gan_init: u64,
    pub gan_train: u64,
    pub synthesize: u64,
    pub merge: u64,
    pub finetune: u64,
    pub compare: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Seeds {
            lm_init: seed,
            lm_train: seed,
            gan_init: seed,
            gan_train: seed,
            synthesize: seed,
            merge: seed,
            finetune: seed,
            compare: seed,
        }
    }
}

/// Which stages the `pipeline` command runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stages {
    pub train_lm: bool,
    pub train_gan: bool,
    pub synthesize: bool,
    pub augment_finetune: bool,
    pub compare: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Share of corpus lines held out for evaluation, taken from the end.
    pub eval_fraction: f64,
}

/// Language-model architecture; the vocabulary size comes from the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmSection {
    pub n_layer: usize,
    pub n_head: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
}

impl LmSection {
    pub fn to_config(&self, vocab_size: usize) -> LmConfig {
        LmConfig {
            n_layer: self.n_layer,
            n_head: self.n_head,
            d_model: self.d_model,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
            vocab_size,
            dropout: self.dropout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
}

impl TrainSection {
    pub fn settings(&self, seed: u64) -> TrainSettings {
        TrainSettings {
            optimizer: self.optimizer.clone(),
            steps: self.steps,
            batch_size: self.batch_size,
            seed,
        }
    }

    fn collect_problems(&self, section: &str, problems: &mut Vec<String>) {
        if self.batch_size == 0 {
            problems.push(format!("{section}.batch_size must be at least 1"));
        }
        self.optimizer.validate(&format!("{section}.optimizer"), problems);
    }
}

/// GAN architecture and schedule; the vocabulary size comes from the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanSection {
    pub steps: usize,
    pub noise_dim: usize,
    pub seq_len: usize,
    pub gen_hidden: Vec<usize>,
    pub disc_embed: usize,
    pub disc_hidden: usize,
    pub leaky_slope: f64,
    pub batch_size: usize,
    pub d_steps: usize,
    pub g_steps: usize,
    pub train_mode: Mode,
    pub temperature: TemperatureSchedule,
    pub optimizer: AdamConfig,
}

impl GanSection {
    pub fn to_config(&self, vocab_size: usize) -> GanConfig {
        GanConfig {
            noise_dim: self.noise_dim,
            seq_len: self.seq_len,
            vocab_size,
            gen_hidden: self.gen_hidden.clone(),
            disc_embed: self.disc_embed,
            disc_hidden: self.disc_hidden,
            leaky_slope: self.leaky_slope,
            batch_size: self.batch_size,
            d_steps: self.d_steps,
            g_steps: self.g_steps,
            train_mode: self.train_mode,
            temperature: self.temperature,
            optimizer: self.optimizer.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSection {
    pub n_synthetic: usize,
    /// Gumbel-Softmax temperature used for synthesis.
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    pub plans: Vec<ComparePlan>,
}

/// A validated experiment with absolute paths.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub paths: Paths,
    pub seeds: Seeds,
    pub stages: Stages,
    pub data: DataSection,
    pub lm: LmSection,
    pub lm_train: TrainSection,
    pub gan: GanSection,
    pub augment: AugmentSection,
    pub finetune: TrainSection,
    pub compare: CompareSection,
}

const SECTIONS: [&str; 10] = [
    "paths", "seeds", "stages", "data", "lm", "lm_train", "gan", "augment", "finetune", "compare",
];

// smallest vocabulary the tokenizer allows; stands in until the corpus is read
const PLACEHOLDER_VOCAB: usize = 5;

fn section<T: DeserializeOwned>(table: &toml::Table, name: &str, problems: &mut Vec<String>) -> Option<T> {
    let Some(value) = table.get(name) else {
        problems.push(format!("missing section [{name}]"));
        return None;
    };
    match value.clone().try_into::<T>() {
        Ok(v) => Some(v),
        Err(e) => {
            problems.push(format!("[{name}]: {}", e.message().trim()));
            None
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// `path` is an existing directory, or could be created as one.
fn creatable_dir(path: &Path) -> bool {
    let mut cur = Some(path);
    while let Some(p) = cur {
        if p.exists() {
            return p.is_dir();
        }
        cur = p.parent();
    }
    false
}

/// The sections that parsed; checks needing a missing section are skipped.
struct Parts<'a> {
    paths: Option<&'a Paths>,
    data: Option<&'a DataSection>,
    lm: Option<&'a LmSection>,
    lm_train: Option<&'a TrainSection>,
    gan: Option<&'a GanSection>,
    augment: Option<&'a AugmentSection>,
    finetune: Option<&'a TrainSection>,
    compare: Option<&'a CompareSection>,
}

impl Parts<'_> {
    fn collect_problems(&self, problems: &mut Vec<String>) {
        if let Some(paths) = self.paths {
            if !paths.corpus.is_file() {
                problems.push(format!("paths.corpus: {} is not a readable file", paths.corpus.display()));
            }
            if !creatable_dir(&paths.out_dir) {
                problems.push(format!(
                    "paths.out_dir: {} is not a directory and cannot be created",
                    paths.out_dir.display()
                ));
            }
        }
        if let Some(data) = self.data {
            let f = data.eval_fraction;
            if !(f > 0.0 && f < 1.0) {
                problems.push(format!("data.eval_fraction must be in (0, 1), got {f}"));
            }
        }
        if let Some(lm) = self.lm {
            lm.to_config(PLACEHOLDER_VOCAB).collect_problems("lm", problems);
        }
        if let Some(t) = self.lm_train {
            t.collect_problems("lm_train", problems);
        }
        if let Some(gan) = self.gan {
            gan.to_config(PLACEHOLDER_VOCAB).collect_problems("gan", problems);
            if let Some(lm) = self.lm {
                if gan.seq_len > lm.max_seq_len {
                    problems.push(format!(
                        "gan.seq_len ({}) must not exceed lm.max_seq_len ({})",
                        gan.seq_len, lm.max_seq_len
                    ));
                }
            }
        }
        if let Some(a) = self.augment {
            if !(a.temperature > 0.0 && a.temperature.is_finite()) {
                problems.push(format!("augment.temperature must be positive, got {}", a.temperature));
            }
        }
        if let Some(t) = self.finetune {
            t.collect_problems("finetune", problems);
        }
        if let Some(compare) = self.compare {
            if compare.plans.is_empty() {
                problems.push("compare.plans must list at least one plan".into());
            }
            for (i, plan) in compare.plans.iter().enumerate() {
                if plan.n_layer == 0 {
                    problems.push(format!("compare.plans[{i}].n_layer must be at least 1"));
                }
                if let Some(a) = self.augment {
                    if plan.n_synthetic > a.n_synthetic {
                        problems.push(format!(
                            "compare.plans[{i}].n_synthetic ({}) exceeds augment.n_synthetic ({})",
                            plan.n_synthetic, a.n_synthetic
                        ));
                    }
                }
                if plan.finetune_steps > 0 && plan.n_synthetic == 0 {
                    problems.push(format!("compare.plans[{i}] fine-tunes without synthetic sequences"));
                }
            }
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses and validates `text`, resolving relative paths against `base`.
    /// Every problem found is reported in one validation error.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Validation(vec![e.to_string()]))?;
        let mut problems = Vec::new();
        for key in table.keys() {
            if !SECTIONS.contains(&key.as_str()) {
                problems.push(format!("unknown section [{key}]"));
            }
        }
        let paths: Option<Paths> = section(&table, "paths", &mut problems);
        let seeds = section(&table, "seeds", &mut problems);
        let stages = section(&table, "stages", &mut problems);
        let data = section(&table, "data", &mut problems);
        let lm = section(&table, "lm", &mut problems);
        let lm_train = section(&table, "lm_train", &mut problems);
        let gan = section(&table, "gan", &mut problems);
        let augment = section(&table, "augment", &mut problems);
        let finetune = section(&table, "finetune", &mut problems);
        let compare = section(&table, "compare", &mut problems);

        let paths = paths.map(|p| Paths {
            corpus: resolve(base, &p.corpus),
            out_dir: resolve(base, &p.out_dir),
        });
        Parts {
            paths: paths.as_ref(),
            data: data.as_ref(),
            lm: lm.as_ref(),
            lm_train: lm_train.as_ref(),
            gan: gan.as_ref(),
            augment: augment.as_ref(),
            finetune: finetune.as_ref(),
            compare: compare.as_ref(),
        }
        .collect_problems(&mut problems);
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        match (paths, seeds, stages, data, lm, lm_train, gan, augment, finetune, compare) {
            (
                Some(paths),
                Some(seeds),
                Some(stages),
                Some(data),
                Some(lm),
                Some(lm_train),
                Some(gan),
                Some(augment),
                Some(finetune),
                Some(compare),
            ) => Ok(ExperimentConfig {
                paths,
                seeds,
                stages,
                data,
                lm,
                lm_train,
                gan,
                augment,
                finetune,
                compare,
            }),
            _ => Err(Error::Consistency("section parsed without a reported problem".into())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        self.collect_problems(&mut problems);
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    fn collect_problems(&self, problems: &mut Vec<String>) {
        Parts {
            paths: Some(&self.paths),
            data: Some(&self.data),
            lm: Some(&self.lm),
            lm_train: Some(&self.lm_train),
            gan: Some(&self.gan),
            augment: Some(&self.augment),
            finetune: Some(&self.finetune),
            compare: Some(&self.compare),
        }
        .collect_problems(problems);
    }

    pub fn augment_plan(&self) -> AugmentPlan {
        AugmentPlan {
            n_synthetic: self.augment.n_synthetic,
            temperature: self.augment.temperature,
            seed: self.seeds.synthesize,
            shuffle_seed: self.seeds.merge,
        }
    }

    /// Replaces every stage seed with `seed`.
    pub fn override_seeds(&mut self, seed: u64) {
        self.seeds = Seeds::all(seed);
    }
}
