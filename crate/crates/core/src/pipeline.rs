//! Experiment stages as run by the command-line tool. Each stage reads its
//! inputs from and writes its artifacts to the output directory.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::augment::{compare_configs, finetune_augmented, gan_rows, merge, synthesize, CompareSetup};
use crate::data::{Dataset, Provenance};
use crate::error::{Error, Result};
use crate::gan::{train_gan, Discriminator, Generator};
use crate::io::checkpoint::{load_gan, load_lm, save_gan, save_lm, VocabRef};
use crate::io::experiment::ExperimentConfig;
use crate::lm::{evaluate, train_lm, LmModel};
use crate::tokenizer::Vocab;

pub const VOCAB_FILE: &str = "vocab.txt";
pub const LM_CHECKPOINT: &str = "lm.ckpt";
pub const LM_CURVE: &str = "lm_curve.csv";
pub const GAN_CHECKPOINT: &str = "gan.ckpt";
pub const GAN_CURVE: &str = "gan_curve.csv";
pub const SYNTHETIC_TEXT: &str = "synthetic.txt";
pub const SYNTHETIC_TAGS: &str = "synthetic.prov";
pub const AUG_TEXT: &str = "aug.txt";
pub const AUG_TAGS: &str = "aug.prov";
pub const FINETUNED_CHECKPOINT: &str = "lm_aug.ckpt";
pub const FINETUNE_CURVE: &str = "finetune_curve.csv";
pub const EVAL_CSV: &str = "eval.csv";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TABLE: &str = "report.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    TrainLm,
    TrainGan,
    Synthesize,
    AugmentFinetune,
    Eval,
    Compare,
}

impl Stage {
    /// Stages run by the full pipeline, in order.
    pub const PIPELINE: [Stage; 5] = [
        Stage::TrainLm,
        Stage::TrainGan,
        Stage::Synthesize,
        Stage::AugmentFinetune,
        Stage::Compare,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::TrainLm => "train-lm",
            Stage::TrainGan => "train-gan",
            Stage::Synthesize => "synthesize",
            Stage::AugmentFinetune => "augment-finetune",
            Stage::Eval => "eval",
            Stage::Compare => "compare",
        }
    }

    fn enabled(self, cfg: &ExperimentConfig) -> bool {
        let s = &cfg.stages;
        match self {
            Stage::TrainLm => s.train_lm,
            Stage::TrainGan => s.train_gan,
            Stage::Synthesize => s.synthesize,
            Stage::AugmentFinetune => s.augment_finetune,
            Stage::Eval => true,
            Stage::Compare => s.compare,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Corpus, vocabulary and the train/held-out split shared by every stage.
pub struct Workspace<'a> {
    pub config: &'a ExperimentConfig,
    pub out: PathBuf,
    pub vocab: Vocab,
    pub train: Dataset,
    pub eval: Dataset,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::file(path, e))
}

fn corpus_split(text: &str, vocab: &Vocab, cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let lines = text.lines().filter(|l| !l.trim().is_empty());
    Dataset::from_lines(vocab, lines, Provenance::Real, cfg.lm.max_seq_len).split_tail(cfg.data.eval_fraction)
}

impl<'a> Workspace<'a> {
    /// Reads the corpus, creates `out` and writes the vocabulary file.
    pub fn open(config: &'a ExperimentConfig, out: &Path) -> Result<Self> {
        let path = &config.paths.corpus;
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let vocab = Vocab::build(&text)?;
        let (train, eval) = corpus_split(&text, &vocab, config)?;
        std::fs::create_dir_all(out).map_err(|e| Error::file(out, e))?;
        vocab.save(&out.join(VOCAB_FILE))?;
        Ok(Workspace {
            config,
            out: out.to_path_buf(),
            vocab,
            train,
            eval,
        })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.out.join(file)
    }

    fn vocab_ref(&self) -> VocabRef {
        VocabRef::new(VOCAB_FILE, &self.vocab)
    }

    fn check_vocab(&self, vocab: &Vocab, source: &Path) -> Result<()> {
        if vocab.fingerprint() != self.vocab.fingerprint() {
            return Err(Error::Validation(vec![format!(
                "{} was built from another corpus (vocabulary {} vs {})",
                source.display(),
                vocab.fingerprint(),
                self.vocab.fingerprint()
            )]));
        }
        Ok(())
    }

    pub fn run(&self, stage: Stage, log: &mut dyn Write) -> Result<()> {
        match stage {
            Stage::TrainLm => self.train_lm(log),
            Stage::TrainGan => self.train_gan(log),
            Stage::Synthesize => self.synthesize(log),
            Stage::AugmentFinetune => self.augment_finetune(log),
            Stage::Eval => self.eval(None, log),
            Stage::Compare => self.compare(log),
        }
    }

    /// Every enabled pipeline stage in order, stopping at the first failure.
    pub fn run_pipeline(&self, log: &mut dyn Write) -> Result<()> {
        for stage in Stage::PIPELINE {
            if stage.enabled(self.config) {
                self.run(stage, log).map_err(|e| Error::Run {
                    label: stage.name().into(),
                    source: Box::new(e),
                })?;
            } else {
                writeln!(log, "{stage}: skipped")?;
            }
        }
        Ok(())
    }

    pub fn train_lm(&self, log: &mut dyn Write) -> Result<()> {
        let cfg = self.config;
        let mut model = LmModel::new(cfg.lm.to_config(self.vocab.len()), cfg.seeds.lm_init)?;
        let curve = train_lm(&mut model, &self.train, &cfg.lm_train.settings(cfg.seeds.lm_train))?;
        save_lm(&model, self.vocab_ref(), &self.path(LM_CHECKPOINT))?;
        write(&self.path(LM_CURVE), curve.to_csv())?;
        match (curve.first_loss(), curve.last_loss()) {
            (Some(a), Some(b)) => writeln!(log, "train-lm: {} steps, loss {a:.4} -> {b:.4}", curve.rows.len())?,
            _ => writeln!(log, "train-lm: 0 steps, initial model saved")?,
        }
        Ok(())
    }

    pub fn train_gan(&self, log: &mut dyn Write) -> Result<()> {
        let cfg = self.config;
        let gan_cfg = cfg.gan.to_config(self.vocab.len());
        let mut g = Generator::new(gan_cfg.clone(), cfg.seeds.gan_init)?;
        let mut d = Discriminator::new(gan_cfg.clone(), cfg.seeds.gan_init)?;
        let rows = gan_rows(&self.train, gan_cfg.seq_len);
        let curve = train_gan(&mut g, &mut d, &rows, &gan_cfg, cfg.gan.steps, cfg.seeds.gan_train)?;
        save_gan(&g, &d, self.vocab_ref(), &self.path(GAN_CHECKPOINT))?;
        write(&self.path(GAN_CURVE), curve.to_csv())?;
        for w in curve.warnings() {
            writeln!(log, "warning: {w}")?;
        }
        if let Some(r) = curve.rows.last() {
            writeln!(
                log,
                "train-gan: {} steps, D(real) {:.3}, D(fake) {:.3}, tau {:.3}",
                curve.rows.len(),
                r.d_real_mean,
                r.d_fake_mean,
                r.tau
            )?;
        } else {
            writeln!(log, "train-gan: 0 steps, initial networks saved")?;
        }
        Ok(())
    }

    pub fn synthesize(&self, log: &mut dyn Write) -> Result<()> {
        let cfg = self.config;
        let path = self.path(GAN_CHECKPOINT);
        let (g, _, vref) = load_gan(&path)?;
        let vocab = vref.resolve(&path)?;
        self.check_vocab(&vocab, &path)?;
        let plan = cfg.augment_plan();
        let synthetic = synthesize(&g, &vocab, plan.n_synthetic, plan.temperature, plan.seed, cfg.lm.max_seq_len)?;
        synthetic.save(&vocab, &self.path(SYNTHETIC_TEXT), &self.path(SYNTHETIC_TAGS))?;
        writeln!(log, "synthesize: {} sequences", synthetic.len())?;
        Ok(())
    }

    fn load_synthetic(&self) -> Result<Dataset> {
        Dataset::load(
            &self.vocab,
            &self.path(SYNTHETIC_TEXT),
            &self.path(SYNTHETIC_TAGS),
            self.config.lm.max_seq_len,
        )
    }

    pub fn augment_finetune(&self, log: &mut dyn Write) -> Result<()> {
        let cfg = self.config;
        let path = self.path(LM_CHECKPOINT);
        let (mut model, vref) = load_lm(&path)?;
        self.check_vocab(&vref.resolve(&path)?, &path)?;
        let synthetic = self.load_synthetic()?;
        let aug = merge(&self.train, &synthetic, cfg.seeds.merge)?;
        aug.save(&self.vocab, &self.path(AUG_TEXT), &self.path(AUG_TAGS))?;
        let curve = finetune_augmented(&mut model, &aug, &cfg.finetune.settings(cfg.seeds.finetune))?;
        save_lm(&model, self.vocab_ref(), &self.path(FINETUNED_CHECKPOINT))?;
        write(&self.path(FINETUNE_CURVE), curve.to_csv())?;
        writeln!(
            log,
            "augment-finetune: {} real + {} synthetic, {} steps",
            aug.count(Provenance::Real),
            aug.count(Provenance::Synthetic),
            curve.rows.len()
        )?;
        Ok(())
    }

    /// Held-out perplexity and accuracy of `checkpoint`, by default the trained
    /// language model in the output directory.
    pub fn eval(&self, checkpoint: Option<&Path>, log: &mut dyn Write) -> Result<()> {
        let path = checkpoint.map_or_else(|| self.path(LM_CHECKPOINT), Path::to_path_buf);
        let (model, vref) = load_lm(&path)?;
        let vocab = vref.resolve(&path)?;
        let text = std::fs::read_to_string(&self.config.paths.corpus).map_err(|e| Error::file(&self.config.paths.corpus, e))?;
        let (_, held_out) = corpus_split(&text, &vocab, self.config)?;
        let stats = evaluate(&model, &held_out)?;
        write(
            &self.path(EVAL_CSV),
            format!("Perplexity,Accuracy\n{},{}\n", stats.perplexity(), stats.accuracy()),
        )?;
        writeln!(log, "perplexity {:.6}", stats.perplexity())?;
        writeln!(log, "accuracy {:.6}", stats.accuracy())?;
        Ok(())
    }

    pub fn compare(&self, log: &mut dyn Write) -> Result<()> {
        let cfg = self.config;
        let needs_synthetic = cfg.compare.plans.iter().any(|p| p.finetune_steps > 0);
        let synthetic = if needs_synthetic {
            self.load_synthetic()?
        } else {
            Dataset::new(&self.vocab)
        };
        let setup = CompareSetup {
            base: cfg.lm.to_config(self.vocab.len()),
            train: cfg.lm_train.settings(cfg.seeds.compare),
            model_seed: cfg.seeds.lm_init,
            synthetic: &synthetic,
            shuffle_seed: cfg.seeds.merge,
        };
        let report = compare_configs(&self.train, &self.eval, &cfg.compare.plans, &setup)?;
        write(&self.path(REPORT_CSV), report.to_csv())?;
        let table = report.to_table();
        write(&self.path(REPORT_TABLE), &table)?;
        write!(log, "{table}")?;
        Ok(())
    }
}
