//! Synthetic text from a trained generator, augmented datasets and
//! fine-tuning, and the side-by-side comparison of training configurations.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Provenance};
use crate::error::{Error, Result};
use crate::gan::{gen_forward, sample_noise, Generator};
use crate::gumbel::Mode;
use crate::lm::{evaluate, train_lm, LmConfig, LmModel, TrainSettings, TrainingCurve};
use crate::tensor::argmax;
use crate::tokenizer::{TokenSequence, Vocab, EOS, PAD};

/// How many synthetic sequences to draw and how to mix them in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPlan {
    pub n_synthetic: usize,
    /// Gumbel-Softmax temperature used for synthesis.
    pub temperature: f64,
    pub seed: u64,
    pub shuffle_seed: u64,
}

impl AugmentPlan {
    pub fn validate(&self, section: &str, problems: &mut Vec<String>) {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            problems.push(format!("{section}.temperature must be positive, got {}", self.temperature));
        }
    }
}

/// Generator-side ids up to the first EOS, with reserved ids removed.
pub fn canonicalize(ids: &[usize]) -> Vec<usize> {
    ids.iter()
        .take_while(|&&id| id != EOS)
        .copied()
        .filter(|&id| !Vocab::is_reserved(id))
        .collect()
}

/// Fixed-length GAN rows from language-model sequences: BOS dropped, then
/// truncated or PAD-filled to `seq_len`.
pub fn gan_rows(data: &Dataset, seq_len: usize) -> Vec<Vec<usize>> {
    data.sequences()
        .iter()
        .map(|s| {
            let mut row: Vec<usize> = s.ids.iter().skip(1).take(seq_len).copied().collect();
            row.resize(seq_len, PAD);
            row
        })
        .collect()
}

/// `n` hard generator samples, decoded with `vocab` and re-encoded, truncated
/// to `max_len` ids and tagged synthetic.
pub fn synthesize(g: &Generator, vocab: &Vocab, n: usize, tau: f64, seed: u64, max_len: usize) -> Result<Dataset> {
    let c = g.config();
    if c.vocab_size != vocab.len() {
        return Err(Error::Validation(vec![format!(
            "generator vocabulary size {} does not match tokenizer size {}",
            c.vocab_size,
            vocab.len()
        )]));
    }
    let mut rng = crate::rng::stream(seed, "synthesize");
    let mut out = Dataset::new(vocab);
    const CHUNK: usize = 256;
    let mut done = 0;
    while done < n {
        let b = CHUNK.min(n - done);
        let z = sample_noise(b, c.noise_dim, &mut rng);
        let y = gen_forward(g, &z, tau, Mode::Hard, &mut rng)?;
        for sample in y.data().chunks(c.seq_len * c.vocab_size) {
            let ids: Vec<usize> = sample.chunks(c.vocab_size).map(argmax).collect();
            let text = vocab.decode(&canonicalize(&ids))?;
            out.push(vocab.encode(&text).truncated(max_len), Provenance::Synthetic);
        }
        done += b;
    }
    Ok(out)
}

/// Multiset union of `real` and `synthetic` in a seeded random order.
pub fn merge(real: &Dataset, synthetic: &Dataset, shuffle_seed: u64) -> Result<Dataset> {
    if real.vocab_fingerprint() != synthetic.vocab_fingerprint() {
        return Err(Error::Validation(vec![format!(
            "cannot merge datasets of vocabularies {} and {}",
            real.vocab_fingerprint(),
            synthetic.vocab_fingerprint()
        )]));
    }
    let mut items: Vec<(TokenSequence, Provenance)> =
        real.iter().chain(synthetic.iter()).map(|(s, p)| (s.clone(), p)).collect();
    items.shuffle(&mut crate::rng::stream(shuffle_seed, "merge"));
    let (sequences, provenance) = items.into_iter().unzip();
    Ok(Dataset::from_parts(
        sequences,
        provenance,
        real.vocab_fingerprint().to_string(),
    ))
}

/// Continues maximum-likelihood training of `model` on an augmented set. Uses
/// the same batching and random streams as [`train_lm`].
pub fn finetune_augmented(model: &mut LmModel, d_aug: &Dataset, settings: &TrainSettings) -> Result<TrainingCurve> {
    if d_aug.is_empty() {
        return Err(Error::Input("augmented dataset is empty".into()));
    }
    train_lm(model, d_aug, settings)
}

/// One row of the comparison: a depth, a training budget and an optional
/// augmentation stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparePlan {
    pub label: String,
    pub n_layer: usize,
    pub steps: usize,
    /// Synthetic sequences mixed in for fine-tuning; zero means none.
    #[serde(default)]
    pub n_synthetic: usize,
    /// Fine-tuning steps on the augmented set after `steps` of plain training.
    #[serde(default)]
    pub finetune_steps: usize,
}

/// Everything the plans share.
#[derive(Clone, Debug)]
pub struct CompareSetup<'a> {
    /// Architecture; each plan overrides `n_layer`.
    pub base: LmConfig,
    /// Optimizer, batch size and seed; each plan overrides `steps`.
    pub train: TrainSettings,
    pub model_seed: u64,
    /// Synthetic pool; plans take its first `n_synthetic` sequences.
    pub synthetic: &'a Dataset,
    pub shuffle_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub layers: usize,
    pub perplexity: f64,
    /// Next-token accuracy as a fraction.
    pub accuracy: f64,
}

/// Held-out metrics, one row per plan.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    /// `Model,Layers,Perplexity,Accuracy`, accuracy as a fraction.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("Model,Layers,Perplexity,Accuracy\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", csv_field(&r.model), r.layers, r.perplexity, r.accuracy);
        }
        out
    }

    /// Aligned plain-text table, accuracy in percent.
    pub fn to_table(&self) -> String {
        let header = ["Model", "Layers", "Perplexity", "Accuracy (%)"];
        let cells: Vec<[String; 4]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.model.clone(),
                    r.layers.to_string(),
                    format!("{:.3}", r.perplexity),
                    format!("{:.2}", 100.0 * r.accuracy),
                ]
            })
            .collect();
        let mut width = header.map(|h| h.chars().count());
        for row in &cells {
            for (w, c) in width.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |cols: [&str; 4]| {
            let mut s = format!("{:<w$}", cols[0], w = width[0]);
            for (c, w) in cols[1..].iter().zip(&width[1..]) {
                let _ = write!(s, "  {c:>w$}");
            }
            s.push('\n');
            s
        };
        let mut out = line(header);
        let rule: Vec<String> = width.iter().map(|&w| "-".repeat(w)).collect();
        out += &line([&rule[0], &rule[1], &rule[2], &rule[3]]);
        for row in &cells {
            out += &line([&row[0], &row[1], &row[2], &row[3]]);
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn run_plan(real: &Dataset, eval_set: &Dataset, plan: &ComparePlan, setup: &CompareSetup) -> Result<ReportRow> {
    let cfg = LmConfig {
        n_layer: plan.n_layer,
        ..setup.base.clone()
    };
    let mut model = LmModel::new(cfg, setup.model_seed)?;
    let settings = TrainSettings {
        steps: plan.steps,
        ..setup.train.clone()
    };
    if plan.steps > 0 {
        train_lm(&mut model, real, &settings)?;
    }
    if plan.finetune_steps > 0 {
        if plan.n_synthetic > setup.synthetic.len() {
            return Err(Error::Input(format!(
                "plan needs {} synthetic sequences, {} available",
                plan.n_synthetic,
                setup.synthetic.len()
            )));
        }
        let aug = merge(real, &setup.synthetic.take(plan.n_synthetic), setup.shuffle_seed)?;
        let ft = TrainSettings {
            steps: plan.finetune_steps,
            ..setup.train.clone()
        };
        finetune_augmented(&mut model, &aug, &ft)?;
    }
    let stats = evaluate(&model, eval_set)?;
    Ok(ReportRow {
        model: plan.label.clone(),
        layers: plan.n_layer,
        perplexity: stats.perplexity(),
        accuracy: stats.accuracy(),
    })
}

/// Trains each plan from the same initialization seed and reports held-out
/// perplexity and next-token accuracy. Every plan runs; failures are returned
/// together, labelled by plan.
pub fn compare_configs(real: &Dataset, eval_set: &Dataset, plans: &[ComparePlan], setup: &CompareSetup) -> Result<Report> {
    if plans.is_empty() {
        return Err(Error::Input("no comparison plans given".into()));
    }
    let mut report = Report::default();
    let mut failures = Vec::new();
    for plan in plans {
        match run_plan(real, eval_set, plan, setup) {
            Ok(row) => report.rows.push(row),
            Err(e) => failures.push(Error::Run {
                label: plan.label.clone(),
                source: Box::new(e),
            }),
        }
    }
    match failures.len() {
        0 => Ok(report),
        1 => Err(failures.remove(0)),
        _ => Err(Error::Runs(failures)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gan::GanConfig;
    use crate::lm::lm_loss;
    use crate::optim::AdamConfig;
    use crate::tokenizer::BOS;

    const TEXT: &str = "the cat sat\non the mat\na cat ran\nthe rat sat\nat a hat";

    fn vocab() -> Vocab {
        Vocab::build(TEXT).unwrap()
    }

    fn real(v: &Vocab) -> Dataset {
        Dataset::from_lines(v, TEXT.lines(), Provenance::Real, 16)
    }

    fn generator(v: &Vocab) -> Generator {
        let cfg = GanConfig {
            gen_hidden: vec![16],
            noise_dim: 4,
            ..GanConfig::desk(v.len(), 12)
        };
        Generator::new(cfg, 3).unwrap()
    }

    fn lm_config(v: &Vocab) -> LmConfig {
        LmConfig {
            n_layer: 1,
            n_head: 2,
            d_model: 16,
            d_ff: 32,
            max_seq_len: 16,
            vocab_size: v.len(),
            dropout: 0.0,
        }
    }

    fn settings(steps: usize) -> TrainSettings {
        TrainSettings {
            optimizer: AdamConfig {
                lr: 3e-3,
                warmup_steps: 10,
                ..AdamConfig::lm_default()
            },
            steps,
            batch_size: 4,
            seed: 5,
        }
    }

    #[test]
    fn canonical_ids_stop_at_eos_and_drop_reserved() {
        assert_eq!(canonicalize(&[5, 0, 6, 1, 3, 7, EOS, 8, 9]), vec![5, 6, 7]);
        assert_eq!(canonicalize(&[EOS, 5]), Vec::<usize>::new());
    }

    #[test]
    fn synthesis_round_trips_through_the_tokenizer() {
        let v = vocab();
        let g = generator(&v);
        assert!(synthesize(&g, &v, 0, 0.5, 1, 16).unwrap().is_empty());
        let s = synthesize(&g, &v, 1000, 0.5, 1, 64).unwrap();
        assert_eq!(s.len(), 1000);
        assert_eq!(s.count(Provenance::Synthetic), 1000);
        for seq in s.sequences() {
            assert!(seq.ids.iter().all(|&id| id < v.len()));
            let text = v.decode(&seq.ids).unwrap();
            assert_eq!(&v.encode(&text), seq);
            assert_eq!(seq.ids[0], BOS);
        }
        assert_eq!(s, synthesize(&g, &v, 1000, 0.5, 1, 64).unwrap());
        assert_ne!(s, synthesize(&g, &v, 1000, 0.5, 2, 64).unwrap());
    }

    #[test]
    fn gan_rows_have_fixed_length() {
        let v = vocab();
        let rows = gan_rows(&real(&v), 5);
        assert!(rows.iter().all(|r| r.len() == 5));
        assert_eq!(rows[0], v.encode("the c").ids[1..6].to_vec());
        let short = gan_rows(&Dataset::from_lines(&v, ["at"], Provenance::Real, 16), 5);
        assert_eq!(short[0], vec![v.id('a'), v.id('t'), EOS, PAD, PAD]);
    }

    #[test]
    fn merge_conserves_sequences_and_tags() {
        let v = vocab();
        let r = Dataset::from_lines(&v, ["a", "b", "c", "d", "e", "f", "g", "h", "i", "j"], Provenance::Real, 16);
        let s = Dataset::from_lines(&v, ["k", "l", "m", "n", "o"], Provenance::Synthetic, 16);
        let m = merge(&r, &s, 4).unwrap();
        assert_eq!(m.len(), 15);
        assert_eq!(m.count(Provenance::Real), 10);
        assert_eq!(m.count(Provenance::Synthetic), 5);
        let mut got: Vec<_> = m.iter().map(|(q, p)| (q.clone(), p)).collect();
        let mut want: Vec<_> = r.iter().chain(s.iter()).map(|(q, p)| (q.clone(), p)).collect();
        got.sort();
        want.sort();
        assert_eq!(got, want);
        assert_eq!(m, merge(&r, &s, 4).unwrap());

        let only_real = merge(&r, &Dataset::new(&v), 4).unwrap();
        assert_eq!(only_real.len(), 10);
        let other = Vocab::build("xyz").unwrap();
        assert!(matches!(merge(&r, &Dataset::new(&other), 0), Err(Error::Validation(_))));
    }

    #[test]
    fn finetune_on_real_only_equals_plain_training() {
        let v = vocab();
        let r = real(&v);
        let aug = merge(&r, &Dataset::new(&v), 77).unwrap();
        assert_ne!(aug.sequences(), r.sequences());
        let mut a = LmModel::new(lm_config(&v), 1).unwrap();
        let mut b = a.clone();
        let ca = train_lm(&mut a, &r, &settings(15)).unwrap();
        let cb = finetune_augmented(&mut b, &aug, &settings(15)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ca, cb);
        assert!(finetune_augmented(&mut b, &Dataset::new(&v), &settings(1)).is_err());
    }

    #[test]
    fn augmented_loss_matches_per_sequence_nll() {
        let v = vocab();
        let g = generator(&v);
        let aug = merge(&real(&v), &synthesize(&g, &v, 6, 0.5, 9, 16).unwrap(), 1).unwrap();
        let m = LmModel::with_init_std(lm_config(&v), 2, 0.2).unwrap();
        let seqs: Vec<TokenSequence> = aug.sequences()[..4].to_vec();
        let padded = |s: &TokenSequence, len: usize| {
            let mut ids = s.ids.clone();
            ids.resize(len, PAD);
            TokenSequence::new(ids)
        };
        let len = seqs.iter().map(TokenSequence::len).max().unwrap();
        let batch: Vec<TokenSequence> = seqs.iter().map(|s| padded(s, len)).collect();
        let batch_refs: Vec<&TokenSequence> = batch.iter().collect();
        let b = crate::data::Batch::from_sequences(&batch_refs).unwrap();
        let mut tape = crate::Tape::new();
        let vars = m.params().bind(&mut tape, false);
        let loss = m.loss_on_tape(&mut tape, &vars, &b, None).unwrap();
        let batch_loss = tape.value(loss).item();

        let mut total = 0.0;
        let mut tokens = 0;
        for s in &seqs {
            let n = crate::data::predicted_end(s);
            if n == 0 {
                continue;
            }
            let trimmed = TokenSequence::new(s.ids[..=n].to_vec());
            total += lm_loss(&m, &[trimmed]).unwrap() * n as f64;
            tokens += n;
        }
        assert!((batch_loss - total / tokens as f64).abs() < 1e-10);
    }

    #[test]
    fn augmented_training_reduces_loss() {
        let v = vocab();
        let g = generator(&v);
        let aug = merge(&real(&v), &synthesize(&g, &v, 20, 0.5, 4, 16).unwrap(), 2).unwrap();
        let mut m = LmModel::new(lm_config(&v), 3).unwrap();
        let curve = finetune_augmented(&mut m, &aug, &settings(500)).unwrap();
        let first = curve.first_loss().unwrap();
        let last = curve.last_loss().unwrap();
        assert!(last <= 0.7 * first, "{first} -> {last}");
    }

    fn setup<'a>(v: &Vocab, pool: &'a Dataset) -> CompareSetup<'a> {
        CompareSetup {
            base: lm_config(v),
            train: settings(0),
            model_seed: 8,
            synthetic: pool,
            shuffle_seed: 3,
        }
    }

    #[test]
    fn comparison_report_rows() {
        let v = vocab();
        let r = real(&v);
        let pool = synthesize(&generator(&v), &v, 10, 0.5, 1, 16).unwrap();
        let s = setup(&v, &pool);
        let untrained = ComparePlan {
            label: "untrained".into(),
            n_layer: 1,
            steps: 0,
            n_synthetic: 0,
            finetune_steps: 0,
        };
        let report = compare_configs(&r, &r, std::slice::from_ref(&untrained), &s).unwrap();
        let m = LmModel::new(lm_config(&v), 8).unwrap();
        let stats = evaluate(&m, &r).unwrap();
        assert_eq!(report.rows[0].perplexity, stats.perplexity());
        assert_eq!(report.rows[0].accuracy, stats.accuracy());

        let plans = vec![
            ComparePlan {
                label: "base".into(),
                n_layer: 1,
                steps: 5,
                ..untrained.clone()
            },
            ComparePlan {
                label: "deep + aug".into(),
                n_layer: 2,
                steps: 5,
                n_synthetic: 10,
                finetune_steps: 3,
            },
            ComparePlan {
                label: "base".into(),
                n_layer: 1,
                steps: 5,
                ..untrained.clone()
            },
        ];
        let report = compare_configs(&r, &r, &plans, &s).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert_eq!(report.rows[0], report.rows[2]);
        assert_eq!(report.to_csv().lines().next(), Some("Model,Layers,Perplexity,Accuracy"));
        assert_eq!(report.to_csv().lines().count(), 4);
        let table = report.to_table();
        let widths: Vec<usize> = table.lines().map(|l| l.chars().count()).collect();
        assert!(widths.windows(2).all(|w| w[0] == w[1]), "{table}");
    }

    #[test]
    fn comparison_failures_carry_labels() {
        let v = vocab();
        let r = real(&v);
        let pool = Dataset::new(&v);
        let s = setup(&v, &pool);
        let bad = |label: &str| ComparePlan {
            label: label.into(),
            n_layer: 1,
            steps: 0,
            n_synthetic: 4,
            finetune_steps: 2,
        };
        match compare_configs(&r, &r, &[bad("one")], &s) {
            Err(Error::Run { label, .. }) => assert_eq!(label, "one"),
            other => panic!("{other:?}"),
        }
        match compare_configs(&r, &r, &[bad("one"), bad("two")], &s) {
            Err(e @ Error::Runs(_)) => {
                let msg = e.to_string();
                assert!(msg.contains("one") && msg.contains("two"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        assert!(compare_configs(&r, &r, &[], &s).is_err());
    }
}
