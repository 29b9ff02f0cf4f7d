//! Key attribution: which keyed model produced an adversarial image.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attacks::{run_attack, AttackConfig};
use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::model::InstrumentedModel;

/// Desk-scale defaults per key.
pub const DEFAULT_TRAIN_PER_KEY: usize = 1250;
pub const DEFAULT_TEST_PER_KEY: usize = 2500;

/// Attacks run over the source pool in chunks of this size.
const ATTACK_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureMode {
    /// `perturbed − original`.
    Residual,
    /// The adversarial image itself.
    Raw,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    /// One flattened feature row per sample.
    pub features: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
    /// Index of the clean source image in the dataset.
    pub source_index: Vec<usize>,
}

impl LabeledSet {
    fn new() -> Self {
        Self {
            features: Vec::new(),
            labels: Vec::new(),
            source_index: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributionCorpus {
    /// Class names: each generating model's key spec (or fingerprint).
    pub classes: Vec<String>,
    pub train: LabeledSet,
    pub test: LabeledSet,
}

/// Draws disjoint train and test pools of source images and attacks every
/// pool image on every model, cycling through `attacks` by image. All models
/// see the same images, so only the perturbation tells them apart.
pub fn build_attribution_corpus(
    models: &[&InstrumentedModel],
    attacks: &[AttackConfig],
    data: &DatasetSplit,
    train_per_key: usize,
    test_per_key: usize,
    mode: FeatureMode,
    seed: u64,
) -> Result<AttributionCorpus> {
    if models.len() < 2 {
        return Err(Error::InvalidArgument("attribution needs at least two models".into()));
    }
    if attacks.is_empty() {
        return Err(Error::InvalidArgument("attribution needs at least one attack".into()));
    }
    for a in attacks {
        a.validate()?;
    }
    let need = train_per_key + test_per_key;
    if data.len() < need {
        return Err(Error::InvalidArgument(format!(
            "{need} source images needed, dataset has {}",
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train_idx, rest) = order.split_at(train_per_key);
    let test_idx = &rest[..test_per_key];

    let classes = models
        .iter()
        .map(|m| m.key().map_or_else(|| m.fingerprint(), |k| k.spec().to_string()))
        .collect();
    let mut train = LabeledSet::new();
    let mut test = LabeledSet::new();
    for (class, model) in models.iter().enumerate() {
        attack_pool(model, attacks, data, train_idx, class, mode, &mut train)?;
        attack_pool(model, attacks, data, test_idx, class, mode, &mut test)?;
    }
    Ok(AttributionCorpus { classes, train, test })
}

fn attack_pool(
    model: &InstrumentedModel,
    attacks: &[AttackConfig],
    data: &DatasetSplit,
    pool: &[usize],
    class: usize,
    mode: FeatureMode,
    out: &mut LabeledSet,
) -> Result<()> {
    for (a, attack) in attacks.iter().enumerate() {
        let mine: Vec<usize> = pool.iter().copied().skip(a).step_by(attacks.len()).collect();
        for chunk in mine.chunks(ATTACK_CHUNK) {
            let part = data.subset(chunk);
            let batch = run_attack(model, &part.images, &part.labels, attack)?;
            for (j, &src) in chunk.iter().enumerate() {
                let adv = batch.perturbed.sample(j);
                let feat = match mode {
                    FeatureMode::Raw => adv.to_vec(),
                    FeatureMode::Residual => adv.iter().zip(batch.originals.sample(j)).map(|(p, o)| p - o).collect(),
                };
                out.features.push(feat);
                out.labels.push(class);
                out.source_index.push(src);
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SvmConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 1e-3,
            l2: 1e-4,
            seed: 0,
        }
    }
}

/// One-vs-rest linear max-margin classifier on standardized features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSvm {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `[class][feature]`.
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl LinearSvm {
    /// Hinge-loss subgradient descent, one sample at a time in a seeded
    /// shuffled order; the ℓ₂ penalty shrinks the weights every step.
    pub fn fit(features: &[Vec<f32>], labels: &[usize], classes: usize, cfg: &SvmConfig) -> Result<Self> {
        if classes < 2 || labels.iter().all(|&l| l == labels[0]) {
            return Err(Error::InvalidArgument("attribution needs samples from at least two classes".into()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
        let d = features[0].len();
        if features.iter().any(|f| f.len() != d) {
            return Err(Error::InvalidArgument("feature rows differ in length".into()));
        }
        let n = features.len() as f64;
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, &v) in mean.iter_mut().zip(f) {
                *m += v as f64 / n;
            }
        }
        let mut var = vec![0.0; d];
        for f in features {
            for ((s, &v), m) in var.iter_mut().zip(f).zip(&mean) {
                *s += (v as f64 - m).powi(2) / n;
            }
        }
        // constant features are left centred but unscaled
        let scale: Vec<f64> = var.iter().map(|&v| if v > 1e-12 { 1.0 / v.sqrt() } else { 1.0 }).collect();
        let mut svm = Self {
            mean,
            scale,
            weights: vec![vec![0.0; d]; classes],
            bias: vec![0.0; classes],
        };
        let rows: Vec<Vec<f64>> = features.iter().map(|f| svm.standardize(f)).collect();
        let mut order: Vec<usize> = (0..rows.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let shrink = 1.0 - cfg.learning_rate * cfg.l2;
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for &i in &order {
                let x = &rows[i];
                for c in 0..classes {
                    let y = if labels[i] == c { 1.0 } else { -1.0 };
                    let w = &mut svm.weights[c];
                    let margin = y * (dot(w, x) + svm.bias[c]);
                    w.iter_mut().for_each(|v| *v *= shrink);
                    if margin < 1.0 {
                        let step = cfg.learning_rate * y;
                        for (wi, xi) in w.iter_mut().zip(x) {
                            *wi += step * xi;
                        }
                        svm.bias[c] += step;
                    }
                }
            }
        }
        Ok(svm)
    }

    fn standardize(&self, f: &[f32]) -> Vec<f64> {
        f.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((&v, m), s)| (v as f64 - m) * s)
            .collect()
    }

    pub fn scores(&self, f: &[f32]) -> Vec<f64> {
        let x = self.standardize(f);
        self.weights.iter().zip(&self.bias).map(|(w, b)| dot(w, &x) + b).collect()
    }

    pub fn predict(&self, f: &[f32]) -> usize {
        let s = self.scores(f);
        (0..s.len()).fold(0, |best, c| if s[c] > s[best] { c } else { best })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassScores {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributionReport {
    pub per_class: Vec<ClassScores>,
    /// Equals overall accuracy for single-label classification.
    pub micro_f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl AttributionReport {
    pub fn from_predictions(names: &[String], truth: &[usize], predicted: &[usize]) -> Self {
        let k = names.len();
        let mut confusion = vec![vec![0usize; k]; k];
        for (&t, &p) in truth.iter().zip(predicted) {
            confusion[t][p] += 1;
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let per_class: Vec<ClassScores> = (0..k)
            .map(|c| {
                let tp = confusion[c][c];
                let support: usize = confusion[c].iter().sum();
                let predicted: usize = confusion.iter().map(|r| r[c]).sum();
                let precision = ratio(tp, predicted);
                let recall = ratio(tp, support);
                let f1 = if precision + recall == 0.0 {
                    0.0
                } else {
                    2.0 * precision * recall / (precision + recall)
                };
                ClassScores {
                    name: names[c].clone(),
                    precision,
                    recall,
                    f1,
                    support,
                }
            })
            .collect();
        let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
        let mean = |f: fn(&ClassScores) -> f64| per_class.iter().map(f).sum::<f64>() / k.max(1) as f64;
        Self {
            micro_f1: ratio(correct, truth.len()),
            macro_precision: mean(|c| c.precision),
            macro_recall: mean(|c| c.recall),
            macro_f1: mean(|c| c.f1),
            per_class,
            confusion,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,precision,recall,f1,support\n");
        for c in &self.per_class {
            s.push_str(&format!("{},{},{},{},{}\n", c.name, c.precision, c.recall, c.f1, c.support));
        }
        let n: usize = self.per_class.iter().map(|c| c.support).sum();
        s.push_str(&format!("micro,{0},{0},{0},{n}\n", self.micro_f1));
        s.push_str(&format!(
            "macro,{},{},{},{n}\n",
            self.macro_precision, self.macro_recall, self.macro_f1
        ));
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| key | precision | recall | F1 |\n|---|---|---|---|\n");
        for c in &self.per_class {
            s.push_str(&format!("| {} | {:.2} | {:.2} | {:.2} |\n", c.name, c.precision, c.recall, c.f1));
        }
        s.push_str(&format!("| micro | {0:.2} | {0:.2} | {0:.2} |\n", self.micro_f1));
        s.push_str(&format!(
            "| macro | {:.2} | {:.2} | {:.2} |\n",
            self.macro_precision, self.macro_recall, self.macro_f1
        ));
        s
    }
}

/// Fits on the corpus train split and scores the test split.
pub fn attribute(corpus: &AttributionCorpus, cfg: &SvmConfig) -> Result<AttributionReport> {
    if corpus.train.is_empty() || corpus.test.is_empty() {
        return Err(Error::InvalidArgument("empty attribution corpus".into()));
    }
    let k = corpus.classes.len();
    let svm = LinearSvm::fit(&corpus.train.features, &corpus.train.labels, k, cfg)?;
    let predicted: Vec<usize> = corpus.test.features.iter().map(|f| svm.predict(f)).collect();
    Ok(AttributionReport::from_predictions(&corpus.classes, &corpus.test.labels, &predicted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn blobs(per_class: usize, centers: &[[f32; 3]], spread: f32, seed: u64) -> LabeledSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = LabeledSet::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..per_class {
                set.features.push(center.iter().map(|&m| m + rng.gen_range(-spread..spread)).collect());
                set.labels.push(c);
                set.source_index.push(set.source_index.len());
            }
        }
        set
    }

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|c| format!("k{c}")).collect()
    }

    #[test]
    fn separable_blobs_are_perfectly_attributed() {
        let centers = [[0.0, 0.0, 1.0], [3.0, 3.0, 1.0]];
        let corpus = AttributionCorpus {
            classes: names(2),
            train: blobs(60, &centers, 1.0, 1),
            test: blobs(100, &centers, 1.0, 2),
        };
        let r = attribute(&corpus, &SvmConfig::default()).unwrap();
        assert_eq!(r.macro_f1, 1.0);
        assert_eq!(r.micro_f1, 1.0);
        assert_eq!(r.confusion, vec![vec![100, 0], vec![0, 100]]);
    }

    #[test]
    fn shuffled_labels_score_at_chance() {
        let k = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut noise = |n: usize| {
            let mut s = LabeledSet::new();
            for i in 0..n {
                s.features.push((0..20).map(|_| rng.gen_range(-1.0..1.0)).collect());
                s.labels.push(i % k);
                s.source_index.push(i);
            }
            s.labels.shuffle(&mut rng);
            s
        };
        let corpus = AttributionCorpus {
            classes: names(k),
            train: noise(400),
            test: noise(2000),
        };
        let r = attribute(&corpus, &SvmConfig { epochs: 20, ..SvmConfig::default() }).unwrap();
        assert!((r.macro_f1 - 0.25).abs() < 0.06, "macro F1 {}", r.macro_f1);
    }

    #[test]
    fn report_invariants() {
        let truth = [0, 0, 1, 1, 1, 2, 2, 2, 2];
        let pred = [0, 1, 1, 1, 0, 2, 2, 1, 2];
        let r = AttributionReport::from_predictions(&names(3), &truth, &pred);
        let acc = truth.iter().zip(&pred).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64;
        assert_eq!(r.micro_f1, acc);
        for (c, row) in r.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), truth.iter().filter(|&&t| t == c).count());
        }
        // class 1: tp 2, predicted 4, support 3
        assert!((r.per_class[1].precision - 0.5).abs() < 1e-12);
        assert!((r.per_class[1].recall - 2.0 / 3.0).abs() < 1e-12);
        assert!(r.to_csv().lines().count() == 1 + 3 + 2);
    }

    #[test]
    fn single_class_is_rejected() {
        let f = vec![vec![0.0f32; 3]; 4];
        assert!(LinearSvm::fit(&f, &[1, 1, 1, 1], 2, &SvmConfig::default()).is_err());
    }

    #[test]
    fn corpus_is_balanced_and_disjoint() {
        use crate::model::build_model;
        use crate::tensor::Tensor;
        let keys = ["2x^2+3x+5<6", "0.1x^2-x+2<3", "2x^2+4x+5<6"];
        let models: Vec<_> = keys
            .iter()
            .map(|k| build_model("lenet5", Some(crate::Key::parse(k).unwrap()), 0).unwrap())
            .collect();
        let refs: Vec<&InstrumentedModel> = models.iter().collect();
        let x = Tensor::from_fn(&[30, 1, 28, 28], |i| ((i * 11) % 23) as f32 / 23.0);
        let data = DatasetSplit::new("t", x, (0..30).map(|i| i % 10).collect()).unwrap();
        let attacks = [AttackConfig::fgsm(0.1), AttackConfig::fgsm(0.05)];
        let c = build_attribution_corpus(&refs, &attacks, &data, 6, 10, FeatureMode::Residual, 4).unwrap();
        let specs: Vec<&str> = models.iter().map(|m| m.key().unwrap().spec()).collect();
        assert_eq!(c.classes, specs);
        for (set, per) in [(&c.train, 6), (&c.test, 10)] {
            for k in 0..3 {
                assert_eq!(set.labels.iter().filter(|&&l| l == k).count(), per);
            }
        }
        assert!(c.train.source_index.iter().all(|i| !c.test.source_index.contains(i)));
        assert!(c.train.features.iter().flatten().all(|v| v.abs() <= 0.1 + 1e-6));
        let err = build_attribution_corpus(&refs, &attacks, &data, 20, 20, FeatureMode::Raw, 0);
        assert!(err.is_err());
    }
}
