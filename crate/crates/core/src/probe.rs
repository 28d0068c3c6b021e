//! Frozen-feature MLP probes.
//!
//! The backbone is only read here: features come from an eval-mode forward
//! pass, and the probe owns its own weights and optimizer. Both protocols share
//! one init stream and one shuffle stream, so on a corpus where every example
//! is informative the diagnostic run is bit-identical to the main run.

use crate::data::{LabeledExample, SplitSet, QUERY_POS};
use crate::error::{Error, Result};
use crate::model::{self, BackboneParams};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::StreamKey;
use crate::tensor::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

const FEATURE_BATCH: usize = 64;
const EVAL_BATCH: usize = 4096;

/// One hidden GELU layer, trained with Adam (no weight decay) for a fixed
/// number of epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl ProbeConfig {
    /// Hidden 256, 100 epochs, lr 1e-3, batch 1024.
    pub fn full(seed: u64) -> Self {
        ProbeConfig {
            hidden: 256,
            epochs: 100,
            lr: 1e-3,
            batch_size: 1024,
            seed,
        }
    }

    pub fn smoke(seed: u64) -> Self {
        ProbeConfig {
            epochs: 30,
            ..Self::full(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config(format!("probe settings must be positive: {self:?}")));
        }
        Ok(())
    }

    fn stream(&self) -> StreamKey {
        StreamKey::root(self.seed).child("probe")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Fit and score on every labeled example.
    Main,
    /// Fit and score on informative examples only.
    Diag,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Main => "main",
            Protocol::Diag => "diag",
        }
    }
}

/// Row-major feature matrix with aligned labels and informative flags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Features {
    pub width: usize,
    pub rows: Vec<f32>,
    pub labels: Vec<u8>,
    pub informative: Vec<bool>,
}

impl Features {
    pub fn new(width: usize, rows: Vec<f32>, labels: Vec<u8>, informative: Vec<bool>) -> Result<Self> {
        if width == 0 || rows.len() != width * labels.len() || informative.len() != labels.len() {
            return Err(Error::shape(
                "features",
                format!("{} values, width {width}, {} labels, {} flags", rows.len(), labels.len(), informative.len()),
            ));
        }
        if let Some(&l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Config(format!("label {l} is not binary")));
        }
        Ok(Features {
            width,
            rows,
            labels,
            informative,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.width..(i + 1) * self.width]
    }

    pub fn informative_only(&self) -> Features {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.informative[i]).collect();
        self.select(&keep)
    }

    fn select(&self, idx: &[usize]) -> Features {
        Features {
            width: self.width,
            rows: idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            informative: idx.iter().map(|&i| self.informative[i]).collect(),
        }
    }
}

/// Final-norm hidden state at the query position for every example, dropout off.
pub fn extract_features(params: &BackboneParams<f32>, examples: &[LabeledExample]) -> Result<Features> {
    let blocks = examples
        .par_chunks(FEATURE_BATCH)
        .map(|chunk| {
            let batch: Vec<_> = chunk.iter().map(|e| e.tokens).collect();
            model::extract_rows(params, &batch, QUERY_POS)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Features {
        width: params.config.width,
        rows: blocks.into_iter().flatten().flatten().collect(),
        labels: examples.iter().map(|e| e.label).collect(),
        informative: examples.iter().map(|e| e.informative).collect(),
    })
}

/// Features for the three labeled splits a probe touches.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitFeatures {
    pub train: Features,
    pub test: Features,
    pub ood: Features,
}

impl SplitFeatures {
    pub fn extract(params: &BackboneParams<f32>, splits: &SplitSet) -> Result<Self> {
        Ok(SplitFeatures {
            train: extract_features(params, &splits.train)?,
            test: extract_features(params, &splits.test)?,
            ood: extract_features(params, &splits.ood)?,
        })
    }
}

/// `width -> hidden -> 2` weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeWeights {
    pub w1: Tensor<f32>,
    pub b1: Tensor<f32>,
    pub w2: Tensor<f32>,
    pub b2: Tensor<f32>,
}

impl ProbeWeights {
    /// Uniform in `±1/sqrt(fan_in)` for every weight and bias.
    fn init(width: usize, hidden: usize, key: &StreamKey) -> Self {
        let mut rng = key.rng();
        let mut uniform = |shape: Vec<usize>, fan_in: usize| {
            let bound = 1.0 / (fan_in as f32).sqrt();
            Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
        };
        ProbeWeights {
            w1: uniform(vec![width, hidden], width),
            b1: uniform(vec![hidden], width),
            w2: uniform(vec![hidden, 2], hidden),
            b2: uniform(vec![2], hidden),
        }
    }

    pub fn input_width(&self) -> usize {
        self.w1.shape()[0]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<f32>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn record(&self, tape: &mut Tape<f32>, x: Tensor<f32>, trainable: bool) -> Result<(Var, [Var; 4])> {
        let leaf = |tape: &mut Tape<f32>, t: &Tensor<f32>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let vars = [leaf(tape, &self.w1), leaf(tape, &self.b1), leaf(tape, &self.w2), leaf(tape, &self.b2)];
        let x = tape.constant(x);
        let h = tape.matmul(x, vars[0])?;
        let h = tape.add_row(h, vars[1])?;
        let h = tape.gelu(h);
        let z = tape.matmul(h, vars[2])?;
        let z = tape.add_row(z, vars[3])?;
        Ok((z, vars))
    }

    /// `[n, 2]` logits, row-major.
    pub fn logits(&self, features: &Features) -> Result<Vec<f32>> {
        if features.width != self.input_width() {
            return Err(Error::shape(
                "probe",
                format!("features of width {}, probe expects {}", features.width, self.input_width()),
            ));
        }
        let mut out = Vec::with_capacity(features.len() * 2);
        for start in (0..features.len()).step_by(EVAL_BATCH) {
            let end = (start + EVAL_BATCH).min(features.len());
            let x = Tensor::new(vec![end - start, features.width], features.rows[start * features.width..end * features.width].to_vec())?;
            let mut tape = Tape::new();
            let (z, _) = self.record(&mut tape, x, false)?;
            out.extend_from_slice(tape.value(z).data());
        }
        Ok(out)
    }

    /// Argmax class per row; exact ties go to label 0.
    pub fn predict(&self, features: &Features) -> Result<Vec<u8>> {
        Ok(self.logits(features)?.chunks(2).map(|z| u8::from(z[1] > z[0])).collect())
    }

    /// Fraction of rows predicted correctly; 0 for an empty set.
    pub fn accuracy(&self, features: &Features) -> Result<f64> {
        if features.is_empty() {
            return Ok(0.0);
        }
        let hits = self
            .predict(features)?
            .iter()
            .zip(&features.labels)
            .filter(|(p, l)| p == l)
            .count();
        Ok(hits as f64 / features.len() as f64)
    }
}

/// Fits a fresh probe. Needs at least two rows covering both labels.
pub fn train_probe(features: &Features, config: &ProbeConfig) -> Result<ProbeWeights> {
    config.validate()?;
    let positives = features.labels.iter().filter(|&&l| l == 1).count();
    if features.len() < 2 || positives == 0 || positives == features.len() {
        return Err(Error::DegenerateProbe(format!(
            "{} examples with {positives} positive; both labels are required",
            features.len()
        )));
    }
    let key = config.stream();
    let mut weights = ProbeWeights::init(features.width, config.hidden, &key.child("init"));
    let adam = AdamWConfig {
        lr: config.lr,
        ..AdamWConfig::default()
    };
    let sizes: Vec<usize> = weights.tensors_mut().iter().map(|t| t.len()).collect();
    let mut opt = AdamW::new(adam, &sizes, vec![false; 4])?;
    let mut order: Vec<usize> = (0..features.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut key.child("shuffle").child(epoch).rng());
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            let batch = features.select(idx);
            let x = Tensor::new(vec![idx.len(), features.width], batch.rows)?;
            let targets: Vec<usize> = batch.labels.iter().map(|&l| l as usize).collect();
            let mut tape = Tape::new();
            let (z, vars) = weights.record(&mut tape, x, true)?;
            let loss = tape.cross_entropy(z, &targets)?;
            let value = tape.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step, loss: value });
            }
            tape.backward(loss)?;
            let grads: Vec<Vec<f32>> = vars
                .iter()
                .map(|&v| tape.grad(v).map(<[f32]>::to_vec).ok_or_else(|| Error::shape("probe", "missing gradient")))
                .collect::<Result<_>>()?;
            let grads: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
            opt.step(&mut weights.tensors_mut(), &grads)?;
        }
    }
    Ok(weights)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCount {
    /// Examples in the split before any filter.
    pub total: usize,
    /// Examples the protocol actually used.
    pub used: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeCounts {
    pub train: SplitCount,
    pub test: SplitCount,
    pub ood: SplitCount,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRun {
    pub protocol: Protocol,
    pub config: ProbeConfig,
    pub counts: ProbeCounts,
    pub train_acc: f64,
    pub test_acc: f64,
    pub ood_acc: f64,
    #[serde(skip)]
    pub weights: Option<ProbeWeights>,
}

/// Fits on `features.train` (filtered per `protocol`) and scores test and OOD.
pub fn fit_and_evaluate(protocol: Protocol, features: &SplitFeatures, config: &ProbeConfig) -> Result<ProbeRun> {
    let filtered;
    let (train, test, ood) = match protocol {
        Protocol::Main => (&features.train, &features.test, &features.ood),
        Protocol::Diag => {
            filtered = [
                features.train.informative_only(),
                features.test.informative_only(),
                features.ood.informative_only(),
            ];
            (&filtered[0], &filtered[1], &filtered[2])
        }
    };
    let weights = match train_probe(train, config) {
        Err(Error::DegenerateProbe(why)) if protocol == Protocol::Diag => {
            return Err(Error::ProtocolInapplicable(format!("informative train subset: {why}")))
        }
        other => other?,
    };
    if protocol == Protocol::Diag && (test.is_empty() || ood.is_empty()) {
        return Err(Error::ProtocolInapplicable("informative test or ood subset is empty".into()));
    }
    let count = |all: &Features, used: &Features| SplitCount {
        total: all.len(),
        used: used.len(),
    };
    Ok(ProbeRun {
        protocol,
        config: config.clone(),
        counts: ProbeCounts {
            train: count(&features.train, train),
            test: count(&features.test, test),
            ood: count(&features.ood, ood),
        },
        train_acc: weights.accuracy(train)?,
        test_acc: weights.accuracy(test)?,
        ood_acc: weights.accuracy(ood)?,
        weights: Some(weights),
    })
}

pub fn run_main_protocol(params: &BackboneParams<f32>, splits: &SplitSet, config: &ProbeConfig) -> Result<ProbeRun> {
    fit_and_evaluate(Protocol::Main, &SplitFeatures::extract(params, splits)?, config)
}

pub fn run_diag_protocol(params: &BackboneParams<f32>, splits: &SplitSet, config: &ProbeConfig) -> Result<ProbeRun> {
    fit_and_evaluate(Protocol::Diag, &SplitFeatures::extract(params, splits)?, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_example, Theta};
    use crate::model::BackboneConfig;
    use crate::vocab::{bucket_of, Vocabulary};

    fn toy(n: usize, seed: u64, f: impl Fn(&[f32]) -> u8) -> Features {
        let mut rng = StreamKey::root(seed).child("toy").rng();
        let rows: Vec<f32> = (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels = rows.chunks(4).map(&f).collect();
        Features::new(4, rows, labels, vec![true; n]).unwrap()
    }

    fn quick(seed: u64) -> ProbeConfig {
        ProbeConfig {
            hidden: 32,
            epochs: 60,
            lr: 1e-2,
            batch_size: 64,
            seed,
        }
    }

    #[test]
    fn separable_features_reach_full_train_accuracy() {
        let mut feats = toy(400, 1, |r| u8::from(r[0] + 0.5 * r[1] > 0.1));
        // push every point at least 0.25 away from the boundary
        for i in 0..feats.len() {
            let shift = if feats.labels[i] == 1 { 0.25 } else { -0.25 };
            feats.rows[i * 4] += shift;
        }
        let w = train_probe(&feats, &quick(3)).unwrap();
        assert_eq!(w.accuracy(&feats).unwrap(), 1.0);
    }

    #[test]
    fn shuffled_labels_stay_near_chance() {
        let mut rng = StreamKey::root(9).child("labels").rng();
        let train = toy(500, 2, |_| 0);
        let train = Features {
            labels: (0..500).map(|_| rng.random_range(0..2)).collect(),
            ..train
        };
        let held = toy(2000, 4, |_| 0);
        let held = Features {
            labels: (0..2000).map(|_| rng.random_range(0..2)).collect(),
            ..held
        };
        let acc = train_probe(&train, &quick(5)).unwrap().accuracy(&held).unwrap();
        // 99% normal band for n = 2000 at p = 0.5
        assert!((acc - 0.5).abs() < 2.576 * (0.25f64 / 2000.0).sqrt(), "{acc}");
    }

    #[test]
    fn training_is_deterministic() {
        let feats = toy(200, 7, |r| u8::from(r[2] > 0.0));
        assert_eq!(train_probe(&feats, &quick(1)).unwrap(), train_probe(&feats, &quick(1)).unwrap());
        assert_ne!(train_probe(&feats, &quick(1)).unwrap(), train_probe(&feats, &quick(2)).unwrap());
    }

    #[test]
    fn single_class_is_degenerate() {
        let feats = toy(10, 1, |_| 1);
        assert!(matches!(train_probe(&feats, &quick(1)), Err(Error::DegenerateProbe(_))));
        let one = toy(1, 1, |_| 0);
        assert!(matches!(train_probe(&one, &quick(1)), Err(Error::DegenerateProbe(_))));
    }

    #[test]
    fn ties_go_to_label_zero() {
        let w = ProbeWeights {
            w1: Tensor::zeros(vec![4, 3]),
            b1: Tensor::zeros(vec![3]),
            w2: Tensor::zeros(vec![3, 2]),
            b2: Tensor::zeros(vec![2]),
        };
        assert_eq!(w.predict(&toy(5, 1, |_| 1)).unwrap(), vec![0; 5]);
    }

    fn oracle_features(theta: Theta, n: usize, seed: u64) -> Features {
        let vocab = Vocabulary::build();
        let key = StreamKey::root(seed).child("oracle");
        let mut rows = Vec::new();
        let (mut labels, mut informative) = (Vec::new(), Vec::new());
        for i in 0..n {
            let ex = gen_example(&mut key.child(i).rng(), &theta, &vocab).unwrap();
            let same = match (bucket_of(ex.u1()), bucket_of(ex.u2())) {
                (Some(a), Some(b)) => f32::from(u8::from(a == b)),
                _ => 0.5,
            };
            rows.extend([same, 1.0 - same]);
            labels.push(ex.label);
            informative.push(ex.informative);
        }
        Features::new(2, rows, labels, informative).unwrap()
    }

    fn split_oracle(theta: Theta) -> SplitFeatures {
        SplitFeatures {
            train: oracle_features(theta, 600, 1),
            test: oracle_features(theta, 300, 2),
            ood: oracle_features(theta, 300, 3),
        }
    }

    fn theta(rho: f64, eta: f64) -> Theta {
        Theta { b: 0.5, rho, eta, p: 0.5, d: 2 }
    }

    #[test]
    fn oracle_bucket_bit_hits_ceiling() {
        let run = fit_and_evaluate(Protocol::Main, &split_oracle(theta(1.0, 0.0)), &quick(1)).unwrap();
        assert_eq!(run.ood_acc, 1.0);
        assert_eq!(run.test_acc, 1.0);
    }

    #[test]
    fn diag_equals_main_when_everything_is_informative() {
        let feats = split_oracle(theta(1.0, 0.2));
        let main = fit_and_evaluate(Protocol::Main, &feats, &quick(4)).unwrap();
        let diag = fit_and_evaluate(Protocol::Diag, &feats, &quick(4)).unwrap();
        assert_eq!(main.weights, diag.weights);
        assert_eq!((main.test_acc, main.ood_acc), (diag.test_acc, diag.ood_acc));
        assert_eq!(main.counts, diag.counts);
    }

    #[test]
    fn diag_inapplicable_without_informative_examples() {
        let feats = split_oracle(theta(0.0, 0.0));
        let err = fit_and_evaluate(Protocol::Diag, &feats, &quick(1)).unwrap_err();
        assert!(matches!(err, Error::ProtocolInapplicable(_)), "{err}");
    }

    #[test]
    fn diag_records_filtered_counts() {
        let feats = split_oracle(theta(0.5, 0.0));
        let run = fit_and_evaluate(Protocol::Diag, &feats, &quick(1)).unwrap();
        assert_eq!(run.counts.train.total, 600);
        assert_eq!(run.counts.train.used, feats.train.informative.iter().filter(|&&f| f).count());
        assert!(run.counts.train.used < 600);
    }

    fn tiny_backbone() -> BackboneParams<f32> {
        let config = BackboneConfig {
            n_layers: 1,
            width: 8,
            n_heads: 2,
            ..BackboneConfig::smoke()
        };
        model::init_backbone(&config, 3).unwrap()
    }

    fn examples(n: usize) -> Vec<LabeledExample> {
        let vocab = Vocabulary::build();
        let key = StreamKey::root(1).child("ex");
        (0..n).map(|i| gen_example(&mut key.child(i).rng(), &theta(0.5, 0.1), &vocab).unwrap()).collect()
    }

    #[test]
    fn features_are_reproducible_and_ignore_the_answer() {
        let params = tiny_backbone();
        let mut exs = examples(70);
        assert!(extract_features(&params, &[]).unwrap().is_empty());
        let a = extract_features(&params, &exs).unwrap();
        assert_eq!(a, extract_features(&params, &exs).unwrap());
        assert_eq!(a.rows.len(), 70 * 8);
        for e in exs.iter_mut() {
            e.tokens[63] = if e.tokens[63] == 5 { 6 } else { 5 };
        }
        assert_eq!(a.rows, extract_features(&params, &exs).unwrap().rows);
    }

    #[test]
    fn probing_leaves_backbone_untouched() {
        let params = tiny_backbone();
        let before = params.checksum();
        let exs = examples(120);
        let feats = SplitFeatures {
            train: extract_features(&params, &exs[..80]).unwrap(),
            test: extract_features(&params, &exs[80..100]).unwrap(),
            ood: extract_features(&params, &exs[100..]).unwrap(),
        };
        fit_and_evaluate(Protocol::Main, &feats, &quick(1)).unwrap();
        assert_eq!(params.checksum(), before);
    }
}
