//! Closed-vocabulary baseline: the same backbone with a one-hot softmax
//! head over the training classes. It can only ever name a class it was
//! trained on.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::data::{read_sequence, DatasetManifest};
use crate::eval::{report_from_outcomes, ActivityOutcome, CandidateMode, EvalError, EvalSplit};
use crate::nn::{adam_step, softmax_cross_entropy, AdamState, ModelConfig, NnError, RegressorModel};
use crate::par::{self, Exec};
use crate::tensor::Tensor;
use crate::trainer::{loss_gradients, Example, ExampleLoss, TrainError};
use crate::windowing::{segment, WindowConfig};

struct CrossEntropy<'a> {
    index: &'a BTreeMap<String, usize>,
}

impl ExampleLoss for CrossEntropy<'_> {
    fn loss(&self, output: &Tensor, example: &Example) -> Result<(f64, Tensor), NnError> {
        softmax_cross_entropy(output, self.index[&example.class_id])
    }
}

#[derive(Clone, Debug)]
pub struct SoftmaxClassifier {
    pub model: RegressorModel,
    /// Label of each output unit.
    pub classes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl SoftmaxClassifier {
    /// Trains on the examples' class ids with cross-entropy. `backbone`
    /// supplies everything but the output width, which becomes the number
    /// of distinct classes. Returns the mean loss of every epoch.
    pub fn fit(
        examples: &[Example],
        backbone: ModelConfig,
        cfg: &ClassifierConfig,
        exec: Exec,
    ) -> Result<(Self, Vec<f64>), TrainError> {
        if examples.is_empty() {
            return Err(TrainError::NoExamples);
        }
        let classes: Vec<String> = examples
            .iter()
            .map(|e| e.class_id.clone())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let index: BTreeMap<String, usize> = classes.iter().cloned().enumerate().map(|(i, c)| (c, i)).collect();
        let mut model = RegressorModel::new(
            ModelConfig {
                out_dim: classes.len(),
                ..backbone
            },
            cfg.seed,
        )?;
        let loss = CrossEntropy { index: &index };
        let mut adam = AdamState::new(cfg.lr);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut history = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            for idx in order.chunks(cfg.batch_size.max(1)) {
                let batch: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
                let (l, grads) = loss_gradients(&model, &batch, &loss, exec)?;
                sum += l * batch.len() as f64;
                let refs: Vec<&Tensor> = grads.named_tensors().into_iter().map(|(_, t)| t).collect();
                adam_step(&mut model.parameters_mut(), &refs, &mut adam)?;
            }
            history.push(sum / examples.len() as f64);
        }
        Ok((Self { model, classes }, history))
    }

    /// Arg-max class of the window-averaged logits; ties go to the first
    /// output unit.
    pub fn predict_windows(&self, windows: &[Tensor]) -> Result<String, NnError> {
        let mut mean = vec![0.0; self.classes.len()];
        for w in windows {
            for (m, v) in mean.iter_mut().zip(self.model.predict(w)?.data()) {
                *m += v;
            }
        }
        let best = mean
            .iter()
            .enumerate()
            .fold(0, |b, (i, v)| if *v > mean[b] { i } else { b });
        Ok(self.classes[best].clone())
    }
}

/// Scores the classifier on the held-out classes of `split`.
pub fn evaluate_classifier(
    clf: &SoftmaxClassifier,
    manifest: &DatasetManifest,
    split: &EvalSplit,
    cfg: &WindowConfig,
    exec: Exec,
) -> Result<crate::eval::EvalReport, EvalError> {
    let test: HashSet<&str> = split.test_class_ids.iter().map(String::as_str).collect();
    let records: Vec<_> = manifest
        .records
        .iter()
        .filter(|r| r.class_id.as_deref().is_some_and(|c| test.contains(c)))
        .collect();
    if records.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let outcomes = par::map(exec, &records, |r| -> Result<ActivityOutcome, EvalError> {
        let seq = read_sequence(manifest, &r.id)?.sequence;
        let windows: Vec<Tensor> = segment(&seq, cfg)
            .map_err(crate::decode::DecodeError::from)?
            .into_iter()
            .map(|w| w.samples)
            .collect();
        let predicted = clf
            .predict_windows(&windows)
            .map_err(crate::decode::DecodeError::from)?;
        Ok(ActivityOutcome {
            record_id: r.id.clone(),
            truth: r.class_id.clone().expect("filtered to labeled"),
            predicted,
            tie_set: Vec::new(),
            windows: windows.len(),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    Ok(report_from_outcomes(
        CandidateMode::Test,
        clf.classes.clone(),
        split.test_class_ids.clone(),
        outcomes,
    ))
}
