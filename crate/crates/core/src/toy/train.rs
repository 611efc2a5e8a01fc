//! Sample-at-a-time SGD on the glyph grid task.

use std::fmt::Write as _;

use crate::autograd::{sgd_step, Graph};
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::tensor::Tensor;

use super::data::{gen_dataset, DatasetConfig, GridSample};
use super::model::{argmax, toy_evaluate, ToyArch, ToyModel};

/// Test data is drawn under `seed ^ TEST_SEED_SALT`.
pub const TEST_SEED_SALT: u64 = 0x7E57_7E57_7E57_7E57;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub classes: usize,
    pub glyph_size: usize,
    pub noise_std: f32,
    pub epochs: usize,
    pub lr: f32,
    pub ablate_index: bool,
    /// weight of the mean post-ReLU fused activity added to the loss
    pub activity_penalty: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 7,
            n_train: 2000,
            n_test: 1000,
            classes: 4,
            glyph_size: 7,
            noise_std: 0.1,
            epochs: 20,
            lr: 0.03,
            ablate_index: false,
            activity_penalty: 0.3,
        }
    }
}

impl TrainConfig {
    pub fn train_data(&self) -> DatasetConfig {
        DatasetConfig { seed: self.seed, n: self.n_train, classes: self.classes, glyph_size: self.glyph_size, noise_std: self.noise_std }
    }

    pub fn test_data(&self) -> DatasetConfig {
        DatasetConfig { seed: self.seed ^ TEST_SEED_SALT, n: self.n_test, ..self.train_data() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub curve: Vec<EpochStats>,
    pub test_accuracy: f64,
    pub model: ToyModel,
    pub test_set: Vec<GridSample>,
}

impl TrainOutcome {
    /// `epoch,train_loss,train_accuracy` with LF line endings.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,train_accuracy\n");
        for e in &self.curve {
            writeln!(s, "{},{},{}", e.epoch, e.train_loss, e.train_accuracy).expect("writing to a String");
        }
        s
    }
}

/// One pass over `samples` in a seeded order.
pub fn train_epoch(model: &mut ToyModel, samples: &[GridSample], cfg: &TrainConfig, epoch: usize) -> Result<EpochStats> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng::stream(cfg.seed, tag::SHUFFLE, epoch as u64));
    let (mut loss_sum, mut correct) = (0f64, 0usize);
    for i in order {
        let s = &samples[i];
        let mut g = Graph::new();
        let (fused, logits) = model.forward_graph(&mut g, &s.image, s.index)?;
        if argmax(g.value(logits).data()) == s.label {
            correct += 1;
        }
        let xent = g.softmax_xent(logits, s.label)?;
        loss_sum += g.scalar_f64(xent);
        let loss = if cfg.activity_penalty > 0.0 {
            let n = g.value(fused).len();
            let w = Tensor::full(g.value(fused).shape().to_vec(), cfg.activity_penalty / n as f32)?;
            let act = g.dot_const(fused, w)?;
            g.add(xent, act)?
        } else {
            xent
        };
        g.backward(loss, &mut model.params)?;
        sgd_step(&mut model.params, cfg.lr);
    }
    let n = samples.len().max(1) as f64;
    Ok(EpochStats { epoch, train_loss: loss_sum / n, train_accuracy: correct as f64 / n })
}

pub fn toy_train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    if !(cfg.lr > 0.0) {
        return Err(Error::InvalidArgument("learning rate must be positive".into()));
    }
    if cfg.n_test == 0 {
        return Err(Error::EmptyDataset);
    }
    let train = gen_dataset(&cfg.train_data())?;
    let test_set = gen_dataset(&cfg.test_data())?;
    let mut model = ToyModel::init(ToyArch::new(cfg.classes, cfg.glyph_size), cfg.seed)?;
    model.index_enabled = !cfg.ablate_index;
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        curve.push(train_epoch(&mut model, &train, cfg, epoch)?);
    }
    let test_accuracy = toy_evaluate(&model, &test_set)?;
    Ok(TrainOutcome { curve, test_accuracy, model, test_set })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig { n_train: 24, n_test: 8, epochs: 2, ..Default::default() }
    }

    #[test]
    fn curve_is_deterministic() {
        let a = toy_train(&tiny()).unwrap();
        let b = toy_train(&tiny()).unwrap();
        assert_eq!(a.curve_csv(), b.curve_csv());
        assert!(a.curve_csv().starts_with("epoch,train_loss,train_accuracy\n"));
        assert_eq!(a.curve.len(), 2);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(toy_train(&TrainConfig { lr: 0.0, ..tiny() }).is_err());
        assert!(toy_train(&TrainConfig { n_test: 0, ..tiny() }).is_err());
    }

    #[test]
    fn loss_drops_on_a_fixed_batch() {
        let cfg = TrainConfig { n_train: 16, epochs: 1, ..Default::default() };
        let data = gen_dataset(&cfg.train_data()).unwrap();
        let mut model = ToyModel::init(ToyArch::new(4, 7), cfg.seed).unwrap();
        let first = train_epoch(&mut model, &data, &cfg, 0).unwrap().train_loss;
        let mut last = first;
        for e in 1..8 {
            last = train_epoch(&mut model, &data, &cfg, e).unwrap().train_loss;
        }
        assert!(last < first, "{first} -> {last}");
    }
}
