//! Index-conditioned glyph classifier.
//!
//! ```text
//! image ─ [gray; row; col] ─ conv─ReLU ─ conv─ReLU ─ θ_x∗f + θ_c∗[row; col] ─┐
//!                                                                         +_b ─ ReLU ─ avg pool ─ FC ─ logits
//! index ─ one-hot(4) ─ FC─ReLU─FC─ReLU─FC ─ P×1×1 ────────────────────────┘
//! ```
//!
//! The index embedding takes the place of the template term of the fusion:
//! a per-channel offset broadcast over the fused grid. Fixed coordinate
//! planes enter at the input and again at the fusion conv, since unpadded
//! convolutions are translation-equivariant and would otherwise carry no
//! notion of which grid cell a response came from. A per-channel offset can
//! only gate a channel on or off, so channels need their own spatial
//! preference for the index to select a quadrant.

use std::fs;
use std::path::Path;

use crate::autograd::{Graph, ParamId, ParamSet, Var};
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::tensor::{l1_map, Tensor};
use crate::tsr;

use super::data::GridSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyArch {
    pub classes: usize,
    pub glyph_size: usize,
    pub conv1: usize,
    pub conv2: usize,
    /// fused channel count `P`
    pub fused: usize,
    pub kernel: usize,
    pub fusion_kernel: usize,
    pub index_hidden: usize,
}

impl ToyArch {
    pub fn new(classes: usize, glyph_size: usize) -> Self {
        ToyArch { classes, glyph_size, conv1: 8, conv2: 8, fused: 32, kernel: 3, fusion_kernel: 3, index_hidden: 16 }
    }

    pub fn image_side(&self) -> usize {
        2 * self.glyph_size
    }

    /// Side of the backbone feature map.
    pub fn feature_side(&self) -> usize {
        self.image_side() + 2 - 2 * self.kernel
    }

    /// Side of the fused map.
    pub fn fused_side(&self) -> usize {
        self.feature_side() + 1 - self.fusion_kernel
    }

    fn validate(&self) -> Result<()> {
        if self.image_side() + 3 <= 2 * self.kernel + self.fusion_kernel {
            return Err(Error::InvalidArgument("kernels too large for the glyph grid".into()));
        }
        if self.fused_side() < 2 {
            return Err(Error::InvalidArgument("fused map must be at least 2x2".into()));
        }
        Ok(())
    }
}

pub const INPUT_CHANNELS: usize = 3;

#[derive(Debug, Clone)]
struct ToyIds {
    conv1: ParamId,
    bias1: ParamId,
    conv2: ParamId,
    bias2: ParamId,
    index: [(ParamId, ParamId); 3],
    theta_x: ParamId,
    theta_coord: ParamId,
    head: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    pub arch: ToyArch,
    pub params: ParamSet,
    /// When false the index embedding is replaced by zeros.
    pub index_enabled: bool,
    ids: ToyIds,
    coords: Tensor,
    feature_coords: Tensor,
}

/// Row and column coordinate planes in `[-1, 1]`.
fn coordinate_planes(side: usize) -> Vec<f32> {
    let scale = |i: usize| if side > 1 { 2.0 * i as f32 / (side - 1) as f32 - 1.0 } else { 0.0 };
    let mut out = Vec::with_capacity(2 * side * side);
    for r in 0..side {
        out.extend((0..side).map(|_| scale(r)));
    }
    for _ in 0..side {
        out.extend((0..side).map(scale));
    }
    out
}

impl ToyModel {
    /// He-uniform weights from the `INIT` stream of `seed`, zero biases.
    pub fn init(arch: ToyArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut r = rng::stream(seed, tag::INIT, 0);
        let mut params = ParamSet::new();
        let mut conv = |ps: &mut ParamSet, name: &str, shape: [usize; 4]| {
            let fan_in = shape[1] * shape[2] * shape[3];
            ps.add(name, Tensor::from_parts(shape.to_vec(), rng::he_uniform(&mut r, shape.iter().product(), fan_in)))
        };
        let (k, kf) = (arch.kernel, arch.fusion_kernel);
        let conv1 = conv(&mut params, "conv1.w", [arch.conv1, INPUT_CHANNELS, k, k]);
        let conv2 = conv(&mut params, "conv2.w", [arch.conv2, arch.conv1, k, k]);
        let theta_x = conv(&mut params, "fusion.theta_x", [arch.fused, arch.conv2, kf, kf]);
        let theta_coord = conv(&mut params, "fusion.theta_coord", [arch.fused, 2, kf, kf]);
        let bias1 = params.add("conv1.b", Tensor::from_parts(vec![arch.conv1, 1, 1], vec![0.0; arch.conv1]));
        let bias2 = params.add("conv2.b", Tensor::from_parts(vec![arch.conv2, 1, 1], vec![0.0; arch.conv2]));
        let mut fc = |ps: &mut ParamSet, name: &str, out: usize, inp: usize| {
            (
                ps.add(format!("{name}.w"), Tensor::from_parts(vec![out, inp], rng::he_uniform(&mut r, out * inp, inp))),
                ps.add(format!("{name}.b"), Tensor::from_parts(vec![out], vec![0.0; out])),
            )
        };
        let h = arch.index_hidden;
        let index = [fc(&mut params, "index.fc0", h, 4), fc(&mut params, "index.fc1", h, h), fc(&mut params, "index.fc2", arch.fused, h)];
        let head = fc(&mut params, "head", arch.classes, arch.fused);
        let coords = Tensor::from_parts(vec![2, arch.image_side(), arch.image_side()], coordinate_planes(arch.image_side()));
        let fs = arch.feature_side();
        let feature_coords = Tensor::from_parts(vec![2, fs, fs], coordinate_planes(fs));
        Ok(ToyModel {
            arch,
            params,
            index_enabled: true,
            ids: ToyIds { conv1, bias1, conv2, bias2, index, theta_x, theta_coord, head },
            coords,
            feature_coords,
        })
    }

    fn input_tensor(&self, image: &Tensor) -> Result<Tensor> {
        let side = self.arch.image_side();
        if image.shape() != [1, side, side] {
            return Err(Error::shapes(image.shape(), &[1, side, side]));
        }
        let mut data = image.data().to_vec();
        data.extend_from_slice(self.coords.data());
        Tensor::new(vec![INPUT_CHANNELS, side, side], data)
    }

    /// Records the forward pass; returns `(fused map, logits)`.
    pub fn forward_graph(&self, g: &mut Graph, image: &Tensor, index: usize) -> Result<(Var, Var)> {
        if index > 3 {
            return Err(Error::InvalidArgument(format!("index {index} outside 0..=3")));
        }
        let ps = &self.params;
        let ids = &self.ids;
        let x = g.input(self.input_tensor(image)?);

        let k1 = g.param(ps, ids.conv1);
        let b1 = g.param(ps, ids.bias1);
        let h = g.conv2d(x, k1)?;
        let h = g.add(h, b1)?;
        let h = g.relu(h);
        let k2 = g.param(ps, ids.conv2);
        let b2 = g.param(ps, ids.bias2);
        let h = g.conv2d(h, k2)?;
        let h = g.add(h, b2)?;
        let feature = g.relu(h);

        let tx = g.param(ps, ids.theta_x);
        let fused = g.conv2d(feature, tx)?;
        let fc_in = g.input(self.feature_coords.clone());
        let tc = g.param(ps, ids.theta_coord);
        let position = g.conv2d(fc_in, tc)?;
        let mut fused = g.add(fused, position)?;
        if self.index_enabled {
            let mut onehot = vec![0f32; 4];
            onehot[index] = 1.0;
            let iv = g.input(Tensor::from_vec(onehot)?);
            let layers = ids.index.map(|(w, b)| (g.param(ps, w), g.param(ps, b)));
            let emb = g.mlp3(iv, layers)?;
            let emb = g.reshape(emb, vec![self.arch.fused, 1, 1])?;
            fused = g.add(fused, emb)?;
        }
        let fused = g.relu(fused);
        let pooled = g.mean_spatial(fused)?;
        let (hw, hb) = (g.param(ps, ids.head.0), g.param(ps, ids.head.1));
        let logits = g.linear(pooled, hw, hb)?;
        Ok((fused, logits))
    }

    pub fn logits_for(&self, image: &Tensor, index: usize) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let (_, logits) = self.forward_graph(&mut g, image, index)?;
        Ok(g.value(logits).data().to_vec())
    }

    /// Post-ReLU fused map `P×S×S`.
    pub fn fused_map(&self, image: &Tensor, index: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let (fused, _) = self.forward_graph(&mut g, image, index)?;
        Ok(g.value(fused).clone())
    }

    /// Writes each parameter as `<name>.tsr` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for p in self.params.iter() {
            tsr::write(&p.value, dir.join(format!("{}.tsr", p.name)))?;
        }
        Ok(())
    }

    /// Replaces parameter values with those saved by [`ToyModel::save`].
    pub fn load(&mut self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let ids: Vec<_> = self.params.ids().collect();
        for id in ids {
            let t = tsr::read(dir.join(format!("{}.tsr", self.params.get(id).name)))?;
            self.params.set_value(id, t)?;
        }
        Ok(())
    }
}

/// Anything that maps a sample to class logits.
pub trait Classifier {
    fn logits(&self, sample: &GridSample) -> Result<Vec<f32>>;
}

impl Classifier for ToyModel {
    fn logits(&self, sample: &GridSample) -> Result<Vec<f32>> {
        self.logits_for(&sample.image, sample.index)
    }
}

pub fn toy_forward(model: &ToyModel, sample: &GridSample) -> Result<Vec<f32>> {
    model.logits(sample)
}

/// Index of the largest logit; ties go to the lowest class.
pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

pub fn toy_evaluate<C: Classifier + ?Sized>(model: &C, samples: &[GridSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0usize;
    for s in samples {
        if argmax(&model.logits(s)?) == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Accuracy after replacing each sample's query index by a uniformly
/// permuted one; labels are kept.
pub fn shuffled_index_accuracy(model: &ToyModel, samples: &[GridSample], seed: u64) -> Result<f64> {
    use rand::seq::SliceRandom;
    let mut indices: Vec<usize> = samples.iter().map(|s| s.index).collect();
    indices.shuffle(&mut rng::stream(seed, tag::SHUFFLE, u64::MAX));
    let shuffled: Vec<GridSample> = samples.iter().zip(indices).map(|(s, index)| GridSample { index, ..s.clone() }).collect();
    let mut correct = 0usize;
    for (orig, s) in samples.iter().zip(&shuffled) {
        if argmax(&model.logits_for(&s.image, s.index)?) == orig.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len().max(1) as f64)
}

/// Quadrant (row-major 0..=3) with the largest L1 response sum.
pub fn dominant_quadrant(fused: &Tensor) -> Result<usize> {
    let l1 = l1_map(fused)?;
    let (h, w) = (l1.shape()[0], l1.shape()[1]);
    let mut sums = [0f64; 4];
    for r in 0..h {
        for c in 0..w {
            let q = usize::from(r >= h / 2) * 2 + usize::from(c >= w / 2);
            sums[q] += l1.data()[r * w + c] as f64;
        }
    }
    let mut best = 0;
    for q in 1..4 {
        if sums[q] > sums[best] {
            best = q;
        }
    }
    Ok(best)
}

/// Fraction of samples whose fused response is strongest in the queried
/// quadrant.
pub fn locality_rate(model: &ToyModel, samples: &[GridSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut hits = 0usize;
    for s in samples {
        if dominant_quadrant(&model.fused_map(&s.image, s.index)?)? == s.index {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}
