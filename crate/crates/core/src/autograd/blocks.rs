//! Trainable ACM block on the tape.

use crate::error::Result;
use crate::fusion::{FusionWeights, NormOrder};
use crate::nn::BatchNormParams;
use crate::tensor::Tensor;

use super::graph::{Graph, ParamId, ParamSet, Var};

/// Parameter handles of an ACM block registered in a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct AcmParams {
    pub theta_z: ParamId,
    pub theta_x: ParamId,
    /// `(weights, bias)` for each of the three prior FC layers
    pub prior: Option<[(ParamId, ParamId); 3]>,
    pub box_scale: f32,
    /// trainable `(gamma, beta)` plus the fixed running statistics
    pub norm: Option<(ParamId, ParamId, BatchNormParams)>,
    pub norm_order: NormOrder,
}

impl AcmParams {
    /// Registers every tensor of `w` in `set` under `prefix`.
    pub fn register(set: &mut ParamSet, prefix: &str, w: &FusionWeights) -> Self {
        let theta_z = set.add(format!("{prefix}.theta_z"), w.theta_z.weights().clone());
        let theta_x = set.add(format!("{prefix}.theta_x"), w.theta_x.weights().clone());
        let prior = w.prior.as_ref().map(|pb| {
            let mut ids = [(theta_z, theta_z); 3];
            for (i, layer) in pb.layers.iter().enumerate() {
                ids[i] = (
                    set.add(format!("{prefix}.prior{i}.w"), layer.weights().clone()),
                    set.add(format!("{prefix}.prior{i}.b"), layer.bias().clone()),
                );
            }
            ids
        });
        let norm = w.norm.as_ref().map(|n| {
            (set.add(format!("{prefix}.bn.gamma"), n.gamma.clone()), set.add(format!("{prefix}.bn.beta"), n.beta.clone()), n.clone())
        });
        let box_scale = w.prior.as_ref().map_or(crate::fusion::DEFAULT_BOX_SCALE, |p| p.box_scale);
        AcmParams { theta_z, theta_x, prior, box_scale, norm, norm_order: w.norm_order }
    }
}

/// Records `ReLU?(norm?(θ_z∗z +_b θ_x∗x +_b prior(box)))` on the tape.
pub fn acm_block(
    g: &mut Graph,
    set: &ParamSet,
    p: &AcmParams,
    template: Var,
    search: Var,
    bbox: Option<(f32, f32)>,
    apply_relu: bool,
) -> Result<Var> {
    let tz = g.param(set, p.theta_z);
    let tx = g.param(set, p.theta_x);
    let z_term = g.conv2d(template, tz)?;
    let x_term = g.conv2d(search, tx)?;
    let mut out = g.add(z_term, x_term)?;
    match (&p.prior, bbox) {
        (Some(layers), Some((w, h))) => {
            if !(w > 0.0 && h > 0.0) {
                return Err(crate::Error::NonPositiveBox(w, h));
            }
            let b = g.input(Tensor::from_vec(vec![w / p.box_scale, h / p.box_scale])?);
            let vars = layers.map(|(wi, bi)| (g.param(set, wi), g.param(set, bi)));
            let emb = g.mlp3(b, vars)?;
            let width = g.value(emb).len();
            let emb = g.reshape(emb, vec![width, 1, 1])?;
            out = g.add(out, emb)?;
        }
        (Some(_), None) => return Err(crate::Error::MissingBox),
        (None, Some(_)) => return Err(crate::Error::InvalidArgument("box given but no prior branch is configured".into())),
        (None, None) => {}
    }
    let norm = |g: &mut Graph, x: Var| -> Result<Var> {
        match &p.norm {
            Some((gamma, beta, stats)) => {
                let (gv, bv) = (g.param(set, *gamma), g.param(set, *beta));
                g.batchnorm(x, gv, bv, stats)
            }
            None => Ok(x),
        }
    };
    if p.norm_order == NormOrder::BeforeRelu {
        out = norm(g, out)?;
    }
    if apply_relu {
        out = g.relu(out);
    }
    if p.norm_order == NormOrder::AfterRelu {
        out = norm(g, out)?;
    }
    Ok(out)
}
