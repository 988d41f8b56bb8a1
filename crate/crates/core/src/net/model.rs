use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::config::{AblationFlags, Branch, ConvSpec, InitScheme, McfrConfig, PoolSpec};
use crate::error::{Error, Result};
use crate::nn::{
    adaptive_maxpool, maxpool, maxpool_backward, relu, relu_backward, softmax_ce, Conv2d, Linear, ParamGroup,
    PoolIndex, Sgd,
};
use crate::snn::{SpikeTensor, SrmConvLayer, UeeNet};
use crate::tensor::Tensor;

/// Parameter gradients keyed by parameter name.
pub type Grads = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvStage {
    pub conv: Conv2d,
    pub pool: Option<PoolSpec>,
}

struct StageTrace {
    input: Tensor,
    pre: Tensor,
    pool: Option<PoolIndex>,
}

fn stages_forward(stages: &[ConvStage], x: &Tensor) -> Result<Tensor> {
    let mut h = x.clone();
    for s in stages {
        h = relu(&s.conv.forward(&h)?);
        if let Some(p) = s.pool {
            h = maxpool(&h, p.kernel, p.stride)?.0;
        }
    }
    Ok(h)
}

fn stages_traced(stages: &[ConvStage], x: &Tensor) -> Result<(Tensor, Vec<StageTrace>)> {
    let mut h = x.clone();
    let mut traces = Vec::with_capacity(stages.len());
    for s in stages {
        let pre = s.conv.forward(&h)?;
        let mut out = relu(&pre);
        let mut pool = None;
        if let Some(p) = s.pool {
            let (o, idx) = maxpool(&out, p.kernel, p.stride)?;
            out = o;
            pool = Some(idx);
        }
        traces.push(StageTrace { input: h, pre, pool });
        h = out;
    }
    Ok((h, traces))
}

fn stages_backward(
    stages: &[ConvStage],
    traces: &[StageTrace],
    grad_out: Tensor,
    prefix: &str,
    grads: &mut Grads,
) -> Result<Tensor> {
    let mut g = grad_out;
    for (i, (s, t)) in stages.iter().zip(traces).enumerate().rev() {
        if let Some(idx) = &t.pool {
            g = maxpool_backward(idx, &g);
        }
        g = relu_backward(&t.pre, &g);
        let cg = s.conv.backward(&t.input, &g)?;
        grads.insert(format!("{prefix}.{i}.weight"), cg.weight);
        grads.insert(format!("{prefix}.{i}.bias"), cg.bias);
        g = cg.input;
    }
    Ok(g)
}

/// A candidate crop: the 7-channel assembled input and, when the event
/// branch is enabled, the spike tensor of the same crop.
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub x7: Tensor,
    pub spikes: Option<SpikeTensor>,
}

/// Masked input plus the (fixed) event-branch features.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub x7: Tensor,
    pub f_uee: Option<Tensor>,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainSample<'a> {
    pub input: &'a Prepared,
    /// 1 for target, 0 for background.
    pub label: usize,
    pub domain: usize,
}

#[derive(Debug, Clone)]
pub struct Backward {
    pub loss: f64,
    pub logits: Vec<f64>,
    pub grads: Grads,
    /// Gradient with respect to the masked 7-channel input.
    pub input: Tensor,
}

/// Three-branch classifier with `k` domain heads.
#[derive(Debug, Clone, PartialEq)]
pub struct McfrModel {
    config: McfrConfig,
    pub tau: Option<Conv2d>,
    pub cfe: Option<Vec<ConvStage>>,
    pub uer: Option<Vec<ConvStage>>,
    pub uee: Option<UeeNet>,
    pub fusion: Conv2d,
    pub fc4: Linear,
    pub fc5: Linear,
    pub fc6: Vec<Linear>,
}

macro_rules! visit_params {
    ($model:expr, $f:expr, $iter:ident $(, $m:ident)?) => {{
        let model = $model;
        let f = $f;
        if let Some(t) = & $($m)? model.tau {
            f("tau.weight", ParamGroup::Conv, & $($m)? t.weight);
            f("tau.bias", ParamGroup::Conv, & $($m)? t.bias);
        }
        for (prefix, stages) in [("cfe", & $($m)? model.cfe), ("uer", & $($m)? model.uer)] {
            if let Some(stages) = stages {
                for (i, s) in stages.$iter().enumerate() {
                    f(&format!("{prefix}.{i}.weight"), ParamGroup::Conv, & $($m)? s.conv.weight);
                    f(&format!("{prefix}.{i}.bias"), ParamGroup::Conv, & $($m)? s.conv.bias);
                }
            }
        }
        if let Some(u) = & $($m)? model.uee {
            for (i, l) in u.layers.$iter().enumerate() {
                f(&format!("uee.{i}.weight"), ParamGroup::Frozen, & $($m)? l.conv.weight);
            }
        }
        f("fusion.weight", ParamGroup::Conv, & $($m)? model.fusion.weight);
        f("fusion.bias", ParamGroup::Conv, & $($m)? model.fusion.bias);
        f("fc4.weight", ParamGroup::Fc, & $($m)? model.fc4.weight);
        f("fc4.bias", ParamGroup::Fc, & $($m)? model.fc4.bias);
        f("fc5.weight", ParamGroup::Fc, & $($m)? model.fc5.weight);
        f("fc5.bias", ParamGroup::Fc, & $($m)? model.fc5.bias);
        for (k, l) in model.fc6.$iter().enumerate() {
            f(&format!("fc6.{k}.weight"), ParamGroup::Fc6, & $($m)? l.weight);
            f(&format!("fc6.{k}.bias"), ParamGroup::Fc6, & $($m)? l.bias);
        }
    }};
}

fn conv_std(init: InitScheme, fan_in: usize) -> f64 {
    match init {
        InitScheme::Gaussian { conv_std, .. } => conv_std,
        InitScheme::He => (2.0 / fan_in as f64).sqrt(),
    }
}

fn fc_std(init: InitScheme, fan_in: usize) -> f64 {
    match init {
        InitScheme::Gaussian { fc_std, .. } => fc_std,
        InitScheme::He => (2.0 / fan_in as f64).sqrt(),
    }
}

fn build_stages(specs: &[ConvSpec], in_ch: usize, init: InitScheme, rng: &mut ChaCha8Rng) -> Vec<ConvStage> {
    let mut c = in_ch;
    specs
        .iter()
        .map(|s| {
            let std = conv_std(init, c * s.kernel * s.kernel);
            let conv = Conv2d::random(c, s.out_channels, s.kernel, s.stride, s.pad, std, rng);
            c = s.out_channels;
            ConvStage { conv, pool: s.pool }
        })
        .collect()
}

fn relu_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

fn relu_vec_backward(pre: &[f64], g: &[f64]) -> Vec<f64> {
    pre.iter().zip(g).map(|(&p, &g)| if p > 0.0 { g } else { 0.0 }).collect()
}

impl McfrModel {
    /// Randomly initialized model; the seed fixes every weight.
    pub fn new(config: McfrConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = config.init;
        let a = config.ablation;
        let tau = a.use_cfe.then(|| Conv2d::random(7, 3, 1, 1, 0, conv_std(init, 7), &mut rng));
        let cfe = a.use_cfe.then(|| build_stages(&config.cfe, 3, init, &mut rng));
        let uer = a.use_uer.then(|| build_stages(&config.uer, 3, init, &mut rng));
        let uee = if a.use_uee {
            let mut c = 2;
            let mut layers = Vec::with_capacity(config.uee.layers.len());
            let last = config.uee.layers.len() - 1;
            for (i, l) in config.uee.layers.iter().enumerate() {
                let gain = if i == last {
                    config.uee.readout_gain
                } else {
                    config.uee.weight_gain
                };
                let std = gain / ((c * l.kernel * l.kernel) as f64).sqrt();
                layers.push(SrmConvLayer::random(
                    c,
                    l.out_channels,
                    l.kernel,
                    l.stride,
                    config.uee.params,
                    std,
                    &mut rng,
                )?);
                c = l.out_channels;
            }
            Some(UeeNet::new(layers)?)
        } else {
            None
        };
        let cin = config.fusion_in_channels();
        let fusion = Conv2d::random(cin, config.fusion_channels, 1, 1, 0, conv_std(init, cin), &mut rng);
        let flat = config.feature_len()?;
        let [d4, d5] = config.fc_dims;
        let fc4 = Linear::random(flat, d4, fc_std(init, flat), &mut rng);
        let fc5 = Linear::random(d4, d5, fc_std(init, d4), &mut rng);
        let fc6 = (0..config.num_domains)
            .map(|_| Linear::random(d5, 2, fc_std(init, d5), &mut rng))
            .collect();
        Ok(McfrModel {
            config,
            tau,
            cfe,
            uer,
            uee,
            fusion,
            fc4,
            fc5,
            fc6,
        })
    }

    pub fn config(&self) -> &McfrConfig {
        &self.config
    }

    pub fn num_domains(&self) -> usize {
        self.fc6.len()
    }

    pub fn fingerprint(&self) -> String {
        self.config.fingerprint()
    }

    /// Visits every parameter with its name and optimizer group.
    pub fn for_each_param(&self, mut f: impl FnMut(&str, ParamGroup, &Tensor)) {
        visit_params!(self, &mut f, iter);
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, ParamGroup, &mut Tensor)) {
        visit_params!(self, &mut f, iter_mut, mut);
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each_param(|n, _, _| names.push(n.to_string()));
        names
    }

    /// SHA-256 over the bit patterns of the selected parameters.
    pub fn param_digest(&self, select: impl Fn(&str, ParamGroup) -> bool) -> String {
        let mut h = Sha256::new();
        self.for_each_param(|name, group, t| {
            if select(name, group) {
                h.update(name.as_bytes());
                for v in t.data() {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        });
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn check_domain(&self, domain: usize) -> Result<()> {
        if domain >= self.fc6.len() {
            return Err(Error::Invalid(format!(
                "domain {domain} out of range for {} branches",
                self.fc6.len()
            )));
        }
        Ok(())
    }

    /// The learned 1x1 map from the 7 input channels to 3.
    pub fn channel_transform(&self, x7: &Tensor) -> Result<Tensor> {
        let tau = self.tau.as_ref().ok_or_else(|| Error::Config("shared branch disabled".into()))?;
        if x7.chw()?.0 != 7 {
            return Err(Error::Shape(format!("expected 7 input channels, got {:?}", x7.shape())));
        }
        tau.forward(x7)
    }

    pub fn cfe_forward(&self, x3: &Tensor) -> Result<Tensor> {
        let cfe = self.cfe.as_ref().ok_or_else(|| Error::Config("shared branch disabled".into()))?;
        stages_forward(cfe, x3)
    }

    pub fn uer_forward(&self, rgb: &Tensor) -> Result<Tensor> {
        let uer = self.uer.as_ref().ok_or_else(|| Error::Config("texture branch disabled".into()))?;
        let out = stages_forward(uer, rgb)?;
        let side = self.config.feature_side()?;
        let (_, h, w) = out.chw()?;
        if (h, w) != (side, side) {
            return Err(Error::Shape(format!("texture features are {h}x{w}, expected {side}x{side}")));
        }
        Ok(out)
    }

    /// Event-branch features pooled onto the shared feature grid.
    pub fn uee_features(&self, spikes: &SpikeTensor) -> Result<Tensor> {
        let uee = self.uee.as_ref().ok_or_else(|| Error::Config("event branch disabled".into()))?;
        let side = self.config.feature_side()?;
        Ok(adaptive_maxpool(&uee.forward(spikes)?, side, side)?.0)
    }

    /// Applies the input mask and runs the fixed event branch.
    pub fn prepare(&self, input: &ModelInput) -> Result<Prepared> {
        let crop = self.config.input_crop;
        if input.x7.shape() != [7, crop, crop] {
            return Err(Error::Shape(format!(
                "expected input (7, {crop}, {crop}), got {:?}",
                input.x7.shape()
            )));
        }
        let a = self.config.ablation;
        let mut x7 = input.x7.clone();
        a.input_mask().apply(&mut x7);
        let f_uee = match &self.uee {
            Some(_) => {
                let spikes = input
                    .spikes
                    .as_ref()
                    .ok_or_else(|| Error::Invalid("event branch needs a spike tensor".into()))?;
                let [c, h, w, _] = spikes.shape();
                if (c, h, w) != (2, crop, crop) {
                    return Err(Error::Shape(format!("expected spikes (2, {crop}, {crop}, T), got {:?}", spikes.shape())));
                }
                let mut f = self.uee_features(spikes)?;
                if a.rgb_only {
                    f.scale(0.0);
                }
                Some(f)
            }
            None => None,
        };
        Ok(Prepared { x7, f_uee })
    }

    fn rgb_of(x7: &Tensor) -> Result<Tensor> {
        let (_, h, w) = x7.chw()?;
        Tensor::from_vec(&[3, h, w], x7.data()[..3 * h * w].to_vec())
    }

    fn branch_outputs(&self, p: &Prepared) -> Result<Vec<Tensor>> {
        let mut parts = Vec::with_capacity(3);
        for (branch, _) in self.config.fusion_inputs() {
            parts.push(match branch {
                Branch::Uee => p
                    .f_uee
                    .clone()
                    .ok_or_else(|| Error::Invalid("missing event-branch features".into()))?,
                Branch::Cfe => self.cfe_forward(&self.channel_transform(&p.x7)?)?,
                Branch::Uer => self.uer_forward(&Self::rgb_of(&p.x7)?)?,
            });
        }
        Ok(parts)
    }

    /// Concatenates `UEE | CFE | UER` and applies the 1x1 fusion conv.
    pub fn fuse(&self, parts: &[&Tensor]) -> Result<Vec<f64>> {
        let cat = Tensor::concat_channels(parts)?;
        Ok(self.fusion.forward(&cat)?.into_data())
    }

    /// Flattened fused features; everything before fc4.
    pub fn features(&self, p: &Prepared) -> Result<Vec<f64>> {
        let parts = self.branch_outputs(p)?;
        self.fuse(&parts.iter().collect::<Vec<_>>())
    }

    /// fc4 -> ReLU -> fc5 -> ReLU -> fc6[domain].
    pub fn head(&self, features: &[f64], domain: usize) -> Result<Vec<f64>> {
        self.check_domain(domain)?;
        let h4 = relu_vec(&self.fc4.forward(features)?);
        let h5 = relu_vec(&self.fc5.forward(&h4)?);
        self.fc6[domain].forward(&h5)
    }

    pub fn forward(&self, p: &Prepared, domain: usize) -> Result<Vec<f64>> {
        self.head(&self.features(p)?, domain)
    }

    /// Cross-entropy and gradients of the head only.
    pub fn head_backward(&self, features: &[f64], label: usize, domain: usize) -> Result<(f64, Grads, Vec<f64>)> {
        self.check_domain(domain)?;
        let a4 = self.fc4.forward(features)?;
        let h4 = relu_vec(&a4);
        let a5 = self.fc5.forward(&h4)?;
        let h5 = relu_vec(&a5);
        let logits = self.fc6[domain].forward(&h5)?;
        let (loss, g) = softmax_ce(&logits, label)?;
        let mut grads = Grads::new();
        let g6 = self.fc6[domain].backward(&h5, &g);
        grads.insert(format!("fc6.{domain}.weight"), g6.weight);
        grads.insert(format!("fc6.{domain}.bias"), g6.bias);
        let g5 = self.fc5.backward(&h4, &relu_vec_backward(&a5, &g6.input));
        grads.insert("fc5.weight".into(), g5.weight);
        grads.insert("fc5.bias".into(), g5.bias);
        let g4 = self.fc4.backward(features, &relu_vec_backward(&a4, &g5.input));
        grads.insert("fc4.weight".into(), g4.weight);
        grads.insert("fc4.bias".into(), g4.bias);
        Ok((loss, grads, g4.input))
    }

    /// Loss and gradients of every trainable parameter for one sample; the
    /// event-branch features are treated as constants.
    pub fn backward(&self, p: &Prepared, label: usize, domain: usize) -> Result<Backward> {
        self.check_domain(domain)?;
        let inputs = self.config.fusion_inputs();
        let mut parts = Vec::with_capacity(inputs.len());
        let mut cfe_trace = None;
        let mut uer_trace = None;
        for &(branch, _) in &inputs {
            parts.push(match branch {
                Branch::Uee => p
                    .f_uee
                    .clone()
                    .ok_or_else(|| Error::Invalid("missing event-branch features".into()))?,
                Branch::Cfe => {
                    let t = self.channel_transform(&p.x7)?;
                    let (out, tr) = stages_traced(self.cfe.as_ref().expect("enabled"), &t)?;
                    cfe_trace = Some(tr);
                    out
                }
                Branch::Uer => {
                    let (out, tr) = stages_traced(self.uer.as_ref().expect("enabled"), &Self::rgb_of(&p.x7)?)?;
                    uer_trace = Some(tr);
                    out
                }
            });
        }
        let cat = Tensor::concat_channels(&parts.iter().collect::<Vec<_>>())?;
        let fused = self.fusion.forward(&cat)?;
        let fused_shape = fused.shape().to_vec();
        let features = fused.into_data();
        let (loss, mut grads, g_feat) = self.head_backward(&features, label, domain)?;
        let logits = self.head(&features, domain)?;

        let gf = self.fusion.backward(&cat, &Tensor::from_vec(&fused_shape, g_feat)?)?;
        grads.insert("fusion.weight".into(), gf.weight);
        grads.insert("fusion.bias".into(), gf.bias);
        let widths: Vec<usize> = inputs.iter().map(|(_, c)| *c).collect();
        let split = gf.input.split_channels(&widths)?;
        let (c7, h, w) = p.x7.chw()?;
        let mut g_x7 = Tensor::zeros(&[c7, h, w]);
        for (&(branch, _), g) in inputs.iter().zip(split) {
            match branch {
                Branch::Uee => {}
                Branch::Cfe => {
                    let g3 = stages_backward(
                        self.cfe.as_ref().expect("enabled"),
                        cfe_trace.as_ref().expect("traced"),
                        g,
                        "cfe",
                        &mut grads,
                    )?;
                    let tau = self.tau.as_ref().expect("enabled");
                    let gt = tau.backward(&p.x7, &g3)?;
                    grads.insert("tau.weight".into(), gt.weight);
                    grads.insert("tau.bias".into(), gt.bias);
                    g_x7.axpy(1.0, &gt.input);
                }
                Branch::Uer => {
                    let g_rgb = stages_backward(
                        self.uer.as_ref().expect("enabled"),
                        uer_trace.as_ref().expect("traced"),
                        g,
                        "uer",
                        &mut grads,
                    )?;
                    g_x7.data_mut()[..3 * h * w]
                        .iter_mut()
                        .zip(g_rgb.data())
                        .for_each(|(a, b)| *a += b);
                }
            }
        }
        Ok(Backward {
            loss,
            logits,
            grads,
            input: g_x7,
        })
    }

    /// Applies an SGD step to every parameter that has a gradient; frozen
    /// parameters and parameters without gradients (including unused fc6
    /// branches) are left bit-identical.
    pub fn apply_grads(&mut self, grads: &Grads, opt: &mut Sgd) {
        self.for_each_param_mut(|name, group, param| {
            if let Some(g) = grads.get(name) {
                opt.step(name, group, param, g);
            }
        });
    }

    /// Mean cross-entropy over the batch followed by one SGD step.
    pub fn train_step(&mut self, batch: &[TrainSample], opt: &mut Sgd) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty training batch".into()));
        }
        let results: Vec<Backward> = batch
            .par_iter()
            .map(|s| self.backward(s.input, s.label, s.domain))
            .collect::<Result<_>>()?;
        let (loss, grads) = average(results.into_iter().map(|b| (b.loss, b.grads)), batch.len());
        self.apply_grads(&grads, opt);
        Ok(loss)
    }

    /// Head-only step on precomputed features; every convolution stays
    /// fixed.
    pub fn train_head_step(&mut self, batch: &[(&[f64], usize)], domain: usize, opt: &mut Sgd) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty training batch".into()));
        }
        let results: Vec<(f64, Grads, Vec<f64>)> = batch
            .par_iter()
            .map(|(f, label)| self.head_backward(f, *label, domain))
            .collect::<Result<_>>()?;
        let (loss, grads) = average(results.into_iter().map(|(l, g, _)| (l, g)), batch.len());
        self.apply_grads(&grads, opt);
        Ok(loss)
    }

    /// Positive-class logit minus negative-class logit for each feature
    /// vector.
    pub fn head_scores(&self, features: &[Vec<f64>], domain: usize) -> Result<Vec<f64>> {
        features
            .par_iter()
            .map(|f| self.head(f, domain).map(|l| l[1] - l[0]))
            .collect()
    }

    /// Replaces the domain heads with `k` freshly initialized branches.
    pub fn reset_domains(&mut self, k: usize, seed: u64) -> Result<()> {
        if k == 0 {
            return Err(Error::Config("need at least one domain".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d5 = self.config.fc_dims[1];
        let std = fc_std(self.config.init, d5);
        self.fc6 = (0..k).map(|_| Linear::random(d5, 2, std, &mut rng)).collect();
        self.config.num_domains = k;
        Ok(())
    }

    /// Derives a reduced variant sharing this model's weights: disabled
    /// branches are dropped and the fusion conv loses their input columns.
    pub fn ablate(&self, flags: AblationFlags) -> Result<McfrModel> {
        let old = self.config.ablation;
        if (flags.use_uee && !old.use_uee) || (flags.use_cfe && !old.use_cfe) || (flags.use_uer && !old.use_uer) {
            return Err(Error::Config("cannot re-enable a branch the model was built without".into()));
        }
        let config = self.config.clone().with_ablation(flags);
        config.validate()?;
        let old_inputs = self.config.fusion_inputs();
        let keep: Vec<bool> = old_inputs
            .iter()
            .map(|(b, _)| config.fusion_inputs().iter().any(|(nb, _)| nb == b))
            .collect();
        let cin_old = self.config.fusion_in_channels();
        let cin = config.fusion_in_channels();
        let f = self.fusion.out_channels();
        let mut w = Vec::with_capacity(f * cin);
        for o in 0..f {
            let row = &self.fusion.weight.data()[o * cin_old..(o + 1) * cin_old];
            let mut start = 0;
            for ((_, c), &k) in old_inputs.iter().zip(&keep) {
                if k {
                    w.extend_from_slice(&row[start..start + c]);
                }
                start += c;
            }
        }
        let fusion = Conv2d::new(
            Tensor::from_vec(&[f, cin, 1, 1], w)?,
            self.fusion.bias.clone(),
            1,
            0,
        )?;
        Ok(McfrModel {
            config,
            tau: if flags.use_cfe { self.tau.clone() } else { None },
            cfe: if flags.use_cfe { self.cfe.clone() } else { None },
            uer: if flags.use_uer { self.uer.clone() } else { None },
            uee: if flags.use_uee { self.uee.clone() } else { None },
            fusion,
            fc4: self.fc4.clone(),
            fc5: self.fc5.clone(),
            fc6: self.fc6.clone(),
        })
    }
}

fn average(items: impl Iterator<Item = (f64, Grads)>, n: usize) -> (f64, Grads) {
    let mut loss = 0.0;
    let mut sum = Grads::new();
    for (l, grads) in items {
        loss += l;
        for (name, g) in grads {
            match sum.get_mut(&name) {
                Some(acc) => acc.axpy(1.0, &g),
                None => {
                    sum.insert(name, g);
                }
            }
        }
    }
    let inv = 1.0 / n as f64;
    sum.values_mut().for_each(|g| g.scale(inv));
    (loss * inv, sum)
}
