//! The gap-filled U-Net with hierarchical displacement heads.
//!
//! Encoder: two levels of two valid 3x3x3 convolutions (each followed by batch norm
//! and ReLU) with 2x2x2 max pooling, then a two-convolution bottleneck. Decoder:
//! transposed convolution, concatenation with the centre-cropped skip path, and two
//! convolutions, twice. Gap-fill blocks put two extra convolutions on each skip path.
//! Heads are 1x1x1 convolutions at the 9, 14 and 24 voxel feature maps for a 64 voxel
//! input.

mod plan;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::netcore::checkpoint::{Checkpoint, Record, RecordData};
use crate::netcore::{he_normal, seeded_rng, BatchStats, BnMode, Parameter, Real, Tape, Tensor, Var, BN_MOMENTUM};
use crate::volume::{difference_map, gradient_magnitude, Volume3};
use crate::{Error, Result};

pub use plan::{plan_sizes, SizePlan};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputChannel {
    Subject,
    Difference,
    Gradient,
    Template,
    TemplateGradient,
}

impl InputChannel {
    pub fn name(self) -> &'static str {
        match self {
            InputChannel::Subject => "subject",
            InputChannel::Difference => "difference",
            InputChannel::Gradient => "gradient",
            InputChannel::Template => "template",
            InputChannel::TemplateGradient => "template_gradient",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "subject" => InputChannel::Subject,
            "difference" => InputChannel::Difference,
            "gradient" => InputChannel::Gradient,
            "template" => InputChannel::Template,
            "template_gradient" => InputChannel::TemplateGradient,
            _ => return Err(Error::Config(format!("unknown input channel `{s}`"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// One decoder whose heads emit all three components.
    Shared3,
    /// Three decoder branches on a shared encoder, one per displacement component.
    PerAxis,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub input_channels: Vec<InputChannel>,
    pub gap_fill: bool,
    pub hierarchical: bool,
    pub head_mode: HeadMode,
    /// Start every head at zero so an untrained model predicts the identity.
    #[serde(default = "zero_heads_default")]
    pub zero_init_heads: bool,
    pub seed: u64,
}

fn zero_heads_default() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            input_channels: vec![InputChannel::Subject, InputChannel::Difference, InputChannel::Gradient],
            gap_fill: true,
            hierarchical: true,
            head_mode: HeadMode::Shared3,
            zero_init_heads: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be at least 1".into()));
        }
        if self.input_channels.is_empty() {
            return Err(Error::Config("input_channels must not be empty".into()));
        }
        Ok(())
    }

    /// Channel widths of the three resolution levels.
    pub fn widths(&self) -> (usize, usize, usize) {
        let c = self.base_channels;
        (c, 2 * c, 4 * c)
    }

    fn branches(&self) -> usize {
        match self.head_mode {
            HeadMode::Shared3 => 1,
            HeadMode::PerAxis => 3,
        }
    }
}

/// Training mode normalises with batch statistics and makes parameters trainable;
/// evaluation mode uses running statistics and constant parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct ConvBn {
    conv: ConvLayer,
    gamma: usize,
    beta: usize,
    bn: usize,
}

#[derive(Clone, Debug)]
struct Branch {
    up2: ConvLayer,
    gap2: Option<[ConvBn; 2]>,
    dec2: [ConvBn; 2],
    head_mid: Option<ConvLayer>,
    up1: ConvLayer,
    gap1: Option<[ConvBn; 2]>,
    dec1: [ConvBn; 2],
    head_high: ConvLayer,
    head_low: Option<ConvLayer>,
    params: Range<usize>,
    bns: Range<usize>,
}

#[derive(Clone, Debug)]
struct Layout {
    enc1: [ConvBn; 2],
    enc2: [ConvBn; 2],
    bottleneck: [ConvBn; 2],
    branches: Vec<Branch>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Node handles for one forward pass.
#[derive(Clone, Debug)]
pub struct Outputs {
    /// `(B, 3, h, h, h)` displacement at full resolution.
    pub high: Var,
    /// Half-resolution displacement, present when hierarchical supervision is on.
    pub mid: Option<Var>,
    /// Quarter-resolution displacement, present when hierarchical supervision is on.
    pub low: Option<Var>,
    /// Leaves holding each parameter, in [`Model::params`] order.
    pub param_vars: Vec<Var>,
    /// Training-mode batch statistics per batch-norm layer.
    pub stats: Vec<BatchStats>,
}

/// Prediction tensors detached from any tape.
#[derive(Clone, Debug)]
pub struct HierarchicalOutput<T: Real> {
    pub high: Tensor<T>,
    pub mid: Option<Tensor<T>>,
    pub low: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    config: ModelConfig,
    params: Vec<Parameter<T>>,
    running: Vec<Option<RunningStats>>,
    bn_names: Vec<String>,
    layout: Layout,
}

struct Builder<T: Real> {
    params: Vec<Parameter<T>>,
    bn_names: Vec<String>,
    rng: rand_chacha::ChaCha8Rng,
}

impl<T: Real> Builder<T> {
    fn add(&mut self, name: String, value: Tensor<T>) -> usize {
        self.params.push(Parameter::new(name, value));
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, shape: [usize; 5], fan_in: usize, cout: usize) -> ConvLayer {
        let w = he_normal(shape, fan_in, &mut self.rng);
        let w = self.add(format!("{name}.w"), w);
        let b = self.add(format!("{name}.b"), Tensor::zeros([1, cout, 1, 1, 1]));
        ConvLayer { w, b }
    }

    fn conv3(&mut self, name: &str, cin: usize, cout: usize) -> ConvLayer {
        self.conv(name, [cout, cin, 3, 3, 3], 27 * cin, cout)
    }

    fn conv1(&mut self, name: &str, cin: usize, cout: usize) -> ConvLayer {
        self.conv(name, [cout, cin, 1, 1, 1], cin, cout)
    }

    fn tconv(&mut self, name: &str, cin: usize, cout: usize) -> ConvLayer {
        self.conv(name, [cin, cout, 2, 2, 2], cin, cout)
    }

    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize) -> ConvBn {
        let conv = self.conv3(name, cin, cout);
        let gamma = self.add(format!("{name}.gamma"), Tensor::full([1, cout, 1, 1, 1], T::one()));
        let beta = self.add(format!("{name}.beta"), Tensor::zeros([1, cout, 1, 1, 1]));
        self.bn_names.push(name.to_string());
        ConvBn { conv, gamma, beta, bn: self.bn_names.len() - 1 }
    }

    fn pair(&mut self, name: &str, cin: usize, cout: usize) -> [ConvBn; 2] {
        [self.conv_bn(&format!("{name}.conv0"), cin, cout), self.conv_bn(&format!("{name}.conv1"), cout, cout)]
    }
}

/// Closed-form trainable parameter count for a configuration.
pub fn parameter_count(config: &ModelConfig) -> usize {
    let conv3 = |i: usize, o: usize| 27 * i * o + o + 2 * o;
    let (c1, c2, c3) = config.widths();
    let cin = config.input_channels.len();
    let trunk = conv3(cin, c1) + conv3(c1, c1) + conv3(c1, c2) + conv3(c2, c2) + conv3(c2, c3) + conv3(c3, c3);
    let k = 3 / config.branches();
    let head = |i: usize| i * k + k;
    let (s2, s1) = if config.gap_fill { (c3, c2) } else { (c2, c1) };
    let mut branch = 8 * c3 * c2 + c2 + conv3(s2 + c2, c2) + conv3(c2, c2);
    branch += 8 * c2 * c1 + c1 + conv3(s1 + c1, c1) + conv3(c1, c1) + head(c1);
    if config.gap_fill {
        branch += conv3(c2, c3) + conv3(c3, c3) + conv3(c1, c2) + conv3(c2, c2);
    }
    if config.hierarchical {
        branch += head(c2) + head(c3);
    }
    trunk + config.branches() * branch
}

impl<T: Real> Model<T> {
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        plan_sizes(64)?;
        let (c1, c2, c3) = config.widths();
        let mut b = Builder { params: Vec::new(), bn_names: Vec::new(), rng: seeded_rng(config.seed) };
        let enc1 = b.pair("enc1", config.input_channels.len(), c1);
        let enc2 = b.pair("enc2", c1, c2);
        let bottleneck = b.pair("bottleneck", c2, c3);
        let nbr = config.branches();
        let k = 3 / nbr;
        let mut branches = Vec::new();
        for i in 0..nbr {
            let p = if nbr == 1 { String::new() } else { format!("branch{i}.") };
            let (p0, b0) = (b.params.len(), b.bn_names.len());
            let up2 = b.tconv(&format!("{p}up2"), c3, c2);
            let gap2 = config.gap_fill.then(|| b.pair(&format!("{p}gap2"), c2, c3));
            let s2 = if config.gap_fill { c3 } else { c2 };
            let dec2 = b.pair(&format!("{p}dec2"), s2 + c2, c2);
            let head_mid = config.hierarchical.then(|| b.conv1(&format!("{p}head_mid"), c2, k));
            let up1 = b.tconv(&format!("{p}up1"), c2, c1);
            let gap1 = config.gap_fill.then(|| b.pair(&format!("{p}gap1"), c1, c2));
            let s1 = if config.gap_fill { c2 } else { c1 };
            let dec1 = b.pair(&format!("{p}dec1"), s1 + c1, c1);
            let head_high = b.conv1(&format!("{p}head_high"), c1, k);
            let head_low = config.hierarchical.then(|| b.conv1(&format!("{p}head_low"), c3, k));
            branches.push(Branch {
                up2,
                gap2,
                dec2,
                head_mid,
                up1,
                gap1,
                dec1,
                head_high,
                head_low,
                params: p0..b.params.len(),
                bns: b0..b.bn_names.len(),
            });
        }
        let running = vec![None; b.bn_names.len()];
        let zero = config.zero_init_heads;
        let mut model = Self {
            config,
            params: b.params,
            running,
            bn_names: b.bn_names,
            layout: Layout { enc1, enc2, bottleneck, branches },
        };
        if zero {
            model.zero_heads();
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn running_stats(&self) -> &[Option<RunningStats>] {
        &self.running
    }

    pub fn has_running_stats(&self) -> bool {
        self.running.iter().all(|r| r.is_some())
    }

    /// Fold training-mode batch statistics into the running averages. The first
    /// observation initialises them directly.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) -> Result<()> {
        if stats.len() != self.running.len() {
            return Err(Error::Shape(format!("{} batch-norm statistics for {} layers", stats.len(), self.running.len())));
        }
        for (slot, s) in self.running.iter_mut().zip(stats) {
            match slot {
                None => *slot = Some(RunningStats { mean: s.mean.clone(), var: s.var.clone() }),
                Some(r) => {
                    for (m, &b) in r.mean.iter_mut().zip(&s.mean) {
                        *m = BN_MOMENTUM * *m + (1.0 - BN_MOMENTUM) * b;
                    }
                    for (v, &b) in r.var.iter_mut().zip(&s.var) {
                        *v = BN_MOMENTUM * *v + (1.0 - BN_MOMENTUM) * b;
                    }
                }
            }
        }
        Ok(())
    }

    /// Set every head weight and bias to zero.
    pub fn zero_heads(&mut self) {
        let mut idx = Vec::new();
        for br in &self.layout.branches {
            for h in [Some(br.head_high), br.head_mid, br.head_low].into_iter().flatten() {
                idx.extend([h.w, h.b]);
            }
        }
        for i in idx {
            self.params[i].value.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Reassign branch parameters so that branch `i` takes the weights of branch `perm[i]`.
    pub fn permute_branches(&mut self, perm: [usize; 3]) -> Result<()> {
        if self.config.head_mode != HeadMode::PerAxis {
            return Err(Error::InvalidInput("branch permutation needs per-axis heads".into()));
        }
        let mut sorted = perm;
        sorted.sort_unstable();
        if sorted != [0, 1, 2] {
            return Err(Error::InvalidInput(format!("{perm:?} is not a permutation")));
        }
        let old_p = self.params.clone();
        let old_r = self.running.clone();
        let brs = self.layout.branches.clone();
        for (i, &src) in perm.iter().enumerate() {
            for (d, s) in brs[i].params.clone().zip(brs[src].params.clone()) {
                let name = self.params[d].name.clone();
                self.params[d] = Parameter { name, ..old_p[s].clone() };
            }
            for (d, s) in brs[i].bns.clone().zip(brs[src].bns.clone()) {
                self.running[d] = old_r[s].clone();
            }
        }
        Ok(())
    }

    /// Record a forward pass of input `x` (shape `(B, C, n, n, n)`) on `tape`.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Outputs> {
        let shape = tape.value(x).shape();
        if shape[1] != self.config.input_channels.len() {
            return Err(Error::Shape(format!(
                "model expects {} input channels, got {}",
                self.config.input_channels.len(),
                shape[1]
            )));
        }
        if shape[2] != shape[3] || shape[3] != shape[4] {
            return Err(Error::Shape(format!("model input must be cubic, got {:?}", &shape[2..])));
        }
        let plan = plan_sizes(shape[2])?;
        if mode == Mode::Eval && !self.has_running_stats() {
            return Err(Error::NotInitialized("batch-norm running statistics (no training-mode pass yet)".into()));
        }
        let param_vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| match mode {
                Mode::Train => tape.param(p.value.clone()),
                Mode::Eval => tape.constant(p.value.clone()),
            })
            .collect();
        let mut f = Fwd { model: self, tape, pv: &param_vars, mode, stats: vec![None; self.running.len()] };
        let l = &self.layout;
        let e1 = f.pair(x, &l.enc1)?;
        let p1 = f.tape.maxpool2(e1)?;
        let e2 = f.pair(p1, &l.enc2)?;
        let p2 = f.tape.maxpool2(e2)?;
        let bott = f.pair(p2, &l.bottleneck)?;
        let mut highs = Vec::new();
        let mut mids = Vec::new();
        let mut lows = Vec::new();
        for br in &l.branches {
            let u2 = f.conv(bott, br.up2, Conv::T2)?;
            let s2 = f.skip(e2, br.gap2.as_ref(), plan.up2())?;
            let c2 = f.tape.concat_center_crop(s2, u2)?;
            let d2 = f.pair(c2, &br.dec2)?;
            if let Some(h) = br.head_mid {
                mids.push(f.conv(d2, h, Conv::K1)?);
            }
            let u1 = f.conv(d2, br.up1, Conv::T2)?;
            let s1 = f.skip(e1, br.gap1.as_ref(), plan.up1())?;
            let c1 = f.tape.concat_center_crop(s1, u1)?;
            let d1 = f.pair(c1, &br.dec1)?;
            highs.push(f.conv(d1, br.head_high, Conv::K1)?);
            if let Some(h) = br.head_low {
                lows.push(f.conv(bott, h, Conv::K1)?);
            }
        }
        let high = f.join(highs)?;
        let mid = if mids.is_empty() { None } else { Some(f.join(mids)?) };
        let low = if lows.is_empty() { None } else { Some(f.join(lows)?) };
        let stats = match mode {
            Mode::Train => f.stats.into_iter().map(|s| s.expect("every batch norm ran")).collect(),
            Mode::Eval => Vec::new(),
        };
        Ok(Outputs { high, mid, low, param_vars, stats })
    }

    /// Evaluation-mode prediction for a batch of assembled inputs.
    pub fn predict(&self, x: &Tensor<T>) -> Result<HierarchicalOutput<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, xv, Mode::Eval)?;
        Ok(HierarchicalOutput {
            high: tape.value(out.high).clone(),
            mid: out.mid.map(|v| tape.value(v).clone()),
            low: out.low.map(|v| tape.value(v).clone()),
        })
    }

    /// Parameter and running-statistic records; the header should carry [`ModelConfig`].
    pub fn records(&self) -> Result<Vec<Record>> {
        let mut out = Vec::new();
        for p in &self.params {
            out.push(Record::new(p.name.clone(), p.value.shape().to_vec(), T::to_record(p.value.data()))?);
        }
        for (name, r) in self.bn_names.iter().zip(&self.running) {
            if let Some(r) = r {
                let n = r.mean.len();
                out.push(Record::new(format!("{name}.running_mean"), vec![n], RecordData::F64(r.mean.clone()))?);
                out.push(Record::new(format!("{name}.running_var"), vec![n], RecordData::F64(r.var.clone()))?);
            }
        }
        Ok(out)
    }

    /// Rebuild a model from its configuration and a checkpoint holding its records.
    pub fn from_checkpoint(config: ModelConfig, ck: &Checkpoint) -> Result<Self> {
        let mut m = Self::build(config)?;
        for p in &mut m.params {
            let r = ck.get(&p.name).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint does not match the architecture: missing `{}`", p.name))
            })?;
            if r.dims != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "checkpoint does not match the architecture: `{}` has shape {:?}, expected {:?}",
                    p.name,
                    r.dims,
                    p.value.shape()
                )));
            }
            let data = T::from_record(&r.data).ok_or_else(|| {
                Error::Checkpoint(format!("`{}` stored at a different precision than {}", p.name, T::NAME))
            })?;
            p.value = Tensor::new(p.value.shape(), data)?;
        }
        for (name, slot) in m.bn_names.iter().zip(m.running.iter_mut()) {
            if let (Some(mean), Some(var)) = (ck.get(&format!("{name}.running_mean")), ck.get(&format!("{name}.running_var"))) {
                *slot = Some(RunningStats { mean: mean.data.to_f64(), var: var.data.to_f64() });
            }
        }
        Ok(m)
    }
}

#[derive(Clone, Copy)]
enum Conv {
    K3,
    K1,
    T2,
}

struct Fwd<'a, T: Real> {
    model: &'a Model<T>,
    tape: &'a mut Tape<T>,
    pv: &'a [Var],
    mode: Mode,
    stats: Vec<Option<BatchStats>>,
}

impl<T: Real> Fwd<'_, T> {
    fn conv(&mut self, x: Var, l: ConvLayer, kind: Conv) -> Result<Var> {
        let (w, b) = (self.pv[l.w], self.pv[l.b]);
        match kind {
            Conv::K3 => self.tape.conv3(x, w, b),
            Conv::K1 => self.tape.conv1(x, w, b),
            Conv::T2 => self.tape.tconv2(x, w, b),
        }
    }

    fn conv_bn(&mut self, x: Var, l: &ConvBn) -> Result<Var> {
        let y = self.conv(x, l.conv, Conv::K3)?;
        let (g, b) = (self.pv[l.gamma], self.pv[l.beta]);
        let (y, stats) = match self.mode {
            Mode::Train => self.tape.batchnorm(y, g, b, BnMode::Train)?,
            Mode::Eval => {
                let r = self.model.running[l.bn].as_ref().expect("checked before the pass");
                self.tape.batchnorm(y, g, b, BnMode::Eval { mean: &r.mean, var: &r.var })?
            }
        };
        self.stats[l.bn] = stats;
        Ok(self.tape.relu(y))
    }

    fn pair(&mut self, x: Var, l: &[ConvBn; 2]) -> Result<Var> {
        let y = self.conv_bn(x, &l[0])?;
        self.conv_bn(y, &l[1])
    }

    /// Skip path feeding a decoder level of spatial size `size`. With gap filling the
    /// skip is cropped to `size + 4` first, which gives the same values as convolving
    /// the full map and cropping afterwards.
    fn skip(&mut self, x: Var, gap: Option<&[ConvBn; 2]>, size: usize) -> Result<Var> {
        match gap {
            None => Ok(x),
            Some(g) => {
                let c = self.tape.crop(x, [size + 4; 3])?;
                self.pair(c, g)
            }
        }
    }

    fn join(&mut self, parts: Vec<Var>) -> Result<Var> {
        let mut it = parts.into_iter();
        let mut acc = it.next().expect("at least one branch");
        for p in it {
            acc = self.tape.concat_center_crop(acc, p)?;
        }
        Ok(acc)
    }
}

/// Stack the configured channel sources for one subject/template patch pair into a
/// `(1, C, n, n, n)` tensor.
pub fn assemble_input<T: Real>(subject: &Volume3, template: &Volume3, channels: &[InputChannel]) -> Result<Tensor<T>> {
    if subject.dims() != template.dims() {
        return Err(Error::DimMismatch(format!(
            "subject {:?} vs template {:?}",
            subject.dims(),
            template.dims()
        )));
    }
    if channels.is_empty() {
        return Err(Error::Config("input_channels must not be empty".into()));
    }
    let d = subject.dims();
    let mut data = Vec::with_capacity(channels.len() * subject.len());
    for ch in channels {
        let v = match ch {
            InputChannel::Subject => subject.clone(),
            InputChannel::Template => template.clone(),
            InputChannel::Difference => difference_map(subject, template)?,
            InputChannel::Gradient => gradient_magnitude(subject)?,
            InputChannel::TemplateGradient => gradient_magnitude(template)?,
        };
        data.extend(v.as_slice().iter().map(|&x| T::of(x)));
    }
    Tensor::new([1, channels.len(), d[0], d[1], d[2]], data)
}

/// Concatenate single-item tensors along the batch axis.
pub fn stack_batch<T: Real>(items: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = items.first().ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
    let mut shape = first.shape();
    let mut data = Vec::with_capacity(items.len() * first.numel());
    for t in items {
        let s = t.shape();
        if s[1..] != shape[1..] {
            return Err(Error::Shape(format!("batch items {:?} vs {:?}", s, shape)));
        }
        data.extend_from_slice(t.data());
    }
    shape[0] = items.iter().map(|t| t.batch()).sum();
    Tensor::new(shape, data)
}
