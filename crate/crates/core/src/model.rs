//! The six networks and their two forward paths.
//!
//! ```text
//!   x_s ─┐                ┌─ A_s ─┐
//!        ├─ F (shared) ───┤       ├─ D       (source vs target)
//!   x_t ─┘                └─ A_t ─┘
//!                                 └─ ½(C1 + C2)  (class probabilities)
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Domain;
use crate::error::{Error, Result};
use crate::nn::{Attention, BatchNorm1d, Conv1d, Group, Linear, Mode, ParamId, ParamStore};
use crate::tensor::{concat, Tape, Var, LOG_CLAMP};

/// Network geometry. Every width is configurable; the defaults are sized
/// for CPU training on 300-sample epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub epoch_len: usize,
    /// Output channels of each convolutional block; the input has one channel.
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
    pub paddings: Vec<usize>,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    /// Width of the H1/H2 projections; `None` means `max(d / 2, 1)`.
    pub attention_dim: Option<usize>,
    pub discriminator_hidden: usize,
    pub classifier_hidden: usize,
    pub n_classes: usize,
    pub use_attention: bool,
    pub dual_classifiers: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            epoch_len: 300,
            channels: vec![8, 16, 32],
            kernels: vec![25, 8, 8],
            strides: vec![3, 1, 1],
            paddings: vec![0, 0, 0],
            pool_kernel: 2,
            pool_stride: 2,
            attention_dim: None,
            discriminator_hidden: 64,
            classifier_hidden: 64,
            n_classes: 5,
            use_attention: true,
            dual_classifiers: true,
        }
    }
}

impl ArchConfig {
    pub fn feature_channels(&self) -> usize {
        self.channels.last().copied().unwrap_or(1)
    }

    pub fn attention_width(&self) -> usize {
        self.attention_dim
            .unwrap_or((self.feature_channels() / 2).max(1))
    }

    /// `(d, l)` of the extractor output, or a geometry error.
    pub fn feature_shape(&self) -> Result<(usize, usize)> {
        self.validate()?;
        let mut len = self.epoch_len;
        for i in 0..self.channels.len() {
            len = crate::tensor::ConvGeometry::output_len(
                len,
                self.kernels[i],
                self.strides[i],
                self.paddings[i],
            )?;
            if len < self.pool_kernel {
                return Err(Error::geometry(
                    "maxpool1d",
                    format!(
                        "block {i}: length {len} shorter than pool kernel {}",
                        self.pool_kernel
                    ),
                ));
            }
            len = (len - self.pool_kernel) / self.pool_stride + 1;
        }
        Ok((self.feature_channels(), len))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.channels.len();
        if n == 0 {
            return Err(Error::geometry("arch", "at least one convolutional block"));
        }
        if self.kernels.len() != n || self.strides.len() != n || self.paddings.len() != n {
            return Err(Error::geometry(
                "arch",
                "channels, kernels, strides and paddings need equal lengths",
            ));
        }
        let zero = |v: &[usize]| v.contains(&0);
        if zero(&self.channels) || zero(&self.kernels) || zero(&self.strides) {
            return Err(Error::geometry(
                "arch",
                "channels, kernels and strides must be positive",
            ));
        }
        if self.pool_kernel == 0 || self.pool_stride == 0 || self.n_classes < 2 {
            return Err(Error::geometry(
                "arch",
                "pooling must be positive and n_classes ≥ 2",
            ));
        }
        if self.attention_dim == Some(0)
            || self.discriminator_hidden == 0
            || self.classifier_hidden == 0
        {
            return Err(Error::geometry("arch", "hidden widths must be positive"));
        }
        Ok(())
    }

    /// Numeric encoding stored in checkpoints.
    pub(crate) fn encode(&self) -> Vec<f64> {
        let mut v = vec![self.epoch_len as f64, self.channels.len() as f64];
        for list in [&self.channels, &self.kernels, &self.strides, &self.paddings] {
            v.extend(list.iter().map(|&x| x as f64));
        }
        v.extend([
            self.pool_kernel as f64,
            self.pool_stride as f64,
            self.attention_dim.map_or(0.0, |d| d as f64),
            self.discriminator_hidden as f64,
            self.classifier_hidden as f64,
            self.n_classes as f64,
            f64::from(u8::from(self.use_attention)),
            f64::from(u8::from(self.dual_classifiers)),
        ]);
        v
    }

    pub(crate) fn decode(v: &[f64]) -> Option<Self> {
        let int = |x: f64| (x >= 0.0 && x.fract() == 0.0).then_some(x as usize);
        let blocks = int(*v.get(1)?)?;
        if v.len() != 2 + 4 * blocks + 8 {
            return None;
        }
        let list = |k: usize| -> Option<Vec<usize>> {
            v[2 + k * blocks..2 + (k + 1) * blocks]
                .iter()
                .map(|&x| int(x))
                .collect()
        };
        let tail = &v[2 + 4 * blocks..];
        let attention_dim = int(tail[2])?;
        Some(Self {
            epoch_len: int(v[0])?,
            channels: list(0)?,
            kernels: list(1)?,
            strides: list(2)?,
            paddings: list(3)?,
            pool_kernel: int(tail[0])?,
            pool_stride: int(tail[1])?,
            attention_dim: (attention_dim > 0).then_some(attention_dim),
            discriminator_hidden: int(tail[3])?,
            classifier_hidden: int(tail[4])?,
            n_classes: int(tail[5])?,
            use_attention: tail[6] != 0.0,
            dual_classifiers: tail[7] != 0.0,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvBlock {
    conv: Conv1d,
    bn: BatchNorm1d,
}

/// `flatten → linear → ReLU → linear`.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub hidden: Linear,
    pub out: Linear,
}

impl Head {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: Group,
        input: usize,
        hidden: usize,
        out: usize,
    ) -> Self {
        Self {
            hidden: Linear::new(store, rng, &format!("{name}.fc1"), group, input, hidden),
            out: Linear::new(store, rng, &format!("{name}.fc2"), group, hidden, out),
        }
    }

    fn logits<'t>(&self, store: &ParamStore, feat: Var<'t>) -> Result<Var<'t>> {
        let shape = feat.shape();
        let flat = feat.reshape(&[shape[0], shape[1..].iter().product()])?;
        let h = self.hidden.forward(store, flat)?.relu();
        self.out.forward(store, h)
    }

    fn weights(&self) -> [ParamId; 2] {
        [self.hidden.weight, self.out.weight]
    }
}

/// Output of one forward path.
#[derive(Clone, Copy, Debug)]
pub struct Forward<'t> {
    /// Attended features `A(F(x))`, `[B×d×l]`.
    pub features: Var<'t>,
    /// Averaged class probabilities, `[B×K]`.
    pub probs: Var<'t>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdastModel {
    arch: ArchConfig,
    pub params: ParamStore,
    blocks: Vec<ConvBlock>,
    attention_source: Option<Attention>,
    attention_target: Option<Attention>,
    discriminator: Head,
    classifiers: Vec<Head>,
    feature_shape: (usize, usize),
}

impl AdastModel {
    /// Builds and initializes every network. The two classifiers draw from
    /// separate random streams of `seed`.
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        let (d, l) = arch.feature_shape()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut blocks = Vec::with_capacity(arch.channels.len());
        let mut in_ch = 1;
        for i in 0..arch.channels.len() {
            let out_ch = arch.channels[i];
            let conv = Conv1d::new(
                &mut store,
                &mut rng,
                &format!("F.block{i}.conv"),
                Group::Extractor,
                in_ch,
                out_ch,
                arch.kernels[i],
                arch.strides[i],
                arch.paddings[i],
            );
            let bn = BatchNorm1d::new(
                &mut store,
                &format!("F.block{i}.bn"),
                Group::Extractor,
                out_ch,
            );
            blocks.push(ConvBlock { conv, bn });
            in_ch = out_ch;
        }

        let (attention_source, attention_target) = if arch.use_attention {
            let w = arch.attention_width();
            let a_s = Attention::new(&mut store, &mut rng, "A_s", Group::AttentionSource, d, w);
            let a_t = Attention::new(&mut store, &mut rng, "A_t", Group::AttentionTarget, d, w);
            (Some(a_s), Some(a_t))
        } else {
            (None, None)
        };

        let discriminator = Head::new(
            &mut store,
            &mut rng,
            "D",
            Group::Discriminator,
            d * l,
            arch.discriminator_hidden,
            1,
        );

        let n_cls = if arch.dual_classifiers { 2 } else { 1 };
        let classifiers = (0..n_cls)
            .map(|k| {
                let mut crng = ChaCha8Rng::seed_from_u64(seed);
                crng.set_stream(k as u64 + 1);
                let group = if k == 0 {
                    Group::Classifier1
                } else {
                    Group::Classifier2
                };
                Head::new(
                    &mut store,
                    &mut crng,
                    &format!("C{}", k + 1),
                    group,
                    d * l,
                    arch.classifier_hidden,
                    arch.n_classes,
                )
            })
            .collect();

        Ok(Self {
            arch,
            params: store,
            blocks,
            attention_source,
            attention_target,
            discriminator,
            classifiers,
            feature_shape: (d, l),
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    /// `(d, l)` of the feature map entering attention, discriminator and classifiers.
    pub fn feature_shape(&self) -> (usize, usize) {
        self.feature_shape
    }

    pub fn n_classifiers(&self) -> usize {
        self.classifiers.len()
    }

    pub fn attention(&self, domain: Domain) -> Option<&Attention> {
        match domain {
            Domain::Source => self.attention_source.as_ref(),
            Domain::Target => self.attention_target.as_ref(),
        }
    }

    /// Shared extractor `F`: three conv → batch-norm → ReLU → max-pool blocks.
    pub fn extract<'t>(&mut self, x: Var<'t>, mode: Mode) -> Result<Var<'t>> {
        let shape = x.shape();
        match shape.as_slice() {
            &[_, 1, t] if t == self.arch.epoch_len => {}
            _ => {
                return Err(Error::shape(
                    "forward",
                    &shape,
                    &[shape.first().copied().unwrap_or(0), 1, self.arch.epoch_len],
                ))
            }
        }
        let mut h = x;
        for block in &self.blocks {
            h = block.conv.forward(&self.params, h)?;
            h = block.bn.forward(&mut self.params, h, mode)?;
            h = h
                .relu()
                .max_pool1d(self.arch.pool_kernel, self.arch.pool_stride)?;
        }
        Ok(h)
    }

    /// Domain-specific attention; identity when attention is disabled.
    pub fn attend<'t>(&self, features: Var<'t>, domain: Domain) -> Result<Var<'t>> {
        match self.attention(domain) {
            Some(att) => att.forward(&self.params, features),
            None => Ok(features),
        }
    }

    /// Per-classifier softmax outputs.
    pub fn classifier_probs<'t>(&self, features: Var<'t>) -> Result<Vec<Var<'t>>> {
        self.classifiers
            .iter()
            .map(|c| c.logits(&self.params, features)?.softmax(1))
            .collect()
    }

    /// Mean of the classifier outputs.
    pub fn classify<'t>(&self, features: Var<'t>) -> Result<Var<'t>> {
        let probs = self.classifier_probs(features)?;
        average(&probs)
    }

    /// `x → A_domain(F(x)) → ½(C1 + C2)`.
    pub fn forward<'t>(&mut self, x: Var<'t>, domain: Domain, mode: Mode) -> Result<Forward<'t>> {
        let f = self.extract(x, mode)?;
        let features = self.attend(f, domain)?;
        let probs = self.classify(features)?;
        Ok(Forward { features, probs })
    }

    pub fn forward_source<'t>(&mut self, x: Var<'t>, mode: Mode) -> Result<Forward<'t>> {
        self.forward(x, Domain::Source, mode)
    }

    pub fn forward_target<'t>(&mut self, x: Var<'t>, mode: Mode) -> Result<Forward<'t>> {
        self.forward(x, Domain::Target, mode)
    }

    /// Probability that each feature map came from the source domain, `[B]`,
    /// clamped into `[1e-12, 1 − 1e-12]`.
    pub fn discriminate<'t>(&self, features: Var<'t>) -> Result<Var<'t>> {
        let shape = features.shape();
        let (d, l) = self.feature_shape;
        if shape.len() != 3 || shape[1] != d || shape[2] != l {
            return Err(Error::shape(
                "discriminate",
                &shape,
                &[shape.first().copied().unwrap_or(0), d, l],
            ));
        }
        let logits = self.discriminator.logits(&self.params, features)?;
        logits
            .sigmoid()
            .clamp(LOG_CLAMP, 1.0 - LOG_CLAMP)
            .reshape(&[shape[0]])
    }

    /// Weight-matrix ids of each classifier, in layer order.
    pub fn classifier_weight_ids(&self) -> Vec<Vec<ParamId>> {
        self.classifiers
            .iter()
            .map(|c| c.weights().to_vec())
            .collect()
    }

    /// Flattened weights (no biases) of C1 and C2 as equal-length vectors,
    /// layer order then row-major. `None` with a single classifier.
    pub fn classifier_param_vectors<'t>(
        &self,
        tape: &'t Tape,
    ) -> Result<Option<(Var<'t>, Var<'t>)>> {
        if self.classifiers.len() < 2 {
            return Ok(None);
        }
        let flat = |head: &Head| -> Result<Var<'t>> {
            let parts = head
                .weights()
                .iter()
                .map(|&id| {
                    let v = self.params.bind(tape, id);
                    let n = self.params.get(id).numel();
                    v.reshape(&[n])
                })
                .collect::<Result<Vec<_>>>()?;
            concat(&parts, 0)
        };
        Ok(Some((
            flat(&self.classifiers[0])?,
            flat(&self.classifiers[1])?,
        )))
    }

    /// Trainable parameters of the given networks.
    pub fn param_ids(&self, groups: &[Group]) -> Vec<ParamId> {
        self.params.trainable_in(groups)
    }
}

/// Elementwise mean of equally shaped tensors.
pub fn average<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let (first, rest) = parts
        .split_first()
        .ok_or_else(|| Error::geometry("average", "no inputs"))?;
    if rest.is_empty() {
        return Ok(*first);
    }
    let mut acc = *first;
    for p in rest {
        acc = acc.add(*p)?;
    }
    Ok(acc.scale(1.0 / parts.len() as f64))
}
