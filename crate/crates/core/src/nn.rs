//! Parameter storage and the layers the model is assembled from.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Which network a parameter belongs to. Optimizer ownership is expressed
/// in terms of groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Extractor,
    AttentionSource,
    AttentionTarget,
    Discriminator,
    Classifier1,
    Classifier2,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::Extractor,
        Group::AttentionSource,
        Group::AttentionTarget,
        Group::Discriminator,
        Group::Classifier1,
        Group::Classifier2,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution or linear weight; subject to weight decay.
    Weight,
    Bias,
    /// Batch-norm scale or shift.
    Norm,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub group: Group,
    pub kind: ParamKind,
}

impl ParamEntry {
    pub fn trainable(&self) -> bool {
        self.kind != ParamKind::Buffer
    }
}

/// Flat, named collection of every tensor a model owns.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        mut tensor: Tensor,
        group: Group,
        kind: ParamKind,
    ) -> ParamId {
        tensor.set_requires_grad(kind != ParamKind::Buffer);
        self.entries.push(ParamEntry {
            name: name.into(),
            tensor,
            group,
            kind,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Trainable parameters belonging to any of `groups`.
    pub fn trainable_in(&self, groups: &[Group]) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| {
                let e = self.entry(id);
                e.trainable() && groups.contains(&e.group)
            })
            .collect()
    }

    /// Records the parameter on `tape`, once per tape.
    pub fn bind<'t>(&self, tape: &'t Tape, id: ParamId) -> Var<'t> {
        tape.bind(id.0, self.get(id))
    }

    /// Adds every gradient accumulated on `tape` into the bound parameters.
    pub fn absorb_grads(&mut self, tape: &Tape) {
        for (key, g) in tape.bound_grads() {
            let t = &mut self.entries[key].tensor;
            if t.requires_grad() {
                t.accumulate_grad(&g);
            }
        }
    }

    pub fn zero_grads(&mut self, ids: &[ParamId]) {
        for &id in ids {
            self.get_mut(id).zero_grad();
        }
    }

    pub fn zero_all_grads(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.zero_grad());
    }

    /// Concatenated values of the given parameters, in order.
    pub fn flat_values(&self, ids: &[ParamId]) -> Vec<f64> {
        ids.iter()
            .flat_map(|&id| self.get(id).data().iter().copied())
            .collect()
    }
}

/// Uniform draw in `±1/√fan_in`.
pub(crate) fn uniform_init(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("init shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        group: Group,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = in_channels * kernel;
        let w = uniform_init(rng, &[out_channels, in_channels, kernel], fan_in);
        let b = uniform_init(rng, &[out_channels], fan_in);
        Self {
            weight: store.add(format!("{name}.weight"), w, group, ParamKind::Weight),
            bias: store.add(format!("{name}.bias"), b, group, ParamKind::Bias),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn output_len(&self, in_len: usize) -> Result<usize> {
        let out = crate::tensor::ConvGeometry::output_len(
            in_len,
            self.kernel,
            self.stride,
            self.padding,
        )?;
        if out < 1 {
            return Err(Error::geometry("conv1d", "empty output"));
        }
        Ok(out)
    }

    pub fn forward<'t>(&self, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let tape = x.tape();
        x.conv1d(
            store.bind(tape, self.weight),
            store.bind(tape, self.bias),
            self.stride,
            self.padding,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm1d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm1d {
    pub fn new(store: &mut ParamStore, name: &str, group: Group, channels: usize) -> Self {
        Self {
            gamma: store.add(
                format!("{name}.gamma"),
                Tensor::full(&[channels], 1.0),
                group,
                ParamKind::Norm,
            ),
            beta: store.add(
                format!("{name}.beta"),
                Tensor::zeros(&[channels]),
                group,
                ParamKind::Norm,
            ),
            running_mean: store.add(
                format!("{name}.running_mean"),
                Tensor::zeros(&[channels]),
                group,
                ParamKind::Buffer,
            ),
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::full(&[channels], 1.0),
                group,
                ParamKind::Buffer,
            ),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    /// Train mode normalizes with batch statistics (biased variance) and
    /// folds them into the running averages; eval mode uses the running
    /// averages.
    pub fn forward<'t>(&self, store: &mut ParamStore, x: Var<'t>, mode: Mode) -> Result<Var<'t>> {
        let tape = x.tape();
        let gamma = store.bind(tape, self.gamma);
        let beta = store.bind(tape, self.beta);
        match mode {
            Mode::Train => {
                let (y, stats) = x.batch_norm_train(gamma, beta, self.eps)?;
                let unbias = stats.count as f64 / (stats.count as f64 - 1.0);
                let m = self.momentum;
                let rm = store.get_mut(self.running_mean).data_mut();
                rm.iter_mut()
                    .zip(&stats.mean)
                    .for_each(|(r, v)| *r = (1.0 - m) * *r + m * v);
                let rv = store.get_mut(self.running_var).data_mut();
                rv.iter_mut()
                    .zip(&stats.var)
                    .for_each(|(r, v)| *r = (1.0 - m) * *r + m * v * unbias);
                Ok(y)
            }
            Mode::Eval => x.batch_norm_eval(
                gamma,
                beta,
                store.get(self.running_mean).data(),
                store.get(self.running_var).data(),
                self.eps,
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        group: Group,
        in_features: usize,
        out_features: usize,
    ) -> Self {
        let w = uniform_init(rng, &[out_features, in_features], in_features);
        let b = uniform_init(rng, &[out_features], in_features);
        Self {
            weight: store.add(format!("{name}.weight"), w, group, ParamKind::Weight),
            bias: store.add(format!("{name}.bias"), b, group, ParamKind::Bias),
            in_features,
            out_features,
        }
    }

    pub fn forward<'t>(&self, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let tape = x.tape();
        x.linear(store.bind(tape, self.weight), store.bind(tape, self.bias))
    }
}

/// Position-mixing attention over a `[B×d×l]` feature map.
///
/// Two 1×1 convolutions project every position: `z1 = H1(f)`, `z2 = H2(f)`.
/// For each output position `j` the scores `V[j][i] = softmax_i(z1_i · z2_j)`
/// weight the input positions and `o_j = Σ_i V[j][i] · f_i`. There is no
/// residual path and no score scaling.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub h1: Conv1d,
    pub h2: Conv1d,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        group: Group,
        channels: usize,
        inner: usize,
    ) -> Self {
        Self {
            h1: Conv1d::new(
                store,
                rng,
                &format!("{name}.h1"),
                group,
                channels,
                inner,
                1,
                1,
                0,
            ),
            h2: Conv1d::new(
                store,
                rng,
                &format!("{name}.h2"),
                group,
                channels,
                inner,
                1,
                1,
                0,
            ),
        }
    }

    /// Attention weights as `[B×l×l]`, indexed `[b][i][j]`: column `j`
    /// sums to one over `i`.
    pub fn scores<'t>(&self, store: &ParamStore, feat: Var<'t>) -> Result<Var<'t>> {
        let z1 = self.h1.forward(store, feat)?;
        let z2 = self.h2.forward(store, feat)?;
        // logits[b][i][j] = z1_i · z2_j
        let logits = z1.transpose()?.matmul(z2)?;
        logits.softmax(1)
    }

    pub fn forward<'t>(&self, store: &ParamStore, feat: Var<'t>) -> Result<Var<'t>> {
        let scores = self.scores(store, feat)?;
        // o[b][c][j] = Σ_i f[b][c][i] · V[b][i][j]
        feat.matmul(scores)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(store: &mut ParamStore, id: ParamId, data: Vec<f64>) {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::new(&shape, data).unwrap().requiring_grad();
    }

    fn conv(stride: usize, kernel: usize, w: Vec<f64>) -> (ParamStore, Conv1d) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = Conv1d::new(
            &mut store,
            &mut rng,
            "c",
            Group::Extractor,
            1,
            1,
            kernel,
            stride,
            0,
        );
        set(&mut store, c.weight, w);
        set(&mut store, c.bias, vec![0.0]);
        (store, c)
    }

    fn run_conv(stride: usize, kernel: usize, w: Vec<f64>, x: Vec<f64>) -> Result<Vec<f64>> {
        let (store, c) = conv(stride, kernel, w);
        let tape = Tape::new();
        let n = x.len();
        let xv = tape.constant(&[1, 1, n], x)?;
        Ok(c.forward(&store, xv)?.value())
    }

    #[test]
    fn conv1d_examples() {
        assert_eq!(
            run_conv(1, 1, vec![1.0], vec![1.0, 2.0, 3.0]).unwrap(),
            vec![1.0, 2.0, 3.0]
        );
        assert_eq!(
            run_conv(1, 2, vec![1.0, 1.0], vec![1.0, 0.0, 2.0, 1.0]).unwrap(),
            vec![1.0, 2.0, 3.0]
        );
        assert_eq!(
            run_conv(2, 1, vec![1.0], vec![1.0, 2.0, 3.0]).unwrap(),
            vec![1.0, 3.0]
        );
    }

    #[test]
    fn conv1d_geometry_error() {
        let err = run_conv(1, 4, vec![1.0; 4], vec![1.0, 2.0]).unwrap_err();
        assert!(matches!(err, Error::Geometry { .. }));
    }

    #[test]
    fn maxpool_examples() {
        let tape = Tape::new();
        let x = tape.var(&Tensor::new(&[1, 1, 4], vec![1.0, 3.0, 2.0, 0.0]).unwrap());
        assert_eq!(x.max_pool1d(2, 2).unwrap().value(), vec![3.0, 2.0]);

        let x = tape.var(
            &Tensor::new(&[1, 1, 2], vec![5.0, 5.0])
                .unwrap()
                .requiring_grad(),
        );
        let y = x.max_pool1d(2, 2).unwrap();
        assert_eq!(y.value(), vec![5.0]);
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0]);

        let x = tape.var(&Tensor::new(&[1, 1, 2], vec![-1.0, -4.0]).unwrap());
        assert_eq!(x.max_pool1d(2, 2).unwrap().value(), vec![-1.0]);

        let x = tape.var(&Tensor::new(&[1, 1, 2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(x.max_pool1d(3, 1), Err(Error::Geometry { .. })));
    }

    fn bn_setup(channels: usize) -> (ParamStore, BatchNorm1d) {
        let mut store = ParamStore::new();
        let bn = BatchNorm1d::new(&mut store, "bn", Group::Extractor, channels);
        (store, bn)
    }

    #[test]
    fn batchnorm_examples() {
        let (mut store, bn) = bn_setup(1);
        let tape = Tape::new();
        let x = tape.constant(&[2, 1, 1], vec![1.0, 3.0]).unwrap();
        let y = bn.forward(&mut store, x, Mode::Train).unwrap().value();
        assert!((y[0] + 1.0).abs() < 1e-4 && (y[1] - 1.0).abs() < 1e-4);
        // running stats: mean 0.1·2, var 0.9 + 0.1·2 (unbiased var of {1,3})
        assert!((store.get(bn.running_mean).data()[0] - 0.2).abs() < 1e-12);
        assert!((store.get(bn.running_var).data()[0] - 1.1).abs() < 1e-12);

        let (mut store, bn) = bn_setup(1);
        set(&mut store, bn.gamma, vec![0.0]);
        set(&mut store, bn.beta, vec![0.7]);
        let tape = Tape::new();
        let x = tape
            .constant(&[2, 1, 2], vec![1.0, 5.0, -2.0, 3.0])
            .unwrap();
        let y = bn.forward(&mut store, x, Mode::Train).unwrap().value();
        assert!(y.iter().all(|&v| v == 0.7));

        let (mut store, bn) = bn_setup(1);
        let tape = Tape::new();
        let x = tape.constant(&[1, 1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let y = bn.forward(&mut store, x, Mode::Eval).unwrap().value();
        for (a, b) in y.iter().zip([1.0, -2.0, 0.5]) {
            assert!((a - b).abs() < 1e-4);
        }
        // eval mode leaves running stats untouched
        assert_eq!(store.get(bn.running_mean).data(), &[0.0]);
    }

    #[test]
    fn batchnorm_needs_two_values() {
        let (mut store, bn) = bn_setup(1);
        let tape = Tape::new();
        let x = tape.constant(&[1, 1, 1], vec![1.0]).unwrap();
        assert!(matches!(
            bn.forward(&mut store, x, Mode::Train),
            Err(Error::Statistics { count: 1 })
        ));
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let (mut store, bn) = bn_setup(2);
        let tape = Tape::new();
        let data: Vec<f64> = (0..24).map(|i| ((i * 7) % 11) as f64 * 0.3 - 1.0).collect();
        let x = tape.constant(&[3, 2, 4], data).unwrap();
        let y = bn.forward(&mut store, x, Mode::Train).unwrap().value();
        for c in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|b| y[(b * 2 + c) * 4..(b * 2 + c + 1) * 4].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    fn linear(w: Vec<f64>, b: Vec<f64>, inp: usize, out: usize) -> (ParamStore, Linear) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Linear::new(&mut store, &mut rng, "fc", Group::Classifier1, inp, out);
        set(&mut store, l.weight, w);
        set(&mut store, l.bias, b);
        (store, l)
    }

    #[test]
    fn linear_examples() {
        let (store, l) = linear(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2, 2);
        let tape = Tape::new();
        let x = tape.constant(&[1, 2], vec![2.0, 3.0]).unwrap();
        assert_eq!(l.forward(&store, x).unwrap().value(), vec![2.0, 3.0]);

        let (store, l) = linear(vec![1.0, 1.0], vec![1.0], 2, 1);
        let tape = Tape::new();
        let x = tape.constant(&[1, 2], vec![2.0, 3.0]).unwrap();
        assert_eq!(l.forward(&store, x).unwrap().value(), vec![6.0]);

        let (store, l) = linear(vec![0.3, -0.2, 0.5, 0.9], vec![0.25, -1.5], 2, 2);
        let tape = Tape::new();
        let x = tape.constant(&[2, 2], vec![0.0; 4]).unwrap();
        assert_eq!(
            l.forward(&store, x).unwrap().value(),
            vec![0.25, -1.5, 0.25, -1.5]
        );

        let x = tape.constant(&[1, 3], vec![0.0; 3]).unwrap();
        assert!(matches!(l.forward(&store, x), Err(Error::Shape { .. })));
    }

    fn identity_attention(d: usize) -> (ParamStore, Attention) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Attention::new(&mut store, &mut rng, "att", Group::AttentionSource, d, d);
        let eye: Vec<f64> = (0..d * d)
            .map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 })
            .collect();
        for conv in [&a.h1, &a.h2] {
            set(&mut store, conv.weight, eye.clone());
            set(&mut store, conv.bias, vec![0.0; d]);
        }
        (store, a)
    }

    #[test]
    fn attention_hand_example() {
        let (store, a) = identity_attention(1);
        let tape = Tape::new();
        let f = tape.constant(&[1, 1, 2], vec![1.0, 2.0]).unwrap();
        let v = a.scores(&store, f).unwrap().value();
        let e = std::f64::consts::E;
        // column j = 0 over i
        assert!((v[0] - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((v[2] - e / (1.0 + e)).abs() < 1e-12);
        let o = a.forward(&store, f).unwrap().value();
        assert!((o[0] - 1.7311).abs() < 1e-4);
        assert!((o[1] - 1.8808).abs() < 1e-4);
    }

    #[test]
    fn attention_zero_h1_is_uniform() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Attention::new(&mut store, &mut rng, "att", Group::AttentionSource, 3, 2);
        set(&mut store, a.h1.weight, vec![0.0; 6]);
        set(&mut store, a.h1.bias, vec![0.0; 2]);
        let tape = Tape::new();
        let data = vec![1.0, 2.0, 6.0, -1.0, 0.0, 4.0, 2.0, 2.0, 5.0];
        let f = tape.constant(&[1, 3, 3], data.clone()).unwrap();
        let o = a.forward(&store, f).unwrap().value();
        for c in 0..3 {
            let mean = data[c * 3..c * 3 + 3].iter().sum::<f64>() / 3.0;
            for j in 0..3 {
                assert!((o[c * 3 + j] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_single_position_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Attention::new(&mut store, &mut rng, "att", Group::AttentionSource, 4, 2);
        let tape = Tape::new();
        let data = vec![0.5, -1.0, 2.0, 3.0, 1.5, 0.0, -2.0, 4.0];
        let f = tape.constant(&[2, 4, 1], data.clone()).unwrap();
        assert_eq!(a.scores(&store, f).unwrap().value(), vec![1.0, 1.0]);
        let o = a.forward(&store, f).unwrap().value();
        assert_eq!(o, data);
    }

    #[test]
    fn bind_is_cached_per_tape() {
        let (store, l) = linear(vec![1.0, 2.0], vec![0.0], 2, 1);
        let tape = Tape::new();
        let a = store.bind(&tape, l.weight);
        let b = store.bind(&tape, l.weight);
        assert_eq!(tape.len(), 1);
        assert_eq!(a.value(), b.value());
    }
}
