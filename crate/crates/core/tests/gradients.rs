//! Analytic gradients against central finite differences.

use adast::data::Domain;
use adast::losses::{self, Components, LossWeights};
use adast::model::{AdastModel, ArchConfig};
use adast::nn::{Attention, BatchNorm1d, Conv1d, Group, Linear, Mode, ParamStore};
use adast::tensor::{concat, Tape, Tensor, Var};
use adast::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const SMOOTH: f64 = 1e-6;
const KINKED: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-4 {
        // Both effectively zero; compare absolutely.
        (a - n).abs() / 1e-4
    } else {
        (a - n).abs() / scale
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, for functions with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = random(rng, shape, 0.1, 1.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Projects the output onto fixed weights so every output element
/// contributes to the scalar being differentiated.
fn project<'t>(out: Var<'t>) -> Var<'t> {
    let n: usize = out.shape().iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.7361).sin() + 0.3).collect();
    let w = out.tape().constant(&out.shape(), w).unwrap();
    out.mul(w).unwrap().sum()
}

fn check<F>(name: &str, inputs: &[Tensor], tol: f64, f: F)
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.var(x)).collect();
        project(f(&vars).unwrap()).item()
    };
    let tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| tape.var(&x.clone().requiring_grad()))
        .collect();
    let loss = project(f(&vars).unwrap());
    loss.backward().unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = v.grad().unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for (k, &a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    assert!(
        worst < tol,
        "{name}: max relative error {worst:e} ≥ {tol:e}"
    );
}

#[test]
pub fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[3, 4], -1.0, 1.0);
    let b = random(&mut rng, &[3, 4], -1.0, 1.0);
    let pos = random(&mut rng, &[3, 4], 0.2, 2.0);
    check("add", &[a.clone(), b.clone()], SMOOTH, |v| v[0].add(v[1]));
    check("sub", &[a.clone(), b.clone()], SMOOTH, |v| v[0].sub(v[1]));
    check("mul", &[a.clone(), b.clone()], SMOOTH, |v| v[0].mul(v[1]));
    check("self mul", std::slice::from_ref(&a), SMOOTH, |v| {
        v[0].mul(v[0])
    });
    check("scale", std::slice::from_ref(&a), SMOOTH, |v| {
        Ok(v[0].scale(-2.5))
    });
    check("neg", std::slice::from_ref(&a), SMOOTH, |v| Ok(v[0].neg()));
    check("add_scalar", std::slice::from_ref(&a), SMOOTH, |v| {
        Ok(v[0].add_scalar(0.7))
    });
    check("rsub_scalar", std::slice::from_ref(&a), SMOOTH, |v| {
        Ok(v[0].rsub_scalar(1.0))
    });
    check("exp", std::slice::from_ref(&a), SMOOTH, |v| Ok(v[0].exp()));
    check(
        "log",
        std::slice::from_ref(&pos),
        SMOOTH,
        |v| Ok(v[0].log()),
    );
    check("sigmoid", std::slice::from_ref(&a), SMOOTH, |v| {
        Ok(v[0].sigmoid())
    });
    let k = away_from_zero(&mut rng, &[3, 4]);
    check("abs", std::slice::from_ref(&k), KINKED, |v| Ok(v[0].abs()));
    check(
        "relu",
        std::slice::from_ref(&k),
        KINKED,
        |v| Ok(v[0].relu()),
    );
    check("clamp", &[k], KINKED, |v| Ok(v[0].clamp(-0.5, 0.55)));
}

#[test]
pub fn reductions_and_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let b = random(&mut rng, &[2, 2, 4], -1.0, 1.0);
    check("sum", std::slice::from_ref(&a), SMOOTH, |v| Ok(v[0].sum()));
    check(
        "mean",
        std::slice::from_ref(&a),
        SMOOTH,
        |v| Ok(v[0].mean()),
    );
    for axis in 0..3 {
        check("sum_axis", std::slice::from_ref(&a), SMOOTH, |v| {
            v[0].sum_axis(axis)
        });
        check("mean_axis", std::slice::from_ref(&a), SMOOTH, |v| {
            v[0].mean_axis(axis)
        });
    }
    check("transpose 3d", std::slice::from_ref(&a), SMOOTH, |v| {
        v[0].transpose()
    });
    let m = random(&mut rng, &[3, 5], -1.0, 1.0);
    check("transpose 2d", &[m], SMOOTH, |v| v[0].transpose());
    check("reshape", std::slice::from_ref(&a), SMOOTH, |v| {
        v[0].reshape(&[6, 4])
    });
    check("concat", &[a.clone(), b], SMOOTH, |v| {
        concat(&[v[0], v[1]], 1)
    });
    check("concat with self", &[a], SMOOTH, |v| {
        concat(&[v[0], v[0]], 2)
    });
}

#[test]
pub fn products_and_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, &[3, 4], -1.0, 1.0);
    let b = random(&mut rng, &[4, 2], -1.0, 1.0);
    check("matmul", &[a, b], SMOOTH, |v| v[0].matmul(v[1]));
    let a3 = random(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let b3 = random(&mut rng, &[2, 4, 5], -1.0, 1.0);
    check("batched matmul", &[a3.clone(), b3], SMOOTH, |v| {
        v[0].matmul(v[1])
    });
    for axis in 0..3 {
        check("softmax", std::slice::from_ref(&a3), SMOOTH, |v| {
            v[0].softmax(axis)
        });
    }
    let logits = random(&mut rng, &[4, 5], -2.0, 2.0);
    check("cross_entropy", &[logits], SMOOTH, |v| {
        v[0].softmax(1)?.cross_entropy(&[0, 4, 2, 2])
    });
}

#[test]
pub fn fused_layer_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[3, 4], -1.0, 1.0);
    let w = random(&mut rng, &[2, 4], -1.0, 1.0);
    let b = random(&mut rng, &[2], -1.0, 1.0);
    check("linear", &[x, w, b], SMOOTH, |v| v[0].linear(v[1], v[2]));

    for (stride, padding) in [(1, 0), (2, 1), (3, 0), (1, 2)] {
        let x = random(&mut rng, &[2, 3, 11], -1.0, 1.0);
        let w = random(&mut rng, &[4, 3, 3], -1.0, 1.0);
        let b = random(&mut rng, &[4], -1.0, 1.0);
        check("conv1d", &[x, w, b], SMOOTH, |v| {
            v[0].conv1d(v[1], v[2], stride, padding)
        });
    }

    // Distinct values keep every window's maximum unique.
    let mut x = random(&mut rng, &[2, 3, 9], 0.0, 1.0);
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        *v += i as f64 * 0.01;
    }
    check("max_pool1d", &[x.clone()], KINKED, |v| {
        v[0].max_pool1d(2, 2)
    });
    check("max_pool1d overlap", &[x], KINKED, |v| {
        v[0].max_pool1d(3, 2)
    });

    let x = random(&mut rng, &[4, 3, 5], -1.0, 2.0);
    let g = random(&mut rng, &[3], 0.5, 1.5);
    let be = random(&mut rng, &[3], -0.5, 0.5);
    check(
        "batch_norm train",
        &[x.clone(), g.clone(), be.clone()],
        SMOOTH,
        |v| Ok(v[0].batch_norm_train(v[1], v[2], 1e-5)?.0),
    );
    check("batch_norm eval", &[x, g, be], SMOOTH, |v| {
        v[0].batch_norm_eval(v[1], v[2], &[0.1, -0.2, 0.3], &[1.2, 0.8, 0.5], 1e-5)
    });
}

/// Differentiates `loss` with respect to sampled entries of every
/// trainable parameter in `store`.
fn check_params<F>(name: &str, store: &mut ParamStore, samples: usize, tol: f64, mut loss: F)
where
    F: for<'t> FnMut(&mut ParamStore, &'t Tape) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let l = loss(store, &tape).unwrap();
    l.backward().unwrap();
    store.zero_all_grads();
    store.absorb_grads(&tape);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ids: Vec<_> = store
        .ids()
        .filter(|&id| store.entry(id).trainable())
        .collect();
    for id in ids {
        let n = store.get(id).numel();
        let analytic = store
            .get(id)
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        for _ in 0..samples.min(n) {
            let k = rng.random_range(0..n);
            let orig = store.get(id).data()[k];
            let mut at = |v: f64, store: &mut ParamStore| {
                store.get_mut(id).data_mut()[k] = v;
                let tape = Tape::new();
                loss(store, &tape).unwrap().item()
            };
            let numeric = (at(orig + H, store) - at(orig - H, store)) / (2.0 * H);
            store.get_mut(id).data_mut()[k] = orig;
            let err = rel_err(analytic[k], numeric);
            assert!(
                err < tol,
                "{name}: {} [{k}] analytic {} numeric {numeric} (rel {err:e})",
                store.entry(id).name,
                analytic[k]
            );
        }
    }
}

#[test]
pub fn layers() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[3, 4, 10], -1.0, 1.0);

    let mut store = ParamStore::new();
    let conv = Conv1d::new(
        &mut store,
        &mut rng,
        "conv",
        Group::Extractor,
        4,
        3,
        3,
        2,
        1,
    );
    check_params("Conv1d", &mut store, 20, SMOOTH, |s, t| {
        Ok(project(conv.forward(s, t.var(&x))?))
    });

    let mut store = ParamStore::new();
    let bn = BatchNorm1d::new(&mut store, "bn", Group::Extractor, 4);
    check_params("BatchNorm1d", &mut store, 20, SMOOTH, |s, t| {
        Ok(project(bn.forward(s, t.var(&x), Mode::Train)?))
    });

    let mut store = ParamStore::new();
    let att = Attention::new(&mut store, &mut rng, "att", Group::AttentionSource, 4, 2);
    check_params("Attention", &mut store, 20, SMOOTH, |s, t| {
        Ok(project(att.forward(s, t.var(&x))?))
    });
    let xg = x.clone();
    check("Attention input", &[xg], SMOOTH, |v| {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let att = Attention::new(&mut store, &mut rng, "att", Group::AttentionSource, 4, 2);
        att.forward(&store, v[0])
    });

    let flat = random(&mut rng, &[3, 6], -1.0, 1.0);
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, &mut rng, "fc", Group::Classifier1, 6, 4);
    check_params("Linear", &mut store, 20, SMOOTH, |s, t| {
        Ok(project(lin.forward(s, t.var(&flat))?))
    });
}

#[test]
pub fn losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ds = random(&mut rng, &[5], 0.05, 0.95);
    let dt = random(&mut rng, &[6], 0.05, 0.95);
    check(
        "discriminator_loss",
        &[ds.clone(), dt.clone()],
        SMOOTH,
        |v| losses::discriminator_loss(v[0], v[1]),
    );
    check("adversarial_loss", &[ds, dt], SMOOTH, |v| {
        losses::adversarial_loss(v[0], v[1])
    });

    let logits = random(&mut rng, &[4, 5], -2.0, 2.0);
    check(
        "source_cls_loss",
        std::slice::from_ref(&logits),
        SMOOTH,
        |v| losses::source_cls_loss(v[0].softmax(1)?, &[1, 0, 4, 3]),
    );
    check("target_cls_loss", &[logits], SMOOTH, |v| {
        losses::target_cls_loss(v[0].softmax(1)?, &[2, 2, 0, 1])
    });

    // Keep the inner product away from zero, where |·| has its kink.
    let t1 = random(&mut rng, &[7], 0.2, 1.0);
    let t2 = random(&mut rng, &[7], 0.2, 1.0);
    check(
        "classifier_regularizer",
        &[t1.clone(), t2.clone()],
        KINKED,
        |v| losses::classifier_regularizer(v[0], v[1]),
    );
    let t2n = Tensor::new(&[7], t2.data().iter().map(|v| -v).collect()).unwrap();
    check("classifier_regularizer negative", &[t1, t2n], KINKED, |v| {
        losses::classifier_regularizer(v[0], v[1])
    });

    let parts = random(&mut rng, &[4], 0.1, 2.0);
    check("overall_loss", &[parts], SMOOTH, |v| {
        let c = |i: usize| -> Result<Var> {
            let mask: Vec<f64> = (0..4).map(|k| if k == i { 1.0 } else { 0.0 }).collect();
            Ok(v[0].mul(v[0].tape().constant(&[4], mask)?)?.sum())
        };
        losses::overall_loss(
            &Components {
                l_adv: Some(c(0)?),
                l_cls_s: c(1)?,
                l_cls_t: Some(c(2)?),
                reg: Some(c(3)?),
            },
            LossWeights::default(),
        )
    });
}

fn small_arch() -> ArchConfig {
    ArchConfig {
        epoch_len: 120,
        channels: vec![4, 6],
        kernels: vec![9, 5],
        strides: vec![2, 1],
        paddings: vec![0, 1],
        discriminator_hidden: 8,
        classifier_hidden: 8,
        ..ArchConfig::default()
    }
}

#[test]
pub fn full_model_objectives() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let xs = random(&mut rng, &[4, 1, 120], -1.0, 1.0);
    let xt = random(&mut rng, &[4, 1, 120], -1.0, 1.0);
    let model = AdastModel::new(small_arch(), 3).unwrap();

    // Everything except the discriminator step: adversarial, both
    // classification terms and the regularizer, through F, A_s, A_t, D,
    // C1 and C2.
    let mut store = model.params.clone();
    let mut m = model.clone();
    check_params("overall objective", &mut store, 6, KINKED, |s, t| {
        m.params = s.clone();
        let fs = m.extract(t.var(&xs), Mode::Train)?;
        let fs = m.attend(fs, Domain::Source)?;
        let ft = m.extract(t.var(&xt), Mode::Train)?;
        let ft = m.attend(ft, Domain::Target)?;
        let l_adv = losses::adversarial_loss(m.discriminate(fs)?, m.discriminate(ft)?)?;
        let l_cls_s = losses::source_cls_loss(m.classify(fs)?, &[0, 1, 2, 3])?;
        let l_cls_t = losses::target_cls_loss(m.classify(ft)?, &[4, 2, 2, 0])?;
        let (a, b) = m.classifier_param_vectors(t)?.unwrap();
        let reg = losses::classifier_regularizer(a, b)?;
        let w = LossWeights {
            lambda1: 0.5,
            lambda2: 0.1,
        };
        losses::overall_loss(
            &Components {
                l_adv: Some(l_adv),
                l_cls_s,
                l_cls_t: Some(l_cls_t),
                reg: Some(reg),
            },
            w,
        )
    });

    let mut store = model.params.clone();
    let mut m = model;
    check_params("discriminator objective", &mut store, 6, KINKED, |s, t| {
        m.params = s.clone();
        let fs = m.extract(t.var(&xs), Mode::Train)?;
        let fs = m.attend(fs, Domain::Source)?;
        let ft = m.extract(t.var(&xt), Mode::Train)?;
        let ft = m.attend(ft, Domain::Target)?;
        losses::discriminator_loss(m.discriminate(fs)?, m.discriminate(ft)?)
    });
}
