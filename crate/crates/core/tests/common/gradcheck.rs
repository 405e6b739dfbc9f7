//! Finite-difference checks of tape gradients. Each case builds a random
//! instance (inputs and parameters) from a seed and records its outputs on
//! a fresh tape; the loss is a fixed random projection of every output.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use vidseq::model::{
    Autoencoder, BlockR, Conv, ConvLstmCell, DecoderKind, Dense, EncoderBlock, ModelConfig, ModelVariant, SeqNorm,
    TransformerConfig, TransformerLayer, UpBlock,
};
use vidseq::tensor::{ConvSpec, Graph, Padding, ParamId, ParamStore, PoolKind, Tape, Tensor, Var};
use vidseq::train::loss::{reconstruction_var, triplet_var};
use vidseq::Result;

pub const TOLERANCE: f64 = 1e-3;
const STEP: f64 = 1e-5;
/// Denominator floor so that gradients near zero are compared absolutely.
const FLOOR: f64 = 1e-4;

type Forward = Box<dyn Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Vec<Var>>>;

pub struct Instance {
    pub store: ParamStore,
    pub inputs: Vec<Tensor>,
    pub forward: Forward,
    /// Coordinates probed per input or parameter tensor.
    pub probes: usize,
    /// Parameter tensors probed, all when `None`.
    pub param_sample: Option<usize>,
}

pub struct GradCase {
    pub name: &'static str,
    pub build: fn(&mut ChaCha8Rng) -> Instance,
}

pub fn randn(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
}

fn inst(store: ParamStore, inputs: Vec<Tensor>, forward: Forward) -> Instance {
    Instance { store, inputs, forward, probes: 6, param_sample: None }
}

fn single(f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Forward {
    Box::new(move |g, _, xs| Ok(vec![f(g, xs)?]))
}

/// Largest relative error seen and the coordinate where it occurred.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub worst: f64,
    pub at: String,
}

fn loss_of(inst: &Instance, store: &ParamStore, inputs: &[Tensor], weights: &[Tensor]) -> Result<(Tape, Vec<Var>, Var)> {
    let mut g = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let outs = (inst.forward)(&mut g, store, &vars)?;
    let mut total: Option<Var> = None;
    for (o, w) in outs.iter().zip(weights) {
        let w = g.constant(w.clone());
        let p = g.mul(o, &w)?;
        let s = g.sum(&p);
        total = Some(match total {
            Some(t) => g.add(&t, &s)?,
            None => s,
        });
    }
    let total = total.expect("case has outputs");
    Ok((g, vars, total))
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Compares analytic and central-difference gradients on a sample of
/// coordinates of every input and parameter. Where the function has a
/// kink within the step, a one-sided difference that agrees is accepted.
pub fn check(case: &GradCase, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inst = (case.build)(&mut rng);
    let shapes: Vec<Vec<usize>> = {
        let mut g = Tape::new();
        let vars: Vec<Var> = inst.inputs.iter().map(|t| g.input(t.clone())).collect();
        let outs = (inst.forward)(&mut g, &inst.store, &vars)?;
        outs.iter().map(|o| g.value(o).shape().to_vec()).collect()
    };
    let weights: Vec<Tensor> = shapes.iter().map(|s| randn(&mut rng, s)).collect();
    let (g, vars, loss) = loss_of(&inst, &inst.store, &inst.inputs, &weights)?;
    let grads = g.backward(loss)?;
    let param_grads: Vec<(ParamId, Vec<f64>)> = grads.params().map(|(id, v)| (id, v.to_vec())).collect();

    let eval = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
        let (g, _, l) = loss_of(&inst, store, inputs, &weights)?;
        Ok(g.value(&l).item())
    };
    let base = eval(&inst.store, &inst.inputs)?;

    let mut worst = CheckOutcome { worst: 0.0, at: String::new() };
    let mut note = |err: f64, at: String| {
        if err > worst.worst || worst.at.is_empty() {
            worst = CheckOutcome { worst: err, at };
        }
    };
    let judge = |analytic: f64, plus: f64, minus: f64| {
        let central = rel_err(analytic, (plus - minus) / (2.0 * STEP));
        let right = rel_err(analytic, (plus - base) / STEP);
        let left = rel_err(analytic, (base - minus) / STEP);
        if central <= TOLERANCE { central } else { central.min(right).min(left) }
    };

    for (i, x) in inst.inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]).map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; x.len()]);
        for j in probe_indices(&mut rng, x.len(), inst.probes) {
            let mut inputs = inst.inputs.clone();
            inputs[i].data_mut()[j] += STEP;
            let plus = eval(&inst.store, &inputs)?;
            inputs[i].data_mut()[j] -= 2.0 * STEP;
            let minus = eval(&inst.store, &inputs)?;
            note(judge(analytic[j], plus, minus), format!("input {i}[{j}]"));
        }
    }
    let mut ids: Vec<ParamId> = inst.store.ids().collect();
    if let Some(k) = inst.param_sample {
        ids = probe_indices(&mut rng, ids.len(), k).into_iter().map(|i| ids[i]).collect();
    }
    for id in ids {
        let value = inst.store.get(id).value().clone();
        let analytic = param_grads
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, v)| v.clone())
            .unwrap_or_else(|| vec![0.0; value.len()]);
        let mut store = inst.store.clone();
        for j in probe_indices(&mut rng, value.len(), inst.probes) {
            let mut v = value.clone();
            v.data_mut()[j] += STEP;
            store.set_value(id, v.clone())?;
            let plus = eval(&store, &inst.inputs)?;
            v.data_mut()[j] -= 2.0 * STEP;
            store.set_value(id, v)?;
            let minus = eval(&store, &inst.inputs)?;
            note(judge(analytic[j], plus, minus), format!("{}[{j}]", inst.store.get(id).name()));
        }
        store.set_value(id, value)?;
    }
    Ok(worst)
}

fn probe_indices(rng: &mut impl Rng, len: usize, k: usize) -> Vec<usize> {
    if len <= k {
        (0..len).collect()
    } else {
        sample(rng, len, k).into_vec()
    }
}

fn dims(rng: &mut impl Rng, rank: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.gen_range(lo..=hi)).collect()
}

fn even_dims(rng: &mut impl Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| 2 * rng.gen_range(1..=3)).collect()
}

fn with_channels(mut sp: Vec<usize>, c: usize) -> Vec<usize> {
    sp.push(c);
    sp
}

fn unary(rng: &mut ChaCha8Rng, f: fn(&mut Tape, &Var) -> Var) -> Instance {
    let s = dims(rng, 2, 1, 4);
    inst(ParamStore::new(), vec![randn(rng, &s)], single(move |g, x| Ok(f(g, &x[0]))))
}

fn binary(rng: &mut ChaCha8Rng, f: fn(&mut Tape, &Var, &Var) -> Result<Var>) -> Instance {
    let s = dims(rng, 3, 1, 3);
    inst(ParamStore::new(), vec![randn(rng, &s), randn(rng, &s)], single(move |g, x| f(g, &x[0], &x[1])))
}

fn conv_case(rng: &mut ChaCha8Rng, rank: usize, spec: ConvSpec) -> Instance {
    let (cin, cout) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
    let k: Vec<usize> = (0..rank).map(|_| [1, 3][rng.gen_range(0..2)]).collect();
    let sp: Vec<usize> = k.iter().map(|&e| rng.gen_range(e..=e + 2)).collect();
    let x = randn(rng, &with_channels(sp, cin));
    let mut ks = k.clone();
    ks.extend([cin, cout]);
    let w = randn(rng, &ks);
    inst(ParamStore::new(), vec![x, w], single(move |g, v| g.conv(&v[0], &v[1], spec)))
}

fn pool_case(rng: &mut ChaCha8Rng, kind: PoolKind, rank: usize) -> Instance {
    let sp = even_dims(rng, rank);
    let c = rng.gen_range(1..=3);
    inst(ParamStore::new(), vec![randn(rng, &with_channels(sp, c))], single(move |g, v| g.pool(&v[0], kind, 2)))
}

fn norm_case(rng: &mut ChaCha8Rng, layer: bool) -> Instance {
    let (rows, c) = (rng.gen_range(2..=5), rng.gen_range(1..=4));
    let x = randn(rng, &[rows, c]);
    let gamma = randn(rng, &[c]);
    let beta = randn(rng, &[c]);
    inst(
        ParamStore::new(),
        vec![x, gamma, beta],
        single(move |g, v| {
            if layer {
                g.layer_norm(&v[0], &v[1], &v[2], 1e-5)
            } else {
                g.channel_norm(&v[0], &v[1], &v[2], 1e-5)
            }
        }),
    )
}

/// A `t`-step sequence of `(spatial..., c)` frames as separate inputs.
fn frames(rng: &mut ChaCha8Rng, t: usize, sp: &[usize], c: usize) -> Vec<Tensor> {
    (0..t).map(|_| randn(rng, &with_channels(sp.to_vec(), c))).collect()
}

/// Parameters are Xavier-initialized; biases and norm parameters start at
/// 0 and 1, which hides mistakes, so everything is jittered.
fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let mut v = store.get(id).value().clone();
        v.data_mut().iter_mut().for_each(|x| *x += 0.3 * rng.sample::<f64, _>(StandardNormal));
        store.set_value(id, v).unwrap();
    }
}

fn encoder_block(rng: &mut ChaCha8Rng, rank: usize) -> Instance {
    let mut store = ParamStore::new();
    let (cin, hidden, out) = (rng.gen_range(1..=2), 2, 2);
    let block = EncoderBlock::new(&mut store, "b", rank, cin, hidden, out, 3, 0.2, 1e-5, rng).unwrap();
    jitter(&mut store, rng);
    let sp = vec![if rank == 2 { 4 } else { 2 }; rank];
    let xs = frames(rng, 2, &sp, cin);
    inst(store, xs, Box::new(move |g, s, v| block.forward(g, s, v, "b", &mut Vec::new())))
}

fn up_block(rng: &mut ChaCha8Rng, kind: DecoderKind, rank: usize) -> Instance {
    let mut store = ParamStore::new();
    let (cin, hidden, out) = (rng.gen_range(1..=2), 2, 2);
    let block = UpBlock::new(&mut store, "u", kind, rank, cin, hidden, out, 3, 0.2, 1e-5, rng).unwrap();
    jitter(&mut store, rng);
    let sp = vec![2; rank];
    let xs = frames(rng, 2, &sp, cin);
    inst(store, xs, Box::new(move |g, s, v| block.forward(g, s, v, "u", &mut Vec::new())))
}

fn tiny_model(variant: ModelVariant, rank: usize) -> ModelConfig {
    let mut cfg = ModelConfig::desk(variant);
    cfg.spatial_rank = rank;
    cfg.frame_size = 8;
    cfg.clip_len = 2;
    cfg.hidden = vec![2, 2, 2];
    cfg.proj_channels = 2;
    cfg.embedding_dim = 4;
    if cfg.transformer.is_some() {
        cfg.transformer = Some(TransformerConfig { layers: 1, heads: 2, hidden: 4, intermediate: 6 });
    }
    cfg
}

fn full_model(rng: &mut ChaCha8Rng, variant: ModelVariant) -> Instance {
    let rank = if variant.is_3d() { 3 } else { 2 };
    let cfg = tiny_model(variant, rank);
    let mut model = Autoencoder::new(cfg.clone(), rng.gen()).unwrap();
    jitter(model.store_mut(), rng);
    let clip = vidseq::model::ClipTensor::new(randn(rng, &cfg.clip_shape())).unwrap();
    let store = model.store().clone();
    let mut i = inst(
        store,
        Vec::new(),
        Box::new(move |g, s, _| {
            // The model reads its own store; swap in the perturbed one.
            let mut m = model.clone();
            *m.store_mut() = s.clone();
            Ok(vec![reconstruction_var(g, &m, &clip)?])
        }),
    );
    i.probes = 1;
    i.param_sample = Some(if variant.is_3d() { 20 } else { 40 });
    i
}

pub fn cases() -> Vec<GradCase> {
    vec![
        GradCase { name: "add", build: |r| binary(r, |g, a, b| g.add(a, b)) },
        GradCase { name: "sub", build: |r| binary(r, |g, a, b| g.sub(a, b)) },
        GradCase { name: "mul", build: |r| binary(r, |g, a, b| g.mul(a, b)) },
        GradCase {
            name: "add_bias",
            build: |r| {
                let s = dims(r, 3, 1, 3);
                let (x, b) = (randn(r, &s), randn(r, &[s[2]]));
                inst(ParamStore::new(), vec![x, b], single(|g, v| g.add_bias(&v[0], &v[1])))
            },
        },
        GradCase { name: "scale", build: |r| unary(r, |g, x| g.scale(x, -1.7)) },
        GradCase { name: "add_scalar", build: |r| unary(r, |g, x| g.add_scalar(x, 0.4)) },
        GradCase { name: "leaky_relu", build: |r| unary(r, |g, x| g.leaky_relu(x, 0.2)) },
        GradCase { name: "relu", build: |r| unary(r, |g, x| g.relu(x)) },
        GradCase { name: "sigmoid", build: |r| unary(r, |g, x| g.sigmoid(x)) },
        GradCase { name: "tanh", build: |r| unary(r, |g, x| g.tanh(x)) },
        GradCase { name: "softmax", build: |r| unary(r, |g, x| g.softmax(x)) },
        GradCase { name: "sum", build: |r| unary(r, |g, x| g.sum(x)) },
        GradCase { name: "mean", build: |r| unary(r, |g, x| g.mean(x)) },
        GradCase { name: "conv1d", build: |r| conv_case(r, 1, ConvSpec::default()) },
        GradCase { name: "conv2d", build: |r| conv_case(r, 2, ConvSpec::default()) },
        GradCase { name: "conv3d", build: |r| conv_case(r, 3, ConvSpec::default()) },
        GradCase { name: "conv4d", build: |r| conv_case(r, 4, ConvSpec::default()) },
        GradCase {
            name: "conv2d_valid_stride2",
            build: |r| conv_case(r, 2, ConvSpec { stride: 2, padding: Padding::Valid }),
        },
        GradCase { name: "max_pool2d", build: |r| pool_case(r, PoolKind::Max, 2) },
        GradCase { name: "max_pool3d", build: |r| pool_case(r, PoolKind::Max, 3) },
        GradCase { name: "avg_pool2d", build: |r| pool_case(r, PoolKind::Avg, 2) },
        GradCase {
            name: "upsample",
            build: |r| {
                let s = with_channels(dims(r, 2, 1, 3), 2);
                inst(ParamStore::new(), vec![randn(r, &s)], single(|g, v| g.upsample(&v[0], 2)))
            },
        },
        GradCase {
            name: "matmul",
            build: |r| {
                let (m, k, n) = (r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(1..=4));
                inst(ParamStore::new(), vec![randn(r, &[m, k]), randn(r, &[k, n])], single(|g, v| g.matmul(&v[0], &v[1])))
            },
        },
        GradCase {
            name: "transpose",
            build: |r| {
                let s = dims(r, 2, 1, 4);
                inst(ParamStore::new(), vec![randn(r, &s)], single(|g, v| g.transpose(&v[0])))
            },
        },
        GradCase {
            name: "reshape",
            build: |r| {
                let s = dims(r, 3, 1, 3);
                inst(
                    ParamStore::new(),
                    vec![randn(r, &s)],
                    single(move |g, v| {
                        let n = g.value(&v[0]).len();
                        let flat = g.reshape(&v[0], &[n])?;
                        // Shape-only ops pass gradients straight through,
                        // so square to give the check something to see.
                        g.mul(&flat, &flat)
                    }),
                )
            },
        },
        GradCase {
            name: "concat",
            build: |r| {
                let lead = dims(r, 2, 1, 3);
                let a = randn(r, &with_channels(lead.clone(), 2));
                let b = randn(r, &with_channels(lead, 3));
                inst(ParamStore::new(), vec![a, b], single(|g, v| g.concat(&[v[0], v[1]])))
            },
        },
        GradCase {
            name: "slice",
            build: |r| {
                let s = with_channels(dims(r, 2, 1, 3), 5);
                inst(ParamStore::new(), vec![randn(r, &s)], single(|g, v| g.slice(&v[0], 1, 3)))
            },
        },
        GradCase {
            name: "stack_index",
            build: |r| {
                let s = dims(r, 2, 1, 3);
                inst(
                    ParamStore::new(),
                    vec![randn(r, &s), randn(r, &s), randn(r, &s)],
                    Box::new(|g, _, v| {
                        let st = g.stack(v)?;
                        Ok(vec![st, g.index(&st, 1)?])
                    }),
                )
            },
        },
        GradCase { name: "channel_norm", build: |r| norm_case(r, false) },
        GradCase { name: "layer_norm", build: |r| norm_case(r, true) },
        GradCase {
            name: "triplet_loss",
            build: |r| {
                let d = r.gen_range(2..=6);
                inst(
                    ParamStore::new(),
                    vec![randn(r, &[d]), randn(r, &[d]), randn(r, &[d])],
                    // Margin 2 keeps the hinge active for most draws.
                    single(|g, v| triplet_var(g, &v[0], &v[1], &v[2], 2.0)),
                )
            },
        },
        GradCase {
            name: "dense",
            build: |r| {
                let mut store = ParamStore::new();
                let (i, o) = (r.gen_range(1..=5), r.gen_range(1..=5));
                let d = Dense::new(&mut store, "d", i, o, r).unwrap();
                jitter(&mut store, r);
                let x = randn(r, &[2, i]);
                inst(store, vec![x], Box::new(move |g, s, v| Ok(vec![d.forward(g, s, &v[0])?])))
            },
        },
        GradCase {
            name: "conv_block",
            build: |r| {
                let mut store = ParamStore::new();
                let c = Conv::new(&mut store, "c", &[3, 3], 2, 3, r).unwrap();
                jitter(&mut store, r);
                let x = randn(r, &[3, 4, 2]);
                inst(store, vec![x], Box::new(move |g, s, v| Ok(vec![c.forward(g, s, &v[0])?])))
            },
        },
        GradCase {
            name: "seq_norm",
            build: |r| {
                let mut store = ParamStore::new();
                let n = SeqNorm::new(&mut store, "n", 2, 1e-5).unwrap();
                jitter(&mut store, r);
                let xs = frames(r, 3, &[2, 3], 2);
                inst(store, xs, Box::new(move |g, s, v| n.forward(g, s, v)))
            },
        },
        GradCase {
            name: "convlstm",
            build: |r| {
                let mut store = ParamStore::new();
                let cell = ConvLstmCell::new(&mut store, "l", 2, 2, &[3, 3], r).unwrap();
                jitter(&mut store, r);
                let xs = frames(r, 3, &[3, 3], 2);
                let reverse = r.gen_bool(0.5);
                inst(store, xs, Box::new(move |g, s, v| cell.run(g, s, v, reverse)))
            },
        },
        GradCase {
            name: "block_r",
            build: |r| {
                let mut store = ParamStore::new();
                let b = BlockR::new(&mut store, "r", 2, 2, &[3, 3], 0.2, r).unwrap();
                jitter(&mut store, r);
                let xs = frames(r, 2, &[3, 3], 2);
                inst(store, xs, Box::new(move |g, s, v| b.forward(g, s, v)))
            },
        },
        GradCase { name: "lrbp", build: |r| encoder_block(r, 2) },
        GradCase { name: "l3rbp", build: |r| encoder_block(r, 3) },
        GradCase { name: "urb", build: |r| up_block(r, DecoderKind::ConvLstm, 2) },
        GradCase { name: "r3bp", build: |r| up_block(r, DecoderKind::ConvLstm, 3) },
        GradCase { name: "uqb", build: |r| up_block(r, DecoderKind::Quasi4d, 2) },
        GradCase { name: "u4db", build: |r| up_block(r, DecoderKind::Quasi4d, 3) },
        GradCase { name: "utb", build: |r| up_block(r, DecoderKind::Transformer, 2) },
        GradCase { name: "utb_3d", build: |r| up_block(r, DecoderKind::Transformer, 3) },
        GradCase {
            name: "transformer_layer",
            build: |r| {
                let mut store = ParamStore::new();
                let cfg = TransformerConfig { layers: 1, heads: 2, hidden: 4, intermediate: 6 };
                let layer = TransformerLayer::new(&mut store, "t", &cfg, 1e-5, r).unwrap();
                jitter(&mut store, r);
                let x = randn(r, &[3, 4]);
                inst(store, vec![x], Box::new(move |g, s, v| Ok(vec![layer.forward(g, s, &v[0])?])))
            },
        },
        GradCase { name: "model_m1", build: |r| full_model(r, ModelVariant::M1) },
        GradCase { name: "model_m2", build: |r| full_model(r, ModelVariant::M2) },
        GradCase { name: "model_m3", build: |r| full_model(r, ModelVariant::M3) },
        GradCase { name: "model_m1_3d", build: |r| full_model(r, ModelVariant::M1_3d) },
        GradCase { name: "model_m2_3d", build: |r| full_model(r, ModelVariant::M2_3d) },
        GradCase { name: "model_m3_3d", build: |r| full_model(r, ModelVariant::M3_3d) },
    ]
}
