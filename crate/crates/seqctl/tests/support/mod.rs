//! Shared helpers for integration tests: a finite-difference gradient
//! suite over randomized kernel graphs and the model forwards.

#![allow(dead_code)]

use seqctl::data::TrainingBatch;
use seqctl::envs::{EnvKind, EnvSpec, Variant};
use seqctl::kernel::array::Array;
use seqctl::kernel::{causal_mask, masked_attention, Graph, NodeId, ParamStore, StreamRng};
use seqctl::models::{
    forward_for_training, init_parameters, ModelConfig, ModelVariant,
};

const FD_H: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

/// One gradient-check case: a parameter store plus a deterministic
/// forward builder producing a scalar loss.
pub struct GradCase {
    pub name: String,
    pub store: ParamStore,
    pub build: Box<dyn Fn(&ParamStore, &mut Graph) -> NodeId>,
}

fn rand_array(rng: &mut StreamRng, shape: Vec<usize>, lo: f64, hi: f64) -> Array {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.uniform(lo, hi))
        .collect();
    Array::new(shape, data)
}

/// Builds gadget `which` (cycled) with randomized shapes/values drawn
/// from `seed`. Every kernel op appears in at least one gadget.
pub fn gradient_case(which: usize, seed: u64) -> GradCase {
    let mut rng = StreamRng::new(seed, 0);
    let mut store = ParamStore::new();
    match which % 10 {
        0 => {
            // add / sub / mul / scale / tanh / sum.
            let n = 2 + rng.gen_index(4);
            let p1 = store.add("p1", rand_array(&mut rng, vec![n, n], -1.0, 1.0));
            let p2 = store.add("p2", rand_array(&mut rng, vec![n, n], -1.0, 1.0));
            GradCase {
                name: format!("elementwise(n={n})"),
                store,
                build: Box::new(move |s, g| {
                    let a = g.param(s, p1);
                    let b = g.param(s, p2);
                    let m = g.mul(a, b).unwrap();
                    let t = g.add(m, a).unwrap();
                    let t = g.sub(t, b).unwrap();
                    let t = g.tanh(t);
                    let t = g.scale(t, 1.7);
                    g.sum(t)
                }),
            }
        }
        1 => {
            // matmul / add_bias / mul_bias / sigmoid.
            let (m, k, n) = (1 + rng.gen_index(3), 2 + rng.gen_index(3), 2 + rng.gen_index(3));
            let x = store.add("x", rand_array(&mut rng, vec![m, k], -1.0, 1.0));
            let w = store.add("w", rand_array(&mut rng, vec![k, n], -1.0, 1.0));
            let b = store.add("b", rand_array(&mut rng, vec![n], -0.5, 0.5));
            let sc = store.add("sc", rand_array(&mut rng, vec![n], 0.5, 1.5));
            GradCase {
                name: format!("linear({m}x{k}x{n})"),
                store,
                build: Box::new(move |s, g| {
                    let xv = g.param(s, x);
                    let wv = g.param(s, w);
                    let bv = g.param(s, b);
                    let sv = g.param(s, sc);
                    let y = g.matmul(xv, wv).unwrap();
                    let y = g.add_bias(y, bv).unwrap();
                    let y = g.mul_bias(y, sv).unwrap();
                    let y = g.sigmoid(y);
                    g.sum(y)
                }),
            }
        }
        2 => {
            // relu / reshape / slice_lastdim.
            let n = 4 + 2 * rng.gen_index(3);
            let p = store.add("p", rand_array(&mut rng, vec![2, n], -1.0, 1.0));
            GradCase {
                name: format!("relu_slice(n={n})"),
                store,
                build: Box::new(move |s, g| {
                    let x = g.param(s, p);
                    let r = g.relu(x);
                    let r = g.reshape(r, vec![n, 2]);
                    let sl = g.slice_lastdim(r, 0, 1);
                    let t = g.tanh(sl);
                    g.sum(t)
                }),
            }
        }
        3 => {
            // softmax_lastdim mixed with mul.
            let n = 3 + rng.gen_index(3);
            let p = store.add("p", rand_array(&mut rng, vec![2, n], -2.0, 2.0));
            let v = store.add("v", rand_array(&mut rng, vec![2, n], -1.0, 1.0));
            GradCase {
                name: format!("softmax(n={n})"),
                store,
                build: Box::new(move |s, g| {
                    let x = g.param(s, p);
                    let vv = g.param(s, v);
                    let w = g.softmax_lastdim(x).unwrap();
                    let y = g.mul(w, vv).unwrap();
                    g.sum(y)
                }),
            }
        }
        4 => {
            // layer_norm_lastdim with affine.
            let n = 3 + rng.gen_index(4);
            let p = store.add("p", rand_array(&mut rng, vec![3, n], -2.0, 2.0));
            let gn = store.add("g", rand_array(&mut rng, vec![n], 0.5, 1.5));
            let bn = store.add("b", rand_array(&mut rng, vec![n], -0.5, 0.5));
            GradCase {
                name: format!("layernorm(n={n})"),
                store,
                build: Box::new(move |s, g| {
                    let x = g.param(s, p);
                    let gv = g.param(s, gn);
                    let bv = g.param(s, bn);
                    let ln = g.layer_norm_lastdim(x).unwrap();
                    let ln = g.mul_bias(ln, gv).unwrap();
                    let ln = g.add_bias(ln, bv).unwrap();
                    let t = g.sigmoid(ln);
                    g.sum(t)
                }),
            }
        }
        5 => {
            // batch_matmul / batch_matmul_tb / masked attention.
            let (b, t, d) = (1 + rng.gen_index(2), 2 + rng.gen_index(3), 2 + rng.gen_index(3));
            let q = store.add("q", rand_array(&mut rng, vec![b, t, d], -1.0, 1.0));
            let k = store.add("k", rand_array(&mut rng, vec![b, t, d], -1.0, 1.0));
            let v = store.add("v", rand_array(&mut rng, vec![b, t, d], -1.0, 1.0));
            GradCase {
                name: format!("attention({b}x{t}x{d})"),
                store,
                build: Box::new(move |s, g| {
                    let qv = g.param(s, q);
                    let kv = g.param(s, k);
                    let vv = g.param(s, v);
                    let mask = g.leaf(causal_mask(b, t));
                    let out = masked_attention(g, qv, kv, vv, mask).unwrap();
                    let sc = g.batch_matmul_tb(out, vv).unwrap();
                    let y = g.tanh(sc);
                    g.sum(y)
                }),
            }
        }
        6 => {
            // interleave3 / take_stride3 / take_time.
            let (b, k, h) = (1 + rng.gen_index(2), 2 + rng.gen_index(2), 2 + rng.gen_index(3));
            let pa = store.add("a", rand_array(&mut rng, vec![b, k, h], -1.0, 1.0));
            let pb = store.add("b", rand_array(&mut rng, vec![b, k, h], -1.0, 1.0));
            let pc = store.add("c", rand_array(&mut rng, vec![b, k, h], -1.0, 1.0));
            GradCase {
                name: format!("interleave({b}x{k}x{h})"),
                store,
                build: Box::new(move |s, g| {
                    let a = g.param(s, pa);
                    let bb = g.param(s, pb);
                    let c = g.param(s, pc);
                    let tok = g.interleave3(a, bb, c).unwrap();
                    let st = g.take_stride3(tok, 1);
                    let t0 = g.take_time(tok, 2);
                    let st = g.tanh(st);
                    let s1 = g.sum(st);
                    let t0 = g.sigmoid(t0);
                    let s2 = g.sum(t0);
                    g.add(s1, s2).unwrap()
                }),
            }
        }
        7 => {
            // gather_rows / stack_rows.
            let (v, h, n) = (4 + rng.gen_index(4), 2 + rng.gen_index(3), 3usize);
            let table = store.add("table", rand_array(&mut rng, vec![v, h], -1.0, 1.0));
            let part = store.add("part", rand_array(&mut rng, vec![2, h], -1.0, 1.0));
            let idx: Vec<usize> = (0..n).map(|_| rng.gen_index(v)).collect();
            GradCase {
                name: format!("gather_stack(v={v},h={h})"),
                store,
                build: Box::new(move |s, g| {
                    let t = g.param(s, table);
                    let p = g.param(s, part);
                    let rows = g.gather_rows(t, idx.clone()).unwrap();
                    let rows = g.tanh(rows);
                    let a = g.sum(rows);
                    let stacked = g.stack_rows(&[p, p]).unwrap();
                    let stacked = g.sigmoid(stacked);
                    let b = g.sum(stacked);
                    g.add(a, b).unwrap()
                }),
            }
        }
        8 => {
            // dropout in training mode with a deterministic mask.
            let n = 4 + rng.gen_index(4);
            let p = store.add("p", rand_array(&mut rng, vec![n, n], -1.0, 1.0));
            GradCase {
                name: format!("dropout(n={n})"),
                store,
                build: Box::new(move |s, g| {
                    let mut drop_rng = StreamRng::new(seed, 99);
                    let x = g.param(s, p);
                    let d = g.dropout(x, 0.3, &mut drop_rng);
                    let t = g.tanh(d);
                    g.sum(t)
                }),
            }
        }
        _ => {
            // LSTM-cell-shaped composite: slices + gates.
            let h = 2 + rng.gen_index(3);
            let x = store.add("x", rand_array(&mut rng, vec![2, h], -1.0, 1.0));
            let wx = store.add("wx", rand_array(&mut rng, vec![h, 4 * h], -0.5, 0.5));
            let b = store.add("b", rand_array(&mut rng, vec![4 * h], -0.5, 0.5));
            GradCase {
                name: format!("lstm_gates(h={h})"),
                store,
                build: Box::new(move |s, g| {
                    let xv = g.param(s, x);
                    let wxv = g.param(s, wx);
                    let bv = g.param(s, b);
                    let gates = g.matmul(xv, wxv).unwrap();
                    let gates = g.add_bias(gates, bv).unwrap();
                    let i = g.slice_lastdim(gates, 0, h);
                    let f = g.slice_lastdim(gates, h, h);
                    let gg = g.slice_lastdim(gates, 2 * h, h);
                    let o = g.slice_lastdim(gates, 3 * h, h);
                    let i = g.sigmoid(i);
                    let f = g.sigmoid(f);
                    let gg = g.tanh(gg);
                    let o = g.sigmoid(o);
                    let ig = g.mul(i, gg).unwrap();
                    let fc = g.mul(f, ig).unwrap();
                    let c = g.add(fc, ig).unwrap();
                    let ct = g.tanh(c);
                    let hh = g.mul(o, ct).unwrap();
                    g.sum(hh)
                }),
            }
        }
    }
}

/// Central-difference check of every parameter entry in the case.
/// Returns the worst relative deviation observed.
pub fn check_case(case: &mut GradCase) -> f64 {
    let mut g = Graph::new(true);
    let loss = (case.build)(&case.store, &mut g);
    assert_eq!(g.value(loss).len(), 1, "{}: scalar loss", case.name);
    case.store.zero_grads();
    g.backward(loss, &mut case.store).unwrap();
    let grads: Vec<Array> = (0..case.store.len())
        .map(|pid| case.store.grad(pid).clone())
        .collect();

    let mut worst: f64 = 0.0;
    for pid in 0..case.store.len() {
        for idx in 0..case.store.value(pid).len() {
            let orig = case.store.value(pid).data()[idx];
            case.store.value_mut(pid).data_mut()[idx] = orig + FD_H;
            let mut gp = Graph::new(true);
            let lp = (case.build)(&case.store, &mut gp);
            let fplus = gp.value(lp).item();
            case.store.value_mut(pid).data_mut()[idx] = orig - FD_H;
            let mut gm = Graph::new(true);
            let lm = (case.build)(&case.store, &mut gm);
            let fminus = gm.value(lm).item();
            case.store.value_mut(pid).data_mut()[idx] = orig;

            let fd = (fplus - fminus) / (2.0 * FD_H);
            let an = grads[pid].data()[idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1.0);
            worst = worst.max(rel);
            assert!(
                rel < FD_TOL,
                "{}: param {} [{}]: analytic {an} vs fd {fd} (rel {rel})",
                case.name,
                case.store.name(pid),
                idx
            );
        }
    }
    worst
}

/// Runs `n` randomized gadget cases; returns the worst deviation.
pub fn run_gradient_suite(n: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let mut case = gradient_case(i, 1000 + i as u64);
        worst = worst.max(check_case(&mut case));
    }
    worst
}

/// Gradient-checks each model variant end-to-end on a tiny config
/// (K=3, hidden=8) against central differences, sampling a subset of
/// parameter entries per tensor to keep the runtime small.
pub fn run_model_gradient_checks() -> f64 {
    let spec = EnvSpec::new(EnvKind::Furuta, Variant::Stabilize);
    let mut worst: f64 = 0.0;
    for (variant, fused) in [
        (ModelVariant::Dt, false),
        (ModelVariant::Dlstm, false),
        (ModelVariant::Dlstm, true),
        (ModelVariant::Bc, false),
    ] {
        let mut cfg = ModelConfig::defaults(variant, &spec);
        cfg.context_len = 3;
        cfg.hidden = 8;
        cfg.n_layers = 2;
        cfg.dropout = 0.0;
        cfg.fused_tokens = fused;
        cfg.rtg_scale = 1.0;
        if variant == ModelVariant::Dt {
            cfg.max_timestep = Some(30);
        }
        let mut model = init_parameters(&cfg, 5).unwrap();
        let batch = random_training_batch(&cfg, 2, 77, 1);

        let loss_of = |store: &ParamStore, g: &mut Graph| -> NodeId {
            let probe = seqctl::models::Model {
                cfg: cfg.clone(),
                store: store.clone(),
            };
            let mut rng = StreamRng::new(0, 0);
            let (pred, target, mask) = forward_for_training(g, &probe, &batch, &mut rng).unwrap();
            // Masked MSE without normalization constant (constant factor
            // is irrelevant for gradient checking).
            let t = g.leaf(target.clone());
            let m = g.leaf(mask.clone());
            let d = g.sub(pred, t).unwrap();
            let d2 = g.mul(d, d).unwrap();
            let masked = g.mul(d2, m).unwrap();
            g.sum(masked)
        };

        let mut g = Graph::new(true);
        let loss = loss_of(&model.store, &mut g);
        model.store.zero_grads();
        g.backward(loss, &mut model.store).unwrap();
        let grads: Vec<Array> = (0..model.store.len())
            .map(|pid| model.store.grad(pid).clone())
            .collect();

        let mut idx_rng = StreamRng::new(123, 0);
        for pid in 0..model.store.len() {
            let len = model.store.value(pid).len();
            let samples: Vec<usize> = (0..len.min(3)).map(|_| idx_rng.gen_index(len)).collect();
            for idx in samples {
                let orig = model.store.value(pid).data()[idx];
                model.store.value_mut(pid).data_mut()[idx] = orig + FD_H;
                let mut gp = Graph::new(true);
                let lp = loss_of(&model.store, &mut gp);
                let fplus = gp.value(lp).item();
                model.store.value_mut(pid).data_mut()[idx] = orig - FD_H;
                let mut gm = Graph::new(true);
                let lm = loss_of(&model.store, &mut gm);
                let fminus = gm.value(lm).item();
                model.store.value_mut(pid).data_mut()[idx] = orig;

                let fd = (fplus - fminus) / (2.0 * FD_H);
                let an = grads[pid].data()[idx];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1.0);
                worst = worst.max(rel);
                assert!(
                    rel < FD_TOL,
                    "{variant:?} fused={fused}: param {} [{idx}]: analytic {an} vs fd {fd}",
                    model.store.name(pid)
                );
            }
        }
    }
    worst
}

/// Randomized training batch with `pad_rows` left-padded slots in row 0.
pub fn random_training_batch(
    cfg: &ModelConfig,
    b: usize,
    seed: u64,
    pad_rows: usize,
) -> TrainingBatch {
    let (k, s, a) = (cfg.context_len, cfg.state_dim, cfg.action_dim);
    let mut rng = StreamRng::new(seed, 0);
    let mut rtg = vec![0.0; b * k];
    let mut obs = vec![0.0; b * k * s];
    let mut act = vec![0.0; b * k * a];
    let mut timesteps = vec![0usize; b * k];
    let mut pad_mask = vec![false; b * k];
    for bi in 0..b {
        let pad = if bi == 0 { pad_rows } else { 0 };
        for ki in 0..k {
            let slot = bi * k + ki;
            if ki < pad {
                pad_mask[slot] = true;
                continue;
            }
            rtg[slot] = rng.uniform(-1.0, 1.0);
            timesteps[slot] = ki;
            for j in 0..s {
                obs[slot * s + j] = rng.uniform(-1.0, 1.0);
            }
            for j in 0..a {
                act[slot * a + j] = rng.uniform(-1.0, 1.0);
            }
        }
    }
    TrainingBatch {
        rtg: Array::new(vec![b, k, 1], rtg),
        obs: Array::new(vec![b, k, s], obs),
        act: Array::new(vec![b, k, a], act),
        timesteps,
        pad_mask,
        batch: b,
        k,
    }
}
