//! Shared test oracles: central finite differences against the tape, and
//! the synthetic train/validation/test split used by end-to-end runs.

#![allow(dead_code)]

use pclfit_core::autodiff::{Tape, Var};
use pclfit_core::encoder::EncoderConfig;
use pclfit_core::heads::batch_mean;
use pclfit_core::model::{Classifier, ModelConfig, Subtask};
use pclfit_core::{ParamStore, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so that vanishing gradients are
/// compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-6;
const DESK_JITTER: f64 = 0.0;

#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < FD_TOLERANCE
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Compares the tape's gradient of `Σ wᵢ·outᵢ` (fixed random `w`) with
/// central differences in every input element.
pub fn check_op<F>(name: &str, inputs: Vec<Tensor>, build: F) -> GradCase
where
    F: for<'a> Fn(&mut Tape<'a>, &[Var]) -> Result<Var>,
{
    let inputs: Vec<Tensor> = inputs.into_iter().map(Tensor::with_grad).collect();
    let forward = |xs: &[Tensor]| -> Vec<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x)).collect();
        let out = build(&mut tape, &vars).unwrap();
        tape.value(out).to_vec()
    };
    let n_out = forward(&inputs).len();
    let mut wrng = ChaCha8Rng::seed_from_u64(0xF00D);
    let w: Vec<f64> = (0..n_out).map(|_| wrng.random_range(-1.0..1.0)).collect();
    let objective = |xs: &[Tensor]| -> f64 { forward(xs).iter().zip(&w).map(|(o, w)| o * w).sum() };

    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x)).collect();
        let out = build(&mut tape, &vars).unwrap();
        let weighted = tape.mul_const(out, w.clone()).unwrap();
        let loss = tape.sum(weighted);
        tape.backward(loss).unwrap();
        vars.iter()
            .zip(&inputs)
            .map(|(&v, x)| tape.grad(v).map_or_else(|| vec![0.0; x.len()], <[f64]>::to_vec))
            .collect()
    };

    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut probe = inputs.clone();
    for t in 0..probe.len() {
        for i in 0..probe[t].len() {
            let orig = probe[t].data()[i];
            probe[t].data_mut()[i] = orig + FD_STEP;
            let up = objective(&probe);
            probe[t].data_mut()[i] = orig - FD_STEP;
            let down = objective(&probe);
            probe[t].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[t][i], numeric));
            checked += 1;
        }
    }
    GradCase {
        name: name.to_string(),
        max_rel_err: worst,
        checked,
    }
}

/// One primitive per case, on random inputs away from kinks.
pub fn primitive_cases() -> Vec<GradCase> {
    let mut r = ChaCha8Rng::seed_from_u64(2024);
    let mut cases = Vec::new();
    let a34 = random(&[3, 4], -1.0, 1.0, &mut r);
    let b45 = random(&[4, 5], -1.0, 1.0, &mut r);
    let b54 = random(&[5, 4], -1.0, 1.0, &mut r);
    let c34 = random(&[3, 4], -1.0, 1.0, &mut r);
    let row4 = random(&[4], -1.0, 1.0, &mut r);
    let prob34 = random(&[3, 4], 0.05, 0.95, &mut r);

    cases.push(check_op("matmul", vec![a34.clone(), b45], |t, v| t.matmul(v[0], v[1])));
    cases.push(check_op("matmul_t", vec![a34.clone(), b54], |t, v| t.matmul_t(v[0], v[1])));
    cases.push(check_op("add", vec![a34.clone(), c34.clone()], |t, v| t.add(v[0], v[1])));
    cases.push(check_op("add_row", vec![a34.clone(), row4.clone()], |t, v| t.add_row(v[0], v[1])));
    cases.push(check_op("mul", vec![a34.clone(), c34.clone()], |t, v| t.mul(v[0], v[1])));
    cases.push(check_op("mul_const", vec![a34.clone()], |t, v| {
        t.mul_const(v[0], (0..12).map(|i| i as f64 * 0.25 - 1.0).collect())
    }));
    cases.push(check_op("affine", vec![a34.clone()], |t, v| Ok(t.affine(v[0], -1.7, 0.3))));
    cases.push(check_op("scale", vec![a34.clone()], |t, v| Ok(t.scale(v[0], 2.5))));
    cases.push(check_op("softmax", vec![a34.clone()], |t, v| t.softmax(v[0])));
    cases.push(check_op("masked_softmax", vec![a34.clone()], |t, v| {
        t.masked_softmax(v[0], &[true, false, true, true])
    }));
    cases.push(check_op("sigmoid", vec![a34.clone()], |t, v| Ok(t.sigmoid(v[0]))));
    cases.push(check_op("tanh", vec![a34.clone()], |t, v| Ok(t.tanh(v[0]))));
    cases.push(check_op("gelu", vec![a34.clone()], |t, v| Ok(t.gelu(v[0]))));
    cases.push(check_op(
        "layer_norm",
        vec![a34.clone(), random(&[4], 0.5, 1.5, &mut r), row4.clone()],
        |t, v| t.layer_norm(v[0], v[1], v[2]),
    ));
    cases.push(check_op("gather", vec![random(&[6, 4], -1.0, 1.0, &mut r)], |t, v| {
        t.gather(v[0], &[5, 0, 2, 5])
    }));
    cases.push(check_op("dropout", vec![a34.clone()], |t, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        t.dropout(v[0], 0.3, true, &mut rng)
    }));
    cases.push(check_op("slice_cols", vec![a34.clone()], |t, v| t.slice_cols(v[0], 1, 2)));
    cases.push(check_op("concat_cols", vec![a34.clone(), random(&[3, 2], -1.0, 1.0, &mut r)], |t, v| {
        t.concat_cols(&[v[0], v[1]])
    }));
    cases.push(check_op("rows", vec![a34.clone()], |t, v| t.rows(v[0], 1, 2)));
    cases.push(check_op("reshape", vec![a34.clone()], |t, v| t.reshape(v[0], &[2, 6])));
    cases.push(check_op("sum", vec![a34.clone()], |t, v| Ok(t.sum(v[0]))));
    cases.push(check_op("ln_clamped", vec![prob34.clone()], |t, v| {
        Ok(t.ln_clamped(v[0], 1e-12, 1.0 - 1e-12))
    }));
    cases.push(check_op("binary_nll", vec![random(&[2], -1.0, 1.0, &mut r)], |t, v| {
        let row = t.reshape(v[0], &[1, 2])?;
        let p = t.softmax(row)?;
        let p = t.reshape(p, &[2])?;
        pclfit_core::heads::binary_nll(t, p, 1)
    }));
    cases.push(check_op("multilabel_nll", vec![random(&[7], 0.05, 0.95, &mut r)], |t, v| {
        pclfit_core::heads::multilabel_nll(t, v[0], &[1, 0, 0, 1, 0, 1, 0])
    }));
    cases.push(check_op(
        "batch_mean",
        vec![random(&[1], -1.0, 1.0, &mut r), random(&[1], -1.0, 1.0, &mut r)],
        |t, v| batch_mean(t, v),
    ));
    cases
}

/// Gradient of a batch loss through dropout, every encoder block, the
/// pooler and the head, against central differences in the parameters.
/// `per_tensor` limits the coordinates checked per parameter tensor;
/// `jitter` is added uniformly to the initial weights.
pub fn check_model(name: &str, config: ModelConfig, per_tensor: Option<usize>, jitter: f64) -> GradCase {
    let mut init = ChaCha8Rng::seed_from_u64(77);
    let mut store = ParamStore::new();
    let model = Classifier::init(config.clone(), &mut store, &mut init).unwrap();
    if jitter > 0.0 {
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.get_mut(id).tensor.data_mut() {
                *v += init.random_range(-jitter..jitter);
            }
        }
    }
    let vocab = config.encoder.vocab_size as u32;
    let batch: Vec<(Vec<u32>, Vec<u8>)> = match config.subtask {
        Subtask::Binary => vec![
            (vec![2, 5 % vocab, 7 % vocab, 3, 0, 0], vec![1]),
            (vec![2, 8 % vocab, 4, 9 % vocab, 6 % vocab, 3], vec![0]),
        ],
        Subtask::Categories => vec![
            (vec![2, 5 % vocab, 7 % vocab, 3, 0], vec![1, 0, 0, 1, 0, 0, 1]),
            (vec![2, 4, 9 % vocab, 3, 0], vec![0, 1, 0, 0, 0, 1, 0]),
        ],
    };
    fn batch_loss<'a>(
        model: &Classifier,
        store: &'a ParamStore,
        tape: &mut Tape<'a>,
        batch: &[(Vec<u32>, Vec<u8>)],
    ) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let losses: Vec<Var> = batch
            .iter()
            .map(|(toks, gold)| {
                let p = model.forward(tape, store, toks, true, &mut rng).unwrap();
                model.loss(tape, p, gold).unwrap()
            })
            .collect();
        batch_mean(tape, &losses).unwrap()
    }

    let analytic = {
        let mut tape = Tape::new();
        let l = batch_loss(&model, &store, &mut tape, &batch);
        tape.backward(l).unwrap();
        let mut g: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect();
        for (id, grad) in tape.into_param_grads() {
            g[id.0] = grad;
        }
        g
    };
    let value = |store: &ParamStore| -> f64 {
        let mut tape = Tape::new();
        let l = batch_loss(&model, store, &mut tape, &batch);
        tape.value(l)[0]
    };

    let mut pick = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for id in store.ids().collect::<Vec<_>>() {
        let len = store.get(id).tensor.len();
        let coords: Vec<usize> = match per_tensor {
            Some(k) if k < len => (0..k).map(|_| pick.random_range(0..len)).collect(),
            _ => (0..len).collect(),
        };
        for i in coords {
            let orig = store.get(id).tensor.data()[i];
            store.get_mut(id).tensor.data_mut()[i] = orig + FD_STEP;
            let up = value(&store);
            store.get_mut(id).tensor.data_mut()[i] = orig - FD_STEP;
            let down = value(&store);
            store.get_mut(id).tensor.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let e = rel_err(analytic[id.0][i], numeric);
            if e >= FD_TOLERANCE {
                eprintln!("{name}: {} [{i}] analytic {} numeric {numeric}", store.get(id).name, analytic[id.0][i]);
            }
            worst = worst.max(e);
            checked += 1;
        }
    }
    GradCase {
        name: name.to_string(),
        max_rel_err: worst,
        checked,
    }
}

pub fn tiny_model(subtask: Subtask) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            vocab_size: 12,
            d_model: 8,
            n_heads: 2,
            n_layers: 3,
            d_ff: 16,
            max_len: 8,
            dropout: 0.2,
        },
        subtask,
    }
}

pub fn desk_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig::desk(40),
        subtask: Subtask::Binary,
    }
}

/// Every primitive, the full classifier for both heads at small width, and
/// sampled coordinates of the desk-scale binary classifier.
pub fn gradient_suite() -> Vec<GradCase> {
    let mut cases = primitive_cases();
    cases.push(check_model("classifier/binary (all params)", tiny_model(Subtask::Binary), None, 0.3));
    cases.push(check_model("classifier/categories (all params)", tiny_model(Subtask::Categories), None, 0.3));
    cases.push(check_model("classifier/desk (sampled)", desk_model(), Some(3), DESK_JITTER));
    cases
}

pub const SYNTHETIC_ETA: f64 = 3e-4;

#[derive(Clone, Debug)]
pub struct SyntheticRun {
    pub seed: u64,
    pub test_f1: f64,
    pub test_recall: f64,
    pub epochs_done: usize,
    pub steps: usize,
    pub secs: f64,
}

/// Desk-scale binary run on the default synthetic corpus. Stratified five-way
/// split: part 0 is the held-out test set, part 1 drives early stopping and
/// the rest is trained on.
pub fn synthetic_run(seed: u64, wrs: bool, llrd: bool) -> SyntheticRun {
    use pclfit_core::data::stratified_kfold;
    use pclfit_core::data::synthetic::{generate, SyntheticSpec};
    use pclfit_core::trainer::{
        build_vocab, evaluate_model, examples_from_records, fold_strata, train_fold, Example, RunConfig,
    };

    let started = std::time::Instant::now();
    let records = generate(&SyntheticSpec::default()).unwrap();
    let mut cfg = RunConfig::new(Subtask::Binary);
    cfg.eta = SYNTHETIC_ETA;
    cfg.lambda = 1.6;
    cfg.wrs = wrs;
    cfg.llrd = llrd;
    cfg.seed = seed;
    let vocab = build_vocab(&records, &cfg);
    let examples = examples_from_records(&records, &vocab, &cfg).unwrap();
    let parts = stratified_kfold(&fold_strata(&examples, &cfg), 5, 0).unwrap();
    let pick = |keep: &dyn Fn(usize) -> bool| -> Vec<Example> {
        (0..examples.len())
            .filter(|&i| keep(parts.fold_of[i]))
            .map(|i| examples[i].clone())
            .collect()
    };
    let test = pick(&|f| f == 0);
    let val = pick(&|f| f == 1);
    let train = pick(&|f| f >= 2);
    let out = train_fold(&cfg, &vocab, &train, &val, Default::default()).unwrap();
    let (model, store, _) = out.best.restore_model().unwrap();
    let eval = evaluate_model(&model, &store, &test).unwrap();
    SyntheticRun {
        seed,
        test_f1: eval.metric,
        test_recall: eval.recall,
        epochs_done: out.progress.epochs_done,
        steps: out.progress.steps_taken(),
        secs: started.elapsed().as_secs_f64(),
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}
