//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use tokenroll::data::vocab::{CLS, PAD};
use tokenroll::model::{ForwardState, Model, ModelConfig, ParameterStore};
use tokenroll::rng::SplitMix64;
use tokenroll::{Result, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

pub fn random_tensor(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.next_f64() * 2.0 - 1.0)
}

/// Reduces any tensor to a scalar through fixed pseudo-random weights so
/// every output element influences the checked gradient.
pub fn weighted_sum<'t>(y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let n: usize = y.shape().iter().product();
    let mut rng = SplitMix64::stream(seed, "projection");
    let w = Tensor::from_fn(&[n, 1], |_| rng.next_f64() * 2.0 - 1.0);
    let w = y.tape().constant(w);
    y.reshape(&[1, n])?.matmul(w)?.sum()
}

/// Largest elementwise relative error between the tape gradient and central
/// finite differences, over every element of every input.
///
/// The relative error of an element is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn max_gradient_error<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&tape, &vars).expect("forward");
    let grads = tape.backward(root).expect("backward");
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v).clone()).collect();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).expect("forward").value().item()
    };

    let mut worst: f64 = 0.0;
    for (which, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[which] = bump(input, i, FD_STEP);
            minus[which] = bump(input, i, -FD_STEP);
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let a = analytic[which].data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

fn bump(t: &Tensor, i: usize, delta: f64) -> Tensor {
    let mut data = t.data().to_vec();
    data[i] += delta;
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

type OpCase = (&'static str, fn(u64) -> f64);

/// One finite-difference check per differentiable op, on random inputs drawn
/// from `seed`.
pub fn op_gradient_cases() -> Vec<OpCase> {
    fn inputs(seed: u64, shapes: &[&[usize]]) -> Vec<Tensor> {
        let mut rng = SplitMix64::new(seed);
        shapes.iter().map(|s| random_tensor(s, &mut rng)).collect()
    }
    vec![
        ("matmul", |s| max_gradient_error(&inputs(s, &[&[3, 4], &[4, 3]]), |_, v| weighted_sum(v[0].matmul(v[1])?, s))),
        ("matmul_batched", |s| {
            max_gradient_error(&inputs(s, &[&[2, 3, 4], &[2, 4, 3]]), |_, v| weighted_sum(v[0].matmul(v[1])?, s))
        }),
        ("add", |s| max_gradient_error(&inputs(s, &[&[3, 4], &[3, 4]]), |_, v| weighted_sum(v[0].add(v[1])?, s))),
        ("add_broadcast", |s| {
            max_gradient_error(&inputs(s, &[&[3, 4], &[4]]), |_, v| weighted_sum(v[0].add(v[1])?, s))
        }),
        ("scale", |s| max_gradient_error(&inputs(s, &[&[3, 4]]), |_, v| weighted_sum(v[0].scale(-0.7)?, s))),
        ("concat_axis", |s| {
            max_gradient_error(&inputs(s, &[&[3, 4], &[3, 2]]), |_, v| weighted_sum(Var::concat(&[v[0], v[1]], 1)?, s))
        }),
        ("slice_axis", |s| max_gradient_error(&inputs(s, &[&[3, 4]]), |_, v| weighted_sum(v[0].slice(1, 1, 2)?, s))),
        ("transpose", |s| max_gradient_error(&inputs(s, &[&[3, 4]]), |_, v| weighted_sum(v[0].transpose()?, s))),
        ("reshape", |s| max_gradient_error(&inputs(s, &[&[3, 4]]), |_, v| weighted_sum(v[0].reshape(&[2, 6])?, s))),
        ("mean_axis", |s| max_gradient_error(&inputs(s, &[&[3, 4]]), |_, v| weighted_sum(v[0].mean_axis(0)?, s))),
        ("sum", |s| max_gradient_error(&inputs(s, &[&[3, 4]]), |_, v| v[0].sum())),
        ("gather_rows", |s| {
            max_gradient_error(&inputs(s, &[&[3, 4]]), |_, v| weighted_sum(v[0].gather_rows(&[2, 0, 2, 1])?, s))
        }),
        ("permute_tokens", |s| {
            max_gradient_error(&inputs(s, &[&[3, 4]]), |_, v| weighted_sum(v[0].permute_tokens(&[2, 0, 1])?, s))
        }),
        ("softmax_lastdim", |s| max_gradient_error(&inputs(s, &[&[3, 4]]), |_, v| weighted_sum(v[0].softmax()?, s))),
        ("layer_norm", |s| {
            max_gradient_error(&inputs(s, &[&[3, 4], &[4], &[4]]), |_, v| weighted_sum(v[0].layer_norm(v[1], v[2])?, s))
        }),
        ("gelu", |s| max_gradient_error(&inputs(s, &[&[3, 4]]), |_, v| weighted_sum(v[0].gelu()?, s))),
        ("cross_entropy_with_logits", |s| {
            max_gradient_error(&inputs(s, &[&[3, 4]]), |_, v| v[0].cross_entropy(&[1, 3, 0]))
        }),
        ("masked_fill", |s| {
            max_gradient_error(&inputs(s, &[&[1, 3, 4]]), |_, v| {
                weighted_sum(v[0].masked_fill(&[false, true, false, false])?.softmax()?, s)
            })
        }),
        ("l2_normalize", |s| max_gradient_error(&inputs(s, &[&[3, 4]]), |_, v| weighted_sum(v[0].l2_normalize()?, s))),
    ]
}

/// Worst relative error between tape gradients and central differences of
/// a VTM plus all-position MLM loss, over `checks` random parameter scalars
/// of a freshly initialized model on a random batch of 2.
pub fn end_to_end_gradient_error(cfg: &ModelConfig, seed: u64, checks: usize) -> f64 {
    let model = Model::new(cfg.clone(), seed).unwrap();
    let mut rng = SplitMix64::stream(seed, "probe");
    let clips: Vec<Vec<f32>> = (0..2)
        .map(|_| (0..cfg.frames * cfg.channels * cfg.height * cfg.width).map(|_| rng.next_f64() as f32).collect())
        .collect();
    let ids: Vec<Vec<usize>> = (0..2)
        .map(|i| {
            let mut ids = vec![CLS];
            ids.extend((0..2 + i).map(|_| 4 + rng.index(cfg.vocab_size - 4)));
            ids.resize(cfg.max_text, PAD);
            ids
        })
        .collect();
    let refs: Vec<&[f32]> = clips.iter().map(Vec::as_slice).collect();
    let targets: Vec<usize> = ids.iter().flat_map(|s| s.iter().copied()).collect();
    fn loss<'t>(
        m: &Model,
        tape: &'t Tape,
        trainable: bool,
        refs: &[&[f32]],
        ids: &[Vec<usize>],
        targets: &[usize],
    ) -> (tokenroll::model::Bound<'t>, Var<'t>) {
        let p = m.params.bind(tape, trainable);
        let out = m.forward_multimodal(&p, refs, ids, &mut ForwardState::eval(0)).unwrap();
        let vtm = out.vtm_logits.cross_entropy(&[0, 1]).unwrap();
        let v = m.config.vocab_size;
        let mlm = out.mlm_logits.reshape(&[targets.len(), v]).unwrap().cross_entropy(targets).unwrap();
        (p, vtm.add(mlm).unwrap())
    }
    let loss_of = |params: &ParameterStore| {
        let m = Model::from_parts(cfg.clone(), params.clone());
        let tape = Tape::new();
        let value = loss(&m, &tape, false, &refs, &ids, &targets).1.value().item();
        value
    };

    let tape = Tape::new();
    let (p, root) = loss(&model, &tape, true, &refs, &ids, &targets);
    let grads = tape.backward(root).unwrap();
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let mut worst = 0.0f64;
    for _ in 0..checks {
        let name = &names[rng.index(names.len())];
        let idx = rng.index(model.params.get(name).unwrap().numel());
        let analytic = grads.wrt(p.get(name).unwrap()).data()[idx];
        let shifted = |delta: f64| {
            let mut store = model.params.clone();
            let t = store.get_mut(name).unwrap();
            *t = bump(t, idx, delta);
            loss_of(&store)
        };
        let numeric = (shifted(FD_STEP) - shifted(-FD_STEP)) / (2.0 * FD_STEP);
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6));
    }
    worst
}
