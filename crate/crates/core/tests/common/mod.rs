#![allow(dead_code)]

use congruent::loss::{total_objective, DistanceKind, FilterSpec, OracleEntry, PcLossConfig, PcMode};
use congruent::nn::{Mlp, ModelSpec};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// The objectives exercised by the gradient checks, by display name.
pub fn objectives() -> Vec<(&'static str, PcLossConfig)> {
    let focal = |distance| PcLossConfig {
        lambda: 1.0,
        filter: FilterSpec { alpha: 1.0, beta: 5.0 },
        distance,
        mode: PcMode::Focal,
    };
    vec![
        (
            "CE",
            PcLossConfig {
                mode: PcMode::None,
                ..PcLossConfig::default()
            },
        ),
        (
            "Naive",
            PcLossConfig {
                mode: PcMode::Naive,
                ..PcLossConfig::default()
            },
        ),
        ("FD-KL(t=1)", focal(DistanceKind::Kl { temperature: 1.0 })),
        ("FD-KL(t=100)", focal(DistanceKind::Kl { temperature: 100.0 })),
        ("FD-LM", focal(DistanceKind::LogitMatch)),
    ]
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random model with 1 to 3 layers and widths up to 16.
pub fn random_model(rng: &mut ChaCha8Rng, classes: usize) -> Mlp {
    let layers = rng.gen_range(1..=3);
    let input = rng.gen_range(1..=16);
    let hidden: Vec<usize> = (1..layers).map(|_| rng.gen_range(2..=16)).collect();
    let spec = ModelSpec::mlp(input, &hidden, classes);
    let mut model = Mlp::init(&spec, rng.gen()).unwrap();
    for layer in model.layers_mut() {
        for b in &mut layer.bias {
            *b = rng.gen_range(-0.5..0.5);
        }
    }
    model
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// Input whose relu pre-activations all stay clear of the kink, so central
/// differences see a smooth function.
pub fn smooth_input(rng: &mut ChaCha8Rng, model: &Mlp) -> Vec<f64> {
    loop {
        let x = random_vec(rng, model.input_dim(), 2.0);
        let cache = model.forward(&x).unwrap();
        if cache
            .pre_activations
            .iter()
            .flatten()
            .all(|z| z.abs() > 1e-3)
        {
            return x;
        }
    }
}

/// Adds `delta` to the `index`-th parameter, counting weights then bias of
/// each layer in order.
fn nudge(model: &mut Mlp, mut index: usize, delta: f64) {
    for layer in model.layers_mut() {
        let w = layer.weights.as_mut_slice();
        if index < w.len() {
            w[index] += delta;
            return;
        }
        index -= w.len();
        if index < layer.bias.len() {
            layer.bias[index] += delta;
            return;
        }
        index -= layer.bias.len();
    }
    panic!("parameter index out of range");
}

pub fn objective_value(logits: &[f64], label: usize, entry: Option<OracleEntry<'_>>, config: &PcLossConfig) -> f64 {
    total_objective(logits, label, entry, config).unwrap().0
}

/// Largest relative discrepancy between analytic and central-difference
/// parameter gradients of `loss(logits)`.
pub fn worst_param_error(model: &Mlp, x: &[f64], loss: &dyn Fn(&[f64]) -> (f64, Vec<f64>)) -> f64 {
    let cache = model.forward(x).unwrap();
    let (_, grad_logits) = loss(cache.logits());
    let analytic = model.backward(&cache, &grad_logits).unwrap().flatten();

    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut up = model.clone();
        nudge(&mut up, i, FD_STEP);
        let mut down = model.clone();
        nudge(&mut down, i, -FD_STEP);
        let numeric = (loss(&up.logits(x).unwrap()).0 - loss(&down.logits(x).unwrap()).0) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(a, numeric));
    }
    worst
}

/// `|a - b| / max(|a|, |b|)`. Entries below 1e-6 in both are treated as
/// zero: there the central difference is dominated by rounding of the loss.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-6 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}
