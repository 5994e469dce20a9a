//! Reference implementations the library is checked against. They share no
//! code with the paths under test beyond the forward loss.

#![allow(dead_code)]

use lobster::model::{LayerSpec, Model};
use lobster::tape::ParamId;
use lobster::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `|a − n| / max(|a|, |n|, floor)`; the floor keeps round-off in
/// near-zero derivatives from reading as a large relative error.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

pub fn batch_loss(model: &Model, x: &Tensor, labels: &[usize]) -> f64 {
    model.loss_and_gradients(x.clone(), labels).unwrap().0
}

/// Central finite difference of the batch loss w.r.t. one coordinate.
pub fn central_difference(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    param: usize,
    index: usize,
    h: f64,
) -> f64 {
    let mut m = model.clone();
    let w0 = m.params()[param].value.data()[index];
    m.params_mut()[param].value.data_mut()[index] = w0 + h;
    let up = batch_loss(&m, x, labels);
    m.params_mut()[param].value.data_mut()[index] = w0 - h;
    let down = batch_loss(&m, x, labels);
    (up - down) / (2.0 * h)
}

#[derive(Debug)]
pub struct GradReport {
    pub coords: usize,
    pub worst: f64,
}

/// Compares autodiff against central differences on `samples` coordinates
/// drawn uniformly over all parameters.
pub fn grad_check(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    samples: usize,
    h: f64,
    floor: f64,
    rng: &mut ChaCha8Rng,
) -> GradReport {
    let (_, grads) = model.loss_and_gradients(x.clone(), labels).unwrap();
    let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let mut flat = rng.random_range(0..total);
        let mut param = 0;
        while flat >= sizes[param] {
            flat -= sizes[param];
            param += 1;
        }
        let analytic = grads.get(ParamId(param)).unwrap().data()[flat];
        let numeric = central_difference(model, x, labels, param, flat, h);
        worst = worst.max(rel_err(analytic, numeric, floor));
    }
    GradReport {
        coords: samples,
        worst,
    }
}

/// A random network and batch. Even seeds give dense-only nets, odd seeds
/// convolutional ones. Inputs are continuous, so ReLU kinks and pooling ties
/// are hit with probability zero.
pub fn random_config(seed: u64) -> (Model, Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = rng.random_range(1..=8);
    let classes = rng.random_range(2..=5);
    let (input, layers) = if seed.is_multiple_of(2) {
        let d = rng.random_range(6..=16);
        let h1 = rng.random_range(8..=20);
        let mut layers = vec![LayerSpec::dense("fc1", d, h1), LayerSpec::Relu];
        let last = if rng.random_bool(0.5) {
            let h2 = rng.random_range(4..=12);
            layers.extend([LayerSpec::dense("fc2", h1, h2), LayerSpec::Relu]);
            layers.push(LayerSpec::dense("fc3", h2, classes));
            layers
        } else {
            layers.push(LayerSpec::dense("fc2", h1, classes));
            layers
        };
        (vec![d], last)
    } else {
        let c = rng.random_range(1..=2);
        let side = 2 * rng.random_range(4..=5);
        let k = rng.random_range(2..=3);
        let f = rng.random_range(3..=6);
        let conv_out = side - k + 1;
        let pooled = conv_out / 2;
        let flat = f * pooled * pooled;
        (
            vec![c, side, side],
            vec![
                LayerSpec::conv("conv1", c, f, k),
                LayerSpec::Relu,
                LayerSpec::MaxPool2,
                LayerSpec::Flatten,
                LayerSpec::dense("fc1", flat, classes),
            ],
        )
    };
    let mut model = Model::new(&input, layers, seed).unwrap();
    // non-zero biases so every bias coordinate matters
    for p in model.params_mut() {
        if p.name.ends_with(".bias") {
            for b in p.value.data_mut() {
                *b = rng.random_range(-0.2..0.2);
            }
        }
    }
    let len: usize = input.iter().product::<usize>() * batch;
    let data: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut shape = vec![batch];
    shape.extend(&input);
    let labels = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    (model, Tensor::new(shape, data).unwrap(), labels)
}

/// Number of alive coordinates with `|w| < t`.
pub fn count_below(model: &Model, t: f64) -> usize {
    model
        .params()
        .iter()
        .map(|p| {
            p.value
                .data()
                .iter()
                .enumerate()
                .filter(|&(i, w)| p.mask.is_alive(i) && w.abs() < t)
                .count()
        })
        .sum()
}

/// Largest admissible threshold by brute force: every distinct alive
/// magnitude is a candidate (a threshold equal to a magnitude prunes
/// everything strictly below it), plus 0.
pub fn exhaustive_threshold<F>(model: &Model, boundary: f64, mut loss_of: F) -> f64
where
    F: FnMut(&Model) -> f64,
{
    let mut mags: Vec<f64> = model
        .params()
        .iter()
        .flat_map(|p| {
            p.value
                .data()
                .iter()
                .enumerate()
                .filter(|&(i, _)| p.mask.is_alive(i))
                .map(|(_, w)| w.abs())
                .collect::<Vec<_>>()
        })
        .collect();
    mags.sort_by(f64::total_cmp);
    mags.dedup();
    let mut best = 0.0;
    for &t in &mags {
        let mut m = model.clone();
        for p in m.params_mut() {
            for i in 0..p.len() {
                if p.mask.is_alive(i) && p.value.data()[i].abs() < t {
                    p.value.data_mut()[i] = 0.0;
                    p.mask.prune(i);
                }
            }
        }
        if loss_of(&m) <= boundary {
            best = t;
        }
    }
    best
}

/// A small MLP (≤ 500 parameters) briefly trained on Gaussian blobs, with
/// its validation set.
pub fn trained_small_model(seed: u64) -> (Model, lobster::data::Dataset) {
    use lobster::data::{split_train_val, synthetic_blobs};
    use lobster::reg::{Optimizer, RegularizerConfig, Variant};

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let classes = rng.random_range(2..=4);
    let dim = rng.random_range(4..=12);
    let hidden = rng.random_range(4..=16);
    let epochs = rng.random_range(1..=20);
    let all = synthetic_blobs(40, classes, dim, rng.random_range(1.5..5.0), seed).unwrap();
    let (train, val) = split_train_val(&all, 10 * classes, seed).unwrap();
    let hidden_layers: Vec<usize> = if rng.random_bool(0.3) { vec![] } else { vec![hidden] };
    let mut model = lobster::build_mlp(dim, &hidden_layers, classes, seed).unwrap();
    assert!(model.param_count() <= 500);
    let mut opt = Optimizer::new(RegularizerConfig::new(Variant::Lobster, 0.1, 1e-3)).unwrap();
    let order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..epochs {
        for chunk in order.chunks(16) {
            let (x, y) = train.batch(chunk).unwrap();
            let (_, g) = model.loss_and_gradients(x, &y).unwrap();
            opt.step(&mut model, &g).unwrap();
        }
    }
    (model, val)
}

/// Admissibility (`loss ≤ boundary`) at every distinct alive magnitude,
/// in increasing threshold order.
pub fn admissibility_profile<F>(model: &Model, boundary: f64, mut loss_of: F) -> Vec<bool>
where
    F: FnMut(&Model) -> f64,
{
    let mut mags: Vec<f64> = model
        .params()
        .iter()
        .flat_map(|p| {
            p.value
                .data()
                .iter()
                .enumerate()
                .filter(|&(i, _)| p.mask.is_alive(i))
                .map(|(_, w)| w.abs())
                .collect::<Vec<_>>()
        })
        .collect();
    mags.sort_by(f64::total_cmp);
    mags.dedup();
    mags.iter()
        .map(|&t| loss_of(&lobster::prune::thresholded(model, t)) <= boundary)
        .collect()
}

/// True when the profile is some admissible prefix followed only by
/// inadmissible entries, i.e. admissibility is monotone in the threshold.
pub fn is_prefix_shaped(profile: &[bool]) -> bool {
    let first_bad = profile.iter().position(|a| !a).unwrap_or(profile.len());
    profile[first_bad..].iter().all(|a| !a)
}
