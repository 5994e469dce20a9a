//! Magnitude pruning with a validation-loss-bounded threshold.
//!
//! The threshold `T` is the largest value for which zeroing every alive
//! parameter with `|w| < T` keeps the validation loss within the loss
//! boundary `(1 + TWT)·L̂`. It is located by bisection on the admissibility
//! predicate `L* ≤ L^b`, starting from the mean magnitude of the non-zero
//! alive parameters.

use log::warn;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;

/// `L^b = (1 + TWT)·L̂`.
pub fn loss_boundary(best_loss: f64, twt: f64) -> Result<f64> {
    if !(twt >= 0.0 && twt.is_finite()) {
        return Err(Error::Config(format!("TWT must be a finite value ≥ 0, got {twt}")));
    }
    if !(best_loss >= 0.0 && best_loss.is_finite()) {
        return Err(Error::Config(format!(
            "best validation loss must be finite and ≥ 0, got {best_loss}"
        )));
    }
    Ok((1.0 + twt) * best_loss)
}

fn alive_magnitudes(model: &Model) -> impl Iterator<Item = f64> + '_ {
    model.params().iter().flat_map(|p| {
        p.value
            .data()
            .iter()
            .enumerate()
            .filter(|&(i, _)| p.mask.is_alive(i))
            .map(|(_, w)| w.abs())
    })
}

/// Mean magnitude of the alive, non-zero parameters.
pub fn init_threshold(model: &Model) -> Result<f64> {
    let (sum, count) = alive_magnitudes(model)
        .filter(|&m| m != 0.0)
        .fold((0.0, 0usize), |(s, c), m| (s + m, c + 1));
    if count == 0 {
        return Err(Error::FullyPruned);
    }
    Ok(sum / count as f64)
}

/// Prunes every alive coordinate with `|w| < threshold` (strictly) and
/// returns how many were newly pruned.
pub fn apply_threshold(model: &mut Model, threshold: f64) -> usize {
    let mut pruned = 0;
    for p in model.params_mut() {
        let data = p.value.data_mut();
        for (i, w) in data.iter_mut().enumerate() {
            if p.mask.is_alive(i) && w.abs() < threshold {
                *w = 0.0;
                p.mask.prune(i);
                pruned += 1;
            }
        }
    }
    pruned
}

/// A copy of `model` with [`apply_threshold`] applied.
pub fn thresholded(model: &Model, threshold: f64) -> Model {
    let mut m = model.clone();
    apply_threshold(&mut m, threshold);
    m
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchConfig {
    /// Interval resolution relative to the largest alive magnitude.
    pub relative_resolution: f64,
    /// Maximum number of probes after the initial one.
    pub max_iterations: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            relative_resolution: 1e-6,
            max_iterations: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub threshold: f64,
    pub loss: f64,
    pub admissible: bool,
}

/// Outcome and trajectory of one threshold search.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSearch {
    /// Selected threshold (the final admissible lower bound).
    pub threshold: f64,
    pub lo: f64,
    pub hi: f64,
    /// `L^b`
    pub boundary: f64,
    /// Validation loss of the snapshot pruned at `threshold`.
    pub loss: f64,
    pub probes: Vec<Probe>,
    /// The probe budget ran out before the interval closed.
    pub budget_exhausted: bool,
}

/// Bisection for the largest admissible threshold.
///
/// `loss_of` evaluates a candidate pruned model. The search interval is
/// `[0, max |w|]` over alive coordinates; it stops when the interval is
/// narrower than the resolution, when no alive magnitude lies in `[lo, hi)`
/// (every threshold in between prunes the same set), or when the probe
/// budget is spent.
pub fn search_threshold<F>(
    snapshot: &Model,
    boundary: f64,
    cfg: &SearchConfig,
    mut loss_of: F,
) -> Result<ThresholdSearch>
where
    F: FnMut(&Model) -> Result<f64>,
{
    let mut mags: Vec<f64> = alive_magnitudes(snapshot).collect();
    mags.sort_unstable_by(f64::total_cmp);
    let below = |t: f64| mags.partition_point(|&m| m < t);

    let base = loss_of(snapshot)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("validation loss of the unpruned snapshot".into()));
    }
    let mut probes = vec![Probe {
        threshold: 0.0,
        loss: base,
        admissible: base <= boundary,
    }];
    let give_up = |probes: Vec<Probe>| ThresholdSearch {
        threshold: 0.0,
        lo: 0.0,
        hi: 0.0,
        boundary,
        loss: base,
        probes,
        budget_exhausted: false,
    };
    if base > boundary {
        return Ok(give_up(probes));
    }
    let Ok(start) = init_threshold(snapshot) else {
        return Ok(give_up(probes));
    };

    let (mut lo, mut hi) = (0.0, *mags.last().unwrap_or(&0.0));
    let mut lo_loss = base;
    let resolution = cfg.relative_resolution * hi;
    let mut t = start.clamp(lo, hi);
    let mut budget_exhausted = true;
    for _ in 0..=cfg.max_iterations {
        let loss = loss_of(&thresholded(snapshot, t))?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss at threshold {t}")));
        }
        let admissible = loss <= boundary;
        probes.push(Probe {
            threshold: t,
            loss,
            admissible,
        });
        if admissible {
            lo = t;
            lo_loss = loss;
        } else {
            hi = t;
        }
        if hi - lo < resolution || below(lo) == below(hi) {
            budget_exhausted = false;
            break;
        }
        t = 0.5 * (lo + hi);
    }
    if budget_exhausted {
        warn!("threshold search hit its probe budget; keeping T = {lo}");
    }
    Ok(ThresholdSearch {
        threshold: lo,
        lo,
        hi,
        boundary,
        loss: lo_loss,
        probes,
        budget_exhausted,
    })
}

/// [`search_threshold`] with the loss measured on a validation set.
pub fn search_threshold_on(
    snapshot: &Model,
    validation: &Dataset,
    boundary: f64,
    cfg: &SearchConfig,
) -> Result<ThresholdSearch> {
    search_threshold(snapshot, boundary, cfg, |m| Ok(m.evaluate(validation)?.loss))
}
