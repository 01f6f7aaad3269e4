use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::category::Category;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamInfo};
use crate::nn::Activation;
use crate::tensor::Tensor;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Gradient magnitude treated as zero when forming a relative error. Round-off
/// in a central difference at [`STEP`] is about 1e-10 at these loss values.
pub const GRAD_FLOOR: f64 = 1e-5;
const JITTER: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Stem,
    Mobile,
    Bridges,
    Former,
    DyreluGenerator,
    Head,
    Tokens,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::Stem,
        ParamGroup::Mobile,
        ParamGroup::Bridges,
        ParamGroup::Former,
        ParamGroup::DyreluGenerator,
        ParamGroup::Head,
        ParamGroup::Tokens,
    ];

    pub fn of(p: &ParamInfo) -> Self {
        if p.is_tokens() {
            return ParamGroup::Tokens;
        }
        match p.category {
            Category::Stem => ParamGroup::Stem,
            Category::MobilePointwise | Category::MobileDepthwise => ParamGroup::Mobile,
            Category::BridgeIn | Category::BridgeOut => ParamGroup::Bridges,
            Category::FormerMhsa | Category::FormerFfn => ParamGroup::Former,
            Category::DyreluGenerator => ParamGroup::DyreluGenerator,
            Category::Head => ParamGroup::Head,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Stem => "stem",
            ParamGroup::Mobile => "mobile",
            ParamGroup::Bridges => "bridges",
            ParamGroup::Former => "former",
            ParamGroup::DyreluGenerator => "dyrelu_generator",
            ParamGroup::Head => "head",
            ParamGroup::Tokens => "tokens",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub group: ParamGroup,
    /// Worst `max|autodiff − numeric| / max(‖autodiff‖∞, ‖numeric‖∞, GRAD_FLOOR)`
    /// over the group's tensors.
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
    /// Elements left out because a probe crossed a ReLU kink.
    pub kinks: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupResult>,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.groups.iter().all(|g| g.pass)
    }

    /// `Err` naming the worst offending tensor when any group fails.
    pub fn into_result(self) -> Result<Self> {
        match self
            .groups
            .iter()
            .filter(|g| !g.pass)
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        {
            Some(g) => Err(Error::GradCheck(format!(
                "group {} over tolerance {:e}: {} has rel error {:e}",
                g.group.name(),
                self.tolerance,
                g.worst,
                g.max_rel_err
            ))),
            None => Ok(self),
        }
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for g in &self.groups {
            writeln!(
                f,
                "{:<17} {} max_rel_err = {:.3e}  checked = {:>5}  kinks = {:>3}  worst = {}",
                g.group.name(),
                if g.pass { "PASS" } else { "FAIL" },
                g.max_rel_err,
                g.checked,
                g.kinks,
                g.worst
            )?;
        }
        Ok(())
    }
}

/// The smallest config that exercises every parameter group.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        blocks_per_stage: [1, 1, 1, 1],
        base_dim: 4,
        expansion: 2.0,
        resolution: 8,
        temporal_stride: 4,
        frames: 8,
        token_count: 2,
        token_dim: 8,
        heads: 2,
        num_classes: 3,
        head_hidden: 12,
        activation: Activation::FrameDyrelu,
        ..ModelConfig::default()
    }
}

fn loss_of(model: &Model<f64>, clip: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
    let mut g = model.graph();
    let x = g.input(clip.clone());
    let logits = model.forward_on(&mut g, x)?;
    let l = g.cross_entropy(logits, labels)?;
    Ok(g.value(l).data()[0])
}

/// Losses at `θ_e ± h`.
fn probe(
    model: &mut Model<f64>,
    pi: usize,
    e: usize,
    h: f64,
    clip: &Tensor<f64>,
    labels: &[usize],
) -> Result<(f64, f64)> {
    let orig = model.params()[pi].data()[e];
    model.params_mut()[pi].data_mut()[e] = orig + h;
    let lp = loss_of(model, clip, labels);
    model.params_mut()[pi].data_mut()[e] = orig - h;
    let lm = loss_of(model, clip, labels);
    model.params_mut()[pi].data_mut()[e] = orig;
    Ok((lp?, lm?))
}

/// Central differences against autodiff for every parameter of a jittered
/// model built from `config`, in f64, on a two-clip batch. Groups listed in
/// `frozen` are neither checked nor reported. `max_per_tensor` caps how many
/// elements of each tensor are perturbed, drawn at random from the seed; 0
/// checks all of them.
///
/// An element that misses is probed again at half the step. If its
/// forward/backward slope gap fails to halve, by more than a quarter of the
/// miss, it sits on a kink of a piecewise-linear activation and is counted
/// in `kinks` instead. Otherwise the two central differences are combined by
/// Richardson extrapolation, which removes the truncation error of strongly
/// curved directions but leaves any error in the analytic gradient intact.
pub fn gradcheck(
    config: &ModelConfig,
    tolerance: f64,
    frozen: &[ParamGroup],
    seed: u64,
    max_per_tensor: usize,
) -> Result<GradCheckReport> {
    let mut model = Model::<f64>::build(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let jitter = Normal::new(0.0, JITTER).expect("finite");
    for p in model.params_mut() {
        p.data_mut()
            .iter_mut()
            .for_each(|v| *v += rng.sample(jitter));
    }
    let r = config.resolution;
    let clip = Tensor::from_fn(vec![2, 3, config.frames, r, r], |_| rng.random::<f64>());
    let labels: Vec<usize> = (0..2).map(|i| i % config.num_classes).collect();
    let (l0, grads) = model.loss_and_grads(&clip, &labels)?;

    let info: Vec<ParamInfo> = model.param_info().to_vec();
    let mut groups: Vec<GroupResult> = Vec::new();
    for (pi, p) in info.iter().enumerate() {
        let group = ParamGroup::of(p);
        if frozen.contains(&group) {
            continue;
        }
        let n = p.numel();
        let picks: Vec<usize> = if max_per_tensor == 0 || n <= max_per_tensor {
            (0..n).collect()
        } else {
            // Random picks; an even stride would keep hitting one column.
            let mut picks = rand::seq::index::sample(&mut rng, n, max_per_tensor).into_vec();
            picks.sort_unstable();
            picks
        };
        let (mut scale, mut err, mut kinks) = (GRAD_FLOOR, 0.0f64, 0usize);
        for &e in &picks {
            let analytic = grads[pi].data()[e];
            let (lp, lm) = probe(&mut model, pi, e, STEP, &clip, &labels)?;
            let numeric = (lp - lm) / (2.0 * STEP);
            scale = scale.max(analytic.abs());
            let mut miss = (numeric - analytic).abs();
            if miss > (1e-2 * tolerance * numeric.abs().max(analytic.abs())).max(1e-9) {
                let (hp, hm) = probe(&mut model, pi, e, STEP / 2.0, &clip, &labels)?;
                // On a smooth loss the gap between the forward and backward
                // slopes halves with the step; across a kink it does not.
                let gap = (lp - 2.0 * l0 + lm) / STEP;
                let half_gap = (hp - 2.0 * l0 + hm) / (STEP / 2.0);
                if (half_gap - gap / 2.0).abs() > 0.25 * miss {
                    kinks += 1;
                    continue;
                }
                // Smooth but strongly curved: cancel the O(h²) term.
                let half = (hp - hm) / STEP;
                miss = ((4.0 * half - numeric) / 3.0 - analytic).abs();
            }
            scale = scale.max(numeric.abs());
            err = err.max(miss);
        }
        let rel = err / scale;
        match groups.iter_mut().find(|g| g.group == group) {
            Some(g) => {
                g.checked += picks.len();
                g.kinks += kinks;
                if rel > g.max_rel_err {
                    g.max_rel_err = rel;
                    g.worst = p.name.clone();
                }
            }
            None => groups.push(GroupResult {
                group,
                max_rel_err: rel,
                worst: p.name.clone(),
                checked: picks.len(),
                kinks,
                pass: true,
            }),
        }
    }
    groups.sort_by_key(|g| g.group);
    for g in &mut groups {
        g.pass = g.max_rel_err <= tolerance;
    }
    Ok(GradCheckReport { tolerance, groups })
}
