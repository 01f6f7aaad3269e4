use super::{linear, scoped, video_shape, GroupNorm, Linear};
use crate::category::Category;
use crate::error::{Error, Result};
use crate::tensor::ops::DyReluRange;
use crate::tensor::{Graph, Scalar, Var};

use serde::{Deserialize, Serialize};

/// Activation used inside Mobile blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    /// Dynamic ReLU whose coefficients come from the first global token
    /// only, shared by every frame.
    Dyrelu,
    /// Dynamic ReLU with coefficients generated per frame from the frame's
    /// pooled feature concatenated with the first global token.
    FrameDyrelu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Dyrelu => "dyrelu",
            Activation::FrameDyrelu => "frame-dyrelu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "dyrelu" => Some(Activation::Dyrelu),
            "frame-dyrelu" => Some(Activation::FrameDyrelu),
            _ => None,
        }
    }
}

/// Depthwise kernel of a Mobile block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthwiseKernel {
    /// `C×3×3×3`.
    Full(Var),
    /// `C×1×3×3`.
    Spatial(Var),
    /// `C×1×3×3` followed by `C×3×1×1`.
    Factorized { spatial: Var, temporal: Var },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MobileWeights {
    /// `C_hid×C_in`.
    pub expand: Var,
    pub expand_norm: GroupNorm,
    pub depthwise: DepthwiseKernel,
    pub dw_norm: GroupNorm,
    /// `C_out×C_hid`.
    pub project: Var,
    pub project_norm: GroupNorm,
    /// One generator per dynamic activation, in block order. Empty when the
    /// block uses plain ReLU.
    pub generators: Vec<DyReluGenerator>,
}

/// Two-layer coefficient generator: `in → in/R` with ReLU, then `→ 4C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DyReluGenerator {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// The first global token as seen by the dynamic activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenContext {
    /// `[N, d]`, one token set per clip.
    Shared(Var),
    /// `[N, T', d]`, one token set per frame.
    PerFrame(Var),
}

/// Raw generator output `[..., 4C]` for generator input `[..., in]`.
pub fn dyrelu_generator<T: Scalar>(
    g: &mut Graph<T>,
    input: Var,
    gen: &DyReluGenerator,
) -> Result<Var> {
    scoped(g, Category::DyreluGenerator, |g| {
        let h = linear(g, input, &gen.fc1)?;
        let h = g.relu(h);
        linear(g, h, &gen.fc2)
    })
}

/// Frame-level dynamic ReLU on `x` (`N×C×T'×H'×W'`). The generator input
/// per frame is the frame's average-pooled feature concatenated with `z0`.
/// Returns the activation and its coefficients `N×T'×C×4`.
pub fn frame_level_dyrelu<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    ctx: TokenContext,
    gen: &DyReluGenerator,
) -> Result<(Var, Var)> {
    let [_, _, t, _, _] = video_shape(g, x)?;
    let coeffs = scoped(g, Category::DyreluGenerator, |g| {
        let feats = g.avg_pool_per_frame(x)?;
        let z0 = frame_tokens(g, ctx, t)?;
        let input = g.concat_last(feats, z0)?;
        let u = dyrelu_generator(g, input, gen)?;
        g.dyrelu_coeffs(u, DyReluRange::default())
    })?;
    let y = g.dyrelu_apply(x, coeffs)?;
    Ok((y, coeffs))
}

/// Dynamic ReLU driven by `z0` alone. With per-frame tokens each frame uses
/// its own first token; otherwise one coefficient set covers every frame.
fn token_dyrelu<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    ctx: TokenContext,
    gen: &DyReluGenerator,
) -> Result<Var> {
    let coeffs = scoped(g, Category::DyreluGenerator, |g| {
        let input = match ctx {
            TokenContext::Shared(z0) => {
                let s = g.shape(z0).to_vec();
                g.reshape(z0, &[s[0], 1, s[1]])?
            }
            TokenContext::PerFrame(z0) => z0,
        };
        let u = dyrelu_generator(g, input, gen)?;
        g.dyrelu_coeffs(u, DyReluRange::default())
    })?;
    g.dyrelu_apply(x, coeffs)
}

fn frame_tokens<T: Scalar>(g: &mut Graph<T>, ctx: TokenContext, frames: usize) -> Result<Var> {
    match ctx {
        TokenContext::Shared(z0) => g.expand_axis(z0, 1, frames),
        TokenContext::PerFrame(z0) => {
            if g.shape(z0).get(1) != Some(&frames) {
                return Err(Error::ShapeMismatch {
                    op: "frame_level_dyrelu",
                    lhs: vec![frames],
                    rhs: g.shape(z0).to_vec(),
                });
            }
            Ok(z0)
        }
    }
}

fn activate<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    act: Activation,
    gen: Option<&DyReluGenerator>,
    ctx: Option<TokenContext>,
) -> Result<Var> {
    let (gen, ctx) = match (act, gen, ctx) {
        (Activation::Relu, ..) | (_, None, _) => return Ok(g.relu(x)),
        (_, Some(gen), Some(ctx)) => (gen, ctx),
        (_, Some(_), None) => {
            return Err(Error::InvalidShape {
                op: "mobile_block",
                msg: "dynamic activation needs a token context".into(),
            })
        }
    };
    match act {
        Activation::FrameDyrelu => Ok(frame_level_dyrelu(g, x, ctx, gen)?.0),
        _ => token_dyrelu(g, x, ctx, gen),
    }
}

/// Inverted bottleneck: expand pointwise → norm → act → depthwise → norm →
/// act → project pointwise → norm, plus the input when shapes agree. Spatial
/// stride applies to the depthwise stage; so does `temporal_stride`, which
/// is 1 except in per-stage temporal downsampling.
pub fn mobile_block<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    w: &MobileWeights,
    act: Activation,
    ctx: Option<TokenContext>,
    spatial_stride: usize,
    temporal_stride: usize,
) -> Result<Var> {
    let prev = g.set_category(Category::MobilePointwise);
    let out = (|| {
        let h = g.conv3d_pointwise(x, w.expand)?;
        let h = w.expand_norm.apply(g, h)?;
        let h = activate(g, h, act, w.generators.first(), ctx)?;

        g.set_category(Category::MobileDepthwise);
        let (s, ts) = (spatial_stride, temporal_stride);
        let h = match w.depthwise {
            DepthwiseKernel::Full(k) => g.conv3d_depthwise(h, k, [ts, s, s], [1, 1, 1])?,
            DepthwiseKernel::Spatial(k) => g.conv3d_depthwise(h, k, [ts, s, s], [0, 1, 1])?,
            DepthwiseKernel::Factorized { spatial, temporal } => {
                let h = g.conv3d_depthwise(h, spatial, [1, s, s], [0, 1, 1])?;
                g.conv3d_depthwise(h, temporal, [ts, 1, 1], [1, 0, 0])?
            }
        };
        let h = w.dw_norm.apply(g, h)?;
        let h = activate(g, h, act, w.generators.get(1), ctx)?;

        g.set_category(Category::MobilePointwise);
        let y = g.conv3d_pointwise(h, w.project)?;
        let y = w.project_norm.apply(g, y)?;
        if g.shape(y) == g.shape(x) {
            g.add(x, y)
        } else {
            Ok(y)
        }
    })();
    g.set_category(prev);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StemWeights {
    /// `C0×3×1×3×3`.
    pub spatial: Var,
    /// `C0×C0×3×1×1`.
    pub temporal: Var,
    pub norm: GroupNorm,
}

/// The stem's two convolutions without normalisation: a 3×3 spatial conv
/// (stride 2, pad 1), then a temporal k=3 conv (stride `s_t`, pad 1).
pub fn stem_convs<T: Scalar>(
    g: &mut Graph<T>,
    video: Var,
    w: &StemWeights,
    s_t: usize,
) -> Result<Var> {
    let [_, c, t, _, _] = video_shape(g, video)?;
    if c != 3 {
        return Err(Error::InvalidShape {
            op: "stem",
            msg: format!("expected 3 input channels, got {c}"),
        });
    }
    if t < 3 {
        return Err(Error::InvalidShape {
            op: "stem",
            msg: format!("need at least 3 frames, got {t}"),
        });
    }
    if s_t == 0 {
        return Err(Error::InvalidShape {
            op: "stem",
            msg: "temporal stride must be positive".into(),
        });
    }
    scoped(g, Category::Stem, |g| {
        let h = g.conv3d(video, w.spatial, [1, 2, 2], [0, 1, 1])?;
        g.conv3d(h, w.temporal, [s_t, 1, 1], [1, 0, 0])
    })
}

/// Stem: [`stem_convs`] → group norm → ReLU.
pub fn stem<T: Scalar>(g: &mut Graph<T>, video: Var, w: &StemWeights, s_t: usize) -> Result<Var> {
    let h = stem_convs(g, video, w, s_t)?;
    scoped(g, Category::Stem, |g| {
        let h = w.norm.apply(g, h)?;
        Ok(g.relu(h))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadWeights {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Global average pool of `features` (`N×C4×T'×H×W`), concatenated with
/// `z0` (`N×d`), through a GELU hidden layer to logits.
pub fn classifier_head<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    z0: Var,
    w: &HeadWeights,
) -> Result<Var> {
    scoped(g, Category::Head, |g| {
        let pooled = g.global_avg_pool(features)?;
        let h = g.concat_last(pooled, z0)?;
        let h = linear(g, h, &w.fc1)?;
        let h = g.gelu(h);
        linear(g, h, &w.fc2)
    })
}
