//! The pieces of a parallel mobile and former block and the layers around it.
//!
//! All functions record onto a [`Graph`] and tag their arithmetic with the
//! owning [`Category`]. Weight structs hold [`Var`] handles; the model binds
//! them by building graphs with [`Graph::with_params`].

mod attention;
mod mobile;

pub use attention::{
    attention, attention_weights, former_block, former_to_mobile, mobile_to_former,
    BridgeInWeights, BridgeOutWeights, FormerWeights,
};
pub use mobile::{
    classifier_head, dyrelu_generator, frame_level_dyrelu, mobile_block, stem, stem_convs,
    Activation, DepthwiseKernel, DyReluGenerator, HeadWeights, MobileWeights, StemWeights,
    TokenContext,
};

use crate::category::Category;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Var};

/// Dense layer `x·W + b` with `W` stored `in×out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

pub fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, layer: &Linear) -> Result<Var> {
    let y = g.matmul(x, layer.weight)?;
    match layer.bias {
        Some(b) => g.add_bias(y, b),
        None => Ok(y),
    }
}

/// Group normalisation with per-channel affine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupNorm {
    pub gamma: Var,
    pub beta: Var,
    pub groups: usize,
}

impl GroupNorm {
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.group_norm(x, self.groups, self.gamma, self.beta)
    }
}

/// Largest divisor of `channels` that is at most 8.
pub fn group_count(channels: usize) -> usize {
    (1..=channels.min(8))
        .rev()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

/// `[B, L, C] -> [B, H, L, C/H]`.
pub fn split_heads<T: Scalar>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
        return Err(Error::InvalidShape {
            op: "split_heads",
            msg: format!("cannot split {s:?} into {heads} heads"),
        });
    }
    let r = g.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    g.permute(r, &[0, 2, 1, 3])
}

/// `[B, H, L, c] -> [B, L, H·c]`.
pub fn merge_heads<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let p = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(p, &[s[0], s[2], s[1] * s[3]])
}

/// How global tokens see the local feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenScope {
    /// One token set per clip attends over every position of every frame.
    Video,
    /// One token set per frame attends over that frame's positions only.
    Frame,
}

/// `N×C×T×H×W` features to a token sequence: `[N, T·H·W, C]` for
/// [`TokenScope::Video`], `[N·T, H·W, C]` for [`TokenScope::Frame`].
pub fn to_sequence<T: Scalar>(g: &mut Graph<T>, x: Var, scope: TokenScope) -> Result<Var> {
    let [n, c, t, h, w]: [usize; 5] = video_shape(g, x)?;
    match scope {
        TokenScope::Video => {
            let r = g.reshape(x, &[n, c, t * h * w])?;
            g.permute(r, &[0, 2, 1])
        }
        TokenScope::Frame => {
            let r = g.reshape(x, &[n, c, t, h * w])?;
            let p = g.permute(r, &[0, 2, 3, 1])?;
            g.reshape(p, &[n * t, h * w, c])
        }
    }
}

/// Inverse of [`to_sequence`] for a feature map of `shape`.
pub fn from_sequence<T: Scalar>(
    g: &mut Graph<T>,
    seq: Var,
    shape: [usize; 5],
    scope: TokenScope,
) -> Result<Var> {
    let [n, c, t, h, w] = shape;
    match scope {
        TokenScope::Video => {
            let p = g.permute(seq, &[0, 2, 1])?;
            g.reshape(p, &shape)
        }
        TokenScope::Frame => {
            let r = g.reshape(seq, &[n, t, h * w, c])?;
            let p = g.permute(r, &[0, 3, 1, 2])?;
            g.reshape(p, &[n, c, t, h, w])
        }
    }
}

/// Per-clip tokens `[N, T·M, d]` regrouped per frame as `[N·T, M, d]`.
pub fn tokens_per_frame<T: Scalar>(g: &mut Graph<T>, z: Var, frames: usize) -> Result<Var> {
    let s = g.shape(z).to_vec();
    if s.len() != 3 || !s[1].is_multiple_of(frames) {
        return Err(Error::InvalidShape {
            op: "tokens_per_frame",
            msg: format!("{s:?} does not hold {frames} frames of tokens"),
        });
    }
    g.reshape(z, &[s[0] * frames, s[1] / frames, s[2]])
}

pub(crate) fn video_shape<T: Scalar>(g: &Graph<T>, x: Var) -> Result<[usize; 5]> {
    g.shape(x).try_into().map_err(|_| Error::InvalidShape {
        op: "video",
        msg: format!("expected N×C×T×H×W, got {:?}", g.shape(x)),
    })
}

/// Runs `f` with `cat` as the graph's category, restoring the previous one.
pub(crate) fn scoped<T: Scalar, R>(
    g: &mut Graph<T>,
    cat: Category,
    f: impl FnOnce(&mut Graph<T>) -> Result<R>,
) -> Result<R> {
    let prev = g.set_category(cat);
    let out = f(g);
    g.set_category(prev);
    out
}
