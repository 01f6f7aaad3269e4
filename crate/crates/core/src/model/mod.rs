//! Variant assembly: stem, four stages of parallel mobile and former blocks and the
//! classifier head, built from a [`ModelConfig`].

pub mod checkpoint;
mod config;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

pub use config::{
    BlockSpec, ConvType, DownsamplePosition, ModelConfig, TokenMode, FIELDS, PRESETS,
};

use crate::category::{Category, Tally};
use crate::error::{Error, Result};
use crate::nn::{
    self, classifier_head, former_block, former_to_mobile, mobile_block, mobile_to_former, stem,
    Activation, BridgeInWeights, BridgeOutWeights, DepthwiseKernel, DyReluGenerator, FormerWeights,
    GroupNorm, HeadWeights, Linear, MobileWeights, StemWeights, TokenContext, TokenScope,
};
use crate::tensor::{Graph, Scalar, Tensor, Var};
use checkpoint::{Entry, Payload};

/// Generator hidden width is `ceil(in / R)`.
pub const DYRELU_REDUCTION: usize = 6;
const TOKEN_INIT_STD: f64 = 0.02;
pub const CONFIG_TENSOR: &str = "__config__";

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// Name, accounting category and shape of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub category: Category,
    pub shape: Vec<usize>,
    init: Init,
}

impl ParamInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// True for the learnable global tokens.
    pub fn is_tokens(&self) -> bool {
        self.name == "tokens"
    }
}

#[derive(Debug, Clone)]
struct BlockLayout {
    spec: BlockSpec,
    mobile: MobileWeights,
    bridge_in: Option<BridgeInWeights>,
    former: Option<FormerWeights>,
    bridge_out: Option<BridgeOutWeights>,
}

#[derive(Debug, Clone)]
struct Layout {
    stem: StemWeights,
    tokens: Option<Var>,
    blocks: Vec<BlockLayout>,
    head: HeadWeights,
}

struct Registry {
    info: Vec<ParamInfo>,
}

impl Registry {
    fn add(&mut self, name: String, category: Category, shape: Vec<usize>, init: Init) -> Var {
        self.info.push(ParamInfo {
            name,
            category,
            shape,
            init,
        });
        Var(self.info.len() - 1)
    }

    /// He-style normal init for a weight with the given fan-in.
    fn weight(&mut self, name: String, cat: Category, shape: Vec<usize>, fan_in: usize) -> Var {
        self.add(name, cat, shape, Init::Normal((2.0 / fan_in as f64).sqrt()))
    }

    /// Variance-preserving init for attention projections.
    fn projection(&mut self, name: String, cat: Category, shape: Vec<usize>, fan_in: usize) -> Var {
        self.add(name, cat, shape, Init::Normal((1.0 / fan_in as f64).sqrt()))
    }

    fn group_norm(&mut self, prefix: &str, cat: Category, c: usize) -> GroupNorm {
        GroupNorm {
            gamma: self.add(format!("{prefix}.gamma"), cat, vec![c], Init::Ones),
            beta: self.add(format!("{prefix}.beta"), cat, vec![c], Init::Zeros),
            groups: nn::group_count(c),
        }
    }

    fn layer_norm(&mut self, prefix: &str, cat: Category, d: usize) -> (Var, Var) {
        (
            self.add(format!("{prefix}.gamma"), cat, vec![d], Init::Ones),
            self.add(format!("{prefix}.beta"), cat, vec![d], Init::Zeros),
        )
    }

    fn linear(
        &mut self,
        prefix: &str,
        cat: Category,
        fan_in: usize,
        out: usize,
        init: Init,
    ) -> Linear {
        Linear {
            weight: self.add(format!("{prefix}.weight"), cat, vec![fan_in, out], init),
            bias: Some(self.add(format!("{prefix}.bias"), cat, vec![out], Init::Zeros)),
        }
    }
}

fn layout(cfg: &ModelConfig) -> (Vec<ParamInfo>, Layout) {
    use Category::*;
    let mut r = Registry { info: Vec::new() };
    let c0 = cfg.base_dim;
    let stem = StemWeights {
        spatial: r.weight("stem.spatial".into(), Stem, vec![c0, 3, 1, 3, 3], 27),
        temporal: r.weight("stem.temporal".into(), Stem, vec![c0, c0, 3, 1, 1], 3 * c0),
        norm: r.group_norm("stem.norm", Stem, c0),
    };
    let (m, d, h) = (cfg.token_count, cfg.token_dim, cfg.heads);
    let tokens = cfg.former_enabled.then(|| {
        r.add(
            "tokens".into(),
            FormerMhsa,
            vec![m, d],
            Init::Normal(TOKEN_INIT_STD),
        )
    });
    let act = cfg.effective_activation();
    let mut blocks = Vec::new();
    for (i, spec) in cfg.blocks().into_iter().enumerate() {
        let p = format!("blocks.{i}");
        let BlockSpec {
            c_in, c_hid, c_out, ..
        } = spec;
        let bridge_in = cfg.former_enabled.then(|| BridgeInWeights {
            w_q: r.projection(
                format!("{p}.bridge_in.w_q"),
                BridgeIn,
                vec![h, d / h, c_in / h],
                d / h,
            ),
            w_o: r.projection(format!("{p}.bridge_in.w_o"), BridgeIn, vec![c_in, d], c_in),
        });
        let former = cfg.former_enabled.then(|| {
            let f = format!("{p}.former");
            FormerWeights {
                norm1: r.layer_norm(&format!("{f}.norm1"), FormerMhsa, d),
                w_q: r.projection(format!("{f}.w_q"), FormerMhsa, vec![h, d / h, d / h], d / h),
                w_o: r.projection(format!("{f}.w_o"), FormerMhsa, vec![d, d], d),
                norm2: r.layer_norm(&format!("{f}.norm2"), FormerFfn, d),
                ffn1: r.linear(
                    &format!("{f}.ffn1"),
                    FormerFfn,
                    d,
                    2 * d,
                    Init::Normal((2.0 / d as f64).sqrt()),
                ),
                ffn2: r.linear(
                    &format!("{f}.ffn2"),
                    FormerFfn,
                    2 * d,
                    d,
                    Init::Normal((0.5 / d as f64).sqrt()),
                ),
            }
        });
        let mb = format!("{p}.mobile");
        let expand = r.weight(
            format!("{mb}.expand"),
            MobilePointwise,
            vec![c_hid, c_in],
            c_in,
        );
        let expand_norm = r.group_norm(&format!("{mb}.expand_norm"), MobilePointwise, c_hid);
        let depthwise = match cfg.conv_type {
            ConvType::D3 => DepthwiseKernel::Full(r.weight(
                format!("{mb}.dw"),
                MobileDepthwise,
                vec![c_hid, 3, 3, 3],
                27,
            )),
            ConvType::D2 => DepthwiseKernel::Spatial(r.weight(
                format!("{mb}.dw"),
                MobileDepthwise,
                vec![c_hid, 1, 3, 3],
                9,
            )),
            ConvType::D2Plus1 => DepthwiseKernel::Factorized {
                spatial: r.weight(
                    format!("{mb}.dw_spatial"),
                    MobileDepthwise,
                    vec![c_hid, 1, 3, 3],
                    9,
                ),
                temporal: r.weight(
                    format!("{mb}.dw_temporal"),
                    MobileDepthwise,
                    vec![c_hid, 3, 1, 1],
                    3,
                ),
            },
        };
        let dw_norm = r.group_norm(&format!("{mb}.dw_norm"), MobileDepthwise, c_hid);
        let project = r.weight(
            format!("{mb}.project"),
            MobilePointwise,
            vec![c_out, c_hid],
            c_hid,
        );
        let project_norm = r.group_norm(&format!("{mb}.project_norm"), MobilePointwise, c_out);
        let gen_in = match act {
            Activation::FrameDyrelu => c_hid + d,
            _ => d,
        };
        let gen_hidden = gen_in.div_ceil(DYRELU_REDUCTION);
        let generators = (0..cfg.generators_per_block())
            .map(|j| {
                let gp = format!("{p}.dyrelu.{j}");
                DyReluGenerator {
                    fc1: r.linear(
                        &format!("{gp}.fc1"),
                        DyreluGenerator,
                        gen_in,
                        gen_hidden,
                        Init::Normal((2.0 / gen_in as f64).sqrt()),
                    ),
                    fc2: r.linear(
                        &format!("{gp}.fc2"),
                        DyreluGenerator,
                        gen_hidden,
                        4 * c_hid,
                        Init::Zeros,
                    ),
                }
            })
            .collect();
        let bridge_out = cfg.former_enabled.then(|| BridgeOutWeights {
            w_k: r.projection(
                format!("{p}.bridge_out.w_k"),
                BridgeOut,
                vec![h, d / h, c_out / h],
                d / h,
            ),
            w_v: r.projection(
                format!("{p}.bridge_out.w_v"),
                BridgeOut,
                vec![h, d / h, c_out / h],
                d / h,
            ),
        });
        blocks.push(BlockLayout {
            spec,
            mobile: MobileWeights {
                expand,
                expand_norm,
                depthwise,
                dw_norm,
                project,
                project_norm,
                generators,
            },
            bridge_in,
            former,
            bridge_out,
        });
    }
    let c4 = cfg.stage_channels()[3];
    let hw = cfg.head_width();
    let head = HeadWeights {
        fc1: r.linear(
            "head.fc1",
            Head,
            c4 + d,
            hw,
            Init::Normal((2.0 / (c4 + d) as f64).sqrt()),
        ),
        fc2: r.linear(
            "head.fc2",
            Head,
            hw,
            cfg.num_classes,
            Init::Normal((1.0 / hw as f64).sqrt()),
        ),
    };
    (
        r.info,
        Layout {
            stem,
            tokens,
            blocks,
            head,
        },
    )
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Initial value of one parameter. Each tensor draws from its own stream
/// keyed by `(seed, name)`, so a tensor's init does not depend on which
/// other tensors exist.
fn init_tensor<T: Scalar>(info: &ParamInfo, seed: u64) -> Tensor<T> {
    match info.init {
        Init::Zeros => Tensor::zeros(info.shape.clone()),
        Init::Ones => Tensor::ones(info.shape.clone()),
        Init::Normal(std) => {
            let mut key = [0u8; 32];
            key[..8].copy_from_slice(&seed.to_le_bytes());
            key[8..16].copy_from_slice(&fnv1a(&info.name).to_le_bytes());
            let mut rng = ChaCha8Rng::from_seed(key);
            let dist = Normal::new(0.0, std).expect("finite std");
            Tensor::from_fn(info.shape.clone(), |_| T::of(rng.sample(dist)))
        }
    }
}

/// A built model: config echo, parameter census and parameter values.
/// Parameter `i` is node `i` of every graph made by [`Model::graph`].
#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    info: Vec<ParamInfo>,
    params: Vec<Tensor<T>>,
    layout: Layout,
}

impl<T: Scalar> Model<T> {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (info, layout) = layout(config);
        let params = info.iter().map(|p| init_tensor(p, seed)).collect();
        Ok(Self {
            config: config.clone(),
            info,
            params,
            layout,
        })
    }

    /// Rebuilds a model from named tensors. Every parameter must be present
    /// with the expected shape; unknown names are rejected.
    pub fn from_named(config: &ModelConfig, mut named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let (info, layout) = layout(config);
        if let Some((name, _)) = named
            .iter()
            .find(|(n, _)| !info.iter().any(|p| &p.name == n))
        {
            return Err(Error::Checkpoint(format!("unknown tensor {name:?}")));
        }
        let mut params = Vec::with_capacity(info.len());
        for p in &info {
            let k = named
                .iter()
                .position(|(n, _)| n == &p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {:?}", p.name)))?;
            let (_, t) = named.swap_remove(k);
            if t.shape() != p.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{}: shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.shape
                )));
            }
            params.push(t);
        }
        Ok(Self {
            config: config.clone(),
            info,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_info(&self) -> &[ParamInfo] {
        &self.info
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.info
            .iter()
            .position(|p| p.name == name)
            .map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = self.info.iter().position(|p| p.name == name)?;
        Some(&mut self.params[i])
    }

    pub fn num_params(&self) -> usize {
        self.info.iter().map(ParamInfo::numel).sum()
    }

    /// Parameter count per category.
    pub fn param_tally(&self) -> Tally {
        let mut t = Tally::default();
        for p in &self.info {
            t.add(p.category, p.numel() as u64);
        }
        t
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            info: self.info.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            layout: self.layout.clone(),
        }
    }

    /// A graph whose first nodes are this model's parameters.
    pub fn graph(&self) -> Graph<T> {
        Graph::with_params(&self.params)
    }

    /// Checks a clip against the config: `N×3×T×R×R`, `T` a multiple of the
    /// temporal stride.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        let ok = shape.len() == 5
            && shape[0] >= 1
            && shape[1] == 3
            && shape[2] >= 3
            && shape[2].is_multiple_of(c.temporal_stride)
            && shape[3] == c.resolution
            && shape[4] == c.resolution;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidShape {
                op: "forward",
                msg: format!(
                    "expected N×3×T×{r}×{r} with T a multiple of {s} (T ≥ 3), got {shape:?}",
                    r = c.resolution,
                    s = c.temporal_stride
                ),
            })
        }
    }

    /// Records the forward pass of `clip` on `g` and returns the logits.
    pub fn forward_on(&self, g: &mut Graph<T>, clip: Var) -> Result<Var> {
        self.check_input(g.shape(clip))?;
        let cfg = &self.config;
        let l = &self.layout;
        let n = g.shape(clip)[0];
        let (m, d, heads) = (cfg.token_count, cfg.token_dim, cfg.heads);
        let per_frame = cfg.token_mode == TokenMode::PerFrame;
        let scope = if per_frame {
            TokenScope::Frame
        } else {
            TokenScope::Video
        };
        let act = cfg.effective_activation();

        let mut x = stem(g, clip, &l.stem, cfg.stem_stride())?;
        let frames = g.shape(x)[2];
        let mut z = match l.tokens {
            Some(tok) => {
                let tok = if per_frame {
                    let e = g.expand_axis(tok, 0, frames)?;
                    g.reshape(e, &[frames * m, d])?
                } else {
                    tok
                };
                Some(g.expand_axis(tok, 0, n)?)
            }
            None => None,
        };

        for b in &l.blocks {
            if let (Some(zv), Some(bi), Some(fw)) = (z, &b.bridge_in, &b.former) {
                let seq = nn::to_sequence(g, x, scope)?;
                let zt = if per_frame {
                    nn::tokens_per_frame(g, zv, frames)?
                } else {
                    zv
                };
                let upd = mobile_to_former(g, zt, seq, bi, heads)?;
                let upd = if per_frame {
                    g.reshape(upd, &[n, frames * m, d])?
                } else {
                    upd
                };
                let prev = g.set_category(Category::BridgeIn);
                let zv = g.add(zv, upd);
                g.set_category(prev);
                z = Some(former_block(g, zv?, fw, heads)?);
            }
            let ctx = match z {
                Some(zv) if !b.mobile.generators.is_empty() => Some(if per_frame {
                    let r = g.reshape(zv, &[n, frames, m, d])?;
                    TokenContext::PerFrame(g.index_axis(r, 2, 0)?)
                } else {
                    TokenContext::Shared(g.index_axis(zv, 1, 0)?)
                }),
                _ => None,
            };
            x = mobile_block(
                g,
                x,
                &b.mobile,
                act,
                ctx,
                b.spec.spatial_stride,
                b.spec.temporal_stride,
            )?;
            if let (Some(zv), Some(bo)) = (z, &b.bridge_out) {
                let shape = nn::video_shape(g, x)?;
                let seq = nn::to_sequence(g, x, scope)?;
                let zt = if per_frame {
                    nn::tokens_per_frame(g, zv, frames)?
                } else {
                    zv
                };
                let upd = former_to_mobile(g, seq, zt, bo, heads)?;
                let upd = nn::from_sequence(g, upd, shape, scope)?;
                let prev = g.set_category(Category::BridgeOut);
                let out = g.add(x, upd);
                g.set_category(prev);
                x = out?;
            }
        }

        let z0 = match z {
            Some(zv) => g.index_axis(zv, 1, 0)?,
            // Mobile3D keeps the head's token slot and feeds it zeros.
            None => g.input(Tensor::zeros(vec![n, d])),
        };
        classifier_head(g, x, z0, &l.head)
    }

    pub fn forward(&self, clip: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = self.graph();
        let x = g.input(clip.clone());
        let y = self.forward_on(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    /// Mean cross-entropy and its gradient for every parameter.
    pub fn loss_and_grads(
        &self,
        clip: &Tensor<T>,
        labels: &[usize],
    ) -> Result<(T, Vec<Tensor<T>>)> {
        let mut g = self.graph();
        let x = g.input(clip.clone());
        let logits = self.forward_on(&mut g, x)?;
        let loss = g.cross_entropy(logits, labels)?;
        let value = g.value(loss).data()[0];
        let grads = g.backward(loss)?.params(&g);
        Ok((value, grads))
    }

    /// Multiply-accumulates per category, counted while executing a
    /// forward pass on `clip`.
    pub fn instrumented_macs(&self, clip: &Tensor<T>) -> Result<Tally> {
        let mut g = self.graph();
        let x = g.input(clip.clone());
        self.forward_on(&mut g, x)?;
        Ok(*g.tally())
    }

    /// Container entries: the config text followed by every parameter.
    pub fn to_entries(&self) -> Vec<Entry> {
        std::iter::once(Entry::new(
            CONFIG_TENSOR,
            Payload::Bytes(self.config.to_text().into_bytes()),
        ))
        .chain(
            self.info
                .iter()
                .zip(&self.params)
                .map(|(p, t)| Entry::new(p.name.clone(), Payload::from_tensor(t))),
        )
        .collect()
    }

    pub fn from_entries(entries: Vec<Entry>) -> Result<Self> {
        let mut config = None;
        let mut named = Vec::new();
        for e in entries {
            match (e.name.as_str(), e.payload) {
                (CONFIG_TENSOR, Payload::Bytes(b)) => {
                    let text = String::from_utf8(b)
                        .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
                    config = Some(ModelConfig::parse(&text)?);
                }
                (CONFIG_TENSOR, _) => {
                    return Err(Error::Checkpoint("config tensor must hold bytes".into()))
                }
                (_, Payload::Bytes(_)) => {
                    return Err(Error::Checkpoint(format!(
                        "{}: expected a float tensor",
                        e.name
                    )))
                }
                (_, p) => named.push((e.name, p.to_tensor::<T>().expect("float payload"))),
            }
        }
        let config = config.ok_or_else(|| Error::Checkpoint(format!("missing {CONFIG_TENSOR}")))?;
        Self::from_named(&config, named)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::encode(&self.to_entries())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_entries(checkpoint::decode(bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Predicted checkpoint size in bytes.
    pub fn checkpoint_len(&self) -> usize {
        checkpoint::HEADER_LEN
            + checkpoint::entry_len(CONFIG_TENSOR, &[self.config.to_text().len()], 1)
            + self
                .info
                .iter()
                .map(|p| checkpoint::entry_len(&p.name, &p.shape, T::DTYPE.size()))
                .sum::<usize>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn census_names_and_categories() {
        let m = Model::<f32>::build(&ModelConfig::default(), 1).unwrap();
        let names: Vec<_> = m
            .param_info()
            .iter()
            .filter(|p| p.name.starts_with("blocks.0.bridge"))
            .map(|p| p.name.as_str())
            .collect();
        assert_eq!(
            names,
            [
                "blocks.0.bridge_in.w_q",
                "blocks.0.bridge_in.w_o",
                "blocks.0.bridge_out.w_k",
                "blocks.0.bridge_out.w_v"
            ]
        );
        assert_eq!(m.param_tally().total() as usize, m.num_params());
    }

    #[test]
    fn init_is_keyed_by_name() {
        let a = Model::<f32>::build(&ModelConfig::default(), 3).unwrap();
        let mut cfg = ModelConfig::default();
        cfg.former_enabled = false;
        let b = Model::<f32>::build(&cfg, 3).unwrap();
        assert_eq!(
            a.param("blocks.2.mobile.expand"),
            b.param("blocks.2.mobile.expand")
        );
        assert_eq!(a.param("head.fc1.weight"), b.param("head.fc1.weight"));
        let c = Model::<f32>::build(&ModelConfig::default(), 4).unwrap();
        assert_ne!(a.param("stem.spatial"), c.param("stem.spatial"));
    }
}
