//! Analytic multiply-accumulate and parameter accounting.
//!
//! One multiply-accumulate is one unit. Normalisation, softmax, activation,
//! scaling, bias and residual additions cost one unit per output element,
//! pooling one unit per input element, and layout changes are free. These
//! are the same rules the graph applies while executing, so the analytic
//! count equals the instrumented one exactly.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::category::{Category, Tally};
use crate::error::{Error, Result};
use crate::model::{ConvType, Model, ModelConfig, TokenMode, DYRELU_REDUCTION, PRESETS};
use crate::nn::Activation;
use crate::tensor::ops::Conv3dGeometry;
use crate::tensor::Scalar;

/// The share of total compute the token side may take.
pub const TOKEN_SHARE_LIMIT: f64 = 0.12;

/// Per-category MACs and parameters for one input shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopReport {
    pub input_shape: Vec<usize>,
    pub macs: Tally,
    pub params: Tally,
}

#[derive(Debug, Serialize, Deserialize)]
struct CategoryRow {
    category: Category,
    macs: u64,
    flops_2x: u64,
    params: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ReportDoc {
    input_shape: Vec<usize>,
    categories: Vec<CategoryRow>,
    total_macs: u64,
    total_flops_2x: u64,
    total_params: u64,
}

impl FlopReport {
    pub fn total_macs(&self) -> u64 {
        self.macs.total()
    }

    pub fn total_params(&self) -> u64 {
        self.params.total()
    }

    /// MACs of both bridges, the Former block and the activation generators.
    pub fn token_side_macs(&self) -> u64 {
        Category::ALL
            .iter()
            .filter(|c| c.is_token_side())
            .map(|&c| self.macs.get(c))
            .sum()
    }

    pub fn token_side_ratio(&self) -> f64 {
        let total = self.total_macs();
        if total == 0 {
            0.0
        } else {
            self.token_side_macs() as f64 / total as f64
        }
    }

    /// `key = value` lines, one category per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "input_shape = {:?}", self.input_shape);
        for c in Category::ALL {
            let _ = writeln!(
                s,
                "{:<18} macs = {:>14}  flops_2x = {:>14}  params = {:>10}",
                c.name(),
                self.macs.get(c),
                2 * self.macs.get(c),
                self.params.get(c)
            );
        }
        let _ = writeln!(
            s,
            "{:<18} macs = {:>14}  flops_2x = {:>14}  params = {:>10}",
            "total",
            self.total_macs(),
            2 * self.total_macs(),
            self.total_params()
        );
        s
    }

    /// Single JSON document with one `{category, macs, params}` row per
    /// category.
    pub fn to_json(&self) -> String {
        let doc = ReportDoc {
            input_shape: self.input_shape.clone(),
            categories: Category::ALL
                .iter()
                .map(|&c| CategoryRow {
                    category: c,
                    macs: self.macs.get(c),
                    flops_2x: 2 * self.macs.get(c),
                    params: self.params.get(c),
                })
                .collect(),
            total_macs: self.total_macs(),
            total_flops_2x: 2 * self.total_macs(),
            total_params: self.total_params(),
        };
        serde_json::to_string_pretty(&doc).expect("report serialises")
    }
}

/// Exact parameter census per category.
pub fn count_params<T: Scalar>(model: &Model<T>) -> Tally {
    model.param_tally()
}

/// Analytic MAC count of `model` on a clip of `input_shape` (`N×3×T×R×R`).
pub fn count_flops<T: Scalar>(model: &Model<T>, input_shape: &[usize]) -> Result<FlopReport> {
    model.check_input(input_shape)?;
    Ok(FlopReport {
        input_shape: input_shape.to_vec(),
        macs: count_macs(model.config(), input_shape)?,
        params: model.param_tally(),
    })
}

struct Counter {
    tally: Tally,
    cat: Category,
}

impl Counter {
    fn add(&mut self, n: usize) {
        self.tally.add(self.cat, n as u64);
    }

    fn at(&mut self, cat: Category) -> &mut Self {
        self.cat = cat;
        self
    }
}

fn out_extents(
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
) -> Result<[usize; 3]> {
    Conv3dGeometry::new(kernel, stride, pad).out_extents(input)
}

/// MACs of `config` on `input_shape`, without building the model.
pub fn count_macs(cfg: &ModelConfig, input_shape: &[usize]) -> Result<Tally> {
    cfg.validate()?;
    let [n, _, t, h, w]: [usize; 5] = input_shape.try_into().map_err(|_| Error::InvalidShape {
        op: "count_flops",
        msg: format!("expected N×3×T×H×W, got {input_shape:?}"),
    })?;
    let mut k = Counter {
        tally: Tally::default(),
        cat: Category::Stem,
    };
    let (m, d, heads) = (cfg.token_count, cfg.token_dim, cfg.heads);
    let dh = d / heads;

    // stem
    let c0 = cfg.base_dim;
    let [t1, h1, w1] = out_extents([t, h, w], [1, 3, 3], [1, 2, 2], [0, 1, 1])?;
    k.add(n * c0 * t1 * h1 * w1 * 3 * 9);
    let [t2, h2, w2] = out_extents(
        [t1, h1, w1],
        [3, 1, 1],
        [cfg.stem_stride(), 1, 1],
        [1, 0, 0],
    )?;
    let stem_out = n * c0 * t2 * h2 * w2;
    k.add(stem_out * c0 * 3);
    k.add(2 * stem_out);

    let frames = t2;
    // tokens per sample in the Former
    let per_frame = cfg.token_mode == TokenMode::PerFrame;
    let mt = if per_frame { frames * m } else { m };
    // positions each token attends to; per-frame tokens see only their frame
    let span = |t: usize, h: usize, w: usize| if per_frame { h * w } else { t * h * w };
    let act = cfg.effective_activation();
    let (mut ct, mut ch, mut cw) = (t2, h2, w2);

    for b in cfg.blocks() {
        let (c_in, c_hid, c_out) = (b.c_in, b.c_hid, b.c_out);
        if cfg.former_enabled {
            let l_in = span(ct, ch, cw);
            let z = n * mt * d;
            // bridge in; per-frame mode splits the same products over N·T rows
            k.at(Category::BridgeIn);
            k.add(z);
            k.add(n * mt * dh * c_in);
            let qk = n * heads * mt * l_in;
            k.add(qk * (c_in / heads));
            k.add(2 * qk);
            k.add(qk * (c_in / heads));
            k.add(n * mt * c_in * d);
            k.add(z);
            // Former self-attention; per-frame mode attends over all T·M tokens
            k.at(Category::FormerMhsa);
            k.add(z);
            k.add(n * mt * d * dh);
            let qq = n * heads * mt * mt;
            k.add(qq * dh);
            k.add(2 * qq);
            k.add(qq * dh);
            k.add(z * d);
            k.add(z);
            k.at(Category::FormerFfn);
            k.add(z);
            k.add(z * 2 * d);
            k.add(2 * 2 * z);
            k.add(2 * z * d);
            k.add(2 * z);
        }

        let generators = cfg.generators_per_block();
        let dyrelu_cost =
            |k: &mut Counter, c: usize, frames_here: usize, spatial: usize, own: Category| {
                let (rows, gen_in) = match act {
                    Activation::FrameDyrelu => (n * frames_here, c + d),
                    _ if cfg.token_mode == TokenMode::PerFrame => (n * frames_here, d),
                    _ => (n, d),
                };
                let hid = gen_in.div_ceil(DYRELU_REDUCTION);
                k.at(Category::DyreluGenerator);
                if act == Activation::FrameDyrelu {
                    k.add(n * c * frames_here * spatial);
                }
                k.add(rows * gen_in * hid);
                k.add(2 * rows * hid);
                k.add(rows * hid * 4 * c);
                k.add(2 * rows * 4 * c);
                k.at(own);
                k.add(n * c * frames_here * spatial);
            };

        // mobile block
        let p_in = n * ct * ch * cw;
        k.at(Category::MobilePointwise);
        k.add(p_in * c_hid * c_in);
        k.add(p_in * c_hid);
        if generators >= 1 {
            dyrelu_cost(&mut k, c_hid, ct, ch * cw, Category::MobilePointwise);
        } else {
            k.add(p_in * c_hid);
        }
        k.at(Category::MobileDepthwise);
        let (s, ts) = (b.spatial_stride, b.temporal_stride);
        let [dt, dh2, dw2] = match cfg.conv_type {
            ConvType::D3 => {
                let o = out_extents([ct, ch, cw], [3, 3, 3], [ts, s, s], [1, 1, 1])?;
                k.add(n * c_hid * o.iter().product::<usize>() * 27);
                o
            }
            ConvType::D2 => {
                let o = out_extents([ct, ch, cw], [1, 3, 3], [ts, s, s], [0, 1, 1])?;
                k.add(n * c_hid * o.iter().product::<usize>() * 9);
                o
            }
            ConvType::D2Plus1 => {
                let o1 = out_extents([ct, ch, cw], [1, 3, 3], [1, s, s], [0, 1, 1])?;
                k.add(n * c_hid * o1.iter().product::<usize>() * 9);
                let o2 = out_extents(o1, [3, 1, 1], [ts, 1, 1], [1, 0, 0])?;
                k.add(n * c_hid * o2.iter().product::<usize>() * 3);
                o2
            }
        };
        let p_out = n * dt * dh2 * dw2;
        k.add(p_out * c_hid);
        if generators >= 2 {
            dyrelu_cost(&mut k, c_hid, dt, dh2 * dw2, Category::MobileDepthwise);
        } else {
            k.add(p_out * c_hid);
        }
        k.at(Category::MobilePointwise);
        k.add(p_out * c_out * c_hid);
        k.add(p_out * c_out);
        if c_in == c_out && (dt, dh2, dw2) == (ct, ch, cw) {
            k.add(p_out * c_out);
        }
        (ct, ch, cw) = (dt, dh2, dw2);

        if cfg.former_enabled {
            let l_out = span(ct, ch, cw);
            k.at(Category::BridgeOut);
            k.add(n * mt * d);
            k.add(2 * n * mt * dh * c_out);
            let qk = n * heads * l_out * mt;
            k.add(qk * (c_out / heads));
            k.add(2 * qk);
            k.add(qk * (c_out / heads));
            k.add(n * c_out * ct * ch * cw);
        }
    }

    // head
    let c4 = cfg.stage_channels()[3];
    let hw = cfg.head_width();
    k.at(Category::Head);
    k.add(n * c4 * ct * ch * cw);
    k.add(n * (c4 + d) * hw);
    k.add(2 * n * hw);
    k.add(n * hw * cfg.num_classes);
    k.add(n * cfg.num_classes);
    Ok(k.tally)
}

/// One row of the layer table: output activation shape and parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRow {
    pub name: String,
    pub output_shape: Vec<usize>,
    pub params: u64,
}

fn depthwise_extents(
    cfg: &ModelConfig,
    ext: [usize; 3],
    s: usize,
    ts: usize,
) -> Result<[usize; 3]> {
    match cfg.conv_type {
        ConvType::D3 => out_extents(ext, [3, 3, 3], [ts, s, s], [1, 1, 1]),
        ConvType::D2 => out_extents(ext, [1, 3, 3], [ts, s, s], [0, 1, 1]),
        ConvType::D2Plus1 => {
            let o = out_extents(ext, [1, 3, 3], [1, s, s], [0, 1, 1])?;
            out_extents(o, [3, 1, 1], [ts, 1, 1], [1, 0, 0])
        }
    }
}

/// Layer-by-layer output shapes and parameter counts of `model` on
/// `input_shape`, in execution order.
pub fn layer_table<T: Scalar>(model: &Model<T>, input_shape: &[usize]) -> Result<Vec<LayerRow>> {
    model.check_input(input_shape)?;
    let cfg = model.config();
    let (n, t, h, w) = (
        input_shape[0],
        input_shape[2],
        input_shape[3],
        input_shape[4],
    );
    let params_of = |prefix: &str| -> u64 {
        model
            .param_info()
            .iter()
            .filter(|p| p.name == prefix || p.name.starts_with(&format!("{prefix}.")))
            .map(|p| p.numel() as u64)
            .sum()
    };
    let mut rows = Vec::new();
    let mut row = |name: String, output_shape: Vec<usize>, params: u64| {
        rows.push(LayerRow {
            name,
            output_shape,
            params,
        })
    };

    let c0 = cfg.base_dim;
    let e1 = out_extents([t, h, w], [1, 3, 3], [1, 2, 2], [0, 1, 1])?;
    let mut ext = out_extents(e1, [3, 1, 1], [cfg.stem_stride(), 1, 1], [1, 0, 0])?;
    row(
        "stem".into(),
        vec![n, c0, ext[0], ext[1], ext[2]],
        params_of("stem"),
    );
    let (m, d) = (cfg.token_count, cfg.token_dim);
    let mt = if cfg.token_mode == TokenMode::PerFrame {
        ext[0] * m
    } else {
        m
    };
    if cfg.former_enabled {
        row("tokens".into(), vec![n, mt, d], params_of("tokens"));
    }
    for (i, b) in cfg.blocks().iter().enumerate() {
        let pre = format!("blocks.{i}");
        if cfg.former_enabled {
            for part in ["bridge_in", "former"] {
                let name = format!("{pre}.{part}");
                let p = params_of(&name);
                row(name, vec![n, mt, d], p);
            }
        }
        ext = depthwise_extents(cfg, ext, b.spatial_stride, b.temporal_stride)?;
        let video = vec![n, b.c_out, ext[0], ext[1], ext[2]];
        let name = format!("{pre}.mobile");
        row(
            name.clone(),
            video.clone(),
            params_of(&name) + params_of(&format!("{pre}.dyrelu")),
        );
        if cfg.former_enabled {
            let name = format!("{pre}.bridge_out");
            let p = params_of(&name);
            row(name, video, p);
        }
    }
    row("head".into(), vec![n, cfg.num_classes], params_of("head"));
    Ok(rows)
}

/// Token-side compute share of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetLine {
    pub name: String,
    pub total_macs: u64,
    pub token_side_macs: u64,
    pub ratio: f64,
    pub pass: bool,
}

pub fn budget_report<T: Scalar>(model: &Model<T>, input_shape: &[usize]) -> Result<BudgetLine> {
    let r = count_flops(model, input_shape)?;
    Ok(budget_line("model", &r))
}

/// The budget line of one report, under `name`.
pub fn budget_line(name: &str, r: &FlopReport) -> BudgetLine {
    let ratio = r.token_side_ratio();
    BudgetLine {
        name: name.to_string(),
        total_macs: r.total_macs(),
        token_side_macs: r.token_side_macs(),
        ratio,
        pass: ratio < TOKEN_SHARE_LIMIT,
    }
}

/// Reports for the four named variants on one clip of `frames` frames.
pub fn preset_reports(frames: usize) -> Result<Vec<(String, FlopReport)>> {
    PRESETS
        .iter()
        .filter(|p| p.starts_with("vmf-"))
        .map(|&p| {
            let mut cfg = ModelConfig::preset(p)?;
            cfg.frames = frames;
            let model = Model::<f32>::build(&cfg, 0)?;
            let shape = [1, 3, frames, cfg.resolution, cfg.resolution];
            Ok((p.to_string(), count_flops(&model, &shape)?))
        })
        .collect()
}

/// Budget lines for the four named variants.
pub fn preset_budget(frames: usize) -> Result<Vec<BudgetLine>> {
    Ok(preset_reports(frames)?
        .iter()
        .map(|(name, r)| budget_line(name, r))
        .collect())
}
