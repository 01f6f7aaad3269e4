use vmf_core::complexity::{
    count_flops, count_macs, layer_table, preset_budget, preset_reports, TOKEN_SHARE_LIMIT,
};
use vmf_core::model::{ConvType, DownsamplePosition, Model, ModelConfig, TokenMode};
use vmf_core::nn::Activation;
use vmf_core::{Category, Tensor};

fn micro_variants() -> Vec<(&'static str, ModelConfig)> {
    let base = ModelConfig::default();
    let with = |f: &dyn Fn(&mut ModelConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    vec![
        ("micro", base.clone()),
        ("per-frame", with(&|c| c.token_mode = TokenMode::PerFrame)),
        ("2+1d", with(&|c| c.conv_type = ConvType::D2Plus1)),
        ("2d", with(&|c| c.conv_type = ConvType::D2)),
        (
            "per-stage",
            with(&|c| c.downsample_position = DownsamplePosition::PerStage),
        ),
        ("dyrelu", with(&|c| c.activation = Activation::Dyrelu)),
        (
            "relu-single",
            with(&|c| {
                c.activation = Activation::Relu;
                c.dyrelu_both = false;
            }),
        ),
        ("mobile3d", with(&|c| c.former_enabled = false)),
        (
            "wide-tokens",
            with(&|c| {
                c.token_count = 3;
                c.token_dim = 48;
                c.heads = 2;
                c.head_hidden = 40;
            }),
        ),
    ]
}

#[test]
fn analytic_equals_instrumented_for_every_category() {
    for (name, cfg) in micro_variants() {
        let model = Model::<f32>::build(&cfg, 0).unwrap();
        for shape in [[1, 3, 16, 32, 32], [2, 3, 8, 32, 32]] {
            let clip = Tensor::zeros(shape.to_vec());
            let measured = model.instrumented_macs(&clip).unwrap();
            let analytic = count_flops(&model, &shape).unwrap().macs;
            for c in Category::ALL {
                assert_eq!(analytic.get(c), measured.get(c), "{name} {shape:?} {c}");
            }
        }
    }
}

#[test]
fn macs_scale_linearly_with_batch() {
    for (name, cfg) in micro_variants() {
        let one = count_macs(&cfg, &[1, 3, 16, 32, 32]).unwrap();
        let three = count_macs(&cfg, &[3, 3, 16, 32, 32]).unwrap();
        for c in Category::ALL {
            assert_eq!(3 * one.get(c), three.get(c), "{name} {c}");
        }
    }
}

#[test]
fn former_cost_is_independent_of_clip_length() {
    for name in ["vmf-560m", "vmf-1g", "vmf-2g", "vmf-5g"] {
        let cfg = ModelConfig::preset(name).unwrap();
        let r = cfg.resolution;
        let at = |t: usize| count_macs(&cfg, &[1, 3, t, r, r]).unwrap();
        let (short, mid, long) = (at(16), at(32), at(64));
        for c in [Category::FormerMhsa, Category::FormerFfn] {
            assert!(short.get(c) > 0);
            assert_eq!(short.get(c), long.get(c), "{name} {c}");
        }
        for c in [
            Category::Stem,
            Category::MobilePointwise,
            Category::MobileDepthwise,
        ] {
            assert_eq!(4 * short.get(c), long.get(c), "{name} {c}");
        }
        // Bridges carry a per-token part that does not grow with the clip.
        for c in [Category::BridgeIn, Category::BridgeOut] {
            let (a, b, l) = (short.get(c), mid.get(c), long.get(c));
            assert_eq!(l - b, 2 * (b - a), "{name} {c}");
            assert!(l < 4 * a && l > 3 * a, "{name} {c}");
        }
    }
}

#[test]
fn mobile3d_spends_nothing_on_tokens() {
    let mut cfg = ModelConfig::default();
    cfg.former_enabled = false;
    let t = count_macs(&cfg, &[1, 3, 16, 32, 32]).unwrap();
    for c in Category::ALL.into_iter().filter(|c| c.is_token_side()) {
        assert_eq!(t.get(c), 0, "{c}");
    }
    // Disabling the Former leaves the mobile branch exactly as it was.
    let full = count_macs(&ModelConfig::default(), &[1, 3, 16, 32, 32]).unwrap();
    for c in [
        Category::Stem,
        Category::MobilePointwise,
        Category::MobileDepthwise,
    ] {
        assert_eq!(t.get(c), full.get(c), "{c}");
    }
}

#[test]
fn token_count_leaves_mobile_compute_alone() {
    let r = |m: usize| {
        let mut cfg = ModelConfig::default();
        cfg.token_count = m;
        count_macs(&cfg, &[1, 3, 16, 32, 32]).unwrap()
    };
    let (a, b) = (r(2), r(8));
    for c in [
        Category::Stem,
        Category::MobilePointwise,
        Category::MobileDepthwise,
    ] {
        assert_eq!(a.get(c), b.get(c), "{c}");
    }
    assert!(b.get(Category::FormerMhsa) > a.get(Category::FormerMhsa));
}

#[test]
fn invalid_shapes_are_rejected() {
    let cfg = ModelConfig::default();
    assert!(count_macs(&cfg, &[1, 3, 16, 32]).is_err());
    let model = Model::<f32>::build(&cfg, 0).unwrap();
    assert!(count_flops(&model, &[1, 3, 15, 32, 32]).is_err());
    assert!(count_flops(&model, &[1, 3, 16, 30, 32]).is_err());
}

#[test]
fn preset_token_share_under_limit() {
    for line in preset_budget(64).unwrap() {
        assert!(
            line.ratio > 0.0 && line.ratio < TOKEN_SHARE_LIMIT,
            "{line:?}"
        );
        assert!(line.pass);
    }
}

#[test]
fn preset_reports_are_self_consistent() {
    for (name, r) in preset_reports(64).unwrap() {
        let model = Model::<f32>::build(&ModelConfig::preset(&name).unwrap(), 0).unwrap();
        assert_eq!(r.total_params(), model.num_params() as u64);
        let rows = layer_table(&model, &r.input_shape).unwrap();
        assert_eq!(
            rows.iter().map(|row| row.params).sum::<u64>(),
            r.total_params()
        );
        assert_eq!(rows.last().unwrap().output_shape, vec![1, 400]);
        let doc: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(doc["total_macs"].as_u64(), Some(r.total_macs()));
        assert_eq!(doc["total_flops_2x"].as_u64(), Some(2 * r.total_macs()));
    }
}

#[test]
fn layer_table_matches_forward_shapes_for_variants() {
    for (name, cfg) in micro_variants() {
        let model = Model::<f32>::build(&cfg, 0).unwrap();
        let rows = layer_table(&model, &[1, 3, 16, 32, 32]).unwrap();
        assert_eq!(
            rows.iter().map(|r| r.params).sum::<u64>(),
            model.num_params() as u64,
            "{name}"
        );
        assert_eq!(
            rows.iter().any(|r| r.name.ends_with(".former")),
            cfg.former_enabled,
            "{name}"
        );
    }
}
