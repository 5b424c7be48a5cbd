//! Forward pass pinned against a recorded output.
//!
//! Regenerate with `GATN_BLESS=1 cargo test -p gatn-core --test golden` after
//! an intentional numerical change, and review the diff.

use std::fmt::Write as _;
use std::path::PathBuf;

use gatn_core::gradcheck::toy_model_config;
use gatn_core::model::{forward, ModelParams};
use gatn_core::synthdata::{gen_sample, SynthConfig};

const TOLERANCE: f64 = 1e-10;

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/forward_golden.txt")
}

fn record() -> String {
    let cfg = toy_model_config();
    let params = ModelParams::init(&cfg, 5).unwrap();
    let synth = SynthConfig {
        classes: 2,
        image_size: 64,
        radius_min: 6.0,
        radius_max: 10.0,
        ..SynthConfig::default()
    };
    let image = gen_sample(42, 1, &synth).unwrap().image;
    let out = forward(&image, &params, &cfg).unwrap();
    let mut text = String::new();
    let mut line = |key: &str, values: &[f64]| {
        write!(text, "{key}").unwrap();
        for v in values {
            write!(text, " {v:e}").unwrap();
        }
        text.push('\n');
    };
    line("logits_global", &out.logits_global);
    line("logits_fusion", &out.logits_fusion);
    line("semantic", out.attention.semantic_map.data());
    line("attention", out.attention.attention_map.data());
    line("gates", out.attention.gate_vector(0));
    let boxes: Vec<f64> = out
        .pixel_boxes
        .iter()
        .flat_map(|b| [b.row0, b.col0, b.row1, b.col1].map(|v| v as f64))
        .collect();
    line("pixel_boxes", &boxes);
    text
}

fn parse(text: &str) -> Vec<(String, Vec<f64>)> {
    text.lines()
        .map(|l| {
            let mut it = l.split_whitespace();
            let key = it.next().unwrap().to_string();
            (key, it.map(|v| v.parse().unwrap()).collect())
        })
        .collect()
}

#[test]
fn forward_matches_recorded_output() {
    let now = record();
    let path = golden_path();
    if std::env::var_os("GATN_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, &now).unwrap();
    }
    let recorded = std::fs::read_to_string(&path).expect("golden file present");
    let (want, got) = (parse(&recorded), parse(&now));
    assert_eq!(want.len(), got.len());
    for ((wk, wv), (gk, gv)) in want.iter().zip(&got) {
        assert_eq!(wk, gk);
        assert_eq!(wv.len(), gv.len(), "{wk}");
        for (i, (a, b)) in wv.iter().zip(gv).enumerate() {
            assert!((a - b).abs() <= TOLERANCE, "{wk}[{i}]: recorded {a}, now {b}");
        }
    }
}

#[test]
fn forward_is_repeatable_in_process() {
    assert_eq!(record(), record());
}
