use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use gatn_core::synthdata::{self, SynthSample};
use gatn_core::tensor::ops::resize_bilinear;
use gatn_core::training;
use gatn_core::{gradcheck, model, Tensor4};
use serde_json::json;

use crate::cli::{Cli, Command, EvalArgs, GradcheckArgs, RunArgs, SynthArgs, VisualizeArgs};
use crate::config::{self, RunConfig};
use crate::error::{self, CliError, CliResult};
use crate::{checkpoint, dataset, metrics, pnm};

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Visualize(a) => visualize(&a),
        Command::Gradcheck(a) => grad_check(&a),
    }
}

fn resolve(config: Option<&Path>, flags: &[(&str, String)]) -> CliResult<RunConfig> {
    let resolved = config::resolve(RunConfig::default(), config, flags)?;
    for line in &resolved.log {
        eprintln!("{line}");
    }
    Ok(resolved.config)
}

fn resolve_run(args: &RunArgs) -> CliResult<RunConfig> {
    resolve(args.config.as_deref(), &args.flags.pairs())
}

fn synth(args: &SynthArgs) -> CliResult<()> {
    let cfg = resolve(args.config.as_deref(), &args.pairs())?;
    if args.per_class == 0 {
        return Err(CliError::usage("--per-class must be at least 1"));
    }
    let samples = synthdata::gen_dataset(args.per_class, cfg.data_seed, &cfg.synth)?;
    dataset::write_dir(&args.out, &samples)?;
    eprintln!("wrote {} images to {}", samples.len(), args.out.display());
    Ok(())
}

/// Train split when `train` is set, else the test split; an image
/// directory replaces both.
fn load_data(cfg: &RunConfig, train: bool) -> CliResult<Vec<SynthSample>> {
    if let Some(dir) = &cfg.data_dir {
        return dataset::load_dir(dir);
    }
    let (tr, te) = synthdata::gen_split(cfg.train_per_class, cfg.test_per_class, cfg.data_seed, &cfg.synth)?;
    Ok(if train { tr } else { te })
}

fn train(args: &RunArgs) -> CliResult<()> {
    let cfg = resolve_run(args)?;
    let data = load_data(&cfg, true)?;
    error::create_dir(&cfg.out_dir)?;
    let log_path = cfg.out_dir.join("metrics.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(error::io_at(&log_path))?);
    let start = Instant::now();
    let mut write_err = None;
    let (params, _) = training::train(&data, &cfg.model, &cfg.train, |entry| {
        if write_err.is_none() {
            write_err = metrics::write_epoch(&mut log, entry).err();
        }
        eprintln!(
            "epoch {:>3}  lambda {:.2}  lr {:.4}  loss {:.4}  acc {:.3}  [{:.0}s]",
            entry.epoch,
            entry.lambda,
            entry.lr,
            entry.loss,
            entry.acc,
            start.elapsed().as_secs_f64()
        );
    })?;
    if let Some(e) = write_err {
        return Err(CliError::io(&log_path, e));
    }
    log.flush().map_err(error::io_at(&log_path))?;
    let ckpt = cfg.checkpoint_path();
    checkpoint::save(&ckpt, &params)?;
    let config_path = cfg.out_dir.join("config.txt");
    let pinned = RunConfig {
        checkpoint: Some(ckpt.clone()),
        ..cfg.clone()
    };
    error::write(&config_path, pinned.to_text().as_bytes())?;
    eprintln!("wrote {}, {} and {}", ckpt.display(), log_path.display(), config_path.display());
    Ok(())
}

fn eval(args: &EvalArgs) -> CliResult<()> {
    let cfg = resolve_run(&args.run)?;
    let params = checkpoint::load(&cfg.checkpoint_path(), &cfg.model)?;
    let data = load_data(&cfg, false)?;
    let mut boxes = String::from("# pixel boxes per sample: row0 col0 row1 col1 score\n");
    let mut index = 0;
    let report = training::evaluate_with(&data, &cfg.model, |s| {
        let out = model::forward(&s.image, &params, &cfg.model)?;
        let pred = model::predict_from_logits(&out.logits_fusion).class;
        writeln!(boxes, "# sample {index} seed {} label {} predicted {pred}", s.seed, s.label).unwrap();
        for (p, b) in out.pixel_boxes.iter().zip(&out.boxes) {
            writeln!(boxes, "{} {} {} {} {}", p.row0, p.col0, p.row1, p.col1, b.score).unwrap();
        }
        index += 1;
        Ok(out)
    })?;
    if let Some(path) = &args.boxes {
        error::write(path, boxes.as_bytes())?;
    }
    println!("{}", metrics::eval_json(&report, data.len()));
    Ok(())
}

/// Bilinear upsample of one `(1, 1, h, w)` plane to the image size.
fn heatmap_at(plane: Tensor4, h: usize, w: usize) -> CliResult<Vec<u8>> {
    let up = resize_bilinear(&plane, h, w)?;
    Ok(pnm::heatmap(up.data()))
}

fn channel(x: &Tensor4, c: usize) -> Tensor4 {
    Tensor4::new([1, 1, x.h(), x.w()], x.plane(0, c).to_vec()).expect("plane length")
}

/// First index of the extreme value under `better`.
fn arg_extreme(v: &[f64], better: impl Fn(f64, f64) -> bool) -> usize {
    (1..v.len()).fold(0, |best, i| if better(v[i], v[best]) { i } else { best })
}

fn visualize(args: &VisualizeArgs) -> CliResult<()> {
    let cfg = resolve_run(&args.run)?;
    let params = checkpoint::load(&cfg.checkpoint_path(), &cfg.model)?;
    let image = match (&args.image, args.sample_seed) {
        (Some(path), _) => pnm::read_ppm(path)?,
        (None, Some(seed)) => synthdata::gen_sample(seed, args.sample_class, &cfg.synth)?.image,
        (None, None) => return Err(CliError::usage("visualize needs --image or --sample-seed")),
    };
    let out_dir = &cfg.out_dir;
    error::create_dir(out_dir)?;
    let out = model::forward(&image, &params, &cfg.model)?;
    let (h, w) = (image.h(), image.w());
    let att = &out.attention;
    pnm::write_pgm(&out_dir.join("semantic.pgm"), w, h, &heatmap_at(att.semantic_map.clone(), h, w)?)?;
    pnm::write_pgm(&out_dir.join("attention.pgm"), w, h, &heatmap_at(att.attention_map.clone(), h, w)?)?;

    let gates = att.gate_vector(0);
    let low = arg_extreme(gates, |a, b| a < b);
    let high = arg_extreme(gates, |a, b| a > b);
    let mut text = format!("# lowest {low}\n# highest {high}\n# channel gate\n");
    for (k, g) in gates.iter().enumerate() {
        writeln!(text, "{k} {g}").unwrap();
    }
    error::write(&out_dir.join("gates.txt"), text.as_bytes())?;
    pnm::write_pgm(&out_dir.join("channel_low.pgm"), w, h, &heatmap_at(channel(&out.features, low), h, w)?)?;
    pnm::write_pgm(&out_dir.join("channel_high.pgm"), w, h, &heatmap_at(channel(&out.features, high), h, w)?)?;
    if args.image.is_none() {
        pnm::write_ppm(&out_dir.join("input.ppm"), &image)?;
    }

    let pred = model::predict_from_logits(&out.logits_fusion);
    let boxes: Vec<_> = out
        .pixel_boxes
        .iter()
        .zip(&out.boxes)
        .map(|(p, b)| json!([p.row0, p.col0, p.row1, p.col1, b.score]))
        .collect();
    let summary = json!({
        "class": pred.class,
        "probabilities": pred.probabilities,
        "lowest_gate_channel": low,
        "highest_gate_channel": high,
        "boxes": boxes,
    });
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(())
}

fn grad_check(args: &GradcheckArgs) -> CliResult<()> {
    let results = gradcheck::run_suite(args.op.as_deref(), args.analytic_scale)?;
    if results.is_empty() {
        return Err(CliError::usage(format!(
            "no gradient check matches `{}`; known checks: {}",
            args.op.as_deref().unwrap_or(""),
            gradcheck::check_names().join(", ")
        )));
    }
    let mut failed = Vec::new();
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<24} {:>10.3e}  < {:.0e}  {status}", r.name, r.max_relative_error, r.tolerance);
        if !r.passed() {
            failed.push(r.name.as_str());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(format!("gradient check failed: {}", failed.join(", "))))
    }
}
