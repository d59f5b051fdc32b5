use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use placement::evalsuite::ScaleError;
use placement::heatmap::Heatmap3D;
use placement::image::{write_pgm, RgbImage};
use placement::model::PlacementModel;
use placement::predict::{composite_preview, predict_pair};
use placement::synthworld::{generate_dataset, read_dataset, write_dataset};
use placement::trainer::{evaluate_model, load_model, Checkpoint, Trainer};
use placement::geometry::{ImageDims, ScaleGrid};
use serde_json::json;

use crate::config::RunConfig;
use crate::{Attend, Cli, Command, Eval, GenData, Pair, Predict, Render, Slice, Train, UsageError};

pub fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let out = Output { json: cli.json };
    match cli.command {
        Command::GenData(a) => gen_data(&cfg, a, out),
        Command::Train(a) => train(cfg, a, out),
        Command::Eval(a) => eval(&cfg, a, out),
        Command::Predict(a) => predict(&cfg, a, out),
        Command::Slice(a) => slice(&cfg, a, out),
        Command::Render(a) => render(&cfg, a, out),
        Command::Attend(a) => attend(a, out),
    }
}

#[derive(Clone, Copy)]
struct Output {
    json: bool,
}

impl Output {
    fn emit(&self, value: serde_json::Value, text: impl FnOnce() -> String) {
        if self.json {
            println!("{value}");
        } else {
            println!("{}", text());
        }
    }
}

fn require(path: Option<PathBuf>, flag: &str, key: &str) -> Result<PathBuf> {
    path.ok_or_else(|| UsageError(format!("missing {flag} (or `{key}` in the config)")).into())
}

fn gen_data(cfg: &RunConfig, a: GenData, out: Output) -> Result<()> {
    let dir = require(a.out.or(cfg.dataset.clone()), "--out", "dataset")?;
    let size = a.size.unwrap_or(cfg.model.input_size);
    let dims = ImageDims::square(size)?;
    let scenes = generate_dataset(a.seed, a.n, &cfg.oracle, dims, &cfg.grid)?;
    write_dataset(&dir, &scenes)?;
    out.emit(json!({ "dir": dir, "count": scenes.len(), "size": size }), || {
        format!("wrote {} scenes to {}", scenes.len(), dir.display())
    });
    Ok(())
}

fn train(mut cfg: RunConfig, a: Train, out: Output) -> Result<()> {
    let data = require(a.data.or(cfg.dataset.clone()), "--data", "dataset")?;
    let ck_dir = require(a.checkpoint.or(cfg.checkpoint.clone()), "--checkpoint", "checkpoint")?;
    if let Some(v) = a.steps {
        cfg.train.total_steps = v;
    }
    if let Some(v) = a.lr {
        cfg.train.base_lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.variant {
        cfg.model.variant = v;
    }
    if let Some(v) = a.loss {
        cfg.train.loss.kind = v;
    }
    let scenes = read_dataset(&data)?;
    let eval = a.eval_data.or(cfg.eval_dataset.clone()).map(|p| read_dataset(&p)).transpose()?;
    let mut trainer = if a.resume {
        Trainer::from_checkpoint(Checkpoint::load(&ck_dir, None)?)?
    } else {
        Trainer::new(cfg.model.clone(), cfg.train.clone())?
    };
    let total = trainer.cfg.total_steps;
    trainer.run(&scenes, total, eval.as_deref(), &mut |p| {
        // progress records are always JSON lines
        println!("{}", serde_json::to_string(p).expect("progress serializes"));
    })?;
    trainer.checkpoint().save(&ck_dir)?;
    out.emit(json!({ "checkpoint": ck_dir, "step": trainer.step }), || {
        format!("saved step {} to {}", trainer.step, ck_dir.display())
    });
    Ok(())
}

fn eval(cfg: &RunConfig, a: Eval, out: Output) -> Result<()> {
    let data = require(a.data.or(cfg.eval_dataset.clone()), "--data", "eval_dataset")?;
    let model = load_model(&a.checkpoint)?;
    let scenes = read_dataset(&data)?;
    let kind = if a.squared { ScaleError::Squared } else { ScaleError::Absolute };
    let report = evaluate_model(&model, &scenes, kind)?;
    out.emit(serde_json::to_value(&report)?, || report.render_table(&data.display().to_string()));
    Ok(())
}

fn load_ppm(p: &Path) -> Result<RgbImage> {
    RgbImage::load_ppm(p).with_context(|| format!("reading {}", p.display()))
}

fn load_pair(p: &Pair) -> Result<(PlacementModel<f32>, RgbImage, RgbImage)> {
    Ok((load_model(&p.checkpoint)?, load_ppm(&p.bg)?, load_ppm(&p.obj)?))
}

fn grid_for(cfg: &RunConfig, model: &PlacementModel<f32>) -> Result<ScaleGrid> {
    if cfg.grid.len() != model.config().c {
        return Err(UsageError(format!(
            "scale grid has {} values but the model emits {} channels",
            cfg.grid.len(),
            model.config().c
        ))
        .into());
    }
    Ok(cfg.grid.clone())
}

fn predict(cfg: &RunConfig, a: Predict, out: Output) -> Result<()> {
    let (model, bg, obj) = load_pair(&a.pair)?;
    let grid = grid_for(cfg, &model)?;
    let p = predict_pair(&model, &bg, &obj, &grid, a.k)?;
    let mut files = Vec::new();
    if let Some(dir) = a.out.clone().or(cfg.output_dir.clone()) {
        std::fs::create_dir_all(&dir)?;
        let hm = dir.join("heatmap.toph");
        p.heatmap.save(&hm)?;
        files.push(hm);
        for (i, (b, _)) in p.boxes.iter().enumerate() {
            if let Ok(img) = composite_preview(&bg, &obj, b) {
                let f = dir.join(format!("preview_{i}.ppm"));
                img.save_ppm(&f)?;
                files.push(f);
            }
        }
    }
    let boxes: Vec<_> = p.boxes.iter().map(|(b, s)| json!({ "box": b, "score": s })).collect();
    out.emit(json!({ "boxes": boxes, "forwards": p.forwards, "files": files }), || {
        let mut s = String::new();
        for (i, (b, sc)) in p.boxes.iter().enumerate() {
            s.push_str(&format!(
                "{}: left {:.1} top {:.1} width {:.1} height {:.1} (score {sc:.3})\n",
                i + 1,
                b.left,
                b.top,
                b.width,
                b.height
            ));
        }
        for f in &files {
            s.push_str(&format!("wrote {}\n", f.display()));
        }
        s.trim_end().to_string()
    });
    Ok(())
}

fn slice(cfg: &RunConfig, a: Slice, out: Output) -> Result<()> {
    let h = match (&a.heatmap, &a.checkpoint) {
        (Some(path), _) => Heatmap3D::load(path, cfg.grid.clone())?,
        (None, Some(ck)) => {
            let model = load_model(ck)?;
            let grid = grid_for(cfg, &model)?;
            // clap guarantees both images alongside a checkpoint
            let bg = load_ppm(a.bg.as_deref().expect("bg"))?;
            let obj = load_ppm(a.obj.as_deref().expect("obj"))?;
            let n = model.config().input_size;
            let bg = if bg.width() == n && bg.height() == n { bg } else { bg.resize(n, n) };
            model.heatmap(&bg, &obj, &grid)?
        }
        (None, None) => unreachable!("clap requires a heatmap source"),
    };
    if let Some((x, y)) = a.fix_location {
        let (scores, z) = h.slice_fixed_location(x, y)?;
        let scale = h.grid().value(z);
        out.emit(json!({ "x": x, "y": y, "scores": scores, "best_z": z, "best_scale": scale }), || {
            format!("best scale at ({x}, {y}): channel {z} (s = {scale:.3})")
        });
    } else if let Some(z) = a.fix_scale {
        let m = h.slice_fixed_scale(z)?;
        let (x, y) = m.argmax();
        if let Some(p) = &a.out {
            write_pgm(p, m.width, m.height, &m.data)?;
        }
        out.emit(json!({ "z": z, "best_x": x, "best_y": y, "file": a.out }), || {
            format!("best location at channel {z}: ({x}, {y})")
        });
    }
    Ok(())
}

fn render(cfg: &RunConfig, a: Render, out: Output) -> Result<()> {
    let h = Heatmap3D::load(&a.heatmap, cfg.grid.clone())?;
    let files = h.render_channels(&a.out, &a.stem)?;
    out.emit(json!({ "files": files }), || format!("wrote {} graymaps to {}", files.len(), a.out.display()));
    Ok(())
}

fn attend(a: Attend, out: Output) -> Result<()> {
    let (model, bg, obj) = load_pair(&a.pair)?;
    let n = model.config().input_size;
    let bg = if bg.width() == n && bg.height() == n { bg } else { bg.resize(n, n) };
    let m = model.attention_map(&bg, &obj, a.layer, a.head)?;
    if let Some(p) = &a.out {
        let mx = m.data.iter().cloned().fold(0.0, f64::max);
        let scaled: Vec<f64> = m.data.iter().map(|v| if mx > 0.0 { v / mx } else { 0.0 }).collect();
        write_pgm(p, m.width, m.height, &scaled)?;
    }
    let (x, y) = m.argmax();
    out.emit(json!({ "layer": a.layer, "head": a.head, "side": m.width, "weights": m.data, "argmax": [x, y] }), || {
        format!("layer {} head {}: strongest cell ({x}, {y}) of {}x{}", a.layer, a.head, m.width, m.height)
    });
    Ok(())
}
