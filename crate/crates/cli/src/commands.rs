use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use intrinsic_core::dataset::{frame_stem, load_judged_images, load_sintel, write_judged_images, write_sintel, JudgedImage, Scene, SceneFrame};
use intrinsic_core::imageio::{load_occlusion, read_flo, read_image, write_png, ColorSpace, Image};
use intrinsic_core::judgements::JudgementSet;
use intrinsic_core::losses::gradient_suite;
use intrinsic_core::metrics::{dssim, dssim_unhalved, lmse, mse, render_heatmap, summarize, tcm_map, whdr, write_report, MetricRow, LMSE_STRIDE, LMSE_WINDOW};
use intrinsic_core::net::{read_checkpoint, write_checkpoint, write_feature_csv, TwoStreamModel};
use intrinsic_core::refine::{refine_frame_with, refine_sequence, LleParams, RefinedTriplet};
use intrinsic_core::synth::{dense_set, sintel_sequence, sparse_set, video_sequence};
use intrinsic_core::train::{Dataset, Mode, TrainConfig, Trainer};

use crate::{CliError, DecomposeArgs, EvalArgs, FeatureArgs, GradcheckArgs, Metric, RefineArgs, SynthArgs, SynthKind, TcmArgs, TrainArgs, WhdrArgs};

type Result<T> = std::result::Result<T, CliError>;

fn data_err(msg: impl Into<String>) -> CliError {
    CliError::Data(intrinsic_core::Error::Contract(msg.into()))
}

fn need_dir(p: &Path, what: &str) -> Result<()> {
    if !p.is_dir() {
        return Err(CliError::Usage(format!("{what} {} is not a directory", p.display())));
    }
    Ok(())
}

fn need_file(p: &Path, what: &str) -> Result<()> {
    if !p.is_file() {
        return Err(CliError::Usage(format!("{what} {} does not exist", p.display())));
    }
    Ok(())
}

fn files_with_ext(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().and_then(|e| e.to_str()) == Some(ext))
        .collect();
    out.sort();
    Ok(out)
}

/// PNGs below `dir`, as paths relative to it.
fn pngs_recursive(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![PathBuf::new()];
    while let Some(rel) = stack.pop() {
        for e in std::fs::read_dir(dir.join(&rel))? {
            let e = e?;
            let child = rel.join(e.file_name());
            if e.path().is_dir() {
                stack.push(child);
            } else if child.extension().and_then(|x| x.to_str()) == Some("png") {
                out.push(child);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Replicates the right and bottom edges up to the next multiple of `div`.
fn pad_to_multiple(img: &Image, div: usize) -> Image {
    let w = img.width.div_ceil(div) * div;
    let h = img.height.div_ceil(div) * div;
    let mut out = Image::filled(w, h, img.channels, 0.0, img.space);
    for y in 0..h {
        for x in 0..w {
            for c in 0..img.channels {
                out.set(x, y, c, img.get(x.min(img.width - 1), y.min(img.height - 1), c));
            }
        }
    }
    out
}

fn gray_plane(img: &Image) -> Result<Image> {
    Ok(Image::from_plane(img.width, img.height, img.gray(), ColorSpace::Srgb)?)
}

fn write_refined(out: &Path, scene: &Scene, refined: &[RefinedTriplet]) -> Result<()> {
    let frames = scene
        .frames
        .iter()
        .zip(refined)
        .map(|(f, r)| SceneFrame { image: r.image.clone(), albedo: r.albedo.clone(), shading: r.shading.clone(), ..f.clone() })
        .collect();
    write_sintel(out, &[Scene { name: scene.name.clone(), frames }])?;
    let (mask_dir, stats_dir) = (out.join("mask").join(&scene.name), out.join("stats").join(&scene.name));
    std::fs::create_dir_all(&mask_dir)?;
    std::fs::create_dir_all(&stats_dir)?;
    for (f, r) in scene.frames.iter().zip(refined) {
        let (w, h) = (r.image.width, r.image.height);
        let mask = Image::new(w, h, 1, r.mask.iter().map(|&m| f64::from(u8::from(m))).collect(), ColorSpace::Srgb)?;
        write_png(&mask, &mask_dir.join(format!("{}.png", f.stem)), 8)?;
        r.write_sidecar(&stats_dir.join(format!("{}.json", f.stem)))?;
    }
    Ok(())
}

pub fn refine(a: RefineArgs) -> Result<()> {
    need_dir(&a.input, "input")?;
    if a.k == 0 || !(a.reg > 0.0) {
        return Err(CliError::Usage("--k must be positive and --reg must be > 0".into()));
    }
    let params = LleParams { k: a.k, reg: a.reg, refinements: a.refinements };
    let scenes = load_sintel(&a.input)?;
    for scene in &scenes {
        let refined = if a.temporal {
            refine_sequence(&scene.sequence(), &params)?
        } else {
            scene
                .sequence()
                .par_iter()
                .map(|f| refine_frame_with(&f.triplet, &params))
                .collect::<intrinsic_core::Result<Vec<_>>>()?
        };
        write_refined(&a.output, scene, &refined)?;
        let n = refined.len() as f64;
        let input: f64 = refined.iter().map(|r| r.stats.input_mse).sum::<f64>() / n;
        let output: f64 = refined.iter().map(|r| r.stats.resynthesis_mse).sum::<f64>() / n;
        println!("{}: {} frames, mean input MSE {input:.6}, resynthesis MSE {output:.6}", scene.name, refined.len());
    }
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    need_file(&a.config, "config")?;
    need_dir(&a.dataset, "dataset")?;
    if let Some(p) = &a.init {
        need_file(p, "initial checkpoint")?;
    }
    let mut cfg = TrainConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let data = match cfg.mode {
        Mode::Sparse => Dataset::from_judged(&load_judged_images(&a.dataset)?),
        mode => Dataset::from_scenes(mode, &load_sintel(&a.dataset)?)?,
    };
    let mut trainer = match &a.init {
        Some(p) => Trainer::with_model(cfg.clone(), read_checkpoint(p)?)?,
        None => Trainer::new(cfg.clone())?,
    };
    std::fs::create_dir_all(&a.out)?;
    cfg.save(&a.out.join("config.json"))?;
    let log = a.out.join("train_log.csv");
    let stats = trainer.fit(&data, Some(&log))?;
    for s in &stats {
        println!("epoch {:>4}  loss {:.6}  skipped batches {}", s.epoch, s.total, s.skipped_batches);
    }
    write_checkpoint(&trainer.model, &a.out.join("model.ckpt"))?;
    println!("wrote {} and {}", a.out.join("model.ckpt").display(), log.display());
    Ok(())
}

fn decompose_one(model: &TwoStreamModel, img: &Image) -> Result<(Image, Image)> {
    let padded = pad_to_multiple(&img.to_rgb(), model.config.divisor());
    let (alb, sh) = model.decompose_image(&padded)?;
    Ok((alb.crop(0, 0, img.width, img.height)?, gray_plane(&sh.crop(0, 0, img.width, img.height)?)?))
}

pub fn decompose(a: DecomposeArgs) -> Result<()> {
    need_file(&a.checkpoint, "checkpoint")?;
    let inputs = if a.input.is_dir() {
        files_with_ext(&a.input, "png")?
    } else {
        need_file(&a.input, "input")?;
        vec![a.input.clone()]
    };
    let model = read_checkpoint(&a.checkpoint)?;
    std::fs::create_dir_all(&a.output)?;
    inputs.par_iter().try_for_each(|p| -> Result<()> {
        let (alb, sh) = decompose_one(&model, &read_image(p)?)?;
        let s = stem(p);
        write_png(&alb, &a.output.join(format!("{s}_albedo.png")), 16)?;
        write_png(&sh, &a.output.join(format!("{s}_shading.png")), 16)?;
        Ok(())
    })?;
    println!("decomposed {} image(s) into {}", inputs.len(), a.output.display());
    Ok(())
}

/// Brings a pair to a common channel count by replicating single-channel layers.
fn align(p: Image, g: Image) -> (Image, Image) {
    if p.channels == g.channels {
        (p, g)
    } else {
        (p.to_rgb(), g.to_rgb())
    }
}

fn metric_value(m: Metric, p: &Image, g: &Image) -> intrinsic_core::Result<f64> {
    match m {
        Metric::Mse => Ok(mse(&p.data, &g.data, true)?.value),
        Metric::MsePlain => Ok(mse(&p.data, &g.data, false)?.value),
        Metric::Lmse => lmse(p, g, LMSE_WINDOW, LMSE_STRIDE),
        Metric::Dssim => dssim(p, g),
        Metric::DssimUnhalved => dssim_unhalved(p, g),
    }
}

fn metric_name(m: Metric) -> &'static str {
    match m {
        Metric::Mse => "mse",
        Metric::MsePlain => "mse-plain",
        Metric::Lmse => "lmse",
        Metric::Dssim => "dssim",
        Metric::DssimUnhalved => "dssim-unhalved",
    }
}

pub fn eval(a: EvalArgs) -> Result<()> {
    for (root, what) in [(&a.pred, "pred"), (&a.gt, "gt")] {
        need_dir(&root.join("albedo"), &format!("{what} albedo"))?;
        need_dir(&root.join("shading"), &format!("{what} shading"))?;
    }
    if a.metrics.is_empty() {
        return Err(CliError::Usage("--metrics is empty".into()));
    }
    let names = pngs_recursive(&a.gt.join("albedo"))?;
    if names.is_empty() {
        return Err(data_err(format!("no ground-truth PNGs under {}", a.gt.join("albedo").display())));
    }
    let per_image: Vec<Vec<MetricRow>> = names
        .par_iter()
        .map(|rel| -> Result<Vec<MetricRow>> {
            let load = |root: &Path, layer: &str| read_image(&root.join(layer).join(rel));
            let (pa, ga) = align(load(&a.pred, "albedo")?, load(&a.gt, "albedo")?);
            let (ps, gs) = align(load(&a.pred, "shading")?, load(&a.gt, "shading")?);
            let id = rel.to_string_lossy().into_owned();
            a.metrics
                .iter()
                .map(|&m| Ok(MetricRow::new(id.clone(), metric_name(m), metric_value(m, &pa, &ga)?, metric_value(m, &ps, &gs)?)))
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut rows: Vec<MetricRow> = per_image.into_iter().flatten().collect();
    let means = summarize(&rows);
    for m in &means {
        println!("{:<15} albedo {:.6}  shading {:.6}  average {:.6}", m.metric, m.albedo, m.shading, m.average);
    }
    rows.extend(means);
    write_report(&rows, &a.out)?;
    Ok(())
}

#[derive(Serialize)]
struct WhdrRow {
    image: String,
    whdr: f64,
}

pub fn eval_whdr(a: WhdrArgs) -> Result<()> {
    need_dir(&a.albedo, "albedo")?;
    need_dir(&a.judgements, "judgements")?;
    if !(a.delta >= 0.0) {
        return Err(CliError::Usage("--delta must be nonnegative".into()));
    }
    let mut rows = Vec::new();
    for p in files_with_ext(&a.albedo, "png")? {
        let id = stem(&p);
        let id = id.strip_suffix("_albedo").unwrap_or(&id).to_string();
        let json = a.judgements.join(format!("{id}.json"));
        if !json.is_file() {
            continue;
        }
        let set = JudgementSet::load(&json)?;
        rows.push(WhdrRow { whdr: whdr(&read_image(&p)?, &set, a.delta)?, image: id });
    }
    if rows.is_empty() {
        return Err(data_err("no albedo image has a matching judgement file"));
    }
    let mean = rows.iter().map(|r| r.whdr).sum::<f64>() / rows.len() as f64;
    println!("WHDR over {} image(s): {:.4}", rows.len(), mean);
    if let Some(out) = &a.out {
        let mut w = csv::Writer::from_path(out)?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.serialize(WhdrRow { image: "mean".into(), whdr: mean })?;
        w.flush()?;
    }
    Ok(())
}

#[derive(Serialize)]
struct TcmRow {
    frame: String,
    tcm: f64,
}

pub fn tcm(a: TcmArgs) -> Result<()> {
    need_dir(&a.pred, "pred")?;
    need_dir(&a.video, "video")?;
    need_dir(&a.flow, "flow")?;
    if let Some(d) = &a.occlusions {
        need_dir(d, "occlusions")?;
    }
    let outs = files_with_ext(&a.pred, "png")?;
    let ins = files_with_ext(&a.video, "png")?;
    let flows = files_with_ext(&a.flow, "flo")?;
    let occ = match &a.occlusions {
        Some(d) => Some(files_with_ext(d, "png")?),
        None => None,
    };
    if outs.len() != ins.len() || outs.len() < 2 {
        return Err(data_err(format!("need matching sequences of at least 2 frames, got {} outputs and {} inputs", outs.len(), ins.len())));
    }
    if flows.len() + 1 < outs.len() || occ.as_ref().is_some_and(|o| o.len() + 1 < outs.len()) {
        return Err(data_err(format!("{} frames need {} flow (and occlusion) files", outs.len(), outs.len() - 1)));
    }
    if let Some(d) = &a.maps {
        std::fs::create_dir_all(d)?;
    }
    let rows: Vec<TcmRow> = (1..outs.len())
        .into_par_iter()
        .map(|t| -> Result<TcmRow> {
            let flow = read_flo(&flows[t - 1])?;
            let mask = occ.as_ref().map(|o| load_occlusion(&o[t - 1], Some(&flow))).transpose()?;
            let (o_t, o_p) = (read_image(&outs[t])?, read_image(&outs[t - 1])?);
            let (v_t, v_p) = (read_image(&ins[t])?, read_image(&ins[t - 1])?);
            let value = intrinsic_core::metrics::tcm(&o_t, &o_p, &v_t, &v_p, &flow, mask.as_deref())?;
            if let Some(d) = &a.maps {
                let map = tcm_map(&o_t, &o_p, &v_t, &v_p, &flow, mask.as_deref())?;
                write_png(&render_heatmap(&map, o_t.width, o_t.height), &d.join(format!("{}.png", stem(&outs[t]))), 8)?;
            }
            Ok(TcmRow { frame: stem(&outs[t]), tcm: value })
        })
        .collect::<Result<_>>()?;
    let mean = rows.iter().map(|r| r.tcm).sum::<f64>() / rows.len() as f64;
    println!("TCM over {} frame pair(s): {:.4}", rows.len(), mean);
    let mut w = csv::Writer::from_path(&a.out)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.serialize(TcmRow { frame: "mean".into(), tcm: mean })?;
    w.flush()?;
    Ok(())
}

pub fn synth(a: SynthArgs) -> Result<()> {
    if a.count == 0 || a.width == 0 || a.height == 0 || (a.frames < 2 && matches!(a.kind, SynthKind::Video | SynthKind::Sintel)) {
        return Err(CliError::Usage("--count, --width and --height must be positive; sequences need --frames >= 2".into()));
    }
    match a.kind {
        SynthKind::Dense => {
            let frames = dense_set(a.seed, a.count, a.width, a.height)
                .into_iter()
                .enumerate()
                .map(|(t, s)| SceneFrame { stem: frame_stem(t), image: s.image, albedo: s.albedo, shading: s.shading, flow: None, occlusion: None })
                .collect();
            write_sintel(&a.out, &[Scene { name: "dense".into(), frames }])?;
        }
        SynthKind::Video => {
            let scenes: Vec<Scene> = (0..a.count)
                .map(|k| Scene::from_video(&format!("video_{k:03}"), &video_sequence(a.seed + k as u64, a.frames, a.width, a.height)))
                .collect();
            write_sintel(&a.out, &scenes)?;
        }
        SynthKind::Sintel => {
            let scenes: Vec<Scene> = (0..a.count)
                .map(|k| Scene::from_sequence(&format!("scene_{k:03}"), &sintel_sequence(a.seed + k as u64, a.frames, a.width, a.height)))
                .collect();
            write_sintel(&a.out, &scenes)?;
        }
        SynthKind::Sparse => {
            let items: Vec<JudgedImage> = sparse_set(a.seed, a.count, a.width, a.height, a.pairs, intrinsic_core::metrics::WHDR_DELTA)
                .into_iter()
                .enumerate()
                .map(|(k, (s, judgements))| JudgedImage { id: format!("img_{k:04}"), image: s.image, judgements })
                .collect();
            write_judged_images(&a.out, &items)?;
        }
    }
    println!("wrote synthetic data to {}", a.out.display());
    Ok(())
}

pub fn dump_features(a: FeatureArgs) -> Result<()> {
    need_file(&a.checkpoint, "checkpoint")?;
    need_file(&a.image, "image")?;
    let model = read_checkpoint(&a.checkpoint)?;
    let img = pad_to_multiple(&read_image(&a.image)?.to_rgb(), model.config.divisor());
    write_feature_csv(&model, &img, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let entries = gradient_suite(a.seed)?;
    let mut failed = 0;
    for e in &entries {
        let verdict = if e.passes() { "ok" } else { "FAIL" };
        failed += usize::from(!e.passes());
        println!("{:<34} max rel error {:.3e}  {verdict}", e.name, e.max_rel_error);
    }
    if failed > 0 {
        return Err(data_err(format!("{failed} of {} gradient checks failed", entries.len())));
    }
    println!("all {} gradient checks passed", entries.len());
    Ok(())
}
