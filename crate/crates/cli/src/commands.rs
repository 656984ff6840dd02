//! One function per subcommand. Each reads and writes only run-directory artifacts.

use std::collections::HashMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use twophase::dataset::{generate_dataset, load_dataset, save_dataset, Dataset, Sample};
use twophase::eval::{predict_point, PointPrediction};
use twophase::fusion::{extract_cues, weighted_map_voting};
use twophase::io::{read_json, write_atomic, write_json, GrayImage};
use twophase::ops::bilinear_resize;
use twophase::tensor::{read_tns, tns_bytes};
use twophase::training::{phase_seed, train_phase, write_loss_csv, FrozenPhases, MaskProvider};
use twophase::{FcnConfig, FcnModel, HeatMapSet, SuppressionMask, Tensor};

use crate::config::RunConfig;
use crate::layout::{phase_source, RunLayout};
use crate::{metrics, CliError, CliResult};

pub struct Ctx {
    pub config: RunConfig,
    pub layout: RunLayout,
}

impl Ctx {
    pub fn new(config: RunConfig) -> Self {
        let layout = RunLayout::new(&config.out);
        Ctx { config, layout }
    }

    pub fn write_config(&self) -> CliResult<()> {
        write_json(&self.layout.config(), &self.config.echo())?;
        Ok(())
    }

    pub fn load_split(&self, split: &str) -> CliResult<Dataset> {
        check_split(split)?;
        let data = load_dataset(&self.layout.data(split))?;
        if data.spec.class_count != self.config.data.class_count {
            return Err(CliError::validation(format!(
                "{} has {} classes, the config says {}",
                self.layout.data(split).display(),
                data.spec.class_count,
                self.config.data.class_count
            )));
        }
        Ok(data)
    }

    pub fn load_model(&self, phase: usize) -> CliResult<FcnModel> {
        let model = FcnModel::load(&self.layout.model(phase))?;
        if model.config.class_count != self.config.data.class_count {
            return Err(CliError::validation(format!(
                "{} predicts {} classes, the config says {}",
                self.layout.model(phase).display(),
                model.config.class_count,
                self.config.data.class_count
            )));
        }
        Ok(model)
    }

    fn check_phase(&self, phase: usize) -> CliResult<()> {
        if phase == 0 || phase > self.config.plan.phase_count {
            return Err(CliError::validation(format!(
                "phase {phase} is outside 1..={}",
                self.config.plan.phase_count
            )));
        }
        Ok(())
    }
}

pub fn check_split(split: &str) -> CliResult<()> {
    match split {
        "train" | "eval" => Ok(()),
        other => Err(CliError::usage(format!("unknown split `{other}`, expected train or eval"))),
    }
}

pub fn gen_data(ctx: &Ctx) -> CliResult<()> {
    ctx.write_config()?;
    let mut train = generate_dataset(&ctx.config.data)?;
    let eval = train.split_off(ctx.config.train_samples());
    save_dataset(&train, &ctx.layout.data("train"))?;
    save_dataset(&eval, &ctx.layout.data("eval"))?;
    log::info!(
        "generated {} train / {} eval images, checksum {:016x}",
        train.samples.len(),
        eval.samples.len(),
        train.checksum() ^ eval.checksum()
    );
    Ok(())
}

/// Masks computed once and looked up by sample id.
struct Precomputed(HashMap<usize, SuppressionMask>);

impl MaskProvider for Precomputed {
    fn mask(&self, sample: &Sample) -> twophase::Result<SuppressionMask> {
        Ok(self.0[&sample.id].clone())
    }
}

pub fn train(ctx: &Ctx, phase: usize) -> CliResult<()> {
    ctx.check_phase(phase)?;
    let plan = ctx.config.phase_plan();
    let data = ctx.load_split("train")?;
    let frozen = (1..phase).map(|j| ctx.load_model(j)).collect::<CliResult<Vec<_>>>()?;
    let init = match frozen.last() {
        Some(prev) if plan.warm_start => prev.clone(),
        _ => FcnModel::init(&FcnConfig {
            rng_seed: phase_seed(ctx.config.network.rng_seed, phase),
            ..ctx.config.fcn()
        })?,
    };
    let provider = if phase > 1 {
        let stages = FrozenPhases {
            stages: frozen.into_iter().zip(plan.thresholds.iter().copied()).collect(),
        };
        let masks = data
            .samples
            .par_iter()
            .map(|s| stages.mask(s))
            .collect::<twophase::Result<Vec<_>>>()?;
        save_masks(ctx, phase, &data.samples, &masks)?;
        Some(Precomputed(data.samples.iter().map(|s| s.id).zip(masks).collect()))
    } else {
        None
    };
    let start = Instant::now();
    let every = plan.train[phase - 1].checkpoint_every;
    let mut save_checkpoint = |iter: usize, model: &FcnModel| -> twophase::Result<()> {
        let path = ctx.layout.root.join("models").join(format!("phase{phase}_iter{iter}.fcn"));
        model.save(&path)
    };
    let (model, history) = train_phase(
        &init,
        &data.samples,
        &plan.train[phase - 1],
        provider.as_ref().map(|p| p as &dyn MaskProvider),
        if every > 0 { Some(&mut save_checkpoint) } else { None },
    )?;
    model.save(&ctx.layout.model(phase))?;
    write_loss_csv(&ctx.layout.loss_log(phase), &history)?;
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        log::info!(
            "phase {phase}: loss {:.4} -> {:.4} over {} iterations ({:.1}s)",
            first.loss,
            last.loss,
            history.len(),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

fn save_masks(ctx: &Ctx, phase: usize, samples: &[Sample], masks: &[SuppressionMask]) -> CliResult<()> {
    let grids: Vec<&Tensor> = masks.iter().map(|m| &m.grid).collect();
    write_atomic(&ctx.layout.masks(phase), &tns_bytes(&Tensor::stack(&grids)?))?;
    for (s, m) in samples.iter().zip(masks).take(ctx.config.eval.render_count) {
        GrayImage::from_binary(&m.grid)?.save(&ctx.layout.mask_render(phase, s.id))?;
    }
    let fractions: Vec<f64> = masks.iter().map(SuppressionMask::suppressed_fraction).collect();
    let mean = fractions.iter().sum::<f64>() / fractions.len().max(1) as f64;
    log::info!("phase {phase}: mean suppressed fraction {mean:.3} over {} masks", masks.len());
    Ok(())
}

/// Sidecar of a stacked heat-map tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapMeta {
    pub source: String,
    pub phases: Vec<usize>,
    pub image_ids: Vec<usize>,
    /// Per image and class; absent for fused maps.
    pub probs: Option<Vec<Vec<f32>>>,
}

fn write_heatmaps(ctx: &Ctx, split: &str, meta: &HeatmapMeta, maps: &[&Tensor]) -> CliResult<()> {
    write_atomic(&ctx.layout.heatmaps(split, &meta.source), &tns_bytes(&Tensor::stack(maps)?))?;
    write_json(&ctx.layout.heatmap_meta(split, &meta.source), meta)?;
    Ok(())
}

/// Stacked (N, C, h, w) maps and their sidecar.
pub fn read_heatmaps(ctx: &Ctx, split: &str, source: &str) -> CliResult<(Tensor, HeatmapMeta)> {
    let path = ctx.layout.heatmaps(split, source);
    let bytes = std::fs::read(&path).map_err(|e| twophase::Error::io(&path, e))?;
    let maps = read_tns(&mut bytes.as_slice()).map_err(|e| CliError::artifact(format!("{}: {e}", path.display())))?;
    let meta: HeatmapMeta = read_json(&ctx.layout.heatmap_meta(split, source))?;
    if maps.rank() != 4 || maps.shape()[0] != meta.image_ids.len() || maps.shape()[1] != ctx.config.data.class_count
    {
        return Err(CliError::artifact(format!(
            "{}: shape {:?} does not match {} images of {} classes",
            path.display(),
            maps.shape(),
            meta.image_ids.len(),
            ctx.config.data.class_count
        )));
    }
    Ok((maps, meta))
}

fn image_hw(sample: &Sample) -> (usize, usize) {
    (sample.image.shape()[1], sample.image.shape()[2])
}

/// One prediction per (image, class): argmax of the upscaled map, max as confidence.
fn predictions_from(samples: &[Sample], maps: &[Tensor]) -> CliResult<Vec<PointPrediction>> {
    let per_image = samples
        .par_iter()
        .zip(maps)
        .map(|(s, m)| {
            let (h, w) = image_hw(s);
            (0..m.shape()[0])
                .map(|c| {
                    let ((row, col), confidence) = predict_point(&m.slice_outer(c), h, w)?;
                    Ok(PointPrediction {
                        image_id: s.id,
                        class_id: c,
                        row,
                        col,
                        confidence,
                    })
                })
                .collect::<twophase::Result<Vec<_>>>()
        })
        .collect::<twophase::Result<Vec<_>>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

pub fn infer(ctx: &Ctx, phase: usize, split: &str) -> CliResult<()> {
    ctx.check_phase(phase)?;
    let data = ctx.load_split(split)?;
    let model = ctx.load_model(phase)?;
    let sets = data
        .samples
        .par_iter()
        .map(|s| model.compute_heatmaps(&s.image, phase))
        .collect::<twophase::Result<Vec<_>>>()?;
    let meta = HeatmapMeta {
        source: phase_source(phase),
        phases: vec![phase],
        image_ids: data.samples.iter().map(|s| s.id).collect(),
        probs: Some(sets.iter().map(|s| s.probs.clone()).collect()),
    };
    let maps: Vec<Tensor> = sets.into_iter().map(|s| s.maps).collect();
    write_heatmaps(ctx, split, &meta, &maps.iter().collect::<Vec<_>>())?;
    let preds = predictions_from(&data.samples, &maps)?;
    write_json(&ctx.layout.predictions(split, &meta.source), &preds)?;
    log::info!("phase {phase}: heat maps for {} {split} images", data.samples.len());
    Ok(())
}

fn check_ids(meta: &HeatmapMeta, samples: &[Sample]) -> CliResult<()> {
    if meta.image_ids.len() != samples.len() || meta.image_ids.iter().zip(samples).any(|(&i, s)| i != s.id) {
        return Err(CliError::artifact(format!(
            "heat maps of {} do not match the images of the split",
            meta.source
        )));
    }
    Ok(())
}

pub fn fuse(ctx: &Ctx, split: &str) -> CliResult<()> {
    let data = ctx.load_split(split)?;
    let phases = ctx.config.eval.fused_phases.clone();
    let mut per_phase = Vec::new();
    for &p in &phases {
        let (maps, meta) = read_heatmaps(ctx, split, &phase_source(p))?;
        check_ids(&meta, &data.samples)?;
        let probs = meta
            .probs
            .ok_or_else(|| CliError::artifact(format!("heat maps of phase {p} carry no probabilities")))?;
        per_phase.push((p, maps, probs));
    }
    let fused = (0..data.samples.len())
        .into_par_iter()
        .map(|i| {
            let sets: Vec<HeatMapSet> = per_phase
                .iter()
                .map(|(p, maps, probs)| HeatMapSet {
                    maps: maps.slice_outer(i),
                    probs: probs[i].clone(),
                    phase: *p,
                })
                .collect();
            weighted_map_voting(&sets).map(|f| f.maps)
        })
        .collect::<twophase::Result<Vec<_>>>()?;
    let meta = HeatmapMeta {
        source: "fused".into(),
        phases,
        image_ids: data.samples.iter().map(|s| s.id).collect(),
        probs: None,
    };
    write_heatmaps(ctx, split, &meta, &fused.iter().collect::<Vec<_>>())?;
    let preds = predictions_from(&data.samples, &fused)?;
    write_json(&ctx.layout.predictions(split, "fused"), &preds)?;
    log::info!("fused phases {:?} for {} {split} images", meta.phases, data.samples.len());
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CueEntry {
    pub image_id: usize,
    /// (class, cue pixel count) for every present class.
    pub classes: Vec<(usize, usize)>,
    pub unlabeled_pixels: usize,
}

/// Binary cues per present class from `source` maps upscaled to image size,
/// plus the unlabeled complement of their union.
pub fn cues(ctx: &Ctx, source: &str, split: &str) -> CliResult<()> {
    let data = ctx.load_split(split)?;
    let (maps, meta) = read_heatmaps(ctx, split, source)?;
    check_ids(&meta, &data.samples)?;
    let dir = ctx.layout.cues_dir(split, source);
    let fraction = ctx.config.eval.cue_fraction;
    let entries = data
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let (h, w) = image_hw(s);
            let image_maps = maps.slice_outer(i);
            let mut union = vec![false; h * w];
            let mut classes = Vec::new();
            for c in s.present_classes() {
                let up = bilinear_resize(&image_maps.slice_outer(c), h, w)?;
                let cue = extract_cues(&up, fraction)?;
                for (u, &v) in union.iter_mut().zip(cue.data()) {
                    *u |= v != 0.0;
                }
                classes.push((c, cue.data().iter().filter(|&&v| v != 0.0).count()));
                GrayImage::from_binary(&cue)?.save(&dir.join(format!("img_{:05}_c{c}.pgm", s.id)))?;
            }
            let unlabeled = Tensor::from_fn(&[h, w], |k| if union[k] { 0.0 } else { 1.0 });
            GrayImage::from_binary(&unlabeled)?.save(&dir.join(format!("img_{:05}_unlabeled.pgm", s.id)))?;
            Ok(CueEntry {
                image_id: s.id,
                classes,
                unlabeled_pixels: union.iter().filter(|&&u| !u).count(),
            })
        })
        .collect::<twophase::Result<Vec<_>>>()?;
    write_json(&dir.join("cues.json"), &entries)?;
    log::info!("cues from {source} for {} {split} images", entries.len());
    Ok(())
}

pub fn eval_loc(ctx: &Ctx, split: &str) -> CliResult<metrics::LocalizationTable> {
    let table = metrics::localization(ctx, split)?;
    let (_, truths) = metrics::truths(ctx, split)?;
    write_json(&ctx.layout.predictions(split, "center"), &metrics::center(ctx, split, &truths)?)?;
    write_json(&ctx.layout.eval_file("localization.json"), &table)?;
    metrics::write_localization_curves(ctx, split)?;
    for row in &table.rows {
        println!("{:<8} mAP {:.4}", row.method, row.map);
    }
    Ok(table)
}

pub fn eval_sal(ctx: &Ctx, split: &str) -> CliResult<metrics::SaliencyTable> {
    let (table, curves) = metrics::saliency(ctx, split)?;
    write_json(&ctx.layout.eval_file("saliency.json"), &table)?;
    for (source, curve) in curves {
        metrics::write_pr_csv(&ctx.layout.eval_file(&format!("saliency_pr_{source}.csv")), &curve)?;
    }
    for row in &table.rows {
        println!("{:<8} corpus AP {:.4}", row.source, row.corpus_ap);
    }
    Ok(table)
}

pub fn eval_dist(ctx: &Ctx, split: &str) -> CliResult<Vec<metrics::DistanceRow>> {
    let rows = metrics::distances(ctx, split)?;
    write_json(&ctx.layout.eval_file("distance.json"), &rows)?;
    for r in &rows {
        println!("{} vs {}: {:.2} px over {} pairs", r.a, r.b, r.mean_distance, r.pairs);
    }
    Ok(rows)
}

pub fn report(ctx: &Ctx, split: &str) -> CliResult<metrics::Metrics> {
    let m = metrics::collect(ctx, split)?;
    write_json(&ctx.layout.metrics(), &m)?;
    let text = metrics::render_table(&m);
    write_atomic(&ctx.layout.report(), text.as_bytes())?;
    metrics::write_renders(ctx, split)?;
    print!("{text}");
    Ok(m)
}

/// gen-data → train × N → infer → fuse → cues → eval → report.
pub fn pipeline(ctx: &Ctx) -> CliResult<metrics::Metrics> {
    let split = "eval";
    gen_data(ctx)?;
    for k in 1..=ctx.config.plan.phase_count {
        train(ctx, k)?;
    }
    for k in 1..=ctx.config.plan.phase_count {
        infer(ctx, k, split)?;
    }
    fuse(ctx, split)?;
    cues(ctx, "fused", split)?;
    eval_loc(ctx, split)?;
    eval_sal(ctx, split)?;
    eval_dist(ctx, split)?;
    report(ctx, split)
}
