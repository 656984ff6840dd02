//! Evaluation tables built from run artifacts, shared by the `eval-*`
//! subcommands and `report` so both print the same numbers.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use twophase::eval::{
    average_precision, center_predictions, localization_ap, mean_pairwise_distance, CenterConfidence,
    ImageTruth, PointPrediction, PrCurve, SaliencyAccumulator,
};
use twophase::io::{read_json, write_atomic, GrayImage};
use twophase::ops::bilinear_resize;
use twophase::tensor::read_tns;

use crate::commands::{read_heatmaps, Ctx};
use crate::config::{CenterMode, VERSION};
use crate::layout::phase_source;
use crate::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationRow {
    pub method: String,
    pub per_class_ap: Vec<f64>,
    pub map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationTable {
    pub tolerance: usize,
    pub rows: Vec<LocalizationRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyRow {
    pub source: String,
    /// AP of all present-class pixels of one class pooled over images.
    pub per_class_ap: Vec<f64>,
    pub map: f64,
    /// AP of every (image, present class) pixel pooled into one ranking.
    pub corpus_ap: f64,
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyTable {
    pub rows: Vec<SaliencyRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceRow {
    pub a: String,
    pub b: String,
    /// Present (image, class) pairs only.
    pub pairs: usize,
    pub mean_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseStats {
    pub phase: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean suppressed share of the training masks; absent for phase 1.
    pub mean_suppressed: Option<f64>,
    /// Share of training masks with a suppressed fraction in (0, 0.5].
    pub masks_in_range: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub version: String,
    pub seed: u64,
    pub split: String,
    pub images: usize,
    pub class_count: usize,
    pub localization: LocalizationTable,
    pub saliency: SaliencyTable,
    pub distance: Vec<DistanceRow>,
    pub phases: Vec<PhaseStats>,
}

pub fn truths(ctx: &Ctx, split: &str) -> CliResult<(twophase::dataset::Dataset, Vec<ImageTruth>)> {
    let data = ctx.load_split(split)?;
    let truths = data.truths();
    Ok((data, truths))
}

fn read_predictions(ctx: &Ctx, split: &str, source: &str) -> CliResult<Vec<PointPrediction>> {
    Ok(read_json(&ctx.layout.predictions(split, source))?)
}

fn fused_available(ctx: &Ctx, split: &str) -> bool {
    ctx.layout.predictions(split, "fused").exists()
}

/// Every scored prediction source: phases, fused when present, then the centre baseline.
fn prediction_sources(ctx: &Ctx, split: &str, truths: &[ImageTruth]) -> CliResult<Vec<(String, Vec<PointPrediction>)>> {
    let mut out = Vec::new();
    for k in 1..=ctx.config.plan.phase_count {
        let source = phase_source(k);
        let preds = read_predictions(ctx, split, &source)?;
        out.push((source, preds));
    }
    if fused_available(ctx, split) {
        out.push(("fused".to_string(), read_predictions(ctx, split, "fused")?));
    }
    out.push(("center".to_string(), center(ctx, split, truths)?));
    Ok(out)
}

/// Image-centre predictions for every (image, class) pair.
pub fn center(ctx: &Ctx, split: &str, truths: &[ImageTruth]) -> CliResult<Vec<PointPrediction>> {
    let confidence = match ctx.config.eval.center_confidence {
        CenterMode::Prior => CenterConfidence::ClassPrior,
        CenterMode::Probs => {
            let (_, meta) = read_heatmaps(ctx, split, &phase_source(1))?;
            let probs = meta
                .probs
                .ok_or_else(|| CliError::artifact("phase-1 heat maps carry no probabilities"))?;
            CenterConfidence::Scores(probs.iter().map(|p| p.iter().map(|&v| v as f64).collect()).collect())
        }
    };
    Ok(center_predictions(truths, ctx.config.data.class_count, &confidence)?)
}

pub fn localization(ctx: &Ctx, split: &str) -> CliResult<LocalizationTable> {
    let (_, truths) = truths(ctx, split)?;
    let classes = ctx.config.data.class_count;
    let tolerance = ctx.config.eval.tolerance;
    let rows = prediction_sources(ctx, split, &truths)?
        .into_iter()
        .map(|(method, preds)| {
            let r = localization_ap(&preds, &truths, classes, tolerance)?;
            Ok(LocalizationRow {
                method,
                per_class_ap: r.per_class_ap,
                map: r.map,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(LocalizationTable { tolerance, rows })
}

pub fn write_pr_csv(path: &Path, curve: &PrCurve) -> CliResult<()> {
    let mut out = String::from("recall,precision\n");
    for (r, p) in &curve.points {
        let _ = writeln!(out, "{r},{p}");
    }
    write_atomic(path, out.as_bytes())?;
    Ok(())
}

/// Per-class localization PR curves, one CSV per source and class.
pub fn write_localization_curves(ctx: &Ctx, split: &str) -> CliResult<()> {
    let (_, truths) = truths(ctx, split)?;
    let tolerance = ctx.config.eval.tolerance;
    for (method, preds) in prediction_sources(ctx, split, &truths)? {
        for c in 0..ctx.config.data.class_count {
            let scored: Vec<(f64, bool)> = preds
                .iter()
                .filter(|p| p.class_id == c)
                .map(|p| {
                    let truth = truths.iter().find(|t| t.image_id == p.image_id);
                    let hit = truth.is_some_and(|t| {
                        t.boxes
                            .iter()
                            .any(|(k, b)| *k == c && b.contains_within(p.row, p.col, tolerance))
                    });
                    (p.confidence, hit)
                })
                .collect();
            let positives = truths.iter().filter(|t| t.has_class(c)).count();
            let curve = average_precision(&scored, positives);
            write_pr_csv(&ctx.layout.eval_file(&format!("localization_pr_{method}_c{c}.csv")), &curve)?;
        }
    }
    Ok(())
}

/// Heat-map sources for saliency: every phase, then fused when present.
fn heatmap_sources(ctx: &Ctx, split: &str) -> Vec<String> {
    let mut out: Vec<String> = (1..=ctx.config.plan.phase_count).map(phase_source).collect();
    if ctx.layout.heatmaps(split, "fused").exists() {
        out.push("fused".into());
    }
    out
}

pub fn saliency(ctx: &Ctx, split: &str) -> CliResult<(SaliencyTable, Vec<(String, PrCurve)>)> {
    let data = ctx.load_split(split)?;
    let classes = ctx.config.data.class_count;
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for source in heatmap_sources(ctx, split) {
        let (maps, meta) = read_heatmaps(ctx, split, &source)?;
        if meta.image_ids.len() != data.samples.len() {
            return Err(CliError::artifact(format!("heat maps of {source} do not match the split")));
        }
        let mut corpus = SaliencyAccumulator::default();
        let mut per_class = vec![SaliencyAccumulator::default(); classes];
        for (i, s) in data.samples.iter().enumerate() {
            let (h, w) = (s.image.shape()[1], s.image.shape()[2]);
            let image_maps = maps.slice_outer(i);
            for c in s.present_classes() {
                let up = bilinear_resize(&image_maps.slice_outer(c), h, w)?;
                let gt = s.class_mask(c);
                corpus.add(&up, &gt)?;
                per_class[c].add(&up, &gt)?;
            }
        }
        let per_class_ap: Vec<f64> = per_class.iter().map(|a| a.finish().ap).collect();
        let curve = corpus.finish();
        rows.push(SaliencyRow {
            source: source.clone(),
            map: per_class_ap.iter().sum::<f64>() / classes as f64,
            per_class_ap,
            corpus_ap: curve.ap,
            skipped: corpus.skipped(),
        });
        curves.push((source, curve));
    }
    Ok((SaliencyTable { rows }, curves))
}

/// Distances between consecutive phases over present (image, class) pairs.
pub fn distances(ctx: &Ctx, split: &str) -> CliResult<Vec<DistanceRow>> {
    let (_, truths) = truths(ctx, split)?;
    let present = |preds: Vec<PointPrediction>| -> Vec<PointPrediction> {
        preds
            .into_iter()
            .filter(|p| {
                truths
                    .iter()
                    .any(|t| t.image_id == p.image_id && t.has_class(p.class_id))
            })
            .collect()
    };
    let mut rows = Vec::new();
    for k in 2..=ctx.config.plan.phase_count {
        let a = present(read_predictions(ctx, split, &phase_source(k - 1))?);
        let b = present(read_predictions(ctx, split, &phase_source(k))?);
        rows.push(DistanceRow {
            a: phase_source(k - 1),
            b: phase_source(k),
            pairs: a.len(),
            mean_distance: mean_pairwise_distance(&a, &b)?,
        });
    }
    Ok(rows)
}

fn read_losses(path: &Path) -> CliResult<(f64, f64)> {
    let text = std::fs::read_to_string(path).map_err(|e| twophase::Error::io(path, e))?;
    let losses: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|line| {
            line.rsplit(',')
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| CliError::artifact(format!("{}: bad row `{line}`", path.display())))
        })
        .collect::<CliResult<_>>()?;
    match (losses.first(), losses.last()) {
        (Some(&a), Some(&b)) => Ok((a, b)),
        _ => Err(CliError::artifact(format!("{}: no loss rows", path.display()))),
    }
}

fn phase_stats(ctx: &Ctx) -> CliResult<Vec<PhaseStats>> {
    (1..=ctx.config.plan.phase_count)
        .map(|k| {
            let (initial_loss, final_loss) = read_losses(&ctx.layout.loss_log(k))?;
            let (mut mean_suppressed, mut masks_in_range) = (None, None);
            if k > 1 {
                let path = ctx.layout.masks(k);
                let bytes = std::fs::read(&path).map_err(|e| twophase::Error::io(&path, e))?;
                let masks = read_tns(&mut bytes.as_slice())?;
                let n = masks.shape()[0];
                let fractions: Vec<f64> = (0..n)
                    .map(|i| {
                        let grid = masks.outer(i);
                        grid.iter().filter(|&&v| v == 0.0).count() as f64 / grid.len() as f64
                    })
                    .collect();
                mean_suppressed = Some(fractions.iter().sum::<f64>() / n as f64);
                masks_in_range = Some(fractions.iter().filter(|&&f| f > 0.0 && f <= 0.5).count() as f64 / n as f64);
            }
            Ok(PhaseStats {
                phase: k,
                initial_loss,
                final_loss,
                mean_suppressed,
                masks_in_range,
            })
        })
        .collect()
}

pub fn collect(ctx: &Ctx, split: &str) -> CliResult<Metrics> {
    let data = ctx.load_split(split)?;
    Ok(Metrics {
        version: VERSION.to_string(),
        seed: ctx.config.seed,
        split: split.to_string(),
        images: data.samples.len(),
        class_count: ctx.config.data.class_count,
        localization: localization(ctx, split)?,
        saliency: saliency(ctx, split)?.0,
        distance: distances(ctx, split)?,
        phases: phase_stats(ctx)?,
    })
}

/// Plain-text tables: methods by rows, classes and the mean by columns.
pub fn render_table(m: &Metrics) -> String {
    let mut out = String::new();
    let header = |out: &mut String, first: &str, last: &str| {
        let _ = write!(out, "{first:<10}");
        for c in 0..m.class_count {
            let _ = write!(out, " {:>7}", format!("class{c}"));
        }
        let _ = writeln!(out, " {last:>7}");
    };
    let row = |out: &mut String, name: &str, values: &[f64], last: f64| {
        let _ = write!(out, "{name:<10}");
        for v in values {
            let _ = write!(out, " {:>7.1}", 100.0 * v);
        }
        let _ = writeln!(out, " {:>7.1}", 100.0 * last);
    };
    let _ = writeln!(
        out,
        "Point localization AP, tolerance {} px ({} {} images, seed {})",
        m.localization.tolerance, m.images, m.split, m.seed
    );
    header(&mut out, "method", "mAP");
    for r in &m.localization.rows {
        row(&mut out, &r.method, &r.per_class_ap, r.map);
    }
    let _ = writeln!(out, "\nSaliency AP (present classes)");
    header(&mut out, "source", "mean");
    for r in &m.saliency.rows {
        row(&mut out, &r.source, &r.per_class_ap, r.map);
    }
    for r in &m.saliency.rows {
        let _ = writeln!(out, "{:<10} corpus AP {:.1}", r.source, 100.0 * r.corpus_ap);
    }
    if !m.distance.is_empty() {
        let _ = writeln!(out, "\nMean distance between predicted locations");
        for d in &m.distance {
            let _ = writeln!(out, "{} vs {}: {:.2} px over {} pairs", d.a, d.b, d.mean_distance, d.pairs);
        }
    }
    let _ = writeln!(out, "\nTraining");
    for p in &m.phases {
        let _ = write!(out, "phase{}: loss {:.4} -> {:.4}", p.phase, p.initial_loss, p.final_loss);
        if let (Some(mean), Some(ok)) = (p.mean_suppressed, p.masks_in_range) {
            let _ = write!(out, ", suppressed {:.1}% on average, {:.1}% of masks in (0, 50%]", 100.0 * mean, 100.0 * ok);
        }
        out.push('\n');
    }
    out
}

/// Input, phase-1, phase-2 and fused heat maps of the first present class,
/// upscaled and normalized, for the first `render_count` images.
pub fn write_renders(ctx: &Ctx, split: &str) -> CliResult<()> {
    let count = ctx.config.eval.render_count;
    if count == 0 {
        return Ok(());
    }
    let data = ctx.load_split(split)?;
    let mut sources: Vec<String> = (1..=ctx.config.plan.phase_count.min(2)).map(phase_source).collect();
    if ctx.layout.heatmaps(split, "fused").exists() {
        sources.push("fused".into());
    }
    let maps = sources
        .iter()
        .map(|s| read_heatmaps(ctx, split, s).map(|(m, _)| m))
        .collect::<CliResult<Vec<_>>>()?;
    let dir = ctx.layout.renders();
    for (i, s) in data.samples.iter().enumerate().take(count) {
        let (h, w) = (s.image.shape()[1], s.image.shape()[2]);
        s.gray().save(&dir.join(format!("img_{:05}_input.pgm", s.id)))?;
        let Some(&c) = s.present_classes().first() else { continue };
        for (source, m) in sources.iter().zip(&maps) {
            let up = bilinear_resize(&m.slice_outer(i).slice_outer(c), h, w)?;
            GrayImage::from_map_normalized(&up)?.save(&dir.join(format!("img_{:05}_{source}_c{c}.pgm", s.id)))?;
        }
    }
    Ok(())
}
