//! Drivers behind the command-line subcommands. Each returns its metrics
//! document after writing it (and any other artefact) under `out_dir`.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::coco::{load_annotations, AnnotationSet, CocoError};
use crate::config::ExperimentConfig;
use crate::geometry::{clip_to_image, generate_anchor_grid, BBox};
use crate::head::{load_checkpoint, save_checkpoint};
use crate::head::{HeadError, HeadSet, Sgd};
use crate::metrics::{
    AnchorQualityAccumulator, AnchorQualityReport, LabelingRule, MetricsError, RecallAccumulator,
    RecallReport,
};
use crate::pipeline::{
    augment, em_elbo_diagnostic, infer, train_step, PipelineError, Scene, StepOutcome,
};
use crate::render::{render_svg, Panel};
use crate::report::{write_atomic, CurvePoint, MetricsDocument};
use crate::synth::{generate_scenes, SceneGenerator};
use crate::tensor::level_dims;
use crate::verify::{run_verify, VerifyOptions, VerifyReport};

#[derive(Debug, Error)]
pub enum CommandError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Coco(#[from] CocoError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("non-finite value at iteration {iteration}: {detail}")]
    NonFinite { iteration: usize, detail: String },
    #[error("checkpoint does not fit the configuration: {0}")]
    CheckpointMismatch(String),
    #[error("verification failed: {0}")]
    VerifyFailed(String),
}

// RNG streams; one per consumer so changing one never shifts another.
const STREAM_TRAIN_SCENES: u64 = 1;
const STREAM_EVAL_SCENES: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_SAMPLING: u64 = 4;
const MIXING_SALT: u64 = 0x6d69_7869_6e67;

pub const TRAIN_METRICS: &str = "train_metrics.json";
pub const EVAL_METRICS: &str = "eval_metrics.json";
pub const ANCHOR_METRICS: &str = "anchor_stats.json";
pub const VERIFY_METRICS: &str = "verify_metrics.json";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const RENDER_FILE: &str = "scene.svg";

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn write_doc(doc: &MetricsDocument, path: &Path) -> Result<(), CommandError> {
    doc.write(path).map_err(|source| CommandError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn scene_generator(cfg: &ExperimentConfig) -> SceneGenerator {
    SceneGenerator::new(cfg.scene.clone(), cfg.seed ^ MIXING_SALT)
}

pub fn train_scenes(cfg: &ExperimentConfig) -> Vec<Scene> {
    generate_scenes(
        &scene_generator(cfg),
        cfg.seed,
        STREAM_TRAIN_SCENES,
        cfg.train_scenes,
    )
}

pub fn eval_scenes(cfg: &ExperimentConfig) -> Vec<Scene> {
    generate_scenes(
        &scene_generator(cfg),
        cfg.seed,
        STREAM_EVAL_SCENES,
        cfg.eval_scenes,
    )
}

pub fn init_heads(cfg: &ExperimentConfig) -> HeadSet {
    HeadSet::init(
        &mut stream_rng(cfg.seed, STREAM_INIT),
        &cfg.pipeline.dilations,
        cfg.pipeline.share_params,
        cfg.scene.in_channels,
        cfg.mid_channels,
        cfg.pipeline.kernel,
        cfg.init_std,
    )
}

fn check_checkpoint(heads: &HeadSet, cfg: &ExperimentConfig) -> Result<(), CommandError> {
    let fresh = init_heads(cfg);
    if heads.bindings != fresh.bindings {
        return Err(CommandError::CheckpointMismatch(format!(
            "head bindings {:?}, configuration implies {:?}",
            heads.bindings, fresh.bindings
        )));
    }
    for (a, b) in heads.params.iter().zip(&fresh.params) {
        if !a.same_shape(b) {
            return Err(CommandError::CheckpointMismatch(format!(
                "parameter shape (in {}, mid {}, kernel {:?}), configuration implies (in {}, mid {}, kernel {:?})",
                a.in_channels(),
                a.mid_channels(),
                a.kernel(),
                b.in_channels(),
                b.mid_channels(),
                b.kernel()
            )));
        }
    }
    Ok(())
}

pub fn load_heads(path: &Path, cfg: &ExperimentConfig) -> Result<HeadSet, CommandError> {
    let heads = load_checkpoint(path)?;
    check_checkpoint(&heads, cfg)?;
    Ok(heads)
}

/// Held-out quality of one set of heads.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub ar_100: RecallReport,
    pub ar_1000: RecallReport,
    /// Same heads with the regression branch zeroed.
    pub baseline_100: RecallReport,
    pub baseline_1000: RecallReport,
    pub hand: AnchorQualityReport,
    /// The augmented anchors handed to refinement.
    pub augmented: AnchorQualityReport,
    /// Every hand-designed anchor after decoding, before selection.
    pub decoded_grid: AnchorQualityReport,
}

pub fn evaluate(
    heads: &HeadSet,
    scenes: &[Scene],
    cfg: &ExperimentConfig,
) -> Result<EvalSummary, CommandError> {
    let baseline = heads.without_regression();
    let mut ar = [RecallAccumulator::new(100), RecallAccumulator::new(1000)];
    let mut base = [RecallAccumulator::new(100), RecallAccumulator::new(1000)];
    let mut hand = AnchorQualityAccumulator::new(LabelingRule::default());
    let mut aug_q = AnchorQualityAccumulator::new(LabelingRule::default());
    let mut grid_q = AnchorQualityAccumulator::new(LabelingRule::default());
    for scene in scenes {
        let gts = scene.gt_boxes();
        let proposals = infer(scene, heads, &cfg.pipeline)?.boxes();
        let base_props = infer(scene, &baseline, &cfg.pipeline)?.boxes();
        for a in &mut ar {
            a.add_image(&proposals, &gts);
        }
        for a in &mut base {
            a.add_image(&base_props, &gts);
        }
        let aug = augment(scene, heads, &cfg.pipeline)?;
        let grid: Vec<BBox> = aug
            .grid
            .iter()
            .map(|s| clip_to_image(&s.anchor.bbox, scene.width, scene.height))
            .collect();
        hand.add_image(&grid, &gts);
        aug_q.add_image(&aug.anchors.boxes(), &gts);
        grid_q.add_image(&aug.decoded, &gts);
    }
    Ok(EvalSummary {
        ar_100: ar[0].report(),
        ar_1000: ar[1].report(),
        baseline_100: base[0].report(),
        baseline_1000: base[1].report(),
        hand: hand.report()?,
        augmented: aug_q.report()?,
        decoded_grid: grid_q.report()?,
    })
}

fn record_summary(doc: &mut MetricsDocument, s: &EvalSummary) {
    doc.set_recall("eval.ar100", &s.ar_100);
    doc.set_recall("eval.ar1000", &s.ar_1000);
    doc.set_recall("baseline.ar100", &s.baseline_100);
    doc.set_recall("baseline.ar1000", &s.baseline_1000);
    for (name, q) in [
        ("anchors.hand", &s.hand),
        ("anchors.augmented", &s.augmented),
        ("anchors.decoded_grid", &s.decoded_grid),
    ] {
        doc.set(format!("{name}.mean_best_iou"), q.mean_best_iou);
        doc.set(format!("{name}.auc"), q.auc_roc);
        doc.set(format!("{name}.positives"), q.positives as f64);
        doc.set(format!("{name}.negatives"), q.negatives as f64);
    }
}

fn mean_em(heads: &HeadSet, scenes: &[Scene], cfg: &ExperimentConfig) -> Result<f64, CommandError> {
    let mut total = 0.0;
    for s in scenes {
        total += em_elbo_diagnostic(s, heads, &cfg.pipeline)?;
    }
    Ok(total / scenes.len() as f64)
}

fn window_mean(points: &[CurvePoint]) -> f64 {
    points.iter().map(|p| p.value).sum::<f64>() / points.len() as f64
}

pub struct TrainOutput {
    pub doc: MetricsDocument,
    pub heads: HeadSet,
    pub checkpoint: PathBuf,
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutput, CommandError> {
    let train = train_scenes(cfg);
    let eval = eval_scenes(cfg);
    let diag = &eval[..cfg.diag_scenes];
    let mut heads = init_heads(cfg);
    let mut optimizer = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut rng = stream_rng(cfg.seed, STREAM_SAMPLING);
    let mut doc = MetricsDocument::new("train", cfg);

    doc.em_curve.push(CurvePoint {
        iteration: 0,
        value: mean_em(&heads, diag, cfg)?,
    });
    let mut skipped = 0usize;
    for it in 0..cfg.iterations {
        let scene = &train[it % train.len()];
        match train_step(
            scene,
            &mut heads,
            &cfg.pipeline,
            &cfg.loss,
            &mut optimizer,
            &mut rng,
        )? {
            StepOutcome::Trained(rec) => {
                if !rec.loss.total.is_finite() {
                    return Err(CommandError::NonFinite {
                        iteration: it,
                        detail: format!("loss {:?}", rec.loss),
                    });
                }
                doc.loss_curve.push(CurvePoint {
                    iteration: it,
                    value: rec.loss.total,
                });
            }
            StepOutcome::Skipped => skipped += 1,
        }
        if !heads.is_finite() {
            return Err(CommandError::NonFinite {
                iteration: it,
                detail: "parameters".into(),
            });
        }
        if (it + 1) % cfg.em_every == 0 || it + 1 == cfg.iterations {
            doc.em_curve.push(CurvePoint {
                iteration: it + 1,
                value: mean_em(&heads, diag, cfg)?,
            });
        }
    }

    doc.set("train.iterations", cfg.iterations as f64);
    doc.set("train.skipped", skipped as f64);
    let curve = doc.loss_curve.clone();
    if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
        let n = curve.len();
        let w = (n / 10).clamp(1, 50);
        doc.set("loss.first", first.value);
        doc.set("loss.last", last.value);
        doc.set("loss.initial_mean", window_mean(&curve[..w]));
        doc.set("loss.final_mean", window_mean(&curve[n - w..]));
    }
    doc.set("em.initial", doc.em_curve[0].value);
    doc.set("em.final", doc.em_curve[doc.em_curve.len() - 1].value);
    record_summary(&mut doc, &evaluate(&heads, &eval, cfg)?);

    std::fs::create_dir_all(&cfg.out_dir).map_err(|source| CommandError::Io {
        path: cfg.out_dir.display().to_string(),
        source,
    })?;
    let checkpoint = cfg.out_dir.join(CHECKPOINT);
    save_checkpoint(&checkpoint, &heads)?;
    write_doc(&doc, &cfg.out_dir.join(TRAIN_METRICS))?;
    Ok(TrainOutput {
        doc,
        heads,
        checkpoint,
    })
}

pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
) -> Result<MetricsDocument, CommandError> {
    let heads = load_heads(checkpoint, cfg)?;
    let eval = eval_scenes(cfg);
    let mut doc = MetricsDocument::new("eval", cfg);
    record_summary(&mut doc, &evaluate(&heads, &eval, cfg)?);
    write_doc(&doc, &cfg.out_dir.join(EVAL_METRICS))?;
    Ok(doc)
}

/// Non-crowd boxes in coordinate order, so results ignore file order.
fn sorted_gts(im: &crate::coco::AnnotatedImage) -> Vec<BBox> {
    let mut g = im.gt_boxes();
    g.sort_by(|a, b| {
        a.x1.total_cmp(&b.x1)
            .then(a.y1.total_cmp(&b.y1))
            .then(a.x2.total_cmp(&b.x2))
            .then(a.y2.total_cmp(&b.y2))
    });
    g
}

/// Hand-designed anchor statistics for every (dilation, stride) pair, plus
/// all pairs pooled. Keys are `anchors.d<d>.s<s>.*` and `anchors.all.*`.
pub fn anchor_stats(
    set: &AnnotationSet,
    cfg: &ExperimentConfig,
) -> Result<MetricsDocument, CommandError> {
    let mut doc = MetricsDocument::new("anchor-stats", cfg);
    let rule = LabelingRule::default();
    let mut pooled = AnchorQualityAccumulator::new(rule);
    let mut images = 0;
    let mut gts_total = 0;
    for &d in &cfg.pipeline.dilations {
        for &s in &cfg.scene.strides {
            let spec = cfg
                .pipeline
                .anchor_spec(d, s)
                .map_err(PipelineError::from)?;
            let mut acc = AnchorQualityAccumulator::new(rule);
            for im in &set.images {
                let gts = sorted_gts(im);
                if gts.is_empty() {
                    continue;
                }
                let (h, w) = level_dims(im.width, im.height, s);
                let anchors: Vec<BBox> = generate_anchor_grid(&spec, 0, h, w)
                    .iter()
                    .map(|a| a.bbox)
                    .collect();
                acc.add_image(&anchors, &gts);
                pooled.add_image(&anchors, &gts);
            }
            let r = acc.report()?;
            doc.set(format!("anchors.d{d}.s{s}.mean_best_iou"), r.mean_best_iou);
            doc.set(format!("anchors.d{d}.s{s}.auc"), r.auc_roc);
            doc.set(format!("anchors.d{d}.s{s}.positives"), r.positives as f64);
            doc.set(format!("anchors.d{d}.s{s}.negatives"), r.negatives as f64);
        }
    }
    for im in &set.images {
        let n = im.gt_boxes().len();
        if n > 0 {
            images += 1;
            gts_total += n;
        }
    }
    // per-gt maximum over every spec at once
    let mut best_sum = 0.0;
    for im in &set.images {
        let gts = sorted_gts(im);
        if gts.is_empty() {
            continue;
        }
        let mut anchors = Vec::new();
        for &d in &cfg.pipeline.dilations {
            for &s in &cfg.scene.strides {
                let spec = cfg
                    .pipeline
                    .anchor_spec(d, s)
                    .map_err(PipelineError::from)?;
                let (h, w) = level_dims(im.width, im.height, s);
                anchors.extend(generate_anchor_grid(&spec, 0, h, w).iter().map(|a| a.bbox));
            }
        }
        best_sum += crate::metrics::best_ious(&anchors, &gts)
            .iter()
            .sum::<f64>();
    }
    let pooled = pooled.report()?;
    doc.set("anchors.all.mean_best_iou", best_sum / gts_total as f64);
    doc.set("anchors.all.auc", pooled.auc_roc);
    doc.set("dataset.images", images as f64);
    doc.set("dataset.gts", gts_total as f64);
    doc.set("dataset.dropped", set.dropped as f64);
    Ok(doc)
}

pub fn cmd_anchor_stats(
    cfg: &ExperimentConfig,
    annotations: &Path,
) -> Result<MetricsDocument, CommandError> {
    let set = load_annotations(annotations)?;
    let doc = anchor_stats(&set, cfg)?;
    write_doc(&doc, &cfg.out_dir.join(ANCHOR_METRICS))?;
    Ok(doc)
}

/// Three panels for one scene: hand-designed anchors, augmented anchors and
/// final proposals, each cut to the `render_top` best by objectness.
pub fn render_scene(
    scene: &Scene,
    heads: &HeadSet,
    cfg: &ExperimentConfig,
) -> Result<String, CommandError> {
    let aug = augment(scene, heads, &cfg.pipeline)?;
    let mut grid = aug.grid.clone();
    grid.sort_by(|a, b| b.logit.total_cmp(&a.logit));
    let hand: Vec<BBox> = grid
        .iter()
        .take(cfg.render_top)
        .map(|s| clip_to_image(&s.anchor.bbox, scene.width, scene.height))
        .collect();
    let augmented: Vec<BBox> = aug
        .anchors
        .boxes()
        .into_iter()
        .take(cfg.render_top)
        .collect();
    let proposals: Vec<BBox> = infer(scene, heads, &cfg.pipeline)?
        .boxes()
        .into_iter()
        .take(cfg.render_top)
        .collect();
    let panel = |title: &str, boxes: Vec<BBox>, color: &str| Panel {
        title: title.to_string(),
        boxes,
        color: color.to_string(),
    };
    Ok(render_svg(
        scene.width,
        scene.height,
        &scene.gt_boxes(),
        &[
            panel("hand-designed anchors", hand, "#2b83ba"),
            panel("augmented anchors", augmented, "#fdae61"),
            panel("proposals", proposals, "#d7191c"),
        ],
    ))
}

/// Renders the first held-out scene; untrained heads when no checkpoint is given.
pub fn cmd_render(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
) -> Result<PathBuf, CommandError> {
    let heads = match checkpoint {
        Some(p) => load_heads(p, cfg)?,
        None => init_heads(cfg),
    };
    let scene = eval_scenes(cfg).swap_remove(0);
    let svg = render_scene(&scene, &heads, cfg)?;
    let path = cfg.out_dir.join(RENDER_FILE);
    write_atomic(&path, svg.as_bytes()).map_err(|source| CommandError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(path)
}

pub const VERIFY_INSTANCES: usize = 100;

pub fn verify_document(report: &VerifyReport, cfg: &ExperimentConfig) -> MetricsDocument {
    let mut doc = MetricsDocument::new("verify", cfg);
    let e = &report.equivalence;
    doc.set("equivalence.instances", e.instances as f64);
    doc.set("equivalence.cells", e.cells as f64);
    doc.set("equivalence.border_cells", e.border_cells as f64);
    doc.set("equivalence.max_abs_error", e.max_abs_error);
    for g in &report.gradients {
        doc.set(format!("gradient.{}.checked", g.name), g.checked as f64);
        doc.set(
            format!("gradient.{}.max_rel_error", g.name),
            g.max_rel_error,
        );
    }
    doc.set("gradient.max_rel_error", report.max_gradient_error());
    doc.set("passed", if report.passed() { 1.0 } else { 0.0 });
    doc
}

/// Writes the report, then fails if any tolerance was breached.
pub fn cmd_verify(
    cfg: &ExperimentConfig,
    corrupt_layout: bool,
) -> Result<MetricsDocument, CommandError> {
    let report = run_verify(&VerifyOptions {
        seed: cfg.seed,
        instances: VERIFY_INSTANCES,
        corrupt_layout,
    })?;
    let doc = verify_document(&report, cfg);
    write_doc(&doc, &cfg.out_dir.join(VERIFY_METRICS))?;
    if !report.passed() {
        return Err(CommandError::VerifyFailed(format!(
            "max equivalence error {:e}, max gradient relative error {:e}",
            report.equivalence.max_abs_error,
            report.max_gradient_error()
        )));
    }
    Ok(doc)
}
