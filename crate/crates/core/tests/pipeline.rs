use augrpn::commands::{cmd_eval, cmd_train, init_heads, train_scenes, CommandError};
use augrpn::config::ExperimentConfig;
use augrpn::geometry::clip_to_image;
use augrpn::head::{forward_fc, load_checkpoint, HeadSet, Sgd};
use augrpn::pipeline::{
    anchor_guided_append, augment, compute_gradients, infer, train_step, Origin, Scene, StepOutcome,
};
use augrpn::tensor::roi_align;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(out: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        out_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    };
    cfg.mid_channels = 16;
    cfg.train_scenes = 4;
    cfg.eval_scenes = 2;
    cfg.diag_scenes = 1;
    cfg.iterations = 10;
    cfg.em_every = 5;
    cfg
}

fn scene_and_heads() -> (ExperimentConfig, Scene, HeadSet) {
    let cfg = small(std::path::Path::new("unused"));
    let scene = train_scenes(&cfg).remove(0);
    let heads = init_heads(&cfg);
    (cfg, scene, heads)
}

#[test]
fn zero_regression_proposals_are_grid_anchors() {
    let (cfg, scene, heads) = scene_and_heads();
    let base = heads.without_regression();
    let aug = augment(&scene, &base, &cfg.pipeline).unwrap();
    let grid: Vec<_> = aug
        .grid
        .iter()
        .map(|s| clip_to_image(&s.anchor.bbox, scene.width, scene.height))
        .collect();
    assert_eq!(aug.decoded, grid);
    let props = infer(&scene, &base, &cfg.pipeline).unwrap();
    assert!(!props.is_empty());
    for p in &props.items {
        assert!(grid.contains(&p.bbox));
    }
}

#[test]
fn dense_scores_match_per_box_scores_on_the_grid() {
    let (cfg, scene, heads) = scene_and_heads();
    let aug = augment(&scene, &heads, &cfg.pipeline).unwrap();
    let (kh, kw) = cfg.pipeline.kernel;
    for s in aug.grid.iter().step_by(7) {
        let level = &scene.features.levels[s.anchor.level_index];
        let roi = s.anchor.bbox.scaled(1.0 / level.stride as f64);
        let patch = roi_align(&level.map, &roi, kh, kw).unwrap();
        let out = forward_fc(&patch, heads.params_of(s.head)).unwrap();
        assert!((out.logit - s.logit).abs() < 1e-9);
    }
}

#[test]
fn inference_is_deterministic() {
    let (cfg, scene, heads) = scene_and_heads();
    let a = infer(&scene, &heads, &cfg.pipeline).unwrap();
    let b = infer(&scene, &heads, &cfg.pipeline).unwrap();
    assert_eq!(a, b);
    assert!(a.is_sorted());
    assert!(a.len() <= cfg.pipeline.eval_keep);
}

#[test]
fn anchor_guided_boxes_are_marked() {
    let (cfg, scene, heads) = scene_and_heads();
    let aug = augment(&scene, &heads, &cfg.pipeline).unwrap();
    let gts = scene.gt_boxes();
    let with = anchor_guided_append(&aug.anchors, &aug.grid, &gts, scene.width, scene.height);
    let guided = with
        .items
        .iter()
        .filter(|p| p.origin == Origin::AnchorGuided)
        .count();
    assert!(guided >= 1 && guided <= gts.len());
    assert_eq!(with.len(), aug.anchors.len() + guided);
    assert!(with.is_sorted());
}

/// With the anchor set held fixed, finite differences of the sampled loss
/// agree with the returned gradients: nothing flows through augmentation.
#[test]
fn gradients_treat_anchors_as_constants() {
    let (cfg, scene, mut heads) = scene_and_heads();
    // zero-feature patches would otherwise put pre-activations exactly on the ReLU kink
    for p in &mut heads.params {
        for (i, b) in p.hidden.bias.iter_mut().enumerate() {
            *b = if i % 2 == 0 { 0.05 } else { -0.05 };
        }
    }
    let aug = augment(&scene, &heads, &cfg.pipeline).unwrap();
    let anchors = anchor_guided_append(
        &aug.anchors,
        &aug.grid,
        &scene.gt_boxes(),
        scene.width,
        scene.height,
    );
    let run = |h: &HeadSet| {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        compute_gradients(&scene, h, &anchors, &cfg.pipeline, &cfg.loss, &mut rng)
            .unwrap()
            .unwrap()
    };
    let batch = run(&heads);
    assert!(batch.record.positives > 0);
    let step = 1e-5;
    for set in 0..heads.params.len() {
        for (t, i) in [
            (0usize, 3usize),
            (0, 40),
            (1, 2),
            (2, 5),
            (3, 0),
            (4, 17),
            (5, 1),
        ] {
            let mut plus = heads.clone();
            plus.params[set].tensors_mut()[t][i] += step;
            let mut minus = heads.clone();
            minus.params[set].tensors_mut()[t][i] -= step;
            let numeric =
                (run(&plus).record.loss.total - run(&minus).record.loss.total) / (2.0 * step);
            let analytic = batch.grads[set].tensors()[t][i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(
                rel < 1e-4,
                "set {set} tensor {t} index {i}: {analytic} vs {numeric}"
            );
        }
    }
}

#[test]
fn one_scene_can_be_memorised() {
    let (cfg, scene, mut heads) = scene_and_heads();
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut losses = Vec::new();
    for _ in 0..200 {
        if let StepOutcome::Trained(r) = train_step(
            &scene,
            &mut heads,
            &cfg.pipeline,
            &cfg.loss,
            &mut opt,
            &mut rng,
        )
        .unwrap()
        {
            losses.push(r.loss.total);
        }
    }
    assert!(losses.len() > 150);
    let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = losses[losses.len() - 20..].iter().sum::<f64>() / 20.0;
    assert!(tail < 0.5 * head, "{head} -> {tail}");
}

#[test]
fn zero_iterations_saves_the_initial_heads() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.iterations = 0;
    let out = cmd_train(&cfg).unwrap();
    assert_eq!(load_checkpoint(&out.checkpoint).unwrap(), init_heads(&cfg));
    assert_eq!(out.doc.em_curve.len(), 1);
    assert!(out.doc.loss_curve.is_empty());
}

#[test]
fn single_stage_selection_runs() {
    let (mut cfg, scene, heads) = scene_and_heads();
    cfg.pipeline.single_stage_selection = true;
    assert_eq!(cfg.pipeline.final_nms_threshold(), 0.6);
    let aug = augment(&scene, &heads, &cfg.pipeline).unwrap();
    assert!(aug.anchors.len() <= cfg.pipeline.post_nms_keep);
    assert!(aug.anchors.is_sorted());
    let props = infer(&scene, &heads, &cfg.pipeline).unwrap();
    assert!(!props.is_empty());
}

#[test]
fn shared_parameters_train() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.pipeline.share_params = true;
    let out = cmd_train(&cfg).unwrap();
    assert_eq!(out.heads.params.len(), 1);
    assert_eq!(out.heads.len(), 2);
}

#[test]
fn eval_rejects_a_checkpoint_of_another_shape() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let out = cmd_train(&cfg).unwrap();
    let doc = cmd_eval(&cfg, &out.checkpoint).unwrap();
    assert_eq!(doc.get("eval.ar100.ar"), out.doc.get("eval.ar100.ar"));

    let mut other = cfg.clone();
    other.mid_channels = 8;
    let err = cmd_eval(&other, &out.checkpoint).unwrap_err();
    assert!(matches!(err, CommandError::CheckpointMismatch(_)), "{err}");
    let mut other = cfg.clone();
    other.pipeline.dilations = vec![1, 2, 3];
    assert!(cmd_eval(&other, &out.checkpoint).is_err());
}
