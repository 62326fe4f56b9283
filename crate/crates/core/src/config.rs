//! Experiment configuration in a line-oriented `key = value` format.
//!
//! `#` starts a comment, blank lines are ignored, every key may appear at most
//! once and omitted keys take their defaults. Lists are comma separated
//! (`dilations = 2, 4`), the kernel is written `3x3`, booleans are
//! `true`/`false`, and `final_nms_iou = auto` picks 0.7 (or 0.6 with
//! `single_stage_selection = true`). [`ExperimentConfig::dump`] writes every key
//! and parses back to an identical configuration.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::head::LossConfig;
use crate::pipeline::PipelineConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}:{line}: {message}")]
    Invalid {
        path: String,
        line: usize,
        message: String,
    },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Parameters of the synthetic scene generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub image_width: u32,
    pub image_height: u32,
    pub strides: Vec<usize>,
    pub in_channels: usize,
    pub boxes_min: usize,
    pub boxes_max: usize,
    /// Range of `sqrt(w * h)` in pixels, sampled log-uniformly.
    pub gt_scale_min: f64,
    pub gt_scale_max: f64,
    /// Range of `w / h`, sampled log-uniformly.
    pub gt_aspect_min: f64,
    pub gt_aspect_max: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_width: 256,
            image_height: 256,
            strides: vec![4, 8, 16, 32],
            in_channels: 8,
            boxes_min: 3,
            boxes_max: 10,
            gt_scale_min: 16.0,
            gt_scale_max: 128.0,
            gt_aspect_min: 0.5,
            gt_aspect_max: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub pipeline: PipelineConfig,
    pub loss: LossConfig,
    pub scene: SceneConfig,
    pub mid_channels: usize,
    pub init_std: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub iterations: usize,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    /// EM diagnostic cadence in iterations.
    pub em_every: usize,
    /// Number of held-out scenes the EM diagnostic averages over.
    pub diag_scenes: usize,
    /// Boxes drawn per panel by the render command.
    pub render_top: usize,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            pipeline: PipelineConfig::default(),
            loss: LossConfig::default(),
            scene: SceneConfig::default(),
            mid_channels: 64,
            init_std: 0.01,
            learning_rate: 2.0,
            momentum: 0.0,
            iterations: 500,
            train_scenes: 64,
            eval_scenes: 32,
            em_every: 50,
            diag_scenes: 8,
            render_top: 25,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse::<T>()
        .map_err(|_| format!("expected a {}, got {v:?}", std::any::type_name::<T>()))
}

fn parse_f64(v: &str) -> Result<f64, String> {
    let x: f64 = parse_num(v)?;
    if !x.is_finite() {
        return Err(format!("expected a finite number, got {v:?}"));
    }
    Ok(x)
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn parse_list(v: &str) -> Result<Vec<usize>, String> {
    v.split(',').map(|s| parse_num::<usize>(s.trim())).collect()
}

fn parse_kernel(v: &str) -> Result<(usize, usize), String> {
    let (m, n) = v
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected a kernel like 3x3, got {v:?}"))?;
    Ok((parse_num(m.trim())?, parse_num(n.trim())?))
}

fn join(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

impl ExperimentConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let p = &mut self.pipeline;
        let s = &mut self.scene;
        match key {
            "seed" => self.seed = parse_num(v)?,
            "kernel" => p.kernel = parse_kernel(v)?,
            "dilations" => p.dilations = parse_list(v)?,
            "share_params" => p.share_params = parse_bool(v)?,
            "pre_nms_top_k" => p.pre_nms_top_k = parse_num(v)?,
            "augment_nms_iou" => p.augment_nms_iou = parse_f64(v)?,
            "post_nms_keep" => p.post_nms_keep = parse_num(v)?,
            "single_stage_selection" => p.single_stage_selection = parse_bool(v)?,
            "final_nms_iou" => {
                p.final_nms_iou = if v == "auto" {
                    None
                } else {
                    Some(parse_f64(v)?)
                }
            }
            "eval_keep" => p.eval_keep = parse_num(v)?,
            "pos_iou" => p.pos_iou = parse_f64(v)?,
            "neg_iou" => p.neg_iou = parse_f64(v)?,
            "batch_size" => p.batch_size = parse_num(v)?,
            "positive_fraction" => p.positive_fraction = parse_f64(v)?,
            "positive_filter_iou" => p.positive_filter_iou = parse_f64(v)?,
            "anchor_guided" => p.anchor_guided = parse_bool(v)?,
            "lambda" => self.loss.lambda = parse_f64(v)?,
            "smooth_l1_beta" => self.loss.beta = parse_f64(v)?,
            "image_width" => s.image_width = parse_num(v)?,
            "image_height" => s.image_height = parse_num(v)?,
            "strides" => s.strides = parse_list(v)?,
            "in_channels" => s.in_channels = parse_num(v)?,
            "boxes_min" => s.boxes_min = parse_num(v)?,
            "boxes_max" => s.boxes_max = parse_num(v)?,
            "gt_scale_min" => s.gt_scale_min = parse_f64(v)?,
            "gt_scale_max" => s.gt_scale_max = parse_f64(v)?,
            "gt_aspect_min" => s.gt_aspect_min = parse_f64(v)?,
            "gt_aspect_max" => s.gt_aspect_max = parse_f64(v)?,
            "mid_channels" => self.mid_channels = parse_num(v)?,
            "init_std" => self.init_std = parse_f64(v)?,
            "learning_rate" => self.learning_rate = parse_f64(v)?,
            "momentum" => self.momentum = parse_f64(v)?,
            "iterations" => self.iterations = parse_num(v)?,
            "train_scenes" => self.train_scenes = parse_num(v)?,
            "eval_scenes" => self.eval_scenes = parse_num(v)?,
            "em_every" => self.em_every = parse_num(v)?,
            "diag_scenes" => self.diag_scenes = parse_num(v)?,
            "render_top" => self.render_top = parse_num(v)?,
            "out_dir" => {
                let v = v.trim_matches('"');
                if v.is_empty() {
                    return Err("out_dir must not be empty".into());
                }
                self.out_dir = PathBuf::from(v)
            }
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Constraint checks. Errors name the offending key.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        let p = &self.pipeline;
        let s = &self.scene;
        p.validate().map_err(|m| {
            let key = if m.contains("kernel") {
                "kernel"
            } else if m.contains("dilations") {
                "dilations"
            } else if m.contains("neg_iou") {
                "pos_iou"
            } else {
                [
                    "pre_nms_top_k",
                    "post_nms_keep",
                    "eval_keep",
                    "batch_size",
                    "augment_nms_iou",
                    "positive_filter_iou",
                    "positive_fraction",
                    "final_nms_iou",
                ]
                .into_iter()
                .find(|k| m.contains(k))
                .unwrap_or("pipeline")
            };
            (key, m)
        })?;
        let check =
            |ok: bool, key: &'static str, msg: String| if ok { Ok(()) } else { Err((key, msg)) };
        check(
            self.loss.lambda > 0.0,
            "lambda",
            format!("lambda must be > 0, got {}", self.loss.lambda),
        )?;
        check(
            self.loss.beta >= 0.0,
            "smooth_l1_beta",
            format!("smooth_l1_beta must be >= 0, got {}", self.loss.beta),
        )?;
        check(
            s.image_width > 0 && s.image_height > 0,
            "image_width",
            "image dimensions must be positive".into(),
        )?;
        check(
            !s.strides.is_empty() && s.strides[0] > 0 && s.strides.windows(2).all(|w| w[0] < w[1]),
            "strides",
            format!(
                "strides must be positive and strictly increasing, got {:?}",
                s.strides
            ),
        )?;
        check(
            s.in_channels >= crate::synth::SIGNAL_CHANNELS,
            "in_channels",
            format!("in_channels must be >= {}", crate::synth::SIGNAL_CHANNELS),
        )?;
        check(
            s.boxes_min >= 1,
            "boxes_min",
            "boxes_min must be >= 1".into(),
        )?;
        check(
            s.boxes_min <= s.boxes_max,
            "boxes_max",
            "boxes_max must be >= boxes_min".into(),
        )?;
        check(
            s.gt_scale_min > 0.0 && s.gt_scale_min <= s.gt_scale_max,
            "gt_scale_max",
            "need 0 < gt_scale_min <= gt_scale_max".into(),
        )?;
        check(
            s.gt_aspect_min > 0.0 && s.gt_aspect_min <= s.gt_aspect_max,
            "gt_aspect_max",
            "need 0 < gt_aspect_min <= gt_aspect_max".into(),
        )?;
        check(
            s.gt_scale_max * s.gt_aspect_max.sqrt() <= s.image_width as f64
                && s.gt_scale_max / s.gt_aspect_min.sqrt() <= s.image_height as f64,
            "gt_scale_max",
            "largest ground-truth box does not fit in the image".into(),
        )?;
        check(
            self.mid_channels >= 1,
            "mid_channels",
            "mid_channels must be >= 1".into(),
        )?;
        check(
            self.init_std >= 0.0,
            "init_std",
            "init_std must be >= 0".into(),
        )?;
        check(
            self.learning_rate >= 0.0,
            "learning_rate",
            "learning_rate must be >= 0".into(),
        )?;
        check(
            (0.0..1.0).contains(&self.momentum),
            "momentum",
            "momentum must lie in [0, 1)".into(),
        )?;
        check(
            self.train_scenes >= 1,
            "train_scenes",
            "train_scenes must be >= 1".into(),
        )?;
        check(
            self.eval_scenes >= 1,
            "eval_scenes",
            "eval_scenes must be >= 1".into(),
        )?;
        check(
            self.em_every >= 1,
            "em_every",
            "em_every must be >= 1".into(),
        )?;
        check(
            self.diag_scenes >= 1 && self.diag_scenes <= self.eval_scenes,
            "diag_scenes",
            "diag_scenes must lie in 1..=eval_scenes".into(),
        )?;
        Ok(())
    }

    /// Parses configuration text; `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let err = |line: usize, message: String| ConfigError::Invalid {
            path: origin.to_string(),
            line,
            message,
        };
        let mut cfg = Self::default();
        let mut seen: HashMap<String, usize> = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(line_no, format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if let Some(prev) = seen.insert(key.to_string(), line_no) {
                return Err(err(
                    line_no,
                    format!("duplicate key {key:?} (first set on line {prev})"),
                ));
            }
            cfg.set(key, value)
                .map_err(|m| err(line_no, format!("{key}: {m}")))?;
        }
        cfg.validate()
            .map_err(|(key, m)| err(seen.get(key).copied().unwrap_or(0), m))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Every key in a fixed order.
    pub fn dump(&self) -> String {
        let p = &self.pipeline;
        let s = &self.scene;
        let mut o = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(o, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("kernel", format!("{}x{}", p.kernel.0, p.kernel.1));
        kv("dilations", join(&p.dilations));
        kv("share_params", p.share_params.to_string());
        kv("pre_nms_top_k", p.pre_nms_top_k.to_string());
        kv("augment_nms_iou", p.augment_nms_iou.to_string());
        kv("post_nms_keep", p.post_nms_keep.to_string());
        kv(
            "single_stage_selection",
            p.single_stage_selection.to_string(),
        );
        kv(
            "final_nms_iou",
            p.final_nms_iou
                .map_or("auto".to_string(), |v| v.to_string()),
        );
        kv("eval_keep", p.eval_keep.to_string());
        kv("pos_iou", p.pos_iou.to_string());
        kv("neg_iou", p.neg_iou.to_string());
        kv("batch_size", p.batch_size.to_string());
        kv("positive_fraction", p.positive_fraction.to_string());
        kv("positive_filter_iou", p.positive_filter_iou.to_string());
        kv("anchor_guided", p.anchor_guided.to_string());
        kv("lambda", self.loss.lambda.to_string());
        kv("smooth_l1_beta", self.loss.beta.to_string());
        kv("image_width", s.image_width.to_string());
        kv("image_height", s.image_height.to_string());
        kv("strides", join(&s.strides));
        kv("in_channels", s.in_channels.to_string());
        kv("boxes_min", s.boxes_min.to_string());
        kv("boxes_max", s.boxes_max.to_string());
        kv("gt_scale_min", s.gt_scale_min.to_string());
        kv("gt_scale_max", s.gt_scale_max.to_string());
        kv("gt_aspect_min", s.gt_aspect_min.to_string());
        kv("gt_aspect_max", s.gt_aspect_max.to_string());
        kv("mid_channels", self.mid_channels.to_string());
        kv("init_std", self.init_std.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("momentum", self.momentum.to_string());
        kv("iterations", self.iterations.to_string());
        kv("train_scenes", self.train_scenes.to_string());
        kv("eval_scenes", self.eval_scenes.to_string());
        kv("em_every", self.em_every.to_string());
        kv("diag_scenes", self.diag_scenes.to_string());
        kv("render_top", self.render_top.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        o
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::parse("", "mem").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.pipeline.dilations, vec![2, 4]);
        assert_eq!(cfg.loss.lambda, 5.0);
        assert_eq!(cfg.pipeline.post_nms_keep, 2000);
        assert_eq!((cfg.pipeline.pos_iou, cfg.pipeline.neg_iou), (0.7, 0.3));
    }

    #[test]
    fn negative_lambda_is_rejected_with_line() {
        let e = ExperimentConfig::parse("# c\nseed = 1\nlambda = -1\n", "x.cfg").unwrap_err();
        let msg = e.to_string();
        assert!(msg.starts_with("x.cfg:3:"), "{msg}");
        assert!(msg.contains("lambda"), "{msg}");
    }

    #[test]
    fn syntax_errors_name_the_line() {
        for (text, line) in [
            ("seed = 1\nbogus = 2", 2),
            ("seed = x", 1),
            ("\n\nkernel = 3", 3),
            ("seed = 1\nseed = 2", 2),
            ("dilations = 2, four", 1),
            ("no equals sign", 1),
            ("single_stage_selection = yes", 1),
        ] {
            match ExperimentConfig::parse(text, "f") {
                Err(ConfigError::Invalid { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn dump_roundtrips() {
        let mut cfg = ExperimentConfig::default();
        cfg.pipeline.dilations = vec![2, 3, 4];
        cfg.pipeline.final_nms_iou = Some(0.65);
        cfg.pipeline.single_stage_selection = true;
        cfg.learning_rate = 0.123456789;
        cfg.out_dir = PathBuf::from("runs/a");
        let back = ExperimentConfig::parse(&cfg.dump(), "dump").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.dump(), cfg.dump());
    }

    #[test]
    fn comments_and_whitespace() {
        let cfg =
            ExperimentConfig::parse("  dilations=3 # one head\n\nkernel = 3x5\n", "f").unwrap();
        assert_eq!(cfg.pipeline.dilations, vec![3]);
        assert_eq!(cfg.pipeline.kernel, (3, 5));
    }
}
