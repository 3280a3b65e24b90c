//! Line-oriented `key = value` configuration with dotted keys and `#`
//! comments. One file describes exactly one (ModelConfig, TrainConfig) pair;
//! omitted keys take the documented defaults, unknown keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{BranchConfig, ModelConfig, SourceLayer};
use crate::training::TrainConfig;

fn err(file: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_string(),
        line,
        msg: msg.into(),
    }
}

fn parse_list<T: std::str::FromStr>(value: &str) -> std::result::Result<Vec<T>, String> {
    value
        .split(',')
        .map(|tok| {
            let tok = tok.trim();
            tok.parse::<T>().map_err(|_| format!("bad value '{tok}'"))
        })
        .collect()
}

/// Parses config text. `source` names the file in error messages.
pub fn parse_config(text: &str, source: &str) -> Result<(ModelConfig, TrainConfig)> {
    let mut model = ModelConfig::default();
    let mut train = TrainConfig::default();
    // branch idx -> (line, field map); an explicit branch list replaces the
    // default branches wholesale.
    let mut branch_fields: BTreeMap<usize, BTreeMap<String, (usize, String)>> = BTreeMap::new();

    for (ln, raw) in text.lines().enumerate() {
        let line_no = ln + 1;
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(source, line_no, format!("expected 'key = value', got '{line}'")))?;
        let key = key.trim();
        let value = value.trim();
        let fail = |msg: String| err(source, line_no, format!("key '{key}': {msg}"));

        match key {
            "backbone.widths" => {
                let widths: Vec<usize> = parse_list(value).map_err(&fail)?;
                if widths.len() != 4 {
                    return Err(fail(format!("expected 4 stage widths, got {}", widths.len())));
                }
                model.backbone.widths = [widths[0], widths[1], widths[2], widths[3]];
            }
            "backbone.convs_per_stage" => {
                model.backbone.convs_per_stage = value.parse().map_err(|_| fail("bad count".into()))?;
            }
            "backbone.kernel" => {
                model.backbone.kernel = value.parse().map_err(|_| fail("bad count".into()))?;
            }
            "train.base_lr" => train.base_lr = value.parse().map_err(|_| fail("bad real".into()))?,
            "train.lr_decay_every" => {
                train.lr_decay_every = value.parse().map_err(|_| fail("bad count".into()))?
            }
            "train.lr_decay_factor" => {
                train.lr_decay_factor = value.parse().map_err(|_| fail("bad real".into()))?
            }
            "train.max_iters" => {
                train.max_iters = value.parse().map_err(|_| fail("bad count".into()))?
            }
            "train.momentum" => train.momentum = value.parse().map_err(|_| fail("bad real".into()))?,
            "train.weight_decay" => {
                train.weight_decay = value.parse().map_err(|_| fail("bad real".into()))?
            }
            "train.batch_per_branch" => {
                train.batch_per_branch = value.parse().map_err(|_| fail("bad count".into()))?
            }
            "train.pos_iou" => train.pos_iou = value.parse().map_err(|_| fail("bad real".into()))?,
            "train.neg_iou" => train.neg_iou = value.parse().map_err(|_| fail("bad real".into()))?,
            "train.flip_prob" => {
                train.flip_prob = value.parse().map_err(|_| fail("bad real".into()))?
            }
            "train.max_side" => {
                train.max_side = value.parse().map_err(|_| fail("bad count".into()))?
            }
            "train.lambda" => train.lambda = parse_list(value).map_err(&fail)?,
            "train.gamma" => train.gamma = parse_list(value).map_err(&fail)?,
            "train.seed" => train.seed = value.parse().map_err(|_| fail("bad seed".into()))?,
            "train.log_every" => {
                train.log_every = value.parse().map_err(|_| fail("bad count".into()))?
            }
            _ => {
                let Some(rest) = key.strip_prefix("branch.") else {
                    return Err(err(source, line_no, format!("unknown key '{key}'")));
                };
                let (idx_str, field) = rest
                    .split_once('.')
                    .ok_or_else(|| err(source, line_no, format!("unknown key '{key}'")))?;
                let idx: usize = idx_str
                    .parse()
                    .map_err(|_| err(source, line_no, format!("bad branch index '{idx_str}'")))?;
                if idx == 0 {
                    return Err(err(source, line_no, "branch indices start at 1".to_string()));
                }
                if !matches!(
                    field,
                    "sources" | "stride" | "head_dim" | "anchor_sizes" | "anchor_ratios"
                ) {
                    return Err(err(source, line_no, format!("unknown key '{key}'")));
                }
                branch_fields
                    .entry(idx)
                    .or_default()
                    .insert(field.to_string(), (line_no, value.to_string()));
            }
        }
    }

    if !branch_fields.is_empty() {
        let mut branches = Vec::with_capacity(branch_fields.len());
        let mut expected = 1usize;
        for (&idx, fields) in &branch_fields {
            if idx != expected {
                return Err(Error::Config(format!(
                    "{source}: branch indices must be contiguous from 1; missing branch.{expected}"
                )));
            }
            expected += 1;

            let take = |name: &str| -> Result<(usize, String)> {
                fields.get(name).cloned().ok_or_else(|| {
                    Error::Config(format!("{source}: branch.{idx} is missing '{name}'"))
                })
            };
            let (ln, sources_str) = take("sources")?;
            let sources = sources_str
                .split(',')
                .map(|s| SourceLayer::parse(s))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| err(source, ln, e.to_string()))?;
            let (ln, stride_str) = take("stride")?;
            let target_stride: usize = stride_str
                .parse()
                .map_err(|_| err(source, ln, format!("bad stride '{stride_str}'")))?;
            let (ln, sizes_str) = take("anchor_sizes")?;
            let anchor_sizes: Vec<f32> =
                parse_list(&sizes_str).map_err(|m| err(source, ln, m))?;

            let mut branch = BranchConfig::new(sources, target_stride, anchor_sizes);
            if let Some((ln, v)) = fields.get("head_dim") {
                branch.head_dim = v
                    .parse()
                    .map_err(|_| err(source, *ln, format!("bad head_dim '{v}'")))?;
            }
            if let Some((ln, v)) = fields.get("anchor_ratios") {
                branch.anchor_ratios = parse_list(v).map_err(|m| err(source, *ln, m))?;
            }
            branches.push(branch);
        }
        model.branches = branches;
    }

    model.validate()?;
    train.validate()?;
    Ok((model, train))
}

pub fn parse_config_file(path: &Path) -> Result<(ModelConfig, TrainConfig)> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text, &path.display().to_string())
}

fn fmt_f32_list(vals: &[f32]) -> String {
    vals.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn fmt_f64_list(vals: &[f64]) -> String {
    vals.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Canonical text form; `parse_config` of the output reproduces the inputs.
/// This is what checkpoints embed.
pub fn serialize_config(model: &ModelConfig, train: &TrainConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "backbone.widths = {}",
        model
            .backbone
            .widths
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",")
    );
    let _ = writeln!(s, "backbone.convs_per_stage = {}", model.backbone.convs_per_stage);
    let _ = writeln!(s, "backbone.kernel = {}", model.backbone.kernel);
    for (bi, b) in model.branches.iter().enumerate() {
        let idx = bi + 1;
        let sources = b
            .sources
            .iter()
            .map(|l| l.name().to_string())
            .collect::<Vec<_>>()
            .join(",");
        let _ = writeln!(s, "branch.{idx}.sources = {sources}");
        let _ = writeln!(s, "branch.{idx}.stride = {}", b.target_stride);
        let _ = writeln!(s, "branch.{idx}.head_dim = {}", b.head_dim);
        let _ = writeln!(s, "branch.{idx}.anchor_sizes = {}", fmt_f32_list(&b.anchor_sizes));
        let _ = writeln!(s, "branch.{idx}.anchor_ratios = {}", fmt_f32_list(&b.anchor_ratios));
    }
    let _ = writeln!(s, "train.base_lr = {}", train.base_lr);
    let _ = writeln!(s, "train.lr_decay_every = {}", train.lr_decay_every);
    let _ = writeln!(s, "train.lr_decay_factor = {}", train.lr_decay_factor);
    let _ = writeln!(s, "train.max_iters = {}", train.max_iters);
    let _ = writeln!(s, "train.momentum = {}", train.momentum);
    let _ = writeln!(s, "train.weight_decay = {}", train.weight_decay);
    let _ = writeln!(s, "train.batch_per_branch = {}", train.batch_per_branch);
    let _ = writeln!(s, "train.pos_iou = {}", train.pos_iou);
    let _ = writeln!(s, "train.neg_iou = {}", train.neg_iou);
    let _ = writeln!(s, "train.flip_prob = {}", train.flip_prob);
    let _ = writeln!(s, "train.max_side = {}", train.max_side);
    let _ = writeln!(s, "train.lambda = {}", fmt_f64_list(&train.lambda));
    let _ = writeln!(s, "train.gamma = {}", fmt_f64_list(&train.gamma));
    let _ = writeln!(s, "train.seed = {}", train.seed);
    let _ = writeln!(s, "train.log_every = {}", train.log_every);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let (model, train) = parse_config("", "test").unwrap();
        assert_eq!(model, ModelConfig::default());
        assert_eq!(train, TrainConfig::default());
    }

    #[test]
    fn comments_and_overrides() {
        let text = "\
# toy run
train.base_lr = 0.002  # doubled
train.seed = 9

branch.1.sources = C4,C5
branch.1.stride = 16
branch.1.anchor_sizes = 16,32,64
";
        let (model, train) = parse_config(text, "test").unwrap();
        assert_eq!(train.base_lr, 0.002);
        assert_eq!(train.seed, 9);
        assert_eq!(model.branches.len(), 1);
        assert_eq!(model.branches[0].target_stride, 16);
        assert_eq!(
            model.branches[0].sources,
            vec![SourceLayer::C4, SourceLayer::C5]
        );
        // Defaults fill the unspecified branch fields.
        assert_eq!(model.branches[0].head_dim, 64);
        assert_eq!(model.branches[0].anchor_ratios, vec![1.0]);
    }

    #[test]
    fn unknown_key_is_an_error_with_location() {
        match parse_config("train.typo = 3\n", "cfg.conf") {
            Err(Error::Parse { file, line, msg }) => {
                assert_eq!(file, "cfg.conf");
                assert_eq!(line, 1);
                assert!(msg.contains("train.typo"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(parse_config("branch.1.typo = 3\n", "c").is_err());
        assert!(parse_config("just some text\n", "c").is_err());
    }

    #[test]
    fn missing_branch_field_and_gaps() {
        let text = "branch.1.sources = C4\nbranch.1.stride = 16\n";
        assert!(parse_config(text, "c").is_err()); // no anchor_sizes
        let text = "branch.2.sources = C4\nbranch.2.stride = 16\nbranch.2.anchor_sizes = 32\n";
        assert!(parse_config(text, "c").is_err()); // starts at 2
    }

    #[test]
    fn serialize_parse_roundtrip() {
        let model = ModelConfig::default();
        let mut train = TrainConfig::default();
        train.seed = 1234;
        train.lambda = vec![2.0, 1.5];
        let text = serialize_config(&model, &train);
        let (m2, t2) = parse_config(&text, "roundtrip").unwrap();
        assert_eq!(m2, model);
        assert_eq!(t2, train);
    }
}
