//! Python bindings over the core detector: tensor ops, box geometry,
//! anchors and matching, evaluation metrics, the synthetic dataset, and
//! train/detect entry points.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use mbfcn::anchors::{self, BBox};
use mbfcn::config::{parse_config, serialize_config};
use mbfcn::data;
use mbfcn::error::Error;
use mbfcn::eval;
use mbfcn::loss;
use mbfcn::tensor::Tensor;
use mbfcn::training;

fn to_py_err(e: Error) -> PyErr {
    match &e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn bbox(t: (f32, f32, f32, f32)) -> BBox {
    BBox::new(t.0, t.1, t.2, t.3)
}

/// Intersection-over-union of two (x, y, w, h) boxes.
#[pyfunction]
fn iou(a: (f32, f32, f32, f32), b: (f32, f32, f32, f32)) -> f32 {
    anchors::iou(&bbox(a), &bbox(b))
}

/// Regression target of a ground-truth box against an anchor.
#[pyfunction]
fn encode_box(
    gt: (f32, f32, f32, f32),
    anchor: (f32, f32, f32, f32),
) -> PyResult<(f32, f32, f32, f32)> {
    let t = anchors::encode(&bbox(gt), &bbox(anchor)).map_err(to_py_err)?;
    Ok((t[0], t[1], t[2], t[3]))
}

/// Inverse of `encode_box`.
#[pyfunction]
fn decode_box(
    anchor: (f32, f32, f32, f32),
    t: (f32, f32, f32, f32),
) -> (f32, f32, f32, f32) {
    let b = anchors::decode(&bbox(anchor), [t.0, t.1, t.2, t.3]);
    (b.x, b.y, b.w, b.h)
}

/// Smooth-L1 of a scalar.
#[pyfunction]
fn smooth_l1(x: f64) -> f64 {
    loss::smooth_l1(x)
}

/// Negative log-likelihood classification loss.
#[pyfunction]
fn cls_loss(prob_face: f64, label: u8) -> f64 {
    loss::cls_loss(prob_face, label)
}

/// One-dimensional bilinear up-sampling weights for factor `f`.
#[pyfunction]
fn bilinear_filler(f: usize) -> PyResult<Vec<f64>> {
    mbfcn::tensor::bilinear_filler_1d(f).map_err(to_py_err)
}

/// Cross-correlation on flat row-major data. Returns (data, (n, c, h, w)).
#[pyfunction]
#[pyo3(signature = (input, input_shape, weight, weight_shape, bias, stride=1, pad=0, dilation=1))]
#[allow(clippy::too_many_arguments)]
fn conv2d(
    input: Vec<f32>,
    input_shape: (usize, usize, usize, usize),
    weight: Vec<f32>,
    weight_shape: (usize, usize, usize, usize),
    bias: Vec<f32>,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> PyResult<(Vec<f32>, (usize, usize, usize, usize))> {
    let input = Tensor::new(
        [input_shape.0, input_shape.1, input_shape.2, input_shape.3],
        input,
    )
    .map_err(to_py_err)?;
    let weight = Tensor::new(
        [weight_shape.0, weight_shape.1, weight_shape.2, weight_shape.3],
        weight,
    )
    .map_err(to_py_err)?;
    let out = mbfcn::tensor::conv2d(&input, &weight, &bias, stride, pad, dilation)
        .map_err(to_py_err)?;
    let [n, c, h, w] = out.shape();
    Ok((out.data().to_vec(), (n, c, h, w)))
}

/// Greedy NMS over (x, y, w, h, score) tuples; returns the kept tuples in
/// descending score order.
#[pyfunction]
fn nms(
    dets: Vec<(f32, f32, f32, f32, f32)>,
    iou_thresh: f32,
) -> Vec<(f32, f32, f32, f32, f32)> {
    let dets: Vec<eval::Detection> = dets
        .into_iter()
        .map(|(x, y, w, h, score)| eval::Detection {
            bbox: BBox::new(x, y, w, h),
            score,
            branch: 0,
            image_id: String::new(),
        })
        .collect();
    eval::nms(&dets, iou_thresh)
        .into_iter()
        .map(|d| (d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h, d.score))
        .collect()
}

/// All-point interpolated AP over (score, is_tp) outcomes.
#[pyfunction]
fn average_precision(outcomes: Vec<(f32, bool)>, n_gt: usize) -> f64 {
    eval::average_precision(outcomes, n_gt)
}

/// (precision, recall) at the given false-positive budget.
#[pyfunction]
fn precision_at_fp(outcomes: Vec<(f32, bool)>, n_fp: usize, n_gt: usize) -> (f64, f64) {
    eval::precision_at_fp(&outcomes, n_fp, n_gt)
}

/// Anchor grid boxes for one feature map.
#[pyfunction]
fn generate_anchors(
    map_h: usize,
    map_w: usize,
    stride: usize,
    sizes: Vec<f32>,
    ratios: Vec<f32>,
) -> Vec<(f32, f32, f32, f32)> {
    anchors::generate_anchors(map_h, map_w, stride, &sizes, &ratios)
        .boxes
        .iter()
        .map(|b| (b.x, b.y, b.w, b.h))
        .collect()
}

/// Anchor labels against ground truths: +1 positive, -1 negative, 0 ignored.
#[pyfunction]
#[pyo3(signature = (anchor_boxes, gts, pos_iou=0.55, neg_iou=0.35))]
fn match_anchors(
    anchor_boxes: Vec<(f32, f32, f32, f32)>,
    gts: Vec<(f32, f32, f32, f32)>,
    pos_iou: f32,
    neg_iou: f32,
) -> Vec<i8> {
    let set = anchors::AnchorSet {
        stride: 1,
        map_h: 1,
        map_w: anchor_boxes.len().max(1),
        slots: 1,
        boxes: anchor_boxes.into_iter().map(bbox).collect(),
    };
    let gts: Vec<BBox> = gts.into_iter().map(bbox).collect();
    anchors::match_anchors(&set, &gts, pos_iou, neg_iou)
        .labels
        .iter()
        .map(|l| match l {
            anchors::Label::Positive => 1,
            anchors::Label::Negative => -1,
            anchors::Label::Ignored => 0,
        })
        .collect()
}

/// Writes the deterministic synthetic dataset; returns the per-image
/// ground-truth counts.
#[pyfunction]
#[pyo3(signature = (out_dir, count, seed, image_size=128))]
fn synth_generate(out_dir: &str, count: usize, seed: u64, image_size: usize) -> PyResult<Vec<usize>> {
    let spec = data::SyntheticSpec {
        image_size,
        seed,
        count,
        ..Default::default()
    };
    let records = data::synth_generate(&spec, Path::new(out_dir)).map_err(to_py_err)?;
    Ok(records.iter().map(|r| r.boxes.len()).collect())
}

/// Trains from a config string over a dataset directory (with
/// annotations.txt) and writes a checkpoint. Returns per-log-row totals.
#[pyfunction]
fn train(config_text: &str, data_dir: &str, out_ckpt: &str) -> PyResult<Vec<f64>> {
    let (model_cfg, train_cfg) = parse_config(config_text, "<python>").map_err(to_py_err)?;
    let root = PathBuf::from(data_dir);
    let records = data::parse_annotations(
        &root.join("annotations.txt"),
        data::AnnotationFormat::Internal,
    )
    .map_err(to_py_err)?;
    let config_text = serialize_config(&model_cfg, &train_cfg);
    let (params, log) = training::train(
        &records,
        &root,
        &model_cfg,
        &train_cfg,
        Some((Path::new(out_ckpt), &config_text)),
        None,
    )
    .map_err(to_py_err)?;
    data::save_checkpoint(&params, &config_text, Path::new(out_ckpt)).map_err(to_py_err)?;
    Ok(log.rows.iter().map(|r| r.total).collect())
}

/// Runs detection on one image file with a trained checkpoint. Returns
/// (x, y, w, h, score) tuples.
#[pyfunction]
#[pyo3(signature = (ckpt, image_path, score_thresh=0.05, nms_thresh=0.3, scales=None))]
fn detect(
    ckpt: &str,
    image_path: &str,
    score_thresh: f32,
    nms_thresh: f32,
    scales: Option<Vec<f32>>,
) -> PyResult<Vec<(f32, f32, f32, f32, f32)>> {
    let (params, config_text) = data::load_checkpoint(Path::new(ckpt)).map_err(to_py_err)?;
    let (model_cfg, train_cfg) = parse_config(&config_text, ckpt).map_err(to_py_err)?;
    let image = data::read_image(Path::new(image_path)).map_err(to_py_err)?;
    let id = data::image_id_of(image_path);
    let dets = match scales {
        Some(scales) => eval::detect_pyramid(
            &image,
            &model_cfg,
            &params,
            train_cfg.max_side,
            &scales,
            score_thresh,
            nms_thresh,
            &id,
        ),
        None => eval::detect(
            &image,
            &model_cfg,
            &params,
            train_cfg.max_side,
            score_thresh,
            nms_thresh,
            &id,
        ),
    }
    .map_err(to_py_err)?;
    Ok(dets
        .into_iter()
        .map(|d| (d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h, d.score))
        .collect())
}

/// AP per subset for a detection file against an annotation file.
#[pyfunction]
fn evaluate_detections(det_file: &str, gt_file: &str, subset: &str) -> PyResult<f64> {
    let dets = data::read_detections(Path::new(det_file)).map_err(to_py_err)?;
    let records = data::parse_annotations(Path::new(gt_file), data::AnnotationFormat::Internal)
        .map_err(to_py_err)?;
    let rule = eval::SubsetRule::parse(subset).map_err(to_py_err)?;
    let gts: BTreeMap<String, Vec<BBox>> = records
        .into_iter()
        .map(|r| (r.image_id, r.boxes))
        .collect();
    Ok(eval::evaluate(&dets, &gts, rule).ap)
}

#[pymodule]
fn mbfcn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(encode_box, m)?)?;
    m.add_function(wrap_pyfunction!(decode_box, m)?)?;
    m.add_function(wrap_pyfunction!(smooth_l1, m)?)?;
    m.add_function(wrap_pyfunction!(cls_loss, m)?)?;
    m.add_function(wrap_pyfunction!(bilinear_filler, m)?)?;
    m.add_function(wrap_pyfunction!(conv2d, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(precision_at_fp, m)?)?;
    m.add_function(wrap_pyfunction!(generate_anchors, m)?)?;
    m.add_function(wrap_pyfunction!(match_anchors, m)?)?;
    m.add_function(wrap_pyfunction!(synth_generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(detect, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_detections, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
