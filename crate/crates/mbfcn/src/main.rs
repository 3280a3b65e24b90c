use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, Command};
use rayon::prelude::*;

use mbfcn::config::{parse_config_file, serialize_config};
use mbfcn::data::{
    image_id_of, load_image_for, parse_annotations, read_detections, read_image, synth_generate,
    write_detections, AnnotationFormat, AnnotationRecord, load_checkpoint,
};
use mbfcn::error::{Error, Result};
use mbfcn::eval::{detect, detect_pyramid, evaluate, pr_curve_text, precision_at_fp, Detection,
    SubsetRule};
use mbfcn::data::SyntheticSpec;
use mbfcn::gradcheck;
use mbfcn::training::train;

fn cli() -> Command {
    Command::new("mbfcn")
        .about("Multi-branch fully convolutional face detector")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            Command::new("synth")
                .about("Generate the deterministic synthetic dataset")
                .arg(Arg::new("out").long("out").required(true))
                .arg(Arg::new("count").long("count").required(true))
                .arg(Arg::new("seed").long("seed").required(true))
                .arg(Arg::new("size").long("size").default_value("128")),
        )
        .subcommand(
            Command::new("train")
                .about("Train a model described by a config file")
                .arg(Arg::new("config").long("config").required(true))
                .arg(Arg::new("data").long("data").required(true))
                .arg(Arg::new("out").long("out").required(true))
                .arg(Arg::new("seed").long("seed").required(false)),
        )
        .subcommand(
            Command::new("detect")
                .about("Run detection over a directory of images")
                .arg(Arg::new("model").long("model").required(true))
                .arg(Arg::new("images").long("images").required(true))
                .arg(Arg::new("out").long("out").required(true))
                .arg(Arg::new("scales").long("scales"))
                .arg(Arg::new("score-thresh").long("score-thresh").default_value("0.05"))
                .arg(Arg::new("nms-thresh").long("nms-thresh").default_value("0.3")),
        )
        .subcommand(
            Command::new("eval")
                .about("Score a detection file against ground truth")
                .arg(Arg::new("det").long("det").required(true))
                .arg(Arg::new("gt").long("gt").required(true))
                .arg(Arg::new("subset").long("subset").default_value("all"))
                .arg(Arg::new("fp").long("fp"))
                .arg(Arg::new("pr-out").long("pr-out"))
                .arg(Arg::new("format").long("format").default_value("internal")),
        )
        .subcommand(
            Command::new("ablate")
                .about("Train and evaluate several configs under a shared seed")
                .arg(Arg::new("data").long("data").required(true))
                .arg(Arg::new("configs").long("configs").required(true))
                .arg(Arg::new("out").long("out").required(true))
                .arg(Arg::new("seed").long("seed")),
        )
        .subcommand(
            Command::new("gradcheck")
                .about("Verify analytic gradients against finite differences"),
        )
        .subcommand(
            Command::new("version").hide(true).about("Print the version"),
        )
        .disable_help_subcommand(true)
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse::<T>()
        .map_err(|_| Error::Config(format!("bad {what} '{s}'")))
}

/// All .ppm/.pgm files under `dir`, sorted by path for stable output.
fn scan_images(dir: &Path) -> Result<Vec<PathBuf>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(&path, out)?;
            } else if matches!(
                path.extension().and_then(|e| e.to_str()),
                Some("ppm") | Some("pgm")
            ) {
                out.push(path);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, &mut files)?;
    files.sort();
    if files.is_empty() {
        return Err(Error::Input(format!(
            "no .ppm/.pgm images under {}",
            dir.display()
        )));
    }
    Ok(files)
}

fn cmd_synth(m: &clap::ArgMatches) -> Result<()> {
    let spec = SyntheticSpec {
        image_size: parse_num(m.get_one::<String>("size").unwrap(), "size")?,
        seed: parse_num(m.get_one::<String>("seed").unwrap(), "seed")?,
        count: parse_num(m.get_one::<String>("count").unwrap(), "count")?,
        ..Default::default()
    };
    let out = PathBuf::from(m.get_one::<String>("out").unwrap());
    let records = synth_generate(&spec, &out)?;
    let faces: usize = records.iter().map(|r| r.boxes.len()).sum();
    println!(
        "wrote {} images ({} faces) under {}",
        records.len(),
        faces,
        out.display()
    );
    Ok(())
}

fn cmd_train(m: &clap::ArgMatches) -> Result<()> {
    let config_path = PathBuf::from(m.get_one::<String>("config").unwrap());
    let (model_cfg, mut train_cfg) = parse_config_file(&config_path)?;
    if let Some(seed) = m.get_one::<String>("seed") {
        train_cfg.seed = parse_num(seed, "seed")?;
    }
    let data = PathBuf::from(m.get_one::<String>("data").unwrap());
    let records = parse_annotations(&data.join("annotations.txt"), AnnotationFormat::Internal)?;
    let out = PathBuf::from(m.get_one::<String>("out").unwrap());
    let config_text = serialize_config(&model_cfg, &train_cfg);

    let mut print_row = |row: &mbfcn::training::LossReport| println!("{}", row.log_line());
    let (params, _) = train(
        &records,
        &data,
        &model_cfg,
        &train_cfg,
        Some((&out, &config_text)),
        Some(&mut print_row),
    )?;
    mbfcn::data::save_checkpoint(&params, &config_text, &out)?;
    println!("saved checkpoint to {}", out.display());
    Ok(())
}

fn detect_directory(
    model_path: &Path,
    images_dir: &Path,
    scales: Option<Vec<f32>>,
    score_thresh: f32,
    nms_thresh: f32,
) -> Result<BTreeMap<String, Vec<Detection>>> {
    let (params, config_text) = load_checkpoint(model_path)?;
    let (model_cfg, train_cfg) =
        mbfcn::config::parse_config(&config_text, &model_path.display().to_string())?;
    params.validate_against(&model_cfg)?;

    let files = scan_images(images_dir)?;
    // Images are independent; results merge by sorted image id.
    let dets: Result<Vec<(String, Vec<Detection>)>> = files
        .par_iter()
        .map(|path| {
            let image = read_image(path)?;
            let id = image_id_of(&path.display().to_string());
            let dets = match &scales {
                Some(scales) => detect_pyramid(
                    &image,
                    &model_cfg,
                    &params,
                    train_cfg.max_side,
                    scales,
                    score_thresh,
                    nms_thresh,
                    &id,
                )?,
                None => detect(
                    &image,
                    &model_cfg,
                    &params,
                    train_cfg.max_side,
                    score_thresh,
                    nms_thresh,
                    &id,
                )?,
            };
            Ok((id, dets))
        })
        .collect();
    Ok(dets?.into_iter().collect())
}

fn cmd_detect(m: &clap::ArgMatches) -> Result<()> {
    let scales = match m.get_one::<String>("scales") {
        Some(s) => Some(
            s.split(',')
                .map(|tok| parse_num::<f32>(tok.trim(), "scale"))
                .collect::<Result<Vec<f32>>>()?,
        ),
        None => None,
    };
    let by_image = detect_directory(
        Path::new(m.get_one::<String>("model").unwrap()),
        Path::new(m.get_one::<String>("images").unwrap()),
        scales,
        parse_num(m.get_one::<String>("score-thresh").unwrap(), "score threshold")?,
        parse_num(m.get_one::<String>("nms-thresh").unwrap(), "NMS threshold")?,
    )?;
    let out = PathBuf::from(m.get_one::<String>("out").unwrap());
    write_detections(&out, &by_image)?;
    let total: usize = by_image.values().map(|v| v.len()).sum();
    println!("wrote {} detections for {} images", total, by_image.len());
    Ok(())
}

fn gts_by_image(records: &[AnnotationRecord]) -> BTreeMap<String, Vec<mbfcn::BBox>> {
    records
        .iter()
        .map(|r| (r.image_id.clone(), r.boxes.clone()))
        .collect()
}

fn cmd_eval(m: &clap::ArgMatches) -> Result<()> {
    let dets = read_detections(Path::new(m.get_one::<String>("det").unwrap()))?;
    let format = AnnotationFormat::parse(m.get_one::<String>("format").unwrap())?;
    let records = parse_annotations(Path::new(m.get_one::<String>("gt").unwrap()), format)?;
    let rule = SubsetRule::parse(m.get_one::<String>("subset").unwrap())?;
    let curve = evaluate(&dets, &gts_by_image(&records), rule);
    println!("AP={:.6}", curve.ap);
    if let Some(fp) = m.get_one::<String>("fp") {
        let n_fp: usize = parse_num(fp, "false-positive budget")?;
        if n_fp == 0 {
            return Err(Error::Config("--fp must be >= 1".into()));
        }
        let (p, r) = precision_at_fp(&curve.outcomes, n_fp, curve.n_gt);
        println!("P@{n_fp}fp={p:.6}");
        println!("R@{n_fp}fp={r:.6}");
    }
    if let Some(path) = m.get_one::<String>("pr-out") {
        std::fs::write(path, pr_curve_text(&curve))?;
    }
    Ok(())
}

fn cmd_ablate(m: &clap::ArgMatches) -> Result<()> {
    let data = PathBuf::from(m.get_one::<String>("data").unwrap());
    let train_dir = data.join("train");
    let val_dir = data.join("val");
    let train_records =
        parse_annotations(&train_dir.join("annotations.txt"), AnnotationFormat::Internal)?;
    let val_records =
        parse_annotations(&val_dir.join("annotations.txt"), AnnotationFormat::Internal)?;
    let shared_seed = match m.get_one::<String>("seed") {
        Some(s) => Some(parse_num::<u64>(s, "seed")?),
        None => None,
    };

    let gts = gts_by_image(&val_records);
    let mut report = String::from("config\teasy\tmedium\thard\n");
    for config_arg in m.get_one::<String>("configs").unwrap().split(',') {
        let config_path = PathBuf::from(config_arg.trim());
        let name = config_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| config_arg.trim().to_string());
        let (model_cfg, mut train_cfg) = parse_config_file(&config_path)?;
        if let Some(seed) = shared_seed {
            train_cfg.seed = seed;
        }
        let (params, _) = train(&train_records, &train_dir, &model_cfg, &train_cfg, None, None)?;

        let dets: Result<Vec<(String, Vec<Detection>)>> = val_records
            .par_iter()
            .map(|rec| {
                let image = load_image_for(&val_dir, &rec.image_path)?;
                let dets = detect(
                    &image,
                    &model_cfg,
                    &params,
                    train_cfg.max_side,
                    0.05,
                    0.3,
                    &rec.image_id,
                )?;
                Ok((rec.image_id.clone(), dets))
            })
            .collect();
        let by_image: BTreeMap<String, Vec<Detection>> = dets?.into_iter().collect();

        let mut row = name;
        for rule in [SubsetRule::easy(), SubsetRule::medium(), SubsetRule::hard()] {
            let curve = evaluate(&by_image, &gts, rule);
            row.push_str(&format!("\t{:.6}", curve.ap));
        }
        println!("{row}");
        report.push_str(&row);
        report.push('\n');
    }
    std::fs::write(m.get_one::<String>("out").unwrap(), report)?;
    Ok(())
}

fn cmd_gradcheck() -> Result<()> {
    let results = gradcheck::run_suite(0, 100);
    let mut worst = 0.0f64;
    let mut all_pass = true;
    for r in &results {
        worst = worst.max(r.max_rel_err);
        all_pass &= r.passed();
        println!(
            "{:<28} max_rel_err={:.3e}  tol={:.0e}  {}",
            r.name,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    println!("gradcheck max relative error: {worst:.3e}");
    if all_pass {
        Ok(())
    } else {
        Err(Error::Numeric(
            "analytic gradients disagree with finite differences".into(),
        ))
    }
}

fn run() -> Result<()> {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            // Usage/parse problems exit 1; --help/--version exit 0.
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            eprint!("{e}");
            std::process::exit(1);
        }
    };
    match matches.subcommand() {
        Some(("synth", m)) => cmd_synth(m),
        Some(("train", m)) => cmd_train(m),
        Some(("detect", m)) => cmd_detect(m),
        Some(("eval", m)) => cmd_eval(m),
        Some(("ablate", m)) => cmd_ablate(m),
        Some(("gradcheck", _)) => cmd_gradcheck(),
        Some(("version", _)) => {
            println!("mbfcn {}", env!("CARGO_PKG_VERSION"));
            Ok(())
        }
        _ => unreachable!("subcommand required"),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
