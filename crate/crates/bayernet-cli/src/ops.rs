//! Command implementations. Every command writes a `manifest.txt` into its
//! output directory echoing the effective configuration, so a run can be
//! reproduced from the manifest alone.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use bayernet::bayer::{mosaic, BayerImage};
use bayernet::config::RunConfig;
use bayernet::evalmatch::{
    describe_image, detect_image, match_bruteforce, repeatability, DescMatrix, DetectionParams, Keypoint,
    EvalImage, MetricsOptions, PairObservation,
};
use bayernet::geometry::TransformFamily;
use bayernet::network::{init_params, load_checkpoint, save_checkpoint, NetworkConfig, ParamStore};
use bayernet::train::{
    generate_synthetic, train_descriptor, train_detector, train_detector_adapted, TrainEpoch,
};
use bayernet::{Error, Result};

use crate::dataset::{load_scene, scene_dirs, Scene};
use crate::viz::{MatchLine, Panel, GREEN, RED, YELLOW};
use crate::{EvalTask, TrainPhase};

fn ensure_out_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)?;
    Ok(())
}

fn write_manifest(out: &Path, sections: &[(&str, String)]) -> Result<()> {
    let mut text = String::new();
    for (key, value) in sections {
        if value.contains('\n') {
            let _ = writeln!(text, "[{key}]");
            text.push_str(value);
            if !value.ends_with('\n') {
                text.push('\n');
            }
        } else {
            let _ = writeln!(text, "{key}={value}");
        }
    }
    fs::write(out.join("manifest.txt"), text)?;
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<(NetworkConfig, ParamStore)> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    load_checkpoint(&bytes, None)
}

/// Converts every PNG in the input directory into a 16-bit PGM Bayer
/// raster. Unreadable files are skipped with a warning; the command fails
/// only when nothing could be converted.
pub fn cmd_mosaic(input: &Path, out: &Path) -> Result<()> {
    ensure_out_dir(out)?;
    let mut entries: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| Error::Data(format!("cannot read input directory {}: {e}", input.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext.eq_ignore_ascii_case("png")))
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::Data(format!("no PNG images in {}", input.display())));
    }
    let mut mappings = String::new();
    let mut converted = 0usize;
    for path in &entries {
        let raster = match crate::dataset::load_png_rgb(path).and_then(|rgb| mosaic(&rgb)) {
            Ok(raster) => raster,
            Err(err) => {
                eprintln!("warning: skipping {}: {err}", path.display());
                continue;
            }
        };
        let stem = path.file_stem().unwrap_or_default().to_string_lossy();
        let target = out.join(format!("{stem}.pgm"));
        raster.save_pgm16(&target)?;
        let _ = writeln!(mappings, "{} -> {}", path.display(), target.display());
        converted += 1;
    }
    if converted == 0 {
        return Err(Error::Data("every input image failed to convert".into()));
    }
    write_manifest(
        out,
        &[
            ("command", "mosaic".into()),
            ("input", input.display().to_string()),
            ("converted", converted.to_string()),
            ("mappings", mappings),
        ],
    )
}

fn build_config(config: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let mut run = match config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    for assignment in sets {
        let body = assignment.strip_prefix("--").ok_or_else(|| {
            Error::Usage(format!("overrides take the form --KEY=VALUE, got {assignment:?}"))
        })?;
        let Some((key, value)) = body.split_once('=') else {
            return Err(Error::Usage(format!(
                "overrides take the form --KEY=VALUE, got {assignment:?}"
            )));
        };
        run.set(key.trim(), value)?;
    }
    Ok(run)
}

/// Loads every `*.pgm` raster under `dir`, sorted by file name.
fn load_raster_dir(dir: &Path) -> Result<Vec<BayerImage>> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "pgm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("no .pgm rasters in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let raster = BayerImage::load_pgm16(p)?;
            if raster.height % 8 != 0 || raster.width % 8 != 0 {
                return Err(Error::Data(format!(
                    "{}: raster dimensions must be divisible by 8, got {}x{}",
                    p.display(),
                    raster.height,
                    raster.width
                )));
            }
            Ok(raster)
        })
        .collect()
}

/// Trains the detector (from scratch or from `--init`), the descriptor, or
/// the self-supervised adapt phase (both require `--init`). Writes
/// `checkpoint.bnet`, `train_log.tsv`, and the manifest. A non-finite loss
/// aborts with the last good parameters saved.
pub fn cmd_train(
    phase: TrainPhase,
    config: Option<&Path>,
    data: Option<&Path>,
    sets: &[String],
    init: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let run = build_config(config, sets)?;
    if data.is_some() && !matches!(phase, TrainPhase::Adapt) {
        return Err(Error::Usage(
            "--data applies to the adapt phase; detector and descriptor phases train on generated samples".into(),
        ));
    }
    ensure_out_dir(out)?;
    let (network, mut params) = match (phase, init) {
        (TrainPhase::Descriptor, None) => {
            return Err(Error::Usage("the descriptor phase requires --init <checkpoint>".into()));
        }
        (TrainPhase::Adapt, None) => {
            return Err(Error::Usage("the adapt phase requires --init <checkpoint>".into()));
        }
        (_, Some(path)) => read_checkpoint(path)?,
        (TrainPhase::Detector, None) => {
            let network = run.network.clone();
            let params = init_params(&network, run.seed)?;
            (network, params)
        }
    };
    let opts = run.train_options();
    let mut log = String::new();
    let mut on_epoch = |epoch: &TrainEpoch| {
        let line = epoch.log_line();
        println!("{line}");
        log.push_str(&line);
        log.push('\n');
    };
    let report = match phase {
        TrainPhase::Detector => {
            let samples = generate_synthetic(run.seed, run.sample_count, run.image_size)?;
            train_detector(&network, &mut params, &samples, run.epochs, &opts, &mut on_epoch)?
        }
        TrainPhase::Descriptor => {
            let samples = generate_synthetic(run.seed, run.sample_count, run.image_size)?;
            train_descriptor(&network, &mut params, &samples, run.epochs, &opts, &mut on_epoch)?
        }
        TrainPhase::Adapt => {
            let images = match data {
                Some(dir) => load_raster_dir(dir)?,
                None => generate_synthetic(run.seed, run.sample_count, run.image_size)?
                    .into_iter()
                    .map(|s| s.bayer)
                    .collect(),
            };
            train_detector_adapted(
                &network,
                &mut params,
                &images,
                run.epochs,
                run.adaptation_rounds,
                &opts,
                &mut on_epoch,
            )?
        }
    };
    fs::write(out.join("train_log.tsv"), &log)?;
    fs::write(out.join("checkpoint.bnet"), save_checkpoint(&network, &params))?;
    let phase_name = match phase {
        TrainPhase::Detector => "detector",
        TrainPhase::Descriptor => "descriptor",
        TrainPhase::Adapt => "adapt",
    };
    write_manifest(
        out,
        &[
            ("command", "train".into()),
            ("phase", phase_name.into()),
            ("init", init.map(|p| p.display().to_string()).unwrap_or_default()),
            ("data", data.map(|p| p.display().to_string()).unwrap_or_default()),
            ("initial_bce", format!("{:.6}", report.initial_bce)),
            ("final_bce", format!("{:.6}", report.final_bce)),
            ("warnings", report.warnings.to_string()),
            ("config", run.manifest()),
        ],
    )?;
    if report.aborted {
        return Err(Error::NonFinite(
            "training loss left the finite range; last good checkpoint saved".into(),
        ));
    }
    Ok(())
}

fn format_keypoints(kps: &[Keypoint]) -> String {
    let mut text = String::new();
    for kp in kps {
        let _ = writeln!(text, "{} {} {:.6}", kp.x, kp.y, kp.score);
    }
    text
}

fn descriptor_bytes(desc: &DescMatrix) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(4 * desc.data.len());
    for &v in &desc.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

/// Detects keypoints on one PGM raster and writes `keypoints.txt`
/// (`x y score` per line) plus `descriptors.bin` (K x D little-endian f32).
pub fn cmd_detect(
    image: &Path,
    checkpoint: &Path,
    out: &Path,
    threshold: f32,
    nms_radius: usize,
    max_keypoints: usize,
) -> Result<()> {
    ensure_out_dir(out)?;
    let raster = BayerImage::load_pgm16(image)?;
    let (network, params) = read_checkpoint(checkpoint)?;
    let det = DetectionParams { threshold, nms_radius, max_keypoints };
    let (kps, desc) = describe_image(&network, &params, &raster, &det)?;
    fs::write(out.join("keypoints.txt"), format_keypoints(&kps))?;
    fs::write(out.join("descriptors.bin"), descriptor_bytes(&desc))?;
    write_manifest(
        out,
        &[
            ("command", "detect".into()),
            ("image", image.display().to_string()),
            ("checkpoint", checkpoint.display().to_string()),
            ("threshold", threshold.to_string()),
            ("nms_radius", nms_radius.to_string()),
            ("max_keypoints", max_keypoints.to_string()),
            ("keypoints", kps.len().to_string()),
            ("descriptor_dim", desc.dim.to_string()),
        ],
    )
}

/// Matches two rasters and writes `matches.txt` (`index_a index_b distance`
/// per line) plus a side-by-side visualization.
#[allow(clippy::too_many_arguments)]
pub fn cmd_match(
    image_a: &Path,
    image_b: &Path,
    checkpoint: &Path,
    out: &Path,
    threshold: f32,
    nms_radius: usize,
    max_keypoints: usize,
    cross_check: bool,
) -> Result<()> {
    ensure_out_dir(out)?;
    let raster_a = BayerImage::load_pgm16(image_a)?;
    let raster_b = BayerImage::load_pgm16(image_b)?;
    let (network, params) = read_checkpoint(checkpoint)?;
    let det = DetectionParams { threshold, nms_radius, max_keypoints };
    let (kps_a, desc_a) = describe_image(&network, &params, &raster_a, &det)?;
    let (kps_b, desc_b) = describe_image(&network, &params, &raster_b, &det)?;
    let matches = match_bruteforce(&desc_a, &desc_b, cross_check)?;
    let mut text = String::new();
    for (m, &(i, j)) in matches.pairs.iter().enumerate() {
        let _ = writeln!(text, "{i} {j} {:.6}", matches.distances[m]);
    }
    fs::write(out.join("matches.txt"), text)?;
    let mut panel = Panel::new(&raster_a, &raster_b);
    panel.draw_keypoints(&kps_a, &kps_b, YELLOW);
    let lines: Vec<MatchLine> = matches
        .pairs
        .iter()
        .map(|&(i, j)| MatchLine {
            from: (kps_a[i].x, kps_a[i].y),
            to: (kps_b[j].x, kps_b[j].y),
            color: YELLOW,
        })
        .collect();
    panel.draw_matches(&lines);
    panel.save_png(&out.join("matches.png"))?;
    write_manifest(
        out,
        &[
            ("command", "match".into()),
            ("image_a", image_a.display().to_string()),
            ("image_b", image_b.display().to_string()),
            ("checkpoint", checkpoint.display().to_string()),
            ("threshold", threshold.to_string()),
            ("nms_radius", nms_radius.to_string()),
            ("max_keypoints", max_keypoints.to_string()),
            ("cross_check", cross_check.to_string()),
            ("matches", matches.pairs.len().to_string()),
        ],
    )
}

pub struct EvalArgs {
    pub task: EvalTask,
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub eps_rep: f64,
    pub eps_hom: f64,
    pub threshold: f32,
    pub nms_radius: usize,
    pub max_keypoints: usize,
    pub seed: u64,
    pub visualize: bool,
}

struct PairRow {
    scene: String,
    pair: String,
    columns: Vec<(&'static str, String)>,
}

struct SceneOutcome {
    name: String,
    rows: Vec<PairRow>,
    summary: Vec<(&'static str, f64)>,
    visualizations: Vec<(String, Panel)>,
}

fn csv_from_rows(rows: &[PairRow]) -> String {
    let mut text = String::new();
    if let Some(first) = rows.first() {
        text.push_str("scene,pair");
        for (name, _) in &first.columns {
            text.push(',');
            text.push_str(name);
        }
        text.push('\n');
        for row in rows {
            text.push_str(&row.scene);
            text.push(',');
            text.push_str(&row.pair);
            for (_, value) in &row.columns {
                text.push(',');
                text.push_str(value);
            }
            text.push('\n');
        }
    }
    text
}

fn eval_repeatability_scene(
    scene: &Scene,
    network: &NetworkConfig,
    params: &ParamStore,
    det: &DetectionParams,
    eps: f64,
    visualize: bool,
) -> Result<SceneOutcome> {
    let reference = mosaic(&scene.reference)?;
    let kps_ref = detect_image(network, params, &reference, det)?;
    let frame_ref = (reference.width, reference.height);
    let mut rows = Vec::new();
    let mut rep_sum = 0.0;
    let mut rep_count = 0usize;
    let mut visualizations = Vec::new();
    for (k, rgb, truth) in &scene.partners {
        let partner = mosaic(rgb)?;
        let kps_k = detect_image(network, params, &partner, det)?;
        let rep = repeatability(
            &kps_ref,
            &kps_k,
            truth,
            eps,
            frame_ref,
            (partner.width, partner.height),
        )?;
        if let Some(r) = rep {
            rep_sum += r;
            rep_count += 1;
        }
        rows.push(PairRow {
            scene: scene.name.clone(),
            pair: format!("1-{k}"),
            columns: vec![
                ("kps_ref", kps_ref.len().to_string()),
                ("kps_partner", kps_k.len().to_string()),
                ("repeatability", rep.map_or("nan".into(), |r| format!("{r:.6}"))),
            ],
        });
        if visualize {
            let mut panel = Panel::new(&reference, &partner);
            panel.draw_keypoints(&kps_ref, &kps_k, YELLOW);
            visualizations.push((format!("{}_1_{k}.png", scene.name), panel));
        }
    }
    let mean = if rep_count == 0 { f64::NAN } else { rep_sum / rep_count as f64 };
    Ok(SceneOutcome {
        name: scene.name.clone(),
        rows,
        summary: vec![("repeatability", mean)],
        visualizations,
    })
}

fn eval_homography_scene(
    scene: &Scene,
    network: &NetworkConfig,
    params: &ParamStore,
    det: &DetectionParams,
    opts: &MetricsOptions,
    visualize: bool,
) -> Result<SceneOutcome> {
    let reference = mosaic(&scene.reference)?;
    let (kps_ref, desc_ref) = describe_image(network, params, &reference, det)?;
    let frame_ref = (reference.width, reference.height);
    let mut pairs = Vec::new();
    let mut rasters = Vec::new();
    for (k, rgb, truth) in &scene.partners {
        let partner = mosaic(rgb)?;
        let (kps_k, desc_k) = describe_image(network, params, &partner, det)?;
        pairs.push(PairObservation {
            kps1: kps_ref.clone(),
            kps2: kps_k,
            desc1: desc_ref.clone(),
            desc2: desc_k,
            truth: truth.clone(),
            frame1: frame_ref,
            frame2: (partner.width, partner.height),
        });
        rasters.push((*k, partner));
    }
    let (report, per_pair) = bayernet::evalmatch::homography_metrics(&pairs, opts)?;
    let mut rows = Vec::new();
    let mut visualizations = Vec::new();
    for (((k, partner), pair), metrics) in rasters.iter().zip(&pairs).zip(&per_pair) {
        rows.push(PairRow {
            scene: scene.name.clone(),
            pair: format!("1-{k}"),
            columns: vec![
                ("kps_ref", pair.kps1.len().to_string()),
                ("kps_partner", pair.kps2.len().to_string()),
                ("matches", metrics.matches.to_string()),
                ("correct", metrics.correct.to_string()),
                ("inliers", metrics.inliers.to_string()),
                ("corner_error", format!("{:.6}", metrics.corner_error)),
                (
                    "repeatability",
                    metrics.repeatability.map_or("nan".into(), |r| format!("{r:.6}")),
                ),
                ("mha_accurate", (metrics.mha_accurate as u8).to_string()),
            ],
        });
        if visualize {
            let matches = match_bruteforce(&pair.desc1, &pair.desc2, true)?;
            let mut panel = Panel::new(&reference, partner);
            panel.draw_keypoints(&pair.kps1, &pair.kps2, YELLOW);
            let lines: Vec<MatchLine> = matches
                .pairs
                .iter()
                .map(|&(i, j)| {
                    let a = &pair.kps1[i];
                    let b = &pair.kps2[j];
                    let correct = pair
                        .truth
                        .apply(a.x as f64, a.y as f64)
                        .map_or(false, |(px, py)| {
                            ((px - b.x as f64).powi(2) + (py - b.y as f64).powi(2)).sqrt()
                                < opts.eps_hom
                        });
                    MatchLine {
                        from: (a.x, a.y),
                        to: (b.x, b.y),
                        color: if correct { GREEN } else { RED },
                    }
                })
                .collect();
            panel.draw_matches(&lines);
            visualizations.push((format!("{}_1_{k}.png", scene.name), panel));
        }
    }
    Ok(SceneOutcome {
        name: scene.name.clone(),
        rows,
        summary: vec![
            ("repeatability", report.repeatability),
            ("mma", report.mma),
            ("mha", report.mha),
            ("ms", report.ms),
            ("inlier_ratio", report.inlier_ratio()),
        ],
        visualizations,
    })
}

fn summary_csv(outcomes: &[SceneOutcome]) -> String {
    let mut text = String::new();
    let Some(first) = outcomes.first() else { return text };
    text.push_str("scene");
    for (name, _) in &first.summary {
        text.push(',');
        text.push_str(name);
    }
    text.push('\n');
    let columns = first.summary.len();
    let mut sums = vec![0.0f64; columns];
    let mut counts = vec![0usize; columns];
    for outcome in outcomes {
        text.push_str(&outcome.name);
        for (i, (_, value)) in outcome.summary.iter().enumerate() {
            text.push(',');
            if value.is_nan() {
                text.push_str("nan");
            } else {
                let _ = write!(text, "{value:.6}");
                sums[i] += value;
                counts[i] += 1;
            }
        }
        text.push('\n');
    }
    text.push_str("all");
    for i in 0..columns {
        text.push(',');
        if counts[i] == 0 {
            text.push_str("nan");
        } else {
            let _ = write!(text, "{:.6}", sums[i] / counts[i] as f64);
        }
    }
    text.push('\n');
    text
}

/// Evaluates every scene under the dataset root. Scenes that fail to load
/// (missing images, malformed homography files) are skipped with a logged
/// warning; the command fails only when every scene is skipped. Scene
/// computations fan out to one worker thread each and results are written
/// in scene-name order.
pub fn cmd_eval(args: EvalArgs) -> Result<()> {
    ensure_out_dir(&args.out)?;
    let (network, params) = read_checkpoint(&args.checkpoint)?;
    let det = DetectionParams {
        threshold: args.threshold,
        nms_radius: args.nms_radius,
        max_keypoints: args.max_keypoints,
    };
    let opts = MetricsOptions {
        eps_rep: args.eps_rep,
        eps_hom: args.eps_hom,
        ransac_seed: args.seed,
        ..Default::default()
    };
    let dirs = scene_dirs(&args.data)?;
    let scenes: Vec<(PathBuf, Result<Scene>)> =
        dirs.into_iter().map(|dir| (dir.clone(), load_scene(&dir))).collect();
    let mut skipped = 0usize;
    let mut loaded = Vec::new();
    for (dir, result) in scenes {
        match result {
            Ok(scene) => loaded.push(scene),
            Err(err) => {
                eprintln!("warning: skipping scene {}: {err}", dir.display());
                skipped += 1;
            }
        }
    }
    if loaded.is_empty() {
        return Err(Error::Data(format!("all {skipped} scenes were skipped")));
    }

    let task_name = match args.task {
        EvalTask::Repeatability => "repeatability",
        EvalTask::Homography => "homography",
        EvalTask::Invariance => "invariance",
    };
    let (pair_rows, summary, visualizations) = match args.task {
        EvalTask::Invariance => eval_invariance(&loaded, &network, &params, &det, &opts, args.seed)?,
        _ => {
            let outcomes: Vec<SceneOutcome> = std::thread::scope(|scope| {
                let handles: Vec<_> = loaded
                    .iter()
                    .map(|scene| {
                        let network = &network;
                        let params = &params;
                        let det = &det;
                        let opts = &opts;
                        scope.spawn(move || match args.task {
                            EvalTask::Repeatability => eval_repeatability_scene(
                                scene, network, params, det, opts.eps_rep, args.visualize,
                            ),
                            EvalTask::Homography => eval_homography_scene(
                                scene, network, params, det, opts, args.visualize,
                            ),
                            EvalTask::Invariance => unreachable!("handled above"),
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|handle| handle.join().expect("scene worker panicked"))
                    .collect::<Result<Vec<_>>>()
            })?;
            let mut rows = Vec::new();
            let mut visualizations = Vec::new();
            for outcome in &outcomes {
                rows.extend(outcome.rows.iter().map(|r| PairRow {
                    scene: r.scene.clone(),
                    pair: r.pair.clone(),
                    columns: r.columns.clone(),
                }));
            }
            let summary = summary_csv(&outcomes);
            for outcome in outcomes {
                visualizations.extend(outcome.visualizations);
            }
            (rows, summary, visualizations)
        }
    };

    fs::write(args.out.join("pairs.csv"), csv_from_rows(&pair_rows))?;
    fs::write(args.out.join("summary.csv"), &summary)?;
    for (name, panel) in &visualizations {
        panel.save_png(&args.out.join(name))?;
    }
    write_manifest(
        &args.out,
        &[
            ("command", "eval".into()),
            ("task", task_name.into()),
            ("data", args.data.display().to_string()),
            ("checkpoint", args.checkpoint.display().to_string()),
            ("eps_rep", args.eps_rep.to_string()),
            ("eps_hom", args.eps_hom.to_string()),
            ("threshold", args.threshold.to_string()),
            ("nms_radius", args.nms_radius.to_string()),
            ("max_keypoints", args.max_keypoints.to_string()),
            ("seed", args.seed.to_string()),
            ("scenes", loaded.len().to_string()),
            ("scenes_skipped", skipped.to_string()),
            ("pairs", pair_rows.len().to_string()),
        ],
    )
}

/// Invariance task: each scene's reference image is paired with one
/// sampled transform per family; metrics aggregate across scenes within
/// each family.
fn eval_invariance(
    scenes: &[Scene],
    network: &NetworkConfig,
    params: &ParamStore,
    det: &DetectionParams,
    opts: &MetricsOptions,
    seed: u64,
) -> Result<(Vec<PairRow>, String, Vec<(String, Panel)>)> {
    let images: Vec<EvalImage> = scenes
        .iter()
        .map(|scene| {
            Ok(EvalImage { bayer: mosaic(&scene.reference)?, rgb: Some(scene.reference.clone()) })
        })
        .collect::<Result<_>>()?;
    let reports = bayernet::evalmatch::invariance_suite(
        network,
        params,
        &images,
        &TransformFamily::ALL,
        seed,
        det,
        opts,
    )?;
    let mut rows = Vec::new();
    let mut summary = String::from("family,repeatability,mma,mha,ms,inlier_ratio\n");
    for (family, report) in &reports {
        rows.push(PairRow {
            scene: "all".into(),
            pair: family.name().into(),
            columns: vec![
                ("pairs_evaluated", report.pairs_evaluated.to_string()),
                ("matches", report.total_matches.to_string()),
                ("inliers", report.total_inliers.to_string()),
                ("mma", format!("{:.6}", report.mma)),
                ("mha", format!("{:.6}", report.mha)),
                ("ms", format!("{:.6}", report.ms)),
            ],
        });
        let _ = writeln!(
            summary,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            family.name(),
            report.repeatability,
            report.mma,
            report.mha,
            report.ms,
            report.inlier_ratio()
        );
    }
    Ok((rows, summary, Vec::new()))
}
