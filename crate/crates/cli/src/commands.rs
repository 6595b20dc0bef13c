use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use suplid::config::Config;
use suplid::coreset::{build_coreset, load_coreset, save_coreset, CoresetMeta, CoresetStrategy};
use suplid::eval::{evaluate, evaluate_per_image, EvalReport};
use suplid::pipeline::{analyze_training, Aggregation, ImageInputs, Scorer};
use suplid::scores::{threshold_map, ConfidenceMethod, GuidanceMethod};
use suplid::superpixel::slic_segment;
use suplid::synth::{SynthSpec, SynthWorld};
use suplid::tensorio::{LabelMask, Tensor};

use crate::error::{CliError, CliResult};
use crate::files::*;

pub fn convert(input: &Path, output: &Path) -> CliResult<()> {
    let t = read_tensor(input)?;
    write_tensor_as(output, &t)
}

pub fn superpixels(image: &Path, out: &Path, config: &Config) -> CliResult<()> {
    let mut rec = Recorder::new("superpixels", config);
    rec.input(image)?;
    let img = read_tensor(image)?;
    let part = rec
        .time("slic", || slic_segment(&img, &config.slic()))
        .map_err(CliError::at(image))?;
    write_tensor_as(out, &part.to_tensor())?;
    rec.output(out);
    info!("{} superpixels", part.num_superpixels());
    rec.finish(&manifest_beside(out))
}

fn coreset_meta_path(coreset: &Path) -> PathBuf {
    let mut s = coreset.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn load_training(
    dir: &Path,
    config: &Config,
    rec: &mut Recorder,
) -> CliResult<Vec<(ImageInputs, LabelMask)>> {
    let mut out = Vec::new();
    for stem in stems(dir)? {
        let inputs = load_inputs(dir, dir, &stem, config, rec)?;
        let (p, t) = load_mask(dir, &stem, "labels", rec)?;
        let mask = training_mask(t, inputs.logits.num_classes(), &p)?;
        out.push((inputs, mask));
    }
    Ok(out)
}

pub fn build(train_dir: &Path, out: &Path, config: &Config) -> CliResult<()> {
    let mut rec = Recorder::new("build-coreset", config);
    let train = load_training(train_dir, config, &mut rec)?;
    let analysis = rec.time("analyze", || analyze_training(&train, &config.slic()))?;
    let mut coreset = rec.time("select", || {
        build_coreset(&analysis.records, &config.coreset())
    })?;
    coreset.set_templates(Some(analysis.templates))?;
    let mut buf = Vec::new();
    save_coreset(&coreset, &mut buf)?;
    write_atomic(out, &buf)?;
    rec.output(out);
    let meta_path = coreset_meta_path(out);
    write_json(
        &meta_path,
        &CoresetMeta {
            params: config.coreset(),
            source: train_dir.display().to_string(),
            calibration: analysis.calibration,
        },
    )?;
    rec.output(&meta_path);
    info!(
        "coreset: {} rows over {} classes, k_used {}",
        coreset.len(),
        coreset.num_classes(),
        coreset.k_used()
    );
    rec.finish(&manifest_beside(out))
}

fn open_coreset(
    path: &Path,
    rec: &mut Recorder,
) -> CliResult<(suplid::coreset::Coreset, CoresetMeta)> {
    if !path.is_file() {
        return Err(CliError::Usage(format!(
            "--coreset {}: no such file",
            path.display()
        )));
    }
    rec.input(path)?;
    let file = fs::File::open(path).map_err(CliError::io(path))?;
    let coreset = load_coreset(std::io::BufReader::new(file)).map_err(CliError::at(path))?;
    let meta_path = coreset_meta_path(path);
    if !meta_path.is_file() {
        return Err(CliError::Usage(format!(
            "{}: missing calibration sidecar",
            meta_path.display()
        )));
    }
    rec.input(&meta_path)?;
    Ok((coreset, read_json(&meta_path)?))
}

pub struct ScoreArgs<'a> {
    pub coreset: &'a Path,
    pub inputs_dir: &'a Path,
    pub images_dir: Option<&'a Path>,
    pub out_dir: &'a Path,
    pub tau: Option<f64>,
}

pub fn score(args: &ScoreArgs, config: &Config) -> CliResult<()> {
    let mut rec = Recorder::new("score", config);
    let (coreset, meta) = open_coreset(args.coreset, &mut rec)?;
    let scorer = Scorer::new(coreset, meta.calibration, config.scoring())?;
    let images_dir = args.images_dir.unwrap_or(args.inputs_dir);
    let stems = stems(args.inputs_dir)?;
    let mut inputs = Vec::with_capacity(stems.len());
    for stem in &stems {
        inputs.push(load_inputs(
            args.inputs_dir,
            images_dir,
            stem,
            config,
            &mut rec,
        )?);
    }
    let maps = rec.time("score", || {
        inputs
            .par_iter()
            .zip(&stems)
            .map(|(i, s)| {
                scorer.score(i).map_err(|e| CliError::Core {
                    path: PathBuf::from(s),
                    source: e,
                })
            })
            .collect::<CliResult<Vec<_>>>()
    })?;
    for (stem, map) in stems.iter().zip(&maps) {
        let p = args.out_dir.join(format!("{stem}_score.sltf"));
        write_tensor_as(&p, &map.per_pixel)?;
        rec.output(&p);
        if let Some(tau) = args.tau {
            let pred = threshold_map(&map.per_pixel, tau)?;
            let p = args.out_dir.join(format!("{stem}_pred.pgm"));
            write_tensor_as(&p, pred.tensor())?;
            rec.output(&p);
        }
    }
    info!("scored {} images", stems.len());
    rec.finish(&args.out_dir.join("manifest.json"))
}

#[derive(Debug, Serialize)]
struct ReportFile {
    #[serde(flatten)]
    report: EvalReport,
    f1_kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    per_image: Option<BTreeMap<String, Option<EvalReport>>>,
}

pub fn eval(scores_dir: &Path, masks_dir: &Path, out: &Path, per_image: bool) -> CliResult<()> {
    let config = Config::default();
    let mut rec = Recorder::new("eval", &config);
    let entries = fs::read_dir(scores_dir).map_err(CliError::io(scores_dir))?;
    let mut stems: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            e.file_name()
                .to_str()
                .and_then(|n| n.strip_suffix("_score.sltf"))
                .map(str::to_string)
        })
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(CliError::Usage(format!(
            "--scores-dir {}: no *_score.sltf files",
            scores_dir.display()
        )));
    }
    let mut maps = Vec::new();
    let mut masks = Vec::new();
    for stem in &stems {
        let sp = scores_dir.join(format!("{stem}_score.sltf"));
        rec.input(&sp)?;
        maps.push(read_tensor(&sp)?);
        let (mp, t) = load_mask(masks_dir, stem, "ood", &mut rec)?;
        masks.push(LabelMask::evaluation(t).map_err(CliError::at(&mp))?);
    }
    let report = rec.time("evaluate", || evaluate(&maps, &masks))?;
    let per_image = if per_image {
        let r = evaluate_per_image(&maps, &masks)?;
        Some(stems.iter().cloned().zip(r).collect())
    } else {
        None
    };
    write_json(
        out,
        &ReportFile {
            report,
            f1_kind: "pixel",
            per_image,
        },
    )?;
    rec.output(out);
    rec.finish(&manifest_beside(out))
}

/// Writes `train` + `test` scenes of `spec` under `out_dir`.
pub fn synth(spec_path: &Path, out_dir: &Path, train: u64, test: u64) -> CliResult<()> {
    let config = Config::default();
    let mut rec = Recorder::new("synth", &config);
    rec.input(spec_path)?;
    let spec: SynthSpec = read_json(spec_path)?;
    let world = SynthWorld::new(&spec).map_err(CliError::at(spec_path))?;
    if spec.num_classes < 2 {
        return Err(CliError::Usage(
            "synth scenes need at least 2 classes".into(),
        ));
    }
    for (split, range) in [("train", 0..train), ("test", train..train + test)] {
        let dir = out_dir.join(split);
        let scenes: Vec<_> = rec.time("generate", || {
            range
                .clone()
                .into_par_iter()
                .map(|i| world.scene(i).map(|s| (i, s)))
                .collect::<suplid::Result<Vec<_>>>()
        })?;
        for (i, s) in scenes {
            let stem = format!("scene_{i:03}");
            let logits = s
                .logits
                .as_ref()
                .ok_or_else(|| CliError::Internal("missing logits".into()))?;
            let files: [(&str, &Tensor); 5] = [
                ("image.ppm", &s.image),
                ("features.sltf", s.features.tensor()),
                ("logits.sltf", logits.tensor()),
                ("labels.pgm", s.train_labels.tensor()),
                ("ood.pgm", s.ood_mask.tensor()),
            ];
            for (suffix, t) in files {
                let p = dir.join(format!("{stem}_{suffix}"));
                write_tensor_as(&p, t)?;
                rec.output(&p);
            }
        }
    }
    rec.finish(&out_dir.join("manifest.json"))
}

/// Cross product of ablation axes; `null` confidence drops that term.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub confidence_methods: Vec<Option<ConfidenceMethod>>,
    pub guidance_methods: Vec<GuidanceMethod>,
    pub coreset_strategies: Vec<CoresetStrategy>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            confidence_methods: vec![Some(ConfidenceMethod::Energy), None],
            guidance_methods: GuidanceMethod::ALL.to_vec(),
            coreset_strategies: CoresetStrategy::ALL.to_vec(),
        }
    }
}

/// Name of the ablation row a combination corresponds to, if any.
fn row_label(c: Option<ConfidenceMethod>, g: GuidanceMethod, s: CoresetStrategy) -> &'static str {
    use CoresetStrategy as S;
    use GuidanceMethod as G;
    let energy = c == Some(ConfidenceMethod::Energy);
    match (energy, c.is_none(), g, s) {
        (true, _, G::None, S::Lid) => "energy alone",
        (_, true, G::UnweightedLid, S::Lid) => "LID alone",
        (_, true, G::WeightedLid, S::Lid) => "LID w/ scaling",
        (true, _, G::KnnDistance, S::Lid) => "w/o LID",
        (true, _, G::WeightedLid, S::Random) => "random coreset",
        (true, _, G::WeightedLid, S::Energy) => "energy coreset",
        (true, _, G::WeightedLid, S::Diverse) => "diverse coreset",
        (true, _, G::WeightedLid, S::Lid) => "full",
        _ => "",
    }
}

#[derive(Debug, Serialize)]
struct AblationRow {
    label: &'static str,
    confidence_method: String,
    guidance_method: String,
    coreset_strategy: String,
    auroc: f64,
    aupr: f64,
    fpr_at_95tpr: f64,
    best_f1: f64,
}

pub struct AblateArgs<'a> {
    pub train_dir: &'a Path,
    pub test_dir: &'a Path,
    pub grid: Grid,
    pub out: &'a Path,
}

/// Evaluates every grid combination on the same fixtures. Combinations
/// without guidance are scored per pixel, as the plain classifier baseline.
pub fn ablate(args: &AblateArgs, config: &Config) -> CliResult<()> {
    let mut rec = Recorder::new("ablate", config);
    let train = load_training(args.train_dir, config, &mut rec)?;
    let analysis = rec.time("analyze", || analyze_training(&train, &config.slic()))?;
    let mut test = Vec::new();
    let mut masks = Vec::new();
    for stem in stems(args.test_dir)? {
        test.push(load_inputs(
            args.test_dir,
            args.test_dir,
            &stem,
            config,
            &mut rec,
        )?);
        let (p, t) = load_mask(args.test_dir, &stem, "ood", &mut rec)?;
        masks.push(LabelMask::evaluation(t).map_err(CliError::at(&p))?);
    }

    let mut rows = Vec::new();
    for &strategy in &args.grid.coreset_strategies {
        let params = suplid::coreset::CoresetParams {
            strategy,
            ..config.coreset()
        };
        let mut coreset = rec.time("select", || build_coreset(&analysis.records, &params))?;
        coreset.set_templates(Some(analysis.templates.clone()))?;
        for &conf in &args.grid.confidence_methods {
            for &guid in &args.grid.guidance_methods {
                let combo = format!(
                    "{}/{}/{}",
                    conf.map_or("none".to_string(), |c| c.to_string()),
                    guid,
                    strategy
                );
                let mut scoring = config.scoring();
                scoring.fusion.confidence_method = conf;
                scoring.fusion.guidance_method = guid;
                if guid == GuidanceMethod::None && conf.is_some() {
                    scoring.aggregation = Aggregation::Pixel;
                }
                let run = || -> suplid::Result<EvalReport> {
                    let scorer =
                        Scorer::new(coreset.clone(), analysis.calibration.clone(), scoring)?;
                    let maps = test
                        .par_iter()
                        .map(|i| scorer.score(i).map(|m| m.per_pixel))
                        .collect::<suplid::Result<Vec<_>>>()?;
                    evaluate(&maps, &masks)
                };
                let r = rec
                    .time("score+eval", run)
                    .map_err(|e| CliError::Usage(format!("ablation {combo} failed: {e}")))?;
                info!("{combo}: auroc {:.4}", r.auroc);
                rows.push(AblationRow {
                    label: row_label(conf, guid, strategy),
                    confidence_method: conf.map_or("none".into(), |c| c.to_string()),
                    guidance_method: guid.to_string(),
                    coreset_strategy: strategy.to_string(),
                    auroc: r.auroc,
                    aupr: r.aupr,
                    fpr_at_95tpr: r.fpr_at_95tpr,
                    best_f1: r.best_f1,
                });
            }
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Internal(format!("csv buffer: {e}")))?;
    write_atomic(args.out, &bytes)?;
    rec.output(args.out);
    rec.finish(&manifest_beside(args.out))
}
