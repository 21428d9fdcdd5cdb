use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use cqs_core::coding_rate::{coding_rate, histogram_from_rates, CodingRateConfig};
use cqs_core::paradigms::{score_features, ParadigmKind};
use cqs_core::pipeline::encode_all;
use cqs_core::qaa_agg::{
    cache_queries, count_flops, export_attention_maps, predict_query_features,
    read_descriptor_file, write_attention_maps, write_descriptor_file, ImageSpec, QaaConfig,
};
use cqs_core::retrieval_eval::{
    recall_at_ks, reports_to_csv, PlaceRecord, Position, PositiveCriterion,
};
use cqs_core::synth_data::{
    load_manifest_observations, read_manifest, read_world_spec, write_observation_manifest,
    write_world_spec, ManifestRow, SyntheticWorld,
};
use cqs_core::trainer::{
    cross_dataset_ablation, evaluate_set, load_checkpoint, prepare_data, save_checkpoint,
    train_and_evaluate, AblationRow, ExperimentConfig,
};
use log::info;
use serde::Serialize;

use crate::config::{load_experiment, require_file};
use crate::error::{CliError, Result};
use crate::manifest::RunManifest;
use crate::{
    AblateArgs, AttnArgs, CodingRateArgs, EncodeArgs, EvalArgs, FlopsArgs, GenWorldArgs, Grid,
    TrainArgs, TrainingFlags,
};

/// Query counts swept by `ablate --grid nq`.
const NQ_GRID: [usize; 5] = [16, 32, 64, 128, 256];

/// `(C_f, C_r)` pairs swept by `ablate --grid cfcr`.
const CFCR_GRID: [(usize, usize); 7] = [
    (64, 128),
    (64, 64),
    (32, 128),
    (64, 32),
    (16, 128),
    (64, 16),
    (8, 128),
];

/// Patch stride assumed when turning a patch count back into an image size.
const PATCH_STRIDE: usize = 14;

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, body).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value).map_err(cqs_core::Error::from)?;
    write_file(path, body + "\n")
}

fn start(command: &str, config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let path = RunManifest::new(command, config, seed, out).write()?;
    info!("{command}: wrote {}", path.display());
    Ok(())
}

fn load_inputs(paths: &[&Path]) -> Result<()> {
    paths.iter().try_for_each(|p| require_file(p))
}

pub fn cmd_gen_world(args: GenWorldArgs) -> Result<()> {
    let out = &args.out.out;
    start("gen-world", args.config.as_deref(), args.seed, out)?;
    let mut cfg = load_experiment(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.data.seed = seed;
    }
    if let Some(seed) = args.world_seed {
        cfg.world.seed = seed;
    }
    if let Some(n) = args.num_places {
        cfg.world.num_places = n;
    }
    let world = SyntheticWorld::generate(&cfg.world)?;
    write_world_spec(&out.join("world.json"), &cfg.world)?;

    let all: Vec<usize> = (0..world.domains.len()).collect();
    let (datasets, evals) = prepare_data(&world, &cfg.data, &all)?;
    for ds in &datasets {
        let obs: Vec<_> = ds.places.iter().flatten().cloned().collect();
        write_observation_manifest(out, &format!("train_{}", ds.name), &obs)?;
    }
    for set in &evals {
        write_observation_manifest(out, &format!("db_{}", set.name), &set.database)?;
        write_observation_manifest(out, &format!("query_{}", set.name), &set.queries)?;
    }
    Ok(())
}

/// Config with the world file and training flags applied.
fn experiment(flags: &TrainingFlags) -> Result<ExperimentConfig> {
    let mut cfg = load_experiment(flags.config.as_deref())?;
    if let Some(path) = &flags.world {
        require_file(path)?;
        cfg.world = read_world_spec(path)?;
    }
    cfg.data.seed = flags.seed;
    cfg.train.seed = flags.seed;
    if let Some(e) = flags.max_epochs {
        cfg.train.optimizer.max_epochs = e;
    }
    if let Some(i) = flags.iters_per_epoch {
        cfg.train.iters_per_epoch = i;
    }
    cfg.world.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn domain_indices(world: &SyntheticWorld, names: &[String]) -> Result<Vec<usize>> {
    if names.is_empty() {
        return Ok((0..world.domains.len()).collect());
    }
    names
        .iter()
        .map(|n| {
            world
                .domains
                .iter()
                .position(|d| &d.name == n)
                .ok_or_else(|| CliError::Usage(format!("unknown domain {n:?}")))
        })
        .collect()
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    paradigm: ParadigmKind,
    domains: Vec<&'a str>,
    initial_recall1: f64,
    best_epoch: usize,
    best_recall1: f64,
    iterations: u64,
    stop: &'a cqs_core::trainer::StopReason,
}

pub fn cmd_train(args: TrainArgs) -> Result<()> {
    let out = &args.out.out;
    start(
        "train",
        args.flags.config.as_deref(),
        Some(args.flags.seed),
        out,
    )?;
    let mut cfg = experiment(&args.flags)?;
    if let Some(p) = &args.paradigm {
        cfg.train.paradigm = p.parse()?;
    }
    write_json(&out.join("config.json"), &cfg)?;

    let world = SyntheticWorld::generate(&cfg.world)?;
    let domains = domain_indices(&world, &args.domains)?;
    let (datasets, evals) = prepare_data(&world, &cfg.data, &domains)?;
    let val: Vec<_> = domains.iter().map(|&d| evals[d].clone()).collect();
    let outcome = cqs_core::trainer::train(&datasets, &val, &cfg.train)?;
    info!(
        "train: stopped with {:?} after {} iterations",
        outcome.stop, outcome.iterations
    );

    save_checkpoint(&out.join("model.cqsp"), &outcome.params, outcome.paradigm)?;
    write_file(&out.join("metrics.csv"), outcome.metrics_csv())?;
    let mut reports = Vec::new();
    for set in &evals {
        reports.extend(evaluate_set(
            &outcome.params,
            cfg.train.paradigm,
            &cfg.train.sinkhorn,
            set,
            &[1, 5, 10],
        )?);
    }
    write_file(&out.join("eval.csv"), reports_to_csv(&reports))?;
    write_json(
        &out.join("summary.json"),
        &TrainSummary {
            paradigm: outcome.paradigm,
            domains: domains
                .iter()
                .map(|&d| world.domains[d].name.as_str())
                .collect(),
            initial_recall1: outcome.initial_recall1,
            best_epoch: outcome.best_epoch,
            best_recall1: outcome.best_recall1,
            iterations: outcome.iterations,
            stop: &outcome.stop,
        },
    )
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned())
}

pub fn cmd_encode(args: EncodeArgs) -> Result<()> {
    let out = &args.out.out;
    load_inputs(&[&args.checkpoint, &args.manifest])?;
    start("encode", args.config.as_deref(), None, out)?;
    let cfg = load_experiment(args.config.as_deref())?;
    let (params, paradigm) = load_checkpoint(&args.checkpoint)?;
    let maps: Vec<_> = load_manifest_observations(&args.manifest)?
        .into_iter()
        .map(|o| o.features)
        .collect();
    let descs = encode_all(&maps, &params, paradigm, &cfg.train.sinkhorn)?;
    let path = out.join(format!("{}.cqsa", file_stem(&args.manifest)));
    write_descriptor_file(&path, &descs)?;
    info!("encode: {} descriptors to {}", descs.len(), path.display());
    Ok(())
}

fn parse_criterion(s: &str) -> Result<PositiveCriterion> {
    let bad = || {
        CliError::Usage(format!(
            "criterion {s:?} is not distance_m:<meters> or frames:<n>"
        ))
    };
    let (kind, value) = s.split_once(':').ok_or_else(bad)?;
    let c = match kind {
        "distance_m" => PositiveCriterion::DistanceM(value.parse().map_err(|_| bad())?),
        "frames" => PositiveCriterion::Frames(value.parse().map_err(|_| bad())?),
        _ => return Err(bad()),
    };
    c.validate()?;
    Ok(c)
}

fn records(
    descriptors: &Path,
    manifest: &Path,
    criterion: &PositiveCriterion,
) -> Result<Vec<PlaceRecord>> {
    let rows: HashMap<String, ManifestRow> = read_manifest(manifest)?
        .into_iter()
        .map(|r| (r.id.clone(), r))
        .collect();
    let dataset = file_stem(manifest);
    read_descriptor_file(descriptors)?
        .into_iter()
        .map(|d| {
            let row = rows.get(&d.image_id).ok_or_else(|| {
                CliError::Usage(format!(
                    "{} has no manifest row for {:?}",
                    descriptors.display(),
                    d.image_id
                ))
            })?;
            let position = match criterion {
                PositiveCriterion::Frames(_) => Position::Frame {
                    index: row.frame_idx.ok_or_else(|| {
                        CliError::Usage(format!(
                            "{:?} has no frame index for a frame criterion",
                            row.id
                        ))
                    })? as i64,
                },
                PositiveCriterion::DistanceM(_) => Position::Planar {
                    x: row.x_m,
                    y: row.y_m,
                },
            };
            Ok(PlaceRecord {
                descriptor: d,
                position,
                dataset: dataset.clone(),
            })
        })
        .collect()
}

pub fn cmd_eval(args: EvalArgs) -> Result<()> {
    let out = &args.out.out;
    load_inputs(&[
        &args.db,
        &args.db_manifest,
        &args.queries,
        &args.query_manifest,
    ])?;
    start("eval", None, None, out)?;
    let criterion = parse_criterion(&args.criterion)?;
    let db = records(&args.db, &args.db_manifest, &criterion)?;
    let queries = records(&args.queries, &args.query_manifest, &criterion)?;
    let reports = recall_at_ks(
        &file_stem(&args.query_manifest),
        &queries,
        &db,
        &args.ks,
        criterion,
    )?;
    write_file(&out.join("report.csv"), reports_to_csv(&reports))
}

fn ablation_csv(axis: &str, world: &SyntheticWorld, rows: &[(String, AblationRow)]) -> String {
    let mut out = format!("{axis},trained_on");
    for d in &world.domains {
        let _ = write!(out, ",{}", d.name);
    }
    out.push_str(",min_recall1,mean_recall1\n");
    for (value, row) in rows {
        let _ = write!(out, "{value},{}", row.trained_on);
        for r in &row.recall1 {
            let _ = write!(out, ",{r:.6}");
        }
        let mean = row.recall1.iter().sum::<f64>() / row.recall1.len() as f64;
        let _ = writeln!(out, ",{:.6},{mean:.6}", row.min_recall1);
    }
    out
}

pub fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let out = &args.out.out;
    start(
        "ablate",
        args.flags.config.as_deref(),
        Some(args.flags.seed),
        out,
    )?;
    let cfg = experiment(&args.flags)?;
    write_json(&out.join("config.json"), &cfg)?;
    let world = SyntheticWorld::generate(&cfg.world)?;
    let all: Vec<usize> = (0..world.domains.len()).collect();

    let joint =
        |train: cqs_core::trainer::TrainConfig, label: String| -> Result<(String, AblationRow)> {
            info!("ablate: training {label}");
            Ok((
                label,
                train_and_evaluate(&world, &cfg.data, &train, &all)?.1,
            ))
        };
    let (name, axis, rows) = match args.grid {
        Grid::Paradigms => {
            let rows = [ParadigmKind::Cs, ParadigmKind::Softmax, ParadigmKind::Ot]
                .into_iter()
                .map(|p| {
                    let mut t = cfg.train.clone();
                    t.paradigm = p;
                    joint(t, p.to_string())
                })
                .collect::<Result<Vec<_>>>()?;
            ("paradigms", "paradigm", rows)
        }
        Grid::Nq => {
            let rows = NQ_GRID
                .iter()
                .map(|&n_q| {
                    let mut t = cfg.train.clone();
                    t.model = QaaConfig { n_q, ..t.model };
                    joint(t, n_q.to_string())
                })
                .collect::<Result<Vec<_>>>()?;
            ("nq", "n_q", rows)
        }
        Grid::Cfcr => {
            let rows = CFCR_GRID
                .iter()
                .map(|&(c_f, c_r)| {
                    let mut t = cfg.train.clone();
                    t.model = QaaConfig {
                        c_f,
                        c_r,
                        ..t.model
                    };
                    joint(t, format!("{c_f}x{c_r}"))
                })
                .collect::<Result<Vec<_>>>()?;
            ("cfcr", "c_f_x_c_r", rows)
        }
        Grid::Datasets => {
            let rows = cross_dataset_ablation(&world, &cfg.data, &cfg.train)?
                .into_iter()
                .map(|r| (cfg.train.paradigm.to_string(), r))
                .collect();
            ("datasets", "paradigm", rows)
        }
    };
    write_file(
        &out.join(format!("{name}.csv")),
        ablation_csv(axis, &world, &rows),
    )
}

pub fn cmd_coding_rate(args: CodingRateArgs) -> Result<()> {
    let out = &args.out.out;
    let mut inputs: Vec<&Path> = args.checkpoints.iter().map(PathBuf::as_path).collect();
    inputs.push(&args.manifest);
    load_inputs(&inputs)?;
    start("coding-rate", args.config.as_deref(), None, out)?;
    let cfg = load_experiment(args.config.as_deref())?;
    let rate_cfg = CodingRateConfig::default();
    let obs = load_manifest_observations(&args.manifest)?;

    let mut per_model = Vec::new();
    let mut rates_csv = String::from("model,paradigm,image_id,rate\n");
    for path in &args.checkpoints {
        let (params, paradigm) = load_checkpoint(path)?;
        let cache = cache_queries(&params)?;
        let model = file_stem(path);
        let mut rates = Vec::with_capacity(obs.len());
        for o in &obs {
            let p_hat = predict_query_features(&cache.q_f_hat, &o.features, &params)?;
            let scored = score_features(paradigm, &p_hat, &cfg.train.sinkhorn)?;
            let r = coding_rate(&scored, &rate_cfg)?;
            let _ = writeln!(
                rates_csv,
                "{model},{paradigm},{},{r:.6}",
                o.features.image_id
            );
            rates.push(r);
        }
        per_model.push((model, paradigm, rates));
    }
    write_file(&out.join("rates.csv"), rates_csv)?;

    // Shared edges so histograms of different models line up.
    let all = per_model.iter().flat_map(|(_, _, r)| r.iter().copied());
    let lo = all.clone().fold(f64::INFINITY, f64::min);
    let hi = all.fold(f64::NEG_INFINITY, f64::max);
    let mut summary = String::from("model,paradigm,images,mean,variance\n");
    for (model, paradigm, rates) in per_model {
        let n = rates.len();
        let h = histogram_from_rates(rates, args.bins, Some((lo, hi)), &model)?;
        write_file(&out.join(format!("hist_{model}.csv")), h.to_csv())?;
        let _ = writeln!(
            summary,
            "{model},{paradigm},{n},{:.6},{:.6}",
            h.mean, h.variance
        );
    }
    write_file(&out.join("summary.csv"), summary)
}

pub fn cmd_flops(args: FlopsArgs) -> Result<()> {
    let out = &args.out.out;
    start("flops", None, None, out)?;
    let img = ImageSpec::new(args.height, args.width);
    let mut csv = String::from(
        "n_q,c_o,c_f,c_r,params,inference_flops,cached_flops,total_flops,inference_gflops\n",
    );
    for &n_q in &args.n_q {
        let p = count_flops(&QaaConfig::new(n_q, args.c_o, args.c_f, args.c_r), &img)?;
        let _ = writeln!(
            csv,
            "{n_q},{},{},{},{},{},{},{},{:.6}",
            args.c_o,
            args.c_f,
            args.c_r,
            p.params,
            p.inference_flops,
            p.cached_flops,
            p.total_flops(),
            p.inference_gflops()
        );
    }
    write_file(&out.join("flops.csv"), csv)
}

pub fn cmd_attn(args: AttnArgs) -> Result<()> {
    let out = &args.out.out;
    load_inputs(&[&args.checkpoint, &args.manifest])?;
    start("attn", None, None, out)?;
    let (params, _) = load_checkpoint(&args.checkpoint)?;
    let obs = load_manifest_observations(&args.manifest)?;
    let selected: Vec<_> = if args.images.is_empty() {
        obs.iter().take(1).collect()
    } else {
        args.images
            .iter()
            .map(|id| {
                obs.iter()
                    .find(|o| &o.features.image_id == id)
                    .ok_or_else(|| CliError::Usage(format!("image {id:?} is not in the manifest")))
            })
            .collect::<Result<_>>()?
    };
    for o in selected {
        let p = o.features.num_patches();
        let side = (p as f64).sqrt().round() as usize;
        if side * side != p {
            return Err(CliError::Usage(format!(
                "{} patches do not form a square grid",
                p
            )));
        }
        let img = ImageSpec::new(side * PATCH_STRIDE, side * PATCH_STRIDE);
        let grids = export_attention_maps(&o.features, &params, &args.queries, &img)?;
        write_attention_maps(out, &o.features.image_id, &grids)?;
    }
    Ok(())
}
