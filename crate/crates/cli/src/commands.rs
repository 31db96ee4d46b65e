//! One function per subcommand. Artifacts land under `out`:
//! `checkpoints/`, `cache/`, `data/` and `reports/`.

use std::path::{Path, PathBuf};

use flowdistill::distiller::{
    build_corpus, cache_teacher_outputs, distill, log_path_for, read_log, train_baseline,
    train_teacher_flow, train_teacher_noflow, CacheStats, DatasetSpec, FrozenNets, LogRecord,
    Recipe, RunLog, Session,
};
use flowdistill::networks::{
    load_checkpoint, load_checkpoint_as, save_checkpoint, student_forward, teacher_noflow_forward,
    Arch, NetworkHandle,
};
use flowdistill::stability::{
    evaluate_stylized, fps_bench, render_table, stylize_sequence, write_heatmaps, EStabOptions,
    FpsMeasurement, StabilityReport,
};
use flowdistill::videodata::{
    export_sequence, load_sequence_dir, read_frame, write_frame, SequenceLayout,
};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

pub const DISTILLED: &str = "student-distilled";
pub const BASELINE_TEMPORAL: &str = "student-baseline-temporal";

fn checkpoints_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("checkpoints")
}

fn reports_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("reports")
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(d) = path.parent() {
        mkdir(d)?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn read_json<S: for<'de> Deserialize<'de>>(path: &Path, producer: &'static str) -> Result<S> {
    let text = std::fs::read_to_string(path).map_err(|_| CliError::DependencyMissing {
        artifact: path.to_path_buf(),
        producer,
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn require(path: &Path, producer: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::DependencyMissing {
            artifact: path.to_path_buf(),
            producer,
        })
    }
}

/// Provenance written beside every checkpoint.
#[derive(Serialize, Deserialize)]
struct Meta {
    command: String,
    fingerprint: String,
    train_fingerprint: String,
    checkpoint_id: String,
}

fn save_net(cfg: &RunConfig, command: &str, net: &NetworkHandle<f32>, path: &Path) -> Result<()> {
    if let Some(d) = path.parent() {
        mkdir(d)?;
    }
    save_checkpoint(net, path)?;
    write_json(
        &path.with_extension("meta.json"),
        &Meta {
            command: command.into(),
            fingerprint: cfg.fingerprint(),
            train_fingerprint: flowdistill::distiller::fingerprint(&cfg.train),
            checkpoint_id: net.checkpoint_id.clone(),
        },
    )?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn session(cfg: &RunConfig) -> Result<Session> {
    Ok(Session::new(cfg.train.clone())?)
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    for (name, spec) in [
        ("train", &cfg.train.dataset),
        ("val", &cfg.train.validation),
    ] {
        if let DatasetSpec::Directory { .. } = spec {
            return Err(CliError::ConfigInvalid {
                key: format!(
                    "train.{}",
                    if name == "train" {
                        "dataset"
                    } else {
                        "validation"
                    }
                ),
                reason: "synth needs a synthetic dataset".into(),
            });
        }
        let dir = cfg.out.join("data").join(name);
        for seq in build_corpus(spec)? {
            export_sequence(&seq, &dir.join(&seq.source_id))?;
        }
        log::info!("wrote {}", dir.display());
    }
    write_json(
        &cfg.out.join("data").join("synth.json"),
        &serde_json::json!({ "fingerprint": cfg.fingerprint(), "train": cfg.train.dataset, "validation": cfg.train.validation }),
    )
}

pub fn train_teacher(cfg: &RunConfig) -> Result<()> {
    let s = session(cfg)?;
    let t = &cfg.train;
    let mut log = RunLog::to_file(&log_path_for(&t.teacher_checkpoint))?;
    let net = train_teacher_flow(&s, &mut log)?;
    save_net(cfg, "train-teacher", &net, &t.teacher_checkpoint)?;
    let mut log = RunLog::to_file(&log_path_for(&t.teacher_noflow_checkpoint))?;
    let net = train_teacher_noflow(&s, &mut log)?;
    save_net(cfg, "train-teacher", &net, &t.teacher_noflow_checkpoint)
}

pub fn train_baseline_cmd(cfg: &RunConfig, temporal: bool) -> Result<()> {
    let s = session(cfg)?;
    let path = if temporal {
        checkpoints_dir(cfg).join(format!("{BASELINE_TEMPORAL}.ckpt"))
    } else {
        cfg.train.student_baseline_checkpoint.clone()
    };
    let mut log = RunLog::to_file(&log_path_for(&path))?;
    let net = train_baseline(&s, temporal, &mut log)?;
    save_net(cfg, "train-baseline", &net, &path)
}

fn load_frozen(cfg: &RunConfig) -> Result<FrozenNets> {
    let t = &cfg.train;
    let load = |path: &Path, arch, producer| -> Result<NetworkHandle<f32>> {
        require(path, producer)?;
        Ok(load_checkpoint_as(path, arch)?.freeze())
    };
    Ok(FrozenNets {
        teacher: load(&t.teacher_checkpoint, Arch::TeacherFlow, "train-teacher")?,
        teacher_noflow: load(
            &t.teacher_noflow_checkpoint,
            Arch::TeacherNoflow,
            "train-teacher",
        )?,
        student_baseline: load(
            &t.student_baseline_checkpoint,
            Arch::Student,
            "train-baseline",
        )?,
    })
}

#[derive(Serialize, Deserialize)]
struct CacheManifest {
    fingerprint: String,
    ids: flowdistill::distiller::CacheIds,
    stats: CacheStats,
}

fn manifest_path(cfg: &RunConfig) -> PathBuf {
    cfg.train.cache_dir.join("manifest.json")
}

pub fn cache(cfg: &RunConfig) -> Result<()> {
    let s = session(cfg)?;
    let nets = load_frozen(cfg)?;
    let (_, stats) = cache_teacher_outputs(&s, &nets)?;
    log::info!(
        "cache: {} hits, {} built, {} rebuilt",
        stats.hits,
        stats.built,
        stats.rebuilt_corrupt
    );
    write_json(
        &manifest_path(cfg),
        &CacheManifest {
            fingerprint: cfg.fingerprint(),
            ids: nets.ids(),
            stats,
        },
    )
}

pub fn distill_cmd(cfg: &RunConfig, name: &str) -> Result<()> {
    let s = session(cfg)?;
    let nets = load_frozen(cfg)?;
    let manifest: CacheManifest = read_json(&manifest_path(cfg), "cache")?;
    if manifest.ids != nets.ids() {
        return Err(CliError::DependencyMissing {
            artifact: manifest_path(cfg),
            producer: "cache",
        });
    }
    let (cache, _) = cache_teacher_outputs(&s, &nets)?;
    let path = checkpoints_dir(cfg).join(format!("{name}.ckpt"));
    let mut log = RunLog::to_file(&log_path_for(&path))?;
    let net = distill(&s, &nets, &cache, &mut log)?;
    if let Some(v) = log.final_val() {
        log::info!("{name}: validation e_stab {v:.5}");
    }
    save_net(cfg, "distill", &net, &path)
}

pub fn stylize(checkpoint: &Path, input: &Path, output: &Path) -> Result<()> {
    require(checkpoint, "distill")?;
    let net: NetworkHandle<f32> = load_checkpoint(checkpoint)?;
    mkdir(output)?;
    if input.join("frames").is_dir() {
        let seq = load_sequence_dir::<f32>(input, SequenceLayout::TripletDirs)?;
        for (i, y) in stylize_sequence(&net, &seq)?.iter().enumerate() {
            write_frame(&output.join(format!("{i:05}.png")), y)?;
        }
        return Ok(());
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)
        .map_err(|e| CliError::io(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    files.sort();
    for f in files {
        let x = read_frame(&f)?;
        let y = match net.arch {
            Arch::Student => student_forward(&net, &x)?,
            Arch::TeacherNoflow => teacher_noflow_forward(&net, &x)?,
            _ => {
                return Err(CliError::ConfigInvalid {
                    key: "--input".into(),
                    reason: format!(
                        "{} needs a sequence directory with frames/, flow/ and occlusions/",
                        net.arch
                    ),
                })
            }
        };
        write_frame(&output.join(f.file_name().expect("file")), &y)?;
    }
    Ok(())
}

/// `label=path` pairs, or every checkpoint under `out/checkpoints`.
fn models(cfg: &RunConfig, given: &[String]) -> Result<Vec<(String, PathBuf)>> {
    if !given.is_empty() {
        return given
            .iter()
            .map(|m| match m.split_once('=') {
                Some((l, p)) => Ok((l.to_string(), PathBuf::from(p))),
                None => {
                    let p = PathBuf::from(m);
                    let label = p
                        .file_stem()
                        .and_then(|s| s.to_str())
                        .unwrap_or(m)
                        .to_string();
                    Ok((label, p))
                }
            })
            .collect();
    }
    let dir = checkpoints_dir(cfg);
    let mut found: Vec<(String, PathBuf)> = std::fs::read_dir(&dir)
        .map_err(|_| CliError::DependencyMissing {
            artifact: dir.clone(),
            producer: "train-baseline",
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ckpt"))
        .map(|p| (p.file_stem().unwrap().to_string_lossy().into_owned(), p))
        .collect();
    found.sort();
    Ok(found)
}

pub fn eval_stability(cfg: &RunConfig, given: &[String]) -> Result<()> {
    let scenes = build_corpus(&cfg.train.validation)?;
    let opts = EStabOptions {
        literal_norm: cfg.eval.literal_norm,
        include_channels: cfg.eval.include_channels,
    };
    let mut reports = Vec::new();
    for (label, path) in models(cfg, given)? {
        require(&path, "train-baseline")?;
        let net: NetworkHandle<f32> = load_checkpoint(&path)?;
        let stylized = scenes
            .iter()
            .map(|s| stylize_sequence(&net, s))
            .collect::<flowdistill::Result<Vec<_>>>()?;
        if cfg.eval.heatmaps {
            for (s, y) in scenes.iter().zip(&stylized) {
                write_heatmaps(
                    &reports_dir(cfg)
                        .join("heatmaps")
                        .join(&label)
                        .join(&s.source_id),
                    y,
                    &s.flows,
                    &s.masks,
                )?;
            }
        }
        let mut r = evaluate_stylized(&label, &scenes, &stylized, opts)?;
        r.fingerprint = Some(cfg.fingerprint());
        log::info!("{label}: mean e_stab {:.5}", r.mean());
        reports.push(r);
    }
    let dir = reports_dir(cfg);
    write_json(&dir.join("stability.json"), &reports)?;
    let table = render_table(&reports);
    std::fs::write(dir.join("stability.txt"), &table)
        .map_err(|e| CliError::io(dir.join("stability.txt"), e))?;
    print!("{table}");
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct BenchEntry {
    model: String,
    measurement: FpsMeasurement,
}

pub fn bench(cfg: &RunConfig, given: &[String]) -> Result<()> {
    let chosen = if given.is_empty() {
        let dir = checkpoints_dir(cfg);
        let student = [DISTILLED, "student-baseline"]
            .iter()
            .map(|n| dir.join(format!("{n}.ckpt")))
            .find(|p| p.exists())
            .ok_or_else(|| CliError::DependencyMissing {
                artifact: dir.join(format!("{DISTILLED}.ckpt")),
                producer: "distill",
            })?;
        vec![
            (
                student.file_stem().unwrap().to_string_lossy().into_owned(),
                student,
            ),
            (
                "teacher-flow".to_string(),
                cfg.train.teacher_checkpoint.clone(),
            ),
        ]
    } else {
        models(cfg, given)?
    };
    let b = &cfg.bench;
    let mut entries = Vec::new();
    for (label, path) in chosen {
        require(&path, "train-teacher")?;
        let net: NetworkHandle<f32> = load_checkpoint(&path)?;
        let m = fps_bench(
            &net,
            b.width,
            b.height,
            b.warmup,
            b.timed,
            net.arch == Arch::TeacherFlow,
        )?;
        println!("{label}: {:.2} fps at {}x{}", m.fps, b.width, b.height);
        entries.push(BenchEntry {
            model: label,
            measurement: m,
        });
    }
    write_json(&reports_dir(cfg).join("bench.json"), &entries)
}

/// Distillation runs found next to their checkpoints, for the ablation table.
fn distill_runs(cfg: &RunConfig) -> Result<Vec<(String, Vec<LogRecord>)>> {
    let dir = checkpoints_dir(cfg);
    let Ok(rd) = std::fs::read_dir(&dir) else {
        return Ok(Vec::new());
    };
    let mut logs: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".log.jsonl"))
        .collect();
    logs.sort();
    let mut out = Vec::new();
    for p in logs {
        let recs = read_log(&p)?;
        if matches!(
            recs.first(),
            Some(LogRecord::Header {
                recipe: Recipe::Distill,
                ..
            })
        ) {
            let name = p
                .file_name()
                .unwrap()
                .to_string_lossy()
                .trim_end_matches(".log.jsonl")
                .to_string();
            out.push((name, recs));
        }
    }
    Ok(out)
}

pub fn report(cfg: &RunConfig) -> Result<String> {
    let dir = reports_dir(cfg);
    let mut reports: Vec<StabilityReport> =
        read_json(&dir.join("stability.json"), "eval-stability")?;
    if let Ok(text) = std::fs::read_to_string(dir.join("bench.json")) {
        let entries: Vec<BenchEntry> = serde_json::from_str(&text)?;
        for r in &mut reports {
            r.fps = entries
                .iter()
                .find(|e| e.model == r.model)
                .map(|e| e.measurement.clone());
        }
    }
    let mut text = String::from("Temporal error (e_stab) per validation scene\n\n");
    text.push_str(&render_table(&reports));
    let runs = distill_runs(cfg)?;
    if !runs.is_empty() {
        text.push_str("\nDistillation runs\n\n");
        text.push_str(&format!(
            "{:<28} {:>8} {:>3} {:>9} {:>6} {:>12} {:>12}\n",
            "run", "anchor", "K", "temporal", "warm", "val e_stab", "eval mean"
        ));
        for (name, recs) in runs {
            let LogRecord::Header {
                weights,
                lowrank_anchor,
                warm_start,
                ..
            } = &recs[0]
            else {
                continue;
            };
            let val = recs
                .iter()
                .rev()
                .find_map(|r| match r {
                    LogRecord::Epoch { val_e_stab, .. } => Some(format!("{val_e_stab:.5}")),
                    _ => None,
                })
                .unwrap_or_else(|| "-".into());
            let eval = reports
                .iter()
                .find(|r| r.model == name)
                .map(|r| format!("{:.5}", r.mean()))
                .unwrap_or_else(|| "-".into());
            text.push_str(&format!(
                "{name:<28} {:>8} {:>3} {:>9} {:>6} {val:>12} {eval:>12}\n",
                serde_json::to_value(lowrank_anchor)?
                    .as_str()
                    .unwrap_or("?"),
                weights.k,
                weights.temporal > 0.0,
                warm_start,
            ));
        }
    }
    text.push_str(&format!("\nfingerprint {}\n", cfg.fingerprint()));
    std::fs::write(dir.join("report.md"), &text)
        .map_err(|e| CliError::io(dir.join("report.md"), e))?;
    Ok(text)
}
