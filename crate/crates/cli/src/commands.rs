//! Subcommand implementations.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use dwd_core::agents::ZKind;
use dwd_core::eval::{
    evaluate, read_transcripts, report, stage1_accuracy, train_metric_lm, write_transcripts, LmConfig, MetricLm,
    Setting, SETTINGS,
};
use dwd_core::service::{GameService, StoredGame, TranscriptStore};
use dwd_core::synthworld::{build_stage1_dataset, read_corpus, read_dataset, DomainTag, Sampling, WorldConfig};
use dwd_core::trainer::{run_curriculum, stage1_train, stage2_train, Checkpoint, GameSampler, Stage, Variant};

use crate::config::{render, RawConfig};
use crate::manifest::{create_run_dir, data_root, Manifest};
use crate::play::{play, PlayOutcome};
use crate::{usage, Command};

pub const CHECKPOINT: &str = "checkpoint.dwd";
pub const LM_FILE: &str = "metric_lm.bin";

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { n, seed, out, val } => gen_data(n, seed, out, val).map(|_| ()),
        Command::Train {
            stage,
            seed,
            config,
            variant,
            data,
            init,
            set,
            out,
        } => {
            let raw = train_config(config.as_deref(), &stage, variant.as_deref(), seed, &set)?;
            train(&raw, data.as_deref(), init.as_deref(), out).map(|_| ())
        }
        Command::Eval {
            checkpoint,
            seed,
            setting,
            pool_size,
            rounds,
            sampling,
            n,
            data,
            lm,
            out,
        } => {
            let setting = match setting {
                Some(s) => named_setting(&s)?,
                None => {
                    let sampling = match sampling.as_str() {
                        "random" => Sampling::Random,
                        "contrast" => Sampling::Contrast,
                        s => return Err(usage(format!("--sampling must be random or contrast, got {s:?}"))),
                    };
                    Setting::new("custom", pool_size, sampling, rounds, DomainTag::Base)
                }
            };
            eval(&checkpoint, seed, setting, n, data.as_deref(), lm.as_deref(), out).map(|_| ())
        }
        Command::Ablate {
            seed,
            data,
            config,
            set,
            stage2_epochs,
            variants,
            n_pools,
            out,
        } => {
            let mut raw = match &config {
                Some(p) => RawConfig::load(p).map_err(|e| usage(format!("{e:#}")))?,
                None => RawConfig::default(),
            };
            for s in &set {
                raw.set_pair(s).map_err(|e| usage(format!("{e:#}")))?;
            }
            raw.set("seed", &seed.to_string())?;
            let variants = match variants {
                None => Variant::ALL.to_vec(),
                Some(list) => list
                    .split(',')
                    .map(|s| Variant::parse(s.trim()).ok_or_else(|| usage(format!("unknown variant {s:?}"))))
                    .collect::<Result<_>>()?,
            };
            ablate(&raw, &data, stage2_epochs, &variants, n_pools, out).map(|_| ())
        }
        Command::Report {
            grid,
            seed,
            from,
            models,
            n_pools,
            data,
            lm,
            out,
        } => {
            if grid != "default" {
                return Err(usage(format!("unknown grid {grid:?} (only `default`)")));
            }
            let mut named = Vec::new();
            if let Some(dir) = &from {
                for name in ["zero_shot", "ours_discrete_elbo", "typical_transfer"] {
                    named.push((name.to_string(), dir.join(format!("{name}.dwd"))));
                }
            }
            for m in &models {
                named.push(model_arg(m)?);
            }
            if named.is_empty() {
                return Err(usage("report needs --from or at least one --model"));
            }
            grid_report(&named, seed, n_pools, data.as_deref(), lm.as_deref(), out).map(|_| ())
        }
        Command::Play {
            checkpoint,
            pool_size,
            rounds,
            seed,
            store,
        } => {
            let ck = Arc::new(load(&checkpoint)?);
            let seed = seed.unwrap_or_else(|| chrono::Utc::now().timestamp_nanos_opt().unwrap_or(0) as u64);
            let stdin = std::io::stdin();
            let mut stdout = std::io::stdout();
            match play(Arc::clone(&ck), pool_size, rounds, seed, stdin.lock(), &mut stdout)? {
                PlayOutcome::Quit => eprintln!("quit; nothing saved"),
                PlayOutcome::Finished(t) => {
                    if let Some(dir) = store {
                        let mut s = TranscriptStore::open(&dir)?;
                        s.append(StoredGame {
                            session_id: format!("terminal-{seed}"),
                            model: ck.tag(),
                            finished_at: chrono::Utc::now().timestamp().max(0) as u64,
                            transcript: t,
                        })?;
                    }
                }
            }
            Ok(())
        }
        Command::Serve {
            port,
            checkpoints,
            store,
        } => {
            let mut models = Vec::new();
            for c in &checkpoints {
                let (name, path) = model_arg(c)?;
                models.push((name, load(&path)?));
            }
            let store_dir = store.unwrap_or_else(|| data_root().join("transcripts"));
            let store = TranscriptStore::open(&store_dir)?;
            let svc = Arc::new(GameService::new(models, store)?);
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()?;
            rt.block_on(crate::server::serve(svc, port))
        }
    }
}

/// `name=path`, or a bare path named by its file stem.
pub fn model_arg(s: &str) -> Result<(String, PathBuf)> {
    match s.split_once('=') {
        Some((n, p)) if !n.is_empty() && !p.is_empty() => Ok((n.to_string(), PathBuf::from(p))),
        Some(_) => Err(usage(format!("bad model argument {s:?}"))),
        None => {
            let p = PathBuf::from(s);
            let name = p
                .file_stem()
                .and_then(|n| n.to_str())
                .ok_or_else(|| usage(format!("bad model path {s:?}")))?
                .to_string();
            Ok((name, p))
        }
    }
}

fn named_setting(name: &str) -> Result<Setting> {
    SETTINGS
        .iter()
        .find(|s| s.name.eq_ignore_ascii_case(name))
        .copied()
        .ok_or_else(|| usage(format!("unknown setting {name:?} (A..F)")))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(v)?).with_context(|| format!("writing {}", path.display()))
}

fn write_log(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for rec in &ck.meta.history {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `n` training and `val` held-out pairs with their question corpora.
pub fn gen_data(n: usize, seed: u64, out: Option<PathBuf>, val: Option<usize>) -> Result<PathBuf> {
    if n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let dir = match out {
        Some(d) => {
            fs::create_dir_all(&d)?;
            d
        }
        None => create_run_dir(&data_root().join("data"), seed)?,
    };
    let val = val.unwrap_or((n / 10).max(1));
    let world = WorldConfig::default();
    build_stage1_dataset(n, &world, seed, "train", &dir)?;
    if val > 0 {
        build_stage1_dataset(val, &world, seed, "val", &dir)?;
    }
    let mut m = Manifest::new("gen-data");
    m.set("seed", &seed.to_string());
    m.set("n", &n.to_string());
    m.set("val", &val.to_string());
    m.finish(&dir)?;
    println!("{}", dir.display());
    Ok(dir)
}

/// Config file, then flags, then `--set` overrides.
pub fn train_config(
    file: Option<&Path>,
    stage: &str,
    variant: Option<&str>,
    seed: u64,
    set: &[String],
) -> Result<RawConfig> {
    let mut raw = match file {
        Some(p) => RawConfig::load(p).map_err(|e| usage(format!("{e:#}")))?,
        None => RawConfig::default(),
    };
    raw.set("stage", stage)?;
    if let Some(v) = variant {
        raw.set("variant", v)?;
    }
    raw.set("seed", &seed.to_string())?;
    for s in set {
        raw.set_pair(s).map_err(|e| usage(format!("{e:#}")))?;
    }
    Ok(raw)
}

pub fn train(raw: &RawConfig, data: Option<&Path>, init: Option<&Path>, out: Option<PathBuf>) -> Result<PathBuf> {
    let cfg = raw.resolve().map_err(|e| usage(format!("{e:#}")))?;
    let mut manifest = Manifest::new("train");
    let mut ck = match cfg.stage {
        Stage::Stage1 => {
            let data = data.ok_or_else(|| usage("stage1 needs --data"))?;
            let train_path = data.join("train.bin");
            let examples = read_dataset(&train_path)?;
            manifest.input("train", &train_path)?;
            let mut ck = stage1_train(&cfg, &examples)?;
            let val_path = data.join("val.bin");
            if val_path.exists() {
                let held = read_dataset(&val_path)?;
                manifest.input("val", &val_path)?;
                let acc = stage1_accuracy(&ck, &held)?;
                ck.meta.metrics.insert("val_accuracy".into(), acc);
                println!("held-out round-1 accuracy {acc:.4}");
            }
            ck
        }
        _ => {
            let init = init.ok_or_else(|| usage(format!("{} needs --init", cfg.stage.name())))?;
            let start = load(init)?;
            manifest.input("init", init)?;
            let sampler = GameSampler::new(WorldConfig::default(), cfg.seed, cfg.pool_sizes.clone());
            stage2_train(&cfg, &start, &sampler)?
        }
    };
    if let Some(last) = ck.meta.history.last() {
        let terms: Vec<String> = last.terms.iter().map(|(k, v)| format!("{k} {v:.4}")).collect();
        println!("epoch {} {}", last.epoch, terms.join("  "));
    }
    ck.meta.metrics.retain(|_, v| v.is_finite());
    let dir = create_run_dir(&out.unwrap_or_else(|| data_root().join("runs")), cfg.seed)?;
    ck.save(&dir.join(CHECKPOINT))?;
    let flat = render(&cfg);
    fs::write(dir.join("config.txt"), &flat)?;
    write_log(&dir.join("log.jsonl"), &ck)?;
    manifest.set("seed", &cfg.seed.to_string());
    manifest.set_config(&flat);
    manifest.finish(&dir)?;
    println!("{}", dir.display());
    Ok(dir)
}

/// Loads `--lm`, or the LM cached next to a dataset, training it from the
/// dataset's corpus on first use.
pub fn metric_lm(lm: Option<&Path>, data: Option<&Path>) -> Result<(MetricLm, PathBuf)> {
    if let Some(p) = lm {
        return Ok((MetricLm::load(p)?, p.to_path_buf()));
    }
    let data = data.ok_or_else(|| usage("perplexity needs --lm or --data"))?;
    let path = data.join(LM_FILE);
    if path.exists() {
        return Ok((MetricLm::load(&path)?, path));
    }
    let corpus = read_corpus(&data.join("train_corpus.txt"))?;
    eprintln!("training metric LM on {} questions", corpus.len());
    let lm = train_metric_lm(&corpus, &LmConfig::default())?;
    lm.save(&path)?;
    Ok((lm, path))
}

pub fn eval(
    checkpoint: &Path,
    seed: u64,
    setting: Setting,
    n: usize,
    data: Option<&Path>,
    lm: Option<&Path>,
    out: Option<PathBuf>,
) -> Result<PathBuf> {
    if n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let ck = load(checkpoint)?;
    let (lm, lm_path) = metric_lm(lm, data)?;
    let pools = setting.pools(n, &WorldConfig::default(), seed)?;
    let (metrics, ts) = evaluate(&ck, &pools, setting.rounds, &lm, seed)?;
    let dir = create_run_dir(&out.unwrap_or_else(|| data_root().join("runs")), seed)?;
    write_json(&dir.join("metrics.json"), &metrics)?;
    let mut w = BufWriter::new(fs::File::create(dir.join("transcripts.jsonl"))?);
    write_transcripts(&mut w, &ts)?;
    w.flush()?;
    println!(
        "{} {}  accuracy {:.4}  perplexity {:.4}  relevance {:.4}  diversity {:.3}",
        ck.tag(),
        setting.describe(),
        metrics.accuracy,
        metrics.perplexity,
        metrics.relevance,
        metrics.headline_diversity()
    );
    let mut m = Manifest::new("eval");
    m.set("seed", &seed.to_string());
    m.set("setting", &setting.describe());
    m.set("n", &n.to_string());
    m.input("checkpoint", checkpoint)?;
    m.input("lm", &lm_path)?;
    m.finish(&dir)?;
    println!("{}", dir.display());
    Ok(dir)
}

fn pretraining_key(v: Variant) -> &'static str {
    match v.z_kind() {
        ZKind::Discrete => "discrete",
        ZKind::Gaussian => "gaussian",
        ZKind::Identity => "identity",
    }
}

/// One stage-1 run per pre-training objective, every requested curriculum on
/// top, then the grid table over all final checkpoints and the zero-shot model.
pub fn ablate(
    raw: &RawConfig,
    data: &Path,
    stage2_epochs: Option<usize>,
    variants: &[Variant],
    n_pools: usize,
    out: Option<PathBuf>,
) -> Result<PathBuf> {
    let base = raw.resolve().map_err(|e| usage(format!("{e:#}")))?;
    let train_path = data.join("train.bin");
    let examples = read_dataset(&train_path)?;
    let (lm, lm_path) = metric_lm(None, Some(data))?;
    let dir = create_run_dir(&out.unwrap_or_else(|| data_root().join("runs")), base.seed)?;
    let mut manifest = Manifest::new("ablate");
    manifest.input("train", &train_path)?;
    manifest.input("lm", &lm_path)?;

    let mut pretrained: Vec<(&'static str, Checkpoint)> = Vec::new();
    let mut finals: Vec<(String, Checkpoint)> = Vec::new();
    for &v in variants {
        let key = pretraining_key(v);
        if !pretrained.iter().any(|(k, _)| *k == key) {
            let mut cfg = base.clone();
            cfg.stage = Stage::Stage1;
            cfg.variant = v;
            cfg.model = cfg.model.clone().with_z(v.z_kind());
            eprintln!("stage1 {key}");
            let ck = stage1_train(&cfg, &examples)?;
            ck.save(&dir.join(format!("stage1_{key}.dwd")))?;
            if key == "discrete" {
                let zs = ck.relabel(Variant::OursDiscreteElbo)?;
                zs.save(&dir.join("zero_shot.dwd"))?;
                finals.push(("zero_shot".into(), zs));
            }
            pretrained.push((key, ck));
        }
        let s1 = pretrained.iter().find(|(k, _)| *k == key).expect("trained above").1.relabel(v)?;
        let mut cfg = base.clone();
        cfg.stage = Stage::Stage2;
        cfg.variant = v;
        cfg.model = cfg.model.clone().with_z(v.z_kind());
        cfg.epochs = stage2_epochs.unwrap_or(25);
        let sampler = GameSampler::new(WorldConfig::default(), cfg.seed, cfg.pool_sizes.clone());
        eprintln!("stage2 {}", v.name());
        let ck = run_curriculum(&s1, &cfg, &sampler)?.pop().expect("curriculum has a phase");
        ck.save(&dir.join(format!("{}.dwd", v.name())))?;
        finals.push((v.name().to_string(), ck));
    }
    let models: Vec<(&str, &Checkpoint)> = finals.iter().map(|(n, c)| (n.as_str(), c)).collect();
    let table = report(&models, &SETTINGS, n_pools, &WorldConfig::default(), &lm, base.seed)?;
    fs::write(dir.join("ablation.tsv"), table.to_tsv())?;
    write_json(&dir.join("ablation.json"), &table)?;
    print!("{}", table.to_text());
    fs::write(dir.join("config.txt"), render(&base))?;
    manifest.set("seed", &base.seed.to_string());
    manifest.set("n_pools", &n_pools.to_string());
    manifest.set_config(&render(&base));
    manifest.finish(&dir)?;
    println!("{}", dir.display());
    Ok(dir)
}

pub fn grid_report(
    models: &[(String, PathBuf)],
    seed: u64,
    n_pools: usize,
    data: Option<&Path>,
    lm: Option<&Path>,
    out: Option<PathBuf>,
) -> Result<PathBuf> {
    let mut manifest = Manifest::new("report");
    let mut loaded = Vec::new();
    for (name, path) in models {
        if loaded.iter().any(|(n, _): &(String, Checkpoint)| n == name) {
            bail!("model {name:?} given twice");
        }
        loaded.push((name.clone(), load(path)?));
        manifest.input(&format!("model.{name}"), path)?;
    }
    let (lm, lm_path) = metric_lm(lm, data)?;
    manifest.input("lm", &lm_path)?;
    let refs: Vec<(&str, &Checkpoint)> = loaded.iter().map(|(n, c)| (n.as_str(), c)).collect();
    let table = report(&refs, &SETTINGS, n_pools, &WorldConfig::default(), &lm, seed)?;
    let dir = create_run_dir(&out.unwrap_or_else(|| data_root().join("runs")), seed)?;
    fs::write(dir.join("report.tsv"), table.to_tsv())?;
    fs::write(dir.join("report.txt"), table.to_text())?;
    write_json(&dir.join("report.json"), &table)?;
    print!("{}", table.to_text());
    manifest.set("seed", &seed.to_string());
    manifest.set("grid", "default");
    manifest.set("n_pools", &n_pools.to_string());
    manifest.finish(&dir)?;
    println!("{}", dir.display());
    Ok(dir)
}

/// Transcripts written by `eval` in a run directory.
pub fn run_transcripts(dir: &Path) -> Result<Vec<dwd_core::eval::Transcript>> {
    let f = fs::File::open(dir.join("transcripts.jsonl"))?;
    Ok(read_transcripts(std::io::BufReader::new(f))?)
}
