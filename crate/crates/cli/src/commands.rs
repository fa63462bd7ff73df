//! Subcommand implementations.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use asp_core::data::{
    load_dataset_dir, make_synthetic, parse_embedding_files, synthetic_embeddings, write_dataset_dir, DataError,
    EmbeddingTable, FeatureDataset, Split, SyntheticConfig, VocabSpace,
};
use asp_core::evaluator::{evaluate, report};
use asp_core::feasibility::{
    cache_path, feasibility_mask, fetch_table, load_feasibility, save_feasibility, ClientConfig, RelatednessCache,
    RelatednessClient, DEFAULT_BASE_URL,
};
use asp_core::model::{load_checkpoint, save_checkpoint, ModelConfig};
use asp_core::trainer::{ablate, format_ablation_csv, train, write_train_log, AblationAxis, TrainConfig};

use crate::args::{AblateArgs, Cli, Command, EvalArgs, FeasibilityArgs, ModelFlags, SynthArgs, TrainArgs};
use crate::config::{ConfigFile, Resolver};
use crate::error::ConfigError;
use crate::manifest::{ManifestBuilder, MANIFEST_FILE};

pub const CHECKPOINT_FILE: &str = "model.aspc";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const CURVE_FILE: &str = "curve.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const EMBEDDINGS_FILE: &str = "embeddings.txt";

pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let r = Resolver::new(file);
    match cli.command {
        Command::Synth(a) => synth(a, r),
        Command::Train(a) => train_cmd(a, r),
        Command::Eval(a) => eval_cmd(a, r),
        Command::Feasibility(a) => feasibility_cmd(a, r),
        Command::Ablate(a) => ablate_cmd(a, r),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating --out {}", dir.display()))
}

fn synth(a: SynthArgs, mut r: Resolver) -> Result<()> {
    let d = SyntheticConfig::default();
    let out = r.required_path("out", a.out, "DIR")?;
    let cfg = SyntheticConfig {
        n_attrs: r.value("attrs", a.attrs, d.n_attrs)?,
        n_objs: r.value("objs", a.objs, d.n_objs)?,
        d_img: r.value("dimg", a.dimg, d.d_img)?,
        samples_per_comp: r.value("samples", a.samples, d.samples_per_comp)?,
        holdout_fraction: r.value("holdout", a.holdout, d.holdout_fraction)?,
        noise_sigma: r.value("noise", a.noise, d.noise_sigma)?,
    };
    let dword = r.value("dword", a.dword, 300usize)?;
    let seed = r.value("seed", a.seed, 0u64)?;
    if !(0.0..1.0).contains(&cfg.holdout_fraction) {
        return Err(ConfigError::new(format!("--holdout {} must be in [0, 1)", cfg.holdout_fraction)).into());
    }
    if dword == 0 {
        return Err(ConfigError::new("--dword must be at least 1").into());
    }

    let mut manifest = ManifestBuilder::new("synth");
    manifest.seed(seed);
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (vocab, dataset) = make_synthetic(&cfg, &mut rng).map_err(|e| match e {
        DataError::Generation(m) => anyhow::Error::new(ConfigError(m)),
        e => e.into(),
    })?;
    let embeddings = synthetic_embeddings(&vocab, dword, &mut rng);
    manifest.time("generate", start);

    create_dir(&out)?;
    write_dataset_dir(&out, &vocab, &dataset)?;
    embeddings.save(out.join(EMBEDDINGS_FILE))?;
    manifest.output_dir(&out)?;
    let m = manifest.finish(r.into_resolved(), &out.join(MANIFEST_FILE))?;
    println!(
        "{} samples, {} compositions ({} unseen), {} files in {}",
        dataset.len(),
        vocab.n_compositions(),
        vocab.n_compositions() - vocab.seen().len(),
        m.outputs.len(),
        out.display()
    );
    Ok(())
}

/// Training settings from flags, file and defaults, plus the optional
/// expected word dimension. Checks what can be checked before any input is
/// read; `check_heads` is off when a grid overrides the head count.
fn resolve_training(f: &ModelFlags, r: &mut Resolver, check_heads: bool) -> Result<(TrainConfig, Option<usize>)> {
    let d = TrainConfig::default();
    let m = ModelConfig::default();
    let dword = r.optional("dword", f.dword)?;
    let cfg = TrainConfig {
        epochs: r.value("epochs", f.epochs, d.epochs)?,
        batch_size: r.value("batch-size", f.batch_size, d.batch_size)?,
        learning_rate: r.value("lr", f.lr, d.learning_rate)?,
        seed: r.value("seed", f.seed, d.seed)?,
        model: ModelConfig {
            heads: r.value("heads", f.heads, m.heads)?,
            mlp_depth: r.value("depth", f.depth, m.mlp_depth)?,
            d_shared: r.value("dshared", f.dshared, m.d_shared)?,
            dropout: r.value("dropout", f.dropout, m.dropout)?,
            temperature: r.value("temperature", f.temperature, m.temperature)?,
            attention_residual: r.value("residual", f.residual, m.attention_residual)?,
            ..m
        },
    };
    let mut probe = cfg.clone();
    match dword {
        Some(w) if check_heads => probe.model.d_word = w,
        _ => probe.model.d_word = probe.model.heads,
    }
    if !check_heads {
        probe.model.heads = 1;
    }
    probe.validate()?;
    Ok((cfg, dword))
}

struct Inputs {
    vocab: VocabSpace,
    dataset: FeatureDataset,
    embeddings: EmbeddingTable,
}

fn resolve_input_paths(f: &ModelFlags, r: &mut Resolver) -> Result<(PathBuf, Vec<PathBuf>)> {
    let data = r.required_path("data", f.data.clone(), "DIR")?;
    let embeddings = r.path_list("embeddings", f.embeddings.clone())?.unwrap_or_default();
    if embeddings.is_empty() {
        return Err(ConfigError::new(
            "missing --embeddings <FILE>: give the word embedding file for the vocabulary (repeat the flag to concatenate several, or set `embeddings=` in the --config file)",
        )
        .into());
    }
    Ok((data, embeddings))
}

fn load_dataset(data: &Path, manifest: &mut ManifestBuilder) -> Result<(VocabSpace, FeatureDataset)> {
    let loaded = load_dataset_dir(data).with_context(|| format!("--data {}", data.display()))?;
    manifest.input_dir(data)?;
    Ok(loaded)
}

fn load_inputs(
    data: &Path,
    embedding_paths: &[PathBuf],
    dword: Option<usize>,
    manifest: &mut ManifestBuilder,
) -> Result<Inputs> {
    let start = Instant::now();
    let (vocab, dataset) = load_dataset(data, manifest)?;
    let shown: Vec<String> = embedding_paths.iter().map(|p| p.display().to_string()).collect();
    let embeddings = parse_embedding_files(embedding_paths, &vocab)
        .with_context(|| format!("--embeddings {}", shown.join(",")))?;
    for p in embedding_paths {
        manifest.input(p)?;
    }
    if let Some(w) = dword.filter(|&w| w != embeddings.dim()) {
        return Err(ConfigError::new(format!(
            "--dword {w} but the embeddings have dimension {}",
            embeddings.dim()
        ))
        .into());
    }
    manifest.time("load", start);
    Ok(Inputs {
        vocab,
        dataset,
        embeddings,
    })
}

fn train_cmd(a: TrainArgs, mut r: Resolver) -> Result<()> {
    let (cfg, dword) = resolve_training(&a.model, &mut r, true)?;
    let (data, embedding_paths) = resolve_input_paths(&a.model, &mut r)?;
    let out = r.required_path("out", a.out, "DIR")?;

    let mut manifest = ManifestBuilder::new("train");
    manifest.seed(cfg.seed);
    let inputs = load_inputs(&data, &embedding_paths, dword, &mut manifest)?;
    let start = Instant::now();
    let outcome = train(&cfg, &inputs.vocab, &inputs.dataset, &inputs.embeddings)?;
    manifest.time("train", start);

    create_dir(&out)?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    let log_path = out.join(TRAIN_LOG_FILE);
    save_checkpoint(&outcome.params, &checkpoint)?;
    write_train_log(&outcome.log, &log_path)?;
    manifest.output(&checkpoint)?;
    manifest.output(&log_path)?;
    manifest.finish(r.into_resolved(), &out.join(MANIFEST_FILE))?;

    let best = &outcome.log[outcome.best_epoch - 1];
    println!(
        "epoch {} selected: train loss {:.4}, val HM {:.1}; wrote {}",
        outcome.best_epoch,
        best.train_loss,
        100.0 * best.val_hm,
        checkpoint.display()
    );
    Ok(())
}

fn parse_split(name: &str) -> Result<Split, ConfigError> {
    Split::ALL
        .into_iter()
        .find(|s| s.name() == name)
        .ok_or_else(|| ConfigError::new(format!("--split {name:?}: expected train, val or test")))
}

fn eval_cmd(a: EvalArgs, mut r: Resolver) -> Result<()> {
    let data = r.required_path("data", a.data, "DIR")?;
    let checkpoint = r.required_path("checkpoint", a.checkpoint, "FILE")?;
    let out = r.required_path("out", a.out, "DIR")?;
    let split = parse_split(&r.value("split", a.split, "test".to_string())?)?;
    let feasibility = r.value("feasibility", a.feasibility, "none".to_string())?;
    let threshold = r.value("threshold", a.threshold, 0.0)?;
    if !threshold.is_finite() {
        return Err(ConfigError::new("--threshold must be finite").into());
    }

    let mut manifest = ManifestBuilder::new("eval");
    let start = Instant::now();
    let (vocab, dataset) = load_dataset(&data, &mut manifest)?;
    let params = load_checkpoint(&checkpoint).with_context(|| format!("--checkpoint {}", checkpoint.display()))?;
    manifest.input(&checkpoint)?;
    if params.n_attrs() != vocab.n_attrs() || params.n_objs() != vocab.n_objs() || params.config.d_img != dataset.dim() {
        return Err(ConfigError::new(format!(
            "checkpoint expects {}×{} compositions of {}-d features; --data has {}×{} of {}-d",
            params.n_attrs(),
            params.n_objs(),
            params.config.d_img,
            vocab.n_attrs(),
            vocab.n_objs(),
            dataset.dim()
        ))
        .into());
    }
    let mask = if feasibility == "none" {
        None
    } else {
        let path = PathBuf::from(&feasibility);
        let (table, _) = load_feasibility(&path, &vocab).with_context(|| format!("--feasibility {feasibility}"))?;
        manifest.input(&path)?;
        Some(feasibility_mask(&table, threshold))
    };
    manifest.time("load", start);

    let start = Instant::now();
    let curve = evaluate(&params, &vocab, &dataset, split, mask.as_deref())?;
    manifest.time("eval", start);
    create_dir(&out)?;
    let (curve_path, summary_path) = (out.join(CURVE_FILE), out.join(SUMMARY_FILE));
    let summary = report(&curve, &curve_path, &summary_path)?;
    manifest.output(&curve_path)?;
    manifest.output(&summary_path)?;
    manifest.finish(r.into_resolved(), &out.join(MANIFEST_FILE))?;
    println!("{summary}");
    Ok(())
}

fn feasibility_cmd(a: FeasibilityArgs, mut r: Resolver) -> Result<()> {
    let data = r.required_path("data", a.data, "DIR")?;
    let out = r.required_path("out", a.out, "FILE")?;
    let source = r.value("source", a.source, "offline".to_string())?;

    let mut manifest = ManifestBuilder::new("feasibility");
    let (vocab, _) = load_dataset(&data, &mut manifest)?;
    let start = Instant::now();
    let table = match source.as_str() {
        "offline" => {
            let input = r.required_path("in", a.input, "FILE")?;
            let (table, _) = load_feasibility(&input, &vocab).with_context(|| format!("--in {}", input.display()))?;
            manifest.input(&input)?;
            table
        }
        "remote" => {
            let d = ClientConfig::default();
            let base_url = r.value("base-url", a.base_url, DEFAULT_BASE_URL.to_string())?;
            let max_in_flight = r.value("max-in-flight", a.max_in_flight, d.max_in_flight)?;
            if max_in_flight == 0 {
                return Err(ConfigError::new("--max-in-flight must be at least 1").into());
            }
            let explicit = r.optional_path("cache", a.cache)?;
            let cache = RelatednessCache::open(cache_path(explicit.as_deref()))?;
            let client = RelatednessClient::http(ClientConfig {
                base_url,
                max_in_flight,
                ..d
            });
            let (table, stats) = fetch_table(&client, &vocab, &cache)?;
            println!(
                "{} pairs from cache {}, {} fetched in {} requests",
                stats.cache_hits,
                cache.path().display(),
                stats.fetched,
                client.requests()
            );
            table
        }
        other => {
            return Err(ConfigError::new(format!("--source {other:?}: expected offline or remote")).into());
        }
    };
    manifest.time("build", start);
    save_feasibility(&table, &vocab, &out)?;
    manifest.output(&out)?;
    let manifest_path = PathBuf::from(format!("{}.manifest.json", out.display()));
    manifest.finish(r.into_resolved(), &manifest_path)?;
    Ok(())
}

fn ablate_cmd(a: AblateArgs, mut r: Resolver) -> Result<()> {
    let (cfg, dword) = resolve_training(&a.model, &mut r, false)?;
    let heads = r.list("heads-grid", a.heads_grid)?;
    let depth = r.list("depth-grid", a.depth_grid)?;
    let grids: Vec<(AblationAxis, Vec<usize>)> = [(AblationAxis::Heads, heads), (AblationAxis::Depth, depth)]
        .into_iter()
        .filter_map(|(axis, g)| g.map(|g| (axis, g)))
        .collect();
    if grids.is_empty() {
        return Err(ConfigError::new("empty grid: give --heads-grid and/or --depth-grid").into());
    }
    if let Some((axis, _)) = grids.iter().find(|(_, g)| g.is_empty()) {
        return Err(ConfigError::new(format!("empty --{}-grid", axis.name())).into());
    }
    let (data, embedding_paths) = resolve_input_paths(&a.model, &mut r)?;
    let out = r.required_path("out", a.out, "DIR")?;

    let mut manifest = ManifestBuilder::new("ablate");
    manifest.seed(cfg.seed);
    let inputs = load_inputs(&data, &embedding_paths, dword, &mut manifest)?;
    create_dir(&out)?;
    for (axis, grid) in &grids {
        let start = Instant::now();
        let rows = ablate(&cfg, *axis, grid, &inputs.vocab, &inputs.dataset, &inputs.embeddings)?;
        manifest.time(axis.name(), start);
        let path = out.join(format!("{}.csv", axis.name()));
        std::fs::write(&path, format_ablation_csv(*axis, &rows)).with_context(|| format!("writing {}", path.display()))?;
        manifest.output(&path)?;
        for row in rows {
            println!("{} {}: HM {:.1}", axis.name(), row.value, 100.0 * row.hm);
        }
    }
    manifest.finish(r.into_resolved(), &out.join(MANIFEST_FILE))?;
    Ok(())
}
