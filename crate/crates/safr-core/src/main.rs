//! `safr` command line: ingest, train, evaluate, SRS protocols, sweeps,
//! capacity reports, visualizations, and a gradient self-check.
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use safr_core::config::RunConfig;
use safr_core::data::{carve_dev, ingest, load_tsv, Dataset};
use safr_core::eval;
use safr_core::model::{Model, ModelConfig};
use safr_core::synth;
use safr_core::train::{grad_check, train};
use safr_core::viz::{self, VizSpec};

#[derive(Parser)]
#[command(
    name = "safr",
    version,
    about = "Superposition-aware feature regularization workbench"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags shared by every subcommand. File values override defaults;
/// these flags override file values.
#[derive(Args, Clone)]
struct Common {
    /// Config file (flat key=value lines, '#' comments)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra overrides as key=value; repeatable, applied in order
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Master seed for every random stream [config default: 0]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory [default: $SAFR_OUT_DIR or ./out]
    #[arg(long, global = true)]
    out_dir: Option<String>,
    /// Training split TSV (label<TAB>text)
    #[arg(long, global = true)]
    train_tsv: Option<String>,
    /// Test split TSV (label<TAB>text)
    #[arg(long, global = true)]
    test_tsv: Option<String>,
    /// Binary dataset cache path
    #[arg(long, global = true)]
    cache: Option<String>,
    /// Importance regularizer weight [config default: 0.1]
    #[arg(long)]
    lambda_imp: Option<f64>,
    /// Interaction regularizer weight [config default: 0.1]
    #[arg(long)]
    lambda_inter: Option<f64>,
    /// Deletion percentage k [config default: 30]
    #[arg(long)]
    k: Option<f64>,
    /// Analysis layer: embedding|vmask|attention|fc1|fc2 [config default: fc1]
    #[arg(long)]
    layer: Option<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        for s in &self.sets {
            let (k, v) = s
                .split_once('=')
                .with_context(|| format!("--set expects key=value, got {s:?}"))?;
            cfg.set(k, v)?;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.out_dir {
            cfg.out_dir = v.clone();
        }
        if let Some(v) = &self.train_tsv {
            cfg.train_tsv = v.clone();
        }
        if let Some(v) = &self.test_tsv {
            cfg.test_tsv = v.clone();
        }
        if let Some(v) = &self.cache {
            cfg.cache = v.clone();
        }
        if let Some(v) = self.lambda_imp {
            cfg.lambda_imp = v;
        }
        if let Some(v) = self.lambda_inter {
            cfg.lambda_inter = v;
        }
        if let Some(v) = self.k {
            cfg.k = v;
        }
        if let Some(v) = &self.layer {
            cfg.set("layer", v)?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Tokenize and encode the corpus into a binary cache
    Ingest {
        #[command(flatten)]
        common: Common,
        /// Generate a synthetic sentiment corpus of this many training
        /// examples instead of reading TSVs (test split is a third as large)
        #[arg(long)]
        synth: Option<usize>,
    },
    /// Train a model; writes best checkpoint and training-log TSV
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Report test accuracy of a checkpoint
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Deletion protocol at one k; writes srs.tsv
    Srs {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Deletion protocol over k in {10,20,...,70}; writes srs.tsv
    Sensitivity {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Train one model per lambda grid cell; writes sweep.tsv
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Grid cells as "imp,inter" pairs separated by ';'
        #[arg(long, default_value = "0,0;0,0.1;0.1,0;0.1,0.1")]
        grid: String,
    },
    /// Mean capacity of high- vs low-importance tokens; writes capacity.tsv
    CapacityReport {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Fraction of tokens counted as important, by VMASK score
        #[arg(long, default_value_t = 0.3)]
        fraction: f64,
        /// Group by vocabulary type instead of raw occurrences
        #[arg(long)]
        per_type: bool,
    },
    /// Emit barchart, heatmap, token graph, and cross-layer SVG panels
    Viz {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Index of the test example to visualize
        #[arg(long, default_value_t = 0)]
        example: usize,
    },
    /// Compare analytic gradients against central finite differences
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Finite-difference step size
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(2);
    }
}

fn fnv_file(path: &Path) -> Result<u64> {
    let bytes =
        std::fs::read(path).with_context(|| format!("reading {} for hashing", path.display()))?;
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    Ok(h)
}

fn write_manifest(cfg: &RunConfig, subcommand: &str, artifacts: &[PathBuf]) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut text = format!("subcommand={subcommand}\n");
    text.push_str(&cfg.echo());
    if !cfg.cache.is_empty() && Path::new(&cfg.cache).exists() {
        text.push_str(&format!(
            "cache_hash={:016x}\n",
            fnv_file(Path::new(&cfg.cache))?
        ));
    }
    for a in artifacts {
        text.push_str(&format!("artifact={}\n", a.display()));
    }
    let path = cfg.out_path(&format!("manifest_{subcommand}.txt"));
    std::fs::write(&path, text)?;
    Ok(())
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    if !cfg.cache.is_empty() && Path::new(&cfg.cache).exists() {
        return Ok(Dataset::load_cache(Path::new(&cfg.cache))?);
    }
    if cfg.train_tsv.is_empty() || cfg.test_tsv.is_empty() {
        bail!("no dataset: set cache= to an existing cache, or train_tsv= and test_tsv=");
    }
    let train_raw = load_tsv(Path::new(&cfg.train_tsv), cfg.classes)?;
    let test_raw = load_tsv(Path::new(&cfg.test_tsv), cfg.classes)?;
    let (train_raw, dev_raw) = carve_dev(train_raw, cfg.dev_fraction, cfg.seed);
    let ds = ingest(
        &train_raw,
        &dev_raw,
        &test_raw,
        cfg.classes,
        cfg.min_freq as u32,
        cfg.max_len,
        cfg.seed,
    );
    if !cfg.cache.is_empty() {
        ds.save_cache(Path::new(&cfg.cache))?;
    }
    Ok(ds)
}

fn load_model(ckpt: &Path) -> Result<Model> {
    Model::load(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))
}

fn check_vocab(model: &Model, ds: &Dataset) -> Result<()> {
    if model.vocab.hash() != ds.vocab.hash() {
        bail!("checkpoint vocabulary does not match the dataset; re-ingest or retrain");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Ingest { common, synth } => {
            let cfg = common.resolve()?;
            if cfg.cache.is_empty() {
                bail!("ingest needs cache= (or --cache) to know where to write");
            }
            let ds = if let Some(n) = synth {
                let raw = synth::generate(n, cfg.seed);
                let test = synth::generate(n / 3, cfg.seed.wrapping_add(1));
                let (train_raw, dev_raw) = carve_dev(raw, cfg.dev_fraction, cfg.seed);
                ingest(
                    &train_raw,
                    &dev_raw,
                    &test,
                    cfg.classes,
                    cfg.min_freq as u32,
                    cfg.max_len,
                    cfg.seed,
                )
            } else {
                if cfg.train_tsv.is_empty() || cfg.test_tsv.is_empty() {
                    bail!("ingest needs train_tsv= and test_tsv= (or --synth N)");
                }
                let train_raw = load_tsv(Path::new(&cfg.train_tsv), cfg.classes)?;
                let test_raw = load_tsv(Path::new(&cfg.test_tsv), cfg.classes)?;
                let (train_raw, dev_raw) = carve_dev(train_raw, cfg.dev_fraction, cfg.seed);
                ingest(
                    &train_raw,
                    &dev_raw,
                    &test_raw,
                    cfg.classes,
                    cfg.min_freq as u32,
                    cfg.max_len,
                    cfg.seed,
                )
            };
            ds.save_cache(Path::new(&cfg.cache))?;
            print!("{}", ds.manifest());
            write_manifest(&cfg, "ingest", &[PathBuf::from(&cfg.cache)])?;
        }
        Cmd::Train { common } => {
            let cfg = common.resolve()?;
            let ds = load_dataset(&cfg)?;
            let model_cfg: ModelConfig = cfg.model_config(ds.vocab.len());
            let (model, history) = train(model_cfg, &cfg.train_config(), &ds)?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            let ckpt = cfg.out_path("best.ck");
            model.save(&ckpt)?;
            let log = cfg.out_path("train_log.tsv");
            std::fs::write(&log, history.to_tsv())?;
            println!(
                "trained {} epochs (best epoch {}), dev_acc {:.4}, checkpoint {}",
                history.evals.len(),
                history.best_epoch,
                model.dev_acc,
                ckpt.display()
            );
            write_manifest(&cfg, "train", &[ckpt, log])?;
        }
        Cmd::Eval { common, ckpt } => {
            let cfg = common.resolve()?;
            let ds = load_dataset(&cfg)?;
            let model = load_model(&ckpt)?;
            check_vocab(&model, &ds)?;
            let acc = eval::accuracy(&model, &ds.test)?;
            println!("test_acc\t{:.4}", acc * 100.0);
            write_manifest(&cfg, "eval", &[])?;
        }
        Cmd::Srs { common, ckpt } => {
            let cfg = common.resolve()?;
            let ds = load_dataset(&cfg)?;
            let model = load_model(&ckpt)?;
            check_vocab(&model, &ds)?;
            let seeds = eval::default_random_seeds(cfg.seed);
            let report = eval::srs(&model, &ds.test, cfg.k, cfg.layer, &seeds)?;
            let tsv = eval::srs_tsv(std::slice::from_ref(&report));
            std::fs::create_dir_all(&cfg.out_dir)?;
            let out = cfg.out_path("srs.tsv");
            std::fs::write(&out, &tsv)?;
            print!("{tsv}");
            write_manifest(&cfg, "srs", &[out])?;
        }
        Cmd::Sensitivity { common, ckpt } => {
            let cfg = common.resolve()?;
            let ds = load_dataset(&cfg)?;
            let model = load_model(&ckpt)?;
            check_vocab(&model, &ds)?;
            let seeds = eval::default_random_seeds(cfg.seed);
            let ks: Vec<f64> = (1..=7).map(|i| 10.0 * i as f64).collect();
            let reports = eval::sensitivity_curve(&model, &ds.test, &ks, cfg.layer, &seeds)?;
            let tsv = eval::srs_tsv(&reports);
            std::fs::create_dir_all(&cfg.out_dir)?;
            let out = cfg.out_path("srs.tsv");
            std::fs::write(&out, &tsv)?;
            print!("{tsv}");
            write_manifest(&cfg, "sensitivity", &[out])?;
        }
        Cmd::Sweep { common, grid } => {
            let cfg = common.resolve()?;
            let ds = load_dataset(&cfg)?;
            let cells = parse_grid(&grid)?;
            let rows = eval::sweep(
                &ds,
                &cfg.model_config(ds.vocab.len()),
                &cfg.train_config(),
                &cells,
                cfg.k,
                cfg.layer,
            );
            let tsv = eval::sweep_tsv(&rows);
            std::fs::create_dir_all(&cfg.out_dir)?;
            let out = cfg.out_path("sweep.tsv");
            std::fs::write(&out, &tsv)?;
            print!("{tsv}");
            write_manifest(&cfg, "sweep", &[out])?;
        }
        Cmd::CapacityReport {
            common,
            ckpt,
            fraction,
            per_type,
        } => {
            let cfg = common.resolve()?;
            let ds = load_dataset(&cfg)?;
            let model = load_model(&ckpt)?;
            check_vocab(&model, &ds)?;
            let report = eval::capacity_report(&model, &ds.test, fraction, cfg.layer, per_type)?;
            let mut tsv = report.to_tsv();
            if per_type {
                tsv.push_str("token\tvmask\tcapacity\n");
                for (tok, p, c) in &report.records {
                    tsv.push_str(&format!("{tok}\t{p:.4}\t{c:.4}\n"));
                }
            }
            std::fs::create_dir_all(&cfg.out_dir)?;
            let out = cfg.out_path("capacity.tsv");
            std::fs::write(&out, &tsv)?;
            print!("{tsv}");
            write_manifest(&cfg, "capacity-report", &[out])?;
        }
        Cmd::Viz {
            common,
            ckpt,
            example,
        } => {
            let cfg = common.resolve()?;
            let ds = load_dataset(&cfg)?;
            let model = load_model(&ckpt)?;
            check_vocab(&model, &ds)?;
            let ex = ds
                .test
                .examples
                .get(example)
                .with_context(|| format!("test split has no example {example}"))?;
            let trace = model.trace(&ex.token_ids)?;
            let spec = VizSpec {
                edge_threshold: cfg.edge_threshold,
                layout_seed: cfg.layout_seed,
            };
            let dir = PathBuf::from(&cfg.out_dir);
            std::fs::create_dir_all(&dir)?;
            let id = format!("ex{example}");
            let layer = cfg.layer.name();
            let mut artifacts = vec![
                dir.join(format!("{id}_{layer}_barchart.svg")),
                dir.join(format!("{id}_{layer}_heatmap.svg")),
                dir.join(format!("{id}_{layer}_graph.svg")),
            ];
            viz::emit_capacity_barchart(&trace, &ex.tokens, cfg.layer, &artifacts[0])?;
            viz::emit_interference_heatmap(&trace, &ex.tokens, cfg.layer, &artifacts[1])?;
            viz::emit_token_graph(&trace, &ex.tokens, cfg.layer, &spec, &artifacts[2])?;
            artifacts.extend(viz::emit_cross_layer(&trace, &ex.tokens, &id, &dir)?);
            for a in &artifacts {
                println!("{}", a.display());
            }
            write_manifest(&cfg, "viz", &artifacts)?;
        }
        Cmd::GradCheck { common, step } => {
            let cfg = common.resolve()?;
            let ds = load_dataset(&cfg)?;
            let mut model_cfg = cfg.model_config(ds.vocab.len());
            model_cfg.dropout = 0.0; // finite differences need a fixed graph
            let model = Model::init(model_cfg, ds.vocab.clone())?;
            let ex = ds
                .test
                .examples
                .first()
                .context("test split is empty")?;
            let report = grad_check(
                &model,
                &ex.token_ids,
                ex.label,
                step,
                cfg.lambda_imp,
                cfg.lambda_inter,
            )?;
            println!(
                "max_rel_error\t{:.3e}\t({} entries)",
                report.max_rel_error, report.entries_checked
            );
            for (name, err) in &report.per_param {
                println!("{name}\t{err:.3e}");
            }
            write_manifest(&cfg, "grad-check", &[])?;
        }
    }
    Ok(())
}

fn parse_grid(grid: &str) -> Result<Vec<(f64, f64)>> {
    grid.split(';')
        .filter(|c| !c.trim().is_empty())
        .map(|cell| {
            let (a, b) = cell
                .split_once(',')
                .with_context(|| format!("grid cell {cell:?} is not imp,inter"))?;
            Ok((a.trim().parse()?, b.trim().parse()?))
        })
        .collect()
}
