//! `weenie` command-line front end.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use weenie::align::{binarize_alignment, build_kernel_matrix, TrainingPair};
use weenie::features::{extract_hf_hr, extract_hf_lr};
use weenie::io::{
    load_manifest, load_wmod, load_wvol, resolve, save_manifest, save_wmod, save_wvol, write_json,
    PairEntry, TraceLog,
};
use weenie::joint::{train, TrainConfig};
use weenie::quality::evaluate;
use weenie::resample::{bicubic_resize, generate_phantoms, Modality, PhantomSpec};
use weenie::synth::{synthesize_volume, SynthesisConfig};
use weenie::Volume;

#[derive(Parser)]
#[command(name = "weenie", version, about = "Joint sparse-coding super-resolution and cross-modality synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired data set with a pairs.json manifest.
    Phantom(PhantomArgs),
    /// Pair source and target volumes by feature similarity.
    Align(AlignArgs),
    /// Learn filter banks and the mapping from a pairs manifest.
    Train(TrainArgs),
    /// Synthesize a target-domain volume from an LR source volume.
    Synth(SynthArgs),
    /// Report PSNR and SSIM of a prediction against a reference.
    Eval(EvalArgs),
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// In-plane and depth size of the HR volumes as ROWSxCOLSxDEPTH.
    #[arg(long, default_value = "32x32x4", value_parser = parse_size)]
    size: (usize, usize, usize),
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "sigmoid-remap")]
    modality: Modality,
    #[arg(long, default_value_t = 1.0)]
    registered_fraction: f64,
}

#[derive(Args)]
struct AlignArgs {
    #[arg(long)]
    source_dir: PathBuf,
    #[arg(long)]
    target_dir: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long)]
    out: PathBuf,
    /// Known registered pair as SOURCE:TARGET indices into the sorted file lists.
    #[arg(long = "registered", value_parser = parse_index_pair)]
    registered: Vec<(usize, usize)>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    pairs: PathBuf,
    /// JSON training configuration; absent fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Objective trace output.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    iters: usize,
    /// Keep values outside [0, 1].
    #[arg(long)]
    raw: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    peak: f64,
}

/// A failure with its process exit code.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl Failure {
    fn usage(err: impl Into<anyhow::Error>) -> Self {
        Self { code: 2, err: err.into() }
    }
}

impl From<weenie::Error> for Failure {
    fn from(e: weenie::Error) -> Self {
        use weenie::Error as E;
        let code = match &e {
            E::InvalidParameter(_)
            | E::DimensionMismatch(_)
            | E::FilterTooLarge { .. }
            | E::Empty(_)
            | E::Format(_)
            | E::Json(_) => 2,
            E::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
            _ => 1,
        };
        Self { code, err: e.into() }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        Self { code: 1, err }
    }
}

type CmdResult = Result<(), Failure>;

trait Ctx<T> {
    fn ctx(self, what: impl FnOnce() -> String) -> Result<T, Failure>;
}

impl<T> Ctx<T> for weenie::Result<T> {
    fn ctx(self, what: impl FnOnce() -> String) -> Result<T, Failure> {
        self.map_err(|e| {
            let mut f = Failure::from(e);
            f.err = f.err.context(what());
            f
        })
    }
}

fn parse_size(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split('x').collect();
    let dims = parts
        .iter()
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("'{p}': {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    match dims[..] {
        [r, c, d] if r > 0 && c > 0 && d > 0 => Ok((r, c, d)),
        _ => Err(format!("expected ROWSxCOLSxDEPTH with positive entries, got '{s}'")),
    }
}

fn parse_index_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| format!("expected SOURCE:TARGET, got '{s}'"))?;
    let p = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("'{t}': {e}"));
    Ok((p(a)?, p(b)?))
}

/// Loads a volume, min-max rescaling it when its values leave `[0, 1]`.
fn ingest(path: &Path) -> Result<Volume, Failure> {
    let v = load_wvol(path).ctx(|| format!("reading {}", path.display()))?;
    Ok(if v.voxels().all(|x| (0.0..=1.0).contains(&x)) {
        v
    } else {
        v.normalized()
    })
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(Failure::from)
}

fn cmd_phantom(a: PhantomArgs) -> CmdResult {
    let (rows, cols, depth) = a.size;
    let spec = PhantomSpec {
        rows,
        cols,
        depth,
        count: a.count,
        seed: a.seed,
        modality: a.modality,
        registered_fraction: a.registered_fraction,
        ..PhantomSpec::default()
    };
    let set = generate_phantoms(&spec)?;
    for sub in ["source", "target"] {
        create_dir(&a.out.join(sub))?;
    }
    let mut entries = Vec::with_capacity(set.pairs.len());
    for (i, p) in set.pairs.iter().enumerate() {
        let source = PathBuf::from(format!("source/{i:03}.wvol"));
        let target = PathBuf::from(format!("target/{i:03}.wvol"));
        save_wvol(&a.out.join(&source), &p.source).ctx(|| format!("writing {}", source.display()))?;
        save_wvol(&a.out.join(&target), &p.target).ctx(|| format!("writing {}", target.display()))?;
        entries.push(PairEntry {
            source,
            target,
            registered: p.registered,
            kernel: None,
        });
    }
    save_manifest(&a.out.join("pairs.json"), &entries).ctx(|| "writing pairs.json".into())?;
    println!(
        "wrote {} pairs ({} registered) to {}",
        entries.len(),
        set.registered_count(),
        a.out.display()
    );
    Ok(())
}

/// Sorted `.wvol` files of a directory.
fn list_volumes(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let rd = fs::read_dir(dir)
        .with_context(|| format!("reading directory {}", dir.display()))
        .map_err(Failure::usage)?;
    let mut files = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| Failure::from(anyhow!(e)))?.path();
        if path.extension().is_some_and(|e| e == "wvol") {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Failure::usage(anyhow!("no .wvol files in {}", dir.display())));
    }
    Ok(files)
}

fn absolute(p: &Path) -> Result<PathBuf, Failure> {
    fs::canonicalize(p)
        .with_context(|| format!("resolving {}", p.display()))
        .map_err(Failure::from)
}

fn cmd_align(a: AlignArgs) -> CmdResult {
    if !(a.sigma > 0.0) {
        return Err(Failure::usage(anyhow!("--sigma must be > 0, got {}", a.sigma)));
    }
    let src_files = list_volumes(&a.source_dir)?;
    let tgt_files = list_volumes(&a.target_dir)?;
    let sources = src_files.iter().map(|p| ingest(p)).collect::<Result<Vec<_>, _>>()?;
    let targets = tgt_files.iter().map(|p| ingest(p)).collect::<Result<Vec<_>, _>>()?;
    let xs = sources.iter().map(extract_hf_lr).collect::<Result<Vec<_>, _>>()?;
    let ys = targets.iter().map(extract_hf_hr).collect::<Result<Vec<_>, _>>()?;
    let am = binarize_alignment(&build_kernel_matrix(&xs, &ys, a.sigma)?);
    let mut known: Vec<Option<usize>> = vec![None; sources.len()];
    for &(p, q) in &a.registered {
        if p >= sources.len() || q >= targets.len() {
            return Err(Failure::usage(anyhow!("registered pair {p}:{q} out of range")));
        }
        known[p] = Some(q);
    }
    let mut entries = Vec::with_capacity(sources.len());
    for (p, file) in src_files.iter().enumerate() {
        let (q, registered, kernel) = match known[p] {
            Some(q) => (q, true, None),
            None => (am.matches()[p], false, Some(am.scores()[p])),
        };
        entries.push(PairEntry {
            source: absolute(file)?,
            target: absolute(&tgt_files[q])?,
            registered,
            kernel,
        });
    }
    save_manifest(&a.out, &entries).ctx(|| format!("writing {}", a.out.display()))?;
    println!("wrote {} pairs to {}", entries.len(), a.out.display());
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig, Failure> {
    let Some(path) = path else {
        return Ok(TrainConfig::default());
    };
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))
        .map_err(Failure::usage)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))
        .map_err(Failure::usage)
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let cfg = load_config(a.config.as_deref())?;
    cfg.validate().ctx(|| "invalid config".into())?;
    let manifest = load_manifest(&a.pairs).ctx(|| format!("reading manifest {}", a.pairs.display()))?;
    let pairs = manifest
        .iter()
        .map(|e| {
            Ok(TrainingPair {
                source: ingest(&resolve(&a.pairs, &e.source))?,
                target: ingest(&resolve(&a.pairs, &e.target))?,
                registered: e.registered,
                kernel: e.kernel,
            })
        })
        .collect::<Result<Vec<_>, Failure>>()?;
    let out = train(&pairs, &cfg)?;
    save_wmod(&a.out, &out.model).ctx(|| format!("writing {}", a.out.display()))?;
    if let Some(trace) = &a.trace {
        let log = TraceLog {
            iterations: out.trace.clone(),
        };
        write_json(trace, &log).ctx(|| format!("writing {}", trace.display()))?;
    }
    let first = out.trace.first().map(|b| b.total).unwrap_or(f64::NAN);
    let last = out.trace.last().map(|b| b.total).unwrap_or(f64::NAN);
    println!(
        "trained K={} d={} on {} pairs: objective {first:.6} -> {last:.6}",
        out.model.k(),
        out.model.d(),
        pairs.len()
    );
    if out.unconverged_sweeps > 0 {
        eprintln!(
            "note: {} inner sweeps stopped at the iteration limit",
            out.unconverged_sweeps
        );
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let model = load_wmod(&a.model).ctx(|| format!("reading model {}", a.model.display()))?;
    let input = ingest(&a.input)?;
    let cfg = SynthesisConfig {
        iters: a.iters,
        raw: a.raw,
        ..SynthesisConfig::for_model(&model)
    };
    cfg.validate().ctx(|| "invalid synthesis settings".into())?;
    let up = bicubic_resize(&input, 2.0)?;
    let out = synthesize_volume(&up, &model, &cfg)?;
    save_wvol(&a.out, &out).ctx(|| format!("writing {}", a.out.display()))?;
    let (r, c, d) = out.dims();
    println!("wrote {r}x{c}x{d} volume to {}", a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let pred = load_wvol(&a.pred).ctx(|| format!("reading {}", a.pred.display()))?;
    let reference = load_wvol(&a.reference).ctx(|| format!("reading {}", a.reference.display()))?;
    let report = evaluate(&pred, &reference, a.peak)?;
    if let Some(path) = &a.json {
        write_json(path, &report).ctx(|| format!("writing {}", path.display()))?;
    }
    println!("PSNR {:.4} dB  SSIM {:.6}", report.psnr_db, report.ssim);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Align(a) => cmd_align(a),
        Command::Train(a) => cmd_train(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
