//! Command-line front end.

use std::collections::HashSet;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode, LatentCode};
use crate::error::{Error, Result};
use crate::manipulate::{self, latent_checksum, Sidecar};
use crate::metrics::{self, SetReport};
use crate::moldata::{center, load_xyz, save_xyz, AtomCountPrior, AtomVocabulary, Molecule};
use crate::tensor::Tensor;
use crate::training::checkpoint::file_hash;
use crate::training::{train, Checkpoint, Model, TrainConfig, TrainOptions, Trainer};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
/// Relative data paths that do not exist are looked up under this directory.
pub const DATA_DIR_ENV: &str = "MOLFLAE_DATA_DIR";

#[derive(Debug, Parser)]
#[command(name = "molflae", version, about = "Latent autoencoding and manipulation of 3D molecules")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// key=value config file (train only)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Sampling steps
    #[arg(long, global = true, default_value_t = 100)]
    pub steps: usize,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; defaults to the number of logical cores
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from an XYZ dataset
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        /// Config override, repeatable
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Continue from --checkpoint instead of starting fresh
        #[arg(long)]
        resume: bool,
    },
    /// Decode samples from the latent prior
    Sample {
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Write posterior latents of each input molecule as JSON
    Encode {
        #[arg(long)]
        input: PathBuf,
    },
    /// Decode latents produced by `encode`
    Decode {
        #[arg(long)]
        latent: PathBuf,
        /// Atom count for every latent, instead of the recorded one
        #[arg(long)]
        atoms: Option<usize>,
    },
    /// Re-decode each input with a changed atom count
    Analog {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
        delta: i64,
    },
    /// Exchange coordinate and feature latents between two molecules
    Swap {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Decode along the straight latent path from A to B
    Interpolate {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 10)]
        points: usize,
        /// Decode only the blend at this weight on B, `count` times
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Rigid transform superposing A's latent nodes onto B's
    Align {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Dataset metrics for an XYZ file
    Eval {
        #[arg(long)]
        input: PathBuf,
        /// Comma-separated subset of stability,validity,uniqueness,novelty
        #[arg(long, default_value = "stability,validity,uniqueness")]
        metrics: String,
        /// Reference set for novelty
        #[arg(long)]
        train: Option<PathBuf>,
        /// External similarity table (id_a,id_b,value) to summarise
        #[arg(long)]
        similarity: Option<PathBuf>,
        #[arg(long, default_value = "qm9")]
        vocab: String,
    },
}

impl Command {
    fn verb(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Sample { .. } => "sample",
            Command::Encode { .. } => "encode",
            Command::Decode { .. } => "decode",
            Command::Analog { .. } => "analog",
            Command::Swap { .. } => "swap",
            Command::Interpolate { .. } => "interpolate",
            Command::Align { .. } => "align",
            Command::Eval { .. } => "eval",
        }
    }
}

/// Latent record exchanged by `encode` and `decode`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentRecord {
    pub name: Option<String>,
    pub n_atoms: usize,
    pub centroid: [f64; 3],
    pub z_x: Vec<[f64; 3]>,
    pub sigma2_x: Vec<f64>,
    pub mu_h: Vec<Vec<f64>>,
    pub sigma2_h: Vec<Vec<f64>>,
    pub checkpoint_hash: String,
}

impl LatentRecord {
    pub fn code(&self) -> Result<LatentCode> {
        let d = self.mu_h.first().map_or(0, Vec::len);
        if self.mu_h.len() != self.z_x.len() || self.mu_h.iter().any(|r| r.len() != d) {
            return Err(Error::shape(format!("{} rows of width {d}", self.z_x.len()), "ragged mu_h"));
        }
        Ok(LatentCode {
            z_x: Tensor::from_rows(&self.z_x),
            z_h: Tensor::from_vec(self.mu_h.len(), d, self.mu_h.concat()),
        })
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows).map(|r| t.row(r).to_vec()).collect()
}

/// Parses `argv` (including the program name) and runs the command.
/// Returns 0 on success, 1 on usage errors and 2 on runtime errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn resolve_data(path: &Path) -> PathBuf {
    if path.is_relative() && !path.exists() {
        if let Some(dir) = std::env::var_os(DATA_DIR_ENV) {
            return Path::new(&dir).join(path);
        }
    }
    path.to_path_buf()
}

fn read_mols(path: &Path, vocab: &AtomVocabulary) -> Result<Vec<Molecule>> {
    let mols = load_xyz(resolve_data(path), vocab)?;
    if mols.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(mols)
}

fn read_one(path: &Path, vocab: &AtomVocabulary) -> Result<Molecule> {
    Ok(read_mols(path, vocab)?.swap_remove(0))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn out_dir(global: &Global) -> Result<PathBuf> {
    let dir = global.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn threads(global: &Global) -> usize {
    global
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1)
}

struct Loaded {
    model: Model,
    hash: String,
}

fn load_model(global: &Global) -> Result<Loaded> {
    let path = global
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("--checkpoint is required".into()))?;
    let ck = Checkpoint::load(path)?;
    Ok(Loaded {
        model: ck.model,
        hash: file_hash(path)?,
    })
}

/// Writes `run.txt` (tool version, verb, seed, steps, checkpoint hash) and `config.txt`.
fn record_run(dir: &Path, cli: &Cli, config: Option<&TrainConfig>, hash: Option<&str>) -> Result<()> {
    let g = &cli.global;
    let mut s = String::new();
    let _ = writeln!(s, "tool molflae {VERSION}");
    let _ = writeln!(s, "verb {}", cli.command.verb());
    let _ = writeln!(s, "seed {}", g.seed);
    let _ = writeln!(s, "steps {}", g.steps);
    let _ = writeln!(s, "checkpoint_hash {}", hash.unwrap_or("none"));
    let _ = writeln!(s, "options {:?}", cli.command);
    write(&dir.join("run.txt"), &s)?;
    if let Some(c) = config {
        write(&dir.join("config.txt"), &c.to_text())?;
    }
    Ok(())
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Runs `f(i)` for `0..count` on `threads` workers and returns results in index order.
fn par_map<T: Send>(count: usize, threads: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let threads = threads.min(count).max(1);
    if threads == 1 {
        return (0..count).map(&f).collect();
    }
    let f = &f;
    let chunks: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                s.spawn(move || {
                    let lo = w * count / threads;
                    let hi = (w + 1) * count / threads;
                    (lo..hi).map(f).collect::<Result<Vec<T>>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(count);
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

fn execute(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Train { data, val, set, resume } => cmd_train(cli, data, val.as_deref(), set, *resume),
        Command::Sample { count } => {
            let l = load_model(g)?;
            let dir = out_dir(g)?;
            let mols = par_map(*count, threads(g), |i| {
                manipulate::generate_one(&l.model, g.steps, &mut rng(g.seed, i as u64))
            })?;
            save_xyz(dir.join("samples.xyz"), &mols, &l.model.vocab)?;
            record_run(&dir, cli, Some(&l.model.config), Some(&l.hash))
        }
        Command::Encode { input } => {
            let l = load_model(g)?;
            let dir = out_dir(g)?;
            let mut recs = Vec::new();
            for m in read_mols(input, &l.model.vocab)? {
                let post = encode(&center(&m), &l.model.encoder, &l.model.store)?;
                recs.push(LatentRecord {
                    name: m.name.clone(),
                    n_atoms: m.num_atoms(),
                    centroid: m.centroid(),
                    z_x: post.mu_x.to_rows3(),
                    sigma2_x: post.sigma2_x.clone(),
                    mu_h: rows(&post.mu_h),
                    sigma2_h: rows(&post.sigma2_h),
                    checkpoint_hash: l.hash.clone(),
                });
            }
            write(&dir.join("latents.json"), &serde_json::to_string_pretty(&recs)?)?;
            record_run(&dir, cli, Some(&l.model.config), Some(&l.hash))
        }
        Command::Decode { latent, atoms } => {
            let l = load_model(g)?;
            let dir = out_dir(g)?;
            let text = fs::read_to_string(latent).map_err(|e| Error::io(latent, e))?;
            let recs: Vec<LatentRecord> = serde_json::from_str(&text)?;
            if recs.iter().any(|r| r.checkpoint_hash != l.hash) {
                log::warn!("latents were encoded with a different checkpoint");
            }
            let mols = par_map(recs.len(), threads(g), |i| {
                let r = &recs[i];
                let n = atoms.unwrap_or(r.n_atoms);
                let m = crate::bfn::decode(
                    &r.code()?,
                    n,
                    g.steps,
                    &l.model.schedule(),
                    &l.model.decoder,
                    &l.model.store,
                    &mut rng(g.seed, i as u64),
                )?;
                Ok(m.translated(r.centroid))
            })?;
            save_xyz(dir.join("decoded.xyz"), &mols, &l.model.vocab)?;
            record_run(&dir, cli, Some(&l.model.config), Some(&l.hash))
        }
        Command::Analog { input, delta } => {
            let l = load_model(g)?;
            let dir = out_dir(g)?;
            let inputs = read_mols(input, &l.model.vocab)?;
            let mols = par_map(inputs.len(), threads(g), |i| {
                manipulate::analog(&l.model, &inputs[i], *delta, g.steps, &mut rng(g.seed, i as u64))
            })?;
            save_xyz(dir.join("analogs.xyz"), &mols, &l.model.vocab)?;
            record_run(&dir, cli, Some(&l.model.config), Some(&l.hash))
        }
        Command::Swap { a, b } => {
            let l = load_model(g)?;
            let dir = out_dir(g)?;
            let (ma, mb) = (read_one(a, &l.model.vocab)?, read_one(b, &l.model.vocab)?);
            let (keep_xa, keep_xb) = manipulate::swap(&l.model, &ma, &mb, g.steps, &mut rng(g.seed, 0))?;
            save_xyz(dir.join("xa_hb.xyz"), &[keep_xa], &l.model.vocab)?;
            save_xyz(dir.join("xb_ha.xyz"), &[keep_xb], &l.model.vocab)?;
            record_run(&dir, cli, Some(&l.model.config), Some(&l.hash))
        }
        Command::Interpolate {
            a,
            b,
            points,
            lambda,
            count,
        } => cmd_interpolate(cli, a, b, *points, *lambda, *count),
        Command::Align { a, b } => {
            let l = load_model(g)?;
            let dir = out_dir(g)?;
            let (ma, mb) = (read_one(a, &l.model.vocab)?, read_one(b, &l.model.vocab)?);
            let t = manipulate::latent_align(&l.model, &ma, &mb)?;
            let json = serde_json::json!({
                "rotation": t.rotation,
                "translation": t.translation,
                "checkpoint_hash": l.hash,
            });
            let text = serde_json::to_string_pretty(&json)?;
            println!("{text}");
            write(&dir.join("transform.json"), &text)?;
            record_run(&dir, cli, Some(&l.model.config), Some(&l.hash))
        }
        Command::Eval {
            input,
            metrics: which,
            train: train_path,
            similarity,
            vocab,
        } => cmd_eval(cli, input, which, train_path.as_deref(), similarity.as_deref(), vocab),
    }
}

fn cmd_train(cli: &Cli, data: &Path, val: Option<&Path>, set: &[String], resume: bool) -> Result<()> {
    let g = &cli.global;
    let mut trainer = if resume {
        let path = g
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("--resume needs --checkpoint".into()))?;
        Trainer::from_checkpoint(Checkpoint::load(path)?)
    } else {
        let base = match &g.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        let mut pairs = Vec::new();
        for kv in set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            pairs.push((k.trim(), v.trim()));
        }
        let seed = g.seed.to_string();
        pairs.push(("seed", seed.as_str()));
        let config = base.with_overrides(pairs)?;
        let vocab = AtomVocabulary::named(&config.vocab)?;
        let train_set = read_mols(data, &vocab)?;
        let prior = AtomCountPrior::fit(&train_set)?;
        Trainer::new(Model::new(config, vocab, prior)?)
    };
    let vocab = trainer.model.vocab.clone();
    let train_set = read_mols(data, &vocab)?;
    let val_set = match val {
        Some(p) => read_mols(p, &vocab)?,
        None => Vec::new(),
    };
    let dir = out_dir(g)?;
    record_run(&dir, cli, Some(&trainer.model.config), None)?;
    let mut log = String::from("epoch,train_total,train_x,train_v,train_reg,val_total,lr\n");
    let opts = TrainOptions {
        checkpoint_dir: Some(dir.clone()),
        threads: threads(g),
    };
    let res = train(&mut trainer, &train_set, &val_set, &opts, |e| {
        let v = e.val.map_or(String::new(), |v| v.total.to_string());
        let _ = writeln!(
            log,
            "{},{},{},{},{},{},{}",
            e.epoch, e.train.total, e.train.recon_x, e.train.recon_v, e.train.reg, v, e.lr
        );
        eprintln!("epoch {} loss {:.4} lr {:.2e}", e.epoch, e.train.total, e.lr);
    });
    write(&dir.join("train_log.csv"), &log)?;
    res?;
    let hash = file_hash(dir.join("last.ckpt"))?;
    record_run(&dir, cli, Some(&trainer.model.config), Some(&hash))
}

/// Descriptor columns tracked along an interpolation.
const TREND_COLUMNS: [&str; 4] = ["sp3_fraction", "radius_of_gyration", "heavy_atoms", "similarity_preference"];

fn descriptors(m: &Molecule, a: &Molecule, b: &Molecule, vocab: &AtomVocabulary) -> Result<[f64; 4]> {
    let fp = metrics::fingerprint(m, vocab);
    let s_t = metrics::tanimoto(&fp, &metrics::fingerprint(b, vocab));
    let s_s = metrics::tanimoto(&fp, &metrics::fingerprint(a, vocab));
    Ok([
        metrics::sp3_fraction(m, vocab),
        metrics::radius_of_gyration(m),
        metrics::heavy_atom_count(m, vocab) as f64,
        metrics::similarity_preference(s_t, s_s).unwrap_or(0.0),
    ])
}

fn cmd_interpolate(cli: &Cli, a: &Path, b: &Path, points: usize, lambda: Option<f64>, count: usize) -> Result<()> {
    let g = &cli.global;
    let l = load_model(g)?;
    let vocab = &l.model.vocab;
    let dir = out_dir(g)?;
    let (ma, mb) = (read_one(a, vocab)?, read_one(b, vocab)?);
    if let Some(lam) = lambda {
        if !(0.0..=1.0).contains(&lam) {
            return Err(Error::InvalidArgument(format!("lambda must lie in [0, 1], got {lam}")));
        }
        let (za, zb) = (manipulate::encode_mean(&l.model, &ma)?, manipulate::encode_mean(&l.model, &mb)?);
        let z = za.lerp(&zb, lam)?;
        let n = ((1.0 - lam) * ma.num_atoms() as f64 + lam * mb.num_atoms() as f64 + 0.5).floor() as usize;
        let off = [0, 1, 2].map(|d| (1.0 - lam) * ma.centroid()[d] + lam * mb.centroid()[d]);
        let mols = par_map(count, threads(g), |i| {
            let m = crate::bfn::decode(&z, n, g.steps, &l.model.schedule(), &l.model.decoder, &l.model.store, &mut rng(g.seed, i as u64))?;
            Ok(m.translated(off))
        })?;
        save_xyz(dir.join("blend.xyz"), &mols, vocab)?;
        write(&dir.join("blend.json"), &Sidecar::new("interpolate", Some(lam), g.seed, &z).to_json())?;
        return record_run(&dir, cli, Some(&l.model.config), Some(&l.hash));
    }
    let mols = manipulate::interpolate(&l.model, &ma, &mb, points, g.steps, &mut rng(g.seed, 0))?;
    let (za, zb) = (manipulate::encode_mean(&l.model, &ma)?, manipulate::encode_mean(&l.model, &mb)?);
    let lats = manipulate::interpolation_latents(&za, &zb, points)?;
    let mut frames = String::from("index,lambda,n_atoms,latent_checksum");
    for c in TREND_COLUMNS {
        let _ = write!(frames, ",{c}");
    }
    frames.push('\n');
    let mut series = vec![Vec::new(); TREND_COLUMNS.len()];
    for (j, (m, (lam, z))) in mols.iter().zip(&lats).enumerate() {
        let d = descriptors(m, &ma, &mb, vocab)?;
        let _ = write!(frames, "{j},{lam},{},{}", m.num_atoms(), latent_checksum(z));
        for (k, v) in d.iter().enumerate() {
            let _ = write!(frames, ",{v}");
            series[k].push(*v);
        }
        frames.push('\n');
    }
    let da = descriptors(&ma, &ma, &mb, vocab)?;
    let db = descriptors(&mb, &ma, &mb, vocab)?;
    let mut trend = String::from("property,sign,pearson_r,neg_log_p\n");
    for (k, name) in TREND_COLUMNS.iter().enumerate() {
        let sign = if db[k] >= da[k] { 1.0 } else { -1.0 };
        match metrics::pearson_trend(&series[k], sign, metrics::DEFAULT_NEG_LOG_P_CAP) {
            Ok(r) => {
                let _ = writeln!(trend, "{name},{sign},{},{}", r.pearson_r, r.neg_log_p);
            }
            Err(e) => {
                log::warn!("{name}: {e}");
                let _ = writeln!(trend, "{name},{sign},nan,nan");
            }
        }
    }
    save_xyz(dir.join("frames.xyz"), &mols, vocab)?;
    write(&dir.join("frames.csv"), &frames)?;
    write(&dir.join("trend.csv"), &trend)?;
    record_run(&dir, cli, Some(&l.model.config), Some(&l.hash))
}

fn cmd_eval(
    cli: &Cli,
    input: &Path,
    which: &str,
    train_path: Option<&Path>,
    similarity: Option<&Path>,
    vocab_name: &str,
) -> Result<()> {
    let g = &cli.global;
    let known = ["stability", "validity", "uniqueness", "novelty"];
    let wanted: Vec<&str> = which.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if let Some(bad) = wanted.iter().find(|w| !known.contains(w)) {
        return Err(Error::InvalidArgument(format!("unknown metric {bad:?}")));
    }
    let vocab = AtomVocabulary::named(vocab_name)?;
    let mols = read_mols(input, &vocab)?;
    let train_hashes: Option<HashSet<u64>> = match train_path {
        Some(p) => Some(read_mols(p, &vocab)?.iter().map(|m| metrics::canonical_hash(m, &vocab)).collect()),
        None if wanted.contains(&"novelty") => {
            return Err(Error::InvalidArgument("novelty needs --train".into()));
        }
        None => None,
    };
    let r = SetReport::compute(&mols, &vocab, train_hashes.as_ref())?;
    let mut csv = String::from("metric,value\n");
    let mut table = format!("molecules       {:>8}\n", r.count);
    let mut row = |name: &str, v: f64| {
        let _ = writeln!(csv, "{name},{v}");
        let _ = writeln!(table, "{name:<16}{:>8.2}", 100.0 * v);
    };
    if wanted.contains(&"stability") {
        row("atom_stability", r.atom_stability);
        row("mol_stability", r.mol_stability);
    }
    if wanted.contains(&"validity") {
        row("validity", r.validity);
    }
    if wanted.contains(&"uniqueness") {
        row("valid_unique", r.valid_unique);
    }
    if let (true, Some(n)) = (wanted.contains(&"novelty"), r.novelty) {
        row("novelty", n);
    }
    if let Some(p) = similarity {
        let sims = metrics::read_similarity_csv(p)?;
        if !sims.is_empty() {
            row("external_similarity_mean", sims.values().sum::<f64>() / sims.len() as f64);
        }
    }
    print!("{table}");
    let dir = out_dir(g)?;
    write(&dir.join("report.csv"), &csv)?;
    write(&dir.join("report.txt"), &table)?;
    record_run(&dir, cli, None, None)
}
