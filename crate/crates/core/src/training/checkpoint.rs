//! Self-describing checkpoint archive.
//!
//! Layout: a 32-byte header (magic, format version, manifest offset and length),
//! raw little-endian tensor blobs, then a UTF-8 manifest with the configuration,
//! vocabulary, atom-count prior, optimiser and RNG state, and one
//! `name dtype shape offset` record per tensor.

use std::fmt::Write as _;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::moldata::{AtomCountPrior, AtomVocabulary};
use crate::tensor::Tensor;
use crate::training::config::TrainConfig;
use crate::training::model::{LossParts, Model};
use crate::training::optim::{Adam, Plateau};

pub const MAGIC: &[u8; 8] = b"MOLFLAE\0";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 32;

/// Serializable position of a ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

/// Progress within the current epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Progress {
    pub epoch: usize,
    pub step: u64,
    /// Molecules of the current epoch already consumed.
    pub position: usize,
    pub epoch_sum: LossParts,
    pub epoch_count: usize,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub adam: Adam,
    pub plateau: Plateau,
    pub rng: RngState,
    pub progress: Progress,
}

fn f(v: f64) -> String {
    format!("{v:?}")
}

fn parse_f(s: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::Checkpoint(format!("bad number {s:?}")))
}

fn parse_u<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Checkpoint(format!("bad integer {s:?}")))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blobs: Vec<u8> = Vec::new();
        let mut records = String::new();
        let store = &self.model.store;
        let mut push = |name: String, t: &Tensor, blobs: &mut Vec<u8>| {
            let offset = HEADER_LEN + blobs.len();
            for v in &t.data {
                blobs.extend_from_slice(&v.to_le_bytes());
            }
            let _ = writeln!(records, "{name} f64 {}x{} {offset}", t.rows, t.cols);
        };
        for (name, t) in store.iter() {
            push(format!("param/{name}"), t, &mut blobs);
        }
        for (id, m) in store.ids().zip(&self.adam.m) {
            push(format!("adam.m/{}", store.name(id)), m, &mut blobs);
        }
        for (id, v) in store.ids().zip(&self.adam.v) {
            push(format!("adam.v/{}", store.name(id)), v, &mut blobs);
        }

        let mut m = String::new();
        let _ = writeln!(m, "format-version {FORMAT_VERSION}");
        let _ = writeln!(m, "[config]");
        m.push_str(&self.model.config.to_text());
        let _ = writeln!(m, "[vocab]");
        m.push_str(&self.model.vocab.to_table_text());
        let _ = writeln!(m, "[prior]");
        let _ = writeln!(m, "{}", self.model.prior.to_text());
        let _ = writeln!(m, "[state]");
        let a = &self.adam;
        let _ = writeln!(
            m,
            "adam {} {} {} {} {} {}",
            f(a.lr),
            f(a.beta1),
            f(a.beta2),
            f(a.eps),
            f(a.weight_decay),
            a.step
        );
        let p = &self.plateau;
        let _ = writeln!(
            m,
            "plateau {} {} {} {} {} {}",
            f(p.factor),
            p.patience,
            f(p.min_lr),
            f(p.threshold),
            f(p.best),
            p.bad
        );
        let _ = writeln!(m, "rng {} {} {}", hex::encode(self.rng.seed), self.rng.stream, self.rng.word_pos);
        let g = &self.progress;
        let s = &g.epoch_sum;
        let _ = writeln!(
            m,
            "progress {} {} {} {} {} {} {} {}",
            g.epoch,
            g.step,
            g.position,
            g.epoch_count,
            f(s.total),
            f(s.recon_x),
            f(s.recon_v),
            f(s.reg)
        );
        let _ = writeln!(m, "[tensors]");
        m.push_str(&records);

        let manifest_offset = (HEADER_LEN + blobs.len()) as u64;
        let mut out = Vec::with_capacity(HEADER_LEN + blobs.len() + m.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(&manifest_offset.to_le_bytes());
        out.extend_from_slice(&(m.len() as u64).to_le_bytes());
        out.extend_from_slice(&blobs);
        out.extend_from_slice(m.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint archive"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(8);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let off = u64_at(16) as usize;
        let len = u64_at(24) as usize;
        if off.checked_add(len) != Some(bytes.len()) {
            return Err(bad("manifest bounds do not match file size"));
        }
        let manifest = std::str::from_utf8(&bytes[off..]).map_err(|_| bad("manifest is not UTF-8"))?;

        let mut sections: Vec<(&str, Vec<&str>)> = Vec::new();
        let mut lines = manifest.lines();
        if lines.next() != Some(&format!("format-version {FORMAT_VERSION}")) {
            return Err(bad("missing manifest version"));
        }
        for line in lines {
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                sections.push((name, Vec::new()));
            } else if let Some(last) = sections.last_mut() {
                last.1.push(line);
            } else {
                return Err(bad("manifest line outside a section"));
            }
        }
        let section = |name: &str| {
            sections
                .iter()
                .find(|s| s.0 == name)
                .map(|s| s.1.clone())
                .ok_or_else(|| Error::Checkpoint(format!("missing [{name}] section")))
        };

        let config = TrainConfig::parse(&section("config")?.join("\n"))?;
        let vocab = AtomVocabulary::from_table_text(&section("vocab")?.join("\n"))?;
        let prior = AtomCountPrior::from_text(&section("prior")?.join(" "))?;
        let mut model = Model::new(config, vocab, prior)?;

        let mut adam = Adam::new(model.store.tensors(), 0.0, 0.0, 0.0, 0.0);
        let mut plateau = Plateau::new(0.5, 1, 0.0);
        let mut rng = None;
        let mut progress = Progress::default();
        for line in section("state")? {
            let tok: Vec<&str> = line.split_whitespace().collect();
            match tok.as_slice() {
                ["adam", lr, b1, b2, eps, wd, step] => {
                    adam.lr = parse_f(lr)?;
                    adam.beta1 = parse_f(b1)?;
                    adam.beta2 = parse_f(b2)?;
                    adam.eps = parse_f(eps)?;
                    adam.weight_decay = parse_f(wd)?;
                    adam.step = parse_u(step)?;
                }
                ["plateau", factor, patience, min_lr, threshold, best, nbad] => {
                    plateau = Plateau {
                        factor: parse_f(factor)?,
                        patience: parse_u(patience)?,
                        min_lr: parse_f(min_lr)?,
                        threshold: parse_f(threshold)?,
                        best: parse_f(best)?,
                        bad: parse_u(nbad)?,
                    };
                }
                ["rng", seed, stream, pos] => {
                    let raw = hex::decode(seed).map_err(|_| bad("bad rng seed"))?;
                    rng = Some(RngState {
                        seed: raw.try_into().map_err(|_| bad("rng seed must be 32 bytes"))?,
                        stream: parse_u(stream)?,
                        word_pos: parse_u(pos)?,
                    });
                }
                ["progress", epoch, step, position, count, total, rx, rv, reg] => {
                    progress = Progress {
                        epoch: parse_u(epoch)?,
                        step: parse_u(step)?,
                        position: parse_u(position)?,
                        epoch_count: parse_u(count)?,
                        epoch_sum: LossParts {
                            total: parse_f(total)?,
                            recon_x: parse_f(rx)?,
                            recon_v: parse_f(rv)?,
                            reg: parse_f(reg)?,
                        },
                    };
                }
                _ => return Err(Error::Checkpoint(format!("unrecognised state line {line:?}"))),
            }
        }
        let rng = rng.ok_or_else(|| bad("missing rng state"))?;

        let n = model.store.len();
        let mut seen = vec![[false; 3]; n];
        for line in section("tensors")? {
            let tok: Vec<&str> = line.split_whitespace().collect();
            let [name, dtype, shape, offset] = tok.as_slice() else {
                return Err(Error::Checkpoint(format!("bad tensor record {line:?}")));
            };
            if *dtype != "f64" {
                return Err(Error::Checkpoint(format!("unsupported dtype {dtype}")));
            }
            let (rows, cols) = shape.split_once('x').ok_or_else(|| bad("bad tensor shape"))?;
            let (rows, cols): (usize, usize) = (parse_u(rows)?, parse_u(cols)?);
            let offset: usize = parse_u(offset)?;
            let end = offset + rows * cols * 8;
            if offset < HEADER_LEN || end > off {
                return Err(Error::Checkpoint(format!("tensor {name} out of bounds")));
            }
            let data: Vec<f64> = bytes[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let (kind, pname) = name.split_once('/').ok_or_else(|| bad("bad tensor name"))?;
            let id = model
                .store
                .id(pname)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {pname}")))?;
            let slot = match kind {
                "param" => 0,
                "adam.m" => 1,
                "adam.v" => 2,
                _ => return Err(Error::Checkpoint(format!("unknown tensor kind {kind}"))),
            };
            let target = match slot {
                0 => model.store.get_mut(id),
                1 => &mut adam.m[id.index()],
                _ => &mut adam.v[id.index()],
            };
            if target.shape() != (rows, cols) {
                return Err(Error::shape(format!("{:?} for {pname}", target.shape()), format!("{rows}x{cols}")));
            }
            target.data = data;
            seen[id.index()][slot] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s.iter().all(|b| *b)) {
            return Err(Error::Checkpoint(format!(
                "missing tensors for parameter {}",
                model.store.iter().nth(i).map(|p| p.0).unwrap_or("?")
            )));
        }
        Ok(Checkpoint {
            model,
            adam,
            plateau,
            rng,
            progress,
        })
    }

    /// Writes through a temporary file so an interrupted save never clobbers the previous archive.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Hex SHA-256 of a checkpoint file's bytes.
pub fn file_hash(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
