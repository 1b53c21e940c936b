//! Latent-space operations on a trained model: prior sampling, analogs,
//! component swaps, interpolation and latent alignment.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bfn::decode;
use crate::encoder::{encode, sample_latent, LatentCode};
use crate::error::{Error, Result};
use crate::geom::{weighted_kabsch, RigidTransform};
use crate::moldata::{center, Molecule};
use crate::tensor::Tensor;
use crate::training::Model;

/// Which molecule each half of an assembled latent came from.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridLatent {
    pub x_source: String,
    pub h_source: String,
    pub code: LatentCode,
}

impl HybridLatent {
    pub fn new(x_source: &str, z_x: &LatentCode, h_source: &str, z_h: &LatentCode) -> Result<Self> {
        if z_x.z_x.shape() != z_h.z_x.shape() || z_x.z_h.shape() != z_h.z_h.shape() {
            return Err(Error::shape(
                format!("{:?}", z_x.z_x.shape()),
                format!("{:?}", z_h.z_x.shape()),
            ));
        }
        Ok(HybridLatent {
            x_source: x_source.to_string(),
            h_source: h_source.to_string(),
            code: LatentCode {
                z_x: z_x.z_x.clone(),
                z_h: z_h.z_h.clone(),
            },
        })
    }
}

/// Provenance record written next to a decoded molecule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub op: String,
    pub lambda: Option<f64>,
    pub seed: u64,
    pub latent_checksum: String,
}

impl Sidecar {
    pub fn new(op: &str, lambda: Option<f64>, seed: u64, code: &LatentCode) -> Self {
        Sidecar {
            op: op.to_string(),
            lambda,
            seed,
            latent_checksum: latent_checksum(code),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sidecar serialises")
    }
}

/// SHA-256 over the little-endian bytes of `z_x` then `z_h`.
pub fn latent_checksum(code: &LatentCode) -> String {
    let mut h = Sha256::new();
    for v in code.z_x.data.iter().chain(&code.z_h.data) {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, var: f64) -> Tensor {
    let s = var.sqrt();
    let data = (0..rows * cols)
        .map(|_| s * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect();
    Tensor::from_vec(rows, cols, data)
}

/// One draw from the latent prior `N(0, var_x I) x N(0, var_h I)`.
pub fn prior_latent<R: Rng + ?Sized>(model: &Model, rng: &mut R) -> LatentCode {
    let c = &model.config;
    LatentCode {
        z_x: normal(rng, c.n_z, 3, c.var_x),
        z_h: normal(rng, c.n_z, c.d_z, c.var_h),
    }
}

fn decode_with<R: Rng + ?Sized>(model: &Model, z: &LatentCode, n_atoms: usize, steps: usize, rng: &mut R) -> Result<Molecule> {
    decode(z, n_atoms, steps, &model.schedule(), &model.decoder, &model.store, rng)
}

/// Prior samples decoded with atom counts drawn from the count prior.
pub fn generate<R: Rng + ?Sized>(model: &Model, count: usize, steps: usize, rng: &mut R) -> Result<Vec<Molecule>> {
    (0..count).map(|_| generate_one(model, steps, rng)).collect()
}

/// A single prior sample: latent, then atom count, then decoding, all from `rng`.
pub fn generate_one<R: Rng + ?Sized>(model: &Model, steps: usize, rng: &mut R) -> Result<Molecule> {
    let z = prior_latent(model, rng);
    let n = model.prior.sample(rng);
    decode_with(model, &z, n, steps, rng)
}

/// Posterior mean of the centred molecule.
pub fn encode_mean(model: &Model, mol: &Molecule) -> Result<LatentCode> {
    Ok(encode(&center(mol), &model.encoder, &model.store)?.mean())
}

/// One posterior sample of the centred molecule.
pub fn encode_sample<R: Rng + ?Sized>(model: &Model, mol: &Molecule, rng: &mut R) -> Result<LatentCode> {
    let post = encode(&center(mol), &model.encoder, &model.store)?;
    Ok(sample_latent(&post, rng))
}

/// Re-decodes `mol` with `delta` extra atoms. The output is placed in the input's frame.
pub fn analog<R: Rng + ?Sized>(model: &Model, mol: &Molecule, delta: i64, steps: usize, rng: &mut R) -> Result<Molecule> {
    let n = mol.num_atoms() as i64 + delta;
    if n < 1 {
        return Err(Error::InvalidArgument(format!(
            "{} atoms with delta {delta} leaves {n}",
            mol.num_atoms()
        )));
    }
    let z = encode_mean(model, mol)?;
    Ok(decode_with(model, &z, n as usize, steps, rng)?.translated(mol.centroid()))
}

/// Decodes `(z_h^B, z_x^A)` with B's atom count and `(z_h^A, z_x^B)` with A's.
/// Each output sits in the frame of its coordinate donor.
pub fn swap<R: Rng + ?Sized>(
    model: &Model,
    a: &Molecule,
    b: &Molecule,
    steps: usize,
    rng: &mut R,
) -> Result<(Molecule, Molecule)> {
    let (za, zb) = (encode_mean(model, a)?, encode_mean(model, b)?);
    let keep_xa = HybridLatent::new("a", &za, "b", &zb)?;
    let keep_xb = HybridLatent::new("b", &zb, "a", &za)?;
    let first = decode_with(model, &keep_xa.code, b.num_atoms(), steps, rng)?.translated(a.centroid());
    let second = decode_with(model, &keep_xb.code, a.num_atoms(), steps, rng)?.translated(b.centroid());
    Ok((first, second))
}

/// `round(lerp(n_a, n_b, j / (points - 1)))` with ties rounded up, in exact integer arithmetic.
pub fn interpolated_count(n_a: usize, n_b: usize, j: usize, points: usize) -> usize {
    let den = (points - 1) as u64;
    let num = n_a as u64 * (den - j as u64) + n_b as u64 * j as u64;
    ((2 * num + den) / (2 * den)) as usize
}

/// `points` evenly spaced latents from `za` to `zb`; endpoints are the inputs themselves.
pub fn interpolation_latents(za: &LatentCode, zb: &LatentCode, points: usize) -> Result<Vec<(f64, LatentCode)>> {
    if points < 2 {
        return Err(Error::InvalidArgument(format!("interpolation needs at least 2 points, got {points}")));
    }
    (0..points)
        .map(|j| {
            let lambda = j as f64 / (points - 1) as f64;
            let z = if j == 0 {
                za.clone()
            } else if j == points - 1 {
                zb.clone()
            } else {
                za.lerp(zb, lambda)?
            };
            Ok((lambda, z))
        })
        .collect()
}

/// One decoded molecule per interpolation point, decoded in order from a single rng stream.
pub fn interpolate<R: Rng + ?Sized>(
    model: &Model,
    a: &Molecule,
    b: &Molecule,
    points: usize,
    steps: usize,
    rng: &mut R,
) -> Result<Vec<Molecule>> {
    let (za, zb) = (encode_mean(model, a)?, encode_mean(model, b)?);
    let (ca, cb) = (a.centroid(), b.centroid());
    interpolation_latents(&za, &zb, points)?
        .into_iter()
        .enumerate()
        .map(|(j, (lambda, z))| {
            let n = interpolated_count(a.num_atoms(), b.num_atoms(), j, points);
            let off = [0, 1, 2].map(|d| (1.0 - lambda) * ca[d] + lambda * cb[d]);
            Ok(decode_with(model, &z, n, steps, rng)?.translated(off))
        })
        .collect()
}

/// Rigid motion superposing A's latent nodes onto B's, each in its molecule's own frame.
pub fn latent_align(model: &Model, a: &Molecule, b: &Molecule) -> Result<RigidTransform> {
    let frame = |m: &Molecule| -> Result<Vec<[f64; 3]>> {
        let c = m.centroid();
        Ok(encode_mean(model, m)?
            .z_x
            .to_rows3()
            .into_iter()
            .map(|p| [p[0] + c[0], p[1] + c[1], p[2] + c[2]])
            .collect())
    };
    let (pa, pb) = (frame(a)?, frame(b)?);
    weighted_kabsch(&pa, &pb, &vec![1.0; pa.len()])
}
