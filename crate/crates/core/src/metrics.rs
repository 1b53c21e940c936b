//! Evaluation: bond inference, stability, validity, uniqueness, novelty,
//! shape overlap, descriptors and trend statistics.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};
use crate::moldata::{AtomVocabulary, Molecule};

pub const DEFAULT_NEG_LOG_P_CAP: f64 = 300.0;
const HASH_ROUNDS: usize = 8;
const SHAPE_SIGMA: f64 = 1.0;

/// Symmetric bond-order matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BondGraph {
    n: usize,
    order: Vec<u8>,
}

impl BondGraph {
    pub fn empty(n: usize) -> Self {
        BondGraph {
            n,
            order: vec![0; n * n],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn order(&self, i: usize, j: usize) -> u8 {
        self.order[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, o: u8) {
        assert!(i != j && o <= 3);
        self.order[i * self.n + j] = o;
        self.order[j * self.n + i] = o;
    }

    /// `(neighbor, order)` pairs of atom `i`.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = (usize, u8)> + '_ {
        (0..self.n).filter_map(move |j| {
            let o = self.order(i, j);
            (o > 0).then_some((j, o))
        })
    }

    pub fn valence(&self, i: usize) -> u32 {
        self.neighbors(i).map(|(_, o)| o as u32).sum()
    }

    pub fn is_connected(&self) -> bool {
        if self.n == 0 {
            return false;
        }
        let mut seen = vec![false; self.n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for (j, _) in self.neighbors(i) {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.iter().all(|s| *s)
    }
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Distance-table bond typing. A pair is bonded when its distance is below the
/// single-bond reference plus margin; double and triple orders are tested in turn
/// with their own margins, each only if the lower order matched.
pub fn infer_bonds(mol: &Molecule, vocab: &AtomVocabulary) -> BondGraph {
    let n = mol.num_atoms();
    let mut g = BondGraph::empty(n);
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (mol.types[i], mol.types[j]);
            let d = 100.0 * dist(&mol.coords[i], &mol.coords[j]);
            let Some(l1) = vocab.bond_length(a, b, 1) else {
                log::warn!(
                    "no bond length for {}-{}; treating as unbonded",
                    vocab.symbol(a),
                    vocab.symbol(b)
                );
                continue;
            };
            let mut order = 0;
            if d < l1 + vocab.margin_pm(1) {
                order = 1;
                if let Some(l2) = vocab.bond_length(a, b, 2) {
                    if d < l2 + vocab.margin_pm(2) {
                        order = 2;
                        if let Some(l3) = vocab.bond_length(a, b, 3) {
                            if d < l3 + vocab.margin_pm(3) {
                                order = 3;
                            }
                        }
                    }
                }
            }
            if order > 0 {
                g.set(i, j, order);
            }
        }
    }
    g
}

fn atom_ok(g: &BondGraph, mol: &Molecule, vocab: &AtomVocabulary, i: usize) -> bool {
    vocab.allowed_valences(mol.types[i]).contains(&g.valence(i))
}

/// Fraction of atoms whose bond-order sum is an allowed valence.
pub fn atom_stability(mol: &Molecule, vocab: &AtomVocabulary) -> f64 {
    let g = infer_bonds(mol, vocab);
    let ok = (0..mol.num_atoms()).filter(|&i| atom_ok(&g, mol, vocab, i)).count();
    ok as f64 / mol.num_atoms() as f64
}

pub fn mol_stability(mol: &Molecule, vocab: &AtomVocabulary) -> bool {
    let g = infer_bonds(mol, vocab);
    (0..mol.num_atoms()).all(|i| atom_ok(&g, mol, vocab, i))
}

/// Connected bond graph with every valence allowed.
pub fn validity(mol: &Molecule, vocab: &AtomVocabulary) -> bool {
    let g = infer_bonds(mol, vocab);
    g.is_connected() && (0..mol.num_atoms()).all(|i| atom_ok(&g, mol, vocab, i))
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn hash_seq(items: impl IntoIterator<Item = u64>) -> u64 {
    items.into_iter().fold(0x51_7C_C1_B7_27_22_0A_95, |h, v| splitmix(h ^ splitmix(v)))
}

/// Per-atom invariants after `rounds` of neighbourhood refinement.
fn atom_invariants(g: &BondGraph, mol: &Molecule, rounds: usize) -> Vec<Vec<u64>> {
    let n = mol.num_atoms();
    let mut cur: Vec<u64> = (0..n)
        .map(|i| {
            let mut orders: Vec<u64> = g.neighbors(i).map(|(_, o)| o as u64).collect();
            orders.sort_unstable();
            hash_seq(std::iter::once(mol.types[i] as u64 + 1).chain(orders))
        })
        .collect();
    let mut history = vec![cur.clone()];
    for _ in 0..rounds {
        let next: Vec<u64> = (0..n)
            .map(|i| {
                let mut env: Vec<u64> = g
                    .neighbors(i)
                    .map(|(j, o)| hash_seq([o as u64, cur[j]]))
                    .collect();
                env.sort_unstable();
                hash_seq(std::iter::once(cur[i]).chain(env))
            })
            .collect();
        cur = next;
        history.push(cur.clone());
    }
    history
}

/// Order-independent Morgan-style hash of the inferred bond graph.
pub fn canonical_hash(mol: &Molecule, vocab: &AtomVocabulary) -> u64 {
    let g = infer_bonds(mol, vocab);
    let inv = atom_invariants(&g, mol, HASH_ROUNDS);
    let mut last = inv[HASH_ROUNDS].clone();
    last.sort_unstable();
    hash_seq(std::iter::once(mol.num_atoms() as u64).chain(last))
}

/// Distinct canonical hashes among valid molecules over the number of valid molecules.
pub fn uniqueness(mols: &[Molecule], vocab: &AtomVocabulary) -> f64 {
    let hashes: Vec<u64> = mols
        .iter()
        .filter(|m| validity(m, vocab))
        .map(|m| canonical_hash(m, vocab))
        .collect();
    if hashes.is_empty() {
        return 0.0;
    }
    hashes.iter().collect::<HashSet<_>>().len() as f64 / hashes.len() as f64
}

/// Fraction of distinct valid hashes that are absent from `train_hashes`.
pub fn novelty(mols: &[Molecule], vocab: &AtomVocabulary, train_hashes: &HashSet<u64>) -> f64 {
    let unique: HashSet<u64> = mols
        .iter()
        .filter(|m| validity(m, vocab))
        .map(|m| canonical_hash(m, vocab))
        .collect();
    if unique.is_empty() {
        return 0.0;
    }
    unique.iter().filter(|h| !train_hashes.contains(h)).count() as f64 / unique.len() as f64
}

fn heavy_coords(mol: &Molecule, vocab: &AtomVocabulary) -> Vec<[f64; 3]> {
    mol.coords
        .iter()
        .zip(&mol.types)
        .filter(|(_, t)| vocab.is_heavy(**t))
        .map(|(c, _)| *c)
        .collect()
}

/// Sum of pairwise overlap integrals of unit-height Gaussians, up to a constant factor.
fn overlap(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let k = 1.0 / (4.0 * SHAPE_SIGMA * SHAPE_SIGMA);
    a.iter()
        .flat_map(|p| b.iter().map(move |q| (-k * dist(p, q).powi(2)).exp()))
        .sum()
}

/// Gaussian-volume Tanimoto on heavy atoms in the given frames (no alignment).
pub fn shape_similarity(a: &Molecule, b: &Molecule, vocab: &AtomVocabulary) -> Result<f64> {
    let (ha, hb) = (heavy_coords(a, vocab), heavy_coords(b, vocab));
    if ha.is_empty() || hb.is_empty() {
        return Err(Error::Degenerate("molecule without heavy atoms".into()));
    }
    let vab = 0.5 * (overlap(&ha, &hb) + overlap(&hb, &ha));
    let s = vab / (overlap(&ha, &ha) + overlap(&hb, &hb) - vab);
    Ok(s.clamp(0.0, 1.0))
}

/// Set of atom-environment hashes up to radius 2.
pub fn fingerprint(mol: &Molecule, vocab: &AtomVocabulary) -> BTreeSet<u64> {
    let g = infer_bonds(mol, vocab);
    atom_invariants(&g, mol, 2).into_iter().flatten().collect()
}

pub fn tanimoto(a: &BTreeSet<u64>, b: &BTreeSet<u64>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// `(s_t - s_s) / (s_t + s_s)`.
pub fn similarity_preference(s_t: f64, s_s: f64) -> Result<f64> {
    let den = s_t + s_s;
    if den == 0.0 {
        return Err(Error::Degenerate("similarities sum to zero".into()));
    }
    Ok((s_t - s_s) / den)
}

/// Carbons with exactly four single bonds over all carbons.
pub fn sp3_fraction(mol: &Molecule, vocab: &AtomVocabulary) -> f64 {
    let Some(c) = vocab.index_of("C") else {
        log::warn!("vocabulary has no carbon; sp3 fraction defined as 0");
        return 0.0;
    };
    let carbons: Vec<usize> = (0..mol.num_atoms()).filter(|&i| mol.types[i] == c).collect();
    if carbons.is_empty() {
        log::warn!("molecule without carbon; sp3 fraction defined as 0");
        return 0.0;
    }
    let g = infer_bonds(mol, vocab);
    let sp3 = carbons
        .iter()
        .filter(|&&i| {
            let nb: Vec<u8> = g.neighbors(i).map(|(_, o)| o).collect();
            nb.len() == 4 && nb.iter().all(|o| *o == 1)
        })
        .count();
    sp3 as f64 / carbons.len() as f64
}

/// Root-mean-square distance of all atoms to their centroid.
pub fn radius_of_gyration(mol: &Molecule) -> f64 {
    let c = mol.centroid();
    let s: f64 = mol.coords.iter().map(|p| dist(p, &c).powi(2)).sum();
    (s / mol.num_atoms() as f64).sqrt()
}

pub fn heavy_atom_count(mol: &Molecule, vocab: &AtomVocabulary) -> usize {
    mol.types.iter().filter(|t| vocab.is_heavy(**t)).count()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrendReport {
    pub pearson_r: f64,
    pub neg_log_p: f64,
}

/// Two-sided p-value of a Pearson correlation with `n` points.
pub fn pearson_p_value(r: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    let r2 = (r * r).min(1.0);
    if r2 >= 1.0 {
        return 0.0;
    }
    let t2 = df * r2 / (1.0 - r2);
    beta_reg(df / 2.0, 0.5, df / (df + t2))
}

/// Correlation of `values` with `sign * index`, with `-log10 p` capped at `cap`.
pub fn pearson_trend(values: &[f64], sign: f64, cap: f64) -> Result<TrendReport> {
    let n = values.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!("trend needs at least 3 points, got {n}")));
    }
    if sign != 1.0 && sign != -1.0 {
        return Err(Error::InvalidArgument("sign must be +1 or -1".into()));
    }
    let xs: Vec<f64> = (0..n).map(|i| sign * i as f64).collect();
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = values.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(values) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if syy == 0.0 || !syy.is_finite() {
        return Err(Error::Degenerate("constant values have no correlation".into()));
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let p = pearson_p_value(r, n);
    let nlp = if p <= 0.0 { cap } else { (-p.log10()).min(cap) };
    Ok(TrendReport {
        pearson_r: r,
        neg_log_p: nlp.max(0.0),
    })
}

/// Minimum-cost assignment of rows to distinct columns (`rows <= cols`).
/// Returns the column chosen for each row.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "assignment needs rows <= cols");
    let inf = f64::INFINITY;
    let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; m + 1]);
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] > 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// Agreement between a reference molecule and a reconstruction of the same size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Recovery {
    /// Fraction of matched pairs with equal types.
    pub type_accuracy: f64,
    /// Mean distance between matched atoms (Å).
    pub mean_distance: f64,
}

/// Matches atoms one-to-one by minimum total distance and scores the pairs.
pub fn recovery(reference: &Molecule, decoded: &Molecule) -> Result<Recovery> {
    let n = reference.num_atoms();
    if decoded.num_atoms() != n {
        return Err(Error::shape(format!("{n} atoms"), format!("{} atoms", decoded.num_atoms())));
    }
    let cost: Vec<Vec<f64>> = reference
        .coords
        .iter()
        .map(|a| decoded.coords.iter().map(|b| dist(a, b)).collect())
        .collect();
    let assign = min_cost_assignment(&cost);
    let mut same = 0;
    let mut total = 0.0;
    for (i, &j) in assign.iter().enumerate() {
        total += cost[i][j];
        if reference.types[i] == decoded.types[j] {
            same += 1;
        }
    }
    Ok(Recovery {
        type_accuracy: same as f64 / n as f64,
        mean_distance: total / n as f64,
    })
}

/// Dataset-level summary of generated or reference molecules.
#[derive(Clone, Debug, PartialEq)]
pub struct SetReport {
    pub count: usize,
    pub atom_stability: f64,
    pub mol_stability: f64,
    pub validity: f64,
    pub valid_unique: f64,
    pub novelty: Option<f64>,
}

impl SetReport {
    /// Atom stability is pooled over all atoms; the rest are per-molecule fractions.
    pub fn compute(mols: &[Molecule], vocab: &AtomVocabulary, train_hashes: Option<&HashSet<u64>>) -> Result<Self> {
        if mols.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (mut atoms, mut stable_atoms, mut stable_mols, mut valid) = (0usize, 0usize, 0usize, 0usize);
        let mut hashes = HashSet::new();
        for m in mols {
            let g = infer_bonds(m, vocab);
            let ok = (0..m.num_atoms()).filter(|&i| atom_ok(&g, m, vocab, i)).count();
            atoms += m.num_atoms();
            stable_atoms += ok;
            if ok == m.num_atoms() {
                stable_mols += 1;
                if g.is_connected() {
                    valid += 1;
                    hashes.insert(canonical_hash(m, vocab));
                }
            }
        }
        let n = mols.len() as f64;
        Ok(SetReport {
            count: mols.len(),
            atom_stability: stable_atoms as f64 / atoms as f64,
            mol_stability: stable_mols as f64 / n,
            validity: valid as f64 / n,
            valid_unique: hashes.len() as f64 / n,
            novelty: train_hashes.map(|_| novelty(mols, vocab, train_hashes.unwrap())),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let _ = writeln!(s, "count,{}", self.count);
        let _ = writeln!(s, "atom_stability,{}", self.atom_stability);
        let _ = writeln!(s, "mol_stability,{}", self.mol_stability);
        let _ = writeln!(s, "validity,{}", self.validity);
        let _ = writeln!(s, "valid_unique,{}", self.valid_unique);
        if let Some(nv) = self.novelty {
            let _ = writeln!(s, "novelty,{nv}");
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "molecules       {:>8}", self.count);
        let _ = writeln!(s, "atom stable (%) {:>8.2}", 100.0 * self.atom_stability);
        let _ = writeln!(s, "mol stable (%)  {:>8.2}", 100.0 * self.mol_stability);
        let _ = writeln!(s, "valid (%)       {:>8.2}", 100.0 * self.validity);
        let _ = writeln!(s, "V x U (%)       {:>8.2}", 100.0 * self.valid_unique);
        if let Some(nv) = self.novelty {
            let _ = writeln!(s, "novelty (%)     {:>8.2}", 100.0 * nv);
        }
        s
    }
}

/// Reads `id_a,id_b,value` rows produced by an external similarity tool. A header row is skipped.
pub fn read_similarity_csv(path: impl AsRef<Path>) -> Result<BTreeMap<(String, String), f64>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_similarity_csv(&text)
}

pub fn parse_similarity_csv(text: &str) -> Result<BTreeMap<(String, String), f64>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let [a, b, v] = cols.as_slice() else {
            return Err(Error::InvalidArgument(format!("similarity csv line {}: expected 3 columns", n + 1)));
        };
        match v.parse::<f64>() {
            Ok(x) => {
                out.insert((a.to_string(), b.to_string()), x);
            }
            Err(_) if n == 0 => continue,
            Err(_) => {
                return Err(Error::InvalidArgument(format!("similarity csv line {}: bad value {v:?}", n + 1)));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::random_rotation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> AtomVocabulary {
        AtomVocabulary::qm9()
    }

    fn mol(atoms: &[(&str, [f64; 3])]) -> Molecule {
        let v = vocab();
        Molecule::new(
            atoms.iter().map(|a| a.1).collect(),
            atoms.iter().map(|a| v.index_of(a.0).unwrap()).collect(),
            v.size(),
        )
        .unwrap()
    }

    fn methane() -> Molecule {
        let s = 1.09 / 3f64.sqrt();
        mol(&[
            ("C", [0.0, 0.0, 0.0]),
            ("H", [s, s, s]),
            ("H", [s, -s, -s]),
            ("H", [-s, s, -s]),
            ("H", [-s, -s, s]),
        ])
    }

    fn ethanol() -> Molecule {
        mol(&[
            ("C", [-0.0086, 1.5046, 0.0]),
            ("C", [0.0101, 0.0, 0.0]),
            ("O", [-1.3377, -0.4661, 0.0]),
            ("H", [1.0084, 1.9285, 0.0]),
            ("H", [-0.5289, 1.8756, 0.8854]),
            ("H", [-0.5289, 1.8756, -0.8854]),
            ("H", [0.5474, -0.3580, 0.8760]),
            ("H", [0.5474, -0.3580, -0.8760]),
            ("H", [-1.3377, -1.4261, 0.0]),
        ])
    }

    fn dimethyl_ether() -> Molecule {
        mol(&[
            ("O", [0.0, 0.0, 0.0]),
            ("C", [1.17, 0.66, 0.0]),
            ("C", [-1.17, 0.66, 0.0]),
            ("H", [2.03, -0.01, 0.0]),
            ("H", [1.22, 1.30, 0.89]),
            ("H", [1.22, 1.30, -0.89]),
            ("H", [-2.03, -0.01, 0.0]),
            ("H", [-1.22, 1.30, 0.89]),
            ("H", [-1.22, 1.30, -0.89]),
        ])
    }

    fn benzene() -> Molecule {
        let mut atoms = Vec::new();
        for i in 0..6 {
            let a = std::f64::consts::PI / 3.0 * i as f64;
            atoms.push(("C", [1.39 * a.cos(), 1.39 * a.sin(), 0.0]));
        }
        for i in 0..6 {
            let a = std::f64::consts::PI / 3.0 * i as f64;
            atoms.push(("H", [2.47 * a.cos(), 2.47 * a.sin(), 0.0]));
        }
        mol(&atoms)
    }

    #[test]
    fn carbon_pairs() {
        let v = vocab();
        let single = mol(&[("C", [0.0; 3]), ("C", [1.54, 0.0, 0.0])]);
        assert_eq!(infer_bonds(&single, &v).order(0, 1), 1);
        let far = mol(&[("C", [0.0; 3]), ("C", [3.0, 0.0, 0.0])]);
        assert_eq!(infer_bonds(&far, &v).order(0, 1), 0);
    }

    #[test]
    fn methane_and_lone_carbon() {
        let v = vocab();
        assert_eq!(atom_stability(&methane(), &v), 1.0);
        assert!(mol_stability(&methane(), &v));
        assert!(validity(&methane(), &v));
        let c = mol(&[("C", [0.0; 3])]);
        assert!(!mol_stability(&c, &v));
        assert_eq!(atom_stability(&c, &v), 0.0);
    }

    #[test]
    fn hashes_and_uniqueness() {
        let v = vocab();
        let e = ethanol();
        let d = dimethyl_ether();
        assert!(validity(&e, &v) && validity(&d, &v));
        assert_ne!(infer_bonds(&e, &v), infer_bonds(&d, &v));
        assert_ne!(canonical_hash(&e, &v), canonical_hash(&d, &v));
        let perm = [4, 2, 0, 8, 1, 6, 3, 7, 5];
        let p = Molecule::new(
            perm.iter().map(|&i| e.coords[i]).collect(),
            perm.iter().map(|&i| e.types[i]).collect(),
            v.size(),
        )
        .unwrap();
        assert_eq!(canonical_hash(&p, &v), canonical_hash(&e, &v));
        let dup = vec![e.clone(); 10];
        assert!((uniqueness(&dup, &v) - 0.1).abs() < 1e-12);
        let train: HashSet<u64> = [canonical_hash(&e, &v)].into();
        assert_eq!(novelty(&[e.clone(), d.clone()], &v, &train), 0.5);
    }

    #[test]
    fn shape_overlap_properties() {
        let v = vocab();
        let e = ethanol();
        assert!((shape_similarity(&e, &e, &v).unwrap() - 1.0).abs() < 1e-9);
        let a = mol(&[("C", [0.0; 3])]);
        let b = mol(&[("C", [100.0, 0.0, 0.0])]);
        assert!(shape_similarity(&a, &b, &v).unwrap() < 1e-6);
        let s2 = shape_similarity(&e, &e.translated([2.0, 0.0, 0.0]), &v).unwrap();
        let s1 = shape_similarity(&e, &e.translated([1.0, 0.0, 0.0]), &v).unwrap();
        assert!(s2 < s1 && s1 < 1.0);
        let d = dimethyl_ether();
        assert_eq!(shape_similarity(&e, &d, &v).unwrap(), shape_similarity(&d, &e, &v).unwrap());
        let h = mol(&[("H", [0.0; 3])]);
        assert!(shape_similarity(&h, &e, &v).is_err());
    }

    #[test]
    fn descriptors() {
        let v = vocab();
        assert_eq!(sp3_fraction(&methane(), &v), 1.0);
        assert_eq!(sp3_fraction(&benzene(), &v), 0.0);
        assert_eq!(sp3_fraction(&mol(&[("O", [0.0; 3])]), &v), 0.0);
        let two = mol(&[("C", [0.0; 3]), ("C", [2.0, 0.0, 0.0])]);
        assert!((radius_of_gyration(&two) - 1.0).abs() < 1e-12);
        assert_eq!(heavy_atom_count(&ethanol(), &v), 3);
    }

    #[test]
    fn preference_arithmetic() {
        assert_eq!(similarity_preference(0.4, 0.4).unwrap(), 0.0);
        assert_eq!(similarity_preference(1.0, 0.0).unwrap(), 1.0);
        assert!((similarity_preference(0.3, 0.1).unwrap() - 0.5).abs() < 1e-12);
        assert!(similarity_preference(0.0, 0.0).is_err());
    }

    #[test]
    fn trend_basics() {
        let r = pearson_trend(&[1.0, 2.0, 3.0, 4.0], 1.0, DEFAULT_NEG_LOG_P_CAP).unwrap();
        assert!((r.pearson_r - 1.0).abs() < 1e-12);
        assert_eq!(r.neg_log_p, DEFAULT_NEG_LOG_P_CAP);
        let r = pearson_trend(&[4.0, 3.0, 2.0, 1.0], -1.0, DEFAULT_NEG_LOG_P_CAP).unwrap();
        assert!((r.pearson_r - 1.0).abs() < 1e-12);
        assert!(pearson_trend(&[2.0; 5], 1.0, 300.0).is_err());
        assert!(pearson_trend(&[1.0, 2.0], 1.0, 300.0).is_err());
    }

    #[test]
    fn metrics_are_rigid_and_permutation_invariant() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = ethanol();
        let r = random_rotation(&mut rng).with_translation([1.0, -2.0, 0.5]);
        let moved = Molecule::new(e.coords.iter().map(|c| r.apply_point(*c)).collect(), e.types.clone(), v.size()).unwrap();
        assert_eq!(canonical_hash(&moved, &v), canonical_hash(&e, &v));
        assert!((sp3_fraction(&moved, &v) - sp3_fraction(&e, &v)).abs() < 1e-12);
        assert!((radius_of_gyration(&moved) - radius_of_gyration(&e)).abs() < 1e-9);
        assert_eq!(fingerprint(&moved, &v), fingerprint(&e, &v));
    }

    #[test]
    fn assignment_recovers_permutation() {
        let e = ethanol();
        let perm = [3, 5, 1, 0, 8, 2, 7, 6, 4];
        let p = Molecule::new(
            perm.iter().map(|&i| e.coords[i]).collect(),
            perm.iter().map(|&i| e.types[i]).collect(),
            5,
        )
        .unwrap();
        let r = recovery(&e, &p).unwrap();
        assert_eq!(r.type_accuracy, 1.0);
        assert!(r.mean_distance < 1e-12);
        let cost = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
        assert_eq!(min_cost_assignment(&cost), vec![1, 0, 2]);
    }

    #[test]
    fn set_report_relations() {
        let v = vocab();
        let mols = vec![ethanol(), dimethyl_ether(), ethanol(), mol(&[("C", [0.0; 3])])];
        let r = SetReport::compute(&mols, &v, None).unwrap();
        assert_eq!(r.mol_stability, 0.75);
        assert!(r.atom_stability >= r.mol_stability);
        assert!(r.valid_unique <= r.validity && r.validity <= 1.0);
        assert_eq!(r.valid_unique, 0.5);
        assert!(r.to_csv().contains("validity,0.75"));
    }

    #[test]
    fn similarity_csv() {
        let t = parse_similarity_csv("id_a,id_b,value\na,b,0.5\nb,c,1\n").unwrap();
        assert_eq!(t[&("a".to_string(), "b".to_string())], 0.5);
        assert_eq!(t.len(), 2);
        assert!(parse_similarity_csv("a,b\n").is_err());
        assert!(parse_similarity_csv("x,y,1\na,b,zz\n").is_err());
    }
}
