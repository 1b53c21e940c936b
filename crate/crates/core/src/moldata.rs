//! Molecules, element vocabularies, XYZ I/O and the atom-count prior.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Shipped chemistry tables (vocabularies, valences, bond lengths in pm).
pub const DEFAULT_TABLES: &str = include_str!("../data/chem_tables.txt");
pub const TABLE_FORMAT_VERSION: u32 = 1;

/// Parsed contents of a chemistry table file.
#[derive(Clone, Debug, Default)]
pub struct ChemTables {
    pub vocabularies: BTreeMap<String, Vec<String>>,
    pub valences: HashMap<String, Vec<u32>>,
    pub margins: [f64; 3],
    /// Keyed by `(a, b, order)` with both symbol orders present.
    pub bonds: HashMap<(String, String, u8), f64>,
}

impl ChemTables {
    pub fn default_tables() -> Self {
        Self::parse(DEFAULT_TABLES).expect("shipped chemistry tables parse")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut t = ChemTables {
            margins: [10.0, 5.0, 3.0],
            ..Default::default()
        };
        let mut version = None;
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: &str| Error::Table(format!("line {}: {msg}: {raw:?}", ln + 1));
            let mut tok = line.split_whitespace();
            match tok.next().unwrap() {
                "format-version" => {
                    let v: u32 = tok
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| err("bad version"))?;
                    if v != TABLE_FORMAT_VERSION {
                        return Err(err("unsupported format version"));
                    }
                    version = Some(v);
                }
                "vocab" => {
                    let name = tok.next().ok_or_else(|| err("missing vocabulary name"))?;
                    t.vocabularies
                        .insert(name.to_string(), tok.map(str::to_string).collect());
                }
                "valence" => {
                    let sym = tok.next().ok_or_else(|| err("missing symbol"))?;
                    let vals = tok
                        .map(|s| s.parse::<u32>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| err("bad valence"))?;
                    if vals.is_empty() {
                        return Err(err("no valences"));
                    }
                    t.valences.insert(sym.to_string(), vals);
                }
                "margin" => {
                    let order: usize = tok.next().and_then(|s| s.parse().ok()).ok_or_else(|| err("bad order"))?;
                    let pm: f64 = tok.next().and_then(|s| s.parse().ok()).ok_or_else(|| err("bad margin"))?;
                    if !(1..=3).contains(&order) {
                        return Err(err("order out of range"));
                    }
                    t.margins[order - 1] = pm;
                }
                "bond" => {
                    let order: u8 = tok.next().and_then(|s| s.parse().ok()).ok_or_else(|| err("bad order"))?;
                    let a = tok.next().ok_or_else(|| err("missing symbol"))?;
                    let b = tok.next().ok_or_else(|| err("missing symbol"))?;
                    let pm: f64 = tok.next().and_then(|s| s.parse().ok()).ok_or_else(|| err("bad length"))?;
                    if !(1..=3).contains(&order) {
                        return Err(err("order out of range"));
                    }
                    for key in [(a, b), (b, a)] {
                        let k = (key.0.to_string(), key.1.to_string(), order);
                        if let Some(prev) = t.bonds.insert(k, pm) {
                            if prev != pm {
                                return Err(err("asymmetric bond length"));
                            }
                        }
                    }
                }
                _ => return Err(err("unknown record")),
            }
        }
        if version.is_none() {
            return Err(Error::Table("missing format-version header".into()));
        }
        Ok(t)
    }
}

/// Ordered element alphabet with the chemistry needed for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct AtomVocabulary {
    symbols: Vec<String>,
    valences: Vec<Vec<u32>>,
    margins: [f64; 3],
    /// `bonds[order-1][i*K + j]` in pm.
    bonds: [Vec<Option<f64>>; 3],
}

impl AtomVocabulary {
    pub fn new(symbols: &[&str], tables: &ChemTables) -> Result<Self> {
        let k = symbols.len();
        if k < 2 {
            return Err(Error::Table("vocabulary needs at least two symbols".into()));
        }
        for (i, s) in symbols.iter().enumerate() {
            if symbols[..i].contains(s) {
                return Err(Error::Table(format!("duplicate symbol {s}")));
            }
        }
        let valences = symbols
            .iter()
            .map(|s| {
                tables
                    .valences
                    .get(*s)
                    .cloned()
                    .ok_or_else(|| Error::Table(format!("no valence for {s}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let bonds = [1u8, 2, 3].map(|order| {
            let mut m = vec![None; k * k];
            for (i, a) in symbols.iter().enumerate() {
                for (j, b) in symbols.iter().enumerate() {
                    m[i * k + j] = tables.bonds.get(&(a.to_string(), b.to_string(), order)).copied();
                }
            }
            m
        });
        Ok(AtomVocabulary {
            symbols: symbols.iter().map(|s| s.to_string()).collect(),
            valences,
            margins: tables.margins,
            bonds,
        })
    }

    /// Named vocabulary from the shipped tables (`qm9`, `drugs`, `drugs-h`).
    pub fn named(name: &str) -> Result<Self> {
        let tables = ChemTables::default_tables();
        let syms = tables
            .vocabularies
            .get(name)
            .ok_or_else(|| Error::Table(format!("no vocabulary named {name:?}")))?;
        let refs: Vec<&str> = syms.iter().map(String::as_str).collect();
        Self::new(&refs, &tables)
    }

    pub fn qm9() -> Self {
        Self::named("qm9").expect("qm9 vocabulary")
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn symbol(&self, i: usize) -> &str {
        &self.symbols[i]
    }

    pub fn index_of(&self, sym: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == sym)
    }

    pub fn allowed_valences(&self, i: usize) -> &[u32] {
        &self.valences[i]
    }

    pub fn margin_pm(&self, order: u8) -> f64 {
        self.margins[order as usize - 1]
    }

    /// Reference length in pm for a bond of `order` (1..=3) between types `i` and `j`.
    pub fn bond_length(&self, i: usize, j: usize, order: u8) -> Option<f64> {
        self.bonds[order as usize - 1][i * self.size() + j]
    }

    pub fn is_heavy(&self, i: usize) -> bool {
        self.symbols[i] != "H"
    }

    /// Serialises this vocabulary in the chemistry-table text format.
    pub fn to_table_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "format-version {TABLE_FORMAT_VERSION}");
        let _ = writeln!(s, "vocab model {}", self.symbols.join(" "));
        for (sym, vals) in self.symbols.iter().zip(&self.valences) {
            let v: Vec<String> = vals.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "valence {sym} {}", v.join(" "));
        }
        for (o, m) in self.margins.iter().enumerate() {
            let _ = writeln!(s, "margin {} {m:?}", o + 1);
        }
        let k = self.size();
        for order in 1..=3u8 {
            for i in 0..k {
                for j in i..k {
                    if let Some(pm) = self.bond_length(i, j, order) {
                        let _ = writeln!(s, "bond {order} {} {} {pm:?}", self.symbols[i], self.symbols[j]);
                    }
                }
            }
        }
        s
    }

    pub fn from_table_text(text: &str) -> Result<Self> {
        let tables = ChemTables::parse(text)?;
        let syms = tables
            .vocabularies
            .get("model")
            .ok_or_else(|| Error::Table("missing `vocab model` record".into()))?;
        let refs: Vec<&str> = syms.iter().map(String::as_str).collect();
        Self::new(&refs, &tables)
    }
}

/// A 3D molecule: coordinates in Å and type indices into a vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Molecule {
    pub coords: Vec<[f64; 3]>,
    pub types: Vec<usize>,
    /// Optional source identifier (XYZ comment line).
    pub name: Option<String>,
}

impl Molecule {
    pub fn new(coords: Vec<[f64; 3]>, types: Vec<usize>, num_types: usize) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::InvalidArgument("molecule needs at least one atom".into()));
        }
        if coords.len() != types.len() {
            return Err(Error::shape(format!("{} types", coords.len()), format!("{} types", types.len())));
        }
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("molecule coordinates".into()));
        }
        if let Some(&t) = types.iter().find(|&&t| t >= num_types) {
            return Err(Error::InvalidArgument(format!("type index {t} out of range for K={num_types}")));
        }
        Ok(Molecule { coords, types, name: None })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn num_atoms(&self) -> usize {
        self.coords.len()
    }

    pub fn coords_tensor(&self) -> Tensor {
        Tensor::from_rows(&self.coords)
    }

    pub fn centroid(&self) -> [f64; 3] {
        centroid(&self.coords)
    }

    pub fn translated(&self, t: [f64; 3]) -> Molecule {
        let mut m = self.clone();
        for c in &mut m.coords {
            for k in 0..3 {
                c[k] += t[k];
            }
        }
        m
    }
}

pub fn centroid(pts: &[[f64; 3]]) -> [f64; 3] {
    let mut c = [0.0; 3];
    for p in pts {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    let n = pts.len().max(1) as f64;
    c.map(|v| v / n)
}

/// Translates the molecule so the unweighted mean of its coordinates is zero.
pub fn center(mol: &Molecule) -> Molecule {
    let c = mol.centroid();
    mol.translated([-c[0], -c[1], -c[2]])
}

pub fn one_hot(mol: &Molecule, vocab: &AtomVocabulary) -> Tensor {
    one_hot_types(&mol.types, vocab.size())
}

pub fn one_hot_types(types: &[usize], k: usize) -> Tensor {
    let mut t = Tensor::zeros(types.len(), k);
    for (i, &ty) in types.iter().enumerate() {
        *t.at_mut(i, ty) = 1.0;
    }
    t
}

pub fn parse_xyz(text: &str, vocab: &AtomVocabulary) -> Result<Vec<Molecule>> {
    let lines: Vec<&str> = text.lines().collect();
    let mut mols = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        let count_line = i + 1;
        let n: usize = lines[i]
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::MalformedCount {
                line: count_line,
                text: lines[i].to_string(),
            })?;
        if i + 2 + n > lines.len() {
            return Err(Error::MalformedCount {
                line: count_line,
                text: format!("{} (file ends after {} lines)", lines[i], lines.len() - i),
            });
        }
        let comment = lines.get(i + 1).map(|s| s.trim()).unwrap_or("");
        let mut coords = Vec::with_capacity(n);
        let mut types = Vec::with_capacity(n);
        for a in 0..n {
            let ln = i + 2 + a;
            let raw = lines.get(ln).copied().unwrap_or("");
            let mut tok = raw.split_whitespace();
            let bad = || Error::BadAtomLine {
                line: ln + 1,
                text: raw.to_string(),
            };
            let sym = tok.next().ok_or_else(bad)?;
            let ty = vocab.index_of(sym).ok_or_else(|| Error::UnknownElement {
                line: ln + 1,
                symbol: sym.to_string(),
            })?;
            let mut p = [0.0; 3];
            for v in &mut p {
                *v = tok.next().and_then(|s| s.parse::<f64>().ok()).ok_or_else(bad)?;
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(bad());
            }
            coords.push(p);
            types.push(ty);
        }
        let mut mol = Molecule::new(coords, types, vocab.size())?;
        if !comment.is_empty() {
            mol.name = Some(comment.to_string());
        }
        mols.push(mol);
        i += 2 + n;
    }
    Ok(mols)
}

pub fn load_xyz(path: impl AsRef<Path>, vocab: &AtomVocabulary) -> Result<Vec<Molecule>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_xyz(&text, vocab)
}

pub fn write_xyz(mols: &[Molecule], vocab: &AtomVocabulary) -> String {
    let mut s = String::new();
    for m in mols {
        let _ = writeln!(s, "{}", m.num_atoms());
        let _ = writeln!(s, "{}", m.name.as_deref().unwrap_or(""));
        for (p, &t) in m.coords.iter().zip(&m.types) {
            let _ = writeln!(s, "{} {:.8} {:.8} {:.8}", vocab.symbol(t), p[0], p[1], p[2]);
        }
    }
    s
}

pub fn save_xyz(path: impl AsRef<Path>, mols: &[Molecule], vocab: &AtomVocabulary) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_xyz(mols, vocab)).map_err(|e| Error::io(path, e))
}

/// Empirical distribution of atom counts in a training set.
#[derive(Clone, Debug, PartialEq)]
pub struct AtomCountPrior {
    pub counts: BTreeMap<usize, f64>,
}

impl AtomCountPrior {
    pub fn fit(dataset: &[Molecule]) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut tally: BTreeMap<usize, usize> = BTreeMap::new();
        for m in dataset {
            *tally.entry(m.num_atoms()).or_default() += 1;
        }
        let n = dataset.len() as f64;
        Ok(AtomCountPrior {
            counts: tally.into_iter().map(|(k, c)| (k, c as f64 / n)).collect(),
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (&n, &p) in &self.counts {
            acc += p;
            if u < acc {
                return n;
            }
        }
        *self.counts.keys().next_back().expect("non-empty prior")
    }

    pub fn to_text(&self) -> String {
        self.counts
            .iter()
            .map(|(n, p)| format!("{n}:{p:?}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn from_text(s: &str) -> Result<Self> {
        let mut counts = BTreeMap::new();
        for tok in s.split_whitespace() {
            let (n, p) = tok
                .split_once(':')
                .ok_or_else(|| Error::Checkpoint(format!("bad prior entry {tok:?}")))?;
            let n: usize = n.parse().map_err(|_| Error::Checkpoint(format!("bad prior count {n:?}")))?;
            let p: f64 = p.parse().map_err(|_| Error::Checkpoint(format!("bad prior mass {p:?}")))?;
            if n == 0 {
                return Err(Error::Checkpoint("atom count must be positive".into()));
            }
            counts.insert(n, p);
        }
        if counts.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let total: f64 = counts.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Checkpoint(format!("prior masses sum to {total}")));
        }
        Ok(AtomCountPrior { counts })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab3() -> AtomVocabulary {
        AtomVocabulary::new(&["H", "C", "N"], &ChemTables::default_tables()).unwrap()
    }

    #[test]
    fn single_atom_block() {
        let v = AtomVocabulary::qm9();
        let mols = parse_xyz("1\n\nC 0 0 0", &v).unwrap();
        assert_eq!(mols.len(), 1);
        assert_eq!(mols[0].types, vec![v.index_of("C").unwrap()]);
        assert_eq!(mols[0].coords, vec![[0.0, 0.0, 0.0]]);
    }

    #[test]
    fn blocks_keep_order() {
        let v = AtomVocabulary::qm9();
        let text = "1\nfirst\nO 0 0 0\n2\nsecond\nH 0 0 0\nH 0 0 0.74\n";
        let mols = parse_xyz(text, &v).unwrap();
        assert_eq!(mols.len(), 2);
        assert_eq!(mols[0].name.as_deref(), Some("first"));
        assert_eq!(mols[1].num_atoms(), 2);
    }

    #[test]
    fn unknown_element_reports_symbol_and_line() {
        let v = AtomVocabulary::qm9();
        match parse_xyz("2\n\nC 0 0 0\nXx 1 0 0\n", &v) {
            Err(Error::UnknownElement { line, symbol }) => {
                assert_eq!(symbol, "Xx");
                assert_eq!(line, 4);
            }
            other => panic!("expected unknown element, got {other:?}"),
        }
    }

    #[test]
    fn malformed_count_and_coordinate() {
        let v = AtomVocabulary::qm9();
        assert!(matches!(parse_xyz("two\n\nC 0 0 0\n", &v), Err(Error::MalformedCount { .. })));
        assert!(matches!(parse_xyz("1\n\nC 0 zero 0\n", &v), Err(Error::BadAtomLine { .. })));
    }

    #[test]
    fn center_examples() {
        let m = Molecule::new(vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]], vec![0, 0], 2).unwrap();
        assert_eq!(center(&m), m);
        let single = Molecule::new(vec![[2.0, 2.0, 2.0]], vec![1], 2).unwrap();
        assert_eq!(center(&single).coords, vec![[0.0, 0.0, 0.0]]);
    }

    #[test]
    fn one_hot_examples() {
        let m = Molecule::new(vec![[0.0; 3]], vec![0], 3).unwrap();
        assert_eq!(one_hot(&m, &vocab3()).data, vec![1.0, 0.0, 0.0]);
        let m = Molecule::new(vec![[0.0; 3], [1.0, 0.0, 0.0]], vec![2, 2], 3).unwrap();
        assert_eq!(one_hot(&m, &vocab3()).data, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn prior_counts_and_sampling() {
        let mk = |n: usize| Molecule::new(vec![[0.0; 3]; n], vec![0; n], 2).unwrap();
        let prior = AtomCountPrior::fit(&[mk(3), mk(3), mk(5)]).unwrap();
        assert!((prior.counts[&3] - 2.0 / 3.0).abs() < 1e-12);
        assert!((prior.counts[&5] - 1.0 / 3.0).abs() < 1e-12);
        assert!((prior.counts.values().sum::<f64>() - 1.0).abs() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let threes = (0..n).filter(|_| prior.sample(&mut rng) == 3).count();
        let freq = threes as f64 / n as f64;
        assert!((0.65..=0.67).contains(&freq), "freq {freq}");

        let single = AtomCountPrior::fit(&[mk(4), mk(4)]).unwrap();
        assert!((0..100).all(|_| single.sample(&mut rng) == 4));
        assert!(matches!(AtomCountPrior::fit(&[]), Err(Error::EmptyDataset)));
        assert_eq!(AtomCountPrior::from_text(&prior.to_text()).unwrap(), prior);
    }

    #[test]
    fn vocabulary_invariants() {
        let t = ChemTables::default_tables();
        assert!(AtomVocabulary::new(&["C"], &t).is_err());
        assert!(AtomVocabulary::new(&["C", "C"], &t).is_err());
        assert!(AtomVocabulary::new(&["C", "Xx"], &t).is_err());
        for name in ["qm9", "drugs", "drugs-h"] {
            let v = AtomVocabulary::named(name).unwrap();
            let k = v.size();
            for o in 1..=3 {
                for i in 0..k {
                    for j in 0..k {
                        assert_eq!(v.bond_length(i, j, o), v.bond_length(j, i, o));
                    }
                }
            }
            assert_eq!(AtomVocabulary::from_table_text(&v.to_table_text()).unwrap(), v);
        }
        assert!(ChemTables::parse("bond 1 C C 154\n").is_err());
        assert!(ChemTables::parse("format-version 1\nbond 1 C H 109\nbond 1 H C 110\n").is_err());
    }

    fn arb_molecule() -> impl Strategy<Value = Molecule> {
        prop::collection::vec((prop::array::uniform3(-20.0f64..20.0), 0usize..5), 1..12).prop_map(|atoms| {
            let (coords, types) = atoms.into_iter().unzip();
            Molecule::new(coords, types, 5).unwrap()
        })
    }

    proptest! {
        #[test]
        fn center_removes_translation(m in arb_molecule(), t in prop::array::uniform3(-50.0f64..50.0)) {
            let c = center(&m);
            let mean = c.centroid();
            prop_assert!(mean.iter().all(|v| v.abs() < 1e-9));
            let ct = center(&m.translated(t));
            for (a, b) in c.coords.iter().zip(&ct.coords) {
                for k in 0..3 {
                    prop_assert!((a[k] - b[k]).abs() < 1e-9);
                }
            }
            let cc = center(&c);
            for (a, b) in c.coords.iter().zip(&cc.coords) {
                for k in 0..3 {
                    prop_assert!((a[k] - b[k]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn one_hot_round_trips(m in arb_molecule()) {
            let v = AtomVocabulary::qm9();
            let oh = one_hot(&m, &v);
            for (r, &t) in m.types.iter().enumerate() {
                let row = oh.row(r);
                prop_assert_eq!(row.iter().sum::<f64>(), 1.0);
                let argmax = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
                prop_assert_eq!(argmax, t);
            }
        }

        #[test]
        fn xyz_write_read_identity(m in arb_molecule()) {
            let v = AtomVocabulary::qm9();
            let back = parse_xyz(&write_xyz(std::slice::from_ref(&m), &v), &v).unwrap();
            prop_assert_eq!(back.len(), 1);
            prop_assert_eq!(&back[0].types, &m.types);
            for (a, b) in back[0].coords.iter().zip(&m.coords) {
                for k in 0..3 {
                    prop_assert!((a[k] - b[k]).abs() <= 5e-9);
                }
            }
        }
    }
}
