//! The molecular data model: 3D coordinates, atom types over a fixed
//! element vocabulary, a canonical bond table, and optional labels.
//! Also the `.mol3d` text format and a deterministic synthetic generator
//! for desk-scale corpora.

use rand::prelude::*;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;
use std::fmt;

/// Fixed element vocabulary. Unknown symbols are errors, not a bucket.
pub const ELEMENTS: [&str; 10] = ["H", "C", "N", "O", "F", "S", "Cl", "P", "Br", "I"];

pub fn element_index(symbol: &str) -> Option<usize> {
    ELEMENTS.iter().position(|&e| e == symbol)
}

/// Bond order 1..=3 plus 4 for aromatic. "No bond" is not stored; the
/// featurizer materializes it as pair category 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    pub order: u8,
}

#[derive(Clone, Debug, Default)]
pub struct MolGraph {
    /// N x 3 coordinates, Angstrom, row-major.
    pub coords: Vec<[f64; 3]>,
    /// Indices into [`ELEMENTS`].
    pub atom_types: Vec<usize>,
    /// Canonical: i < j, no duplicates.
    pub bonds: Vec<Bond>,
    /// Scalar labels (energy in eV, arbitrary properties).
    pub labels: BTreeMap<String, f64>,
    /// Optional per-atom forces, eV/Angstrom.
    pub forces: Option<Vec<[f64; 3]>>,
}

/// The masked-atom index set plus per-atom coordinate noise for the
/// unmasked atoms. Noise rows at masked indices are zero.
#[derive(Clone, Debug)]
pub struct MaskPlan {
    pub masked: Vec<usize>,
    pub noise: Vec<[f64; 3]>,
    pub seed: u64,
}

impl MaskPlan {
    pub fn is_masked(&self, i: usize) -> bool {
        self.masked.binary_search(&i).is_ok()
    }

    pub fn unmasked(&self, n: usize) -> Vec<usize> {
        (0..n).filter(|i| !self.is_masked(*i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MolError {
    Parse { line: usize, message: String },
    Validation(String),
    Vocabulary { line: usize, symbol: String },
    Generation(String),
}

impl fmt::Display for MolError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Parse { line, message } => write!(f, "parse error at line {line}: {message}"),
            Self::Validation(m) => write!(f, "validation error: {m}"),
            Self::Vocabulary { line, symbol } => {
                write!(f, "unknown element symbol {symbol:?} at line {line}")
            }
            Self::Generation(m) => write!(f, "generation error: {m}"),
        }
    }
}

impl std::error::Error for MolError {}

impl MolGraph {
    pub fn n_atoms(&self) -> usize {
        self.atom_types.len()
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let a = self.coords[i];
        let b = self.coords[j];
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }

    /// All invariant violations, empty when the graph is well-formed.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let n = self.n_atoms();
        if n == 0 {
            out.push("empty molecule".to_string());
        }
        if self.coords.len() != n {
            out.push(format!("{} coordinate rows for {} atoms", self.coords.len(), n));
        }
        for (i, c) in self.coords.iter().enumerate() {
            if !c.iter().all(|v| v.is_finite()) {
                out.push(format!("non-finite coordinates at atom {i}"));
            }
        }
        for t in &self.atom_types {
            if *t >= ELEMENTS.len() {
                out.push(format!("atom type index {t} outside vocabulary"));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for b in &self.bonds {
            if b.i == b.j {
                out.push(format!("self-bond at atom {}", b.i));
                continue;
            }
            if b.i >= n || b.j >= n {
                out.push(format!("bond ({}, {}) endpoint out of range {n}", b.i, b.j));
                continue;
            }
            if b.i > b.j {
                out.push(format!("bond ({}, {}) not stored canonically (i < j)", b.i, b.j));
            }
            let key = (b.i.min(b.j), b.i.max(b.j));
            if !seen.insert(key) {
                out.push(format!("duplicate bond ({}, {})", key.0, key.1));
            }
            if !(1..=4).contains(&b.order) {
                out.push(format!("bond ({}, {}) order {} outside 1..=4", b.i, b.j, b.order));
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if self.distance(i, j) <= 0.0 {
                    out.push(format!("zero distance between atoms {i} and {j}"));
                }
            }
        }
        if let Some(forces) = &self.forces {
            if forces.len() != n {
                out.push(format!("{} force rows for {} atoms", forces.len(), n));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), MolError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(MolError::Validation(v.join("; ")))
        }
    }

    /// Smallest distance between distinct atoms.
    pub fn min_distance(&self) -> f64 {
        let n = self.n_atoms();
        let mut best = f64::INFINITY;
        for i in 0..n {
            for j in (i + 1)..n {
                best = best.min(self.distance(i, j));
            }
        }
        best
    }

    /// Relabel atoms: new index `i` takes old atom `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> MolGraph {
        let n = self.n_atoms();
        assert_eq!(perm.len(), n);
        let mut inverse = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let mut bonds: Vec<Bond> = self
            .bonds
            .iter()
            .map(|b| {
                let (a, c) = (inverse[b.i], inverse[b.j]);
                Bond {
                    i: a.min(c),
                    j: a.max(c),
                    order: b.order,
                }
            })
            .collect();
        bonds.sort_by_key(|b| (b.i, b.j));
        MolGraph {
            coords: perm.iter().map(|&o| self.coords[o]).collect(),
            atom_types: perm.iter().map(|&o| self.atom_types[o]).collect(),
            bonds,
            labels: self.labels.clone(),
            forces: self
                .forces
                .as_ref()
                .map(|f| perm.iter().map(|&o| f[o]).collect()),
        }
    }

    /// Subgraph on the atoms NOT in `masked` (sorted). Bonds touching a
    /// masked atom are dropped; survivors are reindexed. Returns the
    /// subgraph plus the kept original indices in order.
    pub fn remove_atoms(&self, masked: &[usize]) -> (MolGraph, Vec<usize>) {
        let n = self.n_atoms();
        let keep: Vec<usize> = (0..n).filter(|i| masked.binary_search(i).is_err()).collect();
        let mut new_index = vec![usize::MAX; n];
        for (new, &old) in keep.iter().enumerate() {
            new_index[old] = new;
        }
        let bonds = self
            .bonds
            .iter()
            .filter(|b| new_index[b.i] != usize::MAX && new_index[b.j] != usize::MAX)
            .map(|b| Bond {
                i: new_index[b.i],
                j: new_index[b.j],
                order: b.order,
            })
            .collect();
        let sub = MolGraph {
            coords: keep.iter().map(|&o| self.coords[o]).collect(),
            atom_types: keep.iter().map(|&o| self.atom_types[o]).collect(),
            bonds,
            labels: BTreeMap::new(),
            forces: None,
        };
        (sub, keep)
    }
}

fn canonical_bond(i: usize, j: usize, order: u8) -> Bond {
    Bond {
        i: i.min(j),
        j: i.max(j),
        order,
    }
}

/// Parse a `.mol3d` document into molecules. Line-oriented:
/// `#mol3d <idx>`, `natoms <N>`, N `atom` lines, then any mix of
/// `bond`/`label`/`force` lines; a blank line ends the record.
pub fn parse_mol3d(text: &str) -> Result<Vec<MolGraph>, MolError> {
    let mut out = Vec::new();
    let mut current: Option<(MolGraph, usize)> = None; // graph, expected atoms
    let mut pending_forces: Vec<(usize, [f64; 3])> = Vec::new();

    let parse_f = |s: &str, line: usize| -> Result<f64, MolError> {
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| MolError::Parse {
                line,
                message: format!("expected finite float, got {s:?}"),
            })
    };
    let parse_u = |s: &str, line: usize| -> Result<usize, MolError> {
        s.parse::<usize>().map_err(|_| MolError::Parse {
            line,
            message: format!("expected unsigned integer, got {s:?}"),
        })
    };

    let finish = |current: &mut Option<(MolGraph, usize)>,
                  pending_forces: &mut Vec<(usize, [f64; 3])>,
                  out: &mut Vec<MolGraph>,
                  line: usize|
     -> Result<(), MolError> {
        if let Some((mut g, expected)) = current.take() {
            if g.n_atoms() != expected {
                return Err(MolError::Parse {
                    line,
                    message: format!("record declared {expected} atoms, found {}", g.n_atoms()),
                });
            }
            if !pending_forces.is_empty() {
                let mut forces = vec![[0.0; 3]; g.n_atoms()];
                for (i, f) in pending_forces.drain(..) {
                    if i >= forces.len() {
                        return Err(MolError::Validation(format!(
                            "force index {i} out of range {}",
                            forces.len()
                        )));
                    }
                    forces[i] = f;
                }
                g.forces = Some(forces);
            }
            g.validate()?;
            out.push(g);
        }
        Ok(())
    };

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let t = raw.trim();
        if t.is_empty() {
            finish(&mut current, &mut pending_forces, &mut out, line)?;
            continue;
        }
        let fields: Vec<&str> = t.split_whitespace().collect();
        match fields[0] {
            "#mol3d" => {
                finish(&mut current, &mut pending_forces, &mut out, line)?;
                current = Some((MolGraph::default(), 0));
            }
            "natoms" => {
                let (_, expected) = current.as_mut().ok_or_else(|| MolError::Parse {
                    line,
                    message: "natoms before #mol3d header".into(),
                })?;
                if fields.len() != 2 {
                    return Err(MolError::Parse {
                        line,
                        message: "natoms takes one count".into(),
                    });
                }
                *expected = parse_u(fields[1], line)?;
            }
            "atom" => {
                let (g, _) = current.as_mut().ok_or_else(|| MolError::Parse {
                    line,
                    message: "atom line outside a record".into(),
                })?;
                if fields.len() != 5 {
                    return Err(MolError::Parse {
                        line,
                        message: format!("atom line needs SYMBOL x y z, got {} fields", fields.len() - 1),
                    });
                }
                let t = element_index(fields[1]).ok_or_else(|| MolError::Vocabulary {
                    line,
                    symbol: fields[1].to_string(),
                })?;
                g.atom_types.push(t);
                g.coords.push([
                    parse_f(fields[2], line)?,
                    parse_f(fields[3], line)?,
                    parse_f(fields[4], line)?,
                ]);
            }
            "bond" => {
                let (g, _) = current.as_mut().ok_or_else(|| MolError::Parse {
                    line,
                    message: "bond line outside a record".into(),
                })?;
                if fields.len() != 4 {
                    return Err(MolError::Parse {
                        line,
                        message: "bond line needs i j order".into(),
                    });
                }
                let i = parse_u(fields[1], line)?;
                let j = parse_u(fields[2], line)?;
                let order = parse_u(fields[3], line)? as u8;
                g.bonds.push(canonical_bond(i, j, order));
            }
            "label" => {
                let (g, _) = current.as_mut().ok_or_else(|| MolError::Parse {
                    line,
                    message: "label line outside a record".into(),
                })?;
                if fields.len() != 3 {
                    return Err(MolError::Parse {
                        line,
                        message: "label line needs name value".into(),
                    });
                }
                g.labels.insert(fields[1].to_string(), parse_f(fields[2], line)?);
            }
            "force" => {
                if current.is_none() {
                    return Err(MolError::Parse {
                        line,
                        message: "force line outside a record".into(),
                    });
                }
                if fields.len() != 5 {
                    return Err(MolError::Parse {
                        line,
                        message: "force line needs i fx fy fz".into(),
                    });
                }
                let i = parse_u(fields[1], line)?;
                pending_forces.push((
                    i,
                    [
                        parse_f(fields[2], line)?,
                        parse_f(fields[3], line)?,
                        parse_f(fields[4], line)?,
                    ],
                ));
            }
            other => {
                return Err(MolError::Parse {
                    line,
                    message: format!("unknown directive {other:?}"),
                })
            }
        }
    }
    let last = text.lines().count();
    finish(&mut current, &mut pending_forces, &mut out, last)?;
    Ok(out)
}

/// Serialize molecules to `.mol3d` text. Floats use shortest exact
/// formatting, so parse(write(g)) reproduces coordinates bit-for-bit.
pub fn write_mol3d(mols: &[MolGraph]) -> String {
    let mut s = String::new();
    for (idx, g) in mols.iter().enumerate() {
        s.push_str(&format!("#mol3d {idx}\n"));
        s.push_str(&format!("natoms {}\n", g.n_atoms()));
        for (t, c) in g.atom_types.iter().zip(g.coords.iter()) {
            s.push_str(&format!("atom {} {} {} {}\n", ELEMENTS[*t], c[0], c[1], c[2]));
        }
        for b in &g.bonds {
            s.push_str(&format!("bond {} {} {}\n", b.i, b.j, b.order));
        }
        for (name, v) in &g.labels {
            s.push_str(&format!("label {name} {v}\n"));
        }
        if let Some(forces) = &g.forces {
            for (i, f) in forces.iter().enumerate() {
                s.push_str(&format!("force {i} {} {} {}\n", f[0], f[1], f[2]));
            }
        }
        s.push('\n');
    }
    s
}

/// Attach a deterministic scalar label: a random-but-fixed linear
/// function of the per-element atom counts. Handy for property-head
/// smoke tests and invariance probes (the label never sees geometry).
pub fn attach_linear_labels(mols: &mut [MolGraph], seed: u64, name: &str) {
    let mut rng = StdRng::seed_from_u64(seed ^ 0x1abe1);
    let coeffs: Vec<f64> = (0..ELEMENTS.len()).map(|_| rng.gen_range(-2.0..2.0)).collect();
    for g in mols.iter_mut() {
        let y: f64 = g.atom_types.iter().map(|&t| coeffs[t]).sum();
        g.labels.insert(name.to_string(), y);
    }
}

// heavy-atom candidates for backbones
const HEAVY: [&str; 3] = ["C", "N", "O"];

/// Deterministic synthetic molecules: chains and rings over {C,N,O} with
/// hydrogen decorations, bond lengths in [1.0, 1.6] A, and no atom pair
/// closer than 0.8 A.
pub fn generate_synthetic(
    seed: u64,
    count: usize,
    natoms: std::ops::RangeInclusive<usize>,
) -> Result<Vec<MolGraph>, MolError> {
    assert!(
        *natoms.start() >= 3 && *natoms.end() <= 32,
        "natoms range must lie within [3, 32]"
    );
    let mut rng = StdRng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for midx in 0..count {
        let n = rng.gen_range(*natoms.start()..=*natoms.end());
        let g = generate_one(&mut rng, n)
            .map_err(|m| MolError::Generation(format!("molecule {midx}: {m}")))?;
        out.push(g);
    }
    Ok(out)
}

fn generate_one(rng: &mut StdRng, n: usize) -> Result<MolGraph, String> {
    // backbone of 3..=n heavy atoms, rest hydrogens
    let backbone = rng.gen_range(3..=n.min(8).max(3)).min(n);
    let ring = backbone >= 4 && rng.gen_bool(0.35);
    let mut g = MolGraph::default();

    for _ in 0..backbone {
        let sym = HEAVY[rng.gen_range(0..HEAVY.len())];
        g.atom_types.push(element_index(sym).unwrap());
    }

    if ring {
        // planar regular polygon with side length in range, plus z jitter
        let side = rng.gen_range(1.3..1.6);
        let radius = side / (2.0 * (std::f64::consts::PI / backbone as f64).sin());
        for i in 0..backbone {
            let ang = 2.0 * std::f64::consts::PI * i as f64 / backbone as f64;
            let jitter: f64 = rng.gen_range(-0.05..0.05);
            g.coords.push([radius * ang.cos(), radius * ang.sin(), jitter]);
        }
        for i in 0..backbone {
            let j = (i + 1) % backbone;
            g.bonds.push(canonical_bond(i, j, 1));
        }
    } else {
        g.coords.push([0.0, 0.0, 0.0]);
        for i in 1..backbone {
            let placed = place_near(rng, &g, i - 1)?;
            g.coords.push(placed);
            let order = if rng.gen_bool(0.15) { 2 } else { 1 };
            g.bonds.push(canonical_bond(i - 1, i, order));
        }
    }

    // hydrogen decorations on random backbone atoms
    for _ in backbone..n {
        let host = rng.gen_range(0..backbone);
        let placed = place_near(rng, &g, host)?;
        g.atom_types.push(element_index("H").unwrap());
        let idx = g.coords.len();
        g.coords.push(placed);
        g.bonds.push(canonical_bond(host, idx, 1));
    }

    g.bonds.sort_by_key(|b| (b.i, b.j));
    g.validate().map_err(|e| e.to_string())?;
    if g.n_atoms() > 1 && g.min_distance() < 0.8 {
        return Err("min distance below 0.8".into());
    }
    Ok(g)
}

/// Random position at bond distance from atom `host`, rejecting anything
/// closer than 0.8 A to an existing atom. Errors after 1000 attempts.
fn place_near(rng: &mut StdRng, g: &MolGraph, host: usize) -> Result<[f64; 3], String> {
    let h = g.coords[host];
    for _ in 0..1000 {
        let len = rng.gen_range(1.0..1.6);
        // uniform direction from normalized gaussians
        let mut d = [0.0f64; 3];
        loop {
            for v in d.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if norm > 1e-6 {
                for v in d.iter_mut() {
                    *v /= norm;
                }
                break;
            }
        }
        let cand = [h[0] + len * d[0], h[1] + len * d[1], h[2] + len * d[2]];
        let ok = g.coords.iter().all(|c| {
            let dd = ((c[0] - cand[0]).powi(2) + (c[1] - cand[1]).powi(2) + (c[2] - cand[2]).powi(2))
                .sqrt();
            dd >= 0.8
        });
        if ok {
            return Ok(cand);
        }
    }
    Err("no feasible placement after 1000 attempts".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_minimal_record() {
        let text = "#mol3d 0\nnatoms 1\natom H 0 0 0\n";
        let mols = parse_mol3d(text).unwrap();
        assert_eq!(mols.len(), 1);
        assert_eq!(mols[0].n_atoms(), 1);
        assert!(mols[0].bonds.is_empty());
    }

    #[test]
    fn parse_h2_distance() {
        let text = "#mol3d 0\nnatoms 2\natom H 0 0 0\natom H 0 0 0.74\nbond 0 1 1\n";
        let mols = parse_mol3d(text).unwrap();
        assert_eq!(mols[0].bonds, vec![Bond { i: 0, j: 1, order: 1 }]);
        assert!((mols[0].distance(0, 1) - 0.74).abs() < 1e-12);
    }

    #[test]
    fn duplicate_bond_rejected() {
        let text = "#mol3d 0\nnatoms 2\natom H 0 0 0\natom H 0 0 0.74\nbond 0 1 1\nbond 1 0 1\n";
        match parse_mol3d(text) {
            Err(MolError::Validation(m)) => assert!(m.contains("duplicate bond"), "{m}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_element_is_vocabulary_error() {
        let text = "#mol3d 0\nnatoms 1\natom Xx 0 0 0\n";
        match parse_mol3d(text) {
            Err(MolError::Vocabulary { line, symbol }) => {
                assert_eq!(line, 3);
                assert_eq!(symbol, "Xx");
            }
            other => panic!("expected vocabulary error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "#mol3d 0\nnatoms 1\natom H zero 0 0\n";
        match parse_mol3d(text) {
            Err(MolError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bond_out_of_range_rejected() {
        let text = "#mol3d 0\nnatoms 1\natom H 0 0 0\nbond 0 5 1\n";
        match parse_mol3d(text) {
            Err(MolError::Validation(m)) => assert!(m.contains("out of range"), "{m}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn validate_flags_self_bond_and_zero_distance() {
        let mut g = MolGraph {
            coords: vec![[0.0; 3], [0.0; 3]],
            atom_types: vec![0, 0],
            bonds: vec![Bond { i: 0, j: 0, order: 1 }],
            labels: BTreeMap::new(),
            forces: None,
        };
        let v = g.violations();
        assert!(v.iter().any(|m| m.contains("self-bond")), "{v:?}");
        assert!(v.iter().any(|m| m.contains("zero distance")), "{v:?}");
        g.bonds.clear();
        g.coords[1] = [1.0, 0.0, 0.0];
        assert!(g.violations().is_empty());
    }

    #[test]
    fn roundtrip_exact() {
        let mols = generate_synthetic(3, 5, 4..=9).unwrap();
        let text = write_mol3d(&mols);
        let back = parse_mol3d(&text).unwrap();
        assert_eq!(back.len(), mols.len());
        for (a, b) in mols.iter().zip(back.iter()) {
            assert_eq!(a.atom_types, b.atom_types);
            assert_eq!(a.bonds, b.bonds);
            for (ca, cb) in a.coords.iter().zip(b.coords.iter()) {
                for c in 0..3 {
                    assert!((ca[c] - cb[c]).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn labels_and_forces_roundtrip() {
        let mut g = generate_synthetic(9, 1, 3..=4).unwrap().remove(0);
        g.labels.insert("energy".into(), -76.43);
        g.forces = Some(vec![[0.1, -0.2, 0.3]; g.n_atoms()]);
        let text = write_mol3d(&[g.clone()]);
        let back = parse_mol3d(&text).unwrap().remove(0);
        assert_eq!(back.labels.get("energy"), Some(&-76.43));
        assert_eq!(back.forces.as_ref().unwrap()[0], [0.1, -0.2, 0.3]);
    }

    #[test]
    fn generator_deterministic() {
        let a = generate_synthetic(7, 20, 5..=12).unwrap();
        let b = generate_synthetic(7, 20, 5..=12).unwrap();
        assert_eq!(write_mol3d(&a), write_mol3d(&b));
    }

    #[test]
    fn generator_empty_count() {
        assert!(generate_synthetic(1, 0, 3..=5).unwrap().is_empty());
    }

    #[test]
    fn generator_output_validates_with_min_distance() {
        let mols = generate_synthetic(7, 100, 5..=12).unwrap();
        assert_eq!(mols.len(), 100);
        for g in &mols {
            assert!(g.violations().is_empty());
            assert!(g.min_distance() >= 0.8);
            assert!(g.n_atoms() >= 5 && g.n_atoms() <= 12);
            for b in &g.bonds {
                let d = g.distance(b.i, b.j);
                assert!((0.99..=1.61).contains(&d), "bond length {d}");
            }
        }
    }

    #[test]
    fn remove_atoms_reindexes_bonds() {
        let g = MolGraph {
            coords: vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]],
            atom_types: vec![1, 1, 1, 1],
            bonds: vec![
                Bond { i: 0, j: 1, order: 1 },
                Bond { i: 1, j: 2, order: 2 },
                Bond { i: 2, j: 3, order: 1 },
            ],
            labels: BTreeMap::new(),
            forces: None,
        };
        let (sub, keep) = g.remove_atoms(&[1]);
        assert_eq!(keep, vec![0, 2, 3]);
        assert_eq!(sub.n_atoms(), 3);
        // only the 2-3 bond survives, reindexed to 1-2
        assert_eq!(sub.bonds, vec![Bond { i: 1, j: 2, order: 1 }]);
    }

    #[test]
    fn permuted_roundtrip() {
        let g = generate_synthetic(11, 1, 6..=6).unwrap().remove(0);
        let perm = vec![3, 1, 4, 0, 5, 2];
        let p = g.permuted(&perm);
        assert!(p.violations().is_empty());
        assert_eq!(p.atom_types[0], g.atom_types[3]);
        // re-applying the inverse permutation restores the original
        let mut inv = vec![0usize; 6];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let back = p.permuted(&inv);
        assert_eq!(back.atom_types, g.atom_types);
        assert_eq!(back.bonds, g.bonds);
    }
}
