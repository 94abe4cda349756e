//! Finite resonator lattices.
//!
//! Kagome patches are built as line graphs of honeycomb flakes: every
//! honeycomb bond is one resonator (a lattice site, placed at the bond
//! midpoint), and every selected honeycomb vertex is a three-way coupler
//! joining the resonators that meet there. A resonator whose both ends sit
//! on selected couplers has four neighbours (bulk); one with a dangling end
//! has two (edge). Coordinates are in units of the resonator span, so the
//! segment endpoints of every site coincide with its couplers.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const SQRT3: f64 = 1.732_050_807_568_877_2;
const GEOM_TOL: f64 = 1e-9;

/// Lattice file format version written into every file.
pub const LATTICE_FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum LatticeError {
    #[error("unknown patch kind `{0}`")]
    UnknownKind(String),
    #[error("malformed lattice file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("unsupported lattice format version {0}")]
    Version(u32),
    #[error("invalid lattice: {0}")]
    Invalid(String),
    #[error("hexagon {0} does not exist")]
    NoSuchHexagon(usize),
    #[error("hexagon {0} is not interior")]
    HexagonNotInterior(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SiteCategory {
    Bulk,
    EdgePort,
    EdgeTerminated,
}

impl SiteCategory {
    pub fn is_edge(self) -> bool {
        !matches!(self, SiteCategory::Bulk)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SiteCategory::Bulk => "bulk",
            SiteCategory::EdgePort => "edge-port",
            SiteCategory::EdgeTerminated => "edge-terminated",
        }
    }
}

impl fmt::Display for SiteCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SiteCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bulk" => Ok(SiteCategory::Bulk),
            "edge-port" => Ok(SiteCategory::EdgePort),
            "edge-terminated" => Ok(SiteCategory::EdgeTerminated),
            other => Err(format!("unknown site category `{other}`")),
        }
    }
}

/// The three bond orientations occurring in a Kagome patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    /// Along the x axis.
    Horizontal,
    /// Along +60 degrees.
    Rising,
    /// Along -60 degrees.
    Falling,
}

impl Orientation {
    pub const ALL: [Orientation; 3] = [Orientation::Horizontal, Orientation::Rising, Orientation::Falling];

    /// Unit vector along the resonator.
    pub fn direction(self) -> [f64; 2] {
        match self {
            Orientation::Horizontal => [1.0, 0.0],
            Orientation::Rising => [0.5, SQRT3 / 2.0],
            Orientation::Falling => [0.5, -SQRT3 / 2.0],
        }
    }

    /// Orientation after reflecting the lattice across the x or y axis.
    pub fn mirrored(self) -> Orientation {
        match self {
            Orientation::Horizontal => Orientation::Horizontal,
            Orientation::Rising => Orientation::Falling,
            Orientation::Falling => Orientation::Rising,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Orientation::Horizontal => "horizontal",
            Orientation::Rising => "rising",
            Orientation::Falling => "falling",
        }
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Orientation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "horizontal" => Ok(Orientation::Horizontal),
            "rising" => Ok(Orientation::Rising),
            "falling" => Ok(Orientation::Falling),
            other => Err(format!("unknown orientation `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub index: usize,
    pub x: f64,
    pub y: f64,
    pub category: SiteCategory,
    pub orientation: Orientation,
}

impl Site {
    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    /// Resonator endpoints, one lattice unit apart along its orientation.
    pub fn segment(&self) -> ([f64; 2], [f64; 2]) {
        let [dx, dy] = self.orientation.direction();
        (
            [self.x - 0.5 * dx, self.y - 0.5 * dy],
            [self.x + 0.5 * dx, self.y + 0.5 * dy],
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortConfig {
    pub input: usize,
    pub output: usize,
}

/// A finite lattice: sites, undirected edges and drive/readout ports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub name: String,
    pub sites: Vec<Site>,
    pub edges: Vec<[usize; 2]>,
    pub ports: Option<PortConfig>,
}

/// Violations found by [`validate`]; empty iff the lattice is valid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("valid");
        }
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PatchKind {
    Single,
    Dimer,
    Triangle,
    KagomeStar,
    Kagome49,
    FromFile(PathBuf),
}

impl FromStr for PatchKind {
    type Err = LatticeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" => Ok(PatchKind::Single),
            "dimer" => Ok(PatchKind::Dimer),
            "triangle" => Ok(PatchKind::Triangle),
            "kagome-star" => Ok(PatchKind::KagomeStar),
            "kagome49" => Ok(PatchKind::Kagome49),
            other => match other.strip_prefix("from-file:") {
                Some(path) => Ok(PatchKind::FromFile(PathBuf::from(path))),
                None => Err(LatticeError::UnknownKind(other.to_string())),
            },
        }
    }
}

/// A chordless six-cycle of sites, listed in cyclic order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hexagon {
    pub sites: [usize; 6],
    /// All six sites have their full four neighbours.
    pub interior: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MirrorAxis {
    /// Reflection x -> -x (about the vertical axis).
    Vertical,
    /// Reflection y -> -y (about the horizontal axis).
    Horizontal,
}

pub fn build_patch(kind: &PatchKind) -> Result<LatticeSpec, LatticeError> {
    let lattice = match kind {
        PatchKind::Single => LatticeSpec {
            name: "single".into(),
            sites: vec![Site {
                index: 0,
                x: 0.0,
                y: 0.0,
                category: SiteCategory::EdgePort,
                orientation: Orientation::Horizontal,
            }],
            edges: vec![],
            ports: None,
        },
        PatchKind::Dimer => LatticeSpec {
            name: "dimer".into(),
            sites: (0..2)
                .map(|i| Site {
                    index: i,
                    x: i as f64 - 0.5,
                    y: 0.0,
                    category: SiteCategory::EdgePort,
                    orientation: Orientation::Horizontal,
                })
                .collect(),
            edges: vec![[0, 1]],
            ports: Some(PortConfig { input: 0, output: 1 }),
        },
        PatchKind::Triangle => {
            let mut l = honeycomb_flake("triangle", &[Vertex::a(0, 0)]);
            l.set_ports(0, 1)?;
            l
        }
        PatchKind::KagomeStar => {
            let mut l = honeycomb_flake("kagome-star", &hexagon_vertices(0, 0));
            l.assign_default_ports();
            l
        }
        PatchKind::Kagome49 => {
            let mut l = honeycomb_flake("kagome49", &kagome49_vertices());
            l.assign_default_ports();
            l
        }
        PatchKind::FromFile(path) => load(path)?,
    };
    let report = validate(&lattice);
    if !report.is_valid() {
        return Err(LatticeError::Invalid(report.violations.join("; ")));
    }
    Ok(lattice)
}

pub fn adjacency(lattice: &LatticeSpec) -> DMatrix<f64> {
    let n = lattice.sites.len();
    let mut t = DMatrix::zeros(n, n);
    for &[i, j] in &lattice.edges {
        t[(i, j)] = 1.0;
        t[(j, i)] = 1.0;
    }
    t
}

pub fn validate(lattice: &LatticeSpec) -> ValidationReport {
    let mut violations = Vec::new();
    let n = lattice.sites.len();

    for (pos, site) in lattice.sites.iter().enumerate() {
        if site.index != pos {
            violations.push(format!("site at position {pos} has index {} (indices must be 0..N-1)", site.index));
        }
        if !site.x.is_finite() || !site.y.is_finite() {
            violations.push(format!("site {pos} has a non-finite coordinate"));
        }
    }

    let mut seen = BTreeSet::new();
    for &[i, j] in &lattice.edges {
        if i >= n || j >= n {
            violations.push(format!("edge [{i}, {j}] refers to a missing site"));
            continue;
        }
        if i == j {
            violations.push(format!("self-loop on site {i}"));
            continue;
        }
        if !seen.insert((i.min(j), i.max(j))) {
            violations.push(format!("duplicate edge [{i}, {j}]"));
        }
    }

    if let Some(ports) = lattice.ports {
        for (role, idx) in [("input", ports.input), ("output", ports.output)] {
            match lattice.sites.get(idx) {
                None => violations.push(format!("{role} port refers to missing site {idx}")),
                Some(site) if !site.category.is_edge() => {
                    violations.push(format!("{role} port on site {idx}: port must be edge site"))
                }
                Some(_) => {}
            }
        }
        if ports.input == ports.output {
            violations.push("input and output port coincide".to_string());
        }
    }

    if lattice.name.starts_with("kagome") && violations.is_empty() {
        for (i, d) in degrees(lattice).into_iter().enumerate() {
            let cat = lattice.sites[i].category;
            match d {
                4 if cat == SiteCategory::Bulk => {}
                2 if cat.is_edge() => {}
                _ => violations.push(format!("kagome site {i} has degree {d} and category {cat}")),
            }
        }
    }

    ValidationReport { violations }
}

pub fn degrees(lattice: &LatticeSpec) -> Vec<usize> {
    let mut d = vec![0; lattice.sites.len()];
    for &[i, j] in &lattice.edges {
        d[i] += 1;
        d[j] += 1;
    }
    d
}

impl LatticeSpec {
    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut nb = vec![Vec::new(); self.sites.len()];
        for &[i, j] in &self.edges {
            nb[i].push(j);
            nb[j].push(i);
        }
        for list in &mut nb {
            list.sort_unstable();
        }
        nb
    }

    /// 1-based label used in reports and file names.
    pub fn display_label(index: usize) -> usize {
        index + 1
    }

    /// Move the ports and re-derive edge categories.
    pub fn set_ports(&mut self, input: usize, output: usize) -> Result<(), LatticeError> {
        for idx in [input, output] {
            match self.sites.get(idx) {
                Some(s) if s.category.is_edge() => {}
                _ => return Err(LatticeError::Invalid(format!("port site {idx}: port must be edge site"))),
            }
        }
        for s in &mut self.sites {
            if s.category == SiteCategory::EdgePort {
                s.category = SiteCategory::EdgeTerminated;
            }
        }
        self.sites[input].category = SiteCategory::EdgePort;
        self.sites[output].category = SiteCategory::EdgePort;
        self.ports = Some(PortConfig { input, output });
        Ok(())
    }

    /// Input on the leftmost edge site closest to the x axis (lowest y on
    /// ties), output on its image under point inversion.
    fn assign_default_ports(&mut self) {
        let input = self
            .sites
            .iter()
            .filter(|s| s.category.is_edge())
            .min_by(|a, b| {
                key(a.x)
                    .cmp(&key(b.x))
                    .then(key(a.y.abs()).cmp(&key(b.y.abs())))
                    .then(key(a.y).cmp(&key(b.y)))
            })
            .map(|s| s.index);
        if let Some(input) = input {
            let p = self.sites[input].position();
            if let Some(output) = self.site_at([-p[0], -p[1]]) {
                if output != input {
                    // both are edge sites by construction of the symmetric flake
                    let _ = self.set_ports(input, output);
                }
            }
        }
    }

    /// Same lattice with site `n` renamed to `perm[n]`.
    pub fn relabeled(&self, perm: &[usize]) -> Result<LatticeSpec, LatticeError> {
        let n = self.len();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(LatticeError::Invalid("relabeling is not a permutation".into()));
        }
        let mut sites = self.sites.clone();
        for (old, s) in self.sites.iter().enumerate() {
            sites[perm[old]] = Site { index: perm[old], ..s.clone() };
        }
        Ok(LatticeSpec {
            name: self.name.clone(),
            sites,
            edges: self.edges.iter().map(|&[a, b]| [perm[a], perm[b]]).collect(),
            ports: self.ports.map(|p| PortConfig { input: perm[p.input], output: perm[p.output] }),
        })
    }

    pub fn site_at(&self, p: [f64; 2]) -> Option<usize> {
        self.sites
            .iter()
            .find(|s| (s.x - p[0]).abs() < 1e-6 && (s.y - p[1]).abs() < 1e-6)
            .map(|s| s.index)
    }

    /// Couplers: points where the endpoints of two or more mutually coupled
    /// resonators meet, with the sites joined there (ascending).
    pub fn couplers(&self) -> Vec<([f64; 2], Vec<usize>)> {
        let mut groups: Vec<([f64; 2], Vec<usize>)> = Vec::new();
        for site in &self.sites {
            let (a, b) = site.segment();
            for p in [a, b] {
                match groups
                    .iter_mut()
                    .find(|(q, _)| (q[0] - p[0]).abs() < 1e-6 && (q[1] - p[1]).abs() < 1e-6)
                {
                    Some((_, members)) => members.push(site.index),
                    None => groups.push((p, vec![site.index])),
                }
            }
        }
        let adj: BTreeSet<(usize, usize)> = self.edges.iter().map(|&[i, j]| (i.min(j), i.max(j))).collect();
        for (_, m) in &mut groups {
            m.sort_unstable();
            m.dedup();
        }
        // dangling ends that merely touch are not coupled
        groups.retain(|(_, m)| {
            m.len() >= 2 && m.iter().enumerate().all(|(k, &a)| m[k + 1..].iter().all(|&b| adj.contains(&(a, b))))
        });
        groups
    }

    /// All chordless six-cycles, each listed once in cyclic order starting
    /// from its smallest site index.
    pub fn hexagons(&self) -> Vec<Hexagon> {
        let nb = self.neighbors();
        let adj: BTreeSet<(usize, usize)> = self
            .edges
            .iter()
            .flat_map(|&[i, j]| [(i, j), (j, i)])
            .collect();
        let deg = degrees(self);
        let mut found = BTreeSet::new();
        let mut out = Vec::new();
        for start in 0..self.sites.len() {
            let mut path = vec![start];
            extend_cycles(start, &nb, &mut path, &mut |cycle: &[usize]| {
                // orientation-independent key
                let mut sorted = cycle.to_vec();
                sorted.sort_unstable();
                if found.contains(&sorted) {
                    return;
                }
                for a in 0..6 {
                    for b in (a + 2)..6 {
                        if a == 0 && b == 5 {
                            continue;
                        }
                        if adj.contains(&(cycle[a], cycle[b])) {
                            return;
                        }
                    }
                }
                found.insert(sorted);
                let sites: [usize; 6] = cycle.try_into().expect("six sites");
                let interior = sites.iter().all(|&s| deg[s] == 4);
                out.push(Hexagon { sites, interior });
            });
        }
        out
    }

    pub fn interior_hexagons(&self) -> Vec<Hexagon> {
        self.hexagons().into_iter().filter(|h| h.interior).collect()
    }

    /// Site permutation induced by a mirror through the centre site
    /// (site 0), if the reflection maps the lattice onto itself.
    pub fn mirror_permutation(&self, axis: MirrorAxis) -> Option<Vec<usize>> {
        let c = self.sites.first()?.position();
        let mut perm = Vec::with_capacity(self.sites.len());
        for s in &self.sites {
            let (x, y) = (s.x - c[0], s.y - c[1]);
            let image = match axis {
                MirrorAxis::Vertical => [c[0] - x, c[1] + y],
                MirrorAxis::Horizontal => [c[0] + x, c[1] - y],
            };
            let target = self.site_at(image)?;
            let expected = match s.orientation {
                Orientation::Horizontal => Orientation::Horizontal,
                o => o.mirrored(),
            };
            if self.sites[target].orientation != expected {
                return None;
            }
            perm.push(target);
        }
        is_automorphism(self, &perm).then_some(perm)
    }
}

/// True iff `perm` is a bijection on sites that maps edges onto edges.
pub fn is_automorphism(lattice: &LatticeSpec, perm: &[usize]) -> bool {
    let n = lattice.sites.len();
    if perm.len() != n {
        return false;
    }
    let mut hit = vec![false; n];
    for &p in perm {
        if p >= n || hit[p] {
            return false;
        }
        hit[p] = true;
    }
    let edges: BTreeSet<(usize, usize)> = lattice
        .edges
        .iter()
        .map(|&[i, j]| (i.min(j), i.max(j)))
        .collect();
    lattice.edges.iter().all(|&[i, j]| {
        let (a, b) = (perm[i], perm[j]);
        edges.contains(&(a.min(b), a.max(b)))
    })
}

fn extend_cycles(start: usize, nb: &[Vec<usize>], path: &mut Vec<usize>, emit: &mut dyn FnMut(&[usize])) {
    let last = *path.last().expect("non-empty path");
    if path.len() == 6 {
        if nb[last].contains(&start) && path[1] < path[5] {
            emit(path);
        }
        return;
    }
    for &next in &nb[last] {
        if next > start && !path.contains(&next) {
            path.push(next);
            extend_cycles(start, nb, path, emit);
            path.pop();
        }
    }
}

fn key(v: f64) -> i64 {
    (v * 1e6).round() as i64
}

// ---------------------------------------------------------------------------
// honeycomb flakes

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Sublattice {
    A,
    B,
}

/// Honeycomb vertex. A(m, n) sits at (-1/2, 0) + m*a1 + n*a2 with
/// a1 = (3/2, -sqrt3/2), a2 = (3/2, sqrt3/2); B(m, n) = A(m, n) + (1, 0).
/// The bond A(0,0)-B(0,0) is centred on the origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Vertex {
    sub: Sublattice,
    m: i32,
    n: i32,
}

impl Vertex {
    fn a(m: i32, n: i32) -> Self {
        Vertex { sub: Sublattice::A, m, n }
    }

    fn b(m: i32, n: i32) -> Self {
        Vertex { sub: Sublattice::B, m, n }
    }

    fn position(self) -> [f64; 2] {
        let base_x = match self.sub {
            Sublattice::A => -0.5,
            Sublattice::B => 0.5,
        };
        let (m, n) = (self.m as f64, self.n as f64);
        [base_x + 1.5 * (m + n), SQRT3 / 2.0 * (n - m)]
    }

    /// The three bonds at this vertex, each named by its A-end and direction.
    fn bonds(self) -> [Bond; 3] {
        let (m, n) = (self.m, self.n);
        match self.sub {
            Sublattice::A => [Bond { m, n, dir: 0 }, Bond { m, n, dir: 1 }, Bond { m, n, dir: 2 }],
            Sublattice::B => [
                Bond { m, n, dir: 0 },
                Bond { m: m + 1, n, dir: 1 },
                Bond { m, n: n + 1, dir: 2 },
            ],
        }
    }
}

/// Bond from A(m, n) along d0 = (1, 0), d1 = (-1/2, sqrt3/2) or
/// d2 = (-1/2, -sqrt3/2).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Bond {
    m: i32,
    n: i32,
    dir: u8,
}

impl Bond {
    fn midpoint(self) -> [f64; 2] {
        let a = Vertex::a(self.m, self.n).position();
        let d = match self.dir {
            0 => [1.0, 0.0],
            1 => [-0.5, SQRT3 / 2.0],
            _ => [-0.5, -SQRT3 / 2.0],
        };
        [a[0] + 0.5 * d[0], a[1] + 0.5 * d[1]]
    }

    fn orientation(self) -> Orientation {
        match self.dir {
            0 => Orientation::Horizontal,
            1 => Orientation::Falling,
            _ => Orientation::Rising,
        }
    }
}

/// Couplers of the 49-resonator patch: every honeycomb vertex with
/// |x| <= 3.5 and |y| <= sqrt3. The rectangle is symmetric under both
/// mirrors through the origin bond, giving 26 couplers, 29 bulk and
/// 20 edge resonators.
fn kagome49_vertices() -> Vec<Vertex> {
    let mut out = Vec::new();
    for m in -6i32..=6 {
        for n in -6i32..=6 {
            // 2x = -1 + 3(m+n) for A, 1 + 3(m+n) for B; |y| <= sqrt3 <=> |n-m| <= 2
            if (n - m).abs() > 2 {
                continue;
            }
            if (3 * (m + n) - 1).abs() <= 7 {
                out.push(Vertex::a(m, n));
            }
            if (3 * (m + n) + 1).abs() <= 7 {
                out.push(Vertex::b(m, n));
            }
        }
    }
    out
}

/// The six couplers at unit distance from the hexagon centre A(m, n) - (1, 0).
fn hexagon_vertices(m: i32, n: i32) -> Vec<Vertex> {
    let a = Vertex::a(m, n).position();
    let c = [a[0] - 1.0, a[1]];
    let mut out = Vec::new();
    for dm in -2..=2 {
        for dn in -2..=2 {
            for v in [Vertex::a(m + dm, n + dn), Vertex::b(m + dm, n + dn)] {
                let p = v.position();
                let r = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt();
                if (r - 1.0).abs() < GEOM_TOL {
                    out.push(v);
                }
            }
        }
    }
    out
}

fn honeycomb_flake(name: &str, vertices: &[Vertex]) -> LatticeSpec {
    let selected: BTreeSet<Vertex> = vertices.iter().copied().collect();
    let mut ends: BTreeMap<Bond, Vec<Vertex>> = BTreeMap::new();
    for &v in &selected {
        for b in v.bonds() {
            ends.entry(b).or_default().push(v);
        }
    }

    let mut bonds: Vec<Bond> = ends.keys().copied().collect();
    let centroid = {
        let mut c = [0.0, 0.0];
        for b in &bonds {
            let p = b.midpoint();
            c[0] += p[0];
            c[1] += p[1];
        }
        let k = bonds.len().max(1) as f64;
        [c[0] / k, c[1] / k]
    };
    let rel = |b: &Bond| {
        let p = b.midpoint();
        [p[0] - centroid[0], p[1] - centroid[1]]
    };
    // centre first, then outward shell by shell, counter-clockwise from +x
    bonds.sort_by_key(|b| {
        let p = rel(b);
        let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
        let mut ang = p[1].atan2(p[0]);
        if ang < -1e-9 {
            ang += 2.0 * PI;
        }
        (key(r), key(ang.max(0.0)))
    });
    let index: BTreeMap<Bond, usize> = bonds.iter().enumerate().map(|(i, &b)| (b, i)).collect();

    let sites = bonds
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let p = rel(b);
            Site {
                index: i,
                x: clean(p[0]),
                y: clean(p[1]),
                category: if ends[b].len() == 2 {
                    SiteCategory::Bulk
                } else {
                    SiteCategory::EdgeTerminated
                },
                orientation: b.orientation(),
            }
        })
        .collect();

    let mut edges = BTreeSet::new();
    for &v in &selected {
        let ids: Vec<usize> = v.bonds().iter().map(|b| index[b]).collect();
        for a in 0..3 {
            for c in (a + 1)..3 {
                edges.insert((ids[a].min(ids[c]), ids[a].max(ids[c])));
            }
        }
    }

    LatticeSpec {
        name: name.to_string(),
        sites,
        edges: edges.into_iter().map(|(i, j)| [i, j]).collect(),
        ports: None,
    }
}

/// Snap coordinates to 1e-12 so mirror images compare exactly.
fn clean(v: f64) -> f64 {
    let r = (v * 1e12).round() / 1e12;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

// ---------------------------------------------------------------------------
// file format

#[derive(Debug, Serialize, Deserialize)]
struct LatticeFile {
    format: u32,
    name: String,
    sites: Vec<Site>,
    edges: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ports: Option<PortConfig>,
}

pub fn to_json(lattice: &LatticeSpec) -> String {
    let file = LatticeFile {
        format: LATTICE_FORMAT,
        name: lattice.name.clone(),
        sites: lattice.sites.clone(),
        edges: lattice.edges.clone(),
        ports: lattice.ports,
    };
    let mut s = serde_json::to_string_pretty(&file).expect("lattice serializes");
    s.push('\n');
    s
}

pub fn from_json(text: &str, origin: &Path) -> Result<LatticeSpec, LatticeError> {
    let file: LatticeFile = serde_json::from_str(text).map_err(|e| LatticeError::Malformed {
        path: origin.to_path_buf(),
        reason: e.to_string(),
    })?;
    if file.format != LATTICE_FORMAT {
        return Err(LatticeError::Version(file.format));
    }
    Ok(LatticeSpec {
        name: file.name,
        sites: file.sites,
        edges: file.edges,
        ports: file.ports,
    })
}

pub fn save(lattice: &LatticeSpec, path: &Path) -> Result<(), LatticeError> {
    std::fs::write(path, to_json(lattice))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<LatticeSpec, LatticeError> {
    let text = std::fs::read_to_string(path)?;
    from_json(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn histogram(l: &LatticeSpec) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for d in degrees(l) {
            *h.entry(d).or_insert(0) += 1;
        }
        h
    }

    #[test]
    fn triangle_is_complete_graph() {
        let l = build_patch(&PatchKind::Triangle).unwrap();
        assert_eq!(l.len(), 3);
        assert_eq!(l.edges.len(), 3);
        assert_eq!(degrees(&l), vec![2, 2, 2]);
        let t = adjacency(&l);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(t[(i, j)], if i == j { 0.0 } else { 1.0 });
            }
        }
    }

    #[test]
    fn kagome49_counts_and_degrees() {
        let l = build_patch(&PatchKind::Kagome49).unwrap();
        assert_eq!(l.len(), 49);
        let h = histogram(&l);
        assert_eq!(h.keys().copied().collect::<Vec<_>>(), vec![2, 4]);
        assert_eq!(h[&4], 29);
        assert_eq!(h[&2], 20);
        // unique centre
        assert_eq!((l.sites[0].x, l.sites[0].y), (0.0, 0.0));
        assert!(l.sites[1..].iter().all(|s| s.x.hypot(s.y) > 0.5));
        let t = adjacency(&l);
        let trace: f64 = (&t * &t).trace();
        assert_eq!(trace, 2.0 * l.edges.len() as f64);
    }

    #[test]
    fn kagome49_mirrors_are_automorphisms() {
        let l = build_patch(&PatchKind::Kagome49).unwrap();
        let t = adjacency(&l);
        for axis in [MirrorAxis::Vertical, MirrorAxis::Horizontal] {
            let p = l.mirror_permutation(axis).expect("mirror symmetric");
            assert_eq!(p[0], 0);
            for i in 0..l.len() {
                for j in 0..l.len() {
                    assert_eq!(t[(i, j)], t[(p[i], p[j])]);
                }
            }
        }
    }

    #[test]
    fn star_has_twelve_sites() {
        let l = build_patch(&PatchKind::KagomeStar).unwrap();
        assert_eq!(l.len(), 12);
        let d = degrees(&l);
        assert_eq!(d.iter().filter(|&&x| x == 4).count(), 6);
        assert_eq!(d.iter().filter(|&&x| x == 2).count(), 6);
        let hex = l.interior_hexagons();
        assert_eq!(hex.len(), 1);
        for s in hex[0].sites {
            assert_eq!(d[s], 4);
        }
    }

    #[test]
    fn kagome49_interior_hexagons() {
        let l = build_patch(&PatchKind::Kagome49).unwrap();
        let all = l.hexagons();
        assert!(all.iter().all(|h| h.interior));
        assert_eq!(all.len(), 4);
    }

    #[test]
    fn couplers_join_three_sites_in_bulk() {
        let l = build_patch(&PatchKind::Kagome49).unwrap();
        let c = l.couplers();
        assert_eq!(c.len(), 26);
        assert!(c.iter().all(|(_, m)| m.len() == 3));
    }

    #[test]
    fn duplicate_edge_is_reported() {
        let mut l = build_patch(&PatchKind::Kagome49).unwrap();
        assert!(validate(&l).is_valid());
        let e = l.edges[3];
        l.edges.push([e[1], e[0]]);
        let r = validate(&l);
        assert_eq!(r.violations.len(), 1);
        assert!(r.violations[0].contains(&format!("[{}, {}]", e[1], e[0])));
    }

    #[test]
    fn port_on_bulk_site_is_reported() {
        let mut l = build_patch(&PatchKind::Kagome49).unwrap();
        l.ports = Some(PortConfig { input: 0, output: l.ports.unwrap().output });
        let r = validate(&l);
        assert_eq!(r.violations.len(), 1);
        assert!(r.violations[0].contains("port must be edge site"));
    }

    #[test]
    fn self_loop_and_missing_site() {
        let mut l = build_patch(&PatchKind::Dimer).unwrap();
        l.edges.push([1, 1]);
        l.edges.push([0, 7]);
        let r = validate(&l);
        assert_eq!(r.violations.len(), 2);
    }

    #[test]
    fn unknown_kind() {
        assert!(matches!("hexagonal".parse::<PatchKind>(), Err(LatticeError::UnknownKind(_))));
        assert_eq!("from-file:x.json".parse::<PatchKind>().unwrap(), PatchKind::FromFile("x.json".into()));
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for kind in [PatchKind::Single, PatchKind::Dimer, PatchKind::KagomeStar, PatchKind::Kagome49] {
            let l = build_patch(&kind).unwrap();
            let path = dir.path().join("l.json");
            save(&l, &path).unwrap();
            let back = build_patch(&PatchKind::FromFile(path.clone())).unwrap();
            assert_eq!(back, l);
            assert_eq!(adjacency(&back), adjacency(&l));
            assert_eq!(to_json(&back), std::fs::read_to_string(&path).unwrap());
        }
    }

    #[test]
    fn malformed_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{\"format\": 1, \"name\": 3}").unwrap();
        assert!(matches!(load(&path), Err(LatticeError::Malformed { .. })));
        std::fs::write(&path, "{\"format\": 7, \"name\": \"x\", \"sites\": [], \"edges\": []}").unwrap();
        assert!(matches!(load(&path), Err(LatticeError::Version(7))));
    }

    #[test]
    fn default_ports_sit_on_opposite_edges() {
        let l = build_patch(&PatchKind::Kagome49).unwrap();
        let p = l.ports.unwrap();
        let (a, b) = (&l.sites[p.input], &l.sites[p.output]);
        assert_eq!(a.category, SiteCategory::EdgePort);
        assert_eq!(b.category, SiteCategory::EdgePort);
        assert!(a.x < 0.0 && b.x > 0.0);
        assert_eq!((a.x, a.y), (-b.x, -b.y));
    }
}
