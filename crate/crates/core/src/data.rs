//! Gaussian-ring toy datasets, pairing, minibatching and the plain-text
//! point table format.
//!
//! Noise is drawn from ChaCha8 keyed by `(seed, stream)` with the word
//! position set to `4·j` for draw `j`, so any draw can be regenerated
//! independently. Each draw consumes two `u64`s and yields one 2D standard
//! normal by Box–Muller.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::losses::MatchBatch;
use crate::numcore::Tensor;
use crate::{Error, Result};

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix64(seed), |acc, p| mix64(acc ^ mix64(*p)))
}

fn unit_open(bits: u64) -> f64 {
    // (0, 1]
    1.0 - (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn unit_closed_open(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal pair for draw `index` of `stream` under `seed`.
pub fn normal_pair(seed: u64, stream: u64, index: u64) -> [f64; 2] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(4 * index as u128);
    let u1 = unit_open(rng.next_u64());
    let u2 = unit_closed_open(rng.next_u64());
    let r = (-2.0 * u1.ln()).sqrt();
    let a = std::f64::consts::TAU * u2;
    [r * a.cos(), r * a.sin()]
}

/// `n` uniform draws in `[0, 1]` keyed by `(seed, stream)`.
pub fn uniforms(seed: u64, stream: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..n).map(|_| unit_closed_open(rng.next_u64())).collect()
}

/// `[rows, cols]` standard normals keyed by `(seed, stream)`, filled row by
/// row from consecutive draws.
pub fn normals(seed: u64, stream: u64, rows: usize, cols: usize) -> Tensor {
    let n = rows * cols;
    let data: Vec<f64> = (0..n.div_ceil(2) as u64)
        .flat_map(|i| normal_pair(seed, stream, i))
        .take(n)
        .collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

/// `K` isotropic Gaussians with means evenly spaced on a circle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianRingSpec {
    pub components: usize,
    pub radius: f64,
    pub std: f64,
    pub seed: u64,
}

impl GaussianRingSpec {
    pub fn validate(&self) -> Result<()> {
        if self.components == 0 {
            return Err(Error::Invalid("ring needs at least one component".into()));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::Invalid(format!("ring radius must be > 0, got {}", self.radius)));
        }
        if !(self.std >= 0.0 && self.std.is_finite()) {
            return Err(Error::Invalid(format!("ring std must be >= 0, got {}", self.std)));
        }
        Ok(())
    }

    /// `(r·cos(2πk/K), r·sin(2πk/K))`
    pub fn mean(&self, k: usize) -> [f64; 2] {
        let a = std::f64::consts::TAU * k as f64 / self.components as f64;
        [self.radius * a.cos(), self.radius * a.sin()]
    }

    pub fn means(&self) -> Vec<[f64; 2]> {
        (0..self.components).map(|k| self.mean(k)).collect()
    }
}

/// Points with a component label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPoints {
    pub points: Tensor,
    pub labels: Vec<usize>,
}

/// `n_per_component` draws per component, rows grouped by component in
/// draw order. Component `k` uses noise stream `k`.
pub fn gen_ring(spec: &GaussianRingSpec, n_per_component: usize) -> Result<LabeledPoints> {
    let streams: Vec<u64> = (0..spec.components as u64).collect();
    gen_ring_with_streams(spec, n_per_component, &streams)
}

/// As [`gen_ring`], with component `k` drawing from noise stream
/// `streams[k]`. Two rings generated with the same seed and matching
/// streams share their standard-normal draws.
pub fn gen_ring_with_streams(
    spec: &GaussianRingSpec,
    n_per_component: usize,
    streams: &[u64],
) -> Result<LabeledPoints> {
    spec.validate()?;
    if n_per_component == 0 {
        return Err(Error::Invalid("n_per_component must be >= 1".into()));
    }
    if streams.len() != spec.components {
        return Err(Error::Invalid("one noise stream per component".into()));
    }
    let rows = spec.components * n_per_component;
    let mut data = Vec::with_capacity(rows * 2);
    let mut labels = Vec::with_capacity(rows);
    for k in 0..spec.components {
        let m = spec.mean(k);
        for j in 0..n_per_component {
            let xi = normal_pair(spec.seed, streams[k], j as u64);
            data.push(m[0] + spec.std * xi[0]);
            data.push(m[1] + spec.std * xi[1]);
            labels.push(k);
        }
    }
    Ok(LabeledPoints {
        points: Tensor::matrix(rows, 2, data)?,
        labels,
    })
}

/// Bijection from source components to target components.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentMap(Vec<usize>);

impl ComponentMap {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; map.len()];
        for &m in &map {
            if m >= map.len() || std::mem::replace(&mut seen[m], true) {
                return Err(Error::Pairing(format!("component map {map:?} is not a bijection")));
            }
        }
        Ok(ComponentMap(map))
    }

    pub fn identity(k: usize) -> Self {
        ComponentMap((0..k).collect())
    }

    /// `k → (k + shift) mod K`
    pub fn rotation(k: usize, shift: usize) -> Self {
        ComponentMap((0..k).map(|i| (i + shift) % k).collect())
    }

    pub fn apply(&self, k: usize) -> usize {
        self.0[k]
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (k, &m) in self.0.iter().enumerate() {
            inv[m] = k;
        }
        ComponentMap(inv)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `rotate:S`, or a comma-separated explicit list.
    pub fn parse(s: &str, components: usize) -> Result<Self> {
        if let Some(shift) = s.strip_prefix("rotate:") {
            let shift = shift
                .trim()
                .parse()
                .map_err(|_| Error::Pairing(format!("bad rotation {s:?}")))?;
            return Ok(Self::rotation(components, shift));
        }
        if s == "identity" {
            return Ok(Self::identity(components));
        }
        let map = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Pairing(format!("bad component map {s:?}")))?;
        if map.len() != components {
            return Err(Error::Pairing(format!(
                "component map has {} entries for {components} components",
                map.len()
            )));
        }
        Self::new(map)
    }

    pub fn render(&self) -> String {
        self.0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

/// Which rows are paired and which sit in the unpaired pools.
#[derive(Debug, Clone, PartialEq)]
pub struct PairingSpec {
    pub map: ComponentMap,
    pub fraction: f64,
    /// `(source row, target row)`, sorted by source row.
    pub pairs: Vec<(usize, usize)>,
    pub unpaired_source: Vec<usize>,
    pub unpaired_target: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub source: Tensor,
    pub target: Tensor,
    pub source_labels: Vec<usize>,
    pub target_labels: Vec<usize>,
    pub source_ring: GaussianRingSpec,
    pub target_ring: GaussianRingSpec,
    pub pairing: PairingSpec,
}

/// Pairs `round(ρ·n)` rows. Within component `k`, source draw `j` is
/// matched with target draw `j` of component `π(k)`; which draws are paired
/// is a seeded shuffle per component, taken round-robin across components.
pub fn make_paired(
    source: &LabeledPoints,
    target: &LabeledPoints,
    map: &ComponentMap,
    fraction: f64,
    seed: u64,
) -> Result<PairingSpec> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Pairing(format!("paired fraction {fraction} outside [0, 1]")));
    }
    let k = map.len();
    let by_label = |lp: &LabeledPoints| {
        let mut groups = vec![Vec::new(); k];
        for (row, &l) in lp.labels.iter().enumerate() {
            if l >= k {
                return Err(Error::Pairing(format!("label {l} outside the component map")));
            }
            groups[l].push(row);
        }
        Ok(groups)
    };
    let src = by_label(source)?;
    let tgt = by_label(target)?;
    let n = source.points.rows().min(target.points.rows());
    let want = (fraction * n as f64).round() as usize;

    let mut candidates: Vec<Vec<(usize, usize)>> = Vec::with_capacity(k);
    for c in 0..k {
        let partner = &tgt[map.apply(c)];
        if want > 0 && src[c].len() != partner.len() {
            return Err(Error::Pairing(format!(
                "component {c} has {} source rows but component {} has {} target rows",
                src[c].len(),
                map.apply(c),
                partner.len()
            )));
        }
        let mut pairs: Vec<(usize, usize)> = src[c].iter().copied().zip(partner.iter().copied()).collect();
        pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[c as u64])));
        pairs.reverse();
        candidates.push(pairs);
    }
    let mut chosen = Vec::with_capacity(want);
    'outer: while chosen.len() < want {
        let mut progressed = false;
        for c in candidates.iter_mut() {
            if chosen.len() == want {
                break 'outer;
            }
            if let Some(p) = c.pop() {
                chosen.push(p);
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    chosen.sort_unstable();

    let mut src_paired = vec![false; source.points.rows()];
    let mut tgt_paired = vec![false; target.points.rows()];
    for &(s, t) in &chosen {
        src_paired[s] = true;
        tgt_paired[t] = true;
    }
    Ok(PairingSpec {
        map: map.clone(),
        fraction,
        pairs: chosen,
        unpaired_source: (0..src_paired.len()).filter(|&i| !src_paired[i]).collect(),
        unpaired_target: (0..tgt_paired.len()).filter(|&i| !tgt_paired[i]).collect(),
    })
}

/// Full recipe for a toy task.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySpec {
    pub components: usize,
    pub source_radius: f64,
    pub source_std: f64,
    pub target_radius: f64,
    pub target_std: f64,
    pub map: ComponentMap,
    pub paired_fraction: f64,
    pub per_component: usize,
    pub seed: u64,
    /// Target draw `j` of component `π(k)` reuses the noise of source draw
    /// `j` of component `k`, so every pair is related by the same affine
    /// map per component.
    pub coupled_noise: bool,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            components: 8,
            source_radius: 1.0,
            source_std: 0.1,
            target_radius: 1.4,
            target_std: 0.06,
            map: ComponentMap::rotation(8, 1),
            paired_fraction: 1.0,
            per_component: 128,
            seed: 0,
            coupled_noise: true,
        }
    }
}

impl ToySpec {
    pub fn source_ring(&self) -> GaussianRingSpec {
        GaussianRingSpec {
            components: self.components,
            radius: self.source_radius,
            std: self.source_std,
            seed: self.seed,
        }
    }

    pub fn target_ring(&self) -> GaussianRingSpec {
        GaussianRingSpec {
            components: self.components,
            radius: self.target_radius,
            std: self.target_std,
            seed: if self.coupled_noise {
                self.seed
            } else {
                derive_seed(self.seed, &[1])
            },
        }
    }

    pub fn build(&self) -> Result<ToyDataset> {
        if self.map.len() != self.components {
            return Err(Error::Pairing("component map size differs from component count".into()));
        }
        let source_ring = self.source_ring();
        let target_ring = self.target_ring();
        let source = gen_ring(&source_ring, self.per_component)?;
        let streams: Vec<u64> = if self.coupled_noise {
            let inv = self.map.inverse();
            (0..self.components).map(|c| inv.apply(c) as u64).collect()
        } else {
            (0..self.components as u64).collect()
        };
        let target = gen_ring_with_streams(&target_ring, self.per_component, &streams)?;
        let pairing = make_paired(
            &source,
            &target,
            &self.map,
            self.paired_fraction,
            derive_seed(self.seed, &[2]),
        )?;
        Ok(ToyDataset {
            source: source.points,
            target: target.points,
            source_labels: source.labels,
            target_labels: target.labels,
            source_ring,
            target_ring,
            pairing,
        })
    }

    /// Held-out, fully paired split from an independent seed.
    pub fn test_split(&self, per_component: usize) -> Result<ToyDataset> {
        ToySpec {
            paired_fraction: 1.0,
            per_component,
            seed: derive_seed(self.seed, &[0x7e57]),
            ..self.clone()
        }
        .build()
    }
}

impl ToyDataset {
    /// A single-component, fully paired dataset where row `i` of `x` is
    /// paired with row `i` of `z`.
    pub fn from_pairs(x: Tensor, z: Tensor) -> Result<Self> {
        if x.rows() != z.rows() {
            return Err(Error::RowMismatch {
                left: x.rows(),
                right: z.rows(),
            });
        }
        if x.cols() != z.cols() {
            return Err(Error::Dimension {
                expected: x.cols(),
                got: z.shape().to_vec(),
            });
        }
        let n = x.rows();
        let ring = GaussianRingSpec {
            components: 1,
            radius: 1.0,
            std: 0.0,
            seed: 0,
        };
        Ok(ToyDataset {
            source: x,
            target: z,
            source_labels: vec![0; n],
            target_labels: vec![0; n],
            source_ring: ring,
            target_ring: ring,
            pairing: PairingSpec {
                map: ComponentMap::identity(1),
                fraction: 1.0,
                pairs: (0..n).map(|i| (i, i)).collect(),
                unpaired_source: Vec::new(),
                unpaired_target: Vec::new(),
            },
        })
    }

    pub fn dim(&self) -> usize {
        self.source.cols()
    }

    pub fn paired_source(&self) -> Tensor {
        let idx: Vec<usize> = self.pairing.pairs.iter().map(|p| p.0).collect();
        self.source.select_rows(&idx)
    }

    pub fn paired_target(&self) -> Tensor {
        let idx: Vec<usize> = self.pairing.pairs.iter().map(|p| p.1).collect();
        self.target.select_rows(&idx)
    }

    pub fn paired_source_labels(&self) -> Vec<usize> {
        self.pairing.pairs.iter().map(|p| self.source_labels[p.0]).collect()
    }

    /// Per-coordinate affine map of both sides into `[-1, 1]`.
    pub fn normalized(&self) -> (ToyDataset, Normalizer) {
        let norm = Normalizer::fit(&[&self.source, &self.target]);
        let mut out = self.clone();
        out.source = norm.apply(&self.source);
        out.target = norm.apply(&self.target);
        (out, norm)
    }

    pub fn to_table(&self) -> PointTable {
        let mut rows = Vec::with_capacity(self.source.rows() + self.target.rows());
        let mut src_partner = vec![None; self.source.rows()];
        let mut tgt_partner = vec![None; self.target.rows()];
        for &(s, t) in &self.pairing.pairs {
            src_partner[s] = Some(t);
            tgt_partner[t] = Some(s);
        }
        for i in 0..self.source.rows() {
            rows.push(TableRow {
                side: Side::Source,
                label: self.source_labels[i],
                partner: src_partner[i],
                coords: self.source.row(i).to_vec(),
            });
        }
        for i in 0..self.target.rows() {
            rows.push(TableRow {
                side: Side::Target,
                label: self.target_labels[i],
                partner: tgt_partner[i],
                coords: self.target.row(i).to_vec(),
            });
        }
        PointTable {
            meta: TableMeta {
                components: self.source_ring.components,
                source_radius: self.source_ring.radius,
                source_std: self.source_ring.std,
                target_radius: self.target_ring.radius,
                target_std: self.target_ring.std,
                seed: self.source_ring.seed,
                paired_fraction: self.pairing.fraction,
                map: self.pairing.map.clone(),
            },
            rows,
        }
    }

    pub fn from_table(table: &PointTable) -> Result<Self> {
        let meta = &table.meta;
        let src: Vec<&TableRow> = table.rows.iter().filter(|r| r.side == Side::Source).collect();
        let tgt: Vec<&TableRow> = table.rows.iter().filter(|r| r.side == Side::Target).collect();
        let dim = table.dim()?;
        let to_tensor = |rows: &[&TableRow]| {
            Tensor::matrix(
                rows.len(),
                dim,
                rows.iter().flat_map(|r| r.coords.iter().copied()).collect(),
            )
        };
        let mut pairs = Vec::new();
        for (i, r) in src.iter().enumerate() {
            if let Some(t) = r.partner {
                let back = tgt.get(t).and_then(|row| row.partner);
                if back != Some(i) {
                    return Err(Error::Format {
                        what: "point table",
                        detail: format!("source row {i} names partner {t} which does not point back"),
                    });
                }
                pairs.push((i, t));
            }
        }
        let paired_t: Vec<bool> = {
            let mut v = vec![false; tgt.len()];
            for &(_, t) in &pairs {
                v[t] = true;
            }
            v
        };
        Ok(ToyDataset {
            source: to_tensor(&src)?,
            target: to_tensor(&tgt)?,
            source_labels: src.iter().map(|r| r.label).collect(),
            target_labels: tgt.iter().map(|r| r.label).collect(),
            source_ring: GaussianRingSpec {
                components: meta.components,
                radius: meta.source_radius,
                std: meta.source_std,
                seed: meta.seed,
            },
            target_ring: GaussianRingSpec {
                components: meta.components,
                radius: meta.target_radius,
                std: meta.target_std,
                seed: meta.seed,
            },
            pairing: PairingSpec {
                map: meta.map.clone(),
                fraction: meta.paired_fraction,
                unpaired_source: (0..src.len()).filter(|i| src[*i].partner.is_none()).collect(),
                unpaired_target: (0..tgt.len()).filter(|i| !paired_t[*i]).collect(),
                pairs,
            },
        })
    }
}

/// Per-coordinate affine map `x ↦ 2(x − lo)/(hi − lo) − 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Normalizer {
    pub fn fit(sets: &[&Tensor]) -> Self {
        let d = sets[0].cols();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for t in sets {
            for i in 0..t.rows() {
                for (j, &v) in t.row(i).iter().enumerate() {
                    lo[j] = lo[j].min(v);
                    hi[j] = hi[j].max(v);
                }
            }
        }
        for j in 0..d {
            if hi[j] <= lo[j] {
                hi[j] = lo[j] + 1.0;
            }
        }
        Normalizer { lo, hi }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        self.map(x, |v, lo, hi| 2.0 * (v - lo) / (hi - lo) - 1.0)
    }

    pub fn invert(&self, y: &Tensor) -> Tensor {
        self.map(y, |v, lo, hi| (v + 1.0) * 0.5 * (hi - lo) + lo)
    }

    fn map(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let d = x.cols();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, self.lo[i % d], self.hi[i % d]))
            .collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }
}

/// One training minibatch with the dataset rows it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch {
    pub batch: MatchBatch,
    pub pairs: Vec<(usize, usize)>,
    pub unpaired_source: Vec<usize>,
    pub unpaired_target: Vec<usize>,
    pub warnings: Vec<String>,
}

const POOL_PAIRED: u64 = 0;
const POOL_SOURCE: u64 = 1;
const POOL_TARGET: u64 = 2;

/// `count` consecutive entries of the per-epoch shuffled stream of a pool,
/// starting at position `step·count`.
fn draw_from_pool(size: usize, count: usize, seed: u64, pool: u64, step: u64) -> Vec<usize> {
    if size == 0 || count == 0 {
        return Vec::new();
    }
    let start = step as u128 * count as u128;
    let mut out = Vec::with_capacity(count);
    let mut cached: Option<(u128, Vec<usize>)> = None;
    for p in start..start + count as u128 {
        let epoch = p / size as u128;
        let pos = (p % size as u128) as usize;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..size).collect();
            let s = derive_seed(seed, &[pool, epoch as u64]);
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().unwrap().1[pos]);
    }
    out
}

/// Half paired rows, half unpaired rows per side when both kinds exist;
/// otherwise the whole batch from whichever pool is nonempty. Draws are
/// without replacement within an epoch of each pool, reshuffled per epoch
/// from `(seed, epoch)`. A request larger than a pool is cut to the pool
/// size and noted in `warnings`.
pub fn minibatch(dataset: &ToyDataset, batch_size: usize, seed: u64, step: u64) -> Result<Minibatch> {
    let p = &dataset.pairing;
    let (np, nus, nut) = (p.pairs.len(), p.unpaired_source.len(), p.unpaired_target.len());
    if np + nus + nut == 0 {
        return Err(Error::Empty("dataset"));
    }
    if batch_size == 0 {
        return Err(Error::Invalid("batch size must be >= 1".into()));
    }
    let mixed = np > 0 && (nus > 0 || nut > 0);
    if mixed && batch_size % 2 != 0 {
        return Err(Error::Invalid(format!(
            "batch size {batch_size} must be even when paired and unpaired pools are both present"
        )));
    }
    let (want_p, want_u) = match (np > 0, mixed) {
        (_, true) => (batch_size / 2, batch_size / 2),
        (true, false) => (batch_size, 0),
        (false, _) => (0, batch_size),
    };
    let mut warnings = Vec::new();
    let mut cap = |want: usize, have: usize, name: &str| {
        if want > have && have > 0 {
            warnings.push(format!(
                "requested {want} rows from the {name} pool of {have}; using {have}"
            ));
            have
        } else {
            want.min(have)
        }
    };
    let cp = cap(want_p, np, "paired");
    let cs = cap(want_u, nus, "unpaired source");
    let ct = cap(want_u, nut, "unpaired target");

    let pairs: Vec<(usize, usize)> = draw_from_pool(np, cp, seed, POOL_PAIRED, step)
        .into_iter()
        .map(|i| p.pairs[i])
        .collect();
    let us: Vec<usize> = draw_from_pool(nus, cs, seed, POOL_SOURCE, step)
        .into_iter()
        .map(|i| p.unpaired_source[i])
        .collect();
    let ut: Vec<usize> = draw_from_pool(nut, ct, seed, POOL_TARGET, step)
        .into_iter()
        .map(|i| p.unpaired_target[i])
        .collect();
    let src_idx: Vec<usize> = pairs.iter().map(|q| q.0).collect();
    let tgt_idx: Vec<usize> = pairs.iter().map(|q| q.1).collect();
    Ok(Minibatch {
        batch: MatchBatch {
            x_paired: dataset.source.select_rows(&src_idx),
            z_paired: dataset.target.select_rows(&tgt_idx),
            x_unpaired: dataset.source.select_rows(&us),
            z_unpaired: dataset.target.select_rows(&ut),
        },
        pairs,
        unpaired_source: us,
        unpaired_target: ut,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

impl Side {
    fn as_str(&self) -> &'static str {
        match self {
            Side::Source => "source",
            Side::Target => "target",
        }
    }

    pub fn other(&self) -> Side {
        match self {
            Side::Source => Side::Target,
            Side::Target => Side::Source,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableMeta {
    pub components: usize,
    pub source_radius: f64,
    pub source_std: f64,
    pub target_radius: f64,
    pub target_std: f64,
    pub seed: u64,
    pub paired_fraction: f64,
    pub map: ComponentMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub side: Side,
    pub label: usize,
    /// Row index of the partner within the other side.
    pub partner: Option<usize>,
    pub coords: Vec<f64>,
}

/// Plain-text point table:
///
/// ```text
/// # bidpm-points v1 components=8 source_radius=1 source_std=0.1 target_radius=1.4 target_std=0.06 seed=0 paired_fraction=1 map=1,2,3,4,5,6,7,0
/// side,label,partner,x0,x1
/// source,0,0,1.0123,-0.0456
/// target,1,0,1.0007,0.9871
/// ```
///
/// `partner` is `-1` for unpaired rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PointTable {
    pub meta: TableMeta,
    pub rows: Vec<TableRow>,
}

const TABLE_MAGIC: &str = "# bidpm-points v1";

impl PointTable {
    pub fn dim(&self) -> Result<usize> {
        let d = self.rows.first().map_or(2, |r| r.coords.len());
        if self.rows.iter().any(|r| r.coords.len() != d) {
            return Err(Error::Format {
                what: "point table",
                detail: "rows have differing dimensions".into(),
            });
        }
        Ok(d)
    }

    pub fn side_points(&self, side: Side) -> Result<Tensor> {
        let d = self.dim()?;
        let rows: Vec<&TableRow> = self.rows.iter().filter(|r| r.side == side).collect();
        Ok(Tensor::matrix(
            rows.len(),
            d,
            rows.iter().flat_map(|r| r.coords.iter().copied()).collect(),
        )?)
    }

    pub fn render(&self) -> Result<String> {
        let d = self.dim()?;
        let m = &self.meta;
        let mut s = String::new();
        writeln!(
            s,
            "{TABLE_MAGIC} components={} source_radius={} source_std={} target_radius={} target_std={} seed={} paired_fraction={} map={}",
            m.components, m.source_radius, m.source_std, m.target_radius, m.target_std, m.seed, m.paired_fraction, m.map.render()
        )
        .unwrap();
        s.push_str("side,label,partner");
        for j in 0..d {
            write!(s, ",x{j}").unwrap();
        }
        s.push('\n');
        for r in &self.rows {
            let partner = r.partner.map_or(-1, |p| p as i64);
            write!(s, "{},{},{}", r.side.as_str(), r.label, partner).unwrap();
            for v in &r.coords {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        Ok(s)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            what: "point table",
            detail,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let rest = header
            .strip_prefix(TABLE_MAGIC)
            .ok_or_else(|| bad(format!("missing {TABLE_MAGIC:?} header")))?;
        let mut kv = std::collections::HashMap::new();
        for tok in rest.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| bad(format!("bad header token {tok:?}")))?;
            kv.insert(k, v);
        }
        fn get<T: std::str::FromStr>(
            kv: &std::collections::HashMap<&str, &str>,
            key: &str,
        ) -> std::result::Result<T, String> {
            kv.get(key)
                .ok_or_else(|| format!("header lacks {key}"))?
                .parse()
                .map_err(|_| format!("header {key} unparsable"))
        }
        let components: usize = get(&kv, "components").map_err(bad)?;
        let map_text: String = get(&kv, "map").map_err(bad)?;
        let meta = TableMeta {
            components,
            source_radius: get(&kv, "source_radius").map_err(bad)?,
            source_std: get(&kv, "source_std").map_err(bad)?,
            target_radius: get(&kv, "target_radius").map_err(bad)?,
            target_std: get(&kv, "target_std").map_err(bad)?,
            seed: get(&kv, "seed").map_err(bad)?,
            paired_fraction: get(&kv, "paired_fraction").map_err(bad)?,
            map: ComponentMap::parse(&map_text, components)?,
        };
        let columns = lines.next().ok_or_else(|| bad("missing column header".into()))?;
        let ncols = columns.split(',').count();
        if ncols < 4 || !columns.starts_with("side,label,partner") {
            return Err(bad(format!("unexpected columns {columns:?}")));
        }
        let mut rows = Vec::new();
        for (ln, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != ncols {
                return Err(bad(format!("line {}: {} cells, expected {ncols}", ln + 3, cells.len())));
            }
            let side = match cells[0] {
                "source" => Side::Source,
                "target" => Side::Target,
                other => return Err(bad(format!("line {}: unknown side {other:?}", ln + 3))),
            };
            let label = cells[1]
                .parse()
                .map_err(|_| bad(format!("line {}: bad label", ln + 3)))?;
            let partner: i64 = cells[2]
                .parse()
                .map_err(|_| bad(format!("line {}: bad partner", ln + 3)))?;
            let coords = cells[3..]
                .iter()
                .map(|c| c.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad(format!("line {}: bad coordinate", ln + 3)))?;
            rows.push(TableRow {
                side,
                label,
                partner: (partner >= 0).then_some(partner as usize),
                coords,
            });
        }
        Ok(PointTable { meta, rows })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn small(fraction: f64) -> ToySpec {
        ToySpec {
            per_component: 20,
            paired_fraction: fraction,
            seed: 11,
            ..ToySpec::default()
        }
    }

    #[test]
    fn ring_geometry() {
        let spec = GaussianRingSpec {
            components: 8,
            radius: 1.0,
            std: 0.1,
            seed: 0,
        };
        let m = spec.mean(2);
        assert!(m[0].abs() < 1e-15 && (m[1] - 1.0).abs() < 1e-15);
        assert!(gen_ring(&spec, 0).is_err());
        assert!(gen_ring(&GaussianRingSpec { radius: 0.0, ..spec }, 1).is_err());
        assert!(gen_ring(&GaussianRingSpec { components: 0, ..spec }, 1).is_err());
    }

    #[test]
    fn zero_std_collapses_onto_means() {
        let spec = GaussianRingSpec {
            components: 5,
            radius: 2.0,
            std: 0.0,
            seed: 3,
        };
        let lp = gen_ring(&spec, 4).unwrap();
        for (i, &l) in lp.labels.iter().enumerate() {
            assert_eq!(lp.points.row(i), &spec.mean(l));
        }
    }

    #[test]
    fn component_sample_mean_converges() {
        let spec = GaussianRingSpec {
            components: 1,
            radius: 1.0,
            std: 0.3,
            seed: 42,
        };
        let lp = gen_ring(&spec, 10_000).unwrap();
        let n = lp.points.rows() as f64;
        let mx: f64 = (0..lp.points.rows()).map(|i| lp.points.row(i)[0]).sum::<f64>() / n;
        let my: f64 = (0..lp.points.rows()).map(|i| lp.points.row(i)[1]).sum::<f64>() / n;
        let tol = 5.0 * spec.std / 100.0;
        assert!((mx - 1.0).abs() < tol && my.abs() < tol, "{mx} {my}");
    }

    #[test]
    fn generation_is_pure() {
        assert_eq!(small(0.5).build().unwrap(), small(0.5).build().unwrap());
        let other = ToySpec { seed: 12, ..small(0.5) }.build().unwrap();
        assert_ne!(small(0.5).build().unwrap().source, other.source);
    }

    #[test]
    fn full_and_empty_pairing() {
        let d = small(1.0).build().unwrap();
        assert_eq!(d.pairing.pairs.len(), d.source.rows());
        assert!(d.pairing.unpaired_source.is_empty() && d.pairing.unpaired_target.is_empty());
        let d = small(0.0).build().unwrap();
        assert!(d.pairing.pairs.is_empty());
        assert_eq!(d.pairing.unpaired_source.len(), d.source.rows());
    }

    #[test]
    fn rotation_pairing_label_audit() {
        let d = small(0.5).build().unwrap();
        assert_eq!(d.pairing.pairs.len(), (0.5 * d.source.rows() as f64).round() as usize);
        for &(s, t) in &d.pairing.pairs {
            assert_eq!(d.target_labels[t], (d.source_labels[s] + 1) % 8);
        }
        // Disjoint and covering on each side.
        let mut seen = vec![0; d.source.rows()];
        for &(s, _) in &d.pairing.pairs {
            seen[s] += 1;
        }
        for &s in &d.pairing.unpaired_source {
            seen[s] += 1;
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn coupled_noise_makes_pairs_affine() {
        let spec = small(1.0);
        let d = spec.build().unwrap();
        let ratio = spec.target_std / spec.source_std;
        for &(s, t) in &d.pairing.pairs {
            let ms = d.source_ring.mean(d.source_labels[s]);
            let mt = d.target_ring.mean(d.target_labels[t]);
            for j in 0..2 {
                let want = mt[j] + ratio * (d.source.row(s)[j] - ms[j]);
                assert!((d.target.row(t)[j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cardinality_mismatch_is_an_error() {
        let ring = GaussianRingSpec {
            components: 2,
            radius: 1.0,
            std: 0.1,
            seed: 0,
        };
        let a = gen_ring(&ring, 3).unwrap();
        let mut b = gen_ring(&ring, 3).unwrap();
        b.labels[0] = 1;
        let r = make_paired(&a, &b, &ComponentMap::identity(2), 0.5, 0);
        assert!(matches!(r, Err(Error::Pairing(_))));
        assert!(make_paired(&a, &a, &ComponentMap::identity(2), 1.5, 0).is_err());
        assert!(ComponentMap::new(vec![0, 0]).is_err());
    }

    #[test]
    fn fully_paired_batches_are_all_paired() {
        let d = small(1.0).build().unwrap();
        let mb = minibatch(&d, 16, 5, 3).unwrap();
        assert_eq!(mb.batch.x_paired.rows(), 16);
        assert_eq!(mb.batch.x_unpaired.rows(), 0);
        assert_eq!(mb.batch.z_unpaired.rows(), 0);
    }

    #[test]
    fn mixed_batches_split_evenly() {
        let d = small(0.5).build().unwrap();
        let mb = minibatch(&d, 16, 5, 0).unwrap();
        assert_eq!(mb.batch.x_paired.rows(), 8);
        assert_eq!(mb.batch.x_unpaired.rows(), 8);
        assert_eq!(mb.batch.z_unpaired.rows(), 8);
        assert!(minibatch(&d, 15, 5, 0).is_err());
    }

    #[test]
    fn minibatch_is_deterministic() {
        let d = small(0.3).build().unwrap();
        assert_eq!(minibatch(&d, 32, 9, 7).unwrap(), minibatch(&d, 32, 9, 7).unwrap());
        assert_ne!(minibatch(&d, 32, 9, 7).unwrap(), minibatch(&d, 32, 9, 8).unwrap());
    }

    #[test]
    fn epoch_covers_every_pair_once() {
        let d = small(1.0).build().unwrap();
        let n = d.pairing.pairs.len();
        assert_eq!(n % 16, 0);
        let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
        for step in 0..(n / 16) as u64 {
            for p in minibatch(&d, 16, 1, step).unwrap().pairs {
                *counts.entry(p).or_default() += 1;
            }
        }
        assert_eq!(counts.len(), n);
        assert!(counts.values().all(|&c| c == 1));
    }

    #[test]
    fn oversized_request_wraps_with_warning() {
        let d = small(0.05).build().unwrap();
        let np = d.pairing.pairs.len();
        let mb = minibatch(&d, 2 * (np + 4), 1, 0).unwrap();
        assert_eq!(mb.pairs.len(), np);
        assert!(!mb.warnings.is_empty());
    }

    #[test]
    fn table_round_trip() {
        let d = small(0.25).build().unwrap();
        let text = d.to_table().render().unwrap();
        let t = PointTable::parse(&text).unwrap();
        let back = ToyDataset::from_table(&t).unwrap();
        assert_eq!(back.source, d.source);
        assert_eq!(back.target, d.target);
        assert_eq!(back.pairing.pairs, d.pairing.pairs);
        assert_eq!(back.pairing.unpaired_target, d.pairing.unpaired_target);
        assert_eq!(back.pairing.map, d.pairing.map);
        assert_eq!(t.render().unwrap(), text);
    }

    #[test]
    fn table_rejects_garbage() {
        assert!(PointTable::parse("").is_err());
        assert!(PointTable::parse("hello\n").is_err());
        let d = small(1.0).build().unwrap();
        let mut text = d.to_table().render().unwrap();
        text.push_str("sideways,0,-1,0,0\n");
        assert!(PointTable::parse(&text).is_err());
    }

    proptest! {
        #[test]
        fn normalization_round_trips(pts in proptest::collection::vec(-50.0f64..50.0, 2..40)) {
            let n = pts.len() / 2;
            let x = Tensor::matrix(n, 2, pts[..2 * n].to_vec()).unwrap();
            let norm = Normalizer::fit(&[&x]);
            let y = norm.apply(&x);
            prop_assert!(y.data().iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));
            let back = norm.invert(&y);
            for (a, b) in back.data().iter().zip(x.data()) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }
}
