//! Synthetic compositional datasets, split manifests and token payloads.
//!
//! Each state `s` has a latent `u_s` and each object `o` a latent `w_o`.
//! An image of `(s, o)` is a token matrix whose first half of patches are
//! `w_o + σε` and second half `u_s ⊙ w_o + σε`, so state appearance only
//! shows up through its interaction with the object.
//!
//! On disk a dataset is a directory with `manifest.jsonl` (one record per
//! sample) and one `<split>.bin` payload per split.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ag::Tensor;
use crate::alignment::CompositionTable;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MANIFEST: &str = "manifest.jsonl";
const PAYLOAD_MAGIC: &[u8; 4] = b"EVAD";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    ValSeen,
    ValUnseen,
    TestSeen,
    TestUnseen,
}

impl Split {
    pub const ALL: [Split; 5] = [
        Split::Train,
        Split::ValSeen,
        Split::ValUnseen,
        Split::TestSeen,
        Split::TestUnseen,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::ValSeen => "val_seen",
            Split::ValUnseen => "val_unseen",
            Split::TestSeen => "test_seen",
            Split::TestUnseen => "test_unseen",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Data(format!("unknown split tag `{s}`")))
    }
}

/// Evaluation phase: which unseen pairs join the closed-world space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Val,
    Test,
}

impl Phase {
    pub fn splits(self) -> [Split; 2] {
        match self {
            Phase::Val => [Split::ValSeen, Split::ValUnseen],
            Phase::Test => [Split::TestSeen, Split::TestUnseen],
        }
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::Config(format!("unknown phase `{other}` (val|test)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorldMode {
    #[default]
    Closed,
    Open,
}

impl FromStr for WorldMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed" => Ok(Self::Closed),
            "open" => Ok(Self::Open),
            other => Err(Error::Config(format!("unknown mode `{other}` (closed|open)"))),
        }
    }
}

impl fmt::Display for WorldMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WorldMode::Closed => "closed",
            WorldMode::Open => "open",
        })
    }
}

/// Pair counts per split, in the column layout of the usual CZSL split tables:
/// `name |S| |O| |C| train-|C^s| val-|C^s| val-|C^u| test-|C^s| test-|C^u|`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitStats {
    pub name: String,
    pub n_states: usize,
    pub n_objects: usize,
    pub n_compositions: usize,
    pub train_seen: usize,
    pub val_seen: usize,
    pub val_unseen: usize,
    pub test_seen: usize,
    pub test_unseen: usize,
}

impl SplitStats {
    /// Parses one row separated by `&`, `,` or `|` (a trailing `\\` is ignored).
    pub fn parse_row(row: &str) -> Result<Self> {
        let row = row.trim().trim_end_matches("\\\\").trim();
        let cells: Vec<&str> = row.split(['&', ',', '|']).map(str::trim).collect();
        if cells.len() != 9 {
            return Err(Error::Data(format!("expected 9 cells, got {}: `{row}`", cells.len())));
        }
        let n = |i: usize| -> Result<usize> {
            cells[i]
                .parse()
                .map_err(|_| Error::Data(format!("cell {i} `{}` is not a count", cells[i])))
        };
        let stats = Self {
            name: cells[0].to_string(),
            n_states: n(1)?,
            n_objects: n(2)?,
            n_compositions: n(3)?,
            train_seen: n(4)?,
            val_seen: n(5)?,
            val_unseen: n(6)?,
            test_seen: n(7)?,
            test_unseen: n(8)?,
        };
        if stats.n_compositions != stats.n_states * stats.n_objects {
            return Err(Error::Data(format!(
                "|C|={} but |S|·|O|={}",
                stats.n_compositions,
                stats.n_states * stats.n_objects
            )));
        }
        Ok(stats)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub n_states: usize,
    pub n_objects: usize,
    pub train_pairs: usize,
    /// Seen pairs with held-out validation images (a subset of the train pairs).
    pub val_seen_pairs: usize,
    pub val_unseen_pairs: usize,
    pub test_seen_pairs: usize,
    pub test_unseen_pairs: usize,
    /// Images per training pair and per unseen pair.
    pub images_per_pair: usize,
    /// Held-out images per seen pair in each of `val_seen` and `test_seen`.
    pub eval_images_per_pair: usize,
    pub patches: usize,
    pub patch_dim: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            n_states: 8,
            n_objects: 10,
            train_pairs: 40,
            val_seen_pairs: 40,
            val_unseen_pairs: 20,
            test_seen_pairs: 40,
            test_unseen_pairs: 20,
            images_per_pair: 20,
            eval_images_per_pair: 10,
            patches: 16,
            patch_dim: 16,
            noise: 0.5,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let total = self.n_states * self.n_objects;
        if self.n_states == 0 || self.n_objects == 0 {
            return bad("need at least one state and one object".into());
        }
        let used = self.train_pairs + self.val_unseen_pairs + self.test_unseen_pairs;
        if used > total {
            return bad(format!("{used} seen+unseen pairs exceed |S|·|O| = {total}"));
        }
        if self.train_pairs < self.n_states.max(self.n_objects) {
            return bad(format!(
                "{} train pairs cannot cover {} states and {} objects",
                self.train_pairs, self.n_states, self.n_objects
            ));
        }
        if self.val_seen_pairs > self.train_pairs || self.test_seen_pairs > self.train_pairs {
            return bad("seen evaluation pairs must be a subset of the train pairs".into());
        }
        if self.images_per_pair == 0 || self.patches < 2 || self.patch_dim == 0 {
            return bad("images_per_pair, patch_dim must be positive and patches at least 2".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be a finite non-negative number, got {}", self.noise));
        }
        Ok(())
    }

    pub fn stats(&self, name: &str) -> SplitStats {
        SplitStats {
            name: name.to_string(),
            n_states: self.n_states,
            n_objects: self.n_objects,
            n_compositions: self.n_states * self.n_objects,
            train_seen: self.train_pairs,
            val_seen: self.val_seen_pairs,
            val_unseen: self.val_unseen_pairs,
            test_seen: self.test_seen_pairs,
            test_unseen: self.test_unseen_pairs,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub state: usize,
    pub object: usize,
    pub split: Split,
    /// `patches × patch_dim`, row-major.
    pub tokens: Vec<f64>,
}

/// Primitive inventories and the composition sets of each split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSpace {
    pub n_states: usize,
    pub n_objects: usize,
    /// Training compositions `C^s`, sorted.
    pub seen: Vec<(usize, usize)>,
    pub val_unseen: Vec<(usize, usize)>,
    pub test_unseen: Vec<(usize, usize)>,
    seen_index: HashMap<(usize, usize), usize>,
}

impl LabelSpace {
    pub fn new(
        n_states: usize,
        n_objects: usize,
        seen: Vec<(usize, usize)>,
        val_unseen: Vec<(usize, usize)>,
        test_unseen: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let sort = |mut v: Vec<(usize, usize)>| {
            v.sort_unstable();
            v.dedup();
            v
        };
        let (seen, val_unseen, test_unseen) = (sort(seen), sort(val_unseen), sort(test_unseen));
        for &(s, o) in seen.iter().chain(&val_unseen).chain(&test_unseen) {
            if s >= n_states || o >= n_objects {
                return Err(Error::Data(format!("pair ({s}, {o}) outside {n_states}x{n_objects}")));
            }
        }
        let seen_index = seen.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        Ok(Self {
            n_states,
            n_objects,
            seen,
            val_unseen,
            test_unseen,
            seen_index,
        })
    }

    pub fn seen_index(&self, pair: (usize, usize)) -> Option<usize> {
        self.seen_index.get(&pair).copied()
    }

    pub fn is_seen(&self, pair: (usize, usize)) -> bool {
        self.seen_index.contains_key(&pair)
    }

    pub fn seen_table(&self) -> CompositionTable {
        CompositionTable::new(self.seen.clone(), self.n_states, self.n_objects).expect("validated pairs")
    }

    pub fn unseen(&self, phase: Phase) -> &[(usize, usize)] {
        match phase {
            Phase::Val => &self.val_unseen,
            Phase::Test => &self.test_unseen,
        }
    }

    /// Target compositions for a phase and world mode, with a per-column
    /// unseen flag. Closed world is `C^s ∪ C^u`, open world is `S × O`.
    pub fn target(&self, phase: Phase, mode: WorldMode) -> (CompositionTable, Vec<bool>) {
        let pairs: Vec<(usize, usize)> = match mode {
            WorldMode::Closed => {
                let set: BTreeSet<_> = self.seen.iter().chain(self.unseen(phase)).copied().collect();
                set.into_iter().collect()
            }
            WorldMode::Open => (0..self.n_states)
                .flat_map(|s| (0..self.n_objects).map(move |o| (s, o)))
                .collect(),
        };
        let unseen = pairs.iter().map(|&p| !self.is_seen(p)).collect();
        (
            CompositionTable::new(pairs, self.n_states, self.n_objects).expect("validated pairs"),
            unseen,
        )
    }

    pub fn open_world_size(&self) -> usize {
        self.n_states * self.n_objects
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub labels: LabelSpace,
    pub patches: usize,
    pub patch_dim: usize,
    pub samples: Vec<Sample>,
}

/// Chooses pair sets: a covering set of train pairs first, then random fill.
fn choose_pairs(spec: &SplitSpec, rng: &mut ChaCha8Rng) -> [Vec<(usize, usize)>; 5] {
    let (ns, no) = (spec.n_states, spec.n_objects);
    let mut sp: Vec<usize> = (0..ns).collect();
    let mut op: Vec<usize> = (0..no).collect();
    sp.shuffle(rng);
    op.shuffle(rng);
    let mut train: Vec<(usize, usize)> = (0..ns.max(no)).map(|k| (sp[k % ns], op[k % no])).collect();
    let taken: HashSet<_> = train.iter().copied().collect();
    let mut rest: Vec<(usize, usize)> = (0..ns)
        .flat_map(|s| (0..no).map(move |o| (s, o)))
        .filter(|p| !taken.contains(p))
        .collect();
    rest.shuffle(rng);
    let mut rest = rest.into_iter();
    train.extend(rest.by_ref().take(spec.train_pairs - train.len()));
    let val_unseen: Vec<_> = rest.by_ref().take(spec.val_unseen_pairs).collect();
    let test_unseen: Vec<_> = rest.by_ref().take(spec.test_unseen_pairs).collect();
    let mut pick_seen = |n: usize| {
        let mut v = train.clone();
        v.shuffle(rng);
        v.truncate(n);
        v.sort_unstable();
        v
    };
    let val_seen = pick_seen(spec.val_seen_pairs);
    let test_seen = pick_seen(spec.test_seen_pairs);
    let mut out = [train, val_seen, val_unseen, test_seen, test_unseen];
    for v in &mut out {
        v.sort_unstable();
    }
    out
}

fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Generates the dataset described by `spec`. Identical specs give
/// bit-identical datasets.
pub fn generate(spec: &SplitSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pd = spec.patch_dim;
    let u: Vec<Vec<f64>> = (0..spec.n_states).map(|_| gaussian(pd, &mut rng)).collect();
    let w: Vec<Vec<f64>> = (0..spec.n_objects).map(|_| gaussian(pd, &mut rng)).collect();
    let sets = choose_pairs(spec, &mut rng);
    let labels = LabelSpace::new(
        spec.n_states,
        spec.n_objects,
        sets[0].clone(),
        sets[2].clone(),
        sets[4].clone(),
    )?;

    // Each pair draws all of its images from its own stream, in split order.
    let mut per_pair: HashMap<(usize, usize), Vec<(Split, usize)>> = HashMap::new();
    for (split, pairs) in Split::ALL.iter().zip(&sets) {
        let n = match split {
            Split::ValSeen | Split::TestSeen => spec.eval_images_per_pair,
            _ => spec.images_per_pair,
        };
        for &p in pairs {
            per_pair.entry(p).or_default().push((*split, n));
        }
    }
    let half = spec.patches / 2;
    let mut images: HashMap<(Split, (usize, usize)), Vec<Vec<f64>>> = HashMap::new();
    for (&(s, o), plan) in &per_pair {
        let mut prng = ChaCha8Rng::seed_from_u64(spec.seed);
        prng.set_stream((s * spec.n_objects + o) as u64 + 1);
        for &(split, n) in plan {
            let imgs = (0..n)
                .map(|_| {
                    let mut t = Vec::with_capacity(spec.patches * pd);
                    for p in 0..spec.patches {
                        for j in 0..pd {
                            let base = if p < half { w[o][j] } else { u[s][j] * w[o][j] };
                            let e: f64 = StandardNormal.sample(&mut prng);
                            t.push(base + spec.noise * e);
                        }
                    }
                    t
                })
                .collect();
            images.insert((split, (s, o)), imgs);
        }
    }

    let mut samples = Vec::new();
    for (split, pairs) in Split::ALL.iter().zip(&sets) {
        for &p in pairs {
            for tokens in images.remove(&(*split, p)).unwrap_or_default() {
                samples.push(Sample {
                    id: samples.len(),
                    state: p.0,
                    object: p.1,
                    split: *split,
                    tokens,
                });
            }
        }
    }
    Ok(Dataset {
        labels,
        patches: spec.patches,
        patch_dim: pd,
        samples,
    })
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.samples.iter().filter(|s| s.split == split).count()
    }

    /// `[batch, patches, patch_dim]` token tensor for a batch of samples.
    pub fn batch_tokens<T: Scalar>(&self, batch: &[&Sample]) -> Tensor<T> {
        let data: Vec<T> = batch.iter().flat_map(|s| s.tokens.iter().map(|&x| T::lit(x))).collect();
        Tensor::new(vec![batch.len(), self.patches, self.patch_dim], data).expect("consistent token sizes")
    }

    /// Writes `manifest.jsonl` and one payload per split into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = fs::File::create(dir.join(MANIFEST))?;
        for s in &self.samples {
            let rec = Record {
                id: s.id,
                state: s.state,
                object: s.object,
                split: s.split.as_str().to_string(),
            };
            writeln!(manifest, "{}", serde_json::to_string(&rec)?)?;
        }
        for split in Split::ALL {
            let rows = self.split(split);
            let mut buf = Vec::with_capacity(28 + rows.len() * self.patches * self.patch_dim * 8);
            buf.extend_from_slice(PAYLOAD_MAGIC);
            for n in [rows.len(), self.patches, self.patch_dim] {
                buf.extend_from_slice(&(n as u64).to_le_bytes());
            }
            for s in rows {
                for x in &s.tokens {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
            fs::write(dir.join(format!("{split}.bin")), buf)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Record {
    pub id: usize,
    pub state: usize,
    pub object: usize,
    pub split: String,
}

/// Parses a manifest into its label space and records.
///
/// Rejects duplicate ids, unknown split tags, and any pair that is both
/// seen (train) and unseen (val/test unseen), reporting the line number.
pub fn load_manifest(path: &Path) -> Result<(LabelSpace, Vec<(Record, Split)>)> {
    let shown = path.display().to_string();
    let err = |line: usize, detail: String| Error::Manifest {
        path: shown.clone(),
        line,
        detail,
    };
    let file = fs::File::open(path)?;
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    let mut seen: HashMap<(usize, usize), usize> = HashMap::new();
    let mut unseen: [HashMap<(usize, usize), usize>; 2] = Default::default();
    let (mut ns, mut no) = (0, 0);
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let n = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| err(n, e.to_string()))?;
        let split: Split = rec.split.parse().map_err(|e: Error| err(n, e.to_string()))?;
        if !ids.insert(rec.id) {
            return Err(err(n, format!("duplicate id {}", rec.id)));
        }
        let pair = (rec.state, rec.object);
        match split {
            Split::Train => {
                if let Some(l) = unseen.iter().find_map(|m| m.get(&pair)) {
                    return Err(err(n, format!("train pair {pair:?} is unseen on line {l}")));
                }
                seen.entry(pair).or_insert(n);
            }
            Split::ValUnseen | Split::TestUnseen => {
                if let Some(l) = seen.get(&pair) {
                    return Err(err(n, format!("unseen pair {pair:?} is a train pair on line {l}")));
                }
                let k = usize::from(split == Split::TestUnseen);
                unseen[k].entry(pair).or_insert(n);
            }
            Split::ValSeen | Split::TestSeen => {}
        }
        ns = ns.max(rec.state + 1);
        no = no.max(rec.object + 1);
        records.push((rec, split));
    }
    if records.is_empty() {
        return Err(err(0, "empty manifest".into()));
    }
    let [vu, tu] = unseen;
    let labels = LabelSpace::new(
        ns,
        no,
        seen.into_keys().collect(),
        vu.into_keys().collect(),
        tu.into_keys().collect(),
    )?;
    Ok((labels, records))
}

fn read_payload(path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| Error::Data(format!("{}: {m}", path.display()));
    if bytes.len() < 28 || &bytes[..4] != PAYLOAD_MAGIC {
        return Err(bad("not a token payload"));
    }
    let u = |i: usize| u64::from_le_bytes(bytes[4 + 8 * i..12 + 8 * i].try_into().expect("8 bytes")) as usize;
    let (n, p, d) = (u(0), u(1), u(2));
    let want = n
        .checked_mul(p)
        .and_then(|x| x.checked_mul(d))
        .ok_or_else(|| bad("header overflow"))?;
    if bytes.len() != 28 + want * 8 {
        return Err(bad("payload size does not match its header"));
    }
    let data = bytes[28..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((n, p, d, data))
}

/// Loads a dataset written by [`Dataset::write`], given its manifest path.
pub fn load_split(manifest: &Path) -> Result<Dataset> {
    let (labels, records) = load_manifest(manifest)?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let mut payloads = HashMap::new();
    let mut geometry: Option<(usize, usize)> = None;
    for split in Split::ALL {
        let (n, p, d, data) = read_payload(&dir.join(format!("{split}.bin")))?;
        let expected = records.iter().filter(|r| r.1 == split).count();
        if n != expected {
            return Err(Error::Data(format!("{split}: payload has {n} samples, manifest {expected}")));
        }
        if n > 0 {
            if geometry.is_some_and(|g| g != (p, d)) {
                return Err(Error::Data(format!("{split}: token geometry {p}x{d} differs between splits")));
            }
            geometry = Some((p, d));
        }
        payloads.insert(split, (data, 0usize));
    }
    let (patches, patch_dim) = geometry.ok_or_else(|| Error::Data("dataset has no samples".into()))?;
    let width = patches * patch_dim;
    let mut samples = Vec::with_capacity(records.len());
    for (rec, split) in records {
        let (data, cursor) = payloads.get_mut(&split).expect("every split loaded");
        let tokens = data[*cursor * width..(*cursor + 1) * width].to_vec();
        *cursor += 1;
        samples.push(Sample {
            id: rec.id,
            state: rec.state,
            object: rec.object,
            split,
            tokens,
        });
    }
    Ok(Dataset {
        labels,
        patches,
        patch_dim,
        samples,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub n_states: usize,
    pub n_objects: usize,
    pub seen_pairs: usize,
    pub val_unseen_pairs: usize,
    pub test_unseen_pairs: usize,
    pub closed_world_test: usize,
    pub open_world: usize,
    pub samples: Vec<(String, usize)>,
    pub violations: Vec<String>,
}

impl SplitReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks the split invariants, listing every violation found.
pub fn verify_split(ds: &Dataset) -> SplitReport {
    let l = &ds.labels;
    let mut v = Vec::new();
    let seen: HashSet<_> = l.seen.iter().copied().collect();
    for (name, unseen) in [("val_unseen", &l.val_unseen), ("test_unseen", &l.test_unseen)] {
        for p in unseen.iter().filter(|p| seen.contains(p)) {
            v.push(format!("{name} pair {p:?} is also a train pair"));
        }
    }
    for s in (0..l.n_states).filter(|&s| !l.seen.iter().any(|p| p.0 == s)) {
        v.push(format!("state {s} has no training pair"));
    }
    for o in (0..l.n_objects).filter(|&o| !l.seen.iter().any(|p| p.1 == o)) {
        v.push(format!("object {o} has no training pair"));
    }
    for smp in &ds.samples {
        let pair = (smp.state, smp.object);
        let ok = match smp.split {
            Split::Train | Split::ValSeen | Split::TestSeen => seen.contains(&pair),
            Split::ValUnseen => l.val_unseen.contains(&pair),
            Split::TestUnseen => l.test_unseen.contains(&pair),
        };
        if !ok {
            v.push(format!("sample {} ({pair:?}) does not belong to {}", smp.id, smp.split));
        }
        if smp.tokens.len() != ds.patches * ds.patch_dim || smp.tokens.iter().any(|x| !x.is_finite()) {
            v.push(format!("sample {} has malformed tokens", smp.id));
        }
    }
    let (closed, _) = l.target(Phase::Test, WorldMode::Closed);
    let expected: BTreeSet<_> = l.seen.iter().chain(&l.test_unseen).copied().collect();
    if closed.pairs.iter().copied().collect::<BTreeSet<_>>() != expected {
        v.push("closed-world test space differs from C^s ∪ C^u".into());
    }
    SplitReport {
        n_states: l.n_states,
        n_objects: l.n_objects,
        seen_pairs: l.seen.len(),
        val_unseen_pairs: l.val_unseen.len(),
        test_unseen_pairs: l.test_unseen.len(),
        closed_world_test: closed.len(),
        open_world: l.open_world_size(),
        samples: Split::ALL
            .iter()
            .map(|&s| (s.as_str().to_string(), ds.count(s)))
            .collect(),
        violations: v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_tags_round_trip() {
        for s in Split::ALL {
            assert_eq!(s.as_str().parse::<Split>().unwrap(), s);
        }
        assert!("holdout".parse::<Split>().is_err());
    }

    #[test]
    fn infeasible_counts_are_rejected() {
        let spec = SplitSpec {
            train_pairs: 60,
            val_unseen_pairs: 20,
            test_unseen_pairs: 20,
            ..SplitSpec::default()
        };
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn zero_noise_repeats_images() {
        let spec = SplitSpec {
            noise: 0.0,
            images_per_pair: 3,
            ..SplitSpec::default()
        };
        let ds = generate(&spec).unwrap();
        let train = ds.split(Split::Train);
        let first: Vec<_> = train.iter().filter(|s| (s.state, s.object) == (train[0].state, train[0].object)).collect();
        assert_eq!(first.len(), 3);
        assert!(first.iter().all(|s| s.tokens == first[0].tokens));
    }

    #[test]
    fn open_world_is_cartesian() {
        let ds = generate(&SplitSpec::default()).unwrap();
        let (t, unseen) = ds.labels.target(Phase::Test, WorldMode::Open);
        assert_eq!(t.len(), 80);
        assert_eq!(unseen.iter().filter(|&&u| !u).count(), 40);
    }
}
