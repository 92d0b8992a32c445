//! Train/validation/test partitioning with optional tile isolation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::srf::csv_err;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
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
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::validation(format!("unknown split {s:?}"))),
        }
    }
}

/// `Easy` shuffles patches directly; `Hard` keeps every tile inside one split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    Easy,
    Hard,
}

impl FromStr for SplitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(SplitMode::Easy),
            "hard" => Ok(SplitMode::Hard),
            _ => Err(Error::validation(format!("unknown split mode {s:?}"))),
        }
    }
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitMode::Easy => "easy",
            SplitMode::Hard => "hard",
        })
    }
}

/// Fractions of the patch set assigned to train, validation and test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { train: 0.8, val: 0.1, test: 0.1 }
    }
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let r = SplitRatios { train, val, test };
        r.validate()?;
        Ok(r)
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }

    fn validate(&self) -> Result<()> {
        let a = self.as_array();
        if a.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || a[0] <= 0.0 {
            return Err(Error::validation(format!("invalid split ratios {a:?}")));
        }
        if (a.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!("split ratios {a:?} do not sum to 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    pub mode: SplitMode,
    assignment: BTreeMap<String, (String, Split)>,
}

impl SplitAssignment {
    pub fn get(&self, patch_id: &str) -> Option<Split> {
        self.assignment.get(patch_id).map(|(_, s)| *s)
    }

    pub fn tile_of(&self, patch_id: &str) -> Option<&str> {
        self.assignment.get(patch_id).map(|(t, _)| t.as_str())
    }

    /// Patch ids of one split, in sorted order.
    pub fn patches(&self, split: Split) -> Vec<&str> {
        self.assignment.iter().filter(|(_, (_, s))| *s == split).map(|(p, _)| p.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, Split)> {
        self.assignment.iter().map(|(p, (t, s))| (p.as_str(), t.as_str(), *s))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_err)?;
        w.write_record(["patch_id", "tile_id", "split", "mode"]).map_err(csv_err)?;
        let mode = self.mode.to_string();
        for (p, t, s) in self.iter() {
            w.write_record([p, t, s.as_str(), mode.as_str()]).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(csv_err)?;
        if r.headers().map_err(csv_err)?.iter().collect::<Vec<_>>() != ["patch_id", "tile_id", "split", "mode"] {
            return Err(Error::format(path, "expected columns patch_id,tile_id,split,mode"));
        }
        let mut assignment = BTreeMap::new();
        let mut mode = None;
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let line = i + 2;
            let split: Split = rec[2].parse().map_err(|_| Error::Parse { line, msg: format!("bad split {:?}", &rec[2]) })?;
            let m: SplitMode = rec[3].parse().map_err(|_| Error::Parse { line, msg: format!("bad mode {:?}", &rec[3]) })?;
            if *mode.get_or_insert(m) != m {
                return Err(Error::Parse { line, msg: "mixed split modes".into() });
            }
            if assignment.insert(rec[0].to_string(), (rec[1].to_string(), split)).is_some() {
                return Err(Error::Parse { line, msg: format!("duplicate patch {:?}", &rec[0]) });
            }
        }
        let mode = mode.ok_or_else(|| Error::format(path, "empty split file"))?;
        Ok(SplitAssignment { mode, assignment })
    }
}

/// Largest-remainder allocation of `n` items to the given fractions.
fn allocate(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts = [0usize; 3];
    for i in 0..3 {
        counts[i] = exact[i].floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if ratios[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    counts
}

/// Partitions `(patch_id, tile_id)` pairs into train/val/test.
///
/// The result depends only on the set of input pairs and `seed`. In hard mode
/// tiles are shuffled and each is placed in the split with the largest
/// remaining patch deficit, so all patches of a tile share one split.
pub fn make_splits(
    patches: &[(String, String)],
    mode: SplitMode,
    ratios: SplitRatios,
    seed: u64,
) -> Result<SplitAssignment> {
    ratios.validate()?;
    if patches.is_empty() {
        return Err(Error::validation("cannot split an empty patch list"));
    }
    let mut sorted: Vec<(String, String)> = patches.to_vec();
    sorted.sort();
    if sorted.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::validation("duplicate patch id in split input"));
    }
    let r = ratios.as_array();
    let requested = r.iter().filter(|&&x| x > 0.0).count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = BTreeMap::new();

    match mode {
        SplitMode::Easy => {
            if sorted.len() < requested {
                return Err(Error::validation(format!(
                    "{} patches cannot fill {requested} non-empty splits",
                    sorted.len()
                )));
            }
            let mut counts = allocate(sorted.len(), r);
            // Every requested split receives at least one patch.
            for i in 0..3 {
                if r[i] > 0.0 && counts[i] == 0 {
                    let donor = (0..3).max_by_key(|&j| counts[j]).unwrap();
                    counts[donor] -= 1;
                    counts[i] += 1;
                }
            }
            sorted.shuffle(&mut rng);
            let mut it = sorted.into_iter();
            for (i, split) in Split::ALL.into_iter().enumerate() {
                for (p, t) in it.by_ref().take(counts[i]) {
                    assignment.insert(p, (t, split));
                }
            }
        }
        SplitMode::Hard => {
            let mut tiles: BTreeMap<&str, usize> = BTreeMap::new();
            for (_, t) in &sorted {
                *tiles.entry(t.as_str()).or_default() += 1;
            }
            if tiles.len() < requested {
                return Err(Error::validation(format!(
                    "hard split needs at least {requested} distinct tiles, found {}",
                    tiles.len()
                )));
            }
            let mut order: Vec<(&str, usize)> = tiles.into_iter().collect();
            order.shuffle(&mut rng);
            let total = sorted.len() as f64;
            let target: Vec<f64> = r.iter().map(|x| x * total).collect();
            let mut current = [0usize; 3];
            let mut tile_split: BTreeMap<&str, Split> = BTreeMap::new();
            let n_tiles = order.len();
            for (k, &(tile, count)) in order.iter().enumerate() {
                let remaining = n_tiles - k;
                let empty: Vec<usize> = (0..3).filter(|&i| r[i] > 0.0 && current[i] == 0).collect();
                let choice = if remaining <= empty.len() {
                    empty[0]
                } else {
                    (0..3)
                        .filter(|&i| r[i] > 0.0)
                        .max_by(|&a, &b| {
                            let da = target[a] - current[a] as f64;
                            let db = target[b] - current[b] as f64;
                            // ties go to the earlier split
                            da.total_cmp(&db).then(b.cmp(&a))
                        })
                        .unwrap()
                };
                current[choice] += count;
                tile_split.insert(tile, Split::ALL[choice]);
            }
            for (p, t) in &sorted {
                assignment.insert(p.clone(), (t.clone(), tile_split[t.as_str()]));
            }
        }
    }
    Ok(SplitAssignment { mode, assignment })
}

/// Tiles that appear in more than one split; empty for a valid hard split.
pub fn straddling_tiles(split: &SplitAssignment) -> Vec<String> {
    let mut seen: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
    for (_, t, s) in split.iter() {
        seen.entry(t).or_default().insert(s);
    }
    seen.into_iter().filter(|(_, s)| s.len() > 1).map(|(t, _)| t.to_string()).collect()
}
