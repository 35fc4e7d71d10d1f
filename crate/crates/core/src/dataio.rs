//! Rating and trust file ingestion, identifier remapping, train/test split and
//! dataset statistics.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::RngState;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{0}: no records")]
    Empty(PathBuf),
    #[error("invalid split fraction {0}")]
    BadFraction(f64),
    #[error("invalid rating range ({0}, {1})")]
    BadRange(f64, f64),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Delimiter {
    /// Any run of spaces or tabs.
    Whitespace,
    Comma,
    /// Comma if the line contains one, whitespace otherwise.
    Auto,
}

fn split_fields(line: &str, delim: Delimiter) -> Vec<&str> {
    let comma = match delim {
        Delimiter::Comma => true,
        Delimiter::Whitespace => false,
        Delimiter::Auto => line.contains(','),
    };
    if comma {
        line.split(',').map(str::trim).collect()
    } else {
        line.split_whitespace().collect()
    }
}

/// A rating with raw (file) identifiers.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRating {
    pub user: String,
    pub item: String,
    pub rating: f64,
}

/// A rating with contiguous indices.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingTriple {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn is_skippable(line: &str) -> bool {
    let t = line.trim();
    t.is_empty() || t.starts_with('#') || t.starts_with('%')
}

pub fn parse_ratings(text: &str, delim: Delimiter, path: &Path) -> Result<Vec<RawRating>> {
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if is_skippable(line) {
            continue;
        }
        let f = split_fields(line, delim);
        if f.len() < 3 {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                line: k + 1,
                message: format!("expected `user item rating`, got {:?}", line.trim()),
            });
        }
        let rating: f64 = f[2].parse().map_err(|_| DataError::Parse {
            path: path.to_path_buf(),
            line: k + 1,
            message: format!("rating {:?} is not a number", f[2]),
        })?;
        if !rating.is_finite() {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                line: k + 1,
                message: "rating is not finite".into(),
            });
        }
        out.push(RawRating {
            user: f[0].to_string(),
            item: f[1].to_string(),
            rating,
        });
    }
    if out.is_empty() {
        return Err(DataError::Empty(path.to_path_buf()));
    }
    Ok(out)
}

/// Trust lines `user user [weight]`. Self-edges and non-positive weights are
/// dropped; a warning is logged for self-edges.
pub fn parse_trust(text: &str, delim: Delimiter, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if is_skippable(line) {
            continue;
        }
        let f = split_fields(line, delim);
        if f.len() < 2 {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                line: k + 1,
                message: format!("expected `user user weight`, got {:?}", line.trim()),
            });
        }
        let weight = match f.get(2) {
            Some(w) => w.parse::<f64>().map_err(|_| DataError::Parse {
                path: path.to_path_buf(),
                line: k + 1,
                message: format!("weight {w:?} is not a number"),
            })?,
            None => 1.0,
        };
        if f[0] == f[1] {
            log::warn!("{}:{}: self-edge {} dropped", path.display(), k + 1, f[0]);
            continue;
        }
        if weight > 0.0 {
            out.push((f[0].to_string(), f[1].to_string()));
        }
    }
    Ok(out)
}

pub fn load_ratings(path: &Path, delim: Delimiter) -> Result<Vec<RawRating>> {
    parse_ratings(&read(path)?, delim, path)
}

pub fn load_trust(path: &Path, delim: Delimiter) -> Result<Vec<(String, String)>> {
    parse_trust(&read(path)?, delim, path)
}

/// Bijection between raw identifiers and `0..len`, in first-seen order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IdMap {
    to_index: HashMap<String, usize>,
    to_raw: Vec<String>,
}

impl IdMap {
    pub fn intern(&mut self, raw: &str) -> usize {
        if let Some(&i) = self.to_index.get(raw) {
            return i;
        }
        let i = self.to_raw.len();
        self.to_index.insert(raw.to_string(), i);
        self.to_raw.push(raw.to_string());
        i
    }

    pub fn index(&self, raw: &str) -> Option<usize> {
        self.to_index.get(raw).copied()
    }

    pub fn raw(&self, index: usize) -> Option<&str> {
        self.to_raw.get(index).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.to_raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.to_raw.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub name: String,
    pub n_users: usize,
    pub n_items: usize,
    pub train: Vec<RatingTriple>,
    pub test: Vec<RatingTriple>,
    /// Undirected, deduplicated, `i < j`.
    pub social: Vec<(usize, usize)>,
    /// Trust lines after dropping self-edges, before symmetrization.
    pub raw_links: usize,
    pub rating_range: (f64, f64),
    pub users: IdMap,
    pub items: IdMap,
    pub clamped: usize,
    pub provenance: Vec<PathBuf>,
}

impl DatasetBundle {
    pub fn n_ratings(&self) -> usize {
        self.train.len() + self.test.len()
    }

    /// Users that rated at least one item.
    pub fn n_rating_users(&self) -> usize {
        let mut seen = vec![false; self.n_users];
        for r in self.train.iter().chain(&self.test) {
            seen[r.user] = true;
        }
        seen.iter().filter(|s| **s).count()
    }
}

/// Remaps identifiers, clamps ratings into `range`, binarizes and symmetrizes
/// trust, then splits. Users known only from the trust file are kept.
pub fn assemble(
    name: &str,
    ratings: &[RawRating],
    trust: &[(String, String)],
    range: (f64, f64),
    test_fraction: f64,
    seed: u64,
) -> Result<DatasetBundle> {
    if !(range.0 < range.1) {
        return Err(DataError::BadRange(range.0, range.1));
    }
    let mut users = IdMap::default();
    let mut items = IdMap::default();
    let mut clamped = 0;
    let mut all = Vec::with_capacity(ratings.len());
    for r in ratings {
        let u = users.intern(&r.user);
        let i = items.intern(&r.item);
        let v = r.rating.clamp(range.0, range.1);
        if v != r.rating {
            clamped += 1;
        }
        all.push(RatingTriple {
            user: u,
            item: i,
            rating: v,
        });
    }
    if clamped > 0 {
        log::warn!("{name}: {clamped} ratings clamped into [{}, {}]", range.0, range.1);
    }
    let mut edges = std::collections::BTreeSet::new();
    for (a, b) in trust {
        let a = users.intern(a);
        let b = users.intern(b);
        edges.insert((a.min(b), a.max(b)));
    }
    let (train, test) = split(&all, test_fraction, seed)?;
    Ok(DatasetBundle {
        name: name.to_string(),
        n_users: users.len(),
        n_items: items.len(),
        train,
        test,
        social: edges.into_iter().collect(),
        raw_links: trust.len(),
        rating_range: range,
        users,
        items,
        clamped,
        provenance: Vec::new(),
    })
}

pub fn load_bundle(
    name: &str,
    ratings_path: &Path,
    trust_path: &Path,
    delim: Delimiter,
    range: (f64, f64),
    test_fraction: f64,
    seed: u64,
) -> Result<DatasetBundle> {
    let ratings = load_ratings(ratings_path, delim)?;
    let trust = load_trust(trust_path, delim)?;
    let mut b = assemble(name, &ratings, &trust, range, test_fraction, seed)?;
    b.provenance = vec![ratings_path.to_path_buf(), trust_path.to_path_buf()];
    Ok(b)
}

/// Seeded global random split; `round(fraction · len)` records go to test.
pub fn split<T: Clone>(records: &[T], test_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::BadFraction(test_fraction));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    RngState::new(seed).shuffle(&mut order);
    let n_test = (test_fraction * records.len() as f64).round() as usize;
    let mut is_test = vec![false; records.len()];
    for &k in &order[..n_test] {
        is_test[k] = true;
    }
    let mut train = Vec::with_capacity(records.len() - n_test);
    let mut test = Vec::with_capacity(n_test);
    for (k, r) in records.iter().enumerate() {
        if is_test[k] {
            test.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    Ok((train, test))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub name: String,
    pub users: usize,
    pub items: usize,
    pub ratings: usize,
    pub links: usize,
    /// Percent.
    pub rating_density: f64,
    /// Percent.
    pub link_density: f64,
}

impl DatasetStats {
    pub fn from_counts(name: &str, users: usize, items: usize, ratings: usize, links: usize) -> Self {
        Self {
            name: name.to_string(),
            users,
            items,
            ratings,
            links,
            rating_density: 100.0 * ratings as f64 / (users as f64 * items as f64),
            link_density: 100.0 * links as f64 / (users as f64 * users as f64),
        }
    }

    pub fn table_row(&self) -> String {
        format!(
            "{:<10} users {:>7}  items {:>7}  ratings {:>7}  links {:>7}  density_rating {:.4}%  density_link {:.4}%",
            self.name, self.users, self.items, self.ratings, self.links, self.rating_density, self.link_density
        )
    }
}

/// Counts reported for a bundle. Users are those that rated something and
/// links are trust lines, which is how the published reference numbers are
/// counted.
pub fn stats(bundle: &DatasetBundle) -> DatasetStats {
    DatasetStats::from_counts(
        &bundle.name,
        bundle.n_rating_users(),
        bundle.n_items,
        bundle.n_ratings(),
        bundle.raw_links,
    )
}

/// Published statistics of the four benchmark datasets.
pub fn reference_stats() -> BTreeMap<&'static str, DatasetStats> {
    let rows = [
        ("ciaodvd", 7375, 99746, 278483, 111781),
        ("filmtrust", 1508, 2071, 35497, 1853),
        ("douban", 3000, 3000, 136891, 7765),
        ("epinions", 22158, 296277, 728517, 355364),
    ];
    rows.iter()
        .map(|&(n, u, i, r, l)| (n, DatasetStats::from_counts(n, u, i, r, l)))
        .collect()
}

/// Fields whose measured value differs from the reference.
pub fn compare_with_reference(measured: &DatasetStats, reference: &DatasetStats) -> Vec<String> {
    let mut out = Vec::new();
    let counts = [
        ("users", measured.users, reference.users),
        ("items", measured.items, reference.items),
        ("ratings", measured.ratings, reference.ratings),
        ("links", measured.links, reference.links),
    ];
    for (field, m, r) in counts {
        if m != r {
            out.push(format!("{field}: measured {m}, reference {r}"));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub ratings_file: String,
    pub trust_file: String,
    pub range: (f64, f64),
}

/// File layout expected under `<data_dir>/<name>/`.
pub fn dataset_spec(name: &str) -> Option<DatasetSpec> {
    let (ratings, trust, range) = match name {
        "filmtrust" => ("ratings.txt", "trust.txt", (0.5, 4.0)),
        "ciaodvd" => ("movie-ratings.txt", "trusts.txt", (1.0, 5.0)),
        "douban" => ("ratings.txt", "trust.txt", (1.0, 5.0)),
        "epinions" => ("ratings.txt", "trust.txt", (1.0, 5.0)),
        _ => return None,
    };
    Some(DatasetSpec {
        name: name.to_string(),
        ratings_file: ratings.to_string(),
        trust_file: trust.to_string(),
        range,
    })
}

/// Loads a named dataset from `<data_dir>/<name>/`.
pub fn load_named(name: &str, data_dir: &Path, test_fraction: f64, seed: u64) -> Result<DatasetBundle> {
    let spec = dataset_spec(name).ok_or_else(|| DataError::Parse {
        path: data_dir.to_path_buf(),
        line: 0,
        message: format!("unknown dataset {name:?}"),
    })?;
    let dir = data_dir.join(name);
    load_bundle(
        name,
        &dir.join(&spec.ratings_file),
        &dir.join(&spec.trust_file),
        Delimiter::Auto,
        spec.range,
        test_fraction,
        seed,
    )
}

/// A FilmTrust-shaped synthetic dataset with planted latent factors, where the
/// social graph links users with similar tastes.
pub fn synthetic(
    n_users: usize,
    n_items: usize,
    ratings_per_user: usize,
    links_per_user: usize,
    range: (f64, f64),
    seed: u64,
) -> (Vec<RawRating>, Vec<(String, String)>) {
    let mut rng = RngState::new(seed);
    let k = 4;
    let users: Vec<Vec<f64>> = (0..n_users)
        .map(|_| (0..k).map(|_| rng.standard_normal()).collect())
        .collect();
    let items: Vec<Vec<f64>> = (0..n_items)
        .map(|_| (0..k).map(|_| rng.standard_normal()).collect())
        .collect();
    let mid = 0.5 * (range.0 + range.1);
    let half = 0.5 * (range.1 - range.0);
    let mut ratings = Vec::new();
    for (u, pu) in users.iter().enumerate() {
        let mut picked = std::collections::BTreeSet::new();
        while picked.len() < ratings_per_user.min(n_items) {
            picked.insert(rng.below(n_items));
        }
        for i in picked {
            let dot: f64 = pu.iter().zip(&items[i]).map(|(a, b)| a * b).sum::<f64>() / k as f64;
            let v = mid + half * (dot + 0.3 * rng.standard_normal()).tanh();
            let v = (v * 2.0).round() / 2.0;
            ratings.push(RawRating {
                user: format!("u{u}"),
                item: format!("i{i}"),
                rating: v.clamp(range.0, range.1),
            });
        }
    }
    let mut trust = Vec::new();
    for u in 0..n_users {
        for _ in 0..links_per_user {
            // best of a few random candidates by latent similarity
            let mut best = None;
            let mut best_sim = f64::NEG_INFINITY;
            for _ in 0..8 {
                let v = rng.below(n_users);
                if v == u {
                    continue;
                }
                let sim: f64 = users[u].iter().zip(&users[v]).map(|(a, b)| a * b).sum();
                if sim > best_sim {
                    best_sim = sim;
                    best = Some(v);
                }
            }
            if let Some(v) = best {
                trust.push((format!("u{u}"), format!("u{v}")));
            }
        }
    }
    (ratings, trust)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> PathBuf {
        PathBuf::from("mem")
    }

    #[test]
    fn parse_examples() {
        let r = parse_ratings("1 2 3.5\n", Delimiter::Auto, &p()).unwrap();
        assert_eq!(
            r,
            vec![RawRating {
                user: "1".into(),
                item: "2".into(),
                rating: 3.5
            }]
        );
        let r = parse_ratings("1,2,3.5\n\n# c\n4\t5\t1\n", Delimiter::Auto, &p()).unwrap();
        assert_eq!(r.len(), 2);
        assert!(matches!(parse_ratings("", Delimiter::Auto, &p()), Err(DataError::Empty(_))));
        match parse_ratings("1 2 3\n1 2 x\n", Delimiter::Whitespace, &p()) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_ratings("1 2\n", Delimiter::Whitespace, &p()),
            Err(DataError::Parse { line: 1, .. })
        ));

        let t = parse_trust("1 2 1\n3 3 1\n4 5 0\n6 7\n", Delimiter::Auto, &p()).unwrap();
        assert_eq!(t, vec![("1".into(), "2".into()), ("6".into(), "7".into())]);
    }

    #[test]
    fn split_counts_and_determinism() {
        let v: Vec<usize> = (0..10).collect();
        let (a, b) = split(&v, 0.2, 1).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        assert_eq!(split(&v, 0.2, 1).unwrap(), (a.clone(), b.clone()));
        let mut joined: Vec<usize> = a.iter().chain(&b).copied().collect();
        joined.sort();
        assert_eq!(joined, v);
        assert!(split(&v, 0.0, 1).is_err());
        assert!(split(&v, 1.0, 1).is_err());

        let big: Vec<usize> = (0..35497).collect();
        assert_ne!(split(&big, 0.2, 1).unwrap().1, split(&big, 0.2, 2).unwrap().1);
    }

    #[test]
    fn assemble_remaps_and_keeps_trust_only_users() {
        let ratings = parse_ratings("a x 4.5\nb y 0.2\na y 2\n", Delimiter::Auto, &p()).unwrap();
        let trust = parse_trust("a c 1\nc a 1\nb a 1\n", Delimiter::Auto, &p()).unwrap();
        let b = assemble("t", &ratings, &trust, (0.5, 4.0), 0.34, 3).unwrap();
        assert_eq!(b.n_users, 3);
        assert_eq!(b.n_items, 2);
        assert_eq!(b.clamped, 2);
        assert_eq!(b.social.len(), 2);
        assert_eq!(b.raw_links, 3);
        assert_eq!(b.n_rating_users(), 2);
        for r in b.train.iter().chain(&b.test) {
            assert!(r.rating >= 0.5 && r.rating <= 4.0);
        }
        for i in 0..b.users.len() {
            let raw = b.users.raw(i).unwrap();
            assert_eq!(b.users.index(raw), Some(i));
        }
    }

    #[test]
    fn stats_arithmetic() {
        let s = DatasetStats::from_counts("toy", 2, 2, 1, 0);
        assert!((s.rating_density - 25.0).abs() < 1e-12);
        let r = reference_stats();
        // published densities, four decimals (one unit of the last digit)
        let published = [
            ("ciaodvd", 0.0379, 0.2055),
            ("filmtrust", 1.1366, 0.0815),
            ("douban", 1.5210, 0.0863),
            ("epinions", 0.0110, 0.0723),
        ];
        for (name, rd, ld) in published {
            assert!((r[name].rating_density - rd).abs() < 1e-4, "{name}");
            assert!((r[name].link_density - ld).abs() < 1e-4, "{name}");
        }
        let ft = &r["filmtrust"];
        let c = &r["ciaodvd"];
        assert_eq!((c.users, c.items, c.ratings, c.links), (7375, 99746, 278483, 111781));
        let mut off = ft.clone();
        off.links = 1000;
        assert_eq!(compare_with_reference(&off, ft).len(), 1);
        assert!(compare_with_reference(ft, ft).is_empty());
    }

    #[test]
    fn loads_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let ft = dir.path().join("filmtrust");
        fs::create_dir(&ft).unwrap();
        fs::write(ft.join("ratings.txt"), "1 1 2.0\n1 2 3.5\n2 1 4.0\n3 2 1.0\n2 2 0.5\n").unwrap();
        fs::write(ft.join("trust.txt"), "1 2 1\n2 3 1\n3 3 1\n").unwrap();
        let b = load_named("filmtrust", dir.path(), 0.2, 0).unwrap();
        assert_eq!(b.n_ratings(), 5);
        assert_eq!(b.test.len(), 1);
        assert_eq!(b.raw_links, 2);
        let s = stats(&b);
        assert_eq!((s.users, s.items, s.links), (3, 2, 2));
        assert!(matches!(
            load_named("filmtrust", &dir.path().join("missing"), 0.2, 0),
            Err(DataError::Io { .. })
        ));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = synthetic(20, 15, 5, 2, (0.5, 4.0), 4);
        let b = synthetic(20, 15, 5, 2, (0.5, 4.0), 4);
        assert_eq!(a, b);
        assert_eq!(a.0.len(), 100);
        assert!(a.0.iter().all(|r| r.rating >= 0.5 && r.rating <= 4.0));
    }
}
