//! Assignment of training samples to clients.
//!
//! All schemes are pure functions of `(dataset, parameters, seed)`. Samples
//! left over by integer division are dropped and counted in
//! [`Partition::dropped`].

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

const MANIFEST_HEADER: &str = "# partition manifest v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionScheme {
    Iid,
    /// At most `classes_per_client` labels per client, equal shard sizes.
    NonIid {
        classes_per_client: usize,
    },
    /// A fifth of the clients share 40% of the data, two fifths share
    /// another 40%, the remaining two fifths share 20%.
    Unbalanced,
}

impl PartitionScheme {
    fn tag(&self) -> String {
        match self {
            Self::Iid => "iid".into(),
            Self::NonIid { classes_per_client } => format!("noniid {classes_per_client}"),
            Self::Unbalanced => "unbalanced".into(),
        }
    }

    fn parse(s: &str) -> Option<Self> {
        let mut it = s.split_whitespace();
        let out = match it.next()? {
            "iid" => Self::Iid,
            "unbalanced" => Self::Unbalanced,
            "noniid" => Self::NonIid {
                classes_per_client: it.next()?.parse().ok()?,
            },
            _ => return None,
        };
        it.next().is_none().then_some(out)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub shards: Vec<Vec<usize>>,
    pub scheme: PartitionScheme,
    /// Size of the partitioned dataset.
    pub samples: usize,
    /// Samples assigned to no client.
    pub dropped: usize,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }

    pub fn shard_sizes(&self) -> Vec<usize> {
        self.shards.iter().map(Vec::len).collect()
    }

    /// Number of assigned samples.
    pub fn assigned(&self) -> usize {
        self.shards.iter().map(Vec::len).sum()
    }

    /// `|D| / |D_i|` with `|D|` the number of assigned samples: the number of
    /// equally sized clients that client `i` stands in for.
    pub fn virtual_m(&self, client: usize) -> Result<f64> {
        let shard = self
            .shards
            .get(client)
            .ok_or_else(|| Error::Range(format!("client {client} >= {}", self.num_clients())))?;
        if shard.is_empty() {
            return Err(Error::InvalidState(format!(
                "client {client} has an empty shard"
            )));
        }
        Ok(self.assigned() as f64 / shard.len() as f64)
    }

    /// Checks that shards are disjoint, in range, and together with the
    /// dropped samples cover the dataset.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.samples];
        for (c, shard) in self.shards.iter().enumerate() {
            for &i in shard {
                let slot = seen.get_mut(i).ok_or_else(|| {
                    Error::Assertion(format!("client {c}: index {i} >= {}", self.samples))
                })?;
                if std::mem::replace(slot, true) {
                    return Err(Error::Assertion(format!("index {i} assigned twice")));
                }
            }
        }
        let unassigned = seen.iter().filter(|&&s| !s).count();
        if unassigned != self.dropped {
            return Err(Error::Assertion(format!(
                "{unassigned} unassigned samples, manifest records {}",
                self.dropped
            )));
        }
        Ok(())
    }

    /// Text manifest: a header, `scheme`, `samples` and `dropped` lines,
    /// then one `client <i>: <indices>` line per client.
    pub fn to_manifest(&self) -> String {
        let mut s = format!(
            "{MANIFEST_HEADER}\nscheme {}\nsamples {}\ndropped {}\n",
            self.scheme.tag(),
            self.samples,
            self.dropped
        );
        for (c, shard) in self.shards.iter().enumerate() {
            let _ = write!(s, "client {c}:");
            for i in shard {
                let _ = write!(s, " {i}");
            }
            s.push('\n');
        }
        s
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_manifest())?;
        Ok(())
    }
}

/// Parses a manifest written by [`Partition::write_manifest`]. Parse errors
/// carry the byte offset of the offending line.
pub fn read_manifest(path: &Path) -> Result<Partition> {
    let text = std::fs::read_to_string(path)?;
    parse_manifest(&text, path)
}

fn parse_manifest(text: &str, path: &Path) -> Result<Partition> {
    let mut offset = 0usize;
    let mut lines = text.split_inclusive('\n').map(|l| {
        let start = offset;
        offset += l.len();
        (start, l.trim_end_matches(['\n', '\r']))
    });
    let bad = |at: usize, reason: &str| Error::Parse {
        path: path.to_path_buf(),
        offset: at as u64,
        reason: reason.to_string(),
    };
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| bad(text.len(), &format!("missing {what}")))
    };
    let (at, header) = next("header")?;
    if header != MANIFEST_HEADER {
        return Err(bad(at, "unrecognised manifest header"));
    }
    let (at, l) = next("scheme line")?;
    let scheme = l
        .strip_prefix("scheme ")
        .and_then(PartitionScheme::parse)
        .ok_or_else(|| bad(at, "expected `scheme <iid|noniid N|unbalanced>`"))?;
    let mut number = |key: &str| -> Result<usize> {
        let (at, l) = next(key)?;
        l.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .and_then(|r| r.parse().ok())
            .ok_or_else(|| bad(at, &format!("expected `{key} <count>`")))
    };
    let samples = number("samples")?;
    let dropped = number("dropped")?;
    let mut shards = Vec::new();
    for (at, l) in lines {
        if l.is_empty() {
            continue;
        }
        let rest = l
            .strip_prefix(&format!("client {}:", shards.len()))
            .ok_or_else(|| bad(at, &format!("expected `client {}:`", shards.len())))?;
        let shard = rest
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad(at, "malformed index"))?;
        shards.push(shard);
    }
    let p = Partition {
        shards,
        scheme,
        samples,
        dropped,
    };
    p.validate()?;
    Ok(p)
}

fn require_clients(m: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::Config("number of clients M must be positive".into()));
    }
    Ok(())
}

fn shuffled_classes(ds: &Dataset, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut classes = ds.class_indices();
    for c in classes.iter_mut() {
        c.shuffle(rng);
    }
    classes
}

fn finish(ds: &Dataset, mut shards: Vec<Vec<usize>>, scheme: PartitionScheme) -> Partition {
    for s in shards.iter_mut() {
        s.sort_unstable();
    }
    let assigned: usize = shards.iter().map(Vec::len).sum();
    let dropped = ds.len() - assigned;
    if dropped > 0 {
        log::info!(
            "{} partition drops {dropped} of {} samples",
            scheme.tag(),
            ds.len()
        );
    }
    Partition {
        shards,
        scheme,
        samples: ds.len(),
        dropped,
    }
}

/// Every client receives `⌊count_c / M⌋` randomly chosen samples of each
/// class `c`. At most `M − 1` samples per class are dropped.
pub fn partition_iid(ds: &Dataset, m: usize, seed: u64) -> Result<Partition> {
    require_clients(m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shards = vec![Vec::new(); m];
    for members in shuffled_classes(ds, &mut rng) {
        let q = members.len() / m;
        for (i, shard) in shards.iter_mut().enumerate() {
            shard.extend_from_slice(&members[i * q..(i + 1) * q]);
        }
    }
    Ok(finish(ds, shards, PartitionScheme::Iid))
}

/// Splits every class into `M·N_c/C` equally sized subdatasets and deals
/// `N_c` of them to each client, using every subdataset exactly once.
///
/// The subdataset size is the same for all classes (set by the smallest
/// class), so all shards have equal size and at most `N_c` labels.
pub fn partition_noniid(
    ds: &Dataset,
    m: usize,
    classes_per_client: usize,
    seed: u64,
) -> Result<Partition> {
    require_clients(m)?;
    let c = ds.num_classes;
    if classes_per_client == 0 || classes_per_client > c {
        return Err(Error::Config(format!(
            "classes per client N_c = {classes_per_client} must lie in [1, {c}]"
        )));
    }
    if (m * classes_per_client) % c != 0 {
        return Err(Error::Config(format!(
            "M·N_c = {m}·{classes_per_client} = {} must be divisible by the number of classes {c}",
            m * classes_per_client
        )));
    }
    let per_class = m * classes_per_client / c;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = shuffled_classes(ds, &mut rng);
    let size = classes
        .iter()
        .map(|v| v.len() / per_class)
        .min()
        .unwrap_or(0);
    if size == 0 {
        return Err(Error::Config(format!(
            "a class has fewer than M·N_c/C = {per_class} samples"
        )));
    }
    let mut pieces: Vec<&[usize]> = classes
        .iter()
        .flat_map(|members| (0..per_class).map(move |j| &members[j * size..(j + 1) * size]))
        .collect();
    pieces.shuffle(&mut rng);
    let shards = pieces
        .chunks(classes_per_client)
        .map(|group| group.concat())
        .collect();
    Ok(finish(
        ds,
        shards,
        PartitionScheme::NonIid { classes_per_client },
    ))
}

/// The 40/40/20 unbalanced split over `M` clients (`M` divisible by 5).
///
/// With `u_c = ⌊count_c / 2M⌋`, each client of the first fifth receives
/// `4·u_c` samples of class `c`, each of the next two fifths `2·u_c`, and
/// each of the last two fifths `u_c`. Fewer than `2M` samples per class are
/// dropped.
pub fn partition_unbalanced(ds: &Dataset, m: usize, seed: u64) -> Result<Partition> {
    require_clients(m)?;
    if m % 5 != 0 {
        return Err(Error::Config(format!(
            "unbalanced split needs M divisible by 5 (20%/40%/40% of clients), got {m}"
        )));
    }
    let weight = |i: usize| match i {
        i if i < m / 5 => 4,
        i if i < 3 * m / 5 => 2,
        _ => 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shards = vec![Vec::new(); m];
    for members in shuffled_classes(ds, &mut rng) {
        let u = members.len() / (2 * m);
        let mut at = 0;
        for (i, shard) in shards.iter_mut().enumerate() {
            let n = weight(i) * u;
            shard.extend_from_slice(&members[at..at + n]);
            at += n;
        }
    }
    Ok(finish(ds, shards, PartitionScheme::Unbalanced))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_gaussian;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn labelled(counts: &[usize]) -> Dataset {
        let labels: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat(c).take(n))
            .collect();
        Dataset::new(
            Array2::zeros((labels.len(), 1)),
            vec![1],
            labels,
            counts.len(),
        )
        .unwrap()
    }

    fn distinct_labels(ds: &Dataset, shard: &[usize]) -> usize {
        let mut seen = vec![false; ds.num_classes];
        for &i in shard {
            seen[ds.labels[i]] = true;
        }
        seen.iter().filter(|&&s| s).count()
    }

    #[test]
    fn iid_gives_equal_class_counts() {
        let ds = labelled(&[103, 100, 99]);
        let p = partition_iid(&ds, 10, 0).unwrap();
        p.validate().unwrap();
        assert_eq!(p.dropped, 3 + 9);
        for shard in &p.shards {
            let mut counts = [0; 3];
            for &i in shard {
                counts[ds.labels[i]] += 1;
            }
            assert_eq!(counts, [10, 10, 9]);
        }
    }

    #[test]
    fn noniid_caps_labels_per_shard() {
        let ds = labelled(&[600; 10]);
        let p = partition_noniid(&ds, 10, 3, 7).unwrap();
        p.validate().unwrap();
        assert_eq!(p.dropped, 0);
        assert!(p.shard_sizes().iter().all(|&s| s == 600));
        for shard in &p.shards {
            assert!(distinct_labels(&ds, shard) <= 3);
        }
    }

    #[test]
    fn noniid_without_binding_cap_covers_every_class_once() {
        let ds = labelled(&[600; 10]);
        let p = partition_noniid(&ds, 10, 10, 7).unwrap();
        assert!(p.shard_sizes().iter().all(|&s| s == 600));
        // Each class is cut into 10 pieces of 60; a client holds 10 pieces.
        let total_pieces: usize = p.shards.iter().map(|s| s.len() / 60).sum();
        assert_eq!(total_pieces, 100);
    }

    #[test]
    fn noniid_rejects_indivisible_config() {
        let ds = labelled(&[60; 10]);
        match partition_noniid(&ds, 7, 3, 0) {
            Err(Error::Config(msg)) => assert!(msg.contains("divisible")),
            other => panic!("{other:?}"),
        }
        assert!(partition_noniid(&ds, 10, 11, 0).is_err());
    }

    #[test]
    fn unbalanced_full_mnist_sizes() {
        let ds = labelled(&[6000; 10]);
        let p = partition_unbalanced(&ds, 100, 3).unwrap();
        p.validate().unwrap();
        let sizes = p.shard_sizes();
        assert!(sizes[..20].iter().all(|&s| s == 1200));
        assert!(sizes[20..60].iter().all(|&s| s == 600));
        assert!(sizes[60..].iter().all(|&s| s == 300));
        assert_eq!(sizes.iter().sum::<usize>(), 60000);
        assert_eq!(p.virtual_m(0).unwrap(), 50.0);
        assert_eq!(p.virtual_m(99).unwrap(), 200.0);
        for shard in &p.shards {
            let mut counts = [0; 10];
            for &i in shard {
                counts[ds.labels[i]] += 1;
            }
            assert!(counts.iter().all(|&c| c == counts[0]));
        }
    }

    #[test]
    fn unbalanced_requires_multiple_of_five() {
        assert!(partition_unbalanced(&labelled(&[100; 2]), 12, 0).is_err());
    }

    #[test]
    fn manifest_roundtrip_and_errors() {
        let ds = synth_gaussian(3, 40, 2, 1).unwrap();
        let p = partition_noniid(&ds, 6, 2, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        p.write_manifest(&path).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), p);
        let text = p.to_manifest().replacen("client 1:", "client 9:", 1);
        let at = text.find("client 9:").unwrap() as u64;
        assert!(
            matches!(parse_manifest(&text, &path), Err(Error::Parse { offset, .. }) if offset == at)
        );
        let dup = p.to_manifest().replacen("dropped 0", "dropped 1", 1);
        assert!(matches!(
            parse_manifest(&dup, &path),
            Err(Error::Assertion(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn every_scheme_is_disjoint_and_covering(
            counts in prop::collection::vec(20usize..80, 2..6),
            m5 in 1usize..4,
            seed in any::<u64>(),
        ) {
            let ds = labelled(&counts);
            let m = 5 * m5;
            let c = counts.len();
            let mut parts = vec![partition_iid(&ds, m, seed).unwrap(), partition_unbalanced(&ds, m, seed).unwrap()];
            for n_c in 1..=c {
                if (m * n_c) % c == 0 && counts.iter().all(|&k| k >= m * n_c / c) {
                    let p = partition_noniid(&ds, m, n_c, seed).unwrap();
                    for shard in &p.shards {
                        prop_assert!(distinct_labels(&ds, shard) <= n_c);
                    }
                    let sizes = p.shard_sizes();
                    prop_assert!(sizes.iter().all(|&s| s == sizes[0]));
                    parts.push(p);
                }
            }
            for p in &parts {
                p.validate().unwrap();
                prop_assert_eq!(p.num_clients(), m);
            }
            prop_assert_eq!(&partition_iid(&ds, m, seed).unwrap(), &parts[0]);
            prop_assert_eq!(&partition_unbalanced(&ds, m, seed).unwrap(), &parts[1]);
        }
    }
}
