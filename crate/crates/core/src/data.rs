//! Item catalog, sessions, count vectors and CSV ingestion.
//!
//! Session files are CSV with rows `session_id,order_key,item_id`. A header
//! row is optional and detected by a non-numeric `order_key` or `item_id`
//! in the first record.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemCatalog {
    num_items: usize,
    labels: Option<Vec<String>>,
}

impl ItemCatalog {
    pub fn new(num_items: usize) -> Result<Self> {
        if num_items == 0 {
            return Err(Error::arg("catalog must contain at least one item"));
        }
        Ok(Self {
            num_items,
            labels: None,
        })
    }

    pub fn with_labels(labels: Vec<String>) -> Result<Self> {
        let mut catalog = Self::new(labels.len())?;
        catalog.labels = Some(labels);
        Ok(catalog)
    }

    /// Attaches labels; their count must equal the catalog size.
    pub fn set_labels(&mut self, labels: Vec<String>) -> Result<()> {
        if labels.len() != self.num_items {
            return Err(Error::arg(format!(
                "{} labels supplied for {} items",
                labels.len(),
                self.num_items
            )));
        }
        self.labels = Some(labels);
        Ok(())
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    /// Label of `item`, falling back to its numeric id.
    pub fn label(&self, item: usize) -> String {
        match &self.labels {
            Some(labels) if item < labels.len() => labels[item].clone(),
            _ => item.to_string(),
        }
    }

    pub fn check(&self, item: usize) -> Result<()> {
        if item >= self.num_items {
            return Err(Error::Bounds {
                item,
                num_items: self.num_items,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub id: String,
    pub views: Vec<usize>,
}

impl Session {
    pub fn new(id: impl Into<String>, views: Vec<usize>) -> Self {
        Self {
            id: id.into(),
            views,
        }
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn last(&self) -> Option<usize> {
        self.views.last().copied()
    }

    /// Leave-last-out view: all views but the final one, and the final one.
    pub fn split_last(&self) -> Option<(&[usize], usize)> {
        self.views
            .split_last()
            .map(|(last, history)| (history, *last))
    }
}

/// Per-item view counts of one session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountVector {
    counts: Vec<u32>,
}

impl CountVector {
    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Session length, i.e. the sum of all counts.
    pub fn total(&self) -> u32 {
        self.counts.iter().sum()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| f64::from(c)).collect()
    }
}

/// Counts how often each of the `num_items` items occurs in `views`.
pub fn to_counts(views: &[usize], num_items: usize) -> Result<CountVector> {
    let mut counts = vec![0u32; num_items];
    for &v in views {
        if v >= num_items {
            return Err(Error::Bounds { item: v, num_items });
        }
        counts[v] += 1;
    }
    Ok(CountVector { counts })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionSet {
    sessions: Vec<Session>,
    catalog: ItemCatalog,
}

impl SessionSet {
    pub fn new(sessions: Vec<Session>, catalog: ItemCatalog) -> Result<Self> {
        let mut seen = HashSet::with_capacity(sessions.len());
        for s in &sessions {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::arg(format!("duplicate session id {:?}", s.id)));
            }
            for &v in &s.views {
                catalog.check(v)?;
            }
        }
        Ok(Self { sessions, catalog })
    }

    pub fn sessions(&self) -> &[Session] {
        &self.sessions
    }

    pub fn catalog(&self) -> &ItemCatalog {
        &self.catalog
    }

    pub fn catalog_mut(&mut self) -> &mut ItemCatalog {
        &mut self.catalog
    }

    pub fn num_items(&self) -> usize {
        self.catalog.num_items()
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn num_events(&self) -> usize {
        self.sessions.iter().map(Session::len).sum()
    }

    /// Total views of every item across all sessions.
    pub fn item_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_items()];
        for s in &self.sessions {
            for &v in &s.views {
                counts[v] += 1;
            }
        }
        counts
    }

    /// Keeps the `keep` most viewed items, re-indexed densely by descending
    /// popularity (ties by ascending old id). Views of dropped items are
    /// removed, and sessions left empty are dropped.
    pub fn filter_top_items(&self, keep: usize) -> Result<SessionSet> {
        if keep == 0 {
            return Err(Error::arg("must keep at least one item"));
        }
        let counts = self.item_counts();
        let mut order: Vec<usize> = (0..counts.len()).collect();
        order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
        order.truncate(keep.min(counts.len()));

        let mut remap = vec![None; counts.len()];
        for (new_id, &old_id) in order.iter().enumerate() {
            remap[old_id] = Some(new_id);
        }

        let sessions = self
            .sessions
            .iter()
            .filter_map(|s| {
                let views: Vec<usize> = s.views.iter().filter_map(|&v| remap[v]).collect();
                (!views.is_empty()).then(|| Session::new(s.id.clone(), views))
            })
            .collect();

        let mut catalog = ItemCatalog::new(order.len())?;
        if let Some(labels) = self.catalog.labels() {
            catalog.set_labels(order.iter().map(|&o| labels[o].clone()).collect())?;
        }
        SessionSet::new(sessions, catalog)
    }
}

fn looks_like_header(record: &csv::StringRecord) -> bool {
    record.len() >= 3
        && (record[1].trim().parse::<i64>().is_err() || record[2].trim().parse::<u64>().is_err())
}

/// Reads a session CSV from any reader. `num_items` fixes the catalog size;
/// when absent it is inferred as the largest item id plus one.
pub fn read_sessions<R: Read>(reader: R, num_items: Option<usize>) -> Result<SessionSet> {
    let mut csv_reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(i64, usize)>> = HashMap::new();
    let mut max_item: Option<usize> = None;

    for (idx, record) in csv_reader.records().enumerate() {
        let line = idx + 1;
        let record = record.map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        if idx == 0 && looks_like_header(&record) {
            continue;
        }
        if record.len() != 3 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 3 fields, found {}", record.len()),
            });
        }
        let order_key: i64 = record[1].parse().map_err(|_| Error::Parse {
            line,
            msg: format!("order key {:?} is not an integer", &record[1]),
        })?;
        let item: usize = record[2].parse().map_err(|_| Error::Parse {
            line,
            msg: format!("item id {:?} is not a non-negative integer", &record[2]),
        })?;
        if let Some(p) = num_items {
            if item >= p {
                return Err(Error::Bounds { item, num_items: p });
            }
        }
        max_item = Some(max_item.map_or(item, |m| m.max(item)));

        let id = record[0].to_string();
        rows.entry(id.clone())
            .or_insert_with(|| {
                order.push(id);
                Vec::new()
            })
            .push((order_key, item));
    }

    let p = match (num_items, max_item) {
        (Some(p), _) => p,
        (None, Some(m)) => m + 1,
        (None, None) => {
            return Err(Error::arg(
                "cannot infer the number of items from an empty session file",
            ))
        }
    };

    let sessions = order
        .into_iter()
        .map(|id| {
            let mut events = rows.remove(&id).unwrap_or_default();
            events.sort_by_key(|&(key, _)| key);
            Session::new(id, events.into_iter().map(|(_, item)| item).collect())
        })
        .collect();

    SessionSet::new(sessions, ItemCatalog::new(p)?)
}

pub fn load_sessions(path: impl AsRef<Path>, num_items: Option<usize>) -> Result<SessionSet> {
    let file = File::open(path)?;
    read_sessions(BufReader::new(file), num_items)
}

/// Writes sessions as CSV with a header; order keys are view positions.
pub fn write_sessions<W: Write>(data: &SessionSet, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["session_id", "order_key", "item_id"])?;
    for s in data.sessions() {
        for (t, v) in s.views.iter().enumerate() {
            w.write_record([s.id.as_str(), &t.to_string(), &v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_sessions(data: &SessionSet, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path)?;
    write_sessions(data, std::io::BufWriter::new(file))
}

/// Reads one label per line; line `i` names item `i`.
pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let file = File::open(path)?;
    let mut labels = Vec::new();
    for line in BufReader::new(file).lines() {
        labels.push(line?.trim_end().to_string());
    }
    while labels.last().is_some_and(|l| l.is_empty()) {
        labels.pop();
    }
    Ok(labels)
}

/// Partitions sessions into (train, test). Whole sessions go to one side;
/// the test side receives `round(n * test_fraction)` sessions, clamped so
/// neither side is empty.
pub fn split_by_session(
    data: &SessionSet,
    test_fraction: f64,
    seed: u64,
) -> Result<(SessionSet, SessionSet)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::arg(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n = data.len();
    if n < 2 {
        return Err(Error::arg("need at least two sessions to split"));
    }
    let num_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);

    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let mut test_idx = idx[..num_test].to_vec();
    let mut train_idx = idx[num_test..].to_vec();
    test_idx.sort_unstable();
    train_idx.sort_unstable();

    let pick = |ids: &[usize]| -> Vec<Session> {
        ids.iter().map(|&i| data.sessions[i].clone()).collect()
    };
    Ok((
        SessionSet::new(pick(&train_idx), data.catalog.clone())?,
        SessionSet::new(pick(&test_idx), data.catalog.clone())?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, p: Option<usize>) -> Result<SessionSet> {
        read_sessions(text.as_bytes(), p)
    }

    #[test]
    fn groups_rows_by_session() {
        let set = parse("s1,1,0\ns1,2,2\ns2,1,1\n", None).unwrap();
        assert_eq!(set.num_items(), 3);
        assert_eq!(set.sessions()[0], Session::new("s1", vec![0, 2]));
        assert_eq!(set.sessions()[1], Session::new("s2", vec![1]));
    }

    #[test]
    fn sorts_views_by_order_key() {
        let set = parse("s1,2,2\ns1,1,0\n", None).unwrap();
        assert_eq!(set.sessions()[0].views, vec![0, 2]);
    }

    #[test]
    fn detects_header() {
        let set = parse("session_id,order_key,item_id\ns1,1,4\n", None).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.num_items(), 5);
    }

    #[test]
    fn empty_file_needs_explicit_catalog() {
        assert!(parse("", None).is_err());
        let set = parse("", Some(4)).unwrap();
        assert!(set.is_empty());
        assert_eq!(set.num_items(), 4);
    }

    #[test]
    fn malformed_row_reports_line() {
        match parse("s1,1,0\ns1,x,1\n", None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        match parse("s1,1,0\ns1,2,-1\n", None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn item_beyond_catalog_is_bounds_error() {
        assert!(matches!(
            parse("s1,1,3\n", Some(3)),
            Err(Error::Bounds { item: 3, num_items: 3 })
        ));
    }

    #[test]
    fn explicit_catalog_admits_unseen_items() {
        let set = parse("s1,1,0\n", Some(10)).unwrap();
        assert_eq!(set.num_items(), 10);
    }

    #[test]
    fn counts_views() {
        assert_eq!(to_counts(&[0, 0, 2], 3).unwrap().counts(), &[2, 0, 1]);
        assert_eq!(to_counts(&[1], 4).unwrap().counts(), &[0, 1, 0, 0]);
        let empty = to_counts(&[], 2).unwrap();
        assert_eq!(empty.counts(), &[0, 0]);
        assert_eq!(empty.total(), 0);
        assert!(matches!(to_counts(&[2], 2), Err(Error::Bounds { .. })));
    }

    fn numbered(n: usize) -> SessionSet {
        let sessions = (0..n)
            .map(|i| Session::new(format!("s{i}"), vec![i % 3]))
            .collect();
        SessionSet::new(sessions, ItemCatalog::new(3).unwrap()).unwrap()
    }

    #[test]
    fn split_cardinality_and_disjointness() {
        let data = numbered(10);
        let (train, test) = split_by_session(&data, 0.3, 7).unwrap();
        assert_eq!(train.len(), 7);
        assert_eq!(test.len(), 3);
        let train_ids: HashSet<_> = train.sessions().iter().map(|s| &s.id).collect();
        assert!(test.sessions().iter().all(|s| !train_ids.contains(&s.id)));

        let (train2, test2) = split_by_session(&data, 0.3, 7).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);
    }

    #[test]
    fn split_smallest_case() {
        let (train, test) = split_by_session(&numbered(2), 0.5, 0).unwrap();
        assert_eq!((train.len(), test.len()), (1, 1));
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let data = numbered(4);
        assert!(split_by_session(&data, 0.0, 0).is_err());
        assert!(split_by_session(&data, 1.0, 0).is_err());
        assert!(split_by_session(&numbered(1), 0.5, 0).is_err());
    }

    #[test]
    fn rejects_duplicate_session_ids() {
        let sessions = vec![Session::new("a", vec![0]), Session::new("a", vec![0])];
        assert!(SessionSet::new(sessions, ItemCatalog::new(1).unwrap()).is_err());
    }

    #[test]
    fn filter_reindexes_by_popularity() {
        let sessions = vec![
            Session::new("a", vec![2, 2, 0]),
            Session::new("b", vec![1]),
            Session::new("c", vec![2, 1]),
        ];
        let mut catalog = ItemCatalog::new(3).unwrap();
        catalog
            .set_labels(vec!["x".into(), "y".into(), "z".into()])
            .unwrap();
        let data = SessionSet::new(sessions, catalog).unwrap();
        let top = data.filter_top_items(2).unwrap();
        // item 2 (3 views) -> 0, item 1 (2 views) -> 1, item 0 dropped
        assert_eq!(top.num_items(), 2);
        assert_eq!(top.sessions()[0].views, vec![0, 0]);
        assert_eq!(top.sessions()[1].views, vec![1]);
        assert_eq!(top.sessions()[2].views, vec![0, 1]);
        assert_eq!(top.catalog().labels().unwrap(), &["z", "y"]);
    }

    #[test]
    fn write_then_read_round_trips() {
        let data = parse("s1,5,0\ns1,9,2\ns2,1,1\n", None).unwrap();
        let mut buf = Vec::new();
        write_sessions(&data, &mut buf).unwrap();
        let back = parse(std::str::from_utf8(&buf).unwrap(), Some(3)).unwrap();
        assert_eq!(back, data);
    }

    proptest::proptest! {
        #[test]
        fn counts_are_permutation_invariant(mut views in proptest::collection::vec(0usize..6, 0..30), seed in 0u64..1000) {
            let before = to_counts(&views, 6).unwrap();
            views.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let after = to_counts(&views, 6).unwrap();
            proptest::prop_assert_eq!(before.total() as usize, views.len());
            proptest::prop_assert_eq!(before, after);
        }

        #[test]
        fn split_partitions_sessions(n in 2usize..40, frac in 0.05f64..0.95, seed in 0u64..100) {
            let data = numbered(n);
            let (train, test) = split_by_session(&data, frac, seed).unwrap();
            let mut ids: Vec<_> = train.sessions().iter().chain(test.sessions()).map(|s| s.id.clone()).collect();
            ids.sort();
            let mut all: Vec<_> = data.sessions().iter().map(|s| s.id.clone()).collect();
            all.sort();
            proptest::prop_assert_eq!(ids, all);
        }
    }
}
