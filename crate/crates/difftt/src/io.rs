//! Cascade and graph text files.
//!
//! Cascade file: one cascade per line, `<id>\t<user>,<time> <user>,<time> ...`.
//! Graph file: one edge per line, `<user> <user>`. Blank lines and lines
//! starting with `#` are ignored in both.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use difftt_core::data::{Cascade, Dataset, Event, SocialGraph};

use crate::error::{Error, Result};

/// A parsed but not yet re-indexed cascade line.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCascade {
    pub id: String,
    pub events: Vec<(u64, f64)>,
    pub line: usize,
}

/// Counts of lenient fixes applied while loading.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    pub dropped_duplicates: usize,
    pub truncated_events: usize,
    /// Users that only appear in the graph.
    pub graph_only_users: usize,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
}

pub fn parse_cascades(text: &str, path: &Path) -> Result<Vec<RawCascade>> {
    let err = |line, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut out = Vec::new();
    let mut ids = BTreeSet::new();
    for (n, line) in content_lines(text) {
        let (id, rest) = line
            .split_once('\t')
            .ok_or_else(|| err(n, "expected `<id>\\t<events>`".into()))?;
        let id = id.trim();
        if id.is_empty() {
            return Err(err(n, "empty cascade id".into()));
        }
        if !ids.insert(id.to_string()) {
            return Err(err(n, format!("duplicate cascade id `{id}`")));
        }
        let mut events = Vec::new();
        for tok in rest.split_whitespace() {
            let (u, t) = tok
                .split_once(',')
                .ok_or_else(|| err(n, format!("event `{tok}` is not `<user>,<time>`")))?;
            let user: u64 = u.parse().map_err(|_| err(n, format!("bad user id `{u}`")))?;
            let time: f64 = t.parse().map_err(|_| err(n, format!("bad timestamp `{t}`")))?;
            if !(time.is_finite() && time >= 0.0) {
                return Err(err(n, format!("timestamp `{t}` must be finite and non-negative")));
            }
            events.push((user, time));
        }
        if events.is_empty() {
            return Err(err(n, format!("cascade `{id}` has no events")));
        }
        if let Some(i) = events.windows(2).position(|w| w[1].1 < w[0].1) {
            return Err(err(n, format!("non-monotone timestamps at event {}", i + 1)));
        }
        out.push(RawCascade {
            id: id.to_string(),
            events,
            line: n,
        });
    }
    Ok(out)
}

pub fn parse_graph(text: &str, path: &Path) -> Result<Vec<(u64, u64)>> {
    let mut out = Vec::new();
    for (n, line) in content_lines(text) {
        let mut it = line.split_whitespace();
        let parsed = match (it.next(), it.next(), it.next()) {
            (Some(a), Some(b), None) => a.parse::<u64>().ok().zip(b.parse::<u64>().ok()),
            _ => None,
        };
        let edge = parsed.ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: n,
            msg: format!("expected `<user> <user>`, got `{line}`"),
        })?;
        out.push(edge);
    }
    Ok(out)
}

/// Builds a dataset with users densely re-indexed in ascending raw-id order.
pub fn assemble(
    raw: &[RawCascade],
    edges: &[(u64, u64)],
    directed: bool,
    cascade_path: &Path,
) -> Result<(Dataset, LoadReport)> {
    let mut labels = BTreeSet::new();
    for c in raw {
        labels.extend(c.events.iter().map(|e| e.0));
    }
    let in_cascades = labels.len();
    for &(a, b) in edges {
        labels.insert(a);
        labels.insert(b);
    }
    let labels: Vec<u64> = labels.into_iter().collect();
    let index = |u: u64| labels.binary_search(&u).expect("label collected above");
    let mut report = LoadReport {
        graph_only_users: labels.len() - in_cascades,
        ..LoadReport::default()
    };
    let mut cascades = Vec::with_capacity(raw.len());
    for c in raw {
        let events: Vec<Event> = c
            .events
            .iter()
            .map(|&(u, t)| Event { user: index(u), time: t })
            .collect();
        let (cascade, clean) = Cascade::from_raw(c.id.clone(), &events).map_err(|e| Error::Parse {
            path: cascade_path.to_path_buf(),
            line: c.line,
            msg: e.to_string(),
        })?;
        if !clean.dropped_duplicates.is_empty() {
            log::warn!(
                "{}:{}: dropped {} repeated user(s) in cascade {}",
                cascade_path.display(),
                c.line,
                clean.dropped_duplicates.len(),
                c.id
            );
        }
        report.dropped_duplicates += clean.dropped_duplicates.len();
        report.truncated_events += clean.truncated;
        cascades.push(cascade);
    }
    let dense: Vec<(usize, usize)> = edges.iter().map(|&(a, b)| (index(a), index(b))).collect();
    let graph = SocialGraph::new(labels.len(), &dense, directed)?;
    Ok((
        Dataset {
            graph,
            cascades,
            user_labels: labels,
        },
        report,
    ))
}

pub fn load_dataset(cascade_path: &Path, graph_path: &Path, directed: bool) -> Result<(Dataset, LoadReport)> {
    let raw = parse_cascades(&read(cascade_path)?, cascade_path)?;
    let edges = parse_graph(&read(graph_path)?, graph_path)?;
    assemble(&raw, &edges, directed, cascade_path)
}

pub const CASCADE_FILE: &str = "cascades.txt";
pub const GRAPH_FILE: &str = "graph.txt";

/// Loads `cascades.txt` and `graph.txt` from a directory.
pub fn load_dataset_dir(dir: &Path, directed: bool) -> Result<(Dataset, LoadReport)> {
    load_dataset(&dir.join(CASCADE_FILE), &dir.join(GRAPH_FILE), directed)
}

pub fn format_cascades(ds: &Dataset) -> String {
    let mut s = String::new();
    for c in &ds.cascades {
        s.push_str(c.id());
        s.push('\t');
        for (i, e) in c.events().iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            write!(s, "{},{:?}", ds.user_labels[e.user], e.time).expect("write to string");
        }
        s.push('\n');
    }
    s
}

pub fn format_graph(ds: &Dataset) -> String {
    let mut s = String::new();
    for &(a, b) in ds.graph.edges() {
        writeln!(s, "{} {}", ds.user_labels[a], ds.user_labels[b]).expect("write to string");
    }
    s
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    write_bytes(path, contents.as_bytes())
}

/// Writes a file, creating missing parent directories.
pub fn write_bytes(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn write_dataset(ds: &Dataset, cascade_path: &Path, graph_path: &Path) -> Result<()> {
    write_file(cascade_path, &format_cascades(ds))?;
    write_file(graph_path, &format_graph(ds))
}

pub fn write_dataset_dir(ds: &Dataset, dir: &Path) -> Result<()> {
    write_dataset(ds, &dir.join(CASCADE_FILE), &dir.join(GRAPH_FILE))
}
