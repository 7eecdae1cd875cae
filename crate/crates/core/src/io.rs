//! Dataset files and JSON documents.
//!
//! A dataset is a node table, an edge table and a small JSON manifest:
//!
//! * `nodes.csv`: `group_id,node_id,y,<covariate>...`
//! * `edges.csv`: `group_id,src,dst,measure` with `measure` in `{1, 2}`
//! * `truth.csv` (optional): `group_id,src,dst`, the true network
//! * `dataset.json`: [`DatasetConfig`]
//!
//! Every JSON document carries a `schema_version`.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Adjacency, Dataset, GroupSample};

pub const SCHEMA_VERSION: u32 = 1;

pub const NODES_FILE: &str = "nodes.csv";
pub const EDGES_FILE: &str = "edges.csv";
pub const TRUTH_FILE: &str = "truth.csv";
pub const MANIFEST_FILE: &str = "dataset.json";

/// A JSON document body tagged with its schema version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versioned<T> {
    pub schema_version: u32,
    #[serde(flatten)]
    pub body: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Covariate whose equality defines the phi indicator.
    pub phi_column: String,
    /// One flag per measure. A symmetrized measure may list each pair once;
    /// both cells are set on load.
    pub symmetric: Vec<bool>,
    /// Edge file of the true network, relative to the manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
}

impl DatasetConfig {
    pub fn n_measures(&self) -> usize {
        self.symmetric.len()
    }
}

/// Serializes with a `schema_version` field; the output ends in a newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let doc = Versioned {
        schema_version: SCHEMA_VERSION,
        body: value,
    };
    let mut s = serde_json::to_string_pretty(&doc)?;
    s.push('\n');
    Ok(s)
}

/// Parses a document written by [`to_json`], checking its version.
pub fn from_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let mut value: serde_json::Value = serde_json::from_str(text)?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::Version("document is not a JSON object".into()))?;
    let version = obj
        .remove("schema_version")
        .ok_or_else(|| Error::Version("schema_version is missing".into()))?;
    match version.as_u64() {
        Some(v) if v == u64::from(SCHEMA_VERSION) => {}
        _ => {
            return Err(Error::Version(format!(
                "unsupported schema_version {version}; expected {SCHEMA_VERSION}"
            )))
        }
    }
    Ok(serde_json::from_value(value)?)
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json(value)?)?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| Error::File {
        path: path.display().to_string(),
        source,
    })?;
    from_json(&text)
}

pub fn save_report<T: Serialize>(path: &Path, report: &T) -> Result<()> {
    save_json(path, report)
}

pub fn load_report<T: DeserializeOwned>(path: &Path) -> Result<T> {
    load_json(path)
}

struct Table {
    path: String,
    header: Vec<String>,
    /// `(line, fields)`
    rows: Vec<(u64, Vec<String>)>,
}

fn read_table(path: &Path) -> Result<Table> {
    let shown = path.display().to_string();
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(&shown, 0, e))?;
    let header = r
        .headers()
        .map_err(|e| parse_err(&shown, 1, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(&shown, line, e)
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok(Table {
        path: shown,
        header,
        rows,
    })
}

fn parse_err(path: &str, line: u64, e: impl std::fmt::Display) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        msg: e.to_string(),
    }
}

fn expect_header(t: &Table, want: &[&str]) -> Result<()> {
    if t.header.len() < want.len() || t.header.iter().zip(want).any(|(a, b)| a != b) {
        return Err(parse_err(
            &t.path,
            1,
            format!("header must start with {}; found {}", want.join(","), t.header.join(",")),
        ));
    }
    Ok(())
}

fn parse_f64(t: &Table, line: u64, field: &str, col: &str) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|_| parse_err(&t.path, line, format!("column {col}: '{field}' is not a number")))
}

struct NodeGroup {
    id: String,
    nodes: Vec<String>,
    index: HashMap<String, usize>,
    y: Vec<f64>,
    x: Vec<Vec<f64>>,
}

type EdgeKey = (usize, usize, usize);

fn read_edges(
    path: &Path,
    groups: &[NodeGroup],
    group_index: &HashMap<String, usize>,
    with_measure: bool,
    n_measures: usize,
) -> Result<Vec<EdgeKey>> {
    let t = read_table(path)?;
    let header: &[&str] = if with_measure {
        &["group_id", "src", "dst", "measure"]
    } else {
        &["group_id", "src", "dst"]
    };
    expect_header(&t, header)?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(t.rows.len());
    for (line, row) in &t.rows {
        if row.len() != header.len() {
            return Err(parse_err(&t.path, *line, format!("expected {} fields, got {}", header.len(), row.len())));
        }
        let gi = *group_index
            .get(&row[0])
            .ok_or_else(|| Error::Integrity(format!("{} line {line}: unknown group '{}'", t.path, row[0])))?;
        let g = &groups[gi];
        let node = |name: &str| {
            g.index.get(name).copied().ok_or_else(|| {
                Error::Integrity(format!("{} line {line}: unknown node '{name}' in group '{}'", t.path, g.id))
            })
        };
        let (src, dst) = (node(&row[1])?, node(&row[2])?);
        if src == dst {
            return Err(Error::Integrity(format!("{} line {line}: self link on node '{}'", t.path, row[1])));
        }
        let measure = if with_measure {
            match row[3].parse::<usize>() {
                Ok(m) if (1..=n_measures).contains(&m) => m,
                _ => {
                    return Err(parse_err(
                        &t.path,
                        *line,
                        format!("measure '{}' is not in 1..={n_measures}", row[3]),
                    ))
                }
            }
        } else {
            0
        };
        if !seen.insert((gi, src, dst, measure)) {
            return Err(Error::Integrity(format!(
                "{} line {line}: duplicate edge {} -> {} in group '{}'",
                t.path, row[1], row[2], g.id
            )));
        }
        out.push((gi, src * g.nodes.len() + dst, measure));
    }
    Ok(out)
}

/// Reads a dataset. Nodes keep their file order within each group and
/// groups keep the order of their first node.
pub fn load_dataset(nodes_path: &Path, edges_path: &Path, config: &DatasetConfig, base: Option<&Path>) -> Result<Dataset> {
    let n_measures = config.n_measures();
    if n_measures == 0 || n_measures > 2 {
        return Err(Error::Invalid(format!("expected 1 or 2 measures, got {n_measures}")));
    }
    let t = read_table(nodes_path)?;
    expect_header(&t, &["group_id", "node_id", "y"])?;
    let covariates: Vec<String> = t.header[3..].to_vec();
    if covariates.is_empty() {
        return Err(parse_err(&t.path, 1, "no covariate columns"));
    }
    let phi_column = covariates
        .iter()
        .position(|c| *c == config.phi_column)
        .ok_or_else(|| Error::UnknownColumn(config.phi_column.clone()))?;

    let mut groups: Vec<NodeGroup> = Vec::new();
    let mut group_index: HashMap<String, usize> = HashMap::new();
    for (line, row) in &t.rows {
        if row.len() != t.header.len() {
            return Err(parse_err(&t.path, *line, format!("expected {} fields, got {}", t.header.len(), row.len())));
        }
        let gi = *group_index.entry(row[0].clone()).or_insert_with(|| {
            groups.push(NodeGroup {
                id: row[0].clone(),
                nodes: Vec::new(),
                index: HashMap::new(),
                y: Vec::new(),
                x: Vec::new(),
            });
            groups.len() - 1
        });
        let g = &mut groups[gi];
        if g.index.contains_key(&row[1]) {
            return Err(Error::Integrity(format!(
                "{} line {line}: duplicate node '{}' in group '{}'",
                t.path, row[1], row[0]
            )));
        }
        let y = parse_f64(&t, *line, &row[2], "y")?;
        let x = row[3..]
            .iter()
            .zip(&covariates)
            .map(|(f, c)| parse_f64(&t, *line, f, c))
            .collect::<Result<Vec<_>>>()?;
        g.index.insert(row[1].clone(), g.nodes.len());
        g.nodes.push(row[1].clone());
        g.y.push(y);
        g.x.push(x);
    }

    let mut cells: Vec<Vec<Vec<u8>>> = groups
        .iter()
        .map(|g| vec![vec![0u8; g.nodes.len() * g.nodes.len()]; n_measures])
        .collect();
    for (gi, cell, m) in read_edges(edges_path, &groups, &group_index, true, n_measures)? {
        let n = groups[gi].nodes.len();
        cells[gi][m - 1][cell] = 1;
        if config.symmetric[m - 1] {
            cells[gi][m - 1][(cell % n) * n + cell / n] = 1;
        }
    }
    let truth = match &config.truth {
        None => None,
        Some(p) => {
            let path = base.map_or_else(|| p.clone(), |b| b.join(p));
            let mut t: Vec<Vec<u8>> = groups.iter().map(|g| vec![0u8; g.nodes.len() * g.nodes.len()]).collect();
            for (gi, cell, _) in read_edges(&path, &groups, &group_index, false, n_measures)? {
                t[gi][cell] = 1;
            }
            Some(t)
        }
    };

    let k = covariates.len();
    let mut samples = Vec::with_capacity(groups.len());
    for (gi, g) in groups.into_iter().enumerate() {
        let n = g.nodes.len();
        let adj = |c: &[u8]| Adjacency::from_fn(n, |i, j| c[i * n + j] != 0);
        let measures = cells[gi].iter().map(|c| adj(c)).collect();
        let truth = truth.as_ref().map(|t| adj(&t[gi]));
        let x = DMatrix::from_fn(n, k, |i, j| g.x[i][j]);
        let sample = GroupSample::new(g.id, DVector::from_vec(g.y), x, measures, truth)?.with_node_ids(g.nodes)?;
        samples.push(sample);
    }
    Dataset::new(samples, covariates, phi_column, config.symmetric.clone())
}

/// Reads `nodes.csv`, `edges.csv` and `dataset.json` from a directory.
pub fn load_dataset_dir(dir: &Path) -> Result<Dataset> {
    let config: DatasetConfig = load_json(&dir.join(MANIFEST_FILE))?;
    load_dataset(&dir.join(NODES_FILE), &dir.join(EDGES_FILE), &config, Some(dir))
}

fn write_csv(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

fn edge_rows<'a>(ds: &'a Dataset, measure: Option<usize>) -> impl Iterator<Item = Vec<String>> + 'a {
    ds.groups.iter().flat_map(move |g| {
        let adj = match measure {
            Some(t) => &g.measures[t - 1],
            None => g.truth.as_ref().expect("checked by caller"),
        };
        adj.links()
            .map(|(i, j)| {
                let mut r = vec![g.group_id.clone(), g.node_ids[i].clone(), g.node_ids[j].clone()];
                if let Some(t) = measure {
                    r.push(t.to_string());
                }
                r
            })
            .collect::<Vec<_>>()
    })
}

/// Writes the dataset files into `dir`. Numbers use the shortest decimal
/// form that reads back to the same `f64`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut header: Vec<String> = vec!["group_id".into(), "node_id".into(), "y".into()];
    header.extend(ds.covariate_names.iter().cloned());
    let nodes = ds.groups.iter().flat_map(|g| {
        (0..g.n())
            .map(|i| {
                let mut r = vec![g.group_id.clone(), g.node_ids[i].clone(), g.y[i].to_string()];
                r.extend(g.x.row(i).iter().map(f64::to_string));
                r
            })
            .collect::<Vec<_>>()
    });
    write_csv(&dir.join(NODES_FILE), &header, nodes)?;

    let edge_header: Vec<String> = ["group_id", "src", "dst", "measure"].map(String::from).to_vec();
    let edges = (1..=ds.n_measures()).flat_map(|t| edge_rows(ds, Some(t)));
    write_csv(&dir.join(EDGES_FILE), &edge_header, edges)?;

    let truth = if ds.has_truth() {
        write_csv(&dir.join(TRUTH_FILE), &edge_header[..3], edge_rows(ds, None))?;
        Some(PathBuf::from(TRUTH_FILE))
    } else {
        None
    };
    let config = DatasetConfig {
        phi_column: ds.covariate_names[ds.phi_column].clone(),
        symmetric: ds.symmetrized.clone(),
        truth,
    };
    save_json(&dir.join(MANIFEST_FILE), &config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    fn cfg() -> DatasetConfig {
        DatasetConfig {
            phi_column: "x1".into(),
            symmetric: vec![false],
            truth: None,
        }
    }

    #[test]
    fn single_edge_sets_one_cell() {
        let d = tempfile::tempdir().unwrap();
        let n = write(d.path(), "n.csv", "group_id,node_id,y,x1\nv,a,1,0\nv,b,2,1\nv,c,3,1\n");
        let e = write(d.path(), "e.csv", "group_id,src,dst,measure\nv,a,b,1\n");
        let ds = load_dataset(&n, &e, &cfg(), None).unwrap();
        let h = &ds.groups[0].measures[0];
        assert_eq!(h.link_count(), 1);
        assert!(h.is_link(0, 1));
    }

    #[test]
    fn unknown_node_is_named() {
        let d = tempfile::tempdir().unwrap();
        let n = write(d.path(), "n.csv", "group_id,node_id,y,x1\nv,a,1,0\nv,b,2,1\nv,c,3,1\n");
        let e = write(d.path(), "e.csv", "group_id,src,dst,measure\nv,a,zed,1\n");
        match load_dataset(&n, &e, &cfg(), None) {
            Err(Error::Integrity(m)) => assert!(m.contains("zed"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_number_reports_line() {
        let d = tempfile::tempdir().unwrap();
        let n = write(d.path(), "n.csv", "group_id,node_id,y,x1\nv,a,1,0\nv,b,oops,1\nv,c,3,1\n");
        let e = write(d.path(), "e.csv", "group_id,src,dst,measure\n");
        assert!(matches!(load_dataset(&n, &e, &cfg(), None), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn unknown_phi_column() {
        let d = tempfile::tempdir().unwrap();
        let n = write(d.path(), "n.csv", "group_id,node_id,y,z\nv,a,1,0\nv,b,2,1\nv,c,3,1\n");
        let e = write(d.path(), "e.csv", "group_id,src,dst,measure\n");
        assert!(matches!(load_dataset(&n, &e, &cfg(), None), Err(Error::UnknownColumn(_))));
    }

    #[test]
    fn crlf_matches_lf() {
        let d = tempfile::tempdir().unwrap();
        let body = "group_id,node_id,y,x1\nv,a,1.5,0\nv,b,2,1\nv,c,3,1\n";
        let edges = "group_id,src,dst,measure\nv,a,b,1\nv,c,a,1\n";
        let n1 = write(d.path(), "n1.csv", body);
        let e1 = write(d.path(), "e1.csv", edges);
        let n2 = write(d.path(), "n2.csv", &body.replace('\n', "\r\n"));
        let e2 = write(d.path(), "e2.csv", &edges.replace('\n', "\r\n"));
        assert_eq!(
            load_dataset(&n1, &e1, &cfg(), None).unwrap(),
            load_dataset(&n2, &e2, &cfg(), None).unwrap()
        );
    }

    #[test]
    fn duplicate_edge_rejected() {
        let d = tempfile::tempdir().unwrap();
        let n = write(d.path(), "n.csv", "group_id,node_id,y,x1\nv,a,1,0\nv,b,2,1\nv,c,3,1\n");
        let e = write(d.path(), "e.csv", "group_id,src,dst,measure\nv,a,b,1\nv,a,b,1\n");
        assert!(matches!(load_dataset(&n, &e, &cfg(), None), Err(Error::Integrity(_))));
    }

    #[test]
    fn missing_version_rejected() {
        assert!(matches!(from_json::<DatasetConfig>(r#"{"phi_column":"x1","symmetric":[false]}"#), Err(Error::Version(_))));
        assert!(matches!(
            from_json::<DatasetConfig>(r#"{"schema_version":9,"phi_column":"x1","symmetric":[false]}"#),
            Err(Error::Version(_))
        ));
    }

    #[test]
    fn symmetric_measure_expanded() {
        let d = tempfile::tempdir().unwrap();
        let n = write(d.path(), "n.csv", "group_id,node_id,y,x1\nv,a,1,0\nv,b,2,1\nv,c,3,1\n");
        let e = write(d.path(), "e.csv", "group_id,src,dst,measure\nv,a,b,1\n");
        let mut c = cfg();
        c.symmetric = vec![true];
        let ds = load_dataset(&n, &e, &c, None).unwrap();
        assert!(ds.groups[0].measures[0].is_link(1, 0));
    }
}
