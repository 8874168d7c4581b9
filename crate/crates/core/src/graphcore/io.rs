use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use super::GraphDataset;
use crate::diffmath::Tensor;
use crate::error::{Error, Result};

/// What was dropped while cleaning a raw edge list.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub duplicates: usize,
    pub self_loops: usize,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn read_edges(path: &Path) -> Result<Vec<(usize, usize)>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut edges = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let mut it = t.split('\t');
        let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
            return Err(parse_err(path, k + 1, format!("expected \"u<TAB>v\", got {t:?}")));
        };
        let u = a.trim().parse::<usize>().map_err(|e| parse_err(path, k + 1, e.to_string()))?;
        let v = b.trim().parse::<usize>().map_err(|e| parse_err(path, k + 1, e.to_string()))?;
        edges.push((u, v));
    }
    Ok(edges)
}

fn csv_rows(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows: Vec<(usize, Vec<String>)> = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        rows.push((line, rec.iter().map(str::to_owned).collect()));
    }
    let header = rows
        .first()
        .is_some_and(|(_, r)| r.iter().any(|f| f.parse::<f64>().is_err()));
    if header {
        rows.remove(0);
    }
    Ok(rows)
}

fn read_features(path: &Path) -> Result<Tensor> {
    let rows = csv_rows(path)?;
    let d = rows.first().map_or(0, |(_, r)| r.len());
    let mut data = Vec::with_capacity(rows.len() * d);
    for (line, r) in &rows {
        if r.len() != d {
            return Err(parse_err(path, *line, format!("{} columns, expected {d}", r.len())));
        }
        for f in r {
            let v = f.parse::<f64>().map_err(|e| parse_err(path, *line, format!("{f:?}: {e}")))?;
            data.push(v);
        }
    }
    Tensor::matrix(rows.len(), d, data)
}

fn read_labels(path: &Path, n: usize) -> Result<Vec<Option<usize>>> {
    let mut y = vec![None; n];
    for (line, r) in csv_rows(path)? {
        if r.len() != 2 {
            return Err(parse_err(path, line, "expected \"node_id,class_id\""));
        }
        let node = r[0].parse::<usize>().map_err(|e| parse_err(path, line, e.to_string()))?;
        let class = r[1].parse::<usize>().map_err(|e| parse_err(path, line, e.to_string()))?;
        if node >= n {
            return Err(Error::Consistency(format!("label for node {node} but only {n} feature rows")));
        }
        y[node] = Some(class);
    }
    Ok(y)
}

fn class_count(y: &[Option<usize>]) -> usize {
    y.iter().flatten().max().map_or(2, |m| (m + 1).max(2))
}

/// Loads a tab-separated edge list, a feature CSV and an optional label CSV.
/// Node count is the number of feature rows.
pub fn load_dataset(edges: &Path, features: &Path, labels: Option<&Path>) -> Result<(GraphDataset, LoadReport)> {
    let x = read_features(features)?;
    let n = x.rows();
    let raw = read_edges(edges)?;
    if let Some(&(u, v)) = raw.iter().find(|(u, v)| *u >= n || *v >= n) {
        return Err(Error::Consistency(format!(
            "edge {u}-{v} references a node without a feature row ({n} rows)"
        )));
    }
    let y = match labels {
        Some(p) => read_labels(p, n)?,
        None => vec![None; n],
    };
    let c = class_count(&y);
    let (g, report) = GraphDataset::from_raw_edges(x, y, c, raw)?;
    if report.duplicates + report.self_loops > 0 {
        log::info!(
            "{}: dropped {} duplicate edges and {} self-loops",
            edges.display(),
            report.duplicates,
            report.self_loops
        );
    }
    Ok((g, report))
}

/// Writes `edges.tsv`, `features.csv` and `labels.csv` into `dir`.
pub fn save_dataset(g: &GraphDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut ef = std::io::BufWriter::new(fs::File::create(dir.join("edges.tsv"))?);
    for &(u, v) in g.edges() {
        writeln!(ef, "{u}\t{v}")?;
    }
    ef.flush()?;
    let mut fw = csv::Writer::from_path(dir.join("features.csv"))?;
    for i in 0..g.n() {
        fw.write_record(g.features().row(i).iter().map(|v| format!("{v:?}")))?;
    }
    fw.flush()?;
    let mut lw = csv::Writer::from_path(dir.join("labels.csv"))?;
    lw.write_record(["node_id", "class_id"])?;
    for (i, c) in g.labels().iter().enumerate() {
        if let Some(c) = c {
            lw.write_record([i.to_string(), c.to_string()])?;
        }
    }
    lw.flush()?;
    Ok(())
}

/// Loads the `out1_node_feature_label.txt` / `out1_graph_edges.txt` pair used
/// by the WebKB and Wikipedia heterophily benchmarks.
pub fn load_geom_gcn(dir: &Path) -> Result<(GraphDataset, LoadReport)> {
    let nodes_path = dir.join("out1_node_feature_label.txt");
    let edges_path = dir.join("out1_graph_edges.txt");
    let reader = BufReader::new(fs::File::open(&nodes_path)?);
    let mut rows: Vec<(usize, Vec<f64>, usize)> = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if k == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.trim_end().split('\t').collect();
        if parts.len() != 3 {
            return Err(parse_err(&nodes_path, k + 1, "expected id<TAB>features<TAB>label"));
        }
        let id = parts[0].parse::<usize>().map_err(|e| parse_err(&nodes_path, k + 1, e.to_string()))?;
        let feats = parts[1]
            .split(',')
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(&nodes_path, k + 1, e.to_string()))?;
        let label = parts[2].parse::<usize>().map_err(|e| parse_err(&nodes_path, k + 1, e.to_string()))?;
        rows.push((id, feats, label));
    }
    rows.sort_by_key(|r| r.0);
    let n = rows.len();
    if rows.iter().enumerate().any(|(i, r)| r.0 != i) {
        return Err(Error::Consistency(format!("{}: node ids are not 0..{n}", nodes_path.display())));
    }
    let d = rows.first().map_or(0, |r| r.1.len());
    if rows.iter().any(|r| r.1.len() != d) {
        return Err(Error::Consistency("ragged feature rows".into()));
    }
    let x = Tensor::matrix(n, d, rows.iter().flat_map(|r| r.1.iter().copied()).collect())?;
    let y: Vec<Option<usize>> = rows.iter().map(|r| Some(r.2)).collect();

    let reader = BufReader::new(fs::File::open(&edges_path)?);
    let mut raw = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if k == 0 || line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace().map(str::parse::<usize>);
        match (it.next(), it.next()) {
            (Some(Ok(u)), Some(Ok(v))) if u < n && v < n => raw.push((u, v)),
            _ => return Err(parse_err(&edges_path, k + 1, format!("bad edge line {line:?}"))),
        }
    }
    let c = class_count(&y);
    GraphDataset::from_raw_edges(x, y, c, raw)
}

/// Loads a dataset directory in either the native three-file layout or the
/// two-file benchmark layout.
pub fn load_dataset_dir(dir: &Path) -> Result<(GraphDataset, LoadReport)> {
    let native: PathBuf = dir.join("edges.tsv");
    if native.exists() {
        let labels = dir.join("labels.csv");
        let labels = labels.exists().then_some(labels);
        load_dataset(&native, &dir.join("features.csv"), labels.as_deref())
    } else {
        load_geom_gcn(dir)
    }
}
