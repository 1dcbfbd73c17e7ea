//! Line-delimited JSON dataset files.
//!
//! One graph per line:
//!
//! ```text
//! {"split":"train","id":"g0","x":[[...]],"a":[[...]],"y":1,"q":2,"shift":"size"}
//! ```
//!
//! `y` is an integer for graph tasks and an array for node tasks; node-task
//! lines also carry `mask_role` and `mask` (node indices of the split).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetSplits, Graph, Labels, ShiftKind, SplitRole};
use crate::autodiff::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum LabelField {
    Graph(usize),
    Nodes(Vec<usize>),
}

#[derive(Debug, Serialize, Deserialize)]
struct Line {
    split: String,
    id: String,
    x: Vec<Vec<f64>>,
    a: Vec<Vec<f64>>,
    y: LabelField,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask_role: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<Vec<usize>>,
    q: usize,
    shift: ShiftKind,
}

pub fn write_dataset<W: Write>(splits: &DatasetSplits, mut out: W) -> Result<()> {
    for role in SplitRole::ALL {
        for g in splits.split(role) {
            let line = Line {
                split: role.as_str().to_string(),
                id: g.id.clone(),
                x: g.x.to_rows(),
                a: g.adj.to_rows(),
                y: match &g.labels {
                    Labels::Graph(y) => LabelField::Graph(*y),
                    Labels::Nodes(y) => LabelField::Nodes(y.clone()),
                },
                mask_role: g.mask.as_ref().map(|_| role.as_str().to_string()),
                mask: g.mask.clone(),
                q: splits.num_classes,
                shift: splits.shift,
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn save_dataset(splits: &DatasetSplits, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path)?;
    write_dataset(splits, BufWriter::new(file))
}

pub fn read_dataset<R: Read>(input: R) -> Result<DatasetSplits> {
    let reader = BufReader::new(input);
    let mut splits: Option<DatasetSplits> = None;
    let mut dim: Option<usize> = None;

    for (i, raw) in reader.lines().enumerate() {
        let line_no = i + 1;
        let raw = raw?;
        if raw.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Data { line: line_no, msg };
        let line: Line = serde_json::from_str(&raw).map_err(|e| err(e.to_string()))?;
        let role = SplitRole::parse(&line.split).ok_or_else(|| err(format!("unknown split `{}`", line.split)))?;
        let x = Matrix::from_rows(&line.x).map_err(|e| err(e.to_string()))?;
        let adj = Matrix::from_rows(&line.a).map_err(|e| err(e.to_string()))?;
        let labels = match line.y {
            LabelField::Graph(y) => Labels::Graph(y),
            LabelField::Nodes(y) => Labels::Nodes(y),
        };
        let mut graph = Graph::new(line.id, x, adj, labels).map_err(|e| err(e.to_string()))?;
        graph.mask = line.mask;
        graph.validate().map_err(|e| err(e.to_string()))?;

        match dim {
            None => dim = Some(graph.feature_dim()),
            Some(d) if d != graph.feature_dim() => {
                return Err(err(format!(
                    "feature dimension {} differs from {d} on earlier lines",
                    graph.feature_dim()
                )))
            }
            Some(_) => {}
        }
        let task = graph.task();
        let s = splits.get_or_insert_with(|| DatasetSplits {
            train: Vec::new(),
            id_val: Vec::new(),
            id_test: Vec::new(),
            ood_test: Vec::new(),
            shift: line.shift,
            num_classes: line.q,
            task,
        });
        if s.num_classes != line.q || s.shift != line.shift || s.task != task {
            return Err(err("class count, shift or task differs from earlier lines".into()));
        }
        s.split_mut(role).push(graph);
    }
    let splits = splits.ok_or_else(|| Error::input("no graphs"))?;
    splits.validate()?;
    Ok(splits)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<DatasetSplits> {
    read_dataset(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_has_no_graphs() {
        let err = read_dataset(&b""[..]).unwrap_err();
        assert!(err.to_string().contains("no graphs"));
    }

    #[test]
    fn malformed_line_is_reported_with_number() {
        let text = concat!(
            r#"{"split":"train","id":"a","x":[[1.0,2.0]],"a":[[0.0]],"y":0,"q":2,"shift":"none"}"#,
            "\n",
            "{not json}\n"
        );
        match read_dataset(text.as_bytes()) {
            Err(Error::Data { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inconsistent_dimension_is_rejected() {
        let text = concat!(
            r#"{"split":"train","id":"a","x":[[1.0,2.0]],"a":[[0.0]],"y":0,"q":2,"shift":"none"}"#,
            "\n",
            r#"{"split":"train","id":"b","x":[[1.0,2.0,3.0]],"a":[[0.0]],"y":1,"q":2,"shift":"none"}"#,
            "\n",
        );
        match read_dataset(text.as_bytes()) {
            Err(Error::Data { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("dimension"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn field_names_are_stable() {
        let text = r#"{"split":"ood_test","id":"n","x":[[0.5,1.0],[0.25,0.0]],"a":[[0.0,1.0],[1.0,0.0]],"y":[0,1],"mask_role":"ood_test","mask":[1],"q":2,"shift":"covariate"}"#;
        let s = read_dataset(text.as_bytes()).unwrap();
        assert_eq!(s.ood_test[0].mask.as_deref(), Some(&[1usize][..]));
        let mut out = Vec::new();
        write_dataset(&s, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().trim_end(), text);
    }
}
