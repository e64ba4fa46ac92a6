//! Self-describing text format for trained models.
//!
//! ```text
//! pcbench-model 1
//! kind pointnet-mini
//! classes 8
//! knn_k 0
//! edge_widths
//! point_widths 32 64 128
//! head_widths 64
//! meta recipe plain
//! param point.0.w 3 32
//! <one line of 32 values per row>
//! ...
//! end
//! ```
//!
//! Values use 17 significant digits, so a save/load cycle is bitwise exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

use super::{Hyper, Model, ModelKind, Param};

const MAGIC: &str = "pcbench-model 1";

fn widths(w: &[usize]) -> String {
    w.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

pub fn write_model<W: Write>(model: &Model, mut w: W) -> std::io::Result<()> {
    let h = &model.hyper;
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "kind {}", h.kind.name())?;
    writeln!(w, "classes {}", h.n_classes)?;
    writeln!(w, "knn_k {}", h.knn_k)?;
    writeln!(w, "edge_widths {}", widths(&h.edge_widths))?;
    writeln!(w, "point_widths {}", widths(&h.point_widths))?;
    writeln!(w, "head_widths {}", widths(&h.head_widths))?;
    for (k, v) in &model.meta {
        writeln!(w, "meta {k} {}", v.replace('\n', " "))?;
    }
    for p in &model.params {
        let (rows, cols) = match p.tensor.shape() {
            [r, c] => (*r, *c),
            [c] => (1, *c),
            _ => (1, p.tensor.len()),
        };
        let rank = p.tensor.shape().len();
        writeln!(w, "param {} {} {} {}", p.name, rank, rows, cols)?;
        for r in 0..rows {
            let line: Vec<String> = p.tensor.data()[r * cols..(r + 1) * cols]
                .iter()
                .map(|v| format!("{v:.16e}"))
                .collect();
            writeln!(w, "{}", line.join(" "))?;
        }
    }
    writeln!(w, "end")
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_model(model, &mut buf).map_err(|e| Error::io(path, e))?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_model(BufReader::new(f), &path.display().to_string())
}

pub fn parse_model<R: BufRead>(reader: R, origin: &str) -> Result<Model> {
    let err = |line: usize, message: String| Error::Parse {
        path: origin.to_string(),
        line,
        message,
    };
    let lines: Vec<String> = reader
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(origin, e))?;
    let mut it = lines.iter().enumerate().map(|(i, l)| (i + 1, l.as_str()));

    let mut next = |what: &str| -> Result<(usize, &str)> {
        it.next().ok_or_else(|| err(lines.len(), format!("unexpected end of file, expected {what}")))
    };
    let (ln, first) = next("header")?;
    if first.trim() != MAGIC {
        return Err(err(ln, format!("bad header {first:?}")));
    }
    let field = |(ln, line): (usize, &str), key: &str| -> Result<Vec<String>> {
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(err(ln, format!("expected `{key}`")));
        }
        Ok(parts.map(str::to_string).collect())
    };
    let num = |ln: usize, s: &str| -> Result<usize> { s.parse().map_err(|_| err(ln, format!("bad integer {s:?}"))) };
    let nums = |ln: usize, v: Vec<String>| -> Result<Vec<usize>> { v.iter().map(|s| num(ln, s)).collect() };

    let l = next("kind")?;
    let kind = ModelKind::parse(field(l, "kind")?.first().map(String::as_str).unwrap_or(""))
        .map_err(|e| err(l.0, e.to_string()))?;
    let l = next("classes")?;
    let n_classes = num(l.0, field(l, "classes")?.first().map(String::as_str).unwrap_or(""))?;
    let l = next("knn_k")?;
    let knn_k = num(l.0, field(l, "knn_k")?.first().map(String::as_str).unwrap_or(""))?;
    let l = next("edge_widths")?;
    let edge_widths = nums(l.0, field(l, "edge_widths")?)?;
    let l = next("point_widths")?;
    let point_widths = nums(l.0, field(l, "point_widths")?)?;
    let l = next("head_widths")?;
    let head_widths = nums(l.0, field(l, "head_widths")?)?;
    let hyper = Hyper {
        kind,
        n_classes,
        edge_widths,
        point_widths,
        head_widths,
        knn_k,
    };
    hyper.validate().map_err(|e| err(l.0, e.to_string()))?;

    let mut meta = BTreeMap::new();
    let mut params = Vec::new();
    loop {
        let (ln, line) = next("param or end")?;
        let line = line.trim();
        if line == "end" {
            break;
        }
        if let Some(rest) = line.strip_prefix("meta ") {
            let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
            meta.insert(k.to_string(), v.to_string());
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 5 || parts[0] != "param" {
            return Err(err(ln, format!("expected `param <name> <rank> <rows> <cols>`, got {line:?}")));
        }
        let (rank, rows, cols) = (num(ln, parts[2])?, num(ln, parts[3])?, num(ln, parts[4])?);
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (ln, row) = next("parameter row")?;
            let before = data.len();
            for tok in row.split_whitespace() {
                data.push(tok.parse::<f64>().map_err(|_| err(ln, format!("bad number {tok:?}")))?);
            }
            if data.len() - before != cols {
                return Err(err(ln, format!("expected {cols} values")));
            }
        }
        let shape = match rank {
            2 => vec![rows, cols],
            1 => vec![cols],
            0 => vec![],
            r => return Err(err(ln, format!("unsupported rank {r}"))),
        };
        params.push(Param {
            name: parts[1].to_string(),
            tensor: Tensor::new(shape, data).map_err(|e| err(ln, e.to_string()))?,
        });
    }

    // The layout is fixed by the hyperparameters; check names and shapes.
    let expected = Model::init(hyper.clone(), 0)?;
    if expected.params.len() != params.len()
        || expected
            .params
            .iter()
            .zip(&params)
            .any(|(a, b)| a.name != b.name || a.tensor.shape() != b.tensor.shape())
    {
        return Err(err(lines.len(), "parameter blocks do not match the declared architecture".into()));
    }
    Ok(Model { hyper, params, meta })
}
