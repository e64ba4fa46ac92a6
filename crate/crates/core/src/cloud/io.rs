use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Dataset, LabeledCloud, PointCloud, Split};

/// Writes one `x y z` line per point with 17 significant digits.
pub fn write_xyz<W: Write>(cloud: &PointCloud, mut w: W) -> std::io::Result<()> {
    for p in cloud.points() {
        writeln!(w, "{:.16e} {:.16e} {:.16e}", p[0], p[1], p[2])?;
    }
    Ok(())
}

pub fn save_xyz(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(cloud.len() * 72);
    write_xyz(cloud, &mut buf).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Parses the whitespace-separated text format. Blank lines are skipped.
pub fn parse_xyz<R: BufRead>(reader: R, origin: &str) -> Result<PointCloud> {
    let mut coords = Vec::new();
    let parse_err = |line: usize, message: String| Error::Parse {
        path: origin.to_string(),
        line,
        message,
    };
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(origin, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(parse_err(lineno, format!("expected 3 numbers, found {}", fields.len())));
        }
        for f in fields {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(lineno, format!("not a number: {f:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(lineno, format!("non-finite coordinate {f:?}")));
            }
            coords.push(v);
        }
    }
    if coords.is_empty() {
        return Err(parse_err(1, "file contains no points".into()));
    }
    PointCloud::from_flat(coords)
}

pub fn load_xyz(path: &Path) -> Result<PointCloud> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_xyz(BufReader::new(f), &path.display().to_string())
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    file: String,
    label: usize,
    class: String,
    split: Split,
}

const DATASET_MANIFEST: &str = "manifest.jsonl";

/// Writes datasets as `<dir>/<class>/<split>_<index>.xyz` plus a JSON-lines
/// manifest recording split membership.
pub fn save_dataset_dir(dir: &Path, datasets: &[&Dataset]) -> Result<()> {
    let mut manifest = String::new();
    for ds in datasets {
        for name in &ds.class_names {
            let sub = dir.join(name);
            fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        }
        for (i, item) in ds.items.iter().enumerate() {
            let class = &ds.class_names[item.label];
            let rel = format!("{class}/{}_{i:05}.xyz", ds.split.as_str());
            save_xyz(&item.cloud, &dir.join(&rel))?;
            let line = ManifestLine {
                file: rel,
                label: item.label,
                class: class.clone(),
                split: ds.split,
            };
            manifest.push_str(&serde_json::to_string(&line)?);
            manifest.push('\n');
        }
    }
    let path = dir.join(DATASET_MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// Loads one split of a dataset directory written by [`save_dataset_dir`].
pub fn load_dataset_dir(dir: &Path, split: Split) -> Result<Dataset> {
    let path = dir.join(DATASET_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut class_names: Vec<String> = Vec::new();
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if class_names.len() <= entry.label {
            class_names.resize(entry.label + 1, String::new());
        }
        class_names[entry.label] = entry.class.clone();
        if entry.split == split {
            items.push(LabeledCloud {
                cloud: load_xyz(&dir.join(&entry.file))?,
                label: entry.label,
            });
        }
    }
    Dataset::new(items, class_names, split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{synth_dataset, SynthSpec};

    #[test]
    fn xyz_round_trip_is_bitwise() {
        let c = PointCloud::from_flat(vec![0.1, -2.0 / 3.0, 1e-300, std::f64::consts::PI, 5.0, -0.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.xyz");
        save_xyz(&c, &p).unwrap();
        let back = load_xyz(&p).unwrap();
        let bits = |c: &PointCloud| c.flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&c), bits(&back));
    }

    #[test]
    fn parse_errors_report_lines() {
        let err = parse_xyz("1 2 3\n4 5\n".as_bytes(), "mem").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_xyz("1 2 3\n1 x 3\n".as_bytes(), "mem").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(matches!(parse_xyz("".as_bytes(), "mem"), Err(Error::Parse { .. })));
        assert!(matches!(parse_xyz("nan 0 0\n".as_bytes(), "mem"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn whitespace_is_tolerated() {
        let c = parse_xyz("  1 2 3  \n\t4\t5 6\n\n".as_bytes(), "mem").unwrap();
        assert_eq!(c.flat(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn dataset_directory_round_trip() {
        let spec = SynthSpec::new(3, 2, 16, 9);
        let train = synth_dataset(&spec, Split::Train).unwrap();
        let test = synth_dataset(&spec, Split::Test).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset_dir(dir.path(), &[&train, &test]).unwrap();
        assert!(dir.path().join("sphere").is_dir());
        assert_eq!(load_dataset_dir(dir.path(), Split::Train).unwrap(), train);
        assert_eq!(load_dataset_dir(dir.path(), Split::Test).unwrap(), test);
    }
}
