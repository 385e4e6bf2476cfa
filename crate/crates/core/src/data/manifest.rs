//! CSV manifests for externally annotated image sets.
//!
//! ```text
//! path,overall,sharpness,light
//! #range,1:5,0:100,1:10
//! imgs/a.png,4.2,61,
//! ```
//!
//! The second header row declares the raw range of each label column; labels
//! are min-max normalized into [0, 1]. Empty cells are missing labels.
//! Dimension columns may be any subset of the registry; absent dimensions
//! are missing for every row.

use std::path::{Path, PathBuf};

use super::{DimLabels, ImageTensor, MultiDimSample, Source};
use crate::registry::DimensionRegistry;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelRange {
    pub lo: f64,
    pub hi: f64,
}

impl LabelRange {
    pub const UNIT: LabelRange = LabelRange { lo: 0.0, hi: 1.0 };

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.lo) / (self.hi - self.lo)
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        self.lo + v * (self.hi - self.lo)
    }

    fn parse(cell: &str) -> Option<Self> {
        let (lo, hi) = cell.trim().split_once(':')?;
        let r = LabelRange {
            lo: lo.trim().parse().ok()?,
            hi: hi.trim().parse().ok()?,
        };
        (r.lo.is_finite() && r.hi.is_finite() && r.lo < r.hi).then_some(r)
    }
}

/// One manifest row with normalized labels, before the image is decoded.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// As written in the manifest (relative to the manifest's directory).
    pub path: PathBuf,
    pub overall: f64,
    pub labels: DimLabels,
}

/// Parses a manifest without touching the referenced images.
pub fn read_manifest(path: &Path, registry: &DimensionRegistry) -> Result<Vec<ManifestEntry>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);
    let mut records = rdr.records();

    let header = records
        .next()
        .ok_or_else(|| Error::Manifest("empty file".into()))?
        .map_err(|e| Error::ManifestRow { row: 1, message: e.to_string() })?;
    let columns: Vec<String> = header.iter().map(|s| s.trim().to_string()).collect();
    if columns.len() < 2 || columns[0] != "path" || columns[1] != "overall" {
        return Err(Error::ManifestRow {
            row: 1,
            message: "header must start with `path,overall`".into(),
        });
    }
    let mut dim_index = Vec::with_capacity(columns.len() - 2);
    for name in &columns[2..] {
        let idx = registry
            .index_of(name)
            .ok_or_else(|| Error::ManifestColumn {
                column: name.clone(),
                message: "not a registered dimension".into(),
            })?;
        if dim_index.contains(&idx) {
            return Err(Error::ManifestColumn {
                column: name.clone(),
                message: "appears twice".into(),
            });
        }
        dim_index.push(idx);
    }

    let range_row = records
        .next()
        .ok_or_else(|| Error::ManifestRow { row: 2, message: "missing `#range` row".into() })?
        .map_err(|e| Error::ManifestRow { row: 2, message: e.to_string() })?;
    if range_row.len() != columns.len() || range_row.get(0).map(str::trim) != Some("#range") {
        return Err(Error::ManifestRow {
            row: 2,
            message: format!("expected `#range` followed by {} ranges", columns.len() - 1),
        });
    }
    let mut ranges = Vec::with_capacity(columns.len() - 1);
    for (col, cell) in columns[1..].iter().zip(range_row.iter().skip(1)) {
        ranges.push(LabelRange::parse(cell).ok_or_else(|| Error::ManifestColumn {
            column: col.clone(),
            message: format!("bad range `{cell}`; expected lo:hi with lo < hi"),
        })?);
    }

    let mut entries = Vec::new();
    for (i, rec) in records.enumerate() {
        let row = i + 3;
        let rec = rec.map_err(|e| Error::ManifestRow { row, message: e.to_string() })?;
        if rec.iter().all(|c| c.trim().is_empty()) {
            continue;
        }
        if rec.len() != columns.len() {
            return Err(Error::ManifestRow {
                row,
                message: format!("expected {} fields, found {}", columns.len(), rec.len()),
            });
        }
        let img = rec[0].trim();
        if img.is_empty() {
            return Err(Error::ManifestRow { row, message: "empty path".into() });
        }
        let mut cells = Vec::with_capacity(columns.len() - 1);
        for (j, cell) in rec.iter().enumerate().skip(1) {
            let cell = cell.trim();
            if cell.is_empty() {
                cells.push(None);
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::ManifestRow {
                row,
                message: format!("`{cell}` in column `{}` is not a number", columns[j]),
            })?;
            let r = ranges[j - 1];
            if !(v >= r.lo && v <= r.hi) {
                return Err(Error::ManifestColumn {
                    column: columns[j].clone(),
                    message: format!("value {v} on row {row} outside [{}, {}]", r.lo, r.hi),
                });
            }
            cells.push(Some(r.normalize(v)));
        }
        let overall = cells[0].ok_or_else(|| Error::ManifestRow {
            row,
            message: "missing overall label".into(),
        })?;
        let mut labels = DimLabels::missing(registry.len());
        for (&idx, v) in dim_index.iter().zip(&cells[1..]) {
            labels.values[idx] = *v;
        }
        entries.push(ManifestEntry {
            path: PathBuf::from(img),
            overall,
            labels,
        });
    }
    Ok(entries)
}

/// Reads a manifest and decodes every image. Relative paths resolve against
/// the manifest's directory.
pub fn load_manifest(path: &Path, registry: &DimensionRegistry) -> Result<Vec<MultiDimSample>> {
    let base = path.parent().unwrap_or(Path::new("."));
    read_manifest(path, registry)?
        .into_iter()
        .map(|e| {
            let image = ImageTensor::load(&base.join(&e.path))?;
            Ok(MultiDimSample {
                image,
                labels: e.labels,
                overall: e.overall,
                source: Source::Manifest,
            })
        })
        .collect()
}

/// Writes normalized labels with every registry dimension as a column.
/// `ranges[0]` is the overall range, followed by one range per dimension.
pub fn write_manifest(
    path: &Path,
    entries: &[ManifestEntry],
    registry: &DimensionRegistry,
    ranges: Option<&[LabelRange]>,
) -> Result<()> {
    let unit = vec![LabelRange::UNIT; registry.len() + 1];
    let ranges = ranges.unwrap_or(&unit);
    if ranges.len() != registry.len() + 1 {
        return Err(Error::InvalidInput(format!(
            "expected {} ranges, got {}",
            registry.len() + 1,
            ranges.len()
        )));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Manifest(e.to_string()))?;
    let csv_err = |e: csv::Error| Error::Manifest(e.to_string());

    let mut header = vec!["path".to_string(), "overall".to_string()];
    header.extend(registry.names().map(str::to_string));
    w.write_record(&header).map_err(csv_err)?;
    let mut range_row = vec!["#range".to_string()];
    range_row.extend(ranges.iter().map(|r| format!("{}:{}", r.lo, r.hi)));
    w.write_record(&range_row).map_err(csv_err)?;

    for e in entries {
        let mut rec = vec![e.path.to_string_lossy().into_owned(), ranges[0].denormalize(e.overall).to_string()];
        for (i, v) in e.labels.values.iter().enumerate() {
            rec.push(v.map_or(String::new(), |v| ranges[i + 1].denormalize(v).to_string()));
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::default_registry;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("m.csv");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn overall_range_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "path,overall,sharpness\n#range,1:5,0:10\na.png,5,\nb.png,1,10\nc.png,3,2.5\n",
        );
        let reg = default_registry();
        let e = read_manifest(&p, &reg).unwrap();
        assert_eq!(e.len(), 3);
        assert_eq!(e[0].overall, 1.0);
        assert_eq!(e[1].overall, 0.0);
        assert_eq!(e[2].overall, 0.5);
        assert_eq!(e[0].labels.get(&reg, "sharpness"), None);
        assert_eq!(e[1].labels.get(&reg, "sharpness"), Some(1.0));
        assert_eq!(e[2].labels.get(&reg, "sharpness"), Some(0.25));
        assert_eq!(e[2].labels.get(&reg, "light"), None);
        assert_eq!(e[2].labels.mask().iter().filter(|m| **m).count(), 1);
    }

    #[test]
    fn malformed_row_reports_row_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "path,overall,sharpness\n#range,1:5,0:10\na.png,5,1\nb.png,abc,1\n",
        );
        match read_manifest(&p, &default_registry()) {
            Err(Error::ManifestRow { row, .. }) => assert_eq!(row, 4),
            other => panic!("unexpected {other:?}"),
        }
        let p = write(dir.path(), "path,overall\n#range,1:5\na.png,5,7\n");
        assert!(matches!(
            read_manifest(&p, &default_registry()),
            Err(Error::ManifestRow { row: 3, .. })
        ));
    }

    #[test]
    fn out_of_range_reports_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "path,overall,noisiness\n#range,1:5,0:1\na.png,5,1.5\n");
        match read_manifest(&p, &default_registry()) {
            Err(Error::ManifestColumn { column, .. }) => assert_eq!(column, "noisiness"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_column_and_bad_range_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "path,overall,vibes\n#range,1:5,0:1\n");
        assert!(matches!(
            read_manifest(&p, &default_registry()),
            Err(Error::ManifestColumn { .. })
        ));
        let p = write(dir.path(), "path,overall\n#range,5:1\n");
        assert!(matches!(
            read_manifest(&p, &default_registry()),
            Err(Error::ManifestColumn { .. })
        ));
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let reg = default_registry();
        let mut labels = DimLabels::missing(reg.len());
        labels.values[0] = Some(0.123456789012345);
        labels.values[6] = Some(1.0 / 3.0);
        let entries = vec![ManifestEntry {
            path: "x/y.png".into(),
            overall: 0.7,
            labels,
        }];
        let mut ranges = vec![LabelRange { lo: 1.0, hi: 5.0 }];
        ranges.extend(std::iter::repeat_n(LabelRange { lo: 0.0, hi: 100.0 }, reg.len()));
        let p = dir.path().join("m.csv");
        write_manifest(&p, &entries, &reg, Some(&ranges)).unwrap();
        let back = read_manifest(&p, &reg).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].path, entries[0].path);
        assert!((back[0].overall - 0.7).abs() < 1e-9);
        for (a, b) in back[0].labels.values.iter().zip(&entries[0].labels.values) {
            match (a, b) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9),
                (None, None) => {}
                _ => panic!("mask changed"),
            }
        }
    }

    #[test]
    fn load_resolves_images_relative_to_manifest() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("imgs")).unwrap();
        super::super::clean_image(32, 32, 1)
            .save(&dir.path().join("imgs/a.png"))
            .unwrap();
        let p = write(dir.path(), "path,overall\n#range,0:1\nimgs/a.png,0.5\n");
        let s = load_manifest(&p, &default_registry()).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].source, Source::Manifest);
        assert_eq!(s[0].image.height(), 32);
    }
}
