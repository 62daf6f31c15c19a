use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, Slide};
use crate::error::{Error, Result};

/// Preprocessing stages already applied to a dataset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Stages {
    pub normalized: bool,
    pub log1p: bool,
    pub pca: bool,
    pub standardized_features: bool,
    pub standardized_coords: bool,
    pub subsampled: bool,
}

/// Contents of the `.meta.toml` sidecar.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub feature_dim: usize,
    pub num_timepoints: usize,
    pub num_types: Option<usize>,
    pub seed: Option<u64>,
    pub pca_components: Option<usize>,
    #[serde(default)]
    pub stages: Stages,
}

pub fn meta_path(table: &Path) -> PathBuf {
    let mut s = table.as_os_str().to_owned();
    s.push(".meta.toml");
    PathBuf::from(s)
}

enum Column {
    Time,
    X,
    Y,
    Feature,
    Type,
    SampleId,
}

fn parse_header(line: &str) -> Result<(Vec<Column>, usize)> {
    let mut cols = Vec::new();
    let mut dim = 0;
    for (pos, name) in line.split(',').map(str::trim).enumerate() {
        let col = match (pos, name) {
            (0, "time") => Column::Time,
            (1, "x") => Column::X,
            (2, "y") => Column::Y,
            (_, "type") => Column::Type,
            (_, "sample_id") => Column::SampleId,
            (p, f) if p >= 3 && f == format!("f{dim}") => {
                dim += 1;
                Column::Feature
            }
            _ => return Err(Error::Format(format!("unknown or misplaced column '{name}' at position {pos}"))),
        };
        if matches!(col, Column::Feature) && cols.iter().any(|c| matches!(c, Column::Type | Column::SampleId)) {
            return Err(Error::Format(format!("feature column {name} after label columns")));
        }
        cols.push(col);
    }
    if cols.len() < 3 {
        return Err(Error::Format("header must start with time,x,y".into()));
    }
    Ok((cols, dim))
}

#[derive(Default)]
struct Group {
    coords: Vec<[f64; 2]>,
    features: Vec<f64>,
    types: Vec<usize>,
    sample_ids: Vec<u64>,
}

fn field<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Format(format!("line {line}: cannot parse {what} from '{s}'")))
}

/// Parse a cell table from text. Cells are grouped by time index, ascending.
pub fn parse_cell_table(text: &str) -> Result<Vec<Slide>> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let Some((_, header)) = lines.next() else {
        return Err(Error::Format("no cells".into()));
    };
    let (cols, dim) = parse_header(header)?;
    let has_type = cols.iter().any(|c| matches!(c, Column::Type));
    let has_sample = cols.iter().any(|c| matches!(c, Column::SampleId));
    let mut groups: BTreeMap<usize, Group> = BTreeMap::new();
    for (lineno, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Format(format!(
                "line {lineno}: expected {} fields, found {}",
                cols.len(),
                fields.len()
            )));
        }
        let time: usize = field(fields[0], lineno, "time")?;
        let g = groups.entry(time).or_default();
        let mut xy = [0.0; 2];
        for (col, raw) in cols.iter().zip(&fields) {
            match col {
                Column::Time => {}
                Column::X => xy[0] = field(raw, lineno, "x")?,
                Column::Y => xy[1] = field(raw, lineno, "y")?,
                Column::Feature => g.features.push(field(raw, lineno, "feature")?),
                Column::Type => g.types.push(field(raw, lineno, "type")?),
                Column::SampleId => g.sample_ids.push(field(raw, lineno, "sample_id")?),
            }
        }
        g.coords.push(xy);
    }
    if groups.is_empty() {
        return Err(Error::Format("no cells".into()));
    }
    groups
        .into_iter()
        .map(|(t, g)| {
            let mut s = Slide::new(t, g.coords, g.features, dim)?;
            if has_type {
                s = s.with_types(g.types)?;
            }
            if has_sample {
                s.sample_ids = Some(g.sample_ids);
            }
            Ok(s)
        })
        .collect()
}

pub fn load_slides(path: &Path) -> Result<Vec<Slide>> {
    parse_cell_table(&std::fs::read_to_string(path)?)
}

/// Render slides as a cell table. Label columns are emitted when any slide
/// carries them; values use the shortest round-trip float representation.
pub fn format_cell_table(slides: &[Slide]) -> Result<String> {
    let dim = slides.first().map_or(0, |s| s.dim);
    let has_type = slides.iter().any(|s| s.types.is_some());
    let has_sample = slides.iter().any(|s| s.sample_ids.is_some());
    if has_type && !slides.iter().all(|s| s.types.is_some()) {
        return Err(Error::Format("type labels present on some slides only".into()));
    }
    if has_sample && !slides.iter().all(|s| s.sample_ids.is_some()) {
        return Err(Error::Format("sample ids present on some slides only".into()));
    }
    let mut out = String::from("time,x,y");
    for d in 0..dim {
        write!(out, ",f{d}").unwrap();
    }
    if has_type {
        out.push_str(",type");
    }
    if has_sample {
        out.push_str(",sample_id");
    }
    out.push('\n');
    for s in slides {
        if s.dim != dim {
            return Err(Error::Dimension("slides disagree on feature dimension".into()));
        }
        for i in 0..s.len() {
            write!(out, "{},{},{}", s.time_index, s.coords[i][0], s.coords[i][1]).unwrap();
            for v in s.feature(i) {
                write!(out, ",{v}").unwrap();
            }
            if let Some(t) = &s.types {
                write!(out, ",{}", t[i]).unwrap();
            }
            if let Some(id) = &s.sample_ids {
                write!(out, ",{}", id[i]).unwrap();
            }
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn write_cell_table(path: &Path, slides: &[Slide]) -> Result<()> {
    std::fs::write(path, format_cell_table(slides)?)?;
    Ok(())
}

/// Load a table plus its sidecar; without a sidecar the metadata is derived
/// from the table and no preprocessing stage is assumed.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let slides = load_slides(path)?;
    let mp = meta_path(path);
    let meta = if mp.exists() {
        let text = std::fs::read_to_string(&mp)?;
        toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", mp.display())))?
    } else {
        DatasetMeta { feature_dim: slides[0].dim, num_timepoints: slides.len(), ..Default::default() }
    };
    let ds = Dataset::new(slides, meta)?;
    if ds.meta.feature_dim != ds.dim() || ds.meta.num_timepoints != ds.num_timepoints() {
        return Err(Error::Format(format!(
            "sidecar declares D={}, |T|={} but table has D={}, |T|={}",
            ds.meta.feature_dim,
            ds.meta.num_timepoints,
            ds.dim(),
            ds.num_timepoints()
        )));
    }
    Ok(ds)
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    write_cell_table(path, &ds.slides)?;
    let mut meta = ds.meta.clone();
    meta.feature_dim = ds.dim();
    meta.num_timepoints = ds.num_timepoints();
    let text = toml::to_string(&meta).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(meta_path(path), text)?;
    Ok(())
}
