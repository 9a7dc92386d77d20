//! CSV import/export for datasets and generated samples.
//!
//! Dataset files carry a header like `z0,...,z7,y0,...,y2`. Values are
//! written in single precision using shortest round-trip decimals and parsed
//! back through `f32`, so an export/import/export cycle is byte-stable.
//! Missing labels are the literal `?`.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::FactorizedCode;
use crate::priors::LabelKind;
use crate::training::LatentDataset;

fn format_value(v: f64) -> String {
    format!("{}", v as f32)
}

fn parse_value(text: &str, path: &Path, line: usize) -> Result<f64> {
    text.trim().parse::<f32>().map(|v| v as f64).map_err(|_| {
        Error::Schema(format!(
            "{} line {line}: `{text}` is not a number",
            path.display()
        ))
    })
}

fn write_rows(
    path: &Path,
    value_prefix: &str,
    values: &[Vec<f64>],
    labels: &[Vec<Option<f64>>],
) -> Result<()> {
    if values.len() != labels.len() {
        return Err(Error::Dimension(
            "value and label row counts disagree".into(),
        ));
    }
    let dim = values.first().map(|v| v.len()).unwrap_or(0);
    let k = labels.first().map(|y| y.len()).unwrap_or(0);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    let mut header: Vec<String> = (0..dim).map(|i| format!("{value_prefix}{i}")).collect();
    header.extend((0..k).map(|i| format!("y{i}")));
    writeln!(out, "{}", header.join(","))?;
    for (row, label) in values.iter().zip(labels) {
        let mut fields: Vec<String> = row.iter().map(|&v| format_value(v)).collect();
        fields.extend(label.iter().map(|v| match v {
            Some(value) => format_value(*value),
            None => "?".to_string(),
        }));
        writeln!(out, "{}", fields.join(","))?;
    }
    out.flush()?;
    Ok(())
}

type Rows = (Vec<Vec<f64>>, Vec<Vec<Option<f64>>>);

fn read_rows(path: &Path, value_prefix: &str) -> Result<Rows> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Schema(format!("{} is empty", path.display())))?;
    let columns: Vec<&str> = header.split(',').collect();
    let dim = columns
        .iter()
        .take_while(|c| c.starts_with(value_prefix))
        .count();
    if dim == 0 {
        return Err(Error::Schema(format!(
            "{}: header does not start with `{value_prefix}0`",
            path.display()
        )));
    }
    for (i, column) in columns.iter().enumerate() {
        let expected = if i < dim {
            format!("{value_prefix}{i}")
        } else {
            format!("y{}", i - dim)
        };
        if *column != expected {
            return Err(Error::Schema(format!(
                "{}: expected column `{expected}`, found `{column}`",
                path.display()
            )));
        }
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            return Err(Error::Schema(format!(
                "{} line {}: {} fields, expected {}",
                path.display(),
                idx + 2,
                fields.len(),
                columns.len()
            )));
        }
        let row: Vec<f64> = fields[..dim]
            .iter()
            .map(|f| parse_value(f, path, idx + 2))
            .collect::<Result<_>>()?;
        let label: Vec<Option<f64>> = fields[dim..]
            .iter()
            .map(|f| {
                if f.trim() == "?" {
                    Ok(None)
                } else {
                    parse_value(f, path, idx + 2).map(Some)
                }
            })
            .collect::<Result<_>>()?;
        values.push(row);
        labels.push(label);
    }
    Ok((values, labels))
}

/// Writes a latent dataset with header `z0..z{N-1},y0..y{K-1}`.
pub fn write_latent_dataset(path: &Path, dataset: &LatentDataset) -> Result<()> {
    write_rows(path, "z", dataset.latents(), dataset.labels())
}

/// Reads a latent dataset back; `kinds` supplies the per-attribute label
/// kinds the file format does not carry.
pub fn read_latent_dataset(path: &Path, kinds: &[LabelKind]) -> Result<LatentDataset> {
    let (latents, labels) = read_rows(path, "z")?;
    if labels.first().map(|y| y.len()).unwrap_or(0) != kinds.len() {
        return Err(Error::Dimension(format!(
            "{} carries {} label columns, config lists {} attributes",
            path.display(),
            labels.first().map(|y| y.len()).unwrap_or(0),
            kinds.len()
        )));
    }
    LatentDataset::new(latents, labels, kinds.to_vec())
}

/// Observations with labels, header `x0..x{D-1},y0..y{K-1}`.
pub fn write_observations(path: &Path, xs: &[Vec<f64>], labels: &[Vec<Option<f64>>]) -> Result<()> {
    write_rows(path, "x", xs, labels)
}

pub fn read_observations(path: &Path) -> Result<Rows> {
    read_rows(path, "x")
}

/// One row of a samples file: the observation, its latent code, and the
/// factorized code split into label and style parts. The optional tag column
/// distinguishes phases (before/after) or interpolation steps.
#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub tag: Option<String>,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub code: FactorizedCode,
}

/// Writes samples with header `[tag,]x0..,z0..,c0..,s0..`. An empty record
/// list still produces the header (dimensions must then be supplied).
pub fn write_samples(
    path: &Path,
    x_dim: usize,
    n_dims: usize,
    k_labels: usize,
    tag_header: Option<&str>,
    records: &[SampleRecord],
) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    let mut header = Vec::new();
    if let Some(tag) = tag_header {
        header.push(tag.to_string());
    }
    header.extend((0..x_dim).map(|i| format!("x{i}")));
    header.extend((0..n_dims).map(|i| format!("z{i}")));
    header.extend((0..k_labels).map(|i| format!("c{i}")));
    header.extend((0..n_dims - k_labels).map(|i| format!("s{i}")));
    writeln!(out, "{}", header.join(","))?;

    for (idx, record) in records.iter().enumerate() {
        if record.x.len() != x_dim
            || record.z.len() != n_dims
            || record.code.dims() != n_dims
            || record.code.k_labels() != k_labels
        {
            return Err(Error::Dimension(format!(
                "sample record {idx} does not match the declared dimensions"
            )));
        }
        let mut fields = Vec::new();
        if tag_header.is_some() {
            fields.push(record.tag.clone().unwrap_or_default());
        }
        fields.extend(record.x.iter().map(|&v| format_value(v)));
        fields.extend(record.z.iter().map(|&v| format_value(v)));
        fields.extend(record.code.as_slice().iter().map(|&v| format_value(v)));
        writeln!(out, "{}", fields.join(","))?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn sample_dataset() -> LatentDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let latents: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect();
        let labels: Vec<Vec<Option<f64>>> = (0..20)
            .map(|i| {
                vec![
                    if i % 5 == 0 {
                        None
                    } else {
                        Some((i % 2) as f64)
                    },
                    Some(rng.gen_range(-1.0..1.0)),
                ]
            })
            .collect();
        LatentDataset::new(
            latents,
            labels,
            vec![LabelKind::Binary, LabelKind::Continuous],
        )
        .unwrap()
    }

    #[test]
    fn latent_round_trip_within_single_precision() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("latents.csv");
        let dataset = sample_dataset();
        write_latent_dataset(&path, &dataset).unwrap();

        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("z0,z1,z2,z3,y0,y1\n"));

        let back = read_latent_dataset(&path, dataset.kinds()).unwrap();
        assert_eq!(back.len(), dataset.len());
        for i in 0..dataset.len() {
            for (orig, got) in dataset.latent(i).iter().zip(back.latent(i)) {
                // Re-imported values are exactly the f32 quantization.
                assert_eq!(*got, *orig as f32 as f64);
            }
            for (orig, got) in dataset.label(i).iter().zip(back.label(i)) {
                match (orig, got) {
                    (None, None) => {}
                    (Some(a), Some(b)) => assert_eq!(*b, *a as f32 as f64),
                    other => panic!("missingness changed: {other:?}"),
                }
            }
        }

        // Export/import/export is byte-stable.
        let path2 = dir.path().join("latents2.csv");
        write_latent_dataset(&path2, &back).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn missing_labels_written_as_question_mark() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("latents.csv");
        write_latent_dataset(&path, &sample_dataset()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().nth(1).unwrap().contains('?'));
    }

    #[test]
    fn header_mismatch_is_a_schema_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "a0,a1,y0\n1,2,0\n").unwrap();
        assert!(matches!(
            read_latent_dataset(&path, &[LabelKind::Binary]),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn ragged_row_is_a_schema_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "z0,z1,y0\n1,2\n").unwrap();
        assert!(matches!(
            read_latent_dataset(&path, &[LabelKind::Binary]),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn label_column_count_must_match_config() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("latents.csv");
        write_latent_dataset(&path, &sample_dataset()).unwrap();
        assert!(matches!(
            read_latent_dataset(&path, &[LabelKind::Binary]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn observations_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("observations.csv");
        let xs = vec![vec![0.25, -1.5, 3.125], vec![1.0, 2.0, -0.5]];
        let labels = vec![vec![Some(1.0)], vec![None]];
        write_observations(&path, &xs, &labels).unwrap();
        let (xs_back, labels_back) = read_observations(&path).unwrap();
        assert_eq!(xs_back, xs);
        assert_eq!(labels_back, labels);
    }

    #[test]
    fn empty_samples_file_is_header_only() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("samples.csv");
        write_samples(&path, 3, 4, 2, None, &[]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "x0,x1,x2,z0,z1,z2,z3,c0,c1,s0,s1\n");
    }

    #[test]
    fn tagged_samples_carry_their_tag_column() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("samples.csv");
        let code = FactorizedCode::from_vec(vec![1.0, -1.0, 0.5, 0.25], 2).unwrap();
        let records = vec![
            SampleRecord {
                tag: Some("before".into()),
                x: vec![0.0, 0.0, 0.0],
                z: vec![0.1, 0.2, 0.3, 0.4],
                code: code.clone(),
            },
            SampleRecord {
                tag: Some("after".into()),
                x: vec![1.0, 1.0, 1.0],
                z: vec![0.5, 0.6, 0.7, 0.8],
                code,
            },
        ];
        write_samples(&path, 3, 4, 2, Some("phase"), &records).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "phase,x0,x1,x2,z0,z1,z2,z3,c0,c1,s0,s1"
        );
        assert!(lines.next().unwrap().starts_with("before,"));
        assert!(lines.next().unwrap().starts_with("after,"));
    }
}
