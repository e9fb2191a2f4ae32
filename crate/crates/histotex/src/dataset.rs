//! On-disk dataset layout: PGM images plus per-partition manifests.
//!
//! `gen-data` writes
//!
//! ```text
//! <dir>/images/<class>/<seed>.pgm
//! <dir>/manifest_train.txt
//! <dir>/manifest_val.txt
//! <dir>/manifest_test.txt
//! ```
//!
//! Each manifest line is `path joint structural statistical seed`
//! (whitespace-separated; labels are names, not ids). Class ids are
//! assigned by first appearance in the train manifest then val/test, so a
//! written dataset loads back with the same numeric labels it was built
//! with.

use crate::error::{Error, Result};
use crate::pgm::{self, BitDepth};
use crate::textures::{ClassSpec, ClassTable, DatasetSplits, LabeledImage};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

const PARTITIONS: [&str; 3] = ["train", "val", "test"];

fn manifest_path(dir: &Path, partition: &str) -> PathBuf {
    dir.join(format!("manifest_{}.txt", partition))
}

/// Write images and manifests; returns the manifest paths.
pub fn write_dataset(splits: &DatasetSplits, dir: &Path, depth: BitDepth) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut out_paths = Vec::new();
    for (partition, images) in
        PARTITIONS.iter().zip([&splits.train, &splits.val, &splits.test])
    {
        let mut manifest = String::from("# path joint structural statistical seed\n");
        for im in images.iter() {
            let class_name = &splits.classes.joint_names[im.joint];
            let rel = format!("images/{}/{:016x}.pgm", class_name, im.seed);
            let full = dir.join(&rel);
            fs::create_dir_all(full.parent().unwrap())?;
            pgm::write_pgm(&full, &im.image, depth)?;
            writeln!(
                manifest,
                "{} {} {} {} {}",
                rel,
                class_name,
                splits.classes.structural_names[im.structural],
                splits.classes.statistical_names[im.statistical],
                im.seed
            )
            .expect("string write");
        }
        let mpath = manifest_path(dir, partition);
        fs::write(&mpath, manifest)?;
        out_paths.push(mpath);
    }
    Ok(out_paths)
}

struct ManifestRow {
    rel_path: String,
    joint: String,
    structural: String,
    statistical: String,
    seed: u64,
}

fn parse_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::Format(format!(
                "{}:{}: expected 5 fields, got {}",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let seed = u64::from_str(fields[4]).map_err(|_| {
            Error::Format(format!("{}:{}: bad seed '{}'", path.display(), lineno + 1, fields[4]))
        })?;
        rows.push(ManifestRow {
            rel_path: fields[0].to_string(),
            joint: fields[1].to_string(),
            structural: fields[2].to_string(),
            statistical: fields[3].to_string(),
            seed,
        });
    }
    Ok(rows)
}

/// Load a dataset previously written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<DatasetSplits> {
    let mut partitions: Vec<Vec<ManifestRow>> = Vec::new();
    for partition in PARTITIONS {
        let path = manifest_path(dir, partition);
        if !path.exists() {
            return Err(Error::Input(format!("missing manifest {}", path.display())));
        }
        partitions.push(parse_manifest(&path)?);
    }

    // Rebuild the class table in first-appearance order across partitions.
    let mut joint_names: Vec<String> = Vec::new();
    let mut joint_pairs: Vec<(String, String)> = Vec::new();
    for rows in &partitions {
        for row in rows {
            if !joint_names.contains(&row.joint) {
                joint_names.push(row.joint.clone());
                joint_pairs.push((row.structural.clone(), row.statistical.clone()));
            }
        }
    }
    let specs: Vec<ClassSpec> = joint_pairs
        .iter()
        .map(|(st, sa)| {
            Ok(ClassSpec { structural: st.parse()?, statistical: sa.parse()? })
        })
        .collect::<Result<_>>()?;
    let classes = ClassTable::from_specs(&specs)?;
    // `ClassSpec::joint_name` must reproduce the manifest's names.
    for (name, spec) in joint_names.iter().zip(&specs) {
        if *name != spec.joint_name() {
            return Err(Error::Format(format!(
                "manifest class '{}' does not match its factors '{}'",
                name,
                spec.joint_name()
            )));
        }
    }

    let mut loaded: Vec<Vec<LabeledImage>> = Vec::new();
    for rows in &partitions {
        let mut images = Vec::with_capacity(rows.len());
        for row in rows {
            let joint = joint_names
                .iter()
                .position(|n| *n == row.joint)
                .expect("interned above");
            let image = pgm::read_pgm(&dir.join(&row.rel_path))?;
            images.push(LabeledImage {
                image,
                joint,
                structural: classes.joint_to_structural[joint],
                statistical: classes.joint_to_statistical[joint],
                seed: row.seed,
            });
        }
        loaded.push(images);
    }
    let test = loaded.pop().unwrap();
    let val = loaded.pop().unwrap();
    let train = loaded.pop().unwrap();
    Ok(DatasetSplits { classes, train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textures::{build_dataset, grid6_class_specs};

    #[test]
    fn write_then_load_preserves_labels_and_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let specs = grid6_class_specs((12, 12));
        let ds = build_dataset(&specs, 5, (0.6, 0.2, 0.2), 11).unwrap();
        write_dataset(&ds, dir.path(), BitDepth::Sixteen).unwrap();
        let back = load_dataset(dir.path()).unwrap();

        assert_eq!(back.classes, ds.classes);
        assert_eq!(back.train.len(), ds.train.len());
        assert_eq!(back.test.len(), ds.test.len());
        for (a, b) in ds.train.iter().zip(&back.train) {
            assert_eq!(a.joint, b.joint);
            assert_eq!(a.structural, b.structural);
            assert_eq!(a.seed, b.seed);
            let err = a
                .image
                .pixels
                .iter()
                .zip(&b.image.pixels)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, crate::Elem::max);
            assert!(err <= 0.5 / 65535.0 + 1e-12, "pixel error {}", err);
        }
    }

    #[test]
    fn rewrite_is_byte_identical() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let specs = grid6_class_specs((16, 16));
        let ds = build_dataset(&specs, 10, (0.7, 0.1, 0.2), 21).unwrap();
        write_dataset(&ds, dir1.path(), BitDepth::Eight).unwrap();
        let ds2 = build_dataset(&specs, 10, (0.7, 0.1, 0.2), 21).unwrap();
        write_dataset(&ds2, dir2.path(), BitDepth::Eight).unwrap();
        for p in PARTITIONS {
            let a = fs::read(manifest_path(dir1.path(), p)).unwrap();
            let b = fs::read(manifest_path(dir2.path(), p)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn missing_manifest_is_input_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Input(_))));
    }
}
