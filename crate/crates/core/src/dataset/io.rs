//! On-disk dataset layout: binary PPM images plus `manifest.csv`.
//!
//! ```text
//! # proto-lab manifest v1
//! id,filename,class,split,corrupted,part_top,part_left,part_bottom,part_right,clean_filename
//! ```
//! `filename` holds the pixels used for training and evaluation; for
//! corrupted images `clean_filename` points at the original. The list of
//! corrupted classes is also written to `corrupted_classes.txt`.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, LabeledImage, Split};
use crate::error::{Error, Result};
use crate::geometry::PixelBox;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const MANIFEST_HEADER: &str = "# proto-lab manifest v1";
pub const CORRUPTED_CLASSES_FILE: &str = "corrupted_classes.txt";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    id: usize,
    filename: String,
    class: usize,
    split: String,
    corrupted: u8,
    part_top: usize,
    part_left: usize,
    part_bottom: usize,
    part_right: usize,
    clean_filename: String,
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[3,H,W]` tensor as binary PPM (P6, maxval 255).
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let n = h * w;
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.reserve(3 * n);
    for i in 0..n {
        for c in 0..3 {
            bytes.push(to_byte(image.data()[c * n + i]));
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn ppm_token(reader: &mut impl BufRead, path: &Path) -> Result<String> {
    let mut token = String::new();
    loop {
        let mut byte = [0u8; 1];
        reader.read_exact(&mut byte).map_err(|e| Error::io(path, e))?;
        let ch = byte[0] as char;
        if ch == '#' {
            let mut skip = String::new();
            reader.read_line(&mut skip).map_err(|e| Error::io(path, e))?;
            continue;
        }
        if ch.is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            return Ok(token);
        }
        token.push(ch);
    }
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let file = fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let mut reader = BufReader::new(file);
    let bad = |detail: &str| Error::format(path.display().to_string(), detail.to_string());
    if ppm_token(&mut reader, path)? != "P6" {
        return Err(bad("not a binary PPM"));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = ppm_token(&mut reader, path)?
            .parse()
            .map_err(|_| bad("bad header number"))?;
    }
    let [w, h, maxval] = dims;
    if maxval != 255 || w == 0 || h == 0 {
        return Err(bad("only maxval 255 is supported"));
    }
    let n = w * h;
    let mut bytes = vec![0u8; 3 * n];
    reader.read_exact(&mut bytes).map_err(|_| bad("truncated pixel data"))?;
    let mut out = Tensor::zeros(&[3, h, w]);
    for i in 0..n {
        for c in 0..3 {
            out.data_mut()[c * n + i] = f64::from(bytes[3 * i + c]) / 255.0;
        }
    }
    Ok(out)
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<Vec<PathBuf>> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut written = Vec::new();
    let mut buffer = Vec::new();
    writeln!(buffer, "{MANIFEST_HEADER}").expect("in-memory write");
    {
        let mut writer = csv::Writer::from_writer(&mut buffer);
        for (split, list) in [(Split::Train, &dataset.train), (Split::Test, &dataset.test)] {
            for img in list {
                let filename = format!("images/{}_{:05}.ppm", split.as_str(), img.id);
                write_ppm(&dir.join(&filename), &img.image)?;
                written.push(dir.join(&filename));
                let clean_filename = match &img.clean {
                    Some(clean) => {
                        let name = format!("images/{}_{:05}_clean.ppm", split.as_str(), img.id);
                        write_ppm(&dir.join(&name), clean)?;
                        written.push(dir.join(&name));
                        name
                    }
                    None => String::new(),
                };
                writer
                    .serialize(ManifestRow {
                        id: img.id,
                        filename,
                        class: img.label,
                        split: split.as_str().to_string(),
                        corrupted: u8::from(img.clean.is_some()),
                        part_top: img.part.top,
                        part_left: img.part.left,
                        part_bottom: img.part.bottom,
                        part_right: img.part.right,
                        clean_filename,
                    })
                    .map_err(|e| Error::format("manifest", e.to_string()))?;
            }
        }
        writer.flush().map_err(|e| Error::io(&manifest_path, e))?;
    }
    fs::write(&manifest_path, buffer).map_err(|e| Error::io(&manifest_path, e))?;
    written.push(manifest_path);

    let list_path = dir.join(CORRUPTED_CLASSES_FILE);
    let list: String = dataset.corrupted_classes.iter().map(|c| format!("{c}\n")).collect();
    fs::write(&list_path, list).map_err(|e| Error::io(&list_path, e))?;
    written.push(list_path);
    Ok(written)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(manifest_path.clone())
        } else {
            Error::io(&manifest_path, e)
        }
    })?;
    if text.lines().next() != Some(MANIFEST_HEADER) {
        return Err(Error::format("manifest", "missing version header"));
    }
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut classes = 0;
    for (line, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let row = row.map_err(|e| Error::format("manifest", format!("row {}: {e}", line + 1)))?;
        let image = read_ppm(&dir.join(&row.filename))?;
        let clean = if row.clean_filename.is_empty() {
            None
        } else {
            Some(read_ppm(&dir.join(&row.clean_filename))?)
        };
        if (row.corrupted == 1) != clean.is_some() {
            return Err(Error::format(
                "manifest",
                format!("{}: corrupted flag without clean file", row.filename),
            ));
        }
        let img = LabeledImage {
            id: row.id,
            label: row.class,
            image,
            part: PixelBox {
                top: row.part_top,
                left: row.part_left,
                bottom: row.part_bottom,
                right: row.part_right,
            },
            clean,
        };
        classes = classes.max(row.class + 1);
        match row.split.as_str() {
            "train" => train.push(img),
            "test" => test.push(img),
            other => {
                return Err(Error::format(
                    "manifest",
                    format!("{}: unknown split {other}", row.filename),
                ))
            }
        }
    }
    let list_path = dir.join(CORRUPTED_CLASSES_FILE);
    let corrupted_classes = match fs::read_to_string(&list_path) {
        Ok(text) => text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.trim()
                    .parse()
                    .map_err(|_| Error::format(CORRUPTED_CLASSES_FILE, l.to_string()))
            })
            .collect::<Result<Vec<usize>>>()?,
        Err(_) => Vec::new(),
    };
    Ok(Dataset {
        classes,
        train,
        test,
        corrupted_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compression::corrupt_dataset;
    use crate::dataset::{generate, SynthConfig};

    fn tiny() -> Dataset {
        generate(&SynthConfig {
            classes: 3,
            train_per_class: 2,
            test_per_class: 1,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, _) = corrupt_dataset(&tiny(), 0.5, 20, 1).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.classes, ds.classes);
        assert_eq!(back.corrupted_classes, ds.corrupted_classes);
        for (a, b) in back.train.iter().chain(&back.test).zip(ds.train.iter().chain(&ds.test)) {
            assert_eq!((a.id, a.label, a.part), (b.id, b.label, b.part));
            assert!(a.image.max_abs_diff(&b.image) <= 0.5 / 255.0 + 1e-12);
            assert_eq!(a.clean.is_some(), b.clean.is_some());
        }
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        // version line + header + one row per image
        assert_eq!(text.lines().count(), 2 + ds.train.len() + ds.test.len());
    }

    #[test]
    fn missing_image_is_named() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&tiny(), dir.path()).unwrap();
        let victim = dir.path().join("images/train_00001.ppm");
        fs::remove_file(&victim).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::MissingFile(p)) => assert!(p.ends_with("train_00001.ppm")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_manifest_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&tiny(), dir.path()).unwrap();
        fs::write(
            dir.path().join(MANIFEST_FILE),
            format!("{MANIFEST_HEADER}\nid,filename\n1,x\n"),
        )
        .unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format { .. })));
    }
}
