use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BBox, ClassVocabulary, LabeledGlyph};
use crate::error::{Error, Result};
use crate::imaging::{gray_to_rgb, normalize_crop};

pub const MANIFEST_HEADER: [&str; 8] = ["glyph_id", "image_path", "label", "page_id", "x", "y", "w", "h"];

/// One manifest line. `image_path` is resolved relative to the manifest's
/// directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub glyph_id: String,
    pub image_path: String,
    pub label: String,
    pub page_id: String,
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

fn read_rows(manifest_path: &Path) -> Result<Vec<(u64, ManifestRow)>> {
    let file = File::open(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::format(manifest_path.display().to_string(), e.to_string()))?
        .clone();
    if headers.iter().ne(MANIFEST_HEADER.iter().copied()) {
        return Err(Error::validation(format!(
            "{}: header must be `{}`, found `{}`",
            manifest_path.display(),
            MANIFEST_HEADER.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row_no = i as u64 + 1;
        let record = record.map_err(|e| {
            Error::validation(format!("{}: malformed row {row_no}: {e}", manifest_path.display()))
        })?;
        let row: ManifestRow = record.deserialize(Some(&headers)).map_err(|e| {
            Error::validation(format!("{}: malformed row {row_no}: {e}", manifest_path.display()))
        })?;
        rows.push((row_no, row));
    }
    Ok(rows)
}

fn load_image(path: &Path) -> Result<image::RgbImage> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "referenced image does not exist"),
        ));
    }
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_owned(),
        message: e.to_string(),
    })?;
    Ok(match img {
        image::DynamicImage::ImageLuma8(g) => gray_to_rgb(&g),
        other => other.to_rgb8(),
    })
}

/// Loads a glyph manifest, building the vocabulary from the distinct labels
/// in sorted order.
pub fn load_corpus(manifest_path: impl AsRef<Path>) -> Result<(ClassVocabulary, Vec<LabeledGlyph>)> {
    load_corpus_with_vocab(manifest_path, None)
}

/// Loads a glyph manifest against a fixed vocabulary, if one is given.
///
/// Labels absent from `vocab` (or empty labels) are rejected with the row
/// number.
pub fn load_corpus_with_vocab(
    manifest_path: impl AsRef<Path>,
    vocab: Option<&ClassVocabulary>,
) -> Result<(ClassVocabulary, Vec<LabeledGlyph>)> {
    let manifest_path = manifest_path.as_ref();
    let rows = read_rows(manifest_path)?;
    let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();

    for (row_no, row) in &rows {
        let known = match vocab {
            Some(v) => v.index_of(&row.label).is_some(),
            None => !row.label.is_empty(),
        };
        if !known {
            return Err(Error::validation(format!(
                "{}: row {row_no} references unknown label {:?}",
                manifest_path.display(),
                row.label
            )));
        }
    }
    let vocab = match vocab {
        Some(v) => v.clone(),
        None => ClassVocabulary::from_labels(rows.iter().map(|(_, r)| r.label.as_str()))?,
    };

    let mut seen = std::collections::HashSet::with_capacity(rows.len());
    let mut glyphs = Vec::with_capacity(rows.len());
    for (row_no, row) in rows {
        if !seen.insert(row.glyph_id.clone()) {
            return Err(Error::validation(format!(
                "{}: row {row_no} repeats glyph_id {:?}",
                manifest_path.display(),
                row.glyph_id
            )));
        }
        let image_path = resolve(&base, &row.image_path);
        let crop = normalize_crop(&load_image(&image_path)?);
        glyphs.push(LabeledGlyph {
            label: vocab.index_of(&row.label).expect("label validated above"),
            glyph_id: row.glyph_id,
            crop,
            page_id: row.page_id,
            bbox: BBox {
                x: row.x,
                y: row.y,
                w: row.w,
                h: row.h,
            },
        });
    }
    Ok((vocab, glyphs))
}

fn resolve(base: &Path, image_path: &str) -> PathBuf {
    let p = Path::new(image_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Writes a manifest, optionally preceded by a `# ` comment line.
pub fn write_manifest(path: impl AsRef<Path>, rows: &[ManifestRow], comment: Option<&str>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    if let Some(c) = comment {
        writeln!(out, "# {c}").map_err(|e| Error::io(path, e))?;
    }
    let mut writer = csv::Writer::from_writer(out);
    for row in rows {
        writer
            .serialize(row)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    }
    if rows.is_empty() {
        writer
            .write_record(MANIFEST_HEADER)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    fn fixture(dir: &Path, rows: &str) -> PathBuf {
        for name in ["a.png", "b.png", "c.png"] {
            RgbImage::from_pixel(64, 64, Rgb([10, 20, 30]))
                .save(dir.join(name))
                .unwrap();
        }
        let manifest = dir.join("manifest.csv");
        std::fs::write(&manifest, format!("{}\n{rows}", MANIFEST_HEADER.join(","))).unwrap();
        manifest
    }

    #[test]
    fn three_rows_two_labels() {
        let dir = tempfile::tempdir().unwrap();
        let m = fixture(
            dir.path(),
            "g1,a.png,clef,p1,0,0,64,64\ng2,b.png,breve,p1,64,0,64,64\ng3,c.png,clef,p2,0,0,64,64\n",
        );
        let (vocab, glyphs) = load_corpus(&m).unwrap();
        assert_eq!(glyphs.len(), 3);
        assert_eq!(vocab.len(), 2);
        assert_eq!(vocab.names(), ["breve", "clef"]);
        assert_eq!(glyphs[0].label, 1);
        assert_eq!(glyphs[1].bbox, BBox { x: 64, y: 0, w: 64, h: 64 });
    }

    #[test]
    fn missing_image_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let m = fixture(dir.path(), "g1,nowhere.png,clef,p1,0,0,1,1\n");
        let err = load_corpus(&m).unwrap_err();
        assert!(err.to_string().contains("nowhere.png"), "{err}");
        assert_eq!(err.class(), crate::error::ErrorClass::Io);
    }

    #[test]
    fn malformed_row_reports_row_number() {
        let dir = tempfile::tempdir().unwrap();
        let m = fixture(dir.path(), "g1,a.png,clef,p1,0,0,64,64\ng2,b.png,clef,p1,zero,0,64,64\n");
        let err = load_corpus(&m).unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");
    }

    #[test]
    fn unknown_label_reports_row_number() {
        let dir = tempfile::tempdir().unwrap();
        let m = fixture(dir.path(), "g1,a.png,clef,p1,0,0,64,64\ng2,b.png,custos,p1,0,0,64,64\n");
        let vocab = ClassVocabulary::new(vec!["clef".into()]).unwrap();
        let err = load_corpus_with_vocab(&m, Some(&vocab)).unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");
        assert!(err.to_string().contains("custos"), "{err}");
    }

    #[test]
    fn missing_manifest_is_io_error() {
        let err = load_corpus("/definitely/not/here.csv").unwrap_err();
        assert!(err.to_string().contains("/definitely/not/here.csv"));
    }

    #[test]
    fn write_then_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        RgbImage::from_pixel(30, 40, Rgb([1, 2, 3])).save(dir.path().join("x.png")).unwrap();
        let rows = vec![ManifestRow {
            glyph_id: "x".into(),
            image_path: "x.png".into(),
            label: "dot".into(),
            page_id: "p".into(),
            x: 1,
            y: 2,
            w: 30,
            h: 40,
        }];
        let path = dir.path().join("m.csv");
        write_manifest(&path, &rows, Some("config_hash=abc")).unwrap();
        let (_, glyphs) = load_corpus(&path).unwrap();
        assert_eq!(glyphs[0].crop.dimensions(), (64, 64));
        assert_eq!(glyphs[0].bbox.h, 40);
    }
}
