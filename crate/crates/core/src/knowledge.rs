//! External knowledge injected into prompts: title, abstract, free-form
//! metadata and a gallery of named face photos.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

/// Upper bound on gallery size; every face is attached to every clip
/// prompt, and model image budgets are finite.
pub const MAX_GALLERY: usize = 32;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("gallery directory not found: {0}")]
    DirNotFound(PathBuf),
    #[error("two gallery images map to the name {0:?}")]
    DuplicateName(String),
    #[error("could not read image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },
    #[error("gallery has {count} faces; at most {MAX_GALLERY} are allowed")]
    GalleryTooLarge { count: usize },
    #[error("invalid gallery entry: {0}")]
    InvalidEntry(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl KnowledgeError {
    pub fn code(&self) -> &'static str {
        match self {
            KnowledgeError::DirNotFound(_) => "FileNotFound",
            KnowledgeError::DuplicateName(_) => "DuplicateName",
            KnowledgeError::UnreadableImage { .. } => "UnreadableImage",
            KnowledgeError::GalleryTooLarge { .. } => "GalleryTooLarge",
            KnowledgeError::InvalidEntry(_) => "InvalidInput",
            KnowledgeError::Io(_) => "IoError",
        }
    }
}

/// Serde adapter storing an RGB raster as PNG inside base64.
pub mod raster_serde {
    use base64::engine::general_purpose::STANDARD as BASE64;
    use base64::Engine;
    use image::RgbImage;
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Encoded {
        width: u32,
        height: u32,
        png_base64: String,
    }

    pub fn serialize<S: Serializer>(img: &RgbImage, s: S) -> Result<S::Ok, S::Error> {
        Encoded {
            width: img.width(),
            height: img.height(),
            png_base64: BASE64.encode(crate::backends::encode_png(img)),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<RgbImage, D::Error> {
        let enc = Encoded::deserialize(d)?;
        let bytes = BASE64.decode(enc.png_base64).map_err(D::Error::custom)?;
        let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
            .map_err(D::Error::custom)?
            .to_rgb8();
        if img.dimensions() != (enc.width, enc.height) {
            return Err(D::Error::custom("raster dimensions disagree with header"));
        }
        Ok(img)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceEntry {
    pub character_name: String,
    #[serde(with = "raster_serde")]
    pub image: RgbImage,
    pub source_path: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KnowledgePack {
    pub title: Option<String>,
    #[serde(rename = "abstract")]
    pub abstract_text: Option<String>,
    pub metadata: BTreeMap<String, String>,
    pub gallery: Vec<FaceEntry>,
}

/// `Jack_Morton.png` -> `Jack Morton`.
pub fn name_from_stem(path: &Path) -> Option<String> {
    let stem = path.file_stem()?.to_str()?;
    let name = stem.replace('_', " ").trim().to_string();
    (!name.is_empty()).then_some(name)
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Loads one face per image file in `dir`, sorted by character name.
///
/// Undecodable images are skipped with a warning as long as at least one
/// face loads.
pub fn load_gallery(dir: &Path) -> Result<Vec<FaceEntry>, KnowledgeError> {
    if !dir.is_dir() {
        return Err(KnowledgeError::DirNotFound(dir.to_path_buf()));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    paths.sort();

    let mut seen = BTreeSet::new();
    let mut entries = Vec::new();
    let mut first_failure = None;
    for path in paths {
        let name = name_from_stem(&path)
            .ok_or_else(|| KnowledgeError::InvalidEntry(format!("unusable file name {}", path.display())))?;
        if !seen.insert(name.clone()) {
            return Err(KnowledgeError::DuplicateName(name));
        }
        match image::open(&path) {
            Ok(img) => {
                let image = img.to_rgb8();
                if image.width() == 0 || image.height() == 0 {
                    warn!(path = %path.display(), "skipping empty face image");
                    continue;
                }
                entries.push(FaceEntry { character_name: name, image, source_path: path });
            }
            Err(e) => {
                warn!(path = %path.display(), error = %e, "skipping unreadable face image");
                first_failure.get_or_insert(KnowledgeError::UnreadableImage { path, reason: e.to_string() });
            }
        }
    }
    if entries.is_empty() {
        if let Some(err) = first_failure {
            return Err(err);
        }
    }
    if entries.len() > MAX_GALLERY {
        return Err(KnowledgeError::GalleryTooLarge { count: entries.len() });
    }
    entries.sort_by(|a, b| a.character_name.cmp(&b.character_name));
    Ok(entries)
}

impl KnowledgePack {
    pub fn build(
        title: Option<String>,
        abstract_text: Option<String>,
        metadata: BTreeMap<String, String>,
        gallery: Vec<FaceEntry>,
    ) -> Result<Self, KnowledgeError> {
        let pack = Self {
            title: title.filter(|t| !t.trim().is_empty()),
            abstract_text: abstract_text.filter(|t| !t.trim().is_empty()),
            metadata,
            gallery,
        };
        pack.validate()?;
        Ok(pack)
    }

    pub fn validate(&self) -> Result<(), KnowledgeError> {
        if self.gallery.len() > MAX_GALLERY {
            return Err(KnowledgeError::GalleryTooLarge { count: self.gallery.len() });
        }
        let mut names = BTreeSet::new();
        for f in &self.gallery {
            if f.character_name.trim().is_empty() {
                return Err(KnowledgeError::InvalidEntry("empty character name".into()));
            }
            if f.image.width() == 0 || f.image.height() == 0 {
                return Err(KnowledgeError::InvalidEntry(format!("empty image for {}", f.character_name)));
            }
            if !names.insert(f.character_name.as_str()) {
                return Err(KnowledgeError::DuplicateName(f.character_name.clone()));
            }
        }
        Ok(())
    }

    pub fn gallery_names(&self) -> Vec<&str> {
        self.gallery.iter().map(|f| f.character_name.as_str()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.title.is_none() && self.abstract_text.is_none() && self.metadata.is_empty() && self.gallery.is_empty()
    }

    /// Title, abstract and metadata as prompt text; empty when there is
    /// nothing to say.
    pub fn context_block(&self) -> String {
        let mut lines = Vec::new();
        if let Some(t) = &self.title {
            lines.push(format!("Video title: {t}"));
        }
        if let Some(a) = &self.abstract_text {
            lines.push(format!("Abstract: {a}"));
        }
        if !self.metadata.is_empty() {
            lines.push("Metadata:".to_string());
            for (k, v) in &self.metadata {
                lines.push(format!("  {k}: {v}"));
            }
        }
        lines.join("\n")
    }
}

/// Parses a repeatable `key=value` flag.
pub fn parse_meta_pair(s: &str) -> Result<(String, String), KnowledgeError> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.to_string())),
        _ => Err(KnowledgeError::InvalidEntry(format!("expected key=value, got {s:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn write_face(dir: &Path, file: &str, shade: u8) {
        RgbImage::from_pixel(4, 4, Rgb([shade, 0, 0])).save(dir.join(file)).unwrap();
    }

    #[test]
    fn empty_directory() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_gallery(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn stems_map_to_names_in_order() {
        let dir = tempfile::tempdir().unwrap();
        write_face(dir.path(), "Poppy.png", 10);
        write_face(dir.path(), "Jack_Morton.png", 20);
        let names: Vec<String> = load_gallery(dir.path()).unwrap().into_iter().map(|f| f.character_name).collect();
        assert_eq!(names, vec!["Jack Morton", "Poppy"]);
    }

    #[test]
    fn forty_faces_too_many() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..40 {
            write_face(dir.path(), &format!("Person_{i:02}.png"), i as u8);
        }
        let err = load_gallery(dir.path()).unwrap_err();
        assert!(matches!(err, KnowledgeError::GalleryTooLarge { count: 40 }));
        assert!(err.to_string().contains("32"));
    }

    #[test]
    fn colliding_stems() {
        let dir = tempfile::tempdir().unwrap();
        write_face(dir.path(), "Jack_Morton.png", 1);
        write_face(dir.path(), "Jack Morton.jpg", 2);
        assert!(matches!(load_gallery(dir.path()), Err(KnowledgeError::DuplicateName(n)) if n == "Jack Morton"));
    }

    #[test]
    fn unreadable_skipped_only_if_something_loads() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("Broken.png"), b"not a png").unwrap();
        assert!(matches!(load_gallery(dir.path()), Err(KnowledgeError::UnreadableImage { .. })));
        write_face(dir.path(), "Poppy.png", 5);
        let g = load_gallery(dir.path()).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].character_name, "Poppy");
    }

    #[test]
    fn build_variants() {
        let empty = KnowledgePack::build(None, None, BTreeMap::new(), vec![]).unwrap();
        assert!(empty.is_empty());
        assert_eq!(empty.context_block(), "");

        let ta = KnowledgePack::build(Some("Pilot".into()), Some("A story".into()), BTreeMap::new(), vec![]).unwrap();
        assert!(ta.gallery.is_empty());

        let meta: BTreeMap<String, String> =
            [("season".to_string(), "2".to_string()), ("episode".to_string(), "1".to_string())].into();
        let p = KnowledgePack::build(None, None, meta.clone(), vec![]).unwrap();
        assert_eq!(p.metadata, meta);
    }

    #[test]
    fn serde_round_trip_is_bit_exact() {
        let face = FaceEntry {
            character_name: "Poppy".into(),
            image: RgbImage::from_fn(3, 2, |x, y| Rgb([x as u8 * 40, y as u8 * 90, 7])),
            source_path: "faces/Poppy.png".into(),
        };
        let pack = KnowledgePack::build(Some("T".into()), None, BTreeMap::new(), vec![face]).unwrap();
        let a = serde_json::to_string(&pack).unwrap();
        let back: KnowledgePack = serde_json::from_str(&a).unwrap();
        assert_eq!(back, pack);
        assert_eq!(serde_json::to_string(&back).unwrap(), a);
    }

    #[test]
    fn meta_pairs() {
        assert_eq!(parse_meta_pair("season=2").unwrap(), ("season".into(), "2".into()));
        assert_eq!(parse_meta_pair("note=a=b").unwrap(), ("note".into(), "a=b".into()));
        assert!(parse_meta_pair("novalue").is_err());
    }
}
