//! Glyph datasets on disk: `<root>/<font_name>/<hex_codepoint>.png`.
//!
//! Images are decoded to single-channel luminance in `[0, 1]`. Fonts may have
//! partial coverage; a missing file is simply an absent glyph.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::mask::Mask;

/// Default binarization threshold.
pub const DEFAULT_THRESHOLD: f32 = 0.5;

/// A single-channel glyph bitmap with its font and character ids.
#[derive(Clone, Debug, PartialEq)]
pub struct GlyphImage {
    pixels: Vec<f32>,
    height: usize,
    width: usize,
    pub font_id: usize,
    pub char_id: usize,
}

impl GlyphImage {
    /// Builds a glyph, clamping values into `[0, 1]`. Panics if the pixel
    /// count does not match `height * width`.
    pub fn new(height: usize, width: usize, mut pixels: Vec<f32>, font_id: usize, char_id: usize) -> Self {
        assert_eq!(pixels.len(), height * width, "glyph pixel count");
        for p in &mut pixels {
            *p = if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) };
        }
        GlyphImage {
            pixels,
            height,
            width,
            font_id,
            char_id,
        }
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        GlyphImage::new(height, width, vec![value; height * width], 0, 0)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.pixels[r * self.width + c]
    }

    pub fn with_ids(mut self, font_id: usize, char_id: usize) -> Self {
        self.font_id = font_id;
        self.char_id = char_id;
        self
    }

    pub fn diagonal(&self) -> f64 {
        ((self.height * self.height + self.width * self.width) as f64).sqrt()
    }

    pub fn from_mask(mask: &Mask) -> Self {
        let px = mask.as_slice().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        GlyphImage::new(mask.rows(), mask.cols(), px, 0, 0)
    }

    /// Decodes a PNG (or any format `image` understands), converting to luminance.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| match source {
            image::ImageError::IoError(e) => Error::io(path, e),
            source => Error::Image {
                path: path.to_path_buf(),
                source,
            },
        })?;
        let luma = img.to_luma8();
        let (w, h) = luma.dimensions();
        let px = luma.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect();
        Ok(GlyphImage::new(h as usize, w as usize, px, 0, 0))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: Vec<u8> = self
            .pixels
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        image::save_buffer(
            path,
            &buf,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::L8,
        )
        .map_err(|source| match source {
            image::ImageError::IoError(e) => Error::io(path, e),
            source => Error::Image {
                path: path.to_path_buf(),
                source,
            },
        })
    }
}

/// Binarizes a glyph. Ink polarity is detected by majority vote of the
/// border pixels: a mostly light border means dark ink.
pub fn binarize(img: &GlyphImage, threshold: f32) -> Mask {
    let (h, w) = (img.height(), img.width());
    let mut light = 0usize;
    let mut total = 0usize;
    for r in 0..h {
        for c in 0..w {
            if r == 0 || c == 0 || r + 1 == h || c + 1 == w {
                total += 1;
                if img.get(r, c) >= threshold {
                    light += 1;
                }
            }
        }
    }
    let dark_ink = 2 * light >= total && total > 0;
    let data = img
        .pixels()
        .iter()
        .map(|&v| if dark_ink { v < threshold } else { v >= threshold })
        .collect();
    Mask::from_vec(h, w, data)
}

/// Fonts, characters, the content font, and the seen/unseen split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FontCatalog {
    pub fonts: Vec<String>,
    pub chars: Vec<u32>,
    pub content_font: usize,
    pub seen: BTreeSet<usize>,
    pub unseen: BTreeSet<usize>,
}

impl FontCatalog {
    pub fn new(fonts: Vec<String>, chars: Vec<u32>, content_font: usize, unseen: BTreeSet<usize>) -> Result<Self> {
        if fonts.is_empty() {
            return Err(Error::Dataset("catalog has no fonts".into()));
        }
        if content_font >= fonts.len() {
            return Err(Error::Dataset(format!("content font id {content_font} out of range")));
        }
        if unseen.contains(&content_font) {
            return Err(Error::Dataset(format!(
                "content font {} must belong to the seen split",
                fonts[content_font]
            )));
        }
        if let Some(&bad) = unseen.iter().find(|&&f| f >= fonts.len()) {
            return Err(Error::Dataset(format!("unseen font id {bad} out of range")));
        }
        let seen = (0..fonts.len()).filter(|f| !unseen.contains(f)).collect();
        Ok(FontCatalog {
            fonts,
            chars,
            content_font,
            seen,
            unseen,
        })
    }

    pub fn n_fonts(&self) -> usize {
        self.fonts.len()
    }

    pub fn n_chars(&self) -> usize {
        self.chars.len()
    }

    pub fn font_id(&self, name: &str) -> Option<usize> {
        self.fonts.iter().position(|f| f == name)
    }

    pub fn char_id(&self, codepoint: u32) -> Option<usize> {
        self.chars.binary_search(&codepoint).ok()
    }

    pub fn char_display(&self, ch: usize) -> String {
        self.chars
            .get(ch)
            .and_then(|&cp| char::from_u32(cp))
            .map_or_else(|| format!("#{ch}"), |c| c.to_string())
    }

    pub fn is_seen(&self, font: usize) -> bool {
        self.seen.contains(&font)
    }

    /// Text manifest, one `<font_name> <seen|unseen>` line per font.
    pub fn split_manifest(&self) -> String {
        let mut out = String::new();
        for (i, name) in self.fonts.iter().enumerate() {
            let tag = if self.unseen.contains(&i) { "unseen" } else { "seen" };
            out.push_str(&format!("{name} {tag}\n"));
        }
        out
    }

    pub fn write_split_manifest(&self, path: &Path) -> Result<()> {
        fs::write(path, self.split_manifest()).map_err(|e| Error::io(path, e))
    }
}

/// Parses a split manifest into the list of unseen font names.
pub fn parse_split_manifest(text: &str) -> Result<Vec<String>> {
    let mut unseen = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (Some(name), Some("unseen"), None) => unseen.push(name.to_string()),
            (Some(_), Some("seen"), None) => {}
            _ => {
                return Err(Error::Dataset(format!(
                    "split manifest line {}: expected `<font_name> <seen|unseen>`",
                    lineno + 1
                )))
            }
        }
    }
    Ok(unseen)
}

/// How to interpret a dataset directory.
#[derive(Clone, Debug, Default)]
pub struct CatalogSpec {
    /// Name of the fixed content font; defaults to the first seen font.
    pub content_font: Option<String>,
    /// Fonts held out from training.
    pub unseen: Vec<String>,
}

impl CatalogSpec {
    pub fn with_manifest(mut self, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.unseen = parse_split_manifest(&text)?;
        Ok(self)
    }
}

/// A loaded dataset: the catalog plus a read-only glyph accessor.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub catalog: FontCatalog,
    glyphs: Vec<Option<GlyphImage>>,
    height: usize,
    width: usize,
}

impl Dataset {
    /// Assembles a dataset from in-memory glyphs indexed `[font][char]`.
    pub fn from_glyphs(catalog: FontCatalog, glyphs: Vec<Vec<Option<GlyphImage>>>) -> Result<Self> {
        if glyphs.len() != catalog.n_fonts() {
            return Err(Error::Dataset("glyph table does not match font count".into()));
        }
        let m = catalog.n_chars();
        let mut flat = Vec::with_capacity(glyphs.len() * m);
        let mut size: Option<(usize, usize)> = None;
        for (f, row) in glyphs.into_iter().enumerate() {
            if row.len() != m {
                return Err(Error::Dataset("glyph table does not match char count".into()));
            }
            for (c, g) in row.into_iter().enumerate() {
                let g = g.map(|g| g.with_ids(f, c));
                if let Some(g) = &g {
                    let dims = (g.height(), g.width());
                    match size {
                        None => size = Some(dims),
                        Some(s) if s != dims => {
                            return Err(Error::Dataset(format!(
                                "glyph ({}, {}) is {}x{} but the dataset is {}x{}",
                                catalog.fonts[f],
                                catalog.char_display(c),
                                dims.0,
                                dims.1,
                                s.0,
                                s.1
                            )))
                        }
                        _ => {}
                    }
                }
                flat.push(g);
            }
        }
        let (height, width) = size.ok_or_else(|| Error::Dataset("dataset contains no glyphs".into()))?;
        Ok(Dataset {
            catalog,
            glyphs: flat,
            height,
            width,
        })
    }

    pub fn glyph(&self, font: usize, ch: usize) -> Option<&GlyphImage> {
        if font >= self.catalog.n_fonts() || ch >= self.catalog.n_chars() {
            return None;
        }
        self.glyphs[font * self.catalog.n_chars() + ch].as_ref()
    }

    pub fn has(&self, font: usize, ch: usize) -> bool {
        self.glyph(font, ch).is_some()
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn glyph_count(&self) -> usize {
        self.glyphs.iter().filter(|g| g.is_some()).count()
    }

    /// Characters available in `font`.
    pub fn chars_of(&self, font: usize) -> Vec<usize> {
        (0..self.catalog.n_chars()).filter(|&c| self.has(font, c)).collect()
    }

    pub fn content_glyph(&self, ch: usize) -> Option<&GlyphImage> {
        self.glyph(self.catalog.content_font, ch)
    }
}

/// Filename stem for a codepoint: at least four uppercase hex digits.
pub fn codepoint_stem(cp: u32) -> String {
    format!("{cp:04X}")
}

fn parse_codepoint(path: &Path) -> Option<u32> {
    let ext = path.extension()?.to_str()?;
    if !ext.eq_ignore_ascii_case("png") {
        return None;
    }
    let stem = path.file_stem()?.to_str()?;
    if stem.len() < 4 || stem.len() > 6 {
        return None;
    }
    u32::from_str_radix(stem, 16).ok()
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

/// Loads `<root>/<font_name>/<hex>.png` into a dataset.
pub fn load_dataset(root: &Path, spec: &CatalogSpec) -> Result<Dataset> {
    let font_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    let mut fonts = Vec::new();
    let mut files: Vec<Vec<(u32, PathBuf)>> = Vec::new();
    let mut codepoints = BTreeSet::new();
    for dir in &font_dirs {
        let mut glyph_files = Vec::new();
        for path in sorted_entries(dir)? {
            if let Some(cp) = parse_codepoint(&path) {
                codepoints.insert(cp);
                glyph_files.push((cp, path));
            }
        }
        if glyph_files.is_empty() {
            continue;
        }
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Dataset(format!("font directory {} is not valid UTF-8", dir.display())))?;
        fonts.push(name.to_string());
        files.push(glyph_files);
    }
    if fonts.is_empty() {
        return Err(Error::NoFonts(root.to_path_buf()));
    }
    let chars: Vec<u32> = codepoints.into_iter().collect();

    let mut unseen = BTreeSet::new();
    for name in &spec.unseen {
        let id = fonts
            .iter()
            .position(|f| f == name)
            .ok_or_else(|| Error::Dataset(format!("split names unknown font {name}")))?;
        unseen.insert(id);
    }
    let content_font = match &spec.content_font {
        Some(name) => fonts
            .iter()
            .position(|f| f == name)
            .ok_or_else(|| Error::Dataset(format!("unknown content font {name}")))?,
        None => (0..fonts.len())
            .find(|f| !unseen.contains(f))
            .ok_or_else(|| Error::Dataset("every font is unseen; no content font available".into()))?,
    };
    let catalog = FontCatalog::new(fonts, chars, content_font, unseen)?;

    let mut table = Vec::with_capacity(files.len());
    for glyph_files in files {
        let mut row = vec![None; catalog.n_chars()];
        for (cp, path) in glyph_files {
            let ch = catalog.char_id(cp).expect("codepoint collected above");
            row[ch] = Some(GlyphImage::load(&path)?);
        }
        table.push(row);
    }
    Dataset::from_glyphs(catalog, table)
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes every glyph of `dataset` back out in the on-disk layout.
pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    let cat = &dataset.catalog;
    for (f, name) in cat.fonts.iter().enumerate() {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (c, &cp) in cat.chars.iter().enumerate() {
            if let Some(g) = dataset.glyph(f, c) {
                g.save_png(&dir.join(format!("{}.png", codepoint_stem(cp))))?;
            }
        }
    }
    Ok(())
}
