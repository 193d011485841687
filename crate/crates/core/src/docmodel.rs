//! Portable document representation shared by every stage: pages with
//! grayscale rasters and positioned text spans, plus the bundle container and
//! its content hash.
//!
//! A bundle is stored either as a directory (`manifest.json` plus one PNG per
//! page) or as a single `.plb` archive whose bytes are exactly the canonical
//! serialization, so the archive file hash equals [`content_hash`].

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use image::GrayImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const BUNDLE_FORMAT: &str = "planloop-bundle/1";
pub const HASH_ALGORITHM: &str = "sha256";
pub const ARCHIVE_EXTENSION: &str = "plb";
const MANIFEST_FILE: &str = "manifest.json";

/// Axis-aligned pixel rectangle, half-open: covers `[x, x+w) × [y, y+h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "[u32; 4]", into = "[u32; 4]")]
pub struct BoundingBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("bounding box must have positive width and height, got {w}x{h}")]
pub struct EmptyBox {
    pub w: u32,
    pub h: u32,
}

impl BoundingBox {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Result<Self, EmptyBox> {
        if w == 0 || h == 0 {
            return Err(EmptyBox { w, h });
        }
        Ok(BoundingBox { x, y, w, h })
    }

    pub fn right(&self) -> u32 {
        self.x + self.w
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.h
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn intersection(&self, other: &BoundingBox) -> Option<BoundingBox> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        (x0 < x1 && y0 < y1).then(|| BoundingBox { x: x0, y: y0, w: x1 - x0, h: y1 - y0 })
    }

    pub fn intersects(&self, other: &BoundingBox) -> bool {
        self.intersection(other).is_some()
    }

    pub fn union(&self, other: &BoundingBox) -> BoundingBox {
        let x0 = self.x.min(other.x);
        let y0 = self.y.min(other.y);
        let x1 = self.right().max(other.right());
        let y1 = self.bottom().max(other.bottom());
        BoundingBox { x: x0, y: y0, w: x1 - x0, h: y1 - y0 }
    }

    /// Intersection over union of pixel areas.
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection(other).map_or(0, |b| b.area());
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.right() <= width && self.bottom() <= height
    }

    /// Clips to a `width × height` extent; `None` if nothing remains.
    pub fn clip(&self, width: u32, height: u32) -> Option<BoundingBox> {
        let page = BoundingBox { x: 0, y: 0, w: width.max(1), h: height.max(1) };
        self.intersection(&page)
    }
}

impl TryFrom<[u32; 4]> for BoundingBox {
    type Error = EmptyBox;
    fn try_from(v: [u32; 4]) -> Result<Self, EmptyBox> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [u32; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{} {}x{})", self.x, self.y, self.w, self.h)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSpan {
    pub span_id: String,
    pub text: String,
    pub page_index: u32,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Page {
    pub index: u32,
    pub width: u32,
    pub height: u32,
    pub image: GrayImage,
    pub spans: Vec<TextSpan>,
}

impl Page {
    /// A white page with no spans.
    pub fn blank(index: u32, width: u32, height: u32) -> Self {
        Page { index, width, height, image: GrayImage::from_pixel(width, height, image::Luma([255])), spans: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DocumentBundle {
    pub doc_id: String,
    pub pages: Vec<Page>,
    pub metadata: BTreeMap<String, String>,
    pub provenance: String,
}

/// SHA-256 digest of a canonical serialization.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentHash(pub [u8; 32]);

impl ContentHash {
    pub fn of_bytes(bytes: &[u8]) -> Self {
        ContentHash(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(text: &str) -> Option<Self> {
        // Only the canonical lowercase form is accepted.
        if text.len() != 64 || text.bytes().any(|b| b.is_ascii_uppercase()) {
            return None;
        }
        let bytes = hex::decode(text).ok()?;
        Some(ContentHash(bytes.try_into().ok()?))
    }
}

impl fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentHash({})", self.to_hex())
    }
}

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for ContentHash {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ContentHash {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        ContentHash::from_hex(&text).ok_or_else(|| serde::de::Error::custom("expected 64 lowercase hex digits"))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed bundle container: {0}")]
    Malformed(String),
    #[error("invariant violation{}{}: {message}", page.map(|p| format!(" on page {p}")).unwrap_or_default(), span.as_ref().map(|s| format!(" in span {s}")).unwrap_or_default())]
    Invariant { page: Option<u32>, span: Option<String>, message: String },
}

impl BundleError {
    fn io(path: &Path, source: io::Error) -> Self {
        BundleError::Io { path: path.to_path_buf(), source }
    }

    fn invariant(page: Option<u32>, span: Option<&str>, message: impl Into<String>) -> Self {
        BundleError::Invariant { page, span: span.map(str::to_string), message: message.into() }
    }
}

impl DocumentBundle {
    /// Checks every structural invariant, reporting the first violation.
    pub fn validate(&self) -> Result<(), BundleError> {
        if self.doc_id.is_empty() {
            return Err(BundleError::invariant(None, None, "doc_id is empty"));
        }
        let mut ids = HashSet::new();
        for (i, page) in self.pages.iter().enumerate() {
            let pi = Some(page.index);
            if page.index as usize != i {
                return Err(BundleError::invariant(pi, None, format!("page index {} at position {i}; indices must be contiguous from 0", page.index)));
            }
            if page.width == 0 || page.height == 0 {
                return Err(BundleError::invariant(pi, None, "page has zero extent"));
            }
            if page.image.width() != page.width || page.image.height() != page.height {
                return Err(BundleError::invariant(
                    pi,
                    None,
                    format!("raster is {}x{} but page declares {}x{}", page.image.width(), page.image.height(), page.width, page.height),
                ));
            }
            for span in &page.spans {
                let sid = Some(span.span_id.as_str());
                if span.span_id.is_empty() {
                    return Err(BundleError::invariant(pi, None, "span with empty id"));
                }
                if !ids.insert(span.span_id.as_str()) {
                    return Err(BundleError::invariant(pi, sid, "duplicate span id"));
                }
                if span.text.is_empty() {
                    return Err(BundleError::invariant(pi, sid, "span text is empty"));
                }
                if span.page_index != page.index {
                    return Err(BundleError::invariant(pi, sid, format!("span claims page {}", span.page_index)));
                }
                if span.bbox.w == 0 || span.bbox.h == 0 {
                    return Err(BundleError::invariant(pi, sid, "span bbox is empty"));
                }
                if !span.bbox.fits_within(page.width, page.height) {
                    return Err(BundleError::invariant(pi, sid, format!("span bbox {} exceeds page extent {}x{}", span.bbox, page.width, page.height)));
                }
            }
        }
        Ok(())
    }

    pub fn page(&self, index: u32) -> Option<&Page> {
        self.pages.get(index as usize)
    }

    pub fn spans(&self) -> impl Iterator<Item = &TextSpan> {
        self.pages.iter().flat_map(|p| p.spans.iter())
    }

    pub fn find_span(&self, span_id: &str) -> Option<&TextSpan> {
        self.spans().find(|s| s.span_id == span_id)
    }

    /// Writes the canonical serialization.
    pub fn write_canonical<W: Write>(&self, out: &mut W) -> io::Result<()> {
        fn lp<W: Write>(out: &mut W, text: &str) -> io::Result<()> {
            write!(out, "{}:", text.len())?;
            out.write_all(text.as_bytes())
        }
        writeln!(out, "{BUNDLE_FORMAT} {HASH_ALGORITHM}")?;
        out.write_all(b"doc ")?;
        lp(out, &self.doc_id)?;
        out.write_all(b"\nprovenance ")?;
        lp(out, &self.provenance)?;
        writeln!(out, "\nmetadata {}", self.metadata.len())?;
        for (k, v) in &self.metadata {
            lp(out, k)?;
            out.write_all(b" ")?;
            lp(out, v)?;
            out.write_all(b"\n")?;
        }
        writeln!(out, "pages {}", self.pages.len())?;
        for page in &self.pages {
            writeln!(out, "page {} {} {} {}", page.index, page.width, page.height, page.spans.len())?;
            for span in &page.spans {
                out.write_all(b"span ")?;
                lp(out, &span.span_id)?;
                out.write_all(b" ")?;
                lp(out, &span.text)?;
                let b = span.bbox;
                writeln!(out, " {} {} {} {}", b.x, b.y, b.w, b.h)?;
            }
            let raw = page.image.as_raw();
            writeln!(out, "raster {}", raw.len())?;
            out.write_all(raw)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_canonical(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Parses the canonical serialization (the `.plb` archive format).
    pub fn from_canonical(bytes: &[u8]) -> Result<Self, BundleError> {
        let mut r = Reader { bytes, pos: 0 };
        let header = r.line()?;
        if header != format!("{BUNDLE_FORMAT} {HASH_ALGORITHM}") {
            return Err(BundleError::Malformed(format!("unsupported header {header:?}")));
        }
        r.keyword("doc ")?;
        let doc_id = r.prefixed()?;
        r.newline()?;
        r.keyword("provenance ")?;
        let provenance = r.prefixed()?;
        r.newline()?;
        r.keyword("metadata ")?;
        let count = r.number_line()?;
        let mut metadata = BTreeMap::new();
        for _ in 0..count {
            let k = r.prefixed()?;
            r.keyword(" ")?;
            let v = r.prefixed()?;
            r.newline()?;
            metadata.insert(k, v);
        }
        r.keyword("pages ")?;
        let page_count = r.number_line()?;
        let mut pages = Vec::with_capacity(page_count.min(4096) as usize);
        for _ in 0..page_count {
            let line = r.line()?;
            let nums = parse_fields(&line, "page", 4)?;
            let (index, width, height, nspans) = (nums[0] as u32, nums[1] as u32, nums[2] as u32, nums[3]);
            let mut spans = Vec::with_capacity(nspans.min(65536) as usize);
            for _ in 0..nspans {
                r.keyword("span ")?;
                let span_id = r.prefixed()?;
                r.keyword(" ")?;
                let text = r.prefixed()?;
                let rest = r.line()?;
                let nums = parse_fields(rest.trim_start(), "", 4)?;
                let bbox = BoundingBox { x: nums[0] as u32, y: nums[1] as u32, w: nums[2] as u32, h: nums[3] as u32 };
                spans.push(TextSpan { span_id, text, page_index: index, bbox });
            }
            r.keyword("raster ")?;
            let len = r.number_line()? as usize;
            if len != width as usize * height as usize {
                return Err(BundleError::invariant(Some(index), None, format!("raster has {len} bytes for a {width}x{height} page")));
            }
            let raw = r.take(len)?.to_vec();
            r.newline()?;
            let image = GrayImage::from_raw(width, height, raw).ok_or_else(|| BundleError::Malformed("raster size".into()))?;
            pages.push(Page { index, width, height, image, spans });
        }
        if r.pos != bytes.len() {
            return Err(BundleError::Malformed("trailing bytes after last page".into()));
        }
        let bundle = DocumentBundle { doc_id, pages, metadata, provenance };
        bundle.validate()?;
        Ok(bundle)
    }
}

fn parse_fields(line: &str, keyword: &str, n: usize) -> Result<Vec<u64>, BundleError> {
    let mut parts = line.split(' ');
    if !keyword.is_empty() && parts.next() != Some(keyword) {
        return Err(BundleError::Malformed(format!("expected {keyword:?} record, got {line:?}")));
    }
    let nums: Vec<u64> = parts.map(|p| p.parse::<u64>()).collect::<Result<_, _>>().map_err(|_| BundleError::Malformed(format!("bad integers in {line:?}")))?;
    if nums.len() != n || nums.iter().any(|&v| v > u32::MAX as u64) {
        return Err(BundleError::Malformed(format!("expected {n} integers in {line:?}")));
    }
    Ok(nums)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn eof() -> BundleError {
        BundleError::Malformed("unexpected end of archive".into())
    }

    fn take(&mut self, n: usize) -> Result<&[u8], BundleError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(Self::eof)?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn line(&mut self) -> Result<String, BundleError> {
        let rest = &self.bytes[self.pos..];
        let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(Self::eof)?;
        let text = std::str::from_utf8(&rest[..nl]).map_err(|_| BundleError::Malformed("non-UTF-8 record".into()))?.to_string();
        self.pos += nl + 1;
        Ok(text)
    }

    fn keyword(&mut self, kw: &str) -> Result<(), BundleError> {
        if self.take(kw.len())? != kw.as_bytes() {
            return Err(BundleError::Malformed(format!("expected {kw:?} at byte {}", self.pos - kw.len())));
        }
        Ok(())
    }

    fn newline(&mut self) -> Result<(), BundleError> {
        self.keyword("\n")
    }

    fn number_line(&mut self) -> Result<u64, BundleError> {
        let line = self.line()?;
        line.parse().map_err(|_| BundleError::Malformed(format!("expected integer, got {line:?}")))
    }

    fn prefixed(&mut self) -> Result<String, BundleError> {
        let rest = &self.bytes[self.pos..];
        let colon = rest.iter().take(21).position(|&b| b == b':').ok_or_else(|| BundleError::Malformed("missing length prefix".into()))?;
        let len_text = std::str::from_utf8(&rest[..colon]).ok().filter(|t| !t.is_empty() && t.bytes().all(|b| b.is_ascii_digit()));
        let len: usize = len_text.and_then(|t| t.parse().ok()).ok_or_else(|| BundleError::Malformed("bad length prefix".into()))?;
        self.pos += colon + 1;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| BundleError::Malformed("non-UTF-8 text".into()))
    }
}

struct HashWriter(Sha256);

impl Write for HashWriter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }
    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// Digest over the canonical serialization.
pub fn content_hash(bundle: &DocumentBundle) -> ContentHash {
    let mut w = HashWriter(Sha256::new());
    bundle.write_canonical(&mut w).expect("hashing cannot fail");
    ContentHash(w.0.finalize().into())
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    hash_algorithm: String,
    doc_id: String,
    provenance: String,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    pages: Vec<ManifestPage>,
}

#[derive(Serialize, Deserialize)]
struct ManifestPage {
    index: u32,
    width: u32,
    height: u32,
    image: String,
    spans: Vec<ManifestSpan>,
}

#[derive(Serialize, Deserialize)]
struct ManifestSpan {
    id: String,
    text: String,
    bbox: [u32; 4],
}

fn page_file_name(index: u32) -> String {
    format!("page-{index:04}.png")
}

fn is_archive(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == ARCHIVE_EXTENSION)
}

/// Loads and validates a bundle from a directory or a `.plb` archive.
pub fn load_bundle(path: &Path) -> Result<DocumentBundle, BundleError> {
    if path.is_file() {
        let bytes = fs::read(path).map_err(|e| BundleError::io(path, e))?;
        return DocumentBundle::from_canonical(&bytes);
    }
    let manifest_path = path.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| BundleError::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| BundleError::Malformed(format!("manifest: {e}")))?;
    if manifest.format != BUNDLE_FORMAT {
        return Err(BundleError::Malformed(format!("unsupported format {:?}", manifest.format)));
    }
    if manifest.hash_algorithm != HASH_ALGORITHM {
        return Err(BundleError::Malformed(format!("unsupported hash algorithm {:?}", manifest.hash_algorithm)));
    }
    let mut pages = Vec::with_capacity(manifest.pages.len());
    for mp in manifest.pages {
        if mp.image.contains(['/', '\\']) || mp.image.starts_with('.') {
            return Err(BundleError::Malformed(format!("page image name {:?} must be a plain file name", mp.image)));
        }
        let img_path = path.join(&mp.image);
        let bytes = fs::read(&img_path).map_err(|e| BundleError::io(&img_path, e))?;
        let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|e| BundleError::Malformed(format!("{}: {e}", mp.image)))?;
        if decoded.color() != image::ColorType::L8 {
            return Err(BundleError::invariant(Some(mp.index), None, format!("raster {} is not 8-bit grayscale", mp.image)));
        }
        let mut spans = Vec::with_capacity(mp.spans.len());
        for s in mp.spans {
            let bbox = BoundingBox::try_from(s.bbox).map_err(|e| BundleError::invariant(Some(mp.index), Some(&s.id), e.to_string()))?;
            spans.push(TextSpan { span_id: s.id, text: s.text, page_index: mp.index, bbox });
        }
        pages.push(Page { index: mp.index, width: mp.width, height: mp.height, image: decoded.into_luma8(), spans });
    }
    let bundle = DocumentBundle { doc_id: manifest.doc_id, pages, metadata: manifest.metadata, provenance: manifest.provenance };
    bundle.validate()?;
    Ok(bundle)
}

/// Writes the bundle and returns its content hash. A path ending in `.plb`
/// produces a single archive; anything else is treated as a directory.
pub fn save_bundle(bundle: &DocumentBundle, path: &Path) -> Result<ContentHash, BundleError> {
    bundle.validate()?;
    if is_archive(path) {
        let bytes = bundle.canonical_bytes();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| BundleError::io(parent, e))?;
        }
        fs::write(path, &bytes).map_err(|e| BundleError::io(path, e))?;
        return Ok(ContentHash::of_bytes(&bytes));
    }
    fs::create_dir_all(path).map_err(|e| BundleError::io(path, e))?;
    let manifest = Manifest {
        format: BUNDLE_FORMAT.into(),
        hash_algorithm: HASH_ALGORITHM.into(),
        doc_id: bundle.doc_id.clone(),
        provenance: bundle.provenance.clone(),
        metadata: bundle.metadata.clone(),
        pages: bundle
            .pages
            .iter()
            .map(|p| ManifestPage {
                index: p.index,
                width: p.width,
                height: p.height,
                image: page_file_name(p.index),
                spans: p.spans.iter().map(|s| ManifestSpan { id: s.span_id.clone(), text: s.text.clone(), bbox: s.bbox.into() }).collect(),
            })
            .collect(),
    };
    for page in &bundle.pages {
        let img_path = path.join(page_file_name(page.index));
        page.image.save_with_format(&img_path, image::ImageFormat::Png).map_err(|e| BundleError::Malformed(format!("{}: {e}", img_path.display())))?;
    }
    let manifest_path = path.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, json).map_err(|e| BundleError::io(&manifest_path, e))?;
    Ok(content_hash(bundle))
}

/// Two spans share a line when their vertical overlap is at least half the
/// shorter height.
pub fn same_line(a: &BoundingBox, b: &BoundingBox) -> bool {
    let top = a.y.max(b.y);
    let bottom = a.bottom().min(b.bottom());
    if bottom <= top {
        return false;
    }
    2 * (bottom - top) >= a.h.min(b.h)
}

/// Separators tried when joining adjacent spans of a line.
pub const JOIN_SEPARATORS: [&str; 2] = ["", " "];

/// The characters `[start, end)` of one span that a hit covers.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HitPiece {
    pub span_id: String,
    pub start: usize,
    pub end: usize,
}

/// One occurrence of a needle. `covered` lists the spans the match touches in
/// reading order; it has more than one entry for matches that straddle
/// adjacent spans.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TextHit {
    pub page_index: u32,
    pub span_id: String,
    pub char_offset: usize,
    pub covered: Vec<HitPiece>,
}

impl TextHit {
    pub fn covered_ids(&self) -> Vec<&str> {
        self.covered.iter().map(|p| p.span_id.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("search needle is empty")]
pub struct EmptyNeedle;

/// For each span on a page, the index of the next span to its right on the
/// same line, if any.
pub fn line_successors(spans: &[TextSpan]) -> Vec<Option<usize>> {
    (0..spans.len())
        .map(|i| {
            let a = &spans[i].bbox;
            (0..spans.len())
                .filter(|&j| j != i)
                .filter(|&j| {
                    let b = &spans[j].bbox;
                    same_line(a, b) && (b.x > a.x || (b.x == a.x && j > i))
                })
                .min_by_key(|&j| (spans[j].bbox.x, j))
        })
        .collect()
}

fn match_at(hay: &[char], at: usize, needle: &[char]) -> bool {
    hay.len() >= at + needle.len() && hay[at..at + needle.len()] == *needle
}

/// Reports every occurrence of `needle` inside a span, and every occurrence
/// across a run of adjacent same-line spans joined by one of
/// [`JOIN_SEPARATORS`]. Cross-span matches start and end on span characters.
pub fn find_text_occurrences(bundle: &DocumentBundle, needle: &str) -> Result<Vec<TextHit>, EmptyNeedle> {
    let needle: Vec<char> = needle.chars().collect();
    if needle.is_empty() {
        return Err(EmptyNeedle);
    }
    let mut hits = Vec::new();
    for page in &bundle.pages {
        let chars: Vec<Vec<char>> = page.spans.iter().map(|s| s.text.chars().collect()).collect();
        for (i, span) in page.spans.iter().enumerate() {
            let text = &chars[i];
            for off in 0..text.len() {
                if match_at(text, off, &needle) {
                    hits.push(TextHit { page_index: page.index, span_id: span.span_id.clone(), char_offset: off, covered: vec![HitPiece { span_id: span.span_id.clone(), start: off, end: off + needle.len() }] });
                }
            }
        }
        let next = line_successors(&page.spans);
        let mut seen = HashSet::new();
        for start in 0..page.spans.len() {
            if next[start].is_none() {
                continue;
            }
            for sep in JOIN_SEPARATORS {
                let sep: Vec<char> = sep.chars().collect();
                // Joined text plus, per char, the owning span (None for separators).
                let mut joined: Vec<char> = chars[start].clone();
                let mut owner: Vec<Option<(usize, usize)>> = (0..chars[start].len()).map(|c| Some((start, c))).collect();
                let mut cur = start;
                let want = chars[start].len() + needle.len();
                while joined.len() < want {
                    let Some(n) = next[cur] else { break };
                    joined.extend(&sep);
                    owner.extend(std::iter::repeat_n(None, sep.len()));
                    joined.extend(&chars[n]);
                    owner.extend((0..chars[n].len()).map(|c| Some((n, c))));
                    cur = n;
                }
                for off in 0..chars[start].len() {
                    let end = off + needle.len();
                    if end > joined.len() || !match_at(&joined, off, &needle) {
                        continue;
                    }
                    let Some((last, _)) = owner[end - 1] else { continue };
                    if last == start {
                        continue;
                    }
                    let mut covered: Vec<HitPiece> = Vec::new();
                    for &(k, c) in owner[off..end].iter().flatten() {
                        match covered.last_mut() {
                            Some(p) if p.span_id == page.spans[k].span_id => p.end = c + 1,
                            _ => covered.push(HitPiece { span_id: page.spans[k].span_id.clone(), start: c, end: c + 1 }),
                        }
                    }
                    let hit = TextHit { page_index: page.index, span_id: page.spans[start].span_id.clone(), char_offset: off, covered };
                    if seen.insert(hit.clone()) {
                        hits.push(hit);
                    }
                }
            }
        }
    }
    Ok(hits)
}

/// Plain-text view of a bundle: span texts in canonical order, joined by
/// newlines, with the character interval each span occupies.
#[derive(Debug, Clone)]
pub struct DocumentText {
    pub text: String,
    pub spans: Vec<(String, usize, usize)>,
}

impl DocumentText {
    pub fn of(bundle: &DocumentBundle) -> Self {
        let mut text = String::new();
        let mut offset = 0usize;
        let mut spans = Vec::new();
        for span in bundle.spans() {
            if !text.is_empty() {
                text.push('\n');
                offset += 1;
            }
            let len = span.text.chars().count();
            spans.push((span.span_id.clone(), offset, offset + len));
            text.push_str(&span.text);
            offset += len;
        }
        DocumentText { text, spans }
    }

    /// Character interval `[start, end)` of `span_id`.
    pub fn span_range(&self, span_id: &str) -> Option<(usize, usize)> {
        self.spans.iter().find(|(id, _, _)| id == span_id).map(|(_, s, e)| (*s, *e))
    }

    /// Character interval of the first occurrence of `value`, preferring
    /// occurrences inside the listed spans.
    pub fn locate(&self, value: &str, prefer_spans: &[String]) -> Option<(usize, usize)> {
        let needle: Vec<char> = value.chars().collect();
        if needle.is_empty() {
            return None;
        }
        let chars: Vec<char> = self.text.chars().collect();
        let found: Vec<usize> = (0..chars.len()).filter(|&o| match_at(&chars, o, &needle)).collect();
        let len = needle.len();
        for id in prefer_spans {
            if let Some((start, end)) = self.span_range(id) {
                if let Some(&o) = found.iter().find(|&&o| o >= start && o + len <= end) {
                    return Some((o, o + len));
                }
            }
        }
        found.first().map(|&o| (o, o + len))
    }
}
