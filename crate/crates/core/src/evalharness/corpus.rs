//! Seeded synthetic site-plan corpus with gold annotations.

use std::collections::BTreeMap;

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{CharSpan, PiiRecord};
use crate::docmodel::{BoundingBox, DocumentBundle, DocumentText, Page, TextSpan};
use crate::extraction::normalize_date;
use crate::pii::{anchor_locations, PiiCategory};
use crate::vischeck::{builtin_north_arrow, right_angle_rotations, RED_LINE_LABEL};

pub const PAGE_W: u32 = 1000;
pub const PAGE_H: u32 = 800;
pub const CHAR_W: u32 = 10;
pub const LINE_H: u32 = 16;
pub const NORTH_LABEL: &str = "north_point";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldAnnotation {
    pub doc_id: String,
    /// Character spans in [`DocumentText`] coordinates.
    pub field_spans: BTreeMap<String, Vec<CharSpan>>,
    /// Normalized field values.
    pub field_values: BTreeMap<String, String>,
    /// Field text as it appears in the document, with its span id.
    pub field_raw: BTreeMap<String, (String, String)>,
    pub pii_items: Vec<PiiRecord>,
    /// Label to (page index, box).
    pub symbol_boxes: BTreeMap<String, Vec<(u32, BoundingBox)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub seed: u64,
    pub docs: Vec<DocumentBundle>,
    pub gold: Vec<GoldAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("a corpus needs at least one document")]
pub struct EmptyCorpus;

const FIRST: &[&str] = &[
    "John", "Sarah", "David", "Emma", "Michael", "Olivia", "James", "Amelia", "Robert", "Grace", "Thomas", "Chloe", "Daniel", "Hannah", "Peter", "Lucy", "Andrew", "Megan", "Simon",
    "Rachel", "Mark", "Laura", "Paul", "Helen", "Rajesh", "Priya", "Tomasz", "Agnieszka", "Oluwaseun", "Siobhan",
];
const LAST: &[&str] = &[
    "Smith", "Jones", "Taylor", "Brown", "Williams", "Wilson", "Johnson", "Davies", "Robinson", "Wright", "Thompson", "Evans", "Walker", "White", "Roberts", "Green", "Hall", "Wood",
    "Jackson", "Clarke", "Patel", "Khan", "Nowak", "Okafor", "O'Brien", "Fitzgerald", "Harrington", "Ashworth",
];
const HONORIFICS: &[&str] = &["Mr", "Mrs", "Ms", "Dr"];
const NAME_LABELS: &[&str] = &["Applicant", "Agent", "Contact", "Owner"];
const STREET_NAMES: &[&str] = &["Mill", "Church", "Station", "Orchard", "Victoria", "Queens", "Chapel", "Manor", "Park", "High", "Kings", "Meadow", "Windmill", "Bridge"];
const STREET_TYPES: &[&str] = &["Road", "Lane", "Street", "Avenue", "Close", "Drive", "Way", "Crescent", "Terrace", "Grove"];
const HOUSE_NAMES: &[&str] = &["Rose Cottage", "The Old Barn", "Holly Lodge", "Ivy Farm", "Beech Barn", "The Granary", "Willow End", "Oak Tree Farm"];
const TOWNS: &[&str] = &["Bristol", "Stroud", "Bath", "Swindon", "Oxford", "Reading", "Cheltenham", "Westbridge"];
const AREAS: &[&str] = &["BS", "GL", "BA", "SN", "OX", "RG", "SW", "N", "E", "M", "LS"];
const UNIT_LETTERS: &[u8] = b"ABDEFGHJLNPQRSTUWXYZ";
const DOMAINS: &[&str] = &["example.com", "example.org", "mail.example.co.uk", "example.net"];
const PROPOSALS: &[&str] = &[
    "Single Storey Rear Extension",
    "Two Storey Side Extension",
    "Change of Use to Residential",
    "Erection of Detached Dwelling",
    "Loft Conversion with Rear Dormer",
    "Replacement Garage and Workshop",
    "Installation of Solar Panels",
];
const SITES: &[&str] = &["Land West of Mill Farm", "The Old Rectory", "Plot 3 Orchard Field", "Former Depot Site", "Land Adjacent to Chapel Fields", "Rear of Market House"];
const SHORT_HEADERS: &[&str] = &["Borough of Westbridge", "Westbridge Planning", "District Council Planning"];
const LONG_HEADERS: &[&str] = &[
    "Westbridge Borough Council - Development Management and Building Control Services",
    "Stroud Valley District Council Planning Department - Site Location Plan Submission",
];
const MONTHS: &[&str] = &["January", "February", "March", "April", "May", "June", "July", "August", "September", "October", "November", "December"];

fn pick<'a>(rng: &mut impl Rng, items: &[&'a str]) -> &'a str {
    items[rng.random_range(0..items.len())]
}

/// Probability draw from integer sampling only, so streams stay portable.
pub(crate) fn chance(rng: &mut impl Rng, per_mille: u32) -> bool {
    rng.random_range(0..1000u32) < per_mille
}

fn ordinal_suffix(d: u32) -> &'static str {
    match (d % 10, d % 100) {
        (_, 11..=13) => "th",
        (1, _) => "st",
        (2, _) => "nd",
        (3, _) => "rd",
        _ => "th",
    }
}

/// A date in one of the written forms the normalizer understands.
fn written_date(rng: &mut impl Rng, year_lo: i32) -> String {
    let (y, m, d) = (rng.random_range(year_lo..year_lo + 3), rng.random_range(1..=12u32), rng.random_range(1..=28u32));
    let month = MONTHS[m as usize - 1];
    match rng.random_range(0..6u32) {
        0 => format!("{d} {month} {y}"),
        1 => format!("{d:02}/{m:02}/{y}"),
        2 => format!("{y}-{m:02}-{d:02}"),
        3 => format!("{d}{} {month} {y}", ordinal_suffix(d)),
        4 => format!("{month} {d}, {y}"),
        _ => format!("{d}-{}-{y}", &month[..3]),
    }
}

fn postcode(rng: &mut impl Rng) -> String {
    let area = pick(rng, AREAS);
    let district = rng.random_range(1..=20u32);
    let sector = rng.random_range(1..=9u32);
    let u1 = UNIT_LETTERS[rng.random_range(0..UNIT_LETTERS.len())] as char;
    let u2 = UNIT_LETTERS[rng.random_range(0..UNIT_LETTERS.len())] as char;
    format!("{area}{district} {sector}{u1}{u2}")
}

/// (line text, PII value) for one generated item.
fn pii_line(rng: &mut impl Rng, category: PiiCategory) -> (String, String) {
    match category {
        PiiCategory::Names => {
            let value = format!("{} {}", pick(rng, FIRST), pick(rng, LAST));
            let label = pick(rng, NAME_LABELS);
            if chance(rng, 500) {
                (format!("{label}: {} {value}", pick(rng, HONORIFICS)), value)
            } else {
                (format!("{label}: {value}"), value)
            }
        }
        PiiCategory::Addresses => {
            let town = pick(rng, TOWNS);
            let pc = postcode(rng);
            let value = if chance(rng, 650) {
                format!("{} {} {}, {town} {pc}", rng.random_range(1..=180u32), pick(rng, STREET_NAMES), pick(rng, STREET_TYPES))
            } else {
                format!("{}, {town} {pc}", pick(rng, HOUSE_NAMES))
            };
            (format!("Site Address: {value}"), value)
        }
        PiiCategory::Emails => {
            let (f, l) = (pick(rng, FIRST).to_lowercase(), pick(rng, LAST).to_lowercase().replace('\'', ""));
            let value = format!("{f}.{l}@{}", pick(rng, DOMAINS));
            (format!("Email: {value}"), value)
        }
        _ => {
            let n = rng.random_range(0..1000u32);
            let value = match rng.random_range(0..4u32) {
                0 => format!("01632 960{n:03}"),
                1 => format!("020 7946 0{n:03}"),
                2 => format!("+44 1632 960{n:03}"),
                _ => format!("07700 900{n:03}"),
            };
            (format!("Tel: {value}"), value)
        }
    }
}

/// Renders a span as one short vertical bar per non-space character.
fn draw_text_bars(img: &mut GrayImage, span: &TextSpan) {
    for (i, c) in span.text.chars().enumerate() {
        if c == ' ' {
            continue;
        }
        let x0 = span.bbox.x + i as u32 * CHAR_W + 3;
        for y in span.bbox.y + 3..span.bbox.y + LINE_H - 3 {
            for x in x0..x0 + 2 {
                img.put_pixel(x, y, Luma([40]));
            }
        }
    }
}

fn draw_rect(img: &mut GrayImage, b: &BoundingBox, thickness: u32) {
    for t in 0..thickness {
        for x in b.x..b.right() {
            img.put_pixel(x, b.y + t, Luma([0]));
            img.put_pixel(x, b.bottom() - 1 - t, Luma([0]));
        }
        for y in b.y..b.bottom() {
            img.put_pixel(b.x + t, y, Luma([0]));
            img.put_pixel(b.right() - 1 - t, y, Luma([0]));
        }
    }
}

fn blit(img: &mut GrayImage, src: &GrayImage, x: u32, y: u32) {
    for (sx, sy, p) in src.enumerate_pixels() {
        img.put_pixel(x + sx, y + sy, *p);
    }
}

pub fn doc_id(seed: u64, index: usize) -> String {
    format!("syn-{seed}-{index:04}")
}

/// Per-document generator stream; documents are independent of each other.
pub fn doc_rng(seed: u64, index: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((index as u64) << 8 | purpose);
    rng
}

fn generate_doc(seed: u64, index: usize) -> (DocumentBundle, GoldAnnotation) {
    let mut rng = doc_rng(seed, index, 0);
    let doc_id = doc_id(seed, index);
    let mut lines: Vec<(u32, u32, String)> = Vec::new();

    let header = if chance(&mut rng, 350) { pick(&mut rng, LONG_HEADERS) } else { pick(&mut rng, SHORT_HEADERS) };
    lines.push((40, 20, header.to_string()));
    let title = format!("{} - {}", pick(&mut rng, PROPOSALS), pick(&mut rng, SITES));
    lines.push((40, 60, title.clone()));
    lines.push((40, 100, format!("Application Ref: PA/{}/{:05}", rng.random_range(20..26u32), rng.random_range(0..100_000u32))));

    let n_pii = rng.random_range(0..=5usize);
    let cats = [PiiCategory::Names, PiiCategory::Addresses, PiiCategory::Emails, PiiCategory::Phones];
    let mut pii: Vec<(PiiCategory, String, String)> = Vec::new();
    while pii.len() < n_pii {
        let cat = cats[rng.random_range(0..cats.len())];
        let (line, value) = pii_line(&mut rng, cat);
        if pii.iter().all(|(_, _, v)| !v.contains(&value) && !value.contains(v.as_str())) {
            pii.push((cat, line, value));
        }
    }
    let mut y = 200;
    for (_, line, _) in &pii {
        lines.push((40, y, line.clone()));
        y += 30;
    }
    lines.push((40, y, "Description: see accompanying statement".to_string()));
    y += 30;
    if chance(&mut rng, 400) {
        lines.push((40, y, format!("Printed: {}", written_date(&mut rng, 2019))));
    }

    let date_raw = written_date(&mut rng, 2022);
    let scale_raw = if chance(&mut rng, 500) { "1:1250" } else { "1:2500" };
    lines.push((620, 610, format!("Drawing No. {}/01", rng.random_range(100..10_000u32))));
    lines.push((620, 640, format!("Date: {date_raw}")));
    lines.push((620, 670, format!("Scale {scale_raw}")));

    let mut page = Page::blank(0, PAGE_W, PAGE_H);
    lines.sort_by_key(|&(x, y, _)| (y, x));
    for (k, (x, y, text)) in lines.into_iter().enumerate() {
        let w = CHAR_W * text.chars().count() as u32;
        let span = TextSpan { span_id: format!("p0-s{k:03}"), text, page_index: 0, bbox: BoundingBox { x, y, w, h: LINE_H } };
        draw_text_bars(&mut page.image, &span);
        page.spans.push(span);
    }

    let rect = {
        let x = rng.random_range(650..=760u32);
        let yy = rng.random_range(180..=300u32);
        let w = rng.random_range(120..=970 - x);
        let h = rng.random_range(100..=570 - yy);
        BoundingBox { x, y: yy, w, h }
    };
    draw_rect(&mut page.image, &rect, rng.random_range(2..=3u32));
    if chance(&mut rng, 500) {
        for x in 40..560 {
            page.image.put_pixel(x, 505, Luma([0]));
            page.image.put_pixel(x, 506, Luma([0]));
        }
    }
    let arrow = right_angle_rotations(&builtin_north_arrow())[rng.random_range(0..4usize)].clone();
    let (ax, ay) = (rng.random_range(40..=540u32), rng.random_range(530..=750u32));
    blit(&mut page.image, &arrow, ax, ay);
    let arrow_box = BoundingBox { x: ax, y: ay, w: arrow.width(), h: arrow.height() };

    let bundle = DocumentBundle { doc_id: doc_id.clone(), pages: vec![page], metadata: BTreeMap::new(), provenance: format!("synthetic corpus seed {seed} document {index}") };

    let text = DocumentText::of(&bundle);
    let span_of = |prefix: &str| bundle.pages[0].spans.iter().find(|s| s.text.starts_with(prefix)).expect("line was generated");
    let field_span = |span: &TextSpan, value: &str| {
        let (start, _) = text.span_range(&span.span_id).expect("span is in the text");
        let off = span.text.find(value).expect("value is on its line");
        let off = span.text[..off].chars().count();
        (start + off, start + off + value.chars().count())
    };
    let title_span = bundle.pages[0].spans.iter().find(|s| s.text == title).expect("title line");
    let date_span = span_of("Date: ");
    let scale_span = span_of("Scale ");
    let mut field_spans = BTreeMap::new();
    let mut field_values = BTreeMap::new();
    let mut field_raw = BTreeMap::new();
    for (name, span, raw, norm) in [
        ("Title", title_span, title.clone(), title.clone()),
        ("Date", date_span, date_raw.clone(), normalize_date(&date_raw).expect("generated dates parse")),
        ("Scale", scale_span, scale_raw.to_string(), scale_raw.to_string()),
    ] {
        field_spans.insert(name.to_string(), vec![field_span(span, &raw)]);
        field_values.insert(name.to_string(), norm);
        field_raw.insert(name.to_string(), (raw, span.span_id.clone()));
    }
    let pii_items = pii.iter().map(|(cat, _, value)| PiiRecord { category: *cat, value: value.clone(), locations: anchor_locations(&bundle, value) }).collect();
    let mut symbol_boxes = BTreeMap::new();
    symbol_boxes.insert(NORTH_LABEL.to_string(), vec![(0, arrow_box)]);
    symbol_boxes.insert(RED_LINE_LABEL.to_string(), vec![(0, rect)]);
    let gold = GoldAnnotation { doc_id, field_spans, field_values, field_raw, pii_items, symbol_boxes };
    (bundle, gold)
}

/// Generates `n_docs` single-page documents. Each has a title, a date, a
/// scale, up to five PII items, a north arrow at a right-angle rotation and
/// a boundary rectangle. Output depends only on `seed` and `n_docs`.
pub fn generate_synthetic_corpus(seed: u64, n_docs: usize) -> Result<SyntheticCorpus, EmptyCorpus> {
    if n_docs == 0 {
        return Err(EmptyCorpus);
    }
    let (docs, gold) = (0..n_docs).map(|i| generate_doc(seed, i)).unzip();
    Ok(SyntheticCorpus { seed, docs, gold })
}
