//! ModaNet/COCO-style annotation ingestion: record parsing and validation,
//! polygon rasterization, square-pad + resize preprocessing, channel
//! normalization, and horizontal-flip augmentation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxXYWH;
use crate::raster::{bilinear_resize, BinaryMask, ImageTensor};

/// Flat polygon coordinates `[x0, y0, x1, y1, ...]` in pixel units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polygon {
    pub coords: Vec<f64>,
}

impl Polygon {
    pub fn vertex_count(&self) -> usize {
        self.coords.len() / 2
    }

    pub fn vertex(&self, i: usize) -> (f64, f64) {
        (self.coords[2 * i], self.coords[2 * i + 1])
    }

    /// Signed shoelace area (positive for counter-clockwise rings).
    pub fn signed_area(&self) -> f64 {
        let n = self.vertex_count();
        let mut acc = 0.0;
        for i in 0..n {
            let (x0, y0) = self.vertex(i);
            let (x1, y1) = self.vertex((i + 1) % n);
            acc += x0 * y1 - x1 * y0;
        }
        acc / 2.0
    }

    fn validate(&self, annotation_id: i64) -> Result<()> {
        if self.coords.len() % 2 != 0 {
            return Err(Error::Validation {
                annotation_id,
                msg: format!("polygon has odd coordinate count {}", self.coords.len()),
            });
        }
        if self.coords.len() < 6 {
            return Err(Error::Validation {
                annotation_id,
                msg: format!("polygon has {} coordinates, need >= 6", self.coords.len()),
            });
        }
        if self.coords.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::Validation {
                annotation_id,
                msg: "polygon coordinates must be finite and >= 0".into(),
            });
        }
        Ok(())
    }
}

/// One labeled fashion item: box, category, polygons, crowd flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: i64,
    #[serde(rename = "id")]
    pub annotation_id: i64,
    pub bbox: [f64; 4],
    pub category_id: u32,
    #[serde(alias = "iscrowded")]
    pub iscrowd: u8,
    pub segmentation: Vec<Polygon>,
}

impl AnnotationRecord {
    pub fn bbox_xywh(&self) -> BoxXYWH {
        BoxXYWH::new(self.bbox[0], self.bbox[1], self.bbox[2], self.bbox[3])
    }

    fn validate(&self, table: &CategoryTable) -> Result<()> {
        if self.bbox[2] <= 0.0 || self.bbox[3] <= 0.0 {
            return Err(Error::Validation {
                annotation_id: self.annotation_id,
                msg: format!("bbox has non-positive dims [{}, {}]", self.bbox[2], self.bbox[3]),
            });
        }
        if !table.contains(self.category_id) {
            return Err(Error::Validation {
                annotation_id: self.annotation_id,
                msg: format!("unknown category_id {}", self.category_id),
            });
        }
        if self.iscrowd > 1 {
            return Err(Error::Validation {
                annotation_id: self.annotation_id,
                msg: format!("iscrowd must be 0 or 1, got {}", self.iscrowd),
            });
        }
        for poly in &self.segmentation {
            poly.validate(self.annotation_id)?;
        }
        Ok(())
    }
}

/// Map from category id to name; ids are contiguous from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryTable {
    entries: BTreeMap<u32, String>,
}

impl CategoryTable {
    /// The default 13-category fashion table (id 2 is "belt").
    pub fn modanet_default() -> Self {
        let names = [
            "bag", "belt", "boots", "footwear", "outer", "dress", "sunglasses",
            "pants", "top", "shorts", "skirt", "headwear", "scarf_and_tie",
        ];
        CategoryTable {
            entries: names
                .iter()
                .enumerate()
                .map(|(i, n)| (i as u32 + 1, n.to_string()))
                .collect(),
        }
    }

    /// Parse `id<TAB>name` lines.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (id, name) = line.split_once('\t').ok_or_else(|| Error::Parse {
                offset: 0,
                line: lineno + 1,
                msg: "expected id<TAB>name".into(),
            })?;
            let id: u32 = id.trim().parse().map_err(|_| Error::Parse {
                offset: 0,
                line: lineno + 1,
                msg: format!("bad category id {id:?}"),
            })?;
            if entries.insert(id, name.trim().to_string()).is_some() {
                return Err(Error::domain(format!("duplicate category id {id}")));
            }
        }
        let table = CategoryTable { entries };
        table.check_contiguous()?;
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text)
    }

    fn check_contiguous(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::domain("category table is empty"));
        }
        for (expect, id) in self.entries.keys().enumerate() {
            if *id != expect as u32 + 1 {
                return Err(Error::domain("category ids must be contiguous from 1"));
            }
        }
        Ok(())
    }

    pub fn contains(&self, id: u32) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.entries.get(&id).map(String::as_str)
    }

    pub fn count(&self) -> usize {
        self.entries.len()
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.keys().copied()
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum AnnotationDocument {
    Wrapped { annotations: Vec<AnnotationRecord> },
    Bare(Vec<AnnotationRecord>),
}

/// Parse an annotation document (either a bare array or an object with an
/// `annotations` array) and validate every record.
pub fn parse_annotations(bytes: &[u8], table: &CategoryTable) -> Result<Vec<AnnotationRecord>> {
    let doc: AnnotationDocument = serde_json::from_slice(bytes).map_err(|e| {
        let line = e.line();
        let col = e.column();
        let offset = bytes
            .split(|b| *b == b'\n')
            .take(line.saturating_sub(1))
            .map(|l| l.len() + 1)
            .sum::<usize>()
            + col.saturating_sub(1);
        Error::Parse { offset, line, msg: e.to_string() }
    })?;
    let records = match doc {
        AnnotationDocument::Wrapped { annotations } => annotations,
        AnnotationDocument::Bare(records) => records,
    };
    for rec in &records {
        rec.validate(table)?;
    }
    Ok(records)
}

/// Serialize records back to the wrapped document form.
pub fn serialize_annotations(records: &[AnnotationRecord]) -> String {
    let doc = serde_json::json!({ "annotations": records });
    serde_json::to_string_pretty(&doc).expect("annotation records are always serializable")
}

/// Group records by image id, preserving record order within each image.
pub fn group_by_image(records: &[AnnotationRecord]) -> BTreeMap<i64, Vec<&AnnotationRecord>> {
    let mut map: BTreeMap<i64, Vec<&AnnotationRecord>> = BTreeMap::new();
    for rec in records {
        map.entry(rec.image_id).or_default().push(rec);
    }
    map
}

/// Records whose bbox does not tightly bound its polygons, as
/// `(annotation_id, message)` pairs. Mismatch is a warning, not an error.
pub fn bbox_polygon_warnings(records: &[AnnotationRecord]) -> Vec<(i64, String)> {
    let mut out = Vec::new();
    for rec in records {
        if rec.segmentation.is_empty() {
            continue;
        }
        let mut min_x = f64::INFINITY;
        let mut min_y = f64::INFINITY;
        let mut max_x = f64::NEG_INFINITY;
        let mut max_y = f64::NEG_INFINITY;
        for poly in &rec.segmentation {
            for i in 0..poly.vertex_count() {
                let (x, y) = poly.vertex(i);
                min_x = min_x.min(x);
                min_y = min_y.min(y);
                max_x = max_x.max(x);
                max_y = max_y.max(y);
            }
        }
        let b = rec.bbox;
        let slack = 1.0;
        if (min_x - b[0]).abs() > slack
            || (min_y - b[1]).abs() > slack
            || (max_x - (b[0] + b[2])).abs() > slack
            || (max_y - (b[1] + b[3])).abs() > slack
        {
            out.push((
                rec.annotation_id,
                format!(
                    "bbox {:?} does not tightly bound polygons (extent [{min_x}, {min_y}, {max_x}, {max_y}])",
                    b
                ),
            ));
        }
    }
    out
}

/// Even-odd point-in-polygon test.
fn point_in_polygon(poly: &Polygon, px: f64, py: f64) -> bool {
    let n = poly.vertex_count();
    let mut inside = false;
    for i in 0..n {
        let (x0, y0) = poly.vertex(i);
        let (x1, y1) = poly.vertex((i + 1) % n);
        if (y0 > py) != (y1 > py) {
            let x_cross = x0 + (py - y0) / (y1 - y0) * (x1 - x0);
            if px < x_cross {
                inside = !inside;
            }
        }
    }
    inside
}

/// Rasterize a polygon union to a mask. Pixel (row i, col j) is set iff
/// its center `(j+0.5, i+0.5)` lies inside any polygon under the even-odd
/// rule. Zero-area polygons contribute nothing.
pub fn rasterize(polygons: &[Polygon], height: usize, width: usize) -> BinaryMask {
    let mut mask = BinaryMask::new(height, width);
    for poly in polygons {
        if poly.vertex_count() < 3 || poly.signed_area() == 0.0 {
            continue;
        }
        // scan only the polygon's bounding rows/cols
        let xs = poly.coords.iter().step_by(2);
        let ys = poly.coords.iter().skip(1).step_by(2);
        let min_x = xs.clone().cloned().fold(f64::INFINITY, f64::min);
        let max_x = xs.cloned().fold(f64::NEG_INFINITY, f64::max);
        let min_y = ys.clone().cloned().fold(f64::INFINITY, f64::min);
        let max_y = ys.cloned().fold(f64::NEG_INFINITY, f64::max);
        let r0 = (min_y - 0.5).floor().max(0.0) as usize;
        let r1 = (max_y.ceil() as usize).min(height);
        let c0 = (min_x - 0.5).floor().max(0.0) as usize;
        let c1 = (max_x.ceil() as usize).min(width);
        for r in r0..r1 {
            for c in c0..c1 {
                if !mask.get(r, c) && point_in_polygon(poly, c as f64 + 0.5, r as f64 + 0.5) {
                    mask.set(r, c, true);
                }
            }
        }
    }
    mask
}

/// Tightest COCO-convention box around the set pixels of a mask.
pub fn bbox_from_mask(mask: &BinaryMask) -> Result<BoxXYWH> {
    let mut min_r = usize::MAX;
    let mut min_c = usize::MAX;
    let mut max_r = 0usize;
    let mut max_c = 0usize;
    let mut any = false;
    for r in 0..mask.height {
        for c in 0..mask.width {
            if mask.get(r, c) {
                any = true;
                min_r = min_r.min(r);
                min_c = min_c.min(c);
                max_r = max_r.max(r);
                max_c = max_c.max(c);
            }
        }
    }
    if !any {
        return Err(Error::EmptyMask);
    }
    Ok(BoxXYWH::new(
        min_c as f64,
        min_r as f64,
        (max_c - min_c + 1) as f64,
        (max_r - min_r + 1) as f64,
    ))
}

/// How an image was padded to a square and rescaled, so annotations can be
/// mapped into the output frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PadRecord {
    pub pad_top: usize,
    pub pad_left: usize,
    pub padded_side: usize,
    pub target: usize,
}

impl PadRecord {
    pub fn scale(&self) -> f64 {
        self.target as f64 / self.padded_side as f64
    }

    pub fn map_point(&self, x: f64, y: f64) -> (f64, f64) {
        let s = self.scale();
        ((x + self.pad_left as f64) * s, (y + self.pad_top as f64) * s)
    }

    pub fn map_bbox(&self, b: &BoxXYWH) -> BoxXYWH {
        let s = self.scale();
        let (x, y) = self.map_point(b.x, b.y);
        BoxXYWH::new(x, y, b.w * s, b.h * s)
    }

    pub fn map_polygon(&self, poly: &Polygon) -> Polygon {
        let coords = poly
            .coords
            .chunks(2)
            .flat_map(|xy| {
                let (x, y) = self.map_point(xy[0], xy[1]);
                [x, y]
            })
            .collect();
        Polygon { coords }
    }
}

/// Zero-pad the short axis to a square (odd remainder goes to
/// bottom/right), then bilinearly resize to `target×target`.
pub fn preprocess(image: &ImageTensor, target: usize) -> Result<(ImageTensor, PadRecord)> {
    if image.normalized.is_some() {
        return Err(Error::domain("preprocess expects an unnormalized image"));
    }
    let (h, w) = (image.height(), image.width());
    if h == 0 || w == 0 || target == 0 {
        return Err(Error::domain("preprocess requires positive dimensions"));
    }
    let side = h.max(w);
    let pad_top = (side - h) / 2;
    let pad_left = (side - w) / 2;
    let mut padded = ndarray::Array3::zeros((3, side, side));
    padded
        .slice_mut(ndarray::s![.., pad_top..pad_top + h, pad_left..pad_left + w])
        .assign(&image.data);
    let resized = bilinear_resize(&padded, target, target);
    let record = PadRecord { pad_top, pad_left, padded_side: side, target };
    Ok((ImageTensor { data: resized, normalized: None }, record))
}

/// Per-channel `(value − mean) / std` normalization.
pub fn normalize_channels(
    image: &ImageTensor,
    mean: [f64; 3],
    std: [f64; 3],
) -> Result<ImageTensor> {
    if image.normalized.is_some() {
        return Err(Error::domain("image is already normalized"));
    }
    if std.iter().any(|s| *s <= 0.0) {
        return Err(Error::domain("std components must be > 0"));
    }
    let mut data = image.data.clone();
    for c in 0..3 {
        data.index_axis_mut(ndarray::Axis(0), c)
            .mapv_inplace(|v| (v - mean[c]) / std[c]);
    }
    Ok(ImageTensor { data, normalized: Some((mean, std)) })
}

/// Mirror an image and its annotations about the vertical axis.
pub fn hflip(
    image: &ImageTensor,
    records: &[AnnotationRecord],
) -> (ImageTensor, Vec<AnnotationRecord>) {
    let w = image.width();
    let mut data = image.data.clone();
    data.invert_axis(ndarray::Axis(2));
    let flipped = ImageTensor { data, normalized: image.normalized };
    let records = records
        .iter()
        .map(|rec| {
            let mut rec = rec.clone();
            rec.bbox[0] = w as f64 - rec.bbox[0] - rec.bbox[2];
            for poly in &mut rec.segmentation {
                for x in poly.coords.iter_mut().step_by(2) {
                    *x = w as f64 - *x;
                }
            }
            rec
        })
        .collect();
    (flipped, records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> CategoryTable {
        CategoryTable::modanet_default()
    }

    fn rect_polygon(x0: f64, y0: f64, x1: f64, y1: f64) -> Polygon {
        Polygon { coords: vec![x0, y0, x1, y0, x1, y1, x0, y1] }
    }

    #[test]
    fn default_table_anchors() {
        let t = table();
        assert_eq!(t.count(), 13);
        assert_eq!(t.name(2), Some("belt"));
    }

    #[test]
    fn table_tsv_roundtrip() {
        let t = CategoryTable::from_tsv("1\tbag\n2\tbelt\n3\tboots\n").unwrap();
        assert_eq!(t.count(), 3);
        assert_eq!(t.name(2), Some("belt"));
        assert!(CategoryTable::from_tsv("1\tbag\n3\tboots\n").is_err());
    }

    #[test]
    fn parse_table1_style_entry() {
        let doc = br#"{"annotations": [
            {"image_id": 736791, "id": 0, "bbox": [160, 247, 97, 18],
             "category_id": 2, "iscrowd": 0,
             "segmentation": [[161, 248, 170, 248, 173, 249, 189, 251]]}
        ]}"#;
        let records = parse_annotations(doc, &table()).unwrap();
        assert_eq!(records.len(), 1);
        let rec = &records[0];
        assert_eq!(rec.image_id, 736791);
        assert_eq!(rec.bbox[2], 97.0);
        assert_eq!(table().name(rec.category_id), Some("belt"));
    }

    #[test]
    fn parse_empty_array() {
        let records = parse_annotations(br#"{"annotations": []}"#, &table()).unwrap();
        assert!(records.is_empty());
        let records = parse_annotations(b"[]", &table()).unwrap();
        assert!(records.is_empty());
    }

    #[test]
    fn parse_rejects_odd_polygon() {
        let doc = br#"[{"image_id": 1, "id": 42, "bbox": [0, 0, 5, 5],
            "category_id": 1, "iscrowd": 0,
            "segmentation": [[1, 1, 2, 2, 3]]}]"#;
        let err = parse_annotations(doc, &table()).unwrap_err();
        match err {
            Error::Validation { annotation_id, .. } => assert_eq!(annotation_id, 42),
            other => panic!("expected validation error, got {other}"),
        }
    }

    #[test]
    fn parse_rejects_unknown_category_and_bad_bbox() {
        let doc = br#"[{"image_id": 1, "id": 7, "bbox": [0, 0, 5, 5],
            "category_id": 99, "iscrowd": 0, "segmentation": []}]"#;
        assert!(matches!(
            parse_annotations(doc, &table()),
            Err(Error::Validation { annotation_id: 7, .. })
        ));
        let doc = br#"[{"image_id": 1, "id": 8, "bbox": [0, 0, 0, 5],
            "category_id": 1, "iscrowd": 0, "segmentation": []}]"#;
        assert!(parse_annotations(doc, &table()).is_err());
    }

    #[test]
    fn parse_error_reports_position() {
        let err = parse_annotations(b"{\n  \"annotations\": [,]\n}", &table()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn serialize_parse_roundtrip() {
        let doc = br#"[{"image_id": 736791, "id": 0, "bbox": [160, 247, 97, 18],
            "category_id": 2, "iscrowd": 0,
            "segmentation": [[161, 248, 170, 248, 173, 249]]}]"#;
        let records = parse_annotations(doc, &table()).unwrap();
        let text = serialize_annotations(&records);
        let back = parse_annotations(text.as_bytes(), &table()).unwrap();
        assert_eq!(records, back);
    }

    /// Enumeration oracle: pixel centers inside an axis-aligned rectangle.
    fn rect_oracle(x0: f64, y0: f64, x1: f64, y1: f64, h: usize, w: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..h {
            for c in 0..w {
                let (px, py) = (c as f64 + 0.5, r as f64 + 0.5);
                if px > x0 && px < x1 && py > y0 && py < y1 {
                    out.push((r, c));
                }
            }
        }
        out
    }

    #[test]
    fn rasterize_rectangle_matches_center_enumeration() {
        let poly = rect_polygon(10.0, 10.0, 20.0, 15.0);
        let mask = rasterize(&[poly], 32, 32);
        let expected = rect_oracle(10.0, 10.0, 20.0, 15.0, 32, 32);
        assert_eq!(expected.len(), 50);
        assert_eq!(mask.popcount(), 50);
        for (r, c) in expected {
            assert!(mask.get(r, c));
        }
    }

    #[test]
    fn rasterize_empty_and_disjoint() {
        assert_eq!(rasterize(&[], 16, 16).popcount(), 0);

        let a = rect_polygon(1.0, 1.0, 5.0, 5.0);
        let b = rect_polygon(8.0, 8.0, 12.0, 12.0);
        let ma = rasterize(&[a.clone()], 16, 16);
        let mb = rasterize(&[b.clone()], 16, 16);
        let both = rasterize(&[a, b], 16, 16);
        assert_eq!(both.popcount(), ma.popcount() + mb.popcount());
    }

    #[test]
    fn rasterize_degenerate_polygon_is_empty() {
        let line = Polygon { coords: vec![1.0, 1.0, 5.0, 1.0, 9.0, 1.0] };
        assert_eq!(rasterize(&[line], 16, 16).popcount(), 0);
    }

    #[test]
    fn rasterize_convex_popcount_near_shoelace_area() {
        // convex pentagon
        let poly = Polygon {
            coords: vec![8.0, 2.0, 14.0, 6.0, 12.0, 13.0, 4.0, 13.0, 2.0, 6.0],
        };
        let area = poly.signed_area().abs();
        let perimeter: f64 = (0..poly.vertex_count())
            .map(|i| {
                let (x0, y0) = poly.vertex(i);
                let (x1, y1) = poly.vertex((i + 1) % poly.vertex_count());
                ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt()
            })
            .sum();
        let popcount = rasterize(&[poly], 16, 16).popcount() as f64;
        assert!((popcount - area).abs() <= perimeter);
    }

    #[test]
    fn bbox_from_mask_cases() {
        let mut mask = BinaryMask::new(8, 10);
        assert!(matches!(bbox_from_mask(&mask), Err(Error::EmptyMask)));
        mask.set(3, 7, true);
        assert_eq!(bbox_from_mask(&mask).unwrap(), BoxXYWH::new(7.0, 3.0, 1.0, 1.0));

        let mut full = BinaryMask::new(4, 5);
        for r in 0..4 {
            for c in 0..5 {
                full.set(r, c, true);
            }
        }
        assert_eq!(bbox_from_mask(&full).unwrap(), BoxXYWH::new(0.0, 0.0, 5.0, 4.0));

        let rect = rasterize(&[rect_polygon(10.0, 10.0, 20.0, 15.0)], 32, 32);
        assert_eq!(bbox_from_mask(&rect).unwrap(), BoxXYWH::new(10.0, 10.0, 10.0, 5.0));
    }

    #[test]
    fn preprocess_pads_short_axis() {
        let img = ImageTensor::zeros(600, 400);
        let (out, rec) = preprocess(&img, 256).unwrap();
        assert_eq!((out.height(), out.width()), (256, 256));
        assert_eq!(rec.pad_left, 100);
        assert_eq!(rec.pad_top, 0);
        assert_eq!(rec.padded_side, 600);

        // odd remainder goes right
        let img = ImageTensor::zeros(601, 400);
        let (_, rec) = preprocess(&img, 256).unwrap();
        assert_eq!(rec.pad_left, 100); // 100 left, 101 right
        assert_eq!(rec.padded_side, 601);

        // square input: no padding
        let img = ImageTensor::zeros(128, 128);
        let (_, rec) = preprocess(&img, 256).unwrap();
        assert_eq!((rec.pad_top, rec.pad_left), (0, 0));
    }

    #[test]
    fn preprocess_maps_annotations_into_frame() {
        let rec = PadRecord { pad_top: 0, pad_left: 100, padded_side: 600, target: 256 };
        let poly = rect_polygon(0.0, 0.0, 400.0, 600.0);
        let mapped = rec.map_polygon(&poly);
        for xy in mapped.coords.chunks(2) {
            assert!(xy[0] >= 0.0 && xy[0] <= 256.0);
            assert!(xy[1] >= 0.0 && xy[1] <= 256.0);
        }
        let b = rec.map_bbox(&BoxXYWH::new(0.0, 0.0, 400.0, 600.0));
        assert!((b.x - 100.0 * 256.0 / 600.0).abs() < 1e-12);
        assert!((b.h - 256.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_channel_formula() {
        let mut img = ImageTensor::zeros(2, 2);
        img.data.fill(0.8);
        let out = normalize_channels(&img, [0.5; 3], [0.25; 3]).unwrap();
        for v in out.data.iter() {
            assert!((v - 1.2).abs() < 1e-12);
        }
        // identity constants
        let id = normalize_channels(&img, [0.0; 3], [1.0; 3]).unwrap();
        assert_eq!(id.data, img.data);
        // centering
        let centered = normalize_channels(&img, [0.8; 3], [1.0; 3]).unwrap();
        assert!(centered.data.iter().all(|v| v.abs() < 1e-12));
        // double normalization rejected
        assert!(normalize_channels(&out, [0.0; 3], [1.0; 3]).is_err());
        assert!(normalize_channels(&img, [0.0; 3], [0.0; 3]).is_err());
    }

    #[test]
    fn hflip_involution_and_bbox_rule() {
        let mut img = ImageTensor::zeros(4, 6);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = i as f64 / 100.0;
        }
        let rec = AnnotationRecord {
            image_id: 1,
            annotation_id: 0,
            bbox: [0.0, 5.0, 3.0, 2.0],
            category_id: 1,
            iscrowd: 0,
            segmentation: vec![rect_polygon(1.0, 1.0, 3.0, 3.0)],
        };
        let (f1, r1) = hflip(&img, std::slice::from_ref(&rec));
        assert_eq!(r1[0].bbox, [3.0, 5.0, 3.0, 2.0]);
        let (f2, r2) = hflip(&f1, &r1);
        assert_eq!(f2.data, img.data);
        assert_eq!(r2[0], rec);
    }

    #[test]
    fn hflip_bbox_examples() {
        let img = ImageTensor::zeros(10, 100);
        let mk = |x: f64, w: f64| AnnotationRecord {
            image_id: 1,
            annotation_id: 0,
            bbox: [x, 5.0, w, 10.0],
            category_id: 1,
            iscrowd: 0,
            segmentation: vec![],
        };
        let (_, r) = hflip(&img, &[mk(0.0, 10.0)]);
        assert_eq!(r[0].bbox[0], 90.0);
        // centered box is unchanged
        let (_, r) = hflip(&img, &[mk(45.0, 10.0)]);
        assert_eq!(r[0].bbox[0], 45.0);
    }
}
