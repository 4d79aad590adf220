//! The label-map codec: palette, quantization, part masks, partial label
//! maps, editing masks and background handling.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{FaceImage, Image};

pub const PALETTE_VERSION: &str = "shapegene-palette-v1";
pub const CLASS_COUNT: usize = 11;
pub const PART_COUNT: usize = 7;

/// Fill value for background pixels of a conditional input.
pub const BACKGROUND_FILL: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum LabelClass {
    Background = 0,
    Hair,
    Eyebrows,
    Eyes,
    Nose,
    UpperLip,
    LowerLip,
    Teeth,
    FaceSkin,
    BodySkin,
    Clothes,
}

impl LabelClass {
    pub const ALL: [LabelClass; CLASS_COUNT] = [
        LabelClass::Background,
        LabelClass::Hair,
        LabelClass::Eyebrows,
        LabelClass::Eyes,
        LabelClass::Nose,
        LabelClass::UpperLip,
        LabelClass::LowerLip,
        LabelClass::Teeth,
        LabelClass::FaceSkin,
        LabelClass::BodySkin,
        LabelClass::Clothes,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            LabelClass::Background => "background",
            LabelClass::Hair => "hair",
            LabelClass::Eyebrows => "eyebrows",
            LabelClass::Eyes => "eyes",
            LabelClass::Nose => "nose",
            LabelClass::UpperLip => "upper_lip",
            LabelClass::LowerLip => "lower_lip",
            LabelClass::Teeth => "teeth",
            LabelClass::FaceSkin => "face_skin",
            LabelClass::BodySkin => "body_skin",
            LabelClass::Clothes => "clothes",
        }
    }

    pub fn rgb8(self) -> [u8; 3] {
        match self {
            LabelClass::Background => [0, 0, 0],
            LabelClass::Hair => [255, 0, 0],
            LabelClass::Eyebrows => [0, 255, 0],
            LabelClass::Eyes => [0, 0, 255],
            LabelClass::Nose => [255, 255, 0],
            LabelClass::UpperLip => [255, 0, 255],
            LabelClass::LowerLip => [128, 0, 255],
            LabelClass::Teeth => [255, 255, 255],
            LabelClass::FaceSkin => [0, 255, 255],
            LabelClass::BodySkin => [255, 128, 0],
            LabelClass::Clothes => [128, 128, 128],
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        self.rgb8().map(|c| f32::from(c) / 255.0)
    }

    /// Owning part; `None` for background.
    pub fn part(self) -> Option<Part> {
        match self {
            LabelClass::Background => None,
            LabelClass::Hair => Some(Part::Hair),
            LabelClass::Eyebrows => Some(Part::Eyebrows),
            LabelClass::Eyes => Some(Part::Eyes),
            LabelClass::Nose => Some(Part::Nose),
            LabelClass::UpperLip | LabelClass::LowerLip | LabelClass::Teeth => Some(Part::Mouth),
            LabelClass::FaceSkin => Some(Part::Face),
            LabelClass::BodySkin | LabelClass::Clothes => Some(Part::Body),
        }
    }

    /// Exact palette lookup of an 8-bit color.
    pub fn from_rgb8(rgb: [u8; 3]) -> Option<Self> {
        Self::ALL.iter().copied().find(|c| c.rgb8() == rgb)
    }
}

/// Semantic face part, in gene slot order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum Part {
    Hair = 0,
    Eyebrows,
    Eyes,
    Nose,
    Mouth,
    Face,
    Body,
}

impl Part {
    pub const ALL: [Part; PART_COUNT] = [
        Part::Hair,
        Part::Eyebrows,
        Part::Eyes,
        Part::Nose,
        Part::Mouth,
        Part::Face,
        Part::Body,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::InvalidPart(i.to_string()))
    }

    pub fn name(self) -> &'static str {
        match self {
            Part::Hair => "hair",
            Part::Eyebrows => "eyebrows",
            Part::Eyes => "eyes",
            Part::Nose => "nose",
            Part::Mouth => "mouth",
            Part::Face => "face",
            Part::Body => "body",
        }
    }

    pub fn classes(self) -> &'static [LabelClass] {
        match self {
            Part::Hair => &[LabelClass::Hair],
            Part::Eyebrows => &[LabelClass::Eyebrows],
            Part::Eyes => &[LabelClass::Eyes],
            Part::Nose => &[LabelClass::Nose],
            Part::Mouth => &[LabelClass::UpperLip, LabelClass::LowerLip, LabelClass::Teeth],
            Part::Face => &[LabelClass::FaceSkin],
            Part::Body => &[LabelClass::BodySkin, LabelClass::Clothes],
        }
    }
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Part {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if let Ok(i) = s.parse::<usize>() {
            return Part::from_index(i);
        }
        Part::ALL
            .iter()
            .copied()
            .find(|p| p.name() == s)
            .ok_or(Error::InvalidPart(s))
    }
}

/// Versioned palette document shared with clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub version: String,
    pub classes: Vec<PaletteClass>,
    pub parts: Vec<PaletteGroup>,
    pub background_fill: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaletteClass {
    pub name: String,
    pub rgb: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaletteGroup {
    pub name: String,
    pub index: usize,
    pub classes: Vec<String>,
}

impl Palette {
    pub fn standard() -> Self {
        Palette {
            version: PALETTE_VERSION.to_string(),
            classes: LabelClass::ALL
                .iter()
                .map(|c| PaletteClass {
                    name: c.name().to_string(),
                    rgb: c.rgb8(),
                })
                .collect(),
            parts: Part::ALL
                .iter()
                .map(|p| PaletteGroup {
                    name: p.name().to_string(),
                    index: p.index(),
                    classes: p.classes().iter().map(|c| c.name().to_string()).collect(),
                })
                .collect(),
            background_fill: BACKGROUND_FILL,
        }
    }
}

/// RGB label map. When quantized, every pixel is exactly one palette color
/// and the class of each pixel is cached.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pixels: Image,
    classes: Option<Vec<u8>>,
}

impl LabelMap {
    /// Continuous (network output) label map.
    pub fn from_raw(pixels: Image) -> Self {
        LabelMap {
            pixels,
            classes: None,
        }
    }

    pub fn from_classes(size: usize, classes: Vec<u8>) -> Result<Self> {
        if classes.len() != size * size || classes.iter().any(|&c| usize::from(c) >= CLASS_COUNT) {
            return Err(Error::Shape(format!("invalid class buffer for {size}x{size}")));
        }
        let mut data = Vec::with_capacity(size * size * 3);
        for &c in &classes {
            data.extend_from_slice(&LabelClass::ALL[usize::from(c)].rgb());
        }
        Ok(LabelMap {
            pixels: Image::new(size, data)?,
            classes: Some(classes),
        })
    }

    /// Interprets an image as a label map, quantized iff every 8-bit pixel
    /// is exactly a palette color.
    pub fn from_image_exact(pixels: Image) -> Self {
        let classes: Option<Vec<u8>> = (0..pixels.pixels())
            .map(|i| {
                let p = pixels.pixel(i);
                let rgb8 = p.map(crate::image::to_u8);
                LabelClass::from_rgb8(rgb8)
                    .filter(|c| c.rgb() == p)
                    .map(|c| c as u8)
            })
            .collect();
        LabelMap { pixels, classes }
    }

    pub fn size(&self) -> usize {
        self.pixels.size()
    }

    pub fn image(&self) -> &Image {
        &self.pixels
    }

    pub fn into_image(self) -> Image {
        self.pixels
    }

    pub fn is_quantized(&self) -> bool {
        self.classes.is_some()
    }

    pub fn classes(&self) -> Result<&[u8]> {
        self.classes.as_deref().ok_or(Error::Unquantized)
    }

    pub fn class_at(&self, idx: usize) -> Result<LabelClass> {
        Ok(LabelClass::ALL[usize::from(self.classes()?[idx])])
    }

    /// Number of pixels of each class.
    pub fn class_histogram(&self) -> Result<[usize; CLASS_COUNT]> {
        let mut h = [0usize; CLASS_COUNT];
        for &c in self.classes()? {
            h[usize::from(c)] += 1;
        }
        Ok(h)
    }
}

/// Binary per-pixel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditingMask {
    size: usize,
    bits: Vec<bool>,
}

impl EditingMask {
    pub fn new(size: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != size * size {
            return Err(Error::Shape(format!("{} bits for {size}x{size}", bits.len())));
        }
        Ok(EditingMask { size, bits })
    }

    pub fn empty(size: usize) -> Self {
        EditingMask {
            size,
            bits: vec![false; size * size],
        }
    }

    pub fn full(size: usize) -> Self {
        EditingMask {
            size,
            bits: vec![true; size * size],
        }
    }

    /// From real values that must each be exactly 0 or 1.
    pub fn from_values(size: usize, values: &[f32]) -> Result<Self> {
        let bits = values
            .iter()
            .map(|&v| match v {
                0.0 => Ok(false),
                1.0 => Ok(true),
                _ => Err(Error::NonBinaryMask),
            })
            .collect::<Result<Vec<bool>>>()?;
        EditingMask::new(size, bits)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, idx: usize) -> bool {
        self.bits[idx]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn union(&self, other: &EditingMask) -> Result<EditingMask> {
        if self.size != other.size {
            return Err(Error::ResolutionMismatch(self.size, other.size));
        }
        Ok(EditingMask {
            size: self.size,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a || b).collect(),
        })
    }

    pub fn contains(&self, other: &EditingMask) -> bool {
        self.size == other.size && self.bits.iter().zip(&other.bits).all(|(&a, &b)| a || !b)
    }

    /// Values as 0.0 / 1.0.
    pub fn values(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Mask rendered as a white-on-black image.
    pub fn to_image(&self) -> Image {
        let data = self
            .bits
            .iter()
            .flat_map(|&b| if b { [1.0; 3] } else { [0.0; 3] })
            .collect();
        Image::new(self.size, data).expect("mask geometry")
    }
}

fn squared_distance(a: [f32; 3], b: [f32; 3]) -> f32 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

/// Nearest palette class of an RGB value; ties go to the lower class index.
pub fn nearest_class(rgb: [f32; 3]) -> LabelClass {
    let mut best = LabelClass::Background;
    let mut best_d = f32::INFINITY;
    for c in LabelClass::ALL {
        let d = squared_distance(rgb, c.rgb());
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

/// Snaps every pixel to its nearest palette color.
pub fn quantize(raw: &Image) -> LabelMap {
    let classes = (0..raw.pixels())
        .map(|i| nearest_class(raw.pixel(i)) as u8)
        .collect();
    LabelMap::from_classes(raw.size(), classes).expect("geometry preserved")
}

pub fn class_mask(label: &LabelMap, class: LabelClass) -> Result<EditingMask> {
    let classes = label.classes()?;
    EditingMask::new(label.size(), classes.iter().map(|&c| c == class as u8).collect())
}

pub fn part_mask(label: &LabelMap, part: Part) -> Result<EditingMask> {
    let classes = label.classes()?;
    let bits = classes
        .iter()
        .map(|&c| LabelClass::ALL[usize::from(c)].part() == Some(part))
        .collect();
    EditingMask::new(label.size(), bits)
}

pub fn background_mask(label: &LabelMap) -> Result<EditingMask> {
    class_mask(label, LabelClass::Background)
}

/// Keeps the classes of one part; every other pixel becomes background.
pub fn partial_label(label: &LabelMap, part: Part) -> Result<LabelMap> {
    let classes = label
        .classes()?
        .iter()
        .map(|&c| {
            if LabelClass::ALL[usize::from(c)].part() == Some(part) {
                c
            } else {
                LabelClass::Background as u8
            }
        })
        .collect();
    LabelMap::from_classes(label.size(), classes)
}

/// Union of the part's masks in two label maps: the region a part swap may edit.
pub fn editing_mask(label_a: &LabelMap, label_b: &LabelMap, part: Part) -> Result<EditingMask> {
    if label_a.size() != label_b.size() {
        return Err(Error::ResolutionMismatch(label_a.size(), label_b.size()));
    }
    part_mask(label_a, part)?.union(&part_mask(label_b, part)?)
}

pub fn remove_background(image: &FaceImage, label: &LabelMap) -> Result<FaceImage> {
    if image.size() != label.size() {
        return Err(Error::ResolutionMismatch(image.size(), label.size()));
    }
    let bg = background_mask(label)?;
    let mut out = image.clone();
    for i in 0..out.pixels() {
        if bg.get(i) {
            out.set_pixel(i, [BACKGROUND_FILL; 3]);
        }
    }
    Ok(out)
}

/// Pastes the foreground of `generated` (per `generated_label`) over the
/// receptor photograph.
pub fn composite_background(
    generated: &FaceImage,
    receptor_image: &FaceImage,
    receptor_label: &LabelMap,
    generated_label: &LabelMap,
) -> Result<FaceImage> {
    generated.check_same_size(receptor_image)?;
    if receptor_label.size() != generated.size() {
        return Err(Error::ResolutionMismatch(generated.size(), receptor_label.size()));
    }
    if !receptor_label.is_quantized() {
        return Err(Error::Unquantized);
    }
    let fg_bg = background_mask(generated_label)?;
    let mut out = receptor_image.clone();
    for i in 0..out.pixels() {
        if !fg_bg.get(i) {
            out.set_pixel(i, generated.pixel(i));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label_from(size: usize, classes: &[LabelClass]) -> LabelMap {
        LabelMap::from_classes(size, classes.iter().map(|&c| c as u8).collect()).unwrap()
    }

    #[test]
    fn palette_colors_are_distinct_and_parts_cover_non_background() {
        for (i, a) in LabelClass::ALL.iter().enumerate() {
            for b in &LabelClass::ALL[i + 1..] {
                assert_ne!(a.rgb8(), b.rgb8());
            }
        }
        let mut seen = [false; CLASS_COUNT];
        for p in Part::ALL {
            for c in p.classes() {
                assert!(!seen[c.index()]);
                seen[c.index()] = true;
                assert_eq!(c.part(), Some(p));
            }
        }
        assert_eq!(seen.iter().filter(|&&s| !s).count(), 1);
        assert!(!seen[LabelClass::Background.index()]);
    }

    #[test]
    fn quantize_snaps_near_black_to_black() {
        let img = Image::new(1, vec![0.49, 0.0, 0.0]).unwrap();
        assert_eq!(quantize(&img).class_at(0).unwrap(), LabelClass::Background);
        let img = Image::new(1, vec![0.51, 0.0, 0.0]).unwrap();
        assert_eq!(quantize(&img).class_at(0).unwrap(), LabelClass::Hair);
    }

    #[test]
    fn quantize_of_palette_image_is_identity() {
        let l = label_from(2, &[LabelClass::Teeth, LabelClass::LowerLip, LabelClass::Clothes, LabelClass::Nose]);
        let q = quantize(l.image());
        assert_eq!(q, l);
    }

    #[test]
    fn part_queries_reject_unquantized() {
        let raw = LabelMap::from_raw(Image::filled(2, [0.3, 0.3, 0.3]));
        assert!(matches!(part_mask(&raw, Part::Hair), Err(Error::Unquantized)));
        assert!(matches!(partial_label(&raw, Part::Hair), Err(Error::Unquantized)));
    }

    #[test]
    fn all_background_gives_empty_masks_and_gray_fill() {
        let l = label_from(3, &[LabelClass::Background; 9]);
        for p in Part::ALL {
            assert_eq!(part_mask(&l, p).unwrap().count(), 0);
            assert_eq!(partial_label(&l, p).unwrap(), l);
        }
        let img = Image::filled(3, [0.1, 0.9, 0.2]);
        assert_eq!(remove_background(&img, &l).unwrap(), Image::filled(3, [0.5; 3]));
    }

    #[test]
    fn partial_mouth_has_only_mouth_colors() {
        let l = label_from(
            2,
            &[LabelClass::UpperLip, LabelClass::Teeth, LabelClass::FaceSkin, LabelClass::Hair],
        );
        let p = partial_label(&l, Part::Mouth).unwrap();
        let h = p.class_histogram().unwrap();
        assert_eq!(h[LabelClass::UpperLip.index()], 1);
        assert_eq!(h[LabelClass::Teeth.index()], 1);
        assert_eq!(h[LabelClass::Background.index()], 2);
    }

    #[test]
    fn editing_mask_of_disjoint_parts_adds_up() {
        let mut a = vec![LabelClass::Background; 25];
        let mut b = vec![LabelClass::Background; 25];
        a[..5].fill(LabelClass::Nose);
        b[10..17].fill(LabelClass::Nose);
        let m = editing_mask(&label_from(5, &a), &label_from(5, &b), Part::Nose).unwrap();
        assert_eq!(m.count(), 12);
        let same = editing_mask(&label_from(5, &a), &label_from(5, &a), Part::Nose).unwrap();
        assert_eq!(same, part_mask(&label_from(5, &a), Part::Nose).unwrap());
        assert!(matches!(
            editing_mask(&label_from(5, &a), &label_from(1, &[LabelClass::Hair]), Part::Nose),
            Err(Error::ResolutionMismatch(5, 1))
        ));
    }

    #[test]
    fn composite_extremes() {
        let gen = Image::filled(2, [0.9, 0.1, 0.1]);
        let rec = Image::filled(2, [0.2, 0.3, 0.4]);
        let fg = label_from(2, &[LabelClass::FaceSkin; 4]);
        let bg = label_from(2, &[LabelClass::Background; 4]);
        assert_eq!(composite_background(&gen, &rec, &bg, &fg).unwrap(), gen);
        assert_eq!(composite_background(&gen, &rec, &fg, &bg).unwrap(), rec);
    }

    #[test]
    fn part_names_parse() {
        assert_eq!("hair".parse::<Part>().unwrap(), Part::Hair);
        assert_eq!("4".parse::<Part>().unwrap(), Part::Mouth);
        assert!("wings".parse::<Part>().is_err());
        assert!("7".parse::<Part>().is_err());
    }

    #[test]
    fn non_binary_mask_rejected() {
        assert!(matches!(EditingMask::from_values(1, &[0.5]), Err(Error::NonBinaryMask)));
    }
}
