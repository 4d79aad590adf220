//! Procedural cartoon faces with pixel-exact label maps.
//!
//! A face is a stack of parametric layers (body, hair, face, nose, mouth,
//! eyes, eyebrows, fringe). Each part's geometry depends only on its own
//! parameters and on identity parameters that belong to that part, so
//! changing one part never moves another: relabelled pixels always lie in
//! the union of that part's before/after masks.
//!
//! Coordinates are in the unit square, `u` to the right and `v` downwards.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::image::{FaceImage, Image};
use crate::labelspace::{LabelClass, LabelMap, Part, PALETTE_VERSION};

pub const RESOLUTIONS: [usize; 4] = [32, 64, 128, 256];
pub const HAIR_TEMPLATES: usize = 4;

const FACE_CENTER: (f32, f32) = (0.5, 0.5);
const EYE_LINE: f32 = 0.46;
const BROW_LINE: f32 = 0.385;
const NOSE_CENTER: (f32, f32) = (0.5, 0.575);
const MOUTH_CENTER: (f32, f32) = (0.5, 0.71);
const HAIR_CENTER: (f32, f32) = (0.5, 0.44);

/// Closed parameter ranges. Every sampled value lies inside its range.
pub mod ranges {
    pub const FACE_HALF_WIDTH: (f32, f32) = (0.22, 0.28);
    pub const FACE_HALF_HEIGHT: (f32, f32) = (0.28, 0.33);
    pub const SKIN_TONE: (f32, f32) = (0.0, 1.0);
    pub const EYE_SPACING: (f32, f32) = (0.17, 0.23);
    pub const NOSE_SIZE: (f32, f32) = (0.85, 1.15);

    pub const HAIR_EXTENT: (f32, f32) = (0.0, 1.0);
    pub const BROW_THICKNESS: (f32, f32) = (0.045, 0.06);
    pub const BROW_ANGLE: (f32, f32) = (-0.25, 0.25);
    pub const BROW_HALF_LENGTH: (f32, f32) = (0.05, 0.075);
    pub const EYE_RADIUS: (f32, f32) = (0.03, 0.042);
    pub const EYE_ASPECT: (f32, f32) = (0.75, 1.0);
    pub const NOSE_HALF_WIDTH: (f32, f32) = (0.03, 0.05);
    pub const NOSE_HALF_HEIGHT: (f32, f32) = (0.05, 0.075);
    pub const MOUTH_HALF_WIDTH: (f32, f32) = (0.06, 0.09);
    /// Open mouths draw their openness from this range; half of all mouths
    /// are closed (openness 0).
    pub const MOUTH_OPENNESS: (f32, f32) = (0.012, 0.035);
    pub const MOUTH_SMILE: (f32, f32) = (-0.02, 0.03);
    pub const UPPER_LIP: (f32, f32) = (0.018, 0.028);
    pub const LOWER_LIP: (f32, f32) = (0.022, 0.034);
    pub const JAW: (f32, f32) = (0.95, 1.10);
    pub const CHEEK: (f32, f32) = (0.9, 1.05);
    pub const NECK_HALF_WIDTH: (f32, f32) = (0.06, 0.09);
    pub const SHOULDER_HALF_WIDTH: (f32, f32) = (0.30, 0.42);
    pub const COLLAR: (f32, f32) = (0.90, 0.94);
    pub const NECKLINE_DEPTH: (f32, f32) = (0.0, 0.06);
}

fn in_range(v: f32, r: (f32, f32)) -> bool {
    v >= r.0 && v <= r.1
}

fn sample(rng: &mut ChaCha8Rng, r: (f32, f32)) -> f32 {
    r.0 + (r.1 - r.0) * rng.random::<f32>()
}

fn sample_color(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> [f32; 3] {
    [sample(rng, (lo, hi)), sample(rng, (lo, hi)), sample(rng, (lo, hi))]
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub(crate) fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Geometry and skin tone shared by every rendering of one person.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityParams {
    pub face_half_width: f32,
    pub face_half_height: f32,
    /// Position on a light-to-dark skin ramp.
    pub skin_tone: f32,
    pub eye_spacing: f32,
    pub nose_size: f32,
}

impl IdentityParams {
    /// Parameters of identity `id`; the same id always yields the same person.
    pub fn for_identity(id: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(0x1D_E471_7E5, u64::from(id)));
        IdentityParams {
            face_half_width: sample(&mut rng, ranges::FACE_HALF_WIDTH),
            face_half_height: sample(&mut rng, ranges::FACE_HALF_HEIGHT),
            skin_tone: sample(&mut rng, ranges::SKIN_TONE),
            eye_spacing: sample(&mut rng, ranges::EYE_SPACING),
            nose_size: sample(&mut rng, ranges::NOSE_SIZE),
        }
    }

    pub fn in_range(&self) -> bool {
        in_range(self.face_half_width, ranges::FACE_HALF_WIDTH)
            && in_range(self.face_half_height, ranges::FACE_HALF_HEIGHT)
            && in_range(self.skin_tone, ranges::SKIN_TONE)
            && in_range(self.eye_spacing, ranges::EYE_SPACING)
            && in_range(self.nose_size, ranges::NOSE_SIZE)
    }

    fn skin_rgb(&self) -> [f32; 3] {
        let light = [0.96, 0.82, 0.70];
        let dark = [0.42, 0.28, 0.20];
        let t = self.skin_tone;
        [0, 1, 2].map(|i| light[i] + (dark[i] - light[i]) * t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HairParams {
    pub template: u8,
    pub extent: f32,
    pub color: [f32; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EyebrowParams {
    pub thickness: f32,
    pub angle: f32,
    pub half_length: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EyeParams {
    pub radius: f32,
    pub aspect: f32,
    pub iris: [f32; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoseParams {
    pub half_width: f32,
    pub half_height: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MouthParams {
    pub half_width: f32,
    pub openness: f32,
    pub smile: f32,
    pub upper_lip: f32,
    pub lower_lip: f32,
    pub lip_color: [f32; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceParams {
    /// Vertical stretch of the lower half of the face outline.
    pub jaw: f32,
    /// Width of the jaw line relative to the cheekbones.
    pub cheek: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyParams {
    pub neck_half_width: f32,
    pub shoulder_half_width: f32,
    pub collar: f32,
    pub neckline_depth: f32,
    pub clothes_color: [f32; 3],
}

/// Per-rendering style of each part, in part order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartParams {
    pub hair: HairParams,
    pub eyebrows: EyebrowParams,
    pub eyes: EyeParams,
    pub nose: NoseParams,
    pub mouth: MouthParams,
    pub face: FaceParams,
    pub body: BodyParams,
}

impl PartParams {
    fn sample_part(part: Part, rng: &mut ChaCha8Rng, into: &mut PartParams) {
        match part {
            Part::Hair => {
                into.hair = HairParams {
                    template: rng.random_range(0..HAIR_TEMPLATES as u8),
                    extent: sample(rng, ranges::HAIR_EXTENT),
                    color: {
                        let base = sample(rng, (0.05, 0.75));
                        let warm = sample(rng, (0.0, 0.25));
                        [base + warm, base + warm * 0.5, base * 0.8]
                    },
                }
            }
            Part::Eyebrows => {
                into.eyebrows = EyebrowParams {
                    thickness: sample(rng, ranges::BROW_THICKNESS),
                    angle: sample(rng, ranges::BROW_ANGLE),
                    half_length: sample(rng, ranges::BROW_HALF_LENGTH),
                }
            }
            Part::Eyes => {
                into.eyes = EyeParams {
                    radius: sample(rng, ranges::EYE_RADIUS),
                    aspect: sample(rng, ranges::EYE_ASPECT),
                    iris: sample_color(rng, 0.1, 0.7),
                }
            }
            Part::Nose => {
                into.nose = NoseParams {
                    half_width: sample(rng, ranges::NOSE_HALF_WIDTH),
                    half_height: sample(rng, ranges::NOSE_HALF_HEIGHT),
                }
            }
            Part::Mouth => {
                let open = rng.random::<f32>() < 0.5;
                into.mouth = MouthParams {
                    half_width: sample(rng, ranges::MOUTH_HALF_WIDTH),
                    openness: if open {
                        sample(rng, ranges::MOUTH_OPENNESS)
                    } else {
                        0.0
                    },
                    smile: sample(rng, ranges::MOUTH_SMILE),
                    upper_lip: sample(rng, ranges::UPPER_LIP),
                    lower_lip: sample(rng, ranges::LOWER_LIP),
                    lip_color: {
                        let r = sample(rng, (0.55, 0.9));
                        [r, sample(rng, (0.15, 0.4)), sample(rng, (0.2, 0.45))]
                    },
                }
            }
            Part::Face => {
                into.face = FaceParams {
                    jaw: sample(rng, ranges::JAW),
                    cheek: sample(rng, ranges::CHEEK),
                }
            }
            Part::Body => {
                into.body = BodyParams {
                    neck_half_width: sample(rng, ranges::NECK_HALF_WIDTH),
                    shoulder_half_width: sample(rng, ranges::SHOULDER_HALF_WIDTH),
                    collar: sample(rng, ranges::COLLAR),
                    neckline_depth: sample(rng, ranges::NECKLINE_DEPTH),
                    clothes_color: sample_color(rng, 0.05, 0.95),
                }
            }
        }
    }

    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let mut p = PartParams::placeholder();
        for part in Part::ALL {
            Self::sample_part(part, rng, &mut p);
        }
        p
    }

    fn placeholder() -> Self {
        PartParams {
            hair: HairParams {
                template: 0,
                extent: 0.0,
                color: [0.0; 3],
            },
            eyebrows: EyebrowParams {
                thickness: 0.0,
                angle: 0.0,
                half_length: 0.0,
            },
            eyes: EyeParams {
                radius: 0.0,
                aspect: 0.0,
                iris: [0.0; 3],
            },
            nose: NoseParams {
                half_width: 0.0,
                half_height: 0.0,
            },
            mouth: MouthParams {
                half_width: 0.0,
                openness: 0.0,
                smile: 0.0,
                upper_lip: 0.0,
                lower_lip: 0.0,
                lip_color: [0.0; 3],
            },
            face: FaceParams { jaw: 0.0, cheek: 0.0 },
            body: BodyParams {
                neck_half_width: 0.0,
                shoulder_half_width: 0.0,
                collar: 0.0,
                neckline_depth: 0.0,
                clothes_color: [0.0; 3],
            },
        }
    }

    pub fn in_range(&self) -> bool {
        let m = &self.mouth;
        usize::from(self.hair.template) < HAIR_TEMPLATES
            && in_range(self.hair.extent, ranges::HAIR_EXTENT)
            && in_range(self.eyebrows.thickness, ranges::BROW_THICKNESS)
            && in_range(self.eyebrows.angle, ranges::BROW_ANGLE)
            && in_range(self.eyebrows.half_length, ranges::BROW_HALF_LENGTH)
            && in_range(self.eyes.radius, ranges::EYE_RADIUS)
            && in_range(self.eyes.aspect, ranges::EYE_ASPECT)
            && in_range(self.nose.half_width, ranges::NOSE_HALF_WIDTH)
            && in_range(self.nose.half_height, ranges::NOSE_HALF_HEIGHT)
            && in_range(m.half_width, ranges::MOUTH_HALF_WIDTH)
            && (m.openness == 0.0 || in_range(m.openness, ranges::MOUTH_OPENNESS))
            && in_range(m.smile, ranges::MOUTH_SMILE)
            && in_range(m.upper_lip, ranges::UPPER_LIP)
            && in_range(m.lower_lip, ranges::LOWER_LIP)
            && in_range(self.face.jaw, ranges::JAW)
            && in_range(self.face.cheek, ranges::CHEEK)
            && in_range(self.body.neck_half_width, ranges::NECK_HALF_WIDTH)
            && in_range(self.body.shoulder_half_width, ranges::SHOULDER_HALF_WIDTH)
            && in_range(self.body.collar, ranges::COLLAR)
            && in_range(self.body.neckline_depth, ranges::NECKLINE_DEPTH)
    }
}

/// Everything needed to render one face.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceSpec {
    pub identity: u32,
    pub identity_params: IdentityParams,
    pub part_params: PartParams,
    pub background: [f32; 3],
    pub seed: u64,
}

/// Spec for `seed` with an identity drawn from `identity_pool` reusable people.
pub fn sample_spec(seed: u64, identity_pool: u32) -> Result<FaceSpec> {
    if identity_pool == 0 {
        return Err(Error::InvalidArgument("identity pool must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let identity = rng.random_range(0..identity_pool);
    Ok(sample_spec_with(&mut rng, seed, identity))
}

/// Spec for a fixed identity.
pub fn sample_spec_for_identity(seed: u64, identity: u32) -> FaceSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xFACE));
    sample_spec_with(&mut rng, seed, identity)
}

fn sample_spec_with(rng: &mut ChaCha8Rng, seed: u64, identity: u32) -> FaceSpec {
    let part_params = PartParams::sample(rng);
    let background = {
        let gray = rng.random::<f32>() < 0.3;
        if gray {
            let g = sample(rng, (0.2, 0.8));
            [g, g, g]
        } else {
            sample_color(rng, 0.1, 0.9)
        }
    };
    FaceSpec {
        identity,
        identity_params: IdentityParams::for_identity(identity),
        part_params,
        background,
        seed,
    }
}

impl FaceSpec {
    pub fn in_range(&self) -> bool {
        self.identity_params.in_range()
            && self.part_params.in_range()
            && self.background.iter().all(|&c| (0.0..=1.0).contains(&c))
    }
}

/// Resamples the parameters of one part only.
pub fn mutate_part(spec: &FaceSpec, part: Part, seed: u64) -> FaceSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(spec.seed, seed), part.index() as u64 + 1));
    let mut out = spec.clone();
    PartParams::sample_part(part, &mut rng, &mut out.part_params);
    out
}

/// Same as [`mutate_part`] with a part index, validating the index.
pub fn mutate_part_index(spec: &FaceSpec, part: usize, seed: u64) -> Result<FaceSpec> {
    Ok(mutate_part(spec, Part::from_index(part)?, seed))
}

fn inside_ellipse(du: f32, dv: f32, ru: f32, rv: f32) -> bool {
    (du / ru) * (du / ru) + (dv / rv) * (dv / rv) <= 1.0
}

/// Distance from `p` to the segment `a`-`b`.
fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (abx, aby) = (b.0 - a.0, b.1 - a.1);
    let (apx, apy) = (p.0 - a.0, p.1 - a.1);
    let t = ((apx * abx + apy * aby) / (abx * abx + aby * aby)).clamp(0.0, 1.0);
    let (dx, dy) = (apx - t * abx, apy - t * aby);
    (dx * dx + dy * dy).sqrt()
}

fn scale(c: [f32; 3], k: f32) -> [f32; 3] {
    c.map(|v| (v * k).clamp(0.0, 1.0))
}

fn mix(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * t)
}

/// Per-part shape queries for one spec.
pub struct FaceGeometry<'a> {
    spec: &'a FaceSpec,
}

impl<'a> FaceGeometry<'a> {
    pub fn new(spec: &'a FaceSpec) -> Self {
        FaceGeometry { spec }
    }

    fn hair_back(&self, u: f32, v: f32) -> bool {
        let h = &self.spec.part_params.hair;
        let r = 0.30 + 0.04 * h.extent;
        let (du, dv) = (u - HAIR_CENTER.0, v - HAIR_CENTER.1);
        let cap = |limit: f32| inside_ellipse(du, dv, r, r) && v <= limit;
        match h.template {
            0 => cap(0.50),
            1 => {
                let inner = 0.17;
                let bottom = 0.62 + 0.25 * h.extent;
                cap(0.52) || (du.abs() >= inner && du.abs() <= r - 0.01 && v >= HAIR_CENTER.1 && v <= bottom)
            }
            2 => cap(0.56),
            _ => {
                let theta = dv.atan2(du);
                let spikes = 1.0 + 0.10 * (0.4 + h.extent) * (6.0 * theta).sin().abs();
                inside_ellipse(du, dv, r * spikes, r * spikes) && v <= 0.52 && dv <= 0.0
                    || cap(0.48)
            }
        }
    }

    /// Hair drawn in front of the face.
    fn fringe(&self, u: f32, v: f32) -> bool {
        let h = &self.spec.part_params.hair;
        let r = 0.30 + 0.04 * h.extent;
        let (du, dv) = (u - HAIR_CENTER.0, v - HAIR_CENTER.1);
        if !inside_ellipse(du, dv, r, r) {
            return false;
        }
        match h.template {
            2 => v <= 0.26 + 0.06 * h.extent,
            3 => v <= 0.21 + 0.09 * (u - 0.28).max(0.0) / 0.44 * (0.5 + h.extent),
            _ => false,
        }
    }

    fn face(&self, u: f32, v: f32) -> bool {
        let id = &self.spec.identity_params;
        let f = &self.spec.part_params.face;
        let (du, dv) = (u - FACE_CENTER.0, v - FACE_CENTER.1);
        if dv <= 0.0 {
            return inside_ellipse(du, dv, id.face_half_width, id.face_half_height);
        }
        let t = dv / (id.face_half_height * f.jaw);
        if t > 1.0 {
            return false;
        }
        let half = id.face_half_width * (1.0 - (1.0 - f.cheek) * t) * (1.0 - t * t).sqrt();
        du.abs() <= half
    }

    fn nose(&self, u: f32, v: f32) -> bool {
        let id = &self.spec.identity_params;
        let n = &self.spec.part_params.nose;
        let (du, dv) = (u - NOSE_CENTER.0, v - NOSE_CENTER.1);
        // wider at the bottom: scale the half width linearly along the height
        let hw = n.half_width * id.nose_size * (0.8 + 0.2 * (dv / (n.half_height * id.nose_size)).clamp(-1.0, 1.0));
        inside_ellipse(du, dv, hw, n.half_height * id.nose_size)
    }

    fn mouth(&self, u: f32, v: f32) -> Option<LabelClass> {
        let m = &self.spec.part_params.mouth;
        let x = (u - MOUTH_CENTER.0) / m.half_width;
        if x.abs() > 1.0 {
            return None;
        }
        let taper = 1.0 - x * x;
        let center = MOUTH_CENTER.1 - m.smile * (x * x - 0.3);
        let half_open = 0.5 * m.openness * taper.sqrt();
        let top = center - half_open - m.upper_lip * taper.sqrt();
        let bottom = center + half_open + m.lower_lip * taper.sqrt();
        if v < top || v > bottom {
            return None;
        }
        if v < center - half_open {
            Some(LabelClass::UpperLip)
        } else if v <= center + half_open && m.openness > 0.0 {
            Some(LabelClass::Teeth)
        } else {
            Some(LabelClass::LowerLip)
        }
    }

    fn eye_centers(&self) -> [(f32, f32); 2] {
        let s = self.spec.identity_params.eye_spacing / 2.0;
        [(0.5 - s, EYE_LINE), (0.5 + s, EYE_LINE)]
    }

    /// Returns the position relative to the eye center it falls in.
    fn eye(&self, u: f32, v: f32) -> Option<(f32, f32)> {
        let e = &self.spec.part_params.eyes;
        self.eye_centers().into_iter().find_map(|(cu, cv)| {
            let (du, dv) = (u - cu, v - cv);
            inside_ellipse(du, dv, e.radius, e.radius * e.aspect).then_some((du, dv))
        })
    }

    fn eyebrow(&self, u: f32, v: f32) -> bool {
        let b = &self.spec.part_params.eyebrows;
        self.eye_centers().into_iter().enumerate().any(|(side, (cu, _))| {
            // outer ends lift for positive angles on both sides
            let angle = if side == 0 { b.angle } else { -b.angle };
            let (dx, dy) = (b.half_length * angle.cos(), b.half_length * angle.sin());
            let a = (cu - dx, BROW_LINE + dy);
            let c = (cu + dx, BROW_LINE - dy);
            segment_distance((u, v), a, c) <= b.thickness / 2.0
        })
    }

    fn body(&self, u: f32, v: f32) -> Option<LabelClass> {
        let b = &self.spec.part_params.body;
        let du = u - 0.5;
        let in_clothes = inside_ellipse(du, v - (b.collar + 0.3), b.shoulder_half_width, 0.3);
        if in_clothes {
            let depth = b.neckline_depth;
            let neckline = depth > 0.0 && v <= b.collar + depth && du.abs() <= 0.8 * b.neck_half_width * (1.0 - (v - b.collar) / depth);
            return Some(if neckline { LabelClass::BodySkin } else { LabelClass::Clothes });
        }
        (du.abs() <= b.neck_half_width && v >= 0.6).then_some(LabelClass::BodySkin)
    }

    /// Class of the visible layer at `(u, v)` and the relative position used
    /// for shading.
    pub fn classify(&self, u: f32, v: f32) -> LabelClass {
        self.classify_layers(u, v).0
    }

    fn classify_layers(&self, u: f32, v: f32) -> (LabelClass, Option<(f32, f32)>) {
        if self.fringe(u, v) {
            return (LabelClass::Hair, None);
        }
        if self.eyebrow(u, v) {
            return (LabelClass::Eyebrows, None);
        }
        if let Some(rel) = self.eye(u, v) {
            return (LabelClass::Eyes, Some(rel));
        }
        if let Some(c) = self.mouth(u, v) {
            return (c, None);
        }
        if self.nose(u, v) {
            return (LabelClass::Nose, None);
        }
        if self.face(u, v) {
            return (LabelClass::FaceSkin, None);
        }
        if self.hair_back(u, v) {
            return (LabelClass::Hair, None);
        }
        if let Some(c) = self.body(u, v) {
            return (c, None);
        }
        (LabelClass::Background, None)
    }

    /// Whether `(u, v)` lies in the given part's own shape, ignoring occlusion.
    pub fn part_shape_contains(&self, part: Part, u: f32, v: f32) -> bool {
        match part {
            Part::Hair => self.fringe(u, v) || self.hair_back(u, v),
            Part::Eyebrows => self.eyebrow(u, v),
            Part::Eyes => self.eye(u, v).is_some(),
            Part::Nose => self.nose(u, v),
            Part::Mouth => self.mouth(u, v).is_some(),
            Part::Face => self.face(u, v),
            Part::Body => self.body(u, v).is_some(),
        }
    }

    fn shade(&self, u: f32, v: f32) -> [f32; 3] {
        let spec = self.spec;
        let skin = spec.identity_params.skin_rgb();
        let hair = spec.part_params.hair.color;
        let grain = {
            let h = mix_seed(spec.seed, ((u * 4096.0) as u64) << 20 | (v * 4096.0) as u64);
            ((h >> 40) as f32 / (1u64 << 24) as f32 - 0.5) * 0.04
        };
        let (class, rel) = self.classify_layers(u, v);
        let base = match class {
            LabelClass::Background => mix(spec.background, scale(spec.background, 0.7), v),
            LabelClass::Hair => scale(hair, 0.9 + 0.1 * (u * 60.0).sin()),
            LabelClass::Eyebrows => scale(hair, 0.6),
            LabelClass::Eyes => {
                let e = &spec.part_params.eyes;
                let (du, dv) = rel.unwrap_or((0.0, 0.0));
                let d = (du * du + dv * dv).sqrt() / e.radius;
                if d < 0.25 {
                    [0.05, 0.05, 0.05]
                } else if d < 0.6 {
                    e.iris
                } else {
                    [0.97, 0.97, 0.95]
                }
            }
            LabelClass::Nose => scale(skin, 0.86),
            LabelClass::UpperLip => scale(spec.part_params.mouth.lip_color, 0.85),
            LabelClass::LowerLip => spec.part_params.mouth.lip_color,
            LabelClass::Teeth => [0.96, 0.95, 0.9],
            LabelClass::FaceSkin => {
                let (du, dv) = (u - FACE_CENTER.0, v - FACE_CENTER.1);
                scale(skin, 1.0 - 0.5 * (du * du + dv * dv))
            }
            LabelClass::BodySkin => scale(skin, 0.88),
            LabelClass::Clothes => {
                let c = spec.part_params.body.clothes_color;
                scale(c, 0.92 + 0.08 * ((u + v) * 40.0).sin())
            }
        };
        base.map(|c| (c + grain).clamp(0.0, 1.0))
    }
}

/// Renders the face image (2x supersampled) and its label map (one sample
/// per pixel center, no anti-aliasing).
pub fn render(spec: &FaceSpec, resolution: usize) -> Result<(FaceImage, LabelMap)> {
    if !RESOLUTIONS.contains(&resolution) {
        return Err(Error::UnsupportedResolution(resolution));
    }
    Ok(render_unchecked(spec, resolution))
}

pub(crate) fn render_unchecked(spec: &FaceSpec, resolution: usize) -> (FaceImage, LabelMap) {
    let geo = FaceGeometry::new(spec);
    let n = resolution as f32;
    let mut classes = Vec::with_capacity(resolution * resolution);
    let mut pixels = Vec::with_capacity(resolution * resolution * 3);
    for y in 0..resolution {
        for x in 0..resolution {
            let (u, v) = ((x as f32 + 0.5) / n, (y as f32 + 0.5) / n);
            classes.push(geo.classify(u, v) as u8);
            let mut acc = [0.0f32; 3];
            for (sx, sy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                let c = geo.shade((x as f32 + sx) / n, (y as f32 + sy) / n);
                for i in 0..3 {
                    acc[i] += c[i];
                }
            }
            pixels.extend(acc.map(|c| c / 4.0));
        }
    }
    let image = Image::new(resolution, pixels).expect("render geometry");
    let label = LabelMap::from_classes(resolution, classes).expect("render geometry");
    (image, label)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Path relative to the manifest directory.
    pub image: PathBuf,
    pub label: PathBuf,
    pub identity: u32,
    pub split: Split,
    pub spec: FaceSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub palette_version: String,
    pub resolution: usize,
    pub seed: u64,
    pub identity_pool: u32,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).at(path)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn identities(&self, split: Split) -> BTreeSet<u32> {
        self.split(split).map(|e| e.identity).collect()
    }
}

/// Assigns identities to splits: 80% train, 10% val, 10% test, by identity.
pub fn split_identities(identity_pool: u32, seed: u64) -> Vec<Split> {
    let mut ids: Vec<u32> = (0..identity_pool).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5B117));
    for i in (1..ids.len()).rev() {
        let j = rng.random_range(0..=i);
        ids.swap(i, j);
    }
    let n = identity_pool as usize;
    let n_val = (n as f64 * 0.1).round() as usize;
    let n_test = (n as f64 * 0.1).round() as usize;
    let n_train = n - n_val - n_test;
    let mut splits = vec![Split::Train; n];
    for (rank, &id) in ids.iter().enumerate() {
        splits[id as usize] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

/// Writes `n` image/label PNG pairs and `manifest.json` into `out_dir`.
pub fn generate_dataset(
    n: usize,
    seed: u64,
    identity_pool: u32,
    resolution: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if identity_pool == 0 || n < identity_pool as usize {
        return Err(Error::InvalidArgument(format!(
            "need n >= identity pool >= 1 (n = {n}, pool = {identity_pool})"
        )));
    }
    if !RESOLUTIONS.contains(&resolution) {
        return Err(Error::UnsupportedResolution(resolution));
    }
    std::fs::create_dir_all(out_dir.join("images")).at(out_dir)?;
    std::fs::create_dir_all(out_dir.join("labels")).at(out_dir)?;
    let splits = split_identities(identity_pool, seed);
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let identity = (i % identity_pool as usize) as u32;
        let spec = sample_spec_for_identity(mix_seed(seed, i as u64), identity);
        let (image, label) = render_unchecked(&spec, resolution);
        let id = format!("{i:06}");
        let image_rel = PathBuf::from("images").join(format!("{id}.png"));
        let label_rel = PathBuf::from("labels").join(format!("{id}.png"));
        image.save_png(&out_dir.join(&image_rel))?;
        label.image().save_png(&out_dir.join(&label_rel))?;
        entries.push(ManifestEntry {
            id,
            image: image_rel,
            label: label_rel,
            identity,
            split: splits[identity as usize],
            spec,
        });
    }
    let manifest = DatasetManifest {
        palette_version: PALETTE_VERSION.to_string(),
        resolution,
        seed,
        identity_pool,
        entries,
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labelspace::part_mask;

    #[test]
    fn sampling_is_deterministic_and_in_range() {
        let a = sample_spec(7, 10).unwrap();
        assert_eq!(a, sample_spec(7, 10).unwrap());
        assert!(a.in_range());
        assert!(sample_spec(1, 0).is_err());
    }

    #[test]
    fn single_identity_pool_shares_identity() {
        let first = sample_spec(0, 1).unwrap();
        for s in 1..50 {
            assert_eq!(sample_spec(s, 1).unwrap().identity_params, first.identity_params);
        }
    }

    #[test]
    fn closed_mouth_has_no_teeth() {
        let mut spec = sample_spec(3, 5).unwrap();
        spec.part_params.mouth.openness = 0.0;
        for res in RESOLUTIONS {
            let (_, label) = render(&spec, res).unwrap();
            assert_eq!(label.class_histogram().unwrap()[LabelClass::Teeth.index()], 0);
        }
    }

    #[test]
    fn render_rejects_odd_resolution() {
        let spec = sample_spec(3, 5).unwrap();
        assert!(matches!(render(&spec, 48), Err(Error::UnsupportedResolution(48))));
    }

    #[test]
    fn mutate_touches_only_the_part() {
        let s = sample_spec(11, 4).unwrap();
        let m = mutate_part(&s, Part::Hair, 5);
        assert_eq!(m.identity_params, s.identity_params);
        assert_eq!(m.part_params.nose, s.part_params.nose);
        assert_eq!(m.background, s.background);
        assert_eq!(m, mutate_part(&s, Part::Hair, 5));
        assert!(mutate_part_index(&s, 7, 5).is_err());
    }

    #[test]
    fn nose_mask_matches_unoccluded_rasterization() {
        let mut checked = 0;
        for seed in 0..40 {
            let spec = sample_spec(seed, 20).unwrap();
            let geo = FaceGeometry::new(&spec);
            let (_, label) = render(&spec, 64).unwrap();
            let mask = part_mask(&label, Part::Nose).unwrap();
            let mut area = 0;
            let mut occluded = false;
            for y in 0..64 {
                for x in 0..64 {
                    let (u, v) = ((x as f32 + 0.5) / 64.0, (y as f32 + 0.5) / 64.0);
                    if geo.part_shape_contains(Part::Nose, u, v) {
                        area += 1;
                        occluded |= [Part::Eyes, Part::Mouth, Part::Eyebrows, Part::Hair]
                            .iter()
                            .any(|&p| geo.part_shape_contains(p, u, v));
                    }
                }
            }
            if !occluded {
                assert_eq!(mask.count(), area, "seed {seed}");
                checked += 1;
            }
        }
        assert!(checked > 10);
    }
}
