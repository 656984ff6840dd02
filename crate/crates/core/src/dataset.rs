//! Deterministic synthetic localization benchmark.
//!
//! Each object is a small high-contrast glyph (the "core", unique per class)
//! on a larger low-contrast elliptical body. By default the body is centred on
//! the core with a class-dependent axis and carries faint stripes whose
//! orientation also depends on the class. The core is the easiest cue, so a
//! plain classifier concentrates on it; the body is weaker evidence spread
//! over the rest of the object extent.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{BBox, ImageTruth};
use crate::io::{read_json, write_json, GrayImage};
use crate::tensor::Tensor;

/// Where the body sits relative to the core.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodyLayout {
    /// Every class extends its body to the right of the core.
    Shared,
    /// Class `c` extends its body in direction `c · 90°` (diagonals from class 4 on),
    /// which makes the body direction itself a class cue.
    PerClass,
    /// The body is centred on the core; class `c` orients its axis at `c · 180° / class_count`.
    Axis,
}

/// Number of distinct core glyphs available.
pub const GLYPH_COUNT: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub class_count: usize,
    pub image_size: usize,
    pub channels: usize,
    pub samples: usize,
    /// Inclusive (min, max) object count per image.
    pub objects_per_image: (usize, usize),
    pub core_radius: usize,
    /// Half length of the body along its axis.
    pub body_radius: usize,
    /// Half width of the body across its axis.
    pub body_half_width: usize,
    pub body_layout: BodyLayout,
    pub background_level: f64,
    pub noise_std: f64,
    pub core_contrast: f64,
    pub body_contrast: f64,
    /// Amplitude of class-oriented stripes (period 4 px) on the body; 0 disables them.
    pub body_texture: f64,
    pub multi_label_prob: f64,
    pub rng_seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            class_count: 4,
            image_size: 64,
            channels: 1,
            samples: 600,
            objects_per_image: (1, 2),
            core_radius: 4,
            body_radius: 14,
            body_half_width: 7,
            body_layout: BodyLayout::Axis,
            background_level: 0.2,
            noise_std: 0.05,
            core_contrast: 0.7,
            body_contrast: 0.25,
            body_texture: 0.15,
            multi_label_prob: 0.15,
            rng_seed: 0,
        }
    }
}

/// Offsets (dy, dx) of the rendered parts of one object relative to its core centre.
struct ObjectTemplate {
    core: Vec<(isize, isize)>,
    body: Vec<(isize, isize)>,
    /// Stripe sign (+1 / -1) of each body pixel.
    stripes: Vec<f64>,
}

impl ObjectTemplate {
    fn extent(&self) -> (isize, isize, isize, isize) {
        let all = self.core.iter().chain(&self.body);
        let min_y = all.clone().map(|p| p.0).min().unwrap();
        let max_y = all.clone().map(|p| p.0).max().unwrap();
        let min_x = all.clone().map(|p| p.1).min().unwrap();
        let max_x = all.map(|p| p.1).max().unwrap();
        (min_y, max_y, min_x, max_x)
    }
}

fn glyph_contains(class: usize, dy: isize, dx: isize, r: isize) -> bool {
    let (ay, ax) = (dy.abs(), dx.abs());
    let d2 = dy * dy + dx * dx;
    match class {
        0 => true,
        1 => ay <= 1 || ax <= 1,
        2 => d2 <= r * r && d2 >= (r - 2) * (r - 2),
        3 => (dy - dx).abs() <= 1 || (dy + dx).abs() <= 1,
        4 => d2 <= r * r,
        5 => ay + ax <= r,
        6 => dy.rem_euclid(3) != 1,
        _ => ay >= r - 1 || ax >= r - 1,
    }
}

fn body_angle(layout: BodyLayout, class: usize, class_count: usize) -> f64 {
    match layout {
        BodyLayout::Shared => return 0.0,
        BodyLayout::Axis => return class as f64 * PI / class_count as f64,
        BodyLayout::PerClass => {}
    }
    let quarter = (class % 4) as f64 * PI / 2.0;
    if class < 4 {
        quarter
    } else {
        quarter + PI / 4.0
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.class_count < 2 || self.class_count > GLYPH_COUNT {
            return fail(format!("class_count must be in 2..={GLYPH_COUNT}, got {}", self.class_count));
        }
        if self.channels == 0 {
            return fail("channels must be positive".into());
        }
        let (lo, hi) = self.objects_per_image;
        if lo == 0 || lo > hi {
            return fail(format!("objects_per_image must satisfy 1 <= min <= max, got {lo}..={hi}"));
        }
        if !(0.0..=1.0).contains(&self.multi_label_prob) {
            return fail(format!("multi_label_prob must be in [0, 1], got {}", self.multi_label_prob));
        }
        if self.multi_label_prob > 0.0 && hi < 2 {
            return fail("multi-label images need objects_per_image max >= 2".into());
        }
        if self.core_radius < 2 || self.body_half_width == 0 || self.body_radius < self.body_half_width {
            return fail("need core_radius >= 2 and body_radius >= body_half_width >= 1".into());
        }
        if self.noise_std < 0.0 || self.body_texture < 0.0 {
            return fail("noise_std and body_texture must be non-negative".into());
        }
        for class in 0..self.class_count {
            let (y0, y1, x0, x1) = self.template(class).extent();
            let (h, w) = ((y1 - y0 + 1) as usize, (x1 - x0 + 1) as usize);
            if h > self.image_size || w > self.image_size {
                return fail(format!(
                    "class {class} objects span {h}×{w} pixels and cannot fit a {0}×{0} image",
                    self.image_size
                ));
            }
        }
        Ok(())
    }

    /// Share of images expected to contain any given class.
    pub fn expected_class_share(&self) -> f64 {
        (1.0 + self.multi_label_prob) / self.class_count as f64
    }

    fn template(&self, class: usize) -> ObjectTemplate {
        let r = self.core_radius as isize;
        let mut core = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                if glyph_contains(class, dy, dx, r) {
                    core.push((dy, dx));
                }
            }
        }
        let angle = body_angle(self.body_layout, class, self.class_count);
        let (uy, ux) = (angle.sin(), angle.cos());
        let a = self.body_radius as f64;
        let b = self.body_half_width as f64;
        let offset = match self.body_layout {
            BodyLayout::Axis => 0.0,
            _ => (self.core_radius + 1) as f64 + a,
        };
        let (cy, cx) = (offset * uy, offset * ux);
        let reach = self.body_radius as isize + r + 2 + self.body_radius as isize;
        let mut body = Vec::new();
        let mut stripes = Vec::new();
        let stripe_angle = class as f64 * PI / self.class_count as f64;
        let (sy, sx) = (stripe_angle.sin(), stripe_angle.cos());
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (py, px) = (dy as f64 - cy, dx as f64 - cx);
                let along = py * uy + px * ux;
                let across = -py * ux + px * uy;
                let inside = (along / a).powi(2) + (across / b).powi(2) <= 1.0;
                if inside && !core.contains(&(dy, dx)) {
                    body.push((dy, dx));
                    let phase = (dy as f64 * sy + dx as f64 * sx) * PI / 2.0;
                    stripes.push(if phase.cos() >= 0.0 { 1.0 } else { -1.0 });
                }
            }
        }
        ObjectTemplate { core, body, stripes }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectTruth {
    pub class_id: usize,
    /// (H, W) binary mask of core ∪ body.
    pub mask: Tensor,
    pub core_box: BBox,
    pub body_box: BBox,
    /// Tight box of the whole object.
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    /// (channels, H, W) with values `k / 255`.
    pub image: Tensor,
    pub labels: Vec<f32>,
    pub objects: Vec<ObjectTruth>,
}

impl Sample {
    /// Union of the masks of every object of `class`.
    pub fn class_mask(&self, class: usize) -> Tensor {
        let mut out: Tensor = Tensor::zeros(self.objects[0].mask.shape());
        for o in self.objects.iter().filter(|o| o.class_id == class) {
            for (d, &m) in out.data_mut().iter_mut().zip(o.mask.data()) {
                *d = d.max(m);
            }
        }
        out
    }

    pub fn present_classes(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&c| self.labels[c] != 0.0).collect()
    }

    pub fn truth(&self) -> ImageTruth {
        let (_, h, w) = (self.image.shape()[0], self.image.shape()[1], self.image.shape()[2]);
        ImageTruth {
            image_id: self.id,
            height: h,
            width: w,
            boxes: self.objects.iter().map(|o| (o.class_id, o.bbox)).collect(),
        }
    }

    pub fn gray(&self) -> GrayImage {
        let (h, w) = (self.image.shape()[1], self.image.shape()[2]);
        let pixels = self.image.data()[..h * w]
            .iter()
            .map(|&v| (v * 255.0).round() as u8)
            .collect();
        GrayImage::new(w, h, pixels)
    }

    /// The image as a (1, C, H, W) batch.
    pub fn batch(&self) -> Tensor {
        let s = self.image.shape();
        self.image.clone().reshape(&[1, s[0], s[1], s[2]]).expect("rank-3 image")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SynthSpec,
    pub samples: Vec<Sample>,
}

fn tight_box(points: impl Iterator<Item = (usize, usize)>) -> BBox {
    let mut b = BBox {
        top: usize::MAX,
        left: usize::MAX,
        bottom: 0,
        right: 0,
    };
    for (r, c) in points {
        b.top = b.top.min(r);
        b.left = b.left.min(c);
        b.bottom = b.bottom.max(r);
        b.right = b.right.max(c);
    }
    b
}

fn boxes_touch(a: &BBox, b: &BBox, margin: usize) -> bool {
    a.top <= b.bottom + margin && b.top <= a.bottom + margin && a.left <= b.right + margin && b.left <= a.right + margin
}

fn generate_sample(spec: &SynthSpec, templates: &[ObjectTemplate], index: usize) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    rng.set_stream(index as u64);
    let size = spec.image_size;
    let (lo, hi) = spec.objects_per_image;
    let multi = rng.gen_bool(spec.multi_label_prob);
    let mut count = rng.gen_range(lo..=hi);
    let classes: Vec<usize> = if multi {
        count = count.max(2);
        let a = rng.gen_range(0..spec.class_count);
        let b = (a + rng.gen_range(1..spec.class_count)) % spec.class_count;
        vec![a, b]
    } else {
        vec![rng.gen_range(0..spec.class_count)]
    };
    let mut object_classes = classes.clone();
    while object_classes.len() < count {
        object_classes.push(classes[rng.gen_range(0..classes.len())]);
    }

    // place objects without overlap, restarting the layout when crowded
    let mut placed: Vec<(usize, isize, isize, BBox)> = Vec::new();
    'layout: for _ in 0..100 {
        placed.clear();
        for &class in &object_classes {
            let (y0, y1, x0, x1) = templates[class].extent();
            let mut ok = false;
            for _ in 0..50 {
                let cy = rng.gen_range(-y0..=(size as isize - 1 - y1));
                let cx = rng.gen_range(-x0..=(size as isize - 1 - x1));
                let bbox = BBox {
                    top: (cy + y0) as usize,
                    left: (cx + x0) as usize,
                    bottom: (cy + y1) as usize,
                    right: (cx + x1) as usize,
                };
                if placed.iter().all(|p| !boxes_touch(&p.3, &bbox, 1)) {
                    placed.push((class, cy, cx, bbox));
                    ok = true;
                    break;
                }
            }
            if !ok {
                continue 'layout;
            }
        }
        break;
    }
    if placed.len() != object_classes.len() {
        return Err(Error::Config(format!(
            "could not place {} non-overlapping objects in a {size}×{size} image",
            object_classes.len()
        )));
    }

    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).unwrap();
    let mut values: Vec<f64> = (0..size * size)
        .map(|_| spec.background_level + if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 })
        .collect();
    let mut objects = Vec::with_capacity(placed.len());
    for &(class, cy, cx, bbox) in &placed {
        let t = &templates[class];
        let at = |(dy, dx): (isize, isize)| ((cy + dy) as usize, (cx + dx) as usize);
        let mut mask = Tensor::zeros(&[size, size]);
        for (&p, &stripe) in t.body.iter().zip(&t.stripes) {
            let (r, c) = at(p);
            values[r * size + c] += spec.body_contrast + spec.body_texture * stripe;
            mask.data_mut()[r * size + c] = 1.0;
        }
        for &p in &t.core {
            let (r, c) = at(p);
            values[r * size + c] += spec.core_contrast;
            mask.data_mut()[r * size + c] = 1.0;
        }
        objects.push(ObjectTruth {
            class_id: class,
            mask,
            core_box: tight_box(t.core.iter().map(|&p| at(p))),
            body_box: tight_box(t.body.iter().map(|&p| at(p))),
            bbox,
        });
    }
    let gray: Vec<f32> = values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8 as f32 / 255.0)
        .collect();
    let mut data = Vec::with_capacity(gray.len() * spec.channels);
    for _ in 0..spec.channels {
        data.extend_from_slice(&gray);
    }
    let mut labels = vec![0.0; spec.class_count];
    for &c in &classes {
        labels[c] = 1.0;
    }
    Ok(Sample {
        id: index,
        image: Tensor::new(&[spec.channels, size, size], data)?,
        labels,
        objects,
    })
}

/// Generates `spec.samples` images; sample `i` depends only on `(rng_seed, i)`.
pub fn generate_dataset(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let templates: Vec<_> = (0..spec.class_count).map(|c| spec.template(c)).collect();
    let samples = (0..spec.samples)
        .into_par_iter()
        .map(|i| generate_sample(spec, &templates, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        samples,
    })
}

impl Dataset {
    /// Splits off the samples from `at` onward.
    pub fn split_off(&mut self, at: usize) -> Dataset {
        Dataset {
            spec: self.spec.clone(),
            samples: self.samples.split_off(at.min(self.samples.len())),
        }
    }

    pub fn truths(&self) -> Vec<ImageTruth> {
        self.samples.iter().map(Sample::truth).collect()
    }

    /// FNV-1a over image bits, labels and boxes.
    pub fn checksum(&self) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x100_0000_01b3);
            }
        };
        for s in &self.samples {
            feed(&(s.id as u64).to_le_bytes());
            for v in s.image.data().iter().chain(&s.labels) {
                feed(&v.to_bits().to_le_bytes());
            }
            for o in &s.objects {
                for b in [o.bbox, o.core_box, o.body_box] {
                    for v in [b.top, b.left, b.bottom, b.right] {
                        feed(&(v as u64).to_le_bytes());
                    }
                }
                for v in o.mask.data() {
                    feed(&v.to_bits().to_le_bytes());
                }
            }
        }
        hash
    }
}

pub const MANIFEST_SCHEMA: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: u32,
    pub seed: u64,
    pub spec: SynthSpec,
    pub samples: Vec<ManifestSample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestSample {
    pub id: usize,
    pub image: String,
    pub labels: Vec<u8>,
    pub objects: Vec<ManifestObject>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestObject {
    pub class_id: usize,
    pub mask: String,
    pub mask_pixels: usize,
    pub bbox: BBox,
    pub core_box: BBox,
    pub body_box: BBox,
}

/// Writes PGM images and masks plus `manifest.json` into `dir`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let mut entries = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        let image = format!("img_{:05}.pgm", s.id);
        s.gray().save(&dir.join(&image))?;
        let mut objects = Vec::new();
        for (k, o) in s.objects.iter().enumerate() {
            let mask = format!("mask_{:05}_{k}.pgm", s.id);
            GrayImage::from_binary(&o.mask)?.save(&dir.join(&mask))?;
            objects.push(ManifestObject {
                class_id: o.class_id,
                mask,
                mask_pixels: o.mask.data().iter().filter(|&&v| v != 0.0).count(),
                bbox: o.bbox,
                core_box: o.core_box,
                body_box: o.body_box,
            });
        }
        entries.push(ManifestSample {
            id: s.id,
            image,
            labels: s.labels.iter().map(|&y| y as u8).collect(),
            objects,
        });
    }
    write_json(
        &dir.join(MANIFEST_FILE),
        &Manifest {
            schema: MANIFEST_SCHEMA,
            seed: dataset.spec.rng_seed,
            spec: dataset.spec.clone(),
            samples: entries,
        },
    )
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
    if manifest.schema != MANIFEST_SCHEMA {
        return Err(Error::format(
            "dataset manifest",
            format!("unsupported schema {}", manifest.schema),
        ));
    }
    let spec = manifest.spec;
    let size = spec.image_size;
    let entry_err = |id: usize, file: &str, e: Error| {
        Error::format(format!("dataset manifest entry {id} ({file})"), e.to_string())
    };
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in manifest.samples {
        let img = GrayImage::load(&dir.join(&entry.image)).map_err(|e| entry_err(entry.id, &entry.image, e))?;
        if (img.width, img.height) != (size, size) {
            return Err(entry_err(entry.id, &entry.image, Error::Config("image size differs from spec".into())));
        }
        let gray: Vec<f32> = img.pixels.iter().map(|&p| p as f32 / 255.0).collect();
        let mut data = Vec::with_capacity(gray.len() * spec.channels);
        for _ in 0..spec.channels {
            data.extend_from_slice(&gray);
        }
        let mut objects = Vec::new();
        for o in entry.objects {
            let m = GrayImage::load(&dir.join(&o.mask)).map_err(|e| entry_err(entry.id, &o.mask, e))?;
            if (m.width, m.height) != (size, size) {
                return Err(entry_err(entry.id, &o.mask, Error::Config("mask size differs from spec".into())));
            }
            let mask = Tensor::new(&[size, size], m.pixels.iter().map(|&p| if p != 0 { 1.0 } else { 0.0 }).collect())?;
            objects.push(ObjectTruth {
                class_id: o.class_id,
                mask,
                core_box: o.core_box,
                body_box: o.body_box,
                bbox: o.bbox,
            });
        }
        samples.push(Sample {
            id: entry.id,
            image: Tensor::new(&[spec.channels, size, size], data)?,
            labels: entry.labels.iter().map(|&y| y as f32).collect(),
            objects,
        });
    }
    Ok(Dataset { spec, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(samples: usize, seed: u64) -> SynthSpec {
        SynthSpec {
            samples,
            rng_seed: seed,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn empty_dataset() {
        assert!(generate_dataset(&small(0, 1)).unwrap().samples.is_empty());
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_dataset(&small(20, 3)).unwrap();
        let b = generate_dataset(&small(20, 3)).unwrap();
        let c = generate_dataset(&small(20, 4)).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
        // sample i does not depend on how many samples follow it
        let longer = generate_dataset(&small(25, 3)).unwrap();
        assert_eq!(longer.samples[..20], a.samples[..]);
    }

    #[test]
    fn sample_invariants() {
        let d = generate_dataset(&small(200, 9)).unwrap();
        for s in &d.samples {
            assert!(!s.objects.is_empty());
            for c in s.present_classes() {
                assert!(s.objects.iter().any(|o| o.class_id == c));
            }
            for o in &s.objects {
                assert_eq!(s.labels[o.class_id], 1.0);
                assert!(o.bbox.bottom < 64 && o.bbox.right < 64);
                assert!(o.core_box.iou(&o.body_box) < 0.2);
                // core box lies in the object mask region
                for r in o.core_box.top..=o.core_box.bottom {
                    for c in o.core_box.left..=o.core_box.right {
                        assert!(o.bbox.contains_within(r, c, 0));
                    }
                }
                // boxes are tight around the rendered mask
                let ones: Vec<usize> = (0..64 * 64).filter(|&i| o.mask.data()[i] == 1.0).collect();
                assert_eq!(tight_box(ones.iter().map(|&i| (i / 64, i % 64))), o.bbox);
            }
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn body_stripes_alternate() {
        let spec = SynthSpec {
            noise_std: 0.0,
            body_texture: 0.1,
            multi_label_prob: 0.0,
            objects_per_image: (1, 1),
            ..small(4, 2)
        };
        let d = generate_dataset(&spec).unwrap();
        let quantize = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        let bright = quantize(0.2 + 0.25 + 0.1) as f32;
        let dark = quantize(0.2 + 0.25 - 0.1) as f32;
        for s in &d.samples {
            let o = &s.objects[0];
            let core = spec.template(o.class_id).core.len();
            let body: Vec<f32> = (0..64 * 64)
                .filter(|&i| o.mask.data()[i] == 1.0)
                .map(|i| s.image.data()[i])
                .filter(|&v| v < 0.8)
                .collect();
            assert_eq!(body.len() + core, o.mask.data().iter().filter(|&&m| m == 1.0).count());
            assert!(body.iter().all(|&v| v == bright || v == dark));
            assert!(body.contains(&bright) && body.contains(&dark));
        }
    }

    #[test]
    fn rejects_unfittable_spec() {
        let spec = SynthSpec {
            image_size: 20,
            ..small(1, 0)
        };
        let err = generate_dataset(&spec).unwrap_err().to_string();
        assert!(err.contains("cannot fit"), "{err}");
        assert!(generate_dataset(&SynthSpec { class_count: 9, ..small(1, 0) }).is_err());
    }

    #[test]
    fn glyphs_are_distinct() {
        let spec = SynthSpec::default();
        let cores: Vec<_> = (0..GLYPH_COUNT)
            .map(|c| {
                let mut v = spec.template(c).core;
                v.sort();
                v
            })
            .collect();
        for i in 0..GLYPH_COUNT {
            for j in i + 1..GLYPH_COUNT {
                assert_ne!(cores[i], cores[j], "glyphs {i} and {j}");
            }
        }
    }
}
