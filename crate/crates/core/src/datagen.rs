//! Procedural forgery dataset.
//!
//! "Faces" are soft blob composites (oval, eyes, mouth) over a smooth
//! background with fine per-pixel texture. Forgeries re-synthesize the whole
//! image (EFS), one facial component (AM) or the inner face (FS) through a
//! generator simulation whose artifacts depend on the family: diffusion sims
//! low-pass the content and add strong band-limited noise, GAN sims keep the
//! texture and add a faint checkerboard.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::{level_sentences, Family, ForgeryType, Labels};
use crate::vd::{gt_mask, BinaryMask};

/// Threshold used to derive AM/FS masks from the pristine source.
pub const MASK_THRESHOLD: f64 = 0.1;
const BLOB_MAGIC: u32 = u32::from_le_bytes(*b"MFVS");
const MANIFEST: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    /// 3×H×W in [0, 1], single-precision representable.
    pub image: Tensor,
    pub mask: BinaryMask,
    pub labels: Labels,
    /// L1–L4 prompt sentences.
    pub prompt: [String; 4],
    /// Pristine image an AM/FS forgery was made from.
    pub source: Option<Tensor>,
}

impl ImageSample {
    pub fn class(&self) -> usize {
        self.labels.class()
    }
}

/// Artifact process of one simulated generator.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSim {
    pub name: &'static str,
    pub family: Family,
    /// Diffusion: std of the white noise before band-limiting.
    /// GAN: checkerboard amplitude.
    pub strength: f64,
}

impl GeneratorSim {
    pub fn all() -> Vec<GeneratorSim> {
        let mut out = Vec::new();
        for family in Family::ALL {
            for (k, &name) in family.generators().iter().enumerate() {
                let strength = match family {
                    Family::Diffusion => 0.45 + 0.05 * k as f64,
                    Family::Gan => 0.05 + 0.01 * k as f64,
                };
                out.push(GeneratorSim { name, family, strength });
            }
        }
        out
    }

    pub fn by_name(name: &str) -> Result<GeneratorSim> {
        Self::all()
            .into_iter()
            .find(|g| g.name == name)
            .ok_or_else(|| Error::Taxonomy(format!("unknown generator {name:?}")))
    }

    /// Rewrites the pixels selected by `region` with this generator's
    /// rendition of `content`.
    fn apply(&self, content: &Tensor, region: &[bool], out: &mut Tensor, rng: &mut ChaCha8Rng) {
        let (_, h, w) = content.dims3().expect("image");
        let plane = h * w;
        match self.family {
            Family::Diffusion => {
                let smooth = box_blur(&box_blur(content));
                let noise = Normal::new(0.0, self.strength).expect("valid std");
                let white = Tensor::from_parts(
                    vec![3, h, w],
                    (0..3 * plane).map(|_| noise.sample(rng)).collect(),
                );
                let band = box_blur(&white);
                for c in 0..3 {
                    for p in (0..plane).filter(|&p| region[p]) {
                        let i = c * plane + p;
                        out.data_mut()[i] = smooth.data()[i] + band.data()[i];
                    }
                }
            }
            Family::Gan => {
                let tex = Normal::new(0.0, TEXTURE_STD).expect("valid std");
                for c in 0..3 {
                    let sign = if c == 1 { -1.0 } else { 1.0 };
                    for p in (0..plane).filter(|&p| region[p]) {
                        let (y, x) = (p / w, p % w);
                        let checker = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
                        let i = c * plane + p;
                        out.data_mut()[i] = content.data()[i] + tex.sample(rng) + sign * checker * self.strength;
                    }
                }
            }
        }
        finish(out);
    }
}

const TEXTURE_STD: f64 = 0.02;

/// Clamps to [0, 1] and rounds to single precision.
fn finish(img: &mut Tensor) {
    for v in img.data_mut() {
        *v = (v.clamp(0.0, 1.0) as f32) as f64;
    }
}

/// 3×3 mean filter with edge replication, applied per channel.
pub fn box_blur(img: &Tensor) -> Tensor {
    let (c, h, w) = img.dims3().expect("image");
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for dy in [-1isize, 0, 1] {
                    for dx in [-1isize, 0, 1] {
                        let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        s += img.data()[base + yy * w + xx];
                    }
                }
                out[base + y * w + x] = s / 9.0;
            }
        }
    }
    Tensor::from_parts(vec![c, h, w], out)
}

#[derive(Clone, Debug)]
struct Face {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    skin: [f64; 3],
    eye_dx: f64,
    eye_y: f64,
    eye_r: f64,
    eye: [f64; 3],
    mouth_y: f64,
    mouth_w: f64,
    mouth_h: f64,
    mouth: [f64; 3],
    bg: [[f64; 3]; 2],
    wave: (f64, f64, f64),
}

fn color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    std::array::from_fn(|_| rng.random_range(lo..hi))
}

impl Face {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let base = rng.random_range(0.45..0.8);
        let skin = [
            (base + 0.12f64).min(0.95),
            base,
            (base - rng.random_range(0.05..0.15)).max(0.2),
        ];
        Face {
            cx: rng.random_range(0.45..0.55),
            cy: rng.random_range(0.45..0.55),
            rx: rng.random_range(0.26..0.32),
            ry: rng.random_range(0.32..0.4),
            skin,
            eye_dx: rng.random_range(0.09..0.13),
            eye_y: rng.random_range(-0.12..-0.06),
            eye_r: rng.random_range(0.03..0.05),
            eye: color(rng, 0.02, 0.25),
            mouth_y: rng.random_range(0.12..0.18),
            mouth_w: rng.random_range(0.07..0.11),
            mouth_h: rng.random_range(0.025..0.04),
            mouth: [rng.random_range(0.55..0.85), rng.random_range(0.1..0.3), rng.random_range(0.1..0.3)],
            bg: [color(rng, 0.05, 0.5), color(rng, 0.2, 0.7)],
            wave: (
                rng.random_range(0.3..1.2),
                rng.random_range(0.3..1.2),
                rng.random_range(0.0..std::f64::consts::TAU),
            ),
        }
    }

    /// Same geometry, new appearance.
    fn other_identity(&self, rng: &mut ChaCha8Rng) -> Self {
        let fresh = Face::sample(rng);
        Face {
            cx: self.cx,
            cy: self.cy,
            rx: self.rx,
            ry: self.ry,
            ..fresh
        }
    }

    fn render(&self, size: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let plane = size * size;
        let mut data = vec![0.0; 3 * plane];
        let tex = Normal::new(0.0, TEXTURE_STD).expect("valid std");
        for y in 0..size {
            for x in 0..size {
                let (u, v) = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
                let (fx, fy, ph) = self.wave;
                let t = 0.5 + 0.5 * (std::f64::consts::TAU * (fx * u + fy * v) + ph).sin();
                let q = ((u - self.cx) / self.rx).powi(2) + ((v - self.cy) / self.ry).powi(2);
                let a_face = (-0.5 * q * q).exp();
                let gauss = |dx: f64, dy: f64, sx: f64, sy: f64| (-0.5 * ((dx / sx).powi(2) + (dy / sy).powi(2))).exp();
                let ey = self.cy + self.eye_y;
                let a_eye = gauss(u - self.cx + self.eye_dx, v - ey, self.eye_r, self.eye_r)
                    .max(gauss(u - self.cx - self.eye_dx, v - ey, self.eye_r, self.eye_r));
                let a_mouth = gauss(u - self.cx, v - self.cy - self.mouth_y, self.mouth_w, self.mouth_h);
                for c in 0..3 {
                    let bg = self.bg[0][c] + (self.bg[1][c] - self.bg[0][c]) * t;
                    let mut px = bg + (self.skin[c] - bg) * a_face;
                    px += (self.eye[c] - px) * a_eye * a_face;
                    px += (self.mouth[c] - px) * a_mouth * a_face;
                    data[c * plane + y * size + x] = px;
                }
            }
        }
        for d in data.iter_mut() {
            *d += tex.sample(rng);
        }
        let mut img = Tensor::from_parts(vec![3, size, size], data);
        finish(&mut img);
        img
    }

    /// Pixel box `(y0, y1, x0, x1)` (exclusive ends) around a component.
    fn bbox(&self, size: usize, cx: f64, cy: f64, hw: f64, hh: f64) -> (usize, usize, usize, usize) {
        let px = |v: f64| ((v * size as f64).round().max(0.0) as usize).min(size);
        (px(cy - hh), px(cy + hh), px(cx - hw), px(cx + hw))
    }
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn check_size(size: usize) -> Result<()> {
    if size < 16 || !size.is_power_of_two() {
        return Err(Error::Contract(format!("image size {size} must be a power of two ≥ 16")));
    }
    Ok(())
}

pub fn gen_real(seed: u64, index: u64, size: usize) -> Result<ImageSample> {
    check_size(size)?;
    let mut rng = sample_rng(seed, index);
    let image = Face::sample(&mut rng).render(size, &mut rng);
    let labels = Labels::real();
    Ok(ImageSample {
        image,
        mask: BinaryMask::zeros(size, size),
        prompt: level_sentences(&labels)?,
        labels,
        source: None,
    })
}

pub fn gen_fake(seed: u64, index: u64, size: usize, sim: &GeneratorSim, forgery: ForgeryType) -> Result<ImageSample> {
    check_size(size)?;
    let mut rng = sample_rng(seed, index);
    let face = Face::sample(&mut rng);
    let labels = Labels::fake(forgery, sim.family, sim.name);
    let prompt = level_sentences(&labels)?;
    let plane = size * size;

    if forgery == ForgeryType::Efs {
        let content = face.render(size, &mut rng);
        let mut image = content.clone();
        sim.apply(&content, &vec![true; plane], &mut image, &mut rng);
        return Ok(ImageSample {
            image,
            mask: BinaryMask::ones(size, size),
            labels,
            prompt,
            source: None,
        });
    }

    let source = face.render(size, &mut rng);
    let (region, candidate) = match forgery {
        ForgeryType::Am => {
            let mut edited = face.clone();
            let (cx, cy, hw, hh);
            if rng.random_bool(0.5) {
                edited.mouth = color(&mut rng, 0.0, 1.0);
                edited.mouth_h *= rng.random_range(1.3..1.8);
                (cx, cy) = (face.cx, face.cy + face.mouth_y);
                (hw, hh) = (2.0 * face.mouth_w, 2.5 * face.mouth_h);
            } else {
                edited.eye = color(&mut rng, 0.4, 1.0);
                edited.eye_r *= rng.random_range(1.2..1.5);
                (cx, cy) = (face.cx, face.cy + face.eye_y);
                (hw, hh) = (face.eye_dx + 2.5 * face.eye_r, 2.5 * face.eye_r);
            }
            let (y0, y1, x0, x1) = face.bbox(size, cx, cy, hw, hh);
            let region: Vec<bool> = (0..plane)
                .map(|p| (y0..y1).contains(&(p / size)) && (x0..x1).contains(&(p % size)))
                .collect();
            (region, edited.render(size, &mut rng))
        }
        ForgeryType::Fs => {
            let other = face.other_identity(&mut rng);
            let region: Vec<bool> = (0..plane)
                .map(|p| {
                    let (u, v) = (((p % size) as f64 + 0.5) / size as f64, ((p / size) as f64 + 0.5) / size as f64);
                    ((u - face.cx) / (0.7 * face.rx)).powi(2) + ((v - face.cy) / (0.75 * face.ry)).powi(2) <= 1.0
                })
                .collect();
            (region, other.render(size, &mut rng))
        }
        ForgeryType::Efs => unreachable!(),
    };

    // Where the new content is too close to the source, push it away so the
    // edit stays visible at the mask threshold.
    let mut content = source.clone();
    for p in (0..plane).filter(|&p| region[p]) {
        let gap = (0..3)
            .map(|c| (candidate.data()[c * plane + p] - source.data()[c * plane + p]).abs())
            .sum::<f64>()
            / 3.0;
        for c in 0..3 {
            let i = c * plane + p;
            let s = source.data()[i];
            content.data_mut()[i] = if gap > 0.2 {
                candidate.data()[i]
            } else if s < 0.5 {
                s + 0.3
            } else {
                s - 0.3
            };
        }
    }
    let mut image = source.clone();
    sim.apply(&content, &region, &mut image, &mut rng);
    let mask = gt_mask(&image, &source, MASK_THRESHOLD)?;
    Ok(ImageSample {
        image,
        mask,
        labels,
        prompt,
        source: Some(source),
    })
}

/// Everything a generated dataset is a pure function of.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    pub n: usize,
    pub size: usize,
    /// Relative weights of real : efs : am : fs.
    pub mix: [u32; 4],
    pub families: Vec<Family>,
}

impl DatasetSpec {
    pub fn new(seed: u64, n: usize, size: usize) -> Self {
        Self {
            seed,
            n,
            size,
            mix: [3, 1, 1, 1],
            families: Family::ALL.to_vec(),
        }
    }

    /// Parses `real:efs:am:fs`.
    pub fn parse_mix(s: &str) -> Result<[u32; 4]> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::Contract(format!("mix {s:?} must be four non-negative integers a:b:c:d"));
        if parts.len() != 4 {
            return Err(bad());
        }
        let mut mix = [0u32; 4];
        for (m, p) in mix.iter_mut().zip(parts) {
            *m = p.trim().parse().map_err(|_| bad())?;
        }
        if mix.iter().all(|&m| m == 0) {
            return Err(bad());
        }
        Ok(mix)
    }

    /// Exact per-kind counts by largest remainder (ties to the earlier kind).
    pub fn counts(&self) -> Result<[usize; 4]> {
        let total: u64 = self.mix.iter().map(|&m| m as u64).sum();
        if total == 0 {
            return Err(Error::Contract("mix weights are all zero".into()));
        }
        let n = self.n as u64;
        let mut counts = [0usize; 4];
        let mut rem = [0u64; 4];
        for k in 0..4 {
            counts[k] = (n * self.mix[k] as u64 / total) as usize;
            rem[k] = n * self.mix[k] as u64 % total;
        }
        let mut left = self.n - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| rem[b].cmp(&rem[a]).then(a.cmp(&b)));
        for k in order {
            if left == 0 {
                break;
            }
            if self.mix[k] > 0 {
                counts[k] += 1;
                left -= 1;
            }
        }
        Ok(counts)
    }

    /// Sample kinds in generation order: `None` for real, else the forgery
    /// type and simulator.
    pub fn plan(&self) -> Result<Vec<Option<(ForgeryType, GeneratorSim)>>> {
        check_size(self.size)?;
        let counts = self.counts()?;
        if counts[1..].iter().any(|&c| c > 0) && self.families.is_empty() {
            return Err(Error::Contract("fake samples requested without generator families".into()));
        }
        let sims: Vec<GeneratorSim> = GeneratorSim::all()
            .into_iter()
            .filter(|g| self.families.contains(&g.family))
            .collect();
        let mut kinds = Vec::with_capacity(self.n);
        kinds.extend(std::iter::repeat_n(None, counts[0]));
        let mut fake_idx = 0usize;
        for (k, forgery) in ForgeryType::ALL.into_iter().enumerate() {
            for _ in 0..counts[k + 1] {
                // cycle families first so every family sees every forgery type
                let fam = self.families[fake_idx % self.families.len()];
                let of_family: Vec<&GeneratorSim> = sims.iter().filter(|g| g.family == fam).collect();
                let sim = of_family[(fake_idx / self.families.len()) % of_family.len()].clone();
                kinds.push(Some((forgery, sim)));
                fake_idx += 1;
            }
        }
        // deterministic interleave so batches mix classes
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x005E_ED0F_DA7A);
        for i in (1..kinds.len()).rev() {
            let j = rng.random_range(0..=i);
            kinds.swap(i, j);
        }
        Ok(kinds)
    }
}

/// Generates the whole dataset; samples are independent, so this runs on
/// the current rayon pool.
pub fn generate(spec: &DatasetSpec) -> Result<Vec<ImageSample>> {
    let plan = spec.plan()?;
    plan.into_par_iter()
        .enumerate()
        .map(|(i, kind)| match kind {
            None => gen_real(spec.seed, i as u64, spec.size),
            Some((forgery, sim)) => gen_fake(spec.seed, i as u64, spec.size, &sim, forgery),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub bytes: u64,
    pub crc32: u32,
    pub labels: Labels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub spec: Option<DatasetSpec>,
    pub samples: Vec<ManifestEntry>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

fn put_image(buf: &mut Vec<u8>, t: &Tensor) {
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Serialized sample: magic, H, W, image (f32), mask bytes, four labels,
/// four prompt sentences, source flag and optional source image, CRC32.
pub fn encode_sample(s: &ImageSample) -> Result<Vec<u8>> {
    let (c, h, w) = s.image.dims3()?;
    if c != 3 || (s.mask.height, s.mask.width) != (h, w) {
        return Err(Error::Format("sample image and mask sizes disagree".into()));
    }
    let mut buf = Vec::with_capacity(16 + 13 * h * w);
    put_u32(&mut buf, BLOB_MAGIC);
    put_u32(&mut buf, h as u32);
    put_u32(&mut buf, w as u32);
    put_image(&mut buf, &s.image);
    buf.extend_from_slice(&s.mask.data);
    for l in [&s.labels.l1, &s.labels.l2, &s.labels.l3, &s.labels.l4] {
        put_str(&mut buf, l);
    }
    for p in &s.prompt {
        put_str(&mut buf, p);
    }
    match &s.source {
        None => buf.push(0),
        Some(src) => {
            if src.shape() != s.image.shape() {
                return Err(Error::Format("source image size differs".into()));
            }
            buf.push(1);
            put_image(&mut buf, src);
        }
    }
    let crc = crc32fast::hash(&buf);
    put_u32(&mut buf, crc);
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("sample blob ends early".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(format!("label text: {e}")))
    }

    fn image(&mut self, h: usize, w: usize) -> Result<Tensor> {
        let raw = self.take(4 * 3 * h * w)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        Tensor::new(&[3, h, w], data)
    }
}

pub fn decode_sample(bytes: &[u8], file: &str) -> Result<ImageSample> {
    if bytes.len() < 4 {
        return Err(Error::Format(format!("{file}: blob too short")));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let expected = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    let found = crc32fast::hash(body);
    if expected != found {
        return Err(Error::Checksum {
            file: file.into(),
            expected,
            found,
        });
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.u32()? != BLOB_MAGIC {
        return Err(Error::Format(format!("{file}: bad sample magic")));
    }
    let (h, w) = (r.u32()? as usize, r.u32()? as usize);
    let image = r.image(h, w)?;
    let mask_data = r.take(h * w)?.to_vec();
    if mask_data.iter().any(|&m| m > 1) {
        return Err(Error::Format(format!("{file}: mask is not binary")));
    }
    let labels = Labels {
        l1: r.string()?,
        l2: r.string()?,
        l3: r.string()?,
        l4: r.string()?,
    };
    let prompt = [r.string()?, r.string()?, r.string()?, r.string()?];
    let source = match r.take(1)?[0] {
        0 => None,
        1 => Some(r.image(h, w)?),
        f => return Err(Error::Format(format!("{file}: bad source flag {f}"))),
    };
    if r.pos != body.len() {
        return Err(Error::Format(format!("{file}: trailing bytes")));
    }
    labels.validate()?;
    Ok(ImageSample {
        image,
        mask: BinaryMask {
            height: h,
            width: w,
            data: mask_data,
        },
        labels,
        prompt,
        source,
    })
}

/// Writes one blob per sample, then the manifest.
pub fn write_dataset(samples: &[ImageSample], dir: &Path, spec: Option<&DatasetSpec>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let entries = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let blob = encode_sample(s)?;
            let file = format!("sample_{i:06}.bin");
            fs::write(dir.join(&file), &blob)?;
            Ok(ManifestEntry {
                file,
                bytes: blob.len() as u64,
                crc32: crc32fast::hash(&blob),
                labels: s.labels.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        version: FORMAT_VERSION,
        spec: spec.cloned(),
        samples: entries,
    };
    let mut f = fs::File::create(dir.join(MANIFEST))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Format(format!("cannot read manifest {}: {e}", path.display())))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.version != FORMAT_VERSION {
        return Err(Error::Format(format!("dataset version {} unsupported", m.version)));
    }
    Ok(m)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<ImageSample>> {
    let m = read_manifest(dir)?;
    m.samples
        .par_iter()
        .map(|e| {
            let bytes = fs::read(dir.join(&e.file))?;
            let found = crc32fast::hash(&bytes);
            if found != e.crc32 {
                return Err(Error::Checksum {
                    file: e.file.clone(),
                    expected: e.crc32,
                    found,
                });
            }
            if bytes.len() as u64 != e.bytes {
                return Err(Error::Format(format!("{}: {} bytes, manifest says {}", e.file, bytes.len(), e.bytes)));
            }
            let s = decode_sample(&bytes, &e.file)?;
            if s.labels != e.labels {
                return Err(Error::Format(format!("{}: labels disagree with the manifest", e.file)));
            }
            Ok(s)
        })
        .collect()
}

fn symmetric(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Numeric(format!("{name} is not square")));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-9 * scale {
        return Err(Error::Numeric(format!("{name} is not symmetric")));
    }
    Ok(())
}

/// Eigenvalues of a symmetric matrix, with small negatives clamped to 0.
fn psd_eigen(m: DMatrix<f64>, name: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut e = SymmetricEigen::new(m);
    for l in e.eigenvalues.iter_mut() {
        if *l < -1e-8 {
            return Err(Error::Numeric(format!("{name} has negative eigenvalue {l}")));
        }
        *l = l.max(0.0);
    }
    Ok(e)
}

/// `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})`. The trace of the product root is
/// taken from the symmetric matrix `Σ₁^{1/2} Σ₂ Σ₁^{1/2}`, which has the same
/// eigenvalues as `Σ₁Σ₂`.
pub fn frechet_distance(mu1: &DVector<f64>, cov1: &DMatrix<f64>, mu2: &DVector<f64>, cov2: &DMatrix<f64>) -> Result<f64> {
    let k = mu1.len();
    if mu2.len() != k || cov1.shape() != (k, k) || cov2.shape() != (k, k) {
        return Err(Error::Dimension(format!("Fréchet inputs disagree on dimension {k}")));
    }
    symmetric(cov1, "first covariance")?;
    symmetric(cov2, "second covariance")?;
    let e1 = psd_eigen(cov1.clone(), "first covariance")?;
    psd_eigen(cov2.clone(), "second covariance")?;
    let root1 = &e1.eigenvectors
        * DMatrix::from_diagonal(&e1.eigenvalues.map(f64::sqrt))
        * e1.eigenvectors.transpose();
    let inner = &root1 * cov2 * &root1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_root: f64 = psd_eigen(inner, "covariance product")?.eigenvalues.iter().map(|l| l.sqrt()).sum();
    let d = (mu1 - mu2).norm_squared() + cov1.trace() + cov2.trace() - 2.0 * tr_root;
    Ok(d.max(0.0))
}

/// Mean and unbiased covariance of feature rows.
pub fn gaussian_fit(rows: &[[f64; 3]]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if rows.len() < 2 {
        return Err(Error::Contract(format!("Gaussian fit needs ≥ 2 samples, got {}", rows.len())));
    }
    let n = rows.len() as f64;
    let mu = DVector::from_fn(3, |i, _| rows.iter().map(|r| r[i]).sum::<f64>() / n);
    let cov = DMatrix::from_fn(3, 3, |i, j| {
        rows.iter().map(|r| (r[i] - mu[i]) * (r[j] - mu[j])).sum::<f64>() / (n - 1.0)
    });
    Ok((mu, cov))
}

/// (mean, std, high-pass energy) of the residual `|recon(I) − I|`.
pub fn residual_features(image: &Tensor, recon: &dyn Fn(&Tensor) -> Tensor) -> [f64; 3] {
    let r = recon(image);
    let res = Tensor::from_parts(
        image.shape().to_vec(),
        image.data().iter().zip(r.data()).map(|(a, b)| (a - b).abs()).collect(),
    );
    let n = res.len() as f64;
    let mean = res.sum() / n;
    let std = (res.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let smooth = box_blur(&res);
    let hp = res.data().iter().zip(smooth.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    [mean, std, hp]
}

/// Mean squared residual under `recon`.
pub fn residual_energy(image: &Tensor, recon: &dyn Fn(&Tensor) -> Tensor) -> f64 {
    let r = recon(image);
    image.data().iter().zip(r.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / image.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PriorRow {
    pub family: Family,
    pub real: usize,
    pub fake: usize,
    pub distance: f64,
}

/// Fréchet distance between residual statistics of real samples and of
/// each generator family's fakes.
pub fn prior_report(samples: &[ImageSample], recon: &dyn Fn(&Tensor) -> Tensor) -> Result<Vec<PriorRow>> {
    let feats = |pred: &dyn Fn(&ImageSample) -> bool| -> Vec<[f64; 3]> {
        samples.iter().filter(|s| pred(s)).map(|s| residual_features(&s.image, recon)).collect()
    };
    let real = feats(&|s| !s.labels.is_fake());
    let (mu_r, cov_r) = gaussian_fit(&real)?;
    let mut rows = Vec::new();
    for family in Family::ALL {
        let fake = feats(&|s| s.labels.l3 == family.code());
        let (mu_f, cov_f) = gaussian_fit(&fake).map_err(|e| Error::Contract(format!("{}: {e}", family.code())))?;
        rows.push(PriorRow {
            family,
            real: real.len(),
            fake: fake.len(),
            distance: frechet_distance(&mu_r, &cov_r, &mu_f, &cov_f)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sim(name: &str) -> GeneratorSim {
        GeneratorSim::by_name(name).unwrap()
    }

    #[test]
    fn real_samples_are_deterministic_and_in_range() {
        let a = gen_real(3, 7, 32).unwrap();
        assert_eq!(a, gen_real(3, 7, 32).unwrap());
        assert_ne!(a.image, gen_real(3, 8, 32).unwrap().image);
        assert!(a.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(a.mask.count_ones(), 0);
        assert_eq!(a.labels, Labels::real());
        assert!(gen_real(0, 0, 24).is_err());
    }

    #[test]
    fn efs_mask_is_all_ones() {
        for g in ["ddpm-sim", "stylegan-sim"] {
            let s = gen_fake(1, 2, 32, &sim(g), ForgeryType::Efs).unwrap();
            assert_eq!(s.mask.count_ones(), 32 * 32);
            assert!(s.source.is_none());
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn am_and_fs_masks_come_from_the_source() {
        for (i, g) in ["latdiff-sim", "lattrans-sim", "diffae-sim"].iter().enumerate() {
            for forgery in [ForgeryType::Am, ForgeryType::Fs] {
                let s = gen_fake(5, i as u64, 32, &sim(g), forgery).unwrap();
                let src = s.source.as_ref().unwrap();
                assert_eq!(s.mask, gt_mask(&s.image, src, MASK_THRESHOLD).unwrap());
                assert!(s.mask.count_ones() > 0);
                assert!(s.mask.count_ones() < 32 * 32 / 2);
                // the edit stays local: changed pixels fit in a box well inside the frame
                let plane = 32 * 32;
                let changed: Vec<usize> = (0..plane)
                    .filter(|&p| (0..3).any(|c| s.image.data()[c * plane + p] != src.data()[c * plane + p]))
                    .collect();
                let (ys, xs): (Vec<_>, Vec<_>) = changed.iter().map(|p| (p / 32, p % 32)).unzip();
                let span = |v: &[usize]| v.iter().max().unwrap() - v.iter().min().unwrap() + 1;
                assert!(span(&ys) * span(&xs) < plane / 2);
                assert!(s.mask.data.iter().enumerate().all(|(p, &m)| m == 0 || changed.contains(&p)));
            }
        }
    }

    #[test]
    fn diffusion_residual_energy_exceeds_gan() {
        let mean = |family: Family| {
            let sims: Vec<_> = GeneratorSim::all().into_iter().filter(|g| g.family == family).collect();
            (0..100u64)
                .map(|i| {
                    let g = &sims[i as usize % sims.len()];
                    let s = gen_fake(11, i, 32, g, ForgeryType::Efs).unwrap();
                    residual_energy(&s.image, &box_blur)
                })
                .sum::<f64>()
                / 100.0
        };
        assert!(mean(Family::Diffusion) > mean(Family::Gan));
    }

    #[test]
    fn counts_and_plan() {
        let mut spec = DatasetSpec::new(0, 10, 32);
        spec.mix = [1, 1, 1, 1];
        assert_eq!(spec.counts().unwrap(), [3, 3, 2, 2]);
        spec.mix = [1, 0, 0, 0];
        assert_eq!(spec.counts().unwrap(), [10, 0, 0, 0]);
        spec.mix = [2, 1, 1, 0];
        spec.n = 32;
        assert_eq!(spec.counts().unwrap(), [16, 8, 8, 0]);
        let plan = spec.plan().unwrap();
        assert_eq!(plan.iter().filter(|k| k.is_none()).count(), 16);
        assert_eq!(plan, spec.plan().unwrap());
        assert!(DatasetSpec::parse_mix("1:2:3").is_err());
        assert!(DatasetSpec::parse_mix("0:0:0:0").is_err());
        assert!(DatasetSpec::parse_mix("1:x:0:0").is_err());
        assert_eq!(DatasetSpec::parse_mix("3:1:1:1").unwrap(), [3, 1, 1, 1]);
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = DatasetSpec::new(2, 8, 16);
        spec.mix = [1, 1, 1, 1];
        let samples = generate(&spec).unwrap();
        write_dataset(&samples, dir.path(), Some(&spec)).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, samples);
        assert_eq!(read_manifest(dir.path()).unwrap().spec, Some(spec));
    }

    #[test]
    fn empty_dataset_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&[], dir.path(), None).unwrap();
        assert!(read_dataset(dir.path()).unwrap().is_empty());
        assert!(read_manifest(dir.path()).unwrap().samples.is_empty());
    }

    #[test]
    fn corrupted_blobs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let samples = vec![gen_real(0, 0, 16).unwrap()];
        write_dataset(&samples, dir.path(), None).unwrap();
        let path = dir.path().join("sample_000000.bin");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Checksum { .. })));
        assert!(matches!(decode_sample(&bytes[..bytes.len() - 10], "x"), Err(Error::Checksum { .. })));
        fs::remove_file(dir.path().join(MANIFEST)).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn frechet_closed_forms() {
        let v = |x: &[f64]| DVector::from_column_slice(x);
        let m = |k: usize, x: &[f64]| DMatrix::from_row_slice(k, k, x);
        let d = frechet_distance(&v(&[0.0]), &m(1, &[1.0]), &v(&[1.0]), &m(1, &[4.0])).unwrap();
        assert!((d - 2.0).abs() < 1e-9);
        let c = m(2, &[2.0, 0.3, 0.3, 1.0]);
        assert!(frechet_distance(&v(&[1.0, 2.0]), &c, &v(&[1.0, 2.0]), &c).unwrap().abs() < 1e-9);
        // diagonal: per-axis sum of 1-D terms
        let one_d = |m1: f64, s1: f64, m2: f64, s2: f64| (m1 - m2).powi(2) + (s1 - s2).powi(2);
        let got = frechet_distance(
            &v(&[0.0, 3.0]),
            &m(2, &[1.0, 0.0, 0.0, 9.0]),
            &v(&[2.0, 1.0]),
            &m(2, &[4.0, 0.0, 0.0, 0.25]),
        )
        .unwrap();
        assert!((got - (one_d(0.0, 1.0, 2.0, 2.0) + one_d(3.0, 3.0, 1.0, 0.5))).abs() < 1e-9);
        assert!(frechet_distance(&v(&[0.0, 0.0]), &m(2, &[1.0, 0.5, 0.0, 1.0]), &v(&[0.0, 0.0]), &m(2, &[1.0, 0.0, 0.0, 1.0])).is_err());
        assert!(frechet_distance(&v(&[0.0, 0.0]), &m(2, &[1.0, 2.0, 2.0, 1.0]), &v(&[0.0, 0.0]), &m(2, &[1.0, 0.0, 0.0, 1.0])).is_err());
    }

    #[test]
    fn prior_report_properties() {
        let mut spec = DatasetSpec::new(4, 60, 32);
        spec.mix = [1, 1, 0, 0];
        let samples = generate(&spec).unwrap();
        let rows = prior_report(&samples, &box_blur).unwrap();
        assert_eq!(rows, prior_report(&samples, &box_blur).unwrap());
        let diff = rows.iter().find(|r| r.family == Family::Diffusion).unwrap();
        let gan = rows.iter().find(|r| r.family == Family::Gan).unwrap();
        assert!(diff.distance > gan.distance, "{rows:?}");

        // a group against a copy of itself
        let reals: Vec<_> = samples.iter().filter(|s| !s.labels.is_fake()).map(|s| residual_features(&s.image, &box_blur)).collect();
        let (mu, cov) = gaussian_fit(&reals).unwrap();
        assert!(frechet_distance(&mu, &cov, &mu, &cov).unwrap() < 1e-9);
        assert!(prior_report(&samples[..1], &box_blur).is_err());
    }
}
