//! Binary PGM/PPM I/O, the pixel-to-intensity mapping, and patch datasets.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::forward::{Dims, ImageTensor};
use crate::rng::{streams, RandomSource};
use crate::train::Dataset;

/// 8-bit image with interleaved samples, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub samples: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, channels: usize, samples: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if samples.len() != width * height * channels {
            return Err(Error::InvalidArgument(format!(
                "{width}x{height}x{channels} image needs {} samples, got {}",
                width * height * channels,
                samples.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            samples,
        })
    }
}

fn parse_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        reason: reason.into(),
    }
}

struct Header<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.buf.len() {
            match self.buf[self.pos] {
                b'#' => {
                    while self.pos < self.buf.len() && self.buf[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u64> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.buf.len() && self.buf[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(parse_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.buf[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| parse_err(start, format!("{what} is out of range")))
    }
}

/// Parses a binary P5 (gray) or P6 (RGB) image with maxval 255.
pub fn parse_pnm(bytes: &[u8]) -> Result<RawImage> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(parse_err(0, "bad magic; expected P5 or P6")),
    };
    let mut h = Header { buf: bytes, pos: 2 };
    if h.pos < bytes.len() && !bytes[h.pos].is_ascii_whitespace() && bytes[h.pos] != b'#' {
        return Err(parse_err(2, "missing whitespace after magic"));
    }
    let width = h.number("width")? as usize;
    let height = h.number("height")? as usize;
    let max_pos = {
        h.skip_space_and_comments();
        h.pos
    };
    let maxval = h.number("maxval")?;
    if maxval > 255 {
        return Err(Error::UnsupportedFormat(format!(
            "maxval {maxval}; only 8-bit images (maxval 255) are supported"
        )));
    }
    if maxval != 255 {
        return Err(parse_err(max_pos, format!("maxval must be 255, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(parse_err(2, format!("empty image {width}x{height}")));
    }
    match bytes.get(h.pos) {
        Some(c) if c.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(parse_err(h.pos, "expected a single whitespace byte before the raster")),
    }
    let n = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| parse_err(2, "image dimensions overflow"))?;
    let available = bytes.len() - h.pos;
    if available < n {
        return Err(parse_err(
            bytes.len(),
            format!("truncated raster: need {n} bytes, found {available}"),
        ));
    }
    RawImage::new(width, height, channels, bytes[h.pos..h.pos + n].to_vec())
}

pub fn encode_pnm(img: &RawImage) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.samples);
    out
}

pub fn read_pnm(path: impl AsRef<Path>) -> Result<RawImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pnm(&bytes)
}

pub fn write_pnm(img: &RawImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pnm(img)).map_err(|e| Error::io(path, e))
}

/// `x = (p + 1) / 256`, stored channel-planar.
pub fn to_intensity(raw: &RawImage) -> ImageTensor {
    let (c, hw) = (raw.channels, raw.width * raw.height);
    let mut data = vec![0.0; c * hw];
    for (i, &p) in raw.samples.iter().enumerate() {
        data[(i % c) * hw + i / c] = (p as f64 + 1.0) / 256.0;
    }
    ImageTensor::new(Dims::new(c, raw.height, raw.width), data).expect("mapped intensities are positive")
}

/// `p = clamp(round(256 x - 1), 0, 255)`; out-of-range intensities are clamped.
pub fn from_intensity(x: &ImageTensor) -> Result<RawImage> {
    let d = x.dims();
    let hw = d.height * d.width;
    let mut samples = vec![0u8; d.len()];
    for (i, s) in samples.iter_mut().enumerate() {
        let v = x.data()[(i % d.channels) * hw + i / d.channels];
        *s = (256.0 * v - 1.0).round().clamp(0.0, 255.0) as u8;
    }
    RawImage::new(d.width, d.height, d.channels, samples)
}

fn is_pnm_name(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("pgm" | "ppm" | "pnm")
    )
}

/// PNM files in `dir`, sorted by file name.
pub fn list_pnm_files(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_pnm_name(p))
        .collect();
    files.sort();
    Ok(files)
}

/// Endless, seeded stream of random square crops.
///
/// Each pass visits every image once in a freshly shuffled order and takes one
/// crop with a uniformly random origin.
#[derive(Clone, Debug)]
pub struct PatchStream {
    images: Vec<(PathBuf, ImageTensor)>,
    patch: usize,
    order: Vec<usize>,
    pos: usize,
    rng: RandomSource,
}

/// A crop and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub image: ImageTensor,
    pub source: usize,
    pub origin: (usize, usize),
}

impl PatchStream {
    pub fn new(images: Vec<(PathBuf, ImageTensor)>, patch: usize, seed: u64) -> Result<Self> {
        if patch == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        if images.is_empty() {
            return Err(Error::Config("no usable images".into()));
        }
        let channels = images[0].1.dims().channels;
        for (p, img) in &images {
            let d = img.dims();
            if d.height < patch || d.width < patch || d.channels != channels {
                return Err(Error::Config(format!(
                    "{}: {}x{}x{} cannot supply {patch}x{patch}x{channels} patches",
                    p.display(),
                    d.channels,
                    d.height,
                    d.width
                )));
            }
        }
        Ok(Self {
            order: (0..images.len()).collect(),
            pos: images.len(),
            images,
            patch,
            rng: RandomSource::new(seed, streams::DATASET),
        })
    }

    pub fn sources(&self) -> impl Iterator<Item = &Path> {
        self.images.iter().map(|(p, _)| p.as_path())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.images[0].1.dims().channels
    }

    pub fn next_patch(&mut self) -> Patch {
        if self.pos == self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let source = self.order[self.pos];
        self.pos += 1;
        let img = &self.images[source].1;
        let d = img.dims();
        let oy = self.rng.uniform_inclusive(0, d.height - self.patch);
        let ox = self.rng.uniform_inclusive(0, d.width - self.patch);
        let p = self.patch;
        let mut data = Vec::with_capacity(d.channels * p * p);
        for c in 0..d.channels {
            for y in oy..oy + p {
                let row = c * d.height * d.width + y * d.width;
                data.extend_from_slice(&img.data()[row + ox..row + ox + p]);
            }
        }
        Patch {
            image: ImageTensor::new(Dims::new(d.channels, p, p), data).expect("crop of a valid image"),
            source,
            origin: (oy, ox),
        }
    }
}

impl Iterator for PatchStream {
    type Item = ImageTensor;

    fn next(&mut self) -> Option<ImageTensor> {
        Some(self.next_patch().image)
    }
}

impl Dataset for PatchStream {
    fn epoch_len(&self) -> usize {
        self.images.len()
    }

    fn next_item(&mut self) -> Result<ImageTensor> {
        Ok(self.next_patch().image)
    }
}

/// Loads every PNM file in `dir` (sorted by name) as a patch source. Unreadable
/// files and images smaller than a patch are skipped with a warning.
pub fn load_dataset(dir: impl AsRef<Path>, patch: usize, seed: u64) -> Result<PatchStream> {
    let dir = dir.as_ref();
    let files = list_pnm_files(dir)?;
    if files.is_empty() {
        return Err(Error::Config(format!("{}: no PNM files", dir.display())));
    }
    let mut images = Vec::new();
    let mut channels = None;
    for f in files {
        match read_pnm(&f) {
            Ok(raw) if raw.width < patch || raw.height < patch => {
                log::warn!(
                    "skipping {}: {}x{} is smaller than the {patch}x{patch} patch",
                    f.display(),
                    raw.width,
                    raw.height
                );
            }
            Ok(raw) if channels.is_some_and(|c| c != raw.channels) => {
                log::warn!(
                    "skipping {}: {} channels, dataset has {}",
                    f.display(),
                    raw.channels,
                    channels.unwrap()
                );
            }
            Ok(raw) => {
                channels = Some(raw.channels);
                images.push((f, to_intensity(&raw)));
            }
            Err(e) => log::warn!("skipping {}: {e}", f.display()),
        }
    }
    if images.is_empty() {
        return Err(Error::Config(format!(
            "{}: every file was skipped",
            dir.display()
        )));
    }
    PatchStream::new(images, patch, seed)
}
