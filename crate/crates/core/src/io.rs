//! File formats: 8-bit PNG/PGM images, Middlebury `.flo` flows, raw filter
//! fields, network checkpoints, label masks and joint tables.
//!
//! Filter container (`.mgpf`): magic `MGPF`, then version, H, W, k and scale
//! index as little-endian `u32`, then `H*W*k*k` little-endian `f32` logits.
//!
//! Checkpoint (`.ckpt`): magic `MGCK`, `u32` version, `u32` section count,
//! then per section a `u32` name length and UTF-8 name, a `u32` kind (0 text,
//! 1 `f32`, 2 `f64`), a `u32` rank and `rank` `u32` dims, a `u64` payload
//! byte length and the payload. All integers and floats are little-endian.
//! The `config` text section holds the network configuration as `key = value`
//! lines; every parameter tensor follows in network order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::filter_flow::{CoordinateFlow, FilterFlowField};
use crate::grid::Image;
use crate::predictor::net::{NetConfig, ParamTensor, PredictorParams};
use crate::predictor::tensor::Real;
use crate::tracker::{JointMap, LabelMap};

const FLO_MAGIC: &[u8; 4] = b"PIEH";
const MGPF_MAGIC: &[u8; 4] = b"MGPF";
const MGPF_VERSION: u32 = 1;
const CKPT_MAGIC: &[u8; 4] = b"MGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Little-endian cursor that reports truncation as a format error.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Self { buf, pos: 0, path }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!("truncated: needed {n} bytes at offset {}", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(
                self.path,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn quantize(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads an 8-bit grayscale or RGB PNG, or a binary PGM (`P5`, maxval at most
/// 255). Intensities are mapped to `[0, 1]`.
pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    if bytes.starts_with(b"P5") {
        decode_pgm(&bytes, path)
    } else if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        decode_png(&bytes, path)
    } else {
        Err(Error::format(path, "unknown magic bytes (expected PNG or P5 PGM)"))
    }
}

fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Image> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "malformed PGM header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::format(path, "PGM header value out of range"))?;
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !bytes.get(pos).is_some_and(|c| c.is_ascii_whitespace()) {
        return Err(Error::format(path, "malformed PGM header"));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(path, format!("unsupported PGM maxval {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(Error::format(path, "PGM has zero size"));
    }
    let raster = &bytes[pos..];
    if raster.len() < w * h {
        return Err(Error::format(
            path,
            format!("truncated PGM raster: {} of {} bytes", raster.len(), w * h),
        ));
    }
    let scale = maxval as f64;
    let data = raster[..w * h].iter().map(|&b| b as f64 / scale).collect();
    Image::from_vec(h, w, 1, data)
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<Image> {
    use image::DynamicImage;
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, raw) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw()),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw()),
        other => {
            return Err(Error::format(
                path,
                format!("unsupported PNG pixel format {:?} (need 8-bit gray or RGB)", other.color()),
            ))
        }
    };
    Image::from_vec(h, w, channels, raw.iter().map(|&b| b as f64 / 255.0).collect())
}

/// Writes by extension: `.pgm` (one channel) or `.png` (one or three
/// channels). Values are clamped to `[0, 1]` and stored as `round(255 x)`.
pub fn write_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w, c) = img.dims();
    let raw: Vec<u8> = img.data().iter().map(|&x| quantize(x)).collect();
    let ext = path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
    match ext.as_deref() {
        Some("pgm") => {
            if c != 1 {
                return Err(Error::param(format!("PGM output needs 1 channel, image has {c}")));
            }
            let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
            bytes.extend_from_slice(&raw);
            write_bytes(path, &bytes)
        }
        Some("png") => {
            let color = match c {
                1 => image::ExtendedColorType::L8,
                3 => image::ExtendedColorType::Rgb8,
                _ => return Err(Error::param(format!("PNG output needs 1 or 3 channels, image has {c}"))),
            };
            let mut bytes = Vec::new();
            image::ImageEncoder::write_image(
                image::codecs::png::PngEncoder::new(&mut bytes),
                &raw,
                w as u32,
                h as u32,
                color,
            )
            .map_err(|e| Error::format(path, e.to_string()))?;
            write_bytes(path, &bytes)
        }
        _ => Err(Error::param(format!(
            "cannot infer image format from {}",
            path.display()
        ))),
    }
}

/// Serializes a flow as Middlebury `.flo`: `u` is `d_col`, `v` is `d_row`.
pub fn encode_flo(flow: &CoordinateFlow) -> Vec<u8> {
    let (h, w) = (flow.height(), flow.width());
    let mut out = Vec::with_capacity(12 + 8 * h * w);
    out.extend_from_slice(FLO_MAGIC);
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    for d in flow.data() {
        out.extend_from_slice(&(d[1] as f32).to_le_bytes());
        out.extend_from_slice(&(d[0] as f32).to_le_bytes());
    }
    out
}

pub fn decode_flo(bytes: &[u8], path: &Path) -> Result<CoordinateFlow> {
    let mut r = Reader::new(bytes, path);
    if r.take(4).ok() != Some(&FLO_MAGIC[..]) {
        return Err(Error::format(path, "wrong magic (expected PIEH)"));
    }
    let w = r.u32()? as usize;
    let h = r.u32()? as usize;
    let expected = w.checked_mul(h).and_then(|n| n.checked_mul(8));
    if w == 0 || h == 0 || expected != Some(bytes.len() - 12) {
        return Err(Error::format(
            path,
            format!("header says {w}x{h} but payload has {} bytes", bytes.len() - 12),
        ));
    }
    let mut data = Vec::with_capacity(w * h);
    for _ in 0..w * h {
        let u = r.f32()? as f64;
        let v = r.f32()? as f64;
        data.push([v, u]);
    }
    CoordinateFlow::from_vec(h, w, data)
}

pub fn write_flo(flow: &CoordinateFlow, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_flo(flow))
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<CoordinateFlow> {
    let path = path.as_ref();
    decode_flo(&read_bytes(path)?, path)
}

pub fn write_filters(field: &FilterFlowField, path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::with_capacity(24 + 4 * field.logits().len());
    out.extend_from_slice(MGPF_MAGIC);
    for v in [
        MGPF_VERSION,
        field.height() as u32,
        field.width() as u32,
        field.k() as u32,
        field.scale_index() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &l in field.logits() {
        out.extend_from_slice(&(l as f32).to_le_bytes());
    }
    write_bytes(path.as_ref(), &out)
}

pub fn read_filters(path: impl AsRef<Path>) -> Result<FilterFlowField> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let mut r = Reader::new(&bytes, path);
    if r.take(4).ok() != Some(&MGPF_MAGIC[..]) {
        return Err(Error::format(path, "wrong magic (expected MGPF)"));
    }
    let version = r.u32()?;
    if version != MGPF_VERSION {
        return Err(Error::format(path, format!("unsupported filter file version {version}")));
    }
    let (h, w, k, s) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let n = h * w * k * k;
    let mut logits = Vec::with_capacity(n);
    for _ in 0..n {
        logits.push(r.f32()? as f64);
    }
    r.finish()?;
    FilterFlowField::from_logits(h, w, k, s, logits).map_err(|e| Error::format(path, e.to_string()))
}

fn config_text(cfg: &NetConfig) -> String {
    let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    format!(
        "in_channels = {}\nembed_channels = {}\nfull_res_channels = {}\nhead_channels = {}\nk = {}\nseed = {}\n",
        cfg.in_channels,
        list(&cfg.embed_channels),
        cfg.full_res_channels,
        list(&cfg.head_channels),
        cfg.k,
        cfg.seed
    )
}

fn parse_config_text(text: &str, path: &Path) -> Result<NetConfig> {
    let kv = crate::config::parse_config(text).map_err(|e| Error::format(path, e.to_string()))?;
    let get = |key: &str| {
        kv.iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::format(path, format!("config section lacks `{key}`")))
    };
    let num = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| Error::format(path, format!("bad value for `{key}`")))
    };
    let list = |key: &str| -> Result<Vec<usize>> {
        get(key)?
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| Error::format(path, format!("bad list `{key}`"))))
            .collect()
    };
    Ok(NetConfig {
        in_channels: num("in_channels")?,
        embed_channels: list("embed_channels")?,
        full_res_channels: num("full_res_channels")?,
        head_channels: list("head_channels")?,
        k: num("k")?,
        seed: get("seed")?
            .parse()
            .map_err(|_| Error::format(path, "bad value for `seed`"))?,
    })
}

fn push_section(out: &mut Vec<u8>, name: &str, kind: u32, dims: &[usize], payload: &[u8]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&kind.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

/// Checkpoint bytes. `f32` parameters are stored as `f32`, anything wider as
/// `f64`, so a round trip at the same precision is bitwise exact.
pub fn encode_checkpoint<T: Real>(params: &PredictorParams<T>) -> Vec<u8> {
    let single = std::mem::size_of::<T>() == 4;
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.tensors.len() as u32 + 1).to_le_bytes());
    let text = config_text(&params.config);
    push_section(&mut out, "config", 0, &[text.len()], text.as_bytes());
    for t in &params.tensors {
        let payload: Vec<u8> = if single {
            t.data.iter().flat_map(|v| (v.as_f64() as f32).to_le_bytes()).collect()
        } else {
            t.data.iter().flat_map(|v| v.as_f64().to_le_bytes()).collect()
        };
        push_section(&mut out, &t.name, if single { 1 } else { 2 }, &t.shape, &payload);
    }
    out
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8], path: &Path) -> Result<PredictorParams<T>> {
    let mut r = Reader::new(bytes, path);
    if r.take(4).ok() != Some(&CKPT_MAGIC[..]) {
        return Err(Error::format(path, "wrong magic (expected MGCK)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut config = None;
    let mut tensors = Vec::with_capacity(count.saturating_sub(1));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::format(path, "section name is not UTF-8"))?
            .to_string();
        let kind = r.u32()?;
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len = r.u64()? as usize;
        let payload = r.take(len)?;
        match kind {
            0 => {
                let text = std::str::from_utf8(payload).map_err(|_| Error::format(path, "text section is not UTF-8"))?;
                if name == "config" {
                    config = Some(parse_config_text(text, path)?);
                }
            }
            1 | 2 => {
                let width = if kind == 1 { 4 } else { 8 };
                let n: usize = dims.iter().product();
                if n * width != len {
                    return Err(Error::format(path, format!("section `{name}` size does not match its shape")));
                }
                let data = payload
                    .chunks_exact(width)
                    .map(|c| {
                        if kind == 1 {
                            T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                        } else {
                            T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        }
                    })
                    .collect();
                tensors.push(ParamTensor { name, shape: dims, data });
            }
            other => return Err(Error::format(path, format!("unknown section kind {other}"))),
        }
    }
    r.finish()?;
    let config = config.ok_or_else(|| Error::format(path, "checkpoint has no config section"))?;
    let params = PredictorParams { config, tensors };
    let reference = crate::predictor::init_params::<T>(&params.config)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let layout_ok = reference.tensors.len() == params.tensors.len()
        && reference
            .tensors
            .iter()
            .zip(&params.tensors)
            .all(|(a, b)| a.name == b.name && a.shape == b.shape);
    if !layout_ok {
        return Err(Error::format(path, "tensor layout does not match the stored config"));
    }
    Ok(params)
}

pub fn write_checkpoint<T: Real>(params: &PredictorParams<T>, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_checkpoint(params))
}

pub fn read_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<PredictorParams<T>> {
    let path = path.as_ref();
    decode_checkpoint(&read_bytes(path)?, path)
}

/// Gray level of object `i` among `num_objects`: `round(i * 255 / n)`.
pub fn label_level(i: usize, num_objects: usize) -> u8 {
    (i as f64 * 255.0 / num_objects as f64).round() as u8
}

/// Label map as an 8-bit gray image, 0 for background.
pub fn write_labels(labels: &LabelMap, num_objects: usize, path: impl AsRef<Path>) -> Result<()> {
    if num_objects == 0 || num_objects > 255 {
        return Err(Error::param(format!("cannot encode {num_objects} objects in 8 bits")));
    }
    if labels.max_label() > num_objects {
        return Err(Error::param(format!(
            "label {} exceeds object count {num_objects}",
            labels.max_label()
        )));
    }
    let data = labels
        .labels()
        .iter()
        .map(|&l| label_level(l, num_objects) as f64 / 255.0)
        .collect();
    write_image(&Image::from_vec(labels.height(), labels.width(), 1, data)?, path)
}

/// Inverse of [`write_labels`]; gray levels that encode no object are an
/// error.
pub fn read_labels(path: impl AsRef<Path>, num_objects: usize) -> Result<LabelMap> {
    let path = path.as_ref();
    if num_objects == 0 || num_objects > 255 {
        return Err(Error::param(format!("cannot decode {num_objects} objects from 8 bits")));
    }
    let img = read_image(path)?;
    if img.channels() != 1 {
        return Err(Error::format(path, "label masks must be grayscale"));
    }
    let mut lookup = [None; 256];
    for i in 0..=num_objects {
        lookup[label_level(i, num_objects) as usize] = Some(i);
    }
    let labels = img
        .data()
        .iter()
        .map(|&v| {
            let level = (v * 255.0).round() as usize;
            lookup[level].ok_or_else(|| {
                Error::format(path, format!("gray level {level} is not a label of {num_objects} objects"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    LabelMap::new(img.height(), img.width(), labels)
}

pub const JOINTS_HEADER: &str = "frame,joint_id,row,col,visible";

/// One row per frame and joint.
pub fn joints_csv(tracks: &[JointMap]) -> String {
    let mut out = format!("{JOINTS_HEADER}\n");
    for (f, j) in tracks.iter().enumerate() {
        for (id, (p, v)) in j.points.iter().zip(&j.visible).enumerate() {
            out.push_str(&format!("{f},{id},{},{},{}\n", p[0], p[1], *v as u8));
        }
    }
    out
}

pub fn write_joints(tracks: &[JointMap], path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), joints_csv(tracks).as_bytes())
}

/// Reads a joint table for frames of `height x width`. Frames must be listed
/// in order and share one joint count.
pub fn read_joints(path: impl AsRef<Path>, height: usize, width: usize) -> Result<Vec<JointMap>> {
    let path = path.as_ref();
    let text = String::from_utf8(read_bytes(path)?).map_err(|_| Error::format(path, "not UTF-8"))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some(JOINTS_HEADER) {
        return Err(Error::format(path, format!("expected header `{JOINTS_HEADER}`")));
    }
    let mut frames: Vec<(Vec<[f64; 2]>, Vec<bool>)> = Vec::new();
    for (n, line) in lines.enumerate() {
        let bad = || Error::format(path, format!("malformed row {}: `{line}`", n + 2));
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 5 {
            return Err(bad());
        }
        let frame: usize = f[0].parse().map_err(|_| bad())?;
        let id: usize = f[1].parse().map_err(|_| bad())?;
        let p = [f[2].parse::<f64>().map_err(|_| bad())?, f[3].parse::<f64>().map_err(|_| bad())?];
        let vis = match f[4] {
            "1" | "true" => true,
            "0" | "false" => false,
            _ => return Err(bad()),
        };
        if frame == frames.len() {
            frames.push((Vec::new(), Vec::new()));
        }
        let slot = frames.get_mut(frame).ok_or_else(bad)?;
        if id != slot.0.len() {
            return Err(bad());
        }
        slot.0.push(p);
        slot.1.push(vis);
    }
    if frames.is_empty() {
        return Err(Error::format(path, "no joints"));
    }
    let count = frames[0].0.len();
    if frames.iter().any(|f| f.0.len() != count) {
        return Err(Error::format(path, "frames list different joint counts"));
    }
    Ok(frames
        .into_iter()
        .map(|(points, visible)| {
            let mut j = JointMap::new(height, width, points);
            j.visible = visible;
            j
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_vec(h, w, c, (0..h * w * c).map(|_| rng.gen()).collect()).unwrap()
    }

    fn max_diff(a: &Image, b: &Image) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn image_round_trips_within_half_a_level() {
        let dir = tempfile::tempdir().unwrap();
        for (name, c) in [("g.png", 1), ("rgb.png", 3), ("g.pgm", 1)] {
            let img = noise(7, 9, c, c as u64);
            let p = dir.path().join(name);
            write_image(&img, &p).unwrap();
            let back = read_image(&p).unwrap();
            assert_eq!(back.dims(), img.dims());
            assert!(max_diff(&img, &back) <= 1.0 / 510.0 + 1e-12, "{name}");
        }
        assert!(write_image(&noise(2, 2, 3, 0), dir.path().join("x.pgm")).is_err());
        assert!(write_image(&noise(2, 2, 2, 0), dir.path().join("x.png")).is_err());
        assert!(write_image(&noise(2, 2, 1, 0), dir.path().join("x.bmp")).is_err());
    }

    #[test]
    fn reads_minimal_pgm_with_comment() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        let mut bytes = b"P5\n# made by hand\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255, 51, 102]);
        fs::write(&p, bytes).unwrap();
        let img = read_image(&p).unwrap();
        assert_eq!(img.dims(), (2, 2, 1));
        assert_eq!(img.get(0, 1, 0), 1.0);
        assert!((img.get(1, 0, 0) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_images() {
        let dir = tempfile::tempdir().unwrap();
        let p16 = dir.path().join("deep.png");
        image::ImageBuffer::<image::Luma<u16>, _>::from_raw(2, 2, vec![0u16, 1, 2, 3])
            .unwrap()
            .save(&p16)
            .unwrap();
        assert!(matches!(read_image(&p16), Err(Error::Format { .. })));
        let unknown = dir.path().join("u.png");
        fs::write(&unknown, b"GIF89a....").unwrap();
        assert!(matches!(read_image(&unknown), Err(Error::Format { .. })));
        let short = dir.path().join("s.pgm");
        fs::write(&short, b"P5\n4 4\n255\n\x00\x01").unwrap();
        assert!(matches!(read_image(&short), Err(Error::Format { .. })));
        assert!(read_image(dir.path().join("missing.png")).unwrap_err().is_io());
    }

    #[test]
    fn flo_round_trip_is_bitwise_for_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let flow = CoordinateFlow::from_fn(5, 6, |r, c| [(r as f32 * 0.37 - 1.1) as f64, (c as f32 * -0.21) as f64]);
        let p = dir.path().join("f.flo");
        write_flo(&flow, &p).unwrap();
        assert_eq!(read_flo(&p).unwrap(), flow);
    }

    #[test]
    fn flo_stores_horizontal_component_first() {
        let bytes = encode_flo(&CoordinateFlow::constant(1, 1, [1.0, 2.0]));
        assert_eq!(bytes.len(), 20);
        assert_eq!(&bytes[..4], b"PIEH");
        assert_eq!(f32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2.0);
        assert_eq!(f32::from_le_bytes(bytes[16..20].try_into().unwrap()), 1.0);
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_flo(&bad, Path::new("x")), Err(Error::Format { .. })));
        assert!(decode_flo(&bytes[..18], Path::new("x")).is_err());
    }

    #[test]
    fn filter_field_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits: Vec<f64> = (0..4 * 3 * 9).map(|_| rng.gen_range(-3.0f32..3.0) as f64).collect();
        let field = FilterFlowField::from_logits(4, 3, 3, 2, logits).unwrap();
        let p = dir.path().join("a.mgpf");
        write_filters(&field, &p).unwrap();
        assert_eq!(read_filters(&p).unwrap(), field);
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_filters(&p), Err(Error::Format { .. })));
    }

    fn small_config() -> NetConfig {
        let mut cfg = NetConfig::new(3);
        cfg.embed_channels = vec![4, 6];
        cfg.full_res_channels = 2;
        cfg.head_channels = vec![5, 9];
        cfg.seed = 9;
        cfg
    }

    #[test]
    fn checkpoint_round_trips_both_precisions() {
        let dir = tempfile::tempdir().unwrap();
        let p64: PredictorParams<f64> = crate::predictor::net::init_params(&small_config()).unwrap();
        let path = dir.path().join("n.ckpt");
        write_checkpoint(&p64, &path).unwrap();
        assert_eq!(read_checkpoint::<f64>(&path).unwrap(), p64);
        let p32: PredictorParams<f32> = p64.cast();
        write_checkpoint(&p32, &path).unwrap();
        assert_eq!(read_checkpoint::<f32>(&path).unwrap(), p32);
    }

    #[test]
    fn corrupt_checkpoints_are_format_errors() {
        let p: PredictorParams<f64> = crate::predictor::net::init_params(&small_config()).unwrap();
        let bytes = encode_checkpoint(&p);
        let at = Path::new("c");
        assert!(matches!(decode_checkpoint::<f64>(&bytes[..bytes.len() - 3], at), Err(Error::Format { .. })));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode_checkpoint::<f64>(&magic, at), Err(Error::Format { .. })));
        let mut version = bytes.clone();
        version[4] = 99;
        assert!(matches!(decode_checkpoint::<f64>(&version, at), Err(Error::Format { .. })));
    }

    #[test]
    fn labels_and_joints_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let labels = LabelMap::new(2, 3, vec![0, 1, 2, 3, 3, 0]).unwrap();
        let p = dir.path().join("m.png");
        write_labels(&labels, 3, &p).unwrap();
        assert_eq!(read_labels(&p, 3).unwrap().labels(), labels.labels());
        assert_eq!(label_level(3, 3), 255);
        assert!(read_labels(&p, 2).is_err());
        assert!(write_labels(&labels, 2, &p).is_err());

        let mut a = JointMap::new(10, 10, vec![[1.5, 2.25], [7.0, 3.0]]);
        a.visible[1] = false;
        let b = JointMap::new(10, 10, vec![[2.0, 2.0], [6.5, 3.5]]);
        let jp = dir.path().join("j.csv");
        write_joints(&[a.clone(), b.clone()], &jp).unwrap();
        let back = read_joints(&jp, 10, 10).unwrap();
        assert_eq!(back[0].points, a.points);
        assert_eq!(back[0].visible, a.visible);
        assert_eq!(back[1].points, b.points);
        fs::write(&jp, "frame,joint_id,row,col,visible\n0,0,1,2\n").unwrap();
        assert!(matches!(read_joints(&jp, 10, 10), Err(Error::Format { .. })));
    }
}
