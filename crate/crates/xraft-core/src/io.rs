//! Binary file formats: HSIC cubes, flow fields, PGM validity masks, and
//! PPM renders. Everything is little-endian and round-trips bit-exactly.

use crate::error::{Error, Result};
use crate::flow::{FlowField, ValidityMask};
use crate::imaging::{HsiCube, Image, Modality};
use std::fs;
use std::io::Write;
use std::path::Path;

/// Magic float of the flow format (the classic Middlebury sanity check).
pub const FLO_MAGIC: f32 = 202021.25;

const CUBE_MAGIC: &[u8; 4] = b"HSIC";
/// Guards against absurd headers before allocating.
const MAX_ELEMENTS: u64 = 1 << 28;

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], path: &Path) -> Self {
        Reader {
            buf,
            pos: 0,
            path: path_str(path),
        }
    }

    fn need(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::parse(
                &self.path,
                format!(
                    "truncated while reading {what}: need {n} bytes at offset {}, only {} left",
                    self.pos,
                    self.buf.len() - self.pos
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.need(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn i32(&mut self, what: &str) -> Result<i32> {
        let b = self.need(4, what)?;
        Ok(i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.need(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.need(1, what)?[0])
    }

    fn f32_slice(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.need(4 * n, what)?;
        let mut out = Vec::with_capacity(n);
        for c in bytes.chunks_exact(4) {
            out.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        }
        Ok(out)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::parse(
                &self.path,
                format!("{} trailing bytes after payload", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path_str(path), e))?;
    f.write_all(bytes).map_err(|e| Error::io(path_str(path), e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path_str(path), e))
}

// ---- HSIC cube format -----------------------------------------------------
//
// 4 ASCII magic bytes "HSIC", u32 width, u32 height, u32 bands,
// u8 modality (0 white, 1 blue), 3 reserved zero bytes, then
// band-sequential row-major f32 little-endian samples.

pub fn write_cube(cube: &HsiCube, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(16 + 4 * cube.data.len());
    out.extend_from_slice(CUBE_MAGIC);
    out.extend_from_slice(&(cube.width as u32).to_le_bytes());
    out.extend_from_slice(&(cube.height as u32).to_le_bytes());
    out.extend_from_slice(&(cube.bands as u32).to_le_bytes());
    out.push(cube.modality.tag());
    out.extend_from_slice(&[0u8; 3]);
    for v in &cube.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &out)
}

pub fn read_cube(path: &Path) -> Result<HsiCube> {
    let buf = read_file(path)?;
    let mut r = Reader::new(&buf, path);
    let magic = r.need(4, "magic")?;
    if magic != CUBE_MAGIC {
        return Err(Error::parse(
            path_str(path),
            format!("bad magic {magic:?}, expected \"HSIC\""),
        ));
    }
    let width = r.u32("width")? as usize;
    let height = r.u32("height")? as usize;
    let bands = r.u32("bands")? as usize;
    let modality = Modality::from_tag(r.u8("modality tag")?)
        .map_err(|e| Error::parse(path_str(path), e.to_string()))?;
    let reserved = r.need(3, "reserved bytes")?;
    if reserved != [0, 0, 0] {
        return Err(Error::parse(path_str(path), "reserved bytes must be zero"));
    }
    let n = width as u64 * height as u64 * bands as u64;
    if width == 0 || height == 0 || bands == 0 || n > MAX_ELEMENTS {
        return Err(Error::parse(
            path_str(path),
            format!("implausible dimensions {width}x{height}x{bands}"),
        ));
    }
    let data = r.f32_slice(n as usize, "cube samples")?;
    r.finish()?;
    let cube = HsiCube::from_data(width, height, bands, modality, data)
        .map_err(|e| Error::parse(path_str(path), e.to_string()))?;
    if !cube.is_finite() {
        return Err(Error::parse(path_str(path), "cube contains NaN or Inf"));
    }
    Ok(cube)
}

// ---- flow format ----------------------------------------------------------
//
// f32 magic 202021.25, i32 width, i32 height, then row-major interleaved
// (u, v) f32 pairs.

pub fn write_flow(flow: &FlowField, path: &Path) -> Result<()> {
    let (w, h) = (flow.width, flow.height);
    let mut out = Vec::with_capacity(12 + 8 * w * h);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    let hw = w * h;
    for i in 0..hw {
        out.extend_from_slice(&flow.data[i].to_le_bytes());
        out.extend_from_slice(&flow.data[hw + i].to_le_bytes());
    }
    write_atomic(path, &out)
}

pub fn read_flow(path: &Path) -> Result<FlowField> {
    let buf = read_file(path)?;
    let mut r = Reader::new(&buf, path);
    let magic = r.f32("magic")?;
    if magic != FLO_MAGIC {
        return Err(Error::parse(
            path_str(path),
            format!("bad magic {magic}, expected {FLO_MAGIC}"),
        ));
    }
    let w = r.i32("width")?;
    let h = r.i32("height")?;
    if w <= 0 || h <= 0 || w as u64 * h as u64 * 2 > MAX_ELEMENTS {
        return Err(Error::parse(
            path_str(path),
            format!("implausible dimensions {w}x{h}"),
        ));
    }
    let (w, h) = (w as usize, h as usize);
    let hw = w * h;
    let interleaved = r.f32_slice(2 * hw, "flow vectors")?;
    r.finish()?;
    let mut data = vec![0.0f32; 2 * hw];
    for i in 0..hw {
        data[i] = interleaved[2 * i];
        data[hw + i] = interleaved[2 * i + 1];
    }
    let flow = FlowField::from_planes(w, h, data)?;
    if !flow.is_finite() {
        return Err(Error::parse(path_str(path), "flow contains NaN or Inf"));
    }
    Ok(flow)
}

// ---- PGM masks ------------------------------------------------------------
//
// Binary PGM (P5), maxval 255: 0 = invalid, 255 = valid.

pub fn write_mask(mask: &ValidityMask, path: &Path) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(mask.data.iter().map(|b| if *b { 255u8 } else { 0u8 }));
    write_atomic(path, &out)
}

fn parse_pnm_header<'a>(buf: &'a [u8], magic: &str, path: &Path) -> Result<(usize, usize, usize)> {
    // Header: magic, whitespace-separated width, height, maxval, then a
    // single whitespace byte before the raster.
    let mut fields = Vec::new();
    let mut pos = 0usize;
    while fields.len() < 4 && pos < buf.len() {
        while pos < buf.len() && buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < buf.len() && buf[pos] == b'#' {
            while pos < buf.len() && buf[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&buf[start..pos]).map_err(|_| {
            Error::parse(path_str(path), "non-ASCII header field")
        })?);
    }
    if fields.len() < 4 {
        return Err(Error::parse(path_str(path), "truncated header"));
    }
    if fields[0] != magic {
        return Err(Error::parse(
            path_str(path),
            format!("bad magic {:?}, expected {magic}", fields[0]),
        ));
    }
    let parse = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|_| Error::parse(path_str(path), format!("bad {what} {s:?}")))
    };
    let w = parse(fields[1], "width")?;
    let h = parse(fields[2], "height")?;
    let maxval = parse(fields[3], "maxval")?;
    if maxval != 255 {
        return Err(Error::parse(
            path_str(path),
            format!("unsupported maxval {maxval}, expected 255"),
        ));
    }
    // The byte after the maxval field is the single raster separator.
    Ok((w, h, pos + 1))
}

pub fn read_mask(path: &Path) -> Result<ValidityMask> {
    let buf = read_file(path)?;
    let (w, h, offset) = parse_pnm_header(&buf, "P5", path)?;
    if w == 0 || h == 0 || (w as u64 * h as u64) > MAX_ELEMENTS {
        return Err(Error::parse(path_str(path), format!("implausible size {w}x{h}")));
    }
    let need = w * h;
    if buf.len() < offset + need {
        return Err(Error::parse(
            path_str(path),
            format!(
                "truncated raster: need {need} bytes, found {}",
                buf.len().saturating_sub(offset)
            ),
        ));
    }
    let data = buf[offset..offset + need].iter().map(|b| *b >= 128).collect();
    ValidityMask::from_data(w, h, data)
}

// ---- PPM renders ----------------------------------------------------------
//
// Binary PPM (P6), 8-bit, values clamped from [0,1] at write time.

pub fn write_ppm(image: &Image, path: &Path) -> Result<()> {
    if image.channels != 3 {
        return Err(Error::Shape(format!(
            "ppm needs 3 channels, got {}",
            image.channels
        )));
    }
    let (w, h) = (image.width, image.height);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let hw = w * h;
    for i in 0..hw {
        for c in 0..3 {
            let v = image.data[c * hw + i].clamp(0.0, 1.0);
            out.push((v * 255.0 + 0.5) as u8);
        }
    }
    write_atomic(path, &out)
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let buf = read_file(path)?;
    let (w, h, offset) = parse_pnm_header(&buf, "P6", path)?;
    if w == 0 || h == 0 || (w as u64 * h as u64 * 3) > MAX_ELEMENTS {
        return Err(Error::parse(path_str(path), format!("implausible size {w}x{h}")));
    }
    let need = 3 * w * h;
    if buf.len() < offset + need {
        return Err(Error::parse(
            path_str(path),
            format!(
                "truncated raster: need {need} bytes, found {}",
                buf.len().saturating_sub(offset)
            ),
        ));
    }
    let hw = w * h;
    let mut data = vec![0.0f32; 3 * hw];
    for i in 0..hw {
        for c in 0..3 {
            data[c * hw + i] = buf[offset + 3 * i + c] as f32 / 255.0;
        }
    }
    Image::new(3, w, h, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{synth_scene, ModalityRecipe};
    use crate::rng::{stream_rng, Stream};
    use rand::Rng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("xraft-io-tests");
        fs::create_dir_all(&dir).unwrap();
        dir.join(format!("{}-{name}", std::process::id()))
    }

    #[test]
    fn cube_round_trip_is_bit_exact() {
        let mut rng = stream_rng(1, Stream::Scenes, 0);
        let cube = synth_scene(&mut rng, 9, 7, 10);
        let blue = crate::imaging::synth_modality(&cube, &ModalityRecipe::default_blue(2));
        let p = tmp("cube.hsic");
        write_cube(&blue, &p).unwrap();
        let back = read_cube(&p).unwrap();
        assert_eq!(back.width, 9);
        assert_eq!(back.height, 7);
        assert_eq!(back.bands, 10);
        assert_eq!(back.modality, blue.modality);
        assert_eq!(back.data, blue.data);
    }

    #[test]
    fn cube_truncation_names_byte_count() {
        let mut rng = stream_rng(2, Stream::Scenes, 1);
        let cube = synth_scene(&mut rng, 6, 6, 3);
        let p = tmp("trunc.hsic");
        write_cube(&cube, &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 10);
        fs::write(&p, bytes).unwrap();
        let err = read_cube(&p).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("truncated"), "{msg}");
        assert!(msg.contains("need"), "missing byte count: {msg}");
    }

    #[test]
    fn cube_wrong_magic_rejected() {
        let p = tmp("magic.hsic");
        fs::write(&p, b"NOPE\x01\x00\x00\x00\x01\x00\x00\x00\x01\x00\x00\x00\x00\x00\x00\x00")
            .unwrap();
        let err = read_cube(&p).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn flow_round_trip_and_errors() {
        let mut rng = stream_rng(3, Stream::Deformations, 0);
        let data: Vec<f32> = (0..2 * 5 * 4).map(|_| rng.gen_range(-9.0..9.0)).collect();
        let flow = FlowField::from_planes(5, 4, data).unwrap();
        let p = tmp("flow.flo");
        write_flow(&flow, &p).unwrap();
        let back = read_flow(&p).unwrap();
        assert_eq!(back.data, flow.data);

        let mut bytes = fs::read(&p).unwrap();
        bytes[0] ^= 0xff;
        fs::write(&p, &bytes).unwrap();
        assert!(read_flow(&p).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn mask_round_trip() {
        let mut rng = stream_rng(4, Stream::Annotations, 0);
        let mask =
            ValidityMask::from_data(8, 3, (0..24).map(|_| rng.gen_bool(0.5)).collect()).unwrap();
        let p = tmp("mask.pgm");
        write_mask(&mask, &p).unwrap();
        let back = read_mask(&p).unwrap();
        assert_eq!(back.data, mask.data);
    }

    #[test]
    fn ppm_round_trip_quantized() {
        let img = Image::new(3, 2, 2, vec![0.0, 0.25, 0.5, 1.0, 0.1, 0.9, 0.2, 0.8, 0.3, 0.7, 0.4, 0.6])
            .unwrap();
        let p = tmp("img.ppm");
        write_ppm(&img, &p).unwrap();
        let back = read_ppm(&p).unwrap();
        for (a, b) in back.data.iter().zip(&img.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}
