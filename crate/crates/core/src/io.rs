//! File codecs: 8-bit PNG images, binary PGM grids, tensor dumps. Every write
//! goes to a temporary sibling first and is renamed into place.

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use log::warn;

use crate::error::{Error, Result};
use crate::guidance::IMAGE_RES;
use crate::localization::{LabelMap, RoIMask, LATENT_RES};
use crate::tensor::{bilinear_resize, Tensor};
use crate::tensor_io::{encode_tensor, read_tensor};

/// Write `bytes` to `path` via a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::format(path, "not a file path"))?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// Decode an 8-bit PNG as raw `H×W×3` values in `[0, 1]`. Grayscale is replicated
/// to three channels and alpha is dropped; paletted and 16-bit files are rejected.
pub fn decode_png(path: &Path) -> Result<Tensor> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(path, format!("cannot decode PNG: {e}")))?;
    let (color, depth) = {
        let info = reader.info();
        (info.color_type, info.bit_depth)
    };
    if color == png::ColorType::Indexed {
        return Err(Error::format(
            path,
            "paletted PNG is not supported; convert to RGB",
        ));
    }
    if depth != png::BitDepth::Eight {
        return Err(Error::format(
            path,
            format!(
                "{}-bit PNG is not supported; only 8-bit channels are",
                depth as u8
            ),
        ));
    }
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, format!("cannot decode PNG: {e}")))?;
    let bytes = &buf[..frame.buffer_size()];
    let (w, h) = (frame.width as usize, frame.height as usize);
    let channels = color.samples();
    let row_len = frame.line_size;
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let row = &bytes[y * row_len..y * row_len + w * channels];
        for px in row.chunks_exact(channels) {
            let rgb = match color {
                png::ColorType::Grayscale | png::ColorType::GrayscaleAlpha => [px[0]; 3],
                _ => [px[0], px[1], px[2]],
            };
            data.extend(rgb.iter().map(|&b| b as f32 / 255.0));
        }
    }
    Tensor::new(&[h, w, 3], data).map_err(|e| Error::format(path, e.to_string()))
}

/// Load a pipeline input image: [`decode_png`], then bilinear-resized to
/// 256×256 with a warning when the size differs.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = decode_png(path)?;
    let (h, w, _) = img.hwc()?;
    if (h, w) != (IMAGE_RES, IMAGE_RES) {
        warn!(
            "{}: {w}×{h} image resized to {IMAGE_RES}×{IMAGE_RES}",
            path.display()
        );
        return bilinear_resize(&img, IMAGE_RES, IMAGE_RES);
    }
    Ok(img)
}

/// Encode an `H×W×3` tensor in `[0, 1]` as 8-bit RGB PNG bytes.
pub fn encode_png(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w, c) = image.hwc()?;
    if c != 3 {
        return Err(Error::shape(format!(
            "PNG export needs 3 channels, got {c}"
        )));
    }
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::InvalidArgument(format!("PNG encode: {e}")))?;
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::InvalidArgument(format!("PNG encode: {e}")))?;
    }
    Ok(out)
}

pub fn save_png(image: &Tensor, path: &Path) -> Result<()> {
    write_atomic(path, &encode_png(image)?)
}

/// A decoded binary PGM: row-major samples up to `maxval`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

impl Pgm {
    /// Serialize as `P5`; samples are one byte when `maxval < 256`, else two
    /// bytes big-endian.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval < 256 {
            out.extend(self.samples.iter().map(|&s| s as u8));
        } else {
            out.extend(self.samples.iter().flat_map(|s| s.to_be_bytes()));
        }
        out
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::format(origin, format!("bad PGM: {msg}"));
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            // Skip whitespace and comments.
            loop {
                match bytes.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(_) => break,
                    None => return Err(bad("truncated header")),
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
                pos += 1;
            }
            fields.push(&bytes[start..pos]);
        }
        if fields[0] != b"P5" {
            return Err(bad("expected magic P5"));
        }
        let num = |f: &[u8], what: &str| -> Result<usize> {
            std::str::from_utf8(f)
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(&format!("invalid {what}")))
        };
        let width = num(fields[1], "width")?;
        let height = num(fields[2], "height")?;
        let maxval = num(fields[3], "maxval")?;
        if width == 0 || height == 0 {
            return Err(bad("zero size"));
        }
        if !(1..=65535).contains(&maxval) {
            return Err(bad("maxval outside 1..=65535"));
        }
        // Exactly one whitespace byte separates the header from the raster.
        if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
            return Err(bad("truncated header"));
        }
        pos += 1;
        let n = width * height;
        let raster = &bytes[pos..];
        let samples: Vec<u16> = if maxval < 256 {
            if raster.len() != n {
                return Err(bad(&format!(
                    "expected {n} bytes of data, got {}",
                    raster.len()
                )));
            }
            raster.iter().map(|&b| b as u16).collect()
        } else {
            if raster.len() != 2 * n {
                return Err(bad(&format!(
                    "expected {} bytes of data, got {}",
                    2 * n,
                    raster.len()
                )));
            }
            raster
                .chunks_exact(2)
                .map(|p| u16::from_be_bytes([p[0], p[1]]))
                .collect()
        };
        if samples.iter().any(|&s| s as usize > maxval) {
            return Err(bad("sample exceeds maxval"));
        }
        Ok(Self {
            width,
            height,
            maxval: maxval as u16,
            samples,
        })
    }
}

pub fn load_pgm(path: &Path) -> Result<Pgm> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Pgm::decode(&bytes, path)
}

pub fn save_pgm(pgm: &Pgm, path: &Path) -> Result<()> {
    write_atomic(path, &pgm.encode())
}

/// RoI mask as a 64×64 PGM with values 0 / 255.
pub fn mask_to_pgm(mask: &RoIMask) -> Pgm {
    Pgm {
        width: LATENT_RES,
        height: LATENT_RES,
        maxval: 255,
        samples: mask
            .cells()
            .iter()
            .map(|&m| if m { 255 } else { 0 })
            .collect(),
    }
}

/// Binary mask from a 64×64 or 256×256 PGM; any non-zero sample is set. The
/// larger size is max-pooled down to 64×64.
pub fn load_mask(path: &Path) -> Result<RoIMask> {
    let pgm = load_pgm(path)?;
    if pgm.width != pgm.height || !(pgm.width == LATENT_RES || pgm.width == IMAGE_RES) {
        return Err(Error::format(
            path,
            format!(
                "mask must be {LATENT_RES}×{LATENT_RES} or {IMAGE_RES}×{IMAGE_RES}, got {}×{}",
                pgm.width, pgm.height
            ),
        ));
    }
    let grid: Vec<bool> = pgm.samples.iter().map(|&s| s > 0).collect();
    RoIMask::from_grid(pgm.width, &grid)
}

/// Label map as a PGM of raw ids; 8-bit when the ids fit, 16-bit otherwise.
pub fn labels_to_pgm(seg: &LabelMap) -> Result<Pgm> {
    let max_id = seg.k.saturating_sub(1);
    if max_id > u16::MAX as usize {
        return Err(Error::InvalidArgument(format!(
            "{} labels do not fit a 16-bit PGM",
            seg.k
        )));
    }
    Ok(Pgm {
        width: seg.side,
        height: seg.side,
        maxval: if max_id < 256 { 255 } else { u16::MAX },
        samples: seg.labels.iter().map(|&l| l as u16).collect(),
    })
}

pub fn save_tensor(t: &Tensor, path: &Path) -> Result<()> {
    write_atomic(path, &encode_tensor(t))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor(BufReader::new(file), &path.display().to_string())
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn ensure_dir(path: &Path) -> Result<PathBuf> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prng::Prng;

    fn write_png(
        path: &Path,
        w: u32,
        h: u32,
        color: png::ColorType,
        depth: png::BitDepth,
        data: &[u8],
    ) {
        let f = fs::File::create(path).unwrap();
        let mut enc = png::Encoder::new(f, w, h);
        enc.set_color(color);
        enc.set_depth(depth);
        if color == png::ColorType::Indexed {
            enc.set_palette(vec![0u8, 0, 0, 255, 255, 255]);
        }
        let mut wr = enc.write_header().unwrap();
        wr.write_image_data(data).unwrap();
    }

    #[test]
    fn png_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut p = Prng::new(1);
        let img = Tensor::from_fn(&[256, 256, 3], |_| p.next_uniform() as f32).unwrap();
        save_png(&img, &path).unwrap();
        let back = load_png(&path).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn hand_crafted_rgb_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.png");
        let bytes: Vec<u8> = (0..48).map(|i| (i * 5) as u8).collect();
        write_png(
            &path,
            4,
            4,
            png::ColorType::Rgb,
            png::BitDepth::Eight,
            &bytes,
        );
        let t = decode_png(&path).unwrap();
        assert_eq!(t.dims(), &[4, 4, 3]);
        for (i, &v) in t.data().iter().enumerate() {
            assert_eq!(v, (i * 5) as f32 / 255.0);
        }
        // The pipeline loader upsamples to the working size.
        assert_eq!(load_png(&path).unwrap().dims(), &[256, 256, 3]);
    }

    #[test]
    fn grayscale_and_alpha_promotion() {
        let dir = tempfile::tempdir().unwrap();
        let g = dir.path().join("g.png");
        write_png(
            &g,
            2,
            1,
            png::ColorType::Grayscale,
            png::BitDepth::Eight,
            &[0, 51],
        );
        let t = decode_png(&g).unwrap();
        assert_eq!(t.data(), &[0.0, 0.0, 0.0, 0.2, 0.2, 0.2]);
        let a = dir.path().join("a.png");
        write_png(
            &a,
            1,
            1,
            png::ColorType::Rgba,
            png::BitDepth::Eight,
            &[255, 0, 51, 7],
        );
        assert_eq!(decode_png(&a).unwrap().data(), &[1.0, 0.0, 0.2]);
    }

    #[test]
    fn rejects_palette_and_16_bit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.png");
        write_png(
            &p,
            2,
            1,
            png::ColorType::Indexed,
            png::BitDepth::Eight,
            &[0, 1],
        );
        let e = decode_png(&p).unwrap_err().to_string();
        assert!(e.contains("paletted"), "{e}");
        let s = dir.path().join("s.png");
        write_png(
            &s,
            1,
            1,
            png::ColorType::Rgb,
            png::BitDepth::Sixteen,
            &[0; 6],
        );
        let e = decode_png(&s).unwrap_err().to_string();
        assert!(e.contains("16-bit"), "{e}");
        let junk = dir.path().join("j.png");
        fs::write(&junk, b"not a png").unwrap();
        assert!(decode_png(&junk).is_err());
        assert!(matches!(
            decode_png(&dir.path().join("missing.png")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn pgm_byte_fixture() {
        let pgm = Pgm {
            width: 2,
            height: 2,
            maxval: 255,
            samples: vec![0, 255, 7, 1],
        };
        let bytes = pgm.encode();
        assert_eq!(bytes, b"P5\n2 2\n255\n\x00\xff\x07\x01");
        assert_eq!(Pgm::decode(&bytes, Path::new("x")).unwrap(), pgm);
        let commented = b"P5 # comment\n2\n2 255\n\x00\xff\x07\x01";
        assert_eq!(Pgm::decode(commented, Path::new("x")).unwrap(), pgm);
        assert!(Pgm::decode(b"P2\n2 2\n255\n0 0 0 0", Path::new("x")).is_err());
        assert!(Pgm::decode(b"P5\n2 2\n255\n\x00", Path::new("x")).is_err());
        assert!(Pgm::decode(b"P5\n2 2\n3\n\x00\x00\x00\x09", Path::new("x")).is_err());
    }

    #[test]
    fn mask_roundtrip_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mask = RoIMask::from_fn(|r, c| (r * 7 + c * 3) % 5 == 0);
        save_pgm(&mask_to_pgm(&mask), &path).unwrap();
        assert_eq!(load_mask(&path).unwrap(), mask);
        save_pgm(&mask_to_pgm(&RoIMask::empty()), &path).unwrap();
        let header = b"P5\n64 64\n255\n".len() as u64;
        assert_eq!(fs::metadata(&path).unwrap().len(), header + 64 * 64);
    }

    #[test]
    fn large_mask_is_max_pooled() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.pgm");
        let mut samples = vec![0u16; 256 * 256];
        samples[5 * 256 + 9] = 255;
        save_pgm(
            &Pgm {
                width: 256,
                height: 256,
                maxval: 255,
                samples,
            },
            &path,
        )
        .unwrap();
        let m = load_mask(&path).unwrap();
        assert_eq!(m.count(), 1);
        assert!(m.get(1, 2));
        save_pgm(
            &Pgm {
                width: 32,
                height: 32,
                maxval: 255,
                samples: vec![0; 1024],
            },
            &path,
        )
        .unwrap();
        assert!(load_mask(&path).is_err());
    }

    #[test]
    fn labels_roundtrip_8_and_16_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.pgm");
        for k in [3usize, 300] {
            let labels: Vec<u32> = (0..16 * 16).map(|i| (i % k) as u32).collect();
            let seg = LabelMap::new(16, labels.clone(), k).unwrap();
            let pgm = labels_to_pgm(&seg).unwrap();
            save_pgm(&pgm, &path).unwrap();
            let back = load_pgm(&path).unwrap();
            assert_eq!(back, pgm);
            assert_eq!(back.maxval, if k <= 256 { 255 } else { 65535 });
            let ids: Vec<u32> = back.samples.iter().map(|&s| s as u32).collect();
            assert_eq!(ids, labels);
        }
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.lten");
        let t = Tensor::from_fn(&[3, 2], |i| i as f32).unwrap();
        save_tensor(&t, &path).unwrap();
        save_tensor(&t, &path).unwrap();
        assert_eq!(load_tensor(&path).unwrap(), t);
        let names: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names.len(), 1);
        assert!(write_atomic(&dir.path().join("no/such/dir/x"), b"1").is_err());
    }
}
