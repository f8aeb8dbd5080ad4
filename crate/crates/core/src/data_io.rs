//! Scene directories, pseudo ground truth files and image output.
//!
//! Layout of a scene directory:
//!
//! ```text
//! scene/frames/00000.png ...      RGB frames, one per time step
//! scene/cameras.txt               one line per frame: fx fy cx cy, R (row-major), t, near far
//! scene/flow/00000_fwd.raw ...    optional flow to the next frame
//! scene/flow/00001_bwd.raw ...    optional flow to the previous frame
//! scene/depth/00000.raw ...       optional per-frame depth
//! scene/masks/00000.png ...       optional dynamic-object masks (non-zero = dynamic)
//! ```
//!
//! Raw files are a 4-byte magic (`ZSTF` for flow, `ZSTD` for depth), then little-endian `u32`
//! height, width and channel count, then a little-endian `f32` payload in row-major
//! `[H, W, C]` order.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use nalgebra::{Matrix3, Vector3};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FLOW_MAGIC: [u8; 4] = *b"ZSTF";
pub const DEPTH_MAGIC: [u8; 4] = *b"ZSTD";
/// Frame sizes are padded up to a multiple of this on load.
pub const SIZE_MULTIPLE: usize = 4;

/// Flow from one frame to its temporal neighbors, each `[H, W, 2]` in pixels (x, y).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlowPair {
    pub forward: Option<Tensor>,
    pub backward: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneBundle {
    pub scene_id: String,
    /// `[3, H, W]` in `[0, 1]`.
    pub frames: Vec<Tensor>,
    pub cameras: Vec<Camera>,
    pub flow: Option<Vec<FlowPair>>,
    /// `[H, W]` camera-space depth.
    pub depth: Option<Vec<Tensor>>,
    /// Row-major dynamic-object masks.
    pub masks: Option<Vec<Vec<bool>>>,
    /// Size before padding.
    pub original_hw: (usize, usize),
}

impl SceneBundle {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn hw(&self) -> (usize, usize) {
        let s = self.frames[0].shape();
        (s[1], s[2])
    }

    /// Flow from frame `t` to frame `k = t ± 1`.
    pub fn flow_between(&self, t: usize, k: usize) -> Option<&Tensor> {
        let pair = self.flow.as_ref()?.get(t)?;
        if k == t + 1 {
            pair.forward.as_ref()
        } else if k + 1 == t {
            pair.backward.as_ref()
        } else {
            None
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::invalid(format!("scene {} has no frames", self.scene_id)));
        }
        if self.cameras.len() != self.frames.len() {
            return Err(Error::shape(format!(
                "scene {}: {} cameras for {} frames",
                self.scene_id,
                self.cameras.len(),
                self.frames.len()
            )));
        }
        let (h, w) = self.hw();
        for (i, (f, c)) in self.frames.iter().zip(&self.cameras).enumerate() {
            if f.shape() != [3, h, w] {
                return Err(Error::shape(format!(
                    "frame {i} is {:?}, expected [3, {h}, {w}]",
                    f.shape()
                )));
            }
            if (c.height, c.width) != (h, w) {
                return Err(Error::shape(format!(
                    "camera {i} is {}x{}, frames are {h}x{w}",
                    c.height, c.width
                )));
            }
        }
        if let Some(flow) = &self.flow {
            if flow.len() != self.frames.len() {
                return Err(Error::shape(format!(
                    "{} flow entries for {} frames",
                    flow.len(),
                    self.len()
                )));
            }
            for (i, p) in flow.iter().enumerate() {
                for f in p.forward.iter().chain(&p.backward) {
                    if f.shape() != [h, w, 2] {
                        return Err(Error::shape(format!(
                            "flow {i} is {:?}, expected [{h}, {w}, 2]",
                            f.shape()
                        )));
                    }
                }
            }
        }
        if let Some(depth) = &self.depth {
            if depth.len() != self.frames.len() || depth.iter().any(|d| d.shape() != [h, w]) {
                return Err(Error::shape("depth maps must match frame count and size"));
            }
        }
        if let Some(masks) = &self.masks {
            if masks.len() != self.frames.len() || masks.iter().any(|m| m.len() != h * w) {
                return Err(Error::shape("masks must match frame count and size"));
            }
        }
        Ok(())
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

/// Writes a `[3, H, W]` or `[1, H, W]` image in `[0, 1]` as 8-bit PNG, rounding half to even.
pub fn write_png(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = match *image.shape() {
        [c @ (1 | 3), h, w] => (c, h, w),
        ref s => return Err(Error::shape(format!("cannot write image of shape {s:?}"))),
    };
    let d = image.data();
    let result = if c == 3 {
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            Rgb([quantize(d[i]), quantize(d[h * w + i]), quantize(d[2 * h * w + i])])
        })
        .save(path)
    } else {
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            Luma([quantize(d[y as usize * w + x as usize])])
        })
        .save(path)
    };
    result.map_err(|e| Error::format(path, e.to_string()))
}

/// Reads a PNG as `[3, H, W]` in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::format(path, e.to_string()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + i] = p[c] as f64 / 255.0;
        }
    }
    Ok(Tensor::new(vec![3, h, w], data))
}

fn write_mask(path: &Path, mask: &[bool], h: usize, w: usize) -> Result<()> {
    let t = Tensor::new(vec![1, h, w], mask.iter().map(|&m| m as u8 as f64).collect());
    write_png(path, &t)
}

fn read_mask(path: &Path) -> Result<(Vec<bool>, usize, usize)> {
    let img = image::open(path)
        .map_err(|e| Error::format(path, e.to_string()))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.pixels().map(|p| p[0] > 0).collect(), h, w))
}

/// Writes `[H, W, C]` (or `[H, W]`) data as a raw float file.
pub fn write_raw(path: &Path, magic: [u8; 4], data: &Tensor) -> Result<()> {
    let (h, w, c) = match *data.shape() {
        [h, w] => (h, w, 1),
        [h, w, c] => (h, w, c),
        ref s => return Err(Error::shape(format!("cannot write raw array of shape {s:?}"))),
    };
    let mut buf = Vec::with_capacity(16 + 4 * data.len());
    buf.extend_from_slice(&magic);
    for d in [h, w, c] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Reads a raw float file as `[H, W, C]`.
pub fn read_raw(path: &Path, magic: [u8; 4]) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(Error::format(path, "truncated header"));
    }
    if bytes[..4] != magic {
        return Err(Error::format(
            path,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..4]),
                String::from_utf8_lossy(&magic)
            ),
        ));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::format(path, "header overflow"))?;
    if bytes.len() != 16 + 4 * n {
        return Err(Error::format(
            path,
            format!("payload has {} bytes, header implies {}", bytes.len() - 16, 4 * n),
        ));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Ok(Tensor::new(vec![h, w, c], data))
}

pub fn read_flow(path: &Path) -> Result<Tensor> {
    let t = read_raw(path, FLOW_MAGIC)?;
    if t.shape()[2] != 2 {
        return Err(Error::format(
            path,
            format!("flow must have 2 channels, found {}", t.shape()[2]),
        ));
    }
    Ok(t)
}

pub fn read_depth(path: &Path) -> Result<Tensor> {
    let t = read_raw(path, DEPTH_MAGIC)?;
    let s = t.shape().to_vec();
    if s[2] != 1 {
        return Err(Error::format(
            path,
            format!("depth must have 1 channel, found {}", s[2]),
        ));
    }
    Ok(t.reshape(vec![s[0], s[1]]))
}

fn format_camera(c: &Camera) -> String {
    let mut v = vec![c.k[(0, 0)], c.k[(1, 1)], c.k[(0, 2)], c.k[(1, 2)]];
    v.extend(c.r.transpose().iter());
    v.extend(c.t.iter());
    v.extend([c.near, c.far]);
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

/// Parses `cameras.txt`; blank lines and `#` comments are skipped.
pub fn parse_cameras(path: &Path, text: &str, height: usize, width: usize) -> Result<Vec<Camera>> {
    let mut cams = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let v = line
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|_| err(format!("not a number: {s:?}"))))
            .collect::<Result<Vec<f64>>>()?;
        if v.len() != 18 {
            return Err(err(format!("expected 18 values, found {}", v.len())));
        }
        let k = Matrix3::new(v[0], 0.0, v[2], 0.0, v[1], v[3], 0.0, 0.0, 1.0);
        let r = Matrix3::from_row_slice(&v[4..13]);
        let t = Vector3::new(v[13], v[14], v[15]);
        let cam = Camera::new(k, r, t, width, height, v[16], v[17]).map_err(|e| err(e.to_string()))?;
        cams.push(cam);
    }
    Ok(cams)
}

fn reflect(i: usize, n: usize) -> usize {
    if i < n {
        i
    } else if n == 1 {
        0
    } else {
        2 * (n - 1) - i
    }
}

fn padded(n: usize) -> usize {
    n.div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE
}

/// Reflect-pads the two spatial axes of `[C, H, W]` (`channels_last == false`) or `[H, W, C]`
/// / `[H, W]` data to `(ph, pw)`.
pub fn reflect_pad(t: &Tensor, ph: usize, pw: usize, channels_last: bool) -> Tensor {
    let s = t.shape();
    let (c, h, w) = match (s.len(), channels_last) {
        (2, _) => (1, s[0], s[1]),
        (3, false) => (s[0], s[1], s[2]),
        _ => (s[2], s[0], s[1]),
    };
    if (h, w) == (ph, pw) {
        return t.clone();
    }
    let d = t.data();
    let mut out = vec![0.0; c * ph * pw];
    for y in 0..ph {
        let sy = reflect(y, h);
        for x in 0..pw {
            let sx = reflect(x, w);
            for ch in 0..c {
                let (src, dst) = if channels_last {
                    ((sy * w + sx) * c + ch, (y * pw + x) * c + ch)
                } else {
                    (ch * h * w + sy * w + sx, ch * ph * pw + y * pw + x)
                };
                out[dst] = d[src];
            }
        }
    }
    let shape = match (s.len(), channels_last) {
        (2, _) => vec![ph, pw],
        (3, false) => vec![c, ph, pw],
        _ => vec![ph, pw, c],
    };
    Tensor::new(shape, out)
}

fn frame_name(i: usize) -> String {
    format!("{i:05}")
}

fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut frames = Vec::new();
    while dir.join(format!("{}.png", frame_name(frames.len()))).is_file() {
        frames.push(dir.join(format!("{}.png", frame_name(frames.len()))));
    }
    if frames.is_empty() {
        return Err(Error::format(
            dir,
            "no frames found (expected 00000.png, 00001.png, ...)",
        ));
    }
    Ok(frames)
}

/// Loads a scene directory; frames, flow, depth and masks are reflect-padded to a multiple of 4.
pub fn load_scene(path: &Path) -> Result<SceneBundle> {
    let frame_paths = list_frames(&path.join("frames"))?;
    let frames = frame_paths.iter().map(|p| read_png(p)).collect::<Result<Vec<_>>>()?;
    let (h, w) = (frames[0].shape()[1], frames[0].shape()[2]);
    for (p, f) in frame_paths.iter().zip(&frames) {
        if f.shape() != [3, h, w] {
            return Err(Error::format(
                p,
                format!("frame is {}x{}, first frame is {h}x{w}", f.shape()[1], f.shape()[2]),
            ));
        }
    }
    let (ph, pw) = (padded(h), padded(w));
    let cam_path = path.join("cameras.txt");
    let text = fs::read_to_string(&cam_path).map_err(|e| Error::io(&cam_path, e))?;
    let cameras = parse_cameras(&cam_path, &text, ph, pw)?;
    if cameras.len() != frames.len() {
        return Err(Error::format(
            &cam_path,
            format!("{} cameras for {} frames", cameras.len(), frames.len()),
        ));
    }
    let n = frames.len();
    let check = |p: &Path, t: &Tensor| -> Result<()> {
        if t.shape()[..2] != [h, w] {
            return Err(Error::format(
                p,
                format!("size {:?} does not match frames {h}x{w}", &t.shape()[..2]),
            ));
        }
        Ok(())
    };

    let flow_dir = path.join("flow");
    let flow = if flow_dir.is_dir() {
        let mut pairs = Vec::with_capacity(n);
        for i in 0..n {
            let load = |suffix: &str, present: bool| -> Result<Option<Tensor>> {
                let p = flow_dir.join(format!("{}_{suffix}.raw", frame_name(i)));
                if !present || !p.is_file() {
                    return Ok(None);
                }
                let f = read_flow(&p)?;
                check(&p, &f)?;
                Ok(Some(reflect_pad(&f, ph, pw, true)))
            };
            let forward = load("fwd", i + 1 < n)?;
            let backward = load("bwd", i > 0)?;
            pairs.push(FlowPair { forward, backward });
        }
        Some(pairs)
    } else {
        log::warn!("{}: no flow directory, flow supervision disabled", path.display());
        None
    };

    let depth_dir = path.join("depth");
    let depth = if depth_dir.is_dir() {
        let maps = (0..n)
            .map(|i| {
                let p = depth_dir.join(format!("{}.raw", frame_name(i)));
                let d = read_depth(&p)?;
                check(&p, &d)?;
                Ok(reflect_pad(&d, ph, pw, true))
            })
            .collect::<Result<Vec<_>>>()?;
        Some(maps)
    } else {
        log::warn!("{}: no depth directory, depth supervision disabled", path.display());
        None
    };

    let mask_dir = path.join("masks");
    let masks = if mask_dir.is_dir() {
        let ms = (0..n)
            .map(|i| {
                let p = mask_dir.join(format!("{}.png", frame_name(i)));
                let (m, mh, mw) = read_mask(&p)?;
                if (mh, mw) != (h, w) {
                    return Err(Error::format(&p, format!("mask is {mh}x{mw}, frames are {h}x{w}")));
                }
                let t = Tensor::new(vec![h, w], m.iter().map(|&b| b as u8 as f64).collect());
                Ok(reflect_pad(&t, ph, pw, true).data().iter().map(|&v| v > 0.5).collect())
            })
            .collect::<Result<Vec<Vec<bool>>>>()?;
        Some(ms)
    } else {
        None
    };

    let scene_id = path
        .canonicalize()
        .ok()
        .and_then(|p| p.file_name().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_else(|| path.display().to_string());
    let bundle = SceneBundle {
        scene_id,
        frames: frames.iter().map(|f| reflect_pad(f, ph, pw, false)).collect(),
        cameras,
        flow,
        depth,
        masks,
        original_hw: (h, w),
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Top-left `h × w` window of a `[C, H, W]` image.
pub fn crop_chw(t: &Tensor, h: usize, w: usize) -> Tensor {
    let s = t.shape();
    let (c, pw) = (s[0], s[2]);
    Tensor::from_fn(vec![c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        t.data()[ch * s[1] * pw + y * pw + x]
    })
}

fn crop_hwc(t: &Tensor, h: usize, w: usize) -> Tensor {
    let s = t.shape();
    let c = if s.len() == 3 { s[2] } else { 1 };
    let pw = s[1];
    let data = (0..h * w * c)
        .map(|i| {
            let (y, x, ch) = (i / (w * c), (i / c) % w, i % c);
            t.data()[(y * pw + x) * c + ch]
        })
        .collect();
    let shape = if s.len() == 3 { vec![h, w, c] } else { vec![h, w] };
    Tensor::new(shape, data)
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes a bundle in the scene layout, cropped to its original size.
pub fn save_scene(bundle: &SceneBundle, path: &Path) -> Result<()> {
    bundle.validate()?;
    let (h, w) = bundle.original_hw;
    ensure_dir(&path.join("frames"))?;
    for (i, f) in bundle.frames.iter().enumerate() {
        write_png(
            &path.join("frames").join(format!("{}.png", frame_name(i))),
            &crop_chw(f, h, w),
        )?;
    }
    let mut text = String::from("# fx fy cx cy r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz near far\n");
    for c in &bundle.cameras {
        text.push_str(&format_camera(c));
        text.push('\n');
    }
    let cam_path = path.join("cameras.txt");
    fs::write(&cam_path, text).map_err(|e| Error::io(&cam_path, e))?;
    if let Some(flow) = &bundle.flow {
        let dir = path.join("flow");
        ensure_dir(&dir)?;
        for (i, p) in flow.iter().enumerate() {
            if let Some(f) = &p.forward {
                write_raw(
                    &dir.join(format!("{}_fwd.raw", frame_name(i))),
                    FLOW_MAGIC,
                    &crop_hwc(f, h, w),
                )?;
            }
            if let Some(f) = &p.backward {
                write_raw(
                    &dir.join(format!("{}_bwd.raw", frame_name(i))),
                    FLOW_MAGIC,
                    &crop_hwc(f, h, w),
                )?;
            }
        }
    }
    if let Some(depth) = &bundle.depth {
        let dir = path.join("depth");
        ensure_dir(&dir)?;
        for (i, d) in depth.iter().enumerate() {
            write_raw(
                &dir.join(format!("{}.raw", frame_name(i))),
                DEPTH_MAGIC,
                &crop_hwc(d, h, w),
            )?;
        }
    }
    if let Some(masks) = &bundle.masks {
        let dir = path.join("masks");
        ensure_dir(&dir)?;
        let (_, pw) = bundle.hw();
        for (i, m) in masks.iter().enumerate() {
            let cropped: Vec<bool> = (0..h * w).map(|j| m[(j / w) * pw + j % w]).collect();
            write_mask(&dir.join(format!("{}.png", frame_name(i))), &cropped, h, w)?;
        }
    }
    Ok(())
}

/// Writes rendered `[3, H, W]` images as `00000.png, 00001.png, ...`.
pub fn save_render(images: &[Tensor], dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let p = dir.join(format!("{}.png", frame_name(i)));
            write_png(&p, img)?;
            Ok(p)
        })
        .collect()
}

/// Reads `00000.png, 00001.png, ...` from `dir`.
pub fn load_renders(dir: &Path) -> Result<Vec<Tensor>> {
    list_frames(dir)?.iter().map(|p| read_png(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_round_trip_and_magic_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.raw");
        let t = Tensor::from_fn(vec![3, 5, 2], |i| (i as f32 * 0.37 - 2.0) as f64);
        write_raw(&p, FLOW_MAGIC, &t).unwrap();
        assert_eq!(read_flow(&p).unwrap(), t);
        let err = read_depth(&p).unwrap_err().to_string();
        assert!(err.contains("a.raw") && err.contains("magic"), "{err}");
    }

    #[test]
    fn png_round_trip_within_one_level() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let t = Tensor::from_fn(vec![3, 4, 6], |i| (i as f64 * 0.0173) % 1.0);
        write_png(&p, &t).unwrap();
        let back = read_png(&p).unwrap();
        assert!(t.zip_map(&back, |a, b| (a - b).abs()).max_abs() <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn quantization_rounds_half_to_even() {
        assert_eq!(quantize(0.5 / 255.0), 0);
        assert_eq!(quantize(1.5 / 255.0), 2);
        assert_eq!(quantize(2.5 / 255.0), 2);
        assert_eq!(quantize(-1.0), 0);
        assert_eq!(quantize(2.0), 255);
    }

    #[test]
    fn reflect_padding_mirrors_without_repeating_edge() {
        let t = Tensor::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0]);
        let p = reflect_pad(&t, 1, 4, false);
        assert_eq!(p.data(), &[1.0, 2.0, 3.0, 2.0]);
    }

    #[test]
    fn camera_parse_reports_line() {
        let text = "# header\n1 1 0 0 1 0 0 0 1 0 0 0 1 0 0 0 1 5\n1 1 0 0 1 0 0 0 1 0 0 0 1 0 0 x 1 5\n";
        let err = parse_cameras(Path::new("cameras.txt"), text, 4, 4).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
    }
}
