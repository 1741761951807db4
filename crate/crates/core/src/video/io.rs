use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::ops::Range;
use std::path::Path;

use super::FrameClip;
use crate::error::{Error, Result};

const RVF_MAGIC: &[u8; 4] = b"RVF1";
const RVF_HEADER_LEN: u64 = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RvfHeader {
    pub width: u32,
    pub height: u32,
    pub fps_milli: u32,
    pub frame_count: u32,
}

impl RvfHeader {
    pub fn fps(&self) -> f64 {
        self.fps_milli as f64 / 1000.0
    }

    fn frame_bytes(&self) -> u64 {
        self.width as u64 * self.height as u64 * 3
    }
}

fn parse_header(path: &Path, buf: &[u8; 20]) -> Result<RvfHeader> {
    if &buf[..4] != RVF_MAGIC {
        return Err(Error::format(path, "bad magic, expected RVF1"));
    }
    let word = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().unwrap());
    let header = RvfHeader { width: word(4), height: word(8), fps_milli: word(12), frame_count: word(16) };
    if header.width == 0 || header.height == 0 || header.frame_count == 0 || header.fps_milli == 0 {
        return Err(Error::format(path, format!("degenerate header {header:?}")));
    }
    Ok(header)
}

fn open_rvf(path: &Path) -> Result<(BufReader<File>, RvfHeader)> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let len = file.metadata().map_err(|e| Error::io(format!("reading {}", path.display()), e))?.len();
    let mut r = BufReader::new(file);
    let mut buf = [0u8; 20];
    r.read_exact(&mut buf).map_err(|_| Error::format(path, "truncated header"))?;
    let header = parse_header(path, &buf)?;
    let want = RVF_HEADER_LEN + header.frame_bytes() * header.frame_count as u64;
    if len < want {
        return Err(Error::format(path, format!("truncated: {len} bytes, header implies {want}")));
    }
    Ok((r, header))
}

pub fn read_rvf_header(path: &Path) -> Result<RvfHeader> {
    open_rvf(path).map(|(_, h)| h)
}

pub fn read_rvf(path: &Path) -> Result<FrameClip> {
    let (_, header) = open_rvf(path)?;
    read_rvf_frames(path, 0..header.frame_count as usize)
}

/// Reads only frames `range`, seeking past the rest.
pub fn read_rvf_frames(path: &Path, range: Range<usize>) -> Result<FrameClip> {
    let (mut r, header) = open_rvf(path)?;
    if range.start >= range.end || range.end > header.frame_count as usize {
        return Err(Error::InvalidArgument(format!(
            "frame range {range:?} outside {} frames of {}",
            header.frame_count,
            path.display()
        )));
    }
    let fb = header.frame_bytes();
    r.seek(SeekFrom::Start(RVF_HEADER_LEN + fb * range.start as u64))
        .map_err(|e| Error::io(format!("seeking {}", path.display()), e))?;
    let mut frames = vec![0u8; fb as usize * range.len()];
    r.read_exact(&mut frames).map_err(|_| Error::format(path, "truncated frame data"))?;
    FrameClip::new(
        frames,
        range.len(),
        header.height as usize,
        header.width as usize,
        header.fps(),
        path.display().to_string(),
    )
}

pub fn write_rvf(path: &Path, clip: &FrameClip) -> Result<()> {
    let ctx = || format!("writing {}", path.display());
    let dims = [clip.width(), clip.height(), (clip.fps() * 1000.0).round() as usize, clip.num_frames()];
    let mut header = Vec::with_capacity(RVF_HEADER_LEN as usize);
    header.extend_from_slice(RVF_MAGIC);
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("{d} does not fit the rvf header")))?;
        header.extend_from_slice(&d.to_le_bytes());
    }
    let file = File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&header).map_err(|e| Error::io(ctx(), e))?;
    w.write_all(clip.bytes()).map_err(|e| Error::io(ctx(), e))?;
    w.flush().map_err(|e| Error::io(ctx(), e))
}

/// Reads the next whitespace-delimited header token, skipping `#` comments.
fn ppm_token(data: &[u8], pos: &mut usize) -> Option<usize> {
    loop {
        while *pos < data.len() && data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < data.len() && data[*pos] == b'#' {
            while *pos < data.len() && data[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < data.len() && data[*pos].is_ascii_digit() {
        *pos += 1;
    }
    std::str::from_utf8(&data[start..*pos]).ok()?.parse().ok()
}

fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let data = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if !data.starts_with(b"P6") {
        return Err(Error::format(path, "not a binary PPM (P6)"));
    }
    let mut pos = 2;
    let (Some(w), Some(h), Some(maxval)) =
        (ppm_token(&data, &mut pos), ppm_token(&data, &mut pos), ppm_token(&data, &mut pos))
    else {
        return Err(Error::format(path, "malformed PPM header"));
    };
    if maxval != 255 {
        return Err(Error::format(path, format!("maxval {maxval} unsupported, expected 255")));
    }
    if w == 0 || h == 0 {
        return Err(Error::format(path, "zero image extent"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = w * h * 3;
    if data.len() < pos + n {
        return Err(Error::format(path, "truncated raster"));
    }
    Ok((w, h, data[pos..pos + n].to_vec()))
}

/// Reads every `.ppm` file in `dir`, in lexicographic name order.
pub fn read_ppm_dir(dir: &Path, fps: f64) -> Result<FrameClip> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::format(dir, "no .ppm frames"));
    }
    let mut frames = Vec::new();
    let mut dims = None;
    for p in &paths {
        let (w, h, raster) = read_ppm(p)?;
        match dims {
            None => dims = Some((w, h)),
            Some(d) if d != (w, h) => {
                return Err(Error::format(p, format!("frame is {w}x{h}, previous frames {}x{}", d.0, d.1)));
            }
            _ => {}
        }
        frames.extend_from_slice(&raster);
    }
    let (w, h) = dims.unwrap();
    FrameClip::new(frames, paths.len(), h, w, fps, dir.display().to_string())
}
